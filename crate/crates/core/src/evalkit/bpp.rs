use num_integer::Integer;

use crate::codec::Bitstream;
use crate::{Error, Result};

/// Bits per pixel as a reduced fraction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BppRatio {
    pub numer: u64,
    pub denom: u64,
}

impl BppRatio {
    pub fn to_f64(self) -> f64 {
        self.numer as f64 / self.denom as f64
    }
}

/// `8 * bytes / (height * width)`, exactly.
pub fn bpp_ratio(bytes: usize, height: usize, width: usize) -> Result<BppRatio> {
    let pixels = (height as u64) * (width as u64);
    if pixels == 0 {
        return Err(Error::Dimension("bpp of an empty image".into()));
    }
    let bits = 8 * bytes as u64;
    let g = bits.gcd(&pixels).max(1);
    Ok(BppRatio { numer: bits / g, denom: pixels / g })
}

/// Bits per pixel of a whole container, header included.
pub fn bpp(bs: &Bitstream) -> Result<f64> {
    Ok(bpp_ratio(bs.len(), usize::from(bs.height), usize::from(bs.width))?.to_f64())
}

/// Parses the container header and returns its bits per pixel.
pub fn bpp_of_bytes(bytes: &[u8]) -> Result<f64> {
    let bs = Bitstream::from_bytes(bytes)?;
    if bs.height == 0 || bs.width == 0 {
        return Err(Error::Format("bitstream header has zero dimensions".into()));
    }
    bpp(&bs)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn container(payload: usize, h: u16, w: u16) -> Bitstream {
        Bitstream { q: 0, height: h, width: w, z_bytes: vec![0; payload / 2], y_bytes: vec![0; payload - payload / 2] }
    }

    #[test]
    fn one_bit_per_pixel() {
        let bs = container(8192 - 18, 256, 256);
        assert_eq!(bs.len(), 8192);
        assert_eq!(bpp(&bs).unwrap(), 1.0);
        assert_eq!(bpp_ratio(8192, 256, 256).unwrap(), BppRatio { numer: 1, denom: 1 });
    }

    #[test]
    fn header_only_and_linearity() {
        let empty = container(0, 100, 60);
        assert_eq!(bpp_of_bytes(&empty.to_bytes()).unwrap(), 8.0 * 18.0 / 6000.0);
        let a = bpp(&container(1000, 100, 60)).unwrap();
        let b = bpp(&container(2000, 100, 60)).unwrap();
        let header = 8.0 * 18.0 / 6000.0;
        assert!(((b - header) - 2.0 * (a - header)).abs() < 1e-12);
        assert_eq!(bpp_ratio(18, 100, 60).unwrap(), BppRatio { numer: 3, denom: 125 });
    }

    #[test]
    fn bad_header_is_a_format_error() {
        assert!(matches!(bpp_of_bytes(b"nope, not a stream at all"), Err(Error::Format(_))));
    }
}
