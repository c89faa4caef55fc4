use std::io::{Read, Write};
use std::path::Path;

use candle_core::{DType, Device, Tensor};

use crate::{Error, Result};

pub const TOKEN_MAGIC: &[u8; 4] = b"TOKG";
pub const TOKEN_VERSION: u8 = 1;

/// Semantic token matrix of shape `(dim, num)`; `num` is a perfect square so
/// the tokens can be laid back out on a `sqrt(num) x sqrt(num)` grid.
#[derive(Debug, Clone)]
pub struct TokenGrid {
    data: Tensor,
}

/// Integer square root when `n` is a perfect square.
pub fn exact_sqrt(n: usize) -> Option<usize> {
    let r = (n as f64).sqrt().round() as usize;
    (r * r == n).then_some(r)
}

impl TokenGrid {
    pub fn new(data: Tensor) -> Result<Self> {
        let (dim, num) = data
            .dims2()
            .map_err(|_| Error::Dimension(format!("token grid must be 2-D, got {:?}", data.dims())))?;
        if dim == 0 || exact_sqrt(num).is_none() || num == 0 {
            return Err(Error::Dimension(format!("token count {num} is not a positive perfect square")));
        }
        let v = data.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric("token grid contains non-finite entries".into()));
        }
        Ok(Self { data })
    }

    pub fn from_vec(dim: usize, num: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != dim * num {
            return Err(Error::Dimension(format!("{} values for a {dim}x{num} grid", values.len())));
        }
        Self::new(Tensor::from_vec(values, (dim, num), &Device::Cpu)?)
    }

    pub fn from_vec_f64(dim: usize, num: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != dim * num {
            return Err(Error::Dimension(format!("{} values for a {dim}x{num} grid", values.len())));
        }
        Self::new(Tensor::from_vec(values, (dim, num), &Device::Cpu)?)
    }

    /// Embedding dimension.
    pub fn dim(&self) -> usize {
        self.data.dims()[0]
    }

    /// Number of tokens.
    pub fn num(&self) -> usize {
        self.data.dims()[1]
    }

    /// Side of the token grid, `sqrt(num)`.
    pub fn side(&self) -> usize {
        exact_sqrt(self.num()).expect("validated on construction")
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn to_vec(&self) -> Result<Vec<f32>> {
        Ok(self.data.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?)
    }

    /// Serializes to the `.tok` layout: 16-byte header then row-major `f32` LE.
    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        let mut header = [0u8; 16];
        header[..4].copy_from_slice(TOKEN_MAGIC);
        header[4] = TOKEN_VERSION;
        header[8..12].copy_from_slice(&(self.dim() as u32).to_le_bytes());
        header[12..16].copy_from_slice(&(self.num() as u32).to_le_bytes());
        w.write_all(&header)?;
        let mut payload = Vec::with_capacity(4 * self.dim() * self.num());
        for v in self.to_vec()? {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&payload)?;
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut header = [0u8; 16];
        r.read_exact(&mut header)
            .map_err(|_| Error::Format("token file shorter than its header".into()))?;
        if &header[..4] != TOKEN_MAGIC {
            return Err(Error::Format("bad token file magic".into()));
        }
        if header[4] != TOKEN_VERSION {
            return Err(Error::Format(format!("unsupported token file version {}", header[4])));
        }
        let dim = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
        let num = u32::from_le_bytes(header[12..16].try_into().unwrap()) as usize;
        let mut payload = Vec::new();
        r.read_to_end(&mut payload)?;
        if payload.len() != 4 * dim * num {
            return Err(Error::Format(format!(
                "token payload has {} bytes, header promises {}",
                payload.len(),
                4 * dim * num
            )));
        }
        let values = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::from_vec(dim, num, values)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::read_from(bytes.as_slice())
    }
}

// Bilinear interpolation matrix (out x in), half-pixel centres, edge clamped.
fn bilinear_matrix(out: usize, inp: usize) -> Vec<f64> {
    let mut m = vec![0.0; out * inp];
    if out == inp {
        for i in 0..out {
            m[i * inp + i] = 1.0;
        }
        return m;
    }
    let scale = inp as f64 / out as f64;
    for o in 0..out {
        let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (inp - 1) as f64);
        let lo = src.floor() as usize;
        let hi = (lo + 1).min(inp - 1);
        let frac = src - lo as f64;
        m[o * inp + lo] += 1.0 - frac;
        m[o * inp + hi] += frac;
    }
    m
}

/// Reshapes `(B, dim, num)` tokens to a `sqrt(num) x sqrt(num)` map and
/// bilinearly resizes it to `(B, dim, height, width)`.
pub fn tokens_to_spatial_batch(tokens: &Tensor, height: usize, width: usize) -> Result<Tensor> {
    let (b, dim, num) = tokens.dims3()?;
    let side = exact_sqrt(num)
        .ok_or_else(|| Error::Dimension(format!("token count {num} is not a perfect square")))?;
    if height == 0 || width == 0 {
        return Err(Error::Dimension("target size must be positive".into()));
    }
    let dev = tokens.device();
    let dtype = tokens.dtype();
    let grid = tokens.contiguous()?.reshape((b * dim * side, side))?;
    let aw = Tensor::from_vec(bilinear_matrix(width, side), (width, side), dev)?.to_dtype(dtype)?;
    let ah = Tensor::from_vec(bilinear_matrix(height, side), (height, side), dev)?.to_dtype(dtype)?;
    // Resize columns, then rows.
    let cols = grid.matmul(&aw.t()?)?.reshape((b * dim, side, width))?;
    let rows = cols
        .transpose(1, 2)?
        .contiguous()?
        .reshape((b * dim * width, side))?
        .matmul(&ah.t()?)?
        .reshape((b * dim, width, height))?
        .transpose(1, 2)?
        .contiguous()?;
    Ok(rows.reshape((b, dim, height, width))?)
}

/// Single-grid form of [`tokens_to_spatial_batch`]: `(dim, height, width)`.
pub fn tokens_to_spatial(tokens: &TokenGrid, height: usize, width: usize) -> Result<Tensor> {
    let t = tokens_to_spatial_batch(&tokens.tensor().unsqueeze(0)?, height, width)?;
    Ok(t.squeeze(0)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(dim: usize, num: usize) -> TokenGrid {
        TokenGrid::from_vec(dim, num, (0..dim * num).map(|i| (i % 17) as f32 * 0.25).collect()).unwrap()
    }

    #[test]
    fn non_square_token_count_is_rejected() {
        let err = TokenGrid::from_vec(2, 3, vec![0.0; 6]).unwrap_err();
        assert!(matches!(err, Error::Dimension(_)));
    }

    #[test]
    fn non_finite_tokens_are_rejected() {
        let err = TokenGrid::from_vec(1, 1, vec![f32::NAN]).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)));
    }

    #[test]
    fn identity_resize_is_a_pure_reshape() {
        let t = ramp(64, 256);
        let s = tokens_to_spatial(&t, 16, 16).unwrap();
        assert_eq!(s.dims(), &[64, 16, 16]);
        assert_eq!(s.flatten_all().unwrap().to_vec1::<f32>().unwrap(), t.to_vec().unwrap());
    }

    #[test]
    fn upsampled_shape_and_constant_field() {
        let t = ramp(64, 256);
        assert_eq!(tokens_to_spatial(&t, 32, 32).unwrap().dims(), &[64, 32, 32]);
        let c = TokenGrid::from_vec(4, 16, vec![0.75; 64]).unwrap();
        for (h, w) in [(7, 9), (32, 32), (2, 2)] {
            let s = tokens_to_spatial(&c, h, w).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
            assert!(s.iter().all(|v| (v - 0.75).abs() < 1e-6));
        }
    }

    #[test]
    fn token_file_round_trip_and_header_layout() {
        let t = ramp(3, 4);
        let mut buf = Vec::new();
        t.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"TOKG");
        assert_eq!(buf[4], 1);
        assert_eq!(&buf[8..12], &3u32.to_le_bytes());
        assert_eq!(&buf[12..16], &4u32.to_le_bytes());
        assert_eq!(buf.len(), 16 + 4 * 12);
        let back = TokenGrid::read_from(buf.as_slice()).unwrap();
        assert_eq!(back.to_vec().unwrap(), t.to_vec().unwrap());
        buf[0] = b'X';
        assert!(matches!(TokenGrid::read_from(buf.as_slice()), Err(Error::Format(_))));
    }
}
