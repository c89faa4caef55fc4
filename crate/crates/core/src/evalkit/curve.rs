use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::evalkit::bpp::bpp_ratio;
use crate::evalkit::pareto::RaPoint;
use crate::image::ImageTensor;
use crate::{Error, Result};

/// PSNR of a perfect reconstruction is reported as this many dB.
pub const PSNR_CAP_DB: f64 = 100.0;

/// A codec that can be swept over its rate indices.
pub trait CurveCodec {
    fn q_levels(&self) -> usize;
    /// Codes and decodes `image` at `q`; returns the reconstruction and the
    /// container size in bytes.
    fn round_trip(&self, image: &ImageTensor, q: usize) -> Result<(ImageTensor, usize)>;
}

/// Quality or task score of a decoded image against its original.
pub trait Metric {
    fn name(&self) -> &str;
    fn evaluate(&self, original: &ImageTensor, decoded: &ImageTensor) -> Result<f64>;
}

/// Peak signal-to-noise ratio for `[0, 1]` images, capped at [`PSNR_CAP_DB`].
#[derive(Debug, Clone, Copy, Default)]
pub struct Psnr;

impl Metric for Psnr {
    fn name(&self) -> &str {
        "psnr"
    }

    fn evaluate(&self, original: &ImageTensor, decoded: &ImageTensor) -> Result<f64> {
        if original.dims() != decoded.dims() {
            return Err(Error::Dimension(format!(
                "psnr of {:?} against {:?}",
                original.dims(),
                decoded.dims()
            )));
        }
        let a = original.to_vec()?;
        let b = decoded.to_vec()?;
        let mse = a.iter().zip(&b).map(|(x, y)| f64::from(x - y).powi(2)).sum::<f64>() / a.len() as f64;
        if mse == 0.0 {
            return Ok(PSNR_CAP_DB);
        }
        Ok((-10.0 * mse.log10()).min(PSNR_CAP_DB))
    }
}

/// Lossless stand-in: returns the input and charges 8 bits per sample.
#[derive(Debug, Clone, Copy)]
pub struct IdentityCodec {
    pub q_levels: usize,
}

impl CurveCodec for IdentityCodec {
    fn q_levels(&self) -> usize {
        self.q_levels
    }

    fn round_trip(&self, image: &ImageTensor, _q: usize) -> Result<(ImageTensor, usize)> {
        let (c, h, w) = image.dims();
        Ok((image.clone(), c * h * w + crate::codec::bitstream::HEADER_LEN))
    }
}

/// One row of an RA-curve CSV.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub q: usize,
    pub bpp: f64,
    pub metric: f64,
    pub n_images: usize,
}

impl CurvePoint {
    pub fn ra_point(&self) -> Result<RaPoint> {
        RaPoint::new(self.bpp, self.metric)
    }
}

/// Averages bpp and metric over `images` for every `q`. Images whose metric
/// fails are left out of that `q`'s averages with a warning.
pub fn sweep_curve(images: &[ImageTensor], codec: &dyn CurveCodec, metric: &dyn Metric) -> Result<Vec<CurvePoint>> {
    if images.is_empty() {
        return Err(Error::Config("no images to sweep".into()));
    }
    let mut points = Vec::with_capacity(codec.q_levels());
    for q in 0..codec.q_levels() {
        let (mut bpp_sum, mut metric_sum, mut n) = (0.0, 0.0, 0usize);
        for (i, img) in images.iter().enumerate() {
            let (_, h, w) = img.dims();
            let (decoded, bytes) = codec.round_trip(img, q)?;
            match metric.evaluate(img, &decoded) {
                Ok(m) if m.is_finite() => {
                    bpp_sum += bpp_ratio(bytes, h, w)?.to_f64();
                    metric_sum += m;
                    n += 1;
                }
                Ok(m) => log::warn!("{} of image {i} at q={q} is {m}; excluded", metric.name()),
                Err(e) => log::warn!("{} failed on image {i} at q={q}: {e}; excluded", metric.name()),
            }
        }
        if n == 0 {
            return Err(Error::Numeric(format!("{} failed on every image at q={q}", metric.name())));
        }
        points.push(CurvePoint { q, bpp: bpp_sum / n as f64, metric: metric_sum / n as f64, n_images: n });
    }
    Ok(points)
}

/// Writes `q,bpp,metric,n_images` rows.
pub fn write_curve_csv(points: &[CurvePoint], path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for p in points {
        w.serialize(p)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_curve_csv(path: impl AsRef<Path>) -> Result<Vec<CurvePoint>> {
    let mut r = csv::Reader::from_path(path)?;
    let headers = r.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != ["q", "bpp", "metric", "n_images"] {
        return Err(Error::Format(format!("unexpected curve header {headers:?}")));
    }
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gray(v: f32, h: usize, w: usize) -> ImageTensor {
        ImageTensor::from_vec(3, h, w, vec![v; 3 * h * w]).unwrap()
    }

    #[test]
    fn identity_codec_hits_the_psnr_cap() {
        let imgs = vec![gray(0.2, 64, 64), gray(0.7, 64, 96)];
        let pts = sweep_curve(&imgs, &IdentityCodec { q_levels: 6 }, &Psnr).unwrap();
        assert_eq!(pts.len(), 6);
        assert!(pts.iter().all(|p| p.metric == PSNR_CAP_DB && p.n_images == 2));
    }

    #[test]
    fn psnr_hand_value() {
        // Uniform error 0.1 -> mse 0.01 -> 20 dB.
        let p = Psnr.evaluate(&gray(0.5, 8, 8), &gray(0.6, 8, 8)).unwrap();
        assert!((p - 20.0).abs() < 1e-4);
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("curve.csv");
        let pts = vec![
            CurvePoint { q: 0, bpp: 0.123_456_789_012_345_6, metric: 31.000_000_000_1, n_images: 3 },
            CurvePoint { q: 1, bpp: 1.0 / 3.0, metric: -2.5e-7, n_images: 1 },
        ];
        write_curve_csv(&pts, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("q,bpp,metric,n_images\n"));
        assert_eq!(read_curve_csv(&path).unwrap(), pts);
    }
}
