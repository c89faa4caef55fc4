//! RGB images as `(3, H, W)` float tensors in `[0, 1]`.

use std::path::Path;

use candle_core::{DType, Device, IndexOp, Tensor};
use image::RgbImage;

use crate::{Error, Result};

/// A single image, channels-first, values in `[0, 1]`.
#[derive(Debug, Clone)]
pub struct ImageTensor {
    data: Tensor,
}

impl ImageTensor {
    /// Wraps a `(C, H, W)` tensor; values are not clamped, only checked for shape.
    pub fn new(data: Tensor) -> Result<Self> {
        if data.rank() != 3 {
            return Err(Error::Dimension(format!("image must be (C, H, W), got {:?}", data.dims())));
        }
        Ok(Self { data })
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, values: Vec<f32>) -> Result<Self> {
        let t = Tensor::from_vec(values, (channels, height, width), &Device::Cpu)?;
        Self::new(t)
    }

    /// Unbatches entry `index` of a `(B, C, H, W)` tensor.
    pub fn from_batch(batch: &Tensor, index: usize) -> Result<Self> {
        Self::new(batch.i(index)?)
    }

    pub fn from_rgb8(img: &RgbImage) -> Result<Self> {
        let (w, h) = img.dimensions();
        let (w, h) = (w as usize, h as usize);
        let mut planes = vec![0f32; 3 * h * w];
        for (x, y, px) in img.enumerate_pixels() {
            for c in 0..3 {
                planes[c * h * w + y as usize * w + x as usize] = px[c] as f32 / 255.0;
            }
        }
        Self::from_vec(3, h, w, planes)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let img = image::open(path.as_ref())?.to_rgb8();
        Self::from_rgb8(&img)
    }

    pub fn to_rgb8(&self) -> Result<RgbImage> {
        let (c, h, w) = self.dims();
        if c != 3 {
            return Err(Error::Dimension(format!("expected 3 channels, got {c}")));
        }
        let v = self.data.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let at = |ch: usize| {
                let p = v[ch * h * w + y as usize * w + x as usize];
                (p.clamp(0.0, 1.0) * 255.0).round() as u8
            };
            image::Rgb([at(0), at(1), at(2)])
        }))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_rgb8()?.save(path.as_ref())?;
        Ok(())
    }

    /// `(channels, height, width)`.
    pub fn dims(&self) -> (usize, usize, usize) {
        let d = self.data.dims();
        (d[0], d[1], d[2])
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    /// `(1, C, H, W)` view for the batched network APIs.
    pub fn batched(&self) -> Result<Tensor> {
        Ok(self.data.unsqueeze(0)?)
    }

    pub fn to_vec(&self) -> Result<Vec<f32>> {
        Ok(self.data.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?)
    }
}

fn reflect_indices(len: usize, padded: usize) -> Vec<u32> {
    (0..padded)
        .map(|i| {
            // Reflection without repeating the edge sample, as in numpy's "reflect".
            let period = 2 * (len - 1).max(1);
            let m = i % period;
            (if m < len { m } else { period - m }) as u32
        })
        .collect()
}

/// Reflect-pads a `(B, C, H, W)` tensor on the bottom and right edges.
pub fn reflect_pad(x: &Tensor, height: usize, width: usize) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    if height < h || width < w {
        return Err(Error::Dimension(format!("cannot pad {h}x{w} down to {height}x{width}")));
    }
    let mut out = x.contiguous()?;
    if height > h {
        let idx = Tensor::new(reflect_indices(h, height), x.device())?;
        out = out.index_select(&idx, 2)?.contiguous()?;
    }
    if width > w {
        let idx = Tensor::new(reflect_indices(w, width), x.device())?;
        out = out.index_select(&idx, 3)?;
    }
    Ok(out)
}

/// Crops a `(B, C, H, W)` tensor to its top-left `height x width` window.
pub fn crop(x: &Tensor, height: usize, width: usize) -> Result<Tensor> {
    Ok(x.narrow(2, 0, height)?.narrow(3, 0, width)?)
}

/// Rounds `v` up to a multiple of `m`.
pub fn round_up(v: usize, m: usize) -> usize {
    v.div_ceil(m) * m
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reflect_pad_mirrors_without_edge_repeat() {
        let x = Tensor::new(&[[[[1f32, 2., 3.]]]], &Device::Cpu).unwrap();
        let p = reflect_pad(&x, 1, 6).unwrap();
        assert_eq!(p.flatten_all().unwrap().to_vec1::<f32>().unwrap(), vec![1., 2., 3., 2., 1., 2.]);
        let c = crop(&p, 1, 3).unwrap();
        assert_eq!(c.flatten_all().unwrap().to_vec1::<f32>().unwrap(), vec![1., 2., 3.]);
    }

    #[test]
    fn rgb8_round_trip() {
        let img = RgbImage::from_fn(5, 4, |x, y| image::Rgb([x as u8 * 40, y as u8 * 50, 7]));
        let t = ImageTensor::from_rgb8(&img).unwrap();
        assert_eq!(t.dims(), (3, 4, 5));
        assert_eq!(t.to_rgb8().unwrap(), img);
    }
}
