use std::sync::Arc;

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::image::ImageTensor;
use crate::nn::kernels::{ConvGeometry, Im2Col};
use crate::nn::flops;
use crate::tokens::TokenGrid;
use crate::{Error, Result};

/// A frozen, differentiable map from images to semantic tokens.
///
/// Implementations must be deterministic and let gradients flow from the
/// tokens back to the input pixels; the training losses depend on both.
pub trait TokenExtractor: Send + Sync {
    fn name(&self) -> &str;
    /// Token embedding dimension.
    fn output_dim(&self) -> usize;
    /// Side length of the square, non-overlapping patches.
    fn patch_size(&self) -> usize;
    /// `(B, 3, H, W) -> (B, dim, (H/patch)*(W/patch))`.
    fn extract_batch(&self, images: &Tensor) -> Result<Tensor>;
    /// Number of (frozen) weights, for complexity reports.
    fn param_count(&self) -> usize;
}

fn check_divisible(images: &Tensor, patch: usize) -> Result<(usize, usize, usize, usize)> {
    let (b, c, h, w) = images.dims4()?;
    if c != 3 {
        return Err(Error::Dimension(format!("extractor expects 3 channels, got {c}")));
    }
    if h % patch != 0 || w % patch != 0 || h == 0 || w == 0 {
        return Err(Error::Dimension(format!("image {h}x{w} is not divisible by patch size {patch}")));
    }
    if h != w {
        return Err(Error::Dimension(format!(
            "token grids must be square; got a {h}x{w} image"
        )));
    }
    Ok((b, c, h, w))
}

fn seeded_matrix(rows: usize, cols: usize, std: f64, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..rows * cols)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            (std * z) as f32
        })
        .collect()
}

/// Patch mean-pooling followed by a fixed random projection.
///
/// Cheap stand-in for a transformer backbone: tokens are linear in the
/// image, so the extractor is trivially differentiable and deterministic.
pub struct ToyExtractor {
    patch: usize,
    projection: Tensor,
}

impl ToyExtractor {
    pub const DEFAULT_SEED: u64 = 0x70c3_9a1d;

    pub fn new(patch: usize, dim: usize, seed: u64) -> Result<Self> {
        if patch == 0 || dim == 0 {
            return Err(Error::Config("patch size and token dim must be positive".into()));
        }
        let w = seeded_matrix(dim, 3, 1.0 / 3f64.sqrt(), seed);
        Ok(Self { patch, projection: Tensor::from_vec(w, (dim, 3), &Device::Cpu)? })
    }
}

impl Default for ToyExtractor {
    fn default() -> Self {
        Self::new(16, 64, Self::DEFAULT_SEED).expect("valid default")
    }
}

impl TokenExtractor for ToyExtractor {
    fn name(&self) -> &str {
        "toy"
    }

    fn output_dim(&self) -> usize {
        self.projection.dims()[0]
    }

    fn patch_size(&self) -> usize {
        self.patch
    }

    fn extract_batch(&self, images: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = check_divisible(images, self.patch)?;
        let num = (h / self.patch) * (w / self.patch);
        let pooled = images.avg_pool2d(self.patch)?.reshape((b, c, num))?;
        let dim = self.output_dim();
        let p = self
            .projection
            .to_dtype(images.dtype())?
            .unsqueeze(0)?
            .broadcast_as((b, dim, c))?
            .contiguous()?;
        flops::record((2 * dim * c * num * b + b * c * h * w) as u64);
        Ok(p.matmul(&pooled.contiguous()?)?)
    }

    fn param_count(&self) -> usize {
        self.projection.elem_count()
    }
}

/// ViT-style linear patch embedding: each flattened `3 x p x p` patch is
/// projected by a fixed random matrix to `dim` features.
pub struct PatchEmbedExtractor {
    patch: usize,
    weight: Tensor,
}

impl PatchEmbedExtractor {
    pub const DEFAULT_SEED: u64 = 0x5eed_0b17;

    pub fn new(patch: usize, dim: usize, seed: u64) -> Result<Self> {
        if patch == 0 || dim == 0 {
            return Err(Error::Config("patch size and token dim must be positive".into()));
        }
        let fan_in = 3 * patch * patch;
        let w = seeded_matrix(dim, fan_in, 1.0 / (fan_in as f64).sqrt(), seed);
        Ok(Self { patch, weight: Tensor::from_vec(w, (dim, fan_in), &Device::Cpu)? })
    }

    /// ViT-B/16 geometry: 16x16 patches, 768-dim tokens.
    pub fn vit_base() -> Self {
        Self::new(16, 768, Self::DEFAULT_SEED).expect("valid default")
    }
}

impl TokenExtractor for PatchEmbedExtractor {
    fn name(&self) -> &str {
        "vitb-patch"
    }

    fn output_dim(&self) -> usize {
        self.weight.dims()[0]
    }

    fn patch_size(&self) -> usize {
        self.patch
    }

    fn extract_batch(&self, images: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = check_divisible(images, self.patch)?;
        let g = ConvGeometry {
            batch: b,
            channels: c,
            height: h,
            width: w,
            kernel: self.patch,
            stride: self.patch,
            padding: 0,
        };
        let cols = images.contiguous()?.apply_op1(Im2Col(g))?;
        let (dim, fan_in) = self.weight.dims2()?;
        let wm = self
            .weight
            .to_dtype(images.dtype())?
            .unsqueeze(0)?
            .broadcast_as((b, dim, fan_in))?
            .contiguous()?;
        flops::record((2 * dim * fan_in * g.out_height() * g.out_width() * b) as u64);
        Ok(wm.matmul(&cols)?)
    }

    fn param_count(&self) -> usize {
        self.weight.elem_count()
    }
}

/// Looks up a built-in extractor by name (`toy`, `vitb-patch`).
pub fn extractor_by_name(name: &str) -> Result<Arc<dyn TokenExtractor>> {
    match name {
        "toy" => Ok(Arc::new(ToyExtractor::default())),
        "vitb-patch" => Ok(Arc::new(PatchEmbedExtractor::vit_base())),
        other => Err(Error::Config(format!(
            "no token extractor named {other:?} (available: toy, vitb-patch)"
        ))),
    }
}

/// Extracts the token grid of a single image.
pub fn extract_tokens(image: &ImageTensor, extractor: &dyn TokenExtractor) -> Result<TokenGrid> {
    let t = extractor.extract_batch(&image.batched()?)?;
    TokenGrid::new(t.squeeze(0)?)
}

/// Converts a batch of images to `dtype` before extraction (the frozen
/// extractor weights follow the input dtype).
pub fn extract_batch_as(extractor: &dyn TokenExtractor, images: &Tensor, dtype: DType) -> Result<Tensor> {
    extractor.extract_batch(&images.to_dtype(dtype)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(h: usize, w: usize, seed: u64) -> ImageTensor {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageTensor::from_vec(3, h, w, (0..3 * h * w).map(|_| rng.random::<f32>()).collect()).unwrap()
    }

    #[test]
    fn toy_extractor_shape_and_determinism() {
        let img = image(256, 256, 1);
        let ex = ToyExtractor::default();
        let a = extract_tokens(&img, &ex).unwrap();
        assert_eq!((a.dim(), a.num()), (64, 256));
        let b = extract_tokens(&img, &ToyExtractor::default()).unwrap();
        assert_eq!(a.to_vec().unwrap(), b.to_vec().unwrap());
    }

    #[test]
    fn vit_base_geometry() {
        let img = image(256, 256, 2);
        let t = extract_tokens(&img, &PatchEmbedExtractor::vit_base()).unwrap();
        assert_eq!((t.dim(), t.num()), (768, 256));
    }

    #[test]
    fn indivisible_image_is_a_dimension_error() {
        let img = image(250, 256, 3);
        let err = extract_tokens(&img, &ToyExtractor::default()).unwrap_err();
        assert!(matches!(err, Error::Dimension(_)));
    }

    #[test]
    fn unknown_extractor_is_a_configuration_error() {
        assert!(matches!(extractor_by_name("vitdet-huge"), Err(Error::Config(_))));
        assert_eq!(extractor_by_name("toy").unwrap().output_dim(), 64);
    }

    #[test]
    fn gradients_reach_the_pixels() {
        let img = image(32, 32, 4);
        let x = candle_core::Var::from_tensor(&img.batched().unwrap()).unwrap();
        let t = ToyExtractor::default().extract_batch(x.as_tensor()).unwrap();
        let g = t.sqr().unwrap().sum_all().unwrap().backward().unwrap();
        let gx = g.get(&x).unwrap().abs().unwrap().sum_all().unwrap().to_scalar::<f32>().unwrap();
        assert!(gx > 0.0);
    }
}
