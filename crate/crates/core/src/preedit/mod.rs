//! Token-guided U-Net pre-editor.
//!
//! Three branches share one set of scales. The token branch turns the token
//! grid into a feature map per scale. The down branch fuses image features
//! with those token features and max-pools between scales; its fused outputs
//! are kept as skips. The up branch upsamples, fuses the upsampled features
//! with the token features and the skip, and a final convolution predicts a
//! residual that is added to the input image.

mod adaption;
mod blocks;

pub use adaption::{Adaption, QIndex, ADAPTION_EMBED_DIM};
pub use blocks::{BaseBlock, FusionBlock, TokenBlock};

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::nn::{max_pool2x, upsample2x, Conv2d, Init, ParamStore};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreEditConfig {
    /// Number of resolution levels.
    pub scales: usize,
    /// Channels at the finest scale; doubled at each coarser scale.
    pub base_channels: usize,
    pub q_levels: usize,
    pub token_dim: usize,
}

impl Default for PreEditConfig {
    fn default() -> Self {
        Self { scales: 4, base_channels: 32, q_levels: 6, token_dim: 64 }
    }
}

impl PreEditConfig {
    /// Small network for desk-scale training runs.
    pub fn tiny() -> Self {
        Self { scales: 3, base_channels: 8, q_levels: 6, token_dim: 64 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.scales < 2 || self.base_channels < 8 || self.q_levels < 2 || self.token_dim == 0 {
            return Err(Error::Config(format!(
                "invalid pre-edit config {self:?}: need scales >= 2, base_channels >= 8, q_levels >= 2"
            )));
        }
        Ok(())
    }

    pub fn channels(&self, scale: usize) -> usize {
        self.base_channels << scale
    }

    /// Spatial dims must be divisible by this.
    pub fn alignment(&self) -> usize {
        1 << (self.scales - 1)
    }
}

/// The pre-editing network.
#[derive(Debug, Clone)]
pub struct PreEditor {
    config: PreEditConfig,
    head: Conv2d,
    token_blocks: Vec<TokenBlock>,
    down_fusions: Vec<FusionBlock>,
    down_convs: Vec<Conv2d>,
    up_convs: Vec<Conv2d>,
    up_fusions: Vec<FusionBlock>,
    tail: Conv2d,
    residual_scale: Tensor,
}

impl PreEditor {
    pub fn new(store: &ParamStore, config: PreEditConfig) -> Result<Self> {
        config.validate()?;
        let s = config.scales;
        let ch = |i| config.channels(i);
        let mut token_blocks = Vec::with_capacity(s);
        let mut down_fusions = Vec::with_capacity(s);
        for i in 0..s {
            token_blocks.push(TokenBlock::new(&store.pp(format!("token.{i}")), config.token_dim, ch(i))?);
            down_fusions.push(FusionBlock::new(&store.pp(format!("down_fusion.{i}")), 2, ch(i), config.q_levels)?);
        }
        let mut down_convs = Vec::with_capacity(s - 1);
        let mut up_convs = Vec::with_capacity(s - 1);
        let mut up_fusions = Vec::with_capacity(s - 1);
        for i in 0..s - 1 {
            down_convs.push(Conv2d::new(&store.pp(format!("down_conv.{i}")), ch(i), ch(i + 1), 3, 1)?);
            up_convs.push(Conv2d::new(&store.pp(format!("up_conv.{i}")), ch(i + 1), ch(i), 3, 1)?);
            up_fusions.push(FusionBlock::new(&store.pp(format!("up_fusion.{i}")), 3, ch(i), config.q_levels)?);
        }
        Ok(Self {
            config,
            head: Conv2d::new(&store.pp("head"), 3, ch(0), 3, 1)?,
            token_blocks,
            down_fusions,
            down_convs,
            up_convs,
            up_fusions,
            tail: Conv2d::new(&store.pp("tail"), ch(0), 3, 3, 1)?,
            residual_scale: store.get(&[1, 3, 1, 1], "residual_scale", Init::Zeros)?,
        })
    }

    pub fn config(&self) -> &PreEditConfig {
        &self.config
    }

    /// `image (B, 3, H, W)`, `tokens (B, dim, num)` -> edited image in `[0, 1]`.
    pub fn forward(&self, image: &Tensor, tokens: &Tensor, q: usize) -> Result<Tensor> {
        let (b, c, h, w) = image.dims4()?;
        let align = self.config.alignment();
        if c != 3 || h % align != 0 || w % align != 0 || h == 0 || w == 0 {
            return Err(Error::Dimension(format!(
                "pre-editor needs a 3-channel image with sides divisible by {align}, got {c}x{h}x{w}"
            )));
        }
        let (tb, tdim, _) = tokens.dims3()?;
        if tdim != self.config.token_dim {
            return Err(Error::Config(format!(
                "pre-editor configured for token dim {}, got {tdim}",
                self.config.token_dim
            )));
        }
        if tb != b {
            return Err(Error::Dimension(format!("{b} images but {tb} token grids")));
        }
        if q >= self.config.q_levels {
            return Err(Error::Config(format!("q index {q} out of range [0, {})", self.config.q_levels)));
        }

        let s = self.config.scales;
        let token_features = (0..s)
            .map(|i| self.token_blocks[i].forward(tokens, h >> i, w >> i))
            .collect::<Result<Vec<_>>>()?;

        let mut skips = Vec::with_capacity(s);
        let mut feature = self.head.forward(image)?;
        for i in 0..s {
            let fused = self.down_fusions[i].forward(&[&feature, &token_features[i]], q)?;
            if i + 1 < s {
                feature = self.down_convs[i].forward(&max_pool2x(&fused)?)?;
            }
            skips.push(fused);
        }

        let mut up = skips.pop().expect("at least two scales");
        for i in (0..s - 1).rev() {
            let upsampled = self.up_convs[i].forward(&upsample2x(&up)?)?;
            up = self.up_fusions[i].forward(&[&upsampled, &token_features[i], &skips[i]], q)?;
        }

        let residual = self.tail.forward(&up)?.broadcast_mul(&self.residual_scale)?;
        crate::nn::clamp_unit(&(image + residual)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    fn inputs(h: usize, dtype: DType) -> (Tensor, Tensor) {
        let img = (Tensor::rand(0f32, 1.0, (1, 3, h, h), &Device::Cpu).unwrap().affine(1.2, -0.1))
            .unwrap()
            .to_dtype(dtype)
            .unwrap();
        let side = h / 16;
        let tok = Tensor::randn(0f32, 1.0, (1, 64, side * side), &Device::Cpu).unwrap().to_dtype(dtype).unwrap();
        (img, tok)
    }

    #[test]
    fn shape_range_and_identity_at_init() {
        let store = ParamStore::new(1, DType::F32);
        let net = PreEditor::new(&store, PreEditConfig::tiny()).unwrap();
        let (img, tok) = inputs(64, DType::F32);
        let out = net.forward(&img, &tok, 3).unwrap();
        assert_eq!(out.dims(), img.dims());
        let expected = img.clamp(0.0, 1.0).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(out.flatten_all().unwrap().to_vec1::<f32>().unwrap(), expected);
    }

    #[test]
    fn default_config_at_256() {
        let store = ParamStore::new(1, DType::F32);
        let net = PreEditor::new(&store, PreEditConfig::default()).unwrap();
        let (img, tok) = inputs(256, DType::F32);
        let out = net.forward(&img, &tok, 3).unwrap();
        assert_eq!(out.dims(), &[1, 3, 256, 256]);
        let v = out.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert!(v.iter().all(|x| (0.0..=1.0).contains(x)));
    }

    #[test]
    fn errors() {
        let store = ParamStore::new(1, DType::F32);
        let net = PreEditor::new(&store, PreEditConfig::tiny()).unwrap();
        let (img, tok) = inputs(64, DType::F32);
        let odd = img.narrow(2, 0, 62).unwrap();
        assert!(matches!(net.forward(&odd, &tok, 0), Err(Error::Dimension(_))));
        let bad_tok = tok.narrow(1, 0, 32).unwrap();
        assert!(matches!(net.forward(&img, &bad_tok, 0), Err(Error::Config(_))));
        assert!(matches!(net.forward(&img, &tok, 6), Err(Error::Config(_))));
        assert!(PreEditConfig { base_channels: 4, ..PreEditConfig::tiny() }.validate().is_err());
    }

    #[test]
    fn parameter_count_does_not_depend_on_q() {
        let store = ParamStore::new(1, DType::F32);
        let net = PreEditor::new(&store, PreEditConfig::tiny()).unwrap();
        let (img, tok) = inputs(64, DType::F32);
        let before = store.param_count("");
        for q in 0..6 {
            net.forward(&img, &tok, q).unwrap();
        }
        assert_eq!(store.param_count(""), before);
    }
}
