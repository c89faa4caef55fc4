use candle_core::Tensor;

use crate::nn::{channel_scale, gelu, global_avg_pool, ChannelLayerNorm, Conv2d, DepthwiseConv, Linear, ParamStore};
use crate::preedit::Adaption;
use crate::tokens::{exact_sqrt, tokens_to_spatial_batch};
use crate::{Error, Result};

/// Residual block: layer norm, pointwise conv, depthwise 3x3, GELU,
/// squeeze-and-excitation channel attention, pointwise conv, skip.
#[derive(Debug, Clone)]
pub struct BaseBlock {
    norm: ChannelLayerNorm,
    expand: Conv2d,
    depthwise: DepthwiseConv,
    squeeze: Linear,
    excite: Linear,
    project: Conv2d,
}

impl BaseBlock {
    pub fn new(store: &ParamStore, channels: usize) -> Result<Self> {
        let reduced = (channels / 4).max(4);
        Ok(Self {
            norm: ChannelLayerNorm::new(&store.pp("norm"), channels)?,
            expand: Conv2d::new(&store.pp("expand"), channels, channels, 1, 1)?,
            depthwise: DepthwiseConv::new(&store.pp("depthwise"), channels)?,
            squeeze: Linear::new(&store.pp("squeeze"), channels, reduced)?,
            excite: Linear::new(&store.pp("excite"), reduced, channels)?,
            project: Conv2d::new(&store.pp("project"), channels, channels, 1, 1)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.norm.forward(x)?;
        let h = self.expand.forward(&h)?;
        let h = gelu(&self.depthwise.forward(&h)?)?;
        let pooled = global_avg_pool(&h)?;
        let gate = self.squeeze.forward(&pooled)?.relu()?;
        let gate = candle_nn::ops::sigmoid(&self.excite.forward(&gate)?)?;
        let h = channel_scale(&h, &gate)?;
        let h = self.project.forward(&h)?;
        Ok((x + h)?)
    }
}

/// Token refinement for one scale: resize, 1x1 conv, layer norm, base block.
#[derive(Debug, Clone)]
pub struct TokenBlock {
    conv: Conv2d,
    norm: ChannelLayerNorm,
    block: BaseBlock,
}

impl TokenBlock {
    pub fn new(store: &ParamStore, token_dim: usize, channels: usize) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(&store.pp("conv"), token_dim, channels, 1, 1)?,
            norm: ChannelLayerNorm::new(&store.pp("norm"), channels)?,
            block: BaseBlock::new(&store.pp("block"), channels)?,
        })
    }

    /// `(B, dim, num)` tokens to a `(B, channels, height, width)` feature map.
    pub fn forward(&self, tokens: &Tensor, height: usize, width: usize) -> Result<Tensor> {
        // Resizing is linear per channel, so the 1x1 conv runs on the token grid.
        let (b, dim, num) = tokens.dims3()?;
        let side = exact_sqrt(num)
            .ok_or_else(|| Error::Dimension(format!("token count {num} is not a perfect square")))?;
        let grid = self.conv.forward(&tokens.contiguous()?.reshape((b, dim, side, side))?)?;
        let channels = grid.dim(1)?;
        let h = tokens_to_spatial_batch(&grid.reshape((b, channels, num))?, height, width)?;
        let h = self.norm.forward(&h)?;
        self.block.forward(&h)
    }
}

/// Channel-concatenated inputs, reduced by a 1x1 conv, enhanced by a base
/// block and modulated by the `q` adaption layer.
#[derive(Debug, Clone)]
pub struct FusionBlock {
    reduce: Conv2d,
    block: BaseBlock,
    adaption: Adaption,
}

impl FusionBlock {
    pub fn new(store: &ParamStore, inputs: usize, channels: usize, q_levels: usize) -> Result<Self> {
        Ok(Self {
            reduce: Conv2d::new(&store.pp("reduce"), inputs * channels, channels, 1, 1)?,
            block: BaseBlock::new(&store.pp("block"), channels)?,
            adaption: Adaption::new(&store.pp("adaption"), channels, q_levels)?,
        })
    }

    pub fn forward(&self, parts: &[&Tensor], q: usize) -> Result<Tensor> {
        let x = Tensor::cat(parts, 1)?;
        let h = self.reduce.forward(&x)?;
        let h = self.block.forward(&h)?;
        self.adaption.forward(&h, q)
    }
}
