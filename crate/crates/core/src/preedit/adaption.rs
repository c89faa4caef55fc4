use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::nn::{channel_scale, softplus, Init, Linear, ParamStore};
use crate::{Error, Result};

/// Width of the learned `q` embedding fed to each adaption layer.
pub const ADAPTION_EMBED_DIM: usize = 64;

/// Compression-ratio index: selects the bitrate operating point and the
/// matching loss-weight preset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct QIndex(usize);

impl QIndex {
    pub fn new(q: usize, q_levels: usize) -> Result<Self> {
        if q >= q_levels {
            return Err(Error::Config(format!("q index {q} out of range [0, {q_levels})")));
        }
        Ok(Self(q))
    }

    pub fn get(self) -> usize {
        self.0
    }
}

/// Channel-wise gain predicted from `q`: `x * softplus(mlp(embed(q)))`.
///
/// The output layer starts at zero weight with bias `ln(e - 1)`, so every
/// gain is exactly 1 at initialization.
#[derive(Debug, Clone)]
pub struct Adaption {
    embedding: Tensor,
    hidden: Linear,
    out: Linear,
    channels: usize,
    q_levels: usize,
}

impl Adaption {
    pub fn new(store: &ParamStore, channels: usize, q_levels: usize) -> Result<Self> {
        let embedding = store.get(&[q_levels, ADAPTION_EMBED_DIM], "embedding", Init::Normal { std: 1.0 })?;
        let hidden = Linear::new(&store.pp("hidden"), ADAPTION_EMBED_DIM, ADAPTION_EMBED_DIM)?;
        let unit_gain_bias = (std::f64::consts::E - 1.0).ln();
        let out = Linear::with_init(
            &store.pp("out"),
            ADAPTION_EMBED_DIM,
            channels,
            Init::Zeros,
            Init::Const(unit_gain_bias),
        )?;
        Ok(Self { embedding, hidden, out, channels, q_levels })
    }

    /// Per-channel gain vector for `q`, shape `(channels,)`.
    pub fn gains(&self, q: usize) -> Result<Tensor> {
        if q >= self.q_levels {
            return Err(Error::Config(format!("q index {q} out of range [0, {})", self.q_levels)));
        }
        let e = self.embedding.narrow(0, q, 1)?;
        let h = self.hidden.forward(&e)?.relu()?;
        Ok(softplus(&self.out.forward(&h)?)?.reshape(self.channels)?)
    }

    pub fn forward(&self, x: &Tensor, q: usize) -> Result<Tensor> {
        let c = x.dim(1)?;
        if c != self.channels {
            return Err(Error::Dimension(format!("adaption expects {} channels, got {c}", self.channels)));
        }
        let g = self.gains(q)?;
        if x.rank() == 4 {
            return channel_scale(x, &g);
        }
        Ok(x.broadcast_mul(&g.reshape((1, c, 1, 1))?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    fn layer() -> Adaption {
        Adaption::new(&ParamStore::new(3, DType::F32), 8, 6).unwrap()
    }

    fn feature() -> Tensor {
        Tensor::randn(0f32, 1.0, (2, 8, 5, 5), &Device::Cpu).unwrap()
    }

    #[test]
    fn identity_at_initialization() {
        let a = layer();
        let x = feature();
        for q in 0..6 {
            let y = a.forward(&x, q).unwrap();
            let dev = (y - &x).unwrap().abs().unwrap().flatten_all().unwrap().max(0).unwrap();
            assert!(dev.to_scalar::<f32>().unwrap() < 1e-5);
        }
    }

    #[test]
    fn zero_in_zero_out_and_determinism() {
        let a = layer();
        let z = Tensor::zeros((1, 8, 3, 3), DType::F32, &Device::Cpu).unwrap();
        let y = a.forward(&z, 2).unwrap().abs().unwrap().sum_all().unwrap();
        assert_eq!(y.to_scalar::<f32>().unwrap(), 0.0);
        let x = feature();
        let y1 = a.forward(&x, 4).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let y2 = a.forward(&x, 4).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(y1, y2);
    }

    #[test]
    fn out_of_range_q_is_a_configuration_error() {
        assert!(matches!(layer().forward(&feature(), 6), Err(Error::Config(_))));
        assert!(matches!(QIndex::new(6, 6), Err(Error::Config(_))));
        assert_eq!(QIndex::new(5, 6).unwrap().get(), 5);
    }
}
