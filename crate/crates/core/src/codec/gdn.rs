use candle_core::Tensor;

use crate::nn::{flops, Init, ParamStore};
use crate::{Error, Result};

pub const BETA_MIN: f64 = 1e-6;

/// Generalized divisive normalization and its inverse.
///
/// `y_i = x_i / sqrt(beta_i + sum_j gamma_ij x_j^2)` (forward) or
/// `y_i = x_i * sqrt(...)` (inverse). The stored parameters are
/// square roots: `beta = beta_raw^2 + BETA_MIN` and `gamma = gamma_raw^2`,
/// so the constraints hold for any raw values an optimizer produces.
#[derive(Debug, Clone)]
pub struct Gdn {
    beta_raw: Tensor,
    gamma_raw: Tensor,
    channels: usize,
    inverse: bool,
}

impl Gdn {
    pub fn new(store: &ParamStore, channels: usize, inverse: bool) -> Result<Self> {
        let beta_raw = store.get(&[channels], "beta", Init::Const((1.0 - BETA_MIN).sqrt()))?;
        // gamma starts at 0.1 * identity.
        let gamma_raw = store.get(&[channels, channels], "gamma", Init::Identity(0.1f64.sqrt()))?;
        Ok(Self { beta_raw, gamma_raw, channels, inverse })
    }

    /// Builds a layer from effective (constrained) parameters; for tests.
    pub fn from_effective(beta: &[f64], gamma: &[f64], inverse: bool) -> Result<Self> {
        let c = beta.len();
        if gamma.len() != c * c {
            return Err(Error::Dimension(format!("gamma needs {} entries, got {}", c * c, gamma.len())));
        }
        if beta.iter().any(|&b| b < BETA_MIN) || gamma.iter().any(|&g| g < 0.0) {
            return Err(Error::Config("gdn needs beta >= 1e-6 and gamma >= 0".into()));
        }
        let dev = candle_core::Device::Cpu;
        let beta_raw: Vec<f64> = beta.iter().map(|b| (b - BETA_MIN).sqrt()).collect();
        let gamma_raw: Vec<f64> = gamma.iter().map(|g| g.sqrt()).collect();
        Ok(Self {
            beta_raw: Tensor::from_vec(beta_raw, c, &dev)?,
            gamma_raw: Tensor::from_vec(gamma_raw, (c, c), &dev)?,
            channels: c,
            inverse,
        })
    }

    /// Effective `(beta, gamma)` after reparameterization.
    pub fn effective(&self) -> Result<(Tensor, Tensor)> {
        Ok(((self.beta_raw.sqr()? + BETA_MIN)?, self.gamma_raw.sqr()?))
    }

    /// `sqrt(beta_i + sum_j gamma_ij x_j^2)` at every position.
    pub fn denominator(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        if c != self.channels {
            return Err(Error::Dimension(format!("gdn expects {} channels, got {c}", self.channels)));
        }
        let (beta, gamma) = self.effective()?;
        let (beta, gamma) = (beta.to_dtype(x.dtype())?, gamma.to_dtype(x.dtype())?);
        let sq = x.sqr()?.reshape((b, c, h * w))?;
        let gm = gamma.unsqueeze(0)?.broadcast_as((b, c, c))?.contiguous()?;
        let norm = gm.matmul(&sq.contiguous()?)?.reshape((b, c, h, w))?;
        flops::record((2 * c * c * h * w * b) as u64);
        Ok(crate::nn::channel_shift(&norm, &beta)?.sqrt()?)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let norm = self.denominator(x)?;
        Ok(if self.inverse { (x * norm)? } else { (x / norm)? })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    fn values(t: &Tensor) -> Vec<f64> {
        t.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1().unwrap()
    }

    #[test]
    fn zero_gamma_unit_beta_is_identity() {
        let g = Gdn::from_effective(&[1.0, 1.0], &[0.0; 4], false).unwrap();
        let x = Tensor::randn(0f64, 1.0, (1, 2, 3, 3), &Device::Cpu).unwrap();
        let y = g.forward(&x).unwrap();
        for (a, b) in values(&x).iter().zip(values(&y)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn single_channel_hand_value() {
        let g = Gdn::from_effective(&[0.5], &[0.5], false).unwrap();
        let x = Tensor::ones((1, 1, 1, 1), DType::F64, &Device::Cpu).unwrap();
        assert!((values(&g.forward(&x).unwrap())[0] - 1.0).abs() < 1e-12);
        let x2 = (x * 2.0).unwrap();
        // 2 / sqrt(0.5 + 0.5 * 4)
        let expected = 2.0 / 2.5f64.sqrt();
        assert!((values(&g.forward(&x2).unwrap())[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn inverse_undoes_forward_for_fixed_denominator() {
        let beta = [0.7, 1.3, 0.2];
        let gamma = [0.1, 0.02, 0.0, 0.05, 0.3, 0.01, 0.0, 0.2, 0.4];
        let fwd = Gdn::from_effective(&beta, &gamma, false).unwrap();
        let inv = Gdn::from_effective(&beta, &gamma, true).unwrap();
        let x = Tensor::randn(0f64, 1.0, (2, 3, 4, 4), &Device::Cpu).unwrap();
        let d = fwd.denominator(&x).unwrap();
        let y = fwd.forward(&x).unwrap();
        let back = (y * &d).unwrap();
        for (a, b) in values(&x).iter().zip(values(&back)) {
            assert!((a - b).abs() < 1e-5);
        }
        let expanded = inv.forward(&x).unwrap();
        for (a, b) in values(&expanded).iter().zip(values(&(&x * &d).unwrap())) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn initial_parameters_are_constrained() {
        let store = ParamStore::new(0, DType::F32);
        let g = Gdn::new(&store, 4, false).unwrap();
        let (beta, gamma) = g.effective().unwrap();
        assert!(values(&beta).iter().all(|&b| b >= BETA_MIN && (b - 1.0).abs() < 1e-6));
        let gv = values(&gamma);
        assert!(gv.iter().all(|&v| v >= 0.0));
        assert!((gv[0] - 0.1).abs() < 1e-6 && gv[1] == 0.0);
    }
}
