//! The training objective: weighted rate, pixel distortion and token terms.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::nn::scalar;
use crate::tokens::{rank_loss_batch, token_mse_batch};
use crate::{Error, Result};

/// Distortion weights for the six default rate points, highest quality first.
pub const DEFAULT_LAMBDA_D: [f64; 6] = [420.0, 220.0, 120.0, 64.0, 35.0, 18.0];
pub const DEFAULT_LAMBDA_TK: f64 = 1.0;
pub const DEFAULT_LAMBDA_RK: f64 = 0.1;

/// Loss weights for one rate index `q`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LambdaPreset {
    pub lambda_r: f64,
    pub lambda_d: f64,
    pub lambda_tk: f64,
    pub lambda_rk: f64,
}

impl LambdaPreset {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_r, self.lambda_d, self.lambda_tk, self.lambda_rk];
        if all.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Config(format!("loss weights must be finite and >= 0: {self:?}")));
        }
        Ok(())
    }
}

/// One preset per `q`. Six levels use [`DEFAULT_LAMBDA_D`]; other counts
/// interpolate the same ladder geometrically.
pub fn default_presets(q_levels: usize) -> Vec<LambdaPreset> {
    let (hi, lo) = (DEFAULT_LAMBDA_D[0], DEFAULT_LAMBDA_D[5]);
    (0..q_levels)
        .map(|q| {
            let lambda_d = if q_levels == DEFAULT_LAMBDA_D.len() {
                DEFAULT_LAMBDA_D[q]
            } else if q_levels == 1 {
                hi
            } else {
                hi * (lo / hi).powf(q as f64 / (q_levels - 1) as f64)
            };
            LambdaPreset { lambda_r: 1.0, lambda_d, lambda_tk: DEFAULT_LAMBDA_TK, lambda_rk: DEFAULT_LAMBDA_RK }
        })
        .collect()
}

/// Checks a preset ladder: valid weights, `lambda_d` strictly decreasing in `q`.
pub fn validate_presets(presets: &[LambdaPreset]) -> Result<()> {
    for p in presets {
        p.validate()?;
    }
    if presets.windows(2).any(|w| w[1].lambda_d >= w[0].lambda_d) {
        return Err(Error::Config("lambda_d must decrease strictly with q".into()));
    }
    Ok(())
}

/// Raw and weighted values of every loss term.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub bpp: f64,
    pub mse: f64,
    pub tk: f64,
    pub rk: f64,
    pub rate_term: f64,
    pub distortion_term: f64,
    pub token_term: f64,
    pub rank_term: f64,
    pub total: f64,
}

/// Token inputs of the objective: tokens of the original image and of the
/// reconstruction, both `(B, dim, num)`.
pub struct TokenPair<'a> {
    pub t_gt: &'a Tensor,
    pub t_d: &'a Tensor,
}

/// `lambda_r * bpp + lambda_d * mse(i_o, i_d) [+ lambda_tk * token_mse + lambda_rk * rank_loss]`.
///
/// `bits` is a scalar tensor for the whole batch and `pixels` the batch's
/// pixel count, so the rate term is in bits per pixel. Distortion is
/// always measured against the original image `i_o`.
pub fn total_loss(
    bits: &Tensor,
    pixels: usize,
    i_o: &Tensor,
    i_d: &Tensor,
    tokens: Option<TokenPair<'_>>,
    preset: &LambdaPreset,
) -> Result<(Tensor, LossBreakdown)> {
    if i_o.dims() != i_d.dims() {
        return Err(Error::Dimension(format!(
            "distortion shape mismatch: {:?} vs {:?}",
            i_o.dims(),
            i_d.dims()
        )));
    }
    if pixels == 0 {
        return Err(Error::Dimension("pixel count must be positive".into()));
    }
    let bpp = (bits / pixels as f64)?;
    let mse = (i_o - i_d)?.sqr()?.mean_all()?;
    let rate_term = (&bpp * preset.lambda_r)?;
    let distortion_term = (&mse * preset.lambda_d)?;
    let mut total = (&rate_term + &distortion_term)?;
    let mut b = LossBreakdown {
        bpp: scalar(&bpp)?,
        mse: scalar(&mse)?,
        rate_term: scalar(&rate_term)?,
        distortion_term: scalar(&distortion_term)?,
        ..Default::default()
    };
    if let Some(TokenPair { t_gt, t_d }) = tokens {
        let tk = token_mse_batch(t_gt, t_d)?;
        let rk = rank_loss_batch(t_gt, t_d)?;
        let token_term = (&tk * preset.lambda_tk)?;
        let rank_term = (&rk * preset.lambda_rk)?;
        b.tk = scalar(&tk)?;
        b.rk = scalar(&rk)?;
        b.token_term = scalar(&token_term)?;
        b.rank_term = scalar(&rank_term)?;
        total = ((total + token_term)? + rank_term)?;
    }
    b.total = scalar(&total)?;
    Ok((total, b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn img(v: f64) -> Tensor {
        Tensor::full(v, (1, 3, 4, 4), &Device::Cpu).unwrap()
    }

    #[test]
    fn everything_vanishes_for_perfect_reconstruction() {
        let t = Tensor::randn(0f64, 1.0, (1, 4, 4), &Device::Cpu).unwrap();
        let zero = Tensor::new(0f64, &Device::Cpu).unwrap();
        let (_, b) = total_loss(
            &zero,
            16,
            &img(0.3),
            &img(0.3),
            Some(TokenPair { t_gt: &t, t_d: &t }),
            &default_presets(6)[0],
        )
        .unwrap();
        assert_eq!(b.total, 0.0);
    }

    #[test]
    fn hand_evaluated_stage_one_objective() {
        // bpp = 1 (16 bits over 16 pixels), mse = 0.01.
        let lambda_d = 0.013 * 65536.0 / 3.0;
        let preset = LambdaPreset { lambda_r: 1.0, lambda_d, lambda_tk: 1.0, lambda_rk: 0.1 };
        let bits = Tensor::new(16f64, &Device::Cpu).unwrap();
        let (_, b) = total_loss(&bits, 16, &img(0.5), &img(0.6), None, &preset).unwrap();
        let expected = 1.0 + lambda_d * 0.01;
        assert!((b.total - expected).abs() < 1e-9 * expected);
        assert_eq!((b.tk, b.rk), (0.0, 0.0));
    }

    #[test]
    fn breakdown_sums_to_total() {
        let a = Tensor::randn(0f64, 1.0, (2, 4, 9), &Device::Cpu).unwrap();
        let d = Tensor::randn(0f64, 1.0, (2, 4, 9), &Device::Cpu).unwrap();
        let bits = Tensor::new(100f64, &Device::Cpu).unwrap();
        let io = Tensor::rand(0f64, 1.0, (2, 3, 8, 8), &Device::Cpu).unwrap();
        let id = Tensor::rand(0f64, 1.0, (2, 3, 8, 8), &Device::Cpu).unwrap();
        let (_, b) =
            total_loss(&bits, 128, &io, &id, Some(TokenPair { t_gt: &a, t_d: &d }), &default_presets(6)[2]).unwrap();
        let sum = b.rate_term + b.distortion_term + b.token_term + b.rank_term;
        assert!((sum - b.total).abs() <= 1e-9 * b.total.abs());
    }

    #[test]
    fn zero_token_weights_ignore_tokens() {
        let preset = LambdaPreset { lambda_tk: 0.0, lambda_rk: 0.0, ..default_presets(6)[1] };
        let bits = Tensor::new(10f64, &Device::Cpu).unwrap();
        let a = Tensor::randn(0f64, 1.0, (1, 4, 4), &Device::Cpu).unwrap();
        let b2 = Tensor::randn(0f64, 1.0, (1, 4, 4), &Device::Cpu).unwrap();
        let (_, x) = total_loss(&bits, 16, &img(0.1), &img(0.2), Some(TokenPair { t_gt: &a, t_d: &a }), &preset).unwrap();
        let (_, y) = total_loss(&bits, 16, &img(0.1), &img(0.2), Some(TokenPair { t_gt: &a, t_d: &b2 }), &preset).unwrap();
        assert_eq!(x.total, y.total);
    }

    #[test]
    fn presets_are_ordered() {
        validate_presets(&default_presets(6)).unwrap();
        validate_presets(&default_presets(4)).unwrap();
        let p = default_presets(6);
        assert_eq!(p[0].lambda_d, 420.0);
        assert_eq!(p[5].lambda_d, 18.0);
        let mut bad = p.clone();
        bad[3].lambda_d = 500.0;
        assert!(validate_presets(&bad).is_err());
    }
}
