//! Entropy models: a learned factorized prior for the hyper-latent and a
//! zero-mean Gaussian conditional for the main latent.

use candle_core::{DType, Tensor};

use crate::codec::cdf::{self, TAIL_MASS};
use crate::codec::rangecoder::CdfTable;
use crate::nn::{scalar, softplus, Init, ParamStore};
use crate::{Error, Result};

/// Smallest likelihood any symbol is charged: 24 bits.
pub const LIKELIHOOD_FLOOR: f64 = 1.0 / (1u64 << 24) as f64;
/// Hyper-latent tables never extend past this magnitude.
const FACTORIZED_SEARCH_LIMIT: i32 = 2048;

const FILTERS: [usize; 5] = [1, 3, 3, 3, 1];
const INIT_SCALE: f64 = 10.0;

/// Per-channel monotone CDF built from small affine layers with positive
/// weights and `tanh` nonlinearities, evaluated on every element of `z`.
#[derive(Debug, Clone)]
pub struct FactorizedPrior {
    matrices: Vec<Tensor>,
    biases: Vec<Tensor>,
    factors: Vec<Tensor>,
    channels: usize,
}

impl FactorizedPrior {
    pub fn new(store: &ParamStore, channels: usize) -> Result<Self> {
        let layers = FILTERS.len() - 1;
        let scale = INIT_SCALE.powf(1.0 / layers as f64);
        let mut matrices = Vec::with_capacity(layers);
        let mut biases = Vec::with_capacity(layers);
        let mut factors = Vec::with_capacity(layers);
        for i in 0..layers {
            let (fin, fout) = (FILTERS[i], FILTERS[i + 1]);
            // softplus(h) = 1 / (scale * fan_out) at init, so the composed
            // map starts as a gentle ramp of width ~INIT_SCALE.
            let h0 = (((1.0 / scale / fout as f64).exp()) - 1.0).ln();
            matrices.push(store.get(&[channels, fout, fin], &format!("matrix{i}"), Init::Const(h0))?);
            biases.push(store.get(&[channels, fout, 1], &format!("bias{i}"), Init::Uniform { lo: -0.5, hi: 0.5 })?);
            if i + 1 < layers {
                factors.push(store.get(&[channels, fout, 1], &format!("factor{i}"), Init::Zeros)?);
            }
        }
        Ok(Self { matrices, biases, factors, channels })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Logits of the cumulative distribution; `x` is `(C, 1, M)`.
    fn logits_cumulative(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for (i, (m, b)) in self.matrices.iter().zip(&self.biases).enumerate() {
            let w = softplus(&m.to_dtype(x.dtype())?)?;
            h = w.matmul(&h)?.broadcast_add(&b.to_dtype(x.dtype())?)?;
            if let Some(f) = self.factors.get(i) {
                let f = f.to_dtype(x.dtype())?.tanh()?;
                h = (&h + h.tanh()?.broadcast_mul(&f)?)?;
            }
        }
        Ok(h)
    }

    /// Interval mass `P(z - 0.5 < Z < z + 0.5)` for every element of
    /// `z (B, C, H, W)`, floored at [`LIKELIHOOD_FLOOR`].
    pub fn likelihood(&self, z: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = z.dims4()?;
        if c != self.channels {
            return Err(Error::Dimension(format!("prior expects {} channels, got {c}", self.channels)));
        }
        let x = z.transpose(0, 1)?.contiguous()?.reshape((c, 1, b * h * w))?;
        let lower = self.logits_cumulative(&(&x - 0.5)?)?;
        let upper = self.logits_cumulative(&(&x + 0.5)?)?;
        // Evaluate on the side of the median where both sigmoids are small,
        // which avoids cancellation in the upper tail.
        let flip = (&lower + &upper)?.ge(0.0)?.to_dtype(x.dtype())?;
        let sign = flip.affine(-2.0, 1.0)?;
        let p = (candle_nn::ops::sigmoid(&(&upper * &sign)?)? - candle_nn::ops::sigmoid(&(&lower * &sign)?)?)?
            .abs()?;
        let p = p.clamp(LIKELIHOOD_FLOOR, 1.0)?;
        Ok(p.reshape((c, b, h, w))?.transpose(0, 1)?.contiguous()?)
    }

    /// Estimated bits for `z`.
    pub fn bits(&self, z: &Tensor) -> Result<Tensor> {
        bits_from_likelihood(&self.likelihood(z)?)
    }

    fn channel_weights(&self, c: usize) -> Result<PriorChannel> {
        let get = |t: &Tensor| -> Result<Vec<f64>> {
            Ok(t.get(c)?.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?)
        };
        Ok(PriorChannel {
            matrices: self
                .matrices
                .iter()
                .map(|m| Ok(get(m)?.into_iter().map(softplus_f64).collect()))
                .collect::<Result<_>>()?,
            biases: self.biases.iter().map(get).collect::<Result<_>>()?,
            factors: self
                .factors
                .iter()
                .map(|f| Ok(get(f)?.into_iter().map(f64::tanh).collect()))
                .collect::<Result<_>>()?,
        })
    }

    /// One coder table per channel over the integers that hold all but
    /// [`TAIL_MASS`] of that channel's distribution.
    pub fn build_tables(&self) -> Result<Vec<CdfTable>> {
        (0..self.channels)
            .map(|c| {
                let ch = self.channel_weights(c)?;
                let cdf = |x: f64| sigmoid_f64(ch.logit(x));
                let lo = search_edge(&cdf, TAIL_MASS / 2.0, true);
                let hi = search_edge(&cdf, TAIL_MASS / 2.0, false);
                let (lo, hi) = if hi - lo < 2 { (lo.min(hi) - 1, lo.max(hi) + 1) } else { (lo, hi) };
                cdf::table_from_cdf(lo, hi, cdf)
            })
            .collect()
    }
}

fn softplus_f64(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid_f64(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

struct PriorChannel {
    matrices: Vec<Vec<f64>>,
    biases: Vec<Vec<f64>>,
    factors: Vec<Vec<f64>>,
}

impl PriorChannel {
    fn logit(&self, x: f64) -> f64 {
        let mut h = vec![x];
        for (i, (m, b)) in self.matrices.iter().zip(&self.biases).enumerate() {
            let fin = h.len();
            let mut next: Vec<f64> = b.clone();
            for (o, v) in next.iter_mut().enumerate() {
                for (j, hj) in h.iter().enumerate() {
                    *v += m[o * fin + j] * hj;
                }
            }
            if let Some(f) = self.factors.get(i) {
                for (v, a) in next.iter_mut().zip(f) {
                    *v += a * v.tanh();
                }
            }
            h = next;
        }
        h[0]
    }
}

// Outermost integer whose half-unit interval still carries tail mass:
// for the lower edge, the largest k with cdf(k - 0.5) <= tail (so symbols
// below k hold at most `tail`).
fn search_edge(cdf: &impl Fn(f64) -> f64, tail: f64, lower: bool) -> i32 {
    let limit = FACTORIZED_SEARCH_LIMIT;
    if lower {
        let mut k = -limit;
        while k < limit && cdf(k as f64 + 0.5) <= tail {
            k += 1;
        }
        k
    } else {
        let mut k = limit;
        while k > -limit && 1.0 - cdf(k as f64 - 0.5) <= tail {
            k -= 1;
        }
        k
    }
}

/// `-sum log2(p)` over all elements.
pub fn bits_from_likelihood(p: &Tensor) -> Result<Tensor> {
    Ok((p.log()?.sum_all()? * (-1.0 / std::f64::consts::LN_2))?)
}

/// Interval mass of a zero-mean Gaussian with scale `scales` around each
/// `y`, floored at [`LIKELIHOOD_FLOOR`].
pub fn gaussian_likelihood(y: &Tensor, scales: &Tensor) -> Result<Tensor> {
    // Both bounds on the negative side: Phi((0.5 - |y|) / s) - Phi((-0.5 - |y|) / s).
    let a = y.abs()?;
    let upper = normal_cdf_tensor(&((a.neg()? + 0.5)? / scales)?)?;
    let lower = normal_cdf_tensor(&((a.neg()? - 0.5)? / scales)?)?;
    Ok((upper - lower)?.clamp(LIKELIHOOD_FLOOR, 1.0)?)
}

fn normal_cdf_tensor(x: &Tensor) -> Result<Tensor> {
    Ok(((x * std::f64::consts::FRAC_1_SQRT_2)?.erf()? + 1.0)?.affine(0.5, 0.0)?)
}

/// Estimated bits of `y_hat` under the Gaussian conditional with `scales`
/// and of `z_hat` under the factorized prior.
pub fn rate_estimate(
    y_hat: &Tensor,
    scales: &Tensor,
    z_hat: &Tensor,
    prior: &FactorizedPrior,
    scale_bound: f64,
) -> Result<(Tensor, Tensor)> {
    let min_scale = scalar(&scales.flatten_all()?.min(0)?)?;
    if !(min_scale >= scale_bound * (1.0 - 1e-6)) {
        return Err(Error::Numeric(format!("scale {min_scale} below the bound {scale_bound}")));
    }
    let bits_y = bits_from_likelihood(&gaussian_likelihood(y_hat, scales)?)?;
    let bits_z = prior.bits(z_hat)?;
    Ok((bits_y, bits_z))
}
