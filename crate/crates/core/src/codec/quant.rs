use candle_core::Tensor;
use rand::Rng;

use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuantMode {
    /// Additive uniform noise in `(-0.5, 0.5)`; the differentiable training proxy.
    Noise,
    /// Round to nearest, ties to even.
    Round,
}

/// Quantizes `x` in the given mode. Noise is drawn from `rng` so training
/// runs are reproducible.
pub fn quantize(x: &Tensor, mode: QuantMode, rng: &mut impl Rng) -> Result<Tensor> {
    match mode {
        QuantMode::Round => round_half_even(x),
        QuantMode::Noise => {
            let n = x.elem_count();
            let noise: Vec<f32> = (0..n).map(|_| open_unit_noise(rng)).collect();
            let noise = Tensor::from_vec(noise, x.shape(), x.device())?.to_dtype(x.dtype())?;
            Ok((x + noise)?)
        }
    }
}

// Uniform in the open interval (-0.5, 0.5).
fn open_unit_noise(rng: &mut impl Rng) -> f32 {
    loop {
        let u: f32 = rng.random::<f32>() - 0.5;
        if u > -0.5 {
            return u;
        }
    }
}

/// Elementwise round-half-to-even. Not differentiable; callers that need a
/// gradient use [`QuantMode::Noise`].
pub fn round_half_even(x: &Tensor) -> Result<Tensor> {
    let dtype = x.dtype();
    let v = x.to_dtype(candle_core::DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    let r: Vec<f64> = v.into_iter().map(f64::round_ties_even).collect();
    Ok(Tensor::from_vec(r, x.shape(), x.device())?.to_dtype(dtype)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn ties_go_to_even() {
        let x = Tensor::new(&[1.4f32, 2.5, -1.5, 0.5, -0.5, 3.0, -7.0], &Device::Cpu).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let y = quantize(&x, QuantMode::Round, &mut rng).unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(y, vec![1.0, 2.0, -2.0, 0.0, -0.0, 3.0, -7.0]);
    }

    #[test]
    fn noise_is_bounded() {
        let x = Tensor::randn(0f32, 1.0, 4096, &Device::Cpu).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let y = quantize(&x, QuantMode::Noise, &mut rng).unwrap();
        let d = (y - &x).unwrap().abs().unwrap().max(0).unwrap().to_scalar::<f32>().unwrap();
        assert!(d < 0.5 && d > 0.3);
    }
}
