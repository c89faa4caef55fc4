//! Token-level semantic losses: token MSE and the soft-rank surrogate.
//!
//! The soft rank of a matrix is `sum_i sigmoid(s_i)` over its singular values
//! `s_i`. It is bounded by `r/2` (zero matrix) and `r = min(rows, cols)` and
//! is differentiable wherever the singular values are distinct:
//! `d/dT sum_i f(s_i) = U diag(f'(s)) V^T`.

use candle_core::{bail, CpuStorage, CustomOp1, DType, Layout, Shape, Tensor};
use nalgebra::DMatrix;

use crate::nn::scalar;
use crate::tokens::TokenGrid;
use crate::{Error, Result};

/// Singular values at or below this are clamped before evaluating the
/// sigmoid derivative in the backward pass.
pub const SINGULAR_VALUE_FLOOR: f64 = 1e-6;

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn storage_f64(s: &CpuStorage, l: &Layout) -> candle_core::Result<Vec<f64>> {
    let (start, end) = match l.contiguous_offsets() {
        Some(o) => o,
        None => bail!("soft rank input must be contiguous"),
    };
    Ok(match s {
        CpuStorage::F32(v) => v[start..end].iter().map(|&x| x as f64).collect(),
        CpuStorage::F64(v) => v[start..end].to_vec(),
        _ => bail!("soft rank supports f32 and f64"),
    })
}

fn batch_dims(dims: &[usize]) -> candle_core::Result<(usize, usize, usize)> {
    match *dims {
        [r, c] => Ok((1, r, c)),
        [b, r, c] => Ok((b, r, c)),
        _ => bail!("soft rank expects (rows, cols) or (batch, rows, cols), got {dims:?}"),
    }
}

fn singular_values(values: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    DMatrix::from_row_slice(rows, cols, values).singular_values().iter().copied().collect()
}

/// `(B, d, n) -> (B,)` soft ranks (or `(d, n) -> (1,)`).
struct SoftRankOp;

impl CustomOp1 for SoftRankOp {
    fn name(&self) -> &'static str {
        "soft-rank"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, rows, cols) = batch_dims(l.dims())?;
        let data = storage_f64(s, l)?;
        let out: Vec<f64> = data
            .chunks_exact(rows * cols)
            .map(|m| singular_values(m, rows, cols).into_iter().map(sigmoid).sum())
            .collect();
        let storage = match s {
            CpuStorage::F32(_) => CpuStorage::F32(out.iter().map(|&v| v as f32).collect()),
            _ => CpuStorage::F64(out),
        };
        Ok((storage, Shape::from(b)))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let (_, rows, cols) = batch_dims(arg.dims())?;
        let data = arg.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
        let upstream = grad.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
        let mut out = Vec::with_capacity(data.len());
        for (m, g) in data.chunks_exact(rows * cols).zip(upstream) {
            let svd = DMatrix::from_row_slice(rows, cols, m).svd(true, true);
            let (u, vt) = match (&svd.u, &svd.v_t) {
                (Some(u), Some(vt)) => (u, vt),
                _ => bail!("svd did not return singular vectors"),
            };
            let weights: Vec<f64> = svd
                .singular_values
                .iter()
                .map(|&s| {
                    let sig = sigmoid(s.max(SINGULAR_VALUE_FLOOR));
                    g * sig * (1.0 - sig)
                })
                .collect();
            let mut scaled_u = u.clone();
            for (j, w) in weights.iter().enumerate() {
                scaled_u.column_mut(j).scale_mut(*w);
            }
            let grad_m = scaled_u * vt;
            for r in 0..rows {
                for c in 0..cols {
                    out.push(grad_m[(r, c)]);
                }
            }
        }
        let t = Tensor::from_vec(out, arg.shape(), arg.device())?.to_dtype(arg.dtype())?;
        Ok(Some(t))
    }
}

/// Differentiable soft rank of each matrix in a `(B, d, n)` batch, shape `(B,)`.
pub fn soft_rank_batch(tokens: &Tensor) -> Result<Tensor> {
    let t = tokens.contiguous()?;
    let v = t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric("soft rank of a matrix with non-finite entries".into()));
    }
    Ok(t.apply_op1(SoftRankOp)?)
}

/// Mean over the batch of `(soft_rank(gt) - soft_rank(d))^2`.
pub fn rank_loss_batch(t_gt: &Tensor, t_d: &Tensor) -> Result<Tensor> {
    if t_gt.dims() != t_d.dims() {
        return Err(Error::Dimension(format!(
            "rank loss shape mismatch: {:?} vs {:?}",
            t_gt.dims(),
            t_d.dims()
        )));
    }
    let diff = (soft_rank_batch(t_gt)? - soft_rank_batch(t_d)?)?;
    Ok(diff.sqr()?.mean_all()?)
}

/// Mean squared error over every token entry.
pub fn token_mse_batch(t_gt: &Tensor, t_d: &Tensor) -> Result<Tensor> {
    if t_gt.dims() != t_d.dims() {
        return Err(Error::Dimension(format!(
            "token mse shape mismatch: {:?} vs {:?}",
            t_gt.dims(),
            t_d.dims()
        )));
    }
    Ok((t_gt - t_d)?.sqr()?.mean_all()?)
}

/// Soft rank of an arbitrary `(rows, cols)` matrix.
pub fn soft_rank_matrix(m: &Tensor) -> Result<f64> {
    m.dims2()
        .map_err(|_| Error::Dimension(format!("expected a matrix, got {:?}", m.dims())))?;
    scalar(&soft_rank_batch(m)?)
}

/// `(soft_rank(a) - soft_rank(b))^2` for arbitrary same-shape matrices.
pub fn rank_loss_matrix(a: &Tensor, b: &Tensor) -> Result<f64> {
    scalar(&rank_loss_batch(a, b)?)
}

/// `sum_i sigmoid(s_i)` over the singular values of the grid.
pub fn soft_rank(tokens: &TokenGrid) -> Result<f64> {
    scalar(&soft_rank_batch(tokens.tensor())?)
}

pub fn rank_loss(t_gt: &TokenGrid, t_d: &TokenGrid) -> Result<f64> {
    scalar(&rank_loss_batch(t_gt.tensor(), t_d.tensor())?)
}

pub fn token_mse(t_gt: &TokenGrid, t_d: &TokenGrid) -> Result<f64> {
    scalar(&token_mse_batch(t_gt.tensor(), t_d.tensor())?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var};

    fn mat(rows: usize, cols: usize, v: Vec<f64>) -> Tensor {
        Tensor::from_vec(v, (rows, cols), &Device::Cpu).unwrap()
    }

    fn eye(n: usize) -> Tensor {
        mat(n, n, (0..n * n).map(|i| if i % (n + 1) == 0 { 1.0 } else { 0.0 }).collect())
    }

    // sigmoid(1), closed form.
    const SIG1: f64 = 0.731_058_578_630_004_9;

    #[test]
    fn zero_matrix_soft_rank_is_half_rank() {
        assert!((soft_rank_matrix(&mat(4, 8, vec![0.0; 32])).unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn identity_and_saturation() {
        let sr = soft_rank_matrix(&eye(3)).unwrap();
        assert!((sr - 3.0 * SIG1).abs() < 1e-12);
        assert!((sr - 2.193_175_8).abs() < 1e-7);
        let big = mat(2, 2, vec![20.0, 0.0, 0.0, 20.0]);
        assert!((soft_rank_matrix(&big).unwrap() - 2.0).abs() < 1e-8);
    }

    #[test]
    fn rank_loss_against_hand_evaluation() {
        let expected = (3.0 * SIG1 - 1.5f64).powi(2);
        let got = rank_loss_matrix(&eye(3), &mat(3, 3, vec![0.0; 9])).unwrap();
        assert!((got - expected).abs() < 1e-12);
        assert!((got - 0.480_493).abs() < 1e-6);
        assert_eq!(rank_loss_matrix(&eye(3), &eye(3)).unwrap(), 0.0);
    }

    #[test]
    fn grid_wrappers_agree_with_matrix_forms() {
        let v: Vec<f64> = (0..16).map(|i| (i as f64 * 0.37).sin()).collect();
        let g = TokenGrid::from_vec_f64(4, 4, v.clone()).unwrap();
        assert_eq!(soft_rank(&g).unwrap(), soft_rank_matrix(&mat(4, 4, v)).unwrap());
        assert_eq!(rank_loss(&g, &g).unwrap(), 0.0);
    }

    #[test]
    fn token_mse_examples() {
        let a = TokenGrid::from_vec_f64(1, 4, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = TokenGrid::from_vec_f64(1, 4, vec![1.0, 2.0, 3.0, 6.0]).unwrap();
        assert_eq!(token_mse(&a, &b).unwrap(), 1.0);
        let zeros = TokenGrid::from_vec_f64(2, 4, vec![0.0; 8]).unwrap();
        let ones = TokenGrid::from_vec_f64(2, 4, vec![1.0; 8]).unwrap();
        assert_eq!(token_mse(&zeros, &ones).unwrap(), 1.0);
        assert_eq!(token_mse(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn shape_mismatch_is_a_dimension_error() {
        let a = TokenGrid::from_vec_f64(1, 4, vec![0.0; 4]).unwrap();
        let b = TokenGrid::from_vec_f64(4, 1, vec![0.0; 4]).unwrap();
        assert!(matches!(rank_loss(&a, &b), Err(Error::Dimension(_))));
        assert!(matches!(token_mse(&a, &b), Err(Error::Dimension(_))));
    }

    #[test]
    fn non_finite_input_is_a_numeric_error() {
        let m = mat(1, 2, vec![f64::INFINITY, 0.0]);
        assert!(matches!(soft_rank_matrix(&m), Err(Error::Numeric(_))));
    }

    #[test]
    fn backward_is_u_diag_v() {
        // diag(2, 0.5): the gradient of sum sigmoid(s) is diag(sig'(2), sig'(0.5)).
        let v = Var::from_tensor(&mat(2, 2, vec![2.0, 0.0, 0.0, 0.5])).unwrap();
        let g = soft_rank_batch(v.as_tensor()).unwrap().sum_all().unwrap().backward().unwrap();
        let g = g.get(&v).unwrap().to_vec2::<f64>().unwrap();
        let d = |s: f64| sigmoid(s) * (1.0 - sigmoid(s));
        assert!((g[0][0] - d(2.0)).abs() < 1e-12);
        assert!((g[1][1] - d(0.5)).abs() < 1e-12);
        assert!(g[0][1].abs() < 1e-12 && g[1][0].abs() < 1e-12);
    }
}
