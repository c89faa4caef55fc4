//! Bjontegaard delta rate with the classic cubic fit.

use nalgebra::{DMatrix, DVector};

use crate::evalkit::pareto::{pareto_front, RaPoint};
use crate::{Error, Result};

pub const MIN_CURVE_POINTS: usize = 4;

/// Least-squares cubic `log10(rate) ~ c0 + c1 u + c2 u^2 + c3 u^3`.
fn fit_cubic(u: &[f64], log_rate: &[f64]) -> Result<[f64; 4]> {
    let a = DMatrix::from_fn(u.len(), 4, |i, j| u[i].powi(j as i32));
    let b = DVector::from_column_slice(log_rate);
    let c = a
        .svd(true, true)
        .solve(&b, 1e-12)
        .map_err(|e| Error::Numeric(format!("cubic fit failed: {e}")))?;
    Ok([c[0], c[1], c[2], c[3]])
}

fn integral(c: &[f64; 4], lo: f64, hi: f64) -> f64 {
    let anti = |x: f64| c[0] * x + c[1] * x * x / 2.0 + c[2] * x.powi(3) / 3.0 + c[3] * x.powi(4) / 4.0;
    anti(hi) - anti(lo)
}

fn usable(points: &[RaPoint], which: &str) -> Result<Vec<RaPoint>> {
    let front = pareto_front(points)?;
    let mut metrics: Vec<f64> = front.iter().map(|p| p.metric).collect();
    metrics.dedup();
    if metrics.len() < MIN_CURVE_POINTS {
        return Err(Error::Numeric(format!(
            "{which} curve has {} usable points after Pareto filtering; need {MIN_CURVE_POINTS}",
            metrics.len()
        )));
    }
    let mut out: Vec<RaPoint> = Vec::with_capacity(front.len());
    for p in front {
        if out.last().is_some_and(|l: &RaPoint| l.metric == p.metric) {
            continue;
        }
        out.push(p);
    }
    Ok(out)
}

/// Average bitrate difference of `test` relative to `anchor` at equal
/// metric, in percent (negative: `test` needs fewer bits).
///
/// Each curve is Pareto-filtered, `log10(rate)` is fitted as a cubic in the
/// metric, and the fits are integrated over the overlapping metric range.
pub fn bd_rate(anchor: &[RaPoint], test: &[RaPoint]) -> Result<f64> {
    let a = usable(anchor, "anchor")?;
    let t = usable(test, "test")?;
    let (a_lo, a_hi) = (a[0].metric, a[a.len() - 1].metric);
    let (t_lo, t_hi) = (t[0].metric, t[t.len() - 1].metric);
    let (lo, hi) = (a_lo.max(t_lo), a_hi.min(t_hi));
    if hi <= lo {
        return Err(Error::Numeric(format!(
            "metric ranges do not overlap: [{a_lo}, {a_hi}] vs [{t_lo}, {t_hi}]"
        )));
    }
    // Shared affine normalization keeps the Vandermonde system well scaled.
    let center = 0.5 * (lo + hi);
    let half = 0.5 * (hi - lo);
    let norm = |p: &[RaPoint]| -> (Vec<f64>, Vec<f64>) {
        p.iter().map(|q| ((q.metric - center) / half, q.rate.log10())).unzip()
    };
    let (ua, ra) = norm(&a);
    let (ut, rt) = norm(&t);
    let ca = fit_cubic(&ua, &ra)?;
    let ct = fit_cubic(&ut, &rt)?;
    let avg = (integral(&ct, -1.0, 1.0) - integral(&ca, -1.0, 1.0)) / 2.0;
    Ok((10f64.powf(avg) - 1.0) * 100.0)
}
