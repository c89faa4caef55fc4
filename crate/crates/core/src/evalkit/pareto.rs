use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// One point of a rate-accuracy curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RaPoint {
    /// Bits per pixel.
    pub rate: f64,
    pub metric: f64,
}

impl RaPoint {
    pub fn new(rate: f64, metric: f64) -> Result<Self> {
        if !(rate.is_finite() && rate > 0.0) || !metric.is_finite() {
            return Err(Error::Numeric(format!("invalid RA point ({rate}, {metric})")));
        }
        Ok(Self { rate, metric })
    }
}

/// `a` dominates `b`: no more rate, no less metric, and better in one.
pub fn dominates(a: &RaPoint, b: &RaPoint) -> bool {
    a.rate <= b.rate && a.metric >= b.metric && (a.rate < b.rate || a.metric > b.metric)
}

/// Points not dominated by any other point, sorted by rate. The metric is
/// nondecreasing along the result; exact duplicates are all kept.
pub fn pareto_front(points: &[RaPoint]) -> Result<Vec<RaPoint>> {
    if points.is_empty() {
        return Err(Error::Numeric("pareto front of an empty point set".into()));
    }
    let mut sorted = points.to_vec();
    sorted.sort_by(|a, b| a.rate.total_cmp(&b.rate).then(b.metric.total_cmp(&a.metric)));
    let mut front: Vec<RaPoint> = Vec::with_capacity(sorted.len());
    for p in sorted {
        match front.last() {
            None => front.push(p),
            Some(last) if p.metric > last.metric || p == *last => front.push(p),
            Some(_) => {}
        }
    }
    Ok(front)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pts(v: &[(f64, f64)]) -> Vec<RaPoint> {
        v.iter().map(|&(r, m)| RaPoint::new(r, m).unwrap()).collect()
    }

    #[test]
    fn drops_the_dominated_middle_point() {
        let front = pareto_front(&pts(&[(1.0, 0.5), (2.0, 0.4), (3.0, 0.6)])).unwrap();
        assert_eq!(front, pts(&[(1.0, 0.5), (3.0, 0.6)]));
    }

    #[test]
    fn monotone_curve_and_single_point_unchanged() {
        let c = pts(&[(0.1, 20.0), (0.2, 25.0), (0.4, 29.0), (0.8, 33.0)]);
        assert_eq!(pareto_front(&c).unwrap(), c);
        assert_eq!(pareto_front(&c[..1]).unwrap(), c[..1].to_vec());
        assert!(pareto_front(&[]).is_err());
    }

    #[test]
    fn invalid_points_rejected() {
        assert!(RaPoint::new(0.0, 1.0).is_err());
        assert!(RaPoint::new(1.0, f64::NAN).is_err());
    }
}
