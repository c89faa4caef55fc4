//! Rate-accuracy evaluation: bpp, Pareto fronts, BD-rate, RA curves and
//! complexity reports.

mod bdrate;
mod bpp;
pub mod complexity;
mod curve;
mod pareto;
pub mod plot;

pub use bdrate::{bd_rate, MIN_CURVE_POINTS};
pub use bpp::{bpp, bpp_of_bytes, bpp_ratio, BppRatio};
pub use complexity::{ComplexityRow, REFERENCE_ROWS};
pub use curve::{read_curve_csv, sweep_curve, write_curve_csv, CurveCodec, CurvePoint, IdentityCodec, Metric, Psnr, PSNR_CAP_DB};
pub use pareto::{dominates, pareto_front, RaPoint};
