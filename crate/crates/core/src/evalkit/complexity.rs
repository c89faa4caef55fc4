//! FLOPs, parameter counts and wall-clock timing of network modules.

use std::fmt::Write as _;
use std::time::Instant;

use serde::Serialize;

use crate::nn::flops;
use crate::Result;

/// Side of the square probe image used for reports.
pub const PROBE_SIDE: usize = 256;
/// Timed runs per module; the report keeps the median.
pub const DEFAULT_RUNS: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComplexityRow {
    pub module: String,
    pub gflops: f64,
    pub mparams: f64,
    pub seconds: f64,
}

/// Published figures for the full-size networks at 256x256.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReferenceRow {
    pub module: &'static str,
    pub gflops: f64,
    pub mparams: f64,
    pub seconds: f64,
}

pub const REFERENCE_ROWS: [ReferenceRow; 4] = [
    ReferenceRow { module: "extractor", gflops: 365.8, mparams: 85.64, seconds: 0.0436 },
    ReferenceRow { module: "pre-edit", gflops: 2.420, mparams: 23.51, seconds: 0.0248 },
    ReferenceRow { module: "encoder", gflops: 12.22, mparams: 30.97, seconds: 0.0215 },
    ReferenceRow { module: "decoder", gflops: 12.11, mparams: 30.45, seconds: 0.0203 },
];

/// `2 * k^2 * c_in * c_out * h_out * w_out`.
pub fn conv_flops(kernel: usize, c_in: usize, c_out: usize, h_out: usize, w_out: usize) -> u64 {
    2 * (kernel * kernel * c_in * c_out * h_out * w_out) as u64
}

/// `k^2 * c_in * c_out + c_out`.
pub fn conv_params(kernel: usize, c_in: usize, c_out: usize) -> usize {
    kernel * kernel * c_in * c_out + c_out
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Counts the FLOPs of one call to `f`, then times `runs` more calls
/// (at least one) and reports the median.
pub fn measure(module: &str, params: usize, runs: usize, mut f: impl FnMut() -> Result<()>) -> Result<ComplexityRow> {
    let (out, counted) = flops::count(&mut f);
    out?;
    let mut times = Vec::with_capacity(runs.max(1));
    for _ in 0..runs.max(1) {
        let t = Instant::now();
        f()?;
        times.push(t.elapsed().as_secs_f64());
    }
    Ok(ComplexityRow {
        module: module.to_string(),
        gflops: counted as f64 / 1e9,
        mparams: params as f64 / 1e6,
        seconds: median(&mut times),
    })
}

/// Plain-text table of measured rows next to the published ones.
pub fn format_report(rows: &[ComplexityRow]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<10} {:>10} {:>10} {:>10} | {:>10} {:>10} {:>10}",
        "module", "GFLOPs", "Mparams", "time(s)", "ref GFLOPs", "ref Mparams", "ref time"
    );
    for row in rows {
        let r = REFERENCE_ROWS.iter().find(|r| r.module == row.module);
        let fmt = |v: Option<f64>, p: usize| v.map_or_else(|| "-".to_string(), |v| format!("{v:.p$}"));
        let _ = writeln!(
            s,
            "{:<10} {:>10.3} {:>10.3} {:>10.4} | {:>10} {:>10} {:>10}",
            row.module,
            row.gflops,
            row.mparams,
            row.seconds,
            fmt(r.map(|r| r.gflops), 3),
            fmt(r.map(|r| r.mparams), 2),
            fmt(r.map(|r| r.seconds), 4),
        );
    }
    s
}
