//! Pareto fronts and BD-rate on synthetic rate-accuracy curves.
//!
//! `cargo run --example bd_rate`

use lvcc::evalkit::{bd_rate, pareto_front, RaPoint};

fn curve(rate_scale: f64, wobble: bool) -> lvcc::Result<Vec<RaPoint>> {
    (0..6)
        .map(|i| {
            let rate = rate_scale * 0.05 * 1.6f64.powi(i);
            let mut metric = 20.0 + 4.0 * (rate / rate_scale).ln();
            if wobble && i == 3 {
                metric -= 3.0;
            }
            RaPoint::new(rate, metric)
        })
        .collect()
}

fn main() -> lvcc::Result<()> {
    let anchor = curve(1.0, false)?;
    let test = curve(0.5, true)?;
    let front = pareto_front(&test)?;
    println!("test curve has {} points, {} on the Pareto front", test.len(), front.len());
    for p in &front {
        println!("  {:.4} bpp -> {:.3}", p.rate, p.metric);
    }
    println!("BD-rate vs itself:  {:.2}%", bd_rate(&anchor, &anchor)?);
    println!("BD-rate half rate:  {:.2}%", bd_rate(&anchor, &curve(0.5, false)?)?);
    println!("BD-rate (wobbly):   {:.2}%", bd_rate(&anchor, &test)?);
    Ok(())
}
