//! Minimal SVG line plots for RA curves.

use std::fmt::Write as _;
use std::path::Path;

use crate::evalkit::pareto::RaPoint;
use crate::Result;

const W: f64 = 640.0;
const H: f64 = 420.0;
const MARGIN: f64 = 56.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

/// Renders named curves (rate on x, metric on y) as an SVG document.
pub fn curves_svg(series: &[(String, Vec<RaPoint>)], metric_label: &str) -> String {
    let all: Vec<&RaPoint> = series.iter().flat_map(|(_, p)| p.iter()).collect();
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for p in &all {
        x0 = x0.min(p.rate);
        x1 = x1.max(p.rate);
        y0 = y0.min(p.metric);
        y1 = y1.max(p.metric);
    }
    if all.is_empty() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 - x0 < 1e-12 {
        x1 = x0 + 1.0;
    }
    if y1 - y0 < 1e-12 {
        y1 = y0 + 1.0;
    }
    let sx = |x: f64| MARGIN + (x - x0) / (x1 - x0) * (W - 2.0 * MARGIN);
    let sy = |y: f64| H - MARGIN - (y - y0) / (y1 - y0) * (H - 2.0 * MARGIN);
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<path d="M{m} {t} L{m} {b} L{r} {b}" stroke="black" fill="none"/>"#,
        m = MARGIN,
        t = MARGIN,
        b = H - MARGIN,
        r = W - MARGIN
    );
    for i in 0..=4 {
        let fx = x0 + (x1 - x0) * f64::from(i) / 4.0;
        let fy = y0 + (y1 - y0) * f64::from(i) / 4.0;
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{fx:.3}</text>"#, sx(fx), H - MARGIN + 18.0);
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{fy:.2}</text>"#, MARGIN - 6.0, sy(fy) + 4.0);
    }
    let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">bpp</text>"#, W / 2.0, H - 12.0);
    let _ = writeln!(s, r#"<text x="14" y="{:.1}" transform="rotate(-90 14 {:.1})" text-anchor="middle">{metric_label}</text>"#, H / 2.0, H / 2.0);
    for (k, (name, pts)) in series.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        let mut sorted = pts.clone();
        sorted.sort_by(|a, b| a.rate.total_cmp(&b.rate));
        let path: Vec<String> = sorted.iter().map(|p| format!("{:.2},{:.2}", sx(p.rate), sy(p.metric))).collect();
        let _ = writeln!(s, r#"<polyline points="{}" stroke="{color}" fill="none" stroke-width="2"/>"#, path.join(" "));
        for p in &sorted {
            let _ = writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{color}"/>"#, sx(p.rate), sy(p.metric));
        }
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" fill="{color}">{name}</text>"#,
            W - MARGIN - 120.0,
            MARGIN + 16.0 * k as f64
        );
    }
    s.push_str("</svg>\n");
    s
}

pub fn write_curves_svg(series: &[(String, Vec<RaPoint>)], metric_label: &str, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, curves_svg(series, metric_label))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn svg_contains_every_point() {
        let pts: Vec<RaPoint> = (1..5).map(|i| RaPoint::new(0.1 * f64::from(i), 20.0 + f64::from(i)).unwrap()).collect();
        let svg = curves_svg(&[("ours".into(), pts)], "psnr");
        assert!(svg.starts_with("<svg"));
        assert_eq!(svg.matches("<circle").count(), 4);
    }
}
