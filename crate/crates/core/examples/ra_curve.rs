//! Sweeps every q over a folder of images and writes the RA curve as CSV
//! and SVG.
//!
//! `cargo run --release --example ra_curve -- <checkpoint> <image_dir> [out_prefix]`

use lvcc::evalkit::plot::write_curves_svg;
use lvcc::evalkit::{sweep_curve, write_curve_csv, CurveCodec, Psnr};
use lvcc::image::ImageTensor;
use lvcc::pipeline::Pipeline;
use lvcc::trainer::{checkpoint, list_images};

struct Coded<'a>(&'a Pipeline, bool);

impl CurveCodec for Coded<'_> {
    fn q_levels(&self) -> usize {
        self.0.q_levels()
    }

    fn round_trip(&self, image: &ImageTensor, q: usize) -> lvcc::Result<(ImageTensor, usize)> {
        let bs = self.0.compress(image, q, self.1, None)?;
        Ok((self.0.decompress(&bs)?.0, bs.len()))
    }
}

fn main() -> lvcc::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let (Some(model), Some(dir)) = (args.first(), args.get(1)) else {
        eprintln!("usage: ra_curve <checkpoint> <image_dir> [out_prefix]");
        std::process::exit(2);
    };
    let prefix = args.get(2).cloned().unwrap_or_else(|| "curve".into());
    let pipeline = checkpoint::load(model)?.pipeline;
    let images = list_images(dir)?.iter().map(ImageTensor::load).collect::<lvcc::Result<Vec<_>>>()?;

    let mut series = Vec::new();
    for (name, preedit) in [("pre-edit", true), ("no pre-edit", false)] {
        let points = sweep_curve(&images, &Coded(&pipeline, preedit), &Psnr)?;
        let csv = format!("{prefix}_{}.csv", name.replace(' ', "_"));
        write_curve_csv(&points, &csv)?;
        println!("{name}: wrote {csv}");
        series.push((name.to_string(), points.iter().map(|p| p.ra_point()).collect::<lvcc::Result<Vec<_>>>()?));
    }
    write_curves_svg(&series, "PSNR (dB)", format!("{prefix}.svg"))?;
    Ok(())
}
