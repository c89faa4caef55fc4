//! Token-conditioned pre-editing of one image at every rate index.
//!
//! `cargo run --example preedit -- [input.png] [checkpoint]`
//!
//! Without a checkpoint the pre-editor is freshly initialized, which makes
//! it the identity map.

use lvcc::image::ImageTensor;
use lvcc::pipeline::{Pipeline, PipelineConfig};
use lvcc::trainer::checkpoint;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> lvcc::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let image = match args.first() {
        Some(path) => ImageTensor::load(path)?,
        None => ImageTensor::from_rgb8(&lvcc::trainer::synthetic_image(96, &mut ChaCha8Rng::seed_from_u64(4)))?,
    };
    let pipeline = match args.get(1) {
        Some(path) => checkpoint::load(path)?.pipeline,
        None => Pipeline::new(PipelineConfig::tiny(), 0)?,
    };
    let (_, h, w) = image.dims();
    println!("{w}x{h} image, token canvas {0}x{0}", pipeline.canvas_side(h, w));
    let tokens = pipeline.tokens(&image)?;
    let original = image.to_vec()?;
    for q in 0..pipeline.q_levels() {
        let edited = pipeline.edit(&image, q, Some(&tokens))?.to_vec()?;
        let change = original.iter().zip(&edited).map(|(a, b)| (a - b).abs()).fold(0f32, f32::max);
        println!("q={q}: max pixel change {change:.5}");
    }
    Ok(())
}
