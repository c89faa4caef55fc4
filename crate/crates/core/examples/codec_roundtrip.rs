//! Compress and decompress an image at every q; checks that entropy coding
//! is lossless over the integer latents.
//!
//! `cargo run --example codec_roundtrip -- [input.png] [checkpoint]`

use lvcc::evalkit::{bpp, Metric, Psnr};
use lvcc::image::ImageTensor;
use lvcc::pipeline::{Pipeline, PipelineConfig};
use lvcc::trainer::checkpoint;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> lvcc::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let image = match args.first() {
        Some(path) => ImageTensor::load(path)?,
        None => ImageTensor::from_rgb8(&lvcc::trainer::synthetic_image(128, &mut ChaCha8Rng::seed_from_u64(9)))?,
    };
    let pipeline = match args.get(1) {
        Some(path) => checkpoint::load(path)?.pipeline,
        None => Pipeline::new(PipelineConfig::tiny(), 0)?,
    };
    let codec = pipeline.codec();
    for q in 0..codec.config().q_levels {
        let (bs, latents) = codec.compress_with_latents(&image, q)?;
        let decoded = codec.decode_latents(&lvcc::codec::Bitstream::from_bytes(&bs.to_bytes())?)?;
        assert_eq!(decoded, latents, "latents differ after decoding");
        let (x_hat, q_read) = codec.decompress(&bs)?;
        let (est_y, est_z) = codec.estimate_bits(&image, q)?;
        println!(
            "q={q_read}: {} bytes, {:.4} bpp (estimate {:.4}), psnr {:.2} dB",
            bs.len(),
            bpp(&bs)?,
            (est_y + est_z) / (image.dims().1 * image.dims().2) as f64,
            Psnr.evaluate(&image, &x_hat)?
        );
    }
    Ok(())
}
