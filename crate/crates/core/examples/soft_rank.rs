//! Token extraction and the soft-rank losses on a procedural image.
//!
//! `cargo run --example soft_rank`

use candle_core::{DType, Device, Tensor};
use lvcc::image::ImageTensor;
use lvcc::pipeline::image_tokens;
use lvcc::tokens::{rank_loss, soft_rank, soft_rank_batch, token_mse, ToyExtractor, TokenGrid};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> lvcc::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let image = ImageTensor::from_rgb8(&lvcc::trainer::synthetic_image(128, &mut rng))?;
    let extractor = ToyExtractor::default();
    let tokens = image_tokens(&extractor, &image)?;
    println!("{} tokens of dim {} (grid side {})", tokens.num(), tokens.dim(), tokens.side());

    // A blurred copy loses fine structure, which shows up in both losses.
    let blurred = ImageTensor::new(image.tensor().avg_pool2d(4)?.upsample_nearest2d(128, 128)?)?;
    let degraded = image_tokens(&extractor, &blurred)?;
    println!("soft rank original {:.4}", soft_rank(&tokens)?);
    println!("soft rank blurred  {:.4}", soft_rank(&degraded)?);
    println!("token mse {:.6}, rank loss {:.6}", token_mse(&tokens, &degraded)?, rank_loss(&tokens, &degraded)?);

    // Gradient of the soft rank flows back through the SVD.
    let m = lvcc::nn::ParamStore::new(0, DType::F64);
    let t = m.get(&[1, 8, 16], "t", lvcc::nn::Init::Normal { std: 1.0 })?;
    let r = soft_rank_batch(&t)?.sum_all()?;
    let grads = r.backward()?;
    let g = grads.get(&t).expect("gradient");
    println!("d soft_rank / dT has norm {:.4}", g.sqr()?.sum_all()?.sqrt()?.to_scalar::<f64>()?);

    let zero = TokenGrid::new(Tensor::zeros((4, 9), DType::F32, &Device::Cpu)?)?;
    println!("soft rank of a 4x9 zero matrix: {:.1} (= min(4, 9) / 2)", soft_rank(&zero)?);
    Ok(())
}
