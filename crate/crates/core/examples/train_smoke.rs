//! Runs all three training stages on a small procedural dataset.
//!
//! `cargo run --release --example train_smoke -- [work_dir] [iterations]`
//!
//! Writes `data/`, `stage{1,2,3}.ckpt` and `stage{1,2,3}.csv` into
//! `work_dir` (default `smoke_run`).

use std::path::PathBuf;

use lvcc::pipeline::PipelineConfig;
use lvcc::trainer::{run_stage, write_synthetic_dataset, Schedule, TrainConfig};

fn main() -> lvcc::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut args = std::env::args().skip(1);
    let work = PathBuf::from(args.next().unwrap_or_else(|| "smoke_run".into()));
    let iterations: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(100);
    let data = work.join("data");
    if !data.exists() {
        write_synthetic_dataset(&data, 64, 160, 7)?;
    }

    let mut previous: Option<PathBuf> = None;
    for stage in 1..=3u8 {
        let mut config = TrainConfig::for_stage(stage, &data, work.join(format!("stage{stage}.ckpt")))?;
        config.iterations = iterations;
        config.batch_size = 4;
        config.crop_size = 128;
        config.pipeline = PipelineConfig::tiny();
        config.log_csv = Some(work.join(format!("stage{stage}.csv")));
        config.log_every = 10;
        if stage == 1 {
            config.lr_codec = Some(1e-3);
            config.schedule = Schedule::Constant;
        }
        let report = run_stage(&config, previous.as_deref())?;
        println!(
            "stage {stage}: smoothed loss {:.3} -> {:.3} in {:.0}s (adam beta1={}, beta2={})",
            report.initial_smoothed_loss(),
            report.final_smoothed_loss(),
            report.seconds,
            report.adam.beta1,
            report.adam.beta2
        );
        previous = Some(report.checkpoint);
    }
    Ok(())
}
