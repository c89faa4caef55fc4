//! FLOPs, parameter counts and timings per module at 256x256.
//!
//! `cargo run --release --example complexity -- [tiny]`

use lvcc::evalkit::complexity::format_report;
use lvcc::pipeline::{Pipeline, PipelineConfig};

fn main() -> lvcc::Result<()> {
    let config = match std::env::args().nth(1).as_deref() {
        Some("tiny") => PipelineConfig::tiny(),
        _ => PipelineConfig::default(),
    };
    let pipeline = Pipeline::new(config, 0)?;
    print!("{}", format_report(&pipeline.complexity_report(10)?));
    Ok(())
}
