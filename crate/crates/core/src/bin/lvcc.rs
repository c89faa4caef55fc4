use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use lvcc::codec::Bitstream;
use lvcc::evalkit::complexity::{format_report, DEFAULT_RUNS};
use lvcc::evalkit::plot::write_curves_svg;
use lvcc::evalkit::{bd_rate, read_curve_csv, sweep_curve, write_curve_csv, CurveCodec, Metric, Psnr, RaPoint};
use lvcc::image::ImageTensor;
use lvcc::pipeline::{image_tokens, Pipeline, PipelineConfig};
use lvcc::tokens::{extractor_by_name, TokenGrid};
use lvcc::trainer::{self, checkpoint, list_images, TrainConfig};
use lvcc::{Error, Result};

#[derive(Parser)]
#[command(name = "lvcc", version, about = "Token-guided image compression for visual-language models")]
struct Cli {
    /// Seed for every random choice (overrides the training config's seed).
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one training stage.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Checkpoint to start from (required for stages 2 and 3).
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Compress an image into a bitstream.
    Encode {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        q: usize,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Code the original image without pre-editing.
        #[arg(long)]
        no_preedit: bool,
        /// Precomputed token file.
        #[arg(long, conflicts_with = "extractor")]
        tokens: Option<PathBuf>,
        /// Extractor to compute tokens with; must match the model's.
        #[arg(long)]
        extractor: Option<String>,
    },
    /// Decompress a bitstream into an image.
    Decode {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Extract the token grid of an image.
    Tokens {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value = "toy")]
        extractor: String,
        #[arg(long)]
        output: PathBuf,
    },
    /// Sweep every q over a folder of images and write an RA curve.
    Curve {
        #[arg(long)]
        dir: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value = "psnr")]
        metric: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        no_preedit: bool,
        /// Also draw the curve as SVG.
        #[arg(long)]
        plot: Option<PathBuf>,
    },
    /// BD-rate of a test curve against an anchor curve.
    Bdrate {
        #[arg(long)]
        anchor: PathBuf,
        #[arg(long)]
        test: PathBuf,
    },
    /// FLOPs, parameters and time per module on a 256x256 probe.
    ReportComplexity {
        /// Trained model; the default full-size config is used without one.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_RUNS)]
        runs: usize,
    },
}

struct PipelineCodec<'a> {
    pipeline: &'a Pipeline,
    preedit: bool,
}

impl CurveCodec for PipelineCodec<'_> {
    fn q_levels(&self) -> usize {
        self.pipeline.q_levels()
    }

    fn round_trip(&self, image: &ImageTensor, q: usize) -> Result<(ImageTensor, usize)> {
        let bs = self.pipeline.compress(image, q, self.preedit, None)?;
        let (decoded, _) = self.pipeline.decompress(&bs)?;
        Ok((decoded, bs.len()))
    }
}

fn load_model(path: &Path) -> Result<Pipeline> {
    Ok(checkpoint::load(path)?.pipeline)
}

fn metric_by_name(name: &str) -> Result<Box<dyn Metric>> {
    match name {
        "psnr" => Ok(Box::new(Psnr)),
        other => Err(Error::Config(format!("unknown metric {other:?} (built in: psnr)"))),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, resume } => {
            let mut config = TrainConfig::load(&config)?;
            if let Some(seed) = cli.seed {
                config.seed = seed;
            }
            let report = trainer::run_stage(&config, resume.as_deref())?;
            println!(
                "stage {} done: {} steps in {:.1}s, smoothed loss {:.4} -> {:.4}, checkpoint {}",
                report.stage,
                report.steps.len(),
                report.seconds,
                report.initial_smoothed_loss(),
                report.final_smoothed_loss(),
                report.checkpoint.display()
            );
        }
        Command::Encode { input, q, model, output, no_preedit, tokens, extractor } => {
            let pipeline = load_model(&model)?;
            if let Some(name) = extractor {
                if name != pipeline.config().extractor {
                    return Err(Error::Config(format!(
                        "model uses extractor {:?}, not {name:?}",
                        pipeline.config().extractor
                    )));
                }
            }
            let image = ImageTensor::load(&input)?;
            let grid = tokens.map(TokenGrid::load).transpose()?;
            let bs = pipeline.compress(&image, q, !no_preedit, grid.as_ref())?;
            bs.save(&output)?;
            let (_, h, w) = image.dims();
            println!("{} bytes, {:.4} bpp", bs.len(), 8.0 * bs.len() as f64 / (h * w) as f64);
        }
        Command::Decode { input, model, output } => {
            let pipeline = load_model(&model)?;
            let bs = Bitstream::load(&input)?;
            let (image, q) = pipeline.decompress(&bs)?;
            image.save(&output)?;
            let (_, h, w) = image.dims();
            println!("decoded {w}x{h} at q={q}");
        }
        Command::Tokens { input, extractor, output } => {
            let extractor = extractor_by_name(&extractor)?;
            let grid = image_tokens(extractor.as_ref(), &ImageTensor::load(&input)?)?;
            grid.save(&output)?;
            println!("{} tokens of dim {}", grid.num(), grid.dim());
        }
        Command::Curve { dir, model, metric, out, no_preedit, plot } => {
            let pipeline = load_model(&model)?;
            let metric = metric_by_name(&metric)?;
            let mut images = Vec::new();
            for path in list_images(&dir)? {
                match ImageTensor::load(&path) {
                    Ok(img) => images.push(img),
                    Err(e) => log::warn!("skipping {}: {e}", path.display()),
                }
            }
            let codec = PipelineCodec { pipeline: &pipeline, preedit: !no_preedit };
            let points = sweep_curve(&images, &codec, metric.as_ref())?;
            write_curve_csv(&points, &out)?;
            for p in &points {
                println!("q={} bpp={:.4} {}={:.3} n={}", p.q, p.bpp, metric.name(), p.metric, p.n_images);
            }
            if let Some(svg) = plot {
                let ra = points.iter().map(|p| p.ra_point()).collect::<Result<Vec<RaPoint>>>()?;
                write_curves_svg(&[(model.display().to_string(), ra)], metric.name(), svg)?;
            }
        }
        Command::Bdrate { anchor, test } => {
            let to_ra = |path: &Path| -> Result<Vec<RaPoint>> {
                read_curve_csv(path)?.iter().map(|p| p.ra_point()).collect()
            };
            println!("{:.2}%", bd_rate(&to_ra(&anchor)?, &to_ra(&test)?)?);
        }
        Command::ReportComplexity { model, runs } => {
            let pipeline = match model {
                Some(path) => load_model(&path)?,
                None => Pipeline::new(PipelineConfig::default(), cli.seed.unwrap_or(0))?,
            };
            print!("{}", format_report(&pipeline.complexity_report(runs)?));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("lvcc: {e}");
            ExitCode::FAILURE
        }
    }
}
