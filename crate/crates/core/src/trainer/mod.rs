//! Three-stage training: codec alone, pre-editor against a frozen codec,
//! then joint fine-tuning.

pub mod checkpoint;
pub mod data;
pub mod synth;

use std::f64::consts::PI;
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::Var;
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::QuantMode;
use crate::losses::{default_presets, validate_presets, LambdaPreset, LossBreakdown};
use crate::pipeline::{Pipeline, PipelineConfig};
use crate::{Error, Result};

pub use checkpoint::{checksums, CheckpointMeta, Loaded};
pub use data::{list_images, Dataset};
pub use synth::{synthetic_image, write_synthetic_dataset};

pub const ADAM_BETA1: f64 = 0.5;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
/// Floor of the cosine schedule.
pub const DEFAULT_LR_FINAL: f64 = 1e-6;
/// Steps averaged for the smoothed loss.
pub const SMOOTHING_WINDOW: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    Constant,
    Cosine,
}

impl Schedule {
    /// Learning rate at `step` of `total`: constant, or cosine-annealed from
    /// `lr0` to `min(lr_final, lr0)` at the last step.
    pub fn lr(self, lr0: f64, lr_final: f64, step: usize, total: usize) -> f64 {
        match self {
            Schedule::Constant => lr0,
            Schedule::Cosine => {
                let floor = lr_final.min(lr0);
                let t = if total <= 1 { 1.0 } else { step as f64 / (total - 1) as f64 };
                floor + 0.5 * (lr0 - floor) * (1.0 + (PI * t.min(1.0)).cos())
            }
        }
    }
}

fn default_max_grad_norm() -> f64 {
    1.0
}

fn default_batch_size() -> usize {
    8
}

fn default_crop_size() -> usize {
    256
}

fn default_lr_final() -> f64 {
    DEFAULT_LR_FINAL
}

fn default_log_every() -> usize {
    50
}

/// JSON-configurable settings of one training stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub stage: u8,
    pub iterations: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_crop_size")]
    pub crop_size: usize,
    /// Required in stages 1 and 3.
    #[serde(default)]
    pub lr_codec: Option<f64>,
    /// Required in stages 2 and 3.
    #[serde(default)]
    pub lr_preedit: Option<f64>,
    #[serde(default = "default_lr_final")]
    pub lr_final: f64,
    /// Gradients of the trained variables are rescaled to at most this
    /// joint L2 norm before every step.
    #[serde(default = "default_max_grad_norm")]
    pub max_grad_norm: f64,
    pub schedule: Schedule,
    #[serde(default)]
    pub seed: u64,
    pub dataset_path: PathBuf,
    /// Use at most this many images of the dataset.
    #[serde(default)]
    pub max_images: Option<usize>,
    /// Model shape for a fresh stage-1 run; later stages take it from the
    /// input checkpoint.
    #[serde(default = "PipelineConfig::tiny")]
    pub pipeline: PipelineConfig,
    /// One preset per `q`; defaults to [`default_presets`].
    #[serde(default)]
    pub presets: Option<Vec<LambdaPreset>>,
    pub output: PathBuf,
    #[serde(default)]
    pub log_csv: Option<PathBuf>,
    #[serde(default = "default_log_every")]
    pub log_every: usize,
}

impl TrainConfig {
    /// Full-length settings of `stage` with the published learning rates
    /// and iteration counts.
    pub fn for_stage(stage: u8, dataset_path: impl Into<PathBuf>, output: impl Into<PathBuf>) -> Result<Self> {
        let (iterations, lr_codec, lr_preedit, schedule) = match stage {
            1 => (200_000, Some(1e-4), None, Schedule::Constant),
            2 => (150_000, None, Some(1e-4), Schedule::Cosine),
            3 => (150_000, Some(1e-5), Some(1e-6), Schedule::Constant),
            s => return Err(Error::Config(format!("stage must be 1, 2 or 3, got {s}"))),
        };
        Ok(Self {
            stage,
            iterations,
            batch_size: default_batch_size(),
            crop_size: default_crop_size(),
            lr_codec,
            lr_preedit,
            lr_final: DEFAULT_LR_FINAL,
            max_grad_norm: default_max_grad_norm(),
            schedule,
            seed: 0,
            dataset_path: dataset_path.into(),
            max_images: None,
            pipeline: PipelineConfig::tiny(),
            presets: None,
            output: output.into(),
            log_csv: None,
            log_every: default_log_every(),
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let config: Self = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("malformed config {}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=3).contains(&self.stage) {
            return Err(Error::Config(format!("stage must be 1, 2 or 3, got {}", self.stage)));
        }
        if self.iterations == 0 || self.batch_size == 0 {
            return Err(Error::Config("iterations and batch_size must be positive".into()));
        }
        if self.crop_size == 0 || !self.crop_size.is_multiple_of(crate::codec::ALIGNMENT) {
            return Err(Error::Config(format!(
                "crop_size {} must be a positive multiple of {}",
                self.crop_size,
                crate::codec::ALIGNMENT
            )));
        }
        let need_codec = self.stage != 2;
        let need_preedit = self.stage != 1;
        for (name, lr, needed) in [("lr_codec", self.lr_codec, need_codec), ("lr_preedit", self.lr_preedit, need_preedit)] {
            match lr {
                None if needed => return Err(Error::Config(format!("stage {} needs {name}", self.stage))),
                Some(v) if !(v.is_finite() && v > 0.0) => {
                    return Err(Error::Config(format!("{name} must be positive, got {v}")))
                }
                _ => {}
            }
        }
        if !(self.lr_final.is_finite() && self.lr_final >= 0.0) {
            return Err(Error::Config(format!("lr_final must be >= 0, got {}", self.lr_final)));
        }
        if !(self.max_grad_norm.is_finite() && self.max_grad_norm > 0.0) {
            return Err(Error::Config(format!("max_grad_norm must be positive, got {}", self.max_grad_norm)));
        }
        if let Some(p) = &self.presets {
            validate_presets(p)?;
        }
        Ok(())
    }
}

/// Optimizer hyper-parameters actually used.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AdamSettings {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl From<&ParamsAdamW> for AdamSettings {
    fn from(p: &ParamsAdamW) -> Self {
        Self { beta1: p.beta1, beta2: p.beta2, eps: p.eps, weight_decay: p.weight_decay }
    }
}

/// Columns of the per-step training log.
pub const LOG_COLUMNS: [&str; 10] = ["step", "q", "bpp", "mse", "tk", "rk", "total", "lr_codec", "lr_preedit", "grad_norm"];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub q: usize,
    pub lr_codec: f64,
    pub lr_preedit: f64,
    pub loss: LossBreakdown,
    /// Gradient norm before clipping.
    pub grad_norm: f64,
}

impl StepLog {
    fn record(&self) -> [String; 10] {
        let b = &self.loss;
        [
            self.step.to_string(),
            self.q.to_string(),
            b.bpp.to_string(),
            b.mse.to_string(),
            b.tk.to_string(),
            b.rk.to_string(),
            b.total.to_string(),
            self.lr_codec.to_string(),
            self.lr_preedit.to_string(),
            self.grad_norm.to_string(),
        ]
    }
}

/// Outcome of [`run_stage`].
#[derive(Debug, Clone)]
pub struct StageReport {
    pub stage: u8,
    pub steps: Vec<StepLog>,
    pub adam: AdamSettings,
    pub seconds: f64,
    pub checkpoint: PathBuf,
}

impl StageReport {
    fn smoothed(&self, from_end: bool) -> f64 {
        let n = self.steps.len().clamp(1, SMOOTHING_WINDOW);
        let slice = if from_end { &self.steps[self.steps.len().saturating_sub(n)..] } else { &self.steps[..n.min(self.steps.len())] };
        slice.iter().map(|s| s.loss.total).sum::<f64>() / slice.len().max(1) as f64
    }

    /// Mean total loss of the first [`SMOOTHING_WINDOW`] steps.
    pub fn initial_smoothed_loss(&self) -> f64 {
        self.smoothed(false)
    }

    /// Mean total loss of the last [`SMOOTHING_WINDOW`] steps.
    pub fn final_smoothed_loss(&self) -> f64 {
        self.smoothed(true)
    }
}

/// Standard deviation of raw tokens over a few training batches.
pub fn estimate_token_scale(pipeline: &Pipeline, batches: &mut data::Batches<'_>, count: usize) -> Result<f64> {
    let (mut sum, mut sq, mut n) = (0.0, 0.0, 0usize);
    for _ in 0..count.max(1) {
        let t = pipeline.raw_tokens_batch(&batches.next_batch()?)?;
        let v = t.flatten_all()?.to_dtype(candle_core::DType::F64)?.to_vec1::<f64>()?;
        n += v.len();
        sum += v.iter().sum::<f64>();
        sq += v.iter().map(|x| x * x).sum::<f64>();
    }
    let mean = sum / n as f64;
    let std = (sq / n as f64 - mean * mean).max(0.0).sqrt();
    Ok(if std > 1e-12 { std } else { 1.0 })
}

fn adam(vars: Vec<Var>, lr: f64) -> Result<AdamW> {
    let params = ParamsAdamW { lr, beta1: ADAM_BETA1, beta2: ADAM_BETA2, eps: ADAM_EPS, weight_decay: 0.0 };
    Ok(AdamW::new(vars, params)?)
}

fn init_pipeline(config: &TrainConfig, init: Option<&Path>) -> Result<(Pipeline, bool)> {
    let required = match config.stage {
        1 => None,
        s => Some(s - 1),
    };
    let Some(path) = init else {
        if let Some(prev) = required {
            return Err(Error::Config(format!(
                "stage {} needs a stage-{prev} checkpoint to start from",
                config.stage
            )));
        }
        return Ok((Pipeline::new(config.pipeline.clone(), config.seed)?, false));
    };
    let loaded = checkpoint::load(path)?;
    let ok = match required {
        None => loaded.stage == 1,
        Some(prev) => loaded.stage == prev || loaded.stage == config.stage,
    };
    if !ok {
        return Err(Error::Config(format!(
            "stage {} cannot start from a stage-{} checkpoint",
            config.stage, loaded.stage
        )));
    }
    for (name, sum) in checksums(loaded.pipeline.store(), "")? {
        log::debug!("init {name} fnv1a64={sum:016x}");
    }
    Ok((loaded.pipeline, true))
}

/// Runs one training stage and writes its checkpoint to `config.output`.
///
/// Every step draws `q` uniformly and uses that `q`'s loss preset. Stage 1
/// trains the codec on original images with the token terms off; stage 2
/// trains only the pre-editor; stage 3 trains both.
pub fn run_stage(config: &TrainConfig, init: Option<&Path>) -> Result<StageReport> {
    config.validate()?;
    let started = Instant::now();
    let (mut pipeline, from_checkpoint) = init_pipeline(config, init)?;
    let q_levels = pipeline.q_levels();
    let presets = config.presets.clone().unwrap_or_else(|| default_presets(q_levels));
    if presets.len() != q_levels {
        return Err(Error::Config(format!("{} presets for {q_levels} q levels", presets.len())));
    }
    let dataset = Dataset::open_limited(&config.dataset_path, config.crop_size, config.max_images.unwrap_or(usize::MAX))?;
    let mut batches = dataset.batches(config.batch_size, config.seed);
    if !from_checkpoint {
        let scale = estimate_token_scale(&pipeline, &mut dataset.batches(config.batch_size, config.seed ^ 0x7063), 4)?;
        pipeline.set_token_scale(scale)?;
        log::info!("token scale {scale:.5}");
    }

    let codec_before = checksums(pipeline.store(), "codec.")?;
    let stage = config.stage;
    let train_codec = stage != 2;
    let use_preedit = stage != 1;
    let lr_codec0 = config.lr_codec.unwrap_or(0.0);
    let lr_preedit0 = config.lr_preedit.unwrap_or(0.0);
    let mut trained = Vec::new();
    let mut opt_codec = None;
    if train_codec {
        let vars = pipeline.store().vars("codec.");
        trained.extend(vars.iter().cloned());
        opt_codec = Some(adam(vars, lr_codec0)?);
    }
    let mut opt_preedit = None;
    if use_preedit {
        let vars = pipeline.store().vars("preedit.");
        trained.extend(vars.iter().cloned());
        opt_preedit = Some(adam(vars, lr_preedit0)?);
    }
    let adam_settings = opt_codec.as_ref().or(opt_preedit.as_ref()).map(|o| AdamSettings::from(o.params())).expect("one optimizer");

    let mut writer = match &config.log_csv {
        Some(p) => {
            let mut w = csv::Writer::from_path(p)?;
            w.write_record(LOG_COLUMNS)?;
            Some(w)
        }
        None => None,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(u64::from(stage)));
    let mut steps = Vec::with_capacity(config.iterations);
    for step in 0..config.iterations {
        let lr_c = config.schedule.lr(lr_codec0, config.lr_final, step, config.iterations);
        let lr_p = config.schedule.lr(lr_preedit0, config.lr_final, step, config.iterations);
        let q = rng.random_range(0..q_levels);
        let mut preset = presets[q];
        if stage == 1 {
            preset.lambda_tk = 0.0;
            preset.lambda_rk = 0.0;
        }
        let x = batches.next_batch()?;
        let out = pipeline.pass(&x, q, use_preedit, QuantMode::Noise, &preset, &mut rng)?;
        if !out.breakdown.total.is_finite() {
            return Err(Error::Numeric(format!("loss became {} at step {step}", out.breakdown.total)));
        }
        let mut grads = out.loss.backward()?;
        let grad_norm = crate::nn::clip_grad_norm(&mut grads, &trained, config.max_grad_norm)
            .map_err(|e| Error::Numeric(format!("step {step}: {e}")))?;
        if let Some(o) = opt_codec.as_mut() {
            o.set_learning_rate(lr_c);
            o.step(&grads)?;
        }
        if let Some(o) = opt_preedit.as_mut() {
            o.set_learning_rate(lr_p);
            o.step(&grads)?;
        }
        let entry = StepLog {
            step,
            q,
            lr_codec: if train_codec { lr_c } else { 0.0 },
            lr_preedit: if use_preedit { lr_p } else { 0.0 },
            loss: out.breakdown,
            grad_norm,
        };
        if let Some(w) = writer.as_mut() {
            w.write_record(entry.record())?;
        }
        if config.log_every > 0 && (step % config.log_every == 0 || step + 1 == config.iterations) {
            let b = &entry.loss;
            log::info!(
                "stage {stage} step {step}/{} q={q} bpp={:.4} mse={:.5} tk={:.4} rk={:.4} total={:.4} |g|={grad_norm:.3}",
                config.iterations,
                b.bpp,
                b.mse,
                b.tk,
                b.rk,
                b.total
            );
        }
        steps.push(entry);
    }
    if let Some(w) = writer.as_mut() {
        w.flush()?;
    }
    if !train_codec && checksums(pipeline.store(), "codec.")? != codec_before {
        return Err(Error::Internal("codec weights changed during a frozen-codec stage".into()));
    }
    checkpoint::save(&pipeline, stage, config.iterations, &config.output)?;
    Ok(StageReport { stage, steps, adam: adam_settings, seconds: started.elapsed().as_secs_f64(), checkpoint: config.output.clone() })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_endpoints() {
        let s = Schedule::Cosine;
        assert_eq!(s.lr(1e-4, 1e-6, 0, 1000), 1e-4);
        assert!(s.lr(1e-4, 1e-6, 999, 1000) <= 1.0001e-6);
        assert!(s.lr(1e-4, 1e-6, 500, 1000) < 1e-4);
        assert_eq!(Schedule::Constant.lr(3e-5, 1e-6, 77, 100), 3e-5);
    }

    #[test]
    fn published_stage_settings() {
        let c = TrainConfig::for_stage(2, "d", "o").unwrap();
        assert_eq!((c.iterations, c.lr_preedit, c.schedule, c.batch_size), (150_000, Some(1e-4), Schedule::Cosine, 8));
        let c3 = TrainConfig::for_stage(3, "d", "o").unwrap();
        assert_eq!((c3.lr_codec, c3.lr_preedit), (Some(1e-5), Some(1e-6)));
        assert!(TrainConfig::for_stage(4, "d", "o").is_err());
    }

    #[test]
    fn missing_learning_rate_is_rejected() {
        let mut c = TrainConfig::for_stage(3, "d", "o").unwrap();
        c.lr_preedit = None;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn json_config_uses_defaults() {
        let c: TrainConfig = serde_json::from_str(
            r#"{"stage": 1, "iterations": 10, "lr_codec": 0.0001, "schedule": "constant",
                "dataset_path": "imgs", "output": "s1.ckpt"}"#,
        )
        .unwrap();
        c.validate().unwrap();
        assert_eq!((c.batch_size, c.crop_size, c.pipeline.codec.n_channels), (8, 256, 32));
    }

    #[test]
    fn later_stages_need_a_checkpoint() {
        let c = TrainConfig::for_stage(2, "d", "o").unwrap();
        assert!(matches!(run_stage(&c, None), Err(Error::Config(_))));
    }
}
