//! Token extractor, pre-editor and codec glued into one object.
//!
//! Tokens and pre-editing work on a square canvas: the image is
//! reflect-padded to `side x side`, where `side` is the larger image side
//! rounded up to a multiple of both the patch size and 64 (see
//! [`canvas_side`]), and the edited canvas is cropped back before coding.
//! Tokens fed to the pre-editor and to the token losses are divided by
//! `token_scale`, a global standard deviation measured on training data.

use std::sync::Arc;

use candle_core::{DType, Tensor};
use num_integer::Integer;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{Bitstream, Codec, CodecConfig, QuantMode, ALIGNMENT};
use crate::evalkit::complexity::{measure, ComplexityRow, PROBE_SIDE};
use crate::image::{crop, reflect_pad, round_up, ImageTensor};
use crate::losses::{total_loss, LambdaPreset, LossBreakdown, TokenPair};
use crate::nn::ParamStore;
use crate::preedit::{PreEditConfig, PreEditor};
use crate::tokens::{extractor_by_name, TokenExtractor, TokenGrid};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub preedit: PreEditConfig,
    pub codec: CodecConfig,
    /// Name understood by [`extractor_by_name`].
    pub extractor: String,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self { preedit: PreEditConfig::default(), codec: CodecConfig::default(), extractor: "toy".into() }
    }
}

impl PipelineConfig {
    /// N=32 codec and a small pre-editor.
    pub fn tiny() -> Self {
        Self { preedit: PreEditConfig::tiny(), codec: CodecConfig::tiny(), extractor: "toy".into() }
    }

    pub fn validate(&self) -> Result<()> {
        self.preedit.validate()?;
        self.codec.validate()?;
        if !ALIGNMENT.is_multiple_of(self.preedit.alignment()) {
            return Err(Error::Config(format!("pre-editor with {} scales does not fit the canvas", self.preedit.scales)));
        }
        if self.preedit.q_levels != self.codec.q_levels {
            return Err(Error::Config(format!(
                "pre-editor has {} q levels but the codec has {}",
                self.preedit.q_levels, self.codec.q_levels
            )));
        }
        Ok(())
    }
}

/// Side of the square token canvas for an `height x width` image.
pub fn canvas_side(height: usize, width: usize, patch: usize) -> usize {
    round_up(height.max(width), patch.lcm(&ALIGNMENT))
}

/// Raw tokens of a `(B, 3, H, W)` batch, extracted from its square canvas.
pub fn canvas_tokens(extractor: &dyn TokenExtractor, x: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    let side = canvas_side(h, w, extractor.patch_size());
    extractor.extract_batch(&reflect_pad(&x.to_dtype(DType::F32)?, side, side)?)
}

/// Raw token grid of one image.
pub fn image_tokens(extractor: &dyn TokenExtractor, image: &ImageTensor) -> Result<TokenGrid> {
    TokenGrid::new(canvas_tokens(extractor, &image.batched()?)?.squeeze(0)?)
}

/// Everything produced by one differentiable pass over a batch.
pub struct PassOutput {
    pub loss: Tensor,
    pub breakdown: LossBreakdown,
    /// Input of the codec: the edited batch, or the original when
    /// pre-editing is off.
    pub edited: Tensor,
    pub x_hat: Tensor,
}

pub struct Pipeline {
    config: PipelineConfig,
    store: ParamStore,
    preedit: PreEditor,
    codec: Codec,
    extractor: Arc<dyn TokenExtractor>,
    token_scale: f64,
}

impl Pipeline {
    /// Freshly initialized weights drawn from `seed`.
    pub fn new(config: PipelineConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let extractor = extractor_by_name(&config.extractor)?;
        if extractor.output_dim() != config.preedit.token_dim {
            return Err(Error::Config(format!(
                "extractor {} emits {}-dim tokens but the pre-editor expects {}",
                config.extractor,
                extractor.output_dim(),
                config.preedit.token_dim
            )));
        }
        let store = ParamStore::new(seed, DType::F32);
        let preedit = PreEditor::new(&store.pp("preedit"), config.preedit)?;
        let codec = Codec::new(&store.pp("codec"), config.codec)?;
        Ok(Self { config, store, preedit, codec, extractor, token_scale: 1.0 })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn codec(&self) -> &Codec {
        &self.codec
    }

    pub fn preeditor(&self) -> &PreEditor {
        &self.preedit
    }

    pub fn extractor(&self) -> &dyn TokenExtractor {
        self.extractor.as_ref()
    }

    pub fn q_levels(&self) -> usize {
        self.config.codec.q_levels
    }

    pub fn token_scale(&self) -> f64 {
        self.token_scale
    }

    pub fn set_token_scale(&mut self, scale: f64) -> Result<()> {
        if !scale.is_finite() || scale <= 0.0 {
            return Err(Error::Numeric(format!("token scale must be positive, got {scale}")));
        }
        self.token_scale = scale;
        Ok(())
    }

    pub fn canvas_side(&self, height: usize, width: usize) -> usize {
        canvas_side(height, width, self.extractor.patch_size())
    }

    fn canvas(&self, x: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = x.dims4()?;
        let side = self.canvas_side(h, w);
        reflect_pad(x, side, side)
    }

    /// Raw (unscaled) tokens of a `(B, 3, H, W)` batch, `(B, dim, num)`.
    pub fn raw_tokens_batch(&self, x: &Tensor) -> Result<Tensor> {
        canvas_tokens(self.extractor.as_ref(), x)
    }

    /// Tokens divided by the token scale; differentiable in `x`.
    pub fn tokens_batch(&self, x: &Tensor) -> Result<Tensor> {
        Ok((self.raw_tokens_batch(x)? / self.token_scale)?)
    }

    /// Raw token grid of one image, as stored in token files.
    pub fn tokens(&self, image: &ImageTensor) -> Result<TokenGrid> {
        image_tokens(self.extractor.as_ref(), image)
    }

    /// Pre-edits a batch given scaled tokens; output has the input's size.
    pub fn preedit_batch(&self, x: &Tensor, tokens: &Tensor, q: usize) -> Result<Tensor> {
        let (_, _, h, w) = x.dims4()?;
        let canvas = self.canvas(x)?;
        let edited = self.preedit.forward(&canvas, tokens, q)?;
        crop(&edited, h, w)
    }

    fn scaled_tokens_for(&self, image: &ImageTensor, tokens: Option<&TokenGrid>) -> Result<Tensor> {
        match tokens {
            Some(grid) => {
                let (_, h, w) = image.dims();
                let side = self.canvas_side(h, w) / self.extractor.patch_size();
                if grid.dim() != self.extractor.output_dim() || grid.num() != side * side {
                    return Err(Error::Dimension(format!(
                        "token grid {}x{} does not match this image (expected {}x{})",
                        grid.dim(),
                        grid.num(),
                        self.extractor.output_dim(),
                        side * side
                    )));
                }
                Ok((grid.tensor().to_dtype(DType::F32)?.unsqueeze(0)? / self.token_scale)?)
            }
            None => self.tokens_batch(&image.batched()?),
        }
    }

    /// Pre-edited version of `image`. Tokens are extracted from `image`
    /// unless supplied.
    pub fn edit(&self, image: &ImageTensor, q: usize, tokens: Option<&TokenGrid>) -> Result<ImageTensor> {
        let t = self.scaled_tokens_for(image, tokens)?;
        let x = image.batched()?.to_dtype(DType::F32)?;
        ImageTensor::new(self.preedit_batch(&x, &t, q)?.squeeze(0)?)
    }

    /// Codes `image` at `q`, pre-editing first when `preedit` is set.
    pub fn compress(&self, image: &ImageTensor, q: usize, preedit: bool, tokens: Option<&TokenGrid>) -> Result<Bitstream> {
        if preedit {
            self.codec.compress(&self.edit(image, q, tokens)?, q)
        } else {
            self.codec.compress(image, q)
        }
    }

    pub fn decompress(&self, bs: &Bitstream) -> Result<(ImageTensor, usize)> {
        self.codec.decompress(bs)
    }

    /// Differentiable pass over a `(B, 3, H, W)` batch whose sides are
    /// multiples of 64: optional pre-edit, codec, then the weighted loss.
    /// Token terms are computed only when one of their weights is nonzero.
    /// Distortion is always measured against the original batch.
    pub fn pass(
        &self,
        x: &Tensor,
        q: usize,
        use_preedit: bool,
        mode: QuantMode,
        preset: &LambdaPreset,
        rng: &mut impl Rng,
    ) -> Result<PassOutput> {
        let (b, _, h, w) = x.dims4()?;
        if h % ALIGNMENT != 0 || w % ALIGNMENT != 0 {
            return Err(Error::Dimension(format!("training crops must be multiples of {ALIGNMENT}, got {h}x{w}")));
        }
        let token_terms = preset.lambda_tk > 0.0 || preset.lambda_rk > 0.0;
        let t_gt = if token_terms || use_preedit { Some(self.tokens_batch(x)?.detach()) } else { None };
        let edited = match (&t_gt, use_preedit) {
            (Some(t), true) => self.preedit_batch(x, t, q)?,
            _ => x.clone(),
        };
        let out = self.codec.forward(&edited, q, mode, rng)?;
        let bits = (&out.bits_y + &out.bits_z)?;
        let t_d = if token_terms { Some(self.tokens_batch(&out.x_hat)?) } else { None };
        let pair = match (&t_gt, &t_d) {
            (Some(t_gt), Some(t_d)) => Some(TokenPair { t_gt, t_d }),
            _ => None,
        };
        let (loss, breakdown) = total_loss(&bits, b * h * w, x, &out.x_hat, pair, preset)?;
        Ok(PassOutput { loss, breakdown, edited, x_hat: out.x_hat })
    }

    /// FLOPs, parameters and median time of each module on a
    /// [`PROBE_SIDE`]-square probe image.
    pub fn complexity_report(&self, runs: usize) -> Result<Vec<ComplexityRow>> {
        let x = Tensor::rand(0f32, 1.0, (1, 3, PROBE_SIDE, PROBE_SIDE), self.store.device())?;
        let q = 0;
        let count = |prefixes: &[&str]| prefixes.iter().map(|p| self.store.param_count(p)).sum::<usize>();
        let tokens = self.tokens_batch(&x)?;
        let y = self.codec.g_enc(&x, q)?;
        let z_hat = self.codec.h_enc(&y, q)?.round()?;
        let y_hat = y.round()?;

        let mut rows = Vec::with_capacity(4);
        rows.push(measure("extractor", self.extractor.param_count(), runs, || {
            self.extractor.extract_batch(&x).map(|_| ())
        })?);
        rows.push(measure("pre-edit", count(&["preedit."]), runs, || {
            self.preedit.forward(&x, &tokens, q).map(|_| ())
        })?);
        let enc = ["codec.g_enc.", "codec.h_enc.", "codec.h_dec.", "codec.prior."];
        rows.push(measure("encoder", count(&enc), runs, || {
            let y = self.codec.g_enc(&x, q)?;
            let z = self.codec.h_enc(&y, q)?.round()?;
            self.codec.h_dec(&z, q).map(|_| ())
        })?);
        let dec = ["codec.g_dec.", "codec.h_dec.", "codec.prior."];
        rows.push(measure("decoder", count(&dec), runs, || {
            self.codec.h_dec(&z_hat, q)?;
            self.codec.g_dec(&y_hat, q).map(|_| ())
        })?);
        Ok(rows)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::default_presets;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn image(h: usize, w: usize) -> ImageTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        ImageTensor::from_vec(3, h, w, (0..3 * h * w).map(|_| rng.random::<f32>()).collect()).unwrap()
    }

    #[test]
    fn fresh_preeditor_is_identity_on_non_square_images() {
        let p = Pipeline::new(PipelineConfig::tiny(), 1).unwrap();
        let img = image(64, 96);
        let edited = p.edit(&img, 2, None).unwrap();
        assert_eq!(edited.dims(), (3, 64, 96));
        assert_eq!(edited.to_vec().unwrap(), img.to_vec().unwrap());
        assert_eq!(p.tokens(&img).unwrap().num(), 64);
    }

    #[test]
    fn compress_round_trip_keeps_dims() {
        let p = Pipeline::new(PipelineConfig::tiny(), 1).unwrap();
        let img = image(70, 64);
        let bs = p.compress(&img, 1, true, None).unwrap();
        let (out, q) = p.decompress(&bs).unwrap();
        assert_eq!((out.dims(), q), ((3, 70, 64), 1));
    }

    #[test]
    fn supplied_tokens_must_match_the_canvas() {
        let p = Pipeline::new(PipelineConfig::tiny(), 1).unwrap();
        let wrong = p.tokens(&image(128, 128)).unwrap();
        assert!(p.edit(&image(64, 64), 0, Some(&wrong)).is_err());
        let right = p.tokens(&image(64, 64)).unwrap();
        p.edit(&image(64, 64), 0, Some(&right)).unwrap();
    }

    #[test]
    fn pass_reports_a_consistent_breakdown() {
        let p = Pipeline::new(PipelineConfig::tiny(), 1).unwrap();
        let x = image(64, 64).batched().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = p.pass(&x, 3, true, QuantMode::Noise, &default_presets(6)[3], &mut rng).unwrap();
        let b = out.breakdown;
        assert!(b.tk > 0.0 && b.bpp > 0.0);
        assert!((b.rate_term + b.distortion_term + b.token_term + b.rank_term - b.total).abs() < 1e-3 * b.total);
    }

    #[test]
    fn mismatched_q_levels_are_rejected() {
        let mut c = PipelineConfig::tiny();
        c.codec.q_levels = 4;
        assert!(Pipeline::new(c, 0).is_err());
    }
}
