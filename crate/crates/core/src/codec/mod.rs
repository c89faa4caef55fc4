//! Variable-rate hyperprior codec.
//!
//! `g_enc` maps a padded image to the latent `y` (16x down), `h_enc` maps
//! `|y|` to the hyper-latent `z` (another 4x down). `z` is rounded and coded
//! with a learned factorized prior; `h_dec(z_hat)` predicts a scale per
//! latent element, and `y_hat = round(y)` is coded with zero-mean Gaussian
//! tables picked by those scales. Every transform takes the rate index `q`
//! through adaption layers, so one set of weights serves all rates.

pub mod bitstream;
pub mod cdf;
pub mod entropy;
pub mod gdn;
pub mod quant;
pub mod rangecoder;
pub mod transforms;
pub mod vectors;

pub use bitstream::Bitstream;
pub use entropy::{gaussian_likelihood, rate_estimate, FactorizedPrior, LIKELIHOOD_FLOOR};
pub use gdn::Gdn;
pub use quant::{quantize, round_half_even, QuantMode};
pub use rangecoder::CdfTable;
pub use transforms::{AnalysisTransform, HyperAnalysis, HyperSynthesis, ResBlock, SynthesisTransform};

use candle_core::{DType, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::image::{crop, reflect_pad, round_up, ImageTensor};
use crate::nn::ParamStore;
use crate::{Error, Result};

/// Spatial alignment of codec inputs (four stride-2 stages, then two more).
pub const ALIGNMENT: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CodecConfig {
    /// Transform width `N`.
    pub n_channels: usize,
    pub q_levels: usize,
    /// Smallest Gaussian scale the hyper decoder can emit.
    pub scale_bound: f64,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self { n_channels: 192, q_levels: 6, scale_bound: 0.11 }
    }
}

impl CodecConfig {
    pub fn tiny() -> Self {
        Self { n_channels: 32, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_channels < 8 {
            return Err(Error::Config(format!("codec width {} is below 8", self.n_channels)));
        }
        if !(2..=255).contains(&self.q_levels) {
            return Err(Error::Config(format!("q_levels {} outside [2, 255]", self.q_levels)));
        }
        if !(self.scale_bound > 0.0 && self.scale_bound < cdf::SCALE_TABLE_MAX) {
            return Err(Error::Config(format!("scale bound {} outside (0, 256)", self.scale_bound)));
        }
        Ok(())
    }

    /// The 64 log-spaced coding scales, starting at `scale_bound`.
    pub fn scale_table(&self) -> Vec<f64> {
        cdf::scale_table(self.scale_bound, cdf::SCALE_TABLE_MAX, cdf::SCALE_TABLE_LEN)
    }
}

/// Latents of one padded batch: the continuous `y`, the rounded
/// hyper-latent `z_hat` and the scales `h_dec(z_hat)`.
#[derive(Debug, Clone)]
pub struct LatentPack {
    pub y: Tensor,
    pub z_hat: Tensor,
    pub scales: Tensor,
}

/// Output of a differentiable pass through the codec.
#[derive(Debug, Clone)]
pub struct CodecOutput {
    /// Reconstruction, same shape as the input.
    pub x_hat: Tensor,
    /// Estimated bits of the whole batch, as scalar tensors.
    pub bits_y: Tensor,
    pub bits_z: Tensor,
}

impl CodecOutput {
    /// Estimated bits per input pixel (`pixels` counts the whole batch).
    pub fn bpp(&self, pixels: usize) -> Result<Tensor> {
        Ok(((&self.bits_y + &self.bits_z)? / pixels as f64)?)
    }
}

/// Integer latents as coded in a bitstream, in `(C, H, W)` order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CodedLatents {
    pub y: Vec<i32>,
    pub y_shape: (usize, usize, usize),
    pub z: Vec<i32>,
    pub z_shape: (usize, usize, usize),
}

#[derive(Debug, Clone)]
pub struct Codec {
    config: CodecConfig,
    g_enc: AnalysisTransform,
    g_dec: SynthesisTransform,
    h_enc: HyperAnalysis,
    h_dec: HyperSynthesis,
    prior: FactorizedPrior,
    scale_table: Vec<f64>,
    gaussian_tables: Vec<CdfTable>,
    dtype: DType,
}

fn check_q(q: usize, q_levels: usize) -> Result<()> {
    if q >= q_levels {
        return Err(Error::Config(format!("q index {q} out of range [0, {q_levels})")));
    }
    Ok(())
}

fn to_i32(t: &Tensor) -> Result<Vec<i32>> {
    let v = t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    v.into_iter()
        .map(|x| {
            if x.is_finite() && x.abs() < 1e9 {
                Ok(x as i32)
            } else {
                Err(Error::Numeric(format!("latent value {x} cannot be coded")))
            }
        })
        .collect()
}

impl Codec {
    pub fn new(store: &ParamStore, config: CodecConfig) -> Result<Self> {
        config.validate()?;
        let n = config.n_channels;
        let q = config.q_levels;
        let scale_table = config.scale_table();
        Ok(Self {
            g_enc: AnalysisTransform::new(&store.pp("g_enc"), n, q)?,
            g_dec: SynthesisTransform::new(&store.pp("g_dec"), n, q)?,
            h_enc: HyperAnalysis::new(&store.pp("h_enc"), n, q)?,
            h_dec: HyperSynthesis::new(&store.pp("h_dec"), n, q, config.scale_bound)?,
            prior: FactorizedPrior::new(&store.pp("prior"), n)?,
            gaussian_tables: cdf::gaussian_tables(&scale_table)?,
            scale_table,
            config,
            dtype: store.dtype(),
        })
    }

    pub fn config(&self) -> &CodecConfig {
        &self.config
    }

    pub fn prior(&self) -> &FactorizedPrior {
        &self.prior
    }

    pub fn scale_table(&self) -> &[f64] {
        &self.scale_table
    }

    pub fn gdns(&self) -> impl Iterator<Item = &Gdn> {
        self.g_enc.gdns().chain(self.g_dec.gdns())
    }

    pub fn g_enc(&self, x: &Tensor, q: usize) -> Result<Tensor> {
        check_q(q, self.config.q_levels)?;
        self.g_enc.forward(x, q)
    }

    pub fn g_dec(&self, y_hat: &Tensor, q: usize) -> Result<Tensor> {
        check_q(q, self.config.q_levels)?;
        self.g_dec.forward(y_hat, q)
    }

    pub fn h_enc(&self, y: &Tensor, q: usize) -> Result<Tensor> {
        check_q(q, self.config.q_levels)?;
        self.h_enc.forward(y, q)
    }

    pub fn h_dec(&self, z_hat: &Tensor, q: usize) -> Result<Tensor> {
        check_q(q, self.config.q_levels)?;
        self.h_dec.forward(z_hat, q)
    }

    /// Full differentiable pass on a `(B, 3, H, W)` batch with sides that
    /// are multiples of 64. In [`QuantMode::Noise`] the latents get uniform
    /// noise from `rng`; in [`QuantMode::Round`] they are rounded.
    pub fn forward(&self, x: &Tensor, q: usize, mode: QuantMode, rng: &mut impl Rng) -> Result<CodecOutput> {
        check_q(q, self.config.q_levels)?;
        let (_, _, h, w) = x.dims4()?;
        if h % ALIGNMENT != 0 || w % ALIGNMENT != 0 {
            return Err(Error::Dimension(format!("codec input {h}x{w} is not a multiple of {ALIGNMENT}")));
        }
        let y = self.g_enc.forward(x, q)?;
        let z = self.h_enc.forward(&y, q)?;
        let z_hat = quantize(&z, mode, rng)?;
        let scales = self.h_dec.forward(&z_hat, q)?;
        let y_hat = quantize(&y, mode, rng)?;
        let (bits_y, bits_z) = rate_estimate(&y_hat, &scales, &z_hat, &self.prior, self.config.scale_bound)?;
        let x_hat = self.g_dec.forward(&y_hat, q)?;
        Ok(CodecOutput { x_hat, bits_y, bits_z })
    }

    fn padded(&self, image: &ImageTensor) -> Result<Tensor> {
        let (c, h, w) = image.dims();
        if c != 3 {
            return Err(Error::Dimension(format!("codec expects 3 channels, got {c}")));
        }
        if h < ALIGNMENT || w < ALIGNMENT {
            return Err(Error::Dimension(format!("image {h}x{w} is smaller than {ALIGNMENT}x{ALIGNMENT}")));
        }
        if h > usize::from(u16::MAX) || w > usize::from(u16::MAX) {
            return Err(Error::Dimension(format!("image {h}x{w} exceeds the 65535-pixel header limit")));
        }
        let x = image.batched()?.to_dtype(self.dtype)?;
        reflect_pad(&x, round_up(h, ALIGNMENT), round_up(w, ALIGNMENT))
    }

    /// Encoder-side latents of one image (padded internally).
    pub fn analyze(&self, image: &ImageTensor, q: usize) -> Result<LatentPack> {
        check_q(q, self.config.q_levels)?;
        let x = self.padded(image)?;
        let y = self.g_enc.forward(&x, q)?;
        let z_hat = round_half_even(&self.h_enc.forward(&y, q)?)?;
        let scales = self.h_dec.forward(&z_hat, q)?;
        Ok(LatentPack { y, z_hat, scales })
    }

    /// Estimated `(bits_y, bits_z)` for coding `image` at `q`, using the
    /// continuous scales.
    pub fn estimate_bits(&self, image: &ImageTensor, q: usize) -> Result<(f64, f64)> {
        let lp = self.analyze(image, q)?;
        let y_hat = round_half_even(&lp.y)?;
        let (by, bz) = rate_estimate(&y_hat, &lp.scales, &lp.z_hat, &self.prior, self.config.scale_bound)?;
        Ok((crate::nn::scalar(&by)?, crate::nn::scalar(&bz)?))
    }

    fn y_indices(&self, scales: &Tensor) -> Result<Vec<u32>> {
        let s = scales.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
        Ok(s.into_iter().map(|v| cdf::snap_scale_index(&self.scale_table, v) as u32).collect())
    }

    fn z_indices(&self, z_shape: (usize, usize, usize)) -> Vec<u32> {
        let (c, h, w) = z_shape;
        (0..c as u32).flat_map(|ch| std::iter::repeat_n(ch, h * w)).collect()
    }

    /// Compresses one image and also returns the integer latents it coded.
    pub fn compress_with_latents(&self, image: &ImageTensor, q: usize) -> Result<(Bitstream, CodedLatents)> {
        let (_, h, w) = image.dims();
        let lp = self.analyze(image, q)?;
        let y_hat = round_half_even(&lp.y)?;
        let (_, c, yh, yw) = y_hat.dims4()?;
        let (_, zc, zh, zw) = lp.z_hat.dims4()?;
        let latents = CodedLatents {
            y: to_i32(&y_hat)?,
            y_shape: (c, yh, yw),
            z: to_i32(&lp.z_hat)?,
            z_shape: (zc, zh, zw),
        };
        let z_tables = self.prior.build_tables()?;
        let z_bytes = cdf::encode_values(&latents.z, &z_tables, &self.z_indices(latents.z_shape))?;
        let y_bytes = cdf::encode_values(&latents.y, &self.gaussian_tables, &self.y_indices(&lp.scales)?)?;
        let bs = Bitstream { q: q as u8, height: h as u16, width: w as u16, z_bytes, y_bytes };
        Ok((bs, latents))
    }

    pub fn compress(&self, image: &ImageTensor, q: usize) -> Result<Bitstream> {
        Ok(self.compress_with_latents(image, q)?.0)
    }

    /// Entropy-decodes the integer latents of a bitstream.
    pub fn decode_latents(&self, bs: &Bitstream) -> Result<CodedLatents> {
        let q = usize::from(bs.q);
        check_q(q, self.config.q_levels).map_err(|_| Error::Format(format!("bitstream q {q} unsupported")))?;
        let (h, w) = (usize::from(bs.height), usize::from(bs.width));
        if h < ALIGNMENT || w < ALIGNMENT {
            return Err(Error::Format(format!("bitstream dims {h}x{w} are below the codec minimum")));
        }
        let n = self.config.n_channels;
        let (ph, pw) = (round_up(h, ALIGNMENT), round_up(w, ALIGNMENT));
        let z_shape = (n, ph / 64, pw / 64);
        let y_shape = (n, ph / 16, pw / 16);
        let z_tables = self.prior.build_tables()?;
        let z = cdf::decode_values(&bs.z_bytes, &z_tables, &self.z_indices(z_shape))?;
        let z_hat = Tensor::from_vec(
            z.iter().map(|&v| v as f32).collect::<Vec<_>>(),
            (1, z_shape.0, z_shape.1, z_shape.2),
            &candle_core::Device::Cpu,
        )?
        .to_dtype(self.dtype)?;
        let scales = self.h_dec.forward(&z_hat, q)?;
        let y = cdf::decode_values(&bs.y_bytes, &self.gaussian_tables, &self.y_indices(&scales)?)?;
        Ok(CodedLatents { y, y_shape, z, z_shape })
    }

    /// Decodes a bitstream to an image with the original dimensions; also
    /// returns the `q` recorded in the header.
    pub fn decompress(&self, bs: &Bitstream) -> Result<(ImageTensor, usize)> {
        let latents = self.decode_latents(bs)?;
        let q = usize::from(bs.q);
        let (c, h, w) = latents.y_shape;
        let y_hat = Tensor::from_vec(
            latents.y.iter().map(|&v| v as f32).collect::<Vec<_>>(),
            (1, c, h, w),
            &candle_core::Device::Cpu,
        )?
        .to_dtype(self.dtype)?;
        let x_hat = self.g_dec.forward(&y_hat, q)?;
        let out = crop(&x_hat, usize::from(bs.height), usize::from(bs.width))?;
        Ok((ImageTensor::new(out.squeeze(0)?.to_dtype(DType::F32)?)?, q))
    }

    /// `g_dec(round(g_enc(x)))` without entropy coding, cropped to the
    /// input size.
    pub fn reconstruct_direct(&self, image: &ImageTensor, q: usize) -> Result<ImageTensor> {
        let (_, h, w) = image.dims();
        let lp = self.analyze(image, q)?;
        let y_hat = round_half_even(&lp.y)?;
        let x_hat = self.g_dec.forward(&y_hat, q)?;
        ImageTensor::new(crop(&x_hat, h, w)?.squeeze(0)?.to_dtype(DType::F32)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn codec() -> Codec {
        let store = ParamStore::new(9, DType::F32);
        Codec::new(&store.pp("codec"), CodecConfig { n_channels: 8, ..CodecConfig::tiny() }).unwrap()
    }

    fn image(h: usize, w: usize, seed: u64) -> ImageTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageTensor::from_vec(3, h, w, (0..3 * h * w).map(|_| rng.random::<f32>()).collect()).unwrap()
    }

    #[test]
    fn latent_shapes_and_scale_floor() {
        let c = codec();
        let lp = c.analyze(&image(256, 256, 1), 2).unwrap();
        assert_eq!(lp.y.dims(), &[1, 8, 16, 16]);
        assert_eq!(lp.z_hat.dims(), &[1, 8, 4, 4]);
        assert_eq!(lp.scales.dims(), &[1, 8, 16, 16]);
        let min = lp.scales.flatten_all().unwrap().min(0).unwrap().to_scalar::<f32>().unwrap();
        assert!(min >= 0.11);
    }

    #[test]
    fn round_trip_restores_dims_and_matches_direct_synthesis() {
        let c = codec();
        let img = image(70, 100, 2);
        let (bs, latents) = c.compress_with_latents(&img, 4).unwrap();
        let bytes = bs.to_bytes();
        let parsed = Bitstream::from_bytes(&bytes).unwrap();
        assert_eq!(c.decode_latents(&parsed).unwrap(), latents);
        let (out, q) = c.decompress(&parsed).unwrap();
        assert_eq!(q, 4);
        assert_eq!(out.dims(), (3, 70, 100));
        let direct = c.reconstruct_direct(&img, 4).unwrap();
        assert_eq!(out.to_vec().unwrap(), direct.to_vec().unwrap());
        assert_eq!(c.compress(&img, 4).unwrap().to_bytes(), bytes);
    }

    #[test]
    fn too_small_and_bad_q() {
        let c = codec();
        assert!(matches!(c.compress(&image(32, 64, 3), 0), Err(Error::Dimension(_))));
        assert!(matches!(c.compress(&image(64, 64, 3), 6), Err(Error::Config(_))));
    }

    #[test]
    fn training_pass_shapes() {
        let c = codec();
        let x = image(64, 128, 4).batched().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = c.forward(&x, 0, QuantMode::Noise, &mut rng).unwrap();
        assert_eq!(out.x_hat.dims(), x.dims());
        let bpp = crate::nn::scalar(&out.bpp(64 * 128).unwrap()).unwrap();
        assert!(bpp.is_finite() && bpp > 0.0);
    }
}
