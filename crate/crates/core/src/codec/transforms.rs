use candle_core::Tensor;

use crate::codec::gdn::Gdn;
use crate::nn::{leaky_relu, pixel_shuffle2, softplus, Conv2d, ParamStore};
use crate::preedit::Adaption;
use crate::{Error, Result};

const SLOPE: f64 = 0.01;

/// Two 3x3 convolutions, each followed by a `q` adaption, with a skip.
#[derive(Debug, Clone)]
pub struct ResBlock {
    conv1: Conv2d,
    adapt1: Adaption,
    conv2: Conv2d,
    adapt2: Adaption,
}

impl ResBlock {
    pub fn new(store: &ParamStore, channels: usize, q_levels: usize) -> Result<Self> {
        Ok(Self {
            conv1: Conv2d::new(&store.pp("conv1"), channels, channels, 3, 1)?,
            adapt1: Adaption::new(&store.pp("adapt1"), channels, q_levels)?,
            conv2: Conv2d::new(&store.pp("conv2"), channels, channels, 3, 1)?,
            adapt2: Adaption::new(&store.pp("adapt2"), channels, q_levels)?,
        })
    }

    pub fn forward(&self, x: &Tensor, q: usize) -> Result<Tensor> {
        let h = self.adapt1.forward(&self.conv1.forward(x)?, q)?;
        let h = leaky_relu(&h, SLOPE)?;
        let h = self.adapt2.forward(&self.conv2.forward(&h)?, q)?;
        Ok((x + h)?)
    }
}

fn check_input(x: &Tensor, channels: usize, multiple: usize, what: &str) -> Result<()> {
    let (_, c, h, w) = x.dims4()?;
    if c != channels || h % multiple != 0 || w % multiple != 0 || h == 0 || w == 0 {
        return Err(Error::Dimension(format!(
            "{what} expects {channels} channels and sides divisible by {multiple}, got {c}x{h}x{w}"
        )));
    }
    Ok(())
}

/// Analysis transform: four stride-2 stages of conv, ResBlock and GDN.
#[derive(Debug, Clone)]
pub struct AnalysisTransform {
    stages: Vec<(Conv2d, ResBlock, Gdn)>,
}

impl AnalysisTransform {
    pub fn new(store: &ParamStore, n: usize, q_levels: usize) -> Result<Self> {
        let stages = (0..4)
            .map(|i| {
                let s = store.pp(format!("{i}"));
                let cin = if i == 0 { 3 } else { n };
                Ok((
                    Conv2d::new(&s.pp("down"), cin, n, 3, 2)?,
                    ResBlock::new(&s.pp("res"), n, q_levels)?,
                    Gdn::new(&s.pp("gdn"), n, false)?,
                ))
            })
            .collect::<Result<_>>()?;
        Ok(Self { stages })
    }

    pub fn forward(&self, x: &Tensor, q: usize) -> Result<Tensor> {
        check_input(x, 3, 16, "analysis transform")?;
        let mut h = x.clone();
        for (conv, res, gdn) in &self.stages {
            h = gdn.forward(&res.forward(&conv.forward(&h)?, q)?)?;
        }
        Ok(h)
    }

    pub fn gdns(&self) -> impl Iterator<Item = &Gdn> {
        self.stages.iter().map(|s| &s.2)
    }
}

/// Synthesis transform: four stages of IGDN, ResBlock and a conv to four
/// times the output channels followed by a 2x pixel shuffle.
#[derive(Debug, Clone)]
pub struct SynthesisTransform {
    stages: Vec<(Gdn, ResBlock, Conv2d)>,
    n: usize,
}

impl SynthesisTransform {
    pub fn new(store: &ParamStore, n: usize, q_levels: usize) -> Result<Self> {
        let stages = (0..4)
            .map(|i| {
                let s = store.pp(format!("{i}"));
                let cout = if i == 3 { 3 } else { n };
                Ok((
                    Gdn::new(&s.pp("igdn"), n, true)?,
                    ResBlock::new(&s.pp("res"), n, q_levels)?,
                    Conv2d::new(&s.pp("up"), n, 4 * cout, 3, 1)?,
                ))
            })
            .collect::<Result<_>>()?;
        Ok(Self { stages, n })
    }

    /// Reconstruction clamped to `[0, 1]`.
    pub fn forward(&self, y: &Tensor, q: usize) -> Result<Tensor> {
        check_input(y, self.n, 1, "synthesis transform")?;
        let mut h = y.clone();
        for (igdn, res, conv) in &self.stages {
            h = pixel_shuffle2(&conv.forward(&res.forward(&igdn.forward(&h)?, q)?)?)?;
        }
        crate::nn::clamp_unit(&h)
    }

    pub fn gdns(&self) -> impl Iterator<Item = &Gdn> {
        self.stages.iter().map(|s| &s.0)
    }
}

/// Hyper analysis: `|y|` through two stride-2 conv stages with adaption.
#[derive(Debug, Clone)]
pub struct HyperAnalysis {
    conv1: Conv2d,
    adapt1: Adaption,
    conv2: Conv2d,
    adapt2: Adaption,
    n: usize,
}

impl HyperAnalysis {
    pub fn new(store: &ParamStore, n: usize, q_levels: usize) -> Result<Self> {
        Ok(Self {
            conv1: Conv2d::new(&store.pp("conv1"), n, n, 3, 2)?,
            adapt1: Adaption::new(&store.pp("adapt1"), n, q_levels)?,
            conv2: Conv2d::new(&store.pp("conv2"), n, n, 3, 2)?,
            adapt2: Adaption::new(&store.pp("adapt2"), n, q_levels)?,
            n,
        })
    }

    pub fn forward(&self, y: &Tensor, q: usize) -> Result<Tensor> {
        check_input(y, self.n, 4, "hyper analysis")?;
        let h = self.adapt1.forward(&self.conv1.forward(&y.abs()?)?, q)?;
        let h = leaky_relu(&h, SLOPE)?;
        self.adapt2.forward(&self.conv2.forward(&h)?, q)
    }
}

/// Hyper synthesis: two pixel-shuffle stages back to the latent grid, then
/// `scale_bound + softplus(.)` so every scale respects the floor.
#[derive(Debug, Clone)]
pub struct HyperSynthesis {
    up1: Conv2d,
    adapt1: Adaption,
    up2: Conv2d,
    adapt2: Adaption,
    out: Conv2d,
    n: usize,
    scale_bound: f64,
}

impl HyperSynthesis {
    pub fn new(store: &ParamStore, n: usize, q_levels: usize, scale_bound: f64) -> Result<Self> {
        Ok(Self {
            up1: Conv2d::new(&store.pp("up1"), n, 4 * n, 3, 1)?,
            adapt1: Adaption::new(&store.pp("adapt1"), n, q_levels)?,
            up2: Conv2d::new(&store.pp("up2"), n, 4 * n, 3, 1)?,
            adapt2: Adaption::new(&store.pp("adapt2"), n, q_levels)?,
            out: Conv2d::new(&store.pp("out"), n, n, 3, 1)?,
            n,
            scale_bound,
        })
    }

    pub fn forward(&self, z: &Tensor, q: usize) -> Result<Tensor> {
        check_input(z, self.n, 1, "hyper synthesis")?;
        let h = self.adapt1.forward(&pixel_shuffle2(&self.up1.forward(z)?)?, q)?;
        let h = leaky_relu(&h, SLOPE)?;
        let h = self.adapt2.forward(&pixel_shuffle2(&self.up2.forward(&h)?)?, q)?;
        let h = leaky_relu(&h, SLOPE)?;
        Ok((softplus(&self.out.forward(&h)?)? + self.scale_bound)?)
    }
}
