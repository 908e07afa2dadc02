//! Intra-instance collaborative learning: a cascade of three multi-receptive-field
//! convolution blocks with a residual connection.
//!
//! Each block runs a vertical `k×1`, a horizontal `1×k` and a square `k×k`
//! convolution in parallel on the same input and sums them. Blocks are chained,
//! and the module input is added back onto the fused output of the last block.
//! With activations disabled the module is linear, and expanding the cascade of
//! sums gives one term per choice of branch in each block: 3·3·3 = 27 paths.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{conv2d, Conv2d, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    None,
    Relu,
}

impl Activation {
    pub fn apply(self, x: Tensor) -> Tensor {
        match self {
            Activation::None => x,
            Activation::Relu => x.relu(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntraBlockConfig {
    pub kernel: usize,
    pub channels: usize,
    #[serde(default)]
    pub activation: Activation,
}

impl IntraBlockConfig {
    fn validate(&self) -> Result<()> {
        if self.channels == 0 {
            return Err(Error::InvalidConfig("intra block needs at least one channel".into()));
        }
        if self.kernel == 0 || self.kernel.is_multiple_of(2) {
            return Err(Error::InvalidConfig(format!(
                "intra block kernel must be odd and positive, got {}",
                self.kernel
            )));
        }
        Ok(())
    }

    /// Scalar weights plus biases of the three parallel convolutions.
    pub fn param_count(&self) -> usize {
        let k = self.kernel;
        (k + k + k * k) * self.channels * self.channels + 3 * self.channels
    }
}

/// Shape of an [`IntraCl`] module, without its weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntraClConfig {
    pub blocks: Vec<IntraBlockConfig>,
    #[serde(default = "default_true")]
    pub residual: bool,
}

fn default_true() -> bool {
    true
}

impl IntraClConfig {
    pub const DEFAULT_KERNELS: [usize; 3] = [7, 5, 3];

    /// Three blocks with the given kernels, one shared width and activation.
    pub fn with_kernels(channels: usize, kernels: [usize; 3], activation: Activation) -> Self {
        Self {
            blocks: kernels
                .iter()
                .map(|&kernel| IntraBlockConfig {
                    kernel,
                    channels,
                    activation,
                })
                .collect(),
            residual: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks.len() != 3 {
            return Err(Error::InvalidConfig(format!(
                "intra module has exactly 3 blocks, got {}",
                self.blocks.len()
            )));
        }
        for block in &self.blocks {
            block.validate()?;
        }
        let width = self.blocks[0].channels;
        if self.blocks.iter().any(|b| b.channels != width) {
            return Err(Error::InvalidConfig("all intra blocks must share one channel width".into()));
        }
        Ok(())
    }

    pub fn channels(&self) -> usize {
        self.blocks[0].channels
    }
}

impl Default for IntraClConfig {
    fn default() -> Self {
        Self::with_kernels(256, Self::DEFAULT_KERNELS, Activation::None)
    }
}

/// Exact number of learned scalars (weights and biases) for a configuration.
pub fn intra_param_count(cfg: &IntraClConfig) -> Result<usize> {
    cfg.validate()?;
    Ok(cfg.blocks.iter().map(IntraBlockConfig::param_count).sum())
}

/// One block: three parallel convolutions with `k×1`, `1×k` and `k×k` kernels.
#[derive(Debug, Clone, PartialEq)]
pub struct IntraBlock {
    config: IntraBlockConfig,
    vertical: Conv2d,
    horizontal: Conv2d,
    square: Conv2d,
}

impl IntraBlock {
    pub fn new(vertical: Conv2d, horizontal: Conv2d, square: Conv2d, activation: Activation) -> Result<Self> {
        let channels = square.in_channels();
        let (k, _) = square.kernel_size();
        let config = IntraBlockConfig {
            kernel: k,
            channels,
            activation,
        };
        config.validate()?;
        let expect = |conv: &Conv2d, name: &str, kh: usize, kw: usize| -> Result<()> {
            if conv.in_channels() != channels || conv.out_channels() != channels || conv.kernel_size() != (kh, kw) {
                return Err(Error::InvalidConfig(format!(
                    "{name} kernel must be [{channels}, {channels}, {kh}, {kw}], got {:?}",
                    conv.weight().shape()
                )));
            }
            Ok(())
        };
        expect(&vertical, "vertical", k, 1)?;
        expect(&horizontal, "horizontal", 1, k)?;
        expect(&square, "square", k, k)?;
        Ok(Self {
            config,
            vertical,
            horizontal,
            square,
        })
    }

    pub fn zeros(config: IntraBlockConfig) -> Result<Self> {
        config.validate()?;
        let (c, k) = (config.channels, config.kernel);
        Self::new(
            Conv2d::zeros(c, c, k, 1)?,
            Conv2d::zeros(c, c, 1, k)?,
            Conv2d::zeros(c, c, k, k)?,
            config.activation,
        )
    }

    /// Uniform initialisation in `±1/sqrt(fan_in)` for weights and biases.
    pub fn random<R: Rng + ?Sized>(config: IntraBlockConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let (c, k) = (config.channels, config.kernel);
        let mut make = |kh: usize, kw: usize| -> Result<Conv2d> {
            let bound = 1.0 / ((c * kh * kw) as f64).sqrt();
            let weight = Tensor::from_fn(&[c, c, kh, kw], |_| rng.gen_range(-bound..bound))?;
            let bias = Tensor::from_fn(&[c], |_| rng.gen_range(-bound..bound))?;
            Conv2d::new(weight, bias)
        };
        let vertical = make(k, 1)?;
        let horizontal = make(1, k)?;
        let square = make(k, k)?;
        Self::new(vertical, horizontal, square, config.activation)
    }

    pub fn config(&self) -> IntraBlockConfig {
        self.config
    }

    /// The three parallel branches in order `k×1`, `1×k`, `k×k`.
    pub fn branches(&self) -> [&Conv2d; 3] {
        [&self.vertical, &self.horizontal, &self.square]
    }

    /// Sum of the three branch outputs, before activation.
    pub fn fused(&self, x: &Tensor) -> Result<Tensor> {
        x.expect_rank("intra block", 3)?;
        if x.shape()[0] != self.config.channels {
            return Err(Error::ShapeMismatch {
                op: "intra block",
                dim: "channels",
                expected: self.config.channels,
                found: x.shape()[0],
            });
        }
        let mut sum = conv2d(x, &self.vertical)?;
        sum = sum.add(&conv2d(x, &self.horizontal)?)?;
        sum.add(&conv2d(x, &self.square)?)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.config.activation.apply(self.fused(x)?))
    }

    pub fn param_count(&self) -> usize {
        self.branches().iter().map(|c| c.param_count()).sum()
    }
}

/// The full three-block module.
#[derive(Debug, Clone, PartialEq)]
pub struct IntraCl {
    blocks: Vec<IntraBlock>,
    residual: bool,
}

impl IntraCl {
    pub fn new(blocks: Vec<IntraBlock>, residual: bool) -> Result<Self> {
        let config = IntraClConfig {
            blocks: blocks.iter().map(IntraBlock::config).collect(),
            residual,
        };
        config.validate()?;
        Ok(Self { blocks, residual })
    }

    pub fn zeros(config: &IntraClConfig) -> Result<Self> {
        config.validate()?;
        let blocks = config.blocks.iter().map(|&b| IntraBlock::zeros(b)).collect::<Result<_>>()?;
        Self::new(blocks, config.residual)
    }

    pub fn random<R: Rng + ?Sized>(config: &IntraClConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let blocks = config
            .blocks
            .iter()
            .map(|&b| IntraBlock::random(b, rng))
            .collect::<Result<_>>()?;
        Self::new(blocks, config.residual)
    }

    pub fn config(&self) -> IntraClConfig {
        IntraClConfig {
            blocks: self.blocks.iter().map(IntraBlock::config).collect(),
            residual: self.residual,
        }
    }

    pub fn blocks(&self) -> &[IntraBlock] {
        &self.blocks
    }

    pub fn residual(&self) -> bool {
        self.residual
    }

    /// `act_3(x + fused_3(act_2(fused_2(act_1(fused_1(x))))))`, dropping the
    /// `x` term when the residual connection is disabled.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (last, leading) = self.blocks.split_last().expect("three blocks");
        let mut h = x.clone();
        for block in leading {
            h = block.forward(&h)?;
        }
        let mut out = last.fused(&h)?;
        if self.residual {
            out = out.add(x)?;
        }
        Ok(last.config.activation.apply(out))
    }

    pub fn param_count(&self) -> usize {
        self.blocks.iter().map(IntraBlock::param_count).sum()
    }

    /// `blocks.{b}.{vertical|horizontal|square}.{weight|bias}` in block order.
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (b, block) in self.blocks.iter().enumerate() {
            for (name, conv) in BRANCH_NAMES.iter().zip(block.branches()) {
                out.push((format!("blocks.{b}.{name}.weight"), conv.weight().clone()));
                out.push((format!("blocks.{b}.{name}.bias"), conv.bias().clone()));
            }
        }
        out
    }

    /// Inverse of [`IntraCl::named_tensors`]. Every parameter must be present.
    pub fn from_named_tensors(config: &IntraClConfig, mut lookup: impl FnMut(&str) -> Option<Tensor>) -> Result<Self> {
        config.validate()?;
        let mut take = |name: String| -> Result<Tensor> {
            lookup(&name).ok_or_else(|| Error::InvalidConfig(format!("missing tensor {name:?}")))
        };
        let mut blocks = Vec::with_capacity(config.blocks.len());
        for (b, cfg) in config.blocks.iter().enumerate() {
            let mut convs = Vec::with_capacity(3);
            for name in BRANCH_NAMES {
                convs.push(Conv2d::new(
                    take(format!("blocks.{b}.{name}.weight"))?,
                    take(format!("blocks.{b}.{name}.bias"))?,
                )?);
            }
            let [vertical, horizontal, square]: [Conv2d; 3] = convs.try_into().expect("three branches");
            let block = IntraBlock::new(vertical, horizontal, square, cfg.activation)?;
            if block.config() != *cfg {
                return Err(Error::InvalidConfig(format!(
                    "block {b} weights describe {:?}, config expects {:?}",
                    block.config(),
                    cfg
                )));
            }
            blocks.push(block);
        }
        Self::new(blocks, config.residual)
    }
}

const BRANCH_NAMES: [&str; 3] = ["vertical", "horizontal", "square"];

/// Intra module deployment over the levels of a feature pyramid.
#[derive(Debug, Clone, PartialEq)]
pub enum IntraPyramid {
    /// One set of weights reused for every level.
    Shared(IntraCl),
    /// A separate module per level, in pyramid order.
    PerLevel(Vec<IntraCl>),
}

impl IntraPyramid {
    pub fn forward(&self, levels: &[Tensor]) -> Result<Vec<Tensor>> {
        match self {
            IntraPyramid::Shared(module) => levels.iter().map(|l| module.forward(l)).collect(),
            IntraPyramid::PerLevel(modules) => {
                if modules.len() != levels.len() {
                    return Err(Error::ShapeMismatch {
                        op: "intra pyramid",
                        dim: "levels",
                        expected: modules.len(),
                        found: levels.len(),
                    });
                }
                modules.iter().zip(levels).map(|(m, l)| m.forward(l)).collect()
            }
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            IntraPyramid::Shared(module) => module.param_count(),
            IntraPyramid::PerLevel(modules) => modules.iter().map(IntraCl::param_count).sum(),
        }
    }
}
