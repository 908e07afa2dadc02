//! Inter-instance collaborative learning over the RoI features of one image.
//!
//! The pipeline has four stages:
//!
//! 1. [`roi_to_tokens`]: each `C×H×W` RoI feature goes through a 1×1
//!    convolution down to `C0` channels, adaptive max pooling to `h×w`, and a
//!    row-major flatten into one token of length `d_model = C0·h·w`.
//! 2. [`transformer_encoder`]: post-norm encoder layers with multi-head
//!    self-attention over the `M` instance tokens. There is no positional
//!    encoding, so the encoder is equivariant to instance permutations.
//! 3. [`tokens_to_roi`]: each token is reshaped to `C0×h×w`, bilinearly
//!    upsampled to `H×W` and lifted back to `C` channels by a 1×1 convolution.
//! 4. [`global_context_gcg`] and [`fuse_features`]: a per-level 1×1 convolution
//!    plus global average pooling, summed over pyramid levels, gives one
//!    context vector. The original features, the recovered features and the
//!    broadcast context vector are then summed elementwise.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::tensor::{
    adaptive_max_pool, bilinear_upsample, conv2d, dims3, dims4, layer_norm, linear, matmul, softmax, transpose,
    Conv2d, Tensor, LAYER_NORM_EPS,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default, deny_unknown_fields)]
pub struct InterClConfig {
    pub channels: usize,
    pub reduced_channels: usize,
    pub roi_height: usize,
    pub roi_width: usize,
    pub pooled_height: usize,
    pub pooled_width: usize,
    pub encoder_layers: usize,
    pub heads: usize,
    /// Hidden width of the feed-forward block; `None` means `4·d_model`.
    pub ffn_hidden: Option<usize>,
    /// Input channel count of each pyramid level fed to the global context.
    pub pyramid_channels: Vec<usize>,
}

impl Default for InterClConfig {
    fn default() -> Self {
        Self {
            channels: 256,
            reduced_channels: 32,
            roi_height: 14,
            roi_width: 14,
            pooled_height: 3,
            pooled_width: 3,
            encoder_layers: 3,
            heads: 4,
            ffn_hidden: None,
            pyramid_channels: vec![256; 4],
        }
    }
}

impl InterClConfig {
    pub fn d_model(&self) -> usize {
        self.reduced_channels * self.pooled_height * self.pooled_width
    }

    pub fn ffn_hidden(&self) -> usize {
        self.ffn_hidden.unwrap_or(4 * self.d_model())
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("channels", self.channels),
            ("reducedChannels", self.reduced_channels),
            ("roiHeight", self.roi_height),
            ("roiWidth", self.roi_width),
            ("pooledHeight", self.pooled_height),
            ("pooledWidth", self.pooled_width),
            ("heads", self.heads),
            ("ffnHidden", self.ffn_hidden()),
        ];
        for (name, value) in positive {
            if value == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be positive")));
            }
        }
        if self.pooled_height > self.roi_height || self.pooled_width > self.roi_width {
            return Err(Error::InvalidConfig("pooled size exceeds RoI size".into()));
        }
        if !self.d_model().is_multiple_of(self.heads) {
            return Err(Error::InvalidConfig(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model(),
                self.heads
            )));
        }
        if self.pyramid_channels.is_empty() || self.pyramid_channels.contains(&0) {
            return Err(Error::InvalidConfig("pyramid needs at least one level with positive channels".into()));
        }
        Ok(())
    }
}

/// `M` instance tokens of width `d_model`, stored as an `[M, d_model]` tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence(Tensor);

impl TokenSequence {
    pub fn new(tokens: Tensor) -> Result<Self> {
        tokens.expect_rank("token sequence", 2)?;
        Ok(Self(tokens))
    }

    pub fn len(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dim(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }
}

/// Weights of one post-norm encoder layer. Linear weights are `[d_in, d_out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayer {
    pub query: (Tensor, Tensor),
    pub key: (Tensor, Tensor),
    pub value: (Tensor, Tensor),
    pub output: (Tensor, Tensor),
    pub norm1: (Tensor, Tensor),
    pub ffn_in: (Tensor, Tensor),
    pub ffn_out: (Tensor, Tensor),
    pub norm2: (Tensor, Tensor),
}

impl EncoderLayer {
    fn build(d: usize, hidden: usize, mut init: impl FnMut(&[usize], usize) -> Result<Tensor>) -> Result<Self> {
        let mut dense = |d_in: usize, d_out: usize| -> Result<(Tensor, Tensor)> {
            Ok((init(&[d_in, d_out], d_in)?, init(&[d_out], d_in)?))
        };
        let query = dense(d, d)?;
        let key = dense(d, d)?;
        let value = dense(d, d)?;
        let output = dense(d, d)?;
        let ffn_in = dense(d, hidden)?;
        let ffn_out = dense(hidden, d)?;
        let norm = || -> Result<(Tensor, Tensor)> { Ok((Tensor::full(&[d], 1.0)?, Tensor::zeros(&[d])?)) };
        Ok(Self {
            query,
            key,
            value,
            output,
            norm1: norm()?,
            ffn_in,
            ffn_out,
            norm2: norm()?,
        })
    }

    /// All projections and FFN weights zero; layer norms neutral.
    pub fn zeros(d: usize, hidden: usize) -> Result<Self> {
        Self::build(d, hidden, |shape, _| Tensor::zeros(shape))
    }

    pub fn random<R: Rng + ?Sized>(d: usize, hidden: usize, rng: &mut R) -> Result<Self> {
        Self::build(d, hidden, |shape, fan_in| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            Tensor::from_fn(shape, |_| rng.gen_range(-bound..bound))
        })
    }

    fn named(&self) -> [(&'static str, &(Tensor, Tensor)); 8] {
        [
            ("query", &self.query),
            ("key", &self.key),
            ("value", &self.value),
            ("output", &self.output),
            ("norm1", &self.norm1),
            ("ffnIn", &self.ffn_in),
            ("ffnOut", &self.ffn_out),
            ("norm2", &self.norm2),
        ]
    }

    fn named_mut(&mut self) -> [(&'static str, &mut (Tensor, Tensor)); 8] {
        [
            ("query", &mut self.query),
            ("key", &mut self.key),
            ("value", &mut self.value),
            ("output", &mut self.output),
            ("norm1", &mut self.norm1),
            ("ffnIn", &mut self.ffn_in),
            ("ffnOut", &mut self.ffn_out),
            ("norm2", &mut self.norm2),
        ]
    }

    pub fn param_count(&self) -> usize {
        self.named().iter().map(|(_, (w, b))| w.len() + b.len()).sum()
    }

    /// Runs the layer, returning the new tokens and the `[heads, M, M]` attention weights.
    pub fn forward(&self, x: &Tensor, heads: usize) -> Result<(Tensor, Tensor)> {
        let (m, d) = (x.shape()[0], x.shape()[1]);
        let head_dim = d / heads;
        let q = linear(x, &self.query.0, &self.query.1)?;
        let k = linear(x, &self.key.0, &self.key.1)?;
        let v = linear(x, &self.value.0, &self.value.1)?;
        let scale = 1.0 / (head_dim as f64).sqrt();

        let mut concat = vec![0.0; m * d];
        let mut weights = Vec::with_capacity(heads * m * m);
        for h in 0..heads {
            let cols = h * head_dim..(h + 1) * head_dim;
            let qh = slice_columns(&q, cols.clone())?;
            let kh = slice_columns(&k, cols.clone())?;
            let vh = slice_columns(&v, cols.clone())?;
            let scores = matmul(&qh, &transpose(&kh)?)?.scale(scale);
            let attn = softmax(&scores)?;
            let mixed = matmul(&attn, &vh)?;
            for i in 0..m {
                concat[i * d + cols.start..i * d + cols.end]
                    .copy_from_slice(&mixed.data()[i * head_dim..(i + 1) * head_dim]);
            }
            weights.extend_from_slice(attn.data());
        }
        let attended = linear(&Tensor::new(vec![m, d], concat)?, &self.output.0, &self.output.1)?;
        let x1 = layer_norm(&x.add(&attended)?, &self.norm1.0, &self.norm1.1, LAYER_NORM_EPS)?;
        let hidden = linear(&x1, &self.ffn_in.0, &self.ffn_in.1)?.relu();
        let ffn = linear(&hidden, &self.ffn_out.0, &self.ffn_out.1)?;
        let x2 = layer_norm(&x1.add(&ffn)?, &self.norm2.0, &self.norm2.1, LAYER_NORM_EPS)?;
        Ok((x2, Tensor::new(vec![heads, m, m], weights)?))
    }
}

fn slice_columns(x: &Tensor, cols: std::ops::Range<usize>) -> Result<Tensor> {
    let (m, d) = (x.shape()[0], x.shape()[1]);
    let width = cols.len();
    let mut data = Vec::with_capacity(m * width);
    for row in 0..m {
        data.extend_from_slice(&x.data()[row * d + cols.start..row * d + cols.end]);
    }
    Tensor::new(vec![m, width], data)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransformerEncoder {
    pub layers: Vec<EncoderLayer>,
    pub heads: usize,
}

impl TransformerEncoder {
    pub fn param_count(&self) -> usize {
        self.layers.iter().map(EncoderLayer::param_count).sum()
    }

    /// Encodes the tokens and also returns each layer's `[heads, M, M]` attention weights.
    pub fn forward_traced(&self, q: &TokenSequence) -> Result<(TokenSequence, Vec<Tensor>)> {
        let mut x = q.tensor().clone();
        let mut trace = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let d = layer.query.0.shape()[0];
            if x.shape()[1] != d {
                return Err(Error::ShapeMismatch {
                    op: "transformer encoder",
                    dim: "token width",
                    expected: d,
                    found: x.shape()[1],
                });
            }
            let (next, attn) = layer.forward(&x, self.heads)?;
            x = next;
            trace.push(attn);
        }
        Ok((TokenSequence(x), trace))
    }
}

/// All learned parameters of the inter-instance module.
#[derive(Debug, Clone, PartialEq)]
pub struct InterCl {
    config: InterClConfig,
    pub reduce: Conv2d,
    pub encoder: TransformerEncoder,
    pub recover: Conv2d,
    /// One 1×1 convolution per pyramid level, each mapping to `channels`.
    pub context: Vec<Conv2d>,
}

impl InterCl {
    pub fn new(
        config: InterClConfig,
        reduce: Conv2d,
        encoder: TransformerEncoder,
        recover: Conv2d,
        context: Vec<Conv2d>,
    ) -> Result<Self> {
        config.validate()?;
        let (c, c0, d, hidden) = (config.channels, config.reduced_channels, config.d_model(), config.ffn_hidden());
        let check_conv = |name: &str, conv: &Conv2d, out: usize, inp: usize| -> Result<()> {
            if conv.out_channels() != out || conv.in_channels() != inp || conv.kernel_size() != (1, 1) {
                return Err(Error::InvalidConfig(format!(
                    "{name} must be a [{out}, {inp}, 1, 1] convolution, got {:?}",
                    conv.weight().shape()
                )));
            }
            Ok(())
        };
        check_conv("reduce", &reduce, c0, c)?;
        check_conv("recover", &recover, c, c0)?;
        if context.len() != config.pyramid_channels.len() {
            return Err(Error::InvalidConfig(format!(
                "expected {} context convolutions, got {}",
                config.pyramid_channels.len(),
                context.len()
            )));
        }
        for (conv, &cl) in context.iter().zip(&config.pyramid_channels) {
            check_conv("context", conv, c, cl)?;
        }
        if encoder.heads != config.heads || encoder.layers.len() != config.encoder_layers {
            return Err(Error::InvalidConfig("encoder depth or heads disagree with config".into()));
        }
        for layer in &encoder.layers {
            let expected = EncoderLayer::zeros(d, hidden)?;
            for ((name, (w, b)), (_, (ew, eb))) in layer.named().iter().zip(expected.named().iter()) {
                if w.shape() != ew.shape() || b.shape() != eb.shape() {
                    return Err(Error::InvalidConfig(format!("encoder {name} has the wrong shape")));
                }
            }
        }
        Ok(Self {
            config,
            reduce,
            encoder,
            recover,
            context,
        })
    }

    pub fn zeros(config: &InterClConfig) -> Result<Self> {
        config.validate()?;
        let (c, c0, d, hidden) = (config.channels, config.reduced_channels, config.d_model(), config.ffn_hidden());
        let layers = (0..config.encoder_layers)
            .map(|_| EncoderLayer::zeros(d, hidden))
            .collect::<Result<_>>()?;
        let context = config
            .pyramid_channels
            .iter()
            .map(|&cl| Conv2d::zeros(c, cl, 1, 1))
            .collect::<Result<_>>()?;
        Self::new(
            config.clone(),
            Conv2d::zeros(c0, c, 1, 1)?,
            TransformerEncoder {
                layers,
                heads: config.heads,
            },
            Conv2d::zeros(c, c0, 1, 1)?,
            context,
        )
    }

    pub fn random<R: Rng + ?Sized>(config: &InterClConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let (c, c0, d, hidden) = (config.channels, config.reduced_channels, config.d_model(), config.ffn_hidden());
        let conv = |out: usize, inp: usize, rng: &mut R| -> Result<Conv2d> {
            let bound = 1.0 / (inp as f64).sqrt();
            Conv2d::new(
                Tensor::from_fn(&[out, inp, 1, 1], |_| rng.gen_range(-bound..bound))?,
                Tensor::from_fn(&[out], |_| rng.gen_range(-bound..bound))?,
            )
        };
        let reduce = conv(c0, c, rng)?;
        let layers = (0..config.encoder_layers)
            .map(|_| EncoderLayer::random(d, hidden, rng))
            .collect::<Result<_>>()?;
        let recover = conv(c, c0, rng)?;
        let context = config
            .pyramid_channels
            .iter()
            .map(|&cl| conv(c, cl, rng))
            .collect::<Result<_>>()?;
        Self::new(
            config.clone(),
            reduce,
            TransformerEncoder {
                layers,
                heads: config.heads,
            },
            recover,
            context,
        )
    }

    pub fn config(&self) -> &InterClConfig {
        &self.config
    }

    pub fn param_count(&self) -> usize {
        self.reduce.param_count()
            + self.encoder.param_count()
            + self.recover.param_count()
            + self.context.iter().map(Conv2d::param_count).sum::<usize>()
    }

    /// Flat `(name, tensor)` listing of every parameter, in a fixed order.
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        let push_conv = |name: String, conv: &Conv2d, out: &mut Vec<(String, Tensor)>| {
            out.push((format!("{name}.weight"), conv.weight().clone()));
            out.push((format!("{name}.bias"), conv.bias().clone()));
        };
        push_conv("reduce".into(), &self.reduce, &mut out);
        for (l, layer) in self.encoder.layers.iter().enumerate() {
            for (name, (w, b)) in layer.named() {
                out.push((format!("encoder.{l}.{name}.weight"), w.clone()));
                out.push((format!("encoder.{l}.{name}.bias"), b.clone()));
            }
        }
        push_conv("recover".into(), &self.recover, &mut out);
        for (l, conv) in self.context.iter().enumerate() {
            push_conv(format!("context.{l}"), conv, &mut out);
        }
        out
    }

    /// Inverse of [`InterCl::named_tensors`]. Every parameter must be present.
    pub fn from_named_tensors(config: &InterClConfig, mut lookup: impl FnMut(&str) -> Option<Tensor>) -> Result<Self> {
        let mut model = Self::zeros(config)?;
        let mut take = |name: String| -> Result<Tensor> {
            lookup(&name).ok_or_else(|| Error::InvalidConfig(format!("missing tensor {name:?}")))
        };
        let conv = |name: &str, take: &mut dyn FnMut(String) -> Result<Tensor>| -> Result<Conv2d> {
            Conv2d::new(take(format!("{name}.weight"))?, take(format!("{name}.bias"))?)
        };
        model.reduce = conv("reduce", &mut take)?;
        for (l, layer) in model.encoder.layers.iter_mut().enumerate() {
            for (name, slot) in layer.named_mut() {
                *slot = (
                    take(format!("encoder.{l}.{name}.weight"))?,
                    take(format!("encoder.{l}.{name}.bias"))?,
                );
            }
        }
        model.recover = conv("recover", &mut take)?;
        for l in 0..model.context.len() {
            model.context[l] = conv(&format!("context.{l}"), &mut take)?;
        }
        let InterCl {
            config,
            reduce,
            encoder,
            recover,
            context,
        } = model;
        Self::new(config, reduce, encoder, recover, context)
    }
}

/// Learned scalars of a configuration, computed from its dimensions alone.
pub fn inter_param_count(cfg: &InterClConfig) -> Result<usize> {
    cfg.validate()?;
    let (c, c0, d, hidden) = (cfg.channels, cfg.reduced_channels, cfg.d_model(), cfg.ffn_hidden());
    let layer = 4 * (d * d + d) + 2 * (2 * d) + (d * hidden + hidden) + (hidden * d + d);
    let context: usize = cfg.pyramid_channels.iter().map(|&cl| c * cl + c).sum();
    Ok((c0 * c + c0) + cfg.encoder_layers * layer + (c * c0 + c) + context)
}

fn check_rois(f: &Tensor, cfg: &InterClConfig) -> Result<usize> {
    f.expect_rank("inter rois", 4)?;
    let [m, c, h, w] = dims4(f);
    if m == 0 {
        return Err(Error::EmptyProposalSet);
    }
    for (dim, expected, found) in [
        ("channels", cfg.channels, c),
        ("roi height", cfg.roi_height, h),
        ("roi width", cfg.roi_width, w),
    ] {
        if expected != found {
            return Err(Error::ShapeMismatch {
                op: "inter rois",
                dim,
                expected,
                found,
            });
        }
    }
    Ok(m)
}

/// 1×1 reduction, adaptive max pooling and row-major flattening, per instance.
pub fn roi_to_tokens(f: &Tensor, model: &InterCl) -> Result<TokenSequence> {
    let cfg = &model.config;
    let m = check_rois(f, cfg)?;
    let mut tokens = Vec::with_capacity(m * cfg.d_model());
    for i in 0..m {
        let reduced = conv2d(&f.index_axis0(i)?, &model.reduce)?;
        let pooled = adaptive_max_pool(&reduced, cfg.pooled_height, cfg.pooled_width)?;
        tokens.extend(pooled.into_data());
    }
    TokenSequence::new(Tensor::new(vec![m, cfg.d_model()], tokens)?)
}

pub fn transformer_encoder(q: &TokenSequence, model: &InterCl) -> Result<TokenSequence> {
    check_tokens(q, &model.config)?;
    Ok(model.encoder.forward_traced(q)?.0)
}

fn check_tokens(q: &TokenSequence, cfg: &InterClConfig) -> Result<()> {
    if q.dim() != cfg.d_model() {
        return Err(Error::ShapeMismatch {
            op: "tokens",
            dim: "token width",
            expected: cfg.d_model(),
            found: q.dim(),
        });
    }
    Ok(())
}

/// Reshape each token to `C0×h×w`, upsample to `H×W`, then 1×1 convolve up to `C`.
pub fn tokens_to_roi(qte: &TokenSequence, model: &InterCl) -> Result<Tensor> {
    let cfg = &model.config;
    check_tokens(qte, cfg)?;
    let parts = (0..qte.len())
        .map(|i| {
            let grid = qte
                .tensor()
                .index_axis0(i)?
                .reshape(&[cfg.reduced_channels, cfg.pooled_height, cfg.pooled_width])?;
            let up = bilinear_upsample(&grid, cfg.roi_height, cfg.roi_width)?;
            conv2d(&up, &model.recover)
        })
        .collect::<Result<Vec<_>>>()?;
    Tensor::stack(&parts)
}

/// `Σ_l GAP(conv1×1_l(P_l))`: one global context vector of length `C`.
pub fn global_context_gcg(pyramid: &[Tensor], convs: &[Conv2d]) -> Result<Tensor> {
    if pyramid.is_empty() {
        return Err(invalid("global context", "empty pyramid"));
    }
    if pyramid.len() != convs.len() {
        return Err(Error::ShapeMismatch {
            op: "global context",
            dim: "levels",
            expected: convs.len(),
            found: pyramid.len(),
        });
    }
    let channels = convs[0].out_channels();
    let mut g = vec![0.0; channels];
    for (level, conv) in pyramid.iter().zip(convs) {
        if conv.out_channels() != channels {
            return Err(Error::ShapeMismatch {
                op: "global context",
                dim: "output channels",
                expected: channels,
                found: conv.out_channels(),
            });
        }
        let mapped = conv2d(level, conv)?;
        let [_, h, w] = dims3(&mapped);
        for (c, plane) in mapped.data().chunks_exact(h * w).enumerate() {
            g[c] += plane.iter().sum::<f64>() / (h * w) as f64;
        }
    }
    Tensor::new(vec![channels], g)
}

/// `out[m,c,y,x] = f[m,c,y,x] + qstar[m,c,y,x] + g[c]`.
pub fn fuse_features(f: &Tensor, qstar: &Tensor, g: &Tensor) -> Result<Tensor> {
    f.expect_rank("fuse", 4)?;
    let mut out = f.add(qstar)?;
    let [_, c, h, w] = dims4(f);
    if g.len() != c {
        return Err(Error::ShapeMismatch {
            op: "fuse",
            dim: "context length",
            expected: c,
            found: g.len(),
        });
    }
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        *v += g.data()[(i / (h * w)) % c];
    }
    Ok(out)
}

/// Full forward pass: tokens, encoder, recovery, global context and fusion.
pub fn inter_cl_forward(f: &Tensor, pyramid: &[Tensor], model: &InterCl) -> Result<Tensor> {
    let q = roi_to_tokens(f, model)?;
    let qte = transformer_encoder(&q, model)?;
    let qstar = tokens_to_roi(&qte, model)?;
    let g = global_context_gcg(pyramid, &model.context)?;
    fuse_features(f, &qstar, &g)
}
