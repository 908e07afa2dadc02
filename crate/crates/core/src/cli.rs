//! Command-line surface. Each subcommand is a plain function over parsed
//! arguments so it can be driven from tests as well as from `main`.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Error;
use crate::eval::{evaluate, EvalReport};
use crate::inter::{inter_cl_forward, InterCl};
use crate::intra::IntraCl;
use crate::io::{
    attach_weights_to_training, read_detection_set, read_json, to_json_pretty, write_text, DetectionFile,
    GroundTruthFile, Model, ModuleConfig, ModuleKind, tensor_checksum, TensorFile, WeightedLabelFile,
};
use crate::pseudo::{generate_pseudo_labels, rotate_roles, FusionConfig, FusionSummary, IouMode};
use crate::suppress::{multi_scale_aggregate, DetectionSet, SuppressConfig, SuppressMode};
use crate::tensor::Tensor;

pub const EXIT_OK: i32 = 0;
pub const EXIT_PARSE: i32 = 2;
pub const EXIT_ID_MISMATCH: i32 = 3;
pub const EXIT_PARAMS: i32 = 4;
pub const EXIT_SHAPES: i32 = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

/// Exit code for a library error.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Parse(_) | Error::Io(_) | Error::Degenerate(_) => EXIT_PARSE,
        Error::ImageIdMismatch { .. } => EXIT_ID_MISMATCH,
        Error::InvalidArgument { .. } | Error::InvalidConfig(_) => EXIT_PARAMS,
        Error::ShapeMismatch { .. }
        | Error::RankMismatch { .. }
        | Error::InvalidShape { .. }
        | Error::NonFinite { .. }
        | Error::EmptyProposalSet => EXIT_SHAPES,
    }
}

impl From<Error> for CliError {
    fn from(err: Error) -> Self {
        Self {
            code: exit_code(&err),
            message: err.to_string(),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(err: std::io::Error) -> Self {
        Error::from(err).into()
    }
}

pub type CliResult = Result<(), CliError>;

#[derive(Debug, Parser)]
#[command(name = "textcl", version, about = "Text detection reference pipeline: fusion, suppression, evaluation and module forwards")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fuse three teachers' detections into weighted pseudo labels.
    Fuse(FuseArgs),
    /// Aggregate detection files and suppress duplicates.
    Nms(NmsArgs),
    /// Score detections against ground truth.
    Eval(EvalArgs),
    /// Run the intra or inter module on a tensor file.
    Forward(ForwardArgs),
    /// Print the parameter count of a module configuration.
    Params(ParamsArgs),
    /// Write a weights file for a module configuration.
    InitWeights(InitWeightsArgs),
}

#[derive(Debug, Clone, Args)]
pub struct FuseArgs {
    #[arg(long)]
    pub det_a: PathBuf,
    #[arg(long)]
    pub det_b: PathBuf,
    #[arg(long)]
    pub det_c: PathBuf,
    #[arg(long, default_value_t = 0.8)]
    pub iou_threshold: f64,
    #[arg(long, default_value_t = 0.5)]
    pub alpha: f64,
    /// `mask` or `box`.
    #[arg(long, default_value = "mask")]
    pub iou_mode: String,
    #[arg(long)]
    pub out: PathBuf,
    /// Also report the outcome with B and C as the anchor.
    #[arg(long)]
    pub rotate_roles: bool,
}

#[derive(Debug, Clone, Args)]
pub struct NmsArgs {
    #[arg(long = "in", required = true, num_args = 1..)]
    pub inputs: Vec<PathBuf>,
    /// `soft-linear`, `soft-gaussian` or `hard`.
    #[arg(long, default_value = "soft-linear")]
    pub mode: String,
    #[arg(long, default_value_t = 0.5)]
    pub iou_threshold: f64,
    #[arg(long, default_value_t = 0.5)]
    pub sigma: f64,
    #[arg(long, default_value_t = 0.001)]
    pub score_floor: f64,
    #[arg(long, default_value = "mask")]
    pub iou_mode: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long)]
    pub det: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    pub iou: f64,
    #[arg(long)]
    pub report: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct ForwardArgs {
    /// `intra` or `inter`.
    #[arg(long)]
    pub module: String,
    #[arg(long)]
    pub weights: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct ParamsArgs {
    #[arg(long)]
    pub module: String,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct InitWeightsArgs {
    #[arg(long)]
    pub module: String,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Seed for uniform initialisation.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// All-zero weights instead of random ones.
    #[arg(long)]
    pub zero: bool,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run(cli: &Cli, stdout: &mut dyn Write) -> CliResult {
    match &cli.command {
        Command::Fuse(a) => run_fuse(a, stdout),
        Command::Nms(a) => run_nms(a, stdout),
        Command::Eval(a) => run_eval(a, stdout),
        Command::Forward(a) => run_forward(a, stdout),
        Command::Params(a) => run_params(a, stdout),
        Command::InitWeights(a) => run_init_weights(a, stdout),
    }
}

fn read_detection_file(path: &Path) -> Result<DetectionSet, Error> {
    let file: DetectionFile = read_json(path)?;
    file.to_set()
}

fn summary_line(s: &FusionSummary) -> String {
    format!("triples {}  pairs(B) {}  pairs(C) {}  dropped {}", s.triples, s.pairs_b, s.pairs_c, s.dropped)
}

/// In-process equivalent of `fuse`: the label file and the match summary.
pub fn fuse_sets(
    a: &DetectionSet,
    b: &DetectionSet,
    c: &DetectionSet,
    cfg: &FusionConfig,
) -> Result<(WeightedLabelFile, FusionSummary), Error> {
    for other in [b, c] {
        if other.image_id != a.image_id {
            return Err(Error::ImageIdMismatch {
                expected: a.image_id.clone(),
                found: other.image_id.clone(),
            });
        }
    }
    let out = generate_pseudo_labels(&a.detections, &b.detections, &c.detections, cfg)?;
    let file = attach_weights_to_training(&out.labels, &a.image_id, a.image_width, a.image_height, "fused");
    Ok((file, out.summary))
}

pub fn run_fuse(args: &FuseArgs, stdout: &mut dyn Write) -> CliResult {
    let a = read_detection_file(&args.det_a)?;
    let b = read_detection_file(&args.det_b)?;
    let c = read_detection_file(&args.det_c)?;
    let cfg = FusionConfig {
        iou_threshold: args.iou_threshold,
        alpha: args.alpha,
        iou_mode: args.iou_mode.parse::<IouMode>()?,
    };
    cfg.validate()?;
    let (file, summary) = fuse_sets(&a, &b, &c, &cfg)?;
    write_text(&args.out, &to_json_pretty(&file)?)?;
    writeln!(stdout, "labels {}  {}", file.instances.len(), summary_line(&summary))?;
    if args.rotate_roles {
        let outcomes = rotate_roles(&a.detections, &b.detections, &c.detections, &cfg)?;
        for (anchor, outcome) in ["A", "B", "C"].iter().zip(&outcomes) {
            writeln!(stdout, "anchor {anchor}: labels {}  {}", outcome.labels.len(), summary_line(&outcome.summary))?;
        }
    }
    Ok(())
}

/// In-process equivalent of `nms`: maps every set to the original frame,
/// concatenates in argument order and suppresses.
pub fn nms_sets(sets: &[DetectionSet], cfg: &SuppressConfig) -> Result<DetectionFile, Error> {
    cfg.validate()?;
    let rescaled = sets.iter().map(DetectionSet::to_original_frame).collect::<Result<Vec<_>, _>>()?;
    let merged = multi_scale_aggregate(&rescaled, cfg)?;
    Ok(DetectionFile::from_set(&merged))
}

pub fn run_nms(args: &NmsArgs, stdout: &mut dyn Write) -> CliResult {
    let cfg = SuppressConfig {
        mode: args.mode.parse::<SuppressMode>()?,
        iou_threshold: args.iou_threshold,
        sigma: args.sigma,
        score_floor: args.score_floor,
        iou_mode: args.iou_mode.parse::<IouMode>()?,
    };
    cfg.validate()?;
    let sets = args
        .inputs
        .iter()
        .map(|p| read_detection_set(p))
        .collect::<Result<Vec<_>, _>>()?;
    let file = nms_sets(&sets, &cfg)?;
    write_text(&args.out, &to_json_pretty(&file)?)?;
    let total: usize = sets.iter().map(|s| s.detections.len()).sum();
    writeln!(stdout, "kept {} of {} detections", file.instances.len(), total)?;
    Ok(())
}

/// In-process equivalent of `eval`.
pub fn eval_files(gt: &GroundTruthFile, det: &DetectionSet, iou: f64) -> Result<EvalReport, Error> {
    let gt = gt.to_set()?;
    if gt.image_id != det.image_id {
        return Err(Error::ImageIdMismatch {
            expected: gt.image_id,
            found: det.image_id.clone(),
        });
    }
    evaluate(&[gt], std::slice::from_ref(det), iou)
}

pub fn run_eval(args: &EvalArgs, stdout: &mut dyn Write) -> CliResult {
    let gt: GroundTruthFile = read_json(&args.gt)?;
    let det = read_detection_set(&args.det)?.to_original_frame()?;
    let report = eval_files(&gt, &det, args.iou)?;
    write_text(&args.report, &to_json_pretty(&report)?)?;
    write!(stdout, "{}", report.to_table())?;
    Ok(())
}

fn forward_error(err: Error) -> CliError {
    match err {
        Error::InvalidConfig(msg) => CliError {
            code: EXIT_SHAPES,
            message: format!("invalid configuration: {msg}"),
        },
        other => other.into(),
    }
}

/// In-process equivalent of `forward`.
pub fn forward_model(model: &Model, input: &TensorFile) -> Result<Tensor, Error> {
    let empty_rois = input.tensors.iter().any(|t| t.name == "rois" && t.shape.first() == Some(&0));
    if matches!(model, Model::Inter(_)) && empty_rois && input.checksum == tensor_checksum(&input.tensors) {
        return Err(Error::EmptyProposalSet);
    }
    input.verify()?;
    match model {
        Model::Intra(m) => m.forward(&input.get("input")?),
        Model::Inter(m) => {
            let pyramid = (0..m.config().pyramid_channels.len())
                .map(|l| input.get(&format!("pyramid.{l}")))
                .collect::<Result<Vec<_>, _>>()?;
            inter_cl_forward(&input.get("rois")?, &pyramid, m)
        }
    }
}

pub fn run_forward(args: &ForwardArgs, stdout: &mut dyn Write) -> CliResult {
    let kind: ModuleKind = args.module.parse()?;
    let weights: TensorFile = read_json(&args.weights)?;
    let model = weights.to_model().map_err(forward_error)?;
    if model.kind() != kind {
        return Err(CliError {
            code: EXIT_SHAPES,
            message: format!("weights describe the {} module, not {}", model.kind().name(), kind.name()),
        });
    }
    let input: TensorFile = read_json(&args.input)?;
    let output = forward_model(&model, &input).map_err(forward_error)?;
    writeln!(stdout, "output shape {:?}", output.shape())?;
    let file = TensorFile::new(vec![("output".into(), output)])?;
    write_text(&args.out, &file.to_json()?)?;
    Ok(())
}

/// `(component, count)` rows; the last row is the total.
pub fn param_table(config: &ModuleConfig) -> Result<Vec<(String, usize)>, Error> {
    let mut rows = Vec::new();
    match config {
        ModuleConfig::Intra(cfg) => {
            let total = crate::intra::intra_param_count(cfg)?;
            for (b, block) in cfg.blocks.iter().enumerate() {
                let (c, k) = (block.channels, block.kernel);
                rows.push((format!("block {b} vertical {k}x1"), c * c * k + c));
                rows.push((format!("block {b} horizontal 1x{k}"), c * c * k + c));
                rows.push((format!("block {b} square {k}x{k}"), c * c * k * k + c));
            }
            rows.push(("total".into(), total));
        }
        ModuleConfig::Inter(cfg) => {
            let total = crate::inter::inter_param_count(cfg)?;
            let (c, c0, d, hidden) = (cfg.channels, cfg.reduced_channels, cfg.d_model(), cfg.ffn_hidden());
            rows.push(("reduce 1x1".into(), c0 * c + c0));
            for l in 0..cfg.encoder_layers {
                rows.push((format!("encoder {l} attention"), 4 * (d * d + d)));
                rows.push((format!("encoder {l} norms"), 4 * d));
                rows.push((format!("encoder {l} feed-forward"), d * hidden + hidden + hidden * d + d));
            }
            rows.push(("recover 1x1".into(), c * c0 + c));
            for (l, &cl) in cfg.pyramid_channels.iter().enumerate() {
                rows.push((format!("context level {l}"), c * cl + c));
            }
            rows.push(("total".into(), total));
        }
    }
    Ok(rows)
}

fn params_error(err: Error) -> CliError {
    match err {
        Error::Io(_) => err.into(),
        other => CliError {
            code: EXIT_PARAMS,
            message: other.to_string(),
        },
    }
}

pub fn run_params(args: &ParamsArgs, stdout: &mut dyn Write) -> CliResult {
    let kind: ModuleKind = args.module.parse().map_err(params_error)?;
    let config = ModuleConfig::load(kind, args.config.as_deref()).map_err(params_error)?;
    let rows = param_table(&config).map_err(params_error)?;
    for (name, count) in rows {
        writeln!(stdout, "{name:<28} {count:>12}")?;
    }
    Ok(())
}

/// Weights for a configuration: zeros, or uniform in `±1/sqrt(fan_in)` from `seed`.
pub fn init_model(config: &ModuleConfig, seed: u64, zero: bool) -> Result<Model, Error> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(match (config, zero) {
        (ModuleConfig::Intra(cfg), true) => Model::Intra(IntraCl::zeros(cfg)?),
        (ModuleConfig::Intra(cfg), false) => Model::Intra(IntraCl::random(cfg, &mut rng)?),
        (ModuleConfig::Inter(cfg), true) => Model::Inter(InterCl::zeros(cfg)?),
        (ModuleConfig::Inter(cfg), false) => Model::Inter(InterCl::random(cfg, &mut rng)?),
    })
}

pub fn run_init_weights(args: &InitWeightsArgs, stdout: &mut dyn Write) -> CliResult {
    let kind: ModuleKind = args.module.parse().map_err(params_error)?;
    let config = ModuleConfig::load(kind, args.config.as_deref()).map_err(params_error)?;
    let model = init_model(&config, args.seed, args.zero)?;
    let file = TensorFile::from_model(&model)?;
    write_text(&args.out, &file.to_json()?)?;
    writeln!(stdout, "wrote {} tensors, checksum {}", file.tensors.len(), file.checksum)?;
    Ok(())
}
