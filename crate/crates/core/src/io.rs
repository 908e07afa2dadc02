//! JSON file formats: detections, weighted labels, ground truth, tensors and
//! module configurations.
//!
//! Every file carries `"schemaVersion": "1"`. Masks are stored as run-length
//! counts over row-major pixels, starting with a background run. Floats are
//! written in shortest round-trip form, so parsing restores every value
//! bit for bit.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::eval::GroundTruthSet;
use crate::geometry::{largest_contour, polygon_to_mask, AxisBox, BitMask, Point, Polygon};
use crate::inter::{InterCl, InterClConfig};
use crate::intra::{Activation, IntraCl, IntraClConfig};
use crate::pseudo::{PseudoLabel, ScoredDetection};
use crate::suppress::DetectionSet;
use crate::tensor::Tensor;

pub const SCHEMA_VERSION: &str = "1";

/// Environment variable naming the directory searched for `intra.json` and
/// `inter.json` when no configuration file is given.
pub const CONFIG_DIR_ENV: &str = "TEXTCL_CONFIG_DIR";

/// Slack, in pixels, allowed for coordinates outside the image.
const COORD_SLACK: f64 = 1.0;

fn check_schema(version: &str) -> Result<()> {
    if version == SCHEMA_VERSION {
        Ok(())
    } else {
        Err(Error::Parse(format!("unsupported schemaVersion {version:?}, expected {SCHEMA_VERSION:?}")))
    }
}

fn parse_err(e: Error) -> Error {
    match e {
        Error::Parse(_) | Error::Io(_) => e,
        other => Error::Parse(other.to_string()),
    }
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
}

/// Pretty-printed JSON with a trailing newline.
pub fn to_json_pretty<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

/// Row-major run-length mask encoding; `counts` alternates background and
/// foreground runs, starting with background.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RleMask {
    pub width: usize,
    pub height: usize,
    pub counts: Vec<usize>,
}

impl RleMask {
    pub fn encode(mask: &BitMask) -> Self {
        let mut counts = Vec::new();
        let mut current = false;
        let mut run = 0;
        for &bit in mask.bits() {
            if bit != current {
                counts.push(run);
                run = 0;
                current = bit;
            }
            run += 1;
        }
        counts.push(run);
        Self {
            width: mask.width(),
            height: mask.height(),
            counts,
        }
    }

    pub fn decode(&self) -> Result<BitMask> {
        let total: usize = self.counts.iter().sum();
        if total != self.width * self.height {
            return Err(Error::Parse(format!(
                "mask runs cover {total} pixels, expected {}x{}",
                self.width, self.height
            )));
        }
        let mut bits = Vec::with_capacity(total);
        for (i, &run) in self.counts.iter().enumerate() {
            bits.extend(std::iter::repeat_n(i % 2 == 1, run));
        }
        BitMask::new(self.width, self.height, bits).map_err(parse_err)
    }
}

fn polygon_coords(p: &Polygon) -> Vec<[f64; 2]> {
    p.vertices().iter().map(|v| [v.x, v.y]).collect()
}

fn coords_polygon(coords: &[[f64; 2]]) -> Result<Polygon> {
    Polygon::new(coords.iter().map(|&[x, y]| Point::new(x, y)).collect()).map_err(parse_err)
}

fn check_bounds(what: &str, xs: impl IntoIterator<Item = (f64, f64)>, width: f64, height: f64) -> Result<()> {
    for (x, y) in xs {
        let inside = (-COORD_SLACK..=width + COORD_SLACK).contains(&x) && (-COORD_SLACK..=height + COORD_SLACK).contains(&y);
        if !inside {
            return Err(Error::Parse(format!("{what} coordinate ({x}, {y}) outside {width}x{height} image")));
        }
    }
    Ok(())
}

fn box_from(coords: [f64; 4]) -> Result<AxisBox> {
    AxisBox::new(coords[0], coords[1], coords[2], coords[3]).map_err(parse_err)
}

/// One instance: polygon, mask or both, with its box and a confidence value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct InstanceRecord<V> {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub polygon: Option<Vec<[f64; 2]>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<RleMask>,
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    #[serde(flatten)]
    pub value: V,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Score {
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Weight {
    pub weight: f64,
}

impl<V> InstanceRecord<V> {
    /// Mask as stored, else the polygon rasterised on a `width × height` canvas.
    fn resolve(&self, width: usize, height: usize) -> Result<(BitMask, Option<Polygon>, AxisBox)> {
        let polygon = self.polygon.as_deref().map(coords_polygon).transpose()?;
        let mask = match (&self.mask, &polygon) {
            (Some(rle), _) => {
                if (rle.width, rle.height) != (width, height) {
                    return Err(Error::Parse(format!(
                        "mask is {}x{}, image canvas is {width}x{height}",
                        rle.width, rle.height
                    )));
                }
                rle.decode()?
            }
            (None, Some(p)) => polygon_to_mask(p, width, height).map_err(parse_err)?,
            (None, None) => return Err(Error::Parse("instance has neither polygon nor mask".into())),
        };
        let bbox = box_from(self.bbox)?;
        let mut coords = vec![(bbox.xmin, bbox.ymin), (bbox.xmax, bbox.ymax)];
        if let Some(p) = &polygon {
            coords.extend(p.vertices().iter().map(|v| (v.x, v.y)));
        }
        check_bounds("instance", coords, width as f64, height as f64)?;
        Ok((mask, polygon, bbox))
    }
}

/// Header shared by detection and weighted-label files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct InstanceFile<V> {
    pub schema_version: String,
    pub image_id: String,
    pub image_width: usize,
    pub image_height: usize,
    #[serde(default)]
    pub source_tag: String,
    #[serde(default = "unit_scale")]
    pub scale_factor: f64,
    pub instances: Vec<InstanceRecord<V>>,
}

fn unit_scale() -> f64 {
    1.0
}

pub type DetectionFile = InstanceFile<Score>;
pub type WeightedLabelFile = InstanceFile<Weight>;

impl<V> InstanceFile<V> {
    /// Canvas that masks and coordinates refer to: the image resized by `scaleFactor`.
    pub fn canvas(&self) -> Result<(usize, usize)> {
        let s = self.scale_factor;
        if !(s > 0.0 && s.is_finite()) {
            return Err(Error::Parse(format!("scaleFactor must be positive, got {s}")));
        }
        let w = (self.image_width as f64 * s).round() as usize;
        let h = (self.image_height as f64 * s).round() as usize;
        if w == 0 || h == 0 {
            return Err(Error::Parse("image has zero size".into()));
        }
        Ok((w, h))
    }
}

impl DetectionFile {
    pub fn from_set(set: &DetectionSet) -> Self {
        Self {
            schema_version: SCHEMA_VERSION.into(),
            image_id: set.image_id.clone(),
            image_width: set.image_width,
            image_height: set.image_height,
            source_tag: set.source_tag.clone(),
            scale_factor: set.scale_factor,
            instances: set
                .detections
                .iter()
                .map(|d| InstanceRecord {
                    polygon: d.outline.as_ref().map(polygon_coords),
                    mask: Some(RleMask::encode(&d.mask)),
                    bbox: d.bbox.to_array(),
                    value: Score { score: d.score },
                })
                .collect(),
        }
    }

    pub fn to_set(&self) -> Result<DetectionSet> {
        check_schema(&self.schema_version)?;
        let (w, h) = self.canvas()?;
        let mut detections = Vec::with_capacity(self.instances.len());
        for rec in &self.instances {
            let (mask, outline, bbox) = rec.resolve(w, h)?;
            let mut det = ScoredDetection::new(mask, bbox, rec.value.score).map_err(parse_err)?;
            det.outline = outline;
            detections.push(det);
        }
        Ok(DetectionSet {
            image_id: self.image_id.clone(),
            source_tag: self.source_tag.clone(),
            image_width: self.image_width,
            image_height: self.image_height,
            scale_factor: self.scale_factor,
            detections,
        })
    }
}

impl WeightedLabelFile {
    pub fn to_labels(&self) -> Result<Vec<PseudoLabel>> {
        check_schema(&self.schema_version)?;
        let (w, h) = self.canvas()?;
        self.instances
            .iter()
            .map(|rec| {
                let (mask, _, bbox) = rec.resolve(w, h)?;
                PseudoLabel::new(mask, bbox, rec.value.weight).map_err(parse_err)
            })
            .collect()
    }
}

impl WeightedLabelFile {
    /// Reads labels as detections, taking each weight as the score.
    pub fn to_detection_set(&self) -> Result<DetectionSet> {
        let labels = self.to_labels()?;
        let detections = labels
            .into_iter()
            .map(|l| ScoredDetection::new(l.mask, l.bbox, l.weight))
            .collect::<Result<Vec<_>>>()
            .map_err(parse_err)?;
        Ok(DetectionSet {
            image_id: self.image_id.clone(),
            source_tag: self.source_tag.clone(),
            image_width: self.image_width,
            image_height: self.image_height,
            scale_factor: self.scale_factor,
            detections,
        })
    }
}

/// Reads a detection file, or a weighted-label file with weights as scores.
pub fn read_detection_set(path: &Path) -> Result<DetectionSet> {
    let value: serde_json::Value = read_json(path)?;
    match serde_json::from_value::<DetectionFile>(value.clone()) {
        Ok(file) => file.to_set(),
        Err(det_err) => match serde_json::from_value::<WeightedLabelFile>(value) {
            Ok(file) => file.to_detection_set(),
            Err(_) => Err(Error::Parse(format!("{}: {det_err}", path.display()))),
        },
    }
}

/// Builds the weighted-label export for one image. Each record keeps the
/// exact mask plus the largest contour of that mask as its polygon.
pub fn attach_weights_to_training(
    labels: &[PseudoLabel],
    image_id: &str,
    image_width: usize,
    image_height: usize,
    source_tag: &str,
) -> WeightedLabelFile {
    WeightedLabelFile {
        schema_version: SCHEMA_VERSION.into(),
        image_id: image_id.into(),
        image_width,
        image_height,
        source_tag: source_tag.into(),
        scale_factor: 1.0,
        instances: labels
            .iter()
            .map(|l| InstanceRecord {
                polygon: largest_contour(&l.mask).as_ref().map(polygon_coords),
                mask: Some(RleMask::encode(&l.mask)),
                bbox: l.bbox.to_array(),
                value: Weight { weight: l.weight },
            })
            .collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct GroundTruthRecord {
    pub polygon: Vec<[f64; 2]>,
    #[serde(default)]
    pub ignore: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct GroundTruthFile {
    pub schema_version: String,
    pub image_id: String,
    pub image_width: usize,
    pub image_height: usize,
    pub instances: Vec<GroundTruthRecord>,
}

impl GroundTruthFile {
    pub fn from_set(gt: &GroundTruthSet, image_width: usize, image_height: usize) -> Self {
        Self {
            schema_version: SCHEMA_VERSION.into(),
            image_id: gt.image_id.clone(),
            image_width,
            image_height,
            instances: gt
                .instances
                .iter()
                .zip(&gt.ignore)
                .map(|(p, &ignore)| GroundTruthRecord {
                    polygon: polygon_coords(p),
                    ignore,
                })
                .collect(),
        }
    }

    pub fn to_set(&self) -> Result<GroundTruthSet> {
        check_schema(&self.schema_version)?;
        let mut polys = Vec::with_capacity(self.instances.len());
        for rec in &self.instances {
            let p = coords_polygon(&rec.polygon)?;
            check_bounds(
                "ground truth",
                p.vertices().iter().map(|v| (v.x, v.y)),
                self.image_width as f64,
                self.image_height as f64,
            )?;
            polys.push(p);
        }
        GroundTruthSet::new(self.image_id.clone(), polys, self.instances.iter().map(|r| r.ignore).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModuleKind {
    Intra,
    Inter,
}

impl ModuleKind {
    pub fn name(self) -> &'static str {
        match self {
            ModuleKind::Intra => "intra",
            ModuleKind::Inter => "inter",
        }
    }
}

impl std::str::FromStr for ModuleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "intra" => Ok(ModuleKind::Intra),
            "inter" => Ok(ModuleKind::Inter),
            other => Err(Error::InvalidConfig(format!("unknown module {other:?}"))),
        }
    }
}

/// Compact on-disk form of an intra configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct IntraConfigFile {
    pub channels: usize,
    #[serde(default = "default_kernels")]
    pub kernels: [usize; 3],
    #[serde(default)]
    pub activation: Activation,
    #[serde(default = "default_residual")]
    pub residual: bool,
}

fn default_kernels() -> [usize; 3] {
    IntraClConfig::DEFAULT_KERNELS
}

fn default_residual() -> bool {
    true
}

impl IntraConfigFile {
    pub fn to_config(&self) -> Result<IntraClConfig> {
        let mut cfg = IntraClConfig::with_kernels(self.channels, self.kernels, self.activation);
        cfg.residual = self.residual;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Fails when the blocks do not share one activation.
    pub fn from_config(cfg: &IntraClConfig) -> Result<Self> {
        cfg.validate()?;
        let activation = cfg.blocks[0].activation;
        if cfg.blocks.iter().any(|b| b.activation != activation) {
            return Err(Error::InvalidConfig("per-block activations cannot be written in compact form".into()));
        }
        Ok(Self {
            channels: cfg.channels(),
            kernels: [cfg.blocks[0].kernel, cfg.blocks[1].kernel, cfg.blocks[2].kernel],
            activation,
            residual: cfg.residual,
        })
    }
}

impl Default for IntraConfigFile {
    fn default() -> Self {
        Self::from_config(&IntraClConfig::default()).expect("default config is valid")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ModuleConfig {
    Intra(IntraClConfig),
    Inter(InterClConfig),
}

impl ModuleConfig {
    pub fn kind(&self) -> ModuleKind {
        match self {
            ModuleConfig::Intra(_) => ModuleKind::Intra,
            ModuleConfig::Inter(_) => ModuleKind::Inter,
        }
    }

    pub fn default_for(kind: ModuleKind) -> Self {
        match kind {
            ModuleKind::Intra => ModuleConfig::Intra(IntraClConfig::default()),
            ModuleKind::Inter => ModuleConfig::Inter(InterClConfig::default()),
        }
    }

    /// Parses and validates a configuration; any failure is a configuration error.
    pub fn from_json(kind: ModuleKind, value: serde_json::Value) -> Result<Self> {
        let bad = |e: serde_json::Error| Error::InvalidConfig(e.to_string());
        match kind {
            ModuleKind::Intra => {
                let file: IntraConfigFile = serde_json::from_value(value).map_err(bad)?;
                Ok(ModuleConfig::Intra(file.to_config()?))
            }
            ModuleKind::Inter => {
                let cfg: InterClConfig = serde_json::from_value(value).map_err(bad)?;
                cfg.validate()?;
                Ok(ModuleConfig::Inter(cfg))
            }
        }
    }

    pub fn to_json(&self) -> Result<serde_json::Value> {
        Ok(match self {
            ModuleConfig::Intra(cfg) => serde_json::to_value(IntraConfigFile::from_config(cfg)?)?,
            ModuleConfig::Inter(cfg) => serde_json::to_value(cfg)?,
        })
    }

    pub fn param_count(&self) -> Result<usize> {
        match self {
            ModuleConfig::Intra(cfg) => crate::intra::intra_param_count(cfg),
            ModuleConfig::Inter(cfg) => crate::inter::inter_param_count(cfg),
        }
    }

    /// Reads `path`, or `<$TEXTCL_CONFIG_DIR>/<module>.json` when no path is
    /// given and that file exists, or falls back to the defaults.
    pub fn load(kind: ModuleKind, path: Option<&Path>) -> Result<Self> {
        let path: Option<PathBuf> = match path {
            Some(p) => Some(p.to_path_buf()),
            None => std::env::var_os(CONFIG_DIR_ENV)
                .map(|dir| Path::new(&dir).join(format!("{}.json", kind.name())))
                .filter(|p| p.exists()),
        };
        match path {
            None => Ok(Self::default_for(kind)),
            Some(p) => {
                let value: serde_json::Value = read_json(&p).map_err(|e| match e {
                    Error::Parse(msg) => Error::InvalidConfig(msg),
                    other => other,
                })?;
                Self::from_json(kind, value)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Named tensors with an optional module description and a SHA-256
/// checksum over names, shapes and little-endian payloads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct TensorFile {
    pub schema_version: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub module: Option<ModuleKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<serde_json::Value>,
    pub tensors: Vec<TensorRecord>,
    pub checksum: String,
}

pub fn tensor_checksum(tensors: &[TensorRecord]) -> String {
    let mut h = Sha256::new();
    for t in tensors {
        h.update((t.name.len() as u64).to_le_bytes());
        h.update(t.name.as_bytes());
        h.update((t.shape.len() as u64).to_le_bytes());
        for &d in &t.shape {
            h.update((d as u64).to_le_bytes());
        }
        for &v in &t.data {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

impl TensorFile {
    pub fn new(tensors: Vec<(String, Tensor)>) -> Result<Self> {
        let records: Vec<TensorRecord> = tensors
            .into_iter()
            .map(|(name, t)| TensorRecord {
                name,
                shape: t.shape().to_vec(),
                data: t.into_data(),
            })
            .collect();
        if records.iter().any(|r| r.data.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFinite { op: "tensor file" });
        }
        Ok(Self {
            schema_version: SCHEMA_VERSION.into(),
            module: None,
            config: None,
            checksum: tensor_checksum(&records),
            tensors: records,
        })
    }

    /// Weights of a module together with its configuration.
    pub fn from_model(model: &Model) -> Result<Self> {
        let (kind, config, tensors) = match model {
            Model::Intra(m) => (ModuleKind::Intra, ModuleConfig::Intra(m.config()), m.named_tensors()),
            Model::Inter(m) => (ModuleKind::Inter, ModuleConfig::Inter(m.config().clone()), m.named_tensors()),
        };
        let mut file = Self::new(tensors)?;
        file.module = Some(kind);
        file.config = Some(config.to_json()?);
        Ok(file)
    }

    /// Checks the schema, the checksum and that every payload fits its shape.
    pub fn verify(&self) -> Result<()> {
        check_schema(&self.schema_version)?;
        let expected = tensor_checksum(&self.tensors);
        if expected != self.checksum {
            return Err(Error::Parse(format!("checksum mismatch: file says {}, content hashes to {expected}", self.checksum)));
        }
        let mut seen = std::collections::BTreeSet::new();
        for t in &self.tensors {
            if !seen.insert(t.name.as_str()) {
                return Err(Error::Parse(format!("duplicate tensor {:?}", t.name)));
            }
            Tensor::new(t.shape.clone(), t.data.clone()).map_err(parse_err)?;
        }
        Ok(())
    }

    /// Verified tensors keyed by name.
    pub fn tensors(&self) -> Result<BTreeMap<String, Tensor>> {
        self.verify()?;
        self.tensors
            .iter()
            .map(|t| Ok((t.name.clone(), Tensor::new(t.shape.clone(), t.data.clone())?)))
            .collect()
    }

    pub fn get(&self, name: &str) -> Result<Tensor> {
        let t = self
            .tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::Parse(format!("tensor {name:?} not found")))?;
        Tensor::new(t.shape.clone(), t.data.clone()).map_err(parse_err)
    }

    /// Rebuilds the module described by `module` and `config`.
    pub fn to_model(&self) -> Result<Model> {
        let mut tensors = self.tensors()?;
        let kind = self.module.ok_or_else(|| Error::Parse("weights file names no module".into()))?;
        let value = self.config.clone().ok_or_else(|| Error::Parse("weights file has no config".into()))?;
        let config = ModuleConfig::from_json(kind, value)?;
        let lookup = |name: &str| tensors.remove(name);
        let model = match &config {
            ModuleConfig::Intra(cfg) => Model::Intra(IntraCl::from_named_tensors(cfg, lookup)?),
            ModuleConfig::Inter(cfg) => Model::Inter(InterCl::from_named_tensors(cfg, lookup)?),
        };
        if let Some(extra) = tensors.keys().next() {
            return Err(Error::InvalidConfig(format!("unexpected tensor {extra:?} for the configured module")));
        }
        Ok(model)
    }

    /// Compact JSON with a trailing newline.
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string(self)?;
        s.push('\n');
        Ok(s)
    }
}

#[allow(clippy::large_enum_variant)]
#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    Intra(IntraCl),
    Inter(InterCl),
}

impl Model {
    pub fn kind(&self) -> ModuleKind {
        match self {
            Model::Intra(_) => ModuleKind::Intra,
            Model::Inter(_) => ModuleKind::Inter,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn rle_cases() {
        let m = BitMask::from_fn(4, 2, |x, y| x == 1 || (x == 3 && y == 1));
        let rle = RleMask::encode(&m);
        assert_eq!(rle.counts, vec![1, 1, 3, 1, 1, 1]);
        assert_eq!(rle.decode().unwrap(), m);
        let full = BitMask::from_fn(3, 1, |_, _| true);
        assert_eq!(RleMask::encode(&full).counts, vec![0, 3]);
        assert_eq!(RleMask::encode(&BitMask::empty(3, 1)).counts, vec![3]);
        let bad = RleMask {
            width: 2,
            height: 2,
            counts: vec![1, 1],
        };
        assert!(matches!(bad.decode(), Err(Error::Parse(_))));
    }

    #[test]
    fn polygon_only_records_are_rasterised() {
        let text = r#"{"schemaVersion":"1","imageId":"a","imageWidth":8,"imageHeight":8,
            "instances":[{"polygon":[[1,1],[5,1],[5,3],[1,3]],"box":[1,1,5,3],"score":0.5}]}"#;
        let file: DetectionFile = serde_json::from_str(text).unwrap();
        let set = file.to_set().unwrap();
        assert_eq!(set.detections[0].mask.count(), 8);
        assert!(set.detections[0].outline.is_some());
        let again = DetectionFile::from_set(&set).to_set().unwrap();
        assert_eq!(again, set);
    }

    #[test]
    fn invalid_files_are_parse_errors() {
        let base = r#"{"schemaVersion":"1","imageId":"a","imageWidth":8,"imageHeight":8,"instances":[REC]}"#;
        let bad = [
            r#"{"box":[1,1,5,3],"score":0.5}"#,
            r#"{"polygon":[[1,1],[50,1],[5,3]],"box":[1,1,5,3],"score":0.5}"#,
            r#"{"polygon":[[1,1],[5,1],[5,3]],"box":[1,1,5,3],"score":1.5}"#,
            r#"{"polygon":[[1,1],[5,1],[5,3]],"box":[5,1,1,3],"score":0.5}"#,
        ];
        for rec in bad {
            let file: DetectionFile = serde_json::from_str(&base.replace("REC", rec)).unwrap();
            assert!(matches!(file.to_set(), Err(Error::Parse(_))), "{rec}");
        }
        let v2 = base.replace("REC", "").replace("\"1\"", "\"2\"");
        assert!(serde_json::from_str::<DetectionFile>(&v2).unwrap().to_set().is_err());
        assert!(serde_json::from_str::<DetectionFile>(r#"{"schemaVersion":"1"}"#).is_err());
    }

    #[test]
    fn tensor_checksum_detects_tampering() {
        let t = Tensor::from_fn(&[2, 3], |i| (i[0] * 3 + i[1]) as f64 * 0.1).unwrap();
        let file = TensorFile::new(vec![("x".into(), t.clone())]).unwrap();
        file.verify().unwrap();
        let parsed: TensorFile = serde_json::from_str(&file.to_json().unwrap()).unwrap();
        assert_eq!(parsed.get("x").unwrap(), t);
        let mut tampered = parsed.clone();
        tampered.tensors[0].data[4] = 7.0;
        assert!(tampered.verify().is_err());
        assert!(TensorFile::new(vec![("x".into(), Tensor::full(&[1], f64::NAN).unwrap())]).is_err());
    }

    #[test]
    fn weights_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = IntraClConfig::with_kernels(2, [3, 3, 1], Activation::Relu);
        let model = Model::Intra(IntraCl::random(&cfg, &mut rng).unwrap());
        let file = TensorFile::from_model(&model).unwrap();
        let parsed: TensorFile = serde_json::from_str(&file.to_json().unwrap()).unwrap();
        assert_eq!(parsed.to_model().unwrap(), model);

        let mut wrong = parsed.clone();
        wrong.config = Some(serde_json::json!({"channels": 3, "kernels": [3, 3, 1], "activation": "relu"}));
        assert!(wrong.to_model().is_err());
    }

    #[test]
    fn config_parsing() {
        let cfg = ModuleConfig::from_json(ModuleKind::Intra, serde_json::json!({"channels": 1, "kernels": [3, 3, 3]})).unwrap();
        assert_eq!(cfg.param_count().unwrap(), 54);
        for bad in [
            serde_json::json!({"channels": 1, "kernels": [3, 4, 3]}),
            serde_json::json!({"channels": 0}),
            serde_json::json!({"channels": 1, "kernel": 3}),
            serde_json::json!([1, 2]),
        ] {
            assert!(matches!(ModuleConfig::from_json(ModuleKind::Intra, bad), Err(Error::InvalidConfig(_))));
        }
        assert!(ModuleConfig::from_json(ModuleKind::Inter, serde_json::json!({"heads": 5})).is_err());
        let inter = ModuleConfig::from_json(ModuleKind::Inter, serde_json::json!({})).unwrap();
        assert_eq!(inter, ModuleConfig::default_for(ModuleKind::Inter));
    }
}
