//! Ensemble pseudo-label generation from three teacher detection sets.
//!
//! Detections of the anchor set A are visited in descending score order. Each
//! one looks for its best unmatched partner in B and in C (IoU strictly above
//! the threshold `T`):
//!
//! | partners found | mask            | box               | weight            |
//! |----------------|-----------------|-------------------|-------------------|
//! | B and C        | `m_i ∧ m_j ∧ m_k` | mean of 3 boxes | `s_i · s_j · s_k` |
//! | B only         | `m_i ∧ m_j`      | mean of 2 boxes  | `s_i · s_j · α`   |
//! | C only         | `m_i ∧ m_k`      | mean of 2 boxes  | `s_i · s_k · α`   |
//! | neither        | dropped          |                   |                   |
//!
//! A partner is consumed once matched, so no B or C detection backs more than
//! one label. Ties on IoU go to the higher score, then the lower input index.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::geometry::{iou_box, iou_mask, polygon_to_mask, AxisBox, BitMask, Polygon};

/// One detected text instance: mask, box and confidence.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredDetection {
    pub mask: BitMask,
    pub bbox: AxisBox,
    pub score: f64,
    /// The polygon this detection was rasterised from, when it came from one.
    pub outline: Option<Polygon>,
}

impl ScoredDetection {
    /// Validates the score range and that `bbox` covers the mask foreground
    /// to within one pixel.
    pub fn new(mask: BitMask, bbox: AxisBox, score: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&score) {
            return Err(invalid("detection", format!("score {score} outside [0, 1]")));
        }
        if let Some(extent) = mask.bounding_box() {
            if !bbox.encloses(&extent, 1.0) {
                return Err(invalid(
                    "detection",
                    format!("box {:?} does not enclose mask extent {:?}", bbox.to_array(), extent.to_array()),
                ));
            }
        }
        Ok(Self {
            mask,
            bbox,
            score,
            outline: None,
        })
    }

    /// Uses the tight pixel bounding box of a non-empty mask.
    pub fn from_mask(mask: BitMask, score: f64) -> Result<Self> {
        let bbox = mask
            .bounding_box()
            .ok_or_else(|| invalid("detection", "mask is empty"))?;
        Self::new(mask, bbox, score)
    }

    /// Rasterises `polygon` onto a `width × height` canvas and keeps it as the outline.
    pub fn from_polygon(polygon: Polygon, width: usize, height: usize, score: f64) -> Result<Self> {
        let mask = polygon_to_mask(&polygon, width, height)?;
        let mut det = Self::new(mask, polygon.bounds(), score)?;
        det.outline = Some(polygon);
        Ok(det)
    }
}

/// Which representation IoU is measured on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IouMode {
    #[default]
    Mask,
    Box,
}

impl std::str::FromStr for IouMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mask" => Ok(IouMode::Mask),
            "box" => Ok(IouMode::Box),
            other => Err(invalid("iou mode", format!("unknown mode {other:?}"))),
        }
    }
}

pub fn detection_iou(a: &ScoredDetection, b: &ScoredDetection, mode: IouMode) -> Result<f64> {
    match mode {
        IouMode::Mask => iou_mask(&a.mask, &b.mask),
        IouMode::Box => Ok(iou_box(&a.bbox, &b.bbox)),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FusionConfig {
    pub iou_threshold: f64,
    pub alpha: f64,
    pub iou_mode: IouMode,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            iou_threshold: 0.8,
            alpha: 0.5,
            iou_mode: IouMode::Mask,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.iou_threshold > 0.0 && self.iou_threshold < 1.0) {
            return Err(invalid("fusion", format!("IoU threshold {} outside (0, 1)", self.iou_threshold)));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(invalid("fusion", format!("decay {} outside (0, 1]", self.alpha)));
        }
        Ok(())
    }
}

/// A fused training target: mask, box and loss weight.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabel {
    pub mask: BitMask,
    pub bbox: AxisBox,
    pub weight: f64,
}

impl PseudoLabel {
    pub fn new(mask: BitMask, bbox: AxisBox, weight: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&weight) {
            return Err(invalid("pseudo label", format!("weight {weight} outside [0, 1]")));
        }
        Ok(Self { mask, bbox, weight })
    }
}

/// Pixelwise AND of one or more equally sized masks.
pub fn overlap_mask(masks: &[&BitMask]) -> Result<BitMask> {
    let (first, rest) = masks
        .split_first()
        .ok_or_else(|| invalid("overlap_mask", "no masks"))?;
    rest.iter().try_fold((*first).clone(), |acc, m| acc.and(m))
}

/// Coordinate-wise mean of one or more boxes.
pub fn soft_box(boxes: &[AxisBox]) -> Result<AxisBox> {
    if boxes.is_empty() {
        return Err(invalid("soft_box", "no boxes"));
    }
    let n = boxes.len() as f64;
    let mean = |f: fn(&AxisBox) -> f64| boxes.iter().map(f).sum::<f64>() / n;
    AxisBox::new(mean(|b| b.xmin), mean(|b| b.ymin), mean(|b| b.xmax), mean(|b| b.ymax))
}

/// Which detections produced a label: indices into A, B and C.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LabelSource {
    pub anchor: usize,
    pub partner_b: Option<usize>,
    pub partner_c: Option<usize>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct FusionSummary {
    pub triples: usize,
    pub pairs_b: usize,
    pub pairs_c: usize,
    pub dropped: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionOutcome {
    /// Labels in the order their anchors were visited.
    pub labels: Vec<PseudoLabel>,
    pub sources: Vec<LabelSource>,
    pub summary: FusionSummary,
}

fn check_dims(sets: [&[ScoredDetection]; 3]) -> Result<()> {
    let mut dims = sets.iter().flat_map(|s| s.iter()).map(|d| (d.mask.width(), d.mask.height()));
    if let Some(first) = dims.next() {
        for other in dims {
            if other != first {
                return Err(Error::ShapeMismatch {
                    op: "pseudo labels",
                    dim: if other.0 != first.0 { "mask width" } else { "mask height" },
                    expected: if other.0 != first.0 { first.0 } else { first.1 },
                    found: if other.0 != first.0 { other.0 } else { other.1 },
                });
            }
        }
    }
    Ok(())
}

/// Indices of `dets` by descending score, ties by input position.
pub(crate) fn score_order(dets: &[ScoredDetection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&i, &j| dets[j].score.total_cmp(&dets[i].score).then(i.cmp(&j)));
    order
}

fn best_partner(
    anchor: &ScoredDetection,
    pool: &[ScoredDetection],
    consumed: &[bool],
    cfg: &FusionConfig,
) -> Result<Option<usize>> {
    let mut best: Option<(f64, usize)> = None;
    for (j, cand) in pool.iter().enumerate() {
        if consumed[j] {
            continue;
        }
        let iou = detection_iou(anchor, cand, cfg.iou_mode)?;
        if iou <= cfg.iou_threshold {
            continue;
        }
        let better = match best {
            None => true,
            Some((best_iou, b)) => iou > best_iou || (iou == best_iou && cand.score > pool[b].score),
        };
        if better {
            best = Some((iou, j));
        }
    }
    Ok(best.map(|(_, j)| j))
}

/// Fuses three teachers' detections on one image into weighted pseudo labels.
pub fn generate_pseudo_labels(
    det_a: &[ScoredDetection],
    det_b: &[ScoredDetection],
    det_c: &[ScoredDetection],
    cfg: &FusionConfig,
) -> Result<FusionOutcome> {
    cfg.validate()?;
    check_dims([det_a, det_b, det_c])?;
    let mut used_b = vec![false; det_b.len()];
    let mut used_c = vec![false; det_c.len()];
    let mut out = FusionOutcome {
        labels: Vec::new(),
        sources: Vec::new(),
        summary: FusionSummary::default(),
    };
    for i in score_order(det_a) {
        let a = &det_a[i];
        let j = best_partner(a, det_b, &used_b, cfg)?;
        let k = best_partner(a, det_c, &used_c, cfg)?;
        let label = match (j, k) {
            (Some(j), Some(k)) => {
                out.summary.triples += 1;
                let (b, c) = (&det_b[j], &det_c[k]);
                PseudoLabel::new(
                    overlap_mask(&[&a.mask, &b.mask, &c.mask])?,
                    soft_box(&[a.bbox, b.bbox, c.bbox])?,
                    a.score * b.score * c.score,
                )?
            }
            (Some(j), None) => {
                out.summary.pairs_b += 1;
                let b = &det_b[j];
                PseudoLabel::new(
                    overlap_mask(&[&a.mask, &b.mask])?,
                    soft_box(&[a.bbox, b.bbox])?,
                    a.score * b.score * cfg.alpha,
                )?
            }
            (None, Some(k)) => {
                out.summary.pairs_c += 1;
                let c = &det_c[k];
                PseudoLabel::new(
                    overlap_mask(&[&a.mask, &c.mask])?,
                    soft_box(&[a.bbox, c.bbox])?,
                    a.score * c.score * cfg.alpha,
                )?
            }
            (None, None) => {
                out.summary.dropped += 1;
                continue;
            }
        };
        if let Some(j) = j {
            used_b[j] = true;
        }
        if let Some(k) = k {
            used_c[k] = true;
        }
        out.labels.push(label);
        out.sources.push(LabelSource {
            anchor: i,
            partner_b: j,
            partner_c: k,
        });
    }
    Ok(out)
}

/// Runs the fusion with each teacher as anchor in turn: `(A,B,C)`, `(B,C,A)`, `(C,A,B)`.
pub fn rotate_roles(
    det_a: &[ScoredDetection],
    det_b: &[ScoredDetection],
    det_c: &[ScoredDetection],
    cfg: &FusionConfig,
) -> Result<[FusionOutcome; 3]> {
    Ok([
        generate_pseudo_labels(det_a, det_b, det_c, cfg)?,
        generate_pseudo_labels(det_b, det_c, det_a, cfg)?,
        generate_pseudo_labels(det_c, det_a, det_b, cfg)?,
    ])
}
