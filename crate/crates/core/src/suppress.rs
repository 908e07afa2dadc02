//! Duplicate suppression: hard NMS, Soft-NMS with linear or Gaussian decay,
//! and the concatenate-then-suppress recipes for multi-scale testing and
//! model ensembles.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::geometry::{polygon_to_mask, AxisBox, BitMask};
use crate::pseudo::{detection_iou, score_order, IouMode, ScoredDetection};

/// Detections from one model or one test scale on one image.
///
/// Masks, outlines and boxes live in the frame of the image resized by
/// `scale_factor`; `image_width` and `image_height` describe the original image.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionSet {
    pub image_id: String,
    pub source_tag: String,
    pub image_width: usize,
    pub image_height: usize,
    pub scale_factor: f64,
    pub detections: Vec<ScoredDetection>,
}

impl DetectionSet {
    /// A set in original-image coordinates.
    pub fn new(image_id: impl Into<String>, source_tag: impl Into<String>, width: usize, height: usize) -> Self {
        Self {
            image_id: image_id.into(),
            source_tag: source_tag.into(),
            image_width: width,
            image_height: height,
            scale_factor: 1.0,
            detections: Vec::new(),
        }
    }

    pub fn with_detections(mut self, detections: Vec<ScoredDetection>) -> Self {
        self.detections = detections;
        self
    }

    /// Maps every detection back to the original image frame.
    ///
    /// Outlines are scaled by `1 / scale_factor` and re-rasterised; masks
    /// without an outline are resampled at pixel centres.
    pub fn to_original_frame(&self) -> Result<DetectionSet> {
        let s = self.scale_factor;
        if !(s > 0.0 && s.is_finite()) {
            return Err(invalid("rescale", format!("scale factor must be positive, got {s}")));
        }
        let (w, h) = (self.image_width, self.image_height);
        let mut out = Vec::with_capacity(self.detections.len());
        for det in &self.detections {
            let (mask, outline) = match &det.outline {
                Some(poly) => {
                    let poly = poly.scale(1.0 / s)?;
                    (polygon_to_mask(&poly, w, h)?, Some(poly))
                }
                None => (resample_mask(&det.mask, s, w, h), None),
            };
            let mut bbox = det.bbox.scale(1.0 / s)?;
            if let Some(extent) = mask.bounding_box() {
                bbox = AxisBox::new(
                    bbox.xmin.min(extent.xmin),
                    bbox.ymin.min(extent.ymin),
                    bbox.xmax.max(extent.xmax),
                    bbox.ymax.max(extent.ymax),
                )?;
            }
            let mut rescaled = ScoredDetection::new(mask, bbox, det.score)?;
            rescaled.outline = outline;
            out.push(rescaled);
        }
        Ok(DetectionSet {
            scale_factor: 1.0,
            detections: out,
            ..self.clone()
        })
    }
}

fn resample_mask(mask: &BitMask, scale: f64, width: usize, height: usize) -> BitMask {
    BitMask::from_fn(width, height, |x, y| {
        let sx = ((x as f64 + 0.5) * scale).floor() as usize;
        let sy = ((y as f64 + 0.5) * scale).floor() as usize;
        sx < mask.width() && sy < mask.height() && mask.get(sx, sy)
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum SuppressMode {
    Hard,
    #[default]
    SoftLinear,
    SoftGaussian,
}

impl std::str::FromStr for SuppressMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hard" => Ok(SuppressMode::Hard),
            "soft-linear" | "softLinear" => Ok(SuppressMode::SoftLinear),
            "soft-gaussian" | "softGaussian" => Ok(SuppressMode::SoftGaussian),
            other => Err(invalid("suppress mode", format!("unknown mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SuppressConfig {
    pub mode: SuppressMode,
    pub iou_threshold: f64,
    pub sigma: f64,
    pub score_floor: f64,
    pub iou_mode: IouMode,
}

impl Default for SuppressConfig {
    fn default() -> Self {
        Self {
            mode: SuppressMode::SoftLinear,
            iou_threshold: 0.5,
            sigma: 0.5,
            score_floor: 0.001,
            iou_mode: IouMode::Mask,
        }
    }
}

impl SuppressConfig {
    pub fn hard() -> Self {
        Self {
            mode: SuppressMode::Hard,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.iou_threshold > 0.0 && self.iou_threshold < 1.0) {
            return Err(invalid("suppress", format!("IoU threshold {} outside (0, 1)", self.iou_threshold)));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(invalid("suppress", format!("sigma must be positive, got {}", self.sigma)));
        }
        if !(0.0..1.0).contains(&self.score_floor) {
            return Err(invalid("suppress", format!("score floor {} outside [0, 1)", self.score_floor)));
        }
        Ok(())
    }

    /// Score multiplier applied to a remaining detection overlapping the
    /// selected one with the given IoU.
    pub fn decay(&self, iou: f64) -> f64 {
        match self.mode {
            SuppressMode::Hard => {
                if iou > self.iou_threshold {
                    0.0
                } else {
                    1.0
                }
            }
            SuppressMode::SoftLinear => {
                if iou > self.iou_threshold {
                    1.0 - iou
                } else {
                    1.0
                }
            }
            SuppressMode::SoftGaussian => (-iou * iou / self.sigma).exp(),
        }
    }
}

/// Classic NMS: keep the best remaining detection, discard everything
/// overlapping it with IoU above the threshold, repeat.
pub fn nms(dets: &[ScoredDetection], cfg: &SuppressConfig) -> Result<Vec<ScoredDetection>> {
    cfg.validate()?;
    let mut alive = vec![true; dets.len()];
    let mut kept = Vec::new();
    for i in score_order(dets) {
        if !alive[i] {
            continue;
        }
        kept.push(dets[i].clone());
        for j in 0..dets.len() {
            if alive[j] && j != i && detection_iou(&dets[i], &dets[j], cfg.iou_mode)? > cfg.iou_threshold {
                alive[j] = false;
            }
        }
        alive[i] = false;
    }
    Ok(kept)
}

/// Soft-NMS: the best remaining detection is emitted and every other
/// remaining score is multiplied by [`SuppressConfig::decay`]. Scores below
/// the floor are dropped. Output is ordered by final score.
pub fn soft_nms(dets: &[ScoredDetection], cfg: &SuppressConfig) -> Result<Vec<ScoredDetection>> {
    cfg.validate()?;
    let mut pool: Vec<(usize, f64)> = dets
        .iter()
        .enumerate()
        .map(|(i, d)| (i, d.score))
        .filter(|&(_, s)| s >= cfg.score_floor)
        .collect();
    let mut out = Vec::with_capacity(pool.len());
    while !pool.is_empty() {
        let best = (0..pool.len())
            .max_by(|&a, &b| pool[a].1.total_cmp(&pool[b].1).then(pool[b].0.cmp(&pool[a].0)))
            .expect("pool is non-empty");
        let (chosen, score) = pool.swap_remove(best);
        let mut kept = dets[chosen].clone();
        kept.score = score;
        out.push(kept);
        for entry in pool.iter_mut() {
            let iou = detection_iou(&dets[chosen], &dets[entry.0], cfg.iou_mode)?;
            entry.1 *= cfg.decay(iou);
        }
        pool.retain(|&(_, s)| s >= cfg.score_floor);
    }
    Ok(out)
}

/// Dispatches on the configured mode.
pub fn suppress(dets: &[ScoredDetection], cfg: &SuppressConfig) -> Result<Vec<ScoredDetection>> {
    match cfg.mode {
        SuppressMode::Hard => nms(dets, cfg),
        _ => soft_nms(dets, cfg),
    }
}

fn concatenate(sets: &[DetectionSet]) -> Result<DetectionSet> {
    let first = sets.first().ok_or_else(|| invalid("aggregate", "no detection sets"))?;
    let mut merged = DetectionSet::new(first.image_id.clone(), "", first.image_width, first.image_height);
    merged.scale_factor = first.scale_factor;
    let mut tags = Vec::with_capacity(sets.len());
    for set in sets {
        if set.image_id != first.image_id {
            return Err(Error::ImageIdMismatch {
                expected: first.image_id.clone(),
                found: set.image_id.clone(),
            });
        }
        if set.scale_factor != first.scale_factor {
            return Err(invalid("aggregate", "detection sets are in different frames"));
        }
        tags.push(set.source_tag.as_str());
        merged.detections.extend(set.detections.iter().cloned());
    }
    merged.source_tag = tags.join("+");
    Ok(merged)
}

/// Concatenates scale-specific sets (already mapped to a common frame) and
/// suppresses with the configured mode.
pub fn multi_scale_aggregate(sets: &[DetectionSet], cfg: &SuppressConfig) -> Result<DetectionSet> {
    let mut merged = concatenate(sets)?;
    merged.detections = suppress(&merged.detections, cfg)?;
    Ok(merged)
}

/// Concatenates the sets of several models and applies Soft-NMS. A hard
/// mode decays overlapping scores to zero.
pub fn model_ensemble(sets: &[DetectionSet], cfg: &SuppressConfig) -> Result<DetectionSet> {
    let mut merged = concatenate(sets)?;
    merged.detections = soft_nms(&merged.detections, cfg)?;
    Ok(merged)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Polygon;

    fn det(x0: usize, y0: usize, x1: usize, y1: usize, score: f64) -> ScoredDetection {
        let mask = BitMask::from_fn(32, 32, |x, y| (x0..x1).contains(&x) && (y0..y1).contains(&y));
        ScoredDetection::from_mask(mask, score).unwrap()
    }

    fn scores(dets: &[ScoredDetection]) -> Vec<f64> {
        dets.iter().map(|d| d.score).collect()
    }

    #[test]
    fn hard_nms_cases() {
        let cfg = SuppressConfig::hard();
        let out = nms(&[det(0, 0, 8, 8, 0.8), det(0, 0, 8, 8, 0.9)], &cfg).unwrap();
        assert_eq!(scores(&out), vec![0.9]);
        let disjoint = [det(0, 0, 4, 4, 0.3), det(10, 10, 14, 14, 0.7)];
        assert_eq!(scores(&nms(&disjoint, &cfg).unwrap()), vec![0.7, 0.3]);
        assert!(nms(&[], &cfg).unwrap().is_empty());
    }

    #[test]
    fn linear_decay_annihilates_full_overlap() {
        let cfg = SuppressConfig::default();
        let out = soft_nms(&[det(0, 0, 8, 8, 0.9), det(0, 0, 8, 8, 0.8)], &cfg).unwrap();
        assert_eq!(scores(&out), vec![0.9]);
        let out = soft_nms(&[det(0, 0, 4, 4, 0.9), det(10, 10, 14, 14, 0.8)], &cfg).unwrap();
        assert_eq!(scores(&out), vec![0.9, 0.8]);
    }

    #[test]
    fn linear_decay_value() {
        // IoU 0.6 > 0.5 so the second score becomes 0.8 * 0.4
        let cfg = SuppressConfig::default();
        let out = soft_nms(&[det(0, 0, 10, 1, 0.9), det(0, 0, 6, 1, 0.8)], &cfg).unwrap();
        assert_eq!(out[1].score, 0.8 * (1.0 - 0.6));
        // IoU 0.4 is below the threshold
        let out = soft_nms(&[det(0, 0, 10, 1, 0.9), det(0, 0, 4, 1, 0.8)], &cfg).unwrap();
        assert_eq!(out[1].score, 0.8);
    }

    #[test]
    fn gaussian_decay_value() {
        let cfg = SuppressConfig {
            mode: SuppressMode::SoftGaussian,
            ..SuppressConfig::default()
        };
        let out = soft_nms(&[det(0, 0, 10, 1, 0.9), det(0, 0, 4, 1, 0.8)], &cfg).unwrap();
        assert_eq!(out[1].score, 0.8 * (-0.4f64 * 0.4 / 0.5).exp());
    }

    #[test]
    fn floor_drops_weak_detections() {
        let cfg = SuppressConfig::default();
        let out = soft_nms(&[det(0, 0, 4, 4, 0.0005), det(10, 10, 14, 14, 0.8)], &cfg).unwrap();
        assert_eq!(scores(&out), vec![0.8]);
    }

    #[test]
    fn invalid_config() {
        let bad = SuppressConfig {
            sigma: 0.0,
            ..SuppressConfig::default()
        };
        assert!(soft_nms(&[], &bad).is_err());
        assert!("soft".parse::<SuppressMode>().is_err());
        assert_eq!("soft-gaussian".parse::<SuppressMode>().unwrap(), SuppressMode::SoftGaussian);
    }

    #[test]
    fn aggregation_checks_ids() {
        let a = DetectionSet::new("img", "s1", 32, 32).with_detections(vec![det(0, 0, 8, 8, 0.9)]);
        let b = DetectionSet::new("img", "s2", 32, 32).with_detections(vec![det(0, 0, 8, 8, 0.7)]);
        let merged = multi_scale_aggregate(&[a.clone(), b.clone()], &SuppressConfig::hard()).unwrap();
        assert_eq!(scores(&merged.detections), vec![0.9]);
        assert_eq!(merged.source_tag, "s1+s2");
        let other = DetectionSet::new("other", "s3", 32, 32);
        assert!(matches!(
            model_ensemble(&[a, other], &SuppressConfig::default()),
            Err(Error::ImageIdMismatch { .. })
        ));
        assert!(model_ensemble(&[], &SuppressConfig::default()).is_err());
        let disjoint = DetectionSet::new("img", "m", 32, 32).with_detections(vec![det(20, 20, 24, 24, 0.6)]);
        assert_eq!(model_ensemble(&[b, disjoint], &SuppressConfig::default()).unwrap().detections.len(), 2);
    }

    #[test]
    fn rescale_to_original_frame() {
        let poly = Polygon::rect(4.0, 4.0, 12.0, 8.0).unwrap();
        let mut set = DetectionSet::new("img", "x2", 16, 16);
        set.scale_factor = 2.0;
        set.detections.push(ScoredDetection::from_polygon(poly, 32, 32, 0.9).unwrap());
        set.detections.push(det(4, 4, 12, 8, 0.8));
        let back = set.to_original_frame().unwrap();
        assert_eq!(back.scale_factor, 1.0);
        let expected = BitMask::from_fn(16, 16, |x, y| (2..6).contains(&x) && (2..4).contains(&y));
        assert_eq!(back.detections[0].mask, expected);
        assert_eq!(back.detections[1].mask, expected);
        assert_eq!(back.detections[0].bbox.to_array(), [2.0, 2.0, 6.0, 4.0]);
    }
}
