//! Detection evaluation by one-to-one IoU matching.
//!
//! Candidate `(gt, det)` pairs with polygon IoU at or above the threshold are
//! visited in descending IoU order, ties by gt index then det index, and
//! accepted when neither side is taken yet. A detection matched to a
//! don't-care region counts as neither a true nor a false positive, and
//! don't-care regions are left out of the ground-truth count.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::geometry::{iou_polygon, largest_contour, Polygon};
use crate::suppress::DetectionSet;

pub const DEFAULT_IOU_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthSet {
    pub image_id: String,
    pub instances: Vec<Polygon>,
    pub ignore: Vec<bool>,
}

impl GroundTruthSet {
    pub fn new(image_id: impl Into<String>, instances: Vec<Polygon>, ignore: Vec<bool>) -> Result<Self> {
        if instances.len() != ignore.len() {
            return Err(Error::ShapeMismatch {
                op: "ground truth",
                dim: "ignore flags",
                expected: instances.len(),
                found: ignore.len(),
            });
        }
        Ok(Self {
            image_id: image_id.into(),
            instances,
            ignore,
        })
    }

    /// Every instance counted.
    pub fn all_cared(image_id: impl Into<String>, instances: Vec<Polygon>) -> Self {
        let ignore = vec![false; instances.len()];
        Self {
            image_id: image_id.into(),
            instances,
            ignore,
        }
    }

    pub fn cared_count(&self) -> usize {
        self.ignore.iter().filter(|&&i| !i).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Match {
    pub gt_index: usize,
    pub det_index: usize,
    pub iou: f64,
}

/// Greedy one-to-one matching over an IoU table indexed `[gt][det]`.
pub fn greedy_match(ious: &[Vec<f64>], threshold: f64) -> Vec<Match> {
    let mut pairs: Vec<Match> = ious
        .iter()
        .enumerate()
        .flat_map(|(g, row)| {
            row.iter().enumerate().filter(|&(_, &iou)| iou >= threshold).map(move |(d, &iou)| Match {
                gt_index: g,
                det_index: d,
                iou,
            })
        })
        .collect();
    pairs.sort_by(|a, b| {
        b.iou
            .total_cmp(&a.iou)
            .then(a.gt_index.cmp(&b.gt_index))
            .then(a.det_index.cmp(&b.det_index))
    });
    let det_count = ious.first().map_or(0, Vec::len);
    let mut gt_used = vec![false; ious.len()];
    let mut det_used = vec![false; det_count];
    let mut out = Vec::new();
    for m in pairs {
        if !gt_used[m.gt_index] && !det_used[m.det_index] {
            gt_used[m.gt_index] = true;
            det_used[m.det_index] = true;
            out.push(m);
        }
    }
    out
}

/// Outline used for evaluation: the stored polygon, else the largest mask contour.
pub fn detection_polygon(det: &crate::pseudo::ScoredDetection) -> Option<Polygon> {
    det.outline.clone().or_else(|| largest_contour(&det.mask))
}

/// Polygon IoU table `[gt][det]`; detections without a contour score 0.
pub fn iou_table(gt: &GroundTruthSet, det: &DetectionSet) -> Result<Vec<Vec<f64>>> {
    let polys: Vec<Option<Polygon>> = det.detections.iter().map(detection_polygon).collect();
    gt.instances
        .iter()
        .map(|g| {
            polys
                .iter()
                .map(|p| p.as_ref().map_or(Ok(0.0), |p| iou_polygon(g, p)))
                .collect()
        })
        .collect()
}

fn check_threshold(threshold: f64) -> Result<()> {
    if threshold > 0.0 && threshold <= 1.0 {
        Ok(())
    } else {
        Err(invalid("evaluate", format!("IoU threshold {threshold} outside (0, 1]")))
    }
}

pub fn match_detections(gt: &GroundTruthSet, det: &DetectionSet, threshold: f64) -> Result<Vec<Match>> {
    check_threshold(threshold)?;
    if gt.image_id != det.image_id {
        return Err(Error::ImageIdMismatch {
            expected: gt.image_id.clone(),
            found: det.image_id.clone(),
        });
    }
    Ok(greedy_match(&iou_table(gt, det)?, threshold))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Metrics {
    pub recall: f64,
    pub precision: f64,
    pub f_measure: f64,
    /// Set when there was no ground truth to recall.
    pub recall_undefined: bool,
    /// Set when there were no detections to be precise about.
    pub precision_undefined: bool,
}

pub fn compute_metrics(true_positives: usize, gt_count: usize, det_count: usize) -> Result<Metrics> {
    if true_positives > gt_count || true_positives > det_count {
        return Err(invalid(
            "metrics",
            format!("{true_positives} true positives exceed counts ({gt_count} gt, {det_count} det)"),
        ));
    }
    let ratio = |n: usize, d: usize| if d == 0 { 0.0 } else { n as f64 / d as f64 };
    let recall = ratio(true_positives, gt_count);
    let precision = ratio(true_positives, det_count);
    let f_measure = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Ok(Metrics {
        recall,
        precision,
        f_measure,
        recall_undefined: gt_count == 0,
        precision_undefined: det_count == 0,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ImageReport {
    pub image_id: String,
    pub true_positives: usize,
    pub gt_count: usize,
    pub det_count: usize,
    /// Detections matched to don't-care regions.
    pub ignored_detections: usize,
    pub matched_pairs: Vec<Match>,
    #[serde(flatten)]
    pub metrics: Metrics,
}

pub fn evaluate_image(gt: &GroundTruthSet, det: &DetectionSet, threshold: f64) -> Result<ImageReport> {
    let matches = match_detections(gt, det, threshold)?;
    let (ignored, counted): (Vec<Match>, Vec<Match>) = matches.into_iter().partition(|m| gt.ignore[m.gt_index]);
    let gt_count = gt.cared_count();
    let det_count = det.detections.len() - ignored.len();
    let metrics = compute_metrics(counted.len(), gt_count, det_count)?;
    Ok(ImageReport {
        image_id: gt.image_id.clone(),
        true_positives: counted.len(),
        gt_count,
        det_count,
        ignored_detections: ignored.len(),
        matched_pairs: counted,
        metrics,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct EvalReport {
    pub iou_threshold: f64,
    pub true_positives: usize,
    pub gt_count: usize,
    pub det_count: usize,
    #[serde(flatten)]
    pub metrics: Metrics,
    pub per_image: Vec<ImageReport>,
}

impl EvalReport {
    pub fn recall(&self) -> f64 {
        self.metrics.recall
    }

    pub fn precision(&self) -> f64 {
        self.metrics.precision
    }

    pub fn f_measure(&self) -> f64 {
        self.metrics.f_measure
    }

    /// Plain-text table with one row per image and a total row.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<24} {:>5} {:>5} {:>5} {:>9} {:>9} {:>9}", "image", "tp", "gt", "det", "recall", "precision", "f-measure");
        let mut row = |id: &str, tp: usize, gt: usize, det: usize, m: &Metrics| {
            let flag = |undefined: bool| if undefined { "*" } else { " " };
            let _ = writeln!(
                s,
                "{:<24} {:>5} {:>5} {:>5} {:>8.4}{} {:>8.4}{} {:>9.4}",
                id,
                tp,
                gt,
                det,
                m.recall,
                flag(m.recall_undefined),
                m.precision,
                flag(m.precision_undefined),
                m.f_measure
            );
        };
        for img in &self.per_image {
            row(&img.image_id, img.true_positives, img.gt_count, img.det_count, &img.metrics);
        }
        row("total", self.true_positives, self.gt_count, self.det_count, &self.metrics);
        if self.metrics.recall_undefined || self.metrics.precision_undefined {
            s.push_str("* empty denominator, reported as 0\n");
        }
        s
    }
}

/// Evaluates every ground-truth image; detection sets are paired by image
/// id and a missing set counts as no detections. Totals are summed over images.
pub fn evaluate(gts: &[GroundTruthSet], dets: &[DetectionSet], threshold: f64) -> Result<EvalReport> {
    check_threshold(threshold)?;
    let mut by_id: BTreeMap<&str, &DetectionSet> = BTreeMap::new();
    for d in dets {
        if by_id.insert(d.image_id.as_str(), d).is_some() {
            return Err(invalid("evaluate", format!("duplicate detection set for image {:?}", d.image_id)));
        }
    }
    let mut gts: Vec<&GroundTruthSet> = gts.iter().collect();
    gts.sort_by(|a, b| a.image_id.cmp(&b.image_id));
    let mut per_image = Vec::with_capacity(gts.len());
    for gt in gts {
        let report = match by_id.remove(gt.image_id.as_str()) {
            Some(det) => evaluate_image(gt, det, threshold)?,
            None => evaluate_image(gt, &DetectionSet::new(gt.image_id.clone(), "", 0, 0), threshold)?,
        };
        if per_image.iter().any(|r: &ImageReport| r.image_id == report.image_id) {
            return Err(invalid("evaluate", format!("duplicate ground truth for image {:?}", report.image_id)));
        }
        per_image.push(report);
    }
    if let Some((id, _)) = by_id.into_iter().next() {
        return Err(Error::ImageIdMismatch {
            expected: per_image.first().map_or_else(String::new, |r| r.image_id.clone()),
            found: id.to_string(),
        });
    }
    let tp = per_image.iter().map(|r| r.true_positives).sum();
    let gt_count = per_image.iter().map(|r| r.gt_count).sum();
    let det_count = per_image.iter().map(|r| r.det_count).sum();
    Ok(EvalReport {
        iou_threshold: threshold,
        true_positives: tp,
        gt_count,
        det_count,
        metrics: compute_metrics(tp, gt_count, det_count)?,
        per_image,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pseudo::ScoredDetection;

    fn rect(x0: f64, y0: f64, x1: f64, y1: f64) -> Polygon {
        Polygon::rect(x0, y0, x1, y1).unwrap()
    }

    fn dets(id: &str, polys: &[Polygon]) -> DetectionSet {
        DetectionSet::new(id, "m", 64, 64).with_detections(
            polys
                .iter()
                .map(|p| ScoredDetection::from_polygon(p.clone(), 64, 64, 0.9).unwrap())
                .collect(),
        )
    }

    #[test]
    fn metric_arithmetic() {
        let m = compute_metrics(0, 4, 5).unwrap();
        assert_eq!((m.recall, m.precision, m.f_measure), (0.0, 0.0, 0.0));
        let m = compute_metrics(4, 4, 4).unwrap();
        assert_eq!((m.recall, m.precision, m.f_measure), (1.0, 1.0, 1.0));
        let m = compute_metrics(3, 4, 5).unwrap();
        assert_eq!(m.recall, 0.75);
        assert_eq!(m.precision, 0.6);
        assert!((m.f_measure - 2.0 / 3.0).abs() < 1e-12);
        let m = compute_metrics(0, 2, 0).unwrap();
        assert!(m.precision_undefined && !m.recall_undefined);
        assert!(compute_metrics(3, 2, 5).is_err());
    }

    #[test]
    fn perfect_and_partial_detection() {
        let gt = GroundTruthSet::all_cared("img", vec![rect(2.0, 2.0, 12.0, 8.0), rect(20.0, 20.0, 40.0, 30.0)]);
        let perfect = evaluate_image(&gt, &dets("img", &gt.instances), 0.5).unwrap();
        assert_eq!((perfect.metrics.recall, perfect.metrics.precision, perfect.metrics.f_measure), (1.0, 1.0, 1.0));
        let half = evaluate_image(&gt, &dets("img", &gt.instances[..1]), 0.5).unwrap();
        assert_eq!(half.metrics.recall, 0.5);
        assert_eq!(half.metrics.precision, 1.0);
        assert!((half.metrics.f_measure - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn empty_detections_are_flagged() {
        let gt = GroundTruthSet::all_cared("img", vec![rect(2.0, 2.0, 12.0, 8.0)]);
        let r = evaluate(&[gt], &[], 0.5).unwrap();
        assert_eq!((r.recall(), r.precision(), r.f_measure()), (0.0, 0.0, 0.0));
        assert!(r.metrics.precision_undefined);
        assert!(r.to_table().contains('*'));
    }

    #[test]
    fn ignored_regions_are_neutral() {
        let gt = GroundTruthSet::new("img", vec![rect(2.0, 2.0, 12.0, 8.0), rect(20.0, 20.0, 40.0, 30.0)], vec![false, true])
            .unwrap();
        let r = evaluate_image(&gt, &dets("img", &gt.instances), 0.5).unwrap();
        assert_eq!((r.true_positives, r.gt_count, r.det_count, r.ignored_detections), (1, 1, 1, 1));
        assert_eq!(r.metrics.f_measure, 1.0);
        assert!(GroundTruthSet::new("img", vec![rect(0.0, 0.0, 1.0, 1.0)], vec![]).is_err());
    }

    #[test]
    fn id_mismatch_is_reported() {
        let gt = GroundTruthSet::all_cared("a", vec![rect(2.0, 2.0, 12.0, 8.0)]);
        assert!(matches!(match_detections(&gt, &dets("b", &[]), 0.5), Err(Error::ImageIdMismatch { .. })));
        assert!(matches!(evaluate(&[gt], &[dets("b", &[])], 0.5), Err(Error::ImageIdMismatch { .. })));
    }

    #[test]
    fn greedy_prefers_highest_iou() {
        let ious = vec![vec![0.9, 0.8], vec![0.85, 0.0]];
        let m = greedy_match(&ious, 0.5);
        assert_eq!(m.len(), 1);
        assert_eq!((m[0].gt_index, m[0].det_index), (0, 0));
        assert!(greedy_match(&[vec![0.49]], 0.5).is_empty());
        assert_eq!(greedy_match(&[vec![0.5]], 0.5).len(), 1);
    }

    #[test]
    fn mask_only_detections_use_contours() {
        let gt = GroundTruthSet::all_cared("img", vec![rect(2.0, 2.0, 12.0, 8.0)]);
        let mut d = dets("img", &gt.instances);
        d.detections[0].outline = None;
        let r = evaluate_image(&gt, &d, 0.5).unwrap();
        assert_eq!(r.matched_pairs[0].iou, 1.0);
    }
}
