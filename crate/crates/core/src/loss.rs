//! Loss terms with analytic gradients.
//!
//! Every loss is mean-reduced over elements (or samples, for softmax cross
//! entropy) and accepts optional per-sample weights indexed by the leading
//! axis. Weights scale each term; the mean still divides by the full count.

use crate::error::{invalid, Error, Result};
use crate::tensor::{check_same_shape, Tensor};

/// Probability clamp used by [`binary_cross_entropy`].
pub const BCE_EPS: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq)]
pub struct LossResult {
    pub value: f64,
    /// Derivative of `value` with respect to the prediction.
    pub gradient: Tensor,
}

fn leading_weights(op: &'static str, shape: &[usize], weights: Option<&[f64]>) -> Result<Option<Vec<f64>>> {
    let Some(w) = weights else { return Ok(None) };
    let lead = shape.first().copied().unwrap_or(1);
    if w.len() != lead {
        return Err(Error::ShapeMismatch {
            op,
            dim: "sample weights",
            expected: lead,
            found: w.len(),
        });
    }
    if w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(invalid(op, "sample weights must be finite and non-negative"));
    }
    Ok(Some(w.to_vec()))
}

/// Weight of element `index` out of `len`, looked up by leading-axis position.
fn weight_at(weights: &Option<Vec<f64>>, index: usize, len: usize) -> f64 {
    match weights {
        Some(w) => w[index / (len / w.len())],
        None => 1.0,
    }
}

fn check_finite(op: &'static str, t: &Tensor) -> Result<()> {
    if t.data().iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

/// Huber-style loss: `0.5·d²/β` for `|d| < β`, else `|d| − 0.5·β`.
pub fn smooth_l1(pred: &Tensor, target: &Tensor, beta: f64, weights: Option<&[f64]>) -> Result<LossResult> {
    check_same_shape("smooth_l1", pred.shape(), target.shape())?;
    check_finite("smooth_l1", pred)?;
    check_finite("smooth_l1", target)?;
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(invalid("smooth_l1", format!("beta must be positive, got {beta}")));
    }
    let w = leading_weights("smooth_l1", pred.shape(), weights)?;
    let n = pred.len();
    let mut value = 0.0;
    let mut grad = Vec::with_capacity(n);
    for (i, (&p, &t)) in pred.data().iter().zip(target.data()).enumerate() {
        let d = p - t;
        let wi = weight_at(&w, i, n);
        if d.abs() < beta {
            value += wi * 0.5 * d * d / beta;
            grad.push(wi * d / beta / n as f64);
        } else {
            value += wi * (d.abs() - 0.5 * beta);
            grad.push(wi * d.signum() / n as f64);
        }
    }
    Ok(LossResult {
        value: value / n as f64,
        gradient: Tensor::new(pred.shape().to_vec(), grad)?,
    })
}

/// Mean of `−[t·log p + (1−t)·log(1−p)]` with `p` clamped to `[ε, 1−ε]`.
/// The gradient is zero where the clamp is active.
pub fn binary_cross_entropy(pred: &Tensor, target: &Tensor, weights: Option<&[f64]>) -> Result<LossResult> {
    check_same_shape("binary_cross_entropy", pred.shape(), target.shape())?;
    check_finite("binary_cross_entropy", pred)?;
    if target.data().iter().any(|&t| t != 0.0 && t != 1.0) {
        return Err(invalid("binary_cross_entropy", "targets must be 0 or 1"));
    }
    let w = leading_weights("binary_cross_entropy", pred.shape(), weights)?;
    let n = pred.len();
    let mut value = 0.0;
    let mut grad = Vec::with_capacity(n);
    for (i, (&p, &t)) in pred.data().iter().zip(target.data()).enumerate() {
        let wi = weight_at(&w, i, n);
        let q = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
        value += -wi * (t * q.ln() + (1.0 - t) * (1.0 - q).ln());
        let g = if q == p { (q - t) / (q * (1.0 - q)) } else { 0.0 };
        grad.push(wi * g / n as f64);
    }
    Ok(LossResult {
        value: value / n as f64,
        gradient: Tensor::new(pred.shape().to_vec(), grad)?,
    })
}

/// Mean over samples of `−log softmax(z)[target]`, classes on the last axis.
pub fn softmax_cross_entropy(logits: &Tensor, targets: &[usize], weights: Option<&[f64]>) -> Result<LossResult> {
    check_finite("softmax_cross_entropy", logits)?;
    let k = *logits.shape().last().expect("tensors have rank >= 1");
    if k < 2 {
        return Err(invalid("softmax_cross_entropy", "at least two classes are required"));
    }
    let rows = logits.len() / k;
    if targets.len() != rows {
        return Err(Error::ShapeMismatch {
            op: "softmax_cross_entropy",
            dim: "targets",
            expected: rows,
            found: targets.len(),
        });
    }
    if let Some(&t) = targets.iter().find(|&&t| t >= k) {
        return Err(invalid("softmax_cross_entropy", format!("class index {t} out of range for {k} classes")));
    }
    let sample_shape: &[usize] = if logits.rank() == 1 { &[1] } else { &logits.shape()[..logits.rank() - 1] };
    let w = leading_weights("softmax_cross_entropy", sample_shape, weights)?;
    let mut value = 0.0;
    let mut grad = Vec::with_capacity(logits.len());
    for (r, (row, &t)) in logits.data().chunks_exact(k).zip(targets).enumerate() {
        let wr = weight_at(&w, r, rows);
        let peak = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let total: f64 = row.iter().map(|&z| (z - peak).exp()).sum();
        let log_norm = peak + total.ln();
        value += wr * (log_norm - row[t]);
        for (c, &z) in row.iter().enumerate() {
            let p = (z - log_norm).exp();
            let onehot = if c == t { 1.0 } else { 0.0 };
            grad.push(wr * (p - onehot) / rows as f64);
        }
    }
    Ok(LossResult {
        value: value / rows as f64,
        gradient: Tensor::new(logits.shape().to_vec(), grad)?,
    })
}

/// Classification and regression terms of one detection stage.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StageLoss<'a> {
    pub cls: &'a LossResult,
    pub reg: &'a LossResult,
}

/// Unweighted sum `L_rpn + L_box + L_mask` of the five scalar terms.
pub fn total_loss(rpn: StageLoss<'_>, bbox: StageLoss<'_>, mask: &LossResult) -> f64 {
    rpn.cls.value + rpn.reg.value + bbox.cls.value + bbox.reg.value + mask.value
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn smooth_l1_cases() {
        let x = t(&[3], &[0.5, -2.0, 1.0]);
        let r = smooth_l1(&x, &x, 1.0, None).unwrap();
        assert_eq!(r.value, 0.0);
        assert!(r.gradient.data().iter().all(|&g| g == 0.0));

        let r = smooth_l1(&t(&[1], &[2.0]), &t(&[1], &[0.0]), 1.0, None).unwrap();
        assert_eq!(r.value, 1.5);
        assert_eq!(r.gradient.data(), &[1.0]);

        let r = smooth_l1(&t(&[1], &[0.5]), &t(&[1], &[0.0]), 1.0, None).unwrap();
        assert_eq!(r.value, 0.125);
        assert_eq!(r.gradient.data(), &[0.5]);

        assert!(smooth_l1(&x, &t(&[2], &[0.0, 0.0]), 1.0, None).is_err());
        assert!(smooth_l1(&x, &x, 0.0, None).is_err());
    }

    #[test]
    fn bce_cases() {
        let half = Tensor::full(&[2, 3], 0.5).unwrap();
        let target = t(&[2, 3], &[0.0, 1.0, 1.0, 0.0, 0.0, 1.0]);
        let r = binary_cross_entropy(&half, &target, None).unwrap();
        assert!((r.value - std::f64::consts::LN_2).abs() < 1e-15);

        let r = binary_cross_entropy(&target, &target, None).unwrap();
        assert!(r.value > 0.0 && r.value < 2e-7);
        assert!(r.gradient.data().iter().all(|&g| g == 0.0));

        assert!(binary_cross_entropy(&half, &half, None).is_err());
    }

    #[test]
    fn softmax_ce_cases() {
        let r = softmax_cross_entropy(&t(&[1, 2], &[0.3, 0.3]), &[1], None).unwrap();
        assert!((r.value - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((r.gradient.data()[0] - 0.5).abs() < 1e-15);

        let r = softmax_cross_entropy(&t(&[2], &[0.0, 800.0]), &[1], None).unwrap();
        assert_eq!(r.value, 0.0);

        assert!(softmax_cross_entropy(&t(&[1, 2], &[0.0, 0.0]), &[2], None).is_err());
        assert!(softmax_cross_entropy(&t(&[1, 1], &[0.0]), &[0], None).is_err());
        assert!(softmax_cross_entropy(&t(&[2, 2], &[0.0; 4]), &[0], None).is_err());
    }

    #[test]
    fn sample_weights_scale_terms() {
        let pred = t(&[2, 2], &[1.0, 1.0, 1.0, 1.0]);
        let target = Tensor::zeros(&[2, 2]).unwrap();
        let plain = smooth_l1(&pred, &target, 2.0, None).unwrap();
        let weighted = smooth_l1(&pred, &target, 2.0, Some(&[1.0, 0.0])).unwrap();
        assert_eq!(weighted.value, plain.value / 2.0);
        assert_eq!(weighted.gradient.data()[2], 0.0);
        assert!(smooth_l1(&pred, &target, 2.0, Some(&[1.0])).is_err());
        assert!(smooth_l1(&pred, &target, 2.0, Some(&[1.0, -1.0])).is_err());

        let logits = t(&[2, 2], &[0.0, 1.0, 2.0, 0.0]);
        let full = softmax_cross_entropy(&logits, &[0, 0], None).unwrap();
        let w = softmax_cross_entropy(&logits, &[0, 0], Some(&[0.648, 0.36])).unwrap();
        let first = softmax_cross_entropy(&t(&[1, 2], &[0.0, 1.0]), &[0], None).unwrap().value;
        let second = softmax_cross_entropy(&t(&[1, 2], &[2.0, 0.0]), &[0], None).unwrap().value;
        assert!((full.value - (first + second) / 2.0).abs() < 1e-15);
        assert!((w.value - (0.648 * first + 0.36 * second) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn total_is_plain_sum() {
        let r = |v: f64| LossResult {
            value: v,
            gradient: Tensor::zeros(&[1]).unwrap(),
        };
        let (a, b, c, d, e) = (r(1.0), r(2.0), r(3.0), r(4.0), r(5.0));
        let total = total_loss(StageLoss { cls: &a, reg: &b }, StageLoss { cls: &c, reg: &d }, &e);
        assert_eq!(total, 15.0);
        let z = r(0.0);
        assert_eq!(total_loss(StageLoss { cls: &z, reg: &z }, StageLoss { cls: &z, reg: &z }, &z), 0.0);
    }
}
