//! Conditional-entropy training objectives.
//!
//! Three cross-entropy terms drive the model: the classifier should be
//! certain of the true label on the foreground-masked image (`loss_positive`),
//! maximally uncertain — uniform — on the background-masked image
//! (`loss_negative`, cross-entropy against the uniform target, whose minimum
//! equals `ln c`), and the localizer's own head should also predict the label
//! (`loss_secondary`). The total is their unweighted sum averaged over the
//! mini-batch.

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

fn validate_distribution(op: &'static str, p: &[f64]) -> Result<()> {
    if p.is_empty() {
        return Err(Error::invalid(op, "empty distribution"));
    }
    if !p.iter().all(|v| v.is_finite() && *v >= 0.0) {
        return Err(Error::invalid(op, "entries must be finite and >= 0"));
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(Error::invalid(op, format!("entries sum to {sum}, not 1")));
    }
    Ok(())
}

/// Shannon entropy `-sum p ln p` with `0 ln 0 := 0`; range `[0, ln c]`.
pub fn entropy(p: &[f64]) -> Result<f64> {
    validate_distribution("entropy", p)?;
    Ok(p.iter()
        .map(|&v| if v > 0.0 { -v * v.ln() } else { 0.0 })
        .sum())
}

/// `-ln p_hat[y]`: cross-entropy against the true label.
pub fn loss_positive(p_hat: &Tensor, y: usize) -> Result<Tensor> {
    let p = p_hat.data_vec();
    validate_distribution("loss_positive", &p)?;
    if y >= p.len() {
        return Err(Error::invalid(
            "loss_positive",
            format!("class {y} out of range for {} classes", p.len()),
        ));
    }
    p_hat.pick(y)?.log_clamped()?.scalar_affine(-1.0, 0.0)
}

/// `-(1/c) sum_y ln p_hat[y]`: cross-entropy against the uniform target.
/// Minimized (value `ln c`) exactly when `p_hat` is uniform.
pub fn loss_negative(p_hat: &Tensor, classes: usize) -> Result<Tensor> {
    let p = p_hat.data_vec();
    validate_distribution("loss_negative", &p)?;
    if p.len() != classes {
        return Err(Error::invalid(
            "loss_negative",
            format!("distribution has {} entries, expected {classes}", p.len()),
        ));
    }
    p_hat
        .log_clamped()?
        .sum()?
        .scalar_affine(-1.0 / classes as f64, 0.0)
}

/// Same contract as [`loss_positive`], applied to the localizer's posterior.
pub fn loss_secondary(p_hat_s: &Tensor, y: usize) -> Result<Tensor> {
    loss_positive(p_hat_s, y)
}

/// Per-sample loss components; the secondary term may be accumulated over
/// several erasing steps.
#[derive(Debug, Clone)]
pub struct SampleLoss {
    pub id: String,
    pub l_pos: f64,
    pub l_neg: f64,
    pub l_sec: f64,
}

impl SampleLoss {
    pub fn total(&self) -> f64 {
        self.l_pos + self.l_neg + self.l_sec
    }
}

/// Batch-mean loss report.
#[derive(Debug, Clone)]
pub struct LossBundle {
    pub l_pos: f64,
    pub l_neg: f64,
    pub l_sec: f64,
    pub total: f64,
    pub per_sample: Vec<SampleLoss>,
}

/// Reduce per-sample terms to batch means; `total` is the mean of the
/// per-sample sums.
pub fn total_loss(per_sample: Vec<SampleLoss>) -> Result<LossBundle> {
    if per_sample.is_empty() {
        return Err(Error::invalid("total_loss", "empty batch"));
    }
    for s in &per_sample {
        for (name, v) in [("l_pos", s.l_pos), ("l_neg", s.l_neg), ("l_sec", s.l_sec)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::invalid(
                    "total_loss",
                    format!("sample {}: {name} = {v}", s.id),
                ));
            }
        }
    }
    let n = per_sample.len() as f64;
    let l_pos = per_sample.iter().map(|s| s.l_pos).sum::<f64>() / n;
    let l_neg = per_sample.iter().map(|s| s.l_neg).sum::<f64>() / n;
    let l_sec = per_sample.iter().map(|s| s.l_sec).sum::<f64>() / n;
    let total = per_sample.iter().map(|s| s.total()).sum::<f64>() / n;
    Ok(LossBundle {
        l_pos,
        l_neg,
        l_sec,
        total,
        per_sample,
    })
}
