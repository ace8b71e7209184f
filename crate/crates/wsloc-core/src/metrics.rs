//! Image-level and pixel-level evaluation.
//!
//! Pixel metrics follow the F1-as-Dice convention over the binarized
//! predicted mask: F1+ on the foreground, F1- on the exact complements.
//! Empty-vs-empty counts as perfect agreement (1), empty-vs-non-empty as
//! total disagreement (0), which keeps the metric total and symmetric.
//! The averaged precision-recall protocol interpolates every image's curve
//! onto a fixed `[0,1]` recall grid with step 1e-3 and averages pointwise.

use std::path::Path;

use crate::error::{Error, Result};

/// Percent of mismatched predictions.
pub fn classification_error(preds: &[usize], labels: &[usize]) -> Result<f64> {
    if preds.is_empty() || preds.len() != labels.len() {
        return Err(Error::invalid(
            "classification_error",
            format!("got {} predictions, {} labels", preds.len(), labels.len()),
        ));
    }
    let wrong = preds.iter().zip(labels).filter(|(p, l)| p != l).count();
    Ok(100.0 * wrong as f64 / preds.len() as f64)
}

fn f1_from_counts(tp: usize, fp: usize, fn_: usize) -> f64 {
    if tp + fp == 0 && tp + fn_ == 0 {
        return 1.0; // both masks empty: perfect agreement
    }
    if tp + fp == 0 || tp + fn_ == 0 {
        return 0.0; // exactly one empty
    }
    2.0 * tp as f64 / (2.0 * tp as f64 + fp as f64 + fn_ as f64)
}

/// (F1+, F1-) of a continuous mask against binary ground truth, binarizing
/// the prediction at `threshold` (foreground = value >= threshold).
pub fn f1_scores(pred: &[f64], gt: &[bool], threshold: f64) -> Result<(f64, f64)> {
    if pred.len() != gt.len() {
        return Err(Error::ShapeMismatch {
            op: "f1_scores",
            lhs: vec![pred.len()],
            rhs: vec![gt.len()],
        });
    }
    if pred.is_empty() {
        return Err(Error::invalid("f1_scores", "empty masks"));
    }
    let (mut tp, mut fp, mut fn_, mut tn) = (0usize, 0usize, 0usize, 0usize);
    for (&p, &g) in pred.iter().zip(gt) {
        match (p >= threshold, g) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    // background view: complement both masks, so tn plays tp's role
    Ok((f1_from_counts(tp, fp, fn_), f1_from_counts(tn, fn_, fp)))
}

/// Literal set-counting Dice index `2|A∩B| / (|A|+|B|)`; the brute-force
/// equivalence oracle for [`f1_scores`].
pub fn dice_oracle(a: &[bool], b: &[bool]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch {
            op: "dice_oracle",
            lhs: vec![a.len()],
            rhs: vec![b.len()],
        });
    }
    let inter = a.iter().zip(b).filter(|(x, y)| **x && **y).count();
    let size_a = a.iter().filter(|&&x| x).count();
    let size_b = b.iter().filter(|&&x| x).count();
    if size_a + size_b == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (size_a as f64 + size_b as f64))
}

/// Constant all-ones predictor over a set of ground-truth masks; the
/// reference floor that exposes F1+ alone as insufficient.
#[derive(Debug, Clone, Copy)]
pub struct BaselineRow {
    pub f1_plus: f64,
    pub f1_minus: f64,
}

pub fn all_ones_baseline(gt_masks: &[&[bool]]) -> Result<BaselineRow> {
    if gt_masks.is_empty() {
        return Err(Error::invalid("all_ones_baseline", "no ground-truth masks"));
    }
    let mut sum_plus = 0.0;
    let mut sum_minus = 0.0;
    for gt in gt_masks {
        let ones = vec![1.0; gt.len()];
        let (fp, fm) = f1_scores(&ones, gt, 0.5)?;
        sum_plus += fp;
        sum_minus += fm;
    }
    let n = gt_masks.len() as f64;
    Ok(BaselineRow {
        f1_plus: 100.0 * sum_plus / n,
        f1_minus: 100.0 * sum_minus / n,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Polarity {
    Foreground,
    Background,
}

#[derive(Debug, Clone)]
pub struct PrCurve {
    /// Exactly 1001 points: 0, 1e-3, ..., 1.
    pub recall: Vec<f64>,
    pub precision: Vec<f64>,
    /// Images whose ground truth had no positive pixel for this polarity.
    pub skipped: usize,
}

pub const PR_GRID_POINTS: usize = 1001;

fn pr_grid() -> Vec<f64> {
    (0..PR_GRID_POINTS).map(|i| i as f64 / 1000.0).collect()
}

/// Threshold-sweep PR points of one image, recall-ascending, deduplicated
/// to the best precision per recall. `None` when the ground truth has no
/// positive pixels.
fn image_pr_points(pred: &[f64], gt: &[bool]) -> Option<Vec<(f64, f64)>> {
    let total_pos = gt.iter().filter(|&&g| g).count();
    if total_pos == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..pred.len()).collect();
    order.sort_by(|&i, &j| pred[j].partial_cmp(&pred[i]).unwrap().then(i.cmp(&j)));

    let mut points: Vec<(f64, f64)> = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        // consume the whole group of equal scores: the threshold sits at
        // this score and includes every pixel with value >= it
        let score = pred[order[i]];
        while i < order.len() && pred[order[i]] == score {
            if gt[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let recall = tp as f64 / total_pos as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        match points.last() {
            Some(&(r, _)) if r == recall => {} // keep the earlier, higher precision
            _ => points.push((recall, precision)),
        }
    }
    Some(points)
}

/// Interpolate one image's curve onto the fixed grid: linear in recall,
/// constant extension on both sides of the achievable range.
fn interpolate(points: &[(f64, f64)], grid: &[f64]) -> Vec<f64> {
    grid.iter()
        .map(|&r| {
            if r <= points[0].0 {
                return points[0].1;
            }
            match points.windows(2).find(|w| r <= w[1].0) {
                Some(w) => {
                    let (r0, p0) = w[0];
                    let (r1, p1) = w[1];
                    p0 + (p1 - p0) * (r - r0) / (r1 - r0)
                }
                None => points.last().unwrap().1,
            }
        })
        .collect()
}

/// Mean interpolated PR curve over the images whose ground truth supports
/// the requested polarity.
pub fn avg_pr_curve(preds: &[Vec<f64>], gts: &[Vec<bool>], polarity: Polarity) -> Result<PrCurve> {
    if preds.is_empty() || preds.len() != gts.len() {
        return Err(Error::invalid(
            "avg_pr_curve",
            format!("{} predictions, {} ground truths", preds.len(), gts.len()),
        ));
    }
    let grid = pr_grid();
    let mut mean = vec![0.0; grid.len()];
    let mut used = 0usize;
    let mut skipped = 0usize;
    for (pred, gt) in preds.iter().zip(gts) {
        let (pred, gt): (Vec<f64>, Vec<bool>) = match polarity {
            Polarity::Foreground => (pred.clone(), gt.clone()),
            Polarity::Background => (
                pred.iter().map(|p| 1.0 - p).collect(),
                gt.iter().map(|g| !g).collect(),
            ),
        };
        match image_pr_points(&pred, &gt) {
            Some(points) => {
                for (m, p) in mean.iter_mut().zip(interpolate(&points, &grid)) {
                    *m += p;
                }
                used += 1;
            }
            None => skipped += 1,
        }
    }
    if used == 0 {
        return Err(Error::invalid(
            "avg_pr_curve",
            "every image was degenerate for this polarity",
        ));
    }
    for m in &mut mean {
        *m /= used as f64;
    }
    Ok(PrCurve {
        recall: grid,
        precision: mean,
        skipped,
    })
}

/// Everything known about one evaluated sample.
#[derive(Debug, Clone)]
pub struct EvalSample {
    pub id: String,
    pub label: usize,
    pub predicted: usize,
    /// Continuous foreground mask at image resolution.
    pub mask: Option<Vec<f64>>,
    pub gt_mask: Option<Vec<bool>>,
}

#[derive(Debug, Clone)]
pub struct SampleMetrics {
    pub id: String,
    pub label: usize,
    pub predicted: usize,
    pub f1_plus: Option<f64>,
    pub f1_minus: Option<f64>,
}

#[derive(Debug)]
pub struct MetricsReport {
    pub classification_error: f64,
    /// Percent means over the samples that have ground truth; absent when
    /// none do.
    pub f1_plus: Option<f64>,
    pub f1_minus: Option<f64>,
    pub per_sample: Vec<SampleMetrics>,
    pub pr_foreground: Option<PrCurve>,
    pub pr_background: Option<PrCurve>,
    pub baseline: Option<BaselineRow>,
}

/// Aggregate per-sample predictions into the full report. Pixel metrics are
/// computed for samples carrying both a predicted mask and ground truth.
pub fn build_report(samples: &[EvalSample], threshold: f64) -> Result<MetricsReport> {
    let preds: Vec<usize> = samples.iter().map(|s| s.predicted).collect();
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    let classification_error = classification_error(&preds, &labels)?;

    let mut per_sample = Vec::with_capacity(samples.len());
    let mut masked_preds = Vec::new();
    let mut masked_gts = Vec::new();
    let mut sum_plus = 0.0;
    let mut sum_minus = 0.0;
    for s in samples {
        let mut row = SampleMetrics {
            id: s.id.clone(),
            label: s.label,
            predicted: s.predicted,
            f1_plus: None,
            f1_minus: None,
        };
        if let (Some(mask), Some(gt)) = (&s.mask, &s.gt_mask) {
            let (fp, fm) = f1_scores(mask, gt, threshold)?;
            row.f1_plus = Some(100.0 * fp);
            row.f1_minus = Some(100.0 * fm);
            sum_plus += fp;
            sum_minus += fm;
            masked_preds.push(mask.clone());
            masked_gts.push(gt.clone());
        }
        per_sample.push(row);
    }

    let n_masked = masked_preds.len();
    let (f1_plus, f1_minus, pr_foreground, pr_background, baseline) = if n_masked > 0 {
        let fg = avg_pr_curve(&masked_preds, &masked_gts, Polarity::Foreground).ok();
        let bg = avg_pr_curve(&masked_preds, &masked_gts, Polarity::Background).ok();
        let gt_refs: Vec<&[bool]> = masked_gts.iter().map(|g| g.as_slice()).collect();
        let baseline = all_ones_baseline(&gt_refs)?;
        (
            Some(100.0 * sum_plus / n_masked as f64),
            Some(100.0 * sum_minus / n_masked as f64),
            fg,
            bg,
            Some(baseline),
        )
    } else {
        (None, None, None, None, None)
    };

    Ok(MetricsReport {
        classification_error,
        f1_plus,
        f1_minus,
        per_sample,
        pr_foreground,
        pr_background,
        baseline,
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// One row per sample plus a trailing summary row.
pub fn write_metrics_csv(path: &Path, report: &MetricsReport) -> Result<()> {
    let mut out = String::from("id,label,pred,f1_plus,f1_minus\n");
    for s in &report.per_sample {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            s.id,
            s.label,
            s.predicted,
            fmt_opt(s.f1_plus),
            fmt_opt(s.f1_minus)
        ));
    }
    out.push_str(&format!(
        "__summary__,,,{},{}\n",
        fmt_opt(report.f1_plus),
        fmt_opt(report.f1_minus)
    ));
    std::fs::write(path, out)?;
    Ok(())
}

/// Two columns: recall, mean precision.
pub fn write_pr_csv(path: &Path, curve: &PrCurve) -> Result<()> {
    let mut out = String::from("recall,precision\n");
    for (r, p) in curve.recall.iter().zip(&curve.precision) {
        out.push_str(&format!("{r},{p}\n"));
    }
    std::fs::write(path, out)?;
    Ok(())
}
