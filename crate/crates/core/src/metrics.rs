//! Threshold-free and fixed-TPR detection metrics. ID is the positive class and
//! a higher score means "more ID".

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn nonempty(id: &[f64], ood: &[f64]) -> Result<()> {
    if id.is_empty() || ood.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "metrics need nonempty score sets (id: {}, ood: {})",
            id.len(),
            ood.len()
        )));
    }
    if id.iter().chain(ood).any(|v| v.is_nan()) {
        return Err(Error::InvalidArgument("scores contain NaN".into()));
    }
    Ok(())
}

/// Area under the ROC curve as the Mann-Whitney statistic
/// `P(id > ood) + 0.5 * P(id = ood)`, computed from tie-averaged ranks.
pub fn auroc(id: &[f64], ood: &[f64]) -> Result<f64> {
    nonempty(id, ood)?;
    let mut all: Vec<(f64, bool)> = id.iter().map(|&s| (s, true)).chain(ood.iter().map(|&s| (s, false))).collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        // ranks i+1..=j+1 share their mean
        let avg = (i + j + 2) as f64 / 2.0;
        rank_sum += avg * all[i..=j].iter().filter(|e| e.1).count() as f64;
        i = j + 1;
    }
    let (n, m) = (id.len() as f64, ood.len() as f64);
    Ok((rank_sum - n * (n + 1.0) / 2.0) / (n * m))
}

/// Highest threshold `tau` (an ID score) with `#{id >= tau} / #id >= tpr_target`.
pub fn threshold_at_tpr(id: &[f64], tpr_target: f64) -> Result<f64> {
    if id.is_empty() {
        return Err(Error::InvalidArgument("threshold needs ID scores".into()));
    }
    if !(tpr_target > 0.0 && tpr_target <= 1.0) {
        return Err(Error::InvalidArgument(format!("tpr_target must be in (0, 1], got {tpr_target}")));
    }
    let mut sorted = id.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let n = sorted.len() as f64;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j + 1 < sorted.len() && sorted[j + 1] == sorted[i] {
            j += 1;
        }
        if (j + 1) as f64 / n >= tpr_target {
            return Ok(sorted[i]);
        }
        i = j + 1;
    }
    Ok(sorted[sorted.len() - 1])
}

/// False-positive rate (OOD accepted as ID) at the threshold reaching `tpr_target`.
pub fn fpr_at_tpr(id: &[f64], ood: &[f64], tpr_target: f64) -> Result<f64> {
    nonempty(id, ood)?;
    let tau = threshold_at_tpr(id, tpr_target)?;
    Ok(ood.iter().filter(|&&s| s >= tau).count() as f64 / ood.len() as f64)
}

pub fn fpr95(id: &[f64], ood: &[f64]) -> Result<f64> {
    fpr_at_tpr(id, ood, 0.95)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Positive {
    In,
    Out,
}

/// Average precision: `sum_j (R_j - R_{j-1}) * P_j` over distinct thresholds
/// in descending order. `Out` treats OOD as positive with negated scores.
pub fn aupr(id: &[f64], ood: &[f64], positive: Positive) -> Result<f64> {
    nonempty(id, ood)?;
    let (pos, neg): (Vec<f64>, Vec<f64>) = match positive {
        Positive::In => (id.to_vec(), ood.to_vec()),
        Positive::Out => (ood.iter().map(|v| -v).collect(), id.iter().map(|v| -v).collect()),
    };
    let mut all: Vec<(f64, bool)> = pos.iter().map(|&s| (s, true)).chain(neg.iter().map(|&s| (s, false))).collect();
    all.sort_by(|a, b| b.0.total_cmp(&a.0));
    let total_pos = pos.len() as f64;
    let (mut tp, mut fp) = (0.0, 0.0);
    let mut prev_recall = 0.0;
    let mut area = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        for e in &all[i..=j] {
            if e.1 {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
        }
        let recall = tp / total_pos;
        area += (recall - prev_recall) * tp / (tp + fp);
        prev_recall = recall;
        i = j + 1;
    }
    Ok(area)
}

/// One (detector, OOD source) row of the evaluation table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub detector: String,
    pub ood_source: String,
    pub fpr95: f64,
    pub auroc: f64,
    pub aupr_in: f64,
    pub aupr_out: f64,
    pub n_id: usize,
    pub n_ood: usize,
}

pub fn evaluate(detector: &str, ood_source: &str, id: &[f64], ood: &[f64]) -> Result<EvalResult> {
    Ok(EvalResult {
        detector: detector.into(),
        ood_source: ood_source.into(),
        fpr95: fpr95(id, ood)?,
        auroc: auroc(id, ood)?,
        aupr_in: aupr(id, ood, Positive::In)?,
        aupr_out: aupr(id, ood, Positive::Out)?,
        n_id: id.len(),
        n_ood: ood.len(),
    })
}
