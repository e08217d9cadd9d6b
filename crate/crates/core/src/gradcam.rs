//! Grad-CAM maps on the last conv block and the benign-vs-adversarial
//! attention-shift metric (L2 distance and global SSIM between maps).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelCheckpoint;
use crate::tensor::{Graph, Tensor};

/// Normalized attention map over the last conv block's spatial grid.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCamMap {
    /// `[h, w]`, values in `[0, 1]`
    pub map: Tensor,
    pub target_class: usize,
    pub sample_id: usize,
    /// The raw map was identically zero, so the normalized map is all zeros.
    pub degenerate: bool,
}

/// Turns activations `[K,h,w]` and their gradients into a normalized map:
/// channel weights are spatial gradient means, map = relu(sum_k w_k a_k) / max.
pub fn cam_from_activations(act: &[f64], grad: &[f64], (k, h, w): (usize, usize, usize)) -> (Vec<f64>, bool) {
    let hw = h * w;
    let mut raw = vec![0.0; hw];
    for c in 0..k {
        let a = &act[c * hw..(c + 1) * hw];
        let g = &grad[c * hw..(c + 1) * hw];
        let weight = g.iter().sum::<f64>() / hw as f64;
        raw.iter_mut().zip(a).for_each(|(r, a)| *r += weight * a);
    }
    raw.iter_mut().for_each(|r| *r = r.max(0.0));
    let max = raw.iter().copied().fold(0.0, f64::max);
    if max > 0.0 {
        raw.iter_mut().for_each(|r| *r /= max);
        (raw, false)
    } else {
        (vec![0.0; hw], true)
    }
}

/// Grad-CAM maps for a batch, one target class per image.
pub fn gradcam_batch(ck: &ModelCheckpoint, images: &Tensor, targets: &[usize], first_id: usize) -> Result<Vec<GradCamMap>> {
    let n = images.batch_len();
    if targets.len() != n {
        return Err(Error::shape("gradcam", format!("{} targets for {n} images", targets.len())));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t >= ck.arch.num_classes) {
        return Err(Error::InvalidArgument(format!("gradcam: target class {bad} out of range")));
    }
    let net = ck.network()?;
    let mut g = Graph::new();
    let x = g.constant(images.clone());
    let vars = net.forward(&mut g, x, false)?;
    let last = *vars.blocks.last().unwrap();
    // constants do not require grad, so give the activations a fresh leaf
    let act = g.value(last).clone();
    let (_, k, h, w) = act.dims4()?;
    let a = g.param(act.clone());
    let feat = g.global_avg_pool(a)?;
    let (fw, fb) = ck.head();
    let fw = g.constant(fw.clone());
    let fb = g.constant(fb.clone());
    let logits = g.linear(feat, fw, fb)?;
    let picked = g.gather(logits, targets)?;
    let s = g.sum(picked);
    g.backward(s)?;
    let grad = g.grad(a).cloned().unwrap_or_else(|| Tensor::zeros(act.shape()));
    (0..n)
        .map(|i| {
            let (map, degenerate) = cam_from_activations(act.item_slice(i), grad.item_slice(i), (k, h, w));
            Ok(GradCamMap { map: Tensor::new(vec![h, w], map)?, target_class: targets[i], sample_id: first_id + i, degenerate })
        })
        .collect()
}

/// Grad-CAM map of one `[C,H,W]` image for `target_class`.
pub fn gradcam(ck: &ModelCheckpoint, image: &Tensor, target_class: usize) -> Result<GradCamMap> {
    let batch = if image.rank() == 3 {
        let mut s = vec![1];
        s.extend_from_slice(image.shape());
        image.clone().reshape(s)?
    } else {
        image.clone()
    };
    let mut maps = gradcam_batch(ck, &batch, &[target_class], 0)?;
    Ok(maps.remove(0))
}

fn check_pair(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape("map comparison", format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// `sqrt(sum_i (a_i - b_i)^2)`.
pub fn l2_distance(a: &Tensor, b: &Tensor) -> Result<f64> {
    check_pair(a, b)?;
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt())
}

pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
/// Dynamic range of normalized maps.
pub const SSIM_RANGE: f64 = 1.0;

/// Single-window SSIM over the whole map with population moments.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    check_pair(a, b)?;
    if a.data() == b.data() {
        return Ok(1.0);
    }
    let c1 = (SSIM_K1 * SSIM_RANGE).powi(2);
    let c2 = (SSIM_K2 * SSIM_RANGE).powi(2);
    let n = a.numel() as f64;
    let (x, y) = (a.data(), b.data());
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let vx = x.iter().map(|v| (v - mx).powi(2)).sum::<f64>() / n;
    let vy = y.iter().map(|v| (v - my).powi(2)).sum::<f64>() / n;
    let cov = x.iter().zip(y).map(|(p, q)| (p - mx) * (q - my)).sum::<f64>() / n;
    Ok(((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2)))
}

/// One benign/adversarial map comparison.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShiftRecord {
    pub sample_id: usize,
    pub attack: String,
    pub l2: f64,
    pub ssim: f64,
    pub benign_class: usize,
    pub adv_class: usize,
    /// Either map was all-zero before normalization.
    pub degenerate: bool,
}

/// Maps for benign and adversarial images, both targeting the benign
/// prediction, compared per sample.
pub fn attention_shift(
    ck: &ModelCheckpoint,
    attack: &str,
    benign: &Tensor,
    adversarial: &Tensor,
    benign_pred: &[usize],
    adv_pred: &[usize],
) -> Result<Vec<ShiftRecord>> {
    const CHUNK: usize = 100;
    let n = benign.batch_len();
    if adversarial.shape() != benign.shape() || benign_pred.len() != n || adv_pred.len() != n {
        return Err(Error::shape("attention_shift", "benign and adversarial batches disagree"));
    }
    let mut out = Vec::with_capacity(n);
    for s in (0..n).step_by(CHUNK) {
        let e = (s + CHUNK).min(n);
        let targets = &benign_pred[s..e];
        let mb = gradcam_batch(ck, &benign.slice_batch(s, e)?, targets, s)?;
        let ma = gradcam_batch(ck, &adversarial.slice_batch(s, e)?, targets, s)?;
        for (i, (b, a)) in mb.iter().zip(&ma).enumerate() {
            out.push(ShiftRecord {
                sample_id: s + i,
                attack: attack.to_string(),
                l2: l2_distance(&b.map, &a.map)?,
                ssim: ssim(&b.map, &a.map)?,
                benign_class: benign_pred[s + i],
                adv_class: adv_pred[s + i],
                degenerate: b.degenerate || a.degenerate,
            });
        }
    }
    Ok(out)
}

/// 2-D histogram over the (l2, ssim) plane.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShiftDensity {
    pub l2_edges: Vec<f64>,
    pub ssim_edges: Vec<f64>,
    /// `counts[i][j]`: l2 bin `i`, ssim bin `j`.
    pub counts: Vec<Vec<usize>>,
    pub mean_l2: f64,
    pub mean_ssim: f64,
    pub total: usize,
}

fn bin(v: f64, lo: f64, hi: f64, bins: usize, empty_range_bin: usize) -> usize {
    if hi <= lo {
        return empty_range_bin;
    }
    (((v - lo) / (hi - lo) * bins as f64).floor() as usize).min(bins - 1)
}

/// Histogram with l2 edges over `[0, max l2]` and ssim edges over `[min ssim, 1]`.
pub fn shift_density(records: &[ShiftRecord], l2_bins: usize, ssim_bins: usize) -> Result<ShiftDensity> {
    if records.is_empty() {
        return Err(Error::InvalidArgument("shift_density: no records".into()));
    }
    if l2_bins == 0 || ssim_bins == 0 {
        return Err(Error::InvalidArgument("shift_density: bin counts must be positive".into()));
    }
    let l2_max = records.iter().map(|r| r.l2).fold(0.0, f64::max);
    let ssim_min = records.iter().map(|r| r.ssim).fold(1.0, f64::min);
    let edges = |lo: f64, hi: f64, n: usize| (0..=n).map(|i| lo + (hi - lo) * i as f64 / n as f64).collect::<Vec<_>>();
    let mut counts = vec![vec![0; ssim_bins]; l2_bins];
    for r in records {
        let i = bin(r.l2, 0.0, l2_max, l2_bins, 0);
        let j = bin(r.ssim, ssim_min, 1.0, ssim_bins, ssim_bins - 1);
        counts[i][j] += 1;
    }
    let n = records.len() as f64;
    Ok(ShiftDensity {
        l2_edges: edges(0.0, l2_max, l2_bins),
        ssim_edges: edges(ssim_min, 1.0, ssim_bins),
        counts,
        mean_l2: records.iter().map(|r| r.l2).sum::<f64>() / n,
        mean_ssim: records.iter().map(|r| r.ssim).sum::<f64>() / n,
        total: records.len(),
    })
}
