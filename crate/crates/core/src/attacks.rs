//! White-box evasion attacks: FGSM, PGD, masked PGD and DeepFool.
//!
//! All attacks are untargeted. FGSM/PGD/mPGD ascend the cross-entropy loss of
//! the supplied labels; DeepFool walks towards the nearest linearized decision
//! boundary of the clean prediction. Samples are independent, so batches are
//! split into chunks that run in parallel and are merged in input order.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Classifier;
use crate::tensor::{self as tn, Graph, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    Fgsm,
    Pgd,
    Mpgd,
    Deepfool,
}

impl AttackKind {
    pub const ALL: [AttackKind; 4] = [AttackKind::Fgsm, AttackKind::Pgd, AttackKind::Mpgd, AttackKind::Deepfool];

    pub fn name(self) -> &'static str {
        match self {
            AttackKind::Fgsm => "fgsm",
            AttackKind::Pgd => "pgd",
            AttackKind::Mpgd => "mpgd",
            AttackKind::Deepfool => "deepfool",
        }
    }
}

/// Patch geometry for masked PGD. Rows `[row, row+height)`, columns
/// `[col, col+width)`; with no fixed origin each sample draws its own.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchSpec {
    pub height: usize,
    pub width: usize,
    pub origin: Option<(usize, usize)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub kind: AttackKind,
    /// L-infinity budget in pixel units (fgsm, pgd).
    pub epsilon: f64,
    pub steps: usize,
    pub step_size: f64,
    pub random_start: bool,
    pub patch: PatchSpec,
    pub overshoot: f64,
    pub max_iters: usize,
    pub seed: u64,
}

pub const CIFAR_EPSILON: f64 = 8.0 / 255.0;

impl AttackConfig {
    fn base(kind: AttackKind) -> Self {
        AttackConfig {
            kind,
            epsilon: CIFAR_EPSILON,
            steps: 20,
            step_size: 2.5 * CIFAR_EPSILON / 20.0,
            random_start: true,
            patch: PatchSpec { height: 8, width: 8, origin: None },
            overshoot: 0.02,
            max_iters: 50,
            seed: 0,
        }
    }

    pub fn fgsm(epsilon: f64) -> Self {
        AttackConfig { epsilon, steps: 1, step_size: epsilon, random_start: false, ..Self::base(AttackKind::Fgsm) }
    }

    /// `steps` iterations with step size `2.5 * epsilon / steps` and a random start.
    pub fn pgd(epsilon: f64, steps: usize) -> Self {
        AttackConfig { epsilon, steps, step_size: 2.5 * epsilon / steps as f64, ..Self::base(AttackKind::Pgd) }
    }

    /// 8x8 patch at a random location, 20 steps of 4/255, no epsilon ball.
    pub fn mpgd() -> Self {
        AttackConfig { step_size: 4.0 / 255.0, random_start: false, ..Self::base(AttackKind::Mpgd) }
    }

    pub fn deepfool() -> Self {
        Self::base(AttackKind::Deepfool)
    }

    pub fn default_for(kind: AttackKind) -> Self {
        match kind {
            AttackKind::Fgsm => Self::fgsm(CIFAR_EPSILON),
            AttackKind::Pgd => Self::pgd(CIFAR_EPSILON, 20),
            AttackKind::Mpgd => Self::mpgd(),
            AttackKind::Deepfool => Self::deepfool(),
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config { field: format!("attack.{}", self.kind.name()), msg });
        match self.kind {
            AttackKind::Fgsm | AttackKind::Pgd => {
                if !(self.epsilon > 0.0) {
                    return bad(format!("epsilon must be > 0, got {}", self.epsilon));
                }
                if self.kind == AttackKind::Pgd {
                    if self.steps == 0 {
                        return bad("steps must be >= 1".into());
                    }
                    if !(self.step_size > 0.0 && self.step_size <= self.epsilon) {
                        return bad(format!("need 0 < step_size <= epsilon, got {}", self.step_size));
                    }
                }
            }
            AttackKind::Mpgd => {
                if self.steps == 0 || !(self.step_size > 0.0) {
                    return bad("mpgd needs steps >= 1 and step_size > 0".into());
                }
                if self.patch.height == 0 || self.patch.width == 0 {
                    return bad("patch must be nonempty".into());
                }
            }
            AttackKind::Deepfool => {
                if self.max_iters == 0 || !(self.overshoot >= 0.0) {
                    return bad("deepfool needs max_iters >= 1 and overshoot >= 0".into());
                }
            }
        }
        Ok(())
    }
}

/// Adversarial batch plus per-sample bookkeeping.
#[derive(Clone, Debug, PartialEq)]
pub struct AttackResult {
    pub kind: AttackKind,
    pub adversarial: Tensor,
    pub labels: Vec<usize>,
    pub clean_pred: Vec<usize>,
    pub adv_pred: Vec<usize>,
    /// Prediction flipped away from the clean prediction.
    pub success: Vec<bool>,
    /// DeepFool reached a flip within `max_iters`; always true for the others.
    pub converged: Vec<bool>,
    pub linf: Vec<f64>,
    pub l2: Vec<f64>,
    /// Patch origins `(row, col)` used by masked PGD.
    pub patches: Vec<Option<(usize, usize)>>,
    pub asr: f64,
}

impl AttackResult {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Success rate over samples the clean model classified correctly.
pub fn asr(result: &AttackResult) -> Result<f64> {
    success_rate(&result.labels, &result.clean_pred, &result.success)
}

pub fn success_rate(labels: &[usize], clean_pred: &[usize], success: &[bool]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::InvalidArgument("asr: empty batch".into()));
    }
    let (mut hits, mut total) = (0usize, 0usize);
    for ((l, p), s) in labels.iter().zip(clean_pred).zip(success) {
        if l == p {
            total += 1;
            hits += usize::from(*s);
        }
    }
    if total == 0 {
        return Err(Error::InvalidArgument("asr: no correctly classified clean samples".into()));
    }
    Ok(hits as f64 / total as f64)
}

/// `sign` with `sign(0) = 0`.
pub fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Gradient of the summed per-sample cross-entropy w.r.t. the input, plus logits.
pub fn loss_input_grad(model: &dyn Classifier, images: &Tensor, labels: &[usize]) -> Result<(Tensor, Tensor)> {
    let mut g = Graph::new();
    let x = g.param(images.clone());
    let logits = model.logits(&mut g, x)?;
    let ce = g.cross_entropy(logits, labels)?;
    // sum rather than mean so each sample sees its own loss gradient
    let loss = g.scale(ce, labels.len() as f64);
    g.backward(loss)?;
    let grad = g.grad(x).cloned().unwrap_or_else(|| Tensor::zeros(images.shape()));
    Ok((grad, g.value(logits).clone()))
}

const CHUNK: usize = 50;

fn sample_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

struct Chunk {
    adversarial: Tensor,
    converged: Vec<bool>,
    patches: Vec<Option<(usize, usize)>>,
}

/// Runs the attack named by `config.kind`.
pub fn run_attack(model: &dyn Classifier, images: &Tensor, labels: &[usize], config: &AttackConfig) -> Result<AttackResult> {
    config.validate()?;
    let n = images.batch_len();
    if n == 0 || labels.len() != n {
        return Err(Error::shape("attack", format!("{} labels for {n} images", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= model.num_classes()) {
        return Err(Error::InvalidArgument(format!("label {bad} out of range")));
    }
    if config.kind == AttackKind::Mpgd {
        let (_, _, h, w) = images.dims4()?;
        let p = &config.patch;
        let fits = match p.origin {
            Some((r, c)) => r + p.height <= h && c + p.width <= w,
            None => p.height <= h && p.width <= w,
        };
        if !fits {
            return Err(Error::InvalidArgument(format!("patch {p:?} does not fit a {h}x{w} image")));
        }
    }
    let ranges: Vec<(usize, usize)> = (0..n).step_by(CHUNK).map(|s| (s, (s + CHUNK).min(n))).collect();
    let chunks = ranges
        .par_iter()
        .map(|&(s, e)| {
            let x = images.slice_batch(s, e)?;
            let y = &labels[s..e];
            match config.kind {
                AttackKind::Fgsm => fgsm_chunk(model, &x, y, config),
                AttackKind::Pgd => pgd_chunk(model, &x, y, config, s),
                AttackKind::Mpgd => mpgd_chunk(model, &x, y, config, s),
                AttackKind::Deepfool => deepfool_chunk(model, &x, y, config),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let adversarial = Tensor::concat(&chunks.iter().map(|c| c.adversarial.clone()).collect::<Vec<_>>())?;
    let converged = chunks.iter().flat_map(|c| c.converged.iter().copied()).collect();
    let patches = chunks.iter().flat_map(|c| c.patches.iter().copied()).collect();
    finish(model, config.kind, images, adversarial, labels, converged, patches)
}

fn finish(
    model: &dyn Classifier,
    kind: AttackKind,
    clean: &Tensor,
    adversarial: Tensor,
    labels: &[usize],
    converged: Vec<bool>,
    patches: Vec<Option<(usize, usize)>>,
) -> Result<AttackResult> {
    let clean_pred = predict_chunked(model, clean)?;
    let adv_pred = predict_chunked(model, &adversarial)?;
    let success: Vec<bool> = clean_pred.iter().zip(&adv_pred).map(|(a, b)| a != b).collect();
    let mut linf = Vec::with_capacity(labels.len());
    let mut l2 = Vec::with_capacity(labels.len());
    for i in 0..labels.len() {
        let (a, b) = (clean.item_slice(i), adversarial.item_slice(i));
        linf.push(a.iter().zip(b).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max));
        l2.push(a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt());
    }
    let asr = success_rate(labels, &clean_pred, &success).unwrap_or(0.0);
    Ok(AttackResult {
        kind,
        adversarial,
        labels: labels.to_vec(),
        clean_pred,
        adv_pred,
        success,
        converged,
        linf,
        l2,
        patches,
        asr,
    })
}

fn predict_chunked(model: &dyn Classifier, images: &Tensor) -> Result<Vec<usize>> {
    let n = images.batch_len();
    let mut out = Vec::with_capacity(n);
    for s in (0..n).step_by(CHUNK) {
        out.extend(model.predict(&images.slice_batch(s, (s + CHUNK).min(n))?)?);
    }
    Ok(out)
}

fn plain(adversarial: Tensor) -> Chunk {
    let n = adversarial.batch_len();
    Chunk { adversarial, converged: vec![true; n], patches: vec![None; n] }
}

/// `x' = clip(x + epsilon * sign(grad J))`.
pub fn fgsm(model: &dyn Classifier, images: &Tensor, labels: &[usize], config: &AttackConfig) -> Result<AttackResult> {
    run_attack(model, images, labels, &AttackConfig { kind: AttackKind::Fgsm, ..config.clone() })
}

pub fn pgd(model: &dyn Classifier, images: &Tensor, labels: &[usize], config: &AttackConfig) -> Result<AttackResult> {
    run_attack(model, images, labels, &AttackConfig { kind: AttackKind::Pgd, ..config.clone() })
}

pub fn mpgd(model: &dyn Classifier, images: &Tensor, labels: &[usize], config: &AttackConfig) -> Result<AttackResult> {
    run_attack(model, images, labels, &AttackConfig { kind: AttackKind::Mpgd, ..config.clone() })
}

/// DeepFool; `labels` only mark already-misclassified samples (left untouched)
/// and the ASR denominator.
pub fn deepfool(model: &dyn Classifier, images: &Tensor, labels: &[usize], config: &AttackConfig) -> Result<AttackResult> {
    run_attack(model, images, labels, &AttackConfig { kind: AttackKind::Deepfool, ..config.clone() })
}

fn fgsm_chunk(model: &dyn Classifier, x: &Tensor, y: &[usize], c: &AttackConfig) -> Result<Chunk> {
    let (lo, hi) = model.input_range();
    let (grad, _) = loss_input_grad(model, x, y)?;
    let data = x.data().iter().zip(grad.data()).map(|(&v, &g)| (v + c.epsilon * sign(g)).clamp(lo, hi)).collect();
    Ok(plain(Tensor::new(x.shape().to_vec(), data)?))
}

fn pgd_chunk(model: &dyn Classifier, x: &Tensor, y: &[usize], c: &AttackConfig, offset: usize) -> Result<Chunk> {
    let (lo, hi) = model.input_range();
    let eps = c.epsilon;
    let mut adv = x.clone();
    if c.random_start {
        let per = x.numel() / x.batch_len();
        for (i, (a, o)) in adv.data_mut().chunks_mut(per).zip(x.data().chunks(per)).enumerate() {
            let mut rng = sample_rng(c.seed, offset + i);
            for (a, &o) in a.iter_mut().zip(o) {
                *a = (o + rng.gen_range(-eps..=eps)).clamp(lo, hi);
            }
        }
    }
    for _ in 0..c.steps {
        let (grad, _) = loss_input_grad(model, &adv, y)?;
        for ((a, &o), &g) in adv.data_mut().iter_mut().zip(x.data()).zip(grad.data()) {
            let stepped = (*a + c.step_size * sign(g)).clamp(lo, hi);
            *a = stepped.clamp(o - eps, o + eps);
        }
    }
    Ok(plain(adv))
}

fn mpgd_chunk(model: &dyn Classifier, x: &Tensor, y: &[usize], c: &AttackConfig, offset: usize) -> Result<Chunk> {
    let (lo, hi) = model.input_range();
    let (n, ch, h, w) = x.dims4()?;
    let p = &c.patch;
    let origins: Vec<(usize, usize)> = (0..n)
        .map(|i| {
            p.origin.unwrap_or_else(|| {
                let mut rng = sample_rng(c.seed, offset + i);
                (rng.gen_range(0..=h - p.height), rng.gen_range(0..=w - p.width))
            })
        })
        .collect();
    let mut adv = x.clone();
    for _ in 0..c.steps {
        let (grad, _) = loss_input_grad(model, &adv, y)?;
        let gd = grad.data();
        let ad = adv.data_mut();
        for (i, &(r0, c0)) in origins.iter().enumerate() {
            for chn in 0..ch {
                for r in r0..r0 + p.height {
                    let base = ((i * ch + chn) * h + r) * w;
                    for idx in base + c0..base + c0 + p.width {
                        ad[idx] = (ad[idx] + c.step_size * sign(gd[idx])).clamp(lo, hi);
                    }
                }
            }
        }
    }
    let n = origins.len();
    Ok(Chunk { adversarial: adv, converged: vec![true; n], patches: origins.into_iter().map(Some).collect() })
}

/// Per-class input gradients of the logits: `grads[k]` is `d logit_k / d x`.
fn logit_input_grads(model: &dyn Classifier, x: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
    let n = x.batch_len();
    let mut g = Graph::new();
    let xv = g.param(x.clone());
    let logits = model.logits(&mut g, xv)?;
    let c = g.value(logits).dims2()?.1;
    let mut grads = Vec::with_capacity(c);
    for k in 0..c {
        let picked = g.gather(logits, &vec![k; n])?;
        let s = g.sum(picked);
        g.reset_grads();
        g.backward(s)?;
        grads.push(g.grad(xv).cloned().unwrap_or_else(|| Tensor::zeros(x.shape())));
    }
    Ok((g.value(logits).clone(), grads))
}

fn deepfool_chunk(model: &dyn Classifier, x: &Tensor, y: &[usize], c: &AttackConfig) -> Result<Chunk> {
    let (lo, hi) = model.input_range();
    let n = x.batch_len();
    let per = x.numel() / n;
    let clean_pred = model.predict(x)?;
    let mut r_tot = vec![0.0; x.numel()];
    let mut adv = x.clone();
    // samples already misclassified w.r.t. their label are left untouched
    let mut active: Vec<bool> = clean_pred.iter().zip(y).map(|(p, l)| p == l).collect();
    let mut converged: Vec<bool> = active.iter().map(|a| !a).collect();
    for _ in 0..c.max_iters {
        let idx: Vec<usize> = (0..n).filter(|&i| active[i]).collect();
        if idx.is_empty() {
            break;
        }
        let cur = adv.select(&idx)?;
        let (logits, grads) = logit_input_grads(model, &cur)?;
        for (row, &i) in idx.iter().enumerate() {
            let f = &logits.item_slice(row);
            let k0 = clean_pred[i];
            if tn::argmax(f) != k0 {
                active[i] = false;
                converged[i] = true;
                continue;
            }
            let g0 = grads[k0].item_slice(row);
            let mut best: Option<(f64, usize)> = None;
            for (k, gk) in grads.iter().enumerate() {
                if k == k0 {
                    continue;
                }
                let gk = gk.item_slice(row);
                let wn: f64 = gk.iter().zip(g0).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
                if wn == 0.0 {
                    continue;
                }
                let dist = (f[k] - f[k0]).abs() / wn;
                if best.map_or(true, |(d, _)| dist < d) {
                    best = Some((dist, k));
                }
            }
            let Some((_, l)) = best else {
                // flat logits: no boundary direction to follow
                active[i] = false;
                continue;
            };
            let gl = grads[l].item_slice(row);
            let w: Vec<f64> = gl.iter().zip(g0).map(|(a, b)| a - b).collect();
            let wn2: f64 = w.iter().map(|v| v * v).sum();
            let step = (f[l] - f[k0]).abs() / wn2;
            let r = &mut r_tot[i * per..(i + 1) * per];
            r.iter_mut().zip(&w).for_each(|(r, w)| *r += step * w);
            let a = &mut adv.data_mut()[i * per..(i + 1) * per];
            for ((a, &o), &r) in a.iter_mut().zip(x.item_slice(i)).zip(r.iter()) {
                *a = (o + (1.0 + c.overshoot) * r).clamp(lo, hi);
            }
        }
    }
    // the last update may have flipped samples without a re-check
    let idx: Vec<usize> = (0..n).filter(|&i| active[i]).collect();
    if !idx.is_empty() {
        let preds = model.predict(&adv.select(&idx)?)?;
        for (&i, p) in idx.iter().zip(preds) {
            converged[i] = p != clean_pred[i];
        }
    }
    Ok(Chunk { adversarial: adv, converged, patches: vec![None; n] })
}
