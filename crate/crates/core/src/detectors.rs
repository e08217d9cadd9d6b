//! Post-hoc OOD detectors over a frozen classifier.
//!
//! Every detector is fitted from ID training taps ([`IdStats`]) and produces
//! one score per sample, oriented so that a higher score means "more ID".
//! A sample is declared ID when its score reaches the threshold `tau`, which
//! is calibrated to 95% TPR on ID test scores.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::metrics;
use crate::model::{forward_with_taps, Classifier, ForwardTaps, ModelCheckpoint};
use crate::tensor::aotb::{self, TensorMap};
use crate::tensor::{self as tn, Graph, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectorKind {
    Msp,
    Mls,
    Ebo,
    Odin,
    Mds,
    Rmds,
    Gram,
    React,
    Klm,
    Vim,
    Knn,
    Dice,
    Ash,
    Scale,
    Gen,
    Nnguide,
}

impl DetectorKind {
    pub const ALL: [DetectorKind; 16] = [
        DetectorKind::Msp,
        DetectorKind::Mls,
        DetectorKind::Ebo,
        DetectorKind::Odin,
        DetectorKind::Mds,
        DetectorKind::Rmds,
        DetectorKind::Gram,
        DetectorKind::React,
        DetectorKind::Klm,
        DetectorKind::Vim,
        DetectorKind::Knn,
        DetectorKind::Dice,
        DetectorKind::Ash,
        DetectorKind::Scale,
        DetectorKind::Gen,
        DetectorKind::Nnguide,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DetectorKind::Msp => "msp",
            DetectorKind::Mls => "mls",
            DetectorKind::Ebo => "ebo",
            DetectorKind::Odin => "odin",
            DetectorKind::Mds => "mds",
            DetectorKind::Rmds => "rmds",
            DetectorKind::Gram => "gram",
            DetectorKind::React => "react",
            DetectorKind::Klm => "klm",
            DetectorKind::Vim => "vim",
            DetectorKind::Knn => "knn",
            DetectorKind::Dice => "dice",
            DetectorKind::Ash => "ash",
            DetectorKind::Scale => "scale",
            DetectorKind::Gen => "gen",
            DetectorKind::Nnguide => "nnguide",
        }
    }

    pub fn valid_names() -> String {
        Self::ALL.iter().map(|k| k.name()).collect::<Vec<_>>().join(", ")
    }
}

impl fmt::Display for DetectorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DetectorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s).ok_or_else(|| Error::Config {
            field: "detector".into(),
            msg: format!("unknown detector `{s}`; valid kinds: {}", Self::valid_names()),
        })
    }
}

/// Covariance regularizer added to the diagonal.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ridge {
    /// `lambda = factor * trace(cov) / d`
    Relative(f64),
    Absolute(f64),
}

/// Hyperparameters of all detectors; each kind reads only its own fields.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorParams {
    pub energy_temperature: f64,
    pub odin_temperature: f64,
    pub odin_epsilon: f64,
    pub ridge: Ridge,
    /// Defaults to `max(5, ceil(0.001 * bank size))`.
    pub knn_k: Option<usize>,
    /// Clip at this percentile of ID train activations; 100 or more disables clipping.
    pub react_percentile: f64,
    pub dice_sparsity: f64,
    pub ash_percentile: f64,
    pub scale_percentile: f64,
    /// Principal subspace dimension; defaults to `ceil(d / 2)`.
    pub vim_dim: Option<usize>,
    pub gram_orders: Vec<u32>,
    pub gen_gamma: f64,
    /// Defaults to `min(C, 10)`.
    pub gen_top_m: Option<usize>,
    pub nnguide_k: Option<usize>,
}

impl Default for DetectorParams {
    fn default() -> Self {
        DetectorParams {
            energy_temperature: 1.0,
            odin_temperature: 1000.0,
            odin_epsilon: 0.0014,
            ridge: Ridge::Relative(1e-3),
            knn_k: None,
            react_percentile: 90.0,
            dice_sparsity: 70.0,
            ash_percentile: 90.0,
            scale_percentile: 85.0,
            vim_dim: None,
            gram_orders: vec![1, 2],
            gen_gamma: 0.1,
            gen_top_m: None,
            nnguide_k: None,
        }
    }
}

/// ID training taps with labels and, when available, the linear head.
#[derive(Clone, Debug)]
pub struct IdStats {
    pub taps: ForwardTaps,
    pub labels: Vec<usize>,
    /// `(weight [C,D], bias [C])`
    pub head: Option<(Tensor, Tensor)>,
}

impl IdStats {
    pub fn new(taps: ForwardTaps, labels: Vec<usize>, head: Option<(Tensor, Tensor)>) -> Result<Self> {
        if taps.is_empty() || labels.len() != taps.len() {
            return Err(Error::shape("id_stats", format!("{} labels for {} tap rows", labels.len(), taps.len())));
        }
        let c = taps.num_classes();
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::InvalidArgument(format!("label {bad} outside [0, {c})")));
        }
        if let Some((w, b)) = &head {
            let d = taps.features.shape()[1];
            if w.shape() != [c, d] || b.shape() != [c] {
                return Err(Error::shape("id_stats", format!("head {:?}/{:?} vs C={c}, D={d}", w.shape(), b.shape())));
            }
        }
        Ok(IdStats { taps, labels, head })
    }

    pub fn from_model(ck: &ModelCheckpoint, train: &LabeledDataset) -> Result<Self> {
        let taps = forward_with_taps(ck, &train.images)?;
        let (w, b) = ck.head();
        IdStats::new(taps, train.labels.clone(), Some((w.clone(), b.clone())))
    }

    pub fn feature_dim(&self) -> usize {
        self.taps.features.shape()[1]
    }

    pub fn num_classes(&self) -> usize {
        self.taps.num_classes()
    }

    fn head(&self, kind: DetectorKind) -> Result<(Tensor, Tensor)> {
        self.head.clone().ok_or(Error::MissingTap { detector: kind.name().into(), tap: "head" })
    }
}

/// Fitted artifacts, one variant per family.
#[derive(Clone, Debug, PartialEq)]
pub enum Fitted {
    Stateless,
    Mahalanobis { means: Tensor, precision: Tensor },
    Relative { means: Tensor, precision: Tensor, bg_mean: Tensor, bg_precision: Tensor },
    /// Bounds per (block, order), each `[C, entries]`.
    Gram { mins: Vec<Tensor>, maxs: Vec<Tensor> },
    /// Reshaped head: `clip` holds per-unit ReAct thresholds (`+inf` = none),
    /// `pruned` counts DICE-masked weights.
    Shaped { weight: Tensor, bias: Tensor, clip: Tensor, pruned: usize },
    Templates(Tensor),
    Vim { offset: Tensor, residual: Option<Tensor>, alpha: f64 },
    Bank { bank: Tensor, k: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct DetectorState {
    pub kind: DetectorKind,
    pub params: DetectorParams,
    pub fitted: Fitted,
    pub threshold: Option<f64>,
}

/// Extra inputs for detectors that re-run the model (ODIN).
#[derive(Clone, Copy, Default)]
pub struct ScoreContext<'a> {
    pub model: Option<&'a dyn Classifier>,
    pub images: Option<&'a Tensor>,
}

/// Linear-interpolated percentile of `values` (`p` in `[0, 100]`).
pub fn percentile(values: &[f64], p: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = (p / 100.0).clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let (lo, hi) = (rank.floor() as usize, rank.ceil() as usize);
    v[lo] + (v[hi] - v[lo]) * (rank - lo as f64)
}

pub fn energy(logits: &[f64], t: f64) -> f64 {
    if t == 1.0 {
        return tn::logsumexp(logits);
    }
    let scaled: Vec<f64> = logits.iter().map(|v| v / t).collect();
    t * tn::logsumexp(&scaled)
}

fn from_dmatrix(m: &DMatrix<f64>) -> Tensor {
    let (r, c) = m.shape();
    let mut data = Vec::with_capacity(r * c);
    for i in 0..r {
        for j in 0..c {
            data.push(m[(i, j)]);
        }
    }
    Tensor::new(vec![r, c], data).unwrap()
}

fn class_means(stats: &IdStats, kind: DetectorKind) -> Result<Vec<Vec<f64>>> {
    let d = stats.feature_dim();
    let c = stats.num_classes();
    let mut sums = vec![vec![0.0; d]; c];
    let mut counts = vec![0usize; c];
    for (row, &l) in stats.taps.features.rows().zip(&stats.labels) {
        sums[l].iter_mut().zip(row).for_each(|(s, v)| *s += v);
        counts[l] += 1;
    }
    if let Some(k) = counts.iter().position(|&n| n == 0) {
        return Err(Error::InvalidArgument(format!("{kind}: class {k} has no training samples")));
    }
    Ok(sums.into_iter().zip(counts).map(|(s, n)| s.into_iter().map(|v| v / n as f64).collect()).collect())
}

/// Scatter `(1/N) sum (f - center(f)) (f - center(f))^T` as a matrix.
fn scatter<'a>(rows: impl Iterator<Item = (&'a [f64], &'a [f64])>, d: usize) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(d, d);
    let mut n = 0usize;
    for (f, mu) in rows {
        let diff = DVector::from_iterator(d, f.iter().zip(mu).map(|(a, b)| a - b));
        m.syger(1.0, &diff, &diff, 1.0);
        n += 1;
    }
    // syger fills the lower triangle only
    m.fill_upper_triangle_with_lower_triangle();
    m / n as f64
}

fn regularized_precision(mut cov: DMatrix<f64>, ridge: Ridge, kind: DetectorKind) -> Result<Tensor> {
    let d = cov.nrows();
    let lambda = match ridge {
        Ridge::Relative(f) => f * cov.trace() / d as f64,
        Ridge::Absolute(v) => v,
    };
    for i in 0..d {
        cov[(i, i)] += lambda;
    }
    let chol = cov.cholesky().ok_or_else(|| {
        Error::SingularCovariance(format!(
            "{kind}: covariance is singular after a ridge of {lambda:e}; set `ridge` to an absolute value such as {{\"absolute\": 1e-3}}"
        ))
    })?;
    Ok(from_dmatrix(&chol.inverse()))
}

fn mahalanobis(f: &[f64], mu: &[f64], precision: &Tensor) -> f64 {
    let d = f.len();
    let diff: Vec<f64> = f.iter().zip(mu).map(|(a, b)| a - b).collect();
    let p = precision.data();
    let mut acc = 0.0;
    for i in 0..d {
        let row = &p[i * d..(i + 1) * d];
        acc += diff[i] * row.iter().zip(&diff).map(|(a, b)| a * b).sum::<f64>();
    }
    acc
}

fn unit(row: &[f64]) -> Vec<f64> {
    let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n > 0.0 {
        row.iter().map(|v| v / n).collect()
    } else {
        row.to_vec()
    }
}

fn default_knn_k(n: usize) -> usize {
    5usize.max((0.001 * n as f64).ceil() as usize)
}

/// Gram features of one `[K,H,W]` activation block: upper triangle of
/// `sign(G) |G|^(1/p)` with `G = F^p (F^p)^T`.
pub fn gram_features(block: &[f64], channels: usize, order: u32) -> Vec<f64> {
    let hw = block.len() / channels;
    let powered: Vec<f64> = block.iter().map(|v| v.powi(order as i32)).collect();
    let mut out = Vec::with_capacity(channels * (channels + 1) / 2);
    let inv = 1.0 / order as f64;
    for i in 0..channels {
        let a = &powered[i * hw..(i + 1) * hw];
        for j in i..channels {
            let b = &powered[j * hw..(j + 1) * hw];
            let g: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            out.push(g.signum() * g.abs().powf(inv));
        }
    }
    out
}

fn shaped_energy(weight: &Tensor, bias: &Tensor, features: &[f64], t: f64) -> f64 {
    let (c, d) = weight.dims2().unwrap();
    let w = weight.data();
    let logits: Vec<f64> =
        (0..c).map(|k| bias.data()[k] + w[k * d..(k + 1) * d].iter().zip(features).map(|(a, b)| a * b).sum::<f64>()).collect();
    energy(&logits, t)
}

/// Fits `kind` on ID training statistics.
pub fn fit(kind: DetectorKind, stats: &IdStats, params: &DetectorParams) -> Result<DetectorState> {
    let d = stats.feature_dim();
    let n = stats.taps.len();
    let fitted = match kind {
        DetectorKind::Msp | DetectorKind::Mls | DetectorKind::Ebo | DetectorKind::Odin | DetectorKind::Gen => {
            Fitted::Stateless
        }
        DetectorKind::Mds | DetectorKind::Rmds => {
            let means = class_means(stats, kind)?;
            let within = scatter(stats.taps.features.rows().zip(stats.labels.iter().map(|&l| means[l].as_slice())), d);
            let precision = regularized_precision(within, params.ridge, kind)?;
            let means_t = Tensor::from_rows(&means)?;
            if kind == DetectorKind::Mds {
                Fitted::Mahalanobis { means: means_t, precision }
            } else {
                let mut mu0 = vec![0.0; d];
                for row in stats.taps.features.rows() {
                    mu0.iter_mut().zip(row).for_each(|(m, v)| *m += v / n as f64);
                }
                let total = scatter(stats.taps.features.rows().map(|r| (r, mu0.as_slice())), d);
                let bg_precision = regularized_precision(total, params.ridge, kind)?;
                Fitted::Relative { means: means_t, precision, bg_mean: Tensor::new(vec![d], mu0)?, bg_precision }
            }
        }
        DetectorKind::Gram => {
            if stats.taps.blocks.is_empty() {
                return Err(Error::MissingTap { detector: kind.name().into(), tap: "block activations" });
            }
            let c = stats.num_classes();
            let mut mins = Vec::new();
            let mut maxs = Vec::new();
            for block in &stats.taps.blocks {
                let ch = block.shape()[1];
                for &p in &params.gram_orders {
                    let e = ch * (ch + 1) / 2;
                    let mut lo = vec![f64::INFINITY; c * e];
                    let mut hi = vec![f64::NEG_INFINITY; c * e];
                    for (i, &l) in stats.labels.iter().enumerate() {
                        let g = gram_features(block.item_slice(i), ch, p);
                        for (j, v) in g.into_iter().enumerate() {
                            lo[l * e + j] = lo[l * e + j].min(v);
                            hi[l * e + j] = hi[l * e + j].max(v);
                        }
                    }
                    if lo.iter().any(|v| v.is_infinite()) {
                        return Err(Error::InvalidArgument("gram: a class has no training samples".into()));
                    }
                    mins.push(Tensor::new(vec![c, e], lo)?);
                    maxs.push(Tensor::new(vec![c, e], hi)?);
                }
            }
            Fitted::Gram { mins, maxs }
        }
        DetectorKind::React => {
            let (weight, bias) = stats.head(kind)?;
            let clip: Vec<f64> = if params.react_percentile >= 100.0 {
                vec![f64::INFINITY; d]
            } else {
                let f = stats.taps.features.data();
                (0..d)
                    .map(|j| {
                        let unit: Vec<f64> = f.iter().skip(j).step_by(d).copied().collect();
                        percentile(&unit, params.react_percentile)
                    })
                    .collect()
            };
            Fitted::Shaped { weight, bias, clip: Tensor::new(vec![d], clip)?, pruned: 0 }
        }
        DetectorKind::Ash | DetectorKind::Scale => {
            let (weight, bias) = stats.head(kind)?;
            Fitted::Shaped { weight, bias, clip: Tensor::full(&[d], f64::INFINITY), pruned: 0 }
        }
        DetectorKind::Dice => {
            let (weight, bias) = stats.head(kind)?;
            let mut mean_f = vec![0.0; d];
            for row in stats.taps.features.rows() {
                mean_f.iter_mut().zip(row).for_each(|(m, v)| *m += v / n as f64);
            }
            let contrib: Vec<f64> = weight.data().iter().enumerate().map(|(i, w)| w * mean_f[i % d]).collect();
            let mut order: Vec<usize> = (0..contrib.len()).collect();
            order.sort_by(|&a, &b| contrib[a].total_cmp(&contrib[b]).then(a.cmp(&b)));
            let pruned = ((params.dice_sparsity / 100.0).clamp(0.0, 1.0) * contrib.len() as f64).floor() as usize;
            let mut masked = weight.clone();
            for &i in &order[..pruned] {
                masked.data_mut()[i] = 0.0;
            }
            Fitted::Shaped { weight: masked, bias, clip: Tensor::full(&[d], f64::INFINITY), pruned }
        }
        DetectorKind::Klm => {
            let c = stats.num_classes();
            let mut t = vec![vec![0.0; c]; c];
            let mut counts = vec![0usize; c];
            for (row, &l) in stats.taps.probs.rows().zip(&stats.labels) {
                t[l].iter_mut().zip(row).for_each(|(a, b)| *a += b);
                counts[l] += 1;
            }
            let rows: Vec<Vec<f64>> = t
                .into_iter()
                .zip(&counts)
                .filter(|(_, &n)| n > 0)
                .map(|(r, &n)| r.into_iter().map(|v| v / n as f64).collect())
                .collect();
            Fitted::Templates(Tensor::from_rows(&rows)?)
        }
        DetectorKind::Vim => {
            let dim = params.vim_dim.unwrap_or(d.div_ceil(2));
            if dim == 0 || dim > d {
                return Err(Error::InvalidArgument(format!("vim: principal dimension {dim} outside [1, {d}]")));
            }
            let mut u = vec![0.0; d];
            for row in stats.taps.features.rows() {
                u.iter_mut().zip(row).for_each(|(m, v)| *m += v / n as f64);
            }
            let offset = Tensor::new(vec![d], u.clone())?;
            if dim == d {
                Fitted::Vim { offset, residual: None, alpha: 0.0 }
            } else {
                let cov = scatter(stats.taps.features.rows().map(|r| (r, u.as_slice())), d);
                let eig = SymmetricEigen::new(cov);
                let mut idx: Vec<usize> = (0..d).collect();
                idx.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]).then(a.cmp(&b)));
                let r = d - dim;
                // residual basis as rows: [r, d]
                let mut basis = Vec::with_capacity(r * d);
                for &j in &idx[..r] {
                    basis.extend(eig.eigenvectors.column(j).iter().copied());
                }
                let residual = Tensor::new(vec![r, d], basis)?;
                let mut norm_sum = 0.0;
                let mut logit_sum = 0.0;
                for (f, l) in stats.taps.features.rows().zip(stats.taps.logits.rows()) {
                    norm_sum += residual_norm(&residual, &u, f);
                    logit_sum += l.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                }
                let alpha = if norm_sum > 0.0 { logit_sum / norm_sum } else { 0.0 };
                Fitted::Vim { offset, residual: Some(residual), alpha }
            }
        }
        DetectorKind::Knn => {
            let rows: Vec<Vec<f64>> = stats.taps.features.rows().map(unit).collect();
            let k = params.knn_k.unwrap_or_else(|| default_knn_k(n)).clamp(1, n);
            Fitted::Bank { bank: Tensor::from_rows(&rows)?, k }
        }
        DetectorKind::Nnguide => {
            let t = params.energy_temperature;
            let rows: Vec<Vec<f64>> = stats
                .taps
                .features
                .rows()
                .zip(stats.taps.logits.rows())
                .map(|(f, l)| {
                    let e = energy(l, t);
                    unit(f).into_iter().map(|v| v * e).collect()
                })
                .collect();
            let k = params.nnguide_k.unwrap_or(10).clamp(1, n);
            Fitted::Bank { bank: Tensor::from_rows(&rows)?, k }
        }
    };
    Ok(DetectorState { kind, params: params.clone(), fitted, threshold: None })
}

fn residual_norm(residual: &Tensor, offset: &[f64], f: &[f64]) -> f64 {
    let centered: Vec<f64> = f.iter().zip(offset).map(|(a, b)| a - b).collect();
    residual.rows().map(|b| b.iter().zip(&centered).map(|(x, y)| x * y).sum::<f64>().powi(2)).sum::<f64>().sqrt()
}

impl DetectorState {
    fn mismatch(&self) -> Error {
        Error::InvalidArgument(format!("detector {} holds incompatible fitted state", self.kind))
    }

    /// Scores every tap row; higher means more ID.
    pub fn score(&self, taps: &ForwardTaps, ctx: &ScoreContext<'_>) -> Result<Vec<f64>> {
        let p = &self.params;
        let t = p.energy_temperature;
        let logits = || taps.logits.rows();
        let features = || taps.features.rows();
        let scores = match (&self.kind, &self.fitted) {
            (DetectorKind::Msp, Fitted::Stateless) => {
                taps.probs.rows().map(|r| r.iter().copied().fold(f64::NEG_INFINITY, f64::max)).collect()
            }
            (DetectorKind::Mls, Fitted::Stateless) => {
                logits().map(|r| r.iter().copied().fold(f64::NEG_INFINITY, f64::max)).collect()
            }
            (DetectorKind::Ebo, Fitted::Stateless) => logits().map(|r| energy(r, t)).collect(),
            (DetectorKind::Odin, Fitted::Stateless) => {
                let (Some(model), Some(images)) = (ctx.model, ctx.images) else {
                    return Err(Error::MissingTap { detector: "odin".into(), tap: "model and input images" });
                };
                if images.batch_len() != taps.len() {
                    return Err(Error::shape("odin", "images and taps disagree in length"));
                }
                odin_scores(model, images, p.odin_temperature, p.odin_epsilon)?
            }
            (DetectorKind::Gen, Fitted::Stateless) => {
                let m = p.gen_top_m.unwrap_or(taps.num_classes().min(10));
                taps.probs
                    .rows()
                    .map(|r| {
                        let mut s = r.to_vec();
                        s.sort_by(|a, b| b.total_cmp(a));
                        // 1 - q cancels badly for confident rows; sum the other classes instead
                        let rest = |i: usize| s.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, v)| v).sum::<f64>();
                        -(0..m.min(s.len())).map(|i| s[i].powf(p.gen_gamma) * rest(i).powf(p.gen_gamma)).sum::<f64>()
                    })
                    .collect()
            }
            (DetectorKind::Mds, Fitted::Mahalanobis { means, precision }) => features()
                .map(|f| -means.rows().map(|mu| mahalanobis(f, mu, precision)).fold(f64::INFINITY, f64::min))
                .collect(),
            (DetectorKind::Rmds, Fitted::Relative { means, precision, bg_mean, bg_precision }) => features()
                .map(|f| {
                    let bg = mahalanobis(f, bg_mean.data(), bg_precision);
                    means.rows().map(|mu| bg - mahalanobis(f, mu, precision)).fold(f64::NEG_INFINITY, f64::max)
                })
                .collect(),
            (DetectorKind::Gram, Fitted::Gram { mins, maxs }) => {
                if taps.blocks.is_empty() {
                    return Err(Error::MissingTap { detector: "gram".into(), tap: "block activations" });
                }
                let mut s = vec![0.0; taps.len()];
                let mut slot = 0;
                for block in &taps.blocks {
                    let ch = block.shape()[1];
                    for &order in &p.gram_orders {
                        let (lo, hi) = (&mins[slot], &maxs[slot]);
                        let e = lo.shape()[1];
                        for (i, s) in s.iter_mut().enumerate() {
                            let c = taps.predicted[i];
                            let g = gram_features(block.item_slice(i), ch, order);
                            let lo = &lo.data()[c * e..(c + 1) * e];
                            let hi = &hi.data()[c * e..(c + 1) * e];
                            let dev: f64 = g
                                .iter()
                                .zip(lo.iter().zip(hi))
                                .map(|(&v, (&mn, &mx))| {
                                    (mn - v).max(0.0) / (mn + 1e-6).abs() + (v - mx).max(0.0) / (mx + 1e-6).abs()
                                })
                                .sum();
                            *s -= dev / e as f64;
                        }
                        slot += 1;
                    }
                }
                s
            }
            (DetectorKind::React | DetectorKind::Dice, Fitted::Shaped { weight, bias, clip, pruned }) => features()
                .zip(logits())
                .map(|(f, l)| {
                    let clipped: Vec<f64> = f.iter().zip(clip.data()).map(|(&v, &c)| v.min(c)).collect();
                    if *pruned == 0 && clipped == f {
                        energy(l, t)
                    } else {
                        shaped_energy(weight, bias, &clipped, t)
                    }
                })
                .collect(),
            (DetectorKind::Ash, Fitted::Shaped { weight, bias, .. }) => features()
                .zip(logits())
                .map(|(f, l)| {
                    let thr = percentile(f, p.ash_percentile);
                    let before: f64 = f.iter().sum();
                    let pruned: Vec<f64> = f.iter().map(|&v| if v < thr { 0.0 } else { v }).collect();
                    let after: f64 = pruned.iter().sum();
                    let ratio = if after != 0.0 { before / after } else { 1.0 };
                    let shaped: Vec<f64> = pruned.iter().map(|v| v * ratio).collect();
                    if shaped == f {
                        energy(l, t)
                    } else {
                        shaped_energy(weight, bias, &shaped, t)
                    }
                })
                .collect(),
            (DetectorKind::Scale, Fitted::Shaped { weight, bias, .. }) => features()
                .zip(logits())
                .map(|(f, l)| {
                    let thr = percentile(f, p.scale_percentile);
                    let before: f64 = f.iter().sum();
                    let kept: f64 = f.iter().filter(|&&v| v >= thr).sum();
                    let factor = if kept != 0.0 { (before / kept).exp() } else { 1.0 };
                    let scaled: Vec<f64> = f.iter().map(|v| v * factor).collect();
                    if scaled == f {
                        energy(l, t)
                    } else {
                        shaped_energy(weight, bias, &scaled, t)
                    }
                })
                .collect(),
            (DetectorKind::Klm, Fitted::Templates(templates)) => taps
                .probs
                .rows()
                .map(|q| -templates.rows().map(|tk| kl_divergence(q, tk)).fold(f64::INFINITY, f64::min))
                .collect(),
            (DetectorKind::Vim, Fitted::Vim { offset, residual, alpha }) => features()
                .zip(logits())
                .map(|(f, l)| {
                    let r = residual.as_ref().map_or(0.0, |b| residual_norm(b, offset.data(), f));
                    tn::logsumexp(l) - alpha * r
                })
                .collect(),
            (DetectorKind::Knn, Fitted::Bank { bank, k }) => features()
                .map(|f| {
                    let q = unit(f);
                    let mut dist: Vec<f64> = bank
                        .rows()
                        .map(|b| b.iter().zip(&q).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt())
                        .collect();
                    dist.sort_by(f64::total_cmp);
                    -dist[*k - 1]
                })
                .collect(),
            (DetectorKind::Nnguide, Fitted::Bank { bank, k }) => features()
                .zip(logits())
                .map(|(f, l)| {
                    let q = unit(f);
                    let mut sims: Vec<f64> = bank.rows().map(|b| b.iter().zip(&q).map(|(x, y)| x * y).sum()).collect();
                    sims.sort_by(|a, b| b.total_cmp(a));
                    let guide = sims[..*k].iter().sum::<f64>() / *k as f64;
                    energy(l, t) * guide
                })
                .collect(),
            _ => return Err(self.mismatch()),
        };
        Ok(scores)
    }

    /// Sets `tau` to the highest threshold keeping 95% of `id_scores` as ID.
    pub fn calibrate(&mut self, id_scores: &[f64]) -> Result<f64> {
        let tau = metrics::threshold_at_tpr(id_scores, 0.95)?;
        self.threshold = Some(tau);
        Ok(tau)
    }

    /// ID iff `score >= tau`.
    pub fn detect(&self, scores: &[f64]) -> Result<Vec<bool>> {
        let tau = self
            .threshold
            .ok_or_else(|| Error::InvalidArgument(format!("detector {} has no calibrated threshold", self.kind)))?;
        Ok(detect_with(tau, scores))
    }

    /// Fitted arrays under stable names.
    pub fn artifacts(&self) -> TensorMap {
        let mut m = TensorMap::new();
        match &self.fitted {
            Fitted::Stateless => {}
            Fitted::Mahalanobis { means, precision } => {
                m.insert("means".into(), means.clone());
                m.insert("precision".into(), precision.clone());
            }
            Fitted::Relative { means, precision, bg_mean, bg_precision } => {
                m.insert("means".into(), means.clone());
                m.insert("precision".into(), precision.clone());
                m.insert("bg_mean".into(), bg_mean.clone());
                m.insert("bg_precision".into(), bg_precision.clone());
            }
            Fitted::Gram { mins, maxs } => {
                for (i, (lo, hi)) in mins.iter().zip(maxs).enumerate() {
                    m.insert(format!("min.{i:03}"), lo.clone());
                    m.insert(format!("max.{i:03}"), hi.clone());
                }
            }
            Fitted::Shaped { weight, bias, clip, pruned } => {
                m.insert("weight".into(), weight.clone());
                m.insert("bias".into(), bias.clone());
                m.insert("clip".into(), clip.clone());
                m.insert("pruned".into(), Tensor::scalar(*pruned as f64));
            }
            Fitted::Templates(t) => {
                m.insert("templates".into(), t.clone());
            }
            Fitted::Vim { offset, residual, alpha } => {
                m.insert("offset".into(), offset.clone());
                if let Some(r) = residual {
                    m.insert("residual".into(), r.clone());
                }
                m.insert("alpha".into(), Tensor::scalar(*alpha));
            }
            Fitted::Bank { bank, k } => {
                m.insert("bank".into(), bank.clone());
                m.insert("k".into(), Tensor::scalar(*k as f64));
            }
        }
        m
    }

    fn from_artifacts(kind: DetectorKind, params: DetectorParams, threshold: Option<f64>, mut m: TensorMap) -> Result<Self> {
        let mut take = |name: &str| m.remove(name).ok_or_else(|| Error::parse(name.to_string(), format!("missing artifact for {kind}")));
        let fitted = match kind {
            DetectorKind::Msp | DetectorKind::Mls | DetectorKind::Ebo | DetectorKind::Odin | DetectorKind::Gen => {
                Fitted::Stateless
            }
            DetectorKind::Mds => Fitted::Mahalanobis { means: take("means")?, precision: take("precision")? },
            DetectorKind::Rmds => Fitted::Relative {
                means: take("means")?,
                precision: take("precision")?,
                bg_mean: take("bg_mean")?,
                bg_precision: take("bg_precision")?,
            },
            DetectorKind::Gram => {
                let slots = m.keys().filter(|k| k.starts_with("min.")).count();
                let mut mins = Vec::new();
                let mut maxs = Vec::new();
                for i in 0..slots {
                    mins.push(m.remove(&format!("min.{i:03}")).ok_or_else(|| Error::parse("min", "gap in gram bounds"))?);
                    maxs.push(m.remove(&format!("max.{i:03}")).ok_or_else(|| Error::parse("max", "gap in gram bounds"))?);
                }
                Fitted::Gram { mins, maxs }
            }
            DetectorKind::React | DetectorKind::Dice | DetectorKind::Ash | DetectorKind::Scale => {
                Fitted::Shaped {
                    weight: take("weight")?,
                    bias: take("bias")?,
                    clip: take("clip")?,
                    pruned: take("pruned")?.item()? as usize,
                }
            }
            DetectorKind::Klm => Fitted::Templates(take("templates")?),
            DetectorKind::Vim => {
                let offset = take("offset")?;
                let alpha = take("alpha")?.item()?;
                Fitted::Vim { offset, residual: m.remove("residual"), alpha }
            }
            DetectorKind::Knn | DetectorKind::Nnguide => {
                Fitted::Bank { bank: take("bank")?, k: take("k")?.item()? as usize }
            }
        };
        Ok(DetectorState { kind, params, fitted, threshold })
    }

    /// Writes `path` (AOTB artifacts) and a JSON hyperparameter sidecar.
    pub fn save(&self, path: &Path) -> Result<()> {
        aotb::write_map(path, &self.artifacts())?;
        let side = Sidecar { kind: self.kind, params: self.params.clone(), threshold: self.threshold };
        let sp = path.with_extension("json");
        let json = serde_json::to_string_pretty(&side).map_err(|e| Error::json(&sp, e))?;
        fs::write(&sp, json).map_err(|e| Error::io(sp, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let m = aotb::read_map(path)?;
        let sp = path.with_extension("json");
        let raw = fs::read_to_string(&sp).map_err(|e| Error::io(&sp, e))?;
        let side: Sidecar = serde_json::from_str(&raw).map_err(|e| Error::json(&sp, e))?;
        Self::from_artifacts(side.kind, side.params, side.threshold, m)
    }
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    kind: DetectorKind,
    params: DetectorParams,
    threshold: Option<f64>,
}

pub fn detect_with(tau: f64, scores: &[f64]) -> Vec<bool> {
    scores.iter().map(|&s| s >= tau).collect()
}

/// `KL(q || t)` with `0 log 0 = 0`.
pub fn kl_divergence(q: &[f64], t: &[f64]) -> f64 {
    q.iter()
        .zip(t)
        .map(|(&a, &b)| if a > 0.0 { a * (a.ln() - b.max(f64::MIN_POSITIVE).ln()) } else { 0.0 })
        .sum::<f64>()
        .max(0.0)
}

/// ODIN: temperature-scaled max softmax after a small input step that raises
/// the (tempered) max-class log-probability.
pub fn odin_scores(model: &dyn Classifier, images: &Tensor, temperature: f64, epsilon: f64) -> Result<Vec<f64>> {
    const CHUNK: usize = 100;
    let n = images.batch_len();
    let mut out = Vec::with_capacity(n);
    for s in (0..n).step_by(CHUNK) {
        let x = images.slice_batch(s, (s + CHUNK).min(n))?;
        let m = x.batch_len();
        let mut g = Graph::new();
        let xv = g.param(x.clone());
        let logits = model.logits(&mut g, xv)?;
        let pred: Vec<usize> = g.value(logits).rows().map(tn::argmax).collect();
        let scaled = g.scale(logits, 1.0 / temperature);
        let ce = g.cross_entropy(scaled, &pred)?;
        let loss = g.scale(ce, m as f64);
        g.backward(loss)?;
        let grad = g.grad(xv).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));
        let perturbed: Vec<f64> =
            x.data().iter().zip(grad.data()).map(|(&v, &gr)| v - epsilon * crate::attacks::sign(gr)).collect();
        let logits = model.predict_logits(&Tensor::new(x.shape().to_vec(), perturbed)?)?;
        out.extend(logits.rows().map(|r| {
            let scaled: Vec<f64> = r.iter().map(|v| v / temperature).collect();
            tn::softmax(&scaled).into_iter().fold(f64::NEG_INFINITY, f64::max)
        }));
    }
    Ok(out)
}
