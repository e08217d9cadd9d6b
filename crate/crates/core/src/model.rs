//! The desk-scale classifier: three conv blocks, global average pooling and a
//! linear head, with input normalization folded into the first layer.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::tensor::aotb::{self, TensorMap};
use crate::tensor::{self as tn, Graph, Tensor, Var};

/// Anything that maps an image batch to logits on a [`Graph`].
///
/// Attacks, ODIN and Grad-CAM are written against this trait so toy models
/// can stand in for the network in tests.
pub trait Classifier: Sync {
    fn num_classes(&self) -> usize;

    /// Valid input value range; attacks clip into it.
    fn input_range(&self) -> (f64, f64) {
        (0.0, 1.0)
    }

    fn logits(&self, g: &mut Graph, input: Var) -> Result<Var>;

    /// Logits of a batch without keeping a tape around.
    fn predict_logits(&self, images: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.constant(images.clone());
        let l = self.logits(&mut g, x)?;
        Ok(g.value(l).clone())
    }

    fn predict(&self, images: &Tensor) -> Result<Vec<usize>> {
        Ok(self.predict_logits(images)?.rows().map(tn::argmax).collect())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub widths: Vec<usize>,
    pub num_classes: usize,
    /// `[channels, height, width]`
    pub input_shape: [usize; 3],
}

impl Architecture {
    pub fn small(num_classes: usize) -> Self {
        Architecture { widths: vec![16, 32, 64], num_classes, input_shape: [3, 32, 32] }
    }

    pub fn feature_dim(&self) -> usize {
        *self.widths.last().unwrap_or(&0)
    }

    fn validate(&self) -> Result<()> {
        let [c, h, w] = self.input_shape;
        let pool = 1usize << self.widths.len();
        if self.widths.is_empty() || self.num_classes < 2 || c == 0 || h % pool != 0 || w % pool != 0 {
            return Err(Error::InvalidArgument(format!("unsupported architecture {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { epochs: 20, lr: 0.05, momentum: 0.9, batch_size: 64, weight_decay: 5e-4, seed: 7 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub config: TrainConfig,
    pub final_loss: Option<f64>,
    pub train_accuracy: f64,
    pub test_accuracy: Option<f64>,
}

/// Architecture, named weights and training metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelCheckpoint {
    pub arch: Architecture,
    pub weights: TensorMap,
    pub meta: TrainingMeta,
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    architecture: Architecture,
    training: TrainingMeta,
}

const NORM_MEAN: &str = "norm.mean";
const NORM_STD: &str = "norm.std";

fn conv_w(i: usize) -> String {
    format!("conv{}.weight", i + 1)
}

fn conv_b(i: usize) -> String {
    format!("conv{}.bias", i + 1)
}

const FC_W: &str = "fc.weight";
const FC_B: &str = "fc.bias";

impl ModelCheckpoint {
    /// Seeded fan-in scaled uniform initialization; biases start at zero.
    pub fn init(arch: Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = TensorMap::new();
        let mut uniform = |shape: &[usize], fan_in: usize| -> Tensor {
            let bound = (6.0 / fan_in as f64).sqrt();
            let n = shape.iter().product();
            Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-bound..bound)).collect()).unwrap()
        };
        let mut cin = arch.input_shape[0];
        for (i, &cout) in arch.widths.iter().enumerate() {
            weights.insert(conv_w(i), uniform(&[cout, cin, 3, 3], cin * 9));
            weights.insert(conv_b(i), Tensor::zeros(&[cout]));
            cin = cout;
        }
        weights.insert(FC_W.into(), uniform(&[arch.num_classes, cin], cin));
        weights.insert(FC_B.into(), Tensor::zeros(&[arch.num_classes]));
        weights.insert(NORM_MEAN.into(), Tensor::full(&[arch.input_shape[0]], 0.5));
        weights.insert(NORM_STD.into(), Tensor::full(&[arch.input_shape[0]], 0.25));
        let meta = TrainingMeta {
            config: TrainConfig { epochs: 0, seed, ..TrainConfig::default() },
            final_loss: None,
            train_accuracy: 0.0,
            test_accuracy: None,
        };
        Ok(ModelCheckpoint { arch, weights, meta })
    }

    pub fn network(&self) -> Result<SmallConvNet<'_>> {
        SmallConvNet::new(self)
    }

    /// Linear head `(weight [C,D], bias [C])`.
    pub fn head(&self) -> (&Tensor, &Tensor) {
        (&self.weights[FC_W], &self.weights[FC_B])
    }

    /// Replaces the linear head, keeping its shape.
    pub fn set_head(&mut self, weight: Tensor, bias: Tensor) -> Result<()> {
        let (w, b) = self.head();
        if weight.shape() != w.shape() || bias.shape() != b.shape() {
            return Err(Error::shape("set_head", format!("expected {:?} and {:?}", w.shape(), b.shape())));
        }
        self.weights.insert(FC_W.into(), weight);
        self.weights.insert(FC_B.into(), bias);
        Ok(())
    }

    fn sidecar_path(path: &Path) -> PathBuf {
        path.with_extension("json")
    }

    /// Writes `path` (AOTB weights) and a JSON sidecar next to it.
    pub fn save(&self, path: &Path) -> Result<()> {
        aotb::write_map(path, &self.weights)?;
        let side = Sidecar { architecture: self.arch.clone(), training: self.meta.clone() };
        let json = serde_json::to_string_pretty(&side).map_err(|e| Error::json(path, e))?;
        let sp = Self::sidecar_path(path);
        fs::write(&sp, json).map_err(|e| Error::io(sp, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let weights = aotb::read_map(path)?;
        let sp = Self::sidecar_path(path);
        let raw = fs::read_to_string(&sp).map_err(|e| Error::io(&sp, e))?;
        let side: Sidecar = serde_json::from_str(&raw).map_err(|e| Error::json(&sp, e))?;
        let ck = ModelCheckpoint { arch: side.architecture, weights, meta: side.training };
        ck.network()?;
        Ok(ck)
    }
}

/// Borrowed view of a checkpoint that can build forward passes.
pub struct SmallConvNet<'a> {
    ck: &'a ModelCheckpoint,
    norm_scale: Vec<f64>,
    norm_shift: Vec<f64>,
}

/// Graph handles produced by one forward pass.
#[derive(Clone, Debug)]
pub struct NetVars {
    /// Output of every conv block after pooling; the last one feeds Grad-CAM.
    pub blocks: Vec<Var>,
    pub features: Var,
    pub logits: Var,
    /// Parameter leaves in [`SmallConvNet::param_names`] order, when trainable.
    pub params: Vec<Var>,
}

impl<'a> SmallConvNet<'a> {
    pub fn new(ck: &'a ModelCheckpoint) -> Result<Self> {
        ck.arch.validate()?;
        for name in Self::param_names(&ck.arch).iter().chain([NORM_MEAN.to_string(), NORM_STD.to_string()].iter()) {
            if !ck.weights.contains_key(name) {
                return Err(Error::parse(name.clone(), "missing weight tensor"));
            }
        }
        let mean = ck.weights[NORM_MEAN].data();
        let std = ck.weights[NORM_STD].data();
        if mean.len() != ck.arch.input_shape[0] || std.len() != mean.len() || std.iter().any(|&s| s <= 0.0) {
            return Err(Error::parse(NORM_STD, "normalization must be positive per input channel"));
        }
        let norm_scale: Vec<f64> = std.iter().map(|s| 1.0 / s).collect();
        let norm_shift = mean.iter().zip(std).map(|(m, s)| -m / s).collect();
        Ok(SmallConvNet { ck, norm_scale, norm_shift })
    }

    pub fn param_names(arch: &Architecture) -> Vec<String> {
        let mut v = Vec::new();
        for i in 0..arch.widths.len() {
            v.push(conv_w(i));
            v.push(conv_b(i));
        }
        v.push(FC_W.into());
        v.push(FC_B.into());
        v
    }

    pub fn checkpoint(&self) -> &ModelCheckpoint {
        self.ck
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let (_, c, h, w) = x.dims4()?;
        if [c, h, w] != self.ck.arch.input_shape {
            return Err(Error::shape(
                "forward",
                format!("input {:?} does not match architecture {:?}", x.shape(), self.ck.arch.input_shape),
            ));
        }
        Ok(())
    }

    /// Records a forward pass. With `trainable`, parameters become grad leaves.
    pub fn forward(&self, g: &mut Graph, input: Var, trainable: bool) -> Result<NetVars> {
        self.check_input(g.value(input))?;
        let mut params = Vec::new();
        let mut p = |g: &mut Graph, name: &str| {
            let t = self.ck.weights[name].clone();
            if trainable {
                let v = g.param(t);
                params.push(v);
                v
            } else {
                g.constant(t)
            }
        };
        let mut x = g.channel_affine(input, &self.norm_scale, &self.norm_shift)?;
        let mut blocks = Vec::new();
        for i in 0..self.ck.arch.widths.len() {
            let w = p(g, &conv_w(i));
            let b = p(g, &conv_b(i));
            x = g.conv2d(x, w, b, 1, 1)?;
            x = g.relu(x);
            x = g.avgpool2d(x, 2)?;
            blocks.push(x);
        }
        let features = g.global_avg_pool(x)?;
        let w = p(g, FC_W);
        let b = p(g, FC_B);
        let logits = g.linear(features, w, b)?;
        Ok(NetVars { blocks, features, logits, params })
    }
}

impl Classifier for SmallConvNet<'_> {
    fn num_classes(&self) -> usize {
        self.ck.arch.num_classes
    }

    fn logits(&self, g: &mut Graph, input: Var) -> Result<Var> {
        Ok(self.forward(g, input, false)?.logits)
    }
}

/// Penultimate features, logits, probabilities and block activations of a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardTaps {
    /// `[N, D]`
    pub features: Tensor,
    /// `[N, C]`
    pub logits: Tensor,
    /// `[N, C]`, row-wise softmax of `logits`
    pub probs: Tensor,
    /// Per conv block `[N, C_b, H_b, W_b]`; empty for imported taps.
    pub blocks: Vec<Tensor>,
    pub predicted: Vec<usize>,
}

impl ForwardTaps {
    /// Builds taps from features and logits alone (imported model outputs).
    pub fn from_features_logits(features: Tensor, logits: Tensor) -> Result<Self> {
        let (n, _) = features.dims2()?;
        let (nl, c) = logits.dims2()?;
        if n != nl {
            return Err(Error::shape("taps", format!("{n} feature rows vs {nl} logit rows")));
        }
        let probs = Tensor::new(vec![n, c], logits.rows().flat_map(tn::softmax).collect())?;
        let predicted = logits.rows().map(tn::argmax).collect();
        Ok(ForwardTaps { features, logits, probs, blocks: Vec::new(), predicted })
    }

    pub fn len(&self) -> usize {
        self.features.batch_len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_classes(&self) -> usize {
        self.logits.shape()[1]
    }

    /// Last conv block activations, if recorded.
    pub fn activations(&self) -> Option<&Tensor> {
        self.blocks.last()
    }

    pub fn select(&self, idx: &[usize]) -> Result<Self> {
        Ok(ForwardTaps {
            features: self.features.select(idx)?,
            logits: self.logits.select(idx)?,
            probs: self.probs.select(idx)?,
            blocks: self.blocks.iter().map(|b| b.select(idx)).collect::<Result<_>>()?,
            predicted: idx.iter().map(|&i| self.predicted[i]).collect(),
        })
    }

    pub fn concat(parts: &[ForwardTaps]) -> Result<Self> {
        let cat = |f: fn(&ForwardTaps) -> &Tensor| Tensor::concat(&parts.iter().map(|p| f(p).clone()).collect::<Vec<_>>());
        let nblocks = parts.first().map_or(0, |p| p.blocks.len());
        let blocks = (0..nblocks)
            .map(|b| Tensor::concat(&parts.iter().map(|p| p.blocks[b].clone()).collect::<Vec<_>>()))
            .collect::<Result<_>>()?;
        Ok(ForwardTaps {
            features: cat(|p| &p.features)?,
            logits: cat(|p| &p.logits)?,
            probs: cat(|p| &p.probs)?,
            blocks,
            predicted: parts.iter().flat_map(|p| p.predicted.iter().copied()).collect(),
        })
    }
}

const INFER_CHUNK: usize = 100;

/// Runs the network over `batch` and records every tap detectors need.
pub fn forward_with_taps(ck: &ModelCheckpoint, batch: &Tensor) -> Result<ForwardTaps> {
    let net = ck.network()?;
    net.check_input(batch)?;
    let n = batch.batch_len();
    let chunks: Vec<(usize, usize)> = (0..n).step_by(INFER_CHUNK).map(|s| (s, (s + INFER_CHUNK).min(n))).collect();
    let parts = chunks
        .par_iter()
        .map(|&(s, e)| {
            let mut g = Graph::new();
            let x = g.constant(batch.slice_batch(s, e)?);
            let vars = net.forward(&mut g, x, false)?;
            let features = g.value(vars.features).clone();
            let logits = g.value(vars.logits).clone();
            let blocks = vars.blocks.iter().map(|&b| g.value(b).clone()).collect();
            let mut taps = ForwardTaps::from_features_logits(features, logits)?;
            taps.blocks = blocks;
            Ok(taps)
        })
        .collect::<Result<Vec<_>>>()?;
    ForwardTaps::concat(&parts)
}

/// Fraction of `labels` matched by the network's predictions.
pub fn accuracy(ck: &ModelCheckpoint, images: &Tensor, labels: &[usize]) -> Result<f64> {
    let taps = forward_with_taps(ck, images)?;
    let hits = taps.predicted.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

fn channel_stats(images: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
    let (n, c, h, w) = images.dims4()?;
    let mut mean = vec![0.0; c];
    let mut sq = vec![0.0; c];
    for (p, plane) in images.data().chunks(h * w).enumerate() {
        mean[p % c] += plane.iter().sum::<f64>();
        sq[p % c] += plane.iter().map(|v| v * v).sum::<f64>();
    }
    let cnt = (n * h * w) as f64;
    let mean: Vec<f64> = mean.iter().map(|m| m / cnt).collect();
    let std = sq.iter().zip(&mean).map(|(s, m)| (s / cnt - m * m).max(1e-12).sqrt()).collect();
    Ok((mean, std))
}

/// SGD with momentum on mean cross-entropy; deterministic per `config.seed`.
pub fn train(
    arch: Architecture,
    train_set: &LabeledDataset,
    test_set: Option<&LabeledDataset>,
    config: &TrainConfig,
) -> Result<ModelCheckpoint> {
    if train_set.is_empty() {
        return Err(Error::InvalidArgument("train: empty dataset".into()));
    }
    if !(config.lr > 0.0) || config.batch_size == 0 {
        return Err(Error::InvalidArgument(format!("train: lr must be > 0 and batch_size > 0, got {config:?}")));
    }
    let mut ck = ModelCheckpoint::init(arch, config.seed)?;
    let (mean, std) = channel_stats(&train_set.images)?;
    ck.weights.insert(NORM_MEAN.into(), Tensor::new(vec![mean.len()], mean)?);
    ck.weights.insert(NORM_STD.into(), Tensor::new(vec![std.len()], std)?);

    let names = SmallConvNet::param_names(&ck.arch);
    let mut velocity: Vec<Vec<f64>> = names.iter().map(|n| vec![0.0; ck.weights[n].numel()]).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x5eed));
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut final_loss = None;
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for (bi, idx) in order.chunks(config.batch_size).enumerate() {
            let images = train_set.images.select(idx)?;
            let labels: Vec<usize> = idx.iter().map(|&i| train_set.labels[i]).collect();
            let net = ck.network()?;
            let mut g = Graph::new();
            let x = g.constant(images);
            let vars = net.forward(&mut g, x, true)?;
            let loss = g.cross_entropy(vars.logits, &labels)?;
            let lv = g.value(loss).item()?;
            if !lv.is_finite() {
                return Err(Error::Diverged { epoch, batch: bi, loss: lv });
            }
            epoch_loss += lv * idx.len() as f64;
            g.backward(loss)?;
            let grads: Vec<Tensor> = vars
                .params
                .iter()
                .map(|&p| g.grad(p).cloned().unwrap_or_else(|| Tensor::zeros(g.value(p).shape())))
                .collect();
            drop(g);
            for ((name, vel), grad) in names.iter().zip(&mut velocity).zip(&grads) {
                let decay = if name.ends_with(".weight") { config.weight_decay } else { 0.0 };
                let w = ck.weights.get_mut(name).unwrap().data_mut();
                for ((w, v), gr) in w.iter_mut().zip(vel.iter_mut()).zip(grad.data()) {
                    *v = config.momentum * *v + gr + decay * *w;
                    *w -= config.lr * *v;
                }
            }
        }
        final_loss = Some(epoch_loss / train_set.len() as f64);
    }
    ck.meta = TrainingMeta {
        config: config.clone(),
        final_loss,
        train_accuracy: accuracy(&ck, &train_set.images, &train_set.labels)?,
        test_accuracy: test_set.map(|t| accuracy(&ck, &t.images, &t.labels)).transpose()?,
    };
    Ok(ck)
}
