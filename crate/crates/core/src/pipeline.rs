//! End-to-end experiment: generate data, train, attack, fit and score
//! detectors, evaluate, compare Grad-CAM maps and assemble the report.
//!
//! Every stage reads its inputs from the output directory and writes its own
//! outputs there, so any stage can be re-run on its own once its
//! prerequisites exist.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attacks::{self, AttackConfig, AttackKind, AttackResult};
use crate::data::{self, Loaded, OodKind, Split, MAX_CLASSES, MIN_CLASSES};
use crate::detectors::{self, DetectorKind, DetectorParams, DetectorState, IdStats, ScoreContext};
use crate::error::{Error, Result};
use crate::gradcam::{self, ShiftDensity, ShiftRecord};
use crate::metrics::{self, EvalResult};
use crate::model::{self, Architecture, ModelCheckpoint, TrainConfig};
use crate::tensor::aotb::{self, TensorMap};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    GenData,
    Train,
    Attack,
    FitDetectors,
    Score,
    Evaluate,
    Gradcam,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 8] = [
        Stage::GenData,
        Stage::Train,
        Stage::Attack,
        Stage::FitDetectors,
        Stage::Score,
        Stage::Evaluate,
        Stage::Gradcam,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::GenData => "gen-data",
            Stage::Train => "train",
            Stage::Attack => "attack",
            Stage::FitDetectors => "fit-detectors",
            Stage::Score => "score",
            Stage::Evaluate => "evaluate",
            Stage::Gradcam => "gradcam",
            Stage::Report => "report",
        }
    }
}

impl std::str::FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL.into_iter().find(|st| st.name() == s).ok_or_else(|| Error::Config {
            field: "stage".into(),
            msg: format!(
                "unknown stage `{s}`; valid stages: {}",
                Stage::ALL.iter().map(|s| s.name()).collect::<Vec<_>>().join(", ")
            ),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub num_classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Samples per natural OOD split.
    pub ood_per_kind: usize,
    /// Use an existing AOTB image file instead of generating the split.
    pub id_train_file: Option<PathBuf>,
    pub id_test_file: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            num_classes: 4,
            train_per_class: 600,
            test_per_class: 125,
            ood_per_kind: 500,
            id_train_file: None,
            id_test_file: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorSpec {
    pub kind: String,
    #[serde(default)]
    pub params: DetectorParams,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcamConfig {
    pub l2_bins: usize,
    pub ssim_bins: usize,
}

impl Default for GradcamConfig {
    fn default() -> Self {
        GradcamConfig { l2_bins: 10, ssim_bins: 10 }
    }
}

/// Everything a run depends on. Round-trips through JSON unchanged.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub attacks: Vec<AttackConfig>,
    pub detectors: Vec<DetectorSpec>,
    /// OOD sources evaluated against ID test: natural split names and/or attack names.
    pub ood_sources: Vec<String>,
    pub gradcam: GradcamConfig,
    pub out_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let seed = 1;
        RunConfig {
            seed,
            data: DataConfig::default(),
            train: TrainConfig::default(),
            attacks: AttackKind::ALL
                .iter()
                .enumerate()
                .map(|(i, &k)| AttackConfig::default_for(k).with_seed(seed + 100 + i as u64))
                .collect(),
            detectors: DetectorKind::ALL
                .iter()
                .map(|k| DetectorSpec { kind: k.name().into(), params: DetectorParams::default() })
                .collect(),
            ood_sources: [OodKind::NearShapes.name(), OodKind::FarNoise.name()]
                .into_iter()
                .chain(AttackKind::ALL.iter().map(|k| k.name()))
                .map(String::from)
                .collect(),
            gradcam: GradcamConfig::default(),
            out_dir: None,
        }
    }
}

fn config_err(field: impl Into<String>, msg: impl Into<String>) -> Error {
    Error::Config { field: field.into(), msg: msg.into() }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: RunConfig = serde_json::from_str(&raw).map_err(|e| Error::json(path, e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the compact JSON encoding.
    pub fn hash(&self) -> String {
        data::hex(&Sha256::digest(serde_json::to_vec(self).expect("config serializes")))
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        if !(MIN_CLASSES..=MAX_CLASSES).contains(&d.num_classes) {
            return Err(config_err(
                "data.num_classes",
                format!("must be in [{MIN_CLASSES}, {MAX_CLASSES}], got {}", d.num_classes),
            ));
        }
        for (field, v) in [
            ("data.train_per_class", d.train_per_class),
            ("data.test_per_class", d.test_per_class),
            ("data.ood_per_kind", d.ood_per_kind),
        ] {
            if v == 0 {
                return Err(config_err(field, "must be positive"));
            }
        }
        for (field, p) in [("data.id_train_file", &d.id_train_file), ("data.id_test_file", &d.id_test_file)] {
            if let Some(p) = p {
                if !p.exists() {
                    return Err(config_err(field, format!("file {} does not exist", p.display())));
                }
            }
        }
        if self.train.epochs == 0 || self.train.batch_size == 0 || !(self.train.lr > 0.0) {
            return Err(config_err("train", "epochs, batch_size and lr must be positive"));
        }
        let mut seen = Vec::new();
        for (i, a) in self.attacks.iter().enumerate() {
            a.validate().map_err(|e| config_err(format!("attacks[{i}]"), e.to_string()))?;
            if seen.contains(&a.kind) {
                return Err(config_err(format!("attacks[{i}].kind"), format!("duplicate attack {}", a.kind.name())));
            }
            seen.push(a.kind);
        }
        let mut kinds = Vec::new();
        for (i, spec) in self.detectors.iter().enumerate() {
            let k: DetectorKind =
                spec.kind.parse().map_err(|e: Error| config_err(format!("detectors[{i}].kind"), e.to_string()))?;
            if kinds.contains(&k) {
                return Err(config_err(format!("detectors[{i}].kind"), format!("duplicate detector {k}")));
            }
            kinds.push(k);
        }
        for (i, s) in self.ood_sources.iter().enumerate() {
            let natural = [OodKind::NearShapes.name(), OodKind::FarNoise.name()].contains(&s.as_str());
            let attacked = self.attacks.iter().any(|a| a.kind.name() == s);
            if !natural && !attacked {
                return Err(config_err(
                    format!("ood_sources[{i}]"),
                    format!("`{s}` is neither a natural split (near_shapes, far_noise) nor a configured attack"),
                ));
            }
        }
        if self.gradcam.l2_bins == 0 || self.gradcam.ssim_bins == 0 {
            return Err(config_err("gradcam", "bin counts must be positive"));
        }
        Ok(())
    }

    pub fn detector_specs(&self) -> Result<Vec<(DetectorKind, DetectorParams)>> {
        self.detectors.iter().map(|s| Ok((s.kind.parse()?, s.params.clone()))).collect()
    }
}

/// File layout of one run directory.
#[derive(Clone, Debug)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Layout { root: root.into() }
    }

    pub fn id_train(&self) -> PathBuf {
        self.root.join("data/id_train.aotb")
    }
    pub fn id_test(&self) -> PathBuf {
        self.root.join("data/id_test.aotb")
    }
    pub fn natural(&self, kind: OodKind) -> PathBuf {
        self.root.join(format!("data/{}.aotb", kind.name()))
    }
    pub fn model(&self) -> PathBuf {
        self.root.join("model/model.aotb")
    }
    pub fn attack(&self, kind: AttackKind) -> PathBuf {
        self.root.join(format!("attacks/{}.aotb", kind.name()))
    }
    pub fn attack_summary(&self, kind: AttackKind) -> PathBuf {
        self.root.join(format!("attacks/{}.json", kind.name()))
    }
    pub fn detector(&self, kind: DetectorKind) -> PathBuf {
        self.root.join(format!("detectors/{}.aotb", kind.name()))
    }
    pub fn detector_failures(&self) -> PathBuf {
        self.root.join("detectors/failures.json")
    }
    pub fn scores(&self) -> PathBuf {
        self.root.join("scores/scores.csv")
    }
    pub fn score_failures(&self) -> PathBuf {
        self.root.join("scores/failures.json")
    }
    pub fn metrics(&self) -> PathBuf {
        self.root.join("eval/metrics.json")
    }
    pub fn metrics_csv(&self) -> PathBuf {
        self.root.join("eval/metrics.csv")
    }
    pub fn shifts(&self, kind: AttackKind) -> PathBuf {
        self.root.join(format!("gradcam/{}.csv", kind.name()))
    }
    pub fn density(&self) -> PathBuf {
        self.root.join("gradcam/density.json")
    }
    pub fn report_json(&self) -> PathBuf {
        self.root.join("report/report.json")
    }
    pub fn report_csv(&self) -> PathBuf {
        self.root.join("report/report.csv")
    }
    pub fn report_md(&self) -> PathBuf {
        self.root.join("report/report.md")
    }
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(())
}

fn require(path: &Path, stage: Stage) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingStage { path: path.to_path_buf(), stage: stage.name() })
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    ensure_parent(path)?;
    let json = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&raw).map_err(|e| Error::json(path, e))
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    ensure_parent(path)?;
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    r.deserialize().map(|row| row.map_err(|e| csv_err(path, e))).collect()
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Parse { field: path.display().to_string(), msg: e.to_string() }
}

fn load_labeled(path: &Path, stage: Stage) -> Result<data::LabeledDataset> {
    require(path, stage)?;
    match data::load_tensors(path)? {
        Loaded::Labeled(ds) => Ok(ds),
        _ => Err(Error::parse(path.display().to_string(), "expected labeled images")),
    }
}

fn load_images(path: &Path, stage: Stage) -> Result<Tensor> {
    require(path, stage)?;
    match data::load_tensors(path)? {
        Loaded::Labeled(ds) => Ok(ds.images),
        Loaded::Ood(ds) => Ok(ds.images),
        Loaded::Taps { .. } => Err(Error::parse(path.display().to_string(), "expected images, found taps")),
    }
}

fn load_model(layout: &Layout) -> Result<ModelCheckpoint> {
    require(&layout.model(), Stage::Train)?;
    ModelCheckpoint::load(&layout.model())
}

pub fn gen_data(cfg: &RunConfig, layout: &Layout) -> Result<()> {
    let d = &cfg.data;
    let from_file = |p: &Path, split: Split| -> Result<data::LabeledDataset> {
        match data::load_tensors(p)? {
            Loaded::Labeled(mut ds) => {
                ds.split = split;
                Ok(ds)
            }
            _ => Err(config_err("data", format!("{} holds no labeled images", p.display()))),
        }
    };
    let train = match &d.id_train_file {
        Some(p) => from_file(p, Split::Train)?,
        None => data::generate_shapes(d.num_classes, d.train_per_class, cfg.seed, Split::Train)?,
    };
    let test = match &d.id_test_file {
        Some(p) => from_file(p, Split::Test)?,
        None => data::generate_shapes(d.num_classes, d.test_per_class, cfg.seed + 1, Split::Test)?,
    };
    for (path, ds) in [(layout.id_train(), &train), (layout.id_test(), &test)] {
        ensure_parent(&path)?;
        data::save_labeled(&path, ds)?;
    }
    for (i, kind) in [OodKind::NearShapes, OodKind::FarNoise].into_iter().enumerate() {
        let ds = data::generate_ood(kind, d.ood_per_kind, cfg.seed + 2 + i as u64)?;
        data::save_ood(&layout.natural(kind), &ds)?;
    }
    Ok(())
}

pub fn train(cfg: &RunConfig, layout: &Layout) -> Result<ModelCheckpoint> {
    let train = load_labeled(&layout.id_train(), Stage::GenData)?;
    let test = load_labeled(&layout.id_test(), Stage::GenData)?;
    let ck = model::train(Architecture::small(train.num_classes), &train, Some(&test), &cfg.train)?;
    ensure_parent(&layout.model())?;
    ck.save(&layout.model())?;
    Ok(ck)
}

/// Per-attack summary written next to the adversarial images.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackSummary {
    pub attack: String,
    pub config: AttackConfig,
    pub asr: f64,
    pub n: usize,
    pub n_correct: usize,
    pub n_success: usize,
    pub converged: usize,
    pub mean_linf: f64,
    pub mean_l2: f64,
}

fn indicator(v: &[bool]) -> Vec<f64> {
    v.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
}

fn as_usize(v: &[f64]) -> Vec<usize> {
    v.iter().map(|&x| x as usize).collect()
}

pub fn save_attack(path: &Path, r: &AttackResult) -> Result<()> {
    let n = r.len();
    let vec = |v: Vec<f64>| Tensor::new(vec![n], v);
    let mut m = TensorMap::new();
    m.insert("images".into(), r.adversarial.clone());
    m.insert("labels".into(), vec(r.labels.iter().map(|&v| v as f64).collect())?);
    m.insert("clean_pred".into(), vec(r.clean_pred.iter().map(|&v| v as f64).collect())?);
    m.insert("adv_pred".into(), vec(r.adv_pred.iter().map(|&v| v as f64).collect())?);
    m.insert("success".into(), vec(indicator(&r.success))?);
    m.insert("converged".into(), vec(indicator(&r.converged))?);
    m.insert("linf".into(), vec(r.linf.clone())?);
    m.insert("l2".into(), vec(r.l2.clone())?);
    if let Some(origins) = r.patches.iter().copied().collect::<Option<Vec<_>>>() {
        let flat = origins.iter().flat_map(|&(a, b)| [a as f64, b as f64]).collect();
        m.insert("patch_origin".into(), Tensor::new(vec![n, 2], flat)?);
    }
    ensure_parent(path)?;
    aotb::write_map(path, &m)
}

/// Adversarial images with the per-sample bookkeeping needed downstream.
#[derive(Clone, Debug, PartialEq)]
pub struct StoredAttack {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub clean_pred: Vec<usize>,
    pub adv_pred: Vec<usize>,
    pub success: Vec<bool>,
    pub converged: Vec<bool>,
    pub linf: Vec<f64>,
    pub l2: Vec<f64>,
    /// `(row, col)` per sample for patch attacks.
    pub patches: Option<Vec<(usize, usize)>>,
}

pub fn load_attack(path: &Path) -> Result<StoredAttack> {
    require(path, Stage::Attack)?;
    let mut m = aotb::read_map(path)?;
    let mut take = |k: &str| m.remove(k).ok_or_else(|| Error::parse(k.to_string(), format!("missing in {}", path.display())));
    let images = take("images")?;
    let labels = as_usize(take("labels")?.data());
    let clean_pred = as_usize(take("clean_pred")?.data());
    let adv_pred = as_usize(take("adv_pred")?.data());
    let success = take("success")?.data().iter().map(|&v| v != 0.0).collect();
    let converged = take("converged")?.data().iter().map(|&v| v != 0.0).collect();
    let linf = take("linf")?.into_data();
    let l2 = take("l2")?.into_data();
    let patches = m.remove("patch_origin").map(|t| t.data().chunks(2).map(|p| (p[0] as usize, p[1] as usize)).collect());
    Ok(StoredAttack { images, labels, clean_pred, adv_pred, success, converged, linf, l2, patches })
}

pub fn attack(cfg: &RunConfig, layout: &Layout) -> Result<Vec<AttackSummary>> {
    let ck = load_model(layout)?;
    let test = load_labeled(&layout.id_test(), Stage::GenData)?;
    let net = ck.network()?;
    let mut out = Vec::new();
    for ac in &cfg.attacks {
        let r = attacks::run_attack(&net, &test.images, &test.labels, ac)?;
        save_attack(&layout.attack(ac.kind), &r)?;
        let n = r.len();
        let summary = AttackSummary {
            attack: ac.kind.name().into(),
            config: ac.clone(),
            asr: r.asr,
            n,
            n_correct: r.labels.iter().zip(&r.clean_pred).filter(|(a, b)| a == b).count(),
            n_success: r.success.iter().zip(r.labels.iter().zip(&r.clean_pred)).filter(|(s, (a, b))| **s && a == b).count(),
            converged: r.converged.iter().filter(|&&c| c).count(),
            mean_linf: r.linf.iter().sum::<f64>() / n as f64,
            mean_l2: r.l2.iter().sum::<f64>() / n as f64,
        };
        write_json(&layout.attack_summary(ac.kind), &summary)?;
        out.push(summary);
    }
    Ok(out)
}

/// A stage step that did not produce output for one detector or cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub detector: String,
    pub source: Option<String>,
    pub reason: String,
}

pub fn fit_detectors(cfg: &RunConfig, layout: &Layout) -> Result<Vec<Failure>> {
    let ck = load_model(layout)?;
    let train = load_labeled(&layout.id_train(), Stage::GenData)?;
    let stats = IdStats::from_model(&ck, &train)?;
    let mut failures = Vec::new();
    for (kind, params) in cfg.detector_specs()? {
        let path = layout.detector(kind);
        ensure_parent(&path)?;
        match detectors::fit(kind, &stats, &params) {
            Ok(state) => state.save(&path)?,
            Err(e) => {
                // a stale state from an earlier run must not be picked up
                let _ = fs::remove_file(&path);
                failures.push(Failure { detector: kind.name().into(), source: None, reason: e.to_string() });
            }
        }
    }
    write_json(&layout.detector_failures(), &failures)?;
    Ok(failures)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub sample_id: usize,
    pub split: String,
    pub detector: String,
    pub score: f64,
}

pub const ID_SPLIT: &str = "id_test";

fn source_images(cfg: &RunConfig, layout: &Layout) -> Result<Vec<(String, Tensor)>> {
    let mut out = vec![(ID_SPLIT.to_string(), load_labeled(&layout.id_test(), Stage::GenData)?.images)];
    for s in &cfg.ood_sources {
        let images = match cfg.attacks.iter().find(|a| a.kind.name() == s) {
            Some(a) => load_attack(&layout.attack(a.kind))?.images,
            None => {
                let kind = if s == OodKind::NearShapes.name() { OodKind::NearShapes } else { OodKind::FarNoise };
                load_images(&layout.natural(kind), Stage::GenData)?
            }
        };
        out.push((s.clone(), images));
    }
    Ok(out)
}

/// Scores every split with every fitted detector and calibrates each
/// detector's threshold on the ID test scores.
pub fn score(cfg: &RunConfig, layout: &Layout) -> Result<Vec<Failure>> {
    let ck = load_model(layout)?;
    let net = ck.network()?;
    let sources = source_images(cfg, layout)?;
    let taps: Vec<_> =
        sources.iter().map(|(_, images)| model::forward_with_taps(&ck, images)).collect::<Result<_>>()?;
    require(&layout.detector_failures(), Stage::FitDetectors)?;
    let mut failures: Vec<Failure> = read_json(&layout.detector_failures())?;
    let mut rows = Vec::new();
    for (kind, _) in cfg.detector_specs()? {
        let path = layout.detector(kind);
        if !path.exists() {
            if !failures.iter().any(|f| f.detector == kind.name()) {
                return Err(Error::MissingStage { path, stage: Stage::FitDetectors.name() });
            }
            continue;
        }
        let mut state = DetectorState::load(&path)?;
        for ((name, images), t) in sources.iter().zip(&taps) {
            let ctx = ScoreContext { model: Some(&net), images: Some(images) };
            match state.score(t, &ctx) {
                Ok(scores) => {
                    if name == ID_SPLIT {
                        state.calibrate(&scores)?;
                    }
                    rows.extend(scores.into_iter().enumerate().map(|(i, s)| ScoreRow {
                        sample_id: i,
                        split: name.clone(),
                        detector: kind.name().into(),
                        score: s,
                    }));
                }
                Err(e) => failures.push(Failure {
                    detector: kind.name().into(),
                    source: Some(name.clone()),
                    reason: e.to_string(),
                }),
            }
        }
        state.save(&path)?;
    }
    write_csv(&layout.scores(), &rows)?;
    write_json(&layout.score_failures(), &failures)?;
    Ok(failures)
}

/// One (detector, source) evaluation: metrics or the reason they are missing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricCell {
    pub detector: String,
    pub ood_source: String,
    pub result: Option<EvalResult>,
    pub failure: Option<String>,
}

pub fn evaluate(cfg: &RunConfig, layout: &Layout) -> Result<Vec<MetricCell>> {
    require(&layout.scores(), Stage::Score)?;
    let rows: Vec<ScoreRow> = read_csv(&layout.scores())?;
    let failures: Vec<Failure> = read_json(&layout.score_failures())?;
    let mut grouped: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
    for r in rows {
        grouped.entry((r.detector, r.split)).or_default().push(r.score);
    }
    let mut cells = Vec::new();
    for spec in &cfg.detectors {
        let det = &spec.kind;
        for src in &cfg.ood_sources {
            let reason = failures
                .iter()
                .find(|f| &f.detector == det && (f.source.is_none() || f.source.as_deref() == Some(src) || f.source.as_deref() == Some(ID_SPLIT)))
                .map(|f| f.reason.clone());
            let id = grouped.get(&(det.clone(), ID_SPLIT.to_string()));
            let ood = grouped.get(&(det.clone(), src.clone()));
            let cell = match (reason, id, ood) {
                (Some(reason), _, _) => MetricCell { detector: det.clone(), ood_source: src.clone(), result: None, failure: Some(reason) },
                (None, Some(id), Some(ood)) => match metrics::evaluate(det, src, id, ood) {
                    Ok(r) => MetricCell { detector: det.clone(), ood_source: src.clone(), result: Some(r), failure: None },
                    Err(e) => MetricCell {
                        detector: det.clone(),
                        ood_source: src.clone(),
                        result: None,
                        failure: Some(e.to_string()),
                    },
                },
                _ => MetricCell {
                    detector: det.clone(),
                    ood_source: src.clone(),
                    result: None,
                    failure: Some("no scores recorded".into()),
                },
            };
            cells.push(cell);
        }
    }
    write_json(&layout.metrics(), &cells)?;
    let flat: Vec<_> = cells.iter().filter_map(|c| c.result.clone()).collect();
    write_csv(&layout.metrics_csv(), &flat)?;
    Ok(cells)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackShift {
    pub attack: String,
    pub density: ShiftDensity,
    /// Records whose adversarial prediction differs from the benign one.
    pub flipped: usize,
}

pub fn gradcam_stage(cfg: &RunConfig, layout: &Layout) -> Result<Vec<AttackShift>> {
    let ck = load_model(layout)?;
    let test = load_labeled(&layout.id_test(), Stage::GenData)?;
    let mut out = Vec::new();
    for ac in &cfg.attacks {
        let adv = load_attack(&layout.attack(ac.kind))?;
        let records =
            gradcam::attention_shift(&ck, ac.kind.name(), &test.images, &adv.images, &adv.clean_pred, &adv.adv_pred)?;
        write_csv(&layout.shifts(ac.kind), &records)?;
        let density = gradcam::shift_density(&records, cfg.gradcam.l2_bins, cfg.gradcam.ssim_bins)?;
        out.push(AttackShift {
            attack: ac.kind.name().into(),
            flipped: records.iter().filter(|r| r.benign_class != r.adv_class).count(),
            density,
        });
    }
    write_json(&layout.density(), &out)?;
    Ok(out)
}

pub fn load_shifts(layout: &Layout, kind: AttackKind) -> Result<Vec<ShiftRecord>> {
    require(&layout.shifts(kind), Stage::Gradcam)?;
    read_csv(&layout.shifts(kind))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub train_accuracy: f64,
    pub test_accuracy: Option<f64>,
    pub final_loss: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub seed: u64,
    /// SHA-256 of every intermediate file, keyed by path relative to the run directory.
    pub files: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub provenance: Provenance,
    pub config: RunConfig,
    pub model: ModelSummary,
    pub attacks: Vec<AttackSummary>,
    pub metrics: Vec<MetricCell>,
    pub shifts: Vec<AttackShift>,
}

impl Report {
    pub fn cell(&self, detector: &str, source: &str) -> Option<&EvalResult> {
        self.metrics.iter().find(|c| c.detector == detector && c.ood_source == source)?.result.as_ref()
    }

    pub fn attack(&self, kind: AttackKind) -> Option<&AttackSummary> {
        self.attacks.iter().find(|a| a.attack == kind.name())
    }
}

fn hash_tree(root: &Path, dir: &Path, out: &mut BTreeMap<String, String>) -> Result<()> {
    let mut entries: Vec<_> = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?.collect::<std::io::Result<_>>().map_err(|e| Error::io(dir, e))?;
    entries.sort_by_key(|e| e.path());
    for e in entries {
        let p = e.path();
        if p.is_dir() {
            hash_tree(root, &p, out)?;
        } else {
            let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
            let rel = p.strip_prefix(root).unwrap_or(&p).to_string_lossy().replace('\\', "/");
            out.insert(rel, data::hex(&Sha256::digest(&bytes)));
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct ReportRow<'a> {
    detector: &'a str,
    ood_source: &'a str,
    fpr95: Option<f64>,
    auroc: Option<f64>,
    aupr_in: Option<f64>,
    aupr_out: Option<f64>,
    failure: Option<&'a str>,
}

fn pct(v: f64) -> String {
    format!("{:.2}", 100.0 * v)
}

pub fn render_markdown(r: &Report) -> String {
    let mut s = String::new();
    s.push_str("# Post-hoc OOD detectors under evasion attacks\n\n");
    s.push_str(&format!("config hash `{}`, seed {}\n\n", r.provenance.config_hash, r.provenance.seed));
    s.push_str(&format!(
        "Model: train accuracy {}%, test accuracy {}\n\n",
        pct(r.model.train_accuracy),
        r.model.test_accuracy.map_or("n/a".into(), |a| format!("{}%", pct(a)))
    ));
    s.push_str("## Attack success rate\n\n| attack | ASR (%) | correct | flipped | mean Linf | mean L2 |\n|---|---|---|---|---|---|\n");
    for a in &r.attacks {
        s.push_str(&format!(
            "| {} | {} | {} | {} | {:.4} | {:.4} |\n",
            a.attack,
            pct(a.asr),
            a.n_correct,
            a.n_success,
            a.mean_linf,
            a.mean_l2
        ));
    }
    s.push_str("\n## Detection (FPR95 / AUROC, %)\n\n| detector |");
    for src in &r.config.ood_sources {
        s.push_str(&format!(" {src} |"));
    }
    s.push_str("\n|---|");
    s.push_str(&"---|".repeat(r.config.ood_sources.len()));
    s.push('\n');
    for spec in &r.config.detectors {
        s.push_str(&format!("| {} |", spec.kind));
        for src in &r.config.ood_sources {
            match r.cell(&spec.kind, src) {
                Some(e) => s.push_str(&format!(" {} / {} |", pct(e.fpr95), pct(e.auroc))),
                None => s.push_str(" failed |"),
            }
        }
        s.push('\n');
    }
    s.push_str("\n## Grad-CAM attention shift\n\n| attack | pairs | flipped | mean L2 | mean SSIM |\n|---|---|---|---|---|\n");
    for sh in &r.shifts {
        s.push_str(&format!(
            "| {} | {} | {} | {:.4} | {:.4} |\n",
            sh.attack, sh.density.total, sh.flipped, sh.density.mean_l2, sh.density.mean_ssim
        ));
    }
    let failed: Vec<_> = r.metrics.iter().filter_map(|c| c.failure.as_ref().map(|f| (c, f))).collect();
    if !failed.is_empty() {
        s.push_str("\n## Failed cells\n\n");
        for (c, f) in failed {
            s.push_str(&format!("- {} / {}: {}\n", c.detector, c.ood_source, f));
        }
    }
    s
}

/// Assembles the report from persisted intermediates only.
pub fn report(cfg: &RunConfig, layout: &Layout) -> Result<Report> {
    let ck = load_model(layout)?;
    let attacks =
        cfg.attacks.iter().map(|a| {
            let p = layout.attack_summary(a.kind);
            require(&p, Stage::Attack)?;
            read_json(&p)
        }).collect::<Result<Vec<AttackSummary>>>()?;
    require(&layout.metrics(), Stage::Evaluate)?;
    let metrics: Vec<MetricCell> = read_json(&layout.metrics())?;
    require(&layout.density(), Stage::Gradcam)?;
    let shifts: Vec<AttackShift> = read_json(&layout.density())?;
    let mut files = BTreeMap::new();
    for sub in ["data", "model", "attacks", "detectors", "scores", "eval", "gradcam"] {
        let dir = layout.root.join(sub);
        if dir.exists() {
            hash_tree(&layout.root, &dir, &mut files)?;
        }
    }
    let r = Report {
        provenance: Provenance { config_hash: cfg.hash(), seed: cfg.seed, files },
        config: cfg.clone(),
        model: ModelSummary {
            train_accuracy: ck.meta.train_accuracy,
            test_accuracy: ck.meta.test_accuracy,
            final_loss: ck.meta.final_loss,
        },
        attacks,
        metrics,
        shifts,
    };
    write_json(&layout.report_json(), &r)?;
    let rows: Vec<ReportRow> = r
        .metrics
        .iter()
        .map(|c| ReportRow {
            detector: &c.detector,
            ood_source: &c.ood_source,
            fpr95: c.result.as_ref().map(|e| e.fpr95),
            auroc: c.result.as_ref().map(|e| e.auroc),
            aupr_in: c.result.as_ref().map(|e| e.aupr_in),
            aupr_out: c.result.as_ref().map(|e| e.aupr_out),
            failure: c.failure.as_deref(),
        })
        .collect();
    write_csv(&layout.report_csv(), &rows)?;
    fs::write(layout.report_md(), render_markdown(&r)).map_err(|e| Error::io(layout.report_md(), e))?;
    Ok(r)
}

pub fn run_stage(stage: Stage, cfg: &RunConfig, layout: &Layout) -> Result<()> {
    match stage {
        Stage::GenData => gen_data(cfg, layout),
        Stage::Train => train(cfg, layout).map(drop),
        Stage::Attack => attack(cfg, layout).map(drop),
        Stage::FitDetectors => fit_detectors(cfg, layout).map(drop),
        Stage::Score => score(cfg, layout).map(drop),
        Stage::Evaluate => evaluate(cfg, layout).map(drop),
        Stage::Gradcam => gradcam_stage(cfg, layout).map(drop),
        Stage::Report => report(cfg, layout).map(drop),
    }
}

/// Runs every stage from `from` (default: the first) through the report.
pub fn run(cfg: &RunConfig, layout: &Layout, from: Option<Stage>) -> Result<Report> {
    cfg.validate()?;
    fs::create_dir_all(&layout.root).map_err(|e| Error::io(&layout.root, e))?;
    let start = from.unwrap_or(Stage::GenData);
    for stage in Stage::ALL.into_iter().filter(|s| *s >= start && *s != Stage::Report) {
        run_stage(stage, cfg, layout)?;
    }
    report(cfg, layout)
}
