//! Synthetic shape datasets, natural OOD splits, and tensor-file import.
//!
//! Every image is 3x32x32 with pixels in `[0, 1]`. ID class `k` is one filled
//! primitive drawn with a random offset, scale, colour and pixel noise. The
//! near-OOD split renders primitives that no ID class ever uses.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::ForwardTaps;
use crate::tensor::aotb::{self, TensorMap};
use crate::tensor::Tensor;

pub const CHANNELS: usize = 3;
pub const SIDE: usize = 32;
pub const MIN_CLASSES: usize = 4;
pub const MAX_CLASSES: usize = 10;

const NOISE_SIGMA: f64 = 0.02;
const MAX_SHIFT: i32 = 4;
const BASE_RADIUS: f64 = 9.0;
const BG_VALUE: (f64, f64) = (0.15, 0.45);
const SATURATION: (f64, f64) = (0.2, 0.6);
const CONTRAST: (f64, f64) = (0.1, 0.3);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Primitive {
    Circle,
    Square,
    Triangle,
    Cross,
    Diamond,
    Ring,
    Bar,
    Saltire,
    Frame,
    InvertedTriangle,
    // held out from every ID class
    Crescent,
    LShape,
    TShape,
    TwoDots,
}

/// Primitives assigned to ID classes, in class order.
pub const ID_PRIMITIVES: [Primitive; MAX_CLASSES] = [
    Primitive::Circle,
    Primitive::Square,
    Primitive::Triangle,
    Primitive::Cross,
    Primitive::Diamond,
    Primitive::Ring,
    Primitive::Bar,
    Primitive::Saltire,
    Primitive::Frame,
    Primitive::InvertedTriangle,
];

/// Primitives rendered by the near-OOD generator.
pub const NEAR_OOD_PRIMITIVES: [Primitive; 4] =
    [Primitive::Crescent, Primitive::LShape, Primitive::TShape, Primitive::TwoDots];

impl Primitive {
    /// Membership test in shape-local coordinates, radius 1, `v` pointing down.
    fn contains(self, u: f64, v: f64) -> bool {
        let rho2 = u * u + v * v;
        let plus = |u: f64, v: f64| (u.abs() <= 0.3 && v.abs() <= 1.0) || (v.abs() <= 0.3 && u.abs() <= 1.0);
        let tri = |u: f64, v: f64| v <= 0.8 && v >= -0.9 && u.abs() <= 0.9 * (v + 0.9) / 1.7;
        match self {
            Primitive::Circle => rho2 <= 1.0,
            Primitive::Square => u.abs() <= 0.8 && v.abs() <= 0.8,
            Primitive::Triangle => tri(u, v),
            Primitive::Cross => plus(u, v),
            Primitive::Diamond => u.abs() + v.abs() <= 1.0,
            Primitive::Ring => (0.3025..=1.0).contains(&rho2),
            Primitive::Bar => u.abs() <= 1.0 && v.abs() <= 0.3,
            Primitive::Saltire => {
                let s = std::f64::consts::FRAC_1_SQRT_2;
                plus((u + v) * s, (u - v) * s)
            }
            Primitive::Frame => {
                let m = u.abs().max(v.abs());
                (0.5..=0.85).contains(&m)
            }
            Primitive::InvertedTriangle => tri(u, -v),
            Primitive::Crescent => rho2 <= 1.0 && (u - 0.45).powi(2) + v * v > 0.5625,
            Primitive::LShape => {
                ((-0.9..=-0.3).contains(&u) && v.abs() <= 0.9) || (u.abs() <= 0.9 && (0.3..=0.9).contains(&v))
            }
            Primitive::TShape => {
                ((-0.9..=-0.3).contains(&v) && u.abs() <= 0.9) || (u.abs() <= 0.3 && v.abs() <= 0.9)
            }
            Primitive::TwoDots => (u - 0.5).powi(2) + v * v <= 0.1225 || (u + 0.5).powi(2) + v * v <= 0.1225,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Generated { seed: u64 },
    File { path: PathBuf },
    Attack { kind: String },
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    /// `[N, 3, 32, 32]`
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub split: Split,
    pub provenance: Provenance,
}

impl LabeledDataset {
    pub fn new(images: Tensor, labels: Vec<usize>, num_classes: usize, split: Split, provenance: Provenance) -> Result<Self> {
        let ds = LabeledDataset { images, labels, num_classes, split, provenance };
        ds.validate()?;
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        validate_images(&self.images)?;
        if self.labels.len() != self.images.batch_len() {
            return Err(Error::Invariant(format!(
                "{} labels for {} images",
                self.labels.len(),
                self.images.batch_len()
            )));
        }
        if let Some(&bad) = self.labels.iter().find(|&&l| l >= self.num_classes) {
            return Err(Error::Invariant(format!("label {bad} outside [0, {})", self.num_classes)));
        }
        Ok(())
    }

    /// First `n` samples (or all, if fewer).
    pub fn take(&self, n: usize) -> Result<Self> {
        let n = n.min(self.len());
        Ok(LabeledDataset {
            images: self.images.slice_batch(0, n)?,
            labels: self.labels[..n].to_vec(),
            ..self.clone()
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OodKind {
    NearShapes,
    FarNoise,
    Adversarial,
}

impl OodKind {
    pub fn name(self) -> &'static str {
        match self {
            OodKind::NearShapes => "near_shapes",
            OodKind::FarNoise => "far_noise",
            OodKind::Adversarial => "adversarial",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OodDataset {
    pub images: Tensor,
    pub kind: OodKind,
    pub provenance: Provenance,
}

impl OodDataset {
    pub fn len(&self) -> usize {
        self.images.batch_len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn validate_images(images: &Tensor) -> Result<()> {
    images.dims4().map_err(|_| Error::Invariant(format!("images must be [N,C,H,W], got {:?}", images.shape())))?;
    if let Some((i, v)) = images.data().iter().enumerate().find(|(_, v)| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Invariant(format!("pixel {i} = {v} outside [0, 1]")));
    }
    Ok(())
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let c = v * s;
    let hp = h * 6.0;
    let x = c * (1.0 - ((hp % 2.0) - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

/// Renders one primitive into a `3*32*32` buffer.
fn render(prim: Primitive, rng: &mut ChaCha8Rng, noise: &Normal<f64>, out: &mut [f64]) {
    let cx = 16.0 + rng.gen_range(-MAX_SHIFT..=MAX_SHIFT) as f64;
    let cy = 16.0 + rng.gen_range(-MAX_SHIFT..=MAX_SHIFT) as f64;
    let r = BASE_RADIUS * rng.gen_range(0.8..=1.2);
    // muted colours with a modest brightness step keep the shape signal weak,
    // which is what makes undefended models fragile at eps = 8/255
    let value = rng.gen_range(BG_VALUE.0..BG_VALUE.1);
    let bg = hsv_to_rgb(rng.gen::<f64>(), rng.gen_range(SATURATION.0..SATURATION.1), value);
    let step = rng.gen_range(CONTRAST.0..CONTRAST.1);
    let fg = hsv_to_rgb(rng.gen::<f64>(), rng.gen_range(SATURATION.0..SATURATION.1), value + step);
    // 2x2 supersampling for soft edges
    const OFFS: [f64; 2] = [0.25, 0.75];
    for y in 0..SIDE {
        for x in 0..SIDE {
            let mut cover = 0.0;
            for oy in OFFS {
                for ox in OFFS {
                    let u = (x as f64 + ox - cx) / r;
                    let v = (y as f64 + oy - cy) / r;
                    if prim.contains(u, v) {
                        cover += 0.25;
                    }
                }
            }
            for c in 0..CHANNELS {
                let base = bg[c] * (1.0 - cover) + fg[c] * cover;
                out[(c * SIDE + y) * SIDE + x] = (base + noise.sample(rng)).clamp(0.0, 1.0);
            }
        }
    }
}

const IMG: usize = CHANNELS * SIDE * SIDE;

/// Class-balanced shape dataset; sample `i` has label `i % num_classes`.
pub fn generate_shapes(num_classes: usize, per_class: usize, seed: u64, split: Split) -> Result<LabeledDataset> {
    if !(MIN_CLASSES..=MAX_CLASSES).contains(&num_classes) {
        return Err(Error::InvalidArgument(format!(
            "num_classes must be in {MIN_CLASSES}..={MAX_CLASSES}, got {num_classes}"
        )));
    }
    if per_class == 0 {
        return Err(Error::InvalidArgument("per_class must be positive".into()));
    }
    let n = num_classes * per_class;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, NOISE_SIGMA).unwrap();
    let mut data = vec![0.0; n * IMG];
    let labels: Vec<usize> = (0..n).map(|i| i % num_classes).collect();
    for (img, &l) in data.chunks_mut(IMG).zip(&labels) {
        render(ID_PRIMITIVES[l], &mut rng, &noise, img);
    }
    LabeledDataset::new(
        Tensor::new(vec![n, CHANNELS, SIDE, SIDE], data)?,
        labels,
        num_classes,
        split,
        Provenance::Generated { seed },
    )
}

fn box_blur(plane: &[f64], radius: usize) -> Vec<f64> {
    let r = radius as isize;
    let s = SIDE as isize;
    let mut out = vec![0.0; plane.len()];
    for y in 0..s {
        for x in 0..s {
            let (mut acc, mut cnt) = (0.0, 0.0);
            for dy in -r..=r {
                for dx in -r..=r {
                    let (yy, xx) = (y + dy, x + dx);
                    if (0..s).contains(&yy) && (0..s).contains(&xx) {
                        acc += plane[(yy * s + xx) as usize];
                        cnt += 1.0;
                    }
                }
            }
            out[(y * s + x) as usize] = acc / cnt;
        }
    }
    out
}

/// Natural OOD images. `near_shapes` renders held-out primitives through the
/// ID pipeline; `far_noise` alternates uniform noise and blurred noise textures.
pub fn generate_ood(kind: OodKind, n: usize, seed: u64) -> Result<OodDataset> {
    if n == 0 {
        return Err(Error::InvalidArgument("generate_ood: n must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = vec![0.0; n * IMG];
    match kind {
        OodKind::NearShapes => {
            let noise = Normal::new(0.0, NOISE_SIGMA).unwrap();
            for (i, img) in data.chunks_mut(IMG).enumerate() {
                render(NEAR_OOD_PRIMITIVES[i % NEAR_OOD_PRIMITIVES.len()], &mut rng, &noise, img);
            }
        }
        OodKind::FarNoise => {
            for (i, img) in data.chunks_mut(IMG).enumerate() {
                img.iter_mut().for_each(|v| *v = rng.gen::<f64>());
                if i % 2 == 1 {
                    let radius = rng.gen_range(1..=3);
                    for plane in img.chunks_mut(SIDE * SIDE) {
                        let blurred = box_blur(plane, radius);
                        plane.copy_from_slice(&blurred);
                    }
                }
            }
        }
        OodKind::Adversarial => {
            return Err(Error::InvalidArgument(
                "adversarial OOD data comes from the attacks module, not the generator".into(),
            ))
        }
    }
    Ok(OodDataset {
        images: Tensor::new(vec![n, CHANNELS, SIDE, SIDE], data)?,
        kind,
        provenance: Provenance::Generated { seed },
    })
}

/// JSON manifest written next to every persisted dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub count: usize,
    pub kind: String,
    pub num_classes: Option<usize>,
    pub provenance: Provenance,
    /// SHA-256 of the AOTB file.
    pub checksum: String,
}

fn manifest_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

fn write_with_manifest(path: &Path, map: &TensorMap, mut manifest: DatasetManifest) -> Result<()> {
    let bytes = aotb::encode_map(map);
    manifest.checksum = hex(&Sha256::digest(&bytes));
    fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
    let mp = manifest_path(path);
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json(&mp, e))?;
    fs::write(&mp, json).map_err(|e| Error::io(mp, e))
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn save_labeled(path: &Path, ds: &LabeledDataset) -> Result<()> {
    let mut map = TensorMap::new();
    map.insert("images".into(), ds.images.clone());
    map.insert("labels".into(), Tensor::new(vec![ds.len()], ds.labels.iter().map(|&l| l as f64).collect())?);
    map.insert("num_classes".into(), Tensor::scalar(ds.num_classes as f64));
    let kind = match ds.split {
        Split::Train => "id_train",
        Split::Test => "id_test",
    };
    write_with_manifest(
        path,
        &map,
        DatasetManifest {
            count: ds.len(),
            kind: kind.into(),
            num_classes: Some(ds.num_classes),
            provenance: ds.provenance.clone(),
            checksum: String::new(),
        },
    )
}

pub fn save_ood(path: &Path, ds: &OodDataset) -> Result<()> {
    let mut map = TensorMap::new();
    map.insert("images".into(), ds.images.clone());
    write_with_manifest(
        path,
        &map,
        DatasetManifest {
            count: ds.len(),
            kind: ds.kind.name().into(),
            num_classes: None,
            provenance: ds.provenance.clone(),
            checksum: String::new(),
        },
    )
}

pub fn read_manifest(path: &Path) -> Result<Option<DatasetManifest>> {
    let mp = manifest_path(path);
    if !mp.exists() {
        return Ok(None);
    }
    let raw = fs::read_to_string(&mp).map_err(|e| Error::io(&mp, e))?;
    serde_json::from_str(&raw).map(Some).map_err(|e| Error::json(mp, e))
}

/// What an AOTB file turned out to contain.
#[derive(Clone, Debug, PartialEq)]
pub enum Loaded {
    Labeled(LabeledDataset),
    Ood(OodDataset),
    Taps { taps: ForwardTaps, labels: Option<Vec<usize>> },
}

fn labels_from(t: &Tensor) -> Result<Vec<usize>> {
    if t.rank() != 1 {
        return Err(Error::parse("labels", format!("expected rank 1, got {:?}", t.shape())));
    }
    t.data()
        .iter()
        .map(|&v| {
            if v >= 0.0 && v.fract() == 0.0 && v < u32::MAX as f64 {
                Ok(v as usize)
            } else {
                Err(Error::parse("labels", format!("label {v} is not a non-negative integer")))
            }
        })
        .collect()
}

/// Loads an AOTB file holding `images` (+ optional `labels`, `num_classes`)
/// or `features` + `logits` (+ optional `labels`).
pub fn load_tensors(path: &Path) -> Result<Loaded> {
    let mut map = aotb::read_map(path)?;
    let manifest = read_manifest(path)?;
    let labels = map.remove("labels").map(|t| labels_from(&t)).transpose()?;
    if let Some(images) = map.remove("images") {
        validate_images(&images)?;
        let provenance = Provenance::File { path: path.to_path_buf() };
        return match labels {
            Some(labels) => {
                let num_classes = match map.get("num_classes") {
                    Some(t) => t.item()? as usize,
                    None => labels.iter().max().map_or(0, |m| m + 1),
                };
                let split = match manifest.as_ref().map(|m| m.kind.as_str()) {
                    Some("id_train") => Split::Train,
                    _ => Split::Test,
                };
                Ok(Loaded::Labeled(LabeledDataset::new(images, labels, num_classes, split, provenance)?))
            }
            None => {
                let kind = match manifest.as_ref().map(|m| m.kind.as_str()) {
                    Some("near_shapes") => OodKind::NearShapes,
                    Some("far_noise") => OodKind::FarNoise,
                    _ => OodKind::Adversarial,
                };
                Ok(Loaded::Ood(OodDataset { images, kind, provenance }))
            }
        };
    }
    match (map.remove("features"), map.remove("logits")) {
        (Some(features), Some(logits)) => {
            let taps = ForwardTaps::from_features_logits(features, logits)?;
            if !taps.features.all_finite() || !taps.logits.all_finite() {
                return Err(Error::Invariant("features/logits contain non-finite values".into()));
            }
            if let Some(l) = &labels {
                if l.len() != taps.len() {
                    return Err(Error::parse("labels", format!("{} labels for {} rows", l.len(), taps.len())));
                }
            }
            Ok(Loaded::Taps { taps, labels })
        }
        (Some(_), None) => Err(Error::parse("logits", "features present without logits")),
        (None, Some(_)) => Err(Error::parse("features", "logits present without features")),
        (None, None) => Err(Error::parse("images", "file has neither `images` nor `features`/`logits` entries")),
    }
}

/// Writes precomputed model outputs in the layout [`load_tensors`] reads back.
pub fn save_taps(path: &Path, taps: &ForwardTaps, labels: Option<&[usize]>) -> Result<()> {
    let mut map = TensorMap::new();
    map.insert("features".into(), taps.features.clone());
    map.insert("logits".into(), taps.logits.clone());
    if let Some(l) = labels {
        map.insert("labels".into(), Tensor::new(vec![l.len()], l.iter().map(|&v| v as f64).collect())?);
    }
    aotb::write_map(path, &map)
}
