//! Scores features and logits produced by an external model. Any tool that can
//! write the AOTB layout (`features [N,D]`, `logits [N,C]`, optional `labels`)
//! can feed the detectors without this crate's classifier.
//!
//! ```text
//! cargo run --release --example import_external_taps -- [dir]
//! ```

use advood::data::{load_tensors, save_taps, Loaded};
use advood::detectors::{fit, DetectorKind, DetectorParams, IdStats, ScoreContext};
use advood::metrics::auroc;
use advood::model::ForwardTaps;
use advood::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Class-clustered nonnegative features with a fixed linear head, standing in
/// for a real backbone's penultimate layer.
fn fake_taps(rng: &mut ChaCha8Rng, n: usize, spread: f64, head: &Tensor) -> (ForwardTaps, Vec<usize>) {
    let (c, d) = head.dims2().unwrap();
    let labels: Vec<usize> = (0..n).map(|i| i % c).collect();
    let mut f = Vec::with_capacity(n * d);
    for &l in &labels {
        for j in 0..d {
            let centre = if j % c == l { 2.0 } else { 0.2 };
            f.push((centre + spread * rng.gen_range(-1.0..1.0f64)).max(0.0));
        }
    }
    let features = Tensor::new(vec![n, d], f).unwrap();
    let logits: Vec<f64> = features
        .rows()
        .flat_map(|r| (0..c).map(|k| (0..d).map(|j| head.data()[k * d + j] * r[j]).sum::<f64>()).collect::<Vec<_>>())
        .collect();
    let taps = ForwardTaps::from_features_logits(features, Tensor::new(vec![n, c], logits).unwrap()).unwrap();
    (taps, labels)
}

fn load(path: &std::path::Path) -> advood::Result<(ForwardTaps, Option<Vec<usize>>)> {
    match load_tensors(path)? {
        Loaded::Taps { taps, labels } => Ok((taps, labels)),
        _ => Err(advood::Error::InvalidArgument(format!("{} holds images, not taps", path.display()))),
    }
}

fn main() -> advood::Result<()> {
    let dir = std::env::args().nth(1).map(std::path::PathBuf::from).unwrap_or_else(std::env::temp_dir);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (c, d) = (5, 20);
    let head = Tensor::new(vec![c, d], (0..c * d).map(|i| if i % d % c == i / d { 1.0 } else { -0.1 }).collect())?;

    let (train, labels) = fake_taps(&mut rng, 500, 0.5, &head);
    let (id_test, _) = fake_taps(&mut rng, 200, 0.5, &head);
    let (ood, _) = fake_taps(&mut rng, 200, 2.5, &head);
    for (name, t, l) in [("train", &train, Some(labels.as_slice())), ("id", &id_test, None), ("ood", &ood, None)] {
        save_taps(&dir.join(format!("taps_{name}.aotb")), t, l)?;
    }

    let (train, labels) = load(&dir.join("taps_train.aotb"))?;
    let (id_test, _) = load(&dir.join("taps_id.aotb"))?;
    let (ood, _) = load(&dir.join("taps_ood.aotb"))?;
    // the head is known here; pass None when it is not and shaping detectors will say so
    let stats = IdStats::new(train, labels.expect("training labels"), Some((head, Tensor::zeros(&[c]))))?;

    for kind in DetectorKind::ALL {
        let result = fit(kind, &stats, &DetectorParams::default()).and_then(|s| {
            let ctx = ScoreContext::default();
            auroc(&s.score(&id_test, &ctx)?, &s.score(&ood, &ctx)?)
        });
        match result {
            Ok(a) => println!("{:<8} AUROC {a:.3}", kind.name()),
            Err(e) => println!("{:<8} skipped: {e}", kind.name()),
        }
    }
    Ok(())
}
