//! Fits all sixteen detectors on ID training taps and compares their scores
//! on ID test images, near-OOD shapes and far-OOD noise.
//!
//! ```text
//! cargo run --release --example score_detectors
//! ```

use advood::data::{generate_ood, generate_shapes, OodKind, Split};
use advood::detectors::{fit, DetectorKind, DetectorParams, IdStats, ScoreContext};
use advood::metrics::auroc;
use advood::model::{forward_with_taps, train, Architecture, TrainConfig};

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn main() -> advood::Result<()> {
    let train_set = generate_shapes(4, 300, 1, Split::Train)?;
    let test = generate_shapes(4, 50, 2, Split::Test)?;
    let ck = train(Architecture::small(4), &train_set, None, &TrainConfig::default())?;
    let net = ck.network()?;
    let stats = IdStats::from_model(&ck, &train_set)?;

    let near = generate_ood(OodKind::NearShapes, 200, 3)?.images;
    let far = generate_ood(OodKind::FarNoise, 200, 4)?.images;
    let splits = [("id", &test.images), ("near", &near), ("far", &far)];
    let taps: Vec<_> = splits.iter().map(|(_, x)| forward_with_taps(&ck, x)).collect::<advood::Result<_>>()?;

    println!("{:<8} {:>10} {:>10} {:>10} {:>9} {:>9}", "detector", "id", "near", "far", "AUC near", "AUC far");
    for kind in DetectorKind::ALL {
        let mut state = fit(kind, &stats, &DetectorParams::default())?;
        let scores: Vec<Vec<f64>> = splits
            .iter()
            .zip(&taps)
            .map(|((_, x), t)| state.score(t, &ScoreContext { model: Some(&net), images: Some(x) }))
            .collect::<advood::Result<_>>()?;
        let tau = state.calibrate(&scores[0])?;
        let flagged = state.detect(&scores[2])?.iter().filter(|&&id| !id).count();
        println!(
            "{:<8} {:>10.4} {:>10.4} {:>10.4} {:>9.3} {:>9.3}   tau {tau:.4}, {flagged}/200 noise flagged",
            kind.name(),
            mean(&scores[0]),
            mean(&scores[1]),
            mean(&scores[2]),
            auroc(&scores[0], &scores[1])?,
            auroc(&scores[0], &scores[2])?,
        );
    }
    Ok(())
}
