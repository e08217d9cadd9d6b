//! Crafts FGSM, PGD, masked PGD and DeepFool examples against a classifier and
//! prints success rates and perturbation sizes.
//!
//! ```text
//! cargo run --release --example craft_attacks -- [model.aotb]
//! ```
//!
//! Without a checkpoint a small model is trained first (about half a minute).

use advood::attacks::{run_attack, AttackConfig, AttackKind};
use advood::data::{generate_shapes, Split};
use advood::model::{accuracy, train, Architecture, ModelCheckpoint, TrainConfig};

fn main() -> advood::Result<()> {
    let test = generate_shapes(4, 50, 2, Split::Test)?;
    let ck = match std::env::args().nth(1) {
        Some(p) => ModelCheckpoint::load(p.as_ref())?,
        None => {
            let train_set = generate_shapes(4, 300, 1, Split::Train)?;
            train(Architecture::small(4), &train_set, None, &TrainConfig::default())?
        }
    };
    println!("clean accuracy {:.3}", accuracy(&ck, &test.images, &test.labels)?);

    let net = ck.network()?;
    println!("{:<9} {:>6} {:>9} {:>9} {:>10}", "attack", "ASR", "mean Linf", "mean L2", "converged");
    for kind in AttackKind::ALL {
        let cfg = AttackConfig::default_for(kind).with_seed(11);
        let r = run_attack(&net, &test.images, &test.labels, &cfg)?;
        let n = r.len() as f64;
        println!(
            "{:<9} {:>6.3} {:>9.4} {:>9.4} {:>10}",
            kind.name(),
            r.asr,
            r.linf.iter().sum::<f64>() / n,
            r.l2.iter().sum::<f64>() / n,
            r.converged.iter().filter(|&&c| c).count(),
        );
    }
    Ok(())
}
