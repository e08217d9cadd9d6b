//! Trains the desk-scale classifier on synthetic shapes and saves a checkpoint.
//!
//! ```text
//! cargo run --release --example train_classifier -- [out.aotb]
//! ```

use std::path::PathBuf;
use std::time::Instant;

use advood::data::{generate_shapes, Split};
use advood::model::{train, Architecture, ModelCheckpoint, TrainConfig};

fn main() -> advood::Result<()> {
    let out = std::env::args().nth(1).map(PathBuf::from);
    let train_set = generate_shapes(4, 600, 1, Split::Train)?;
    let test_set = generate_shapes(4, 125, 2, Split::Test)?;

    let config = TrainConfig::default();
    let start = Instant::now();
    let ck = train(Architecture::small(4), &train_set, Some(&test_set), &config)?;
    println!(
        "trained {} epochs in {:.1}s: loss {:.4}, train acc {:.3}, test acc {:.3}",
        config.epochs,
        start.elapsed().as_secs_f64(),
        ck.meta.final_loss.unwrap_or(f64::NAN),
        ck.meta.train_accuracy,
        ck.meta.test_accuracy.unwrap_or(f64::NAN),
    );

    if let Some(path) = out {
        ck.save(&path)?;
        let back = ModelCheckpoint::load(&path)?;
        assert_eq!(back, ck);
        println!("saved {}", path.display());
    }
    Ok(())
}
