//! FPR95, AUROC and both AUPR variants on two Gaussian score populations,
//! as the separation between them grows.
//!
//! ```text
//! cargo run --release --example evaluate_metrics
//! ```

use advood::metrics::{evaluate, threshold_at_tpr};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn main() -> advood::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let unit = Normal::new(0.0, 1.0).unwrap();
    let id: Vec<f64> = (0..2000).map(|_| unit.sample(&mut rng)).collect();
    println!("threshold keeping 95% of ID: {:.4}", threshold_at_tpr(&id, 0.95)?);
    println!("{:>6} {:>8} {:>8} {:>8} {:>8}", "shift", "FPR95", "AUROC", "AUPR-IN", "AUPR-OUT");
    for shift in [0.0, 0.5, 1.0, 2.0, 4.0] {
        let ood: Vec<f64> = (0..1000).map(|_| unit.sample(&mut rng) - shift).collect();
        let r = evaluate("gauss", &format!("shift {shift}"), &id, &ood)?;
        println!("{shift:>6.1} {:>8.4} {:>8.4} {:>8.4} {:>8.4}", r.fpr95, r.auroc, r.aupr_in, r.aupr_out);
    }
    Ok(())
}
