//! Grad-CAM attention shift under PGD and DeepFool: per-sample L2 and SSIM
//! between benign and adversarial maps, summarized as a 2-D density.
//!
//! ```text
//! cargo run --release --example gradcam_shift
//! ```

use advood::attacks::{run_attack, AttackConfig, AttackKind};
use advood::data::{generate_shapes, Split};
use advood::gradcam::{attention_shift, gradcam, shift_density};
use advood::model::{train, Architecture, TrainConfig};

fn main() -> advood::Result<()> {
    let train_set = generate_shapes(4, 300, 1, Split::Train)?;
    let test = generate_shapes(4, 25, 2, Split::Test)?;
    let ck = train(Architecture::small(4), &train_set, None, &TrainConfig::default())?;
    let net = ck.network()?;

    let first = test.images.select(&[0])?.reshape(vec![3, 32, 32])?;
    let m = gradcam(&ck, &first, test.labels[0])?;
    println!("map of sample 0 for class {}:", m.target_class);
    for row in m.map.rows() {
        println!("  {}", row.iter().map(|v| format!("{v:.2}")).collect::<Vec<_>>().join(" "));
    }

    for kind in [AttackKind::Pgd, AttackKind::Deepfool] {
        let r = run_attack(&net, &test.images, &test.labels, &AttackConfig::default_for(kind).with_seed(5))?;
        let recs = attention_shift(&ck, kind.name(), &test.images, &r.adversarial, &r.clean_pred, &r.adv_pred)?;
        let flipped: Vec<_> = recs.into_iter().filter(|s| s.benign_class != s.adv_class).collect();
        let d = shift_density(&flipped, 5, 5)?;
        println!("\n{} ({} flipped): mean l2 {:.3}, mean ssim {:.3}", kind.name(), d.total, d.mean_l2, d.mean_ssim);
        println!("  rows: l2 bins up to {:.2}; columns: ssim bins from {:.2} to 1", d.l2_edges[5], d.ssim_edges[0]);
        for row in &d.counts {
            println!("  {}", row.iter().map(|c| format!("{c:4}")).collect::<String>());
        }
    }
    Ok(())
}
