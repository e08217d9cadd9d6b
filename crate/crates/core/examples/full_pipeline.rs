//! Runs every stage (data, training, attacks, detectors, metrics, Grad-CAM,
//! report) into a run directory and prints the markdown summary.
//!
//! ```text
//! cargo run --release --example full_pipeline -- [out_dir] [config.json]
//! ```
//!
//! The default config takes a few minutes on one core. Stages persist their
//! outputs, so the `advood` binary can resume any of them later.

use std::path::PathBuf;

use advood::pipeline::{render_markdown, run, Layout, RunConfig};

fn main() -> advood::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = args.next().map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("advood-run"));
    let cfg = match args.next() {
        Some(p) => RunConfig::load(p.as_ref())?,
        None => RunConfig::default(),
    };
    let report = run(&cfg, &Layout::new(&out), None)?;
    print!("{}", render_markdown(&report));
    println!("\nconfig hash {}", report.provenance.config_hash);
    println!("outputs in {}", out.display());
    Ok(())
}
