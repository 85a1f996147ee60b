//! The whole pipeline at desk defaults: corpus, router pretraining, the
//! gated model and the self-attention baseline fine-tuned on noisy audio,
//! and the evaluation matrix.
//!
//! cargo run --release --example quickstart -- [config.toml] [out_dir]

use std::path::PathBuf;

use rgf::cli::quickstart;
use rgf::config::RunConfig;

fn main() -> rgf::Result<()> {
    let mut args = std::env::args().skip(1);
    let mut cfg = match args.next() {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::load(concat!(env!("CARGO_MANIFEST_DIR"), "/configs/quickstart.toml"))?,
    };
    if let Some(out) = args.next() {
        cfg.out_dir = PathBuf::from(out);
    }
    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| rgf::Error::io(&cfg.out_dir, e))?;
    cfg.write_resolved(&cfg.out_dir)?;
    let started = std::time::Instant::now();
    let report = quickstart(&cfg, &cfg.out_dir)?;
    println!("{}", report.to_markdown());
    println!("artifacts in {} ({:.0} s)", cfg.out_dir.display(), started.elapsed().as_secs_f64());
    Ok(())
}
