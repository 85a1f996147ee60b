//! All four variants (gate from s_v, gate from s_a, L2 gate, plain
//! self-attention) fine-tuned on clean and on noisy audio, evaluated on
//! every condition. Set RGF_THREADS to train and evaluate cells in parallel.
//!
//! cargo run --release --example ablation -- [config.toml] [out_dir]

use std::path::PathBuf;

use rgf::cli::ablate;
use rgf::config::RunConfig;

fn main() -> rgf::Result<()> {
    let mut args = std::env::args().skip(1);
    let mut cfg = match args.next() {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::load(concat!(env!("CARGO_MANIFEST_DIR"), "/configs/quickstart.toml"))?,
    };
    cfg.out_dir = args.next().map_or_else(|| cfg.out_dir.join("ablation"), PathBuf::from);
    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| rgf::Error::io(&cfg.out_dir, e))?;
    cfg.write_resolved(&cfg.out_dir)?;
    let report = ablate(&cfg, &cfg.out_dir)?;
    println!("{}", report.to_markdown());
    Ok(())
}
