//! Pretrains the reliability router on clean pairs and shows how its video
//! score falls as audio noise rises.
//!
//! cargo run --release --example router_scores -- [steps]

use rgf::config::RunConfig;
use rgf::data::gen_corpus;
use rgf::eval::{score_sweep, sweep_markdown};
use rgf::training::pretrain_router;

fn main() -> rgf::Result<()> {
    let steps = std::env::args().nth(1).map_or(Ok(1500), |s| s.parse()).expect("steps must be an integer");
    let mut cfg = RunConfig::default();
    cfg.pretrain.steps = steps;
    let (train, test) = gen_corpus(&cfg.corpus)?;
    let (router, records) = pretrain_router(&train, cfg.router.clone(), &cfg.pretrain)?;
    for r in records.iter().step_by((steps / 5).max(1)) {
        println!(
            "step {:>5}  total {:+.4}  contrastive {:.4}  reconstruction {:.4}  adversarial {:+.4}",
            r.step, r.total, r.contrastive, r.reconstruction, r.adversarial
        );
    }
    let points = score_sweep(&router, &test, &cfg.eval.noise_types, &cfg.eval.snrs, cfg.eval_seed())?;
    println!("\n{}", sweep_markdown(&points));
    Ok(())
}
