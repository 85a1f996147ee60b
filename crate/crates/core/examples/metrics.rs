//! Token error rate, alignment counts and relative error reduction.
//!
//! cargo run --example metrics

use rgf::eval::{edit_distance, rerr, wer};

fn main() -> rgf::Result<()> {
    let refs = vec![vec!["the", "cat", "sat"], vec!["on", "a", "mat"]];
    let hyps = vec![vec!["the", "cat", "sat", "down"], vec!["on", "mat"]];
    for (r, h) in refs.iter().zip(&hyps) {
        let c = edit_distance(r, h);
        println!("{r:?} -> {h:?}: S={} D={} I={}", c.substitutions, c.deletions, c.insertions);
    }
    println!("WER {:.2}%", wer(&refs, &hyps)?);
    for (base, ours) in [(13.43, 7.70), (8.60, 7.18), (35.92, 21.40)] {
        println!("RERR({base}, {ours}) = {:.2}%", rerr(base, ours)?);
    }
    Ok(())
}
