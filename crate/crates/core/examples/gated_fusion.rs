//! The gated cross-attention decoder: a fresh model ignores its gated
//! branch entirely, and the router gate grows as the video score drops.
//!
//! cargo run --example gated_fusion

use rgf::fusion::{FusionConfig, FusionModel, Variant};
use rgf::nn::Graph;
use rgf::router::{local_gate, GateVariant, ReliabilityScores};
use rgf::seed::rng;
use rgf::Tensor;

fn main() -> rgf::Result<()> {
    let cfg = FusionConfig { variant: Variant::Ours, ..FusionConfig::default() };
    let model = FusionModel::new(cfg.clone(), 11)?;
    let mut r = rng(3);
    let x_a = Tensor::randn([12, cfg.audio_dim], 1.0, &mut r);
    let x_v = Tensor::randn([12, cfg.video_dim], 1.0, &mut r);
    let tokens = [1, 5, 9, 4];

    let mut g = Graph::frozen(&model.store);
    let lambda = Tensor::full([tokens.len()], 0.7);
    let memory = model.memory(&mut g, &x_a, &x_v)?;
    let e_av = memory.e_av;
    let gated = model.decoder_forward(&mut g, &tokens, memory, Some(&lambda))?;
    let plain = model.decoder_forward_without_gate_blocks(&mut g, &tokens, e_av)?;
    println!("zero-initialised gates leave logits unchanged: {}", g.value(gated).bitwise_eq(g.value(plain)));
    for (name, a, a_ffn) in model.gate_values().iter().take(2) {
        println!("  {name}: tanh(alpha) = {a}, tanh(alpha_ffn) = {a_ffn}");
    }

    println!("\nlocal gate over 6 decoder positions:");
    for s in [1.0, 0.9, 0.5, 0.0, -1.0] {
        let scores = ReliabilityScores::from_sv(vec![s; 4]);
        let gate = local_gate(&scores, 6, GateVariant::Sv)?;
        println!("  s_v = {s:+.1}  ->  lambda = {:.4}", gate.data()[0]);
    }
    let ramp = ReliabilityScores::from_sv(vec![1.0, 0.8, 0.4, 0.0]);
    println!("  ramped scores -> {:.3?}", local_gate(&ramp, 7, GateVariant::Sv)?.data());
    Ok(())
}
