//! Router pretraining and fusion fine-tuning loops.

use std::io::Write;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{adam_step, AdamState};
use crate::data::{mix_noise, Corpus, NoiseType, PairedSample, BOS, EOS};
use crate::error::{Error, Result};
use crate::fusion::{argmax, FusionConfig, FusionModel};
use crate::nn::Graph;
use crate::router::{draw_mask, local_gate, total_pretrain_loss, LossWeights, ReliabilityScores, RouterConfig, RouterModel};
use crate::seed::{derive_seed, rng};
use crate::tensor::Tensor;

/// Audio condition used while fine-tuning.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseCondition {
    Clean,
    /// Every utterance gets a uniformly drawn noise type mixed at exactly 0 dB.
    Noisy,
}

impl std::fmt::Display for NoiseCondition {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            NoiseCondition::Clean => "clean",
            NoiseCondition::Noisy => "noisy",
        })
    }
}

impl std::str::FromStr for NoiseCondition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "clean" => Ok(NoiseCondition::Clean),
            "noisy" => Ok(NoiseCondition::Noisy),
            _ => Err(Error::InvalidArgument(format!("unknown condition {s:?} (expected clean or noisy)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Linear warmup length; `None` means 5% of `steps`.
    pub warmup_steps: Option<usize>,
    pub loss_weights: LossWeights,
    /// Encoder stays frozen for the first `round(tau_fraction·steps)` fine-tuning steps.
    pub tau_fraction: f64,
    pub noise_condition: NoiseCondition,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            batch_size: 8,
            lr: 1e-3,
            warmup_steps: None,
            loss_weights: LossWeights::default(),
            tau_fraction: 0.5,
            noise_condition: NoiseCondition::Clean,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn violations(&self, section: &str) -> Vec<String> {
        let mut v = Vec::new();
        if self.steps == 0 {
            v.push(format!("{section}.steps must be >= 1"));
        }
        if self.batch_size == 0 {
            v.push(format!("{section}.batch_size must be >= 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            v.push(format!("{section}.lr must be a finite value > 0 (got {})", self.lr));
        }
        if !(0.0..=1.0).contains(&self.tau_fraction) {
            v.push(format!("{section}.tau_fraction must lie in [0, 1] (got {})", self.tau_fraction));
        }
        v.extend(self.loss_weights.violations().into_iter().map(|m| format!("{section}.{m}")));
        v
    }

    pub fn warmup(&self) -> usize {
        self.warmup_steps.unwrap_or_else(|| (0.05 * self.steps as f64).round() as usize)
    }

    /// Number of initial fine-tuning steps with a frozen encoder.
    pub fn tau(&self) -> usize {
        (self.tau_fraction * self.steps as f64).round() as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PretrainRecord {
    pub step: usize,
    pub total: f64,
    pub contrastive: f64,
    pub reconstruction: f64,
    /// Generator-side adversarial term.
    pub adversarial: f64,
    pub critic: f64,
    /// Largest critic weight magnitude right after clipping.
    pub critic_max_abs: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FinetuneRecord {
    pub step: usize,
    pub ce: f64,
    pub token_acc: f64,
}

fn check_corpus(corpus: &Corpus) -> Result<()> {
    if corpus.is_empty() {
        return Err(Error::InvalidArgument("training corpus is empty".into()));
    }
    Ok(())
}

fn batch_indices(r: &mut impl Rng, n: usize, size: usize) -> Vec<usize> {
    (0..size).map(|_| r.gen_range(0..n)).collect()
}

/// Pretrains a router from scratch on clean paired data.
pub fn pretrain_router(corpus: &Corpus, router: RouterConfig, cfg: &TrainConfig) -> Result<(RouterModel, Vec<PretrainRecord>)> {
    let model = RouterModel::new(router, derive_seed(cfg.seed, "router-init"))?;
    pretrain_router_from(model, corpus, cfg, true)
}

/// Runs pretraining starting from `model`.
///
/// With `critic_in_generator = false` the adversarial term is left out of
/// the generator objective altogether (the critic is still trained).
pub fn pretrain_router_from(
    mut model: RouterModel,
    corpus: &Corpus,
    cfg: &TrainConfig,
    critic_in_generator: bool,
) -> Result<(RouterModel, Vec<PretrainRecord>)> {
    let bad = cfg.violations("pretrain");
    if !bad.is_empty() {
        return Err(Error::Config(bad));
    }
    check_corpus(corpus)?;
    let n_params = model.store.len();
    let critic_mask: Vec<bool> = model.store.ids().map(|id| model.is_critic(id)).collect();
    let generator_mask: Vec<bool> = critic_mask.iter().map(|c| !c).collect();
    let mut gen_opt = AdamState::new(model.store.tensors(), cfg.lr, cfg.warmup() as u64);
    let mut critic_opt = AdamState::new(model.store.tensors(), cfg.lr, cfg.warmup() as u64);
    let mut batch_rng = rng(derive_seed(cfg.seed, "pretrain-batches"));
    let mut mask_rng = rng(derive_seed(cfg.seed, "pretrain-masks"));
    let inv_b = 1.0 / cfg.batch_size as f64;
    let mut records = Vec::with_capacity(cfg.steps);

    for step in 1..=cfg.steps {
        let batch = batch_indices(&mut batch_rng, corpus.len(), cfg.batch_size);

        // Generator update: everything except the critic.
        let (grads, latents, record) = {
            let mut g = Graph::with_mask(&model.store, generator_mask.clone());
            let mut sums: Option<(_, _, _)> = None;
            let mut latents = Vec::with_capacity(batch.len());
            for &i in &batch {
                let s = &corpus.samples[i];
                let tp = s.frames().div_ceil(model.config.patch_len);
                let mask = draw_mask(tp, model.config.mask_ratio, &mut mask_rng)?;
                let t = model.pretrain_terms(&mut g, &s.audio, &s.video, &mask)?;
                latents.push((g.value(t.real).clone(), g.value(t.translated).clone()));
                sums = Some(match sums {
                    None => (t.contrastive, t.reconstruction, t.generator),
                    Some((c, r, a)) => (
                        g.tape.add(c, t.contrastive)?,
                        g.tape.add(r, t.reconstruction)?,
                        g.tape.add(a, t.generator)?,
                    ),
                });
            }
            let (c, r, a) = sums.expect("batch_size >= 1");
            let (c, r, a) = (g.tape.scale(c, inv_b), g.tape.scale(r, inv_b), g.tape.scale(a, inv_b));
            let adv_term = if critic_in_generator { a } else { g.constant(Tensor::scalar(0.0)) };
            let total = total_pretrain_loss(&mut g.tape, c, r, adv_term, &cfg.loss_weights)?;
            let total_v = g.value(total).item();
            if !total_v.is_finite() {
                return Err(Error::Diverged { step, detail: format!("pretraining loss is {total_v}") });
            }
            g.backward(total)?;
            let record = PretrainRecord {
                step,
                total: total_v,
                contrastive: g.value(c).item(),
                reconstruction: g.value(r).item(),
                adversarial: g.value(a).item(),
                critic: 0.0,
                critic_max_abs: 0.0,
            };
            (g.param_grads(), latents, record)
        };
        adam_step(model.store.tensors_mut(), &grads, &mut gen_opt);

        // Critic update on the detached latents, then clipping.
        let (critic_grads, critic_loss) = {
            let mut g = Graph::with_mask(&model.store, critic_mask.clone());
            let mut sum = None;
            for (real, fake) in latents {
                let real = g.constant(real);
                let fake = g.constant(fake);
                let (l, _) = model.adversarial_losses(&mut g, real, fake)?;
                sum = Some(match sum {
                    None => l,
                    Some(acc) => g.tape.add(acc, l)?,
                });
            }
            let loss = g.tape.scale(sum.expect("batch_size >= 1"), inv_b);
            let v = g.value(loss).item();
            if !v.is_finite() {
                return Err(Error::Diverged { step, detail: format!("critic loss is {v}") });
            }
            g.backward(loss)?;
            (g.param_grads(), v)
        };
        debug_assert_eq!(critic_grads.len(), n_params);
        adam_step(model.store.tensors_mut(), &critic_grads, &mut critic_opt);
        model.clip_critic();

        records.push(PretrainRecord { critic: critic_loss, critic_max_abs: model.critic_max_abs(), ..record });
    }
    Ok((model, records))
}

/// Audio actually fed to the model for one fine-tuning draw.
fn condition_audio(
    corpus: &Corpus,
    index: usize,
    condition: NoiseCondition,
    seed: u64,
) -> Result<(Tensor, NoiseType)> {
    let s = &corpus.samples[index];
    match condition {
        NoiseCondition::Clean => Ok((s.audio.clone(), NoiseType::None)),
        NoiseCondition::Noisy => {
            let mut r = rng(seed);
            let kind = NoiseType::CORRUPTING[r.gen_range(0..NoiseType::CORRUPTING.len())];
            let sources = corpus.babble_sources(index, &mut r);
            Ok((mix_noise(&s.audio, kind, 0.0, seed, &sources)?, kind))
        }
    }
}

/// Decoder input `[BOS, y…]` and targets `[y…, EOS]`.
pub fn teacher_forcing_pair(tokens: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let mut input = Vec::with_capacity(tokens.len() + 1);
    input.push(BOS);
    input.extend_from_slice(tokens);
    let mut target = tokens.to_vec();
    target.push(EOS);
    (input, target)
}

/// Teacher-forced CE and the number of correct argmax predictions for one utterance.
fn utterance_loss(
    g: &mut Graph,
    model: &FusionModel,
    audio: &Tensor,
    sample: &PairedSample,
    scores: Option<&ReliabilityScores>,
) -> Result<(crate::autodiff::Var, usize, usize)> {
    let (input, target) = teacher_forcing_pair(&sample.tokens);
    let lambda = match (model.variant().gate(), scores) {
        (Some(v), Some(s)) => Some(local_gate(s, input.len(), v)?),
        (Some(_), None) => return Err(Error::InvalidArgument("gated model needs router scores".into())),
        (None, _) => None,
    };
    let memory = model.memory(g, audio, &sample.video)?;
    let logits = model.decoder_forward(g, &input, memory, lambda.as_ref())?;
    let correct = (0..target.len()).filter(|&i| argmax(g.value(logits).row(i)) == target[i]).count();
    let ce = g.tape.cross_entropy(logits, &target, usize::MAX)?;
    Ok((ce, correct, target.len()))
}

/// Fine-tunes a fresh fusion model with the router frozen.
pub fn finetune(
    corpus: &Corpus,
    router: &RouterModel,
    model: FusionConfig,
    cfg: &TrainConfig,
) -> Result<(FusionModel, Vec<FinetuneRecord>)> {
    let model = FusionModel::new(model, derive_seed(cfg.seed, "fusion-init"))?;
    finetune_from(model, corpus, router, cfg, |_, _| {})
}

/// Fine-tunes `model`, calling `observe(step, model)` after every update (`step` counts from 0).
///
/// Encoder parameters are excluded from the optimizer for steps `< tau`.
pub fn finetune_from(
    mut model: FusionModel,
    corpus: &Corpus,
    router: &RouterModel,
    cfg: &TrainConfig,
    mut observe: impl FnMut(usize, &FusionModel),
) -> Result<(FusionModel, Vec<FinetuneRecord>)> {
    let bad = cfg.violations("finetune");
    if !bad.is_empty() {
        return Err(Error::Config(bad));
    }
    check_corpus(corpus)?;
    let router_sum = router.store.checksum();
    let gated = model.variant().gate().is_some();
    let tau = cfg.tau();
    let encoder: Vec<bool> = model.store.ids().map(|id| model.is_encoder_param(id)).collect();
    let frozen_mask: Vec<bool> = encoder.iter().map(|e| !e).collect();
    let all_mask = vec![true; encoder.len()];
    let mut opt = AdamState::new(model.store.tensors(), cfg.lr, cfg.warmup() as u64);
    let mut batch_rng = rng(derive_seed(cfg.seed, "finetune-batches"));
    let noise_base = derive_seed(cfg.seed, "finetune-noise");
    // Clean audio always yields the same scores, so they are computed once.
    let mut clean_scores: Vec<Option<ReliabilityScores>> = vec![None; corpus.len()];
    let mut records = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let batch = batch_indices(&mut batch_rng, corpus.len(), cfg.batch_size);
        let mut inputs = Vec::with_capacity(batch.len());
        for (k, &i) in batch.iter().enumerate() {
            let draw_seed = noise_base ^ ((step as u64) << 20 | k as u64);
            let (audio, kind) = condition_audio(corpus, i, cfg.noise_condition, draw_seed)?;
            let scores = if !gated {
                None
            } else if kind == NoiseType::None {
                if clean_scores[i].is_none() {
                    clean_scores[i] = Some(router.score(&audio, &corpus.samples[i].video)?);
                }
                clean_scores[i].clone()
            } else {
                Some(router.score(&audio, &corpus.samples[i].video)?)
            };
            inputs.push((i, audio, scores));
        }

        let mask = if step < tau { frozen_mask.clone() } else { all_mask.clone() };
        let (grads, ce, acc) = {
            let mut g = Graph::with_mask(&model.store, mask);
            let mut sum = None;
            let (mut correct, mut total) = (0, 0);
            for (i, audio, scores) in &inputs {
                let (l, c, n) = utterance_loss(&mut g, &model, audio, &corpus.samples[*i], scores.as_ref())?;
                correct += c;
                total += n;
                sum = Some(match sum {
                    None => l,
                    Some(acc) => g.tape.add(acc, l)?,
                });
            }
            let loss = g.tape.scale(sum.expect("batch_size >= 1"), 1.0 / inputs.len() as f64);
            let ce = g.value(loss).item();
            if !ce.is_finite() {
                return Err(Error::Diverged { step, detail: format!("fine-tuning loss is {ce}") });
            }
            g.backward(loss)?;
            (g.param_grads(), ce, correct as f64 / total as f64)
        };
        adam_step(model.store.tensors_mut(), &grads, &mut opt);
        records.push(FinetuneRecord { step: step + 1, ce, token_acc: acc });
        observe(step, &model);
    }

    if router.store.checksum() != router_sum {
        return Err(Error::RouterMutated);
    }
    Ok((model, records))
}

/// Scores for every utterance of a corpus, in order.
pub fn score_corpus(router: &RouterModel, corpus: &Corpus) -> Result<Vec<ReliabilityScores>> {
    corpus.samples.iter().map(|s| router.score(&s.audio, &s.video)).collect()
}

/// Teacher-forced token accuracy over a corpus (EOS included).
pub fn teacher_forced_accuracy(model: &FusionModel, router: &RouterModel, corpus: &Corpus) -> Result<f64> {
    let (mut correct, mut total) = (0, 0);
    for s in &corpus.samples {
        let scores = match model.variant().gate() {
            Some(_) => Some(router.score(&s.audio, &s.video)?),
            None => None,
        };
        let mut g = Graph::frozen(&model.store);
        let (_, c, n) = utterance_loss(&mut g, model, &s.audio, s, scores.as_ref())?;
        correct += c;
        total += n;
    }
    Ok(if total == 0 { 0.0 } else { correct as f64 / total as f64 })
}

fn write_file(path: &Path, body: &str) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(body.as_bytes()).map_err(|e| Error::io(path, e))
}

pub fn write_pretrain_csv(path: impl AsRef<Path>, records: &[PretrainRecord]) -> Result<()> {
    let mut s = String::from("step,loss_total,loss_c,loss_r,loss_adv\n");
    for r in records {
        s.push_str(&format!("{},{},{},{},{}\n", r.step, r.total, r.contrastive, r.reconstruction, r.adversarial));
    }
    write_file(path.as_ref(), &s)
}

pub fn write_finetune_csv(path: impl AsRef<Path>, records: &[FinetuneRecord]) -> Result<()> {
    let mut s = String::from("step,ce,token_acc\n");
    for r in records {
        s.push_str(&format!("{},{},{}\n", r.step, r.ce, r.token_acc));
    }
    write_file(path.as_ref(), &s)
}

/// Trailing moving average over `window` values.
pub fn smoothed(values: &[f64], window: usize) -> Vec<f64> {
    let w = window.max(1);
    (0..values.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(w);
            values[lo..=i].iter().sum::<f64>() / (i + 1 - lo) as f64
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_corpus, CorpusConfig};
    use crate::fusion::Variant;

    fn tiny_corpus() -> Corpus {
        let cfg = CorpusConfig { n_train: 12, n_test: 2, audio_dim: 4, video_dim: 4, vocab_size: 8, ..CorpusConfig::default() };
        gen_corpus(&cfg).unwrap().0
    }

    fn tiny_router_cfg() -> RouterConfig {
        RouterConfig { audio_dim: 4, video_dim: 4, d_model: 8, heads: 2, ffn_hidden: 8, critic_hidden: 4, ..RouterConfig::default() }
    }

    fn tiny_fusion_cfg(variant: Variant) -> FusionConfig {
        FusionConfig {
            audio_dim: 4,
            video_dim: 4,
            vocab_size: 8,
            d_model: 8,
            heads: 2,
            enc_layers: 1,
            dec_layers: 1,
            ffn_hidden: 8,
            variant,
        }
    }

    #[test]
    fn tau_and_warmup_resolution() {
        let c = TrainConfig { steps: 20, ..TrainConfig::default() };
        assert_eq!(c.tau(), 10);
        assert_eq!(c.warmup(), 1);
        assert_eq!(TrainConfig { steps: 3, tau_fraction: 0.5, ..c.clone() }.tau(), 2);
        assert_eq!(TrainConfig { warmup_steps: Some(0), ..c }.warmup(), 0);
    }

    #[test]
    fn config_violations_are_all_listed() {
        let c = TrainConfig { steps: 0, batch_size: 0, tau_fraction: 1.5, ..TrainConfig::default() };
        assert_eq!(c.violations("x").len(), 3);
    }

    #[test]
    fn teacher_forcing_shifts_by_one() {
        let (i, t) = teacher_forcing_pair(&[5, 6, 7]);
        assert_eq!(i, vec![BOS, 5, 6, 7]);
        assert_eq!(t, vec![5, 6, 7, EOS]);
    }

    #[test]
    fn pretraining_is_deterministic_and_keeps_critic_clipped() {
        let corpus = tiny_corpus();
        let cfg = TrainConfig { steps: 3, batch_size: 2, ..TrainConfig::default() };
        let (m1, r1) = pretrain_router(&corpus, tiny_router_cfg(), &cfg).unwrap();
        let (m2, r2) = pretrain_router(&corpus, tiny_router_cfg(), &cfg).unwrap();
        assert_eq!(r1, r2);
        assert_eq!(m1.store.checksum(), m2.store.checksum());
        assert!(r1.iter().all(|r| r.critic_max_abs <= m1.config.critic_clip));
    }

    #[test]
    fn zero_adversarial_weight_matches_excluded_critic() {
        let corpus = tiny_corpus();
        let weights = LossWeights { adversarial: 0.0, ..LossWeights::default() };
        let cfg = TrainConfig { steps: 2, batch_size: 2, loss_weights: weights, ..TrainConfig::default() };
        let init = RouterModel::new(tiny_router_cfg(), 3).unwrap();
        let (a, ra) = pretrain_router_from(init.clone(), &corpus, &cfg, true).unwrap();
        let (b, rb) = pretrain_router_from(init, &corpus, &cfg, false).unwrap();
        assert_eq!(a.store.checksum(), b.store.checksum());
        for (x, y) in ra.iter().zip(&rb) {
            assert_eq!(x.total.to_bits(), y.total.to_bits());
        }
    }

    #[test]
    fn finetune_freezes_encoder_then_releases_it() {
        let corpus = tiny_corpus();
        let router = RouterModel::new(tiny_router_cfg(), 1).unwrap();
        let model = FusionModel::new(tiny_fusion_cfg(Variant::Ours), 2).unwrap();
        let enc_ids: Vec<_> = model.store.ids().filter(|&id| model.is_encoder_param(id)).collect();
        let initial: Vec<Tensor> = enc_ids.iter().map(|&id| model.store.get(id).clone()).collect();
        let cfg = TrainConfig { steps: 6, batch_size: 2, tau_fraction: 0.5, ..TrainConfig::default() };
        let mut changed_at = Vec::new();
        finetune_from(model, &corpus, &router, &cfg, |step, m| {
            let same = enc_ids.iter().zip(&initial).all(|(&id, t)| m.store.get(id).bitwise_eq(t));
            changed_at.push((step, !same));
        })
        .unwrap();
        assert_eq!(changed_at, vec![(0, false), (1, false), (2, false), (3, true), (4, true), (5, true)]);
    }

    #[test]
    fn noisy_finetune_runs_for_every_variant() {
        let corpus = tiny_corpus();
        let router = RouterModel::new(tiny_router_cfg(), 1).unwrap();
        for v in Variant::ALL {
            let cfg = TrainConfig { steps: 2, batch_size: 2, noise_condition: NoiseCondition::Noisy, ..TrainConfig::default() };
            let (_, recs) = finetune(&corpus, &router, tiny_fusion_cfg(v), &cfg).unwrap();
            assert_eq!(recs.len(), 2);
            assert!(recs.iter().all(|r| r.ce.is_finite() && (0.0..=1.0).contains(&r.token_acc)));
        }
    }

    #[test]
    fn smoothing_window() {
        assert_eq!(smoothed(&[1.0, 3.0, 5.0], 2), vec![1.0, 2.0, 4.0]);
    }
}
