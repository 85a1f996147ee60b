//! Cross-modal reliability router.
//!
//! Two masked autoencoders (one per modality) share a latent width. Two
//! translators predict each modality's latent sequence from the other's. At
//! inference only the encoders and translators run: the cosine similarity
//! between the video latent and its audio-derived prediction tells how much
//! the audio can be trusted, patch by patch.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::checkpoint;
use crate::error::{Error, Result};
use crate::nn::{sinusoidal_positions, EncoderLayer, Graph, LayerNorm, Linear, ParamId, ParamStore};
use crate::seed::rng;
use crate::tensor::Tensor;

const ROUTER_MAGIC: &[u8; 4] = b"RGFR";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RouterConfig {
    pub audio_dim: usize,
    pub video_dim: usize,
    /// Frames per temporal patch.
    pub patch_len: usize,
    /// Latent width shared by both modalities.
    pub d_model: usize,
    pub heads: usize,
    pub enc_layers: usize,
    pub ffn_hidden: usize,
    /// Fraction of patches hidden from the encoders during pretraining.
    pub mask_ratio: f64,
    pub critic_hidden: usize,
    /// Critic weights are clipped to `[-critic_clip, critic_clip]`.
    pub critic_clip: f64,
    /// InfoNCE temperature.
    pub temperature: f64,
}

impl Default for RouterConfig {
    fn default() -> Self {
        Self {
            audio_dim: 16,
            video_dim: 16,
            patch_len: 2,
            d_model: 32,
            heads: 4,
            enc_layers: 2,
            ffn_hidden: 64,
            mask_ratio: 0.5,
            critic_hidden: 32,
            critic_clip: 0.01,
            temperature: 0.1,
        }
    }
}

impl RouterConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        for (name, x) in [
            ("audio_dim", self.audio_dim),
            ("video_dim", self.video_dim),
            ("patch_len", self.patch_len),
            ("d_model", self.d_model),
            ("heads", self.heads),
            ("ffn_hidden", self.ffn_hidden),
            ("critic_hidden", self.critic_hidden),
        ] {
            if x == 0 {
                v.push(format!("router.{name} must be >= 1"));
            }
        }
        if self.heads > 0 && self.d_model % self.heads != 0 {
            v.push(format!("router.heads ({}) must divide router.d_model ({})", self.heads, self.d_model));
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            v.push(format!("router.mask_ratio must lie in (0, 1) (got {})", self.mask_ratio));
        }
        if !(self.critic_clip > 0.0) {
            v.push(format!("router.critic_clip must be > 0 (got {})", self.critic_clip));
        }
        if !(self.temperature > 0.0) {
            v.push(format!("router.temperature must be > 0 (got {})", self.temperature));
        }
        v
    }
}

/// Which router signal drives the local gate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GateVariant {
    /// `tanh(interp(1 - s_v))`.
    Sv,
    /// `tanh(interp(1 - s_a))`.
    Sa,
    /// `tanh(interp(|v - v̂| / sqrt(d)))`.
    L2,
}

impl std::fmt::Display for GateVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            GateVariant::Sv => "sv",
            GateVariant::Sa => "sa",
            GateVariant::L2 => "l2",
        })
    }
}

/// Per-patch router outputs for one utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct ReliabilityScores {
    /// `cos(v, A2V(a))` per patch.
    pub s_v: Tensor,
    /// `cos(a, V2A(v))` per patch.
    pub s_a: Tensor,
    /// `|v - A2V(a)| / sqrt(d)` per patch.
    pub v_distance: Tensor,
    pub source_len: usize,
}

impl ReliabilityScores {
    pub fn from_sv(s_v: Vec<f64>) -> Self {
        let n = s_v.len();
        Self {
            s_v: Tensor::new([n], s_v).expect("1-D"),
            s_a: Tensor::zeros([n]),
            v_distance: Tensor::zeros([n]),
            source_len: n,
        }
    }

    pub fn mean_s_v(&self) -> f64 {
        self.s_v.mean()
    }
}

/// Splits `features[T×F]` into non-overlapping temporal patches
/// `[ceil(T/patch_len) × patch_len·F]`, repeating the last frame to fill the tail.
pub fn patchify(features: &Tensor, patch_len: usize) -> Result<Tensor> {
    let (t, f) = features.dims2()?;
    if t == 0 || f == 0 {
        return Err(Error::Shape("patchify: empty feature stream".into()));
    }
    if patch_len == 0 {
        return Err(Error::InvalidArgument("patchify: patch_len must be >= 1".into()));
    }
    let tp = t.div_ceil(patch_len);
    let mut out = Vec::with_capacity(tp * patch_len * f);
    for p in 0..tp {
        for k in 0..patch_len {
            let frame = (p * patch_len + k).min(t - 1);
            out.extend_from_slice(features.row(frame));
        }
    }
    Tensor::new([tp, patch_len * f], out)
}

/// Endpoint-aligned linear interpolation of `src` to `n` points.
/// A single source value is broadcast; `n == 1` takes the first source value.
pub fn interpolate(src: &[f64], n: usize) -> Vec<f64> {
    let t = src.len();
    (0..n)
        .map(|j| {
            if t == 1 || n == 1 {
                return src[0];
            }
            let pos = j as f64 * (t - 1) as f64 / (n - 1) as f64;
            let i0 = (pos.floor() as usize).min(t - 1);
            let i1 = (i0 + 1).min(t - 1);
            let w = pos - i0 as f64;
            if w == 0.0 {
                src[i0]
            } else {
                (1.0 - w) * src[i0] + w * src[i1]
            }
        })
        .collect()
}

/// Token-level visual gain `λ_local` of length `n`.
pub fn local_gate(scores: &ReliabilityScores, n: usize, variant: GateVariant) -> Result<Tensor> {
    if n == 0 {
        return Err(Error::InvalidArgument("local_gate: target length must be >= 1".into()));
    }
    if scores.source_len == 0 {
        return Err(Error::InvalidArgument("local_gate: empty score sequence".into()));
    }
    let shifted: Vec<f64> = match variant {
        GateVariant::Sv => scores.s_v.data().iter().map(|s| 1.0 - s).collect(),
        GateVariant::Sa => scores.s_a.data().iter().map(|s| 1.0 - s).collect(),
        GateVariant::L2 => scores.v_distance.data().to_vec(),
    };
    let gate = interpolate(&shifted, n).into_iter().map(f64::tanh).collect();
    Tensor::new([n], gate)
}

/// Draws a patch mask (`true` = hidden) with `round(ratio·T_p)` hidden
/// patches, clamped so that at least one patch is hidden and one visible.
pub fn draw_mask(tp: usize, ratio: f64, rng: &mut impl Rng) -> Result<Vec<bool>> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::InvalidArgument(format!("mask ratio must lie in (0, 1) (got {ratio})")));
    }
    if tp < 2 {
        return Err(Error::InvalidArgument(format!("masking needs at least 2 patches (got {tp})")));
    }
    let hidden = ((ratio * tp as f64).round() as usize).clamp(1, tp - 1);
    let mut idx: Vec<usize> = (0..tp).collect();
    idx.shuffle(rng);
    let mut mask = vec![false; tp];
    for &i in &idx[..hidden] {
        mask[i] = true;
    }
    Ok(mask)
}

/// Symmetric InfoNCE between time-aligned rows of `a` and `v`.
///
/// Row `t` of each is the positive for row `t` of the other; every other row
/// of the utterance is a negative. Similarities are cosines divided by
/// `temperature`.
pub fn contrastive_loss(tape: &mut Tape, a: Var, v: Var, temperature: f64) -> Result<Var> {
    let (tp, _) = tape.value(a).dims2()?;
    if tp < 2 {
        return Err(Error::InvalidArgument(format!("contrastive loss needs >= 2 instances (got {tp})")));
    }
    if tape.value(a).shape() != tape.value(v).shape() {
        return Err(Error::Shape(format!(
            "contrastive loss: {:?} vs {:?}",
            tape.value(a).shape(),
            tape.value(v).shape()
        )));
    }
    let an = tape.normalize_rows(a, 1e-8)?;
    let vn = tape.normalize_rows(v, 1e-8)?;
    let vt = tape.transpose(vn)?;
    let sim = tape.matmul(an, vt)?;
    let logits = tape.scale(sim, 1.0 / temperature);
    let targets: Vec<usize> = (0..tp).collect();
    let a2v = tape.cross_entropy(logits, &targets, usize::MAX)?;
    let lt = tape.transpose(logits)?;
    let v2a = tape.cross_entropy(lt, &targets, usize::MAX)?;
    let both = tape.add(a2v, v2a)?;
    Ok(tape.scale(both, 0.5))
}

/// Weights of the three pretraining terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub contrastive: f64,
    pub reconstruction: f64,
    pub adversarial: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { contrastive: 0.01, reconstruction: 1.0, adversarial: 0.1 }
    }
}

impl LossWeights {
    pub fn violations(&self) -> Vec<String> {
        [
            ("contrastive", self.contrastive),
            ("reconstruction", self.reconstruction),
            ("adversarial", self.adversarial),
        ]
        .into_iter()
        .filter(|(_, w)| !(*w >= 0.0) || !w.is_finite())
        .map(|(n, w)| format!("loss_weights.{n} must be a finite value >= 0 (got {w})"))
        .collect()
    }
}

/// `λ_c·L_c + λ_r·L_r + λ_adv·L_adv`.
pub fn total_pretrain_loss(tape: &mut Tape, l_c: Var, l_r: Var, l_adv: Var, w: &LossWeights) -> Result<Var> {
    let bad = w.violations();
    if !bad.is_empty() {
        return Err(Error::InvalidArgument(bad.join("; ")));
    }
    let c = tape.scale(l_c, w.contrastive);
    let r = tape.scale(l_r, w.reconstruction);
    let a = tape.scale(l_adv, w.adversarial);
    let cr = tape.add(c, r)?;
    tape.add(cr, a)
}

fn position_rows(positions: &[usize], dim: usize) -> Tensor {
    let max = positions.iter().copied().max().map_or(0, |m| m + 1);
    let table = sinusoidal_positions(max, dim);
    let data = positions.iter().flat_map(|&p| table.row(p).to_vec()).collect();
    Tensor::new([positions.len(), dim], data).expect("position rows")
}

fn with_positions(g: &mut Graph, x: Var, positions: &[usize]) -> Result<Var> {
    let d = g.value(x).cols();
    let pe = g.constant(position_rows(positions, d));
    g.tape.add(x, pe)
}

fn gather_tensor_rows(x: &Tensor, idx: &[usize]) -> Tensor {
    let data = idx.iter().flat_map(|&i| x.row(i).to_vec()).collect();
    Tensor::new([idx.len(), x.cols()], data).expect("row gather")
}

#[derive(Clone, Debug)]
struct ModalityEncoder {
    embed: Linear,
    layers: Vec<EncoderLayer>,
    ln: LayerNorm,
}

impl ModalityEncoder {
    fn new(store: &mut ParamStore, name: &str, patch_dim: usize, cfg: &RouterConfig, rng: &mut impl Rng) -> Self {
        let embed = Linear::new(store, &format!("{name}.embed"), patch_dim, cfg.d_model, rng);
        let layers = (0..cfg.enc_layers)
            .map(|i| EncoderLayer::new(store, &format!("{name}.layer{i}"), cfg.d_model, cfg.heads, cfg.ffn_hidden, rng))
            .collect();
        let ln = LayerNorm::new(store, &format!("{name}.ln"), cfg.d_model);
        Self { embed, layers, ln }
    }

    fn forward(&self, g: &mut Graph, patches: Var, positions: &[usize]) -> Result<Var> {
        let x = self.embed.forward(g, patches)?;
        let mut x = with_positions(g, x, positions)?;
        for layer in &self.layers {
            x = layer.forward(g, x)?;
        }
        self.ln.forward(g, x)
    }
}

/// Linear projection followed by one transformer layer.
#[derive(Clone, Debug)]
struct Translator {
    proj: Linear,
    layer: EncoderLayer,
}

impl Translator {
    fn new(store: &mut ParamStore, name: &str, cfg: &RouterConfig, rng: &mut impl Rng) -> Self {
        Self {
            proj: Linear::new(store, &format!("{name}.proj"), cfg.d_model, cfg.d_model, rng),
            layer: EncoderLayer::new(store, &format!("{name}.layer"), cfg.d_model, cfg.heads, cfg.ffn_hidden, rng),
        }
    }

    fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.proj.forward(g, x)?;
        self.layer.forward(g, h)
    }
}

#[derive(Clone, Debug)]
struct MaeDecoder {
    layer: EncoderLayer,
    ln: LayerNorm,
    head: Linear,
}

impl MaeDecoder {
    fn new(store: &mut ParamStore, name: &str, patch_dim: usize, cfg: &RouterConfig, rng: &mut impl Rng) -> Self {
        Self {
            layer: EncoderLayer::new(store, &format!("{name}.layer"), cfg.d_model, cfg.heads, cfg.ffn_hidden, rng),
            ln: LayerNorm::new(store, &format!("{name}.ln"), cfg.d_model),
            head: Linear::new(store, &format!("{name}.head"), cfg.d_model, patch_dim, rng),
        }
    }

    fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let tp = g.value(x).rows();
        let positions: Vec<usize> = (0..tp).collect();
        let x = with_positions(g, x, &positions)?;
        let h = self.layer.forward(g, x)?;
        let h = self.ln.forward(g, h)?;
        self.head.forward(g, h)
    }
}

#[derive(Clone, Debug)]
struct Critic {
    hidden: Linear,
    out: Linear,
}

impl Critic {
    fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.hidden.forward(g, x)?;
        let h = g.tape.tanh(h);
        self.out.forward(g, h)
    }
}

/// Losses computed for one utterance during pretraining.
pub struct PretrainTerms {
    pub contrastive: Var,
    /// Patch reconstruction plus latent translation error.
    pub reconstruction: Var,
    /// `-mean(critic(translated))`.
    pub generator: Var,
    /// Encoder latents `[v; a]`.
    pub real: Var,
    /// Translated latents `[v̂; â]`.
    pub translated: Var,
}

#[derive(Clone, Debug)]
pub struct RouterModel {
    pub config: RouterConfig,
    pub store: ParamStore,
    enc_a: ModalityEncoder,
    enc_v: ModalityEncoder,
    a2v: Translator,
    v2a: Translator,
    dec_a: MaeDecoder,
    dec_v: MaeDecoder,
    mask_a: ParamId,
    mask_v: ParamId,
    critic: Critic,
}

impl RouterModel {
    pub fn new(config: RouterConfig, seed: u64) -> Result<Self> {
        let bad = config.violations();
        if !bad.is_empty() {
            return Err(Error::Config(bad));
        }
        let mut r = rng(seed);
        let mut store = ParamStore::new();
        let pa = config.patch_len * config.audio_dim;
        let pv = config.patch_len * config.video_dim;
        let enc_a = ModalityEncoder::new(&mut store, "enc_a", pa, &config, &mut r);
        let enc_v = ModalityEncoder::new(&mut store, "enc_v", pv, &config, &mut r);
        let a2v = Translator::new(&mut store, "a2v", &config, &mut r);
        let v2a = Translator::new(&mut store, "v2a", &config, &mut r);
        let dec_a = MaeDecoder::new(&mut store, "dec_a", pa, &config, &mut r);
        let dec_v = MaeDecoder::new(&mut store, "dec_v", pv, &config, &mut r);
        let mask_a = store.add("dec_a.mask_token", Tensor::randn([config.d_model], 0.02, &mut r));
        let mask_v = store.add("dec_v.mask_token", Tensor::randn([config.d_model], 0.02, &mut r));
        let c = config.critic_clip;
        let mut uniform = |shape: [usize; 2]| {
            let n = shape[0] * shape[1];
            Tensor::new(shape, (0..n).map(|_| r.gen_range(-c..c)).collect()).expect("critic init")
        };
        let critic = Critic {
            hidden: Linear {
                w: store.add("critic.hidden.w", uniform([config.d_model, config.critic_hidden])),
                b: store.add("critic.hidden.b", Tensor::zeros([config.critic_hidden])),
            },
            out: Linear {
                w: store.add("critic.out.w", uniform([config.critic_hidden, 1])),
                b: store.add("critic.out.b", Tensor::zeros([1])),
            },
        };
        Ok(Self { config, store, enc_a, enc_v, a2v, v2a, dec_a, dec_v, mask_a, mask_v, critic })
    }

    pub fn is_critic(&self, id: ParamId) -> bool {
        self.store.name(id).starts_with("critic.")
    }

    /// Parameters used at inference time (encoders and translators).
    pub fn is_inference_param(&self, id: ParamId) -> bool {
        let n = self.store.name(id);
        ["enc_a.", "enc_v.", "a2v.", "v2a."].iter().any(|p| n.starts_with(p))
    }

    /// Patch sequences for both streams.
    pub fn patchify_pair(&self, x_a: &Tensor, x_v: &Tensor) -> Result<(Tensor, Tensor)> {
        if x_a.rows() != x_v.rows() {
            return Err(Error::Shape(format!("audio has {} frames, video {}", x_a.rows(), x_v.rows())));
        }
        if x_a.cols() != self.config.audio_dim || x_v.cols() != self.config.video_dim {
            return Err(Error::Shape(format!(
                "router expects {}/{} features, got {}/{}",
                self.config.audio_dim,
                self.config.video_dim,
                x_a.cols(),
                x_v.cols()
            )));
        }
        Ok((patchify(x_a, self.config.patch_len)?, patchify(x_v, self.config.patch_len)?))
    }

    /// Latent sequences `(a, v)`, each `[T_p × d_model]`.
    pub fn encode(&self, g: &mut Graph, xa_patches: Var, xv_patches: Var) -> Result<(Var, Var)> {
        let (ta, pa) = g.value(xa_patches).dims2()?;
        let (tv, pv) = g.value(xv_patches).dims2()?;
        let (ea, ev) = (self.config.patch_len * self.config.audio_dim, self.config.patch_len * self.config.video_dim);
        if pa != ea || pv != ev || ta != tv {
            return Err(Error::Shape(format!(
                "encode: patches {ta}×{pa} / {tv}×{pv}, expected T×{ea} / T×{ev}"
            )));
        }
        let positions: Vec<usize> = (0..ta).collect();
        let a = self.enc_a.forward(g, xa_patches, &positions)?;
        let v = self.enc_v.forward(g, xv_patches, &positions)?;
        Ok((a, v))
    }

    /// Cross-modal predictions `(v̂, â) = (A2V(a), V2A(v))`.
    pub fn translate(&self, g: &mut Graph, a: Var, v: Var) -> Result<(Var, Var)> {
        let v_hat = self.a2v.forward(g, a)?;
        let a_hat = self.v2a.forward(g, v)?;
        Ok((v_hat, a_hat))
    }

    /// Inference-time scoring on a frozen graph.
    pub fn score(&self, x_a: &Tensor, x_v: &Tensor) -> Result<ReliabilityScores> {
        let mut g = Graph::frozen(&self.store);
        self.score_in(&mut g, x_a, x_v)
    }

    /// Scores using a caller-provided graph (lets callers inspect which parameters were read).
    pub fn score_in(&self, g: &mut Graph, x_a: &Tensor, x_v: &Tensor) -> Result<ReliabilityScores> {
        let (xa, xv) = self.patchify_pair(x_a, x_v)?;
        let xa = g.constant(xa);
        let xv = g.constant(xv);
        let (a, v) = self.encode(g, xa, xv)?;
        let (v_hat, a_hat) = self.translate(g, a, v)?;
        let s_v = g.tape.cosine_similarity(v, v_hat)?;
        let s_a = g.tape.cosine_similarity(a, a_hat)?;
        let d = self.config.d_model;
        let (vv, vh) = (g.value(v), g.value(v_hat));
        let dist = (0..vv.rows())
            .map(|t| {
                vv.row(t).iter().zip(vh.row(t)).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt() / (d as f64).sqrt()
            })
            .collect::<Vec<_>>();
        let tp = dist.len();
        Ok(ReliabilityScores {
            s_v: g.value(s_v).clone(),
            s_a: g.value(s_a).clone(),
            v_distance: Tensor::new([tp], dist)?,
            source_len: tp,
        })
    }

    /// MAE patch reconstruction loss over hidden patches.
    ///
    /// Each encoder sees only the visible patches. The decoder input keeps the
    /// visible latents in place and puts the learned mask token at every
    /// hidden position.
    pub fn reconstruction_loss(&self, g: &mut Graph, xa_patches: &Tensor, xv_patches: &Tensor, mask: &[bool]) -> Result<Var> {
        let tp = xa_patches.rows();
        if mask.len() != tp || xv_patches.rows() != tp {
            return Err(Error::Shape(format!("mask of length {} for {} patches", mask.len(), tp)));
        }
        let visible: Vec<usize> = (0..tp).filter(|&i| !mask[i]).collect();
        let hidden: Vec<usize> = (0..tp).filter(|&i| mask[i]).collect();
        if visible.is_empty() || hidden.is_empty() {
            return Err(Error::InvalidArgument("mask must hide some but not all patches".into()));
        }
        // Position p -> its row among the visible latents (0 for hidden rows, overwritten below).
        let mut slot = vec![0; tp];
        for (k, &p) in visible.iter().enumerate() {
            slot[p] = k;
        }
        let d = self.config.d_model;

        let branch = |g: &mut Graph, enc: &ModalityEncoder, dec: &MaeDecoder, mask_token: ParamId, patches: &Tensor| {
            let vis = g.constant(gather_tensor_rows(patches, &visible));
            let lat = enc.forward(g, vis, &visible)?;
            let placed = g.tape.gather_rows(lat, &slot)?;
            let zeros = g.constant(Tensor::zeros([tp, d]));
            let tok = g.param(mask_token);
            let tokens = g.tape.add_row(zeros, tok)?;
            let inp = g.tape.select_rows(placed, tokens, mask)?;
            let pred = dec.forward(g, inp)?;
            let pred_hidden = g.tape.gather_rows(pred, &hidden)?;
            let target = g.constant(gather_tensor_rows(patches, &hidden));
            g.tape.mse_loss(pred_hidden, target)
        };
        let la = branch(g, &self.enc_a, &self.dec_a, self.mask_a, xa_patches)?;
        let lv = branch(g, &self.enc_v, &self.dec_v, self.mask_v, xv_patches)?;
        g.tape.add(la, lv)
    }

    /// Latent reconstruction loss of the translators:
    /// `MSE(v̂, v) + MSE(â, a)` with the encoder latents held fixed as targets.
    pub fn translation_loss(&self, g: &mut Graph, a: Var, v: Var, v_hat: Var, a_hat: Var) -> Result<Var> {
        let v_target = g.constant(g.value(v).clone());
        let a_target = g.constant(g.value(a).clone());
        let lv = g.tape.mse_loss(v_hat, v_target)?;
        let la = g.tape.mse_loss(a_hat, a_target)?;
        g.tape.add(lv, la)
    }

    /// Mean critic output over the rows of `x`.
    pub fn critic_mean(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let c = self.critic.forward(g, x)?;
        Ok(g.tape.mean(c))
    }

    /// WGAN losses `(critic, generator)`:
    /// `mean c(translated) - mean c(real)` and `-mean c(translated)`.
    pub fn adversarial_losses(&self, g: &mut Graph, real: Var, translated: Var) -> Result<(Var, Var)> {
        if g.value(real).shape() != g.value(translated).shape() {
            return Err(Error::Shape(format!(
                "adversarial: real {:?} vs translated {:?}",
                g.value(real).shape(),
                g.value(translated).shape()
            )));
        }
        let fake = self.critic_mean(g, translated)?;
        let real = self.critic_mean(g, real)?;
        let critic = g.tape.sub(fake, real)?;
        let generator = g.tape.scale(fake, -1.0);
        Ok((critic, generator))
    }

    /// All per-utterance pretraining terms for the generator update.
    pub fn pretrain_terms(&self, g: &mut Graph, x_a: &Tensor, x_v: &Tensor, mask: &[bool]) -> Result<PretrainTerms> {
        let (pa, pv) = self.patchify_pair(x_a, x_v)?;
        let xa = g.constant(pa.clone());
        let xv = g.constant(pv.clone());
        let (a, v) = self.encode(g, xa, xv)?;
        let (v_hat, a_hat) = self.translate(g, a, v)?;
        let contrastive = contrastive_loss(&mut g.tape, a, v, self.config.temperature)?;
        let patches = self.reconstruction_loss(g, &pa, &pv, mask)?;
        let latents = self.translation_loss(g, a, v, v_hat, a_hat)?;
        let reconstruction = g.tape.add(patches, latents)?;
        let real = g.tape.concat_rows(v, a)?;
        let translated = g.tape.concat_rows(v_hat, a_hat)?;
        let fake = self.critic_mean(g, translated)?;
        let generator = g.tape.scale(fake, -1.0);
        Ok(PretrainTerms { contrastive, reconstruction, generator, real, translated })
    }

    /// Clamps every critic parameter into `[-clip, clip]`.
    pub fn clip_critic(&mut self) {
        let c = self.config.critic_clip;
        let ids: Vec<_> = self.store.ids().filter(|&id| self.is_critic(id)).collect();
        for id in ids {
            self.store.get_mut(id).data_mut().iter_mut().for_each(|w| *w = w.clamp(-c, c));
        }
    }

    pub fn critic_max_abs(&self) -> f64 {
        self.store
            .ids()
            .filter(|&id| self.is_critic(id))
            .map(|id| self.store.get(id).max_abs())
            .fold(0.0, f64::max)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let echo = serde_json::to_string(&self.config).expect("config serializes");
        checkpoint::write(path.as_ref(), ROUTER_MAGIC, &echo, &self.store)
    }

    /// Loads a router, rebuilding the architecture from the checkpoint's config echo.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let (echo, loaded) = checkpoint::read(path.as_ref(), ROUTER_MAGIC)?;
        let config: RouterConfig =
            serde_json::from_str(&echo).map_err(|e| Error::Format(format!("router config echo: {e}")))?;
        let mut model = Self::new(config, 0)?;
        checkpoint::restore(&mut model.store, loaded)?;
        Ok(model)
    }

    /// Loads a router and checks it against the requested architecture.
    pub fn load_expecting(path: impl AsRef<Path>, expected: &RouterConfig) -> Result<Self> {
        let model = Self::load(path)?;
        if &model.config != expected {
            return Err(Error::Architecture(format!(
                "router checkpoint config {:?} differs from requested {:?}",
                model.config, expected
            )));
        }
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frames(t: usize, f: usize, seed: u64) -> Tensor {
        Tensor::randn([t, f], 1.0, &mut rng(seed))
    }

    #[test]
    fn patchify_counts_and_pads() {
        let x = frames(8, 3, 0);
        assert_eq!(patchify(&x, 2).unwrap().shape(), &[4, 6]);
        let p1 = patchify(&x, 1).unwrap();
        assert_eq!(p1.data(), x.data());

        let x7 = frames(7, 3, 1);
        let p = patchify(&x7, 2).unwrap();
        assert_eq!(p.shape(), &[4, 6]);
        assert_eq!(&p.row(3)[..3], x7.row(6));
        assert_eq!(&p.row(3)[3..], x7.row(6));
        assert!(patchify(&Tensor::zeros([0, 3]), 2).is_err());
    }

    #[test]
    fn gate_is_off_for_perfect_scores() {
        let s = ReliabilityScores::from_sv(vec![1.0; 5]);
        let g = local_gate(&s, 9, GateVariant::Sv).unwrap();
        assert!(g.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn gate_interpolates_then_squashes() {
        let s = ReliabilityScores::from_sv(vec![1.0, -1.0]);
        let g = local_gate(&s, 3, GateVariant::Sv).unwrap();
        assert_eq!(g.data(), &[0.0, 1f64.tanh(), 2f64.tanh()]);
        // tanh(1) and tanh(2) to 16 digits
        assert!((g.data()[1] - 0.761_594_155_955_764_9).abs() < 1e-15);
        assert!((g.data()[2] - 0.964_027_580_075_817).abs() < 1e-15);
    }

    #[test]
    fn gate_without_resampling_is_elementwise() {
        let sv = vec![0.3, -0.2, 0.9, 0.5];
        let s = ReliabilityScores::from_sv(sv.clone());
        let g = local_gate(&s, 4, GateVariant::Sv).unwrap();
        for (x, s) in g.data().iter().zip(&sv) {
            assert_eq!(*x, (1.0 - s).tanh());
        }
        assert!(local_gate(&s, 0, GateVariant::Sv).is_err());
    }

    #[test]
    fn mask_has_requested_size() {
        let m = draw_mask(6, 0.5, &mut rng(2)).unwrap();
        assert_eq!(m.iter().filter(|&&b| b).count(), 3);
        assert_eq!(draw_mask(6, 0.5, &mut rng(2)).unwrap(), m);
        assert!(draw_mask(6, 1.0, &mut rng(2)).is_err());
        assert!(draw_mask(6, 0.0, &mut rng(2)).is_err());
    }

    #[test]
    fn contrastive_two_instance_closed_form() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::from_rows(&[vec![1.0, 0.2], vec![-0.3, 1.0]]).unwrap());
        let v = t.leaf(Tensor::from_rows(&[vec![0.9, 0.1], vec![0.4, 0.8]]).unwrap());
        let loss = contrastive_loss(&mut t, a, v, 0.1).unwrap();
        let got = t.value(loss).item();

        let cos = |x: &[f64], y: &[f64]| {
            let d = x[0] * y[0] + x[1] * y[1];
            d / (((x[0] * x[0] + x[1] * x[1]).sqrt() + 1e-8) * ((y[0] * y[0] + y[1] * y[1]).sqrt() + 1e-8))
        };
        let av = [[1.0, 0.2], [-0.3, 1.0]];
        let vv = [[0.9, 0.1], [0.4, 0.8]];
        let s = |i: usize, j: usize| cos(&av[i], &vv[j]);
        let term = |pos: f64, neg: f64| (1.0 + ((neg - pos) / 0.1).exp()).ln();
        let a2v = (term(s(0, 0), s(0, 1)) + term(s(1, 1), s(1, 0))) / 2.0;
        let v2a = (term(s(0, 0), s(1, 0)) + term(s(1, 1), s(0, 1))) / 2.0;
        let want = (a2v + v2a) / 2.0;
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }

    #[test]
    fn contrastive_prefers_aligned_pairs() {
        let mut t = Tape::new();
        let v = Tensor::randn([6, 8], 1.0, &mut rng(4));
        let mut shuffled_rows: Vec<usize> = (0..6).collect();
        shuffled_rows.shuffle(&mut rng(5));
        let shuffled = gather_tensor_rows(&v, &shuffled_rows);
        let a = t.constant(v.clone());
        let vv = t.constant(v);
        let vs = t.constant(shuffled);
        let aligned = contrastive_loss(&mut t, a, vv, 0.1).unwrap();
        let mis = contrastive_loss(&mut t, a, vs, 0.1).unwrap();
        assert!(t.value(aligned).item() < t.value(mis).item());
        assert!(t.value(aligned).item() >= 0.0);
        let one = t.constant(Tensor::zeros([1, 8]));
        assert!(contrastive_loss(&mut t, one, one, 0.1).is_err());
    }

    #[test]
    fn total_loss_weights() {
        let mut t = Tape::new();
        let one = t.constant(Tensor::scalar(1.0));
        let w = LossWeights::default();
        let total = total_pretrain_loss(&mut t, one, one, one, &w).unwrap();
        assert!((t.value(total).item() - 1.11).abs() < 1e-15);
        let zero = LossWeights { contrastive: 0.0, reconstruction: 0.0, adversarial: 0.0 };
        let total = total_pretrain_loss(&mut t, one, one, one, &zero).unwrap();
        assert_eq!(t.value(total).item(), 0.0);
        let neg = LossWeights { adversarial: -0.1, ..w };
        assert!(total_pretrain_loss(&mut t, one, one, one, &neg).is_err());
    }

    fn small_router() -> RouterModel {
        let cfg = RouterConfig { audio_dim: 3, video_dim: 4, d_model: 8, heads: 2, ffn_hidden: 8, critic_hidden: 4, ..RouterConfig::default() };
        RouterModel::new(cfg, 1).unwrap()
    }

    #[test]
    fn encode_shapes_and_position_sensitivity() {
        let m = small_router();
        let xa = patchify(&frames(8, 3, 1), 2).unwrap();
        let xv = patchify(&frames(8, 4, 2), 2).unwrap();
        let mut g = Graph::frozen(&m.store);
        let (a_in, v_in) = (g.constant(xa.clone()), g.constant(xv.clone()));
        let (a, v) = m.encode(&mut g, a_in, v_in).unwrap();
        assert_eq!(g.value(a).shape(), &[4, 8]);
        assert_eq!(g.value(v).shape(), &[4, 8]);
        let (vh, ah) = m.translate(&mut g, a, v).unwrap();
        assert_eq!(g.value(vh).shape(), &[4, 8]);
        assert_eq!(g.value(ah).shape(), &[4, 8]);

        // swap patches 0 and 1: the swapped outputs are not a permutation of the originals
        let swapped = gather_tensor_rows(&xa, &[1, 0, 2, 3]);
        let s_in = g.constant(swapped);
        let (a2, _) = m.encode(&mut g, s_in, v_in).unwrap();
        let orig = g.value(a).clone();
        let perm = g.value(a2).clone();
        assert_ne!(orig.row(0), perm.row(1));
        assert_ne!(orig.row(1), perm.row(0));

        let bad = g.constant(Tensor::zeros([4, 5]));
        assert!(m.encode(&mut g, bad, v_in).is_err());
    }

    #[test]
    fn scoring_reads_only_encoders_and_translators() {
        let m = small_router();
        let mut g = Graph::frozen(&m.store);
        let s = m.score_in(&mut g, &frames(8, 3, 3), &frames(8, 4, 4)).unwrap();
        assert_eq!(s.source_len, 4);
        for id in g.touched() {
            assert!(m.is_inference_param(id), "score read {}", m.store.name(id));
        }
        assert!(s.s_v.data().iter().chain(s.s_a.data()).all(|x| x.abs() <= 1.0 + 1e-9));
    }

    #[test]
    fn scoring_is_deterministic() {
        let m = small_router();
        let (a, v) = (frames(10, 3, 5), frames(10, 4, 6));
        assert_eq!(m.score(&a, &v).unwrap(), m.score(&a, &v).unwrap());
    }

    #[test]
    fn constant_critic_gives_zero_losses() {
        let mut m = small_router();
        let ids: Vec<_> = m.store.ids().filter(|&id| m.is_critic(id)).collect();
        for id in ids {
            let shape = m.store.get(id).shape().to_vec();
            *m.store.get_mut(id) = Tensor::zeros(shape);
        }
        let mut g = Graph::frozen(&m.store);
        let real = g.constant(Tensor::randn([4, 8], 1.0, &mut rng(1)));
        let fake = g.constant(Tensor::randn([4, 8], 1.0, &mut rng(2)));
        let (c, gen) = m.adversarial_losses(&mut g, real, fake).unwrap();
        assert_eq!(g.value(c).item(), 0.0);
        assert_eq!(g.value(gen).item(), 0.0);
    }

    #[test]
    fn generator_loss_identity() {
        let m = small_router();
        let mut g = Graph::frozen(&m.store);
        let real = g.constant(Tensor::randn([4, 8], 1.0, &mut rng(1)));
        let fake = g.constant(Tensor::randn([4, 8], 1.0, &mut rng(2)));
        let (c, gen) = m.adversarial_losses(&mut g, real, fake).unwrap();
        let mr = m.critic_mean(&mut g, real).unwrap();
        let lhs = g.value(gen).item();
        let rhs = -(g.value(c).item() + g.value(mr).item());
        assert!((lhs - rhs).abs() < 1e-15);
    }

    #[test]
    fn clipping_bounds_critic() {
        let mut m = small_router();
        let ids: Vec<_> = m.store.ids().filter(|&id| m.is_critic(id)).collect();
        for id in &ids {
            m.store.get_mut(*id).data_mut().iter_mut().for_each(|w| *w = 3.0);
        }
        m.clip_critic();
        assert_eq!(m.critic_max_abs(), m.config.critic_clip);
    }

    #[test]
    fn reconstruction_with_injected_targets_is_zero() {
        let mut t = Tape::new();
        let x = Tensor::randn([4, 6], 1.0, &mut rng(1));
        let p = t.constant(x.clone());
        let q = t.constant(x);
        let l = t.mse_loss(p, q).unwrap();
        assert_eq!(t.value(l).item(), 0.0);
    }

    #[test]
    fn reconstruction_is_deterministic_and_checks_mask() {
        let m = small_router();
        let (xa, xv) = m.patchify_pair(&frames(8, 3, 1), &frames(8, 4, 2)).unwrap();
        let run = |seed: u64| {
            let mask = draw_mask(4, 0.5, &mut rng(seed)).unwrap();
            let mut g = Graph::frozen(&m.store);
            let l = m.reconstruction_loss(&mut g, &xa, &xv, &mask).unwrap();
            g.value(l).item()
        };
        assert_eq!(run(3).to_bits(), run(3).to_bits());

        let mut g = Graph::frozen(&m.store);
        assert!(m.reconstruction_loss(&mut g, &xa, &xv, &[true; 4]).is_err());
        assert!(m.reconstruction_loss(&mut g, &xa, &xv, &[false; 4]).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.rgfr");
        let m = small_router();
        m.save(&p).unwrap();
        let back = RouterModel::load_expecting(&p, &m.config).unwrap();
        assert_eq!(back.store.checksum(), m.store.checksum());
        let other = RouterConfig { d_model: 16, ..m.config.clone() };
        assert!(matches!(RouterModel::load_expecting(&p, &other), Err(Error::Architecture(_))));
    }
}
