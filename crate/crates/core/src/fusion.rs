//! Recognition backbone with router-gated cross-attention in the decoder.
//!
//! The encoder fuses per-frame audio and video projections into `e_av`. A
//! second pass with the audio projection replaced by zeros yields the
//! visual-only memory `e_v`. Every decoder layer starts with a gated block
//! that injects attention over `e_v`, scaled globally by `tanh(alpha)` and
//! per position by the router's local gate, before the usual causal
//! self-attention, cross-attention to `e_av` and feed-forward sublayers.

use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::checkpoint;
use crate::data::{BOS, EOS};
use crate::error::{Error, Result};
use crate::nn::{
    add_positions, EncoderLayer, FeedForward, Graph, LayerNorm, Linear, MultiHeadAttention, ParamId, ParamStore,
};
use crate::router::GateVariant;
use crate::seed::rng;
use crate::tensor::Tensor;

const FUSION_MAGIC: &[u8; 4] = b"RGFM";

/// Decoder flavour. The first three use the router-gated cross-attention
/// block and differ in the router signal; `SelfAttn` replaces that block with
/// an equally sized gated causal self-attention block and ignores the router.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "ours")]
    Ours,
    #[serde(rename = "sa")]
    Sa,
    #[serde(rename = "l2")]
    L2,
    #[serde(rename = "self-attn")]
    SelfAttn,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Ours, Variant::Sa, Variant::L2, Variant::SelfAttn];

    /// Router signal driving the local gate, `None` for the router-free baseline.
    pub fn gate(self) -> Option<GateVariant> {
        match self {
            Variant::Ours => Some(GateVariant::Sv),
            Variant::Sa => Some(GateVariant::Sa),
            Variant::L2 => Some(GateVariant::L2),
            Variant::SelfAttn => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Ours => "ours",
            Variant::Sa => "sa",
            Variant::L2 => "l2",
            Variant::SelfAttn => "self-attn",
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown variant {s:?} (expected ours, sa, l2 or self-attn)")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionConfig {
    pub audio_dim: usize,
    pub video_dim: usize,
    pub vocab_size: usize,
    pub d_model: usize,
    pub heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub ffn_hidden: usize,
    pub variant: Variant,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            audio_dim: 16,
            video_dim: 16,
            vocab_size: 32,
            d_model: 64,
            heads: 4,
            enc_layers: 2,
            dec_layers: 2,
            ffn_hidden: 128,
            variant: Variant::Ours,
        }
    }
}

impl FusionConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        for (name, x) in [
            ("audio_dim", self.audio_dim),
            ("video_dim", self.video_dim),
            ("d_model", self.d_model),
            ("heads", self.heads),
            ("ffn_hidden", self.ffn_hidden),
            ("dec_layers", self.dec_layers),
        ] {
            if x == 0 {
                v.push(format!("model.{name} must be >= 1"));
            }
        }
        if self.vocab_size < 4 {
            v.push(format!("model.vocab_size must be >= 4 (got {})", self.vocab_size));
        }
        if self.heads > 0 && self.d_model % self.heads != 0 {
            v.push(format!("model.heads ({}) must divide model.d_model ({})", self.heads, self.d_model));
        }
        v
    }
}

/// Gated injection block placed first in every decoder layer.
///
/// `forward` attends from `LN(z)` to the visual memory and scales the result
/// by `tanh(alpha)` and the per-position local gate; `forward_self` is the
/// ablation form that attends causally over `LN(z)` itself. Both then add a
/// `tanh(alpha_ffn)`-gated feed-forward branch.
#[derive(Clone, Debug)]
pub struct GcaBlock {
    pub ln_attn: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln_ffn: LayerNorm,
    pub ffn: FeedForward,
    pub alpha: ParamId,
    pub alpha_ffn: ParamId,
}

impl GcaBlock {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &FusionConfig, rng: &mut impl Rng) -> Self {
        Self {
            ln_attn: LayerNorm::new(store, &format!("{name}.ln_attn"), cfg.d_model),
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), cfg.d_model, cfg.heads, rng),
            ln_ffn: LayerNorm::new(store, &format!("{name}.ln_ffn"), cfg.d_model),
            ffn: FeedForward::new(store, &format!("{name}.ffn"), cfg.d_model, cfg.ffn_hidden, rng),
            alpha: store.add(format!("{name}.alpha"), Tensor::scalar(0.0)),
            alpha_ffn: store.add(format!("{name}.alpha_ffn"), Tensor::scalar(0.0)),
        }
    }

    /// `z[N×F]`, `e_v[T×F]`, `lambda[N]` → `[N×F]`.
    pub fn forward(&self, g: &mut Graph, z: Var, e_v: Var, lambda: Var) -> Result<Var> {
        let n = g.value(z).rows();
        if g.value(lambda).numel() != n {
            return Err(Error::Shape(format!(
                "local gate has length {} but the decoder has {} positions",
                g.value(lambda).numel(),
                n
            )));
        }
        let h = self.ln_attn.forward(g, z)?;
        let a = self.attn.forward(g, h, e_v, false)?;
        let a = g.tape.mul_rows(a, lambda)?;
        self.gated_residuals(g, z, a)
    }

    /// Ablation form: gated causal self-attention over `z`.
    pub fn forward_self(&self, g: &mut Graph, z: Var) -> Result<Var> {
        let h = self.ln_attn.forward(g, z)?;
        let a = self.attn.forward(g, h, h, true)?;
        self.gated_residuals(g, z, a)
    }

    fn gated_residuals(&self, g: &mut Graph, z: Var, branch: Var) -> Result<Var> {
        let alpha = g.param(self.alpha);
        let global = g.tape.tanh(alpha);
        let injected = g.tape.scale_by(branch, global)?;
        let r = g.tape.add(z, injected)?;
        let h = self.ln_ffn.forward(g, r)?;
        let f = self.ffn.forward(g, h)?;
        let alpha_ffn = g.param(self.alpha_ffn);
        let gate_ffn = g.tape.tanh(alpha_ffn);
        let f = g.tape.scale_by(f, gate_ffn)?;
        g.tape.add(r, f)
    }
}

#[derive(Clone, Debug)]
struct DecoderLayer {
    gate: GcaBlock,
    ln_self: LayerNorm,
    self_attn: MultiHeadAttention,
    ln_cross: LayerNorm,
    cross_attn: MultiHeadAttention,
    ln_ffn: LayerNorm,
    ffn: FeedForward,
}

impl DecoderLayer {
    fn new(store: &mut ParamStore, name: &str, cfg: &FusionConfig, rng: &mut impl Rng) -> Self {
        let d = cfg.d_model;
        Self {
            gate: GcaBlock::new(store, &format!("{name}.gca"), cfg, rng),
            ln_self: LayerNorm::new(store, &format!("{name}.ln_self"), d),
            self_attn: MultiHeadAttention::new(store, &format!("{name}.self_attn"), d, cfg.heads, rng),
            ln_cross: LayerNorm::new(store, &format!("{name}.ln_cross"), d),
            cross_attn: MultiHeadAttention::new(store, &format!("{name}.cross_attn"), d, cfg.heads, rng),
            ln_ffn: LayerNorm::new(store, &format!("{name}.ln_ffn"), d),
            ffn: FeedForward::new(store, &format!("{name}.ffn"), d, cfg.ffn_hidden, rng),
        }
    }

    fn forward(&self, g: &mut Graph, z: Var, e_av: Var, injection: Injection) -> Result<Var> {
        let z = match injection {
            Injection::Visual { e_v, lambda } => self.gate.forward(g, z, e_v, lambda)?,
            Injection::SelfAttn => self.gate.forward_self(g, z)?,
            Injection::Skip => z,
        };
        let h = self.ln_self.forward(g, z)?;
        let a = self.self_attn.forward(g, h, h, true)?;
        let z = g.tape.add(z, a)?;
        let h = self.ln_cross.forward(g, z)?;
        let c = self.cross_attn.forward(g, h, e_av, false)?;
        let z = g.tape.add(z, c)?;
        let h = self.ln_ffn.forward(g, z)?;
        let f = self.ffn.forward(g, h)?;
        g.tape.add(z, f)
    }
}

#[derive(Clone, Copy)]
enum Injection {
    Visual { e_v: Var, lambda: Var },
    SelfAttn,
    /// The first block is left out entirely.
    Skip,
}

/// Encoder outputs for one utterance.
#[derive(Clone, Copy, Debug)]
pub struct Memory {
    pub e_av: Var,
    /// Only computed for router-gated variants.
    pub e_v: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct FusionModel {
    pub config: FusionConfig,
    pub store: ParamStore,
    front_a: Linear,
    front_v: Linear,
    fuse: Linear,
    encoder: Vec<EncoderLayer>,
    enc_ln: LayerNorm,
    embed: ParamId,
    layers: Vec<DecoderLayer>,
    final_ln: LayerNorm,
    head: Linear,
}

impl FusionModel {
    pub fn new(config: FusionConfig, seed: u64) -> Result<Self> {
        let bad = config.violations();
        if !bad.is_empty() {
            return Err(Error::Config(bad));
        }
        let mut r = rng(seed);
        let mut store = ParamStore::new();
        let d = config.d_model;
        let front_a = Linear::new(&mut store, "front_a", config.audio_dim, d, &mut r);
        let front_v = Linear::new(&mut store, "front_v", config.video_dim, d, &mut r);
        let fuse = Linear::new(&mut store, "fuse", 2 * d, d, &mut r);
        let encoder = (0..config.enc_layers)
            .map(|i| EncoderLayer::new(&mut store, &format!("enc.{i}"), d, config.heads, config.ffn_hidden, &mut r))
            .collect();
        let enc_ln = LayerNorm::new(&mut store, "enc.ln", d);
        let embed = store.add("embed", Tensor::randn([config.vocab_size, d], 1.0, &mut r));
        let layers = (0..config.dec_layers)
            .map(|k| DecoderLayer::new(&mut store, &format!("dec.{k}"), &config, &mut r))
            .collect();
        let final_ln = LayerNorm::new(&mut store, "dec.ln", d);
        let head = Linear::new(&mut store, "head", d, config.vocab_size, &mut r);
        Ok(Self { config, store, front_a, front_v, fuse, encoder, enc_ln, embed, layers, final_ln, head })
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    /// Backbone encoder parameters (front-ends, fusion projection, encoder stack).
    pub fn is_encoder_param(&self, id: ParamId) -> bool {
        let n = self.store.name(id);
        ["front_a.", "front_v.", "fuse.", "enc."].iter().any(|p| n.starts_with(p))
    }

    /// `(name, alpha, alpha_ffn)` for every gated block.
    pub fn gate_values(&self) -> Vec<(String, f64, f64)> {
        self.layers
            .iter()
            .enumerate()
            .map(|(k, l)| (format!("dec.{k}.gca"), self.store.get(l.gate.alpha).item(), self.store.get(l.gate.alpha_ffn).item()))
            .collect()
    }

    /// Fused memory `[T×F]`; with `mask_audio` the audio projection is replaced by zeros.
    pub fn encode_backbone(&self, g: &mut Graph, x_a: &Tensor, x_v: &Tensor, mask_audio: bool) -> Result<Var> {
        let (ta, fa) = x_a.dims2()?;
        let (tv, fv) = x_v.dims2()?;
        if ta != tv {
            return Err(Error::Shape(format!("audio has {ta} frames, video {tv}")));
        }
        if fa != self.config.audio_dim || fv != self.config.video_dim {
            return Err(Error::Shape(format!(
                "model expects {}/{} features, got {fa}/{fv}",
                self.config.audio_dim, self.config.video_dim
            )));
        }
        if ta == 0 {
            return Err(Error::Shape("empty feature stream".into()));
        }
        let audio = if mask_audio {
            g.constant(Tensor::zeros([ta, self.config.d_model]))
        } else {
            let xa = g.constant(x_a.clone());
            self.front_a.forward(g, xa)?
        };
        let xv = g.constant(x_v.clone());
        let video = self.front_v.forward(g, xv)?;
        let cat = g.tape.concat_cols(audio, video)?;
        let x = self.fuse.forward(g, cat)?;
        let mut x = add_positions(g, x)?;
        for layer in &self.encoder {
            x = layer.forward(g, x)?;
        }
        self.enc_ln.forward(g, x)
    }

    /// Encoder memories needed by this model's decoder.
    pub fn memory(&self, g: &mut Graph, x_a: &Tensor, x_v: &Tensor) -> Result<Memory> {
        let e_av = self.encode_backbone(g, x_a, x_v, false)?;
        let e_v = match self.variant().gate() {
            Some(_) => Some(self.encode_backbone(g, x_a, x_v, true)?),
            None => None,
        };
        Ok(Memory { e_av, e_v })
    }

    /// Logits `[N×V]` for decoder input tokens (starting with BOS).
    ///
    /// `lambda` is required for router-gated variants and ignored by the
    /// self-attention baseline.
    pub fn decoder_forward(&self, g: &mut Graph, tokens: &[usize], memory: Memory, lambda: Option<&Tensor>) -> Result<Var> {
        let injection = match self.variant().gate() {
            Some(_) => {
                let e_v = memory.e_v.ok_or_else(|| Error::InvalidArgument("gated decoder needs e_v".into()))?;
                let lambda = lambda.ok_or_else(|| Error::InvalidArgument("gated decoder needs a local gate".into()))?;
                let lambda = g.constant(lambda.clone());
                Injection::Visual { e_v, lambda }
            }
            None => Injection::SelfAttn,
        };
        self.decode_with(g, tokens, memory.e_av, injection)
    }

    /// Same decoder with every gated block removed.
    pub fn decoder_forward_without_gate_blocks(&self, g: &mut Graph, tokens: &[usize], e_av: Var) -> Result<Var> {
        self.decode_with(g, tokens, e_av, Injection::Skip)
    }

    fn decode_with(&self, g: &mut Graph, tokens: &[usize], e_av: Var, injection: Injection) -> Result<Var> {
        if tokens.is_empty() {
            return Err(Error::InvalidArgument("decoder input is empty".into()));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::InvalidArgument(format!(
                "token id {t} out of range for vocabulary of {}",
                self.config.vocab_size
            )));
        }
        let table = g.param(self.embed);
        let z = g.tape.gather_rows(table, tokens)?;
        let mut z = add_positions(g, z)?;
        for layer in &self.layers {
            z = layer.forward(g, z, e_av, injection)?;
        }
        let z = self.final_ln.forward(g, z)?;
        self.head.forward(g, z)
    }

    /// Autoregressive argmax decoding from BOS until EOS or `max_len` tokens.
    ///
    /// `gate(n)` supplies the local gate for a decoder input of length `n`;
    /// it is ignored by the self-attention baseline.
    pub fn greedy_decode(
        &self,
        x_a: &Tensor,
        x_v: &Tensor,
        gate: impl Fn(usize) -> Result<Tensor>,
        max_len: usize,
    ) -> Result<Vec<usize>> {
        let mut g = Graph::frozen(&self.store);
        let memory = self.memory(&mut g, x_a, x_v)?;
        let mut seq = vec![BOS];
        let mut out = Vec::new();
        while out.len() < max_len {
            let lambda = match self.variant().gate() {
                Some(_) => Some(gate(seq.len())?),
                None => None,
            };
            let logits = self.decoder_forward(&mut g, &seq, memory, lambda.as_ref())?;
            let next = argmax(g.value(logits).row(seq.len() - 1));
            if next == EOS {
                break;
            }
            out.push(next);
            seq.push(next);
        }
        Ok(out)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let echo = serde_json::to_string(&self.config).expect("config serializes");
        checkpoint::write(path.as_ref(), FUSION_MAGIC, &echo, &self.store)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let (echo, loaded) = checkpoint::read(path.as_ref(), FUSION_MAGIC)?;
        let config: FusionConfig =
            serde_json::from_str(&echo).map_err(|e| Error::Format(format!("model config echo: {e}")))?;
        let mut model = Self::new(config, 0)?;
        checkpoint::restore(&mut model.store, loaded)?;
        Ok(model)
    }

    /// Loads a model and checks it against the requested architecture.
    pub fn load_expecting(path: impl AsRef<Path>, expected: &FusionConfig) -> Result<Self> {
        let model = Self::load(path)?;
        if &model.config != expected {
            return Err(Error::Architecture(format!(
                "model checkpoint config {:?} differs from requested {:?}",
                model.config, expected
            )));
        }
        Ok(model)
    }
}

/// Index of the largest entry (first on ties).
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}
