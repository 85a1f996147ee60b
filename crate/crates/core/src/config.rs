//! Run configuration: one TOML document covering data, both models, both
//! training phases and evaluation.
//!
//! Parsing is strict. Unknown keys anywhere are rejected, and every problem
//! found is reported together. Per-purpose seeds and the feature sizes shared
//! between sections are derived from the top-level `seed` and the `[corpus]`
//! section; they may be spelled out only with their derived values.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{CorpusConfig, NoiseType};
use crate::error::{Error, Result};
use crate::fusion::FusionConfig;
use crate::router::RouterConfig;
use crate::seed::derive_seed;
use crate::training::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub snrs: Vec<f64>,
    pub noise_types: Vec<NoiseType>,
    /// Decoding limit; `None` means the longest corpus utterance plus two.
    pub max_decode_len: Option<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { snrs: vec![10.0, 5.0, 0.0], noise_types: NoiseType::CORRUPTING.to_vec(), max_decode_len: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub corpus: CorpusConfig,
    pub router: RouterConfig,
    pub model: FusionConfig,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut c = Self {
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            corpus: CorpusConfig::default(),
            router: RouterConfig::default(),
            model: FusionConfig::default(),
            pretrain: TrainConfig::default(),
            finetune: TrainConfig::default(),
            eval: EvalConfig::default(),
        };
        c.resolve();
        c
    }
}

/// Keys whose values follow from other keys.
const DERIVED: [(&str, &str); 8] = [
    ("corpus", "seed"),
    ("pretrain", "seed"),
    ("finetune", "seed"),
    ("router", "audio_dim"),
    ("router", "video_dim"),
    ("model", "audio_dim"),
    ("model", "video_dim"),
    ("model", "vocab_size"),
];

impl RunConfig {
    /// Fills in every derived value.
    pub fn resolve(&mut self) {
        self.corpus.seed = sub_seed(self.seed, "data");
        self.pretrain.seed = sub_seed(self.seed, "pretrain");
        self.finetune.seed = sub_seed(self.seed, "finetune");
        self.router.audio_dim = self.corpus.audio_dim;
        self.router.video_dim = self.corpus.video_dim;
        self.model.audio_dim = self.corpus.audio_dim;
        self.model.video_dim = self.corpus.video_dim;
        self.model.vocab_size = self.corpus.vocab_size;
    }

    /// Seed for evaluation-time noise draws.
    pub fn eval_seed(&self) -> u64 {
        sub_seed(self.seed, "eval")
    }

    pub fn max_decode_len(&self) -> usize {
        self.eval.max_decode_len.unwrap_or(self.corpus.seq_len_range[1] + 2)
    }

    pub fn violations(&self) -> Vec<String> {
        // Sizes copied from the corpus are reported once, under `corpus.`.
        let copied = |m: &String| {
            DERIVED.iter().any(|(s, k)| *s != "corpus" && m.starts_with(&format!("{s}.{k} ")))
        };
        let mut v = self.corpus.violations();
        v.extend(self.router.violations().into_iter().filter(|m| !copied(m)));
        v.extend(self.model.violations().into_iter().filter(|m| !copied(m)));
        v.extend(self.pretrain.violations("pretrain"));
        v.extend(self.finetune.violations("finetune"));
        if self.eval.snrs.iter().any(|s| !s.is_finite()) {
            v.push("eval.snrs must be finite".into());
        }
        if self.eval.noise_types.contains(&NoiseType::None) {
            v.push("eval.noise_types lists corrupting types only (clean is always evaluated)".into());
        }
        if self.eval.max_decode_len == Some(0) {
            v.push("eval.max_decode_len must be >= 1".into());
        }
        v
    }

    /// Parses and validates a TOML document.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(vec![one_line(&e)]))?;
        let mut problems = Vec::new();
        let template = serde_json::to_value(RunConfig::default()).expect("config serializes");
        unknown_keys(&toml::Value::Table(table.clone()), &template, "", &mut problems);
        if !problems.is_empty() {
            return Err(Error::Config(problems));
        }
        let mut cfg: RunConfig = table
            .clone()
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(vec![one_line(&e)]))?;
        let given = cfg.clone();
        cfg.resolve();
        let explicit = |section: &str, key: &str| {
            table.get(section).and_then(|s| s.as_table()).is_some_and(|s| s.contains_key(key))
        };
        let as_json = |c: &RunConfig| serde_json::to_value(c).expect("config serializes");
        let (g, r) = (as_json(&given), as_json(&cfg));
        for (section, key) in DERIVED {
            if explicit(section, key) && g[section][key] != r[section][key] {
                problems.push(format!(
                    "{section}.{key} is derived (expected {}, got {}); remove it",
                    r[section][key], g[section][key]
                ));
            }
        }
        problems.extend(cfg.violations());
        if problems.is_empty() {
            Ok(cfg)
        } else {
            Err(Error::Config(problems))
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    /// The fully resolved configuration as TOML.
    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    pub fn write_resolved(&self, dir: impl AsRef<Path>) -> Result<PathBuf> {
        let path = dir.as_ref().join("resolved_config.toml");
        std::fs::write(&path, self.to_toml_string()).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

/// Derived seeds are kept below 2^63 so they survive a TOML round trip.
fn sub_seed(global: u64, purpose: &str) -> u64 {
    derive_seed(global, purpose) >> 1
}

fn one_line(e: &toml::de::Error) -> String {
    e.to_string().split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Collects every key of `value` that has no counterpart in `template`.
fn unknown_keys(value: &toml::Value, template: &serde_json::Value, prefix: &str, out: &mut Vec<String>) {
    let (toml::Value::Table(t), serde_json::Value::Object(known)) = (value, template) else {
        return;
    };
    for (k, v) in t {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match known.get(k) {
            None => out.push(format!("unknown key `{path}`")),
            Some(sub) => unknown_keys(v, sub, &path, out),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_resolved_defaults() {
        let c = RunConfig::from_toml_str("").unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.pretrain.loss_weights.contrastive, 0.01);
        assert_eq!(c.model.d_model, 64);
        assert_eq!(c.router.d_model, 32);
    }

    #[test]
    fn resolved_output_parses_back_identically() {
        let mut c = RunConfig { seed: 9, ..RunConfig::default() };
        c.corpus.audio_dim = 6;
        c.resolve();
        let back = RunConfig::from_toml_str(&c.to_toml_string()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.model.audio_dim, 6);
    }

    #[test]
    fn every_unknown_key_is_reported() {
        let err = RunConfig::from_toml_str("colour = 1\n[corpus]\nvocab = 3\n[pretrain.loss_weights]\nbogus = 1\n")
            .unwrap_err();
        match err {
            Error::Config(v) => {
                assert_eq!(v.len(), 3, "{v:?}");
                assert!(v.iter().any(|m| m.contains("pretrain.loss_weights.bogus")));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn every_semantic_violation_is_reported() {
        let text = "[corpus]\nvocab_size = 2\n[finetune]\ntau_fraction = 2.0\n[pretrain.loss_weights]\nadversarial = -1.0\n";
        match RunConfig::from_toml_str(text).unwrap_err() {
            Error::Config(v) => assert_eq!(v.len(), 3, "{v:?}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn derived_keys_must_agree() {
        assert!(RunConfig::from_toml_str("[model]\naudio_dim = 5\n").is_err());
        assert!(RunConfig::from_toml_str("[model]\naudio_dim = 16\n").is_ok());
        assert!(RunConfig::from_toml_str("[corpus]\nseed = 1\n").is_err());
    }

    #[test]
    fn variant_and_condition_parse_from_strings() {
        let c = RunConfig::from_toml_str("[model]\nvariant = \"self-attn\"\n[finetune]\nnoise_condition = \"noisy\"\n").unwrap();
        assert_eq!(c.model.variant, crate::fusion::Variant::SelfAttn);
        assert_eq!(c.finetune.noise_condition, crate::training::NoiseCondition::Noisy);
    }
}
