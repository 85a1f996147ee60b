//! Synthetic paired audio/video feature streams for a toy token-recognition
//! task, with noise mixed into the audio stream at exact SNRs.
//!
//! Every token owns a fixed audio prototype and a fixed video prototype. An
//! utterance emits `frames_per_token` jittered copies of each prototype, so
//! both streams are frame-synchronous and the video stream is always clean.

use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::{derive_seed, rng};
use crate::tensor::Tensor;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
/// First id that carries content.
pub const FIRST_TOKEN: usize = 3;

pub const FRAME_JITTER: f64 = 0.05;
const BABBLE_TALKERS: usize = 3;
/// Tonal noise frequencies, in cycles per frame.
const TONES: [f64; 3] = [0.07, 0.19, 0.31];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    /// Vocabulary size including PAD, BOS and EOS.
    pub vocab_size: usize,
    /// Inclusive `[min, max]` tokens per utterance.
    pub seq_len_range: [usize; 2],
    pub frames_per_token: usize,
    pub audio_dim: usize,
    pub video_dim: usize,
    /// Number of distinct video prototypes shared by the content tokens, so
    /// that several tokens look alike on video. `None` gives every token its own.
    pub viseme_groups: Option<usize>,
    pub n_train: usize,
    pub n_test: usize,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            vocab_size: 32,
            seq_len_range: [3, 6],
            frames_per_token: 4,
            audio_dim: 16,
            video_dim: 16,
            viseme_groups: None,
            n_train: 512,
            n_test: 64,
            seed: 0,
        }
    }
}

impl CorpusConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.vocab_size < 4 {
            v.push(format!("corpus.vocab_size must be >= 4 (got {})", self.vocab_size));
        }
        let [lo, hi] = self.seq_len_range;
        if lo == 0 || lo > hi {
            v.push(format!("corpus.seq_len_range must satisfy 1 <= min <= max (got [{lo}, {hi}])"));
        }
        for (name, d) in [
            ("frames_per_token", self.frames_per_token),
            ("audio_dim", self.audio_dim),
            ("video_dim", self.video_dim),
        ] {
            if d == 0 {
                v.push(format!("corpus.{name} must be >= 1"));
            }
        }
        for (name, n) in [("n_train", self.n_train), ("n_test", self.n_test)] {
            if n == 0 {
                v.push(format!("corpus.{name} must be >= 1"));
            }
        }
        if self.viseme_groups == Some(0) {
            v.push("corpus.viseme_groups must be >= 1".into());
        }
        v
    }

    /// Video prototype row used by `token`.
    pub fn viseme_of(&self, token: usize) -> usize {
        match self.viseme_groups {
            Some(g) if token >= FIRST_TOKEN => FIRST_TOKEN + (token - FIRST_TOKEN) % g,
            _ => token,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseType {
    None,
    Stationary,
    Babble,
    Tonal,
}

impl NoiseType {
    pub const CORRUPTING: [NoiseType; 3] = [NoiseType::Stationary, NoiseType::Babble, NoiseType::Tonal];

    fn code(self) -> u8 {
        match self {
            NoiseType::None => 0,
            NoiseType::Stationary => 1,
            NoiseType::Babble => 2,
            NoiseType::Tonal => 3,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        Ok(match c {
            0 => NoiseType::None,
            1 => NoiseType::Stationary,
            2 => NoiseType::Babble,
            3 => NoiseType::Tonal,
            _ => return Err(Error::Format(format!("unknown noise code {c}"))),
        })
    }
}

impl fmt::Display for NoiseType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NoiseType::None => "none",
            NoiseType::Stationary => "stationary",
            NoiseType::Babble => "babble",
            NoiseType::Tonal => "tonal",
        })
    }
}

impl FromStr for NoiseType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" | "clean" => Ok(NoiseType::None),
            "stationary" => Ok(NoiseType::Stationary),
            "babble" => Ok(NoiseType::Babble),
            "tonal" => Ok(NoiseType::Tonal),
            other => Err(Error::InvalidArgument(format!("unknown noise type '{other}'"))),
        }
    }
}

/// One synthetic utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct PairedSample {
    pub tokens: Vec<usize>,
    /// `[T × audio_dim]`, possibly noisy.
    pub audio: Tensor,
    /// `[T × video_dim]`, always clean.
    pub video: Tensor,
    pub noise_type: NoiseType,
    pub snr_db: Option<f64>,
}

impl PairedSample {
    pub fn frames(&self) -> usize {
        self.audio.rows()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub config: CorpusConfig,
    pub samples: Vec<PairedSample>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Picks the babble talkers for utterance `index`: other utterances of this corpus.
    pub fn babble_sources(&self, index: usize, rng: &mut impl Rng) -> Vec<&Tensor> {
        let others: Vec<usize> = (0..self.samples.len()).filter(|&j| j != index).collect();
        let pool = if others.is_empty() { vec![index] } else { others };
        (0..BABBLE_TALKERS)
            .map(|_| &self.samples[*pool.choose(rng).expect("nonempty pool")].audio)
            .collect()
    }

    /// Copy of the corpus with every utterance's audio corrupted at `snr_db`.
    ///
    /// Utterance `i` draws its noise from `derive_seed(seed, "noise") ^ i`;
    /// babble talkers are taken from the clean audio of this corpus.
    pub fn corrupted(&self, noise: NoiseType, snr_db: f64, seed: u64) -> Result<Corpus> {
        if noise == NoiseType::None {
            return Ok(self.clone());
        }
        let base = derive_seed(seed, "noise");
        let samples = self
            .samples
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let s_seed = base ^ i as u64;
                let mut r = rng(s_seed ^ 0x5eed);
                let sources = self.babble_sources(i, &mut r);
                let audio = mix_noise(&s.audio, noise, snr_db, s_seed, &sources)?;
                Ok(PairedSample { audio, noise_type: noise, snr_db: Some(snr_db), ..s.clone() })
            })
            .collect::<Result<_>>()?;
        Ok(Corpus { config: self.config.clone(), samples })
    }
}

/// Fixed per-token prototype rows for both modalities.
pub struct Prototypes {
    pub audio: Tensor,
    pub video: Tensor,
}

impl Prototypes {
    pub fn new(cfg: &CorpusConfig) -> Self {
        let mut r = rng(derive_seed(cfg.seed, "prototypes"));
        let audio = Tensor::randn([cfg.vocab_size, cfg.audio_dim], 1.0, &mut r);
        let mut video = Tensor::randn([cfg.vocab_size, cfg.video_dim], 1.0, &mut r);
        let d = cfg.video_dim;
        for t in 0..cfg.vocab_size {
            let src = cfg.viseme_of(t);
            if src != t {
                let row = video.row(src).to_vec();
                video.data_mut()[t * d..(t + 1) * d].copy_from_slice(&row);
            }
        }
        Self { audio, video }
    }
}

fn emit_stream(tokens: &[usize], protos: &Tensor, fpt: usize, rng: &mut impl Rng) -> Tensor {
    let dim = protos.cols();
    let mut data = Vec::with_capacity(tokens.len() * fpt * dim);
    for &tok in tokens {
        for _ in 0..fpt {
            for &p in protos.row(tok) {
                data.push(p + FRAME_JITTER * rng.sample::<f64, _>(rand_distr::StandardNormal));
            }
        }
    }
    Tensor::new([tokens.len() * fpt, dim], data).expect("stream shape")
}

fn gen_sample(cfg: &CorpusConfig, protos: &Prototypes, index: u64) -> PairedSample {
    let base = derive_seed(cfg.seed, "samples") ^ index;
    let mut tok_rng = rng(base);
    let [lo, hi] = cfg.seq_len_range;
    let len = tok_rng.gen_range(lo..=hi);
    let tokens: Vec<usize> = (0..len).map(|_| tok_rng.gen_range(FIRST_TOKEN..cfg.vocab_size)).collect();
    // Separate streams keep the video identical whatever happens to the audio.
    let audio = emit_stream(&tokens, &protos.audio, cfg.frames_per_token, &mut rng(base ^ 0xa0d1_0000_0000));
    let video = emit_stream(&tokens, &protos.video, cfg.frames_per_token, &mut rng(base ^ 0x0f1d_e000_0000));
    PairedSample { tokens, audio, video, noise_type: NoiseType::None, snr_db: None }
}

/// Generates the clean train and test splits.
pub fn gen_corpus(cfg: &CorpusConfig) -> Result<(Corpus, Corpus)> {
    cfg.validate()?;
    let protos = Prototypes::new(cfg);
    let train = (0..cfg.n_train as u64).map(|i| gen_sample(cfg, &protos, i)).collect();
    let test = (0..cfg.n_test as u64).map(|i| gen_sample(cfg, &protos, cfg.n_train as u64 + i)).collect();
    Ok((
        Corpus { config: cfg.clone(), samples: train },
        Corpus { config: cfg.clone(), samples: test },
    ))
}

/// Linear resampling of `x[T×F]` to `len` frames with aligned endpoints.
pub(crate) fn resample_frames(x: &Tensor, len: usize) -> Tensor {
    let (t, f) = (x.rows(), x.cols());
    let mut out = vec![0.0; len * f];
    for j in 0..len {
        let pos = if len == 1 || t == 1 { 0.0 } else { j as f64 * (t - 1) as f64 / (len - 1) as f64 };
        let i0 = (pos.floor() as usize).min(t - 1);
        let i1 = (i0 + 1).min(t - 1);
        let w = pos - i0 as f64;
        for c in 0..f {
            out[j * f + c] = (1.0 - w) * x.row(i0)[c] + w * x.row(i1)[c];
        }
    }
    Tensor::new([len, f], out).expect("resample shape")
}

/// Unit-power noise of the given type shaped like `[t × f]`.
fn unit_noise(kind: NoiseType, t: usize, f: usize, seed: u64, babble: &[&Tensor]) -> Result<Tensor> {
    let mut r = rng(seed);
    let raw = match kind {
        NoiseType::None => {
            return Err(Error::InvalidArgument("cannot mix noise of type 'none'".into()));
        }
        NoiseType::Stationary => Tensor::randn([t, f], 1.0, &mut r),
        NoiseType::Babble => {
            if babble.is_empty() {
                return Err(Error::InvalidArgument("babble noise needs at least one source utterance".into()));
            }
            let mut acc = Tensor::zeros([t, f]);
            for src in babble {
                if src.cols() != f {
                    return Err(Error::Shape(format!("babble source has {} features, expected {f}", src.cols())));
                }
                acc.add_assign(resample_frames(src, t).data());
            }
            acc.map(|x| x / babble.len() as f64)
        }
        NoiseType::Tonal => {
            let phases: Vec<f64> = (0..TONES.len() * f).map(|_| r.gen_range(0.0..std::f64::consts::TAU)).collect();
            let mut data = vec![0.0; t * f];
            for ti in 0..t {
                for c in 0..f {
                    data[ti * f + c] = TONES
                        .iter()
                        .enumerate()
                        .map(|(k, fr)| (std::f64::consts::TAU * fr * ti as f64 + phases[k * f + c]).sin())
                        .sum();
                }
            }
            Tensor::new([t, f], data)?
        }
    };
    let p = raw.power();
    if !(p > 0.0) || !p.is_finite() {
        return Err(Error::InvalidArgument(format!("{kind} noise has no power for a {t}×{f} stream")));
    }
    let s = p.sqrt();
    Ok(raw.map(|x| x / s))
}

/// Adds noise of `kind` to `audio` so that the utterance-level SNR is exactly
/// `snr_db` (powers are mean squares over all elements). `babble` lists the
/// talker streams averaged for babble noise and is ignored otherwise.
pub fn mix_noise(audio: &Tensor, kind: NoiseType, snr_db: f64, seed: u64, babble: &[&Tensor]) -> Result<Tensor> {
    if !snr_db.is_finite() {
        return Err(Error::InvalidArgument(format!("snr_db must be finite (got {snr_db})")));
    }
    let (t, f) = audio.dims2()?;
    let p_signal = audio.power();
    if !(p_signal > 0.0) {
        return Err(Error::InvalidArgument("cannot set an SNR against zero-power audio".into()));
    }
    let noise = unit_noise(kind, t, f, seed, babble)?;
    let gain = (p_signal / 10f64.powf(snr_db / 10.0)).sqrt();
    let data = audio.data().iter().zip(noise.data()).map(|(a, n)| a + gain * n).collect();
    Tensor::new([t, f], data)
}

/// Measured SNR in dB of `mixed` against the clean reference.
pub fn measured_snr_db(clean: &Tensor, mixed: &Tensor) -> f64 {
    let diff: Vec<f64> = mixed.data().iter().zip(clean.data()).map(|(m, c)| m - c).collect();
    let p_noise = diff.iter().map(|x| x * x).sum::<f64>() / diff.len() as f64;
    10.0 * (clean.power() / p_noise).log10()
}

const CORPUS_MAGIC: &[u8; 4] = b"RGFC";
pub const CORPUS_VERSION: u32 = 1;

pub(crate) struct Writer<W: Write> {
    inner: W,
}

impl<W: Write> Writer<W> {
    pub fn new(inner: W) -> Self {
        Self { inner }
    }
    pub fn bytes(&mut self, b: &[u8]) -> std::io::Result<()> {
        self.inner.write_all(b)
    }
    pub fn u8(&mut self, x: u8) -> std::io::Result<()> {
        self.bytes(&[x])
    }
    pub fn u32(&mut self, x: u32) -> std::io::Result<()> {
        self.bytes(&x.to_le_bytes())
    }
    pub fn u64(&mut self, x: u64) -> std::io::Result<()> {
        self.bytes(&x.to_le_bytes())
    }
    pub fn f64s(&mut self, xs: &[f64]) -> std::io::Result<()> {
        for x in xs {
            self.bytes(&x.to_le_bytes())?;
        }
        Ok(())
    }
    pub fn str(&mut self, s: &str) -> std::io::Result<()> {
        self.u32(s.len() as u32)?;
        self.bytes(s.as_bytes())
    }
    pub fn finish(mut self) -> std::io::Result<W> {
        self.inner.flush()?;
        Ok(self.inner)
    }
}

pub(crate) struct Reader<R: Read> {
    inner: R,
}

impl<R: Read> Reader<R> {
    pub fn new(inner: R) -> Self {
        Self { inner }
    }
    pub fn bytes<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut b = [0u8; N];
        self.inner
            .read_exact(&mut b)
            .map_err(|e| Error::Format(format!("truncated file: {e}")))?;
        Ok(b)
    }
    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.bytes::<1>()?[0])
    }
    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes()?))
    }
    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes()?))
    }
    pub fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n).map(|_| Ok(f64::from_le_bytes(self.bytes()?))).collect()
    }
    pub fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        if n > 1 << 24 {
            return Err(Error::Format(format!("string length {n} is implausible")));
        }
        let mut b = vec![0u8; n];
        self.inner
            .read_exact(&mut b)
            .map_err(|e| Error::Format(format!("truncated file: {e}")))?;
        String::from_utf8(b).map_err(|e| Error::Format(format!("invalid utf-8: {e}")))
    }
    pub fn expect_eof(&mut self) -> Result<()> {
        let mut b = [0u8; 1];
        match self.inner.read(&mut b) {
            Ok(0) => Ok(()),
            Ok(_) => Err(Error::Format("trailing bytes after last record".into())),
            Err(e) => Err(Error::Format(e.to_string())),
        }
    }
}

/// Writes a corpus file: magic `RGFC`, u32 version, JSON config echo, then
/// one record per utterance (u32 token ids, fp64 frames, noise metadata).
/// All integers and floats are little-endian.
pub fn write_corpus(path: impl AsRef<Path>, corpus: &Corpus) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let io = |e| Error::io(path, e);
    let mut w = Writer::new(BufWriter::new(file));
    w.bytes(CORPUS_MAGIC).map_err(io)?;
    w.u32(CORPUS_VERSION).map_err(io)?;
    let echo = serde_json::to_string(&corpus.config).expect("config serializes");
    w.str(&echo).map_err(io)?;
    w.u32(corpus.samples.len() as u32).map_err(io)?;
    for s in &corpus.samples {
        w.u32(s.tokens.len() as u32).map_err(io)?;
        for &t in &s.tokens {
            w.u32(t as u32).map_err(io)?;
        }
        w.u32(s.audio.rows() as u32).map_err(io)?;
        w.u32(s.audio.cols() as u32).map_err(io)?;
        w.u32(s.video.cols() as u32).map_err(io)?;
        w.f64s(s.audio.data()).map_err(io)?;
        w.f64s(s.video.data()).map_err(io)?;
        w.u8(s.noise_type.code()).map_err(io)?;
        w.u8(s.snr_db.is_some() as u8).map_err(io)?;
        w.f64s(&[s.snr_db.unwrap_or(0.0)]).map_err(io)?;
    }
    w.finish().map_err(io)?;
    Ok(())
}

pub fn read_corpus(path: impl AsRef<Path>) -> Result<Corpus> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader::new(BufReader::new(file));
    if &r.bytes::<4>()? != CORPUS_MAGIC {
        return Err(Error::Format(format!("{} is not a corpus file (bad magic)", path.display())));
    }
    let version = r.u32()?;
    if version != CORPUS_VERSION {
        return Err(Error::Version { found: version, expected: CORPUS_VERSION });
    }
    let config: CorpusConfig =
        serde_json::from_str(&r.string()?).map_err(|e| Error::Format(format!("config echo: {e}")))?;
    let n = r.u32()? as usize;
    let mut samples = Vec::with_capacity(n.min(1 << 20));
    for _ in 0..n {
        let nt = r.u32()? as usize;
        let tokens = (0..nt).map(|_| r.u32().map(|t| t as usize)).collect::<Result<Vec<_>>>()?;
        let t = r.u32()? as usize;
        let fa = r.u32()? as usize;
        let fv = r.u32()? as usize;
        let audio = Tensor::new([t, fa], r.f64s(t * fa)?)?;
        let video = Tensor::new([t, fv], r.f64s(t * fv)?)?;
        let noise_type = NoiseType::from_code(r.u8()?)?;
        let has_snr = r.u8()? != 0;
        let snr = r.f64s(1)?[0];
        samples.push(PairedSample { tokens, audio, video, noise_type, snr_db: has_snr.then_some(snr) });
    }
    r.expect_eof()?;
    Ok(Corpus { config, samples })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> CorpusConfig {
        CorpusConfig { n_train: 20, n_test: 5, ..CorpusConfig::default() }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = gen_corpus(&small()).unwrap();
        let b = gen_corpus(&small()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn frame_count_follows_tokens() {
        let (train, _) = gen_corpus(&small()).unwrap();
        for s in &train.samples {
            assert_eq!(s.frames(), s.tokens.len() * 4);
            assert_eq!(s.video.rows(), s.frames());
            assert!(s.tokens.iter().all(|&t| (FIRST_TOKEN..32).contains(&t)));
        }
    }

    #[test]
    fn two_tokens_give_eight_frames() {
        let cfg = small();
        let protos = Prototypes::new(&cfg);
        let a = emit_stream(&[5, 7], &protos.audio, 4, &mut rng(0));
        assert_eq!(a.shape(), &[8, cfg.audio_dim]);
    }

    #[test]
    fn class_means_match_prototypes() {
        // 1000 frames of a single token: mean within 3σ/√n of its prototype.
        let cfg = small();
        let protos = Prototypes::new(&cfg);
        let n = 1000;
        let frames = emit_stream(&vec![9; n / 4], &protos.audio, 4, &mut rng(3));
        let bound = 3.0 * FRAME_JITTER / (n as f64).sqrt();
        for c in 0..cfg.audio_dim {
            let mean = (0..n).map(|t| frames.row(t)[c]).sum::<f64>() / n as f64;
            assert!((mean - protos.audio.row(9)[c]).abs() < bound, "dim {c}");
        }
    }

    #[test]
    fn viseme_groups_share_video_but_not_audio() {
        let cfg = CorpusConfig { viseme_groups: Some(4), ..small() };
        let p = Prototypes::new(&cfg);
        assert_eq!(cfg.viseme_of(FIRST_TOKEN + 5), FIRST_TOKEN + 1);
        assert_eq!(p.video.row(FIRST_TOKEN + 1), p.video.row(FIRST_TOKEN + 5));
        assert_ne!(p.video.row(FIRST_TOKEN + 1), p.video.row(FIRST_TOKEN + 2));
        assert_ne!(p.audio.row(FIRST_TOKEN + 1), p.audio.row(FIRST_TOKEN + 5));
        // audio prototypes do not depend on the grouping
        assert_eq!(p.audio, Prototypes::new(&small()).audio);
        assert!(CorpusConfig { viseme_groups: Some(0), ..small() }.validate().is_err());
    }

    #[test]
    fn invalid_config_lists_every_violation() {
        let cfg = CorpusConfig { vocab_size: 2, seq_len_range: [5, 3], audio_dim: 0, ..CorpusConfig::default() };
        match cfg.validate() {
            Err(Error::Config(v)) => assert_eq!(v.len(), 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn zero_db_means_equal_power() {
        let (train, _) = gen_corpus(&small()).unwrap();
        let s = &train.samples[0];
        let src = [&train.samples[1].audio];
        for kind in NoiseType::CORRUPTING {
            let mixed = mix_noise(&s.audio, kind, 0.0, 11, &src).unwrap();
            let diff: Vec<f64> = mixed.data().iter().zip(s.audio.data()).map(|(m, a)| m - a).collect();
            let pn = diff.iter().map(|x| x * x).sum::<f64>() / diff.len() as f64;
            assert!((pn / s.audio.power() - 1.0).abs() < 1e-9, "{kind}");
        }
    }

    #[test]
    fn ten_db_is_a_tenth_of_the_power() {
        let (train, _) = gen_corpus(&small()).unwrap();
        let s = &train.samples[2];
        let mixed = mix_noise(&s.audio, NoiseType::Stationary, 10.0, 5, &[]).unwrap();
        let diff: Vec<f64> = mixed.data().iter().zip(s.audio.data()).map(|(m, a)| m - a).collect();
        let pn = diff.iter().map(|x| x * x).sum::<f64>() / diff.len() as f64;
        assert!((pn / (s.audio.power() / 10.0) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn huge_snr_is_nearly_transparent() {
        let (train, _) = gen_corpus(&small()).unwrap();
        let s = &train.samples[0];
        let mixed = mix_noise(&s.audio, NoiseType::Tonal, 200.0, 5, &[]).unwrap();
        let dev = mixed.data().iter().zip(s.audio.data()).map(|(m, a)| (m - a).abs()).fold(0.0, f64::max);
        assert!(dev < 1e-8 * s.audio.max_abs());
    }

    #[test]
    fn mixing_rejects_bad_inputs() {
        let z = Tensor::zeros([4, 2]);
        assert!(mix_noise(&z, NoiseType::Stationary, 0.0, 0, &[]).is_err());
        let a = Tensor::full([4, 2], 1.0);
        assert!(mix_noise(&a, NoiseType::None, 0.0, 0, &[]).is_err());
        assert!(mix_noise(&a, NoiseType::Stationary, f64::NAN, 0, &[]).is_err());
        assert!(mix_noise(&a, NoiseType::Babble, 0.0, 0, &[]).is_err());
        assert!("music".parse::<NoiseType>().is_err());
    }

    #[test]
    fn corruption_keeps_video() {
        let (_, test) = gen_corpus(&small()).unwrap();
        let noisy = test.corrupted(NoiseType::Babble, 0.0, 4).unwrap();
        for (a, b) in test.samples.iter().zip(&noisy.samples) {
            assert!(a.video.bitwise_eq(&b.video));
            assert_ne!(a.audio, b.audio);
            assert_eq!(b.snr_db, Some(0.0));
        }
    }

    #[test]
    fn corpus_round_trip_and_corruption_checks() {
        let dir = tempfile::tempdir().unwrap();
        let (train, _) = gen_corpus(&small()).unwrap();
        let noisy = train.corrupted(NoiseType::Tonal, 5.0, 1).unwrap();
        let p = dir.path().join("c.rgfc");
        write_corpus(&p, &noisy).unwrap();
        let back = read_corpus(&p).unwrap();
        assert_eq!(back, noisy);
        for (a, b) in back.samples.iter().zip(&noisy.samples) {
            assert!(a.audio.bitwise_eq(&b.audio));
        }

        let mut bytes = std::fs::read(&p).unwrap();
        bytes[0] = b'X';
        std::fs::write(&p, &bytes).unwrap();
        assert!(matches!(read_corpus(&p), Err(Error::Format(_))));

        bytes[0] = b'R';
        bytes[4..8].copy_from_slice(&2u32.to_le_bytes());
        std::fs::write(&p, &bytes).unwrap();
        assert!(matches!(read_corpus(&p), Err(Error::Version { found: 2, expected: 1 })));
    }
}
