//! Token error rates, relative error reduction, the score-vs-SNR sweep and
//! the condition matrix harness.
//!
//! Tokens play the role of words, so "WER" here is the token error rate.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::data::{Corpus, NoiseType};
use crate::error::{Error, Result};
use crate::fusion::{FusionModel, Variant};
use crate::router::{local_gate, GateVariant, RouterModel};
use crate::seed::derive_seed;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct EditCounts {
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
}

impl EditCounts {
    pub fn total(&self) -> usize {
        self.substitutions + self.insertions + self.deletions
    }
}

/// Unit-cost Levenshtein alignment. Among minimal alignments the backtrace
/// prefers a substitution (or match), then a deletion, then an insertion.
pub fn edit_distance<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> EditCounts {
    let (n, m) = (reference.len(), hypothesis.len());
    let w = m + 1;
    let mut d = vec![0usize; (n + 1) * w];
    for i in 0..=n {
        d[i * w] = i;
    }
    for j in 0..=m {
        d[j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let diag = d[(i - 1) * w + j - 1] + usize::from(reference[i - 1] != hypothesis[j - 1]);
            let del = d[(i - 1) * w + j] + 1;
            let ins = d[i * w + j - 1] + 1;
            d[i * w + j] = diag.min(del).min(ins);
        }
    }
    let mut counts = EditCounts::default();
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = d[i * w + j];
        if i > 0 && j > 0 {
            let mismatch = usize::from(reference[i - 1] != hypothesis[j - 1]);
            if d[(i - 1) * w + j - 1] + mismatch == here {
                counts.substitutions += mismatch;
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && d[(i - 1) * w + j] + 1 == here {
            counts.deletions += 1;
            i -= 1;
        } else {
            counts.insertions += 1;
            j -= 1;
        }
    }
    counts
}

/// Corpus-level error rate in percent: total edits over total reference length.
pub fn wer<T: PartialEq>(refs: &[Vec<T>], hyps: &[Vec<T>]) -> Result<f64> {
    if refs.len() != hyps.len() {
        return Err(Error::InvalidArgument(format!("{} references but {} hypotheses", refs.len(), hyps.len())));
    }
    let total: usize = refs.iter().map(Vec::len).sum();
    if total == 0 {
        return Err(Error::InvalidArgument("references contain no tokens".into()));
    }
    let edits: usize = refs.iter().zip(hyps).map(|(r, h)| edit_distance(r, h).total()).sum();
    Ok(100.0 * edits as f64 / total as f64)
}

/// Relative error reduction in percent, rounded half up to two decimals.
pub fn rerr(wer_base: f64, wer_ours: f64) -> Result<f64> {
    if !(wer_base > 0.0) {
        return Err(Error::InvalidArgument(format!("baseline WER must be > 0 (got {wer_base})")));
    }
    let raw = 100.0 * (wer_base - wer_ours) / wer_base;
    // The small offset keeps decimal halves such as x.xx5 from rounding down
    // because of their binary representation.
    Ok(((raw * 100.0) + 0.5 + 1e-9).floor() / 100.0)
}

/// One evaluation condition; `snr_db = None` means clean audio.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Condition {
    pub noise: NoiseType,
    pub snr_db: Option<f64>,
}

impl Condition {
    pub const CLEAN: Condition = Condition { noise: NoiseType::None, snr_db: None };

    pub fn noisy(noise: NoiseType, snr_db: f64) -> Self {
        Self { noise, snr_db: Some(snr_db) }
    }

    /// Clean plus every corrupting noise type at each SNR.
    pub fn grid(snrs: &[f64]) -> Vec<Condition> {
        let mut v = vec![Condition::CLEAN];
        for kind in NoiseType::CORRUPTING {
            v.extend(snrs.iter().map(|&s| Condition::noisy(kind, s)));
        }
        v
    }

    pub fn is_clean(&self) -> bool {
        self.snr_db.is_none()
    }

    pub fn label(&self) -> String {
        match self.snr_db {
            None => "clean".into(),
            Some(s) => format!("{}@{}dB", self.noise, s),
        }
    }

    /// The test corpus under this condition, with noise drawn from `seed`.
    pub fn apply(&self, corpus: &Corpus, seed: u64) -> Result<Corpus> {
        match self.snr_db {
            None => Ok(corpus.clone()),
            Some(snr) => corpus.corrupted(self.noise, snr, derive_seed(seed, "eval-noise")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SweepPoint {
    pub noise: NoiseType,
    pub snr_db: Option<f64>,
    pub mean_s_v: f64,
    /// Utterances scored.
    pub n_utt: usize,
    /// Patches averaged over.
    pub n_patches: usize,
}

/// Mean router score `s_v` over every patch of every test utterance, for
/// each noise type at clean and each SNR.
pub fn score_sweep(
    router: &RouterModel,
    corpus: &Corpus,
    noise_types: &[NoiseType],
    snrs: &[f64],
    seed: u64,
) -> Result<Vec<SweepPoint>> {
    let clean = mean_score(router, corpus)?;
    let mut points = Vec::new();
    for &noise in noise_types {
        points.push(SweepPoint { noise, snr_db: None, mean_s_v: clean.0, n_utt: corpus.len(), n_patches: clean.1 });
        for &snr in snrs {
            let noisy = Condition::noisy(noise, snr).apply(corpus, seed)?;
            let (m, n) = mean_score(router, &noisy)?;
            points.push(SweepPoint { noise, snr_db: Some(snr), mean_s_v: m, n_utt: corpus.len(), n_patches: n });
        }
    }
    Ok(points)
}

fn mean_score(router: &RouterModel, corpus: &Corpus) -> Result<(f64, usize)> {
    let (mut sum, mut n) = (0.0, 0);
    for s in &corpus.samples {
        let sc = router.score(&s.audio, &s.video)?;
        sum += sc.s_v.sum();
        n += sc.source_len;
    }
    if n == 0 {
        return Err(Error::InvalidArgument("cannot sweep an empty corpus".into()));
    }
    Ok((sum / n as f64, n))
}

fn snr_label(snr: Option<f64>) -> String {
    snr.map_or_else(|| "clean".into(), |s| format!("{s}"))
}

pub fn sweep_csv(points: &[SweepPoint]) -> String {
    let mut s = String::from("noise_type,snr_db,mean_s_v,n_utt,n_patches\n");
    for p in points {
        let _ = writeln!(s, "{},{},{:.6},{},{}", p.noise, snr_label(p.snr_db), p.mean_s_v, p.n_utt, p.n_patches);
    }
    s
}

pub fn sweep_markdown(points: &[SweepPoint]) -> String {
    let mut levels: Vec<Option<f64>> = Vec::new();
    for p in points {
        if !levels.contains(&p.snr_db) {
            levels.push(p.snr_db);
        }
    }
    let mut s = String::from("| noise |");
    for l in &levels {
        let _ = write!(s, " {} |", l.map_or_else(|| "clean".into(), |v| format!("{v} dB")));
    }
    s.push_str("\n|---|");
    s.push_str(&"---:|".repeat(levels.len()));
    s.push('\n');
    let mut kinds: Vec<NoiseType> = Vec::new();
    for p in points {
        if !kinds.contains(&p.noise) {
            kinds.push(p.noise);
        }
    }
    for k in kinds {
        let _ = write!(s, "| {k} |");
        for l in &levels {
            match points.iter().find(|p| p.noise == k && p.snr_db == *l) {
                Some(p) => {
                    let _ = write!(s, " {:.4} |", p.mean_s_v);
                }
                None => s.push_str(" - |"),
            }
        }
        s.push('\n');
    }
    s
}

/// Grouped bar chart of the sweep, one group per noise type.
pub fn sweep_svg(points: &[SweepPoint]) -> String {
    const BAR: f64 = 22.0;
    const GAP: f64 = 30.0;
    const H: f64 = 220.0;
    const TOP: f64 = 30.0;
    let mut kinds: Vec<NoiseType> = Vec::new();
    for p in points {
        if !kinds.contains(&p.noise) {
            kinds.push(p.noise);
        }
    }
    let per_group = points.iter().filter(|p| Some(&p.noise) == kinds.first()).count().max(1);
    let lo = points.iter().map(|p| p.mean_s_v).fold(f64::INFINITY, f64::min).min(0.0);
    let hi = points.iter().map(|p| p.mean_s_v).fold(f64::NEG_INFINITY, f64::max).max(1e-9);
    let scale = |v: f64| TOP + H * (hi - v) / (hi - lo);
    let group_w = per_group as f64 * BAR + GAP;
    let width = 60.0 + kinds.len() as f64 * group_w;
    let shades = ["#1b4f72", "#2e86c1", "#85c1e9", "#d6eaf8", "#f2f3f4"];

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{:.0}" font-family="sans-serif" font-size="11">"#,
        H + TOP + 50.0
    );
    let _ = writeln!(s, r#"<text x="8" y="16">mean s_v by noise type and SNR</text>"#);
    let zero = scale(0.0);
    let _ = writeln!(s, r#"<line x1="50" y1="{zero:.2}" x2="{width:.0}" y2="{zero:.2}" stroke="black"/>"#);
    for (gi, k) in kinds.iter().enumerate() {
        let x0 = 55.0 + gi as f64 * group_w;
        for (bi, p) in points.iter().filter(|p| p.noise == *k).enumerate() {
            let x = x0 + bi as f64 * BAR;
            let y = scale(p.mean_s_v.max(0.0));
            let h = (scale(p.mean_s_v.min(0.0)) - y).max(0.0);
            let _ = writeln!(
                s,
                r#"<rect x="{x:.2}" y="{y:.2}" width="{:.2}" height="{h:.2}" fill="{}" stroke="black"><title>{} {}: {:.4}</title></rect>"#,
                BAR - 2.0,
                shades[bi % shades.len()],
                k,
                snr_label(p.snr_db),
                p.mean_s_v
            );
            let _ = writeln!(
                s,
                r#"<text x="{:.2}" y="{:.2}" text-anchor="middle" font-size="9">{}</text>"#,
                x + BAR / 2.0 - 1.0,
                TOP + H + 14.0,
                snr_label(p.snr_db)
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{k}</text>"#,
            x0 + per_group as f64 * BAR / 2.0,
            TOP + H + 32.0
        );
    }
    s.push_str("</svg>\n");
    s
}

/// A trained model entering the matrix. `group` separates models trained
/// under different conditions; each group's self-attn model is its baseline.
pub struct MatrixEntry<'a> {
    pub group: String,
    pub model: &'a FusionModel,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub group: String,
    pub model_variant: Variant,
    pub router_variant: Option<GateVariant>,
    pub noise: NoiseType,
    pub snr_db: Option<f64>,
    pub wer: f64,
    pub n_utt: usize,
    pub mean_s_v: Option<f64>,
    /// Against the self-attn model of the same group, when it has WER > 0.
    pub rerr: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
}

/// WER of one model on one (already corrupted) corpus, with the mean router score.
pub fn evaluate(model: &FusionModel, router: &RouterModel, corpus: &Corpus, max_len: usize) -> Result<(f64, Option<f64>)> {
    let mut refs = Vec::with_capacity(corpus.len());
    let mut hyps = Vec::with_capacity(corpus.len());
    let (mut s_sum, mut s_n) = (0.0, 0usize);
    for s in &corpus.samples {
        let hyp = match model.variant().gate() {
            Some(v) => {
                let scores = router.score(&s.audio, &s.video)?;
                s_sum += scores.s_v.sum();
                s_n += scores.source_len;
                model.greedy_decode(&s.audio, &s.video, |n| local_gate(&scores, n, v), max_len)?
            }
            None => model.greedy_decode(&s.audio, &s.video, |_| unreachable!("baseline ignores the gate"), max_len)?,
        };
        refs.push(s.tokens.clone());
        hyps.push(hyp);
    }
    let mean = (s_n > 0).then(|| s_sum / s_n as f64);
    Ok((wer(&refs, &hyps)?, mean))
}

/// Number of cells evaluated concurrently, from `RGF_THREADS` (default 1).
pub fn thread_budget() -> usize {
    std::env::var("RGF_THREADS").ok().and_then(|v| v.parse().ok()).filter(|&n| n >= 1).unwrap_or(1)
}

/// Greedy-decodes the test corpus for every model under every condition.
pub fn run_matrix(
    models: &[MatrixEntry<'_>],
    router: &RouterModel,
    corpus: &Corpus,
    conditions: &[Condition],
    seed: u64,
    max_len: usize,
) -> Result<EvalReport> {
    let corrupted = conditions.iter().map(|c| c.apply(corpus, seed)).collect::<Result<Vec<_>>>()?;
    let cells: Vec<(usize, usize)> =
        (0..models.len()).flat_map(|m| (0..conditions.len()).map(move |c| (m, c))).collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(thread_budget())
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    let results: Vec<Result<(f64, Option<f64>)>> = pool.install(|| {
        cells.par_iter().map(|&(m, c)| evaluate(models[m].model, router, &corrupted[c], max_len)).collect()
    });

    let mut rows = Vec::with_capacity(cells.len());
    for (&(m, c), r) in cells.iter().zip(results) {
        let (wer, mean_s_v) = r?;
        let model = models[m].model;
        rows.push(EvalRow {
            group: models[m].group.clone(),
            model_variant: model.variant(),
            router_variant: model.variant().gate(),
            noise: conditions[c].noise,
            snr_db: conditions[c].snr_db,
            wer,
            n_utt: corpus.len(),
            mean_s_v,
            rerr: None,
        });
    }
    let baselines: BTreeMap<(String, String), f64> = rows
        .iter()
        .filter(|r| r.model_variant == Variant::SelfAttn)
        .map(|r| ((r.group.clone(), cond_key(r)), r.wer))
        .collect();
    for r in &mut rows {
        if let Some(&b) = baselines.get(&(r.group.clone(), cond_key(r))) {
            r.rerr = rerr(b, r.wer).ok();
        }
    }
    Ok(EvalReport { rows })
}

fn cond_key(r: &EvalRow) -> String {
    Condition { noise: r.noise, snr_db: r.snr_db }.label()
}

fn fmt_opt(x: Option<f64>, digits: usize) -> String {
    x.map_or_else(String::new, |v| format!("{v:.digits$}"))
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("group,model_variant,router_variant,noise_type,snr_db,wer,n_utt,mean_s_v,rerr\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{:.4},{},{},{}",
                r.group,
                r.model_variant,
                r.router_variant.map_or_else(|| "none".to_string(), |v| v.to_string()),
                r.noise,
                snr_label(r.snr_db),
                r.wer,
                r.n_utt,
                fmt_opt(r.mean_s_v, 6),
                fmt_opt(r.rerr, 2)
            );
        }
        s
    }

    /// Mean WER of one model row over the listed conditions.
    fn average(&self, group: &str, variant: Variant, noisy_only: bool) -> Option<f64> {
        let v: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.group == group && r.model_variant == variant && !(noisy_only && r.snr_db.is_none()))
            .map(|r| r.wer)
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    /// Average WER over the noisy conditions at one SNR.
    pub fn average_at(&self, group: &str, variant: Variant, snr_db: f64) -> Option<f64> {
        let v: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.group == group && r.model_variant == variant && r.snr_db == Some(snr_db))
            .map(|r| r.wer)
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn wer_of(&self, group: &str, variant: Variant, condition: Condition) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.group == group && r.model_variant == variant && r.noise == condition.noise && r.snr_db == condition.snr_db)
            .map(|r| r.wer)
    }

    /// One table per group: rows are models, columns are conditions, then
    /// the averages with and without the clean condition and their RERRs.
    pub fn to_markdown(&self) -> String {
        let mut s = String::from("Token error rate (%, reported as WER). RERR is relative to the self-attn model of the same group.\n");
        let mut groups: Vec<&str> = Vec::new();
        for r in &self.rows {
            if !groups.contains(&r.group.as_str()) {
                groups.push(&r.group);
            }
        }
        for group in groups {
            let rows: Vec<&EvalRow> = self.rows.iter().filter(|r| r.group == group).collect();
            let mut conds: Vec<String> = Vec::new();
            let mut variants: Vec<Variant> = Vec::new();
            for r in &rows {
                let c = cond_key(r);
                if !conds.contains(&c) {
                    conds.push(c);
                }
                if !variants.contains(&r.model_variant) {
                    variants.push(r.model_variant);
                }
            }
            s.push('\n');
            if !group.is_empty() {
                let _ = writeln!(s, "### {group}\n");
            }
            s.push_str("| model |");
            for c in &conds {
                let _ = write!(s, " {c} |");
            }
            s.push_str(" avg incl. clean | avg noisy-only | RERR incl. clean | RERR noisy-only |\n|---|");
            s.push_str(&"---:|".repeat(conds.len() + 4));
            s.push('\n');
            let base_all = self.average(group, Variant::SelfAttn, false);
            let base_noisy = self.average(group, Variant::SelfAttn, true);
            for v in variants {
                let _ = write!(s, "| {v} |");
                for c in &conds {
                    let w = rows.iter().find(|r| r.model_variant == v && &cond_key(r) == c).map(|r| r.wer);
                    let _ = write!(s, " {} |", fmt_opt(w, 2));
                }
                let all = self.average(group, v, false);
                let noisy = self.average(group, v, true);
                let rel = |b: Option<f64>, o: Option<f64>| match (b, o) {
                    (Some(b), Some(o)) => rerr(b, o).ok(),
                    _ => None,
                };
                let _ = writeln!(
                    s,
                    " {} | {} | {} | {} |",
                    fmt_opt(all, 2),
                    fmt_opt(noisy, 2),
                    fmt_opt(rel(base_all, all), 2),
                    fmt_opt(rel(base_noisy, noisy), 2)
                );
            }
        }
        s
    }

    pub fn write(&self, csv: impl AsRef<Path>, markdown: impl AsRef<Path>) -> Result<()> {
        write_text(csv.as_ref(), &self.to_csv())?;
        write_text(markdown.as_ref(), &self.to_markdown())
    }
}

pub(crate) fn write_text(path: &Path, body: &str) -> Result<()> {
    std::fs::write(path, body).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_sequences_need_no_edits() {
        assert_eq!(edit_distance(&[1, 2, 3], &[1, 2, 3]), EditCounts::default());
        assert_eq!(edit_distance::<u8>(&[], &[]), EditCounts::default());
    }

    #[test]
    fn single_substitution() {
        let e = edit_distance(&["a", "b", "c"], &["a", "x", "c"]);
        assert_eq!(e, EditCounts { substitutions: 1, insertions: 0, deletions: 0 });
    }

    #[test]
    fn tie_break_prefers_substitution_then_deletion() {
        // "ab" -> "b": one deletion; "a" -> "b": one substitution rather than del+ins.
        assert_eq!(edit_distance(&[1], &[2]), EditCounts { substitutions: 1, insertions: 0, deletions: 0 });
        assert_eq!(edit_distance(&[1, 2], &[2]).deletions, 1);
        assert_eq!(edit_distance(&[2], &[1, 2]).insertions, 1);
        assert_eq!(edit_distance(&[1, 2, 3], &[]).deletions, 3);
        assert_eq!(edit_distance(&[], &[1, 2]).insertions, 2);
    }

    #[test]
    fn wer_arithmetic() {
        let r: Vec<Vec<u32>> = vec![(0..10).collect()];
        let mut h = r.clone();
        h[0].insert(4, 99);
        assert_eq!(wer(&r, &h).unwrap(), 10.0);
        assert_eq!(wer(&r, &r).unwrap(), 0.0);
        assert!(wer::<u32>(&[vec![]], &[vec![1]]).is_err());
        assert!(wer(&r, &[]).is_err());
    }

    #[test]
    fn corpus_wer_differs_from_utterance_average() {
        // 1 error in a 1-token ref, 0 errors in a 9-token ref.
        let refs = vec![vec![1], (0..9).collect::<Vec<_>>()];
        let hyps = vec![vec![2], (0..9).collect::<Vec<_>>()];
        let corpus = wer(&refs, &hyps).unwrap();
        assert_eq!(corpus, 10.0);
        let per_utt = (100.0 + 0.0) / 2.0;
        assert!(corpus < per_utt);
    }

    #[test]
    fn rerr_reproduces_reported_pairs() {
        assert_eq!(rerr(13.43, 7.70).unwrap(), 42.67);
        assert_eq!(rerr(8.60, 7.18).unwrap(), 16.51);
        assert_eq!(rerr(5.0, 5.0).unwrap(), 0.0);
        assert!(rerr(0.0, 1.0).is_err());
        assert!(rerr(4.0, 5.0).unwrap() < 0.0);
    }

    #[test]
    fn rerr_rounds_half_up() {
        // 100·(8 − 6.6804)/8 = 16.495 exactly in decimal
        assert_eq!(rerr(8.0, 6.6804).unwrap(), 16.5);
        // 100·(8 − 6.6808)/8 = 16.49
        assert_eq!(rerr(8.0, 6.6808).unwrap(), 16.49);
    }

    #[test]
    fn condition_grid_and_labels() {
        let g = Condition::grid(&[10.0, 5.0, 0.0]);
        assert_eq!(g.len(), 10);
        assert_eq!(g[0].label(), "clean");
        assert_eq!(g[3].label(), "stationary@0dB");
    }

    #[test]
    fn svg_is_well_formed_text() {
        let pts = vec![
            SweepPoint { noise: NoiseType::Babble, snr_db: None, mean_s_v: 0.9, n_utt: 4, n_patches: 40 },
            SweepPoint { noise: NoiseType::Babble, snr_db: Some(0.0), mean_s_v: -0.1, n_utt: 4, n_patches: 40 },
        ];
        let svg = sweep_svg(&pts);
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        assert_eq!(svg.matches("<rect").count(), 2);
        assert!(sweep_markdown(&pts).contains("| babble | 0.9000 | -0.1000 |"));
    }
}
