//! The `rgf` command line: every pipeline stage as a subcommand.
//!
//! Each command reads a run config (defaults when `--config` is absent),
//! writes its artifacts plus `resolved_config.toml` into the output
//! directory and appends one timestamped line to `run.log`. Timestamps
//! appear nowhere else, so primary artifacts are byte-reproducible.

use std::ffi::OsString;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rayon::prelude::*;

use crate::config::RunConfig;
use crate::data::{gen_corpus, read_corpus, write_corpus, Corpus};
use crate::error::{Error, Result};
use crate::eval::{run_matrix, score_sweep, sweep_csv, sweep_markdown, sweep_svg, thread_budget, write_text, Condition, EvalReport, MatrixEntry};
use crate::fusion::{FusionConfig, FusionModel, Variant};
use crate::gradcheck::{run_suite, CheckReport};
use crate::router::RouterModel;
use crate::training::{finetune, pretrain_router, write_finetune_csv, write_pretrain_csv, NoiseCondition};

pub const TRAIN_CORPUS: &str = "corpus_train.rgfc";
pub const TEST_CORPUS: &str = "corpus_test.rgfc";
pub const ROUTER_CKPT: &str = "router.rgfr";

#[derive(Debug, Parser)]
#[command(name = "rgf", version, about = "Router-gated audio-visual fusion on a synthetic corpus")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, clap::Args)]
pub struct Common {
    /// TOML run config; built-in defaults when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory; overrides `out_dir` from the config.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the paired train/test corpus.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Pretrain the reliability router on the clean training corpus.
    PretrainRouter {
        #[command(flatten)]
        common: Common,
        /// Directory holding the corpus files (default: the output directory).
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Fine-tune one fusion model against a frozen router.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Router checkpoint (default: `<out>/router.rgfr`).
        #[arg(long)]
        router: Option<PathBuf>,
        /// ours, sa, l2 or self-attn (default: the config's model.variant).
        #[arg(long)]
        variant: Option<Variant>,
        /// clean or noisy (default: the config's finetune.noise_condition).
        #[arg(long)]
        condition: Option<NoiseCondition>,
    },
    /// Evaluate model checkpoints over clean and every noise condition.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        router: Option<PathBuf>,
        /// Model checkpoints (default: every `model_*.rgfm` in the output directory).
        #[arg(long, num_args = 1..)]
        models: Vec<PathBuf>,
    },
    /// Mean router score per noise type and SNR, as CSV, markdown and SVG.
    SweepScores {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        router: Option<PathBuf>,
    },
    /// Train all four variants under both conditions and report them together.
    Ablate {
        #[command(flatten)]
        common: Common,
    },
    /// gen-data, pretrain-router, finetune (ours and self-attn) and eval in one go.
    Quickstart {
        #[command(flatten)]
        common: Common,
    },
    /// Finite-difference check of every differentiable op and the gated block.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        trials: usize,
    },
}

/// Parses `args`, runs the command and returns the process exit code.
///
/// Failures print exactly one line to stderr:
/// `error kind=<kind> message=<json string>`.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let msg = e.kind().as_str().unwrap_or("bad arguments").to_string();
            let detail = e.to_string().lines().next().unwrap_or_default().trim_start_matches("error: ").to_string();
            eprintln!("error kind=usage message={}", serde_json::Value::String(format!("{msg}: {detail}")));
            return 2;
        }
    };
    match run(&cli.command) {
        Ok(summary) => {
            print!("{summary}");
            0
        }
        Err(e) => {
            eprintln!("error kind={} message={}", e.kind(), serde_json::Value::String(e.to_string()));
            1
        }
    }
}

/// Runs one command, returning the text it prints on success.
pub fn run(command: &Command) -> Result<String> {
    match command {
        Command::GenData { common } => {
            let (cfg, out) = setup(common)?;
            logged(&out, "gen-data", || gen_data(&cfg, &out))
        }
        Command::PretrainRouter { common, data } => {
            let (cfg, out) = setup(common)?;
            let data = data.clone().unwrap_or_else(|| out.clone());
            logged(&out, "pretrain-router", || pretrain(&cfg, &data, &out))
        }
        Command::Finetune { common, data, router, variant, condition } => {
            let (cfg, out) = setup(common)?;
            let data = data.clone().unwrap_or_else(|| out.clone());
            let router = router.clone().unwrap_or_else(|| out.join(ROUTER_CKPT));
            let variant = variant.unwrap_or(cfg.model.variant);
            let condition = condition.unwrap_or(cfg.finetune.noise_condition);
            logged(&out, "finetune", || finetune_one(&cfg, &data, &router, &out, variant, condition).map(|p| p.display().to_string() + "\n"))
        }
        Command::Eval { common, data, router, models } => {
            let (cfg, out) = setup(common)?;
            let data = data.clone().unwrap_or_else(|| out.clone());
            let router = router.clone().unwrap_or_else(|| out.join(ROUTER_CKPT));
            let models = if models.is_empty() { model_files(&out)? } else { models.clone() };
            logged(&out, "eval", || eval(&cfg, &data, &router, &models, &out, "eval_report").map(|r| r.to_markdown()))
        }
        Command::SweepScores { common, data, router } => {
            let (cfg, out) = setup(common)?;
            let data = data.clone().unwrap_or_else(|| out.clone());
            let router = router.clone().unwrap_or_else(|| out.join(ROUTER_CKPT));
            logged(&out, "sweep-scores", || sweep(&cfg, &data, &router, &out))
        }
        Command::Ablate { common } => {
            let (cfg, out) = setup(common)?;
            logged(&out, "ablate", || ablate(&cfg, &out).map(|r| r.to_markdown()))
        }
        Command::Quickstart { common } => {
            let (cfg, out) = setup(common)?;
            logged(&out, "quickstart", || quickstart(&cfg, &out).map(|r| r.to_markdown()))
        }
        Command::Gradcheck { seed, trials } => {
            let reports = run_suite(*seed, *trials)?;
            let text = gradcheck_listing(&reports);
            if reports.iter().all(CheckReport::passed) {
                Ok(text)
            } else {
                print!("{text}");
                let failed: Vec<&str> = reports.iter().filter(|r| !r.passed()).map(|r| r.op).collect();
                Err(Error::InvalidArgument(format!("gradient check failed for {}", failed.join(", "))))
            }
        }
    }
}

fn setup(common: &Common) -> Result<(RunConfig, PathBuf)> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(out) = &common.out {
        cfg.out_dir = out.clone();
    }
    let out = cfg.out_dir.clone();
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    cfg.write_resolved(&out)?;
    Ok((cfg, out))
}

/// Runs `f`, recording start, finish and outcome in the sidecar log.
fn logged(out: &Path, name: &str, f: impl FnOnce() -> Result<String>) -> Result<String> {
    let start = std::time::Instant::now();
    let result = f();
    let status = match &result {
        Ok(_) => "ok".to_string(),
        Err(e) => format!("error:{}", e.kind()),
    };
    let stamp = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let path = out.join("run.log");
    if let Ok(mut log) = std::fs::OpenOptions::new().create(true).append(true).open(&path) {
        let _ = writeln!(log, "unix={stamp} command={name} status={status} secs={:.1}", start.elapsed().as_secs_f64());
    }
    result
}

fn load_corpora(data: &Path) -> Result<(Corpus, Corpus)> {
    Ok((read_corpus(data.join(TRAIN_CORPUS))?, read_corpus(data.join(TEST_CORPUS))?))
}

/// Clean plus each configured noise type at each configured SNR.
pub fn eval_conditions(cfg: &RunConfig) -> Vec<Condition> {
    let mut v = vec![Condition::CLEAN];
    for &kind in &cfg.eval.noise_types {
        v.extend(cfg.eval.snrs.iter().map(|&s| Condition::noisy(kind, s)));
    }
    v
}

pub fn model_file_name(variant: Variant, condition: NoiseCondition) -> String {
    format!("model_{variant}_{condition}.rgfm")
}

/// Writes both corpus files.
pub fn gen_data(cfg: &RunConfig, out: &Path) -> Result<String> {
    let (train, test) = gen_corpus(&cfg.corpus)?;
    write_corpus(out.join(TRAIN_CORPUS), &train)?;
    write_corpus(out.join(TEST_CORPUS), &test)?;
    Ok(format!("{} train / {} test utterances in {}\n", train.len(), test.len(), out.display()))
}

pub fn pretrain(cfg: &RunConfig, data: &Path, out: &Path) -> Result<String> {
    let (train, _) = load_corpora(data)?;
    let (router, records) = pretrain_router(&train, cfg.router.clone(), &cfg.pretrain)?;
    router.save(out.join(ROUTER_CKPT))?;
    write_pretrain_csv(out.join("pretrain_loss.csv"), &records)?;
    let last = records.last().map_or(f64::NAN, |r| r.total);
    Ok(format!("router after {} steps, final loss {last:.6}\n", records.len()))
}

fn load_router(cfg: &RunConfig, path: &Path) -> Result<RouterModel> {
    RouterModel::load_expecting(path, &cfg.router)
}

/// Fine-tunes one variant and returns the checkpoint path.
pub fn finetune_one(
    cfg: &RunConfig,
    data: &Path,
    router: &Path,
    out: &Path,
    variant: Variant,
    condition: NoiseCondition,
) -> Result<PathBuf> {
    let (train, _) = load_corpora(data)?;
    let router = load_router(cfg, router)?;
    train_variant(cfg, &train, &router, out, variant, condition)
}

fn train_variant(
    cfg: &RunConfig,
    train: &Corpus,
    router: &RouterModel,
    out: &Path,
    variant: Variant,
    condition: NoiseCondition,
) -> Result<PathBuf> {
    let model_cfg = FusionConfig { variant, ..cfg.model.clone() };
    let train_cfg = crate::training::TrainConfig { noise_condition: condition, ..cfg.finetune.clone() };
    let (model, records) = finetune(train, router, model_cfg, &train_cfg)?;
    let path = out.join(model_file_name(variant, condition));
    model.save(&path)?;
    write_finetune_csv(out.join(format!("finetune_{variant}_{condition}.csv")), &records)?;
    Ok(path)
}

/// `model_*.rgfm` files in `dir`, sorted by name.
fn model_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut v: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            let name = p.file_name().and_then(|n| n.to_str()).unwrap_or_default();
            name.starts_with("model_") && name.ends_with(".rgfm")
        })
        .collect();
    v.sort();
    if v.is_empty() {
        return Err(Error::MissingFile(dir.join("model_*.rgfm")));
    }
    Ok(v)
}

/// Group of a checkpoint: the training condition when the file name carries one.
fn group_of(path: &Path) -> String {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
    ["clean", "noisy"].iter().find(|c| stem.ends_with(&format!("_{c}"))).map_or_else(String::new, |c| c.to_string())
}

/// Evaluates checkpoints and writes `<stem>.csv` and `<stem>.md`.
pub fn eval(cfg: &RunConfig, data: &Path, router: &Path, models: &[PathBuf], out: &Path, stem: &str) -> Result<EvalReport> {
    let (_, test) = load_corpora(data)?;
    let router = load_router(cfg, router)?;
    let loaded = models.iter().map(FusionModel::load).collect::<Result<Vec<_>>>()?;
    let entries: Vec<MatrixEntry<'_>> =
        models.iter().zip(&loaded).map(|(p, m)| MatrixEntry { group: group_of(p), model: m }).collect();
    let report = run_matrix(&entries, &router, &test, &eval_conditions(cfg), cfg.eval_seed(), cfg.max_decode_len())?;
    report.write(out.join(format!("{stem}.csv")), out.join(format!("{stem}.md")))?;
    Ok(report)
}

pub fn sweep(cfg: &RunConfig, data: &Path, router: &Path, out: &Path) -> Result<String> {
    let (_, test) = load_corpora(data)?;
    let router = load_router(cfg, router)?;
    let points = score_sweep(&router, &test, &cfg.eval.noise_types, &cfg.eval.snrs, cfg.eval_seed())?;
    let md = sweep_markdown(&points);
    write_text(&out.join("score_sweep.csv"), &sweep_csv(&points))?;
    write_text(&out.join("score_sweep.md"), &md)?;
    write_text(&out.join("score_sweep.svg"), &sweep_svg(&points))?;
    Ok(md)
}

/// Corpus and router in `out`, generated and pretrained unless already present.
fn corpus_and_router(cfg: &RunConfig, out: &Path) -> Result<(Corpus, RouterModel)> {
    if !out.join(TRAIN_CORPUS).exists() || !out.join(TEST_CORPUS).exists() {
        gen_data(cfg, out)?;
    }
    if !out.join(ROUTER_CKPT).exists() {
        pretrain(cfg, out, out)?;
    }
    let (train, _) = load_corpora(out)?;
    Ok((train, load_router(cfg, &out.join(ROUTER_CKPT))?))
}

/// Every variant under both conditions, trained `RGF_THREADS` at a time.
pub fn ablate(cfg: &RunConfig, out: &Path) -> Result<EvalReport> {
    let (train, router) = corpus_and_router(cfg, out)?;
    let cells: Vec<(Variant, NoiseCondition)> = [NoiseCondition::Clean, NoiseCondition::Noisy]
        .into_iter()
        .flat_map(|c| Variant::ALL.into_iter().map(move |v| (v, c)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(thread_budget())
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    let paths: Vec<PathBuf> = pool.install(|| {
        cells.par_iter().map(|&(v, c)| train_variant(cfg, &train, &router, out, v, c)).collect::<Result<Vec<_>>>()
    })?;
    eval(cfg, out, &out.join(ROUTER_CKPT), &paths, out, "ablation_report")
}

/// The whole pipeline for the full model and the self-attn baseline.
pub fn quickstart(cfg: &RunConfig, out: &Path) -> Result<EvalReport> {
    gen_data(cfg, out)?;
    pretrain(cfg, out, out)?;
    let condition = cfg.finetune.noise_condition;
    let router = out.join(ROUTER_CKPT);
    let paths = [Variant::Ours, Variant::SelfAttn]
        .into_iter()
        .map(|v| finetune_one(cfg, out, &router, out, v, condition))
        .collect::<Result<Vec<_>>>()?;
    eval(cfg, out, &router, &paths, out, "eval_report")
}

pub fn gradcheck_listing(reports: &[CheckReport]) -> String {
    let mut s = String::new();
    for r in reports {
        let verdict = if r.passed() { "PASS" } else { "FAIL" };
        s.push_str(&format!("{verdict} {:<28} trials={} max_rel_err={:.3e}\n", r.op, r.trials, r.max_rel_err));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_every_subcommand() {
        for args in [
            vec!["rgf", "gen-data", "--config", "c.toml", "--out", "o"],
            vec!["rgf", "pretrain-router"],
            vec!["rgf", "finetune", "--variant", "self-attn", "--condition", "noisy"],
            vec!["rgf", "eval", "--models", "a.rgfm", "b.rgfm"],
            vec!["rgf", "sweep-scores", "--router", "r.rgfr"],
            vec!["rgf", "ablate"],
            vec!["rgf", "quickstart"],
            vec!["rgf", "gradcheck", "--seed", "3"],
        ] {
            Cli::try_parse_from(&args).unwrap_or_else(|e| panic!("{args:?}: {e}"));
        }
        assert!(Cli::try_parse_from(["rgf", "finetune", "--variant", "big"]).is_err());
    }

    #[test]
    fn groups_come_from_file_names() {
        assert_eq!(group_of(Path::new("x/model_ours_noisy.rgfm")), "noisy");
        assert_eq!(group_of(Path::new("model_sa_clean.rgfm")), "clean");
        assert_eq!(group_of(Path::new("mine.rgfm")), "");
    }

    #[test]
    fn missing_checkpoint_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig::default();
        let err = eval(&cfg, dir.path(), Path::new("nowhere/router.rgfr"), &[], dir.path(), "r").unwrap_err();
        assert_eq!(err.kind(), "missing-file");
        assert!(err.to_string().contains(TRAIN_CORPUS));
    }

    #[test]
    fn conditions_follow_the_config() {
        let mut cfg = RunConfig::default();
        cfg.eval.snrs = vec![0.0];
        cfg.eval.noise_types = vec![crate::data::NoiseType::Babble];
        assert_eq!(eval_conditions(&cfg), vec![Condition::CLEAN, Condition::noisy(crate::data::NoiseType::Babble, 0.0)]);
    }
}
