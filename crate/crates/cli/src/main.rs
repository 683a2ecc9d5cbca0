use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use rxf_core::bench::run_benchmark;
use rxf_core::checkpoint::load_checkpoint;
use rxf_core::config::RunConfig;
use rxf_core::dataset::{load_unlabeled_set, save_unlabeled_set, Dataset, Mode, UnlabeledPositiveSet};
use rxf_core::eval::{evaluate, evaluate_with, parse_ks, rank_query, RankedList, TableScorer, DEFAULT_KS};
use rxf_core::io::{to_json_lines, write_atomic, write_json};
use rxf_core::labeler::{
    label_dataset, FileJudge, Judge, JudgeKind, LabelConfig, MllmHttpJudge, OracleJudge, ShortlistScorer,
    VerdictCache,
};
use rxf_core::losses::LossKind;
use rxf_core::synth::{generate_to_dir, PlantedTruth, PLANTED_FILE};
use rxf_core::trainer::{train, OutputDir};

/// Cross-modal retrieval engine: synthetic data, dense labeling, training,
/// evaluation and ranking.
#[derive(Parser, Debug)]
#[command(name = "rxf", version, propagate_version = true)]
struct Cli {
    /// JSON run config; flags given on the command line take precedence.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Seed for every stochastic stage (data, init, batching).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Maximum worker threads (0 = all cores).
    #[arg(long, global = true, value_name = "N")]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic benchmark (train/, validation/, test/, planted.json).
    Gen(GenArgs),
    /// Build the unlabeled-positive set for a training split.
    Label(LabelArgs),
    /// Train both encoders and write checkpoints plus a run record.
    Train(TrainArgs),
    /// Report per-environment recall@K for a checkpoint or a score table.
    Eval(EvalArgs),
    /// Print the ranked image list of one or more queries as JSON lines.
    Rank(RankArgs),
    /// Compare loss kinds on freshly generated synthetic data.
    Bench(BenchArgs),
}

#[derive(Args, Debug)]
struct GenArgs {
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Training environments.
    #[arg(long, value_name = "N")]
    train_envs: Option<usize>,
    /// Validation environments (0 for none).
    #[arg(long, value_name = "N")]
    validation_envs: Option<usize>,
    /// Held-out test environments.
    #[arg(long, value_name = "N")]
    test_envs: Option<usize>,
    /// Images per environment.
    #[arg(long, value_name = "N")]
    images_per_env: Option<usize>,
    /// Visual clusters per environment.
    #[arg(long, value_name = "N")]
    clusters_per_env: Option<usize>,
    /// Noise standard deviation.
    #[arg(long)]
    sigma: Option<f64>,
}

#[derive(Args, Debug)]
struct LabelArgs {
    /// Training split directory.
    #[arg(long, value_name = "DIR")]
    dataset: Option<PathBuf>,
    /// Judge: oracle, file or mllm-http.
    #[arg(long, value_parser = parse_judge)]
    judge: Option<JudgeKind>,
    /// Planted truth for the oracle judge.
    #[arg(long, value_name = "FILE")]
    planted: Option<PathBuf>,
    /// JSON-lines verdicts for the file judge.
    #[arg(long, value_name = "FILE")]
    verdicts: Option<PathBuf>,
    /// JSON-lines shortlist scores (default: frozen stream cosine).
    #[arg(long, value_name = "FILE")]
    scores: Option<PathBuf>,
    /// Candidates per query.
    #[arg(long, value_name = "N")]
    n_cand: Option<usize>,
    /// JSON-lines verdict cache.
    #[arg(long, value_name = "FILE")]
    cache: Option<PathBuf>,
    /// Where to write the unlabeled-positive set.
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Training split directory.
    #[arg(long, value_name = "DIR")]
    train: Option<PathBuf>,
    /// Validation split used for best-epoch selection.
    #[arg(long, value_name = "DIR")]
    validation: Option<PathBuf>,
    /// Unlabeled-positive set (JSON lines).
    #[arg(long, value_name = "FILE")]
    unlabeled: Option<PathBuf>,
    /// drc, infonce, reco_relaxed_negatives, unlabeled_as_positive or soft_alpha.
    #[arg(long)]
    loss: Option<LossKind>,
    /// Training epochs.
    #[arg(long, value_name = "N")]
    epochs: Option<usize>,
    /// Queries per batch.
    #[arg(long, value_name = "N")]
    batch_size: Option<usize>,
    /// AdamW learning rate.
    #[arg(long)]
    lr: Option<f64>,
    /// Output directory for checkpoints, log and run record.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Model checkpoint to score with.
    #[arg(long, value_name = "FILE")]
    checkpoint: Option<PathBuf>,
    /// Split to evaluate (default: the config's test split).
    #[arg(long, value_name = "DIR")]
    dataset: Option<PathBuf>,
    /// Comma-separated cutoffs.
    #[arg(long, value_name = "K,K,..")]
    k: Option<String>,
    /// Score pairs from a JSON-lines table instead of a checkpoint.
    #[arg(long, value_name = "FILE", conflicts_with = "checkpoint")]
    scores: Option<PathBuf>,
    /// Also write every ranked list as JSON lines.
    #[arg(long, value_name = "FILE")]
    rankings: Option<PathBuf>,
    /// Write the metrics JSON here instead of stdout.
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct RankArgs {
    /// Model checkpoint to rank with.
    #[arg(long, value_name = "FILE")]
    checkpoint: Option<PathBuf>,
    /// Split holding the query (default: the config's test split).
    #[arg(long, value_name = "DIR")]
    dataset: Option<PathBuf>,
    /// Query id.
    #[arg(long, required_unless_present = "queries", conflicts_with = "queries")]
    query: Option<String>,
    /// File with one query id per line.
    #[arg(long, value_name = "FILE")]
    queries: Option<PathBuf>,
    /// target or receptacle; defaults to each query's own mode.
    #[arg(long)]
    mode: Option<Mode>,
}

#[derive(Args, Debug)]
struct BenchArgs {
    /// Independent seeds to run.
    #[arg(long, value_name = "N")]
    n_seeds: Option<usize>,
    /// Comma-separated loss kinds.
    #[arg(long, value_name = "LOSS,..")]
    losses: Option<String>,
    /// Comma-separated cutoffs.
    #[arg(long, value_name = "K,K,..")]
    k: Option<String>,
    /// Write the metrics JSON here; the text table goes to stdout.
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

fn parse_judge(s: &str) -> std::result::Result<JudgeKind, String> {
    match s {
        "oracle" => Ok(JudgeKind::Oracle),
        "file" => Ok(JudgeKind::File),
        "mllm-http" => Ok(JudgeKind::MllmHttp),
        other => Err(format!("unknown judge `{other}` (oracle, file, mllm-http)")),
    }
}

fn required<'a>(what: &str, p: &'a Option<PathBuf>) -> Result<&'a Path> {
    match p {
        Some(p) => Ok(p),
        None => bail!(rxf_core::Error::Config(format!("`{what}` is required (flag or config)"))),
    }
}

fn load_dataset(what: &str, p: &Option<PathBuf>) -> Result<Dataset> {
    let path = required(what, p)?;
    Dataset::load(path).with_context(|| format!("loading {what} from {}", path.display()))
}

fn print_json(value: &impl serde::Serialize) -> Result<()> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

fn set<T>(slot: &mut T, flag: Option<T>) {
    if let Some(v) = flag {
        *slot = v;
    }
}

fn set_opt<T>(slot: &mut Option<T>, flag: Option<T>) {
    if flag.is_some() {
        *slot = flag;
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("reading config {}", p.display()))?,
        None => RunConfig::default(),
    };
    set_opt(&mut cfg.seed, cli.seed);
    set(&mut cfg.jobs, cli.jobs);
    cfg.apply_overrides();
    if cfg.jobs > 0 {
        // cap rayon for every stage that does not build its own pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(cfg.jobs).build_global();
    }

    match cli.command {
        Command::Gen(a) => {
            set(&mut cfg.synth.train_envs, a.train_envs);
            set(&mut cfg.synth.validation_envs, a.validation_envs);
            set(&mut cfg.synth.test_envs, a.test_envs);
            set(&mut cfg.synth.images_per_env, a.images_per_env);
            set(&mut cfg.synth.clusters_per_env, a.clusters_per_env);
            set(&mut cfg.synth.sigma, a.sigma);
            set_opt(&mut cfg.output, a.out);
            cfg.synth.validate()?;
            let out = required("out", &cfg.output)?;
            let data = generate_to_dir(&cfg.synth, out)?;
            info!("wrote synthetic benchmark to {}", out.display());
            print_json(&serde_json::json!({
                "out": out,
                "train_queries": data.train.queries().len(),
                "validation_queries": data.validation.as_ref().map(|d| d.queries().len()),
                "test_queries": data.test.queries().len(),
                "planted_pairs": data.planted.len(),
            }))
        }
        Command::Label(a) => {
            set_opt(&mut cfg.data.train, a.dataset);
            set(&mut cfg.labeler.judge, a.judge);
            set_opt(&mut cfg.data.planted, a.planted);
            set_opt(&mut cfg.labeler.verdicts, a.verdicts);
            set_opt(&mut cfg.labeler.scores, a.scores);
            set(&mut cfg.labeler.n_cand, a.n_cand);
            set_opt(&mut cfg.labeler.cache, a.cache);
            set_opt(&mut cfg.data.unlabeled, a.out);
            cfg.validate()?;
            let out = required("out", &cfg.data.unlabeled)?.to_path_buf();
            let ds = load_dataset("dataset", &cfg.data.train)?;
            let judge: Box<dyn Judge> = match cfg.labeler.judge {
                JudgeKind::Oracle => {
                    let planted = match &cfg.data.planted {
                        Some(p) => p.clone(),
                        None => ds
                            .root()
                            .and_then(Path::parent)
                            .map(|d| d.join(PLANTED_FILE))
                            .context("`planted` is required for the oracle judge")?,
                    };
                    Box::new(OracleJudge {
                        planted: PlantedTruth::load(&planted)?,
                    })
                }
                JudgeKind::File => Box::new(FileJudge::load(required("verdicts", &cfg.labeler.verdicts)?)?),
                JudgeKind::MllmHttp => Box::new(MllmHttpJudge::new(cfg.labeler.mllm.clone())?),
            };
            let scorer = match &cfg.labeler.scores {
                Some(p) => ShortlistScorer::Table(TableScorer::load(p)?),
                None => ShortlistScorer::default(),
            };
            let cache = cfg.labeler.cache.as_deref().map(VerdictCache::open).transpose()?;
            let label_cfg = LabelConfig {
                n_cand: cfg.labeler.n_cand,
                jobs: cfg.jobs,
            };
            let res = label_dataset(&ds, &scorer, judge.as_ref(), &label_cfg, cache.as_ref())?;
            save_unlabeled_set(&res.set, &ds, &out)?;
            print_json(&serde_json::json!({"out": out, "stats": res.stats}))
        }
        Command::Train(a) => {
            set_opt(&mut cfg.data.train, a.train);
            set_opt(&mut cfg.data.validation, a.validation);
            set_opt(&mut cfg.data.unlabeled, a.unlabeled);
            set(&mut cfg.train.loss.kind, a.loss);
            set(&mut cfg.train.epochs, a.epochs);
            set(&mut cfg.train.batch_size, a.batch_size);
            set(&mut cfg.train.lr, a.lr);
            set_opt(&mut cfg.output, a.out);
            cfg.validate()?;
            let out = required("out", &cfg.output)?.to_path_buf();
            let train_set = load_dataset("train", &cfg.data.train)?;
            let val = cfg
                .data
                .validation
                .as_ref()
                .map(|_| load_dataset("validation", &cfg.data.validation))
                .transpose()?;
            let s = match &cfg.data.unlabeled {
                Some(p) => load_unlabeled_set(p)?,
                None => {
                    if cfg.train.loss.kind != LossKind::InfoNce {
                        warn!("no unlabeled-positive set given; training with an empty one");
                    }
                    UnlabeledPositiveSet::empty()
                }
            };
            let mut enc = cfg.encoder.clone();
            enc.fit_to(&train_set)?;
            let res = train(&train_set, val.as_ref(), &s, &enc, &cfg.train, Some(&out))?;
            let dir = OutputDir { root: out };
            print_json(&serde_json::json!({
                "best_checkpoint": dir.best_checkpoint(),
                "run_record": dir.run_record(),
                "best_epoch": res.record.best_epoch,
                "val_recall": res.record.epochs[res.record.best_epoch - 1].val_recall,
            }))
        }
        Command::Eval(a) => {
            set_opt(&mut cfg.checkpoint, a.checkpoint);
            set_opt(&mut cfg.data.test, a.dataset);
            let ks = match &a.k {
                Some(k) => parse_ks(k)?,
                None => DEFAULT_KS.to_vec(),
            };
            let ds = load_dataset("dataset", &cfg.data.test)?;
            let (report, lists) = match &a.scores {
                Some(p) => evaluate_with(&ds, &TableScorer::load(p)?, &ks)?,
                None => {
                    let ckpt = load_checkpoint(required("checkpoint", &cfg.checkpoint)?)?;
                    evaluate(&ckpt.params, &ckpt.header.encoder, &ds, &ks)?
                }
            };
            if let Some(p) = &a.rankings {
                write_atomic(p, &to_json_lines(&lists)?)?;
            }
            match &a.out {
                Some(p) => write_json(p, &report)?,
                None => print_json(&report)?,
            }
            Ok(())
        }
        Command::Rank(a) => {
            set_opt(&mut cfg.checkpoint, a.checkpoint);
            set_opt(&mut cfg.data.test, a.dataset);
            let ckpt = load_checkpoint(required("checkpoint", &cfg.checkpoint)?)?;
            let ds = load_dataset("dataset", &cfg.data.test)?;
            let ids: Vec<String> = match (&a.query, &a.queries) {
                (Some(q), _) => vec![q.clone()],
                (None, Some(p)) => std::fs::read_to_string(p)
                    .with_context(|| format!("reading {}", p.display()))?
                    .lines()
                    .map(str::trim)
                    .filter(|l| !l.is_empty() && !l.starts_with('#'))
                    .map(String::from)
                    .collect(),
                (None, None) => bail!(rxf_core::Error::Config("`--query` or `--queries` is required".into())),
            };
            let lists = ids
                .iter()
                .map(|id| rank_query(&ckpt.params, &ckpt.header.encoder, &ds, id, a.mode))
                .collect::<rxf_core::Result<Vec<RankedList>>>()?;
            for l in &lists {
                print_json(l)?;
            }
            Ok(())
        }
        Command::Bench(a) => {
            let mut b = cfg.bench.clone();
            set(&mut b.n_seeds, a.n_seeds);
            if let Some(l) = &a.losses {
                b.losses = l
                    .split(',')
                    .map(|s| s.trim().parse())
                    .collect::<rxf_core::Result<Vec<LossKind>>>()?;
            }
            if let Some(k) = &a.k {
                b.ks = parse_ks(k)?;
            }
            let report = run_benchmark(&b)?;
            match &a.out {
                Some(p) => {
                    write_json(p, &report)?;
                    print!("{}", report.table());
                }
                None => {
                    print_json(&report)?;
                    eprint!("{}", report.table());
                }
            }
            Ok(())
        }
    }
}

/// Context chain joined by `: `, skipping causes the outer message already
/// spells out.
fn message(err: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in err.chain() {
        let text = cause.to_string();
        if out.contains(&text) {
            continue;
        }
        if !out.is_empty() {
            out.push_str(": ");
        }
        out.push_str(&text);
    }
    out
}

/// One JSON object on stderr describing the failure.
fn error_line(kind: &str, err: &anyhow::Error) -> String {
    serde_json::json!({
        "error": {
            "kind": kind,
            "message": message(err),
        }
    })
    .to_string()
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let _ = e.print();
            let err = anyhow::anyhow!("{}", e.kind());
            eprintln!("{}", error_line("usage", &err));
            return ExitCode::from(2);
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let kind = err
                .chain()
                .find_map(|c| c.downcast_ref::<rxf_core::Error>())
                .map_or("error", rxf_core::Error::kind);
            eprintln!("{}", error_line(kind, &err));
            ExitCode::from(if kind == "config" { 2 } else { 1 })
        }
    }
}
