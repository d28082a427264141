//! `refine-loop`: synthetic worlds, BM25 indexing, rollouts, scoring, toy
//! GRPO training and evaluation from the command line.
//!
//! Logs go to standard error and data to files. Failures print one JSON line
//! `{"error": kind, "message": ...}` on standard error and exit nonzero.

mod config;

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{self, BufRead, BufReader, BufWriter, IsTerminal, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use refine_loop::evalkit::{behavior_report, evaluate, k_sweep};
use refine_loop::grpo::{train, TrainSetup};
use refine_loop::policy::{Policy, RemoteConfig, RemotePolicy, ScriptedPolicy, ToySearchAgent, ToySoftmaxPolicy};
use refine_loop::retrieval::{read_corpus, RetrievalIndex};
use refine_loop::rewards::{read_dataset, score_trajectory, QaExample};
use refine_loop::rollout::run_group;
use refine_loop::synthkb::{generate_world, parse_hop_weights};
use refine_loop::trajectory::TrajectoryLog;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::info;

use config::{Backend, RunConfig};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{0}")]
    Run(String),
}

impl CliError {
    pub fn io(path: &Path, source: io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config_invalid",
            CliError::Io { .. } => "io_error",
            CliError::Run(_) => "run_failed",
        }
    }
}

fn run_err(e: impl std::fmt::Display) -> CliError {
    CliError::Run(e.to_string())
}

#[derive(Parser)]
#[command(
    name = "refine-loop",
    version,
    about = "Search-and-refine retrieval loop with GRPO on a synthetic multi-hop world"
)]
struct Cli {
    /// TOML run configuration. Flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run seed (`synth` uses it as the world seed).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads. Defaults to the available parallelism; results do not depend on it.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic world: corpus.jsonl, train.jsonl, test.jsonl.
    Synth(SynthArgs),
    /// Build a BM25 index.
    #[command(subcommand)]
    Index(IndexCommand),
    /// Sample G rollouts per question and write trajectory logs.
    Rollout(RolloutArgs),
    /// Score trajectory logs with the reward functions.
    Score(ScoreArgs),
    /// Train the toy search agent with GRPO.
    TrainToy(TrainArgs),
    /// EM, F1 and CEM over trajectory logs.
    Eval(EvalArgs),
    /// Search, refine and answer behavior over trajectory logs.
    Analyze(AnalyzeArgs),
    /// Evaluate a policy at several retrieval depths.
    KSweep(KSweepArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    entities: Option<usize>,
    #[arg(long)]
    relations: Option<usize>,
    /// Chain length distribution, e.g. `1:0.5,2:0.5`.
    #[arg(long)]
    hops: Option<String>,
    #[arg(long)]
    distractors: Option<usize>,
    #[arg(long)]
    n_train: Option<usize>,
    #[arg(long)]
    n_test: Option<usize>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Subcommand)]
enum IndexCommand {
    /// Index a `{id, title, text}` JSONL corpus.
    Build(IndexBuildArgs),
}

#[derive(Args)]
struct IndexBuildArgs {
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    k1: Option<f64>,
    #[arg(long)]
    b: Option<f64>,
}

#[derive(Args)]
struct PolicyArgs {
    #[arg(long, value_enum)]
    policy: Option<Backend>,
    /// Toy policy parameters written by `train-toy`. Untrained if absent.
    #[arg(long)]
    params: Option<PathBuf>,
    /// Scripted policy: JSON `{"default": [...], "per_question": {question: [...]}}`.
    #[arg(long)]
    script: Option<PathBuf>,
}

#[derive(Args)]
struct SamplingArgs {
    #[arg(long)]
    max_searches: Option<usize>,
    #[arg(long)]
    max_tokens: Option<usize>,
    #[arg(long)]
    temperature: Option<f64>,
    /// `refine` or `no_refine`.
    #[arg(long)]
    template: Option<String>,
}

#[derive(Args)]
struct RolloutArgs {
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    index: Option<PathBuf>,
    #[command(flatten)]
    policy: PolicyArgs,
    #[command(flatten)]
    sampling: SamplingArgs,
    /// Rollouts per question.
    #[arg(long)]
    g: Option<usize>,
    #[arg(long)]
    top_k: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long)]
    trajectories: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// `nonlinear`, `linear` or `answer_only`.
    #[arg(long)]
    mode: Option<String>,
    /// `refine` or `documents`.
    #[arg(long)]
    placement: Option<String>,
    /// `cover`, `token_recall` or `word_recall`.
    #[arg(long)]
    granularity: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Env {
    Synth,
}

#[derive(Args)]
struct TrainArgs {
    /// Training data source. `synth` generates the configured world unless
    /// `--dataset` and `--index` are given.
    #[arg(long, value_enum, default_value = "synth")]
    env: Env,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    index: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    g: Option<usize>,
    #[arg(long)]
    clip: Option<f64>,
    #[arg(long)]
    kl: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    questions_per_step: Option<usize>,
    /// Reward combination: `nonlinear`, `linear` or `answer_only`.
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    top_k: Option<usize>,
    /// Per-step statistics, JSONL.
    #[arg(long)]
    stats: Option<PathBuf>,
    /// Trained parameters, JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    trajectories: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long)]
    trajectories: Option<PathBuf>,
    /// Supplies hop counts. Gold answers are taken from the logs otherwise.
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    behavior: Option<PathBuf>,
}

#[derive(Args)]
struct KSweepArgs {
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    index: Option<PathBuf>,
    #[command(flatten)]
    policy: PolicyArgs,
    #[command(flatten)]
    sampling: SamplingArgs,
    /// Comma-separated depths, e.g. `1,2,3`.
    #[arg(long, value_delimiter = ',')]
    ks: Option<Vec<usize>>,
    #[arg(long)]
    report: Option<PathBuf>,
}

fn set<T>(slot: &mut T, flag: Option<T>) {
    if let Some(v) = flag {
        *slot = v;
    }
}

/// Parses a snake_case enum flag through its serde names.
fn enum_flag<T: DeserializeOwned>(name: &str, value: Option<String>) -> Result<Option<T>, CliError> {
    value
        .map(|v| {
            serde_json::from_value(serde_json::Value::String(v.clone()))
                .map_err(|_| CliError::Config(format!("--{name}: unknown value `{v}`")))
        })
        .transpose()
}

fn open(path: &Path) -> Result<BufReader<File>, CliError> {
    File::open(path).map(BufReader::new).map_err(|e| CliError::io(path, e))
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::io(path, e))
}

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, CliError> {
    let mut out = Vec::new();
    for (i, line) in open(path)?.lines().enumerate() {
        let line = line.map_err(|e| CliError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| CliError::Run(format!("{}:{}: {e}", path.display(), i + 1)))?);
    }
    Ok(out)
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), CliError> {
    let mut w = create(path)?;
    for r in rows {
        serde_json::to_writer(&mut w, r).map_err(run_err)?;
        w.write_all(b"\n").map_err(|e| CliError::io(path, e))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(run_err)?;
    w.write_all(b"\n").map_err(|e| CliError::io(path, e))?;
    w.flush().map_err(|e| CliError::io(path, e))
}

fn load_dataset(path: &Path) -> Result<Vec<QaExample>, CliError> {
    read_dataset(open(path)?).map_err(|e| CliError::io(path, e))
}

fn load_index(path: &Path) -> Result<RetrievalIndex, CliError> {
    RetrievalIndex::read_jsonl(open(path)?).map_err(|e| CliError::Run(format!("{}: {e}", path.display())))
}

fn apply_sampling(cfg: &mut RunConfig, s: SamplingArgs) -> Result<(), CliError> {
    set(&mut cfg.rollout.max_search_actions, s.max_searches);
    set(&mut cfg.rollout.max_response_tokens, s.max_tokens);
    set(&mut cfg.rollout.temperature, s.temperature);
    if let Some(m) = enum_flag("template", s.template)? {
        cfg.rollout.template_mode = m;
    }
    Ok(())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ScriptFile {
    #[serde(default)]
    default: Vec<String>,
    #[serde(default)]
    per_question: BTreeMap<String, Vec<String>>,
}

enum LoadedPolicy {
    Scripted(ScriptedPolicy),
    Toy(ToySoftmaxPolicy),
    Remote(RemotePolicy),
}

impl LoadedPolicy {
    fn load(cfg: &mut RunConfig, args: PolicyArgs) -> Result<Self, CliError> {
        set(&mut cfg.policy, args.policy);
        Ok(match cfg.policy {
            Backend::Scripted => {
                let path = cfg.path("script", args.script)?;
                let file: ScriptFile = serde_json::from_reader(open(&path)?)
                    .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
                let mut p = ScriptedPolicy::new(file.default);
                for (q, segs) in file.per_question {
                    p = p.with_question(q, segs);
                }
                LoadedPolicy::Scripted(p)
            }
            Backend::Toy => match cfg.optional_path("params", args.params) {
                Some(path) => LoadedPolicy::Toy(
                    serde_json::from_reader(open(&path)?)
                        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?,
                ),
                None => LoadedPolicy::Toy(ToySearchAgent::untrained()),
            },
            Backend::Remote => LoadedPolicy::Remote(RemotePolicy::new(RemoteConfig::from_env().map_err(run_err)?)),
        })
    }

    fn with<T>(&self, f: impl FnOnce(&dyn Policy) -> Result<T, CliError>) -> Result<T, CliError> {
        match self {
            LoadedPolicy::Scripted(p) => f(p),
            LoadedPolicy::Toy(p) => f(&ToySearchAgent::new(p).map_err(run_err)?),
            LoadedPolicy::Remote(p) => f(p),
        }
    }
}

fn synth(mut cfg: RunConfig, seed: Option<u64>, a: SynthArgs) -> Result<(), CliError> {
    set(&mut cfg.world.n_entities, a.entities);
    set(&mut cfg.world.n_relations, a.relations);
    set(&mut cfg.world.n_distractors_per_fact, a.distractors);
    set(&mut cfg.world.n_train, a.n_train);
    set(&mut cfg.world.n_test, a.n_test);
    set(&mut cfg.world.seed, seed);
    if let Some(h) = a.hops {
        cfg.world.hop_weights = parse_hop_weights(&h).map_err(|e| CliError::Config(e.to_string()))?;
    }
    let dir = cfg.path("out_dir", a.out_dir)?;
    cfg.validate()?;
    let world = generate_world(&cfg.world).map_err(run_err)?;
    fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    write_jsonl(&dir.join("corpus.jsonl"), &world.corpus)?;
    write_jsonl(&dir.join("train.jsonl"), &world.train)?;
    write_jsonl(&dir.join("test.jsonl"), &world.test)?;
    cfg.echo("synth", &dir)?;
    info!(docs = world.corpus.len(), train = world.train.len(), test = world.test.len(), dir = %dir.display(), "world written");
    Ok(())
}

fn index_build(mut cfg: RunConfig, a: IndexBuildArgs) -> Result<(), CliError> {
    set(&mut cfg.bm25.k1, a.k1);
    set(&mut cfg.bm25.b, a.b);
    let corpus_path = cfg.path("corpus", a.corpus)?;
    let out = cfg.path("out", a.out)?;
    cfg.validate()?;
    let corpus =
        read_corpus(open(&corpus_path)?).map_err(|e| CliError::Run(format!("{}: {e}", corpus_path.display())))?;
    let index = RetrievalIndex::build(corpus, cfg.bm25.k1, cfg.bm25.b).map_err(run_err)?;
    let mut w = create(&out)?;
    index.write_jsonl(&mut w).map_err(run_err)?;
    w.flush().map_err(|e| CliError::io(&out, e))?;
    cfg.echo("index build", &out)?;
    info!(docs = index.doc_count(), out = %out.display(), "index written");
    Ok(())
}

fn rollout(mut cfg: RunConfig, a: RolloutArgs) -> Result<(), CliError> {
    set(&mut cfg.rollout.group_size, a.g);
    set(&mut cfg.retrieval.top_k, a.top_k);
    apply_sampling(&mut cfg, a.sampling)?;
    let dataset_path = cfg.path("dataset", a.dataset)?;
    let index_path = cfg.path("index", a.index)?;
    let out = cfg.path("out", a.out)?;
    let policy = LoadedPolicy::load(&mut cfg, a.policy)?;
    cfg.validate()?;
    let data = load_dataset(&dataset_path)?;
    let index = load_index(&index_path)?;
    index
        .check_config(&cfg.retrieval)
        .map_err(|e| CliError::Config(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let seeds: Vec<u64> = data.iter().map(|_| rng.gen()).collect();
    let logs = policy.with(|p| {
        let groups: Result<Vec<Vec<TrajectoryLog>>, CliError> = data
            .par_iter()
            .zip(&seeds)
            .map(|(q, seed)| {
                let recs = run_group(p, &index, q, &cfg.rollout, &cfg.retrieval, *seed).map_err(run_err)?;
                Ok(recs.iter().map(|r| r.to_log(q)).collect())
            })
            .collect();
        Ok(groups?.into_iter().flatten().collect::<Vec<_>>())
    })?;
    write_jsonl(&out, &logs)?;
    cfg.echo("rollout", &out)?;
    info!(rollouts = logs.len(), out = %out.display(), "trajectories written");
    Ok(())
}

#[derive(Serialize)]
struct ScoreRow {
    id: String,
    seed: Option<u64>,
    #[serde(flatten)]
    reward: refine_loop::rewards::RewardBreakdown,
}

fn score(mut cfg: RunConfig, a: ScoreArgs) -> Result<(), CliError> {
    if let Some(m) = enum_flag("mode", a.mode)? {
        cfg.reward.combination = m;
    }
    if let Some(p) = enum_flag("placement", a.placement)? {
        cfg.reward.placement = p;
    }
    if let Some(g) = enum_flag("granularity", a.granularity)? {
        cfg.reward.retrieval_granularity = g;
    }
    let logs_path = cfg.path("trajectories", a.trajectories)?;
    let dataset_path = cfg.path("dataset", a.dataset)?;
    let out = cfg.path("out", a.out)?;
    cfg.validate()?;
    let logs: Vec<TrajectoryLog> = read_jsonl(&logs_path)?;
    let data = load_dataset(&dataset_path)?;
    let by_id: BTreeMap<&str, &QaExample> = data.iter().map(|q| (q.id.as_str(), q)).collect();
    let rows = logs
        .iter()
        .map(|l| {
            let q = by_id
                .get(l.id.as_str())
                .ok_or_else(|| CliError::Run(format!("log {} has no dataset example", l.id)))?;
            Ok(ScoreRow {
                id: l.id.clone(),
                seed: l.seed,
                reward: score_trajectory(&l.trajectory(), &l.retrieved_docs(), q, &cfg.reward),
            })
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    write_jsonl(&out, &rows)?;
    cfg.echo("score", &out)?;
    info!(rows = rows.len(), out = %out.display(), "rewards written");
    Ok(())
}

fn train_toy(mut cfg: RunConfig, a: TrainArgs) -> Result<(), CliError> {
    let Env::Synth = a.env;
    set(&mut cfg.grpo.steps, a.steps);
    set(&mut cfg.grpo.group_size, a.g);
    set(&mut cfg.rollout.group_size, a.g);
    set(&mut cfg.grpo.clip_ratio, a.clip);
    set(&mut cfg.grpo.kl_coeff, a.kl);
    set(&mut cfg.grpo.learning_rate, a.lr);
    set(&mut cfg.grpo.questions_per_step, a.questions_per_step);
    set(&mut cfg.retrieval.top_k, a.top_k);
    if let Some(m) = enum_flag("mode", a.mode)? {
        cfg.reward.combination = m;
    }
    let stats_path = cfg.optional_path("stats", a.stats);
    let out = cfg.optional_path("out", a.out);
    let files = (
        cfg.optional_path("dataset", a.dataset),
        cfg.optional_path("index", a.index),
    );
    cfg.rollout.group_size = cfg.grpo.group_size;
    cfg.validate()?;
    let (train_set, index) = match files {
        (Some(d), Some(i)) => (load_dataset(&d)?, load_index(&i)?),
        (None, None) => {
            let world = generate_world(&cfg.world).map_err(run_err)?;
            let index = RetrievalIndex::build(world.corpus, cfg.bm25.k1, cfg.bm25.b).map_err(run_err)?;
            (world.train, index)
        }
        _ => return Err(CliError::Config("--dataset and --index go together".into())),
    };
    let setup = TrainSetup {
        train: &train_set,
        index: &index,
        rollout: cfg.rollout,
        retrieval: cfg.retrieval,
        reward: cfg.reward,
        grpo: cfg.grpo,
    };
    let mut stats_out = stats_path.as_deref().map(create).transpose()?;
    let mut write_err = None;
    let (policy, stats) = train(ToySearchAgent::untrained(), &setup, cfg.seed, |s| {
        if s.step % 25 == 0 {
            info!(step = s.step, reward = s.mean_reward, kl = s.mean_kl, "train");
        }
        if let Some(w) = stats_out.as_mut() {
            let line = serde_json::to_string(s).expect("stats serialize");
            if let Err(e) = writeln!(w, "{line}") {
                write_err.get_or_insert(e);
            }
        }
    })
    .map_err(run_err)?;
    if let (Some(e), Some(p)) = (write_err, &stats_path) {
        return Err(CliError::io(p, e));
    }
    if let (Some(mut w), Some(p)) = (stats_out, &stats_path) {
        w.flush().map_err(|e| CliError::io(p, e))?;
    }
    if let Some(p) = &out {
        write_json(p, &policy)?;
    }
    if let Some(anchor) = out.as_ref().or(stats_path.as_ref()) {
        cfg.echo("train-toy", anchor)?;
    }
    let last = stats.last().map_or(0.0, |s| s.mean_reward);
    info!(steps = stats.len(), last_reward = last, "training finished");
    Ok(())
}

fn eval(mut cfg: RunConfig, a: EvalArgs) -> Result<(), CliError> {
    let logs_path = cfg.path("trajectories", a.trajectories)?;
    let dataset_path = cfg.path("dataset", a.dataset)?;
    let report_path = cfg.path("report", a.report)?;
    cfg.validate()?;
    let logs: Vec<TrajectoryLog> = read_jsonl(&logs_path)?;
    let report = evaluate(&logs, &load_dataset(&dataset_path)?).map_err(run_err)?;
    write_json(&report_path, &report)?;
    cfg.echo("eval", &report_path)?;
    info!(
        em = report.aggregate.em,
        f1 = report.aggregate.f1,
        cem = report.aggregate.cem,
        "evaluation written"
    );
    Ok(())
}

/// A dataset reconstructed from the gold answers carried by the logs.
fn dataset_from_logs(logs: &[TrajectoryLog]) -> Vec<QaExample> {
    let mut seen = BTreeMap::new();
    for l in logs {
        seen.entry(l.id.clone()).or_insert_with(|| QaExample {
            id: l.id.clone(),
            question: l.question.clone(),
            gold_answers: l.gold_answers.clone(),
            split: "logs".into(),
            hops: None,
        });
    }
    seen.into_values().collect()
}

fn analyze(mut cfg: RunConfig, a: AnalyzeArgs) -> Result<(), CliError> {
    let logs_path = cfg.path("trajectories", a.trajectories)?;
    let dataset_path = cfg.optional_path("dataset", a.dataset);
    let out = cfg.path("behavior", a.behavior)?;
    cfg.validate()?;
    let logs: Vec<TrajectoryLog> = read_jsonl(&logs_path)?;
    let data = match dataset_path {
        Some(p) => load_dataset(&p)?,
        None => dataset_from_logs(&logs),
    };
    let report = behavior_report(&logs, &data).map_err(run_err)?;
    write_json(&out, &report)?;
    cfg.echo("analyze", &out)?;
    info!(search_frequency = report.search_frequency, "behavior written");
    Ok(())
}

fn ksweep(mut cfg: RunConfig, a: KSweepArgs) -> Result<(), CliError> {
    set(&mut cfg.k_sweep, a.ks);
    apply_sampling(&mut cfg, a.sampling)?;
    let dataset_path = cfg.path("dataset", a.dataset)?;
    let index_path = cfg.path("index", a.index)?;
    let out = cfg.path("report", a.report)?;
    let policy = LoadedPolicy::load(&mut cfg, a.policy)?;
    cfg.validate()?;
    let data = load_dataset(&dataset_path)?;
    let index = load_index(&index_path)?;
    let rows = policy
        .with(|p| k_sweep(p, &index, &data, &cfg.k_sweep, &cfg.rollout, &cfg.retrieval, cfg.seed).map_err(run_err))?;
    write_json(&out, &rows)?;
    cfg.echo("k-sweep", &out)?;
    for r in &rows {
        info!(
            k = r.k,
            em = r.report.aggregate.em,
            searches = r.behavior.search_frequency,
            "k-sweep row"
        );
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            return Err(CliError::Config("--jobs must be >= 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .map_err(run_err)?;
    }
    if !matches!(cli.command, Command::Synth(_)) {
        set(&mut cfg.seed, cli.seed);
    }
    match cli.command {
        Command::Synth(a) => synth(cfg, cli.seed, a),
        Command::Index(IndexCommand::Build(a)) => index_build(cfg, a),
        Command::Rollout(a) => rollout(cfg, a),
        Command::Score(a) => score(cfg, a),
        Command::TrainToy(a) => train_toy(cfg, a),
        Command::Eval(a) => eval(cfg, a),
        Command::Analyze(a) => analyze(cfg, a),
        Command::KSweep(a) => ksweep(cfg, a),
    }
}

fn fail(kind: &str, message: &str) -> ExitCode {
    let line = serde_json::json!({ "error": kind, "message": message.trim().replace('\n', " ") });
    eprintln!("{line}");
    ExitCode::from(2)
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_writer(io::stderr)
        .with_ansi(io::stderr().is_terminal())
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()))
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e)
            if matches!(
                e.kind(),
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
            ) =>
        {
            e.exit()
        }
        Err(e) => {
            let msg = e.to_string();
            return fail("usage", msg.lines().next().unwrap_or("invalid arguments"));
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(e.kind(), &e.to_string()),
    }
}
