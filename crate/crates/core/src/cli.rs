//! Verb-style command line. Every artifact lands via temp file + rename;
//! exit codes are 0 (ok), 1 (configuration error), 2 (runtime failure).

use std::collections::BTreeSet;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::diffro::{pretrain_reward_model, RewardModel, RewardModelConfig};
use crate::pipeline::{sweep, validate_exclusive, write_sweep_csv, PipelineConfig, SweepParam};
use crate::policy::{sft_pairs, sft_pretrain, teacher_forced_accuracy, Policy, PolicyConfig, SftConfig};
use crate::rewards::{score_asr, strip_eos, AsrRewardConfig, RuleSet};
use crate::trainer::{
    evaluate_detailed, totals_from_logs, train, write_metrics_csv, EvalPoint, Method, RunConfig, RunReport,
    TrainData, TrainError, TrainInputs, UtteranceLog,
};
use crate::world::{
    build_world, generate_default, read_jsonl, write_jsonl, DatasetRequest, Sample, Subset, Task, World, WorldSpec,
};

pub const RUN_DIR_ENV: &str = "RLFORGE_RUN_DIR";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

fn config_err(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

fn runtime(msg: impl std::fmt::Display) -> CliError {
    CliError::Runtime(msg.to_string())
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Incompatible(m) => CliError::Config(m),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

type Result<T, E = CliError> = std::result::Result<T, E>;

// ---------------------------------------------------------------- config

/// SFT corpus and optimizer settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SftSection {
    pub steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub corpus_size: usize,
    pub corpus_seed: u64,
    /// Keyword symbols are this much rarer than other symbols in the corpus.
    pub keyword_weight: f64,
}

impl Default for SftSection {
    fn default() -> Self {
        let s = SftConfig::default();
        Self {
            steps: s.steps,
            learning_rate: s.learning_rate,
            batch_size: s.batch_size,
            corpus_size: 400,
            corpus_seed: 1,
            keyword_weight: 0.1,
        }
    }
}

/// RL training and test data: generated per subset unless files are given.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataSection {
    pub train_size: usize,
    pub train_seed: u64,
    pub keyword_weight: f64,
    pub test_size: usize,
    pub test_seed: u64,
    pub test_subset: Subset,
    pub train_files: Vec<String>,
    pub test_file: Option<String>,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            train_size: 200,
            train_seed: 3,
            keyword_weight: 0.1,
            test_size: 100,
            test_seed: 2,
            test_subset: Subset::D0,
            train_files: Vec::new(),
            test_file: None,
        }
    }
}

/// Optional pretrained artifacts; missing ones are trained in the run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PathsSection {
    pub baseline: Option<String>,
    pub reward_model: Option<String>,
}

/// Full harness configuration, read from TOML.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HarnessConfig {
    /// Drives policy init, SFT batches and RL sampling.
    pub seed: u64,
    pub world: WorldSpec,
    pub policy: PolicyConfig,
    pub sft: SftSection,
    pub reward_model: RewardModelConfig,
    pub run: RunConfig,
    pub data: DataSection,
    pub paths: PathsSection,
}

impl HarnessConfig {
    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        if let Some(s) = seed {
            self.seed = s;
        }
        self.run.train.seed = self.seed;
        self
    }

    pub fn sft_config(&self) -> SftConfig {
        SftConfig {
            steps: self.sft.steps,
            learning_rate: self.sft.learning_rate,
            batch_size: self.sft.batch_size,
            seed: self.seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.world
            .validate()
            .map_err(|e| config_err(format!("world: {e}")))?;
        self.run.validate().map_err(|e| config_err(format!("run: {e}")))?;
        if self.data.train_files.is_empty() && self.data.train_size == 0 {
            return Err(config_err("data.train_size must be positive"));
        }
        if self.data.test_file.is_none() && self.data.test_size == 0 {
            return Err(config_err("data.test_size must be positive"));
        }
        Ok(())
    }
}

/// Hash of the configuration with the seed zeroed, so seeds of one
/// experiment share a prefix.
pub fn config_hash(config: &HarnessConfig) -> String {
    let mut c = config.clone();
    c.seed = 0;
    c.run.train.seed = 0;
    let json = serde_json::to_vec(&c).expect("config serializes");
    hex::encode(&Sha256::digest(&json)[..8])
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Reads a TOML file, resolving `include = [...]` (paths relative to the
/// including file; later files and the includer override earlier ones).
pub fn load_toml(path: &Path) -> Result<toml::Table> {
    fn inner(path: &Path, stack: &mut Vec<PathBuf>) -> Result<toml::Table> {
        let canon = path
            .canonicalize()
            .map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        if stack.contains(&canon) {
            return Err(config_err(format!("include cycle through {}", path.display())));
        }
        let text = fs::read_to_string(path).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        let mut table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| config_err(format!("{}: {}", path.display(), e.message())))?;
        let includes = match table.remove("include") {
            None => Vec::new(),
            Some(toml::Value::String(s)) => vec![s],
            Some(toml::Value::Array(a)) => a
                .into_iter()
                .map(|v| match v {
                    toml::Value::String(s) => Ok(s),
                    _ => Err(config_err(format!("{}: include entries must be strings", path.display()))),
                })
                .collect::<Result<_>>()?,
            Some(_) => return Err(config_err(format!("{}: include must be a string or list", path.display()))),
        };
        stack.push(canon);
        let dir = path.parent().unwrap_or(Path::new("."));
        let mut merged = toml::Table::new();
        for inc in includes {
            merge(&mut merged, inner(&dir.join(inc), stack)?);
        }
        stack.pop();
        // Relative file references are resolved against this file.
        for section in ["data", "paths"] {
            if let Some(toml::Value::Table(t)) = table.get_mut(section) {
                for (k, v) in t.iter_mut() {
                    let fix = |s: &mut String| {
                        if Path::new(s.as_str()).is_relative() {
                            *s = dir.join(&*s).to_string_lossy().into_owned();
                        }
                    };
                    match (k.as_str(), v) {
                        ("test_file" | "baseline" | "reward_model", toml::Value::String(s)) => fix(s),
                        ("train_files", toml::Value::Array(a)) => {
                            for x in a.iter_mut() {
                                if let toml::Value::String(s) = x {
                                    fix(s);
                                }
                            }
                        }
                        _ => {}
                    }
                }
            }
        }
        merge(&mut merged, table);
        Ok(merged)
    }
    inner(path, &mut Vec::new())
}

/// Deserializes a merged table, rejecting unknown keys by their full path.
pub fn from_table<T: serde::de::DeserializeOwned>(table: toml::Table, origin: &Path) -> Result<T> {
    let text = toml::to_string(&table).map_err(|e| config_err(e.to_string()))?;
    let mut unknown = Vec::new();
    let de = toml::Deserializer::new(&text);
    let value: T = serde_ignored::deserialize(de, |p| unknown.push(p.to_string()))
        .map_err(|e| config_err(format!("{}: {}", origin.display(), e.message().trim())))?;
    if let Some(k) = unknown.first() {
        return Err(config_err(format!("{}: unknown key `{k}`", origin.display())));
    }
    Ok(value)
}

pub fn load_config(path: &Path) -> Result<HarnessConfig> {
    let cfg: HarnessConfig = from_table(load_toml(path)?, path)?;
    cfg.validate()?;
    Ok(cfg)
}

fn load_config_opt(path: Option<&Path>) -> Result<HarnessConfig> {
    match path {
        Some(p) => load_config(p),
        None => Ok(HarnessConfig::default()),
    }
}

// ------------------------------------------------------------------ files

/// Writes `bytes` to a temp file next to `path`, then renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir).map_err(|e| runtime(format!("{}: {e}", dir.display())))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| runtime(format!("{}: {e}", dir.display())))?;
    tmp.write_all(bytes)
        .and_then(|_| tmp.flush())
        .map_err(|e| runtime(format!("{}: {e}", path.display())))?;
    tmp.persist(path)
        .map_err(|e| runtime(format!("{}: {e}", path.display())))?;
    Ok(())
}

fn json_bytes<T: Serialize>(value: &T) -> Vec<u8> {
    let mut v = serde_json::to_vec_pretty(value).expect("serializable");
    v.push(b'\n');
    v
}

fn jsonl_bytes<T: Serialize>(rows: &[T]) -> Vec<u8> {
    let mut out = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut out, r).expect("serializable");
        out.push(b'\n');
    }
    out
}

fn read_jsonl_rows<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let f = fs::File::open(path).map_err(|e| runtime(format!("{}: {e}", path.display())))?;
    let mut rows = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| runtime(format!("{}: {e}", path.display())))?;
        if line.trim().is_empty() {
            continue;
        }
        rows.push(
            serde_json::from_str(&line).map_err(|e| config_err(format!("{} line {}: {e}", path.display(), i + 1)))?,
        );
    }
    Ok(rows)
}

fn write_checkpoint(path: &Path, c: &Checkpoint) -> Result<()> {
    let mut buf = Vec::new();
    c.write(&mut buf).map_err(runtime)?;
    write_atomic(path, &buf)
}

fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let f = fs::File::open(path).map_err(|e| runtime(format!("missing checkpoint {}: {e}", path.display())))?;
    Checkpoint::read(BufReader::new(f)).map_err(|e| match e {
        CheckpointError::Io(_) => runtime(format!("{}: {e}", path.display())),
        other => config_err(format!("{}: {other}", path.display())),
    })
}

fn read_dataset(path: &Path) -> Result<(WorldSpec, Vec<Sample>)> {
    let f = fs::File::open(path).map_err(|e| runtime(format!("{}: {e}", path.display())))?;
    read_jsonl(BufReader::new(f)).map_err(|e| config_err(format!("{}: {e}", path.display())))
}

fn dataset_bytes(spec: &WorldSpec, samples: &[Sample]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    write_jsonl(&mut buf, spec, samples).map_err(runtime)?;
    Ok(buf)
}

fn run_root(out_dir: Option<&Path>) -> PathBuf {
    out_dir
        .map(Path::to_path_buf)
        .or_else(|| std::env::var_os(RUN_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"))
}

/// `<root>/<config hash>-s<seed>`.
pub fn run_directory(root: &Path, config: &HarnessConfig) -> PathBuf {
    root.join(format!("{}-s{}", config_hash(config), config.seed))
}

// ------------------------------------------------------------------- argv

#[derive(Debug, Parser)]
#[command(name = "rlforge", version, about = "GRPO / DiffRO experiments on a synthetic speech-token world")]
struct Cli {
    #[command(subcommand)]
    verb: Verb,
}

#[derive(Debug, Subcommand)]
enum Verb {
    /// Generate a JSON-lines dataset for one subset.
    GenData(GenDataArgs),
    /// Supervised pretraining of the baseline policy.
    PretrainPolicy(PretrainArgs),
    /// Pretrain the frozen recognizer used as reward model.
    PretrainReward(PretrainArgs),
    /// Run RL into a run directory keyed by config hash and seed.
    Train(TrainArgs),
    /// Evaluate a policy checkpoint on a test set.
    Eval(EvalArgs),
    /// Score reference/hypothesis pairs with the ASR reward rules.
    Score(ScoreArgs),
    /// Step-time simulation of the alternating-device pipeline.
    SimulatePipeline(PipelineArgs),
    /// Ablation table and eval curves from finished run directories.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
struct GenDataArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_parser = parse_subset)]
    subset: Subset,
    #[arg(long)]
    n: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = parse_task, default_value = "asr")]
    task: Task,
    #[arg(long, default_value_t = 1.0)]
    keyword_weight: f64,
    #[arg(long, default_value = "")]
    id_prefix: String,
}

#[derive(Debug, Args)]
struct PretrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// SFT corpus (policy only); generated from the config when absent.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Root for run directories (default: $RLFORGE_RUN_DIR or ./runs).
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    testset: PathBuf,
    #[arg(long)]
    reward_model: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ScoreArgs {
    /// JSON lines of `{"id", "reference", "hypothesis"}` text-token arrays.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides `run.rules`, e.g. `R1,R2`.
    #[arg(long)]
    rules: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct PipelineArgs {
    #[arg(long, conflicts_with = "config")]
    preset: Option<String>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// `batch`, `audio_seconds` or `<stage>.<field>`.
    #[arg(long, requires = "values")]
    sweep: Option<String>,
    #[arg(long, value_delimiter = ',')]
    values: Vec<f64>,
}

#[derive(Debug, Args)]
struct ReportArgs {
    #[arg(long = "run-dir", required = true, num_args = 1..)]
    run_dirs: Vec<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_subset(s: &str) -> std::result::Result<Subset, String> {
    s.parse().map_err(|e: crate::world::WorldError| e.to_string())
}

fn parse_task(s: &str) -> std::result::Result<Task, String> {
    s.parse().map_err(|e: crate::world::WorldError| e.to_string())
}

/// Parses `argv` (program name first), runs the verb, returns the exit code.
pub fn run_command<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.verb {
        Verb::GenData(a) => gen_data(a),
        Verb::PretrainPolicy(a) => pretrain_policy(a),
        Verb::PretrainReward(a) => pretrain_reward(a),
        Verb::Train(a) => train_cmd(a),
        Verb::Eval(a) => eval_cmd(a),
        Verb::Score(a) => score_cmd(a),
        Verb::SimulatePipeline(a) => simulate_pipeline(a),
        Verb::Report(a) => report_cmd(a),
    };
    match result {
        Ok(msg) => {
            print!("{msg}");
            0
        }
        Err(e) => {
            eprintln!("rlforge: {e}");
            e.exit_code()
        }
    }
}

// ------------------------------------------------------------------ verbs

fn world_of(cfg: &HarnessConfig) -> Result<World> {
    build_world(&cfg.world).map_err(|e| config_err(format!("world: {e}")))
}

fn gen_data(a: GenDataArgs) -> Result<String> {
    let cfg = load_config_opt(a.config.as_deref())?;
    let world = world_of(&cfg)?;
    let req = DatasetRequest::new(a.subset, a.n, a.seed.unwrap_or(cfg.data.train_seed))
        .task(a.task)
        .keyword_weight(a.keyword_weight)
        .id_prefix(a.id_prefix);
    let samples = generate_default(&world, &req).map_err(|e| config_err(e.to_string()))?;
    write_atomic(&a.out, &dataset_bytes(&cfg.world, &samples)?)?;
    Ok(format!("wrote {} {} samples to {}\n", samples.len(), a.subset, a.out.display()))
}

fn sft_corpus(cfg: &HarnessConfig, world: &World, data: Option<&Path>) -> Result<Vec<Sample>> {
    match data {
        Some(p) => {
            let (spec, samples) = read_dataset(p)?;
            check_world(&spec, cfg.world.seed, p)?;
            Ok(samples)
        }
        None => generate_default(
            world,
            &DatasetRequest::new(Subset::D0, cfg.sft.corpus_size, cfg.sft.corpus_seed)
                .task(cfg.run.task)
                .keyword_weight(cfg.sft.keyword_weight)
                .id_prefix("sft-"),
        )
        .map_err(|e| config_err(e.to_string())),
    }
}

fn check_world(spec: &WorldSpec, seed: u64, origin: &Path) -> Result<()> {
    if spec.seed != seed {
        return Err(config_err(format!(
            "{}: world seed {} does not match {}",
            origin.display(),
            spec.seed,
            seed
        )));
    }
    Ok(())
}

fn pretrain_baseline(cfg: &HarnessConfig, world: &World, data: Option<&Path>) -> Result<(Policy, f64)> {
    let corpus = sft_corpus(cfg, world, data)?;
    let pairs = sft_pairs(&corpus, cfg.run.task, world).map_err(runtime)?;
    let mut policy = Policy::init(world, cfg.run.task, &cfg.policy, cfg.seed).map_err(|e| config_err(e.to_string()))?;
    sft_pretrain(&mut policy, &pairs, &cfg.sft_config()).map_err(runtime)?;
    let acc = teacher_forced_accuracy(&policy.decoder, &pairs).map_err(runtime)?;
    Ok((policy, acc))
}

fn pretrain_policy(a: PretrainArgs) -> Result<String> {
    let cfg = load_config_opt(a.config.as_deref())?.with_seed(a.seed);
    let world = world_of(&cfg)?;
    let (policy, acc) = pretrain_baseline(&cfg, &world, a.data.as_deref())?;
    let hash = config_hash(&cfg);
    write_checkpoint(&a.out, &Checkpoint::from_policy(&policy, cfg.world.seed, None).with_config_hash(&hash))?;
    Ok(format!(
        "{} policy: teacher-forced accuracy {acc:.4}; wrote {}\n",
        cfg.run.task,
        a.out.display()
    ))
}

fn pretrain_reward(a: PretrainArgs) -> Result<String> {
    let mut cfg = load_config_opt(a.config.as_deref())?;
    if let Some(s) = a.seed {
        cfg.reward_model.seed = s;
    }
    let world = world_of(&cfg)?;
    let (rm, report) = pretrain_reward_model(&world, &cfg.reward_model).map_err(runtime)?;
    write_checkpoint(
        &a.out,
        &Checkpoint::from_reward_model(&rm, cfg.world.seed).with_config_hash(config_hash(&cfg)),
    )?;
    Ok(format!(
        "reward model: held-out accuracy {:.4} (target {} {}); wrote {}\n",
        report.held_out_accuracy,
        cfg.reward_model.target_accuracy,
        if report.target_met { "met" } else { "not met" },
        a.out.display()
    ))
}

/// What `train` writes as `report.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub config_hash: String,
    pub seed: u64,
    pub world_seed: u64,
    pub report: RunReport,
}

fn load_policy_checkpoint(path: &str, world_seed: u64, task: Task) -> Result<Policy> {
    let c = read_checkpoint(Path::new(path))?;
    c.check_world(world_seed).map_err(|e| config_err(format!("{path}: {e}")))?;
    let p = c.into_policy().map_err(|e| config_err(format!("{path}: {e}")))?;
    if p.task != task {
        return Err(config_err(format!("{path}: checkpoint is a {} policy, run is {task}", p.task)));
    }
    Ok(p)
}

fn load_reward_checkpoint(path: &Path, world_seed: u64) -> Result<RewardModel> {
    let c = read_checkpoint(path)?;
    c.check_world(world_seed)
        .map_err(|e| config_err(format!("{}: {e}", path.display())))?;
    c.into_reward_model()
        .map_err(|e| config_err(format!("{}: {e}", path.display())))
}

fn train_cmd(a: TrainArgs) -> Result<String> {
    let started = Instant::now();
    let cfg = load_config(&a.config)?.with_seed(a.seed);
    let hash = config_hash(&cfg);
    let dir = run_directory(&run_root(a.out_dir.as_deref()), &cfg);
    let world = world_of(&cfg)?;
    let task = cfg.run.task;

    let mut train_samples = Vec::new();
    if cfg.data.train_files.is_empty() {
        for m in &cfg.run.mix {
            let req = DatasetRequest::new(m.subset, cfg.data.train_size, cfg.data.train_seed)
                .task(task)
                .keyword_weight(cfg.data.keyword_weight)
                .id_prefix("rl-");
            train_samples.extend(generate_default(&world, &req).map_err(|e| config_err(e.to_string()))?);
        }
    } else {
        for f in &cfg.data.train_files {
            let (spec, s) = read_dataset(Path::new(f))?;
            check_world(&spec, cfg.world.seed, Path::new(f))?;
            train_samples.extend(s);
        }
    }
    let testset = match &cfg.data.test_file {
        Some(f) => {
            let (spec, s) = read_dataset(Path::new(f))?;
            check_world(&spec, cfg.world.seed, Path::new(f))?;
            s
        }
        None => generate_default(
            &world,
            &DatasetRequest::new(cfg.data.test_subset, cfg.data.test_size, cfg.data.test_seed)
                .task(task)
                .keyword_weight(cfg.data.keyword_weight)
                .id_prefix("test-"),
        )
        .map_err(|e| config_err(e.to_string()))?,
    };

    let baseline = match &cfg.paths.baseline {
        Some(p) => load_policy_checkpoint(p, cfg.world.seed, task)?,
        None => pretrain_baseline(&cfg, &world, None)?.0,
    };
    let needs_rm = task == Task::Tts || cfg.run.method != Method::Grpo;
    let rm = if needs_rm {
        Some(match &cfg.paths.reward_model {
            Some(p) => load_reward_checkpoint(Path::new(p), cfg.world.seed)?,
            None => pretrain_reward_model(&world, &cfg.reward_model).map_err(runtime)?.0,
        })
    } else {
        None
    };

    let mut outcome = train(TrainInputs {
        world: &world,
        config: &cfg.run,
        baseline: &baseline,
        reward_model: rm.as_ref(),
        data: &TrainData::new(train_samples),
        testset: &testset,
    })?;
    outcome.report.final_checkpoint = Some("final.json".into());

    let ckpt = |p: &Policy| {
        Checkpoint::from_policy(p, cfg.world.seed, Some(cfg.run.train.clone())).with_config_hash(&hash)
    };
    let resolved = serde_json::json!({ "config_hash": hash, "config": cfg });
    write_atomic(&dir.join("config.json"), &json_bytes(&resolved))?;
    write_checkpoint(&dir.join("baseline.json"), &ckpt(&baseline))?;
    write_checkpoint(&dir.join("final.json"), &ckpt(&outcome.policy))?;
    write_checkpoint(&dir.join("best.json"), &ckpt(&outcome.best_policy))?;
    if let Some(rm) = &rm {
        write_checkpoint(
            &dir.join("reward_model.json"),
            &Checkpoint::from_reward_model(rm, cfg.world.seed).with_config_hash(&hash),
        )?;
    }
    write_atomic(&dir.join("utterances_baseline.jsonl"), &jsonl_bytes(&outcome.baseline_logs))?;
    write_atomic(&dir.join("utterances_final.jsonl"), &jsonl_bytes(&outcome.final_logs))?;
    let mut csv = Vec::new();
    write_metrics_csv(&mut csv, &outcome.report).map_err(runtime)?;
    write_atomic(&dir.join("metrics.csv"), &csv)?;
    let summary = TrainSummary {
        config_hash: hash.clone(),
        seed: cfg.seed,
        world_seed: cfg.world.seed,
        report: outcome.report.clone(),
    };
    write_atomic(&dir.join("report.json"), &json_bytes(&summary))?;
    // Wall-clock facts live only in this sidecar.
    let log = format!(
        "config_hash={hash}\nseed={}\nelapsed_seconds={:.3}\n",
        cfg.seed,
        started.elapsed().as_secs_f64()
    );
    write_atomic(&dir.join("run.log"), log.as_bytes())?;

    let (first, last) = (outcome.report.baseline(), outcome.report.last());
    Ok(format!(
        "{}\n{}\n",
        dir.display(),
        match task {
            Task::Asr => format!("WER {:.4} -> {:.4}", first.wer, last.wer),
            Task::Tts => format!(
                "R_ASR {:.4} -> {:.4}",
                first.r_asr.unwrap_or(f64::NAN),
                last.r_asr.unwrap_or(f64::NAN)
            ),
        }
    ))
}

/// What `eval` prints / writes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOutput {
    pub checkpoint_config_hash: Option<String>,
    pub task: Task,
    pub eval: EvalPoint,
    pub utterances: Vec<UtteranceLog>,
}

fn eval_cmd(a: EvalArgs) -> Result<String> {
    let c = read_checkpoint(&a.checkpoint)?;
    let (spec, testset) = read_dataset(&a.testset)?;
    if spec.seed != c.world_seed {
        return Err(config_err(format!(
            "checkpoint world seed {} does not match test set world seed {}",
            c.world_seed, spec.seed
        )));
    }
    let policy = c
        .into_policy()
        .map_err(|e| config_err(format!("{}: {e}", a.checkpoint.display())))?;
    let world = build_world(&spec).map_err(|e| config_err(e.to_string()))?;
    let mut cfg = load_config_opt(a.config.as_deref())?;
    cfg.run.task = policy.task;
    if cfg.run.method != Method::Grpo && policy.task == Task::Asr {
        cfg.run.method = Method::Grpo;
    }
    let rm = match (&a.reward_model, policy.task) {
        (Some(p), _) => Some(load_reward_checkpoint(p, spec.seed)?),
        (None, Task::Tts) => return Err(config_err("TTS evaluation needs --reward-model")),
        (None, Task::Asr) => None,
    };
    let (eval, utterances) = evaluate_detailed(&world, &policy, rm.as_ref(), &testset, &cfg.run, 0)?;
    let out = EvalOutput {
        checkpoint_config_hash: c.config_hash.clone(),
        task: policy.task,
        eval,
        utterances,
    };
    let bytes = json_bytes(&out);
    match &a.out {
        Some(p) => {
            write_atomic(p, &bytes)?;
            Ok(format!(
                "WER {:.4} ins {:.4} del {:.4}; wrote {}\n",
                out.eval.wer,
                out.eval.ins,
                out.eval.del,
                p.display()
            ))
        }
        None => Ok(String::from_utf8(bytes).expect("json is utf-8")),
    }
}

#[derive(Debug, Clone, Deserialize)]
struct ScoreInput {
    #[serde(default)]
    id: String,
    reference: Vec<usize>,
    hypothesis: Vec<usize>,
}

/// One scored pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub id: String,
    pub r1: f64,
    pub flagged: bool,
    pub r3: f64,
    pub combined: f64,
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
    pub ref_len: usize,
}

/// Corpus summary of `score`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreSummary {
    pub rules: RuleSet,
    pub pairs: usize,
    pub wer: f64,
    pub ins: f64,
    pub del: f64,
    pub mean_reward: f64,
    pub flagged: usize,
}

fn score_cmd(a: ScoreArgs) -> Result<String> {
    let cfg = load_config_opt(a.config.as_deref())?;
    let world = world_of(&cfg)?;
    let rules = match &a.rules {
        Some(r) => r.parse().map_err(|e| config_err(format!("--rules: {e}")))?,
        None => cfg.run.rules,
    };
    let rc = AsrRewardConfig {
        rules,
        weights: cfg.run.rule_weights,
        hallucination: cfg.run.hallucination,
    };
    let inputs: Vec<ScoreInput> = read_jsonl_rows(&a.input)?;
    let mut rows = Vec::with_capacity(inputs.len());
    for (i, inp) in inputs.iter().enumerate() {
        let r = strip_eos(&inp.reference, crate::world::TEXT_EOS);
        let h = strip_eos(&inp.hypothesis, crate::world::TEXT_EOS);
        let w = crate::rewards::wer(r, h).map_err(|e| config_err(format!("{} line {}: {e}", a.input.display(), i + 1)))?;
        let (b, flags) = score_asr(r, h, &world.keywords, &rc).map_err(runtime)?;
        rows.push(ScoreRow {
            id: if inp.id.is_empty() { format!("{i}") } else { inp.id.clone() },
            r1: b.r1,
            flagged: flags.any(),
            r3: crate::rewards::keyword_reward(r, h, &world.keywords),
            combined: b.combined,
            substitutions: w.substitutions,
            insertions: w.insertions,
            deletions: w.deletions,
            ref_len: w.ref_len,
        });
    }
    let refs: usize = rows.iter().map(|r| r.ref_len).sum();
    let rate = |c: usize| if refs == 0 { 0.0 } else { c as f64 / refs as f64 };
    let (s, i, d) = rows.iter().fold((0, 0, 0), |acc, r| {
        (acc.0 + r.substitutions, acc.1 + r.insertions, acc.2 + r.deletions)
    });
    let summary = ScoreSummary {
        rules,
        pairs: rows.len(),
        wer: rate(s + i + d),
        ins: rate(i),
        del: rate(d),
        mean_reward: rows.iter().map(|r| r.combined).sum::<f64>() / rows.len().max(1) as f64,
        flagged: rows.iter().filter(|r| r.flagged).count(),
    };
    if let Some(p) = &a.out {
        write_atomic(p, &jsonl_bytes(&rows))?;
    }
    Ok(String::from_utf8(json_bytes(&summary)).expect("utf-8"))
}

/// `simulate-pipeline` output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineOutput {
    pub source: String,
    pub report: crate::pipeline::PipelineReport,
    pub exclusive: bool,
    pub overhead_share: f64,
    pub dominant_stage: Option<crate::pipeline::StageName>,
}

fn simulate_pipeline(a: PipelineArgs) -> Result<String> {
    let (source, cfg) = match (&a.preset, &a.config) {
        (Some(p), None) => (
            format!("preset:{p}"),
            PipelineConfig::preset(p).map_err(|e| config_err(e.to_string()))?,
        ),
        (None, Some(path)) => {
            let c: PipelineConfig = from_table(load_toml(path)?, path)?;
            let hash = hex::encode(&Sha256::digest(serde_json::to_vec(&c).expect("serializable"))[..8]);
            (format!("config:{hash}"), c)
        }
        _ => return Err(config_err("give exactly one of --preset or --config")),
    };
    let report = cfg.simulate().map_err(|e| config_err(e.to_string()))?;
    let out = PipelineOutput {
        source: source.clone(),
        exclusive: validate_exclusive(&report, &cfg.order()),
        overhead_share: report.overhead_share(),
        dominant_stage: report.dominant_stage(),
        report,
    };
    let dir = a
        .out
        .clone()
        .unwrap_or_else(|| run_root(None).join(format!("pipeline-{}", source.replace(':', "-"))));
    write_atomic(&dir.join("report.json"), &json_bytes(&out))?;
    let mut csv = Vec::new();
    out.report.write_breakdown_csv(&mut csv).map_err(runtime)?;
    write_atomic(&dir.join("breakdown.csv"), &csv)?;
    if let Some(param) = &a.sweep {
        let p: SweepParam = param.parse().map_err(|e: crate::pipeline::PipelineError| config_err(e.to_string()))?;
        let rows = sweep(&cfg, p, &a.values).map_err(|e| config_err(e.to_string()))?;
        let mut csv = Vec::new();
        write_sweep_csv(&mut csv, &rows).map_err(runtime)?;
        write_atomic(&dir.join("sweep.csv"), &csv)?;
    }
    Ok(format!(
        "total {:.2} s/step, rtf {:.4}, sync+switch {:.1}%, exclusive {}; wrote {}\n",
        out.report.total,
        out.report.rtf,
        100.0 * out.overhead_share,
        out.exclusive,
        dir.display()
    ))
}

// ----------------------------------------------------------------- report

/// One row of the ablation table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    pub rules: String,
    pub data: String,
    pub seed: Option<u64>,
    pub wer: f64,
    pub ins: f64,
    pub del: f64,
    pub r_asr: Option<f64>,
    pub mean_len: Option<f64>,
    pub diversity: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderedReport {
    pub task: Task,
    pub rows: Vec<ReportRow>,
    pub table: String,
}

/// Tolerance between logged per-utterance totals and the run summary.
pub const REPORT_TOLERANCE: f64 = 1e-9;

fn row_from_logs(method: String, rules: String, data: String, seed: Option<u64>, logs: &[UtteranceLog], eval: &EvalPoint) -> Result<ReportRow> {
    let t = totals_from_logs(logs);
    let close = |a: f64, b: f64| (a - b).abs() <= REPORT_TOLERANCE;
    let close_opt = |a: Option<f64>, b: Option<f64>| match (a, b) {
        (Some(a), Some(b)) => close(a, b),
        (None, None) => true,
        _ => false,
    };
    if !(close(t.wer, eval.wer) && close(t.ins, eval.ins) && close(t.del, eval.del))
        || !close_opt(t.r_asr, eval.r_asr)
        || !close_opt(t.mean_len, eval.mean_len)
    {
        return Err(runtime(format!(
            "per-utterance logs disagree with the summary at step {} ({method})",
            eval.step
        )));
    }
    Ok(ReportRow {
        method,
        rules,
        data,
        seed,
        wer: t.wer,
        ins: t.ins,
        del: t.del,
        r_asr: t.r_asr,
        mean_len: t.mean_len,
        diversity: eval.diversity,
    })
}

/// Builds the ablation table from run directories, recomputing every column
/// from the per-utterance logs, and writes `eval_curve.csv` into each.
pub fn render_report(run_dirs: &[PathBuf]) -> Result<RenderedReport> {
    let mut rows = Vec::new();
    let mut task = None;
    for (k, dir) in run_dirs.iter().enumerate() {
        let path = dir.join("report.json");
        let text = fs::read_to_string(&path).map_err(|e| runtime(format!("incomplete run {}: {e}", dir.display())))?;
        let s: TrainSummary = serde_json::from_str(&text).map_err(|e| runtime(format!("{}: {e}", path.display())))?;
        let r = &s.report;
        let run_task = r.task.ok_or_else(|| runtime(format!("{}: no task", path.display())))?;
        if *task.get_or_insert(run_task) != run_task {
            return Err(config_err("cannot mix ASR and TTS runs in one table"));
        }
        if r.evals.is_empty() {
            return Err(runtime(format!("incomplete run {}: no evaluations", dir.display())));
        }
        let baseline: Vec<UtteranceLog> = read_jsonl_rows(&dir.join("utterances_baseline.jsonl"))?;
        let last: Vec<UtteranceLog> = read_jsonl_rows(&dir.join("utterances_final.jsonl"))?;
        if k == 0 {
            rows.push(row_from_logs("-".into(), "-".into(), "-".into(), None, &baseline, r.baseline())?);
        }
        rows.push(row_from_logs(
            r.method.map(|m| m.to_string()).unwrap_or_default(),
            r.rules.clone(),
            r.subsets.clone(),
            Some(s.seed),
            &last,
            r.last(),
        )?);

        let mut curve = String::from("step,wer,ins,del,hallucination_rate,keyword_recall,r_asr,mean_len,diversity\n");
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for e in &r.evals {
            let _ = writeln!(
                curve,
                "{},{},{},{},{},{},{},{},{}",
                e.step,
                e.wer,
                e.ins,
                e.del,
                e.hallucination_rate,
                e.keyword_recall,
                opt(e.r_asr),
                opt(e.mean_len),
                opt(e.diversity)
            );
        }
        write_atomic(&dir.join("eval_curve.csv"), curve.as_bytes())?;
    }
    let task = task.ok_or_else(|| config_err("no run directories given"))?;
    let mut table = String::new();
    match task {
        Task::Asr => {
            let _ = writeln!(table, "{:<18} {:<10} {:<8} {:>5} {:>8} {:>8} {:>8}", "method", "rules", "data", "seed", "WER", "Ins", "Del");
            for r in &rows {
                let _ = writeln!(
                    table,
                    "{:<18} {:<10} {:<8} {:>5} {:>8.4} {:>8.4} {:>8.4}",
                    r.method,
                    r.rules,
                    r.data,
                    r.seed.map(|s| s.to_string()).unwrap_or_else(|| "-".into()),
                    r.wer,
                    r.ins,
                    r.del
                );
            }
        }
        Task::Tts => {
            let _ = writeln!(table, "{:<18} {:<10} {:>5} {:>8} {:>9} {:>9} {:>9}", "method", "rules", "seed", "WER", "R_ASR", "duration", "diversity");
            let f = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into());
            for r in &rows {
                let _ = writeln!(
                    table,
                    "{:<18} {:<10} {:>5} {:>8.4} {:>9} {:>9} {:>9}",
                    r.method,
                    r.rules,
                    r.seed.map(|s| s.to_string()).unwrap_or_else(|| "-".into()),
                    r.wer,
                    f(r.r_asr),
                    f(r.mean_len),
                    f(r.diversity)
                );
            }
        }
    }
    Ok(RenderedReport { task, rows, table })
}

fn report_cmd(a: ReportArgs) -> Result<String> {
    let dirs: Vec<PathBuf> = a.run_dirs.into_iter().collect::<BTreeSet<_>>().into_iter().collect();
    let r = render_report(&dirs)?;
    if let Some(p) = &a.out {
        write_atomic(p, r.table.as_bytes())?;
    }
    Ok(r.table)
}
