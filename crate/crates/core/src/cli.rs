//! Command-line entry point: corpus ingestion, overlap analysis, training,
//! generation, evaluation, the retrieval baseline and parameter sweeps.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baseline::{nngen_batch, RetrievalIndex, DEFAULT_K};
use crate::corpus::{
    dedup_analyze, dedup_filter, structure_commit, Category, CommitRecord, Corpus, DedupMode,
    TokenizedCommit, Vocabulary,
};
use crate::decode::{generate_batch, DecodeConfig, Strategy};
use crate::metrics::{self, MetricReport};
use crate::model::{load_checkpoint, save_checkpoint, ModelConfig, ParameterStore};
use crate::synthetic::{generate_corpus, planted_overlap_corpus, PlantedOverlap, SyntheticConfig};
use crate::tasks::{build_stage_one_dataset, MaskPolicy};
use crate::training::{
    train_hybrid, train_scratch_stage_two, train_stage_one, train_stage_two, transfer_parameters,
    TrainConfig, TrainError, TrainingLog, Validation,
};

pub const EXIT_OK: u8 = 0;
pub const EXIT_INPUT: u8 = 2;
pub const EXIT_NUMERIC: u8 = 3;

#[derive(Parser, Debug)]
#[command(name = "coregen", version, about = "Two-stage commit message generation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Validate a corpus directory (or generate a synthetic one) and summarize it.
    Ingest(IngestArgs),
    /// Build the shared vocabulary from the training split.
    Vocab(VocabArgs),
    /// Count valid/test records overlapping the training split.
    Dedup(DedupArgs),
    /// Train a model.
    Train(TrainArgs),
    /// Generate messages for a diff file.
    Generate(GenerateArgs),
    /// Score candidate messages against references.
    Eval(EvalArgs),
    /// Nearest-neighbour retrieval baseline.
    Nngen(NngenArgs),
    /// Run one full two-stage training per grid point.
    Sweep(SweepArgs),
    /// Tabulate finished run directories.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
pub struct IngestArgs {
    /// Corpus directory with <split>.diff / <split>.msg files.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Write a synthetic corpus here instead of reading one.
    #[arg(long)]
    pub synthetic: Option<PathBuf>,
    #[arg(long, default_value_t = 1000)]
    pub commits: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.2)]
    pub implicit_fraction: f64,
    /// Plant this many train-duplicated diffs in valid and test.
    #[arg(long)]
    pub plant_identical_code: Option<usize>,
    /// Of those, how many also duplicate the message.
    #[arg(long, default_value_t = 0)]
    pub plant_completely_identical: usize,
    /// Summary JSON (stdout when omitted).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct VocabArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub min_freq: usize,
    #[arg(long)]
    pub max_size: Option<usize>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum FilterMode {
    IdenticalCode,
    CompletelyIdentical,
}

#[derive(Args, Debug)]
pub struct DedupArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Report JSON (stdout when omitted).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also write a filtered corpus.
    #[arg(long, requires = "filtered_dir")]
    pub filter: Option<FilterMode>,
    #[arg(long)]
    pub filtered_dir: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StageMode {
    Stage1,
    Stage2,
    TwoStage,
    Hybrid,
    ScratchStage2,
}

/// Flags shared by `train` and `sweep`; each overrides the config file.
#[derive(Args, Debug, Default, Clone)]
pub struct ConfigArgs {
    /// Flat key=value config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Extra key=value overrides, applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub warmup_steps: Option<u64>,
    #[arg(long)]
    pub lr_factor: Option<f64>,
    #[arg(long)]
    pub epochs_stage1: Option<usize>,
    #[arg(long)]
    pub epochs_stage2: Option<usize>,
    #[arg(long)]
    pub steps_stage1: Option<u64>,
    #[arg(long)]
    pub steps_stage2: Option<u64>,
    #[arg(long)]
    pub label_fraction: Option<f64>,
    #[arg(long)]
    pub mask_rate: Option<f64>,
    #[arg(long)]
    pub icsm: Option<bool>,
    #[arg(long)]
    pub hybrid_weight: Option<f64>,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub d_ff: Option<usize>,
    #[arg(long)]
    pub max_len: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub label_smoothing: Option<f64>,
    #[arg(long)]
    pub tie_output: Option<bool>,
    #[arg(long)]
    pub min_freq: Option<usize>,
    #[arg(long)]
    pub max_vocab: Option<usize>,
    #[arg(long)]
    pub beam_size: Option<usize>,
    #[arg(long)]
    pub decode_max_len: Option<usize>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum)]
    pub stage: StageMode,
    /// Run directory for checkpoint, vocabulary, log and manifest.
    #[arg(long)]
    pub out: PathBuf,
    /// Stage-I checkpoint to fine-tune (required for `stage2`).
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Reuse this vocabulary instead of building one.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Write the epoch-0 Stage-I samples as JSON lines.
    #[arg(long)]
    pub dump_samples: Option<PathBuf>,
    /// Decode the test split afterwards and write metrics.json.
    #[arg(long)]
    pub evaluate: bool,
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    /// One tokenized diff per line.
    #[arg(long)]
    pub diff: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub beam_size: Option<usize>,
    #[arg(long, default_value_t = 30)]
    pub max_len: usize,
    #[arg(long, default_value_t = 0.0)]
    pub length_penalty: f64,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub candidates: PathBuf,
    #[arg(long)]
    pub references: PathBuf,
    /// Report JSON (stdout when omitted).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct NngenArgs {
    /// Training diff and message files.
    #[arg(long, num_args = 2, value_names = ["DIFF", "MSG"])]
    pub train: Vec<PathBuf>,
    #[arg(long)]
    pub query: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_K)]
    pub k: usize,
    /// Score the output against these references.
    #[arg(long)]
    pub references: Option<PathBuf>,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepKind {
    MaskRate,
    Labels,
    Layers,
    Heads,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum)]
    pub kind: SweepKind,
    /// Comma-separated grid; defaults depend on the kind.
    #[arg(long)]
    pub grid: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// Run directories written by `train`.
    #[arg(required = true)]
    pub runs: Vec<PathBuf>,
    /// Output prefix; writes <prefix>.json and <prefix>.csv.
    #[arg(long)]
    pub out: PathBuf,
}

/// Every tunable of a training run, with defaults materialized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub min_freq: usize,
    pub max_vocab: Option<usize>,
    pub decode: DecodeConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::desk(0),
            train: TrainConfig::default(),
            min_freq: 1,
            max_vocab: None,
            decode: DecodeConfig::default(),
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| anyhow!("invalid value {value:?} for {key}"))
}

impl RunConfig {
    /// Applies one `key = value` setting. Keys accept `-` or `_`.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim().replace('-', "_");
        let k = key.as_str();
        let (m, t) = (&mut self.model, &mut self.train);
        match k {
            "seed" => t.seed = parse(k, value)?,
            "batch_size" => t.batch_size = parse(k, value)?,
            "warmup_steps" | "warmup" => t.warmup_steps = parse(k, value)?,
            "lr_factor" => t.lr_factor = parse(k, value)?,
            "epochs_stage1" => t.epochs_stage1 = parse(k, value)?,
            "epochs_stage2" => t.epochs_stage2 = parse(k, value)?,
            "steps_stage1" => t.steps_stage1 = Some(parse(k, value)?),
            "steps_stage2" => t.steps_stage2 = Some(parse(k, value)?),
            "label_fraction" => t.label_fraction = parse(k, value)?,
            "mask_rate" => t.mask_rate = parse(k, value)?,
            "icsm" | "icsm_enabled" => t.icsm_enabled = parse(k, value)?,
            "hybrid_weight" => t.hybrid_stage1_weight = parse(k, value)?,
            "adam_beta1" => t.adam.beta1 = parse(k, value)?,
            "adam_beta2" => t.adam.beta2 = parse(k, value)?,
            "adam_eps" => t.adam.eps = parse(k, value)?,
            "validation_sample" => t.validation_sample = parse(k, value)?,
            "d_model" => m.d_model = parse(k, value)?,
            "layers" | "n_layers" => m.n_layers = parse(k, value)?,
            "heads" | "n_heads" => m.n_heads = parse(k, value)?,
            "d_ff" => m.d_ff = parse(k, value)?,
            "max_len" => m.max_len = parse(k, value)?,
            "dropout" | "dropout_rate" => m.dropout_rate = parse(k, value)?,
            "label_smoothing" => m.label_smoothing = parse(k, value)?,
            "tie_output" => m.tie_output = parse(k, value)?,
            "min_freq" => self.min_freq = parse(k, value)?,
            "max_vocab" => self.max_vocab = Some(parse(k, value)?),
            "beam_size" => {
                self.decode.beam_size = parse(k, value)?;
                self.decode.strategy = if self.decode.beam_size > 1 {
                    Strategy::Beam
                } else {
                    Strategy::Greedy
                };
            }
            "decode_max_len" => self.decode.max_len = parse(k, value)?,
            "length_penalty" => self.decode.length_penalty = parse(k, value)?,
            _ => bail!("unknown config key {key:?}"),
        }
        Ok(())
    }

    /// Parses a flat `key = value` file; blank lines and `#` comments are
    /// skipped.
    pub fn apply_file(&mut self, text: &str) -> Result<()> {
        for (no, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("config line {}: expected key=value", no + 1))?;
            self.set(k, v).with_context(|| format!("config line {}", no + 1))?;
        }
        Ok(())
    }

    /// Defaults, then the config file, then `--set` pairs, then flags.
    pub fn resolve(args: &ConfigArgs) -> Result<Self> {
        let mut cfg = RunConfig::default();
        if let Some(path) = &args.config {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            cfg.apply_file(&text)?;
        }
        for kv in &args.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| anyhow!("--set expects key=value, got {kv:?}"))?;
            cfg.set(k, v)?;
        }
        let flags: [(&str, Option<String>); 24] = [
            ("seed", args.seed.map(|v| v.to_string())),
            ("batch_size", args.batch_size.map(|v| v.to_string())),
            ("warmup_steps", args.warmup_steps.map(|v| v.to_string())),
            ("lr_factor", args.lr_factor.map(|v| v.to_string())),
            ("epochs_stage1", args.epochs_stage1.map(|v| v.to_string())),
            ("epochs_stage2", args.epochs_stage2.map(|v| v.to_string())),
            ("steps_stage1", args.steps_stage1.map(|v| v.to_string())),
            ("steps_stage2", args.steps_stage2.map(|v| v.to_string())),
            ("label_fraction", args.label_fraction.map(|v| v.to_string())),
            ("mask_rate", args.mask_rate.map(|v| v.to_string())),
            ("icsm", args.icsm.map(|v| v.to_string())),
            ("hybrid_weight", args.hybrid_weight.map(|v| v.to_string())),
            ("d_model", args.d_model.map(|v| v.to_string())),
            ("layers", args.layers.map(|v| v.to_string())),
            ("heads", args.heads.map(|v| v.to_string())),
            ("d_ff", args.d_ff.map(|v| v.to_string())),
            ("max_len", args.max_len.map(|v| v.to_string())),
            ("dropout", args.dropout.map(|v| v.to_string())),
            ("label_smoothing", args.label_smoothing.map(|v| v.to_string())),
            ("tie_output", args.tie_output.map(|v| v.to_string())),
            ("min_freq", args.min_freq.map(|v| v.to_string())),
            ("max_vocab", args.max_vocab.map(|v| v.to_string())),
            ("beam_size", args.beam_size.map(|v| v.to_string())),
            ("decode_max_len", args.decode_max_len.map(|v| v.to_string())),
        ];
        for (k, v) in flags {
            if let Some(v) = v {
                cfg.set(k, &v)?;
            }
        }
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputDigest {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub config: serde_json::Value,
    pub inputs: Vec<InputDigest>,
    pub seed: Option<u64>,
    pub artifacts: Vec<String>,
    pub wall_clock_seconds: f64,
    pub version: String,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(Sha256::digest(&bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect())
}

fn digests(paths: &[PathBuf]) -> Result<Vec<InputDigest>> {
    paths
        .iter()
        .filter(|p| p.is_file())
        .map(|p| {
            Ok(InputDigest {
                path: p.display().to_string(),
                sha256: sha256_file(p)?,
            })
        })
        .collect()
}

fn corpus_files(dir: &Path) -> Vec<PathBuf> {
    ["train", "valid", "test"]
        .iter()
        .flat_map(|s| [dir.join(format!("{s}.diff")), dir.join(format!("{s}.msg"))])
        .collect()
}

struct ManifestBuilder {
    command: String,
    started: Instant,
    inputs: Vec<PathBuf>,
    artifacts: Vec<PathBuf>,
}

impl ManifestBuilder {
    fn new(command: &str, inputs: Vec<PathBuf>) -> Self {
        ManifestBuilder {
            command: command.into(),
            started: Instant::now(),
            inputs,
            artifacts: Vec::new(),
        }
    }

    fn finish(self, config: serde_json::Value, seed: Option<u64>, path: &Path) -> Result<()> {
        let manifest = RunManifest {
            command: self.command,
            args: std::env::args().collect(),
            config,
            inputs: digests(&self.inputs)?,
            seed,
            artifacts: self.artifacts.iter().map(|p| p.display().to_string()).collect(),
            wall_clock_seconds: self.started.elapsed().as_secs_f64(),
            version: env!("CARGO_PKG_VERSION").into(),
        };
        write_json(path, &manifest)
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn emit_json<T: Serialize>(out: Option<&Path>, value: &T) -> Result<()> {
    match out {
        Some(p) => write_json(p, value),
        None => {
            println!("{}", serde_json::to_string_pretty(value)?);
            Ok(())
        }
    }
}

fn write_lines(path: &Path, lines: &[Vec<String>]) -> Result<()> {
    let mut text = String::new();
    for l in lines {
        text.push_str(&l.join(" "));
        text.push('\n');
    }
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

#[derive(Debug, Serialize)]
struct SplitSummary {
    records: usize,
    explicit_change: usize,
    implicit_change: usize,
    mean_diff_tokens: f64,
    mean_msg_tokens: f64,
}

fn summarize(records: &[CommitRecord]) -> SplitSummary {
    let explicit = records
        .iter()
        .filter(|r| structure_commit(r).category == Category::ExplicitChange)
        .count();
    let n = records.len().max(1) as f64;
    SplitSummary {
        records: records.len(),
        explicit_change: explicit,
        implicit_change: records.len() - explicit,
        mean_diff_tokens: records.iter().map(|r| r.diff_tokens.len()).sum::<usize>() as f64 / n,
        mean_msg_tokens: records.iter().map(|r| r.msg_tokens.len()).sum::<usize>() as f64 / n,
    }
}

fn cmd_ingest(a: &IngestArgs) -> Result<()> {
    let (corpus, dir) = match (&a.synthetic, &a.data) {
        (Some(dir), None) => {
            let cfg = SyntheticConfig {
                commits: a.commits,
                implicit_fraction: a.implicit_fraction,
                seed: a.seed,
                ..SyntheticConfig::default()
            };
            let corpus = match a.plant_identical_code {
                Some(n) => planted_overlap_corpus(
                    &cfg,
                    PlantedOverlap {
                        identical_code: n,
                        completely_identical: a.plant_completely_identical,
                    },
                ),
                None => generate_corpus(&cfg),
            };
            corpus.write_dir(dir)?;
            (corpus, dir)
        }
        (None, Some(dir)) => (Corpus::load_dir(dir)?, dir),
        _ => bail!("give exactly one of --data or --synthetic"),
    };
    let summary = BTreeMap::from([
        ("train", summarize(&corpus.train)),
        ("valid", summarize(&corpus.valid)),
        ("test", summarize(&corpus.test)),
    ]);
    emit_json(a.out.as_deref(), &serde_json::json!({
        "corpus": dir.display().to_string(),
        "splits": summary,
    }))
}

fn cmd_vocab(a: &VocabArgs) -> Result<()> {
    let corpus = Corpus::load_dir(&a.data)?;
    let vocab = Vocabulary::build(&corpus.train, a.min_freq, a.max_size)?;
    vocab.save(&a.out)?;
    eprintln!("{} entries ({} regular)", vocab.len(), vocab.regular_len());
    Ok(())
}

fn cmd_dedup(a: &DedupArgs) -> Result<()> {
    let corpus = Corpus::load_dir(&a.data)?;
    let report = dedup_analyze(&corpus.train, &corpus.valid, &corpus.test);
    emit_json(a.out.as_deref(), &report)?;
    if let (Some(mode), Some(dir)) = (a.filter, &a.filtered_dir) {
        let mode = match mode {
            FilterMode::IdenticalCode => DedupMode::DropIdenticalCode,
            FilterMode::CompletelyIdentical => DedupMode::DropCompletelyIdentical,
        };
        let (valid, test) = dedup_filter(&corpus.train, &corpus.valid, &corpus.test, mode);
        Corpus {
            train: corpus.train.clone(),
            valid,
            test,
        }
        .write_dir(dir)?;
    }
    Ok(())
}

/// Everything a finished training run produced.
pub struct TrainOutcome {
    pub params: ParameterStore,
    pub vocab: Vocabulary,
    pub log: TrainingLog,
    pub metrics: Option<MetricReport>,
}

fn decode_split(
    params: &ParameterStore,
    vocab: &Vocabulary,
    records: &[CommitRecord],
    cfg: &DecodeConfig,
) -> Result<Vec<Vec<String>>> {
    let sources: Vec<Vec<u32>> = records.iter().map(|r| vocab.encode(&r.diff_tokens)).collect();
    let out = generate_batch(params, &sources, cfg)?;
    out.iter()
        .map(|ids| vocab.decode(ids).map_err(Into::into))
        .collect()
}

/// Runs one training job in-process. `init` is the Stage-I checkpoint for
/// `Stage2`.
pub fn run_training(
    corpus: &Corpus,
    stage: StageMode,
    cfg: &RunConfig,
    vocab: Option<Vocabulary>,
    init: Option<ParameterStore>,
) -> Result<TrainOutcome> {
    let vocab = match vocab {
        Some(v) => v,
        None => Vocabulary::build(&corpus.train, cfg.min_freq, cfg.max_vocab)?,
    };
    let mut model = cfg.model;
    model.vocab_size = vocab.len();
    model.validate()?;
    let mut train = cfg.train.clone();
    train.hybrid = stage == StageMode::Hybrid;
    let commits: Vec<TokenizedCommit> = corpus.train.iter().map(structure_commit).collect();
    let valid = Some(Validation {
        records: &corpus.valid,
        vocab: &vocab,
    });
    let (params, log) = match stage {
        StageMode::Stage1 => train_stage_one(&commits, &vocab, &model, &train)?,
        StageMode::Stage2 => {
            let init = init.ok_or_else(|| anyhow!("stage2 needs --init <stage-1 checkpoint>"))?;
            if init.config.vocab_size != vocab.len() {
                bail!(
                    "checkpoint vocabulary size {} differs from vocabulary size {}; pass --vocab",
                    init.config.vocab_size,
                    vocab.len()
                );
            }
            train_stage_two(&corpus.train, &vocab, transfer_parameters(&init)?, &train, valid)?
        }
        StageMode::TwoStage => {
            let (s1, mut log) = train_stage_one(&commits, &vocab, &model, &train)?;
            let (p, log2) = train_stage_two(&corpus.train, &vocab, transfer_parameters(&s1)?, &train, valid)?;
            log.extend(log2);
            (p, log)
        }
        StageMode::Hybrid => train_hybrid(&commits, &corpus.train, &vocab, &model, &train, valid)?,
        StageMode::ScratchStage2 => train_scratch_stage_two(&corpus.train, &vocab, &model, &train, valid)?,
    };
    Ok(TrainOutcome {
        params,
        vocab,
        log,
        metrics: None,
    })
}

pub fn evaluate_on(
    outcome: &mut TrainOutcome,
    records: &[CommitRecord],
    decode: &DecodeConfig,
) -> Result<Vec<Vec<String>>> {
    let candidates = decode_split(&outcome.params, &outcome.vocab, records, decode)?;
    let references: Vec<Vec<String>> = records.iter().map(|r| r.msg_tokens.clone()).collect();
    outcome.metrics = Some(metrics::evaluate_corpus(&candidates, &references)?);
    Ok(candidates)
}

/// Resolved config as JSON; Stage-I settings are dropped for runs that
/// skip Stage I.
fn manifest_config(cfg: &RunConfig, stage: StageMode, vocab_size: usize) -> Result<serde_json::Value> {
    let mut value = serde_json::to_value(cfg)?;
    value["model"]["vocab_size"] = vocab_size.into();
    if matches!(stage, StageMode::ScratchStage2 | StageMode::Stage2) {
        if let Some(train) = value["train"].as_object_mut() {
            for key in ["epochs_stage1", "steps_stage1", "mask_rate", "icsm_enabled"] {
                train.remove(key);
            }
        }
    }
    if stage != StageMode::Hybrid {
        if let Some(train) = value["train"].as_object_mut() {
            train.remove("hybrid_stage1_weight");
        }
    }
    value["stage"] = serde_json::to_value(stage)?;
    Ok(value)
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let cfg = RunConfig::resolve(&a.cfg)?;
    let mut inputs = corpus_files(&a.data);
    inputs.extend(a.cfg.config.iter().cloned());
    inputs.extend(a.init.iter().cloned());
    inputs.extend(a.vocab.iter().cloned());
    let mut manifest = ManifestBuilder::new("train", inputs);
    let corpus = Corpus::load_dir(&a.data)?;
    let vocab = a.vocab.as_deref().map(Vocabulary::load).transpose()?;
    let init = a.init.as_deref().map(load_checkpoint).transpose()?;
    if let Some(path) = &a.dump_samples {
        let commits: Vec<TokenizedCommit> = corpus.train.iter().map(structure_commit).collect();
        let policy = MaskPolicy::new(cfg.train.mask_rate, cfg.train.seed)?;
        let samples = build_stage_one_dataset(&commits, &policy, cfg.train.icsm_enabled, 0);
        let mut buf = Vec::new();
        for s in &samples {
            serde_json::to_writer(&mut buf, s)?;
            buf.push(b'\n');
        }
        fs::write(path, buf)?;
        manifest.artifacts.push(path.clone());
    }
    let mut outcome = run_training(&corpus, a.stage, &cfg, vocab, init)?;
    fs::create_dir_all(&a.out)?;
    let ckpt = a.out.join("model.ckpt");
    save_checkpoint(&outcome.params, &ckpt)?;
    let vocab_path = a.out.join("vocab.txt");
    outcome.vocab.save(&vocab_path)?;
    let log_path = a.out.join("train_log.jsonl");
    outcome.log.save(&log_path)?;
    manifest.artifacts.extend([ckpt, vocab_path, log_path]);
    if a.evaluate && a.stage != StageMode::Stage1 {
        let generated = evaluate_on(&mut outcome, &corpus.test, &cfg.decode)?;
        let gen_path = a.out.join("test.gen");
        write_lines(&gen_path, &generated)?;
        let metrics_path = a.out.join("metrics.json");
        write_json(&metrics_path, outcome.metrics.as_ref().unwrap())?;
        manifest.artifacts.extend([gen_path, metrics_path]);
    }
    let config = manifest_config(&cfg, a.stage, outcome.vocab.len())?;
    manifest.finish(config, Some(cfg.train.seed), &a.out.join("manifest.json"))?;
    eprintln!(
        "trained {:?}: {} steps, final loss {:.4}",
        a.stage,
        outcome.params.step,
        outcome.log.last_step_loss().unwrap_or(f64::NAN)
    );
    Ok(())
}

fn cmd_generate(a: &GenerateArgs) -> Result<()> {
    let params = load_checkpoint(&a.checkpoint)?;
    let vocab = Vocabulary::load(&a.vocab)?;
    if params.config.vocab_size != vocab.len() {
        bail!("vocabulary does not match checkpoint");
    }
    let diffs = metrics::read_sentences(&a.diff)?;
    let sources: Vec<Vec<u32>> = diffs.iter().map(|d| vocab.encode(d)).collect();
    let cfg = DecodeConfig {
        strategy: if a.beam_size.is_some_and(|b| b > 1) {
            Strategy::Beam
        } else {
            Strategy::Greedy
        },
        beam_size: a.beam_size.unwrap_or(1),
        max_len: a.max_len,
        length_penalty: a.length_penalty,
    };
    let out = generate_batch(&params, &sources, &cfg)?;
    let lines = out
        .iter()
        .map(|ids| vocab.decode(ids))
        .collect::<Result<Vec<_>, _>>()?;
    write_lines(&a.out, &lines)
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let report = metrics::evaluate_files(&a.candidates, &a.references)?;
    emit_json(a.out.as_deref(), &report)
}

fn cmd_nngen(a: &NngenArgs) -> Result<()> {
    let [diff, msg] = a.train.as_slice() else {
        bail!("--train needs a diff file and a message file");
    };
    let train = crate::corpus::load_split(diff, msg, crate::corpus::Split::Train)?;
    let index = RetrievalIndex::build(&train, a.k)?;
    let queries = metrics::read_sentences(&a.query)?;
    let out = nngen_batch(&index, &queries);
    write_lines(&a.out, &out)?;
    if let Some(refs) = &a.references {
        let references = metrics::read_sentences(refs)?;
        let mut report = serde_json::to_value(metrics::evaluate_corpus(&out, &references)?)?;
        report["variants"]["retrieval"] = format!(
            "raw term-frequency cosine, top {} re-ranked by add-one smoothed sentence BLEU-4",
            a.k
        )
        .into();
        emit_json(a.report.as_deref(), &report)?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub kind: SweepKind,
    pub value: f64,
    pub parameters: usize,
    pub bleu4: Option<f64>,
    pub rouge1: Option<f64>,
    pub rouge2: Option<f64>,
    #[serde(rename = "rougeL")]
    pub rouge_l: Option<f64>,
    pub meteor: Option<f64>,
    pub final_loss: Option<f64>,
    pub error: Option<String>,
}

pub fn default_grid(kind: SweepKind) -> Vec<f64> {
    match kind {
        SweepKind::MaskRate => (1..=9).map(|i| i as f64 / 10.0).collect(),
        SweepKind::Labels => vec![0.25, 0.5, 0.75, 1.0],
        SweepKind::Layers => vec![1.0, 2.0, 4.0],
        SweepKind::Heads => vec![1.0, 2.0, 4.0, 8.0],
    }
}

pub fn parse_grid(text: &str) -> Result<Vec<f64>> {
    let grid: Vec<f64> = text
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| parse("grid", s))
        .collect::<Result<_>>()?;
    if grid.is_empty() {
        bail!("sweep grid is empty");
    }
    Ok(grid)
}

fn point_config(base: &RunConfig, kind: SweepKind, value: f64) -> Result<RunConfig> {
    let mut cfg = base.clone();
    let as_count = || -> Result<usize> {
        if value < 1.0 || value.fract() != 0.0 {
            bail!("{value} is not a positive whole number");
        }
        Ok(value as usize)
    };
    match kind {
        SweepKind::MaskRate => cfg.train.mask_rate = value,
        SweepKind::Labels => cfg.train.label_fraction = value,
        SweepKind::Layers => cfg.model.n_layers = as_count()?,
        SweepKind::Heads => cfg.model.n_heads = as_count()?,
    }
    Ok(cfg)
}

/// One two-stage run per grid point; failures are recorded per row.
pub fn run_sweep(corpus: &Corpus, kind: SweepKind, grid: &[f64], base: &RunConfig) -> Vec<SweepRow> {
    grid.iter()
        .map(|&value| {
            let mut row = SweepRow {
                kind,
                value,
                parameters: 0,
                bleu4: None,
                rouge1: None,
                rouge2: None,
                rouge_l: None,
                meteor: None,
                final_loss: None,
                error: None,
            };
            let result = point_config(base, kind, value).and_then(|cfg| {
                let mut outcome = run_training(corpus, StageMode::TwoStage, &cfg, None, None)?;
                evaluate_on(&mut outcome, &corpus.test, &cfg.decode)?;
                Ok(outcome)
            });
            match result {
                Ok(o) => {
                    let m = o.metrics.as_ref().unwrap();
                    row.parameters = o.params.config.parameter_count();
                    row.bleu4 = Some(m.bleu4);
                    row.rouge1 = Some(m.rouge1);
                    row.rouge2 = Some(m.rouge2);
                    row.rouge_l = Some(m.rouge_l);
                    row.meteor = Some(m.meteor);
                    row.final_loss = o.log.last_step_loss();
                }
                Err(e) => row.error = Some(format!("{e:#}")),
            }
            row
        })
        .collect()
}

fn csv_field(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_default()
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("kind,value,parameters,bleu4,rouge1,rouge2,rougeL,meteor,final_loss,error\n");
    for r in rows {
        let kind = serde_json::to_value(r.kind).unwrap();
        let error = r.error.as_deref().unwrap_or("").replace(['"', '\n'], " ");
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},\"{}\"\n",
            kind.as_str().unwrap(),
            r.value,
            r.parameters,
            csv_field(r.bleu4),
            csv_field(r.rouge1),
            csv_field(r.rouge2),
            csv_field(r.rouge_l),
            csv_field(r.meteor),
            csv_field(r.final_loss),
            error
        ));
    }
    out
}

fn cmd_sweep(a: &SweepArgs) -> Result<()> {
    let base = RunConfig::resolve(&a.cfg)?;
    let grid = match &a.grid {
        Some(g) => parse_grid(g)?,
        None => default_grid(a.kind),
    };
    let mut inputs = corpus_files(&a.data);
    inputs.extend(a.cfg.config.iter().cloned());
    let mut manifest = ManifestBuilder::new("sweep", inputs);
    let corpus = Corpus::load_dir(&a.data)?;
    let rows = run_sweep(&corpus, a.kind, &grid, &base);
    fs::create_dir_all(&a.out)?;
    let json_path = a.out.join("sweep.json");
    let csv_path = a.out.join("sweep.csv");
    write_json(&json_path, &rows)?;
    fs::write(&csv_path, sweep_csv(&rows))?;
    manifest.artifacts.extend([json_path, csv_path]);
    let mut config = serde_json::to_value(&base)?;
    config["sweep"] = serde_json::json!({ "kind": a.kind, "grid": grid });
    manifest.finish(config, Some(base.train.seed), &a.out.join("manifest.json"))?;
    for r in &rows {
        if let Some(e) = &r.error {
            eprintln!("point {} failed: {e}", r.value);
        }
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct ReportRow {
    run: String,
    stage: Option<String>,
    seed: Option<u64>,
    steps: usize,
    final_loss: Option<f64>,
    metrics: Option<MetricReport>,
    /// (step, loss) pairs for convergence plots.
    curve: Vec<(u64, f64)>,
}

fn cmd_report(a: &ReportArgs) -> Result<()> {
    let mut rows = Vec::new();
    for dir in &a.runs {
        let manifest: Option<RunManifest> = fs::read_to_string(dir.join("manifest.json"))
            .ok()
            .map(|t| serde_json::from_str(&t))
            .transpose()?;
        let metrics: Option<MetricReport> = fs::read_to_string(dir.join("metrics.json"))
            .ok()
            .map(|t| serde_json::from_str(&t))
            .transpose()?;
        let mut curve = Vec::new();
        if let Ok(text) = fs::read_to_string(dir.join("train_log.jsonl")) {
            for line in text.lines() {
                if let crate::training::LogRecord::Step(s) = serde_json::from_str(line)? {
                    curve.push((s.step, s.loss));
                }
            }
        }
        rows.push(ReportRow {
            run: dir.display().to_string(),
            stage: manifest
                .as_ref()
                .and_then(|m| m.config.get("stage").and_then(|s| s.as_str()).map(String::from)),
            seed: manifest.as_ref().and_then(|m| m.seed),
            steps: curve.len(),
            final_loss: curve.last().map(|c| c.1),
            metrics,
            curve,
        });
    }
    let json_path = a.out.with_extension("json");
    write_json(&json_path, &rows)?;
    let mut csv = String::from("run,stage,seed,steps,final_loss,bleu4,rouge1,rouge2,rougeL,meteor\n");
    for r in &rows {
        let m = r.metrics.as_ref();
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            r.run,
            r.stage.as_deref().unwrap_or(""),
            r.seed.map(|s| s.to_string()).unwrap_or_default(),
            r.steps,
            csv_field(r.final_loss),
            csv_field(m.map(|m| m.bleu4)),
            csv_field(m.map(|m| m.rouge1)),
            csv_field(m.map(|m| m.rouge2)),
            csv_field(m.map(|m| m.rouge_l)),
            csv_field(m.map(|m| m.meteor)),
        ));
    }
    fs::write(a.out.with_extension("csv"), csv)?;
    Ok(())
}

/// Maps an error to the process exit code.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    let numeric = err
        .chain()
        .any(|e| matches!(e.downcast_ref::<TrainError>(), Some(TrainError::NumericFailure { .. })));
    if numeric {
        EXIT_NUMERIC
    } else {
        EXIT_INPUT
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Ingest(a) => cmd_ingest(a),
        Command::Vocab(a) => cmd_vocab(a),
        Command::Dedup(a) => cmd_dedup(a),
        Command::Train(a) => cmd_train(a),
        Command::Generate(a) => cmd_generate(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Nngen(a) => cmd_nngen(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Report(a) => cmd_report(a),
    }
}

/// Parses the process arguments, runs, and returns the exit code.
pub fn main_with_args<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_INPUT } else { EXIT_OK };
        }
    };
    match run(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let code = exit_code(&e);
            let _ = writeln!(std::io::stderr(), "error: {e:#}");
            code
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_precedence() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("run.cfg");
        fs::write(&file, "# desk\nbatch_size = 8\nseed=5\nmask-rate = 0.3\n").unwrap();
        let args = ConfigArgs {
            config: Some(file),
            seed: Some(9),
            set: vec!["warmup_steps=10".into()],
            ..ConfigArgs::default()
        };
        let cfg = RunConfig::resolve(&args).unwrap();
        assert_eq!(cfg.train.batch_size, 8);
        assert_eq!(cfg.train.seed, 9);
        assert_eq!(cfg.train.mask_rate, 0.3);
        assert_eq!(cfg.train.warmup_steps, 10);
        assert_eq!(cfg.train.epochs_stage1, TrainConfig::default().epochs_stage1);
    }

    #[test]
    fn config_errors() {
        let mut cfg = RunConfig::default();
        assert!(cfg.set("nonsense", "1").is_err());
        assert!(cfg.set("batch_size", "many").is_err());
        assert!(cfg.apply_file("batch_size 3").is_err());
    }

    #[test]
    fn scratch_manifest_has_no_stage_one_fields() {
        let cfg = RunConfig::default();
        let v = manifest_config(&cfg, StageMode::ScratchStage2, 40).unwrap();
        assert!(v["train"].get("epochs_stage1").is_none());
        assert!(v["train"].get("epochs_stage2").is_some());
        let v = manifest_config(&cfg, StageMode::TwoStage, 40).unwrap();
        assert!(v["train"].get("epochs_stage1").is_some());
        assert_eq!(v["model"]["vocab_size"], 40);
    }

    #[test]
    fn grids() {
        assert_eq!(default_grid(SweepKind::MaskRate).len(), 9);
        assert_eq!(parse_grid("0.1, 0.5,0.9").unwrap(), vec![0.1, 0.5, 0.9]);
        assert!(parse_grid(" , ").is_err());
        assert!(point_config(&RunConfig::default(), SweepKind::Layers, 1.5).is_err());
    }

    #[test]
    fn numeric_failures_map_to_exit_three() {
        let e: anyhow::Error = TrainError::NumericFailure {
            stage: "stage2".into(),
            step: 4,
        }
        .into();
        assert_eq!(exit_code(&e.context("training")), EXIT_NUMERIC);
        assert_eq!(exit_code(&anyhow!("missing file")), EXIT_INPUT);
    }
}
