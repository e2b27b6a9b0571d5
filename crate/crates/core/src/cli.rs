//! The `finlora` command line.
//!
//! Every command takes an optional JSON config (`--config`); flags given on
//! the command line override the file. Each output directory receives exactly
//! one `run_manifest.json`, written last and atomically.
//!
//! Exit codes: 0 success, 2 usage or input error, 3 numeric failure.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::checkpoint::{self, sha256_file, BASE_BLOB};
use crate::corpus::{
    self, compute_stats, emit_distribution, load_corpus, load_labeled, split_by_ratio, to_instruction,
    AnnotatedSentence, IdentifiedExample,
};
use crate::error::{Error, Result};
use crate::eval::{emit_metric_figures, evaluate_model, EvalOptions};
use crate::lora::{LoraConfig, Projection};
use crate::model::{ModelConfig, TrainScope, Transformer};
use crate::synthetic;
use crate::tokenizer::{encode_example, EncodedExample};
use crate::trainer::{emit_loss_curve, train, TrainConfig};

pub const RUN_MANIFEST: &str = "run_manifest.json";

#[derive(Debug, Parser)]
#[command(name = "finlora", version, about = "Instruction-tuned LoRA for financial named-entity recognition")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Print corpus statistics and write the per-type distribution CSV.
    Stats(StatsArgs),
    /// Split a corpus and write instruction JSONL files.
    BuildDataset(BuildArgs),
    /// Write a seeded synthetic corpus.
    GenSynthetic(GenArgs),
    /// Create a base checkpoint, optionally pretrained on a corpus.
    InitBase(InitArgs),
    /// Train LoRA adapters on a frozen base.
    Train(TrainArgs),
    /// Greedy-decode a test set and score it.
    Evaluate(EvalArgs),
}

#[derive(Debug, Clone, Default, Args)]
pub struct Common {
    /// JSON config file; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BuildArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Train and test ratios, e.g. `0.8,0.2`.
    #[arg(long, value_delimiter = ',')]
    pub split: Option<Vec<f64>>,
    /// File with one sentence id per line for the train split.
    #[arg(long, requires = "test_ids")]
    pub train_ids: Option<PathBuf>,
    #[arg(long, requires = "train_ids")]
    pub test_ids: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[command(flatten)]
    pub common: Common,
    /// Number of sentences.
    #[arg(long)]
    pub n: Option<usize>,
}

#[derive(Debug, Args)]
pub struct InitArgs {
    #[command(flatten)]
    pub common: Common,
    /// Full-parameter pretraining corpus (annotated or instruction JSONL).
    #[arg(long)]
    pub pretrain_corpus: Option<PathBuf>,
    #[arg(long)]
    pub pretrain_epochs: Option<usize>,
    #[arg(long)]
    pub pretrain_lr: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    /// Training set (annotated or instruction JSONL).
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Base checkpoint directory.
    #[arg(long)]
    pub base: Option<PathBuf>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub grad_accum: Option<usize>,
    #[arg(long)]
    pub cutoff: Option<usize>,
    #[arg(long)]
    pub rank: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub dropout: Option<f64>,
    /// Comma-separated projections to adapt.
    #[arg(long, value_delimiter = ',')]
    pub targets: Option<Vec<Projection>>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub base: Option<PathBuf>,
    /// Adapter checkpoint directory; the bare base is scored when omitted.
    #[arg(long)]
    pub adapter: Option<PathBuf>,
    /// Test set (annotated or instruction JSONL).
    #[arg(long)]
    pub test: Option<PathBuf>,
    #[arg(long)]
    pub cutoff: Option<usize>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StatsConfig {
    pub corpus: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BuildConfig {
    pub corpus: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub seed: u64,
    pub split: Option<[f64; 2]>,
    pub train_ids: Option<PathBuf>,
    pub test_ids: Option<PathBuf>,
}

impl Default for BuildConfig {
    fn default() -> Self {
        Self {
            corpus: None,
            out: None,
            seed: 0,
            split: Some([0.8, 0.2]),
            train_ids: None,
            test_ids: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub n: usize,
    pub seed: u64,
    pub out: Option<PathBuf>,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self { n: 50, seed: 0, out: None }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitConfig {
    pub model: ModelConfig,
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub pretrain_corpus: Option<PathBuf>,
    pub pretrain: TrainConfig,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            seed: 0,
            out: None,
            pretrain_corpus: None,
            pretrain: TrainConfig {
                learning_rate: 3e-3,
                batch_size: 1,
                grad_accum: 1,
                epochs: 10,
                ..TrainConfig::default()
            },
        }
    }
}

/// Training run config: the optimizer fields at top level, plus paths and a
/// nested `lora` object.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct RunConfig {
    pub corpus: Option<PathBuf>,
    pub base: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub lora: LoraConfig,
    #[serde(flatten)]
    pub train: TrainConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub base: Option<PathBuf>,
    pub adapter: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub cutoff: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            base: None,
            adapter: None,
            test: None,
            out: None,
            cutoff: TrainConfig::default().cutoff,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub config: Value,
    /// Input path → SHA-256 of its contents.
    pub inputs: BTreeMap<String, String>,
    pub outputs: Vec<String>,
    pub wall_clock_seconds: f64,
}

fn read_config<C: DeserializeOwned + Default>(path: Option<&Path>) -> Result<C> {
    match path {
        None => Ok(C::default()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            serde_json::from_str(&text).map_err(|e| Error::InvalidConfig(format!("{}: {e}", p.display())))
        }
    }
}

/// `RunConfig` flattens `TrainConfig`, which disables serde's unknown-field
/// check, so split the object by hand.
fn read_run_config(path: Option<&Path>) -> Result<RunConfig> {
    let Some(p) = path else {
        return Ok(RunConfig::default());
    };
    let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
    let bad = |e: String| Error::InvalidConfig(format!("{}: {e}", p.display()));
    let Value::Object(mut map) = serde_json::from_str(&text).map_err(|e| bad(e.to_string()))? else {
        return Err(bad("config must be a JSON object".into()));
    };
    let mut take = |key: &str| map.remove(key).filter(|v| !v.is_null());
    let path_field = |v: Option<Value>| -> Result<Option<PathBuf>> {
        v.map(|v| serde_json::from_value(v).map_err(|e| bad(e.to_string()))).transpose()
    };
    let corpus = path_field(take("corpus"))?;
    let base = path_field(take("base"))?;
    let out = path_field(take("out"))?;
    let lora = match take("lora") {
        Some(v) => serde_json::from_value(v).map_err(|e| bad(format!("lora: {e}")))?,
        None => LoraConfig::default(),
    };
    let train = serde_json::from_value(Value::Object(map)).map_err(|e| bad(e.to_string()))?;
    Ok(RunConfig {
        corpus,
        base,
        out,
        lora,
        train,
    })
}

fn required<'a>(value: &'a Option<PathBuf>, what: &str) -> Result<&'a Path> {
    value
        .as_deref()
        .ok_or_else(|| Error::InvalidConfig(format!("missing {what} (flag or config field)")))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("json.tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

struct Run {
    command: &'static str,
    started: Instant,
    inputs: BTreeMap<String, String>,
    outputs: Vec<String>,
}

impl Run {
    fn new(command: &'static str) -> Self {
        Self {
            command,
            started: Instant::now(),
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
        }
    }

    fn input(&mut self, path: &Path) -> Result<()> {
        self.inputs.insert(path.display().to_string(), sha256_file(path)?);
        Ok(())
    }

    fn output(&mut self, name: &str) {
        self.outputs.push(name.to_string());
    }

    fn finish(self, config: &impl Serialize, dir: &Path) -> Result<()> {
        let manifest = RunManifest {
            command: self.command.to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config: serde_json::to_value(config)?,
            inputs: self.inputs,
            outputs: self.outputs,
            wall_clock_seconds: self.started.elapsed().as_secs_f64(),
        };
        write_atomic(&dir.join(RUN_MANIFEST), serde_json::to_string_pretty(&manifest)?.as_bytes())
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Stats(a) => cmd_stats(a),
        Command::BuildDataset(a) => cmd_build_dataset(a),
        Command::GenSynthetic(a) => cmd_gen_synthetic(a),
        Command::InitBase(a) => cmd_init_base(a),
        Command::Train(a) => cmd_train(a),
        Command::Evaluate(a) => cmd_evaluate(a),
    }
}

/// Process exit code for a failed command.
pub fn exit_code(err: &Error) -> u8 {
    if err.is_numeric() {
        3
    } else {
        2
    }
}

pub fn cmd_stats(args: StatsArgs) -> Result<()> {
    let mut cfg: StatsConfig = read_config(args.common.config.as_deref())?;
    cfg.corpus = args.corpus.or(cfg.corpus);
    cfg.out = args.common.out.or(cfg.out);
    let mut run = Run::new("stats");
    let path = required(&cfg.corpus, "corpus")?;
    let stats = compute_stats(&load_corpus(path)?);
    print!("{}", stats.to_table());
    if let Some(out) = &cfg.out {
        run.input(path)?;
        ensure_dir(out)?;
        emit_distribution(&stats, &out.join("distribution.csv"))?;
        run.output("distribution.csv");
        fs::write(out.join("stats.json"), serde_json::to_string_pretty(&stats)?).map_err(|e| Error::io(out, e))?;
        run.output("stats.json");
        run.finish(&cfg, out)?;
    }
    Ok(())
}

fn read_ids(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(str::to_string).collect())
}

fn explicit_split(
    corpus: &[AnnotatedSentence],
    train_ids: &[String],
    test_ids: &[String],
) -> Result<(Vec<AnnotatedSentence>, Vec<AnnotatedSentence>)> {
    let by_id: BTreeMap<&str, &AnnotatedSentence> = corpus.iter().map(|s| (s.id.as_str(), s)).collect();
    if by_id.len() != corpus.len() {
        return Err(Error::InvalidConfig("corpus ids are not unique".into()));
    }
    if let Some(id) = train_ids.iter().find(|id| test_ids.contains(id)) {
        return Err(Error::InvalidConfig(format!("id {id:?} is in both splits")));
    }
    let pick = |ids: &[String]| -> Result<Vec<AnnotatedSentence>> {
        ids.iter()
            .map(|id| {
                by_id
                    .get(id.as_str())
                    .map(|s| (*s).clone())
                    .ok_or_else(|| Error::InvalidConfig(format!("split id {id:?} is not in the corpus")))
            })
            .collect()
    };
    Ok((pick(train_ids)?, pick(test_ids)?))
}

fn write_instructions(path: &Path, sentences: &[AnnotatedSentence]) -> Result<()> {
    let rows: Vec<IdentifiedExample> = sentences
        .iter()
        .map(|s| IdentifiedExample {
            id: &s.id,
            example: to_instruction(s),
        })
        .collect();
    corpus::write_jsonl(path, &rows)
}

pub fn cmd_build_dataset(args: BuildArgs) -> Result<()> {
    let mut cfg: BuildConfig = read_config(args.common.config.as_deref())?;
    cfg.corpus = args.corpus.or(cfg.corpus);
    cfg.out = args.common.out.or(cfg.out);
    cfg.seed = args.common.seed.unwrap_or(cfg.seed);
    if let Some(s) = args.split {
        let [train_ratio, test_ratio] = s[..] else {
            return Err(Error::InvalidConfig(format!("--split takes two ratios, got {}", s.len())));
        };
        cfg.split = Some([train_ratio, test_ratio]);
    }
    if args.train_ids.is_some() {
        cfg.train_ids = args.train_ids;
        cfg.test_ids = args.test_ids;
    }
    let mut run = Run::new("build-dataset");
    let path = required(&cfg.corpus, "corpus")?;
    let out = required(&cfg.out, "output directory")?;
    let sentences = load_corpus(path)?;
    run.input(path)?;

    let (train_set, test_set) = match (&cfg.train_ids, &cfg.test_ids) {
        (Some(tr), Some(te)) => {
            run.input(tr)?;
            run.input(te)?;
            cfg.split = None;
            explicit_split(&sentences, &read_ids(tr)?, &read_ids(te)?)?
        }
        (None, None) => {
            let [train_ratio, test_ratio] = cfg.split.unwrap_or([0.8, 0.2]);
            if train_ratio < 0.0 || test_ratio < 0.0 || (train_ratio + test_ratio - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidConfig(format!(
                    "split ratios {train_ratio} and {test_ratio} must be non-negative and sum to 1"
                )));
            }
            split_by_ratio(&sentences, train_ratio, cfg.seed)?
        }
        _ => return Err(Error::InvalidConfig("train_ids and test_ids must be given together".into())),
    };
    ensure_dir(out)?;
    write_instructions(&out.join("train.jsonl"), &train_set)?;
    run.output("train.jsonl");
    write_instructions(&out.join("test.jsonl"), &test_set)?;
    run.output("test.jsonl");
    println!("train {} / test {}", train_set.len(), test_set.len());
    run.finish(&cfg, out)
}

pub fn cmd_gen_synthetic(args: GenArgs) -> Result<()> {
    let mut cfg: GenConfig = read_config(args.common.config.as_deref())?;
    cfg.n = args.n.unwrap_or(cfg.n);
    cfg.seed = args.common.seed.unwrap_or(cfg.seed);
    cfg.out = args.common.out.or(cfg.out);
    let mut run = Run::new("gen-synthetic");
    let out = required(&cfg.out, "output directory")?;
    ensure_dir(out)?;
    corpus::write_corpus(&out.join("corpus.jsonl"), &synthetic::generate(cfg.n, cfg.seed))?;
    run.output("corpus.jsonl");
    run.finish(&cfg, out)
}

fn encode_all(sentences: &[AnnotatedSentence], cutoff: usize) -> Vec<EncodedExample> {
    sentences.iter().map(|s| encode_example(&to_instruction(s), cutoff)).collect()
}

fn report_step(epoch: usize, step: usize, loss: f64) {
    eprintln!("epoch {} step {step} loss {loss:.6}", epoch + 1);
}

pub fn cmd_init_base(args: InitArgs) -> Result<()> {
    let mut cfg: InitConfig = read_config(args.common.config.as_deref())?;
    cfg.seed = args.common.seed.unwrap_or(cfg.seed);
    cfg.out = args.common.out.or(cfg.out);
    cfg.pretrain_corpus = args.pretrain_corpus.or(cfg.pretrain_corpus);
    cfg.pretrain.epochs = args.pretrain_epochs.unwrap_or(cfg.pretrain.epochs);
    cfg.pretrain.learning_rate = args.pretrain_lr.unwrap_or(cfg.pretrain.learning_rate);
    cfg.pretrain.seed = cfg.seed;
    let mut run = Run::new("init-base");
    let out = required(&cfg.out, "output directory")?;
    let mut model = Transformer::<f32>::init(cfg.model.clone(), cfg.seed)?;
    if let Some(path) = &cfg.pretrain_corpus {
        run.input(path)?;
        let encoded = encode_all(&load_labeled(path)?, cfg.pretrain.cutoff);
        train(&mut model, &encoded, &cfg.pretrain, TrainScope::Full, report_step)?;
    }
    let hash = checkpoint::save_base(&model, out)?;
    run.output(checkpoint::BASE_MANIFEST);
    run.output(BASE_BLOB);
    run.output(checkpoint::TOKENIZER_MANIFEST);
    println!("base {hash}");
    run.finish(&cfg, out)
}

pub fn cmd_train(args: TrainArgs) -> Result<()> {
    let mut cfg = read_run_config(args.common.config.as_deref())?;
    cfg.corpus = args.corpus.or(cfg.corpus);
    cfg.base = args.base.or(cfg.base);
    cfg.out = args.common.out.or(cfg.out);
    let t = &mut cfg.train;
    t.seed = args.common.seed.unwrap_or(t.seed);
    t.learning_rate = args.lr.unwrap_or(t.learning_rate);
    t.epochs = args.epochs.unwrap_or(t.epochs);
    t.batch_size = args.batch_size.unwrap_or(t.batch_size);
    t.grad_accum = args.grad_accum.unwrap_or(t.grad_accum);
    t.cutoff = args.cutoff.unwrap_or(t.cutoff);
    let l = &mut cfg.lora;
    l.r = args.rank.unwrap_or(l.r);
    l.alpha = args.alpha.unwrap_or(l.alpha);
    l.dropout = args.dropout.unwrap_or(l.dropout);
    if let Some(targets) = args.targets {
        l.targets = targets;
    }
    cfg.train.validate()?;
    cfg.lora.validate()?;
    println!("{}", serde_json::to_string_pretty(&cfg)?);

    let mut run = Run::new("train");
    let corpus_path = required(&cfg.corpus, "corpus")?;
    let base_dir = required(&cfg.base, "base checkpoint")?;
    let out = required(&cfg.out, "output directory")?;
    let sentences = load_labeled(corpus_path)?;
    run.input(corpus_path)?;
    let (mut model, base_hash) = checkpoint::load_base::<f32>(base_dir)?;
    run.inputs.insert(base_dir.join(BASE_BLOB).display().to_string(), base_hash.clone());

    model.wrap_lora(&cfg.lora, cfg.train.seed)?;
    let encoded = encode_all(&sentences, cfg.train.cutoff);
    let report = train(&mut model, &encoded, &cfg.train, TrainScope::Adapters, report_step)?;

    ensure_dir(out)?;
    checkpoint::save_adapter(&model, &cfg.lora, &base_hash, out)?;
    run.output(checkpoint::ADAPTER_MANIFEST);
    run.output(checkpoint::ADAPTER_BLOB);
    emit_loss_curve(&report.curve, &out.join("loss.csv"))?;
    run.output("loss.csv");
    run.finish(&cfg, out)
}

pub fn cmd_evaluate(args: EvalArgs) -> Result<()> {
    let mut cfg: EvalConfig = read_config(args.common.config.as_deref())?;
    cfg.base = args.base.or(cfg.base);
    cfg.adapter = args.adapter.or(cfg.adapter);
    cfg.test = args.test.or(cfg.test);
    cfg.out = args.common.out.or(cfg.out);
    cfg.cutoff = args.cutoff.unwrap_or(cfg.cutoff);

    let mut run = Run::new("evaluate");
    let base_dir = required(&cfg.base, "base checkpoint")?;
    let test_path = required(&cfg.test, "test set")?;
    let out = required(&cfg.out, "output directory")?;
    let (mut model, base_hash) = checkpoint::load_base::<f32>(base_dir)?;
    run.inputs.insert(base_dir.join(BASE_BLOB).display().to_string(), base_hash.clone());
    if let Some(adapter) = &cfg.adapter {
        checkpoint::load_adapter(&mut model, &base_hash, adapter)?;
        run.input(&adapter.join(checkpoint::ADAPTER_BLOB))?;
        model.merge_lora()?;
    }
    let test = load_labeled(test_path)?;
    run.input(test_path)?;
    let (report, records) = evaluate_model(&model, &test, EvalOptions { cutoff: cfg.cutoff })?;

    ensure_dir(out)?;
    fs::write(out.join("report.json"), serde_json::to_string_pretty(&report)?)
        .map_err(|e| Error::io(out.join("report.json"), e))?;
    run.output("report.json");
    corpus::write_jsonl(&out.join("predictions.jsonl"), &records)?;
    run.output("predictions.jsonl");
    let name = if cfg.adapter.is_some() { "adapted" } else { "base" };
    emit_metric_figures(&[(name.to_string(), report.clone())], out)?;
    run.output("metrics.csv");
    run.output("per_type_f1.csv");
    println!(
        "micro P {:.4} R {:.4} F1 {:.4} | macro F1 {:.4}",
        report.micro.precision, report.micro.recall, report.micro.f1, report.macro_avg.f1
    );
    run.finish(&cfg, out)
}
