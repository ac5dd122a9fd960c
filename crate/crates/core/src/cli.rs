//! Subcommand front-end: one TOML config, `--section.key=value` overrides,
//! and a run directory holding every output.
//!
//! Run directory layout:
//!
//! ```text
//! corpus/     corpus.jsonl volumes.csv manifest.jsonl      gen-corpus
//! tokenizer/  vocab.txt documents.jsonl                    tokenizer-train
//! labels/     labels.jsonl report.json                     labels
//! pretrain/   log.jsonl checkpoint/                        pretrain
//! finetune/   log.jsonl validation.jsonl best.ckpt         finetune
//! evaluate/   report.json table.txt predictions.jsonl      evaluate
//! analyze/<channel>/  scores_<channel>.jsonl heatmaps/    analyze
//! ```
//!
//! Each stage directory also gets `provenance.json` with the config hash.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attnviz::{channel, render_heatmap_html, sentence_scores, sentence_texts, top_k_summary, Channel, HeatmapDoc, ScoreRecord};
use crate::corpusgen::{generate_corpus, GenConfig, ManifestRecord, MANIFEST_FILE};
use crate::error::{Error, Result};
use crate::eval::{baseline_metrics, evaluate_model, render_table, BootstrapSpec, EvalReport};
use crate::hiermodel::{ClassifierConfig, HierModel, ModelConfig};
use crate::jsonl;
use crate::marketdata::{attach_labels, join_and_label, label_records, load_volume_csv, split_dataset, up_fraction, JoinReport, LabelRecord, Split, SplitSpec, Splits};
use crate::numerics::{Precision, Real};
use crate::textpipe::{read_documents, read_raw_corpus, split_sentences, tokenize_document, train_bpe, write_documents, Document, Vocab};
use crate::training::{finetune_model, load_model, run_finetune, run_pretraining, save_model, Example, Init, Outputs, Task, TrainConfig};
use crate::training::checkpoint::MODEL_FILE;

/// Root for run directories named by `run.name`; defaults to `./runs`.
pub const RUN_ROOT_ENV: &str = "HIERFORMER_RUN_ROOT";

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FinetuneInit {
    /// Encoder from `pretrain/checkpoint/model.ckpt`.
    Pretrained,
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    /// Run directory under the run root, unless `--run-dir` is given.
    pub name: String,
    pub precision: Precision,
    pub finetune_init: FinetuneInit,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            name: "default".into(),
            precision: Precision::F32,
            finetune_init: FinetuneInit::Pretrained,
        }
    }
}

/// External inputs; unset paths read the run directory's own `corpus/`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub corpus: Option<PathBuf>,
    pub volumes: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TokenizerSection {
    /// Defaults to `model.vocab_size`.
    pub vocab_size: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalyzeSection {
    pub channel: Channel,
    pub top_k: usize,
    pub split: Split,
    /// Heatmaps are written for the first N documents of the split.
    pub max_heatmaps: usize,
}

impl Default for AnalyzeSection {
    fn default() -> Self {
        AnalyzeSection {
            channel: Channel::Norm,
            top_k: 3,
            split: Split::Test,
            max_heatmaps: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub run: RunSection,
    pub data: DataSection,
    pub corpus: GenConfig,
    pub tokenizer: TokenizerSection,
    pub model: ModelConfig,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
    pub split: SplitSpec,
    pub eval: BootstrapSpec,
    pub analyze: AnalyzeSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            run: RunSection::default(),
            data: DataSection::default(),
            corpus: GenConfig::default(),
            tokenizer: TokenizerSection::default(),
            model: ModelConfig::default(),
            pretrain: TrainConfig::default(),
            finetune: TrainConfig::finetune(),
            split: SplitSpec::default(),
            eval: BootstrapSpec::default(),
            analyze: AnalyzeSection::default(),
        }
    }
}

impl RunConfig {
    /// Parses a TOML document, applies `section.key = value` overrides and
    /// rejects unknown keys.
    pub fn from_toml(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut root: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        for (key, raw) in overrides {
            set_key(&mut root, key, parse_scalar(raw))?;
        }
        dates_to_strings(&mut root);
        let mut cfg: RunConfig = toml::Value::Table(root)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.pretrain.task = Task::Pretrain;
        cfg.finetune.task = Task::Finetune;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.model.validate()?;
        self.pretrain.validate()?;
        self.finetune.validate()?;
        self.eval.validate()?;
        if self.analyze.top_k == 0 {
            return Err(Error::Config("analyze.top_k must be positive".into()));
        }
        if self.run.name.is_empty() || self.run.name.contains(['/', '\\']) {
            return Err(Error::Config("run.name must be a plain directory name".into()));
        }
        Ok(())
    }

    /// SHA-256 of the resolved config, embedded in every output.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex(&Sha256::digest(json.as_bytes()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes to toml")
    }

    fn vocab_size(&self) -> usize {
        self.tokenizer.vocab_size.unwrap_or(self.model.vocab_size)
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// TOML literal if it parses as one, otherwise the raw text as a string.
fn parse_scalar(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn set_key(root: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("malformed key {key:?}")));
    }
    let (last, path) = parts.split_last().expect("split yields one part");
    let mut t = root;
    for p in path {
        t = t
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("{key}: {p} is not a section")))?;
    }
    t.insert(last.to_string(), value);
    Ok(())
}

/// Dates are strings to serde; TOML date literals are accepted too.
fn dates_to_strings(t: &mut toml::Table) {
    for (_, v) in t.iter_mut() {
        match v {
            toml::Value::Datetime(d) => *v = toml::Value::String(d.to_string()),
            toml::Value::Table(inner) => dates_to_strings(inner),
            _ => {}
        }
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "hierformer",
    version,
    about = "Hierarchical Reformer pipeline: corpus, tokenizer, labels, pretraining, finetuning, evaluation, attention analysis",
    after_help = "Any config key can be overridden as --section.key=value (for example --model.model_dim=64).\n\
                  Run directories live under $HIERFORMER_RUN_ROOT (default ./runs) unless --run-dir is given.\n\
                  Exit codes: 0 ok, 1 usage or config error, 2 data error, 3 numeric failure."
)]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// TOML config file.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Run directory; overrides the run root and run.name.
    #[arg(long)]
    run_dir: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic corpus, volume CSV and manifest.
    GenCorpus(Common),
    /// Train the BPE vocabulary on pre-holdout documents and tokenize the corpus.
    TokenizerTrain(Common),
    /// Join documents with volumes and split into train/val/test.
    Labels(Common),
    /// Masked-sentence pretraining on the training split.
    Pretrain(Common),
    /// Volume-direction finetuning; keeps the best validation model.
    Finetune(Common),
    /// Bootstrap metrics for the model and the random/majority baselines.
    Evaluate(Common),
    /// Sentence attention scores, top-k summaries and heatmaps.
    Analyze {
        #[command(flatten)]
        common: Common,
        /// Mirrors analyze.channel (raw or norm).
        #[arg(long)]
        channel: Option<String>,
        /// Mirrors analyze.top_k.
        #[arg(long)]
        top_k: Option<usize>,
    },
    /// Print the resolved config as TOML.
    Config(Common),
}

/// Splits `--a.b=v` (or `--a.b v`) overrides from the arguments clap parses.
fn take_overrides(args: Vec<String>) -> std::result::Result<(Vec<String>, Vec<(String, String)>), String> {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(a) = it.next() {
        let Some(body) = a.strip_prefix("--") else {
            rest.push(a);
            continue;
        };
        let (key, value) = match body.split_once('=') {
            Some((k, v)) => (k.to_string(), Some(v.to_string())),
            None => (body.to_string(), None),
        };
        if !key.contains('.') {
            rest.push(a);
            continue;
        }
        let value = match value {
            Some(v) => v,
            None => it.next().ok_or_else(|| format!("--{key} needs a value"))?,
        };
        overrides.push((key, value));
    }
    Ok((rest, overrides))
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Run(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(m) => Failure::Usage(format!("invalid configuration: {m}")),
            e => Failure::Run(e),
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => EXIT_USAGE,
        Error::NonFinite { .. } => EXIT_NUMERIC,
        _ => EXIT_DATA,
    }
}

/// Runs one subcommand; `argv[0]` is the program name. Prints the summary to
/// stdout and errors to stderr, and returns the exit code.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString>,
{
    let args: Vec<String> = argv
        .into_iter()
        .map(|a| a.into().to_string_lossy().into_owned())
        .collect();
    match run_inner(args) {
        Ok(out) => {
            println!("{out}");
            EXIT_OK
        }
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            EXIT_USAGE
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn run_inner(args: Vec<String>) -> std::result::Result<String, Failure> {
    let (rest, mut overrides) = take_overrides(args).map_err(Failure::Usage)?;
    let cli = match Cli::try_parse_from(&rest) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => Ok(e.to_string().trim_end().to_string()),
                _ => Err(Failure::Usage(e.render().to_string().trim_end().to_string())),
            };
        }
    };
    let common = match &cli.cmd {
        Command::GenCorpus(c)
        | Command::TokenizerTrain(c)
        | Command::Labels(c)
        | Command::Pretrain(c)
        | Command::Finetune(c)
        | Command::Evaluate(c)
        | Command::Config(c) => c,
        Command::Analyze {
            common,
            channel,
            top_k,
        } => {
            if let Some(c) = channel {
                overrides.push(("analyze.channel".into(), format!("{c:?}")));
            }
            if let Some(k) = top_k {
                overrides.push(("analyze.top_k".into(), k.to_string()));
            }
            common
        }
    };
    let text = match &common.config {
        Some(p) => fs::read_to_string(p).map_err(|e| Failure::Usage(format!("cannot read {}: {e}", p.display())))?,
        None => String::new(),
    };
    let cfg = RunConfig::from_toml(&text, &overrides)?;
    if let Command::Config(_) = cli.cmd {
        return Ok(cfg.to_toml().trim_end().to_string());
    }
    let dir = RunDir::resolve(common.run_dir.as_deref(), &cfg);
    let out = match cli.cmd {
        Command::GenCorpus(_) => gen_corpus(&cfg, &dir),
        Command::TokenizerTrain(_) => tokenizer_train(&cfg, &dir),
        Command::Labels(_) => labels(&cfg, &dir),
        Command::Pretrain(_) => by_precision!(cfg, pretrain(&cfg, &dir)),
        Command::Finetune(_) => by_precision!(cfg, finetune(&cfg, &dir)),
        Command::Evaluate(_) => by_precision!(cfg, evaluate(&cfg, &dir)),
        Command::Analyze { .. } => by_precision!(cfg, analyze(&cfg, &dir)),
        Command::Config(_) => unreachable!("handled above"),
    }?;
    Ok(out)
}

macro_rules! by_precision {
    ($cfg:expr, $f:ident($($a:expr),*)) => {
        match $cfg.run.precision {
            Precision::F32 => $f::<f32>($($a),*),
            Precision::F64 => $f::<f64>($($a),*),
        }
    };
}
use by_precision;

/// The run directory and the paths of every stage's files.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn resolve(explicit: Option<&Path>, cfg: &RunConfig) -> Self {
        let root = match explicit {
            Some(p) => p.to_path_buf(),
            None => std::env::var_os(RUN_ROOT_ENV)
                .map(PathBuf::from)
                .unwrap_or_else(|| PathBuf::from("runs"))
                .join(&cfg.run.name),
        };
        RunDir { root }
    }

    pub fn stage(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    /// Empties and recreates a stage directory so reruns leave no stale files.
    fn fresh(&self, name: &str, cfg: &RunConfig) -> Result<PathBuf> {
        let d = self.stage(name);
        if d.exists() {
            fs::remove_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        let prov = serde_json::json!({
            "subcommand": name,
            "config_hash": cfg.hash(),
            "config": cfg,
        });
        write_json(&d.join("provenance.json"), &prov)?;
        Ok(d)
    }

    fn corpus(&self, cfg: &RunConfig) -> PathBuf {
        cfg.data.corpus.clone().unwrap_or_else(|| self.stage("corpus").join(crate::corpusgen::CORPUS_FILE))
    }

    fn volumes(&self, cfg: &RunConfig) -> PathBuf {
        cfg.data.volumes.clone().unwrap_or_else(|| self.stage("corpus").join(crate::corpusgen::VOLUMES_FILE))
    }

    fn manifest(&self, cfg: &RunConfig) -> PathBuf {
        cfg.data.manifest.clone().unwrap_or_else(|| self.stage("corpus").join(MANIFEST_FILE))
    }

    fn vocab(&self) -> PathBuf {
        self.stage("tokenizer").join("vocab.txt")
    }

    fn documents(&self) -> PathBuf {
        self.stage("tokenizer").join("documents.jsonl")
    }

    fn labels(&self) -> PathBuf {
        self.stage("labels").join("labels.jsonl")
    }

    fn pretrained(&self) -> PathBuf {
        self.stage("pretrain").join("checkpoint").join(MODEL_FILE)
    }

    fn best(&self) -> PathBuf {
        self.stage("finetune").join("best.ckpt")
    }
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

fn gen_corpus(cfg: &RunConfig, dir: &RunDir) -> Result<String> {
    let d = dir.fresh("corpus", cfg)?;
    let g = generate_corpus(&cfg.corpus)?;
    g.write(&d)?;
    let up = g.manifest.iter().filter(|m| m.label == 1).count() as f64 / g.manifest.len() as f64;
    let planted = g.manifest.iter().filter(|m| m.planted_index.is_some()).count();
    Ok(format!(
        "gen-corpus: {} documents, {} tickers, {planted} planted signals, {:.1}% up -> {}",
        g.docs.len(),
        g.volumes.len(),
        100.0 * up,
        d.display()
    ))
}

fn tokenizer_train(cfg: &RunConfig, dir: &RunDir) -> Result<String> {
    let raws = read_raw_corpus(&dir.corpus(cfg))?;
    let d = dir.fresh("tokenizer", cfg)?;
    let sentences: Vec<String> = raws
        .iter()
        .filter(|r| r.meta.filing_date < cfg.split.holdout_start)
        .flat_map(|r| split_sentences(&r.text))
        .collect();
    let vocab = train_bpe(sentences.iter().map(String::as_str), cfg.vocab_size())?;
    vocab.save(&dir.vocab())?;
    let results: Vec<Result<Document>> = raws.par_iter().map(|r| tokenize_document(r, &vocab)).collect();
    let mut docs = Vec::with_capacity(raws.len());
    let mut dropped = 0;
    for r in results {
        match r {
            Ok(doc) => docs.push(doc),
            Err(Error::Data(_)) => dropped += 1,
            Err(e) => return Err(e),
        }
    }
    write_documents(&dir.documents(), &docs)?;
    Ok(format!(
        "tokenizer-train: vocab {} from {} pre-holdout sentences; {} documents tokenized, {dropped} without sentences -> {}",
        vocab.size(),
        sentences.len(),
        docs.len(),
        d.display()
    ))
}

#[derive(Serialize)]
struct LabelsReport<'a> {
    config_hash: String,
    join: &'a JoinReport,
    counts: [usize; 3],
    up_fraction: [f64; 3],
}

fn labels(cfg: &RunConfig, dir: &RunDir) -> Result<String> {
    let docs = read_documents(&dir.documents())?;
    let volumes = load_volume_csv(&dir.volumes(cfg))?;
    let d = dir.fresh("labels", cfg)?;
    let (examples, join) = join_and_label(docs, &volumes);
    let splits = split_dataset(examples, &cfg.split)?;
    jsonl::write(&dir.labels(), &label_records(&splits))?;
    let parts = [&splits.train, &splits.val, &splits.test];
    let rep = LabelsReport {
        config_hash: cfg.hash(),
        join: &join,
        counts: parts.map(|p| p.len()),
        up_fraction: parts.map(|p| up_fraction(p)),
    };
    write_json(&d.join("report.json"), &rep)?;
    Ok(format!(
        "labels: train {} / val {} / test {} ({:.1}% / {:.1}% / {:.1}% up), {} skipped -> {}",
        rep.counts[0],
        rep.counts[1],
        rep.counts[2],
        100.0 * rep.up_fraction[0],
        100.0 * rep.up_fraction[1],
        100.0 * rep.up_fraction[2],
        join.total_skipped(),
        d.display()
    ))
}

fn load_splits(dir: &RunDir) -> Result<Splits> {
    let docs = read_documents(&dir.documents())?;
    let records: Vec<LabelRecord> = jsonl::read(&dir.labels())?;
    attach_labels(docs, &records)
}

fn check_vocab(cfg: &RunConfig, dir: &RunDir) -> Result<Vocab> {
    let vocab = Vocab::load(&dir.vocab())?;
    if vocab.size() > cfg.model.vocab_size {
        return Err(Error::Config(format!(
            "tokenizer has {} ids but model.vocab_size is {}",
            vocab.size(),
            cfg.model.vocab_size
        )));
    }
    Ok(vocab)
}

fn labeled(split: &[crate::marketdata::LabeledExample]) -> Vec<Example<'_>> {
    split.iter().map(|e| Example::labeled(&e.doc, e.label.y)).collect()
}

fn pretrain<T: Real>(cfg: &RunConfig, dir: &RunDir) -> Result<String> {
    check_vocab(cfg, dir)?;
    let splits = load_splits(dir)?;
    let d = dir.fresh("pretrain", cfg)?;
    let corpus: Vec<Document> = splits.train.into_iter().map(|e| e.doc).collect();
    let seed = cfg.pretrain.seed;
    let model = HierModel::<T>::new(cfg.model.clone(), seed)?.with_pretrain_head(seed);
    let out = Outputs {
        log: Some(d.join("log.jsonl")),
        checkpoint_dir: Some(d.join("checkpoint")),
    };
    let (t, stats) = run_pretraining(&corpus, model, cfg.pretrain.clone(), &out)?;
    let (first, last) = match (stats.first(), stats.last()) {
        (Some(a), Some(b)) => (a.loss, b.loss),
        _ => (f64::NAN, f64::NAN),
    };
    Ok(format!(
        "pretrain: {} documents, {} steps, loss {first:.4} -> {last:.4} -> {}",
        corpus.len(),
        t.step(),
        d.display()
    ))
}

fn finetune<T: Real>(cfg: &RunConfig, dir: &RunDir) -> Result<String> {
    check_vocab(cfg, dir)?;
    let splits = load_splits(dir)?;
    let init = match cfg.run.finetune_init {
        FinetuneInit::Pretrained => Init::Checkpoint(dir.pretrained()),
        FinetuneInit::Random => Init::Random,
    };
    let d = dir.fresh("finetune", cfg)?;
    let model = finetune_model::<T>(&cfg.model, &init, cfg.finetune.seed)?;
    let out = Outputs {
        log: Some(d.join("log.jsonl")),
        checkpoint_dir: None,
    };
    let (train, val) = (labeled(&splits.train), labeled(&splits.val));
    let o = run_finetune(&train, &val, model, cfg.finetune.clone(), &out)?;
    jsonl::write(&d.join("validation.jsonl"), &o.trace)?;
    save_model(&o.best, &dir.best(), o.best_step, cfg.finetune.seed)?;
    let best = o.trace.iter().find(|r| r.step == o.best_step).map_or(f64::NAN, |r| r.val_loss);
    Ok(format!(
        "finetune: {} steps ({:?} init), best validation loss {best:.4} at step {} -> {}",
        o.log.len(),
        cfg.run.finetune_init,
        o.best_step,
        d.display()
    ))
}

fn predict_all<T: Real>(model: &HierModel<T>, docs: &[&Document], ccfg: &ClassifierConfig, seed: u64) -> Result<Vec<f64>> {
    docs.par_iter().map(|d| model.predict(d, ccfg, seed)).collect()
}

#[derive(Serialize)]
struct Prediction<'a> {
    doc_id: &'a str,
    split: Split,
    score: f64,
    label: u8,
}

#[derive(Serialize)]
struct EvalFile<'a> {
    config_hash: String,
    reports: &'a [EvalReport],
}

fn evaluate<T: Real>(cfg: &RunConfig, dir: &RunDir) -> Result<String> {
    let splits = load_splits(dir)?;
    let model = load_model::<T>(&dir.best())?;
    let d = dir.fresh("evaluate", cfg)?;
    let ccfg = cfg.finetune.classifier();
    let seed = cfg.finetune.seed;
    let docs = |s: Split| splits.get(s).iter().map(|e| &e.doc).collect::<Vec<_>>();
    let ys = |s: Split| splits.get(s).iter().map(|e| e.label.y).collect::<Vec<u8>>();
    let (val_s, test_s) = (predict_all(&model, &docs(Split::Val), &ccfg, seed)?, predict_all(&model, &docs(Split::Test), &ccfg, seed)?);
    let (val_y, test_y) = (ys(Split::Val), ys(Split::Test));
    let m = evaluate_model("Hierarchical Reformer", (&val_s, &val_y), (&test_s, &test_y), &cfg.eval)?;
    let (random, majority) = baseline_metrics(&ys(Split::Train), &test_y, &cfg.eval)?;
    let reports = vec![m, random, majority];
    let table = render_table(&reports);
    fs::write(d.join("table.txt"), &table).map_err(|e| Error::io(d.join("table.txt"), e))?;
    write_json(
        &d.join("report.json"),
        &EvalFile {
            config_hash: cfg.hash(),
            reports: &reports,
        },
    )?;
    let mut preds = Vec::new();
    for (s, scores) in [(Split::Val, &val_s), (Split::Test, &test_s)] {
        for (e, &score) in splits.get(s).iter().zip(scores.iter()) {
            preds.push(Prediction {
                doc_id: &e.doc.meta.doc_id,
                split: s,
                score,
                label: e.label.y,
            });
        }
    }
    jsonl::write(&d.join("predictions.jsonl"), &preds)?;
    Ok(format!(
        "{}evaluate: test n={}, ROC-AUC {:.4}, MCC {:.4}, F1 {:.4} -> {}",
        table,
        test_y.len(),
        reports[0].roc_auc.point,
        reports[0].mcc.point,
        reports[0].f1.point,
        d.display()
    ))
}

/// Hit rate of planted sentences in the top-k, over signal documents.
fn planted_hits(records: &[ScoreRecord], manifest: &[ManifestRecord]) -> Option<(usize, usize)> {
    let by_id: std::collections::HashMap<&str, usize> = manifest
        .iter()
        .filter_map(|m| m.planted_index.map(|p| (m.doc_id.as_str(), p)))
        .collect();
    let mut n = 0;
    let mut hit = 0;
    for r in records {
        if let Some(&p) = by_id.get(r.doc_id.as_str()) {
            if p < r.scores.len() {
                n += 1;
                hit += usize::from(r.top_k.contains(&p));
            }
        }
    }
    (n > 0).then_some((hit, n))
}

fn analyze<T: Real>(cfg: &RunConfig, dir: &RunDir) -> Result<String> {
    let vocab = check_vocab(cfg, dir)?;
    let splits = load_splits(dir)?;
    let model = load_model::<T>(&dir.best())?;
    let a = &cfg.analyze;
    // One directory per channel so the two analyses can sit side by side.
    let d = dir.fresh(&format!("analyze/{}", a.channel), cfg)?;
    let heat_dir = d.join("heatmaps");
    fs::create_dir_all(&heat_dir).map_err(|e| Error::io(&heat_dir, e))?;
    let ccfg = cfg.finetune.classifier();
    let seed = cfg.finetune.seed;
    let docs = splits.get(a.split);
    let hash = cfg.hash();
    let records: Vec<ScoreRecord> = docs
        .par_iter()
        .enumerate()
        .map(|(i, e)| -> Result<ScoreRecord> {
            let (scores, prob) = sentence_scores(&model, &e.doc, &ccfg, seed)?;
            let ch = channel(&scores, a.channel);
            let top_k = top_k_summary(&ch, a.top_k.min(ch.len()))?;
            if i < a.max_heatmaps {
                let mut h = HeatmapDoc::new(&e.doc, sentence_texts(&e.doc, &vocab), &ch, a.channel, prob)?;
                h.meta.insert("config_hash".into(), hash.clone());
                let name = format!("{}_{}.html", sanitize(&e.doc.meta.doc_id), a.channel);
                render_heatmap_html(&h, &heat_dir.join(name))?;
            }
            Ok(ScoreRecord {
                doc_id: e.doc.meta.doc_id.clone(),
                channel: a.channel,
                scores: ch,
                top_k,
            })
        })
        .collect::<Result<_>>()?;
    jsonl::write(&d.join(format!("scores_{}.jsonl", a.channel)), &records)?;
    let manifest_path = dir.manifest(cfg);
    let hits = if manifest_path.exists() {
        let manifest: Vec<ManifestRecord> = jsonl::read(&manifest_path)?;
        planted_hits(&records, &manifest)
    } else {
        None
    };
    let hits = hits.map_or(String::new(), |(h, n)| {
        format!(", planted sentence in top-{} for {h}/{n} signal documents", a.top_k)
    });
    Ok(format!(
        "analyze: {} {:?} documents, {} channel, {} heatmaps{hits} -> {}",
        records.len(),
        a.split,
        a.channel,
        records.len().min(a.max_heatmaps),
        d.display()
    ))
}

fn sanitize(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}
