//! Python bindings: tokenizer, checkpoint inference, attention scores,
//! metrics and the command line.

use std::path::PathBuf;

use chrono::NaiveDate;
use hierformer::attnviz::{self, Channel};
use hierformer::eval::{self, BootstrapSpec};
use hierformer::hiermodel::{ClassifierConfig, HierModel};
use hierformer::numerics::Real;
use hierformer::textpipe::{self, DocMeta, Document, Vocab};
use hierformer::training::load_model;
use hierformer::Error;
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

/// Byte-level BPE vocabulary.
#[pyclass(module = "hierformer_py")]
struct Tokenizer {
    vocab: Vocab,
}

#[pymethods]
impl Tokenizer {
    #[staticmethod]
    fn train(sentences: Vec<String>, vocab_size: usize) -> PyResult<Self> {
        let vocab = textpipe::train_bpe(sentences.iter().map(String::as_str), vocab_size).map_err(py_err)?;
        Ok(Tokenizer { vocab })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Tokenizer {
            vocab: Vocab::load(&path).map_err(py_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.vocab.save(&path).map_err(py_err)
    }

    #[getter]
    fn size(&self) -> usize {
        self.vocab.size()
    }

    fn encode(&self, text: &str) -> Vec<u32> {
        self.vocab.encode(text)
    }

    fn decode(&self, ids: Vec<u32>) -> String {
        self.vocab.decode(&ids)
    }

    fn __repr__(&self) -> String {
        format!("Tokenizer(size={})", self.vocab.size())
    }
}

enum Weights {
    F32(HierModel<f32>),
    F64(HierModel<f64>),
}

/// A finetuned checkpoint with its classifier head.
#[pyclass(module = "hierformer_py")]
struct Model {
    weights: Weights,
}

fn document(sentences: &[String], tok: &Tokenizer) -> PyResult<Document> {
    let meta = DocMeta {
        doc_id: "python".into(),
        ticker: String::new(),
        filing_date: NaiveDate::default(),
        doc_type: String::new(),
    };
    textpipe::build_document(meta, sentences, &tok.vocab).map_err(py_err)
}

fn scores_of<T: Real>(m: &HierModel<T>, doc: &Document, seed: u64) -> hierformer::Result<(Vec<attnviz::SentenceScore>, f64)> {
    attnviz::sentence_scores(m, doc, &ClassifierConfig::default(), seed)
}

fn parse_channel(name: &str) -> PyResult<Channel> {
    match name {
        "raw" => Ok(Channel::Raw),
        "norm" => Ok(Channel::Norm),
        _ => Err(PyValueError::new_err(format!("unknown channel {name:?}, expected 'raw' or 'norm'"))),
    }
}

#[pymethods]
impl Model {
    /// Loads a checkpoint written in either precision.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let weights = match load_model::<f32>(&path) {
            Ok(m) => Weights::F32(m),
            Err(_) => Weights::F64(load_model::<f64>(&path).map_err(py_err)?),
        };
        let has_head = match &weights {
            Weights::F32(m) => m.has_classifier(),
            Weights::F64(m) => m.has_classifier(),
        };
        if !has_head {
            return Err(PyValueError::new_err("checkpoint has no classifier head"));
        }
        Ok(Model { weights })
    }

    #[getter]
    fn precision(&self) -> &'static str {
        match self.weights {
            Weights::F32(_) => "f32",
            Weights::F64(_) => "f64",
        }
    }

    /// Probability of an up move for a document given as sentences.
    #[pyo3(signature = (sentences, tokenizer, seed = 0))]
    fn predict(&self, py: Python<'_>, sentences: Vec<String>, tokenizer: &Tokenizer, seed: u64) -> PyResult<f64> {
        let doc = document(&sentences, tokenizer)?;
        py.detach(|| self.run(&doc, seed)).map(|r| r.1).map_err(py_err)
    }

    /// Per-sentence attention scores of the pooling layer.
    #[pyo3(signature = (sentences, tokenizer, channel = "norm", seed = 0))]
    fn sentence_scores(
        &self,
        py: Python<'_>,
        sentences: Vec<String>,
        tokenizer: &Tokenizer,
        channel: &str,
        seed: u64,
    ) -> PyResult<Vec<f64>> {
        let c = parse_channel(channel)?;
        let doc = document(&sentences, tokenizer)?;
        let (scores, _) = py.detach(|| self.run(&doc, seed)).map_err(py_err)?;
        Ok(attnviz::channel(&scores, c))
    }
}

impl Model {
    fn run(&self, doc: &Document, seed: u64) -> hierformer::Result<(Vec<attnviz::SentenceScore>, f64)> {
        match &self.weights {
            Weights::F32(m) => scores_of(m, doc, seed),
            Weights::F64(m) => scores_of(m, doc, seed),
        }
    }
}

#[pyfunction]
fn split_sentences(text: &str) -> Vec<String> {
    textpipe::split_sentences(text)
}

#[pyfunction]
fn roc_auc(scores: Vec<f64>, labels: Vec<u8>) -> PyResult<f64> {
    eval::roc_auc(&scores, &labels).map_err(py_err)
}

#[pyfunction]
fn mcc(preds: Vec<u8>, labels: Vec<u8>) -> f64 {
    eval::mcc(&preds, &labels)
}

#[pyfunction]
fn f1(preds: Vec<u8>, labels: Vec<u8>) -> f64 {
    eval::f1(&preds, &labels)
}

/// Percentile bootstrap interval of ROC-AUC.
#[pyfunction]
#[pyo3(signature = (scores, labels, n_repeats = 100, sample_size = 300, seed = 0))]
fn bootstrap_auc(
    py: Python<'_>,
    scores: Vec<f64>,
    labels: Vec<u8>,
    n_repeats: usize,
    sample_size: usize,
    seed: u64,
) -> PyResult<(f64, f64)> {
    let spec = BootstrapSpec {
        n_repeats,
        sample_size,
        seed,
        ..BootstrapSpec::default()
    };
    let ci = py
        .detach(|| eval::bootstrap_ci(&scores, &labels, eval::roc_auc, &spec))
        .map_err(py_err)?;
    Ok((ci.low, ci.high))
}

#[pyfunction]
fn top_k_summary(scores: Vec<f64>, k: usize) -> PyResult<Vec<usize>> {
    attnviz::top_k_summary(&scores, k).map_err(py_err)
}

/// Runs a command line, e.g. `run_cli(["gen-corpus", "-c", "desk.toml"])`.
/// Returns the process exit code.
#[pyfunction]
fn run_cli(py: Python<'_>, args: Vec<String>) -> i32 {
    let argv: Vec<String> = std::iter::once("hierformer".to_string()).chain(args).collect();
    py.detach(|| hierformer::cli::run(argv))
}

#[pymodule]
fn hierformer_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Tokenizer>()?;
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(split_sentences, m)?)?;
    m.add_function(wrap_pyfunction!(roc_auc, m)?)?;
    m.add_function(wrap_pyfunction!(mcc, m)?)?;
    m.add_function(wrap_pyfunction!(f1, m)?)?;
    m.add_function(wrap_pyfunction!(bootstrap_auc, m)?)?;
    m.add_function(wrap_pyfunction!(top_k_summary, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    Ok(())
}
