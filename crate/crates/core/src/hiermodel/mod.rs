//! The hierarchical document model: a word-level Reformer per sentence whose
//! first-position outputs feed a sentence-level Reformer, plus the masked
//! sentence pretraining head and the volume-direction classifier head.

pub mod classifier;
pub mod pretrain;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::params::INIT_STD;
use crate::numerics::{concat_rows, Bindings, ParamStore, Real, RngStream, Tape, Tensor, Var};
use crate::reformer::{
    init_stack, reformer_stack, AttentionConfig, AttentionKind, Backprop, CallCtx, LayerConfig,
    LayerVars, Layout,
};
use crate::textpipe::{Document, MAX_SENTENCES, MAX_SENTENCE_LEN, PAD};

pub use classifier::{
    classification_loss, classifier_forward, ClassifierConfig, ClassifierOutput, ClassifierVars,
    L1Queries, L1Target,
};
pub use pretrain::{
    decoder_forward, mask_sentences, pretrain_loss, DecoderOutput, MaskSet, PretrainConfig,
    PretrainVars,
};

pub const BASE: &str = "base";
pub const PRETRAIN: &str = "pretrain";
pub const CLASSIFIER: &str = "cls";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub model_dim: usize,
    pub n_heads: usize,
    pub ff_dim: usize,
    pub word_layers: usize,
    pub sentence_layers: usize,
    pub max_words: usize,
    pub max_sentences: usize,
    pub attention: AttentionKind,
    pub word_chunk: usize,
    pub sentence_chunk: usize,
    pub n_hash_rounds: usize,
    pub n_buckets: Option<usize>,
    pub ffn_chunk_size: usize,
    pub dropout: f64,
    pub ln_eps: f64,
    pub init_std: f64,
    pub backprop: Backprop,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 8000,
            model_dim: 256,
            n_heads: 8,
            ff_dim: 2048,
            word_layers: 4,
            sentence_layers: 4,
            max_words: MAX_SENTENCE_LEN,
            max_sentences: MAX_SENTENCES,
            attention: AttentionKind::Lsh,
            word_chunk: 16,
            sentence_chunk: 64,
            n_hash_rounds: 2,
            n_buckets: None,
            ffn_chunk_size: 64,
            dropout: 0.1,
            ln_eps: 1e-12,
            init_std: INIT_STD,
            backprop: Backprop::Reversible,
        }
    }
}

impl ModelConfig {
    fn layer(&self, kind: AttentionKind, chunk: usize, causal: bool, self_exclusion: bool) -> LayerConfig {
        LayerConfig {
            attention: AttentionConfig {
                model_dim: self.model_dim,
                n_heads: self.n_heads,
                n_hash_rounds: self.n_hash_rounds,
                n_buckets: self.n_buckets,
                bucket_chunk_size: chunk,
                causal,
                kind,
                self_exclusion,
            },
            ff_dim: self.ff_dim,
            ffn_chunk_size: self.ffn_chunk_size,
            dropout: self.dropout,
            ln_eps: self.ln_eps,
        }
    }

    pub fn word_layer(&self) -> LayerConfig {
        self.layer(self.attention, self.word_chunk, false, true)
    }

    pub fn sentence_layer(&self) -> LayerConfig {
        self.layer(self.attention, self.sentence_chunk, false, true)
    }

    /// Decoder layer: dense causal attention.
    pub fn decoder_layer(&self) -> LayerConfig {
        self.layer(AttentionKind::Full, self.word_chunk, true, true)
    }

    /// Pooling layer: dense attention, a position may attend to itself.
    pub fn pooling_layer(&self) -> LayerConfig {
        self.layer(AttentionKind::Full, self.sentence_chunk, false, false)
    }

    pub fn validate(&self) -> Result<()> {
        self.word_layer().validate()?;
        self.sentence_layer().validate()?;
        if self.vocab_size <= crate::textpipe::bpe::N_SPECIALS as usize {
            return Err(Error::Config("vocab_size too small".into()));
        }
        if self.max_words < 2 || self.max_sentences == 0 {
            return Err(Error::Config("max_words must be >= 2 and max_sentences >= 1".into()));
        }
        if self.init_std <= 0.0 {
            return Err(Error::Config("init_std must be positive".into()));
        }
        Ok(())
    }
}

/// Parameters of the two-level encoder, under `base.`.
pub fn init_base<T: Real>(store: &mut ParamStore<T>, cfg: &ModelConfig, rng: &RngStream) {
    let (d, s) = (cfg.model_dim, cfg.init_std);
    store.init_normal("base.tok_emb", &[cfg.vocab_size, d], s, rng);
    store.init_normal("base.word_pos", &[cfg.max_words, d], s, rng);
    store.init_normal("base.sent_pos", &[cfg.max_sentences, d], s, rng);
    init_stack(store, "base.word", cfg.word_layers, &cfg.word_layer(), s, rng);
    init_stack(store, "base.sent", cfg.sentence_layers, &cfg.sentence_layer(), s, rng);
}

/// Every path [`init_base`] creates.
pub fn base_param_paths(cfg: &ModelConfig) -> BTreeSet<String> {
    let mut store = ParamStore::<f32>::new();
    let small = ModelConfig {
        vocab_size: 6,
        model_dim: cfg.n_heads,
        ff_dim: 1,
        max_words: 2,
        max_sentences: 1,
        ..cfg.clone()
    };
    init_base(&mut store, &small, &RngStream::new(0, "paths"));
    store.paths().cloned().collect()
}

/// The encoder subset of `src`, checked to be exactly the encoder parameter set.
pub fn transfer_base<T: Real>(src: &ParamStore<T>, cfg: &ModelConfig) -> Result<ParamStore<T>> {
    let base = src.subset(&format!("{BASE}."));
    let have: BTreeSet<String> = base.paths().cloned().collect();
    let want = base_param_paths(cfg);
    if have != want {
        let missing: Vec<_> = want.difference(&have).collect();
        let extra: Vec<_> = have.difference(&want).collect();
        return Err(Error::Data(format!(
            "checkpoint encoder parameters differ: missing {missing:?}, unexpected {extra:?}"
        )));
    }
    for (p, t) in base.iter() {
        let expect = expected_shape(p, cfg);
        if let Some(e) = expect {
            if t.shape() != e.as_slice() {
                return Err(Error::shape("checkpoint parameter", t.shape(), &e));
            }
        }
    }
    Ok(base)
}

fn expected_shape(path: &str, cfg: &ModelConfig) -> Option<Vec<usize>> {
    let d = cfg.model_dim;
    match path {
        "base.tok_emb" => Some(vec![cfg.vocab_size, d]),
        "base.word_pos" => Some(vec![cfg.max_words, d]),
        "base.sent_pos" => Some(vec![cfg.max_sentences, d]),
        _ if path.ends_with("ffn.w1") => Some(vec![d, cfg.ff_dim]),
        _ if path.ends_with("ffn.w2") => Some(vec![cfg.ff_dim, d]),
        _ if path.ends_with(".w_qk") || path.ends_with(".w_v") || path.ends_with(".w_o") => {
            Some(vec![d, d])
        }
        _ => None,
    }
}

/// Tape handles of the encoder.
pub struct BaseVars<'t, T: Real> {
    pub tok_emb: Var<'t, T>,
    pub word_pos: Var<'t, T>,
    pub sent_pos: Var<'t, T>,
    pub word: Vec<LayerVars<'t, T>>,
    pub word_ln: (Var<'t, T>, Var<'t, T>),
    pub sent: Vec<LayerVars<'t, T>>,
    pub sent_ln: (Var<'t, T>, Var<'t, T>),
}

pub(crate) fn bind_stack<'t, T: Real>(
    b: &Bindings<'t, T>,
    prefix: &str,
    n: usize,
) -> Result<(Vec<LayerVars<'t, T>>, (Var<'t, T>, Var<'t, T>))> {
    let layers = (0..n)
        .map(|l| LayerVars::bind(b, &format!("{prefix}.layers.{l}")))
        .collect::<Result<_>>()?;
    let ln = (b.get(&format!("{prefix}.final_ln.gain"))?, b.get(&format!("{prefix}.final_ln.bias"))?);
    Ok((layers, ln))
}

impl<'t, T: Real> BaseVars<'t, T> {
    pub fn bind(b: &Bindings<'t, T>, cfg: &ModelConfig) -> Result<Self> {
        let (word, word_ln) = bind_stack(b, "base.word", cfg.word_layers)?;
        let (sent, sent_ln) = bind_stack(b, "base.sent", cfg.sentence_layers)?;
        Ok(BaseVars {
            tok_emb: b.get("base.tok_emb")?,
            word_pos: b.get("base.word_pos")?,
            sent_pos: b.get("base.sent_pos")?,
            word,
            word_ln,
            sent,
            sent_ln,
        })
    }
}

/// LSH and dropout randomness for one document, keyed by its id.
pub fn doc_ctx(base: &CallCtx, doc: &Document) -> CallCtx {
    base.child(&doc.meta.doc_id)
}

fn check_doc(doc: &Document, cfg: &ModelConfig) -> Result<()> {
    if doc.is_empty() || doc.len() > cfg.max_sentences {
        return Err(Error::Data(format!(
            "document {} has {} sentences (limit {})",
            doc.meta.doc_id,
            doc.len(),
            cfg.max_sentences
        )));
    }
    if let Some(s) = doc.sentences.iter().find(|s| s.is_empty() || s.len() > cfg.max_words) {
        return Err(Error::Data(format!(
            "document {} has a sentence of {} tokens (limit {})",
            doc.meta.doc_id,
            s.len(),
            cfg.max_words
        )));
    }
    Ok(())
}

/// Contextual sentence embeddings `d_1..d_|D|` (`|D| × d`).
///
/// All sentences go through the word-level stack in one packed call; each
/// sentence is its own attention segment. The first output of each sentence
/// is its embedding.
pub fn base_forward<'t, T: Real>(
    doc: &Document,
    vars: &BaseVars<'t, T>,
    cfg: &ModelConfig,
    ctx: &CallCtx,
) -> Result<Var<'t, T>> {
    check_doc(doc, cfg)?;
    let lens: Vec<usize> = doc.sentences.iter().map(|s| s.len()).collect();
    encode_padded(doc, &lens, doc.len(), vars, cfg, ctx)
}

/// Shared by the single and batched paths: sentence `i` occupies `widths[i]`
/// rows (PAD beyond its length), and the sentence level is padded to
/// `n_slots` positions.
fn encode_padded<'t, T: Real>(
    doc: &Document,
    widths: &[usize],
    n_slots: usize,
    vars: &BaseVars<'t, T>,
    cfg: &ModelConfig,
    ctx: &CallCtx,
) -> Result<Var<'t, T>> {
    let tape = vars.tok_emb.tape();
    let lens: Vec<usize> = doc.sentences.iter().map(|s| s.len()).collect();
    let mut ids = Vec::new();
    let mut pos = Vec::new();
    let mut firsts = Vec::with_capacity(doc.len());
    for (s, &w) in doc.sentences.iter().zip(widths) {
        firsts.push(ids.len());
        ids.extend(s.ids().iter().map(|&t| t as usize));
        ids.extend(std::iter::repeat_n(PAD as usize, w - s.len()));
        pos.extend(0..w);
    }
    let x = vars.tok_emb.embedding(&ids)?.add(vars.word_pos.embedding(&pos)?)?;
    let layout = Layout::padded(&lens, widths);
    let words = reformer_stack(
        x,
        &vars.word,
        vars.word_ln,
        &cfg.word_layer(),
        &layout,
        &ctx.child("word"),
        cfg.backprop,
    )?
    .out;
    let mut e = words.select_rows(&firsts)?;
    if n_slots > doc.len() {
        let pad = tape.constant(Tensor::zeros(&[n_slots - doc.len(), cfg.model_dim]));
        e = concat_rows(&[e, pad])?;
    }
    let slots: Vec<usize> = (0..n_slots).collect();
    let e = e.add(vars.sent_pos.embedding(&slots)?)?;
    let layout = Layout::padded(&[doc.len()], &[n_slots]);
    let out = reformer_stack(
        e,
        &vars.sent,
        vars.sent_ln,
        &cfg.sentence_layer(),
        &layout,
        &ctx.child("sent"),
        cfg.backprop,
    )?
    .out;
    if n_slots > doc.len() {
        out.select_rows(&(0..doc.len()).collect::<Vec<_>>())
    } else {
        Ok(out)
    }
}

/// Padded-batch encoding: sentences padded to the longest sentence in the
/// batch and documents to the largest sentence count, PAD masked throughout.
/// Returns one `|D_b| × d` encoding per document.
pub fn base_forward_batch<'t, T: Real>(
    docs: &[&Document],
    vars: &BaseVars<'t, T>,
    cfg: &ModelConfig,
    ctxs: &[CallCtx],
) -> Result<Vec<Var<'t, T>>> {
    if docs.len() != ctxs.len() {
        return Err(Error::Contract("one call context per document".into()));
    }
    for d in docs {
        check_doc(d, cfg)?;
    }
    let width = docs
        .iter()
        .flat_map(|d| d.sentences.iter().map(|s| s.len()))
        .max()
        .unwrap_or(0);
    let slots = docs.iter().map(|d| d.len()).max().unwrap_or(0);
    docs.iter()
        .zip(ctxs)
        .map(|(d, c)| encode_padded(d, &vec![width; d.len()], slots, vars, cfg, c))
        .collect()
}

/// Configuration plus parameters of a model in one precision.
#[derive(Debug, Clone, PartialEq)]
pub struct HierModel<T: Real> {
    pub cfg: ModelConfig,
    pub params: ParamStore<T>,
}

impl<T: Real> HierModel<T> {
    /// Fresh encoder parameters drawn from `init` stream of `seed`.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamStore::new();
        init_base(&mut params, &cfg, &RngStream::new(seed, "init"));
        Ok(HierModel { cfg, params })
    }

    pub fn with_pretrain_head(mut self, seed: u64) -> Self {
        pretrain::init_pretrain_head(&mut self.params, &self.cfg, &RngStream::new(seed, "init"));
        self
    }

    pub fn with_classifier_head(mut self, seed: u64) -> Self {
        classifier::init_classifier_head(&mut self.params, &self.cfg, &RngStream::new(seed, "init"));
        self
    }

    pub fn has_classifier(&self) -> bool {
        self.params.contains("cls.mlp.w1")
    }

    /// Inference-mode probability of an up move.
    pub fn predict(&self, doc: &Document, ccfg: &ClassifierConfig, lsh_seed: u64) -> Result<f64> {
        Ok(self.classify(doc, ccfg, lsh_seed)?.prob)
    }

    /// Inference-mode classifier pass with the pooling layer's internals.
    pub fn classify(&self, doc: &Document, ccfg: &ClassifierConfig, lsh_seed: u64) -> Result<classifier::Trace<T>> {
        let tape = Tape::new();
        let b = self.params.bind(&tape, |_| false);
        let base = BaseVars::bind(&b, &self.cfg)?;
        let head = ClassifierVars::bind(&b)?;
        let ctx = doc_ctx(&CallCtx::eval(lsh_seed), doc);
        let enc = base_forward(doc, &base, &self.cfg, &ctx)?;
        let out = classifier_forward(enc, &head, &self.cfg, ccfg, &ctx)?;
        Ok(classifier::Trace::capture(&out, &head))
    }
}
