//! Masked-sentence pretraining: whole sentences are replaced by MASK in the
//! encoder input and regenerated token by token from their contextual
//! sentence embedding.

use std::ops::Range;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use super::{base_forward, bind_stack, BaseVars, ModelConfig};
use crate::error::{Error, Result};
use crate::numerics::{Bindings, ParamStore, Real, RngStream, Var};
use crate::reformer::{init_stack, reformer_stack, Backprop, CallCtx, LayerVars, Layout};
use crate::textpipe::{Document, TokenizedSentence, BOS, EOS, MASK};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub mask_ratio: f64,
    /// Keep BOS/EOS in masked sentences instead of masking every position.
    pub keep_boundaries: bool,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            mask_ratio: 0.15,
            keep_boundaries: false,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.mask_ratio > 0.0 && self.mask_ratio <= 1.0) {
            return Err(Error::Config(format!("mask_ratio {} outside (0, 1]", self.mask_ratio)));
        }
        Ok(())
    }
}

/// Masked sentence indices (ascending) and their original ids.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskSet {
    pub indices: Vec<usize>,
    pub originals: Vec<TokenizedSentence>,
}

impl MaskSet {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn original(&self, sentence: usize) -> Option<&TokenizedSentence> {
        self.indices
            .iter()
            .position(|&i| i == sentence)
            .map(|k| &self.originals[k])
    }
}

/// Picks `max(1, round(ratio·|D|))` sentences uniformly without replacement
/// and replaces their tokens with MASK.
pub fn mask_sentences(
    doc: &Document,
    cfg: &PretrainConfig,
    rng: &RngStream,
) -> Result<(Document, MaskSet)> {
    cfg.validate()?;
    let n = doc.len();
    if n == 0 {
        return Err(Error::Data("cannot mask an empty document".into()));
    }
    let k = ((cfg.mask_ratio * n as f64).round() as usize).clamp(1, n);
    let mut indices = sample(&mut rng.rng(), n, k).into_vec();
    indices.sort_unstable();
    let mut masked = doc.clone();
    let mut originals = Vec::with_capacity(k);
    for &i in &indices {
        let orig = doc.sentences[i].clone();
        let ids: Vec<u32> = orig
            .ids()
            .iter()
            .map(|&t| {
                if cfg.keep_boundaries && (t == BOS || t == EOS) {
                    t
                } else {
                    MASK
                }
            })
            .collect();
        masked.sentences[i] = TokenizedSentence::raw(ids);
        originals.push(orig);
    }
    Ok((masked, MaskSet { indices, originals }))
}

pub fn init_pretrain_head<T: Real>(store: &mut ParamStore<T>, cfg: &ModelConfig, rng: &RngStream) {
    let (d, s) = (cfg.model_dim, cfg.init_std);
    store.init_normal("pretrain.dec_pos", &[cfg.max_words, d], s, rng);
    init_stack(store, "pretrain.dec", 1, &cfg.decoder_layer(), s, rng);
    // stored transposed (d × vocab) so logits are a plain product
    store.init_normal("pretrain.w_ff", &[d, cfg.vocab_size], s, rng);
    store.init_const("pretrain.b_ff", &[cfg.vocab_size], 0.0);
}

pub struct PretrainVars<'t, T: Real> {
    pub dec_pos: Var<'t, T>,
    pub layer: Vec<LayerVars<'t, T>>,
    pub ln: (Var<'t, T>, Var<'t, T>),
    pub w_ff: Var<'t, T>,
    pub b_ff: Var<'t, T>,
}

impl<'t, T: Real> PretrainVars<'t, T> {
    pub fn bind(b: &Bindings<'t, T>) -> Result<Self> {
        let (layer, ln) = bind_stack(b, "pretrain.dec", 1)?;
        Ok(PretrainVars {
            dec_pos: b.get("pretrain.dec_pos")?,
            layer,
            ln,
            w_ff: b.get("pretrain.w_ff")?,
            b_ff: b.get("pretrain.b_ff")?,
        })
    }
}

pub struct DecoderOutput<'t, T: Real> {
    /// Stacked `(|S_i| - 1) × vocab` logits of every decoded sentence.
    pub logits: Var<'t, T>,
    /// Logit rows belonging to each decoded sentence.
    pub rows: Vec<Range<usize>>,
    /// Next-token targets, aligned with the logit rows.
    pub targets: Vec<usize>,
}

/// Teacher-forced decoding of the masked sentences `which`. Position `j`
/// consumes the true token `t^{j-1}` plus the sentence's contextual embedding
/// and a decoder position embedding, and predicts `t^j`.
pub fn decoder_forward<'t, T: Real>(
    masks: &MaskSet,
    which: &[usize],
    enc: Var<'t, T>,
    tok_emb: Var<'t, T>,
    head: &PretrainVars<'t, T>,
    cfg: &ModelConfig,
    ctx: &CallCtx,
) -> Result<DecoderOutput<'t, T>> {
    let mut inputs = Vec::new();
    let mut pos = Vec::new();
    let mut ctx_rows = Vec::new();
    let mut targets = Vec::new();
    let mut rows = Vec::with_capacity(which.len());
    let mut lens = Vec::with_capacity(which.len());
    for &i in which {
        let orig = masks
            .original(i)
            .ok_or_else(|| Error::Contract(format!("sentence {i} is not masked")))?;
        let ids = orig.ids();
        if ids.len() < 2 {
            return Err(Error::Data(format!("masked sentence {i} has fewer than 2 tokens")));
        }
        let m = ids.len() - 1;
        rows.push(targets.len()..targets.len() + m);
        lens.push(m);
        inputs.extend(ids[..m].iter().map(|&t| t as usize));
        targets.extend(ids[1..].iter().map(|&t| t as usize));
        pos.extend(0..m);
        ctx_rows.extend(std::iter::repeat_n(i, m));
    }
    if which.is_empty() {
        return Err(Error::Contract("nothing to decode".into()));
    }
    let x = tok_emb
        .embedding(&inputs)?
        .add(enc.select_rows(&ctx_rows)?)?
        .add(head.dec_pos.embedding(&pos)?)?;
    let h = reformer_stack(
        x,
        &head.layer,
        head.ln,
        &cfg.decoder_layer(),
        &Layout::packed(&lens),
        &ctx.child("dec"),
        Backprop::Stored,
    )?
    .out;
    let logits = h.matmul(head.w_ff)?.add_bias(head.b_ff)?;
    Ok(DecoderOutput {
        logits,
        rows,
        targets,
    })
}

/// `-(1/|M|) Σ_{i∈M} Σ_j log p(t_i^j | t_i^{<j}, d_i)`, summing over the
/// predicted positions `2..|S_i|` of each masked sentence.
pub fn pretrain_loss<'t, T: Real>(
    doc: &Document,
    base: &BaseVars<'t, T>,
    head: &PretrainVars<'t, T>,
    cfg: &ModelConfig,
    pcfg: &PretrainConfig,
    mask_rng: &RngStream,
    ctx: &CallCtx,
) -> Result<Var<'t, T>> {
    let (masked, masks) = mask_sentences(doc, pcfg, mask_rng)?;
    let enc = base_forward(&masked, base, cfg, ctx)?;
    let out = decoder_forward(&masks, &masks.indices, enc, base.tok_emb, head, cfg, ctx)?;
    let n_pred = out.targets.len() as f64;
    Ok(out
        .logits
        .cross_entropy(&out.targets)?
        .scale(n_pred / masks.len() as f64))
}
