//! Volume-direction classifier: one dense-attention Reformer layer over the
//! sentence encodings, then a two-layer MLP on the first position.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{BaseVars, ModelConfig};
use crate::error::{Error, Result};
use crate::numerics::{Bindings, ParamStore, Real, RngStream, Tensor, Var};
use crate::reformer::layer::{attention_sublayer, ffn_sublayer, init_layer};
use crate::reformer::{query_scores, query_weights, CallCtx, LayerVars, Layout};

/// What the l1 sparsity term is applied to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum L1Target {
    /// Softmax weights, as the loss is written. Constant per row, so it adds
    /// no gradient.
    Weights,
    /// Pre-softmax scores.
    Scores,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum L1Queries {
    /// Only the pooled (first) position's row.
    First,
    /// Every query row of the pooling layer.
    All,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierConfig {
    pub l1_lambda: f64,
    pub l1_target: L1Target,
    pub l1_queries: L1Queries,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            l1_lambda: 0.1,
            l1_target: L1Target::Weights,
            l1_queries: L1Queries::First,
        }
    }
}

pub fn init_classifier_head<T: Real>(store: &mut ParamStore<T>, cfg: &ModelConfig, rng: &RngStream) {
    let (d, s) = (cfg.model_dim, cfg.init_std);
    init_layer(store, "cls.pool", &cfg.pooling_layer(), s, rng);
    store.init_const("cls.pool_ln.gain", &[d], 1.0);
    store.init_const("cls.pool_ln.bias", &[d], 0.0);
    store.init_normal("cls.mlp.w1", &[d, d], s, rng);
    store.init_const("cls.mlp.b1", &[d], 0.0);
    store.init_normal("cls.mlp.w2", &[d, 1], s, rng);
    store.init_const("cls.mlp.b2", &[1], 0.0);
}

pub struct ClassifierVars<'t, T: Real> {
    pub pool: LayerVars<'t, T>,
    pub pool_ln: (Var<'t, T>, Var<'t, T>),
    pub w1: Var<'t, T>,
    pub b1: Var<'t, T>,
    pub w2: Var<'t, T>,
    pub b2: Var<'t, T>,
}

impl<'t, T: Real> ClassifierVars<'t, T> {
    pub fn bind(b: &Bindings<'t, T>) -> Result<Self> {
        Ok(ClassifierVars {
            pool: LayerVars::bind(b, "cls.pool")?,
            pool_ln: (b.get("cls.pool_ln.gain")?, b.get("cls.pool_ln.bias")?),
            w1: b.get("cls.mlp.w1")?,
            b1: b.get("cls.mlp.b1")?,
            w2: b.get("cls.mlp.w2")?,
            b2: b.get("cls.mlp.b2")?,
        })
    }
}

pub struct ClassifierOutput<'t, T: Real> {
    /// `sigmoid(MLP(z_1))`, shape `1 × 1`.
    pub prob: Var<'t, T>,
    /// Latent sentence representations `z_1..z_|D|`.
    pub z: Var<'t, T>,
    /// Pooling attention of the first position, `n_heads × |D|`.
    pub alpha: Var<'t, T>,
    /// The quantity the l1 term sums over.
    pub l1_source: Var<'t, T>,
    /// Layer-normed pooling input (what the value projection sees).
    pub normed: Var<'t, T>,
    pub probs: Arc<crate::reformer::AttentionProbs<T>>,
    pub l1_lambda: f64,
}

/// Pools the sentence encodings `enc` (`|D| × d`) into `P(up)`.
pub fn classifier_forward<'t, T: Real>(
    enc: Var<'t, T>,
    head: &ClassifierVars<'t, T>,
    cfg: &ModelConfig,
    ccfg: &ClassifierConfig,
    ctx: &CallCtx,
) -> Result<ClassifierOutput<'t, T>> {
    let n = enc.shape()[0];
    if ccfg.l1_lambda < 0.0 {
        return Err(Error::Config("l1_lambda must be non-negative".into()));
    }
    let lc = cfg.pooling_layer();
    let ctx = ctx.child("pool");
    let layout = Layout::all_valid(n);
    let f = attention_sublayer(enc, &head.pool, &lc, &layout, &ctx, None)?;
    let heads = lc.attention.n_heads;
    let alpha = query_weights(f.qk, heads, 0, &f.candidates)?;
    let y1 = enc.add(f.out)?;
    let y2 = enc.add(ffn_sublayer(y1, &head.pool, &lc, &ctx)?)?;
    let z = y1.add(y2)?.scale(0.5).layer_norm(head.pool_ln.0, head.pool_ln.1, lc.ln_eps)?;
    let prob = z
        .select_rows(&[0])?
        .matmul(head.w1)?
        .add_bias(head.b1)?
        .gelu()
        .matmul(head.w2)?
        .add_bias(head.b2)?
        .sigmoid();
    let row = |q: usize| match ccfg.l1_target {
        L1Target::Weights if q == 0 => Ok(alpha),
        L1Target::Weights => query_weights(f.qk, heads, q, &f.candidates),
        L1Target::Scores => query_scores(f.qk, heads, q, &f.candidates),
    };
    let l1_source = match ccfg.l1_queries {
        L1Queries::First => row(0)?,
        L1Queries::All => {
            let rows = (0..n).map(row).collect::<Result<Vec<_>>>()?;
            crate::numerics::concat_rows(&rows)?
        }
    };
    Ok(ClassifierOutput {
        prob,
        z,
        alpha,
        l1_source,
        normed: f.normed,
        probs: f.probs,
        l1_lambda: ccfg.l1_lambda,
    })
}

/// `BCE(Ŷ, Y) + λ Σ |α|`.
pub fn classification_loss<'t, T: Real>(out: &ClassifierOutput<'t, T>, label: u8) -> Result<Var<'t, T>> {
    bce_l1(out.prob, out.l1_source, label, out.l1_lambda)
}

pub fn bce_l1<'t, T: Real>(prob: Var<'t, T>, l1: Var<'t, T>, label: u8, lambda: f64) -> Result<Var<'t, T>> {
    let bce = prob.binary_cross_entropy(label)?;
    if lambda == 0.0 {
        return Ok(bce);
    }
    bce.add(l1.abs().sum().scale(lambda))
}

/// Plain values from one classifier pass, for analysis.
#[derive(Debug, Clone)]
pub struct Trace<T: Real> {
    pub prob: f64,
    /// `n_heads × |D|`.
    pub alpha: Tensor<T>,
    pub normed: Tensor<T>,
    pub w_v: Tensor<T>,
    pub w_o: Tensor<T>,
    pub n_heads: usize,
}

impl<T: Real> Trace<T> {
    pub fn capture(out: &ClassifierOutput<'_, T>, head: &ClassifierVars<'_, T>) -> Self {
        Trace {
            prob: out.prob.value().item().f64(),
            alpha: out.alpha.value().as_ref().clone(),
            normed: out.normed.value().as_ref().clone(),
            w_v: head.pool.w_v.value().as_ref().clone(),
            w_o: head.pool.w_o.value().as_ref().clone(),
            n_heads: out.probs.n_heads,
        }
    }
}

/// Full classification loss of one labeled document.
pub fn document_loss<'t, T: Real>(
    doc: &crate::textpipe::Document,
    label: u8,
    base: &BaseVars<'t, T>,
    head: &ClassifierVars<'t, T>,
    cfg: &ModelConfig,
    ccfg: &ClassifierConfig,
    ctx: &CallCtx,
) -> Result<(Var<'t, T>, Var<'t, T>)> {
    let enc = super::base_forward(doc, base, cfg, ctx)?;
    let out = classifier_forward(enc, head, cfg, ccfg, ctx)?;
    Ok((classification_loss(&out, label)?, out.prob))
}
