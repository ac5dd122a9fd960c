//! Reversible residual stacks.
//!
//! Each layer maps `(x1, x2)` to `y1 = x1 + F(x2)`, `y2 = x2 + G(y1)`, with `F`
//! the attention sublayer and `G` the feed-forward sublayer. In
//! [`Backprop::Reversible`] mode the whole stack is a single tape node that
//! keeps only its final streams and the per-layer LSH buckets; the backward
//! pass rebuilds each layer's inputs from its outputs and differentiates the
//! layer locally.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::attention::AttentionProbs;
use super::layer::{attention_sublayer, ffn_sublayer, LayerValues, LayerVars};
use super::lsh::BucketAssignment;
use super::{AttentionKind, CallCtx, LayerConfig, Layout};
use crate::error::{Error, Result};
use crate::numerics::{Real, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backprop {
    /// Recompute activations from layer outputs during backward.
    #[default]
    Reversible,
    /// Keep every activation on the tape (reference path).
    Stored,
}

/// What a layer must remember for its inputs to be rebuilt exactly.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LayerCache {
    /// `[segment][head]`; empty for dense attention.
    pub buckets: Vec<Vec<BucketAssignment>>,
}

pub struct StackOutput<'t, T: Real> {
    pub out: Var<'t, T>,
    pub caches: Vec<LayerCache>,
    /// Attention weights of every layer, in order.
    pub probs: Vec<Arc<AttentionProbs<T>>>,
}

/// `y1 = x1 + f(x2)`, `y2 = x2 + g(y1)`.
pub fn reversible_forward<T, F, G>(x1: &Tensor<T>, x2: &Tensor<T>, f: F, g: G) -> Result<(Tensor<T>, Tensor<T>)>
where
    T: Real,
    F: Fn(&Tensor<T>) -> Result<Tensor<T>>,
    G: Fn(&Tensor<T>) -> Result<Tensor<T>>,
{
    let y1 = x1.zip_map(&f(x2)?, |a, b| a + b)?;
    let y2 = x2.zip_map(&g(&y1)?, |a, b| a + b)?;
    Ok((y1, y2))
}

/// `x2 = y2 - g(y1)`, `x1 = y1 - f(x2)`.
pub fn reversible_inverse<T, F, G>(y1: &Tensor<T>, y2: &Tensor<T>, f: F, g: G) -> Result<(Tensor<T>, Tensor<T>)>
where
    T: Real,
    F: Fn(&Tensor<T>) -> Result<Tensor<T>>,
    G: Fn(&Tensor<T>) -> Result<Tensor<T>>,
{
    let x2 = y2.zip_map(&g(y1)?, |a, b| a - b)?;
    let x1 = y1.zip_map(&f(&x2)?, |a, b| a - b)?;
    Ok((x1, x2))
}

fn layer_ctx(ctx: &CallCtx, l: usize) -> CallCtx {
    ctx.child(format!("layer{l}"))
}

fn check_cache(cfg: &LayerConfig, layout: &Layout, cache: Option<&LayerCache>, layer: usize) -> Result<()> {
    let ok = match (cfg.attention.kind, cache) {
        (AttentionKind::Full, _) => true,
        (AttentionKind::Lsh, Some(c)) => {
            c.buckets.len() == layout.segments.len()
                && c.buckets.iter().all(|b| b.len() == cfg.attention.n_heads)
        }
        (AttentionKind::Lsh, None) => false,
    };
    if ok {
        Ok(())
    } else {
        Err(Error::Contract(format!(
            "reversible backward needs cached LSH buckets for layer {layer}"
        )))
    }
}

/// Runs `layers` over `x` and applies the final layer norm to the averaged
/// streams. With no layers this is `layer_norm(x)`.
pub fn reformer_stack<'t, T: Real>(
    x: Var<'t, T>,
    layers: &[LayerVars<'t, T>],
    final_ln: (Var<'t, T>, Var<'t, T>),
    cfg: &LayerConfig,
    layout: &Layout,
    ctx: &CallCtx,
    mode: Backprop,
) -> Result<StackOutput<'t, T>> {
    let (merged, caches, probs) = match mode {
        Backprop::Stored => stored_stack(x, layers, cfg, layout, ctx)?,
        Backprop::Reversible => reversible_op(x, layers, cfg, layout, ctx)?,
    };
    let out = merged.layer_norm(final_ln.0, final_ln.1, cfg.ln_eps)?;
    Ok(StackOutput { out, caches, probs })
}

type StackParts<'t, T> = (Var<'t, T>, Vec<LayerCache>, Vec<Arc<AttentionProbs<T>>>);

fn stored_stack<'t, T: Real>(
    x: Var<'t, T>,
    layers: &[LayerVars<'t, T>],
    cfg: &LayerConfig,
    layout: &Layout,
    ctx: &CallCtx,
) -> Result<StackParts<'t, T>> {
    let (mut x1, mut x2) = (x, x);
    let mut caches = Vec::with_capacity(layers.len());
    let mut probs = Vec::with_capacity(layers.len());
    for (l, lv) in layers.iter().enumerate() {
        let lc = layer_ctx(ctx, l);
        let f = attention_sublayer(x2, lv, cfg, layout, &lc, None)?;
        let y1 = x1.add(f.out)?;
        let y2 = x2.add(ffn_sublayer(y1, lv, cfg, &lc)?)?;
        caches.push(LayerCache { buckets: f.buckets });
        probs.push(f.probs);
        (x1, x2) = (y1, y2);
    }
    Ok((x1.add(x2)?.scale(0.5), caches, probs))
}

/// Forward of one layer on plain values. Returns outputs and what was hashed.
fn layer_values<T: Real>(
    x1: &Tensor<T>,
    x2: &Tensor<T>,
    lv: &LayerValues<T>,
    cfg: &LayerConfig,
    layout: &Layout,
    ctx: &CallCtx,
) -> Result<(Tensor<T>, Tensor<T>, LayerCache, Arc<AttentionProbs<T>>)> {
    let tape = Tape::new();
    let vars = LayerVars::on_tape(&tape, lv, &[false; 11]);
    let a = tape.constant(x2.clone());
    let f = attention_sublayer(a, &vars, cfg, layout, ctx, None)?;
    let y1 = x1.zip_map(&f.out.value(), |p, q| p + q)?;
    let g = ffn_sublayer(tape.constant(y1.clone()), &vars, cfg, ctx)?;
    let y2 = x2.zip_map(&g.value(), |p, q| p + q)?;
    Ok((y1, y2, LayerCache { buckets: f.buckets }, f.probs))
}

fn reversible_op<'t, T: Real>(
    x: Var<'t, T>,
    layers: &[LayerVars<'t, T>],
    cfg: &LayerConfig,
    layout: &Layout,
    ctx: &CallCtx,
) -> Result<StackParts<'t, T>> {
    let xv = x.value();
    let values: Vec<LayerValues<T>> = layers.iter().map(|l| l.values()).collect();
    let (mut y1, mut y2) = ((*xv).clone(), (*xv).clone());
    let mut caches = Vec::with_capacity(layers.len());
    let mut probs = Vec::with_capacity(layers.len());
    for (l, lv) in values.iter().enumerate() {
        let (a, b, cache, p) = layer_values(&y1, &y2, lv, cfg, layout, &layer_ctx(ctx, l))?;
        (y1, y2) = (a, b);
        caches.push(cache);
        probs.push(p);
    }
    let merged = y1.zip_map(&y2, |a, b| a + b)?.map(|v| v * T::of(0.5));

    let mut parents = vec![x];
    parents.extend(layers.iter().flat_map(|l| l.all()));
    let trainable: Vec<[bool; 11]> = layers
        .iter()
        .map(|l| l.all().map(|v| v.requires_grad()))
        .collect();
    let (cfg, layout, ctx, saved) = (cfg.clone(), layout.clone(), ctx.clone(), caches.clone());
    let out = x.tape().record(merged, &parents, move |g| {
        let half = g.map(|v| v * T::of(0.5));
        let (dx1, dx2, dparams) = reversible_backward(
            &y1, &y2, &half, &half, &values, &trainable, &cfg, &layout, &ctx, &saved,
        )
        .expect("reversible backward with forward-time caches");
        let mut grads = Vec::with_capacity(1 + 11 * values.len());
        grads.push(Some(dx1.zip_map(&dx2, |a, b| a + b).expect("stream shapes")));
        grads.extend(dparams.into_iter().flatten());
        grads
    });
    Ok((out, caches, probs))
}

/// Inputs gradients `(dx1, dx2)` and per-layer parameter gradients of a
/// reversible stack, given its final streams and their gradients. Layer
/// inputs are rebuilt from outputs; nothing else from the forward is used
/// except `caches`.
#[allow(clippy::too_many_arguments)]
pub fn reversible_backward<T: Real>(
    y1: &Tensor<T>,
    y2: &Tensor<T>,
    dy1: &Tensor<T>,
    dy2: &Tensor<T>,
    layers: &[LayerValues<T>],
    trainable: &[[bool; 11]],
    cfg: &LayerConfig,
    layout: &Layout,
    ctx: &CallCtx,
    caches: &[LayerCache],
) -> Result<(Tensor<T>, Tensor<T>, Vec<[Option<Tensor<T>>; 11]>)> {
    for l in 0..layers.len() {
        check_cache(cfg, layout, caches.get(l), l)?;
    }
    let (mut y1, mut y2) = (y1.clone(), y2.clone());
    let (mut dy1, mut dy2) = (dy1.clone(), dy2.clone());
    let mut dparams: Vec<[Option<Tensor<T>>; 11]> = Vec::with_capacity(layers.len());
    for l in (0..layers.len()).rev() {
        let lc = layer_ctx(ctx, l);
        let cache = &caches[l].buckets;
        let cached = (cfg.attention.kind == AttentionKind::Lsh).then_some(cache.as_slice());
        let flags = trainable.get(l).copied().unwrap_or([true; 11]);

        // G: x2 = y2 - G(y1); dz1 = dy1 + dG/dy1^T dy2
        let tape = Tape::new();
        let vars = LayerVars::on_tape(&tape, &layers[l], &flags);
        let z1 = tape.leaf(y1.clone(), true);
        let gout = ffn_sublayer(z1, &vars, cfg, &lc)?;
        let x2 = y2.zip_map(&gout.value(), |a, b| a - b)?;
        let grads = tape.backward_with(gout, dy2.clone())?;
        let mut dz1 = dy1.clone();
        dz1.add_assign(&grads.get_or_zeros(z1));
        let dg: Vec<Option<Tensor<T>>> = vars.all().iter().map(|v| grads.get(*v).cloned()).collect();

        // F: x1 = z1 - F(x2); dx2 = dy2 + dF/dx2^T dz1
        let tape = Tape::new();
        let vars = LayerVars::on_tape(&tape, &layers[l], &flags);
        let a = tape.leaf(x2.clone(), true);
        let fout = attention_sublayer(a, &vars, cfg, layout, &lc, cached)?.out;
        let x1 = y1.zip_map(&fout.value(), |p, q| p - q)?;
        let grads = tape.backward_with(fout, dz1.clone())?;
        let mut dx2 = dy2.clone();
        dx2.add_assign(&grads.get_or_zeros(a));

        let mut dp: [Option<Tensor<T>>; 11] = Default::default();
        for (i, v) in vars.all().iter().enumerate() {
            dp[i] = match (grads.get(*v), &dg[i]) {
                (Some(a), Some(b)) => {
                    let mut s = a.clone();
                    s.add_assign(b);
                    Some(s)
                }
                (Some(a), None) => Some(a.clone()),
                (None, b) => b.clone(),
            };
        }
        dparams.push(dp);
        (y1, y2, dy1, dy2) = (x1, x2, dz1, dx2);
    }
    dparams.reverse();
    Ok((dy1, dy2, dparams))
}
