use std::sync::Arc;

use super::attention::{attend, AttentionProbs, Candidates};
use super::lsh::{full_candidates, lsh_bucket, lsh_candidates, BucketAssignment};
use super::{AttentionKind, CallCtx, LayerConfig, Layout};
use crate::error::{Error, Result};
use crate::numerics::rng::mix;
use crate::numerics::{concat_rows, Bindings, ParamStore, Real, RngStream, Tape, Tensor, Var};

/// Parameter names of one layer, in the order used by [`LayerVars::all`].
pub const LAYER_PARAMS: [&str; 11] = [
    "ln1.gain",
    "ln1.bias",
    "attn.w_qk",
    "attn.w_v",
    "attn.w_o",
    "ln2.gain",
    "ln2.bias",
    "ffn.w1",
    "ffn.b1",
    "ffn.w2",
    "ffn.b2",
];

/// Weights from `normal(0, std)`, biases 0, layer-norm gains 1.
pub fn init_layer<T: Real>(
    store: &mut ParamStore<T>,
    prefix: &str,
    cfg: &LayerConfig,
    std: f64,
    rng: &RngStream,
) {
    let d = cfg.model_dim();
    let ff = cfg.ff_dim;
    let p = |name: &str| format!("{prefix}.{name}");
    store.init_const(&p("ln1.gain"), &[d], 1.0);
    store.init_const(&p("ln1.bias"), &[d], 0.0);
    store.init_normal(&p("attn.w_qk"), &[d, d], std, rng);
    store.init_normal(&p("attn.w_v"), &[d, d], std, rng);
    store.init_normal(&p("attn.w_o"), &[d, d], std, rng);
    store.init_const(&p("ln2.gain"), &[d], 1.0);
    store.init_const(&p("ln2.bias"), &[d], 0.0);
    store.init_normal(&p("ffn.w1"), &[d, ff], std, rng);
    store.init_const(&p("ffn.b1"), &[ff], 0.0);
    store.init_normal(&p("ffn.w2"), &[ff, d], std, rng);
    store.init_const(&p("ffn.b2"), &[d], 0.0);
}

/// `n_layers` layers under `{prefix}.layers.{i}` plus `{prefix}.final_ln`.
pub fn init_stack<T: Real>(
    store: &mut ParamStore<T>,
    prefix: &str,
    n_layers: usize,
    cfg: &LayerConfig,
    std: f64,
    rng: &RngStream,
) {
    for l in 0..n_layers {
        init_layer(store, &format!("{prefix}.layers.{l}"), cfg, std, rng);
    }
    let d = cfg.model_dim();
    store.init_const(&format!("{prefix}.final_ln.gain"), &[d], 1.0);
    store.init_const(&format!("{prefix}.final_ln.bias"), &[d], 0.0);
}

/// Tape handles of one layer's parameters.
#[derive(Clone, Copy, Debug)]
pub struct LayerVars<'t, T: Real> {
    pub ln1_gain: Var<'t, T>,
    pub ln1_bias: Var<'t, T>,
    pub w_qk: Var<'t, T>,
    pub w_v: Var<'t, T>,
    pub w_o: Var<'t, T>,
    pub ln2_gain: Var<'t, T>,
    pub ln2_bias: Var<'t, T>,
    pub w1: Var<'t, T>,
    pub b1: Var<'t, T>,
    pub w2: Var<'t, T>,
    pub b2: Var<'t, T>,
}

/// Plain values of one layer's parameters, ordered like [`LAYER_PARAMS`].
pub type LayerValues<T> = [Arc<Tensor<T>>; 11];

impl<'t, T: Real> LayerVars<'t, T> {
    pub fn bind(b: &Bindings<'t, T>, prefix: &str) -> Result<Self> {
        let v: Vec<Var<'t, T>> = LAYER_PARAMS
            .iter()
            .map(|n| b.get(&format!("{prefix}.{n}")))
            .collect::<Result<_>>()?;
        Ok(Self::from_slice(&v))
    }

    pub fn from_slice(v: &[Var<'t, T>]) -> Self {
        LayerVars {
            ln1_gain: v[0],
            ln1_bias: v[1],
            w_qk: v[2],
            w_v: v[3],
            w_o: v[4],
            ln2_gain: v[5],
            ln2_bias: v[6],
            w1: v[7],
            b1: v[8],
            w2: v[9],
            b2: v[10],
        }
    }

    pub fn all(&self) -> [Var<'t, T>; 11] {
        [
            self.ln1_gain,
            self.ln1_bias,
            self.w_qk,
            self.w_v,
            self.w_o,
            self.ln2_gain,
            self.ln2_bias,
            self.w1,
            self.b1,
            self.w2,
            self.b2,
        ]
    }

    pub fn values(&self) -> LayerValues<T> {
        self.all().map(|v| v.value())
    }

    /// Binds plain values onto `tape`; `trainable` decides which get gradients.
    pub fn on_tape(tape: &'t Tape<T>, values: &LayerValues<T>, trainable: &[bool; 11]) -> Self {
        let vars: Vec<Var<'t, T>> = values
            .iter()
            .zip(trainable)
            .map(|(v, &t)| tape.leaf(v.clone(), t))
            .collect();
        Self::from_slice(&vars)
    }
}

/// Columns of one head from an `n × d` matrix.
pub(crate) fn head_columns<T: Real>(x: &Tensor<T>, head: usize, dh: usize) -> Tensor<T> {
    let (n, d) = x.rows_cols();
    let mut out = Vec::with_capacity(n * dh);
    for i in 0..n {
        out.extend_from_slice(&x.data()[i * d + head * dh..i * d + (head + 1) * dh]);
    }
    Tensor::from_parts(vec![n, dh], out)
}

/// Output of an attention sublayer.
pub struct AttnOut<'t, T: Real> {
    pub out: Var<'t, T>,
    /// Normalized (pre-projection) input, kept for attention-norm analysis.
    pub normed: Var<'t, T>,
    pub qk: Var<'t, T>,
    pub probs: Arc<AttentionProbs<T>>,
    pub candidates: Candidates,
    /// `[segment][head]`; empty for dense attention.
    pub buckets: Vec<Vec<BucketAssignment>>,
}

/// Candidate sets for every head: dense, or LSH (hashing unless `cached`).
/// Cached and returned buckets are indexed `[segment][head]`.
pub fn build_candidates<T: Real>(
    qk: &Tensor<T>,
    cfg: &LayerConfig,
    layout: &Layout,
    ctx: &CallCtx,
    cached: Option<&[Vec<BucketAssignment>]>,
) -> Result<(Candidates, Vec<Vec<BucketAssignment>>)> {
    let a = &cfg.attention;
    let n = layout.len();
    let mut cands: Candidates = vec![vec![Vec::new(); n]; a.n_heads];
    let mut all_buckets = Vec::new();
    if let Some(c) = cached {
        if c.len() != layout.segments.len() || c.iter().any(|b| b.len() != a.n_heads) {
            return Err(Error::Contract("cached buckets do not match the layout".into()));
        }
    }
    for (s, r) in layout.segments.iter().enumerate() {
        let mask = &layout.mask[r.clone()];
        let local: Vec<Vec<Vec<usize>>> = match a.kind {
            AttentionKind::Full => {
                vec![full_candidates(mask, a.causal, a.self_exclusion); a.n_heads]
            }
            AttentionKind::Lsh => {
                let buckets: Vec<BucketAssignment> = match cached {
                    Some(c) => c[s].clone(),
                    None => {
                        let rows = qk.slice_rows(r.start, r.end);
                        let n_valid = mask.iter().filter(|&&m| m).count();
                        let nb = a.buckets_for(n_valid);
                        let stream = ctx.lsh.derive(s);
                        (0..a.n_heads)
                            .map(|h| {
                                let hv = head_columns(&rows, h, a.head_dim());
                                lsh_bucket(&hv, mask, nb, a.n_hash_rounds, &stream.derive(h))
                            })
                            .collect()
                    }
                };
                let local = buckets
                    .iter()
                    .map(|b| lsh_candidates(b, mask, a.bucket_chunk_size, a.causal, a.self_exclusion))
                    .collect();
                all_buckets.push(buckets);
                local
            }
        };
        for (h, per_query) in local.into_iter().enumerate() {
            for (i, keys) in per_query.into_iter().enumerate() {
                cands[h][r.start + i] = keys.into_iter().map(|k| k + r.start).collect();
            }
        }
    }
    Ok((cands, all_buckets))
}

/// `F`: pre-norm shared-QK attention followed by the output projection.
pub fn attention_sublayer<'t, T: Real>(
    x: Var<'t, T>,
    lv: &LayerVars<'t, T>,
    cfg: &LayerConfig,
    layout: &Layout,
    ctx: &CallCtx,
    cached: Option<&[Vec<BucketAssignment>]>,
) -> Result<AttnOut<'t, T>> {
    let n = x.shape()[0];
    if layout.len() != n {
        return Err(Error::shape("attention layout", &x.shape(), &[layout.len()]));
    }
    let normed = x.layer_norm(lv.ln1_gain, lv.ln1_bias, cfg.ln_eps)?;
    let qk = normed.matmul(lv.w_qk)?;
    let v = normed.matmul(lv.w_v)?;
    let (candidates, buckets) = build_candidates(&qk.value(), cfg, layout, ctx, cached)?;
    let rate = ctx.dropout(cfg);
    let (att, probs) = attend(
        qk,
        v,
        cfg.attention.n_heads,
        candidates.clone(),
        rate,
        mix(ctx.dropout_key, 1),
    )?;
    let out = att.matmul(lv.w_o)?.dropout(rate, mix(ctx.dropout_key, 2));
    Ok(AttnOut {
        out,
        normed,
        qk,
        probs,
        candidates,
        buckets,
    })
}

/// `G`: pre-norm chunked feed-forward.
pub fn ffn_sublayer<'t, T: Real>(
    x: Var<'t, T>,
    lv: &LayerVars<'t, T>,
    cfg: &LayerConfig,
    ctx: &CallCtx,
) -> Result<Var<'t, T>> {
    let h = x.layer_norm(lv.ln2_gain, lv.ln2_bias, cfg.ln_eps)?;
    let y = chunked_ffn(h, lv.w1, lv.b1, lv.w2, lv.b2, cfg.ffn_chunk_size)?;
    Ok(y.dropout(ctx.dropout(cfg), mix(ctx.dropout_key, 3)))
}

/// `GELU(x W1 + b1) W2 + b2`, computed `chunk_size` rows at a time.
pub fn chunked_ffn<'t, T: Real>(
    x: Var<'t, T>,
    w1: Var<'t, T>,
    b1: Var<'t, T>,
    w2: Var<'t, T>,
    b2: Var<'t, T>,
    chunk_size: usize,
) -> Result<Var<'t, T>> {
    if chunk_size == 0 {
        return Err(Error::Config("ffn chunk size must be positive".into()));
    }
    let n = x.shape()[0];
    let ffn = |rows: Var<'t, T>| -> Result<Var<'t, T>> {
        rows.matmul(w1)?.add_bias(b1)?.gelu().matmul(w2)?.add_bias(b2)
    };
    if chunk_size >= n {
        return ffn(x);
    }
    let parts = (0..n)
        .step_by(chunk_size)
        .map(|start| {
            let idx: Vec<usize> = (start..(start + chunk_size).min(n)).collect();
            ffn(x.select_rows(&idx)?)
        })
        .collect::<Result<Vec<_>>>()?;
    concat_rows(&parts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::ops::gelu_scalar;
    use rand_distr::{Distribution, StandardNormal};

    fn random(shape: &[usize], seed: u64, scale: f64) -> Tensor<f64> {
        let mut r = RngStream::new(seed, "t").rng();
        let n = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            (0..n).map(|_| { let z: f64 = StandardNormal.sample(&mut r); scale * z }).collect::<Vec<f64>>(),
        )
        .unwrap()
    }

    fn ffn_params(tape: &Tape<f64>) -> [Var<'_, f64>; 4] {
        [
            tape.constant(random(&[4, 6], 1, 0.5)),
            tape.constant(random(&[6], 2, 0.5)),
            tape.constant(random(&[6, 4], 3, 0.5)),
            tape.constant(random(&[4], 4, 0.5)),
        ]
    }

    #[test]
    fn chunk_size_does_not_change_output_bits() {
        let tape = Tape::new();
        let [w1, b1, w2, b2] = ffn_params(&tape);
        let x = tape.constant(random(&[7, 4], 5, 1.0));
        let whole = chunked_ffn(x, w1, b1, w2, b2, 7).unwrap().value();
        for chunk in [1, 2, 3, 100] {
            let part = chunked_ffn(x, w1, b1, w2, b2, chunk).unwrap().value();
            assert_eq!(*part, *whole, "chunk {chunk}");
        }
    }

    #[test]
    fn zero_input_gives_bias_path() {
        let tape = Tape::new();
        let [w1, b1, w2, b2] = ffn_params(&tape);
        let x = tape.constant(Tensor::zeros(&[3, 4]));
        let out = chunked_ffn(x, w1, b1, w2, b2, 2).unwrap().value();
        let hidden = b1.value().map(gelu_scalar);
        let expect = hidden
            .reshape(&[1, 6])
            .unwrap()
            .matmul(&w2.value())
            .unwrap();
        for r in 0..3 {
            for c in 0..4 {
                let e = expect.data()[c] + b2.value().data()[c];
                assert!((out.row(r)[c] - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matches_unchunked_reference() {
        let tape = Tape::new();
        let [w1, b1, w2, b2] = ffn_params(&tape);
        let xv = random(&[5, 4], 6, 1.0);
        let out = chunked_ffn(tape.constant(xv.clone()), w1, b1, w2, b2, 2).unwrap().value();
        // reference: explicit per-row loops
        for r in 0..5 {
            let mut h = vec![0.0; 6];
            for j in 0..6 {
                let mut acc = b1.value().data()[j];
                for k in 0..4 {
                    acc += xv.row(r)[k] * w1.value().data()[k * 6 + j];
                }
                h[j] = gelu_scalar(acc);
            }
            for c in 0..4 {
                let mut acc = b2.value().data()[c];
                for j in 0..6 {
                    acc += h[j] * w2.value().data()[j * 4 + c];
                }
                assert!((out.row(r)[c] - acc).abs() < 1e-12);
            }
        }
    }
}
