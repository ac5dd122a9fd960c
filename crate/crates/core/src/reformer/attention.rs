//! Shared-QK multi-head attention over explicit key candidate sets.
//!
//! Keys are the shared query/key vectors normalized to unit length; queries
//! stay unnormalized. Scores are `q · k̂ / sqrt(head_dim)`. Dense attention and
//! LSH attention differ only in the candidate sets handed to [`attend`].

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::numerics::ops::{softmax_in_place};
use crate::numerics::rng::{counter_uniform, mix};
use crate::numerics::tensor::{dot, Real, Tensor};
use crate::numerics::Var;

const KEY_NORM_EPS: f64 = 1e-12;

/// Candidate keys per head, per query.
pub type Candidates = Vec<Vec<Vec<usize>>>;

/// Softmax weights actually used by an attention call.
#[derive(Debug, Clone)]
pub struct AttentionProbs<T> {
    pub n: usize,
    pub n_heads: usize,
    pub candidates: Candidates,
    /// `[head][query][candidate]`, before dropout.
    pub probs: Vec<Vec<Vec<T>>>,
}

impl<T: Real> AttentionProbs<T> {
    /// Dense weights of one query over all positions (duplicates summed).
    pub fn row(&self, head: usize, query: usize) -> Vec<T> {
        let mut out = vec![T::zero(); self.n];
        for (&c, &p) in self.candidates[head][query].iter().zip(&self.probs[head][query]) {
            out[c] += p;
        }
        out
    }

    /// Dense `n × n` weight matrix for one head.
    pub fn dense(&self, head: usize) -> Tensor<T> {
        let mut data = Vec::with_capacity(self.n * self.n);
        for q in 0..self.n {
            data.extend(self.row(head, q));
        }
        Tensor::from_parts(vec![self.n, self.n], data)
    }
}

struct Geometry {
    n: usize,
    d: usize,
    heads: usize,
    dh: usize,
}

impl Geometry {
    fn new(shape: &[usize], heads: usize) -> Result<Self> {
        if shape.len() != 2 || heads == 0 || shape[1] % heads != 0 {
            return Err(Error::Config(format!(
                "model dim of {shape:?} not divisible by {heads} heads"
            )));
        }
        Ok(Geometry {
            n: shape[0],
            d: shape[1],
            heads,
            dh: shape[1] / heads,
        })
    }

    #[inline]
    fn slice<'a, T>(&self, data: &'a [T], pos: usize, head: usize) -> &'a [T] {
        let start = pos * self.d + head * self.dh;
        &data[start..start + self.dh]
    }

    fn scale(&self) -> f64 {
        1.0 / (self.dh as f64).sqrt()
    }
}

/// `1 / ||k||` per head and position.
fn inverse_key_norms<T: Real>(qk: &[T], g: &Geometry) -> Vec<Vec<T>> {
    (0..g.heads)
        .map(|h| {
            (0..g.n)
                .map(|j| {
                    let k = g.slice(qk, j, h);
                    T::one() / (dot(k, k) + T::of(KEY_NORM_EPS)).sqrt()
                })
                .collect()
        })
        .collect()
}

fn scores<T: Real>(
    qk: &[T],
    g: &Geometry,
    inv_norm: &[T],
    head: usize,
    query: usize,
    cands: &[usize],
) -> Vec<T> {
    let q = g.slice(qk, query, head);
    let scale = T::of(g.scale());
    cands
        .iter()
        .map(|&c| dot(q, g.slice(qk, c, head)) * inv_norm[c] * scale)
        .collect()
}

/// Backpropagates score gradients `ds` of one (head, query) into `dq`
/// (direct) and `dkhat` (through the unit-normalized keys).
#[allow(clippy::too_many_arguments)]
fn score_backward<T: Real>(
    qk: &[T],
    g: &Geometry,
    inv_norm: &[T],
    head: usize,
    query: usize,
    cands: &[usize],
    ds: &[T],
    dq: &mut [T],
    dkhat: &mut [T],
) {
    let scale = T::of(g.scale());
    let q = g.slice(qk, query, head).to_vec();
    let qo = query * g.d + head * g.dh;
    for (&c, &dsc) in cands.iter().zip(ds) {
        if dsc == T::zero() {
            continue;
        }
        let k = g.slice(qk, c, head);
        let w = dsc * scale;
        let kscale = w * inv_norm[c];
        for a in 0..g.dh {
            dq[qo + a] += kscale * k[a];
        }
        let ko = c * g.d + head * g.dh;
        for a in 0..g.dh {
            dkhat[ko + a] += w * q[a];
        }
    }
}

/// Converts gradients w.r.t. unit keys into gradients w.r.t. raw keys and adds
/// them to `dqk`.
fn finish_key_grads<T: Real>(qk: &[T], g: &Geometry, inv_norm: &[Vec<T>], dkhat: &[T], dqk: &mut [T]) {
    for h in 0..g.heads {
        for j in 0..g.n {
            let o = j * g.d + h * g.dh;
            let k = &qk[o..o + g.dh];
            let dk = &dkhat[o..o + g.dh];
            let inv = inv_norm[h][j];
            let kd = dot(k, dk);
            if kd == T::zero() && dk.iter().all(|&x| x == T::zero()) {
                continue;
            }
            let inv3 = inv * inv * inv;
            for a in 0..g.dh {
                dqk[o + a] += dk[a] * inv - k[a] * kd * inv3;
            }
        }
    }
}

fn dropout_key(key: u64, head: usize, query: usize) -> u64 {
    mix(key, ((head as u64) << 32) | query as u64)
}

/// Multi-head attention of `qk` (shared queries/keys) over values `v`, each
/// query restricted to its candidate keys. Queries with no candidates output
/// zero. `dropout` is applied to the weights (inverted scaling).
pub fn attend<'t, T: Real>(
    qk: Var<'t, T>,
    v: Var<'t, T>,
    n_heads: usize,
    candidates: Candidates,
    dropout: f64,
    key: u64,
) -> Result<(Var<'t, T>, Arc<AttentionProbs<T>>)> {
    let (qkv, vv) = (qk.value(), v.value());
    let g = Geometry::new(qkv.shape(), n_heads)?;
    if vv.shape() != qkv.shape() {
        return Err(Error::shape("attend", qkv.shape(), vv.shape()));
    }
    if candidates.len() != n_heads || candidates.iter().any(|c| c.len() != g.n) {
        return Err(Error::Contract("candidate sets must be [head][query]".into()));
    }
    let inv_norm = inverse_key_norms(qkv.data(), &g);
    let keep = T::of(1.0 / (1.0 - dropout));
    let mut out = vec![T::zero(); g.n * g.d];
    let mut probs = Vec::with_capacity(n_heads);
    let mut masks: Vec<Vec<Vec<T>>> = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let mut hp = Vec::with_capacity(g.n);
        let mut hm = Vec::with_capacity(g.n);
        for i in 0..g.n {
            let cands = &candidates[h][i];
            let mut p = scores(qkv.data(), &g, &inv_norm[h], h, i, cands);
            if !p.is_empty() {
                softmax_in_place(&mut p);
            }
            let m: Vec<T> = if dropout > 0.0 {
                let dk = dropout_key(key, h, i);
                (0..cands.len())
                    .map(|c| if counter_uniform(dk, c as u64) < dropout { T::zero() } else { keep })
                    .collect()
            } else {
                Vec::new()
            };
            let o = i * g.d + h * g.dh;
            for (ci, &c) in cands.iter().enumerate() {
                let w = if m.is_empty() { p[ci] } else { p[ci] * m[ci] };
                let vs = g.slice(vv.data(), c, h);
                for a in 0..g.dh {
                    out[o + a] += w * vs[a];
                }
            }
            hp.push(p);
            hm.push(m);
        }
        probs.push(hp);
        masks.push(hm);
    }
    let weights = Arc::new(AttentionProbs {
        n: g.n,
        n_heads,
        candidates,
        probs,
    });
    let saved = weights.clone();
    let shape = qkv.shape().to_vec();
    let var = qk.tape().record(
        Tensor::from_parts(shape.clone(), out),
        &[qk, v],
        move |grad| {
            let gd = grad.data();
            let mut dqk = vec![T::zero(); g.n * g.d];
            let mut dkhat = vec![T::zero(); g.n * g.d];
            let mut dv = vec![T::zero(); g.n * g.d];
            for h in 0..g.heads {
                for i in 0..g.n {
                    let cands = &saved.candidates[h][i];
                    if cands.is_empty() {
                        continue;
                    }
                    let p = &saved.probs[h][i];
                    let m = &masks[h][i];
                    let go = g.slice(gd, i, h);
                    let mut dp = Vec::with_capacity(cands.len());
                    for (ci, &c) in cands.iter().enumerate() {
                        let mc = if m.is_empty() { T::one() } else { m[ci] };
                        dp.push(dot(go, g.slice(vv.data(), c, h)) * mc);
                        let w = p[ci] * mc;
                        let o = c * g.d + h * g.dh;
                        for a in 0..g.dh {
                            dv[o + a] += w * go[a];
                        }
                    }
                    let inner: T = p.iter().zip(&dp).map(|(&a, &b)| a * b).sum();
                    let ds: Vec<T> = p.iter().zip(&dp).map(|(&a, &b)| a * (b - inner)).collect();
                    score_backward(qkv.data(), &g, &inv_norm[h], h, i, cands, &ds, &mut dqk, &mut dkhat);
                }
            }
            finish_key_grads(qkv.data(), &g, &inv_norm, &dkhat, &mut dqk);
            vec![
                Some(Tensor::from_parts(shape.clone(), dqk)),
                Some(Tensor::from_parts(shape.clone(), dv)),
            ]
        },
    );
    Ok((var, weights))
}

/// Differentiable attention weights of one query, `[n_heads × n]`, computed
/// exactly as in [`attend`] (without dropout).
pub fn query_weights<'t, T: Real>(
    qk: Var<'t, T>,
    n_heads: usize,
    query: usize,
    candidates: &Candidates,
) -> Result<Var<'t, T>> {
    query_row_op(qk, n_heads, query, candidates, true)
}

/// Pre-softmax scores of one query, `[n_heads × n]` (zero at non-candidates).
pub fn query_scores<'t, T: Real>(
    qk: Var<'t, T>,
    n_heads: usize,
    query: usize,
    candidates: &Candidates,
) -> Result<Var<'t, T>> {
    query_row_op(qk, n_heads, query, candidates, false)
}

fn query_row_op<'t, T: Real>(
    qk: Var<'t, T>,
    n_heads: usize,
    query: usize,
    candidates: &Candidates,
    normalize: bool,
) -> Result<Var<'t, T>> {
    let qkv = qk.value();
    let g = Geometry::new(qkv.shape(), n_heads)?;
    if query >= g.n {
        return Err(Error::Index {
            what: "attention query",
            index: query,
            bound: g.n,
        });
    }
    let inv_norm = inverse_key_norms(qkv.data(), &g);
    let cands: Vec<Vec<usize>> = (0..n_heads).map(|h| candidates[h][query].clone()).collect();
    let mut rows = Vec::with_capacity(n_heads);
    let mut out = vec![T::zero(); n_heads * g.n];
    for h in 0..n_heads {
        let mut s = scores(qkv.data(), &g, &inv_norm[h], h, query, &cands[h]);
        if normalize && !s.is_empty() {
            softmax_in_place(&mut s);
        }
        for (&c, &w) in cands[h].iter().zip(&s) {
            out[h * g.n + c] += w;
        }
        rows.push(s);
    }
    let shape = qkv.shape().to_vec();
    Ok(qk.tape().record(
        Tensor::from_parts(vec![n_heads, g.n], out),
        &[qk],
        move |grad| {
            let mut dqk = vec![T::zero(); g.n * g.d];
            let mut dkhat = vec![T::zero(); g.n * g.d];
            for h in 0..g.heads {
                let c = &cands[h];
                let dw: Vec<T> = c.iter().map(|&k| grad.data()[h * g.n + k]).collect();
                let ds: Vec<T> = if normalize {
                    let p = &rows[h];
                    let inner: T = p.iter().zip(&dw).map(|(&a, &b)| a * b).sum();
                    p.iter().zip(&dw).map(|(&a, &b)| a * (b - inner)).collect()
                } else {
                    dw
                };
                score_backward(qkv.data(), &g, &inv_norm[h], h, query, c, &ds, &mut dqk, &mut dkhat);
            }
            finish_key_grads(qkv.data(), &g, &inv_norm, &dkhat, &mut dqk);
            vec![Some(Tensor::from_parts(shape.clone(), dqk))]
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::grad_check;
    use crate::numerics::{RngStream, Tape};
    use crate::reformer::lsh::full_candidates;
    use rand_distr::{Distribution, StandardNormal};

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut r = RngStream::new(seed, "t").rng();
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| StandardNormal.sample(&mut r)).collect()).unwrap()
    }

    fn cands(n: usize, heads: usize, self_ex: bool) -> Candidates {
        vec![full_candidates(&vec![true; n], false, self_ex); heads]
    }

    /// softmax(q k̂ᵀ/√dh) V computed head by head with plain loops.
    fn naive(qk: &Tensor<f64>, v: &Tensor<f64>, heads: usize) -> Tensor<f64> {
        let (n, d) = qk.rows_cols();
        let dh = d / heads;
        let mut out = vec![0.0; n * d];
        for h in 0..heads {
            let col = |t: &Tensor<f64>, i: usize| -> Vec<f64> { t.row(i)[h * dh..(h + 1) * dh].to_vec() };
            for i in 0..n {
                let q = col(qk, i);
                let mut s: Vec<(usize, f64)> = Vec::new();
                for j in (0..n).filter(|&j| j != i) {
                    let k = col(qk, j);
                    let kn = k.iter().map(|x| x * x).sum::<f64>().sqrt();
                    s.push((j, q.iter().zip(&k).map(|(a, b)| a * b).sum::<f64>() / kn / (dh as f64).sqrt()));
                }
                let m = s.iter().map(|x| x.1).fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = s.iter().map(|x| (x.1 - m).exp()).sum();
                for (j, sc) in s {
                    let w = (sc - m).exp() / z;
                    let vj = col(v, j);
                    for a in 0..dh {
                        out[i * d + h * dh + a] += w * vj[a];
                    }
                }
            }
        }
        Tensor::new(vec![n, d], out).unwrap()
    }

    #[test]
    fn matches_naive_reference() {
        let qk = random(&[4, 8], 1);
        let v = random(&[4, 8], 2);
        let tape = Tape::new();
        let (out, _) = attend(tape.constant(qk.clone()), tape.constant(v.clone()), 2, cands(4, 2, true), 0.0, 0).unwrap();
        assert!(out.value().max_abs_diff(&naive(&qk, &v, 2)) < 1e-12);
    }

    #[test]
    fn single_position_returns_its_value() {
        let qk = random(&[1, 4], 3);
        let v = random(&[1, 4], 4);
        let tape = Tape::new();
        let (out, w) = attend(tape.constant(qk), tape.constant(v.clone()), 2, cands(1, 2, true), 0.0, 0).unwrap();
        assert_eq!(*out.value(), v);
        assert_eq!(w.row(0, 0), vec![1.0]);
    }

    #[test]
    fn uniform_keys_give_uniform_weights() {
        let qk = Tensor::<f64>::full(&[5, 4], 0.3);
        let v = random(&[5, 4], 5);
        let tape = Tape::new();
        let (_, w) = attend(tape.constant(qk), tape.constant(v), 1, cands(5, 1, true), 0.0, 0).unwrap();
        let row = w.row(0, 2);
        for (j, &p) in row.iter().enumerate() {
            let expect = if j == 2 { 0.0 } else { 0.25 };
            assert!((p - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let qk = random(&[5, 6], 6);
        let v = random(&[5, 6], 7);
        let c = cands(5, 3, true);
        let w = random(&[5, 6], 8);
        let err = grad_check(
            |x| {
                let tape = x.tape();
                let (out, _) = attend(x, tape.constant(v.clone()), 3, c.clone(), 0.0, 0)?;
                out.mul(tape.constant(w.clone())).map(|o| o.sum())
            },
            &qk,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "qk {err}");
        let err = grad_check(
            |x| {
                let tape = x.tape();
                let (out, _) = attend(tape.constant(qk.clone()), x, 3, c.clone(), 0.2, 11)?;
                out.mul(tape.constant(w.clone())).map(|o| o.sum())
            },
            &v,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "v {err}");
    }

    #[test]
    fn query_weights_match_attention_and_have_correct_gradient() {
        let qk = random(&[4, 6], 9);
        let c = cands(4, 2, false);
        let tape = Tape::new();
        let (_, probs) = attend(tape.constant(qk.clone()), tape.constant(qk.clone()), 2, c.clone(), 0.0, 0).unwrap();
        let rows = query_weights(tape.constant(qk.clone()), 2, 0, &c).unwrap().value();
        assert_eq!(rows.row(0), probs.row(0, 0).as_slice());
        assert_eq!(rows.row(1), probs.row(1, 0).as_slice());

        let w = random(&[2, 4], 10);
        for normalize in [true, false] {
            let err = grad_check(
                |x| {
                    let r = if normalize { query_weights(x, 2, 0, &c)? } else { query_scores(x, 2, 0, &c)? };
                    r.mul(x.tape().constant(w.clone())).map(|o| o.sum())
                },
                &qk,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-6, "{normalize} {err}");
        }
    }
}
