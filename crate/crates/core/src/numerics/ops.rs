//! Differentiable operations on [`Var`] handles.

use std::sync::Arc;

use super::rng::counter_uniform;
use super::tape::Var;
use super::tensor::{mm_nt, mm_tn, Real, Tensor};
use crate::error::{Error, Result};

/// Clamp applied to probabilities before the binary cross-entropy logarithms.
pub const BCE_EPS: f64 = 1e-7;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[inline]
pub(crate) fn gelu_scalar<T: Real>(x: T) -> T {
    let c = T::of(GELU_C);
    let a = T::of(GELU_A);
    let half = T::of(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

#[inline]
pub(crate) fn gelu_grad_scalar<T: Real>(x: T) -> T {
    let c = T::of(GELU_C);
    let a = T::of(GELU_A);
    let half = T::of(0.5);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::of(3.0) * a * x * x)
}

#[inline]
pub(crate) fn sigmoid_scalar<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Numerically stable softmax of one slice, in place.
pub(crate) fn softmax_in_place<T: Real>(xs: &mut [T]) {
    let max = xs.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for x in xs.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in xs.iter_mut() {
        *x /= total;
    }
}

pub(crate) fn log_sum_exp<T: Real>(xs: &[T]) -> T {
    let max = xs.iter().copied().fold(T::neg_infinity(), T::max);
    if max == T::neg_infinity() {
        return max;
    }
    max + xs.iter().map(|&x| (x - max).exp()).sum::<T>().ln()
}

fn same_shape<T: Real>(op: &'static str, a: &Var<'_, T>, b: &Var<'_, T>) -> Result<()> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa != sb {
        return Err(Error::shape(op, &sa, &sb));
    }
    Ok(())
}

impl<'t, T: Real> Var<'t, T> {
    pub fn matmul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let (a, b) = (self.value(), other.value());
        let out = a.matmul(&b)?;
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        Ok(self.tape().record(out, &[self, other], move |g| {
            let ga = mm_nt(g.data(), b.data(), m, n, k);
            let gb = mm_tn(a.data(), g.data(), m, k, n);
            vec![
                Some(Tensor::from_parts(vec![m, k], ga)),
                Some(Tensor::from_parts(vec![k, n], gb)),
            ]
        }))
    }

    pub fn add(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        same_shape("add", &self, &other)?;
        let out = self.value().zip_map(&other.value(), |a, b| a + b)?;
        Ok(self
            .tape()
            .record(out, &[self, other], |g| vec![Some(g.clone()), Some(g.clone())]))
    }

    pub fn sub(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        same_shape("sub", &self, &other)?;
        let out = self.value().zip_map(&other.value(), |a, b| a - b)?;
        Ok(self.tape().record(out, &[self, other], |g| {
            vec![Some(g.clone()), Some(g.map(|x| -x))]
        }))
    }

    pub fn mul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        same_shape("mul", &self, &other)?;
        let (a, b) = (self.value(), other.value());
        let out = a.zip_map(&b, |x, y| x * y)?;
        Ok(self.tape().record(out, &[self, other], move |g| {
            vec![
                Some(g.zip_map(&b, |gv, bv| gv * bv).unwrap()),
                Some(g.zip_map(&a, |gv, av| gv * av).unwrap()),
            ]
        }))
    }

    /// Adds a `[d]` vector to every row of a `[.., d]` tensor.
    pub fn add_bias(self, bias: Var<'t, T>) -> Result<Var<'t, T>> {
        let (x, b) = (self.value(), bias.value());
        let (rows, cols) = x.rows_cols();
        if b.len() != cols {
            return Err(Error::shape("add_bias", x.shape(), b.shape()));
        }
        let mut out = (*x).clone();
        for r in 0..rows {
            for (o, &bv) in out.data_mut()[r * cols..(r + 1) * cols].iter_mut().zip(b.data()) {
                *o += bv;
            }
        }
        let bshape = b.shape().to_vec();
        Ok(self.tape().record(out, &[self, bias], move |g| {
            let mut gb = vec![T::zero(); cols];
            for r in 0..rows {
                for (acc, &gv) in gb.iter_mut().zip(&g.data()[r * cols..(r + 1) * cols]) {
                    *acc += gv;
                }
            }
            vec![
                Some(g.clone()),
                Some(Tensor::from_parts(bshape.clone(), gb)),
            ]
        }))
    }

    pub fn scale(self, c: f64) -> Var<'t, T> {
        let c = T::of(c);
        let out = self.value().map(|x| x * c);
        self.tape()
            .record(out, &[self], move |g| vec![Some(g.map(|x| x * c))])
    }

    pub fn gelu(self) -> Var<'t, T> {
        let x = self.value();
        let out = x.map(gelu_scalar);
        self.tape().record(out, &[self], move |g| {
            vec![Some(g.zip_map(&x, |gv, xv| gv * gelu_grad_scalar(xv)).unwrap())]
        })
    }

    pub fn sigmoid(self) -> Var<'t, T> {
        let out = self.value().map(sigmoid_scalar);
        let y = Arc::new(out.clone());
        self.tape().record(out, &[self], move |g| {
            vec![Some(g.zip_map(&y, |gv, yv| gv * yv * (T::one() - yv)).unwrap())]
        })
    }

    /// Elementwise absolute value; subgradient 0 at 0.
    pub fn abs(self) -> Var<'t, T> {
        let x = self.value();
        let out = x.map(|v| v.abs());
        self.tape().record(out, &[self], move |g| {
            vec![Some(
                g.zip_map(&x, |gv, xv| {
                    if xv > T::zero() {
                        gv
                    } else if xv < T::zero() {
                        -gv
                    } else {
                        T::zero()
                    }
                })
                .unwrap(),
            )]
        })
    }

    pub fn sum(self) -> Var<'t, T> {
        let x = self.value();
        let shape = x.shape().to_vec();
        self.tape().record(Tensor::scalar(x.sum()), &[self], move |g| {
            vec![Some(Tensor::full(&shape, g.item()))]
        })
    }

    pub fn mean(self) -> Var<'t, T> {
        let n = self.value().len() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Softmax along `axis`, with max subtraction.
    pub fn softmax(self, axis: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::Index {
                what: "softmax axis",
                index: axis,
                bound: shape.len(),
            });
        }
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let mut out = (*x).clone();
        let mut buf = vec![T::zero(); len];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                for (j, b) in buf.iter_mut().enumerate() {
                    *b = x.data()[at(j)];
                }
                softmax_in_place(&mut buf);
                for (j, &b) in buf.iter().enumerate() {
                    out.data_mut()[at(j)] = b;
                }
            }
        }
        let y = Arc::new(out.clone());
        Ok(self.tape().record(out, &[self], move |g| {
            let mut gx = Tensor::zeros(y.shape());
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| o * len * inner + j * inner + i;
                    let dot: T = (0..len).map(|j| g.data()[at(j)] * y.data()[at(j)]).sum();
                    for j in 0..len {
                        gx.data_mut()[at(j)] = y.data()[at(j)] * (g.data()[at(j)] - dot);
                    }
                }
            }
            vec![Some(gx)]
        }))
    }

    /// Layer normalization over the last axis followed by `gain * x + bias`.
    pub fn layer_norm(self, gain: Var<'t, T>, bias: Var<'t, T>, eps: f64) -> Result<Var<'t, T>> {
        let (x, gm, bt) = (self.value(), gain.value(), bias.value());
        let (rows, d) = x.rows_cols();
        if gm.len() != d || bt.len() != d {
            return Err(Error::shape("layer_norm", x.shape(), gm.shape()));
        }
        let eps = T::of(eps);
        let dn = T::of(d as f64);
        let mut xhat = vec![T::zero(); rows * d];
        let mut inv_std = vec![T::zero(); rows];
        let mut out = vec![T::zero(); rows * d];
        for r in 0..rows {
            let xs = &x.data()[r * d..(r + 1) * d];
            let mean = xs.iter().copied().sum::<T>() / dn;
            let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let is = T::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for c in 0..d {
                let h = (xs[c] - mean) * is;
                xhat[r * d + c] = h;
                out[r * d + c] = h * gm.data()[c] + bt.data()[c];
            }
        }
        let shape = x.shape().to_vec();
        let pshape = gm.shape().to_vec();
        Ok(self.tape().record(
            Tensor::from_parts(shape.clone(), out),
            &[self, gain, bias],
            move |g| {
                let mut gx = vec![T::zero(); rows * d];
                let mut gg = vec![T::zero(); d];
                let mut gb = vec![T::zero(); d];
                for r in 0..rows {
                    let gs = &g.data()[r * d..(r + 1) * d];
                    let hs = &xhat[r * d..(r + 1) * d];
                    let mut mean_dh = T::zero();
                    let mut mean_dh_h = T::zero();
                    for c in 0..d {
                        let dh = gs[c] * gm.data()[c];
                        mean_dh += dh;
                        mean_dh_h += dh * hs[c];
                        gg[c] += gs[c] * hs[c];
                        gb[c] += gs[c];
                    }
                    mean_dh /= dn;
                    mean_dh_h /= dn;
                    for c in 0..d {
                        let dh = gs[c] * gm.data()[c];
                        gx[r * d + c] = inv_std[r] * (dh - mean_dh - hs[c] * mean_dh_h);
                    }
                }
                vec![
                    Some(Tensor::from_parts(shape.clone(), gx)),
                    Some(Tensor::from_parts(pshape.clone(), gg)),
                    Some(Tensor::from_parts(pshape.clone(), gb)),
                ]
            },
        ))
    }

    /// Gathers rows `ids` of a `[V×d]` table.
    pub fn embedding(self, ids: &[usize]) -> Result<Var<'t, T>> {
        let table = self.value();
        if table.shape().len() != 2 {
            return Err(Error::shape("embedding", table.shape(), &[]));
        }
        let (v, d) = (table.shape()[0], table.shape()[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::Index {
                what: "embedding table",
                index: bad,
                bound: v,
            });
        }
        if ids.is_empty() {
            return Err(Error::Contract("embedding lookup with no ids".into()));
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(table.row(i));
        }
        let ids = ids.to_vec();
        Ok(self.tape().record(
            Tensor::from_parts(vec![ids.len(), d], out),
            &[self],
            move |g| {
                let mut gt = Tensor::zeros(&[v, d]);
                for (r, &i) in ids.iter().enumerate() {
                    for (acc, &gv) in gt.data_mut()[i * d..(i + 1) * d]
                        .iter_mut()
                        .zip(&g.data()[r * d..(r + 1) * d])
                    {
                        *acc += gv;
                    }
                }
                vec![Some(gt)]
            },
        ))
    }

    /// Gathers rows of a matrix; gradients scatter back.
    pub fn select_rows(self, rows: &[usize]) -> Result<Var<'t, T>> {
        self.embedding(rows)
    }

    /// Mean over rows of `-log softmax(logits)[target]`.
    pub fn cross_entropy(self, targets: &[usize]) -> Result<Var<'t, T>> {
        let logits = self.value();
        let (n, v) = logits.rows_cols();
        if targets.len() != n {
            return Err(Error::shape("cross_entropy", logits.shape(), &[targets.len()]));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(Error::Index {
                what: "cross-entropy target",
                index: bad,
                bound: v,
            });
        }
        let mut probs = (*logits).clone();
        let mut loss = T::zero();
        for (r, &t) in targets.iter().enumerate() {
            let row = &mut probs.data_mut()[r * v..(r + 1) * v];
            let lse = log_sum_exp(row);
            loss += lse - row[t];
            softmax_in_place(row);
        }
        let nt = T::of(n as f64);
        let targets = targets.to_vec();
        Ok(self
            .tape()
            .record(Tensor::scalar(loss / nt), &[self], move |g| {
                let scale = g.item() / nt;
                let mut gx = probs.clone();
                for (r, &t) in targets.iter().enumerate() {
                    gx.data_mut()[r * v + t] -= T::one();
                }
                gx.scale_assign(scale);
                vec![Some(gx)]
            }))
    }

    /// Binary cross-entropy of a scalar probability against a 0/1 label, with
    /// the probability clamped to `[BCE_EPS, 1 - BCE_EPS]`.
    pub fn binary_cross_entropy(self, label: u8) -> Result<Var<'t, T>> {
        let p = self.value();
        if !p.is_scalar() {
            return Err(Error::shape("binary_cross_entropy", p.shape(), &[1]));
        }
        let eps = T::of(BCE_EPS);
        let raw = p.item();
        let pc = raw.max(eps).min(T::one() - eps);
        let y = T::of(label as f64);
        let loss = -(y * pc.ln() + (T::one() - y) * (T::one() - pc).ln());
        let clamped = pc != raw;
        let shape = p.shape().to_vec();
        Ok(self
            .tape()
            .record(Tensor::scalar(loss), &[self], move |g| {
                let d = if clamped {
                    T::zero()
                } else {
                    -(y / pc) + (T::one() - y) / (T::one() - pc)
                };
                vec![Some(Tensor::full(&shape, g.item() * d))]
            }))
    }

    /// Inverted dropout with a counter-based mask keyed by `key`; identity when
    /// `rate == 0`.
    pub fn dropout(self, rate: f64, key: u64) -> Var<'t, T> {
        if rate <= 0.0 {
            return self;
        }
        let x = self.value();
        let keep = T::of(1.0 / (1.0 - rate));
        let mask: Vec<T> = (0..x.len())
            .map(|i| {
                if counter_uniform(key, i as u64) < rate {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        let mut out = (*x).clone();
        for (o, &m) in out.data_mut().iter_mut().zip(&mask) {
            *o *= m;
        }
        self.tape().record(out, &[self], move |g| {
            let mut gx = g.clone();
            for (o, &m) in gx.data_mut().iter_mut().zip(&mask) {
                *o *= m;
            }
            vec![Some(gx)]
        })
    }
}

/// Stacks matrices with equal column counts along rows.
pub fn concat_rows<'t, T: Real>(parts: &[Var<'t, T>]) -> Result<Var<'t, T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
    let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
    let cols = values[0].rows_cols().1;
    let mut data = Vec::new();
    let mut offsets = Vec::with_capacity(parts.len());
    for v in &values {
        let (r, c) = v.rows_cols();
        if c != cols {
            return Err(Error::shape("concat_rows", values[0].shape(), v.shape()));
        }
        offsets.push((data.len() / cols, r));
        data.extend_from_slice(v.data());
    }
    let total = data.len() / cols;
    let shapes: Vec<Vec<usize>> = values.iter().map(|v| v.shape().to_vec()).collect();
    Ok(first.tape().record(
        Tensor::from_parts(vec![total, cols], data),
        parts,
        move |g| {
            offsets
                .iter()
                .zip(&shapes)
                .map(|(&(start, r), shape)| {
                    Some(Tensor::from_parts(
                        shape.clone(),
                        g.data()[start * cols..(start + r) * cols].to_vec(),
                    ))
                })
                .collect()
        },
    ))
}

/// Sums scalars (or same-shape tensors).
pub fn sum_all<'t, T: Real>(parts: &[Var<'t, T>]) -> Result<Var<'t, T>> {
    let mut iter = parts.iter().copied();
    let mut acc = iter
        .next()
        .ok_or_else(|| Error::Contract("sum of zero tensors".into()))?;
    for p in iter {
        acc = acc.add(p)?;
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::tape::Tape;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, data).unwrap()
    }

    #[test]
    fn softmax_examples() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(t(&[2], &[0.0, 0.0]));
        assert_eq!(x.softmax(0).unwrap().value().data(), &[0.5, 0.5]);

        let x = tape.constant(t(&[3], &[1.0, 2.0, 3.0]));
        let y = x.softmax(0).unwrap().value();
        for (a, b) in y.data().iter().zip([0.0900, 0.2447, 0.6652]) {
            assert!((a - b).abs() < 1e-4);
        }

        let x = tape.constant(t(&[2], &[1000.0, 0.0]));
        let y = x.softmax(0).unwrap().value();
        assert!((y.data()[0] - 1.0).abs() < 1e-12 && y.data()[1] < 1e-12);
        assert!(y.all_finite());
    }

    #[test]
    fn softmax_along_first_axis() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(t(&[2, 2], &[0.0, 1.0, 0.0, 1.0]));
        let y = x.softmax(0).unwrap().value();
        assert_eq!(y.data(), &[0.5, 0.5, 0.5, 0.5]);
    }

    #[test]
    fn layer_norm_examples() {
        let tape = Tape::<f64>::new();
        let ones = tape.constant(t(&[2], &[1.0, 1.0]));
        let zeros = tape.constant(t(&[2], &[0.0, 0.0]));
        let c = tape.constant(t(&[2], &[3.0, 3.0]));
        assert_eq!(c.layer_norm(ones, zeros, 1e-5).unwrap().value().data(), &[0.0, 0.0]);

        let x = tape.constant(t(&[2], &[1.0, -1.0]));
        let y = x.layer_norm(ones, zeros, 1e-12).unwrap().value();
        assert!((y.data()[0] - 1.0).abs() < 1e-9 && (y.data()[1] + 1.0).abs() < 1e-9);

        let fives = tape.constant(t(&[2], &[5.0, 5.0]));
        let y = x.layer_norm(ones, fives, 1e-5).unwrap().value();
        assert!((y.sum() / 2.0 - 5.0).abs() < 1e-12);
    }

    #[test]
    fn embedding_examples() {
        let tape = Tape::<f64>::new();
        let table = tape.leaf(t(&[3, 2], &[1., 2., 3., 4., 5., 6.]), true);
        assert_eq!(table.embedding(&[0]).unwrap().value().data(), &[1.0, 2.0]);
        let err = table.embedding(&[3]).unwrap_err();
        assert!(matches!(err, Error::Index { index: 3, .. }));

        let rows = table.embedding(&[2, 2]).unwrap();
        let grads = tape.backward(rows.sum()).unwrap();
        assert_eq!(grads.get(table).unwrap().data(), &[0., 0., 0., 0., 2., 2.]);
    }

    #[test]
    fn cross_entropy_examples() {
        let tape = Tape::<f64>::new();
        let v = 8000;
        let logits = tape.constant(Tensor::zeros(&[1, v]));
        let l = logits.cross_entropy(&[17]).unwrap().value().item();
        assert!((l - (8000f64).ln()).abs() < 1e-9);
        assert!((l - 8.9872).abs() < 1e-4);

        let mut sat = Tensor::<f64>::zeros(&[1, 4]);
        sat.data_mut()[2] = 20.0;
        let l = tape.constant(sat).cross_entropy(&[2]).unwrap().value().item();
        assert!(l < 1e-8);

        // per-row reference: -ln softmax by hand
        let rows = [[0.5, -1.0, 2.0], [1.0, 1.0, 0.0]];
        let targets = [2usize, 0];
        let reference: f64 = rows
            .iter()
            .zip(targets)
            .map(|(r, tg)| {
                let z: f64 = r.iter().map(|x: &f64| x.exp()).sum();
                -(r[tg].exp() / z).ln()
            })
            .sum::<f64>()
            / 2.0;
        let logits = tape.constant(t(&[2, 3], &[0.5, -1.0, 2.0, 1.0, 1.0, 0.0]));
        let l = logits.cross_entropy(&targets).unwrap().value().item();
        assert!((l - reference).abs() < 1e-12);

        assert!(logits.cross_entropy(&[3, 0]).is_err());
    }

    #[test]
    fn binary_cross_entropy_examples() {
        let tape = Tape::<f64>::new();
        let l = |p: f64, y: u8| {
            tape.constant(Tensor::scalar(p))
                .binary_cross_entropy(y)
                .unwrap()
                .value()
                .item()
        };
        assert!((l(0.5, 1) - 2f64.ln()).abs() < 1e-12);
        assert!(l(1.0 - 1e-7, 1) < 1e-6);
        assert!((l(0.2, 0) - 0.2231).abs() < 1e-4);
        assert!(l(0.0, 1).is_finite() && l(1.0, 0).is_finite());
    }

    #[test]
    fn backward_trivial_cases() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[2, 3], &[1., 2., 3., 4., 5., 6.]), true);
        let g = tape.backward(x.sum()).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0; 6]);

        let tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::scalar(3.0), true);
        let b = tape.leaf(Tensor::scalar(-2.0), true);
        let g = tape.backward(a.mul(b).unwrap()).unwrap();
        assert_eq!(g.get(a).unwrap().item(), -2.0);
        assert_eq!(g.get(b).unwrap().item(), 3.0);
    }

    #[test]
    fn backward_rejects_non_scalar_and_reuse() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros(&[2]), true);
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros(&[2]), true);
        let s = x.sum();
        tape.backward(s).unwrap();
        assert!(tape.backward(s).is_err());
    }

    #[test]
    fn dropout_is_keyed_and_scaled() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::full(&[1000], 1.0));
        let a = x.dropout(0.1, 7).value();
        let b = x.dropout(0.1, 7).value();
        assert_eq!(a, b);
        let dropped = a.data().iter().filter(|&&v| v == 0.0).count();
        assert!((50..150).contains(&dropped), "{dropped}");
        assert!(a.data().iter().all(|&v| v == 0.0 || (v - 1.0 / 0.9).abs() < 1e-12));
    }
}
