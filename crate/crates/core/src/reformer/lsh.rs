//! Angular locality-sensitive hashing and bucket-chunk candidate sets.

use rand_distr::{Distribution, StandardNormal};

use crate::numerics::tensor::{mm, Real, Tensor};
use crate::numerics::RngStream;

/// Bucket ids and sort permutation for one hashing round.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundBuckets {
    /// Bucket per position. Invalid (PAD) positions get `n_buckets`, which sorts
    /// them after every real bucket.
    pub bucket: Vec<usize>,
    /// Positions stably sorted by `(bucket, position)`.
    pub order: Vec<usize>,
    /// `inverse[order[s]] == s`.
    pub inverse: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BucketAssignment {
    pub n_buckets: usize,
    pub rounds: Vec<RoundBuckets>,
}

/// `max(2, n_valid / chunk)` rounded to the nearest even integer.
pub fn auto_bucket_count(n_valid: usize, chunk: usize) -> usize {
    let q = n_valid as f64 / chunk.max(1) as f64;
    let even = 2 * ((q / 2.0).round() as usize);
    even.max(2)
}

/// Random projection of shape `dim × n_buckets/2` for one round.
pub fn random_rotation<T: Real>(dim: usize, n_buckets: usize, rng: &RngStream) -> Tensor<T> {
    let mut r = rng.rng();
    let data = (0..dim * n_buckets / 2)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut r);
            T::of(z)
        })
        .collect();
    Tensor::from_parts(vec![dim, n_buckets / 2], data)
}

/// Buckets `vectors` (`n × dim`): per round, project with a fresh random
/// rotation `R` and take `argmax([xR ; -xR])`, then stably sort positions by
/// `(bucket, position)`.
pub fn lsh_bucket<T: Real>(
    vectors: &Tensor<T>,
    valid: &[bool],
    n_buckets: usize,
    n_rounds: usize,
    rng: &RngStream,
) -> BucketAssignment {
    assert!(n_buckets >= 2 && n_buckets % 2 == 0, "bucket count must be even");
    let (n, dim) = vectors.rows_cols();
    let half = n_buckets / 2;
    let rounds = (0..n_rounds)
        .map(|r| {
            let rot = random_rotation::<T>(dim, n_buckets, &rng.derive(r));
            let proj = mm(vectors.data(), rot.data(), n, dim, half);
            let bucket: Vec<usize> = (0..n)
                .map(|i| {
                    if !valid[i] {
                        return n_buckets;
                    }
                    argmax_signed(&proj[i * half..(i + 1) * half])
                })
                .collect();
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by_key(|&i| (bucket[i], i));
            let mut inverse = vec![0; n];
            for (s, &i) in order.iter().enumerate() {
                inverse[i] = s;
            }
            RoundBuckets {
                bucket,
                order,
                inverse,
            }
        })
        .collect();
    BucketAssignment { n_buckets, rounds }
}

/// Index of the largest entry of `[p ; -p]`; first index wins ties.
fn argmax_signed<T: Real>(p: &[T]) -> usize {
    let half = p.len();
    let mut best = 0;
    let mut best_v = T::neg_infinity();
    for k in 0..2 * half {
        let v = if k < half { p[k] } else { -p[k - half] };
        if v > best_v {
            best_v = v;
            best = k;
        }
    }
    best
}

/// Applies the self-exclusion rule: drop the query itself when any other
/// target remains, otherwise attend to itself alone.
fn exclude_self(mut cands: Vec<usize>, query: usize) -> Vec<usize> {
    if cands.iter().any(|&c| c != query) {
        cands.retain(|&c| c != query);
        cands
    } else {
        vec![query]
    }
}

/// Key candidates per query for dense attention: every valid key, restricted
/// to earlier-or-equal positions when `causal`. Invalid queries get none.
pub fn full_candidates(valid: &[bool], causal: bool, self_exclusion: bool) -> Vec<Vec<usize>> {
    let n = valid.len();
    (0..n)
        .map(|i| {
            if !valid[i] {
                return Vec::new();
            }
            let keys: Vec<usize> = (0..n)
                .filter(|&j| valid[j] && (!causal || j <= i))
                .collect();
            if self_exclusion {
                exclude_self(keys, i)
            } else {
                keys
            }
        })
        .collect()
}

/// Key candidates per query for LSH attention. In each round a query sees the
/// keys in its own sorted chunk and the previous chunk that share its bucket
/// (and are valid, and not later when `causal`). Rounds are concatenated; the
/// softmax over the concatenated multiset equals the per-round outputs
/// combined with log-sum-exp weights.
pub fn lsh_candidates(
    buckets: &BucketAssignment,
    valid: &[bool],
    chunk: usize,
    causal: bool,
    self_exclusion: bool,
) -> Vec<Vec<usize>> {
    let n = valid.len();
    let mut out = vec![Vec::new(); n];
    for round in &buckets.rounds {
        for i in (0..n).filter(|&i| valid[i]) {
            let slot = round.inverse[i];
            let c = slot / chunk;
            let lo = c.saturating_sub(1) * chunk;
            let hi = ((c + 1) * chunk).min(n);
            let keys: Vec<usize> = round.order[lo..hi]
                .iter()
                .copied()
                .filter(|&j| {
                    valid[j] && round.bucket[j] == round.bucket[i] && (!causal || j <= i)
                })
                .collect();
            let keys = if self_exclusion {
                exclude_self(keys, i)
            } else {
                keys
            };
            out[i].extend(keys);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_vectors(n: usize, dim: usize, seed: u64) -> Tensor<f64> {
        let mut r = RngStream::new(seed, "test").rng();
        let mut data = Vec::new();
        for _ in 0..n {
            let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut r)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            data.extend(v.iter().map(|x| x / norm));
        }
        Tensor::new(vec![n, dim], data).unwrap()
    }

    #[test]
    fn identical_vectors_share_buckets() {
        let v = Tensor::<f64>::from_f64(&[2, 3], &[0.3, -0.2, 0.9, 0.3, -0.2, 0.9]).unwrap();
        let b = lsh_bucket(&v, &[true, true], 8, 4, &RngStream::new(1, "lsh"));
        for r in &b.rounds {
            assert_eq!(r.bucket[0], r.bucket[1]);
        }
    }

    #[test]
    fn opposite_vectors_split() {
        let v = Tensor::<f64>::from_f64(&[2, 3], &[0.3, -0.2, 0.9, -0.3, 0.2, -0.9]).unwrap();
        let b = lsh_bucket(&v, &[true, true], 4, 4, &RngStream::new(2, "lsh"));
        for r in &b.rounds {
            assert_ne!(r.bucket[0], r.bucket[1]);
            assert_eq!((r.bucket[0] + 2) % 4, r.bucket[1]);
        }
    }

    #[test]
    fn matches_direct_recomputation() {
        let n = 64;
        let v = unit_vectors(n, 8, 9);
        let rng = RngStream::new(3, "lsh");
        let b = lsh_bucket(&v, &vec![true; n], 8, 2, &rng);
        for (r, round) in b.rounds.iter().enumerate() {
            let rot = random_rotation::<f64>(8, 8, &rng.derive(r));
            let mut seen = [false; 8];
            for i in 0..n {
                // independent argmax: explicit concatenation then max_by
                let mut proj = Vec::new();
                for k in 0..4 {
                    proj.push((0..8).map(|a| v.data()[i * 8 + a] * rot.data()[a * 4 + k]).sum::<f64>());
                }
                let cat: Vec<f64> = proj.iter().copied().chain(proj.iter().map(|x| -x)).collect();
                let expect = cat
                    .iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |acc, (k, &x)| if x > acc.1 { (k, x) } else { acc })
                    .0;
                assert_eq!(round.bucket[i], expect);
                seen[expect] = true;
            }
            assert!(seen.iter().all(|&s| s), "some bucket empty: {seen:?}");
            for i in 0..n {
                assert_eq!(round.order[round.inverse[i]], i);
            }
            assert!(round
                .order
                .windows(2)
                .all(|w| (round.bucket[w[0]], w[0]) < (round.bucket[w[1]], w[1])));
        }
    }

    #[test]
    fn padding_sorts_last() {
        let v = unit_vectors(6, 4, 1);
        let valid = [true, false, true, true, false, true];
        let b = lsh_bucket(&v, &valid, 2, 1, &RngStream::new(0, "lsh"));
        let order = &b.rounds[0].order;
        assert_eq!(&order[4..], &[1, 4]);
    }

    #[test]
    fn auto_buckets() {
        assert_eq!(auto_bucket_count(10, 16), 2);
        assert_eq!(auto_bucket_count(128, 16), 8);
        assert_eq!(auto_bucket_count(100, 16), 6);
    }

    #[test]
    fn candidate_rules() {
        let valid = [true, true, true];
        let full = full_candidates(&valid, false, true);
        assert_eq!(full, vec![vec![1, 2], vec![0, 2], vec![0, 1]]);
        let causal = full_candidates(&valid, true, true);
        assert_eq!(causal[0], vec![0]);
        assert_eq!(causal[2], vec![0, 1]);
        let only = full_candidates(&[false, true, false], false, true);
        assert_eq!(only, vec![vec![], vec![1], vec![]]);
    }
}
