//! Sentence focus of the classifier's pooling layer: raw attention weights
//! and attention-vector norms, top-k summaries and HTML heatmaps.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hiermodel::classifier::Trace;
use crate::hiermodel::{ClassifierConfig, HierModel};
use crate::numerics::Real;
use crate::textpipe::{Document, Vocab};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Channel {
    Raw,
    Norm,
}

impl std::fmt::Display for Channel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Channel::Raw => "raw",
            Channel::Norm => "norm",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SentenceScore {
    pub sentence_index: usize,
    /// Mean over heads of the first position's attention weight.
    pub raw_score: f64,
    /// Mean over heads of `α_j · ‖f_h(x_j)‖`.
    pub norm_score: f64,
    pub raw_per_head: Vec<f64>,
    pub norm_per_head: Vec<f64>,
}

/// Both channels from a captured classifier pass.
pub fn scores_from_trace<T: Real>(t: &Trace<T>) -> Vec<SentenceScore> {
    let (h, n) = t.alpha.rows_cols();
    let d = t.w_v.shape()[1];
    let dh = d / h;
    let v = t.normed.matmul(&t.w_v).expect("pooling shapes agree");
    (0..n)
        .map(|j| {
            let vj = v.row(j);
            let raw: Vec<f64> = (0..h).map(|hh| t.alpha.row(hh)[j].f64()).collect();
            let norm: Vec<f64> = (0..h)
                .map(|hh| {
                    // ‖v_j[head] · W_o[head rows]‖
                    let mut out = vec![0.0f64; d];
                    for (k, &vk) in vj[hh * dh..(hh + 1) * dh].iter().enumerate() {
                        let w = t.w_o.row(hh * dh + k);
                        for (o, &wc) in out.iter_mut().zip(w) {
                            *o += vk.f64() * wc.f64();
                        }
                    }
                    raw[hh] * out.iter().map(|x| x * x).sum::<f64>().sqrt()
                })
                .collect();
            SentenceScore {
                sentence_index: j,
                raw_score: raw.iter().sum::<f64>() / h as f64,
                norm_score: norm.iter().sum::<f64>() / h as f64,
                raw_per_head: raw,
                norm_per_head: norm,
            }
        })
        .collect()
}

fn require_head<T: Real>(model: &HierModel<T>) -> Result<()> {
    if model.has_classifier() {
        Ok(())
    } else {
        Err(Error::Contract("attention analysis needs a classifier head".into()))
    }
}

/// Both channels plus the model's up-move probability.
pub fn sentence_scores<T: Real>(
    model: &HierModel<T>,
    doc: &Document,
    ccfg: &ClassifierConfig,
    lsh_seed: u64,
) -> Result<(Vec<SentenceScore>, f64)> {
    require_head(model)?;
    let t = model.classify(doc, ccfg, lsh_seed)?;
    Ok((scores_from_trace(&t), t.prob))
}

pub fn raw_attention_scores<T: Real>(model: &HierModel<T>, doc: &Document, lsh_seed: u64) -> Result<Vec<f64>> {
    let (s, _) = sentence_scores(model, doc, &ClassifierConfig::default(), lsh_seed)?;
    Ok(s.iter().map(|x| x.raw_score).collect())
}

pub fn norm_attention_scores<T: Real>(model: &HierModel<T>, doc: &Document, lsh_seed: u64) -> Result<Vec<f64>> {
    let (s, _) = sentence_scores(model, doc, &ClassifierConfig::default(), lsh_seed)?;
    Ok(s.iter().map(|x| x.norm_score).collect())
}

pub fn channel(scores: &[SentenceScore], c: Channel) -> Vec<f64> {
    scores
        .iter()
        .map(|s| match c {
            Channel::Raw => s.raw_score,
            Channel::Norm => s.norm_score,
        })
        .collect()
}

/// Indices of the `k` highest scores (earlier index wins ties), in document order.
pub fn top_k_summary(scores: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > scores.len() {
        return Err(Error::Index {
            what: "summary size".into(),
            index: k,
            bound: scores.len(),
        });
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx.sort_unstable();
    Ok(idx)
}

/// Min-max normalized to `[0, 1]`; all 0.5 when the scores are equal.
pub fn intensities(scores: &[f64]) -> Vec<f64> {
    let lo = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![0.5; scores.len()];
    }
    scores.iter().map(|s| (s - lo) / (hi - lo)).collect()
}

/// Spearman rank correlation (average ranks for ties); NaN if either side is constant.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    fn ranks(x: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..x.len()).collect();
        idx.sort_by(|&i, &j| x[i].total_cmp(&x[j]));
        let mut r = vec![0.0; x.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
                j += 1;
            }
            for &k in &idx[i..=j] {
                r[k] = (i + j) as f64 / 2.0;
            }
            i = j + 1;
        }
        r
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

/// Sentence texts of a tokenized document, without special tokens.
pub fn sentence_texts(doc: &Document, vocab: &Vocab) -> Vec<String> {
    doc.sentences
        .iter()
        .map(|s| {
            let ids: Vec<u32> = s.ids().iter().copied().filter(|&t| !Vocab::is_special(t)).collect();
            vocab.decode(&ids)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapDoc {
    pub doc_id: String,
    pub channel: Channel,
    pub sentences: Vec<String>,
    pub intensities: Vec<f64>,
    pub prediction: f64,
    pub meta: BTreeMap<String, String>,
}

impl HeatmapDoc {
    pub fn new(
        doc: &Document,
        texts: Vec<String>,
        scores: &[f64],
        channel: Channel,
        prediction: f64,
    ) -> Result<Self> {
        if texts.len() != scores.len() {
            return Err(Error::Contract(format!(
                "{} sentence texts for {} scores",
                texts.len(),
                scores.len()
            )));
        }
        let mut meta = BTreeMap::new();
        meta.insert("ticker".to_string(), doc.meta.ticker.clone());
        meta.insert("filing_date".to_string(), doc.meta.filing_date.to_string());
        meta.insert("doc_type".to_string(), doc.meta.doc_type.clone());
        Ok(HeatmapDoc {
            doc_id: doc.meta.doc_id.clone(),
            channel,
            sentences: texts,
            intensities: intensities(scores),
            prediction,
            meta,
        })
    }
}

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&#39;"),
            c => out.push(c),
        }
    }
    out
}

pub fn heatmap_html(h: &HeatmapDoc) -> String {
    let mut s = String::new();
    let title = escape(&h.doc_id);
    let _ = write!(
        s,
        "<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><title>{title} ({})</title>\n\
         <style>body{{font-family:sans-serif;max-width:60em;margin:2em auto;line-height:1.7}}\
         span.s{{padding:0 .15em;border-radius:.2em}}</style></head><body>\n",
        h.channel
    );
    let _ = writeln!(
        s,
        "<h1>{title}</h1>\n<p>channel: {} &middot; predicted P(up) = {:.4}</p>",
        h.channel, h.prediction
    );
    let meta: Vec<String> = h
        .meta
        .iter()
        .map(|(k, v)| format!("{}: {}", escape(k), escape(v)))
        .collect();
    let _ = writeln!(s, "<p>{}</p>\n<p>", meta.join(" &middot; "));
    for (i, (text, a)) in h.sentences.iter().zip(&h.intensities).enumerate() {
        let _ = writeln!(
            s,
            "<span class=\"s\" data-index=\"{i}\" style=\"background:rgba(220,40,40,{a:.4})\">{}</span>",
            escape(text)
        );
    }
    s.push_str("</p>\n</body></html>\n");
    s
}

pub fn render_heatmap_html(h: &HeatmapDoc, path: &Path) -> Result<()> {
    std::fs::write(path, heatmap_html(h)).map_err(|e| Error::io(path, e))
}

/// One line of the scores file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub doc_id: String,
    pub channel: Channel,
    pub scores: Vec<f64>,
    pub top_k: Vec<usize>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hiermodel::tests::{doc, tiny_cfg};
    use crate::hiermodel::{base_forward, doc_ctx, BaseVars, ClassifierVars};
    use crate::numerics::Tape;
    use crate::reformer::layer::attention_sublayer;
    use crate::reformer::{CallCtx, Layout};

    fn model() -> HierModel<f64> {
        HierModel::<f64>::new(tiny_cfg(), 8).unwrap().with_classifier_head(9)
    }

    #[test]
    fn single_sentence_gets_everything() {
        let d = doc("a", &[&[5, 6, 7]]);
        assert_eq!(raw_attention_scores(&model(), &d, 1).unwrap(), vec![1.0]);
    }

    #[test]
    fn raw_scores_sum_to_one_and_match_alpha() {
        let m = model();
        let d = doc("b", &[&[5, 6], &[7, 8, 9], &[10], &[11, 12]]);
        let (s, _) = sentence_scores(&m, &d, &ClassifierConfig::default(), 1).unwrap();
        let t = m.classify(&d, &ClassifierConfig::default(), 1).unwrap();
        for h in 0..t.n_heads {
            let row: f64 = s.iter().map(|x| x.raw_per_head[h]).sum();
            assert!((row - 1.0).abs() < 1e-12);
            for (j, x) in s.iter().enumerate() {
                assert_eq!(x.raw_per_head[h], t.alpha.row(h)[j]);
            }
        }
        assert!((s.iter().map(|x| x.raw_score).sum::<f64>() - 1.0).abs() < 1e-6);
        assert!(s.iter().all(|x| x.norm_score >= 0.0));
    }

    #[test]
    fn identical_sentences_are_uniform() {
        // full attention and no sentence positions make the document symmetric
        let cfg = crate::hiermodel::ModelConfig {
            attention: crate::reformer::AttentionKind::Full,
            ..tiny_cfg()
        };
        let mut m = HierModel::<f64>::new(cfg, 8).unwrap().with_classifier_head(9);
        m.params
            .get_mut("base.sent_pos")
            .unwrap()
            .data_mut()
            .iter_mut()
            .for_each(|x| *x = 0.0);
        let s3: &[u32] = &[5, 6, 7];
        let d = doc("c", &[s3; 4]);
        let (s, _) = sentence_scores(&m, &d, &ClassifierConfig::default(), 1).unwrap();
        for x in channel(&s, Channel::Raw) {
            assert!((x - 0.25).abs() < 1e-9, "{x}");
        }
        let n = channel(&s, Channel::Norm);
        assert!(n.iter().all(|x| (x - n[0]).abs() < 1e-9));
    }

    #[test]
    fn norm_channel_decomposes_the_attention_output() {
        let m = model();
        let d = doc("e", &[&[5, 6], &[7, 8, 9], &[10]]);
        let tape = Tape::new();
        let b = m.params.bind(&tape, |_| false);
        let base = BaseVars::bind(&b, &m.cfg).unwrap();
        let head = ClassifierVars::bind(&b).unwrap();
        let ctx = doc_ctx(&CallCtx::eval(1), &d);
        let enc = base_forward(&d, &base, &m.cfg, &ctx).unwrap();
        let lc = m.cfg.pooling_layer();
        let f = attention_sublayer(enc, &head.pool, &lc, &Layout::all_valid(3), &ctx.child("pool"), None).unwrap();
        let want = f.out.value().row(0).to_vec();

        let t = m.classify(&d, &ClassifierConfig::default(), 1).unwrap();
        let (h, n) = t.alpha.rows_cols();
        let dm = t.w_v.shape()[1];
        let dh = dm / h;
        let v = t.normed.matmul(&t.w_v).unwrap();
        let mut got = vec![0.0; dm];
        let mut norms = vec![0.0; n];
        for hh in 0..h {
            for j in 0..n {
                let a = t.alpha.row(hh)[j];
                let mut fj = vec![0.0; dm];
                for k in 0..dh {
                    for c in 0..dm {
                        fj[c] += v.row(j)[hh * dh + k] * t.w_o.row(hh * dh + k)[c];
                    }
                }
                for c in 0..dm {
                    got[c] += a * fj[c];
                }
                norms[j] += a * fj.iter().map(|x| x * x).sum::<f64>().sqrt() / h as f64;
            }
        }
        for (x, y) in got.iter().zip(&want) {
            assert!((x - y).abs() < 1e-10, "{x} vs {y}");
        }
        let s = scores_from_trace(&t);
        for (x, y) in s.iter().zip(&norms) {
            assert!((x.norm_score - y).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_weight_zero_norm() {
        let m = model();
        let d = doc("f", &[&[5, 6], &[7, 8, 9], &[10]]);
        let mut t = m.classify(&d, &ClassifierConfig::default(), 1).unwrap();
        for h in 0..t.n_heads {
            t.alpha.data_mut()[h * 3 + 1] = 0.0;
        }
        assert_eq!(scores_from_trace(&t)[1].norm_score, 0.0);
    }

    #[test]
    fn summaries() {
        assert_eq!(top_k_summary(&[0.1, 0.7, 0.2], 1).unwrap(), vec![1]);
        assert_eq!(top_k_summary(&[0.3, 0.1, 0.3], 1).unwrap(), vec![0]);
        assert_eq!(top_k_summary(&[0.1, 0.7, 0.2], 3).unwrap(), vec![0, 1, 2]);
        assert_eq!(top_k_summary(&[0.5, 0.1, 0.7, 0.2], 2).unwrap(), vec![0, 2]);
        assert!(top_k_summary(&[0.1], 0).is_err());
        assert!(top_k_summary(&[0.1], 2).is_err());
    }

    #[test]
    fn intensity_rules() {
        assert_eq!(intensities(&[0.2, 0.2, 0.2]), vec![0.5; 3]);
        assert_eq!(intensities(&[1.0, 3.0, 2.0]), vec![0.0, 1.0, 0.5]);
    }

    #[test]
    fn html_is_deterministic_and_ordered() {
        let d = doc("g<1>", &[&[5], &[6], &[7]]);
        let texts = vec!["First & one.".to_string(), "Second.".into(), "Third <b>.".into()];
        let h = HeatmapDoc::new(&d, texts, &[0.1, 0.3, 0.2], Channel::Norm, 0.73).unwrap();
        let a = heatmap_html(&h);
        assert_eq!(a, heatmap_html(&h));
        assert_eq!(a.matches("<span class=\"s\"").count(), 3);
        let p1 = a.find("First &amp; one.").unwrap();
        let p2 = a.find("Second.").unwrap();
        let p3 = a.find("Third &lt;b&gt;.").unwrap();
        assert!(p1 < p2 && p2 < p3);
        assert!(a.contains("rgba(220,40,40,1.0000)\">Second."));
        assert!(a.contains("g&lt;1&gt;"));
        assert!(!a.contains("http"));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("h.html");
        render_heatmap_html(&h, &p).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap(), a);
        assert!(render_heatmap_html(&h, &dir.path().join("missing/h.html")).is_err());
    }

    #[test]
    fn spearman_basics() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]) - 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]) + 1.0).abs() < 1e-12);
    }
}
