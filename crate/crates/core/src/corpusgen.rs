//! Seeded synthetic filings and volumes with planted signal sentences.
//!
//! Each document is filler made of pseudo-word sentences drawn mostly from a
//! per-document topic of stems; with probability `signal_fraction` one
//! sentence is replaced by a signal phrase. Signal
//! documents move volume up with probability `signal_strength`, the others
//! with probability `background_up_rate`. Volumes are built so that
//! [`label_for`](crate::marketdata::label_for) returns exactly the drawn label.

use std::collections::BTreeMap;
use std::path::Path;

use chrono::{Datelike, Duration, NaiveDate, Weekday};
use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::marketdata::{write_volume_csv, VolumeSeries, Volumes};
use crate::numerics::RngStream;
use crate::textpipe::{DocMeta, RawDocument};

pub const CORPUS_FILE: &str = "corpus.jsonl";
pub const VOLUMES_FILE: &str = "volumes.csv";
pub const MANIFEST_FILE: &str = "manifest.jsonl";

/// `{n}` becomes a number, `{w}` a pseudo-word.
pub const DEFAULT_SIGNAL_PHRASES: &[&str] = &[
    "Quarterly revenue rose {n} percent after the {w} acquisition closed.",
    "The board approved a special dividend of {n} cents per share.",
    "Management raised full year earnings guidance on record {w} sales.",
    "The company agreed to be acquired at a premium of {n} percent.",
    "Net income increased {n} percent on higher {w} production.",
    "The issuer reported a material change following the {w} contract award.",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    pub n_docs: usize,
    /// Inclusive range.
    pub sentences_per_doc: (usize, usize),
    /// Inclusive range for filler sentences.
    pub words_per_sentence: (usize, usize),
    pub n_stems: usize,
    /// Each document draws a topic of this many stems.
    pub topic_size: usize,
    /// Probability that a filler word comes from the document's topic
    /// rather than from all stems.
    pub topic_weight: f64,
    pub signal_phrases: Vec<String>,
    /// Share of documents carrying a planted sentence.
    pub signal_fraction: f64,
    /// Probability that a signal document repeats its planted sentence at a
    /// second position, which makes it recoverable from context.
    pub echo_rate: f64,
    /// Probability that a signal document is labeled up.
    pub signal_strength: f64,
    /// Probability that a document without signal is labeled up.
    pub background_up_rate: f64,
    /// Per-word probability of a letter swap or line break.
    pub noise_rate: f64,
    /// Defaults to one ticker per ten documents.
    pub n_tickers: Option<usize>,
    pub start_date: NaiveDate,
    pub holdout_start: NaiveDate,
    pub end_date: NaiveDate,
    /// Share of documents filed on or after `holdout_start`.
    pub holdout_fraction: f64,
    /// Probability that a Monday filing is dated the Saturday before.
    pub weekend_rate: f64,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            n_docs: 1000,
            sentences_per_doc: (4, 12),
            words_per_sentence: (6, 14),
            n_stems: 300,
            topic_size: 20,
            topic_weight: 0.8,
            signal_phrases: DEFAULT_SIGNAL_PHRASES.iter().map(|s| s.to_string()).collect(),
            signal_fraction: 0.5,
            echo_rate: 0.0,
            signal_strength: 0.7,
            background_up_rate: 0.5,
            noise_rate: 0.01,
            n_tickers: None,
            start_date: NaiveDate::from_ymd_opt(2014, 1, 1).unwrap(),
            holdout_start: NaiveDate::from_ymd_opt(2018, 1, 1).unwrap(),
            end_date: NaiveDate::from_ymd_opt(2018, 12, 31).unwrap(),
            holdout_fraction: 0.2,
            weekend_rate: 0.2,
            seed: 0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let prob = |x: f64| (0.0..=1.0).contains(&x);
        let checks = [
            (self.n_docs > 0, "n_docs must be positive"),
            (
                1 <= self.sentences_per_doc.0 && self.sentences_per_doc.0 <= self.sentences_per_doc.1,
                "sentences_per_doc must be 1 <= min <= max",
            ),
            (
                1 <= self.words_per_sentence.0 && self.words_per_sentence.0 <= self.words_per_sentence.1,
                "words_per_sentence must be 1 <= min <= max",
            ),
            (self.n_stems >= 2, "n_stems must be at least 2"),
            (
                1 <= self.topic_size && self.topic_size <= self.n_stems,
                "topic_size must be in [1, n_stems]",
            ),
            (!self.signal_phrases.is_empty(), "signal_phrases must not be empty"),
            (
                self.signal_strength > 0.5 && self.signal_strength <= 1.0,
                "signal_strength must be in (0.5, 1]",
            ),
            (
                prob(self.signal_fraction)
                    && prob(self.background_up_rate)
                    && prob(self.noise_rate)
                    && prob(self.holdout_fraction)
                    && prob(self.weekend_rate)
                    && prob(self.topic_weight)
                    && prob(self.echo_rate),
                "rates must lie in [0, 1]",
            ),
            (
                self.start_date < self.holdout_start && self.holdout_start < self.end_date,
                "need start_date < holdout_start < end_date",
            ),
            (self.n_tickers != Some(0), "n_tickers must be positive"),
        ];
        match checks.iter().find(|(ok, _)| !ok) {
            Some((_, msg)) => Err(Error::Config(msg.to_string())),
            None => Ok(()),
        }
    }

    pub fn tickers(&self) -> usize {
        self.n_tickers.unwrap_or((self.n_docs / 10).max(1))
    }

    pub fn n_holdout(&self) -> usize {
        (self.holdout_fraction * self.n_docs as f64).round() as usize
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub doc_id: String,
    /// Sentence index of the planted signal, if any.
    pub planted_index: Option<usize>,
    /// Position of the verbatim repeat of the planted sentence, if any.
    pub echo_index: Option<usize>,
    /// 1 for signal documents, 0 otherwise.
    pub intended_label: u8,
    /// Label the generated volumes realize.
    pub label: u8,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generated {
    pub docs: Vec<RawDocument>,
    pub volumes: Volumes,
    pub manifest: Vec<ManifestRecord>,
}

impl Generated {
    /// Writes the corpus, volume CSV and manifest into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        crate::jsonl::write(&dir.join(CORPUS_FILE), &self.docs)?;
        write_volume_csv(&dir.join(VOLUMES_FILE), &self.volumes)?;
        crate::jsonl::write(&dir.join(MANIFEST_FILE), &self.manifest)
    }
}

const ONSETS: &[&str] = &[
    "b", "c", "d", "f", "g", "h", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "br", "cl", "dr", "gr",
    "pl", "st", "tr",
];
const VOWELS: &[&str] = &["a", "e", "i", "o", "u", "ai", "ou"];
const CODAS: &[&str] = &["", "", "n", "r", "s", "l", "x", "nt", "m"];

fn pick<'a>(rng: &mut ChaCha8Rng, xs: &'a [&'a str]) -> &'a str {
    xs[rng.random_range(0..xs.len())]
}

/// Distinct lowercase pseudo-words of two or three syllables.
pub fn make_stems(n: usize, rng: &RngStream) -> Vec<String> {
    let mut r = rng.rng();
    let mut out = Vec::with_capacity(n);
    let mut seen = std::collections::HashSet::new();
    while out.len() < n {
        let syl = r.random_range(2..=3);
        let mut w = String::new();
        for _ in 0..syl {
            w.push_str(pick(&mut r, ONSETS));
            w.push_str(pick(&mut r, VOWELS));
        }
        w.push_str(pick(&mut r, CODAS));
        if seen.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}

fn capitalize(w: &str) -> String {
    let mut c = w.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

fn filler(rng: &mut ChaCha8Rng, stems: &[String], topic: &[usize], cfg: &GenConfig) -> String {
    let n = rng.random_range(cfg.words_per_sentence.0..=cfg.words_per_sentence.1);
    let mut ws: Vec<String> = (0..n)
        .map(|_| {
            let k = if rng.random_bool(cfg.topic_weight) {
                topic[rng.random_range(0..topic.len())]
            } else {
                rng.random_range(0..stems.len())
            };
            stems[k].clone()
        })
        .collect();
    ws[0] = capitalize(&ws[0]);
    if n > 4 && rng.random_bool(0.3) {
        let k = rng.random_range(1..n - 1);
        ws[k].push(',');
    }
    format!("{}.", ws.join(" "))
}

fn signal(rng: &mut ChaCha8Rng, phrases: &[String], stems: &[String]) -> String {
    let t = &phrases[rng.random_range(0..phrases.len())];
    let n = rng.random_range(5..=60).to_string();
    let w = &stems[rng.random_range(0..stems.len())];
    t.replace("{n}", &n).replace("{w}", w)
}

/// Letter swaps and line breaks inside words; the first word is left alone
/// so sentence starts stay capitalized.
fn add_noise(sentence: &str, rate: f64, rng: &mut ChaCha8Rng) -> String {
    if rate == 0.0 {
        return sentence.to_string();
    }
    let words: Vec<&str> = sentence.split(' ').collect();
    let mut out = Vec::with_capacity(words.len());
    for (i, w) in words.iter().enumerate() {
        let letters: Vec<char> = w.chars().collect();
        let alpha = letters.iter().take_while(|c| c.is_alphabetic()).count();
        if i == 0 || alpha < 3 || !rng.random_bool(rate) {
            out.push(w.to_string());
            continue;
        }
        let mut c = letters;
        let k = rng.random_range(1..alpha - 1);
        if rng.random_bool(0.5) {
            c.swap(k, k + 1);
            out.push(c.into_iter().collect());
        } else {
            let (a, b) = c.split_at(k);
            out.push(format!("{}\n{}", a.iter().collect::<String>(), b.iter().collect::<String>()));
        }
    }
    out.join(" ")
}

fn trading_days(from: NaiveDate, to: NaiveDate) -> Vec<NaiveDate> {
    from.iter_days()
        .take_while(|d| *d <= to)
        .filter(|d| !matches!(d.weekday(), Weekday::Sat | Weekday::Sun))
        .collect()
}

pub fn generate_corpus(cfg: &GenConfig) -> Result<Generated> {
    cfg.validate()?;
    let root = RngStream::new(cfg.seed, "corpusgen");
    let stems = make_stems(cfg.n_stems, &root.derive("stems"));
    let calendar = trading_days(cfg.start_date, cfg.end_date);
    let split = calendar.partition_point(|d| *d < cfg.holdout_start);
    let n_tickers = cfg.tickers();
    let n_hold = cfg.n_holdout();
    let n_train = cfg.n_docs - n_hold;

    // even calendar slots, so the (D, D+1) pairs of one ticker never overlap
    let eras = [(0, split, 0..n_train), (split, calendar.len() - 1, n_train..cfg.n_docs)];
    let mut slot_of = vec![0usize; cfg.n_docs];
    for (era, (lo, hi, docs)) in eras.into_iter().enumerate() {
        let slots: Vec<usize> = (lo..hi).filter(|i| i % 2 == 0).collect();
        for t in 0..n_tickers {
            let mine: Vec<usize> = docs.clone().filter(|i| i % n_tickers == t).collect();
            if mine.len() > slots.len() {
                return Err(Error::Config(format!(
                    "{} documents for ticker {t} do not fit {} trading days; add tickers or widen dates",
                    mine.len(),
                    slots.len()
                )));
            }
            let mut r = root.derive_n(&[era as u64, t as u64]).rng();
            let mut picked: Vec<usize> = sample(&mut r, slots.len(), mine.len())
                .into_iter()
                .map(|k| slots[k])
                .collect();
            picked.sort_unstable();
            for (d, s) in mine.into_iter().zip(picked) {
                slot_of[d] = s;
            }
        }
    }

    let mut docs = Vec::with_capacity(cfg.n_docs);
    let mut manifest = Vec::with_capacity(cfg.n_docs);
    let mut labels = vec![0u8; cfg.n_docs];
    for i in 0..cfg.n_docs {
        let mut r = root.derive("doc").derive_n(&[i as u64]).rng();
        let topic = sample(&mut r, stems.len(), cfg.topic_size).into_vec();
        let k = r.random_range(cfg.sentences_per_doc.0..=cfg.sentences_per_doc.1);
        let planted = r.random_bool(cfg.signal_fraction).then(|| r.random_range(0..k));
        let mut texts: Vec<String> = (0..k)
            .map(|j| {
                if Some(j) == planted {
                    signal(&mut r, &cfg.signal_phrases, &stems)
                } else {
                    filler(&mut r, &stems, &topic, cfg)
                }
            })
            .collect();
        let echo = match planted {
            Some(p) if k > 1 && r.random_bool(cfg.echo_rate) => {
                let e = (p + r.random_range(1..k)) % k;
                texts[e] = texts[p].clone();
                Some(e)
            }
            _ => None,
        };
        let sentences: Vec<String> = texts.iter().map(|t| add_noise(t, cfg.noise_rate, &mut r)).collect();
        let intended = u8::from(planted.is_some());
        let label = u8::from(r.random_bool(if planted.is_some() {
            cfg.signal_strength
        } else {
            cfg.background_up_rate
        }));
        labels[i] = label;
        let trade = calendar[slot_of[i]];
        let era_start = if i < n_train { cfg.start_date } else { cfg.holdout_start };
        let weekend = trade - Duration::days(2);
        let filing_date = if trade.weekday() == Weekday::Mon && weekend >= era_start && r.random_bool(cfg.weekend_rate) {
            weekend
        } else {
            trade
        };
        let doc_id = format!("syn{i:06}");
        docs.push(RawDocument {
            meta: DocMeta {
                doc_id: doc_id.clone(),
                ticker: format!("SYN{:03}", i % n_tickers),
                filing_date,
                doc_type: "mda".into(),
            },
            text: sentences.join(" "),
        });
        manifest.push(ManifestRecord {
            doc_id,
            planted_index: planted,
            echo_index: echo,
            intended_label: intended,
            label,
        });
    }

    let step = Normal::new(0.0, 0.25).expect("valid normal");
    let mut volumes = BTreeMap::new();
    for t in 0..n_tickers {
        let mut r = root.derive("volume").derive_n(&[t as u64]).rng();
        let mut level: f64 = r.random_range(5e4..5e5);
        let mut v: Vec<u64> = calendar
            .iter()
            .map(|_| {
                level = (level * f64::exp(step.sample(&mut r))).clamp(1e3, 1e8);
                level.round() as u64
            })
            .collect();
        for i in (t..cfg.n_docs).step_by(n_tickers) {
            let s = slot_of[i];
            let up = v[s + 1] >= v[s];
            if up != (labels[i] == 1) {
                v.swap(s, s + 1);
                if v[s + 1] == v[s] {
                    v[s + 1] -= 1;
                }
            }
        }
        let ticker = format!("SYN{t:03}");
        volumes.insert(
            ticker.clone(),
            VolumeSeries {
                ticker,
                observations: calendar.iter().copied().zip(v).collect(),
            },
        );
    }
    Ok(Generated {
        docs,
        volumes,
        manifest,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::marketdata::{join_and_label, label_for};
    use crate::textpipe::{split_sentences, tokenize_document, Vocab};

    fn small(n: usize, seed: u64) -> GenConfig {
        GenConfig {
            n_docs: n,
            seed,
            ..Default::default()
        }
    }

    #[test]
    fn same_seed_same_bytes() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        generate_corpus(&small(60, 3)).unwrap().write(a.path()).unwrap();
        generate_corpus(&small(60, 3)).unwrap().write(b.path()).unwrap();
        for f in [CORPUS_FILE, VOLUMES_FILE, MANIFEST_FILE] {
            assert_eq!(
                std::fs::read(a.path().join(f)).unwrap(),
                std::fs::read(b.path().join(f)).unwrap(),
                "{f}"
            );
        }
        let c = generate_corpus(&small(60, 4)).unwrap();
        assert_ne!(c, generate_corpus(&small(60, 3)).unwrap());
    }

    #[test]
    fn labels_follow_the_manifest() {
        let cfg = GenConfig {
            signal_strength: 0.8,
            ..small(1000, 5)
        };
        let g = generate_corpus(&cfg).unwrap();
        // (docs, matches) for signal and background documents
        let mut sig = (0, 0);
        let mut bg = (0, 0);
        for (d, m) in g.docs.iter().zip(&g.manifest) {
            let l = label_for(&d.meta.ticker, d.meta.filing_date, &g.volumes).unwrap();
            assert_eq!(l.y, m.label);
            assert_eq!(m.intended_label, u8::from(m.planted_index.is_some()));
            let slot = if m.planted_index.is_some() { &mut sig } else { &mut bg };
            slot.0 += 1;
            slot.1 += usize::from(l.y == m.intended_label);
        }
        let rate = |(n, k): (usize, usize)| k as f64 / n as f64;
        assert!((rate(sig) - 0.8).abs() <= 0.05, "{}", rate(sig));
        assert!((rate(bg) - 0.5).abs() <= 0.06, "{}", rate(bg));
    }

    #[test]
    fn planted_index_survives_sentence_splitting() {
        let cfg = GenConfig {
            noise_rate: 0.0,
            ..small(200, 6)
        };
        let g = generate_corpus(&cfg).unwrap();
        let prefixes: Vec<&str> = DEFAULT_SIGNAL_PHRASES.iter().map(|t| t.split('{').next().unwrap()).collect();
        let vocab = Vocab::bytes_only();
        for (d, m) in g.docs.iter().zip(&g.manifest) {
            let s = split_sentences(&d.text);
            let n = s.len();
            assert!((4..=12).contains(&n), "{}: {n}", d.meta.doc_id);
            if let Some(p) = m.planted_index {
                assert!(p < n);
                assert!(prefixes.iter().any(|pre| s[p].starts_with(pre)), "{}", s[p]);
            }
            let doc = tokenize_document(d, &vocab).unwrap();
            assert_eq!(doc.len(), n);
        }
    }

    #[test]
    fn full_join_and_holdout_counts() {
        let cfg = GenConfig {
            holdout_fraction: 0.25,
            ..small(400, 7)
        };
        let g = generate_corpus(&cfg).unwrap();
        let docs: Vec<_> = g
            .docs
            .iter()
            .map(|d| tokenize_document(d, &Vocab::bytes_only()).unwrap())
            .collect();
        let (ex, rep) = join_and_label(docs, &g.volumes);
        assert_eq!(rep.total_skipped(), 0);
        assert_eq!(ex.len(), 400);
        let held = g.docs.iter().filter(|d| d.meta.filing_date >= cfg.holdout_start).count();
        assert_eq!(held, 100);
        assert!(g.docs.iter().any(|d| d.meta.filing_date.weekday() == Weekday::Sat));
    }

    #[test]
    fn default_balance_is_near_sixty_percent() {
        let g = generate_corpus(&small(2000, 8)).unwrap();
        let up = g.manifest.iter().filter(|m| m.label == 1).count() as f64 / 2000.0;
        assert!((0.56..=0.64).contains(&up), "{up}");
    }

    #[test]
    fn rejects_unlearnable_strength() {
        let cfg = GenConfig {
            signal_strength: 0.5,
            ..Default::default()
        };
        assert!(matches!(generate_corpus(&cfg), Err(Error::Config(_))));
    }
}
