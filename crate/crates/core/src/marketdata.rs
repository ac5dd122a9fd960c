//! Daily trading volumes, volume-direction labels and dataset splits.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use chrono::NaiveDate;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::RngStream;
use crate::textpipe::Document;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VolumeSeries {
    pub ticker: String,
    /// Strictly increasing trading dates with their volume.
    pub observations: Vec<(NaiveDate, u64)>,
}

impl VolumeSeries {
    /// Index of the first trading date on or after `d`.
    pub fn first_on_or_after(&self, d: NaiveDate) -> Option<usize> {
        let i = self.observations.partition_point(|(t, _)| *t < d);
        (i < self.observations.len()).then_some(i)
    }
}

pub type Volumes = BTreeMap<String, VolumeSeries>;

#[derive(Debug, Deserialize, Serialize)]
struct VolumeRow {
    date: String,
    ticker: String,
    volume: String,
}

/// Reads a `date,ticker,volume` CSV into per-ticker date-sorted series.
pub fn load_volume_csv(path: &Path) -> Result<Volumes> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: 0,
            msg: e.to_string(),
        })?;
    let parse_err = |line: u64, msg: String| Error::Parse {
        path: path.display().to_string(),
        line: line as usize,
        msg,
    };
    let headers = rdr.headers().map_err(|e| parse_err(1, e.to_string()))?.clone();
    if headers.iter().collect::<Vec<_>>() != ["date", "ticker", "volume"] {
        return Err(parse_err(1, format!("expected header date,ticker,volume, got {headers:?}")));
    }
    let mut seen: HashMap<(NaiveDate, String), u64> = HashMap::new();
    let mut grouped: BTreeMap<String, Vec<(NaiveDate, u64)>> = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        let row: VolumeRow = rec
            .deserialize(Some(&headers))
            .map_err(|e| parse_err(line, e.to_string()))?;
        let date = NaiveDate::parse_from_str(&row.date, "%Y-%m-%d")
            .map_err(|e| parse_err(line, format!("bad date {:?}: {e}", row.date)))?;
        if row.ticker.is_empty() {
            return Err(parse_err(line, "empty ticker".into()));
        }
        let volume: i128 = row
            .volume
            .parse()
            .map_err(|e| parse_err(line, format!("bad volume {:?}: {e}", row.volume)))?;
        if volume < 0 {
            return Err(parse_err(line, format!("negative volume {volume}")));
        }
        let volume = u64::try_from(volume).map_err(|_| parse_err(line, "volume out of range".into()))?;
        if let Some(first) = seen.insert((date, row.ticker.clone()), line) {
            return Err(parse_err(
                line,
                format!("duplicate ({date}, {}) first seen on line {first}", row.ticker),
            ));
        }
        grouped.entry(row.ticker).or_default().push((date, volume));
    }
    Ok(grouped
        .into_iter()
        .map(|(ticker, mut observations)| {
            observations.sort_unstable();
            (ticker.clone(), VolumeSeries { ticker, observations })
        })
        .collect())
}

pub fn write_volume_csv(path: &Path, volumes: &Volumes) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let csv_err = |e: csv::Error| Error::Data(format!("{}: {e}", path.display()));
    w.write_record(["date", "ticker", "volume"]).map_err(csv_err)?;
    let mut rows: Vec<(NaiveDate, &str, u64)> = volumes
        .values()
        .flat_map(|s| s.observations.iter().map(|(d, v)| (*d, s.ticker.as_str(), *v)))
        .collect();
    rows.sort_unstable();
    for (d, t, v) in rows {
        w.write_record([d.format("%Y-%m-%d").to_string(), t.to_string(), v.to_string()])
            .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Volume-direction label of one filing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Label {
    /// 1 when `v_d1 >= v_d`.
    pub y: u8,
    pub v_d: u64,
    pub v_d1: u64,
    /// Trading dates the two volumes were taken from.
    pub dates: (NaiveDate, NaiveDate),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum SkipReason {
    NoSeries,
    NoTradingDate,
    NoNextTradingDate,
}

impl SkipReason {
    pub fn as_str(self) -> &'static str {
        match self {
            SkipReason::NoSeries => "no volume series",
            SkipReason::NoTradingDate => "no trading date on or after filing",
            SkipReason::NoNextTradingDate => "no next trading date",
        }
    }
}

impl std::fmt::Display for SkipReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// `V_D` is the volume on the first trading date on or after `filing_date`,
/// `V_{D+1}` the volume on the trading date after that.
pub fn label_for(
    ticker: &str,
    filing_date: NaiveDate,
    volumes: &Volumes,
) -> std::result::Result<Label, SkipReason> {
    let s = volumes.get(ticker).ok_or(SkipReason::NoSeries)?;
    let i = s.first_on_or_after(filing_date).ok_or(SkipReason::NoTradingDate)?;
    let (d0, v_d) = s.observations[i];
    let (d1, v_d1) = *s.observations.get(i + 1).ok_or(SkipReason::NoNextTradingDate)?;
    Ok(Label {
        y: u8::from(v_d1 >= v_d),
        v_d,
        v_d1,
        dates: (d0, d1),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledExample {
    pub doc: Document,
    pub label: Label,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct JoinReport {
    pub labeled: usize,
    pub skipped: BTreeMap<String, usize>,
    /// Share of labeled examples with `y = 1`.
    pub up_fraction: f64,
}

impl JoinReport {
    pub fn total_skipped(&self) -> usize {
        self.skipped.values().sum()
    }
}

pub fn up_fraction(examples: &[LabeledExample]) -> f64 {
    if examples.is_empty() {
        return 0.0;
    }
    examples.iter().filter(|e| e.label.y == 1).count() as f64 / examples.len() as f64
}

/// Labels every document whose volumes resolve; the rest are counted by reason.
pub fn join_and_label(docs: Vec<Document>, volumes: &Volumes) -> (Vec<LabeledExample>, JoinReport) {
    let mut report = JoinReport::default();
    let mut out = Vec::new();
    for doc in docs {
        match label_for(&doc.meta.ticker, doc.meta.filing_date, volumes) {
            Ok(label) => out.push(LabeledExample { doc, label }),
            Err(r) => *report.skipped.entry(r.to_string()).or_default() += 1,
        }
    }
    report.labeled = out.len();
    report.up_fraction = up_fraction(&out);
    (out, report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSpec {
    pub holdout_start: NaiveDate,
    /// Share of the holdout assigned to validation; the rest is test.
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            holdout_start: NaiveDate::from_ymd_opt(2018, 1, 1).unwrap(),
            val_fraction: 0.5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Splits {
    pub train: Vec<LabeledExample>,
    pub val: Vec<LabeledExample>,
    pub test: Vec<LabeledExample>,
}

impl Splits {
    pub fn get(&self, s: Split) -> &[LabeledExample] {
        match s {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn check_leakage(&self, holdout_start: NaiveDate) -> Result<()> {
        match self.train.iter().find(|e| e.doc.meta.filing_date >= holdout_start) {
            Some(e) => Err(Error::Data(format!(
                "train document {} dated {} is not before {holdout_start}",
                e.doc.meta.doc_id, e.doc.meta.filing_date
            ))),
            None => Ok(()),
        }
    }
}

/// Train = filings before `holdout_start`; the holdout is shuffled with the
/// seed and its first `round(val_fraction · n)` examples become validation.
pub fn split_dataset(examples: Vec<LabeledExample>, spec: &SplitSpec) -> Result<Splits> {
    if !(0.0..=1.0).contains(&spec.val_fraction) {
        return Err(Error::Config("val_fraction must be in [0, 1]".into()));
    }
    let (train, mut holdout): (Vec<_>, Vec<_>) = examples
        .into_iter()
        .partition(|e| e.doc.meta.filing_date < spec.holdout_start);
    if holdout.is_empty() {
        return Err(Error::Data(format!("no examples on or after {}", spec.holdout_start)));
    }
    holdout.sort_by(|a, b| a.doc.meta.doc_id.cmp(&b.doc.meta.doc_id));
    holdout.shuffle(&mut RngStream::new(spec.seed, "split").rng());
    let n_val = (spec.val_fraction * holdout.len() as f64).round() as usize;
    let test = holdout.split_off(n_val);
    let splits = Splits {
        train,
        val: holdout,
        test,
    };
    splits.check_leakage(spec.holdout_start)?;
    Ok(splits)
}

/// One line of the labeled dataset file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelRecord {
    pub doc_id: String,
    pub ticker: String,
    pub filing_date: NaiveDate,
    #[serde(rename = "Y")]
    pub y: u8,
    #[serde(rename = "V_D")]
    pub v_d: u64,
    #[serde(rename = "V_D1")]
    pub v_d1: u64,
    pub split: Split,
}

pub fn label_records(splits: &Splits) -> Vec<LabelRecord> {
    [Split::Train, Split::Val, Split::Test]
        .into_iter()
        .flat_map(|s| {
            splits.get(s).iter().map(move |e| LabelRecord {
                doc_id: e.doc.meta.doc_id.clone(),
                ticker: e.doc.meta.ticker.clone(),
                filing_date: e.doc.meta.filing_date,
                y: e.label.y,
                v_d: e.label.v_d,
                v_d1: e.label.v_d1,
                split: s,
            })
        })
        .collect()
}

/// Rebuilds splits from a labeled dataset file and the tokenized documents it
/// refers to. Trading dates are not stored, so they come back as the filing date.
pub fn attach_labels(docs: Vec<Document>, records: &[LabelRecord]) -> Result<Splits> {
    let mut by_id: HashMap<String, Document> = docs.into_iter().map(|d| (d.meta.doc_id.clone(), d)).collect();
    let mut splits = Splits::default();
    for r in records {
        let doc = by_id
            .remove(&r.doc_id)
            .ok_or_else(|| Error::Data(format!("labeled document {} not found (or listed twice)", r.doc_id)))?;
        if r.y > 1 {
            return Err(Error::Data(format!("document {} has label {}", r.doc_id, r.y)));
        }
        let ex = LabeledExample {
            label: Label {
                y: r.y,
                v_d: r.v_d,
                v_d1: r.v_d1,
                dates: (r.filing_date, r.filing_date),
            },
            doc,
        };
        match r.split {
            Split::Train => splits.train.push(ex),
            Split::Val => splits.val.push(ex),
            Split::Test => splits.test.push(ex),
        }
    }
    Ok(splits)
}
