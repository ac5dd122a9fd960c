//! Tokenization, sentence segmentation and document assembly.

pub mod bpe;
pub mod sentences;

use std::path::Path;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::jsonl;

pub use bpe::{train_bpe, Vocab, BOS, EOS, MASK, PAD, UNK};
pub use sentences::split_sentences;

pub const MAX_SENTENCE_LEN: usize = 128;
pub const MAX_SENTENCES: usize = 512;

/// Ids of one sentence, BOS first and EOS last.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<u32>", into = "Vec<u32>")]
pub struct TokenizedSentence(Vec<u32>);

impl TokenizedSentence {
    pub fn new(ids: Vec<u32>) -> Result<Self> {
        let n = ids.len();
        if !(2..=MAX_SENTENCE_LEN).contains(&n) || ids[0] != BOS || ids[n - 1] != EOS {
            return Err(Error::Data(format!(
                "sentence must be BOS .. EOS with 2..={MAX_SENTENCE_LEN} ids, got {n}"
            )));
        }
        Ok(TokenizedSentence(ids))
    }

    /// Wraps ids without checks (masked sentences are all MASK).
    pub fn raw(ids: Vec<u32>) -> Self {
        TokenizedSentence(ids)
    }

    pub fn ids(&self) -> &[u32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl TryFrom<Vec<u32>> for TokenizedSentence {
    type Error = Error;
    fn try_from(v: Vec<u32>) -> Result<Self> {
        // masked sentences may lose their BOS/EOS, so only length is checked here
        if v.is_empty() || v.len() > MAX_SENTENCE_LEN {
            return Err(Error::Data(format!("sentence length {} out of range", v.len())));
        }
        Ok(TokenizedSentence(v))
    }
}

impl From<TokenizedSentence> for Vec<u32> {
    fn from(s: TokenizedSentence) -> Self {
        s.0
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DocMeta {
    pub doc_id: String,
    pub ticker: String,
    pub filing_date: NaiveDate,
    pub doc_type: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawDocument {
    #[serde(flatten)]
    pub meta: DocMeta,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    #[serde(flatten)]
    pub meta: DocMeta,
    pub sentences: Vec<TokenizedSentence>,
}

impl Document {
    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=MAX_SENTENCES).contains(&self.sentences.len()) {
            return Err(Error::Data(format!(
                "document {} has {} sentences",
                self.meta.doc_id,
                self.sentences.len()
            )));
        }
        Ok(())
    }
}

/// BPE-encodes `text` between BOS and EOS, keeping the first 126 content ids.
pub fn encode_sentence(text: &str, vocab: &Vocab) -> Result<TokenizedSentence> {
    let text = text.trim();
    if text.is_empty() {
        return Err(Error::Data("cannot encode an empty sentence".into()));
    }
    let mut ids = Vec::with_capacity(MAX_SENTENCE_LEN);
    ids.push(BOS);
    ids.extend(vocab.encode(text).into_iter().take(MAX_SENTENCE_LEN - 2));
    ids.push(EOS);
    TokenizedSentence::new(ids)
}

/// Encodes the non-empty sentences, keeping the first 512.
pub fn build_document<S: AsRef<str>>(meta: DocMeta, texts: &[S], vocab: &Vocab) -> Result<Document> {
    let sentences = texts
        .iter()
        .map(|t| t.as_ref())
        .filter(|t| !t.trim().is_empty())
        .take(MAX_SENTENCES)
        .map(|t| encode_sentence(t, vocab))
        .collect::<Result<Vec<_>>>()?;
    if sentences.is_empty() {
        return Err(Error::Data(format!("document {} has no usable sentences", meta.doc_id)));
    }
    Ok(Document { meta, sentences })
}

/// Splits and encodes a raw record.
pub fn tokenize_document(raw: &RawDocument, vocab: &Vocab) -> Result<Document> {
    build_document(raw.meta.clone(), &split_sentences(&raw.text), vocab)
}

pub fn read_raw_corpus(path: &Path) -> Result<Vec<RawDocument>> {
    jsonl::read(path)
}

pub fn read_documents(path: &Path) -> Result<Vec<Document>> {
    let docs: Vec<Document> = jsonl::read(path)?;
    for d in &docs {
        d.validate()?;
    }
    Ok(docs)
}

pub fn write_documents(path: &Path, docs: &[Document]) -> Result<()> {
    jsonl::write(path, docs)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn meta() -> DocMeta {
        DocMeta {
            doc_id: "d1".into(),
            ticker: "ABC".into(),
            filing_date: NaiveDate::from_ymd_opt(2017, 3, 4).unwrap(),
            doc_type: "news_release".into(),
        }
    }

    #[test]
    fn lengths_follow_encoding_rules() {
        let v = Vocab::bytes_only();
        assert_eq!(encode_sentence("abcde", &v).unwrap().len(), 7);
        let long = "x".repeat(500);
        let s = encode_sentence(&long, &v).unwrap();
        assert_eq!(s.len(), 128);
        assert_eq!(*s.ids().last().unwrap(), EOS);
        assert_eq!(s.ids()[0], BOS);
        assert!(encode_sentence("  ", &v).is_err());
        let d = build_document(meta(), &["abcde".to_string(), "y".repeat(200)], &v).unwrap();
        let lens: Vec<usize> = d.sentences.iter().map(|s| s.len()).collect();
        assert_eq!(lens, vec![7, 128]);
    }

    #[test]
    fn round_trip_without_truncation() {
        let v = train_bpe(["Net income rose sharply", "Net income fell"], 300).unwrap();
        let s = encode_sentence("Net income rose sharply", &v).unwrap();
        assert_eq!(v.decode(s.ids()), "Net income rose sharply");
        assert!(!s.ids()[1..s.len() - 1].iter().any(|&i| i == PAD || i == MASK));
    }

    #[test]
    fn document_caps_keep_prefix() {
        let v = Vocab::bytes_only();
        let texts: Vec<String> = (0..600).map(|i| format!("s{i}")).collect();
        let d = build_document(meta(), &texts, &v).unwrap();
        assert_eq!(d.len(), 512);
        assert_eq!(v.decode(d.sentences[511].ids()), "s511");
        assert!(build_document(meta(), &["", " "], &v).is_err());
    }

    #[test]
    fn jsonl_round_trip() {
        let v = Vocab::bytes_only();
        let d = build_document(meta(), &["Hi there.", "Bye."], &v).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.jsonl");
        write_documents(&p, std::slice::from_ref(&d)).unwrap();
        assert_eq!(read_documents(&p).unwrap(), vec![d]);
        let line = std::fs::read_to_string(&p).unwrap();
        assert!(line.contains("\"filing_date\":\"2017-03-04\""));
    }
}
