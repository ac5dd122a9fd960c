//! Byte-level BPE: trainer, encoder and the vocab file format.
//!
//! Ids `0..5` are the specials, `5..261` the 256 single bytes, and every merge
//! adds one id after that, in merge order.
//!
//! Vocab file (UTF-8, one rule per line):
//!
//! ```text
//! #hierformer-bpe v1
//! special 0 <pad>
//! ...
//! merge <left> <right>
//! ```
//!
//! Tokens are written as their bytes with printable ASCII other than `%` kept
//! literally and everything else as `%XX`.

use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const MASK: u32 = 3;
pub const UNK: u32 = 4;
pub const SPECIALS: [&str; 5] = ["<pad>", "<bos>", "<eos>", "<mask>", "<unk>"];
pub const N_SPECIALS: u32 = SPECIALS.len() as u32;
const BYTE_BASE: u32 = N_SPECIALS;
const FIRST_MERGE: u32 = BYTE_BASE + 256;
const HEADER: &str = "#hierformer-bpe v1";

#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    merges: Vec<(u32, u32)>,
    tokens: Vec<Vec<u8>>,
    ranks: HashMap<(u32, u32), u32>,
    token_to_id: HashMap<Vec<u8>, u32>,
}

/// Splits text into chunks of leading whitespace plus one non-space run.
/// Concatenating the chunks gives back the input.
pub fn pre_tokenize(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start = 0;
    let mut prev_space = true;
    for (i, c) in text.char_indices() {
        let space = c.is_whitespace();
        if space && !prev_space {
            out.push(&text[start..i]);
            start = i;
        }
        prev_space = space;
    }
    if start < text.len() {
        out.push(&text[start..]);
    }
    out
}

impl Vocab {
    /// Bytes only, no merges.
    pub fn bytes_only() -> Self {
        Self::from_merges(Vec::new()).expect("byte vocab")
    }

    pub fn from_merges(merges: Vec<(u32, u32)>) -> Result<Self> {
        let mut tokens: Vec<Vec<u8>> = SPECIALS.iter().map(|s| s.as_bytes().to_vec()).collect();
        tokens.extend((0..=255u8).map(|b| vec![b]));
        let mut ranks = HashMap::new();
        for (r, &(a, b)) in merges.iter().enumerate() {
            let n = tokens.len() as u32;
            if a < BYTE_BASE || b < BYTE_BASE || a >= n || b >= n {
                return Err(Error::Data(format!("merge {r} refers to invalid ids ({a}, {b})")));
            }
            let mut t = tokens[a as usize].clone();
            t.extend_from_slice(&tokens[b as usize]);
            tokens.push(t);
            ranks.insert((a, b), r as u32);
        }
        let token_to_id = tokens
            .iter()
            .enumerate()
            .skip(BYTE_BASE as usize)
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Ok(Vocab {
            merges,
            tokens,
            ranks,
            token_to_id,
        })
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn merges(&self) -> &[(u32, u32)] {
        &self.merges
    }

    pub fn token_bytes(&self, id: u32) -> Option<&[u8]> {
        self.tokens.get(id as usize).map(|t| t.as_slice())
    }

    pub fn id_of(&self, bytes: &[u8]) -> Option<u32> {
        self.token_to_id.get(bytes).copied()
    }

    pub fn is_special(id: u32) -> bool {
        id < N_SPECIALS
    }

    /// Content ids of `text` (no BOS/EOS).
    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut out = Vec::new();
        for chunk in pre_tokenize(text) {
            out.extend(self.encode_chunk(chunk.as_bytes()));
        }
        out
    }

    fn encode_chunk(&self, bytes: &[u8]) -> Vec<u32> {
        let mut ids: Vec<u32> = bytes.iter().map(|&b| BYTE_BASE + b as u32).collect();
        while ids.len() > 1 {
            let best = ids
                .windows(2)
                .enumerate()
                .filter_map(|(i, w)| self.ranks.get(&(w[0], w[1])).map(|&r| (r, i)))
                .min();
            let Some((rank, _)) = best else { break };
            let (a, b) = self.merges[rank as usize];
            let new = FIRST_MERGE + rank;
            let mut merged = Vec::with_capacity(ids.len());
            let mut i = 0;
            while i < ids.len() {
                if i + 1 < ids.len() && ids[i] == a && ids[i + 1] == b {
                    merged.push(new);
                    i += 2;
                } else {
                    merged.push(ids[i]);
                    i += 1;
                }
            }
            ids = merged;
        }
        ids
    }

    /// Concatenated bytes of the non-special ids, as (lossy) UTF-8.
    pub fn decode(&self, ids: &[u32]) -> String {
        let mut bytes = Vec::new();
        for &id in ids {
            if !Self::is_special(id) {
                if let Some(t) = self.tokens.get(id as usize) {
                    bytes.extend_from_slice(t);
                }
            }
        }
        String::from_utf8_lossy(&bytes).into_owned()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from(HEADER);
        s.push('\n');
        for (i, name) in SPECIALS.iter().enumerate() {
            s.push_str(&format!("special {i} {name}\n"));
        }
        for &(a, b) in &self.merges {
            s.push_str(&format!(
                "merge {} {}\n",
                escape(&self.tokens[a as usize]),
                escape(&self.tokens[b as usize])
            ));
        }
        s
    }

    pub fn from_text(text: &str, path: &str) -> Result<Self> {
        let err = |line: usize, msg: String| Error::Parse {
            path: path.to_string(),
            line,
            msg,
        };
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.trim() == HEADER => {}
            _ => return Err(err(1, format!("expected header {HEADER:?}"))),
        }
        let mut partial = Vocab::bytes_only();
        let mut merges = Vec::new();
        let mut n_specials = 0;
        for (i, line) in lines {
            let lineno = i + 1;
            let parts: Vec<&str> = line.split(' ').collect();
            match parts.as_slice() {
                [] | [""] => continue,
                ["special", id, name] => {
                    let id: u32 = id.parse().map_err(|_| err(lineno, "bad special id".into()))?;
                    if id as usize >= SPECIALS.len() || SPECIALS[id as usize] != *name {
                        return Err(err(lineno, format!("unexpected special {id} {name}")));
                    }
                    n_specials += 1;
                }
                ["merge", a, b] => {
                    let lookup = |s: &str| {
                        let bytes = unescape(s).ok_or_else(|| err(lineno, format!("bad token {s:?}")))?;
                        partial
                            .id_of(&bytes)
                            .ok_or_else(|| err(lineno, format!("unknown token {s:?}")))
                    };
                    let pair = (lookup(a)?, lookup(b)?);
                    merges.push(pair);
                    let mut t = partial.tokens[pair.0 as usize].clone();
                    t.extend_from_slice(&partial.tokens[pair.1 as usize]);
                    let id = partial.tokens.len() as u32;
                    partial.token_to_id.entry(t.clone()).or_insert(id);
                    partial.tokens.push(t);
                }
                _ => return Err(err(lineno, format!("unrecognized line {line:?}"))),
            }
        }
        if n_specials != SPECIALS.len() {
            return Err(err(0, "missing special token lines".into()));
        }
        Vocab::from_merges(merges)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text, &path.display().to_string())
    }
}

fn escape(bytes: &[u8]) -> String {
    let mut s = String::new();
    for &b in bytes {
        if b.is_ascii_graphic() && b != b'%' {
            s.push(b as char);
        } else {
            s.push_str(&format!("%{b:02X}"));
        }
    }
    s
}

fn unescape(s: &str) -> Option<Vec<u8>> {
    let b = s.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < b.len() {
        if b[i] == b'%' {
            let hex = std::str::from_utf8(b.get(i + 1..i + 3)?).ok()?;
            out.push(u8::from_str_radix(hex, 16).ok()?);
            i += 3;
        } else {
            out.push(b[i]);
            i += 1;
        }
    }
    (!out.is_empty()).then_some(out)
}

/// Greedy byte-pair merging until `vocab_size` ids exist or no pair occurs
/// twice. Ties go to the lexicographically smallest `(left bytes, right bytes)`.
pub fn train_bpe<'a, I>(corpus: I, vocab_size: usize) -> Result<Vocab>
where
    I: IntoIterator<Item = &'a str>,
{
    let base = FIRST_MERGE as usize;
    if vocab_size < base {
        return Err(Error::Config(format!(
            "vocab_size {vocab_size} below the {base} byte and special ids"
        )));
    }
    let mut counts: HashMap<&'a str, u64> = HashMap::new();
    let mut any = false;
    for line in corpus {
        any |= !line.is_empty();
        for chunk in pre_tokenize(line) {
            *counts.entry(chunk).or_default() += 1;
        }
    }
    if !any {
        return Err(Error::Data("empty corpus".into()));
    }
    let mut words: Vec<(Vec<u32>, u64)> = counts
        .into_iter()
        .map(|(w, c)| (w.bytes().map(|b| BYTE_BASE + b as u32).collect(), c))
        .collect();
    words.sort();

    let mut vocab = Vocab::bytes_only();
    let mut pairs: HashMap<(u32, u32), u64> = HashMap::new();
    for (w, c) in &words {
        for p in w.windows(2) {
            *pairs.entry((p[0], p[1])).or_default() += c;
        }
    }
    while vocab.size() < vocab_size {
        let best = pairs
            .iter()
            .filter(|(_, &c)| c >= 2)
            .max_by(|(pa, ca), (pb, cb)| {
                ca.cmp(cb).then_with(|| {
                    let ka = (&vocab.tokens[pa.0 as usize], &vocab.tokens[pa.1 as usize]);
                    let kb = (&vocab.tokens[pb.0 as usize], &vocab.tokens[pb.1 as usize]);
                    kb.cmp(&ka)
                })
            })
            .map(|(p, _)| *p);
        let Some((a, b)) = best else { break };
        let new = vocab.tokens.len() as u32;
        for (w, c) in words.iter_mut() {
            if !w.windows(2).any(|p| p[0] == a && p[1] == b) {
                continue;
            }
            for p in w.windows(2) {
                let e = pairs.get_mut(&(p[0], p[1])).expect("counted pair");
                *e -= *c;
            }
            let mut merged = Vec::with_capacity(w.len());
            let mut i = 0;
            while i < w.len() {
                if i + 1 < w.len() && w[i] == a && w[i + 1] == b {
                    merged.push(new);
                    i += 2;
                } else {
                    merged.push(w[i]);
                    i += 1;
                }
            }
            for p in merged.windows(2) {
                *pairs.entry((p[0], p[1])).or_default() += *c;
            }
            *w = merged;
        }
        pairs.retain(|_, c| *c > 0);
        let mut t = vocab.tokens[a as usize].clone();
        t.extend_from_slice(&vocab.tokens[b as usize]);
        vocab.ranks.insert((a, b), vocab.merges.len() as u32);
        vocab.merges.push((a, b));
        vocab.token_to_id.entry(t.clone()).or_insert(new);
        vocab.tokens.push(t);
    }
    Ok(vocab)
}
