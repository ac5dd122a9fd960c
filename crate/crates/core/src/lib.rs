pub mod attnviz;
pub mod cli;
pub mod corpusgen;
pub mod error;
pub mod eval;
pub mod hiermodel;
pub mod jsonl;
pub mod marketdata;
pub mod numerics;
pub mod reformer;
pub mod textpipe;
pub mod training;

pub use error::{Error, Result};
