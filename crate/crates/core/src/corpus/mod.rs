// SPDX-License-Identifier: MIT OR Apache-2.0

//! Token corpora, seeded sampling, tokenization and prompt fixtures.
//!
//! Corpus files are JSON lines: one document per line as an array of token
//! ids, optionally preceded by a single JSON object carrying metadata.
//!
//! ```text
//! {"source": "sample.txt", "tokenizer": "tiny-bpe"}
//! [464, 3290, 318, 257]
//! [40, 1816, 284]
//! ```

mod bpe;
mod fixtures;

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

use crate::error::{Error, Result};

pub use bpe::{bytes_to_unicode, Vocabulary};
pub use fixtures::{adversarial_prompts, PromptFixture, PromptSpec, ReferenceFixture, ReferenceLogits};

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TokenCorpus {
    pub documents: Vec<Vec<u32>>,
    pub metadata: Option<Value>,
}

impl TokenCorpus {
    pub fn new(documents: Vec<Vec<u32>>) -> Result<Self> {
        let c = Self {
            documents,
            metadata: None,
        };
        c.validate(None)?;
        Ok(c)
    }

    /// Tokenizes each text as its own document; empty texts are skipped.
    pub fn from_texts<S: AsRef<str>>(texts: &[S], vocab: &Vocabulary) -> Result<Self> {
        let documents = texts
            .iter()
            .map(|t| vocab.encode(t.as_ref()))
            .filter(|d| !matches!(d, Ok(d) if d.is_empty()))
            .collect::<Result<Vec<_>>>()?;
        Self::new(documents)
    }

    /// Non-empty, and every id below `d_vocab` when given.
    pub fn validate(&self, d_vocab: Option<usize>) -> Result<()> {
        if self.documents.is_empty() {
            return Err(Error::format("token corpus", "no documents"));
        }
        for (i, doc) in self.documents.iter().enumerate() {
            if doc.is_empty() {
                return Err(Error::format("token corpus", format!("document {i} is empty")));
            }
            if let Some(v) = d_vocab {
                if let Some(t) = doc.iter().find(|&&t| t as usize >= v) {
                    return Err(Error::Tokens(format!(
                        "document {i} contains token {t}, vocabulary size is {v}"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn parse(text: &str, d_vocab: Option<usize>) -> Result<Self> {
        let mut corpus = TokenCorpus::default();
        let mut first = true;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let value: Value = serde_json::from_str(line)
                .map_err(|e| Error::format("token corpus", format!("line {}: {e}", lineno + 1)))?;
            match value {
                Value::Object(_) if first => corpus.metadata = Some(value),
                Value::Array(items) => {
                    let doc = items
                        .iter()
                        .map(|v| {
                            v.as_u64().and_then(|t| u32::try_from(t).ok()).ok_or_else(|| {
                                Error::format(
                                    "token corpus",
                                    format!("line {}: `{v}` is not a token id", lineno + 1),
                                )
                            })
                        })
                        .collect::<Result<Vec<u32>>>()?;
                    corpus.documents.push(doc);
                }
                _ => {
                    return Err(Error::format(
                        "token corpus",
                        format!("line {}: expected an array of token ids", lineno + 1),
                    ))
                }
            }
            first = false;
        }
        corpus.validate(d_vocab)?;
        Ok(corpus)
    }

    /// Reads and validates a corpus file.
    pub fn load(path: impl AsRef<Path>, d_vocab: Option<usize>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, d_vocab)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = Vec::new();
        if let Some(meta) = &self.metadata {
            writeln!(out, "{meta}").expect("write to vec");
        }
        for doc in &self.documents {
            writeln!(out, "{}", serde_json::to_string(doc).expect("ids serialize")).expect("write to vec");
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    /// Draws `n` windows of exactly `len` tokens.
    ///
    /// Window `i` picks its document uniformly among documents with at least
    /// `len` tokens using ChaCha8 seeded with `seed` on stream `2i`, then a
    /// start offset uniformly in `0..=doc_len − len` on stream `2i + 1`.
    /// Each draw depends only on `(seed, i)`.
    pub fn sample(&self, n: usize, len: usize, seed: u64) -> Result<Vec<Vec<u32>>> {
        if len == 0 {
            return Err(Error::Config("sample length must be positive".into()));
        }
        let eligible: Vec<&Vec<u32>> = self.documents.iter().filter(|d| d.len() >= len).collect();
        if eligible.is_empty() {
            return Err(Error::format(
                "token corpus",
                format!("no document has at least {len} tokens"),
            ));
        }
        let stream_rng = |stream: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(stream);
            rng
        };
        Ok((0..n as u64)
            .map(|i| {
                let doc = eligible[stream_rng(2 * i).gen_range(0..eligible.len())];
                let start = stream_rng(2 * i + 1).gen_range(0..=doc.len() - len);
                doc[start..start + len].to_vec()
            })
            .collect())
    }
}
