// SPDX-License-Identifier: MIT OR Apache-2.0

//! Adversarial prompt fixtures and exported reference logits.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Vocabulary;
use crate::error::{Error, Result};
use crate::model::Model;

/// A prompt with the expected top-2 next tokens and their logit difference.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PromptSpec {
    pub text: &'static str,
    pub top2: (&'static str, &'static str),
    pub logit_diff: f64,
}

/// Four prompts on which the top-2 next-token logit gap is small.
pub fn adversarial_prompts() -> [PromptSpec; 4] {
    [
        PromptSpec {
            text: "It's in the cupboard, either on the top or on the",
            top2: (" bottom", " top"),
            logit_diff: 1.07,
        },
        PromptSpec {
            text: "I went to university at Michigan",
            top2: (" State", " University"),
            logit_diff: 1.89,
        },
        PromptSpec {
            text: "class MyClass:\n\tdef",
            top2: (" __", " get"),
            logit_diff: 3.02,
        },
        PromptSpec {
            text: "The church I go to is the Seventh-day Adventist",
            top2: (" Church", " church"),
            logit_diff: 0.94,
        },
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptFixture {
    pub text: String,
    pub tokens: Vec<u32>,
    pub expected_top2: (String, String),
    pub expected_logit_diff: f64,
}

impl PromptFixture {
    /// Tokenizes `spec.text`, prepending the bundle's BOS token when it has
    /// one and `bos` is set. Fails unless the text survives a round trip.
    pub fn build(spec: &PromptSpec, vocab: &Vocabulary, bos: bool) -> Result<Self> {
        let body = vocab.encode(spec.text)?;
        if vocab.decode(&body)? != spec.text {
            return Err(Error::Tokens(format!("prompt {:?} does not round-trip", spec.text)));
        }
        let mut tokens = Vec::with_capacity(body.len() + 1);
        if bos {
            tokens.extend(vocab.bos_id());
        }
        tokens.extend(body);
        Ok(Self {
            text: spec.text.to_string(),
            tokens,
            expected_top2: (spec.top2.0.to_string(), spec.top2.1.to_string()),
            expected_logit_diff: spec.logit_diff,
        })
    }

    pub fn all(vocab: &Vocabulary, bos: bool) -> Result<Vec<Self>> {
        adversarial_prompts().iter().map(|s| Self::build(s, vocab, bos)).collect()
    }

    /// Ids of the expected top-2 tokens, if each is a single token.
    pub fn expected_ids(&self, vocab: &Vocabulary) -> Option<(u32, u32)> {
        Some((vocab.id_for_text(&self.expected_top2.0)?, vocab.id_for_text(&self.expected_top2.1)?))
    }
}

/// Final-position logits for one prompt, truncated to the top-k tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceFixture {
    #[serde(default)]
    pub prompt: Option<String>,
    pub tokens: Vec<u32>,
    pub top_k_ids: Vec<u32>,
    pub logits: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceLogits {
    #[serde(default)]
    pub model_name: Option<String>,
    pub fixtures: Vec<ReferenceFixture>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReferenceCheck {
    pub max_abs_diff: f64,
    pub top2_match: bool,
}

impl ReferenceLogits {
    pub fn from_json(s: &str) -> Result<Self> {
        let r: Self = serde_json::from_str(s).map_err(|e| Error::format("reference logits", e.to_string()))?;
        for (i, f) in r.fixtures.iter().enumerate() {
            if f.top_k_ids.len() != f.logits.len() || f.tokens.is_empty() {
                return Err(Error::format(
                    "reference logits",
                    format!("fixture {i}: {} ids, {} logits, {} tokens", f.top_k_ids.len(), f.logits.len(), f.tokens.len()),
                ));
            }
        }
        Ok(r)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("fixtures serialize")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_json(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    /// Builds fixtures from `model`'s own final-position logits.
    pub fn from_model(model: &Model, prompts: &[(Option<String>, Vec<u32>)], k: usize) -> Result<Self> {
        let fixtures = prompts
            .iter()
            .map(|(prompt, tokens)| {
                let logits = final_logits(model, tokens)?;
                let mut order: Vec<usize> = (0..logits.len()).collect();
                order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
                order.truncate(k);
                Ok(ReferenceFixture {
                    prompt: prompt.clone(),
                    tokens: tokens.clone(),
                    top_k_ids: order.iter().map(|&i| i as u32).collect(),
                    logits: order.iter().map(|&i| f64::from(logits[i])).collect(),
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            model_name: Some(model.name.clone()),
            fixtures,
        })
    }

    /// Compares `model` against every fixture: largest absolute logit gap over
    /// the stored ids, and whether the stored top-2 ids are the model's top-2.
    pub fn check(&self, model: &Model) -> Result<Vec<ReferenceCheck>> {
        self.fixtures
            .iter()
            .map(|f| {
                let logits = final_logits(model, &f.tokens)?;
                let mut max_abs_diff = 0.0f64;
                for (&id, &want) in f.top_k_ids.iter().zip(&f.logits) {
                    let got = logits
                        .get(id as usize)
                        .ok_or_else(|| Error::Tokens(format!("reference id {id} outside vocabulary")))?;
                    max_abs_diff = max_abs_diff.max((f64::from(*got) - want).abs());
                }
                let top2 = top_two(&logits);
                let top2_match = f.top_k_ids.len() >= 2 && top2 == (f.top_k_ids[0], f.top_k_ids[1]);
                Ok(ReferenceCheck {
                    max_abs_diff,
                    top2_match,
                })
            })
            .collect()
    }
}

fn final_logits(model: &Model, tokens: &[u32]) -> Result<Vec<f32>> {
    let cache = model.forward(tokens, None)?;
    let logits = cache.logits()?;
    Ok(logits.row(logits.rows() - 1).to_vec())
}

fn top_two(logits: &[f32]) -> (u32, u32) {
    let mut best = (0usize, 1usize);
    if logits[1] > logits[0] {
        best = (1, 0);
    }
    for (i, &v) in logits.iter().enumerate().skip(2) {
        if v > logits[best.0] {
            best = (i, best.0);
        } else if v > logits[best.1] {
            best.1 = i;
        }
    }
    (best.0 as u32, best.1 as u32)
}
