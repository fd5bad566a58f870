// SPDX-License-Identifier: MIT OR Apache-2.0

//! GPT-2-style hooked transformer.
//!
//! The forward pass is pre-LN (`LN1 → attention → add`, `LN2 → MLP → add`)
//! and records every component's additive contribution to the residual
//! stream, so that
//!
//! ```text
//! resid_pre_0  = EMB + POS
//! resid_mid_n  = resid_pre_n + Σ_h L{n}H{h} + BIAS{n}
//! resid_post_n = resid_mid_n + MLP{n}
//! ```
//!
//! holds up to `f32` rounding. Per-head outputs are the pattern-weighted value
//! vectors mapped through that head's slice of `W_O`; the shared output bias
//! `b_O` is its own component.

mod cache;
mod forward;
pub mod ids;
pub mod io;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{GeluVariant, Matrix};

pub use cache::{ActivationCache, HeadInputKey, HeadStream};
pub use forward::ForwardOptions;
pub use ids::{ComponentId, ResidCheckpoint};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Positional {
    #[default]
    Learned,
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_head: usize,
    pub d_mlp: usize,
    pub d_vocab: usize,
    pub n_ctx: usize,
    pub ln_eps: f64,
    pub gelu: GeluVariant,
    pub positional: Positional,
}

impl Default for ModelConfig {
    /// The 4-layer, 512-wide GELU model the analysis was designed around.
    fn default() -> Self {
        Self {
            n_layers: 4,
            d_model: 512,
            n_heads: 8,
            d_head: 64,
            d_mlp: 2048,
            d_vocab: 48262,
            n_ctx: 1024,
            ln_eps: 1e-5,
            gelu: GeluVariant::Tanh,
            positional: Positional::Learned,
        }
    }
}

impl ModelConfig {
    /// Small config for tests and synthetic experiments; `d_mlp = 4·d_model`.
    pub fn tiny(n_layers: usize, d_model: usize, n_heads: usize, d_vocab: usize, n_ctx: usize) -> Self {
        Self {
            n_layers,
            d_model,
            n_heads,
            d_head: d_model / n_heads.max(1),
            d_mlp: 4 * d_model,
            d_vocab,
            n_ctx,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_head", self.d_head),
            ("d_mlp", self.d_mlp),
            ("d_vocab", self.d_vocab),
            ("n_ctx", self.n_ctx),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.n_heads * self.d_head != self.d_model {
            return Err(Error::Config(format!(
                "n_heads·d_head = {}·{} != d_model = {}",
                self.n_heads, self.d_head, self.d_model
            )));
        }
        if !(self.ln_eps >= 0.0 && self.ln_eps.is_finite()) {
            return Err(Error::Config(format!("ln_eps = {} must be finite and ≥ 0", self.ln_eps)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormWeights {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
}

impl LayerNormWeights {
    pub fn identity(d: usize) -> Self {
        Self {
            gamma: vec![1.0; d],
            beta: vec![0.0; d],
        }
    }
}

/// Parameters of one attention head.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadWeights {
    /// `d_model × d_head`
    pub w_q: Matrix,
    pub b_q: Vec<f32>,
    pub w_k: Matrix,
    pub b_k: Vec<f32>,
    pub w_v: Matrix,
    pub b_v: Vec<f32>,
    /// `d_head × d_model`
    pub w_o: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights {
    pub ln1: LayerNormWeights,
    pub heads: Vec<HeadWeights>,
    pub b_o: Vec<f32>,
    pub ln2: LayerNormWeights,
    /// `d_model × d_mlp`
    pub w_in: Matrix,
    pub b_in: Vec<f32>,
    /// `d_mlp × d_model`
    pub w_out: Matrix,
    pub b_out: Vec<f32>,
}

/// All parameter tensors. Embedding and unembedding are separate tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    /// `d_vocab × d_model`
    pub w_e: Matrix,
    /// `n_ctx × d_model`
    pub w_pos: Matrix,
    pub blocks: Vec<BlockWeights>,
    pub ln_final: LayerNormWeights,
    /// `d_model × d_vocab`
    pub w_u: Matrix,
    pub b_u: Vec<f32>,
}

impl Weights {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        let head = || HeadWeights {
            w_q: Matrix::zeros(d, cfg.d_head),
            b_q: vec![0.0; cfg.d_head],
            w_k: Matrix::zeros(d, cfg.d_head),
            b_k: vec![0.0; cfg.d_head],
            w_v: Matrix::zeros(d, cfg.d_head),
            b_v: vec![0.0; cfg.d_head],
            w_o: Matrix::zeros(cfg.d_head, d),
        };
        let block = || BlockWeights {
            ln1: LayerNormWeights::identity(d),
            heads: (0..cfg.n_heads).map(|_| head()).collect(),
            b_o: vec![0.0; d],
            ln2: LayerNormWeights::identity(d),
            w_in: Matrix::zeros(d, cfg.d_mlp),
            b_in: vec![0.0; cfg.d_mlp],
            w_out: Matrix::zeros(cfg.d_mlp, d),
            b_out: vec![0.0; d],
        };
        Self {
            w_e: Matrix::zeros(cfg.d_vocab, d),
            w_pos: Matrix::zeros(cfg.n_ctx, d),
            blocks: (0..cfg.n_layers).map(|_| block()).collect(),
            ln_final: LayerNormWeights::identity(d),
            w_u: Matrix::zeros(d, cfg.d_vocab),
            b_u: vec![0.0; cfg.d_vocab],
        }
    }

    /// Random weights with a roughly unit-scale residual stream.
    pub fn random(cfg: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut w = Self::zeros(cfg);
        let d = cfg.d_model as f32;
        let fill = |m: &mut Matrix, s: f32, rng: &mut ChaCha8Rng| {
            let (r, c) = m.shape();
            for i in 0..r {
                for j in 0..c {
                    m.set(i, j, rng.gen_range(-s..s));
                }
            }
        };
        let fill_vec = |v: &mut [f32], center: f32, s: f32, rng: &mut ChaCha8Rng| {
            for x in v {
                *x = center + rng.gen_range(-s..s);
            }
        };
        fill(&mut w.w_e, 1.0, &mut rng);
        fill(&mut w.w_pos, 0.5, &mut rng);
        let in_scale = (3.0 / d).sqrt();
        for block in &mut w.blocks {
            fill_vec(&mut block.ln1.gamma, 1.0, 0.2, &mut rng);
            fill_vec(&mut block.ln1.beta, 0.0, 0.1, &mut rng);
            for head in &mut block.heads {
                fill(&mut head.w_q, in_scale, &mut rng);
                fill(&mut head.w_k, in_scale, &mut rng);
                fill(&mut head.w_v, in_scale, &mut rng);
                fill_vec(&mut head.b_q, 0.0, 0.1, &mut rng);
                fill_vec(&mut head.b_k, 0.0, 0.1, &mut rng);
                fill_vec(&mut head.b_v, 0.0, 0.1, &mut rng);
                fill(&mut head.w_o, (3.0 / cfg.d_head as f32).sqrt() * 0.5, &mut rng);
            }
            fill_vec(&mut block.b_o, 0.0, 0.1, &mut rng);
            fill_vec(&mut block.ln2.gamma, 1.0, 0.2, &mut rng);
            fill_vec(&mut block.ln2.beta, 0.0, 0.1, &mut rng);
            fill(&mut block.w_in, in_scale, &mut rng);
            fill_vec(&mut block.b_in, 0.0, 0.1, &mut rng);
            fill(&mut block.w_out, (3.0 / cfg.d_mlp as f32).sqrt() * 0.5, &mut rng);
            fill_vec(&mut block.b_out, 0.0, 0.1, &mut rng);
        }
        fill_vec(&mut w.ln_final.gamma, 1.0, 0.2, &mut rng);
        fill_vec(&mut w.ln_final.beta, 0.0, 0.1, &mut rng);
        fill(&mut w.w_u, in_scale, &mut rng);
        fill_vec(&mut w.b_u, 0.0, 0.1, &mut rng);
        w
    }

    /// Checks every tensor against the config and rejects non-finite values.
    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        let d = cfg.d_model;
        let mat = |name: String, m: &Matrix, shape: (usize, usize)| -> Result<()> {
            if m.shape() != shape {
                return Err(Error::Shape(format!("{name}: {:?}, expected {shape:?}", m.shape())));
            }
            if !m.is_finite() {
                return Err(Error::NonFinite(name));
            }
            Ok(())
        };
        let vec = |name: String, v: &[f32], len: usize| -> Result<()> {
            if v.len() != len {
                return Err(Error::Shape(format!("{name}: length {}, expected {len}", v.len())));
            }
            if !v.iter().all(|x| x.is_finite()) {
                return Err(Error::NonFinite(name));
            }
            Ok(())
        };
        mat("embed.W_E".into(), &self.w_e, (cfg.d_vocab, d))?;
        mat("pos_embed.W_pos".into(), &self.w_pos, (cfg.n_ctx, d))?;
        if self.blocks.len() != cfg.n_layers {
            return Err(Error::Shape(format!(
                "{} blocks for {} layers",
                self.blocks.len(),
                cfg.n_layers
            )));
        }
        for (l, b) in self.blocks.iter().enumerate() {
            vec(format!("blocks.{l}.ln1.w"), &b.ln1.gamma, d)?;
            vec(format!("blocks.{l}.ln1.b"), &b.ln1.beta, d)?;
            if b.heads.len() != cfg.n_heads {
                return Err(Error::Shape(format!(
                    "blocks.{l}: {} heads, expected {}",
                    b.heads.len(),
                    cfg.n_heads
                )));
            }
            for (h, hw) in b.heads.iter().enumerate() {
                for (name, m) in [("W_Q", &hw.w_q), ("W_K", &hw.w_k), ("W_V", &hw.w_v)] {
                    mat(format!("blocks.{l}.attn.{name}[{h}]"), m, (d, cfg.d_head))?;
                }
                for (name, v) in [("b_Q", &hw.b_q), ("b_K", &hw.b_k), ("b_V", &hw.b_v)] {
                    vec(format!("blocks.{l}.attn.{name}[{h}]"), v, cfg.d_head)?;
                }
                mat(format!("blocks.{l}.attn.W_O[{h}]"), &hw.w_o, (cfg.d_head, d))?;
            }
            vec(format!("blocks.{l}.attn.b_O"), &b.b_o, d)?;
            vec(format!("blocks.{l}.ln2.w"), &b.ln2.gamma, d)?;
            vec(format!("blocks.{l}.ln2.b"), &b.ln2.beta, d)?;
            mat(format!("blocks.{l}.mlp.W_in"), &b.w_in, (d, cfg.d_mlp))?;
            vec(format!("blocks.{l}.mlp.b_in"), &b.b_in, cfg.d_mlp)?;
            mat(format!("blocks.{l}.mlp.W_out"), &b.w_out, (cfg.d_mlp, d))?;
            vec(format!("blocks.{l}.mlp.b_out"), &b.b_out, d)?;
        }
        vec("ln_final.w".into(), &self.ln_final.gamma, d)?;
        vec("ln_final.b".into(), &self.ln_final.beta, d)?;
        mat("unembed.W_U".into(), &self.w_u, (d, cfg.d_vocab))?;
        vec("unembed.b_U".into(), &self.b_u, cfg.d_vocab)?;
        Ok(())
    }
}

/// A validated config plus its weights. Immutable and shareable across threads.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub name: String,
    pub config: ModelConfig,
    pub weights: Weights,
}

impl Model {
    pub fn new(name: impl Into<String>, config: ModelConfig, weights: Weights) -> Result<Self> {
        config.validate()?;
        weights.validate(&config)?;
        Ok(Self {
            name: name.into(),
            config,
            weights,
        })
    }

    /// Random model for tests and synthetic experiments.
    pub fn random(config: ModelConfig, seed: u64) -> Result<Self> {
        let weights = Weights::random(&config, seed);
        Self::new(format!("random-{seed}"), config, weights)
    }

    pub fn validate_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::Tokens("empty token sequence".into()));
        }
        if tokens.len() > self.config.n_ctx {
            return Err(Error::Tokens(format!(
                "sequence of {} tokens exceeds n_ctx = {}",
                tokens.len(),
                self.config.n_ctx
            )));
        }
        if let Some((i, t)) = tokens
            .iter()
            .enumerate()
            .find(|(_, &t)| t as usize >= self.config.d_vocab)
        {
            return Err(Error::Tokens(format!(
                "token {t} at position {i} is outside the vocabulary of {}",
                self.config.d_vocab
            )));
        }
        Ok(())
    }
}
