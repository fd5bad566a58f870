// SPDX-License-Identifier: MIT OR Apache-2.0

//! Direct logit attribution with a frozen final layer norm.
//!
//! The final layer norm is linearized with the per-position scale recorded
//! on the clean forward pass. A component vector `x` at position `p` then
//! contributes
//!
//! ```text
//! dla(x) = ((x − mean(x)) · scale[p] ⊙ γ_final) · W_U
//! ```
//!
//! to the logits. Summed over every component, plus the constant row
//! `β_final · W_U + b_U`, this reconstructs the model's logits. The constant
//! row is never attributed to a component.
//!
//! The DLA at position `p` describes the prediction of token `p + 1`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::interventions::vcomposition_plan;
use crate::kernels::{self, Matrix};
use crate::model::{ActivationCache, ComponentId, ForwardOptions, Model};

/// The two tokens whose logit difference is attributed, at one position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogitDiffSpec {
    pub token_a: u32,
    pub token_b: u32,
    pub position: usize,
}

impl LogitDiffSpec {
    pub fn swapped(&self) -> Self {
        Self {
            token_a: self.token_b,
            token_b: self.token_a,
            position: self.position,
        }
    }

    pub fn validate(&self, d_vocab: usize, seq_len: usize) -> Result<()> {
        if self.token_a == self.token_b {
            return Err(Error::Tokens(format!("logit diff of token {} with itself", self.token_a)));
        }
        if self.token_a as usize >= d_vocab || self.token_b as usize >= d_vocab {
            return Err(Error::Tokens(format!(
                "tokens ({}, {}) outside vocabulary of {d_vocab}",
                self.token_a, self.token_b
            )));
        }
        if self.position >= seq_len {
            return Err(Error::Tokens(format!(
                "position {} beyond sequence length {seq_len}",
                self.position
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DlaResult {
    pub component: ComponentId,
    pub position: usize,
    pub logit_contribution: Vec<f32>,
    pub frozen_scale: f32,
}

fn frozen_scale(cache: &ActivationCache, pos: usize) -> Result<f64> {
    let s = *cache
        .final_ln_scale()
        .get(pos)
        .ok_or_else(|| Error::Tokens(format!("position {pos} has no final layer-norm scale")))?;
    if !(s > 0.0 && s.is_finite()) {
        return Err(Error::Invariant(format!("final layer-norm scale {s} at position {pos}")));
    }
    Ok(f64::from(s))
}

/// Mean-centres `x`, applies the frozen scale and `γ_final`.
fn folded_input(model: &Model, x: &[f32], scale: f64) -> Result<Vec<f32>> {
    let gamma = &model.weights.ln_final.gamma;
    if x.len() != gamma.len() {
        return Err(Error::Shape(format!("component vector of length {}", x.len())));
    }
    let (mean, _) = kernels::mean_var(x);
    Ok(x
        .iter()
        .zip(gamma)
        .map(|(&v, &g)| ((f64::from(v) - mean) * scale * f64::from(g)) as f32)
        .collect())
}

/// DLA of an arbitrary residual-space vector under a given frozen scale.
pub fn dla_vector(model: &Model, x: &[f32], scale: f64) -> Result<Vec<f32>> {
    let v = Matrix::from_vec(1, x.len(), folded_input(model, x, scale)?)?;
    Ok(kernels::matmul(&v, &model.weights.w_u)?.into_vec())
}

/// The constant row `β_final · W_U + b_U`.
pub fn constant_term(model: &Model) -> Result<Vec<f32>> {
    let beta = Matrix::from_vec(1, model.config.d_model, model.weights.ln_final.beta.clone())?;
    let mut out = kernels::matmul(&beta, &model.weights.w_u)?;
    out.add_row_bias(&model.weights.b_u)?;
    Ok(out.into_vec())
}

/// Full-vocabulary DLA of component `c` at `pos`.
pub fn dla(model: &Model, cache: &ActivationCache, c: ComponentId, pos: usize) -> Result<DlaResult> {
    c.validate(&model.config)?;
    let scale = frozen_scale(cache, pos)?;
    let out = cache.component_output(c)?;
    if pos >= out.rows() {
        return Err(Error::Tokens(format!("position {pos} beyond sequence length {}", out.rows())));
    }
    Ok(DlaResult {
        component: c,
        position: pos,
        logit_contribution: dla_vector(model, out.row(pos), scale)?,
        frozen_scale: scale as f32,
    })
}

/// `γ_final ⊙ (W_U[:, a] − W_U[:, b])`: the residual direction whose frozen-LN
/// readout is the logit difference.
pub fn logit_diff_direction(model: &Model, token_a: u32, token_b: u32) -> Vec<f64> {
    let w_u = &model.weights.w_u;
    let (a, b) = (token_a as usize, token_b as usize);
    model
        .weights
        .ln_final
        .gamma
        .iter()
        .enumerate()
        .map(|(i, &g)| f64::from(g) * (f64::from(w_u.get(i, a)) - f64::from(w_u.get(i, b))))
        .collect()
}

/// Logit-difference DLA of a residual-space vector.
pub fn logit_diff_of_vector(x: &[f32], direction: &[f64], scale: f64) -> f64 {
    let (mean, _) = kernels::mean_var(x);
    let mut acc = 0.0;
    for (&v, &d) in x.iter().zip(direction) {
        acc += (f64::from(v) - mean) * d;
    }
    acc * scale
}

/// `dla(c)[token_a] − dla(c)[token_b]` at `spec.position`.
pub fn logit_diff(model: &Model, cache: &ActivationCache, c: ComponentId, spec: &LogitDiffSpec) -> Result<f64> {
    c.validate(&model.config)?;
    spec.validate(model.config.d_vocab, cache.seq_len())?;
    let scale = frozen_scale(cache, spec.position)?;
    let x = cache.component_output(c)?.row(spec.position);
    let dir = logit_diff_direction(model, spec.token_a, spec.token_b);
    Ok(logit_diff_of_vector(x, &dir, scale))
}

/// The two highest logits at `pos`; ties go to the lower token id.
pub fn top2(cache: &ActivationCache, pos: usize) -> Result<LogitDiffSpec> {
    let logits = cache.logits()?;
    if pos >= logits.rows() {
        return Err(Error::Tokens(format!("position {pos} beyond sequence length {}", logits.rows())));
    }
    if logits.cols() < 2 {
        return Err(Error::Tokens("vocabulary has fewer than two tokens".into()));
    }
    let row = logits.row(pos);
    let mut best: (usize, f32) = (0, row[0]);
    let mut second: Option<(usize, f32)> = None;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > best.1 {
            second = Some(best);
            best = (i, v);
        } else if second.is_none_or(|s| v > s.1) {
            second = Some((i, v));
        }
    }
    let second = second.expect("at least two logits");
    Ok(LogitDiffSpec {
        token_a: best.0 as u32,
        token_b: second.0 as u32,
        position: pos,
    })
}

/// Writer and erasure logit-difference DLA at one position.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DlaPair {
    pub spec: LogitDiffSpec,
    pub writer_dla: f64,
    pub erasure_dla: f64,
    /// `logits[a] − logits[b]` on the clean run.
    pub model_logit_diff: f64,
}

/// Writer DLA and the erasure-isolated DLA of `erasers` for every position,
/// each measured on that position's clean top-2 tokens.
///
/// The erasure part of an eraser's output is its clean output minus its
/// output when the writer is removed from its value input. Both readouts use
/// the clean run's frozen layer-norm scale.
pub fn erasure_isolated_dla_all(
    model: &Model,
    tokens: &[u32],
    writer: ComponentId,
    erasers: &[(usize, usize)],
) -> Result<Vec<DlaPair>> {
    let clean = model.forward(tokens, None)?;
    let specs = (0..tokens.len())
        .map(|p| top2(&clean, p))
        .collect::<Result<Vec<_>>>()?;
    erasure_pairs(model, &clean, tokens, writer, erasers, &specs)
}

/// [`erasure_isolated_dla_all`] restricted to one logit-difference spec.
pub fn erasure_isolated_dla(
    model: &Model,
    tokens: &[u32],
    writer: ComponentId,
    erasers: &[(usize, usize)],
    spec: &LogitDiffSpec,
) -> Result<(f64, f64)> {
    let clean = model.forward(tokens, None)?;
    let pair = erasure_pairs(model, &clean, tokens, writer, erasers, std::slice::from_ref(spec))?;
    Ok((pair[0].writer_dla, pair[0].erasure_dla))
}

fn erasure_pairs(
    model: &Model,
    clean: &ActivationCache,
    tokens: &[u32],
    writer: ComponentId,
    erasers: &[(usize, usize)],
    specs: &[LogitDiffSpec],
) -> Result<Vec<DlaPair>> {
    for spec in specs {
        spec.validate(model.config.d_vocab, tokens.len())?;
    }
    let patched = if erasers.is_empty() {
        None
    } else {
        let plan = vcomposition_plan(&model.config, writer, erasers)?;
        let p = model.forward_with(tokens, Some(&plan), &ForwardOptions::without_logits())?;
        // The writer sits upstream of every edit, so the patched run must
        // reproduce its output exactly.
        if p.component_output(writer)? != clean.component_output(writer)? {
            return Err(Error::Invariant(format!(
                "writer {writer} output differs between clean and patched runs"
            )));
        }
        Some(p)
    };
    let logits = clean.logits()?;
    let mut out = Vec::with_capacity(specs.len());
    for spec in specs {
        let pos = spec.position;
        let scale = frozen_scale(clean, pos)?;
        let dir = logit_diff_direction(model, spec.token_a, spec.token_b);
        let writer_dla = logit_diff_of_vector(clean.component_output(writer)?.row(pos), &dir, scale);
        let mut erasure_dla = 0.0;
        if let Some(patched) = &patched {
            for &(l, h) in erasers {
                let c = ComponentId::head(l, h);
                let diff: Vec<f32> = clean
                    .component_output(c)?
                    .row(pos)
                    .iter()
                    .zip(patched.component_output(c)?.row(pos))
                    .map(|(a, b)| a - b)
                    .collect();
                erasure_dla += logit_diff_of_vector(&diff, &dir, scale);
            }
        }
        let row = logits.row(pos);
        out.push(DlaPair {
            spec: *spec,
            writer_dla,
            erasure_dla,
            model_logit_diff: f64::from(row[spec.token_a as usize]) - f64::from(row[spec.token_b as usize]),
        });
    }
    Ok(out)
}

/// Clean-cache logit-difference DLA for every head at `spec.position`.
pub fn head_logit_diffs(model: &Model, cache: &ActivationCache, spec: &LogitDiffSpec) -> Result<Vec<(ComponentId, f64)>> {
    let mut out = Vec::new();
    for layer in 0..model.config.n_layers {
        for head in 0..model.config.n_heads {
            let c = ComponentId::head(layer, head);
            out.push((c, logit_diff(model, cache, c, spec)?));
        }
    }
    Ok(out)
}
