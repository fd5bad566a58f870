// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::interventions::InterventionPlan;
use crate::kernels::Matrix;
use crate::model::{ComponentId, ResidCheckpoint};

/// Which projection of an attention head an input residual feeds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadStream {
    Query,
    Key,
    Value,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct HeadInputKey {
    pub layer: usize,
    pub head: usize,
    pub stream: HeadStream,
}

/// Everything recorded during one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationCache {
    pub(crate) tokens: Vec<u32>,
    /// Indexed by [`ResidCheckpoint::index`].
    pub(crate) resid: Vec<Matrix>,
    pub(crate) component_out: BTreeMap<ComponentId, Matrix>,
    /// `[layer][head]`, each `seq × seq`.
    pub(crate) attn_patterns: Vec<Vec<Matrix>>,
    /// Pre-LN residual actually fed to a head projection, recorded only where
    /// an intervention changed it.
    pub(crate) head_inputs: BTreeMap<HeadInputKey, Matrix>,
    pub(crate) final_ln_scale: Vec<f32>,
    pub(crate) logits: Option<Matrix>,
    pub(crate) plan: Option<InterventionPlan>,
}

impl ActivationCache {
    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    pub fn seq_len(&self) -> usize {
        self.tokens.len()
    }

    pub fn n_layers(&self) -> usize {
        self.resid.len() / 3
    }

    pub fn resid(&self, ckpt: ResidCheckpoint) -> Result<&Matrix> {
        self.resid
            .get(ckpt.index())
            .ok_or_else(|| Error::InvalidComponent(format!("{ckpt} not in cache")))
    }

    /// The additive contribution of `c` to the residual stream (`seq × d_model`).
    pub fn component_output(&self, c: ComponentId) -> Result<&Matrix> {
        self.component_out
            .get(&c)
            .ok_or_else(|| Error::InvalidComponent(format!("{c} not in cache")))
    }

    pub fn components(&self) -> impl Iterator<Item = (&ComponentId, &Matrix)> {
        self.component_out.iter()
    }

    pub fn pattern(&self, layer: usize, head: usize) -> Result<&Matrix> {
        self.attn_patterns
            .get(layer)
            .and_then(|l| l.get(head))
            .ok_or_else(|| Error::InvalidComponent(format!("no pattern for L{layer}H{head}")))
    }

    pub fn head_input(&self, layer: usize, head: usize, stream: HeadStream) -> Option<&Matrix> {
        self.head_inputs.get(&HeadInputKey { layer, head, stream })
    }

    /// Per-position `1 / sqrt(var + eps)` applied by the final layer norm.
    pub fn final_ln_scale(&self) -> &[f32] {
        &self.final_ln_scale
    }

    pub fn logits(&self) -> Result<&Matrix> {
        self.logits
            .as_ref()
            .ok_or_else(|| Error::Invariant("forward was run without logits".into()))
    }

    pub fn plan(&self) -> Option<&InterventionPlan> {
        self.plan.as_ref()
    }

    /// True when both caches hold bit-identical activations, ignoring the
    /// recorded plan metadata.
    pub fn same_activations(&self, other: &ActivationCache) -> bool {
        fn bits(a: &[f32], b: &[f32]) -> bool {
            a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
        }
        fn same(a: &Matrix, b: &Matrix) -> bool {
            a.shape() == b.shape() && bits(a.as_slice(), b.as_slice())
        }
        self.tokens == other.tokens
            && self.resid.len() == other.resid.len()
            && self.resid.iter().zip(&other.resid).all(|(a, b)| same(a, b))
            && self.component_out.len() == other.component_out.len()
            && self
                .component_out
                .iter()
                .zip(&other.component_out)
                .all(|((ca, a), (cb, b))| ca == cb && same(a, b))
            && self.attn_patterns.len() == other.attn_patterns.len()
            && self
                .attn_patterns
                .iter()
                .zip(&other.attn_patterns)
                .all(|(a, b)| a.len() == b.len() && a.iter().zip(b).all(|(x, y)| same(x, y)))
            && bits(&self.final_ln_scale, &other.final_ln_scale)
            && match (&self.logits, &other.logits) {
                (Some(a), Some(b)) => same(a, b),
                (None, None) => true,
                _ => false,
            }
    }
}
