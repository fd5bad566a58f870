// SPDX-License-Identifier: MIT OR Apache-2.0

use std::borrow::Cow;
use std::collections::BTreeMap;

use crate::error::Result;
use crate::interventions::{Edit, InterventionPlan};
use crate::kernels::{self, Matrix};
use crate::model::{
    ActivationCache, BlockWeights, ComponentId, HeadInputKey, HeadStream, HeadWeights, Model,
    ResidCheckpoint,
};

/// Knobs for what a forward pass computes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ForwardOptions {
    /// Compute the `seq × d_vocab` logits. The unembedding dominates the cost
    /// of a forward on large vocabularies, so analyses that only need the
    /// residual decomposition turn this off.
    pub logits: bool,
    /// Stop once this checkpoint has been recorded. Later checkpoints, the
    /// final layer norm and the logits are then absent from the cache.
    pub stop_after: Option<ResidCheckpoint>,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        Self {
            logits: true,
            stop_after: None,
        }
    }
}

impl ForwardOptions {
    pub fn without_logits() -> Self {
        Self {
            logits: false,
            stop_after: None,
        }
    }
}

fn apply_all<'a>(
    edits: impl Iterator<Item = &'a Edit>,
    target: &mut Matrix,
    computed: &BTreeMap<ComponentId, Matrix>,
) -> Result<bool> {
    let mut touched = false;
    for edit in edits {
        edit.apply(target, computed)?;
        touched = true;
    }
    Ok(touched)
}

struct Recorder<'p> {
    plan: Option<&'p InterventionPlan>,
    components: BTreeMap<ComponentId, Matrix>,
    resid: Vec<Matrix>,
    head_inputs: BTreeMap<HeadInputKey, Matrix>,
}

impl Recorder<'_> {
    fn component(&mut self, c: ComponentId, mut out: Matrix) -> Result<()> {
        if let Some(plan) = self.plan {
            apply_all(plan.component_edits(c), &mut out, &self.components)?;
        }
        self.components.insert(c, out);
        Ok(())
    }

    fn checkpoint(&mut self, ckpt: ResidCheckpoint, mut resid: Matrix) -> Result<()> {
        if let Some(plan) = self.plan {
            apply_all(plan.resid_edits(ckpt), &mut resid, &self.components)?;
        }
        kernels::ensure_finite(resid.as_slice(), &ckpt.to_string())?;
        debug_assert_eq!(self.resid.len(), ckpt.index());
        self.resid.push(resid);
        Ok(())
    }

    fn last_resid(&self) -> &Matrix {
        self.resid.last().expect("at least one checkpoint recorded")
    }

    /// Pre-LN input to one head projection: the stream itself unless an edit
    /// targets it.
    fn head_input(&mut self, layer: usize, head: usize, stream: HeadStream) -> Result<Option<Matrix>> {
        let Some(plan) = self.plan else {
            return Ok(None);
        };
        let mut edits = plan.head_input_edits(layer, head, stream).peekable();
        if edits.peek().is_none() {
            return Ok(None);
        }
        let mut input = self.last_resid().clone();
        apply_all(edits, &mut input, &self.components)?;
        self.head_inputs.insert(HeadInputKey { layer, head, stream }, input.clone());
        Ok(Some(input))
    }
}

fn project(x: &Matrix, w: &Matrix, b: &[f32]) -> Result<Matrix> {
    let mut y = kernels::matmul(x, w)?;
    y.add_row_bias(b)?;
    Ok(y)
}

/// Causal attention for one head; returns `(pattern, head_output)`.
fn attend(q: &Matrix, k: &Matrix, v: &Matrix, head: &HeadWeights, d_head: usize) -> Result<(Matrix, Matrix)> {
    let mut scores = kernels::matmul_transposed(q, k)?;
    let scale = 1.0 / (d_head as f64).sqrt();
    let seq = scores.rows();
    for i in 0..seq {
        let row = scores.row_mut(i);
        for (j, s) in row.iter_mut().enumerate() {
            *s = if j > i {
                f32::NEG_INFINITY
            } else {
                (f64::from(*s) * scale) as f32
            };
        }
    }
    let pattern = kernels::softmax_rows(&scores)?;
    let z = kernels::matmul(&pattern, v)?;
    let out = kernels::matmul(&z, &head.w_o)?;
    Ok((pattern, out))
}

impl Model {
    /// Full forward pass with logits. `plan` edits are applied at their hook points.
    pub fn forward(&self, tokens: &[u32], plan: Option<&InterventionPlan>) -> Result<ActivationCache> {
        self.forward_with(tokens, plan, &ForwardOptions::default())
    }

    pub fn forward_with(
        &self,
        tokens: &[u32],
        plan: Option<&InterventionPlan>,
        opts: &ForwardOptions,
    ) -> Result<ActivationCache> {
        self.validate_tokens(tokens)?;
        let cfg = &self.config;
        let w = &self.weights;
        let seq = tokens.len();
        if let Some(plan) = plan {
            plan.validate(cfg, seq)?;
        }
        if let Some(stop) = opts.stop_after {
            stop.validate(cfg)?;
        }

        let mut rec = Recorder {
            plan,
            components: BTreeMap::new(),
            resid: Vec::with_capacity(3 * cfg.n_layers),
            head_inputs: BTreeMap::new(),
        };
        let mut attn_patterns = Vec::with_capacity(cfg.n_layers);

        let embed_rows: Vec<&[f32]> = tokens.iter().map(|&t| w.w_e.row(t as usize)).collect();
        rec.component(ComponentId::Embed, Matrix::from_rows(&embed_rows)?)?;
        let pos_rows: Vec<&[f32]> = (0..seq).map(|p| w.w_pos.row(p)).collect();
        rec.component(ComponentId::PosEmbed, Matrix::from_rows(&pos_rows)?)?;

        let mut resid = rec.components[&ComponentId::Embed].clone();
        resid.add_assign(&rec.components[&ComponentId::PosEmbed])?;
        rec.checkpoint(ResidCheckpoint::PreAttn(0), resid)?;

        let stopped = |rec: &Recorder| {
            opts.stop_after
                .is_some_and(|s| rec.resid.len() > s.index())
        };

        for (layer, block) in w.blocks.iter().enumerate() {
            if stopped(&rec) {
                break;
            }
            if layer > 0 {
                let resid = rec.last_resid().clone();
                rec.checkpoint(ResidCheckpoint::PreAttn(layer), resid)?;
                if stopped(&rec) {
                    break;
                }
            }
            let patterns = self.attention_block(layer, block, &mut rec)?;
            attn_patterns.push(patterns);
            if stopped(&rec) {
                break;
            }
            self.mlp_block(layer, block, &mut rec)?;
        }

        let complete = rec.resid.len() == 3 * cfg.n_layers;
        let mut final_ln_scale = Vec::new();
        let mut logits = None;
        if complete {
            let last = rec.last_resid();
            let mut normed = Matrix::zeros(seq, cfg.d_model);
            for p in 0..seq {
                let (y, scale) = kernels::layer_norm_with_scale(
                    last.row(p),
                    &w.ln_final.gamma,
                    &w.ln_final.beta,
                    cfg.ln_eps,
                )?;
                normed.row_mut(p).copy_from_slice(&y);
                final_ln_scale.push(scale as f32);
            }
            if opts.logits {
                logits = Some(project(&normed, &w.w_u, &w.b_u)?);
            }
        }

        Ok(ActivationCache {
            tokens: tokens.to_vec(),
            resid: rec.resid,
            component_out: rec.components,
            attn_patterns,
            head_inputs: rec.head_inputs,
            final_ln_scale,
            logits,
            plan: plan.cloned(),
        })
    }

    fn attention_block(&self, layer: usize, block: &BlockWeights, rec: &mut Recorder) -> Result<Vec<Matrix>> {
        let cfg = &self.config;
        let eps = cfg.ln_eps;
        let ln = |x: &Matrix| kernels::layer_norm_rows(x, &block.ln1.gamma, &block.ln1.beta, eps);
        let shared = ln(rec.last_resid())?;
        let mut patterns = Vec::with_capacity(cfg.n_heads);

        for (h, head) in block.heads.iter().enumerate() {
            let normed = |stream: HeadStream, rec: &mut Recorder| -> Result<Cow<Matrix>> {
                Ok(match rec.head_input(layer, h, stream)? {
                    Some(input) => Cow::Owned(ln(&input)?),
                    None => Cow::Borrowed(&shared),
                })
            };
            let q_in = normed(HeadStream::Query, rec)?;
            let k_in = normed(HeadStream::Key, rec)?;
            let v_in = normed(HeadStream::Value, rec)?;
            let q = project(&q_in, &head.w_q, &head.b_q)?;
            let k = project(&k_in, &head.w_k, &head.b_k)?;
            let v = project(&v_in, &head.w_v, &head.b_v)?;
            let (pattern, out) = attend(&q, &k, &v, head, cfg.d_head)?;
            patterns.push(pattern);
            rec.component(ComponentId::head(layer, h), out)?;
        }
        let seq = shared.rows();
        rec.component(ComponentId::AttnBias(layer), Matrix::broadcast_row(&block.b_o, seq))?;

        let mut mid = rec.last_resid().clone();
        for h in 0..cfg.n_heads {
            mid.add_assign(&rec.components[&ComponentId::head(layer, h)])?;
        }
        mid.add_assign(&rec.components[&ComponentId::AttnBias(layer)])?;
        rec.checkpoint(ResidCheckpoint::Mid(layer), mid)?;
        Ok(patterns)
    }

    fn mlp_block(&self, layer: usize, block: &BlockWeights, rec: &mut Recorder) -> Result<()> {
        let cfg = &self.config;
        let normed = kernels::layer_norm_rows(rec.last_resid(), &block.ln2.gamma, &block.ln2.beta, cfg.ln_eps)?;
        let pre = project(&normed, &block.w_in, &block.b_in)?;
        let post = pre.map(|x| kernels::gelu(x, cfg.gelu));
        let out = project(&post, &block.w_out, &block.b_out)?;
        rec.component(ComponentId::Mlp(layer), out)?;

        let mut resid = rec.last_resid().clone();
        resid.add_assign(&rec.components[&ComponentId::Mlp(layer)])?;
        rec.checkpoint(ResidCheckpoint::Post(layer), resid)?;
        Ok(())
    }
}
