// SPDX-License-Identifier: MIT OR Apache-2.0

//! Declarative activation patching.
//!
//! An [`InterventionPlan`] is an ordered list of [`Edit`]s. Each edit names a
//! [`HookPoint`] in the forward pass, an [`Action`] to apply there, and the
//! positions it touches. The forward pass applies every edit at its hook point
//! in listed order, and everything downstream sees the edited tensor.
//!
//! Head-input hook points (`QueryInput`, `KeyInput`, `ValueInput`) edit the
//! pre-LN residual that one head's projection reads. The residual stream
//! itself, and every other head, keep seeing the unmodified stream.
//!
//! Plans round-trip through JSON:
//!
//! ```json
//! {"edits": [{"point": {"kind": "value_input", "layer": 2, "heads": [2, 3]},
//!             "action": {"kind": "subtract_component", "component": "L0H2"},
//!             "scope": "all"}]}
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::Matrix;
use crate::model::{ActivationCache, ComponentId, ForwardOptions, HeadStream, Model, ModelConfig, ResidCheckpoint};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum HookPoint {
    QueryInput { layer: usize, heads: Vec<usize> },
    KeyInput { layer: usize, heads: Vec<usize> },
    ValueInput { layer: usize, heads: Vec<usize> },
    ResidAt { checkpoint: ResidCheckpoint },
    ComponentOut { component: ComponentId },
}

impl HookPoint {
    fn head_input(&self) -> Option<(HeadStream, usize, &[usize])> {
        match self {
            HookPoint::QueryInput { layer, heads } => Some((HeadStream::Query, *layer, heads)),
            HookPoint::KeyInput { layer, heads } => Some((HeadStream::Key, *layer, heads)),
            HookPoint::ValueInput { layer, heads } => Some((HeadStream::Value, *layer, heads)),
            _ => None,
        }
    }

    /// Checkpoint index of the earliest residual state this point can affect.
    pub fn earliest_checkpoint(&self) -> usize {
        match self {
            HookPoint::QueryInput { layer, .. }
            | HookPoint::KeyInput { layer, .. }
            | HookPoint::ValueInput { layer, .. } => ResidCheckpoint::Mid(*layer).index(),
            HookPoint::ResidAt { checkpoint } => checkpoint.index(),
            HookPoint::ComponentOut { component } => component.written_at(),
        }
    }

    /// Whether `component` has already been computed when this point is reached.
    fn can_read(&self, component: ComponentId) -> bool {
        match self {
            HookPoint::QueryInput { layer, .. }
            | HookPoint::KeyInput { layer, .. }
            | HookPoint::ValueInput { layer, .. } => component.is_in(ResidCheckpoint::PreAttn(*layer)),
            HookPoint::ResidAt { checkpoint } => component.is_in(*checkpoint),
            HookPoint::ComponentOut { component: target } => component.written_at() < target.written_at(),
        }
    }
}

/// Where a subtracted component output comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    /// The component's output earlier in the same (possibly patched) run.
    #[default]
    SameRun,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Action {
    SubtractComponent {
        component: ComponentId,
        #[serde(default)]
        source: Source,
    },
    /// Overwrite with a `seq × d_model` tensor, typically taken from a donor cache.
    ReplaceWith { tensor: Matrix },
    ZeroOut,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    #[default]
    All,
    Positions(Vec<usize>),
}

impl Scope {
    fn positions(&self, seq_len: usize) -> Vec<usize> {
        match self {
            Scope::All => (0..seq_len).collect(),
            Scope::Positions(p) => p.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Edit {
    pub point: HookPoint,
    pub action: Action,
    #[serde(default)]
    pub scope: Scope,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct InterventionPlan {
    pub edits: Vec<Edit>,
}

impl InterventionPlan {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(mut self, point: HookPoint, action: Action) -> Self {
        self.edits.push(Edit {
            point,
            action,
            scope: Scope::All,
        });
        self
    }

    pub fn is_empty(&self) -> bool {
        self.edits.is_empty()
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::format("intervention plan", e.to_string()))
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::format("intervention plan", e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s)
    }

    /// Checkpoint index of the earliest residual state the plan can change.
    pub fn earliest_checkpoint(&self) -> Option<usize> {
        self.edits.iter().map(|e| e.point.earliest_checkpoint()).min()
    }

    pub fn validate(&self, cfg: &ModelConfig, seq_len: usize) -> Result<()> {
        for (i, edit) in self.edits.iter().enumerate() {
            let bad = |msg: String| Error::Intervention(format!("edit {i}: {msg}"));
            match &edit.point {
                HookPoint::ResidAt { checkpoint } => checkpoint.validate(cfg)?,
                HookPoint::ComponentOut { component } => component.validate(cfg)?,
                point => {
                    let (_, layer, heads) = point.head_input().expect("head input point");
                    if layer >= cfg.n_layers {
                        return Err(bad(format!("layer {layer} out of range")));
                    }
                    if heads.is_empty() {
                        return Err(bad("empty head set".into()));
                    }
                    if let Some(h) = heads.iter().find(|&&h| h >= cfg.n_heads) {
                        return Err(bad(format!("head {h} out of range")));
                    }
                }
            }
            match &edit.action {
                Action::SubtractComponent { component, .. } => {
                    component.validate(cfg)?;
                    if !edit.point.can_read(*component) {
                        return Err(bad(format!(
                            "{component} is not computed yet at {:?}",
                            edit.point
                        )));
                    }
                }
                Action::ReplaceWith { tensor } => {
                    if tensor.shape() != (seq_len, cfg.d_model) {
                        return Err(Error::Shape(format!(
                            "edit {i}: replacement is {:?}, expected {:?}",
                            tensor.shape(),
                            (seq_len, cfg.d_model)
                        )));
                    }
                    if !tensor.is_finite() {
                        return Err(Error::NonFinite(format!("edit {i} replacement tensor")));
                    }
                }
                Action::ZeroOut => {}
            }
            if let Scope::Positions(ps) = &edit.scope {
                if let Some(p) = ps.iter().find(|&&p| p >= seq_len) {
                    return Err(bad(format!("position {p} beyond sequence length {seq_len}")));
                }
            }
        }
        Ok(())
    }

    pub(crate) fn head_input_edits(
        &self,
        layer: usize,
        head: usize,
        stream: HeadStream,
    ) -> impl Iterator<Item = &Edit> {
        self.edits.iter().filter(move |e| {
            matches!(e.point.head_input(), Some((s, l, hs)) if s == stream && l == layer && hs.contains(&head))
        })
    }

    pub(crate) fn resid_edits(&self, ckpt: ResidCheckpoint) -> impl Iterator<Item = &Edit> {
        self.edits
            .iter()
            .filter(move |e| e.point == HookPoint::ResidAt { checkpoint: ckpt })
    }

    pub(crate) fn component_edits(&self, c: ComponentId) -> impl Iterator<Item = &Edit> {
        self.edits
            .iter()
            .filter(move |e| e.point == HookPoint::ComponentOut { component: c })
    }
}

impl Edit {
    /// Applies this edit to `target` in place. `computed` holds every
    /// component output produced so far in the run.
    pub(crate) fn apply(&self, target: &mut Matrix, computed: &BTreeMap<ComponentId, Matrix>) -> Result<()> {
        let positions = self.scope.positions(target.rows());
        match &self.action {
            Action::ZeroOut => {
                for p in positions {
                    target.row_mut(p).iter_mut().for_each(|x| *x = 0.0);
                }
            }
            Action::ReplaceWith { tensor } => {
                if tensor.shape() != target.shape() {
                    return Err(Error::Shape(format!(
                        "replacement {:?} for target {:?}",
                        tensor.shape(),
                        target.shape()
                    )));
                }
                for p in positions {
                    target.row_mut(p).copy_from_slice(tensor.row(p));
                }
            }
            Action::SubtractComponent { component, .. } => {
                let src = computed.get(component).ok_or_else(|| {
                    Error::Intervention(format!("{component} not computed before {:?}", self.point))
                })?;
                for p in positions {
                    for (x, s) in target.row_mut(p).iter_mut().zip(src.row(p)) {
                        *x -= *s;
                    }
                }
            }
        }
        Ok(())
    }
}

/// Forward pass with `plan` applied. The returned cache records the plan.
pub fn apply_plan(model: &Model, tokens: &[u32], plan: &InterventionPlan) -> Result<ActivationCache> {
    model.forward(tokens, Some(plan))
}

/// Plan that removes `writer`'s output from the value input of every head in
/// `erasers`, leaving queries, keys and the residual stream untouched.
pub fn vcomposition_plan(
    cfg: &ModelConfig,
    writer: ComponentId,
    erasers: &[(usize, usize)],
) -> Result<InterventionPlan> {
    writer.validate(cfg)?;
    let mut by_layer: BTreeMap<usize, BTreeSet<usize>> = BTreeMap::new();
    for &(layer, head) in erasers {
        ComponentId::head(layer, head).validate(cfg)?;
        if !writer.is_in(ResidCheckpoint::PreAttn(layer)) {
            return Err(Error::Intervention(format!(
                "writer {writer} is not upstream of eraser L{layer}H{head}"
            )));
        }
        by_layer.entry(layer).or_default().insert(head);
    }
    let mut plan = InterventionPlan::new();
    for (layer, heads) in by_layer {
        plan = plan.push(
            HookPoint::ValueInput {
                layer,
                heads: heads.into_iter().collect(),
            },
            Action::SubtractComponent {
                component: writer,
                source: Source::SameRun,
            },
        );
    }
    Ok(plan)
}

/// Zero-ablates the V-composition path from `writer` into each eraser head.
///
/// Each listed head computes its values from `resid − writer_out`, where
/// `writer_out` is the writer's output from this same run. Queries, keys and
/// all other components read the unmodified stream.
pub fn zero_ablate_vcomposition(
    model: &Model,
    tokens: &[u32],
    writer: ComponentId,
    erasers: &[(usize, usize)],
) -> Result<ActivationCache> {
    let plan = vcomposition_plan(&model.config, writer, erasers)?;
    model.forward(tokens, Some(&plan))
}

/// Plan that feeds `target`'s query, key and value projections from `donor_resid`.
pub fn head_input_plan(target: (usize, usize), donor_resid: &Matrix) -> InterventionPlan {
    let (layer, head) = target;
    let mut plan = InterventionPlan::new();
    for point in [
        HookPoint::QueryInput { layer, heads: vec![head] },
        HookPoint::KeyInput { layer, heads: vec![head] },
        HookPoint::ValueInput { layer, heads: vec![head] },
    ] {
        plan = plan.push(
            point,
            Action::ReplaceWith {
                tensor: donor_resid.clone(),
            },
        );
    }
    plan
}

/// Runs `tokens_clean` with the full input of head `target` (Q, K and V)
/// replaced by the residual stream a forward on `tokens_donor` produced at
/// the same layer. Layer norm is recomputed on the donor residual.
pub fn head_input_patch(
    model: &Model,
    tokens_clean: &[u32],
    tokens_donor: &[u32],
    target: (usize, usize),
) -> Result<ActivationCache> {
    head_input_patch_with(model, tokens_clean, tokens_donor, target, &ForwardOptions::default())
}

/// [`head_input_patch`] with explicit options for the patched run.
pub fn head_input_patch_with(
    model: &Model,
    tokens_clean: &[u32],
    tokens_donor: &[u32],
    target: (usize, usize),
    opts: &ForwardOptions,
) -> Result<ActivationCache> {
    ComponentId::head(target.0, target.1).validate(&model.config)?;
    if tokens_clean.len() != tokens_donor.len() {
        return Err(Error::Intervention(format!(
            "donor has {} tokens, clean prompt has {}",
            tokens_donor.len(),
            tokens_clean.len()
        )));
    }
    let donor = model.forward_with(
        tokens_donor,
        None,
        &ForwardOptions {
            logits: false,
            stop_after: Some(ResidCheckpoint::PreAttn(target.0)),
        },
    )?;
    let donor_resid = donor.resid(ResidCheckpoint::PreAttn(target.0))?;
    model.forward_with(tokens_clean, Some(&head_input_plan(target, donor_resid)), opts)
}
