// SPDX-License-Identifier: MIT OR Apache-2.0

//! End-to-end experiments producing [`RunReport`]s.
//!
//! Prompts are processed in parallel; results are collected in prompt order
//! and reduced sequentially, so reports do not depend on thread scheduling.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::analysis::{
    aggregate, component_projection_matrix, fit_correlation, identify_erasers, pool, resid_trace, Pooled,
    PositionRatios, QuantileSummary,
};
use crate::corpus::{PromptFixture, TokenCorpus, Vocabulary};
use crate::dla::{constant_term, erasure_isolated_dla_all, head_logit_diffs, logit_diff, top2};
use crate::error::{Error, Result};
use crate::interventions::{head_input_patch_with, vcomposition_plan};
use crate::model::{ComponentId, ForwardOptions, Model, ResidCheckpoint};
use crate::report::{FitOutcome, RunReport, Table};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sampling {
    pub n: usize,
    pub len: usize,
    pub seed: u64,
    pub include_pos0: bool,
}

impl Default for Sampling {
    fn default() -> Self {
        Self {
            n: 300,
            len: 128,
            seed: 0,
            include_pos0: false,
        }
    }
}

impl Sampling {
    pub fn prompts(&self, model: &Model, corpus: &TokenCorpus) -> Result<Vec<Vec<u32>>> {
        if self.len > model.config.n_ctx {
            return Err(Error::Config(format!(
                "sample length {} exceeds n_ctx = {}",
                self.len, model.config.n_ctx
            )));
        }
        corpus.validate(Some(model.config.d_vocab))?;
        corpus.sample(self.n, self.len, self.seed)
    }

    fn to_json(&self) -> Value {
        serde_json::to_value(self).expect("sampling serializes")
    }
}

/// Maps `f` over `items` in parallel, keeping order; the first error by
/// index wins.
fn par_map<I: Sync, T: Send>(items: &[I], f: impl Fn(usize, &I) -> Result<T> + Sync) -> Result<Vec<T>> {
    let results: Vec<Result<T>> = items.par_iter().enumerate().map(|(i, x)| f(i, x)).collect();
    results.into_iter().collect()
}

/// Head components as `(layer, head)` pairs.
pub fn head_pairs(components: &[ComponentId]) -> Result<Vec<(usize, usize)>> {
    components
        .iter()
        .map(|c| match *c {
            ComponentId::Head { layer, head } => Ok((layer, head)),
            other => Err(Error::InvalidComponent(format!("{other} is not an attention head"))),
        })
        .collect()
}

fn id_list(cs: &[ComponentId]) -> Value {
    Value::from(cs.iter().map(|c| c.to_string()).collect::<Vec<_>>())
}

fn summarize(pooled: &Pooled) -> Option<QuantileSummary> {
    aggregate(&pooled.values).ok()
}

fn summary_cells(s: Option<&QuantileSummary>, excluded: usize) -> Vec<Value> {
    match s {
        Some(s) => vec![json!(s.q25), json!(s.median), json!(s.q75), json!(s.mean), json!(s.n), json!(excluded)],
        None => vec![Value::Null, Value::Null, Value::Null, Value::Null, json!(0), json!(excluded)],
    }
}

const SUMMARY_COLUMNS: [&str; 6] = ["q25", "median", "q75", "mean", "n", "excluded"];

fn columns(prefix: &[&'static str]) -> Vec<&'static str> {
    prefix.iter().copied().chain(SUMMARY_COLUMNS).collect()
}

type Trace = BTreeMap<ResidCheckpoint, PositionRatios>;

fn trace_rows(report: &mut RunReport, table: &mut Table, variant: &str, traces: &[Trace], include_pos0: bool) {
    let Some(first) = traces.first() else { return };
    for ckpt in first.keys() {
        let pooled = pool(traces.iter().map(|t| &t[ckpt]), include_pos0);
        let s = summarize(&pooled);
        let mut row = vec![json!(ckpt.to_string()), json!(ckpt.index()), json!(variant)];
        row.extend(summary_cells(s.as_ref(), pooled.excluded));
        table.push(row);
        if let Some(s) = s {
            report.summaries.insert(format!("trace/{variant}/{ckpt}"), s);
        }
    }
}

/// Where a writer's output survives along the residual stream, optionally
/// alongside the same trace with V-composition into `patch` removed.
pub fn trace_writer(
    model: &Model,
    corpus: &TokenCorpus,
    writer: ComponentId,
    patch: Option<&[ComponentId]>,
    sampling: &Sampling,
) -> Result<RunReport> {
    writer.validate(&model.config)?;
    let plan = patch
        .map(|erasers| vcomposition_plan(&model.config, writer, &head_pairs(erasers)?))
        .transpose()?;
    let prompts = sampling.prompts(model, corpus)?;
    let opts = ForwardOptions::without_logits();
    let traces = par_map(&prompts, |_, tokens| {
        let clean = resid_trace(&model.forward_with(tokens, None, &opts)?, writer)?;
        let patched = match &plan {
            Some(plan) => Some(resid_trace(&model.forward_with(tokens, Some(plan), &opts)?, writer)?),
            None => None,
        };
        Ok((clean, patched))
    })?;

    let config = json!({
        "writer": writer.to_string(),
        "patch_vcomp": patch.map(id_list),
        "sampling": sampling.to_json(),
    });
    let mut report = RunReport::new("trace-writer", config, sampling.seed, model);
    let mut table = Table::new(&columns(&["checkpoint", "step", "variant"]));
    let clean: Vec<Trace> = traces.iter().map(|t| t.0.clone()).collect();
    trace_rows(&mut report, &mut table, "clean", &clean, sampling.include_pos0);
    if plan.is_some() {
        let patched: Vec<Trace> = traces.into_iter().filter_map(|t| t.1).collect();
        trace_rows(&mut report, &mut table, "patched", &patched, sampling.include_pos0);
    }
    report.tables.insert("trace".into(), table);
    Ok(report)
}

/// Per-component projection summaries and the erasers they imply.
#[derive(Debug, Clone, PartialEq)]
pub struct ScanResult {
    pub candidates: Vec<ComponentId>,
    pub pooled: BTreeMap<ComponentId, Pooled>,
    pub summaries: BTreeMap<ComponentId, QuantileSummary>,
    pub erasers: Vec<ComponentId>,
    pub summed: Pooled,
}

/// Heads and MLPs written after `target`, restricted to `layers` if given.
pub fn scan_candidates(model: &Model, target: ComponentId, layers: Option<&[usize]>) -> Vec<ComponentId> {
    ComponentId::all(&model.config)
        .into_iter()
        .filter(|c| matches!(c, ComponentId::Head { .. } | ComponentId::Mlp(_)))
        .filter(|c| c.written_at() > target.written_at())
        .filter(|c| layers.is_none_or(|ls| c.layer().is_some_and(|l| ls.contains(&l))))
        .collect()
}

pub fn scan(
    model: &Model,
    prompts: &[Vec<u32>],
    target: ComponentId,
    layers: Option<&[usize]>,
    threshold: f64,
    include_pos0: bool,
) -> Result<ScanResult> {
    target.validate(&model.config)?;
    let candidates = scan_candidates(model, target, layers);
    let opts = ForwardOptions::without_logits();
    let per_prompt = par_map(prompts, |_, tokens| {
        component_projection_matrix(&model.forward_with(tokens, None, &opts)?, target, &candidates)
    })?;
    let mut pooled = BTreeMap::new();
    let mut summaries = BTreeMap::new();
    for c in &candidates {
        let p = pool(per_prompt.iter().map(|m| &m[c]), include_pos0);
        if let Some(s) = summarize(&p) {
            summaries.insert(*c, s);
        }
        pooled.insert(*c, p);
    }
    let erasers = identify_erasers(&summaries, threshold);
    // PR is linear in its first argument, so the projection of the summed
    // eraser output is the sum of the per-eraser ratios.
    let summed_ratios: Vec<PositionRatios> = per_prompt
        .iter()
        .map(|m| {
            let len = m.values().next().map_or(0, Vec::len);
            (0..len)
                .map(|p| erasers.iter().map(|e| m[e][p]).sum::<Option<f64>>())
                .collect()
        })
        .collect();
    let summed = if erasers.is_empty() {
        Pooled::default()
    } else {
        pool(summed_ratios.iter(), include_pos0)
    };
    Ok(ScanResult {
        candidates,
        pooled,
        summaries,
        erasers,
        summed,
    })
}

/// Ranks later components by how much of `target`'s direction they write.
pub fn scan_erasers(
    model: &Model,
    corpus: &TokenCorpus,
    target: ComponentId,
    layers: Option<&[usize]>,
    threshold: f64,
    sampling: &Sampling,
) -> Result<RunReport> {
    let prompts = sampling.prompts(model, corpus)?;
    let res = scan(model, &prompts, target, layers, threshold, sampling.include_pos0)?;
    let config = json!({
        "target": target.to_string(),
        "layers": layers,
        "threshold": threshold,
        "sampling": sampling.to_json(),
    });
    let mut report = RunReport::new("scan-erasers", config, sampling.seed, model);
    let mut table = Table::new(&columns(&["component", "layer", "eraser"]));
    for c in &res.candidates {
        let s = res.summaries.get(c);
        let mut row = vec![json!(c.to_string()), json!(c.layer()), json!(res.erasers.contains(c))];
        row.extend(summary_cells(s, res.pooled[c].excluded));
        table.push(row);
        if let Some(s) = s {
            report.summaries.insert(format!("component/{c}"), *s);
        }
    }
    report.tables.insert("components".into(), table);
    let mut erasers = Table::new(&["rank", "component", "median", "q75"]);
    for (rank, c) in res.erasers.iter().enumerate() {
        let s = &res.summaries[c];
        erasers.push(vec![json!(rank + 1), json!(c.to_string()), json!(s.median), json!(s.q75)]);
    }
    report.tables.insert("erasers".into(), erasers);
    match summarize(&res.summed) {
        Some(s) => {
            report.summaries.insert("summed_erasers".into(), s);
        }
        None => report.notes.push("no erasers identified; summed-eraser aggregate omitted".into()),
    }
    if res.candidates.is_empty() {
        report.notes.push(format!("no components are written after {target}"));
    }
    Ok(report)
}

/// Eraser projections and the writer's residual trace with and without the
/// writer → eraser V-composition path.
pub fn patch_vcomp(
    model: &Model,
    corpus: &TokenCorpus,
    writer: ComponentId,
    erasers: &[ComponentId],
    sampling: &Sampling,
) -> Result<RunReport> {
    writer.validate(&model.config)?;
    let plan = vcomposition_plan(&model.config, writer, &head_pairs(erasers)?)?;
    let prompts = sampling.prompts(model, corpus)?;
    let opts = ForwardOptions::without_logits();
    let runs = par_map(&prompts, |_, tokens| {
        let clean = model.forward_with(tokens, None, &opts)?;
        let patched = model.forward_with(tokens, Some(&plan), &opts)?;
        Ok([
            (
                component_projection_matrix(&clean, writer, erasers)?,
                resid_trace(&clean, writer)?,
            ),
            (
                component_projection_matrix(&patched, writer, erasers)?,
                resid_trace(&patched, writer)?,
            ),
        ])
    })?;

    let config = json!({
        "writer": writer.to_string(),
        "erasers": id_list(erasers),
        "sampling": sampling.to_json(),
    });
    let mut report = RunReport::new("patch-vcomp", config, sampling.seed, model);
    let mut table = Table::new(&columns(&["component", "variant"]));
    let mut trace = Table::new(&columns(&["checkpoint", "step", "variant"]));
    for (k, variant) in ["clean", "patched"].into_iter().enumerate() {
        for c in erasers {
            let p = pool(runs.iter().map(|r| &r[k].0[c]), sampling.include_pos0);
            let s = summarize(&p);
            let mut row = vec![json!(c.to_string()), json!(variant)];
            row.extend(summary_cells(s.as_ref(), p.excluded));
            table.push(row);
            if let Some(s) = s {
                report.summaries.insert(format!("eraser/{variant}/{c}"), s);
            }
        }
        let traces: Vec<Trace> = runs.iter().map(|r| r[k].1.clone()).collect();
        trace_rows(&mut report, &mut trace, variant, &traces, sampling.include_pos0);
    }
    report.tables.insert("erasers".into(), table);
    report.tables.insert("trace".into(), trace);
    Ok(report)
}

/// Writer DLA against erasure DLA over every (prompt, position), with a
/// least-squares fit.
pub fn dla_correlate(
    model: &Model,
    corpus: &TokenCorpus,
    writer: ComponentId,
    erasers: &[ComponentId],
    sampling: &Sampling,
) -> Result<RunReport> {
    let pairs = head_pairs(erasers)?;
    vcomposition_plan(&model.config, writer, &pairs)?;
    let prompts = sampling.prompts(model, corpus)?;
    let per_prompt = par_map(&prompts, |_, tokens| erasure_isolated_dla_all(model, tokens, writer, &pairs))?;

    let config = json!({
        "writer": writer.to_string(),
        "erasers": id_list(erasers),
        "sampling": sampling.to_json(),
    });
    let mut report = RunReport::new("dla-correlate", config, sampling.seed, model);
    let mut table = Table::new(&[
        "prompt",
        "position",
        "token_a",
        "token_b",
        "writer_dla",
        "erasure_dla",
        "model_logit_diff",
        "constant_diff",
    ]);
    let constant = constant_term(model)?;
    let constant_diff =
        |a: u32, b: u32| f64::from(constant[a as usize]) - f64::from(constant[b as usize]);
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    let start = usize::from(!sampling.include_pos0);
    for (i, rows) in per_prompt.iter().enumerate() {
        for r in rows.iter().skip(start) {
            table.push(vec![
                json!(i),
                json!(r.spec.position),
                json!(r.spec.token_a),
                json!(r.spec.token_b),
                json!(r.writer_dla),
                json!(r.erasure_dla),
                json!(r.model_logit_diff),
                json!(constant_diff(r.spec.token_a, r.spec.token_b)),
            ]);
            xs.push(r.writer_dla);
            ys.push(r.erasure_dla);
        }
    }
    report.tables.insert("scatter".into(), table);
    for (name, v) in [("writer_dla", &xs), ("erasure_dla", &ys)] {
        if let Ok(s) = aggregate(v) {
            report.summaries.insert(name.into(), s);
        }
    }
    let fit = FitOutcome::from(fit_correlation(&xs, &ys));
    if let FitOutcome::Error(e) = &fit {
        report.notes.push(format!("fit unavailable: {e}"));
    }
    report.fits.insert("erasure_vs_writer".into(), fit);
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdversarialOptions {
    pub target: ComponentId,
    pub n_donors: usize,
    /// Comparison heads per fixture, chosen by largest clean DLA.
    pub n_compare: usize,
    pub seed: u64,
}

/// Clean and input-patched DLA of `target` and comparison heads on each
/// fixture's final position.
///
/// Donors are corpus windows of the fixture's length; when a fixture starts
/// with the vocabulary's BOS token, donors do too.
pub fn adversarial(
    model: &Model,
    fixtures: &[PromptFixture],
    vocab: Option<&Vocabulary>,
    donors: &TokenCorpus,
    opts: &AdversarialOptions,
) -> Result<RunReport> {
    let (tl, th) = head_pairs(&[opts.target])?[0];
    opts.target.validate(&model.config)?;
    donors.validate(Some(model.config.d_vocab))?;
    let bos = vocab.and_then(Vocabulary::bos_id);
    let text = |id: u32| vocab.and_then(|v| v.token_text(id)).map_or(Value::Null, Value::from);

    let config = json!({
        "target": opts.target.to_string(),
        "n_donors": opts.n_donors,
        "n_compare": opts.n_compare,
        "fixtures": fixtures.iter().map(|f| &f.text).collect::<Vec<_>>(),
    });
    let mut report = RunReport::new("adversarial", config, opts.seed, model);
    let mut fx_table = Table::new(&[
        "fixture",
        "text",
        "top1_id",
        "top2_id",
        "top1",
        "top2",
        "expected_top1",
        "expected_top2",
        "top2_match",
        "model_logit_diff",
        "constant_diff",
        "expected_logit_diff",
    ]);
    let constant = constant_term(model)?;
    let mut head_table = Table::new(&columns(&["fixture", "head", "role", "clean_dla", "median_ratio"]));

    for (i, fx) in fixtures.iter().enumerate() {
        let clean = model.forward(&fx.tokens, None)?;
        let pos = fx.tokens.len() - 1;
        let spec = top2(&clean, pos)?;
        let row = clean.logits()?.row(pos);
        let model_diff = f64::from(row[spec.token_a as usize]) - f64::from(row[spec.token_b as usize]);
        let matched = vocab.is_some_and(|v| {
            v.token_text(spec.token_a).as_deref() == Some(fx.expected_top2.0.as_str())
                && v.token_text(spec.token_b).as_deref() == Some(fx.expected_top2.1.as_str())
        });
        fx_table.push(vec![
            json!(i),
            json!(fx.text),
            json!(spec.token_a),
            json!(spec.token_b),
            text(spec.token_a),
            text(spec.token_b),
            json!(fx.expected_top2.0),
            json!(fx.expected_top2.1),
            json!(matched),
            json!(model_diff),
            json!(f64::from(constant[spec.token_a as usize]) - f64::from(constant[spec.token_b as usize])),
            json!(fx.expected_logit_diff),
        ]);

        let mut ranked = head_logit_diffs(model, &clean, &spec)?;
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        let clean_dla: BTreeMap<ComponentId, f64> = ranked.iter().copied().collect();
        let mut heads = vec![(opts.target, "target")];
        heads.extend(
            ranked
                .iter()
                .filter(|(c, _)| *c != ComponentId::head(tl, th))
                .take(opts.n_compare)
                .map(|(c, _)| (*c, "comparison")),
        );

        let lead = usize::from(bos.is_some_and(|b| fx.tokens.first() == Some(&b)));
        let donor_prompts: Vec<Vec<u32>> = donors
            .sample(opts.n_donors, fx.tokens.len() - lead, opts.seed.wrapping_add(i as u64))?
            .into_iter()
            .map(|d| fx.tokens[..lead].iter().copied().chain(d).collect())
            .collect();

        for (head, role) in heads {
            let (l, h) = head_pairs(&[head])?[0];
            let patched = par_map(&donor_prompts, |_, donor| {
                let cache = head_input_patch_with(model, &fx.tokens, donor, (l, h), &ForwardOptions::without_logits())?;
                logit_diff(model, &cache, head, &spec)
            })?;
            let s = aggregate(&patched).ok();
            let base = clean_dla[&head];
            let ratio = s.map_or(Value::Null, |s| json!(s.median / base));
            let mut row = vec![json!(i), json!(head.to_string()), json!(role), json!(base), ratio];
            row.extend(summary_cells(s.as_ref(), 0));
            head_table.push(row);
            if let Some(s) = s {
                report.summaries.insert(format!("fixture{i}/{head}/patched"), s);
            }
        }
    }
    report.tables.insert("fixtures".into(), fx_table);
    report.tables.insert("heads".into(), head_table);
    Ok(report)
}
