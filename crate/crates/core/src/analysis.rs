// SPDX-License-Identifier: MIT OR Apache-2.0

//! Projection ratios, eraser identification and summary statistics.
//!
//! The projection ratio `PR(a, b) = (a·b) / ‖b‖²` is the signed fraction of
//! direction `b` present in `a`. It is asymmetric, so orientation matters:
//!
//! * [`resid_trace`] measures `PR(resid, component)`: how much of a
//!   component's output is still in the stream at each checkpoint.
//! * [`component_projection_matrix`] measures `PR(candidate, target)`: how
//!   much of the target's direction a candidate writes. A candidate that
//!   fully cancels the target reads as `-1`.
//!
//! Positions where `‖b‖²` falls below the exclusion threshold are reported as
//! `None` and dropped from aggregates, never zero-filled.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::dot;
use crate::model::{ActivationCache, ComponentId, ResidCheckpoint};

/// Default exclusion threshold on `‖b‖²`.
pub const DEFAULT_EPS_B: f64 = 1e-12;

/// Default margin below zero that the 75th percentile must clear for a
/// component to count as an eraser.
pub const DEFAULT_ERASER_THRESHOLD: f64 = 0.05;

/// Per-position ratios; `None` marks an excluded position.
pub type PositionRatios = Vec<Option<f64>>;

/// `(a·b) / ‖b‖²`, accumulated in `f64`.
pub fn projection_ratio(a: &[f32], b: &[f32]) -> Result<f64> {
    projection_ratio_eps(a, b, DEFAULT_EPS_B)
}

pub fn projection_ratio_eps(a: &[f32], b: &[f32], eps_b: f64) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "projection ratio of vectors with lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    let bb = dot(b, b);
    if bb.is_nan() || bb < eps_b {
        return Err(Error::DegenerateReference(bb));
    }
    let r = dot(a, b) / bb;
    if !r.is_finite() {
        return Err(Error::NonFinite("projection ratio".into()));
    }
    Ok(r)
}

fn ratio_or_excluded(a: &[f32], b: &[f32], eps_b: f64) -> Result<Option<f64>> {
    match projection_ratio_eps(a, b, eps_b) {
        Ok(r) => Ok(Some(r)),
        Err(Error::DegenerateReference(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Where a projection sample was measured.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleCoord {
    pub prompt: usize,
    pub position: usize,
    /// Checkpoint or component name the measured vector came from.
    pub source: String,
}

/// One evaluation of `PR(a, b)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionSample {
    pub a: Vec<f32>,
    pub b: Vec<f32>,
    pub ratio: f64,
    pub coord: SampleCoord,
}

impl ProjectionSample {
    pub fn measure(a: &[f32], b: &[f32], coord: SampleCoord) -> Result<Self> {
        let ratio = projection_ratio(a, b)?;
        Ok(Self {
            a: a.to_vec(),
            b: b.to_vec(),
            ratio,
            coord,
        })
    }
}

/// `PR(resid[ckpt][pos], component_out[c][pos])` for every checkpoint and position.
pub fn resid_trace(cache: &ActivationCache, c: ComponentId) -> Result<BTreeMap<ResidCheckpoint, PositionRatios>> {
    resid_trace_eps(cache, c, DEFAULT_EPS_B)
}

pub fn resid_trace_eps(
    cache: &ActivationCache,
    c: ComponentId,
    eps_b: f64,
) -> Result<BTreeMap<ResidCheckpoint, PositionRatios>> {
    let b = cache.component_output(c)?;
    let mut out = BTreeMap::new();
    for i in 0..3 * cache.n_layers() {
        let ckpt = ResidCheckpoint::from_index(i);
        let a = cache.resid(ckpt)?;
        let ratios = (0..cache.seq_len())
            .map(|p| ratio_or_excluded(a.row(p), b.row(p), eps_b))
            .collect::<Result<Vec<_>>>()?;
        out.insert(ckpt, ratios);
    }
    Ok(out)
}

/// `PR(candidate_out[pos], target_out[pos])` for each candidate.
pub fn component_projection_matrix(
    cache: &ActivationCache,
    target: ComponentId,
    candidates: &[ComponentId],
) -> Result<BTreeMap<ComponentId, PositionRatios>> {
    let b = cache.component_output(target)?;
    let mut out = BTreeMap::new();
    for &cand in candidates {
        let a = cache.component_output(cand)?;
        let ratios = (0..cache.seq_len())
            .map(|p| ratio_or_excluded(a.row(p), b.row(p), DEFAULT_EPS_B))
            .collect::<Result<Vec<_>>>()?;
        out.insert(cand, ratios);
    }
    Ok(out)
}

/// `PR(Σ parts, target)` per position: the joint share of the target's
/// direction written by a group of components.
pub fn summed_projection(cache: &ActivationCache, target: ComponentId, parts: &[ComponentId]) -> Result<PositionRatios> {
    let b = cache.component_output(target)?;
    let outs = parts
        .iter()
        .map(|&c| cache.component_output(c))
        .collect::<Result<Vec<_>>>()?;
    let mut ratios = Vec::with_capacity(cache.seq_len());
    for p in 0..cache.seq_len() {
        let bp = b.row(p);
        let bb = dot(bp, bp);
        if bb.is_nan() || bb < DEFAULT_EPS_B {
            ratios.push(None);
            continue;
        }
        let ab: f64 = outs.iter().map(|m| dot(m.row(p), bp)).sum();
        ratios.push(Some(ab / bb));
    }
    Ok(ratios)
}

/// Samples pooled over prompts and positions.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Pooled {
    pub values: Vec<f64>,
    /// Positions dropped because their reference vector was degenerate.
    pub excluded: usize,
}

/// Pools per-prompt position ratios. Position 0 is skipped unless
/// `include_pos0` is set.
pub fn pool<'a>(per_prompt: impl IntoIterator<Item = &'a PositionRatios>, include_pos0: bool) -> Pooled {
    let mut pooled = Pooled::default();
    for ratios in per_prompt {
        let start = usize::from(!include_pos0);
        for r in ratios.iter().skip(start) {
            match r {
                Some(v) => pooled.values.push(*v),
                None => pooled.excluded += 1,
            }
        }
    }
    pooled
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantileSummary {
    pub q25: f64,
    pub median: f64,
    pub q75: f64,
    pub mean: f64,
    pub n: usize,
}

impl QuantileSummary {
    /// Same summary with every statistic multiplied by `k` (`k > 0`).
    pub fn scaled(&self, k: f64) -> Self {
        Self {
            q25: self.q25 * k,
            median: self.median * k,
            q75: self.q75 * k,
            mean: self.mean * k,
            n: self.n,
        }
    }
}

/// Empirical quantile of a sorted slice, interpolating linearly between order
/// statistics at rank `p·(n−1)`.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    assert!(n > 0, "quantile of empty slice");
    let h = p * (n - 1) as f64;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    let frac = h - lo as f64;
    if frac == 0.0 {
        sorted[lo]
    } else {
        sorted[lo] + frac * (sorted[hi] - sorted[lo])
    }
}

pub fn aggregate(samples: &[f64]) -> Result<QuantileSummary> {
    if samples.is_empty() {
        return Err(Error::DegenerateData("no samples to aggregate".into()));
    }
    if let Some(x) = samples.iter().find(|x| !x.is_finite()) {
        return Err(Error::NonFinite(format!("sample {x}")));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(QuantileSummary {
        q25: quantile_sorted(&sorted, 0.25),
        median: quantile_sorted(&sorted, 0.5),
        q75: quantile_sorted(&sorted, 0.75),
        mean: samples.iter().sum::<f64>() / samples.len() as f64,
        n: samples.len(),
    })
}

/// Components whose whole interquartile range lies below `-threshold`,
/// most negative median first.
pub fn identify_erasers(summaries: &BTreeMap<ComponentId, QuantileSummary>, threshold: f64) -> Vec<ComponentId> {
    let mut hits: Vec<(ComponentId, f64)> = summaries
        .iter()
        .filter(|(_, s)| s.q75 < -threshold)
        .map(|(c, s)| (*c, s.median))
        .collect();
    hits.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    hits.into_iter().map(|(c, _)| c).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub pearson_r: f64,
    pub slope: f64,
    pub intercept: f64,
    pub n: usize,
}

/// Pearson correlation and the least-squares line of `ys` on `xs`.
pub fn fit_correlation(xs: &[f64], ys: &[f64]) -> Result<FitResult> {
    if xs.len() != ys.len() {
        return Err(Error::Shape(format!("{} xs and {} ys", xs.len(), ys.len())));
    }
    let n = xs.len();
    if n < 2 {
        return Err(Error::DegenerateData(format!("need at least 2 points, got {n}")));
    }
    let mx = xs.iter().sum::<f64>() / n as f64;
    let my = ys.iter().sum::<f64>() / n as f64;
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let dx = x - mx;
        let dy = y - my;
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    if sxx <= 0.0 || syy <= 0.0 || !(sxx.is_finite() && syy.is_finite()) {
        return Err(Error::DegenerateData(format!(
            "zero variance (var_x = {}, var_y = {})",
            sxx / n as f64,
            syy / n as f64
        )));
    }
    let slope = sxy / sxx;
    let r = (sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0);
    Ok(FitResult {
        pearson_r: r,
        slope,
        intercept: my - slope * mx,
        n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn pr_examples() {
        let b = [0.3f32, -1.2, 2.0];
        assert!((projection_ratio(&b, &b).unwrap() - 1.0).abs() < 1e-12);
        let neg: Vec<f32> = b.iter().map(|x| -x).collect();
        assert!((projection_ratio(&neg, &b).unwrap() + 1.0).abs() < 1e-12);
        assert_eq!(projection_ratio(&[0.0, 5.0], &[2.0, 0.0]).unwrap(), 0.0);
        assert_eq!(projection_ratio(&[3.0, 4.0], &[1.0, 0.0]).unwrap(), 3.0);
    }

    #[test]
    fn pr_degenerate_reference() {
        assert!(matches!(
            projection_ratio(&[1.0, 1.0], &[0.0, 0.0]),
            Err(Error::DegenerateReference(_))
        ));
        assert!(matches!(projection_ratio(&[1.0], &[1.0, 0.0]), Err(Error::Shape(_))));
    }

    #[test]
    fn aggregate_examples() {
        let s = aggregate(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(s.median, 2.0);
        assert_eq!((s.q25, s.q75), (1.5, 2.5));
        let c = aggregate(&[0.4; 7]).unwrap();
        assert_eq!((c.q25, c.median, c.q75), (0.4, 0.4, 0.4));
        assert!(aggregate(&[]).is_err());
    }

    #[test]
    fn aggregate_uniform_median() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let xs: Vec<f64> = (0..1000).map(|_| rng.gen::<f64>()).collect();
        let s = aggregate(&xs).unwrap();
        assert!((s.median - 0.5).abs() < 0.05);
        assert!(s.q25 <= s.median && s.median <= s.q75);
    }

    fn summary(q25: f64, median: f64, q75: f64) -> QuantileSummary {
        QuantileSummary {
            q25,
            median,
            q75,
            mean: median,
            n: 10,
        }
    }

    #[test]
    fn eraser_rule() {
        let mut s = BTreeMap::new();
        s.insert(ComponentId::head(2, 2), summary(-0.3, -0.2, -0.1));
        s.insert(ComponentId::head(2, 3), summary(-0.1, 0.0, 0.1));
        s.insert(ComponentId::head(2, 4), summary(-0.9, -0.8, -0.6));
        s.insert(ComponentId::Mlp(1), summary(-0.2, -0.1, -0.04));
        assert_eq!(
            identify_erasers(&s, DEFAULT_ERASER_THRESHOLD),
            vec![ComponentId::head(2, 4), ComponentId::head(2, 2)]
        );
        assert!(identify_erasers(&BTreeMap::new(), 0.05).is_empty());
    }

    #[test]
    fn fit_examples() {
        let xs: Vec<f64> = (0..20).map(|i| i as f64 * 0.3 - 2.0).collect();
        let ys: Vec<f64> = xs.iter().map(|x| -x).collect();
        let f = fit_correlation(&xs, &ys).unwrap();
        assert!((f.pearson_r + 1.0).abs() < 1e-12);
        assert!((f.slope + 1.0).abs() < 1e-12);
        assert!(f.intercept.abs() < 1e-12);
        assert!(matches!(fit_correlation(&xs, &[1.0; 20]), Err(Error::DegenerateData(_))));
        assert!(fit_correlation(&[1.0], &[2.0]).is_err());
        assert!(fit_correlation(&[1.0, 2.0], &[2.0]).is_err());
    }

    #[test]
    fn fit_independent_and_planted() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let xs: Vec<f64> = (0..1000).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let indep: Vec<f64> = (0..1000).map(|_| rng.gen_range(-1.0..1.0)).collect();
        assert!(fit_correlation(&xs, &indep).unwrap().pearson_r.abs() < 0.2);

        let sd = (xs.iter().map(|x| x * x).sum::<f64>() / 1000.0).sqrt();
        let noise = rand_distr::Normal::new(0.0, 0.1 * sd).unwrap();
        let ys: Vec<f64> = xs.iter().map(|x| -0.6 * x + rng.sample(noise)).collect();
        let f = fit_correlation(&xs, &ys).unwrap();
        assert!((f.slope + 0.6).abs() < 0.05, "slope {}", f.slope);
    }

    #[test]
    fn pooling_skips_pos0_and_counts_exclusions() {
        let a = vec![Some(9.0), Some(1.0), None];
        let b = vec![None, Some(2.0)];
        let p = pool([&a, &b], false);
        assert_eq!(p.values, vec![1.0, 2.0]);
        assert_eq!(p.excluded, 1);
        let p = pool([&a, &b], true);
        assert_eq!(p.values, vec![9.0, 1.0, 2.0]);
        assert_eq!(p.excluded, 2);
    }

    fn vec_pair(n: usize) -> impl Strategy<Value = (Vec<f32>, Vec<f32>, Vec<f32>)> {
        (
            proptest::collection::vec(-5.0f32..5.0, n),
            proptest::collection::vec(-5.0f32..5.0, n),
            proptest::collection::vec(-5.0f32..5.0, n),
        )
    }

    fn rel_close(x: f64, y: f64, tol: f64) -> bool {
        (x - y).abs() <= tol * x.abs().max(y.abs()).max(1.0)
    }

    proptest! {
        #[test]
        fn pr_linear_in_a((a, b, c) in vec_pair(16), alpha in -4.0f32..4.0) {
            prop_assume!(dot(&b, &b) > 1e-3);
            let scaled: Vec<f32> = a.iter().map(|x| x * alpha).collect();
            let pa = projection_ratio(&a, &b).unwrap();
            let ps = projection_ratio(&scaled, &b).unwrap();
            prop_assert!(rel_close(ps, f64::from(alpha) * pa, 1e-6));
            let sum: Vec<f32> = a.iter().zip(&c).map(|(x, y)| x + y).collect();
            let pc = projection_ratio(&c, &b).unwrap();
            prop_assert!(rel_close(projection_ratio(&sum, &b).unwrap(), pa + pc, 1e-6));
        }

        #[test]
        fn pr_reference_scaling((a, b, _c) in vec_pair(16), alpha in 0.25f32..4.0, neg in any::<bool>()) {
            prop_assume!(dot(&b, &b) > 1e-3);
            let alpha = if neg { -alpha } else { alpha };
            let scaled: Vec<f32> = b.iter().map(|x| x * alpha).collect();
            let p = projection_ratio(&a, &b).unwrap();
            prop_assert!(rel_close(projection_ratio(&a, &scaled).unwrap(), p / f64::from(alpha), 1e-6));
        }

        #[test]
        fn erasers_invariant_under_positive_rescaling(
            stats in proptest::collection::vec((-2.0f64..1.0, 0.0f64..0.5, 0.0f64..0.5), 1..12),
            k in 0.1f64..10.0,
        ) {
            let summaries: BTreeMap<_, _> = stats
                .iter()
                .enumerate()
                .map(|(i, &(m, lo, hi))| (ComponentId::head(1, i), summary(m - lo, m, m + hi)))
                .collect();
            let scaled: BTreeMap<_, _> = summaries.iter().map(|(c, s)| (*c, s.scaled(k))).collect();
            prop_assert_eq!(identify_erasers(&summaries, 0.0), identify_erasers(&scaled, 0.0));
            prop_assert_eq!(identify_erasers(&summaries, 0.05), identify_erasers(&scaled, 0.05 * k));
        }

        #[test]
        fn fit_r_affine_invariant(
            pts in proptest::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 3..50),
            ax in 0.1f64..10.0, bx in -5.0f64..5.0, ay in 0.1f64..10.0, by in -5.0f64..5.0,
        ) {
            let xs: Vec<f64> = pts.iter().map(|p| p.0).collect();
            let ys: Vec<f64> = pts.iter().map(|p| p.1).collect();
            let Ok(base) = fit_correlation(&xs, &ys) else { return Ok(()); };
            let xs2: Vec<f64> = xs.iter().map(|x| ax * x + bx).collect();
            let ys2: Vec<f64> = ys.iter().map(|y| ay * y + by).collect();
            let t = fit_correlation(&xs2, &ys2).unwrap();
            prop_assert!((t.pearson_r - base.pearson_r).abs() < 1e-9);
            prop_assert!(t.pearson_r.abs() <= 1.0);
        }
    }
}
