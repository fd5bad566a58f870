// SPDX-License-Identifier: MIT OR Apache-2.0

//! Acceptance suite: one PASS, FAIL or SKIP line per criterion.
//!
//! Checks that need the exported GELU-4L artifacts look in the directory
//! named by `ERASURE_GELU4L_DIR` (default `artifacts/gelu-4l` under the
//! workspace root) for `model.safetensors`, `vocab.json` and `corpus.jsonl`,
//! and skip when any is missing. Run them with `--release`.

mod common;

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::time::Instant;

use common::{decomposition_gap, random_case};
use erasure::analysis::{aggregate, fit_correlation, projection_ratio, quantile_sorted};
use erasure::corpus::{PromptFixture, TokenCorpus, Vocabulary};
use erasure::dla::{constant_term, dla, erasure_isolated_dla_all};
use erasure::experiments::{self, AdversarialOptions, Sampling};
use erasure::interventions::{vcomposition_plan, zero_ablate_vcomposition, InterventionPlan};
use erasure::model::{ComponentId, HeadStream, Model, ResidCheckpoint};
use erasure::report::FitOutcome;
use erasure::synthetic::{constructed_erasure, random_corpus};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde_json::Value;

type Criterion = (&'static str, Box<dyn FnOnce() -> Outcome>);

enum Outcome {
    Pass(String),
    Fail(String),
    Skip(String),
}

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Outcome::Pass(detail)
    } else {
        Outcome::Fail(detail)
    }
}

fn residual_decomposition() -> Outcome {
    let start = Instant::now();
    let mut worst = 0.0f64;
    for seed in 0..100 {
        let (model, tokens) = random_case(1000 + seed);
        let cache = model.forward(&tokens, None).unwrap();
        worst = worst.max(decomposition_gap(&model, &cache));
    }
    let secs = start.elapsed().as_secs_f64();
    check(worst < 1e-4 && secs < 60.0, format!("100 models, max gap {worst:.2e}, {secs:.1}s"))
}

fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
}

fn projection_identities() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = 0.0f64;
    let mut failures = 0;
    for _ in 0..1000 {
        let d = rng.gen_range(2..64);
        let v = |rng: &mut ChaCha8Rng| (0..d).map(|_| rng.gen_range(-2.0f32..2.0)).collect::<Vec<f32>>();
        let (a, a2, b) = (v(&mut rng), v(&mut rng), v(&mut rng));
        let (alpha, beta, k) = (rng.gen_range(-3.0f32..3.0), rng.gen_range(-3.0f32..3.0), rng.gen_range(0.1f32..5.0));
        let neg_b: Vec<f32> = b.iter().map(|x| -x).collect();
        // Component of `a` orthogonal to `b`, formed in f64.
        let bb: f64 = b.iter().map(|&x| f64::from(x).powi(2)).sum();
        let ab: f64 = a.iter().zip(&b).map(|(&x, &y)| f64::from(x) * f64::from(y)).sum();
        let orth: Vec<f32> = a.iter().zip(&b).map(|(&x, &y)| (f64::from(x) - ab / bb * f64::from(y)) as f32).collect();
        let combo: Vec<f32> = a.iter().zip(&a2).map(|(&x, &y)| alpha * x + beta * y).collect();
        let kb: Vec<f32> = b.iter().map(|x| k * x).collect();
        let pr = |x: &[f32], y: &[f32]| projection_ratio(x, y).unwrap();
        let pairs = [
            (pr(&b, &b), 1.0),
            (pr(&neg_b, &b), -1.0),
            (pr(&combo, &b), f64::from(alpha) * pr(&a, &b) + f64::from(beta) * pr(&a2, &b)),
            (pr(&a, &kb), pr(&a, &b) / f64::from(k)),
        ];
        for (got, want) in pairs {
            worst = worst.max((got - want).abs() / want.abs().max(1.0));
            failures += usize::from(!rel_close(got, want, 1e-6));
        }
        let o = pr(&orth, &b);
        worst = worst.max(o.abs());
        failures += usize::from(o.abs() > 1e-6);
    }
    check(failures == 0, format!("1000 pairs, {failures} violations, worst {worst:.2e}"))
}

fn bits(m: &erasure::kernels::Matrix) -> Vec<u32> {
    m.as_slice().iter().map(|x| x.to_bits()).collect()
}

fn patching_contracts() -> Outcome {
    let mut problems = Vec::new();
    for seed in 0..20 {
        let (model, tokens) = random_case(2000 + seed);
        let clean = model.forward(&tokens, None).unwrap();
        if !clean.same_activations(&model.forward(&tokens, Some(&InterventionPlan::new())).unwrap()) {
            problems.push(format!("seed {seed}: empty plan changed activations"));
        }
        let last = model.config.n_layers - 1;
        let writer = ComponentId::head(0, 0);
        let erasers: Vec<(usize, usize)> = (0..model.config.n_heads).step_by(2).map(|h| (last, h)).collect();
        let patched = zero_ablate_vcomposition(&model, &tokens, writer, &erasers).unwrap();
        let expected: Vec<u32> = clean
            .resid(ResidCheckpoint::PreAttn(last))
            .unwrap()
            .as_slice()
            .iter()
            .zip(clean.component_output(writer).unwrap().as_slice())
            .map(|(r, w)| (r - w).to_bits())
            .collect();
        for &(l, h) in &erasers {
            if bits(patched.head_input(l, h, HeadStream::Value).unwrap()) != expected {
                problems.push(format!("seed {seed}: L{l}H{h} value input is not clean minus writer"));
            }
        }
        for i in 0..=ResidCheckpoint::PreAttn(last).index() {
            let ckpt = ResidCheckpoint::from_index(i);
            if bits(clean.resid(ckpt).unwrap()) != bits(patched.resid(ckpt).unwrap()) {
                problems.push(format!("seed {seed}: upstream {ckpt} changed"));
            }
        }
    }
    check(problems.is_empty(), if problems.is_empty() { "20 random models".into() } else { problems.join("; ") })
}

fn constructed_erasure_oracle() -> Outcome {
    let c = constructed_erasure(64, 64, 7).unwrap();
    let corpus = random_corpus(64, 12, 40..=64, 8).unwrap();
    let prompts = corpus.sample(30, 32, 1).unwrap();
    let scan = experiments::scan(&c.model, &prompts, c.writer, None, 0.05, false).unwrap();
    let flagged_ok = scan.erasers == vec![c.eraser];

    let plan = vcomposition_plan(&c.model.config, c.writer, &[(2, 1)]).unwrap();
    let mut worst_pr = 0.0f64;
    let mut worst_dla = 0.0f64;
    for tokens in &prompts {
        let patched = c.model.forward(tokens, Some(&plan)).unwrap();
        let mid = patched.resid(ResidCheckpoint::Mid(2)).unwrap();
        let w = patched.component_output(c.writer).unwrap();
        for p in 0..tokens.len() {
            worst_pr = worst_pr.max((projection_ratio(mid.row(p), w.row(p)).unwrap() - 1.0).abs());
        }
        for pair in erasure_isolated_dla_all(&c.model, tokens, c.writer, &[(2, 1)]).unwrap() {
            worst_dla = worst_dla.max((pair.erasure_dla + pair.writer_dla).abs());
        }
    }
    check(
        flagged_ok && worst_pr < 1e-3 && worst_dla < 1e-3,
        format!(
            "flagged {:?}, patched PR gap {worst_pr:.2e}, erasure+writer DLA gap {worst_dla:.2e}",
            scan.erasers.iter().map(|c| c.to_string()).collect::<Vec<_>>()
        ),
    )
}

fn dla_additivity() -> Outcome {
    let mut worst = 0.0f64;
    for seed in 0..20 {
        let (model, tokens) = random_case(3000 + seed);
        let cache = model.forward(&tokens, None).unwrap();
        let logits = cache.logits().unwrap();
        let constant = constant_term(&model).unwrap();
        for p in 0..tokens.len() {
            let mut total: Vec<f64> = constant.iter().map(|&x| f64::from(x)).collect();
            for c in ComponentId::all(&model.config) {
                for (t, v) in total.iter_mut().zip(dla(&model, &cache, c, p).unwrap().logit_contribution) {
                    *t += f64::from(v);
                }
            }
            for (t, l) in total.iter().zip(logits.row(p)) {
                worst = worst.max((t - f64::from(*l)).abs());
            }
        }
    }
    check(worst < 1e-3, format!("20 random models, max gap {worst:.2e}"))
}

fn statistics() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let noise = Normal::new(0.0, 0.5).unwrap();
    let xs: Vec<f64> = (0..1000).map(|_| Normal::new(0.0, 1.0).unwrap().sample(&mut rng)).collect();
    let ys: Vec<f64> = xs.iter().map(|x| -0.6 * x + noise.sample(&mut rng)).collect();
    let fit = fit_correlation(&xs, &ys).unwrap();
    let slope_ok = (fit.slope + 0.6).abs() <= 0.05;

    // Hand-computed quartiles at rank p(n-1) with linear interpolation.
    let cases: [(&[f64], [f64; 3]); 4] = [
        (&[1.0, 2.0, 3.0, 4.0], [1.75, 2.5, 3.25]),
        (&[5.0], [5.0, 5.0, 5.0]),
        (&[3.0, -1.0, 2.0], [0.5, 2.0, 2.5]),
        (&[10.0, 0.0, 4.0, 8.0, 2.0], [2.0, 4.0, 8.0]),
    ];
    let mut quantiles_ok = true;
    for (data, [q25, q50, q75]) in cases {
        let s = aggregate(data).unwrap();
        let mut sorted = data.to_vec();
        sorted.sort_by(f64::total_cmp);
        quantiles_ok &= s.q25 == q25 && s.median == q50 && s.q75 == q75;
        quantiles_ok &= quantile_sorted(&sorted, 0.5) == q50;
    }
    check(
        slope_ok && quantiles_ok,
        format!("planted slope -0.6 recovered as {:.4} (r {:.3}); quantiles exact: {quantiles_ok}", fit.slope, fit.pearson_r),
    )
}

struct Gelu4l {
    model: Model,
    vocab: Vocabulary,
    corpus: TokenCorpus,
}

fn gelu4l() -> Result<Gelu4l, String> {
    let dir = std::env::var_os("ERASURE_GELU4L_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../artifacts/gelu-4l"));
    let files = ["model.safetensors", "vocab.json", "corpus.jsonl"].map(|f| dir.join(f));
    if let Some(missing) = files.iter().find(|p| !p.exists()) {
        return Err(format!("{} not found", missing.display()));
    }
    let model = Model::load(&files[0]).map_err(|e| e.to_string())?;
    let vocab = Vocabulary::load(&files[1]).map_err(|e| e.to_string())?;
    let corpus = TokenCorpus::load(&files[2], Some(model.config.d_vocab)).map_err(|e| e.to_string())?;
    Ok(Gelu4l { model, vocab, corpus })
}

fn sampling(n: usize) -> Sampling {
    Sampling {
        n,
        len: 128,
        seed: 0,
        include_pos0: false,
    }
}

fn l0h2() -> ComponentId {
    ComponentId::head(0, 2)
}

fn paper_erasers() -> Vec<ComponentId> {
    (2..8).map(|h| ComponentId::head(2, h)).collect()
}

fn writer_trace(g: &Gelu4l) -> Outcome {
    let r = experiments::trace_writer(&g.model, &g.corpus, l0h2(), None, &sampling(300)).unwrap();
    let median = |ckpt: &str| r.summaries[&format!("trace/clean/{ckpt}")].median;
    let early = ["resid_mid_0", "resid_post_0", "resid_pre_1", "resid_mid_1", "resid_post_1"];
    let low = early.iter().map(|c| median(c)).fold(f64::INFINITY, f64::min);
    let late = median("resid_mid_2");
    check(low >= 0.9 && late <= 0.25, format!("min median mid_0..post_1 {low:.3}, mid_2 {late:.3}"))
}

fn eraser_scan(g: &Gelu4l) -> Outcome {
    let r = experiments::scan_erasers(&g.model, &g.corpus, l0h2(), None, 0.05, &sampling(300)).unwrap();
    let found: BTreeSet<String> = r.tables["erasers"].rows.iter().map(|row| row[1].as_str().unwrap().to_string()).collect();
    let want: BTreeSet<String> = paper_erasers().iter().map(|c| c.to_string()).collect();
    let summed = r.summaries.get("summed_erasers").map_or(f64::NAN, |s| s.median);
    check(
        found == want && (-1.05..=-0.75).contains(&summed),
        format!("erasers {found:?}, summed median {summed:.3}"),
    )
}

fn vcomp_patch(g: &Gelu4l) -> Outcome {
    let r = experiments::patch_vcomp(&g.model, &g.corpus, l0h2(), &paper_erasers(), &sampling(300)).unwrap();
    let m = r.summaries["trace/patched/resid_mid_2"].median;
    check((0.85..=0.97).contains(&m), format!("patched resid_mid_2 median {m:.3}"))
}

fn dla_fit(g: &Gelu4l) -> Outcome {
    let r = experiments::dla_correlate(&g.model, &g.corpus, l0h2(), &paper_erasers(), &sampling(30)).unwrap();
    match &r.fits["erasure_vs_writer"] {
        FitOutcome::Fit(f) => check(
            (-0.80..=-0.60).contains(&f.pearson_r) && (-0.70..=-0.52).contains(&f.slope),
            format!("r {:.3}, slope {:.3}, n {}", f.pearson_r, f.slope, f.n),
        ),
        FitOutcome::Error(e) => Outcome::Fail(e.clone()),
    }
}

fn adversarial_report(g: &Gelu4l) -> erasure::report::RunReport {
    let fixtures = PromptFixture::all(&g.vocab, g.vocab.bos_id().is_some()).unwrap();
    let opts = AdversarialOptions {
        target: l0h2(),
        n_donors: 300,
        n_compare: 1,
        seed: 0,
    };
    experiments::adversarial(&g.model, &fixtures, Some(&g.vocab), &g.corpus, &opts).unwrap()
}

fn adversarial_logits(r: &erasure::report::RunReport) -> Outcome {
    let t = &r.tables["fixtures"];
    let col = |n: &str| t.column(n).unwrap();
    let mut ok = true;
    let mut detail = Vec::new();
    for row in &t.rows {
        let diff = row[col("model_logit_diff")].as_f64().unwrap();
        let want = row[col("expected_logit_diff")].as_f64().unwrap();
        let matched = row[col("top2_match")] == Value::Bool(true);
        ok &= matched && (diff - want).abs() <= 0.15;
        detail.push(format!("{}/{} {diff:.2} vs {want}", row[col("top1")], row[col("top2")]));
    }
    check(ok, detail.join("; "))
}

fn adversarial_patching(r: &erasure::report::RunReport) -> Outcome {
    let t = &r.tables["heads"];
    let col = |n: &str| t.column(n).unwrap();
    let mut ok = true;
    let mut detail = Vec::new();
    for row in &t.rows {
        let clean = row[col("clean_dla")].as_f64().unwrap();
        let median = row[col("median")].as_f64().unwrap_or(f64::NAN);
        let role = row[col("role")].as_str().unwrap();
        ok &= if role == "target" {
            (median - clean).abs() <= 0.1
        } else {
            median <= 0.5 * clean
        };
        detail.push(format!("{} {role} {clean:.2}->{median:.2}", row[col("head")].as_str().unwrap()));
    }
    check(ok, detail.join("; "))
}

fn main() {
    let mut criteria: Vec<Criterion> = vec![
        ("residual decomposition", Box::new(residual_decomposition)),
        ("projection-ratio identities", Box::new(projection_identities)),
        ("patching contracts", Box::new(patching_contracts)),
        ("constructed-erasure oracle", Box::new(constructed_erasure_oracle)),
        ("DLA additivity", Box::new(dla_additivity)),
        ("statistics", Box::new(statistics)),
    ];
    let weights_checks = [
        "GELU-4L writer trace",
        "GELU-4L eraser set and summed erasure",
        "GELU-4L V-composition patch",
        "GELU-4L DLA correlation",
        "GELU-4L adversarial top-2 and logit diffs",
        "GELU-4L adversarial head-input patching",
    ];
    match gelu4l() {
        Err(why) => {
            for name in weights_checks {
                let why = why.clone();
                criteria.push((name, Box::new(move || Outcome::Skip(why))));
            }
        }
        Ok(g) => {
            let g = std::rc::Rc::new(g);
            let adv = std::rc::Rc::new(std::cell::OnceCell::new());
            let (g1, g2, g3, g4) = (g.clone(), g.clone(), g.clone(), g.clone());
            criteria.push((weights_checks[0], Box::new(move || writer_trace(&g1))));
            criteria.push((weights_checks[1], Box::new(move || eraser_scan(&g2))));
            criteria.push((weights_checks[2], Box::new(move || vcomp_patch(&g3))));
            criteria.push((weights_checks[3], Box::new(move || dla_fit(&g4))));
            let (ga, aa) = (g.clone(), adv.clone());
            criteria.push((
                weights_checks[4],
                Box::new(move || adversarial_logits(aa.get_or_init(|| adversarial_report(&ga)))),
            ));
            let (gb, ab) = (g, adv);
            criteria.push((
                weights_checks[5],
                Box::new(move || adversarial_patching(ab.get_or_init(|| adversarial_report(&gb)))),
            ));
        }
    }

    let mut failed = 0;
    for (name, f) in criteria {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Outcome::Fail(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Outcome::Pass(d) => println!("PASS  {name}: {d} [{secs:.1}s]"),
            Outcome::Fail(d) => {
                failed += 1;
                println!("FAIL  {name}: {d} [{secs:.1}s]");
            }
            Outcome::Skip(d) => println!("SKIP  {name}: {d}"),
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
