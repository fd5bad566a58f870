// SPDX-License-Identifier: MIT OR Apache-2.0

//! Test oracles shared by the integration and acceptance suites.

#![allow(dead_code)]

use std::collections::BTreeMap;

use erasure::kernels::{GeluVariant, Matrix};
use erasure::model::{ComponentId, Model, ModelConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Rows = Vec<Vec<f64>>;

/// Activations of a straight-line forward pass carried out entirely in f64.
pub struct Reference {
    /// Residual stream at every checkpoint, in checkpoint order.
    pub resid: Vec<Rows>,
    pub components: BTreeMap<ComponentId, Rows>,
    pub logits: Rows,
}

fn vecmat(x: &[f64], w: &Matrix) -> Vec<f64> {
    let mut out = vec![0.0; w.cols()];
    for (i, &xi) in x.iter().enumerate() {
        for (j, o) in out.iter_mut().enumerate() {
            *o += xi * f64::from(w.get(i, j));
        }
    }
    out
}

fn plus(a: &[f64], b: &[f32]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + f64::from(*y)).collect()
}

fn ln(x: &[f64], g: &[f32], b: &[f32], eps: f64) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let inv = 1.0 / (var + eps).sqrt();
    x.iter()
        .zip(g.iter().zip(b))
        .map(|(v, (g, b))| (v - mean) * inv * f64::from(*g) + f64::from(*b))
        .collect()
}

fn gelu(x: f64, variant: GeluVariant) -> f64 {
    match variant {
        GeluVariant::Tanh => 0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh()),
        GeluVariant::Erf => 0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2)),
    }
}

fn add_rows(acc: &mut Rows, other: &Rows) {
    for (a, b) in acc.iter_mut().zip(other) {
        for (x, y) in a.iter_mut().zip(b) {
            *x += y;
        }
    }
}

pub fn reference_forward(model: &Model, tokens: &[u32]) -> Reference {
    let cfg = &model.config;
    let w = &model.weights;
    let seq = tokens.len();
    let mut components = BTreeMap::new();
    let emb: Rows = tokens.iter().map(|&t| w.w_e.row(t as usize).iter().map(|&v| f64::from(v)).collect()).collect();
    let pos: Rows = (0..seq).map(|p| w.w_pos.row(p).iter().map(|&v| f64::from(v)).collect()).collect();
    let mut x = emb.clone();
    add_rows(&mut x, &pos);
    components.insert(ComponentId::Embed, emb);
    components.insert(ComponentId::PosEmbed, pos);
    let mut resid = Vec::new();

    for (l, block) in w.blocks.iter().enumerate() {
        resid.push(x.clone());
        let normed: Rows = x.iter().map(|r| ln(r, &block.ln1.gamma, &block.ln1.beta, cfg.ln_eps)).collect();
        let mut mid = x.clone();
        for (h, hw) in block.heads.iter().enumerate() {
            let q: Rows = normed.iter().map(|r| plus(&vecmat(r, &hw.w_q), &hw.b_q)).collect();
            let k: Rows = normed.iter().map(|r| plus(&vecmat(r, &hw.w_k), &hw.b_k)).collect();
            let v: Rows = normed.iter().map(|r| plus(&vecmat(r, &hw.w_v), &hw.b_v)).collect();
            let mut out = Vec::with_capacity(seq);
            for i in 0..seq {
                let scores: Vec<f64> = (0..=i)
                    .map(|j| q[i].iter().zip(&k[j]).map(|(a, b)| a * b).sum::<f64>() / (cfg.d_head as f64).sqrt())
                    .collect();
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                let total: f64 = e.iter().sum();
                let mut z = vec![0.0; cfg.d_head];
                for (j, ej) in e.iter().enumerate() {
                    for (zd, vd) in z.iter_mut().zip(&v[j]) {
                        *zd += ej / total * vd;
                    }
                }
                out.push(vecmat(&z, &hw.w_o));
            }
            add_rows(&mut mid, &out);
            components.insert(ComponentId::head(l, h), out);
        }
        let bias: Rows = vec![block.b_o.iter().map(|&v| f64::from(v)).collect(); seq];
        add_rows(&mut mid, &bias);
        components.insert(ComponentId::AttnBias(l), bias);
        resid.push(mid.clone());

        let mlp: Rows = mid
            .iter()
            .map(|r| {
                let n = ln(r, &block.ln2.gamma, &block.ln2.beta, cfg.ln_eps);
                let hidden: Vec<f64> = plus(&vecmat(&n, &block.w_in), &block.b_in)
                    .into_iter()
                    .map(|v| gelu(v, cfg.gelu))
                    .collect();
                plus(&vecmat(&hidden, &block.w_out), &block.b_out)
            })
            .collect();
        x = mid;
        add_rows(&mut x, &mlp);
        components.insert(ComponentId::Mlp(l), mlp);
        resid.push(x.clone());
    }
    let logits = x
        .iter()
        .map(|r| plus(&vecmat(&ln(r, &w.ln_final.gamma, &w.ln_final.beta, cfg.ln_eps), &w.w_u), &w.b_u))
        .collect();
    Reference {
        resid,
        components,
        logits,
    }
}

/// Largest absolute gap between an f32 matrix and f64 rows.
pub fn max_gap(m: &Matrix, r: &Rows) -> f64 {
    let mut worst = 0.0f64;
    for (i, row) in r.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            worst = worst.max((f64::from(m.get(i, j)) - v).abs());
        }
    }
    worst
}

/// A random small model (2–4 layers, d_model 32–64) and a token sequence.
pub fn random_case(seed: u64) -> (Model, Vec<u32>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_layers = rng.gen_range(2..=4);
    let d_model = [32, 40, 48, 56, 64][rng.gen_range(0..5)];
    let n_heads = [2, 4, 8][rng.gen_range(0..3)];
    let d_vocab = rng.gen_range(20..80);
    let mut cfg = ModelConfig::tiny(n_layers, d_model, n_heads, d_vocab, 32);
    if rng.gen_bool(0.5) {
        cfg.gelu = GeluVariant::Erf;
    }
    let model = Model::random(cfg, seed).expect("valid random model");
    let len = rng.gen_range(1..=16);
    let tokens = (0..len).map(|_| rng.gen_range(0..d_vocab as u32)).collect();
    (model, tokens)
}

/// Largest gap between each residual checkpoint and the f64 sum of the
/// component outputs written at or before it.
pub fn decomposition_gap(model: &Model, cache: &erasure::model::ActivationCache) -> f64 {
    use erasure::model::ResidCheckpoint;
    let (seq, d) = (cache.seq_len(), model.config.d_model);
    let mut worst = 0.0f64;
    for ckpt in ResidCheckpoint::all(&model.config) {
        let mut sum = vec![0.0f64; seq * d];
        for c in ComponentId::all(&model.config).into_iter().filter(|c| c.is_in(ckpt)) {
            for (s, v) in sum.iter_mut().zip(cache.component_output(c).unwrap().as_slice()) {
                *s += f64::from(*v);
            }
        }
        for (s, v) in sum.iter().zip(cache.resid(ckpt).unwrap().as_slice()) {
            worst = worst.max((s - f64::from(*v)).abs());
        }
    }
    worst
}
