// SPDX-License-Identifier: MIT OR Apache-2.0

//! Synthetic models and corpora with known answers.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::TokenCorpus;
use crate::error::Result;
use crate::model::{ComponentId, Model, ModelConfig, Weights};

/// A three-layer model in which head L2H1 writes exactly the negative of
/// head L0H0's output through V-composition.
#[derive(Debug, Clone)]
pub struct ConstructedErasure {
    pub model: Model,
    pub writer: ComponentId,
    pub eraser: ComponentId,
    /// Magnitude `s` of the writer output `(0, .., 0, s, -s)`.
    pub write_scale: f32,
}

/// Builds the constructed-erasure model.
///
/// `d_model = 8`, two heads of width 4, all MLPs, positional embeddings and
/// biases zero, every layer norm the identity affine map.
///
/// * Token `t` embeds as `(u_t, -u_t, 0, 0)` with `u_t` a unit 3-vector, so
///   the stream always has zero mean.
/// * L0H0 has `W_V = 0`, `b_V = e_0` and `W_O` row 0 `= (0, .., s, -s)`: it
///   writes the constant `w = (0, .., s, -s)` at every position.
/// * L2H1 reads dimension 6 of its normalized value input with weight
///   `sigma = sqrt(var(resid) + eps)`, undoing the layer-norm scale, and maps
///   it through `W_O` row 0 `= (0, .., -1, 1)`: it writes `-w`.
///
/// With the writer removed from L2H1's value input, dimension 6 is zero and
/// the eraser writes nothing.
pub fn constructed_erasure(d_vocab: usize, n_ctx: usize, seed: u64) -> Result<ConstructedErasure> {
    let cfg = ModelConfig {
        n_layers: 3,
        d_model: 8,
        n_heads: 2,
        d_head: 4,
        d_mlp: 32,
        d_vocab,
        n_ctx,
        ..ModelConfig::default()
    };
    let s = 1.5f32;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w = Weights::zeros(&cfg);
    for t in 0..d_vocab {
        let u = unit3(&mut rng);
        for (i, &x) in u.iter().enumerate() {
            w.w_e.set(t, i, x);
            w.w_e.set(t, 3 + i, -x);
        }
    }
    let writer = &mut w.blocks[0].heads[0];
    writer.b_v[0] = 1.0;
    writer.w_o.set(0, 6, s);
    writer.w_o.set(0, 7, -s);

    let var = (2.0 + 2.0 * f64::from(s) * f64::from(s)) / cfg.d_model as f64;
    let sigma = (var + cfg.ln_eps).sqrt() as f32;
    let eraser = &mut w.blocks[2].heads[1];
    eraser.w_v.set(6, 0, sigma);
    eraser.w_o.set(0, 6, -1.0);
    eraser.w_o.set(0, 7, 1.0);

    for i in 0..cfg.d_model {
        for j in 0..d_vocab {
            w.w_u.set(i, j, rng.gen_range(-1.0..1.0));
        }
    }
    Ok(ConstructedErasure {
        model: Model::new("constructed-erasure", cfg, w)?,
        writer: ComponentId::head(0, 0),
        eraser: ComponentId::head(2, 1),
        write_scale: s,
    })
}

fn unit3(rng: &mut ChaCha8Rng) -> [f32; 3] {
    loop {
        let v: [f64; 3] = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 0.1 && n <= 1.0 {
            return v.map(|x| (x / n) as f32);
        }
    }
}

/// `n_docs` documents of uniformly random ids with lengths in `len_range`.
pub fn random_corpus(d_vocab: usize, n_docs: usize, len_range: std::ops::RangeInclusive<usize>, seed: u64) -> Result<TokenCorpus> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let docs = (0..n_docs)
        .map(|_| {
            let len = rng.gen_range(len_range.clone());
            (0..len).map(|_| rng.gen_range(0..d_vocab as u32)).collect()
        })
        .collect();
    TokenCorpus::new(docs)
}
