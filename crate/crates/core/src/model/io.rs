// SPDX-License-Identifier: MIT OR Apache-2.0

//! Weight interchange format.
//!
//! Layout (safetensors-compatible):
//!
//! ```text
//! u64 LE header length N | N bytes of JSON header | raw little-endian f32 data
//! ```
//!
//! The header maps each tensor name to
//! `{"dtype": "F32", "shape": [...], "data_offsets": [begin, end]}` with byte
//! offsets relative to the start of the data section. A `__metadata__` entry
//! (string → string) carries `model_name`, `gelu_variant` and `ln_eps`.
//!
//! Canonical tensor names and shapes:
//!
//! | name | shape |
//! |---|---|
//! | `embed.W_E` | `[d_vocab, d_model]` |
//! | `pos_embed.W_pos` | `[n_ctx, d_model]` |
//! | `blocks.{l}.ln1.w`, `blocks.{l}.ln1.b` | `[d_model]` |
//! | `blocks.{l}.attn.W_Q`, `W_K`, `W_V` | `[n_heads, d_model, d_head]` |
//! | `blocks.{l}.attn.b_Q`, `b_K`, `b_V` | `[n_heads, d_head]` |
//! | `blocks.{l}.attn.W_O` | `[n_heads, d_head, d_model]` |
//! | `blocks.{l}.attn.b_O` | `[d_model]` |
//! | `blocks.{l}.ln2.w`, `blocks.{l}.ln2.b` | `[d_model]` |
//! | `blocks.{l}.mlp.W_in` | `[d_model, d_mlp]` |
//! | `blocks.{l}.mlp.b_in` | `[d_mlp]` |
//! | `blocks.{l}.mlp.W_out` | `[d_mlp, d_model]` |
//! | `blocks.{l}.mlp.b_out` | `[d_model]` |
//! | `ln_final.w`, `ln_final.b` | `[d_model]` |
//! | `unembed.W_U` | `[d_model, d_vocab]` |
//! | `unembed.b_U` | `[d_vocab]` |

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::kernels::{GeluVariant, Matrix};
use crate::model::{
    BlockWeights, HeadWeights, LayerNormWeights, Model, ModelConfig, Positional, Weights,
};

pub const FORMAT_VERSION: &str = "1";
const METADATA_KEY: &str = "__metadata__";

/// A named n-dimensional f32 tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} holds {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct HeaderEntry {
    dtype: String,
    shape: Vec<usize>,
    data_offsets: [usize; 2],
}

/// Tensors plus string metadata, as stored on disk.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TensorFile {
    pub tensors: BTreeMap<String, Tensor>,
    pub metadata: BTreeMap<String, String>,
}

impl TensorFile {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut header = serde_json::Map::new();
        if !self.metadata.is_empty() {
            header.insert(
                METADATA_KEY.into(),
                serde_json::to_value(&self.metadata).expect("string map"),
            );
        }
        let mut offset = 0usize;
        for (name, t) in &self.tensors {
            let len = t.data.len() * 4;
            let entry = HeaderEntry {
                dtype: "F32".into(),
                shape: t.shape.clone(),
                data_offsets: [offset, offset + len],
            };
            header.insert(name.clone(), serde_json::to_value(entry).expect("entry"));
            offset += len;
        }
        let mut json = serde_json::to_vec(&Value::Object(header))
            .map_err(|e| Error::format("weight header", e.to_string()))?;
        while json.len() % 8 != 0 {
            json.push(b' ');
        }
        let mut out = Vec::with_capacity(8 + json.len() + offset);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in self.tensors.values() {
            for x in &t.data {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |d: String| Error::format("weight file", d);
        if bytes.len() < 8 {
            return Err(bad("shorter than the 8-byte header length".into()));
        }
        let n = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
        let data_start = 8usize
            .checked_add(n)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad(format!("header length {n} exceeds file size")))?;
        let header: serde_json::Map<String, Value> =
            serde_json::from_slice(&bytes[8..data_start]).map_err(|e| bad(format!("header: {e}")))?;
        let data = &bytes[data_start..];

        let mut file = TensorFile::default();
        for (name, value) in header {
            if name == METADATA_KEY {
                file.metadata = serde_json::from_value(value)
                    .map_err(|e| bad(format!("metadata: {e}")))?;
                continue;
            }
            let entry: HeaderEntry =
                serde_json::from_value(value).map_err(|e| bad(format!("tensor `{name}`: {e}")))?;
            if entry.dtype != "F32" {
                return Err(bad(format!("tensor `{name}` has dtype {}, only F32 is supported", entry.dtype)));
            }
            let [begin, end] = entry.data_offsets;
            let count: usize = entry.shape.iter().product();
            if end < begin || end > data.len() || end - begin != count * 4 {
                return Err(bad(format!(
                    "tensor `{name}` offsets [{begin}, {end}) do not fit shape {:?}",
                    entry.shape
                )));
            }
            let values = data[begin..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            file.tensors.insert(name, Tensor::new(entry.shape, values)?);
        }
        Ok(file)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    fn take(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    fn dims<const N: usize>(&self, name: &str) -> Result<[usize; N]> {
        let t = self.take(name)?;
        t.shape.as_slice().try_into().map_err(|_| {
            Error::Shape(format!("`{name}` has {} dims, expected {N}", t.shape.len()))
        })
    }

    fn matrix(&self, name: &str, rows: usize, cols: usize) -> Result<Matrix> {
        let t = self.take(name)?;
        if t.shape != [rows, cols] {
            return Err(Error::Shape(format!("`{name}` is {:?}, expected [{rows}, {cols}]", t.shape)));
        }
        Matrix::from_vec(rows, cols, t.data.clone())
    }

    fn vector(&self, name: &str, len: usize) -> Result<Vec<f32>> {
        let t = self.take(name)?;
        if t.shape != [len] {
            return Err(Error::Shape(format!("`{name}` is {:?}, expected [{len}]", t.shape)));
        }
        Ok(t.data.clone())
    }

    /// Slice `i` of a `[n, rows, cols]` tensor.
    fn stacked_matrix(&self, name: &str, n: usize, rows: usize, cols: usize, i: usize) -> Result<Matrix> {
        let t = self.take(name)?;
        if t.shape != [n, rows, cols] {
            return Err(Error::Shape(format!(
                "`{name}` is {:?}, expected [{n}, {rows}, {cols}]",
                t.shape
            )));
        }
        let size = rows * cols;
        Matrix::from_vec(rows, cols, t.data[i * size..(i + 1) * size].to_vec())
    }

    fn stacked_vector(&self, name: &str, n: usize, len: usize, i: usize) -> Result<Vec<f32>> {
        let t = self.take(name)?;
        if t.shape != [n, len] {
            return Err(Error::Shape(format!("`{name}` is {:?}, expected [{n}, {len}]", t.shape)));
        }
        Ok(t.data[i * len..(i + 1) * len].to_vec())
    }
}

fn stack(mats: impl Iterator<Item = Vec<f32>>, shape: Vec<usize>) -> Tensor {
    let data = mats.flatten().collect();
    Tensor::new(shape, data).expect("stacked shape")
}

fn vector_tensor(v: &[f32]) -> Tensor {
    Tensor {
        shape: vec![v.len()],
        data: v.to_vec(),
    }
}

fn matrix_tensor(m: &Matrix) -> Tensor {
    Tensor {
        shape: vec![m.rows(), m.cols()],
        data: m.as_slice().to_vec(),
    }
}

impl Model {
    /// Converts to the canonical tensor layout.
    pub fn to_tensor_file(&self) -> TensorFile {
        let cfg = &self.config;
        let w = &self.weights;
        let mut t = BTreeMap::new();
        t.insert("embed.W_E".into(), matrix_tensor(&w.w_e));
        t.insert("pos_embed.W_pos".into(), matrix_tensor(&w.w_pos));
        for (l, b) in w.blocks.iter().enumerate() {
            let p = |s: &str| format!("blocks.{l}.{s}");
            t.insert(p("ln1.w"), vector_tensor(&b.ln1.gamma));
            t.insert(p("ln1.b"), vector_tensor(&b.ln1.beta));
            let in_shape = vec![cfg.n_heads, cfg.d_model, cfg.d_head];
            let bias_shape = vec![cfg.n_heads, cfg.d_head];
            let heads = &b.heads;
            t.insert(p("attn.W_Q"), stack(heads.iter().map(|h| h.w_q.as_slice().to_vec()), in_shape.clone()));
            t.insert(p("attn.W_K"), stack(heads.iter().map(|h| h.w_k.as_slice().to_vec()), in_shape.clone()));
            t.insert(p("attn.W_V"), stack(heads.iter().map(|h| h.w_v.as_slice().to_vec()), in_shape));
            t.insert(p("attn.b_Q"), stack(heads.iter().map(|h| h.b_q.clone()), bias_shape.clone()));
            t.insert(p("attn.b_K"), stack(heads.iter().map(|h| h.b_k.clone()), bias_shape.clone()));
            t.insert(p("attn.b_V"), stack(heads.iter().map(|h| h.b_v.clone()), bias_shape));
            t.insert(
                p("attn.W_O"),
                stack(
                    heads.iter().map(|h| h.w_o.as_slice().to_vec()),
                    vec![cfg.n_heads, cfg.d_head, cfg.d_model],
                ),
            );
            t.insert(p("attn.b_O"), vector_tensor(&b.b_o));
            t.insert(p("ln2.w"), vector_tensor(&b.ln2.gamma));
            t.insert(p("ln2.b"), vector_tensor(&b.ln2.beta));
            t.insert(p("mlp.W_in"), matrix_tensor(&b.w_in));
            t.insert(p("mlp.b_in"), vector_tensor(&b.b_in));
            t.insert(p("mlp.W_out"), matrix_tensor(&b.w_out));
            t.insert(p("mlp.b_out"), vector_tensor(&b.b_out));
        }
        t.insert("ln_final.w".into(), vector_tensor(&w.ln_final.gamma));
        t.insert("ln_final.b".into(), vector_tensor(&w.ln_final.beta));
        t.insert("unembed.W_U".into(), matrix_tensor(&w.w_u));
        t.insert("unembed.b_U".into(), vector_tensor(&w.b_u));

        let metadata = BTreeMap::from([
            ("format_version".to_string(), FORMAT_VERSION.to_string()),
            ("model_name".to_string(), self.name.clone()),
            ("gelu_variant".to_string(), cfg.gelu.to_string()),
            ("ln_eps".to_string(), format!("{:e}", cfg.ln_eps)),
        ]);
        TensorFile { tensors: t, metadata }
    }

    /// Rebuilds a model from the canonical layout, inferring the config from
    /// tensor shapes and the metadata record.
    pub fn from_tensor_file(file: &TensorFile) -> Result<Self> {
        let [d_vocab, d_model] = file.dims::<2>("embed.W_E")?;
        let [n_ctx, _] = file.dims::<2>("pos_embed.W_pos")?;
        let mut n_layers = 0;
        while file.tensors.keys().any(|k| k.starts_with(&format!("blocks.{n_layers}."))) {
            n_layers += 1;
        }
        if n_layers == 0 {
            return Err(Error::MissingTensor("blocks.0.attn.W_Q".into()));
        }
        let [n_heads, _, d_head] = file.dims::<3>("blocks.0.attn.W_Q")?;
        let [_, d_mlp] = file.dims::<2>("blocks.0.mlp.W_in")?;

        let gelu = match file.metadata.get("gelu_variant") {
            Some(s) => s.parse::<GeluVariant>()?,
            None => GeluVariant::default(),
        };
        let ln_eps = match file.metadata.get("ln_eps") {
            Some(s) => s
                .parse::<f64>()
                .map_err(|_| Error::format("weight metadata", format!("ln_eps `{s}`")))?,
            None => ModelConfig::default().ln_eps,
        };
        let config = ModelConfig {
            n_layers,
            d_model,
            n_heads,
            d_head,
            d_mlp,
            d_vocab,
            n_ctx,
            ln_eps,
            gelu,
            positional: Positional::Learned,
        };
        config.validate()?;

        let mut blocks = Vec::with_capacity(n_layers);
        for l in 0..n_layers {
            let p = |s: &str| format!("blocks.{l}.{s}");
            let heads = (0..n_heads)
                .map(|h| -> Result<HeadWeights> {
                    Ok(HeadWeights {
                        w_q: file.stacked_matrix(&p("attn.W_Q"), n_heads, d_model, d_head, h)?,
                        b_q: file.stacked_vector(&p("attn.b_Q"), n_heads, d_head, h)?,
                        w_k: file.stacked_matrix(&p("attn.W_K"), n_heads, d_model, d_head, h)?,
                        b_k: file.stacked_vector(&p("attn.b_K"), n_heads, d_head, h)?,
                        w_v: file.stacked_matrix(&p("attn.W_V"), n_heads, d_model, d_head, h)?,
                        b_v: file.stacked_vector(&p("attn.b_V"), n_heads, d_head, h)?,
                        w_o: file.stacked_matrix(&p("attn.W_O"), n_heads, d_head, d_model, h)?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            blocks.push(BlockWeights {
                ln1: LayerNormWeights {
                    gamma: file.vector(&p("ln1.w"), d_model)?,
                    beta: file.vector(&p("ln1.b"), d_model)?,
                },
                heads,
                b_o: file.vector(&p("attn.b_O"), d_model)?,
                ln2: LayerNormWeights {
                    gamma: file.vector(&p("ln2.w"), d_model)?,
                    beta: file.vector(&p("ln2.b"), d_model)?,
                },
                w_in: file.matrix(&p("mlp.W_in"), d_model, d_mlp)?,
                b_in: file.vector(&p("mlp.b_in"), d_mlp)?,
                w_out: file.matrix(&p("mlp.W_out"), d_mlp, d_model)?,
                b_out: file.vector(&p("mlp.b_out"), d_model)?,
            });
        }
        let weights = Weights {
            w_e: file.matrix("embed.W_E", d_vocab, d_model)?,
            w_pos: file.matrix("pos_embed.W_pos", n_ctx, d_model)?,
            blocks,
            ln_final: LayerNormWeights {
                gamma: file.vector("ln_final.w", d_model)?,
                beta: file.vector("ln_final.b", d_model)?,
            },
            w_u: file.matrix("unembed.W_U", d_model, d_vocab)?,
            b_u: file.vector("unembed.b_U", d_vocab)?,
        };
        let name = file
            .metadata
            .get("model_name")
            .cloned()
            .unwrap_or_else(|| "unnamed".into());
        Model::new(name, config, weights)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_tensor_file().write(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_tensor_file(&TensorFile::read(path)?)
    }
}
