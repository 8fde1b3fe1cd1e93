//! Time-conditioned noise-prediction network over flattened windows.
//!
//! The network is a residual perceptron: the flattened window is concatenated
//! with a Fourier embedding of the diffusion step, lifted to `width` units,
//! passed through `depth` blocks `h <- h + tanh(W h + b)` and projected back
//! to the window size by an output layer that starts at zero.

use std::f64::consts::PI;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::container;
use crate::error::{shape_err, Error, Result};
use crate::numerics::{gemm, glorot, Array, ParamSet, ParamVars, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeEmbedding {
    pub n_freq: usize,
    pub scale: f64,
}

impl Default for TimeEmbedding {
    fn default() -> Self {
        Self { n_freq: 8, scale: 1.0 }
    }
}

impl TimeEmbedding {
    pub fn len(&self) -> usize {
        2 * self.n_freq
    }

    pub fn is_empty(&self) -> bool {
        self.n_freq == 0
    }
}

/// `[sin(w_j u).., cos(w_j u)..]` with `u = k / K` and frequencies spaced
/// geometrically from `scale pi/2`, which is monotone over the whole range,
/// up to `scale pi K/2`, which separates neighbouring steps.
pub fn time_embed(k: usize, total: usize, emb: &TimeEmbedding) -> Vec<f64> {
    let total = total.max(1) as f64;
    let u = k as f64 / total;
    let mut out = vec![0.0; emb.len()];
    for j in 0..emb.n_freq {
        let frac = if emb.n_freq > 1 { j as f64 / (emb.n_freq - 1) as f64 } else { 0.0 };
        let arg = emb.scale * 0.5 * PI * total.powf(frac) * u;
        out[j] = arg.sin();
        out[emb.n_freq + j] = arg.cos();
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    /// Window length `L`.
    pub rows: usize,
    /// `state_dim + action_dim`.
    pub row_dim: usize,
    pub width: usize,
    pub depth: usize,
    pub embedding: TimeEmbedding,
}

impl DenoiserConfig {
    pub fn new(rows: usize, row_dim: usize, width: usize, depth: usize) -> Result<Self> {
        let cfg = Self { rows, row_dim, width, depth, embedding: TimeEmbedding::default() };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.rows == 0 || self.row_dim == 0 || self.width == 0 || self.depth == 0 || self.embedding.n_freq == 0 {
            return Err(Error::Config(format!("invalid denoiser configuration {self:?}")));
        }
        Ok(())
    }

    pub fn window_len(&self) -> usize {
        self.rows * self.row_dim
    }

    pub fn input_len(&self) -> usize {
        self.window_len() + self.embedding.len()
    }
}

fn block_names(i: usize) -> (String, String) {
    (format!("blk{i}.w"), format!("blk{i}.b"))
}

pub fn init_params(cfg: &DenoiserConfig, rng: &mut impl Rng) -> Result<ParamSet> {
    cfg.validate()?;
    let mut p = ParamSet::new();
    p.insert("in.w", glorot(rng, cfg.input_len(), cfg.width))?;
    p.insert("in.b", Array::zeros(&[cfg.width]))?;
    for i in 0..cfg.depth {
        let (w, b) = block_names(i);
        p.insert(w, glorot(rng, cfg.width, cfg.width))?;
        p.insert(b, Array::zeros(&[cfg.width]))?;
    }
    p.insert("out.w", Array::zeros(&[cfg.width, cfg.window_len()]))?;
    p.insert("out.b", Array::zeros(&[cfg.window_len()]))?;
    Ok(p)
}

/// Stacked embeddings for one diffusion step per batch row.
pub fn embed_batch(ks: &[usize], total: usize, emb: &TimeEmbedding) -> Array {
    let data: Vec<f64> = ks.iter().flat_map(|&k| time_embed(k, total, emb)).collect();
    Array::matrix(ks.len(), emb.len(), data).expect("sized by construction")
}

/// Differentiable forward pass on `x: [B, L*D]` and `emb: [B, 2*n_freq]`.
pub fn forward_tape(cfg: &DenoiserConfig, tape: &mut Tape, vars: &ParamVars, x: Var, emb: Var) -> Result<Var> {
    if tape.value(x).cols() != cfg.window_len() {
        return Err(shape_err(format!("window width {} does not match {}", tape.value(x).cols(), cfg.window_len())));
    }
    let inp = tape.concat_cols(x, emb)?;
    let z = tape.matmul(inp, vars.get("in.w")?)?;
    let z = tape.add_row(z, vars.get("in.b")?)?;
    let mut h = tape.tanh(z);
    for i in 0..cfg.depth {
        let (w, b) = block_names(i);
        let z = tape.matmul(h, vars.get(&w)?)?;
        let z = tape.add_row(z, vars.get(&b)?)?;
        let a = tape.tanh(z);
        h = tape.add(h, a)?;
    }
    let z = tape.matmul(h, vars.get("out.w")?)?;
    tape.add_row(z, vars.get("out.b")?)
}

fn affine_into(x: &[f64], rows: usize, w: &Array, b: &Array, out: &mut Vec<f64>) {
    let (k, n) = (w.rows(), w.cols());
    out.clear();
    for _ in 0..rows {
        out.extend_from_slice(b.data());
    }
    gemm(rows, k, n, x, false, w.data(), false, out, 1.0);
}

/// Batched noise prediction without recording a tape. `x` is `[B, L*D]`
/// row-major and `ks[b]` is the diffusion step of row `b`.
pub fn denoise_batch(params: &ParamSet, cfg: &DenoiserConfig, x: &[f64], ks: &[usize], total: usize) -> Result<Vec<f64>> {
    let batch = ks.len();
    let wl = cfg.window_len();
    if x.len() != batch * wl {
        return Err(shape_err(format!("expected {batch}x{wl} window values, got {}", x.len())));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { context: "denoise".into(), detail: "input window".into() });
    }
    let il = cfg.input_len();
    let mut inp = Vec::with_capacity(batch * il);
    for (r, &k) in ks.iter().enumerate() {
        inp.extend_from_slice(&x[r * wl..(r + 1) * wl]);
        inp.extend(time_embed(k, total, &cfg.embedding));
    }
    let mut h = Vec::new();
    affine_into(&inp, batch, params.get("in.w")?, params.get("in.b")?, &mut h);
    h.iter_mut().for_each(|v| *v = v.tanh());
    let mut z = Vec::new();
    for i in 0..cfg.depth {
        let (w, b) = block_names(i);
        affine_into(&h, batch, params.get(&w)?, params.get(&b)?, &mut z);
        for (hv, zv) in h.iter_mut().zip(&z) {
            *hv += zv.tanh();
        }
    }
    let mut out = Vec::new();
    affine_into(&h, batch, params.get("out.w")?, params.get("out.b")?, &mut out);
    Ok(out)
}

/// Noise prediction for a single window at diffusion step `k`.
pub fn denoise(params: &ParamSet, x_k: &Array, k: usize, total: usize, cfg: &DenoiserConfig) -> Result<Array> {
    if x_k.len() != cfg.window_len() {
        return Err(shape_err(format!("window has {} entries, expected {}", x_k.len(), cfg.window_len())));
    }
    let out = denoise_batch(params, cfg, x_k.data(), &[k], total)?;
    Array::new(x_k.shape().to_vec(), out)
}

/// Parameter checkpoint: container header with `kind`, free-form metadata and
/// the leaf layout, then little-endian f64 values.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub meta: serde_json::Value,
    pub params: ParamSet,
}

pub const CHECKPOINT_VERSION: u32 = 1;

impl Checkpoint {
    pub fn encode(&self) -> Result<Vec<u8>> {
        let header = serde_json::json!({
            "version": CHECKPOINT_VERSION,
            "kind": self.kind,
            "step": self.params.step_count,
            "layout": self.params.layout(),
            "meta": self.meta,
        });
        container::encode(&header, &container::f64_payload(&self.params.flatten()))
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let (header, payload) = container::decode(bytes)?;
        if header.get("version").and_then(|v| v.as_u64()) != Some(CHECKPOINT_VERSION as u64) {
            return Err(Error::Format("unsupported checkpoint version".into()));
        }
        let layout: Vec<(String, Vec<usize>)> = serde_json::from_value(header["layout"].clone())?;
        let mut params = ParamSet::from_layout(&layout)?;
        let values = container::read_f64(payload)?;
        params.load_flat(&values).map_err(|_| Error::Format("checkpoint payload is truncated".into()))?;
        params.step_count = header["step"].as_u64().unwrap_or(0);
        Ok(Self { kind: header["kind"].as_str().unwrap_or_default().to_string(), meta: header["meta"].clone(), params })
    }

    pub fn save(&self, path: &Path) -> Result<String> {
        let bytes = self.encode()?;
        container::write_atomic(path, &bytes)?;
        Ok(container::sha256_hex(&bytes))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }
}
