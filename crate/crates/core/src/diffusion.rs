//! Cosine noise schedule, forward noising, value-weighted noise-prediction
//! training and deterministic DDIM sampling with fixed-mask inpainting.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::datagen::Window;
use crate::denoiser::{self, embed_batch, forward_tape, Checkpoint, DenoiserConfig};
use crate::error::{Error, Result};
use crate::numerics::{adam_step, clip_global_norm, value_and_grad, Array, EmaState, OptimState, ParamSet, GRAD_CLIP_NORM};
use crate::rng;

/// Clip bound for predicted clean samples in normalized space.
pub const X0_CLIP: f64 = 10.0;
const COSINE_OFFSET: f64 = 0.008;
const MAX_BETA: f64 = 0.999;

/// Cumulative signal coefficients `alpha_bar[0..=K]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    alpha_bar: Vec<f64>,
}

/// Cosine schedule. Per-step betas are capped at 0.999 so that
/// `alpha_bar[K]` stays strictly positive.
pub fn make_schedule(total: usize) -> Result<NoiseSchedule> {
    if total < 1 {
        return Err(Error::Config("diffusion needs at least one step".into()));
    }
    let f = |k: usize| {
        let u = (k as f64 / total as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET);
        (u * PI / 2.0).cos().powi(2)
    };
    let f0 = f(0);
    let mut alpha_bar = vec![1.0];
    for k in 1..=total {
        let prev_closed = f(k - 1) / f0;
        let beta = (1.0 - (f(k) / f0) / prev_closed).clamp(0.0, MAX_BETA);
        let prev = alpha_bar[k - 1];
        alpha_bar.push(prev * (1.0 - beta));
    }
    Ok(NoiseSchedule { alpha_bar })
}

impl NoiseSchedule {
    pub fn total_steps(&self) -> usize {
        self.alpha_bar.len() - 1
    }

    pub fn alpha_bar(&self, k: usize) -> f64 {
        self.alpha_bar[k]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.alpha_bar
    }
}

/// `sqrt(ab) x0 + sqrt(1 - ab) eps`.
pub fn q_sample(x0: &[f64], k: usize, sched: &NoiseSchedule, eps: &[f64]) -> Vec<f64> {
    let ab = sched.alpha_bar(k);
    let (a, s) = (ab.sqrt(), (1.0 - ab).sqrt());
    x0.iter().zip(eps).map(|(x, e)| a * x + s * e).collect()
}

/// Inverts the forward process given a noise estimate, clipped to `X0_CLIP`.
pub fn x0_from_eps(x_k: &[f64], eps_hat: &[f64], k: usize, sched: &NoiseSchedule) -> Vec<f64> {
    let ab = sched.alpha_bar(k);
    let (a, s) = (ab.sqrt(), (1.0 - ab).sqrt());
    x_k.iter().zip(eps_hat).map(|(x, e)| ((x - s * e) / a).clamp(-X0_CLIP, X0_CLIP)).collect()
}

/// Noise estimate `sqrt(1 - ab_k) x_k + sqrt(ab_k) F(x_k, k)` from the raw
/// network output `F`. Written this way the implied clean sample is
/// `sqrt(ab_k) x_k - sqrt(1 - ab_k) F`, so network error is never divided by
/// the vanishing `sqrt(ab_K)` of the first reverse step.
pub fn predict_eps(params: &ParamSet, dcfg: &DenoiserConfig, sched: &NoiseSchedule, x: &[f64], ks: &[usize]) -> Result<Vec<f64>> {
    let wl = dcfg.window_len();
    let mut out = denoiser::denoise_batch(params, dcfg, x, ks, sched.total_steps())?;
    for (i, &k) in ks.iter().enumerate() {
        let ab = sched.alpha_bar(k);
        let (a, s) = (ab.sqrt(), (1.0 - ab).sqrt());
        for (o, xv) in out[i * wl..(i + 1) * wl].iter_mut().zip(&x[i * wl..(i + 1) * wl]) {
            *o = s * xv + a * *o;
        }
    }
    Ok(out)
}

/// Known entries of a window and their clamped values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InpaintSpec {
    pub rows: usize,
    pub row_dim: usize,
    pub mask: Vec<bool>,
    /// Full-window buffer; only entries under `mask` are meaningful.
    pub values: Vec<f64>,
}

impl InpaintSpec {
    pub fn unconditional(rows: usize, row_dim: usize) -> Self {
        Self { rows, row_dim, mask: vec![false; rows * row_dim], values: vec![0.0; rows * row_dim] }
    }

    pub fn new(mask: Vec<bool>, values: Vec<f64>, rows: usize, row_dim: usize) -> Result<Self> {
        if mask.len() != rows * row_dim || values.len() != mask.len() {
            return Err(Error::Shape(format!(
                "mask/values of length {}/{} for a {rows}x{row_dim} window",
                mask.len(),
                values.len()
            )));
        }
        if mask.iter().zip(&values).any(|(&m, v)| m && !v.is_finite()) {
            return Err(Error::NonFinite { context: "inpaint".into(), detail: "conditioned value".into() });
        }
        Ok(Self { rows, row_dim, mask, values })
    }

    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }

    pub fn n_known(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Overwrites known entries of `x` with the conditioned values.
    pub fn apply(&self, x: &mut [f64]) {
        for ((xi, &m), &v) in x.iter_mut().zip(&self.mask).zip(&self.values) {
            if m {
                *xi = v;
            }
        }
    }
}

/// Planner mask: state of row 0 and actions of rows `0..delay`.
pub fn planner_mask(rows: usize, state_dim: usize, action_dim: usize, delay: usize) -> Vec<bool> {
    let row_dim = state_dim + action_dim;
    let mut m = vec![false; rows * row_dim];
    m[..state_dim].iter_mut().for_each(|v| *v = true);
    for r in 0..delay.min(rows) {
        for j in state_dim..row_dim {
            m[r * row_dim + j] = true;
        }
    }
    m
}

/// Mask with the first state and every action known.
pub fn state_prediction_mask(rows: usize, state_dim: usize, action_dim: usize) -> Vec<bool> {
    planner_mask(rows, state_dim, action_dim, rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleConfig {
    pub n_sampling_steps: usize,
    pub temperature: f64,
    pub use_ema: bool,
    pub seed: u64,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self { n_sampling_steps: 20, temperature: 0.5, use_ema: true, seed: 0 }
    }
}

/// Uniformly spaced descending subsequence of `{K..1}` of length `n`.
pub fn ddim_timesteps(total: usize, n: usize) -> Result<Vec<usize>> {
    if n == 0 || n > total {
        return Err(Error::Config(format!("sampling steps must lie in 1..={total}, got {n}")));
    }
    let mut ks: Vec<usize> = (0..n).map(|i| ((total as f64) * (n - i) as f64 / n as f64).round() as usize).collect();
    ks.dedup();
    Ok(ks)
}

/// Output of a batched DDIM run.
#[derive(Debug, Clone)]
pub struct SampleBatch {
    /// One flattened window per condition.
    pub windows: Vec<Vec<f64>>,
    /// Window evaluations of the denoiser (`steps x batch`).
    pub denoiser_calls: usize,
}

/// Deterministic (eta = 0) DDIM over a batch of conditions, each with its own
/// generator for the initial latent. Known entries are re-imposed on the
/// initial latent and after every update.
pub fn ddim_sample_batch(
    params: &ParamSet,
    dcfg: &DenoiserConfig,
    sched: &NoiseSchedule,
    specs: &[InpaintSpec],
    n_sampling_steps: usize,
    temperature: f64,
    rngs: &mut [rng::Rng],
) -> Result<SampleBatch> {
    let wl = dcfg.window_len();
    if specs.len() != rngs.len() {
        return Err(Error::Contract("one generator per condition is required".into()));
    }
    if let Some(s) = specs.iter().find(|s| s.len() != wl) {
        return Err(Error::Shape(format!("condition covers {} entries, window has {wl}", s.len())));
    }
    if !(temperature >= 0.0) {
        return Err(Error::Config(format!("temperature must be non-negative, got {temperature}")));
    }
    let total = sched.total_steps();
    let ks = ddim_timesteps(total, n_sampling_steps)?;
    let batch = specs.len();
    let mut x = vec![0.0; batch * wl];
    for (b, (spec, r)) in specs.iter().zip(rngs.iter_mut()).enumerate() {
        let row = &mut x[b * wl..(b + 1) * wl];
        for v in row.iter_mut() {
            let n: f64 = StandardNormal.sample(r);
            *v = temperature * n;
        }
        spec.apply(row);
    }
    let mut calls = 0;
    for (i, &k) in ks.iter().enumerate() {
        let k_next = ks.get(i + 1).copied().unwrap_or(0);
        let eps = predict_eps(params, dcfg, sched, &x, &vec![k; batch])?;
        calls += batch;
        let ab = sched.alpha_bar(k);
        let ab_next = sched.alpha_bar(k_next);
        let (a, s) = (ab.sqrt(), (1.0 - ab).sqrt());
        let (an, sn) = (ab_next.sqrt(), (1.0 - ab_next).sqrt());
        for (xv, ev) in x.iter_mut().zip(&eps) {
            let x0 = ((*xv - s * ev) / a).clamp(-X0_CLIP, X0_CLIP);
            let e = if s > 0.0 { (*xv - a * x0) / s } else { *ev };
            *xv = an * x0 + sn * e;
        }
        for (b, spec) in specs.iter().enumerate() {
            spec.apply(&mut x[b * wl..(b + 1) * wl]);
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { context: "ddim_sample".into(), detail: format!("latent at k={k}") });
        }
    }
    Ok(SampleBatch { windows: x.chunks(wl).map(<[f64]>::to_vec).collect(), denoiser_calls: calls })
}

/// Single-condition sampler seeded from `cfg.seed`.
pub fn ddim_sample(
    params: &ParamSet,
    dcfg: &DenoiserConfig,
    sched: &NoiseSchedule,
    spec: &InpaintSpec,
    cfg: &SampleConfig,
) -> Result<Vec<f64>> {
    let mut rngs = vec![rng::seeded(cfg.seed)];
    let out =
        ddim_sample_batch(params, dcfg, sched, std::slice::from_ref(spec), cfg.n_sampling_steps, cfg.temperature, &mut rngs)?;
    Ok(out.windows.into_iter().next().expect("one window"))
}

/// Trajectory weight `exp(beta (v - 1))` clipped to `[1e-3, 1e3]`.
pub fn trajectory_weight(value: f64, beta: f64) -> f64 {
    (beta * (value - 1.0)).exp().clamp(1e-3, 1e3)
}

/// A training batch with its noise draws made explicit.
#[derive(Debug, Clone)]
pub struct NoisedBatch {
    pub x0: Vec<f64>,
    pub eps: Vec<f64>,
    pub ks: Vec<usize>,
    pub weights: Vec<f64>,
}

pub fn draw_noise(windows: &[&Window], total: usize, beta: f64, r: &mut impl Rng) -> NoisedBatch {
    let mut nb = NoisedBatch { x0: Vec::new(), eps: Vec::new(), ks: Vec::new(), weights: Vec::new() };
    for w in windows {
        nb.x0.extend_from_slice(&w.data);
        nb.eps.extend((0..w.data.len()).map(|_| StandardNormal.sample(r)).collect::<Vec<f64>>());
        nb.ks.push(r.random_range(1..=total));
        nb.weights.push(trajectory_weight(w.value_weight, beta));
    }
    nb
}

/// Weighted noise-prediction loss and its parameter gradient.
///
/// Known entries of the noised input are replaced by their clean values, as
/// at sampling time. With `unknown_only` the squared error is averaged over
/// unknown entries only.
pub fn loss_and_grad(
    params: &ParamSet,
    dcfg: &DenoiserConfig,
    sched: &NoiseSchedule,
    mask: &[bool],
    batch: &NoisedBatch,
    unknown_only: bool,
) -> Result<(f64, ParamSet)> {
    let wl = dcfg.window_len();
    let b = batch.ks.len();
    let mut xk = Vec::with_capacity(b * wl);
    for i in 0..b {
        let x0 = &batch.x0[i * wl..(i + 1) * wl];
        let mut row = q_sample(x0, batch.ks[i], sched, &batch.eps[i * wl..(i + 1) * wl]);
        for ((v, &m), &c) in row.iter_mut().zip(mask).zip(x0) {
            if m {
                *v = c;
            }
        }
        xk.extend(row);
    }
    let counted: Vec<f64> = mask.iter().map(|&m| if unknown_only && m { 0.0 } else { 1.0 }).collect();
    let n_counted = counted.iter().sum::<f64>().max(1.0);
    let mut coef = Vec::with_capacity(b * wl);
    for &w in &batch.weights {
        coef.extend(counted.iter().map(|c| c * w / (b as f64 * n_counted)));
    }
    let emb = embed_batch(&batch.ks, sched.total_steps(), &dcfg.embedding);
    // eps_hat - eps = a F - (eps - s x_k), see `predict_eps`.
    let mut gain = Vec::with_capacity(b * wl);
    let mut target = Vec::with_capacity(b * wl);
    for i in 0..b {
        let ab = sched.alpha_bar(batch.ks[i]);
        let (a, s) = (ab.sqrt(), (1.0 - ab).sqrt());
        gain.extend(std::iter::repeat_n(a, wl));
        let span = i * wl..(i + 1) * wl;
        target.extend(batch.eps[span.clone()].iter().zip(&xk[span]).map(|(e, x)| e - s * x));
    }
    let (loss, grads) = value_and_grad(params, |t, vars| {
        let x = t.constant(Array::matrix(b, wl, xk)?);
        let e = t.constant(emb);
        let out = forward_tape(dcfg, t, vars, x, e)?;
        let pred = t.mul_const(out, Array::matrix(b, wl, gain)?)?;
        let target = t.constant(Array::matrix(b, wl, target)?);
        let diff = t.sub(pred, target)?;
        let sq = t.square(diff);
        let weighted = t.mul_const(sq, Array::matrix(b, wl, coef)?)?;
        Ok(t.sum(weighted))
    })?;
    if !loss.is_finite() {
        return Err(Error::NonFinite {
            context: "diffusion loss".into(),
            detail: format!("loss={loss}, steps={:?}, weights={:?}", batch.ks, batch.weights),
        });
    }
    Ok((loss, grads))
}

/// Draws a batch from `windows` and evaluates the weighted loss.
#[allow(clippy::too_many_arguments)]
pub fn training_loss(
    params: &ParamSet,
    dcfg: &DenoiserConfig,
    windows: &[&Window],
    mask: &[bool],
    sched: &NoiseSchedule,
    beta: f64,
    unknown_only: bool,
    seed: u64,
) -> Result<(f64, ParamSet)> {
    let nb = draw_noise(windows, sched.total_steps(), beta, &mut rng::seeded(seed));
    loss_and_grad(params, dcfg, sched, mask, &nb, unknown_only)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusionTrainConfig {
    pub total_steps: usize,
    pub train_steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_min: f64,
    pub weight_factor: f64,
    pub loss_on_unknown_only: bool,
    pub ema_rate: f64,
    pub seed: u64,
}

impl Default for DiffusionTrainConfig {
    fn default() -> Self {
        Self {
            total_steps: 100,
            train_steps: 50_000,
            batch_size: 256,
            lr: 1e-3,
            lr_min: 1e-5,
            weight_factor: 2.0,
            loss_on_unknown_only: true,
            ema_rate: 0.999,
            seed: 0,
        }
    }
}

/// Trained denoiser plus everything needed to sample from it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusionModel {
    pub config: DenoiserConfig,
    pub schedule: NoiseSchedule,
    pub mask: Vec<bool>,
    pub params: ParamSet,
    pub ema: ParamSet,
    pub losses: Vec<f64>,
}

impl DiffusionModel {
    pub fn sampling_params(&self, use_ema: bool) -> &ParamSet {
        if use_ema {
            &self.ema
        } else {
            &self.params
        }
    }

    /// Checkpoint holding raw and EMA leaves (`ema.` prefix). `extra` is
    /// stored verbatim under `meta.extra`.
    pub fn to_checkpoint(&self, extra: serde_json::Value) -> Result<Checkpoint> {
        let mut params = self.params.clone();
        for (n, a) in self.ema.iter() {
            params.insert(format!("ema.{n}"), a.clone())?;
        }
        let known: Vec<usize> = self.mask.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i).collect();
        Ok(Checkpoint {
            kind: "planner".into(),
            meta: serde_json::json!({
                "denoiser": self.config,
                "K": self.schedule.total_steps(),
                "known_entries": known,
                "final_loss": self.losses.last().copied(),
                "train_steps": self.losses.len(),
                "extra": extra,
            }),
            params,
        })
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.kind != "planner" {
            return Err(Error::Format(format!("expected a planner checkpoint, found '{}'", ck.kind)));
        }
        let config: DenoiserConfig = serde_json::from_value(ck.meta["denoiser"].clone())?;
        let total: usize = serde_json::from_value(ck.meta["K"].clone())?;
        let known: Vec<usize> = serde_json::from_value(ck.meta["known_entries"].clone())?;
        let mut mask = vec![false; config.window_len()];
        for i in known {
            *mask.get_mut(i).ok_or_else(|| Error::Format("mask index out of range".into()))? = true;
        }
        let mut params = ParamSet::new();
        let mut ema = ParamSet::new();
        for (n, a) in ck.params.iter() {
            match n.strip_prefix("ema.") {
                Some(rest) => ema.insert(rest, a.clone())?,
                None => params.insert(n, a.clone())?,
            }
        }
        params.step_count = ck.params.step_count;
        let reference = denoiser::init_params(&config, &mut rng::seeded(0))?;
        reference.check_compatible(&params)?;
        reference.check_compatible(&ema)?;
        Ok(Self { config, schedule: make_schedule(total)?, mask, params, ema, losses: Vec::new() })
    }
}

pub fn train_diffusion(
    windows: &[Window],
    mask: Vec<bool>,
    dcfg: DenoiserConfig,
    tcfg: &DiffusionTrainConfig,
) -> Result<DiffusionModel> {
    if windows.is_empty() {
        return Err(Error::Config("no training windows".into()));
    }
    if mask.len() != dcfg.window_len() || windows.iter().any(|w| w.data.len() != dcfg.window_len()) {
        return Err(Error::Shape("windows, mask and denoiser disagree on window size".into()));
    }
    let sched = make_schedule(tcfg.total_steps)?;
    let mut r = rng::seeded(tcfg.seed);
    let mut params = denoiser::init_params(&dcfg, &mut r)?;
    let mut opt = OptimState::new(&params, tcfg.lr, tcfg.lr_min, tcfg.train_steps as u64)?;
    let mut ema = EmaState::new(&params, tcfg.ema_rate)?;
    let mut losses = Vec::with_capacity(tcfg.train_steps);
    for _ in 0..tcfg.train_steps {
        let batch: Vec<&Window> = (0..tcfg.batch_size).map(|_| &windows[r.random_range(0..windows.len())]).collect();
        let nb = draw_noise(&batch, sched.total_steps(), tcfg.weight_factor, &mut r);
        let (loss, mut grads) = loss_and_grad(&params, &dcfg, &sched, &mask, &nb, tcfg.loss_on_unknown_only)?;
        clip_global_norm(&mut grads, GRAD_CLIP_NORM);
        adam_step(&mut params, &grads, &mut opt)?;
        ema.update(&params)?;
        losses.push(loss);
    }
    Ok(DiffusionModel { config: dcfg, schedule: sched, mask, params, ema: ema.shadow, losses })
}
