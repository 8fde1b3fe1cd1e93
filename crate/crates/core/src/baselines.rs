//! Autoregressive one-step dynamics model for the compounding-error study,
//! plus the scripted oracle and delay-naive controllers.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::{EpisodeRecord, Normalizer, PolicyTag, ScriptedPolicy};
use crate::diffusion::{ddim_sample_batch, DiffusionModel, InpaintSpec};
use crate::envs::{ActionHistory, DelayedEnv, Env};
use crate::error::{Error, Result};
use crate::numerics::{
    adam_step, clip_global_norm, value_and_grad, Activation, Array, Mlp, OptimState, ParamSet, GRAD_CLIP_NORM,
};
use crate::rng;

/// `s' = s + f(s, a)` in normalized coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct DynamicsModel {
    pub net: Mlp,
    pub params: ParamSet,
    pub normalizer: Normalizer,
    pub state_dim: usize,
    pub action_dim: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DynamicsTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub width: usize,
    pub hidden_layers: usize,
    pub holdout_fraction: f64,
    pub seed: u64,
}

impl Default for DynamicsTrainConfig {
    fn default() -> Self {
        Self { steps: 5000, batch_size: 256, lr: 1e-3, width: 128, hidden_layers: 2, holdout_fraction: 0.1, seed: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DynamicsReport {
    pub initial_loss: f64,
    pub train_loss: f64,
    pub holdout_loss: f64,
}

impl DynamicsModel {
    pub fn new(
        state_dim: usize,
        action_dim: usize,
        normalizer: Normalizer,
        width: usize,
        hidden_layers: usize,
        seed: u64,
    ) -> Result<Self> {
        let mut widths = vec![state_dim + action_dim];
        widths.extend(std::iter::repeat_n(width, hidden_layers));
        widths.push(state_dim);
        let net = Mlp::new("f.", widths, Activation::Tanh)?;
        let params = net.init(&mut rng::seeded(seed), true)?;
        Ok(Self { net, params, normalizer, state_dim, action_dim })
    }

    /// Batched one-step prediction on normalized states and actions.
    pub fn predict_batch(&self, s: &[f64], a: &[f64]) -> Result<Vec<f64>> {
        let n = s.len() / self.state_dim;
        if n * self.state_dim != s.len() || a.len() != n * self.action_dim {
            return Err(Error::Shape("dynamics inputs disagree on batch size".into()));
        }
        let mut x = Vec::with_capacity(n * (self.state_dim + self.action_dim));
        for i in 0..n {
            x.extend_from_slice(&s[i * self.state_dim..(i + 1) * self.state_dim]);
            x.extend_from_slice(&a[i * self.action_dim..(i + 1) * self.action_dim]);
        }
        let d = self.net.forward(&self.params, &Array::matrix(n, self.state_dim + self.action_dim, x)?)?;
        Ok(s.iter().zip(d.data()).map(|(s, d)| s + d).collect())
    }

    pub fn predict(&self, s: &[f64], a: &[f64]) -> Result<Vec<f64>> {
        self.predict_batch(s, a)
    }
}

/// Normalized `(s, a, s')` triples from whole episodes.
fn triples(episodes: &[EpisodeRecord], norm: &Normalizer) -> Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let mut out = Vec::new();
    for ep in episodes {
        for t in 0..ep.steps() {
            out.push((
                norm.normalize_state(&ep.states[t]),
                norm.normalize_action(&ep.actions[t]),
                norm.normalize_state(&ep.states[t + 1]),
            ));
        }
    }
    out
}

fn mse(model: &DynamicsModel, data: &[(Vec<f64>, Vec<f64>, Vec<f64>)]) -> Result<f64> {
    if data.is_empty() {
        return Ok(f64::NAN);
    }
    let s: Vec<f64> = data.iter().flat_map(|d| d.0.clone()).collect();
    let a: Vec<f64> = data.iter().flat_map(|d| d.1.clone()).collect();
    let pred = model.predict_batch(&s, &a)?;
    let truth = data.iter().flat_map(|d| d.2.iter());
    Ok(pred.iter().zip(truth).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / pred.len() as f64)
}

/// Teacher-forced single-step regression. The last `holdout_fraction` of
/// episodes is kept out for the held-out loss.
pub fn train_dynamics(
    episodes: &[EpisodeRecord],
    norm: &Normalizer,
    cfg: &DynamicsTrainConfig,
) -> Result<(DynamicsModel, DynamicsReport)> {
    let n_hold = ((episodes.len() as f64) * cfg.holdout_fraction).floor() as usize;
    let n_hold = if n_hold >= episodes.len() { 0 } else { n_hold };
    let (train_eps, hold_eps) = episodes.split_at(episodes.len() - n_hold);
    let train = triples(train_eps, norm);
    let hold = triples(hold_eps, norm);
    if train.len() < 1000 {
        return Err(Error::Config(format!("dynamics model needs at least 1000 transitions, got {}", train.len())));
    }
    let sd = norm.state_dim();
    let ad = train[0].1.len();
    let mut model = DynamicsModel::new(sd, ad, norm.clone(), cfg.width, cfg.hidden_layers, cfg.seed)?;
    let mut opt = OptimState::new(&model.params, cfg.lr, cfg.lr * 0.01, cfg.steps as u64)?;
    let mut r = rng::seeded(rng::child_seed(cfg.seed, 0xd1));
    let initial_loss = mse(&model, &train)?;
    let net = model.net.clone();
    for step in 0..cfg.steps {
        let idx: Vec<usize> = (0..cfg.batch_size).map(|_| r.random_range(0..train.len())).collect();
        let b = idx.len();
        let mut x = Vec::with_capacity(b * (sd + ad));
        let mut y = Vec::with_capacity(b * sd);
        for &i in &idx {
            let (s, a, s2) = &train[i];
            x.extend_from_slice(s);
            x.extend_from_slice(a);
            y.extend(s2.iter().zip(s).map(|(n, c)| n - c));
        }
        let (loss, mut g) = value_and_grad(&model.params, |t, vars| {
            let xv = t.constant(Array::matrix(b, sd + ad, x)?);
            let pred = net.forward_tape(t, vars, xv)?;
            let yv = t.constant(Array::matrix(b, sd, y)?);
            let d = t.sub(pred, yv)?;
            let sq = t.square(d);
            Ok(t.mean(sq))
        })?;
        if !loss.is_finite() || loss > 10.0 * initial_loss.max(1e-12) {
            return Err(Error::Diverged(format!("dynamics loss {loss} at step {step} (initial {initial_loss})")));
        }
        clip_global_norm(&mut g, GRAD_CLIP_NORM);
        adam_step(&mut model.params, &g, &mut opt)?;
    }
    let report = DynamicsReport { initial_loss, train_loss: mse(&model, &train)?, holdout_loss: mse(&model, &hold)? };
    Ok((model, report))
}

#[derive(Debug, Clone, PartialEq)]
pub struct OpenLoop {
    /// Predicted `s_1..s_H` (fewer if the rollout diverged).
    pub states: Vec<Vec<f64>>,
    /// First step whose prediction was non-finite.
    pub diverged_at: Option<usize>,
}

/// Feeds the model its own predictions for `actions.len()` steps.
pub fn open_loop_rollout(
    step: impl Fn(&[f64], &[f64]) -> Result<Vec<f64>>,
    s0: &[f64],
    actions: &[Vec<f64>],
) -> Result<OpenLoop> {
    let mut s = s0.to_vec();
    let mut out = OpenLoop { states: Vec::with_capacity(actions.len()), diverged_at: None };
    for (i, a) in actions.iter().enumerate() {
        let next = step(&s, a)?;
        if next.iter().any(|v| !v.is_finite()) {
            out.diverged_at = Some(i + 1);
            break;
        }
        out.states.push(next.clone());
        s = next;
    }
    Ok(out)
}

/// Start indices used by the curves: every `stride`-th start that leaves
/// `horizon` further steps in the episode.
pub fn curve_starts(episodes: &[EpisodeRecord], horizon: usize, stride: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for (e, ep) in episodes.iter().enumerate() {
        if ep.steps() < horizon {
            continue;
        }
        out.extend((0..=ep.steps() - horizon).step_by(stride.max(1)).map(|s| (e, s)));
    }
    out
}

/// Mean absolute open-loop error per step `t = 1..=horizon`, in normalized
/// state space, batched across starts.
pub fn compounding_curve(
    model: &DynamicsModel,
    episodes: &[EpisodeRecord],
    starts: &[(usize, usize)],
    horizon: usize,
) -> Result<Vec<f64>> {
    let norm = &model.normalizer;
    let sd = model.state_dim;
    let mut s: Vec<f64> = starts.iter().flat_map(|&(e, t)| norm.normalize_state(&episodes[e].states[t])).collect();
    let mut mae = Vec::with_capacity(horizon);
    for h in 0..horizon {
        let a: Vec<f64> = starts.iter().flat_map(|&(e, t)| norm.normalize_action(&episodes[e].actions[t + h])).collect();
        s = model.predict_batch(&s, &a)?;
        if s.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { context: "compounding_curve".into(), detail: format!("step {}", h + 1) });
        }
        let truth = starts.iter().flat_map(|&(e, t)| norm.normalize_state(&episodes[e].states[t + h + 1]));
        let err: f64 = s.iter().zip(truth).map(|(p, q)| (p - q).abs()).sum();
        mae.push(err / (starts.len() * sd) as f64);
    }
    Ok(mae)
}

/// Same quantity for joint generation: each window is sampled with its first
/// state and every action clamped to the recorded values.
#[allow(clippy::too_many_arguments)]
pub fn diffusion_curve(
    model: &DiffusionModel,
    norm: &Normalizer,
    episodes: &[EpisodeRecord],
    starts: &[(usize, usize)],
    horizon: usize,
    n_sampling_steps: usize,
    temperature: f64,
    seed: u64,
) -> Result<Vec<f64>> {
    let dc = &model.config;
    let sd = norm.state_dim();
    if dc.rows != horizon + 1 {
        return Err(Error::Shape(format!("a horizon of {horizon} needs {} rows, model has {}", horizon + 1, dc.rows)));
    }
    let mut specs = Vec::with_capacity(starts.len());
    let mut truth = Vec::with_capacity(starts.len());
    for &(e, t) in starts {
        let ep = &episodes[e];
        let mut values = Vec::with_capacity(dc.window_len());
        for i in 0..dc.rows {
            values.extend(norm.normalize_state(&ep.states[t + i]));
            // The last row's action is outside the span; any recorded one
            // is used, the state error never reads it.
            let a = ep.actions.get(t + i).or(ep.actions.last()).expect("non-empty episode");
            values.extend(norm.normalize_action(a));
        }
        truth.push(values.clone());
        specs.push(InpaintSpec::new(model.mask.clone(), values, dc.rows, dc.row_dim)?);
    }
    let mut rngs: Vec<rng::Rng> = (0..starts.len() as u64).map(|i| rng::stream(seed, i)).collect();
    let mut windows = Vec::with_capacity(starts.len());
    for (chunk_specs, chunk_rngs) in specs.chunks(256).zip(rngs.chunks_mut(256)) {
        let out = ddim_sample_batch(
            model.sampling_params(true),
            dc,
            &model.schedule,
            chunk_specs,
            n_sampling_steps,
            temperature,
            chunk_rngs,
        )?;
        windows.extend(out.windows);
    }
    let mut mae = vec![0.0; horizon];
    for (w, tr) in windows.iter().zip(&truth) {
        for (h, m) in mae.iter_mut().enumerate() {
            let r = (h + 1) * dc.row_dim;
            *m += w[r..r + sd].iter().zip(&tr[r..r + sd]).map(|(p, q)| (p - q).abs()).sum::<f64>();
        }
    }
    Ok(mae.into_iter().map(|m| m / (starts.len() * sd) as f64).collect())
}

/// Undelayed-optimal controller applied straight to a stale observation.
pub fn naive_policy_act(policy: &ScriptedPolicy, delayed_observation: &[f64]) -> Vec<f64> {
    policy.mean_action(delayed_observation, &mut rng::seeded(0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControllerMode {
    /// Acts on the true state recovered by forward simulation.
    Compensating,
    /// Acts on the delayed observation as if it were current.
    Naive,
}

/// Return of one episode driven by a scripted controller under delay.
pub fn controller_rollout(env: &Env, delay: usize, tag: PolicyTag, mode: ControllerMode, seed: u64) -> Result<f64> {
    let policy = ScriptedPolicy::new(tag, env)?;
    let mut denv = DelayedEnv::reset(env.clone(), delay, seed);
    let mut history = ActionHistory::new(delay, env.spec.action_dim);
    let mut r = rng::seeded(rng::child_seed(seed, 0xc0));
    let mut ret = 0.0;
    while !denv.done() {
        let s = match mode {
            ControllerMode::Compensating => env.compensate(denv.observation(), &history.executed()),
            ControllerMode::Naive => denv.observation().to_vec(),
        };
        let a = policy.mean_action(&s, &mut r);
        ret += denv.step(&a)?.1;
        history.push(&a);
    }
    Ok(ret)
}

/// Per-episode returns over `seeds`.
pub fn controller_returns(env: &Env, delay: usize, tag: PolicyTag, mode: ControllerMode, seeds: &[u64]) -> Result<Vec<f64>> {
    seeds.iter().map(|&s| controller_rollout(env, delay, tag, mode, s)).collect()
}
