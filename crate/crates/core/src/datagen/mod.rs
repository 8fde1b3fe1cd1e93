//! Data collection, normalization and training-window construction.

mod file;
mod policy;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use file::{load_dataset, save_dataset, DatasetFile, DATASET_VERSION};
pub use policy::{dlqr, pointmass_lqr_gain, scripted_policy_act, PolicyTag, ScriptedPolicy};

use crate::envs::{ActionHistory, DelayedEnv, Env, EnvId};
use crate::error::{Error, Result};
use crate::rng;

/// Data-quality tier, mirroring the usual expert / medium / replay mixes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tier {
    Expert,
    Medium,
    Replay,
}

impl FromStr for Tier {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "expert" => Ok(Self::Expert),
            "medium" => Ok(Self::Medium),
            "replay" => Ok(Self::Replay),
            other => Err(Error::Config(format!("unknown data tier '{other}'"))),
        }
    }
}

impl fmt::Display for Tier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Expert => "expert",
            Self::Medium => "medium",
            Self::Replay => "replay",
        })
    }
}

impl Tier {
    /// Exploration noise for episode `i` of `n`.
    pub fn noise(self, i: usize, n: usize) -> f64 {
        match self {
            Tier::Expert => 0.05,
            Tier::Medium => 0.3,
            Tier::Replay => {
                let frac = if n > 1 { i as f64 / (n - 1) as f64 } else { 1.0 };
                1.0 + (0.1 - 1.0) * frac
            }
        }
    }

    /// Whether the collector sees the delay-compensated true state.
    pub fn uses_oracle_state(self) -> bool {
        matches!(self, Tier::Expert)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMeta {
    pub env_id: EnvId,
    pub delay: usize,
    pub policy: PolicyTag,
    pub tier: Tier,
    pub seed: u64,
    pub noise: f64,
}

/// One episode of true states (`T+1` rows), actions and rewards (`T` rows).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub states: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    pub rewards: Vec<f64>,
    pub terminated: bool,
    pub truncated: bool,
    pub meta: EpisodeMeta,
}

impl EpisodeRecord {
    pub fn steps(&self) -> usize {
        self.actions.len()
    }

    pub fn episode_return(&self) -> f64 {
        self.rewards.iter().sum()
    }

    /// Same record with every value rounded through `f32`, as stored on disk.
    pub fn quantized(&self) -> Self {
        let q = |v: &Vec<f64>| v.iter().map(|&x| x as f32 as f64).collect::<Vec<_>>();
        Self {
            states: self.states.iter().map(q).collect(),
            actions: self.actions.iter().map(q).collect(),
            rewards: q(&self.rewards),
            ..self.clone()
        }
    }
}

pub fn mean_return(episodes: &[EpisodeRecord]) -> f64 {
    if episodes.is_empty() {
        return 0.0;
    }
    episodes.iter().map(EpisodeRecord::episode_return).sum::<f64>() / episodes.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollectConfig {
    pub env_id: EnvId,
    pub horizon: usize,
    pub delay: usize,
    pub policy: PolicyTag,
    pub tier: Tier,
    pub n_episodes: usize,
    pub seed: u64,
}

/// Rolls out the scripted collector under observation delay.
pub fn collect_dataset(cfg: &CollectConfig) -> Result<Vec<EpisodeRecord>> {
    if cfg.n_episodes == 0 {
        return Err(Error::Config("n_episodes must be at least 1".into()));
    }
    let env = Env::with_horizon(cfg.env_id, cfg.horizon);
    let policy = ScriptedPolicy::new(cfg.policy, &env)?;
    (0..cfg.n_episodes)
        .map(|i| {
            let seed = rng::child_seed(cfg.seed, i as u64);
            let noise = cfg.tier.noise(i, cfg.n_episodes);
            collect_episode(&env, &policy, cfg, seed, noise)
        })
        .collect()
}

fn collect_episode(env: &Env, policy: &ScriptedPolicy, cfg: &CollectConfig, seed: u64, noise: f64) -> Result<EpisodeRecord> {
    let mut denv = DelayedEnv::reset(env.clone(), cfg.delay, seed);
    let mut history = ActionHistory::new(cfg.delay, env.spec.action_dim);
    let mut r = rng::stream(seed, 1);
    let mut states = vec![denv.true_state().s.clone()];
    let (mut actions, mut rewards) = (Vec::new(), Vec::new());
    while !denv.done() {
        let input = if cfg.tier.uses_oracle_state() {
            env.compensate(denv.observation(), &history.executed())
        } else {
            denv.observation().to_vec()
        };
        let a = policy.act(&input, noise, &mut r);
        let (_, reward, _) = denv.step(&a)?;
        history.push(&a);
        states.push(denv.true_state().s.clone());
        actions.push(a);
        rewards.push(reward);
    }
    let st = denv.true_state();
    Ok(EpisodeRecord {
        states,
        actions,
        rewards,
        terminated: st.terminated,
        truncated: st.truncated,
        meta: EpisodeMeta { env_id: cfg.env_id, delay: cfg.delay, policy: cfg.policy, tier: cfg.tier, seed, noise },
    })
}

/// Clip bound applied to actions before `arctanh`.
pub const ACTION_CLIP: f64 = 0.999;
pub const STD_FLOOR: f64 = 1e-6;

/// Per-dimension state standardization and the fixed `arctanh` action map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub state_mean: Vec<f64>,
    pub state_std: Vec<f64>,
    pub action_clip: f64,
}

impl Normalizer {
    pub fn identity(state_dim: usize) -> Self {
        Self { state_mean: vec![0.0; state_dim], state_std: vec![1.0; state_dim], action_clip: ACTION_CLIP }
    }

    pub fn state_dim(&self) -> usize {
        self.state_mean.len()
    }

    pub fn normalize_state(&self, s: &[f64]) -> Vec<f64> {
        s.iter().zip(self.state_mean.iter().zip(&self.state_std)).map(|(x, (m, sd))| (x - m) / sd).collect()
    }

    pub fn denormalize_state(&self, z: &[f64]) -> Vec<f64> {
        z.iter().zip(self.state_mean.iter().zip(&self.state_std)).map(|(x, (m, sd))| x * sd + m).collect()
    }

    pub fn normalize_action(&self, a: &[f64]) -> Vec<f64> {
        a.iter().map(|x| x.clamp(-self.action_clip, self.action_clip).atanh()).collect()
    }

    pub fn normalize_row(&self, s: &[f64], a: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        if s.iter().chain(a).any(|x| !x.is_finite()) {
            return Err(Error::NonFinite { context: "normalize_row".into(), detail: "input".into() });
        }
        Ok((self.normalize_state(s), self.normalize_action(a)))
    }

    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for x in self.state_mean.iter().chain(&self.state_std).chain([&self.action_clip]) {
            h.update(x.to_bits().to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

pub fn denormalize_action(z: &[f64]) -> Vec<f64> {
    z.iter().map(|x| x.tanh()).collect()
}

/// Mean and population standard deviation over every stored state.
pub fn normalizer_fit(episodes: &[EpisodeRecord]) -> Result<Normalizer> {
    let total: usize = episodes.iter().map(|e| e.states.len()).sum();
    if total < 2 {
        return Err(Error::Config("normalizer needs at least two states".into()));
    }
    let dim = episodes.iter().find(|e| !e.states.is_empty()).map(|e| e.states[0].len()).unwrap_or(0);
    let mut mean = vec![0.0; dim];
    for s in episodes.iter().flat_map(|e| &e.states) {
        for (m, x) in mean.iter_mut().zip(s) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= total as f64);
    let mut var = vec![0.0; dim];
    for s in episodes.iter().flat_map(|e| &e.states) {
        for ((v, x), m) in var.iter_mut().zip(s).zip(&mean) {
            *v += (x - m) * (x - m);
        }
    }
    let std = var.iter().map(|v| (v / total as f64).sqrt().max(STD_FLOOR)).collect();
    Ok(Normalizer { state_mean: mean, state_std: std, action_clip: ACTION_CLIP })
}

/// `L` consecutive normalized `(state, action)` rows from one episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Window {
    pub rows: usize,
    pub row_dim: usize,
    /// Row-major `rows x row_dim`, each row `[state | action]`.
    pub data: Vec<f64>,
    /// Min-max scaled discounted return-to-go in `[0, 1]`.
    pub value_weight: f64,
    pub episode: usize,
    pub start: usize,
}

impl Window {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.row_dim..(i + 1) * self.row_dim]
    }
}

/// Every in-episode span of `delay + horizon` steps, normalized.
pub fn build_windows(
    episodes: &[EpisodeRecord],
    delay: usize,
    horizon: usize,
    norm: &Normalizer,
    gamma: f64,
) -> Result<Vec<Window>> {
    if horizon == 0 {
        return Err(Error::Config("planning horizon must be at least 1".into()));
    }
    let len = delay + horizon;
    let mut windows = Vec::new();
    let mut raw_values = Vec::new();
    for (ei, ep) in episodes.iter().enumerate() {
        let steps = ep.steps();
        if steps < len {
            continue;
        }
        let rtg = discounted_rtg(&ep.rewards, gamma);
        for (start, &value) in rtg.iter().enumerate().take(steps - len + 1) {
            let mut data = Vec::with_capacity(len * (norm.state_dim() + ep.actions[0].len()));
            for i in start..start + len {
                let (zs, za) = norm.normalize_row(&ep.states[i], &ep.actions[i])?;
                data.extend(zs);
                data.extend(za);
            }
            let row_dim = data.len() / len;
            raw_values.push(value);
            windows.push(Window { rows: len, row_dim, data, value_weight: 0.0, episode: ei, start });
        }
    }
    let (lo, hi) = raw_values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    for (w, v) in windows.iter_mut().zip(&raw_values) {
        w.value_weight = if hi > lo { (v - lo) / (hi - lo) } else { 1.0 };
    }
    Ok(windows)
}

pub fn discounted_rtg(rewards: &[f64], gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for i in (0..rewards.len()).rev() {
        acc = rewards[i] + gamma * acc;
        out[i] = acc;
    }
    out
}

/// The chronologically last `fraction` of episodes (at least one).
pub fn fraction_filter(episodes: &[EpisodeRecord], fraction: f64) -> Result<Vec<EpisodeRecord>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("fraction must lie in (0, 1], got {fraction}")));
    }
    let keep = ((fraction * episodes.len() as f64) - 1e-9).ceil().max(1.0) as usize;
    let keep = keep.min(episodes.len());
    Ok(episodes[episodes.len() - keep..].to_vec())
}

/// One `(s, a, r, s', terminated)` transition in normalized state space.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub s: Vec<f64>,
    pub a: Vec<f64>,
    pub r: f64,
    pub s_next: Vec<f64>,
    pub terminated: bool,
}

/// Transitions with shaped rewards: `terminal_penalty` is added on
/// terminating steps and `full_traj_bonus` on the step that hits the horizon.
pub fn transitions(
    episodes: &[EpisodeRecord],
    norm: &Normalizer,
    terminal_penalty: f64,
    full_traj_bonus: f64,
) -> Vec<Transition> {
    let mut out = Vec::new();
    for ep in episodes {
        let n = ep.steps();
        for t in 0..n {
            let last = t + 1 == n;
            let terminated = last && ep.terminated;
            let mut r = ep.rewards[t];
            if terminated {
                r += terminal_penalty;
            } else if last && ep.truncated {
                r += full_traj_bonus;
            }
            out.push(Transition {
                s: norm.normalize_state(&ep.states[t]),
                a: ep.actions[t].clone(),
                r,
                s_next: norm.normalize_state(&ep.states[t + 1]),
                terminated,
            });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(tier: Tier, n: usize, delay: usize) -> CollectConfig {
        CollectConfig {
            env_id: EnvId::PointMass2d,
            horizon: 200,
            delay,
            policy: PolicyTag::LqrPointmass,
            tier,
            n_episodes: n,
            seed: 17,
        }
    }

    #[test]
    fn single_episode_bookkeeping() {
        let eps = collect_dataset(&cfg(Tier::Expert, 1, 0)).unwrap();
        assert_eq!(eps[0].states.len(), 201);
        assert_eq!(eps[0].actions.len(), 200);
        assert!(eps[0].truncated);
    }

    #[test]
    fn collection_is_deterministic() {
        let a = collect_dataset(&cfg(Tier::Replay, 3, 2)).unwrap();
        let b = collect_dataset(&cfg(Tier::Replay, 3, 2)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn expert_beats_replay() {
        let e = collect_dataset(&cfg(Tier::Expert, 20, 0)).unwrap();
        let r = collect_dataset(&cfg(Tier::Replay, 20, 0)).unwrap();
        assert!(mean_return(&e) > mean_return(&r));
    }

    #[test]
    fn normalizer_examples() {
        let rec = |s: Vec<Vec<f64>>| EpisodeRecord {
            actions: vec![vec![0.0]; s.len() - 1],
            rewards: vec![0.0; s.len() - 1],
            states: s,
            terminated: false,
            truncated: true,
            meta: EpisodeMeta {
                env_id: EnvId::Pendulum,
                delay: 0,
                policy: PolicyTag::Random,
                tier: Tier::Medium,
                seed: 0,
                noise: 0.0,
            },
        };
        let n = normalizer_fit(&[rec(vec![vec![2.0, -1.0]; 5])]).unwrap();
        assert_eq!(n.state_std, vec![STD_FLOOR; 2]);
        assert!(normalizer_fit(&[]).is_err());

        let eps = collect_dataset(&cfg(Tier::Medium, 4, 0)).unwrap();
        let n = normalizer_fit(&eps).unwrap();
        let mut sums = [0.0; 4];
        let mut count = 0;
        for s in eps.iter().flat_map(|e| &e.states) {
            for (a, b) in sums.iter_mut().zip(n.normalize_state(s)) {
                *a += b;
            }
            count += 1;
        }
        assert!(sums.iter().all(|x| (x / count as f64).abs() < 1e-9));
    }

    #[test]
    fn expert_and_replay_normalizers_differ() {
        let e = normalizer_fit(&collect_dataset(&cfg(Tier::Expert, 10, 0)).unwrap()).unwrap();
        let r = normalizer_fit(&collect_dataset(&cfg(Tier::Replay, 10, 0)).unwrap()).unwrap();
        assert_ne!(e.state_mean, r.state_mean);
    }

    #[test]
    fn action_map_examples() {
        let n = Normalizer::identity(1);
        assert_eq!(n.normalize_action(&[0.0]), vec![0.0]);
        assert_eq!(denormalize_action(&[0.0]), vec![0.0]);
        // arctanh(0.999) = 0.5 ln(1.999 / 0.001)
        let oracle = 0.5 * (1.999f64 / 0.001).ln();
        assert!((n.normalize_action(&[1.0])[0] - oracle).abs() < 1e-12);
        assert!((oracle - 3.8002).abs() < 1e-4);
        for i in -999..=999 {
            let a = i as f64 / 1000.0;
            let z = n.normalize_action(&[a])[0];
            assert!((denormalize_action(&[z])[0] - a).abs() <= 1e-3);
            let z2 = n.normalize_action(&denormalize_action(&[z]))[0];
            assert!((z2 - z).abs() <= 1e-12);
        }
        assert!(n.normalize_row(&[f64::NAN], &[0.0]).is_err());
    }

    #[test]
    fn window_counts_and_boundaries() {
        let eps = collect_dataset(&cfg(Tier::Medium, 3, 4)).unwrap();
        let norm = normalizer_fit(&eps).unwrap();
        let w = build_windows(&eps[..1], 4, 8, &norm, 0.99).unwrap();
        assert_eq!(w.len(), 189);
        let all = build_windows(&eps, 4, 8, &norm, 0.99).unwrap();
        for win in &all {
            assert!(win.start + win.rows <= eps[win.episode].steps());
            assert!((0.0..=1.0).contains(&win.value_weight));
        }
        assert!(build_windows(&eps, 300, 8, &norm, 0.99).unwrap().is_empty());
    }

    #[test]
    fn zero_delay_window_is_a_plain_segment() {
        let eps = collect_dataset(&cfg(Tier::Expert, 1, 0)).unwrap();
        let norm = normalizer_fit(&eps).unwrap();
        let w = &build_windows(&eps, 0, 8, &norm, 0.99).unwrap()[5];
        for i in 0..8 {
            let (zs, za) = norm.normalize_row(&eps[0].states[5 + i], &eps[0].actions[5 + i]).unwrap();
            assert_eq!(&w.row(i)[..4], zs.as_slice());
            assert_eq!(&w.row(i)[4..], za.as_slice());
        }
    }

    #[test]
    fn fraction_filter_examples() {
        let eps = collect_dataset(&cfg(Tier::Replay, 10, 0)).unwrap();
        assert_eq!(fraction_filter(&eps, 1.0).unwrap(), eps);
        let last = fraction_filter(&eps, 0.2).unwrap();
        assert_eq!(last, eps[8..].to_vec());
        assert!(fraction_filter(&eps, 0.0).is_err());
        assert!(fraction_filter(&eps, 1.5).is_err());
    }

    #[test]
    fn replay_tail_is_better_than_whole() {
        let eps = collect_dataset(&cfg(Tier::Replay, 30, 0)).unwrap();
        let tail = fraction_filter(&eps, 0.2).unwrap();
        assert!(mean_return(&tail) > mean_return(&eps));
    }

    #[test]
    fn shaped_transitions() {
        let mut eps = collect_dataset(&cfg(Tier::Expert, 1, 0)).unwrap();
        eps[0].terminated = true;
        eps[0].truncated = false;
        let norm = normalizer_fit(&eps).unwrap();
        let tr = transitions(&eps, &norm, -100.0, 0.0);
        assert_eq!(tr.len(), 200);
        let last = tr.last().unwrap();
        assert!(last.terminated);
        assert_eq!(last.r, eps[0].rewards[199] - 100.0);
        assert!(!tr[0].terminated);
    }
}
