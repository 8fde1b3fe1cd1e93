//! Receding-horizon control by inpainting: condition on the delayed
//! observation and the pending actions, sample candidates, keep the best.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::datagen::{denormalize_action, Normalizer};
use crate::diffusion::{ddim_sample_batch, planner_mask, DiffusionModel, InpaintSpec};
use crate::envs::{ActionHistory, DelayedEnv, Env};
use crate::error::{Error, Result};
use crate::rng;
use crate::value::{score_windows, ScoreRows, ValueModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlannerConfig {
    pub horizon: usize,
    pub delay: usize,
    pub n_candidates: usize,
    pub n_sampling_steps: usize,
    pub temperature: f64,
    pub use_ema: bool,
    pub score_rows: ScoreRows,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        Self {
            horizon: 8,
            delay: 0,
            n_candidates: 50,
            n_sampling_steps: 20,
            temperature: 0.5,
            use_ema: true,
            score_rows: ScoreRows::AllGenerated,
        }
    }
}

impl PlannerConfig {
    pub fn window_len(&self) -> usize {
        self.delay + self.horizon
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 || self.n_candidates == 0 {
            return Err(Error::Config("planner horizon and candidate count must be positive".into()));
        }
        if !(self.temperature >= 0.0) {
            return Err(Error::Config("planner temperature must be non-negative".into()));
        }
        Ok(())
    }
}

/// What the agent knows at decision time.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlContext {
    /// Raw delayed observation.
    pub observation: Vec<f64>,
    /// Raw executed actions not yet reflected in the observation.
    pub history: ActionHistory,
    pub t: usize,
}

impl ControlContext {
    pub fn new(observation: Vec<f64>, delay: usize, action_dim: usize) -> Self {
        Self { observation, history: ActionHistory::new(delay, action_dim), t: 0 }
    }

    pub fn advance(&mut self, executed: &[f64], observation: Vec<f64>) {
        self.history.push(executed);
        self.observation = observation;
        self.t += 1;
    }
}

/// Condition on state row 0 and action rows `0..delay`. Missing history
/// before the episode start is zero in normalized space.
pub fn build_condition(ctx: &ControlContext, norm: &Normalizer, cfg: &PlannerConfig, action_dim: usize) -> Result<InpaintSpec> {
    let sd = norm.state_dim();
    if ctx.observation.len() != sd {
        return Err(Error::Shape(format!("observation has {} entries, normalizer expects {sd}", ctx.observation.len())));
    }
    if ctx.history.delay() != cfg.delay {
        return Err(Error::Shape(format!("history covers delay {}, planner uses {}", ctx.history.delay(), cfg.delay)));
    }
    let rows = cfg.window_len();
    let row_dim = sd + action_dim;
    let mut values = vec![0.0; rows * row_dim];
    values[..sd].copy_from_slice(&norm.normalize_state(&ctx.observation));
    for (i, a) in ctx.history.padded().iter().enumerate() {
        if a.len() != action_dim {
            return Err(Error::Shape("history action width mismatch".into()));
        }
        values[i * row_dim + sd..(i + 1) * row_dim].copy_from_slice(&norm.normalize_action(a));
    }
    InpaintSpec::new(planner_mask(rows, sd, action_dim, cfg.delay), values, rows, row_dim)
}

/// Output of one planning decision.
#[derive(Debug, Clone, PartialEq)]
pub struct Plan {
    pub chosen: Vec<f64>,
    pub index: usize,
    pub scores: Vec<f64>,
    pub denoiser_calls: usize,
}

/// Index of the largest score; the lowest index wins ties.
pub fn select(scores: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &s) in scores.iter().enumerate() {
        if best.is_none_or(|b| s > scores[b]) {
            best = Some(i);
        }
    }
    best
}

/// Generator stream for candidate `i` at decision `t`.
pub fn candidate_stream(t: usize, i: usize, n_candidates: usize) -> u64 {
    (t as u64) * (n_candidates as u64) + i as u64
}

/// Trained models plus the normalizer they share.
#[derive(Debug, Clone)]
pub struct Planner {
    pub diffusion: DiffusionModel,
    pub value: ValueModel,
    pub normalizer: Normalizer,
    pub config: PlannerConfig,
}

impl Planner {
    pub fn new(diffusion: DiffusionModel, value: ValueModel, normalizer: Normalizer, config: PlannerConfig) -> Result<Self> {
        config.validate()?;
        let sd = normalizer.state_dim();
        let dc = &diffusion.config;
        if dc.rows != config.window_len() || dc.row_dim != sd + value.action_dim || value.state_dim != sd {
            return Err(Error::Shape(format!(
                "planner expects {}x{} windows, denoiser has {}x{}",
                config.window_len(),
                sd + value.action_dim,
                dc.rows,
                dc.row_dim
            )));
        }
        if value.normalizer_digest != normalizer.digest() {
            return Err(Error::Contract("value model was trained under a different normalizer".into()));
        }
        Ok(Self { diffusion, value, normalizer, config })
    }

    pub fn action_dim(&self) -> usize {
        self.value.action_dim
    }

    /// Samples all candidates in one batch and keeps the highest mean value.
    pub fn plan(&self, ctx: &ControlContext, seed: u64) -> Result<Plan> {
        let cfg = &self.config;
        let spec = build_condition(ctx, &self.normalizer, cfg, self.action_dim())?;
        let n = cfg.n_candidates;
        let specs = vec![spec.clone(); n];
        let mut rngs: Vec<rng::Rng> = (0..n).map(|i| rng::stream(seed, candidate_stream(ctx.t, i, n))).collect();
        let out = ddim_sample_batch(
            self.diffusion.sampling_params(cfg.use_ema),
            &self.diffusion.config,
            &self.diffusion.schedule,
            &specs,
            cfg.n_sampling_steps,
            cfg.temperature,
            &mut rngs,
        )?;
        let dc = &self.diffusion.config;
        let scores = score_windows(&self.value, &out.windows, dc.rows, dc.row_dim, cfg.delay, cfg.score_rows)?;
        let index = select(&scores).ok_or_else(|| Error::Contract("no candidates".into()))?;
        let chosen = out.windows.into_iter().nth(index).expect("index in range");
        debug_assert!(spec.mask.iter().zip(&chosen).zip(&spec.values).all(|((m, c), v)| !m || c == v));
        Ok(Plan { chosen, index, scores, denoiser_calls: out.denoiser_calls })
    }
}

/// `tanh` of the action at row `delay`, clipped to the action box.
pub fn act(window: &[f64], delay: usize, state_dim: usize, row_dim: usize) -> Vec<f64> {
    let row = &window[delay * row_dim + state_dim..(delay + 1) * row_dim];
    denormalize_action(row).into_iter().map(|a| a.clamp(-1.0, 1.0)).collect()
}

/// One JSON-lines record of an evaluation trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub t: usize,
    pub true_state: Vec<f64>,
    pub observation: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub scores: Vec<f64>,
    pub chosen: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeOutcome {
    pub episode_return: f64,
    /// Seconds per decision.
    pub latencies: Vec<f64>,
    pub trace: Vec<TraceRecord>,
    pub denoiser_calls: usize,
}

/// Closed-loop episode under observation delay `planner.config.delay`.
pub fn rollout_episode(env: &Env, planner: &Planner, seed: u64) -> Result<EpisodeOutcome> {
    let delay = planner.config.delay;
    let mut denv = DelayedEnv::reset(env.clone(), delay, seed);
    let mut ctx = ControlContext::new(denv.observation().to_vec(), delay, env.spec.action_dim);
    let plan_seed = rng::child_seed(seed, 0x91a);
    let (sd, rd) = (env.spec.state_dim, planner.diffusion.config.row_dim);
    let mut out = EpisodeOutcome { episode_return: 0.0, latencies: Vec::new(), trace: Vec::new(), denoiser_calls: 0 };
    while !denv.done() {
        let t0 = Instant::now();
        let plan = planner.plan(&ctx, plan_seed)?;
        let a = act(&plan.chosen, delay, sd, rd);
        out.latencies.push(t0.elapsed().as_secs_f64().max(f64::MIN_POSITIVE));
        out.denoiser_calls += plan.denoiser_calls;
        let true_state = denv.true_state().s.clone();
        let observation = ctx.observation.clone();
        let (obs, r, _) = denv.step(&a)?;
        out.episode_return += r;
        out.trace.push(TraceRecord {
            t: ctx.t,
            true_state,
            observation,
            action: a.clone(),
            reward: r,
            scores: plan.scores,
            chosen: plan.index,
        });
        ctx.advance(&a, obs);
    }
    Ok(out)
}
