//! Flat `section.key = value` experiment configuration.
//!
//! Grammar, one entry per line:
//!
//! ```text
//! # comment
//! section.key = value      # trailing comments are allowed
//! ```
//!
//! Keys are matched case-insensitively against a fixed table; unknown keys
//! are rejected. Lists are comma separated. An environment variable
//! `SAID_<SECTION>__<KEY>` (for example `SAID_DIFFUSION__TRAIN_STEPS=200`)
//! overrides the file.

use serde::{Deserialize, Serialize};

use crate::baselines::DynamicsTrainConfig;
use crate::datagen::{PolicyTag, Tier};
use crate::diffusion::DiffusionTrainConfig;
use crate::envs::{EnvId, DEFAULT_HORIZON};
use crate::error::{Error, Result};
use crate::planner::PlannerConfig;
use crate::value::{IqlConfig, ScoreRows};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub env_id: EnvId,
    pub env_horizon: usize,
    /// Delay in force while collecting.
    pub env_delay_steps: usize,
    pub env_seed: u64,

    pub data_tier: Tier,
    pub data_policy: Option<PolicyTag>,
    pub data_episodes: usize,
    pub data_seed: u64,
    pub data_fraction: f64,
    pub data_path: Option<String>,

    pub diffusion_k: usize,
    pub diffusion_sampling_steps: usize,
    pub diffusion_temperature: f64,
    pub diffusion_weight_factor: f64,
    pub diffusion_use_ema: bool,
    pub diffusion_loss_on_unknown_only: bool,
    pub diffusion_train_steps: usize,
    pub diffusion_batch_size: usize,
    pub diffusion_lr: f64,
    pub diffusion_lr_min: f64,
    pub diffusion_ema_rate: f64,
    pub diffusion_width: usize,
    pub diffusion_depth: usize,
    pub diffusion_n_freq: usize,

    pub value_tau: f64,
    pub value_gamma: f64,
    pub value_lr: f64,
    pub value_rho: f64,
    pub value_terminal_penalty: f64,
    pub value_full_traj_bonus: f64,
    pub value_score_rows: ScoreRows,
    pub value_steps: usize,
    pub value_batch_size: usize,
    pub value_width: usize,

    pub planner_horizon: usize,
    pub planner_candidates: usize,

    pub eval_delays: Vec<usize>,
    pub eval_episodes: usize,

    pub dynamics_steps: usize,
    pub dynamics_width: usize,

    pub run_seeds: Vec<u64>,
    pub run_out_dir: String,
    pub run_workers: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let d = DiffusionTrainConfig::default();
        let v = IqlConfig::default();
        Self {
            env_id: EnvId::PointMass2d,
            env_horizon: DEFAULT_HORIZON,
            env_delay_steps: 0,
            env_seed: 0,
            data_tier: Tier::Expert,
            data_policy: None,
            data_episodes: 200,
            data_seed: 0,
            data_fraction: 1.0,
            data_path: None,
            diffusion_k: d.total_steps,
            diffusion_sampling_steps: 20,
            diffusion_temperature: 0.5,
            diffusion_weight_factor: d.weight_factor,
            diffusion_use_ema: true,
            diffusion_loss_on_unknown_only: d.loss_on_unknown_only,
            diffusion_train_steps: d.train_steps,
            diffusion_batch_size: d.batch_size,
            diffusion_lr: d.lr,
            diffusion_lr_min: d.lr_min,
            diffusion_ema_rate: d.ema_rate,
            diffusion_width: 256,
            diffusion_depth: 4,
            diffusion_n_freq: 8,
            value_tau: v.tau,
            value_gamma: v.gamma,
            value_lr: v.lr,
            value_rho: v.rho,
            value_terminal_penalty: v.terminal_penalty,
            value_full_traj_bonus: v.full_traj_bonus,
            value_score_rows: ScoreRows::AllGenerated,
            value_steps: v.steps,
            value_batch_size: v.batch_size,
            value_width: v.width,
            planner_horizon: 8,
            planner_candidates: 50,
            eval_delays: vec![0, 2, 4],
            eval_episodes: 50,
            dynamics_steps: 5000,
            dynamics_width: 128,
            run_seeds: vec![0, 1],
            run_out_dir: "runs/default".into(),
            run_workers: 1,
        }
    }
}

/// Every recognised key, in the order the resolved config is written.
pub const KEYS: &[&str] = &[
    "env.id",
    "env.horizon",
    "env.delay_steps",
    "env.seed",
    "data.tier",
    "data.policy",
    "data.episodes",
    "data.seed",
    "data.fraction",
    "data.path",
    "diffusion.K",
    "diffusion.sampling_steps",
    "diffusion.temperature",
    "diffusion.weight_factor",
    "diffusion.use_ema",
    "diffusion.loss_on_unknown_only",
    "diffusion.train_steps",
    "diffusion.batch_size",
    "diffusion.lr",
    "diffusion.lr_min",
    "diffusion.ema_rate",
    "diffusion.width",
    "diffusion.depth",
    "diffusion.n_freq",
    "value.tau",
    "value.gamma",
    "value.lr",
    "value.rho",
    "value.terminal_penalty",
    "value.full_traj_bonus",
    "value.score_rows",
    "value.steps",
    "value.batch_size",
    "value.width",
    "planner.horizon",
    "planner.candidates",
    "eval.delays",
    "eval.episodes",
    "dynamics.steps",
    "dynamics.width",
    "run.seeds",
    "run.out_dir",
    "run.workers",
];

fn canonical(key: &str) -> Result<&'static str> {
    KEYS.iter()
        .find(|k| k.eq_ignore_ascii_case(key.trim()))
        .copied()
        .ok_or_else(|| Error::Config(format!("unknown config key '{}'", key.trim())))
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("{key}: cannot parse '{v}'")))
}

fn boolean(key: &str, v: &str) -> Result<bool> {
    match v.to_ascii_lowercase().as_str() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected a boolean, got '{v}'"))),
    }
}

fn list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',').map(|x| num(key, x.trim())).collect()
}

fn optional(v: &str) -> Option<String> {
    (!v.is_empty() && v != "none").then(|| v.to_string())
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl ExperimentConfig {
    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = canonical(key)?;
        let v = value.trim();
        match key {
            "env.id" => self.env_id = v.parse()?,
            "env.horizon" => self.env_horizon = num(key, v)?,
            "env.delay_steps" => self.env_delay_steps = num(key, v)?,
            "env.seed" => self.env_seed = num(key, v)?,
            "data.tier" => self.data_tier = v.parse()?,
            "data.policy" => self.data_policy = optional(v).map(|p| p.parse()).transpose()?,
            "data.episodes" => self.data_episodes = num(key, v)?,
            "data.seed" => self.data_seed = num(key, v)?,
            "data.fraction" => self.data_fraction = num(key, v)?,
            "data.path" => self.data_path = optional(v),
            "diffusion.K" => self.diffusion_k = num(key, v)?,
            "diffusion.sampling_steps" => self.diffusion_sampling_steps = num(key, v)?,
            "diffusion.temperature" => self.diffusion_temperature = num(key, v)?,
            "diffusion.weight_factor" => self.diffusion_weight_factor = num(key, v)?,
            "diffusion.use_ema" => self.diffusion_use_ema = boolean(key, v)?,
            "diffusion.loss_on_unknown_only" => self.diffusion_loss_on_unknown_only = boolean(key, v)?,
            "diffusion.train_steps" => self.diffusion_train_steps = num(key, v)?,
            "diffusion.batch_size" => self.diffusion_batch_size = num(key, v)?,
            "diffusion.lr" => self.diffusion_lr = num(key, v)?,
            "diffusion.lr_min" => self.diffusion_lr_min = num(key, v)?,
            "diffusion.ema_rate" => self.diffusion_ema_rate = num(key, v)?,
            "diffusion.width" => self.diffusion_width = num(key, v)?,
            "diffusion.depth" => self.diffusion_depth = num(key, v)?,
            "diffusion.n_freq" => self.diffusion_n_freq = num(key, v)?,
            "value.tau" => self.value_tau = num(key, v)?,
            "value.gamma" => self.value_gamma = num(key, v)?,
            "value.lr" => self.value_lr = num(key, v)?,
            "value.rho" => self.value_rho = num(key, v)?,
            "value.terminal_penalty" => self.value_terminal_penalty = num(key, v)?,
            "value.full_traj_bonus" => self.value_full_traj_bonus = num(key, v)?,
            "value.score_rows" => self.value_score_rows = v.parse()?,
            "value.steps" => self.value_steps = num(key, v)?,
            "value.batch_size" => self.value_batch_size = num(key, v)?,
            "value.width" => self.value_width = num(key, v)?,
            "planner.horizon" => self.planner_horizon = num(key, v)?,
            "planner.candidates" => self.planner_candidates = num(key, v)?,
            "eval.delays" => self.eval_delays = list(key, v)?,
            "eval.episodes" => self.eval_episodes = num(key, v)?,
            "dynamics.steps" => self.dynamics_steps = num(key, v)?,
            "dynamics.width" => self.dynamics_width = num(key, v)?,
            "run.seeds" => self.run_seeds = list(key, v)?,
            "run.out_dir" => self.run_out_dir = v.to_string(),
            "run.workers" => self.run_workers = num(key, v)?,
            _ => unreachable!("key table and match are in sync"),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Result<String> {
        let key = canonical(key)?;
        Ok(match key {
            "env.id" => self.env_id.to_string(),
            "env.horizon" => self.env_horizon.to_string(),
            "env.delay_steps" => self.env_delay_steps.to_string(),
            "env.seed" => self.env_seed.to_string(),
            "data.tier" => self.data_tier.to_string(),
            "data.policy" => self.data_policy.map_or("none".into(), |p| p.to_string()),
            "data.episodes" => self.data_episodes.to_string(),
            "data.seed" => self.data_seed.to_string(),
            "data.fraction" => self.data_fraction.to_string(),
            "data.path" => self.data_path.clone().unwrap_or_else(|| "none".into()),
            "diffusion.K" => self.diffusion_k.to_string(),
            "diffusion.sampling_steps" => self.diffusion_sampling_steps.to_string(),
            "diffusion.temperature" => self.diffusion_temperature.to_string(),
            "diffusion.weight_factor" => self.diffusion_weight_factor.to_string(),
            "diffusion.use_ema" => self.diffusion_use_ema.to_string(),
            "diffusion.loss_on_unknown_only" => self.diffusion_loss_on_unknown_only.to_string(),
            "diffusion.train_steps" => self.diffusion_train_steps.to_string(),
            "diffusion.batch_size" => self.diffusion_batch_size.to_string(),
            "diffusion.lr" => self.diffusion_lr.to_string(),
            "diffusion.lr_min" => self.diffusion_lr_min.to_string(),
            "diffusion.ema_rate" => self.diffusion_ema_rate.to_string(),
            "diffusion.width" => self.diffusion_width.to_string(),
            "diffusion.depth" => self.diffusion_depth.to_string(),
            "diffusion.n_freq" => self.diffusion_n_freq.to_string(),
            "value.tau" => self.value_tau.to_string(),
            "value.gamma" => self.value_gamma.to_string(),
            "value.lr" => self.value_lr.to_string(),
            "value.rho" => self.value_rho.to_string(),
            "value.terminal_penalty" => self.value_terminal_penalty.to_string(),
            "value.full_traj_bonus" => self.value_full_traj_bonus.to_string(),
            "value.score_rows" => match self.value_score_rows {
                ScoreRows::AllGenerated => "all_generated".into(),
                ScoreRows::FromCurrent => "from_current".into(),
            },
            "value.steps" => self.value_steps.to_string(),
            "value.batch_size" => self.value_batch_size.to_string(),
            "value.width" => self.value_width.to_string(),
            "planner.horizon" => self.planner_horizon.to_string(),
            "planner.candidates" => self.planner_candidates.to_string(),
            "eval.delays" => join(&self.eval_delays),
            "eval.episodes" => self.eval_episodes.to_string(),
            "dynamics.steps" => self.dynamics_steps.to_string(),
            "dynamics.width" => self.dynamics_width.to_string(),
            "run.seeds" => join(&self.run_seeds),
            "run.out_dir" => self.run_out_dir.clone(),
            "run.workers" => self.run_workers.to_string(),
            _ => unreachable!("key table and match are in sync"),
        })
    }

    /// Parses config text on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) =
                line.split_once('=').ok_or_else(|| Error::Config(format!("line {}: expected 'key = value'", lineno + 1)))?;
            cfg.set(k, v).map_err(|e| Error::Config(format!("line {}: {e}", lineno + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies `SAID_<SECTION>__<KEY>` overrides from `vars`.
    pub fn apply_env<I: IntoIterator<Item = (String, String)>>(&mut self, vars: I) -> Result<()> {
        for (name, value) in vars {
            let Some(rest) = name.strip_prefix("SAID_") else { continue };
            let Some((section, key)) = rest.split_once("__") else { continue };
            self.set(&format!("{section}.{key}"), &value)
                .map_err(|e| Error::Config(format!("environment override {name}: {e}")))?;
        }
        self.validate()
    }

    /// Loads a file (or the defaults when `path` is `None`) and applies the
    /// process environment.
    pub fn load(path: Option<&std::path::Path>) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => Self::parse(&std::fs::read_to_string(p)?)?,
            None => Self::default(),
        };
        cfg.apply_env(std::env::vars())?;
        Ok(cfg)
    }

    /// Canonical text listing every key; parsing it yields `self` again.
    pub fn resolved_text(&self) -> String {
        KEYS.iter().map(|k| format!("{k} = {}\n", self.get(k).expect("known key"))).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.data_episodes == 0 || self.eval_episodes == 0 {
            return fail("episode counts must be positive".into());
        }
        if !(self.data_fraction > 0.0 && self.data_fraction <= 1.0) {
            return fail(format!("data.fraction must lie in (0, 1], got {}", self.data_fraction));
        }
        if self.diffusion_sampling_steps == 0 || self.diffusion_sampling_steps > self.diffusion_k {
            return fail("diffusion.sampling_steps must lie in 1..=diffusion.K".into());
        }
        if !(self.diffusion_ema_rate > 0.0 && self.diffusion_ema_rate < 1.0) {
            return fail("diffusion.ema_rate must lie in (0, 1)".into());
        }
        if self.run_seeds.is_empty() || self.eval_delays.is_empty() {
            return fail("run.seeds and eval.delays must be non-empty".into());
        }
        if self.planner_horizon == 0 || self.planner_candidates == 0 {
            return fail("planner.horizon and planner.candidates must be positive".into());
        }
        self.iql(0).validate()
    }

    pub fn policy(&self) -> PolicyTag {
        self.data_policy.unwrap_or_else(|| PolicyTag::default_for(self.env_id))
    }

    pub fn iql(&self, seed: u64) -> IqlConfig {
        IqlConfig {
            tau: self.value_tau,
            gamma: self.value_gamma,
            lr: self.value_lr,
            rho: self.value_rho,
            terminal_penalty: self.value_terminal_penalty,
            full_traj_bonus: self.value_full_traj_bonus,
            width: self.value_width,
            hidden_layers: 2,
            batch_size: self.value_batch_size,
            steps: self.value_steps,
            seed,
        }
    }

    pub fn diffusion_train(&self, seed: u64) -> DiffusionTrainConfig {
        DiffusionTrainConfig {
            total_steps: self.diffusion_k,
            train_steps: self.diffusion_train_steps,
            batch_size: self.diffusion_batch_size,
            lr: self.diffusion_lr,
            lr_min: self.diffusion_lr_min,
            weight_factor: self.diffusion_weight_factor,
            loss_on_unknown_only: self.diffusion_loss_on_unknown_only,
            ema_rate: self.diffusion_ema_rate,
            seed,
        }
    }

    pub fn planner(&self, delay: usize) -> PlannerConfig {
        PlannerConfig {
            horizon: self.planner_horizon,
            delay,
            n_candidates: self.planner_candidates,
            n_sampling_steps: self.diffusion_sampling_steps,
            temperature: self.diffusion_temperature,
            use_ema: self.diffusion_use_ema,
            score_rows: self.value_score_rows,
        }
    }

    pub fn dynamics(&self, seed: u64) -> DynamicsTrainConfig {
        DynamicsTrainConfig { steps: self.dynamics_steps, width: self.dynamics_width, seed, ..DynamicsTrainConfig::default() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resolved_text_roundtrips() {
        let mut c = ExperimentConfig::default();
        c.set("eval.delays", "0, 4").unwrap();
        c.set("DIFFUSION.k", "50").unwrap();
        c.set("data.policy", "random").unwrap();
        let back = ExperimentConfig::parse(&c.resolved_text()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.diffusion_k, 50);
    }

    #[test]
    fn unknown_keys_and_bad_values_rejected() {
        assert!(ExperimentConfig::parse("env.colour = red").is_err());
        assert!(ExperimentConfig::parse("env.horizon = many").is_err());
        assert!(ExperimentConfig::parse("just text").is_err());
        assert!(ExperimentConfig::parse("data.fraction = 1.5").is_err());
        let ok = ExperimentConfig::parse("# comment\n\nenv.id = pendulum # inline\n").unwrap();
        assert_eq!(ok.env_id, EnvId::Pendulum);
    }

    #[test]
    fn environment_overrides() {
        let mut c = ExperimentConfig::default();
        c.apply_env([("SAID_DIFFUSION__TRAIN_STEPS".to_string(), "12".to_string()), ("HOME".to_string(), "/root".to_string())])
            .unwrap();
        assert_eq!(c.diffusion_train_steps, 12);
        assert!(c.apply_env([("SAID_NOPE__X".to_string(), "1".to_string())]).is_err());
    }
}
