//! Deterministic toy control tasks and the delayed-observation wrapper.
//!
//! Two environments are built in:
//!
//! * `pointmass2d`: a planar double integrator, state `[px, py, vx, vy]`,
//!   action = acceleration in `[-1,1]^2`, reward `-(|p'|^2 + 0.01|a|^2)`,
//!   terminated when `|p'| > 3`.
//! * `pendulum`: torque-limited pendulum, state `[theta, theta_dot]` with
//!   `theta = 0` upright and wrapped to `(-pi, pi]`, action scaled by 2 to a
//!   torque, reward `-(theta^2 + 0.1 theta_dot^2 + 0.001 a^2)` on the
//!   pre-step state, never terminated.
//!
//! The delayed wrapper keeps a FIFO of the last `delay` true states. After a
//! reset it holds `delay` copies of `s_0`; every step pushes the new true
//! state and pops the oldest, which is what the agent observes. Rewards and
//! termination flags pass through undelayed.

use std::collections::VecDeque;
use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::rng;

pub const DEFAULT_HORIZON: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EnvId {
    #[serde(rename = "pointmass2d")]
    PointMass2d,
    #[serde(rename = "pendulum")]
    Pendulum,
}

impl FromStr for EnvId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pointmass2d" => Ok(EnvId::PointMass2d),
            "pendulum" => Ok(EnvId::Pendulum),
            other => Err(Error::Env(format!("unknown environment id '{other}'"))),
        }
    }
}

impl fmt::Display for EnvId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EnvId::PointMass2d => "pointmass2d",
            EnvId::Pendulum => "pendulum",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub id: EnvId,
    pub state_dim: usize,
    pub action_dim: usize,
    pub dt: f64,
    pub horizon: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvState {
    pub s: Vec<f64>,
    pub t: usize,
    pub terminated: bool,
    pub truncated: bool,
}

impl EnvState {
    pub fn done(&self) -> bool {
        self.terminated || self.truncated
    }
}

const PM_DT: f64 = 0.05;
const PM_VMAX: f64 = 2.0;
const PM_BOUND: f64 = 3.0;
const PEN_DT: f64 = 0.05;
const PEN_G: f64 = 10.0;
const PEN_M: f64 = 1.0;
const PEN_L: f64 = 1.0;
const PEN_MAX_SPEED: f64 = 8.0;
const PEN_MAX_TORQUE: f64 = 2.0;

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_angle(x: f64) -> f64 {
    let y = (x + PI).rem_euclid(2.0 * PI) - PI;
    if y <= -PI {
        y + 2.0 * PI
    } else {
        y
    }
}

pub fn clip_action(a: &[f64]) -> Vec<f64> {
    a.iter().map(|x| x.clamp(-1.0, 1.0)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Env {
    pub spec: EnvSpec,
}

impl Env {
    pub fn new(id: EnvId) -> Self {
        Self::with_horizon(id, DEFAULT_HORIZON)
    }

    pub fn with_horizon(id: EnvId, horizon: usize) -> Self {
        let (state_dim, action_dim, dt) = match id {
            EnvId::PointMass2d => (4, 2, PM_DT),
            EnvId::Pendulum => (2, 1, PEN_DT),
        };
        Self { spec: EnvSpec { id, state_dim, action_dim, dt, horizon: horizon.max(1) } }
    }

    pub fn id(&self) -> EnvId {
        self.spec.id
    }

    pub fn reset(&self, seed: u64) -> EnvState {
        let mut r = rng::seeded(seed);
        let s = match self.spec.id {
            EnvId::PointMass2d => {
                vec![r.random_range(-1.0..=1.0), r.random_range(-1.0..=1.0), 0.0, 0.0]
            }
            EnvId::Pendulum => {
                let th = wrap_angle(r.random_range(-PI..PI));
                vec![th, r.random_range(-1.0..=1.0)]
            }
        };
        EnvState { s, t: 0, terminated: false, truncated: false }
    }

    /// Pure transition function `s' = f(s, a)` on a clipped action.
    pub fn transition(&self, s: &[f64], a: &[f64]) -> Vec<f64> {
        let a = clip_action(a);
        match self.spec.id {
            EnvId::PointMass2d => {
                let dt = PM_DT;
                let vx = (s[2] + a[0] * dt).clamp(-PM_VMAX, PM_VMAX);
                let vy = (s[3] + a[1] * dt).clamp(-PM_VMAX, PM_VMAX);
                vec![s[0] + vx * dt, s[1] + vy * dt, vx, vy]
            }
            EnvId::Pendulum => {
                let (th, thd) = (s[0], s[1]);
                let u = a[0] * PEN_MAX_TORQUE;
                let acc = -(3.0 * PEN_G / (2.0 * PEN_L)) * (th + PI).sin() + 3.0 * u / (PEN_M * PEN_L * PEN_L);
                let thd2 = (thd + acc * PEN_DT).clamp(-PEN_MAX_SPEED, PEN_MAX_SPEED);
                vec![wrap_angle(th + thd2 * PEN_DT), thd2]
            }
        }
    }

    fn reward(&self, s: &[f64], a: &[f64], s_next: &[f64]) -> f64 {
        match self.spec.id {
            EnvId::PointMass2d => {
                let p2 = s_next[0] * s_next[0] + s_next[1] * s_next[1];
                let a2: f64 = a.iter().map(|x| x * x).sum();
                -(p2 + 0.01 * a2)
            }
            EnvId::Pendulum => {
                let th = wrap_angle(s[0]);
                -(th * th + 0.1 * s[1] * s[1] + 0.001 * a[0] * a[0])
            }
        }
    }

    fn terminal(&self, s: &[f64]) -> bool {
        match self.spec.id {
            EnvId::PointMass2d => (s[0] * s[0] + s[1] * s[1]).sqrt() > PM_BOUND,
            EnvId::Pendulum => false,
        }
    }

    pub fn step(&self, state: &EnvState, a: &[f64]) -> Result<(EnvState, f64)> {
        if state.done() {
            return Err(Error::Env(format!("episode already finished at t={}", state.t)));
        }
        if a.len() != self.spec.action_dim {
            return Err(shape_err(format!("action has {} entries, expected {}", a.len(), self.spec.action_dim)));
        }
        if a.iter().any(|x| !x.is_finite()) {
            return Err(Error::Env("non-finite action".into()));
        }
        let a = clip_action(a);
        let s_next = self.transition(&state.s, &a);
        let r = self.reward(&state.s, &a, &s_next);
        let t = state.t + 1;
        let terminated = self.terminal(&s_next);
        let truncated = !terminated && t >= self.spec.horizon;
        Ok((EnvState { s: s_next, t, terminated, truncated }, r))
    }

    /// Rolls the known dynamics forward from a stale state through the
    /// actions executed since it was observed.
    pub fn compensate(&self, observation: &[f64], executed: &[Vec<f64>]) -> Vec<f64> {
        executed.iter().fold(observation.to_vec(), |s, a| self.transition(&s, a))
    }

    /// Mechanical energy of the pendulum, zero when upright at rest.
    pub fn pendulum_energy(s: &[f64]) -> f64 {
        let inertia = PEN_M * PEN_L * PEN_L / 3.0;
        0.5 * inertia * s[1] * s[1] + 0.5 * PEN_M * PEN_G * PEN_L * (s[0].cos() - 1.0)
    }
}

pub fn env_reset(id: &str, seed: u64) -> Result<EnvState> {
    Ok(Env::new(id.parse()?).reset(seed))
}

/// FIFO of true states not yet revealed to the agent.
#[derive(Debug, Clone, PartialEq)]
pub struct DelayBuffer {
    delay: usize,
    queue: VecDeque<Vec<f64>>,
}

impl DelayBuffer {
    pub fn new(delay: usize, s0: &[f64]) -> Self {
        Self { delay, queue: std::iter::repeat_n(s0.to_vec(), delay).collect() }
    }

    pub fn delay(&self) -> usize {
        self.delay
    }

    pub fn len(&self) -> usize {
        self.queue.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queue.is_empty()
    }

    pub fn contents(&self) -> impl Iterator<Item = &Vec<f64>> {
        self.queue.iter()
    }

    /// Enqueues the newest true state and returns the one now observed.
    pub fn push(&mut self, s: Vec<f64>) -> Vec<f64> {
        if self.delay == 0 {
            return s;
        }
        self.queue.push_back(s);
        self.queue.pop_front().expect("queue holds delay+1 states")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct StepFlags {
    pub terminated: bool,
    pub truncated: bool,
}

pub fn delayed_reset(env: &Env, delay: usize, seed: u64) -> (Vec<f64>, DelayBuffer, EnvState) {
    let state = env.reset(seed);
    let buffer = DelayBuffer::new(delay, &state.s);
    (state.s.clone(), buffer, state)
}

pub fn delayed_step(
    env: &Env,
    buffer: &mut DelayBuffer,
    state: &EnvState,
    a: &[f64],
) -> Result<(Vec<f64>, f64, StepFlags, EnvState)> {
    let (next, r) = env.step(state, a)?;
    let obs = buffer.push(next.s.clone());
    let flags = StepFlags { terminated: next.terminated, truncated: next.truncated };
    Ok((obs, r, flags, next))
}

/// Owning wrapper around an environment under fixed observation delay.
#[derive(Debug, Clone)]
pub struct DelayedEnv {
    pub env: Env,
    buffer: DelayBuffer,
    state: EnvState,
    observation: Vec<f64>,
}

impl DelayedEnv {
    pub fn reset(env: Env, delay: usize, seed: u64) -> Self {
        let (observation, buffer, state) = delayed_reset(&env, delay, seed);
        Self { env, buffer, state, observation }
    }

    pub fn delay(&self) -> usize {
        self.buffer.delay()
    }

    pub fn observation(&self) -> &[f64] {
        &self.observation
    }

    /// The hidden true state; only oracles may look at it.
    pub fn true_state(&self) -> &EnvState {
        &self.state
    }

    pub fn buffer(&self) -> &DelayBuffer {
        &self.buffer
    }

    pub fn step(&mut self, a: &[f64]) -> Result<(Vec<f64>, f64, StepFlags)> {
        let (obs, r, flags, next) = delayed_step(&self.env, &mut self.buffer, &self.state, a)?;
        self.state = next;
        self.observation = obs.clone();
        Ok((obs, r, flags))
    }

    pub fn done(&self) -> bool {
        self.state.done()
    }
}

/// The last `delay` executed actions, oldest first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionHistory {
    delay: usize,
    action_dim: usize,
    actions: VecDeque<Vec<f64>>,
}

impl ActionHistory {
    pub fn new(delay: usize, action_dim: usize) -> Self {
        Self { delay, action_dim, actions: VecDeque::with_capacity(delay) }
    }

    pub fn delay(&self) -> usize {
        self.delay
    }

    pub fn push(&mut self, a: &[f64]) {
        if self.delay == 0 {
            return;
        }
        if self.actions.len() == self.delay {
            self.actions.pop_front();
        }
        self.actions.push_back(a.to_vec());
    }

    /// Actions actually executed (at most `delay`), oldest first.
    pub fn executed(&self) -> Vec<Vec<f64>> {
        self.actions.iter().cloned().collect()
    }

    /// Exactly `delay` entries, zero-padded at the oldest end.
    pub fn padded(&self) -> Vec<Vec<f64>> {
        let missing = self.delay - self.actions.len();
        let mut out = vec![vec![0.0; self.action_dim]; missing];
        out.extend(self.actions.iter().cloned());
        out
    }
}

/// Delayed observation plus the actions taken since it was emitted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentedState {
    pub observation: Vec<f64>,
    pub action_history: Vec<Vec<f64>>,
}

impl AugmentedState {
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = self.observation.clone();
        for a in &self.action_history {
            v.extend_from_slice(a);
        }
        v
    }
}

pub fn augment(observation: &[f64], history: &[Vec<f64>], delay: usize) -> Result<AugmentedState> {
    if history.len() != delay {
        return Err(shape_err(format!("action history holds {} entries, delay is {delay}", history.len())));
    }
    if history.iter().flatten().any(|x| !(-1.0..=1.0).contains(x)) {
        return Err(Error::Env("action history outside [-1, 1]".into()));
    }
    Ok(AugmentedState { observation: observation.to_vec(), action_history: history.to_vec() })
}
