//! Implicit Q-learning critic and the mean-value trajectory score.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::Transition;
use crate::denoiser::Checkpoint;
use crate::error::{Error, Result};
use crate::numerics::{
    adam_step, clip_global_norm, value_and_grad, Activation, Array, Mlp, OptimState, ParamSet, GRAD_CLIP_NORM,
};
use crate::rng;

/// Which generated state rows enter the trajectory score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScoreRows {
    /// Rows `1..L`.
    #[default]
    AllGenerated,
    /// Rows `max(1, delay)..L`.
    FromCurrent,
}

impl std::str::FromStr for ScoreRows {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all_generated" => Ok(Self::AllGenerated),
            "from_current" => Ok(Self::FromCurrent),
            _ => Err(Error::Config(format!("unknown score rows '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IqlConfig {
    pub tau: f64,
    pub gamma: f64,
    pub lr: f64,
    pub rho: f64,
    pub terminal_penalty: f64,
    pub full_traj_bonus: f64,
    pub width: usize,
    pub hidden_layers: usize,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
}

impl Default for IqlConfig {
    fn default() -> Self {
        Self {
            tau: 0.7,
            gamma: 0.99,
            lr: 3e-4,
            rho: 0.005,
            terminal_penalty: -100.0,
            full_traj_bonus: 0.0,
            width: 256,
            hidden_layers: 2,
            batch_size: 256,
            steps: 30_000,
            seed: 0,
        }
    }
}

impl IqlConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return bad("value.tau must lie in (0, 1)");
        }
        if !(self.gamma >= 0.0 && self.gamma < 1.0) {
            return bad("value.gamma must lie in [0, 1)");
        }
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return bad("value.rho must lie in (0, 1]");
        }
        if self.width == 0 || self.batch_size == 0 || !(self.lr > 0.0) {
            return bad("value width, batch size and lr must be positive");
        }
        Ok(())
    }
}

/// `|tau - 1{u < 0}| u^2`.
pub fn expectile_loss(u: f64, tau: f64) -> f64 {
    expectile_weight(u, tau) * u * u
}

fn expectile_weight(u: f64, tau: f64) -> f64 {
    if u < 0.0 {
        1.0 - tau
    } else {
        tau
    }
}

/// State value network, twin action values and their Polyak targets.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueModel {
    pub state_dim: usize,
    pub action_dim: usize,
    pub config: IqlConfig,
    pub v: ParamSet,
    pub q: ParamSet,
    pub q_target: ParamSet,
    /// Digest of the normalizer whose state space `v` consumes.
    pub normalizer_digest: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct IqlDiagnostics {
    pub v_loss: f64,
    pub q_loss: f64,
}

fn hidden(cfg: &IqlConfig, fan_in: usize) -> Vec<usize> {
    let mut w = vec![fan_in];
    w.extend(std::iter::repeat_n(cfg.width, cfg.hidden_layers));
    w.push(1);
    w
}

impl ValueModel {
    fn v_net(&self) -> Mlp {
        Mlp::new("v.", hidden(&self.config, self.state_dim), Activation::Relu).expect("validated")
    }

    fn q_net(&self, i: usize) -> Mlp {
        Mlp::new(format!("q{i}."), hidden(&self.config, self.state_dim + self.action_dim), Activation::Relu).expect("validated")
    }

    pub fn new(state_dim: usize, action_dim: usize, config: IqlConfig, normalizer_digest: String) -> Result<Self> {
        config.validate()?;
        if state_dim == 0 {
            return Err(Error::Shape("value model needs a non-empty state".into()));
        }
        let mut m = Self {
            state_dim,
            action_dim,
            v: ParamSet::new(),
            q: ParamSet::new(),
            q_target: ParamSet::new(),
            normalizer_digest,
            config,
        };
        let mut r = rng::seeded(rng::child_seed(m.config.seed, 0x1d1));
        // Output layers start at zero so every value estimate starts at 0.
        m.v = m.v_net().init(&mut r, true)?;
        m.q_net(1).init_into(&mut m.q, &mut r, true)?;
        m.q_net(2).init_into(&mut m.q, &mut r, true)?;
        m.q_target = m.q.clone();
        Ok(m)
    }

    /// V on a batch of normalized states laid out row-major.
    pub fn values(&self, states: &[f64]) -> Result<Vec<f64>> {
        let n = states.len() / self.state_dim.max(1);
        if n * self.state_dim != states.len() {
            return Err(Error::Shape(format!("{} values is not a whole number of states", states.len())));
        }
        if n == 0 {
            return Ok(Vec::new());
        }
        let x = Array::matrix(n, self.state_dim, states.to_vec())?;
        Ok(self.v_net().forward(&self.v, &x)?.into_data())
    }

    pub fn value(&self, state: &[f64]) -> Result<f64> {
        Ok(self.values(state)?[0])
    }

    fn q_min(&self, params: &ParamSet, sa: &Array) -> Result<Vec<f64>> {
        let q1 = self.q_net(1).forward(params, sa)?;
        let q2 = self.q_net(2).forward(params, sa)?;
        Ok(q1.data().iter().zip(q2.data()).map(|(a, b)| a.min(*b)).collect())
    }

    /// Smaller of the two target action values.
    pub fn q_value(&self, state: &[f64], action: &[f64]) -> Result<f64> {
        let mut sa = state.to_vec();
        sa.extend_from_slice(action);
        Ok(self.q_min(&self.q_target, &Array::vector(sa))?[0])
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut params = self.v.clone();
        for (n, a) in self.q.iter() {
            params.insert(n, a.clone())?;
        }
        for (n, a) in self.q_target.iter() {
            params.insert(format!("target.{n}"), a.clone())?;
        }
        Ok(Checkpoint {
            kind: "value".into(),
            meta: serde_json::json!({
                "state_dim": self.state_dim,
                "action_dim": self.action_dim,
                "config": self.config,
                "normalizer_digest": self.normalizer_digest,
            }),
            params,
        })
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.kind != "value" {
            return Err(Error::Format(format!("expected a value checkpoint, found '{}'", ck.kind)));
        }
        let field = |k: &str| ck.meta.get(k).cloned().ok_or_else(|| Error::Format(format!("checkpoint lacks '{k}'")));
        let mut m = Self::new(
            serde_json::from_value(field("state_dim")?)?,
            serde_json::from_value(field("action_dim")?)?,
            serde_json::from_value(field("config")?)?,
            serde_json::from_value(field("normalizer_digest")?)?,
        )?;
        for (set, prefix) in [(&mut m.v, ""), (&mut m.q, ""), (&mut m.q_target, "target.")] {
            let names: Vec<String> = set.names().map(str::to_owned).collect();
            for n in names {
                let src = ck.params.get(&format!("{prefix}{n}"))?;
                let dst = set.get_mut(&n)?;
                if src.shape() != dst.shape() {
                    return Err(Error::Format(format!("leaf '{n}' has shape {:?}", src.shape())));
                }
                *dst = src.clone();
            }
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<String> {
        self.to_checkpoint()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// Optimizer state for the two networks.
#[derive(Debug, Clone)]
pub struct IqlTrainer {
    v_opt: OptimState,
    q_opt: OptimState,
}

impl IqlTrainer {
    pub fn new(model: &ValueModel) -> Result<Self> {
        let (lr, n) = (model.config.lr, model.config.steps.max(1) as u64);
        Ok(Self { v_opt: OptimState::new(&model.v, lr, lr, n)?, q_opt: OptimState::new(&model.q, lr, lr, n)? })
    }
}

fn stack(rows: impl Iterator<Item = Vec<f64>>, cols: usize) -> Result<Array> {
    let data: Vec<f64> = rows.flatten().collect();
    Array::matrix(data.len() / cols.max(1), cols, data)
}

/// One expectile step on V, one TD step on both Q networks, then a Polyak
/// update of the targets. Rewards are expected to be shaped already.
pub fn iql_update(model: &mut ValueModel, trainer: &mut IqlTrainer, batch: &[&Transition]) -> Result<IqlDiagnostics> {
    let cfg = model.config.clone();
    let (sd, ad) = (model.state_dim, model.action_dim);
    let n = batch.len();
    if n == 0 {
        return Err(Error::Contract("empty IQL batch".into()));
    }
    let s = stack(batch.iter().map(|t| t.s.clone()), sd)?;
    let s_next = stack(batch.iter().map(|t| t.s_next.clone()), sd)?;
    let sa = stack(
        batch.iter().map(|t| {
            let mut v = t.s.clone();
            v.extend_from_slice(&t.a);
            v
        }),
        sd + ad,
    )?;
    if s.rows() != n || sa.rows() != n || s_next.rows() != n {
        return Err(Error::Shape("transition dimensions do not match the value model".into()));
    }

    // Expectile regression of V toward the pessimistic target Q.
    let q_t = model.q_min(&model.q_target, &sa)?;
    let v_now = model.v_net().forward(&model.v, &s)?;
    let w: Vec<f64> = q_t.iter().zip(v_now.data()).map(|(q, v)| expectile_weight(q - v, cfg.tau) / n as f64).collect();
    let v_net = model.v_net();
    let (v_loss, mut gv) = value_and_grad(&model.v, |t, vars| {
        let x = t.constant(s.clone());
        let v = v_net.forward_tape(t, vars, x)?;
        let target = t.constant(Array::matrix(n, 1, q_t.clone())?);
        let u = t.sub(target, v)?;
        let sq = t.square(u);
        let weighted = t.mul_const(sq, Array::matrix(n, 1, w)?)?;
        Ok(t.sum(weighted))
    })?;
    clip_global_norm(&mut gv, GRAD_CLIP_NORM);
    adam_step(&mut model.v, &gv, &mut trainer.v_opt)?;

    // TD regression of both Q networks.
    let v_next = model.v_net().forward(&model.v, &s_next)?;
    let y: Vec<f64> =
        batch.iter().zip(v_next.data()).map(|(t, v)| t.r + if t.terminated { 0.0 } else { cfg.gamma * v }).collect();
    let (q1, q2) = (model.q_net(1), model.q_net(2));
    let (q_loss, mut gq) = value_and_grad(&model.q, |t, vars| {
        let x = t.constant(sa.clone());
        let target = t.constant(Array::matrix(n, 1, y)?);
        let mut total = None;
        for net in [&q1, &q2] {
            let q = net.forward_tape(t, vars, x)?;
            let d = t.sub(q, target)?;
            let sq = t.square(d);
            let m = t.mean(sq);
            total = Some(match total {
                None => m,
                Some(acc) => t.add(acc, m)?,
            });
        }
        Ok(total.expect("two networks"))
    })?;
    if !v_loss.is_finite() || !q_loss.is_finite() {
        return Err(Error::NonFinite { context: "iql_update".into(), detail: format!("v_loss={v_loss}, q_loss={q_loss}") });
    }
    clip_global_norm(&mut gq, GRAD_CLIP_NORM);
    adam_step(&mut model.q, &gq, &mut trainer.q_opt)?;

    for ((_, tgt), (_, src)) in model.q_target.iter_mut().zip(model.q.iter()) {
        for (a, b) in tgt.data_mut().iter_mut().zip(src.data()) {
            *a = (1.0 - cfg.rho) * *a + cfg.rho * b;
        }
    }
    Ok(IqlDiagnostics { v_loss, q_loss })
}

/// Fits a fresh model on `data` for `config.steps` uniformly sampled batches.
pub fn train_iql(
    data: &[Transition],
    state_dim: usize,
    action_dim: usize,
    config: IqlConfig,
    normalizer_digest: String,
) -> Result<(ValueModel, Vec<IqlDiagnostics>)> {
    if data.is_empty() {
        return Err(Error::Config("no transitions to fit the value model on".into()));
    }
    let mut model = ValueModel::new(state_dim, action_dim, config, normalizer_digest)?;
    let mut trainer = IqlTrainer::new(&model)?;
    let mut r = rng::seeded(rng::child_seed(model.config.seed, 0x1d2));
    let mut log = Vec::with_capacity(model.config.steps);
    for _ in 0..model.config.steps {
        let batch: Vec<&Transition> = (0..model.config.batch_size).map(|_| &data[r.random_range(0..data.len())]).collect();
        log.push(iql_update(&mut model, &mut trainer, &batch)?);
    }
    Ok((model, log))
}

fn score_range(rows: usize, delay: usize, which: ScoreRows) -> std::ops::Range<usize> {
    let lo = match which {
        ScoreRows::AllGenerated => 1,
        ScoreRows::FromCurrent => delay.max(1),
    };
    if rows <= 1 {
        0..rows
    } else {
        lo.min(rows - 1)..rows
    }
}

/// Mean V over the scored state rows of each window, in one batched pass.
/// A single-row window is scored by its only state.
pub fn score_windows(
    model: &ValueModel,
    windows: &[Vec<f64>],
    rows: usize,
    row_dim: usize,
    delay: usize,
    which: ScoreRows,
) -> Result<Vec<f64>> {
    let sd = model.state_dim;
    if row_dim < sd || windows.iter().any(|w| w.len() != rows * row_dim) {
        return Err(Error::Shape("candidate windows do not match the scoring layout".into()));
    }
    let range = score_range(rows, delay, which);
    let per = range.len();
    let mut states = Vec::with_capacity(windows.len() * per * sd);
    for w in windows {
        for r in range.clone() {
            states.extend_from_slice(&w[r * row_dim..r * row_dim + sd]);
        }
    }
    let v = model.values(&states)?;
    Ok(v.chunks(per.max(1)).map(|c| c.iter().sum::<f64>() / per as f64).collect())
}

pub fn trajectory_score(
    model: &ValueModel,
    window: &[f64],
    rows: usize,
    row_dim: usize,
    delay: usize,
    which: ScoreRows,
) -> Result<f64> {
    Ok(score_windows(model, std::slice::from_ref(&window.to_vec()), rows, row_dim, delay, which)?[0])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn expectile_examples() {
        for u in [-3.0, -0.1, 0.0, 2.5] {
            assert_eq!(expectile_loss(u, 0.5), 0.5 * u * u);
        }
        assert!((expectile_loss(1.0, 0.7) - 0.7).abs() < 1e-15);
        assert!((expectile_loss(-1.0, 0.7) - 0.3).abs() < 1e-15);
        // Minimizing over a constant on {0, 10} at tau = 0.5 gives the mean.
        let obj = |c: f64| expectile_loss(0.0 - c, 0.5) + expectile_loss(10.0 - c, 0.5);
        let best = (0..=1000).map(|i| i as f64 / 100.0).min_by(|a, b| obj(*a).total_cmp(&obj(*b))).unwrap();
        assert!((best - 5.0).abs() < 1e-9);
    }

    fn small_cfg(steps: usize) -> IqlConfig {
        IqlConfig { width: 32, batch_size: 64, steps, lr: 3e-3, ..IqlConfig::default() }
    }

    #[test]
    fn score_rows_selection() {
        assert_eq!(score_range(5, 3, ScoreRows::AllGenerated), 1..5);
        assert_eq!(score_range(5, 3, ScoreRows::FromCurrent), 3..5);
        assert_eq!(score_range(5, 0, ScoreRows::FromCurrent), 1..5);
        assert_eq!(score_range(1, 0, ScoreRows::AllGenerated), 0..1);
    }

    #[test]
    fn score_is_mean_of_row_values() {
        let m = ValueModel::new(2, 1, small_cfg(1), String::new()).unwrap();
        let w = vec![0.0, 0.0, 0.0, 0.5, -0.5, 0.2, 1.0, 1.0, 0.1];
        let s = trajectory_score(&m, &w, 3, 3, 0, ScoreRows::AllGenerated).unwrap();
        let want = (m.value(&[0.5, -0.5]).unwrap() + m.value(&[1.0, 1.0]).unwrap()) / 2.0;
        assert!((s - want).abs() < 1e-12);
        let one = trajectory_score(&m, &w[..6], 2, 3, 0, ScoreRows::AllGenerated).unwrap();
        assert!((one - m.value(&[0.5, -0.5]).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn zero_rewards_give_zero_values() {
        let mut r = rng::seeded(3);
        let data: Vec<Transition> = (0..200)
            .map(|_| Transition {
                s: vec![r.random_range(-1.0..1.0)],
                a: vec![r.random_range(-1.0..1.0)],
                r: 0.0,
                s_next: vec![r.random_range(-1.0..1.0)],
                terminated: false,
            })
            .collect();
        let (m, _) = train_iql(&data, 1, 1, small_cfg(1500), String::new()).unwrap();
        for x in [-0.9, 0.0, 0.7] {
            assert!(m.value(&[x]).unwrap().abs() <= 0.01, "V({x})");
        }
    }

    #[test]
    fn checkpoint_roundtrip() {
        let m = ValueModel::new(3, 2, small_cfg(1), "abc".into()).unwrap();
        let back =
            ValueModel::from_checkpoint(&Checkpoint::decode(&m.to_checkpoint().unwrap().encode().unwrap()).unwrap()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn bad_config_rejected() {
        assert!(ValueModel::new(2, 1, IqlConfig { tau: 1.0, ..IqlConfig::default() }, String::new()).is_err());
        assert!(ValueModel::new(2, 1, IqlConfig { gamma: 1.0, ..IqlConfig::default() }, String::new()).is_err());
    }
}
