use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::envs::{wrap_angle, Env, EnvId};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PolicyTag {
    #[serde(rename = "lqr_pointmass")]
    LqrPointmass,
    #[serde(rename = "energy_pendulum")]
    EnergyPendulum,
    #[serde(rename = "random")]
    Random,
}

impl FromStr for PolicyTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lqr_pointmass" => Ok(Self::LqrPointmass),
            "energy_pendulum" => Ok(Self::EnergyPendulum),
            "random" => Ok(Self::Random),
            other => Err(Error::Config(format!("unknown policy tag '{other}'"))),
        }
    }
}

impl fmt::Display for PolicyTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::LqrPointmass => "lqr_pointmass",
            Self::EnergyPendulum => "energy_pendulum",
            Self::Random => "random",
        })
    }
}

impl PolicyTag {
    /// The model-based controller for an environment.
    pub fn default_for(env: EnvId) -> Self {
        match env {
            EnvId::PointMass2d => Self::LqrPointmass,
            EnvId::Pendulum => Self::EnergyPendulum,
        }
    }
}

/// Infinite-horizon discrete LQR gain `K` (so that `u = -K x`) obtained by
/// iterating the Riccati recursion to a fixed point.
pub fn dlqr(a: &DMatrix<f64>, b: &DMatrix<f64>, q: &DMatrix<f64>, r: &DMatrix<f64>) -> DMatrix<f64> {
    let mut p = q.clone();
    for _ in 0..100_000 {
        let bt_p = b.transpose() * &p;
        let s = r + &bt_p * b;
        let k = s.clone().try_inverse().expect("R + B'PB is positive definite") * (&bt_p * a);
        let next = q + a.transpose() * &p * a - a.transpose() * &p * b * &k;
        let diff = (&next - &p).abs().max();
        p = next;
        if diff < 1e-13 {
            break;
        }
    }
    let bt_p = b.transpose() * &p;
    (r + &bt_p * b).try_inverse().expect("positive definite") * (bt_p * a)
}

/// Pointmass linearization: per axis `p' = p + v dt + a dt^2`, `v' = v + a dt`.
pub fn pointmass_lqr_gain(dt: f64) -> DMatrix<f64> {
    let mut a = DMatrix::<f64>::identity(4, 4);
    a[(0, 2)] = dt;
    a[(1, 3)] = dt;
    let mut b = DMatrix::<f64>::zeros(4, 2);
    b[(0, 0)] = dt * dt;
    b[(1, 1)] = dt * dt;
    b[(2, 0)] = dt;
    b[(3, 1)] = dt;
    let q = DMatrix::<f64>::identity(4, 4);
    let r = DMatrix::<f64>::identity(2, 2) * 0.01;
    dlqr(&a, &b, &q, &r)
}

const PEN_CATCH_ANGLE: f64 = 0.5;
const PEN_KP: f64 = 10.0;
const PEN_KD: f64 = 2.0;
const PEN_PUMP_GAIN: f64 = 4.0;
const PEN_MAX_TORQUE: f64 = 2.0;

#[derive(Debug, Clone)]
pub struct ScriptedPolicy {
    pub tag: PolicyTag,
    pub action_dim: usize,
    gain: Option<DMatrix<f64>>,
}

impl ScriptedPolicy {
    pub fn new(tag: PolicyTag, env: &Env) -> Result<Self> {
        let gain = match (tag, env.id()) {
            (PolicyTag::LqrPointmass, EnvId::PointMass2d) => Some(pointmass_lqr_gain(env.spec.dt)),
            (PolicyTag::EnergyPendulum, EnvId::Pendulum) | (PolicyTag::Random, _) => None,
            (tag, id) => return Err(Error::Config(format!("policy '{tag}' does not apply to '{id}'"))),
        };
        Ok(Self { tag, action_dim: env.spec.action_dim, gain })
    }

    /// Noise-free action on a (true, estimated or stale) state.
    pub fn mean_action(&self, state: &[f64], rng: &mut impl Rng) -> Vec<f64> {
        match self.tag {
            PolicyTag::LqrPointmass => {
                let k = self.gain.as_ref().expect("gain built for pointmass");
                let u = -(k * DVector::from_column_slice(state));
                u.iter().map(|x| x.clamp(-1.0, 1.0)).collect()
            }
            PolicyTag::EnergyPendulum => {
                let (th, thd) = (wrap_angle(state[0]), state[1]);
                let torque = if th.abs() < PEN_CATCH_ANGLE {
                    -(PEN_KP * th + PEN_KD * thd)
                } else {
                    let e = Env::pendulum_energy(&[th, thd]);
                    let dir = if thd >= 0.0 { 1.0 } else { -1.0 };
                    PEN_PUMP_GAIN * (-e) * dir
                };
                vec![(torque / PEN_MAX_TORQUE).clamp(-1.0, 1.0)]
            }
            PolicyTag::Random => (0..self.action_dim).map(|_| rng.random_range(-1.0..=1.0)).collect(),
        }
    }

    /// Mean action plus Gaussian exploration noise, clipped to bounds.
    pub fn act(&self, state: &[f64], noise_scale: f64, rng: &mut impl Rng) -> Vec<f64> {
        let mut a = self.mean_action(state, rng);
        if noise_scale > 0.0 && self.tag != PolicyTag::Random {
            for x in &mut a {
                let n: f64 = StandardNormal.sample(rng);
                *x = (*x + noise_scale * n).clamp(-1.0, 1.0);
            }
        }
        a
    }
}

pub fn scripted_policy_act(tag: PolicyTag, env: &Env, state: &[f64], noise_scale: f64, seed: u64) -> Result<Vec<f64>> {
    let policy = ScriptedPolicy::new(tag, env)?;
    Ok(policy.act(state, noise_scale, &mut rng::seeded(seed)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lqr_is_zero_at_equilibrium() {
        let env = Env::new(EnvId::PointMass2d);
        let a = scripted_policy_act(PolicyTag::LqrPointmass, &env, &[0.0; 4], 0.0, 0).unwrap();
        assert_eq!(a, vec![0.0, 0.0]);
    }

    #[test]
    fn lqr_gain_is_stabilizing() {
        let dt = 0.05;
        let k = pointmass_lqr_gain(dt);
        let mut a = DMatrix::<f64>::identity(4, 4);
        a[(0, 2)] = dt;
        a[(1, 3)] = dt;
        let mut b = DMatrix::<f64>::zeros(4, 2);
        b[(0, 0)] = dt * dt;
        b[(1, 1)] = dt * dt;
        b[(2, 0)] = dt;
        b[(3, 1)] = dt;
        let closed = &a - &b * &k;
        let eig = closed.complex_eigenvalues();
        assert!(eig.iter().all(|z| z.norm() < 1.0));
    }

    #[test]
    fn random_policy_spans_bounds() {
        let env = Env::new(EnvId::PointMass2d);
        let p = ScriptedPolicy::new(PolicyTag::Random, &env).unwrap();
        let mut r = rng::seeded(3);
        let xs: Vec<f64> = (0..2000).flat_map(|_| p.act(&[0.0; 4], 0.0, &mut r)).collect();
        assert!(xs.iter().all(|x| x.abs() <= 1.0));
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / xs.len() as f64;
        assert!(mean.abs() < 0.05);
        assert!((var - 1.0 / 3.0).abs() < 0.03);
    }

    #[test]
    fn mismatched_policy_is_rejected() {
        let env = Env::new(EnvId::Pendulum);
        assert!(ScriptedPolicy::new(PolicyTag::LqrPointmass, &env).is_err());
        assert!("mpc".parse::<PolicyTag>().is_err());
    }

    #[test]
    fn energy_controller_swings_up() {
        let env = Env::new(EnvId::Pendulum);
        let p = ScriptedPolicy::new(PolicyTag::EnergyPendulum, &env).unwrap();
        let mut r = rng::seeded(0);
        let mut upright = 0;
        for seed in 0..10 {
            let mut st = env.reset(seed);
            while !st.done() {
                let a = p.act(&st.s, 0.0, &mut r);
                st = env.step(&st, &a).unwrap().0;
            }
            if st.s[0].abs() < 0.1 && st.s[1].abs() < 0.5 {
                upright += 1;
            }
        }
        assert!(upright >= 9, "only {upright}/10 episodes ended upright");
    }
}
