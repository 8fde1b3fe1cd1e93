//! Browser bindings. Every export returns a JSON string for the page script.

use said::baselines::{compounding_curve, curve_starts, diffusion_curve, train_dynamics, DynamicsTrainConfig};
use said::datagen::{build_windows, collect_dataset, normalizer_fit, CollectConfig, PolicyTag, ScriptedPolicy, Tier};
use said::denoiser::{DenoiserConfig, TimeEmbedding};
use said::diffusion::{ddim_timesteps, make_schedule, state_prediction_mask, train_diffusion, DiffusionTrainConfig};
use said::envs::{ActionHistory, DelayedEnv, Env, EnvId};
use said::rng;
use serde_json::json;
use wasm_bindgen::prelude::*;

fn to_js(r: said::Result<serde_json::Value>) -> Result<String, JsError> {
    r.map(|v| v.to_string()).map_err(|e| JsError::new(&e.to_string()))
}

#[derive(Clone, Copy)]
enum Mode {
    Compensating,
    Naive,
}

fn trace(delay: usize, seed: u64, mode: Mode) -> said::Result<serde_json::Value> {
    let env = Env::new(EnvId::PointMass2d);
    let policy = ScriptedPolicy::new(PolicyTag::LqrPointmass, &env)?;
    let mut denv = DelayedEnv::reset(env.clone(), delay, seed);
    let mut hist = ActionHistory::new(delay, env.spec.action_dim);
    let mut r = rng::seeded(seed);
    let mut path = vec![denv.true_state().s[..2].to_vec()];
    let mut total = 0.0;
    while !denv.done() {
        let estimate = match mode {
            Mode::Compensating => env.compensate(denv.observation(), &hist.executed()),
            Mode::Naive => denv.observation().to_vec(),
        };
        let a = policy.mean_action(&estimate, &mut r);
        let (_, reward, _) = denv.step(&a)?;
        hist.push(&a);
        total += reward;
        path.push(denv.true_state().s[..2].to_vec());
    }
    Ok(json!({ "path": path, "return": total, "terminated": denv.true_state().terminated }))
}

/// Position traces of the LQR controller on pointmass2d under observation
/// delay, fed either the stale observation or a forward-simulated estimate.
#[wasm_bindgen]
pub fn delayed_rollout(delay: usize, seed: u64) -> Result<String, JsError> {
    to_js((|| {
        Ok(json!({
            "delay": delay,
            "compensating": trace(delay, seed, Mode::Compensating)?,
            "naive": trace(delay, seed, Mode::Naive)?,
        }))
    })())
}

/// Cumulative signal coefficients and the DDIM steps; the last step jumps to 0.
#[wasm_bindgen]
pub fn noise_schedule(total: usize, sampling_steps: usize) -> Result<String, JsError> {
    to_js((|| {
        let s = make_schedule(total)?;
        Ok(json!({ "alpha_bar": s.as_slice(), "ddim": ddim_timesteps(total, sampling_steps)? }))
    })())
}

/// Open-loop error of a small one-step model against joint generation,
/// trained in the page on a replay-tier dataset.
#[wasm_bindgen]
pub fn compounding(horizon: usize, train_steps: usize, seed: u64) -> Result<String, JsError> {
    to_js((|| {
        let eps = collect_dataset(&CollectConfig {
            env_id: EnvId::PointMass2d,
            horizon: 100,
            delay: 0,
            policy: PolicyTag::LqrPointmass,
            tier: Tier::Replay,
            n_episodes: 40,
            seed,
        })?;
        let norm = normalizer_fit(&eps)?;
        let (train, test) = eps.split_at(36);
        let (dyn_model, _) = train_dynamics(
            train,
            &norm,
            &DynamicsTrainConfig { steps: train_steps, batch_size: 128, width: 32, seed, ..DynamicsTrainConfig::default() },
        )?;
        let rows = horizon + 1;
        let windows = build_windows(train, 0, rows, &norm, 0.99)?;
        let dcfg = DenoiserConfig { rows, row_dim: 6, width: 64, depth: 2, embedding: TimeEmbedding::default() };
        let tcfg =
            DiffusionTrainConfig { train_steps, batch_size: 64, weight_factor: 0.0, seed, ..DiffusionTrainConfig::default() };
        let model = train_diffusion(&windows, state_prediction_mask(rows, 4, 2), dcfg, &tcfg)?;
        let starts: Vec<_> = curve_starts(test, horizon, 8);
        let ar = compounding_curve(&dyn_model, test, &starts, horizon)?;
        let df = diffusion_curve(&model, &norm, test, &starts, horizon, 10, 0.0, seed)?;
        Ok(json!({ "autoregressive": ar, "diffusion": df, "starts": starts.len() }))
    })())
}
