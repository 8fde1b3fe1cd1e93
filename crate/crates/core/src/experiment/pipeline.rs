use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::metrics::{Cell, Metrics, Provenance, Reference, Timing};
use crate::baselines::{compounding_curve, controller_returns, curve_starts, diffusion_curve, train_dynamics, ControllerMode};
use crate::container;
use crate::datagen::{
    build_windows, collect_dataset, fraction_filter, load_dataset, normalizer_fit, save_dataset, transitions, CollectConfig,
    EpisodeRecord, Normalizer, PolicyTag, Tier,
};
use crate::denoiser::{Checkpoint, DenoiserConfig, TimeEmbedding};
use crate::diffusion::{planner_mask, state_prediction_mask, train_diffusion, DiffusionModel, DiffusionTrainConfig};
use crate::envs::Env;
use crate::error::{Error, Result, StageContext};
use crate::planner::{rollout_episode, EpisodeOutcome, Planner, PlannerConfig};
use crate::rng;
use crate::value::{train_iql, ValueModel};

/// Everything a pipeline run produced.
#[derive(Debug, Clone)]
pub struct Artifacts {
    pub out_dir: PathBuf,
    pub metrics: Metrics,
    pub timing: Timing,
}

pub fn value_path(dir: &Path, seed: u64) -> PathBuf {
    dir.join(format!("value_s{seed}.ckpt"))
}

pub fn planner_path(dir: &Path, delay: usize, seed: u64) -> PathBuf {
    dir.join(format!("planner_d{delay}_s{seed}.ckpt"))
}

/// Episode seeds used for evaluation under run seed `seed`; shared by every
/// delay and by the scripted references so that cells are paired.
pub fn eval_seeds(cfg: &ExperimentConfig, seed: u64) -> Vec<u64> {
    let base = rng::child_seed(cfg.env_seed, 0xe0a1 ^ seed);
    (0..cfg.eval_episodes as u64).map(|i| rng::child_seed(base, i)).collect()
}

fn env_of(cfg: &ExperimentConfig) -> Env {
    Env::with_horizon(cfg.env_id, cfg.env_horizon)
}

/// Loads `data.path` or collects a fresh dataset into `out_dir`. Returned
/// episodes are exactly what the file holds.
pub fn dataset_stage(cfg: &ExperimentConfig, tier: Tier, out_dir: &Path) -> Result<(Vec<EpisodeRecord>, Normalizer, String)> {
    if let Some(p) = &cfg.data_path {
        let file = load_dataset(Path::new(p))?;
        if file.env_id.is_some_and(|id| id != cfg.env_id) {
            return Err(Error::Config(format!("dataset '{p}' was collected on a different environment")));
        }
        for d in &cfg.eval_delays {
            if let Some(w) = file.delay_warning(*d) {
                log::warn!("{w}");
            }
        }
        return Ok((file.episodes, file.normalizer, file.digest));
    }
    let eps = collect_dataset(&CollectConfig {
        env_id: cfg.env_id,
        horizon: cfg.env_horizon,
        delay: cfg.env_delay_steps,
        policy: cfg.policy(),
        tier,
        n_episodes: cfg.data_episodes,
        seed: cfg.data_seed,
    })?;
    let norm = normalizer_fit(&eps)?;
    let path = out_dir.join("dataset.bin");
    save_dataset(&path, &eps, &norm)?;
    let file = load_dataset(&path)?;
    Ok((file.episodes, file.normalizer, file.digest))
}

pub fn train_value_stage(cfg: &ExperimentConfig, episodes: &[EpisodeRecord], norm: &Normalizer, seed: u64) -> Result<ValueModel> {
    let data = transitions(episodes, norm, cfg.value_terminal_penalty, cfg.value_full_traj_bonus);
    let ad = data.first().map_or(0, |t| t.a.len());
    let (model, log) = train_iql(&data, norm.state_dim(), ad, cfg.iql(rng::child_seed(seed, 1)), norm.digest())?;
    if let Some(last) = log.last() {
        log::info!("value model seed {seed}: v_loss {:.4e} q_loss {:.4e}", last.v_loss, last.q_loss);
    }
    Ok(model)
}

pub fn denoiser_config(cfg: &ExperimentConfig, rows: usize, row_dim: usize) -> Result<DenoiserConfig> {
    let c = DenoiserConfig {
        rows,
        row_dim,
        width: cfg.diffusion_width,
        depth: cfg.diffusion_depth,
        embedding: TimeEmbedding { n_freq: cfg.diffusion_n_freq, scale: 1.0 },
    };
    c.validate()?;
    Ok(c)
}

pub fn train_planner_stage(
    cfg: &ExperimentConfig,
    episodes: &[EpisodeRecord],
    norm: &Normalizer,
    delay: usize,
    seed: u64,
) -> Result<DiffusionModel> {
    let windows = build_windows(episodes, delay, cfg.planner_horizon, norm, cfg.value_gamma)?;
    let first = windows
        .first()
        .ok_or_else(|| Error::Config(format!("no episode is long enough for windows of {} rows", delay + cfg.planner_horizon)))?;
    let (rows, row_dim) = (first.rows, first.row_dim);
    let sd = norm.state_dim();
    let dcfg = denoiser_config(cfg, rows, row_dim)?;
    let tcfg = cfg.diffusion_train(rng::child_seed(seed, 100 + delay as u64));
    let model = train_diffusion(&windows, planner_mask(rows, sd, row_dim - sd, delay), dcfg, &tcfg)?;
    if let Some(l) = model.losses.last() {
        log::info!("planner delay {delay} seed {seed}: final loss {l:.4e} over {} windows", windows.len());
    }
    Ok(model)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct PlannerExtra {
    normalizer: Normalizer,
    delay: usize,
    horizon: usize,
    env_id: String,
}

pub fn save_planner(
    path: &Path,
    model: &DiffusionModel,
    norm: &Normalizer,
    delay: usize,
    horizon: usize,
    cfg: &ExperimentConfig,
) -> Result<String> {
    let extra = PlannerExtra { normalizer: norm.clone(), delay, horizon, env_id: cfg.env_id.to_string() };
    model.to_checkpoint(serde_json::to_value(extra)?)?.save(path)
}

/// Loads a planner checkpoint and its value model; sampling settings come
/// from `cfg`, the window layout from the checkpoint.
pub fn load_planner(planner_file: &Path, value_file: &Path, cfg: &ExperimentConfig) -> Result<(Planner, String, String)> {
    let pbytes = std::fs::read(planner_file)
        .map_err(|e| Error::Config(format!("cannot read planner '{}': {e}", planner_file.display())))?;
    let vbytes = std::fs::read(value_file)
        .map_err(|e| Error::Config(format!("cannot read value model '{}': {e}", value_file.display())))?;
    let ck = Checkpoint::decode(&pbytes)?;
    let extra: PlannerExtra = serde_json::from_value(ck.meta["extra"].clone())?;
    let diffusion = DiffusionModel::from_checkpoint(&ck)?;
    let value = ValueModel::from_checkpoint(&Checkpoint::decode(&vbytes)?)?;
    let pcfg = PlannerConfig { horizon: extra.horizon, ..cfg.planner(extra.delay) };
    let planner = Planner::new(diffusion, value, extra.normalizer, pcfg)?;
    Ok((planner, container::sha256_hex(&pbytes), container::sha256_hex(&vbytes)))
}

/// Closed-loop evaluation over `seeds`, split across `workers` threads.
/// Results are returned in seed order whatever the worker count.
pub fn evaluate(env: &Env, planner: &Planner, seeds: &[u64], workers: usize) -> Result<Vec<EpisodeOutcome>> {
    let workers = workers.clamp(1, seeds.len().max(1));
    if workers == 1 {
        return seeds.iter().map(|&s| rollout_episode(env, planner, s)).collect();
    }
    let chunk = seeds.len().div_ceil(workers);
    std::thread::scope(|scope| {
        let handles: Vec<_> = seeds
            .chunks(chunk)
            .map(|part| scope.spawn(move || part.iter().map(|&s| rollout_episode(env, planner, s)).collect::<Result<Vec<_>>>()))
            .collect();
        let mut out = Vec::with_capacity(seeds.len());
        for h in handles {
            out.extend(h.join().map_err(|_| Error::Contract("evaluation worker panicked".into()))??);
        }
        Ok(out)
    })
}

fn cell_from(outcomes: &[EpisodeOutcome], pcfg: &PlannerConfig, seed: u64) -> Cell {
    let returns: Vec<f64> = outcomes.iter().map(|o| o.episode_return).collect();
    let decisions: usize = outcomes.iter().map(|o| o.latencies.len()).sum();
    let calls: usize = outcomes.iter().map(|o| o.denoiser_calls).sum();
    Cell {
        delay: pcfg.delay,
        seed,
        axis: None,
        axis_value: None,
        sampling_steps: pcfg.n_sampling_steps,
        candidates: pcfg.n_candidates,
        temperature: pcfg.temperature,
        mean_return: crate::stats::mean(&returns),
        returns,
        denoiser_calls_per_step: calls.checked_div(decisions).unwrap_or(0),
    }
}

fn reference_policy(cfg: &ExperimentConfig) -> PolicyTag {
    match cfg.policy() {
        PolicyTag::Random => PolicyTag::default_for(cfg.env_id),
        p => p,
    }
}

pub fn reference_stage(cfg: &ExperimentConfig, delay: usize, seed: u64) -> Result<Reference> {
    let env = env_of(cfg);
    let seeds = eval_seeds(cfg, seed);
    let tag = reference_policy(cfg);
    let comp = controller_returns(&env, delay, tag, ControllerMode::Compensating, &seeds)?;
    let naive = controller_returns(&env, delay, tag, ControllerMode::Naive, &seeds)?;
    Ok(Reference { delay, seed, compensating_mean: crate::stats::mean(&comp), naive_mean: crate::stats::mean(&naive) })
}

fn prepare_out_dir(cfg: &ExperimentConfig) -> Result<(PathBuf, String)> {
    let out = PathBuf::from(&cfg.run_out_dir);
    std::fs::create_dir_all(&out)?;
    let text = cfg.resolved_text();
    container::write_atomic(&out.join("config.resolved"), text.as_bytes())?;
    Ok((out, container::sha256_hex(text.as_bytes())))
}

fn run_pipeline(cfg: &ExperimentConfig, name: &str, tier: Tier) -> Result<Artifacts> {
    let (out, config_hash) = prepare_out_dir(cfg).stage("setup")?;
    let (episodes, norm, dataset_hash) = dataset_stage(cfg, tier, &out).stage("dataset")?;
    let n_buffer: usize = episodes.iter().map(EpisodeRecord::steps).sum();
    let episodes = fraction_filter(&episodes, cfg.data_fraction).stage("dataset")?;
    // Normalize with the statistics of the data actually trained on.
    let norm = if cfg.data_fraction < 1.0 { normalizer_fit(&episodes).stage("dataset")? } else { norm };
    let mut metrics = Metrics::new(
        name,
        Provenance {
            code_version: env!("CARGO_PKG_VERSION").into(),
            config_hash,
            dataset_hash,
            collector: cfg.policy().to_string(),
            tier: tier.to_string(),
            ..Provenance::default()
        },
    );
    metrics.notes.insert("buffer_transitions".into(), n_buffer.into());
    metrics.notes.insert("training_episodes".into(), episodes.len().into());
    metrics.notes.insert("data_fraction".into(), cfg.data_fraction.into());
    let env = env_of(cfg);
    let mut timing = Timing::default();
    for &seed in &cfg.run_seeds {
        let value = train_value_stage(cfg, &episodes, &norm, seed).stage("train-value")?;
        let vpath = value_path(&out, seed);
        let vhash = value.save(&vpath).stage("train-value")?;
        metrics.provenance.model_hashes.insert(file_name(&vpath), vhash);
        for &delay in &cfg.eval_delays {
            let model = train_planner_stage(cfg, &episodes, &norm, delay, seed).stage("train-planner")?;
            let ppath = planner_path(&out, delay, seed);
            let phash = save_planner(&ppath, &model, &norm, delay, cfg.planner_horizon, cfg).stage("train-planner")?;
            metrics.provenance.model_hashes.insert(file_name(&ppath), phash);
            let pcfg = cfg.planner(delay);
            let planner = Planner::new(model, value.clone(), norm.clone(), pcfg.clone()).stage("eval")?;
            let outcomes = evaluate(&env, &planner, &eval_seeds(cfg, seed), cfg.run_workers).stage("eval")?;
            for (i, o) in outcomes.iter().enumerate() {
                timing.rows.push((seed, delay, i, o.latencies.clone()));
            }
            metrics.cells.push(cell_from(&outcomes, &pcfg, seed));
            metrics.references.push(reference_stage(cfg, delay, seed).stage("eval")?);
            log::info!("{name}: delay {delay} seed {seed} mean return {:.3}", metrics.cells.last().unwrap().mean_return);
        }
    }
    metrics.write(&out).stage("metrics")?;
    timing.write(&out).stage("metrics")?;
    Ok(Artifacts { out_dir: out, metrics, timing })
}

fn file_name(p: &Path) -> String {
    p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Collect (or load) the configured tier, fit the value model and one planner
/// per delay and seed, evaluate and write metrics.
pub fn cmd_offline_pipeline(cfg: &ExperimentConfig) -> Result<Artifacts> {
    run_pipeline(cfg, "offline", cfg.data_tier)
}

/// Like the offline pipeline but the data come from an annealed-noise
/// collector, optionally keeping only the most recent `data.fraction`.
pub fn cmd_online_pipeline(cfg: &ExperimentConfig) -> Result<Artifacts> {
    run_pipeline(cfg, "online", Tier::Replay)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    DenoiseSteps,
    Candidates,
    Delay,
    Temperature,
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "denoise_steps" => Ok(Self::DenoiseSteps),
            "candidates" => Ok(Self::Candidates),
            "delay" => Ok(Self::Delay),
            "temperature" => Ok(Self::Temperature),
            _ => Err(Error::Config(format!("unknown sweep axis '{s}'"))),
        }
    }
}

impl std::fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::DenoiseSteps => "denoise_steps",
            Self::Candidates => "candidates",
            Self::Delay => "delay",
            Self::Temperature => "temperature",
        })
    }
}

/// Evaluation-only grid over one planner setting, reading models from
/// `run.out_dir`. Writes `sweep_<axis>.json` and `.csv`.
pub fn cmd_sweep(cfg: &ExperimentConfig, axis: SweepAxis, values: &[f64]) -> Result<Metrics> {
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    let dir = PathBuf::from(&cfg.run_out_dir);
    let env = env_of(cfg);
    let mut metrics = Metrics::new(
        &format!("sweep_{axis}"),
        Provenance {
            code_version: env!("CARGO_PKG_VERSION").into(),
            config_hash: container::sha256_hex(cfg.resolved_text().as_bytes()),
            collector: cfg.policy().to_string(),
            ..Provenance::default()
        },
    );
    let base_delay = cfg.eval_delays[0];
    let mut timing = Timing::default();
    for &seed in &cfg.run_seeds {
        for &v in values {
            let delay = if axis == SweepAxis::Delay { as_count(v, "delay")? } else { base_delay };
            let (mut planner, phash, vhash) =
                load_planner(&planner_path(&dir, delay, seed), &value_path(&dir, seed), cfg).stage("load")?;
            metrics.provenance.model_hashes.insert(file_name(&planner_path(&dir, delay, seed)), phash);
            metrics.provenance.model_hashes.insert(file_name(&value_path(&dir, seed)), vhash);
            match axis {
                SweepAxis::DenoiseSteps => planner.config.n_sampling_steps = as_count(v, "denoise_steps")?,
                SweepAxis::Candidates => planner.config.n_candidates = as_count(v, "candidates")?,
                SweepAxis::Temperature => planner.config.temperature = v,
                SweepAxis::Delay => {}
            }
            planner.config.validate()?;
            let outcomes = evaluate(&env, &planner, &eval_seeds(cfg, seed), cfg.run_workers).stage("eval")?;
            for (i, o) in outcomes.iter().enumerate() {
                timing.rows.push((seed, delay, i, o.latencies.clone()));
            }
            let mut cell = cell_from(&outcomes, &planner.config, seed);
            cell.axis = Some(axis.to_string());
            cell.axis_value = Some(v);
            metrics.cells.push(cell);
        }
    }
    let stem = format!("sweep_{axis}");
    container::write_atomic(&dir.join(format!("{stem}.json")), metrics.to_json()?.as_bytes())?;
    container::write_atomic(&dir.join(format!("{stem}.csv")), metrics.to_csv().as_bytes())?;
    container::write_atomic(&dir.join(format!("timing_{stem}.csv")), timing.to_csv().as_bytes())?;
    Ok(metrics)
}

fn as_count(v: f64, what: &str) -> Result<usize> {
    if v >= 0.0 && v.fract() == 0.0 {
        Ok(v as usize)
    } else {
        Err(Error::Config(format!("{what} values must be whole numbers, got {v}")))
    }
}

/// One row of the compounding-error curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub t: usize,
    pub mae_autoregressive: f64,
    pub mae_diffusion: f64,
}

pub fn curve_csv(rows: &[CurveRow]) -> String {
    let mut s = String::from("t,mae_autoregressive,mae_diffusion\n");
    for r in rows {
        s.push_str(&format!("{},{},{}\n", r.t, r.mae_autoregressive, r.mae_diffusion));
    }
    s
}

/// Open-loop error of an autoregressive dynamics model against joint
/// generation conditioned on the first state and every action. The last
/// tenth of the episodes is held out for the curves.
pub fn cmd_compound(
    cfg: &ExperimentConfig,
    episodes: &[EpisodeRecord],
    norm: &Normalizer,
    horizon: usize,
    max_starts: usize,
) -> Result<Vec<CurveRow>> {
    let n_test = (episodes.len() / 10).max(1);
    if episodes.len() <= n_test {
        return Err(Error::Config("compounding study needs at least two episodes".into()));
    }
    let (train, test) = episodes.split_at(episodes.len() - n_test);
    let seed = cfg.run_seeds[0];
    let (dyn_model, report) = train_dynamics(train, norm, &cfg.dynamics(rng::child_seed(seed, 7))).stage("train-dynamics")?;
    log::info!("dynamics: train mse {:.3e} holdout mse {:.3e}", report.train_loss, report.holdout_loss);

    let rows = horizon + 1;
    let windows = build_windows(train, 0, rows, norm, cfg.value_gamma).stage("train-planner")?;
    let first = windows.first().ok_or_else(|| Error::Config("episodes are shorter than the horizon".into()))?;
    let sd = norm.state_dim();
    let dcfg = denoiser_config(cfg, rows, first.row_dim)?;
    // Plain likelihood training: value weighting would bias state prediction.
    let tcfg = DiffusionTrainConfig { weight_factor: 0.0, ..cfg.diffusion_train(rng::child_seed(seed, 8)) };
    let model =
        train_diffusion(&windows, state_prediction_mask(rows, sd, first.row_dim - sd), dcfg, &tcfg).stage("train-planner")?;

    let all = curve_starts(test, horizon, 1);
    let stride = all.len().div_ceil(max_starts.max(1)).max(1);
    let starts: Vec<_> = all.into_iter().step_by(stride).collect();
    if starts.is_empty() {
        return Err(Error::Config("held-out episodes are shorter than the horizon".into()));
    }
    let ar = compounding_curve(&dyn_model, test, &starts, horizon).stage("compound")?;
    let df = diffusion_curve(&model, norm, test, &starts, horizon, cfg.diffusion_sampling_steps, 0.0, rng::child_seed(seed, 9))
        .stage("compound")?;
    Ok((0..horizon).map(|i| CurveRow { t: i + 1, mae_autoregressive: ar[i], mae_diffusion: df[i] }).collect())
}
