use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use said::datagen::{collect_dataset, load_dataset, normalizer_fit, save_dataset, CollectConfig, PolicyTag, Tier};
use said::envs::{Env, EnvId};
use said::error::{Error, StageContext};
use said::experiment::{self, ExperimentConfig, Metrics, SweepAxis};
use said::planner::rollout_episode;
use said::stats::{latency_report, mann_whitney_u, relative_std, Alternative};

#[derive(Parser)]
#[command(name = "said", version, about = "Delay-aware diffusion planning experiments")]
struct Cli {
    /// Flat `section.key = value` config file; SAID_SECTION__KEY variables override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Extra `key=value` overrides applied last.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Evaluation worker threads.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Roll out a scripted collector and write a dataset file.
    Collect(CollectArgs),
    /// Print a dataset header summary.
    Inspect {
        #[arg(long = "in")]
        input: PathBuf,
    },
    /// Fit the IQL value model on a dataset.
    TrainValue(TrainValueArgs),
    /// Fit the value-weighted diffusion planner for one delay.
    TrainPlanner(TrainPlannerArgs),
    /// Closed-loop evaluation of a trained planner.
    Eval(EvalArgs),
    /// Evaluation-only grid over one planner setting.
    Sweep {
        #[arg(long)]
        axis: SweepAxis,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
    },
    /// Open-loop error of a one-step model against joint generation.
    Compound(CompoundArgs),
    /// Compare seed variance of two metrics files.
    Stats(StatsArgs),
    /// Time planning decisions over several sampling-step counts.
    BenchLatency(BenchArgs),
    /// Collect, train and evaluate on a fixed dataset tier.
    OfflinePipeline,
    /// Collect with an annealed-noise policy, optionally keep the newest fraction, then train and evaluate.
    OnlinePipeline,
}

#[derive(Args)]
struct CollectArgs {
    #[arg(long)]
    env: Option<EnvId>,
    #[arg(long)]
    delay: Option<usize>,
    #[arg(long)]
    tier: Option<Tier>,
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long)]
    policy: Option<PolicyTag>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainValueArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainPlannerArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    delay: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    value: PathBuf,
    #[arg(long)]
    env: Option<EnvId>,
    /// Must match the delay the planner was trained for.
    #[arg(long)]
    delay: Option<usize>,
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long)]
    candidates: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// JSON-lines file with one record per environment step.
    #[arg(long)]
    trace_out: Option<PathBuf>,
    /// Directory for metrics.json, metrics.csv and timing.csv.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CompoundArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, default_value_t = 32)]
    horizon: usize,
    /// Upper bound on held-out start states.
    #[arg(long, default_value_t = 200)]
    starts: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct StatsArgs {
    #[arg(long, num_args = 2, required = true)]
    runs: Vec<PathBuf>,
    #[arg(long, default_value = "mwu")]
    test: String,
    #[arg(long, default_value = "greater")]
    alternative: Alternative,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    value: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "2,5,10,20")]
    steps: Vec<usize>,
    #[arg(long)]
    candidates: Option<usize>,
    /// Episodes per setting.
    #[arg(long, default_value_t = 2)]
    episodes: usize,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let config = e.downcast_ref::<Error>().is_some_and(Error::is_config);
            ExitCode::from(if config { 2 } else { 3 })
        }
    }
}

fn load_config(cli: &Cli) -> anyhow::Result<ExperimentConfig> {
    if let Some(p) = &cli.config {
        if !p.is_file() {
            return Err(Error::Config(format!("config file '{}' not found", p.display())).into());
        }
    }
    let mut cfg = ExperimentConfig::load(cli.config.as_deref())?;
    for kv in &cli.overrides {
        let (k, v) = kv.split_once('=').ok_or_else(|| Error::Config(format!("override '{kv}' is not KEY=VALUE")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(w) = cli.workers {
        cfg.set("run.workers", &w.to_string())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn require_file(p: &Path, what: &str) -> Result<(), Error> {
    if p.is_file() {
        Ok(())
    } else {
        Err(Error::Config(format!("{what} '{}' not found", p.display())))
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut cfg = load_config(&cli)?;
    match cli.command {
        Command::Collect(a) => {
            let env_id = a.env.unwrap_or(cfg.env_id);
            let policy = a.policy.unwrap_or(if env_id == cfg.env_id { cfg.policy() } else { PolicyTag::default_for(env_id) });
            let eps = collect_dataset(&CollectConfig {
                env_id,
                horizon: cfg.env_horizon,
                delay: a.delay.unwrap_or(cfg.env_delay_steps),
                policy,
                tier: a.tier.unwrap_or(cfg.data_tier),
                n_episodes: a.episodes.unwrap_or(cfg.data_episodes),
                seed: a.seed.unwrap_or(cfg.data_seed),
            })
            .stage("collect")?;
            let norm = normalizer_fit(&eps).stage("collect")?;
            let hash = save_dataset(&a.out, &eps, &norm).stage("collect")?;
            println!("{hash}  {}", a.out.display());
        }
        Command::Inspect { input } => {
            require_file(&input, "dataset")?;
            let f = load_dataset(&input).stage("inspect")?;
            let steps: Vec<usize> = f.episodes.iter().map(|e| e.steps()).collect();
            let returns: Vec<f64> = f.episodes.iter().map(|e| e.rewards.iter().sum()).collect();
            let summary = serde_json::json!({
                "env_id": f.env_id.map(|e| e.to_string()),
                "state_dim": f.state_dim,
                "action_dim": f.action_dim,
                "delay_steps": f.delay_steps,
                "episodes": f.episodes.len(),
                "transitions": steps.iter().sum::<usize>(),
                "terminated": f.episodes.iter().filter(|e| e.terminated).count(),
                "mean_return": said::stats::mean(&returns),
                "normalizer": f.normalizer,
                "sha256": f.digest,
            });
            println!("{}", serde_json::to_string_pretty(&summary)?);
        }
        Command::TrainValue(a) => {
            require_file(&a.dataset, "dataset")?;
            let f = load_dataset(&a.dataset).stage("load")?;
            let model = experiment::train_value_stage(&cfg, &f.episodes, &f.normalizer, a.seed.unwrap_or(cfg.run_seeds[0]))
                .stage("train-value")?;
            let hash = model.save(&a.out).stage("train-value")?;
            println!("{hash}  {}", a.out.display());
        }
        Command::TrainPlanner(a) => {
            require_file(&a.dataset, "dataset")?;
            let f = load_dataset(&a.dataset).stage("load")?;
            let delay = a.delay.unwrap_or(f.delay_steps);
            if let Some(w) = f.delay_warning(delay) {
                log::warn!("{w}");
            }
            let seed = a.seed.unwrap_or(cfg.run_seeds[0]);
            let model = experiment::train_planner_stage(&cfg, &f.episodes, &f.normalizer, delay, seed).stage("train-planner")?;
            let hash = experiment::save_planner(&a.out, &model, &f.normalizer, delay, cfg.planner_horizon, &cfg)
                .stage("train-planner")?;
            println!("{hash}  {}", a.out.display());
        }
        Command::Eval(a) => eval(&mut cfg, a)?,
        Command::Sweep { axis, values } => {
            let m = experiment::cmd_sweep(&cfg, axis, &values)?;
            for c in &m.cells {
                println!("{axis}={} seed={} mean_return={:.4}", c.axis_value.unwrap_or_default(), c.seed, c.mean_return);
            }
        }
        Command::Compound(a) => {
            require_file(&a.dataset, "dataset")?;
            let f = load_dataset(&a.dataset).stage("load")?;
            let rows = experiment::cmd_compound(&cfg, &f.episodes, &f.normalizer, a.horizon, a.starts)?;
            said::container::write_atomic(&a.out, experiment::curve_csv(&rows).as_bytes())?;
            if let (Some(first), Some(last)) = (rows.first(), rows.last()) {
                println!(
                    "autoregressive mae {:.4} -> {:.4}; diffusion mae {:.4} -> {:.4}",
                    first.mae_autoregressive, last.mae_autoregressive, first.mae_diffusion, last.mae_diffusion
                );
            }
        }
        Command::Stats(a) => stats(a)?,
        Command::BenchLatency(a) => bench(&cfg, a)?,
        Command::OfflinePipeline => report(&experiment::cmd_offline_pipeline(&cfg)?),
        Command::OnlinePipeline => report(&experiment::cmd_online_pipeline(&cfg)?),
    }
    Ok(())
}

fn eval(cfg: &mut ExperimentConfig, a: EvalArgs) -> anyhow::Result<()> {
    require_file(&a.model, "planner checkpoint")?;
    require_file(&a.value, "value checkpoint")?;
    if let Some(e) = a.env {
        cfg.env_id = e;
    }
    if let Some(n) = a.episodes {
        cfg.eval_episodes = n;
    }
    if let Some(n) = a.candidates {
        cfg.planner_candidates = n;
    }
    if let Some(n) = a.steps {
        cfg.diffusion_sampling_steps = n;
    }
    if let Some(t) = a.temperature {
        cfg.diffusion_temperature = t;
    }
    cfg.validate()?;
    let (planner, phash, vhash) = experiment::load_planner(&a.model, &a.value, cfg).stage("load")?;
    if let Some(d) = a.delay {
        if d != planner.config.delay {
            bail!(Error::Config(format!("planner was trained for delay {}, not {d}", planner.config.delay)));
        }
    }
    let env = Env::with_horizon(cfg.env_id, cfg.env_horizon);
    if env.spec.state_dim != planner.normalizer.state_dim() {
        bail!(Error::Config(format!("planner does not match environment '{}'", cfg.env_id)));
    }
    let seed = a.seed.unwrap_or(cfg.run_seeds[0]);
    let seeds = experiment::eval_seeds(cfg, seed);
    let outcomes = experiment::evaluate(&env, &planner, &seeds, cfg.run_workers).stage("eval")?;
    if let Some(path) = &a.trace_out {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path).with_context(|| format!("creating {}", path.display()))?);
        for (ep, o) in outcomes.iter().enumerate() {
            for r in &o.trace {
                let mut v = serde_json::to_value(r)?;
                v["episode"] = ep.into();
                writeln!(w, "{}", serde_json::to_string(&v)?)?;
            }
        }
        w.flush()?;
    }
    let returns: Vec<f64> = outcomes.iter().map(|o| o.episode_return).collect();
    let lat: Vec<f64> = outcomes.iter().flat_map(|o| o.latencies.iter().copied()).collect();
    let rep = latency_report(&lat, planner.config.n_sampling_steps, planner.config.n_candidates)?;
    println!(
        "delay={} episodes={} mean_return={:.4} latency_mean={:.4}s p95={:.4}s calls/step={}",
        planner.config.delay,
        returns.len(),
        said::stats::mean(&returns),
        rep.mean,
        rep.p95,
        rep.denoiser_calls_per_step
    );
    if let Some(dir) = &a.out {
        std::fs::create_dir_all(dir)?;
        let mut m = Metrics::new(
            "eval",
            experiment::Provenance {
                code_version: env!("CARGO_PKG_VERSION").into(),
                config_hash: said::container::sha256_hex(cfg.resolved_text().as_bytes()),
                model_hashes: BTreeMap::from([(name(&a.model), phash), (name(&a.value), vhash)]),
                ..Default::default()
            },
        );
        let calls: usize = outcomes.iter().map(|o| o.denoiser_calls).sum();
        m.cells.push(experiment::Cell {
            delay: planner.config.delay,
            seed,
            axis: None,
            axis_value: None,
            sampling_steps: planner.config.n_sampling_steps,
            candidates: planner.config.n_candidates,
            temperature: planner.config.temperature,
            mean_return: said::stats::mean(&returns),
            returns,
            denoiser_calls_per_step: calls / lat.len().max(1),
        });
        m.write(dir)?;
        let mut t = experiment::Timing::default();
        for (i, o) in outcomes.iter().enumerate() {
            t.rows.push((seed, planner.config.delay, i, o.latencies.clone()));
        }
        t.write(dir)?;
    }
    Ok(())
}

fn name(p: &Path) -> String {
    p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Relative std of the per-seed mean return, one value per delay.
fn seed_variances(m: &Metrics) -> anyhow::Result<Vec<f64>> {
    let mut by_delay: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for c in m.cells.iter().filter(|c| c.axis.is_none()) {
        by_delay.entry(c.delay).or_default().push(c.mean_return);
    }
    let mut out = Vec::new();
    for (d, v) in by_delay {
        if v.len() < 2 {
            bail!(Error::Config(format!("delay {d} has {} seed(s); at least two are needed", v.len())));
        }
        out.push(relative_std(&v)?);
    }
    Ok(out)
}

fn stats(a: StatsArgs) -> anyhow::Result<()> {
    if a.test != "mwu" {
        bail!(Error::Config(format!("unknown test '{}'; only 'mwu' is available", a.test)));
    }
    for p in &a.runs {
        require_file(p, "metrics file")?;
    }
    let x = seed_variances(&Metrics::read(&a.runs[0])?)?;
    let y = seed_variances(&Metrics::read(&a.runs[1])?)?;
    let r = mann_whitney_u(&x, &y, a.alternative)?;
    let out = serde_json::json!({
        "test": "mann_whitney_u",
        "alternative": a.alternative.to_string(),
        "relative_std_a": x,
        "relative_std_b": y,
        "u": r.u,
        "p_value": r.p_value,
        "exact": r.exact,
    });
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(())
}

fn bench(cfg: &ExperimentConfig, a: BenchArgs) -> anyhow::Result<()> {
    require_file(&a.model, "planner checkpoint")?;
    require_file(&a.value, "value checkpoint")?;
    let (mut planner, _, _) = experiment::load_planner(&a.model, &a.value, cfg).stage("load")?;
    if let Some(n) = a.candidates {
        planner.config.n_candidates = n;
    }
    let env = Env::with_horizon(cfg.env_id, cfg.env_horizon);
    let seeds = experiment::eval_seeds(cfg, cfg.run_seeds[0]);
    println!("steps,candidates,decisions,mean_s,p50_s,p95_s,denoiser_calls_per_step");
    for &s in &a.steps {
        planner.config.n_sampling_steps = s;
        planner.config.validate()?;
        let mut lat = Vec::new();
        for &seed in seeds.iter().take(a.episodes.max(1)) {
            lat.extend(rollout_episode(&env, &planner, seed).stage("bench")?.latencies);
        }
        let r = latency_report(&lat, s, planner.config.n_candidates)?;
        println!(
            "{s},{},{},{},{},{},{}",
            planner.config.n_candidates, r.samples, r.mean, r.p50, r.p95, r.denoiser_calls_per_step
        );
    }
    Ok(())
}

fn report(a: &experiment::Artifacts) {
    for c in &a.metrics.cells {
        println!("delay={} seed={} mean_return={:.4}", c.delay, c.seed, c.mean_return);
    }
    for r in &a.metrics.references {
        println!("delay={} seed={} compensating={:.4} naive={:.4}", r.delay, r.seed, r.compensating_mean, r.naive_mean);
    }
    println!("wrote {}", a.out_dir.display());
}
