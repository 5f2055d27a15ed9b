//! Experiment runner: `train`, `evaluate`, `compare` and `drift-report`.
//!
//! Every subcommand reads a JSON experiment file. Outputs are written under
//! `--out-dir` and are byte-identical for identical config and seed; wall-clock
//! timestamps only go to the `*.meta.json` sidecars.
//!
//! Exit codes: 0 success, 1 configuration or input error, 2 instability.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::approx::WeightVector;
use crate::error::{Error, Result};
use crate::lyapunov::{fit_drift_bound, lyapunov_value, LyapunovSpec, DEFAULT_NU};
use crate::metrics::{evaluate_policy, evaluate_replications, normalize_report, EvalOutcome, EvalReport, DEFAULT_WARMUP_FRACTION};
use crate::nn_bench::{train_nn, MlpParams, NnParams, NnTrainReport};
use crate::policy::{PolicySpec, Router};
use crate::queue_sim::{QueueState, SystemConfig};
use crate::sgs::{train, LearnerParams, LearnerState, TrainOptions, TrainReport, Trainer, TrainingLog, Verdict};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_UNSTABLE: i32 = 2;

const LEARNING_CURVE_START: u64 = 1000;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub name: Option<String>,
    pub system: SystemConfig,
    pub policy: PolicySpec,
    #[serde(default)]
    pub learner: Option<LearnerParams>,
    #[serde(default)]
    pub nn: Option<NnParams>,
    pub run: RunSettings,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSettings {
    #[serde(default)]
    pub epochs: u64,
    #[serde(default = "default_duration")]
    pub duration: f64,
    /// Defaults to 10% of `duration`.
    #[serde(default)]
    pub warmup: Option<f64>,
    pub seed: u64,
    #[serde(default = "default_log_every")]
    pub log_every: u64,
    #[serde(default = "default_safety_cap")]
    pub safety_cap: u32,
    #[serde(default)]
    pub initial_state: Option<QueueState>,
    #[serde(default = "default_replications")]
    pub replications: u32,
}

fn default_duration() -> f64 {
    1e5
}

fn default_log_every() -> u64 {
    1000
}

fn default_safety_cap() -> u32 {
    10_000
}

fn default_replications() -> u32 {
    1
}

impl ExperimentConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.system.server_count();
        self.policy.validate(n)?;
        if let Some(learner) = &self.learner {
            if learner.initial_weights.len() != n {
                return Err(Error::InvalidConfig(format!(
                    "learner.initial_weights has length {}, expected {n}",
                    learner.initial_weights.len()
                )));
            }
            LearnerState::new(learner)?;
        }
        if matches!(self.policy, PolicySpec::WsqSoftmax { weights: None, .. }) && self.learner.is_none() {
            return Err(Error::InvalidConfig(
                "wsq_softmax without weights needs a learner section".into(),
            ));
        }
        if let Some(x) = &self.run.initial_state {
            if x.len() != n {
                return Err(Error::InvalidConfig("run.initial_state has the wrong dimension".into()));
            }
        }
        if self.run.replications == 0 {
            return Err(Error::InvalidConfig("run.replications must be at least 1".into()));
        }
        let warmup = self.warmup();
        if !(warmup >= 0.0 && self.run.duration > warmup && self.run.duration.is_finite()) {
            return Err(Error::EmptyWindow {
                duration: self.run.duration,
                warmup,
            });
        }
        Ok(())
    }

    pub fn warmup(&self) -> f64 {
        self.run.warmup.unwrap_or(DEFAULT_WARMUP_FRACTION * self.run.duration)
    }

    /// `name`, or the file stem of `path`.
    pub fn id(&self, path: &Path) -> String {
        self.name.clone().unwrap_or_else(|| {
            path.file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "experiment".into())
        })
    }

    fn nn_params(&self) -> NnParams {
        self.nn.unwrap_or_default()
    }
}

/// Result of training whichever learner the policy asks for.
#[derive(Debug, Clone)]
pub enum Trained {
    Sgs(TrainReport),
    Nn(NnTrainReport),
}

impl Trained {
    pub fn verdict(&self) -> Verdict {
        match self {
            Trained::Sgs(r) => r.verdict,
            Trained::Nn(r) => r.verdict,
        }
    }

    fn router(&self, policy: &PolicySpec) -> Router {
        let temperature = policy.temperature().unwrap_or(1.0);
        match self {
            Trained::Sgs(r) => Router::WsqSoftmax {
                weights: r.learner.weights.clone(),
                temperature,
            },
            Trained::Nn(r) => Router::Nn {
                mlp: r.params.clone(),
                temperature,
            },
        }
    }
}

pub fn train_experiment(cfg: &ExperimentConfig, seed: u64, epochs: u64) -> Result<Trained> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match &cfg.policy {
        PolicySpec::WsqSoftmax { temperature, .. } => {
            let params = cfg
                .learner
                .as_ref()
                .ok_or_else(|| Error::InvalidConfig("training wsq_softmax needs a learner section".into()))?;
            let opts = TrainOptions {
                epochs,
                log_every: cfg.run.log_every,
                safety_cap: cfg.run.safety_cap,
                initial_state: cfg.run.initial_state.clone(),
            };
            Ok(Trained::Sgs(train(&cfg.system, LearnerState::new(params)?, *temperature, &opts, &mut rng)?))
        }
        PolicySpec::Nn { temperature } => Ok(Trained::Nn(train_nn(
            &cfg.system,
            &cfg.nn_params(),
            *temperature,
            epochs,
            cfg.run.safety_cap,
            &mut rng,
        )?)),
        other => Err(Error::InvalidConfig(format!("policy {other:?} is not trainable"))),
    }
}

/// Seed of the `r`-th evaluation replication.
pub fn eval_seed(seed: u64, r: u32) -> u64 {
    seed.wrapping_add(1 + u64::from(r))
}

/// Where policy parameters come from when they are not in the config.
#[derive(Debug, Default, Clone)]
pub struct Overrides {
    pub weights: Option<WeightVector>,
    pub checkpoint: Option<MlpParams>,
}

/// A ready router, training first if the config leaves parameters open.
pub fn resolve_router(cfg: &ExperimentConfig, seed: u64, epochs: u64, over: &Overrides) -> Result<(Router, Option<Trained>)> {
    let router = match &cfg.policy {
        PolicySpec::WsqSoftmax { temperature, weights } => match over.weights.clone().or_else(|| weights.clone()) {
            Some(weights) => Router::WsqSoftmax {
                weights,
                temperature: *temperature,
            },
            None => {
                let trained = train_experiment(cfg, seed, epochs)?;
                return Ok((trained.router(&cfg.policy), Some(trained)));
            }
        },
        PolicySpec::WsqGreedy { weights } => Router::WsqGreedy {
            weights: over.weights.clone().unwrap_or_else(|| weights.clone()),
        },
        PolicySpec::Jsq { tie_break } => Router::Jsq(*tie_break),
        PolicySpec::Bernoulli { probabilities } => Router::Bernoulli(probabilities.clone()),
        PolicySpec::Nn { temperature } => match &over.checkpoint {
            Some(mlp) => Router::Nn {
                mlp: mlp.clone(),
                temperature: *temperature,
            },
            None => {
                let trained = train_experiment(cfg, seed, epochs)?;
                return Ok((trained.router(&cfg.policy), Some(trained)));
            }
        },
    };
    Ok((router, None))
}

/// Parses `ray:A..B`, `grid:A..B` or `list:x1,x2,…;y1,y2,…`.
pub fn parse_states(spec: &str, servers: usize) -> Result<Vec<QueueState>> {
    let spec = spec.trim();
    if spec.is_empty() {
        return Err(Error::EmptyStateSet);
    }
    let (kind, body) = spec
        .split_once(':')
        .ok_or_else(|| Error::InvalidConfig(format!("state spec `{spec}` needs a `ray:`, `grid:` or `list:` prefix")))?;
    let range = |body: &str| -> Result<(u32, u32)> {
        let (a, b) = body
            .split_once("..")
            .ok_or_else(|| Error::InvalidConfig(format!("expected A..B, got `{body}`")))?;
        let a = a.trim().parse().map_err(|_| Error::InvalidConfig(format!("bad bound `{a}`")))?;
        let b = b.trim().parse().map_err(|_| Error::InvalidConfig(format!("bad bound `{b}`")))?;
        Ok((a, b))
    };
    let states: Vec<QueueState> = match kind {
        "ray" => {
            let (a, b) = range(body)?;
            (a..=b).map(|m| QueueState::new(vec![m; servers])).collect()
        }
        "grid" => {
            let (a, b) = range(body)?;
            let mut out = vec![Vec::new()];
            for _ in 0..servers {
                out = out
                    .into_iter()
                    .flat_map(|prefix: Vec<u32>| {
                        (a..=b).map(move |v| {
                            let mut p = prefix.clone();
                            p.push(v);
                            p
                        })
                    })
                    .collect();
            }
            if a > b {
                out.clear();
            }
            out.into_iter().map(QueueState::new).collect()
        }
        "list" => body
            .split(';')
            .filter(|s| !s.trim().is_empty())
            .map(|s| {
                let v: Vec<u32> = s
                    .split(',')
                    .map(|t| t.trim().parse().map_err(|_| Error::InvalidConfig(format!("bad queue length `{t}`"))))
                    .collect::<Result<_>>()?;
                if v.len() != servers {
                    return Err(Error::InvalidConfig(format!("state `{s}` does not have {servers} entries")));
                }
                Ok(QueueState::new(v))
            })
            .collect::<Result<_>>()?,
        other => return Err(Error::InvalidConfig(format!("unknown state spec kind `{other}`"))),
    };
    if states.is_empty() {
        return Err(Error::EmptyStateSet);
    }
    Ok(states)
}

#[derive(Debug, Parser)]
#[command(name = "qroute", version, about = "Learned routing for parallel exponential servers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train the policy in a config and write its log and parameters.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<u64>,
        #[arg(long)]
        log_every: Option<u64>,
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
        /// Where to write the network parameters (NN policies).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Simulate a frozen policy and report system-time metrics.
    Evaluate {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        eval: EvalFlags,
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
        /// Weights JSON written by `train`.
        #[arg(long)]
        weights: Option<PathBuf>,
        /// Network checkpoint written by `train`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Evaluate several configs on common seeds and normalize to a baseline.
    Compare {
        #[arg(long = "config", required = true)]
        configs: Vec<PathBuf>,
        /// Id (config `name` or file stem) of the baseline policy.
        #[arg(long)]
        baseline: String,
        #[command(flatten)]
        eval: EvalFlags,
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
        /// Also evaluate SGS policies at geometrically spaced training epochs.
        #[arg(long)]
        learning_curve: bool,
    },
    /// Estimate Lyapunov drift over a state set and fit a linear bound.
    DriftReport {
        #[arg(long)]
        config: PathBuf,
        /// `ray:A..B`, `grid:A..B` or `list:1,2,3;4,5,6`.
        #[arg(long)]
        states: String,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<u64>,
        #[arg(long, default_value_t = 2000)]
        samples: u64,
        #[arg(long, value_enum, default_value_t = LyapunovKind::Quadratic)]
        lyapunov: LyapunovKind,
        #[arg(long, default_value_t = DEFAULT_NU)]
        nu: f64,
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
    },
}

#[derive(Debug, clap::Args)]
struct EvalFlags {
    #[arg(long)]
    seed: Option<u64>,
    /// Training epochs when the policy has to be learned first.
    #[arg(long)]
    epochs: Option<u64>,
    #[arg(long)]
    duration: Option<f64>,
    #[arg(long)]
    warmup: Option<f64>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum LyapunovKind {
    Quadratic,
    Exponential,
}

enum Failure {
    Config(Error),
    Unstable(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Config(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Config(e.into())
    }
}

type CliResult = std::result::Result<(), Failure>;

/// Parses `args` (including the program name) and runs the subcommand.
/// Returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let outcome = match cli.command {
        Command::Train {
            config,
            seed,
            epochs,
            log_every,
            out_dir,
            checkpoint,
        } => cmd_train(&config, seed, epochs, log_every, &out_dir, checkpoint.as_deref()),
        Command::Evaluate {
            config,
            eval,
            out_dir,
            weights,
            checkpoint,
        } => cmd_evaluate(&config, &eval, &out_dir, weights.as_deref(), checkpoint.as_deref()),
        Command::Compare {
            configs,
            baseline,
            eval,
            out_dir,
            learning_curve,
        } => cmd_compare(&configs, &baseline, &eval, &out_dir, learning_curve),
        Command::DriftReport {
            config,
            states,
            seed,
            epochs,
            samples,
            lyapunov,
            nu,
            weights,
            out_dir,
        } => cmd_drift_report(&config, &states, seed, epochs, samples, lyapunov, nu, weights.as_deref(), &out_dir),
    };
    match outcome {
        Ok(()) => EXIT_OK,
        Err(Failure::Config(e)) => {
            eprintln!("error: {e}");
            EXIT_CONFIG
        }
        Err(Failure::Unstable(msg)) => {
            eprintln!("verdict: unstable ({msg})");
            EXIT_UNSTABLE
        }
    }
}

fn write_meta(out_dir: &Path, stem: &str, command: &str, config: &[&Path], seed: u64) -> Result<()> {
    let created = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let meta = json!({
        "command": command,
        "config": config.iter().map(|p| p.display().to_string()).collect::<Vec<_>>(),
        "seed": seed,
        "created_unix": created,
        "version": env!("CARGO_PKG_VERSION"),
    });
    fs::write(out_dir.join(format!("{stem}.meta.json")), serde_json::to_string_pretty(&meta)? + "\n")?;
    Ok(())
}

/// Stdout that tolerates a closed pipe.
fn emit(text: &str) {
    let _ = std::io::stdout().write_all(text.as_bytes());
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

#[derive(Deserialize)]
struct WeightsFile {
    weights: WeightVector,
}

fn read_weights(path: &Path) -> Result<WeightVector> {
    let file: WeightsFile = serde_json::from_str(&fs::read_to_string(path)?)?;
    Ok(file.weights)
}

fn read_checkpoint(path: &Path) -> Result<MlpParams> {
    MlpParams::read_checkpoint(fs::File::open(path)?)
}

fn unstable_message(v: Verdict) -> Option<String> {
    match v {
        Verdict::Completed => None,
        Verdict::Unstable { epoch, max_queue } => Some(format!("queue reached {max_queue} at epoch {epoch}")),
    }
}

fn cmd_train(
    config: &Path,
    seed: Option<u64>,
    epochs: Option<u64>,
    log_every: Option<u64>,
    out_dir: &Path,
    checkpoint: Option<&Path>,
) -> CliResult {
    let mut cfg = ExperimentConfig::load(config)?;
    if let Some(every) = log_every {
        cfg.run.log_every = every;
    }
    let seed = seed.unwrap_or(cfg.run.seed);
    let epochs = epochs.unwrap_or(cfg.run.epochs);
    let id = cfg.id(config);
    fs::create_dir_all(out_dir)?;
    let trained = train_experiment(&cfg, seed, epochs)?;
    match &trained {
        Trained::Sgs(report) => {
            let n = cfg.system.server_count();
            let mut csv = Vec::new();
            report.log.write_csv(&mut csv, n)?;
            fs::write(out_dir.join(format!("{id}_train.csv")), csv)?;
            let mut jsonl = Vec::new();
            report.log.write_jsonl(&mut jsonl)?;
            fs::write(out_dir.join(format!("{id}_train.jsonl")), jsonl)?;
            let queue = report.log.time_average_queue_since(report.learner.epoch / 2);
            write_json(
                &out_dir.join(format!("{id}_weights.json")),
                &json!({
                    "weights": report.learner.weights,
                    "epochs": report.learner.epoch,
                    "accepted_steps": report.learner.schedule.accepted_count(),
                    "time_avg_queue_last_half": queue,
                    "result": report.verdict,
                }),
            )?;
            emit(&(format!("final weights: {:?}", report.learner.weights.as_slice()) + "\n"));
            match queue {
                Some(q) => println!("time-averaged total queue (last half): {q:.4}"),
                None => println!("time-averaged total queue (last half): n/a"),
            }
        }
        Trained::Nn(report) => {
            let path = checkpoint
                .map(Path::to_path_buf)
                .unwrap_or_else(|| out_dir.join(format!("{id}_mlp.bin")));
            report.params.write_checkpoint(fs::File::create(&path)?)?;
            write_json(
                &out_dir.join(format!("{id}_nn.json")),
                &json!({
                    "epochs": report.epochs,
                    "hidden": report.params.hidden(),
                    "mean_loss_tail": report.mean_loss_tail,
                    "input_scale": report.params.input_scale,
                    "result": report.verdict,
                }),
            )?;
            emit(&(format!("trained network for {} epochs, checkpoint {}", report.epochs, path.display()) + "\n"));
        }
    }
    write_meta(out_dir, &format!("{id}_train"), "train", &[config], seed)?;
    match unstable_message(trained.verdict()) {
        Some(msg) => Err(Failure::Unstable(msg)),
        None => Ok(()),
    }
}

struct Evaluated {
    outcomes: Vec<EvalOutcome>,
    seeds: Vec<u64>,
}

impl Evaluated {
    fn stable_reports(&self) -> std::result::Result<Vec<&EvalReport>, String> {
        self.outcomes
            .iter()
            .zip(&self.seeds)
            .map(|(o, s)| match o {
                EvalOutcome::Stable(r) => Ok(r),
                EvalOutcome::Unstable { time, max_queue } => {
                    Err(format!("seed {s}: queue reached {max_queue} at t = {time:.1}"))
                }
            })
            .collect()
    }
}

fn mean_and_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

fn evaluate_config(cfg: &ExperimentConfig, router: &Router, seed: u64) -> Result<Evaluated> {
    let seeds: Vec<u64> = (0..cfg.run.replications).map(|r| eval_seed(seed, r)).collect();
    let outcomes = evaluate_replications(router, &cfg.system, cfg.run.duration, cfg.warmup(), cfg.run.safety_cap, &seeds)?;
    Ok(Evaluated { outcomes, seeds })
}

fn apply_eval_flags(cfg: &mut ExperimentConfig, flags: &EvalFlags) -> Result<()> {
    if let Some(d) = flags.duration {
        cfg.run.duration = d;
        if flags.warmup.is_none() && cfg.run.warmup.is_some_and(|w| w >= d) {
            cfg.run.warmup = None;
        }
    }
    if let Some(w) = flags.warmup {
        cfg.run.warmup = Some(w);
    }
    cfg.validate()
}

const RESULTS_HEADER: &str =
    "id,seed,avg_system_time_per_job,avg_system_time_little,time_avg_total_queue,throughput,sim_duration,jobs_completed\n";

fn cmd_evaluate(
    config: &Path,
    flags: &EvalFlags,
    out_dir: &Path,
    weights: Option<&Path>,
    checkpoint: Option<&Path>,
) -> CliResult {
    let mut cfg = ExperimentConfig::load(config)?;
    apply_eval_flags(&mut cfg, flags)?;
    let seed = flags.seed.unwrap_or(cfg.run.seed);
    let epochs = flags.epochs.unwrap_or(cfg.run.epochs);
    let id = cfg.id(config);
    let over = Overrides {
        weights: weights.map(read_weights).transpose()?,
        checkpoint: checkpoint.map(read_checkpoint).transpose()?,
    };
    fs::create_dir_all(out_dir)?;
    let (router, trained) = resolve_router(&cfg, seed, epochs, &over)?;
    if let Some(msg) = trained.as_ref().and_then(|t| unstable_message(t.verdict())) {
        return Err(Failure::Unstable(format!("training: {msg}")));
    }
    let evaluated = evaluate_config(&cfg, &router, seed)?;

    let results_path = out_dir.join("results.csv");
    let mut rows = String::new();
    if !results_path.exists() {
        rows.push_str(RESULTS_HEADER);
    }
    for (o, s) in evaluated.outcomes.iter().zip(&evaluated.seeds) {
        if let EvalOutcome::Stable(r) = o {
            writeln!(
                rows,
                "{id},{s},{},{},{},{},{},{}",
                r.avg_system_time_per_job,
                r.avg_system_time_little,
                r.time_avg_total_queue,
                r.throughput,
                r.sim_duration,
                r.jobs_completed
            )
            .expect("writing to a String");
        }
    }
    fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&results_path)?
        .write_all(rows.as_bytes())?;

    let reports = evaluated.stable_reports();
    let summary = match &reports {
        Ok(reports) => {
            let times: Vec<f64> = reports.iter().map(|r| r.avg_system_time_per_job).collect();
            let (mean, se) = mean_and_se(&times);
            json!({"id": id, "mean_system_time": mean, "std_error": se, "replications": evaluated.outcomes})
        }
        Err(_) => json!({"id": id, "replications": evaluated.outcomes}),
    };
    write_json(&out_dir.join(format!("{id}_eval.json")), &summary)?;
    emit(&(serde_json::to_string_pretty(&summary).map_err(Error::from)? + "\n"));
    write_meta(out_dir, &format!("{id}_eval"), "evaluate", &[config], seed)?;
    reports.map(|_| ()).map_err(Failure::Unstable)
}

fn learning_curve(cfg: &ExperimentConfig, seed: u64, epochs: u64) -> Result<std::result::Result<Vec<(u64, f64)>, String>> {
    let (PolicySpec::WsqSoftmax { temperature, .. }, Some(params)) = (&cfg.policy, &cfg.learner) else {
        return Ok(Ok(Vec::new()));
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut trainer = Trainer::new(&cfg.system, LearnerState::new(params)?, *temperature, cfg.run.initial_state.clone(), &mut rng)?;
    let mut log = TrainingLog::default();
    let mut points = Vec::new();
    let mut done = 0;
    let mut next = LEARNING_CURVE_START.min(epochs);
    loop {
        if let Verdict::Unstable { epoch, max_queue } = trainer.run(next - done, cfg.run.log_every, cfg.run.safety_cap, &mut log, &mut rng) {
            return Ok(Err(format!("training: queue reached {max_queue} at epoch {epoch}")));
        }
        done = next;
        let router = Router::WsqSoftmax {
            weights: trainer.learner().weights.clone(),
            temperature: *temperature,
        };
        let mut eval_rng = ChaCha8Rng::seed_from_u64(eval_seed(seed, 0));
        match evaluate_policy(&router, &cfg.system, cfg.run.duration, cfg.warmup(), cfg.run.safety_cap, &mut eval_rng)? {
            EvalOutcome::Stable(r) => points.push((done, r.avg_system_time_per_job)),
            EvalOutcome::Unstable { .. } => points.push((done, f64::INFINITY)),
        }
        if done >= epochs {
            return Ok(Ok(points));
        }
        next = next.saturating_mul(10).min(epochs);
    }
}

fn cmd_compare(configs: &[PathBuf], baseline: &str, flags: &EvalFlags, out_dir: &Path, with_curve: bool) -> CliResult {
    let mut loaded: Vec<(String, ExperimentConfig)> = Vec::new();
    for path in configs {
        let mut cfg = ExperimentConfig::load(path)?;
        apply_eval_flags(&mut cfg, flags)?;
        let id = cfg.id(path);
        if loaded.iter().any(|(other, _)| *other == id) {
            continue;
        }
        if let Some((first, c)) = loaded.first() {
            if c.system != cfg.system {
                return Err(Error::InvalidConfig(format!("system of `{id}` differs from `{first}`")).into());
            }
        }
        loaded.push((id, cfg));
    }
    let seed = flags.seed.unwrap_or(loaded[0].1.run.seed);
    fs::create_dir_all(out_dir)?;

    let mut means = BTreeMap::new();
    let mut little = BTreeMap::new();
    for (id, cfg) in &loaded {
        let epochs = flags.epochs.unwrap_or(cfg.run.epochs);
        let (router, trained) = resolve_router(cfg, seed, epochs, &Overrides::default())?;
        if let Some(msg) = trained.as_ref().and_then(|t| unstable_message(t.verdict())) {
            return Err(Failure::Unstable(format!("{id} training: {msg}")));
        }
        let evaluated = evaluate_config(cfg, &router, seed)?;
        let reports = evaluated.stable_reports().map_err(|m| Failure::Unstable(format!("{id}: {m}")))?;
        let t: Vec<f64> = reports.iter().map(|r| r.avg_system_time_per_job).collect();
        let l: Vec<f64> = reports.iter().map(|r| r.avg_system_time_little).collect();
        let mut mean = (*reports[0]).clone();
        mean.avg_system_time_per_job = mean_and_se(&t).0;
        mean.avg_system_time_little = mean_and_se(&l).0;
        little.insert(id.clone(), mean.avg_system_time_little);
        means.insert(id.clone(), mean);
    }
    let ratios = normalize_report(&means, baseline)?;

    let mut csv = String::from("id,avg_system_time,avg_system_time_little,normalized\n");
    let mut table = format!("{:<24} {:>14} {:>14} {:>10}\n", "policy", "system time", "little", "ratio");
    for (id, r) in &means {
        writeln!(csv, "{id},{},{},{}", r.avg_system_time_per_job, little[id], ratios[id]).expect("writing to a String");
        writeln!(
            table,
            "{id:<24} {:>14.4} {:>14.4} {:>10.3}",
            r.avg_system_time_per_job, little[id], ratios[id]
        )
        .expect("writing to a String");
    }
    fs::write(out_dir.join("compare.csv"), &csv)?;
    fs::write(out_dir.join("compare.txt"), &table)?;
    emit(&table);

    if with_curve {
        let mut curve = String::from("id,epochs_trained,avg_system_time\n");
        for (id, cfg) in &loaded {
            if !matches!(cfg.policy, PolicySpec::WsqSoftmax { weights: None, .. }) {
                continue;
            }
            let epochs = flags.epochs.unwrap_or(cfg.run.epochs);
            let points = learning_curve(cfg, seed, epochs)?.map_err(Failure::Unstable)?;
            for (k, t) in points {
                writeln!(curve, "{id},{k},{t}").expect("writing to a String");
            }
        }
        fs::write(out_dir.join("learning_curve.csv"), curve)?;
    }
    let paths: Vec<&Path> = configs.iter().map(PathBuf::as_path).collect();
    write_meta(out_dir, "compare", "compare", &paths, seed)?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_drift_report(
    config: &Path,
    states: &str,
    seed: Option<u64>,
    epochs: Option<u64>,
    samples: u64,
    kind: LyapunovKind,
    nu: f64,
    weights: Option<&Path>,
    out_dir: &Path,
) -> CliResult {
    let cfg = ExperimentConfig::load(config)?;
    let seed = seed.unwrap_or(cfg.run.seed);
    let epochs = epochs.unwrap_or(cfg.run.epochs);
    let id = cfg.id(config);
    let n = cfg.system.server_count();
    let states = parse_states(states, n)?;
    if samples == 0 {
        return Err(Error::InvalidConfig("--samples must be at least 1".into()).into());
    }
    let over = Overrides {
        weights: weights.map(read_weights).transpose()?,
        checkpoint: None,
    };
    let (router, trained) = resolve_router(&cfg, seed, epochs, &over)?;
    if let Some(msg) = trained.as_ref().and_then(|t| unstable_message(t.verdict())) {
        return Err(Failure::Unstable(format!("training: {msg}")));
    }
    let lyap_weights = match &router {
        Router::WsqSoftmax { weights, .. } | Router::WsqGreedy { weights } => weights.clone(),
        _ => match &cfg.learner {
            Some(l) => WeightVector::new(l.initial_weights.clone())?,
            None => WeightVector::uniform(n, 1.0)?,
        },
    };
    let spec = match kind {
        LyapunovKind::Quadratic => LyapunovSpec::quadratic(lyap_weights),
        LyapunovKind::Exponential => LyapunovSpec::exponential(lyap_weights, nu)?,
    };
    fs::create_dir_all(out_dir)?;
    let fit = fit_drift_bound(&spec, &router, &cfg.system, &states, samples, seed)?;

    let mut csv = String::from("state,v,mean_drift,std_error\n");
    for e in &fit.estimates {
        let v = lyapunov_value(&spec, &e.state).linear();
        writeln!(csv, "{},{v},{},{}", e.state, e.mean_drift, e.std_error).expect("writing to a String");
    }
    fs::write(out_dir.join(format!("{id}_drift.csv")), csv)?;
    let summary = json!({
        "lyapunov": spec,
        "epsilon": fit.epsilon,
        "bound": fit.bound,
        "max_abs_residual": fit.max_abs_residual,
        "states": fit.estimates.len(),
        "samples": samples,
    });
    write_json(&out_dir.join(format!("{id}_drift_fit.json")), &summary)?;
    emit(&(format!("epsilon = {:.6}, bound = {:.6} over {} states", fit.epsilon, fit.bound, fit.estimates.len()) + "\n"));
    write_meta(out_dir, &format!("{id}_drift"), "drift-report", &[config], seed)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "system": {"arrival_rate": 2.0, "service_rates": [0.5, 2.5, 5.0]},
        "policy": {"kind": "jsq", "tie_break": "lowest_index"},
        "run": {"seed": 1}
    }"#;

    #[test]
    fn minimal_config_gets_defaults() {
        let cfg = ExperimentConfig::parse(MINIMAL).unwrap();
        assert_eq!(cfg.run.duration, 1e5);
        assert_eq!(cfg.warmup(), 1e4);
        assert_eq!(cfg.run.replications, 1);
        assert_eq!(cfg.id(Path::new("dir/jsq.config")), "jsq");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = MINIMAL.replace("\"seed\": 1", "\"seed\": 1, \"sede\": 2");
        assert!(ExperimentConfig::parse(&text).is_err());
        let text = MINIMAL.replace("\"run\"", "\"extra\": 0, \"run\"");
        assert!(ExperimentConfig::parse(&text).is_err());
    }

    #[test]
    fn module_invariants_checked_on_load() {
        let bad = MINIMAL.replace("[0.5, 2.5, 5.0]", "[0.5, -2.5, 5.0]");
        assert!(ExperimentConfig::parse(&bad).is_err());
        let bad = MINIMAL.replace(
            r#"{"kind": "jsq", "tie_break": "lowest_index"}"#,
            r#"{"kind": "bernoulli", "probabilities": [0.5, 0.6, 0.0]}"#,
        );
        assert!(ExperimentConfig::parse(&bad).is_err());
        let bad = MINIMAL.replace(
            r#"{"kind": "jsq", "tie_break": "lowest_index"}"#,
            r#"{"kind": "wsq_softmax", "temperature": 0.01}"#,
        );
        assert!(ExperimentConfig::parse(&bad).is_err());
        let bad = MINIMAL.replace("\"seed\": 1", "\"seed\": 1, \"duration\": 10, \"warmup\": 10");
        assert!(matches!(ExperimentConfig::parse(&bad), Err(Error::EmptyWindow { .. })));
    }

    #[test]
    fn state_specs() {
        assert_eq!(parse_states("ray:0..2", 3).unwrap().len(), 3);
        let grid = parse_states("grid:0..2", 2).unwrap();
        assert_eq!(grid.len(), 9);
        assert_eq!(grid[5], QueueState::new(vec![1, 2]));
        let list = parse_states("list:1,2,3;4,5,6", 3).unwrap();
        assert_eq!(list[1], QueueState::new(vec![4, 5, 6]));
        assert!(matches!(parse_states("", 3), Err(Error::EmptyStateSet)));
        assert!(matches!(parse_states("list:", 3), Err(Error::EmptyStateSet)));
        assert!(matches!(parse_states("ray:5..1", 3), Err(Error::EmptyStateSet)));
        assert!(parse_states("list:1,2", 3).is_err());
        assert!(parse_states("cube:0..1", 3).is_err());
    }

    #[test]
    fn eval_seeds_differ_from_training_seed() {
        assert_eq!(eval_seed(7, 0), 8);
        assert_eq!(eval_seed(7, 2), 10);
        assert_eq!(eval_seed(u64::MAX, 0), 0);
    }
}
