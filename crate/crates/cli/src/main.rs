//! `ccil`: demonstrations, dynamics sweep, corrective labels, policies and
//! evaluation from the command line.

mod config;
mod output;
mod pipeline;
mod stages;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use ccil_core::dynamics::{DynamicsModel, PenaltyForm, RegConfig, RegMode, SelectionCriterion};
use ccil_core::eval::{evaluate, metrics_csv, EvalConfig};
use ccil_core::labels::{load_labels, GenConfig, KSource, TechniqueSet};
use ccil_core::nn::TrainConfig;
use ccil_core::pendulum::Pendulum;
use ccil_core::policy::{train_bc, BcConfig, Policy};
use clap::{Args, Parser, Subcommand};

use crate::config::PipelineConfig;
use crate::output::{commit, commit_text};

#[derive(Debug)]
pub struct CliError(String);

impl CliError {
    pub fn msg(m: impl Into<String>) -> Self {
        Self(m.into())
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<ccil_core::Error> for CliError {
    fn from(e: ccil_core::Error) -> Self {
        Self(e.to_string())
    }
}

#[derive(Parser)]
#[command(name = "ccil", version, about = "Corrective labels for behavior cloning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, default_value_t = 500)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 256)]
    batch_size: usize,
    #[arg(long, default_value_t = 50)]
    patience: usize,
    #[arg(long, env = "CCIL_SEED", default_value_t = 0)]
    seed: u64,
}

impl TrainArgs {
    fn config(&self) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            batch_size: self.batch_size,
            epochs: self.epochs,
            seed: self.seed,
            patience: self.patience,
            ..TrainConfig::default()
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Roll out the expert from random starts.
    GenDemos {
        #[arg(long, default_value = "pendulum")]
        env: String,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 500)]
        horizon: usize,
        #[arg(long, env = "CCIL_SEED", default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit one residual dynamics model, or the 24-cell sweep with --sweep.
    TrainDynamics {
        #[arg(long)]
        demos: PathBuf,
        #[arg(long, default_value = "hinge")]
        mode: String,
        /// Penalty target L (hinge and slack modes).
        #[arg(long)]
        lipschitz: Option<f64>,
        /// Per-layer spectral bound (spectral and weighted modes).
        #[arg(long)]
        per_layer_bound: Option<f64>,
        #[arg(long, default_value_t = 0.5)]
        lambda: f64,
        #[arg(long, default_value_t = 3e-4)]
        sigma: f64,
        #[arg(long, default_value_t = 1)]
        n_perturb: usize,
        /// `hinge` or `indicator`.
        #[arg(long, default_value = "hinge")]
        penalty_form: String,
        #[arg(long, default_value_t = 0.2)]
        val_fraction: f64,
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long)]
        sweep: bool,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        /// Checkpoint path, or output directory with --sweep.
        #[arg(long)]
        out: PathBuf,
    },
    /// Pick the candidate with the smallest error bound and copy it to --out.
    SelectModel {
        #[arg(long, num_args = 1.., required = true)]
        models: Vec<PathBuf>,
        #[arg(long)]
        demos: PathBuf,
        #[arg(long, default_value = "disturbed")]
        criterion: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate corrective labels from a dynamics model.
    GenLabels {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        demos: PathBuf,
        #[arg(long, default_value = "pendulum")]
        env: String,
        #[arg(long, default_value = "disturbed")]
        technique: String,
        #[arg(long, default_value_t = 1e-5)]
        delta_std: f64,
        #[arg(long, default_value_t = 0.01)]
        reject_eps: f64,
        #[arg(long, default_value_t = 1)]
        labels_per_transition: usize,
        #[arg(long, default_value = "per-layer-product")]
        k_source: String,
        #[arg(long, env = "CCIL_SEED", default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Behavior cloning, optionally augmented with labels.
    TrainPolicy {
        #[arg(long)]
        demos: PathBuf,
        #[arg(long)]
        aug: Option<PathBuf>,
        #[arg(long, default_value_t = 0.0)]
        noise_bc_std: f64,
        #[arg(long, default_value_t = 1.0)]
        aug_weight: f64,
        #[arg(long, default_value = "pendulum")]
        env: String,
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Noisy evaluation episodes; writes a metrics CSV.
    Evaluate {
        #[arg(long)]
        policy: PathBuf,
        #[arg(long, default_value = "pendulum")]
        env: String,
        #[arg(long, default_value_t = 100)]
        episodes: usize,
        #[arg(long, default_value_t = 500)]
        horizon: usize,
        #[arg(long, default_value_t = 0.05)]
        obs_noise_std: f64,
        #[arg(long, default_value_t = 0.05)]
        act_noise_std: f64,
        #[arg(long, env = "CCIL_SEED", default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare per-label bounds with the true dynamics.
    VerifyBounds {
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value = "pendulum")]
        env: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Every stage from demonstrations to bound verification.
    Pipeline {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
}

fn parse_mode(s: &str) -> Result<RegMode, CliError> {
    serde_json::from_value(serde_json::Value::String(s.into())).map_err(|_| CliError::msg(format!("unknown mode {s:?}")))
}

fn parse_form(s: &str) -> Result<PenaltyForm, CliError> {
    serde_json::from_value(serde_json::Value::String(s.into()))
        .map_err(|_| CliError::msg(format!("unknown penalty form {s:?}")))
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenDemos { env, n, horizon, seed, out } => {
            let env = Pendulum::by_name(&env)?;
            let d = stages::gen_demos(&env, n, horizon, seed, &out)?;
            println!("wrote {} transitions to {}", d.len(), out.display());
        }
        Command::TrainDynamics {
            demos,
            mode,
            lipschitz,
            per_layer_bound,
            lambda,
            sigma,
            n_perturb,
            penalty_form,
            val_fraction,
            train,
            sweep,
            workers,
            out,
        } => {
            let d = stages::load_demos(&demos)?;
            let tc = train.config();
            if sweep {
                let regs = ccil_core::dynamics::default_sweep_grid();
                let models = stages::train_sweep(&d, &regs, &tc, val_fraction, workers, &out, &out.join("sweep.csv"))?;
                println!("trained {} candidates into {}", models.len(), out.display());
            } else {
                let reg = RegConfig {
                    mode: parse_mode(&mode)?,
                    lipschitz,
                    per_layer_bound,
                    lambda,
                    sigma,
                    n_perturb,
                    penalty_form: parse_form(&penalty_form)?,
                    ..RegConfig::default()
                };
                let m = stages::train_one(&d, &reg, &tc, val_fraction, &out)?;
                println!("{}: eps_val {:.4e} -> {}", reg.describe(), m.eps_val, out.display());
            }
        }
        Command::SelectModel { models, demos, criterion, out } => {
            let criterion: SelectionCriterion = criterion.parse()?;
            let loaded = models
                .into_iter()
                .map(|p| DynamicsModel::load(&p).map(|m| (p, m)).map_err(CliError::from))
                .collect::<Result<Vec<_>, _>>()?;
            let sel = stages::select(&loaded, &stages::load_demos(&demos)?, criterion, &out)?;
            println!("selected {} (score {:.6e}) -> {}", sel.chosen, sel.score, out.display());
        }
        Command::GenLabels {
            model,
            demos,
            env,
            technique,
            delta_std,
            reject_eps,
            labels_per_transition,
            k_source,
            seed,
            workers,
            out,
        } => {
            let cfg = GenConfig {
                technique: technique.parse::<TechniqueSet>()?,
                delta_std,
                eps_rej: reject_eps,
                labels_per_transition,
                k_source: k_source.parse::<KSource>()?,
                seed,
                ..GenConfig::default()
            };
            let env = Pendulum::by_name(&env)?;
            let (labels, report) = stages::gen_labels(&model, &demos, &env, &cfg, workers, &out)?;
            println!("emitted {} of {} candidate labels -> {}", labels.len(), report.attempted, out.display());
        }
        Command::TrainPolicy { demos, aug, noise_bc_std, aug_weight, env, train, out } => {
            let env = Pendulum::by_name(&env)?;
            let d = stages::load_demos(&demos)?;
            let labels = match &aug {
                Some(p) => load_labels(p)?,
                None => Vec::new(),
            };
            let cfg = BcConfig { train: train.config(), noise_bc_std, aug_weight };
            let p = train_bc(&d, &labels, (env.params.torque_min, env.params.torque_max), &cfg)?;
            commit(&out, |path| Ok(p.save(path)?))?;
            println!("policy trained on {} pairs + {} labels -> {}", d.len(), labels.len(), out.display());
        }
        Command::Evaluate { policy, env, episodes, horizon, obs_noise_std, act_noise_std, seed, workers, out } => {
            let env = Pendulum::by_name(&env)?;
            let cfg = EvalConfig { episodes, horizon, obs_noise_std, act_noise_std, seed };
            let m = evaluate(&Policy::load(&policy)?, &env, &cfg, workers)?;
            commit_text(&out, &metrics_csv(&m))?;
            println!("mean return {:.2} ± {:.2}, upright {:.2}", m.mean_return, m.std_return, m.upright_rate);
        }
        Command::VerifyBounds { labels, model, env, out } => {
            let env = Pendulum::by_name(&env)?;
            let r = stages::verify(&labels, &model, &env, &out)?;
            println!(
                "mean corrective error {:.4e}, mean bound {:.4e}, violation rate {:.4}",
                r.mean_corrective_error, r.mean_bound, r.violation_rate
            );
        }
        Command::Pipeline { config, seed, out_dir, workers } => {
            let mut cfg = PipelineConfig::load(&config)?;
            let env_seed = std::env::var("CCIL_SEED").ok().and_then(|s| s.parse().ok());
            let seed = seed.or(cfg.seed).or(env_seed).unwrap_or(0);
            cfg.resolve_seed(seed);
            if let Some(dir) = out_dir {
                cfg.output_dir = Some(dir);
            }
            let dir = cfg
                .output_dir
                .clone()
                .ok_or_else(|| CliError::msg("no output directory: set output_dir in the config or pass --out-dir"))?;
            let manifest = pipeline::run(&cfg, &dir, workers)?;
            println!("pipeline finished: {} stages recorded in {}", manifest.stages.len(), dir.join("manifest.json").display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
