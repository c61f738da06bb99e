//! Noisy policy evaluation, empirical checks of the per-label bounds, and
//! run-to-run comparisons.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{l2_dist, l2_norm};
use crate::error::{Error, Result};
use crate::labels::{CorrectiveLabel, ResidualModel};
use crate::pendulum::{normalize_angle, Controller, InitState, Pendulum};
use crate::rng::RngStream;
use crate::stats;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub episodes: usize,
    pub horizon: usize,
    pub obs_noise_std: f64,
    pub act_noise_std: f64,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { episodes: 100, horizon: 500, obs_noise_std: 0.05, act_noise_std: 0.05, seed: 0 }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.episodes == 0 || self.horizon == 0 {
            return Err(Error::InvalidArgument("eval needs episodes >= 1 and horizon >= 1".into()));
        }
        if !(self.obs_noise_std >= 0.0 && self.act_noise_std >= 0.0) {
            return Err(Error::InvalidArgument("eval noise std must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub config: EvalConfig,
    pub env: String,
    pub returns: Vec<f64>,
    /// Whether each episode ended upright (`|θ - π| < 0.1`, `|θ̇| < 0.5`).
    pub upright: Vec<bool>,
    pub mean_return: f64,
    pub std_return: f64,
    pub upright_rate: f64,
}

fn is_upright(theta: f64, theta_dot: f64) -> bool {
    (normalize_angle(theta) - PI).abs() < 0.1 && theta_dot.abs() < 0.5
}

/// Runs `cfg.episodes` noisy episodes from random starts, episode `k`
/// drawing everything from its own stream, on `workers` threads.
pub fn evaluate<C: Controller + Sync + ?Sized>(
    policy: &C,
    env: &Pendulum,
    cfg: &EvalConfig,
    workers: usize,
) -> Result<EvalMetrics> {
    cfg.validate()?;
    let episode = |k: usize| -> Result<(f64, bool)> {
        let mut rng = RngStream::new(cfg.seed, &format!("eval/{k}"));
        let ro = env.rollout(policy, cfg.horizon, InitState::Random, cfg.obs_noise_std, cfg.act_noise_std, k as u64, &mut rng)?;
        Ok((ro.total_reward, is_upright(ro.final_state.theta, ro.final_state.theta_dot)))
    };
    let workers = workers.clamp(1, cfg.episodes);
    let results: Vec<(f64, bool)> = if workers == 1 {
        (0..cfg.episodes).map(episode).collect::<Result<_>>()?
    } else {
        let per = cfg.episodes.div_ceil(workers);
        std::thread::scope(|scope| {
            let handles: Vec<_> = (0..workers)
                .map(|w| {
                    let episode = &episode;
                    scope.spawn(move || {
                        (w * per..((w + 1) * per).min(cfg.episodes)).map(episode).collect::<Result<Vec<_>>>()
                    })
                })
                .collect();
            let mut all = Vec::with_capacity(cfg.episodes);
            for h in handles {
                all.extend(h.join().expect("eval worker panicked")?);
            }
            Ok::<_, Error>(all)
        })?
    };
    let returns: Vec<f64> = results.iter().map(|r| r.0).collect();
    let upright: Vec<bool> = results.iter().map(|r| r.1).collect();
    Ok(EvalMetrics {
        config: cfg.clone(),
        env: env.name().to_string(),
        mean_return: stats::mean(&returns),
        std_return: stats::std_dev(&returns),
        upright_rate: upright.iter().filter(|&&u| u).count() as f64 / upright.len() as f64,
        returns,
        upright,
    })
}

/// Per-episode rows followed by a `mean` and a `std` row.
pub fn metrics_csv(m: &EvalMetrics) -> String {
    let mut out = String::from("episode,return,upright\n");
    for (k, (r, u)) in m.returns.iter().zip(&m.upright).enumerate() {
        writeln!(out, "{k},{r},{}", u8::from(*u)).expect("string write");
    }
    writeln!(out, "mean,{},{}", m.mean_return, m.upright_rate).expect("string write");
    writeln!(out, "std,{},", m.std_return).expect("string write");
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundRow {
    pub empirical_model_error: f64,
    pub corrective_error: f64,
    pub opt_residual: f64,
    pub bound: f64,
    pub violated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub rows: Vec<BoundRow>,
    pub mean_corrective_error: f64,
    pub mean_model_error: f64,
    pub mean_bound: f64,
    pub violation_rate: f64,
}

/// Compares each label's bound against the learned model's actual error at
/// `(s_g, a_g)`, measured with the analytic pendulum. Generated states that
/// left the unit circle are stepped from their projection onto it. An empty
/// label set gives NaN means and a zero violation rate.
pub fn verify_bounds<M: ResidualModel + ?Sized>(
    labels: &[CorrectiveLabel],
    model: &M,
    env: &Pendulum,
) -> Result<BoundReport> {
    let mut rows = Vec::with_capacity(labels.len());
    for l in labels {
        let truth = env.true_residual_projected(&l.s_g, &l.a_g);
        let pred = model.residual(&l.s_g, &l.a_g)?;
        let model_err = l2_dist(&truth, &pred);
        let reached: Vec<f64> = l.s_g.iter().zip(truth.iter()).zip(l.s_target.iter()).map(|((s, f), t)| s + f - t).collect();
        rows.push(BoundRow {
            empirical_model_error: model_err,
            corrective_error: l2_norm(&reached),
            opt_residual: l.opt_residual,
            bound: l.bound,
            violated: model_err > l.bound,
        });
    }
    let col = |f: fn(&BoundRow) -> f64| stats::mean(&rows.iter().map(f).collect::<Vec<_>>());
    Ok(BoundReport {
        mean_corrective_error: col(|r| r.corrective_error),
        mean_model_error: col(|r| r.empirical_model_error),
        mean_bound: col(|r| r.bound),
        violation_rate: rows.iter().filter(|r| r.violated).count() as f64 / rows.len().max(1) as f64,
        rows,
    })
}

pub fn bounds_csv(r: &BoundReport) -> String {
    let mut out = String::from("label,empirical_model_error,corrective_error,opt_residual,bound,violated\n");
    for (i, row) in r.rows.iter().enumerate() {
        writeln!(
            out,
            "{i},{},{},{},{},{}",
            row.empirical_model_error,
            row.corrective_error,
            row.opt_residual,
            row.bound,
            u8::from(row.violated)
        )
        .expect("string write");
    }
    writeln!(
        out,
        "mean,{},{},,{},{}",
        r.mean_model_error, r.mean_corrective_error, r.mean_bound, r.violation_rate
    )
    .expect("string write");
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub mean_a: f64,
    pub mean_b: f64,
    /// `mean_a - mean_b`
    pub diff: f64,
    /// `sqrt(var_a / n_a + var_b / n_b)`
    pub pooled_se: f64,
    /// `a` is not worse than `b` beyond one pooled standard error.
    pub a_at_least_b: bool,
}

impl Comparison {
    pub fn from_samples(a: &[f64], b: &[f64]) -> Result<Self> {
        if a.is_empty() || b.is_empty() {
            return Err(Error::InvalidArgument("comparison needs non-empty samples".into()));
        }
        let (mean_a, mean_b) = (stats::mean(a), stats::mean(b));
        let sa = stats::std_dev(a);
        let sb = stats::std_dev(b);
        let pooled_se = (sa * sa / a.len() as f64 + sb * sb / b.len() as f64).sqrt();
        let diff = mean_a - mean_b;
        Ok(Self { mean_a, mean_b, diff, pooled_se, a_at_least_b: diff >= -pooled_se })
    }

    pub fn csv(&self) -> String {
        format!(
            "mean_a,mean_b,diff,pooled_se,a_at_least_b\n{},{},{},{},{}\n",
            self.mean_a,
            self.mean_b,
            self.diff,
            self.pooled_se,
            u8::from(self.a_at_least_b)
        )
    }
}

/// Episode-level comparison of two evaluations under the same protocol.
pub fn compare(a: &EvalMetrics, b: &EvalMetrics) -> Result<Comparison> {
    if a.config != b.config || a.env != b.env {
        return Err(Error::InvalidArgument(format!(
            "cannot compare runs with different evaluation setups: {:?} on {} vs {:?} on {}",
            a.config, a.env, b.config, b.env
        )));
    }
    Comparison::from_samples(&a.returns, &b.returns)
}

pub fn save_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
