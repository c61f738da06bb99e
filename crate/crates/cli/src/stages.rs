//! Stage implementations shared by the subcommands and the pipeline.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ccil_core::data::{load_dataset, residual_scale, save_dataset, split, Dataset};
use ccil_core::dynamics::{
    hinge_lambda_monotonicity, model_selection_score, select_best, train_dynamics, DynamicsModel, RegConfig,
    SelectionCriterion,
};
use ccil_core::eval::{bounds_csv, verify_bounds, BoundReport};
use ccil_core::labels::{generate_labels, load_labels, save_labels, CorrectiveLabel, GenConfig, LabelReport};
use ccil_core::nn::TrainConfig;
use ccil_core::pendulum::Pendulum;
use ccil_core::rng::RngStream;
use serde::{Deserialize, Serialize};

use crate::output::{commit, commit_json, commit_text, file_hash, labels_histogram_csv, labels_scatter_csv, sibling};
use crate::CliError;

pub fn gen_demos(env: &Pendulum, n_traj: usize, horizon: usize, seed: u64, out: &Path) -> Result<Dataset, CliError> {
    let d = env.gen_demos(n_traj, horizon, seed)?;
    commit(out, |p| Ok(save_dataset(&d, p)?))?;
    Ok(d)
}

pub fn load_demos(path: &Path) -> Result<Dataset, CliError> {
    Ok(load_dataset(path)?)
}

pub fn split_demos(d: &Dataset, val_fraction: f64, seed: u64) -> Result<(Dataset, Dataset), CliError> {
    let mut rng = RngStream::new(seed, "dynamics/split");
    Ok(split(d, val_fraction, &mut rng)?)
}

pub fn train_one(
    demos: &Dataset,
    reg: &RegConfig,
    tc: &TrainConfig,
    val_fraction: f64,
    out: &Path,
) -> Result<DynamicsModel, CliError> {
    let (train, val) = split_demos(demos, val_fraction, tc.seed)?;
    let model = train_dynamics(&train, &val, reg, tc)?;
    commit(out, |p| Ok(model.save(p)?))?;
    Ok(model)
}

pub fn checkpoint_name(index: usize, reg: &RegConfig) -> String {
    format!("{index:02}_{}.json", reg.describe())
}

/// Trains every candidate into `dir` and writes `sweep_csv`. Candidates are
/// spread over `workers` threads; each training run is independent.
pub fn train_sweep(
    demos: &Dataset,
    regs: &[RegConfig],
    tc: &TrainConfig,
    val_fraction: f64,
    workers: usize,
    dir: &Path,
    sweep_csv: &Path,
) -> Result<Vec<(PathBuf, DynamicsModel)>, CliError> {
    let paths: Vec<PathBuf> = regs.iter().enumerate().map(|(i, r)| dir.join(checkpoint_name(i, r))).collect();
    let jobs: Vec<(usize, &RegConfig)> = regs.iter().enumerate().collect();
    let workers = workers.clamp(1, regs.len().max(1));
    let mut results: Vec<Option<DynamicsModel>> = vec![None; regs.len()];
    std::thread::scope(|scope| -> Result<(), CliError> {
        let handles: Vec<_> = jobs
            .chunks(regs.len().div_ceil(workers).max(1))
            .map(|part| {
                let paths = &paths;
                scope.spawn(move || {
                    part.iter()
                        .map(|&(i, reg)| {
                            log::info!("training candidate {} of {}: {}", i + 1, regs.len(), reg.describe());
                            train_one(demos, reg, tc, val_fraction, &paths[i]).map(|m| (i, m))
                        })
                        .collect::<Result<Vec<_>, CliError>>()
                })
            })
            .collect();
        for h in handles {
            for (i, m) in h.join().expect("sweep worker panicked")? {
                results[i] = Some(m);
            }
        }
        Ok(())
    })?;
    let models: Vec<(PathBuf, DynamicsModel)> =
        paths.into_iter().zip(results.into_iter().map(|m| m.expect("every candidate trained"))).collect();
    let scale = residual_scale(demos)?;
    commit_text(sweep_csv, &sweep_table(&models, scale))?;
    let (train, _) = split_demos(demos, val_fraction, tc.seed)?;
    let only: Vec<DynamicsModel> = models.iter().map(|(_, m)| m.clone()).collect();
    hinge_lambda_monotonicity(&only, train.transitions(), 500, tc.seed)?;
    Ok(models)
}

fn sweep_table(models: &[(PathBuf, DynamicsModel)], scale: f64) -> String {
    let mut out = String::from(
        "checkpoint,mode,per_layer_bound,L,lambda,sigma,eps_val,score_backtrack,score_disturbed,sampled_max,fraction_within_target\n",
    );
    let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
    for (path, m) in models {
        let score = |c| model_selection_score(m, c, scale).ok();
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{}",
            path.file_name().map(|s| s.to_string_lossy()).unwrap_or_default(),
            m.reg.mode,
            opt(m.reg.per_layer_bound),
            opt(m.reg.effective_lipschitz()),
            m.reg.lambda,
            m.reg.sigma,
            m.eps_val,
            opt(score(SelectionCriterion::Backtrack)),
            opt(score(SelectionCriterion::Disturbed)),
            m.lipschitz_report.sampled_max,
            opt(m.lipschitz_report.fraction_within_target),
        )
        .expect("string write");
    }
    out
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Selection {
    pub criterion: SelectionCriterion,
    pub residual_scale: f64,
    pub chosen: String,
    pub score: f64,
    pub eps_val: f64,
}

pub fn select(
    models: &[(PathBuf, DynamicsModel)],
    demos: &Dataset,
    criterion: SelectionCriterion,
    out: &Path,
) -> Result<Selection, CliError> {
    let only: Vec<DynamicsModel> = models.iter().map(|(_, m)| m.clone()).collect();
    let scale = residual_scale(demos)?;
    let best = select_best(&only, criterion, scale)?;
    let (path, model) = &models[best];
    let bytes = std::fs::read(path).map_err(|e| CliError::msg(format!("{}: {e}", path.display())))?;
    commit(out, |p| std::fs::write(p, &bytes).map_err(|e| CliError::msg(format!("{}: {e}", p.display()))))?;
    Ok(Selection {
        criterion,
        residual_scale: scale,
        chosen: path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
        score: model_selection_score(model, criterion, scale)?,
        eps_val: model.eps_val,
    })
}

/// Summary written next to a labels file, tying it to its inputs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LabelsManifest {
    pub model_sha256: String,
    pub dataset_sha256: String,
    pub config: GenConfig,
    pub report: LabelReport,
}

pub fn labels_report_path(labels: &Path) -> PathBuf {
    sibling(labels, "_report.json")
}

#[allow(clippy::too_many_arguments)]
pub fn gen_labels(
    model_path: &Path,
    demos_path: &Path,
    env: &Pendulum,
    cfg: &GenConfig,
    workers: usize,
    out: &Path,
) -> Result<(Vec<CorrectiveLabel>, LabelReport), CliError> {
    let model = DynamicsModel::load(model_path)?;
    let demos = load_demos(demos_path)?;
    let (labels, report) = generate_labels(&model, &demos, env, cfg, workers)?;
    commit(out, |p| Ok(save_labels(&labels, p)?))?;
    let manifest = LabelsManifest {
        model_sha256: file_hash(model_path)?,
        dataset_sha256: file_hash(demos_path)?,
        config: cfg.clone(),
        report: report.clone(),
    };
    commit_json(&labels_report_path(out), &manifest)?;
    commit_text(&sibling(out, "_hist.csv"), &labels_histogram_csv(&labels))?;
    let scatter = out.with_file_name(format!(
        "{}_scatter.csv",
        out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
    ));
    commit_text(&scatter, &labels_scatter_csv(&labels))?;
    Ok((labels, report))
}

/// Checks bounds of a labels file against the model it was generated from.
pub fn verify(labels_path: &Path, model_path: &Path, env: &Pendulum, out: &Path) -> Result<BoundReport, CliError> {
    let report_path = labels_report_path(labels_path);
    let model_hash = file_hash(model_path)?;
    if report_path.exists() {
        let text = std::fs::read_to_string(&report_path)
            .map_err(|e| CliError::msg(format!("{}: {e}", report_path.display())))?;
        let m: LabelsManifest = serde_json::from_str(&text)
            .map_err(|e| CliError::msg(format!("{}: {e}", report_path.display())))?;
        if m.model_sha256 != model_hash {
            return Err(CliError::msg(format!(
                "model mismatch: {} was generated from a model with sha256 {}, but {} has sha256 {}",
                labels_path.display(),
                m.model_sha256,
                model_path.display(),
                model_hash
            )));
        }
    } else {
        log::warn!("{} not found; skipping the model hash check", report_path.display());
    }
    let labels = load_labels(labels_path)?;
    let model = DynamicsModel::load(model_path)?;
    let report = verify_bounds(&labels, &model, env)?;
    commit_text(out, &bounds_csv(&report))?;
    Ok(report)
}
