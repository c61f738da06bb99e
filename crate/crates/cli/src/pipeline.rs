//! End-to-end run with a manifest that lets completed stages be skipped.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ccil_core::data::sha256_hex;
use ccil_core::dynamics::DynamicsModel;
use ccil_core::eval::{compare, evaluate, metrics_csv};
use ccil_core::labels::load_labels;
use ccil_core::policy::{train_bc, Policy};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::PipelineConfig;
use crate::output::{commit, commit_json, commit_text, file_hash};
use crate::stages;
use crate::CliError;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub seed: u64,
    pub config: serde_json::Value,
    pub stages: BTreeMap<String, StageRecord>,
}

struct Runner<'a> {
    dir: &'a Path,
    manifest: Manifest,
    previous: BTreeMap<String, StageRecord>,
}

impl Runner<'_> {
    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn inputs(&self, files: &[&str], config: &[(&str, serde_json::Value)]) -> Result<BTreeMap<String, String>, CliError> {
        let mut m = BTreeMap::new();
        for f in files {
            m.insert((*f).to_string(), file_hash(&self.path(f))?);
        }
        for (k, v) in config {
            m.insert(format!("config:{k}"), sha256_hex(v.to_string().as_bytes()));
        }
        Ok(m)
    }

    /// Runs `body` unless the previous manifest shows the stage completed
    /// with identical inputs and its outputs are intact.
    fn stage<F>(&mut self, name: &str, inputs: BTreeMap<String, String>, body: F) -> Result<(), CliError>
    where
        F: FnOnce() -> Result<Vec<String>, CliError>,
    {
        if let Some(prev) = self.previous.get(name) {
            let intact = prev.inputs == inputs
                && prev
                    .outputs
                    .iter()
                    .all(|(f, h)| file_hash(&self.path(f)).map(|x| &x == h).unwrap_or(false));
            if intact {
                log::info!("stage {name}: up to date, skipping");
                self.manifest.stages.insert(name.to_string(), prev.clone());
                return Ok(());
            }
        }
        log::info!("stage {name}: running");
        let outputs = body().map_err(|e| CliError::msg(format!("stage {name} failed: {e}")))?;
        let mut record = StageRecord { inputs, outputs: BTreeMap::new() };
        for f in outputs {
            let h = file_hash(&self.path(&f))?;
            record.outputs.insert(f, h);
        }
        self.manifest.stages.insert(name.to_string(), record);
        // persist after every stage so an interrupted run can resume
        commit_json(&self.path("manifest.json"), &self.manifest)
    }
}

fn cfg_value<T: Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).expect("config serializes")
}

pub fn run(cfg: &PipelineConfig, dir: &Path, workers: usize) -> Result<Manifest, CliError> {
    cfg.validate()?;
    let seed = cfg.seed.expect("seed resolved before running");
    std::fs::create_dir_all(dir).map_err(|e| CliError::msg(format!("{}: {e}", dir.display())))?;
    let previous = match std::fs::read_to_string(dir.join("manifest.json")) {
        Ok(text) => serde_json::from_str::<Manifest>(&text).map(|m| m.stages).unwrap_or_default(),
        Err(_) => BTreeMap::new(),
    };
    let mut r = Runner {
        dir,
        manifest: Manifest {
            tool: "ccil".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            seed,
            // the output location is not part of the experiment
            config: cfg_value(&PipelineConfig { output_dir: None, ..cfg.clone() }),
            stages: BTreeMap::new(),
        },
        previous,
    };
    let env = cfg.env.build()?;

    let inputs = r.inputs(&[], &[("env", cfg_value(&cfg.env)), ("demos", cfg_value(&cfg.demos)), ("seed", json!(seed))])?;
    let demos_path = r.path("demos.jsonl");
    r.stage("demos", inputs, || {
        stages::gen_demos(&env, cfg.demos.n_traj, cfg.demos.horizon, seed, &demos_path)?;
        Ok(vec!["demos.jsonl".into()])
    })?;

    let candidates = cfg.dynamics.candidates();
    let names: Vec<String> =
        candidates.iter().enumerate().map(|(i, c)| format!("dynamics/{}", stages::checkpoint_name(i, c))).collect();
    let inputs = r.inputs(&["demos.jsonl"], &[("dynamics", cfg_value(&cfg.dynamics))])?;
    r.stage("dynamics", inputs, || {
        let demos = stages::load_demos(&demos_path)?;
        stages::train_sweep(
            &demos,
            &candidates,
            &cfg.dynamics.train,
            cfg.dynamics.val_fraction,
            workers,
            &dir.join("dynamics"),
            &dir.join("sweep.csv"),
        )?;
        let mut out = names.clone();
        out.push("sweep.csv".into());
        Ok(out)
    })?;

    let files: Vec<&str> = names.iter().map(String::as_str).chain(["demos.jsonl"]).collect();
    let inputs = r.inputs(&files, &[("criterion", cfg_value(&cfg.dynamics.criterion))])?;
    r.stage("select", inputs, || {
        let demos = stages::load_demos(&demos_path)?;
        let models = names
            .iter()
            .map(|n| {
                let p = dir.join(n);
                DynamicsModel::load(&p).map(|m| (p, m)).map_err(CliError::from)
            })
            .collect::<Result<Vec<_>, _>>()?;
        let sel = stages::select(&models, &demos, cfg.dynamics.criterion, &dir.join("best_model.json"))?;
        log::info!("selected {} (score {:.4e})", sel.chosen, sel.score);
        commit_json(&dir.join("selection.json"), &sel)?;
        Ok(vec!["best_model.json".into(), "selection.json".into()])
    })?;

    let inputs = r.inputs(&["best_model.json", "demos.jsonl"], &[("labels", cfg_value(&cfg.labels))])?;
    r.stage("labels", inputs, || {
        stages::gen_labels(&dir.join("best_model.json"), &demos_path, &env, &cfg.labels, workers, &dir.join("labels.jsonl"))?;
        Ok(["labels.jsonl", "labels_report.json", "labels_hist.csv", "labels_scatter.csv"].map(String::from).to_vec())
    })?;

    let inputs = r.inputs(&["demos.jsonl", "labels.jsonl"], &[("policy", cfg_value(&cfg.policy))])?;
    let bounds = (env.params.torque_min, env.params.torque_max);
    r.stage("policies", inputs, || {
        let demos = stages::load_demos(&demos_path)?;
        let labels = load_labels(&dir.join("labels.jsonl"))?;
        let bc = train_bc(&demos, &[], bounds, &cfg.policy)?;
        commit(&dir.join("bc.json"), |p| Ok(bc.save(p)?))?;
        let ccil = train_bc(&demos, &labels, bounds, &cfg.policy)?;
        commit(&dir.join("ccil.json"), |p| Ok(ccil.save(p)?))?;
        Ok(vec!["bc.json".into(), "ccil.json".into()])
    })?;

    let inputs = r.inputs(&["bc.json", "ccil.json"], &[("eval", cfg_value(&cfg.eval)), ("env", cfg_value(&cfg.env))])?;
    r.stage("evaluate", inputs, || {
        let bc = evaluate(&Policy::load(&dir.join("bc.json"))?, &env, &cfg.eval, workers)?;
        let ccil = evaluate(&Policy::load(&dir.join("ccil.json"))?, &env, &cfg.eval, workers)?;
        commit_text(&dir.join("metrics_bc.csv"), &metrics_csv(&bc))?;
        commit_text(&dir.join("metrics_ccil.csv"), &metrics_csv(&ccil))?;
        let cmp = compare(&ccil, &bc)?;
        log::info!("ccil {:.1} vs bc {:.1} (pooled se {:.1})", cmp.mean_a, cmp.mean_b, cmp.pooled_se);
        commit_text(&dir.join("comparison.csv"), &cmp.csv())?;
        Ok(vec!["metrics_bc.csv".into(), "metrics_ccil.csv".into(), "comparison.csv".into()])
    })?;

    let inputs = r.inputs(&["labels.jsonl", "best_model.json", "labels_report.json"], &[("env", cfg_value(&cfg.env))])?;
    r.stage("verify", inputs, || {
        let rep = stages::verify(&dir.join("labels.jsonl"), &dir.join("best_model.json"), &env, &dir.join("bounds.csv"))?;
        log::info!(
            "bounds: mean corrective error {:.3e}, mean bound {:.3e}, violation rate {:.3}",
            rep.mean_corrective_error,
            rep.mean_bound,
            rep.violation_rate
        );
        Ok(vec!["bounds.csv".into()])
    })?;

    commit_json(&dir.join("manifest.json"), &r.manifest)?;
    Ok(r.manifest)
}
