//! BackTrack and DisturbedAction label generation with rejection.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::{l2_dist, l2_norm, ActionVec, Dataset, StateVec, Transition};
use crate::dynamics::DynamicsModel;
use crate::error::{Error, Result};
use crate::pendulum::Pendulum;
use crate::rng::RngStream;

use super::solver::{solve_root, ResidualModel, SolverConfig};
use super::{CorrectiveLabel, EpsSource, GenConfig, KSource, Technique};

/// Constants entering the per-label bounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundConstants {
    /// Model Lipschitz constant w.r.t. the state.
    pub k_state: f64,
    /// Model Lipschitz constant w.r.t. the action.
    pub k_action: f64,
    /// Lipschitz constant of the true residual dynamics.
    pub k_true: f64,
    /// Mean validation error of the model.
    pub eps_val: f64,
}

impl BoundConstants {
    /// Constants for `model` from the requested source. Sampled constants
    /// come from the model's stored report, computed over `anchors` when
    /// the model has none.
    pub fn for_model(
        model: &DynamicsModel,
        source: KSource,
        k_true: f64,
        anchors: &[Transition],
        seed: u64,
    ) -> Result<Self> {
        let (k_state, k_action) = match source {
            KSource::PerLayerProduct => crate::dynamics::product_bounds(model),
            KSource::Sampled => {
                let rep = if model.lipschitz_report.n_anchors > 0 {
                    model.lipschitz_report.clone()
                } else {
                    model.compute_lipschitz_report(anchors, model.reg.sigma, 16, 2000, seed)?
                };
                (rep.sampled_k_state, rep.sampled_k_action)
            }
        };
        Ok(Self { k_state, k_action, k_true, eps_val: model.eps_val })
    }

    /// Bound for a backtracked label at distance `d` from its anchor.
    pub fn backtrack_bound(&self, eps: f64, d: f64) -> f64 {
        eps + (self.k_state + self.k_true) * d
    }

    /// Bound of an existing label recomputed with these constants, using
    /// the validation-mean model error.
    pub fn bound_for(&self, l: &CorrectiveLabel) -> f64 {
        match l.technique {
            Technique::Backtrack => self.backtrack_bound(self.eps_val, l.anchor_distance),
            Technique::Disturbed => self.disturbed_bound(l.delta_norm, l.anchor_distance, l.opt_residual),
            Technique::Oracle => l.opt_residual,
        }
    }

    /// Bound for a disturbed-action label.
    pub fn disturbed_bound(&self, delta_norm: f64, d: f64, opt_residual: f64) -> f64 {
        self.k_action * delta_norm + (1.0 + self.k_state) * d + opt_residual
    }
}

/// Why a candidate label was dropped.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Rejection {
    Residual,
    Distance,
    Clamp,
    Wall,
}

/// Per-candidate inputs shared by both techniques.
pub struct LabelContext<'a> {
    pub consts: BoundConstants,
    pub eps_source: EpsSource,
    pub solver: SolverConfig,
    pub eps_rej: f64,
    pub action_bounds: (f64, f64),
    /// Environment whose walls labels must not straddle.
    pub wall_env: Option<&'a Pendulum>,
}

impl LabelContext<'_> {
    fn eps_for<M: ResidualModel + ?Sized>(&self, model: &M, tr: &Transition) -> Result<f64> {
        match self.eps_source {
            EpsSource::ValidationMean => Ok(self.consts.eps_val),
            EpsSource::PerAnchor => {
                let r = model.residual(&tr.s, &tr.a)?;
                let err: Vec<f64> = r.iter().zip(tr.s_next.iter().zip(tr.s.iter())).map(|(p, (n, s))| p - (n - s)).collect();
                Ok(l2_norm(&err))
            }
        }
    }

    fn screen(&self, s_g: &[f64], target: &[f64], residual: f64, distance: f64) -> Option<Rejection> {
        if !(residual <= self.solver.tol) {
            Some(Rejection::Residual)
        } else if !(distance <= self.eps_rej) {
            Some(Rejection::Distance)
        } else if self.wall_env.is_some_and(|env| env.segment_crosses_wall(s_g, target)) {
            Some(Rejection::Wall)
        } else {
            None
        }
    }
}

/// Label whose generated state reaches `tr.s_next` under the expert action.
pub fn backtrack_label<M: ResidualModel + ?Sized>(
    model: &M,
    tr: &Transition,
    ctx: &LabelContext<'_>,
) -> Result<std::result::Result<CorrectiveLabel, Rejection>> {
    let sol = solve_root(model, &tr.a, &tr.s_next, &ctx.solver)?;
    let d = l2_dist(&sol.s_g, &tr.s_next);
    if let Some(r) = ctx.screen(&sol.s_g, &tr.s_next, sol.residual, d) {
        return Ok(Err(r));
    }
    let eps = ctx.eps_for(model, tr)?;
    Ok(Ok(CorrectiveLabel {
        s_g: StateVec::new(sol.s_g)?,
        a_g: tr.a.clone(),
        s_target: tr.s_next.clone(),
        technique: Technique::Backtrack,
        opt_residual: sol.residual,
        anchor_distance: d,
        delta_norm: 0.0,
        bound: ctx.consts.backtrack_bound(eps, d),
        source: (tr.traj_id, tr.t),
    }))
}

/// Label whose generated state reaches `tr.s_next` under a slightly
/// perturbed expert action, anchored at `tr.s`.
pub fn disturbed_action_label<M: ResidualModel + ?Sized>(
    model: &M,
    tr: &Transition,
    delta_std: f64,
    ctx: &LabelContext<'_>,
    rng: &mut RngStream,
) -> Result<std::result::Result<CorrectiveLabel, Rejection>> {
    let (lo, hi) = ctx.action_bounds;
    let delta: Vec<f64> = (0..tr.a.dim()).map(|_| delta_std * rng.normal()).collect();
    let raw: Vec<f64> = tr.a.iter().zip(&delta).map(|(a, d)| a + d).collect();
    let a_g: Vec<f64> = raw.iter().map(|v| v.clamp(lo, hi)).collect();
    let applied: Vec<f64> = a_g.iter().zip(tr.a.iter()).map(|(g, a)| g - a).collect();
    let delta_norm = l2_norm(&applied);
    if l2_dist(&a_g, &raw) > 0.1 * l2_norm(&delta) {
        return Ok(Err(Rejection::Clamp));
    }
    let sol = solve_root(model, &a_g, &tr.s_next, &ctx.solver)?;
    let d = l2_dist(&sol.s_g, &tr.s);
    if let Some(r) = ctx.screen(&sol.s_g, &tr.s_next, sol.residual, d) {
        return Ok(Err(r));
    }
    Ok(Ok(CorrectiveLabel {
        s_g: StateVec::new(sol.s_g)?,
        a_g: ActionVec::new(a_g)?,
        s_target: tr.s_next.clone(),
        technique: Technique::Disturbed,
        opt_residual: sol.residual,
        anchor_distance: d,
        delta_norm,
        bound: ctx.consts.disturbed_bound(delta_norm, d, sol.residual),
        source: (tr.traj_id, tr.t),
    }))
}

/// Order statistics of a sample.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub count: usize,
    pub mean: f64,
    pub min: f64,
    pub p50: f64,
    pub p95: f64,
    pub max: f64,
}

impl Summary {
    pub fn of(values: impl IntoIterator<Item = f64>) -> Self {
        let mut v: Vec<f64> = values.into_iter().collect();
        if v.is_empty() {
            return Self::default();
        }
        v.sort_by(f64::total_cmp);
        let q = |p: f64| v[((v.len() - 1) as f64 * p).round() as usize];
        Self {
            count: v.len(),
            mean: crate::stats::mean(&v),
            min: v[0],
            p50: q(0.5),
            p95: q(0.95),
            max: v[v.len() - 1],
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LabelReport {
    pub attempted: usize,
    pub converged: usize,
    pub rejected_distance: usize,
    pub rejected_residual: usize,
    pub rejected_clamp: usize,
    pub rejected_wall: usize,
    pub emitted: usize,
    pub emitted_by_technique: BTreeMap<String, usize>,
    pub anchor_distance: Summary,
    pub bound: Summary,
    pub constants: Option<BoundConstants>,
}

impl LabelReport {
    fn record(&mut self, outcome: &std::result::Result<CorrectiveLabel, Rejection>) {
        self.attempted += 1;
        match outcome {
            Ok(l) => {
                self.converged += 1;
                self.emitted += 1;
                *self.emitted_by_technique.entry(l.technique.to_string()).or_default() += 1;
            }
            Err(Rejection::Residual) => self.rejected_residual += 1,
            Err(Rejection::Distance) => {
                self.converged += 1;
                self.rejected_distance += 1;
            }
            Err(Rejection::Wall) => {
                self.converged += 1;
                self.rejected_wall += 1;
            }
            Err(Rejection::Clamp) => self.rejected_clamp += 1,
        }
    }

    pub fn emission_rate(&self) -> f64 {
        if self.attempted == 0 {
            0.0
        } else {
            self.emitted as f64 / self.attempted as f64
        }
    }
}

type Outcome = std::result::Result<CorrectiveLabel, Rejection>;

fn label_transition<M: ResidualModel + ?Sized>(
    model: &M,
    tr: &Transition,
    cfg: &GenConfig,
    ctx: &LabelContext<'_>,
) -> Result<Vec<Outcome>> {
    let mut out = Vec::new();
    if cfg.technique.includes(Technique::Backtrack) {
        out.push(backtrack_label(model, tr, ctx)?);
    }
    if cfg.technique.includes(Technique::Disturbed) {
        let mut rng = RngStream::new(cfg.seed, &format!("labels/{}/{}", tr.traj_id, tr.t));
        for _ in 0..cfg.labels_per_transition {
            out.push(disturbed_action_label(model, tr, cfg.delta_std, ctx, &mut rng)?);
        }
    }
    Ok(out)
}

/// Labels every transition of `d` with the configured techniques and
/// returns the emitted labels (in dataset order) with a report. `workers`
/// threads share the work; the output does not depend on it.
pub fn generate_labels(
    model: &DynamicsModel,
    d: &Dataset,
    env: &Pendulum,
    cfg: &GenConfig,
    workers: usize,
) -> Result<(Vec<CorrectiveLabel>, LabelReport)> {
    cfg.validate()?;
    if d.d_s() != model.d_s || d.d_a() != model.d_a {
        return Err(Error::dim(model.d_s + model.d_a, d.d_s() + d.d_a(), "labels: dataset vs model"));
    }
    let k_true = env.residual_lipschitz_bound(cfg.true_speed_limit);
    let consts = BoundConstants::for_model(model, cfg.k_source, k_true, d.transitions(), cfg.seed)?;
    let skip_wall = cfg.skip_wall_crossing.unwrap_or(env.has_walls());
    let ctx = LabelContext {
        consts,
        eps_source: cfg.eps_source,
        solver: cfg.solver(),
        eps_rej: cfg.eps_rej,
        action_bounds: (env.params.torque_min, env.params.torque_max),
        wall_env: skip_wall.then_some(env),
    };
    let transitions = d.transitions();
    let workers = workers.max(1).min(transitions.len().max(1));
    let chunk = transitions.len().div_ceil(workers).max(1);
    let per_chunk: Vec<Result<Vec<Outcome>>> = if workers == 1 {
        vec![transitions
            .iter()
            .map(|tr| label_transition(model, tr, cfg, &ctx))
            .collect::<Result<Vec<_>>>()
            .map(|v| v.into_iter().flatten().collect())]
    } else {
        std::thread::scope(|scope| {
            let handles: Vec<_> = transitions
                .chunks(chunk)
                .map(|part| {
                    let ctx = &ctx;
                    scope.spawn(move || {
                        let mut out = Vec::new();
                        for tr in part {
                            out.extend(label_transition(model, tr, cfg, ctx)?);
                        }
                        Ok(out)
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("label worker panicked")).collect()
        })
    };
    let mut report = LabelReport { constants: Some(consts), ..Default::default() };
    let mut labels = Vec::new();
    for part in per_chunk {
        for outcome in part? {
            report.record(&outcome);
            if let Ok(l) = outcome {
                labels.push(l);
            }
        }
    }
    report.anchor_distance = Summary::of(labels.iter().map(|l| l.anchor_distance));
    report.bound = Summary::of(labels.iter().map(|l| l.bound));
    log::info!(
        "labels: {} of {} candidates emitted ({} too far, {} unsolved, {} clamped, {} across walls)",
        report.emitted,
        report.attempted,
        report.rejected_distance,
        report.rejected_residual,
        report.rejected_clamp,
        report.rejected_wall
    );
    Ok((labels, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pendulum::Pendulum;

    fn consts() -> BoundConstants {
        BoundConstants { k_state: 12.0, k_action: 12.0, k_true: 12.0, eps_val: 0.0 }
    }

    fn ctx(env: &Pendulum, eps_rej: f64) -> LabelContext<'_> {
        LabelContext {
            consts: consts(),
            eps_source: EpsSource::ValidationMean,
            solver: SolverConfig::default(),
            eps_rej,
            action_bounds: (-3.0, 3.0),
            wall_env: env.has_walls().then_some(env),
        }
    }

    #[test]
    fn bound_arithmetic() {
        let c = consts();
        assert!((c.backtrack_bound(0.0, 0.005) - 0.12).abs() < 1e-15);
        assert!((c.disturbed_bound(1e-4, 5e-3, 0.0) - 0.0662).abs() < 1e-15);
    }

    #[test]
    fn bounds_grow_with_distance_and_delta() {
        let c = consts();
        let ds = [0.0, 1e-4, 1e-3, 5e-3, 1e-2];
        for w in ds.windows(2) {
            assert!(c.backtrack_bound(0.01, w[0]) <= c.backtrack_bound(0.01, w[1]));
            assert!(c.disturbed_bound(1e-5, w[0], 0.0) <= c.disturbed_bound(1e-5, w[1], 0.0));
            assert!(c.disturbed_bound(w[0], 1e-3, 0.0) <= c.disturbed_bound(w[1], 1e-3, 0.0));
        }
    }

    /// The analytic residual only sees the angle of `(sin, cos)`, so roots
    /// are unique up to the radius; compare on the unit circle.
    fn on_circle(s: &[f64]) -> Vec<f64> {
        let r = s[0].hypot(s[1]);
        vec![s[0] / r, s[1] / r, s[2]]
    }

    #[test]
    fn exact_model_backtrack_recovers_expert_state() {
        let env = Pendulum::by_name("pendulum").unwrap();
        let d = env.gen_demos(1, 20, 2).unwrap();
        let tr = &d.transitions()[10];
        let label = backtrack_label(&env, tr, &ctx(&env, f64::INFINITY)).unwrap().unwrap();
        assert!(label.opt_residual <= 1e-6);
        assert!(l2_dist(&on_circle(&label.s_g), &tr.s) < 1e-5, "{:?} vs {:?}", label.s_g, tr.s);
    }

    #[test]
    fn exact_model_zero_disturbance_stays_on_anchor() {
        let env = Pendulum::by_name("pendulum").unwrap();
        let d = env.gen_demos(1, 20, 2).unwrap();
        let tr = &d.transitions()[5];
        let mut rng = RngStream::new(0, "t");
        // a vanishing disturbance leaves the expert state as the solution
        let label = disturbed_action_label(&env, tr, 1e-300, &ctx(&env, f64::INFINITY), &mut rng).unwrap().unwrap();
        assert!(l2_dist(&on_circle(&label.s_g), &tr.s) < 1e-5);
    }

    #[test]
    fn distance_rejection() {
        let env = Pendulum::by_name("pendulum").unwrap();
        let d = env.gen_demos(1, 20, 2).unwrap();
        let tr = &d.transitions()[3];
        let step = l2_dist(&tr.s, &tr.s_next);
        let out = backtrack_label(&env, tr, &ctx(&env, step * 0.5)).unwrap();
        assert_eq!(out, Err(Rejection::Distance));
    }

    #[test]
    fn clamped_disturbance_rejected() {
        let env = Pendulum::by_name("pendulum").unwrap();
        let d = env.gen_demos(1, 5, 2).unwrap();
        let mut tr = d.transitions()[0].clone();
        tr.a = ActionVec::new(vec![3.0]).unwrap();
        let c = ctx(&env, f64::INFINITY);
        let mut rejected = 0;
        let mut rng = RngStream::new(1, "t");
        for _ in 0..40 {
            if disturbed_action_label(&env, &tr, 1e-3, &c, &mut rng).unwrap() == Err(Rejection::Clamp) {
                rejected += 1;
            }
        }
        // positive disturbances at the upper bound are clamped away
        assert!((10..=30).contains(&rejected), "{rejected}");
    }

    #[test]
    fn summary_quantiles() {
        let s = Summary::of((1..=101).map(f64::from));
        assert_eq!((s.count, s.min, s.p50, s.p95, s.max), (101, 1.0, 51.0, 96.0, 101.0));
        assert!((s.mean - 51.0).abs() < 1e-12);
        assert_eq!(Summary::of(std::iter::empty()).count, 0);
    }
}
