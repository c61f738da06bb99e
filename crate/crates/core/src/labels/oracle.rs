//! Label generation with the true dynamics (no learned model).

use crate::data::{l2_dist, ActionVec, Dataset, StateVec};
use crate::error::{Error, Result};
use crate::pendulum::{Controller, InitState, Pendulum};
use crate::rng::RngStream;

use super::solver::{golden_section, root_residual};
use super::{CorrectiveLabel, Technique};

const ACTION_TOL: f64 = 1e-4;

/// Index of the expert state closest to `s` in L2.
pub fn nearest_expert_state(expert: &[StateVec], s: &[f64]) -> Option<usize> {
    expert
        .iter()
        .enumerate()
        .map(|(i, e)| (i, l2_dist(e, s)))
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(i, _)| i)
}

/// Action in the torque range minimizing `||s + f(s, a) - target||` under
/// the true dynamics, with the residual it achieves.
pub fn oracle_action(env: &Pendulum, s: &[f64], target: &[f64]) -> Result<(f64, f64)> {
    let (lo, hi) = (env.params.torque_min, env.params.torque_max);
    let mut failure = None;
    let (a, _, _) = golden_section(
        |u| match root_residual(env, s, &[u], target) {
            Ok(r) => r,
            Err(e) => {
                failure.get_or_insert(e);
                f64::INFINITY
            }
        },
        lo,
        hi,
        ACTION_TOL,
    );
    if let Some(e) = failure {
        return Err(e);
    }
    let res = root_residual(env, s, &[a], target)?;
    Ok((a, res))
}

/// Rolls out `policy` from random starts and labels every visited state
/// with the action steering it toward its nearest expert state.
pub fn oracle_labels_known_dynamics<C: Controller + ?Sized>(
    env: &Pendulum,
    policy: &C,
    expert: &Dataset,
    n_rollouts: usize,
    horizon: usize,
    seed: u64,
) -> Result<Vec<CorrectiveLabel>> {
    if expert.is_empty() {
        return Err(Error::InvalidArgument("oracle labels need expert states".into()));
    }
    if expert.d_a() != 1 {
        return Err(Error::InvalidArgument("oracle action search is one-dimensional".into()));
    }
    let states: Vec<StateVec> = expert.transitions().iter().map(|t| t.s.clone()).collect();
    let mut labels = Vec::new();
    for k in 0..n_rollouts {
        let mut rng = RngStream::new(seed, &format!("oracle/{k}"));
        let ro = env.rollout(policy, horizon, InitState::Random, 0.0, 0.0, k as u64, &mut rng)?;
        for tr in &ro.transitions {
            let j = nearest_expert_state(&states, &tr.s).expect("non-empty");
            let target = &states[j];
            let (a, res) = oracle_action(env, &tr.s, target)?;
            labels.push(CorrectiveLabel {
                s_g: tr.s.clone(),
                a_g: ActionVec::new(vec![a])?,
                s_target: target.clone(),
                technique: Technique::Oracle,
                opt_residual: res,
                anchor_distance: l2_dist(&tr.s, target),
                delta_norm: 0.0,
                // the true dynamics leave only the optimization error
                bound: res,
                source: (tr.traj_id, tr.t),
            });
        }
    }
    Ok(labels)
}
