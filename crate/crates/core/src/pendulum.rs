//! Analytic pendulum environment.
//!
//! Integration runs on the internal angle/velocity pair and observations
//! are rendered as `(sin θ, cos θ, θ̇)`, so emitted states stay on the unit
//! circle. The `pendulum-wall` variant reflects the angular velocity when the
//! pendulum reaches one of the configured wall angles.

use std::f64::consts::{PI, TAU};

use serde::{Deserialize, Serialize};

use crate::data::{ActionVec, Dataset, DatasetMeta, StateVec, Transition};
use crate::error::{Error, Result};
use crate::rng::RngStream;

pub const STATE_DIM: usize = 3;
pub const ACTION_DIM: usize = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PendulumParams {
    pub g: f64,
    pub l: f64,
    pub dt: f64,
    pub torque_min: f64,
    pub torque_max: f64,
    /// Wall angles in radians; empty for the continuous pendulum.
    #[serde(default)]
    pub walls: Vec<f64>,
}

impl Default for PendulumParams {
    fn default() -> Self {
        Self {
            g: 9.81,
            l: 1.0,
            dt: 0.02,
            torque_min: -3.0,
            torque_max: 3.0,
            walls: Vec::new(),
        }
    }
}

impl PendulumParams {
    /// Discontinuous variant with the default single wall at π/2.
    pub fn with_wall() -> Self {
        Self {
            walls: vec![PI / 2.0],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.l > 0.0) || !(self.dt > 0.0) || !(self.torque_min < self.torque_max) {
            return Err(Error::InvalidArgument(format!(
                "pendulum params need l > 0, dt > 0, torque_min < torque_max: {self:?}"
            )));
        }
        if self.walls.iter().any(|w| !w.is_finite()) {
            return Err(Error::InvalidArgument("wall angles must be finite".into()));
        }
        Ok(())
    }
}

/// Wraps an angle into `[0, 2π)`.
pub fn normalize_angle(theta: f64) -> f64 {
    let r = theta.rem_euclid(TAU);
    // rem_euclid can round up to exactly TAU for tiny negative inputs
    if r >= TAU {
        0.0
    } else {
        r
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PendulumState {
    pub theta: f64,
    pub theta_dot: f64,
}

impl PendulumState {
    pub fn new(theta: f64, theta_dot: f64) -> Self {
        Self {
            theta: normalize_angle(theta),
            theta_dot,
        }
    }

    /// Recovers the internal state from an observation, projecting
    /// `(sin, cos)` onto the circle via `atan2`.
    pub fn from_observation(s: &[f64]) -> Self {
        Self::new(s[0].atan2(s[1]), s[2])
    }
}

/// `(sin θ, cos θ, θ̇)`.
pub fn observe(x: &PendulumState) -> StateVec {
    let (sin, cos) = x.theta.sin_cos();
    StateVec::new(vec![sin, cos, x.theta_dot]).expect("finite pendulum state")
}

/// Angle in `[0, 2π)` encoded by an observation.
pub fn observed_angle(s: &[f64]) -> f64 {
    normalize_angle(s[0].atan2(s[1]))
}

/// Anything that maps observations to actions.
pub trait Controller {
    fn act(&self, s: &StateVec) -> Result<ActionVec>;
}

impl<F> Controller for F
where
    F: Fn(&StateVec) -> Result<ActionVec>,
{
    fn act(&self, s: &StateVec) -> Result<ActionVec> {
        self(s)
    }
}

/// LQR near the upright position, energy shaping elsewhere, clamped to ±3.
#[derive(Debug, Clone, Copy, Default)]
pub struct Expert;

impl Controller for Expert {
    fn act(&self, s: &StateVec) -> Result<ActionVec> {
        Ok(expert_action(s))
    }
}

pub fn expert_action(s: &[f64]) -> ActionVec {
    let theta = observed_angle(s);
    let theta_dot = s[2];
    let err = theta - PI;
    let u = if err.abs() < 0.1 {
        -20.11 * err - 7.08 * theta_dot
    } else {
        -theta_dot * (0.5 * theta_dot * theta_dot - 9.81 * theta.cos() - 9.81)
    };
    ActionVec::new(vec![u.clamp(-3.0, 3.0)]).expect("finite expert action")
}

/// `-½‖(θ - π, θ̇)‖² - ½‖a‖²` with θ in `[0, 2π)`.
pub fn reward(s: &[f64], a: &[f64]) -> f64 {
    let err = observed_angle(s) - PI;
    let a2: f64 = a.iter().map(|x| x * x).sum();
    -0.5 * (err * err + s[2] * s[2]) - 0.5 * a2
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub transitions: Vec<Transition>,
    pub total_reward: f64,
    pub final_state: PendulumState,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InitState {
    Fixed(PendulumState),
    /// θ ~ U[0, 2π), θ̇ ~ U[-1, 1].
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pendulum {
    pub params: PendulumParams,
}

impl Pendulum {
    pub fn new(params: PendulumParams) -> Result<Self> {
        params.validate()?;
        Ok(Self { params })
    }

    /// Environment by name: `pendulum` or `pendulum-wall`.
    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "pendulum" => Self::new(PendulumParams::default()),
            "pendulum-wall" => Self::new(PendulumParams::with_wall()),
            other => Err(Error::InvalidArgument(format!("unknown environment `{other}`"))),
        }
    }

    pub fn name(&self) -> &'static str {
        if self.params.walls.is_empty() {
            "pendulum"
        } else {
            "pendulum-wall"
        }
    }

    pub fn has_walls(&self) -> bool {
        !self.params.walls.is_empty()
    }

    pub fn clamp_action(&self, a: f64) -> f64 {
        a.clamp(self.params.torque_min, self.params.torque_max)
    }

    /// Time derivative of the observation vector.
    pub fn dynamics_continuous(&self, s: &[f64], a: &[f64]) -> StateVec {
        let (sin, cos, w) = (s[0], s[1], s[2]);
        let acc = -(self.params.g / self.params.l) * sin + a[0];
        StateVec::new(vec![w * cos, -w * sin, acc]).expect("finite derivative")
    }

    fn accel(&self, theta: f64, torque: f64) -> f64 {
        -(self.params.g / self.params.l) * theta.sin() + torque
    }

    /// One RK4 step of length `dt` followed by the wall rule. The angle is
    /// returned normalized to `[0, 2π)`.
    pub fn step(&self, x: &PendulumState, a: &[f64]) -> PendulumState {
        let u = self.clamp_action(a[0]);
        let h = self.params.dt;
        let (th, w) = (x.theta, x.theta_dot);
        let k1 = (w, self.accel(th, u));
        let k2 = (w + 0.5 * h * k1.1, self.accel(th + 0.5 * h * k1.0, u));
        let k3 = (w + 0.5 * h * k2.1, self.accel(th + 0.5 * h * k2.0, u));
        let k4 = (w + h * k3.1, self.accel(th + h * k3.0, u));
        let th_next = th + h / 6.0 * (k1.0 + 2.0 * k2.0 + 2.0 * k3.0 + k4.0);
        let w_next = w + h / 6.0 * (k1.1 + 2.0 * k2.1 + 2.0 * k3.1 + k4.1);
        match self.first_wall_hit(th, th_next) {
            Some(wall) => PendulumState::new(wall, -w_next),
            None => PendulumState::new(th_next, w_next),
        }
    }

    /// First wall angle (unwrapped) reached when moving from `from` to `to`.
    /// Starting exactly on a wall and moving away is not a hit.
    fn first_wall_hit(&self, from: f64, to: f64) -> Option<f64> {
        if from == to {
            return None;
        }
        let mut best: Option<f64> = None;
        for &wall in &self.params.walls {
            let wall = normalize_angle(wall);
            let hit = if to > from {
                // smallest wall + 2πk in (from, to]
                let k = ((from - wall) / TAU).floor() + 1.0;
                let mut c = wall + k * TAU;
                if c <= from {
                    c += TAU;
                }
                (c <= to).then_some(c)
            } else {
                // largest wall + 2πk in [to, from)
                let k = ((from - wall) / TAU).ceil() - 1.0;
                let mut c = wall + k * TAU;
                if c >= from {
                    c -= TAU;
                }
                (c >= to).then_some(c)
            };
            if let Some(c) = hit {
                let closer = match best {
                    Some(b) => (c - from).abs() < (b - from).abs(),
                    None => true,
                };
                if closer {
                    best = Some(c);
                }
            }
        }
        best
    }

    /// One-step residual `observe(step(x)) - s` for a valid observation.
    pub fn true_residual(&self, s: &[f64], a: &[f64]) -> Result<StateVec> {
        let r = (s[0] * s[0] + s[1] * s[1]).sqrt();
        if (r - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidArgument(format!(
                "not a valid pendulum observation: |(sin, cos)| = {r}"
            )));
        }
        Ok(self.true_residual_projected(s, a))
    }

    /// Residual from an arbitrary 3-vector: the successor of its projection
    /// onto the observation manifold, minus the vector itself.
    pub fn true_residual_projected(&self, s: &[f64], a: &[f64]) -> StateVec {
        let x = PendulumState::from_observation(s);
        let next = observe(&self.step(&x, a));
        StateVec::new(next.iter().zip(s).map(|(n, c)| n - c).collect()).expect("finite residual")
    }

    pub fn sample_init(&self, rng: &mut RngStream) -> PendulumState {
        let theta = rng.uniform(0.0, TAU);
        let theta_dot = rng.uniform(-1.0, 1.0);
        PendulumState::new(theta, theta_dot)
    }

    /// Runs `policy` for `horizon` steps. Noise is applied to the observation
    /// fed to the policy and to its action; recorded transitions hold the
    /// clean state and the applied (noisy, clamped) action.
    #[allow(clippy::too_many_arguments)]
    pub fn rollout<C: Controller + ?Sized>(
        &self,
        policy: &C,
        horizon: usize,
        init: InitState,
        obs_noise_std: f64,
        act_noise_std: f64,
        traj_id: u64,
        rng: &mut RngStream,
    ) -> Result<Rollout> {
        if horizon == 0 {
            return Err(Error::InvalidArgument("rollout horizon must be > 0".into()));
        }
        if !(obs_noise_std >= 0.0 && act_noise_std >= 0.0) {
            return Err(Error::InvalidArgument("noise std must be >= 0".into()));
        }
        let mut x = match init {
            InitState::Fixed(x) => PendulumState::new(x.theta, x.theta_dot),
            InitState::Random => self.sample_init(rng),
        };
        let mut transitions = Vec::with_capacity(horizon);
        let mut total = 0.0;
        for t in 0..horizon {
            let s = observe(&x);
            let mut obs = s.clone();
            if obs_noise_std > 0.0 {
                obs = crate::data::add_gaussian_noise(&obs, obs_noise_std, rng)?;
            }
            let raw = policy.act(&obs)?;
            if raw.dim() != ACTION_DIM || raw.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "policy output {:?} at step {t} is not a finite {ACTION_DIM}-vector",
                    raw.as_slice()
                )));
            }
            let mut u = raw[0];
            if act_noise_std > 0.0 {
                u += act_noise_std * rng.normal();
            }
            let a = ActionVec::new(vec![self.clamp_action(u)])?;
            total += reward(&s, &a);
            let next = self.step(&x, &a);
            transitions.push(Transition {
                traj_id,
                t: t as u64,
                s,
                a,
                s_next: observe(&next),
            });
            x = next;
        }
        Ok(Rollout {
            transitions,
            total_reward: total,
            final_state: x,
        })
    }

    /// `n_traj` noiseless expert rollouts from random initial states.
    pub fn gen_demos(&self, n_traj: usize, horizon: usize, seed: u64) -> Result<Dataset> {
        if n_traj == 0 {
            return Err(Error::InvalidArgument("n_traj must be >= 1".into()));
        }
        let base = RngStream::new(seed, "demos");
        let mut transitions = Vec::with_capacity(n_traj * horizon);
        for k in 0..n_traj {
            let mut rng = base.derive(&k.to_string());
            let ro = self.rollout(&Expert, horizon, InitState::Random, 0.0, 0.0, k as u64, &mut rng)?;
            transitions.extend(ro.transitions);
        }
        Dataset::new(
            DatasetMeta {
                d_s: STATE_DIM,
                d_a: ACTION_DIM,
                env_name: self.name().to_string(),
                seed,
            },
            transitions,
        )
    }

    /// True when the angular path from `a` to `b` (shortest way round)
    /// passes a wall angle.
    pub fn segment_crosses_wall(&self, a: &[f64], b: &[f64]) -> bool {
        if self.params.walls.is_empty() {
            return false;
        }
        let ta = observed_angle(a);
        let tb = observed_angle(b);
        let mut d = tb - ta;
        if d > PI {
            d -= TAU;
        } else if d < -PI {
            d += TAU;
        }
        self.first_wall_hit(ta, ta + d).is_some()
    }

    /// Largest on-manifold Lipschitz constant of the one-step residual over
    /// `θ ∈ [0, 2π)`, `|θ̇| <= speed_limit` and the action range, from a
    /// central-difference Jacobian sweep on a grid.
    pub fn residual_lipschitz_bound(&self, speed_limit: f64) -> f64 {
        let h = 1e-6;
        let n_theta = 90;
        let n_speed = 41;
        let actions = [self.params.torque_min, 0.0, self.params.torque_max];
        let mut best: f64 = 0.0;
        for i in 0..n_theta {
            let th = TAU * i as f64 / n_theta as f64;
            for j in 0..n_speed {
                let w = -speed_limit + 2.0 * speed_limit * j as f64 / (n_speed - 1) as f64;
                for &u in &actions {
                    let g = |th: f64, w: f64| -> [f64; 3] {
                        let x = PendulumState::new(th, w);
                        let s0 = observe(&x);
                        let s1 = observe(&self.step(&x, &[u]));
                        [s1[0] - s0[0], s1[1] - s0[1], s1[2] - s0[2]]
                    };
                    let (p, m) = (g(th + h, w), g(th - h, w));
                    let (q, n) = (g(th, w + h), g(th, w - h));
                    let mut jac = [[0.0; 2]; 3];
                    for r in 0..3 {
                        jac[r][0] = (p[r] - m[r]) / (2.0 * h);
                        jac[r][1] = (q[r] - n[r]) / (2.0 * h);
                    }
                    best = best.max(spectral_norm_3x2(&jac));
                }
            }
        }
        best
    }
}

fn spectral_norm_3x2(j: &[[f64; 2]; 3]) -> f64 {
    // largest eigenvalue of the 2x2 Gram matrix
    let a: f64 = j.iter().map(|r| r[0] * r[0]).sum();
    let b: f64 = j.iter().map(|r| r[0] * r[1]).sum();
    let d: f64 = j.iter().map(|r| r[1] * r[1]).sum();
    let tr = a + d;
    let det = a * d - b * b;
    let disc = (0.25 * tr * tr - det).max(0.0).sqrt();
    (0.5 * tr + disc).sqrt()
}
