//! End-to-end acceptance run on the pendulum. Prints one PASS/FAIL line
//! per criterion and exits non-zero when any criterion fails.

mod common;

use std::f64::consts::PI;
use std::path::Path;
use std::time::Instant;

use ccil_core::data::{save_dataset, split, Dataset};
use ccil_core::dynamics::{train_dynamics, DynamicsModel, RegConfig};
use ccil_core::eval::{bounds_csv, evaluate, metrics_csv, verify_bounds, Comparison, EvalConfig};
use ccil_core::labels::{generate_labels, load_labels, save_labels, CorrectiveLabel, GenConfig, KSource};
use ccil_core::nn::{Mlp, TrainConfig};
use ccil_core::pendulum::{Expert, InitState, Pendulum, PendulumState};
use ccil_core::policy::{train_bc, BcConfig};
use ccil_core::rng::RngStream;

const SEEDS: u64 = 10;
const CONTINUOUS_DEMOS: usize = 50;
const WALL_DEMOS: usize = 500;
const HORIZON: usize = 500;
const CONTINUOUS_BC_EPOCHS: usize = 100;
const WALL_BC_EPOCHS: usize = 20;
const WALL_DYNAMICS_EPOCHS: usize = 20;

const EPS_REJ: f64 = 0.01;
const EPS_OPT: f64 = 1e-6;
const VIOLATION_CAP: f64 = 0.05;
const BOUND_RUNTIME_S: f64 = 600.0;
const POLICY_RUNTIME_S: f64 = 3600.0;
const GRAD_TOL: f64 = 1e-4;
const EULER_TOL: f64 = 1e-8;
const ENERGY_TOL: f64 = 1e-9;
const SPECTRAL_BOUND: f64 = 3.0;
const SPECTRAL_SLACK: f64 = 1e-6;
const HINGE_L: f64 = 10.0;
const HINGE_FRACTION: f64 = 0.9;
const UPRIGHT_FRACTION: f64 = 0.95;

struct Outcome {
    id: u8,
    name: &'static str,
    pass: bool,
    detail: String,
}

fn report(out: &mut Vec<Outcome>, id: u8, name: &'static str, pass: bool, detail: String) {
    println!("criterion {id} {} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    out.push(Outcome { id, name, pass, detail });
}

fn workers() -> usize {
    std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
}

fn upright(x: &PendulumState) -> bool {
    (x.theta - PI).abs() < 0.1 && x.theta_dot.abs() < 0.5
}

fn gradients() -> (bool, String) {
    let mut worst = (0.0f64, 0.0f64);
    let mut checked = 0;
    let mut rng = RngStream::new(0, "acceptance/gradients");
    for k in 0..100u64 {
        let widths: &[usize] = if k % 2 == 0 { &[4, 64, 64, 3] } else { &[3, 64, 64, 1] };
        let net = Mlp::init(widths, k).unwrap();
        let mut x: Vec<f64> = (0..widths[0]).map(|_| rng.normal()).collect();
        while net.min_abs_preactivation(&x) < 1e-3 {
            x = (0..widths[0]).map(|_| rng.normal()).collect();
        }
        let t: Vec<f64> = (0..widths[3]).map(|_| rng.normal()).collect();
        let (ep, ex) = common::gradient_errors(&net, &x, &t);
        worst = (worst.0.max(ep), worst.1.max(ex));
        checked += 1;
    }
    let pass = worst.0 < GRAD_TOL && worst.1 < GRAD_TOL;
    (pass, format!("{checked} nets, max rel err params {:.2e} inputs {:.2e} (tol {GRAD_TOL:e})", worst.0, worst.1))
}

fn integrator(env: &Pendulum) -> (bool, String) {
    let g_over_l = env.params.g / env.params.l;
    let dt = env.params.dt;
    let mut rng = RngStream::new(0, "acceptance/integrator");
    let (mut euler_err, mut fine_err, mut drift) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..100 {
        let x = env.sample_init(&mut rng);
        let u = rng.uniform(env.params.torque_min, env.params.torque_max);
        let next = env.step(&x, &[u]);
        let (th, w) = common::euler_oracle(x.theta, x.theta_dot, u, g_over_l, dt, 1e-6);
        euler_err = euler_err.max(common::angle_gap(next.theta, th)).max((next.theta_dot - w).abs());
        let (th, w) = common::fine_rk4_oracle(x.theta, x.theta_dot, u, g_over_l, dt, 1000);
        fine_err = fine_err.max(common::angle_gap(next.theta, th)).max((next.theta_dot - w).abs());

        let free = env.step(&x, &[0.0]);
        let e0 = common::energy(x.theta, x.theta_dot, g_over_l);
        let e1 = common::energy(free.theta, free.theta_dot, g_over_l);
        drift = drift.max((e1 - e0).abs());
    }
    let pass = euler_err <= EULER_TOL && drift <= ENERGY_TOL;
    (
        pass,
        format!(
            "max |rk4 - euler(1e-6)| {euler_err:.2e} (tol {EULER_TOL:e}), max energy drift/step {drift:.2e} (tol {ENERGY_TOL:e}); \
             max |rk4 - rk4(1000 substeps)| {fine_err:.2e}"
        ),
    )
}

fn expert(env: &Pendulum) -> (bool, String) {
    let base = RngStream::new(0, "acceptance/expert");
    let mut ok = 0;
    for k in 0..100u64 {
        let mut rng = base.derive(&k.to_string());
        let ro = env.rollout(&Expert, HORIZON, InitState::Random, 0.0, 0.0, k, &mut rng).unwrap();
        ok += usize::from(upright(&ro.final_state));
    }
    let frac = ok as f64 / 100.0;
    (frac >= UPRIGHT_FRACTION, format!("{ok}/100 upright at T={HORIZON} (need {UPRIGHT_FRACTION})"))
}

struct Variant {
    env: Pendulum,
    demos: Dataset,
    train: Dataset,
    val: Dataset,
}

fn variant(name: &str, n_traj: usize) -> Variant {
    let env = Pendulum::by_name(name).unwrap();
    let demos = env.gen_demos(n_traj, HORIZON, 0).unwrap();
    let (train, val) = split(&demos, 0.2, &mut RngStream::new(0, "dynamics/split")).unwrap();
    Variant { env, demos, train, val }
}

fn fit(v: &Variant, reg: &RegConfig, epochs: Option<usize>) -> DynamicsModel {
    let mut tc = TrainConfig::default();
    if let Some(e) = epochs {
        tc.epochs = e;
        tc.patience = e;
    }
    train_dynamics(&v.train, &v.val, reg, &tc).unwrap()
}

fn labels_for(v: &Variant, model: &DynamicsModel) -> Vec<CorrectiveLabel> {
    let cfg = GenConfig { k_source: KSource::Sampled, ..GenConfig::default() };
    let (labels, rep) = generate_labels(model, &v.demos, &v.env, &cfg, workers()).unwrap();
    println!(
        "  labels on {}: attempted {} emitted {} (residual {} distance {} clamp {} wall {})",
        v.env.name(),
        rep.attempted,
        rep.emitted,
        rep.rejected_residual,
        rep.rejected_distance,
        rep.rejected_clamp,
        rep.rejected_wall
    );
    labels
}

/// Mean noisy-evaluation return of one policy per training seed.
fn seed_returns(v: &Variant, labels: &[CorrectiveLabel], epochs: usize) -> Vec<f64> {
    let bounds = (v.env.params.torque_min, v.env.params.torque_max);
    (0..SEEDS)
        .map(|seed| {
            let cfg = BcConfig {
                train: TrainConfig { epochs, patience: epochs, seed, ..TrainConfig::default() },
                ..BcConfig::default()
            };
            let policy = train_bc(&v.demos, labels, bounds, &cfg).unwrap();
            let m = evaluate(&policy, &v.env, &EvalConfig { seed, ..EvalConfig::default() }, workers()).unwrap();
            println!(
                "  {} seed {seed} labels {}: return {:.1} upright {:.2}",
                v.env.name(),
                labels.len(),
                m.mean_return,
                m.upright_rate
            );
            m.mean_return
        })
        .collect()
}

fn rejection_guarantee(labels: &[CorrectiveLabel], dir: &Path) -> (bool, String) {
    let path = dir.join("labels.jsonl");
    save_labels(labels, &path).unwrap();
    let loaded = load_labels(&path).unwrap();
    let bad = loaded
        .iter()
        .filter(|l| !(l.anchor_distance <= EPS_REJ && l.opt_residual <= EPS_OPT))
        .count();
    (
        bad == 0 && !loaded.is_empty(),
        format!("{} labels in file, {bad} outside anchor_distance <= {EPS_REJ} / opt_residual <= {EPS_OPT:e}", loaded.len()),
    )
}

/// Runs every stage twice on a small configuration and compares the
/// serialized outputs byte for byte.
fn determinism(dir: &Path) -> (bool, String) {
    let run = |tag: &str| -> Vec<(String, Vec<u8>)> {
        let root = dir.join(tag);
        std::fs::create_dir_all(&root).unwrap();
        let env = Pendulum::by_name("pendulum").unwrap();
        let demos = env.gen_demos(5, 100, 9).unwrap();
        save_dataset(&demos, &root.join("demos.jsonl")).unwrap();
        let (train, val) = split(&demos, 0.2, &mut RngStream::new(9, "dynamics/split")).unwrap();
        let tc = TrainConfig { epochs: 5, seed: 9, ..TrainConfig::default() };
        let model = train_dynamics(&train, &val, &RegConfig::hinge(10.0, 0.5, 3e-4), &tc).unwrap();
        model.save(&root.join("model.json")).unwrap();
        let (labels, _) = generate_labels(&model, &demos, &env, &GenConfig { seed: 9, ..GenConfig::default() }, 2).unwrap();
        save_labels(&labels, &root.join("labels.jsonl")).unwrap();
        let bc = BcConfig { train: TrainConfig { epochs: 5, seed: 9, ..TrainConfig::default() }, ..BcConfig::default() };
        let policy = train_bc(&demos, &labels, (-3.0, 3.0), &bc).unwrap();
        policy.save(&root.join("policy.json")).unwrap();
        let ec = EvalConfig { episodes: 5, horizon: 100, seed: 9, ..EvalConfig::default() };
        let m = evaluate(&policy, &env, &ec, 2).unwrap();
        std::fs::write(root.join("metrics.csv"), metrics_csv(&m)).unwrap();
        let b = verify_bounds(&labels, &model, &env).unwrap();
        std::fs::write(root.join("bounds.csv"), bounds_csv(&b)).unwrap();
        let mut files: Vec<_> = std::fs::read_dir(&root)
            .unwrap()
            .map(|e| {
                let p = e.unwrap().path();
                (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap())
            })
            .collect();
        files.sort();
        files
    };
    let (a, b) = (run("a"), run("b"));
    let differing: Vec<&str> = a.iter().zip(&b).filter(|(x, y)| x != y).map(|(x, _)| x.0.as_str()).collect();
    let pass = a.len() == b.len() && a.len() == 6 && differing.is_empty();
    (pass, format!("{} stage outputs compared, differing: {differing:?}", a.len()))
}

fn main() {
    let started = Instant::now();
    let tmp = tempfile::tempdir().unwrap();
    let mut out = Vec::new();

    let (p, d) = gradients();
    report(&mut out, 5, "gradient correctness", p, d);

    let continuous_env = Pendulum::by_name("pendulum").unwrap();
    let (p, d) = integrator(&continuous_env);
    report(&mut out, 6, "integrator correctness", p, d);

    let (p, d) = expert(&continuous_env);
    report(&mut out, 9, "expert validity", p, d);

    let (p, d) = determinism(tmp.path());
    report(&mut out, 8, "determinism", p, d);

    // bound verification, timed from demos to verification
    let t1 = Instant::now();
    let cont = variant("pendulum", CONTINUOUS_DEMOS);
    let hinge = fit(&cont, &RegConfig::hinge(HINGE_L, 0.5, 3e-4), None);
    let labels = labels_for(&cont, &hinge);
    let bounds = verify_bounds(&labels, &hinge, &cont.env).unwrap();
    let elapsed = t1.elapsed().as_secs_f64();
    let pass = bounds.mean_corrective_error <= bounds.mean_bound
        && bounds.violation_rate <= VIOLATION_CAP
        && elapsed <= BOUND_RUNTIME_S;
    report(
        &mut out,
        1,
        "bound verification",
        pass,
        format!(
            "mean corrective error {:.3e} vs mean bound {:.3e}, violation rate {:.4} (cap {VIOLATION_CAP}), mean model error {:.3e}, {elapsed:.0}s",
            bounds.mean_corrective_error, bounds.mean_bound, bounds.violation_rate, bounds.mean_model_error
        ),
    );

    let (p, d) = rejection_guarantee(&labels, tmp.path());
    report(&mut out, 2, "rejection guarantee", p, d);

    let spectral = fit(&cont, &RegConfig::spectral(SPECTRAL_BOUND), None);
    let max_norm = spectral.net.layers().iter().map(|l| common::svd_norm(&l.w)).fold(0.0, f64::max);
    let frac = hinge.lipschitz_report.fraction_within_target.unwrap_or(0.0);
    report(
        &mut out,
        7,
        "spectral enforcement",
        max_norm <= SPECTRAL_BOUND + SPECTRAL_SLACK && frac >= HINGE_FRACTION,
        format!(
            "max layer norm {max_norm:.9} (cap {}), hinge L={HINGE_L} within target at {frac:.3} of {} anchors (need {HINGE_FRACTION})",
            SPECTRAL_BOUND + SPECTRAL_SLACK,
            hinge.lipschitz_report.n_anchors
        ),
    );

    let t3 = Instant::now();
    let bc_cont = seed_returns(&cont, &[], CONTINUOUS_BC_EPOCHS);
    let ccil_cont = seed_returns(&cont, &labels, CONTINUOUS_BC_EPOCHS);
    let wall = variant("pendulum-wall", WALL_DEMOS);
    let wall_model = fit(&wall, &RegConfig::hinge(HINGE_L, 0.5, 3e-4), Some(WALL_DYNAMICS_EPOCHS));
    let wall_labels = labels_for(&wall, &wall_model);
    let bc_wall = seed_returns(&wall, &[], WALL_BC_EPOCHS);
    let ccil_wall = seed_returns(&wall, &wall_labels, WALL_BC_EPOCHS);
    let elapsed = t3.elapsed().as_secs_f64();
    let c = Comparison::from_samples(&ccil_cont, &bc_cont).unwrap();
    let w = Comparison::from_samples(&ccil_wall, &bc_wall).unwrap();
    report(
        &mut out,
        3,
        "CCIL vs BC",
        c.diff > c.pooled_se && w.diff >= 0.0 && elapsed <= POLICY_RUNTIME_S,
        format!(
            "continuous CCIL {:.1} vs BC {:.1} (diff {:.1}, pooled SE {:.1}); wall CCIL {:.1} vs BC {:.1} (diff {:.1}, pooled SE {:.1}); {elapsed:.0}s",
            c.mean_a, c.mean_b, c.diff, c.pooled_se, w.mean_a, w.mean_b, w.diff, w.pooled_se
        ),
    );

    let plain = fit(&cont, &RegConfig::none(), None);
    let plain_labels = labels_for(&cont, &plain);
    let ccil_plain = seed_returns(&cont, &plain_labels, CONTINUOUS_BC_EPOCHS);
    let r = Comparison::from_samples(&ccil_plain, &ccil_cont).unwrap();
    report(
        &mut out,
        4,
        "regularization effect",
        r.mean_a <= r.mean_b,
        format!("unregularized-model CCIL {:.1} vs hinge-model CCIL {:.1} (pooled SE {:.1})", r.mean_a, r.mean_b, r.pooled_se),
    );

    out.sort_by_key(|o| o.id);
    println!("\nsummary ({:.0}s):", started.elapsed().as_secs_f64());
    for o in &out {
        println!("  {} {} {}: {}", o.id, if o.pass { "PASS" } else { "FAIL" }, o.name, o.detail);
    }
    if out.iter().any(|o| !o.pass) {
        std::process::exit(1);
    }
}
