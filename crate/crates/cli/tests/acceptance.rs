//! Acceptance suite. Runs every criterion in order, prints one PASS/FAIL line
//! each and exits non-zero if any fails.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use safeaoc_core::critic::{extrapolation_grid, BasisSpec, Critic, CriticGains, CriticState};
use safeaoc_core::harness::config::{load_config, to_toml, ExperimentConfig};
use safeaoc_core::harness::{build_setup, run_experiment, RunOutput, Setup};
use safeaoc_core::histstack::{HistoryStack, StackManagerState, StackParams, StackRole, WindowBuffer, WindowSample};
use safeaoc_core::numerics::{norm, place_observer_gain, rk4_step, sym_eig_range, Matrix};
use safeaoc_core::observer::{Activation, DnnSpec, Observer, ObserverGains, ObserverState};
use safeaoc_core::plant::{benchmark_system, CostSpec, PlantModel};
use safeaoc_core::qp::{plane_oracle, scalar_oracle, solve_safety_qp, QpStatus, SafetyQP};
use safeaoc_core::trainer::{network_jacobian, network_output};

struct Verdict {
    id: usize,
    name: &'static str,
    pass: bool,
    detail: String,
}

fn config(name: &str, overrides: &[(&str, &str)]) -> ExperimentConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(format!("{name}.toml"));
    let text = std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    let ov: Vec<(String, String)> = overrides.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
    load_config(Some(&text), &ov).unwrap()
}

fn run(cfg: &ExperimentConfig) -> RunOutput {
    let out = run_experiment(cfg).unwrap();
    if let Some(f) = &out.summary.fault {
        eprintln!("run fault at t = {}: {}", f.t, f.message);
    }
    out
}

struct Study {
    cfg: ExperimentConfig,
    robust: RunOutput,
    ablation: RunOutput,
}

fn study(name: &str) -> Study {
    let cfg = config(name, &[]);
    let robust = run(&cfg);
    let ablation = run(&config(name, &[("mode", "no_cbf")]));
    Study { cfg, robust, ablation }
}

fn criterion_convex(s: &Study) -> Verdict {
    let safe = s.robust.summary.metrics.min_h_x;
    let crossed = s.ablation.summary.metrics.min_h_x;
    let rt = s.robust.summary.runtime_s.max(s.ablation.summary.runtime_s);
    Verdict {
        id: 1,
        name: "convex-set study",
        pass: s.robust.summary.fault.is_none() && safe >= -1e-6 && crossed < 0.0 && rt <= 60.0,
        detail: format!("robust min h = {safe:.6}, no_cbf min h = {crossed:.6}, slowest run {rt:.1} s"),
    }
}

fn criterion_obstacle(s: &Study) -> Verdict {
    let m = &s.robust.summary.metrics;
    let clear = m.min_obstacle_clearance.unwrap_or(f64::NEG_INFINITY);
    let collide = s.ablation.summary.metrics.min_obstacle_clearance.unwrap_or(f64::INFINITY);
    let rt = s.robust.summary.runtime_s.max(s.ablation.summary.runtime_s);
    Verdict {
        id: 2,
        name: "obstacle study",
        pass: s.robust.summary.fault.is_none() && clear >= -1e-6 && m.final_x_norm <= 0.2 && collide < 0.0 && rt <= 60.0,
        detail: format!(
            "robust clearance = {clear:.6}, final |x| = {:.6}, no_cbf clearance = {collide:.6}, slowest run {rt:.1} s",
            m.final_x_norm
        ),
    }
}

fn late_error(out: &RunOutput) -> f64 {
    out.log.records.iter().filter(|r| r.t >= 15.0).map(|r| r.xtilde_norm()).fold(0.0, f64::max)
}

fn criterion_estimation(convex: &Study, obstacle: &Study) -> Verdict {
    let (a, b) = (late_error(&convex.robust), late_error(&obstacle.robust));
    Verdict {
        id: 3,
        name: "estimation convergence",
        pass: a <= 0.1 && b <= 0.1,
        detail: format!("max |x~| for t >= 15 s: convex {a:.4}, obstacle {b:.4}"),
    }
}

fn random_qp(rng: &mut ChaCha8Rng, m: usize) -> SafetyQP {
    let mut g_minus = Vec::with_capacity(m);
    let mut g_plus = Vec::with_capacity(m);
    for _ in 0..m {
        let mag = rng.gen_range(0.2..3.0);
        let extra = rng.gen_range(0.0..2.0);
        if rng.gen::<bool>() {
            g_minus.push(mag);
            g_plus.push(mag + extra);
        } else {
            g_minus.push(-(mag + extra));
            g_plus.push(-mag);
        }
    }
    SafetyQP {
        desired: (0..m).map(|_| rng.gen_range(-5.0..5.0)).collect(),
        f: rng.gen_range(-5.0..5.0),
        g_minus,
        g_plus,
    }
}

fn criterion_qp() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst_gap: f64 = 0.0;
    let mut worst_kkt: f64 = 0.0;
    let mut failures = 0;
    for (m, count) in [(1usize, 1000usize), (2, 200)] {
        for _ in 0..count {
            let qp = random_qp(&mut rng, m);
            let sol = solve_safety_qp(&qp).unwrap();
            let gap = if m == 1 {
                (sol.u[0] - scalar_oracle(&qp, -31.0, 31.0, 5e-5).unwrap()).abs()
            } else {
                let o = plane_oracle(&qp, -31.0, 31.0, 5e-5).unwrap();
                norm(&[sol.u[0] - o[0], sol.u[1] - o[1]])
            };
            worst_gap = worst_gap.max(gap);
            worst_kkt = worst_kkt.max(sol.kkt_residual);
            if sol.status != QpStatus::Optimal || gap > 1e-4 || sol.kkt_residual > 1e-8 {
                failures += 1;
            }
        }
    }
    Verdict {
        id: 4,
        name: "QP oracle equivalence",
        pass: failures == 0,
        detail: format!("1000 scalar + 200 planar instances, worst oracle gap {worst_gap:.2e}, worst KKT {worst_kkt:.2e}, {failures} failures"),
    }
}

fn criterion_icl() -> Verdict {
    let started = Instant::now();
    // weights scaled up from the default initialization so the features are
    // visibly nonlinear over the sampled region
    let mut dnn = DnnSpec::random(2, &[4], &[Activation::TanhSigmoid], &[0], false, 17).unwrap();
    dnn.set_params(&dnn.params().iter().map(|w| 4.0 * w).collect::<Vec<_>>());
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let theta_star = Matrix::from_row_slice(4, 2, &(0..8).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<_>>()).unwrap();
    let a = Matrix::from_rows(&[vec![0.0, 1.0], vec![-1.0, -1.0]]).unwrap();
    let b = Matrix::column(&[0.0, 1.0]);
    let c = Matrix::row(&[1.0, 0.0]);
    let k = place_observer_gain(&a, &c, &[-3.0, -4.0]).unwrap();
    let gains = ObserverGains { k_theta: 20.0, kappa: 0.5, gamma: Matrix::identity(4), theta_bar: 10.0, band: 0.1 };
    let obs = Observer::new(a.clone(), c, k, Matrix::identity(2), dnn.clone(), gains).unwrap();

    // synthetic plant ẋ = Ax + θ*ᵀφ(x) + Bu, one window per random start and
    // constant input
    let dt = 1e-3;
    let window = 0.25;
    let params = StackParams { capacity: 12, window, ..StackParams::default() };
    let mut mgr = StackManagerState::new(params, 4, 2, Vec::new()).unwrap();
    for _ in 0..60 {
        let mut x = vec![rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)];
        let u = [rng.gen_range(-2.0..2.0)];
        let known = b.matvec(&u);
        let rhs = |v: &[f64], _: f64| {
            let mut d = a.matvec(v);
            let learned = theta_star.tr_matvec(&dnn.features(v));
            for i in 0..2 {
                d[i] += known[i] + learned[i];
            }
            d
        };
        let mut buf = WindowBuffer::new(window, dt);
        let steps = (window / dt).round() as usize;
        for step in 0..=steps {
            let t = step as f64 * dt;
            let mut rate = a.matvec(&x);
            rate.iter_mut().zip(&known).for_each(|(r, k)| *r += k);
            let sample = WindowSample { t, xhat: x.clone(), features: dnn.features(&x), model_rate: rate };
            if let Some(d) = buf.accumulate(sample).unwrap() {
                mgr.consider(d).unwrap();
                break;
            }
            x = rk4_step(rhs, &x, t, dt).unwrap();
        }
    }
    let sums = mgr.auxiliary.sums();
    let mut state = ObserverState { xhat: vec![0.0; 2], theta: Matrix::zeros(4, 2) };
    for _ in 0..10_000 {
        state = obs.icl_update(&state, &sums, dt);
    }
    let rel = state.theta.sub(&theta_star).frobenius_norm() / theta_star.frobenius_norm();
    let elapsed = started.elapsed().as_secs_f64();
    Verdict {
        id: 5,
        name: "ICL identification",
        pass: rel <= 0.01 && elapsed <= 10.0,
        detail: format!(
            "relative error {rel:.2e} after 10 s, stack lambda_min {:.3e}, {elapsed:.2} s",
            mgr.auxiliary.min_eig
        ),
    }
}

/// Kleinman iteration, each Lyapunov step through nalgebra's Kronecker LU.
fn riccati(a: &DMatrix<f64>, b: &DMatrix<f64>, q: &DMatrix<f64>, r: f64) -> DMatrix<f64> {
    let n = a.nrows();
    let eye = DMatrix::<f64>::identity(n, n);
    let mut k = DMatrix::<f64>::zeros(1, n);
    let mut p = DMatrix::<f64>::zeros(n, n);
    for _ in 0..50 {
        let at = (a - b * &k).transpose();
        let rhs = -(q + k.transpose() * &k * r);
        let sys = eye.kronecker(&at) + at.kronecker(&eye);
        let v = sys.lu().solve(&DVector::from_column_slice(rhs.as_slice())).unwrap();
        p = DMatrix::from_column_slice(n, n, v.as_slice());
        k = b.transpose() * &p / r;
    }
    p
}

fn criterion_lq() -> Verdict {
    let a = Matrix::from_rows(&[vec![0.0, 1.0], vec![-2.0, -3.0]]).unwrap();
    let b = Matrix::column(&[0.0, 1.0]);
    let plant = PlantModel::linear(a.clone(), b.clone(), Matrix::row(&[1.0, 0.0]));
    let cost = CostSpec::new(Matrix::identity(2), Matrix::identity(1)).unwrap();
    let p = riccati(
        &DMatrix::from_row_slice(2, 2, a.as_slice()),
        &DMatrix::from_row_slice(2, 1, b.as_slice()),
        &DMatrix::identity(2, 2),
        1.0,
    );
    let target = [p[(0, 0)], 2.0 * p[(0, 1)], p[(1, 1)]];
    let gains = CriticGains { kc: 5.0, ka1: 0.5, ka2: 0.1, nu: 0.7, beta: 0.01, w_bar: 10.0, kappa_p: 0.1, gamma_max: 1e4, gamma_min: 1e-6 };
    let critic = Critic::new(BasisSpec::quadratic2(), gains, extrapolation_grid(10, 1.0), &plant, &cost).unwrap();
    let mut state = CriticState { wc: vec![1.0; 3], wa: vec![1.0; 3], gamma: Matrix::identity(3).scale(0.5) };
    for _ in 0..20_000 {
        state = critic.update_step(&state, &|x| plant.drift(x), &cost, 1e-3).unwrap();
    }
    let worst = (0..3).map(|i| (state.wc[i] - target[i]).abs() / target[i].abs()).fold(0.0, f64::max);
    Verdict {
        id: 6,
        name: "LQ critic oracle",
        pass: worst <= 0.05,
        detail: format!("Wc = {:.4?}, Riccati {:.4?}, worst relative gap {worst:.2e}", state.wc, target),
    }
}

/// Per-step invariants read back from a trajectory log.
fn log_invariants(cfg: &ExperimentConfig, out: &RunOutput, failures: &mut Vec<String>) {
    let omega_bound = 1.0 / (2.0 * cfg.critic.nu.sqrt());
    let wa_bound = cfg.critic.w_bar * (1.0 + cfg.critic.kappa_p);
    let theta_bound = cfg.observer.theta_bar * (1.0 + cfg.observer.band);
    let label = format!("{} {}", cfg.benchmark.as_str(), cfg.mode.as_str());
    for r in &out.log.records {
        let checks = [
            (r.omega_rho_max <= omega_bound + 1e-12, "omega/rho bound"),
            (r.gamma_eig_min > 0.0, "Gamma SPD"),
            (norm(&r.wa) <= wa_bound, "Wa projection bound"),
            (norm(&r.theta) <= theta_bound, "theta projection bound"),
        ];
        for (ok, what) in checks {
            if !ok {
                failures.push(format!("{label}: {what} broken at t = {}", r.t));
                return;
            }
        }
    }
}

fn fd_check(f: impl Fn(&[f64]) -> Vec<f64>, jac: &Matrix, x: &[f64], h: f64, tol: f64) -> bool {
    (0..x.len()).all(|j| {
        let mut xp = x.to_vec();
        let mut xm = x.to_vec();
        xp[j] += h;
        xm[j] -= h;
        let (fp, fm) = (f(&xp), f(&xm));
        (0..fp.len()).all(|i| ((fp[i] - fm[i]) / (2.0 * h) - jac[(i, j)]).abs() <= tol * jac[(i, j)].abs().max(1.0))
    })
}

fn setup_invariants(cfg: &ExperimentConfig, setup: &Setup, failures: &mut Vec<String>) {
    let label = cfg.benchmark.as_str();
    let obs = &setup.observer;
    let acl = obs.a.sub(&obs.k.matmul(&obs.c));
    let resid = acl.transpose().matmul(&obs.p).add(&obs.p.matmul(&acl)).add(&obs.s);
    if resid.frobenius_norm() > 1e-9 * obs.s.frobenius_norm() {
        failures.push(format!("{label}: Lyapunov residual {:.2e}", resid.frobenius_norm()));
    }
    if cfg.observer.k.is_none() {
        let mut eig: Vec<f64> = DMatrix::from_row_slice(2, 2, acl.as_slice()).complex_eigenvalues().iter().map(|z| z.re).collect();
        let mut poles = cfg.observer.poles.clone();
        eig.sort_by(f64::total_cmp);
        poles.sort_by(f64::total_cmp);
        let gap = eig.iter().zip(&poles).map(|(e, p)| (e - p).abs() / p.abs().max(1.0)).fold(0.0, f64::max);
        if gap > 1e-8 {
            failures.push(format!("{label}: pole placement residual {gap:.2e}"));
        }
    }

    // incremental stack sums against a rebuild, after a round of replacements
    let data = &setup.offline_stack;
    if !data.is_empty() {
        let mut stack = HistoryStack::new(StackRole::Active, data.len(), obs.gains.kappa, obs.p_features(), obs.n());
        for d in data {
            stack.push(d.clone()).unwrap();
        }
        for (slot, d) in data.iter().rev().enumerate() {
            stack.replace(slot, d.clone()).unwrap();
        }
        let mut fresh = stack.clone();
        fresh.recompute().unwrap();
        let gap = stack.sigma_y.sub(&fresh.sigma_y).frobenius_norm().max(stack.sigma_yx.sub(&fresh.sigma_yx).frobenius_norm());
        if gap > 1e-10 {
            failures.push(format!("{label}: stack cache drift {gap:.2e}"));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let (_, barrier, _) = benchmark_system(cfg.benchmark);
    let basis = setup.critic.basis();
    let dnn = obs.dnn();
    let theta = Matrix::from_row_slice(dnn.p(), 2, &(0..dnn.p() * 2).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<_>>()).unwrap();
    for _ in 0..50 {
        let x = [rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)];
        let g = barrier.grad(&x);
        if !fd_check(|v| vec![barrier.h(v)], &Matrix::row(&g), &x, 1e-6, 1e-5) {
            failures.push(format!("{label}: barrier gradient at {x:?}"));
        }
        if !fd_check(|v| basis.sigma(v), &basis.jac(&x), &x, 1e-6, 1e-5) {
            failures.push(format!("{label}: basis Jacobian at {x:?}"));
        }
        let params = dnn.params();
        let jac = network_jacobian(dnn, &theta, &x);
        let net_at = |p: &[f64]| {
            let mut d = dnn.clone();
            d.set_params(p);
            network_output(&d, &theta, &x)
        };
        if !fd_check(net_at, &jac, &params, 1e-6, 1e-4) {
            failures.push(format!("{label}: network Jacobian at {x:?}"));
        }
    }
    let (lo, _) = sym_eig_range(&setup.critic_state.gamma).unwrap();
    if lo <= 0.0 {
        failures.push(format!("{label}: initial Gamma not SPD"));
    }
}

fn criterion_invariants(studies: &[&Study]) -> Verdict {
    let mut failures = Vec::new();
    let mut steps = 0;
    for s in studies {
        for out in [&s.robust, &s.ablation] {
            log_invariants(&s.cfg, out, &mut failures);
            steps += out.log.records.len();
        }
        setup_invariants(&s.cfg, &build_setup(&s.cfg).unwrap(), &mut failures);
    }
    Verdict {
        id: 7,
        name: "invariant suites",
        pass: failures.is_empty(),
        detail: if failures.is_empty() {
            format!("{steps} logged steps, Lyapunov, poles, stack cache and derivative checks clean")
        } else {
            failures.join("; ")
        },
    }
}

fn criterion_replay(studies: &[&Study]) -> Verdict {
    let root = tempfile::tempdir().unwrap();
    let mut notes = Vec::new();
    let mut pass = true;
    for s in studies {
        let dir: PathBuf = root.path().join(s.cfg.benchmark.as_str());
        std::fs::create_dir_all(&dir).unwrap();
        std::fs::write(dir.join("config.resolved.toml"), to_toml(&s.cfg)).unwrap();
        let file = std::fs::File::create(dir.join("trajectory.csv")).unwrap();
        s.robust.log.write_csv(std::io::BufWriter::new(file)).unwrap();
        let status = Command::new(env!("CARGO_BIN_EXE_safeaoc")).arg("replay").arg(&dir).output().unwrap();
        let code = status.status.code().unwrap_or(-1);
        pass &= code == 0;
        notes.push(format!("{} exit {code}", s.cfg.benchmark.as_str()));
    }
    Verdict { id: 8, name: "replay determinism", pass, detail: notes.join(", ") }
}

fn main() {
    // answer `cargo test -- --list` without running the suite
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    // optional criterion numbers select a subset, e.g. `-- 4 5`
    let picked: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let wanted = |id: usize| picked.is_empty() || picked.contains(&id);
    let studies = if [1, 2, 3, 7, 8].iter().any(|id| wanted(*id)) {
        Some((study("convex_set"), study("obstacle")))
    } else {
        None
    };
    let mut verdicts = Vec::new();
    if let Some((convex, obstacle)) = &studies {
        if wanted(1) {
            verdicts.push(criterion_convex(convex));
        }
        if wanted(2) {
            verdicts.push(criterion_obstacle(obstacle));
        }
        if wanted(3) {
            verdicts.push(criterion_estimation(convex, obstacle));
        }
    }
    if wanted(4) {
        verdicts.push(criterion_qp());
    }
    if wanted(5) {
        verdicts.push(criterion_icl());
    }
    if wanted(6) {
        verdicts.push(criterion_lq());
    }
    if let Some((convex, obstacle)) = &studies {
        if wanted(7) {
            verdicts.push(criterion_invariants(&[convex, obstacle]));
        }
        if wanted(8) {
            verdicts.push(criterion_replay(&[convex, obstacle]));
        }
    }
    for v in &verdicts {
        println!("{} criterion {} ({}): {}", if v.pass { "PASS" } else { "FAIL" }, v.id, v.name, v.detail);
    }
    let failed = verdicts.iter().filter(|v| !v.pass).count();
    println!("acceptance: {} passed, {failed} failed", verdicts.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
