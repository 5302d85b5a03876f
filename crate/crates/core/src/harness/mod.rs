//! Closed-loop experiment runner.

pub mod config;
pub mod diagnostics;
pub mod log;
pub mod metrics;
pub mod pretrain;

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use config::{load_config, ConfigError, DriftSource, ExperimentConfig, SafetyMode, StackInit};
pub use diagnostics::{gain_diagnostics, GainEstimates, GainInputs, GainReport};
pub use log::{diff_csv, CsvDiff, StepRecord, TrajectoryLog};
pub use metrics::{metrics, Metrics};
pub use pretrain::{pretrain, PretrainReport, Pretrained};

use crate::critic::{approx_policy, extrapolation_grid, BasisSpec, Critic, CriticGains, CriticState};
use crate::histstack::{ConsiderOutcome, IclDatum, StackManagerState, WindowBuffer, WindowSample};
use crate::numerics::{all_finite, axpy, norm, place_observer_gain, rk4_step, sym_eig_range, Matrix};
use crate::observer::{DnnSpec, IclSums, Observer, ObserverGains};
use crate::plant::{benchmark_system, robust_bounds, CostSpec, PlantModel, SafetySpec};
use crate::qp::{solve_safety_qp, SafetyQP};
use crate::trainer::{build_trainset, lm_train, swap_schedule, SplitFractions, StopReason, TrainError, TrainRecord};

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("setup failed: {0}")]
    Setup(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainEvent {
    pub t: f64,
    pub samples: usize,
    pub epochs: usize,
    pub initial_mse: f64,
    pub train_mse: f64,
    pub val_mse: f64,
    pub test_mse: f64,
    pub stop: StopReason,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunFault {
    pub t: f64,
    pub message: String,
}

/// Everything a run produces besides the trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub benchmark: String,
    pub mode: String,
    pub drift_source: DriftSource,
    pub seed: u64,
    pub metrics: Metrics,
    pub fault: Option<RunFault>,
    pub warnings: Vec<String>,
    pub pretrain: Option<PretrainReport>,
    pub training: Vec<TrainEvent>,
    /// Time and `λ_min` of each newly activated history stack.
    pub purges: Vec<(f64, f64)>,
    pub diagnostics: GainReport,
    pub estimates: GainEstimates,
    pub runtime_s: f64,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub log: TrajectoryLog,
    pub summary: RunSummary,
}

impl RunOutput {
    pub fn is_fault(&self) -> bool {
        self.summary.fault.is_some()
    }
}

/// Plant, barrier, cost, observer and critic assembled from a config.
pub struct Setup {
    pub plant: PlantModel,
    pub safety: SafetySpec,
    pub cost: CostSpec,
    pub observer: Observer,
    pub critic: Critic,
    pub critic_state: CriticState,
    pub theta0: Matrix,
    /// Windows from the offline runs, empty unless pretraining is enabled.
    pub offline_stack: Vec<IclDatum>,
    /// Pretraining pairs, reused by the in-loop trainer.
    pub offline_inputs: Vec<Vec<f64>>,
    pub offline_targets: Vec<Vec<f64>>,
    pub pretrain: Option<PretrainReport>,
}

fn setup_err(e: impl std::fmt::Display) -> RunError {
    RunError::Setup(e.to_string())
}

pub fn build_network(cfg: &ExperimentConfig) -> Result<DnnSpec, RunError> {
    let o = &cfg.observer;
    match &o.weights_file {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| ConfigError::new("observer.weights_file", format!("{path}: {e}")))?;
            let dnn = DnnSpec::from_json(&text).map_err(|e| ConfigError::new("observer.weights_file", e.to_string()))?;
            if dnn.widths != o.widths || dnn.activations != o.activations || dnn.feature_layers != o.feature_layers {
                return Err(ConfigError::new("observer.weights_file", "network shape disagrees with [observer]").into());
            }
            Ok(dnn)
        }
        None => DnnSpec::random(2, &o.widths, &o.activations, &o.feature_layers, o.bias_feature, cfg.seed).map_err(setup_err),
    }
}

pub fn build_setup(cfg: &ExperimentConfig) -> Result<Setup, RunError> {
    let (plant, base_safety, cost) = benchmark_system(cfg.benchmark);
    let safety = cfg.safety_spec(&base_safety);
    let n = plant.n();
    let a = config::matrix_field("observer.a", &cfg.observer.a, n, n)?;
    let s = config::matrix_field("observer.s", &cfg.observer.s, n, n)?;
    let c = plant.output_matrix().clone();
    let k = match &cfg.observer.k {
        Some(k) => Matrix::column(k),
        None => place_observer_gain(&a, &c, &cfg.observer.poles).map_err(|e| ConfigError::new("observer.poles", e.to_string()))?,
    };
    let dnn = build_network(cfg)?;
    let p = dnn.p();
    let gains = ObserverGains {
        k_theta: cfg.observer.k_theta,
        kappa: cfg.observer.kappa,
        gamma: Matrix::identity(p).scale(cfg.observer.gamma),
        theta_bar: cfg.observer.theta_bar,
        band: cfg.observer.band,
    };
    let mut observer = Observer::new(a, c, k, s, dnn, gains).map_err(|e| ConfigError::new("observer", e.to_string()))?;
    let (offline_stack, offline_inputs, offline_targets, pretrain_report) = if cfg.pretrain.enabled {
        let fit = cfg.observer.weights_file.is_none();
        let pre = pretrain::pretrain(cfg, &plant, &observer, fit).map_err(setup_err)?;
        observer.swap_dnn(pre.dnn).map_err(setup_err)?;
        (pre.stack, pre.inputs, pre.targets, Some(pre.report))
    } else {
        (Vec::new(), Vec::new(), Vec::new(), None)
    };
    let cg = &cfg.critic;
    let critic_gains = CriticGains {
        kc: cg.kc,
        ka1: cg.ka1,
        ka2: cg.ka2,
        nu: cg.nu,
        beta: cg.beta,
        w_bar: cg.w_bar,
        kappa_p: cg.kappa_p,
        gamma_max: cg.gamma_max,
        gamma_min: cg.gamma_min,
    };
    let points = extrapolation_grid(cg.extrap_per_axis, cg.extrap_half_width);
    let critic = Critic::new(BasisSpec::quadratic2(), critic_gains, points, &plant, &cost).map_err(setup_err)?;
    let critic_state = CriticState {
        wc: cg.wc0.clone(),
        wa: cg.wa0.clone(),
        gamma: config::matrix_field("critic.gamma0", &cg.gamma0, critic.l(), critic.l())?,
    };
    critic.validate_state(&critic_state).map_err(|e| ConfigError::new("critic", e.to_string()))?;
    let theta0 = Matrix::from_row_slice(p, n, &vec![cfg.observer.theta0; p * n]).map_err(setup_err)?;
    Ok(Setup { plant, safety, cost, observer, critic, critic_state, theta0, offline_stack, offline_inputs, offline_targets, pretrain: pretrain_report })
}

/// Synthetic windows from seeded starting points, propagated under the
/// observer's linear model with zero input. Their targets carry no residual.
pub fn preroll_stack(cfg: &ExperimentConfig, observer: &Observer, count: usize) -> Vec<IclDatum> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_57ac);
    let half = cfg.critic.extrap_half_width;
    let steps = (cfg.stack.window / cfg.dt).round() as usize;
    (0..count)
        .filter_map(|_| {
            let mut xh: Vec<f64> = (0..observer.n()).map(|_| rng.gen_range(-half..=half)).collect();
            let mut window = WindowBuffer::new(cfg.stack.window, cfg.dt);
            for k in 0..=steps {
                let t = k as f64 * cfg.dt;
                let rate = observer.a.matvec(&xh);
                window.push(WindowSample { t, xhat: xh.clone(), features: observer.features(&xh), model_rate: rate }).ok()?;
                xh = rk4_step(|x, _| observer.a.matvec(x), &xh, t, cfg.dt).ok()?;
            }
            let mut d = window.emit()?;
            d.synthetic = true;
            Some(d)
        })
        .collect()
}

struct Layout {
    n: usize,
    l: usize,
    p: usize,
}

impl Layout {
    fn len(&self) -> usize {
        2 * self.n + CriticState::flat_len(self.l) + self.p * self.n
    }
    fn critic(&self) -> std::ops::Range<usize> {
        2 * self.n..2 * self.n + CriticState::flat_len(self.l)
    }
    fn theta(&self) -> std::ops::Range<usize> {
        2 * self.n + CriticState::flat_len(self.l)..self.len()
    }
}

fn estimate_constants(setup: &Setup, cfg: &ExperimentConfig, log: &TrajectoryLog, purges: &[(f64, f64)]) -> GainEstimates {
    let obs = &setup.observer;
    let grid = extrapolation_grid(cfg.critic.extrap_per_axis, cfg.critic.extrap_half_width);
    let h = 1e-6;
    let mut phi_bar: f64 = 0.0;
    let mut grad_phi_bar: f64 = 0.0;
    let mut grad_sigma_bar: f64 = 0.0;
    let mut g_sigma_bar: f64 = 0.0;
    for x in &grid {
        let phi = obs.features(x);
        phi_bar = phi_bar.max(norm(&phi));
        let mut jac_fro = 0.0;
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp[i] += h;
            let d: Vec<f64> = obs.features(&xp).iter().zip(&phi).map(|(a, b)| (a - b) / h).collect();
            jac_fro += d.iter().map(|v| v * v).sum::<f64>();
        }
        grad_phi_bar = grad_phi_bar.max(jac_fro.sqrt());
        let js = setup.critic.basis().jac(x);
        grad_sigma_bar = grad_sigma_bar.max(js.frobenius_norm());
        let b = js.matmul(&setup.plant.effectiveness(x));
        g_sigma_bar = g_sigma_bar.max(b.matmul(setup.cost.r_inv()).matmul(&b.transpose()).frobenius_norm());
    }
    let fold = |f: &dyn Fn(&StepRecord) -> f64, init: f64, pick: fn(f64, f64) -> f64| log.records.iter().map(f).fold(init, pick);
    GainEstimates {
        theta_bar: fold(&|r| norm(&r.theta), 0.0, f64::max),
        grad_phi_bar,
        // network Jacobian bound doubles as its Lipschitz constant on the box
        lip_inner: grad_phi_bar,
        lip_g_r_sigma: 0.0,
        w_bar: cfg.critic.w_bar,
        eps_pi: 0.0,
        lip_g: 1.0,
        g_bar: setup.plant.g_bar,
        grad_sigma_bar,
        phi_bar,
        sigma_theta_min: if purges.is_empty() { 0.0 } else { purges.iter().map(|p| p.1).fold(f64::INFINITY, f64::min) },
        c1_min: fold(&|r| r.rank_min, f64::INFINITY, f64::min).max(0.0),
        g_sigma_bar,
        gamma_lower: fold(&|r| r.gamma_eig_min, f64::INFINITY, f64::min),
        gamma_upper: fold(&|r| r.gamma_eig_max, 0.0, f64::max),
        iota: None,
        admissible_radius: None,
    }
}

/// Runs the closed loop. Configuration problems are errors; numerical
/// faults during the run end it early and are reported in the summary.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutput, RunError> {
    let started = Instant::now();
    let warnings = cfg.validate()?;
    let mut setup = build_setup(cfg)?;
    let n = setup.plant.n();
    let m = setup.plant.m();
    let l = setup.critic.l();
    let p = setup.observer.p_features();
    let layout = Layout { n, l, p };
    let dt = cfg.dt;
    let steps = cfg.steps();
    let sample_every = (cfg.stack.sample_period / dt).round() as usize;
    let safety_spec = match cfg.mode {
        SafetyMode::PlainCbf => setup.safety.with_eps(0.0),
        _ => setup.safety.clone(),
    };
    let initial = match cfg.stack.init {
        StackInit::Preroll => preroll_stack(cfg, &setup.observer, cfg.stack.capacity),
        StackInit::Offline => setup.offline_stack.clone(),
        StackInit::Empty => Vec::new(),
    };
    let mut stacks = StackManagerState::new(cfg.stack_params(), p, n, initial).map_err(setup_err)?;
    let mut window = WindowBuffer::new(cfg.stack.window, dt);
    let points: Vec<Vec<f64>> = setup.critic.points().map(|x| x.to_vec()).collect();
    let true_drift_at: Vec<Vec<f64>> = points.iter().map(|x| setup.plant.drift(x)).collect();
    let linear_at: Vec<Vec<f64>> = points.iter().map(|x| setup.observer.a.matvec(x)).collect();
    let mut point_features: Vec<Vec<f64>> = points.iter().map(|x| setup.observer.features(x)).collect();
    let mut train_log: Vec<TrainRecord> = Vec::new();
    let mut training = Vec::new();
    let lm_cfg = cfg.lm_config();

    let mut x = cfg.initial.x0.clone();
    let mut xhat = cfg.initial.xhat0.clone();
    let mut cstate = setup.critic_state.clone();
    let mut theta = setup.theta0.clone();
    let mut log = TrajectoryLog::new(cfg.benchmark, n, m, l, p);
    let mut fault: Option<RunFault> = None;
    let mut gamma_clamped = false;

    for k in 0..=steps {
        let t = k as f64 * dt;
        let mut events: Vec<String> = Vec::new();

        let pi_des = approx_policy(setup.critic.basis(), &setup.plant, &setup.cost, &cstate.wa, &xhat);
        let drift_xhat = match cfg.drift_source {
            DriftSource::Estimated => setup.observer.estimated_drift(&theta, &xhat),
            DriftSource::True => setup.plant.drift(&xhat),
        };
        let (u, qp_status, degenerate) = match cfg.mode {
            SafetyMode::NoCbf => (pi_des.clone(), "passthrough".to_string(), false),
            SafetyMode::RobustCbf | SafetyMode::PlainCbf => {
                let b = robust_bounds(&safety_spec, &setup.plant, &xhat, &drift_xhat);
                let qp = SafetyQP { desired: pi_des.clone(), f: b.f, g_minus: b.g_minus, g_plus: b.g_plus };
                match solve_safety_qp(&qp) {
                    Ok(sol) => (sol.u, sol.status.as_str().to_string(), !b.degenerate.is_empty()),
                    Err(e) => {
                        fault = Some(RunFault { t, message: format!("safety filter: {e}") });
                        break;
                    }
                }
            }
        };
        if !all_finite(&u) {
            fault = Some(RunFault { t, message: "non-finite control".into() });
            break;
        }
        let mut u = u;
        let mut saturated = false;
        if let Some(lim) = cfg.safety.u_max {
            for ui in u.iter_mut() {
                if ui.abs() > lim {
                    *ui = ui.clamp(-lim, lim);
                    saturated = true;
                }
            }
        }

        let g_xhat = setup.plant.effectiveness(&xhat);
        let mut model_rate = setup.observer.a.matvec(&xhat);
        axpy(1.0, &g_xhat.matvec(&u), &mut model_rate);
        let sample = WindowSample { t, xhat: xhat.clone(), features: setup.observer.features(&xhat), model_rate };
        if let Err(e) = window.push(sample) {
            fault = Some(RunFault { t, message: e.to_string() });
            break;
        }
        if k > 0 && k % sample_every == 0 && stacks.gate_open(t) {
            if let Some(d) = window.emit() {
                match stacks.consider(d) {
                    Ok(ConsiderOutcome::Appended) => events.push("append".into()),
                    Ok(ConsiderOutcome::Replaced(i)) => events.push(format!("replace:{i}")),
                    Ok(ConsiderOutcome::Rejected) => events.push("reject".into()),
                    Err(e) => {
                        fault = Some(RunFault { t, message: e.to_string() });
                        break;
                    }
                }
                if stacks.maybe_purge(t) {
                    events.push("purge".into());
                    window.clear();
                }
            }
        }

        let y = setup.plant.measure(&x);
        if k % cfg.trainer.sample_stride == 0 {
            let xhat_dot = setup.observer.xhat_rhs(&theta, &xhat, &g_xhat, &u, &y);
            train_log.push(TrainRecord { t, xhat: xhat.clone(), xhat_dot, u: u.clone(), y: y.clone() });
        }
        if cfg.trainer.enabled && k > 0 && t <= cfg.train_until() + 0.5 * dt && swap_schedule(t, cfg.trainer.period, dt) {
            let chosen = subsample(&train_log, cfg.trainer.max_samples);
            let seed = cfg.seed.wrapping_add(training.len() as u64 + 1);
            let outcome = build_trainset(&chosen, &setup.observer, &setup.plant, SplitFractions::default(), seed)
                .map(|set| {
                    if cfg.trainer.keep_offline {
                        pretrain::extend_trainset(set, &setup.offline_inputs, &setup.offline_targets, seed)
                    } else {
                        set
                    }
                })
                .and_then(|set| lm_train(setup.observer.dnn(), &theta, &set, &lm_cfg).map(|r| (r, set.len())));
            match outcome {
                Ok(((dnn, report), samples)) => {
                    if let Err(e) = setup.observer.swap_dnn(dnn) {
                        fault = Some(RunFault { t, message: e.to_string() });
                        break;
                    }
                    let obs = &setup.observer;
                    if let Err(e) = stacks.refeature(&|x: &[f64]| obs.features(x)) {
                        fault = Some(RunFault { t, message: e.to_string() });
                        break;
                    }
                    window.clear();
                    point_features = points.iter().map(|x| obs.features(x)).collect();
                    training.push(TrainEvent {
                        t,
                        samples,
                        epochs: report.epochs,
                        initial_mse: report.initial_mse,
                        train_mse: report.train_mse,
                        val_mse: report.val_mse,
                        test_mse: report.test_mse,
                        stop: report.stop,
                    });
                    events.push("swap".into());
                }
                Err(TrainError::EmptySet) => {}
                Err(e) => {
                    fault = Some(RunFault { t, message: format!("trainer: {e}") });
                    break;
                }
            }
        }

        let drift_points = |th: &Matrix| -> Vec<Vec<f64>> {
            match cfg.drift_source {
                DriftSource::True => true_drift_at.clone(),
                DriftSource::Estimated => linear_at
                    .iter()
                    .zip(&point_features)
                    .map(|(lin, phi)| {
                        let mut f = lin.clone();
                        axpy(1.0, &th.tr_matvec(phi), &mut f);
                        f
                    })
                    .collect(),
            }
        };
        let drift_now = drift_points(&theta);
        let crhs = setup.critic.rhs(&cstate, &drift_now, &setup.cost);
        let rank_min = setup.critic.rank_monitor(&cstate, &drift_now, &setup.cost).unwrap_or(f64::NAN);
        let (g_lo, g_hi) = sym_eig_range(&cstate.gamma).unwrap_or((f64::NAN, f64::NAN));
        let xtilde: Vec<f64> = x.iter().zip(&xhat).map(|(a, b)| a - b).collect();
        if events.is_empty() {
            events.push("none".into());
        }
        log.records.push(StepRecord {
            t,
            x: x.clone(),
            xhat: xhat.clone(),
            u: u.clone(),
            pi_des,
            h_x: setup.safety.h(&x),
            h_xhat: setup.safety.h(&xhat),
            delta_mean_abs: crhs.delta_mean_abs,
            delta_max_abs: crhs.delta_max_abs,
            omega_rho_max: crhs.max_normalized_regressor,
            wc: cstate.wc.clone(),
            wa: cstate.wa.clone(),
            theta: theta.as_slice().to_vec(),
            rank_min,
            stack_min_eig: stacks.active.min_eig,
            gamma_eig_min: g_lo,
            gamma_eig_max: g_hi,
            hyp_ok: norm(&xtilde) <= cfg.safety.eps,
            stack_event: events.join("+"),
            qp_status,
            gamma_clamped,
            degenerate,
            saturated,
        });
        if k == steps {
            break;
        }

        let sums: IclSums = stacks.active.sums();
        let mut z = Vec::with_capacity(layout.len());
        z.extend_from_slice(&x);
        z.extend_from_slice(&xhat);
        z.extend(cstate.to_flat());
        z.extend_from_slice(theta.as_slice());
        let (plant, observer, critic, cost) = (&setup.plant, &setup.observer, &setup.critic, &setup.cost);
        let step = rk4_step(
            |v, _| {
                let xs = &v[..n];
                let xh = &v[n..2 * n];
                let cs = CriticState::from_flat(l, &v[layout.critic()]);
                let th = Matrix::from_row_slice(p, n, &v[layout.theta()]).expect("theta shape");
                let mut out = plant.vector_field(xs, &u);
                let ys = plant.measure(xs);
                out.extend(observer.xhat_rhs(&th, xh, &plant.effectiveness(xh), &u, &ys));
                let r = critic.rhs(&cs, &drift_points(&th), cost);
                out.extend(r.dwc);
                out.extend_from_slice(r.dgamma.as_slice());
                out.extend(r.dwa);
                out.extend(observer.theta_rhs(&th, &sums).into_vec());
                out
            },
            &z,
            t,
            dt,
        );
        let next = match step {
            Ok(v) if all_finite(&v) => v,
            _ => {
                fault = Some(RunFault { t: t + dt, message: "integration produced a non-finite state".into() });
                break;
            }
        };
        x = next[..n].to_vec();
        xhat = next[n..2 * n].to_vec();
        let proposed = CriticState::from_flat(l, &next[layout.critic()]);
        match setup.critic.clamp_gamma(&cstate.gamma, &proposed.gamma) {
            Ok((g, clamped)) => {
                gamma_clamped = clamped;
                cstate = CriticState { gamma: g, ..proposed };
            }
            Err(e) => {
                fault = Some(RunFault { t: t + dt, message: format!("critic: {e}") });
                break;
            }
        }
        theta = Matrix::from_row_slice(p, n, &next[layout.theta()]).expect("theta shape");
    }

    if log.is_empty() {
        return Err(RunError::Setup(fault.map_or_else(|| "no records".into(), |f| f.message)));
    }
    if let Some(f) = &fault {
        ::log::warn!("run aborted at t = {}: {}", f.t, f.message);
    }
    let purges = stacks.purge_log.clone();
    let estimates = estimate_constants(&setup, cfg, &log, &purges);
    let inputs = GainInputs {
        s: setup.observer.s.clone(),
        p: setup.observer.p.clone(),
        q: setup.cost.q.clone(),
        r: setup.cost.r.clone(),
        k_theta: cfg.observer.k_theta,
        kc: cfg.critic.kc,
        ka1: cfg.critic.ka1,
        ka2: cfg.critic.ka2,
        nu: cfg.critic.nu,
        beta: cfg.critic.beta,
    };
    let diagnostics = gain_diagnostics(&inputs, &estimates);
    let summary = RunSummary {
        benchmark: cfg.benchmark.as_str().into(),
        mode: cfg.mode.as_str().into(),
        drift_source: cfg.drift_source,
        seed: cfg.seed,
        metrics: metrics(&log),
        fault,
        warnings,
        pretrain: setup.pretrain.clone(),
        training,
        purges,
        diagnostics,
        estimates,
        runtime_s: started.elapsed().as_secs_f64(),
    };
    Ok(RunOutput { log, summary })
}

/// Evenly spaced selection of at most `max` records, always keeping the last.
fn subsample(records: &[TrainRecord], max: usize) -> Vec<TrainRecord> {
    if records.len() <= max || max == 0 {
        return records.to_vec();
    }
    let stride = records.len() as f64 / max as f64;
    (0..max)
        .map(|i| {
            let idx = (records.len() - 1) - ((max - 1 - i) as f64 * stride).floor() as usize;
            records[idx].clone()
        })
        .collect()
}
