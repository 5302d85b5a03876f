//! Offline stage run before the closed loop: simulate the plant from scattered
//! initial states under random inputs, fit the network to the drift residual
//! and collect integral windows for the first history stack.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use crate::histstack::{HistoryStack, IclDatum, StackError, StackRole, WindowBuffer, WindowSample};
use crate::numerics::{lu_solve, rk4_step, Matrix};
use crate::observer::{DnnSpec, Observer};
use crate::plant::PlantModel;
use crate::trainer::{lm_train, split_indices, SplitFractions, TrainError, TrainSet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub samples: usize,
    pub windows: usize,
    pub stack_min_eig: f64,
    /// Training-split MSE of the least-squares output fit before and after
    /// the inner layers are trained.
    pub initial_mse: f64,
    pub final_mse: f64,
    pub epochs: usize,
}

pub struct Pretrained {
    pub dnn: DnnSpec,
    /// Least-squares outer weights for the trained network.
    pub theta_fit: Matrix,
    /// Stack filled from the offline windows by eigenvalue maximization.
    pub stack: Vec<IclDatum>,
    /// Input/residual pairs the network was fitted on.
    pub inputs: Vec<Vec<f64>>,
    pub targets: Vec<Vec<f64>>,
    pub report: PretrainReport,
}

struct Trajectory {
    xs: Vec<Vec<f64>>,
    us: Vec<Vec<f64>>,
}

fn simulate(cfg: &ExperimentConfig, plant: &PlantModel, rng: &mut ChaCha8Rng) -> Trajectory {
    let pc = &cfg.pretrain;
    let dt = cfg.dt;
    let steps = (pc.horizon / dt).round() as usize;
    let hold = ((pc.control_hold / dt).round() as usize).max(1);
    let mut x: Vec<f64> = (0..plant.n()).map(|_| rng.gen_range(-pc.half_width..=pc.half_width)).collect();
    let mut u = vec![0.0; plant.m()];
    let mut xs = Vec::with_capacity(steps + 1);
    let mut us = Vec::with_capacity(steps + 1);
    for k in 0..=steps {
        if k % hold == 0 {
            u = (0..plant.m()).map(|_| rng.gen_range(-pc.control_amplitude..=pc.control_amplitude)).collect();
        }
        if x.iter().any(|v| !v.is_finite() || v.abs() > pc.state_limit) {
            break;
        }
        xs.push(x.clone());
        us.push(u.clone());
        match rk4_step(|s, _| plant.vector_field(s, &u), &x, k as f64 * dt, dt) {
            Ok(next) => x = next,
            Err(_) => break,
        }
    }
    Trajectory { xs, us }
}

/// Ridge least-squares outer weights `θ = argmin Σ‖r − θᵀφ(x)‖² + ridge‖θ‖²`.
pub fn fit_outer(dnn: &DnnSpec, set: &TrainSet, idx: &[usize], ridge: f64) -> Matrix {
    let p = dnn.p();
    let n = set.targets[0].len();
    let mut gram = Matrix::identity(p).scale(ridge);
    let mut cross = Matrix::zeros(p, n);
    for &i in idx {
        let phi = dnn.features(&set.inputs[i]);
        gram.add_scaled(1.0, &Matrix::outer(&phi, &phi));
        cross.add_scaled(1.0, &Matrix::outer(&phi, &set.targets[i]));
    }
    let mut theta = Matrix::zeros(p, n);
    for j in 0..n {
        let col: Vec<f64> = (0..p).map(|r| cross[(r, j)]).collect();
        if let Ok(sol) = lu_solve(&gram, &col) {
            for r in 0..p {
                theta[(r, j)] = sol[r];
            }
        }
    }
    theta
}

fn mse(dnn: &DnnSpec, theta: &Matrix, set: &TrainSet, idx: &[usize]) -> f64 {
    if idx.is_empty() {
        return 0.0;
    }
    let mut acc = 0.0;
    for &i in idx {
        let out = theta.tr_matvec(&dnn.features(&set.inputs[i]));
        acc += out.iter().zip(&set.targets[i]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    }
    acc / (idx.len() * set.targets[0].len()) as f64
}

/// With `fit = false` the network is kept as is and only the windows are
/// collected.
/// Appends extra pairs to a training set and redraws the split.
pub fn extend_trainset(set: TrainSet, inputs: &[Vec<f64>], targets: &[Vec<f64>], seed: u64) -> TrainSet {
    let mut all_inputs = set.inputs;
    let mut all_targets = set.targets;
    all_inputs.extend_from_slice(inputs);
    all_targets.extend_from_slice(targets);
    let (train, val, test) = split_indices(all_inputs.len(), SplitFractions::default(), seed);
    TrainSet { inputs: all_inputs, targets: all_targets, train, val, test }
}

/// Seeds the stack with evenly spaced candidates, then sweeps the rest
/// swapping in any window that raises `λ_min` by at least `threshold`.
pub fn select_windows(
    candidates: Vec<IclDatum>,
    capacity: usize,
    kappa: f64,
    p: usize,
    n: usize,
    threshold: f64,
) -> Result<HistoryStack, StackError> {
    let mut stack = HistoryStack::new(StackRole::Active, capacity, kappa, p, n);
    if candidates.is_empty() || capacity == 0 {
        return Ok(stack);
    }
    let take = capacity.min(candidates.len());
    let chosen: Vec<usize> = (0..take).map(|i| i * candidates.len() / take).collect();
    for &i in &chosen {
        stack.push(candidates[i].clone())?;
    }
    for (i, d) in candidates.into_iter().enumerate() {
        if chosen.contains(&i) {
            continue;
        }
        if let Some((slot, gain)) = stack.best_swap(&d)? {
            if gain >= threshold {
                stack.replace(slot, d)?;
            }
        }
    }
    Ok(stack)
}

pub fn pretrain(cfg: &ExperimentConfig, plant: &PlantModel, observer: &Observer, fit: bool) -> Result<Pretrained, TrainError> {
    let pc = &cfg.pretrain;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x0ff1_1e5e);
    let trajectories: Vec<Trajectory> = (0..pc.trajectories).map(|_| simulate(cfg, plant, &mut rng)).collect();

    let mut inputs = Vec::new();
    let mut targets = Vec::new();
    for tr in &trajectories {
        for k in (0..tr.xs.len()).step_by(pc.sample_stride.max(1)) {
            let x = &tr.xs[k];
            let rate = plant.drift(x);
            let lin = observer.a.matvec(x);
            targets.push(rate.iter().zip(&lin).map(|(f, a)| f - a).collect::<Vec<f64>>());
            inputs.push(x.clone());
        }
    }
    if inputs.is_empty() {
        return Err(TrainError::EmptySet);
    }
    if inputs.len() > pc.max_samples {
        let stride = inputs.len() as f64 / pc.max_samples as f64;
        let keep: Vec<usize> = (0..pc.max_samples).map(|i| (i as f64 * stride).floor() as usize).collect();
        inputs = keep.iter().map(|&i| inputs[i].clone()).collect();
        targets = keep.iter().map(|&i| targets[i].clone()).collect();
    }
    let (train, val, test) = split_indices(inputs.len(), SplitFractions::default(), cfg.seed);
    let set = TrainSet { inputs, targets, train, val, test };

    let mut dnn = observer.dnn().clone();
    let mut theta = fit_outer(&dnn, &set, &set.train, pc.ridge);
    let initial_mse = mse(&dnn, &theta, &set, &set.train);
    let mut epochs = 0;
    let lm = cfg.lm_config_with_epochs(pc.max_epochs);
    for _ in 0..if fit { pc.rounds } else { 0 } {
        let (next, report) = lm_train(&dnn, &theta, &set, &lm)?;
        epochs += report.epochs;
        dnn = next;
        theta = fit_outer(&dnn, &set, &set.train, pc.ridge);
    }
    let final_mse = mse(&dnn, &theta, &set, &set.train);

    // integral windows along the offline trajectories, scored by λ_min
    let window_steps = (cfg.stack.window / cfg.dt).round() as usize;
    let every = (cfg.stack.sample_period / cfg.dt).round() as usize;
    let mut candidates = Vec::new();
    for tr in &trajectories {
        let mut buf = WindowBuffer::new(cfg.stack.window, cfg.dt);
        for (k, (x, u)) in tr.xs.iter().zip(&tr.us).enumerate() {
            let mut rate = observer.a.matvec(x);
            let gu = plant.effectiveness(x).matvec(u);
            rate.iter_mut().zip(&gu).for_each(|(r, g)| *r += g);
            let sample = WindowSample { t: k as f64 * cfg.dt, xhat: x.clone(), features: dnn.features(x), model_rate: rate };
            if buf.push(sample).is_err() {
                break;
            }
            if k >= window_steps && k % every == 0 {
                if let Some(mut d) = buf.emit() {
                    d.synthetic = true;
                    candidates.push(d);
                }
            }
        }
    }
    let stack = select_windows(candidates.clone(), cfg.stack.capacity, cfg.observer.kappa, dnn.p(), plant.n(), cfg.stack.eig_threshold)
        .map_err(|e| TrainError::Invalid(e.to_string()))?;
    let windows = candidates.len();
    Ok(Pretrained {
        dnn,
        theta_fit: theta,
        report: PretrainReport { samples: set.len(), windows, stack_min_eig: stack.min_eig, initial_mse, final_mse, epochs },
        stack: stack.data,
        inputs: set.inputs,
        targets: set.targets,
    })
}
