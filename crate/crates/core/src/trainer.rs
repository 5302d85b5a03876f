//! Levenberg–Marquardt batch training of the observer's inner layers with the
//! outer layer held fixed.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{dot, lu_solve, Matrix};
use crate::observer::{DnnSpec, Observer};
use crate::plant::PlantModel;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrainError {
    #[error("training set is empty")]
    EmptySet,
    #[error("invalid training configuration: {0}")]
    Invalid(String),
}

/// One logged observer sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub t: f64,
    pub xhat: Vec<f64>,
    /// Observer right-hand side evaluated at `(t, x̂)`.
    pub xhat_dot: Vec<f64>,
    pub u: Vec<f64>,
    pub y: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSet {
    pub inputs: Vec<Vec<f64>>,
    pub targets: Vec<Vec<f64>>,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl TrainSet {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self { train: 0.70, val: 0.15, test: 0.15 }
    }
}

/// Targets `r = x̂̇ − A x̂ − g(x̂)u`: the part of the observer's motion the
/// network is responsible for, including the output-injection correction.
pub fn build_trainset(
    log: &[TrainRecord],
    obs: &Observer,
    plant: &PlantModel,
    split: SplitFractions,
    seed: u64,
) -> Result<TrainSet, TrainError> {
    if log.is_empty() {
        return Err(TrainError::EmptySet);
    }
    let total = split.train + split.val + split.test;
    if (total - 1.0).abs() > 1e-9 || split.train <= 0.0 || split.val < 0.0 || split.test < 0.0 {
        return Err(TrainError::Invalid("split fractions must be non-negative and sum to 1".into()));
    }
    let mut inputs = Vec::with_capacity(log.len());
    let mut targets = Vec::with_capacity(log.len());
    for rec in log {
        let ax = obs.a.matvec(&rec.xhat);
        let gu = plant.effectiveness(&rec.xhat).matvec(&rec.u);
        let r: Vec<f64> = (0..rec.xhat.len()).map(|i| rec.xhat_dot[i] - ax[i] - gu[i]).collect();
        if r.iter().chain(&rec.xhat).any(|v| !v.is_finite()) {
            return Err(TrainError::Invalid(format!("non-finite training pair at t = {}", rec.t)));
        }
        inputs.push(rec.xhat.clone());
        targets.push(r);
    }
    let (train, val, test) = split_indices(inputs.len(), split, seed);
    Ok(TrainSet { inputs, targets, train, val, test })
}

/// Seeded shuffle of `0..n` cut into train/validation/test index sets.
pub fn split_indices(n: usize, split: SplitFractions, seed: u64) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((split.train * n as f64).floor() as usize).max(1).min(n);
    let n_val = ((split.val * n as f64).floor() as usize).min(n - n_train);
    let train = order[..n_train].to_vec();
    let val = order[n_train..n_train + n_val].to_vec();
    let test = order[n_train + n_val..].to_vec();
    (train, val, test)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmConfig {
    pub max_epochs: usize,
    pub target_mse: f64,
    pub damping_init: f64,
    pub damping_up: f64,
    pub damping_down: f64,
    pub val_patience: usize,
    pub damping_max: f64,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            max_epochs: 10_000,
            target_mse: 5e-3,
            damping_init: 1e-3,
            damping_up: 10.0,
            damping_down: 0.1,
            val_patience: 50,
            damping_max: 1e10,
        }
    }
}

impl LmConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.damping_up > 1.0) || !(self.damping_down > 0.0 && self.damping_down < 1.0) {
            return Err(TrainError::Invalid("need damping_up > 1 and 0 < damping_down < 1".into()));
        }
        if !(self.target_mse > 0.0) || !(self.damping_init > 0.0) || !(self.damping_max > self.damping_init) {
            return Err(TrainError::Invalid("target_mse, damping_init must be > 0 and damping_max > damping_init".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    TargetReached,
    EpochBudget,
    ValidationPatience,
    Stalled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: usize,
    pub initial_mse: f64,
    pub train_mse: f64,
    pub val_mse: f64,
    pub test_mse: f64,
    pub stop: StopReason,
    /// Training MSE after each accepted step.
    pub history: Vec<f64>,
}

/// Network output `θᵀφ(Φ(x))`.
pub fn network_output(dnn: &DnnSpec, theta: &Matrix, x: &[f64]) -> Vec<f64> {
    theta.tr_matvec(&dnn.features(x))
}

/// Jacobian of `θᵀφ(Φ(x))` (n outputs) with respect to the inner weights in
/// [`DnnSpec::params`] order.
pub fn network_jacobian(dnn: &DnnSpec, theta: &Matrix, x: &[f64]) -> Matrix {
    let pass = dnn.forward(x);
    let n_out = theta.cols();
    let layers = dnn.widths.len();
    let mut offsets = Vec::with_capacity(layers);
    let mut acc = 0;
    for w in &dnn.weights {
        offsets.push(acc);
        acc += w.rows() * w.cols();
    }
    // Position of each feature layer inside φ.
    let mut feat_start = vec![None; layers];
    let mut pos = 0;
    for &l in &dnn.feature_layers {
        feat_start[l] = Some(pos);
        pos += dnn.widths[l];
    }
    let mut jac = Matrix::zeros(n_out, acc);
    for j in 0..n_out {
        let mut g_out: Vec<f64> = vec![0.0; dnn.widths[layers - 1]];
        for k in (0..layers).rev() {
            if let Some(s) = feat_start[k] {
                for (r, g) in g_out.iter_mut().enumerate() {
                    *g += theta[(s + r, j)];
                }
            }
            let w = &dnn.weights[k];
            let act = dnn.activations[k];
            let delta: Vec<f64> =
                (0..w.rows()).map(|r| g_out[r] * act.deriv(pass.pre[k][r], pass.out[k][r])).collect();
            let input = if k == 0 { x } else { pass.out[k - 1].as_slice() };
            let cols = w.cols();
            let row = jac.as_mut_slice();
            let base = j * acc + offsets[k];
            for r in 0..w.rows() {
                for c in 0..cols - 1 {
                    row[base + r * cols + c] = delta[r] * input[c];
                }
                row[base + r * cols + cols - 1] = delta[r];
            }
            if k > 0 {
                let mut prev = vec![0.0; cols - 1];
                for r in 0..w.rows() {
                    let wr = w.row_slice(r);
                    for c in 0..cols - 1 {
                        prev[c] += wr[c] * delta[r];
                    }
                }
                g_out = prev;
            }
        }
    }
    jac
}

fn mse(dnn: &DnnSpec, theta: &Matrix, set: &TrainSet, idx: &[usize]) -> f64 {
    if idx.is_empty() {
        return f64::NAN;
    }
    let n_out = theta.cols();
    let mut s = 0.0;
    for &i in idx {
        let o = network_output(dnn, theta, &set.inputs[i]);
        for (a, b) in o.iter().zip(&set.targets[i]) {
            s += (a - b) * (a - b);
        }
    }
    s / (idx.len() * n_out) as f64
}

/// Trains the inner weights so `θᵀφ(Φ(x̂))` matches the targets. Returns the
/// trained network (best validation error if validation is available) and a
/// report. The outer weights are not modified.
pub fn lm_train(dnn: &DnnSpec, theta: &Matrix, set: &TrainSet, cfg: &LmConfig) -> Result<(DnnSpec, TrainReport), TrainError> {
    cfg.validate()?;
    if set.is_empty() || set.train.is_empty() {
        return Err(TrainError::EmptySet);
    }
    let np = dnn.param_count();
    let mut current = dnn.clone();
    let mut params = current.params();
    let mut train_mse = mse(&current, theta, set, &set.train);
    let initial_mse = train_mse;
    let has_val = !set.val.is_empty();
    let mut best_val = if has_val { mse(&current, theta, set, &set.val) } else { f64::INFINITY };
    let mut best = current.clone();
    let mut since_best = 0;
    let mut damping = cfg.damping_init;
    let mut history = Vec::new();
    let mut epochs = 0;
    let mut stop = StopReason::EpochBudget;

    while epochs < cfg.max_epochs {
        if train_mse <= cfg.target_mse {
            stop = StopReason::TargetReached;
            break;
        }
        // Normal equations JᵀJ and Jᵀe over the training split.
        let mut jtj = Matrix::zeros(np, np);
        let mut jte = vec![0.0; np];
        for &i in &set.train {
            let x = &set.inputs[i];
            let jac = network_jacobian(&current, theta, x);
            let out = network_output(&current, theta, x);
            for j in 0..theta.cols() {
                let row = jac.row_slice(j);
                let e = out[j] - set.targets[i][j];
                for a in 0..np {
                    let ra = row[a];
                    if ra == 0.0 {
                        continue;
                    }
                    jte[a] += ra * e;
                    let dst = &mut jtj.as_mut_slice()[a * np..(a + 1) * np];
                    for (d, rb) in dst.iter_mut().zip(row) {
                        *d += ra * rb;
                    }
                }
            }
        }
        if dot(&jte, &jte) == 0.0 {
            stop = StopReason::Stalled;
            break;
        }
        let mut accepted = false;
        while damping <= cfg.damping_max {
            let mut sys = jtj.clone();
            for a in 0..np {
                sys[(a, a)] += damping;
            }
            let rhs: Vec<f64> = jte.iter().map(|v| -v).collect();
            if let Ok(step) = lu_solve(&sys, &rhs) {
                let trial_params: Vec<f64> = params.iter().zip(&step).map(|(p, s)| p + s).collect();
                let mut trial = current.clone();
                trial.set_params(&trial_params);
                let trial_mse = mse(&trial, theta, set, &set.train);
                if trial_mse < train_mse {
                    current = trial;
                    params = trial_params;
                    train_mse = trial_mse;
                    damping *= cfg.damping_down;
                    accepted = true;
                    break;
                }
            }
            damping *= cfg.damping_up;
        }
        if !accepted {
            stop = StopReason::Stalled;
            break;
        }
        epochs += 1;
        history.push(train_mse);
        if has_val {
            let v = mse(&current, theta, set, &set.val);
            if v < best_val {
                best_val = v;
                best = current.clone();
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= cfg.val_patience {
                    stop = StopReason::ValidationPatience;
                    break;
                }
            }
        } else {
            best = current.clone();
        }
    }
    if stop == StopReason::TargetReached || !has_val {
        best = current;
    }
    let report = TrainReport {
        epochs,
        initial_mse,
        train_mse: mse(&best, theta, set, &set.train),
        val_mse: mse(&best, theta, set, &set.val),
        test_mse: mse(&best, theta, set, &set.test),
        stop,
        history,
    };
    Ok((best, report))
}

/// True when `now` is within half a step of a multiple of `period`.
pub fn swap_schedule(now: f64, period: f64, dt: f64) -> bool {
    let nearest = (now / period).round() * period;
    (now - nearest).abs() <= 0.5 * dt + 1e-12
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::observer::Activation;

    #[test]
    fn schedule_examples() {
        assert!(swap_schedule(2.0, 2.0, 1e-3));
        assert!(!swap_schedule(1.999, 2.0, 1e-3));
        assert!(swap_schedule(4.0005, 2.0, 1e-3));
        assert!(!swap_schedule(4.002, 2.0, 1e-3));
    }

    fn small_net(seed: u64) -> DnnSpec {
        DnnSpec::random(2, &[4, 3], &[Activation::ElliotSym, Activation::LogSigmoid], &[0, 1], false, seed).unwrap()
    }

    #[test]
    fn jacobian_matches_central_differences() {
        let dnn = small_net(11);
        let theta = Matrix::from_row_slice(7, 2, &(0..14).map(|i| (i as f64 * 0.37).sin()).collect::<Vec<_>>()).unwrap();
        let x = [0.4, -0.9];
        let jac = network_jacobian(&dnn, &theta, &x);
        let p0 = dnn.params();
        let h = 1e-6;
        for a in 0..p0.len() {
            let mut plus = dnn.clone();
            let mut minus = dnn.clone();
            let mut pp = p0.clone();
            pp[a] += h;
            plus.set_params(&pp);
            pp[a] -= 2.0 * h;
            minus.set_params(&pp);
            let op = network_output(&plus, &theta, &x);
            let om = network_output(&minus, &theta, &x);
            for j in 0..2 {
                let fd = (op[j] - om[j]) / (2.0 * h);
                let an = jac[(j, a)];
                assert!((fd - an).abs() <= 1e-4 * an.abs().max(1e-3), "param {a} out {j}: {fd} vs {an}");
            }
        }
    }

    fn teacher_set(seed: u64, count: usize) -> (DnnSpec, Matrix, TrainSet) {
        let teacher = small_net(seed);
        let theta = Matrix::from_row_slice(7, 2, &(0..14).map(|i| ((i + 1) as f64 * 0.71).cos()).collect::<Vec<_>>()).unwrap();
        let inputs: Vec<Vec<f64>> =
            (0..count).map(|k| vec![(k as f64 * 0.13).sin() * 1.5, (k as f64 * 0.29).cos() * 1.5]).collect();
        let targets = inputs.iter().map(|x| network_output(&teacher, &theta, x)).collect();
        let set = TrainSet { inputs, targets, train: (0..count).collect(), val: vec![], test: vec![] };
        (teacher, theta, set)
    }

    #[test]
    fn zero_epoch_budget_is_noop() {
        let (_, theta, set) = teacher_set(1, 20);
        let student = small_net(2);
        let cfg = LmConfig { max_epochs: 0, ..LmConfig::default() };
        let (out, report) = lm_train(&student, &theta, &set, &cfg).unwrap();
        assert_eq!(out, student);
        assert_eq!(report.epochs, 0);
    }

    #[test]
    fn accepted_steps_never_increase_mse() {
        let (_, theta, set) = teacher_set(1, 40);
        let cfg = LmConfig { max_epochs: 30, target_mse: 1e-14, ..LmConfig::default() };
        let (_, report) = lm_train(&small_net(2), &theta, &set, &cfg).unwrap();
        let mut prev = report.initial_mse;
        for m in &report.history {
            assert!(*m <= prev);
            prev = *m;
        }
    }

    #[test]
    fn empty_set_rejected() {
        let set = TrainSet { inputs: vec![], targets: vec![], train: vec![], val: vec![], test: vec![] };
        assert_eq!(lm_train(&small_net(1), &Matrix::zeros(7, 2), &set, &LmConfig::default()), Err(TrainError::EmptySet));
    }
}
