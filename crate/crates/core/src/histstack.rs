//! Integral data capture and dwell-time history-stack management for the
//! outer-layer weight update.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{axpy, dot, sym_eig_min, Matrix, NumericsError};
use crate::observer::IclSums;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StackError {
    #[error("sample time {t} precedes previous sample at {prev}")]
    TimeRegression { t: f64, prev: f64 },
    #[error("invalid stack parameters: {0}")]
    Invalid(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// One integral measurement `X̂ = θᵀY + G_u` over a window `[stamp − Δt, stamp]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IclDatum {
    /// `∫ φ(Φ(x̂)) dτ`
    pub y: Vec<f64>,
    /// `x̂(t) − x̂(t − Δt)`
    pub xdiff: Vec<f64>,
    /// `∫ A x̂ + g(x̂) u dτ`
    pub gu: Vec<f64>,
    pub stamp: f64,
    /// Sample times and estimates across the window, kept so `y` can be
    /// recomputed when the inner layers change.
    #[serde(default)]
    pub times: Vec<f64>,
    #[serde(default)]
    pub xhats: Vec<Vec<f64>>,
    #[serde(default)]
    pub synthetic: bool,
}

impl IclDatum {
    pub fn weight(&self, kappa: f64) -> f64 {
        1.0 / (1.0 + kappa * dot(&self.y, &self.y))
    }

    /// Recomputes `y` from the stored window with a new feature map.
    pub fn refeature(&mut self, features: &dyn Fn(&[f64]) -> Vec<f64>) {
        if self.xhats.len() < 2 {
            return;
        }
        let phis: Vec<Vec<f64>> = self.xhats.iter().map(|x| features(x)).collect();
        self.y = trapezoid(&self.times, &phis);
    }
}

fn trapezoid(times: &[f64], values: &[Vec<f64>]) -> Vec<f64> {
    let mut acc = vec![0.0; values[0].len()];
    for k in 1..values.len() {
        let h = 0.5 * (times[k] - times[k - 1]);
        axpy(h, &values[k - 1], &mut acc);
        axpy(h, &values[k], &mut acc);
    }
    acc
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindowSample {
    pub t: f64,
    pub xhat: Vec<f64>,
    pub features: Vec<f64>,
    /// `A x̂ + g(x̂) u`
    pub model_rate: Vec<f64>,
}

/// Sliding window of samples spanning `Δt`.
#[derive(Debug, Clone)]
pub struct WindowBuffer {
    span: f64,
    dt: f64,
    samples: VecDeque<WindowSample>,
}

impl WindowBuffer {
    pub fn new(span: f64, dt: f64) -> Self {
        let cap = (span / dt).ceil() as usize + 1;
        Self { span, dt, samples: VecDeque::with_capacity(cap + 1) }
    }

    pub fn clear(&mut self) {
        self.samples.clear();
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn push(&mut self, sample: WindowSample) -> Result<(), StackError> {
        if let Some(last) = self.samples.back() {
            if sample.t <= last.t {
                return Err(StackError::TimeRegression { t: sample.t, prev: last.t });
            }
        }
        let horizon = sample.t - self.span - 0.5 * self.dt;
        self.samples.push_back(sample);
        while self.samples.front().is_some_and(|s| s.t < horizon) {
            self.samples.pop_front();
        }
        Ok(())
    }

    /// True once the buffer covers the full window (within half a step).
    pub fn is_full(&self) -> bool {
        match (self.samples.front(), self.samples.back()) {
            (Some(a), Some(b)) => b.t - a.t >= self.span - 0.5 * self.dt,
            _ => false,
        }
    }

    /// Integrals over the current window, if it is full.
    pub fn emit(&self) -> Option<IclDatum> {
        if !self.is_full() {
            return None;
        }
        let times: Vec<f64> = self.samples.iter().map(|s| s.t).collect();
        let phis: Vec<Vec<f64>> = self.samples.iter().map(|s| s.features.clone()).collect();
        let rates: Vec<Vec<f64>> = self.samples.iter().map(|s| s.model_rate.clone()).collect();
        let first = self.samples.front()?;
        let last = self.samples.back()?;
        Some(IclDatum {
            y: trapezoid(&times, &phis),
            xdiff: last.xhat.iter().zip(&first.xhat).map(|(a, b)| a - b).collect(),
            gu: trapezoid(&times, &rates),
            stamp: last.t,
            times,
            xhats: self.samples.iter().map(|s| s.xhat.clone()).collect(),
            synthetic: false,
        })
    }

    /// Pushes a sample and returns the window integrals when full.
    pub fn accumulate(&mut self, sample: WindowSample) -> Result<Option<IclDatum>, StackError> {
        self.push(sample)?;
        Ok(self.emit())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StackRole {
    Active,
    Auxiliary,
}

/// Fixed-capacity store with cached `Σ_Y`, `Σ_YX` and `λ_min(Σ_Y)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryStack {
    pub role: StackRole,
    pub capacity: usize,
    pub kappa: f64,
    pub data: Vec<IclDatum>,
    pub sigma_y: Matrix,
    pub sigma_yx: Matrix,
    pub min_eig: f64,
}

impl HistoryStack {
    pub fn new(role: StackRole, capacity: usize, kappa: f64, p: usize, n: usize) -> Self {
        Self {
            role,
            capacity,
            kappa,
            data: Vec::with_capacity(capacity),
            sigma_y: Matrix::zeros(p, p),
            sigma_yx: Matrix::zeros(p, n),
            min_eig: 0.0,
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.data.len() >= self.capacity
    }

    fn contribution(&self, d: &IclDatum) -> (Matrix, Matrix) {
        let w = d.weight(self.kappa);
        let target: Vec<f64> = d.xdiff.iter().zip(&d.gu).map(|(x, g)| x - g).collect();
        (Matrix::outer(&d.y, &d.y).scale(w), Matrix::outer(&d.y, &target).scale(w))
    }

    fn refresh_eig(&mut self) -> Result<(), StackError> {
        self.min_eig = if self.data.is_empty() { 0.0 } else { sym_eig_min(&self.sigma_y.symmetrize())? };
        Ok(())
    }

    pub fn push(&mut self, d: IclDatum) -> Result<(), StackError> {
        let (yy, yx) = self.contribution(&d);
        self.sigma_y.add_scaled(1.0, &yy);
        self.sigma_yx.add_scaled(1.0, &yx);
        self.data.push(d);
        self.refresh_eig()
    }

    pub fn replace(&mut self, slot: usize, d: IclDatum) -> Result<(), StackError> {
        let (old_yy, old_yx) = self.contribution(&self.data[slot]);
        let (yy, yx) = self.contribution(&d);
        self.sigma_y.add_scaled(-1.0, &old_yy);
        self.sigma_y.add_scaled(1.0, &yy);
        self.sigma_yx.add_scaled(-1.0, &old_yx);
        self.sigma_yx.add_scaled(1.0, &yx);
        self.data[slot] = d;
        self.refresh_eig()
    }

    /// Rebuilds the caches from the stored data.
    pub fn recompute(&mut self) -> Result<(), StackError> {
        self.sigma_y = Matrix::zeros(self.sigma_y.rows(), self.sigma_y.cols());
        self.sigma_yx = Matrix::zeros(self.sigma_yx.rows(), self.sigma_yx.cols());
        for d in &self.data {
            let (yy, yx) = self.contribution(d);
            self.sigma_y.add_scaled(1.0, &yy);
            self.sigma_yx.add_scaled(1.0, &yx);
        }
        self.refresh_eig()
    }

    /// Best slot to overwrite with `candidate` and the resulting gain in
    /// `λ_min(Σ_Y)`.
    pub fn best_swap(&self, candidate: &IclDatum) -> Result<Option<(usize, f64)>, StackError> {
        let (cand_yy, _) = self.contribution(candidate);
        let mut best: Option<(usize, f64)> = None;
        for (i, d) in self.data.iter().enumerate() {
            let (yy, _) = self.contribution(d);
            let mut trial = self.sigma_y.sub(&yy);
            trial.add_scaled(1.0, &cand_yy);
            let gain = sym_eig_min(&trial.symmetrize())? - self.min_eig;
            if best.map_or(true, |(_, g)| gain > g) {
                best = Some((i, gain));
            }
        }
        Ok(best)
    }

    pub fn sums(&self) -> IclSums {
        IclSums { sigma_y: self.sigma_y.clone(), sigma_yx: self.sigma_yx.clone(), len: self.data.len() }
    }

    pub fn clear(&mut self) {
        let (p, n) = (self.sigma_y.rows(), self.sigma_yx.cols());
        self.data.clear();
        self.sigma_y = Matrix::zeros(p, p);
        self.sigma_yx = Matrix::zeros(p, n);
        self.min_eig = 0.0;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StackParams {
    /// Integration window `Δt`.
    pub window: f64,
    /// Capacity `M`.
    pub capacity: usize,
    /// Minimum `λ_min` gain `λ*` for replacing a datum.
    pub eig_threshold: f64,
    /// Sampling period `t*` after a purge and between emissions.
    pub sample_period: f64,
    /// Purge quality ratio `ξ ∈ (0, 1]`.
    pub purge_ratio: f64,
    /// Minimum dwell time between purges.
    pub dwell: f64,
    pub kappa: f64,
}

impl Default for StackParams {
    fn default() -> Self {
        Self { window: 0.25, capacity: 20, eig_threshold: 1e-10, sample_period: 0.05, purge_ratio: 0.5, dwell: 2.0, kappa: 0.5 }
    }
}

impl StackParams {
    pub fn validate(&self) -> Result<(), StackError> {
        if !(self.window > 0.0) || self.capacity == 0 || !(self.sample_period > 0.0) {
            return Err(StackError::Invalid("window, capacity and sample_period must be positive".into()));
        }
        if !(self.eig_threshold >= 0.0) || !(self.dwell >= 0.0) || !(self.kappa >= 0.0) {
            return Err(StackError::Invalid("eig_threshold, dwell and kappa must be >= 0".into()));
        }
        if !(self.purge_ratio > 0.0 && self.purge_ratio <= 1.0) {
            return Err(StackError::Invalid(format!("purge_ratio must lie in (0, 1], got {}", self.purge_ratio)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConsiderOutcome {
    Appended,
    Replaced(usize),
    Rejected,
}

/// Active/auxiliary stack pair with purge bookkeeping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StackManagerState {
    pub active: HistoryStack,
    pub auxiliary: HistoryStack,
    /// Number of completed purges.
    pub switch_count: usize,
    /// Time of the last purge.
    pub last_purge: f64,
    /// Highest `λ_min(Σ_Y)` seen at a purge.
    pub best_eig: f64,
    /// Minimum eigenvalue of each newly activated stack, with its time.
    pub purge_log: Vec<(f64, f64)>,
    pub params: StackParams,
}

impl StackManagerState {
    pub fn new(params: StackParams, p: usize, n: usize, initial: Vec<IclDatum>) -> Result<Self, StackError> {
        params.validate()?;
        let mut active = HistoryStack::new(StackRole::Active, params.capacity, params.kappa, p, n);
        for d in initial.into_iter().take(params.capacity) {
            active.push(d)?;
        }
        let auxiliary = HistoryStack::new(StackRole::Auxiliary, params.capacity, params.kappa, p, n);
        // a seeded active stack counts as the first recorded minimum eigenvalue
        let best_eig = if active.is_full() { active.min_eig.max(0.0) } else { 0.0 };
        Ok(Self { active, auxiliary, switch_count: 0, last_purge: 0.0, best_eig, purge_log: Vec::new(), params })
    }

    /// Sampling gate `t − η > t*`.
    pub fn gate_open(&self, now: f64) -> bool {
        now - self.last_purge > self.params.sample_period
    }

    /// Offers a datum to the auxiliary stack.
    pub fn consider(&mut self, datum: IclDatum) -> Result<ConsiderOutcome, StackError> {
        if !self.auxiliary.is_full() {
            self.auxiliary.push(datum)?;
            return Ok(ConsiderOutcome::Appended);
        }
        match self.auxiliary.best_swap(&datum)? {
            Some((slot, gain)) if gain >= self.params.eig_threshold => {
                self.auxiliary.replace(slot, datum)?;
                Ok(ConsiderOutcome::Replaced(slot))
            }
            _ => Ok(ConsiderOutcome::Rejected),
        }
    }

    /// Promotes the auxiliary stack when it is full, good enough and the
    /// dwell time has elapsed.
    pub fn maybe_purge(&mut self, now: f64) -> bool {
        let ready = self.auxiliary.is_full()
            && self.auxiliary.min_eig >= self.params.purge_ratio * self.best_eig
            && now - self.last_purge >= self.params.dwell;
        if !ready {
            return false;
        }
        let mut promoted = std::mem::replace(
            &mut self.auxiliary,
            HistoryStack::new(
                StackRole::Auxiliary,
                self.params.capacity,
                self.params.kappa,
                self.active.sigma_y.rows(),
                self.active.sigma_yx.cols(),
            ),
        );
        promoted.role = StackRole::Active;
        self.best_eig = self.best_eig.max(promoted.min_eig);
        self.purge_log.push((now, promoted.min_eig));
        self.active = promoted;
        self.last_purge = now;
        self.switch_count += 1;
        true
    }

    /// Recomputes every stored regressor after an inner-layer change and
    /// resets the quality reference to the active stack.
    pub fn refeature(&mut self, features: &dyn Fn(&[f64]) -> Vec<f64>) -> Result<(), StackError> {
        for stack in [&mut self.active, &mut self.auxiliary] {
            for d in &mut stack.data {
                d.refeature(features);
            }
            stack.recompute()?;
        }
        self.best_eig = self.active.min_eig;
        Ok(())
    }
}
