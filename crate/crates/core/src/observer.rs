//! DNN-based adaptive Luenberger observer.
//!
//! `x̂̇ = Ax̂ + θ̂ᵀφ(Φ(x̂)) + g(x̂)u + K(y − Cx̂)`, where `Φ` is a stack of inner
//! layers retrained in batches and `θ̂` is adapted online from integral
//! history-stack data.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::critic::{clamp_to_ball, smooth_proj};
use crate::numerics::{axpy, is_hurwitz, rk4_step, solve_lyapunov, sym_eig_min, Matrix, NumericsError};
use crate::plant::PlantModel;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ObserverError {
    #[error("non-finite observer state at t = {t}")]
    Fault { t: f64 },
    #[error("A - K C is not Hurwitz")]
    NotHurwitz,
    #[error("invalid network: {0}")]
    InvalidNetwork(String),
    #[error("invalid observer configuration: {0}")]
    Invalid(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("weight document: {0}")]
    Document(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    ElliotSym,
    LogSigmoid,
    TanhSigmoid,
}

impl Activation {
    pub fn eval(self, s: f64) -> f64 {
        match self {
            Activation::ElliotSym => s / (1.0 + s.abs()),
            Activation::LogSigmoid => 1.0 / (1.0 + (-s).exp()),
            Activation::TanhSigmoid => s.tanh(),
        }
    }

    /// Derivative expressed through the input `s` and output `a = eval(s)`.
    pub fn deriv(self, s: f64, a: f64) -> f64 {
        match self {
            Activation::ElliotSym => {
                let d = 1.0 + s.abs();
                1.0 / (d * d)
            }
            Activation::LogSigmoid => a * (1.0 - a),
            Activation::TanhSigmoid => 1.0 - a * a,
        }
    }
}

/// Inner layers of the observer network.
///
/// Layer `k` maps `a_{k−1}` to `act_k(W_k [a_{k−1}; 1])`, so `W_k` is
/// `width_k × (width_{k−1} + 1)` with the bias in the last column. The feature
/// vector concatenates the outputs of `feature_layers` (0-based) and, when
/// `bias_feature` is set, a trailing constant 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DnnSpec {
    pub input: usize,
    pub widths: Vec<usize>,
    pub activations: Vec<Activation>,
    pub weights: Vec<Matrix>,
    pub feature_layers: Vec<usize>,
    #[serde(default)]
    pub bias_feature: bool,
}

/// Pre-activations and outputs of every layer for one input.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub pre: Vec<Vec<f64>>,
    pub out: Vec<Vec<f64>>,
}

impl DnnSpec {
    /// Seeded uniform initialization in `±1/√(fan_in)`.
    pub fn random(
        input: usize,
        widths: &[usize],
        activations: &[Activation],
        feature_layers: &[usize],
        bias_feature: bool,
        seed: u64,
    ) -> Result<Self, ObserverError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = Vec::with_capacity(widths.len());
        let mut prev = input;
        for &w in widths {
            let bound = 1.0 / ((prev + 1) as f64).sqrt();
            let data: Vec<f64> = (0..w * (prev + 1)).map(|_| rng.gen_range(-bound..=bound)).collect();
            weights.push(Matrix::from_row_slice(w, prev + 1, &data)?);
            prev = w;
        }
        let spec = Self {
            input,
            widths: widths.to_vec(),
            activations: activations.to_vec(),
            weights,
            feature_layers: feature_layers.to_vec(),
            bias_feature,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), ObserverError> {
        let bad = |m: String| Err(ObserverError::InvalidNetwork(m));
        if self.widths.is_empty() {
            return bad("need at least one layer".into());
        }
        if self.activations.len() != self.widths.len() || self.weights.len() != self.widths.len() {
            return bad("widths, activations and weights must have equal length".into());
        }
        let mut prev = self.input;
        for (k, (w, m)) in self.widths.iter().zip(&self.weights).enumerate() {
            if m.rows() != *w || m.cols() != prev + 1 {
                return bad(format!(
                    "layer {k}: weight is {}x{}, expected {w}x{}",
                    m.rows(),
                    m.cols(),
                    prev + 1
                ));
            }
            if !m.is_finite() {
                return bad(format!("layer {k}: non-finite weight"));
            }
            prev = *w;
        }
        if self.feature_layers.is_empty() && !self.bias_feature {
            return bad("no feature layers selected".into());
        }
        if self.feature_layers.iter().any(|l| *l >= self.widths.len()) {
            return bad("feature layer index out of range".into());
        }
        Ok(())
    }

    /// Feature dimension `p`.
    pub fn p(&self) -> usize {
        self.feature_layers.iter().map(|l| self.widths[*l]).sum::<usize>() + usize::from(self.bias_feature)
    }

    pub fn forward(&self, x: &[f64]) -> ForwardPass {
        let mut pre = Vec::with_capacity(self.widths.len());
        let mut out: Vec<Vec<f64>> = Vec::with_capacity(self.widths.len());
        for (k, (w, act)) in self.weights.iter().zip(&self.activations).enumerate() {
            let input = if k == 0 { x } else { out[k - 1].as_slice() };
            let cols = w.cols();
            let s: Vec<f64> = (0..w.rows())
                .map(|r| {
                    let row = w.row_slice(r);
                    row[..cols - 1].iter().zip(input).map(|(a, b)| a * b).sum::<f64>() + row[cols - 1]
                })
                .collect();
            let a: Vec<f64> = s.iter().map(|v| act.eval(*v)).collect();
            pre.push(s);
            out.push(a);
        }
        ForwardPass { pre, out }
    }

    pub fn features_from(&self, pass: &ForwardPass) -> Vec<f64> {
        let mut phi = Vec::with_capacity(self.p());
        for l in &self.feature_layers {
            phi.extend_from_slice(&pass.out[*l]);
        }
        if self.bias_feature {
            phi.push(1.0);
        }
        phi
    }

    /// `φ(Φ(x))`
    pub fn features(&self, x: &[f64]) -> Vec<f64> {
        self.features_from(&self.forward(x))
    }

    pub fn param_count(&self) -> usize {
        self.weights.iter().map(|w| w.rows() * w.cols()).sum()
    }

    /// All inner weights, layer by layer, row-major.
    pub fn params(&self) -> Vec<f64> {
        self.weights.iter().flat_map(|w| w.as_slice().iter().copied()).collect()
    }

    pub fn set_params(&mut self, params: &[f64]) {
        assert_eq!(params.len(), self.param_count());
        let mut offset = 0;
        for w in &mut self.weights {
            let len = w.rows() * w.cols();
            w.as_mut_slice().copy_from_slice(&params[offset..offset + len]);
            offset += len;
        }
    }

    pub fn to_json(&self) -> Result<String, ObserverError> {
        serde_json::to_string_pretty(self).map_err(|e| ObserverError::Document(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self, ObserverError> {
        let spec: Self = serde_json::from_str(text).map_err(|e| ObserverError::Document(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObserverGains {
    pub k_theta: f64,
    pub kappa: f64,
    /// p×p adaptation gain.
    pub gamma: Matrix,
    pub theta_bar: f64,
    /// Projection band as a fraction of `theta_bar`.
    pub band: f64,
}

/// Fixed observer structure: linear part, output injection and the network.
#[derive(Debug, Clone)]
pub struct Observer {
    pub a: Matrix,
    pub c: Matrix,
    pub k: Matrix,
    /// Lyapunov weight `S` and solution `P` for `A − KC`.
    pub s: Matrix,
    pub p: Matrix,
    pub gains: ObserverGains,
    dnn: DnnSpec,
}

/// Evolving observer quantities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObserverState {
    pub xhat: Vec<f64>,
    /// p×n outer-layer weights.
    pub theta: Matrix,
}

/// Sums over a history stack that drive the outer-layer update:
/// `Σ_Y = Σ YYᵀ/(1+κ‖Y‖²)` and `Σ_YX = Σ Y(X̂ − G_u)ᵀ/(1+κ‖Y‖²)`.
#[derive(Debug, Clone, PartialEq)]
pub struct IclSums {
    pub sigma_y: Matrix,
    pub sigma_yx: Matrix,
    pub len: usize,
}

impl IclSums {
    pub fn empty(p: usize, n: usize) -> Self {
        Self { sigma_y: Matrix::zeros(p, p), sigma_yx: Matrix::zeros(p, n), len: 0 }
    }
}

impl Observer {
    pub fn new(a: Matrix, c: Matrix, k: Matrix, s: Matrix, dnn: DnnSpec, gains: ObserverGains) -> Result<Self, ObserverError> {
        let n = a.rows();
        if !a.is_square() || c.cols() != n || k.rows() != n || k.cols() != c.rows() {
            return Err(ObserverError::Invalid("inconsistent A, C, K shapes".into()));
        }
        dnn.validate()?;
        if dnn.input != n {
            return Err(ObserverError::InvalidNetwork(format!("network input {} != state dimension {n}", dnn.input)));
        }
        let p = dnn.p();
        if gains.gamma.rows() != p || gains.gamma.cols() != p {
            return Err(ObserverError::Invalid(format!("gamma must be {p}x{p}")));
        }
        if sym_eig_min(&gains.gamma)? <= 0.0 {
            return Err(ObserverError::Invalid("gamma must be positive definite".into()));
        }
        if !(gains.k_theta >= 0.0 && gains.kappa >= 0.0 && gains.theta_bar > 0.0 && gains.band > 0.0) {
            return Err(ObserverError::Invalid("need k_theta, kappa >= 0 and theta_bar, band > 0".into()));
        }
        let acl = a.sub(&k.matmul(&c));
        if !is_hurwitz(&acl) {
            return Err(ObserverError::NotHurwitz);
        }
        let p_mat = solve_lyapunov(&acl, &s)?;
        Ok(Self { a, c, k, s, p: p_mat, gains, dnn })
    }

    pub fn n(&self) -> usize {
        self.a.rows()
    }

    pub fn p_features(&self) -> usize {
        self.dnn.p()
    }

    pub fn dnn(&self) -> &DnnSpec {
        &self.dnn
    }

    /// Replaces the inner layers. Shapes must match the current network.
    pub fn swap_dnn(&mut self, dnn: DnnSpec) -> Result<(), ObserverError> {
        dnn.validate()?;
        if dnn.widths != self.dnn.widths || dnn.input != self.dnn.input || dnn.p() != self.dnn.p() {
            return Err(ObserverError::InvalidNetwork("replacement network has a different shape".into()));
        }
        self.dnn = dnn;
        Ok(())
    }

    pub fn features(&self, x: &[f64]) -> Vec<f64> {
        self.dnn.features(x)
    }

    /// `A x̂ + θ̂ᵀ φ(Φ(x̂))`
    pub fn estimated_drift(&self, theta: &Matrix, xhat: &[f64]) -> Vec<f64> {
        let mut f = self.a.matvec(xhat);
        axpy(1.0, &theta.tr_matvec(&self.features(xhat)), &mut f);
        f
    }

    /// Observer right-hand side for given `g(x̂)`.
    pub fn xhat_rhs(&self, theta: &Matrix, xhat: &[f64], g_xhat: &Matrix, u: &[f64], y: &[f64]) -> Vec<f64> {
        let mut d = self.estimated_drift(theta, xhat);
        axpy(1.0, &g_xhat.matvec(u), &mut d);
        let cx = self.c.matvec(xhat);
        let innov: Vec<f64> = y.iter().zip(&cx).map(|(a, b)| a - b).collect();
        axpy(1.0, &self.k.matvec(&innov), &mut d);
        d
    }

    /// Projected outer-layer rate `proj(k_θ γ (Σ_YX − Σ_Y θ̂))`.
    pub fn theta_rhs(&self, theta: &Matrix, sums: &IclSums) -> Matrix {
        if sums.len == 0 {
            return Matrix::zeros(theta.rows(), theta.cols());
        }
        let resid = sums.sigma_yx.sub(&sums.sigma_y.matmul(theta));
        let f = self.gains.gamma.matmul(&resid).scale(self.gains.k_theta);
        let proj = smooth_proj(theta.as_slice(), f.as_slice(), self.gains.theta_bar, self.gains.band);
        Matrix::from_row_slice(theta.rows(), theta.cols(), &proj).expect("same shape")
    }

    /// One RK4 step of the estimate with `θ̂`, `u` and `y` held fixed.
    pub fn observer_step(
        &self,
        state: &ObserverState,
        plant: &PlantModel,
        u: &[f64],
        y: &[f64],
        t: f64,
        dt: f64,
    ) -> Result<ObserverState, ObserverError> {
        let xhat = rk4_step(
            |x, _| self.xhat_rhs(&state.theta, x, &plant.effectiveness(x), u, y),
            &state.xhat,
            t,
            dt,
        )
        .map_err(|_| ObserverError::Fault { t })?;
        if xhat.iter().any(|v| !v.is_finite()) {
            return Err(ObserverError::Fault { t: t + dt });
        }
        Ok(ObserverState { xhat, theta: state.theta.clone() })
    }

    /// One RK4 step of the outer-layer weights under the ICL law.
    pub fn icl_update(&self, state: &ObserverState, sums: &IclSums, dt: f64) -> ObserverState {
        if sums.len == 0 {
            return state.clone();
        }
        let (rows, cols) = (state.theta.rows(), state.theta.cols());
        let mut next = rk4_step(
            |v, _| {
                let th = Matrix::from_row_slice(rows, cols, v).expect("theta shape");
                self.theta_rhs(&th, sums).into_vec()
            },
            state.theta.as_slice(),
            0.0,
            dt,
        )
        .unwrap_or_else(|_| state.theta.as_slice().to_vec());
        clamp_to_ball(&mut next, self.gains.theta_bar, self.gains.band);
        ObserverState {
            xhat: state.xhat.clone(),
            theta: Matrix::from_row_slice(rows, cols, &next).expect("theta shape"),
        }
    }
}
