//! Actor-critic approximate dynamic programming with Bellman-error
//! extrapolation.
//!
//! Value `V̂ = Ŵcᵀσ(x)`, policy `û = −½R⁻¹gᵀ∇σᵀŴa`. The critic weights follow
//! a normalized recursive least-squares law driven by Bellman errors evaluated
//! at fixed off-trajectory points, and the actor tracks the critic under a
//! smooth norm projection.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{axpy, dot, rk4_step, sym_eig_min, sym_eig_range, Matrix, NumericsError};
use crate::plant::{CostSpec, PlantModel};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CriticError {
    #[error("non-finite critic/actor update: {snapshot}")]
    LearningFault { snapshot: String },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("invalid critic configuration: {0}")]
    Invalid(String),
}

pub type BasisFn = Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>;
pub type BasisJac = Arc<dyn Fn(&[f64]) -> Matrix + Send + Sync>;

/// Feature map `σ: ℝⁿ → ℝᴸ` and its Jacobian (L×n).
#[derive(Clone)]
pub struct BasisSpec {
    l: usize,
    sigma: BasisFn,
    jac: BasisJac,
}

impl fmt::Debug for BasisSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("BasisSpec").field("l", &self.l).finish_non_exhaustive()
    }
}

impl BasisSpec {
    pub fn new(l: usize, sigma: BasisFn, jac: BasisJac) -> Self {
        Self { l, sigma, jac }
    }

    /// `σ(x) = [x₁², x₁x₂, x₂²]`
    pub fn quadratic2() -> Self {
        Self::new(
            3,
            Arc::new(|x| vec![x[0] * x[0], x[0] * x[1], x[1] * x[1]]),
            Arc::new(|x| {
                Matrix::from_row_slice(3, 2, &[2.0 * x[0], 0.0, x[1], x[0], 0.0, 2.0 * x[1]])
                    .expect("3x2 jacobian")
            }),
        )
    }

    pub fn len(&self) -> usize {
        self.l
    }

    pub fn is_empty(&self) -> bool {
        self.l == 0
    }

    pub fn sigma(&self, x: &[f64]) -> Vec<f64> {
        (self.sigma)(x)
    }

    pub fn jac(&self, x: &[f64]) -> Matrix {
        (self.jac)(x)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriticGains {
    pub kc: f64,
    pub ka1: f64,
    pub ka2: f64,
    pub nu: f64,
    pub beta: f64,
    /// Actor projection radius.
    pub w_bar: f64,
    /// Projection band as a fraction of the radius.
    pub kappa_p: f64,
    pub gamma_max: f64,
    pub gamma_min: f64,
}

impl Default for CriticGains {
    fn default() -> Self {
        Self { kc: 5.0, ka1: 0.5, ka2: 0.1, nu: 0.7, beta: 0.01, w_bar: 10.0, kappa_p: 0.1, gamma_max: 1e4, gamma_min: 1e-6 }
    }
}

/// Learned quantities that evolve in time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriticState {
    pub wc: Vec<f64>,
    pub wa: Vec<f64>,
    pub gamma: Matrix,
}

impl CriticState {
    pub fn flat_len(l: usize) -> usize {
        2 * l + l * l
    }

    /// `[Ŵc, vec(Γ), Ŵa]`
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = self.wc.clone();
        v.extend_from_slice(self.gamma.as_slice());
        v.extend_from_slice(&self.wa);
        v
    }

    pub fn from_flat(l: usize, v: &[f64]) -> Self {
        Self {
            wc: v[..l].to_vec(),
            gamma: Matrix::from_row_slice(l, l, &v[l..l + l * l]).expect("flat gamma block"),
            wa: v[l + l * l..2 * l + l * l].to_vec(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.wc.iter().chain(&self.wa).all(|v| v.is_finite()) && self.gamma.is_finite()
    }
}

/// Bellman error at one point together with its regressor.
#[derive(Debug, Clone, PartialEq)]
pub struct BellmanEval {
    pub delta: f64,
    pub omega: Vec<f64>,
    pub rho: f64,
}

/// Time derivatives of the learned quantities plus per-evaluation diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct CriticRhs {
    pub dwc: Vec<f64>,
    pub dgamma: Matrix,
    pub dwa: Vec<f64>,
    pub delta_mean_abs: f64,
    pub delta_max_abs: f64,
    /// Largest `‖ω/ρ‖` over the extrapolation points.
    pub max_normalized_regressor: f64,
}

#[derive(Debug, Clone)]
struct PointCache {
    x: Vec<f64>,
    jac: Matrix,
    g: Matrix,
    /// `∇σ g R⁻¹ gᵀ ∇σᵀ`
    g_sigma: Matrix,
}

/// Basis, gains and the fixed extrapolation points with their cached
/// state-only quantities.
#[derive(Debug, Clone)]
pub struct Critic {
    basis: BasisSpec,
    pub gains: CriticGains,
    points: Vec<PointCache>,
}

/// Uniform `per_axis × per_axis` grid over `[-half, half]²`.
pub fn extrapolation_grid(per_axis: usize, half: f64) -> Vec<Vec<f64>> {
    let step = if per_axis > 1 { 2.0 * half / (per_axis - 1) as f64 } else { 0.0 };
    let mut pts = Vec::with_capacity(per_axis * per_axis);
    for i in 0..per_axis {
        for j in 0..per_axis {
            pts.push(vec![-half + step * i as f64, -half + step * j as f64]);
        }
    }
    pts
}

/// `V̂(x) = Ŵcᵀσ(x)`
pub fn approx_value(basis: &BasisSpec, wc: &[f64], x: &[f64]) -> f64 {
    dot(wc, &basis.sigma(x))
}

/// `û(x) = −½ R⁻¹ g(x)ᵀ ∇σ(x)ᵀ Ŵa`
pub fn approx_policy(basis: &BasisSpec, plant: &PlantModel, cost: &CostSpec, wa: &[f64], x: &[f64]) -> Vec<f64> {
    policy_from(&basis.jac(x), &plant.effectiveness(x), cost, wa)
}

fn policy_from(jac: &Matrix, g: &Matrix, cost: &CostSpec, wa: &[f64]) -> Vec<f64> {
    let grad_v = jac.tr_matvec(wa);
    let gt = g.tr_matvec(&grad_v);
    cost.r_inv().matvec(&gt).into_iter().map(|v| -0.5 * v).collect()
}

fn bellman_from(
    jac: &Matrix,
    g: &Matrix,
    x: &[f64],
    drift: &[f64],
    cost: &CostSpec,
    wc: &[f64],
    wa: &[f64],
    nu: f64,
) -> BellmanEval {
    let u = policy_from(jac, g, cost, wa);
    let mut xdot = drift.to_vec();
    axpy(1.0, &g.matvec(&u), &mut xdot);
    let omega = jac.matvec(&xdot);
    let delta = dot(wc, &omega) + cost.state_cost(x) + cost.control_cost(&u);
    let rho = 1.0 + nu * dot(&omega, &omega);
    BellmanEval { delta, omega, rho }
}

/// `δ = Ŵcᵀ∇σ(f + gû) + Q(x) + ûᵀRû`, `ω = ∇σ(f + gû)`, `ρ = 1 + νωᵀω`.
pub fn bellman_error(
    basis: &BasisSpec,
    plant: &PlantModel,
    drift: &dyn Fn(&[f64]) -> Vec<f64>,
    cost: &CostSpec,
    wc: &[f64],
    wa: &[f64],
    x: &[f64],
    nu: f64,
) -> BellmanEval {
    bellman_from(&basis.jac(x), &plant.effectiveness(x), x, &drift(x), cost, wc, wa, nu)
}

/// Smooth projection of `rhs` keeping `value` inside the ball of radius
/// `radius·(1 + band)`.
///
/// Inside the ball, or when `rhs` points inward, `rhs` is returned unchanged.
/// Across the band the outward radial component is scaled down linearly in
/// `‖value‖²`, reaching full removal at the outer edge.
pub fn smooth_proj(value: &[f64], rhs: &[f64], radius: f64, band: f64) -> Vec<f64> {
    let n2 = dot(value, value);
    let r2 = radius * radius;
    let push = dot(value, rhs);
    if n2 <= r2 || push <= 0.0 {
        return rhs.to_vec();
    }
    let eps = band * radius;
    let c = ((n2 - r2) / (eps * eps + 2.0 * eps * radius)).min(1.0);
    let mut out = rhs.to_vec();
    axpy(-c * push / n2, value, &mut out);
    out
}

/// Radially rescales `value` back onto the ball of radius `radius·(1 + band)`.
/// The continuous projection keeps the norm there; a discrete step can
/// overshoot by the integration error.
pub fn clamp_to_ball(value: &mut [f64], radius: f64, band: f64) -> bool {
    let outer = radius * (1.0 + band);
    let n = dot(value, value).sqrt();
    if n <= outer {
        return false;
    }
    let s = outer / n;
    value.iter_mut().for_each(|v| *v *= s);
    true
}

impl Critic {
    pub fn new(
        basis: BasisSpec,
        gains: CriticGains,
        points: Vec<Vec<f64>>,
        plant: &PlantModel,
        cost: &CostSpec,
    ) -> Result<Self, CriticError> {
        if points.is_empty() {
            return Err(CriticError::Invalid("need at least one extrapolation point".into()));
        }
        for (name, v) in [("kc", gains.kc), ("ka1", gains.ka1), ("ka2", gains.ka2), ("nu", gains.nu), ("beta", gains.beta)] {
            if !(v >= 0.0) {
                return Err(CriticError::Invalid(format!("{name} must be >= 0, got {v}")));
            }
        }
        if !(gains.nu > 0.0) || !(gains.w_bar > 0.0) || !(gains.kappa_p > 0.0) {
            return Err(CriticError::Invalid("nu, w_bar and kappa_p must be > 0".into()));
        }
        if !(gains.gamma_min > 0.0 && gains.gamma_max > gains.gamma_min) {
            return Err(CriticError::Invalid("need 0 < gamma_min < gamma_max".into()));
        }
        let points = points
            .into_iter()
            .map(|x| {
                let jac = basis.jac(&x);
                let g = plant.effectiveness(&x);
                let b = jac.matmul(&g);
                let g_sigma = b.matmul(cost.r_inv()).matmul(&b.transpose());
                PointCache { x, jac, g, g_sigma }
            })
            .collect();
        Ok(Self { basis, gains, points })
    }

    pub fn basis(&self) -> &BasisSpec {
        &self.basis
    }

    pub fn l(&self) -> usize {
        self.basis.len()
    }

    pub fn points(&self) -> impl Iterator<Item = &[f64]> {
        self.points.iter().map(|p| p.x.as_slice())
    }

    pub fn n_points(&self) -> usize {
        self.points.len()
    }

    pub fn validate_state(&self, state: &CriticState) -> Result<(), CriticError> {
        let l = self.l();
        if state.wc.len() != l || state.wa.len() != l || state.gamma.rows() != l || state.gamma.cols() != l {
            return Err(CriticError::Invalid(format!("critic state must have L = {l}")));
        }
        let min = sym_eig_min(&state.gamma)?;
        if min <= 0.0 {
            return Err(CriticError::Invalid("initial Gamma must be positive definite".into()));
        }
        Ok(())
    }

    /// Bellman errors at every extrapolation point. `drift_at` supplies the
    /// drift value at each point, in point order.
    pub fn extrapolate(&self, drift_at: &[Vec<f64>], cost: &CostSpec, wc: &[f64], wa: &[f64]) -> Vec<BellmanEval> {
        self.points
            .iter()
            .zip(drift_at)
            .map(|(p, f)| bellman_from(&p.jac, &p.g, &p.x, f, cost, wc, wa, self.gains.nu))
            .collect()
    }

    /// Right-hand side of the coupled `(Ŵc, Γ, Ŵa)` ODEs.
    pub fn rhs(&self, state: &CriticState, drift_at: &[Vec<f64>], cost: &CostSpec) -> CriticRhs {
        let l = self.l();
        let gains = &self.gains;
        let n = self.points.len() as f64;
        let evals = self.extrapolate(drift_at, cost, &state.wc, &state.wa);
        let mut sum_wd = vec![0.0; l];
        let mut gram = Matrix::zeros(l, l);
        let mut actor_cross = vec![0.0; l];
        let mut delta_sum = 0.0;
        let mut delta_max: f64 = 0.0;
        let mut reg_max: f64 = 0.0;
        for (p, e) in self.points.iter().zip(&evals) {
            axpy(e.delta / e.rho, &e.omega, &mut sum_wd);
            gram.add_scaled(1.0 / (e.rho * e.rho), &Matrix::outer(&e.omega, &e.omega));
            let gs_wa = p.g_sigma.tr_matvec(&state.wa);
            axpy(dot(&e.omega, &state.wc) / e.rho, &gs_wa, &mut actor_cross);
            delta_sum += e.delta.abs();
            delta_max = delta_max.max(e.delta.abs());
            reg_max = reg_max.max(dot(&e.omega, &e.omega).sqrt() / e.rho);
        }
        let dwc: Vec<f64> = state.gamma.matvec(&sum_wd).into_iter().map(|v| -gains.kc / n * v).collect();
        let mut dgamma = state.gamma.scale(gains.beta);
        dgamma.add_scaled(-gains.kc / n, &state.gamma.matmul(&gram).matmul(&state.gamma));
        let mut fa = vec![0.0; l];
        for i in 0..l {
            fa[i] = -gains.ka1 * (state.wa[i] - state.wc[i]) - gains.ka2 * state.wa[i]
                + gains.kc / (4.0 * n) * actor_cross[i];
        }
        let dwa = smooth_proj(&state.wa, &fa, gains.w_bar, gains.kappa_p);
        CriticRhs {
            dwc,
            dgamma,
            dwa,
            delta_mean_abs: delta_sum / n,
            delta_max_abs: delta_max,
            max_normalized_regressor: reg_max,
        }
    }

    /// `λ_min((1/N) Σ ωₖωₖᵀ/ρₖ²)`
    pub fn rank_monitor(&self, state: &CriticState, drift_at: &[Vec<f64>], cost: &CostSpec) -> Result<f64, CriticError> {
        let l = self.l();
        let mut gram = Matrix::zeros(l, l);
        let evals = self.extrapolate(drift_at, cost, &state.wc, &state.wa);
        for e in &evals {
            gram.add_scaled(1.0 / (e.rho * e.rho), &Matrix::outer(&e.omega, &e.omega));
        }
        Ok(sym_eig_min(&gram.scale(1.0 / evals.len() as f64))?)
    }

    /// Keeps `Γ` within its eigenvalue band: a step that would leave
    /// `[gamma_min, gamma_max]` is discarded and the previous `Γ` kept.
    pub fn clamp_gamma(&self, previous: &Matrix, proposed: &Matrix) -> Result<(Matrix, bool), CriticError> {
        let sym = proposed.symmetrize();
        let (lo, hi) = sym_eig_range(&sym)?;
        if lo < self.gains.gamma_min || hi > self.gains.gamma_max {
            Ok((previous.clone(), true))
        } else {
            Ok((sym, false))
        }
    }

    /// One RK4 step of the learning ODEs with the drift held as a function of
    /// the point only.
    pub fn update_step(
        &self,
        state: &CriticState,
        drift: &dyn Fn(&[f64]) -> Vec<f64>,
        cost: &CostSpec,
        dt: f64,
    ) -> Result<CriticState, CriticError> {
        let l = self.l();
        let drift_at: Vec<Vec<f64>> = self.points.iter().map(|p| drift(&p.x)).collect();
        let flat = state.to_flat();
        let next = rk4_step(
            |v, _| {
                let s = CriticState::from_flat(l, v);
                let r = self.rhs(&s, &drift_at, cost);
                let mut out = r.dwc;
                out.extend_from_slice(r.dgamma.as_slice());
                out.extend_from_slice(&r.dwa);
                out
            },
            &flat,
            0.0,
            dt,
        )
        .map_err(|_| CriticError::LearningFault { snapshot: format!("{state:?}") })?;
        let mut out = CriticState::from_flat(l, &next);
        if !out.is_finite() {
            return Err(CriticError::LearningFault { snapshot: format!("{state:?}") });
        }
        out.gamma = self.clamp_gamma(&state.gamma, &out.gamma)?.0;
        clamp_to_ball(&mut out.wa, self.gains.w_bar, self.gains.kappa_p);
        Ok(out)
    }
}
