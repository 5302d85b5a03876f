//! Control-affine plants, barrier functions and the two benchmark systems.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{dot, Matrix};

/// Magnitude below which a robust channel bound is treated as sign-less.
pub const SIGN_FLOOR: f64 = 1e-9;

pub type VecField = Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>;
pub type MatField = Arc<dyn Fn(&[f64]) -> Matrix + Send + Sync>;
pub type ScalarField = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlantError {
    #[error("unknown benchmark '{0}' (expected convex_set or obstacle)")]
    UnknownBenchmark(String),
    #[error("invalid safety parameters: {0}")]
    InvalidSafety(String),
    #[error("invalid cost: {0}")]
    InvalidCost(String),
}

/// `ẋ = f(x) + g(x)u`, `y = Cx`.
#[derive(Clone)]
pub struct PlantModel {
    n: usize,
    m: usize,
    output: Matrix,
    drift: VecField,
    effectiveness: MatField,
    /// Bound on `‖g(x)‖` over the working set.
    pub g_bar: f64,
}

impl fmt::Debug for PlantModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PlantModel")
            .field("n", &self.n)
            .field("m", &self.m)
            .field("output", &self.output)
            .field("g_bar", &self.g_bar)
            .finish_non_exhaustive()
    }
}

impl PlantModel {
    pub fn new(n: usize, m: usize, output: Matrix, drift: VecField, effectiveness: MatField) -> Self {
        assert_eq!(output.cols(), n, "output matrix must have n columns");
        let mut plant = Self { n, m, output, drift, effectiveness, g_bar: 0.0 };
        plant.g_bar = plant.estimate_g_bar(3.0, 61);
        plant
    }

    /// `ẋ = A x + B u`, `y = C x`.
    pub fn linear(a: Matrix, b: Matrix, c: Matrix) -> Self {
        let n = a.rows();
        let m = b.cols();
        let drift_a = a.clone();
        Self::new(n, m, c, Arc::new(move |x| drift_a.matvec(x)), Arc::new(move |_| b.clone()))
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn q(&self) -> usize {
        self.output.rows()
    }

    pub fn output_matrix(&self) -> &Matrix {
        &self.output
    }

    pub fn drift(&self, x: &[f64]) -> Vec<f64> {
        (self.drift)(x)
    }

    /// `g(x)`, n×m.
    pub fn effectiveness(&self, x: &[f64]) -> Matrix {
        (self.effectiveness)(x)
    }

    pub fn measure(&self, x: &[f64]) -> Vec<f64> {
        self.output.matvec(x)
    }

    /// `f(x) + g(x)u`
    pub fn vector_field(&self, x: &[f64], u: &[f64]) -> Vec<f64> {
        let mut dx = self.drift(x);
        let gu = self.effectiveness(x).matvec(u);
        for (d, v) in dx.iter_mut().zip(gu) {
            *d += v;
        }
        dx
    }

    /// Largest Frobenius norm of `g` on a uniform grid over `[-half, half]ⁿ`
    /// (only the first two coordinates are gridded; the rest are held at 0).
    pub fn estimate_g_bar(&self, half: f64, per_axis: usize) -> f64 {
        let mut best: f64 = 0.0;
        let step = 2.0 * half / (per_axis.max(2) - 1) as f64;
        let axes = self.n.min(2);
        let count = if axes == 2 { per_axis * per_axis } else { per_axis };
        for k in 0..count {
            let mut x = vec![0.0; self.n];
            x[0] = -half + step * (k % per_axis) as f64;
            if axes == 2 {
                x[1] = -half + step * (k / per_axis) as f64;
            }
            best = best.max(self.effectiveness(&x).frobenius_norm());
        }
        best
    }
}

/// Barrier `h`, its gradient, the class-K gain and the robustification data.
#[derive(Clone)]
pub struct SafetySpec {
    barrier: ScalarField,
    barrier_grad: VecField,
    pub classk_gain: f64,
    pub eps: f64,
    pub lip_f: f64,
    pub lip_g: Vec<f64>,
}

impl fmt::Debug for SafetySpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SafetySpec")
            .field("classk_gain", &self.classk_gain)
            .field("eps", &self.eps)
            .field("lip_f", &self.lip_f)
            .field("lip_g", &self.lip_g)
            .finish_non_exhaustive()
    }
}

impl SafetySpec {
    pub fn new(
        barrier: ScalarField,
        barrier_grad: VecField,
        classk_gain: f64,
        eps: f64,
        lip_f: f64,
        lip_g: Vec<f64>,
    ) -> Result<Self, PlantError> {
        let spec = Self { barrier, barrier_grad, classk_gain, eps, lip_f, lip_g };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), PlantError> {
        if !(self.classk_gain > 0.0) {
            return Err(PlantError::InvalidSafety(format!("classk_gain must be > 0, got {}", self.classk_gain)));
        }
        if !(self.eps >= 0.0) {
            return Err(PlantError::InvalidSafety(format!("eps must be >= 0, got {}", self.eps)));
        }
        if !(self.lip_f >= 0.0) || self.lip_g.iter().any(|l| !(*l >= 0.0)) {
            return Err(PlantError::InvalidSafety("Lipschitz constants must be >= 0".into()));
        }
        Ok(())
    }

    pub fn h(&self, x: &[f64]) -> f64 {
        (self.barrier)(x)
    }

    pub fn grad(&self, x: &[f64]) -> Vec<f64> {
        (self.barrier_grad)(x)
    }

    /// Linear class-K function `α(s) = c·s`.
    pub fn alpha(&self, s: f64) -> f64 {
        self.classk_gain * s
    }

    /// Same barrier with a different robustification radius.
    pub fn with_eps(&self, eps: f64) -> Self {
        Self { eps, ..self.clone() }
    }

    /// Same barrier with new robustification data and class-K gain.
    pub fn with_robustness(&self, eps: f64, lip_f: f64, lip_g: Vec<f64>, classk_gain: f64) -> Self {
        Self { eps, lip_f, lip_g, classk_gain, ..self.clone() }
    }
}

/// `h(x)` and `∇h(x)`.
pub fn eval_barrier(spec: &SafetySpec, x: &[f64]) -> (f64, Vec<f64>) {
    (spec.h(x), spec.grad(x))
}

/// Quadratic running cost `xᵀQx + uᵀRu`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostSpec {
    pub q: Matrix,
    pub r: Matrix,
    r_inv: Matrix,
}

impl CostSpec {
    pub fn new(q: Matrix, r: Matrix) -> Result<Self, PlantError> {
        let qmin = crate::numerics::sym_eig_min(&q).map_err(|e| PlantError::InvalidCost(e.to_string()))?;
        if qmin <= 0.0 {
            return Err(PlantError::InvalidCost("state weight must be positive definite".into()));
        }
        let rmin = crate::numerics::sym_eig_min(&r).map_err(|e| PlantError::InvalidCost(e.to_string()))?;
        if rmin <= 0.0 {
            return Err(PlantError::InvalidCost("control penalty R must be positive definite".into()));
        }
        let m = r.rows();
        let mut r_inv = Matrix::zeros(m, m);
        for j in 0..m {
            let mut e = vec![0.0; m];
            e[j] = 1.0;
            let col = crate::numerics::lu_solve(&r, &e).map_err(|e| PlantError::InvalidCost(e.to_string()))?;
            for i in 0..m {
                r_inv[(i, j)] = col[i];
            }
        }
        Ok(Self { q, r, r_inv: r_inv.symmetrize() })
    }

    /// `Q(x) = xᵀ Q x`
    pub fn state_cost(&self, x: &[f64]) -> f64 {
        dot(x, &self.q.matvec(x))
    }

    /// `uᵀ R u`
    pub fn control_cost(&self, u: &[f64]) -> f64 {
        dot(u, &self.r.matvec(u))
    }

    pub fn r_inv(&self) -> &Matrix {
        &self.r_inv
    }
}

/// Robust constraint data for the safety QP.
#[derive(Debug, Clone, PartialEq)]
pub struct RobustBounds {
    pub f: f64,
    pub g_minus: Vec<f64>,
    pub g_plus: Vec<f64>,
    /// Nominal `[∇h g]ᵢ` before widening.
    pub nominal_g: Vec<f64>,
    /// Channels whose nominal value is below [`SIGN_FLOOR`]; both bounds are
    /// zeroed for those channels.
    pub degenerate: Vec<usize>,
    /// Channels where the widened band crossed zero and was clamped.
    pub clamped: Vec<usize>,
}

/// `F`, `G⁻`, `G⁺` at `xhat`, given the drift value used there (true or
/// estimated).
pub fn robust_bounds(spec: &SafetySpec, plant: &PlantModel, xhat: &[f64], drift_at_xhat: &[f64]) -> RobustBounds {
    let (h, grad) = eval_barrier(spec, xhat);
    let f = dot(&grad, drift_at_xhat) + spec.alpha(h) - spec.lip_f * spec.eps;
    let g = plant.effectiveness(xhat);
    let nominal_g = g.tr_matvec(&grad);
    let mut g_minus = Vec::with_capacity(plant.m());
    let mut g_plus = Vec::with_capacity(plant.m());
    let mut degenerate = Vec::new();
    let mut clamped = Vec::new();
    for (i, nom) in nominal_g.iter().enumerate() {
        let half = spec.lip_g.get(i).copied().unwrap_or(0.0) * spec.eps;
        let (mut lo, mut hi) = (nom - half, nom + half);
        if nom.abs() < SIGN_FLOOR {
            degenerate.push(i);
            lo = 0.0;
            hi = 0.0;
        } else if *nom > 0.0 && lo < SIGN_FLOOR {
            clamped.push(i);
            lo = SIGN_FLOOR;
        } else if *nom < 0.0 && hi > -SIGN_FLOOR {
            clamped.push(i);
            hi = -SIGN_FLOOR;
        }
        g_minus.push(lo);
        g_plus.push(hi);
    }
    RobustBounds { f, g_minus, g_plus, nominal_g, degenerate, clamped }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchmarkId {
    ConvexSet,
    Obstacle,
}

impl BenchmarkId {
    pub fn as_str(self) -> &'static str {
        match self {
            BenchmarkId::ConvexSet => "convex_set",
            BenchmarkId::Obstacle => "obstacle",
        }
    }
}

impl fmt::Display for BenchmarkId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BenchmarkId {
    type Err = PlantError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "convex_set" => Ok(BenchmarkId::ConvexSet),
            "obstacle" => Ok(BenchmarkId::Obstacle),
            other => Err(PlantError::UnknownBenchmark(other.to_string())),
        }
    }
}

pub const OBSTACLE_CENTER: [f64; 2] = [-0.7, 1.2];
pub const OBSTACLE_RADIUS: f64 = 0.35;

/// Benchmark plant, barrier (default class-K gain 1 and the printed
/// robustification data) and unit quadratic cost.
pub fn benchmark_system(id: BenchmarkId) -> (PlantModel, SafetySpec, CostSpec) {
    let c = Matrix::row(&[1.0, 0.0]);
    let cost = CostSpec::new(Matrix::identity(2), Matrix::identity(1)).expect("unit cost is valid");
    match id {
        BenchmarkId::ConvexSet => {
            let plant = PlantModel::new(
                2,
                1,
                c,
                Arc::new(|x| vec![-0.6 * x[0] - x[1], x[0].powi(3)]),
                Arc::new(|x| Matrix::column(&[0.0, x[1]])),
            );
            let safety = SafetySpec::new(
                Arc::new(|x| -x[1] * x[1] - x[0] + 1.0),
                Arc::new(|x| vec![-1.0, -2.0 * x[1]]),
                1.0,
                0.7,
                0.2,
                vec![0.2],
            )
            .expect("benchmark safety data is valid");
            (plant, safety, cost)
        }
        BenchmarkId::Obstacle => {
            let plant = PlantModel::new(
                2,
                1,
                c,
                Arc::new(|x| {
                    vec![
                        -x[0] - x[1],
                        -0.5 * x[0] - 0.5 * x[1] * (1.0 - x[0] * x[0]) - x[0] * x[0] * x[1],
                    ]
                }),
                Arc::new(|x| Matrix::column(&[0.0, (2.0 * x[0]).cos() + 2.0])),
            );
            let safety = SafetySpec::new(
                Arc::new(|x| obstacle_distance(x) - OBSTACLE_RADIUS),
                Arc::new(|x| {
                    let d = obstacle_distance(x);
                    if d == 0.0 {
                        vec![0.0, 0.0]
                    } else {
                        vec![(x[0] - OBSTACLE_CENTER[0]) / d, (x[1] - OBSTACLE_CENTER[1]) / d]
                    }
                }),
                1.0,
                0.5,
                0.1,
                vec![0.1],
            )
            .expect("benchmark safety data is valid");
            (plant, safety, cost)
        }
    }
}

fn obstacle_distance(x: &[f64]) -> f64 {
    (x[0] - OBSTACLE_CENTER[0]).hypot(x[1] - OBSTACLE_CENTER[1])
}
