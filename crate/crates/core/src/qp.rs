//! Robust CBF safety filter: `min ½‖u − π_des‖²` subject to
//! `F + Σᵢ min{G⁻ᵢuᵢ, G⁺ᵢuᵢ} ≥ 0`.
//!
//! The piecewise-linear constraint is lifted with auxiliary variables `z` into
//! a linear-inequality QP in `(u, z)` and solved by a primal active-set method.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{lu_solve, Matrix};

pub const SLACK_TOL: f64 = 1e-9;
pub const KKT_TOL: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QpError {
    #[error("safety QP data malformed: {0}")]
    Malformed(String),
    #[error("no feasible grid point in [{lo}, {hi}]")]
    EmptyGrid { lo: f64, hi: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SafetyQP {
    pub desired: Vec<f64>,
    pub f: f64,
    pub g_minus: Vec<f64>,
    pub g_plus: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QpStatus {
    Optimal,
    Infeasible,
    Degenerate,
}

impl QpStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            QpStatus::Optimal => "optimal",
            QpStatus::Infeasible => "infeasible",
            QpStatus::Degenerate => "degenerate",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QPSolution {
    pub u: Vec<f64>,
    pub z: Vec<f64>,
    /// Indices into the rows of [`StandardForm::a`].
    pub active_set: Vec<usize>,
    pub status: QpStatus,
    pub iterations: usize,
    pub kkt_residual: f64,
}

/// `min ½wᵀHw + cᵀw` subject to `A w ≥ b`, with `w = (u, z)`.
#[derive(Debug, Clone, PartialEq)]
pub struct StandardForm {
    pub h: Matrix,
    pub c: Vec<f64>,
    pub a: Matrix,
    pub b: Vec<f64>,
}

impl SafetyQP {
    pub fn m(&self) -> usize {
        self.desired.len()
    }

    pub fn validate(&self) -> Result<(), QpError> {
        let m = self.m();
        if m == 0 || self.g_minus.len() != m || self.g_plus.len() != m {
            return Err(QpError::Malformed("desired, G⁻ and G⁺ need equal nonzero length".into()));
        }
        let finite = self.f.is_finite()
            && self.desired.iter().chain(&self.g_minus).chain(&self.g_plus).all(|v| v.is_finite());
        if !finite {
            return Err(QpError::Malformed("non-finite entry".into()));
        }
        for (i, (lo, hi)) in self.g_minus.iter().zip(&self.g_plus).enumerate() {
            if lo > hi {
                return Err(QpError::Malformed(format!("channel {i}: G⁻ > G⁺")));
            }
            let zero_channel = *lo == 0.0 && *hi == 0.0;
            if !zero_channel && (lo.signum() != hi.signum() || *lo == 0.0 || *hi == 0.0) {
                return Err(QpError::Malformed(format!("channel {i}: G⁻ and G⁺ differ in sign")));
            }
        }
        Ok(())
    }

    /// `F + Σᵢ min{G⁻ᵢuᵢ, G⁺ᵢuᵢ}`
    pub fn constraint_value(&self, u: &[f64]) -> f64 {
        self.f
            + u.iter()
                .zip(self.g_minus.iter().zip(&self.g_plus))
                .map(|(ui, (lo, hi))| (lo * ui).min(hi * ui))
                .sum::<f64>()
    }

    pub fn negated(&self) -> SafetyQP {
        SafetyQP {
            desired: self.desired.iter().map(|v| -v).collect(),
            f: self.f,
            g_minus: self.g_plus.iter().map(|v| -v).collect(),
            g_plus: self.g_minus.iter().map(|v| -v).collect(),
        }
    }
}

/// Rows `2i` and `2i+1` encode `G⁻ᵢuᵢ − zᵢ ≥ 0` and `G⁺ᵢuᵢ − zᵢ ≥ 0`; the
/// last row is `Σzᵢ ≥ −F`.
pub fn build_standard_form(qp: &SafetyQP) -> StandardForm {
    let m = qp.m();
    let mut h = Matrix::zeros(2 * m, 2 * m);
    for i in 0..m {
        h[(i, i)] = 1.0;
    }
    let mut c = vec![0.0; 2 * m];
    for i in 0..m {
        c[i] = -qp.desired[i];
    }
    let mut a = Matrix::zeros(2 * m + 1, 2 * m);
    for i in 0..m {
        a[(2 * i, i)] = qp.g_minus[i];
        a[(2 * i, m + i)] = -1.0;
        a[(2 * i + 1, i)] = qp.g_plus[i];
        a[(2 * i + 1, m + i)] = -1.0;
        a[(2 * m, m + i)] = 1.0;
    }
    let mut b = vec![0.0; 2 * m + 1];
    b[2 * m] = -qp.f;
    StandardForm { h, c, a, b }
}

fn row_dot(a: &Matrix, r: usize, w: &[f64]) -> f64 {
    a.row_slice(r).iter().zip(w).map(|(x, y)| x * y).sum()
}

/// Moves `desired` along `sign(G)` to the first point where the constraint
/// holds with equality. Returns `None` if no such point exists.
fn feasible_start(qp: &SafetyQP) -> Option<Vec<f64>> {
    let dir: Vec<f64> = qp.g_minus.iter().map(|g| if *g == 0.0 { 0.0 } else { g.signum() }).collect();
    let at = |t: f64| -> Vec<f64> { qp.desired.iter().zip(&dir).map(|(d, v)| d + t * v).collect() };
    if dir.iter().all(|v| *v == 0.0) {
        return None;
    }
    // Kinks where a channel crosses zero along the ray.
    let mut kinks: Vec<f64> = qp
        .desired
        .iter()
        .zip(&dir)
        .filter(|(_, v)| **v != 0.0)
        .map(|(d, v)| -d / v)
        .filter(|t| *t > 0.0)
        .collect();
    kinks.sort_by(f64::total_cmp);
    let mut t0 = 0.0;
    let mut phi0 = qp.constraint_value(&qp.desired);
    for t1 in kinks.into_iter().chain(std::iter::once(f64::INFINITY)) {
        // Slope on (t0, t1) is Σ|G| of the side each channel sits on.
        let mid = if t1.is_finite() { 0.5 * (t0 + t1) } else { t0 + 1.0 };
        let um = at(mid);
        let slope: f64 = um
            .iter()
            .zip(&dir)
            .enumerate()
            .map(|(i, (u, v))| if *u >= 0.0 { qp.g_minus[i] * v } else { qp.g_plus[i] * v })
            .sum();
        if slope > 0.0 {
            let t_root = t0 - phi0 / slope;
            if t_root <= t1 {
                let mut u = at(t_root);
                // Clean tiny overshoots of the kink landing.
                for ui in u.iter_mut() {
                    if ui.abs() < 1e-15 {
                        *ui = 0.0;
                    }
                }
                return Some(u);
            }
        }
        if !t1.is_finite() {
            return None;
        }
        phi0 = qp.constraint_value(&at(t1));
        t0 = t1;
    }
    None
}

fn solution_z(qp: &SafetyQP, u: &[f64]) -> Vec<f64> {
    u.iter().enumerate().map(|(i, ui)| (qp.g_minus[i] * ui).min(qp.g_plus[i] * ui)).collect()
}

fn kkt_residual(sf: &StandardForm, w: &[f64], lambda: &[f64]) -> f64 {
    let n = w.len();
    let hw = sf.h.matvec(w);
    let atl = sf.a.tr_matvec(lambda);
    let mut res: f64 = 0.0;
    for j in 0..n {
        res = res.max((hw[j] + sf.c[j] - atl[j]).abs());
    }
    for (r, l) in lambda.iter().enumerate() {
        let slack = row_dot(&sf.a, r, w) - sf.b[r];
        res = res.max((-slack).max(0.0));
        res = res.max((-l).max(0.0));
        res = res.max((l * slack).abs());
    }
    res
}

/// Solves the safety QP.
pub fn solve_safety_qp(qp: &SafetyQP) -> Result<QPSolution, QpError> {
    qp.validate()?;
    let m = qp.m();
    let sf = build_standard_form(qp);
    let rows = 2 * m + 1;
    let sum_row = 2 * m;

    if qp.constraint_value(&qp.desired) >= 0.0 {
        let u = qp.desired.clone();
        let z = solution_z(qp, &u);
        let mut w = u.clone();
        w.extend_from_slice(&z);
        let kkt = kkt_residual(&sf, &w, &vec![0.0; rows]);
        return Ok(QPSolution { u, z, active_set: vec![], status: QpStatus::Optimal, iterations: 0, kkt_residual: kkt });
    }

    let Some(u0) = feasible_start(qp) else {
        return Ok(QPSolution {
            u: qp.desired.clone(),
            z: solution_z(qp, &qp.desired),
            active_set: vec![],
            status: QpStatus::Infeasible,
            iterations: 0,
            kkt_residual: f64::INFINITY,
        });
    };

    // Equal bounds make rows 2i and 2i+1 identical; only 2i is ever used.
    let usable: Vec<bool> = (0..rows).map(|r| r == sum_row || r % 2 == 0 || qp.g_minus[r / 2] != qp.g_plus[r / 2]).collect();

    let mut w = u0.clone();
    w.extend(solution_z(qp, &u0));
    let mut working: Vec<usize> = Vec::with_capacity(rows);
    for i in 0..m {
        let r = if u0[i] >= 0.0 || !usable[2 * i + 1] { 2 * i } else { 2 * i + 1 };
        working.push(r);
    }
    working.push(sum_row);

    let max_iter = 100 * m;
    let mut lambda_full = vec![0.0; rows];
    let mut status = QpStatus::Degenerate;
    let mut iterations = 0;
    while iterations < max_iter {
        iterations += 1;
        working.sort_unstable();
        let k = working.len();
        let dim = 2 * m + k;
        let mut kkt = Matrix::zeros(dim, dim);
        let mut rhs = vec![0.0; dim];
        for i in 0..2 * m {
            for j in 0..2 * m {
                kkt[(i, j)] = sf.h[(i, j)];
            }
            rhs[i] = -sf.c[i];
        }
        for (slot, &r) in working.iter().enumerate() {
            for j in 0..2 * m {
                kkt[(j, 2 * m + slot)] = -sf.a[(r, j)];
                kkt[(2 * m + slot, j)] = sf.a[(r, j)];
            }
            rhs[2 * m + slot] = sf.b[r];
        }
        let Ok(sol) = lu_solve(&kkt, &rhs) else {
            break;
        };
        let target = &sol[..2 * m];
        let lambda_w = &sol[2 * m..];
        let p: Vec<f64> = target.iter().zip(&w).map(|(t, x)| t - x).collect();
        let pnorm = p.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
        let scale = 1.0 + w.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
        if pnorm <= 1e-13 * scale {
            // Stationary on the working set: check multiplier signs.
            let mut worst: Option<(usize, f64)> = None;
            for (slot, &l) in lambda_w.iter().enumerate() {
                let r = working[slot];
                let better = match worst {
                    None => l < -1e-13,
                    Some((ws, wl)) => l < wl - 1e-13 || ((l - wl).abs() <= 1e-13 && r == sum_row && working[ws] != sum_row),
                };
                if better && l < -1e-13 {
                    worst = Some((slot, l));
                }
            }
            match worst {
                None => {
                    lambda_full.iter_mut().for_each(|v| *v = 0.0);
                    for (slot, &r) in working.iter().enumerate() {
                        lambda_full[r] = lambda_w[slot].max(0.0);
                    }
                    status = QpStatus::Optimal;
                    break;
                }
                Some((slot, _)) => {
                    working.remove(slot);
                }
            }
            continue;
        }
        let mut alpha = 1.0;
        let mut blocking = None;
        for r in 0..rows {
            if !usable[r] || working.contains(&r) {
                continue;
            }
            let ap = row_dot(&sf.a, r, &p);
            if ap < -1e-15 {
                let slack = (row_dot(&sf.a, r, &w) - sf.b[r]).max(0.0);
                let step = slack / -ap;
                if step < alpha {
                    alpha = step;
                    blocking = Some(r);
                }
            }
        }
        for (wi, pi) in w.iter_mut().zip(&p) {
            *wi += alpha * pi;
        }
        if let Some(r) = blocking {
            working.push(r);
        }
    }

    let u: Vec<f64> = w[..m].to_vec();
    let z = solution_z(qp, &u);
    let mut wz = u.clone();
    wz.extend_from_slice(&z);
    let kkt = kkt_residual(&sf, &wz, &lambda_full);
    if status == QpStatus::Optimal && qp.constraint_value(&u) < -SLACK_TOL {
        status = QpStatus::Degenerate;
    }
    working.sort_unstable();
    Ok(QPSolution { u, z, active_set: working, status, iterations, kkt_residual: kkt })
}

/// Brute-force minimizer of `½(u − π_des)²` over the feasible points of the
/// grid `lo, lo + step, …, hi` (m = 1 only).
pub fn scalar_oracle(qp: &SafetyQP, lo: f64, hi: f64, step: f64) -> Result<f64, QpError> {
    if qp.m() != 1 {
        return Err(QpError::Malformed("scalar oracle needs m = 1".into()));
    }
    let count = ((hi - lo) / step).round() as usize;
    let d = qp.desired[0];
    let mut best: Option<(f64, f64)> = None;
    for k in 0..=count {
        let u = lo + k as f64 * step;
        if qp.constraint_value(&[u]) < 0.0 {
            continue;
        }
        let cost = (u - d) * (u - d);
        if best.map_or(true, |(_, c)| cost < c) {
            best = Some((u, cost));
        }
    }
    best.map(|(u, _)| u).ok_or(QpError::EmptyGrid { lo, hi })
}

/// Feasible `u` values of `min{a·u, b·u} ≥ −c` for `a ≤ b` of equal sign.
fn slice_interval(a: f64, b: f64, c: f64) -> Option<(f64, f64)> {
    let upper_half = if a > 0.0 {
        Some(((-c / a).max(0.0), f64::INFINITY))
    } else if c < 0.0 {
        None
    } else if a == 0.0 {
        Some((0.0, f64::INFINITY))
    } else {
        Some((0.0, c / -a))
    };
    let lower_half = if b < 0.0 {
        Some((f64::NEG_INFINITY, (c / -b).min(0.0)))
    } else if c < 0.0 {
        None
    } else if b == 0.0 {
        Some((f64::NEG_INFINITY, 0.0))
    } else {
        Some((-c / b, 0.0))
    };
    match (lower_half, upper_half) {
        (Some((l, _)), Some((_, u))) => Some((l, u)),
        (Some(i), None) | (None, Some(i)) => Some(i),
        (None, None) => None,
    }
}

/// Brute-force minimizer for m = 2: a grid over `u₁` in `[lo, hi]`, refined
/// around the best point down to `step`, with `u₂` minimized exactly on each
/// slice. The feasible set is convex, so the reduced cost is unimodal in `u₁`.
pub fn plane_oracle(qp: &SafetyQP, lo: f64, hi: f64, step: f64) -> Result<Vec<f64>, QpError> {
    if qp.m() != 2 {
        return Err(QpError::Malformed("plane oracle needs m = 2".into()));
    }
    let d = &qp.desired;
    let reduced = |u1: f64| -> Option<(f64, f64)> {
        let c = qp.f + (qp.g_minus[0] * u1).min(qp.g_plus[0] * u1);
        let (l, u) = slice_interval(qp.g_minus[1], qp.g_plus[1], c)?;
        let u2 = d[1].clamp(l, u);
        Some(((u1 - d[0]).powi(2) + (u2 - d[1]).powi(2), u2))
    };
    let scan = |from: f64, to: f64, count: usize| -> Option<(f64, f64, f64)> {
        let h = (to - from) / count as f64;
        let mut best: Option<(f64, f64, f64)> = None;
        for k in 0..=count {
            let u1 = from + k as f64 * h;
            if let Some((cost, u2)) = reduced(u1) {
                if best.map_or(true, |(_, _, c)| cost < c) {
                    best = Some((u1, u2, cost));
                }
            }
        }
        best
    };
    let mut count = 2000;
    let mut h = (hi - lo) / count as f64;
    let (mut u1, mut u2, _) = scan(lo, hi, count).ok_or(QpError::EmptyGrid { lo, hi })?;
    count = 40;
    while h > step {
        let from = (u1 - 2.0 * h).max(lo);
        let to = (u1 + 2.0 * h).min(hi);
        h = (to - from) / count as f64;
        if let Some((a, b, _)) = scan(from, to, count) {
            u1 = a;
            u2 = b;
        }
    }
    Ok(vec![u1, u2])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(f: f64, lo: f64, hi: f64, d: f64) -> SafetyQP {
        SafetyQP { desired: vec![d], f, g_minus: vec![lo], g_plus: vec![hi] }
    }

    #[test]
    fn standard_form_m1() {
        let sf = build_standard_form(&scalar(0.0, 1.0, 1.0, 0.0));
        assert_eq!(sf.a.to_rows(), vec![vec![1.0, -1.0], vec![1.0, -1.0], vec![0.0, 1.0]]);
        assert_eq!(sf.b, vec![0.0, 0.0, 0.0]);
        assert_eq!(sf.h.to_rows(), vec![vec![1.0, 0.0], vec![0.0, 0.0]]);
    }

    #[test]
    fn standard_form_flip_negates_u_column() {
        let qp = scalar(0.3, 1.0, 2.0, 0.4);
        let flipped = SafetyQP { desired: vec![-0.4], f: 0.3, g_minus: vec![-1.0], g_plus: vec![-2.0] };
        let a = build_standard_form(&qp);
        let b = build_standard_form(&flipped);
        for r in 0..3 {
            assert_eq!(a.a[(r, 0)], -b.a[(r, 0)]);
            assert_eq!(a.a[(r, 1)], b.a[(r, 1)]);
        }
        assert_eq!(a.c[0], -b.c[0]);
    }

    #[test]
    fn standard_form_m2_shape() {
        let qp = SafetyQP { desired: vec![0.0, 0.0], f: 1.0, g_minus: vec![1.0, -2.0], g_plus: vec![2.0, -1.0] };
        let sf = build_standard_form(&qp);
        assert_eq!((sf.a.rows(), sf.a.cols()), (5, 4));
        assert_eq!(sf.b.len(), 5);
    }

    #[test]
    fn feasible_desired_is_returned() {
        let sol = solve_safety_qp(&scalar(1.0, 1.0, 1.0, 0.0)).unwrap();
        assert_eq!(sol.u, vec![0.0]);
        assert_eq!(sol.status, QpStatus::Optimal);
    }

    #[test]
    fn positive_channel_example() {
        let sol = solve_safety_qp(&scalar(-1.0, 1.0, 2.0, 0.0)).unwrap();
        assert_eq!(sol.status, QpStatus::Optimal);
        assert!((sol.u[0] - 1.0).abs() < 1e-12);
        assert!(sol.kkt_residual <= KKT_TOL);
    }

    #[test]
    fn negative_channel_example() {
        let sol = solve_safety_qp(&scalar(-1.0, -2.0, -1.0, 0.5)).unwrap();
        assert_eq!(sol.status, QpStatus::Optimal);
        assert!((sol.u[0] + 1.0).abs() < 1e-12, "{:?}", sol);
        assert!(sol.kkt_residual <= KKT_TOL);
    }

    #[test]
    fn zero_channel_infeasible() {
        let sol = solve_safety_qp(&scalar(-1.0, 0.0, 0.0, 0.5)).unwrap();
        assert_eq!(sol.status, QpStatus::Infeasible);
        let sol = solve_safety_qp(&scalar(1.0, 0.0, 0.0, 0.5)).unwrap();
        assert_eq!(sol.status, QpStatus::Optimal);
    }

    #[test]
    fn malformed_rejected() {
        assert!(solve_safety_qp(&scalar(-1.0, -1.0, 1.0, 0.0)).is_err());
        assert!(solve_safety_qp(&scalar(-1.0, 2.0, 1.0, 0.0)).is_err());
        assert!(solve_safety_qp(&scalar(f64::NAN, 1.0, 1.0, 0.0)).is_err());
    }

    #[test]
    fn kink_solution_has_zero_input() {
        // Desired sits on the wrong side; optimum is the kink u = 0 only if F = 0.
        let sol = solve_safety_qp(&scalar(0.0, 1.0, 3.0, -2.0)).unwrap();
        assert!(sol.u[0].abs() < 1e-12);
        assert!(sol.kkt_residual <= KKT_TOL, "{sol:?}");
    }

    #[test]
    fn two_channel_mixed_signs() {
        let qp = SafetyQP { desired: vec![0.5, 0.5], f: -2.0, g_minus: vec![1.0, -2.0], g_plus: vec![2.0, -1.0] };
        let sol = solve_safety_qp(&qp).unwrap();
        assert_eq!(sol.status, QpStatus::Optimal);
        assert!(qp.constraint_value(&sol.u) >= -SLACK_TOL);
        assert!(sol.kkt_residual <= KKT_TOL, "{sol:?}");
    }

    #[test]
    fn oracle_matches_examples() {
        let u = scalar_oracle(&scalar(-1.0, 1.0, 2.0, 0.0), -5.0, 5.0, 1e-4).unwrap();
        assert!((u - 1.0).abs() <= 2e-4);
        let u = scalar_oracle(&scalar(-1.0, -2.0, -1.0, 0.5), -5.0, 5.0, 1e-4).unwrap();
        assert!((u + 1.0).abs() <= 2e-4);
        let u = scalar_oracle(&scalar(5.0, 1.0, 1.0, 0.25), -5.0, 5.0, 1e-4).unwrap();
        assert!((u - 0.25).abs() <= 2e-4);
        assert!(scalar_oracle(&scalar(-100.0, 1.0, 1.0, 0.0), -5.0, 5.0, 1e-4).is_err());
    }

    #[test]
    fn plane_oracle_examples() {
        // u₁ + u₂ ≥ 1 from the origin
        let qp = SafetyQP { desired: vec![0.0, 0.0], f: -1.0, g_minus: vec![1.0, 1.0], g_plus: vec![1.0, 1.0] };
        let u = plane_oracle(&qp, -5.0, 5.0, 1e-7).unwrap();
        assert!((u[0] - 0.5).abs() <= 1e-6 && (u[1] - 0.5).abs() <= 1e-6, "{u:?}");
        // feasible desired point is returned
        let qp = SafetyQP { desired: vec![1.0, -0.5], f: 2.0, g_minus: vec![1.0, -2.0], g_plus: vec![2.0, -1.0] };
        let u = plane_oracle(&qp, -5.0, 5.0, 1e-7).unwrap();
        assert!((u[0] - 1.0).abs() <= 1e-6 && (u[1] + 0.5).abs() <= 1e-6, "{u:?}");
        assert_eq!(slice_interval(1.0, 2.0, -1.0), Some((1.0, f64::INFINITY)));
        assert_eq!(slice_interval(-2.0, -1.0, -1.0), Some((f64::NEG_INFINITY, -1.0)));
        assert_eq!(slice_interval(-2.0, -1.0, 2.0), Some((f64::NEG_INFINITY, 1.0)));
        assert_eq!(slice_interval(1.0, 2.0, 2.0), Some((-1.0, f64::INFINITY)));
        assert_eq!(slice_interval(0.0, 0.0, -1.0), None);
    }
}
