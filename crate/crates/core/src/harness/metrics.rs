//! Summary statistics of a trajectory log.

use serde::{Deserialize, Serialize};

use super::log::TrajectoryLog;
use crate::numerics::norm;
use crate::plant::{BenchmarkId, OBSTACLE_CENTER, OBSTACLE_RADIUS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub records: usize,
    pub final_t: f64,
    pub min_h_x: f64,
    pub min_h_xhat: f64,
    /// `min_t (‖x − z‖ − r)` on the obstacle benchmark.
    pub min_obstacle_clearance: Option<f64>,
    pub final_xtilde_norm: f64,
    /// Largest `‖x̃‖` over the second half of the run.
    pub max_xtilde_second_half: f64,
    pub max_xtilde_norm: f64,
    pub final_x_norm: f64,
    pub wc_sup: f64,
    pub wa_sup: f64,
    /// Largest Frobenius norm of the outer-layer weights.
    pub theta_sup: f64,
    pub max_omega_rho: f64,
    pub min_rank: f64,
    pub min_stack_eig: f64,
    pub gamma_eig_min: f64,
    pub gamma_eig_max: f64,
    /// `‖x̃‖ ≤ ε` at every step.
    pub hypothesis_held: bool,
    pub qp_infeasible_steps: usize,
    pub qp_degenerate_steps: usize,
    pub saturated_steps: usize,
    pub gamma_clamps: usize,
    pub purges: usize,
}

fn sup_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |a: f64, b| a.max(b.abs()))
}

/// Largest `‖x̃(t)‖` over records with `t ≥ from`; 0 when none qualify.
pub fn max_xtilde_after(log: &TrajectoryLog, from: f64) -> f64 {
    log.records.iter().filter(|r| r.t >= from - 1e-12).map(|r| r.xtilde_norm()).fold(0.0, f64::max)
}

pub fn obstacle_clearance(x: &[f64]) -> f64 {
    let d = [x[0] - OBSTACLE_CENTER[0], x[1] - OBSTACLE_CENTER[1]];
    norm(&d) - OBSTACLE_RADIUS
}

/// Panics on an empty log.
pub fn metrics(log: &TrajectoryLog) -> Metrics {
    let first = log.records.first().expect("metrics need at least one record");
    let last = log.records.last().expect("non-empty");
    let half = 0.5 * (first.t + last.t);
    let fold_min = |f: &dyn Fn(&super::log::StepRecord) -> f64| log.records.iter().map(f).fold(f64::INFINITY, f64::min);
    let fold_max = |f: &dyn Fn(&super::log::StepRecord) -> f64| log.records.iter().map(f).fold(f64::NEG_INFINITY, f64::max);
    Metrics {
        records: log.records.len(),
        final_t: last.t,
        min_h_x: fold_min(&|r| r.h_x),
        min_h_xhat: fold_min(&|r| r.h_xhat),
        min_obstacle_clearance: (log.benchmark == BenchmarkId::Obstacle).then(|| fold_min(&|r| obstacle_clearance(&r.x))),
        final_xtilde_norm: last.xtilde_norm(),
        max_xtilde_second_half: max_xtilde_after(log, half),
        max_xtilde_norm: fold_max(&|r| r.xtilde_norm()),
        final_x_norm: norm(&last.x),
        wc_sup: fold_max(&|r| sup_norm(&r.wc)),
        wa_sup: fold_max(&|r| sup_norm(&r.wa)),
        theta_sup: fold_max(&|r| norm(&r.theta)),
        max_omega_rho: fold_max(&|r| r.omega_rho_max),
        min_rank: fold_min(&|r| r.rank_min),
        min_stack_eig: fold_min(&|r| r.stack_min_eig),
        gamma_eig_min: fold_min(&|r| r.gamma_eig_min),
        gamma_eig_max: fold_max(&|r| r.gamma_eig_max),
        hypothesis_held: log.records.iter().all(|r| r.hyp_ok),
        qp_infeasible_steps: log.records.iter().filter(|r| r.qp_status == "infeasible").count(),
        qp_degenerate_steps: log.records.iter().filter(|r| r.qp_status == "degenerate").count(),
        saturated_steps: log.records.iter().filter(|r| r.saturated).count(),
        gamma_clamps: log.records.iter().filter(|r| r.gamma_clamped).count(),
        purges: log.records.iter().filter(|r| r.stack_event.contains("purge")).count(),
    }
}
