//! Advisory check of the sufficient gain conditions for ultimate
//! boundedness. Never gates a run.

use serde::{Deserialize, Serialize};

use crate::numerics::{sym_eig_range, Matrix};

/// Bound and Lipschitz constants, usually estimated from a run. Zero means
/// "negligible"; `None` on the last two leaves the bound condition
/// unevaluated.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GainEstimates {
    /// Bound on the outer-layer weights.
    pub theta_bar: f64,
    /// Bound on the feature Jacobian.
    pub grad_phi_bar: f64,
    /// Lipschitz constant of the inner network.
    pub lip_inner: f64,
    /// Lipschitz constant of `x ↦ g R⁻¹ gᵀ ∇σᵀ`.
    pub lip_g_r_sigma: f64,
    /// Bound on the ideal value weights.
    pub w_bar: f64,
    /// Bound on the ideal-policy approximation error.
    pub eps_pi: f64,
    pub lip_g: f64,
    pub g_bar: f64,
    pub grad_sigma_bar: f64,
    /// Bound on the features.
    pub phi_bar: f64,
    /// Lower bound on `λ_min` of the active stack Gram matrix.
    pub sigma_theta_min: f64,
    /// Lower bound on the extrapolation rank monitor.
    pub c1_min: f64,
    /// Bound on `∇σ g R⁻¹ gᵀ ∇σᵀ` over the extrapolation points.
    pub g_sigma_bar: f64,
    pub gamma_lower: f64,
    pub gamma_upper: f64,
    /// Residual constant of the bound on the Lyapunov derivative.
    pub iota: Option<f64>,
    /// Largest admissible initial norm, `ῡ⁻¹(υ̲(χ))`.
    pub admissible_radius: Option<f64>,
}

/// Gains and matrices entering the conditions.
#[derive(Debug, Clone, PartialEq)]
pub struct GainInputs {
    pub s: Matrix,
    pub p: Matrix,
    pub q: Matrix,
    pub r: Matrix,
    pub k_theta: f64,
    pub kc: f64,
    pub ka1: f64,
    pub ka2: f64,
    pub nu: f64,
    pub beta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionCheck {
    pub lhs: f64,
    pub rhs: f64,
    /// `None` when an input is unknown.
    pub satisfied: Option<bool>,
}

impl ConditionCheck {
    fn at_least(lhs: f64, rhs: f64) -> Self {
        Self { lhs, rhs, satisfied: Some(lhs >= rhs) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GainReport {
    /// `λ_min(S) ≥ 5ℓ₇`
    pub observer_gain: ConditionCheck,
    /// `k_θ ≥ 15ℓ₁₀² / (4 σ̲_θ λ_min(S))`
    pub icl_gain: ConditionCheck,
    /// `k_a1 + k_a2 ≥ 9ℓ₅²/(4 k_c c̲) + 15ℓ₁₁²/(4 λ_min(S)) + 3ℓ₃`
    pub actor_gain: ConditionCheck,
    /// `μ⁻¹(ι) ≤ ῡ⁻¹(υ̲(χ))` with a quadratic `μ`.
    pub ultimate_bound: ConditionCheck,
    /// `λ_min(S) > 3ℓ₇`
    pub observer_margin: ConditionCheck,
    pub ell: Vec<(String, f64)>,
}

impl GainReport {
    pub fn all_satisfied(&self) -> Option<bool> {
        let mut all = true;
        for c in [&self.observer_gain, &self.icl_gain, &self.actor_gain, &self.ultimate_bound, &self.observer_margin] {
            all &= c.satisfied?;
        }
        Some(all)
    }
}

fn ratio(num: f64, den: f64) -> f64 {
    if num == 0.0 {
        0.0
    } else if den <= 0.0 {
        f64::INFINITY
    } else {
        num / den
    }
}

pub fn gain_diagnostics(inputs: &GainInputs, est: &GainEstimates) -> GainReport {
    let eig = |m: &Matrix| sym_eig_range(&m.symmetrize()).unwrap_or((f64::NAN, f64::NAN));
    let (s_min, _) = eig(&inputs.s);
    let (_, p_max) = eig(&inputs.p);
    let (q_min, _) = eig(&inputs.q);
    let (_, r_max) = eig(&inputs.r);

    let v1 = est.theta_bar * est.grad_phi_bar * est.lip_inner + 0.5 * est.lip_g_r_sigma * est.w_bar + est.eps_pi * est.lip_g;
    let v2 = ratio(est.g_bar * est.g_bar * est.grad_sigma_bar, r_max);
    let l3 = ratio(inputs.kc * est.g_sigma_bar * est.w_bar, 8.0 * (inputs.nu * est.gamma_lower).sqrt());
    let l5 = l3 + inputs.ka1;
    let l7 = 2.0 * p_max * v1;
    let l10 = 2.0 * p_max * est.phi_bar;
    let l11 = 2.0 * p_max * v2;
    let c_low = ratio(inputs.beta, 2.0 * est.gamma_upper * inputs.kc) + 0.5 * est.c1_min;

    let observer_gain = ConditionCheck::at_least(s_min, 5.0 * l7);
    let icl_gain = ConditionCheck::at_least(inputs.k_theta, ratio(15.0 * l10 * l10, 4.0 * est.sigma_theta_min * s_min));
    let actor_rhs = ratio(9.0 * l5 * l5, 4.0 * inputs.kc * c_low) + ratio(15.0 * l11 * l11, 4.0 * s_min) + 3.0 * l3;
    let actor_gain = ConditionCheck::at_least(inputs.ka1 + inputs.ka2, actor_rhs);
    let mu0 = [
        0.5 * q_min,
        s_min / 10.0,
        inputs.k_theta * est.sigma_theta_min / 6.0,
        inputs.kc * c_low / 6.0,
        (inputs.ka1 + inputs.ka2) / 6.0,
    ]
    .into_iter()
    .fold(f64::INFINITY, f64::min);
    let ultimate_bound = match (est.iota, est.admissible_radius) {
        (Some(iota), Some(radius)) => ConditionCheck::at_least(radius, ratio(iota, mu0).sqrt()),
        (iota, radius) => ConditionCheck {
            lhs: radius.unwrap_or(f64::NAN),
            rhs: iota.map_or(f64::NAN, |i| ratio(i, mu0).sqrt()),
            satisfied: None,
        },
    };
    let observer_margin = ConditionCheck { lhs: s_min, rhs: 3.0 * l7, satisfied: Some(s_min > 3.0 * l7) };
    GainReport {
        observer_gain,
        icl_gain,
        actor_gain,
        ultimate_bound,
        observer_margin,
        ell: vec![
            ("l3".into(), l3),
            ("l5".into(), l5),
            ("l7".into(), l7),
            ("l10".into(), l10),
            ("l11".into(), l11),
            ("c_low".into(), c_low),
            ("mu0".into(), mu0),
        ],
    }
}
