use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use safeaoc_core::critic::{bellman_error, extrapolation_grid, BasisSpec, Critic, CriticGains, CriticState};
use safeaoc_core::numerics::{norm, sym_eig_range, Matrix};
use safeaoc_core::plant::{benchmark_system, BenchmarkId, CostSpec, PlantModel};

fn gains() -> CriticGains {
    CriticGains {
        kc: 5.0,
        ka1: 0.5,
        ka2: 0.1,
        nu: 0.7,
        beta: 0.01,
        w_bar: 10.0,
        kappa_p: 0.1,
        gamma_max: 1e4,
        gamma_min: 1e-6,
    }
}

/// Kleinman iteration on `AᵀP + PA − PBR⁻¹BᵀP + Q = 0`, each Lyapunov step
/// solved through nalgebra's Kronecker LU.
fn riccati(a: &DMatrix<f64>, b: &DMatrix<f64>, q: &DMatrix<f64>, r: f64) -> DMatrix<f64> {
    let n = a.nrows();
    let eye = DMatrix::<f64>::identity(n, n);
    let mut k = DMatrix::<f64>::zeros(1, n);
    let mut p = DMatrix::<f64>::zeros(n, n);
    for _ in 0..50 {
        let acl = a - b * &k;
        let rhs = -(q + k.transpose() * &k * r);
        let at = acl.transpose();
        let sys = eye.kronecker(&at) + at.kronecker(&eye);
        let v = sys.lu().solve(&DVector::from_column_slice(rhs.as_slice())).unwrap();
        p = DMatrix::from_column_slice(n, n, v.as_slice());
        k = b.transpose() * &p / r;
    }
    p
}

proptest! {
    #[test]
    fn normalized_regressor_is_bounded(
        x in prop::collection::vec(-3.0f64..3.0, 2),
        wc in prop::collection::vec(-10.0f64..10.0, 3),
        wa in prop::collection::vec(-10.0f64..10.0, 3),
        nu in 0.05f64..2.0,
    ) {
        for id in [BenchmarkId::ConvexSet, BenchmarkId::Obstacle] {
            let (plant, _, cost) = benchmark_system(id);
            let e = bellman_error(&BasisSpec::quadratic2(), &plant, &|x| plant.drift(x), &cost, &wc, &wa, &x, nu);
            prop_assert!(norm(&e.omega) / e.rho <= 1.0 / (2.0 * nu.sqrt()) + 1e-12);
        }
    }

    #[test]
    fn basis_jacobian_matches_differences(x in prop::collection::vec(-3.0f64..3.0, 2)) {
        let basis = BasisSpec::quadratic2();
        let jac = basis.jac(&x);
        let h = 1e-6;
        for j in 0..2 {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[j] += h;
            xm[j] -= h;
            let (sp, sm) = (basis.sigma(&xp), basis.sigma(&xm));
            for i in 0..3 {
                let fd = (sp[i] - sm[i]) / (2.0 * h);
                prop_assert!((fd - jac[(i, j)]).abs() <= 1e-5 * jac[(i, j)].abs().max(1.0));
            }
        }
    }
}

#[test]
fn learning_keeps_gamma_spd_and_actor_in_ball() {
    for id in [BenchmarkId::ConvexSet, BenchmarkId::Obstacle] {
        let (plant, _, cost) = benchmark_system(id);
        let critic = Critic::new(BasisSpec::quadratic2(), gains(), extrapolation_grid(10, 1.0), &plant, &cost).unwrap();
        // start at the projection radius so the band is exercised
        let mut state = CriticState { wc: vec![8.0, -5.0, 3.0], wa: vec![-6.0, 7.0, 3.5], gamma: Matrix::identity(3) };
        let bound = critic.gains.w_bar * (1.0 + critic.gains.kappa_p);
        for _ in 0..5000 {
            state = critic.update_step(&state, &|x| plant.drift(x), &cost, 1e-3).unwrap();
            let (lo, _) = sym_eig_range(&state.gamma).unwrap();
            assert!(lo > 0.0, "{id:?}: Γ lost definiteness");
            assert!(state.gamma.asymmetry() <= 1e-12);
            assert!(norm(&state.wa) <= bound, "{id:?}: ‖Ŵa‖ = {}", norm(&state.wa));
        }
    }
}

#[test]
fn lq_weights_approach_riccati_solution() {
    let a = Matrix::from_rows(&[vec![0.0, 1.0], vec![-2.0, -3.0]]).unwrap();
    let b = Matrix::column(&[0.0, 1.0]);
    let plant = PlantModel::linear(a.clone(), b.clone(), Matrix::row(&[1.0, 0.0]));
    let cost = CostSpec::new(Matrix::identity(2), Matrix::identity(1)).unwrap();
    let p = riccati(
        &DMatrix::from_row_slice(2, 2, a.as_slice()),
        &DMatrix::from_row_slice(2, 1, b.as_slice()),
        &DMatrix::identity(2, 2),
        1.0,
    );
    let target = [p[(0, 0)], 2.0 * p[(0, 1)], p[(1, 1)]];
    let critic = Critic::new(BasisSpec::quadratic2(), gains(), extrapolation_grid(10, 1.0), &plant, &cost).unwrap();
    let mut state = CriticState { wc: vec![1.0; 3], wa: vec![1.0; 3], gamma: Matrix::identity(3).scale(0.5) };
    for _ in 0..20_000 {
        state = critic.update_step(&state, &|x| plant.drift(x), &cost, 1e-3).unwrap();
    }
    for i in 0..3 {
        let rel = (state.wc[i] - target[i]).abs() / target[i].abs();
        assert!(rel <= 0.05, "Ŵc[{i}] = {} vs {} ({rel:.3})", state.wc[i], target[i]);
    }
}
