use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use safeaoc_core::numerics::{place_observer_gain, rk4_step, solve_lyapunov, sym_eig_min, Matrix};

fn to_na(m: &Matrix) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows(), m.cols(), m.as_slice())
}

fn sym(n: usize, entries: &[f64]) -> Matrix {
    let mut m = Matrix::zeros(n, n);
    let mut k = 0;
    for i in 0..n {
        for j in i..n {
            m[(i, j)] = entries[k];
            m[(j, i)] = entries[k];
            k += 1;
        }
    }
    m
}

/// Stable matrix `−(BᵀB + I) + (C − Cᵀ)`.
fn hurwitz(n: usize, b: &[f64], c: &[f64]) -> Matrix {
    let bm = Matrix::from_row_slice(n, n, b).unwrap();
    let cm = Matrix::from_row_slice(n, n, c).unwrap();
    let spd = bm.transpose().matmul(&bm).add(&Matrix::identity(n));
    spd.scale(-1.0).add(&cm.sub(&cm.transpose()))
}

/// Independent Lyapunov oracle: `(I⊗Aᵀ + Aᵀ⊗I) vec P = −vec S` through nalgebra's LU.
fn lyapunov_oracle(a: &Matrix, s: &Matrix) -> DMatrix<f64> {
    let n = a.rows();
    let at = to_na(a).transpose();
    let eye = DMatrix::<f64>::identity(n, n);
    let k = eye.kronecker(&at) + at.kronecker(&eye);
    let rhs = -DVector::from_column_slice(to_na(s).as_slice());
    let v = k.lu().solve(&rhs).expect("nonsingular for stable A");
    DMatrix::from_column_slice(n, n, v.as_slice())
}

proptest! {
    #[test]
    fn rk4_matches_exponential(z in -0.5f64..0.5, x0 in -10.0f64..10.0) {
        let dt = 1e-2;
        let lambda = z / dt;
        let x = rk4_step(|x, _| vec![lambda * x[0]], &[x0], 0.0, dt).unwrap();
        let exact = x0 * z.exp();
        let rel = (x[0] - exact).abs() / exact.abs().max(1e-300);
        // one step is the degree-4 Taylor polynomial of e^z; the tail is at
        // most |z|⁵/120·e^{|z|}, and dividing by e^z costs another e^{|z|}
        let bound = z.abs().powi(5) / 120.0 * (2.0 * z.abs()).exp();
        prop_assert!(rel <= bound + 1e-15);
        if z.abs() <= 0.1 {
            prop_assert!(rel <= 1e-6);
        }
    }

    #[test]
    fn eig_min_permutation_invariant_and_shift_equivariant(
        entries in prop::collection::vec(-5.0f64..5.0, 10),
        shift in -3.0f64..3.0,
    ) {
        let m = sym(4, &entries);
        let base = sym_eig_min(&m).unwrap();
        let perm = [2usize, 0, 3, 1];
        let mut pm = Matrix::zeros(4, 4);
        for i in 0..4 {
            for j in 0..4 {
                pm[(i, j)] = m[(perm[i], perm[j])];
            }
        }
        prop_assert!((sym_eig_min(&pm).unwrap() - base).abs() <= 1e-9);
        let shifted = m.add(&Matrix::identity(4).scale(shift));
        prop_assert!((sym_eig_min(&shifted).unwrap() - (base + shift)).abs() <= 1e-9);
        let oracle = to_na(&m).symmetric_eigen().eigenvalues.min();
        prop_assert!((base - oracle).abs() <= 1e-9);
    }

    #[test]
    fn lyapunov_agrees_with_kronecker_oracle(
        b in prop::collection::vec(-1.0f64..1.0, 9),
        c in prop::collection::vec(-2.0f64..2.0, 9),
        s_entries in prop::collection::vec(-0.5f64..0.5, 6),
        probes in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 3), 100),
    ) {
        let a = hurwitz(3, &b, &c);
        let s = sym(3, &s_entries).add(&Matrix::identity(3).scale(2.0));
        let p = solve_lyapunov(&a, &s).unwrap();
        let oracle = lyapunov_oracle(&a, &s);
        prop_assert!((to_na(&p) - &oracle).amax() <= 1e-9 * oracle.amax().max(1.0));
        let resid = a.transpose().matmul(&p).add(&p.matmul(&a)).add(&s);
        prop_assert!(resid.frobenius_norm() <= 1e-9 * s.frobenius_norm());
        for x in probes.iter().filter(|x| x.iter().any(|v| v.abs() > 1e-3)) {
            prop_assert!(p.matvec(x).iter().zip(x).map(|(a, b)| a * b).sum::<f64>() > 0.0);
        }
    }

    #[test]
    fn placed_poles_are_reproduced(
        a_entries in prop::collection::vec(-3.0f64..3.0, 4),
        p1 in -8.0f64..-0.5,
        gap in 0.5f64..4.0,
    ) {
        let a = Matrix::from_row_slice(2, 2, &a_entries).unwrap();
        let c = Matrix::row(&[1.0, 0.0]);
        // observability of (A, C) needs a₁₂ away from zero
        prop_assume!(a_entries[1].abs() > 0.1);
        let poles = [p1, p1 - gap];
        let k = place_observer_gain(&a, &c, &poles).unwrap();
        let acl = to_na(&a.sub(&k.matmul(&c)));
        let mut eig: Vec<f64> = acl.complex_eigenvalues().iter().map(|z| {
            assert!(z.im.abs() <= 1e-8);
            z.re
        }).collect();
        eig.sort_by(|x, y| y.partial_cmp(x).unwrap());
        prop_assert!((eig[0] - poles[0]).abs() <= 1e-8 * poles[0].abs().max(1.0));
        prop_assert!((eig[1] - poles[1]).abs() <= 1e-8 * poles[1].abs().max(1.0));
    }
}
