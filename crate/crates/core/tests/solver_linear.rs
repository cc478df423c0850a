use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector};
use vio_core::factors::{ResidualBlock, VarId};
use vio_core::solver::{levenberg_marquardt, marginalize, LinearFactor, LinearProblem, LmConfig};

fn scalar(a: f64) -> DMatrix<f64> {
    DMatrix::from_element(1, 1, a)
}

fn unary(v: VarId, z: f64, sigma: f64) -> LinearFactor {
    LinearFactor {
        terms: vec![(v, scalar(1.0))],
        z: DVector::from_element(1, z),
        sqrt_information: scalar(1.0 / sigma),
    }
}

fn walk(a: VarId, b: VarId, sigma: f64) -> LinearFactor {
    LinearFactor {
        terms: vec![(a, scalar(-1.0)), (b, scalar(1.0))],
        z: DVector::zeros(1),
        sqrt_information: scalar(1.0 / sigma),
    }
}

/// Offsets with noisy unary measurements tied by a random walk.
fn offset_chain(n: usize) -> LinearProblem {
    let mut p = LinearProblem::new();
    for i in 0..n {
        p.add_variable(VarId::Offset(i), DVector::zeros(1)).unwrap();
    }
    for i in 0..n {
        let z = 0.03 + 0.004 * ((i * 7 % 5) as f64 - 2.0);
        p.add_factor(unary(VarId::Offset(i), z, 0.005 * (1.0 + i as f64 * 0.3))).unwrap();
    }
    for i in 0..n - 1 {
        p.add_factor(walk(VarId::Offset(i), VarId::Offset(i + 1), 0.002)).unwrap();
    }
    p
}

fn closed_form(p: &LinearProblem) -> Vec<f64> {
    let n = p.values.len();
    let rows: usize = p.factors.iter().map(|f| f.z.len()).sum();
    let mut a = DMatrix::zeros(rows, n);
    let mut z = DVector::zeros(rows);
    let mut r = 0;
    for f in &p.factors {
        for (v, m) in &f.terms {
            let VarId::Offset(i) = v else { unreachable!() };
            for k in 0..f.z.len() {
                let s = f.sqrt_information[(k, k)];
                a[(r + k, *i)] += s * m[(k, 0)];
            }
        }
        for k in 0..f.z.len() {
            z[r + k] = f.sqrt_information[(k, k)] * f.z[k];
        }
        r += f.z.len();
    }
    let h: DMatrix<f64> = a.transpose() * &a;
    let rhs: DVector<f64> = a.transpose() * z;
    h.cholesky().unwrap().solve(&rhs).iter().copied().collect()
}

#[test]
fn lm_matches_closed_form_weighted_least_squares() {
    let mut p = offset_chain(6);
    let expect = closed_form(&p);
    let config = LmConfig {
        max_iterations: 30,
        convergence_tol_dx: 1e-14,
        convergence_tol_cost: 0.0,
        convergence_abs_cost: 0.0,
        ..LmConfig::default()
    };
    let report = levenberg_marquardt(&mut p, &config).unwrap();
    for (i, e) in expect.iter().enumerate() {
        assert!((p.values[&VarId::Offset(i)][0] - e).abs() < 1e-10);
    }
    let accepted: Vec<f64> = report.iterations.iter().filter(|r| r.accepted).map(|r| r.cost).collect();
    assert!(accepted.windows(2).all(|w| w[1] <= w[0]));
    assert!(report.final_cost <= report.initial_cost);
}

#[test]
fn converged_problem_finishes_in_one_iteration() {
    let mut p = offset_chain(4);
    p.solve_dense().unwrap();
    let report = levenberg_marquardt(&mut p, &LmConfig::default()).unwrap();
    assert_eq!(report.iteration_count(), 1);
    assert!(report.converged);
    assert!(report.final_dx_norm < 1e-6);
}

#[test]
fn chain_marginal_matches_full_problem() {
    let (a, b, c) = (VarId::Offset(0), VarId::Offset(1), VarId::Offset(2));
    let mut p = LinearProblem::new();
    for v in [a, b, c] {
        p.add_variable(v, DVector::zeros(1)).unwrap();
    }
    p.add_factor(unary(a, 1.0, 0.5)).unwrap();
    p.add_factor(unary(b, 2.5, 1.0)).unwrap();
    p.add_factor(unary(c, -0.5, 2.0)).unwrap();
    p.add_factor(walk(a, b, 0.3)).unwrap();
    p.add_factor(walk(b, c, 0.7)).unwrap();
    let mut full = p.clone();
    full.solve_dense().unwrap();
    p.marginalize(&BTreeSet::from([b])).unwrap();
    assert_eq!(p.priors.len(), 1);
    assert_eq!(p.priors[0].vars, vec![a, c]);
    p.solve_dense().unwrap();
    for v in [a, c] {
        assert!((p.values[&v][0] - full.values[&v][0]).abs() < 1e-10);
    }
}

#[test]
fn unconnected_variable_gives_empty_prior() {
    let out = marginalize(&Vec::<ResidualBlock>::new(), &BTreeSet::from([VarId::Offset(3)]), |_| None).unwrap();
    assert!(out.prior.is_empty());
    assert!(!out.regularized);
}

#[test]
fn random_graphs_marginalize_consistently() {
    let worst = vio_core::diagnostics::marginalization_oracle(17, 100).unwrap();
    assert!(worst < 1e-9, "worst {worst}");
}
