#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use schwarz_core::ltv_model::{LqProblem, MatrixFunction};
use schwarz_core::ode::{IntegratorConfig, TimeGrid, Trajectory};
use schwarz_core::pmp::{backward_adjoint, forward_state, functional_gradient, objective_value, SubproblemSpec};

pub fn normal_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| { let z: f64 = StandardNormal.sample(rng); scale * z })
}

pub fn normal_vector(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| -> f64 { StandardNormal.sample(rng) })
}

pub fn normal_control(rng: &mut ChaCha8Rng, grid: &TimeGrid<f64>, nu: usize) -> Trajectory<f64> {
    Trajectory::new(grid.clone(), (0..grid.len()).map(|_| normal_vector(rng, nu)).collect()).unwrap()
}

/// Random classic problem with `n` states and `m` controls; `A` may be time varying.
pub fn random_problem(rng: &mut ChaCha8Rng, n: usize, m: usize, horizon: f64) -> LqProblem<f64> {
    let a0 = normal_matrix(rng, n, n, 0.7);
    let a1 = normal_matrix(rng, n, n, 0.3);
    let b = normal_matrix(rng, n, m, 1.0);
    let mq = normal_matrix(rng, n, n, 0.5);
    let q = &mq * mq.transpose() + DMatrix::identity(n, n) * 0.5;
    let h = normal_matrix(rng, m, n, 0.1);
    let mr = normal_matrix(rng, m, m, 0.3);
    let r = &mr * mr.transpose() + DMatrix::identity(m, m);
    let mt = normal_matrix(rng, n, n, 0.5);
    let qt = &mt * mt.transpose() + DMatrix::identity(n, n) * 0.1;
    let x0 = normal_vector(rng, n);
    let freq: f64 = rng.gen_range(0.5..2.0);
    LqProblem::classic(
        horizon,
        MatrixFunction::from_fn(n, n, move |t: f64| &a0 + &a1 * (freq * t).sin()),
        MatrixFunction::constant(b),
        MatrixFunction::constant(q),
        MatrixFunction::constant(h),
        MatrixFunction::constant(r),
        qt,
        x0,
    )
    .unwrap()
}

/// Trapezoid weights of a grid.
pub fn trapezoid_weights(grid: &TimeGrid<f64>) -> Vec<f64> {
    let t = grid.nodes();
    let mut w = vec![0.0; t.len()];
    for i in 1..t.len() {
        let h = t[i] - t[i - 1];
        w[i - 1] += 0.5 * h;
        w[i] += 0.5 * h;
    }
    w
}

/// `∫ v φ_i` for the piecewise linear interpolant of `v` against hat `φ_i`.
pub fn mass_apply(grid: &TimeGrid<f64>, v: &[DVector<f64>]) -> Vec<DVector<f64>> {
    let t = grid.nodes();
    let mut out: Vec<DVector<f64>> = v.iter().map(|x| x * 0.0).collect();
    for i in 1..t.len() {
        let h = t[i] - t[i - 1];
        out[i - 1] += (&v[i - 1] * 2.0 + &v[i]) * (h / 6.0);
        out[i] += (&v[i - 1] + &v[i] * 2.0) * (h / 6.0);
    }
    out
}

/// Relative sup-norm gap between central finite differences of the
/// discretized objective and the functional gradient mapped to nodal
/// derivatives.
///
/// The objective weights `u` with the trapezoid rule while `u` reaches the
/// state through its piecewise linear interpolant, so the explicit terms
/// `Hx + Ru` map through the lumped weights and `Bᵀλ` through the P1 mass
/// matrix.
pub fn gradient_fd_gap(spec: &SubproblemSpec<f64>, u: &Trajectory<f64>, cfg: &IntegratorConfig<f64>) -> f64 {
    let grid = u.grid().clone();
    let p = spec.problem();
    let g = functional_gradient(spec, u, cfg).unwrap();
    let x = forward_state(spec, u, cfg).unwrap();
    let lam = backward_adjoint(spec, &x, u, cfg).unwrap();
    let nodes = grid.nodes();
    let explicit: Vec<DVector<f64>> = (0..grid.len())
        .map(|i| {
            let t = nodes[i];
            &*p.h.eval(t) * &x.values()[i] + &*p.r.eval(t) * &u.values()[i] + p.w.eval(t).transpose() * p.d_at(t)
        })
        .collect();
    let btl: Vec<DVector<f64>> = (0..grid.len()).map(|i| p.b.eval(nodes[i]).transpose() * &lam.values()[i]).collect();
    // the explicit part plus Bᵀλ is g itself
    for i in 0..grid.len() {
        assert!((&explicit[i] + &btl[i] - &g.values()[i]).norm() <= 1e-12 * (1.0 + g.values()[i].norm()));
    }
    let w = trapezoid_weights(&grid);
    let mb = mass_apply(&grid, &btl);
    let predicted: Vec<DVector<f64>> = (0..grid.len()).map(|i| &explicit[i] * w[i] + &mb[i]).collect();

    let mut worst: f64 = 0.0;
    let mut scale: f64 = 0.0;
    let mut up = u.clone();
    for i in 0..grid.len() {
        for c in 0..u.dim() {
            let base = u.values()[i][c];
            let eps = 1e-6 * base.abs().max(1.0);
            up.values_mut()[i][c] = base + eps;
            let jp = objective_value(spec, &up, cfg).unwrap();
            up.values_mut()[i][c] = base - eps;
            let jm = objective_value(spec, &up, cfg).unwrap();
            up.values_mut()[i][c] = base;
            let fd = (jp - jm) / (2.0 * eps);
            worst = worst.max((fd - predicted[i][c]).abs());
            scale = scale.max(predicted[i][c].abs());
        }
    }
    worst / scale
}
