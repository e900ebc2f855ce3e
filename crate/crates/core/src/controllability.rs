//! Controllability Gramians, uniform complete controllability scans, steering
//! controls and the explicit UCC constants of shifted and adjoint pairs.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{condition_number, sym_eig_extremes, symmetrize};
use crate::ltv_model::MatrixFunction;
use crate::ode::{inverse_evolution_on_grid, simpson_grid, simpson_weights, IntegratorConfig, Method, TimeGrid, Trajectory};
use crate::scalar::{lit, to_f64, Real};

pub const GRAMIAN_COND_LIMIT: f64 = 1e12;

fn tight<T: Real>() -> IntegratorConfig<T> {
    IntegratorConfig::adaptive(Method::Rk45Adaptive, lit(1e-13), lit(1e-12))
}

/// Panel count used when none is given: `max(32, ⌈(t1 − t0)/dt⌉)`.
pub fn default_panels<T: Real>(t0: T, t1: T, dt: T) -> usize {
    let n = to_f64((t1 - t0) / dt).ceil();
    (n.max(32.0)) as usize
}

/// `Φ_A(t0, s)` at the Simpson nodes of `[t0, t1]`, plus the nodes.
fn backward_transition<T: Real>(
    a: &MatrixFunction<T>,
    t0: T,
    t1: T,
    panels: usize,
) -> Result<(TimeGrid<T>, Vec<DMatrix<T>>)> {
    let grid = simpson_grid(t0, t1, panels)?;
    let f = |t: T| a.eval(t).into_owned();
    let psi = inverse_evolution_on_grid(a.rows(), &f, &grid, &tight())?;
    Ok((grid, psi))
}

fn gramian_from<T: Real>(b: &MatrixFunction<T>, grid: &TimeGrid<T>, psi: &[DMatrix<T>], weights: &[T]) -> DMatrix<T> {
    let n = psi[0].nrows();
    let mut w = DMatrix::zeros(n, n);
    for ((&s, p), &wt) in grid.nodes().iter().zip(psi).zip(weights) {
        let pb = p * &*b.eval(s);
        w += (&pb * pb.transpose()) * wt;
    }
    symmetrize(&w)
}

/// `W(t0, t1) = ∫ Φ_A(t0,s) B(s) Bᵀ(s) Φ_Aᵀ(t0,s) ds`, symmetrized.
pub fn gramian<T: Real>(
    a: &MatrixFunction<T>,
    b: &MatrixFunction<T>,
    t0: T,
    t1: T,
    quad_panels: usize,
) -> Result<DMatrix<T>> {
    if !(t1 > t0) {
        return Err(Error::Interval(to_f64(t0), to_f64(t1)));
    }
    let (grid, psi) = backward_transition(a, t0, t1, quad_panels)?;
    Ok(gramian_from(b, &grid, &psi, &simpson_weights(t0, t1, quad_panels)))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UccReport<T> {
    pub sigma: T,
    pub alpha0: T,
    pub alpha1: T,
    pub beta0: T,
    pub beta1: T,
    pub worst_t0: T,
    pub pass: bool,
}

/// Scans `t0` over `scan_points` uniform points of `[0, horizon − σ]` with `t1 = t0 + σ`.
pub fn check_ucc<T: Real>(
    a: &MatrixFunction<T>,
    b: &MatrixFunction<T>,
    sigma: T,
    horizon: T,
    scan_points: usize,
    quad_panels: usize,
) -> Result<UccReport<T>> {
    if !(sigma > T::zero() && sigma < horizon) {
        return Err(Error::InvalidArgument(format!(
            "sigma must lie in (0, T): sigma = {}, T = {}",
            to_f64(sigma),
            to_f64(horizon)
        )));
    }
    let inf = lit::<T>(f64::INFINITY);
    let mut rep = UccReport {
        sigma,
        alpha0: inf,
        alpha1: -inf,
        beta0: inf,
        beta1: -inf,
        worst_t0: T::zero(),
        pass: false,
    };
    let points = scan_points.max(1);
    let last = horizon - sigma;
    let weights = simpson_weights(T::zero(), sigma, quad_panels);
    for i in 0..points {
        let t0 = if points == 1 { T::zero() } else { last * lit::<T>(i as f64 / (points - 1) as f64) };
        let t1 = t0 + sigma;
        let (grid, psi) = backward_transition(a, t0, t1, quad_panels)?;
        let w = gramian_from(b, &grid, &psi, &weights);
        let (lo, hi) = sym_eig_extremes(&w);
        if lo < rep.alpha0 {
            rep.alpha0 = lo;
            rep.worst_t0 = t0;
        }
        rep.alpha1 = rep.alpha1.max(hi);
        // Φ_A(t1, t0) = Φ_A(t0, t1)⁻¹
        let phi = psi[psi.len() - 1].clone().try_inverse().ok_or_else(|| {
            Error::NotControllable(format!("singular transition matrix at t0 = {}", to_f64(t0)))
        })?;
        let (blo, bhi) = sym_eig_extremes(&(&phi * &w * phi.transpose()));
        rep.beta0 = rep.beta0.min(blo);
        rep.beta1 = rep.beta1.max(bhi);
    }
    let tol = lit::<T>(1e-12);
    rep.pass = rep.alpha0 > tol && rep.beta0 > tol;
    Ok(rep)
}

/// Control `u(t) = −Bᵀ(t) Φ_Aᵀ(t0, t) W(t0,t1)⁻¹ x0` sampled on `grid` (which spans `[t0, t1]`).
pub fn zero_steering_control<T: Real>(
    a: &MatrixFunction<T>,
    b: &MatrixFunction<T>,
    grid: &TimeGrid<T>,
    x0: &DVector<T>,
) -> Result<Trajectory<T>> {
    let (t0, t1) = (grid.start(), grid.end());
    let panels = default_panels(t0, t1, grid.max_step());
    let w = gramian(a, b, t0, t1, panels)?;
    let cond = condition_number(&w);
    if !(cond < lit(GRAMIAN_COND_LIMIT)) {
        return Err(Error::NotControllable(format!("Gramian condition number {:e}", to_f64(cond))));
    }
    let winv_x0 = w
        .lu()
        .solve(x0)
        .ok_or_else(|| Error::NotControllable("singular Gramian".into()))?;
    let f = |t: T| a.eval(t).into_owned();
    let psi = inverse_evolution_on_grid(a.rows(), &f, grid, &tight())?;
    let values = grid
        .nodes()
        .iter()
        .zip(&psi)
        .map(|(&t, p)| -(b.eval(t).transpose() * p.transpose() * &winv_x0))
        .collect();
    Trajectory::new(grid.clone(), values)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UccConstants<T> {
    pub alpha0: T,
    pub alpha1: T,
    pub beta0: T,
    pub beta1: T,
}

/// UCC constants of the shifted pair `(A + BF, B)` given those of `(A, B)`.
pub fn shifted_ucc_constants<T: Real>(
    lambda_a: T,
    lambda_b: T,
    lambda_f: T,
    sigma: T,
    alpha0: T,
    alpha1: T,
) -> Result<UccConstants<T>> {
    if !(lambda_a > T::zero()) {
        return Err(Error::InvalidArgument("shifted UCC constants need lambda_A > 0".into()));
    }
    if !(alpha0 > T::zero() && sigma > T::zero()) {
        return Err(Error::InvalidArgument("shifted UCC constants need alpha0 > 0 and sigma > 0".into()));
    }
    let two = lit::<T>(2.0);
    let m = lambda_a + lambda_b * lambda_f;
    let a1 = lambda_b * lambda_b * (two * sigma * m).exp_m1() / (two * m);
    let ratio = T::one() + alpha1 / alpha0;
    let a0 = T::one()
        / (two / alpha0 + (lambda_f * lambda_f / lambda_a) * ratio * ratio * (two * lambda_a * sigma).exp_m1());
    Ok(UccConstants {
        alpha0: a0,
        alpha1: a1,
        beta0: a0 * (-two * m * sigma).exp(),
        beta1: a1 * (two * m * sigma).exp(),
    })
}

/// UCC constants of the adjoint pair with `κ = λ_A + λ_B λ_H / γ_R`.
pub fn dual_ucc_constants<T: Real>(lambda_a: T, lambda_b: T, lambda_h: T, gamma_r: T, sigma: T) -> UccConstants<T> {
    let two = lit::<T>(2.0);
    let kappa = lambda_a + lambda_b * lambda_h / gamma_r;
    let (a0, a1) = if kappa * sigma < lit(1e-12) {
        (sigma, sigma)
    } else {
        (-(-two * kappa * sigma).exp_m1() / (two * kappa), (two * kappa * sigma).exp_m1() / (two * kappa))
    };
    UccConstants {
        alpha0: a0,
        alpha1: a1,
        beta0: a0 * (-two * kappa * sigma).exp(),
        beta1: a1 * (two * kappa * sigma).exp(),
    }
}
