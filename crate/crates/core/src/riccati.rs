//! Backward Riccati and vector equations, the closed-loop optimal solution,
//! theoretical decay constants and perturbation (sensitivity) responses.

use std::borrow::Cow;

use nalgebra::{DMatrix, DVector};

use crate::controllability::{dual_ucc_constants, shifted_ucc_constants, UccReport};
use crate::error::{Error, Result};
use crate::linalg::{spectral_norm, sym_eig_extremes, symmetrize_in_place};
use crate::ltv_model::{AssumptionReport, LqProblem};
use crate::ode::{
    evolution_operator_fn, integrate_ivp, AffineSystem, Direction, IntegratorConfig, Method, OdeSystem, TimeGrid,
    Trajectory,
};
use crate::scalar::{lit, to_f64, Real};

/// Time-dependent coefficient combinations shared by the Riccati machinery.
#[derive(Clone, Debug)]
pub(crate) struct Coeffs<T: Real> {
    pub b: DMatrix<T>,
    pub h: DMatrix<T>,
    pub rinv: DMatrix<T>,
    /// A − B R⁻¹ H
    pub a_bar: DMatrix<T>,
    /// B R⁻¹ Bᵀ
    pub brb: DMatrix<T>,
    /// Q − Hᵀ R⁻¹ H
    pub q_bar: DMatrix<T>,
}

pub(crate) struct CoeffSource<'a, T: Real> {
    problem: &'a LqProblem<T>,
    cached: Option<Coeffs<T>>,
}

impl<'a, T: Real> CoeffSource<'a, T> {
    pub fn new(problem: &'a LqProblem<T>) -> Result<Self> {
        let p = problem;
        let constant = [&p.a, &p.b, &p.q, &p.h, &p.r].iter().all(|m| m.is_constant());
        let mut src = CoeffSource { problem, cached: None };
        if constant {
            src.cached = Some(src.compute(p.t_start)?);
        }
        Ok(src)
    }

    fn compute(&self, t: T) -> Result<Coeffs<T>> {
        let p = self.problem;
        let b = p.b.eval(t).into_owned();
        let h = p.h.eval(t).into_owned();
        let rinv = p
            .r
            .eval(t)
            .into_owned()
            .try_inverse()
            .ok_or_else(|| Error::InvalidArgument(format!("R is singular at t = {}", to_f64(t))))?;
        let a_bar = &*p.a.eval(t) - &b * &rinv * &h;
        let brb = &b * &rinv * b.transpose();
        let q_bar = &*p.q.eval(t) - h.transpose() * &rinv * &h;
        Ok(Coeffs { b, h, rinv, a_bar, brb, q_bar })
    }

    pub fn at(&self, t: T) -> Cow<'_, Coeffs<T>> {
        match &self.cached {
            Some(c) => Cow::Borrowed(c),
            None => Cow::Owned(self.compute(t).expect("R invertible on the horizon")),
        }
    }
}

fn mat_of<T: Real>(y: &DVector<T>, n: usize) -> DMatrix<T> {
    DMatrix::from_column_slice(n, n, y.as_slice())
}

struct RiccatiOde<'a, T: Real> {
    n: usize,
    coeffs: &'a CoeffSource<'a, T>,
}

impl<T: Real> RiccatiOde<'_, T> {
    fn eval(&self, t: T, s: &DMatrix<T>) -> DMatrix<T> {
        let c = self.coeffs.at(t);
        let sa = s * &c.a_bar;
        s * &c.brb * s - &sa - sa.transpose() - &c.q_bar
    }
}

impl<T: Real> OdeSystem<T> for RiccatiOde<'_, T> {
    fn dim(&self) -> usize {
        self.n * self.n
    }

    fn rhs(&self, t: T, y: &DVector<T>, dy: &mut DVector<T>) {
        let s = mat_of(y, self.n);
        dy.copy_from_slice(self.eval(t, &s).as_slice());
    }

    fn has_projection(&self) -> bool {
        true
    }

    fn project(&self, y: &mut DVector<T>) {
        let mut s = mat_of(y, self.n);
        symmetrize_in_place(&mut s);
        y.copy_from_slice(s.as_slice());
    }
}

/// `S(t)` (and optionally `v(t)`) on a grid, with derivatives for cubic Hermite
/// evaluation between nodes.
#[derive(Clone, Debug)]
pub struct RiccatiSolution<T: Real> {
    grid: TimeGrid<T>,
    s: Vec<DMatrix<T>>,
    s_dot: Vec<DMatrix<T>>,
    v: Option<(Vec<DVector<T>>, Vec<DVector<T>>)>,
}

fn hermite_weights<T: Real>(s: T) -> [T; 4] {
    let two = lit::<T>(2.0);
    let three = lit::<T>(3.0);
    let s2 = s * s;
    let s3 = s2 * s;
    [two * s3 - three * s2 + T::one(), s3 - two * s2 + s, three * s2 - two * s3, s3 - s2]
}

impl<T: Real> RiccatiSolution<T> {
    pub fn grid(&self) -> &TimeGrid<T> {
        &self.grid
    }

    pub fn s_nodes(&self) -> &[DMatrix<T>] {
        &self.s
    }

    pub fn v_nodes(&self) -> Option<&[DVector<T>]> {
        self.v.as_ref().map(|(v, _)| v.as_slice())
    }

    fn interval(&self, t: T) -> (usize, T, T) {
        let nodes = self.grid.nodes();
        let i = self.grid.locate(t);
        let h = nodes[i + 1] - nodes[i];
        (i, (t - nodes[i]) / h, h)
    }

    pub fn s_at(&self, t: T) -> DMatrix<T> {
        let (i, s, h) = self.interval(t);
        if s == T::zero() {
            return self.s[i].clone();
        }
        if s == T::one() {
            return self.s[i + 1].clone();
        }
        let w = hermite_weights(s);
        &self.s[i] * w[0] + &self.s_dot[i] * (w[1] * h) + &self.s[i + 1] * w[2] + &self.s_dot[i + 1] * (w[3] * h)
    }

    /// `v(t)`, zero when the vector term has not been solved.
    pub fn v_at(&self, t: T) -> DVector<T> {
        let n = self.s[0].nrows();
        let Some((v, vd)) = &self.v else {
            return DVector::zeros(n);
        };
        let (i, s, h) = self.interval(t);
        if s == T::zero() {
            return v[i].clone();
        }
        let w = hermite_weights(s);
        &v[i] * w[0] + &vd[i] * (w[1] * h) + &v[i + 1] * w[2] + &vd[i + 1] * (w[3] * h)
    }

    /// Extreme eigenvalues of `S` over all nodes.
    pub fn eig_range(&self) -> (T, T) {
        let mut lo = lit::<T>(f64::INFINITY);
        let mut hi = lit::<T>(f64::NEG_INFINITY);
        for s in &self.s {
            let (a, b) = sym_eig_extremes(s);
            lo = lo.min(a);
            hi = hi.max(b);
        }
        (lo, hi)
    }
}

pub const BREAKDOWN_TOL: f64 = 1e-8;

/// Integrates the Riccati equation backward from `S(T) = Q_T`.
pub fn solve_riccati<T: Real>(
    problem: &LqProblem<T>,
    grid: &TimeGrid<T>,
    cfg: &IntegratorConfig<T>,
) -> Result<RiccatiSolution<T>> {
    if cfg.method == Method::BackwardEuler {
        return Err(Error::NotAffine("the Riccati equation with backward Euler"));
    }
    let n = problem.nx();
    let coeffs = CoeffSource::new(problem)?;
    let sys = RiccatiOde { n, coeffs: &coeffs };
    let y0 = DVector::from_column_slice(problem.q_t.as_slice());
    let traj = integrate_ivp(&sys, &y0, grid, cfg, Direction::Backward)?;
    let mut s: Vec<DMatrix<T>> = traj.values().iter().map(|y| mat_of(y, n)).collect();
    let last = s.len() - 1;
    s[last] = problem.q_t.clone();
    let tol = lit::<T>(-BREAKDOWN_TOL);
    for (m, &t) in s.iter().zip(grid.nodes()) {
        let (lo, _) = sym_eig_extremes(m);
        if !(lo >= tol) {
            return Err(Error::RiccatiBreakdown { t: to_f64(t), min_eig: to_f64(lo) });
        }
    }
    let s_dot = s.iter().zip(grid.nodes()).map(|(m, &t)| sys.eval(t, m)).collect();
    Ok(RiccatiSolution { grid: grid.clone(), s, s_dot, v: None })
}

fn z_at<T: Real>(c: &Coeffs<T>, s: &DMatrix<T>) -> DMatrix<T> {
    &c.a_bar - &c.brb * s
}

/// `Y = W R⁻¹ (Bᵀ S + H) − (G + Cᵀ S)`, `n_d × n_x`.
fn y_at<T: Real>(problem: &LqProblem<T>, c: &Coeffs<T>, s: &DMatrix<T>, t: T) -> DMatrix<T> {
    let w = problem.w.eval(t);
    let cm = problem.c.eval(t);
    let bts_h = c.b.transpose() * s + &c.h;
    &*w * &c.rinv * bts_h - (&*problem.g.eval(t) + cm.transpose() * s)
}

fn parameter_is_silent<T: Real>(problem: &LqProblem<T>) -> bool {
    problem.d.is_zero() || (problem.c.is_zero() && problem.g.is_zero() && problem.w.is_zero())
}

/// Integrates the vector equation backward from `v(T) = G_Tᵀ d_T`.
pub fn solve_vector_term<T: Real>(
    problem: &LqProblem<T>,
    riccati: &RiccatiSolution<T>,
    grid: &TimeGrid<T>,
    cfg: &IntegratorConfig<T>,
) -> Result<Trajectory<T>> {
    let n = problem.nx();
    let coeffs = CoeffSource::new(problem)?;
    let silent = parameter_is_silent(problem);
    let sys = AffineSystem {
        dim: n,
        parts: |t: T| {
            let c = coeffs.at(t);
            let s = riccati.s_at(t);
            let m = -z_at(&c, &s).transpose();
            let b = if silent {
                DVector::zeros(n)
            } else {
                y_at(problem, &c, &s, t).transpose() * problem.d_at(t)
            };
            (m, b)
        },
    };
    integrate_ivp(&sys, &problem.terminal_linear(), grid, cfg, Direction::Backward)
}

/// Riccati and vector terms on the same grid.
pub fn solve_riccati_full<T: Real>(
    problem: &LqProblem<T>,
    grid: &TimeGrid<T>,
    cfg: &IntegratorConfig<T>,
) -> Result<RiccatiSolution<T>> {
    let mut sol = solve_riccati(problem, grid, cfg)?;
    let v = solve_vector_term(problem, &sol, grid, cfg)?;
    let coeffs = CoeffSource::new(problem)?;
    let silent = parameter_is_silent(problem);
    let vd = v
        .values()
        .iter()
        .zip(grid.nodes())
        .zip(&sol.s)
        .map(|((vi, &t), s)| {
            let c = coeffs.at(t);
            let mut d = -(z_at(&c, s).transpose() * vi);
            if !silent {
                d += y_at(problem, &c, s, t).transpose() * problem.d_at(t);
            }
            d
        })
        .collect();
    sol.v = Some((v.values().to_vec(), vd));
    Ok(sol)
}

/// State, control and adjoint of an optimal solution.
#[derive(Clone, Debug, PartialEq)]
pub struct Solution<T: Real> {
    pub x: Trajectory<T>,
    pub u: Trajectory<T>,
    pub lambda: Trajectory<T>,
}

impl<T: Real> Solution<T> {
    /// Max over nodes of ‖Δx‖ + ‖Δu‖ + ‖Δλ‖.
    pub fn distance(&self, other: &Self) -> Result<T> {
        if self.x.len() != other.x.len() {
            return Err(Error::Dimension("solutions live on different grids".into()));
        }
        let mut worst = T::zero();
        for i in 0..self.x.len() {
            let e = (&self.x.values()[i] - &other.x.values()[i]).norm()
                + (&self.u.values()[i] - &other.u.values()[i]).norm()
                + (&self.lambda.values()[i] - &other.lambda.values()[i]).norm();
            worst = worst.max(e);
        }
        Ok(worst)
    }
}

/// `u = −R⁻¹(H x + Bᵀ λ + Wᵀ d)`.
fn feedback_control<T: Real>(problem: &LqProblem<T>, c: &Coeffs<T>, t: T, x: &DVector<T>, lam: &DVector<T>) -> DVector<T> {
    let mut r = &c.h * x + c.b.transpose() * lam;
    if !problem.w.is_zero() {
        r += problem.w.eval(t).transpose() * problem.d_at(t);
    }
    -(&c.rinv * r)
}

/// Closed-loop optimal solution from `x(t_start) = d0`.
pub fn closed_loop_solution<T: Real>(
    problem: &LqProblem<T>,
    riccati: &RiccatiSolution<T>,
    grid: &TimeGrid<T>,
    cfg: &IntegratorConfig<T>,
) -> Result<Solution<T>> {
    let n = problem.nx();
    let coeffs = CoeffSource::new(problem)?;
    let has_d = !(problem.d.is_zero() || (problem.c.is_zero() && problem.w.is_zero()));
    let sys = AffineSystem {
        dim: n,
        parts: |t: T| {
            let c = coeffs.at(t);
            let s = riccati.s_at(t);
            let z = z_at(&c, &s);
            let mut b = -(&c.brb * riccati.v_at(t));
            if has_d {
                let cw = &*problem.c.eval(t) - &c.b * &c.rinv * problem.w.eval(t).transpose();
                b += cw * problem.d_at(t);
            }
            (z, b)
        },
    };
    let x = integrate_ivp(&sys, &problem.d0, grid, cfg, Direction::Forward)?;
    let mut lam = Vec::with_capacity(grid.len());
    let mut u = Vec::with_capacity(grid.len());
    for (xi, &t) in x.values().iter().zip(grid.nodes()) {
        let c = coeffs.at(t);
        let l = riccati.s_at(t) * xi + riccati.v_at(t);
        u.push(feedback_control(problem, &c, t, xi, &l));
        lam.push(l);
    }
    Ok(Solution {
        x,
        u: Trajectory::new(grid.clone(), u)?,
        lambda: Trajectory::new(grid.clone(), lam)?,
    })
}

/// Feedback matrix `Z(t) = A − B R⁻¹ H − B R⁻¹ Bᵀ S` of a solved problem.
pub fn feedback_matrix<T: Real>(problem: &LqProblem<T>, riccati: &RiccatiSolution<T>, t: T) -> Result<DMatrix<T>> {
    let coeffs = CoeffSource::new(problem)?;
    let c = coeffs.at(t);
    Ok(z_at(&c, &riccati.s_at(t)))
}

fn tight<T: Real>() -> IntegratorConfig<T> {
    IntegratorConfig::adaptive(Method::Rk45Adaptive, lit(1e-12), lit(1e-12))
}

/// `Φ_Z(t1, t0)`.
pub fn closed_loop_evolution<T: Real>(
    problem: &LqProblem<T>,
    riccati: &RiccatiSolution<T>,
    t0: T,
    t1: T,
) -> Result<DMatrix<T>> {
    let coeffs = CoeffSource::new(problem)?;
    let f = |t: T| z_at(&coeffs.at(t), &riccati.s_at(t));
    evolution_operator_fn(problem.nx(), &f, t0, t1, &tight())
}

/// Theoretical constants as functions of σ.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConstantsBundle<T> {
    pub lambda_a: T,
    pub lambda_b: T,
    pub lambda_c: T,
    pub lambda_q: T,
    pub lambda_h: T,
    pub lambda_r: T,
    pub lambda_w: T,
    pub lambda_g: T,
    pub gamma_r: T,
    /// Coercivity constant used in the formulas (covers Q_T as well).
    pub gamma_q: T,
    pub sigma: T,
    pub kappa: T,
    pub alpha0_shift: T,
    pub alpha1_shift: T,
    pub alpha0_dual: T,
    pub alpha1_dual: T,
    pub c0: T,
    pub c1: T,
    pub c_z: T,
    pub rho_z: T,
    pub c_v: T,
    pub lambda_x: T,
    pub lambda_lambda: T,
    pub lambda_u: T,
    /// Interior perturbation constant.
    pub lambda_mid: T,
    /// Boundary perturbation constant with the problem's own couplings.
    pub lambda_b_bound: T,
    /// Boundary constant with λ_G ← λ_Q and λ_C = λ_W = 0.
    pub lambda_b_schwarz: T,
    pub c_sigma: T,
    /// False when the assumption report did not pass (constants not guaranteed).
    pub certified: bool,
}

impl<T: Real> ConstantsBundle<T> {
    pub fn schwarz_rate_bound(&self, tau: T) -> T {
        lit::<T>(3.0) * self.c_sigma * (-self.rho_z * tau).exp()
    }

    pub fn rows(&self) -> Vec<(&'static str, f64)> {
        vec![
            ("lambda_A", to_f64(self.lambda_a)),
            ("lambda_B", to_f64(self.lambda_b)),
            ("lambda_C", to_f64(self.lambda_c)),
            ("lambda_Q", to_f64(self.lambda_q)),
            ("lambda_H", to_f64(self.lambda_h)),
            ("lambda_R", to_f64(self.lambda_r)),
            ("lambda_W", to_f64(self.lambda_w)),
            ("lambda_G", to_f64(self.lambda_g)),
            ("gamma_R", to_f64(self.gamma_r)),
            ("gamma_Q", to_f64(self.gamma_q)),
            ("sigma", to_f64(self.sigma)),
            ("kappa", to_f64(self.kappa)),
            ("alpha0_shift", to_f64(self.alpha0_shift)),
            ("alpha1_shift", to_f64(self.alpha1_shift)),
            ("alpha0_dual", to_f64(self.alpha0_dual)),
            ("alpha1_dual", to_f64(self.alpha1_dual)),
            ("c0", to_f64(self.c0)),
            ("c1", to_f64(self.c1)),
            ("c_Z", to_f64(self.c_z)),
            ("rho_Z", to_f64(self.rho_z)),
            ("c_v", to_f64(self.c_v)),
            ("Lambda_x", to_f64(self.lambda_x)),
            ("Lambda_lambda", to_f64(self.lambda_lambda)),
            ("Lambda_u", to_f64(self.lambda_u)),
            ("Lambda", to_f64(self.lambda_mid)),
            ("Lambda_b", to_f64(self.lambda_b_bound)),
            ("Lambda_b_schwarz", to_f64(self.lambda_b_schwarz)),
            ("c_sigma", to_f64(self.c_sigma)),
            ("certified", if self.certified { 1.0 } else { 0.0 }),
        ]
    }
}

fn boundary_lambda<T: Real>(c_z: T, c1: T, rho_z: T, lb: T, lh: T, lg: T, gr: T) -> T {
    let two = lit::<T>(2.0);
    let lxb = c_z.max(c_z * c_z * lb * lb * lg / (two * rho_z * gr));
    (T::one() + lh / gr + (T::one() + lb / gr) * (c1 + lg)) * lxb
}

/// Evaluates the constant chain from sampled bounds and a UCC certificate.
///
/// The UCC constants of the pair `(A, B)` enter the shifted-pair bound with
/// `λ_F = λ_H/γ_R`. When the assumption report failed, the bundle is still
/// computed (with `γ_Q` taken from the running cost if `Q_T` is singular) but
/// flagged as not certified.
pub fn theoretical_constants<T: Real>(
    report: &AssumptionReport<T>,
    ucc: &UccReport<T>,
    sigma: T,
) -> Result<ConstantsBundle<T>> {
    if !ucc.pass {
        return Err(Error::NotControllable("UCC scan did not pass".into()));
    }
    if !(report.gamma_r > T::zero()) || !(report.gamma_q > T::zero()) {
        return Err(Error::InvalidArgument("constants need gamma_R > 0 and gamma_Q > 0".into()));
    }
    let two = lit::<T>(2.0);
    let gr = report.gamma_r;
    let gq = if report.qt_min > lit(crate::ltv_model::POSITIVITY_TOL) {
        report.gamma_q_effective()
    } else {
        report.gamma_q
    };
    let (la, lb, lh, lq, lr) = (report.lambda_a, report.lambda_b, report.lambda_h, report.lambda_q, report.lambda_r);
    let (lc, lw, lg) = (report.lambda_c, report.lambda_w, report.lambda_g);
    let kappa = la + lb * lh / gr;
    let shift = shifted_ucc_constants(la, lb, lh / gr, sigma, ucc.alpha0, ucc.alpha1)?;
    let dual = dual_ucc_constants(la, lb, lh, gr, sigma);
    let e = (two * kappa * sigma).exp();

    let r_dual = T::one() + dual.alpha1 / dual.alpha0;
    let c0_a = two * kappa / (lb * lb / gr * r_dual * r_dual + T::one() / (gq * dual.alpha0 * dual.alpha0));
    let c0_b = T::one() / (lb * lb / (two * gr * kappa) + T::one() / gq);
    let c0 = c0_a.min(c0_b) / e;

    let qh = lq + lh * lh / gr;
    let r_shift = T::one() + shift.alpha1 / shift.alpha0;
    let c1_a = (qh * r_shift * r_shift + lr * lb * lb / (shift.alpha0 * shift.alpha0)) / (two * kappa);
    let c1_b = qh * (T::one() + T::one() / (two * kappa));
    let c1 = c1_a.max(c1_b) * e;

    let c_z = (c1 / c0).sqrt();
    let rho_z = gq / (two * c1);
    let c_v = c_z * ((lw * lb / gr + lc) * c1 + lw * lh / gr + lg);
    let lambda_x = c_z * (c_v * lb * lb / (two * rho_z * gr) + lw * lb / gr + lc);
    let lambda_lambda = c1 * lambda_x + c_v;
    let lambda_u = (lambda_x * lh + lambda_lambda * lb) / gr;
    let lambda_b_bound = boundary_lambda(c_z, c1, rho_z, lb, lh, lg, gr);
    let lambda_b_schwarz = boundary_lambda(c_z, c1, rho_z, lb, lh, lq, gr);
    Ok(ConstantsBundle {
        lambda_a: la,
        lambda_b: lb,
        lambda_c: lc,
        lambda_q: lq,
        lambda_h: lh,
        lambda_r: lr,
        lambda_w: lw,
        lambda_g: lg,
        gamma_r: gr,
        gamma_q: gq,
        sigma,
        kappa,
        alpha0_shift: shift.alpha0,
        alpha1_shift: shift.alpha1,
        alpha0_dual: dual.alpha0,
        alpha1_dual: dual.alpha1,
        c0,
        c1,
        c_z,
        rho_z,
        c_v,
        lambda_x,
        lambda_lambda,
        lambda_u,
        lambda_mid: lambda_x + lambda_u + lambda_lambda,
        lambda_b_bound,
        lambda_b_schwarz,
        c_sigma: lambda_b_schwarz * (T::one() + T::one() / gq),
        certified: report.pass,
    })
}

/// Bound side with floating point slack.
pub fn envelope_slack<T: Real>(bound: T) -> T {
    bound * lit::<T>(1.0 + 1e-6) + lit::<T>(1e-9)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecayReport<T> {
    /// `(t0, t1, ‖Φ_Z(t1,t0)‖, c_Z e^{−ρ_Z(t1−t0)})`
    pub entries: Vec<(T, T, T, T)>,
    /// Smallest `bound − measured` over all pairs.
    pub worst_margin: T,
    pub pass: bool,
}

pub fn evolution_decay_check<T: Real>(
    problem: &LqProblem<T>,
    riccati: &RiccatiSolution<T>,
    pairs: &[(T, T)],
    constants: &ConstantsBundle<T>,
) -> Result<DecayReport<T>> {
    let mut rep: DecayReport<T> = DecayReport { entries: Vec::new(), worst_margin: lit::<T>(f64::INFINITY), pass: true };
    for &(t0, t1) in pairs {
        let phi = closed_loop_evolution(problem, riccati, t0, t1)?;
        let measured = spectral_norm(&phi);
        let bound = constants.c_z * (-constants.rho_z * (t1 - t0)).exp();
        rep.worst_margin = rep.worst_margin.min(bound - measured);
        if measured > envelope_slack(bound) {
            rep.pass = false;
        }
        rep.entries.push((t0, t1, measured, bound));
    }
    Ok(rep)
}

/// Pointwise comparison of a response against an exponential envelope.
#[derive(Clone, Debug, PartialEq)]
pub struct EnvelopeReport<T> {
    /// Largest measured/bound ratio over checked nodes.
    pub max_ratio: T,
    pub worst_t: T,
    pub violations: usize,
    /// Least-squares slope of log response on each side, measured moving away
    /// from the perturbation (negative means decay).
    pub slope_before: Option<T>,
    pub slope_after: Option<T>,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PerturbationResponse<T: Real> {
    pub dx: Trajectory<T>,
    pub du: Trajectory<T>,
    pub dlambda: Trajectory<T>,
    pub envelope: EnvelopeReport<T>,
}

impl<T: Real> PerturbationResponse<T> {
    pub fn magnitude(&self, i: usize) -> T {
        self.dx.values()[i].norm() + self.du.values()[i].norm() + self.dlambda.values()[i].norm()
    }
}

fn log_slope<T: Real>(pts: &[(T, T)]) -> Option<T> {
    let pts: Vec<(f64, f64)> = pts
        .iter()
        .filter(|(_, v)| *v > T::zero() && v.is_finite())
        .map(|&(d, v)| (to_f64(d), to_f64(v).ln()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    if sxx == 0.0 {
        return None;
    }
    Some(lit(sxy / sxx))
}

fn envelope_report<T: Real>(
    grid: &TimeGrid<T>,
    magnitude: impl Fn(usize) -> T,
    bound: impl Fn(T) -> T,
    skip: Option<usize>,
    split: T,
) -> EnvelopeReport<T> {
    let mut rep = EnvelopeReport {
        max_ratio: T::zero(),
        worst_t: grid.start(),
        violations: 0,
        slope_before: None,
        slope_after: None,
        pass: true,
    };
    let mut before = Vec::new();
    let mut after = Vec::new();
    let peak = (0..grid.len()).filter(|&i| Some(i) != skip).map(&magnitude).fold(T::zero(), |a, b| a.max(b));
    let floor = peak * lit::<T>(1e-13);
    for (i, &t) in grid.nodes().iter().enumerate() {
        if Some(i) == skip {
            continue;
        }
        let m = magnitude(i);
        let b = bound(t);
        if b > T::zero() {
            let r = m / b;
            if r > rep.max_ratio {
                rep.max_ratio = r;
                rep.worst_t = t;
            }
        }
        if m > envelope_slack(b) {
            rep.violations += 1;
            rep.pass = false;
        }
        if m > floor {
            if t < split {
                before.push((split - t, m));
            } else if t > split {
                after.push((t - split, m));
            }
        }
    }
    rep.slope_before = log_slope(&before);
    rep.slope_after = log_slope(&after);
    rep
}

/// Response to a Dirac perturbation `l δ(t − t′)` of the parameter trajectory.
///
/// `t_prime` is snapped to the nearest grid node. Values at that node are left
/// limits; the node is excluded from the envelope check.
pub fn point_perturbation_response<T: Real>(
    problem: &LqProblem<T>,
    riccati: &RiccatiSolution<T>,
    t_prime: T,
    l: &DVector<T>,
    constants: &ConstantsBundle<T>,
    cfg: &IntegratorConfig<T>,
) -> Result<PerturbationResponse<T>> {
    let grid = riccati.grid().clone();
    if !(t_prime > problem.t_start && t_prime < problem.t_end) {
        return Err(Error::InvalidArgument(format!(
            "perturbation time {} outside the open horizon",
            to_f64(t_prime)
        )));
    }
    if l.len() != problem.nd() {
        return Err(Error::Dimension("perturbation must have parameter dimension".into()));
    }
    let n = problem.nx();
    let ip = grid.nearest(t_prime);
    if ip == 0 || ip + 1 == grid.len() {
        return Err(Error::InvalidArgument("perturbation node must be interior".into()));
    }
    let tp = grid.nodes()[ip];
    let coeffs = CoeffSource::new(problem)?;
    let zt = |t: T| -> DMatrix<T> { z_at(&coeffs.at(t), &riccati.s_at(t)) };

    // δv on [t0, t′]: backward homogeneous from −Yᵀ(t′) l
    let cp = coeffs.at(tp);
    let dv_end = -(y_at(problem, &cp, &riccati.s_at(tp), tp).transpose() * l);
    let mut dv = vec![DVector::zeros(n); grid.len()];
    let mut dv_dot = vec![DVector::zeros(n); grid.len()];
    {
        let left = grid.slice(0, ip)?;
        let sys = AffineSystem { dim: n, parts: |t: T| (-zt(t).transpose(), DVector::zeros(n)) };
        let tr = integrate_ivp(&sys, &dv_end, &left, cfg, Direction::Backward)?;
        for (i, v) in tr.values().iter().enumerate() {
            dv_dot[i] = -(zt(grid.nodes()[i]).transpose() * v);
            dv[i] = v.clone();
        }
    }
    // δx: forced by −B R⁻¹ Bᵀ δv on [t0, t′], then jump, then homogeneous
    let nodes = grid.nodes().to_vec();
    let dv_interp = |t: T| -> DVector<T> {
        if t > tp {
            return DVector::zeros(n);
        }
        let i = grid.locate(t).min(ip - 1);
        let h = nodes[i + 1] - nodes[i];
        let w = hermite_weights((t - nodes[i]) / h);
        &dv[i] * w[0] + &dv_dot[i] * (w[1] * h) + &dv[i + 1] * w[2] + &dv_dot[i + 1] * (w[3] * h)
    };
    let mut dx = vec![DVector::zeros(n); grid.len()];
    {
        let left = grid.slice(0, ip)?;
        let sys = AffineSystem {
            dim: n,
            parts: |t: T| {
                let c = coeffs.at(t);
                let z = z_at(&c, &riccati.s_at(t));
                (z, -(&c.brb * dv_interp(t)))
            },
        };
        let tr = integrate_ivp(&sys, &DVector::zeros(n), &left, cfg, Direction::Forward)?;
        for (i, v) in tr.values().iter().enumerate() {
            dx[i] = v.clone();
        }
        let jump_m = &*problem.c.eval(tp) - &cp.b * &cp.rinv * problem.w.eval(tp).transpose();
        let start = &dx[ip] + jump_m * l;
        let right = grid.slice(ip, grid.len() - 1)?;
        let sys = AffineSystem { dim: n, parts: |t: T| (zt(t), DVector::zeros(n)) };
        let tr = integrate_ivp(&sys, &start, &right, cfg, Direction::Forward)?;
        for (k, v) in tr.values().iter().enumerate().skip(1) {
            dx[ip + k] = v.clone();
        }
    }
    let mut dl = Vec::with_capacity(grid.len());
    let mut du = Vec::with_capacity(grid.len());
    for (i, &t) in nodes.iter().enumerate() {
        let c = coeffs.at(t);
        let lam = riccati.s_at(t) * &dx[i] + &dv[i];
        du.push(-(&c.rinv * (&c.h * &dx[i] + c.b.transpose() * &lam)));
        dl.push(lam);
    }
    let dx = Trajectory::new(grid.clone(), dx)?;
    let du = Trajectory::new(grid.clone(), du)?;
    let dlambda = Trajectory::new(grid.clone(), dl)?;
    let ln = l.norm();
    let mag = |i: usize| dx.values()[i].norm() + du.values()[i].norm() + dlambda.values()[i].norm();
    let envelope = envelope_report(
        &grid,
        mag,
        |t| constants.lambda_mid * ln * (-constants.rho_z * (t - tp).abs()).exp(),
        Some(ip),
        tp,
    );
    Ok(PerturbationResponse { dx, du, dlambda, envelope })
}

/// Response to perturbing the boundary data `(d0, d_T)` by `(l0, l_T)`.
pub fn boundary_perturbation_response<T: Real>(
    problem: &LqProblem<T>,
    l0: &DVector<T>,
    l_t: &DVector<T>,
    grid: &TimeGrid<T>,
    constants: &ConstantsBundle<T>,
    cfg: &IntegratorConfig<T>,
) -> Result<PerturbationResponse<T>> {
    if l0.len() != problem.nx() || l_t.len() != problem.nd() {
        return Err(Error::Dimension("boundary perturbations must match (n_x, n_d)".into()));
    }
    let base = {
        let ric = solve_riccati_full(problem, grid, cfg)?;
        closed_loop_solution(problem, &ric, grid, cfg)?
    };
    let mut pert = problem.clone();
    pert.d0 = &problem.d0 + l0;
    pert.d_t = &problem.d_t + l_t;
    let moved = {
        let ric = solve_riccati_full(&pert, grid, cfg)?;
        closed_loop_solution(&pert, &ric, grid, cfg)?
    };
    let diff = |a: &Trajectory<T>, b: &Trajectory<T>| -> Result<Trajectory<T>> {
        Trajectory::new(grid.clone(), a.values().iter().zip(b.values()).map(|(p, q)| p - q).collect())
    };
    let dx = diff(&moved.x, &base.x)?;
    let du = diff(&moved.u, &base.u)?;
    let dlambda = diff(&moved.lambda, &base.lambda)?;
    let (n0, nt) = (l0.norm(), l_t.norm());
    let (ts, te) = (problem.t_start, problem.t_end);
    let mag = |i: usize| dx.values()[i].norm() + du.values()[i].norm() + dlambda.values()[i].norm();
    let bound = |t: T| {
        constants.lambda_b_bound * (n0 * (-constants.rho_z * (t - ts)).exp() + nt * (-constants.rho_z * (te - t)).exp())
    };
    // slopes are measured away from whichever boundary is perturbed
    let split = if nt > T::zero() && n0 == T::zero() { te } else { ts };
    let mut envelope = envelope_report(grid, mag, bound, None, split);
    if split == ts {
        envelope.slope_before = None;
    } else {
        envelope.slope_after = None;
    }
    Ok(PerturbationResponse { dx, du, dlambda, envelope })
}
