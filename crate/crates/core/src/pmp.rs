//! Subproblem solver: forward state sweep, backward adjoint sweep, functional
//! gradient and fixed-step gradient descent on the control trajectory.

use std::cell::RefCell;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::ltv_model::{truncate_to_subproblem, LqProblem};
use crate::ode::{integrate_ivp, Direction, IntegratorConfig, OdeSystem, Trajectory};
use crate::scalar::{lit, to_f64, Real};

/// One subproblem on `[t0, t1]` with initial state `p` and target `q`.
#[derive(Clone, Debug)]
pub struct SubproblemSpec<T: Real> {
    pub t0: T,
    pub t1: T,
    pub p: DVector<T>,
    pub q: DVector<T>,
    pub is_last: bool,
    problem: LqProblem<T>,
}

impl<T: Real> SubproblemSpec<T> {
    pub fn new(parent: &LqProblem<T>, t0: T, t1: T, p: DVector<T>, q: DVector<T>, is_last: bool) -> Result<Self> {
        let problem = truncate_to_subproblem(parent, t0, t1, &p, &q, is_last)?;
        Ok(SubproblemSpec { t0, t1, p, q, is_last, problem })
    }

    /// The whole horizon as a single subproblem.
    pub fn full(parent: &LqProblem<T>) -> Result<Self> {
        let n = parent.nx();
        Self::new(parent, parent.t_start, parent.t_end, parent.d0.clone(), DVector::zeros(n), true)
    }

    /// The truncated problem actually being solved.
    pub fn problem(&self) -> &LqProblem<T> {
        &self.problem
    }

    fn check_grid(&self, traj: &Trajectory<T>, what: &str) -> Result<()> {
        let g = traj.grid();
        let tol = lit::<T>(1e-12) * (T::one() + self.t1.abs());
        if (g.start() - self.t0).abs() > tol || (g.end() - self.t1).abs() > tol {
            return Err(Error::Grid(format!(
                "{} spans [{}, {}], subproblem is [{}, {}]",
                what,
                to_f64(g.start()),
                to_f64(g.end()),
                to_f64(self.t0),
                to_f64(self.t1)
            )));
        }
        Ok(())
    }
}

struct Scratch<T: Real> {
    u: DVector<T>,
    x: DVector<T>,
}

/// ẋ = A x + B u(t) + C d(t)
struct StateSystem<'a, T: Real> {
    problem: &'a LqProblem<T>,
    u: &'a Trajectory<T>,
    with_d: bool,
    scratch: RefCell<Scratch<T>>,
}

impl<T: Real> OdeSystem<T> for StateSystem<'_, T> {
    fn dim(&self) -> usize {
        self.problem.nx()
    }

    fn rhs(&self, t: T, y: &DVector<T>, dy: &mut DVector<T>) {
        let p = self.problem;
        let mut s = self.scratch.borrow_mut();
        self.u.sample_into(t, &mut s.u);
        dy.gemv(T::one(), &p.a.eval(t), y, T::zero());
        dy.gemv(T::one(), &p.b.eval(t), &s.u, T::one());
        if self.with_d {
            dy.gemv(T::one(), &p.c.eval(t), &p.d.eval(t).column(0), T::one());
        }
    }

    fn affine(&self, t: T) -> Option<(DMatrix<T>, DVector<T>)> {
        let p = self.problem;
        let mut b = &*p.b.eval(t) * self.u.sample(t);
        if self.with_d {
            b += &*p.c.eval(t) * p.d_at(t);
        }
        Some((p.a.eval(t).into_owned(), b))
    }
}

/// λ̇ = −Aᵀλ − Q x(t) − Hᵀ u(t) − Gᵀ d(t)
struct AdjointSystem<'a, T: Real> {
    problem: &'a LqProblem<T>,
    x: &'a Trajectory<T>,
    u: &'a Trajectory<T>,
    with_d: bool,
    scratch: RefCell<Scratch<T>>,
}

impl<T: Real> OdeSystem<T> for AdjointSystem<'_, T> {
    fn dim(&self) -> usize {
        self.problem.nx()
    }

    fn rhs(&self, t: T, y: &DVector<T>, dy: &mut DVector<T>) {
        let p = self.problem;
        let mut s = self.scratch.borrow_mut();
        let Scratch { u, x } = &mut *s;
        self.x.sample_into(t, x);
        self.u.sample_into(t, u);
        let m1 = -T::one();
        dy.gemv_tr(m1, &p.a.eval(t), y, T::zero());
        dy.gemv(m1, &p.q.eval(t), x, T::one());
        dy.gemv_tr(m1, &p.h.eval(t), u, T::one());
        if self.with_d {
            dy.gemv_tr(m1, &p.g.eval(t), &p.d.eval(t).column(0), T::one());
        }
    }

    fn affine(&self, t: T) -> Option<(DMatrix<T>, DVector<T>)> {
        let p = self.problem;
        let x = self.x.sample(t);
        let u = self.u.sample(t);
        let mut b = -(&*p.q.eval(t) * x) - p.h.eval(t).transpose() * u;
        if self.with_d {
            b -= p.g.eval(t).transpose() * p.d_at(t);
        }
        Some((-p.a.eval(t).transpose(), b))
    }
}

fn scratch<T: Real>(p: &LqProblem<T>) -> RefCell<Scratch<T>> {
    RefCell::new(Scratch { u: DVector::zeros(p.nu()), x: DVector::zeros(p.nx()) })
}

/// State trajectory from `x(t0) = p` under control `u` (linear between nodes).
pub fn forward_state<T: Real>(
    spec: &SubproblemSpec<T>,
    u: &Trajectory<T>,
    cfg: &IntegratorConfig<T>,
) -> Result<Trajectory<T>> {
    spec.check_grid(u, "control")?;
    let p = &spec.problem;
    if u.dim() != p.nu() {
        return Err(Error::Dimension(format!("control has dimension {}, expected {}", u.dim(), p.nu())));
    }
    let sys = StateSystem { problem: p, u, with_d: !(p.c.is_zero() || p.d.is_zero()), scratch: scratch(p) };
    integrate_ivp(&sys, &spec.p, u.grid(), cfg, Direction::Forward)
}

/// Adjoint trajectory, terminal value `Q_T x(t1) + G_Tᵀ d_T`.
pub fn backward_adjoint<T: Real>(
    spec: &SubproblemSpec<T>,
    x: &Trajectory<T>,
    u: &Trajectory<T>,
    cfg: &IntegratorConfig<T>,
) -> Result<Trajectory<T>> {
    spec.check_grid(x, "state")?;
    spec.check_grid(u, "control")?;
    if x.len() != u.len() {
        return Err(Error::Dimension("state and control live on different grids".into()));
    }
    let p = &spec.problem;
    let terminal = &p.q_t * x.last() + p.terminal_linear();
    let sys = AdjointSystem {
        problem: p,
        x,
        u,
        with_d: !(p.g.is_zero() || p.d.is_zero()),
        scratch: scratch(p),
    };
    integrate_ivp(&sys, &terminal, x.grid(), cfg, Direction::Backward)
}

/// `g = H x + R u + Wᵀ d + Bᵀ λ` at the nodes.
fn gradient_from<T: Real>(
    p: &LqProblem<T>,
    x: &Trajectory<T>,
    u: &Trajectory<T>,
    lam: &Trajectory<T>,
) -> Result<Trajectory<T>> {
    let with_d = !(p.w.is_zero() || p.d.is_zero());
    let nodes = x.grid().nodes();
    let mut out = Vec::with_capacity(nodes.len());
    for (i, &t) in nodes.iter().enumerate() {
        let mut g = &*p.r.eval(t) * &u.values()[i];
        g.gemv(T::one(), &p.h.eval(t), &x.values()[i], T::one());
        g.gemv_tr(T::one(), &p.b.eval(t), &lam.values()[i], T::one());
        if with_d {
            g.gemv_tr(T::one(), &p.w.eval(t), &p.d.eval(t).column(0), T::one());
        }
        out.push(g);
    }
    Trajectory::new(x.grid().clone(), out)
}

/// Functional gradient of the reduced objective at `u`.
pub fn functional_gradient<T: Real>(
    spec: &SubproblemSpec<T>,
    u: &Trajectory<T>,
    cfg: &IntegratorConfig<T>,
) -> Result<Trajectory<T>> {
    let x = forward_state(spec, u, cfg)?;
    let lam = backward_adjoint(spec, &x, u, cfg)?;
    gradient_from(&spec.problem, &x, u, &lam)
}

fn trapezoid_cost<T: Real>(p: &LqProblem<T>, x: &Trajectory<T>, u: &Trajectory<T>) -> T {
    let nodes = x.grid().nodes();
    let half = lit::<T>(0.5);
    let mut total = T::zero();
    let mut prev = p.running_cost(nodes[0], &x.values()[0], &u.values()[0]);
    for i in 1..nodes.len() {
        let cur = p.running_cost(nodes[i], &x.values()[i], &u.values()[i]);
        total += half * (nodes[i] - nodes[i - 1]) * (prev + cur);
        prev = cur;
    }
    total + p.terminal_cost(x.last())
}

/// Trapezoid running cost plus terminal cost along `(x(u), u)`.
pub fn objective_value<T: Real>(spec: &SubproblemSpec<T>, u: &Trajectory<T>, cfg: &IntegratorConfig<T>) -> Result<T> {
    let x = forward_state(spec, u, cfg)?;
    Ok(trapezoid_cost(&spec.problem, &x, u))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GdConfig<T> {
    pub eta: T,
    pub grad_tol: T,
    pub max_iters: usize,
    pub integrator: IntegratorConfig<T>,
    /// Halve the step until the objective decreases.
    pub backtracking: bool,
}

impl<T: Real> GdConfig<T> {
    pub fn new(integrator: IntegratorConfig<T>) -> Self {
        GdConfig { eta: lit(1e-2), grad_tol: lit(1e-6), max_iters: 20_000, integrator, backtracking: false }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta > T::zero()) || !(self.grad_tol > T::zero()) {
            return Err(Error::InvalidArgument("step size and gradient tolerance must be positive".into()));
        }
        if self.max_iters == 0 {
            return Err(Error::InvalidArgument("max_iters must be positive".into()));
        }
        self.integrator.validate()
    }
}

#[derive(Clone, Debug)]
pub struct SubproblemSolution<T: Real> {
    pub x: Trajectory<T>,
    pub u: Trajectory<T>,
    pub lambda: Trajectory<T>,
    pub iterations: usize,
    /// Sup over nodes of ‖g‖ at the returned iterate.
    pub grad_norm: T,
    pub converged: bool,
}

fn sup_norm<T: Real>(g: &Trajectory<T>) -> T {
    g.max_norm()
}

fn l2_squared<T: Real>(g: &Trajectory<T>) -> T {
    let nodes = g.grid().nodes();
    let half = lit::<T>(0.5);
    let v = g.values();
    (1..nodes.len()).fold(T::zero(), |a, i| {
        a + half * (nodes[i] - nodes[i - 1]) * (v[i].norm_squared() + v[i - 1].norm_squared())
    })
}

struct Sweep<T: Real> {
    x: Trajectory<T>,
    lambda: Trajectory<T>,
    g: Trajectory<T>,
    gnorm: T,
}

fn sweep<T: Real>(spec: &SubproblemSpec<T>, u: &Trajectory<T>, cfg: &IntegratorConfig<T>) -> Result<Sweep<T>> {
    let x = forward_state(spec, u, cfg)?;
    let lambda = backward_adjoint(spec, &x, u, cfg)?;
    let g = gradient_from(&spec.problem, &x, u, &lambda)?;
    let gnorm = sup_norm(&g);
    if !gnorm.is_finite() {
        return Err(Error::Stiffness { t: to_f64(spec.t0), method: cfg.method.name() });
    }
    Ok(Sweep { x, lambda, g, gnorm })
}

/// Gradient descent `u ← u − η g` until `‖g‖_∞ ≤ grad_tol` or `max_iters`.
///
/// On non-convergence the iterate with the smallest gradient seen (among
/// the ones kept) is returned with `converged = false`.
pub fn solve_subproblem<T: Real>(
    spec: &SubproblemSpec<T>,
    u0: &Trajectory<T>,
    gd: &GdConfig<T>,
) -> Result<SubproblemSolution<T>> {
    gd.validate()?;
    let cfg = &gd.integrator;
    let mut u = u0.clone();
    let mut cur = sweep(spec, &u, cfg)?;
    let mut best: Option<(T, Trajectory<T>)> = None;
    let mut eta = gd.eta;
    let mut iterations = 0;
    loop {
        if cur.gnorm <= gd.grad_tol || iterations >= gd.max_iters {
            break;
        }
        // keep a copy only on substantial improvement to limit cloning
        if best.as_ref().map_or(true, |(b, _)| cur.gnorm < *b * lit::<T>(0.5)) {
            best = Some((cur.gnorm, u.clone()));
        }
        if gd.backtracking {
            let j0 = trapezoid_cost(&spec.problem, &cur.x, &u);
            let slope = l2_squared(&cur.g);
            loop {
                let trial = step(&u, &cur.g, eta)?;
                let j1 = objective_value(spec, &trial, cfg)?;
                if j1 <= j0 - lit::<T>(1e-4) * eta * slope || eta < gd.eta * lit::<T>(1e-8) {
                    u = trial;
                    break;
                }
                eta *= lit::<T>(0.5);
            }
        } else {
            for (ui, gi) in u.values_mut().iter_mut().zip(cur.g.values()) {
                ui.axpy(-eta, gi, T::one());
            }
        }
        iterations += 1;
        cur = sweep(spec, &u, cfg)?;
    }
    let converged = cur.gnorm <= gd.grad_tol;
    if !converged {
        if let Some((b, bu)) = best {
            if b < cur.gnorm {
                u = bu;
                cur = sweep(spec, &u, cfg)?;
            }
        }
    }
    Ok(SubproblemSolution { x: cur.x, u, lambda: cur.lambda, iterations, grad_norm: cur.gnorm, converged })
}

fn step<T: Real>(u: &Trajectory<T>, g: &Trajectory<T>, eta: T) -> Result<Trajectory<T>> {
    u.map(|i, v| v - &g.values()[i] * eta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ltv_model::MatrixFunction;
    use crate::ode::{Method, TimeGrid};
    use approx::assert_abs_diff_eq;

    fn diag(a: f64, b: f64) -> MatrixFunction<f64> {
        MatrixFunction::constant(DMatrix::from_diagonal(&DVector::from_vec(vec![a, b])))
    }

    fn problem(a: MatrixFunction<f64>, x0: [f64; 2]) -> LqProblem<f64> {
        LqProblem::classic(
            1.0,
            a,
            MatrixFunction::identity(2),
            MatrixFunction::identity(2),
            MatrixFunction::zeros(2, 2),
            MatrixFunction::identity(2),
            DMatrix::identity(2, 2),
            DVector::from_row_slice(&x0),
        )
        .unwrap()
    }

    fn rk4() -> IntegratorConfig<f64> {
        IntegratorConfig::fixed(Method::Rk4, 1e-3)
    }

    #[test]
    fn forward_state_examples() {
        let grid = TimeGrid::with_step(0.0, 1.0, 1e-2).unwrap();
        let p = problem(diag(-1.0, -4.0), [1.0, 1.0]);
        let spec = SubproblemSpec::full(&p).unwrap();
        let x = forward_state(&spec, &Trajectory::zeros(grid.clone(), 2), &rk4()).unwrap();
        for (v, &t) in x.values().iter().zip(grid.nodes()) {
            assert_abs_diff_eq!(v[0], (-t).exp(), epsilon = 1e-10);
            assert_abs_diff_eq!(v[1], (-4.0 * t).exp(), epsilon = 1e-10);
        }
        let p = problem(MatrixFunction::zeros(2, 2), [0.0, 0.0]);
        let spec = SubproblemSpec::full(&p).unwrap();
        let u = Trajectory::constant(grid.clone(), &DVector::from_element(2, 1.0));
        let x = forward_state(&spec, &u, &rk4()).unwrap();
        for (v, &t) in x.values().iter().zip(grid.nodes()) {
            assert_abs_diff_eq!(v[0], t, epsilon = 1e-12);
        }
    }

    #[test]
    fn adjoint_terminal_and_constant_forcing() {
        let p = problem(MatrixFunction::zeros(2, 2), [1.0, 2.0]);
        let q = DVector::from_vec(vec![1.0, 2.0]);
        let spec = SubproblemSpec::new(&p, 0.0, 0.5, q.clone(), q.clone(), false).unwrap();
        let grid = TimeGrid::with_step(0.0, 0.5, 1e-2).unwrap();
        let x = Trajectory::constant(grid.clone(), &q);
        let u = Trajectory::zeros(grid.clone(), 2);
        let lam = backward_adjoint(&spec, &x, &u, &rk4()).unwrap();
        for (v, &t) in lam.values().iter().zip(grid.nodes()) {
            assert_abs_diff_eq!(v[0], 0.5 - t, epsilon = 1e-12);
            assert_abs_diff_eq!(v[1], 2.0 * (0.5 - t), epsilon = 1e-12);
        }
        let full = SubproblemSpec::full(&p).unwrap();
        let grid = TimeGrid::with_step(0.0, 1.0, 1e-2).unwrap();
        let x = Trajectory::constant(grid.clone(), &DVector::from_vec(vec![3.0, 4.0]));
        let lam = backward_adjoint(&full, &x, &Trajectory::zeros(grid, 2), &rk4()).unwrap();
        assert_eq!(lam.last().as_slice(), &[3.0, 4.0]);
    }

    #[test]
    fn decoupled_gradient_is_control() {
        let mut p = problem(diag(-1.0, -1.0), [1.0, 0.0]);
        p.b = MatrixFunction::zeros(2, 2);
        let spec = SubproblemSpec::full(&p).unwrap();
        let grid = TimeGrid::with_step(0.0, 1.0, 0.1).unwrap();
        let u = Trajectory::from_fn(grid, 2, |_, t: f64| DVector::from_vec(vec![t.sin(), 1.0])).unwrap();
        let g = functional_gradient(&spec, &u, &rk4()).unwrap();
        assert_eq!(g.max_diff(&u).unwrap(), 0.0);
    }

    #[test]
    fn objective_examples() {
        let p = problem(MatrixFunction::zeros(2, 2), [0.0, 0.0]);
        let spec = SubproblemSpec::new(&p, 0.0, 1.0, DVector::zeros(2), DVector::zeros(2), false).unwrap();
        let grid = TimeGrid::with_step(0.0, 1.0, 0.1).unwrap();
        let u = Trajectory::zeros(grid.clone(), 2);
        assert_eq!(objective_value(&spec, &u, &rk4()).unwrap(), 0.0);
        let p = problem(MatrixFunction::zeros(2, 2), [1.0, 0.0]);
        let spec = SubproblemSpec::full(&p).unwrap();
        assert_abs_diff_eq!(objective_value(&spec, &u, &rk4()).unwrap(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn gradient_descent_reaches_riccati_solution() {
        let p = problem(diag(-1.0, 0.5), [1.0, -1.0]);
        let grid = TimeGrid::with_step(0.0, 1.0, 1e-2).unwrap();
        let cfg = IntegratorConfig::fixed(Method::Rk4, 1e-2);
        let mut gd = GdConfig::new(cfg);
        gd.eta = 0.3;
        let spec = SubproblemSpec::full(&p).unwrap();
        let sol = solve_subproblem(&spec, &Trajectory::zeros(grid.clone(), 2), &gd).unwrap();
        assert!(sol.converged);
        let ric = crate::riccati::solve_riccati_full(&p, &grid, &cfg).unwrap();
        let exact = crate::riccati::closed_loop_solution(&p, &ric, &grid, &cfg).unwrap();
        assert!(sol.u.max_diff(&exact.u).unwrap() < 1e-5);
        assert!(sol.lambda.max_diff(&exact.lambda).unwrap() < 1e-5);
        // restarting from the optimum needs no work
        let again = solve_subproblem(&spec, &sol.u, &gd).unwrap();
        assert_eq!(again.iterations, 0);
    }

    #[test]
    fn budget_returns_best_iterate() {
        let p = problem(diag(-1.0, -1.0), [1.0, 1.0]);
        let grid = TimeGrid::with_step(0.0, 1.0, 1e-2).unwrap();
        let mut gd = GdConfig::new(IntegratorConfig::fixed(Method::ForwardEuler, 1e-2));
        gd.max_iters = 3;
        let spec = SubproblemSpec::full(&p).unwrap();
        let sol = solve_subproblem(&spec, &Trajectory::zeros(grid, 2), &gd).unwrap();
        assert!(!sol.converged);
        assert_eq!(sol.iterations, 3);
    }

    #[test]
    fn backtracking_descends() {
        let p = problem(diag(-1.0, -1.0), [1.0, 1.0]);
        let grid = TimeGrid::with_step(0.0, 1.0, 1e-2).unwrap();
        let mut gd = GdConfig::new(IntegratorConfig::fixed(Method::Rk4, 1e-2));
        gd.eta = 10.0;
        gd.backtracking = true;
        gd.max_iters = 500;
        let spec = SubproblemSpec::full(&p).unwrap();
        let u0 = Trajectory::zeros(grid, 2);
        let j0 = objective_value(&spec, &u0, &gd.integrator).unwrap();
        let sol = solve_subproblem(&spec, &u0, &gd).unwrap();
        assert!(objective_value(&spec, &sol.u, &gd.integrator).unwrap() < j0);
    }

    #[test]
    fn rejects_wrong_grid() {
        let p = problem(diag(-1.0, -1.0), [1.0, 1.0]);
        let spec = SubproblemSpec::full(&p).unwrap();
        let u = Trajectory::zeros(TimeGrid::with_step(0.0, 0.5, 0.1).unwrap(), 2);
        assert!(matches!(forward_state(&spec, &u, &rk4()), Err(Error::Grid(_))));
    }
}
