//! Full-horizon reference solutions: the forward-Euler transcription solved
//! through its KKT system, and the Riccati closed-loop route.

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::ltv_model::LqProblem;
use crate::ode::{IntegratorConfig, TimeGrid, Trajectory};
use crate::riccati::{closed_loop_solution, solve_riccati_full, Solution};
use crate::scalar::{lit, to_f64, Real};

/// Band matrix in LAPACK `gbtrf` layout with room for pivoting fill-in.
struct Banded<T> {
    n: usize,
    kl: usize,
    ku: usize,
    /// column-major, `ld = 2 kl + ku + 1` entries per column
    data: Vec<T>,
}

impl<T: Real> Banded<T> {
    fn zeros(n: usize, kl: usize, ku: usize) -> Self {
        Banded { n, kl, ku, data: vec![T::zero(); n * (2 * kl + ku + 1)] }
    }

    fn ld(&self) -> usize {
        2 * self.kl + self.ku + 1
    }

    fn idx(&self, i: usize, j: usize) -> usize {
        debug_assert!(i + self.kl + self.ku >= j && j + self.kl >= i);
        j * self.ld() + (self.kl + self.ku + i - j)
    }

    fn get(&self, i: usize, j: usize) -> T {
        self.data[self.idx(i, j)]
    }

    fn add(&mut self, i: usize, j: usize, v: T) {
        let k = self.idx(i, j);
        self.data[k] += v;
    }

    /// In-place LU with partial pivoting, then solves for `b`.
    fn solve(mut self, b: &mut [T]) -> Result<()> {
        let (n, kl) = (self.n, self.kl);
        let reach = self.kl + self.ku;
        for k in 0..n {
            let last = (k + kl).min(n - 1);
            let mut p = k;
            let mut best = self.get(k, k).abs();
            for i in k + 1..=last {
                let v = self.get(i, k).abs();
                if v > best {
                    best = v;
                    p = i;
                }
            }
            if best == T::zero() || !best.is_finite() {
                return Err(Error::SingularKkt(k));
            }
            let cmax = (k + reach).min(n - 1);
            if p != k {
                for j in k..=cmax {
                    let (a, c) = (self.idx(k, j), self.idx(p, j));
                    self.data.swap(a, c);
                }
                b.swap(k, p);
            }
            let piv = self.get(k, k);
            for i in k + 1..=last {
                let f = self.get(i, k) / piv;
                if f == T::zero() {
                    continue;
                }
                let ik = self.idx(i, k);
                self.data[ik] = f;
                for j in k + 1..=cmax {
                    let v = self.get(k, j);
                    if v != T::zero() {
                        self.add(i, j, -f * v);
                    }
                }
                b[i] = b[i] - f * b[k];
            }
        }
        for k in (0..n).rev() {
            let cmax = (k + reach).min(n - 1);
            let mut s = b[k];
            for j in k + 1..=cmax {
                s -= self.get(k, j) * b[j];
            }
            b[k] = s / self.get(k, k);
        }
        Ok(())
    }
}

/// Sparse triplets of the KKT matrix, kept for the residual check.
struct Triplets<T> {
    n: usize,
    entries: Vec<(usize, usize, T)>,
}

impl<T: Real> Triplets<T> {
    fn push(&mut self, i: usize, j: usize, v: T) {
        if v != T::zero() {
            self.entries.push((i, j, v));
        }
    }

    fn block(&mut self, r0: usize, c0: usize, m: &nalgebra::DMatrix<T>, scale: T) {
        for c in 0..m.ncols() {
            for r in 0..m.nrows() {
                self.push(r0 + r, c0 + c, m[(r, c)] * scale);
            }
        }
    }

    fn diag(&mut self, r0: usize, c0: usize, n: usize, v: T) {
        for k in 0..n {
            self.push(r0 + k, c0 + k, v);
        }
    }

    fn bands(&self) -> (usize, usize) {
        self.entries.iter().fold((0, 0), |(kl, ku), &(i, j, _)| {
            if i > j {
                (kl.max(i - j), ku)
            } else {
                (kl, ku.max(j - i))
            }
        })
    }

    fn apply(&self, z: &[T]) -> Vec<T> {
        let mut out = vec![T::zero(); self.n];
        for &(i, j, v) in &self.entries {
            out[i] += v * z[j];
        }
        out
    }
}

/// Direct solution of the discretized problem.
#[derive(Clone, Debug)]
pub struct DirectSolution<T: Real> {
    pub solution: Solution<T>,
    /// Discrete objective (left-rectangle running cost plus terminal cost).
    pub objective: T,
    /// Max-abs residual of the KKT system at the computed solution.
    pub kkt_residual: T,
}

/// Forward-Euler transcription on a uniform grid, solved through its KKT
/// system.
///
/// Decision variables are `x_0..x_N`, `u_0..u_{N-1}`; the constraints are
/// `x_0 = d0` and `x_{i+1} = x_i + h(A_i x_i + B_i u_i + C_i d_i)`. With the
/// multiplier `ν_{i+1}` attached to `x_i + h f_i − x_{i+1}` (the multiplier of
/// the difference quotient divided by `h`), the discrete adjoint recursion
/// `ν_i = ν_{i+1} + h(A_iᵀν_{i+1} + Q_i x_i + H_iᵀu_i + G_iᵀd_i)` steps from
/// `t_{i+1}` back to `t_i`, so `λ_i = ν_i` for `i ≥ 1`; `λ_0` is the
/// multiplier of the initial condition. `u_N` is filled in by the feedback
/// law `R u = −(H x + Bᵀλ + Wᵀd)` at `t_N`.
pub fn solve_full_direct<T: Real>(problem: &LqProblem<T>, grid: &TimeGrid<T>) -> Result<DirectSolution<T>> {
    let nodes = grid.nodes();
    let nsteps = grid.len() - 1;
    let h = grid.span() / lit::<T>(nsteps as f64);
    let uniform_tol = lit::<T>(1e-9) * h;
    if nodes.windows(2).any(|w| ((w[1] - w[0]) - h).abs() > uniform_tol) {
        return Err(Error::Grid("the direct transcription needs a uniform grid".into()));
    }
    let tol = lit::<T>(1e-12) * (T::one() + problem.t_end.abs());
    if (grid.start() - problem.t_start).abs() > tol || (grid.end() - problem.t_end).abs() > tol {
        return Err(Error::Grid("grid does not span the problem horizon".into()));
    }
    let (n, m) = (problem.nx(), problem.nu());
    let s = 2 * n + m;
    // unknowns per stage i < N: (λ_i, x_i, u_i); last stage: (λ_N, x_N)
    let lam = |i: usize| i * s;
    let xs = |i: usize| i * s + n;
    let us = |i: usize| i * s + 2 * n;
    let dim = nsteps * s + 2 * n;
    let mut trip = Triplets { n: dim, entries: Vec::new() };
    let mut rhs = vec![T::zero(); dim];
    let one = T::one();
    let with_d = !problem.d.is_zero();

    // initial condition
    trip.diag(0, xs(0), n, one);
    for k in 0..n {
        rhs[k] = problem.d0[k];
    }
    for i in 0..nsteps {
        let t = nodes[i];
        let r0 = n + i * s;
        let a = problem.a.eval(t);
        let b = problem.b.eval(t);
        let q = problem.q.eval(t);
        let hm = problem.h.eval(t);
        let r = problem.r.eval(t);
        let d = if with_d { Some(problem.d_at(t)) } else { None };
        // x_i stationarity: −λ_i + (I + hAᵀ)λ_{i+1} + h(Q x_i + Hᵀ u_i) = −h Gᵀ d
        trip.diag(r0, lam(i), n, -one);
        trip.diag(r0, lam(i + 1), n, one);
        trip.block(r0, lam(i + 1), &a.transpose(), h);
        trip.block(r0, xs(i), &q, h);
        trip.block(r0, us(i), &hm.transpose(), h);
        // u_i stationarity: R u_i + H x_i + Bᵀ λ_{i+1} = −Wᵀ d
        let r1 = r0 + n;
        trip.block(r1, us(i), &r, one);
        trip.block(r1, xs(i), &hm, one);
        trip.block(r1, lam(i + 1), &b.transpose(), one);
        // dynamics: (I + hA) x_i + h B u_i − x_{i+1} = −h C d
        let r2 = r1 + m;
        trip.diag(r2, xs(i), n, one);
        trip.block(r2, xs(i), &a, h);
        trip.block(r2, us(i), &b, h);
        trip.diag(r2, xs(i + 1), n, -one);
        if let Some(d) = d {
            let gd = problem.g.eval(t).transpose() * &d * h;
            let wd = problem.w.eval(t).transpose() * &d;
            let cd = &*problem.c.eval(t) * &d * h;
            for k in 0..n {
                rhs[r0 + k] = -gd[k];
                rhs[r2 + k] = -cd[k];
            }
            for k in 0..m {
                rhs[r1 + k] = -wd[k];
            }
        }
    }
    // x_N stationarity: Q_T x_N − λ_N = −G_Tᵀ d_T
    let rn = n + nsteps * s;
    trip.block(rn, xs(nsteps), &problem.q_t, one);
    trip.diag(rn, lam(nsteps), n, -one);
    let tl = problem.terminal_linear();
    for k in 0..n {
        rhs[rn + k] = -tl[k];
    }

    let (kl, ku) = trip.bands();
    let mut band = Banded::zeros(dim, kl, ku);
    for &(i, j, v) in &trip.entries {
        band.add(i, j, v);
    }
    let mut z = rhs.clone();
    band.solve(&mut z)?;
    let kkt_residual = trip.apply(&z).iter().zip(&rhs).fold(T::zero(), |a, (p, q)| a.max((*p - *q).abs()));

    let slice = |o: usize, len: usize| DVector::from_column_slice(&z[o..o + len]);
    let x: Vec<_> = (0..=nsteps).map(|i| slice(xs(i), n)).collect();
    let l: Vec<_> = (0..=nsteps).map(|i| slice(lam(i), n)).collect();
    let mut u: Vec<_> = (0..nsteps).map(|i| slice(us(i), m)).collect();
    let tn = nodes[nsteps];
    let mut rhs_u = &*problem.h.eval(tn) * &x[nsteps] + problem.b.eval(tn).transpose() * &l[nsteps];
    if with_d {
        rhs_u += problem.w.eval(tn).transpose() * problem.d_at(tn);
    }
    let r_n = problem.r.eval(tn).into_owned();
    let u_n = r_n.lu().solve(&(-rhs_u)).ok_or(Error::SingularKkt(dim))?;
    u.push(u_n);

    let mut objective = problem.terminal_cost(&x[nsteps]);
    for i in 0..nsteps {
        objective += h * problem.running_cost(nodes[i], &x[i], &u[i]);
    }
    if !objective.is_finite() {
        return Err(Error::SingularKkt(dim));
    }
    Ok(DirectSolution {
        solution: Solution {
            x: Trajectory::new(grid.clone(), x)?,
            u: Trajectory::new(grid.clone(), u)?,
            lambda: Trajectory::new(grid.clone(), l)?,
        },
        objective,
        kkt_residual,
    })
}

/// Closed-loop solution through the Riccati and vector equations.
pub fn solve_full_riccati<T: Real>(
    problem: &LqProblem<T>,
    grid: &TimeGrid<T>,
    cfg: &IntegratorConfig<T>,
) -> Result<Solution<T>> {
    let ric = solve_riccati_full(problem, grid, cfg)?;
    closed_loop_solution(problem, &ric, grid, cfg)
}

/// Max-norm distance between the two routes.
pub fn cross_check<T: Real>(direct: &Solution<T>, riccati: &Solution<T>) -> Result<f64> {
    Ok(to_f64(direct.distance(riccati)?))
}
