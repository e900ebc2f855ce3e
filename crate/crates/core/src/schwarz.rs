//! Overlapping Schwarz iteration in time: partitions, boundary updates,
//! parallel subdomain solves, aggregation and convergence statistics.

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::ltv_model::LqProblem;
use crate::ode::{TimeGrid, Trajectory};
use crate::pmp::{solve_subproblem, GdConfig, SubproblemSpec};
use crate::riccati::Solution;
use crate::scalar::{lit, to_f64, Real};

/// Breakpoints `t_0 < … < t_m` and per-subdomain overlaps.
#[derive(Clone, Debug, PartialEq)]
pub struct PartitionSpec<T> {
    pub breakpoints: Vec<T>,
    pub tau0: Vec<T>,
    pub tau1: Vec<T>,
}

impl<T: Real> PartitionSpec<T> {
    pub fn m(&self) -> usize {
        self.breakpoints.len() - 1
    }

    /// `[t_j^0, t_j^1]` of subdomain `j` (zero based).
    pub fn subdomain(&self, j: usize) -> (T, T) {
        let (t0, tm) = (self.breakpoints[0], self.breakpoints[self.m()]);
        ((self.breakpoints[j] - self.tau0[j]).max(t0), (self.breakpoints[j + 1] + self.tau1[j]).min(tm))
    }

    /// Smallest overlap that actually reaches into a neighbour.
    pub fn min_overlap(&self) -> T {
        let m = self.m();
        let mut tau = lit::<T>(f64::INFINITY);
        for j in 0..m {
            if j > 0 {
                tau = tau.min(self.tau0[j]);
            }
            if j + 1 < m {
                tau = tau.min(self.tau1[j]);
            }
        }
        tau
    }
}

/// Uniform partition of `[0, horizon]` with overlaps `fraction · horizon/m`.
pub fn build_partition<T: Real>(horizon: T, m: usize, fraction: T) -> Result<PartitionSpec<T>> {
    if m == 0 {
        return Err(Error::Partition("need at least one subdomain".into()));
    }
    if !(horizon > T::zero()) {
        return Err(Error::Partition("horizon must be positive".into()));
    }
    if m > 1 && !(fraction > T::zero() && fraction.is_finite()) {
        return Err(Error::Partition(format!("overlap fraction {} must be positive", to_f64(fraction))));
    }
    let len = horizon / lit::<T>(m as f64);
    let breakpoints: Vec<T> = (0..=m).map(|j| if j == m { horizon } else { len * lit::<T>(j as f64) }).collect();
    let tau = if m == 1 { T::zero() } else { fraction * len };
    let part = PartitionSpec { breakpoints, tau0: vec![tau; m], tau1: vec![tau; m] };
    for j in 0..m {
        let (a, b) = part.subdomain(j);
        if !(a < b) {
            return Err(Error::Partition(format!("subdomain {} is empty", j + 1)));
        }
    }
    Ok(part)
}

/// A partition whose breakpoints and subdomain ends are grid nodes.
#[derive(Clone, Debug, PartialEq)]
pub struct Layout<T: Real> {
    pub grid: TimeGrid<T>,
    /// Snapped partition (overlaps adjusted to the grid).
    pub partition: PartitionSpec<T>,
    pub breaks: Vec<usize>,
    pub lo: Vec<usize>,
    pub hi: Vec<usize>,
}

impl<T: Real> Layout<T> {
    /// Snaps every `t_j`, `t_j^0`, `t_j^1` to the nearest node of `grid`.
    pub fn new(partition: &PartitionSpec<T>, grid: &TimeGrid<T>) -> Result<Self> {
        let m = partition.m();
        let tol = lit::<T>(1e-9) * (T::one() + grid.span());
        if (grid.start() - partition.breakpoints[0]).abs() > tol || (grid.end() - partition.breakpoints[m]).abs() > tol {
            return Err(Error::Partition("grid and partition cover different intervals".into()));
        }
        let breaks: Vec<usize> = partition.breakpoints.iter().map(|&t| grid.nearest(t)).collect();
        if breaks.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Partition("grid too coarse for the partition".into()));
        }
        let mut lo = Vec::with_capacity(m);
        let mut hi = Vec::with_capacity(m);
        for j in 0..m {
            let (a, b) = partition.subdomain(j);
            let (ia, ib) = (grid.nearest(a).min(breaks[j]), grid.nearest(b).max(breaks[j + 1]));
            lo.push(ia);
            hi.push(ib);
        }
        let nodes = grid.nodes();
        let snapped = PartitionSpec {
            breakpoints: breaks.iter().map(|&i| nodes[i]).collect(),
            tau0: (0..m).map(|j| nodes[breaks[j]] - nodes[lo[j]]).collect(),
            tau1: (0..m).map(|j| nodes[hi[j]] - nodes[breaks[j + 1]]).collect(),
        };
        Ok(Layout { grid: grid.clone(), partition: snapped, breaks, lo, hi })
    }

    pub fn m(&self) -> usize {
        self.breaks.len() - 1
    }

    /// Node range `(first, last)` that subdomain `j` contributes to the
    /// aggregate: `(t_{j-1}, t_j]`, with `t = 0` going to the first one.
    pub fn owned_nodes(&self, j: usize) -> (usize, usize) {
        let first = if j == 0 { 0 } else { self.breaks[j] + 1 };
        (first, self.breaks[j + 1])
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SubdomainStatus<T> {
    pub converged: bool,
    pub iterations: usize,
    pub grad_norm: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SchwarzIterate<T: Real> {
    pub x: Trajectory<T>,
    pub u: Trajectory<T>,
    pub lambda: Trajectory<T>,
    pub k: usize,
    pub subdomain_flags: Vec<SubdomainStatus<T>>,
}

impl<T: Real> SchwarzIterate<T> {
    /// `x ≡ x0`, `u ≡ 0`, `λ ≡ 0`.
    pub fn initial(problem: &LqProblem<T>, grid: &TimeGrid<T>) -> Self {
        SchwarzIterate {
            x: Trajectory::constant(grid.clone(), &problem.d0),
            u: Trajectory::zeros(grid.clone(), problem.nu()),
            lambda: Trajectory::zeros(grid.clone(), problem.nx()),
            k: 0,
            subdomain_flags: Vec::new(),
        }
    }

    pub fn from_solution(sol: &Solution<T>) -> Self {
        SchwarzIterate { x: sol.x.clone(), u: sol.u.clone(), lambda: sol.lambda.clone(), k: 0, subdomain_flags: Vec::new() }
    }

    pub fn to_solution(&self) -> Solution<T> {
        Solution { x: self.x.clone(), u: self.u.clone(), lambda: self.lambda.clone() }
    }
}

/// `p_j = x(t_j^0)` (`x0` for the first), `q_j = x(t_j^1) − Q(t_j^1)⁻¹ λ(t_j^1)`
/// (zero for the last, which keeps the original terminal cost).
pub fn update_boundary_params<T: Real>(
    iterate: &SchwarzIterate<T>,
    layout: &Layout<T>,
    problem: &LqProblem<T>,
) -> Result<Vec<(DVector<T>, DVector<T>)>> {
    let m = layout.m();
    let nodes = layout.grid.nodes();
    if iterate.x.len() != nodes.len() {
        return Err(Error::Dimension("iterate does not live on the layout grid".into()));
    }
    let mut out = Vec::with_capacity(m);
    for j in 0..m {
        let p = if j == 0 { problem.d0.clone() } else { iterate.x.values()[layout.lo[j]].clone() };
        let q = if j + 1 == m {
            DVector::zeros(problem.nx())
        } else {
            let i = layout.hi[j];
            let qm = problem.q.eval(nodes[i]).into_owned();
            let step = qm.lu().solve(&iterate.lambda.values()[i]).ok_or_else(|| {
                Error::InvalidArgument(format!("Q is singular at t = {}", to_f64(nodes[i])))
            })?;
            &iterate.x.values()[i] - step
        };
        out.push((p, q));
    }
    Ok(out)
}

/// Where the initial control of a subdomain solve comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ControlInit {
    /// Restriction of the previous outer iterate.
    Warm,
    /// Independent standard normal samples per node and component.
    Normal { seed: u64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SchwarzOptions {
    pub parallel: bool,
    /// Control initialization of the first outer iteration.
    pub first: ControlInit,
    /// Control initialization of later outer iterations.
    pub later: ControlInit,
}

impl Default for SchwarzOptions {
    fn default() -> Self {
        SchwarzOptions { parallel: true, first: ControlInit::Warm, later: ControlInit::Warm }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent generator for subdomain `j` at outer iteration `k`.
pub fn substream(seed: u64, j: usize, k: usize) -> ChaCha8Rng {
    let key = splitmix64(splitmix64(splitmix64(seed) ^ j as u64) ^ k as u64);
    ChaCha8Rng::seed_from_u64(key)
}

fn normal_control<T: Real>(grid: TimeGrid<T>, nu: usize, rng: &mut ChaCha8Rng) -> Trajectory<T> {
    let values = (0..grid.len())
        .map(|_| DVector::from_fn(nu, |_, _| lit::<T>(StandardNormal.sample(rng))))
        .collect();
    Trajectory::new(grid, values).expect("grid has nodes")
}

/// One outer iteration: update boundary data, solve all subproblems, aggregate.
pub fn schwarz_iterate<T: Real>(
    problem: &LqProblem<T>,
    layout: &Layout<T>,
    iterate: &SchwarzIterate<T>,
    gd: &GdConfig<T>,
    opts: &SchwarzOptions,
) -> Result<SchwarzIterate<T>> {
    let params = update_boundary_params(iterate, layout, problem)?;
    let nodes = layout.grid.nodes();
    let m = layout.m();
    let init = if iterate.k == 0 { opts.first } else { opts.later };
    let solve = |j: usize| {
        let (lo, hi) = (layout.lo[j], layout.hi[j]);
        let (p, q) = params[j].clone();
        let spec = SubproblemSpec::new(problem, nodes[lo], nodes[hi], p, q, j + 1 == m)?;
        let u0 = match init {
            ControlInit::Warm => iterate.u.slice(lo, hi)?,
            ControlInit::Normal { seed } => {
                normal_control(layout.grid.slice(lo, hi)?, problem.nu(), &mut substream(seed, j, iterate.k))
            }
        };
        solve_subproblem(&spec, &u0, gd)
    };
    let results: Vec<_> = if opts.parallel {
        (0..m).into_par_iter().map(solve).collect()
    } else {
        (0..m).map(solve).collect()
    };
    let mut x = iterate.x.clone();
    let mut u = iterate.u.clone();
    let mut lambda = iterate.lambda.clone();
    let mut flags = Vec::with_capacity(m);
    for (j, res) in results.into_iter().enumerate() {
        let sol = res?;
        let (first, last) = layout.owned_nodes(j);
        let lo = layout.lo[j];
        for i in first..=last {
            x.values_mut()[i].copy_from(&sol.x.values()[i - lo]);
            u.values_mut()[i].copy_from(&sol.u.values()[i - lo]);
            lambda.values_mut()[i].copy_from(&sol.lambda.values()[i - lo]);
        }
        flags.push(SubdomainStatus { converged: sol.converged, iterations: sol.iterations, grad_norm: sol.grad_norm });
    }
    Ok(SchwarzIterate { x, u, lambda, k: iterate.k + 1, subdomain_flags: flags })
}

/// Max over nodes of ‖Δx‖ + ‖Δu‖ + ‖Δλ‖.
///
/// Every node of the iterate must coincide with a node of the reference; the
/// reference may be finer.
pub fn error_metric<T: Real>(iterate: &SchwarzIterate<T>, reference: &Solution<T>) -> Result<T> {
    let g = iterate.x.grid();
    let rg = reference.x.grid();
    let tol = lit::<T>(1e-9) * (T::one() + rg.span());
    let mut worst = T::zero();
    for (i, &t) in g.nodes().iter().enumerate() {
        let r = if g.len() == rg.len() && (rg.nodes()[i] - t).abs() <= tol {
            i
        } else {
            rg.index_of(t, tol)
                .ok_or_else(|| Error::Grid(format!("node {} has no reference counterpart", to_f64(t))))?
        };
        let e = (&iterate.x.values()[i] - &reference.x.values()[r]).norm()
            + (&iterate.u.values()[i] - &reference.u.values()[r]).norm()
            + (&iterate.lambda.values()[i] - &reference.lambda.values()[r]).norm();
        worst = worst.max(e);
    }
    Ok(worst)
}

fn change<T: Real>(a: &SchwarzIterate<T>, b: &SchwarzIterate<T>) -> Result<T> {
    error_metric(a, &b.to_solution())
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvergenceReport {
    /// Error of the starting iterate, when a reference is given.
    pub initial_error: Option<f64>,
    /// `e^(k)` for `k = 1, 2, …`: distance to the reference, or the change
    /// from the previous iterate when there is none.
    pub errors: Vec<f64>,
    /// `e^(k+1)/e^(k)` where `e^(k) > 0`.
    pub rates: Vec<f64>,
    pub mean_rate: Option<f64>,
    /// Upper bound on the contraction factor, when available.
    pub theoretical_rate: Option<f64>,
    /// Smallest overlap after snapping, in time units.
    pub tau: f64,
    pub converged: bool,
    /// Subproblem solves that stopped at the iteration budget.
    pub unconverged_solves: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RunConfig<T> {
    pub max_outer: usize,
    pub stop_tol: T,
    pub opts: SchwarzOptions,
}

/// Outer loop until `e^(k) ≤ stop_tol` or `max_outer` iterations.
pub fn run_schwarz<T: Real>(
    problem: &LqProblem<T>,
    layout: &Layout<T>,
    init: SchwarzIterate<T>,
    gd: &GdConfig<T>,
    run: &RunConfig<T>,
    reference: Option<&Solution<T>>,
) -> Result<(SchwarzIterate<T>, ConvergenceReport)> {
    if to_f64((&init.x.values()[0] - &problem.d0).norm()) != 0.0 {
        return Err(Error::InvalidArgument("initial iterate must start at x0".into()));
    }
    let initial_error = match reference {
        Some(r) => Some(to_f64(error_metric(&init, r)?)),
        None => None,
    };
    let mut errors = Vec::new();
    let mut cur = init;
    let mut unconverged = 0;
    let mut converged = false;
    for _ in 0..run.max_outer {
        let next = schwarz_iterate(problem, layout, &cur, gd, &run.opts)?;
        unconverged += next.subdomain_flags.iter().filter(|f| !f.converged).count();
        let e = match reference {
            Some(r) => error_metric(&next, r)?,
            None => change(&next, &cur)?,
        };
        errors.push(to_f64(e));
        cur = next;
        if e <= run.stop_tol {
            converged = true;
            break;
        }
    }
    let rates = ratios(&errors);
    let report = ConvergenceReport {
        mean_rate: estimate_rate(&errors, 100.0 * to_f64(run.stop_tol)).ok(),
        initial_error,
        errors,
        rates,
        theoretical_rate: None,
        tau: to_f64(layout.partition.min_overlap()),
        converged,
        unconverged_solves: unconverged,
    };
    Ok((cur, report))
}

fn ratios(errors: &[f64]) -> Vec<f64> {
    errors.windows(2).filter(|w| w[0] > 0.0).map(|w| w[1] / w[0]).collect()
}

pub const NOISE_FLOOR: f64 = 1e-12;

/// An error counts as pre-plateau while it exceeds this multiple of the
/// smallest error in the run.
pub const PLATEAU_FACTOR: f64 = 2.0;

/// Mean of consecutive ratios `e^(k+1)/e^(k)` over the pre-plateau window,
/// ignoring errors at or below `max(floor, 1e-12)`.
///
/// A ratio is kept when its newer error still exceeds `PLATEAU_FACTOR` times
/// the asymptote (the smallest error reached). When the run ends still
/// contracting there is no asymptote and every ratio is kept.
pub fn estimate_rate(errors: &[f64], floor: f64) -> Result<f64> {
    let floor = floor.max(NOISE_FLOOR);
    let end = plateau_start(errors);
    let r: Vec<f64> = errors[..end]
        .windows(2)
        .filter(|w| w[0] > floor && w[1] > floor)
        .map(|w| w[1] / w[0])
        .collect();
    if r.is_empty() {
        return Err(Error::UndefinedRate("fewer than two errors above the plateau and noise floor".into()));
    }
    Ok(r.iter().sum::<f64>() / r.len() as f64)
}

/// Length of the prefix before the errors reach their plateau.
pub fn plateau_start(errors: &[f64]) -> usize {
    let n = errors.len();
    if n < 3 {
        return n;
    }
    let min = errors.iter().cloned().fold(f64::INFINITY, f64::min);
    // still contracting at the end of the run: no plateau
    if errors[n - 1] == min && errors[n - 1] < 0.9 * errors[n - 2] {
        return n;
    }
    errors.iter().position(|&e| e <= PLATEAU_FACTOR * min).unwrap_or(n)
}

/// Least squares fit of `log r = log c − ρ τ`.
pub fn fit_exponential(points: &[(f64, f64)]) -> Result<(f64, f64)> {
    let pts: Vec<(f64, f64)> = points.iter().filter(|p| p.1 > 0.0 && p.1.is_finite()).map(|&(t, r)| (t, r.ln())).collect();
    if pts.len() < 2 {
        return Err(Error::UndefinedRate("need at least two positive rates".into()));
    }
    let n = pts.len() as f64;
    let mt = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let ml = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let stt: f64 = pts.iter().map(|p| (p.0 - mt).powi(2)).sum();
    if stt == 0.0 {
        return Err(Error::UndefinedRate("all overlaps are equal".into()));
    }
    let slope = pts.iter().map(|p| (p.0 - mt) * (p.1 - ml)).sum::<f64>() / stt;
    Ok(((ml - slope * mt).exp(), -slope))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ltv_model::MatrixFunction;
    use crate::ode::{IntegratorConfig, Method};
    use approx::assert_abs_diff_eq;
    use nalgebra::DMatrix;

    #[test]
    fn partition_examples() {
        let p = build_partition(5.0, 3, 0.05).unwrap();
        assert_abs_diff_eq!(p.breakpoints[1], 5.0 / 3.0);
        assert_abs_diff_eq!(p.min_overlap(), 1.0 / 12.0, epsilon = 1e-15);
        assert_eq!(p.subdomain(0).0, 0.0);
        assert_eq!(p.subdomain(2).1, 5.0);
        let p = build_partition(5.0, 1, 0.3).unwrap();
        assert_eq!(p.subdomain(0), (0.0, 5.0));
        let p = build_partition(5.0, 3, 0.6).unwrap();
        let (a, b) = p.subdomain(1);
        assert_abs_diff_eq!(a, 5.0 / 3.0 - 1.0, epsilon = 1e-14);
        assert_abs_diff_eq!(b, 10.0 / 3.0 + 1.0, epsilon = 1e-14);
        assert!(build_partition(5.0, 3, 0.0).is_err());
        assert!(build_partition(5.0, 0, 0.1).is_err());
    }

    #[test]
    fn layout_snaps_to_nodes() {
        let grid = TimeGrid::with_step(0.0, 5.0, 0.05).unwrap();
        let lay = Layout::new(&build_partition(5.0, 3, 0.05).unwrap(), &grid).unwrap();
        for j in 0..3 {
            let (a, b) = lay.partition.subdomain(j);
            assert_eq!(grid.nodes()[lay.lo[j]], a);
            assert_eq!(grid.nodes()[lay.hi[j]], b);
        }
        // owned pieces tile the grid
        let mut count = 0;
        for j in 0..3 {
            let (f, l) = lay.owned_nodes(j);
            count += l - f + 1;
        }
        assert_eq!(count, grid.len());
    }

    #[test]
    fn boundary_params_examples() {
        let p = LqProblem::classic(
            1.0,
            MatrixFunction::zeros(1, 1),
            MatrixFunction::identity(1),
            MatrixFunction::constant(DMatrix::from_element(1, 1, 2.0)),
            MatrixFunction::zeros(1, 1),
            MatrixFunction::identity(1),
            DMatrix::identity(1, 1),
            DVector::from_element(1, 0.0),
        )
        .unwrap();
        let grid = TimeGrid::with_step(0.0, 1.0, 0.1).unwrap();
        let lay = Layout::new(&build_partition(1.0, 2, 0.2).unwrap(), &grid).unwrap();
        let zero = SchwarzIterate::initial(&p, &grid);
        for (a, b) in update_boundary_params(&zero, &lay, &p).unwrap() {
            assert_eq!((a[0], b[0]), (0.0, 0.0));
        }
        let mut it = zero.clone();
        it.x = Trajectory::constant(grid.clone(), &DVector::from_element(1, 3.0));
        it.lambda = Trajectory::constant(grid, &DVector::from_element(1, 1.0));
        let params = update_boundary_params(&it, &lay, &p).unwrap();
        assert_eq!(params[0].0[0], 0.0);
        assert_eq!(params[0].1[0], 3.0 - 0.5);
        assert_eq!(params[1].0[0], 3.0);
    }

    #[test]
    fn error_metric_examples() {
        let grid = TimeGrid::with_step(0.0, 1.0, 0.1).unwrap();
        let sol = Solution {
            x: Trajectory::zeros(grid.clone(), 2),
            u: Trajectory::zeros(grid.clone(), 1),
            lambda: Trajectory::zeros(grid.clone(), 2),
        };
        let mut it = SchwarzIterate::from_solution(&sol);
        assert_eq!(error_metric(&it, &sol).unwrap(), 0.0);
        it.x = Trajectory::constant(grid.clone(), &DVector::from_vec(vec![3.0, 4.0]));
        assert_eq!(error_metric(&it, &sol).unwrap(), 5.0);
        let mut one = SchwarzIterate::from_solution(&sol);
        one.u.values_mut()[4][0] = -0.7;
        assert_eq!(error_metric(&one, &sol).unwrap(), 0.7);
        // coarse iterate against a finer reference
        let fine = TimeGrid::with_step(0.0, 1.0, 0.05).unwrap();
        let fsol = Solution {
            x: Trajectory::zeros(fine.clone(), 2),
            u: Trajectory::zeros(fine.clone(), 1),
            lambda: Trajectory::zeros(fine, 2),
        };
        assert_eq!(error_metric(&it, &fsol).unwrap(), 5.0);
        let odd = TimeGrid::with_step(0.0, 1.0, 0.3).unwrap();
        let mut bad = it.clone();
        bad.x = Trajectory::zeros(odd.clone(), 2);
        bad.u = Trajectory::zeros(odd.clone(), 1);
        bad.lambda = Trajectory::zeros(odd, 2);
        assert!(matches!(error_metric(&bad, &fsol), Err(Error::Grid(_))));
    }

    #[test]
    fn rate_estimates() {
        assert_abs_diff_eq!(estimate_rate(&[1.0, 0.5, 0.25, 0.125], 0.0).unwrap(), 0.5);
        // plateau at 1e-3 is excluded
        let e = [1.0, 0.1, 0.01, 2.5e-3, 1.05e-3, 1.0e-3, 1.01e-3, 1.0e-3];
        assert_abs_diff_eq!(estimate_rate(&e, 0.0).unwrap(), (0.1 + 0.1 + 0.25) / 3.0, epsilon = 1e-12);
        assert_eq!(plateau_start(&e), 4);
        assert!(matches!(estimate_rate(&[1e-13, 1e-14], 0.0), Err(Error::UndefinedRate(_))));
        let (c, rho) = fit_exponential(&[(0.0, 0.8), (1.0, 0.8 * (-0.3f64).exp())]).unwrap();
        assert_abs_diff_eq!(c, 0.8, epsilon = 1e-12);
        assert_abs_diff_eq!(rho, 0.3, epsilon = 1e-12);
    }

    #[test]
    fn substreams_are_distinct_and_stable() {
        use rand::RngCore;
        let a = substream(7, 0, 0).next_u64();
        assert_eq!(a, substream(7, 0, 0).next_u64());
        assert_ne!(a, substream(7, 1, 0).next_u64());
        assert_ne!(a, substream(7, 0, 1).next_u64());
        assert_ne!(a, substream(8, 0, 0).next_u64());
    }

    fn small_problem() -> LqProblem<f64> {
        LqProblem::classic(
            3.0,
            MatrixFunction::constant(DMatrix::from_element(1, 1, -0.5)),
            MatrixFunction::identity(1),
            MatrixFunction::identity(1),
            MatrixFunction::zeros(1, 1),
            MatrixFunction::identity(1),
            DMatrix::identity(1, 1),
            DVector::from_element(1, 1.0),
        )
        .unwrap()
    }

    #[test]
    fn single_subdomain_is_plain_solve() {
        let p = small_problem();
        let grid = TimeGrid::with_step(0.0, 3.0, 0.01).unwrap();
        let lay = Layout::new(&build_partition(3.0, 1, 0.1).unwrap(), &grid).unwrap();
        let mut gd = GdConfig::new(IntegratorConfig::fixed(Method::Rk4, 0.01));
        gd.eta = 0.5;
        let it = schwarz_iterate(&p, &lay, &SchwarzIterate::initial(&p, &grid), &gd, &SchwarzOptions::default()).unwrap();
        let spec = SubproblemSpec::full(&p).unwrap();
        let direct = solve_subproblem(&spec, &Trajectory::zeros(grid, 1), &gd).unwrap();
        assert_eq!(it.u, direct.u);
        assert_eq!(it.x, direct.x);
    }

    #[test]
    fn converges_and_parallel_matches_serial() {
        let p = small_problem();
        let grid = TimeGrid::with_step(0.0, 3.0, 0.01).unwrap();
        let cfg = IntegratorConfig::fixed(Method::Rk4, 0.01);
        let reference = crate::reference::solve_full_riccati(&p, &grid, &cfg).unwrap();
        let lay = Layout::new(&build_partition(3.0, 3, 0.3).unwrap(), &grid).unwrap();
        let mut gd = GdConfig::new(cfg);
        gd.eta = 0.5;
        gd.grad_tol = 1e-9;
        let mut run = RunConfig {
            max_outer: 12,
            stop_tol: 2e-5,
            opts: SchwarzOptions { parallel: true, first: ControlInit::Normal { seed: 3 }, later: ControlInit::Warm },
        };
        let init = SchwarzIterate::initial(&p, &grid);
        let (a, rep) = run_schwarz(&p, &lay, init.clone(), &gd, &run, Some(&reference)).unwrap();
        assert!(rep.converged, "{:?}", rep.errors);
        assert!(rep.mean_rate.unwrap() < 1.0);
        run.opts.parallel = false;
        let (b, rep2) = run_schwarz(&p, &lay, init, &gd, &run, Some(&reference)).unwrap();
        assert_eq!(a, b);
        assert_eq!(rep, rep2);
    }

    #[test]
    fn reference_is_a_fixed_point() {
        let p = small_problem();
        let grid = TimeGrid::with_step(0.0, 3.0, 0.01).unwrap();
        let cfg = IntegratorConfig::fixed(Method::Rk4, 0.01);
        let reference = crate::reference::solve_full_riccati(&p, &grid, &cfg).unwrap();
        let lay = Layout::new(&build_partition(3.0, 3, 0.1).unwrap(), &grid).unwrap();
        let mut gd = GdConfig::new(cfg);
        gd.eta = 0.5;
        gd.grad_tol = 1e-9;
        let it = SchwarzIterate::from_solution(&reference);
        let next = schwarz_iterate(&p, &lay, &it, &gd, &SchwarzOptions::default()).unwrap();
        let e = error_metric(&next, &reference).unwrap();
        // linear control interpolation limits agreement to O(h²)
        assert!(e < 5e-5, "{}", e);
    }
}
