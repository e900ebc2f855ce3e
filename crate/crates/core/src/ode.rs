//! Time grids, trajectories, fixed-step and adaptive integrators, evolution
//! operators and Simpson quadrature.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::ltv_model::MatrixFunction;
use crate::scalar::{lit, to_f64, Real};

/// Strictly increasing sequence of time nodes (at least two).
#[derive(Clone, Debug, PartialEq)]
pub struct TimeGrid<T> {
    nodes: Vec<T>,
}

impl<T: Real> TimeGrid<T> {
    pub fn new(nodes: Vec<T>) -> Result<Self> {
        if nodes.len() < 2 {
            return Err(Error::Grid(format!("need at least 2 nodes, got {}", nodes.len())));
        }
        for (i, w) in nodes.windows(2).enumerate() {
            if !(w[1] > w[0]) {
                return Err(Error::Grid(format!(
                    "nodes not strictly increasing at index {} ({} then {})",
                    i,
                    to_f64(w[0]),
                    to_f64(w[1])
                )));
            }
        }
        Ok(TimeGrid { nodes })
    }

    /// `n` equal intervals on `[t0, t1]`.
    pub fn uniform(t0: T, t1: T, n: usize) -> Result<Self> {
        if n == 0 || !(t1 > t0) {
            return Err(Error::Interval(to_f64(t0), to_f64(t1)));
        }
        let h = (t1 - t0) / lit::<T>(n as f64);
        let mut nodes: Vec<T> = (0..=n).map(|i| t0 + h * lit::<T>(i as f64)).collect();
        nodes[n] = t1;
        Self::new(nodes)
    }

    /// Uniform grid whose spacing is as close as possible to `dt`.
    pub fn with_step(t0: T, t1: T, dt: T) -> Result<Self> {
        if !(dt > T::zero()) {
            return Err(Error::InvalidArgument(format!("step must be positive, got {}", to_f64(dt))));
        }
        let n = to_f64((t1 - t0) / dt).round().max(1.0) as usize;
        Self::uniform(t0, t1, n)
    }

    pub fn nodes(&self) -> &[T] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn start(&self) -> T {
        self.nodes[0]
    }

    pub fn end(&self) -> T {
        self.nodes[self.nodes.len() - 1]
    }

    pub fn span(&self) -> T {
        self.end() - self.start()
    }

    /// Largest node spacing.
    pub fn max_step(&self) -> T {
        self.nodes.windows(2).fold(T::zero(), |a, w| a.max(w[1] - w[0]))
    }

    /// Interval index `i` with `nodes[i] <= t <= nodes[i+1]`, clamped to the grid.
    pub fn locate(&self, t: T) -> usize {
        let n = self.nodes.len();
        if t <= self.nodes[0] {
            return 0;
        }
        if t >= self.nodes[n - 1] {
            return n - 2;
        }
        let i = self.nodes.partition_point(|&s| s <= t);
        i.saturating_sub(1).min(n - 2)
    }

    /// Index of the node closest to `t` when within `tol`.
    pub fn index_of(&self, t: T, tol: T) -> Option<usize> {
        let i = self.locate(t);
        [i, i + 1]
            .into_iter()
            .filter(|&j| j < self.nodes.len())
            .min_by(|&a, &b| {
                let da = (self.nodes[a] - t).abs();
                let db = (self.nodes[b] - t).abs();
                da.partial_cmp(&db).unwrap()
            })
            .filter(|&j| (self.nodes[j] - t).abs() <= tol)
    }

    /// Index of the node nearest to `t`.
    pub fn nearest(&self, t: T) -> usize {
        let i = self.locate(t);
        if (self.nodes[i + 1] - t).abs() < (t - self.nodes[i]).abs() {
            i + 1
        } else {
            i
        }
    }

    /// Sub-grid of nodes `i0..=i1`.
    pub fn slice(&self, i0: usize, i1: usize) -> Result<Self> {
        if i1 <= i0 || i1 >= self.nodes.len() {
            return Err(Error::Grid(format!("bad slice {}..={} of {} nodes", i0, i1, self.nodes.len())));
        }
        Self::new(self.nodes[i0..=i1].to_vec())
    }

    /// Splits each interval into `k` equal pieces.
    pub fn refine(&self, k: usize) -> Self {
        let k = k.max(1);
        let mut nodes = Vec::with_capacity((self.nodes.len() - 1) * k + 1);
        for w in self.nodes.windows(2) {
            let h = (w[1] - w[0]) / lit::<T>(k as f64);
            for s in 0..k {
                nodes.push(w[0] + h * lit::<T>(s as f64));
            }
        }
        nodes.push(self.end());
        TimeGrid { nodes }
    }
}

/// A vector value per grid node.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory<T: Real> {
    grid: TimeGrid<T>,
    values: Vec<DVector<T>>,
    dim: usize,
}

impl<T: Real> Trajectory<T> {
    pub fn new(grid: TimeGrid<T>, values: Vec<DVector<T>>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::Dimension(format!(
                "{} values for {} grid nodes",
                values.len(),
                grid.len()
            )));
        }
        let dim = values[0].len();
        if let Some(i) = values.iter().position(|v| v.len() != dim) {
            return Err(Error::Dimension(format!("value {} has dimension {} (expected {})", i, values[i].len(), dim)));
        }
        Ok(Trajectory { grid, values, dim })
    }

    pub fn constant(grid: TimeGrid<T>, v: &DVector<T>) -> Self {
        let values = vec![v.clone(); grid.len()];
        Trajectory { dim: v.len(), grid, values }
    }

    pub fn zeros(grid: TimeGrid<T>, dim: usize) -> Self {
        Self::constant(grid, &DVector::zeros(dim))
    }

    pub fn from_fn(grid: TimeGrid<T>, dim: usize, mut f: impl FnMut(usize, T) -> DVector<T>) -> Result<Self> {
        let values = grid.nodes().iter().enumerate().map(|(i, &t)| f(i, t)).collect();
        let traj = Self::new(grid, values)?;
        if traj.dim != dim {
            return Err(Error::Dimension(format!("expected dimension {}, got {}", dim, traj.dim)));
        }
        Ok(traj)
    }

    pub fn grid(&self) -> &TimeGrid<T> {
        &self.grid
    }

    pub fn values(&self) -> &[DVector<T>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [DVector<T>] {
        &mut self.values
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn first(&self) -> &DVector<T> {
        &self.values[0]
    }

    pub fn last(&self) -> &DVector<T> {
        &self.values[self.values.len() - 1]
    }

    /// Piecewise linear interpolation written into `out`.
    pub fn sample_into(&self, t: T, out: &mut DVector<T>) {
        let nodes = self.grid.nodes();
        let i = self.grid.locate(t);
        let (ta, tb) = (nodes[i], nodes[i + 1]);
        let w = ((t - ta) / (tb - ta)).max(T::zero()).min(T::one());
        let (a, b) = (&self.values[i], &self.values[i + 1]);
        for k in 0..self.dim {
            out[k] = a[k] + w * (b[k] - a[k]);
        }
    }

    pub fn sample(&self, t: T) -> DVector<T> {
        let mut out = DVector::zeros(self.dim);
        self.sample_into(t, &mut out);
        out
    }

    /// Node range `i0..=i1` as a new trajectory.
    pub fn slice(&self, i0: usize, i1: usize) -> Result<Self> {
        let grid = self.grid.slice(i0, i1)?;
        Ok(Trajectory { grid, values: self.values[i0..=i1].to_vec(), dim: self.dim })
    }

    /// Max over nodes of the Euclidean norm of the difference.
    pub fn max_diff(&self, other: &Self) -> Result<T> {
        if self.len() != other.len() || self.dim != other.dim {
            return Err(Error::Dimension("trajectories have different shapes".into()));
        }
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .fold(T::zero(), |a, (x, y)| a.max((x - y).norm())))
    }

    pub fn max_norm(&self) -> T {
        crate::linalg::max_norm(&self.values)
    }

    pub fn map(&self, f: impl Fn(usize, &DVector<T>) -> DVector<T>) -> Result<Self> {
        let values = self.values.iter().enumerate().map(|(i, v)| f(i, v)).collect();
        Self::new(self.grid.clone(), values)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Method {
    ForwardEuler,
    BackwardEuler,
    Rk4,
    Rk45Fixed,
    Rk23Adaptive,
    Rk45Adaptive,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::ForwardEuler,
        Method::BackwardEuler,
        Method::Rk4,
        Method::Rk45Fixed,
        Method::Rk23Adaptive,
        Method::Rk45Adaptive,
    ];

    pub fn is_adaptive(self) -> bool {
        matches!(self, Method::Rk23Adaptive | Method::Rk45Adaptive)
    }

    pub fn name(self) -> &'static str {
        match self {
            Method::ForwardEuler => "FE",
            Method::BackwardEuler => "BE",
            Method::Rk4 => "RK4",
            Method::Rk45Fixed => "RK45",
            Method::Rk23Adaptive => "RK23A",
            Method::Rk45Adaptive => "RK45A",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key: String = s.chars().filter(|c| c.is_ascii_alphanumeric()).collect::<String>().to_ascii_lowercase();
        Ok(match key.as_str() {
            "fe" | "forwardeuler" => Method::ForwardEuler,
            "be" | "backwardeuler" => Method::BackwardEuler,
            "rk4" => Method::Rk4,
            "rk45" | "rk45fixed" | "dopri" => Method::Rk45Fixed,
            "rk23a" | "rk23" | "rk23adaptive" => Method::Rk23Adaptive,
            "rk45a" | "rk45adaptive" => Method::Rk45Adaptive,
            _ => {
                return Err(Error::InvalidArgument(format!(
                    "unknown integrator '{}' (expected one of FE, BE, RK4, RK45, RK23A, RK45A)",
                    s
                )))
            }
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IntegratorConfig<T> {
    pub method: Method,
    /// Step for fixed-step methods; grid intervals longer than this are subdivided.
    pub step: T,
    pub abs_tol: T,
    pub rel_tol: T,
    pub max_steps: usize,
}

impl<T: Real> IntegratorConfig<T> {
    pub fn fixed(method: Method, step: T) -> Self {
        IntegratorConfig { method, step, abs_tol: lit(1e-8), rel_tol: lit(1e-8), max_steps: 10_000_000 }
    }

    pub fn adaptive(method: Method, abs_tol: T, rel_tol: T) -> Self {
        IntegratorConfig { method, step: lit(1e-2), abs_tol, rel_tol, max_steps: 10_000_000 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.method.is_adaptive() {
            if !(self.abs_tol > T::zero() && self.rel_tol > T::zero()) {
                return Err(Error::InvalidArgument("adaptive tolerances must be positive".into()));
            }
        } else if !(self.step > T::zero()) {
            return Err(Error::InvalidArgument("fixed step must be positive".into()));
        }
        if self.max_steps == 0 {
            return Err(Error::InvalidArgument("max_steps must be positive".into()));
        }
        Ok(())
    }
}

impl<T: Real> Default for IntegratorConfig<T> {
    fn default() -> Self {
        Self::adaptive(Method::Rk45Adaptive, lit(1e-10), lit(1e-10))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Backward,
}

/// Right-hand side of `dy/dt = f(t, y)`.
pub trait OdeSystem<T: Real> {
    fn dim(&self) -> usize;

    fn rhs(&self, t: T, y: &DVector<T>, dy: &mut DVector<T>);

    /// `(M(t), b(t))` with `f(t, y) = M(t) y + b(t)`, when the system is affine.
    fn affine(&self, _t: T) -> Option<(DMatrix<T>, DVector<T>)> {
        None
    }

    /// Whether `project` does anything.
    fn has_projection(&self) -> bool {
        false
    }

    /// Applied after every accepted step (e.g. re-symmetrization).
    fn project(&self, _y: &mut DVector<T>) {}
}

/// Wraps a closure `f(t, y, dy)`.
pub struct FnSystem<F> {
    pub dim: usize,
    pub f: F,
}

impl<T: Real, F: Fn(T, &DVector<T>, &mut DVector<T>)> OdeSystem<T> for FnSystem<F> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn rhs(&self, t: T, y: &DVector<T>, dy: &mut DVector<T>) {
        (self.f)(t, y, dy)
    }
}

/// Affine system given by `t -> (M(t), b(t))`.
pub struct AffineSystem<F> {
    pub dim: usize,
    pub parts: F,
}

impl<T: Real, F: Fn(T) -> (DMatrix<T>, DVector<T>)> OdeSystem<T> for AffineSystem<F> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn rhs(&self, t: T, y: &DVector<T>, dy: &mut DVector<T>) {
        let (m, b) = (self.parts)(t);
        dy.gemv(T::one(), &m, y, T::zero());
        *dy += b;
    }

    fn affine(&self, t: T) -> Option<(DMatrix<T>, DVector<T>)> {
        Some((self.parts)(t))
    }
}

/// Integrates `sys` over `grid` and samples the solution at every node.
///
/// Forward integration starts from `y0` at the first node, backward from `y0`
/// at the last node. Values are always returned in ascending time order.
pub fn integrate_ivp<T: Real, S: OdeSystem<T> + ?Sized>(
    sys: &S,
    y0: &DVector<T>,
    grid: &TimeGrid<T>,
    cfg: &IntegratorConfig<T>,
    direction: Direction,
) -> Result<Trajectory<T>> {
    cfg.validate()?;
    if y0.len() != sys.dim() {
        return Err(Error::Dimension(format!("initial value has dimension {}, system {}", y0.len(), sys.dim())));
    }
    if cfg.method == Method::BackwardEuler && sys.affine(grid.start()).is_none() {
        return Err(Error::NotAffine("backward Euler"));
    }
    let n = grid.len();
    let order: Vec<usize> = match direction {
        Direction::Forward => (0..n).collect(),
        Direction::Backward => (0..n).rev().collect(),
    };
    let mut values = vec![DVector::zeros(sys.dim()); n];
    values[order[0]] = y0.clone();
    if cfg.method.is_adaptive() {
        adaptive_march(sys, grid, cfg, &order, &mut values)?;
    } else {
        fixed_march(sys, grid, cfg, &order, &mut values)?;
    }
    Trajectory::new(grid.clone(), values)
}

struct Stages<T: Real> {
    k: Vec<DVector<T>>,
    tmp: DVector<T>,
}

impl<T: Real> Stages<T> {
    fn new(dim: usize, count: usize) -> Self {
        Stages { k: vec![DVector::zeros(dim); count], tmp: DVector::zeros(dim) }
    }
}

fn fixed_march<T: Real, S: OdeSystem<T> + ?Sized>(
    sys: &S,
    grid: &TimeGrid<T>,
    cfg: &IntegratorConfig<T>,
    order: &[usize],
    values: &mut [DVector<T>],
) -> Result<()> {
    let nodes = grid.nodes();
    let mut st = Stages::new(sys.dim(), 7);
    let mut y = values[order[0]].clone();
    let slack = lit::<T>(1e-9);
    for w in order.windows(2) {
        let (ta, tb) = (nodes[w[0]], nodes[w[1]]);
        let len = (tb - ta).abs();
        let nsub = to_f64(len / cfg.step - slack).ceil().max(1.0) as usize;
        let h = (tb - ta) / lit::<T>(nsub as f64);
        for s in 0..nsub {
            let t = ta + h * lit::<T>(s as f64);
            match cfg.method {
                Method::ForwardEuler => {
                    sys.rhs(t, &y, &mut st.k[0]);
                    y.axpy(h, &st.k[0], T::one());
                }
                Method::BackwardEuler => backward_euler_step(sys, t + h, h, &mut y)?,
                Method::Rk4 => rk4_step(sys, t, h, &mut y, &mut st),
                Method::Rk45Fixed => {
                    dopri_stages(sys, t, h, &y, &mut st, None);
                    y.copy_from(&st.tmp);
                }
                _ => unreachable!(),
            }
            if sys.has_projection() {
                sys.project(&mut y);
            }
        }
        values[w[1]].copy_from(&y);
    }
    Ok(())
}

fn backward_euler_step<T: Real, S: OdeSystem<T> + ?Sized>(sys: &S, t_new: T, h: T, y: &mut DVector<T>) -> Result<()> {
    let (m, b) = sys.affine(t_new).ok_or(Error::NotAffine("backward Euler"))?;
    let n = y.len();
    let lhs = DMatrix::<T>::identity(n, n) - m * h;
    let rhs = &*y + b * h;
    let lu = lhs.lu();
    match lu.solve(&rhs) {
        Some(sol) if sol.iter().all(|v| v.is_finite()) => {
            y.copy_from(&sol);
            Ok(())
        }
        _ => Err(Error::SingularStep(to_f64(t_new))),
    }
}

fn rk4_step<T: Real, S: OdeSystem<T> + ?Sized>(sys: &S, t: T, h: T, y: &mut DVector<T>, st: &mut Stages<T>) {
    let half = lit::<T>(0.5);
    let (k, tmp) = (&mut st.k, &mut st.tmp);
    sys.rhs(t, y, &mut k[0]);
    tmp.copy_from(y);
    tmp.axpy(h * half, &k[0], T::one());
    sys.rhs(t + h * half, tmp, &mut k[1]);
    tmp.copy_from(y);
    tmp.axpy(h * half, &k[1], T::one());
    sys.rhs(t + h * half, tmp, &mut k[2]);
    tmp.copy_from(y);
    tmp.axpy(h, &k[2], T::one());
    sys.rhs(t + h, tmp, &mut k[3]);
    let sixth = h / lit::<T>(6.0);
    let two = lit::<T>(2.0);
    for i in 0..y.len() {
        y[i] += sixth * (k[0][i] + two * (k[1][i] + k[2][i]) + k[3][i]);
    }
}

const DP_C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const DP_A: [[f64; 6]; 7] = [
    [0.0; 6],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
const DP_E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];

/// Dormand-Prince stages. Leaves the 5th order solution in `st.tmp` and, when
/// `k0` is given (FSAL), reuses it as the first stage. `st.k[6]` holds f at the
/// new point.
fn dopri_stages<T: Real, S: OdeSystem<T> + ?Sized>(
    sys: &S,
    t: T,
    h: T,
    y: &DVector<T>,
    st: &mut Stages<T>,
    k0: Option<&DVector<T>>,
) {
    match k0 {
        Some(f) => st.k[0].copy_from(f),
        None => sys.rhs(t, y, &mut st.k[0]),
    }
    for s in 1..7 {
        st.tmp.copy_from(y);
        for j in 0..s {
            let a = DP_A[s][j];
            if a != 0.0 {
                st.tmp.axpy(h * lit::<T>(a), &st.k[j], T::one());
            }
        }
        let (done, rest) = st.k.split_at_mut(s);
        let _ = done;
        sys.rhs(t + h * lit::<T>(DP_C[s]), &st.tmp, &mut rest[0]);
    }
    // stage 7 was evaluated at the 5th order solution, which is st.tmp now
}

const BS_A: [[f64; 3]; 4] = [
    [0.0, 0.0, 0.0],
    [0.5, 0.0, 0.0],
    [0.0, 0.75, 0.0],
    [2.0 / 9.0, 1.0 / 3.0, 4.0 / 9.0],
];
const BS_C: [f64; 4] = [0.0, 0.5, 0.75, 1.0];
const BS_E: [f64; 4] = [-5.0 / 72.0, 1.0 / 12.0, 1.0 / 9.0, -1.0 / 8.0];

fn bogacki_stages<T: Real, S: OdeSystem<T> + ?Sized>(
    sys: &S,
    t: T,
    h: T,
    y: &DVector<T>,
    st: &mut Stages<T>,
    k0: &DVector<T>,
) {
    st.k[0].copy_from(k0);
    for s in 1..4 {
        st.tmp.copy_from(y);
        for j in 0..s {
            let a = BS_A[s][j];
            if a != 0.0 {
                st.tmp.axpy(h * lit::<T>(a), &st.k[j], T::one());
            }
        }
        let (_, rest) = st.k.split_at_mut(s);
        sys.rhs(t + h * lit::<T>(BS_C[s]), &st.tmp, &mut rest[0]);
    }
}

fn error_norm<T: Real>(err: &DVector<T>, y0: &DVector<T>, y1: &DVector<T>, cfg: &IntegratorConfig<T>) -> T {
    let n = err.len().max(1);
    let mut acc = T::zero();
    for i in 0..err.len() {
        let sc = cfg.abs_tol + cfg.rel_tol * y0[i].abs().max(y1[i].abs());
        let r = err[i] / sc;
        acc += r * r;
    }
    (acc / lit::<T>(n as f64)).sqrt()
}

fn rms_scaled<T: Real>(v: &DVector<T>, y: &DVector<T>, cfg: &IntegratorConfig<T>) -> T {
    let n = v.len().max(1);
    let mut acc = T::zero();
    for i in 0..v.len() {
        let sc = cfg.abs_tol + cfg.rel_tol * y[i].abs();
        let r = v[i] / sc;
        acc += r * r;
    }
    (acc / lit::<T>(n as f64)).sqrt()
}

fn adaptive_march<T: Real, S: OdeSystem<T> + ?Sized>(
    sys: &S,
    grid: &TimeGrid<T>,
    cfg: &IntegratorConfig<T>,
    order: &[usize],
    values: &mut [DVector<T>],
) -> Result<()> {
    let nodes = grid.nodes();
    let dim = sys.dim();
    let (q, method_name) = match cfg.method {
        Method::Rk23Adaptive => (2.0, "RK23 adaptive"),
        _ => (4.0, "RK45 adaptive"),
    };
    let t_start = nodes[order[0]];
    let t_end = nodes[order[order.len() - 1]];
    let span = (t_end - t_start).abs();
    let sign = if t_end > t_start { T::one() } else { -T::one() };
    let min_step = span * lit::<T>(1e-14);

    let mut st = Stages::new(dim, 7);
    let mut y = values[order[0]].clone();
    let mut f0 = DVector::zeros(dim);
    sys.rhs(t_start, &y, &mut f0);
    let mut t = t_start;

    // initial step (Hairer, Norsett & Wanner)
    let d0 = rms_scaled(&y, &y, cfg);
    let d1 = rms_scaled(&f0, &y, cfg);
    let small = lit::<T>(1e-5);
    let mut h0 = if d0 < small || d1 < small { lit::<T>(1e-6) } else { lit::<T>(0.01) * d0 / d1 };
    h0 = h0.min(span);
    let mut y1 = y.clone();
    y1.axpy(sign * h0, &f0, T::one());
    let mut f1 = DVector::zeros(dim);
    sys.rhs(t + sign * h0, &y1, &mut f1);
    let d2 = rms_scaled(&(&f1 - &f0), &y, cfg) / h0;
    let dm = d1.max(d2);
    let h1 = if dm <= lit(1e-15) {
        (h0 * lit::<T>(1e-3)).max(lit(1e-6))
    } else {
        (lit::<T>(0.01) / dm).powf(lit::<T>(1.0 / (q + 1.0)))
    };
    let mut h = sign * (h0 * lit::<T>(100.0)).min(h1).min(span).max(min_step * lit::<T>(10.0));

    let mut y_new = DVector::zeros(dim);
    let mut f_new = DVector::zeros(dim);
    let mut err = DVector::zeros(dim);
    let mut next = 1usize;
    let mut steps = 0usize;
    let exponent = lit::<T>(-1.0 / (q + 1.0));
    let node_tol = span * lit::<T>(1e-12);

    while next < order.len() {
        if steps >= cfg.max_steps {
            return Err(Error::Budget(cfg.max_steps));
        }
        let remaining = t_end - t;
        let last = (h * sign) >= (remaining * sign);
        if last {
            h = remaining;
        }
        match cfg.method {
            Method::Rk23Adaptive => {
                bogacki_stages(sys, t, h, &y, &mut st, &f0);
                y_new.copy_from(&st.tmp);
                f_new.copy_from(&st.k[3]);
                err.fill(T::zero());
                for (j, &e) in BS_E.iter().enumerate() {
                    err.axpy(h * lit::<T>(e), &st.k[j], T::one());
                }
            }
            _ => {
                dopri_stages(sys, t, h, &y, &mut st, Some(&f0));
                y_new.copy_from(&st.tmp);
                f_new.copy_from(&st.k[6]);
                err.fill(T::zero());
                for (j, &e) in DP_E.iter().enumerate() {
                    if e != 0.0 {
                        err.axpy(h * lit::<T>(e), &st.k[j], T::one());
                    }
                }
            }
        }
        steps += 1;
        let en = error_norm(&err, &y, &y_new, cfg);
        let accepted = en <= T::one() && en.is_finite();
        let mut factor = if en == T::zero() {
            lit::<T>(5.0)
        } else if !en.is_finite() {
            lit::<T>(0.2)
        } else {
            (lit::<T>(0.9) * en.powf(exponent)).max(lit(0.2)).min(lit(5.0))
        };
        if accepted {
            let t_new = if last { t_end } else { t + h };
            if sys.has_projection() {
                sys.project(&mut y_new);
                sys.rhs(t_new, &y_new, &mut f_new);
            }
            while next < order.len() {
                let tn = nodes[order[next]];
                if (tn - t_new) * sign > node_tol {
                    break;
                }
                let v = &mut values[order[next]];
                if (tn - t_new).abs() <= node_tol {
                    v.copy_from(&y_new);
                } else {
                    hermite(t, h, &y, &f0, &y_new, &f_new, tn, v);
                }
                next += 1;
            }
            t = t_new;
            std::mem::swap(&mut y, &mut y_new);
            std::mem::swap(&mut f0, &mut f_new);
        } else {
            factor = factor.min(T::one());
        }
        h *= factor;
        if h.abs() < min_step && next < order.len() {
            return Err(Error::Stiffness { t: to_f64(t), method: method_name });
        }
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn hermite<T: Real>(
    t0: T,
    h: T,
    y0: &DVector<T>,
    f0: &DVector<T>,
    y1: &DVector<T>,
    f1: &DVector<T>,
    t: T,
    out: &mut DVector<T>,
) {
    let s = (t - t0) / h;
    let s2 = s * s;
    let s3 = s2 * s;
    let two = lit::<T>(2.0);
    let three = lit::<T>(3.0);
    let h00 = two * s3 - three * s2 + T::one();
    let h10 = s3 - two * s2 + s;
    let h01 = three * s2 - two * s3;
    let h11 = s3 - s2;
    for i in 0..out.len() {
        out[i] = h00 * y0[i] + h10 * h * f0[i] + h01 * y1[i] + h11 * h * f1[i];
    }
}

/// Matrix ODE `dY/dt = A(t) Y` (left) or `dY/dt = -Y A(t)` (right), flattened column-major.
pub(crate) struct LinearMatrixOde<'a, T: Real> {
    pub n: usize,
    pub a: &'a (dyn Fn(T) -> DMatrix<T> + Sync),
    pub right: bool,
}

impl<T: Real> OdeSystem<T> for LinearMatrixOde<'_, T> {
    fn dim(&self) -> usize {
        self.n * self.n
    }

    fn rhs(&self, t: T, y: &DVector<T>, dy: &mut DVector<T>) {
        let a = (self.a)(t);
        let n = self.n;
        let ym = nalgebra::DMatrixView::from_slice(y.as_slice(), n, n);
        let mut dm = nalgebra::DMatrixViewMut::from_slice(dy.as_mut_slice(), n, n);
        if self.right {
            dm.gemm(-T::one(), &ym, &a, T::zero());
        } else {
            dm.gemm(T::one(), &a, &ym, T::zero());
        }
    }

    fn affine(&self, t: T) -> Option<(DMatrix<T>, DVector<T>)> {
        // vec(A Y) = (I ⊗ A) vec(Y); vec(-Y A) = -(Aᵀ ⊗ I) vec(Y)
        let a = (self.a)(t);
        let id = DMatrix::<T>::identity(self.n, self.n);
        let m = if self.right { -a.transpose().kronecker(&id) } else { id.kronecker(&a) };
        Some((m, DVector::zeros(self.n * self.n)))
    }
}

/// `Φ(t1, t0)` for `dΦ/dt = A(t) Φ`, `Φ(t0) = I`, with `A` given as a closure.
pub fn evolution_operator_fn<T: Real>(
    n: usize,
    a: &(dyn Fn(T) -> DMatrix<T> + Sync),
    t0: T,
    t1: T,
    cfg: &IntegratorConfig<T>,
) -> Result<DMatrix<T>> {
    if t1 < t0 {
        return Err(Error::Interval(to_f64(t0), to_f64(t1)));
    }
    if t1 == t0 {
        return Ok(DMatrix::identity(n, n));
    }
    let sys = LinearMatrixOde { n, a, right: false };
    let grid = TimeGrid::new(vec![t0, t1])?;
    let id = DMatrix::<T>::identity(n, n);
    let y0 = DVector::from_column_slice(id.as_slice());
    let traj = integrate_ivp(&sys, &y0, &grid, cfg, Direction::Forward)?;
    Ok(DMatrix::from_column_slice(n, n, traj.last().as_slice()))
}

/// `Φ_A(t1, t0)`.
pub fn evolution_operator<T: Real>(
    a: &MatrixFunction<T>,
    t0: T,
    t1: T,
    cfg: &IntegratorConfig<T>,
) -> Result<DMatrix<T>> {
    let f = |t: T| a.eval(t).into_owned();
    evolution_operator_fn(a.rows(), &f, t0, t1, cfg)
}

/// `Φ_A(t0, s)` for every node `s` of `grid` (with `t0` the first node).
pub(crate) fn inverse_evolution_on_grid<T: Real>(
    n: usize,
    a: &(dyn Fn(T) -> DMatrix<T> + Sync),
    grid: &TimeGrid<T>,
    cfg: &IntegratorConfig<T>,
) -> Result<Vec<DMatrix<T>>> {
    let sys = LinearMatrixOde { n, a, right: true };
    let id = DMatrix::<T>::identity(n, n);
    let y0 = DVector::from_column_slice(id.as_slice());
    let traj = integrate_ivp(&sys, &y0, grid, cfg, Direction::Forward)?;
    Ok(traj.values().iter().map(|v| DMatrix::from_column_slice(n, n, v.as_slice())).collect())
}

/// Nodes of composite Simpson with `n_panels` panels (each panel has a midpoint).
pub fn simpson_grid<T: Real>(t0: T, t1: T, n_panels: usize) -> Result<TimeGrid<T>> {
    TimeGrid::uniform(t0, t1, 2 * n_panels.max(1))
}

/// Weights matching [`simpson_grid`].
pub fn simpson_weights<T: Real>(t0: T, t1: T, n_panels: usize) -> Vec<T> {
    let n = n_panels.max(1);
    let h = (t1 - t0) / lit::<T>(n as f64);
    let sixth = h / lit::<T>(6.0);
    let mut w = vec![T::zero(); 2 * n + 1];
    for p in 0..n {
        w[2 * p] += sixth;
        w[2 * p + 1] += sixth * lit::<T>(4.0);
        w[2 * p + 2] += sixth;
    }
    w
}

/// Composite Simpson approximation of `∫_{t0}^{t1} f(t) dt` for matrix-valued `f`.
pub fn quadrature<T: Real>(f: impl Fn(T) -> DMatrix<T>, t0: T, t1: T, n_panels: usize) -> Result<DMatrix<T>> {
    if !(t1 > t0) {
        return Err(Error::Interval(to_f64(t0), to_f64(t1)));
    }
    if n_panels == 0 {
        return Err(Error::InvalidArgument("n_panels must be at least 1".into()));
    }
    let grid = simpson_grid(t0, t1, n_panels)?;
    let w = simpson_weights(t0, t1, n_panels);
    let mut acc: Option<DMatrix<T>> = None;
    for (&t, &wi) in grid.nodes().iter().zip(&w) {
        let v = f(t) * wi;
        acc = Some(match acc {
            None => v,
            Some(a) => a + v,
        });
    }
    Ok(acc.unwrap())
}
