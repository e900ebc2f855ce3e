//! Time-varying LQ problem data, assumption checks and subproblem truncation.

use std::borrow::Cow;
use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{asymmetry, spectral_norm, sym_eig_extremes};
use crate::scalar::{lit, to_f64, Real};

type MatFn<T> = Arc<dyn Fn(T) -> DMatrix<T> + Send + Sync>;

#[derive(Clone)]
enum Kind<T: Real> {
    Constant(DMatrix<T>),
    Varying(MatFn<T>),
}

/// A `rows × cols` matrix depending on time.
#[derive(Clone)]
pub struct MatrixFunction<T: Real> {
    rows: usize,
    cols: usize,
    kind: Kind<T>,
}

impl<T: Real> fmt::Debug for MatrixFunction<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match self.kind {
            Kind::Constant(_) => "constant",
            Kind::Varying(_) => "time-varying",
        };
        write!(f, "MatrixFunction({}x{}, {})", self.rows, self.cols, kind)
    }
}

impl<T: Real> MatrixFunction<T> {
    pub fn constant(m: DMatrix<T>) -> Self {
        MatrixFunction { rows: m.nrows(), cols: m.ncols(), kind: Kind::Constant(m) }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::constant(DMatrix::zeros(rows, cols))
    }

    pub fn identity(n: usize) -> Self {
        Self::constant(DMatrix::identity(n, n))
    }

    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(T) -> DMatrix<T> + Send + Sync + 'static) -> Self {
        MatrixFunction { rows, cols, kind: Kind::Varying(Arc::new(f)) }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_constant(&self) -> bool {
        matches!(self.kind, Kind::Constant(_))
    }

    /// True for a constant all-zero matrix.
    pub fn is_zero(&self) -> bool {
        match &self.kind {
            Kind::Constant(m) => m.iter().all(|v| *v == T::zero()),
            Kind::Varying(_) => false,
        }
    }

    pub fn eval(&self, t: T) -> Cow<'_, DMatrix<T>> {
        match &self.kind {
            Kind::Constant(m) => Cow::Borrowed(m),
            Kind::Varying(f) => {
                let m = f(t);
                debug_assert_eq!((m.nrows(), m.ncols()), (self.rows, self.cols), "matrix function shape");
                Cow::Owned(m)
            }
        }
    }

    pub fn transpose(&self) -> Self {
        match &self.kind {
            Kind::Constant(m) => Self::constant(m.transpose()),
            Kind::Varying(f) => {
                let f = f.clone();
                Self::from_fn(self.cols, self.rows, move |t| f(t).transpose())
            }
        }
    }
}

/// Parameterized LQ problem on `[t_start, t_end]`:
///
/// minimize ½∫ [x;u;d]ᵀ [[Q, Hᵀ, Gᵀ], [H, R, Wᵀ], [G, W, 0]] [x;u;d] dt
///          + ½ [x(T); d_T]ᵀ [[Q_T, G_Tᵀ], [G_T, 0]] [x(T); d_T]
/// s.t.     ẋ = A x + B u + C d, x(t_start) = d0.
///
/// `G_T` is `n_d × n_x` so that the terminal cross term is `x(T)ᵀ G_Tᵀ d_T`.
#[derive(Clone, Debug)]
pub struct LqProblem<T: Real> {
    pub t_start: T,
    pub t_end: T,
    pub a: MatrixFunction<T>,
    pub b: MatrixFunction<T>,
    pub c: MatrixFunction<T>,
    pub q: MatrixFunction<T>,
    pub h: MatrixFunction<T>,
    pub r: MatrixFunction<T>,
    pub w: MatrixFunction<T>,
    pub g: MatrixFunction<T>,
    pub q_t: DMatrix<T>,
    pub g_t: DMatrix<T>,
    /// Parameter trajectory, `n_d × 1`.
    pub d: MatrixFunction<T>,
    pub d0: DVector<T>,
    pub d_t: DVector<T>,
}

impl<T: Real> LqProblem<T> {
    /// Classic problem: no parameter coupling (`n_d = 1`, all couplings zero).
    #[allow(clippy::too_many_arguments)]
    pub fn classic(
        horizon: T,
        a: MatrixFunction<T>,
        b: MatrixFunction<T>,
        q: MatrixFunction<T>,
        h: MatrixFunction<T>,
        r: MatrixFunction<T>,
        q_t: DMatrix<T>,
        x0: DVector<T>,
    ) -> Result<Self> {
        let (nx, nu) = (a.rows(), b.cols());
        let p = LqProblem {
            t_start: T::zero(),
            t_end: horizon,
            a,
            b,
            c: MatrixFunction::zeros(nx, 1),
            q,
            h,
            r,
            w: MatrixFunction::zeros(1, nu),
            g: MatrixFunction::zeros(1, nx),
            q_t,
            g_t: DMatrix::zeros(1, nx),
            d: MatrixFunction::zeros(1, 1),
            d0: x0,
            d_t: DVector::zeros(1),
        };
        p.check_shapes()?;
        Ok(p)
    }

    /// Replaces the parameter coupling blocks.
    #[allow(clippy::too_many_arguments)]
    pub fn with_parameter(
        mut self,
        c: MatrixFunction<T>,
        g: MatrixFunction<T>,
        w: MatrixFunction<T>,
        d: MatrixFunction<T>,
        g_t: DMatrix<T>,
        d_t: DVector<T>,
    ) -> Result<Self> {
        self.c = c;
        self.g = g;
        self.w = w;
        self.d = d;
        self.g_t = g_t;
        self.d_t = d_t;
        self.check_shapes()?;
        Ok(self)
    }

    pub fn nx(&self) -> usize {
        self.a.rows()
    }

    pub fn nu(&self) -> usize {
        self.b.cols()
    }

    pub fn nd(&self) -> usize {
        self.d.rows()
    }

    pub fn horizon(&self) -> T {
        self.t_end - self.t_start
    }

    /// True when no parameter term can influence the solution.
    pub fn is_classic(&self) -> bool {
        self.c.is_zero() && self.g.is_zero() && self.w.is_zero() && (self.d.is_zero() || self.nd() == 0)
            && self.g_t.iter().all(|v| *v == T::zero())
    }

    pub fn check_shapes(&self) -> Result<()> {
        let (nx, nu, nd) = (self.nx(), self.nu(), self.nd());
        let expect = |name: &str, m: (usize, usize), e: (usize, usize)| -> Result<()> {
            if m != e {
                return Err(Error::Dimension(format!("{} is {}x{}, expected {}x{}", name, m.0, m.1, e.0, e.1)));
            }
            Ok(())
        };
        expect("A", (self.a.rows(), self.a.cols()), (nx, nx))?;
        expect("B", (self.b.rows(), self.b.cols()), (nx, nu))?;
        expect("C", (self.c.rows(), self.c.cols()), (nx, nd))?;
        expect("Q", (self.q.rows(), self.q.cols()), (nx, nx))?;
        expect("H", (self.h.rows(), self.h.cols()), (nu, nx))?;
        expect("R", (self.r.rows(), self.r.cols()), (nu, nu))?;
        expect("W", (self.w.rows(), self.w.cols()), (nd, nu))?;
        expect("G", (self.g.rows(), self.g.cols()), (nd, nx))?;
        expect("Q_T", self.q_t.shape(), (nx, nx))?;
        expect("G_T", self.g_t.shape(), (nd, nx))?;
        expect("d", (self.d.rows(), self.d.cols()), (nd, 1))?;
        expect("d0", (self.d0.len(), 1), (nx, 1))?;
        expect("d_T", (self.d_t.len(), 1), (nd, 1))?;
        if !(self.t_end > self.t_start) {
            return Err(Error::Interval(to_f64(self.t_start), to_f64(self.t_end)));
        }
        Ok(())
    }

    pub fn d_at(&self, t: T) -> DVector<T> {
        let m = self.d.eval(t);
        DVector::from_column_slice(m.as_slice())
    }

    /// `G_Tᵀ d_T`, the linear part of the terminal gradient.
    pub fn terminal_linear(&self) -> DVector<T> {
        self.g_t.transpose() * &self.d_t
    }

    /// Running cost ½[x;u;d]ᵀM[x;u;d] at time `t` (constant d-only term dropped).
    pub fn running_cost(&self, t: T, x: &DVector<T>, u: &DVector<T>) -> T {
        let half = lit::<T>(0.5);
        let q = self.q.eval(t);
        let h = self.h.eval(t);
        let r = self.r.eval(t);
        let mut cost = half * x.dot(&(&*q * x)) + u.dot(&(&*h * x)) + half * u.dot(&(&*r * u));
        if !(self.g.is_zero() && self.w.is_zero()) {
            let d = self.d_at(t);
            cost += d.dot(&(&*self.g.eval(t) * x)) + d.dot(&(&*self.w.eval(t) * u));
        }
        cost
    }

    /// Terminal cost ½xᵀQ_T x + xᵀG_Tᵀd_T.
    pub fn terminal_cost(&self, x: &DVector<T>) -> T {
        lit::<T>(0.5) * x.dot(&(&self.q_t * x)) + x.dot(&self.terminal_linear())
    }
}

/// Sampled bounds and coercivity constants of a problem.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AssumptionReport<T> {
    pub lambda_a: T,
    pub lambda_b: T,
    pub lambda_c: T,
    pub lambda_q: T,
    pub lambda_h: T,
    pub lambda_r: T,
    pub lambda_w: T,
    pub lambda_g: T,
    pub gamma_r: T,
    pub gamma_q: T,
    pub qt_min: T,
    pub qt_max: T,
    /// Smallest eigenvalue of Q(t) over the samples.
    pub q_min: T,
    pub pass: bool,
}

impl<T: Real> AssumptionReport<T> {
    /// Coercivity constant valid for both the running and the terminal cost.
    pub fn gamma_q_effective(&self) -> T {
        self.gamma_q.min(self.qt_min)
    }
}

pub const SYMMETRY_TOL: f64 = 1e-10;
pub const POSITIVITY_TOL: f64 = 1e-12;

/// Samples the problem on `samples` uniform points and collects the constants.
///
/// `lambda_q` covers both `Q(t)` and `Q_T`; `lambda_g` covers `G(t)` and `G_T`.
pub fn validate_assumptions<T: Real>(problem: &LqProblem<T>, samples: usize) -> Result<AssumptionReport<T>> {
    if samples < 2 {
        return Err(Error::InvalidArgument("validate_assumptions needs at least 2 samples".into()));
    }
    problem.check_shapes()?;
    let sym_tol = lit::<T>(SYMMETRY_TOL);
    let check_sym = |name: &'static str, m: &DMatrix<T>, t: T| -> Result<()> {
        let a = asymmetry(m);
        if a > sym_tol {
            return Err(Error::NotSymmetric { name, t: to_f64(t), asymmetry: to_f64(a) });
        }
        Ok(())
    };
    check_sym("Q_T", &problem.q_t, problem.t_end)?;
    let inf = lit::<T>(f64::INFINITY);
    let mut rep = AssumptionReport {
        lambda_a: T::zero(),
        lambda_b: T::zero(),
        lambda_c: T::zero(),
        lambda_q: T::zero(),
        lambda_h: T::zero(),
        lambda_r: T::zero(),
        lambda_w: T::zero(),
        lambda_g: spectral_norm(&problem.g_t),
        gamma_r: inf,
        gamma_q: inf,
        qt_min: T::zero(),
        qt_max: T::zero(),
        q_min: inf,
        pass: false,
    };
    let (qt_min, qt_max) = sym_eig_extremes(&problem.q_t);
    rep.qt_min = qt_min;
    rep.qt_max = qt_max;
    rep.lambda_q = qt_max.abs();
    let step = problem.horizon() / lit::<T>((samples - 1) as f64);
    for i in 0..samples {
        let t = if i + 1 == samples { problem.t_end } else { problem.t_start + step * lit::<T>(i as f64) };
        let q = problem.q.eval(t);
        let r = problem.r.eval(t);
        check_sym("Q", &q, t)?;
        check_sym("R", &r, t)?;
        let h = problem.h.eval(t);
        rep.lambda_a = rep.lambda_a.max(spectral_norm(&problem.a.eval(t)));
        rep.lambda_b = rep.lambda_b.max(spectral_norm(&problem.b.eval(t)));
        rep.lambda_c = rep.lambda_c.max(spectral_norm(&problem.c.eval(t)));
        rep.lambda_q = rep.lambda_q.max(spectral_norm(&q));
        rep.lambda_h = rep.lambda_h.max(spectral_norm(&h));
        rep.lambda_r = rep.lambda_r.max(spectral_norm(&r));
        rep.lambda_w = rep.lambda_w.max(spectral_norm(&problem.w.eval(t)));
        rep.lambda_g = rep.lambda_g.max(spectral_norm(&problem.g.eval(t)));
        let (r_min, _) = sym_eig_extremes(&r);
        rep.gamma_r = rep.gamma_r.min(r_min);
        rep.q_min = rep.q_min.min(sym_eig_extremes(&q).0);
        let schur = match r.clone().into_owned().try_inverse() {
            Some(ri) if r_min > T::zero() => &*q - h.transpose() * ri * &*h,
            _ => {
                // no valid Schur complement when R is not invertible
                rep.gamma_q = rep.gamma_q.min(lit(f64::NEG_INFINITY));
                continue;
            }
        };
        rep.gamma_q = rep.gamma_q.min(sym_eig_extremes(&schur).0);
    }
    let pos = lit::<T>(POSITIVITY_TOL);
    let lambdas = [
        rep.lambda_a,
        rep.lambda_b,
        rep.lambda_c,
        rep.lambda_q,
        rep.lambda_h,
        rep.lambda_r,
        rep.lambda_w,
        rep.lambda_g,
    ];
    rep.pass = rep.gamma_r > pos
        && rep.gamma_q > pos
        && rep.qt_min > pos
        && lambdas.iter().all(|l| l.is_finite());
    Ok(rep)
}

/// Restriction of `problem` to `[t0, t1]` with initial state `p`.
///
/// The last subproblem keeps the original terminal cost. Interior ones get
/// ½xᵀQ(t1)x − xᵀQ(t1)q, written with extra parameter components: the parameter
/// becomes `[d; 0]` with terminal value `[0; q]` and `G_T = [0, −Q(t1)]ᵀ`-block.
pub fn truncate_to_subproblem<T: Real>(
    problem: &LqProblem<T>,
    t0: T,
    t1: T,
    p: &DVector<T>,
    q: &DVector<T>,
    is_last: bool,
) -> Result<LqProblem<T>> {
    if !(t1 > t0) || t0 < problem.t_start || t1 > problem.t_end {
        return Err(Error::Interval(to_f64(t0), to_f64(t1)));
    }
    let nx = problem.nx();
    if p.len() != nx || q.len() != nx {
        return Err(Error::Dimension("boundary parameters must have state dimension".into()));
    }
    let mut sub = problem.clone();
    sub.t_start = t0;
    sub.t_end = t1;
    sub.d0 = p.clone();
    if is_last {
        return Ok(sub);
    }
    let q1 = problem.q.eval(t1).into_owned();
    if problem.is_classic() {
        sub.c = MatrixFunction::zeros(nx, nx);
        sub.g = MatrixFunction::zeros(nx, nx);
        sub.w = MatrixFunction::zeros(nx, problem.nu());
        sub.d = MatrixFunction::zeros(nx, 1);
        sub.q_t = q1.clone();
        sub.g_t = -q1;
        sub.d_t = q.clone();
        return Ok(sub);
    }
    let nd = problem.nd();
    let nu = problem.nu();
    let pad_rows = |m: &MatrixFunction<T>, cols: usize| -> MatrixFunction<T> {
        if m.is_constant() {
            let mut out = DMatrix::zeros(nd + nx, cols);
            out.rows_mut(0, nd).copy_from(&*m.eval(T::zero()));
            MatrixFunction::constant(out)
        } else {
            let m = m.clone();
            MatrixFunction::from_fn(nd + nx, cols, move |t| {
                let mut out = DMatrix::zeros(nd + nx, cols);
                out.rows_mut(0, nd).copy_from(&*m.eval(t));
                out
            })
        }
    };
    sub.g = pad_rows(&problem.g, nx);
    sub.w = pad_rows(&problem.w, nu);
    sub.d = pad_rows(&problem.d, 1);
    let c = problem.c.clone();
    sub.c = MatrixFunction::from_fn(nx, nd + nx, move |t| {
        let mut out = DMatrix::zeros(nx, nd + nx);
        out.columns_mut(0, nd).copy_from(&*c.eval(t));
        out
    });
    if problem.c.is_constant() {
        sub.c = MatrixFunction::constant(sub.c.eval(T::zero()).into_owned());
    }
    let mut g_t = DMatrix::zeros(nd + nx, nx);
    g_t.rows_mut(nd, nx).copy_from(&(-&q1));
    sub.g_t = g_t;
    let mut d_t = DVector::zeros(nd + nx);
    d_t.rows_mut(nd, nx).copy_from(q);
    sub.d_t = d_t;
    sub.q_t = q1;
    sub.check_shapes()?;
    Ok(sub)
}
