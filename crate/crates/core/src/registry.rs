//! Named problem instances.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::ltv_model::{LqProblem, MatrixFunction};
use crate::scalar::{lit, Real};

/// Scalar parameters shared by the registry entries.
#[derive(Clone, Debug, PartialEq)]
pub struct ProblemParams {
    pub xi: f64,
    pub horizon: f64,
    pub theta: f64,
    pub alpha: f64,
    pub n_diag: (f64, f64),
    pub x0: (f64, f64),
}

impl Default for ProblemParams {
    fn default() -> Self {
        ProblemParams { xi: 4.0, horizon: 5.0, theta: 3.0, alpha: 100.0, n_diag: (1.0, 0.25), x0: (0.0, 0.0) }
    }
}

pub const PROBLEMS: [(&str, &str); 3] = [
    ("linearized_two_state", "2-state diag(-1,-xi) system with soft terminal target on x1 + 2 x2"),
    ("margin_test", "2-state problem with Q=2I, R=I, H=0.1*ones, A=-I, B=I, Q_T=I"),
    ("margin_test_coupled", "margin_test with nonzero parameter couplings C, G, W"),
];

pub fn build<T: Real>(name: &str, params: &ProblemParams) -> Result<LqProblem<T>> {
    match name {
        "linearized_two_state" => linearized_two_state(
            lit(params.xi),
            lit(params.horizon),
            lit(params.theta),
            lit(params.alpha),
            (lit(params.n_diag.0), lit(params.n_diag.1)),
            DVector::from_vec(vec![lit(params.x0.0), lit(params.x0.1)]),
        ),
        "margin_test" => margin_test(lit(params.horizon)),
        "margin_test_coupled" => margin_test_coupled(lit(params.horizon)),
        _ => Err(Error::InvalidArgument(format!(
            "unknown problem '{}' (known: {})",
            name,
            PROBLEMS.iter().map(|p| p.0).collect::<Vec<_>>().join(", ")
        ))),
    }
}

fn diag<T: Real>(a: T, b: T) -> DMatrix<T> {
    DMatrix::from_diagonal(&DVector::from_vec(vec![a, b]))
}

/// Linearized two-state problem with terminal cost
/// `α/2 (cᵀx − θ)²`, `c = (1, 2)`, up to a constant.
pub fn linearized_two_state<T: Real>(
    xi: T,
    horizon: T,
    theta: T,
    alpha: T,
    n_diag: (T, T),
    x0: DVector<T>,
) -> Result<LqProblem<T>> {
    if !(xi > T::zero()) || !(alpha >= T::zero()) || !(horizon > T::zero()) {
        return Err(Error::InvalidArgument("need xi > 0, alpha >= 0, T > 0".into()));
    }
    if x0.len() != 2 {
        return Err(Error::Dimension("x0 must have two components".into()));
    }
    let c = DVector::from_vec(vec![T::one(), lit(2.0)]);
    LqProblem::classic(
        horizon,
        MatrixFunction::constant(diag(-T::one(), -xi)),
        MatrixFunction::constant(diag(n_diag.0, n_diag.1)),
        MatrixFunction::identity(2),
        MatrixFunction::zeros(2, 2),
        MatrixFunction::identity(2),
        &c * c.transpose() * alpha,
        x0,
    )?
    .with_parameter(
        MatrixFunction::zeros(2, 1),
        MatrixFunction::zeros(1, 2),
        MatrixFunction::zeros(1, 2),
        MatrixFunction::zeros(1, 1),
        DMatrix::from_row_slice(1, 2, c.as_slice()),
        DVector::from_element(1, -alpha * theta),
    )
}

pub fn margin_test<T: Real>(horizon: T) -> Result<LqProblem<T>> {
    LqProblem::classic(
        horizon,
        MatrixFunction::constant(-DMatrix::identity(2, 2)),
        MatrixFunction::identity(2),
        MatrixFunction::constant(DMatrix::identity(2, 2) * lit::<T>(2.0)),
        MatrixFunction::constant(DMatrix::from_element(2, 2, lit(0.1))),
        MatrixFunction::identity(2),
        DMatrix::identity(2, 2),
        DVector::from_vec(vec![T::one(), -T::one()]),
    )
}

/// `margin_test` with a one-dimensional parameter entering through C, G, W.
pub fn margin_test_coupled<T: Real>(horizon: T) -> Result<LqProblem<T>> {
    let col = |a: f64, b: f64| DMatrix::from_column_slice(2, 1, &[lit(a), lit(b)]);
    let row = |a: f64, b: f64| DMatrix::from_row_slice(1, 2, &[lit(a), lit(b)]);
    margin_test(horizon)?.with_parameter(
        MatrixFunction::constant(col(0.5, -0.3)),
        MatrixFunction::constant(row(0.2, 0.4)),
        MatrixFunction::constant(row(0.3, -0.1)),
        MatrixFunction::from_fn(1, 1, |t: T| DMatrix::from_element(1, 1, (t * lit::<T>(0.5)).sin())),
        row(0.1, -0.2),
        DVector::from_element(1, T::one()),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ltv_model::validate_assumptions;

    #[test]
    fn defaults_build() {
        let p: LqProblem<f64> = build("linearized_two_state", &ProblemParams::default()).unwrap();
        assert_eq!(p.a.eval(0.0)[(1, 1)], -4.0);
        assert_eq!(p.q_t[(1, 1)], 400.0);
        assert_eq!(p.terminal_linear().as_slice(), &[-300.0, -600.0]);
        let rep = validate_assumptions(&p, 50).unwrap();
        assert_eq!((rep.gamma_r, rep.gamma_q), (1.0, 1.0));
    }

    #[test]
    fn unknown_name_lists_choices() {
        let err = build::<f64>("nope", &ProblemParams::default()).unwrap_err();
        assert!(err.to_string().contains("margin_test"));
    }

    #[test]
    fn margin_problem_passes_assumptions() {
        for name in ["margin_test", "margin_test_coupled"] {
            let p: LqProblem<f64> = build(name, &ProblemParams { horizon: 10.0, ..Default::default() }).unwrap();
            assert!(validate_assumptions(&p, 100).unwrap().pass);
        }
    }
}
