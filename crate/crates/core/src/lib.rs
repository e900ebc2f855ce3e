//! Overlapping Schwarz decomposition in time for linear-quadratic optimal
//! control with time-varying data.
//!
//! The solvers are generic over the scalar (`f32` or `f64`, see [`Real`]);
//! the aliases below fix it to `f64`, which is what the experiment drivers use.
//!
//! ```
//! use schwarz_core::{registry, ode::{IntegratorConfig, Method, TimeGrid}, reference};
//!
//! let p: schwarz_core::LqProblem64 = registry::margin_test(2.0).unwrap();
//! let grid = TimeGrid::with_step(0.0, 2.0, 0.01).unwrap();
//! let sol = reference::solve_full_riccati(&p, &grid, &IntegratorConfig::fixed(Method::Rk4, 0.01)).unwrap();
//! assert_eq!(sol.x.first().as_slice(), &[1.0, -1.0]);
//! ```

pub mod error;
pub mod linalg;
pub mod ltv_model;
pub mod ode;
pub mod scalar;
pub mod controllability;
pub mod riccati;
pub mod pmp;
pub mod reference;
pub mod registry;
pub mod schwarz;
pub mod experiments;

pub use error::{Error, Result};
pub use scalar::Real;

pub type LqProblem64 = ltv_model::LqProblem<f64>;
pub type MatrixFunction64 = ltv_model::MatrixFunction<f64>;
pub type TimeGrid64 = ode::TimeGrid<f64>;
pub type Trajectory64 = ode::Trajectory<f64>;
pub type IntegratorConfig64 = ode::IntegratorConfig<f64>;
pub type GdConfig64 = pmp::GdConfig<f64>;
pub type Solution64 = riccati::Solution<f64>;
pub type RiccatiSolution64 = riccati::RiccatiSolution<f64>;
pub type ConstantsBundle64 = riccati::ConstantsBundle<f64>;
pub type PartitionSpec64 = schwarz::PartitionSpec<f64>;
pub type Layout64 = schwarz::Layout<f64>;
pub type SchwarzIterate64 = schwarz::SchwarzIterate<f64>;
