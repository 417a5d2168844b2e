//! Copula-based semiparametric regression for bivariate interval-censored
//! data: two-parameter Archimedean copula, Bernstein-sieve margins under
//! linear transformation models, two-step sieve estimation, generalized
//! score tests, simulation and joint survival prediction.

pub mod copula;
pub mod error;
pub mod estimator;
pub mod experiment;
pub mod io;
pub mod likelihood;
pub mod margins;
pub mod numdiff;
pub mod optim;
pub mod par;
pub mod predict;
pub mod scoretest;
pub mod simulate;

pub use error::{Error, Result};
