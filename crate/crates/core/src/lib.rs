//! Exact enumeration and Monte Carlo estimation of two-point correlations,
//! replica-overlap moments and the TAP residual operator for the
//! Sherrington-Kirkpatrick spin glass at zero external field.
//!
//! The Gibbs measure on `{-1,+1}^n` is
//!
//! ```text
//! mu(sigma) = exp( beta/sqrt(n) * sum_{i<j} g_ij sigma_i sigma_j ) / Z
//! ```
//!
//! with i.i.d. standard normal couplings. [`gibbs`] enumerates it exactly for
//! small `n`, [`mcmc`] samples it for larger `n`, [`observables`] evaluates the
//! residual `((1+beta^2) I - beta A) C - I` together with the disorder-averaged
//! identities it satisfies, and [`experiment`] ties everything into
//! reproducible, seeded ensemble runs.

pub mod disorder;
pub mod error;
pub mod experiment;
pub mod gibbs;
pub mod matrix;
pub mod mcmc;
pub mod observables;
pub mod report;
pub mod spectral;
pub mod stats;

pub use disorder::{interaction_matrix, sample_couplings, tap_shift_operator, Couplings};
pub use error::{Error, Result};
pub use experiment::{run, Engine, ExperimentConfig, ExperimentReport, Kind};
pub use gibbs::{exact_summary, overlap_moments_exact, ExactSummary, OverlapMoments};
pub use matrix::{Matrix, SymMatrix};
pub use report::write_report;
