//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by the analysis pipeline.
///
/// Every failure carries the witness data (indices, points, values) needed to
/// reproduce it in isolation.
#[derive(Debug, Error)]
pub enum Error {
    /// Index outside the domain of an operator sequence or evolution family.
    #[error("index {index} outside domain [{lo}, {hi:?}) of `{name}`")]
    Domain {
        name: String,
        index: i64,
        lo: i64,
        hi: Option<i64>,
    },

    /// An operator (or accumulated product) is too close to singular.
    #[error("operator at index {index} fails conditioning floor: |det| = {det:e}, cond >= {cond:e}")]
    Conditioning { index: i64, det: f64, cond: f64 },

    /// A truncated supremum did not stabilize within the configured horizon.
    #[error("horizon {horizon} too small at index {index}: running sup still moving in the last quarter (last update at offset {last_update})")]
    Horizon {
        index: i64,
        horizon: usize,
        last_update: usize,
    },

    /// Requested dyadic block exceeds the configured original-time horizon.
    #[error("dyadic block {block} needs original time {needed} beyond horizon {max}")]
    BlockHorizon { block: i64, needed: i64, max: i64 },

    /// A supplied basis is rank-deficient.
    #[error("basis is rank deficient: rank {rank} < {cols} columns (tol {tol:e})")]
    RankDeficient { rank: usize, cols: usize, tol: f64 },

    /// A projection family fails equivariance or idempotency.
    #[error("projection family invalid at index {index}: {what} residual {residual:e} exceeds {tol:e}")]
    Projection {
        index: i64,
        what: &'static str,
        residual: f64,
        tol: f64,
    },

    /// Subspace classification could not separate a direction from the test rate.
    #[error("rate {rate} too close to the spectrum: direction {direction} has slope {slope:.3e}, margin {margin:.3e}")]
    IndeterminateRate {
        rate: f64,
        direction: usize,
        slope: f64,
        margin: f64,
    },

    /// Detected more spectral intervals than the dimension allows.
    #[error("detected {found} spectral intervals but dimension is {dim}; increase window or refine grid")]
    StructureViolation { found: usize, dim: usize },

    /// The reference point sits inside a spectral interval.
    #[error("reference point {reference} lies inside spectral interval [{lo}, {hi}]; hyperbolicity hypotheses fail")]
    NoHyperbolicity { reference: f64, lo: f64, hi: f64 },

    /// Growth bounds could not be certified, so spectra are undefined here.
    #[error("growth bounds not certified: {reason}")]
    GrowthUncertified { reason: String },

    /// Perturbation certification failure, naming the witness.
    #[error("perturbation certification failed at n = {index}, x = {point:?}: {reason}")]
    Certification {
        index: i64,
        point: Vec<f64>,
        reason: String,
    },

    /// Orbit of the perturbed system left the guarded region.
    #[error("perturbed orbit diverged at step {index}: |x| = {norm:e} exceeds guard {guard:e}")]
    OrbitDivergence { index: i64, norm: f64, guard: f64 },

    /// Block perturbation is too large for the conjugacy solver.
    #[error("perturbation size eta = {eta:e} exceeds the solver budget {budget:e}; eta must be sufficiently small")]
    Smallness { eta: f64, budget: f64 },

    /// The conjugacy iteration is not contracting.
    #[error("conjugacy iteration diverges: empirical contraction factor {factor:.3} >= 1 at iteration {iteration}")]
    SolverDivergence { factor: f64, iteration: usize },

    /// The conjugacy iteration stalled above the requested tolerance.
    #[error("conjugacy residual plateaued at {residual:e} > tol {tol:e} after {iterations} iterations")]
    SolverAccuracy {
        residual: f64,
        tol: f64,
        iterations: usize,
    },

    /// Inversion of a nonlinear step failed to converge.
    #[error("nonlinear step inversion at index {index} did not converge: residual {residual:e} after {iterations} iterations")]
    StepInversion {
        index: i64,
        residual: f64,
        iterations: usize,
    },

    /// Numerical integration failure.
    #[error("integration failed on [{from}, {to}]: {reason}")]
    Integration { from: f64, to: f64, reason: String },

    /// A regularity check failed.
    #[error("regularity check failed: {reason}")]
    Regularity { reason: String },

    /// Requested output series is not present in the report.
    #[error("report does not contain the series `{series}`")]
    NotAvailable { series: String },

    /// Invalid run configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// Malformed JSON input.
    #[error("parse error: {0}")]
    Parse(#[from] serde_json::Error),

    /// Malformed closed-form expression.
    #[error("expression error: {0}")]
    Expr(String),

    /// Precondition of an operation not met.
    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
