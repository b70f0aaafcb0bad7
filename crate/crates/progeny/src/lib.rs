//! Exact and asymptotic analysis of multi-type branching process total progeny.
//!
//! The crate computes the joint distribution of the total progeny vector
//! `T` of a multi-type Galton-Watson process by three independent
//! generating-function routes, evaluates the exponential decay rate
//! `Γ(ρ) = sup_λ { λ·ρ − Σ_k ρ_k log E[exp(λ·X_k)] }` of `P(T = n)` along
//! rays `n ≈ |n|ρ`, and checks the two against each other by tilted
//! Monte Carlo and a random-graph component census.
//!
//! Modules map onto the pipeline stages:
//!
//! * [`model`] — offspring models, moment structure, validation.
//! * [`series`] — truncated multivariate power series and the exact
//!   progeny tables (fixed point of the implicit PGF system, plus the
//!   Lagrange-Good and arborescent inversion oracles).
//! * [`rate`] — the rate function, its minimizer over the simplex, and
//!   the per-coordinate tilting construction.
//! * [`sim`] — count-based process simulation with optional exponential
//!   tilting and unbiased importance weights.
//! * [`graph`] — inhomogeneous Erdős-Rényi component sampling and its
//!   Poisson branching-process local limit.

pub mod graph;
pub mod model;
pub mod rate;
pub mod series;
pub mod sim;

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("arity mismatch: expected {expected} types, got {got}")]
    ArityMismatch { expected: usize, got: usize },

    #[error("type index {0} out of range")]
    TypeIndex(usize),

    #[error("MGF overflow at lambda = {0:?}; rescale via log_mgf")]
    MgfOverflow(Vec<f64>),

    #[error("power iteration did not converge after {0} iterations")]
    PowerIterationDiverged(usize),

    #[error("series inverse requires a nonzero constant term")]
    ZeroConstantTerm,

    #[error("coefficient underflowed to subnormal at exponent {0:?}; result not representable in linear scale")]
    Underflow(Vec<u32>),

    #[error("series storage too large: m = {m}, truncation {n}")]
    SeriesTooLarge { m: usize, n: usize },

    #[error("{0} requires table offspring distributions")]
    TableOnly(&'static str),

    #[error("{0} requires all-Poisson offspring distributions")]
    PoissonOnly(&'static str),

    #[error("oracle budget exceeded: |n| = {got} > {budget}")]
    OracleBudget { got: usize, budget: usize },

    #[error("arborescent inversion needs n >= 1 componentwise, got {0:?}")]
    ZeroComponent(Vec<u32>),

    #[error("rho must lie in the interior of the simplex (margin {margin}): {rho:?}")]
    BoundaryRho { rho: Vec<f64>, margin: f64 },

    #[error("Newton ascent diverged: |lambda| exceeded {0}; the supremum is not attained in this direction")]
    RateDiverged(f64),

    #[error("rate solver did not reach tolerance after {0} iterations")]
    RateNotConverged(usize),

    #[error("offspring coordinates of type {0} are not independent; the tilting pathway needs product form")]
    NotProductForm(usize),

    #[error("tilting function phi_{j} has no interior minimizer (support degenerate)")]
    TiltDegenerate { j: usize },

    #[error("mean matrix is not right stochastic; row sums {0:?}")]
    NotRightStochastic(Vec<f64>),

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("empty sample batch")]
    EmptyBatch,

    #[error("graph spec invalid: {0}")]
    InvalidGraphSpec(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
