use thiserror::Error;

/// Errors surfaced by the solver stack.
#[derive(Debug, Error)]
pub enum Error {
    #[error("field/mesh mismatch: field is bound to mesh {field_mesh}, expected mesh {expected}")]
    MeshMismatch { field_mesh: u64, expected: u64 },

    #[error("field length {len} does not match vertex count {nv}")]
    FieldLength { len: usize, nv: usize },

    #[error("target mesh {to} does not refine source mesh {from}")]
    NotARefinement { from: u64, to: u64 },

    #[error("Newton iteration failed to converge after {iters} iterations (residual {residual:.3e}); time step too large or CFL violated")]
    NewtonDiverged { iters: usize, residual: f64 },

    #[error("sparse factorization failed: {0}")]
    Factorization(String),

    #[error("CFL condition violated: max |v| dt / h_min = {cfl:.3} > 1")]
    CflViolation { cfl: f64 },

    #[error("line search failed after {backtracks} backtracks")]
    LineSearchFailed { backtracks: usize },

    #[error("requested {requested} modes but snapshot set has numerical rank {rank}")]
    RankDeficient { requested: usize, rank: usize },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("time index {index} out of range (n_steps = {n_steps})")]
    TimeIndex { index: usize, n_steps: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("parse error in {file}: {msg}")]
    Parse { file: String, msg: String },
}
