//! Optimal control of the convective Cahn-Hilliard system on the unit square.
//!
//! The crate provides the full-order stack (adaptive P1 finite elements,
//! semi-implicit convex-splitting time integration, discrete adjoints,
//! box-constrained projected gradient descent) together with a POD/DEIM
//! reduced-order layer built from snapshots that may live on mutually
//! different adapted meshes.

pub mod adjoint;
pub mod control;
pub mod deim;
pub mod fem;
pub mod fom;
pub mod io;
pub mod mesh;
pub mod optim;
pub mod pod;
pub mod rom;
pub mod run;
pub mod sparse;
pub mod state;

mod error;

pub use error::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Configures the number of worker threads used by the linear algebra
/// backend. `1` forces fully sequential execution, which also makes all
/// outputs byte-deterministic.
pub fn init_threads(n: usize) {
    if n <= 1 {
        faer::set_global_parallelism(faer::Par::Seq);
    } else {
        faer::set_global_parallelism(faer::Par::rayon(n));
    }
}
