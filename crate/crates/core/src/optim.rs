//! Box-constrained projected gradient descent with Armijo backtracking,
//! generic over the model supplying cost and gradient so the same loop
//! drives the full-order and the reduced-order stacks.

use crate::control::{control_inner, control_norm, project_box, BoxBounds, ControlVector, TimeGrid};
use crate::{Error, Result};

/// Cost functional value split into its three terms.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct CostBreakdown {
    pub tracking: f64,
    pub terminal: f64,
    pub penalty: f64,
}

impl CostBreakdown {
    pub fn total(&self) -> f64 {
        self.tracking + self.terminal + self.penalty
    }
}

/// Contract between the optimizer and a model: evaluate the reduced cost and
/// its gradient in the trapezoidal Riesz representation.
pub trait Model {
    fn grid(&self) -> TimeGrid;
    fn n_components(&self) -> usize;
    fn cost(&mut self, u: &ControlVector) -> Result<CostBreakdown>;
    fn cost_and_gradient(&mut self, u: &ControlVector) -> Result<(CostBreakdown, ControlVector)>;
}

/// One optimizer iteration, mirroring one row of the printed history.
#[derive(Clone, Copy, Debug)]
pub struct IterationRecord {
    pub k: usize,
    pub cost: f64,
    pub grad_norm: f64,
    /// Armijo step taken *from* this iterate; empty on the final row.
    pub step: Option<f64>,
}

/// Why the loop ended.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopReason {
    /// Gradient norm fell below `0.01 |g0| + 0.01`.
    Converged,
    MaxIterations,
    /// Line search exhausted its backtracks; best iterate returned.
    LineSearchFailed,
}

#[derive(Clone, Copy, Debug)]
pub struct OptimSettings {
    pub s_init: f64,
    pub shrink: f64,
    pub c_armijo: f64,
    pub max_iters: usize,
    pub max_backtracks: usize,
    pub tol_rel: f64,
    pub tol_abs: f64,
}

impl Default for OptimSettings {
    fn default() -> Self {
        OptimSettings {
            s_init: 1.0,
            shrink: 0.25,
            c_armijo: 1e-4,
            max_iters: 50,
            max_backtracks: 25,
            tol_rel: 0.01,
            tol_abs: 0.01,
        }
    }
}

pub struct OptimResult {
    pub u: ControlVector,
    pub records: Vec<IterationRecord>,
    pub reason: StopReason,
    pub cost: CostBreakdown,
}

/// Backtracking line search with the projected sufficient-decrease rule:
/// accept the largest `s` in `{s_init * shrink^j}` with
/// `J(P(u - s g)) <= J(u) - (c/s) |P(u - s g) - u|^2`.
/// Returns the step, the accepted iterate and its cost.
pub fn armijo_search(
    u: &ControlVector,
    g: &ControlVector,
    cost_u: f64,
    model: &mut dyn Model,
    bounds: &BoxBounds,
    settings: &OptimSettings,
) -> Result<(f64, ControlVector, CostBreakdown)> {
    let grid = model.grid();
    let mut s = settings.s_init;
    for _ in 0..=settings.max_backtracks {
        let mut trial = u.clone();
        trial.axpy(-s, g);
        let trial = project_box(&trial, bounds);
        let mut d = trial.clone();
        d.axpy(-1.0, u);
        let move2 = control_inner(&d, &d, &grid);
        if move2 == 0.0 {
            // projection swallowed the whole step; shrinking cannot help
            return Err(Error::LineSearchFailed {
                backtracks: settings.max_backtracks,
            });
        }
        let cb = model.cost(&trial)?;
        if cb.total() <= cost_u - settings.c_armijo / s * move2 {
            return Ok((s, trial, cb));
        }
        s *= settings.shrink;
    }
    Err(Error::LineSearchFailed {
        backtracks: settings.max_backtracks,
    })
}

/// Projected gradient descent from `u0`, stopping when
/// `|g_k| < tol_rel * |g_0| + tol_abs` or the iteration cap is reached.
pub fn projected_gradient(
    u0: &ControlVector,
    model: &mut dyn Model,
    bounds: &BoxBounds,
    settings: &OptimSettings,
) -> Result<OptimResult> {
    let grid = model.grid();
    let mut u = project_box(u0, bounds);
    let mut records = Vec::new();
    let mut threshold = f64::NAN;
    let mut k = 0;
    loop {
        let (cb, g) = model.cost_and_gradient(&u)?;
        let gnorm = control_norm(&g, &grid);
        if k == 0 {
            threshold = settings.tol_rel * gnorm + settings.tol_abs;
        }
        records.push(IterationRecord {
            k,
            cost: cb.total(),
            grad_norm: gnorm,
            step: None,
        });
        if gnorm < threshold {
            return Ok(OptimResult {
                u,
                records,
                reason: StopReason::Converged,
                cost: cb,
            });
        }
        if k >= settings.max_iters {
            return Ok(OptimResult {
                u,
                records,
                reason: StopReason::MaxIterations,
                cost: cb,
            });
        }
        match armijo_search(&u, &g, cb.total(), model, bounds, settings) {
            Ok((s, u_next, _)) => {
                records.last_mut().unwrap().step = Some(s);
                u = u_next;
                k += 1;
            }
            Err(Error::LineSearchFailed { .. }) => {
                return Ok(OptimResult {
                    u,
                    records,
                    reason: StopReason::LineSearchFailed,
                    cost: cb,
                });
            }
            Err(e) => return Err(e),
        }
    }
}
