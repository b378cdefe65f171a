//! Tracking targets, cost evaluation and the full-order model driven by the
//! optimizer.
//!
//! Tracking norms are trapezoidal in time and mass-matrix weighted in space;
//! state and target fields that live on different meshes are compared on
//! their common refinement, with the transfer operators cached per mesh
//! pair.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use crate::control::{ControlShapes, ControlVector, TimeGrid};
use crate::fem::{assemble_mass, FEField};
use crate::mesh::{build_transfer, common_refinement, AdaptiveMesh, MeshId, TransferOp};
use crate::optim::{CostBreakdown, Model};
use crate::sparse::CsrMatrix;
use crate::state::{solve_trajectory, CHParams, SolveOptions, Trajectory};
use crate::{Error, Result};

/// Cost functional weights.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CostWeights {
    pub beta1: f64,
    pub beta2: f64,
    pub gamma: f64,
}

impl Default for CostWeights {
    fn default() -> Self {
        CostWeights {
            beta1: 20.0,
            beta2: 20.0,
            gamma: 1e-4,
        }
    }
}

impl CostWeights {
    pub fn validate(&self) -> Result<()> {
        if self.beta1 < 0.0 || self.beta2 < 0.0 || self.gamma <= 0.0 {
            return Err(Error::Config(
                "beta1, beta2 must be nonnegative and gamma positive".into(),
            ));
        }
        Ok(())
    }
}

/// Pairing of two meshes on their common refinement.
struct MeshPair {
    to_common_a: TransferOp,
    to_common_b: TransferOp,
    mass: CsrMatrix,
}

/// Result of comparing a state field against a target field.
pub struct ResidualData {
    /// `P_a^T M_c (P_a phi - P_b target)`: derivative functional on the state mesh.
    pub functional: Vec<f64>,
    /// Squared common-mesh M-norm of the difference.
    pub norm2: f64,
    /// Nodal difference interpolated back onto the state mesh.
    pub difference: Vec<f64>,
}

/// Desired trajectory and terminal target, each on its own mesh.
pub struct Targets {
    pub phi_d: Vec<FEField>,
    pub phi_d_meshes: Vec<Arc<AdaptiveMesh>>,
    pub phi_t: FEField,
    pub phi_t_mesh: Arc<AdaptiveMesh>,
    pairs: Mutex<HashMap<(MeshId, MeshId), Arc<MeshPair>>>,
}

impl Targets {
    pub fn new(
        phi_d: Vec<FEField>,
        phi_d_meshes: Vec<Arc<AdaptiveMesh>>,
        phi_t: FEField,
        phi_t_mesh: Arc<AdaptiveMesh>,
    ) -> Self {
        assert_eq!(phi_d.len(), phi_d_meshes.len());
        Targets {
            phi_d,
            phi_d_meshes,
            phi_t,
            phi_t_mesh,
            pairs: Mutex::new(HashMap::new()),
        }
    }

    /// Builds targets from a synthesized desired trajectory.
    pub fn from_trajectory(traj: &Trajectory) -> Self {
        let phi_d: Vec<FEField> = traj.steps.iter().map(|s| s.phi.clone()).collect();
        let meshes: Vec<Arc<AdaptiveMesh>> = traj.steps.iter().map(|s| s.mesh.clone()).collect();
        let last = traj.steps.len() - 1;
        Targets::new(
            phi_d,
            meshes.clone(),
            traj.steps[last].phi.clone(),
            meshes[last].clone(),
        )
    }

    pub fn n_levels(&self) -> usize {
        self.phi_d.len()
    }

    fn pair(&self, a: &Arc<AdaptiveMesh>, b: &Arc<AdaptiveMesh>) -> Arc<MeshPair> {
        let key = (a.id(), b.id());
        if let Some(hit) = self.pairs.lock().unwrap().get(&key) {
            return hit.clone();
        }
        let common = common_refinement(a, b);
        let built = Arc::new(MeshPair {
            to_common_a: build_transfer(a, &common),
            to_common_b: build_transfer(b, &common),
            mass: assemble_mass(common.geometry()),
        });
        self.pairs.lock().unwrap().insert(key, built.clone());
        built
    }

    fn residual_against(
        &self,
        phi: &FEField,
        mesh: &Arc<AdaptiveMesh>,
        target: &FEField,
        target_mesh: &Arc<AdaptiveMesh>,
    ) -> Result<ResidualData> {
        phi.check(mesh.geometry())?;
        let pair = self.pair(mesh, target_mesh);
        let pa = pair.to_common_a.apply(&phi.coeffs);
        let pb = pair.to_common_b.apply(&target.coeffs);
        let diff: Vec<f64> = pa.iter().zip(&pb).map(|(x, y)| x - y).collect();
        let m_diff = pair.mass.matvec(&diff);
        let norm2 = crate::sparse::dot(&diff, &m_diff);
        let functional = pair.to_common_a.apply_transpose(&m_diff);
        // nodal difference pulled to the state mesh (diagnostic / terminal field)
        let back = build_back_interp(mesh, target, target_mesh);
        let difference: Vec<f64> = phi.coeffs.iter().zip(&back).map(|(x, y)| x - y).collect();
        Ok(ResidualData {
            functional,
            norm2,
            difference,
        })
    }

    /// Residual of step `k` against the desired trajectory.
    pub fn tracking_residual(
        &self,
        k: usize,
        phi: &FEField,
        mesh: &Arc<AdaptiveMesh>,
    ) -> Result<Vec<f64>> {
        Ok(self
            .residual_against(phi, mesh, &self.phi_d[k], &self.phi_d_meshes[k])?
            .functional)
    }

    pub fn tracking_norm2(&self, k: usize, phi: &FEField, mesh: &Arc<AdaptiveMesh>) -> Result<f64> {
        Ok(self
            .residual_against(phi, mesh, &self.phi_d[k], &self.phi_d_meshes[k])?
            .norm2)
    }

    /// Residual of the final state against the terminal target.
    pub fn terminal_residual(&self, phi: &FEField, mesh: &Arc<AdaptiveMesh>) -> Result<ResidualData> {
        self.residual_against(phi, mesh, &self.phi_t, &self.phi_t_mesh)
    }
}

fn build_back_interp(
    mesh: &Arc<AdaptiveMesh>,
    target: &FEField,
    target_mesh: &Arc<AdaptiveMesh>,
) -> Vec<f64> {
    if mesh.id() == target_mesh.id() {
        target.coeffs.clone()
    } else {
        build_transfer(target_mesh, mesh).apply(&target.coeffs)
    }
}

/// Evaluates the three cost terms for a solved trajectory.
pub fn evaluate_cost(
    traj: &Trajectory,
    u: &ControlVector,
    targets: &Targets,
    weights: &CostWeights,
    grid: &TimeGrid,
) -> Result<CostBreakdown> {
    let n_steps = traj.n_steps();
    if targets.n_levels() != n_steps + 1 {
        return Err(Error::Dimension(format!(
            "targets have {} levels, trajectory {}",
            targets.n_levels(),
            n_steps + 1
        )));
    }
    let mut tracking = 0.0;
    for k in 0..=n_steps {
        let nrm2 = targets.tracking_norm2(k, &traj.steps[k].phi, &traj.steps[k].mesh)?;
        tracking += grid.weight(k) * nrm2;
    }
    tracking *= 0.5 * weights.beta1;
    let terminal = 0.5
        * weights.beta2
        * targets
            .terminal_residual(&traj.steps[n_steps].phi, &traj.steps[n_steps].mesh)?
            .norm2;
    let penalty = 0.5 * weights.gamma * crate::control::control_inner(u, u, grid);
    Ok(CostBreakdown {
        tracking,
        terminal,
        penalty,
    })
}

/// Full-order model: forward solve for the cost, forward plus backward solve
/// for the gradient. The last forward trajectory is cached so a gradient
/// evaluation at the same control reuses it.
pub struct FomModel {
    pub phi0: FEField,
    pub mesh0: Arc<AdaptiveMesh>,
    pub shapes: Arc<ControlShapes>,
    pub params: CHParams,
    pub weights: CostWeights,
    pub targets: Arc<Targets>,
    pub opts: SolveOptions,
    cache: Option<(ControlVector, Arc<Trajectory>, CostBreakdown)>,
    pub forward_solves: usize,
    pub adjoint_solves: usize,
}

impl FomModel {
    pub fn new(
        phi0: FEField,
        mesh0: Arc<AdaptiveMesh>,
        shapes: Arc<ControlShapes>,
        params: CHParams,
        weights: CostWeights,
        targets: Arc<Targets>,
        opts: SolveOptions,
    ) -> Self {
        FomModel {
            phi0,
            mesh0,
            shapes,
            params,
            weights,
            targets,
            opts,
            cache: None,
            forward_solves: 0,
            adjoint_solves: 0,
        }
    }

    /// Forward solve with caching on the control value.
    pub fn trajectory(&mut self, u: &ControlVector) -> Result<(Arc<Trajectory>, CostBreakdown)> {
        if let Some((cu, traj, cb)) = &self.cache {
            if cu == u {
                return Ok((traj.clone(), *cb));
            }
        }
        let traj = Arc::new(solve_trajectory(
            &self.phi0,
            &self.mesh0,
            u,
            &self.shapes,
            &self.params,
            &self.opts,
        )?);
        self.forward_solves += 1;
        let cb = evaluate_cost(&traj, u, &self.targets, &self.weights, &self.params.grid())?;
        self.cache = Some((u.clone(), traj.clone(), cb));
        Ok((traj, cb))
    }
}

impl Model for FomModel {
    fn grid(&self) -> TimeGrid {
        self.params.grid()
    }

    fn n_components(&self) -> usize {
        self.shapes.n_shapes()
    }

    fn cost(&mut self, u: &ControlVector) -> Result<CostBreakdown> {
        Ok(self.trajectory(u)?.1)
    }

    fn cost_and_gradient(&mut self, u: &ControlVector) -> Result<(CostBreakdown, ControlVector)> {
        let (traj, cb) = self.trajectory(u)?;
        let adj = crate::adjoint::solve_adjoint(
            &traj,
            u,
            &self.targets,
            &self.weights,
            &self.params,
            &self.shapes,
        )?;
        self.adjoint_solves += 1;
        let g = crate::adjoint::reduced_gradient(
            u,
            &traj,
            &adj,
            &self.shapes,
            self.weights.gamma,
            &self.params,
        )?;
        Ok((cb, g))
    }
}
