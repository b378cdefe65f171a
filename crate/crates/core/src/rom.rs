//! Reduced-order state and adjoint models.
//!
//! All full-dimension contractions happen once, offline: reduced stiffness
//! and convection, lumped-mass weights of the nonlinearity, projected
//! tracking data. Online, the scheme eliminates the reduced potential
//! through the (identity) reduced mass matrix, leaving an ell-dimensional
//! Newton iteration per step. The nonlinearity is either lifted to the full
//! space (plain POD) or sampled through DEIM, in which case nothing online
//! touches the full dimension.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::control::{ControlShapes, ControlVector, TimeGrid};
use crate::deim::{build_deim, DeimProjector};
use crate::fem::{free_energy_d1, free_energy_d2, FEField};
use crate::fom::{CostWeights, Targets};
use crate::mesh::{prolongate, AdaptiveMesh};
use crate::optim::{CostBreakdown, Model};
use crate::pod::{CommonSpace, PodBasis};
use crate::state::CHParams;
use crate::{Error, Result};

/// Offline data of the reduced model.
pub struct RomOperators {
    pub mesh: Arc<AdaptiveMesh>,
    /// Reduced basis (n x ell).
    pub v: DMatrix<f64>,
    /// Reduced stiffness V^T K V.
    pub k_r: DMatrix<f64>,
    /// Reduced skew convection per control shape.
    pub c_r: Vec<DMatrix<f64>>,
    /// Reduced lumped mass V^T L V.
    pub l_r: DMatrix<f64>,
    /// Reduced initial state V^T M phi0.
    pub a0: DVector<f64>,
    /// Projected desired trajectory V^T M phi_d(t_k) and its squared norms.
    pub track_c: Vec<DVector<f64>>,
    pub track_n2: Vec<f64>,
    pub term_c: DVector<f64>,
    pub term_n2: f64,
    /// Sampled-nonlinearity projector; None runs the full-dimension lift.
    pub deim: Option<DeimProjector>,
    /// Full lumped mass diagonal for the lifted path.
    pub lump: Vec<f64>,
    pub params: CHParams,
    pub weights: CostWeights,
}

impl RomOperators {
    pub fn ell(&self) -> usize {
        self.k_r.nrows()
    }

    pub fn n_shapes(&self) -> usize {
        self.c_r.len()
    }

    /// Lifts reduced coordinates to a nodal field on the reference mesh.
    pub fn lift(&self, a: &DVector<f64>) -> FEField {
        let va = &self.v * a;
        FEField::new(va.as_slice().to_vec(), self.mesh.id())
    }
}

/// Contracts all operators onto the POD basis. The snapshot space provides
/// the mass matrix and, when `ell_d` is set, the nonlinearity snapshots for
/// DEIM. The basis mesh must refine the meshes of `phi0` and all targets.
#[allow(clippy::too_many_arguments)]
pub fn build_rom(
    basis: &PodBasis,
    space: &CommonSpace,
    shapes: &ControlShapes,
    params: &CHParams,
    weights: &CostWeights,
    targets: &Targets,
    phi0: &FEField,
    mesh0: &Arc<AdaptiveMesh>,
    ell_d: Option<usize>,
) -> Result<RomOperators> {
    if space.mesh.id() != basis.mesh.id() {
        return Err(Error::Dimension(
            "snapshot space and basis live on different meshes".into(),
        ));
    }
    let common = &basis.mesh;
    let geom = common.geometry();
    let n = geom.n_vertices();
    let ell = basis.ell();
    let v = basis.mode_matrix();

    let stiff = crate::fem::assemble_stiffness(geom);
    let lump = crate::fem::lumped_mass(geom);
    let mesh_shapes = shapes.on_mesh(geom)?;

    let contract = |mat: &crate::sparse::CsrMatrix| -> DMatrix<f64> {
        let mut out = DMatrix::<f64>::zeros(ell, ell);
        for j in 0..ell {
            let col: Vec<f64> = (0..n).map(|i| v[(i, j)]).collect();
            let mcol = mat.matvec(&col);
            for i in 0..ell {
                let mut acc = 0.0;
                for r in 0..n {
                    acc += v[(r, i)] * mcol[r];
                }
                out[(i, j)] = acc;
            }
        }
        out
    };
    let k_r = contract(&stiff);
    let c_r: Vec<DMatrix<f64>> = mesh_shapes
        .convection
        .iter()
        .map(contract)
        .collect();
    let mut l_r = DMatrix::<f64>::zeros(ell, ell);
    for i in 0..ell {
        for j in 0..ell {
            let mut acc = 0.0;
            for r in 0..n {
                acc += v[(r, i)] * lump[r] * v[(r, j)];
            }
            l_r[(i, j)] = acc;
        }
    }

    let project = |f: &[f64]| -> DVector<f64> {
        let mf = space.mass.matvec(f);
        DVector::from_fn(ell, |i, _| {
            let mut acc = 0.0;
            for r in 0..n {
                acc += v[(r, i)] * mf[r];
            }
            acc
        })
    };

    let phi0_c = prolongate(phi0, mesh0, common)?;
    let a0 = project(&phi0_c.coeffs);

    let n_levels = targets.n_levels();
    let mut track_c = Vec::with_capacity(n_levels);
    let mut track_n2 = Vec::with_capacity(n_levels);
    for k in 0..n_levels {
        let f = prolongate(&targets.phi_d[k], &targets.phi_d_meshes[k], common)?;
        let mf = space.mass.matvec(&f.coeffs);
        track_n2.push(crate::sparse::dot(&f.coeffs, &mf));
        track_c.push(DVector::from_fn(ell, |i, _| {
            let mut acc = 0.0;
            for r in 0..n {
                acc += v[(r, i)] * mf[r];
            }
            acc
        }));
    }
    let phi_t_c = prolongate(&targets.phi_t, &targets.phi_t_mesh, common)?;
    let mf = space.mass.matvec(&phi_t_c.coeffs);
    let term_n2 = crate::sparse::dot(&phi_t_c.coeffs, &mf);
    let term_c = DVector::from_fn(ell, |i, _| {
        let mut acc = 0.0;
        for r in 0..n {
            acc += v[(r, i)] * mf[r];
        }
        acc
    });

    let deim = match ell_d {
        None => None,
        Some(ld) => {
            let snaps: Vec<Vec<f64>> = space
                .fields
                .iter()
                .map(|f| f.coeffs.iter().map(|&x| free_energy_d1(x)).collect())
                .collect();
            let data = build_deim(&snaps, ld)?;
            Some(DeimProjector::build(&v, &lump, &data)?)
        }
    };

    Ok(RomOperators {
        mesh: common.clone(),
        v,
        k_r,
        c_r,
        l_r,
        a0,
        track_c,
        track_n2,
        term_c,
        term_n2,
        deim,
        lump,
        params: *params,
        weights: *weights,
    })
}

/// Reduced potential `m(a, a_old) = s e K_r a + (s/e)(n_r(a) - L_r a_old)`,
/// and the nonlinear term `n_r(a) ~ V^T L (V a)^3`.
fn cubic_term(ops: &RomOperators, a: &DVector<f64>) -> DVector<f64> {
    match &ops.deim {
        Some(p) => {
            let samples = p.sample(a).map(free_energy_d1);
            p.apply(&samples) + &ops.l_r * a
        }
        None => {
            let va = &ops.v * a;
            let n = va.len();
            let mut lf = DVector::<f64>::zeros(n);
            for i in 0..n {
                lf[i] = ops.lump[i] * va[i] * va[i] * va[i];
            }
            ops.v.transpose() * lf
        }
    }
}

fn cubic_jacobian(ops: &RomOperators, a: &DVector<f64>) -> DMatrix<f64> {
    match &ops.deim {
        Some(p) => {
            let fp = p.sample(a).map(free_energy_d2);
            p.jacobian(&fp) + &ops.l_r
        }
        None => {
            let va = &ops.v * a;
            let n = va.len();
            let ell = ops.ell();
            // V^T diag(3 L va^2) V
            let mut out = DMatrix::<f64>::zeros(ell, ell);
            for i in 0..ell {
                for j in 0..ell {
                    let mut acc = 0.0;
                    for r in 0..n {
                        acc += ops.v[(r, i)] * 3.0 * ops.lump[r] * va[r] * va[r] * ops.v[(r, j)];
                    }
                    out[(i, j)] = acc;
                }
            }
            out
        }
    }
}

const ROM_NEWTON_ABS: f64 = 1e-12;
const ROM_NEWTON_REL: f64 = 1e-14;
const ROM_NEWTON_MAX: usize = 50;

fn combine_reduced_convection(ops: &RomOperators, amps: &[f64]) -> DMatrix<f64> {
    let mut c = ops.c_r[0].clone() * amps[0];
    for (m, &a) in ops.c_r.iter().zip(amps).skip(1) {
        c += m * a;
    }
    c
}

/// Reduced trajectory: coordinates per time level.
pub struct RomTrajectory {
    pub a: Vec<DVector<f64>>,
    pub newton_iterations: usize,
}

/// Integrates the reduced scheme: same convex-concave splitting as the full
/// model with the potential eliminated,
/// `(a+ - a)/dt + C_r a+ + b K_r [s e K_r a+ + (s/e)(n_r(a+) - L_r a)] = 0`.
pub fn rom_solve(u: &ControlVector, ops: &RomOperators) -> Result<RomTrajectory> {
    let params = &ops.params;
    if u.n_steps() != params.n_steps {
        return Err(Error::Dimension(format!(
            "control has {} steps, rom expects {}",
            u.n_steps(),
            params.n_steps
        )));
    }
    let ell = ops.ell();
    let (s, e, b, dt) = (params.sigma, params.epsilon, params.mobility, params.dt);
    let mut a = ops.a0.clone();
    let mut out = Vec::with_capacity(params.n_steps + 1);
    out.push(a.clone());
    let mut newton_total = 0;
    let eye = DMatrix::<f64>::identity(ell, ell);
    for k in 1..=params.n_steps {
        let c = combine_reduced_convection(ops, u.at_time(k));
        let a_old = a.clone();
        let explicit = &ops.l_r * &a_old;
        let mut res0 = f64::NAN;
        let mut converged = false;
        for it in 0..=ROM_NEWTON_MAX {
            let m = s * e * (&ops.k_r * &a) + s / e * (cubic_term(ops, &a) - &explicit);
            let r = (&a - &a_old) / dt + &c * &a + b * (&ops.k_r * &m);
            let rn = r.norm();
            if it == 0 {
                res0 = rn;
            }
            if rn < ROM_NEWTON_ABS || rn < ROM_NEWTON_REL * res0 {
                newton_total += it;
                converged = true;
                break;
            }
            if it == ROM_NEWTON_MAX {
                break;
            }
            let dm = s * e * &ops.k_r + s / e * cubic_jacobian(ops, &a);
            let jac = &eye / dt + &c + b * (&ops.k_r * dm);
            let delta = jac.lu().solve(&(-r)).ok_or(Error::Factorization(
                "singular reduced Newton system".into(),
            ))?;
            a += delta;
        }
        if !converged {
            return Err(Error::NewtonDiverged {
                iters: ROM_NEWTON_MAX,
                residual: res0,
            });
        }
        out.push(a.clone());
    }
    Ok(RomTrajectory {
        a: out,
        newton_iterations: newton_total,
    })
}

/// Reduced cost of a solved reduced trajectory.
pub fn rom_cost(u: &ControlVector, traj: &RomTrajectory, ops: &RomOperators) -> CostBreakdown {
    let grid = ops.params.grid();
    let w = &ops.weights;
    let mut tracking = 0.0;
    for (k, a) in traj.a.iter().enumerate() {
        let n2 = a.dot(a) - 2.0 * a.dot(&ops.track_c[k]) + ops.track_n2[k];
        tracking += grid.weight(k) * n2;
    }
    tracking *= 0.5 * w.beta1;
    let an = &traj.a[traj.a.len() - 1];
    let terminal =
        0.5 * w.beta2 * (an.dot(an) - 2.0 * an.dot(&ops.term_c) + ops.term_n2);
    let penalty = 0.5 * w.gamma * crate::control::control_inner(u, u, &grid);
    CostBreakdown {
        tracking: tracking.max(0.0),
        terminal: terminal.max(0.0),
        penalty,
    }
}

/// Discrete adjoint of the reduced scheme and the gradient of the reduced
/// cost, in the same trapezoidal Riesz representation as the full model.
pub fn rom_gradient(
    u: &ControlVector,
    traj: &RomTrajectory,
    ops: &RomOperators,
) -> Result<ControlVector> {
    let params = &ops.params;
    let grid = params.grid();
    let w = &ops.weights;
    let ell = ops.ell();
    let n_steps = params.n_steps;
    let (s, e, b, dt) = (params.sigma, params.epsilon, params.mobility, params.dt);
    let eye = DMatrix::<f64>::identity(ell, ell);
    // dF_k / d a_{k-1} = -I/dt - (b s/e) K_r L_r (constant in k)
    let coupling = -(&eye / dt) - b * s / e * (&ops.k_r * &ops.l_r);

    let mut g = ControlVector::zeros(u.n_components(), n_steps);
    for i in 0..u.n_components() {
        g.set(i, 0, w.gamma * u.get(i, 0));
    }
    let mut zeta = {
        let an = &traj.a[n_steps];
        let mut z = (an - &ops.track_c[n_steps]) * (w.beta1 * grid.weight(n_steps));
        z += (an - &ops.term_c) * w.beta2;
        z
    };
    for k in (1..=n_steps).rev() {
        let a_k = &traj.a[k];
        let c = combine_reduced_convection(ops, u.at_time(k));
        let dm = s * e * &ops.k_r + s / e * cubic_jacobian(ops, a_k);
        let jac = &eye / dt + &c + b * (&ops.k_r * dm);
        let lam = jac.transpose().lu().solve(&(-&zeta)).ok_or(
            Error::Factorization("singular reduced adjoint system".into()),
        )?;
        for i in 0..u.n_components() {
            let pairing = lam.dot(&(&ops.c_r[i] * a_k));
            g.set(
                i,
                k,
                w.gamma * u.get(i, k) + pairing / grid.weight(k),
            );
        }
        // zeta_{k-1}
        let mut z = (&traj.a[k - 1] - &ops.track_c[k - 1]) * (w.beta1 * grid.weight(k - 1));
        z += coupling.transpose() * &lam;
        zeta = z;
    }
    Ok(g)
}

/// Reduced model behind the shared optimizer interface.
pub struct RomModel {
    pub ops: Arc<RomOperators>,
    cache: Option<(ControlVector, Arc<RomTrajectory>, CostBreakdown)>,
    pub state_solves: usize,
}

impl RomModel {
    pub fn new(ops: Arc<RomOperators>) -> Self {
        RomModel {
            ops,
            cache: None,
            state_solves: 0,
        }
    }

    pub fn trajectory(&mut self, u: &ControlVector) -> Result<(Arc<RomTrajectory>, CostBreakdown)> {
        if let Some((cu, t, cb)) = &self.cache {
            if cu == u {
                return Ok((t.clone(), *cb));
            }
        }
        let traj = Arc::new(rom_solve(u, &self.ops)?);
        self.state_solves += 1;
        let cb = rom_cost(u, &traj, &self.ops);
        self.cache = Some((u.clone(), traj.clone(), cb));
        Ok((traj, cb))
    }
}

impl Model for RomModel {
    fn grid(&self) -> TimeGrid {
        self.ops.params.grid()
    }

    fn n_components(&self) -> usize {
        self.ops.n_shapes()
    }

    fn cost(&mut self, u: &ControlVector) -> Result<CostBreakdown> {
        Ok(self.trajectory(u)?.1)
    }

    fn cost_and_gradient(&mut self, u: &ControlVector) -> Result<(CostBreakdown, ControlVector)> {
        let (traj, cb) = self.trajectory(u)?;
        let g = rom_gradient(u, &traj, &self.ops)?;
        Ok((cb, g))
    }
}
