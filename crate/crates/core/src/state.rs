//! Time integration of the controlled Cahn-Hilliard system.
//!
//! Each step solves the coupled block system
//!
//! ```text
//! M (phi+ - phi)/dt + C(v) phi+ + b K mu+                          = 0
//! sigma eps K phi+ + (sigma/eps) (L phi+^3 - L phi) - M mu+        = 0
//! ```
//!
//! with Newton's method; the cubic (convex) part of the free energy
//! derivative is implicit and the linear (concave) part explicit, which makes
//! the scheme unconditionally gradient stable at v = 0. The skew convection
//! form together with the discretely solenoidal control shapes conserves
//! mass exactly on a fixed mesh.

use std::sync::Arc;

use crate::control::{apply_b, ControlShapes, ControlVector};
use crate::fem::{energy_with, free_energy_d1, FEField, VelocityField};
use crate::mesh::{
    build_transfer, interface_indicator, refine_coarsen, AdaptiveMesh, MeshGeometry, RefineParams,
    TransferOp,
};
use crate::sparse::{norm2, CsrMatrix, SparseLu};
use crate::{Error, Result};

/// Physical and discretization parameters of the phase field model.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CHParams {
    /// Mobility b.
    pub mobility: f64,
    /// Surface tension sigma.
    pub sigma: f64,
    /// Interface width parameter epsilon.
    pub epsilon: f64,
    /// Time step size.
    pub dt: f64,
    /// Number of time steps.
    pub n_steps: usize,
}

impl Default for CHParams {
    fn default() -> Self {
        CHParams {
            mobility: 2.5e-5,
            sigma: 25.98,
            epsilon: 0.02,
            dt: 2.5e-5,
            n_steps: 500,
        }
    }
}

impl CHParams {
    pub fn t_end(&self) -> f64 {
        self.dt * self.n_steps as f64
    }

    pub fn grid(&self) -> crate::control::TimeGrid {
        crate::control::TimeGrid::new(self.dt, self.n_steps)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.mobility > 0.0 && self.sigma > 0.0 && self.epsilon > 0.0 && self.dt > 0.0) {
            return Err(Error::Config(
                "mobility, sigma, epsilon and dt must be positive".into(),
            ));
        }
        if self.n_steps == 0 {
            return Err(Error::Config("n_steps must be positive".into()));
        }
        Ok(())
    }
}

/// Convergence data of one Newton solve.
#[derive(Clone, Debug, Default)]
pub struct NewtonStats {
    pub iterations: usize,
    pub residuals: Vec<f64>,
}

const NEWTON_ABS_TOL: f64 = 1e-10;
const NEWTON_REL_TOL: f64 = 1e-12;
const NEWTON_MAX_ITERS: usize = 30;

/// Preassembled operators for stepping on one fixed mesh.
pub struct CHSystem {
    pub mass: CsrMatrix,
    pub stiff: CsrMatrix,
    pub lump: Vec<f64>,
    params: CHParams,
    n: usize,
}

impl CHSystem {
    pub fn new(geom: &MeshGeometry, params: CHParams) -> Self {
        CHSystem {
            mass: crate::fem::assemble_mass(geom),
            stiff: crate::fem::assemble_stiffness(geom),
            lump: crate::fem::lumped_mass(geom),
            params,
            n: geom.n_vertices(),
        }
    }

    pub fn params(&self) -> &CHParams {
        &self.params
    }

    pub fn n_vertices(&self) -> usize {
        self.n
    }

    /// Total mass `1^T M phi`.
    pub fn mass_of(&self, phi: &[f64]) -> f64 {
        self.lump.iter().zip(phi).map(|(l, p)| l * p).sum()
    }

    /// Ginzburg-Landau energy with lumped bulk term.
    pub fn energy_of(&self, phi: &[f64]) -> f64 {
        energy_with(
            &self.stiff,
            &self.lump,
            phi,
            self.params.sigma,
            self.params.epsilon,
        )
    }

    /// Chemical potential consistent with a given phase field,
    /// `M mu = sigma eps K phi + (sigma/eps) L F'(phi)`. Used for the initial
    /// record and after remeshing; the dynamics never read it back.
    pub fn consistent_potential(&self, phi: &[f64]) -> Result<Vec<f64>> {
        let p = &self.params;
        let mut rhs = self.stiff.matvec(phi);
        for r in rhs.iter_mut() {
            *r *= p.sigma * p.epsilon;
        }
        for i in 0..self.n {
            rhs[i] += p.sigma / p.epsilon * self.lump[i] * free_energy_d1(phi[i]);
        }
        let chol = crate::sparse::SparseCholesky::new(&self.mass)?;
        Ok(chol.solve(&rhs))
    }

    fn residual(
        &self,
        conv: &CsrMatrix,
        phi_old: &[f64],
        phi: &[f64],
        mu: &[f64],
        out: &mut Vec<f64>,
    ) {
        let p = &self.params;
        let n = self.n;
        out.clear();
        out.resize(2 * n, 0.0);
        let m_phi = self.mass.matvec(phi);
        let m_phi_old = self.mass.matvec(phi_old);
        let c_phi = conv.matvec(phi);
        let k_mu = self.stiff.matvec(mu);
        let k_phi = self.stiff.matvec(phi);
        let m_mu = self.mass.matvec(mu);
        for i in 0..n {
            out[i] = (m_phi[i] - m_phi_old[i]) / p.dt + c_phi[i] + p.mobility * k_mu[i];
            out[n + i] = p.sigma * p.epsilon * k_phi[i]
                + p.sigma / p.epsilon * self.lump[i] * (phi[i] * phi[i] * phi[i] - phi_old[i])
                - m_mu[i];
        }
    }

    fn jacobian_triplets(
        &self,
        conv: &CsrMatrix,
        phi: &[f64],
        trips: &mut Vec<(usize, usize, f64)>,
    ) {
        let p = &self.params;
        let n = self.n;
        trips.clear();
        for i in 0..n {
            for (j, v) in self.mass.row(i) {
                trips.push((i, j, v / p.dt));
                trips.push((n + i, n + j, -v));
            }
            for (j, v) in conv.row(i) {
                trips.push((i, j, v));
            }
            for (j, v) in self.stiff.row(i) {
                trips.push((i, n + j, p.mobility * v));
                trips.push((n + i, j, p.sigma * p.epsilon * v));
            }
            trips.push((
                n + i,
                i,
                p.sigma / p.epsilon * self.lump[i] * 3.0 * phi[i] * phi[i],
            ));
        }
    }

    /// Advances one time step from `phi_old` with transport matrix `conv`.
    /// `mu_guess` seeds the Newton iteration.
    pub fn step(
        &self,
        conv: &CsrMatrix,
        phi_old: &[f64],
        mu_guess: &[f64],
    ) -> Result<(Vec<f64>, Vec<f64>, NewtonStats)> {
        let n = self.n;
        let mut phi = phi_old.to_vec();
        let mut mu = mu_guess.to_vec();
        let mut res = Vec::new();
        let mut trips = Vec::new();
        let mut stats = NewtonStats::default();
        let mut res0 = f64::NAN;
        for it in 0..=NEWTON_MAX_ITERS {
            self.residual(conv, phi_old, &phi, &mu, &mut res);
            let rn = norm2(&res);
            stats.residuals.push(rn);
            if it == 0 {
                res0 = rn;
            }
            if rn < NEWTON_ABS_TOL || rn < NEWTON_REL_TOL * res0 {
                stats.iterations = it;
                return Ok((phi, mu, stats));
            }
            if it == NEWTON_MAX_ITERS {
                break;
            }
            self.jacobian_triplets(conv, &phi, &mut trips);
            let jac = CsrMatrix::from_triplets(2 * n, 2 * n, &trips);
            let lu = SparseLu::new(&jac)?;
            for r in res.iter_mut() {
                *r = -*r;
            }
            let delta = lu.solve(&res);
            for i in 0..n {
                phi[i] += delta[i];
                mu[i] += delta[n + i];
            }
        }
        Err(Error::NewtonDiverged {
            iters: NEWTON_MAX_ITERS,
            residual: *stats.residuals.last().unwrap(),
        })
    }

    /// Factorization of the converged Jacobian at a stored step; the adjoint
    /// solver marches backward through its transpose.
    pub fn jacobian_lu(&self, conv: &CsrMatrix, phi: &[f64]) -> Result<SparseLu> {
        let mut trips = Vec::new();
        self.jacobian_triplets(conv, phi, &mut trips);
        let jac = CsrMatrix::from_triplets(2 * self.n, 2 * self.n, &trips);
        SparseLu::new(&jac)
    }
}

/// Single step of the controlled system on an explicit mesh, the
/// self-contained entry point used by tests and diagnostics.
pub fn ch_step(
    geom: &MeshGeometry,
    phi_old: &FEField,
    v: &VelocityField,
    params: &CHParams,
) -> Result<(FEField, FEField)> {
    phi_old.check(geom)?;
    v.check(geom)?;
    params.validate()?;
    let sys = CHSystem::new(geom, *params);
    let conv = crate::fem::assemble_convection(geom, v)?;
    let mu0 = sys.consistent_potential(&phi_old.coeffs)?;
    let (phi, mu, _) = sys.step(&conv, &phi_old.coeffs, &mu0)?;
    Ok((FEField::new(phi, geom.id()), FEField::new(mu, geom.id())))
}

/// How solve_trajectory reacts to a CFL violation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CflPolicy {
    Off,
    Warn,
    Abort,
}

/// Mesh adaptation settings for a trajectory solve.
#[derive(Clone, Copy, Debug)]
pub struct SolveOptions {
    pub adapt: bool,
    /// Remesh every this many steps.
    pub cadence: usize,
    pub refine: RefineParams,
    pub cfl: CflPolicy,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions {
            adapt: false,
            cadence: 10,
            refine: RefineParams::default(),
            cfl: CflPolicy::Warn,
        }
    }
}

/// One stored time level.
pub struct StepRecord {
    pub phi: FEField,
    pub mu: FEField,
    pub mesh: Arc<AdaptiveMesh>,
    pub mass: f64,
    pub energy: f64,
}

/// Mesh change applied between step `k` and `k+1`.
pub struct RemeshRecord {
    pub transfer: TransferOp,
    pub old_mesh: Arc<AdaptiveMesh>,
    pub new_mesh: Arc<AdaptiveMesh>,
}

/// Full time history of a forward solve.
pub struct Trajectory {
    pub steps: Vec<StepRecord>,
    /// `remesh[k]` is the transfer applied to the state right after step `k`.
    pub remesh: Vec<Option<RemeshRecord>>,
    pub max_cfl: f64,
    pub newton_iterations: usize,
}

impl Trajectory {
    pub fn n_steps(&self) -> usize {
        self.steps.len() - 1
    }

    /// Phase field entering step `k+1` (after any remeshing at `k`).
    pub fn phi_after_transfer(&self, k: usize) -> FEField {
        match &self.remesh[k] {
            None => self.steps[k].phi.clone(),
            Some(r) => FEField::new(
                r.transfer.apply(&self.steps[k].phi.coeffs),
                r.new_mesh.id(),
            ),
        }
    }

    /// Largest absolute drift of total mass over the whole trajectory.
    pub fn mass_drift(&self) -> f64 {
        let m0 = self.steps[0].mass;
        self.steps
            .iter()
            .map(|s| (s.mass - m0).abs())
            .fold(0.0, f64::max)
    }
}

/// Integrates the controlled system over the full time grid. The control is
/// evaluated at the new time level within each step; if adaptation is on,
/// the mesh is re-fitted to the phase field every `cadence` steps and the
/// state is carried over by nodal transfer.
pub fn solve_trajectory(
    phi0: &FEField,
    mesh0: &Arc<AdaptiveMesh>,
    u: &ControlVector,
    shapes: &ControlShapes,
    params: &CHParams,
    opts: &SolveOptions,
) -> Result<Trajectory> {
    params.validate()?;
    phi0.check(mesh0.geometry())?;
    if u.n_steps() != params.n_steps {
        return Err(Error::Dimension(format!(
            "control has {} steps, params say {}",
            u.n_steps(),
            params.n_steps
        )));
    }
    let mut mesh = mesh0.clone();
    let mut sys = CHSystem::new(mesh.geometry(), *params);
    let mut mesh_shapes = shapes.on_mesh(mesh.geometry())?;
    let mut phi = phi0.coeffs.clone();
    let mut mu = sys.consistent_potential(&phi)?;
    let mut steps = Vec::with_capacity(params.n_steps + 1);
    let mut remesh: Vec<Option<RemeshRecord>> = vec![None];
    steps.push(StepRecord {
        phi: FEField::new(phi.clone(), mesh.id()),
        mu: FEField::new(mu.clone(), mesh.id()),
        mesh: mesh.clone(),
        mass: sys.mass_of(&phi),
        energy: sys.energy_of(&phi),
    });
    let mut max_cfl = 0.0f64;
    let mut newton_total = 0usize;
    let mut conv = mesh_shapes.convection[0].clone();
    for k in 1..=params.n_steps {
        // transport operator at the new time level
        combine_convection(&mut conv, &mesh_shapes.convection, u.at_time(k));
        if opts.cfl != CflPolicy::Off {
            let v = apply_b(u, k, &mesh_shapes, mesh.geometry())?;
            let cfl = crate::control::cfl_number(v.max_speed(), params.dt, mesh.min_edge());
            max_cfl = max_cfl.max(cfl);
            if cfl > 1.0 && opts.cfl == CflPolicy::Abort {
                return Err(Error::CflViolation { cfl });
            }
        }
        let (phi_new, mu_new, stats) = sys.step(&conv, &phi, &mu)?;
        newton_total += stats.iterations;
        phi = phi_new;
        mu = mu_new;
        steps.push(StepRecord {
            phi: FEField::new(phi.clone(), mesh.id()),
            mu: FEField::new(mu.clone(), mesh.id()),
            mesh: mesh.clone(),
            mass: sys.mass_of(&phi),
            energy: sys.energy_of(&phi),
        });
        let mut rec = None;
        if opts.adapt && k % opts.cadence == 0 && k < params.n_steps {
            let field = FEField::new(phi.clone(), mesh.id());
            let ind = interface_indicator(&mesh, &field)?;
            let (new_mesh, _report) = refine_coarsen(&mesh, &ind, &opts.refine)?;
            if new_mesh.forest() != mesh.forest() {
                let op = build_transfer(&mesh, &new_mesh);
                let phi_t = op.apply(&phi);
                let new_sys = CHSystem::new(new_mesh.geometry(), *params);
                let mu_t = new_sys.consistent_potential(&phi_t)?;
                rec = Some(RemeshRecord {
                    transfer: op,
                    old_mesh: mesh.clone(),
                    new_mesh: new_mesh.clone(),
                });
                mesh = new_mesh;
                sys = new_sys;
                mesh_shapes = shapes.on_mesh(mesh.geometry())?;
                conv = mesh_shapes.convection[0].clone();
                phi = phi_t;
                mu = mu_t;
            }
        }
        remesh.push(rec);
    }
    Ok(Trajectory {
        steps,
        remesh,
        max_cfl,
        newton_iterations: newton_total,
    })
}

/// Forms `sum_i amp_i C_i` in place; all shape convection matrices share the
/// mesh adjacency pattern.
pub fn combine_convection(out: &mut CsrMatrix, per_shape: &[CsrMatrix], amps: &[f64]) {
    assert_eq!(per_shape.len(), amps.len());
    out.clone_from(&per_shape[0]);
    out.scale(amps[0]);
    for (c, &a) in per_shape.iter().zip(amps).skip(1) {
        out.add_scaled_into(a, c);
    }
}
