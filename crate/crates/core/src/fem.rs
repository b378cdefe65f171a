//! P1 finite element assembly on triangulations of the unit square.
//!
//! Linear and bilinear forms are integrated exactly; the quartic free energy
//! and its derivatives use mass-lumped (nodal) quadrature, which makes the
//! nonlinearity act componentwise on nodal values. The convection matrix is
//! assembled in skew-symmetric form.

use crate::mesh::{MeshGeometry, MeshId};
use crate::sparse::CsrMatrix;
use crate::{Error, Result};

/// Nodal coefficients of a P1 function, bound to the mesh it lives on.
#[derive(Clone, Debug)]
pub struct FEField {
    pub coeffs: Vec<f64>,
    pub mesh_id: MeshId,
}

impl FEField {
    pub fn new(coeffs: Vec<f64>, mesh_id: MeshId) -> Self {
        FEField { coeffs, mesh_id }
    }

    pub fn constant(geom: &MeshGeometry, c: f64) -> Self {
        FEField {
            coeffs: vec![c; geom.n_vertices()],
            mesh_id: geom.id(),
        }
    }

    pub fn from_fn(geom: &MeshGeometry, f: impl Fn(f64, f64) -> f64) -> Self {
        FEField {
            coeffs: geom.vertices().iter().map(|p| f(p[0], p[1])).collect(),
            mesh_id: geom.id(),
        }
    }

    pub fn len(&self) -> usize {
        self.coeffs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coeffs.is_empty()
    }

    /// Verifies that the field belongs to `geom` and has matching length.
    pub fn check(&self, geom: &MeshGeometry) -> Result<()> {
        if self.mesh_id != geom.id() {
            return Err(Error::MeshMismatch {
                field_mesh: self.mesh_id.0,
                expected: geom.id().0,
            });
        }
        if self.coeffs.len() != geom.n_vertices() {
            return Err(Error::FieldLength {
                len: self.coeffs.len(),
                nv: geom.n_vertices(),
            });
        }
        Ok(())
    }
}

/// A P1 velocity field as a pair of scalar component fields.
#[derive(Clone, Debug)]
pub struct VelocityField {
    pub vx: FEField,
    pub vy: FEField,
}

impl VelocityField {
    pub fn zero(geom: &MeshGeometry) -> Self {
        VelocityField {
            vx: FEField::constant(geom, 0.0),
            vy: FEField::constant(geom, 0.0),
        }
    }

    pub fn check(&self, geom: &MeshGeometry) -> Result<()> {
        self.vx.check(geom)?;
        self.vy.check(geom)
    }

    /// Largest nodal speed.
    pub fn max_speed(&self) -> f64 {
        self.vx
            .coeffs
            .iter()
            .zip(&self.vy.coeffs)
            .map(|(x, y)| (x * x + y * y).sqrt())
            .fold(0.0, f64::max)
    }
}

/// Mass matrix: symmetric positive definite, realizes the L2 inner product.
pub fn assemble_mass(geom: &MeshGeometry) -> CsrMatrix {
    let n = geom.n_vertices();
    let mut trips = Vec::with_capacity(9 * geom.n_triangles());
    for t in 0..geom.n_triangles() {
        let tri = geom.triangle(t);
        let a12 = geom.area(t) / 12.0;
        for i in 0..3 {
            for j in 0..3 {
                let v = if i == j { 2.0 * a12 } else { a12 };
                trips.push((tri[i], tri[j], v));
            }
        }
    }
    CsrMatrix::from_triplets(n, n, &trips)
}

/// Lumped mass diagonal (row sums of the mass matrix).
pub fn lumped_mass(geom: &MeshGeometry) -> Vec<f64> {
    let mut l = vec![0.0; geom.n_vertices()];
    for t in 0..geom.n_triangles() {
        let third = geom.area(t) / 3.0;
        for &v in &geom.triangle(t) {
            l[v] += third;
        }
    }
    l
}

/// Stiffness matrix of the Laplacian with natural boundary conditions:
/// symmetric positive semidefinite with the constants as kernel.
pub fn assemble_stiffness(geom: &MeshGeometry) -> CsrMatrix {
    let n = geom.n_vertices();
    let mut trips = Vec::with_capacity(9 * geom.n_triangles());
    for t in 0..geom.n_triangles() {
        let tri = geom.triangle(t);
        let g = geom.grads(t);
        let area = geom.area(t);
        for i in 0..3 {
            for j in 0..3 {
                trips.push((tri[i], tri[j], area * (g[i][0] * g[j][0] + g[i][1] * g[j][1])));
            }
        }
    }
    CsrMatrix::from_triplets(n, n, &trips)
}

/// Convection matrix in skew-symmetric form,
/// `C = ((v . grad phi, psi) - (v . grad psi, phi)) / 2`,
/// so `C^T = -C` holds exactly and transport injects neither mass nor energy
/// once the velocity is discretely solenoidal.
pub fn assemble_convection(geom: &MeshGeometry, v: &VelocityField) -> Result<CsrMatrix> {
    Ok(assemble_advection(geom, v)?.skew_part())
}

/// Plain advection matrix `(v . grad psi_j, psi_i)` (test index `i` rows).
pub fn assemble_advection(geom: &MeshGeometry, v: &VelocityField) -> Result<CsrMatrix> {
    v.check(geom)?;
    let n = geom.n_vertices();
    let mut trips = Vec::with_capacity(9 * geom.n_triangles());
    for t in 0..geom.n_triangles() {
        let tri = geom.triangle(t);
        let g = geom.grads(t);
        let a12 = geom.area(t) / 12.0;
        // mv[i] = sum_k Me[i][k] * v_k  (element mass row against nodal velocity)
        let mut mv = [[0.0f64; 2]; 3];
        for i in 0..3 {
            for (k, &vk) in tri.iter().enumerate() {
                let w = if i == k { 2.0 * a12 } else { a12 };
                mv[i][0] += w * v.vx.coeffs[vk];
                mv[i][1] += w * v.vy.coeffs[vk];
            }
        }
        for i in 0..3 {
            for j in 0..3 {
                trips.push((tri[i], tri[j], mv[i][0] * g[j][0] + mv[i][1] * g[j][1]));
            }
        }
    }
    Ok(CsrMatrix::from_triplets(n, n, &trips))
}

/// Weak divergence functional of a P1 velocity: `d_j = (v, grad psi_j)`.
/// Zero for all `j` exactly when transport through the skew form conserves
/// mass and keeps pure phases stationary.
pub fn weak_divergence(geom: &MeshGeometry, v: &VelocityField) -> Result<Vec<f64>> {
    v.check(geom)?;
    let mut d = vec![0.0; geom.n_vertices()];
    for t in 0..geom.n_triangles() {
        let tri = geom.triangle(t);
        let g = geom.grads(t);
        let area = geom.area(t);
        let mean = [
            (v.vx.coeffs[tri[0]] + v.vx.coeffs[tri[1]] + v.vx.coeffs[tri[2]]) / 3.0,
            (v.vy.coeffs[tri[0]] + v.vy.coeffs[tri[1]] + v.vy.coeffs[tri[2]]) / 3.0,
        ];
        for j in 0..3 {
            d[tri[j]] += area * (mean[0] * g[j][0] + mean[1] * g[j][1]);
        }
    }
    Ok(d)
}

/// Quartic double-well free energy and derivatives.
pub fn free_energy(x: f64) -> f64 {
    let y = 1.0 - x * x;
    0.25 * y * y
}

pub fn free_energy_d1(x: f64) -> f64 {
    x * x * x - x
}

pub fn free_energy_d2(x: f64) -> f64 {
    3.0 * x * x - 1.0
}

/// Output of [`nonlinearity`].
pub enum NonlinOut {
    /// Order 0: the lumped integral of F(phi).
    Scalar(f64),
    /// Order 1: the lumped load vector of F'(phi).
    Load(FEField),
    /// Order 2: the diagonal matrix of lumped F''(phi) weights.
    Matrix(CsrMatrix),
}

/// Lumped-quadrature evaluation of the free energy term of requested order.
pub fn nonlinearity(geom: &MeshGeometry, phi: &FEField, order: u8) -> Result<NonlinOut> {
    phi.check(geom)?;
    let lump = lumped_mass(geom);
    match order {
        0 => Ok(NonlinOut::Scalar(
            lump.iter()
                .zip(&phi.coeffs)
                .map(|(l, &x)| l * free_energy(x))
                .sum(),
        )),
        1 => Ok(NonlinOut::Load(FEField::new(
            lump.iter()
                .zip(&phi.coeffs)
                .map(|(l, &x)| l * free_energy_d1(x))
                .collect(),
            geom.id(),
        ))),
        2 => {
            let n = geom.n_vertices();
            let trips: Vec<(usize, usize, f64)> = (0..n)
                .map(|i| (i, i, lump[i] * free_energy_d2(phi.coeffs[i])))
                .collect();
            Ok(NonlinOut::Matrix(CsrMatrix::from_triplets(n, n, &trips)))
        }
        _ => Err(Error::Dimension(format!(
            "nonlinearity order must be 0, 1 or 2, got {order}"
        ))),
    }
}

/// Ginzburg-Landau energy
/// `E(phi) = (sigma eps / 2) |grad phi|^2 + (sigma/eps) F(phi)` integrated
/// with exact gradients and lumped free energy.
pub fn ginzburg_landau_energy(
    geom: &MeshGeometry,
    phi: &FEField,
    sigma: f64,
    epsilon: f64,
) -> Result<f64> {
    phi.check(geom)?;
    let stiff = assemble_stiffness(geom);
    let lump = lumped_mass(geom);
    Ok(energy_with(&stiff, &lump, &phi.coeffs, sigma, epsilon))
}

/// Same energy with preassembled operators (used inside the time loop).
pub fn energy_with(stiff: &CsrMatrix, lump: &[f64], phi: &[f64], sigma: f64, epsilon: f64) -> f64 {
    let grad = stiff.quadratic_form(phi, phi);
    let bulk: f64 = lump
        .iter()
        .zip(phi)
        .map(|(l, &x)| l * free_energy(x))
        .sum();
    0.5 * sigma * epsilon * grad + sigma / epsilon * bulk
}
