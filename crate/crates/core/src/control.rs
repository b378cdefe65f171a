//! Control variables, control shape functions and the control operator.
//!
//! Controls are time-discrete amplitude vectors on the state's uniform time
//! grid. Shape functions are analytic solenoidal velocity patterns which are
//! interpolated nodally on each mesh and then projected onto the discretely
//! solenoidal subspace, so the skew convection form conserves mass exactly
//! (1^T C = 0) and pure phases stay stationary. The projection is a
//! minimum-norm nodal correction that leaves the no-penetration boundary
//! values untouched.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::{Arc, Mutex};

use crate::fem::{weak_divergence, FEField, VelocityField};
use crate::mesh::{MeshGeometry, MeshId};
use crate::sparse::{CsrMatrix, SparseCholesky};
use crate::{Error, Result};

/// Uniform time grid with trapezoidal quadrature weights.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TimeGrid {
    pub dt: f64,
    pub n_steps: usize,
}

impl TimeGrid {
    pub fn new(dt: f64, n_steps: usize) -> Self {
        assert!(dt > 0.0 && n_steps > 0);
        TimeGrid { dt, n_steps }
    }

    pub fn t_end(&self) -> f64 {
        self.dt * self.n_steps as f64
    }

    /// Trapezoid weight of time index `k`.
    pub fn weight(&self, k: usize) -> f64 {
        if k == 0 || k == self.n_steps {
            0.5 * self.dt
        } else {
            self.dt
        }
    }
}

/// Time-discrete control amplitudes: `m` components at each of the
/// `n_steps + 1` grid times. Also used as the carrier for gradients in the
/// same space.
#[derive(Clone, Debug, PartialEq)]
pub struct ControlVector {
    values: Vec<f64>,
    m: usize,
    n_steps: usize,
}

impl ControlVector {
    pub fn zeros(m: usize, n_steps: usize) -> Self {
        ControlVector {
            values: vec![0.0; m * (n_steps + 1)],
            m,
            n_steps,
        }
    }

    pub fn constant(c: f64, m: usize, n_steps: usize) -> Self {
        ControlVector {
            values: vec![c; m * (n_steps + 1)],
            m,
            n_steps,
        }
    }

    pub fn from_values(values: Vec<f64>, m: usize, n_steps: usize) -> Self {
        assert_eq!(values.len(), m * (n_steps + 1));
        ControlVector { values, m, n_steps }
    }

    pub fn n_components(&self) -> usize {
        self.m
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn get(&self, i: usize, k: usize) -> f64 {
        self.values[k * self.m + i]
    }

    pub fn set(&mut self, i: usize, k: usize, v: f64) {
        self.values[k * self.m + i] = v;
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Component amplitudes at time index `k`.
    pub fn at_time(&self, k: usize) -> &[f64] {
        &self.values[k * self.m..(k + 1) * self.m]
    }

    pub fn axpy(&mut self, alpha: f64, other: &ControlVector) {
        assert_eq!(self.values.len(), other.values.len());
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += alpha * b;
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        for a in &mut self.values {
            *a *= alpha;
        }
    }
}

/// Per-component box bounds, constant in time.
#[derive(Clone, Debug)]
pub struct BoxBounds {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl BoxBounds {
    pub fn uniform(lower: f64, upper: f64, m: usize) -> Self {
        assert!(lower <= upper);
        BoxBounds {
            lower: vec![lower; m],
            upper: vec![upper; m],
        }
    }

    pub fn contains(&self, u: &ControlVector) -> bool {
        for k in 0..=u.n_steps() {
            for i in 0..u.n_components() {
                let v = u.get(i, k);
                if v < self.lower[i] || v > self.upper[i] {
                    return false;
                }
            }
        }
        true
    }
}

/// Componentwise clamp onto the admissible box.
pub fn project_box(u: &ControlVector, bounds: &BoxBounds) -> ControlVector {
    let mut out = u.clone();
    for k in 0..=u.n_steps() {
        for i in 0..u.n_components() {
            let v = u.get(i, k).clamp(bounds.lower[i], bounds.upper[i]);
            out.set(i, k, v);
        }
    }
    out
}

/// Trapezoidal-in-time Euclidean-in-components norm; the discrete
/// `L^2(0,T; R^m)` norm used by the stopping criterion and the line search.
pub fn control_norm(g: &ControlVector, grid: &TimeGrid) -> f64 {
    control_inner(g, g, grid).sqrt()
}

pub fn control_inner(a: &ControlVector, b: &ControlVector, grid: &TimeGrid) -> f64 {
    assert_eq!(a.n_steps(), grid.n_steps);
    assert_eq!(a.n_steps(), b.n_steps());
    assert_eq!(a.n_components(), b.n_components());
    let mut acc = 0.0;
    for k in 0..=grid.n_steps {
        let w = grid.weight(k);
        let mut s = 0.0;
        for i in 0..a.n_components() {
            s += a.get(i, k) * b.get(i, k);
        }
        acc += w * s;
    }
    acc
}

/// Analytic solenoidal shape patterns with zero normal trace on the unit
/// square. `Vortex { k }` is
/// `(sin(k pi x) cos(k pi y), -sin(k pi y) cos(k pi x))`.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub enum ShapeFormula {
    Vortex { k: u32 },
}

impl ShapeFormula {
    pub fn eval(&self, x: f64, y: f64) -> [f64; 2] {
        match self {
            ShapeFormula::Vortex { k } => {
                let w = *k as f64 * PI;
                [(w * x).sin() * (w * y).cos(), -(w * y).sin() * (w * x).cos()]
            }
        }
    }
}

/// Shapes interpolated, cleaned and assembled on one particular mesh.
#[derive(Debug)]
pub struct MeshShapes {
    pub mesh_id: MeshId,
    pub fields: Vec<VelocityField>,
    /// Skew convection matrix of each cleaned shape.
    pub convection: Vec<CsrMatrix>,
    /// Largest nodal speed of each cleaned shape.
    pub max_speed: Vec<f64>,
    /// sup-norm of the weak divergence before and after cleaning.
    pub div_before: Vec<f64>,
    pub div_after: Vec<f64>,
}

/// Registry of analytic control shapes with a per-mesh interpolation cache.
pub struct ControlShapes {
    formulas: Vec<ShapeFormula>,
    cache: Mutex<HashMap<MeshId, Arc<MeshShapes>>>,
}

impl ControlShapes {
    pub fn new(formulas: Vec<ShapeFormula>) -> Self {
        assert!(!formulas.is_empty());
        ControlShapes {
            formulas,
            cache: Mutex::new(HashMap::new()),
        }
    }

    /// The single vortex shape of the reference configuration.
    pub fn default_single() -> Self {
        ControlShapes::new(vec![ShapeFormula::Vortex { k: 1 }])
    }

    pub fn n_shapes(&self) -> usize {
        self.formulas.len()
    }

    pub fn formulas(&self) -> &[ShapeFormula] {
        &self.formulas
    }

    /// Interpolates every shape on `geom`, projects out the weak divergence
    /// and assembles the skew convection matrices. Results are cached per
    /// mesh id.
    pub fn on_mesh(&self, geom: &MeshGeometry) -> Result<Arc<MeshShapes>> {
        if let Some(hit) = self.cache.lock().unwrap().get(&geom.id()) {
            return Ok(hit.clone());
        }
        let built = Arc::new(build_mesh_shapes(&self.formulas, geom)?);
        self.cache
            .lock()
            .unwrap()
            .insert(geom.id(), built.clone());
        Ok(built)
    }
}

fn build_mesh_shapes(formulas: &[ShapeFormula], geom: &MeshGeometry) -> Result<MeshShapes> {
    let cleaner = DivergenceCleaner::new(geom)?;
    let mut fields = Vec::with_capacity(formulas.len());
    let mut convection = Vec::with_capacity(formulas.len());
    let mut max_speed = Vec::with_capacity(formulas.len());
    let mut div_before = Vec::with_capacity(formulas.len());
    let mut div_after = Vec::with_capacity(formulas.len());
    for f in formulas {
        let mut v = VelocityField {
            vx: FEField::from_fn(geom, |x, y| f.eval(x, y)[0]),
            vy: FEField::from_fn(geom, |x, y| f.eval(x, y)[1]),
        };
        // the analytic shapes have zero normal trace; snap the interpolated
        // boundary values so it holds exactly in floating point
        for (i, p) in geom.vertices().iter().enumerate() {
            if p[0] == 0.0 || p[0] == 1.0 {
                v.vx.coeffs[i] = 0.0;
            }
            if p[1] == 0.0 || p[1] == 1.0 {
                v.vy.coeffs[i] = 0.0;
            }
        }
        let d0 = weak_divergence(geom, &v)?;
        div_before.push(sup_norm(&d0));
        cleaner.clean(geom, &mut v)?;
        let d1 = weak_divergence(geom, &v)?;
        div_after.push(sup_norm(&d1));
        max_speed.push(v.max_speed());
        convection.push(crate::fem::assemble_convection(geom, &v)?);
        fields.push(v);
    }
    Ok(MeshShapes {
        mesh_id: geom.id(),
        fields,
        convection,
        max_speed,
        div_before,
        div_after,
    })
}

fn sup_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |a, &b| a.max(b.abs()))
}

/// Projection of a nodal velocity onto the kernel of the weak divergence,
/// keeping boundary-normal components fixed at their exact zero values.
/// Writing `D` for the weak divergence restricted to the free velocity dofs,
/// a small-norm correction `c` with `D c = d` is computed from the
/// Tikhonov-regularized normal equations `(D^T D + mu I) c = D^T d` plus
/// defect correction. The regularized matrix is positive definite no matter
/// what spurious pressure modes `D^T` has (the criss-cross P1/P1 pairing has
/// a checkerboard kernel), and the defect iteration removes the `mu` bias
/// because `d` lies in the range of `D`.
struct DivergenceCleaner {
    /// Free dofs, encoded as vertex * 2 + component.
    free: Vec<usize>,
    /// D restricted to free dofs (rows: vertices, cols: positions in `free`).
    d: CsrMatrix,
    chol: SparseCholesky,
}

impl DivergenceCleaner {
    fn new(geom: &MeshGeometry) -> Result<Self> {
        let n = geom.n_vertices();
        let mut free_mask = vec![[true; 2]; n];
        for (i, p) in geom.vertices().iter().enumerate() {
            if p[0] == 0.0 || p[0] == 1.0 {
                free_mask[i][0] = false; // normal component on vertical sides
            }
            if p[1] == 0.0 || p[1] == 1.0 {
                free_mask[i][1] = false; // normal component on horizontal sides
            }
        }
        let mut dof_index = vec![[usize::MAX; 2]; n];
        let mut free = Vec::new();
        for i in 0..n {
            for c in 0..2 {
                if free_mask[i][c] {
                    dof_index[i][c] = free.len();
                    free.push(i * 2 + c);
                }
            }
        }
        // D_{j,(a,c)} = integral of psi_a * d_c psi_j
        let mut trips: Vec<(usize, usize, f64)> = Vec::new();
        for t in 0..geom.n_triangles() {
            let tri = geom.triangle(t);
            let g = geom.grads(t);
            let w = geom.area(t) / 3.0;
            for &a in &tri {
                for (jj, &j) in tri.iter().enumerate() {
                    for c in 0..2 {
                        if free_mask[a][c] {
                            trips.push((j, dof_index[a][c], w * g[jj][c]));
                        }
                    }
                }
            }
        }
        let nf = free.len();
        let d = CsrMatrix::from_triplets(n, nf, &trips);
        // normal matrix D^T D as a sum of row outer products
        let mut nm_trips: Vec<(usize, usize, f64)> = Vec::new();
        let mut max_diag = 0.0f64;
        for j in 0..n {
            let row: Vec<(usize, f64)> = d.row(j).collect();
            for &(a, va) in &row {
                for &(b, vb) in &row {
                    nm_trips.push((a, b, va * vb));
                    if a == b {
                        max_diag = max_diag.max(va * vb);
                    }
                }
            }
        }
        let mu = 1e-10 * max_diag.max(f64::MIN_POSITIVE);
        for a in 0..nf {
            nm_trips.push((a, a, mu));
        }
        let normal = CsrMatrix::from_triplets(nf, nf, &nm_trips);
        let chol = SparseCholesky::new(&normal)?;
        Ok(DivergenceCleaner { free, d, chol })
    }

    fn clean(&self, geom: &MeshGeometry, v: &mut VelocityField) -> Result<()> {
        let d = weak_divergence(geom, v)?;
        let mut c = vec![0.0; self.free.len()];
        for _ in 0..6 {
            let mut r = d.clone();
            let dc = self.d.matvec(&c);
            for (a, b) in r.iter_mut().zip(&dc) {
                *a -= b;
            }
            if sup_norm(&r) < 1e-16 {
                break;
            }
            let rhs = self.d.matvec_transpose(&r);
            let delta = self.chol.solve(&rhs);
            for (a, b) in c.iter_mut().zip(&delta) {
                *a += b;
            }
        }
        for (pos, &dof) in self.free.iter().enumerate() {
            let (vtx, comp) = (dof / 2, dof % 2);
            if comp == 0 {
                v.vx.coeffs[vtx] -= c[pos];
            } else {
                v.vy.coeffs[vtx] -= c[pos];
            }
        }
        Ok(())
    }
}

/// Applies the control operator at time index `k`:
/// the amplitude-weighted superposition of the cleaned shapes.
pub fn apply_b(
    u: &ControlVector,
    k: usize,
    shapes: &MeshShapes,
    geom: &MeshGeometry,
) -> Result<VelocityField> {
    if k > u.n_steps() {
        return Err(Error::TimeIndex {
            index: k,
            n_steps: u.n_steps(),
        });
    }
    if shapes.mesh_id != geom.id() {
        return Err(Error::MeshMismatch {
            field_mesh: shapes.mesh_id.0,
            expected: geom.id().0,
        });
    }
    let mut v = VelocityField::zero(geom);
    for (i, shape) in shapes.fields.iter().enumerate() {
        let a = u.get(i, k);
        if a != 0.0 {
            for (dst, src) in v.vx.coeffs.iter_mut().zip(&shape.vx.coeffs) {
                *dst += a * src;
            }
            for (dst, src) in v.vy.coeffs.iter_mut().zip(&shape.vy.coeffs) {
                *dst += a * src;
            }
        }
    }
    Ok(v)
}

/// Courant number of a velocity bound on a mesh: `max_speed * dt / h_min`.
pub fn cfl_number(max_speed: f64, dt: f64, h_min: f64) -> f64 {
    max_speed * dt / h_min
}

/// CFL screening of a whole control history against a mesh.
#[derive(Clone, Copy, Debug)]
pub struct CflReport {
    pub max_speed: f64,
    pub h_min: f64,
    pub cfl: f64,
    pub pass: bool,
}

pub fn cfl_check(
    u: &ControlVector,
    shapes: &MeshShapes,
    geom: &MeshGeometry,
    dt: f64,
) -> Result<CflReport> {
    let mut max_speed: f64 = 0.0;
    for k in 0..=u.n_steps() {
        let v = apply_b(u, k, shapes, geom)?;
        max_speed = max_speed.max(v.max_speed());
    }
    let cfl = cfl_number(max_speed, dt, geom.min_edge());
    Ok(CflReport {
        max_speed,
        h_min: geom.min_edge(),
        cfl,
        pass: cfl <= 1.0,
    })
}
