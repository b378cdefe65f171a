//! Proper orthogonal decomposition in the L2 inner product from snapshots on
//! mutually different meshes of the hierarchy.
//!
//! Snapshots are first prolongated (losslessly, by P1 nesting) onto the
//! common refinement of all their meshes; the basis then comes from the
//! method of snapshots: eigen-decomposition of the weighted Gram matrix,
//! which stays small (snapshot count) however large the common space gets.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::fem::FEField;
use crate::mesh::{common_refinement, prolongate, AdaptiveMesh};
use crate::sparse::CsrMatrix;
use crate::{Error, Result};

/// Snapshot ensemble: fields on their own meshes with time-quadrature weights.
pub struct SnapshotSet {
    pub fields: Vec<FEField>,
    pub meshes: Vec<Arc<AdaptiveMesh>>,
    pub weights: Vec<f64>,
    pub label: String,
}

impl SnapshotSet {
    pub fn new(
        fields: Vec<FEField>,
        meshes: Vec<Arc<AdaptiveMesh>>,
        weights: Vec<f64>,
        label: impl Into<String>,
    ) -> Self {
        assert_eq!(fields.len(), meshes.len());
        assert_eq!(fields.len(), weights.len());
        assert!(fields.len() >= 2, "need at least two snapshots");
        assert!(weights.iter().all(|&w| w > 0.0), "weights must be positive");
        SnapshotSet {
            fields,
            meshes,
            weights,
            label: label.into(),
        }
    }

    /// Phase field history of a trajectory with trapezoid weights.
    pub fn from_trajectory(traj: &crate::state::Trajectory, grid: &crate::control::TimeGrid) -> Self {
        let fields: Vec<FEField> = traj.steps.iter().map(|s| s.phi.clone()).collect();
        let meshes: Vec<Arc<AdaptiveMesh>> = traj.steps.iter().map(|s| s.mesh.clone()).collect();
        let weights: Vec<f64> = (0..=traj.n_steps()).map(|k| grid.weight(k)).collect();
        SnapshotSet::new(fields, meshes, weights, "desired trajectory")
    }

    /// Phase field and potential history together, spanning the full mixed
    /// state so a full-rank basis reproduces the scheme exactly. Each
    /// snapshot is normalized to unit lumped-mass norm: the potential norms
    /// exceed the phase field norms by orders of magnitude and would push
    /// genuine state directions below the rank cutoff otherwise.
    pub fn from_trajectory_with_potential(traj: &crate::state::Trajectory) -> Self {
        let mut fields: Vec<FEField> = traj.steps.iter().map(|s| s.phi.clone()).collect();
        fields.extend(traj.steps.iter().map(|s| s.mu.clone()));
        let meshes: Vec<Arc<AdaptiveMesh>> = traj.steps.iter().map(|s| s.mesh.clone()).collect();
        let meshes = [meshes.clone(), meshes].concat();
        for (f, m) in fields.iter_mut().zip(&meshes) {
            let lump = crate::fem::lumped_mass(m.geometry());
            let n2: f64 = lump.iter().zip(&f.coeffs).map(|(l, c)| l * c * c).sum();
            if n2 > 0.0 {
                let inv = 1.0 / n2.sqrt();
                for c in &mut f.coeffs {
                    *c *= inv;
                }
            }
        }
        let n = fields.len();
        SnapshotSet::new(fields, meshes, vec![1.0; n], "state and potential")
    }

    pub fn len(&self) -> usize {
        self.fields.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fields.is_empty()
    }
}

/// Snapshots prolongated onto their common reference mesh.
pub struct CommonSpace {
    pub mesh: Arc<AdaptiveMesh>,
    pub fields: Vec<FEField>,
    pub weights: Vec<f64>,
    pub mass: CsrMatrix,
}

/// Iterated common refinement of all snapshot meshes (optionally forced to
/// refine extra meshes, e.g. the one carrying the initial state), with every
/// snapshot prolongated exactly.
pub fn build_common_space(
    snaps: &SnapshotSet,
    extra_meshes: &[Arc<AdaptiveMesh>],
) -> Result<CommonSpace> {
    let mut common = snaps.meshes[0].clone();
    for m in snaps.meshes.iter().skip(1).chain(extra_meshes) {
        common = common_refinement(&common, m);
    }
    let mut fields = Vec::with_capacity(snaps.len());
    for (f, m) in snaps.fields.iter().zip(&snaps.meshes) {
        fields.push(prolongate(f, m, &common)?);
    }
    let mass = crate::fem::assemble_mass(common.geometry());
    Ok(CommonSpace {
        mesh: common,
        fields,
        weights: snaps.weights.clone(),
        mass,
    })
}

/// POD basis on the reference mesh.
pub struct PodBasis {
    pub mesh: Arc<AdaptiveMesh>,
    /// Mass-orthonormal modes, one field per mode.
    pub modes: Vec<FEField>,
    /// Retained eigenvalues, non-increasing.
    pub eigenvalues: Vec<f64>,
    /// Sum of the discarded eigenvalues.
    pub tail: f64,
    /// Sum of all eigenvalues.
    pub total: f64,
    /// Number of modes dropped against the request because the snapshot set
    /// ran out of numerical rank.
    pub truncated: usize,
}

impl PodBasis {
    pub fn ell(&self) -> usize {
        self.modes.len()
    }

    /// Modes as the columns of a dense matrix.
    pub fn mode_matrix(&self) -> DMatrix<f64> {
        let n = self.mesh.n_vertices();
        let ell = self.modes.len();
        DMatrix::from_fn(n, ell, |i, j| self.modes[j].coeffs[i])
    }
}

const RANK_CUTOFF: f64 = 1e-14;

/// Method of snapshots on the common space: eigen-decomposition of
/// `G_jk = sqrt(w_j w_k) y_j^T M y_k`, modes
/// `psi_i = (1 / sqrt(lambda_i)) sum_j sqrt(w_j) e_ij y_j`, polished by one
/// M-orthonormal Gram-Schmidt pass. Modes whose eigenvalue falls below
/// `1e-14 * lambda_1` are dropped.
pub fn compute_basis(space: &CommonSpace, ell: usize) -> Result<PodBasis> {
    let ns = space.fields.len();
    if ell > ns {
        return Err(Error::RankDeficient {
            requested: ell,
            rank: ns,
        });
    }
    let n = space.mesh.n_vertices();
    // Z = M Y, G = W^(1/2) Y^T Z W^(1/2)
    let sw: Vec<f64> = space.weights.iter().map(|w| w.sqrt()).collect();
    let z: Vec<Vec<f64>> = space
        .fields
        .iter()
        .map(|f| space.mass.matvec(&f.coeffs))
        .collect();
    let mut gram = DMatrix::<f64>::zeros(ns, ns);
    for j in 0..ns {
        for k in j..ns {
            let v = sw[j] * sw[k] * crate::sparse::dot(&space.fields[j].coeffs, &z[k]);
            gram[(j, k)] = v;
            gram[(k, j)] = v;
        }
    }
    let eig = gram.clone().symmetric_eigen();
    // order descending, clamp tiny negatives
    let mut order: Vec<usize> = (0..ns).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap());
    let lambda: Vec<f64> = order
        .iter()
        .map(|&i| {
            let l = eig.eigenvalues[i];
            debug_assert!(l > -1e-12 * eig.eigenvalues[order[0]].max(1.0));
            l.max(0.0)
        })
        .collect();
    let total: f64 = lambda.iter().sum();
    let rank = lambda
        .iter()
        .take_while(|&&l| l > RANK_CUTOFF * lambda[0])
        .count();
    let kept = ell.min(rank);
    let truncated = ell - kept;

    let mut modes: Vec<Vec<f64>> = Vec::with_capacity(kept);
    for (pos, &oi) in order.iter().take(kept).enumerate() {
        let ev = eig.eigenvectors.column(oi);
        let scale = 1.0 / lambda[pos].sqrt();
        let mut psi = vec![0.0; n];
        for j in 0..ns {
            let c = scale * sw[j] * ev[j];
            if c != 0.0 {
                crate::sparse::axpy(&mut psi, c, &space.fields[j].coeffs);
            }
        }
        modes.push(psi);
    }
    // Gram-Schmidt polish in the M inner product restores orthonormality
    // lost to rounding for trailing eigenvalues; spans are unchanged.
    for i in 0..modes.len() {
        for j in 0..i {
            let mj = space.mass.matvec(&modes[j]);
            let proj = crate::sparse::dot(&modes[i], &mj);
            let mj_field = modes[j].clone();
            crate::sparse::axpy(&mut modes[i], -proj, &mj_field);
        }
        let mi = space.mass.matvec(&modes[i]);
        let nrm = crate::sparse::dot(&modes[i], &mi).sqrt();
        for v in &mut modes[i] {
            *v /= nrm;
        }
    }
    // deterministic sign: largest-magnitude coefficient positive
    for psi in &mut modes {
        let mut best = 0usize;
        for (i, v) in psi.iter().enumerate() {
            if v.abs() > psi[best].abs() {
                best = i;
            }
        }
        if psi[best] < 0.0 {
            for v in psi.iter_mut() {
                *v = -*v;
            }
        }
    }
    let tail: f64 = lambda.iter().skip(kept).sum();
    Ok(PodBasis {
        mesh: space.mesh.clone(),
        modes: modes
            .into_iter()
            .map(|c| FEField::new(c, space.mesh.id()))
            .collect(),
        eigenvalues: lambda[..kept].to_vec(),
        tail,
        total,
        truncated,
    })
}

/// Direct weighted projection error of the snapshots onto the basis,
/// together with the eigenvalue tail it must equal:
/// `sum_j w_j |y_j - P y_j|_M^2 = sum_{i > ell} lambda_i`.
pub fn projection_error(space: &CommonSpace, basis: &PodBasis) -> (f64, f64) {
    let mut direct = 0.0;
    for (j, y) in space.fields.iter().enumerate() {
        let my = space.mass.matvec(&y.coeffs);
        let mut residual = y.coeffs.clone();
        for psi in &basis.modes {
            let a = crate::sparse::dot(&psi.coeffs, &my);
            crate::sparse::axpy(&mut residual, -a, &psi.coeffs);
        }
        let mr = space.mass.matvec(&residual);
        direct += space.weights[j] * crate::sparse::dot(&residual, &mr);
    }
    (direct, basis.tail)
}

/// Projects a field (given on the common mesh) onto the reduced coordinates.
pub fn project_coeffs(space: &CommonSpace, basis: &PodBasis, f: &[f64]) -> DVector<f64> {
    let mf = space.mass.matvec(f);
    DVector::from_fn(basis.ell(), |i, _| {
        crate::sparse::dot(&basis.modes[i].coeffs, &mf)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::AdaptiveMesh;
    use rand::{Rng, SeedableRng};

    fn random_fields(
        mesh: &Arc<AdaptiveMesh>,
        count: usize,
        seed: u64,
    ) -> (Vec<FEField>, Vec<Arc<AdaptiveMesh>>, Vec<f64>) {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let fields = (0..count)
            .map(|_| {
                FEField::new(
                    (0..mesh.n_vertices())
                        .map(|_| rng.gen_range(-1.0..1.0))
                        .collect(),
                    mesh.id(),
                )
            })
            .collect();
        (fields, vec![mesh.clone(); count], vec![1.0; count])
    }

    #[test]
    fn identical_snapshots_give_rank_one() {
        let mesh = AdaptiveMesh::initial(2);
        let geom = mesh.geometry();
        let y = FEField::from_fn(geom, |x, y| x + 2.0 * y);
        let n_copies = 5;
        let snaps = SnapshotSet::new(
            vec![y.clone(); n_copies],
            vec![mesh.clone(); n_copies],
            vec![1.0; n_copies],
            "copies",
        );
        let space = build_common_space(&snaps, &[]).unwrap();
        let basis = compute_basis(&space, 1).unwrap();
        assert_eq!(basis.ell(), 1);
        let mass = crate::fem::assemble_mass(geom);
        let y_norm2 = mass.quadratic_form(&y.coeffs, &y.coeffs);
        assert!((basis.eigenvalues[0] - n_copies as f64 * y_norm2).abs() < 1e-10);
        // mode is y normalized in the M norm
        let scale = y.coeffs[1] / basis.modes[0].coeffs[1];
        for (a, b) in basis.modes[0].coeffs.iter().zip(&y.coeffs) {
            assert!((a * scale - b).abs() < 1e-10);
        }
        // requesting more modes than rank truncates with a warning count
        let basis2 = compute_basis(&space, 3).unwrap();
        assert_eq!(basis2.ell(), 1);
        assert_eq!(basis2.truncated, 2);
    }

    #[test]
    fn orthogonal_snapshots_diagonalize() {
        let mesh = AdaptiveMesh::initial(3);
        let geom = mesh.geometry();
        let mass = crate::fem::assemble_mass(geom);
        // two M-orthogonal fields with norms 2 and 1
        let mut y1 = FEField::from_fn(geom, |x, _| (std::f64::consts::PI * x).cos());
        let mut y2 = FEField::from_fn(geom, |_, y| (std::f64::consts::PI * y).cos());
        // orthogonalize y2 against y1 exactly, then scale
        let m1 = mass.matvec(&y1.coeffs);
        let p = crate::sparse::dot(&y2.coeffs, &m1) / mass.quadratic_form(&y1.coeffs, &y1.coeffs);
        crate::sparse::axpy(&mut y2.coeffs, -p, &y1.coeffs);
        let n1 = mass.quadratic_form(&y1.coeffs, &y1.coeffs).sqrt();
        for v in &mut y1.coeffs {
            *v *= 2.0 / n1;
        }
        let n2 = mass.quadratic_form(&y2.coeffs, &y2.coeffs).sqrt();
        for v in &mut y2.coeffs {
            *v /= n2;
        }
        let snaps = SnapshotSet::new(
            vec![y1.clone(), y2.clone()],
            vec![mesh.clone(), mesh.clone()],
            vec![1.0, 1.0],
            "orthogonal",
        );
        let space = build_common_space(&snaps, &[]).unwrap();
        let basis = compute_basis(&space, 2).unwrap();
        assert!((basis.eigenvalues[0] - 4.0).abs() < 1e-10);
        assert!((basis.eigenvalues[1] - 1.0).abs() < 1e-10);
    }

    #[test]
    fn gram_eigenpairs_match_jacobi_oracle() {
        let mesh = AdaptiveMesh::initial(3);
        let (fields, meshes, weights) = random_fields(&mesh, 20, 11);
        let snaps = SnapshotSet::new(fields, meshes, weights, "random");
        let space = build_common_space(&snaps, &[]).unwrap();
        let basis = compute_basis(&space, 20).unwrap();

        // independent cyclic Jacobi eigensolver on the same Gram matrix
        let ns = 20;
        let mut g = vec![vec![0.0f64; ns]; ns];
        for j in 0..ns {
            let mj = space.mass.matvec(&space.fields[j].coeffs);
            for k in 0..ns {
                g[j][k] = crate::sparse::dot(&space.fields[k].coeffs, &mj);
            }
        }
        for _sweep in 0..60 {
            let mut off = 0.0;
            for p in 0..ns {
                for q in (p + 1)..ns {
                    off += g[p][q] * g[p][q];
                    if g[p][q].abs() < 1e-15 {
                        continue;
                    }
                    let theta = 0.5 * (g[q][q] - g[p][p]) / g[p][q];
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let c = 1.0 / (t * t + 1.0).sqrt();
                    let s = t * c;
                    for i in 0..ns {
                        let (gip, giq) = (g[i][p], g[i][q]);
                        g[i][p] = c * gip - s * giq;
                        g[i][q] = s * gip + c * giq;
                    }
                    for i in 0..ns {
                        let (gpi, gqi) = (g[p][i], g[q][i]);
                        g[p][i] = c * gpi - s * gqi;
                        g[q][i] = s * gpi + c * gqi;
                    }
                }
            }
            if off < 1e-28 {
                break;
            }
        }
        let mut oracle: Vec<f64> = (0..ns).map(|i| g[i][i]).collect();
        oracle.sort_by(|a, b| b.partial_cmp(a).unwrap());
        for (got, want) in basis.eigenvalues.iter().zip(&oracle) {
            assert!(
                (got - want).abs() <= 1e-10 * oracle[0].max(1.0),
                "{got} vs jacobi {want}"
            );
        }
    }

    #[test]
    fn modes_are_mass_orthonormal() {
        let mesh = AdaptiveMesh::initial(3);
        let (fields, meshes, weights) = random_fields(&mesh, 15, 5);
        let snaps = SnapshotSet::new(fields, meshes, weights, "random");
        let space = build_common_space(&snaps, &[]).unwrap();
        let basis = compute_basis(&space, 15).unwrap();
        for i in 0..basis.ell() {
            let mi = space.mass.matvec(&basis.modes[i].coeffs);
            for j in 0..=i {
                let inner = crate::sparse::dot(&basis.modes[j].coeffs, &mi);
                let want = if i == j { 1.0 } else { 0.0 };
                assert!(
                    (inner - want).abs() < 1e-10,
                    "<psi_{j}, psi_{i}>_M = {inner}"
                );
            }
        }
    }

    #[test]
    fn energy_identity_direct_error_equals_tail() {
        let mesh = AdaptiveMesh::initial(3);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(23);
        // smooth-ish correlated snapshots give a decaying spectrum
        let geom = mesh.geometry();
        let t_count = 25;
        let fields: Vec<FEField> = (0..t_count)
            .map(|k| {
                let t = k as f64 / t_count as f64;
                let a = rng.gen_range(0.8..1.2);
                FEField::from_fn(geom, |x, y| {
                    a * ((x - 0.3 - 0.4 * t).powi(2) + (y - 0.5).powi(2)).sqrt().tanh()
                })
            })
            .collect();
        let weights: Vec<f64> = (0..t_count).map(|k| if k == 0 { 0.5 } else { 1.0 }).collect();
        let snaps = SnapshotSet::new(fields, vec![mesh.clone(); t_count], weights, "moving blob");
        let space = build_common_space(&snaps, &[]).unwrap();
        for ell in [0usize, 1, 5, 10] {
            let basis = compute_basis(&space, ell).unwrap();
            let (direct, tail) = projection_error(&space, &basis);
            let scale = basis.total.max(1e-30);
            assert!(
                (direct - tail).abs() <= 1e-10 * scale,
                "ell {ell}: direct {direct:.6e} vs tail {tail:.6e}"
            );
        }
        // full rank: error at the rounding floor
        let basis = compute_basis(&space, t_count).unwrap();
        let (direct, _) = projection_error(&space, &basis);
        assert!(direct.abs() < 1e-10);
    }

    #[test]
    fn snapshot_order_changes_modes_at_most_by_sign() {
        let mesh = AdaptiveMesh::initial(3);
        let (fields, meshes, weights) = random_fields(&mesh, 8, 3);
        let snaps = SnapshotSet::new(fields.clone(), meshes.clone(), weights.clone(), "fwd");
        let mut rev_f = fields;
        rev_f.reverse();
        let rev = SnapshotSet::new(rev_f, meshes, weights, "rev");
        let s1 = build_common_space(&snaps, &[]).unwrap();
        let s2 = build_common_space(&rev, &[]).unwrap();
        let b1 = compute_basis(&s1, 8).unwrap();
        let b2 = compute_basis(&s2, 8).unwrap();
        for i in 0..8 {
            let m = s1.mass.matvec(&b1.modes[i].coeffs);
            let inner = crate::sparse::dot(&b2.modes[i].coeffs, &m).abs();
            assert!((inner - 1.0).abs() < 1e-8, "mode {i}: |<psi, psi'>| = {inner}");
        }
    }

    #[test]
    fn snapshots_on_different_meshes_keep_their_norms() {
        use crate::mesh::{refine_coarsen, RefineParams, RefinementIndicator};
        let base = AdaptiveMesh::initial(2);
        let mut meshes: Vec<Arc<AdaptiveMesh>> = vec![base.clone()];
        // refine near three different spots
        for spot in [0.2, 0.5, 0.8] {
            let scores: Vec<f64> = (0..base.n_triangles())
                .map(|t| {
                    let c = base.geometry().corners(t);
                    let cx = (c[0][0] + c[1][0] + c[2][0]) / 3.0;
                    if (cx - spot).abs() < 0.2 {
                        1.0
                    } else {
                        0.0
                    }
                })
                .collect();
            let ind = RefinementIndicator {
                scores,
                mesh_id: base.id(),
            };
            let params = RefineParams {
                frac_refine: 1.0,
                frac_coarsen: 0.0,
                h_min: None,
            };
            meshes.push(refine_coarsen(&base, &ind, &params).unwrap().0);
        }
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(77);
        let fields: Vec<FEField> = meshes
            .iter()
            .map(|m| {
                FEField::new(
                    (0..m.n_vertices())
                        .map(|_| rng.gen_range(-1.0..1.0))
                        .collect(),
                    m.id(),
                )
            })
            .collect();
        let norms: Vec<f64> = fields
            .iter()
            .zip(&meshes)
            .map(|(f, m)| {
                crate::fem::assemble_mass(m.geometry()).quadratic_form(&f.coeffs, &f.coeffs)
            })
            .collect();
        let snaps = SnapshotSet::new(fields, meshes.clone(), vec![1.0; 4], "multi-mesh");
        let space = build_common_space(&snaps, &[]).unwrap();
        for m in &meshes {
            assert!(m.refined_by(&space.mesh));
        }
        for (f, want) in space.fields.iter().zip(&norms) {
            let got = space.mass.quadratic_form(&f.coeffs, &f.coeffs);
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }
}
