//! Field transfer between meshes of the hierarchy.
//!
//! The common refinement of two meshes is their forest union (the overlay of
//! two conforming bisection meshes is conforming again). Nodal transfer is
//! exact for piecewise-linear fields whenever the target refines the source;
//! in the other direction it is plain nodal interpolation.

use std::collections::HashSet;
use std::sync::Arc;

use super::forest::{cross, point_key, root_corners, sub, Forest, TriPath, N_ROOTS};
use super::AdaptiveMesh;
use crate::fem::FEField;
use crate::{Error, Result};

/// Sparse nodal interpolation operator between two meshes. Row `i` holds the
/// barycentric weights expressing target vertex `i` in the source P1 basis.
#[derive(Clone, Debug)]
pub struct TransferOp {
    pub source_mesh: super::MeshId,
    pub target_mesh: super::MeshId,
    n_source: usize,
    rows: Vec<[(usize, f64); 3]>,
}

impl TransferOp {
    pub fn n_target(&self) -> usize {
        self.rows.len()
    }

    pub fn n_source(&self) -> usize {
        self.n_source
    }

    /// Interpolates source nodal values onto the target mesh.
    pub fn apply(&self, src: &[f64]) -> Vec<f64> {
        assert_eq!(src.len(), self.n_source);
        self.rows
            .iter()
            .map(|row| row.iter().map(|&(j, w)| w * src[j]).sum())
            .collect()
    }

    /// Applies the transpose: pulls a target-side functional back to the source.
    pub fn apply_transpose(&self, tgt: &[f64]) -> Vec<f64> {
        assert_eq!(tgt.len(), self.rows.len());
        let mut out = vec![0.0; self.n_source];
        for (i, row) in self.rows.iter().enumerate() {
            for &(j, w) in row {
                if w != 0.0 {
                    out[j] += w * tgt[i];
                }
            }
        }
        out
    }

    pub fn identity(mesh: &AdaptiveMesh) -> TransferOp {
        let n = mesh.n_vertices();
        TransferOp {
            source_mesh: mesh.id(),
            target_mesh: mesh.id(),
            n_source: n,
            rows: (0..n).map(|i| [(i, 1.0), (0, 0.0), (0, 0.0)]).collect(),
        }
    }
}

/// Barycentric coordinates of `p` with respect to the corner triple.
fn barycentric(corners: &[[f64; 2]; 3], p: [f64; 2]) -> [f64; 3] {
    let [a, b, c] = *corners;
    let area2 = cross(sub(b, a), sub(c, a));
    [
        cross(sub(b, p), sub(c, p)) / area2,
        cross(sub(c, p), sub(a, p)) / area2,
        cross(sub(a, p), sub(b, p)) / area2,
    ]
}

const LOC_TOL: f64 = -1e-13;

fn contains(corners: &[[f64; 2]; 3], p: [f64; 2]) -> bool {
    barycentric(corners, p).iter().all(|&l| l >= LOC_TOL)
}

/// Walks the forest down to the leaf containing `p` and returns it together
/// with the barycentric coordinates. Points on shared edges may land in
/// either neighbor; conformity makes the interpolated value identical.
fn locate(forest: &Forest, p: [f64; 2]) -> (TriPath, [f64; 3]) {
    for root in 0..N_ROOTS {
        let mut path = TriPath::root(root);
        let mut corners = root_corners(root);
        if !contains(&corners.v, p) {
            continue;
        }
        while forest.is_split(&path) {
            let ch = corners.children();
            if contains(&ch[0].v, p) {
                path = path.child(0);
                corners = ch[0];
            } else {
                debug_assert!(contains(&ch[1].v, p));
                path = path.child(1);
                corners = ch[1];
            }
        }
        return (path, barycentric(&corners.v, p));
    }
    panic!("point {p:?} outside the unit square");
}

/// Builds the nodal interpolation operator from `source` onto `target`.
pub fn build_transfer(source: &AdaptiveMesh, target: &AdaptiveMesh) -> TransferOp {
    if source.id() == target.id() {
        return TransferOp::identity(source);
    }
    // leaf path -> triangle index on the source
    let tri_of_path: std::collections::HashMap<TriPath, usize> = (0..source.n_triangles())
        .map(|t| (source.path(t), t))
        .collect();
    let sgeom = source.geometry();
    let rows = target
        .geometry()
        .vertices()
        .iter()
        .map(|&p| {
            let (path, mut lam) = locate(source.forest(), p);
            let t = tri_of_path[&path];
            let tri = sgeom.triangle(t);
            for l in &mut lam {
                if l.abs() < 1e-14 {
                    *l = 0.0;
                }
            }
            [
                (tri[0], lam[0]),
                (tri[1], lam[1]),
                (tri[2], lam[2]),
            ]
        })
        .collect();
    TransferOp {
        source_mesh: source.id(),
        target_mesh: target.id(),
        n_source: sgeom.n_vertices(),
        rows,
    }
}

/// Exact transfer onto a refining mesh. Fails if `target` does not refine
/// the field's mesh.
pub fn prolongate(
    f: &FEField,
    source: &AdaptiveMesh,
    target: &AdaptiveMesh,
) -> Result<FEField> {
    f.check(source.geometry())?;
    if !source.refined_by(target) {
        return Err(Error::NotARefinement {
            from: source.id().0,
            to: target.id().0,
        });
    }
    Ok(transfer_nodal(f, source, target))
}

/// General nodal interpolation between any two hierarchy meshes. Exact for
/// nested targets, lossy otherwise.
pub fn transfer_nodal(f: &FEField, source: &AdaptiveMesh, target: &AdaptiveMesh) -> FEField {
    let op = build_transfer(source, target);
    FEField {
        coeffs: op.apply(&f.coeffs),
        mesh_id: target.id(),
    }
}

/// Smallest mesh in the hierarchy refining both inputs. Idempotent and
/// commutative; returns a clone of an input when that input already refines
/// the other.
pub fn common_refinement(a: &Arc<AdaptiveMesh>, b: &Arc<AdaptiveMesh>) -> Arc<AdaptiveMesh> {
    if b.refined_by(a) {
        return a.clone();
    }
    if a.refined_by(b) {
        return b.clone();
    }
    let mut forest = a.forest().union(b.forest());
    // The overlay of two conforming bisection meshes is conforming; run the
    // hanging-node loop anyway so the invariant never depends on that lemma.
    loop {
        let leaves = forest.leaves();
        let mut vkeys: HashSet<(u64, u64)> = HashSet::new();
        for (_, c) in &leaves {
            for v in c.v {
                vkeys.insert(point_key(v));
            }
        }
        let mut to_split = Vec::new();
        for (path, c) in &leaves {
            let mids = [
                super::forest::mid(c.v[0], c.v[1]),
                super::forest::mid(c.v[1], c.v[2]),
                super::forest::mid(c.v[2], c.v[0]),
            ];
            if mids.iter().any(|m| vkeys.contains(&point_key(*m))) {
                to_split.push(*path);
            }
        }
        if to_split.is_empty() {
            break;
        }
        for p in to_split {
            forest.split(p);
        }
    }
    Arc::new(AdaptiveMesh::from_forest(forest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fem::FEField;
    use crate::mesh::{refine_coarsen, RefineParams, RefinementIndicator};

    fn refined_near(mesh: &Arc<AdaptiveMesh>, x_center: f64) -> Arc<AdaptiveMesh> {
        let scores: Vec<f64> = (0..mesh.n_triangles())
            .map(|t| {
                let c = mesh.geometry().corners(t);
                let cx = (c[0][0] + c[1][0] + c[2][0]) / 3.0;
                if (cx - x_center).abs() < 0.25 {
                    1.0
                } else {
                    0.0
                }
            })
            .collect();
        let ind = RefinementIndicator {
            scores,
            mesh_id: mesh.id(),
        };
        let params = RefineParams {
            frac_refine: 1.0,
            frac_coarsen: 0.0,
            h_min: None,
        };
        refine_coarsen(mesh, &ind, &params).unwrap().0
    }

    #[test]
    fn common_refinement_idempotent() {
        let a = AdaptiveMesh::initial(2);
        let c = common_refinement(&a, &a);
        assert_eq!(c.id(), a.id());
    }

    #[test]
    fn common_refinement_of_nested_is_finer() {
        let a = AdaptiveMesh::initial(2);
        let b = AdaptiveMesh::initial(3);
        let c = common_refinement(&a, &b);
        assert_eq!(c.id(), b.id());
    }

    #[test]
    fn common_refinement_contains_both_vertex_sets() {
        let base = AdaptiveMesh::initial(2);
        let a = refined_near(&base, 0.0);
        let b = refined_near(&base, 1.0);
        let c = common_refinement(&a, &b);
        c.geometry().check_conforming().unwrap();
        let ckeys: HashSet<(u64, u64)> = c
            .geometry()
            .vertices()
            .iter()
            .map(|&p| point_key(p))
            .collect();
        for m in [&a, &b] {
            for &p in m.geometry().vertices() {
                assert!(ckeys.contains(&point_key(p)));
            }
        }
        // commutativity on the represented forest
        let c2 = common_refinement(&b, &a);
        assert_eq!(c.forest(), c2.forest());
    }

    #[test]
    fn prolongate_reproduces_linear_functions() {
        let coarse = AdaptiveMesh::initial(2);
        let fine = AdaptiveMesh::initial(4);
        let f = FEField::from_fn(coarse.geometry(), |x, _| x);
        let g = prolongate(&f, &coarse, &fine).unwrap();
        for (i, &p) in fine.geometry().vertices().iter().enumerate() {
            assert!((g.coeffs[i] - p[0]).abs() < 1e-15);
        }
    }

    #[test]
    fn prolongate_rejects_non_refinement() {
        let coarse = AdaptiveMesh::initial(2);
        let fine = AdaptiveMesh::initial(3);
        let f = FEField::from_fn(fine.geometry(), |x, y| x + y);
        assert!(prolongate(&f, &fine, &coarse).is_err());
    }

    #[test]
    fn transfer_transpose_is_adjoint() {
        let coarse = AdaptiveMesh::initial(2);
        let fine = AdaptiveMesh::initial(3);
        let op = build_transfer(&coarse, &fine);
        let x: Vec<f64> = (0..op.n_source()).map(|i| (i as f64).sin()).collect();
        let y: Vec<f64> = (0..op.n_target()).map(|i| (i as f64).cos()).collect();
        let ax = op.apply(&x);
        let aty = op.apply_transpose(&y);
        let lhs: f64 = ax.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&aty).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
