//! Conforming adaptive triangulations of the unit square.
//!
//! Refinement is newest-vertex bisection over a criss-cross root mesh, which
//! guarantees conformity, a bounded minimum angle (finitely many similarity
//! classes) and a strict hierarchy, so common refinements of any two meshes
//! exist and piecewise-linear fields transfer exactly between nested meshes.

mod forest;
mod refine;
mod transfer;

pub use forest::{Forest, TriPath};
pub use refine::{
    interface_indicator, refine_coarsen, uniform_refine, RefineParams, RefineReport,
    RefinementIndicator,
};
pub use transfer::{build_transfer, common_refinement, prolongate, transfer_nodal, TransferOp};

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use forest::{point_key, root_corners, TriCorners, N_ROOTS};

use crate::{Error, Result};

/// Unique token identifying a mesh instance. Fields carry the id of the mesh
/// they were created on, which catches mesh/field mismatches early.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub struct MeshId(pub u64);

static NEXT_MESH_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_mesh_id() -> MeshId {
    MeshId(NEXT_MESH_ID.fetch_add(1, Ordering::Relaxed))
}

/// Plain geometry of a triangulation: everything finite element assembly
/// needs, independent of the refinement hierarchy.
#[derive(Clone, Debug)]
pub struct MeshGeometry {
    id: MeshId,
    vertices: Vec<[f64; 2]>,
    /// Vertex index triples. For hierarchy meshes the order is
    /// (refinement edge start, refinement edge end, peak), counterclockwise.
    triangles: Vec<[usize; 3]>,
    areas: Vec<f64>,
    min_edge: f64,
    boundary: Vec<bool>,
}

impl MeshGeometry {
    /// Builds a geometry from raw vertex and triangle lists. Triangles with
    /// negative orientation are flipped. Intended for hand-made test meshes;
    /// hierarchy meshes come from [`AdaptiveMesh`].
    pub fn from_raw(vertices: Vec<[f64; 2]>, mut triangles: Vec<[usize; 3]>) -> Self {
        for t in &mut triangles {
            let a = tri_area(&vertices, t);
            if a < 0.0 {
                t.swap(1, 2);
            }
        }
        let areas: Vec<f64> = triangles.iter().map(|t| tri_area(&vertices, t)).collect();
        let min_edge = min_edge_of(&vertices, &triangles);
        let boundary = boundary_from_census(&vertices, &triangles);
        MeshGeometry {
            id: fresh_mesh_id(),
            vertices,
            triangles,
            areas,
            min_edge,
            boundary,
        }
    }

    pub fn id(&self) -> MeshId {
        self.id
    }

    pub fn n_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn n_triangles(&self) -> usize {
        self.triangles.len()
    }

    pub fn vertex(&self, i: usize) -> [f64; 2] {
        self.vertices[i]
    }

    pub fn vertices(&self) -> &[[f64; 2]] {
        &self.vertices
    }

    pub fn triangle(&self, t: usize) -> [usize; 3] {
        self.triangles[t]
    }

    pub fn triangles(&self) -> &[[usize; 3]] {
        &self.triangles
    }

    pub fn area(&self, t: usize) -> f64 {
        self.areas[t]
    }

    pub fn total_area(&self) -> f64 {
        self.areas.iter().sum()
    }

    pub fn min_edge(&self) -> f64 {
        self.min_edge
    }

    pub fn is_boundary_vertex(&self, i: usize) -> bool {
        self.boundary[i]
    }

    /// Corner coordinates of triangle `t`.
    pub fn corners(&self, t: usize) -> [[f64; 2]; 3] {
        let [a, b, c] = self.triangles[t];
        [self.vertices[a], self.vertices[b], self.vertices[c]]
    }

    /// Constant gradients of the three P1 basis functions on triangle `t`.
    pub fn grads(&self, t: usize) -> [[f64; 2]; 3] {
        let [a, b, c] = self.corners(t);
        let inv2a = 1.0 / (2.0 * self.areas[t]);
        [
            [(b[1] - c[1]) * inv2a, (c[0] - b[0]) * inv2a],
            [(c[1] - a[1]) * inv2a, (a[0] - c[0]) * inv2a],
            [(a[1] - b[1]) * inv2a, (b[0] - a[0]) * inv2a],
        ]
    }

    /// Checks conformity by edge census: every edge is shared by exactly two
    /// triangles or lies on the domain boundary.
    pub fn check_conforming(&self) -> std::result::Result<(), String> {
        let mut census: HashMap<(usize, usize), u32> = HashMap::new();
        for t in &self.triangles {
            for (i, j) in [(t[0], t[1]), (t[1], t[2]), (t[2], t[0])] {
                let key = (i.min(j), i.max(j));
                *census.entry(key).or_insert(0) += 1;
            }
        }
        for (&(i, j), &count) in &census {
            if count > 2 {
                return Err(format!("edge ({i},{j}) shared by {count} triangles"));
            }
            if count == 1 {
                let a = self.vertices[i];
                let b = self.vertices[j];
                let on_side = (a[0] == b[0] && (a[0] == 0.0 || a[0] == 1.0))
                    || (a[1] == b[1] && (a[1] == 0.0 || a[1] == 1.0));
                if !on_side {
                    return Err(format!(
                        "interior edge ({i},{j}) belongs to a single triangle (hanging node)"
                    ));
                }
            }
        }
        Ok(())
    }
}

fn tri_area(verts: &[[f64; 2]], t: &[usize; 3]) -> f64 {
    let a = verts[t[0]];
    let b = verts[t[1]];
    let c = verts[t[2]];
    0.5 * ((b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0]))
}

fn min_edge_of(verts: &[[f64; 2]], tris: &[[usize; 3]]) -> f64 {
    let mut m = f64::INFINITY;
    for t in tris {
        for (i, j) in [(t[0], t[1]), (t[1], t[2]), (t[2], t[0])] {
            m = m.min(forest::dist(verts[i], verts[j]));
        }
    }
    m
}

fn boundary_from_census(verts: &[[f64; 2]], tris: &[[usize; 3]]) -> Vec<bool> {
    let mut census: HashMap<(usize, usize), u32> = HashMap::new();
    for t in tris {
        for (i, j) in [(t[0], t[1]), (t[1], t[2]), (t[2], t[0])] {
            let key = (i.min(j), i.max(j));
            *census.entry(key).or_insert(0) += 1;
        }
    }
    let mut b = vec![false; verts.len()];
    for (&(i, j), &count) in &census {
        if count == 1 {
            b[i] = true;
            b[j] = true;
        }
    }
    b
}

/// A conforming triangulation in the newest-vertex bisection hierarchy.
#[derive(Clone, Debug)]
pub struct AdaptiveMesh {
    geometry: MeshGeometry,
    forest: Forest,
    /// Hierarchy path of each leaf triangle, aligned with `geometry.triangles`.
    paths: Vec<TriPath>,
    levels: Vec<u8>,
}

impl AdaptiveMesh {
    /// Uniform criss-cross mesh of the unit square, refined `n_levels - 1`
    /// times (each refinement quadruples the triangle count).
    ///
    /// `n_levels = 1` is the coarsest tiling: 4 triangles, 5 vertices.
    pub fn initial(n_levels: u32) -> Arc<AdaptiveMesh> {
        assert!(n_levels >= 1, "n_levels must be at least 1");
        let mut forest = Forest::new();
        for _ in 0..2 * (n_levels - 1) {
            for (path, _) in forest.leaves() {
                forest.split(path);
            }
        }
        Arc::new(AdaptiveMesh::from_forest(forest))
    }

    pub(crate) fn from_forest(forest: Forest) -> AdaptiveMesh {
        let mut vmap: HashMap<(u64, u64), usize> = HashMap::new();
        let mut vertices: Vec<[f64; 2]> = Vec::new();
        let mut triangles: Vec<[usize; 3]> = Vec::new();
        let mut paths: Vec<TriPath> = Vec::new();
        let mut levels: Vec<u8> = Vec::new();
        forest.for_each_leaf(|path, corners| {
            let mut idx = [0usize; 3];
            for (slot, p) in corners.v.iter().enumerate() {
                let next = vertices.len();
                let i = *vmap.entry(point_key(*p)).or_insert_with(|| {
                    vertices.push(*p);
                    next
                });
                idx[slot] = i;
            }
            triangles.push(idx);
            paths.push(path);
            levels.push(path.depth);
        });
        let areas: Vec<f64> = triangles
            .iter()
            .map(|t| tri_area(&vertices, t))
            .collect();
        let min_edge = min_edge_of(&vertices, &triangles);
        let boundary = vertices
            .iter()
            .map(|p| p[0] == 0.0 || p[0] == 1.0 || p[1] == 0.0 || p[1] == 1.0)
            .collect();
        AdaptiveMesh {
            geometry: MeshGeometry {
                id: fresh_mesh_id(),
                vertices,
                triangles,
                areas,
                min_edge,
                boundary,
            },
            forest,
            paths,
            levels,
        }
    }

    /// Rebuilds a hierarchy mesh from plain vertex/triangle lists (as read
    /// back from a VTK export). Vertex and triangle numbering of the input is
    /// preserved so that persisted nodal data stays aligned.
    pub fn from_vertices_triangles(
        vertices: Vec<[f64; 2]>,
        triangles: Vec<[usize; 3]>,
    ) -> Result<AdaptiveMesh> {
        // canonical key: sorted corner coordinate keys
        let tri_key = |corners: &[[f64; 2]; 3]| {
            let mut k = [
                point_key(corners[0]),
                point_key(corners[1]),
                point_key(corners[2]),
            ];
            k.sort_unstable();
            k
        };
        let mut want: HashMap<[(u64, u64); 3], usize> = HashMap::new();
        for (i, t) in triangles.iter().enumerate() {
            let corners = [vertices[t[0]], vertices[t[1]], vertices[t[2]]];
            if want.insert(tri_key(&corners), i).is_some() {
                return Err(Error::Parse {
                    file: "mesh".into(),
                    msg: format!("duplicate triangle {i}"),
                });
            }
        }
        let mut forest = Forest::new();
        let mut slot_of_tri: Vec<Option<(TriPath, TriCorners)>> = vec![None; triangles.len()];
        let mut stack: Vec<(TriPath, TriCorners)> = (0..N_ROOTS)
            .map(|r| (TriPath::root(r), root_corners(r)))
            .collect();
        while let Some((path, corners)) = stack.pop() {
            if let Some(&i) = want.get(&tri_key(&corners.v)) {
                slot_of_tri[i] = Some((path, corners));
            } else {
                if path.depth >= 60 {
                    return Err(Error::Parse {
                        file: "mesh".into(),
                        msg: "triangles do not form a bisection mesh".into(),
                    });
                }
                forest.split(path);
                let ch = corners.children();
                stack.push((path.child(0), ch[0]));
                stack.push((path.child(1), ch[1]));
            }
        }
        let mut paths = Vec::with_capacity(triangles.len());
        let mut levels = Vec::with_capacity(triangles.len());
        let mut canon_tris = Vec::with_capacity(triangles.len());
        let vmap: HashMap<(u64, u64), usize> = vertices
            .iter()
            .enumerate()
            .map(|(i, p)| (point_key(*p), i))
            .collect();
        for (i, slot) in slot_of_tri.iter().enumerate() {
            let (path, corners) = slot.ok_or_else(|| Error::Parse {
                file: "mesh".into(),
                msg: format!("triangle {i} not reachable in the hierarchy"),
            })?;
            // rewrite the triangle in canonical corner order (ref edge, peak)
            let idx = |p: [f64; 2]| vmap[&point_key(p)];
            canon_tris.push([idx(corners.v[0]), idx(corners.v[1]), idx(corners.v[2])]);
            paths.push(path);
            levels.push(path.depth);
        }
        let areas: Vec<f64> = canon_tris
            .iter()
            .map(|t| tri_area(&vertices, t))
            .collect();
        let min_edge = min_edge_of(&vertices, &canon_tris);
        let boundary = vertices
            .iter()
            .map(|p| p[0] == 0.0 || p[0] == 1.0 || p[1] == 0.0 || p[1] == 1.0)
            .collect();
        Ok(AdaptiveMesh {
            geometry: MeshGeometry {
                id: fresh_mesh_id(),
                vertices,
                triangles: canon_tris,
                areas,
                min_edge,
                boundary,
            },
            forest,
            paths,
            levels,
        })
    }

    pub fn geometry(&self) -> &MeshGeometry {
        &self.geometry
    }

    pub fn id(&self) -> MeshId {
        self.geometry.id
    }

    pub fn n_vertices(&self) -> usize {
        self.geometry.n_vertices()
    }

    pub fn n_triangles(&self) -> usize {
        self.geometry.n_triangles()
    }

    pub fn forest(&self) -> &Forest {
        &self.forest
    }

    pub fn path(&self, t: usize) -> TriPath {
        self.paths[t]
    }

    pub fn level(&self, t: usize) -> u8 {
        self.levels[t]
    }

    pub fn min_edge(&self) -> f64 {
        self.geometry.min_edge()
    }

    /// True if `other` refines this mesh (every leaf of `self` is a node of
    /// `other`'s forest).
    pub fn refined_by(&self, other: &AdaptiveMesh) -> bool {
        self.forest.refined_by(&other.forest)
    }
}

/// Smallest edge length possible at bisection level `l` (criss-cross root).
/// Levels alternate between the two similarity classes, so this is exact.
pub fn min_edge_at_level(l: u32) -> f64 {
    let k = (l / 2) as i32;
    if l % 2 == 0 {
        0.5f64.powi(k) * std::f64::consts::FRAC_1_SQRT_2
    } else {
        0.5f64.powi(k + 1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn initial_mesh_counts() {
        let m1 = AdaptiveMesh::initial(1);
        assert_eq!(m1.n_triangles(), 4);
        assert_eq!(m1.n_vertices(), 5);
        for k in 1..=4u32 {
            let m = AdaptiveMesh::initial(k);
            assert_eq!(m.n_triangles(), 4 * 4usize.pow(k - 1));
            assert!((m.geometry().total_area() - 1.0).abs() < 1e-12);
            m.geometry().check_conforming().unwrap();
        }
    }

    #[test]
    fn level_three_vertex_count() {
        // 4 cells per side criss-crossed: 25 + 16 vertices
        assert_eq!(AdaptiveMesh::initial(3).n_vertices(), 41);
        assert_eq!(AdaptiveMesh::initial(4).n_vertices(), 145);
    }

    #[test]
    fn min_edge_matches_level_formula() {
        for k in 1..=5u32 {
            let m = AdaptiveMesh::initial(k);
            let lvl = 2 * (k - 1);
            assert!((m.min_edge() - min_edge_at_level(lvl)).abs() < 1e-15);
        }
    }

    #[test]
    fn reconstruction_roundtrip() {
        let m = AdaptiveMesh::initial(3);
        let rebuilt = AdaptiveMesh::from_vertices_triangles(
            m.geometry().vertices().to_vec(),
            m.geometry().triangles().to_vec(),
        )
        .unwrap();
        assert_eq!(rebuilt.n_triangles(), m.n_triangles());
        assert_eq!(rebuilt.forest(), m.forest());
        assert_eq!(rebuilt.geometry().triangles(), m.geometry().triangles());
    }

    #[test]
    fn raw_geometry_two_triangle_square() {
        let g = MeshGeometry::from_raw(
            vec![[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]],
            vec![[0, 1, 2], [0, 2, 3]],
        );
        assert!((g.total_area() - 1.0).abs() < 1e-15);
        g.check_conforming().unwrap();
        assert!(g.is_boundary_vertex(0));
    }
}
