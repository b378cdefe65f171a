//! Indicator-driven refinement and coarsening.
//!
//! Marking is Dörfler-style on the indicator mass; marked triangles are
//! bisected twice (quadrupled), conformity is restored by a hanging-node
//! closure loop, and coarsening merges sibling pairs whose joint indicator
//! falls into the bottom share, provided the bisection vertex is used by
//! nobody else.

use std::collections::{HashMap, HashSet};
use std::sync::Arc;

use super::forest::{mid, point_key, Forest, TriPath};
use super::{min_edge_at_level, AdaptiveMesh};
use crate::fem::FEField;
use crate::{Error, Result};

/// Per-triangle nonnegative refinement scores.
#[derive(Clone, Debug)]
pub struct RefinementIndicator {
    pub scores: Vec<f64>,
    pub mesh_id: super::MeshId,
}

/// Scores triangles by the interfacial activity of a phase field:
/// `|T| * (|grad phi|^2 + flag)` where the flag is 1 whenever some vertex of
/// the triangle has `|phi| < 0.9`, so the diffuse interface band stays
/// refined even where the discrete gradient is locally small.
pub fn interface_indicator(mesh: &AdaptiveMesh, phi: &FEField) -> Result<RefinementIndicator> {
    let geom = mesh.geometry();
    phi.check(geom)?;
    let mut scores = Vec::with_capacity(geom.n_triangles());
    for t in 0..geom.n_triangles() {
        let tri = geom.triangle(t);
        let grads = geom.grads(t);
        let mut g = [0.0, 0.0];
        let mut flagged = false;
        for (slot, &v) in tri.iter().enumerate() {
            let c = phi.coeffs[v];
            g[0] += c * grads[slot][0];
            g[1] += c * grads[slot][1];
            if c.abs() < 0.9 {
                flagged = true;
            }
        }
        let area = geom.area(t);
        let score = area * (g[0] * g[0] + g[1] * g[1] + if flagged { 1.0 } else { 0.0 });
        scores.push(score);
    }
    Ok(RefinementIndicator {
        scores,
        mesh_id: geom.id(),
    })
}

/// Marking and guard settings for one adaptation pass.
#[derive(Clone, Copy, Debug)]
pub struct RefineParams {
    /// Share of total indicator mass whose carriers get refined, in (0, 1].
    pub frac_refine: f64,
    /// Share of total indicator mass below which sibling pairs may merge, in [0, 1).
    pub frac_coarsen: f64,
    /// Minimum edge length guard; refinements that would go below are skipped.
    pub h_min: Option<f64>,
}

impl Default for RefineParams {
    fn default() -> Self {
        RefineParams {
            frac_refine: 0.3,
            frac_coarsen: 0.05,
            h_min: Some(0.00177),
        }
    }
}

/// What one adaptation pass did.
#[derive(Clone, Copy, Debug, Default)]
pub struct RefineReport {
    pub marked: usize,
    pub guard_skipped: usize,
    pub coarsened_pairs: usize,
}

/// Dörfler marking: smallest set of triangles carrying at least
/// `frac` of the total score, largest scores first.
fn doerfler_mark(scores: &[f64], frac: f64) -> Vec<usize> {
    let total: f64 = scores.iter().sum();
    if total <= 0.0 || frac <= 0.0 {
        return Vec::new();
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    let target = frac * total;
    let mut acc = 0.0;
    let mut marked = Vec::new();
    for i in order {
        if acc >= target {
            break;
        }
        if scores[i] <= 0.0 {
            break;
        }
        acc += scores[i];
        marked.push(i);
    }
    marked
}

/// One adaptation pass: refine the top-`frac_refine` indicator carriers
/// (quadrupling them), restore conformity, then merge bottom-share sibling
/// pairs where possible. Returns the new mesh and a report.
pub fn refine_coarsen(
    mesh: &AdaptiveMesh,
    ind: &RefinementIndicator,
    params: &RefineParams,
) -> Result<(Arc<AdaptiveMesh>, RefineReport)> {
    let geom = mesh.geometry();
    if ind.mesh_id != geom.id() {
        return Err(Error::MeshMismatch {
            field_mesh: ind.mesh_id.0,
            expected: geom.id().0,
        });
    }
    assert_eq!(ind.scores.len(), geom.n_triangles());
    assert!(
        params.frac_refine > 0.0 && params.frac_refine <= 1.0,
        "frac_refine must be in (0, 1]"
    );
    assert!(
        (0.0..1.0).contains(&params.frac_coarsen),
        "frac_coarsen must be in [0, 1)"
    );
    let mut report = RefineReport::default();
    let mut forest = mesh.forest().clone();

    // --- refinement ---
    let marked = doerfler_mark(&ind.scores, params.frac_refine);
    for t in marked {
        let level = mesh.level(t) as u32;
        if let Some(h_min) = params.h_min {
            // a marked triangle is quadrupled; grandchildren live two levels down
            if min_edge_at_level(level + 2) <= h_min {
                report.guard_skipped += 1;
                continue;
            }
        }
        let p = mesh.path(t);
        forest.split(p);
        forest.split(p.child(0));
        forest.split(p.child(1));
        report.marked += 1;
    }

    // --- conformity closure: bisect any leaf one of whose edge midpoints
    // already exists as a vertex ---
    loop {
        let leaves = forest.leaves();
        let mut vkeys: HashSet<(u64, u64)> = HashSet::new();
        for (_, c) in &leaves {
            for p in c.v {
                vkeys.insert(point_key(p));
            }
        }
        let mut to_split: Vec<TriPath> = Vec::new();
        for (path, c) in &leaves {
            let mids = [
                mid(c.v[0], c.v[1]),
                mid(c.v[1], c.v[2]),
                mid(c.v[2], c.v[0]),
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

    // --- coarsening (only meaningful when there is indicator mass to share) ---
    let total: f64 = ind.scores.iter().sum();
    if params.frac_coarsen > 0.0 && total > 0.0 {
        let threshold = params.frac_coarsen * total;
        // sibling pairs among the *original* leaves, cheapest first
        let mut by_parent: HashMap<TriPath, Vec<usize>> = HashMap::new();
        for t in 0..geom.n_triangles() {
            if let Some(parent) = mesh.path(t).parent() {
                by_parent.entry(parent).or_default().push(t);
            }
        }
        let mut pairs: Vec<(f64, TriPath)> = by_parent
            .into_iter()
            .filter(|(_, ts)| ts.len() == 2)
            .map(|(parent, ts)| (ind.scores[ts[0]] + ind.scores[ts[1]], parent))
            .collect();
        pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        let mut acc = 0.0;
        let mut candidates: HashSet<TriPath> = HashSet::new();
        for (score, parent) in pairs {
            if acc + score > threshold {
                break;
            }
            acc += score;
            candidates.insert(parent);
        }
        // candidates whose children were refined or split by closure are out
        candidates.retain(|p| {
            forest.is_split(p) && !forest.is_split(&p.child(0)) && !forest.is_split(&p.child(1))
        });
        if !candidates.is_empty() {
            // group by the bisection vertex each merge would remove
            let mut groups: HashMap<(u64, u64), Vec<TriPath>> = HashMap::new();
            for p in &candidates {
                let m = Forest::corners_of(p).refinement_edge_midpoint();
                groups.entry(point_key(m)).or_default().push(*p);
            }
            // census: how many current leaves touch each vertex
            let mut touch: HashMap<(u64, u64), usize> = HashMap::new();
            forest.for_each_leaf(|_, c| {
                for v in c.v {
                    *touch.entry(point_key(v)).or_insert(0) += 1;
                }
            });
            let mut merged: Vec<TriPath> = Vec::new();
            for (mkey, parents) in groups {
                // the removed vertex must be used only by the candidate children
                if touch.get(&mkey).copied().unwrap_or(0) == 2 * parents.len() {
                    for p in &parents {
                        merged.push(*p);
                    }
                }
            }
            merged.sort_unstable();
            for p in merged {
                forest.merge(&p);
                report.coarsened_pairs += 1;
            }
        }
    }

    let new_mesh = AdaptiveMesh::from_forest(forest);
    debug_assert!(new_mesh.geometry().check_conforming().is_ok());
    Ok((Arc::new(new_mesh), report))
}

/// Uniformly quadruples every triangle (two bisection generations).
pub fn uniform_refine(mesh: &AdaptiveMesh) -> Arc<AdaptiveMesh> {
    let mut forest = mesh.forest().clone();
    for _ in 0..2 {
        for (path, _) in forest.leaves() {
            forest.split(path);
        }
    }
    Arc::new(AdaptiveMesh::from_forest(forest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fem::FEField;

    fn constant_indicator(mesh: &AdaptiveMesh, v: f64) -> RefinementIndicator {
        RefinementIndicator {
            scores: vec![v; mesh.n_triangles()],
            mesh_id: mesh.id(),
        }
    }

    #[test]
    fn zero_indicator_leaves_mesh_unchanged() {
        let mesh = AdaptiveMesh::initial(2);
        let ind = constant_indicator(&mesh, 0.0);
        let (out, report) = refine_coarsen(&mesh, &ind, &RefineParams::default()).unwrap();
        assert_eq!(out.n_triangles(), mesh.n_triangles());
        assert_eq!(report.marked, 0);
    }

    #[test]
    fn uniform_indicator_full_fraction_quadruples() {
        let mesh = AdaptiveMesh::initial(2);
        let ind = constant_indicator(&mesh, 1.0);
        let params = RefineParams {
            frac_refine: 1.0,
            frac_coarsen: 0.0,
            h_min: None,
        };
        let (out, _) = refine_coarsen(&mesh, &ind, &params).unwrap();
        assert_eq!(out.n_triangles(), 4 * mesh.n_triangles());
        out.geometry().check_conforming().unwrap();
    }

    #[test]
    fn single_triangle_refinement_stays_conforming() {
        let mesh = AdaptiveMesh::initial(3);
        let mut scores = vec![0.0; mesh.n_triangles()];
        scores[7] = 1.0;
        let ind = RefinementIndicator {
            scores,
            mesh_id: mesh.id(),
        };
        let params = RefineParams {
            frac_refine: 0.5,
            frac_coarsen: 0.0,
            h_min: None,
        };
        let (out, report) = refine_coarsen(&mesh, &ind, &params).unwrap();
        assert_eq!(report.marked, 1);
        assert!(out.n_triangles() > mesh.n_triangles());
        out.geometry().check_conforming().unwrap();
        assert!((out.geometry().total_area() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn guard_skips_too_deep_refinement() {
        // grandchildren of the root triangles have minimum edge sqrt(2)/4,
        // so a guard of 0.4 forbids the first refinement already
        let mesh = AdaptiveMesh::initial(1);
        let ind = constant_indicator(&mesh, 1.0);
        let params = RefineParams {
            frac_refine: 1.0,
            frac_coarsen: 0.0,
            h_min: Some(0.4),
        };
        let (out, report) = refine_coarsen(&mesh, &ind, &params).unwrap();
        assert_eq!(out.n_triangles(), mesh.n_triangles());
        assert_eq!(report.guard_skipped, 4);
    }

    #[test]
    fn coarsening_merges_uniformly_refined_back() {
        let coarse = AdaptiveMesh::initial(2);
        let fine = uniform_refine(&coarse);
        // tiny uniform scores: everything is a coarsening candidate
        let ind = constant_indicator(&fine, 1.0);
        let params = RefineParams {
            frac_refine: 1e-9,
            frac_coarsen: 0.999,
            h_min: None,
        };
        let (out, report) = refine_coarsen(&fine, &ind, &params).unwrap();
        assert!(report.coarsened_pairs > 0);
        assert!(out.n_triangles() < fine.n_triangles());
        out.geometry().check_conforming().unwrap();
        assert!((out.geometry().total_area() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn interface_indicator_pure_phase_is_zero() {
        let mesh = AdaptiveMesh::initial(2);
        let phi = FEField::constant(mesh.geometry(), 1.0);
        let ind = interface_indicator(&mesh, &phi).unwrap();
        assert!(ind.scores.iter().all(|&s| s == 0.0));
    }
}
