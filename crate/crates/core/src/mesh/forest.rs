//! Bisection forest over the criss-cross root triangulation of (0,1)^2.
//!
//! Every mesh in the hierarchy is a "cut" through the same infinite binary
//! forest. A triangle is identified by its root index plus the sequence of
//! child choices, so meshes built independently can be compared, unioned
//! and nested structurally. All vertex coordinates are dyadic rationals and
//! therefore exact in f64 up to depths far beyond anything the minimum edge
//! guard admits.

use std::collections::BTreeSet;

pub type Point = [f64; 2];

/// Identity of one triangle in the forest: root plus child-choice bits
/// (bit i = choice at generation i, 0 = first child).
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Debug)]
pub struct TriPath {
    pub root: u8,
    pub depth: u8,
    pub bits: u64,
}

impl TriPath {
    pub fn root(root: u8) -> Self {
        TriPath {
            root,
            depth: 0,
            bits: 0,
        }
    }

    pub fn child(&self, which: u8) -> Self {
        debug_assert!(which < 2 && self.depth < 63);
        TriPath {
            root: self.root,
            depth: self.depth + 1,
            bits: self.bits | ((which as u64) << self.depth),
        }
    }

    pub fn parent(&self) -> Option<Self> {
        if self.depth == 0 {
            None
        } else {
            let d = self.depth - 1;
            Some(TriPath {
                root: self.root,
                depth: d,
                bits: self.bits & !(1u64 << d),
            })
        }
    }

    pub fn sibling(&self) -> Option<Self> {
        if self.depth == 0 {
            None
        } else {
            Some(TriPath {
                root: self.root,
                depth: self.depth,
                bits: self.bits ^ (1u64 << (self.depth - 1)),
            })
        }
    }
}

/// Corner coordinates of a triangle in newest-vertex order: the refinement
/// edge is (v[0], v[1]) and v[2] is the peak (most recently created vertex).
#[derive(Clone, Copy, Debug)]
pub struct TriCorners {
    pub v: [Point; 3],
}

impl TriCorners {
    pub fn refinement_edge_midpoint(&self) -> Point {
        mid(self.v[0], self.v[1])
    }

    /// Children in newest-vertex bisection order. Child 0 keeps the parent
    /// edge (v0, v2) as its refinement edge, child 1 keeps (v1, v2).
    pub fn children(&self) -> [TriCorners; 2] {
        let m = self.refinement_edge_midpoint();
        [
            TriCorners {
                v: [self.v[2], self.v[0], m],
            },
            TriCorners {
                v: [self.v[1], self.v[2], m],
            },
        ]
    }

    pub fn area(&self) -> f64 {
        0.5 * cross(
            sub(self.v[1], self.v[0]),
            sub(self.v[2], self.v[0]),
        )
    }
}

pub fn mid(a: Point, b: Point) -> Point {
    [0.5 * (a[0] + b[0]), 0.5 * (a[1] + b[1])]
}

pub fn sub(a: Point, b: Point) -> Point {
    [a[0] - b[0], a[1] - b[1]]
}

pub fn cross(a: Point, b: Point) -> f64 {
    a[0] * b[1] - a[1] * b[0]
}

pub fn dist(a: Point, b: Point) -> f64 {
    let d = sub(a, b);
    (d[0] * d[0] + d[1] * d[1]).sqrt()
}

/// Exact hash key for a dyadic coordinate pair.
pub fn point_key(p: Point) -> (u64, u64) {
    (p[0].to_bits(), p[1].to_bits())
}

const CENTER: Point = [0.5, 0.5];

/// Criss-cross root triangles, counterclockwise, peak at the center vertex.
pub const N_ROOTS: u8 = 4;

pub fn root_corners(root: u8) -> TriCorners {
    let corners = [[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]];
    let a = corners[root as usize];
    let b = corners[(root as usize + 1) % 4];
    TriCorners { v: [a, b, CENTER] }
}

/// Set of split (interior) nodes; leaves are the actual mesh triangles.
/// The set is kept downward-closed: a split node's parent is always split.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Forest {
    splits: BTreeSet<TriPath>,
}

impl Forest {
    pub fn new() -> Self {
        Forest::default()
    }

    pub fn is_split(&self, p: &TriPath) -> bool {
        self.splits.contains(p)
    }

    pub fn split(&mut self, p: TriPath) {
        if let Some(parent) = p.parent() {
            debug_assert!(self.is_split(&parent), "split of a non-leaf path");
        }
        self.splits.insert(p);
    }

    /// Undoes the split of `p`, turning it back into a leaf. Both children
    /// must be leaves.
    pub fn merge(&mut self, p: &TriPath) {
        debug_assert!(!self.is_split(&p.child(0)) && !self.is_split(&p.child(1)));
        self.splits.remove(p);
    }

    pub fn n_splits(&self) -> usize {
        self.splits.len()
    }

    /// True if `self`'s cut is refined by `other`'s cut (other splits at
    /// least everywhere self does).
    pub fn refined_by(&self, other: &Forest) -> bool {
        self.splits.is_subset(&other.splits)
    }

    pub fn union(&self, other: &Forest) -> Forest {
        Forest {
            splits: self.splits.union(&other.splits).copied().collect(),
        }
    }

    /// Depth-first walk over the leaves in deterministic order.
    pub fn for_each_leaf(&self, mut f: impl FnMut(TriPath, TriCorners)) {
        let mut stack: Vec<(TriPath, TriCorners)> = Vec::new();
        for root in (0..N_ROOTS).rev() {
            stack.push((TriPath::root(root), root_corners(root)));
        }
        // stack is LIFO; roots pushed in reverse so root 0 pops first
        while let Some((path, corners)) = stack.pop() {
            if self.is_split(&path) {
                let ch = corners.children();
                stack.push((path.child(1), ch[1]));
                stack.push((path.child(0), ch[0]));
            } else {
                f(path, corners);
            }
        }
    }

    pub fn leaves(&self) -> Vec<(TriPath, TriCorners)> {
        let mut out = Vec::new();
        self.for_each_leaf(|p, c| out.push((p, c)));
        out
    }

    /// Corner coordinates of an arbitrary node (leaf or interior).
    pub fn corners_of(path: &TriPath) -> TriCorners {
        let mut c = root_corners(path.root);
        for i in 0..path.depth {
            let which = ((path.bits >> i) & 1) as usize;
            c = c.children()[which];
        }
        c
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roots_are_ccw_and_tile() {
        let mut total = 0.0;
        for r in 0..N_ROOTS {
            let c = root_corners(r);
            assert!(c.area() > 0.0);
            total += c.area();
        }
        assert!((total - 1.0).abs() < 1e-15);
    }

    #[test]
    fn children_preserve_orientation_and_area() {
        let c = root_corners(0);
        let [a, b] = c.children();
        assert!(a.area() > 0.0 && b.area() > 0.0);
        assert!((a.area() + b.area() - c.area()).abs() < 1e-15);
    }

    #[test]
    fn path_parent_child_roundtrip() {
        let p = TriPath::root(2).child(1).child(0).child(1);
        assert_eq!(p.parent().unwrap().child(1), p);
        assert_eq!(p.sibling().unwrap().sibling().unwrap(), p);
    }

    #[test]
    fn leaf_walk_counts() {
        let mut f = Forest::new();
        assert_eq!(f.leaves().len(), 4);
        f.split(TriPath::root(0));
        assert_eq!(f.leaves().len(), 5);
        f.split(TriPath::root(0).child(0));
        assert_eq!(f.leaves().len(), 6);
        f.merge(&TriPath::root(0).child(0));
        f.merge(&TriPath::root(0));
        assert_eq!(f.leaves().len(), 4);
    }
}
