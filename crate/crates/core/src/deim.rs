//! Discrete empirical interpolation of the nodal cubic nonlinearity.
//!
//! With mass-lumped quadrature the nonlinear load acts componentwise on
//! nodal values, so sampling a few interpolation indices reconstructs the
//! whole vector exactly on the span of the nonlinearity basis. Online cost
//! is independent of the full dimension: everything full-sized is contracted
//! offline.

use nalgebra::{DMatrix, DVector};

use crate::{Error, Result};

/// Nonlinearity basis, greedy interpolation indices and the condition number
/// of the sampled block.
pub struct DeimData {
    /// Euclidean-orthonormal basis of nonlinearity snapshots (n x ell_d).
    pub basis: DMatrix<f64>,
    pub indices: Vec<usize>,
    /// Condition number of `P^T U` (logged; blows up when the greedy picks
    /// nearly dependent rows).
    pub condition: f64,
}

const RANK_CUTOFF: f64 = 1e-14;

/// Euclidean orthonormalization of snapshot columns by the Gram eigenvalue
/// route with the same relative rank cutoff as the POD basis, then a
/// Gram-Schmidt polish.
pub fn orthonormalize_snapshots(snaps: &[Vec<f64>], max_cols: usize) -> Result<DMatrix<f64>> {
    let ns = snaps.len();
    if ns == 0 {
        return Err(Error::Dimension("no nonlinearity snapshots".into()));
    }
    let n = snaps[0].len();
    let mut gram = DMatrix::<f64>::zeros(ns, ns);
    for j in 0..ns {
        for k in j..ns {
            let v = crate::sparse::dot(&snaps[j], &snaps[k]);
            gram[(j, k)] = v;
            gram[(k, j)] = v;
        }
    }
    let eig = gram.symmetric_eigen();
    let mut order: Vec<usize> = (0..ns).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap());
    let lmax = eig.eigenvalues[order[0]].max(f64::MIN_POSITIVE);
    let rank = order
        .iter()
        .take_while(|&&i| eig.eigenvalues[i] > RANK_CUTOFF * lmax)
        .count();
    let keep = rank.min(max_cols);
    let mut u = DMatrix::<f64>::zeros(n, keep);
    for (col, &oi) in order.iter().take(keep).enumerate() {
        let scale = 1.0 / eig.eigenvalues[oi].sqrt();
        for j in 0..ns {
            let c = scale * eig.eigenvectors[(j, oi)];
            if c != 0.0 {
                for i in 0..n {
                    u[(i, col)] += c * snaps[j][i];
                }
            }
        }
    }
    // polish
    for i in 0..keep {
        for j in 0..i {
            let proj = u.column(i).dot(&u.column(j));
            let cj = u.column(j).into_owned();
            u.column_mut(i).axpy(-proj, &cj, 1.0);
        }
        let nrm = u.column(i).norm();
        u.column_mut(i).scale_mut(1.0 / nrm);
    }
    Ok(u)
}

/// Greedy interpolation index selection: start from the largest component of
/// the first basis vector, then repeatedly pick the largest residual of the
/// next basis vector against interpolation on the indices chosen so far.
pub fn deim_select(u: &DMatrix<f64>) -> Result<Vec<usize>> {
    let (n, ell) = u.shape();
    if ell == 0 || ell > n {
        return Err(Error::Dimension(format!(
            "deim basis must have between 1 and {n} columns, got {ell}"
        )));
    }
    let mut indices = Vec::with_capacity(ell);
    let first = u.column(0);
    let mut p = argmax_abs(first.as_slice());
    if first[p].abs() == 0.0 {
        return Err(Error::RankDeficient {
            requested: ell,
            rank: 0,
        });
    }
    indices.push(p);
    for j in 1..ell {
        // residual r = u_j - U_{0..j} (P^T U_{0..j})^{-1} (P^T u_j)
        let uj = u.column(j).into_owned();
        let sub = u.columns(0, j);
        let mut pu = DMatrix::<f64>::zeros(j, j);
        let mut puj = DVector::<f64>::zeros(j);
        for (r, &idx) in indices.iter().enumerate() {
            for c in 0..j {
                pu[(r, c)] = sub[(idx, c)];
            }
            puj[r] = uj[idx];
        }
        let coeff = pu.lu().solve(&puj).ok_or(Error::RankDeficient {
            requested: ell,
            rank: j,
        })?;
        let mut r = uj;
        for c in 0..j {
            r.axpy(-coeff[c], &sub.column(c).into_owned(), 1.0);
        }
        p = argmax_abs(r.as_slice());
        if r[p].abs() < 1e-14 {
            return Err(Error::RankDeficient {
                requested: ell,
                rank: j,
            });
        }
        indices.push(p);
    }
    Ok(indices)
}

fn argmax_abs(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[best].abs() {
            best = i;
        }
    }
    best
}

/// Builds the DEIM data (basis, indices, conditioning) from raw nonlinearity
/// snapshots.
pub fn build_deim(snaps: &[Vec<f64>], ell_d: usize) -> Result<DeimData> {
    let basis = orthonormalize_snapshots(snaps, ell_d)?;
    let indices = deim_select(&basis)?;
    let ell = indices.len();
    let mut pu = DMatrix::<f64>::zeros(ell, ell);
    for (r, &idx) in indices.iter().enumerate() {
        for c in 0..ell {
            pu[(r, c)] = basis[(idx, c)];
        }
    }
    let svd = pu.svd(false, false);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    let condition = if smin > 0.0 { smax / smin } else { f64::INFINITY };
    Ok(DeimData {
        basis,
        indices,
        condition,
    })
}

/// Offline contraction for a reduced nonlinear term
/// `W f(V_P a)` with `W = (V^T L U)(P^T U)^{-1}` and `V_P` the sampled rows
/// of the reduced basis. Everything here is ell-sized; nothing online
/// touches the full dimension.
pub struct DeimProjector {
    /// (reduced dim) x ell_d.
    pub w: DMatrix<f64>,
    /// ell_d x (reduced dim): rows of V at the interpolation indices.
    pub v_rows: DMatrix<f64>,
}

impl DeimProjector {
    /// `v`: reduced basis (n x ell), `lump`: diagonal nodal weights,
    /// `deim`: basis and indices.
    pub fn build(v: &DMatrix<f64>, lump: &[f64], deim: &DeimData) -> Result<DeimProjector> {
        let (n, ell) = v.shape();
        let ell_d = deim.indices.len();
        if deim.basis.nrows() != n || lump.len() != n {
            return Err(Error::Dimension("deim projector dimension mismatch".into()));
        }
        // V^T L U  (ell x ell_d)
        let mut vlu = DMatrix::<f64>::zeros(ell, ell_d);
        for c in 0..ell_d {
            for r in 0..ell {
                let mut acc = 0.0;
                for i in 0..n {
                    acc += v[(i, r)] * lump[i] * deim.basis[(i, c)];
                }
                vlu[(r, c)] = acc;
            }
        }
        // (P^T U)^{-1}
        let mut pu = DMatrix::<f64>::zeros(ell_d, ell_d);
        for (r, &idx) in deim.indices.iter().enumerate() {
            for c in 0..ell_d {
                pu[(r, c)] = deim.basis[(idx, c)];
            }
        }
        let pu_inv = pu.try_inverse().ok_or_else(|| {
            Error::Factorization("sampled DEIM block not invertible".into())
        })?;
        let w = vlu * pu_inv;
        let mut v_rows = DMatrix::<f64>::zeros(ell_d, ell);
        for (r, &idx) in deim.indices.iter().enumerate() {
            for c in 0..ell {
                v_rows[(r, c)] = v[(idx, c)];
            }
        }
        Ok(DeimProjector { w, v_rows })
    }

    /// Sampled nodal values `V_P a` at the interpolation points.
    pub fn sample(&self, a: &DVector<f64>) -> DVector<f64> {
        &self.v_rows * a
    }

    /// Applies the projector to sampled nonlinearity values.
    pub fn apply(&self, f_samples: &DVector<f64>) -> DVector<f64> {
        &self.w * f_samples
    }

    /// Reduced Jacobian contribution `W diag(fp_samples) V_P` for sampled
    /// derivative values.
    pub fn jacobian(&self, fp_samples: &DVector<f64>) -> DMatrix<f64> {
        let ell_d = fp_samples.len();
        let mut scaled = self.v_rows.clone();
        for r in 0..ell_d {
            for c in 0..scaled.ncols() {
                scaled[(r, c)] *= fp_samples[r];
            }
        }
        &self.w * scaled
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn coordinate_column(n: usize, i: usize) -> Vec<f64> {
        let mut v = vec![0.0; n];
        v[i] = 1.0;
        v
    }

    #[test]
    fn single_coordinate_column_selects_its_index() {
        let u = DMatrix::from_fn(8, 1, |i, _| if i == 3 { 1.0 } else { 0.0 });
        assert_eq!(deim_select(&u).unwrap(), vec![3]);
    }

    #[test]
    fn two_coordinate_columns_select_in_order() {
        let mut u = DMatrix::zeros(8, 2);
        u[(1, 0)] = 1.0;
        u[(5, 1)] = 1.0;
        assert_eq!(deim_select(&u).unwrap(), vec![1, 5]);
    }

    #[test]
    fn greedy_matches_independent_reimplementation() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let n = 40;
        let snaps: Vec<Vec<f64>> = (0..10)
            .map(|_| (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let u = orthonormalize_snapshots(&snaps, 5).unwrap();
        let got = deim_select(&u).unwrap();

        // brute-force greedy with dense residual algebra
        let mut want: Vec<usize> = Vec::new();
        {
            let col0: Vec<f64> = (0..n).map(|i| u[(i, 0)]).collect();
            want.push(argmax_abs(&col0));
            for j in 1..5 {
                let mut a = DMatrix::<f64>::zeros(j, j);
                let mut b = DVector::<f64>::zeros(j);
                for (r, &p) in want.iter().enumerate() {
                    for c in 0..j {
                        a[(r, c)] = u[(p, c)];
                    }
                    b[r] = u[(p, j)];
                }
                let coef = a.lu().solve(&b).unwrap();
                let mut r: Vec<f64> = (0..n).map(|i| u[(i, j)]).collect();
                for (i, ri) in r.iter_mut().enumerate() {
                    for c in 0..j {
                        *ri -= coef[c] * u[(i, c)];
                    }
                }
                want.push(argmax_abs(&r));
            }
        }
        assert_eq!(got, want);
    }

    #[test]
    fn determinism_same_input_same_indices() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        let snaps: Vec<Vec<f64>> = (0..6)
            .map(|_| (0..30).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let d1 = build_deim(&snaps, 6).unwrap();
        let d2 = build_deim(&snaps, 6).unwrap();
        assert_eq!(d1.indices, d2.indices);
        assert!(d1.condition.is_finite());
    }

    #[test]
    fn exact_on_span_of_basis() {
        // f(V a) lands in span(U) by construction: DEIM equals the full
        // lumped projection to rounding
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(12);
        let n = 50;
        let ell = 4;
        // reduced basis V: random, orthonormalized
        let vsnaps: Vec<Vec<f64>> = (0..ell)
            .map(|_| (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let v = orthonormalize_snapshots(&vsnaps, ell).unwrap();
        let lump: Vec<f64> = (0..n).map(|_| rng.gen_range(0.5..1.5)).collect();
        // cubic nonlinearity snapshots AT reduced states: their span contains
        // any f(V a) only if we sample enough; use snapshots at the test
        // points themselves for exactness
        let test_a: Vec<DVector<f64>> = (0..6)
            .map(|_| DVector::from_fn(ell, |_, _| rng.gen_range(-1.0..1.0)))
            .collect();
        let f = |x: f64| x * x * x - x;
        let snaps: Vec<Vec<f64>> = test_a
            .iter()
            .map(|a| {
                let va = &v * a;
                va.iter().map(|&x| f(x)).collect()
            })
            .collect();
        let deim = build_deim(&snaps, 6).unwrap();
        let proj = DeimProjector::build(&v, &lump, &deim).unwrap();
        for a in &test_a {
            let va = &v * a;
            // full evaluation: V^T L f(V a)
            let mut full = DVector::<f64>::zeros(ell);
            for r in 0..ell {
                let mut acc = 0.0;
                for i in 0..n {
                    acc += v[(i, r)] * lump[i] * f(va[i]);
                }
                full[r] = acc;
            }
            let sampled = proj.sample(a).map(f);
            let reduced = proj.apply(&sampled);
            for r in 0..ell {
                assert!(
                    (full[r] - reduced[r]).abs() < 1e-12,
                    "component {r}: {} vs {}",
                    full[r],
                    reduced[r]
                );
            }
        }
    }

    #[test]
    fn zero_maps_to_zero() {
        let u = DMatrix::from_fn(10, 2, |i, j| ((i + 2 * j) as f64 * 0.37).sin());
        let u = {
            // orthonormalize the two columns
            let snaps: Vec<Vec<f64>> = (0..2).map(|j| (0..10).map(|i| u[(i, j)]).collect()).collect();
            orthonormalize_snapshots(&snaps, 2).unwrap()
        };
        let deim = DeimData {
            indices: deim_select(&u).unwrap(),
            basis: u,
            condition: 1.0,
        };
        let v = DMatrix::from_fn(10, 3, |i, j| ((i * j + 1) as f64).cos());
        let lump = vec![1.0; 10];
        let proj = DeimProjector::build(&v, &lump, &deim).unwrap();
        let a = DVector::zeros(3);
        let out = proj.apply(&proj.sample(&a).map(|x: f64| x * x * x - x));
        assert!(out.iter().all(|v| v.abs() == 0.0));
    }

    #[test]
    fn coordinate_snapshots_identity() {
        // orthonormal coordinate columns stay coordinate columns
        let snaps = vec![coordinate_column(6, 2), coordinate_column(6, 4)];
        let u = orthonormalize_snapshots(&snaps, 2).unwrap();
        let idx = deim_select(&u).unwrap();
        let mut sorted = idx.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, vec![2, 4]);
    }
}
