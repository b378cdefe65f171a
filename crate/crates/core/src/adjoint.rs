//! Discrete adjoint of the forward time stepping scheme.
//!
//! The adjoint is the exact transpose of the linearized forward scheme
//! (discretize-then-optimize), so the reduced gradient it produces is the
//! derivative of the discrete cost up to solver tolerances. Interpolation
//! operators inserted by remeshing enter through their transposes at the
//! same step indices.

use crate::control::{ControlShapes, ControlVector};
use crate::fem::FEField;
use crate::fom::{CostWeights, Targets};
use crate::sparse::axpy;
use crate::state::{combine_convection, CHParams, CHSystem, Trajectory};
use crate::Result;

/// Backward-in-time multipliers of the forward scheme.
///
/// `lam_phi[k]` / `lam_mu[k]` (k = 1..n_steps) are the multipliers of the
/// mass balance and potential equation of step k, living on that step's
/// mesh. The exported fields `p` / `q` rescale them per unit time, with the
/// terminal slot holding the terminal condition itself:
/// `p[n] = -beta2 (phi_n - phi_T)` exactly.
pub struct AdjointTrajectory {
    pub lam_phi: Vec<Vec<f64>>,
    pub lam_mu: Vec<Vec<f64>>,
    pub p: Vec<FEField>,
    pub q: Vec<FEField>,
}

/// Solves the adjoint system backward from the terminal condition. The
/// linearization point of the cubic term at step k is the stored implicit
/// state `phi_k`; each backward step is one sparse transpose solve with the
/// converged forward Jacobian.
pub fn solve_adjoint(
    traj: &Trajectory,
    u: &ControlVector,
    targets: &Targets,
    weights: &CostWeights,
    params: &CHParams,
    shapes: &ControlShapes,
) -> Result<AdjointTrajectory> {
    let n_steps = traj.n_steps();
    let grid = params.grid();
    let mut lam_phi: Vec<Vec<f64>> = vec![Vec::new(); n_steps + 1];
    let mut lam_mu: Vec<Vec<f64>> = vec![Vec::new(); n_steps + 1];

    // zeta = d(cost)/d(phi_k) accumulated from the future, as a functional
    let terminal = targets.terminal_residual(&traj.steps[n_steps].phi, &traj.steps[n_steps].mesh)?;
    let mut zeta = targets.tracking_residual(
        n_steps,
        &traj.steps[n_steps].phi,
        &traj.steps[n_steps].mesh,
    )?;
    zeta.iter_mut().for_each(|z| *z *= weights.beta1 * grid.weight(n_steps));
    axpy(&mut zeta, weights.beta2, &terminal.functional);

    let mut sys = CHSystem::new(traj.steps[n_steps].mesh.geometry(), *params);
    let mut sys_mesh = traj.steps[n_steps].mesh.id();

    // terminal fields (exported p[n], q[n]) on the final mesh:
    // p = -beta2 (phi_n - phi_T), q = M^{-1} b K p
    let mut p_term = terminal.difference.clone();
    p_term.iter_mut().for_each(|v| *v *= -weights.beta2);
    let kp = sys.stiff.matvec(&p_term);
    let chol = crate::sparse::SparseCholesky::new(&sys.mass)?;
    let mut q_term = chol.solve(&kp);
    q_term.iter_mut().for_each(|v| *v *= params.mobility);

    for k in (1..=n_steps).rev() {
        let mesh = &traj.steps[k].mesh;
        if mesh.id() != sys_mesh {
            sys = CHSystem::new(mesh.geometry(), *params);
            sys_mesh = mesh.id();
        }
        let n = mesh.n_vertices();
        let mesh_shapes = shapes.on_mesh(mesh.geometry())?;
        let mut conv = mesh_shapes.convection[0].clone();
        combine_convection(&mut conv, &mesh_shapes.convection, u.at_time(k));
        // solve J_k^T lambda = -zeta_k (mu-component of the rhs is zero)
        let lu = sys.jacobian_lu(&conv, &traj.steps[k].phi.coeffs)?;
        let mut rhs = vec![0.0; 2 * n];
        for i in 0..n {
            rhs[i] = -zeta[i];
        }
        let lam = lu.solve_transpose(&rhs);
        lam_phi[k] = lam[..n].to_vec();
        lam_mu[k] = lam[n..].to_vec();

        // zeta_{k-1} = beta1 w_{k-1} M (phi_{k-1} - phi_d) + T^T [ -(M/dt)^T lphi - (s/e) L lmu ]
        let prev_mesh = &traj.steps[k - 1].mesh;
        let mut carry = sys.mass.matvec(&lam_phi[k]);
        for c in carry.iter_mut() {
            *c = -*c / params.dt;
        }
        for i in 0..n {
            carry[i] -= params.sigma / params.epsilon * sys.lump[i] * lam_mu[k][i];
        }
        // pull back through the remesh transfer applied after step k-1
        let carried = match &traj.remesh[k - 1] {
            Some(rec) => rec.transfer.apply_transpose(&carry),
            None => carry,
        };
        let mut z = targets.tracking_residual(k - 1, &traj.steps[k - 1].phi, prev_mesh)?;
        z.iter_mut()
            .for_each(|v| *v *= weights.beta1 * grid.weight(k - 1));
        axpy(&mut z, 1.0, &carried);
        zeta = z;
    }

    // exported fields: per-unit-time multipliers, terminal slot exact
    let mut p: Vec<FEField> = Vec::with_capacity(n_steps + 1);
    let mut q: Vec<FEField> = Vec::with_capacity(n_steps + 1);
    for k in 0..n_steps {
        let mesh = &traj.steps[k + 1].mesh;
        let scale = 1.0 / params.dt;
        p.push(FEField::new(
            lam_phi[k + 1].iter().map(|v| v * scale).collect(),
            mesh.id(),
        ));
        q.push(FEField::new(
            lam_mu[k + 1].iter().map(|v| v * scale).collect(),
            mesh.id(),
        ));
    }
    let last_mesh = &traj.steps[n_steps].mesh;
    p.push(FEField::new(p_term, last_mesh.id()));
    q.push(FEField::new(q_term, last_mesh.id()));

    Ok(AdjointTrajectory { lam_phi, lam_mu, p, q })
}

/// Reduced gradient of the discrete cost in the trapezoidal Riesz
/// representation:
/// `g_i(t_k) = gamma u_i(t_k) + lam_phi_k^T C_i phi_k / w_k`.
/// The pairing differentiates the same skew convection assembly that drives
/// the forward scheme, so the result is the exact derivative of the
/// discrete cost.
pub fn reduced_gradient(
    u: &ControlVector,
    traj: &Trajectory,
    adj: &AdjointTrajectory,
    shapes: &ControlShapes,
    gamma: f64,
    params: &CHParams,
) -> Result<ControlVector> {
    let grid = params.grid();
    let m = u.n_components();
    let n_steps = traj.n_steps();
    let mut g = ControlVector::zeros(m, n_steps);
    for k in 0..=n_steps {
        for i in 0..m {
            let mut v = gamma * u.get(i, k);
            if k >= 1 {
                let mesh = &traj.steps[k].mesh;
                let mesh_shapes = shapes.on_mesh(mesh.geometry())?;
                let c_phi = mesh_shapes.convection[i].matvec(&traj.steps[k].phi.coeffs);
                let pairing: f64 = adj.lam_phi[k]
                    .iter()
                    .zip(&c_phi)
                    .map(|(a, b)| a * b)
                    .sum();
                v += pairing / grid.weight(k);
            }
            g.set(i, k, v);
        }
    }
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::control::ControlShapes;
    use crate::fem::FEField;
    use crate::fom::{evaluate_cost, Targets};
    use crate::mesh::AdaptiveMesh;
    use crate::state::{solve_trajectory, SolveOptions};
    use rand::{Rng, SeedableRng};
    use std::sync::Arc;

    fn small_setup(
        seed: u64,
        n_steps: usize,
    ) -> (
        Arc<AdaptiveMesh>,
        FEField,
        Arc<ControlShapes>,
        CHParams,
        Arc<Targets>,
    ) {
        let mesh = AdaptiveMesh::initial(2);
        let geom = mesh.geometry();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let phi0 = FEField::new(
            (0..geom.n_vertices())
                .map(|_| rng.gen_range(-0.6..0.6))
                .collect(),
            geom.id(),
        );
        let shapes = Arc::new(ControlShapes::default_single());
        let params = CHParams {
            dt: 1e-4,
            n_steps,
            ..CHParams::default()
        };
        let phi_d: Vec<FEField> = (0..=n_steps)
            .map(|_| {
                FEField::new(
                    (0..geom.n_vertices())
                        .map(|_| rng.gen_range(-0.6..0.6))
                        .collect(),
                    geom.id(),
                )
            })
            .collect();
        let phi_t = FEField::new(
            (0..geom.n_vertices())
                .map(|_| rng.gen_range(-0.6..0.6))
                .collect(),
            geom.id(),
        );
        let meshes = vec![mesh.clone(); n_steps + 1];
        let targets = Arc::new(Targets::new(phi_d, meshes, phi_t, mesh.clone()));
        (mesh, phi0, shapes, params, targets)
    }

    #[test]
    fn zero_weights_give_zero_adjoint() {
        let (mesh, phi0, shapes, params, targets) = small_setup(1, 3);
        let u = ControlVector::constant(10.0, 1, 3);
        let traj =
            solve_trajectory(&phi0, &mesh, &u, &shapes, &params, &SolveOptions::default())
                .unwrap();
        let weights = CostWeights {
            beta1: 0.0,
            beta2: 0.0,
            gamma: 1e-4,
        };
        let adj = solve_adjoint(&traj, &u, &targets, &weights, &params, &shapes).unwrap();
        for k in 1..=3 {
            assert!(adj.lam_phi[k].iter().all(|v| v.abs() < 1e-16));
            assert!(adj.lam_mu[k].iter().all(|v| v.abs() < 1e-16));
        }
        for f in adj.p.iter().chain(&adj.q) {
            assert!(f.coeffs.iter().all(|v| v.abs() < 1e-16));
        }
        // gradient degenerates to the penalty term
        let g = reduced_gradient(&u, &traj, &adj, &shapes, 1.0, &params).unwrap();
        for k in 0..=3 {
            assert!((g.get(0, k) - u.get(0, k)).abs() < 1e-14);
        }
    }

    #[test]
    fn perfect_terminal_tracking_gives_zero_adjoint() {
        // beta1 = 0 and phi_T = phi(T): homogeneous terminal data
        let (mesh, phi0, shapes, params, _) = small_setup(2, 3);
        let u = ControlVector::zeros(1, 3);
        let traj =
            solve_trajectory(&phi0, &mesh, &u, &shapes, &params, &SolveOptions::default())
                .unwrap();
        let phi_t = traj.steps[3].phi.clone();
        let phi_d: Vec<FEField> = (0..=3).map(|k| traj.steps[k].phi.clone()).collect();
        let targets = Targets::new(phi_d, vec![mesh.clone(); 4], phi_t, mesh.clone());
        let weights = CostWeights {
            beta1: 0.0,
            beta2: 20.0,
            gamma: 1e-4,
        };
        let adj = solve_adjoint(&traj, &u, &targets, &weights, &params, &shapes).unwrap();
        for k in 1..=3 {
            assert!(adj.lam_phi[k].iter().all(|v| v.abs() < 1e-12));
        }
        assert!(adj.p[3].coeffs.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn terminal_slot_holds_exact_terminal_condition() {
        let (mesh, phi0, shapes, params, targets) = small_setup(3, 3);
        let u = ControlVector::constant(5.0, 1, 3);
        let traj =
            solve_trajectory(&phi0, &mesh, &u, &shapes, &params, &SolveOptions::default())
                .unwrap();
        let weights = CostWeights::default();
        let adj = solve_adjoint(&traj, &u, &targets, &weights, &params, &shapes).unwrap();
        let phi_n = &traj.steps[3].phi.coeffs;
        for i in 0..phi_n.len() {
            let want = -weights.beta2 * (phi_n[i] - targets.phi_t.coeffs[i]);
            assert!((adj.p[3].coeffs[i] - want).abs() < 1e-14);
        }
    }

    #[test]
    fn adjoint_is_linear_in_tracking_weights() {
        let (mesh, phi0, shapes, params, targets) = small_setup(4, 3);
        let u = ControlVector::constant(8.0, 1, 3);
        let traj =
            solve_trajectory(&phi0, &mesh, &u, &shapes, &params, &SolveOptions::default())
                .unwrap();
        let w1 = CostWeights {
            beta1: 7.0,
            beta2: 3.0,
            gamma: 1e-4,
        };
        let w2 = CostWeights {
            beta1: 14.0,
            beta2: 6.0,
            gamma: 1e-4,
        };
        let a1 = solve_adjoint(&traj, &u, &targets, &w1, &params, &shapes).unwrap();
        let a2 = solve_adjoint(&traj, &u, &targets, &w2, &params, &shapes).unwrap();
        for k in 1..=3 {
            for i in 0..a1.lam_phi[k].len() {
                let scale = a1.lam_phi[k][i].abs().max(1e-30);
                assert!((2.0 * a1.lam_phi[k][i] - a2.lam_phi[k][i]).abs() / scale < 1e-9);
            }
        }
    }

    #[test]
    fn multipliers_match_dense_space_time_jacobian_oracle() {
        use nalgebra::{DMatrix, DVector};
        let (mesh, phi0, shapes, params, targets) = small_setup(5, 3);
        let geom = mesh.geometry();
        let n = geom.n_vertices();
        let n_steps = 3;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
        let mut u = ControlVector::zeros(1, n_steps);
        for k in 0..=n_steps {
            u.set(0, k, rng.gen_range(0.0..40.0));
        }
        let traj =
            solve_trajectory(&phi0, &mesh, &u, &shapes, &params, &SolveOptions::default())
                .unwrap();
        let weights = CostWeights::default();
        let adj = solve_adjoint(&traj, &u, &targets, &weights, &params, &shapes).unwrap();

        // dense space-time Jacobian of G(X) = 0, X = (x_1 .. x_N), x_k = (phi_k, mu_k)
        let sys = crate::state::CHSystem::new(geom, params);
        let dense = |m: &crate::sparse::CsrMatrix| {
            DMatrix::from_fn(m.n_rows(), m.n_cols(), |i, j| {
                m.row(i).find(|&(c, _)| c == j).map(|(_, v)| v).unwrap_or(0.0)
            })
        };
        let md = dense(&sys.mass);
        let kd = dense(&sys.stiff);
        let (s, e, b, dt) = (params.sigma, params.epsilon, params.mobility, params.dt);
        let dim = 2 * n * n_steps;
        let mut jac = DMatrix::<f64>::zeros(dim, dim);
        let mut rhs = DVector::<f64>::zeros(dim);
        let ms = shapes.on_mesh(geom).unwrap();
        let grid = params.grid();
        for k in 1..=n_steps {
            let row0 = 2 * n * (k - 1);
            let phi_k = &traj.steps[k].phi.coeffs;
            let mut conv = ms.convection[0].clone();
            crate::state::combine_convection(&mut conv, &ms.convection, u.at_time(k));
            let cd = dense(&conv);
            // block J_k
            jac.view_mut((row0, row0), (n, n)).copy_from(&(&md / dt + &cd));
            jac.view_mut((row0, row0 + n), (n, n)).copy_from(&(b * &kd));
            let mut j21 = s * e * &kd;
            for i in 0..n {
                j21[(i, i)] += s / e * sys.lump[i] * 3.0 * phi_k[i] * phi_k[i];
            }
            jac.view_mut((row0 + n, row0), (n, n)).copy_from(&j21);
            jac.view_mut((row0 + n, row0 + n), (n, n)).copy_from(&(-&md));
            // coupling to x_{k-1}
            if k >= 2 {
                let prev0 = 2 * n * (k - 2);
                jac.view_mut((row0, prev0), (n, n)).copy_from(&(-&md / dt));
                for i in 0..n {
                    jac[(row0 + n + i, prev0 + i)] -= s / e * sys.lump[i];
                }
            }
            // dJ/dphi_k
            let diff: Vec<f64> = phi_k
                .iter()
                .zip(&targets.phi_d[k].coeffs)
                .map(|(a, c)| a - c)
                .collect();
            let mdiff = sys.mass.matvec(&diff);
            for i in 0..n {
                rhs[row0 + i] += weights.beta1 * grid.weight(k) * mdiff[i];
            }
            if k == n_steps {
                let difft: Vec<f64> = phi_k
                    .iter()
                    .zip(&targets.phi_t.coeffs)
                    .map(|(a, c)| a - c)
                    .collect();
                let mdifft = sys.mass.matvec(&difft);
                for i in 0..n {
                    rhs[row0 + i] += weights.beta2 * mdifft[i];
                }
            }
        }
        let lam = jac.transpose().lu().solve(&(-rhs)).unwrap();
        for k in 1..=n_steps {
            let row0 = 2 * n * (k - 1);
            for i in 0..n {
                assert!(
                    (adj.lam_phi[k][i] - lam[row0 + i]).abs() < 1e-10,
                    "lam_phi[{k}][{i}]: {} vs oracle {}",
                    adj.lam_phi[k][i],
                    lam[row0 + i]
                );
                assert!((adj.lam_mu[k][i] - lam[row0 + n + i]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mesh = AdaptiveMesh::initial(3);
        let geom = mesh.geometry();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let phi0 = FEField::new(
            (0..geom.n_vertices())
                .map(|_| rng.gen_range(-0.6..0.6))
                .collect(),
            geom.id(),
        );
        let shapes = Arc::new(ControlShapes::default_single());
        let n_steps = 5;
        let params = CHParams {
            dt: 5e-5,
            n_steps,
            ..CHParams::default()
        };
        let phi_d: Vec<FEField> = (0..=n_steps)
            .map(|_| {
                FEField::new(
                    (0..geom.n_vertices())
                        .map(|_| rng.gen_range(-0.6..0.6))
                        .collect(),
                    geom.id(),
                )
            })
            .collect();
        let phi_t = phi_d[n_steps].clone();
        let targets = Arc::new(Targets::new(
            phi_d,
            vec![mesh.clone(); n_steps + 1],
            phi_t,
            mesh.clone(),
        ));
        let weights = CostWeights::default();
        let opts = SolveOptions::default();
        let grid = params.grid();

        let mut u = ControlVector::zeros(1, n_steps);
        for k in 0..=n_steps {
            u.set(0, k, rng.gen_range(5.0..45.0));
        }
        let traj = solve_trajectory(&phi0, &mesh, &u, &shapes, &params, &opts).unwrap();
        let adj = solve_adjoint(&traj, &u, &targets, &weights, &params, &shapes).unwrap();
        let g = reduced_gradient(&u, &traj, &adj, &shapes, weights.gamma, &params).unwrap();

        let cost_at = |uu: &ControlVector| -> f64 {
            let t = solve_trajectory(&phi0, &mesh, uu, &shapes, &params, &opts).unwrap();
            evaluate_cost(&t, uu, &targets, &weights, &grid).unwrap().total()
        };
        let unorm = crate::control::control_norm(&u, &grid);
        let h = 1e-4 * (1.0 + unorm);
        for dir_seed in 0..3u64 {
            let mut dir_rng = rand_chacha::ChaCha8Rng::seed_from_u64(100 + dir_seed);
            let mut d = ControlVector::zeros(1, n_steps);
            for k in 0..=n_steps {
                d.set(0, k, dir_rng.gen_range(-1.0..1.0));
            }
            let mut up = u.clone();
            up.axpy(h, &d);
            let mut um = u.clone();
            um.axpy(-h, &d);
            let fd = (cost_at(&up) - cost_at(&um)) / (2.0 * h);
            let gd = crate::control::control_inner(&g, &d, &grid);
            let rel = (fd - gd).abs() / fd.abs().max(gd.abs()).max(1e-30);
            assert!(
                rel <= 1e-5,
                "direction {dir_seed}: fd {fd:.12e} vs adjoint {gd:.12e} (rel {rel:.3e})"
            );
        }
    }

    #[test]
    fn gradient_exact_across_remeshing() {
        // adaptation inserts interpolation operators; the adjoint applies
        // their transposes, so FD consistency must survive remeshing
        let mesh = AdaptiveMesh::initial(2);
        let geom = mesh.geometry();
        let eps = 0.08;
        let phi0 = FEField::from_fn(geom, |x, _| ((x - 0.45) / eps).tanh());
        let shapes = Arc::new(ControlShapes::default_single());
        let n_steps = 8;
        let params = CHParams {
            dt: 1e-4,
            n_steps,
            ..CHParams::default()
        };
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(31);
        let phi_d: Vec<FEField> = (0..=n_steps)
            .map(|_| {
                FEField::new(
                    (0..geom.n_vertices())
                        .map(|_| rng.gen_range(-0.6..0.6))
                        .collect(),
                    geom.id(),
                )
            })
            .collect();
        let phi_t = phi_d[n_steps].clone();
        let targets = Arc::new(Targets::new(
            phi_d,
            vec![mesh.clone(); n_steps + 1],
            phi_t,
            mesh.clone(),
        ));
        let weights = CostWeights::default();
        let opts = SolveOptions {
            adapt: true,
            cadence: 3,
            ..SolveOptions::default()
        };
        let grid = params.grid();
        let mut u = ControlVector::zeros(1, n_steps);
        for k in 0..=n_steps {
            u.set(0, k, rng.gen_range(5.0..45.0));
        }
        let traj = solve_trajectory(&phi0, &mesh, &u, &shapes, &params, &opts).unwrap();
        assert!(traj.remesh.iter().any(|r| r.is_some()), "no remesh happened");
        let adj = solve_adjoint(&traj, &u, &targets, &weights, &params, &shapes).unwrap();
        let g = reduced_gradient(&u, &traj, &adj, &shapes, weights.gamma, &params).unwrap();
        let cost_at = |uu: &ControlVector| -> f64 {
            let t = solve_trajectory(&phi0, &mesh, uu, &shapes, &params, &opts).unwrap();
            evaluate_cost(&t, uu, &targets, &weights, &grid).unwrap().total()
        };
        let h = 1e-4;
        let mut d = ControlVector::zeros(1, n_steps);
        for k in 0..=n_steps {
            d.set(0, k, ((k + 1) as f64 * 0.7).sin());
        }
        let mut up = u.clone();
        up.axpy(h, &d);
        let mut um = u.clone();
        um.axpy(-h, &d);
        let fd = (cost_at(&up) - cost_at(&um)) / (2.0 * h);
        let gd = crate::control::control_inner(&g, &d, &grid);
        let rel = (fd - gd).abs() / fd.abs().max(gd.abs()).max(1e-30);
        assert!(rel <= 1e-5, "fd {fd:.12e} vs adjoint {gd:.12e} (rel {rel:.3e})");
    }
}
