//! Temporary diagnostic: step pattern for different cross sizes.

use chopt_core::control::ControlVector;
use chopt_core::fem::FEField;
use chopt_core::fom::{FomModel, Targets};
use chopt_core::mesh::AdaptiveMesh;
use chopt_core::optim::{projected_gradient, Model as _, OptimSettings};
use chopt_core::run::RunConfig;
use chopt_core::state::solve_trajectory;
use std::sync::Arc;

fn cross_field(
    geom: &chopt_core::mesh::MeshGeometry,
    eps: f64,
    cx: f64,
    cy: f64,
    a1: (f64, f64),
    a2: (f64, f64),
) -> FEField {
    let scale = std::f64::consts::SQRT_2 * eps;
    FEField::from_fn(geom, |x, y| {
        let bar = |hw: f64, hh: f64| {
            let dx = (x - cx).abs() - hw;
            let dy = (y - cy).abs() - hh;
            let ox = dx.max(0.0);
            let oy = dy.max(0.0);
            (ox * ox + oy * oy).sqrt() + dx.max(dy).min(0.0)
        };
        let sd = bar(a1.0, a1.1).min(bar(a2.0, a2.1));
        (-sd / scale).tanh()
    })
}

#[test]
#[ignore]
fn step_patterns() {
    let cfg = RunConfig::default();
    let mesh = AdaptiveMesh::initial(cfg.mesh.levels);
    let geom = mesh.geometry();
    let shapes = Arc::new(cfg.control.shapes());
    let variants: Vec<(&str, FEField)> = vec![
        (
            "cross A (0.37,0.42) arms .26x.11/.11x.24",
            cross_field(geom, cfg.model.epsilon, 0.37, 0.42, (0.26, 0.11), (0.11, 0.24)),
        ),
        (
            "cross B (0.40,0.45) arms .30x.12/.12x.28",
            cross_field(geom, cfg.model.epsilon, 0.40, 0.45, (0.30, 0.12), (0.12, 0.28)),
        ),
    ];
    for (name, phi0) in variants {
        let u_d = ControlVector::constant(cfg.synthesis.u_d, 1, cfg.model.n_steps);
        let desired = solve_trajectory(
            &phi0,
            &mesh,
            &u_d,
            &shapes,
            &cfg.model,
            &cfg.mesh.solve_options(),
        )
        .unwrap();
        let targets = Arc::new(Targets::from_trajectory(&desired));
        let mut fom = FomModel::new(
            phi0.clone(),
            mesh.clone(),
            shapes.clone(),
            cfg.model,
            cfg.cost,
            targets,
            cfg.mesh.solve_options(),
        );
        // descent check at 0
        let u0 = ControlVector::zeros(1, cfg.model.n_steps);
        let (_, g) = fom.cost_and_gradient(&u0).unwrap();
        let gmax = (0..=cfg.model.n_steps)
            .map(|k| g.get(0, k))
            .fold(f64::NEG_INFINITY, f64::max);
        println!("{name}: gmax at 0 = {gmax:.3e}");
        if gmax > 0.0 {
            println!("  -> uphill at zero, skipping optimizer run");
            continue;
        }
        let res = projected_gradient(
            &u0,
            &mut fom,
            &cfg.control.bounds(),
            &OptimSettings::default(),
        )
        .unwrap();
        print!("  steps:");
        for r in &res.records {
            if let Some(s) = r.step {
                print!(" {s}");
            }
        }
        println!(
            "  ({} iters, J {:.3e} -> {:.3e}, {:?})",
            res.records.len() - 1,
            res.records[0].cost,
            res.records.last().unwrap().cost,
            res.reason
        );
    }
}
