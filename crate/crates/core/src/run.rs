//! Configuration, experiment synthesis and the high-level entry points
//! behind the command line: forward solves, optimization with any of the
//! three model variants, basis construction, benchmark timings and the
//! invariant check suite.

use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::control::{BoxBounds, ControlShapes, ControlVector, ShapeFormula};
use crate::fem::FEField;
use crate::fom::{CostWeights, FomModel, Targets};
use crate::mesh::{AdaptiveMesh, RefineParams};
use crate::optim::{projected_gradient, CostBreakdown, IterationRecord, OptimSettings, StopReason};
use crate::pod::{build_common_space, compute_basis, PodBasis, SnapshotSet};
use crate::rom::{build_rom, RomModel, RomOperators};
use crate::state::{solve_trajectory, CHParams, CflPolicy, SolveOptions, Trajectory};
use crate::{Error, Result};

/// Mesh and adaptivity settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MeshConfig {
    /// Uniform refinement levels of the initial mesh (1 = 4 triangles).
    pub levels: u32,
    pub adapt: bool,
    pub cadence: usize,
    pub frac_refine: f64,
    pub frac_coarsen: f64,
    /// Minimum edge guard; `0` disables it.
    pub h_min_guard: f64,
    pub cfl: CflPolicy,
}

impl Default for MeshConfig {
    fn default() -> Self {
        MeshConfig {
            levels: 5,
            adapt: false,
            cadence: 10,
            frac_refine: 0.3,
            frac_coarsen: 0.05,
            h_min_guard: 0.00177,
            cfl: CflPolicy::Warn,
        }
    }
}

impl MeshConfig {
    pub fn refine_params(&self) -> RefineParams {
        RefineParams {
            frac_refine: self.frac_refine,
            frac_coarsen: self.frac_coarsen,
            h_min: if self.h_min_guard > 0.0 {
                Some(self.h_min_guard)
            } else {
                None
            },
        }
    }

    pub fn solve_options(&self) -> SolveOptions {
        SolveOptions {
            adapt: self.adapt,
            cadence: self.cadence,
            refine: self.refine_params(),
            cfl: self.cfl,
        }
    }
}

/// Box bounds of the control amplitudes, uniform over components.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ControlConfig {
    pub lower: f64,
    pub upper: f64,
    /// Vortex frequencies of the control shapes; one entry per component.
    pub shape_frequencies: Vec<u32>,
}

impl Default for ControlConfig {
    fn default() -> Self {
        ControlConfig {
            lower: 0.0,
            upper: 50.0,
            shape_frequencies: vec![1],
        }
    }
}

impl ControlConfig {
    pub fn shapes(&self) -> ControlShapes {
        ControlShapes::new(
            self.shape_frequencies
                .iter()
                .map(|&k| ShapeFormula::Vortex { k })
                .collect(),
        )
    }

    pub fn bounds(&self) -> BoxBounds {
        BoxBounds::uniform(self.lower, self.upper, self.shape_frequencies.len())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub s_init: f64,
    pub shrink: f64,
    pub c_armijo: f64,
    pub max_iters: usize,
    pub max_backtracks: usize,
    pub tol_rel: f64,
    pub tol_abs: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        let s = OptimSettings::default();
        OptimizerConfig {
            s_init: s.s_init,
            shrink: s.shrink,
            c_armijo: s.c_armijo,
            max_iters: s.max_iters,
            max_backtracks: s.max_backtracks,
            tol_rel: s.tol_rel,
            tol_abs: s.tol_abs,
        }
    }
}

impl OptimizerConfig {
    pub fn settings(&self) -> OptimSettings {
        OptimSettings {
            s_init: self.s_init,
            shrink: self.shrink,
            c_armijo: self.c_armijo,
            max_iters: self.max_iters,
            max_backtracks: self.max_backtracks,
            tol_rel: self.tol_rel,
            tol_abs: self.tol_abs,
        }
    }
}

/// What the snapshot ensemble contains.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SnapshotSource {
    /// The desired phase field trajectory.
    Desired,
    /// Desired phase field plus the state trajectory at u = 0.
    DesiredPlusInitial,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PodConfig {
    pub ell: usize,
    /// DEIM basis size; 0 means "same as ell".
    pub ell_d: usize,
    pub snapshot_source: SnapshotSource,
    /// Synthesize the desired trajectory on adapted meshes.
    pub adapt_snapshots: bool,
}

impl Default for PodConfig {
    fn default() -> Self {
        PodConfig {
            ell: 20,
            ell_d: 0,
            snapshot_source: SnapshotSource::Desired,
            adapt_snapshots: false,
        }
    }
}

/// Shape of the initial phase distribution.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitialShape {
    /// Plus-sign shaped region of the A phase.
    Cross,
    /// Disk of the A phase.
    Disk,
    /// Uniform random noise (seeded).
    Noise,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthesisConfig {
    /// Constant reference control generating the desired trajectory.
    pub u_d: f64,
    pub initial: InitialShape,
    pub noise_amplitude: f64,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        SynthesisConfig {
            u_d: 30.0,
            initial: InitialShape::Cross,
            noise_amplitude: 0.3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    /// Write a VTK checkpoint every this many steps; 0 disables.
    pub vtk_stride: usize,
    pub seed: u64,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            vtk_stride: 50,
            seed: 42,
        }
    }
}

/// Complete run configuration; every default reproduces the reference
/// experiment setup.
#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: CHParams,
    pub cost: CostWeights,
    pub control: ControlConfig,
    pub mesh: MeshConfig,
    pub optimizer: OptimizerConfig,
    pub pod: PodConfig,
    pub synthesis: SynthesisConfig,
    pub output: OutputConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.cost.validate()?;
        if self.control.lower > self.control.upper {
            return Err(Error::Config("control.lower exceeds control.upper".into()));
        }
        if self.control.shape_frequencies.is_empty() {
            return Err(Error::Config("need at least one control shape".into()));
        }
        if self.mesh.levels == 0 {
            return Err(Error::Config("mesh.levels must be at least 1".into()));
        }
        if self.mesh.adapt && self.mesh.cadence == 0 {
            return Err(Error::Config("mesh.cadence must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.mesh.frac_refine) || self.mesh.frac_refine == 0.0 {
            return Err(Error::Config("mesh.frac_refine must be in (0, 1]".into()));
        }
        if !(0.0..1.0).contains(&self.mesh.frac_coarsen) {
            return Err(Error::Config("mesh.frac_coarsen must be in [0, 1)".into()));
        }
        if self.pod.ell == 0 {
            return Err(Error::Config("pod.ell must be positive".into()));
        }
        if self.optimizer.shrink <= 0.0 || self.optimizer.shrink >= 1.0 {
            return Err(Error::Config("optimizer.shrink must be in (0, 1)".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn from_toml(text: &str) -> Result<RunConfig> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)?;
        RunConfig::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Parse {
                file: path.display().to_string(),
                msg,
            },
            other => other,
        })
    }
}

/// Builds the configured initial phase field on a mesh.
pub fn initial_field(cfg: &RunConfig, geom: &crate::mesh::MeshGeometry) -> FEField {
    let eps = cfg.model.epsilon;
    let scale = std::f64::consts::SQRT_2 * eps;
    match cfg.synthesis.initial {
        InitialShape::Cross => FEField::from_fn(geom, |x, y| {
            let sd = cross_sdf(x, y);
            (-sd / scale).tanh()
        }),
        InitialShape::Disk => FEField::from_fn(geom, |x, y| {
            let r = ((x - 0.35).powi(2) + (y - 0.5).powi(2)).sqrt();
            ((0.18 - r) / scale).tanh()
        }),
        InitialShape::Noise => {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.output.seed);
            let amp = cfg.synthesis.noise_amplitude;
            FEField::new(
                (0..geom.n_vertices())
                    .map(|_| rng.gen_range(-amp..amp))
                    .collect(),
                geom.id(),
            )
        }
    }
}

/// Signed distance to a plus-sign shaped region (negative inside), the union
/// of two axis-aligned bars. The cross sits off-center with unequal arms:
/// under the vortex transport a rotationally symmetric pattern centered on
/// the vortex makes u = 0 a stationary corner of the box (small rotations
/// increase the terminal misfit), which would defeat any descent method
/// started there.
fn cross_sdf(x: f64, y: f64) -> f64 {
    let (cx, cy) = (0.40, 0.45);
    let bar = |hw: f64, hh: f64| {
        let dx = (x - cx).abs() - hw;
        let dy = (y - cy).abs() - hh;
        let ox = dx.max(0.0);
        let oy = dy.max(0.0);
        (ox * ox + oy * oy).sqrt() + dx.max(dy).min(0.0)
    };
    bar(0.30, 0.12).min(bar(0.12, 0.28))
}

/// Everything the optimization stage needs from the synthesis stage.
pub struct Benchmark {
    pub mesh0: Arc<AdaptiveMesh>,
    pub phi0: FEField,
    pub shapes: Arc<ControlShapes>,
    pub targets: Arc<Targets>,
    pub desired: Trajectory,
}

/// Synthesizes the desired trajectory by driving the state solver with the
/// constant reference control; the control problem starts from its first
/// snapshot, so the target is reachable by construction.
pub fn synthesize(cfg: &RunConfig) -> Result<Benchmark> {
    cfg.validate()?;
    let mesh0 = AdaptiveMesh::initial(cfg.mesh.levels);
    let phi0 = initial_field(cfg, mesh0.geometry());
    let shapes = Arc::new(cfg.control.shapes());
    let m = shapes.n_shapes();
    let u_d = ControlVector::constant(cfg.synthesis.u_d, m, cfg.model.n_steps);
    let mut opts = cfg.mesh.solve_options();
    opts.adapt = cfg.pod.adapt_snapshots;
    let desired = solve_trajectory(&phi0, &mesh0, &u_d, &shapes, &cfg.model, &opts)?;
    let targets = Arc::new(Targets::from_trajectory(&desired));
    Ok(Benchmark {
        mesh0,
        phi0,
        shapes,
        targets,
        desired,
    })
}

/// Which model drives the optimization.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    Fom,
    Rom,
    RomDeim,
}

impl std::str::FromStr for ModelKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<ModelKind> {
        match s {
            "fom" => Ok(ModelKind::Fom),
            "rom" => Ok(ModelKind::Rom),
            "rom-deim" => Ok(ModelKind::RomDeim),
            other => Err(Error::Config(format!(
                "unknown model '{other}' (expected fom, rom or rom-deim)"
            ))),
        }
    }
}

/// Builds the POD basis (and snapshot space) for the configured ensemble.
pub fn build_pod_pipeline(
    cfg: &RunConfig,
    bench: &Benchmark,
) -> Result<(crate::pod::CommonSpace, PodBasis)> {
    let grid = cfg.model.grid();
    let mut snaps = SnapshotSet::from_trajectory(&bench.desired, &grid);
    if cfg.pod.snapshot_source == SnapshotSource::DesiredPlusInitial {
        let u0 = ControlVector::zeros(bench.shapes.n_shapes(), cfg.model.n_steps);
        let mut opts = cfg.mesh.solve_options();
        opts.adapt = cfg.pod.adapt_snapshots;
        let traj0 = solve_trajectory(
            &bench.phi0,
            &bench.mesh0,
            &u0,
            &bench.shapes,
            &cfg.model,
            &opts,
        )?;
        let extra = SnapshotSet::from_trajectory(&traj0, &grid);
        let mut fields = snaps.fields;
        let mut meshes = snaps.meshes;
        let mut weights = snaps.weights;
        fields.extend(extra.fields);
        meshes.extend(extra.meshes);
        weights.extend(extra.weights);
        snaps = SnapshotSet::new(fields, meshes, weights, "desired + uncontrolled state");
    }
    let space = build_common_space(&snaps, &[bench.mesh0.clone()])?;
    let basis = compute_basis(&space, cfg.pod.ell)?;
    Ok((space, basis))
}

fn rom_operators(cfg: &RunConfig, bench: &Benchmark, with_deim: bool) -> Result<Arc<RomOperators>> {
    let (space, basis) = build_pod_pipeline(cfg, bench)?;
    let ell_d = if with_deim {
        Some(if cfg.pod.ell_d == 0 {
            basis.ell()
        } else {
            cfg.pod.ell_d
        })
    } else {
        None
    };
    Ok(Arc::new(build_rom(
        &basis,
        &space,
        &bench.shapes,
        &cfg.model,
        &cfg.cost,
        &bench.targets,
        &bench.phi0,
        &bench.mesh0,
        ell_d,
    )?))
}

/// Result of one optimization run.
pub struct OptimizeOutcome {
    pub records: Vec<IterationRecord>,
    pub reason: StopReason,
    pub u: ControlVector,
    /// Final cost of the driven model.
    pub model_cost: CostBreakdown,
    /// Full-order cost re-evaluated at the returned control (always filled;
    /// for the full-order model it equals `model_cost`).
    pub full_cost: CostBreakdown,
    pub rom_dim: Option<usize>,
}

/// Runs projected gradient descent with the chosen model from u = 0 and
/// re-evaluates the full-order cost at the optimized control.
pub fn optimize(cfg: &RunConfig, kind: ModelKind, bench: &Benchmark) -> Result<OptimizeOutcome> {
    let bounds = cfg.control.bounds();
    let settings = cfg.optimizer.settings();
    let m = bench.shapes.n_shapes();
    let u0 = ControlVector::zeros(m, cfg.model.n_steps);
    let mut fom = FomModel::new(
        bench.phi0.clone(),
        bench.mesh0.clone(),
        bench.shapes.clone(),
        cfg.model,
        cfg.cost,
        bench.targets.clone(),
        cfg.mesh.solve_options(),
    );
    match kind {
        ModelKind::Fom => {
            let res = projected_gradient(&u0, &mut fom, &bounds, &settings)?;
            let full_cost = res.cost;
            Ok(OptimizeOutcome {
                records: res.records,
                reason: res.reason,
                u: res.u,
                model_cost: full_cost,
                full_cost,
                rom_dim: None,
            })
        }
        ModelKind::Rom | ModelKind::RomDeim => {
            let ops = rom_operators(cfg, bench, kind == ModelKind::RomDeim)?;
            let rom_dim = Some(ops.ell());
            let mut model = RomModel::new(ops);
            let res = projected_gradient(&u0, &mut model, &bounds, &settings)?;
            use crate::optim::Model as _;
            let full_cost = fom.cost(&res.u)?;
            Ok(OptimizeOutcome {
                records: res.records,
                reason: res.reason,
                u: res.u,
                model_cost: res.cost,
                full_cost,
                rom_dim,
            })
        }
    }
}

/// Runs a forward solve with u = 0 (or a provided control) and writes the
/// trajectory artifacts.
pub fn run_forward(cfg: &RunConfig, control: Option<ControlVector>, out: &Path) -> Result<()> {
    cfg.validate()?;
    std::fs::create_dir_all(out)?;
    let mesh0 = AdaptiveMesh::initial(cfg.mesh.levels);
    let phi0 = initial_field(cfg, mesh0.geometry());
    let shapes = cfg.control.shapes();
    let m = shapes.n_shapes();
    let u = match control {
        Some(u) => {
            if u.n_steps() != cfg.model.n_steps || u.n_components() != m {
                return Err(Error::Dimension(format!(
                    "control is {}x{}, config needs {}x{}",
                    u.n_components(),
                    u.n_steps() + 1,
                    m,
                    cfg.model.n_steps + 1
                )));
            }
            u
        }
        None => ControlVector::zeros(m, cfg.model.n_steps),
    };
    let traj = solve_trajectory(&phi0, &mesh0, &u, &shapes, &cfg.model, &cfg.mesh.solve_options())?;
    crate::io::write_mass_energy_csv(&out.join("mass_energy.csv"), &traj, cfg.model.dt)?;
    if cfg.output.vtk_stride > 0 {
        for (k, s) in traj.steps.iter().enumerate() {
            if k % cfg.output.vtk_stride == 0 || k == cfg.model.n_steps {
                crate::io::write_vtk(
                    &out.join(format!("state_{k:06}.vtk")),
                    &s.mesh,
                    &[("phi", &s.phi), ("mu", &s.mu)],
                )?;
            }
        }
    }
    if traj.max_cfl > 1.0 {
        eprintln!(
            "warning: CFL number reached {:.3} (> 1); results may be inaccurate",
            traj.max_cfl
        );
    }
    Ok(())
}

/// Full optimization entry point: synthesis, optimization, artifacts.
pub fn run_optimize(cfg: &RunConfig, kind: ModelKind, out: &Path) -> Result<OptimizeOutcome> {
    cfg.validate()?;
    std::fs::create_dir_all(out)?;
    let bench = synthesize(cfg)?;
    let outcome = optimize(cfg, kind, &bench)?;
    crate::io::write_history_csv(&out.join("history.csv"), &outcome.records)?;
    crate::io::write_control_csv(&out.join("control_final.csv"), &outcome.u)?;
    // final state under the optimized control
    let traj = solve_trajectory(
        &bench.phi0,
        &bench.mesh0,
        &outcome.u,
        &bench.shapes,
        &cfg.model,
        &cfg.mesh.solve_options(),
    )?;
    let last = traj.steps.last().unwrap();
    crate::io::write_vtk(
        &out.join("state_final.vtk"),
        &last.mesh,
        &[("phi", &last.phi), ("mu", &last.mu)],
    )?;
    let mut summary = String::from("quantity,value\n");
    summary.push_str(&format!("model_cost,{:.16e}\n", outcome.model_cost.total()));
    summary.push_str(&format!("full_cost,{:.16e}\n", outcome.full_cost.total()));
    summary.push_str(&format!("tracking,{:.16e}\n", outcome.full_cost.tracking));
    summary.push_str(&format!("terminal,{:.16e}\n", outcome.full_cost.terminal));
    summary.push_str(&format!("penalty,{:.16e}\n", outcome.full_cost.penalty));
    if let Some(ell) = outcome.rom_dim {
        summary.push_str(&format!("rom_dim,{ell}\n"));
    }
    summary.push_str(&format!("converged,{}\n", outcome.reason == StopReason::Converged));
    std::fs::write(out.join("summary.csv"), summary)?;
    Ok(outcome)
}

/// Builds and persists the POD/DEIM basis artifacts.
pub fn run_pod_build(cfg: &RunConfig, out: &Path) -> Result<PodBasis> {
    cfg.validate()?;
    std::fs::create_dir_all(out)?;
    let bench = synthesize(cfg)?;
    let (space, basis) = build_pod_pipeline(cfg, &bench)?;
    let ell_d = if cfg.pod.ell_d == 0 { basis.ell() } else { cfg.pod.ell_d };
    let snaps: Vec<Vec<f64>> = space
        .fields
        .iter()
        .map(|f| {
            f.coeffs
                .iter()
                .map(|&x| crate::fem::free_energy_d1(x))
                .collect()
        })
        .collect();
    let deim = crate::deim::build_deim(&snaps, ell_d)?;
    crate::io::write_basis(out, &basis, Some(&deim.indices))?;
    Ok(basis)
}

/// Wall-clock timings of one model variant.
#[derive(Clone, Copy, Debug, Default)]
pub struct VariantTiming {
    pub optimization: f64,
    pub state_solve: f64,
    pub adjoint_solve: f64,
}

/// Timing table in the shape of the published comparison: rows are phases,
/// columns are model variants, plus the offline costs of the reduced stack.
#[derive(Clone, Copy, Debug, Default)]
pub struct TimingReport {
    pub uniform_fe: VariantTiming,
    pub adaptive_fe: VariantTiming,
    pub pod: VariantTiming,
    pub pod_deim: VariantTiming,
    pub offline_interpolation: f64,
    pub offline_basis: f64,
    pub offline_deim: f64,
}

fn median3(mut v: [f64; 3]) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    v[1]
}

fn time_state_solve(
    bench: &Benchmark,
    cfg: &RunConfig,
    u: &ControlVector,
    opts: &SolveOptions,
) -> Result<f64> {
    let mut times = [0.0; 3];
    for t in &mut times {
        let start = Instant::now();
        let _ = solve_trajectory(&bench.phi0, &bench.mesh0, u, &bench.shapes, &cfg.model, opts)?;
        *t = start.elapsed().as_secs_f64();
    }
    Ok(median3(times))
}

/// Times the four optimization variants and the reduced-stack offline phase.
/// Runs single-threaded; per-solve rows are medians of three repeats.
pub fn run_benchmark(cfg: &RunConfig, out: &Path) -> Result<TimingReport> {
    cfg.validate()?;
    crate::init_threads(1);
    std::fs::create_dir_all(out)?;
    let mut report = TimingReport::default();
    let bounds = cfg.control.bounds();
    let settings = cfg.optimizer.settings();

    // --- uniform FE ---
    let uniform_cfg = {
        let mut c = cfg.clone();
        c.mesh.adapt = false;
        c
    };
    let bench_u = synthesize(&uniform_cfg)?;
    let m = bench_u.shapes.n_shapes();
    let u0 = ControlVector::zeros(m, cfg.model.n_steps);
    {
        let mut fom = FomModel::new(
            bench_u.phi0.clone(),
            bench_u.mesh0.clone(),
            bench_u.shapes.clone(),
            uniform_cfg.model,
            uniform_cfg.cost,
            bench_u.targets.clone(),
            uniform_cfg.mesh.solve_options(),
        );
        let start = Instant::now();
        let res = projected_gradient(&u0, &mut fom, &bounds, &settings)?;
        report.uniform_fe.optimization = start.elapsed().as_secs_f64();
        report.uniform_fe.state_solve =
            time_state_solve(&bench_u, &uniform_cfg, &res.u, &uniform_cfg.mesh.solve_options())?;
        let traj = solve_trajectory(
            &bench_u.phi0,
            &bench_u.mesh0,
            &res.u,
            &bench_u.shapes,
            &uniform_cfg.model,
            &uniform_cfg.mesh.solve_options(),
        )?;
        let mut times = [0.0; 3];
        for t in &mut times {
            let start = Instant::now();
            let _ = crate::adjoint::solve_adjoint(
                &traj,
                &res.u,
                &bench_u.targets,
                &uniform_cfg.cost,
                &uniform_cfg.model,
                &bench_u.shapes,
            )?;
            *t = start.elapsed().as_secs_f64();
        }
        report.uniform_fe.adjoint_solve = median3(times);
    }

    // --- adaptive FE: one level coarser start, adaptation on ---
    let adaptive_cfg = {
        let mut c = cfg.clone();
        c.mesh.levels = cfg.mesh.levels.saturating_sub(1).max(2);
        c.mesh.adapt = true;
        c.pod.adapt_snapshots = true;
        c
    };
    let bench_a = synthesize(&adaptive_cfg)?;
    {
        let mut fom = FomModel::new(
            bench_a.phi0.clone(),
            bench_a.mesh0.clone(),
            bench_a.shapes.clone(),
            adaptive_cfg.model,
            adaptive_cfg.cost,
            bench_a.targets.clone(),
            adaptive_cfg.mesh.solve_options(),
        );
        let start = Instant::now();
        let res = projected_gradient(&u0, &mut fom, &bounds, &settings)?;
        report.adaptive_fe.optimization = start.elapsed().as_secs_f64();
        report.adaptive_fe.state_solve = time_state_solve(
            &bench_a,
            &adaptive_cfg,
            &res.u,
            &adaptive_cfg.mesh.solve_options(),
        )?;
        let traj = solve_trajectory(
            &bench_a.phi0,
            &bench_a.mesh0,
            &res.u,
            &bench_a.shapes,
            &adaptive_cfg.model,
            &adaptive_cfg.mesh.solve_options(),
        )?;
        let mut times = [0.0; 3];
        for t in &mut times {
            let start = Instant::now();
            let _ = crate::adjoint::solve_adjoint(
                &traj,
                &res.u,
                &bench_a.targets,
                &adaptive_cfg.cost,
                &adaptive_cfg.model,
                &bench_a.shapes,
            )?;
            *t = start.elapsed().as_secs_f64();
        }
        report.adaptive_fe.adjoint_solve = median3(times);
    }

    // --- reduced models (offline phase timed separately) ---
    let start = Instant::now();
    let grid = cfg.model.grid();
    let snaps = SnapshotSet::from_trajectory(&bench_u.desired, &grid);
    let space = build_common_space(&snaps, &[bench_u.mesh0.clone()])?;
    report.offline_interpolation = start.elapsed().as_secs_f64();
    let start = Instant::now();
    let basis = compute_basis(&space, cfg.pod.ell)?;
    report.offline_basis = start.elapsed().as_secs_f64();
    let start = Instant::now();
    let ell_d = if cfg.pod.ell_d == 0 { basis.ell() } else { cfg.pod.ell_d };
    let fsnaps: Vec<Vec<f64>> = space
        .fields
        .iter()
        .map(|f| {
            f.coeffs
                .iter()
                .map(|&x| crate::fem::free_energy_d1(x))
                .collect()
        })
        .collect();
    let _deim = crate::deim::build_deim(&fsnaps, ell_d)?;
    report.offline_deim = start.elapsed().as_secs_f64();

    for (with_deim, slot) in [(false, 0usize), (true, 1usize)] {
        let ops = Arc::new(build_rom(
            &basis,
            &space,
            &bench_u.shapes,
            &cfg.model,
            &cfg.cost,
            &bench_u.targets,
            &bench_u.phi0,
            &bench_u.mesh0,
            if with_deim { Some(ell_d) } else { None },
        )?);
        let mut model = RomModel::new(ops.clone());
        let start = Instant::now();
        let res = projected_gradient(&u0, &mut model, &bounds, &settings)?;
        let optimization = start.elapsed().as_secs_f64();
        let mut times = [0.0; 3];
        for t in &mut times {
            let start = Instant::now();
            let _ = crate::rom::rom_solve(&res.u, &ops)?;
            *t = start.elapsed().as_secs_f64();
        }
        let state_solve = median3(times);
        let mut times = [0.0; 3];
        for t in &mut times {
            let traj = crate::rom::rom_solve(&res.u, &ops)?;
            let start = Instant::now();
            let _ = crate::rom::rom_gradient(&res.u, &traj, &ops)?;
            *t = start.elapsed().as_secs_f64();
        }
        let adjoint_solve = median3(times);
        let timing = VariantTiming {
            optimization,
            state_solve,
            adjoint_solve,
        };
        if slot == 0 {
            report.pod = timing;
        } else {
            report.pod_deim = timing;
        }
    }

    // Table-shaped CSV: rows = phases, columns = variants
    let mut csv = String::from("phase,uniform_fe,adaptive_fe,pod,pod_deim\n");
    let row = |name: &str, f: fn(&VariantTiming) -> f64, r: &TimingReport| {
        format!(
            "{name},{:.6},{:.6},{:.6},{:.6}\n",
            f(&r.uniform_fe),
            f(&r.adaptive_fe),
            f(&r.pod),
            f(&r.pod_deim)
        )
    };
    csv.push_str(&row("optimization", |v| v.optimization, &report));
    csv.push_str(&row("state_solve", |v| v.state_solve, &report));
    csv.push_str(&row("adjoint_solve", |v| v.adjoint_solve, &report));
    csv.push_str("\noffline_phase,seconds\n");
    csv.push_str(&format!(
        "snapshot_interpolation,{:.6}\n",
        report.offline_interpolation
    ));
    csv.push_str(&format!("pod_basis,{:.6}\n", report.offline_basis));
    csv.push_str(&format!("deim,{:.6}\n", report.offline_deim));
    std::fs::write(out.join("timings.csv"), csv)?;
    Ok(report)
}

/// One line of the invariant check suite.
pub struct CheckResult {
    pub name: &'static str,
    pub pass: bool,
    pub detail: String,
}

/// Fast invariant sweep on small instances; used by the `check` subcommand.
pub fn run_check() -> Vec<CheckResult> {
    let mut out = Vec::new();
    let mut push = |name: &'static str, pass: bool, detail: String| {
        out.push(CheckResult { name, pass, detail });
    };

    let mesh = AdaptiveMesh::initial(3);
    let geom = mesh.geometry();
    let census = geom.check_conforming();
    push(
        "mesh conformity (edge census)",
        census.is_ok(),
        census.err().unwrap_or_default(),
    );
    let area = geom.total_area();
    push(
        "mesh tiles unit square",
        (area - 1.0).abs() < 1e-12,
        format!("total area {area:.15}"),
    );

    let mass = crate::fem::assemble_mass(geom);
    let ones = vec![1.0; geom.n_vertices()];
    let v = mass.quadratic_form(&ones, &ones);
    push(
        "mass matrix integrates 1 to |domain|",
        (v - 1.0).abs() < 1e-12,
        format!("1^T M 1 = {v:.15}"),
    );
    let stiff = crate::fem::assemble_stiffness(geom);
    let k1 = crate::sparse::norm2(&stiff.matvec(&ones));
    push(
        "stiffness kernel holds constants",
        k1 < 1e-12,
        format!("|K 1| = {k1:.3e}"),
    );

    let shapes = ControlShapes::default_single();
    let ms = shapes.on_mesh(geom).unwrap();
    push(
        "control shape discretely solenoidal",
        ms.div_after[0] < 1e-12,
        format!(
            "sup |(v, grad psi)| = {:.3e} (raw interpolant {:.3e})",
            ms.div_after[0], ms.div_before[0]
        ),
    );
    let skew = ms.convection[0].skew_defect();
    push(
        "convection matrix exactly skew",
        skew == 0.0,
        format!("max |C + C^T| = {skew:.3e}"),
    );

    // short uncontrolled run: mass conservation and energy decay
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let phi0 = FEField::new(
        (0..geom.n_vertices())
            .map(|_| rng.gen_range(-0.5..0.5))
            .collect(),
        geom.id(),
    );
    let params = CHParams {
        n_steps: 30,
        ..CHParams::default()
    };
    let u = ControlVector::zeros(1, 30);
    match solve_trajectory(&phi0, &mesh, &u, &shapes, &params, &SolveOptions::default()) {
        Ok(traj) => {
            let drift = traj.mass_drift();
            push(
                "mass conservation over 30 steps",
                drift < 1e-10,
                format!("max drift {drift:.3e}"),
            );
            let monotone = traj
                .steps
                .windows(2)
                .all(|w| w[1].energy <= w[0].energy + 1e-10);
            push(
                "energy decay at u = 0",
                monotone,
                format!(
                    "E_0 = {:.6e}, E_T = {:.6e}",
                    traj.steps[0].energy,
                    traj.steps.last().unwrap().energy
                ),
            );
        }
        Err(e) => {
            push("mass conservation over 30 steps", false, e.to_string());
        }
    }

    // POD energy identity on a small ensemble
    let fields: Vec<FEField> = (0..8)
        .map(|_| {
            FEField::new(
                (0..geom.n_vertices())
                    .map(|_| rng.gen_range(-1.0..1.0))
                    .collect(),
                geom.id(),
            )
        })
        .collect();
    let snaps = SnapshotSet::new(fields, vec![mesh.clone(); 8], vec![1.0; 8], "check");
    let space = build_common_space(&snaps, &[]).unwrap();
    let basis = compute_basis(&space, 4).unwrap();
    let (direct, tail) = crate::pod::projection_error(&space, &basis);
    let rel = (direct - tail).abs() / basis.total.max(1e-30);
    push(
        "POD projection error equals eigenvalue tail",
        rel < 1e-10,
        format!("direct {direct:.6e}, tail {tail:.6e}"),
    );
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_matches_reference_values() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.model.dt, 2.5e-5);
        assert_eq!(cfg.model.n_steps, 500);
        assert!((cfg.model.t_end() - 0.0125).abs() < 1e-15);
        assert_eq!(cfg.model.mobility, 2.5e-5);
        assert_eq!(cfg.model.sigma, 25.98);
        assert_eq!(cfg.model.epsilon, 0.02);
        assert_eq!(cfg.cost.beta1, 20.0);
        assert_eq!(cfg.cost.beta2, 20.0);
        assert_eq!(cfg.cost.gamma, 1e-4);
        assert_eq!(cfg.control.lower, 0.0);
        assert_eq!(cfg.control.upper, 50.0);
        assert_eq!(cfg.control.shape_frequencies.len(), 1);
        assert_eq!(cfg.pod.ell, 20);
        assert_eq!(cfg.mesh.h_min_guard, 0.00177);
        cfg.validate().unwrap();
    }

    #[test]
    fn config_roundtrip_is_exact() {
        let mut cfg = RunConfig::default();
        cfg.model.dt = 1.2345678901234567e-5;
        cfg.cost.gamma = 3.333333333333333e-4;
        cfg.mesh.levels = 4;
        cfg.pod.snapshot_source = SnapshotSource::DesiredPlusInitial;
        cfg.synthesis.initial = InitialShape::Disk;
        let text = cfg.to_toml();
        let back = RunConfig::from_toml(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn config_rejects_unknown_keys_and_bad_values() {
        let bad = "[model]\nunknown_knob = 1.0\n";
        assert!(RunConfig::from_toml(bad).is_err());
        let mut cfg = RunConfig::default();
        cfg.model.dt = -1.0;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.control.lower = 60.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn cross_initial_field_is_two_phase() {
        let cfg = RunConfig::default();
        let mesh = AdaptiveMesh::initial(5);
        let phi = initial_field(&cfg, mesh.geometry());
        // center of the cross is deep in the A phase
        let geom = mesh.geometry();
        let center = geom
            .vertices()
            .iter()
            .position(|p| *p == [0.5, 0.5])
            .unwrap();
        assert!(phi.coeffs[center] > 0.99);
        // far corner is in the B phase
        let corner = geom
            .vertices()
            .iter()
            .position(|p| *p == [0.0, 0.0])
            .unwrap();
        assert!(phi.coeffs[corner] < -0.99);
        assert!(phi.coeffs.iter().all(|v| v.abs() <= 1.0));
    }

    #[test]
    fn check_suite_passes() {
        for c in run_check() {
            assert!(c.pass, "{}: {}", c.name, c.detail);
        }
    }
}
