use std::sync::Arc;

use anyhow::Context as _;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use shapeuq::bem::{BoundaryDensity, DirichletBem, MotSolver, SolveKind};
use shapeuq::benchmark::{shape_derivative_datum, source_data, BoundarySetup, ReferenceSolution};
use shapeuq::fem::{
    compute_norm, solve_heat_dirichlet, write_field_csv, write_vtk, Discretization, Locator, Mesh, NormMode, SourceData,
    TimeGrid,
};
use shapeuq::kinematics::SharedVelocity;
use shapeuq::moments::{
    correlation_first_kind, correlation_first_kind_low_rank, covariance_estimate, mc_linear_samples,
    mc_perturbed_statistics, CorrelationTensor, McSettings, ProbeStatistics, ReferenceProblem,
};
use shapeuq::random_boundary::{velocity_from_kappa, KappaModel};
use shapeuq::sensitivity::{material_derivative, shape_derivative, shape_from_material, SensitivityProblem};
use shapeuq::verification::{
    a_prime_fd_check, centering_z, covariance_agreement, crosscheck_bem_fem, derivative_rates, energy_estimates,
    fem_spatial_order, fem_temporal_order, kinematics_rates, max_relative_deviation, BemResolution, Check,
    DerivativeProblem, VerificationReport,
};
use shapeuq::Point;

use crate::artifacts::Artifacts;
use crate::config::{ConfigError, CorrelationRoute, DataPreset, GeometryPreset, RunConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Command {
    VerifyKinematics,
    Solve,
    Sensitivity,
    Bem,
    MomentsMc,
    MomentsBie,
    Crosscheck,
    FullReport,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::VerifyKinematics => "verify-kinematics",
            Command::Solve => "solve",
            Command::Sensitivity => "sensitivity",
            Command::Bem => "bem",
            Command::MomentsMc => "moments-mc",
            Command::MomentsBie => "moments-bie",
            Command::Crosscheck => "crosscheck",
            Command::FullReport => "full-report",
        }
    }
}

/// Result of a command: its checks and the seeds it consumed.
#[derive(Debug, Default)]
pub struct Outcome {
    pub report: VerificationReport,
    pub seeds: Vec<u64>,
}

pub fn run(command: Command, cfg: &RunConfig, out: &mut Artifacts) -> anyhow::Result<Outcome> {
    let mut outcome = Outcome::default();
    match command {
        Command::VerifyKinematics => verify_kinematics(cfg, out, &mut outcome)?,
        Command::Solve => solve(cfg, out)?,
        Command::Sensitivity => sensitivity(cfg, out, &mut outcome)?,
        Command::Bem => bem(cfg, out, &mut outcome)?,
        Command::MomentsMc => {
            moments_mc(cfg, out, &mut outcome)?;
        }
        Command::MomentsBie => {
            moments_bie(cfg, out, &mut outcome)?;
        }
        Command::Crosscheck => crosscheck(cfg, out, &mut outcome)?,
        Command::FullReport => full_report(cfg, out, &mut outcome)?,
    }
    let report = &outcome.report;
    out.write("report.txt", |w| report.write_text(w))?;
    if !report.studies.is_empty() {
        out.write("rates.csv", |w| report.write_csv(w))?;
    }
    Ok(outcome)
}

fn require_disk(cfg: &RunConfig) -> Result<(), ConfigError> {
    if cfg.geometry.preset != GeometryPreset::Disk {
        return Err(ConfigError::new("geometry.preset", "this command needs the disk preset"));
    }
    Ok(())
}

fn require_bem(cfg: &RunConfig) -> Result<(), ConfigError> {
    require_disk(cfg)?;
    cfg.validate_bem()
}

fn data(cfg: &RunConfig) -> SourceData<2> {
    match cfg.data.preset {
        DataPreset::Benchmark => source_data(),
        DataPreset::Zero => SourceData::zero(),
    }
}

fn reference(cfg: &RunConfig, out: &mut Artifacts) -> anyhow::Result<ReferenceSolution> {
    out.stage("reference solve", || {
        let mesh = match cfg.geometry.preset {
            GeometryPreset::Disk => Mesh::disk(Point::zeros(), 1.0, cfg.geometry.rings)?,
            GeometryPreset::Square => Mesh::unit_square(cfg.geometry.resolution)?,
        };
        let disc = Discretization::new(Arc::new(mesh))?;
        let time = TimeGrid::new(cfg.time.t_final, cfg.time.steps)?;
        let data = data(cfg);
        let u0 = solve_heat_dirichlet(&disc, time, &data, cfg.time.scheme)?;
        Ok(ReferenceSolution { disc, time, data, u0, scheme: cfg.time.scheme })
    })
}

fn velocity(cfg: &RunConfig) -> anyhow::Result<SharedVelocity<2>> {
    let v = velocity_from_kappa(&cfg.velocity.kappa(), Some(cfg.velocity.collar_width))
        .map_err(|e| ConfigError::new("velocity", e.to_string()))?;
    Ok(Arc::new(v))
}

fn kappa_model(cfg: &RunConfig) -> anyhow::Result<KappaModel<2>> {
    Ok(cfg.random.model().map_err(|e| ConfigError::new("random", e.to_string()))?)
}

fn psd_check(name: &str, c: &CorrelationTensor, floor: f64) -> Check {
    let trace: f64 = c.diagonal().iter().sum();
    let limit = floor * trace.abs();
    let mut check = Check::at_most(format!("{name}: -min eigenvalue"), -c.min_eigenvalue(), limit)
        .with_detail(format!("asymmetry {:.1e}", c.asymmetry()));
    check.passed &= c.asymmetry() <= 1e-12 * trace.abs();
    check
}

fn verify_kinematics(cfg: &RunConfig, out: &mut Artifacts, outcome: &mut Outcome) -> anyhow::Result<()> {
    let v = velocity(cfg)?;
    let band = (cfg.tolerances.kinematics_band[0], cfg.tolerances.kinematics_band[1]);
    let studies = out.stage("kinematic rates", || kinematics_rates(v.as_ref(), &cfg.epsilon.kinematics_grid))?;
    outcome.report.studies.extend(studies.into_iter().map(|s| s.with_band(band)));
    let fd = out.stage("A'(0) check", || a_prime_fd_check(v.as_ref(), 200, 1e-6, cfg.sampling.seed))?;
    outcome.report.checks.push(Check::at_most("A'(0) vs central differences (200 probes)", fd, cfg.tolerances.a_prime));
    outcome.seeds.push(cfg.sampling.seed);
    Ok(())
}

fn solve(cfg: &RunConfig, out: &mut Artifacts) -> anyhow::Result<()> {
    let r = reference(cfg, out)?;
    out.write("u0.csv", |w| write_field_csv(&r.u0, w))?;
    if cfg.run.vtk {
        let last = r.u0.snapshots.last().context("empty solution")?;
        out.write("u0_final.vtk", |w| write_vtk(r.disc.mesh(), "u0", last, w))?;
    }
    let l2 = compute_norm(&r.disc, &r.u0, NormMode::L2L2)?;
    let summary = format!(
        "vertices {}\ncells {}\nsteps {}\nmax |u0| {:.6e}\n||u0||_L2L2 {:.6e}\n",
        r.disc.mesh().n_vertices(),
        r.disc.mesh().n_cells(),
        r.time.steps,
        r.u0.max_abs(),
        l2
    );
    out.write_bytes("summary.txt", summary.as_bytes())
}

fn probe_values(r: &ReferenceSolution, field: &shapeuq::fem::SpaceTimeField<2>, probes: &[(f64, Point<2>)]) -> anyhow::Result<Vec<f64>> {
    let locator = Locator::new(r.disc.mesh().clone());
    let dt = r.time.dt();
    probes
        .iter()
        .map(|(t, x)| Ok(locator.evaluate(&field.snapshots[(t / dt).round() as usize], x)?))
        .collect()
}

fn sensitivity(cfg: &RunConfig, out: &mut Artifacts, outcome: &mut Outcome) -> anyhow::Result<()> {
    require_disk(cfg)?;
    let r = reference(cfg, out)?;
    let v = velocity(cfg)?;
    let sp = SensitivityProblem { disc: &r.disc, u0: &r.u0, velocity: v.as_ref(), data: &r.data, scheme: r.scheme };
    let z = out.stage("material derivative", || material_derivative(&sp))?;
    let up = out.stage("shape derivative", || shape_derivative(&sp, cfg.run.flux_recovery))?;
    let from_z = shape_from_material(&z, &sp)?;
    out.write("material_derivative.csv", |w| write_field_csv(&z, w))?;
    out.write("shape_derivative.csv", |w| write_field_csv(&up, w))?;
    if cfg.run.vtk {
        out.write("shape_derivative_final.vtk", |w| write_vtk(r.disc.mesh(), "uprime", up.snapshots.last().unwrap(), w))?;
    }
    let probes = cfg.probes.resolve();
    let values = probe_values(&r, &up, &probes)?;
    let mut csv = String::from("t,x,y,shape_derivative\n");
    for ((t, x), v) in probes.iter().zip(&values) {
        csv.push_str(&format!("{t},{},{},{v:e}\n", x[0], x[1]));
    }
    out.write_bytes("probes.csv", csv.as_bytes())?;
    let denom = compute_norm(&r.disc, &up, NormMode::L2L2)?;
    let gap = compute_norm(&r.disc, &from_z.combine(1.0, &up, -1.0)?, NormMode::L2L2)?;
    let rel = if denom > 0.0 { gap / denom } else { gap };
    outcome.report.checks.push(Check::at_most("u' vs z - grad u0.V relative L2L2", rel, cfg.tolerances.identity));
    Ok(())
}

/// Apply-then-solve on a random density, relative max error.
fn round_trip(op: &shapeuq::bem::CausalOperator, seed: u64) -> anyhow::Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = op.n_lags();
    let e = op.n_elements();
    let psi = BoundaryDensity::from_values(n, e, (0..n * e).map(|_| rng.random_range(-1.0..1.0)).collect())?;
    let back = MotSolver::new(op, SolveKind::First)?.solve_load(&op.apply(&psi)?)?;
    Ok(max_relative_deviation(psi.values(), back.values()))
}

fn bem(cfg: &RunConfig, out: &mut Artifacts, outcome: &mut Outcome) -> anyhow::Result<()> {
    require_bem(cfg)?;
    let r = reference(cfg, out)?;
    let v = velocity(cfg)?;
    let mesh = shapeuq::benchmark::circle_boundary(cfg.bem.elements)?;
    let time = TimeGrid::new(cfg.time.t_final, cfg.bem.steps)?;
    let flux = r.flux_on(&mesh, time, cfg.run.flux_recovery)?;
    let datum = shape_derivative_datum(&mesh, &flux, v.as_ref())?;
    let solver = out.stage("boundary assembly", || DirichletBem::new(mesh, time, cfg.bem.representation))?;
    let sol = out.stage("boundary solve", || solver.solve(&datum))?;
    let probes = cfg.probes.resolve();
    let values = solver.evaluate(&sol, &probes)?;
    out.write("datum.csv", |w| datum.write_csv(w))?;
    out.write("density.csv", |w| sol.density.write_csv(w))?;
    let mut csv = String::from("t,x,y,shape_derivative\n");
    for ((t, x), v) in probes.iter().zip(&values) {
        csv.push_str(&format!("{t},{},{},{v:e}\n", x[0], x[1]));
    }
    out.write_bytes("probes.csv", csv.as_bytes())?;
    if let Some(op) = solver.single_layer() {
        let err = out.stage("round trip", || round_trip(op, cfg.sampling.seed))?;
        outcome.report.checks.push(Check::at_most("single layer apply-then-solve", err, cfg.tolerances.round_trip));
        outcome.seeds.push(cfg.sampling.seed);
    }
    Ok(())
}

fn fem_mc(cfg: &RunConfig, r: &ReferenceSolution, out: &mut Artifacts, outcome: &mut Outcome) -> anyhow::Result<ProbeStatistics> {
    let model = kappa_model(cfg)?;
    let probes = cfg.probes.resolve();
    let settings = McSettings {
        epsilon: cfg.epsilon.value,
        n_samples: cfg.sampling.fem_samples,
        base_seed: cfg.sampling.seed,
        collar_width: cfg.velocity.collar_width,
        gamma_floor: cfg.sampling.gamma_floor,
    };
    let problem = ReferenceProblem { disc: &r.disc, data: &r.data, u0: &r.u0, scheme: r.scheme };
    let stats = out.stage("perturbed FEM Monte Carlo", || mc_perturbed_statistics(problem, &model, settings, &probes))?;
    outcome.seeds.extend(&stats.seeds);
    out.write("fem_mc_statistics.csv", |w| stats.write_csv(w))?;
    out.write("fem_mc_covariance.csv", |w| stats.covariance.write_csv(w))?;
    Ok(stats)
}

fn moments_mc(cfg: &RunConfig, out: &mut Artifacts, outcome: &mut Outcome) -> anyhow::Result<ProbeStatistics> {
    require_disk(cfg)?;
    let r = reference(cfg, out)?;
    let stats = fem_mc(cfg, &r, out, outcome)?;
    outcome.report.checks.push(psd_check("FEM MC covariance", &stats.covariance, cfg.tolerances.psd_floor));
    Ok(stats)
}

/// `Cor[u']` at the probes from the tensorised boundary equation.
struct BieMoments {
    correlation: CorrelationTensor,
}

fn moments_bie_on(
    cfg: &RunConfig,
    r: &ReferenceSolution,
    out: &mut Artifacts,
    outcome: &mut Outcome,
) -> anyhow::Result<BieMoments> {
    let model = kappa_model(cfg)?;
    let probes = cfg.probes.resolve();
    let setup = out.stage("boundary assembly", || {
        BoundarySetup::new(r, cfg.bem.elements, cfg.bem.steps, cfg.run.flux_recovery, &probes)
    })?;
    let problem = setup.problem();
    let mids = problem.midpoints();
    let correlation = out.stage("tensorised correlation solve", || -> shapeuq::Result<CorrelationTensor> {
        Ok(match cfg.bem.correlation {
            CorrelationRoute::Dense => {
                let cov = DMatrix::from_fn(mids.len(), mids.len(), |i, j| model.covariance(&mids[i], &mids[j]));
                correlation_first_kind(&problem, &cov)?.uprime
            }
            CorrelationRoute::LowRank => correlation_first_kind_low_rank(&problem, &model.covariance_factor(&mids))?.uprime(),
        })
    })?;
    out.write("correlation_uprime.csv", |w| correlation.write_csv(w))?;
    let estimate = covariance_estimate(&correlation, cfg.epsilon.value);
    out.write("covariance_estimate.csv", |w| estimate.write_csv(w))?;

    let seed = cfg.sampling.seed;
    let ensemble = out.stage("boundary Monte Carlo", || mc_linear_samples(&problem, &model, cfg.sampling.linear_samples, seed))?;
    outcome.seeds.extend(ensemble.seeds());
    let stats = ProbeStatistics::from_ensemble(&ensemble)?;
    out.write("linear_mc_statistics.csv", |w| stats.write_csv(w))?;
    let tol = &cfg.tolerances;
    let z = covariance_agreement(&correlation, &stats.correlation, 0.0, tol.mc_sigmas, true)?;
    outcome.report.checks.push(
        Check::at_most("diag Cor[u'] vs boundary MC (ratio to 3 stderr)", z, 1.0)
            .with_detail(format!("{} samples", stats.n_samples)),
    );
    outcome.report.checks.push(Check::at_most("mean of u' over boundary MC (|mean| / stderr)", centering_z(&stats), tol.mc_sigmas));
    outcome.report.checks.push(psd_check("Cor[u'] (tensorised)", &correlation, tol.psd_floor));
    outcome.report.checks.push(psd_check("boundary MC covariance", &stats.covariance, tol.psd_floor));
    Ok(BieMoments { correlation })
}

fn moments_bie(cfg: &RunConfig, out: &mut Artifacts, outcome: &mut Outcome) -> anyhow::Result<BieMoments> {
    require_bem(cfg)?;
    let r = reference(cfg, out)?;
    moments_bie_on(cfg, &r, out, outcome)
}

fn crosscheck_on(cfg: &RunConfig, r: &ReferenceSolution, out: &mut Artifacts, outcome: &mut Outcome) -> anyhow::Result<()> {
    let v = velocity(cfg)?;
    let probes = cfg.probes.resolve();
    let res = BemResolution { elements: cfg.bem.elements, steps: cfg.bem.steps };
    let c = out.stage("FEM/BEM crosscheck", || crosscheck_bem_fem(r, v.as_ref(), res, cfg.run.flux_recovery, &probes))?;
    out.write("crosscheck.csv", |w| c.write_csv(w))?;
    outcome.report.checks.push(Check::at_most("FEM u' vs single layer potential", c.max_rel_deviation, cfg.tolerances.crosscheck));
    Ok(())
}

fn crosscheck(cfg: &RunConfig, out: &mut Artifacts, outcome: &mut Outcome) -> anyhow::Result<()> {
    require_bem(cfg)?;
    let r = reference(cfg, out)?;
    crosscheck_on(cfg, &r, out, outcome)
}

fn full_report(cfg: &RunConfig, out: &mut Artifacts, outcome: &mut Outcome) -> anyhow::Result<()> {
    require_bem(cfg)?;
    verify_kinematics(cfg, out, outcome)?;
    let spatial = out.stage("manufactured spatial order", || fem_spatial_order(&[8, 16, 32, 64], 8))?;
    let temporal = out.stage("manufactured temporal order", || fem_temporal_order(&[8, 16, 32, 64], 8))?;
    outcome.report.studies.extend([spatial, temporal]);
    let energy = out.stage("energy estimates", || {
        let mesh = Arc::new(Mesh::disk(Point::zeros(), 1.0, cfg.energy.rings)?);
        energy_estimates(mesh, cfg.energy.steps_per_unit, &cfg.energy.t_finals, cfg.energy.data_sets, cfg.sampling.seed)
    })?;
    outcome.report.checks.extend(energy.checks());

    let r = reference(cfg, out)?;
    let v = velocity(cfg)?;
    let problem = DerivativeProblem {
        compact_radius: cfg.epsilon.compact_radius,
        identity_tolerance: cfg.tolerances.identity,
        floor_factor: cfg.tolerances.compact_floor_factor,
        ..DerivativeProblem::new(&r, v, cfg.run.flux_recovery)
    };
    let derivatives = out.stage("derivative studies", || derivative_rates(&problem, &cfg.epsilon.grid))?;
    outcome.report.extend(derivatives);
    crosscheck_on(cfg, &r, out, outcome)?;

    let bie = moments_bie_on(cfg, &r, out, outcome)?;
    let fem = fem_mc(cfg, &r, out, outcome)?;
    let estimate = covariance_estimate(&bie.correlation, cfg.epsilon.value);
    let tol = &cfg.tolerances;
    let ratio = covariance_agreement(&estimate, &fem.covariance, tol.mc_relative, tol.mc_sigmas, false)?;
    outcome.report.checks.push(
        Check::at_most("eps^2 Cor[u'] vs FEM MC covariance (ratio to tolerance)", ratio, 1.0)
            .with_detail(format!("{} samples at eps = {}", fem.n_samples, cfg.epsilon.value)),
    );
    outcome.report.checks.push(psd_check("FEM MC covariance", &fem.covariance, tol.psd_floor));
    Ok(())
}
