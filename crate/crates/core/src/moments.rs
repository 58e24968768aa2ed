//! Statistical moments of random fields: sample moments of ensembles, Monte
//! Carlo over perturbed domains, and the deterministic second moment of the
//! shape derivative from the tensorized first-kind boundary equation.

use std::io::Write;
use std::sync::Arc;

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::bem::{BoundaryDensity, BoundaryMesh, CausalOperator, MotSolver, SolveKind};
use crate::error::{Error, Result};
use crate::fem::{solve_pulled_back, Discretization, Locator, PointLocation, SourceData, SpaceTimeField, TimeScheme};
use crate::geometry::Point;
use crate::kinematics::{epsilon_admissible, PerturbationMap};
use crate::random_boundary::{velocity_from_kappa, KappaModel};

/// Deterministic pairwise summation, so sums do not depend on how samples
/// were distributed over threads.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    if values.len() <= 8 {
        return values.iter().sum();
    }
    let mid = values.len() / 2;
    pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PayloadKind {
    Scalar,
    ProbeValues,
    BoundaryDensity,
    Field,
}

/// Realisations `v(ω_i)` tagged with the seed that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleEnsemble {
    kind: PayloadKind,
    seeds: Vec<u64>,
    payloads: Vec<Vec<f64>>,
}

impl SampleEnsemble {
    pub fn new(kind: PayloadKind) -> Self {
        Self { kind, seeds: Vec::new(), payloads: Vec::new() }
    }

    pub fn push(&mut self, seed: u64, payload: Vec<f64>) -> Result<()> {
        if let Some(first) = self.payloads.first() {
            if first.len() != payload.len() {
                return Err(Error::shape(first.len(), payload.len()));
            }
        }
        if self.seeds.contains(&seed) {
            return Err(Error::invalid(format!("duplicate seed {seed}")));
        }
        self.seeds.push(seed);
        self.payloads.push(payload);
        Ok(())
    }

    pub fn kind(&self) -> PayloadKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.payloads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.payloads.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.payloads.first().map_or(0, Vec::len)
    }

    pub fn seeds(&self) -> &[u64] {
        &self.seeds
    }

    pub fn payloads(&self) -> &[Vec<f64>] {
        &self.payloads
    }

    /// Copy with the sample mean subtracted from every payload.
    pub fn centered(&self) -> Self {
        let mean = self.mean();
        let payloads = self.payloads.iter().map(|p| p.iter().zip(&mean).map(|(a, b)| a - b).collect()).collect();
        Self { payloads, ..self.clone() }
    }

    pub fn mean(&self) -> Vec<f64> {
        let n = self.len() as f64;
        (0..self.dim())
            .map(|i| pairwise_sum(&self.payloads.iter().map(|p| p[i]).collect::<Vec<_>>()) / n)
            .collect()
    }

    /// Standard error of the mean of each component.
    pub fn mean_stderr(&self) -> Vec<f64> {
        let mean = self.mean();
        let n = self.len() as f64;
        (0..self.dim())
            .map(|i| {
                let sq: Vec<f64> = self.payloads.iter().map(|p| (p[i] - mean[i]).powi(2)).collect();
                (pairwise_sum(&sq) / (n - 1.0).max(1.0) / n).sqrt()
            })
            .collect()
    }
}

/// Dense symmetric tensor of order `k` over `dim` components, stored with
/// the first index varying slowest.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentTensor {
    pub dim: usize,
    pub order: usize,
    pub values: Vec<f64>,
}

impl MomentTensor {
    pub fn get(&self, index: &[usize]) -> f64 {
        let flat = index.iter().fold(0, |acc, &i| acc * self.dim + i);
        self.values[flat]
    }
}

/// Sample average of `k`-fold outer products. Centre the ensemble first for
/// central moments.
pub fn moment_k(ensemble: &SampleEnsemble, k: usize) -> Result<MomentTensor> {
    if k == 0 {
        return Err(Error::invalid("moment order must be at least 1"));
    }
    if ensemble.is_empty() {
        return Err(Error::invalid("empty ensemble"));
    }
    if k > 2 && matches!(ensemble.kind, PayloadKind::Field | PayloadKind::BoundaryDensity) {
        return Err(Error::Unsupported(format!("order-{k} moments of field payloads")));
    }
    let dim = ensemble.dim();
    let size = dim
        .checked_pow(k as u32)
        .filter(|s| *s <= 1 << 28)
        .ok_or_else(|| Error::invalid(format!("moment tensor of order {k} over {dim} components is too large")))?;
    let n = ensemble.len() as f64;
    let values = (0..size)
        .into_par_iter()
        .map(|flat| {
            let mut idx = vec![0usize; k];
            let mut rest = flat;
            for slot in idx.iter_mut().rev() {
                *slot = rest % dim;
                rest /= dim;
            }
            let terms: Vec<f64> = ensemble.payloads.iter().map(|p| idx.iter().map(|&i| p[i]).product()).collect();
            pairwise_sum(&terms) / n
        })
        .collect();
    Ok(MomentTensor { dim, order: k, values })
}

/// Two-point function `Cor(p, q)` on a sample grid shared by both axes.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationTensor {
    pub values: DMatrix<f64>,
    /// Standard error of every entry when estimated from samples.
    pub stderr: Option<DMatrix<f64>>,
}

impl CorrelationTensor {
    pub fn new(values: DMatrix<f64>) -> Self {
        Self { values, stderr: None }
    }

    pub fn dim(&self) -> usize {
        self.values.nrows()
    }

    pub fn diagonal(&self) -> Vec<f64> {
        self.values.diagonal().as_slice().to_vec()
    }

    pub fn scaled(&self, a: f64) -> Self {
        Self { values: self.values.scale(a), stderr: self.stderr.as_ref().map(|s| s.scale(a.abs())) }
    }

    pub fn asymmetry(&self) -> f64 {
        (&self.values - self.values.transpose()).amax()
    }

    pub fn min_eigenvalue(&self) -> f64 {
        let sym = (&self.values + self.values.transpose()).scale(0.5);
        sym.symmetric_eigen().eigenvalues.min()
    }

    /// Symmetric, with smallest eigenvalue at least `−floor · trace`.
    pub fn is_psd(&self, floor: f64) -> bool {
        let trace = self.values.trace().abs();
        self.asymmetry() <= 1e-12 * self.values.amax().max(f64::MIN_POSITIVE) && self.min_eigenvalue() >= -floor * trace
    }

    /// CSV with header `p,q,value,stderr`.
    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "p,q,value,stderr")?;
        for p in 0..self.dim() {
            for q in 0..self.dim() {
                let se = self.stderr.as_ref().map_or(String::new(), |s| format!("{:e}", s[(p, q)]));
                writeln!(w, "{p},{q},{:e},{se}", self.values[(p, q)])?;
            }
        }
        Ok(())
    }
}

/// Sample statistics of probe values.
#[derive(Debug, Clone)]
pub struct ProbeStatistics {
    pub n_samples: usize,
    pub seeds: Vec<u64>,
    pub mean: Vec<f64>,
    pub mean_stderr: Vec<f64>,
    /// Uncentered second moment `E[v vᵀ]` with entry-wise standard errors.
    pub correlation: CorrelationTensor,
    /// Centered covariance with entry-wise standard errors.
    pub covariance: CorrelationTensor,
}

impl ProbeStatistics {
    pub fn from_ensemble(ensemble: &SampleEnsemble) -> Result<Self> {
        if ensemble.len() < 2 {
            return Err(Error::invalid("statistics need at least two samples"));
        }
        let correlation = second_moment(ensemble);
        let covariance = second_moment(&ensemble.centered());
        Ok(Self {
            n_samples: ensemble.len(),
            seeds: ensemble.seeds.clone(),
            mean: ensemble.mean(),
            mean_stderr: ensemble.mean_stderr(),
            correlation,
            covariance,
        })
    }

    /// CSV with header `probe,mean,mean_stderr,variance,variance_stderr`.
    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "probe,mean,mean_stderr,variance,variance_stderr")?;
        let se = self.covariance.stderr.as_ref();
        for p in 0..self.mean.len() {
            writeln!(
                w,
                "{p},{:e},{:e},{:e},{:e}",
                self.mean[p],
                self.mean_stderr[p],
                self.covariance.values[(p, p)],
                se.map_or(0.0, |s| s[(p, p)])
            )?;
        }
        Ok(())
    }
}

fn second_moment(ensemble: &SampleEnsemble) -> CorrelationTensor {
    let d = ensemble.dim();
    let n = ensemble.len() as f64;
    let mut values = DMatrix::zeros(d, d);
    let mut stderr = DMatrix::zeros(d, d);
    for p in 0..d {
        for q in p..d {
            let terms: Vec<f64> = ensemble.payloads.iter().map(|s| s[p] * s[q]).collect();
            let mean = pairwise_sum(&terms) / n;
            let sq: Vec<f64> = terms.iter().map(|t| (t - mean).powi(2)).collect();
            let se = (pairwise_sum(&sq) / (n - 1.0) / n).sqrt();
            values[(p, q)] = mean;
            values[(q, p)] = mean;
            stderr[(p, q)] = se;
            stderr[(q, p)] = se;
        }
    }
    CorrelationTensor { values, stderr: Some(stderr) }
}

/// Reference problem on the unperturbed mesh, as consumed by the Monte Carlo
/// driver.
#[derive(Clone, Copy)]
pub struct ReferenceProblem<'a> {
    pub disc: &'a Discretization<2>,
    pub data: &'a SourceData<2>,
    pub u0: &'a SpaceTimeField<2>,
    pub scheme: TimeScheme,
}

impl std::fmt::Debug for ReferenceProblem<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ReferenceProblem").field("scheme", &self.scheme).finish_non_exhaustive()
    }
}

/// Monte Carlo settings for perturbed-domain solves.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McSettings {
    pub epsilon: f64,
    pub n_samples: usize,
    pub base_seed: u64,
    /// Collar width of the induced velocity field.
    pub collar_width: f64,
    /// Lower bound required for `γ(ε', ·)` along `ε' ∈ [0, ε]`.
    pub gamma_floor: f64,
}

/// Probe values (space-time) of `u^ε∘T^ε − u⁰` for `n_samples` draws of
/// `κ`, seeds `base_seed, base_seed + 1, ...`.
pub fn mc_perturbed_samples(
    problem: ReferenceProblem<'_>,
    model: &KappaModel<2>,
    settings: McSettings,
    probes: &[(f64, Point<2>)],
) -> Result<SampleEnsemble> {
    let time = problem.u0.time;
    let locator = Locator::new(problem.disc.mesh().clone());
    let located: Vec<(usize, PointLocation<2>)> = probes
        .iter()
        .map(|(t, x)| Ok((time_index(time.dt(), time.steps, *t)?, locator.locate(x)?)))
        .collect::<Result<_>>()?;
    let probe = |field: &SpaceTimeField<2>| -> Vec<f64> {
        located.iter().map(|(j, loc)| loc.interpolate(&field.snapshots[*j])).collect()
    };
    let reference = probe(problem.u0);
    let results: Vec<Result<Vec<f64>>> = (0..settings.n_samples as u64)
        .into_par_iter()
        .map(|i| {
            let seed = settings.base_seed + i;
            let tag = |e: Error| Error::Sample { seed, source: Box::new(e) };
            let kappa = model.sample(seed);
            let velocity = velocity_from_kappa(&kappa.expansion, Some(settings.collar_width)).map_err(tag)?;
            if settings.epsilon > 0.0 {
                let admissible = epsilon_admissible(&velocity, settings.gamma_floor, 48).map_err(tag)?;
                if settings.epsilon > admissible {
                    return Err(tag(Error::invalid(format!(
                        "epsilon {} exceeds the admissible {admissible}",
                        settings.epsilon
                    ))));
                }
            }
            let map = PerturbationMap::new(Arc::new(velocity), settings.epsilon);
            let u = solve_pulled_back(problem.disc, time, problem.data, &map, problem.scheme).map_err(tag)?;
            Ok(probe(&u).iter().zip(&reference).map(|(a, b)| a - b).collect())
        })
        .collect();
    let mut ensemble = SampleEnsemble::new(PayloadKind::ProbeValues);
    for (i, r) in results.into_iter().enumerate() {
        ensemble.push(settings.base_seed + i as u64, r?)?;
    }
    Ok(ensemble)
}

/// Mean and correlation of `u^ε∘T^ε − u⁰` at the probes.
pub fn mc_perturbed_statistics(
    problem: ReferenceProblem<'_>,
    model: &KappaModel<2>,
    settings: McSettings,
    probes: &[(f64, Point<2>)],
) -> Result<ProbeStatistics> {
    ProbeStatistics::from_ensemble(&mc_perturbed_samples(problem, model, settings, probes)?)
}

fn time_index(dt: f64, steps: usize, t: f64) -> Result<usize> {
    let j = (t / dt).round();
    if !(0.0..=steps as f64).contains(&j) || (j * dt - t).abs() > 1e-9 * dt.max(t) {
        return Err(Error::invalid(format!("probe time {t} is not a node of the time grid")));
    }
    Ok(j as usize)
}

/// Boundary side of the moment problem: the single layer operator, the
/// reference flux `∂ₙu⁰` per (interval, element), and the potential matrix
/// mapping densities to probe values.
pub struct BoundaryMomentProblem<'a> {
    pub mesh: &'a BoundaryMesh<2>,
    pub single_layer: &'a CausalOperator,
    pub flux: &'a BoundaryDensity,
    pub probe_matrix: &'a DMatrix<f64>,
}

impl std::fmt::Debug for BoundaryMomentProblem<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BoundaryMomentProblem")
            .field("elements", &self.mesh.n_elements())
            .field("intervals", &self.flux.n_intervals())
            .finish_non_exhaustive()
    }
}

impl BoundaryMomentProblem<'_> {
    fn check(&self) -> Result<()> {
        let e = self.mesh.n_elements();
        let n = self.flux.n_intervals();
        if self.flux.n_elements() != e || self.single_layer.n_elements() != e {
            return Err(Error::shape(e, self.flux.n_elements()));
        }
        if self.probe_matrix.ncols() != n * e {
            return Err(Error::shape(n * e, self.probe_matrix.ncols()));
        }
        Ok(())
    }

    /// Element midpoints, where `κ` is sampled.
    pub fn midpoints(&self) -> Vec<Point<2>> {
        self.mesh.elements().iter().map(|e| e.centroid).collect()
    }

    /// Tested load `⟨−κ ∂ₙu⁰, χ⟩` for each column of element values of `κ`.
    fn loads(&self, kappa_columns: &DMatrix<f64>) -> DMatrix<f64> {
        let e = self.mesh.n_elements();
        let n = self.flux.n_intervals();
        let dt = self.single_layer.dt();
        let measures = self.single_layer.element_measures();
        DMatrix::from_fn(n * e, kappa_columns.ncols(), |row, c| {
            let el = row % e;
            -kappa_columns[(el, c)] * self.flux.values()[row] * measures[el] * dt
        })
    }
}

/// `Cor[ψ]` and `Cor[u']` at the probes.
#[derive(Debug, Clone)]
pub struct FirstKindCorrelation {
    pub psi: CorrelationTensor,
    pub uprime: CorrelationTensor,
}

/// Solves `(𝒱⊗𝒱) Cor[ψ] = Cor[κ] ⊗ (∂ₙu⁰ ⊗ ∂ₙu⁰)` with `kappa_cov` the
/// covariance of `κ` between element midpoints. Two sweeps of forward
/// substitution: `𝒱X = R` column-wise, then `𝒱Y = Xᵀ`.
pub fn correlation_first_kind(problem: &BoundaryMomentProblem<'_>, kappa_cov: &DMatrix<f64>) -> Result<FirstKindCorrelation> {
    problem.check()?;
    let e = problem.mesh.n_elements();
    if kappa_cov.shape() != (e, e) {
        return Err(Error::shape(format!("{e} x {e}"), format!("{} x {}", kappa_cov.nrows(), kappa_cov.ncols())));
    }
    let n = problem.flux.n_intervals();
    let solver = MotSolver::new(problem.single_layer, SolveKind::First)?;
    // tested data b = D κ with D = −diag(flux · mass), so Cor[b] = D Cor[κ] Dᵀ
    let dt = problem.single_layer.dt();
    let measures = problem.single_layer.element_measures();
    let d: Vec<f64> = (0..n * e).map(|row| -problem.flux.values()[row] * measures[row % e] * dt).collect();
    let r = DMatrix::from_fn(n * e, n * e, |p, q| d[p] * kappa_cov[(p % e, q % e)] * d[q]);
    let x = solver.solve_columns(&r)?;
    let y = solver.solve_columns(&x.transpose())?;
    let y = (&y + y.transpose()).scale(0.5);
    let p = problem.probe_matrix;
    let uprime = p * &y * p.transpose();
    Ok(FirstKindCorrelation { psi: CorrelationTensor::new(y), uprime: CorrelationTensor::new(uprime) })
}

/// Low-rank route for a finite mode series: `Cor[κ] = L Lᵀ` with `L` the
/// `E × r` matrix of scaled modes at the element midpoints, so that
/// `Cor[ψ] = Ψ Ψᵀ` with `Ψ = 𝒱⁻¹ b(L)` from `r` single solves.
#[derive(Debug, Clone)]
pub struct LowRankCorrelation {
    /// Columns are the flattened densities `ψ_m`.
    pub psi_factor: DMatrix<f64>,
    /// Columns are `u'_m` at the probes.
    pub uprime_factor: DMatrix<f64>,
}

impl LowRankCorrelation {
    pub fn psi(&self) -> CorrelationTensor {
        CorrelationTensor::new(&self.psi_factor * self.psi_factor.transpose())
    }

    pub fn uprime(&self) -> CorrelationTensor {
        CorrelationTensor::new(&self.uprime_factor * self.uprime_factor.transpose())
    }
}

pub fn correlation_first_kind_low_rank(problem: &BoundaryMomentProblem<'_>, factor: &DMatrix<f64>) -> Result<LowRankCorrelation> {
    problem.check()?;
    if factor.nrows() != problem.mesh.n_elements() {
        return Err(Error::shape(problem.mesh.n_elements(), factor.nrows()));
    }
    let solver = MotSolver::new(problem.single_layer, SolveKind::First)?;
    let psi_factor = solver.solve_columns(&problem.loads(factor))?;
    let uprime_factor = problem.probe_matrix * &psi_factor;
    Ok(LowRankCorrelation { psi_factor, uprime_factor })
}

/// `u'` at the probes for `n_samples` draws of `κ`, each from one first-kind
/// boundary solve. Samples are solved in batches sharing the factorisation.
pub fn mc_linear_samples(
    problem: &BoundaryMomentProblem<'_>,
    model: &KappaModel<2>,
    n_samples: usize,
    base_seed: u64,
) -> Result<SampleEnsemble> {
    problem.check()?;
    let solver = MotSolver::new(problem.single_layer, SolveKind::First)?;
    let mids = problem.midpoints();
    let e = mids.len();
    const BATCH: usize = 256;
    let batches: Vec<Result<Vec<Vec<f64>>>> = (0..n_samples)
        .step_by(BATCH)
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|start| {
            let count = BATCH.min(n_samples - start);
            let mut kappa = DMatrix::zeros(e, count);
            for c in 0..count {
                let sample = model.sample(base_seed + (start + c) as u64);
                for (i, x) in mids.iter().enumerate() {
                    kappa[(i, c)] = sample.eval(x);
                }
            }
            let psi = solver.solve_columns(&problem.loads(&kappa))?;
            let u = problem.probe_matrix * psi;
            Ok((0..count).map(|c| u.column(c).iter().copied().collect()).collect())
        })
        .collect();
    let mut ensemble = SampleEnsemble::new(PayloadKind::ProbeValues);
    let mut seed = base_seed;
    for batch in batches {
        for payload in batch? {
            ensemble.push(seed, payload)?;
            seed += 1;
        }
    }
    Ok(ensemble)
}

/// First-order model `ε² Cor[u']` of the covariance of `u^ε`.
pub fn covariance_estimate(correlation_of_uprime: &CorrelationTensor, epsilon: f64) -> CorrelationTensor {
    correlation_of_uprime.scaled(epsilon * epsilon)
}
