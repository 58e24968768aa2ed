//! Run configuration. Every section and key is optional; omitted values take
//! the defaults below, which reproduce the unit-disk benchmark.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use shapeuq::bem::Representation;
use shapeuq::fem::{FluxRecovery, TimeScheme};
use shapeuq::geometry::Point;
use shapeuq::random_boundary::{BoundaryMode, CoefficientLaw, KappaMode, KappaModel, ModeExpansion};

/// Environment variable that replaces `run.output_dir`.
pub const OUTPUT_DIR_ENV: &str = "SHAPEUQ_OUTPUT_DIR";

/// A configuration problem, reported with the dotted path of the key.
#[derive(Debug, Clone)]
pub struct ConfigError {
    pub path: String,
    pub message: String,
}

impl ConfigError {
    pub fn new(path: impl Into<String>, message: impl Into<String>) -> Self {
        Self { path: path.into(), message: message.into() }
    }
}

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.path.is_empty() {
            write!(f, "config: {}", self.message)
        } else {
            write!(f, "config: {}: {}", self.path, self.message)
        }
    }
}

impl std::error::Error for ConfigError {}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub geometry: GeometryConfig,
    pub time: TimeConfig,
    pub data: DataConfig,
    pub velocity: VelocityConfig,
    pub random: RandomConfig,
    pub epsilon: EpsilonConfig,
    pub sampling: SamplingConfig,
    pub bem: BemConfig,
    pub probes: ProbeConfig,
    pub energy: EnergyConfig,
    pub run: RunSection,
    pub tolerances: Tolerances,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GeometryPreset {
    /// Unit disk, meshed with `rings` concentric rings.
    Disk,
    /// Unit square with `resolution` cells per side.
    Square,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeometryConfig {
    pub preset: GeometryPreset,
    pub rings: usize,
    pub resolution: usize,
}

impl Default for GeometryConfig {
    fn default() -> Self {
        Self { preset: GeometryPreset::Disk, rings: 16, resolution: 16 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TimeConfig {
    pub t_final: f64,
    pub steps: usize,
    pub scheme: TimeScheme,
}

impl Default for TimeConfig {
    fn default() -> Self {
        Self { t_final: 1.0, steps: 64, scheme: TimeScheme::CrankNicolson }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataPreset {
    /// `f = 10t(1 + x₁/2)`, `g` a smooth bump of radius 0.75.
    Benchmark,
    Zero,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub preset: DataPreset,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { preset: DataPreset::Benchmark }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Basis {
    Constant,
    Cos,
    Sin,
}

impl Basis {
    fn mode(self, order: u32) -> BoundaryMode {
        match self {
            Basis::Constant => BoundaryMode::Constant,
            Basis::Cos => BoundaryMode::Cos(order),
            Basis::Sin => BoundaryMode::Sin(order),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModeSpec {
    pub basis: Basis,
    #[serde(default)]
    pub order: u32,
    pub coefficient: f64,
}

/// Deterministic normal perturbation `κ`, extended into the domain over a
/// collar of the given width.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VelocityConfig {
    pub modes: Vec<ModeSpec>,
    pub collar_width: f64,
}

impl Default for VelocityConfig {
    fn default() -> Self {
        Self {
            modes: vec![
                ModeSpec { basis: Basis::Cos, order: 1, coefficient: 1.0 },
                ModeSpec { basis: Basis::Sin, order: 2, coefficient: 0.5 },
            ],
            collar_width: 0.2,
        }
    }
}

impl VelocityConfig {
    pub fn kappa(&self) -> ModeExpansion<2> {
        let terms: Vec<_> = self.modes.iter().map(|m| (m.basis.mode(m.order), m.coefficient)).collect();
        ModeExpansion::new(shapeuq::benchmark::unit_circle(), &terms)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Law {
    /// Uniform on `[−scale, scale]`.
    Uniform,
    /// Normal with deviation `scale`, truncated at five deviations.
    Gaussian,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RandomModeSpec {
    pub basis: Basis,
    #[serde(default)]
    pub order: u32,
    pub law: Law,
    pub scale: f64,
}

/// Random `κ` as a finite series with independent centred coefficients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RandomConfig {
    pub modes: Vec<RandomModeSpec>,
    pub amplitude_cap: f64,
}

impl Default for RandomConfig {
    fn default() -> Self {
        Self {
            modes: vec![
                RandomModeSpec { basis: Basis::Cos, order: 1, law: Law::Uniform, scale: 1.0 },
                RandomModeSpec { basis: Basis::Sin, order: 2, law: Law::Uniform, scale: 0.5 },
            ],
            amplitude_cap: 1.5,
        }
    }
}

impl RandomConfig {
    pub fn model(&self) -> shapeuq::Result<KappaModel<2>> {
        let modes = self
            .modes
            .iter()
            .map(|m| KappaMode {
                basis: m.basis.mode(m.order),
                law: match m.law {
                    Law::Uniform => CoefficientLaw::Uniform { half_width: m.scale },
                    Law::Gaussian => CoefficientLaw::TruncatedGaussian { sigma: m.scale },
                },
            })
            .collect();
        KappaModel::new(shapeuq::benchmark::unit_circle(), modes, self.amplitude_cap)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EpsilonConfig {
    /// Perturbation size of single-ε runs and of the Monte Carlo samples.
    pub value: f64,
    /// Grid of the derivative studies.
    pub grid: Vec<f64>,
    /// Grid of the kinematic studies.
    pub kinematics_grid: Vec<f64>,
    /// Radius of the compact subset in the shape-derivative study.
    pub compact_radius: f64,
}

impl Default for EpsilonConfig {
    fn default() -> Self {
        Self {
            value: 0.02,
            grid: vec![0.1, 0.05, 0.025, 0.0125],
            kinematics_grid: vec![1e-1, 1e-2, 1e-3, 1e-4],
            compact_radius: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplingConfig {
    pub seed: u64,
    /// Draws of `κ` for the boundary Monte Carlo.
    pub linear_samples: usize,
    /// Perturbed-domain FEM solves.
    pub fem_samples: usize,
    /// Lower bound for `γ` along `[0, ε]` in every FEM sample.
    pub gamma_floor: f64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self { seed: 1000, linear_samples: 10_000, fem_samples: 200, gamma_floor: 0.5 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorrelationRoute {
    /// Two sweeps of the tensorised solve on the full correlation.
    Dense,
    /// One solve per mode of the finite κ series.
    LowRank,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BemConfig {
    pub elements: usize,
    pub steps: usize,
    pub representation: Representation,
    pub correlation: CorrelationRoute,
}

impl Default for BemConfig {
    fn default() -> Self {
        Self {
            elements: 64,
            steps: 64,
            representation: Representation::SingleLayer,
            correlation: CorrelationRoute::Dense,
        }
    }
}

/// Space-time probes as `[t, x, y]`; the benchmark probes when empty.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub points: Vec<[f64; 3]>,
}

impl ProbeConfig {
    pub fn resolve(&self) -> Vec<(f64, Point<2>)> {
        if self.points.is_empty() {
            shapeuq::benchmark::default_probes()
        } else {
            self.points.iter().map(|p| (p[0], Point::<2>::new(p[1], p[2]))).collect()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnergyConfig {
    pub data_sets: usize,
    pub t_finals: Vec<f64>,
    pub rings: usize,
    pub steps_per_unit: usize,
}

impl Default for EnergyConfig {
    fn default() -> Self {
        Self { data_sets: 50, t_finals: vec![1.0, 2.0, 4.0], rings: 8, steps_per_unit: 16 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub output_dir: PathBuf,
    /// Worker threads; 0 uses one per logical core.
    pub threads: usize,
    pub flux_recovery: FluxRecovery,
    /// Also write legacy VTK snapshots of solved fields.
    pub vtk: bool,
}

impl Default for RunSection {
    fn default() -> Self {
        Self { output_dir: PathBuf::from("shapeuq-out"), threads: 0, flux_recovery: FluxRecovery::Variational, vtk: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Tolerances {
    pub kinematics_band: [f64; 2],
    pub a_prime: f64,
    pub identity: f64,
    pub compact_floor_factor: f64,
    pub crosscheck: f64,
    pub round_trip: f64,
    pub mc_relative: f64,
    pub mc_sigmas: f64,
    pub psd_floor: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            kinematics_band: [0.9, 1.1],
            a_prime: 1e-4,
            identity: 0.02,
            compact_floor_factor: 3.0,
            crosscheck: 0.05,
            round_trip: 1e-10,
            mc_relative: 0.1,
            mc_sigmas: 3.0,
            psd_floor: 1e-10,
        }
    }
}

fn parse_value(raw: &str) -> toml::Value {
    // bare words are strings, everything else is parsed as a TOML value
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Sets `key.path = value` in a TOML tree, creating tables on the way.
fn apply_override(root: &mut toml::Table, assignment: &str) -> Result<(), ConfigError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| ConfigError::new("", format!("override `{assignment}` is not of the form key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(ConfigError::new(key.trim(), "empty key segment"));
    }
    let mut table = root;
    for part in &parts[..parts.len() - 1] {
        let entry = table.entry(part.to_string()).or_insert_with(|| toml::Value::Table(Default::default()));
        table = entry.as_table_mut().ok_or_else(|| ConfigError::new(key.trim(), format!("`{part}` is not a table")))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}

impl RunConfig {
    /// Parses TOML text with overrides applied on top, then validates.
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self, ConfigError> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| ConfigError::new("", e.message().to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let config: RunConfig = serde_path_to_error::deserialize(toml::Value::Table(table)).map_err(|e| {
            let path = e.path().to_string();
            ConfigError::new(if path == "." { String::new() } else { path }, e.into_inner().message().lines().next().unwrap_or_default().to_string())
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, ConfigError> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p)
                .map_err(|e| ConfigError::new("", format!("cannot read {}: {e}", p.display())))?,
            None => String::new(),
        };
        Self::from_toml(&text, overrides)
    }

    /// Output directory, with the environment override applied.
    pub fn output_dir(&self) -> PathBuf {
        std::env::var_os(OUTPUT_DIR_ENV).map(PathBuf::from).unwrap_or_else(|| self.run.output_dir.clone())
    }

    /// The boundary time grid must coarsen the FEM grid by an integer factor.
    pub fn validate_bem(&self) -> Result<(), ConfigError> {
        if !self.time.steps.is_multiple_of(self.bem.steps) {
            return Err(ConfigError::new("bem.steps", "must divide time.steps"));
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let positive = |path: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(ConfigError::new(path, format!("must be positive and finite, got {v}")))
            }
        };
        let at_least = |path: &str, v: usize, min: usize| {
            if v >= min {
                Ok(())
            } else {
                Err(ConfigError::new(path, format!("must be at least {min}, got {v}")))
            }
        };
        let decreasing = |path: &str, grid: &[f64]| {
            if grid.len() < 3 {
                return Err(ConfigError::new(path, "needs at least 3 values"));
            }
            if grid.iter().any(|e| !(*e > 0.0 && e.is_finite())) || grid.windows(2).any(|w| w[1] >= w[0]) {
                return Err(ConfigError::new(path, "must be positive and strictly decreasing"));
            }
            Ok(())
        };
        at_least("geometry.rings", self.geometry.rings, 1)?;
        at_least("geometry.resolution", self.geometry.resolution, 1)?;
        positive("time.t_final", self.time.t_final)?;
        at_least("time.steps", self.time.steps, 1)?;
        positive("velocity.collar_width", self.velocity.collar_width)?;
        for (i, m) in self.velocity.modes.iter().enumerate() {
            if !m.coefficient.is_finite() {
                return Err(ConfigError::new(format!("velocity.modes[{i}].coefficient"), "must be finite"));
            }
        }
        for (i, m) in self.random.modes.iter().enumerate() {
            if !(m.scale >= 0.0 && m.scale.is_finite()) {
                return Err(ConfigError::new(format!("random.modes[{i}].scale"), "must be non-negative"));
            }
        }
        positive("random.amplitude_cap", self.random.amplitude_cap)?;
        positive("epsilon.value", self.epsilon.value)?;
        decreasing("epsilon.grid", &self.epsilon.grid)?;
        decreasing("epsilon.kinematics_grid", &self.epsilon.kinematics_grid)?;
        positive("epsilon.compact_radius", self.epsilon.compact_radius)?;
        at_least("sampling.linear_samples", self.sampling.linear_samples, 2)?;
        at_least("sampling.fem_samples", self.sampling.fem_samples, 2)?;
        if !(self.sampling.gamma_floor > 0.0 && self.sampling.gamma_floor < 1.0) {
            return Err(ConfigError::new("sampling.gamma_floor", "must lie in (0, 1)"));
        }
        at_least("bem.elements", self.bem.elements, 3)?;
        at_least("bem.steps", self.bem.steps, 1)?;
        let dt = self.time.t_final / self.time.steps as f64;
        for (i, p) in self.probes.points.iter().enumerate() {
            let path = format!("probes.points[{i}]");
            if !(p[0] > 0.0 && p[0] <= self.time.t_final) {
                return Err(ConfigError::new(path, "probe time must lie in (0, t_final]"));
            }
            if ((p[0] / dt).round() * dt - p[0]).abs() > 1e-9 * self.time.t_final {
                return Err(ConfigError::new(path, "probe time must be a node of the time grid"));
            }
            if p[1].hypot(p[2]) >= 1.0 {
                return Err(ConfigError::new(path, "probe must lie inside the unit disk"));
            }
        }
        at_least("energy.data_sets", self.energy.data_sets, 1)?;
        at_least("energy.rings", self.energy.rings, 1)?;
        at_least("energy.steps_per_unit", self.energy.steps_per_unit, 1)?;
        if self.energy.t_finals.is_empty() {
            return Err(ConfigError::new("energy.t_finals", "needs at least one final time"));
        }
        for (i, t) in self.energy.t_finals.iter().enumerate() {
            positive(&format!("energy.t_finals[{i}]"), *t)?;
        }
        let [lo, hi] = self.tolerances.kinematics_band;
        if !(lo < hi) {
            return Err(ConfigError::new("tolerances.kinematics_band", "lower bound must be below the upper bound"));
        }
        for (path, v) in [
            ("tolerances.a_prime", self.tolerances.a_prime),
            ("tolerances.identity", self.tolerances.identity),
            ("tolerances.compact_floor_factor", self.tolerances.compact_floor_factor),
            ("tolerances.crosscheck", self.tolerances.crosscheck),
            ("tolerances.round_trip", self.tolerances.round_trip),
            ("tolerances.mc_relative", self.tolerances.mc_relative),
            ("tolerances.mc_sigmas", self.tolerances.mc_sigmas),
            ("tolerances.psd_floor", self.tolerances.psd_floor),
        ] {
            positive(path, v)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_gives_defaults() {
        assert_eq!(RunConfig::from_toml("", &[]).unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected_with_their_path() {
        let err = RunConfig::from_toml("[time]\nstep = 3\n", &[]).unwrap_err();
        assert!(err.to_string().contains("unknown field"), "{err}");
        assert_eq!(err.path, "time.step");
    }

    #[test]
    fn negative_steps_report_the_field() {
        let err = RunConfig::from_toml("[time]\nsteps = -4\n", &[]).unwrap_err();
        assert_eq!(err.path, "time.steps");
    }

    #[test]
    fn overrides_replace_values() {
        let c = RunConfig::from_toml("[time]\nsteps = 32\n", &["time.steps=16".into(), "bem.steps=16".into()]).unwrap();
        assert_eq!(c.time.steps, 16);
        let c = RunConfig::from_toml("", &["run.flux_recovery=element-average".into()]).unwrap();
        assert_eq!(c.run.flux_recovery, FluxRecovery::ElementAverage);
        assert!(RunConfig::from_toml("", &["nonsense".into()]).is_err());
    }

    #[test]
    fn probes_must_sit_on_time_nodes() {
        let err = RunConfig::from_toml("[probes]\npoints = [[0.501, 0.1, 0.1]]\n", &[]).unwrap_err();
        assert_eq!(err.path, "probes.points[0]");
    }

    #[test]
    fn defaults_round_trip_through_toml() {
        let text = toml::to_string(&RunConfig::default()).unwrap();
        assert_eq!(RunConfig::from_toml(&text, &[]).unwrap(), RunConfig::default());
    }
}
