//! The unit-disk benchmark used by the verification harness, the acceptance
//! suite and the command-line presets.
//!
//! Data: `f = 10t(1 + x₁/2)`, `g = (1 − (r/0.75)²)³₊`, homogeneous Dirichlet
//! data on the unit circle, `T = 1`. The perturbation is `V = κ n` on the
//! circle, spread over a collar of width 0.2 so that `V` vanishes for
//! `r < 0.6`.

use std::sync::Arc;

use nalgebra::DMatrix;

use crate::bem::{assemble, single_layer_matrix, BoundaryDensity, BoundaryMesh, CausalOperator, OperatorKind};
use crate::error::Result;
use crate::fem::{
    boundary_flux, solve_heat_dirichlet, Discretization, FluxRecovery, Mesh, SourceData, SpaceTimeField, TimeGrid,
    TimeScheme,
};
use crate::geometry::Point;
use crate::kinematics::VelocityField;
use crate::moments::BoundaryMomentProblem;
use crate::random_boundary::{
    velocity_from_kappa, BoundaryMode, CoefficientLaw, CollarField, KappaMode, KappaModel, ModeExpansion,
    ReferenceBoundary,
};

pub const BUMP_RADIUS: f64 = 0.75;
pub const COLLAR_WIDTH: f64 = 0.2;

pub fn source_data() -> SourceData<2> {
    let bump = |x: &Point<2>| (1.0 - x.norm_squared() / (BUMP_RADIUS * BUMP_RADIUS)).max(0.0).powi(3);
    SourceData::new(|t, x| 10.0 * t * (1.0 + 0.5 * x[0]), bump).with_g_gradient(|x| {
        let s = 1.0 - x.norm_squared() / (BUMP_RADIUS * BUMP_RADIUS);
        if s <= 0.0 {
            Point::<2>::zeros()
        } else {
            x * (-6.0 * s * s / (BUMP_RADIUS * BUMP_RADIUS))
        }
    })
}

pub fn unit_circle() -> ReferenceBoundary<2> {
    ReferenceBoundary::unit()
}

/// `κ = cos θ + ½ sin 2θ`.
pub fn default_kappa() -> ModeExpansion<2> {
    ModeExpansion::new(unit_circle(), &[(BoundaryMode::Cos(1), 1.0), (BoundaryMode::Sin(2), 0.5)])
}

pub fn default_velocity() -> Result<CollarField<2>> {
    velocity_from_kappa(&default_kappa(), Some(COLLAR_WIDTH))
}

/// `κ = c₁ cos θ + c₂ sin 2θ` with `c₁ ~ U(−1, 1)`, `c₂ ~ U(−½, ½)`.
pub fn default_kappa_model() -> Result<KappaModel<2>> {
    KappaModel::new(
        unit_circle(),
        vec![
            KappaMode { basis: BoundaryMode::Cos(1), law: CoefficientLaw::Uniform { half_width: 1.0 } },
            KappaMode { basis: BoundaryMode::Sin(2), law: CoefficientLaw::Uniform { half_width: 0.5 } },
        ],
        1.5,
    )
}

/// Ten interior probes at radii 0.3 to 0.5 and times 0.5 and 1.
pub fn default_probes() -> Vec<(f64, Point<2>)> {
    let mut probes = Vec::with_capacity(10);
    for (k, t) in [0.5, 1.0].iter().enumerate() {
        for j in 0..5 {
            let angle = 2.0 * std::f64::consts::PI * (j as f64 + 0.5 * k as f64) / 5.0;
            let r = 0.3 + 0.05 * j as f64;
            probes.push((*t, Point::<2>::new(r * angle.cos(), r * angle.sin())));
        }
    }
    probes
}

/// Regular polygon with `n` vertices inscribed in the unit circle.
pub fn circle_boundary(n: usize) -> Result<BoundaryMesh<2>> {
    let pts = (0..n)
        .map(|k| {
            let a = 2.0 * std::f64::consts::PI * k as f64 / n as f64;
            Point::<2>::new(a.cos(), a.sin())
        })
        .collect();
    BoundaryMesh::polygon(pts)
}

/// Resolution of a disk run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiskBenchmark {
    pub rings: usize,
    pub steps: usize,
    pub t_final: f64,
    pub scheme: TimeScheme,
}

impl Default for DiskBenchmark {
    fn default() -> Self {
        Self { rings: 16, steps: 64, t_final: 1.0, scheme: TimeScheme::CrankNicolson }
    }
}

/// Reference solve on the disk together with the recovered boundary flux.
#[derive(Debug, Clone)]
pub struct ReferenceSolution {
    pub disc: Discretization<2>,
    pub time: TimeGrid,
    pub data: SourceData<2>,
    pub u0: SpaceTimeField<2>,
    pub scheme: TimeScheme,
}

impl DiskBenchmark {
    pub fn new(rings: usize, steps: usize) -> Self {
        Self { rings, steps, ..Self::default() }
    }

    pub fn time(&self) -> Result<TimeGrid> {
        TimeGrid::new(self.t_final, self.steps)
    }

    pub fn mesh(&self) -> Result<Arc<Mesh<2>>> {
        Ok(Arc::new(Mesh::disk(Point::<2>::zeros(), 1.0, self.rings)?))
    }

    pub fn solve_reference(&self) -> Result<ReferenceSolution> {
        let disc = Discretization::new(self.mesh()?)?;
        let time = self.time()?;
        let data = source_data();
        let u0 = solve_heat_dirichlet(&disc, time, &data, self.scheme)?;
        Ok(ReferenceSolution { disc, time, data, u0, scheme: self.scheme })
    }
}

impl ReferenceSolution {
    pub fn flux(&self, recovery: FluxRecovery) -> Result<Vec<Vec<f64>>> {
        boundary_flux(&self.disc, &self.u0, &self.data, recovery)
    }

    /// Interval/element averages of `∂ₙu⁰` on a boundary mesh whose time grid
    /// is coarser than (or equal to) the reference grid by an integer factor.
    pub fn flux_on(&self, mesh: &BoundaryMesh<2>, time: TimeGrid, recovery: FluxRecovery) -> Result<BoundaryDensity> {
        BoundaryDensity::sample_trace(mesh, time, self.disc.mesh(), self.time, &self.flux(recovery)?)
    }
}

/// Boundary side of the benchmark: a polygon, the assembled single layer
/// operator, the reference flux on it and the probe potential matrix.
#[derive(Debug, Clone)]
pub struct BoundarySetup {
    pub mesh: BoundaryMesh<2>,
    pub time: TimeGrid,
    pub single_layer: CausalOperator,
    pub flux: BoundaryDensity,
    pub probe_matrix: DMatrix<f64>,
}

impl BoundarySetup {
    pub fn new(
        reference: &ReferenceSolution,
        elements: usize,
        steps: usize,
        recovery: FluxRecovery,
        probes: &[(f64, Point<2>)],
    ) -> Result<Self> {
        let mesh = circle_boundary(elements)?;
        let time = TimeGrid::new(reference.time.t_final, steps)?;
        let flux = reference.flux_on(&mesh, time, recovery)?;
        let single_layer = assemble(&mesh, time, OperatorKind::SingleLayer)?;
        let probe_matrix = single_layer_matrix(&mesh, time, probes)?;
        Ok(Self { mesh, time, single_layer, flux, probe_matrix })
    }

    pub fn problem(&self) -> BoundaryMomentProblem<'_> {
        BoundaryMomentProblem {
            mesh: &self.mesh,
            single_layer: &self.single_layer,
            flux: &self.flux,
            probe_matrix: &self.probe_matrix,
        }
    }
}

/// Dirichlet data `−∂ₙu⁰ (V·n)` of the shape derivative on a boundary mesh,
/// with `V·n` taken at element midpoints.
pub fn shape_derivative_datum(
    mesh: &BoundaryMesh<2>,
    flux: &BoundaryDensity,
    velocity: &dyn VelocityField<2>,
) -> Result<BoundaryDensity> {
    let vn: Vec<f64> = mesh.elements().iter().map(|el| velocity.eval(&el.centroid).dot(&el.normal)).collect();
    let values = flux
        .values()
        .chunks(mesh.n_elements())
        .flat_map(|row| row.iter().zip(&vn).map(|(f, v)| -f * v))
        .collect();
    BoundaryDensity::from_values(flux.n_intervals(), flux.n_elements(), values)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn data_and_gradient_agree() {
        let d = source_data();
        let x = Point::<2>::new(0.3, -0.2);
        let fd = {
            let h = 1e-6;
            Point::<2>::new(
                ((d.g)(&(x + Point::<2>::new(h, 0.0))) - (d.g)(&(x - Point::<2>::new(h, 0.0)))) / (2.0 * h),
                ((d.g)(&(x + Point::<2>::new(0.0, h))) - (d.g)(&(x - Point::<2>::new(0.0, h)))) / (2.0 * h),
            )
        };
        assert!((d.g_gradient.as_ref().unwrap()(&x) - fd).norm() < 1e-8);
        assert_eq!((d.g)(&Point::<2>::new(0.8, 0.0)), 0.0);
    }

    #[test]
    fn velocity_vanishes_inside_the_collar() {
        let v = default_velocity().unwrap();
        assert_eq!(v.eval(&Point::<2>::new(0.55, 0.1)).norm(), 0.0);
        let on = v.eval(&Point::<2>::new(1.0, 0.0));
        assert!((on - Point::<2>::new(1.0, 0.0)).norm() < 1e-14);
        for (_, x) in default_probes() {
            assert!(x.norm() <= 0.5 + 1e-12);
        }
        assert_eq!(default_probes().len(), 10);
    }
}
