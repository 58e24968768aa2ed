//! P1 finite elements for the heat equation on the reference domain, with
//! Crank–Nicolson or implicit Euler time stepping.

mod assembly;
mod export;
mod locate;
mod mesh;
mod norms;
mod solve;

use std::sync::Arc;

pub use assembly::Discretization;
pub use export::{write_field_csv, write_vtk};
pub use locate::{Locator, PointLocation};
pub use mesh::Mesh;
pub use norms::{compute_norm, h1_norm_on_subset, l2l2_error, poincare_constant, time_derivative_dual_norm, NormMode};
pub(crate) use solve::{derivative_matrices, march_with_forcing};
pub use solve::{
    boundary_flux, pullback_field, solve_heat_dirichlet, solve_pulled_back, FluxRecovery, ThetaStepper, TimeScheme,
};

use crate::error::{Error, Result};
use crate::geometry::Point;

/// Uniform grid `t_j = jT/N`, `j = 0..=N`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    pub t_final: f64,
    pub steps: usize,
}

impl TimeGrid {
    pub fn new(t_final: f64, steps: usize) -> Result<Self> {
        if !(t_final > 0.0 && t_final.is_finite()) || steps == 0 {
            return Err(Error::invalid(format!("time grid needs T > 0 and N >= 1, got T = {t_final}, N = {steps}")));
        }
        Ok(Self { t_final, steps })
    }

    pub fn dt(&self) -> f64 {
        self.t_final / self.steps as f64
    }

    pub fn node(&self, j: usize) -> f64 {
        self.t_final * j as f64 / self.steps as f64
    }

    pub fn n_nodes(&self) -> usize {
        self.steps + 1
    }

    /// Trapezoid weights for integrals over `(0, T)`.
    pub fn trapezoid_weights(&self) -> Vec<f64> {
        let dt = self.dt();
        (0..=self.steps).map(|j| if j == 0 || j == self.steps { 0.5 * dt } else { dt }).collect()
    }
}

/// Nodal P1 coefficients on a mesh at every node of a time grid.
#[derive(Debug, Clone)]
pub struct SpaceTimeField<const D: usize> {
    pub mesh: Arc<Mesh<D>>,
    pub time: TimeGrid,
    pub snapshots: Vec<Vec<f64>>,
}

impl<const D: usize> SpaceTimeField<D> {
    pub fn zeros(mesh: Arc<Mesh<D>>, time: TimeGrid) -> Self {
        let n = mesh.n_vertices();
        Self { mesh, time, snapshots: vec![vec![0.0; n]; time.n_nodes()] }
    }

    pub fn from_snapshots(mesh: Arc<Mesh<D>>, time: TimeGrid, snapshots: Vec<Vec<f64>>) -> Result<Self> {
        if snapshots.len() != time.n_nodes() {
            return Err(Error::shape(time.n_nodes(), snapshots.len()));
        }
        if let Some(s) = snapshots.iter().find(|s| s.len() != mesh.n_vertices()) {
            return Err(Error::shape(mesh.n_vertices(), s.len()));
        }
        Ok(Self { mesh, time, snapshots })
    }

    fn check_compatible(&self, other: &Self) -> Result<()> {
        if !Arc::ptr_eq(&self.mesh, &other.mesh) && self.mesh.n_vertices() != other.mesh.n_vertices() {
            return Err(Error::shape(self.mesh.n_vertices(), other.mesh.n_vertices()));
        }
        if self.time != other.time {
            return Err(Error::invalid("fields live on different time grids"));
        }
        Ok(())
    }

    /// `a · self + b · other`.
    pub fn combine(&self, a: f64, other: &Self, b: f64) -> Result<Self> {
        self.check_compatible(other)?;
        let snapshots = self
            .snapshots
            .iter()
            .zip(&other.snapshots)
            .map(|(x, y)| x.iter().zip(y).map(|(p, q)| a * p + b * q).collect())
            .collect();
        Ok(Self { mesh: self.mesh.clone(), time: self.time, snapshots })
    }

    pub fn scaled(&self, a: f64) -> Self {
        let snapshots = self.snapshots.iter().map(|s| s.iter().map(|v| a * v).collect()).collect();
        Self { mesh: self.mesh.clone(), time: self.time, snapshots }
    }

    pub fn max_abs(&self) -> f64 {
        self.snapshots.iter().flatten().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Values at a located point, one per time node.
    pub fn probe(&self, at: &PointLocation<D>) -> Vec<f64> {
        self.snapshots.iter().map(|s| at.interpolate(s)).collect()
    }
}

pub type SpaceTimeFn<const D: usize> = Arc<dyn Fn(f64, &Point<D>) -> f64 + Send + Sync>;
pub type SpatialFn<const D: usize> = Arc<dyn Fn(&Point<D>) -> f64 + Send + Sync>;
pub type GradientFn<const D: usize> = Arc<dyn Fn(&Point<D>) -> Point<D> + Send + Sync>;

/// Globally defined source `f(t, x)`, initial datum `g(x)` and optional
/// Dirichlet data (homogeneous when absent).
#[derive(Clone)]
pub struct SourceData<const D: usize> {
    pub f: SpaceTimeFn<D>,
    pub g: SpatialFn<D>,
    /// Analytic `∇g`; central differences are used when absent.
    pub g_gradient: Option<GradientFn<D>>,
    pub dirichlet: Option<SpaceTimeFn<D>>,
}

impl<const D: usize> std::fmt::Debug for SourceData<D> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SourceData")
            .field("g_gradient", &self.g_gradient.is_some())
            .field("dirichlet", &self.dirichlet.is_some())
            .finish_non_exhaustive()
    }
}

impl<const D: usize> SourceData<D> {
    pub fn new(
        f: impl Fn(f64, &Point<D>) -> f64 + Send + Sync + 'static,
        g: impl Fn(&Point<D>) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Self { f: Arc::new(f), g: Arc::new(g), g_gradient: None, dirichlet: None }
    }

    pub fn zero() -> Self {
        Self::new(|_, _| 0.0, |_| 0.0)
    }

    pub fn with_g_gradient(mut self, grad: impl Fn(&Point<D>) -> Point<D> + Send + Sync + 'static) -> Self {
        self.g_gradient = Some(Arc::new(grad));
        self
    }

    pub fn with_dirichlet(mut self, h: impl Fn(f64, &Point<D>) -> f64 + Send + Sync + 'static) -> Self {
        self.dirichlet = Some(Arc::new(h));
        self
    }

    pub fn dirichlet_value(&self, t: f64, x: &Point<D>) -> f64 {
        self.dirichlet.as_ref().map_or(0.0, |h| h(t, x))
    }

    pub fn g_grad(&self, x: &Point<D>) -> Point<D> {
        if let Some(gg) = &self.g_gradient {
            return gg(x);
        }
        let h = 1e-5 * (1.0 + x.amax());
        Point::from_fn(|i, _| {
            let mut e = Point::<D>::zeros();
            e[i] = h;
            ((self.g)(&(x + e)) - (self.g)(&(x - e))) / (2.0 * h)
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn time_grid_nodes() {
        let t = TimeGrid::new(2.0, 8).unwrap();
        assert_eq!(t.dt(), 0.25);
        assert_eq!(t.node(8), 2.0);
        assert!((t.trapezoid_weights().iter().sum::<f64>() - 2.0).abs() < 1e-15);
        assert!(TimeGrid::new(0.0, 3).is_err());
        assert!(TimeGrid::new(1.0, 0).is_err());
    }

    #[test]
    fn finite_difference_gradient_of_g() {
        let d = SourceData::<2>::new(|_, _| 0.0, |x| x[0] * x[0] + 3.0 * x[1]);
        let g = d.g_grad(&Point::<2>::new(0.5, 0.2));
        assert!((g[0] - 1.0).abs() < 1e-9 && (g[1] - 3.0).abs() < 1e-9);
    }
}
