//! Material and shape derivatives of the heat-equation solution with respect
//! to the perturbation amplitude, on the reference mesh.
//!
//! The material derivative solves the ε-derivative of the pulled-back
//! discrete system at ε = 0, so it is consistent with [`solve_pulled_back`]
//! to machine precision: `(U^ε − U⁰)/ε − Z = O(ε)` exactly at the discrete
//! level.
//!
//! [`solve_pulled_back`]: crate::fem::solve_pulled_back

use crate::error::{Error, Result};
use crate::fem::{
    boundary_flux, derivative_matrices, march_with_forcing, Discretization, FluxRecovery, SourceData,
    SpaceTimeField, TimeScheme,
};
use crate::geometry::Point;
use crate::kinematics::VelocityField;
use crate::quadrature::GaussLegendre;
use crate::random_boundary::ModeExpansion;
use crate::sparse::SubmatrixCholesky;

/// Inputs shared by the sensitivity solves.
#[derive(Clone, Copy)]
pub struct SensitivityProblem<'a, const D: usize> {
    pub disc: &'a Discretization<D>,
    /// Reference solution on `disc`.
    pub u0: &'a SpaceTimeField<D>,
    pub velocity: &'a dyn VelocityField<D>,
    pub data: &'a SourceData<D>,
    pub scheme: TimeScheme,
}

impl<const D: usize> std::fmt::Debug for SensitivityProblem<'_, D> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SensitivityProblem").field("scheme", &self.scheme).finish_non_exhaustive()
    }
}

impl<const D: usize> SensitivityProblem<'_, D> {
    fn check(&self) -> Result<()> {
        if self.u0.mesh.n_vertices() != self.disc.mesh().n_vertices() {
            return Err(Error::shape(self.disc.mesh().n_vertices(), self.u0.mesh.n_vertices()));
        }
        if self.u0.time.steps < 1 || self.u0.snapshots.len() < 2 {
            return Err(Error::invalid("reference trajectory too short for a discrete time derivative"));
        }
        Ok(())
    }
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (p, q) in y.iter_mut().zip(x) {
        *p += a * q;
    }
}

/// Material derivative `z`: `z_t − Δz = −u⁰_t div V + div(A'(0)∇u⁰) +
/// div(fV)` in weak form, `z = ∇h·V` on the boundary (zero for homogeneous
/// Dirichlet data) and `z(0) = ∇g·V`.
pub fn material_derivative<const D: usize>(p: &SensitivityProblem<'_, D>) -> Result<SpaceTimeField<D>> {
    p.check()?;
    let disc = p.disc;
    let mesh = disc.mesh();
    let time = p.u0.time;
    let n = mesh.n_vertices();
    let (m_div, k_prime) = derivative_matrices(disc, p.velocity)?;
    let qp = disc.quadrature_points();
    let vq: Vec<Point<D>> = qp.iter().map(|x| p.velocity.eval(x)).collect();
    // G_j = −∫ f(t_j) V·∇φ
    let g: Vec<Vec<f64>> = (0..time.n_nodes())
        .map(|j| {
            let t = time.node(j);
            let s: Vec<Point<D>> = qp.iter().zip(&vq).map(|(x, v)| v * (-(p.data.f)(t, x))).collect();
            disc.gradient_load_from_samples(&s)
        })
        .collect();
    let u = &p.u0.snapshots;
    let forcing = |j: usize, st: &crate::fem::ThetaStepper| {
        let (dt, th) = (st.dt(), st.theta());
        let mut f = st.load_forcing(&g[j - 1], &g[j]);
        let du: Vec<f64> = u[j].iter().zip(&u[j - 1]).map(|(a, b)| a - b).collect();
        let mut tmp = vec![0.0; n];
        m_div.mul_vec_into(&du, &mut tmp);
        axpy(&mut f, -1.0, &tmp);
        let avg: Vec<f64> = u[j].iter().zip(&u[j - 1]).map(|(a, b)| th * a + (1.0 - th) * b).collect();
        k_prime.mul_vec_into(&avg, &mut tmp);
        axpy(&mut f, -dt, &tmp);
        f
    };
    let boundary_value = |t: f64, x: &Point<D>| -> f64 {
        match &p.data.dirichlet {
            None => 0.0,
            Some(h) => {
                let v = p.velocity.eval(x);
                let d = 1e-6;
                (h(t, &(x + v * d)) - h(t, &(x - v * d))) / (2.0 * d)
            }
        }
    };
    let boundary = |j: usize, z: &mut [f64]| {
        let t = time.node(j);
        for &i in disc.boundary() {
            z[i] = boundary_value(t, mesh.vertex(i));
        }
    };
    let mut z0: Vec<f64> = mesh.vertices().iter().map(|x| p.data.g_grad(x).dot(&p.velocity.eval(x))).collect();
    boundary(0, &mut z0);
    march_with_forcing(disc, time, p.scheme, forcing, boundary, z0)
}

/// Shape derivative `u'`: heat equation with zero source and initial datum
/// and Dirichlet datum `−∂ₙu⁰ (V·n)` from the recovered boundary flux.
pub fn shape_derivative<const D: usize>(p: &SensitivityProblem<'_, D>, recovery: FluxRecovery) -> Result<SpaceTimeField<D>> {
    p.check()?;
    if p.data.dirichlet.is_some() {
        return Err(Error::Unsupported(
            "shape derivative via boundary flux needs homogeneous Dirichlet data".into(),
        ));
    }
    let disc = p.disc;
    let mesh = disc.mesh();
    let flux = boundary_flux(disc, p.u0, p.data, recovery)?;
    let normals = mesh.vertex_normals();
    let vn: Vec<f64> = (0..mesh.n_vertices())
        .map(|i| if mesh.is_boundary_vertex(i) { p.velocity.eval(mesh.vertex(i)).dot(&normals[i]) } else { 0.0 })
        .collect();
    let n = mesh.n_vertices();
    let boundary = |j: usize, w: &mut [f64]| {
        for &i in disc.boundary() {
            w[i] = -flux[j][i] * vn[i];
        }
    };
    march_with_forcing(disc, p.u0.time, p.scheme, |_, _| vec![0.0; n], boundary, vec![0.0; n])
}

/// `z − Π(∇u⁰·V)` with `Π` the L² projection onto P1.
pub fn shape_from_material<const D: usize>(z: &SpaceTimeField<D>, p: &SensitivityProblem<'_, D>) -> Result<SpaceTimeField<D>> {
    p.check()?;
    let disc = p.disc;
    let mesh = disc.mesh();
    let nq = disc.n_qpoints_per_cell();
    let vq: Vec<Point<D>> = disc.quadrature_points().iter().map(|x| p.velocity.eval(x)).collect();
    let all: Vec<usize> = (0..mesh.n_vertices()).collect();
    let chol = SubmatrixCholesky::factor(disc.mass(), &all)?;
    let mut out = z.clone();
    for (snap, u) in out.snapshots.iter_mut().zip(&p.u0.snapshots) {
        let mut samples = Vec::with_capacity(vq.len());
        for c in 0..mesh.n_cells() {
            let grad = disc.cell_gradient(c, u);
            samples.extend(vq[c * nq..(c + 1) * nq].iter().map(|v| grad.dot(v)));
        }
        let proj = chol.solve_local(&disc.load_from_samples(&samples));
        axpy(snap, -1.0, &proj);
    }
    Ok(out)
}

/// Which domain functional is differentiated.
pub enum FunctionalKind<'a, const D: usize> {
    /// `J₁ = ∫_U v`, derivative `∫_U v' + ∫_Γ v⁰ V·n`.
    Volume,
    /// `J₂ = ∫_Γ v`, derivative `∫_Γ v' + (∂ₙv⁰ + H v⁰) V·n` with the mean
    /// curvature `H` (sum of principal curvatures).
    Surface {
        /// nodal `∂ₙv⁰` on boundary vertices
        normal_derivative: &'a [f64],
        curvature: Option<&'a dyn Fn(&Point<D>) -> f64>,
    },
}

/// Integral over the boundary facets of `P1(values) · weight(x)` with a
/// 3-point Gauss rule per edge (d = 2) or the degree-2 triangle rule (d = 3).
fn boundary_integral<const D: usize>(disc: &Discretization<D>, values: &[f64], weight: impl Fn(&Point<D>, &Point<D>) -> f64) -> f64 {
    let mesh = disc.mesh();
    let mut total = 0.0;
    let gl = GaussLegendre::new(3);
    let tri: [([f64; 3], f64); 3] =
        [([2.0 / 3.0, 1.0 / 6.0, 1.0 / 6.0], 1.0 / 3.0), ([1.0 / 6.0, 2.0 / 3.0, 1.0 / 6.0], 1.0 / 3.0), ([1.0 / 6.0, 1.0 / 6.0, 2.0 / 3.0], 1.0 / 3.0)];
    for f in 0..mesh.n_boundary_facets() {
        let face = mesh.boundary_facet(f);
        let n = mesh.facet_normal(f);
        let area = mesh.facet_measure(f);
        match D {
            2 => {
                for (s, w) in gl.nodes.iter().zip(&gl.weights) {
                    let bary = [1.0 - s, *s];
                    let x = mesh.vertex(face[0]) * bary[0] + mesh.vertex(face[1]) * bary[1];
                    let v = values[face[0]] * bary[0] + values[face[1]] * bary[1];
                    total += area * w * v * weight(&x, n);
                }
            }
            _ => {
                for (bary, w) in &tri {
                    let mut x = Point::<D>::zeros();
                    let mut v = 0.0;
                    for k in 0..3 {
                        x += mesh.vertex(face[k]) * bary[k];
                        v += values[face[k]] * bary[k];
                    }
                    total += area * w * v * weight(&x, n);
                }
            }
        }
    }
    total
}

/// Shape derivative of a domain functional at one time level, from nodal
/// `v⁰` and `v'` on the reference mesh.
pub fn functional_derivative<const D: usize>(
    disc: &Discretization<D>,
    v0: &[f64],
    vprime: &[f64],
    velocity: &dyn VelocityField<D>,
    kind: FunctionalKind<'_, D>,
) -> Result<f64> {
    let n = disc.mesh().n_vertices();
    if v0.len() != n || vprime.len() != n {
        return Err(Error::shape(n, v0.len().min(vprime.len())));
    }
    let vn = |x: &Point<D>, normal: &Point<D>| velocity.eval(x).dot(normal);
    match kind {
        FunctionalKind::Volume => {
            let ones = vec![1.0; n];
            let interior = disc.mass().bilinear(&ones, vprime);
            Ok(interior + boundary_integral(disc, v0, vn))
        }
        FunctionalKind::Surface { normal_derivative, curvature } => {
            let curvature = curvature
                .ok_or_else(|| Error::invalid("surface functional derivative needs curvature data"))?;
            if normal_derivative.len() != n {
                return Err(Error::shape(n, normal_derivative.len()));
            }
            let along = boundary_integral(disc, vprime, |_, _| 1.0);
            let flux = boundary_integral(disc, normal_derivative, vn);
            let curv = boundary_integral(disc, v0, |x, nrm| curvature(x) * vn(x, nrm));
            Ok(along + flux + curv)
        }
    }
}

/// Shape (and material) derivative of the unit normal, `n' = −∇_Γ κ`, at the
/// given boundary points.
pub fn normal_derivative_field<const D: usize>(kappa: &ModeExpansion<D>, points: &[Point<D>]) -> Vec<Point<D>> {
    points.iter().map(|x| -kappa.tangential_gradient(x)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fem::{solve_heat_dirichlet, Mesh, TimeGrid};
    use crate::kinematics::ZeroField;
    use crate::random_boundary::{BoundaryMode, ReferenceBoundary};
    use std::sync::Arc;

    fn disk(rings: usize) -> Discretization<2> {
        Discretization::new(Arc::new(Mesh::disk(Point::<2>::zeros(), 1.0, rings).unwrap())).unwrap()
    }

    #[test]
    fn zero_velocity_gives_zero_derivatives() {
        let d = disk(4);
        let data = SourceData::new(|t, x: &Point<2>| t * (1.0 + x[0]), |x: &Point<2>| (1.0 - x.norm_squared()).powi(2));
        let time = TimeGrid::new(0.5, 4).unwrap();
        let u0 = solve_heat_dirichlet(&d, time, &data, TimeScheme::CrankNicolson).unwrap();
        let p = SensitivityProblem { disc: &d, u0: &u0, velocity: &ZeroField, data: &data, scheme: TimeScheme::CrankNicolson };
        assert_eq!(material_derivative(&p).unwrap().max_abs(), 0.0);
        assert_eq!(shape_derivative(&p, FluxRecovery::ElementAverage).unwrap().max_abs(), 0.0);
        let z = material_derivative(&p).unwrap();
        assert_eq!(shape_from_material(&z, &p).unwrap().max_abs(), 0.0);
    }

    #[test]
    fn functional_derivatives_of_constants_on_disk() {
        let d = disk(24);
        let ones = vec![1.0; d.mesh().n_vertices()];
        let zeros = vec![0.0; d.mesh().n_vertices()];
        let kappa = ModeExpansion::new(ReferenceBoundary::unit(), &[(BoundaryMode::Constant, 1.0)]);
        let v = crate::random_boundary::velocity_from_kappa(&kappa, None).unwrap();
        let perimeter: f64 = (0..d.mesh().n_boundary_facets()).map(|f| d.mesh().facet_measure(f)).sum();
        let dj1 = functional_derivative(&d, &ones, &zeros, &v, FunctionalKind::Volume).unwrap();
        // V·n is evaluated with the polygon facet normals, which deviate from
        // the radial direction by half the facet angle
        assert!((dj1 - 2.0 * std::f64::consts::PI).abs() < 2e-3, "{dj1}");
        assert!(dj1 <= perimeter + 1e-12);
        let curvature = |_: &Point<2>| 1.0;
        let dj2 = functional_derivative(
            &d,
            &ones,
            &zeros,
            &v,
            FunctionalKind::Surface { normal_derivative: &zeros, curvature: Some(&curvature) },
        )
        .unwrap();
        assert!((dj2 - 2.0 * std::f64::consts::PI).abs() < 2e-3);
        let missing = functional_derivative(
            &d,
            &ones,
            &zeros,
            &v,
            FunctionalKind::Surface { normal_derivative: &zeros, curvature: None },
        );
        assert!(missing.is_err());
        assert_eq!(functional_derivative(&d, &ones, &zeros, &ZeroField, FunctionalKind::Volume).unwrap(), 0.0);
    }

    #[test]
    fn normal_derivative_of_cosine_mode() {
        let kappa = ModeExpansion::new(ReferenceBoundary::<2>::unit(), &[(BoundaryMode::Cos(1), 1.0)]);
        for i in 0..10 {
            let t = 0.6 * i as f64;
            let nd = normal_derivative_field(&kappa, &[Point::<2>::new(t.cos(), t.sin())]);
            assert!((nd[0].norm() - t.sin().abs()).abs() < 1e-14);
        }
    }
}
