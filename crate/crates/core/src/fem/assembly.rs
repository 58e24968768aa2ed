use std::sync::Arc;

use crate::error::{Error, Result};
use crate::geometry::{self, Mat, Point};
use crate::quadrature::SimplexRule;
use crate::sparse::{CsrPattern, SparseMatrix};

use super::Mesh;

/// Per-mesh data shared by every solve: sparsity pattern, barycentric
/// gradients, quadrature points, and the constant-coefficient mass and
/// stiffness matrices.
#[derive(Debug, Clone)]
pub struct Discretization<const D: usize> {
    mesh: Arc<Mesh<D>>,
    pattern: Arc<CsrPattern>,
    /// stride `D + 1` per cell
    grads: Vec<Point<D>>,
    rule: SimplexRule,
    /// stride `rule.len()` per cell
    qpoints: Vec<Point<D>>,
    mass: SparseMatrix,
    stiffness: SparseMatrix,
    interior: Vec<usize>,
    boundary: Vec<usize>,
}

impl<const D: usize> Discretization<D> {
    pub fn new(mesh: Arc<Mesh<D>>) -> Result<Self> {
        let k = D + 1;
        let pattern = Arc::new(CsrPattern::from_cells(mesh.n_vertices(), mesh.cells().chunks(k)));
        let rule = SimplexRule::degree2(D);
        let mut grads = Vec::with_capacity(mesh.n_cells() * k);
        let mut qpoints = Vec::with_capacity(mesh.n_cells() * rule.weights.len());
        for c in 0..mesh.n_cells() {
            let v: Vec<Point<D>> = mesh.cell(c).iter().map(|&i| *mesh.vertex(i)).collect();
            let e = Mat::<D>::from_fn(|i, j| v[j + 1][i] - v[0][i]);
            let (inv, _) = geometry::inverse(&e, 0.0)
                .ok_or_else(|| Error::InvalidMesh(format!("cell {c} has a singular edge matrix")))?;
            let mut g0 = Point::<D>::zeros();
            let mut rows = Vec::with_capacity(D);
            for r in 0..D {
                let g: Point<D> = inv.row(r).transpose();
                g0 -= g;
                rows.push(g);
            }
            grads.push(g0);
            grads.extend(rows);
            for bary in &rule.barycentric {
                qpoints.push(v.iter().zip(bary).fold(Point::<D>::zeros(), |acc, (p, l)| acc + p * *l));
            }
        }
        let interior = mesh.interior_vertices();
        let boundary = mesh.boundary_vertices();
        let mut disc = Self {
            mass: SparseMatrix::zeros(pattern.clone()),
            stiffness: SparseMatrix::zeros(pattern.clone()),
            mesh,
            pattern,
            grads,
            rule,
            qpoints,
            interior,
            boundary,
        };
        let (m, s) = disc.assemble_matrices(|_, _| Ok((1.0, Mat::<D>::identity())))?;
        disc.mass = m;
        disc.stiffness = s;
        Ok(disc)
    }

    pub fn mesh(&self) -> &Arc<Mesh<D>> {
        &self.mesh
    }

    pub fn pattern(&self) -> &Arc<CsrPattern> {
        &self.pattern
    }

    pub fn mass(&self) -> &SparseMatrix {
        &self.mass
    }

    pub fn stiffness(&self) -> &SparseMatrix {
        &self.stiffness
    }

    pub fn interior(&self) -> &[usize] {
        &self.interior
    }

    pub fn boundary(&self) -> &[usize] {
        &self.boundary
    }

    pub fn n_qpoints_per_cell(&self) -> usize {
        self.rule.weights.len()
    }

    /// Physical quadrature points, cell-major.
    pub fn quadrature_points(&self) -> &[Point<D>] {
        &self.qpoints
    }

    /// Gradients of the barycentric coordinates of cell `c`.
    pub fn cell_gradients(&self, c: usize) -> &[Point<D>] {
        &self.grads[c * (D + 1)..(c + 1) * (D + 1)]
    }

    /// Gradient of the P1 function with nodal `values` on cell `c`.
    pub fn cell_gradient(&self, c: usize, values: &[f64]) -> Point<D> {
        self.cell_gradients(c)
            .iter()
            .zip(self.mesh.cell(c))
            .fold(Point::<D>::zeros(), |acc, (g, &i)| acc + g * values[i])
    }

    /// Mass matrix with density `ρ` and stiffness matrix with diffusion `A`,
    /// both sampled at the quadrature points through `coef(cell, x)`.
    pub fn assemble_matrices(
        &self,
        mut coef: impl FnMut(usize, &Point<D>) -> Result<(f64, Mat<D>)>,
    ) -> Result<(SparseMatrix, SparseMatrix)> {
        let k = D + 1;
        let nq = self.n_qpoints_per_cell();
        let mut mass = SparseMatrix::zeros(self.pattern.clone());
        let mut stiff = SparseMatrix::zeros(self.pattern.clone());
        let mut local_m = vec![0.0; k * k];
        for c in 0..self.mesh.n_cells() {
            let meas = self.mesh.cell_measure(c);
            let grads = self.cell_gradients(c);
            local_m.iter_mut().for_each(|v| *v = 0.0);
            let mut a_bar = Mat::<D>::zeros();
            for q in 0..nq {
                let (rho, a) = coef(c, &self.qpoints[c * nq + q])?;
                let w = self.rule.weights[q] * meas;
                a_bar += a * w;
                let bary = &self.rule.barycentric[q];
                for i in 0..k {
                    for j in 0..k {
                        local_m[i * k + j] += w * rho * bary[i] * bary[j];
                    }
                }
            }
            let cell = self.mesh.cell(c);
            for i in 0..k {
                let ag = a_bar * grads[i];
                for j in 0..k {
                    mass.add(cell[i], cell[j], local_m[i * k + j]);
                    stiff.add(cell[i], cell[j], grads[j].dot(&ag));
                }
            }
        }
        Ok((mass, stiff))
    }

    /// `∫ s φ_i` from samples `s` at the quadrature points.
    pub fn load_from_samples(&self, samples: &[f64]) -> Vec<f64> {
        let nq = self.n_qpoints_per_cell();
        assert_eq!(samples.len(), self.qpoints.len());
        let mut b = vec![0.0; self.mesh.n_vertices()];
        for c in 0..self.mesh.n_cells() {
            let meas = self.mesh.cell_measure(c);
            let cell = self.mesh.cell(c);
            for q in 0..nq {
                let w = self.rule.weights[q] * meas * samples[c * nq + q];
                for (i, l) in cell.iter().zip(&self.rule.barycentric[q]) {
                    b[*i] += w * l;
                }
            }
        }
        b
    }

    /// `∫ f φ_i`.
    pub fn load_vector(&self, f: impl Fn(&Point<D>) -> f64) -> Vec<f64> {
        let samples: Vec<f64> = self.qpoints.iter().map(f).collect();
        self.load_from_samples(&samples)
    }

    /// `∫ W · ∇φ_i` from vector samples `W` at the quadrature points.
    pub fn gradient_load_from_samples(&self, samples: &[Point<D>]) -> Vec<f64> {
        let nq = self.n_qpoints_per_cell();
        assert_eq!(samples.len(), self.qpoints.len());
        let mut b = vec![0.0; self.mesh.n_vertices()];
        for c in 0..self.mesh.n_cells() {
            let meas = self.mesh.cell_measure(c);
            let mut w_bar = Point::<D>::zeros();
            for q in 0..nq {
                w_bar += samples[c * nq + q] * (self.rule.weights[q] * meas);
            }
            for (i, g) in self.mesh.cell(c).iter().zip(self.cell_gradients(c)) {
                b[*i] += g.dot(&w_bar);
            }
        }
        b
    }

    /// Nodal interpolant of `f`.
    pub fn interpolate(&self, f: impl Fn(&Point<D>) -> f64) -> Vec<f64> {
        self.mesh.vertices().iter().map(f).collect()
    }

    /// L² projection of a function given by quadrature-point samples.
    pub fn l2_projection(&self, samples: &[f64]) -> Result<Vec<f64>> {
        let all: Vec<usize> = (0..self.mesh.n_vertices()).collect();
        let chol = crate::sparse::SubmatrixCholesky::factor(&self.mass, &all)?;
        Ok(chol.solve_local(&self.load_from_samples(samples)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_matrices_reproduce_integrals() {
        let mesh = Arc::new(Mesh::unit_square(6).unwrap());
        let d = Discretization::new(mesh.clone()).unwrap();
        let ones = vec![1.0; mesh.n_vertices()];
        assert!((d.mass().quad_form(&ones) - 1.0).abs() < 1e-13);
        assert!(d.stiffness().quad_form(&ones).abs() < 1e-12);
        // ∫ |∇x₁|² = 1, ∫ x₁² = 1/3 (exact for P1 x₁ up to interpolation: x₁ is P1)
        let x1 = d.interpolate(|x| x[0]);
        assert!((d.stiffness().quad_form(&x1) - 1.0).abs() < 1e-12);
        assert!((d.mass().quad_form(&x1) - 1.0 / 3.0).abs() < 1e-13);
        let b = d.load_vector(|x| x[1]);
        assert!((b.iter().sum::<f64>() - 0.5).abs() < 1e-13);
    }

    #[test]
    fn variable_coefficients() {
        let mesh = Arc::new(Mesh::unit_square(4).unwrap());
        let d = Discretization::new(mesh.clone()).unwrap();
        let (m, k) = d.assemble_matrices(|_, x| Ok((2.0 + x[0], Mat::<2>::new(3.0, 0.0, 0.0, 1.0)))).unwrap();
        let ones = vec![1.0; mesh.n_vertices()];
        assert!((m.quad_form(&ones) - 2.5).abs() < 1e-13);
        let x1 = d.interpolate(|x| x[0]);
        let x2 = d.interpolate(|x| x[1]);
        assert!((k.quad_form(&x1) - 3.0).abs() < 1e-12);
        assert!((k.quad_form(&x2) - 1.0).abs() < 1e-12);
        // ∫ (1, 0)·∇φ_i summed against x₁ nodal values = ∫ ∂x₁/∂x₁ = 1
        let g = d.gradient_load_from_samples(&vec![Point::<2>::new(1.0, 0.0); d.quadrature_points().len()]);
        let s: f64 = g.iter().zip(&x1).map(|(a, b)| a * b).sum();
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn l2_projection_reproduces_linear_functions() {
        let mesh = Arc::new(Mesh::disk(Point::<2>::zeros(), 1.0, 4).unwrap());
        let d = Discretization::new(mesh.clone()).unwrap();
        let samples: Vec<f64> = d.quadrature_points().iter().map(|x| 1.0 + 2.0 * x[0] - x[1]).collect();
        let p = d.l2_projection(&samples).unwrap();
        for (v, x) in p.iter().zip(mesh.vertices()) {
            assert!((v - (1.0 + 2.0 * x[0] - x[1])).abs() < 1e-11);
        }
    }
}
