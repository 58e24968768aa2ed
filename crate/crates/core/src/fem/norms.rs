use crate::error::{Error, Result};
use crate::geometry::Point;
use crate::quadrature::SimplexRule;
use crate::sparse::SubmatrixCholesky;

use super::{Discretization, SpaceTimeField};

/// Space-time norms of discrete fields. Time integrals use the trapezoid
/// rule over the snapshots.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormMode {
    /// `L²(0, T; L²)`
    L2L2,
    /// `L²(0, T; H¹)` with the full norm `‖v‖² + ‖∇v‖²`
    L2H1,
    /// `C([0, T]; L²)`, the maximum over snapshots
    CL2,
    /// `L²(0, T; H⁻¹)` through the discrete Riesz representer in `H₀¹`
    L2Hminus1,
}

fn h1_form<const D: usize>(disc: &Discretization<D>, v: &[f64]) -> f64 {
    disc.mass().quad_form(v) + disc.stiffness().quad_form(v)
}

/// Discrete `H⁻¹` norms of a sequence of snapshots.
fn dual_norms<const D: usize>(disc: &Discretization<D>, snapshots: &[Vec<f64>]) -> Result<Vec<f64>> {
    let h1 = disc.mass().combine(1.0, disc.stiffness(), 1.0);
    let chol = SubmatrixCholesky::factor(&h1, disc.interior())?;
    let n = disc.mesh().n_vertices();
    snapshots
        .iter()
        .map(|s| {
            let mut mu = vec![0.0; n];
            disc.mass().mul_vec_into(s, &mut mu);
            let local: Vec<f64> = chol.keep().iter().map(|&i| mu[i]).collect();
            let r = chol.solve_local(&local);
            Ok(r.iter().zip(&local).map(|(a, b)| a * b).sum::<f64>().max(0.0).sqrt())
        })
        .collect()
}

pub fn compute_norm<const D: usize>(disc: &Discretization<D>, field: &SpaceTimeField<D>, mode: NormMode) -> Result<f64> {
    if field.mesh.n_vertices() != disc.mesh().n_vertices() {
        return Err(Error::shape(disc.mesh().n_vertices(), field.mesh.n_vertices()));
    }
    let w = field.time.trapezoid_weights();
    let squares: Vec<f64> = match mode {
        NormMode::L2L2 | NormMode::CL2 => field.snapshots.iter().map(|s| disc.mass().quad_form(s)).collect(),
        NormMode::L2H1 => field.snapshots.iter().map(|s| h1_form(disc, s)).collect(),
        NormMode::L2Hminus1 => dual_norms(disc, &field.snapshots)?.iter().map(|v| v * v).collect(),
    };
    Ok(match mode {
        NormMode::CL2 => squares.iter().fold(0.0f64, |m, v| m.max(*v)).sqrt(),
        _ => squares.iter().zip(&w).map(|(s, w)| s * w).sum::<f64>().max(0.0).sqrt(),
    })
}

/// `L²(0, T; H⁻¹)` norm of the discrete time derivative `(u_j − u_{j−1})/Δt`,
/// with the midpoint rule in time.
pub fn time_derivative_dual_norm<const D: usize>(disc: &Discretization<D>, field: &SpaceTimeField<D>) -> Result<f64> {
    let dt = field.time.dt();
    let diffs: Vec<Vec<f64>> = field
        .snapshots
        .windows(2)
        .map(|w| w[1].iter().zip(&w[0]).map(|(a, b)| (a - b) / dt).collect())
        .collect();
    Ok(dual_norms(disc, &diffs)?.iter().map(|v| dt * v * v).sum::<f64>().sqrt())
}

/// `L²(0, T; L²)` distance to an analytic function, with a high-order
/// quadrature rule in space.
pub fn l2l2_error<const D: usize>(
    disc: &Discretization<D>,
    field: &SpaceTimeField<D>,
    exact: impl Fn(f64, &Point<D>) -> f64,
) -> f64 {
    let mesh = disc.mesh();
    let rule = SimplexRule::high_order(D);
    let w = field.time.trapezoid_weights();
    let mut total = 0.0;
    for (j, s) in field.snapshots.iter().enumerate() {
        let t = field.time.node(j);
        let mut e2 = 0.0;
        for c in 0..mesh.n_cells() {
            let cell = mesh.cell(c);
            for (bary, wq) in rule.barycentric.iter().zip(&rule.weights) {
                let mut x = Point::<D>::zeros();
                let mut uh = 0.0;
                for (k, &i) in cell.iter().enumerate() {
                    x += mesh.vertex(i) * bary[k];
                    uh += s[i] * bary[k];
                }
                e2 += wq * mesh.cell_measure(c) * (uh - exact(t, &x)).powi(2);
            }
        }
        total += w[j] * e2;
    }
    total.sqrt()
}

/// `L²(0, T; H¹(K))` norm over the cells whose centroid satisfies
/// `in_subset`.
pub fn h1_norm_on_subset<const D: usize>(
    disc: &Discretization<D>,
    field: &SpaceTimeField<D>,
    in_subset: impl Fn(&Point<D>) -> bool,
) -> f64 {
    let mesh = disc.mesh();
    let cells: Vec<usize> = (0..mesh.n_cells())
        .filter(|&c| {
            let centroid = mesh.cell(c).iter().fold(Point::<D>::zeros(), |a, &i| a + mesh.vertex(i)) / (D + 1) as f64;
            in_subset(&centroid)
        })
        .collect();
    let w = field.time.trapezoid_weights();
    field
        .snapshots
        .iter()
        .zip(&w)
        .map(|(s, wj)| {
            let mut v = 0.0;
            for &c in &cells {
                let meas = mesh.cell_measure(c);
                let cell = mesh.cell(c);
                let g = disc.cell_gradient(c, s);
                // exact P1 mass on a simplex: |T| (Σu² + (Σu)²) / ((D+1)(D+2))
                let sum: f64 = cell.iter().map(|&i| s[i]).sum();
                let sq: f64 = cell.iter().map(|&i| s[i] * s[i]).sum();
                v += meas * (g.norm_squared() + (sq + sum * sum) / ((D + 1) * (D + 2)) as f64);
            }
            wj * v
        })
        .sum::<f64>()
        .sqrt()
}

/// Discrete Poincaré constant `C` with `‖v‖ <= C ‖∇v‖` on `H₀¹`, from the
/// smallest Dirichlet eigenvalue (inverse iteration).
pub fn poincare_constant<const D: usize>(disc: &Discretization<D>) -> Result<f64> {
    let chol = SubmatrixCholesky::factor(disc.stiffness(), disc.interior())?;
    let n = disc.mesh().n_vertices();
    let keep = chol.keep().to_vec();
    let mut v = vec![0.0; n];
    for &i in &keep {
        v[i] = 1.0;
    }
    let mut lambda = 0.0;
    for _ in 0..500 {
        let mut mv = vec![0.0; n];
        disc.mass().mul_vec_into(&v, &mut mv);
        let local: Vec<f64> = keep.iter().map(|&i| mv[i]).collect();
        let w = chol.solve_local(&local);
        let mut next = vec![0.0; n];
        for (&i, x) in keep.iter().zip(w) {
            next[i] = x;
        }
        let norm = disc.mass().quad_form(&next).sqrt();
        next.iter_mut().for_each(|x| *x /= norm);
        let new_lambda = disc.stiffness().quad_form(&next);
        v = next;
        if (new_lambda - lambda).abs() <= 1e-13 * new_lambda {
            lambda = new_lambda;
            break;
        }
        lambda = new_lambda;
    }
    Ok(1.0 / lambda.sqrt())
}
