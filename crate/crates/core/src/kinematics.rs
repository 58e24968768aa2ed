//! The transport map `T(x) = x + ε V(x)`, its Jacobian quantities, admissible
//! amplitudes and pullbacks of fields to the reference domain.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::geometry::{self, Mat, Point};

/// A compactly supported `W^{1,∞}` vector field with an analytic Jacobian.
pub trait VelocityField<const D: usize>: Send + Sync {
    fn eval(&self, x: &Point<D>) -> Point<D>;

    /// `jac[(k, l)] = ∂V_k / ∂x_l`.
    fn jac(&self, x: &Point<D>) -> Mat<D>;

    /// Centre of the ball outside of which `V ≡ 0`.
    fn support_center(&self) -> Point<D> {
        Point::<D>::zeros()
    }

    /// Radius of the ball outside of which `V ≡ 0`.
    fn support_radius(&self) -> f64;

    /// Upper bound on `|∂V_k/∂x_l|` over the whole space.
    fn lipschitz_bound(&self) -> f64;

    fn div(&self, x: &Point<D>) -> f64 {
        self.jac(x).trace()
    }
}

pub type SharedVelocity<const D: usize> = Arc<dyn VelocityField<D>>;

/// C¹ smoothstep ramp: 1 for `s <= 0`, 0 for `s >= 1`.
#[inline]
pub(crate) fn ramp(s: f64) -> (f64, f64) {
    if s <= 0.0 {
        (1.0, 0.0)
    } else if s >= 1.0 {
        (0.0, 0.0)
    } else {
        let u = 1.0 - s;
        (3.0 * u * u - 2.0 * u * u * u, -(6.0 * u - 6.0 * u * u))
    }
}

/// Radial cutoff: 1 inside `inner`, 0 outside `outer`, C¹ in between.
#[derive(Debug, Clone, Copy)]
pub struct RadialCutoff<const D: usize> {
    pub center: Point<D>,
    pub inner: f64,
    pub outer: f64,
}

impl<const D: usize> RadialCutoff<D> {
    pub fn new(center: Point<D>, inner: f64, outer: f64) -> Self {
        assert!(0.0 <= inner && inner < outer, "cutoff needs 0 <= inner < outer");
        Self { center, inner, outer }
    }

    pub fn value_grad(&self, x: &Point<D>) -> (f64, Point<D>) {
        let d = x - self.center;
        let r = d.norm();
        let width = self.outer - self.inner;
        let (c, dc) = ramp((r - self.inner) / width);
        if dc == 0.0 || r == 0.0 {
            (c, Point::zeros())
        } else {
            (c, d * (dc / (width * r)))
        }
    }

    pub fn grad_bound(&self) -> f64 {
        1.5 / (self.outer - self.inner)
    }
}

/// Identically zero field.
#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroField;

impl<const D: usize> VelocityField<D> for ZeroField {
    fn eval(&self, _x: &Point<D>) -> Point<D> {
        Point::zeros()
    }
    fn jac(&self, _x: &Point<D>) -> Mat<D> {
        Mat::zeros()
    }
    fn support_radius(&self) -> f64 {
        0.0
    }
    fn lipschitz_bound(&self) -> f64 {
        0.0
    }
}

/// `V(x) = (B x + c) χ(x)` with a radial cutoff `χ`.
#[derive(Debug, Clone)]
pub struct AffineField<const D: usize> {
    pub matrix: Mat<D>,
    pub offset: Point<D>,
    pub cutoff: RadialCutoff<D>,
}

impl<const D: usize> AffineField<D> {
    /// `V(x) = x` on the ball of radius `inner`.
    pub fn identity(inner: f64, outer: f64) -> Self {
        Self {
            matrix: Mat::identity(),
            offset: Point::zeros(),
            cutoff: RadialCutoff::new(Point::zeros(), inner, outer),
        }
    }

    /// Constant translation `V = c` on the ball of radius `inner`.
    pub fn translation(direction: Point<D>, inner: f64, outer: f64) -> Self {
        Self {
            matrix: Mat::zeros(),
            offset: direction,
            cutoff: RadialCutoff::new(Point::zeros(), inner, outer),
        }
    }
}

impl<const D: usize> VelocityField<D> for AffineField<D> {
    fn eval(&self, x: &Point<D>) -> Point<D> {
        let (c, _) = self.cutoff.value_grad(x);
        if c == 0.0 {
            return Point::zeros();
        }
        (self.matrix * x + self.offset) * c
    }

    fn jac(&self, x: &Point<D>) -> Mat<D> {
        let (c, grad) = self.cutoff.value_grad(x);
        let v = self.matrix * x + self.offset;
        self.matrix * c + v * grad.transpose()
    }

    fn support_center(&self) -> Point<D> {
        self.cutoff.center
    }

    fn support_radius(&self) -> f64 {
        self.cutoff.outer
    }

    fn lipschitz_bound(&self) -> f64 {
        let reach = self.cutoff.center.norm() + self.cutoff.outer;
        let row_max = (0..D)
            .map(|i| (0..D).map(|j| self.matrix[(i, j)].abs()).sum::<f64>())
            .fold(0.0, f64::max);
        geometry::max_abs(&self.matrix)
            + (row_max * reach + self.offset.amax()) * self.cutoff.grad_bound()
    }
}

/// Smooth oscillatory field `V_k = χ Σ_j a_kj sin(w_kj·x + φ_kj)`, used as a
/// generic test velocity.
#[derive(Debug, Clone)]
pub struct TrigonometricField<const D: usize> {
    /// per component: list of (amplitude, wave vector, phase)
    pub terms: Vec<Vec<(f64, Point<D>, f64)>>,
    pub cutoff: RadialCutoff<D>,
}

impl<const D: usize> TrigonometricField<D> {
    /// Random field with `modes` terms per component, amplitudes in
    /// `[-amplitude, amplitude]` and wave numbers up to `max_wave`.
    pub fn random(rng: &mut impl rand::Rng, modes: usize, amplitude: f64, max_wave: f64, cutoff: RadialCutoff<D>) -> Self {
        let terms = (0..D)
            .map(|_| {
                (0..modes)
                    .map(|_| {
                        let a = rng.random_range(-amplitude..=amplitude);
                        let w = Point::<D>::from_fn(|_, _| rng.random_range(-max_wave..=max_wave));
                        let phi = rng.random_range(0.0..std::f64::consts::TAU);
                        (a, w, phi)
                    })
                    .collect()
            })
            .collect();
        Self { terms, cutoff }
    }

    fn raw(&self, x: &Point<D>) -> (Point<D>, Mat<D>) {
        let mut v = Point::<D>::zeros();
        let mut j = Mat::<D>::zeros();
        for (k, comp) in self.terms.iter().enumerate() {
            for (a, w, phi) in comp {
                let arg = w.dot(x) + phi;
                v[k] += a * arg.sin();
                let c = a * arg.cos();
                for l in 0..D {
                    j[(k, l)] += c * w[l];
                }
            }
        }
        (v, j)
    }
}

impl<const D: usize> VelocityField<D> for TrigonometricField<D> {
    fn eval(&self, x: &Point<D>) -> Point<D> {
        let (c, _) = self.cutoff.value_grad(x);
        if c == 0.0 {
            return Point::zeros();
        }
        self.raw(x).0 * c
    }

    fn jac(&self, x: &Point<D>) -> Mat<D> {
        let (c, grad) = self.cutoff.value_grad(x);
        let (v, j) = self.raw(x);
        j * c + v * grad.transpose()
    }

    fn support_center(&self) -> Point<D> {
        self.cutoff.center
    }

    fn support_radius(&self) -> f64 {
        self.cutoff.outer
    }

    fn lipschitz_bound(&self) -> f64 {
        self.terms
            .iter()
            .map(|comp| {
                comp.iter().map(|(a, w, _)| a.abs() * (w.amax() + self.cutoff.grad_bound())).sum::<f64>()
            })
            .fold(0.0, f64::max)
    }
}

/// Axis-aligned box used to reject points outside the hold-all domain.
#[derive(Debug, Clone, Copy)]
pub struct BoundingBox<const D: usize> {
    pub lo: Point<D>,
    pub hi: Point<D>,
}

impl<const D: usize> BoundingBox<D> {
    pub fn contains(&self, x: &Point<D>) -> bool {
        (0..D).all(|i| x[i] >= self.lo[i] && x[i] <= self.hi[i])
    }
}

/// `T^ε(x) = x + ε V(x)`.
#[derive(Clone)]
pub struct PerturbationMap<const D: usize> {
    pub velocity: SharedVelocity<D>,
    pub epsilon: f64,
    /// Optional hold-all box; `apply` rejects points outside it.
    pub hold_all: Option<BoundingBox<D>>,
}

impl<const D: usize> std::fmt::Debug for PerturbationMap<D> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PerturbationMap").field("epsilon", &self.epsilon).finish_non_exhaustive()
    }
}

/// Jacobian-derived coefficients of the pulled-back problem at one point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransportedCoefficients<const D: usize> {
    /// `γ(ε, x) = det(I + ε J_V)`
    pub gamma: f64,
    /// `(γ₁, γ₂, γ₃)` with `γ = 1 + εγ₁ + ε²γ₂ + ε³γ₃`
    pub gamma_poly: [f64; 3],
    /// `A(ε, x) = γ J⁻¹ J⁻ᵀ`
    pub a_matrix: Mat<D>,
    /// `A'(0, x) = (div V) I − J_V − J_Vᵀ`
    pub a_prime0: Mat<D>,
}

/// Coefficients of `det(I + ε J)` as a polynomial in ε: trace, sum of the
/// principal 2×2 minors, determinant.
pub fn determinant_polynomial<const D: usize>(j: &Mat<D>) -> [f64; 3] {
    let g1 = j.trace();
    let mut g2 = 0.0;
    for k in 0..D {
        for l in (k + 1)..D {
            g2 += j[(k, k)] * j[(l, l)] - j[(k, l)] * j[(l, k)];
        }
    }
    let g3 = if D == 3 { geometry::det(j) } else { 0.0 };
    [g1, g2, g3]
}

/// Closed form of the ε-derivative of `γ J⁻¹ J⁻ᵀ` at ε = 0.
pub fn a_prime_zero<const D: usize>(j: &Mat<D>) -> Mat<D> {
    Mat::<D>::identity() * j.trace() - j - j.transpose()
}

impl<const D: usize> PerturbationMap<D> {
    pub fn new(velocity: SharedVelocity<D>, epsilon: f64) -> Self {
        assert!(epsilon >= 0.0, "epsilon must be non-negative");
        Self { velocity, epsilon, hold_all: None }
    }

    pub fn identity() -> Self {
        Self::new(Arc::new(ZeroField), 0.0)
    }

    pub fn with_hold_all(mut self, bbox: BoundingBox<D>) -> Self {
        self.hold_all = Some(bbox);
        self
    }

    fn check_domain(&self, x: &Point<D>) -> Result<()> {
        match &self.hold_all {
            Some(b) if !b.contains(x) => Err(Error::Domain {
                point: geometry::to_vec(x),
                reason: "outside the hold-all bounding box".into(),
            }),
            _ => Ok(()),
        }
    }

    pub fn apply(&self, x: &Point<D>) -> Result<Point<D>> {
        self.check_domain(x)?;
        Ok(self.apply_unchecked(x))
    }

    #[inline]
    pub fn apply_unchecked(&self, x: &Point<D>) -> Point<D> {
        if self.epsilon == 0.0 {
            return *x;
        }
        x + self.velocity.eval(x) * self.epsilon
    }

    /// Jacobian matrix `I + ε J_V`.
    pub fn jacobian(&self, x: &Point<D>) -> Mat<D> {
        Mat::<D>::identity() + self.velocity.jac(x) * self.epsilon
    }

    pub fn transported_coefficients(&self, x: &Point<D>) -> Result<TransportedCoefficients<D>> {
        let jv = self.velocity.jac(x);
        let e = self.epsilon;
        let gamma_poly = determinant_polynomial(&jv);
        let gamma = 1.0 + e * (gamma_poly[0] + e * (gamma_poly[1] + e * gamma_poly[2]));
        let jt = Mat::<D>::identity() + jv * e;
        let floor = 64.0 * f64::EPSILON * (1.0 + e * geometry::max_abs(&jv)).powi(D as i32);
        let (jinv, det) = geometry::inverse(&jt, floor)
            .ok_or_else(|| Error::SingularJacobian { point: geometry::to_vec(x), det: geometry::det(&jt) })?;
        if det <= 0.0 {
            return Err(Error::SingularJacobian { point: geometry::to_vec(x), det });
        }
        let a_matrix = jinv * jinv.transpose() * gamma;
        Ok(TransportedCoefficients { gamma, gamma_poly, a_matrix, a_prime0: a_prime_zero(&jv) })
    }
}

/// Largest `ε ∈ {2^0, 2^-1, ...}` keeping `γ(ε', ·) >= floor` for all
/// `ε' <= ε` on a lattice of `lattice^D` probes covering the support of
/// `velocity`.
pub fn epsilon_admissible<const D: usize>(
    velocity: &dyn VelocityField<D>,
    floor: f64,
    lattice: usize,
) -> Result<f64> {
    if !(floor > 0.0 && floor < 1.0) {
        return Err(Error::invalid(format!("floor must lie in (0, 1), got {floor}")));
    }
    const MAX_HALVINGS: i32 = 40;
    let radius = velocity.support_radius();
    if radius == 0.0 {
        return Ok(1.0);
    }
    let center = velocity.support_center();
    let n = lattice.max(2);
    let mut polys = Vec::with_capacity(n.pow(D as u32));
    let mut idx = [0usize; 3];
    loop {
        let x = Point::<D>::from_fn(|i, _| center[i] - radius + 2.0 * radius * idx[i] as f64 / (n - 1) as f64);
        polys.push(determinant_polynomial(&velocity.jac(&x)));
        let mut k = 0;
        while k < D {
            idx[k] += 1;
            if idx[k] < n {
                break;
            }
            idx[k] = 0;
            k += 1;
        }
        if k == D {
            break;
        }
    }
    for h in 0..=MAX_HALVINGS {
        let e = 2f64.powi(-h);
        let ok = polys.iter().all(|g| min_on_interval(g, e) >= floor);
        if ok {
            return Ok(e);
        }
    }
    Err(Error::NoAdmissibleEpsilon { floor, smallest: 2f64.powi(-MAX_HALVINGS) })
}

/// Minimum of `1 + g₁s + g₂s² + g₃s³` over `s ∈ [0, e]`. Requiring the floor
/// along the whole path from the identity excludes folded maps whose
/// determinant happens to be positive again at `e`.
fn min_on_interval(g: &[f64; 3], e: f64) -> f64 {
    let p = |s: f64| 1.0 + s * (g[0] + s * (g[1] + s * g[2]));
    let mut m = p(0.0).min(p(e));
    // critical points of the cubic: g₁ + 2g₂ s + 3g₃ s² = 0
    let (a, b, c) = (3.0 * g[2], 2.0 * g[1], g[0]);
    let mut roots = Vec::with_capacity(2);
    if a.abs() < 1e-300 {
        if b != 0.0 {
            roots.push(-c / b);
        }
    } else {
        let disc = b * b - 4.0 * a * c;
        if disc >= 0.0 {
            let sq = disc.sqrt();
            roots.push((-b + sq) / (2.0 * a));
            roots.push((-b - sq) / (2.0 * a));
        }
    }
    for s in roots {
        if s > 0.0 && s < e {
            m = m.min(p(s));
        }
    }
    m
}

/// `(t, x) ↦ v(t, T^ε(x))` for an analytic space-time field.
pub fn pullback<'a, const D: usize, F>(field: F, map: &'a PerturbationMap<D>) -> impl Fn(f64, &Point<D>) -> f64 + 'a
where
    F: Fn(f64, &Point<D>) -> f64 + 'a,
{
    move |t, x| field(t, &map.apply_unchecked(x))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{Matrix2, Vector2, Vector3};
    use rand::SeedableRng;

    fn identity_field() -> SharedVelocity<2> {
        Arc::new(AffineField::<2>::identity(5.0, 6.0))
    }

    #[test]
    fn apply_examples() {
        let x = Vector2::new(0.2, 0.7);
        let id = PerturbationMap::<2>::new(identity_field(), 0.0);
        assert_eq!(id.apply(&x).unwrap(), x);
        let zero = PerturbationMap::<2>::new(Arc::new(ZeroField), 0.3);
        assert_eq!(zero.apply(&x).unwrap(), x);
        let m = PerturbationMap::new(identity_field(), 0.1);
        let y = m.apply(&Vector2::new(1.0, 0.0)).unwrap();
        assert!((y - Vector2::new(1.1, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn apply_outside_hold_all_is_a_domain_error() {
        let m = PerturbationMap::new(identity_field(), 0.1)
            .with_hold_all(BoundingBox { lo: Vector2::new(-1.0, -1.0), hi: Vector2::new(1.0, 1.0) });
        assert!(matches!(m.apply(&Vector2::new(2.0, 0.0)), Err(Error::Domain { .. })));
    }

    #[test]
    fn identity_velocity_coefficients() {
        let m = PerturbationMap::new(identity_field(), 0.1);
        let c = m.transported_coefficients(&Vector2::new(0.3, -0.2)).unwrap();
        assert!((c.gamma - 1.21).abs() < 1e-14);
        assert!((c.a_matrix - Matrix2::identity()).amax() < 1e-14);
        assert!(c.a_prime0.amax() < 1e-15);
    }

    #[test]
    fn zero_velocity_coefficients() {
        let m = PerturbationMap::<2>::new(Arc::new(ZeroField), 0.4);
        let c = m.transported_coefficients(&Vector2::new(0.3, -0.2)).unwrap();
        assert_eq!(c.gamma, 1.0);
        assert_eq!(c.a_matrix, Matrix2::identity());
        assert_eq!(c.a_prime0, Matrix2::zeros());
    }

    #[test]
    fn gamma_polynomial_matches_determinant_in_3d() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let v = TrigonometricField::<3>::random(&mut rng, 3, 0.7, 2.0, RadialCutoff::new(Vector3::zeros(), 1.0, 2.0));
        for e in [0.05, 0.3, 0.9] {
            let m = PerturbationMap::new(Arc::new(v.clone()) as SharedVelocity<3>, e);
            let x = Vector3::new(0.1, -0.4, 0.3);
            let det = geometry::det(&m.jacobian(&x));
            if let Ok(c) = m.transported_coefficients(&x) {
                assert!((c.gamma - det).abs() < 1e-13, "e={e}");
            }
        }
    }

    #[test]
    fn folded_map_is_rejected() {
        // V(x) = -x locally: T = (1 - ε) x is singular at ε = 1
        let v = AffineField::<2> {
            matrix: -Matrix2::identity(),
            offset: Vector2::zeros(),
            cutoff: RadialCutoff::new(Vector2::zeros(), 2.0, 3.0),
        };
        let m = PerturbationMap::new(Arc::new(v), 1.0);
        assert!(matches!(
            m.transported_coefficients(&Vector2::new(0.5, 0.5)),
            Err(Error::SingularJacobian { .. })
        ));
    }

    #[test]
    fn jacobian_matches_central_differences() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let v = TrigonometricField::<2>::random(&mut rng, 4, 0.5, 3.0, RadialCutoff::new(Vector2::zeros(), 0.8, 1.6));
        let h = 1e-5;
        for i in 0..50 {
            let x = Vector2::new((i as f64 * 0.37).sin() * 1.5, (i as f64 * 0.91).cos() * 1.5);
            let j = v.jac(&x);
            for l in 0..2 {
                let mut e = Vector2::zeros();
                e[l] = h;
                let fd = (v.eval(&(x + e)) - v.eval(&(x - e))) / (2.0 * h);
                for k in 0..2 {
                    assert!((fd[k] - j[(k, l)]).abs() < 1e-7, "probe {i}");
                }
            }
            assert!(j.amax() <= v.lipschitz_bound());
        }
    }

    #[test]
    fn compact_support() {
        let v = AffineField::<2>::identity(0.5, 1.0);
        assert_eq!(v.eval(&Vector2::new(1.0, 0.01)), Vector2::zeros());
        assert_eq!(v.jac(&Vector2::new(0.0, 1.2)), Matrix2::zeros());
    }

    #[test]
    fn admissible_epsilon_examples() {
        assert_eq!(epsilon_admissible::<2>(&ZeroField, 0.5, 64).unwrap(), 1.0);
        // V = x inside: the interior is fine for every ε, the ramp (where the radial
        // eigenvalue of J is χ + rχ' < 0) decides the answer
        let v = AffineField::<2>::identity(1.0, 20.0);
        let e = epsilon_admissible(&v, 0.5, 64).unwrap();
        let min_gamma = |eps: f64| {
            (0..=4000)
                .map(|i| {
                    let x = Vector2::new(20.0 * i as f64 / 4000.0, 0.0);
                    (Matrix2::identity() + v.jac(&x) * eps).determinant()
                })
                .fold(f64::INFINITY, f64::min)
        };
        assert!(min_gamma(e) >= 0.5 - 1e-3);
        assert!(min_gamma(2.0 * e) < 0.5);
        // V = -5 x locally has div V = -10; γ = (1 - 5ε)² >= 0.5 needs ε <= 0.0586
        let v = AffineField::<2> {
            matrix: Matrix2::identity() * -5.0,
            offset: Vector2::zeros(),
            cutoff: RadialCutoff::new(Vector2::zeros(), 0.5, 3.0),
        };
        let e = epsilon_admissible(&v, 0.5, 64).unwrap();
        assert_eq!(e, 2f64.powi(-5));
        assert!(epsilon_admissible(&v, 0.0, 64).is_err());
    }

    #[test]
    fn pullback_examples() {
        let map = PerturbationMap::<2>::new(Arc::new(AffineField::translation(Vector2::new(1.0, 0.0), 1.0, 2.0)), 0.2);
        let f = pullback(|_t, x: &Vector2<f64>| x[0], &map);
        assert!((f(0.0, &Vector2::zeros()) - 0.2).abs() < 1e-15);
        let c = pullback(|_t, _x: &Vector2<f64>| 3.5, &map);
        assert_eq!(c(1.0, &Vector2::new(0.3, 0.1)), 3.5);
        let id = PerturbationMap::<2>::identity();
        let g = pullback(|t, x: &Vector2<f64>| t * x[1], &id);
        assert_eq!(g(2.0, &Vector2::new(0.0, 0.25)), 0.5);
    }
}
