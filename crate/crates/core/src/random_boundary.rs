//! Reference boundary, random perturbation amplitudes `κ(x, ω)` and the
//! velocity fields `V = κ n` they induce.
//!
//! The reference boundary is a circle (d = 2) or a sphere (d = 3). Amplitudes
//! are finite expansions in smooth modes evaluated on the unit direction
//! `u = (x − c)/|x − c|`; every mode is the restriction of a polynomial in `u`,
//! so tangential gradients are available in closed form.

use std::f64::consts::{PI, TAU};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::geometry::{Mat, Point};
use crate::kinematics::{ramp, VelocityField};
use crate::quadrature::GaussLegendre;

/// Circle or sphere `{x : |x − center| = radius}`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReferenceBoundary<const D: usize> {
    pub center: Point<D>,
    pub radius: f64,
}

impl<const D: usize> ReferenceBoundary<D> {
    pub fn new(center: Point<D>, radius: f64) -> Self {
        assert!(radius > 0.0, "boundary radius must be positive");
        Self { center, radius }
    }

    pub fn unit() -> Self {
        Self::new(Point::zeros(), 1.0)
    }

    /// Point for parameters `θ` (d = 2) or `(θ, φ)` with azimuth `θ` and polar
    /// angle `φ` (d = 3).
    pub fn point(&self, params: &[f64]) -> Point<D> {
        self.center + self.normal(params) * self.radius
    }

    /// Outward unit normal at the given parameters.
    pub fn normal(&self, params: &[f64]) -> Point<D> {
        let theta = params[0];
        match D {
            2 => Point::from_fn(|i, _| if i == 0 { theta.cos() } else { theta.sin() }),
            3 => {
                let phi = params[1];
                let v = [phi.sin() * theta.cos(), phi.sin() * theta.sin(), phi.cos()];
                Point::from_fn(|i, _| v[i])
            }
            _ => panic!("reference boundaries exist for d = 2, 3 only"),
        }
    }

    /// Unit direction of `x` seen from the centre.
    pub fn direction(&self, x: &Point<D>) -> Point<D> {
        let d = x - self.center;
        let r = d.norm();
        if r == 0.0 {
            let mut e = Point::zeros();
            e[0] = 1.0;
            e
        } else {
            d / r
        }
    }

    /// Closest boundary point.
    pub fn project(&self, x: &Point<D>) -> Point<D> {
        self.center + self.direction(x) * self.radius
    }

    /// Signed distance, positive outside.
    pub fn signed_distance(&self, x: &Point<D>) -> f64 {
        (x - self.center).norm() - self.radius
    }

    pub fn measure(&self) -> f64 {
        match D {
            2 => TAU * self.radius,
            3 => 4.0 * PI * self.radius * self.radius,
            _ => unreachable!(),
        }
    }

    /// Quadrature on the boundary: `n` equispaced nodes on the circle, or an
    /// `n × 2n` product of Gauss nodes in `cos φ` and equispaced azimuths on
    /// the sphere.
    pub fn quadrature(&self, n: usize) -> (Vec<Point<D>>, Vec<f64>) {
        assert!(n >= 1);
        match D {
            2 => {
                let w = self.measure() / n as f64;
                let nodes = (0..n).map(|i| self.point(&[TAU * i as f64 / n as f64])).collect();
                (nodes, vec![w; n])
            }
            3 => {
                let gl = GaussLegendre::new(n);
                let naz = 2 * n;
                let mut nodes = Vec::with_capacity(n * naz);
                let mut weights = Vec::with_capacity(n * naz);
                for (s, ws) in gl.nodes.iter().zip(&gl.weights) {
                    let phi = (2.0 * s - 1.0).acos();
                    for k in 0..naz {
                        let theta = TAU * (k as f64 + 0.5) / naz as f64;
                        nodes.push(self.point(&[theta, phi]));
                        weights.push(self.radius * self.radius * 2.0 * ws * TAU / naz as f64);
                    }
                }
                (nodes, weights)
            }
            _ => unreachable!(),
        }
    }
}

/// Smooth basis functions of the unit direction `u`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoundaryMode {
    Constant,
    /// `Re (u₀ + i u₁)^k`, i.e. `cos kθ` on the unit circle.
    Cos(u32),
    /// `Im (u₀ + i u₁)^k`, i.e. `sin kθ` on the unit circle.
    Sin(u32),
    /// Legendre polynomial `P_k(u_{d−1})`.
    Zonal(u32),
}

fn complex_pow(a: f64, b: f64, k: u32) -> (f64, f64) {
    let (mut re, mut im) = (1.0, 0.0);
    for _ in 0..k {
        (re, im) = (re * a - im * b, re * b + im * a);
    }
    (re, im)
}

fn legendre(k: u32, s: f64) -> (f64, f64) {
    let (mut p0, mut p1) = (1.0, s);
    let (mut d0, mut d1) = (0.0, 1.0);
    if k == 0 {
        return (1.0, 0.0);
    }
    for n in 2..=k {
        let nf = n as f64;
        let p2 = ((2.0 * nf - 1.0) * s * p1 - (nf - 1.0) * p0) / nf;
        // P'_n = P'_{n-2} + (2n − 1) P_{n−1}
        let d2 = d0 + (2.0 * nf - 1.0) * p1;
        (p0, p1) = (p1, p2);
        (d0, d1) = (d1, d2);
    }
    (p1, d1)
}

impl BoundaryMode {
    /// Value and gradient of the polynomial extension at `u`.
    pub fn value_grad<const D: usize>(&self, u: &Point<D>) -> (f64, Point<D>) {
        let mut g = Point::<D>::zeros();
        match *self {
            BoundaryMode::Constant => (1.0, g),
            BoundaryMode::Cos(0) | BoundaryMode::Zonal(0) => (1.0, g),
            BoundaryMode::Sin(0) => (0.0, g),
            BoundaryMode::Cos(k) => {
                let (re, _) = complex_pow(u[0], u[1], k);
                let (wr, wi) = complex_pow(u[0], u[1], k - 1);
                g[0] = k as f64 * wr;
                g[1] = -(k as f64) * wi;
                (re, g)
            }
            BoundaryMode::Sin(k) => {
                let (_, im) = complex_pow(u[0], u[1], k);
                let (wr, wi) = complex_pow(u[0], u[1], k - 1);
                g[0] = k as f64 * wi;
                g[1] = k as f64 * wr;
                (im, g)
            }
            BoundaryMode::Zonal(k) => {
                let (p, dp) = legendre(k, u[D - 1]);
                g[D - 1] = dp;
                (p, g)
            }
        }
    }

    /// Bound on `|φ|` over the unit sphere.
    pub fn sup(&self) -> f64 {
        match self {
            BoundaryMode::Sin(0) => 0.0,
            _ => 1.0,
        }
    }

    /// Bound on the tangential gradient over the unit sphere.
    pub fn grad_sup(&self) -> f64 {
        match *self {
            BoundaryMode::Constant => 0.0,
            BoundaryMode::Cos(k) | BoundaryMode::Sin(k) => k as f64,
            BoundaryMode::Zonal(k) => (k * (k + 1)) as f64 / 2.0,
        }
    }
}

/// Finite expansion `κ(x) = Σ c_m φ_m(u(x))` on a reference boundary.
#[derive(Debug, Clone, PartialEq)]
pub struct ModeExpansion<const D: usize> {
    pub boundary: ReferenceBoundary<D>,
    pub modes: Vec<BoundaryMode>,
    pub coefficients: Vec<f64>,
}

impl<const D: usize> ModeExpansion<D> {
    pub fn new(boundary: ReferenceBoundary<D>, terms: &[(BoundaryMode, f64)]) -> Self {
        Self {
            boundary,
            modes: terms.iter().map(|t| t.0).collect(),
            coefficients: terms.iter().map(|t| t.1).collect(),
        }
    }

    pub fn zero(boundary: ReferenceBoundary<D>) -> Self {
        Self::new(boundary, &[])
    }

    /// Value at the boundary point nearest to `x` (constant along rays).
    pub fn eval(&self, x: &Point<D>) -> f64 {
        let u = self.boundary.direction(x);
        self.modes.iter().zip(&self.coefficients).map(|(m, c)| c * m.value_grad(&u).0).sum()
    }

    /// Value and gradient of the ray-constant extension `κ(u(x))` at `x`.
    fn value_grad_extended(&self, x: &Point<D>) -> (f64, Point<D>) {
        let d = x - self.boundary.center;
        let r = d.norm();
        let u = d / r;
        let mut v = 0.0;
        let mut g = Point::<D>::zeros();
        for (m, c) in self.modes.iter().zip(&self.coefficients) {
            let (mv, mg) = m.value_grad(&u);
            v += c * mv;
            g += mg * *c;
        }
        let tangential = g - u * u.dot(&g);
        (v, tangential / r)
    }

    /// Surface gradient `∇_Γ κ` at the boundary point nearest to `x`.
    pub fn tangential_gradient(&self, x: &Point<D>) -> Point<D> {
        let p = self.boundary.project(x);
        self.value_grad_extended(&p).1
    }

    pub fn sup_bound(&self) -> f64 {
        self.modes.iter().zip(&self.coefficients).map(|(m, c)| c.abs() * m.sup()).sum()
    }

    /// Bound on `|∇_Γ κ|` on the unit sphere (scale by `1/radius`).
    pub fn grad_bound(&self) -> f64 {
        self.modes.iter().zip(&self.coefficients).map(|(m, c)| c.abs() * m.grad_sup()).sum()
    }
}

/// Mean-zero law of one expansion coefficient.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CoefficientLaw {
    /// Uniform on `[−half_width, half_width]`.
    Uniform { half_width: f64 },
    /// Normal with standard deviation `sigma`, truncated at `±5σ`.
    TruncatedGaussian { sigma: f64 },
}

const TRUNCATION: f64 = 5.0;

impl CoefficientLaw {
    pub fn variance(&self) -> f64 {
        match *self {
            CoefficientLaw::Uniform { half_width } => half_width * half_width / 3.0,
            CoefficientLaw::TruncatedGaussian { sigma } => {
                // Var of N(0, σ²) conditioned on |X| <= 5σ
                let a = TRUNCATION;
                let pdf = (-0.5 * a * a).exp() / (TAU).sqrt();
                let mass = 1.0 - 2.0 * normal_upper_tail(a);
                sigma * sigma * (1.0 - 2.0 * a * pdf / mass)
            }
        }
    }

    /// Almost-sure bound on `|c|`.
    pub fn bound(&self) -> f64 {
        match *self {
            CoefficientLaw::Uniform { half_width } => half_width,
            CoefficientLaw::TruncatedGaussian { sigma } => TRUNCATION * sigma,
        }
    }

    fn draw(&self, rng: &mut ChaCha8Rng) -> f64 {
        match *self {
            CoefficientLaw::Uniform { half_width } => {
                if half_width == 0.0 {
                    0.0
                } else {
                    rng.random_range(-half_width..=half_width)
                }
            }
            CoefficientLaw::TruncatedGaussian { sigma } => {
                if sigma == 0.0 {
                    return 0.0;
                }
                let normal = Normal::new(0.0, sigma).expect("finite sigma");
                loop {
                    let c: f64 = normal.sample(rng);
                    if c.abs() <= TRUNCATION * sigma {
                        return c;
                    }
                }
            }
        }
    }
}

/// `P(X > a)` for a standard normal, via the complementary error function
/// continued fraction (only used for `a = 5`).
fn normal_upper_tail(a: f64) -> f64 {
    let pdf = (-0.5 * a * a).exp() / TAU.sqrt();
    // Laplace continued fraction for Mills' ratio
    let mut f = a;
    for k in (1..60).rev() {
        f = a + k as f64 / f;
    }
    pdf / f
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KappaMode {
    pub basis: BoundaryMode,
    pub law: CoefficientLaw,
}

/// Truncated random series `κ(x, ω) = Σ c_m(ω) φ_m(x)` with independent,
/// centred coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct KappaModel<const D: usize> {
    pub boundary: ReferenceBoundary<D>,
    pub modes: Vec<KappaMode>,
    pub amplitude_cap: f64,
}

/// One realisation of a [`KappaModel`].
#[derive(Debug, Clone, PartialEq)]
pub struct KappaSample<const D: usize> {
    pub seed: u64,
    pub expansion: ModeExpansion<D>,
}

impl<const D: usize> KappaSample<D> {
    pub fn coefficients(&self) -> &[f64] {
        &self.expansion.coefficients
    }

    pub fn eval(&self, x: &Point<D>) -> f64 {
        self.expansion.eval(x)
    }

    /// Whether `x + ε κ n` stays within the shell `r_minus < |x − c| < r_plus`
    /// at every node.
    pub fn within_shells(&self, epsilon: f64, r_minus: f64, r_plus: f64, nodes: &[Point<D>]) -> bool {
        let b = &self.expansion.boundary;
        nodes.iter().all(|x| {
            let r = b.radius + epsilon * self.eval(x);
            r > r_minus && r < r_plus
        })
    }
}

impl<const D: usize> KappaModel<D> {
    /// Validates the amplitude cap `Σ b_m ‖φ_m‖∞ <= κ_max`.
    pub fn new(boundary: ReferenceBoundary<D>, modes: Vec<KappaMode>, amplitude_cap: f64) -> Result<Self> {
        let model = Self { boundary, modes, amplitude_cap };
        for m in &model.modes {
            let b = m.law.bound();
            if !(b.is_finite() && b >= 0.0) {
                return Err(Error::invalid(format!("coefficient bound must be finite and non-negative, got {b}")));
            }
        }
        let total = model.sup_bound();
        if total > amplitude_cap * (1.0 + 1e-12) {
            return Err(Error::invalid(format!(
                "sum of mode bounds {total} exceeds the amplitude cap {amplitude_cap}"
            )));
        }
        Ok(model)
    }

    pub fn sup_bound(&self) -> f64 {
        self.modes.iter().map(|m| m.law.bound() * m.basis.sup()).sum()
    }

    pub fn variances(&self) -> Vec<f64> {
        self.modes.iter().map(|m| m.law.variance()).collect()
    }

    /// Draws coefficient `m` from its own ChaCha stream `m` under key `seed`,
    /// so each coefficient depends only on `(seed, m)`.
    pub fn sample(&self, seed: u64) -> KappaSample<D> {
        let coefficients = self
            .modes
            .iter()
            .enumerate()
            .map(|(m, mode)| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(m as u64);
                mode.law.draw(&mut rng)
            })
            .collect();
        KappaSample {
            seed,
            expansion: ModeExpansion {
                boundary: self.boundary,
                modes: self.modes.iter().map(|m| m.basis).collect(),
                coefficients,
            },
        }
    }

    /// `Cor[κ](x, y) = Σ σ_m² φ_m(x) φ_m(y)`.
    pub fn covariance(&self, x: &Point<D>, y: &Point<D>) -> f64 {
        let ux = self.boundary.direction(x);
        let uy = self.boundary.direction(y);
        self.modes
            .iter()
            .map(|m| m.law.variance() * m.basis.value_grad(&ux).0 * m.basis.value_grad(&uy).0)
            .sum()
    }

    /// Mode functions scaled by standard deviations at the given points:
    /// `L[(i, m)] = σ_m φ_m(x_i)`, so that `Cor = L Lᵀ`.
    pub fn covariance_factor(&self, points: &[Point<D>]) -> nalgebra::DMatrix<f64> {
        nalgebra::DMatrix::from_fn(points.len(), self.modes.len(), |i, m| {
            let u = self.boundary.direction(&points[i]);
            self.modes[m].law.variance().sqrt() * self.modes[m].basis.value_grad(&u).0
        })
    }
}

/// `V(x) = κ(u(x)) u(x) χ(|x − c| − R)` where `χ` is 1 for distances up to
/// `width` from the boundary and 0 beyond `2 width`; on the boundary itself
/// `V = κ n`.
#[derive(Debug, Clone)]
pub struct CollarField<const D: usize> {
    pub kappa: ModeExpansion<D>,
    pub width: f64,
}

impl<const D: usize> CollarField<D> {
    fn cutoff(&self, dist: f64) -> (f64, f64) {
        let (c, dc) = ramp((dist.abs() - self.width) / self.width);
        (c, dc * dist.signum() / self.width)
    }
}

/// Normal velocity field induced by `kappa`. `width` defaults to a fifth of
/// the radius when `None`.
pub fn velocity_from_kappa<const D: usize>(kappa: &ModeExpansion<D>, width: Option<f64>) -> Result<CollarField<D>> {
    let r = kappa.boundary.radius;
    let width = width.unwrap_or(0.2 * r);
    if !(width > 0.0 && 2.0 * width < r) {
        return Err(Error::invalid(format!("collar width {width} must lie in (0, radius/2)")));
    }
    Ok(CollarField { kappa: kappa.clone(), width })
}

impl<const D: usize> VelocityField<D> for CollarField<D> {
    fn eval(&self, x: &Point<D>) -> Point<D> {
        let b = &self.kappa.boundary;
        let (chi, _) = self.cutoff(b.signed_distance(x));
        if chi == 0.0 {
            return Point::zeros();
        }
        b.direction(x) * (self.kappa.eval(x) * chi)
    }

    fn jac(&self, x: &Point<D>) -> Mat<D> {
        let b = &self.kappa.boundary;
        let d = x - b.center;
        let r = d.norm();
        let (chi, dchi) = self.cutoff(r - b.radius);
        if chi == 0.0 && dchi == 0.0 {
            return Mat::zeros();
        }
        let u = d / r;
        let (k, gk) = self.kappa.value_grad_extended(x);
        let proj = Mat::<D>::identity() - u * u.transpose();
        (u * gk.transpose() + proj * (k / r)) * chi + u * u.transpose() * (k * dchi)
    }

    fn support_center(&self) -> Point<D> {
        self.kappa.boundary.center
    }

    fn support_radius(&self) -> f64 {
        self.kappa.boundary.radius + 2.0 * self.width
    }

    fn lipschitz_bound(&self) -> f64 {
        let r_min = self.kappa.boundary.radius - 2.0 * self.width;
        let k = self.kappa.sup_bound();
        let gk = self.kappa.grad_bound() / r_min;
        gk + k / r_min + k * 1.5 / self.width
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector2;

    fn circle() -> ReferenceBoundary<2> {
        ReferenceBoundary::unit()
    }

    #[test]
    fn modes_match_trigonometric_form_on_circle() {
        for k in 0..6u32 {
            for i in 0..17 {
                let t = 0.37 * i as f64;
                let u = Vector2::new(t.cos(), t.sin());
                assert!((BoundaryMode::Cos(k).value_grad(&u).0 - (k as f64 * t).cos()).abs() < 1e-12);
                assert!((BoundaryMode::Sin(k).value_grad(&u).0 - (k as f64 * t).sin()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn legendre_values_and_derivatives() {
        // P_3 = (5s³ − 3s)/2
        let s: f64 = 0.3;
        let (p, dp) = legendre(3, s);
        assert!((p - (5.0 * s.powi(3) - 3.0 * s) / 2.0).abs() < 1e-14);
        assert!((dp - (15.0 * s * s - 3.0) / 2.0).abs() < 1e-14);
        let (p, dp) = legendre(4, 1.0);
        assert!((p - 1.0).abs() < 1e-14 && (dp - 10.0).abs() < 1e-12);
    }

    #[test]
    fn quadrature_integrates_constants() {
        let (_, w) = circle().quadrature(37);
        assert!((w.iter().sum::<f64>() - TAU).abs() < 1e-12);
        let s = ReferenceBoundary::<3>::new(Point::<3>::new(0.1, 0.0, 0.0), 2.0);
        let (x, w) = s.quadrature(8);
        assert!((w.iter().sum::<f64>() - 16.0 * PI).abs() < 1e-10);
        // ∫ z² over the sphere of radius R = 4πR⁴/3
        let z2: f64 = x.iter().zip(&w).map(|(p, w)| w * p[2] * p[2]).sum();
        assert!((z2 - 4.0 * PI * 16.0 / 3.0).abs() < 1e-9);
    }

    #[test]
    fn degenerate_model_gives_zero() {
        let m = KappaModel::new(
            circle(),
            vec![KappaMode { basis: BoundaryMode::Cos(1), law: CoefficientLaw::Uniform { half_width: 0.0 } }],
            1.0,
        )
        .unwrap();
        let s = m.sample(7);
        assert_eq!(s.coefficients(), &[0.0]);
        assert_eq!(m.covariance(&Vector2::new(1.0, 0.0), &Vector2::new(0.0, 1.0)), 0.0);
    }

    #[test]
    fn amplitude_cap_is_enforced() {
        let modes = vec![
            KappaMode { basis: BoundaryMode::Cos(1), law: CoefficientLaw::Uniform { half_width: 0.6 } },
            KappaMode { basis: BoundaryMode::Sin(2), law: CoefficientLaw::Uniform { half_width: 0.6 } },
        ];
        assert!(KappaModel::new(circle(), modes, 1.0).is_err());
    }

    #[test]
    fn truncated_gaussian_variance() {
        // 1 − 2·5φ(5)/(1 − 2Q(5)) with φ(5) = 1.4867195147e-6
        let v = CoefficientLaw::TruncatedGaussian { sigma: 2.0 }.variance();
        let expected = 1.0 - 10.0 * 1.486_719_514_734_297_7e-6 / (1.0 - 2.0 * 2.866_515_718_791_939e-7);
        assert!((v / 4.0 - expected).abs() < 1e-14);
        assert!((normal_upper_tail(5.0) - 2.866_515_718_791_939e-7).abs() < 1e-18);
    }

    #[test]
    fn samples_are_reproducible_and_stream_keyed() {
        let modes: Vec<_> = (1..4)
            .map(|k| KappaMode { basis: BoundaryMode::Cos(k), law: CoefficientLaw::Uniform { half_width: 0.2 } })
            .collect();
        let m = KappaModel::new(circle(), modes.clone(), 1.0).unwrap();
        assert_eq!(m.sample(11), m.sample(11));
        assert_ne!(m.sample(11).coefficients(), m.sample(12).coefficients());
        // dropping the last mode leaves the others unchanged
        let m2 = KappaModel::new(circle(), modes[..2].to_vec(), 1.0).unwrap();
        assert_eq!(&m.sample(11).coefficients()[..2], m2.sample(11).coefficients());
    }

    #[test]
    fn collar_field_on_circle() {
        let kappa = ModeExpansion::new(circle(), &[(BoundaryMode::Constant, 1.0)]);
        let v = velocity_from_kappa(&kappa, None).unwrap();
        let x = Vector2::new(0.9, 0.3);
        assert!((v.eval(&x) - x / x.norm()).norm() < 1e-14);
        assert_eq!(v.eval(&Vector2::new(0.3, 0.0)), Vector2::zeros());
        assert_eq!(v.eval(&Vector2::new(1.5, 0.0)), Vector2::zeros());
        // κ = cos θ maps boundary points radially by ε cos θ
        let kappa = ModeExpansion::new(circle(), &[(BoundaryMode::Cos(1), 1.0)]);
        let v = velocity_from_kappa(&kappa, None).unwrap();
        let t: f64 = 0.8;
        let p = Vector2::new(t.cos(), t.sin());
        let mapped = p + v.eval(&p) * 0.1;
        assert!((mapped - p * (1.0 + 0.1 * t.cos())).norm() < 1e-14);
    }

    #[test]
    fn tangential_gradient_of_cosine() {
        let kappa = ModeExpansion::new(circle(), &[(BoundaryMode::Cos(1), 1.0)]);
        let t: f64 = 1.1;
        let g = kappa.tangential_gradient(&Vector2::new(t.cos(), t.sin()));
        let tangent = Vector2::new(-t.sin(), t.cos());
        assert!((g - tangent * (-t.sin())).norm() < 1e-14);
        let c = ModeExpansion::new(circle(), &[(BoundaryMode::Constant, 3.0)]);
        assert_eq!(c.tangential_gradient(&Vector2::new(0.0, 1.0)), Vector2::zeros());
    }
}
