//! Space-time boundary elements for the heat equation.
//!
//! Densities are piecewise constant in space (one value per boundary
//! element) and in time (one value per interval of a [`TimeGrid`]). Time
//! integrals of the kernel are done in closed form; the Galerkin operator
//! blocks depend only on the time lag, so one block is stored per lag and
//! the discrete systems are solved by marching on in time.
//!
//! Operator assembly is implemented for curves in the plane. Kernels and
//! layer potentials are available in two and three dimensions.

use std::f64::consts::PI;
use std::io::{Read, Write};
use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fem::{Mesh, TimeGrid};
use crate::geometry::Point;
use crate::quadrature::{GaussLegendre, GradedRule, SimplexRule};
use crate::special::exp_integral_e1;

/// Beyond this value of `r²/4τ` the kernel is treated as zero.
const EXPONENT_CUTOFF: f64 = 60.0;

/// Fundamental solution `G(t, x) = (4πt)^{-d/2} exp(-|x|²/4t)` for `t > 0`,
/// zero otherwise.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeatKernel {
    dim: usize,
}

impl HeatKernel {
    pub fn new(dim: usize) -> Result<Self> {
        if !(2..=3).contains(&dim) {
            return Err(Error::Unsupported(format!("heat kernel in dimension {dim}")));
        }
        Ok(Self { dim })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn eval(&self, t: f64, x: &[f64]) -> f64 {
        if t <= 0.0 {
            return 0.0;
        }
        let r2: f64 = x.iter().map(|v| v * v).sum();
        (4.0 * PI * t).powf(-(self.dim as f64) / 2.0) * (-r2 / (4.0 * t)).exp()
    }

    /// `∫_0^τ G(s, r) ds`.
    pub fn time_integral(&self, tau: f64, r: f64) -> f64 {
        if tau <= 0.0 {
            return 0.0;
        }
        match self.dim {
            2 => exp_integral_e1(r * r / (4.0 * tau)) / (4.0 * PI),
            _ => statrs::function::erf::erfc(r / (2.0 * tau.sqrt())) / (4.0 * PI * r),
        }
    }

    /// `∫_0^τ ∂G/∂n_y (s, x − y) ds` where `p = (x − y)·n_y`.
    pub fn normal_time_integral(&self, tau: f64, r: f64, p: f64) -> f64 {
        if tau <= 0.0 {
            return 0.0;
        }
        let a = r * r / (4.0 * tau);
        match self.dim {
            2 => p * (-a).exp() / (2.0 * PI * r * r),
            _ => {
                let tail = 0.5 * PI.sqrt() * statrs::function::erf::erfc(a.sqrt()) + a.sqrt() * (-a).exp();
                p * tail / (2.0 * PI.powf(1.5) * r * r * r)
            }
        }
    }
}

pub fn kernel_eval(kernel: &HeatKernel, t: f64, x: &[f64]) -> f64 {
    kernel.eval(t, x)
}

/// `∫_0^τ ∫_0^s G(σ, r) dσ ds` in the plane.
fn double_time_integral(tau: f64, r: f64) -> f64 {
    if tau <= 0.0 {
        return 0.0;
    }
    let a = r * r / 4.0;
    let x = a / tau;
    if x > 700.0 {
        return 0.0;
    }
    ((tau + a) * exp_integral_e1(x) - tau * (-x).exp()) / (4.0 * PI)
}

/// `∫_0^τ ∫_0^s ∂G/∂n_y dσ ds` in the plane, `p = (x − y)·n_y`.
fn double_time_integral_normal(tau: f64, r: f64, p: f64) -> f64 {
    if tau <= 0.0 || p == 0.0 {
        return 0.0;
    }
    let a = r * r / 4.0;
    let x = a / tau;
    if x > 700.0 {
        return 0.0;
    }
    p * (tau * (-x).exp() - a * exp_integral_e1(x)) / (2.0 * PI * r * r)
}

/// One flat boundary element: a segment in 2-D, a triangle in 3-D.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryElement<const D: usize> {
    pub nodes: Vec<usize>,
    pub corners: Vec<Point<D>>,
    pub normal: Point<D>,
    pub measure: f64,
    pub centroid: Point<D>,
}

impl<const D: usize> BoundaryElement<D> {
    fn new(nodes: Vec<usize>, corners: Vec<Point<D>>, normal: Point<D>, measure: f64) -> Self {
        let centroid = corners.iter().fold(Point::<D>::zeros(), |a, c| a + c) / corners.len() as f64;
        Self { nodes, corners, normal, measure, centroid }
    }

    fn diameter(&self) -> f64 {
        let mut d = 0.0f64;
        for a in &self.corners {
            for b in &self.corners {
                d = d.max((a - b).norm());
            }
        }
        d
    }

    fn distance_to(&self, x: &Point<D>) -> f64 {
        match D {
            2 => {
                let (a, b) = (&self.corners[0], &self.corners[1]);
                let t = b - a;
                let s = ((x - a).dot(&t) / t.norm_squared()).clamp(0.0, 1.0);
                (x - (a + t * s)).norm()
            }
            _ => {
                // lower bound is enough for choosing quadrature
                let d = (x - self.centroid).norm() - self.diameter();
                d.max((x - self.centroid).dot(&self.normal).abs())
            }
        }
    }
}

/// Boundary of a mesh as a list of flat elements with outward normals.
#[derive(Debug, Clone)]
pub struct BoundaryMesh<const D: usize> {
    vertices: Vec<Point<D>>,
    elements: Vec<BoundaryElement<D>>,
}

impl<const D: usize> BoundaryMesh<D> {
    /// Boundary facets of a volume mesh; node indices refer to the volume mesh.
    pub fn from_mesh(mesh: &Mesh<D>) -> Self {
        let elements = (0..mesh.n_boundary_facets())
            .map(|f| {
                let nodes = mesh.boundary_facet(f).to_vec();
                let corners = nodes.iter().map(|&i| *mesh.vertex(i)).collect();
                BoundaryElement::new(nodes, corners, *mesh.facet_normal(f), mesh.facet_measure(f))
            })
            .collect();
        Self { vertices: mesh.vertices().to_vec(), elements }
    }

    pub fn n_elements(&self) -> usize {
        self.elements.len()
    }

    pub fn elements(&self) -> &[BoundaryElement<D>] {
        &self.elements
    }

    pub fn element(&self, e: usize) -> &BoundaryElement<D> {
        &self.elements[e]
    }

    pub fn vertices(&self) -> &[Point<D>] {
        &self.vertices
    }

    pub fn measure(&self) -> f64 {
        self.elements.iter().map(|e| e.measure).sum()
    }

    /// Largest element diameter.
    pub fn h(&self) -> f64 {
        self.elements.iter().fold(0.0, |m, e| m.max(e.diameter()))
    }

    /// Distance from `x` to the nearest element.
    pub fn distance_to(&self, x: &Point<D>) -> f64 {
        self.elements.iter().fold(f64::INFINITY, |m, e| m.min(e.distance_to(x)))
    }
}

impl BoundaryMesh<2> {
    /// Closed polygon through `points` in counter-clockwise order.
    pub fn polygon(points: Vec<Point<2>>) -> Result<Self> {
        let n = points.len();
        if n < 3 {
            return Err(Error::InvalidMesh(format!("a polygon needs at least 3 vertices, got {n}")));
        }
        let area: f64 = (0..n).map(|i| points[i].perp(&points[(i + 1) % n])).sum::<f64>() / 2.0;
        if area <= 0.0 {
            return Err(Error::InvalidMesh("polygon vertices must be counter-clockwise".into()));
        }
        let mut elements = Vec::with_capacity(n);
        for i in 0..n {
            let j = (i + 1) % n;
            let t = points[j] - points[i];
            let len = t.norm();
            if len == 0.0 {
                return Err(Error::InvalidMesh(format!("repeated polygon vertex {i}")));
            }
            let normal = Point::<2>::new(t[1], -t[0]) / len;
            elements.push(BoundaryElement::new(vec![i, j], vec![points[i], points[j]], normal, len));
        }
        Ok(Self { vertices: points, elements })
    }
}

/// Piecewise constant space-time function: `values[ℓ · E + e]` is the value
/// on time interval `ℓ` and element `e`.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryDensity {
    intervals: usize,
    elements: usize,
    values: Vec<f64>,
}

impl BoundaryDensity {
    pub fn zeros(intervals: usize, elements: usize) -> Self {
        Self { intervals, elements, values: vec![0.0; intervals * elements] }
    }

    pub fn from_values(intervals: usize, elements: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != intervals * elements {
            return Err(Error::shape(format!("{intervals} x {elements}"), values.len()));
        }
        Ok(Self { intervals, elements, values })
    }

    /// Space-time averages of `g` over every element and interval.
    pub fn from_fn<const D: usize>(
        mesh: &BoundaryMesh<D>,
        time: TimeGrid,
        g: impl Fn(f64, &Point<D>) -> f64,
    ) -> Self {
        let gt = GaussLegendre::new(3);
        let rule = SimplexRule::high_order(D - 1);
        let dt = time.dt();
        let mut out = Self::zeros(time.steps, mesh.n_elements());
        for l in 0..time.steps {
            for (e, el) in mesh.elements().iter().enumerate() {
                let mut v = 0.0;
                for (tq, wt) in gt.nodes.iter().zip(&gt.weights) {
                    let t = (l as f64 + tq) * dt;
                    for (bary, w) in rule.barycentric.iter().zip(&rule.weights) {
                        let x = el.corners.iter().zip(bary).fold(Point::<D>::zeros(), |a, (c, b)| a + c * *b);
                        v += wt * w * g(t, &x);
                    }
                }
                out.values[l * out.elements + e] = v;
            }
        }
        out
    }

    /// Averages of the piecewise linear (space) and piecewise linear (time)
    /// interpolant of nodal values `series[j][vertex]` at time nodes `t_j`.
    pub fn from_vertex_series<const D: usize>(
        mesh: &BoundaryMesh<D>,
        time: TimeGrid,
        series: &[Vec<f64>],
    ) -> Result<Self> {
        if series.len() != time.n_nodes() {
            return Err(Error::shape(time.n_nodes(), series.len()));
        }
        let nv = mesh.vertices().len();
        if let Some(s) = series.iter().find(|s| s.len() != nv) {
            return Err(Error::shape(nv, s.len()));
        }
        let mut out = Self::zeros(time.steps, mesh.n_elements());
        for l in 0..time.steps {
            for (e, el) in mesh.elements().iter().enumerate() {
                let avg = |s: &Vec<f64>| el.nodes.iter().map(|&i| s[i]).sum::<f64>() / el.nodes.len() as f64;
                out.values[l * out.elements + e] = 0.5 * (avg(&series[l]) + avg(&series[l + 1]));
            }
        }
        Ok(out)
    }

    /// Samples a boundary trace given by nodal values of a volume mesh
    /// (`series[j][vertex]` at the nodes of `source_time`): values at element
    /// midpoints, interpolated along the nearest boundary facet, averaged
    /// over each interval with the trapezoid rule. The source time step must
    /// divide the boundary time step.
    pub fn sample_trace(
        mesh: &BoundaryMesh<2>,
        time: TimeGrid,
        source: &Mesh<2>,
        source_time: TimeGrid,
        series: &[Vec<f64>],
    ) -> Result<Self> {
        if series.len() != source_time.n_nodes() {
            return Err(Error::shape(source_time.n_nodes(), series.len()));
        }
        let ratio = source_time.steps / time.steps;
        if ratio == 0 || ratio * time.steps != source_time.steps || (source_time.t_final - time.t_final).abs() > 1e-12 * time.t_final {
            return Err(Error::invalid(format!(
                "source grid ({}, {}) must refine the boundary grid ({}, {}) by an integer factor",
                source_time.t_final, source_time.steps, time.t_final, time.steps
            )));
        }
        let weights: Vec<(usize, usize, f64)> = mesh
            .elements()
            .iter()
            .map(|el| {
                let x = el.centroid;
                let mut best = (f64::INFINITY, 0, 0, 0.0);
                for f in 0..source.n_boundary_facets() {
                    let face = source.boundary_facet(f);
                    let (a, b) = (source.vertex(face[0]), source.vertex(face[1]));
                    let t = b - a;
                    let s = ((x - a).dot(&t) / t.norm_squared()).clamp(0.0, 1.0);
                    let d = (x - (a + t * s)).norm();
                    if d < best.0 {
                        best = (d, face[0], face[1], s);
                    }
                }
                (best.1, best.2, best.3)
            })
            .collect();
        let mut out = Self::zeros(time.steps, mesh.n_elements());
        for l in 0..time.steps {
            for (e, &(a, b, s)) in weights.iter().enumerate() {
                let mut v = 0.0;
                for k in 0..=ratio {
                    let w = if k == 0 || k == ratio { 0.5 } else { 1.0 } / ratio as f64;
                    let snap = &series[l * ratio + k];
                    v += w * ((1.0 - s) * snap[a] + s * snap[b]);
                }
                out.values[l * out.elements + e] = v;
            }
        }
        Ok(out)
    }

    pub fn n_intervals(&self) -> usize {
        self.intervals
    }

    pub fn n_elements(&self) -> usize {
        self.elements
    }

    pub fn get(&self, interval: usize, element: usize) -> f64 {
        self.values[interval * self.elements + element]
    }

    pub fn set(&mut self, interval: usize, element: usize, v: f64) {
        self.values[interval * self.elements + element] = v;
    }

    pub fn interval(&self, l: usize) -> &[f64] {
        &self.values[l * self.elements..(l + 1) * self.elements]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn combine(&self, a: f64, other: &Self, b: f64) -> Result<Self> {
        self.check_same(other)?;
        let values = self.values.iter().zip(&other.values).map(|(x, y)| a * x + b * y).collect();
        Ok(Self { values, ..*self })
    }

    pub fn scaled(&self, a: f64) -> Self {
        Self { values: self.values.iter().map(|v| a * v).collect(), ..*self }
    }

    fn check_same(&self, other: &Self) -> Result<()> {
        if (self.intervals, self.elements) != (other.intervals, other.elements) {
            return Err(Error::shape(
                format!("{} x {}", self.intervals, self.elements),
                format!("{} x {}", other.intervals, other.elements),
            ));
        }
        Ok(())
    }

    /// `L²(Σ_T)` norm, with `measures[e]` the element measures.
    pub fn l2_norm(&self, measures: &[f64], dt: f64) -> f64 {
        self.values
            .chunks(self.elements)
            .flat_map(|row| row.iter().zip(measures).map(|(v, m)| v * v * m * dt))
            .sum::<f64>()
            .sqrt()
    }

    /// CSV with header `interval,element,value`.
    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "interval,element,value")?;
        for l in 0..self.intervals {
            for e in 0..self.elements {
                writeln!(w, "{l},{e},{:e}", self.get(l, e))?;
            }
        }
        Ok(())
    }
}

/// The four boundary integral operators of the heat equation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OperatorKind {
    /// `𝒱`, trace of the single layer potential.
    SingleLayer,
    /// `𝒦`, averaged trace of the double layer potential.
    DoubleLayer,
    /// `𝒩`, averaged normal derivative of the single layer potential.
    AdjointDoubleLayer,
    /// `𝒲`, normal derivative of the double layer potential.
    Hypersingular,
}

impl OperatorKind {
    fn code(self) -> u32 {
        match self {
            Self::SingleLayer => 0,
            Self::DoubleLayer => 1,
            Self::AdjointDoubleLayer => 2,
            Self::Hypersingular => 3,
        }
    }

    fn from_code(c: u32) -> Result<Self> {
        Ok(match c {
            0 => Self::SingleLayer,
            1 => Self::DoubleLayer,
            2 => Self::AdjointDoubleLayer,
            3 => Self::Hypersingular,
            _ => return Err(Error::invalid(format!("unknown operator code {c}"))),
        })
    }
}

/// Galerkin matrix of a causal boundary operator, stored as one
/// `E × E` block per time lag: `(Aψ)_k = Σ_{m ≤ k} blocks[m] ψ_{k−m}`.
/// Block entries are `∫_{I_k}∫_{Γ_i} ∫_{I_ℓ}∫_{Γ_j} kernel` for lag `k − ℓ`.
#[derive(Debug, Clone, PartialEq)]
pub struct CausalOperator {
    kind: OperatorKind,
    dt: f64,
    measures: Vec<f64>,
    blocks: Vec<DMatrix<f64>>,
}

const MAGIC: &[u8; 8] = b"SHQBEM01";

impl CausalOperator {
    pub fn kind(&self) -> OperatorKind {
        self.kind
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn n_lags(&self) -> usize {
        self.blocks.len()
    }

    pub fn n_elements(&self) -> usize {
        self.measures.len()
    }

    pub fn element_measures(&self) -> &[f64] {
        &self.measures
    }

    pub fn block(&self, lag: usize) -> &DMatrix<f64> {
        &self.blocks[lag]
    }

    fn check(&self, x: &BoundaryDensity) -> Result<()> {
        if x.elements != self.n_elements() || x.intervals > self.n_lags() {
            return Err(Error::shape(
                format!("<= {} x {}", self.n_lags(), self.n_elements()),
                format!("{} x {}", x.intervals, x.elements),
            ));
        }
        Ok(())
    }

    /// Galerkin mass matrix (diagonal, `Δt |Γ_e|`) applied to `x`.
    pub fn mass_apply(&self, x: &BoundaryDensity) -> Result<BoundaryDensity> {
        self.check(x)?;
        let mut out = x.clone();
        for row in out.values.chunks_mut(x.elements) {
            for (v, m) in row.iter_mut().zip(&self.measures) {
                *v *= m * self.dt;
            }
        }
        Ok(out)
    }

    /// Tested values `⟨Aψ, χ_{k,i}⟩`.
    pub fn apply(&self, x: &BoundaryDensity) -> Result<BoundaryDensity> {
        self.check(x)?;
        let n = x.intervals;
        let e = x.elements;
        let mut out = BoundaryDensity::zeros(n, e);
        for k in 0..n {
            let mut acc = DVector::zeros(e);
            for m in 0..=k {
                let src = DVector::from_column_slice(x.interval(k - m));
                acc.gemv(1.0, &self.blocks[m], &src, 1.0);
            }
            out.values[k * e..(k + 1) * e].copy_from_slice(acc.as_slice());
        }
        Ok(out)
    }

    /// Tested values of `(½I + sign·A)x`.
    pub fn apply_second_kind(&self, x: &BoundaryDensity, sign: f64) -> Result<BoundaryDensity> {
        self.mass_apply(x)?.combine(0.5, &self.apply(x)?, sign)
    }

    /// Binary layout, little endian: 8-byte magic `SHQBEM01`, `u32` operator
    /// code (0 = V, 1 = K, 2 = N, 3 = W), `u32` zero, `u64` element count
    /// `E`, `u64` lag count `L`, `f64` time step, `E` element measures, then
    /// `L` blocks of `E × E` values in row-major order.
    pub fn write_binary(&self, mut w: impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&self.kind.code().to_le_bytes())?;
        w.write_all(&0u32.to_le_bytes())?;
        w.write_all(&(self.n_elements() as u64).to_le_bytes())?;
        w.write_all(&(self.n_lags() as u64).to_le_bytes())?;
        w.write_all(&self.dt.to_le_bytes())?;
        for m in &self.measures {
            w.write_all(&m.to_le_bytes())?;
        }
        for b in &self.blocks {
            for i in 0..b.nrows() {
                for j in 0..b.ncols() {
                    w.write_all(&b[(i, j)].to_le_bytes())?;
                }
            }
        }
        Ok(())
    }

    pub fn read_binary(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::invalid("not a boundary operator file"));
        }
        let mut b4 = [0u8; 4];
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b4)?;
        let kind = OperatorKind::from_code(u32::from_le_bytes(b4))?;
        r.read_exact(&mut b4)?;
        let mut next_u64 = |r: &mut dyn Read| -> Result<u64> {
            r.read_exact(&mut b8)?;
            Ok(u64::from_le_bytes(b8))
        };
        let e = next_u64(&mut r)? as usize;
        let lags = next_u64(&mut r)? as usize;
        let read_f64 = |r: &mut dyn Read| -> Result<f64> {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            Ok(f64::from_le_bytes(b))
        };
        let dt = read_f64(&mut r)?;
        let measures = (0..e).map(|_| read_f64(&mut r)).collect::<Result<Vec<_>>>()?;
        let mut blocks = Vec::with_capacity(lags);
        for _ in 0..lags {
            let vals = (0..e * e).map(|_| read_f64(&mut r)).collect::<Result<Vec<_>>>()?;
            blocks.push(DMatrix::from_row_slice(e, e, &vals));
        }
        Ok(Self { kind, dt, measures, blocks })
    }
}

fn to2<const D: usize>(p: &Point<D>) -> Point<2> {
    Point::<2>::new(p[0], p[1])
}

/// Segment of the plane with its arc-length parametrisation.
struct Segment {
    a: Point<2>,
    t: Point<2>,
    len: f64,
    normal: Point<2>,
}

impl Segment {
    fn from_element<const D: usize>(el: &BoundaryElement<D>) -> Self {
        let a = to2(&el.corners[0]);
        let b = to2(&el.corners[1]);
        let len = (b - a).norm();
        Self { a, t: (b - a) / len, len, normal: to2(&el.normal) }
    }

    fn at(&self, s: f64) -> Point<2> {
        self.a + self.t * s
    }

    fn b(&self) -> Point<2> {
        self.at(self.len)
    }

    fn distance_to(&self, x: &Point<2>) -> f64 {
        let s = (x - self.a).dot(&self.t).clamp(0.0, self.len);
        (x - self.at(s)).norm()
    }

    fn distance_to_segment(&self, o: &Segment) -> f64 {
        self.distance_to(&o.a).min(self.distance_to(&o.b())).min(o.distance_to(&self.a)).min(o.distance_to(&self.b()))
    }
}

struct Rules {
    graded: GradedRule,
}

fn rules() -> &'static Rules {
    static RULES: OnceLock<Rules> = OnceLock::new();
    RULES.get_or_init(|| Rules { graded: GradedRule::new(12, 0.25, 8) })
}

fn gauss(n: usize) -> &'static GaussLegendre {
    static RULES: OnceLock<Vec<GaussLegendre>> = OnceLock::new();
    &RULES.get_or_init(|| (0..=32).map(|n| GaussLegendre::new(n.max(1))).collect())[n.min(32)]
}

/// Visit `(s, w)` on `[from, to]` with nodes graded towards `from`.
fn graded_piece(from: f64, to: f64, mut visit: impl FnMut(f64, f64)) {
    let len = (to - from).abs();
    if len == 0.0 {
        return;
    }
    let g = &rules().graded;
    for (x, w) in g.nodes.iter().zip(&g.weights) {
        visit(from + (to - from) * x, w * len);
    }
}

/// Quadrature on a segment for integrands singular or peaked near `x`.
fn visit_segment(seg: &Segment, x: &Point<2>, mut visit: impl FnMut(&Point<2>, f64)) {
    let dist = seg.distance_to(x);
    if dist < seg.len {
        let foot = (x - seg.a).dot(&seg.t).clamp(0.0, seg.len);
        graded_piece(foot, 0.0, |s, w| visit(&seg.at(s), w));
        graded_piece(foot, seg.len, |s, w| visit(&seg.at(s), w));
    } else {
        let n = (6.0 + 6.0 * seg.len / dist).ceil() as usize;
        let g = gauss(n);
        for (s, w) in g.nodes.iter().zip(&g.weights) {
            visit(&seg.at(s * seg.len), w * seg.len);
        }
    }
}

/// Quadrature on a segment graded towards both endpoints.
fn visit_segment_endpoints(seg: &Segment, mut visit: impl FnMut(&Point<2>, f64)) {
    let half = 0.5 * seg.len;
    graded_piece(0.0, half, |s, w| visit(&seg.at(s), w));
    graded_piece(seg.len, half, |s, w| visit(&seg.at(s), w));
}

/// Quadrature on a triangle, uniformly subdivided until the pieces are
/// small compared with the distance to `x`.
fn visit_triangle<const D: usize>(el: &BoundaryElement<D>, x: &Point<D>, mut visit: impl FnMut(&Point<D>, f64)) {
    let rule = SimplexRule::high_order(2);
    let dist = el.distance_to(x).max(1e-300);
    let mut level = 0u32;
    while level < 6 && el.diameter() / 2f64.powi(level as i32) > 0.5 * dist {
        level += 1;
    }
    let n = 1usize << level;
    let [p0, p1, p2] = [el.corners[0], el.corners[1], el.corners[2]];
    let e1 = (p1 - p0) / n as f64;
    let e2 = (p2 - p0) / n as f64;
    let sub_measure = el.measure / (n * n) as f64;
    let mut emit = |a: Point<D>, b: Point<D>, c: Point<D>| {
        for (bary, w) in rule.barycentric.iter().zip(&rule.weights) {
            visit(&(a * bary[0] + b * bary[1] + c * bary[2]), w * sub_measure);
        }
    };
    for i in 0..n {
        for j in 0..n - i {
            let a = p0 + e1 * i as f64 + e2 * j as f64;
            emit(a, a + e1, a + e2);
            if i + j + 1 < n {
                emit(a + e1, a + e1 + e2, a + e2);
            }
        }
    }
}

fn visit_element<const D: usize>(el: &BoundaryElement<D>, x: &Point<D>, mut visit: impl FnMut(&Point<D>, f64)) {
    if D == 2 {
        let seg = Segment::from_element(el);
        visit_segment(&seg, &to2(x), |y, w| visit(&Point::<D>::from_fn(|i, _| y[i]), w));
    } else {
        visit_triangle(el, x, visit);
    }
}

/// Assemble the Galerkin blocks of `which` for lags `0..N`.
pub fn assemble<const D: usize>(mesh: &BoundaryMesh<D>, time: TimeGrid, which: OperatorKind) -> Result<CausalOperator> {
    if D != 2 {
        return Err(Error::Unsupported(format!("operator assembly in dimension {D}")));
    }
    let measures: Vec<f64> = mesh.elements().iter().map(|e| e.measure).collect();
    let segments: Vec<Segment> = mesh.elements().iter().map(Segment::from_element).collect();
    let dt = time.dt();
    let n = time.steps;
    let e = segments.len();
    let blocks = match which {
        OperatorKind::SingleLayer => assemble_blocks(&segments, dt, n, Kernel::Single),
        OperatorKind::DoubleLayer => assemble_blocks(&segments, dt, n, Kernel::Double),
        OperatorKind::AdjointDoubleLayer => {
            assemble_blocks(&segments, dt, n, Kernel::Double).into_iter().map(|b| b.transpose()).collect()
        }
        OperatorKind::Hypersingular => {
            return Err(Error::Unsupported("assembly of the hypersingular operator".into()));
        }
    };
    debug_assert!(blocks.iter().all(|b| b.nrows() == e));
    Ok(CausalOperator { kind: which, dt, measures, blocks })
}

#[derive(Clone, Copy)]
enum Kernel {
    Single,
    Double,
}

impl Kernel {
    /// Doubly time-integrated kernel for source `y` with normal `ny`.
    fn h(self, tau: f64, x: &Point<2>, y: &Point<2>, ny: &Point<2>) -> f64 {
        let d = x - y;
        let r = d.norm();
        match self {
            Kernel::Single => double_time_integral(tau, r),
            Kernel::Double => double_time_integral_normal(tau, r, d.dot(ny)),
        }
    }
}

fn assemble_blocks(segments: &[Segment], dt: f64, n: usize, kernel: Kernel) -> Vec<DMatrix<f64>> {
    let e = segments.len();
    let rows: Vec<Vec<Vec<f64>>> = (0..e)
        .into_par_iter()
        .map(|i| (0..e).map(|j| pair_entries(&segments[i], &segments[j], i == j, dt, n, kernel)).collect())
        .collect();
    (0..n).map(|m| DMatrix::from_fn(e, e, |i, j| rows[i][j][m])).collect()
}

/// All lags of one test/trial element pair.
fn pair_entries(si: &Segment, sj: &Segment, same: bool, dt: f64, n: usize, kernel: Kernel) -> Vec<f64> {
    let mut out = vec![0.0; n];
    if same && matches!(kernel, Kernel::Double) {
        return out;
    }
    let dist = si.distance_to_segment(sj);
    if dist * dist / (4.0 * n as f64 * dt) > EXPONENT_CUTOFF {
        return out;
    }
    let near = dist < si.len.max(sj.len);
    let rho = dist.max(dt.sqrt());
    let q = (3.0 + 2.0 * si.len.max(sj.len) / rho).ceil() as usize;
    let g = gauss(q.min(16));
    let mut h = vec![0.0; n + 1];
    for (sx, wx) in g.nodes.iter().zip(&g.weights) {
        let x = si.at(sx * si.len);
        for (sy, wy) in g.nodes.iter().zip(&g.weights) {
            let mut y = sj.at(sy * sj.len);
            let mut r2 = (x - y).norm_squared();
            if r2 == 0.0 {
                // coincident nodes: the log terms cancel for lags >= 2, so a
                // tiny tangential offset gives the limit; lags 0 and 1 are
                // recomputed below
                y = sj.at((sy + 1e-9) * sj.len);
                r2 = (x - y).norm_squared();
            }
            let w = wx * wy * si.len * sj.len;
            let first = ((r2 / (4.0 * EXPONENT_CUTOFF * dt)).floor() as usize).max(1);
            for (k, hk) in h.iter_mut().enumerate() {
                *hk = if k < first { 0.0 } else { kernel.h(k as f64 * dt, &x, &y, &sj.normal) };
            }
            for (m, o) in out.iter_mut().enumerate() {
                let prev = if m == 0 { 0.0 } else { h[m - 1] };
                *o += w * (h[m + 1] - 2.0 * h[m] + prev);
            }
        }
    }
    if near {
        // lags 0 and 1 carry the log singularity; redo them with graded rules
        let mut l0 = 0.0;
        let mut l1 = 0.0;
        visit_segment_endpoints(si, |x, wx| {
            visit_segment(sj, x, |y, wy| {
                if (x - y).norm_squared() == 0.0 {
                    return;
                }
                let h1 = kernel.h(dt, x, y, &sj.normal);
                let h2 = kernel.h(2.0 * dt, x, y, &sj.normal);
                l0 += wx * wy * h1;
                l1 += wx * wy * (h2 - 2.0 * h1);
            })
        });
        out[0] = l0;
        if n > 1 {
            out[1] = l1;
        }
    }
    out
}

/// Marching-on-in-time solver for one operator and equation kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolveKind {
    /// `Aψ = g`
    First,
    /// `(½I + A)ψ = g`
    SecondPlus,
    /// `(½I − A)ψ = g`
    SecondMinus,
}

enum Stepping {
    Cholesky(nalgebra::Cholesky<f64, nalgebra::Dyn>),
    Lu(nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>),
}

pub struct MotSolver<'a> {
    op: &'a CausalOperator,
    kind: SolveKind,
    step: Stepping,
}

impl std::fmt::Debug for MotSolver<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MotSolver").field("operator", &self.op.kind).field("kind", &self.kind).finish()
    }
}

impl<'a> MotSolver<'a> {
    pub fn new(op: &'a CausalOperator, kind: SolveKind) -> Result<Self> {
        let step = match kind {
            SolveKind::First => {
                if op.kind != OperatorKind::SingleLayer {
                    return Err(Error::invalid("first-kind equations need the single layer operator"));
                }
                let b0 = op.blocks[0].clone();
                Stepping::Cholesky(nalgebra::Cholesky::new(b0).ok_or_else(|| {
                    Error::LinearSolve("lag-0 block is not positive definite; refine the time step or the mesh".into())
                })?)
            }
            SolveKind::SecondPlus | SolveKind::SecondMinus => {
                let sign = if kind == SolveKind::SecondPlus { 1.0 } else { -1.0 };
                let mut m = op.blocks[0].scale(sign);
                for (i, mi) in op.measures.iter().enumerate() {
                    m[(i, i)] += 0.5 * mi * op.dt;
                }
                let lu = m.lu();
                if !lu.is_invertible() {
                    return Err(Error::LinearSolve("singular second-kind stepping block".into()));
                }
                Stepping::Lu(lu)
            }
        };
        Ok(Self { op, kind, step })
    }

    fn history_sign(&self) -> f64 {
        match self.kind {
            SolveKind::SecondMinus => -1.0,
            _ => 1.0,
        }
    }

    /// Solve with a tested right-hand side `⟨g, χ_{k,i}⟩`.
    pub fn solve_load(&self, load: &BoundaryDensity) -> Result<BoundaryDensity> {
        self.op.check(load)?;
        let cols = DMatrix::from_column_slice(load.values.len(), 1, &load.values);
        let x = self.solve_columns(&cols)?;
        BoundaryDensity::from_values(load.intervals, load.elements, x.as_slice().to_vec())
    }

    /// Solve `A X = B` where each column of `B` is a flattened tested load.
    pub fn solve_columns(&self, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let e = self.op.n_elements();
        if !b.nrows().is_multiple_of(e) || b.nrows() / e > self.op.n_lags() {
            return Err(Error::shape(format!("multiple of {e} up to {}", e * self.op.n_lags()), b.nrows()));
        }
        let n = b.nrows() / e;
        let c = b.ncols();
        let sign = self.history_sign();
        let mut x = DMatrix::zeros(b.nrows(), c);
        for k in 0..n {
            let mut rhs = b.rows(k * e, e).into_owned();
            for m in 1..=k {
                let prev = x.rows((k - m) * e, e);
                rhs.gemm(-sign, &self.op.blocks[m], &prev, 1.0);
            }
            let sol = match &self.step {
                Stepping::Cholesky(ch) => ch.solve(&rhs),
                Stepping::Lu(lu) => lu.solve(&rhs).ok_or_else(|| Error::LinearSolve("second-kind step".into()))?,
            };
            x.rows_mut(k * e, e).copy_from(&sol);
        }
        Ok(x)
    }

    /// Solve with piecewise constant data `g` (tested against the P0 basis).
    pub fn solve(&self, data: &BoundaryDensity) -> Result<BoundaryDensity> {
        self.solve_load(&self.op.mass_apply(data)?)
    }
}

/// `Aψ = g` (first kind) or `(½I ± A)ψ = g` for piecewise constant data `g`.
pub fn solve_boundary_equation(op: &CausalOperator, rhs: &BoundaryDensity, kind: SolveKind) -> Result<BoundaryDensity> {
    MotSolver::new(op, kind)?.solve(rhs)
}

/// Potential kernel family used by [`layer_potential_row`].
#[derive(Clone, Copy)]
enum Potential {
    Single,
    Double,
}

/// Coefficients `c[ℓ·E + e]` with `potential(t0, x0) = Σ c ψ`.
fn layer_potential_row<const D: usize>(
    mesh: &BoundaryMesh<D>,
    time: TimeGrid,
    t0: f64,
    x0: &Point<D>,
    which: Potential,
) -> Result<Vec<f64>> {
    let kernel = HeatKernel::new(D)?;
    let e = mesh.n_elements();
    let n = time.steps;
    let mut row = vec![0.0; n * e];
    let last = (0..n).take_while(|&l| time.node(l) < t0).count();
    if last == 0 {
        return Ok(row);
    }
    if mesh.distance_to(x0) < 1e-10 * mesh.h() {
        log::warn!("layer potential evaluated on the boundary at {:?}", x0.as_slice());
    }
    let mut acc = vec![0.0; last + 1];
    for (ei, el) in mesh.elements().iter().enumerate() {
        acc.iter_mut().for_each(|a| *a = 0.0);
        visit_element(el, x0, |y, w| {
            let d = x0 - y;
            let r = d.norm();
            if r == 0.0 {
                return;
            }
            for (j, a) in acc.iter_mut().enumerate() {
                let tau = t0 - time.node(j);
                *a += w * match which {
                    Potential::Single => kernel.time_integral(tau, r),
                    Potential::Double => kernel.normal_time_integral(tau, r, d.dot(&el.normal)),
                };
            }
        });
        for l in 0..last {
            row[l * e + ei] = acc[l] - acc[l + 1];
        }
    }
    Ok(row)
}

fn check_density<const D: usize>(mesh: &BoundaryMesh<D>, time: TimeGrid, psi: &BoundaryDensity) -> Result<()> {
    if psi.elements != mesh.n_elements() || psi.intervals != time.steps {
        return Err(Error::shape(
            format!("{} x {}", time.steps, mesh.n_elements()),
            format!("{} x {}", psi.intervals, psi.elements),
        ));
    }
    Ok(())
}

/// Single layer potential `(K₀ψ)(t0, x0)`.
pub fn eval_single_layer<const D: usize>(
    mesh: &BoundaryMesh<D>,
    time: TimeGrid,
    psi: &BoundaryDensity,
    t0: f64,
    x0: &Point<D>,
) -> Result<f64> {
    check_density(mesh, time, psi)?;
    let row = layer_potential_row(mesh, time, t0, x0, Potential::Single)?;
    Ok(row.iter().zip(&psi.values).map(|(a, b)| a * b).sum())
}

/// Double layer potential `(K₁w)(t0, x0)` with the kernel `∂G/∂n_y`.
pub fn eval_double_layer<const D: usize>(
    mesh: &BoundaryMesh<D>,
    time: TimeGrid,
    w: &BoundaryDensity,
    t0: f64,
    x0: &Point<D>,
) -> Result<f64> {
    check_density(mesh, time, w)?;
    let row = layer_potential_row(mesh, time, t0, x0, Potential::Double)?;
    Ok(row.iter().zip(&w.values).map(|(a, b)| a * b).sum())
}

/// Matrix mapping flattened densities to single layer values at `probes`.
pub fn single_layer_matrix<const D: usize>(
    mesh: &BoundaryMesh<D>,
    time: TimeGrid,
    probes: &[(f64, Point<D>)],
) -> Result<DMatrix<f64>> {
    potential_matrix(mesh, time, probes, Potential::Single)
}

/// Matrix mapping flattened densities to double layer values at `probes`.
pub fn double_layer_matrix<const D: usize>(
    mesh: &BoundaryMesh<D>,
    time: TimeGrid,
    probes: &[(f64, Point<D>)],
) -> Result<DMatrix<f64>> {
    potential_matrix(mesh, time, probes, Potential::Double)
}

fn potential_matrix<const D: usize>(
    mesh: &BoundaryMesh<D>,
    time: TimeGrid,
    probes: &[(f64, Point<D>)],
    which: Potential,
) -> Result<DMatrix<f64>> {
    let rows = probes
        .par_iter()
        .map(|(t, x)| layer_potential_row(mesh, time, *t, x, which))
        .collect::<Result<Vec<_>>>()?;
    let cols = time.steps * mesh.n_elements();
    Ok(DMatrix::from_fn(probes.len(), cols, |i, j| rows[i][j]))
}

/// `u' = K₀ψ` at every probe.
pub fn represent_interior<const D: usize>(
    mesh: &BoundaryMesh<D>,
    time: TimeGrid,
    psi: &BoundaryDensity,
    probes: &[(f64, Point<D>)],
) -> Result<Vec<f64>> {
    check_density(mesh, time, psi)?;
    let p = single_layer_matrix(mesh, time, probes)?;
    Ok((p * DVector::from_column_slice(&psi.values)).as_slice().to_vec())
}

/// Boundary integral representations of the solution of a heat problem with
/// Dirichlet data `g` and zero initial value.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Representation {
    /// `u = K₀ψ − K₁g` with `𝒱ψ = (½I + 𝒦)g`.
    Direct,
    /// `u = K₀ψ − K₁g` with `(½I − 𝒩)ψ = 𝒲g`.
    DirectSecondKind,
    /// `u = K₀ψ` with `𝒱ψ = g`.
    #[default]
    SingleLayer,
    /// `u = K₁w` with `(½I − 𝒦)w = −g`.
    DoubleLayer,
}

/// Assembled operators for one boundary mesh and time grid.
#[derive(Debug, Clone)]
pub struct DirichletBem {
    pub mesh: BoundaryMesh<2>,
    pub time: TimeGrid,
    pub representation: Representation,
    single: Option<CausalOperator>,
    double: Option<CausalOperator>,
}

/// Density (or densities) of a represented solution.
#[derive(Debug, Clone)]
pub struct RepresentedSolution {
    pub representation: Representation,
    /// `ψ` for the single-layer based forms, `w` for the double layer form.
    pub density: BoundaryDensity,
    /// Dirichlet data, needed by the direct form.
    pub data: BoundaryDensity,
}

impl DirichletBem {
    pub fn new(mesh: BoundaryMesh<2>, time: TimeGrid, representation: Representation) -> Result<Self> {
        let (needs_v, needs_k) = match representation {
            Representation::SingleLayer => (true, false),
            Representation::Direct => (true, true),
            Representation::DoubleLayer => (false, true),
            Representation::DirectSecondKind => {
                return Err(Error::Unsupported("second-kind direct form needs the hypersingular operator".into()));
            }
        };
        let single = needs_v.then(|| assemble(&mesh, time, OperatorKind::SingleLayer)).transpose()?;
        let double = needs_k.then(|| assemble(&mesh, time, OperatorKind::DoubleLayer)).transpose()?;
        Ok(Self { mesh, time, representation, single, double })
    }

    pub fn single_layer(&self) -> Option<&CausalOperator> {
        self.single.as_ref()
    }

    pub fn double_layer(&self) -> Option<&CausalOperator> {
        self.double.as_ref()
    }

    pub fn solve(&self, data: &BoundaryDensity) -> Result<RepresentedSolution> {
        check_density(&self.mesh, self.time, data)?;
        let density = match self.representation {
            Representation::SingleLayer => solve_boundary_equation(self.single.as_ref().unwrap(), data, SolveKind::First)?,
            Representation::Direct => {
                let load = self.double.as_ref().unwrap().apply_second_kind(data, 1.0)?;
                MotSolver::new(self.single.as_ref().unwrap(), SolveKind::First)?.solve_load(&load)?
            }
            Representation::DoubleLayer => {
                solve_boundary_equation(self.double.as_ref().unwrap(), &data.scaled(-1.0), SolveKind::SecondMinus)?
            }
            Representation::DirectSecondKind => unreachable!(),
        };
        Ok(RepresentedSolution { representation: self.representation, density, data: data.clone() })
    }

    pub fn evaluate(&self, sol: &RepresentedSolution, probes: &[(f64, Point<2>)]) -> Result<Vec<f64>> {
        let dot = |m: DMatrix<f64>, v: &BoundaryDensity| (m * DVector::from_column_slice(&v.values)).as_slice().to_vec();
        Ok(match sol.representation {
            Representation::SingleLayer => dot(single_layer_matrix(&self.mesh, self.time, probes)?, &sol.density),
            Representation::Direct => {
                let a = dot(single_layer_matrix(&self.mesh, self.time, probes)?, &sol.density);
                let b = dot(double_layer_matrix(&self.mesh, self.time, probes)?, &sol.data);
                a.iter().zip(&b).map(|(x, y)| x - y).collect()
            }
            Representation::DoubleLayer => dot(double_layer_matrix(&self.mesh, self.time, probes)?, &sol.density),
            Representation::DirectSecondKind => unreachable!(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn circle(n: usize) -> BoundaryMesh<2> {
        let pts = (0..n)
            .map(|k| {
                let a = 2.0 * PI * k as f64 / n as f64;
                Point::<2>::new(a.cos(), a.sin())
            })
            .collect();
        BoundaryMesh::polygon(pts).unwrap()
    }

    /// Composite Gauss on `[a, b]` with `panels` panels.
    fn composite(a: f64, b: f64, panels: usize, f: impl Fn(f64) -> f64) -> f64 {
        let g = GaussLegendre::new(10);
        let h = (b - a) / panels as f64;
        (0..panels).map(|p| g.integrate(a + p as f64 * h, a + (p + 1) as f64 * h, &f)).sum()
    }

    #[test]
    fn kernel_values() {
        let k2 = HeatKernel::new(2).unwrap();
        let k3 = HeatKernel::new(3).unwrap();
        assert_eq!(k2.eval(-1.0, &[0.3, 0.1]), 0.0);
        assert_eq!(k3.eval(0.0, &[0.0; 3]), 0.0);
        assert!((k3.eval(1.0, &[0.0; 3]) - (4.0 * PI).powf(-1.5)).abs() < 1e-16);
        // Gaussian normalisation on [-3, 3]^2 at t = 0.1
        let g = GaussLegendre::new(40);
        let mass = g.integrate(-3.0, 3.0, |x| g.integrate(-3.0, 3.0, |y| k2.eval(0.1, &[x, y])));
        assert!((mass - 1.0).abs() < 1e-6);
        assert!(HeatKernel::new(4).is_err());
    }

    #[test]
    fn closed_form_time_integrals_match_quadrature() {
        for dim in [2, 3] {
            let k = HeatKernel::new(dim).unwrap();
            let (tau, r, p) = (0.3, 0.4, 0.25);
            let x = [r, 0.0, 0.0];
            let g = |s: f64| k.eval(s, &x[..dim]);
            let single = composite(0.0, tau, 400, g);
            assert!((k.time_integral(tau, r) - single).abs() < 1e-11 * single, "dim {dim}");
            let normal = composite(0.0, tau, 400, |s| g(s) * p / (2.0 * s));
            assert!((k.normal_time_integral(tau, r, p) - normal).abs() < 1e-10 * normal.abs(), "dim {dim}");
        }
        let k = HeatKernel::new(2).unwrap();
        let (tau, r) = (0.7, 0.3);
        let h = composite(0.0, tau, 400, |s| k.time_integral(s, r));
        assert!((double_time_integral(tau, r) - h).abs() < 1e-11);
        let hn = composite(0.0, tau, 400, |s| k.normal_time_integral(s, r, 0.2));
        assert!((double_time_integral_normal(tau, r, 0.2) - hn).abs() < 1e-11);
    }

    #[test]
    fn polygon_orientation() {
        let m = circle(8);
        assert!((m.measure() - 16.0 * (PI / 8.0).sin()).abs() < 1e-14);
        for el in m.elements() {
            assert!(el.normal.dot(&el.centroid) > 0.0);
        }
        let mut pts: Vec<Point<2>> = m.vertices().to_vec();
        pts.reverse();
        assert!(BoundaryMesh::polygon(pts).is_err());
    }

    #[test]
    fn boundary_of_disk_mesh() {
        let mesh = Mesh::disk(Point::<2>::zeros(), 1.0, 4).unwrap();
        let b = BoundaryMesh::from_mesh(&mesh);
        assert_eq!(b.n_elements(), 24);
        for el in b.elements() {
            assert!((el.normal - el.centroid.normalize()).norm() < 1e-12);
        }
    }

    #[test]
    fn self_block_matches_one_dimensional_oracle() {
        // ∫∫ H(Δt, |s − s'|) over [0, L]^2 = 2 ∫_0^L (L − u) H(Δt, u) du, with u = L w²
        let m = circle(12);
        let time = TimeGrid::new(0.5, 8).unwrap();
        let v = assemble(&m, time, OperatorKind::SingleLayer).unwrap();
        let l = m.element(0).measure;
        let dt = time.dt();
        let oracle = 2.0 * composite(0.0, 1.0, 200, |w| (l - l * w * w) * double_time_integral(dt, l * w * w) * 2.0 * l * w);
        assert!((v.block(0)[(0, 0)] - oracle).abs() < 2e-8 * oracle, "{} vs {oracle}", v.block(0)[(0, 0)]);
        let h2 = |u: f64| double_time_integral(2.0 * dt, u) - 2.0 * double_time_integral(dt, u);
        let oracle1 = 2.0 * composite(0.0, 1.0, 200, |w| (l - l * w * w) * h2(l * w * w) * 2.0 * l * w);
        assert!((v.block(1)[(0, 0)] - oracle1).abs() < 2e-8 * oracle1.abs());
        for k in 2..8 {
            let hk = |u: f64| {
                let t = k as f64 * dt;
                double_time_integral(t + dt, u) - 2.0 * double_time_integral(t, u) + double_time_integral(t - dt, u)
            };
            let oracle = 2.0 * composite(0.0, 1.0, 200, |w| (l - l * w * w) * hk(l * w * w) * 2.0 * l * w);
            assert!((v.block(k)[(0, 0)] - oracle).abs() < 1e-8 * oracle.abs(), "lag {k}");
        }
    }

    #[test]
    fn single_layer_blocks_are_symmetric_positive_and_decay() {
        let m = circle(16);
        let time = TimeGrid::new(1.0, 12).unwrap();
        let v = assemble(&m, time, OperatorKind::SingleLayer).unwrap();
        for k in 0..v.n_lags() {
            let b = v.block(k);
            assert!((b - b.transpose()).amax() < 1e-10 * b.amax());
        }
        let eig = v.block(0).clone().symmetric_eigen();
        assert!(eig.eigenvalues.min() > 0.0);
        let norms: Vec<f64> = (1..v.n_lags()).map(|k| v.block(k).norm()).collect();
        assert!(norms.windows(2).all(|w| w[1] < w[0]), "{norms:?}");
    }

    #[test]
    fn adjoint_double_layer_is_blockwise_transpose() {
        let m = circle(10);
        let time = TimeGrid::new(1.0, 4).unwrap();
        let k = assemble(&m, time, OperatorKind::DoubleLayer).unwrap();
        let n = assemble(&m, time, OperatorKind::AdjointDoubleLayer).unwrap();
        for l in 0..4 {
            assert_eq!(k.block(l).transpose(), *n.block(l));
            for i in 0..10 {
                assert_eq!(k.block(l)[(i, i)], 0.0);
            }
        }
        assert!(matches!(assemble(&m, time, OperatorKind::Hypersingular), Err(Error::Unsupported(_))));
    }

    #[test]
    fn double_layer_of_constant_is_minus_half_on_boundary() {
        // Σ_m K_m 1 tested against χ_i tends to −½|Γ_i|Δt for late intervals
        let m = circle(32);
        let time = TimeGrid::new(50.0, 50).unwrap();
        let k = assemble(&m, time, OperatorKind::DoubleLayer).unwrap();
        let one = BoundaryDensity::from_values(50, 32, vec![1.0; 50 * 32]).unwrap();
        let y = k.apply(&one).unwrap();
        let mass = m.element(0).measure * time.dt();
        let v = y.get(49, 5) / mass;
        assert!((v + 0.5).abs() < 0.01, "{v}");
    }

    #[test]
    fn round_trip_recovers_density() {
        let m = circle(20);
        let time = TimeGrid::new(1.0, 16).unwrap();
        let v = assemble(&m, time, OperatorKind::SingleLayer).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let psi = BoundaryDensity::from_values(16, 20, (0..320).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let load = v.apply(&psi).unwrap();
        let solver = MotSolver::new(&v, SolveKind::First).unwrap();
        let back = solver.solve_load(&load).unwrap();
        let err = back.combine(1.0, &psi, -1.0).unwrap().values().iter().fold(0.0f64, |a, b| a.max(b.abs()));
        assert!(err < 1e-10, "{err}");
        let resid = v.apply(&back).unwrap().combine(1.0, &load, -1.0).unwrap();
        let rel = resid.values().iter().map(|x| x * x).sum::<f64>().sqrt()
            / load.values().iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(rel < 1e-10);
        let zero = solver.solve(&BoundaryDensity::zeros(16, 20)).unwrap();
        assert!(zero.values().iter().all(|v| *v == 0.0));

        let k = assemble(&m, time, OperatorKind::DoubleLayer).unwrap();
        for (kind, sign) in [(SolveKind::SecondPlus, 1.0), (SolveKind::SecondMinus, -1.0)] {
            let load = k.apply_second_kind(&psi, sign).unwrap();
            let back = MotSolver::new(&k, kind).unwrap().solve_load(&load).unwrap();
            let err = back.combine(1.0, &psi, -1.0).unwrap().values().iter().fold(0.0f64, |a, b| a.max(b.abs()));
            assert!(err < 1e-10, "{kind:?}: {err}");
        }
        assert!(MotSolver::new(&k, SolveKind::First).is_err());
    }

    #[test]
    fn binary_round_trip() {
        let m = circle(6);
        let time = TimeGrid::new(1.0, 3).unwrap();
        let v = assemble(&m, time, OperatorKind::DoubleLayer).unwrap();
        let mut buf = Vec::new();
        v.write_binary(&mut buf).unwrap();
        assert_eq!(buf.len(), 40 + 8 * (6 + 3 * 36));
        assert_eq!(CausalOperator::read_binary(&buf[..]).unwrap(), v);
        assert!(CausalOperator::read_binary(&b"garbage!"[..]).is_err());
    }

    #[test]
    fn potentials_vanish_and_are_causal() {
        let m = circle(12);
        let time = TimeGrid::new(1.0, 8).unwrap();
        let x0 = Point::<2>::new(0.2, -0.1);
        let zero = BoundaryDensity::zeros(8, 12);
        assert_eq!(eval_single_layer(&m, time, &zero, 0.7, &x0).unwrap(), 0.0);
        assert_eq!(eval_double_layer(&m, time, &zero, 0.7, &x0).unwrap(), 0.0);
        let mut late = BoundaryDensity::zeros(8, 12);
        for l in 5..8 {
            for e in 0..12 {
                late.set(l, e, 1.0 + e as f64);
            }
        }
        // interval 5 starts at 0.625
        assert_eq!(eval_single_layer(&m, time, &late, 0.6, &x0).unwrap(), 0.0);
        assert_eq!(eval_double_layer(&m, time, &late, 0.625, &x0).unwrap(), 0.0);
        assert!(eval_single_layer(&m, time, &late, 0.9, &x0).unwrap() > 0.0);
    }

    #[test]
    fn far_field_single_layer_matches_brute_force() {
        let m = circle(12);
        let time = TimeGrid::new(1.0, 4).unwrap();
        let mut psi = BoundaryDensity::zeros(4, 12);
        psi.set(1, 3, 1.0);
        let x0 = Point::<2>::new(-0.3, -0.5);
        let t0 = 0.8;
        let v = eval_single_layer(&m, time, &psi, t0, &x0).unwrap();
        let k = HeatKernel::new(2).unwrap();
        let el = m.element(3);
        let (a, b) = (el.corners[0], el.corners[1]);
        let oracle = composite(0.0, 1.0, 40, |s| {
            let y = a + (b - a) * s;
            let d = x0 - y;
            composite(t0 - 0.5, t0 - 0.25, 40, |tau| k.eval(tau, d.as_slice()))
        }) * el.measure;
        assert!(((v - oracle) / oracle).abs() < 1e-8, "{v} vs {oracle}");
    }

    #[test]
    fn double_layer_of_one_tends_to_minus_one() {
        let m = circle(24);
        let t_final = 1e4;
        let time = TimeGrid::new(t_final, 4).unwrap();
        let one = BoundaryDensity::from_values(4, 24, vec![1.0; 96]).unwrap();
        for x0 in [Point::<2>::new(0.0, 0.0), Point::<2>::new(0.5, 0.3)] {
            let v = eval_double_layer(&m, time, &one, t_final, &x0).unwrap();
            assert!((v + 1.0).abs() < 1e-3, "{v}");
        }
        let outside = eval_double_layer(&m, time, &one, t_final, &Point::<2>::new(2.0, 0.0)).unwrap();
        assert!(outside.abs() < 1e-3);
    }

    #[test]
    fn single_layer_is_continuous_across_the_boundary() {
        let m = circle(16);
        let time = TimeGrid::new(1.0, 8).unwrap();
        let psi = BoundaryDensity::from_fn(&m, time, |t, x| t * (1.0 + x[0]));
        let el = m.element(2);
        let t0 = 0.8;
        let jump = |d: f64| {
            let inner = eval_single_layer(&m, time, &psi, t0, &(el.centroid - el.normal * d)).unwrap();
            let outer = eval_single_layer(&m, time, &psi, t0, &(el.centroid + el.normal * d)).unwrap();
            (inner - outer).abs()
        };
        let (j1, j2) = (jump(1e-2), jump(1e-3));
        // the difference is O(δ); extrapolating linearly to δ = 0
        let extrapolated = j2 - (j1 - j2) / 9.0;
        assert!(extrapolated.abs() < 1e-4, "{j1} {j2}");
    }

    #[test]
    fn galerkin_matrix_matches_potential_on_boundary() {
        let psi_fn = |t: f64, x: &Point<2>| t * (2.0 + x[0] - x[1] * x[1]);
        let t0_index = 7;
        let mut errs = Vec::new();
        for n in [16, 32] {
            let m = circle(n);
            let time = TimeGrid::new(1.0, 8).unwrap();
            let v = assemble(&m, time, OperatorKind::SingleLayer).unwrap();
            let psi = BoundaryDensity::from_fn(&m, time, psi_fn);
            let tested = v.apply(&psi).unwrap();
            let e = 0;
            let mean = tested.get(t0_index, e) / (m.element(e).measure * time.dt());
            let tmid = (t0_index as f64 + 0.5) * time.dt();
            let pot = eval_single_layer(&m, time, &psi, tmid, &m.element(e).centroid).unwrap();
            errs.push((mean - pot).abs() / pot.abs());
        }
        assert!(errs[1] < 0.05 && errs[1] < errs[0], "{errs:?}");
    }

    #[test]
    fn representations_agree_on_a_known_solution() {
        // the three forms solve the same Dirichlet problem with u(0) = 0
        let m = circle(24);
        let time = TimeGrid::new(1.0, 16).unwrap();
        let data = BoundaryDensity::from_fn(&m, time, |t, x| t * t * (1.0 + 0.5 * x[0]));
        let probes = vec![(1.0, Point::<2>::new(0.1, 0.2)), (0.6, Point::<2>::new(-0.3, 0.0))];
        let mut values = Vec::new();
        for repr in [Representation::SingleLayer, Representation::Direct, Representation::DoubleLayer] {
            let bem = DirichletBem::new(m.clone(), time, repr).unwrap();
            let sol = bem.solve(&data).unwrap();
            values.push(bem.evaluate(&sol, &probes).unwrap());
        }
        for v in &values[1..] {
            for (a, b) in v.iter().zip(&values[0]) {
                assert!((a - b).abs() < 0.03 * b.abs(), "{values:?}");
            }
        }
        assert!(DirichletBem::new(m, time, Representation::DirectSecondKind).is_err());
    }

    #[test]
    fn triangle_potential_in_three_dimensions() {
        let mesh = Mesh::unit_cube(2).unwrap();
        let b = BoundaryMesh::from_mesh(&mesh);
        let t_final = 1e4;
        let time = TimeGrid::new(t_final, 2).unwrap();
        let one = BoundaryDensity::from_values(2, b.n_elements(), vec![1.0; 2 * b.n_elements()]).unwrap();
        let v = eval_double_layer(&b, time, &one, t_final, &Point::<3>::new(0.5, 0.5, 0.5)).unwrap();
        assert!((v + 1.0).abs() < 1e-3, "{v}");
        assert!(matches!(assemble(&b, time, OperatorKind::SingleLayer), Err(Error::Unsupported(_))));
    }
}
