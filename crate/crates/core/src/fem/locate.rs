use std::sync::Arc;

use crate::error::{Error, Result};
use crate::geometry::{self, Mat, Point};

use super::Mesh;

/// A point expressed in barycentric coordinates of one cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointLocation<const D: usize> {
    pub cell: usize,
    pub vertices: [usize; 4],
    pub bary: [f64; 4],
    /// The point lies outside the mesh and the coordinates extrapolate.
    pub extrapolated: bool,
}

impl<const D: usize> PointLocation<D> {
    pub fn interpolate(&self, values: &[f64]) -> f64 {
        (0..=D).map(|k| self.bary[k] * values[self.vertices[k]]).sum()
    }
}

/// Bucket grid over the cells of a mesh for point location.
#[derive(Debug, Clone)]
pub struct Locator<const D: usize> {
    mesh: Arc<Mesh<D>>,
    origins: Vec<Point<D>>,
    inverses: Vec<Mat<D>>,
    lo: Point<D>,
    cell_size: f64,
    dims: [usize; 3],
    buckets: Vec<Vec<usize>>,
}

const INSIDE_TOL: f64 = 1e-12;

impl<const D: usize> Locator<D> {
    pub fn new(mesh: Arc<Mesh<D>>) -> Self {
        let (lo, hi) = mesh.bounding_box();
        let extent = hi - lo;
        // about one cell per bucket on average
        let volume: f64 = extent.iter().map(|e| e.max(1e-300)).product();
        let cell_size = (volume / mesh.n_cells() as f64).powf(1.0 / D as f64).max(1e-12) * 1.5;
        let mut dims = [1usize; 3];
        for i in 0..D {
            dims[i] = ((extent[i] / cell_size).ceil() as usize).max(1);
        }
        let n_buckets: usize = dims[..D].iter().product();
        let mut buckets = vec![Vec::new(); n_buckets];
        let mut origins = Vec::with_capacity(mesh.n_cells());
        let mut inverses = Vec::with_capacity(mesh.n_cells());
        let mut me = Self { mesh: mesh.clone(), origins: Vec::new(), inverses: Vec::new(), lo, cell_size, dims, buckets: Vec::new() };
        for c in 0..mesh.n_cells() {
            let v: Vec<Point<D>> = mesh.cell(c).iter().map(|&i| *mesh.vertex(i)).collect();
            let e = Mat::<D>::from_fn(|i, j| v[j + 1][i] - v[0][i]);
            let (inv, _) = geometry::inverse(&e, 0.0).expect("validated mesh has no degenerate cells");
            origins.push(v[0]);
            inverses.push(inv);
            let mut clo = v[0];
            let mut chi = v[0];
            for p in &v[1..] {
                clo = clo.inf(p);
                chi = chi.sup(p);
            }
            let a = me.bucket_coords(&clo);
            let b = me.bucket_coords(&chi);
            me.for_each_bucket(a, b, |idx| buckets[idx].push(c));
        }
        me.origins = origins;
        me.inverses = inverses;
        me.buckets = buckets;
        me
    }

    pub fn mesh(&self) -> &Arc<Mesh<D>> {
        &self.mesh
    }

    fn bucket_coords(&self, x: &Point<D>) -> [usize; 3] {
        let mut c = [0usize; 3];
        for i in 0..D {
            let s = ((x[i] - self.lo[i]) / self.cell_size).floor();
            c[i] = (s.max(0.0) as usize).min(self.dims[i] - 1);
        }
        c
    }

    fn for_each_bucket(&self, a: [usize; 3], b: [usize; 3], mut f: impl FnMut(usize)) {
        let hi = |i: usize| if i < D { b[i] } else { 0 };
        let lo = |i: usize| if i < D { a[i] } else { 0 };
        for k in lo(2)..=hi(2) {
            for j in lo(1)..=hi(1) {
                for i in lo(0)..=hi(0) {
                    f((k * self.dims[1] + j) * self.dims[0] + i);
                }
            }
        }
    }

    fn barycentric(&self, c: usize, x: &Point<D>) -> [f64; 4] {
        let l = self.inverses[c] * (x - self.origins[c]);
        let mut bary = [0.0; 4];
        bary[0] = 1.0 - l.sum();
        bary[1..=D].copy_from_slice(l.as_slice());
        bary
    }

    fn location(&self, c: usize, bary: [f64; 4], extrapolated: bool) -> PointLocation<D> {
        let mut vertices = [0usize; 4];
        vertices[..=D].copy_from_slice(self.mesh.cell(c));
        PointLocation { cell: c, vertices, bary, extrapolated }
    }

    /// Locates `x`. Points outside the mesh are extrapolated from the nearest
    /// cell when they lie within one maximal element diameter of it.
    pub fn locate(&self, x: &Point<D>) -> Result<PointLocation<D>> {
        let home = self.bucket_coords(x);
        let inside_grid = (0..D).all(|i| x[i] >= self.lo[i] && x[i] <= self.lo[i] + self.cell_size * self.dims[i] as f64);
        if inside_grid {
            let idx = (home[2] * self.dims[1] + home[1]) * self.dims[0] + home[0];
            for &c in &self.buckets[idx] {
                let bary = self.barycentric(c, x);
                if bary[..=D].iter().all(|&l| l >= -INSIDE_TOL) {
                    return Ok(self.location(c, bary, false));
                }
            }
        }
        let limit = self.mesh.h();
        let reach = limit + self.cell_size;
        let a = self.bucket_coords(&x.add_scalar(-reach));
        let b = self.bucket_coords(&x.add_scalar(reach));
        let mut best: Option<(f64, usize, [f64; 4])> = None;
        let mut seen = Vec::new();
        self.for_each_bucket(a, b, |idx| seen.extend_from_slice(&self.buckets[idx]));
        seen.sort_unstable();
        seen.dedup();
        for c in seen {
            let bary = self.barycentric(c, x);
            if bary[..=D].iter().all(|&l| l >= -INSIDE_TOL) {
                return Ok(self.location(c, bary, false));
            }
            let d = self.distance_to_cell(c, &bary, x);
            if best.is_none_or(|b| d < b.0) {
                best = Some((d, c, bary));
            }
        }
        match best {
            Some((d, c, bary)) if d <= limit => Ok(self.location(c, bary, true)),
            other => Err(Error::Extrapolation {
                point: geometry::to_vec(x),
                distance: other.map_or(f64::INFINITY, |b| b.0),
                limit,
            }),
        }
    }

    /// Distance from `x` to the point of cell `c` obtained by clamping the
    /// barycentric coordinates; an upper bound of the true distance.
    fn distance_to_cell(&self, c: usize, bary: &[f64; 4], x: &Point<D>) -> f64 {
        let mut clamped = [0.0; 4];
        let mut s = 0.0;
        for k in 0..=D {
            clamped[k] = bary[k].max(0.0);
            s += clamped[k];
        }
        let cell = self.mesh.cell(c);
        let p = (0..=D).fold(Point::<D>::zeros(), |acc, k| acc + self.mesh.vertex(cell[k]) * (clamped[k] / s));
        (x - p).norm()
    }

    /// Values of the P1 field `values` at `x`.
    pub fn evaluate(&self, values: &[f64], x: &Point<D>) -> Result<f64> {
        Ok(self.locate(x)?.interpolate(values))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn locates_and_interpolates_linear_functions() {
        let mesh = Arc::new(Mesh::disk(Point::<2>::zeros(), 1.0, 6).unwrap());
        let loc = Locator::new(mesh.clone());
        let vals: Vec<f64> = mesh.vertices().iter().map(|x| 2.0 * x[0] - x[1] + 0.5).collect();
        for i in 0..50 {
            let t = 0.7 * i as f64;
            let r = 0.95 * ((i * 7919) % 50) as f64 / 50.0;
            let x = Point::<2>::new(r * t.cos(), r * t.sin());
            let p = loc.locate(&x).unwrap();
            assert!(!p.extrapolated);
            assert!((p.interpolate(&vals) - (2.0 * x[0] - x[1] + 0.5)).abs() < 1e-12);
        }
    }

    #[test]
    fn extrapolation_limits() {
        let mesh = Arc::new(Mesh::unit_square(4).unwrap());
        let loc = Locator::new(mesh.clone());
        let p = loc.locate(&Point::<2>::new(1.05, 0.5)).unwrap();
        assert!(p.extrapolated);
        let vals: Vec<f64> = mesh.vertices().iter().map(|x| x[0]).collect();
        assert!((p.interpolate(&vals) - 1.05).abs() < 1e-12);
        assert!(matches!(loc.locate(&Point::<2>::new(3.0, 0.5)), Err(Error::Extrapolation { .. })));
    }

    #[test]
    fn works_in_three_dimensions() {
        let mesh = Arc::new(Mesh::unit_cube(3).unwrap());
        let loc = Locator::new(mesh.clone());
        let vals: Vec<f64> = mesh.vertices().iter().map(|x| x[0] + 2.0 * x[1] + 3.0 * x[2]).collect();
        let x = Point::<3>::new(0.31, 0.77, 0.52);
        assert!((loc.evaluate(&vals, &x).unwrap() - (0.31 + 1.54 + 1.56)).abs() < 1e-12);
    }
}
