//! Conforming simplicial meshes, generators for the benchmark domains and a
//! plain-text exchange format.

use std::collections::HashMap;
use std::f64::consts::TAU;
use std::io::{BufRead, Write};

use crate::error::{Error, Result};
use crate::geometry::{self, Mat, Point};

/// Conforming P1 mesh of simplices. Cells are stored flat with stride `D + 1`
/// and positive orientation; boundary facets flat with stride `D`.
#[derive(Debug, Clone)]
pub struct Mesh<const D: usize> {
    vertices: Vec<Point<D>>,
    cells: Vec<usize>,
    measures: Vec<f64>,
    boundary_facets: Vec<usize>,
    facet_normals: Vec<Point<D>>,
    facet_measures: Vec<f64>,
    facet_cells: Vec<usize>,
    on_boundary: Vec<bool>,
    h: f64,
}

fn face_key(face: &[usize]) -> [usize; 3] {
    let mut k = [usize::MAX; 3];
    k[..face.len()].copy_from_slice(face);
    k[..face.len()].sort_unstable();
    k
}

fn simplex_measure<const D: usize>(v: &[Point<D>]) -> f64 {
    let e = Mat::<D>::from_fn(|i, j| v[j + 1][i] - v[0][i]);
    let fact = (1..=D).product::<usize>() as f64;
    geometry::det(&e) / fact
}

/// Unnormalized facet normal with length equal to the facet measure.
fn facet_normal<const D: usize>(v: &[Point<D>]) -> Point<D> {
    match D {
        2 => {
            let t = v[1] - v[0];
            Point::from_fn(|i, _| if i == 0 { t[1] } else { -t[0] })
        }
        3 => {
            let a = v[1] - v[0];
            let b = v[2] - v[0];
            let c = [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]];
            Point::from_fn(|i, _| 0.5 * c[i])
        }
        _ => panic!("meshes exist for d = 2, 3 only"),
    }
}

impl<const D: usize> Mesh<D> {
    /// Builds and validates a mesh. Negatively oriented cells are flipped.
    pub fn new(vertices: Vec<Point<D>>, mut cells: Vec<usize>) -> Result<Self> {
        if D != 2 && D != 3 {
            return Err(Error::InvalidMesh(format!("unsupported dimension {D}")));
        }
        let k = D + 1;
        if cells.is_empty() || !cells.len().is_multiple_of(k) {
            return Err(Error::InvalidMesh(format!("cell array length {} is not a multiple of {k}", cells.len())));
        }
        if let Some(&bad) = cells.iter().find(|&&i| i >= vertices.len()) {
            return Err(Error::InvalidMesh(format!("cell references vertex {bad} of {}", vertices.len())));
        }
        let n_cells = cells.len() / k;
        let mut measures = Vec::with_capacity(n_cells);
        let mut h: f64 = 0.0;
        for c in cells.chunks_mut(k) {
            let pts: Vec<Point<D>> = c.iter().map(|&i| vertices[i]).collect();
            let mut m = simplex_measure(&pts);
            let scale = (1..k).map(|j| (pts[j] - pts[0]).norm()).fold(0.0, f64::max);
            if m.abs() <= 1e-14 * scale.powi(D as i32) {
                return Err(Error::InvalidMesh(format!("degenerate cell {c:?}")));
            }
            if m < 0.0 {
                c.swap(0, 1);
                m = -m;
            }
            measures.push(m);
            for a in 0..k {
                for b in (a + 1)..k {
                    h = h.max((pts[a] - pts[b]).norm());
                }
            }
        }

        // (cell, omitted local vertex) for every face
        let mut faces: HashMap<[usize; 3], Vec<(usize, usize)>> = HashMap::new();
        for (ci, c) in cells.chunks(k).enumerate() {
            for omit in 0..k {
                let face: Vec<usize> = (0..k).filter(|&j| j != omit).map(|j| c[j]).collect();
                faces.entry(face_key(&face)).or_default().push((ci, omit));
            }
        }
        let mut boundary = Vec::new();
        for (key, owners) in &faces {
            match owners.len() {
                1 => boundary.push((*key, owners[0])),
                2 => {}
                n => return Err(Error::InvalidMesh(format!("face {key:?} shared by {n} cells"))),
            }
        }
        boundary.sort_unstable_by_key(|b| b.0);

        let mut boundary_facets = Vec::with_capacity(boundary.len() * D);
        let mut facet_normals = Vec::with_capacity(boundary.len());
        let mut facet_measures = Vec::with_capacity(boundary.len());
        let mut facet_cells = Vec::with_capacity(boundary.len());
        let mut on_boundary = vec![false; vertices.len()];
        for (key, (ci, omit)) in &boundary {
            let face = &key[..D];
            let pts: Vec<Point<D>> = face.iter().map(|&i| vertices[i]).collect();
            let mut n = facet_normal(&pts);
            let opposite = vertices[cells[ci * k + omit]];
            if n.dot(&(opposite - pts[0])) > 0.0 {
                n = -n;
            }
            let area = n.norm();
            boundary_facets.extend_from_slice(face);
            facet_normals.push(n / area);
            facet_measures.push(area);
            facet_cells.push(*ci);
            for &i in face {
                on_boundary[i] = true;
            }
        }

        let mesh = Self {
            vertices,
            cells,
            measures,
            boundary_facets,
            facet_normals,
            facet_measures,
            facet_cells,
            on_boundary,
            h,
        };
        mesh.check_boundary_closed()?;
        Ok(mesh)
    }

    /// Every boundary ridge must be shared by exactly two boundary facets and
    /// the facets must form one connected component.
    fn check_boundary_closed(&self) -> Result<()> {
        let nf = self.n_boundary_facets();
        if nf == 0 {
            return Err(Error::InvalidMesh("mesh has no boundary".into()));
        }
        let mut ridges: HashMap<[usize; 3], Vec<usize>> = HashMap::new();
        for f in 0..nf {
            let face = self.boundary_facet(f);
            for omit in 0..D {
                let ridge: Vec<usize> = (0..D).filter(|&j| j != omit).map(|j| face[j]).collect();
                ridges.entry(face_key(&ridge)).or_default().push(f);
            }
        }
        let mut parent: Vec<usize> = (0..nf).collect();
        fn find(p: &mut [usize], mut i: usize) -> usize {
            while p[i] != i {
                p[i] = p[p[i]];
                i = p[i];
            }
            i
        }
        for (ridge, fs) in &ridges {
            if fs.len() != 2 {
                return Err(Error::InvalidMesh(format!(
                    "boundary is not closed: ridge {ridge:?} belongs to {} facets",
                    fs.len()
                )));
            }
            let (a, b) = (find(&mut parent, fs[0]), find(&mut parent, fs[1]));
            parent[a] = b;
        }
        let root = find(&mut parent, 0);
        if (0..nf).any(|f| find(&mut parent, f) != root) {
            return Err(Error::InvalidMesh("boundary has more than one component".into()));
        }
        Ok(())
    }

    pub fn n_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn n_cells(&self) -> usize {
        self.measures.len()
    }

    pub fn n_boundary_facets(&self) -> usize {
        self.facet_cells.len()
    }

    pub fn vertices(&self) -> &[Point<D>] {
        &self.vertices
    }

    pub fn vertex(&self, i: usize) -> &Point<D> {
        &self.vertices[i]
    }

    pub fn cells(&self) -> &[usize] {
        &self.cells
    }

    pub fn cell(&self, c: usize) -> &[usize] {
        &self.cells[c * (D + 1)..(c + 1) * (D + 1)]
    }

    pub fn cell_measure(&self, c: usize) -> f64 {
        self.measures[c]
    }

    pub fn boundary_facet(&self, f: usize) -> &[usize] {
        &self.boundary_facets[f * D..(f + 1) * D]
    }

    pub fn facet_normal(&self, f: usize) -> &Point<D> {
        &self.facet_normals[f]
    }

    pub fn facet_measure(&self, f: usize) -> f64 {
        self.facet_measures[f]
    }

    /// Cell adjacent to boundary facet `f`.
    pub fn facet_cell(&self, f: usize) -> usize {
        self.facet_cells[f]
    }

    pub fn is_boundary_vertex(&self, i: usize) -> bool {
        self.on_boundary[i]
    }

    pub fn boundary_vertices(&self) -> Vec<usize> {
        (0..self.n_vertices()).filter(|&i| self.on_boundary[i]).collect()
    }

    pub fn interior_vertices(&self) -> Vec<usize> {
        (0..self.n_vertices()).filter(|&i| !self.on_boundary[i]).collect()
    }

    /// Maximal cell diameter.
    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn volume(&self) -> f64 {
        self.measures.iter().sum()
    }

    pub fn bounding_box(&self) -> (Point<D>, Point<D>) {
        let mut lo = Point::<D>::repeat(f64::INFINITY);
        let mut hi = Point::<D>::repeat(f64::NEG_INFINITY);
        for v in &self.vertices {
            lo = lo.inf(v);
            hi = hi.sup(v);
        }
        (lo, hi)
    }

    /// Area-weighted outward vertex normals on the boundary (zero inside).
    pub fn vertex_normals(&self) -> Vec<Point<D>> {
        let mut n = vec![Point::<D>::zeros(); self.n_vertices()];
        for f in 0..self.n_boundary_facets() {
            for &i in self.boundary_facet(f) {
                n[i] += self.facet_normals[f] * self.facet_measures[f];
            }
        }
        for v in &mut n {
            let l = v.norm();
            if l > 0.0 {
                *v /= l;
            }
        }
        n
    }

    /// Same connectivity with every vertex moved by `map`.
    pub fn mapped(&self, map: impl Fn(&Point<D>) -> Point<D>) -> Result<Self> {
        Self::new(self.vertices.iter().map(map).collect(), self.cells.clone())
    }

    /// Writes the versioned text format: header `shapeuq-mesh 1`, `dim d`,
    /// `vertices n` followed by coordinates, `cells m` followed by
    /// zero-based vertex indices.
    pub fn write_text(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "shapeuq-mesh 1")?;
        writeln!(w, "dim {D}")?;
        writeln!(w, "vertices {}", self.n_vertices())?;
        for v in &self.vertices {
            let coords: Vec<String> = v.iter().map(|x| format!("{x:.17e}")).collect();
            writeln!(w, "{}", coords.join(" "))?;
        }
        writeln!(w, "cells {}", self.n_cells())?;
        for c in self.cells.chunks(D + 1) {
            let idx: Vec<String> = c.iter().map(|i| i.to_string()).collect();
            writeln!(w, "{}", idx.join(" "))?;
        }
        Ok(())
    }

    pub fn read_text(r: impl BufRead) -> Result<Self> {
        let mut lines = r
            .lines()
            .enumerate()
            .map(|(i, l)| l.map(|s| (i + 1, s)))
            .filter(|l| l.as_ref().map_or(true, |(_, s)| !s.trim().is_empty() && !s.trim_start().starts_with('#')));
        let mut next = |what: &str| -> Result<(usize, String)> {
            lines.next().transpose()?.ok_or_else(|| Error::Parse { line: 0, message: format!("unexpected end of file, expected {what}") })
        };
        let parse_err = |line: usize, message: String| Error::Parse { line, message };
        let header = |(line, s): (usize, String), key: &str| -> Result<usize> {
            let mut it = s.split_whitespace();
            if it.next() != Some(key) {
                return Err(parse_err(line, format!("expected `{key}`")));
            }
            it.next()
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| parse_err(line, format!("`{key}` needs an integer")))
        };
        let version = header(next("header")?, "shapeuq-mesh")?;
        if version != 1 {
            return Err(parse_err(1, format!("unsupported mesh format version {version}")));
        }
        let dim = header(next("dim")?, "dim")?;
        if dim != D {
            return Err(Error::shape(D, dim));
        }
        let nv = header(next("vertices")?, "vertices")?;
        let mut vertices = Vec::with_capacity(nv);
        for _ in 0..nv {
            let (line, s) = next("vertex")?;
            let xs: Vec<f64> = s
                .split_whitespace()
                .map(|t| t.parse().map_err(|e| parse_err(line, format!("bad coordinate `{t}`: {e}"))))
                .collect::<Result<_>>()?;
            if xs.len() != D {
                return Err(parse_err(line, format!("expected {D} coordinates, found {}", xs.len())));
            }
            vertices.push(Point::from_fn(|i, _| xs[i]));
        }
        let nc = header(next("cells")?, "cells")?;
        let mut cells = Vec::with_capacity(nc * (D + 1));
        for _ in 0..nc {
            let (line, s) = next("cell")?;
            let idx: Vec<usize> = s
                .split_whitespace()
                .map(|t| t.parse().map_err(|e| parse_err(line, format!("bad index `{t}`: {e}"))))
                .collect::<Result<_>>()?;
            if idx.len() != D + 1 {
                return Err(parse_err(line, format!("expected {} indices, found {}", D + 1, idx.len())));
            }
            cells.extend(idx);
        }
        Self::new(vertices, cells)
    }
}

impl Mesh<2> {
    /// Structured triangulation of `[lo, hi]` with `nx × ny` squares, each cut
    /// along its lower-left to upper-right diagonal.
    pub fn rectangle(lo: Point<2>, hi: Point<2>, nx: usize, ny: usize) -> Result<Self> {
        if nx == 0 || ny == 0 {
            return Err(Error::InvalidMesh("rectangle needs at least one cell per direction".into()));
        }
        let mut vertices = Vec::with_capacity((nx + 1) * (ny + 1));
        for j in 0..=ny {
            for i in 0..=nx {
                let s = i as f64 / nx as f64;
                let t = j as f64 / ny as f64;
                vertices.push(Point::<2>::new(lo[0] + s * (hi[0] - lo[0]), lo[1] + t * (hi[1] - lo[1])));
            }
        }
        let id = |i: usize, j: usize| j * (nx + 1) + i;
        let mut cells = Vec::with_capacity(6 * nx * ny);
        for j in 0..ny {
            for i in 0..nx {
                cells.extend([id(i, j), id(i + 1, j), id(i + 1, j + 1)]);
                cells.extend([id(i, j), id(i + 1, j + 1), id(i, j + 1)]);
            }
        }
        Self::new(vertices, cells)
    }

    pub fn unit_square(n: usize) -> Result<Self> {
        Self::rectangle(Point::<2>::new(0.0, 0.0), Point::<2>::new(1.0, 1.0), n, n)
    }

    /// Disk of concentric rings: the centre plus `6j` equispaced vertices on
    /// ring `j = 1..=rings` at radius `radius · j / rings`. Boundary vertices
    /// lie exactly on the circle.
    pub fn disk(center: Point<2>, radius: f64, rings: usize) -> Result<Self> {
        if rings == 0 || radius <= 0.0 {
            return Err(Error::InvalidMesh("disk needs a positive radius and at least one ring".into()));
        }
        let mut vertices = vec![center];
        let mut start = vec![0usize];
        for j in 1..=rings {
            start.push(vertices.len());
            let r = radius * j as f64 / rings as f64;
            let n = 6 * j;
            for i in 0..n {
                let t = TAU * i as f64 / n as f64;
                vertices.push(center + Point::<2>::new(r * t.cos(), r * t.sin()));
            }
        }
        let mut cells = Vec::new();
        for i in 0..6 {
            cells.extend([0, start[1] + i, start[1] + (i + 1) % 6]);
        }
        for j in 2..=rings {
            let (ni, no) = (6 * (j - 1), 6 * j);
            let inner = |a: usize| start[j - 1] + a % ni;
            let outer = |b: usize| start[j] + b % no;
            let (mut a, mut b) = (0usize, 0usize);
            // zipper: advance on the ring whose next vertex has the smaller angle
            while a < ni || b < no {
                let next_inner = (a + 1) as f64 / ni as f64;
                let next_outer = (b + 1) as f64 / no as f64;
                if b < no && (a == ni || next_outer <= next_inner + 1e-12) {
                    cells.extend([inner(a), outer(b), outer(b + 1)]);
                    b += 1;
                } else {
                    cells.extend([inner(a), outer(b), inner(a + 1)]);
                    a += 1;
                }
            }
        }
        Self::new(vertices, cells)
    }
}

impl Mesh<3> {
    /// Structured `n³` cube mesh of `[0, 1]³`, six tetrahedra per sub-cube
    /// sharing the main diagonal.
    pub fn unit_cube(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidMesh("cube needs at least one cell per direction".into()));
        }
        let id = |i: usize, j: usize, k: usize| (k * (n + 1) + j) * (n + 1) + i;
        let mut vertices = Vec::with_capacity((n + 1).pow(3));
        for k in 0..=n {
            for j in 0..=n {
                for i in 0..=n {
                    vertices.push(Point::<3>::new(i as f64, j as f64, k as f64) / n as f64);
                }
            }
        }
        let perms = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
        let mut cells = Vec::with_capacity(24 * n * n * n);
        for k in 0..n {
            for j in 0..n {
                for i in 0..n {
                    for p in &perms {
                        let mut c = [i, j, k];
                        let mut tet = [id(c[0], c[1], c[2]); 4];
                        for (s, &axis) in p.iter().enumerate() {
                            c[axis] += 1;
                            tet[s + 1] = id(c[0], c[1], c[2]);
                        }
                        cells.extend(tet);
                    }
                }
            }
        }
        Self::new(vertices, cells)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn square_measures_and_boundary() {
        let m = Mesh::unit_square(4).unwrap();
        assert_eq!(m.n_cells(), 32);
        assert!((m.volume() - 1.0).abs() < 1e-14);
        assert_eq!(m.n_boundary_facets(), 16);
        assert_eq!(m.boundary_vertices().len(), 16);
        let perimeter: f64 = (0..m.n_boundary_facets()).map(|f| m.facet_measure(f)).sum();
        assert!((perimeter - 4.0).abs() < 1e-14);
        // outward normals point away from the centre
        for f in 0..m.n_boundary_facets() {
            let mid = (m.vertex(m.boundary_facet(f)[0]) + m.vertex(m.boundary_facet(f)[1])) / 2.0;
            assert!(m.facet_normal(f).dot(&(mid - Point::<2>::new(0.5, 0.5))) > 0.0);
        }
    }

    #[test]
    fn disk_is_valid_and_converges_to_area() {
        let mut prev = f64::INFINITY;
        for rings in [2, 4, 8, 16] {
            let m = Mesh::disk(Point::<2>::zeros(), 1.0, rings).unwrap();
            assert_eq!(m.n_vertices(), 1 + 3 * rings * (rings + 1));
            for &b in &m.boundary_vertices() {
                assert!((m.vertex(b).norm() - 1.0).abs() < 1e-14);
            }
            assert_eq!(m.boundary_vertices().len(), 6 * rings);
            let err = PI - m.volume();
            assert!(err > 0.0 && err < prev);
            prev = err;
        }
    }

    #[test]
    fn cube_is_valid() {
        let m = Mesh::unit_cube(3).unwrap();
        assert!((m.volume() - 1.0).abs() < 1e-13);
        let area: f64 = (0..m.n_boundary_facets()).map(|f| m.facet_measure(f)).sum();
        assert!((area - 6.0).abs() < 1e-13);
    }

    #[test]
    fn rejects_open_and_degenerate_meshes() {
        let v = vec![Point::<2>::new(0.0, 0.0), Point::<2>::new(1.0, 0.0), Point::<2>::new(2.0, 0.0)];
        assert!(Mesh::new(v, vec![0, 1, 2]).is_err());
        // two triangles touching at a single vertex: boundary has two components
        let v = vec![
            Point::<2>::new(0.0, 0.0),
            Point::<2>::new(1.0, 0.0),
            Point::<2>::new(0.0, 1.0),
            Point::<2>::new(-1.0, 0.0),
            Point::<2>::new(0.0, -1.0),
        ];
        assert!(Mesh::new(v, vec![0, 1, 2, 0, 3, 4]).is_err());
    }

    #[test]
    fn text_round_trip() {
        let m = Mesh::disk(Point::<2>::new(0.3, -0.1), 2.0, 3).unwrap();
        let mut buf = Vec::new();
        m.write_text(&mut buf).unwrap();
        let r = Mesh::<2>::read_text(&buf[..]).unwrap();
        assert_eq!(r.cells(), m.cells());
        assert_eq!(r.vertices(), m.vertices());
        assert!(matches!(Mesh::<3>::read_text(&buf[..]), Err(Error::ShapeMismatch { .. })));
        let bad = String::from_utf8(buf).unwrap().replace("shapeuq-mesh 1", "shapeuq-mesh 7");
        assert!(matches!(Mesh::<2>::read_text(bad.as_bytes()), Err(Error::Parse { .. })));
    }
}
