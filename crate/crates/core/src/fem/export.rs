use std::io::Write;

use crate::error::Result;

use super::{Mesh, SpaceTimeField};

/// CSV with header `time,node,value`, one row per node and time.
pub fn write_field_csv<const D: usize>(field: &SpaceTimeField<D>, mut w: impl Write) -> Result<()> {
    writeln!(w, "time,node,value")?;
    for (j, s) in field.snapshots.iter().enumerate() {
        let t = field.time.node(j);
        for (i, v) in s.iter().enumerate() {
            writeln!(w, "{t},{i},{v:e}")?;
        }
    }
    Ok(())
}

/// Legacy ASCII VTK unstructured grid with one nodal scalar.
pub fn write_vtk<const D: usize>(mesh: &Mesh<D>, name: &str, values: &[f64], mut w: impl Write) -> Result<()> {
    writeln!(w, "# vtk DataFile Version 3.0")?;
    writeln!(w, "{name}")?;
    writeln!(w, "ASCII")?;
    writeln!(w, "DATASET UNSTRUCTURED_GRID")?;
    writeln!(w, "POINTS {} double", mesh.n_vertices())?;
    for v in mesh.vertices() {
        let z = if D == 3 { v[2] } else { 0.0 };
        writeln!(w, "{} {} {}", v[0], v[1], z)?;
    }
    let k = D + 1;
    writeln!(w, "CELLS {} {}", mesh.n_cells(), mesh.n_cells() * (k + 1))?;
    for c in mesh.cells().chunks(k) {
        let idx: Vec<String> = c.iter().map(|i| i.to_string()).collect();
        writeln!(w, "{k} {}", idx.join(" "))?;
    }
    writeln!(w, "CELL_TYPES {}", mesh.n_cells())?;
    let cell_type = if D == 3 { 10 } else { 5 };
    for _ in 0..mesh.n_cells() {
        writeln!(w, "{cell_type}")?;
    }
    writeln!(w, "POINT_DATA {}", mesh.n_vertices())?;
    writeln!(w, "SCALARS {name} double 1")?;
    writeln!(w, "LOOKUP_TABLE default")?;
    for v in values {
        writeln!(w, "{v:e}")?;
    }
    Ok(())
}
