//! File output: legacy ASCII VTK grids, JSON reports.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::mesh::Mesh;

/// VTK cell type of a 4-node quadrilateral.
const VTK_QUAD: u8 = 9;

/// Legacy ASCII unstructured grid with one or more point scalars. Invalid
/// values are written as `nan`.
pub fn vtk_string(mesh: &Mesh, title: &str, fields: &[(&str, &[f64])]) -> Result<String> {
    let n = mesh.n_nodes();
    for (name, f) in fields {
        if f.len() != n {
            return Err(Error::invalid(format!("field '{name}' has {} values for {n} nodes", f.len())));
        }
        if name.is_empty() || name.contains(char::is_whitespace) {
            return Err(Error::invalid(format!("bad VTK field name '{name}'")));
        }
    }
    let mut s = String::with_capacity(64 * n);
    s.push_str("# vtk DataFile Version 3.0\n");
    s.push_str(title.lines().next().unwrap_or(""));
    s.push_str("\nASCII\nDATASET UNSTRUCTURED_GRID\n");
    let _ = writeln!(s, "POINTS {n} double");
    for c in &mesh.coords {
        let _ = writeln!(s, "{} {} 0", c[0], c[1]);
    }
    let ne = mesh.n_elements();
    let _ = writeln!(s, "CELLS {ne} {}", 5 * ne);
    for e in &mesh.elements {
        let _ = writeln!(s, "4 {} {} {} {}", e[0], e[1], e[2], e[3]);
    }
    let _ = writeln!(s, "CELL_TYPES {ne}");
    for _ in 0..ne {
        let _ = writeln!(s, "{VTK_QUAD}");
    }
    if !fields.is_empty() {
        let _ = writeln!(s, "POINT_DATA {n}");
    }
    for (name, f) in fields {
        let _ = writeln!(s, "SCALARS {name} double 1\nLOOKUP_TABLE default");
        for x in f.iter() {
            if x.is_finite() {
                let _ = writeln!(s, "{x}");
            } else {
                s.push_str("nan\n");
            }
        }
    }
    Ok(s)
}

pub fn write_vtk(mesh: &Mesh, title: &str, fields: &[(&str, &[f64])], path: &Path) -> Result<()> {
    let s = vtk_string(mesh, title, fields)?;
    write_text(path, &s)
}

/// Membrane potential snapshot at time `t` (ms).
pub fn write_vtk_snapshot(mesh: &Mesh, v: &[f64], t: f64, path: &Path) -> Result<()> {
    write_vtk(mesh, &format!("V at t = {t} ms"), &[("V", v)], path)
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Numerical(format!("cannot serialize report: {e}")))?;
    text.push('\n');
    write_text(path, &text)
}

pub fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::build_regular_sheet;

    #[test]
    fn single_element() {
        let mesh = build_regular_sheet(0.1, 0.1, 0.1, 0.0).unwrap();
        let s = vtk_string(&mesh, "t", &[("V", &[0.0; 4])]).unwrap();
        assert!(s.contains("POINTS 4 double\n"));
        assert!(s.contains("CELLS 1 5\n"));
        assert!(s.contains("CELL_TYPES 1\n9\n"));
        assert!(s.ends_with("LOOKUP_TABLE default\n0\n0\n0\n0\n"));
        assert!(vtk_string(&mesh, "t", &[("V", &[0.0; 3])]).is_err());
    }

    #[test]
    fn byte_stable() {
        let mesh = build_regular_sheet(0.3, 0.2, 0.1, 0.0).unwrap();
        let v: Vec<f64> = (0..mesh.n_nodes()).map(|i| (i as f64).sin() * 80.0).collect();
        let a = vtk_string(&mesh, "x", &[("V", &v)]).unwrap();
        let b = vtk_string(&mesh, "x", &[("V", &v)]).unwrap();
        assert_eq!(a, b);
        // shortest round-trip float formatting
        let parsed: Vec<f64> = a
            .lines()
            .skip_while(|l| !l.starts_with("LOOKUP_TABLE"))
            .skip(1)
            .map(|l| l.parse().unwrap())
            .collect();
        assert_eq!(parsed, v);
    }
}
