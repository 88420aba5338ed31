//! Legacy ASCII VTK, unstructured grid of linear triangles (cell type 5).

use std::fmt::Write as _;
use std::path::Path;

use super::{write_atomic, IoError};
use crate::mesh::TriangleMesh;

const TRIANGLE: u8 = 5;

/// Contents of a legacy VTK file as far as this crate writes them.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct VtkData {
    pub title: String,
    pub points: Vec<[f64; 3]>,
    pub cells: Vec<Vec<usize>>,
    pub cell_types: Vec<u8>,
    pub point_data: Vec<(String, Vec<f64>)>,
}

fn render(mesh: &TriangleMesh, fields: &[(&str, &[f64])]) -> String {
    let mut s = String::new();
    s.push_str("# vtk DataFile Version 3.0\n");
    s.push_str("supercap\n");
    s.push_str("ASCII\n");
    s.push_str("DATASET UNSTRUCTURED_GRID\n");
    let _ = writeln!(s, "POINTS {} double", mesh.num_vertices());
    for p in &mesh.vertices {
        let _ = writeln!(s, "{:.16e} {:.16e} {:.16e}", p[0], p[1], 0.0);
    }
    let nt = mesh.num_triangles();
    let _ = writeln!(s, "CELLS {} {}", nt, 4 * nt);
    for t in &mesh.triangles {
        let _ = writeln!(s, "3 {} {} {}", t[0], t[1], t[2]);
    }
    let _ = writeln!(s, "CELL_TYPES {nt}");
    for _ in 0..nt {
        let _ = writeln!(s, "{TRIANGLE}");
    }
    if !fields.is_empty() {
        let _ = writeln!(s, "POINT_DATA {}", mesh.num_vertices());
        for (name, values) in fields {
            let _ = writeln!(s, "SCALARS {name} double 1");
            s.push_str("LOOKUP_TABLE default\n");
            for v in *values {
                let _ = writeln!(s, "{v:.16e}");
            }
        }
    }
    s
}

/// Writes the mesh with nodal scalar fields. Output is a pure function of
/// the inputs.
pub fn write_vtk_snapshot(path: &Path, mesh: &TriangleMesh, fields: &[(&str, &[f64])]) -> Result<(), IoError> {
    for (name, values) in fields {
        if values.len() != mesh.num_vertices() {
            return Err(IoError::FieldLength {
                name: name.to_string(),
                expected: mesh.num_vertices(),
                found: values.len(),
            });
        }
        if name.is_empty() || name.contains(char::is_whitespace) {
            return Err(IoError::Format { path: path.to_path_buf(), message: format!("invalid field name '{name}'") });
        }
    }
    write_atomic(path, render(mesh, fields).as_bytes())
}

struct Tokens<'a> {
    lines: std::iter::Peekable<std::str::Lines<'a>>,
    pending: std::collections::VecDeque<&'a str>,
}

impl<'a> Tokens<'a> {
    fn next(&mut self) -> Option<&'a str> {
        loop {
            if let Some(t) = self.pending.pop_front() {
                return Some(t);
            }
            let line = self.lines.next()?;
            self.pending.extend(line.split_whitespace());
        }
    }
}

pub fn read_vtk(path: &Path) -> Result<VtkData, IoError> {
    let text = std::fs::read_to_string(path).map_err(|e| IoError::io(path, e))?;
    let bad = |message: String| IoError::Format { path: path.to_path_buf(), message };
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default();
    if !header.starts_with("# vtk DataFile Version") {
        return Err(bad(format!("not a legacy VTK file: '{header}'")));
    }
    let title = lines.next().unwrap_or_default().to_string();
    if lines.next().map(str::trim) != Some("ASCII") {
        return Err(bad("only ASCII files are supported".into()));
    }
    let mut tok = Tokens { lines: lines.peekable(), pending: Default::default() };
    let expect = |tok: &mut Tokens, want: &str| match tok.next() {
        Some(t) if t == want => Ok(()),
        other => Err(bad(format!("expected '{want}', found {other:?}"))),
    };
    fn num<T: std::str::FromStr>(t: Option<&str>, path: &Path) -> Result<T, IoError> {
        t.and_then(|s| s.parse().ok())
            .ok_or_else(|| IoError::Format { path: path.to_path_buf(), message: format!("bad number {t:?}") })
    }

    expect(&mut tok, "DATASET")?;
    expect(&mut tok, "UNSTRUCTURED_GRID")?;
    expect(&mut tok, "POINTS")?;
    let np: usize = num(tok.next(), path)?;
    let _ty = tok.next();
    let mut data = VtkData { title, ..Default::default() };
    for _ in 0..np {
        data.points.push([num(tok.next(), path)?, num(tok.next(), path)?, num(tok.next(), path)?]);
    }
    while let Some(section) = tok.next() {
        match section {
            "CELLS" => {
                let nc: usize = num(tok.next(), path)?;
                let _size: usize = num(tok.next(), path)?;
                for _ in 0..nc {
                    let k: usize = num(tok.next(), path)?;
                    let cell = (0..k).map(|_| num(tok.next(), path)).collect::<Result<Vec<usize>, _>>()?;
                    if cell.iter().any(|&v| v >= np) {
                        return Err(IoError::Format { path: path.to_path_buf(), message: "cell index out of range".into() });
                    }
                    data.cells.push(cell);
                }
            }
            "CELL_TYPES" => {
                let nc: usize = num(tok.next(), path)?;
                for _ in 0..nc {
                    data.cell_types.push(num(tok.next(), path)?);
                }
            }
            "POINT_DATA" => {
                let n: usize = num(tok.next(), path)?;
                if n != np {
                    return Err(IoError::Format { path: path.to_path_buf(), message: format!("POINT_DATA {n} for {np} points") });
                }
            }
            "SCALARS" => {
                let name = tok.next().unwrap_or_default().to_string();
                let _ty = tok.next();
                let _components = tok.next();
                expect(&mut tok, "LOOKUP_TABLE")?;
                let _table = tok.next();
                let values = (0..np).map(|_| num(tok.next(), path)).collect::<Result<Vec<f64>, _>>()?;
                data.point_data.push((name, values));
            }
            other => {
                return Err(IoError::Format { path: path.to_path_buf(), message: format!("unsupported section '{other}'") })
            }
        }
    }
    if data.cells.len() != data.cell_types.len() {
        return Err(IoError::Format { path: path.to_path_buf(), message: "CELLS and CELL_TYPES disagree".into() });
    }
    Ok(data)
}
