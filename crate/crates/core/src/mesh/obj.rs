//! ASCII Wavefront OBJ restricted to `v` and triangular `f` records.

use std::fmt::Write as _;
use std::path::Path;

use super::TriMesh;
use crate::error::{Error, Result};
use crate::tensor::Real;

pub fn write_obj_string(mesh: &TriMesh) -> String {
    let mut s = String::with_capacity(mesh.num_vertices() * 48 + mesh.num_faces() * 16);
    for v in &mesh.vertices {
        let _ = writeln!(s, "v {} {} {}", v[0], v[1], v[2]);
    }
    for f in &mesh.faces {
        let _ = writeln!(s, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1);
    }
    s
}

pub fn write_obj(mesh: &TriMesh, path: &Path) -> Result<()> {
    std::fs::write(path, write_obj_string(mesh))?;
    Ok(())
}

pub fn parse_obj(text: &str) -> Result<TriMesh> {
    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let mut it = line.split_whitespace();
        match it.next() {
            Some("v") => {
                let c: Vec<Real> = it
                    .take(3)
                    .map(|t| t.parse::<Real>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|e| Error::Format(format!("line {}: {e}", ln + 1)))?;
                if c.len() != 3 {
                    return Err(Error::Format(format!(
                        "line {}: vertex needs 3 coordinates",
                        ln + 1
                    )));
                }
                vertices.push([c[0], c[1], c[2]]);
            }
            Some("f") => {
                let idx: Vec<usize> = it
                    .map(|t| {
                        t.split('/')
                            .next()
                            .unwrap_or("")
                            .parse::<usize>()
                            .map_err(|e| Error::Format(format!("line {}: {e}", ln + 1)))
                    })
                    .collect::<Result<_>>()?;
                if idx.len() != 3 {
                    return Err(Error::Format(format!(
                        "line {}: only triangular faces are supported, got {} indices",
                        ln + 1,
                        idx.len()
                    )));
                }
                if idx.contains(&0) {
                    return Err(Error::Format(format!(
                        "line {}: OBJ indices are 1-based",
                        ln + 1
                    )));
                }
                faces.push([idx[0] - 1, idx[1] - 1, idx[2] - 1]);
            }
            _ => {}
        }
    }
    TriMesh::new(vertices, faces)
}

pub fn read_obj(path: &Path) -> Result<TriMesh> {
    parse_obj(&std::fs::read_to_string(path)?)
}
