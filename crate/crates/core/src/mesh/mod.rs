//! Triangle meshes and the graph machinery the U-nets run on.

mod graph;
mod hierarchy;
mod obj;

pub use graph::{build_operators, operators_from_edges, GraphOperators};
pub use hierarchy::{apply_sampling, build_hierarchy, SamplingHierarchy, SamplingLevel};
pub use obj::{parse_obj, read_obj, write_obj, write_obj_string};

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::Real;

pub type Vec3 = [Real; 3];

#[derive(Clone, Debug, PartialEq)]
pub struct TriMesh {
    pub vertices: Vec<Vec3>,
    pub faces: Vec<[usize; 3]>,
}

impl TriMesh {
    /// Builds a mesh and checks face indices and degeneracy.
    pub fn new(vertices: Vec<Vec3>, faces: Vec<[usize; 3]>) -> Result<Self> {
        let mesh = Self { vertices, faces };
        mesh.validate()?;
        Ok(mesh)
    }

    pub fn num_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn num_faces(&self) -> usize {
        self.faces.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.vertices.len();
        for (fi, f) in self.faces.iter().enumerate() {
            if f.iter().any(|&i| i >= n) {
                return Err(Error::Mesh(format!(
                    "face {fi} {f:?} indexes past {n} vertices"
                )));
            }
            if f[0] == f[1] || f[1] == f[2] || f[0] == f[2] {
                return Err(Error::Mesh(format!("face {fi} {f:?} is degenerate")));
            }
        }
        if self.vertices.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Mesh("non-finite vertex coordinate".into()));
        }
        Ok(())
    }

    /// Unique undirected edges `(a, b)` with `a < b`, sorted.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut e: Vec<(usize, usize)> = self
            .faces
            .iter()
            .flat_map(|f| [(f[0], f[1]), (f[1], f[2]), (f[2], f[0])])
            .map(|(a, b)| (a.min(b), a.max(b)))
            .collect();
        e.sort_unstable();
        e.dedup();
        e
    }

    pub fn mean_edge_length(&self) -> Real {
        let e = self.edges();
        if e.is_empty() {
            return 0.0;
        }
        e.iter()
            .map(|&(a, b)| dist(&self.vertices[a], &self.vertices[b]))
            .sum::<Real>()
            / e.len() as Real
    }

    pub fn bbox_diagonal(&self) -> Real {
        let mut lo = [Real::INFINITY; 3];
        let mut hi = [Real::NEG_INFINITY; 3];
        for v in &self.vertices {
            for k in 0..3 {
                lo[k] = lo[k].min(v[k]);
                hi[k] = hi[k].max(v[k]);
            }
        }
        dist(&lo, &hi)
    }

    /// Same connectivity, new positions.
    pub fn with_vertices(&self, vertices: Vec<Vec3>) -> Result<Self> {
        if vertices.len() != self.vertices.len() {
            return Err(Error::Mesh(format!(
                "expected {} vertices, got {}",
                self.vertices.len(),
                vertices.len()
            )));
        }
        Ok(Self {
            vertices,
            faces: self.faces.clone(),
        })
    }

    /// Vertex positions flattened row-major (`n x 3`).
    pub fn flat_vertices(&self) -> Vec<Real> {
        self.vertices.iter().flatten().copied().collect()
    }

    /// Connected components of the edge graph, each a sorted vertex list.
    pub fn components(&self) -> Vec<Vec<usize>> {
        components(self.vertices.len(), &self.edges())
    }
}

pub(crate) fn components(n: usize, edges: &[(usize, usize)]) -> Vec<Vec<usize>> {
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    for &(a, b) in edges {
        let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
        if ra != rb {
            parent[ra.max(rb)] = ra.min(rb);
        }
    }
    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut slot: HashMap<usize, usize> = HashMap::new();
    for v in 0..n {
        let r = find(&mut parent, v);
        let i = *slot.entry(r).or_insert_with(|| {
            groups.push(Vec::new());
            groups.len() - 1
        });
        groups[i].push(v);
    }
    groups
}

pub(crate) fn sub(a: &Vec3, b: &Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub(crate) fn cross(a: &Vec3, b: &Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub(crate) fn dot(a: &Vec3, b: &Vec3) -> Real {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub(crate) fn norm(a: &Vec3) -> Real {
    dot(a, a).sqrt()
}

pub(crate) fn dist(a: &Vec3, b: &Vec3) -> Real {
    norm(&sub(a, b))
}

/// Area-weighted vertex normals. Vertices whose incident faces all have zero
/// area get `(0, 0, 1)` and a warning.
pub fn vertex_normals(mesh: &TriMesh) -> Vec<Vec3> {
    let mut acc = vec![[0.0; 3]; mesh.num_vertices()];
    for f in &mesh.faces {
        let [a, b, c] = f.map(|i| mesh.vertices[i]);
        // |cross| is twice the face area, so summing raw cross products area-weights
        let n = cross(&sub(&b, &a), &sub(&c, &a));
        for &i in f {
            for k in 0..3 {
                acc[i][k] += n[k];
            }
        }
    }
    let mut degenerate = 0;
    let out = acc
        .into_iter()
        .map(|n| {
            let l = norm(&n);
            if l > 0.0 && l.is_finite() {
                [n[0] / l, n[1] / l, n[2] / l]
            } else {
                degenerate += 1;
                [0.0, 0.0, 1.0]
            }
        })
        .collect();
    if degenerate > 0 {
        log::warn!("{degenerate} vertices have only zero-area faces; using +z normals");
    }
    out
}

/// Geodesic sphere obtained by `subdivisions` rounds of 4-to-1 splitting of an
/// icosahedron; vertex count is `10 * 4^s + 2`. Faces are counter-clockwise
/// seen from outside.
pub fn icosphere(subdivisions: usize, radius: Real) -> TriMesh {
    let t = (1.0 + (5.0 as Real).sqrt()) / 2.0;
    let mut verts: Vec<Vec3> = vec![
        [-1.0, t, 0.0],
        [1.0, t, 0.0],
        [-1.0, -t, 0.0],
        [1.0, -t, 0.0],
        [0.0, -1.0, t],
        [0.0, 1.0, t],
        [0.0, -1.0, -t],
        [0.0, 1.0, -t],
        [t, 0.0, -1.0],
        [t, 0.0, 1.0],
        [-t, 0.0, -1.0],
        [-t, 0.0, 1.0],
    ];
    let mut faces: Vec<[usize; 3]> = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    let project = |v: Vec3| {
        let l = norm(&v);
        [v[0] / l, v[1] / l, v[2] / l]
    };
    verts = verts.into_iter().map(project).collect();
    for _ in 0..subdivisions {
        let mut cache: HashMap<(usize, usize), usize> = HashMap::new();
        let mut next = Vec::with_capacity(faces.len() * 4);
        let mut midpoint = |a: usize, b: usize, verts: &mut Vec<Vec3>| {
            let key = (a.min(b), a.max(b));
            *cache.entry(key).or_insert_with(|| {
                let m = [
                    (verts[a][0] + verts[b][0]) * 0.5,
                    (verts[a][1] + verts[b][1]) * 0.5,
                    (verts[a][2] + verts[b][2]) * 0.5,
                ];
                verts.push(project(m));
                verts.len() - 1
            })
        };
        for &[a, b, c] in &faces {
            let ab = midpoint(a, b, &mut verts);
            let bc = midpoint(b, c, &mut verts);
            let ca = midpoint(c, a, &mut verts);
            next.extend_from_slice(&[[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
        }
        faces = next;
    }
    let vertices = verts
        .into_iter()
        .map(|v| [v[0] * radius, v[1] * radius, v[2] * radius])
        .collect();
    TriMesh { vertices, faces }
}
