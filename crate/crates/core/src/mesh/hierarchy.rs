//! Quadric-error decimation and the down/up sampling operators between levels.

use std::cmp::{Ordering, Reverse};
use std::collections::{BTreeSet, BinaryHeap};
use std::rc::Rc;

use super::{build_operators, cross, dot, norm, sub, GraphOperators, TriMesh, Vec3};
use crate::error::{Error, Result};
use crate::tensor::{Real, SparseMatrix, Tape, Var};

/// Smallest vertex count any level may reach.
pub const MIN_LEVEL_VERTICES: usize = 16;

#[derive(Clone, Debug)]
pub struct SamplingLevel {
    /// `n_coarse x n_fine`, one-hot rows selecting kept vertices.
    pub down: Rc<SparseMatrix>,
    /// `n_fine x n_coarse`, barycentric rows.
    pub up: Rc<SparseMatrix>,
    /// Fine-level indices of the kept vertices, ascending.
    pub kept: Vec<usize>,
    pub mesh: TriMesh,
    pub ops: GraphOperators,
}

#[derive(Clone, Debug)]
pub struct SamplingHierarchy {
    /// Operators of the full-resolution mesh.
    pub base: GraphOperators,
    pub levels: Vec<SamplingLevel>,
}

impl SamplingHierarchy {
    /// Vertex counts from finest to coarsest.
    pub fn sizes(&self) -> Vec<usize> {
        std::iter::once(self.base.num_vertices())
            .chain(self.levels.iter().map(|l| l.kept.len()))
            .collect()
    }

    /// Graph operators at level `l` (0 = full resolution).
    pub fn ops(&self, l: usize) -> &GraphOperators {
        if l == 0 {
            &self.base
        } else {
            &self.levels[l - 1].ops
        }
    }
}

/// Decimates `levels` times, each time to about `1/factor` of the vertices.
/// The procedure is fully deterministic; ties are broken by vertex index.
pub fn build_hierarchy(mesh: &TriMesh, levels: usize, factor: Real) -> Result<SamplingHierarchy> {
    if levels == 0 {
        return Err(Error::Config("hierarchy needs at least one level".into()));
    }
    if !(factor > 1.0) {
        return Err(Error::Config(format!(
            "decimation factor must exceed 1, got {factor}"
        )));
    }
    let base = build_operators(mesh)?;
    let mut current = mesh.clone();
    let mut out = Vec::with_capacity(levels);
    for l in 0..levels {
        let n = current.num_vertices();
        let target = ((n as Real) / factor).round() as usize;
        if target < MIN_LEVEL_VERTICES {
            return Err(Error::Mesh(format!(
                "level {} would have {target} vertices (< {MIN_LEVEL_VERTICES})",
                l + 1
            )));
        }
        let (kept, faces) = if target >= n {
            ((0..n).collect::<Vec<_>>(), current.faces.clone())
        } else {
            decimate(&current, target)?
        };
        let coarse = TriMesh::new(kept.iter().map(|&i| current.vertices[i]).collect(), faces)?;
        let down = SparseMatrix::from_triplets(
            kept.len(),
            n,
            &kept
                .iter()
                .enumerate()
                .map(|(j, &i)| (j, i, 1.0))
                .collect::<Vec<_>>(),
        );
        let up = upsample_matrix(&current, &coarse, &kept);
        let ops = build_operators(&coarse)?;
        log::debug!(
            "hierarchy level {}: {} -> {} vertices",
            l + 1,
            n,
            kept.len()
        );
        out.push(SamplingLevel {
            down: Rc::new(down),
            up: Rc::new(up),
            kept,
            mesh: coarse.clone(),
            ops,
        });
        current = coarse;
    }
    Ok(SamplingHierarchy { base, levels: out })
}

/// Sparse-matrix times dense `[n, F]` features on the tape.
pub fn apply_sampling(tape: &mut Tape, features: Var, matrix: &Rc<SparseMatrix>) -> Result<Var> {
    let shape = tape.shape(features);
    if shape.len() != 2 || shape[0] != matrix.cols() {
        return Err(Error::Shape(format!(
            "cannot apply {}x{} sampling matrix to features of shape {:?}",
            matrix.rows(),
            matrix.cols(),
            shape
        )));
    }
    Ok(tape.spmm(matrix, features))
}

type Quadric = [[Real; 4]; 4];

fn quadric_cost(q: &Quadric, p: &Vec3) -> Real {
    let h = [p[0], p[1], p[2], 1.0];
    let mut s = 0.0;
    for i in 0..4 {
        for j in 0..4 {
            s += h[i] * q[i][j] * h[j];
        }
    }
    s
}

#[derive(Clone, Copy, Debug)]
struct Candidate {
    cost: Real,
    keep: usize,
    remove: usize,
    stamp_keep: u64,
    stamp_remove: u64,
}

impl PartialEq for Candidate {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Candidate {}
impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.cost
            .total_cmp(&other.cost)
            .then(self.remove.cmp(&other.remove))
            .then(self.keep.cmp(&other.keep))
    }
}

struct Decimator<'a> {
    pos: &'a [Vec3],
    faces: Vec<[usize; 3]>,
    face_alive: Vec<bool>,
    vert_faces: Vec<BTreeSet<usize>>,
    nbrs: Vec<BTreeSet<usize>>,
    quadric: Vec<Quadric>,
    alive: Vec<bool>,
    stamp: Vec<u64>,
    heap: BinaryHeap<Reverse<Candidate>>,
}

impl<'a> Decimator<'a> {
    fn new(mesh: &'a TriMesh) -> Self {
        let n = mesh.num_vertices();
        let mut vert_faces = vec![BTreeSet::new(); n];
        let mut nbrs = vec![BTreeSet::new(); n];
        let mut quadric = vec![[[0.0; 4]; 4]; n];
        for (fi, f) in mesh.faces.iter().enumerate() {
            for k in 0..3 {
                vert_faces[f[k]].insert(fi);
                nbrs[f[k]].insert(f[(k + 1) % 3]);
                nbrs[f[(k + 1) % 3]].insert(f[k]);
            }
            let [a, b, c] = f.map(|i| mesh.vertices[i]);
            let nrm = cross(&sub(&b, &a), &sub(&c, &a));
            let len = norm(&nrm);
            if len == 0.0 {
                continue;
            }
            let u = [nrm[0] / len, nrm[1] / len, nrm[2] / len];
            let p = [u[0], u[1], u[2], -dot(&u, &a)];
            let area = 0.5 * len;
            for &v in f {
                for i in 0..4 {
                    for j in 0..4 {
                        quadric[v][i][j] += area * p[i] * p[j];
                    }
                }
            }
        }
        Self {
            pos: &mesh.vertices,
            faces: mesh.faces.clone(),
            face_alive: vec![true; mesh.num_faces()],
            vert_faces,
            nbrs,
            quadric,
            alive: vec![true; n],
            stamp: vec![0; n],
            heap: BinaryHeap::new(),
        }
    }

    fn push(&mut self, keep: usize, remove: usize) {
        let mut q = self.quadric[keep];
        for i in 0..4 {
            for j in 0..4 {
                q[i][j] += self.quadric[remove][i][j];
            }
        }
        self.heap.push(Reverse(Candidate {
            cost: quadric_cost(&q, &self.pos[keep]),
            keep,
            remove,
            stamp_keep: self.stamp[keep],
            stamp_remove: self.stamp[remove],
        }));
    }

    fn push_vertex_edges(&mut self, v: usize) {
        let ns: Vec<usize> = self.nbrs[v].iter().copied().collect();
        for w in ns {
            self.push(v, w);
            self.push(w, v);
        }
    }

    fn valid(&self, c: &Candidate) -> bool {
        let (k, r) = (c.keep, c.remove);
        if !self.alive[k]
            || !self.alive[r]
            || self.stamp[k] != c.stamp_keep
            || self.stamp[r] != c.stamp_remove
        {
            return false;
        }
        if !self.nbrs[k].contains(&r) {
            return false;
        }
        // link condition: shared neighbours are exactly the apexes of faces on the edge
        let shared = self.nbrs[k].intersection(&self.nbrs[r]).count();
        let edge_faces = self.vert_faces[r]
            .iter()
            .filter(|&&f| self.faces[f].contains(&k))
            .count();
        if shared != edge_faces {
            return false;
        }
        // keep at least a triangle's worth of neighbours around the survivor
        if self.nbrs[k].union(&self.nbrs[r]).count() < 5 {
            return false;
        }
        for &f in &self.vert_faces[r] {
            let face = self.faces[f];
            if face.contains(&k) {
                continue;
            }
            let old = face.map(|i| self.pos[i]);
            let new = face.map(|i| if i == r { self.pos[k] } else { self.pos[i] });
            let n_old = cross(&sub(&old[1], &old[0]), &sub(&old[2], &old[0]));
            let n_new = cross(&sub(&new[1], &new[0]), &sub(&new[2], &new[0]));
            if dot(&n_old, &n_new) <= 1e-12 * norm(&n_old) * norm(&n_new) || norm(&n_new) == 0.0 {
                return false;
            }
        }
        true
    }

    fn collapse(&mut self, k: usize, r: usize) {
        for j in 0..4 {
            for i in 0..4 {
                self.quadric[k][i][j] += self.quadric[r][i][j];
            }
        }
        let faces: Vec<usize> = self.vert_faces[r].iter().copied().collect();
        for f in faces {
            if self.faces[f].contains(&k) {
                self.face_alive[f] = false;
                for v in self.faces[f] {
                    self.vert_faces[v].remove(&f);
                }
            } else {
                for v in self.faces[f].iter_mut() {
                    if *v == r {
                        *v = k;
                    }
                }
                self.vert_faces[k].insert(f);
            }
        }
        self.vert_faces[r].clear();
        let ns: Vec<usize> = std::mem::take(&mut self.nbrs[r]).into_iter().collect();
        for w in ns {
            self.nbrs[w].remove(&r);
            if w != k {
                self.nbrs[w].insert(k);
                self.nbrs[k].insert(w);
            }
        }
        self.alive[r] = false;
        self.stamp[k] += 1;
        self.stamp[r] += 1;
        self.push_vertex_edges(k);
    }
}

/// Half-edge collapses until `target` vertices remain. Returns the surviving
/// fine indices (ascending) and the coarse faces in the new numbering.
fn decimate(mesh: &TriMesh, target: usize) -> Result<(Vec<usize>, Vec<[usize; 3]>)> {
    let n = mesh.num_vertices();
    let mut d = Decimator::new(mesh);
    for v in 0..n {
        for w in d.nbrs[v].clone() {
            d.push(v, w);
        }
    }
    let mut remaining = n;
    while remaining > target {
        let Some(Reverse(c)) = d.heap.pop() else {
            return Err(Error::Mesh(format!(
                "decimation stalled at {remaining} vertices (target {target})"
            )));
        };
        if d.valid(&c) {
            d.collapse(c.keep, c.remove);
            remaining -= 1;
        }
    }
    let kept: Vec<usize> = (0..n).filter(|&v| d.alive[v]).collect();
    let mut new_index = vec![usize::MAX; n];
    for (j, &v) in kept.iter().enumerate() {
        new_index[v] = j;
    }
    let faces = d
        .faces
        .iter()
        .zip(&d.face_alive)
        .filter(|(_, &a)| a)
        .map(|(f, _)| f.map(|v| new_index[v]))
        .collect();
    Ok((kept, faces))
}

/// Kept vertices map to themselves; removed ones to the barycentric
/// coordinates of their closest point on the nearest coarse triangle.
fn upsample_matrix(fine: &TriMesh, coarse: &TriMesh, kept: &[usize]) -> SparseMatrix {
    let n = fine.num_vertices();
    let mut coarse_of = vec![None; n];
    for (j, &i) in kept.iter().enumerate() {
        coarse_of[i] = Some(j);
    }
    let mut trip = Vec::with_capacity(n * 3);
    for i in 0..n {
        if let Some(j) = coarse_of[i] {
            trip.push((i, j, 1.0));
            continue;
        }
        let p = fine.vertices[i];
        let mut best = (Real::INFINITY, 0usize, [1.0, 0.0, 0.0]);
        for (fi, f) in coarse.faces.iter().enumerate() {
            let tri = f.map(|v| coarse.vertices[v]);
            let (q, bary) = closest_point_on_triangle(&p, &tri);
            let d2 = dot(&sub(&p, &q), &sub(&p, &q));
            if d2 < best.0 {
                best = (d2, fi, bary);
            }
        }
        let f = coarse.faces[best.1];
        for k in 0..3 {
            if best.2[k] > 0.0 {
                trip.push((i, f[k], best.2[k]));
            }
        }
    }
    SparseMatrix::from_triplets(n, coarse.num_vertices(), &trip)
}

/// Closest point to `p` on triangle `t` and its barycentric coordinates
/// (non-negative, summing to one).
pub(crate) fn closest_point_on_triangle(p: &Vec3, t: &[Vec3; 3]) -> (Vec3, [Real; 3]) {
    let [a, b, c] = t;
    let ab = sub(b, a);
    let ac = sub(c, a);
    let ap = sub(p, a);
    let d1 = dot(&ab, &ap);
    let d2 = dot(&ac, &ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return (*a, [1.0, 0.0, 0.0]);
    }
    let bp = sub(p, b);
    let d3 = dot(&ab, &bp);
    let d4 = dot(&ac, &bp);
    if d3 >= 0.0 && d4 <= d3 {
        return (*b, [0.0, 1.0, 0.0]);
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let v = d1 / (d1 - d3);
        return (lerp(a, b, v), [1.0 - v, v, 0.0]);
    }
    let cp = sub(p, c);
    let d5 = dot(&ab, &cp);
    let d6 = dot(&ac, &cp);
    if d6 >= 0.0 && d5 <= d6 {
        return (*c, [0.0, 0.0, 1.0]);
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let w = d2 / (d2 - d6);
        return (lerp(a, c, w), [1.0 - w, 0.0, w]);
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return (lerp(b, c, w), [0.0, 1.0 - w, w]);
    }
    let denom = 1.0 / (va + vb + vc);
    let v = vb * denom;
    let w = vc * denom;
    let u = 1.0 - v - w;
    let q = [
        a[0] * u + b[0] * v + c[0] * w,
        a[1] * u + b[1] * v + c[1] * w,
        a[2] * u + b[2] * v + c[2] * w,
    ];
    (q, [u, v, w])
}

fn lerp(a: &Vec3, b: &Vec3, t: Real) -> Vec3 {
    [
        a[0] + (b[0] - a[0]) * t,
        a[1] + (b[1] - a[1]) * t,
        a[2] + (b[2] - a[2]) * t,
    ]
}
