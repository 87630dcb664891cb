//! Adjacency, Laplacian and the rescaled Laplacian fed to Chebyshev filters.

use std::rc::Rc;

use super::TriMesh;
use crate::error::{Error, Result};
use crate::tensor::{Real, SparseMatrix};

const POWER_ITERS: usize = 100;
const POWER_TOL: Real = 1e-9;
/// Headroom applied to the power-iteration estimate, which approaches the
/// largest eigenvalue from below.
const LAMBDA_PAD: Real = 1.01;

#[derive(Clone, Debug)]
pub struct GraphOperators {
    pub adjacency: SparseMatrix,
    pub degree: Vec<Real>,
    pub laplacian: SparseMatrix,
    /// `2 L / lambda_max - I`, shared with tape nodes.
    pub scaled_laplacian: Rc<SparseMatrix>,
    /// Padded estimate actually used for scaling.
    pub lambda_max: Real,
    /// Raw power-iteration estimate.
    pub lambda_estimate: Real,
}

impl GraphOperators {
    pub fn num_vertices(&self) -> usize {
        self.degree.len()
    }
}

pub fn build_operators(mesh: &TriMesh) -> Result<GraphOperators> {
    mesh.validate()?;
    operators_from_edges(mesh.num_vertices(), &mesh.edges())
}

/// Same as [`build_operators`] for a bare undirected edge list.
pub fn operators_from_edges(n: usize, edges: &[(usize, usize)]) -> Result<GraphOperators> {
    if n == 0 {
        return Err(Error::Mesh("graph has no vertices".into()));
    }
    let mut norm_edges: Vec<(usize, usize)> = Vec::with_capacity(edges.len());
    for &(a, b) in edges {
        if a >= n || b >= n || a == b {
            return Err(Error::Mesh(format!(
                "invalid edge ({a}, {b}) for {n} vertices"
            )));
        }
        norm_edges.push((a.min(b), a.max(b)));
    }
    norm_edges.sort_unstable();
    norm_edges.dedup();
    let edges = norm_edges;
    let comps = super::components(n, &edges);
    if comps.len() > 1 {
        let desc: Vec<String> = comps
            .iter()
            .take(8)
            .map(|c| format!("{{{} vertices starting at {}}}", c.len(), c[0]))
            .collect();
        return Err(Error::Mesh(format!(
            "mesh is not edge-connected: {} components {}",
            comps.len(),
            desc.join(", ")
        )));
    }
    let mut degree = vec![0.0; n];
    let mut adj = Vec::with_capacity(edges.len() * 2);
    let mut lap = Vec::with_capacity(edges.len() * 2 + n);
    for &(a, b) in &edges {
        degree[a] += 1.0;
        degree[b] += 1.0;
        adj.push((a, b, 1.0));
        adj.push((b, a, 1.0));
        lap.push((a, b, -1.0));
        lap.push((b, a, -1.0));
    }
    for (i, &d) in degree.iter().enumerate() {
        lap.push((i, i, d));
    }
    let adjacency = SparseMatrix::from_triplets(n, n, &adj);
    let laplacian = SparseMatrix::from_triplets(n, n, &lap);
    let lambda_estimate = power_iteration(&laplacian);
    // an isolated vertex has L = 0; any positive scale keeps L~ = -I well defined
    let lambda_max = if lambda_estimate > 0.0 {
        lambda_estimate * LAMBDA_PAD
    } else {
        2.0
    };
    let scaled = laplacian.scaled_plus_identity(2.0 / lambda_max, -1.0);
    Ok(GraphOperators {
        adjacency,
        degree,
        laplacian,
        scaled_laplacian: Rc::new(scaled),
        lambda_max,
        lambda_estimate,
    })
}

/// Rayleigh-quotient power iteration with a fixed, seedless start vector.
fn power_iteration(m: &SparseMatrix) -> Real {
    let n = m.rows();
    // irregular start so it is not orthogonal to the top eigenvector by symmetry
    let mut v: Vec<Real> = (0..n)
        .map(|i| ((i as Real) * 0.754_877_666 + 0.3).sin() + 0.1)
        .collect();
    normalize(&mut v);
    let mut lambda = 0.0;
    for _ in 0..POWER_ITERS {
        let w = m.matvec(&v);
        let next: Real = w.iter().zip(&v).map(|(a, b)| a * b).sum();
        v = w;
        if normalize(&mut v) == 0.0 {
            return 0.0;
        }
        let done = (next - lambda).abs() <= POWER_TOL * next.abs().max(Real::MIN_POSITIVE);
        lambda = next;
        if done {
            break;
        }
    }
    lambda
}

fn normalize(v: &mut [Real]) -> Real {
    let l = v.iter().map(|x| x * x).sum::<Real>().sqrt();
    if l > 0.0 {
        v.iter_mut().for_each(|x| *x /= l);
    }
    l
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn triangle_laplacian() {
        let m = TriMesh::new(
            vec![[0.0; 3], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
            vec![[0, 1, 2]],
        )
        .unwrap();
        let ops = build_operators(&m).unwrap();
        let want = [2.0, -1.0, -1.0, -1.0, 2.0, -1.0, -1.0, -1.0, 2.0];
        assert_eq!(ops.laplacian.to_dense(), want);
        assert_eq!(ops.degree, vec![2.0; 3]);
    }

    #[test]
    fn disconnected_mesh_names_components() {
        let v = vec![[0.0; 3]; 6];
        let m = TriMesh::new(v, vec![[0, 1, 2], [3, 4, 5]]).unwrap();
        let err = build_operators(&m).unwrap_err().to_string();
        assert!(err.contains("2 components"), "{err}");
        assert!(err.contains("starting at 3"), "{err}");
    }
}
