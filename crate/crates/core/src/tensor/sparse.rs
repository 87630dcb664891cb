use super::Real;

/// Compressed sparse row matrix with constant entries.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseMatrix {
    rows: usize,
    cols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<Real>,
}

impl SparseMatrix {
    /// Builds from `(row, col, value)` triplets; duplicates are summed and
    /// columns sorted within each row.
    pub fn from_triplets(rows: usize, cols: usize, triplets: &[(usize, usize, Real)]) -> Self {
        let mut sorted: Vec<(usize, usize, Real)> = triplets.to_vec();
        sorted.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        let mut indptr = vec![0; rows + 1];
        let mut indices = Vec::with_capacity(sorted.len());
        let mut values: Vec<Real> = Vec::with_capacity(sorted.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in sorted {
            assert!(
                r < rows && c < cols,
                "triplet ({r},{c}) outside {rows}x{cols}"
            );
            if last == Some((r, c)) {
                *values.last_mut().unwrap() += v;
                continue;
            }
            indices.push(c);
            values.push(v);
            indptr[r + 1] += 1;
            last = Some((r, c));
        }
        for r in 0..rows {
            indptr[r + 1] += indptr[r];
        }
        Self {
            rows,
            cols,
            indptr,
            indices,
            values,
        }
    }

    pub fn identity(n: usize) -> Self {
        Self {
            rows: n,
            cols: n,
            indptr: (0..=n).collect(),
            indices: (0..n).collect(),
            values: vec![1.0; n],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// `(column, value)` pairs of row `r`.
    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, Real)> + '_ {
        let span = self.indptr[r]..self.indptr[r + 1];
        self.indices[span.clone()]
            .iter()
            .copied()
            .zip(self.values[span].iter().copied())
    }

    pub fn triplets(&self) -> Vec<(usize, usize, Real)> {
        (0..self.rows)
            .flat_map(|r| self.row(r).map(move |(c, v)| (r, c, v)))
            .collect()
    }

    pub fn transpose(&self) -> Self {
        let t: Vec<_> = self
            .triplets()
            .into_iter()
            .map(|(r, c, v)| (c, r, v))
            .collect();
        Self::from_triplets(self.cols, self.rows, &t)
    }

    pub fn to_dense(&self) -> Vec<Real> {
        let mut d = vec![0.0; self.rows * self.cols];
        for (r, c, v) in self.triplets() {
            d[r * self.cols + c] += v;
        }
        d
    }

    pub fn matvec(&self, x: &[Real]) -> Vec<Real> {
        (0..self.rows)
            .map(|r| self.row(r).map(|(c, v)| v * x[c]).sum())
            .collect()
    }

    /// Product with a row-major dense `[cols, f]` matrix.
    pub fn matmul_dense(&self, x: &[Real], f: usize) -> Vec<Real> {
        assert_eq!(x.len(), self.cols * f);
        let mut out = vec![0.0; self.rows * f];
        for r in 0..self.rows {
            let dst = &mut out[r * f..(r + 1) * f];
            for (c, v) in self.row(r) {
                for (d, s) in dst.iter_mut().zip(&x[c * f..(c + 1) * f]) {
                    *d += v * s;
                }
            }
        }
        out
    }

    /// `selfᵀ · g` for a row-major `[rows, f]` matrix `g`.
    pub fn transpose_matmul_dense(&self, g: &[Real], f: usize) -> Vec<Real> {
        let mut out = vec![0.0; self.cols * f];
        for r in 0..self.rows {
            let src = &g[r * f..(r + 1) * f];
            for (c, v) in self.row(r) {
                for (d, s) in out[c * f..(c + 1) * f].iter_mut().zip(src) {
                    *d += v * s;
                }
            }
        }
        out
    }

    /// Entrywise linear combination `a*self + b*I` (square matrices only).
    pub fn scaled_plus_identity(&self, a: Real, b: Real) -> Self {
        assert_eq!(self.rows, self.cols);
        let mut t: Vec<_> = self
            .triplets()
            .into_iter()
            .map(|(r, c, v)| (r, c, a * v))
            .collect();
        t.extend((0..self.rows).map(|i| (i, i, b)));
        Self::from_triplets(self.rows, self.cols, &t)
    }
}
