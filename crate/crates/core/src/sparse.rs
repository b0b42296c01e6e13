//! Compressed sparse row storage and a symmetric envelope (profile) Cholesky
//! solver with reverse Cuthill-McKee ordering.
//!
//! The factorization is computed once per set of constrained nodes and reused
//! for every right-hand side, which is what the alternating iteration needs:
//! the two mixed problems keep their matrices and only the data changes.

use std::collections::VecDeque;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    nrows: usize,
    ncols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    data: Vec<f64>,
}

impl CsrMatrix {
    /// Builds a matrix from `(row, col, value)` triplets, summing duplicates.
    /// Column indices are sorted within each row.
    pub fn from_triplets(nrows: usize, ncols: usize, triplets: &[(usize, usize, f64)]) -> Self {
        let mut counts = vec![0usize; nrows + 1];
        for &(r, c, _) in triplets {
            assert!(r < nrows && c < ncols, "triplet ({r}, {c}) out of bounds");
            counts[r + 1] += 1;
        }
        for i in 0..nrows {
            counts[i + 1] += counts[i];
        }
        let mut next = counts.clone();
        let mut cols = vec![0usize; triplets.len()];
        let mut vals = vec![0.0; triplets.len()];
        for &(r, c, v) in triplets {
            let slot = next[r];
            cols[slot] = c;
            vals[slot] = v;
            next[r] += 1;
        }

        let mut indptr = Vec::with_capacity(nrows + 1);
        let mut indices = Vec::with_capacity(triplets.len());
        let mut data = Vec::with_capacity(triplets.len());
        indptr.push(0);
        let mut row: Vec<(usize, f64)> = Vec::new();
        for r in 0..nrows {
            row.clear();
            row.extend((counts[r]..counts[r + 1]).map(|k| (cols[k], vals[k])));
            row.sort_by_key(|&(c, _)| c);
            let mut iter = row.iter().copied();
            if let Some((mut cur_c, mut cur_v)) = iter.next() {
                for (c, v) in iter {
                    if c == cur_c {
                        cur_v += v;
                    } else {
                        indices.push(cur_c);
                        data.push(cur_v);
                        cur_c = c;
                        cur_v = v;
                    }
                }
                indices.push(cur_c);
                data.push(cur_v);
            }
            indptr.push(indices.len());
        }
        Self {
            nrows,
            ncols,
            indptr,
            indices,
            data,
        }
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.data.len()
    }

    /// Iterates over the stored `(col, value)` pairs of one row.
    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let range = self.indptr[i]..self.indptr[i + 1];
        self.indices[range.clone()]
            .iter()
            .copied()
            .zip(self.data[range].iter().copied())
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let range = self.indptr[i]..self.indptr[i + 1];
        match self.indices[range.clone()].binary_search(&j) {
            Ok(pos) => self.data[range.start + pos],
            Err(_) => 0.0,
        }
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.nrows];
        self.mul_vec_into(x, &mut y);
        y
    }

    pub fn mul_vec_into(&self, x: &[f64], y: &mut [f64]) {
        assert_eq!(x.len(), self.ncols);
        assert_eq!(y.len(), self.nrows);
        for (i, yi) in y.iter_mut().enumerate() {
            *yi = self.row(i).map(|(j, v)| v * x[j]).sum();
        }
    }

    /// `xᵀ A y`.
    pub fn bilinear(&self, x: &[f64], y: &[f64]) -> f64 {
        assert_eq!(x.len(), self.nrows);
        x.iter()
            .enumerate()
            .map(|(i, &xi)| xi * self.row(i).map(|(j, v)| v * y[j]).sum::<f64>())
            .sum()
    }

    /// Restriction to the rows and columns listed in `keep` (in that order).
    pub fn principal_submatrix(&self, keep: &[usize]) -> CsrMatrix {
        let mut local = vec![usize::MAX; self.ncols];
        for (k, &g) in keep.iter().enumerate() {
            local[g] = k;
        }
        let mut triplets = Vec::new();
        for (k, &g) in keep.iter().enumerate() {
            for (j, v) in self.row(g) {
                if local[j] != usize::MAX {
                    triplets.push((k, local[j], v));
                }
            }
        }
        CsrMatrix::from_triplets(keep.len(), keep.len(), &triplets)
    }

    pub fn max_asymmetry(&self) -> f64 {
        (0..self.nrows)
            .flat_map(|i| self.row(i).map(move |(j, v)| (i, j, v)))
            .map(|(i, j, v)| (v - self.get(j, i)).abs())
            .fold(0.0, f64::max)
    }
}

/// Reverse Cuthill-McKee ordering of the (symmetric) sparsity graph.
/// Returns `perm` with `perm[new] = old`.
pub fn reverse_cuthill_mckee(matrix: &CsrMatrix) -> Vec<usize> {
    let n = matrix.nrows();
    let adjacency: Vec<Vec<usize>> = (0..n)
        .map(|i| matrix.row(i).map(|(j, _)| j).filter(|&j| j != i).collect())
        .collect();
    let degree: Vec<usize> = adjacency.iter().map(Vec::len).collect();

    let mut visited = vec![false; n];
    let mut order = Vec::with_capacity(n);
    while order.len() < n {
        let seed = (0..n)
            .filter(|&i| !visited[i])
            .min_by_key(|&i| (degree[i], i))
            .expect("unvisited node exists");
        let start = pseudo_peripheral(seed, &adjacency, &degree);

        let mut queue = VecDeque::from([start]);
        visited[start] = true;
        while let Some(node) = queue.pop_front() {
            order.push(node);
            let mut next: Vec<usize> = adjacency[node]
                .iter()
                .copied()
                .filter(|&m| !visited[m])
                .collect();
            next.sort_by_key(|&m| (degree[m], m));
            for m in next {
                visited[m] = true;
                queue.push_back(m);
            }
        }
    }
    order.reverse();
    order
}

fn bfs_levels(start: usize, adjacency: &[Vec<usize>]) -> Vec<usize> {
    let mut level = vec![usize::MAX; adjacency.len()];
    level[start] = 0;
    let mut queue = VecDeque::from([start]);
    while let Some(node) = queue.pop_front() {
        for &m in &adjacency[node] {
            if level[m] == usize::MAX {
                level[m] = level[node] + 1;
                queue.push_back(m);
            }
        }
    }
    level
}

fn pseudo_peripheral(seed: usize, adjacency: &[Vec<usize>], degree: &[usize]) -> usize {
    let mut current = seed;
    let mut eccentricity = 0;
    loop {
        let level = bfs_levels(current, adjacency);
        let depth = level
            .iter()
            .copied()
            .filter(|&l| l != usize::MAX)
            .max()
            .unwrap_or(0);
        if depth <= eccentricity && current != seed {
            return current;
        }
        eccentricity = depth;
        let candidate = (0..adjacency.len())
            .filter(|&i| level[i] == depth)
            .min_by_key(|&i| (degree[i], i))
            .unwrap_or(current);
        if candidate == current {
            return current;
        }
        current = candidate;
    }
}

/// Cholesky factor `L` of a symmetric positive definite matrix stored by
/// rows over its envelope, in reverse Cuthill-McKee order.
#[derive(Debug, Clone)]
pub struct EnvelopeCholesky {
    n: usize,
    perm: Vec<usize>,
    first: Vec<usize>,
    offset: Vec<usize>,
    values: Vec<f64>,
}

impl EnvelopeCholesky {
    pub fn factor(matrix: &CsrMatrix) -> Result<Self> {
        if matrix.nrows() != matrix.ncols() {
            return Err(Error::InvalidArgument(format!(
                "cannot factor a {}x{} matrix",
                matrix.nrows(),
                matrix.ncols()
            )));
        }
        let n = matrix.nrows();
        let perm = reverse_cuthill_mckee(matrix);
        let mut inverse = vec![0usize; n];
        for (new, &old) in perm.iter().enumerate() {
            inverse[old] = new;
        }

        let mut first: Vec<usize> = (0..n).collect();
        for (new, &old) in perm.iter().enumerate() {
            for (j, _) in matrix.row(old) {
                let jn = inverse[j];
                if jn < first[new] {
                    first[new] = jn;
                }
            }
        }
        let mut offset = Vec::with_capacity(n + 1);
        offset.push(0);
        for i in 0..n {
            offset.push(offset[i] + (i - first[i] + 1));
        }
        let mut values = vec![0.0; offset[n]];
        for (new, &old) in perm.iter().enumerate() {
            for (j, v) in matrix.row(old) {
                let jn = inverse[j];
                if jn <= new {
                    values[offset[new] + jn - first[new]] = v;
                }
            }
        }

        for i in 0..n {
            let fi = first[i];
            let row_i = offset[i];
            for j in fi..=i {
                let fj = first[j];
                let row_j = offset[j];
                let lo = fi.max(fj);
                let mut sum = values[row_i + j - fi];
                for k in lo..j {
                    sum -= values[row_i + k - fi] * values[row_j + k - fj];
                }
                if j < i {
                    values[row_i + j - fi] = sum / values[row_j + j - fj];
                } else {
                    if !(sum > 0.0) || !sum.is_finite() {
                        return Err(Error::SolverFailure {
                            reason: format!("non-positive pivot {sum:e} at row {}", perm[i]),
                            residual: f64::NAN,
                        });
                    }
                    values[row_i + i - fi] = sum.sqrt();
                }
            }
        }

        Ok(Self {
            n,
            perm,
            first,
            offset,
            values,
        })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Number of stored factor entries.
    pub fn envelope_size(&self) -> usize {
        self.values.len()
    }

    pub fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        let mut x = rhs.to_vec();
        self.solve_in_place(&mut x);
        x
    }

    pub fn solve_in_place(&self, rhs: &mut [f64]) {
        assert_eq!(rhs.len(), self.n);
        let mut y: Vec<f64> = self.perm.iter().map(|&old| rhs[old]).collect();

        for i in 0..self.n {
            let fi = self.first[i];
            let row = &self.values[self.offset[i]..self.offset[i + 1]];
            let mut sum = y[i];
            for k in fi..i {
                sum -= row[k - fi] * y[k];
            }
            y[i] = sum / row[i - fi];
        }
        for i in (0..self.n).rev() {
            let fi = self.first[i];
            let row = &self.values[self.offset[i]..self.offset[i + 1]];
            y[i] /= row[i - fi];
            let yi = y[i];
            for k in fi..i {
                y[k] -= row[k - fi] * yi;
            }
        }

        for (new, &old) in self.perm.iter().enumerate() {
            rhs[old] = y[new];
        }
    }
}

pub fn norm_inf(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

pub fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn laplacian_1d(n: usize) -> CsrMatrix {
        let mut t = Vec::new();
        for i in 0..n {
            t.push((i, i, 2.0));
            if i + 1 < n {
                t.push((i, i + 1, -1.0));
                t.push((i + 1, i, -1.0));
            }
        }
        CsrMatrix::from_triplets(n, n, &t)
    }

    #[test]
    fn triplets_sum_duplicates() {
        let m = CsrMatrix::from_triplets(2, 2, &[(0, 0, 1.0), (0, 0, 2.0), (1, 0, 4.0)]);
        assert_eq!(m.get(0, 0), 3.0);
        assert_eq!(m.get(1, 0), 4.0);
        assert_eq!(m.get(0, 1), 0.0);
        assert_eq!(m.nnz(), 2);
    }

    #[test]
    fn rcm_is_a_permutation() {
        let m = laplacian_1d(17);
        let mut p = reverse_cuthill_mckee(&m);
        p.sort_unstable();
        assert_eq!(p, (0..17).collect::<Vec<_>>());
    }

    #[test]
    fn cholesky_solves_tridiagonal() {
        let n = 50;
        let m = laplacian_1d(n);
        let x: Vec<f64> = (0..n).map(|i| (i as f64 * 0.3).sin()).collect();
        let b = m.mul_vec(&x);
        let chol = EnvelopeCholesky::factor(&m).unwrap();
        let y = chol.solve(&b);
        for (a, b) in x.iter().zip(&y) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn cholesky_handles_cyclic_coupling() {
        // periodic chain plus shift
        let n = 40;
        let mut t = Vec::new();
        for i in 0..n {
            t.push((i, i, 2.5));
            let j = (i + 1) % n;
            t.push((i, j, -1.0));
            t.push((j, i, -1.0));
        }
        let m = CsrMatrix::from_triplets(n, n, &t);
        let x: Vec<f64> = (0..n).map(|i| 1.0 + i as f64).collect();
        let b = m.mul_vec(&x);
        let y = EnvelopeCholesky::factor(&m).unwrap().solve(&b);
        assert!(x.iter().zip(&y).all(|(a, b)| (a - b).abs() < 1e-9));
    }

    #[test]
    fn indefinite_matrix_is_rejected() {
        let m = CsrMatrix::from_triplets(2, 2, &[(0, 0, 1.0), (0, 1, 2.0), (1, 0, 2.0), (1, 1, 1.0)]);
        assert!(matches!(
            EnvelopeCholesky::factor(&m),
            Err(Error::SolverFailure { .. })
        ));
    }
}
