//! Compressed sparse row matrix with non-negative weights.

use std::collections::BTreeMap;

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};

/// CSR matrix. Column indices within a row are strictly increasing and every
/// stored weight is `> 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    rows: usize,
    cols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl SparseMatrix {
    pub fn empty(rows: usize, cols: usize) -> Self {
        SparseMatrix {
            rows,
            cols,
            indptr: vec![0; rows + 1],
            indices: Vec::new(),
            values: Vec::new(),
        }
    }

    /// Builds from `(row, col, weight)` triplets. Duplicate coordinates are
    /// summed; non-positive results are dropped.
    pub fn from_triplets(
        rows: usize,
        cols: usize,
        triplets: impl IntoIterator<Item = (usize, usize, f64)>,
    ) -> Result<Self> {
        let mut per_row: Vec<BTreeMap<usize, f64>> = vec![BTreeMap::new(); rows];
        for (r, c, w) in triplets {
            if r >= rows || c >= cols {
                return Err(Error::Index(format!(
                    "entry ({r}, {c}) outside {rows}x{cols}"
                )));
            }
            if !w.is_finite() || w < 0.0 {
                return Err(Error::Param(format!("weight {w} at ({r}, {c})")));
            }
            *per_row[r].entry(c).or_insert(0.0) += w;
        }
        Ok(Self::from_rows(
            cols,
            per_row.into_iter().map(|m| m.into_iter().collect()),
        ))
    }

    /// Rows must already be sorted by column with no duplicates.
    pub(crate) fn from_rows(
        cols: usize,
        rows_iter: impl IntoIterator<Item = Vec<(usize, f64)>>,
    ) -> Self {
        let mut indptr = vec![0];
        let mut indices = Vec::new();
        let mut values = Vec::new();
        for row in rows_iter {
            for (c, w) in row {
                if w > 0.0 {
                    indices.push(c);
                    values.push(w);
                }
            }
            indptr.push(indices.len());
        }
        SparseMatrix {
            rows: indptr.len() - 1,
            cols,
            indptr,
            indices,
            values,
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

    pub fn row(&self, r: usize) -> (&[usize], &[f64]) {
        let (a, b) = (self.indptr[r], self.indptr[r + 1]);
        (&self.indices[a..b], &self.values[a..b])
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        let (idx, val) = self.row(r);
        match idx.binary_search(&c) {
            Ok(p) => val[p],
            Err(_) => 0.0,
        }
    }

    /// All stored entries in row-major order.
    pub fn entries(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.rows).flat_map(move |r| {
            let (idx, val) = self.row(r);
            idx.iter().zip(val).map(move |(&c, &w)| (r, c, w))
        })
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.rows).map(|r| self.row(r).1.iter().sum()).collect()
    }

    pub fn transpose(&self) -> SparseMatrix {
        let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); self.cols];
        for (r, c, w) in self.entries() {
            rows[c].push((r, w));
        }
        Self::from_rows(self.rows, rows)
    }

    /// Returns a copy with every stored value replaced by `f(row, col, w)`.
    pub(crate) fn map_values(&self, mut f: impl FnMut(usize, usize, f64) -> f64) -> SparseMatrix {
        let mut out = self.clone();
        for r in 0..self.rows {
            for p in self.indptr[r]..self.indptr[r + 1] {
                out.values[p] = f(r, self.indices[p], self.values[p]);
            }
        }
        out
    }

    pub fn is_symmetric(&self) -> bool {
        self.rows == self.cols && self.entries().all(|(r, c, w)| self.get(c, r) == w)
    }

    pub fn to_dense(&self) -> Array2<f64> {
        let mut out = Array2::zeros((self.rows, self.cols));
        for (r, c, w) in self.entries() {
            out[[r, c]] = w;
        }
        out
    }

    /// `self · x` for a dense right-hand side.
    pub fn mul_dense(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        if x.nrows() != self.cols {
            return Err(Error::Shape(format!(
                "{}x{} times {}x{}",
                self.rows,
                self.cols,
                x.nrows(),
                x.ncols()
            )));
        }
        let d = x.ncols();
        let x = x.as_standard_layout();
        let xs = x.as_slice().expect("standard layout");
        let mut out = vec![0.0; self.rows * d];
        for r in 0..self.rows {
            let dst = &mut out[r * d..(r + 1) * d];
            let (idx, val) = self.row(r);
            for (&c, &w) in idx.iter().zip(val) {
                let src = &xs[c * d..(c + 1) * d];
                for (o, s) in dst.iter_mut().zip(src) {
                    *o += w * s;
                }
            }
        }
        Ok(Array2::from_shape_vec((self.rows, d), out).expect("shape"))
    }

    /// `self · selfᵀ`, with `self_t` the precomputed transpose. Uses a dense
    /// accumulator per output row.
    pub fn gram(&self, self_t: &SparseMatrix, keep_diagonal: bool) -> SparseMatrix {
        let n = self.rows;
        let mut acc = vec![0.0; n];
        let mut touched: Vec<usize> = Vec::new();
        let mut rows = Vec::with_capacity(n);
        for i in 0..n {
            let (idx, val) = self.row(i);
            for (&j, &w_ij) in idx.iter().zip(val) {
                let (kidx, kval) = self_t.row(j);
                for (&k, &w_kj) in kidx.iter().zip(kval) {
                    if acc[k] == 0.0 {
                        touched.push(k);
                    }
                    acc[k] += w_ij * w_kj;
                }
            }
            touched.sort_unstable();
            let row: Vec<(usize, f64)> = touched
                .iter()
                .filter(|&&k| keep_diagonal || k != i)
                .map(|&k| (k, acc[k]))
                .collect();
            for &k in &touched {
                acc[k] = 0.0;
            }
            touched.clear();
            rows.push(row);
        }
        Self::from_rows(n, rows)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn triplets_sum_duplicates() {
        let m = SparseMatrix::from_triplets(2, 2, [(0, 1, 1.0), (0, 1, 2.0), (1, 0, 4.0)]).unwrap();
        assert_eq!(m.nnz(), 2);
        assert_eq!(m.get(0, 1), 3.0);
        assert_eq!(m.get(1, 1), 0.0);
    }

    #[test]
    fn out_of_range_rejected() {
        assert!(SparseMatrix::from_triplets(2, 2, [(2, 0, 1.0)]).is_err());
    }

    #[test]
    fn mul_dense_matches_dense() {
        let m = SparseMatrix::from_triplets(2, 3, [(0, 0, 1.0), (0, 2, 2.0), (1, 1, 3.0)]).unwrap();
        let x = array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]];
        let y = m.mul_dense(x.view()).unwrap();
        assert_eq!(y, m.to_dense().dot(&x));
        assert!(m.mul_dense(array![[1.0]].view()).is_err());
    }

    #[test]
    fn gram_matches_dense_product() {
        let m = SparseMatrix::from_triplets(2, 2, [(0, 0, 1.0), (0, 1, 1.0), (1, 1, 1.0)]).unwrap();
        let g = m.gram(&m.transpose(), true).to_dense();
        assert_eq!(g, array![[2.0, 1.0], [1.0, 1.0]]);
        let g = m.gram(&m.transpose(), false);
        assert_eq!(g.entries().collect::<Vec<_>>(), vec![(0, 1, 1.0), (1, 0, 1.0)]);
    }
}
