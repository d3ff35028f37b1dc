/// Row-compressed sparse matrix used for LP constraint blocks.
///
/// Rows are appended one at a time; entries within a row keep insertion
/// order. Duplicate column indices within a row are summed on access by
/// the solvers, never merged here.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RowMatrix {
    ncols: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
}

impl RowMatrix {
    pub fn new(ncols: usize) -> Self {
        Self {
            ncols,
            row_ptr: vec![0],
            cols: Vec::new(),
            vals: Vec::new(),
        }
    }

    pub fn from_dense(ncols: usize, rows: &[Vec<f64>]) -> Self {
        let mut m = Self::new(ncols);
        for row in rows {
            m.push_dense_row(row);
        }
        m
    }

    pub fn nrows(&self) -> usize {
        self.row_ptr.len() - 1
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    /// Appends a row given as `(column, value)` pairs. Zero values are dropped.
    pub fn push_row(&mut self, entries: &[(usize, f64)]) {
        for &(c, v) in entries {
            assert!(c < self.ncols, "column {c} out of range {}", self.ncols);
            if v != 0.0 {
                self.cols.push(c);
                self.vals.push(v);
            }
        }
        self.row_ptr.push(self.cols.len());
    }

    pub fn push_dense_row(&mut self, row: &[f64]) {
        assert_eq!(row.len(), self.ncols, "dense row length mismatch");
        for (c, &v) in row.iter().enumerate() {
            if v != 0.0 {
                self.cols.push(c);
                self.vals.push(v);
            }
        }
        self.row_ptr.push(self.cols.len());
    }

    pub fn row(&self, k: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.row_ptr[k]..self.row_ptr[k + 1];
        self.cols[span.clone()]
            .iter()
            .copied()
            .zip(self.vals[span].iter().copied())
    }

    pub fn row_dot(&self, k: usize, z: &[f64]) -> f64 {
        self.row(k).map(|(c, v)| v * z[c]).sum()
    }

    /// Sum of `|a_kj * z_j|`, the natural scale for a residual of row `k`.
    pub fn row_abs_dot(&self, k: usize, z: &[f64]) -> f64 {
        self.row(k).map(|(c, v)| (v * z[c]).abs()).sum()
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        (0..self.nrows())
            .map(|k| {
                let mut row = vec![0.0; self.ncols];
                for (c, v) in self.row(k) {
                    row[c] += v;
                }
                row
            })
            .collect()
    }

    pub fn mul_vec(&self, z: &[f64]) -> Vec<f64> {
        (0..self.nrows()).map(|k| self.row_dot(k, z)).collect()
    }
}
