//! Minimal CSR sparse matrix with triplet assembly.
//!
//! Nothing fancy: the Jacobian assembly pushes (row, col, value) triplets,
//! duplicates are summed (periodic stencils on very small grids can hit the
//! same entry twice), and the Krylov loop only needs matvec plus row access.

/// Triplet accumulator; convert once with [`Triplets::into_csr`].
#[derive(Debug, Clone)]
pub struct Triplets {
    n_rows: usize,
    n_cols: usize,
    entries: Vec<(usize, usize, f64)>,
}

impl Triplets {
    pub fn new(n_rows: usize, n_cols: usize) -> Self {
        Self { n_rows, n_cols, entries: Vec::new() }
    }

    pub fn with_capacity(n_rows: usize, n_cols: usize, cap: usize) -> Self {
        Self { n_rows, n_cols, entries: Vec::with_capacity(cap) }
    }

    pub fn push(&mut self, row: usize, col: usize, value: f64) {
        debug_assert!(row < self.n_rows && col < self.n_cols);
        self.entries.push((row, col, value));
    }

    pub fn into_csr(mut self) -> CsrMatrix {
        self.entries.sort_unstable_by_key(|&(r, c, _)| (r, c));
        let mut row_ptr = Vec::with_capacity(self.n_rows + 1);
        let mut cols = Vec::with_capacity(self.entries.len());
        let mut vals = Vec::with_capacity(self.entries.len());
        row_ptr.push(0);
        let mut current_row = 0usize;
        for (r, c, v) in self.entries {
            while current_row < r {
                row_ptr.push(cols.len());
                current_row += 1;
            }
            let row_start = *row_ptr.last().unwrap();
            if cols.len() > row_start && *cols.last().unwrap() == c {
                // Duplicate column within the current row: sum.
                *vals.last_mut().unwrap() += v;
            } else {
                cols.push(c);
                vals.push(v);
            }
        }
        while current_row < self.n_rows {
            row_ptr.push(cols.len());
            current_row += 1;
        }
        CsrMatrix { n_rows: self.n_rows, n_cols: self.n_cols, row_ptr, cols, vals }
    }
}

#[derive(Debug, Clone)]
pub struct CsrMatrix {
    n_rows: usize,
    n_cols: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
}

impl CsrMatrix {
    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn nnz(&self) -> usize {
        self.cols.len()
    }

    /// Column indices and values of one row, ascending in column.
    pub fn row(&self, r: usize) -> (&[usize], &[f64]) {
        let (lo, hi) = (self.row_ptr[r], self.row_ptr[r + 1]);
        (&self.cols[lo..hi], &self.vals[lo..hi])
    }

    /// Entry lookup; structural zeros read as 0.0.
    pub fn get(&self, r: usize, c: usize) -> f64 {
        let (cols, vals) = self.row(r);
        match cols.binary_search(&c) {
            Ok(k) => vals[k],
            Err(_) => 0.0,
        }
    }

    /// `y = A x`.
    pub fn matvec(&self, x: &[f64], y: &mut [f64]) {
        debug_assert_eq!(x.len(), self.n_cols);
        debug_assert_eq!(y.len(), self.n_rows);
        for r in 0..self.n_rows {
            let (cols, vals) = self.row(r);
            let mut acc = 0.0;
            for (c, v) in cols.iter().zip(vals) {
                acc += v * x[*c];
            }
            y[r] = acc;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn assembly_sorts_rows_and_merges_duplicates() {
        let mut t = Triplets::new(3, 3);
        t.push(2, 0, 5.0);
        t.push(0, 1, 1.0);
        t.push(0, 1, 2.0); // duplicate, sums to 3
        t.push(1, 2, -1.0);
        t.push(0, 0, 4.0);
        let a = t.into_csr();
        assert_eq!(a.nnz(), 4);
        assert_eq!(a.get(0, 0), 4.0);
        assert_eq!(a.get(0, 1), 3.0);
        assert_eq!(a.get(1, 2), -1.0);
        assert_eq!(a.get(2, 0), 5.0);
        assert_eq!(a.get(2, 2), 0.0);
    }

    #[test]
    fn empty_rows_are_preserved() {
        let mut t = Triplets::new(4, 2);
        t.push(3, 1, 2.0);
        let a = t.into_csr();
        assert_eq!(a.row(0).0.len(), 0);
        assert_eq!(a.row(1).0.len(), 0);
        assert_eq!(a.row(2).0.len(), 0);
        assert_eq!(a.row(3).0, &[1]);
    }

    #[test]
    fn matvec_matches_dense_product() {
        let mut t = Triplets::new(3, 4);
        let dense = [
            [1.0, 0.0, 2.0, 0.0],
            [0.0, -3.0, 0.0, 0.5],
            [4.0, 0.0, 0.0, 1.0],
        ];
        for (r, row) in dense.iter().enumerate() {
            for (c, &v) in row.iter().enumerate() {
                if v != 0.0 {
                    t.push(r, c, v);
                }
            }
        }
        let a = t.into_csr();
        let x = [1.0, 2.0, 3.0, 4.0];
        let mut y = [0.0; 3];
        a.matvec(&x, &mut y);
        assert_eq!(y, [7.0, -4.0, 8.0]);
    }
}
