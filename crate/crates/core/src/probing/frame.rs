//! Random orthonormal frames.
//!
//! A `d x p` frame is drawn by filling a Gaussian matrix and orthonormalising
//! its columns with modified Gram–Schmidt. Because the Gaussian law is
//! invariant under left multiplication by orthogonal matrices and MGS is
//! equivariant, the resulting frame is Haar-distributed on the Stiefel
//! manifold (for `p = d` it is a Haar orthogonal matrix).

use rand::Rng;
use rand_distr::StandardNormal;

/// Norms below this trigger a redraw of the whole Gaussian matrix.
pub const DEGENERACY_TOLERANCE: f64 = 1e-12;

/// Column-orthonormal `rows x cols` matrix, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Frame {
    pub fn from_row_major(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }

    pub fn identity(n: usize) -> Self {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Self::from_row_major(n, n, data)
    }

    /// The first two coordinate axes as a `d x 2` frame.
    pub fn axes(d: usize) -> Self {
        let mut data = vec![0.0; d * 2];
        data[0] = 1.0;
        data[3] = 1.0;
        Self::from_row_major(d, 2, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols + col]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// `self * v`.
    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        debug_assert_eq!(v.len(), self.cols);
        self.data
            .chunks_exact(self.cols)
            .map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum())
            .collect()
    }

    /// `self^T * v`.
    pub fn apply_transpose(&self, v: &[f64]) -> Vec<f64> {
        debug_assert_eq!(v.len(), self.rows);
        let mut out = vec![0.0; self.cols];
        for (row, &vi) in self.data.chunks_exact(self.cols).zip(v) {
            for (o, a) in out.iter_mut().zip(row) {
                *o += a * vi;
            }
        }
        out
    }

    /// `max |F^T F - I|`.
    pub fn orthonormality_error(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for a in 0..self.cols {
            for b in 0..self.cols {
                let dot: f64 = (0..self.rows).map(|i| self.get(i, a) * self.get(i, b)).sum();
                let target = if a == b { 1.0 } else { 0.0 };
                worst = worst.max((dot - target).abs());
            }
        }
        worst
    }
}

/// Orthonormalises the columns of a row-major `rows x cols` matrix in place
/// with modified Gram–Schmidt. Returns `false` when a column norm falls
/// below [`DEGENERACY_TOLERANCE`] at any stage.
pub fn modified_gram_schmidt(rows: usize, cols: usize, m: &mut [f64]) -> bool {
    for j in 0..cols {
        for k in 0..j {
            let dot: f64 = (0..rows).map(|i| m[i * cols + k] * m[i * cols + j]).sum();
            for i in 0..rows {
                m[i * cols + j] -= dot * m[i * cols + k];
            }
        }
        let norm = (0..rows)
            .map(|i| m[i * cols + j] * m[i * cols + j])
            .sum::<f64>()
            .sqrt();
        if !(norm >= DEGENERACY_TOLERANCE) {
            return false;
        }
        for i in 0..rows {
            m[i * cols + j] /= norm;
        }
    }
    true
}

/// Haar-distributed `rows x cols` frame (`cols <= rows`).
pub fn haar_frame<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Frame {
    assert!(cols <= rows && cols >= 1);
    loop {
        let mut m: Vec<f64> = (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect();
        if modified_gram_schmidt(rows, cols, &mut m) {
            return Frame::from_row_major(rows, cols, m);
        }
    }
}
