//! Row-major dense matrices and element access traits shared by tile views,
//! tile copies and scratch buffers.

use crate::tiling::Shape2D;

/// Read access to a 2D block in its own local coordinates.
pub trait MatRead {
    fn shape(&self) -> Shape2D;
    fn at(&self, row: usize, col: usize) -> f64;
}

/// Accumulating write access in local coordinates.
pub trait MatAccum: MatRead {
    fn add_at(&mut self, row: usize, col: usize, value: f64);
}

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Matrix { rows, cols, data }
    }

    /// Panics if `data.len() != rows * cols`.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "buffer does not match a {rows}x{cols} matrix");
        Matrix { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        self.data[row * self.cols + col] = value;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn frobenius(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    /// `||self - reference||_F / ||reference||_F`; an all-zero reference
    /// falls back to the absolute error.
    pub fn rel_frobenius_error(&self, reference: &Matrix) -> f64 {
        assert_eq!((self.rows, self.cols), (reference.rows, reference.cols));
        let diff: f64 = self
            .data
            .iter()
            .zip(&reference.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let norm = reference.frobenius();
        if norm == 0.0 {
            diff
        } else {
            diff / norm
        }
    }
}

impl MatRead for Matrix {
    fn shape(&self) -> Shape2D {
        Shape2D::new(self.rows, self.cols)
    }

    fn at(&self, row: usize, col: usize) -> f64 {
        self.get(row, col)
    }
}

impl MatAccum for Matrix {
    fn add_at(&mut self, row: usize, col: usize, value: f64) {
        self.data[row * self.cols + col] += value;
    }
}

/// Serial triple-loop `A * B`. Used as the verification reference.
pub fn reference_gemm(a: &Matrix, b: &Matrix) -> Matrix {
    assert_eq!(a.cols, b.rows, "inner dimensions differ");
    let mut c = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        for j in 0..b.cols {
            let mut acc = 0.0;
            for l in 0..a.cols {
                acc += a.get(i, l) * b.get(l, j);
            }
            c.set(i, j, acc);
        }
    }
    c
}
