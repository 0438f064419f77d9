//! Dense vector/matrix primitives and the analytic-gradient kernels every
//! loss in the crate is assembled from.
//!
//! Everything is `f64` and accumulates sequentially in index order, so a run
//! is bit-reproducible for a given seed.

mod adam;
mod contrastive;
mod gradcheck;
mod params;

pub use adam::{adam_step, Adam, AdamState};
pub use contrastive::{softmax_xent_contrastive, ContrastiveGrad};
pub use gradcheck::finite_diff_check;
pub use params::{GradPack, Grads, Params, Tensor};

use crate::error::{ensure, Error, Result};

/// Norms below this are treated as zero when normalizing.
pub const DEGENERATE_NORM: f64 = 1e-12;

/// Row-major dense matrix. Sets of representations are stored one per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        ensure!(
            rows * cols == data.len(),
            Shape,
            "{rows}x{cols} matrix needs {} entries, got {}",
            rows * cols,
            data.len()
        );
        Ok(Self { rows, cols, data })
    }

    /// Stacks equal-length rows. An empty slice yields a `0 x 0` matrix.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            ensure!(r.len() == cols, Shape, "row {i} has length {}, expected {cols}", r.len());
            data.extend_from_slice(r);
        }
        Ok(Self { rows: rows.len(), cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        (0..self.rows).map(move |i| self.row(i))
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    /// Copies the listed rows, in order, into a new matrix.
    pub fn select_rows(&self, idx: &[usize]) -> Mat {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Mat { rows: idx.len(), cols: self.cols, data }
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        let d = x - y;
        acc += d * d;
    }
    acc
}

/// Scales `v` to unit length in place and returns the original norm.
pub fn normalize_in_place(v: &mut [f64]) -> Result<f64> {
    let n = norm(v);
    ensure!(n >= DEGENERATE_NORM && n.is_finite(), Degenerate, "cannot normalize vector with norm {n:e}");
    for x in v.iter_mut() {
        *x /= n;
    }
    Ok(n)
}

pub fn normalized(v: &[f64]) -> Result<Vec<f64>> {
    let mut out = v.to_vec();
    normalize_in_place(&mut out)?;
    Ok(out)
}

/// `out += scale * v`
pub fn axpy(out: &mut [f64], scale: f64, v: &[f64]) {
    debug_assert_eq!(out.len(), v.len());
    for (o, x) in out.iter_mut().zip(v) {
        *o += scale * x;
    }
}

/// Arithmetic mean of the listed rows.
pub fn mean_rows<'a, I>(rows: I, dim: usize) -> Vec<f64>
where
    I: IntoIterator<Item = &'a [f64]>,
{
    let mut acc = vec![0.0; dim];
    let mut n = 0usize;
    for r in rows {
        axpy(&mut acc, 1.0, r);
        n += 1;
    }
    if n > 0 {
        let inv = 1.0 / n as f64;
        acc.iter_mut().for_each(|x| *x *= inv);
    }
    acc
}

/// Pairwise cosine similarities between the rows of `a` and the rows of `b`.
pub fn cosine_sim_matrix(a: &Mat, b: &Mat) -> Result<Mat> {
    ensure!(
        a.cols() == b.cols(),
        Shape,
        "cosine similarity between dim {} and dim {}",
        a.cols(),
        b.cols()
    );
    let norms = |m: &Mat, side: &str| -> Result<Vec<f64>> {
        m.iter_rows()
            .enumerate()
            .map(|(i, r)| {
                let n = norm(r);
                if n < DEGENERATE_NORM {
                    Err(Error::Degenerate(format!("zero-norm row {i} in {side}")))
                } else {
                    Ok(n)
                }
            })
            .collect()
    };
    let na = norms(a, "left operand")?;
    let nb = norms(b, "right operand")?;
    let mut out = Mat::zeros(a.rows(), b.rows());
    for i in 0..a.rows() {
        for j in 0..b.rows() {
            let c = dot(a.row(i), b.row(j)) / (na[i] * nb[j]);
            out.set(i, j, c.clamp(-1.0, 1.0));
        }
    }
    Ok(out)
}
