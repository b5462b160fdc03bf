//! Orthonormal 2D cosine transforms (type II forward, type III inverse).
//!
//! Rows and columns are transformed separably with `rustdct`; each 1D
//! transform is rescaled so the forward transform is orthogonal and the
//! inverse is its exact transpose.

use std::sync::Arc;

use ndarray::Array2;
use rustdct::{Dct2, Dct3, DctPlanner};

use crate::error::{Error, Result};

pub(crate) fn check_size(g: usize) -> Result<()> {
    if g < 2 || !g.is_power_of_two() {
        return Err(Error::config(format!("grid size {g} must be a power of two")));
    }
    Ok(())
}

/// Planned 1D transforms for one length.
pub struct CosineTransform {
    len: usize,
    forward: Arc<dyn Dct2<f64>>,
    inverse: Arc<dyn Dct3<f64>>,
}

impl CosineTransform {
    pub fn new(len: usize) -> Result<Self> {
        check_size(len)?;
        let mut planner = DctPlanner::new();
        Ok(Self {
            len,
            forward: planner.plan_dct2(len),
            inverse: planner.plan_dct3(len),
        })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Unnormalized DCT-II: `X_k = Σ_j x_j cos(π k (2j + 1) / 2G)`.
    pub fn forward_raw(&self, buf: &mut [f64]) {
        self.forward.process_dct2(buf);
    }

    pub fn forward(&self, buf: &mut [f64]) {
        self.forward.process_dct2(buf);
        let s = (2.0 / self.len as f64).sqrt();
        for v in buf.iter_mut() {
            *v *= s;
        }
        buf[0] *= std::f64::consts::FRAC_1_SQRT_2;
    }

    pub fn inverse(&self, buf: &mut [f64]) {
        buf[0] *= std::f64::consts::SQRT_2;
        self.inverse.process_dct3(buf);
        let s = (2.0 / self.len as f64).sqrt();
        for v in buf.iter_mut() {
            *v *= s;
        }
    }
}

fn apply_separable(grid: &Array2<f64>, f: impl Fn(&CosineTransform, &mut [f64])) -> Result<Array2<f64>> {
    let (r, c) = grid.dim();
    if r != c {
        return Err(Error::shape("dct2", format!("grid must be square, got {:?}", (r, c))));
    }
    let plan = CosineTransform::new(r)?;
    let mut out = grid.as_standard_layout().to_owned();
    let mut buf = vec![0.0; r];
    for mut row in out.rows_mut() {
        buf.iter_mut().zip(row.iter()).for_each(|(b, v)| *b = *v);
        f(&plan, &mut buf);
        row.iter_mut().zip(&buf).for_each(|(v, b)| *v = *b);
    }
    for mut col in out.columns_mut() {
        buf.iter_mut().zip(col.iter()).for_each(|(b, v)| *b = *v);
        f(&plan, &mut buf);
        col.iter_mut().zip(&buf).for_each(|(v, b)| *v = *b);
    }
    Ok(out)
}

pub fn dct2_forward(grid: &Array2<f64>) -> Result<Array2<f64>> {
    apply_separable(grid, |p, b| p.forward(b))
}

pub fn dct2_inverse(coeffs: &Array2<f64>) -> Result<Array2<f64>> {
    apply_separable(coeffs, |p, b| p.inverse(b))
}

/// Dense orthonormal DCT-II matrix `C` with `C[k][j] = s_k cos(π k (2j+1) / 2G)`.
pub fn dct_matrix(g: usize) -> Array2<f64> {
    let scale = (2.0 / g as f64).sqrt();
    Array2::from_shape_fn((g, g), |(k, j)| {
        let s = if k == 0 {
            scale * std::f64::consts::FRAC_1_SQRT_2
        } else {
            scale
        };
        s * (std::f64::consts::PI * k as f64 * (2 * j + 1) as f64 / (2.0 * g as f64)).cos()
    })
}
