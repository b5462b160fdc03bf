//! Sigmoid soft histogram.
//!
//! Each observation contributes `sigmoid(σ(x + δ/2)) - sigmoid(σ(x - δ/2))` to
//! every bin, where `x` is its offset from the bin center and `δ = 2 / bins`
//! is the bin width over [-1, 1]. The 2D histogram is the product of the
//! activation and valence weight matrices. Rows are not normalized per
//! observation.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::grid::bin_index;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SoftHistConfig {
    pub bins: usize,
    /// Sharpness; larger values approach the hard histogram.
    pub sigma: f64,
}

impl Default for SoftHistConfig {
    fn default() -> Self {
        Self { bins: 64, sigma: 8.0 }
    }
}

impl SoftHistConfig {
    pub fn new(bins: usize, sigma: f64) -> Result<Self> {
        if bins == 0 {
            return Err(Error::config("soft histogram needs at least one bin"));
        }
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::config(format!(
                "soft histogram sigma must be positive, got {sigma}"
            )));
        }
        Ok(Self { bins, sigma })
    }

    pub fn delta(&self) -> f64 {
        2.0 / self.bins as f64
    }
}

/// Midpoints of the equal partition of [-1, 1].
pub fn bin_centers(config: &SoftHistConfig) -> Vec<f64> {
    let delta = config.delta();
    (0..config.bins)
        .map(|i| -1.0 + (2 * i + 1) as f64 * delta / 2.0)
        .collect()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// n×B matrix of per-observation bin weights.
pub fn soft_weights_1d(values: &[f64], config: &SoftHistConfig) -> Array2<f64> {
    let centers = bin_centers(config);
    let half = config.delta() / 2.0;
    let s = config.sigma;
    Array2::from_shape_fn((values.len(), centers.len()), |(i, j)| {
        let x = values[i] - centers[j];
        sigmoid(s * (x + half)) - sigmoid(s * (x - half))
    })
}

/// B×B soft histogram, activation along rows.
pub fn soft_histogram_2d(act: &[f64], val: &[f64], config: &SoftHistConfig) -> Result<Array2<f64>> {
    check_pair(act.len(), val.len())?;
    let wa = soft_weights_1d(act, config);
    let wv = soft_weights_1d(val, config);
    Ok(wa.t().dot(&wv))
}

/// Hard 2D count histogram on the same bins.
pub fn hard_histogram_2d(act: &[f64], val: &[f64], bins: usize) -> Result<Array2<f64>> {
    check_pair(act.len(), val.len())?;
    let mut h = Array2::zeros((bins, bins));
    for (&a, &v) in act.iter().zip(val) {
        h[[bin_index(a, bins), bin_index(v, bins)]] += 1.0;
    }
    Ok(h)
}

fn check_pair(n_act: usize, n_val: usize) -> Result<()> {
    if n_act != n_val {
        return Err(Error::shape(
            "soft_histogram_2d",
            format!("{n_act} activations vs {n_val} valences"),
        ));
    }
    if n_act == 0 {
        return Err(Error::data("soft histogram of an empty observation set"));
    }
    Ok(())
}

/// Differentiable [`soft_weights_1d`] for an n×1 column of observations.
pub fn soft_weights_1d_var(tape: &Tape, values: Var, config: &SoftHistConfig) -> Result<Var> {
    let (n, c) = tape.shape(values);
    if c != 1 {
        return Err(Error::shape(
            "soft_weights_1d",
            format!("expected n x 1, got {:?}", (n, c)),
        ));
    }
    let centers = Array2::from_shape_vec((1, config.bins), bin_centers(config)).unwrap();
    let ones_row = tape.constant(Array2::ones((1, config.bins)));
    let spread = tape.matmul(values, ones_row)?;
    let ones_col = Array2::ones((n, 1));
    let offsets = tape.constant(ones_col.dot(&centers));
    let x = tape.sub(spread, offsets)?;
    let sx = tape.scale(x, config.sigma);
    let half = config.sigma * config.delta() / 2.0;
    let upper = tape.sigmoid(tape.shift(sx, half));
    let lower = tape.sigmoid(tape.shift(sx, -half));
    tape.sub(upper, lower)
}

/// Differentiable [`soft_histogram_2d`] for n×1 activation and valence columns.
pub fn soft_histogram_2d_var(tape: &Tape, act: Var, val: Var, config: &SoftHistConfig) -> Result<Var> {
    check_pair(tape.shape(act).0, tape.shape(val).0)?;
    let wa = soft_weights_1d_var(tape, act, config)?;
    let wv = soft_weights_1d_var(tape, val, config)?;
    tape.matmul(tape.transpose(wa), wv)
}
