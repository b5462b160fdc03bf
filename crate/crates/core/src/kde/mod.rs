//! Kernel density estimation by diffusion on [-1, 1]².
//!
//! A 2D histogram is smoothed by attenuating its cosine coefficients with
//! `exp(-(πk)² t / 2)` per axis, which solves the heat equation with
//! reflecting boundaries. [`kde2d`] starts from a hard histogram; [`diffkde`]
//! starts from the sigmoid soft histogram and records everything on a tape so
//! gradients reach the observations. Diffusion times are chosen per axis on
//! the marginals and are treated as constants by the reverse pass.

pub mod bandwidth;
pub mod dct;

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::grid::{BinnedDistribution, ProbabilityGrid};
use crate::softhist::{hard_histogram_2d, soft_histogram_2d, soft_histogram_2d_var, SoftHistConfig};

pub use bandwidth::{select_bandwidth, Bandwidth, BandwidthMethod};
pub use dct::{dct2_forward, dct2_inverse};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BandwidthMode {
    Automatic,
    /// Diffusion times on the unit interval for activation and valence.
    Fixed {
        t_act: f64,
        t_val: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KdeConfig {
    pub grid_size: usize,
    pub bandwidth: BandwidthMode,
}

impl KdeConfig {
    pub fn new(grid_size: usize, bandwidth: BandwidthMode) -> Result<Self> {
        if grid_size < 8 || !grid_size.is_power_of_two() {
            return Err(Error::config(format!(
                "KDE grid size {grid_size} must be a power of two >= 8"
            )));
        }
        if let BandwidthMode::Fixed { t_act, t_val } = bandwidth {
            if !(t_act > 0.0 && t_val > 0.0) {
                return Err(Error::config("fixed diffusion times must be positive"));
            }
        }
        Ok(Self { grid_size, bandwidth })
    }

    /// 512-cell grid with automatic bandwidth, used for targets.
    pub fn targets() -> Self {
        Self {
            grid_size: 512,
            bandwidth: BandwidthMode::Automatic,
        }
    }

    /// 64-cell grid with automatic bandwidth, used by the differentiable path.
    pub fn differentiable() -> Self {
        Self {
            grid_size: 64,
            bandwidth: BandwidthMode::Automatic,
        }
    }

    pub fn with_fixed(self, t_act: f64, t_val: f64) -> Self {
        Self {
            bandwidth: BandwidthMode::Fixed { t_act, t_val },
            ..self
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KdeOutput {
    pub grid: ProbabilityGrid,
    pub bandwidth_act: Bandwidth,
    pub bandwidth_val: Bandwidth,
}

impl KdeOutput {
    pub fn used_fallback(&self) -> bool {
        self.bandwidth_act.is_fallback() || self.bandwidth_val.is_fallback()
    }
}

/// Per-mode Gaussian attenuation `exp(-(πk)² t / 2)`.
pub fn attenuation(g: usize, t: f64) -> Array1<f64> {
    let pi2 = std::f64::consts::PI * std::f64::consts::PI;
    Array1::from_shape_fn(g, |k| (-pi2 * (k * k) as f64 * t / 2.0).exp())
}

/// Dense G×G operator applying the 1D diffusion for time `t`:
/// `Cᵀ diag(attenuation) C` with `C` the orthonormal DCT-II matrix.
pub fn smoothing_matrix(g: usize, t: f64) -> Array2<f64> {
    let c = dct::dct_matrix(g);
    let att = attenuation(g, t);
    let scaled = &c * &att.insert_axis(Axis(1));
    c.t().dot(&scaled)
}

fn resolve_bandwidths(hist: &Array2<f64>, n: usize, config: &KdeConfig) -> Result<(Bandwidth, Bandwidth)> {
    match config.bandwidth {
        BandwidthMode::Fixed { t_act, t_val } => Ok((Bandwidth::fixed(t_act), Bandwidth::fixed(t_val))),
        BandwidthMode::Automatic => {
            let act_marginal: Vec<f64> = hist.sum_axis(Axis(1)).to_vec();
            let val_marginal: Vec<f64> = hist.sum_axis(Axis(0)).to_vec();
            Ok((select_bandwidth(&act_marginal, n)?, select_bandwidth(&val_marginal, n)?))
        }
    }
}

fn check_observations(act: &[f64], val: &[f64]) -> Result<()> {
    if act.len() != val.len() {
        return Err(Error::shape(
            "kde2d",
            format!("{} vs {} observations", act.len(), val.len()),
        ));
    }
    if act.len() < 2 {
        return Err(Error::data(format!(
            "KDE needs at least 2 observations, got {}",
            act.len()
        )));
    }
    if act.iter().chain(val).any(|v| !v.is_finite()) {
        return Err(Error::data("KDE observations must be finite"));
    }
    Ok(())
}

fn clamp_all(xs: &[f64]) -> Vec<f64> {
    xs.iter().map(|v| v.clamp(-1.0, 1.0)).collect()
}

/// Diffuses a (possibly soft) histogram and normalizes it.
pub fn smooth_histogram(hist: &Array2<f64>, n: usize, config: &KdeConfig) -> Result<KdeOutput> {
    let g = config.grid_size;
    if hist.dim() != (g, g) {
        return Err(Error::shape(
            "smooth_histogram",
            format!("{:?} vs grid {g}", hist.dim()),
        ));
    }
    let (bw_act, bw_val) = resolve_bandwidths(hist, n, config)?;
    let mut coeffs = dct2_forward(hist)?;
    let att_a = attenuation(g, bw_act.t);
    let att_v = attenuation(g, bw_val.t);
    for ((i, j), c) in coeffs.indexed_iter_mut() {
        *c *= att_a[i] * att_v[j];
    }
    let smoothed = dct2_inverse(&coeffs)?;
    Ok(KdeOutput {
        grid: ProbabilityGrid::from_unnormalized(smoothed)?,
        bandwidth_act: bw_act,
        bandwidth_val: bw_val,
    })
}

/// Plain KDE: hard histogram, diffusion, clip, normalize.
pub fn kde2d(act: &[f64], val: &[f64], config: &KdeConfig) -> Result<KdeOutput> {
    check_observations(act, val)?;
    let hist = hard_histogram_2d(&clamp_all(act), &clamp_all(val), config.grid_size)?;
    smooth_histogram(&hist, act.len(), config)
}

fn check_diff_sizes(hist: &SoftHistConfig, kde: &KdeConfig) -> Result<()> {
    if hist.bins != kde.grid_size {
        return Err(Error::config(format!(
            "soft histogram bins ({}) must equal the KDE grid size ({})",
            hist.bins, kde.grid_size
        )));
    }
    Ok(())
}

/// DiffKDE forward pass without a tape (evaluation path).
pub fn diffkde_values(
    act: &[f64],
    val: &[f64],
    hist_config: &SoftHistConfig,
    kde_config: &KdeConfig,
) -> Result<KdeOutput> {
    check_diff_sizes(hist_config, kde_config)?;
    check_observations(act, val)?;
    let hist = soft_histogram_2d(&clamp_all(act), &clamp_all(val), hist_config)?;
    smooth_histogram(&hist, act.len(), kde_config)
}

pub struct DiffKdeOutput {
    /// Normalized G×G grid on the tape.
    pub grid: Var,
    pub bandwidth_act: Bandwidth,
    pub bandwidth_val: Bandwidth,
}

/// Differentiable KDE of n×1 activation and valence columns.
///
/// Inputs are used as given; callers clamp to [-1, 1] beforehand.
pub fn diffkde(
    tape: &Tape,
    act: Var,
    val: Var,
    hist_config: &SoftHistConfig,
    kde_config: &KdeConfig,
) -> Result<DiffKdeOutput> {
    check_diff_sizes(hist_config, kde_config)?;
    let n = tape.shape(act).0;
    if n < 2 {
        return Err(Error::data(format!("KDE needs at least 2 observations, got {n}")));
    }
    let hist = soft_histogram_2d_var(tape, act, val, hist_config)?;
    let (bw_act, bw_val) = tape.with_value(hist, |h| resolve_bandwidths(h, n, kde_config))?;
    let g = kde_config.grid_size;
    let left = tape.constant(smoothing_matrix(g, bw_act.t));
    let right = tape.constant(smoothing_matrix(g, bw_val.t).reversed_axes());
    let smoothed = tape.matmul(tape.matmul(left, hist)?, right)?;
    let clipped = tape.relu(smoothed);
    let total = tape.sum(clipped);
    let grid = tape.div_scalar(clipped, total)?;
    Ok(DiffKdeOutput {
        grid,
        bandwidth_act: bw_act,
        bandwidth_val: bw_val,
    })
}

/// N×G block-averaging matrix: row `i` averages cells `[i·G/N, (i+1)·G/N)`.
pub fn block_mean_matrix(g: usize, n: usize) -> Result<Array2<f64>> {
    if n == 0 || g % n != 0 {
        return Err(Error::config(format!("grid size {g} is not divisible by {n} bins")));
    }
    let b = g / n;
    Ok(Array2::from_shape_fn((n, g), |(i, j)| {
        if j / b == i {
            1.0 / b as f64
        } else {
            0.0
        }
    }))
}

/// Block means of the grid, renormalized to unit mass.
pub fn bin_grid(grid: &ProbabilityGrid, n: usize) -> Result<BinnedDistribution> {
    let g = grid.size();
    let m = block_mean_matrix(g, n)?;
    BinnedDistribution::from_unnormalized(m.dot(grid.cells()).dot(&m.t()))
}

/// Differentiable [`bin_grid`] for a G×G grid on the tape.
pub fn bin_grid_var(tape: &Tape, grid: Var, n: usize) -> Result<Var> {
    let (g, c) = tape.shape(grid);
    if g != c {
        return Err(Error::shape(
            "bin_grid",
            format!("grid must be square, got {:?}", (g, c)),
        ));
    }
    let m = block_mean_matrix(g, n)?;
    let left = tape.constant(m.clone());
    let right = tape.constant(m.reversed_axes());
    let means = tape.matmul(tape.matmul(left, grid)?, right)?;
    let total = tape.sum(means);
    tape.div_scalar(means, total)
}
