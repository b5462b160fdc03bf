//! Normalized 2D grids over the activation × valence square [-1, 1]².
//!
//! Rows index activation and columns index valence, both ascending.

use ndarray::Array2;

use crate::error::{Error, Result};

pub const SUM_TOLERANCE: f64 = 1e-8;

fn validate(cells: &Array2<f64>, what: &str) -> Result<()> {
    if cells.nrows() != cells.ncols() || cells.is_empty() {
        return Err(Error::shape(
            "grid",
            format!("{what} must be square and non-empty, got {:?}", cells.dim()),
        ));
    }
    if let Some(v) = cells.iter().find(|v| !v.is_finite() || **v < 0.0) {
        return Err(Error::Numerical(format!("{what} has invalid cell value {v}")));
    }
    let total = cells.sum();
    if (total - 1.0).abs() > SUM_TOLERANCE {
        return Err(Error::Numerical(format!("{what} sums to {total}, expected 1")));
    }
    Ok(())
}

/// Clips negatives to zero and rescales to unit mass.
pub fn clip_and_normalize(mut cells: Array2<f64>) -> Result<Array2<f64>> {
    cells.mapv_inplace(|v| if v > 0.0 { v } else { 0.0 });
    let total = cells.sum();
    if !(total > 0.0) || !total.is_finite() {
        return Err(Error::Numerical(format!("grid mass {total} cannot be normalized")));
    }
    cells /= total;
    Ok(cells)
}

/// G×G density grid produced by KDE.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityGrid {
    cells: Array2<f64>,
}

impl ProbabilityGrid {
    pub fn new(cells: Array2<f64>) -> Result<Self> {
        validate(&cells, "probability grid")?;
        Ok(Self { cells })
    }

    pub fn from_unnormalized(cells: Array2<f64>) -> Result<Self> {
        Self::new(clip_and_normalize(cells)?)
    }

    pub fn size(&self) -> usize {
        self.cells.nrows()
    }

    pub fn cells(&self) -> &Array2<f64> {
        &self.cells
    }

    pub fn into_cells(self) -> Array2<f64> {
        self.cells
    }
}

/// N×N binned distribution (N = 4 by default) that models predict.
#[derive(Debug, Clone, PartialEq)]
pub struct BinnedDistribution {
    cells: Array2<f64>,
}

impl BinnedDistribution {
    pub fn new(cells: Array2<f64>) -> Result<Self> {
        validate(&cells, "binned distribution")?;
        Ok(Self { cells })
    }

    pub fn from_unnormalized(cells: Array2<f64>) -> Result<Self> {
        Self::new(clip_and_normalize(cells)?)
    }

    /// Row-major (activation-major) probabilities.
    pub fn from_flat(n: usize, values: &[f64]) -> Result<Self> {
        if values.len() != n * n {
            return Err(Error::shape(
                "binned distribution",
                format!("expected {} values, got {}", n * n, values.len()),
            ));
        }
        Self::new(Array2::from_shape_vec((n, n), values.to_vec()).expect("length checked"))
    }

    pub fn uniform(n: usize) -> Self {
        Self {
            cells: Array2::from_elem((n, n), 1.0 / (n * n) as f64),
        }
    }

    pub fn point_mass(n: usize, row: usize, col: usize) -> Self {
        let mut cells = Array2::zeros((n, n));
        cells[[row, col]] = 1.0;
        Self { cells }
    }

    pub fn n(&self) -> usize {
        self.cells.nrows()
    }

    pub fn cells(&self) -> &Array2<f64> {
        &self.cells
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.cells.iter().copied().collect()
    }

    /// Sum over valence: one entry per activation bin.
    pub fn activation_marginal(&self) -> Vec<f64> {
        self.cells.rows().into_iter().map(|r| r.sum()).collect()
    }

    /// Sum over activation: one entry per valence bin.
    pub fn valence_marginal(&self) -> Vec<f64> {
        self.cells.columns().into_iter().map(|c| c.sum()).collect()
    }
}

/// Index of the equal-width bin of [-1, 1] holding `x`; the right edge
/// belongs to the last bin.
pub fn bin_index(x: f64, bins: usize) -> usize {
    let pos = ((x + 1.0) * 0.5 * bins as f64).floor();
    if pos <= 0.0 {
        0
    } else {
        (pos as usize).min(bins - 1)
    }
}
