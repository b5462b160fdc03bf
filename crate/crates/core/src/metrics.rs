//! Losses and evaluation metrics.
//!
//! CCC uses population moments throughout. JSD uses the natural logarithm.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::grid::BinnedDistribution;

/// Added to predicted probabilities before taking the log.
pub const CE_EPSILON: f64 = 1e-8;

/// Bin-to-value weights for consensus extraction from a 4×4 distribution.
pub const CONSENSUS_WEIGHTS: [f64; 4] = [-1.0, -0.5, 0.5, 1.0];

fn moments(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    (m, x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n)
}

fn check_pair(op: &'static str, x: usize, y: usize) -> Result<()> {
    if x != y {
        return Err(Error::shape(op, format!("lengths {x} and {y} differ")));
    }
    if x < 2 {
        return Err(Error::data(format!("{op} needs at least 2 pairs, got {x}")));
    }
    Ok(())
}

/// Lin's concordance correlation coefficient.
///
/// Two constant sequences give 1 when equal and 0 otherwise.
pub fn ccc(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair("ccc", x.len(), y.len())?;
    let (mx, vx) = moments(x);
    let (my, vy) = moments(y);
    let n = x.len() as f64;
    let cov = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>() / n;
    let denom = vx + vy + (mx - my) * (mx - my);
    if denom == 0.0 {
        return Ok(1.0);
    }
    if vx == 0.0 && vy == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * cov / denom)
}

/// `2 - CCC(pred_act, act) - CCC(pred_val, val)`.
pub fn ccc_loss(pred_act: &[f64], act: &[f64], pred_val: &[f64], val: &[f64]) -> Result<f64> {
    Ok(2.0 - ccc(pred_act, act)? - ccc(pred_val, val)?)
}

/// Differentiable CCC of two n×1 columns.
pub fn ccc_var(tape: &Tape, x: Var, y: Var) -> Result<Var> {
    check_pair("ccc", tape.shape(x).0, tape.shape(y).0)?;
    let mx = tape.mean(x);
    let my = tape.mean(y);
    let dx = tape.sub_scalar(x, mx)?;
    let dy = tape.sub_scalar(y, my)?;
    let cov = tape.mean(tape.mul(dx, dy)?);
    let vx = tape.variance(x);
    let vy = tape.variance(y);
    let dm = tape.sub(mx, my)?;
    let denom = tape.add(tape.add(vx, vy)?, tape.mul(dm, dm)?)?;
    match tape.scalar_value(denom) {
        d if d == 0.0 => Ok(tape.scalar(1.0)),
        _ if tape.scalar_value(vx) == 0.0 && tape.scalar_value(vy) == 0.0 => Ok(tape.scalar(0.0)),
        _ => tape.div(tape.scale(cov, 2.0), denom),
    }
}

pub fn ccc_loss_var(tape: &Tape, pred_act: Var, act: Var, pred_val: Var, val: Var) -> Result<Var> {
    let ca = ccc_var(tape, pred_act, act)?;
    let cv = ccc_var(tape, pred_val, val)?;
    let s = tape.add(ca, cv)?;
    Ok(tape.shift(tape.neg(s), 2.0))
}

fn check_shapes(op: &'static str, p: &BinnedDistribution, q: &BinnedDistribution) -> Result<()> {
    if p.n() != q.n() {
        return Err(Error::shape(op, format!("{}x{} vs {}x{}", p.n(), p.n(), q.n(), q.n())));
    }
    Ok(())
}

/// Total variation distance `½ Σ |p - q|`.
pub fn tvd(p: &BinnedDistribution, q: &BinnedDistribution) -> Result<f64> {
    check_shapes("tvd", p, q)?;
    Ok(0.5 * p.cells().iter().zip(q.cells()).map(|(a, b)| (a - b).abs()).sum::<f64>())
}

/// Jensen–Shannon divergence (natural log), with `0 · log 0 = 0`.
pub fn jsd(p: &BinnedDistribution, q: &BinnedDistribution) -> Result<f64> {
    check_shapes("jsd", p, q)?;
    let kl_to_mid = |a: f64, m: f64| if a > 0.0 { a * (a / m).ln() } else { 0.0 };
    let total: f64 = p
        .cells()
        .iter()
        .zip(q.cells())
        .map(|(&a, &b)| {
            let m = 0.5 * (a + b);
            0.5 * kl_to_mid(a, m) + 0.5 * kl_to_mid(b, m)
        })
        .sum();
    Ok(total.max(0.0))
}

/// `-Σ target · ln(pred + ε)`.
pub fn cross_entropy(target: &BinnedDistribution, pred: &BinnedDistribution) -> Result<f64> {
    check_shapes("cross_entropy", target, pred)?;
    Ok(-target
        .cells()
        .iter()
        .zip(pred.cells())
        .map(|(t, p)| t * (p + CE_EPSILON).ln())
        .sum::<f64>())
}

/// Differentiable cross-entropy against a predicted distribution on the tape.
/// `pred` may be N×N or any shape with N² elements in row-major order.
pub fn cross_entropy_var(tape: &Tape, target: &BinnedDistribution, pred: Var) -> Result<Var> {
    let (r, c) = tape.shape(pred);
    let n = target.n();
    if r * c != n * n {
        return Err(Error::shape("cross_entropy", format!("{:?} vs {n}x{n} target", (r, c))));
    }
    let pred = tape.reshape(pred, n, n)?;
    let logp = tape.log(tape.shift(pred, CE_EPSILON));
    let t = tape.constant(target.cells().clone());
    Ok(tape.neg(tape.sum(tape.mul(t, logp)?)))
}

/// Consensus (activation, valence) from a 4×4 distribution: each marginal
/// dotted with [`CONSENSUS_WEIGHTS`].
pub fn consensus_from_distribution(d: &BinnedDistribution) -> Result<(f64, f64)> {
    if d.n() != 4 {
        return Err(Error::shape(
            "consensus",
            format!("requires a 4x4 distribution, got {}x{}", d.n(), d.n()),
        ));
    }
    let dot = |m: Vec<f64>| m.iter().zip(CONSENSUS_WEIGHTS).map(|(p, w)| p * w).sum::<f64>();
    Ok((dot(d.activation_marginal()), dot(d.valence_marginal())))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Mean and population standard deviation.
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let (mean, var) = moments(values);
        Some(Self { mean, std: var.sqrt() })
    }
}

impl std::fmt::Display for MeanStd {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.3}±{:.3}", self.mean, self.std)
    }
}
