//! Ground-truth distributions from annotator labels.
//!
//! Each utterance's annotations are upsampled by averaging random annotator
//! subsets and adding uniform noise scaled by the annotation spread. The
//! upsampled points go through [`kde2d`] on a fine grid and are then binned.

use ndarray::Array2;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::corpus::Utterance;
use crate::error::{Error, Result};
use crate::grid::{BinnedDistribution, ProbabilityGrid};
use crate::kde::{bin_grid, kde2d, KdeConfig};

/// How many annotators go into each averaged subset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubsetSize {
    /// Size drawn uniformly from 1..=n.
    Uniform,
    /// Fixed share of the annotators, rounded, at least one.
    Fraction(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UpsampleConfig {
    pub k_subsets: usize,
    pub noise_epsilon: f64,
    pub rng_seed: u64,
    pub subset_size: SubsetSize,
}

impl Default for UpsampleConfig {
    fn default() -> Self {
        Self {
            k_subsets: 100,
            noise_epsilon: 1e-12,
            rng_seed: 0,
            subset_size: SubsetSize::Uniform,
        }
    }
}

impl UpsampleConfig {
    pub fn new(k_subsets: usize, rng_seed: u64) -> Result<Self> {
        let c = Self {
            k_subsets,
            rng_seed,
            ..Self::default()
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.k_subsets == 0 {
            return Err(Error::config("k_subsets must be at least 1"));
        }
        if !(self.noise_epsilon > 0.0) || !self.noise_epsilon.is_finite() {
            return Err(Error::config("noise_epsilon must be positive"));
        }
        if let SubsetSize::Fraction(f) = self.subset_size {
            if !(f > 0.0 && f <= 1.0) {
                return Err(Error::config(format!("subset fraction {f} outside (0, 1]")));
            }
        }
        Ok(())
    }

    /// Same config with the seed replaced by the per-utterance stream seed.
    pub fn for_utterance(&self, utterance_id: &str) -> Self {
        Self {
            rng_seed: utterance_seed(self.rng_seed, utterance_id),
            ..*self
        }
    }
}

/// Seed for an utterance's private RNG stream: FNV-1a of the id mixed with
/// the base seed, so results do not depend on scheduling order.
pub fn utterance_seed(seed: u64, utterance_id: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in utterance_id.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    splitmix(seed ^ h)
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Random draws behind one upsampling pass, separated from the values so the
/// same subsets and noise can be replayed on a tape.
#[derive(Debug, Clone, PartialEq)]
pub struct UpsamplePlan {
    /// k×n subset-averaging matrix; each row sums to one.
    pub weights: Array2<f64>,
    /// Unit noise in (-1, 1) per output, activation then valence.
    pub unit_noise_act: Vec<f64>,
    pub unit_noise_val: Vec<f64>,
    pub noise_epsilon: f64,
}

impl UpsamplePlan {
    pub fn draw<R: Rng + ?Sized>(n: usize, config: &UpsampleConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        if n == 0 {
            return Err(Error::data("upsampling needs at least one annotation"));
        }
        let k = config.k_subsets;
        let mut weights = Array2::zeros((k, n));
        let mut unit_noise_act = Vec::with_capacity(k);
        let mut unit_noise_val = Vec::with_capacity(k);
        for r in 0..k {
            let m = match config.subset_size {
                SubsetSize::Uniform => rng.random_range(1..=n),
                SubsetSize::Fraction(f) => ((f * n as f64).round() as usize).clamp(1, n),
            };
            for j in sample(rng, n, m) {
                weights[(r, j)] = 1.0 / m as f64;
            }
            unit_noise_act.push(rng.random_range(-1.0..1.0));
            unit_noise_val.push(rng.random_range(-1.0..1.0));
        }
        Ok(Self {
            weights,
            unit_noise_act,
            unit_noise_val,
            noise_epsilon: config.noise_epsilon,
        })
    }

    pub fn k(&self) -> usize {
        self.weights.nrows()
    }

    pub fn n(&self) -> usize {
        self.weights.ncols()
    }

    fn apply_dim(&self, x: &[f64], unit: &[f64]) -> Vec<f64> {
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let s = (x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
        let half = 0.5 * (s + self.noise_epsilon);
        self.weights
            .rows()
            .into_iter()
            .zip(unit)
            .map(|(w, u)| {
                let m: f64 = w.iter().zip(x).map(|(a, b)| a * b).sum();
                (m + u * half).clamp(-1.0, 1.0)
            })
            .collect()
    }

    pub fn apply(&self, act: &[f64], val: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        if act.len() != self.n() || val.len() != self.n() {
            return Err(Error::shape(
                "upsample",
                format!("plan for {} annotations, got {} and {}", self.n(), act.len(), val.len()),
            ));
        }
        Ok((
            self.apply_dim(act, &self.unit_noise_act),
            self.apply_dim(val, &self.unit_noise_val),
        ))
    }

    fn apply_dim_var(&self, tape: &Tape, x: Var, unit: &[f64]) -> Result<Var> {
        let mean = tape.matmul(tape.constant(self.weights.clone()), x)?;
        let s = tape.sqrt(tape.variance(x));
        let half = tape.scale(tape.shift(s, self.noise_epsilon), 0.5);
        let noise = tape.mul_scalar(tape.column(unit), half)?;
        Ok(tape.clamp(tape.add(mean, noise)?, -1.0, 1.0))
    }

    /// Tape version for n×1 columns. The noise draw is a constant; gradients
    /// flow through the subset means and the standard deviation.
    pub fn apply_var(&self, tape: &Tape, act: Var, val: Var) -> Result<(Var, Var)> {
        for v in [act, val] {
            if tape.shape(v) != (self.n(), 1) {
                return Err(Error::shape(
                    "upsample",
                    format!("expected {}x1 column, got {:?}", self.n(), tape.shape(v)),
                ));
            }
        }
        Ok((
            self.apply_dim_var(tape, act, &self.unit_noise_act)?,
            self.apply_dim_var(tape, val, &self.unit_noise_val)?,
        ))
    }
}

/// Upsamples `(activation, valence)` annotations to `k_subsets` points.
pub fn upsample(annotations: &[(f64, f64)], config: &UpsampleConfig) -> Result<Vec<(f64, f64)>> {
    if annotations.is_empty() {
        return Err(Error::data("upsampling needs at least one annotation"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
    let plan = UpsamplePlan::draw(annotations.len(), config, &mut rng)?;
    let act: Vec<f64> = annotations.iter().map(|a| a.0).collect();
    let val: Vec<f64> = annotations.iter().map(|a| a.1).collect();
    let (a, v) = plan.apply(&act, &val)?;
    Ok(a.into_iter().zip(v).collect())
}

/// Target distribution for one utterance: upsample, KDE, bin.
pub fn make_target(
    utterance: &Utterance,
    up: &UpsampleConfig,
    kde: &KdeConfig,
    n_bins: usize,
) -> Result<(ProbabilityGrid, BinnedDistribution)> {
    if utterance.annotations.is_empty() {
        return Err(Error::data(format!("utterance '{}' has no annotations", utterance.id)));
    }
    let pairs: Vec<(f64, f64)> = utterance
        .annotations
        .iter()
        .map(|a| (a.activation, a.valence))
        .collect();
    let points = upsample(&pairs, &up.for_utterance(&utterance.id))?;
    let act: Vec<f64> = points.iter().map(|p| p.0).collect();
    let val: Vec<f64> = points.iter().map(|p| p.1).collect();
    let out = kde2d(&act, &val, kde)?;
    let binned = bin_grid(&out.grid, n_bins)?;
    Ok((out.grid, binned))
}

/// One row of the target cache.
#[derive(Debug, Clone, PartialEq)]
pub struct Target {
    pub utterance_id: String,
    pub seed: u64,
    pub distribution: BinnedDistribution,
}

/// Binned targets for many utterances, computed in parallel. Output order
/// follows the input.
pub fn make_targets<'a, I>(utterances: I, up: &UpsampleConfig, kde: &KdeConfig, n_bins: usize) -> Result<Vec<Target>>
where
    I: IntoIterator<Item = &'a Utterance>,
{
    let list: Vec<&Utterance> = utterances.into_iter().collect();
    list.par_iter()
        .map(|u| {
            let (_, binned) = make_target(u, up, kde, n_bins)?;
            Ok(Target {
                utterance_id: u.id.clone(),
                seed: up.rng_seed,
                distribution: binned,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{AnnotationRecord, Split};
    use crate::metrics::tvd;
    use proptest::prelude::*;

    fn utterance(id: &str, labels: &[(f64, f64)]) -> Utterance {
        let annotations: Vec<AnnotationRecord> = labels
            .iter()
            .enumerate()
            .map(|(i, &(a, v))| AnnotationRecord::new(id, format!("a{i}"), a, v))
            .collect();
        let n = labels.len() as f64;
        Utterance {
            id: id.to_string(),
            features: vec![0.0],
            consensus_act: labels.iter().map(|l| l.0).sum::<f64>() / n,
            consensus_val: labels.iter().map(|l| l.1).sum::<f64>() / n,
            annotations,
            split: Split::Train,
        }
    }

    fn rotate(d: &BinnedDistribution) -> BinnedDistribution {
        let n = d.n();
        BinnedDistribution::new(Array2::from_shape_fn((n, n), |(i, j)| {
            d.cells()[(n - 1 - i, n - 1 - j)]
        }))
        .unwrap()
    }

    #[test]
    fn equal_annotations_have_no_spread() {
        let cfg = UpsampleConfig::new(500, 3).unwrap();
        let out = upsample(&[(0.25, -0.4); 6], &cfg).unwrap();
        assert_eq!(out.len(), 500);
        for (a, v) in out {
            assert!((a - 0.25).abs() <= 1e-12);
            assert!((v + 0.4).abs() <= 1e-12);
        }
    }

    #[test]
    fn single_annotation_is_repeated() {
        let out = upsample(&[(-0.7, 0.9)], &UpsampleConfig::new(50, 1).unwrap()).unwrap();
        assert!(out
            .iter()
            .all(|&(a, v)| (a + 0.7).abs() <= 1e-12 && (v - 0.9).abs() <= 1e-12));
    }

    #[test]
    fn empty_annotations_rejected() {
        assert!(upsample(&[], &UpsampleConfig::default()).is_err());
        assert!(UpsampleConfig::new(0, 1).is_err());
    }

    #[test]
    fn upsampled_mean_is_unbiased() {
        let acts = [0.1, -0.3, 0.4, 0.2, -0.1];
        let pairs: Vec<(f64, f64)> = acts.iter().map(|&a| (a, 0.0)).collect();
        let out = upsample(&pairs, &UpsampleConfig::new(100_000, 17).unwrap()).unwrap();
        let xs: Vec<f64> = out.iter().map(|p| p.0).collect();
        let n = xs.len() as f64;
        let m = xs.iter().sum::<f64>() / n;
        let sd = (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0)).sqrt();
        let target = acts.iter().sum::<f64>() / 5.0;
        assert!((m - target).abs() < 3.0 * sd / n.sqrt(), "{m} vs {target}");
    }

    #[test]
    fn subset_rows_are_averages() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let plan = UpsamplePlan::draw(7, &UpsampleConfig::new(40, 0).unwrap(), &mut rng).unwrap();
        for row in plan.weights.rows() {
            let nz: Vec<f64> = row.iter().copied().filter(|&w| w > 0.0).collect();
            assert!(!nz.is_empty());
            assert!(nz.iter().all(|&w| w == 1.0 / nz.len() as f64));
        }
        assert!(plan.unit_noise_act.iter().all(|u| (-1.0..1.0).contains(u)));
    }

    #[test]
    fn fraction_subsets_have_fixed_size() {
        let cfg = UpsampleConfig {
            subset_size: SubsetSize::Fraction(0.5),
            ..UpsampleConfig::new(10, 0).unwrap()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let plan = UpsamplePlan::draw(6, &cfg, &mut rng).unwrap();
        assert!(plan
            .weights
            .rows()
            .into_iter()
            .all(|r| r.iter().filter(|&&w| w > 0.0).count() == 3));
    }

    #[test]
    fn tape_replay_matches_plain_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let plan = UpsamplePlan::draw(4, &UpsampleConfig::new(30, 0).unwrap(), &mut rng).unwrap();
        let act = [0.9, 0.95, -0.2, 0.6];
        let val = [-0.1, 0.3, 0.2, -0.8];
        let (pa, pv) = plan.apply(&act, &val).unwrap();
        let tape = Tape::new();
        let (ta, tv) = plan.apply_var(&tape, tape.column(&act), tape.column(&val)).unwrap();
        for (x, y) in tape.value(ta).iter().zip(&pa).chain(tape.value(tv).iter().zip(&pv)) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn corner_cluster_peaks_in_corner_bin() {
        let u = utterance("c", &[(0.95, 0.9), (0.9, 0.97), (1.0, 0.92), (0.93, 1.0)]);
        let (grid, binned) = make_target(&u, &UpsampleConfig::new(100, 5).unwrap(), &KdeConfig::targets(), 4).unwrap();
        assert_eq!(grid.size(), 512);
        let (idx, _) = binned
            .to_flat()
            .into_iter()
            .enumerate()
            .fold((0, f64::MIN), |b, (i, p)| if p > b.1 { (i, p) } else { b });
        assert_eq!(idx, 15);
    }

    #[test]
    fn symmetric_annotations_give_symmetric_target() {
        let u = utterance("s", &[(0.5, 0.3), (-0.5, -0.3), (0.2, -0.6), (-0.2, 0.6)]);
        let kde = KdeConfig::targets();
        let mut acc = Array2::<f64>::zeros((4, 4));
        let seeds = 10;
        for s in 0..seeds {
            let (_, b) = make_target(&u, &UpsampleConfig::new(100, s).unwrap(), &kde, 4).unwrap();
            acc = acc + b.cells();
        }
        let mean = BinnedDistribution::from_unnormalized(acc).unwrap();
        let d = tvd(&mean, &rotate(&mean)).unwrap();
        assert!(d < 0.02, "{d}");
    }

    #[test]
    fn seeds_agree_with_many_subsets() {
        let u = utterance("m", &[(0.1, 0.2), (-0.4, 0.5), (0.6, -0.1), (0.3, 0.3), (-0.2, -0.6)]);
        let kde = KdeConfig::targets();
        let (_, a) = make_target(&u, &UpsampleConfig::new(1000, 1).unwrap(), &kde, 4).unwrap();
        let (_, b) = make_target(&u, &UpsampleConfig::new(1000, 2).unwrap(), &kde, 4).unwrap();
        assert!(tvd(&a, &b).unwrap() < 0.05);
    }

    #[test]
    fn targets_are_reproducible_and_order_independent() {
        let us = vec![
            utterance("x", &[(0.1, 0.2), (-0.3, 0.4)]),
            utterance("y", &[(0.5, -0.5), (0.6, -0.4), (0.2, 0.0)]),
        ];
        let up = UpsampleConfig::new(60, 42).unwrap();
        let kde = KdeConfig::targets();
        let fwd = make_targets(&us, &up, &kde, 4).unwrap();
        let again = make_targets(&us, &up, &kde, 4).unwrap();
        let rev = make_targets(us.iter().rev(), &up, &kde, 4).unwrap();
        assert_eq!(fwd, again);
        assert_eq!(fwd[0], rev[1]);
        assert_eq!(fwd[1], rev[0]);
        let bits = |t: &Target| t.distribution.to_flat().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&fwd[0]), bits(&again[0]));
    }

    #[test]
    fn utterance_streams_differ() {
        assert_ne!(utterance_seed(1, "a"), utterance_seed(1, "b"));
        assert_ne!(utterance_seed(1, "a"), utterance_seed(2, "a"));
        assert_eq!(utterance_seed(7, "abc"), utterance_seed(7, "abc"));
    }

    proptest! {
        #[test]
        fn upsampled_values_stay_in_range(
            labels in proptest::collection::vec((-1.0f64..=1.0, -1.0f64..=1.0), 1..12),
            seed in any::<u64>(),
        ) {
            let out = upsample(&labels, &UpsampleConfig::new(64, seed).unwrap()).unwrap();
            prop_assert!(out.iter().all(|&(a, v)| (-1.0..=1.0).contains(&a) && (-1.0..=1.0).contains(&v)));
        }

        #[test]
        fn targets_are_valid_distributions(
            labels in proptest::collection::vec((-1.0f64..=1.0, -1.0f64..=1.0), 1..6),
            seed in any::<u64>(),
        ) {
            let u = utterance("p", &labels);
            let kde = KdeConfig::new(64, crate::kde::BandwidthMode::Automatic).unwrap();
            let (_, b) = make_target(&u, &UpsampleConfig::new(40, seed).unwrap(), &kde, 4).unwrap();
            prop_assert!(b.cells().iter().all(|&p| p >= 0.0));
            prop_assert!((b.cells().sum() - 1.0).abs() < 1e-8);
        }
    }
}
