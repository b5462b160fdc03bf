//! Annotation records, utterances and the in-memory corpus.
//!
//! A [`Corpus`] is immutable once built. Duplicate (utterance, annotator)
//! ratings are merged on construction, before consensus values are computed.

use std::collections::{HashMap, HashSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One annotator's rating of one utterance, already scaled to [-1, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub utterance_id: String,
    pub annotator_id: String,
    pub activation: f64,
    pub valence: f64,
}

impl AnnotationRecord {
    pub fn new(
        utterance_id: impl Into<String>,
        annotator_id: impl Into<String>,
        activation: f64,
        valence: f64,
    ) -> Self {
        Self {
            utterance_id: utterance_id.into(),
            annotator_id: annotator_id.into(),
            activation,
            valence,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Split> {
        match s.trim().to_ascii_lowercase().as_str() {
            "train" => Some(Split::Train),
            "validation" | "valid" | "val" | "dev" => Some(Split::Validation),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub features: Vec<f64>,
    pub annotations: Vec<AnnotationRecord>,
    pub consensus_act: f64,
    pub consensus_val: f64,
    pub split: Split,
}

impl Utterance {
    pub fn activations(&self) -> Vec<f64> {
        self.annotations.iter().map(|a| a.activation).collect()
    }

    pub fn valences(&self) -> Vec<f64> {
        self.annotations.iter().map(|a| a.valence).collect()
    }
}

/// Affine label range used for min-max scaling onto [-1, 1].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabelRange {
    pub min: f64,
    pub max: f64,
}

impl LabelRange {
    pub const UNIT: LabelRange = LabelRange { min: -1.0, max: 1.0 };

    pub fn new(min: f64, max: f64) -> Result<Self> {
        if !(min.is_finite() && max.is_finite()) {
            return Err(Error::data(format!("label range [{min}, {max}] is not finite")));
        }
        if max <= min {
            return Err(Error::data(format!(
                "degenerate label range: max {max} must exceed min {min}"
            )));
        }
        Ok(Self { min, max })
    }

    /// Maps onto [-1, 1]; the unit range is passed through bit-exactly.
    pub fn scale(&self, v: f64) -> f64 {
        if *self == Self::UNIT {
            return v;
        }
        2.0 * (v - self.min) / (self.max - self.min) - 1.0
    }

    pub fn unscale(&self, s: f64) -> f64 {
        if *self == Self::UNIT {
            return s;
        }
        (s + 1.0) * 0.5 * (self.max - self.min) + self.min
    }

    pub fn contains(&self, v: f64) -> bool {
        v >= self.min && v <= self.max
    }
}

/// Linear map sending `observed_min` to -1 and `observed_max` to 1.
pub fn minmax_scale(values: &[f64], observed_min: f64, observed_max: f64) -> Result<Vec<f64>> {
    let range = LabelRange::new(observed_min, observed_max)?;
    Ok(values.iter().map(|&v| range.scale(v)).collect())
}

/// Inverse of [`minmax_scale`].
pub fn minmax_unscale(values: &[f64], observed_min: f64, observed_max: f64) -> Result<Vec<f64>> {
    let range = LabelRange::new(observed_min, observed_max)?;
    Ok(values.iter().map(|&v| range.unscale(v)).collect())
}

/// Collapses repeated (utterance, annotator) ratings into their mean.
///
/// Output order follows the first occurrence of each pair.
pub fn merge_duplicate_annotations(records: &[AnnotationRecord]) -> Result<Vec<AnnotationRecord>> {
    let mut slots: HashMap<(&str, &str), usize> = HashMap::new();
    let mut sums: Vec<(AnnotationRecord, usize)> = Vec::new();
    for (row, r) in records.iter().enumerate() {
        if !r.activation.is_finite() || !r.valence.is_finite() {
            return Err(Error::data(format!(
                "record {row} (utterance {}, annotator {}) has a non-finite rating",
                r.utterance_id, r.annotator_id
            )));
        }
        match slots.get(&(r.utterance_id.as_str(), r.annotator_id.as_str())) {
            Some(&i) => {
                sums[i].0.activation += r.activation;
                sums[i].0.valence += r.valence;
                sums[i].1 += 1;
            }
            None => {
                slots.insert((r.utterance_id.as_str(), r.annotator_id.as_str()), sums.len());
                sums.push((r.clone(), 1));
            }
        }
    }
    Ok(sums
        .into_iter()
        .map(|(mut r, count)| {
            if count > 1 {
                r.activation /= count as f64;
                r.valence /= count as f64;
            }
            r
        })
        .collect())
}

/// Immutable collection of utterances with a contiguous annotator index.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    utterances: Vec<Utterance>,
    annotator_ids: Vec<String>,
    annotator_index: HashMap<String, usize>,
    feature_dim: usize,
}

impl Corpus {
    /// Builds a corpus from raw (scaled) records, per-utterance features and
    /// split tags. Duplicates are merged first; utterances keep the order in
    /// which they first appear in `records`.
    pub fn from_records(
        records: &[AnnotationRecord],
        features: &HashMap<String, Vec<f64>>,
        splits: &HashMap<String, Split>,
    ) -> Result<Self> {
        let merged = merge_duplicate_annotations(records)?;
        let mut order: Vec<String> = Vec::new();
        let mut grouped: HashMap<String, Vec<AnnotationRecord>> = HashMap::new();
        for r in merged {
            if !(-1.0..=1.0).contains(&r.activation) || !(-1.0..=1.0).contains(&r.valence) {
                return Err(Error::data(format!(
                    "utterance {} annotator {}: scaled rating ({}, {}) outside [-1, 1]",
                    r.utterance_id, r.annotator_id, r.activation, r.valence
                )));
            }
            grouped
                .entry(r.utterance_id.clone())
                .or_insert_with(|| {
                    order.push(r.utterance_id.clone());
                    Vec::new()
                })
                .push(r);
        }
        let mut utterances = Vec::with_capacity(order.len());
        for id in order {
            let annotations = grouped.remove(&id).expect("grouped by id");
            let feats = features
                .get(&id)
                .ok_or_else(|| Error::data(format!("missing feature row for utterance {id}")))?;
            let split = splits.get(&id).copied().unwrap_or(Split::Train);
            let n = annotations.len() as f64;
            let consensus_act = annotations.iter().map(|a| a.activation).sum::<f64>() / n;
            let consensus_val = annotations.iter().map(|a| a.valence).sum::<f64>() / n;
            utterances.push(Utterance {
                id,
                features: feats.clone(),
                annotations,
                consensus_act,
                consensus_val,
                split,
            });
        }
        Self::new(utterances)
    }

    /// Validates a prepared list of utterances and derives the annotator index.
    pub fn new(utterances: Vec<Utterance>) -> Result<Self> {
        if utterances.is_empty() {
            return Err(Error::data("corpus has no utterances"));
        }
        let feature_dim = utterances[0].features.len();
        let mut annotator_ids = Vec::new();
        let mut annotator_index = HashMap::new();
        let mut seen_utts = HashSet::new();
        for u in &utterances {
            if !seen_utts.insert(u.id.as_str()) {
                return Err(Error::data(format!("utterance {} listed twice", u.id)));
            }
            if u.annotations.is_empty() {
                return Err(Error::data(format!("utterance {} has no annotations", u.id)));
            }
            if u.features.len() != feature_dim {
                return Err(Error::data(format!(
                    "utterance {} has {} features, expected {feature_dim}",
                    u.id,
                    u.features.len()
                )));
            }
            if u.features.iter().any(|f| !f.is_finite()) {
                return Err(Error::data(format!("utterance {} has non-finite features", u.id)));
            }
            let n = u.annotations.len() as f64;
            let mean_act = u.annotations.iter().map(|a| a.activation).sum::<f64>() / n;
            let mean_val = u.annotations.iter().map(|a| a.valence).sum::<f64>() / n;
            if (mean_act - u.consensus_act).abs() > 1e-12 || (mean_val - u.consensus_val).abs() > 1e-12 {
                return Err(Error::data(format!(
                    "utterance {} consensus does not match its annotations",
                    u.id
                )));
            }
            let mut seen_ann = HashSet::new();
            for a in &u.annotations {
                if a.utterance_id != u.id {
                    return Err(Error::data(format!(
                        "annotation for {} filed under utterance {}",
                        a.utterance_id, u.id
                    )));
                }
                if !seen_ann.insert(a.annotator_id.as_str()) {
                    return Err(Error::data(format!(
                        "annotator {} rated utterance {} twice (merge duplicates first)",
                        a.annotator_id, u.id
                    )));
                }
                if !annotator_index.contains_key(&a.annotator_id) {
                    annotator_index.insert(a.annotator_id.clone(), annotator_ids.len());
                    annotator_ids.push(a.annotator_id.clone());
                }
            }
        }
        Ok(Self {
            utterances,
            annotator_ids,
            annotator_index,
            feature_dim,
        })
    }

    pub fn utterances(&self) -> &[Utterance] {
        &self.utterances
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &Utterance> {
        self.utterances.iter().filter(move |u| u.split == split)
    }

    pub fn get(&self, id: &str) -> Option<&Utterance> {
        self.utterances.iter().find(|u| u.id == id)
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn n_annotators(&self) -> usize {
        self.annotator_ids.len()
    }

    pub fn annotator_ids(&self) -> &[String] {
        &self.annotator_ids
    }

    pub fn annotator_index(&self, id: &str) -> Option<usize> {
        self.annotator_index.get(id).copied()
    }

    /// Checks that every annotator seen in validation or test also rated at
    /// least one training utterance.
    pub fn check_split_coverage(&self) -> Result<()> {
        let train: HashSet<&str> = self
            .split(Split::Train)
            .flat_map(|u| u.annotations.iter().map(|a| a.annotator_id.as_str()))
            .collect();
        for u in self.utterances.iter().filter(|u| u.split != Split::Train) {
            for a in &u.annotations {
                if !train.contains(a.annotator_id.as_str()) {
                    return Err(Error::data(format!(
                        "annotator {} in {} utterance {} never rated a training utterance",
                        a.annotator_id,
                        u.split.as_str(),
                        u.id
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Random train/validation/test assignment honouring annotator coverage.
///
/// Utterances are shuffled with `seed` and cut by `fractions` (train,
/// validation; test takes the rest). Any held-out utterance rated by an
/// annotator with no training utterance is then moved into train.
pub fn assign_splits(
    utterance_annotators: &[(String, Vec<String>)],
    seed: u64,
    fractions: (f64, f64),
) -> Result<Vec<Split>> {
    let (train_frac, val_frac) = fractions;
    if !(train_frac > 0.0 && val_frac >= 0.0 && train_frac + val_frac <= 1.0) {
        return Err(Error::config(format!(
            "invalid split fractions ({train_frac}, {val_frac})"
        )));
    }
    let n = utterance_annotators.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((n as f64) * train_frac).round() as usize;
    let n_val = ((n as f64) * val_frac).round() as usize;
    let mut splits = vec![Split::Test; n];
    for (rank, &i) in order.iter().enumerate() {
        splits[i] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Validation
        } else {
            Split::Test
        };
    }
    let mut train_annotators: HashSet<&str> = HashSet::new();
    for (i, (_, anns)) in utterance_annotators.iter().enumerate() {
        if splits[i] == Split::Train {
            train_annotators.extend(anns.iter().map(String::as_str));
        }
    }
    // The training set only grows, so one ordered pass reaches a fixed point.
    for &i in &order {
        if splits[i] == Split::Train {
            continue;
        }
        let anns = &utterance_annotators[i].1;
        if anns.iter().any(|a| !train_annotators.contains(a.as_str())) {
            splits[i] = Split::Train;
            train_annotators.extend(anns.iter().map(String::as_str));
        }
    }
    Ok(splits)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(u: &str, a: &str, act: f64, val: f64) -> AnnotationRecord {
        AnnotationRecord::new(u, a, act, val)
    }

    #[test]
    fn merge_averages_duplicates() {
        let merged = merge_duplicate_annotations(&[rec("u1", "a1", 0.2, 0.4), rec("u1", "a1", 0.4, 0.0)]).unwrap();
        assert_eq!(merged.len(), 1);
        assert!((merged[0].activation - 0.3).abs() < 1e-15);
        assert!((merged[0].valence - 0.2).abs() < 1e-15);
    }

    #[test]
    fn merge_single_record_is_identity() {
        let r = rec("u1", "a1", 0.25, -0.5);
        assert_eq!(merge_duplicate_annotations(&[r.clone()]).unwrap(), vec![r]);
    }

    #[test]
    fn merge_symmetric_triplet() {
        let merged = merge_duplicate_annotations(&[
            rec("u", "a", -1.0, 0.0),
            rec("u", "a", 0.0, 0.0),
            rec("u", "a", 1.0, 0.0),
        ])
        .unwrap();
        assert_eq!(merged[0].activation, 0.0);
    }

    #[test]
    fn merge_keeps_first_occurrence_order() {
        let merged = merge_duplicate_annotations(&[
            rec("u2", "a1", 0.0, 0.0),
            rec("u1", "a1", 0.0, 0.0),
            rec("u2", "a1", 0.5, 0.5),
            rec("u1", "a2", 0.0, 0.0),
        ])
        .unwrap();
        let ids: Vec<_> = merged
            .iter()
            .map(|r| (r.utterance_id.as_str(), r.annotator_id.as_str()))
            .collect();
        assert_eq!(ids, vec![("u2", "a1"), ("u1", "a1"), ("u1", "a2")]);
    }

    #[test]
    fn merge_rejects_non_finite() {
        let err = merge_duplicate_annotations(&[rec("u9", "a3", f64::NAN, 0.0)]).unwrap_err();
        let msg = err.to_string();
        assert!(err.is_data_validation());
        assert!(msg.contains("u9") && msg.contains("a3"), "{msg}");
    }

    #[test]
    fn minmax_examples() {
        assert_eq!(minmax_scale(&[1.0, 4.0, 7.0], 1.0, 7.0).unwrap(), vec![-1.0, 0.0, 1.0]);
        assert_eq!(minmax_scale(&[3.0], 1.0, 5.0).unwrap(), vec![0.0]);
        assert_eq!(minmax_scale(&[2.0], 0.0, 8.0).unwrap(), vec![-0.5]);
        assert!(minmax_scale(&[2.0], 3.0, 3.0).is_err());
    }

    fn toy_corpus() -> Corpus {
        let records = vec![
            rec("u1", "a1", 0.5, 0.0),
            rec("u1", "a2", -0.5, 1.0),
            rec("u2", "a1", 0.2, 0.2),
        ];
        let features = HashMap::from([("u1".to_string(), vec![1.0, 2.0]), ("u2".to_string(), vec![3.0, 4.0])]);
        Corpus::from_records(&records, &features, &HashMap::new()).unwrap()
    }

    #[test]
    fn corpus_consensus_and_index() {
        let c = toy_corpus();
        assert_eq!(c.utterances().len(), 2);
        let u1 = &c.utterances()[0];
        assert_eq!(u1.consensus_act, 0.0);
        assert_eq!(u1.consensus_val, 0.5);
        assert_eq!(c.annotator_index("a1"), Some(0));
        assert_eq!(c.annotator_index("a2"), Some(1));
        assert_eq!(c.n_annotators(), 2);
        assert_eq!(c.feature_dim(), 2);
    }

    #[test]
    fn corpus_missing_features_is_error() {
        let records = vec![rec("u1", "a1", 0.5, 0.0)];
        let err = Corpus::from_records(&records, &HashMap::new(), &HashMap::new()).unwrap_err();
        assert!(err.to_string().contains("missing feature row"));
    }

    #[test]
    fn split_assignment_covers_held_out_annotators() {
        let mut items = Vec::new();
        for i in 0..200 {
            let anns = vec![format!("a{}", i % 37), format!("b{}", i)];
            items.push((format!("u{i}"), anns));
        }
        let splits = assign_splits(&items, 3, (0.7, 0.15)).unwrap();
        let train: HashSet<&str> = items
            .iter()
            .zip(&splits)
            .filter(|(_, s)| **s == Split::Train)
            .flat_map(|((_, a), _)| a.iter().map(String::as_str))
            .collect();
        for ((_, anns), s) in items.iter().zip(&splits) {
            if *s != Split::Train {
                assert!(anns.iter().all(|a| train.contains(a.as_str())));
            }
        }
        // Every utterance has a unique annotator, so all of them end in train.
        assert!(splits.iter().all(|s| *s == Split::Train));
        assert_eq!(splits, assign_splits(&items, 3, (0.7, 0.15)).unwrap());
    }

    proptest::proptest! {
        #[test]
        fn scale_unscale_round_trip(v in -50.0f64..50.0, lo in -10.0f64..0.0, width in 0.5f64..20.0) {
            let range = LabelRange::new(lo, lo + width).unwrap();
            proptest::prop_assert!((range.unscale(range.scale(v)) - v).abs() < 1e-12);
        }
    }
}
