//! Training loops and evaluation.
//!
//! Task 1 fits annotator predictions with the CCC loss pooled over every
//! (utterance, annotator) pair in a batch. Task 2 turns the same predictions
//! into a distribution (clamp, upsample, DiffKDE, bin) and fits it to the
//! target with cross-entropy. The baseline task fits softmax logits to the
//! target directly. Task 1+2 alternates the two tasks batch by batch.

mod eval;
mod schedule;

use std::collections::HashMap;
use std::fmt;
use std::ops::Range;
use std::path::Path;
use std::str::FromStr;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::corpus::{Corpus, Split, Utterance};
use crate::error::{Error, Result};
use crate::grid::BinnedDistribution;
use crate::io::write_atomic;
use crate::kde::{bin_grid, bin_grid_var, diffkde, diffkde_values, KdeConfig};
use crate::labels::{UpsampleConfig, UpsamplePlan};
use crate::metrics::{ccc_loss, ccc_loss_var, cross_entropy, cross_entropy_var};
use crate::model::{
    batch_features, forward_baseline, forward_multitask, forward_onehot, Bound, ModelKind, ModelSpec, Parameters,
};
use crate::softhist::SoftHistConfig;

pub use eval::{
    annotator_predictions, evaluate, evaluate_distributions, predict_distributions, AnnotatorPrediction, EvalConfig,
    EvalMode, EvalOutput, EvalReport, MetricSummary, ReferenceMetrics, SeedMetrics,
};
pub use schedule::{Schedule, Step};

/// Targets keyed by utterance id.
pub type TargetMap = HashMap<String, BinnedDistribution>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TaskMode {
    #[serde(rename = "baseline")]
    Baseline,
    #[serde(rename = "1")]
    Task1,
    #[serde(rename = "1+2")]
    Task12,
}

impl TaskMode {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskMode::Baseline => "baseline",
            TaskMode::Task1 => "1",
            TaskMode::Task12 => "1+2",
        }
    }
}

impl fmt::Display for TaskMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(TaskMode::Baseline),
            "1" | "task1" => Ok(TaskMode::Task1),
            "1+2" | "task12" | "task1+2" => Ok(TaskMode::Task12),
            _ => Err(Error::config(format!("unknown task '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub lr_decay_factor: f64,
    pub lr_patience: usize,
    pub early_stop_patience: usize,
    pub min_epochs: usize,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub seeds: Vec<u64>,
    pub task_mode: TaskMode,
    pub upsample_train_k: usize,
    pub hidden: usize,
    pub dropout_p: f64,
    pub n_bins: usize,
    pub hist: SoftHistConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.001,
            lr_decay_factor: 0.1,
            lr_patience: 5,
            early_stop_patience: 10,
            min_epochs: 30,
            max_epochs: 100,
            batch_size: 32,
            seeds: (0..5).collect(),
            task_mode: TaskMode::Task12,
            upsample_train_k: 20,
            hidden: 256,
            dropout_p: 0.2,
            n_bins: 4,
            hist: SoftHistConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            self.lr_patience,
            self.early_stop_patience,
            self.max_epochs,
            self.batch_size,
            self.upsample_train_k,
            self.hidden,
            self.n_bins,
        ];
        if counts.contains(&0) {
            return Err(Error::config("training counts must be positive"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!(
                "learning rate {} must be finite and non-negative",
                self.lr
            )));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor <= 1.0) {
            return Err(Error::config("lr_decay_factor must lie in (0, 1]"));
        }
        if self.min_epochs > self.max_epochs {
            return Err(Error::config("min_epochs exceeds max_epochs"));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("at least one seed is required"));
        }
        if self.hist.bins % self.n_bins != 0 {
            return Err(Error::config("soft histogram bins must be a multiple of n_bins"));
        }
        KdeConfig::new(self.hist.bins, crate::kde::BandwidthMode::Automatic)?;
        Ok(())
    }

    /// Model kinds the task can train.
    fn check_kind(&self, kind: ModelKind) -> Result<()> {
        let ok = match self.task_mode {
            TaskMode::Baseline => kind == ModelKind::Baseline,
            TaskMode::Task1 | TaskMode::Task12 => kind != ModelKind::Baseline,
        };
        if !ok {
            return Err(Error::config(format!(
                "task {} cannot train a {} model",
                self.task_mode, kind
            )));
        }
        Ok(())
    }

    fn kde(&self) -> KdeConfig {
        KdeConfig {
            grid_size: self.hist.bins,
            bandwidth: crate::kde::BandwidthMode::Automatic,
        }
    }
}

/// One line of the training history. The baseline's cross-entropy is
/// reported in the Task 2 columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_task1: Option<f64>,
    pub train_task2: Option<f64>,
    pub val_task1: Option<f64>,
    pub val_task2: Option<f64>,
    pub val_total: f64,
    /// Learning rate used during the epoch.
    pub lr: f64,
    pub task1_steps: usize,
    pub task2_steps: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

impl History {
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut out = String::from("epoch,train_task1,train_task2,val_task1,val_task2,val_total,lr\n");
        for r in &self.epochs {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.epoch,
                opt(r.train_task1),
                opt(r.train_task2),
                opt(r.val_task1),
                opt(r.val_task2),
                r.val_total,
                r.lr
            ));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_csv().as_bytes())
    }
}

#[derive(Debug, Clone)]
pub struct TrainResult {
    /// Parameters from the epoch with the lowest validation loss.
    pub params: Parameters,
    /// Parameters after the last epoch.
    pub last: Parameters,
    pub history: History,
}

/// Which annotator heads feed the distribution of each utterance.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Heads {
    Labeling,
    All,
}

/// Annotator-head predictions for a batch, flattened to P×1 columns.
pub(crate) struct PairOutputs {
    pub act: Var,
    pub val: Var,
    /// Rows belonging to each utterance.
    pub ranges: Vec<Range<usize>>,
}

/// Model head index for every annotator rating (or, with [`Heads::All`],
/// every head) of each utterance.
pub(crate) fn head_indices(params: &Parameters, utts: &[&Utterance], heads: Heads) -> Result<Vec<Vec<usize>>> {
    let a = params.spec.n_annotators;
    match heads {
        Heads::All => Ok(vec![(0..a).collect(); utts.len()]),
        Heads::Labeling => {
            let index: HashMap<&str, usize> = params
                .annotator_ids
                .iter()
                .enumerate()
                .map(|(i, id)| (id.as_str(), i))
                .collect();
            utts.iter()
                .map(|u| {
                    u.annotations
                        .iter()
                        .map(|r| {
                            index.get(r.annotator_id.as_str()).copied().ok_or_else(|| {
                                Error::data(format!(
                                    "annotator {} of utterance {} is unknown to the model",
                                    r.annotator_id, u.id
                                ))
                            })
                        })
                        .collect()
                })
                .collect()
        }
    }
}

fn features_of(utts: &[&Utterance], dim: usize) -> Result<Array2<f64>> {
    batch_features(utts.iter().map(|u| u.features.as_slice()), dim)
}

pub(crate) fn pair_outputs(
    tape: &Tape,
    params: &Parameters,
    bound: &Bound,
    features: &Array2<f64>,
    heads: &[Vec<usize>],
    dropout_rng: Option<&mut dyn RngCore>,
) -> Result<PairOutputs> {
    let mut ranges = Vec::with_capacity(heads.len());
    let mut start = 0;
    for h in heads {
        ranges.push(start..start + h.len());
        start += h.len();
    }
    match params.spec.kind {
        ModelKind::Multitask => {
            let mut subset: Vec<usize> = heads.iter().flatten().copied().collect();
            subset.sort_unstable();
            subset.dedup();
            let col: HashMap<usize, usize> = subset.iter().enumerate().map(|(c, &a)| (a, c)).collect();
            let (act, val) = forward_multitask(tape, params, bound, features, &subset, dropout_rng)?;
            let entries: Vec<(usize, usize)> = heads
                .iter()
                .enumerate()
                .flat_map(|(r, h)| h.iter().map(move |a| (r, a)))
                .map(|(r, a)| (r, col[a]))
                .collect();
            Ok(PairOutputs {
                act: tape.gather(act, &entries)?,
                val: tape.gather(val, &entries)?,
                ranges,
            })
        }
        ModelKind::OneHot => {
            let d = features.ncols();
            let mut rows = Array2::zeros((start, d));
            let mut annotators = Vec::with_capacity(start);
            for (r, h) in heads.iter().enumerate() {
                for &a in h {
                    rows.row_mut(annotators.len()).assign(&features.row(r));
                    annotators.push(a);
                }
            }
            let (act, val) = forward_onehot(tape, params, bound, &rows, &annotators, dropout_rng)?;
            Ok(PairOutputs { act, val, ranges })
        }
        ModelKind::Baseline => Err(Error::config("baseline models have no annotator heads")),
    }
}

fn labels_of(utts: &[&Utterance]) -> (Vec<f64>, Vec<f64>) {
    utts.iter()
        .flat_map(|u| u.annotations.iter().map(|r| (r.activation, r.valence)))
        .unzip()
}

/// Pooled CCC loss for a batch, `None` when fewer than two pairs exist.
pub(crate) fn task1_loss(
    tape: &Tape,
    params: &Parameters,
    bound: &Bound,
    utts: &[&Utterance],
    dropout_rng: Option<&mut dyn RngCore>,
) -> Result<Option<Var>> {
    let heads = head_indices(params, utts, Heads::Labeling)?;
    let (la, lv) = labels_of(utts);
    if la.len() < 2 {
        return Ok(None);
    }
    let features = features_of(utts, params.spec.input_dim)?;
    let out = pair_outputs(tape, params, bound, &features, &heads, dropout_rng)?;
    let loss = ccc_loss_var(tape, out.act, tape.column(&la), out.val, tape.column(&lv))?;
    Ok(Some(loss))
}

/// Random draws used by one Task 2 loss, kept so the loss can be replayed
/// with identical noise and bandwidths.
#[derive(Debug, Clone)]
pub struct Task2Draw {
    pub plan: UpsamplePlan,
    pub kde: KdeConfig,
}

pub(crate) enum Draws<'a> {
    Fresh { rng: &'a mut ChaCha8Rng, k: usize },
    Frozen(&'a [Task2Draw]),
}

/// Mean cross-entropy between each utterance's predicted distribution and
/// its target.
pub(crate) fn task2_loss(
    tape: &Tape,
    out: &PairOutputs,
    targets: &[&BinnedDistribution],
    hist: &SoftHistConfig,
    kde: &KdeConfig,
    n_bins: usize,
    mut draws: Draws<'_>,
) -> Result<(Var, Vec<Task2Draw>)> {
    let mut used = Vec::with_capacity(targets.len());
    let mut total: Option<Var> = None;
    for (i, (range, target)) in out.ranges.iter().zip(targets).enumerate() {
        let rows: Vec<(usize, usize)> = range.clone().map(|r| (r, 0)).collect();
        let a = tape.clamp(tape.gather(out.act, &rows)?, -1.0, 1.0);
        let v = tape.clamp(tape.gather(out.val, &rows)?, -1.0, 1.0);
        let (plan, kde_cfg) = match &mut draws {
            Draws::Fresh { rng, k } => {
                let up = UpsampleConfig {
                    k_subsets: *k,
                    ..UpsampleConfig::default()
                };
                (UpsamplePlan::draw(rows.len(), &up, &mut **rng)?, *kde)
            }
            Draws::Frozen(d) => (d[i].plan.clone(), d[i].kde),
        };
        let (ua, uv) = plan.apply_var(tape, a, v)?;
        let dk = diffkde(tape, ua, uv, hist, &kde_cfg)?;
        let binned = bin_grid_var(tape, dk.grid, n_bins)?;
        let ce = cross_entropy_var(tape, target, binned)?;
        total = Some(match total {
            Some(t) => tape.add(t, ce)?,
            None => ce,
        });
        used.push(Task2Draw {
            plan,
            kde: kde_cfg.with_fixed(dk.bandwidth_act.t, dk.bandwidth_val.t),
        });
    }
    let total = total.ok_or_else(|| Error::data("Task 2 batch is empty"))?;
    Ok((tape.scale(total, 1.0 / targets.len() as f64), used))
}

/// Mean baseline cross-entropy of softmax logits against targets.
pub(crate) fn baseline_loss(
    tape: &Tape,
    params: &Parameters,
    bound: &Bound,
    utts: &[&Utterance],
    targets: &[&BinnedDistribution],
    dropout_rng: Option<&mut dyn RngCore>,
) -> Result<Var> {
    let features = features_of(utts, params.spec.input_dim)?;
    let logits = forward_baseline(tape, params, bound, &features, dropout_rng)?;
    let probs = tape.softmax_rows(logits);
    let nn = params.spec.n_bins * params.spec.n_bins;
    let mut t = Array2::zeros((utts.len(), nn));
    for (r, d) in targets.iter().enumerate() {
        if d.n() != params.spec.n_bins {
            return Err(Error::shape(
                "baseline_loss",
                format!("{}x{} target for a {nn}-logit model", d.n(), d.n()),
            ));
        }
        for (c, p) in d.to_flat().into_iter().enumerate() {
            t[(r, c)] = p;
        }
    }
    let logp = tape.log(tape.shift(probs, crate::metrics::CE_EPSILON));
    let ce = tape.neg(tape.sum(tape.mul(tape.constant(t), logp)?));
    Ok(tape.scale(ce, 1.0 / utts.len() as f64))
}

fn lookup_targets<'a>(targets: &'a TargetMap, utts: &[&Utterance]) -> Result<Vec<&'a BinnedDistribution>> {
    utts.iter()
        .map(|u| {
            targets
                .get(&u.id)
                .ok_or_else(|| Error::data(format!("no target for utterance {}", u.id)))
        })
        .collect()
}

/// Plain annotator predictions in evaluation mode, per utterance.
pub(crate) fn predict_heads(
    params: &Parameters,
    utts: &[&Utterance],
    heads: &[Vec<usize>],
) -> Result<Vec<Vec<(f64, f64)>>> {
    let mut out = Vec::with_capacity(utts.len());
    for (chunk, chunk_heads) in utts.chunks(256).zip(heads.chunks(256)) {
        let tape = Tape::new();
        let bound = params.bind(&tape);
        let features = features_of(chunk, params.spec.input_dim)?;
        let po = pair_outputs(&tape, params, &bound, &features, chunk_heads, None)?;
        let (a, v) = (tape.value(po.act), tape.value(po.val));
        for r in po.ranges {
            out.push(r.map(|j| (a[(j, 0)], v[(j, 0)])).collect());
        }
    }
    Ok(out)
}

/// Baseline predicted distributions in evaluation mode.
pub(crate) fn predict_baseline(params: &Parameters, utts: &[&Utterance]) -> Result<Vec<BinnedDistribution>> {
    let n = params.spec.n_bins;
    let mut out = Vec::with_capacity(utts.len());
    for chunk in utts.chunks(256) {
        let tape = Tape::new();
        let bound = params.bind(&tape);
        let features = features_of(chunk, params.spec.input_dim)?;
        let probs = tape.value(tape.softmax_rows(forward_baseline(&tape, params, &bound, &features, None)?));
        for row in probs.rows() {
            out.push(BinnedDistribution::from_flat(n, &row.to_vec())?);
        }
    }
    Ok(out)
}

/// Distribution from annotator predictions: clamp, upsample, DiffKDE, bin.
pub(crate) fn distribution_from_predictions(
    preds: &[(f64, f64)],
    up: &UpsampleConfig,
    hist: &SoftHistConfig,
    kde: &KdeConfig,
    n_bins: usize,
    diff: bool,
) -> Result<BinnedDistribution> {
    let mut rng = ChaCha8Rng::seed_from_u64(up.rng_seed);
    let plan = UpsamplePlan::draw(preds.len(), up, &mut rng)?;
    let act: Vec<f64> = preds.iter().map(|p| p.0.clamp(-1.0, 1.0)).collect();
    let val: Vec<f64> = preds.iter().map(|p| p.1.clamp(-1.0, 1.0)).collect();
    let (ua, uv) = plan.apply(&act, &val)?;
    let grid = if diff {
        diffkde_values(&ua, &uv, hist, kde)?.grid
    } else {
        crate::kde::kde2d(&ua, &uv, kde)?.grid
    };
    bin_grid(&grid, n_bins)
}

struct ValidationLosses {
    task1: Option<f64>,
    task2: Option<f64>,
    total: f64,
}

fn validate(
    params: &Parameters,
    val: &[&Utterance],
    targets: Option<&TargetMap>,
    config: &TrainConfig,
    seed: u64,
) -> Result<ValidationLosses> {
    match config.task_mode {
        TaskMode::Baseline => {
            let targets = targets.ok_or_else(|| Error::config("baseline task needs targets"))?;
            let preds = predict_baseline(params, val)?;
            let tgts = lookup_targets(targets, val)?;
            let mut total = 0.0;
            for (p, t) in preds.iter().zip(&tgts) {
                total += cross_entropy(t, p)?;
            }
            let ce = total / val.len() as f64;
            Ok(ValidationLosses {
                task1: None,
                task2: Some(ce),
                total: ce,
            })
        }
        TaskMode::Task1 | TaskMode::Task12 => {
            let heads = head_indices(params, val, Heads::Labeling)?;
            let preds = predict_heads(params, val, &heads)?;
            let (la, lv) = labels_of(val);
            let (pa, pv): (Vec<f64>, Vec<f64>) = preds.iter().flatten().copied().unzip();
            let t1 = ccc_loss(&pa, &la, &pv, &lv)?;
            if config.task_mode == TaskMode::Task1 {
                return Ok(ValidationLosses {
                    task1: Some(t1),
                    task2: None,
                    total: t1,
                });
            }
            let targets = targets.ok_or_else(|| Error::config("Task 2 needs targets"))?;
            let tgts = lookup_targets(targets, val)?;
            let base = UpsampleConfig {
                k_subsets: config.upsample_train_k,
                rng_seed: seed,
                ..UpsampleConfig::default()
            };
            let kde = config.kde();
            let mut total = 0.0;
            for ((u, p), t) in val.iter().zip(&preds).zip(&tgts) {
                let d = distribution_from_predictions(
                    p,
                    &base.for_utterance(&u.id),
                    &config.hist,
                    &kde,
                    config.n_bins,
                    true,
                )?;
                total += cross_entropy(t, &d)?;
            }
            let t2 = total / val.len() as f64;
            Ok(ValidationLosses {
                task1: Some(t1),
                task2: Some(t2),
                total: t1 + t2,
            })
        }
    }
}

/// Independent RNG streams of one training run.
struct Streams {
    shuffle: ChaCha8Rng,
    dropout: ChaCha8Rng,
    upsample: ChaCha8Rng,
}

impl Streams {
    fn new(seed: u64) -> Self {
        let stream = |s: u64| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(s);
            r
        };
        Self {
            shuffle: stream(1),
            dropout: stream(2),
            upsample: stream(3),
        }
    }
}

/// Which task each of an epoch's `n_batches` batches runs.
pub fn batch_tasks(mode: TaskMode, n_batches: usize) -> Vec<u8> {
    (0..n_batches)
        .map(|b| match mode {
            TaskMode::Baseline => 0,
            TaskMode::Task1 => 1,
            TaskMode::Task12 => {
                if b % 2 == 0 {
                    1
                } else {
                    2
                }
            }
        })
        .collect()
}

/// Trains one model with one seed. The model spec is derived from `kind`,
/// the corpus and the config.
pub fn train(
    corpus: &Corpus,
    targets: Option<&TargetMap>,
    kind: ModelKind,
    config: &TrainConfig,
    seed: u64,
) -> Result<TrainResult> {
    config.validate()?;
    config.check_kind(kind)?;
    let train_utts: Vec<&Utterance> = corpus.split(Split::Train).collect();
    let val_utts: Vec<&Utterance> = corpus.split(Split::Validation).collect();
    if train_utts.is_empty() || val_utts.is_empty() {
        return Err(Error::data("training needs non-empty train and validation splits"));
    }
    let needs_targets = config.task_mode != TaskMode::Task1;
    if needs_targets {
        let targets = targets.ok_or_else(|| Error::config(format!("task {} needs targets", config.task_mode)))?;
        lookup_targets(targets, &train_utts)?;
        lookup_targets(targets, &val_utts)?;
    }
    corpus.check_split_coverage()?;

    let mut spec = ModelSpec::new(kind, corpus.feature_dim(), corpus.n_annotators()).with_hidden(config.hidden);
    spec.dropout_p = config.dropout_p;
    spec.n_bins = config.n_bins;
    let ids = if kind == ModelKind::Baseline {
        vec![]
    } else {
        corpus.annotator_ids().to_vec()
    };
    if kind == ModelKind::Baseline {
        spec.n_annotators = 0;
    }
    let mut params = Parameters::init(spec, ids, seed)?;
    let mut best = params.clone();
    let mut streams = Streams::new(seed);
    let mut schedule = Schedule::new(
        config.lr,
        config.lr_decay_factor,
        config.lr_patience,
        config.early_stop_patience,
        config.min_epochs,
    );
    let mut history = History::default();
    let kde = config.kde();
    let mut order = train_utts.clone();

    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut streams.shuffle);
        let batches: Vec<&[&Utterance]> = order.chunks(config.batch_size).collect();
        let tasks = batch_tasks(config.task_mode, batches.len());
        let lr = schedule.lr;
        let (mut sum1, mut n1, mut sum2, mut n2) = (0.0, 0usize, 0.0, 0usize);
        for (batch, &task) in batches.iter().zip(&tasks) {
            let tape = Tape::new();
            let bound = params.bind(&tape);
            let loss = match task {
                1 => match task1_loss(&tape, &params, &bound, batch, Some(&mut streams.dropout))? {
                    Some(l) => l,
                    None => {
                        log::warn!("epoch {epoch}: batch with fewer than 2 annotation pairs skipped");
                        continue;
                    }
                },
                2 => {
                    let tgts = lookup_targets(targets.expect("checked"), batch)?;
                    let heads = head_indices(&params, batch, Heads::Labeling)?;
                    let features = features_of(batch, params.spec.input_dim)?;
                    let out = pair_outputs(&tape, &params, &bound, &features, &heads, Some(&mut streams.dropout))?;
                    let draws = Draws::Fresh {
                        rng: &mut streams.upsample,
                        k: config.upsample_train_k,
                    };
                    task2_loss(&tape, &out, &tgts, &config.hist, &kde, config.n_bins, draws)?.0
                }
                _ => {
                    let tgts = lookup_targets(targets.expect("checked"), batch)?;
                    baseline_loss(&tape, &params, &bound, batch, &tgts, Some(&mut streams.dropout))?
                }
            };
            let value = tape.scalar_value(loss);
            if !value.is_finite() {
                return Err(Error::Numerical(format!("non-finite training loss at epoch {epoch}")));
            }
            tape.backward(loss)?;
            params.sgd_step(&tape, &bound, lr)?;
            if task == 1 {
                sum1 += value;
                n1 += 1;
            } else {
                sum2 += value;
                n2 += 1;
            }
        }
        let v = validate(&params, &val_utts, targets, config, seed)?;
        if !v.total.is_finite() {
            return Err(Error::Numerical(format!("non-finite validation loss at epoch {epoch}")));
        }
        let mean = |s: f64, n: usize| (n > 0).then(|| s / n as f64);
        let step = schedule.observe(v.total);
        if step.improved {
            best = params.clone();
        }
        history.epochs.push(EpochRecord {
            epoch,
            train_task1: mean(sum1, n1),
            train_task2: mean(sum2, n2),
            val_task1: v.task1,
            val_task2: v.task2,
            val_total: v.total,
            lr,
            task1_steps: n1,
            task2_steps: n2,
        });
        log::info!("seed {seed} epoch {epoch}: val {:.5} lr {lr:e}", v.total);
        if step.stop {
            history.stopped_early = true;
            break;
        }
    }
    history.best_epoch = schedule.best_epoch;
    Ok(TrainResult {
        params: best,
        last: params,
        history,
    })
}

pub fn train_baseline(corpus: &Corpus, targets: &TargetMap, config: &TrainConfig, seed: u64) -> Result<TrainResult> {
    let config = TrainConfig {
        task_mode: TaskMode::Baseline,
        ..config.clone()
    };
    train(corpus, Some(targets), ModelKind::Baseline, &config, seed)
}

pub fn train_task1(corpus: &Corpus, kind: ModelKind, config: &TrainConfig, seed: u64) -> Result<TrainResult> {
    let config = TrainConfig {
        task_mode: TaskMode::Task1,
        ..config.clone()
    };
    train(corpus, None, kind, &config, seed)
}

pub fn train_task12(
    corpus: &Corpus,
    targets: &TargetMap,
    kind: ModelKind,
    config: &TrainConfig,
    seed: u64,
) -> Result<TrainResult> {
    let config = TrainConfig {
        task_mode: TaskMode::Task12,
        ..config.clone()
    };
    train(corpus, Some(targets), kind, &config, seed)
}

/// One run per configured seed, in seed order.
pub fn train_seeds(
    corpus: &Corpus,
    targets: Option<&TargetMap>,
    kind: ModelKind,
    config: &TrainConfig,
) -> Result<Vec<TrainResult>> {
    config
        .seeds
        .iter()
        .map(|&s| train(corpus, targets, kind, config, s))
        .collect()
}

#[cfg(test)]
mod tests;
