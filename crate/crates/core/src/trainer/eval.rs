//! Evaluation of trained models against target distributions.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{distribution_from_predictions, head_indices, predict_baseline, predict_heads, Heads, TargetMap};
use crate::corpus::{Corpus, Split, Utterance};
use crate::error::{Error, Result};
use crate::grid::{bin_index, BinnedDistribution};
use crate::kde::{BandwidthMode, KdeConfig};
use crate::labels::UpsampleConfig;
use crate::metrics::{ccc, consensus_from_distribution, jsd, tvd, MeanStd};
use crate::model::{ModelKind, Parameters};
use crate::softhist::SoftHistConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EvalMode {
    /// Heads of the annotators who labeled each utterance.
    #[serde(rename = "within")]
    Within,
    /// Every head on every utterance.
    #[serde(rename = "zero-shot")]
    ZeroShot,
}

impl std::str::FromStr for EvalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "within" => Ok(EvalMode::Within),
            "zero-shot" | "zero_shot" | "zeroshot" => Ok(EvalMode::ZeroShot),
            _ => Err(Error::config(format!("unknown evaluation mode '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    /// Utterances to score; `None` means the whole corpus.
    pub split: Option<Split>,
    pub upsample_k: usize,
    pub seed: u64,
    pub hist: SoftHistConfig,
    pub n_bins: usize,
    /// Also score the same predictions smoothed by plain KDE.
    pub ablation: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            split: Some(Split::Test),
            upsample_k: 100,
            seed: 0,
            hist: SoftHistConfig::default(),
            n_bins: 4,
            ablation: true,
        }
    }
}

impl EvalConfig {
    /// Test split for within-corpus runs, every utterance for zero-shot.
    pub fn for_mode(mode: EvalMode) -> Self {
        Self {
            split: match mode {
                EvalMode::Within => Some(Split::Test),
                EvalMode::ZeroShot => None,
            },
            ..Self::default()
        }
    }

    fn kde(&self) -> KdeConfig {
        KdeConfig {
            grid_size: self.hist.bins,
            bandwidth: BandwidthMode::Automatic,
        }
    }

    fn utterances<'a>(&self, corpus: &'a Corpus) -> Vec<&'a Utterance> {
        match self.split {
            Some(s) => corpus.split(s).collect(),
            None => corpus.utterances().iter().collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedMetrics {
    pub seed: u64,
    pub tvd: f64,
    pub jsd: f64,
    pub consensus_ccc_act: f64,
    pub consensus_ccc_val: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub annotator_ccc_act: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub annotator_ccc_val: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub annotator_macro_ccc_act: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub annotator_macro_ccc_val: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tvd_kde2d: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub jsd_kde2d: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: f64,
    pub std: f64,
    pub per_seed: Vec<f64>,
}

impl MetricSummary {
    fn of(values: Vec<f64>) -> Option<Self> {
        let ms = MeanStd::of(&values)?;
        Some(Self {
            mean: ms.mean,
            std: ms.std,
            per_seed: values,
        })
    }

    pub fn mean_std(&self) -> MeanStd {
        MeanStd {
            mean: self.mean,
            std: self.std,
        }
    }
}

/// Scores of trivial predictors on the same utterances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceMetrics {
    pub tvd_uniform: f64,
    pub jsd_uniform: f64,
    /// All mass in the bin holding the consensus label.
    pub tvd_consensus_point_mass: f64,
    pub jsd_consensus_point_mass: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: EvalMode,
    pub model: String,
    pub split: Option<Split>,
    pub n_utterances: usize,
    pub reference: ReferenceMetrics,
    pub metrics: BTreeMap<String, MetricSummary>,
    pub seeds: Vec<SeedMetrics>,
}

impl EvalReport {
    /// `TVD  JSD  Activation CCC  Valence CCC` as mean±std.
    pub fn table_row(&self) -> String {
        let cell = |k: &str| {
            self.metrics
                .get(k)
                .map_or("-".to_string(), |m| m.mean_std().to_string())
        };
        format!(
            "{}\t{}\t{}\t{}\t{}",
            self.model,
            cell("tvd"),
            cell("jsd"),
            cell("consensus_ccc_act"),
            cell("consensus_ccc_val")
        )
    }

    pub fn to_json(&self) -> String {
        format!("{}\n", serde_json::to_string_pretty(self).expect("report serializes"))
    }
}

#[derive(Debug, Clone)]
pub struct EvalOutput {
    pub report: EvalReport,
    /// Predicted distributions per seed, in utterance order.
    pub distributions: Vec<(u64, Vec<(String, BinnedDistribution)>)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatorPrediction {
    pub utterance_id: String,
    pub annotator_id: String,
    pub pred_act: f64,
    pub pred_val: f64,
    pub act: f64,
    pub val: f64,
}

/// Head predictions for every rating in `utts`, in evaluation mode.
pub fn annotator_predictions(params: &Parameters, utts: &[&Utterance]) -> Result<Vec<AnnotatorPrediction>> {
    let heads = head_indices(params, utts, Heads::Labeling)?;
    let preds = predict_heads(params, utts, &heads)?;
    let mut out = Vec::new();
    for (u, p) in utts.iter().zip(preds) {
        for (r, (pa, pv)) in u.annotations.iter().zip(p) {
            out.push(AnnotatorPrediction {
                utterance_id: u.id.clone(),
                annotator_id: r.annotator_id.clone(),
                pred_act: pa,
                pred_val: pv,
                act: r.activation,
                val: r.valence,
            });
        }
    }
    Ok(out)
}

/// Predicted distributions for `utts`. With `diff` false the annotator
/// predictions are smoothed by plain KDE instead of DiffKDE.
pub fn predict_distributions(
    params: &Parameters,
    utts: &[&Utterance],
    mode: EvalMode,
    config: &EvalConfig,
    diff: bool,
) -> Result<Vec<BinnedDistribution>> {
    if params.spec.kind == ModelKind::Baseline {
        return predict_baseline(params, utts);
    }
    let heads = match mode {
        EvalMode::Within => Heads::Labeling,
        EvalMode::ZeroShot => Heads::All,
    };
    let idx = head_indices(params, utts, heads)?;
    let preds = predict_heads(params, utts, &idx)?;
    let base = UpsampleConfig {
        k_subsets: config.upsample_k,
        rng_seed: config.seed,
        ..UpsampleConfig::default()
    };
    let kde = config.kde();
    utts.par_iter()
        .zip(preds.par_iter())
        .map(|(u, p)| {
            distribution_from_predictions(p, &base.for_utterance(&u.id), &config.hist, &kde, config.n_bins, diff)
        })
        .collect()
}

fn lookup<'a>(targets: &'a TargetMap, utts: &[&Utterance]) -> Result<Vec<&'a BinnedDistribution>> {
    utts.iter()
        .map(|u| {
            targets
                .get(&u.id)
                .ok_or_else(|| Error::data(format!("no target for utterance {}", u.id)))
        })
        .collect()
}

fn mean_divergences(preds: &[BinnedDistribution], targets: &[&BinnedDistribution]) -> Result<(f64, f64)> {
    let n = preds.len() as f64;
    let (mut t, mut j) = (0.0, 0.0);
    for (p, q) in preds.iter().zip(targets) {
        t += tvd(q, p)?;
        j += jsd(q, p)?;
    }
    Ok((t / n, j / n))
}

fn consensus_cccs(preds: &[BinnedDistribution], utts: &[&Utterance]) -> Result<(f64, f64)> {
    let mut pa = Vec::with_capacity(preds.len());
    let mut pv = Vec::with_capacity(preds.len());
    for p in preds {
        let (a, v) = consensus_from_distribution(p)?;
        pa.push(a);
        pv.push(v);
    }
    let ta: Vec<f64> = utts.iter().map(|u| u.consensus_act).collect();
    let tv: Vec<f64> = utts.iter().map(|u| u.consensus_val).collect();
    Ok((ccc(&pa, &ta)?, ccc(&pv, &tv)?))
}

fn annotator_cccs(preds: &[AnnotatorPrediction]) -> Result<(f64, f64, f64, f64)> {
    let col = |f: fn(&AnnotatorPrediction) -> f64| preds.iter().map(f).collect::<Vec<f64>>();
    let pooled_act = ccc(&col(|p| p.pred_act), &col(|p| p.act))?;
    let pooled_val = ccc(&col(|p| p.pred_val), &col(|p| p.val))?;
    let mut by: BTreeMap<&str, Vec<&AnnotatorPrediction>> = BTreeMap::new();
    for p in preds {
        by.entry(p.annotator_id.as_str()).or_default().push(p);
    }
    let (mut sa, mut sv, mut n) = (0.0, 0.0, 0usize);
    for ps in by.values().filter(|ps| ps.len() >= 2) {
        let g = |f: fn(&AnnotatorPrediction) -> f64| ps.iter().map(|p| f(p)).collect::<Vec<f64>>();
        sa += ccc(&g(|p| p.pred_act), &g(|p| p.act))?;
        sv += ccc(&g(|p| p.pred_val), &g(|p| p.val))?;
        n += 1;
    }
    let macro_ = |s: f64| if n > 0 { s / n as f64 } else { f64::NAN };
    Ok((pooled_act, pooled_val, macro_(sa), macro_(sv)))
}

fn reference(utts: &[&Utterance], targets: &[&BinnedDistribution], n_bins: usize) -> Result<ReferenceMetrics> {
    let uniform = vec![BinnedDistribution::uniform(n_bins); utts.len()];
    let point: Vec<BinnedDistribution> = utts
        .iter()
        .map(|u| {
            BinnedDistribution::point_mass(
                n_bins,
                bin_index(u.consensus_act, n_bins),
                bin_index(u.consensus_val, n_bins),
            )
        })
        .collect();
    let (tu, ju) = mean_divergences(&uniform, targets)?;
    let (tp, jp) = mean_divergences(&point, targets)?;
    Ok(ReferenceMetrics {
        tvd_uniform: tu,
        jsd_uniform: ju,
        tvd_consensus_point_mass: tp,
        jsd_consensus_point_mass: jp,
    })
}

fn summarize(seeds: &[SeedMetrics]) -> BTreeMap<String, MetricSummary> {
    let mut out = BTreeMap::new();
    let fields: [(&str, fn(&SeedMetrics) -> Option<f64>); 10] = [
        ("tvd", |m| Some(m.tvd)),
        ("jsd", |m| Some(m.jsd)),
        ("consensus_ccc_act", |m| Some(m.consensus_ccc_act)),
        ("consensus_ccc_val", |m| Some(m.consensus_ccc_val)),
        ("annotator_ccc_act", |m| m.annotator_ccc_act),
        ("annotator_ccc_val", |m| m.annotator_ccc_val),
        ("annotator_macro_ccc_act", |m| m.annotator_macro_ccc_act),
        ("annotator_macro_ccc_val", |m| m.annotator_macro_ccc_val),
        ("tvd_kde2d", |m| m.tvd_kde2d),
        ("jsd_kde2d", |m| m.jsd_kde2d),
    ];
    for (name, get) in fields {
        let values: Option<Vec<f64>> = seeds.iter().map(get).collect();
        if let Some(s) = values.and_then(MetricSummary::of) {
            out.insert(name.to_string(), s);
        }
    }
    out
}

/// Scores one model per seed on the configured utterances.
pub fn evaluate(
    models: &[Parameters],
    corpus: &Corpus,
    targets: &TargetMap,
    mode: EvalMode,
    config: &EvalConfig,
) -> Result<EvalOutput> {
    let first = models.first().ok_or_else(|| Error::config("no models to evaluate"))?;
    if models.iter().any(|m| m.spec.kind != first.spec.kind) {
        return Err(Error::config("all evaluated models must share a kind"));
    }
    let utts = config.utterances(corpus);
    if utts.len() < 2 {
        return Err(Error::data(format!(
            "evaluation needs at least 2 utterances, found {}",
            utts.len()
        )));
    }
    let tgts = lookup(targets, &utts)?;
    let mut seeds = Vec::with_capacity(models.len());
    let mut distributions = Vec::with_capacity(models.len());
    for params in models {
        let preds = predict_distributions(params, &utts, mode, config, true)?;
        let (t, j) = mean_divergences(&preds, &tgts)?;
        let (ca, cv) = consensus_cccs(&preds, &utts)?;
        let mut m = SeedMetrics {
            seed: params.seed,
            tvd: t,
            jsd: j,
            consensus_ccc_act: ca,
            consensus_ccc_val: cv,
            annotator_ccc_act: None,
            annotator_ccc_val: None,
            annotator_macro_ccc_act: None,
            annotator_macro_ccc_val: None,
            tvd_kde2d: None,
            jsd_kde2d: None,
        };
        if params.spec.kind != ModelKind::Baseline {
            if mode == EvalMode::Within {
                let (pa, pv, ma, mv) = annotator_cccs(&annotator_predictions(params, &utts)?)?;
                m.annotator_ccc_act = Some(pa);
                m.annotator_ccc_val = Some(pv);
                m.annotator_macro_ccc_act = Some(ma);
                m.annotator_macro_ccc_val = Some(mv);
            }
            if config.ablation {
                let plain = predict_distributions(params, &utts, mode, config, false)?;
                let (t, j) = mean_divergences(&plain, &tgts)?;
                m.tvd_kde2d = Some(t);
                m.jsd_kde2d = Some(j);
            }
        }
        seeds.push(m);
        distributions.push((params.seed, utts.iter().map(|u| u.id.clone()).zip(preds).collect()));
    }
    let report = EvalReport {
        mode,
        model: first.spec.kind.as_str().to_string(),
        split: config.split,
        n_utterances: utts.len(),
        reference: reference(&utts, &tgts, config.n_bins)?,
        metrics: summarize(&seeds),
        seeds,
    };
    Ok(EvalOutput { report, distributions })
}

/// Scores precomputed distributions (for example a target cache) as if they
/// were model outputs.
pub fn evaluate_distributions(
    predictions: &TargetMap,
    corpus: &Corpus,
    targets: &TargetMap,
    mode: EvalMode,
    config: &EvalConfig,
) -> Result<EvalOutput> {
    let utts = config.utterances(corpus);
    if utts.len() < 2 {
        return Err(Error::data(format!(
            "evaluation needs at least 2 utterances, found {}",
            utts.len()
        )));
    }
    let tgts = lookup(targets, &utts)?;
    let preds: Vec<BinnedDistribution> = lookup(predictions, &utts)?.into_iter().cloned().collect();
    let (t, j) = mean_divergences(&preds, &tgts)?;
    let (ca, cv) = consensus_cccs(&preds, &utts)?;
    let seeds = vec![SeedMetrics {
        seed: config.seed,
        tvd: t,
        jsd: j,
        consensus_ccc_act: ca,
        consensus_ccc_val: cv,
        annotator_ccc_act: None,
        annotator_ccc_val: None,
        annotator_macro_ccc_act: None,
        annotator_macro_ccc_val: None,
        tvd_kde2d: None,
        jsd_kde2d: None,
    }];
    let report = EvalReport {
        mode,
        model: "distributions".into(),
        split: config.split,
        n_utterances: utts.len(),
        reference: reference(&utts, &tgts, config.n_bins)?,
        metrics: summarize(&seeds),
        seeds,
    };
    Ok(EvalOutput {
        report,
        distributions: vec![(config.seed, utts.iter().map(|u| u.id.clone()).zip(preds).collect())],
    })
}
