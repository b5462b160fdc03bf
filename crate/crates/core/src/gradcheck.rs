//! Finite-difference checks of every training loss.
//!
//! Each case builds a seeded micro-instance, takes the tape gradient and
//! compares it entry by entry with central differences. Task 2 cases replay
//! the upsampling noise and bandwidths of the first evaluation so the loss
//! is a smooth function of the parameters.

use ndarray::Array2;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{relative_error, Tape, Var};
use crate::corpus::Utterance;
use crate::error::Result;
use crate::grid::BinnedDistribution;
use crate::kde::{BandwidthMode, KdeConfig};
use crate::labels::{make_targets, UpsampleConfig};
use crate::metrics::ccc_loss_var;
use crate::model::{Bound, ModelKind, ModelSpec, Parameters};
use crate::softhist::SoftHistConfig;
use crate::synth::{generate_corpus, SynthCorpus};
use crate::trainer::{baseline_loss, head_indices, pair_outputs, task1_loss, task2_loss, Draws, Heads, Task2Draw};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckConfig {
    pub step: f64,
    pub tolerance: f64,
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-4,
            floor: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheck {
    pub name: String,
    pub n_checked: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

/// Which entries of each tensor to perturb.
#[derive(Clone, Copy)]
enum Entries {
    All,
    Sample(usize),
    Only(&'static str),
}

fn check_parameters(
    name: &str,
    params: &Parameters,
    entries: Entries,
    config: &GradCheckConfig,
    loss: &dyn Fn(&Tape, &Parameters, &Bound) -> Result<Var>,
) -> Result<GradCheck> {
    let tape = Tape::new();
    let bound = params.bind(&tape);
    let l = loss(&tape, params, &bound)?;
    tape.backward(l)?;
    let eval = |p: &Parameters| -> Result<f64> {
        let t = Tape::new();
        let b = p.bind(&t);
        let v = loss(&t, p, &b)?;
        Ok(t.scalar_value(v))
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x4752_4144);
    let mut worst: f64 = 0.0;
    let mut n = 0;
    let mut probe = params.clone();
    for (ti, tname) in params.names().iter().enumerate() {
        let shape = params.tensors()[ti].dim();
        let total = shape.0 * shape.1;
        let picks: Vec<usize> = match entries {
            Entries::All => (0..total).collect(),
            Entries::Sample(k) => sample(&mut rng, total, k.min(total)).into_vec(),
            Entries::Only(prefix) if tname.starts_with(prefix) => (0..total).collect(),
            Entries::Only(_) => continue,
        };
        let analytic = tape.grad(bound.vars[ti]);
        for flat in picks {
            let idx = (flat / shape.1, flat % shape.1);
            let x0 = params.tensors()[ti][idx];
            probe.get_mut(tname).expect("known name")[idx] = x0 + config.step;
            let up = eval(&probe)?;
            probe.get_mut(tname).expect("known name")[idx] = x0 - config.step;
            let down = eval(&probe)?;
            probe.get_mut(tname).expect("known name")[idx] = x0;
            let numeric = (up - down) / (2.0 * config.step);
            let err = relative_error(analytic[idx], numeric, config.floor);
            if !(err <= worst) {
                worst = if err.is_nan() { f64::INFINITY } else { err };
            }
            n += 1;
        }
    }
    Ok(GradCheck {
        name: name.to_string(),
        n_checked: n,
        max_rel_error: worst,
        passed: worst < config.tolerance,
    })
}

fn micro_corpus(seed: u64) -> Result<SynthCorpus> {
    generate_corpus(6, 4, 5, seed)
}

fn micro_targets(utts: &[&Utterance]) -> Result<Vec<BinnedDistribution>> {
    let up = UpsampleConfig::new(30, 1)?;
    let kde = KdeConfig::new(64, BandwidthMode::Automatic)?;
    Ok(make_targets(utts.iter().copied(), &up, &kde, 4)?
        .into_iter()
        .map(|t| t.distribution)
        .collect())
}

fn ccc_case(config: &GradCheckConfig) -> Result<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut col = || (0..8).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
    let (pa, la, pv, lv) = (col(), col(), col(), col());
    let tape = Tape::new();
    let vpa = tape.param(Array2::from_shape_vec((8, 1), pa.clone()).expect("8x1"));
    let vpv = tape.param(Array2::from_shape_vec((8, 1), pv.clone()).expect("8x1"));
    let loss = ccc_loss_var(&tape, vpa, tape.column(&la), vpv, tape.column(&lv))?;
    tape.backward(loss)?;
    let (ga, gv) = (tape.grad(vpa), tape.grad(vpv));
    let f = |a: &[f64], v: &[f64]| crate::metrics::ccc_loss(a, &la, v, &lv);
    let mut worst: f64 = 0.0;
    for i in 0..8 {
        for (which, g) in [(0, &ga), (1, &gv)] {
            let mut plus = [pa.clone(), pv.clone()];
            let mut minus = [pa.clone(), pv.clone()];
            plus[which][i] += config.step;
            minus[which][i] -= config.step;
            let numeric = (f(&plus[0], &plus[1])? - f(&minus[0], &minus[1])?) / (2.0 * config.step);
            worst = worst.max(relative_error(g[(i, 0)], numeric, config.floor));
        }
    }
    Ok(GradCheck {
        name: "ccc_loss".into(),
        n_checked: 16,
        max_rel_error: worst,
        passed: worst < config.tolerance,
    })
}

fn baseline_case(config: &GradCheckConfig, hidden: usize, entries: Entries, name: &str) -> Result<GradCheck> {
    let s = micro_corpus(config.seed)?;
    let utts: Vec<&Utterance> = s.corpus.utterances().iter().take(3).collect();
    let targets = micro_targets(&utts)?;
    let tref: Vec<&BinnedDistribution> = targets.iter().collect();
    let spec = ModelSpec::new(ModelKind::Baseline, s.corpus.feature_dim(), 0).with_hidden(hidden);
    let params = Parameters::init(spec, vec![], config.seed)?;
    check_parameters(name, &params, entries, config, &|tape, p, b| {
        baseline_loss(tape, p, b, &utts, &tref, None)
    })
}

fn task1_case(config: &GradCheckConfig, kind: ModelKind) -> Result<GradCheck> {
    let s = micro_corpus(config.seed)?;
    let c = &s.corpus;
    let utts: Vec<&Utterance> = c.utterances().iter().take(3).collect();
    let spec = ModelSpec::new(kind, c.feature_dim(), c.n_annotators()).with_hidden(8);
    let params = Parameters::init(spec, c.annotator_ids().to_vec(), config.seed + 1)?;
    let name = format!("ccc_loss∘{}", kind.as_str());
    check_parameters(&name, &params, Entries::All, config, &|tape, p, b| {
        task1_loss(tape, p, b, &utts, None)?.ok_or_else(|| crate::Error::data("micro-batch has fewer than 2 pairs"))
    })
}

fn task2_case(
    config: &GradCheckConfig,
    kind: ModelKind,
    hidden: usize,
    entries: Entries,
    name: &str,
) -> Result<GradCheck> {
    let s = micro_corpus(config.seed)?;
    let c = &s.corpus;
    let utts: Vec<&Utterance> = c.utterances().iter().take(2).collect();
    let targets = micro_targets(&utts)?;
    let tref: Vec<&BinnedDistribution> = targets.iter().collect();
    let spec = ModelSpec::new(kind, c.feature_dim(), c.n_annotators()).with_hidden(hidden);
    let params = Parameters::init(spec, c.annotator_ids().to_vec(), config.seed + 2)?;
    let hist = SoftHistConfig::default();
    let kde = KdeConfig::differentiable();
    let features = crate::model::batch_features(utts.iter().map(|u| u.features.as_slice()), c.feature_dim())?;
    let heads = head_indices(&params, &utts, Heads::Labeling)?;

    let frozen: Vec<Task2Draw> = {
        let tape = Tape::new();
        let bound = params.bind(&tape);
        let out = pair_outputs(&tape, &params, &bound, &features, &heads, None)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed + 3);
        task2_loss(
            &tape,
            &out,
            &tref,
            &hist,
            &kde,
            4,
            Draws::Fresh { rng: &mut rng, k: 20 },
        )?
        .1
    };
    check_parameters(name, &params, entries, config, &|tape, p, b| {
        let out = pair_outputs(tape, p, b, &features, &heads, None)?;
        Ok(task2_loss(tape, &out, &tref, &hist, &kde, 4, Draws::Frozen(&frozen))?.0)
    })
}

/// Runs every case with the given tolerances.
pub fn run_suite(config: &GradCheckConfig) -> Result<Vec<GradCheck>> {
    Ok(vec![
        ccc_case(config)?,
        baseline_case(config, 8, Entries::All, "cross_entropy∘softmax∘baseline")?,
        baseline_case(
            config,
            256,
            Entries::Sample(12),
            "cross_entropy∘softmax∘baseline (hidden 256, sampled)",
        )?,
        task1_case(config, ModelKind::Multitask)?,
        task1_case(config, ModelKind::OneHot)?,
        task2_case(
            config,
            ModelKind::Multitask,
            8,
            Entries::All,
            "cross_entropy∘bin∘diffkde∘upsample∘mt",
        )?,
        task2_case(
            config,
            ModelKind::OneHot,
            8,
            Entries::All,
            "cross_entropy∘bin∘diffkde∘upsample∘onehot",
        )?,
        task2_case(
            config,
            ModelKind::Multitask,
            256,
            Entries::Only("trunk.b"),
            "task 2 trunk bias, hidden 256",
        )?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes() {
        for c in run_suite(&GradCheckConfig::default()).unwrap() {
            assert!(c.passed, "{} max rel error {}", c.name, c.max_rel_error);
            assert!(c.n_checked > 0);
        }
    }

    #[test]
    fn corrupted_gradient_is_caught() {
        let params = Parameters::init(ModelSpec::new(ModelKind::Baseline, 2, 0).with_hidden(3), vec![], 0).unwrap();
        let calls = std::cell::Cell::new(0);
        let r = check_parameters(
            "bad",
            &params,
            Entries::Only("out.b"),
            &GradCheckConfig::default(),
            &|tape, _, b| {
                calls.set(calls.get() + 1);
                let v = b.var("out.b");
                // first call (the analytic one) differs from the finite-difference calls
                let k = if calls.get() == 1 { 2.0 } else { 1.0 };
                Ok(tape.scale(tape.sum(tape.mul(v, v)?), k))
            },
        )
        .unwrap();
        assert!(!r.passed);
    }
}
