use super::*;
use crate::autodiff::{numeric_gradient, relative_error};
use crate::kde::BandwidthMode;
use crate::labels::make_targets;
use crate::synth::{generate_corpus, SynthCorpus};

fn small_corpus(n: usize, seed: u64) -> SynthCorpus {
    generate_corpus(n, 6, 4, seed).unwrap()
}

fn small_targets(c: &Corpus) -> TargetMap {
    let up = UpsampleConfig::new(40, 5).unwrap();
    let kde = KdeConfig::new(64, BandwidthMode::Automatic).unwrap();
    make_targets(c.utterances(), &up, &kde, 4)
        .unwrap()
        .into_iter()
        .map(|t| (t.utterance_id, t.distribution))
        .collect()
}

fn quick(mode: TaskMode, epochs: usize) -> TrainConfig {
    TrainConfig {
        task_mode: mode,
        max_epochs: epochs,
        min_epochs: epochs.min(30),
        hidden: 16,
        batch_size: 8,
        lr: 0.01,
        ..TrainConfig::default()
    }
}

#[test]
fn interleaving_counts() {
    for b in 1..12 {
        let tasks = batch_tasks(TaskMode::Task12, b);
        assert_eq!(tasks.iter().filter(|&&t| t == 1).count(), b.div_ceil(2));
        assert_eq!(tasks.iter().filter(|&&t| t == 2).count(), b / 2);
        assert!(tasks.windows(2).all(|w| w[0] != w[1]));
        assert_eq!(tasks[0], 1);
    }
    assert!(batch_tasks(TaskMode::Task1, 5).iter().all(|&t| t == 1));
}

#[test]
fn epoch_step_counts_follow_schedule() {
    let s = small_corpus(60, 1);
    let targets = small_targets(&s.corpus);
    let cfg = quick(TaskMode::Task12, 2);
    let r = train_task12(&s.corpus, &targets, ModelKind::Multitask, &cfg, 0).unwrap();
    let n_train = s.corpus.split(Split::Train).count();
    let b = n_train.div_ceil(cfg.batch_size);
    for e in &r.history.epochs {
        assert_eq!(e.task1_steps, b.div_ceil(2));
        assert_eq!(e.task2_steps, b / 2);
        assert!(e.val_task1.is_some() && e.val_task2.is_some());
        assert!((e.val_total - e.val_task1.unwrap() - e.val_task2.unwrap()).abs() < 1e-12);
    }
}

#[test]
fn zero_learning_rate_leaves_parameters() {
    let s = small_corpus(40, 2);
    let cfg = TrainConfig {
        lr: 0.0,
        ..quick(TaskMode::Task1, 1)
    };
    let r = train_task1(&s.corpus, ModelKind::Multitask, &cfg, 3).unwrap();
    let fresh = Parameters::init(r.last.spec.clone(), r.last.annotator_ids.clone(), 3).unwrap();
    assert_eq!(r.last, fresh);
}

#[test]
fn same_seed_same_history() {
    let s = small_corpus(40, 3);
    let targets = small_targets(&s.corpus);
    let cfg = quick(TaskMode::Task12, 3);
    let a = train_task12(&s.corpus, &targets, ModelKind::OneHot, &cfg, 7).unwrap();
    let b = train_task12(&s.corpus, &targets, ModelKind::OneHot, &cfg, 7).unwrap();
    assert_eq!(a.history, b.history);
    assert_eq!(a.params, b.params);
    let c = train_task12(&s.corpus, &targets, ModelKind::OneHot, &cfg, 8).unwrap();
    assert_ne!(a.history, c.history);
}

#[test]
fn baseline_smoke_run_reduces_loss() {
    let s = generate_corpus(20, 5, 4, 4).unwrap();
    let targets = small_targets(&s.corpus);
    let cfg = TrainConfig {
        max_epochs: 100,
        min_epochs: 100,
        ..TrainConfig::default()
    };
    let r = train_baseline(&s.corpus, &targets, &cfg, 0).unwrap();
    let first = r.history.epochs.first().unwrap().train_task2.unwrap();
    let last = r.history.epochs.last().unwrap().train_task2.unwrap();
    assert_eq!(r.history.epochs.len(), 100);
    assert!(last < first, "{last} !< {first}");
}

#[test]
fn best_parameters_are_returned() {
    let s = small_corpus(50, 5);
    let cfg = quick(TaskMode::Task1, 6);
    let r = train_task1(&s.corpus, ModelKind::Multitask, &cfg, 1).unwrap();
    let val: Vec<&Utterance> = s.corpus.split(Split::Validation).collect();
    let v = validate(&r.params, &val, None, &cfg, 1).unwrap();
    let best = r.history.epochs[r.history.best_epoch - 1].val_total;
    assert_eq!(v.total, best);
    assert!(r.history.epochs.iter().all(|e| e.val_total >= best));
}

#[test]
fn missing_targets_fail_before_training() {
    let s = small_corpus(30, 6);
    let mut targets = small_targets(&s.corpus);
    let victim = s.corpus.split(Split::Validation).next().unwrap().id.clone();
    targets.remove(&victim);
    let err = train_task12(
        &s.corpus,
        &targets,
        ModelKind::Multitask,
        &quick(TaskMode::Task12, 1),
        0,
    )
    .unwrap_err();
    assert!(err.to_string().contains(&victim));
    assert!(train(&s.corpus, None, ModelKind::Baseline, &quick(TaskMode::Baseline, 1), 0).is_err());
    assert!(train(&s.corpus, None, ModelKind::Baseline, &quick(TaskMode::Task1, 1), 0).is_err());
}

#[test]
fn task1_step_touches_only_batch_heads() {
    let s = small_corpus(30, 7);
    let c = &s.corpus;
    let spec = ModelSpec::new(ModelKind::Multitask, c.feature_dim(), c.n_annotators()).with_hidden(8);
    let mut params = Parameters::init(spec, c.annotator_ids().to_vec(), 0).unwrap();
    let batch: Vec<&Utterance> = c.utterances().iter().take(2).collect();
    let in_batch: std::collections::HashSet<usize> = batch
        .iter()
        .flat_map(|u| {
            u.annotations
                .iter()
                .map(|a| c.annotator_index(&a.annotator_id).unwrap())
        })
        .collect();
    assert!(in_batch.len() < c.n_annotators());
    let before = params.clone();
    let tape = Tape::new();
    let bound = params.bind(&tape);
    let loss = task1_loss(&tape, &params, &bound, &batch, None).unwrap().unwrap();
    tape.backward(loss).unwrap();
    params.sgd_step(&tape, &bound, 0.5).unwrap();
    for name in ["act.head.w", "act.head.b", "val.head.w", "val.head.b"] {
        let (a, b) = (before.get(name).unwrap(), params.get(name).unwrap());
        for j in 0..c.n_annotators() {
            let changed = a.column(j) != b.column(j);
            if !in_batch.contains(&j) {
                assert!(!changed, "{name} head {j}");
            }
        }
    }
}

#[test]
fn perfect_predictions_have_zero_task1_loss() {
    let s = small_corpus(10, 8);
    let utts: Vec<&Utterance> = s.corpus.utterances().iter().collect();
    let (a, v) = labels_of(&utts);
    assert!(ccc_loss(&a, &a, &v, &v).unwrap().abs() < 1e-12);
}

#[test]
fn task2_replay_reproduces_loss_and_gradient() {
    let s = small_corpus(20, 9);
    let c = &s.corpus;
    let targets = small_targets(c);
    let spec = ModelSpec::new(ModelKind::Multitask, c.feature_dim(), c.n_annotators()).with_hidden(6);
    let params = Parameters::init(spec, c.annotator_ids().to_vec(), 2).unwrap();
    let batch: Vec<&Utterance> = c.utterances().iter().take(2).collect();
    let tgts = lookup_targets(&targets, &batch).unwrap();
    let hist = SoftHistConfig::default();
    let kde = KdeConfig::differentiable();
    let features = features_of(&batch, params.spec.input_dim).unwrap();
    let heads = head_indices(&params, &batch, Heads::Labeling).unwrap();
    let loss_with = |p: &Parameters, draws: Draws<'_>| {
        let tape = Tape::new();
        let bound = p.bind(&tape);
        let out = pair_outputs(&tape, p, &bound, &features, &heads, None).unwrap();
        let (l, used) = task2_loss(&tape, &out, &tgts, &hist, &kde, 4, draws).unwrap();
        (tape, bound, l, used)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (tape, bound, l, frozen) = loss_with(&params, Draws::Fresh { rng: &mut rng, k: 20 });
    let (tape2, _, l2, _) = loss_with(&params, Draws::Frozen(&frozen));
    assert_eq!(tape.scalar_value(l), tape2.scalar_value(l2));
    tape.backward(l).unwrap();
    let analytic = tape.grad(bound.var("trunk.w"));
    let w0 = params.get("trunk.w").unwrap().clone();
    let numeric = numeric_gradient(&w0, 1e-5, |w| {
        let mut q = params.clone();
        *q.get_mut("trunk.w").unwrap() = w.clone();
        let (t, _, l, _) = loss_with(&q, Draws::Frozen(&frozen));
        t.scalar_value(l)
    });
    for (a, n) in analytic.iter().zip(numeric.iter()) {
        assert!(relative_error(*a, *n, 1e-6) < 1e-4, "{a} vs {n}");
    }
}

#[test]
fn history_csv_layout() {
    let h = History {
        epochs: vec![EpochRecord {
            epoch: 1,
            train_task1: Some(0.5),
            train_task2: None,
            val_task1: Some(0.25),
            val_task2: None,
            val_total: 0.25,
            lr: 0.001,
            task1_steps: 3,
            task2_steps: 0,
        }],
        best_epoch: 1,
        stopped_early: false,
    };
    assert_eq!(
        h.to_csv(),
        "epoch,train_task1,train_task2,val_task1,val_task2,val_total,lr\n1,0.5,,0.25,,0.25,0.001\n"
    );
}

#[test]
fn task_names_parse() {
    assert_eq!("1+2".parse::<TaskMode>().unwrap(), TaskMode::Task12);
    assert_eq!("baseline".parse::<TaskMode>().unwrap(), TaskMode::Baseline);
    assert!("2".parse::<TaskMode>().is_err());
    assert_eq!("zero-shot".parse::<EvalMode>().unwrap(), EvalMode::ZeroShot);
}

#[test]
fn targets_as_predictions_score_zero() {
    let s = small_corpus(40, 10);
    let targets = small_targets(&s.corpus);
    let out = evaluate_distributions(&targets, &s.corpus, &targets, EvalMode::Within, &EvalConfig::default()).unwrap();
    assert_eq!(out.report.metrics["tvd"].mean, 0.0);
    assert_eq!(out.report.metrics["jsd"].mean, 0.0);
    assert!(out.report.reference.tvd_uniform > 0.0);
}

#[test]
fn evaluation_reports() {
    let s = small_corpus(60, 11);
    let targets = small_targets(&s.corpus);
    let cfg = quick(TaskMode::Task1, 2);
    let models: Vec<Parameters> = [0, 1]
        .iter()
        .map(|&seed| train_task1(&s.corpus, ModelKind::Multitask, &cfg, seed).unwrap().params)
        .collect();
    let ecfg = EvalConfig {
        upsample_k: 30,
        ..EvalConfig::default()
    };
    let within = evaluate(&models, &s.corpus, &targets, EvalMode::Within, &ecfg).unwrap();
    let again = evaluate(&models, &s.corpus, &targets, EvalMode::Within, &ecfg).unwrap();
    assert_eq!(within.report.to_json(), again.report.to_json());
    let r = &within.report;
    assert_eq!(r.seeds.len(), 2);
    assert_eq!(r.metrics["tvd"].per_seed.len(), 2);
    assert!(r.metrics.contains_key("annotator_ccc_act"));
    assert!(r.metrics.contains_key("tvd_kde2d"));
    assert!(r.table_row().starts_with("mt\t"));
    assert!(r.table_row().contains('±'));

    let zs = evaluate(
        &models,
        &s.corpus,
        &targets,
        EvalMode::ZeroShot,
        &EvalConfig::for_mode(EvalMode::ZeroShot),
    )
    .unwrap();
    let json = zs.report.to_json();
    assert!(!json.contains("annotator_ccc"));
    assert_eq!(zs.report.n_utterances, s.corpus.utterances().len());
}

#[test]
fn within_mode_rejects_unknown_annotators() {
    let s = small_corpus(40, 12);
    let targets = small_targets(&s.corpus);
    let mut p = train_task1(&s.corpus, ModelKind::Multitask, &quick(TaskMode::Task1, 1), 0)
        .unwrap()
        .params;
    p.annotator_ids[0] = "stranger".into();
    let cfg = EvalConfig {
        split: None,
        ..EvalConfig::default()
    };
    assert!(evaluate(&[p.clone()], &s.corpus, &targets, EvalMode::Within, &cfg).is_err());
    assert!(evaluate(&[p], &s.corpus, &targets, EvalMode::ZeroShot, &cfg).is_ok());
}

#[test]
fn baseline_evaluates_via_softmax() {
    let s = small_corpus(40, 13);
    let targets = small_targets(&s.corpus);
    let p = train_baseline(&s.corpus, &targets, &quick(TaskMode::Baseline, 1), 0)
        .unwrap()
        .params;
    let out = evaluate(&[p], &s.corpus, &targets, EvalMode::Within, &EvalConfig::default()).unwrap();
    assert!(!out.report.metrics.contains_key("annotator_ccc_act"));
    assert!(!out.report.metrics.contains_key("tvd_kde2d"));
    assert!(out.report.metrics["tvd"].mean > 0.0);
}
