//! Feed-forward architectures over precomputed feature vectors.
//!
//! All three share an input dropout and a `Linear(D, H) + ReLU` trunk.
//! The baseline adds two hidden layers and a 16-logit output. The multi-task
//! and one-hot models duplicate those two layers into an activation branch
//! and a valence branch. Multi-task ends each branch with one scalar head per
//! annotator; one-hot appends the annotator identity to the input and ends
//! with a single head per branch.
//!
//! Weights are stored `(in, out)` so a batch `X` maps to `X·W + b`.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::{s, Array2};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Baseline,
    #[serde(rename = "mt")]
    Multitask,
    #[serde(rename = "onehot")]
    OneHot,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Baseline => "baseline",
            ModelKind::Multitask => "mt",
            ModelKind::OneHot => "onehot",
        }
    }

    fn code(self) -> u8 {
        match self {
            ModelKind::Baseline => 0,
            ModelKind::Multitask => 1,
            ModelKind::OneHot => 2,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(ModelKind::Baseline),
            1 => Some(ModelKind::Multitask),
            2 => Some(ModelKind::OneHot),
            _ => None,
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(ModelKind::Baseline),
            "mt" | "multitask" => Ok(ModelKind::Multitask),
            "onehot" | "one-hot" => Ok(ModelKind::OneHot),
            _ => Err(Error::config(format!("unknown model kind '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub input_dim: usize,
    pub hidden: usize,
    pub dropout_p: f64,
    pub n_annotators: usize,
    pub n_bins: usize,
}

impl ModelSpec {
    pub fn new(kind: ModelKind, input_dim: usize, n_annotators: usize) -> Self {
        Self {
            kind,
            input_dim,
            hidden: 256,
            dropout_p: 0.2,
            n_annotators,
            n_bins: 4,
        }
    }

    pub fn with_hidden(mut self, hidden: usize) -> Self {
        self.hidden = hidden;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden == 0 || self.n_bins == 0 {
            return Err(Error::config("model dimensions must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::config(format!(
                "dropout probability {} outside [0, 1)",
                self.dropout_p
            )));
        }
        if self.kind != ModelKind::Baseline && self.n_annotators == 0 {
            return Err(Error::config("annotator-aware models need at least one annotator"));
        }
        Ok(())
    }

    /// Width of the first layer's input.
    pub fn trunk_input(&self) -> usize {
        match self.kind {
            ModelKind::OneHot => self.input_dim + self.n_annotators,
            _ => self.input_dim,
        }
    }

    pub fn n_outputs(&self) -> usize {
        match self.kind {
            ModelKind::Baseline => self.n_bins * self.n_bins,
            ModelKind::Multitask => 2 * self.n_annotators,
            ModelKind::OneHot => 2,
        }
    }

    /// Parameter names and shapes in checkpoint order.
    pub fn layout(&self) -> Vec<(String, (usize, usize))> {
        let h = self.hidden;
        let mut out = Vec::new();
        let mut linear = |name: &str, i: usize, o: usize| {
            out.push((format!("{name}.w"), (i, o)));
            out.push((format!("{name}.b"), (1, o)));
        };
        linear("trunk", self.trunk_input(), h);
        match self.kind {
            ModelKind::Baseline => {
                linear("hidden1", h, h);
                linear("hidden2", h, h);
                linear("out", h, self.n_bins * self.n_bins);
            }
            ModelKind::Multitask | ModelKind::OneHot => {
                let heads = if self.kind == ModelKind::Multitask {
                    self.n_annotators
                } else {
                    1
                };
                for branch in ["act", "val"] {
                    linear(&format!("{branch}.hidden1"), h, h);
                    linear(&format!("{branch}.hidden2"), h, h);
                    linear(&format!("{branch}.head"), h, heads);
                }
            }
        }
        out
    }
}

/// Named parameter tensors plus the metadata needed to reload them.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters {
    pub spec: ModelSpec,
    pub seed: u64,
    pub annotator_ids: Vec<String>,
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl Parameters {
    /// Uniform initialization in ±1/√fan_in for weights and biases.
    pub fn init(spec: ModelSpec, annotator_ids: Vec<String>, seed: u64) -> Result<Self> {
        spec.validate()?;
        check_annotators(&spec, &annotator_ids)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        let layout = spec.layout();
        for (idx, (name, shape)) in layout.iter().enumerate() {
            // biases share their weight's fan-in
            let fan_in = if name.ends_with(".b") {
                layout[idx - 1].1 .0
            } else {
                shape.0
            };
            let bound = 1.0 / (fan_in as f64).sqrt();
            tensors.push(Array2::from_shape_simple_fn(*shape, || rng.random_range(-bound..bound)));
            names.push(name.clone());
        }
        Ok(Self {
            spec,
            seed,
            annotator_ids,
            names,
            tensors,
        })
    }

    /// All-zero parameters with the spec's layout.
    pub fn zeros(spec: ModelSpec, annotator_ids: Vec<String>) -> Result<Self> {
        let mut p = Self::init(spec, annotator_ids, 0)?;
        p.tensors.iter_mut().for_each(|t| t.fill(0.0));
        Ok(p)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(move |i| &mut self.tensors[i])
    }

    pub fn n_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// Places every tensor on the tape as a trainable leaf.
    pub fn bind(&self, tape: &Tape) -> Bound {
        let vars = self.tensors.iter().map(|t| tape.param(t.clone())).collect();
        let index = self.names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        Bound { vars, index }
    }

    /// Plain SGD step `θ ← θ − lr·∇θ` using gradients accumulated on `tape`.
    pub fn sgd_step(&mut self, tape: &Tape, bound: &Bound, lr: f64) -> Result<()> {
        for (t, v) in self.tensors.iter_mut().zip(&bound.vars) {
            let g = tape.grad(*v);
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::Numerical("non-finite gradient".into()));
            }
            t.scaled_add(-lr, &g);
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.push(self.spec.kind.code());
        for v in [
            self.spec.input_dim,
            self.spec.n_annotators,
            self.spec.hidden,
            self.spec.n_bins,
        ] {
            out.extend_from_slice(&(v as u64).to_le_bytes());
        }
        out.extend_from_slice(&self.spec.dropout_p.to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&(self.annotator_ids.len() as u64).to_le_bytes());
        for id in &self.annotator_ids {
            put_str(&mut out, id);
        }
        out.extend_from_slice(&(self.tensors.len() as u64).to_le_bytes());
        for (name, t) in self.names.iter().zip(&self.tensors) {
            put_str(&mut out, name);
            out.extend_from_slice(&(t.nrows() as u64).to_le_bytes());
            out.extend_from_slice(&(t.ncols() as u64).to_le_bytes());
            for v in t.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(CHECKPOINT_MAGIC.len())? != CHECKPOINT_MAGIC {
            return Err(Error::data("not a model checkpoint"));
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(Error::data(format!("unsupported checkpoint version {version}")));
        }
        let kind = ModelKind::from_code(r.take(1)?[0]).ok_or_else(|| Error::data("bad model kind code"))?;
        let input_dim = r.usize()?;
        let n_annotators = r.usize()?;
        let hidden = r.usize()?;
        let n_bins = r.usize()?;
        let dropout_p = r.f64()?;
        let seed = r.u64()?;
        let spec = ModelSpec {
            kind,
            input_dim,
            hidden,
            dropout_p,
            n_annotators,
            n_bins,
        };
        spec.validate()?;
        let n_ids = r.usize()?;
        let annotator_ids = (0..n_ids).map(|_| r.string()).collect::<Result<Vec<_>>>()?;
        check_annotators(&spec, &annotator_ids)?;
        let layout = spec.layout();
        if r.usize()? != layout.len() {
            return Err(Error::data("checkpoint tensor count does not match its header"));
        }
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for (name, shape) in layout {
            let got = r.string()?;
            let rows = r.usize()?;
            let cols = r.usize()?;
            if got != name || (rows, cols) != shape {
                return Err(Error::data(format!(
                    "checkpoint tensor '{got}' {rows}x{cols} where '{name}' {shape:?} expected"
                )));
            }
            let data = (0..rows * cols).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            tensors.push(Array2::from_shape_vec(shape, data).expect("shape checked"));
            names.push(name);
        }
        if r.pos != bytes.len() {
            return Err(Error::data("trailing bytes after checkpoint"));
        }
        Ok(Self {
            spec,
            seed,
            annotator_ids,
            names,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| Error::parse(path, e.to_string()))
    }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"EMODCKPT";
const CHECKPOINT_VERSION: u32 = 1;

fn check_annotators(spec: &ModelSpec, ids: &[String]) -> Result<()> {
    let expected = if spec.kind == ModelKind::Baseline {
        ids.len()
    } else {
        spec.n_annotators
    };
    if ids.len() != expected {
        return Err(Error::config(format!(
            "{} annotator ids for {} heads",
            ids.len(),
            expected
        )));
    }
    Ok(())
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::data("truncated checkpoint"))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::data("size overflows usize"))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::data("checkpoint string is not UTF-8"))
    }
}

/// Parameters placed on a tape.
pub struct Bound {
    pub vars: Vec<Var>,
    index: HashMap<String, usize>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Var {
        self.vars[self.index[name]]
    }

    fn linear(&self, tape: &Tape, x: Var, name: &str) -> Result<Var> {
        tape.linear(x, self.var(&format!("{name}.w")), self.var(&format!("{name}.b")))
    }
}

/// Inverted dropout on a constant batch. `None` means evaluation mode.
pub fn dropout(x: &Array2<f64>, p: f64, rng: Option<&mut dyn RngCore>) -> Array2<f64> {
    match rng {
        Some(rng) if p > 0.0 => {
            let keep = 1.0 / (1.0 - p);
            x.mapv(|v| if rng.random::<f64>() < p { 0.0 } else { v * keep })
        }
        _ => x.clone(),
    }
}

fn check_features(spec: &ModelSpec, features: &Array2<f64>) -> Result<()> {
    if features.ncols() != spec.input_dim {
        return Err(Error::shape(
            "forward",
            format!(
                "features have {} columns, model expects {}",
                features.ncols(),
                spec.input_dim
            ),
        ));
    }
    if features.nrows() == 0 {
        return Err(Error::shape("forward", "empty batch"));
    }
    Ok(())
}

fn check_kind(spec: &ModelSpec, kind: ModelKind) -> Result<()> {
    if spec.kind != kind {
        return Err(Error::config(format!(
            "{} forward called on a {} model",
            kind, spec.kind
        )));
    }
    Ok(())
}

fn trunk(tape: &Tape, bound: &Bound, input: Array2<f64>) -> Result<Var> {
    let x = tape.constant(input);
    Ok(tape.relu(bound.linear(tape, x, "trunk")?))
}

fn branch(tape: &Tape, bound: &Bound, h: Var, name: &str) -> Result<Var> {
    let h = tape.relu(bound.linear(tape, h, &format!("{name}.hidden1"))?);
    Ok(tape.relu(bound.linear(tape, h, &format!("{name}.hidden2"))?))
}

/// Baseline logits, one row of 16 per input row.
pub fn forward_baseline(
    tape: &Tape,
    params: &Parameters,
    bound: &Bound,
    features: &Array2<f64>,
    dropout_rng: Option<&mut dyn RngCore>,
) -> Result<Var> {
    check_kind(&params.spec, ModelKind::Baseline)?;
    check_features(&params.spec, features)?;
    let h = trunk(tape, bound, dropout(features, params.spec.dropout_p, dropout_rng))?;
    let h = tape.relu(bound.linear(tape, h, "hidden1")?);
    let h = tape.relu(bound.linear(tape, h, "hidden2")?);
    bound.linear(tape, h, "out")
}

/// Multi-task predictions for the heads in `subset`: two n×|subset| matrices
/// (activation, valence) whose column `j` belongs to annotator `subset[j]`.
/// Heads outside the subset are not touched.
pub fn forward_multitask(
    tape: &Tape,
    params: &Parameters,
    bound: &Bound,
    features: &Array2<f64>,
    subset: &[usize],
    dropout_rng: Option<&mut dyn RngCore>,
) -> Result<(Var, Var)> {
    check_kind(&params.spec, ModelKind::Multitask)?;
    check_features(&params.spec, features)?;
    if let Some(&bad) = subset.iter().find(|&&a| a >= params.spec.n_annotators) {
        return Err(Error::shape(
            "forward_multitask",
            format!(
                "annotator index {bad} out of range for {} heads",
                params.spec.n_annotators
            ),
        ));
    }
    if subset.is_empty() {
        return Err(Error::shape("forward_multitask", "empty annotator subset"));
    }
    let h = trunk(tape, bound, dropout(features, params.spec.dropout_p, dropout_rng))?;
    let mut outs = Vec::with_capacity(2);
    for name in ["act", "val"] {
        let hb = branch(tape, bound, h, name)?;
        let w = tape.select_cols(bound.var(&format!("{name}.head.w")), subset)?;
        let b = tape.select_cols(bound.var(&format!("{name}.head.b")), subset)?;
        outs.push(tape.linear(hb, w, b)?);
    }
    Ok((outs[0], outs[1]))
}

/// Features with a one-hot annotator block appended, one annotator per row.
pub fn onehot_input(features: &Array2<f64>, annotators: &[usize], n_annotators: usize) -> Result<Array2<f64>> {
    if annotators.len() != features.nrows() {
        return Err(Error::shape(
            "onehot_input",
            format!("{} annotator indices for {} rows", annotators.len(), features.nrows()),
        ));
    }
    let d = features.ncols();
    let mut out = Array2::zeros((features.nrows(), d + n_annotators));
    out.slice_mut(s![.., ..d]).assign(features);
    for (r, &a) in annotators.iter().enumerate() {
        if a >= n_annotators {
            return Err(Error::shape(
                "onehot_input",
                format!("annotator index {a} out of range for {n_annotators}"),
            ));
        }
        out[(r, d + a)] = 1.0;
    }
    Ok(out)
}

/// One-hot model predictions: row `r` is conditioned on `annotators[r]`.
/// Returns n×1 activation and valence columns.
pub fn forward_onehot(
    tape: &Tape,
    params: &Parameters,
    bound: &Bound,
    features: &Array2<f64>,
    annotators: &[usize],
    dropout_rng: Option<&mut dyn RngCore>,
) -> Result<(Var, Var)> {
    check_kind(&params.spec, ModelKind::OneHot)?;
    check_features(&params.spec, features)?;
    // identity bits are not dropped
    let dropped = dropout(features, params.spec.dropout_p, dropout_rng);
    let input = onehot_input(&dropped, annotators, params.spec.n_annotators)?;
    let h = trunk(tape, bound, input)?;
    let act = bound.linear(tape, branch(tape, bound, h, "act")?, "act.head")?;
    let val = bound.linear(tape, branch(tape, bound, h, "val")?, "val.head")?;
    Ok((act, val))
}

/// Stacks feature vectors into an n×D batch.
pub fn batch_features<'a, I>(rows: I, dim: usize) -> Result<Array2<f64>>
where
    I: IntoIterator<Item = &'a [f64]>,
{
    let mut data = Vec::new();
    let mut n = 0;
    for row in rows {
        if row.len() != dim {
            return Err(Error::shape(
                "batch_features",
                format!("row of length {} where {dim} expected", row.len()),
            ));
        }
        data.extend_from_slice(row);
        n += 1;
    }
    Array2::from_shape_vec((n, dim), data).map_err(|e| Error::shape("batch_features", e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::numeric_gradient;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("ann{i}")).collect()
    }

    fn features(n: usize, d: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_simple_fn((n, d), || rng.random_range(-1.0..1.0))
    }

    fn mt(hidden: usize) -> Parameters {
        Parameters::init(
            ModelSpec::new(ModelKind::Multitask, 5, 6).with_hidden(hidden),
            ids(6),
            3,
        )
        .unwrap()
    }

    #[test]
    fn layout_shapes() {
        let p = mt(8);
        assert_eq!(p.get("trunk.w").unwrap().dim(), (5, 8));
        assert_eq!(p.get("act.head.w").unwrap().dim(), (8, 6));
        assert_eq!(p.get("val.head.b").unwrap().dim(), (1, 6));
        assert_eq!(p.spec.n_outputs(), 12);
        let oh = ModelSpec::new(ModelKind::OneHot, 5, 4);
        assert_eq!(oh.trunk_input(), 9);
        assert_eq!(oh.n_outputs(), 2);
        assert_eq!(ModelSpec::new(ModelKind::Baseline, 5, 0).n_outputs(), 16);
    }

    #[test]
    fn init_respects_fan_in_bound() {
        let p = mt(16);
        let w = p.get("act.hidden1.w").unwrap();
        assert!(w.iter().all(|v| v.abs() < 0.25));
        let t = p.get("trunk.b").unwrap();
        let bound = 1.0 / 5f64.sqrt();
        assert!(t.iter().all(|v| v.abs() < bound));
        assert!(t.iter().any(|v| v.abs() > 0.25));
    }

    #[test]
    fn zero_baseline_gives_uniform_softmax() {
        let p = Parameters::zeros(ModelSpec::new(ModelKind::Baseline, 3, 0), vec![]).unwrap();
        let tape = Tape::new();
        let b = p.bind(&tape);
        let logits = forward_baseline(&tape, &p, &b, &features(2, 3, 1), None).unwrap();
        let probs = tape.value(tape.softmax_rows(logits));
        assert_eq!(probs.dim(), (2, 16));
        assert!(probs.iter().all(|v| (v - 1.0 / 16.0).abs() < 1e-15));
    }

    #[test]
    fn eval_mode_is_deterministic_and_dropout_identity() {
        let p = Parameters::init(ModelSpec::new(ModelKind::Baseline, 4, 0).with_hidden(16), vec![], 9).unwrap();
        let x = features(3, 4, 2);
        let run = || {
            let tape = Tape::new();
            let b = p.bind(&tape);
            tape.value(forward_baseline(&tape, &p, &b, &x, None).unwrap())
        };
        let a = run();
        let b = run();
        assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert_eq!(dropout(&x, 0.2, None), x);
    }

    #[test]
    fn inverted_dropout_preserves_mean() {
        let x = Array2::from_elem((200, 50), 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let d = dropout(&x, 0.2, Some(&mut rng));
        let kept = d.iter().filter(|&&v| v > 0.0).count() as f64 / d.len() as f64;
        assert!((kept - 0.8).abs() < 0.02);
        assert!(d.iter().all(|&v| v == 0.0 || (v - 1.25).abs() < 1e-15));
        assert!((d.mean().unwrap() - 1.0).abs() < 0.03);
    }

    #[test]
    fn feature_dim_mismatch_errors() {
        let p = mt(4);
        let tape = Tape::new();
        let b = p.bind(&tape);
        assert!(forward_multitask(&tape, &p, &b, &features(2, 4, 0), &[0], None).is_err());
        assert!(forward_multitask(&tape, &p, &b, &features(2, 5, 0), &[6], None).is_err());
        assert!(forward_baseline(&tape, &p, &b, &features(2, 5, 0), None).is_err());
    }

    #[test]
    fn subset_heads_match_full_evaluation() {
        let p = mt(8);
        let x = features(4, 5, 7);
        let tape = Tape::new();
        let b = p.bind(&tape);
        let all: Vec<usize> = (0..6).collect();
        let (fa, fv) = forward_multitask(&tape, &p, &b, &x, &all, None).unwrap();
        assert_eq!(tape.shape(fa).1 + tape.shape(fv).1, 12);
        let (sa, sv) = forward_multitask(&tape, &p, &b, &x, &[3], None).unwrap();
        let (fa, fv, sa, sv) = (tape.value(fa), tape.value(fv), tape.value(sa), tape.value(sv));
        for r in 0..4 {
            assert_eq!(sa[(r, 0)], fa[(r, 3)]);
            assert_eq!(sv[(r, 0)], fv[(r, 3)]);
        }
    }

    #[test]
    fn head_gradient_reaches_only_its_path() {
        let p = mt(8);
        let tape = Tape::new();
        let b = p.bind(&tape);
        let (act, _) = forward_multitask(&tape, &p, &b, &features(3, 5, 1), &[1, 4], None).unwrap();
        let col = tape.select_cols(act, &[1]).unwrap();
        tape.backward(tape.sum(col)).unwrap();
        for (name, v) in p.names().iter().zip(&b.vars) {
            let g = tape.grad(*v);
            let touched = g.iter().any(|x| *x != 0.0);
            if name.starts_with("val.") {
                assert!(!touched, "{name}");
            } else if name.starts_with("act.head") {
                for (c, colg) in g.columns().into_iter().enumerate() {
                    assert_eq!(colg.iter().any(|x| *x != 0.0), c == 4, "{name} col {c}");
                }
            } else {
                assert!(touched, "{name}");
            }
        }
    }

    #[test]
    fn onehot_encoding_layout() {
        let x = features(1, 3, 0);
        let enc = onehot_input(&x, &[2], 4).unwrap();
        assert_eq!(enc.ncols(), 7);
        assert_eq!(enc.slice(s![0, 3..]).to_vec(), vec![0.0, 0.0, 1.0, 0.0]);
        assert!(onehot_input(&x, &[4], 4).is_err());
    }

    #[test]
    fn onehot_identity_changes_output() {
        let p = Parameters::init(ModelSpec::new(ModelKind::OneHot, 3, 4).with_hidden(16), ids(4), 5).unwrap();
        let x = features(2, 3, 8);
        let tape = Tape::new();
        let b = p.bind(&tape);
        let (a, v) = forward_onehot(&tape, &p, &b, &x, &[0, 3], None).unwrap();
        let (a2, v2) = forward_onehot(&tape, &p, &b, &x, &[1, 2], None).unwrap();
        assert_ne!(tape.value(a), tape.value(a2));
        assert_ne!(tape.value(v), tape.value(v2));

        let z = Parameters::zeros(p.spec.clone(), ids(4)).unwrap();
        let bz = z.bind(&tape);
        let (a, v) = forward_onehot(&tape, &z, &bz, &x, &[0, 3], None).unwrap();
        assert!(tape.value(a).iter().chain(tape.value(v).iter()).all(|&o| o == 0.0));
    }

    #[test]
    fn checkpoint_round_trips_bit_exactly() {
        for p in [
            mt(8),
            Parameters::init(ModelSpec::new(ModelKind::Baseline, 4, 0).with_hidden(8), vec![], 1).unwrap(),
            Parameters::init(ModelSpec::new(ModelKind::OneHot, 3, 2).with_hidden(8), ids(2), 2).unwrap(),
        ] {
            let bytes = p.to_bytes();
            let back = Parameters::from_bytes(&bytes).unwrap();
            assert_eq!(back.to_bytes(), bytes);
            assert_eq!(back, p);
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let p = mt(4);
        p.save(&path).unwrap();
        assert_eq!(Parameters::load(&path).unwrap(), p);
    }

    #[test]
    fn corrupt_checkpoints_rejected() {
        let bytes = mt(4).to_bytes();
        assert!(Parameters::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        assert!(Parameters::from_bytes(b"nonsense").is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Parameters::from_bytes(&extra).is_err());
    }

    #[test]
    fn baseline_weight_gradient_matches_differences() {
        let p = Parameters::init(ModelSpec::new(ModelKind::Baseline, 3, 0).with_hidden(6), vec![], 11).unwrap();
        let x = features(2, 3, 3);
        let loss = |params: &Parameters| {
            let tape = Tape::new();
            let b = params.bind(&tape);
            let logits = forward_baseline(&tape, params, &b, &x, None).unwrap();
            let sm = tape.softmax_rows(logits);
            let picked = tape.gather(sm, &[(0, 3), (1, 9)]).unwrap();
            let l = tape.neg(tape.sum(tape.log(picked)));
            (tape, b, l)
        };
        let (tape, b, l) = loss(&p);
        tape.backward(l).unwrap();
        let analytic = tape.grad(b.var("trunk.w"));
        let w0 = p.get("trunk.w").unwrap().clone();
        let numeric = numeric_gradient(&w0, 1e-6, |w| {
            let mut q = p.clone();
            *q.get_mut("trunk.w").unwrap() = w.clone();
            let (tape, _, l) = loss(&q);
            tape.scalar_value(l)
        });
        for (a, n) in analytic.iter().zip(numeric.iter()) {
            assert!((a - n).abs() < 1e-6 * (1.0 + n.abs()), "{a} vs {n}");
        }
    }

    #[test]
    fn sgd_step_moves_against_gradient() {
        let mut p = mt(4);
        let before = p.clone();
        let tape = Tape::new();
        let b = p.bind(&tape);
        let (a, _) = forward_multitask(&tape, &p, &b, &features(2, 5, 0), &[0], None).unwrap();
        tape.backward(tape.sum(a)).unwrap();
        p.sgd_step(&tape, &b, 0.0).unwrap();
        assert_eq!(p, before);
        p.sgd_step(&tape, &b, 0.1).unwrap();
        let g = tape.grad(b.var("act.head.b"));
        let moved = p.get("act.head.b").unwrap() - before.get("act.head.b").unwrap();
        assert!((moved + g * 0.1).iter().all(|v| v.abs() < 1e-15));
        assert_eq!(
            p.get("act.head.w").unwrap().column(1),
            before.get("act.head.w").unwrap().column(1)
        );
    }
}
