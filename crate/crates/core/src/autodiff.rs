//! Reverse-mode differentiation over dense 2D tensors.
//!
//! Every value on a [`Tape`] is an `Array2<f64>` (scalars are 1×1). Operations
//! are evaluated eagerly and recorded in creation order, which is already a
//! topological order, so [`Tape::backward`] walks the records once in reverse.
//!
//! Broadcasting is limited to a 1×1 operand applied across a tensor
//! (`*_scalar` ops). Row broadcasts such as biases are written as a matmul
//! with a column of ones.
//!
//! Gradients accumulate: calling `backward` twice without
//! [`Tape::zero_grad`] adds the second pass onto the first.

use std::cell::RefCell;
use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{Array2, Axis, Zip};

use crate::error::{Error, Result};

pub type Tensor = Array2<f64>;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    idx: usize,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    MatMul(usize, usize),
    Transpose(usize),
    Reshape(usize),
    Sigmoid(usize),
    Relu(usize),
    Exp(usize),
    Log(usize),
    Sqrt(usize),
    Sum(usize),
    Mean(usize),
    Variance(usize),
    Clamp { x: usize, lo: f64, hi: f64 },
    Scale(usize, f64),
    Shift(usize),
    AddScalar(usize, usize),
    MulScalar(usize, usize),
    DivScalar(usize, usize),
    SoftmaxRows(usize),
    SelectCols(usize, Vec<usize>),
    Gather(usize, Vec<(usize, usize)>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recording of a computation, used to run one reverse pass.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: RefCell<Vec<Node>>,
    grads: RefCell<Vec<Option<Tensor>>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.dim(), b.dim())));
    }
    Ok(())
}

fn is_scalar(t: &Tensor) -> bool {
    t.dim() == (1, 1)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: RefCell::new(Vec::new()),
            grads: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn check(&self, v: Var) -> usize {
        assert_eq!(v.tape, self.id, "variable recorded on a different tape");
        v.idx
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self.id,
            idx: nodes.len() - 1,
        }
    }

    fn needs(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&self, value: f64) -> Var {
        self.constant(Array2::from_elem((1, 1), value))
    }

    /// n×1 constant column.
    pub fn column(&self, values: &[f64]) -> Var {
        self.constant(Array2::from_shape_vec((values.len(), 1), values.to_vec()).unwrap())
    }

    pub fn value(&self, v: Var) -> Tensor {
        let i = self.check(v);
        self.nodes.borrow()[i].value.clone()
    }

    pub fn with_value<R>(&self, v: Var, f: impl FnOnce(&Tensor) -> R) -> R {
        let i = self.check(v);
        f(&self.nodes.borrow()[i].value)
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.with_value(v, |t| t.dim())
    }

    /// Value of a 1×1 variable.
    pub fn scalar_value(&self, v: Var) -> f64 {
        self.with_value(v, |t| {
            assert!(is_scalar(t), "scalar_value on {:?}", t.dim());
            t[[0, 0]]
        })
    }

    fn unary(&self, x: Var, f: impl FnOnce(&Tensor) -> Tensor, op: impl FnOnce(usize) -> Op) -> Var {
        let i = self.check(x);
        let value = f(&self.nodes.borrow()[i].value);
        let rg = self.needs(&[i]);
        self.push(value, op(i), rg)
    }

    fn binary_elementwise(
        &self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: impl FnOnce(usize, usize) -> Op,
    ) -> Result<Var> {
        let (ia, ib) = (self.check(a), self.check(b));
        let value = {
            let nodes = self.nodes.borrow();
            let (va, vb) = (&nodes[ia].value, &nodes[ib].value);
            same_shape(name, va, vb)?;
            Zip::from(va).and(vb).map_collect(|&x, &y| f(x, y))
        };
        let rg = self.needs(&[ia, ib]);
        Ok(self.push(value, op(ia, ib), rg))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary_elementwise("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary_elementwise("sub", a, b, |x, y| x - y, Op::Sub)
    }

    /// Elementwise product.
    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary_elementwise("mul", a, b, |x, y| x * y, Op::Mul)
    }

    /// Elementwise quotient.
    pub fn div(&self, a: Var, b: Var) -> Result<Var> {
        self.binary_elementwise("div", a, b, |x, y| x / y, Op::Div)
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a), self.check(b));
        let value = {
            let nodes = self.nodes.borrow();
            let (va, vb) = (&nodes[ia].value, &nodes[ib].value);
            if va.ncols() != vb.nrows() {
                return Err(Error::shape("matmul", format!("{:?} x {:?}", va.dim(), vb.dim())));
            }
            va.dot(vb)
        };
        let rg = self.needs(&[ia, ib]);
        Ok(self.push(value, Op::MatMul(ia, ib), rg))
    }

    pub fn transpose(&self, x: Var) -> Var {
        self.unary(x, |t| t.t().to_owned(), Op::Transpose)
    }

    /// Row-major reshape.
    pub fn reshape(&self, x: Var, rows: usize, cols: usize) -> Result<Var> {
        let (r, c) = self.shape(x);
        if r * c != rows * cols {
            return Err(Error::shape("reshape", format!("{:?} -> {:?}", (r, c), (rows, cols))));
        }
        Ok(self.unary(
            x,
            |t| {
                let flat: Vec<f64> = t.iter().copied().collect();
                Array2::from_shape_vec((rows, cols), flat).unwrap()
            },
            Op::Reshape,
        ))
    }

    pub fn sigmoid(&self, x: Var) -> Var {
        self.unary(x, |t| t.mapv(sigmoid), Op::Sigmoid)
    }

    pub fn relu(&self, x: Var) -> Var {
        self.unary(x, |t| t.mapv(|v| if v > 0.0 { v } else { 0.0 }), Op::Relu)
    }

    pub fn exp(&self, x: Var) -> Var {
        self.unary(x, |t| t.mapv(f64::exp), Op::Exp)
    }

    pub fn log(&self, x: Var) -> Var {
        self.unary(x, |t| t.mapv(f64::ln), Op::Log)
    }

    /// Square root; the pullback at an exact zero is taken as 0.
    pub fn sqrt(&self, x: Var) -> Var {
        self.unary(x, |t| t.mapv(f64::sqrt), Op::Sqrt)
    }

    /// Sum of all elements as a 1×1 value.
    pub fn sum(&self, x: Var) -> Var {
        self.unary(x, |t| Array2::from_elem((1, 1), t.sum()), Op::Sum)
    }

    pub fn mean(&self, x: Var) -> Var {
        self.unary(x, |t| Array2::from_elem((1, 1), t.sum() / t.len() as f64), Op::Mean)
    }

    /// Population variance of all elements.
    pub fn variance(&self, x: Var) -> Var {
        self.unary(
            x,
            |t| {
                let n = t.len() as f64;
                let m = t.sum() / n;
                Array2::from_elem((1, 1), t.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n)
            },
            Op::Variance,
        )
    }

    /// Clamp to `[lo, hi]`; gradient passes through inside the interval and is
    /// zero outside it.
    pub fn clamp(&self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(x, |t| t.mapv(|v| v.clamp(lo, hi)), |x| Op::Clamp { x, lo, hi })
    }

    /// Multiply by a constant.
    pub fn scale(&self, x: Var, c: f64) -> Var {
        self.unary(x, |t| t * c, |i| Op::Scale(i, c))
    }

    pub fn neg(&self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    /// Add a constant to every element.
    pub fn shift(&self, x: Var, c: f64) -> Var {
        self.unary(x, |t| t + c, Op::Shift)
    }

    fn scalar_broadcast(
        &self,
        name: &'static str,
        x: Var,
        s: Var,
        f: impl Fn(f64, f64) -> f64,
        op: impl FnOnce(usize, usize) -> Op,
    ) -> Result<Var> {
        let (ix, is) = (self.check(x), self.check(s));
        let value = {
            let nodes = self.nodes.borrow();
            let sv = &nodes[is].value;
            if !is_scalar(sv) {
                return Err(Error::shape(name, format!("expected 1x1 operand, got {:?}", sv.dim())));
            }
            let k = sv[[0, 0]];
            nodes[ix].value.mapv(|v| f(v, k))
        };
        let rg = self.needs(&[ix, is]);
        Ok(self.push(value, op(ix, is), rg))
    }

    /// `x + s` with `s` a 1×1 variable.
    pub fn add_scalar(&self, x: Var, s: Var) -> Result<Var> {
        self.scalar_broadcast("add_scalar", x, s, |v, k| v + k, Op::AddScalar)
    }

    /// `x - s` with `s` a 1×1 variable.
    pub fn sub_scalar(&self, x: Var, s: Var) -> Result<Var> {
        let neg = self.neg(s);
        self.add_scalar(x, neg)
    }

    pub fn mul_scalar(&self, x: Var, s: Var) -> Result<Var> {
        self.scalar_broadcast("mul_scalar", x, s, |v, k| v * k, Op::MulScalar)
    }

    pub fn div_scalar(&self, x: Var, s: Var) -> Result<Var> {
        self.scalar_broadcast("div_scalar", x, s, |v, k| v / k, Op::DivScalar)
    }

    /// Softmax applied independently to each row.
    pub fn softmax_rows(&self, x: Var) -> Var {
        self.unary(
            x,
            |t| {
                let mut out = t.clone();
                for mut row in out.rows_mut() {
                    let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                    row.mapv_inplace(|v| (v - m).exp());
                    let z = row.sum();
                    row /= z;
                }
                out
            },
            Op::SoftmaxRows,
        )
    }

    /// Columns `cols` of `x`, in the given order.
    pub fn select_cols(&self, x: Var, cols: &[usize]) -> Result<Var> {
        let (_, c) = self.shape(x);
        if let Some(bad) = cols.iter().find(|&&j| j >= c) {
            return Err(Error::shape("select_cols", format!("column {bad} out of {c}")));
        }
        let owned = cols.to_vec();
        Ok(self.unary(x, |t| t.select(Axis(1), cols), move |i| Op::SelectCols(i, owned)))
    }

    /// Entries `(row, col)` of `x` stacked into an n×1 column.
    pub fn gather(&self, x: Var, entries: &[(usize, usize)]) -> Result<Var> {
        let (r, c) = self.shape(x);
        if let Some(bad) = entries.iter().find(|&&(i, j)| i >= r || j >= c) {
            return Err(Error::shape("gather", format!("entry {bad:?} out of {:?}", (r, c))));
        }
        let entries = entries.to_vec();
        let vals = self.with_value(x, |t| entries.iter().map(|&(i, j)| t[[i, j]]).collect::<Vec<_>>());
        Ok(self.unary(
            x,
            move |_| Array2::from_shape_vec((vals.len(), 1), vals).unwrap(),
            move |i| Op::Gather(i, entries),
        ))
    }

    /// `x·w + 1·b` for a row-vector bias `b` of shape 1×out.
    pub fn linear(&self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        let ones = self.constant(Array2::ones((self.shape(x).0, 1)));
        let bias = self.matmul(ones, b)?;
        self.add(xw, bias)
    }

    /// Clears accumulated gradients.
    pub fn zero_grad(&self) {
        self.grads.borrow_mut().clear();
    }

    /// Accumulated gradient of the last backward roots with respect to `v`;
    /// zeros when `v` was not reached.
    pub fn grad(&self, v: Var) -> Tensor {
        let i = self.check(v);
        if let Some(Some(g)) = self.grads.borrow().get(i) {
            return g.clone();
        }
        Array2::zeros(self.shape(v))
    }

    /// Reverse pass from a 1×1 root, accumulating into the tape's gradients.
    pub fn backward(&self, root: Var) -> Result<()> {
        let r = self.check(root);
        let nodes = self.nodes.borrow();
        if !is_scalar(&nodes[r].value) {
            return Err(Error::shape(
                "backward",
                format!("root must be 1x1, got {:?}", nodes[r].value.dim()),
            ));
        }
        let mut local: Vec<Option<Tensor>> = vec![None; r + 1];
        local[r] = Some(Array2::ones((1, 1)));
        for i in (0..=r).rev() {
            if !nodes[i].requires_grad {
                continue;
            }
            let Some(g) = local[i].take() else { continue };
            pullback(&nodes, i, &g, &mut local);
            local[i] = Some(g);
        }
        let mut grads = self.grads.borrow_mut();
        if grads.len() < nodes.len() {
            grads.resize(nodes.len(), None);
        }
        for (i, g) in local.into_iter().enumerate() {
            if let Some(g) = g {
                if !nodes[i].requires_grad {
                    continue;
                }
                match &mut grads[i] {
                    Some(acc) => *acc += &g,
                    slot => *slot = Some(g),
                }
            }
        }
        Ok(())
    }
}

fn accumulate(nodes: &[Node], local: &mut [Option<Tensor>], i: usize, g: Tensor) {
    if !nodes[i].requires_grad {
        return;
    }
    match &mut local[i] {
        Some(acc) => *acc += &g,
        slot => *slot = Some(g),
    }
}

fn pullback(nodes: &[Node], i: usize, g: &Tensor, local: &mut [Option<Tensor>]) {
    let out = &nodes[i].value;
    let val = |j: usize| &nodes[j].value;
    match &nodes[i].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate(nodes, local, *a, g.clone());
            accumulate(nodes, local, *b, g.clone());
        }
        Op::Sub(a, b) => {
            accumulate(nodes, local, *a, g.clone());
            accumulate(nodes, local, *b, -g);
        }
        Op::Mul(a, b) => {
            accumulate(nodes, local, *a, g * val(*b));
            accumulate(nodes, local, *b, g * val(*a));
        }
        Op::Div(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            accumulate(nodes, local, *a, g / vb);
            let gb = Zip::from(g).and(va).and(vb).map_collect(|&g, &x, &y| -g * x / (y * y));
            accumulate(nodes, local, *b, gb);
        }
        Op::MatMul(a, b) => {
            if nodes[*a].requires_grad {
                accumulate(nodes, local, *a, g.dot(&val(*b).t()));
            }
            if nodes[*b].requires_grad {
                accumulate(nodes, local, *b, val(*a).t().dot(g));
            }
        }
        Op::Transpose(x) => accumulate(nodes, local, *x, g.t().to_owned()),
        Op::Reshape(x) => {
            let flat: Vec<f64> = g.iter().copied().collect();
            accumulate(nodes, local, *x, Array2::from_shape_vec(val(*x).dim(), flat).unwrap());
        }
        Op::Sigmoid(x) => accumulate(
            nodes,
            local,
            *x,
            Zip::from(g).and(out).map_collect(|&g, &y| g * y * (1.0 - y)),
        ),
        Op::Relu(x) => accumulate(
            nodes,
            local,
            *x,
            Zip::from(g)
                .and(val(*x))
                .map_collect(|&g, &v| if v > 0.0 { g } else { 0.0 }),
        ),
        Op::Exp(x) => accumulate(nodes, local, *x, g * out),
        Op::Log(x) => accumulate(nodes, local, *x, g / val(*x)),
        Op::Sqrt(x) => accumulate(
            nodes,
            local,
            *x,
            Zip::from(g)
                .and(out)
                .map_collect(|&g, &y| if y > 0.0 { g / (2.0 * y) } else { 0.0 }),
        ),
        Op::Sum(x) => accumulate(nodes, local, *x, Array2::from_elem(val(*x).dim(), g[[0, 0]])),
        Op::Mean(x) => {
            let n = val(*x).len() as f64;
            accumulate(nodes, local, *x, Array2::from_elem(val(*x).dim(), g[[0, 0]] / n))
        }
        Op::Variance(x) => {
            let v = val(*x);
            let n = v.len() as f64;
            let m = v.sum() / n;
            let k = 2.0 * g[[0, 0]] / n;
            accumulate(nodes, local, *x, v.mapv(|e| k * (e - m)))
        }
        Op::Clamp { x, lo, hi } => accumulate(
            nodes,
            local,
            *x,
            Zip::from(g)
                .and(val(*x))
                .map_collect(|&g, &v| if v >= *lo && v <= *hi { g } else { 0.0 }),
        ),
        Op::Scale(x, c) => accumulate(nodes, local, *x, g * *c),
        Op::Shift(x) => accumulate(nodes, local, *x, g.clone()),
        Op::AddScalar(x, s) => {
            accumulate(nodes, local, *x, g.clone());
            accumulate(nodes, local, *s, Array2::from_elem((1, 1), g.sum()));
        }
        Op::MulScalar(x, s) => {
            let k = val(*s)[[0, 0]];
            accumulate(nodes, local, *x, g * k);
            let gs = (g * val(*x)).sum();
            accumulate(nodes, local, *s, Array2::from_elem((1, 1), gs));
        }
        Op::DivScalar(x, s) => {
            let k = val(*s)[[0, 0]];
            accumulate(nodes, local, *x, g / k);
            let gs = -(g * val(*x)).sum() / (k * k);
            accumulate(nodes, local, *s, Array2::from_elem((1, 1), gs));
        }
        Op::SoftmaxRows(x) => {
            let mut gx = Array2::zeros(out.dim());
            for ((mut gr, yr), gor) in gx.rows_mut().into_iter().zip(out.rows()).zip(g.rows()) {
                let dot: f64 = yr.iter().zip(gor.iter()).map(|(y, g)| y * g).sum();
                Zip::from(&mut gr)
                    .and(&yr)
                    .and(&gor)
                    .for_each(|o, &y, &g| *o = y * (g - dot));
            }
            accumulate(nodes, local, *x, gx);
        }
        Op::SelectCols(x, cols) => {
            let mut gx = Array2::zeros(val(*x).dim());
            for (k, &j) in cols.iter().enumerate() {
                let mut dst = gx.column_mut(j);
                dst += &g.column(k);
            }
            accumulate(nodes, local, *x, gx);
        }
        Op::Gather(x, entries) => {
            let mut gx = Array2::zeros(val(*x).dim());
            for (k, &(r, c)) in entries.iter().enumerate() {
                gx[[r, c]] += g[[k, 0]];
            }
            accumulate(nodes, local, *x, gx);
        }
    }
}

/// Central finite-difference gradient of `f` at `x`.
pub fn numeric_gradient(x: &Tensor, h: f64, mut f: impl FnMut(&Tensor) -> f64) -> Tensor {
    let mut probe = x.clone();
    let mut out = Array2::zeros(x.dim());
    for idx in 0..x.len() {
        let (r, c) = (idx / x.ncols(), idx % x.ncols());
        let orig = probe[[r, c]];
        probe[[r, c]] = orig + h;
        let fp = f(&probe);
        probe[[r, c]] = orig - h;
        let fm = f(&probe);
        probe[[r, c]] = orig;
        out[[r, c]] = (fp - fm) / (2.0 * h);
    }
    out
}

/// Relative disagreement used by the gradient checks:
/// `|a - b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn max_rel(a: &Tensor, b: &Tensor) -> f64 {
        a.iter()
            .zip(b.iter())
            .map(|(x, y)| relative_error(*x, *y, 1e-6))
            .fold(0.0, f64::max)
    }

    #[test]
    fn sigmoid_derivative_at_zero() {
        let t = Tape::new();
        let x = t.param(array![[0.0]]);
        let y = t.sigmoid(x);
        t.backward(y).unwrap();
        assert!((t.grad(x)[[0, 0]] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn sum_gradient_is_ones() {
        let t = Tape::new();
        let x = t.param(array![[1.0, -2.0], [3.0, 4.0]]);
        let s = t.sum(x);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x), Array2::<f64>::ones((2, 2)));
    }

    #[test]
    fn constant_root_has_zero_gradient() {
        let t = Tape::new();
        let x = t.param(array![[1.0, 2.0]]);
        let c = t.constant(array![[5.0, 6.0]]);
        let s = t.sum(c);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x), Array2::<f64>::zeros((1, 2)));
        assert_eq!(t.grad(c), Array2::<f64>::zeros((1, 2)));
    }

    #[test]
    fn backward_accumulates() {
        let t = Tape::new();
        let x = t.param(array![[3.0]]);
        let y = t.mul(x, x).unwrap();
        t.backward(y).unwrap();
        t.backward(y).unwrap();
        assert_eq!(t.grad(x)[[0, 0]], 12.0);
        t.zero_grad();
        t.backward(y).unwrap();
        assert_eq!(t.grad(x)[[0, 0]], 6.0);
    }

    #[test]
    fn shape_errors_at_record_time() {
        let t = Tape::new();
        let a = t.param(Array2::zeros((2, 3)));
        let b = t.param(Array2::zeros((2, 2)));
        assert!(t.add(a, b).is_err());
        assert!(t.matmul(a, b).is_err());
        assert!(t.mul_scalar(a, b).is_err());
        assert!(t.backward(a).is_err());
        assert!(t.select_cols(a, &[3]).is_err());
        assert!(t.gather(a, &[(2, 0)]).is_err());
    }

    #[test]
    fn clamp_passes_inside_only() {
        let t = Tape::new();
        let x = t.param(array![[-2.0, 0.5, 1.5]]);
        let y = t.clamp(x, -1.0, 1.0);
        let s = t.sum(y);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x), array![[0.0, 1.0, 0.0]]);
        assert_eq!(t.value(y), array![[-1.0, 0.5, 1.0]]);
    }

    #[test]
    fn sqrt_at_zero_has_zero_pullback() {
        let t = Tape::new();
        let x = t.param(array![[0.0, 4.0]]);
        let s = t.sum(t.sqrt(x));
        t.backward(s).unwrap();
        assert_eq!(t.grad(x), array![[0.0, 0.25]]);
    }

    /// Every primitive composed into one scalar, checked against central
    /// differences.
    #[test]
    fn composite_matches_finite_differences() {
        let a0 = array![[0.3, -0.7, 1.1], [0.2, 0.5, -0.4]];
        let b0 = array![[0.6, -0.1], [0.9, 0.4], [-0.3, 0.8]];
        let f = |tape: &Tape, a: Var, b: Var| -> Var {
            let m = tape.matmul(a, b).unwrap();
            let s = tape.sigmoid(m);
            let r = tape.relu(tape.shift(m, 0.1));
            let e = tape.exp(tape.scale(s, 0.5));
            let l = tape.log(tape.shift(e, 1.0));
            let p = tape.mul(l, r).unwrap();
            let q = tape.div(p, tape.shift(s, 1.0)).unwrap();
            let sm = tape.softmax_rows(tape.transpose(q));
            let v = tape.variance(a);
            let mean_b = tape.mean(b);
            let w = tape.mul_scalar(sm, v).unwrap();
            let w = tape.div_scalar(w, tape.shift(mean_b, 2.0)).unwrap();
            let w = tape.sub_scalar(w, mean_b).unwrap();
            let g = tape.gather(w, &[(0, 1), (1, 0), (1, 1)]).unwrap();
            let c = tape.select_cols(b, &[1, 0, 1]).unwrap();
            let c = tape.reshape(c, 1, 9).unwrap();
            let sq = tape.sqrt(tape.shift(tape.mul(c, c).unwrap(), 0.5));
            let cl = tape.clamp(a, -0.5, 0.6);
            let tot = tape.add(tape.sum(g), tape.sum(sq)).unwrap();
            let tot = tape.add(tot, tape.sum(cl)).unwrap();
            tape.sub(tot, tape.mean(a)).unwrap()
        };
        let tape = Tape::new();
        let a = tape.param(a0.clone());
        let b = tape.param(b0.clone());
        let out = f(&tape, a, b);
        tape.backward(out).unwrap();
        let eval = |av: &Tensor, bv: &Tensor| {
            let t = Tape::new();
            let (a, b) = (t.param(av.clone()), t.param(bv.clone()));
            let o = f(&t, a, b);
            t.scalar_value(o)
        };
        let na = numeric_gradient(&a0, 1e-5, |x| eval(x, &b0));
        let nb = numeric_gradient(&b0, 1e-5, |x| eval(&a0, x));
        assert!(max_rel(&tape.grad(a), &na) < 1e-6, "{:?} vs {na:?}", tape.grad(a));
        assert!(max_rel(&tape.grad(b), &nb) < 1e-6, "{:?} vs {nb:?}", tape.grad(b));
    }

    #[test]
    fn linear_layer_gradients() {
        let x0 = array![[1.0, 2.0], [-1.0, 0.5], [0.3, 0.3]];
        let w0 = array![[0.1, -0.2, 0.3], [0.4, 0.5, -0.6]];
        let b0 = array![[0.01, 0.02, 0.03]];
        let eval = |w: &Tensor, b: &Tensor| {
            let t = Tape::new();
            let x = t.constant(x0.clone());
            let (w, b) = (t.param(w.clone()), t.param(b.clone()));
            let y = t.linear(x, w, b).unwrap();
            let y = t.mul(y, y).unwrap();
            let s = t.sum(y);
            t.backward(s).unwrap();
            (t.scalar_value(s), t.grad(w), t.grad(b))
        };
        let (_, gw, gb) = eval(&w0, &b0);
        let nw = numeric_gradient(&w0, 1e-5, |w| eval(w, &b0).0);
        let nb = numeric_gradient(&b0, 1e-5, |b| eval(&w0, b).0);
        assert!(max_rel(&gw, &nw) < 1e-7);
        assert!(max_rel(&gb, &nb) < 1e-7);
    }
}
