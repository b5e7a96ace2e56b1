//! Gradient tape and differentiable primitives.
//!
//! A [`Tape`] records every primitive applied to its [`Var`]s. Calling
//! [`Tape::backward`] replays the record in reverse. Tapes are single-use and
//! single-threaded; all reductions run in a fixed order so identical inputs
//! give bit-identical values and gradients.
//!
//! Matrix primitives treat a tensor as `rows × cols` where `cols` is the
//! trailing extent.

use std::cell::{Cell, RefCell};

use crate::tensor::{matmul, matmul_nt, matmul_tn_acc};
use crate::Tensor;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    MatMul(usize, usize),
    MatMulNt(usize, usize),
    AddRow(usize, usize),
    MulRow(usize, usize),
    Gelu(usize),
    Tanh(usize),
    Exp(usize),
    Log(usize),
    SoftmaxRows(usize),
    LogSoftmaxRows(usize),
    LayerNormRows { a: usize, inv_std: Vec<f64> },
    GatherRows { table: usize, ids: Vec<usize> },
    ConcatRows(usize, usize),
    ConcatCols(Vec<usize>),
    SliceCols { a: usize, start: usize },
    SliceRows { a: usize, start: usize },
    WeightedRows { a: usize, weights: Vec<f64> },
    WeightedSum { a: usize, weights: Vec<f64> },
    Sum(usize),
    Mean(usize),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::MatMul(..) => "matmul",
            Op::MatMulNt(..) => "matmul_nt",
            Op::AddRow(..) => "add_row",
            Op::MulRow(..) => "mul_row",
            Op::Gelu(..) => "gelu",
            Op::Tanh(..) => "tanh",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::SoftmaxRows(..) => "softmax",
            Op::LogSoftmaxRows(..) => "log_softmax",
            Op::LayerNormRows { .. } => "layer_norm",
            Op::GatherRows { .. } => "embedding",
            Op::ConcatRows(..) => "concat_rows",
            Op::ConcatCols(..) => "concat_cols",
            Op::SliceCols { .. } => "slice_cols",
            Op::SliceRows { .. } => "slice_rows",
            Op::WeightedRows { .. } => "masked_mean",
            Op::WeightedSum { .. } => "weighted_sum",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records a computation for reverse-mode differentiation.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    poisoned: Cell<Option<&'static str>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var({}, {:?})", self.id, self.shape())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A differentiable input.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// A non-differentiable input.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Name of the first primitive that produced a non-finite value, if any.
    pub fn poisoned(&self) -> Option<&'static str> {
        self.poisoned.get()
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        if self.poisoned.get().is_none() && !value.is_finite() {
            self.poisoned.set(Some(op.name()));
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn needs(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    /// Reverse pass from a scalar `root`. Returns the gradient for every
    /// recorded node that requires one (`None` elsewhere).
    pub fn backward(&self, root: Var<'_>) -> Vec<Option<Vec<f64>>> {
        assert!(std::ptr::eq(root.tape, self), "root belongs to another tape");
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[root.id].value.len(), 1, "backward needs a scalar root");
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        if !nodes[root.id].requires_grad {
            return grads;
        }
        grads[root.id] = Some(vec![1.0]);
        for id in (0..=root.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backprop(&nodes, node, &g, &mut grads);
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(g);
            }
        }
        grads
    }

    /// Poisons the tape when a gradient goes non-finite.
    pub(crate) fn check_grads(&self, grads: &[Option<Vec<f64>>]) -> Option<&'static str> {
        let nodes = self.nodes.borrow();
        grads.iter().zip(nodes.iter()).find_map(|(g, n)| {
            g.as_ref()
                .filter(|g| g.iter().any(|v| !v.is_finite()))
                .map(|_| n.op.name())
        })
    }
}

fn acc<'g>(grads: &'g mut [Option<Vec<f64>>], nodes: &[Node], id: usize) -> Option<&'g mut [f64]> {
    if !nodes[id].requires_grad {
        return None;
    }
    let len = nodes[id].value.len();
    Some(grads[id].get_or_insert_with(|| vec![0.0; len]).as_mut_slice())
}

fn backprop(nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let out = &node.value;
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            for &i in [a, b].iter() {
                if let Some(ga) = acc(grads, nodes, *i) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
            }
        }
        Op::Sub(a, b) => {
            if let Some(ga) = acc(grads, nodes, *a) {
                ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
            }
            if let Some(gb) = acc(grads, nodes, *b) {
                gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y);
            }
        }
        Op::Mul(a, b) => {
            let (av, bv) = (nodes[*a].value.data(), nodes[*b].value.data());
            if let Some(ga) = acc(grads, nodes, *a) {
                for ((x, gi), bi) in ga.iter_mut().zip(g).zip(bv) {
                    *x += gi * bi;
                }
            }
            if let Some(gb) = acc(grads, nodes, *b) {
                for ((x, gi), ai) in gb.iter_mut().zip(g).zip(av) {
                    *x += gi * ai;
                }
            }
        }
        Op::Scale(a, f) => {
            if let Some(ga) = acc(grads, nodes, *a) {
                ga.iter_mut().zip(g).for_each(|(x, y)| *x += f * y);
            }
        }
        Op::AddScalar(a) => {
            if let Some(ga) = acc(grads, nodes, *a) {
                ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
            }
        }
        Op::MatMul(a, b) => {
            let (at, bt) = (&nodes[*a].value, &nodes[*b].value);
            let (n, k, m) = (at.rows(), at.cols(), bt.cols());
            if let Some(ga) = acc(grads, nodes, *a) {
                // dA = G · Bᵀ
                let d = matmul_nt(g, bt.data(), n, m, k);
                ga.iter_mut().zip(&d).for_each(|(x, y)| *x += y);
            }
            if let Some(gb) = acc(grads, nodes, *b) {
                // dB = Aᵀ · G
                matmul_tn_acc(gb, at.data(), g, n, k, m);
            }
        }
        Op::MatMulNt(a, b) => {
            // C = A · Bᵀ with A n×k, B m×k
            let (at, bt) = (&nodes[*a].value, &nodes[*b].value);
            let (n, k, m) = (at.rows(), at.cols(), bt.rows());
            if let Some(ga) = acc(grads, nodes, *a) {
                // dA = G · B
                let d = matmul(g, bt.data(), n, m, k);
                ga.iter_mut().zip(&d).for_each(|(x, y)| *x += y);
            }
            if let Some(gb) = acc(grads, nodes, *b) {
                // dB = Gᵀ · A
                matmul_tn_acc(gb, g, at.data(), n, m, k);
            }
        }
        Op::AddRow(a, b) => {
            let m = out.cols();
            if let Some(ga) = acc(grads, nodes, *a) {
                ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
            }
            if let Some(gb) = acc(grads, nodes, *b) {
                for row in g.chunks(m) {
                    gb.iter_mut().zip(row).for_each(|(x, y)| *x += y);
                }
            }
        }
        Op::MulRow(a, b) => {
            let m = out.cols();
            let (av, bv) = (nodes[*a].value.data(), nodes[*b].value.data());
            if let Some(ga) = acc(grads, nodes, *a) {
                for (grow, xrow) in g.chunks(m).zip(ga.chunks_mut(m)) {
                    for ((x, gi), bi) in xrow.iter_mut().zip(grow).zip(bv) {
                        *x += gi * bi;
                    }
                }
            }
            if let Some(gb) = acc(grads, nodes, *b) {
                for (grow, arow) in g.chunks(m).zip(av.chunks(m)) {
                    for ((x, gi), ai) in gb.iter_mut().zip(grow).zip(arow) {
                        *x += gi * ai;
                    }
                }
            }
        }
        Op::Gelu(a) => {
            let av = nodes[*a].value.data();
            if let Some(ga) = acc(grads, nodes, *a) {
                for ((x, gi), &v) in ga.iter_mut().zip(g).zip(av) {
                    let u = GELU_C * (v + GELU_A * v * v * v);
                    let t = u.tanh();
                    let du = GELU_C * (1.0 + 3.0 * GELU_A * v * v);
                    *x += gi * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du);
                }
            }
        }
        Op::Tanh(a) => {
            if let Some(ga) = acc(grads, nodes, *a) {
                for ((x, gi), t) in ga.iter_mut().zip(g).zip(out.data()) {
                    *x += gi * (1.0 - t * t);
                }
            }
        }
        Op::Exp(a) => {
            if let Some(ga) = acc(grads, nodes, *a) {
                for ((x, gi), e) in ga.iter_mut().zip(g).zip(out.data()) {
                    *x += gi * e;
                }
            }
        }
        Op::Log(a) => {
            let av = nodes[*a].value.data();
            if let Some(ga) = acc(grads, nodes, *a) {
                for ((x, gi), v) in ga.iter_mut().zip(g).zip(av) {
                    *x += gi / v;
                }
            }
        }
        Op::SoftmaxRows(a) => {
            let m = out.cols();
            if let Some(ga) = acc(grads, nodes, *a) {
                for ((yrow, grow), xrow) in out.data().chunks(m).zip(g.chunks(m)).zip(ga.chunks_mut(m)) {
                    let dot: f64 = yrow.iter().zip(grow).map(|(y, g)| y * g).sum();
                    for ((x, y), gi) in xrow.iter_mut().zip(yrow).zip(grow) {
                        *x += y * (gi - dot);
                    }
                }
            }
        }
        Op::LogSoftmaxRows(a) => {
            let m = out.cols();
            if let Some(ga) = acc(grads, nodes, *a) {
                for ((yrow, grow), xrow) in out.data().chunks(m).zip(g.chunks(m)).zip(ga.chunks_mut(m)) {
                    let total: f64 = grow.iter().sum();
                    for ((x, y), gi) in xrow.iter_mut().zip(yrow).zip(grow) {
                        *x += gi - y.exp() * total;
                    }
                }
            }
        }
        Op::LayerNormRows { a, inv_std } => {
            let m = out.cols();
            if let Some(ga) = acc(grads, nodes, *a) {
                for (r, ((yrow, grow), xrow)) in out
                    .data()
                    .chunks(m)
                    .zip(g.chunks(m))
                    .zip(ga.chunks_mut(m))
                    .enumerate()
                {
                    let mg = grow.iter().sum::<f64>() / m as f64;
                    let mgy = yrow.iter().zip(grow).map(|(y, g)| y * g).sum::<f64>() / m as f64;
                    for ((x, y), gi) in xrow.iter_mut().zip(yrow).zip(grow) {
                        *x += inv_std[r] * (gi - mg - y * mgy);
                    }
                }
            }
        }
        Op::GatherRows { table, ids } => {
            let m = out.cols();
            if let Some(gt) = acc(grads, nodes, *table) {
                for (grow, &id) in g.chunks(m).zip(ids) {
                    gt[id * m..(id + 1) * m]
                        .iter_mut()
                        .zip(grow)
                        .for_each(|(x, y)| *x += y);
                }
            }
        }
        Op::ConcatRows(a, b) => {
            let split = nodes[*a].value.len();
            if let Some(ga) = acc(grads, nodes, *a) {
                ga.iter_mut().zip(&g[..split]).for_each(|(x, y)| *x += y);
            }
            if let Some(gb) = acc(grads, nodes, *b) {
                gb.iter_mut().zip(&g[split..]).for_each(|(x, y)| *x += y);
            }
        }
        Op::ConcatCols(parts) => {
            let m = out.cols();
            let mut offset = 0;
            for &p in parts {
                let w = nodes[p].value.cols();
                if let Some(gp) = acc(grads, nodes, p) {
                    for (grow, prow) in g.chunks(m).zip(gp.chunks_mut(w)) {
                        prow.iter_mut()
                            .zip(&grow[offset..offset + w])
                            .for_each(|(x, y)| *x += y);
                    }
                }
                offset += w;
            }
        }
        Op::SliceCols { a, start } => {
            let w = out.cols();
            let m = nodes[*a].value.cols();
            if let Some(ga) = acc(grads, nodes, *a) {
                for (grow, arow) in g.chunks(w).zip(ga.chunks_mut(m)) {
                    arow[*start..start + w]
                        .iter_mut()
                        .zip(grow)
                        .for_each(|(x, y)| *x += y);
                }
            }
        }
        Op::SliceRows { a, start } => {
            let m = out.cols();
            if let Some(ga) = acc(grads, nodes, *a) {
                ga[start * m..start * m + g.len()]
                    .iter_mut()
                    .zip(g)
                    .for_each(|(x, y)| *x += y);
            }
        }
        Op::WeightedRows { a, weights } => {
            let m = out.cols();
            if let Some(ga) = acc(grads, nodes, *a) {
                for (arow, w) in ga.chunks_mut(m).zip(weights) {
                    if *w != 0.0 {
                        arow.iter_mut().zip(g).for_each(|(x, y)| *x += w * y);
                    }
                }
            }
        }
        Op::WeightedSum { a, weights } => {
            if let Some(ga) = acc(grads, nodes, *a) {
                ga.iter_mut().zip(weights).for_each(|(x, w)| *x += g[0] * w);
            }
        }
        Op::Sum(a) => {
            if let Some(ga) = acc(grads, nodes, *a) {
                ga.iter_mut().for_each(|x| *x += g[0]);
            }
        }
        Op::Mean(a) => {
            let n = nodes[*a].value.len() as f64;
            if let Some(ga) = acc(grads, nodes, *a) {
                ga.iter_mut().for_each(|x| *x += g[0] / n);
            }
        }
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Tensor {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn rows(&self) -> usize {
        self.tape.nodes.borrow()[self.id].value.rows()
    }

    pub fn cols(&self) -> usize {
        self.tape.nodes.borrow()[self.id].value.cols()
    }

    /// Scalar value; panics on non-scalars.
    pub fn item(&self) -> f64 {
        self.tape.nodes.borrow()[self.id]
            .value
            .item()
            .expect("item() on a non-scalar")
    }

    fn same_tape(&self, other: &Var<'t>) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "vars from different tapes"
        );
    }

    fn unary(&self, op: Op, f: impl FnOnce(&Tensor) -> Tensor) -> Var<'t> {
        let value = f(&self.tape.nodes.borrow()[self.id].value);
        let rg = self.tape.needs(&[self.id]);
        self.tape.push(value, op, rg)
    }

    fn binary(&self, other: &Var<'t>, op: Op, f: impl FnOnce(&Tensor, &Tensor) -> Tensor) -> Var<'t> {
        self.same_tape(other);
        let value = {
            let nodes = self.tape.nodes.borrow();
            f(&nodes[self.id].value, &nodes[other.id].value)
        };
        let rg = self.tape.needs(&[self.id, other.id]);
        self.tape.push(value, op, rg)
    }

    fn zip_with(a: &Tensor, b: &Tensor, what: &str, f: impl Fn(f64, f64) -> f64) -> Tensor {
        assert_eq!(a.shape(), b.shape(), "{what}: shape mismatch");
        Tensor::from_parts(
            a.shape().to_vec(),
            a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect(),
        )
    }

    fn map(a: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::from_parts(a.shape().to_vec(), a.data().iter().map(|&x| f(x)).collect())
    }

    pub fn add(&self, other: Var<'t>) -> Var<'t> {
        self.binary(&other, Op::Add(self.id, other.id), |a, b| {
            Self::zip_with(a, b, "add", |x, y| x + y)
        })
    }

    pub fn sub(&self, other: Var<'t>) -> Var<'t> {
        self.binary(&other, Op::Sub(self.id, other.id), |a, b| {
            Self::zip_with(a, b, "sub", |x, y| x - y)
        })
    }

    /// Element-wise product.
    pub fn mul(&self, other: Var<'t>) -> Var<'t> {
        self.binary(&other, Op::Mul(self.id, other.id), |a, b| {
            Self::zip_with(a, b, "mul", |x, y| x * y)
        })
    }

    pub fn square(&self) -> Var<'t> {
        self.mul(*self)
    }

    pub fn scale(&self, factor: f64) -> Var<'t> {
        self.unary(Op::Scale(self.id, factor), |a| Self::map(a, |x| x * factor))
    }

    pub fn add_scalar(&self, c: f64) -> Var<'t> {
        self.unary(Op::AddScalar(self.id), |a| Self::map(a, |x| x + c))
    }

    /// `self[n×k] · other[k×m]`
    pub fn matmul(&self, other: Var<'t>) -> Var<'t> {
        self.binary(&other, Op::MatMul(self.id, other.id), |a, b| {
            let (n, k, m) = (a.rows(), a.cols(), b.cols());
            assert_eq!(k, b.rows(), "matmul: inner extents {k} vs {}", b.rows());
            Tensor::from_parts(vec![n, m], matmul(a.data(), b.data(), n, k, m))
        })
    }

    /// `self[n×k] · other[m×k]ᵀ`
    pub fn matmul_nt(&self, other: Var<'t>) -> Var<'t> {
        self.binary(&other, Op::MatMulNt(self.id, other.id), |a, b| {
            let (n, k, m) = (a.rows(), a.cols(), b.rows());
            assert_eq!(k, b.cols(), "matmul_nt: inner extents {k} vs {}", b.cols());
            Tensor::from_parts(vec![n, m], matmul_nt(a.data(), b.data(), n, k, m))
        })
    }

    /// Adds a length-`cols` vector to every row.
    pub fn add_row(&self, row: Var<'t>) -> Var<'t> {
        self.binary(&row, Op::AddRow(self.id, row.id), |a, b| {
            let m = a.cols();
            assert_eq!(b.len(), m, "add_row: row length");
            let mut data = a.data().to_vec();
            for r in data.chunks_mut(m) {
                r.iter_mut().zip(b.data()).for_each(|(x, y)| *x += y);
            }
            Tensor::from_parts(a.shape().to_vec(), data)
        })
    }

    /// Multiplies every row element-wise by a length-`cols` vector.
    pub fn mul_row(&self, row: Var<'t>) -> Var<'t> {
        self.binary(&row, Op::MulRow(self.id, row.id), |a, b| {
            let m = a.cols();
            assert_eq!(b.len(), m, "mul_row: row length");
            let mut data = a.data().to_vec();
            for r in data.chunks_mut(m) {
                r.iter_mut().zip(b.data()).for_each(|(x, y)| *x *= y);
            }
            Tensor::from_parts(a.shape().to_vec(), data)
        })
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&self) -> Var<'t> {
        self.unary(Op::Gelu(self.id), |a| {
            Self::map(a, |x| 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()))
        })
    }

    pub fn tanh(&self) -> Var<'t> {
        self.unary(Op::Tanh(self.id), |a| Self::map(a, f64::tanh))
    }

    pub fn exp(&self) -> Var<'t> {
        self.unary(Op::Exp(self.id), |a| Self::map(a, f64::exp))
    }

    pub fn log(&self) -> Var<'t> {
        self.unary(Op::Log(self.id), |a| Self::map(a, f64::ln))
    }

    /// Row-wise softmax. Columns with `masked[j] == true` get exactly zero
    /// probability; a row with every column masked is all zeros.
    pub fn softmax_rows(&self, masked: Option<&[bool]>) -> Var<'t> {
        self.unary(Op::SoftmaxRows(self.id), |a| {
            let m = a.cols();
            if let Some(mask) = masked {
                assert_eq!(mask.len(), m, "softmax: mask length");
            }
            let keep = |j: usize| masked.is_none_or(|mk| !mk[j]);
            let mut data = vec![0.0; a.len()];
            for (xrow, yrow) in a.data().chunks(m).zip(data.chunks_mut(m)) {
                let mut max = f64::NEG_INFINITY;
                for (j, &x) in xrow.iter().enumerate() {
                    if keep(j) && x > max {
                        max = x;
                    }
                }
                if max == f64::NEG_INFINITY {
                    continue;
                }
                let mut total = 0.0;
                for (j, (&x, y)) in xrow.iter().zip(yrow.iter_mut()).enumerate() {
                    if keep(j) {
                        *y = (x - max).exp();
                        total += *y;
                    }
                }
                yrow.iter_mut().for_each(|y| *y /= total);
            }
            Tensor::from_parts(a.shape().to_vec(), data)
        })
    }

    pub fn log_softmax_rows(&self) -> Var<'t> {
        self.unary(Op::LogSoftmaxRows(self.id), |a| {
            let m = a.cols();
            let mut data = a.data().to_vec();
            for row in data.chunks_mut(m) {
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
                row.iter_mut().for_each(|x| *x -= lse);
            }
            Tensor::from_parts(a.shape().to_vec(), data)
        })
    }

    /// Row-wise normalization to zero mean and unit variance (no affine part).
    pub fn layer_norm_rows(&self, eps: f64) -> Var<'t> {
        let (value, inv_std) = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id].value;
            let m = a.cols();
            let mut data = a.data().to_vec();
            let mut inv_std = Vec::with_capacity(a.rows());
            for row in data.chunks_mut(m) {
                let mean = row.iter().sum::<f64>() / m as f64;
                let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / m as f64;
                let inv = 1.0 / (var + eps).sqrt();
                row.iter_mut().for_each(|x| *x = (*x - mean) * inv);
                inv_std.push(inv);
            }
            (Tensor::from_parts(a.shape().to_vec(), data), inv_std)
        };
        let rg = self.tape.needs(&[self.id]);
        self.tape.push(value, Op::LayerNormRows { a: self.id, inv_std }, rg)
    }

    /// Embedding lookup: output row `r` is row `ids[r]` of `self`.
    pub fn gather_rows(&self, ids: &[usize]) -> Var<'t> {
        assert!(!ids.is_empty(), "gather_rows: no ids");
        let value = {
            let nodes = self.tape.nodes.borrow();
            let t = &nodes[self.id].value;
            let m = t.cols();
            let mut data = Vec::with_capacity(ids.len() * m);
            for &id in ids {
                assert!(id < t.rows(), "gather_rows: id {id} out of range {}", t.rows());
                data.extend_from_slice(&t.data()[id * m..(id + 1) * m]);
            }
            Tensor::from_parts(vec![ids.len(), m], data)
        };
        let rg = self.tape.needs(&[self.id]);
        self.tape.push(
            value,
            Op::GatherRows {
                table: self.id,
                ids: ids.to_vec(),
            },
            rg,
        )
    }

    /// Stacks `self` above `other` (equal column counts).
    pub fn concat_rows(&self, other: Var<'t>) -> Var<'t> {
        self.binary(&other, Op::ConcatRows(self.id, other.id), |a, b| {
            assert_eq!(a.cols(), b.cols(), "concat_rows: column mismatch");
            let mut data = a.data().to_vec();
            data.extend_from_slice(b.data());
            Tensor::from_parts(vec![a.rows() + b.rows(), a.cols()], data)
        })
    }

    /// Joins parts side by side (equal row counts).
    pub fn concat_cols(parts: &[Var<'t>]) -> Var<'t> {
        assert!(!parts.is_empty(), "concat_cols: no parts");
        let tape = parts[0].tape;
        parts.iter().for_each(|p| parts[0].same_tape(p));
        let value = {
            let nodes = tape.nodes.borrow();
            let rows = nodes[parts[0].id].value.rows();
            let widths: Vec<usize> = parts.iter().map(|p| nodes[p.id].value.cols()).collect();
            let m: usize = widths.iter().sum();
            let mut data = Vec::with_capacity(rows * m);
            for r in 0..rows {
                for (p, &w) in parts.iter().zip(&widths) {
                    let t = &nodes[p.id].value;
                    assert_eq!(t.rows(), rows, "concat_cols: row mismatch");
                    data.extend_from_slice(&t.data()[r * w..(r + 1) * w]);
                }
            }
            Tensor::from_parts(vec![rows, m], data)
        };
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let rg = tape.needs(&ids);
        tape.push(value, Op::ConcatCols(ids), rg)
    }

    pub fn slice_cols(&self, start: usize, len: usize) -> Var<'t> {
        self.unary(Op::SliceCols { a: self.id, start }, |a| {
            let m = a.cols();
            assert!(len > 0 && start + len <= m, "slice_cols: {start}+{len} > {m}");
            let mut data = Vec::with_capacity(a.rows() * len);
            for row in a.data().chunks(m) {
                data.extend_from_slice(&row[start..start + len]);
            }
            Tensor::from_parts(vec![a.rows(), len], data)
        })
    }

    pub fn slice_rows(&self, start: usize, len: usize) -> Var<'t> {
        self.unary(Op::SliceRows { a: self.id, start }, |a| {
            let m = a.cols();
            assert!(len > 0 && start + len <= a.rows(), "slice_rows out of range");
            Tensor::from_parts(vec![len, m], a.data()[start * m..(start + len) * m].to_vec())
        })
    }

    /// `1×cols` row `Σ_r weights[r]·self[r]`; with weights `1/k` on `k`
    /// selected rows this is a masked mean.
    pub fn weighted_rows(&self, weights: &[f64]) -> Var<'t> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id].value;
            assert_eq!(weights.len(), a.rows(), "weighted_rows: weight count");
            let m = a.cols();
            let mut data = vec![0.0; m];
            for (row, &w) in a.data().chunks(m).zip(weights) {
                if w != 0.0 {
                    data.iter_mut().zip(row).for_each(|(x, y)| *x += w * y);
                }
            }
            Tensor::from_parts(vec![1, m], data)
        };
        let rg = self.tape.needs(&[self.id]);
        self.tape.push(
            value,
            Op::WeightedRows {
                a: self.id,
                weights: weights.to_vec(),
            },
            rg,
        )
    }

    /// Mean over rows whose `keep` flag is set.
    pub fn masked_mean_rows(&self, keep: &[bool]) -> Var<'t> {
        let k = keep.iter().filter(|&&b| b).count();
        assert!(k > 0, "masked_mean_rows: nothing kept");
        let w: Vec<f64> = keep.iter().map(|&b| if b { 1.0 / k as f64 } else { 0.0 }).collect();
        self.weighted_rows(&w)
    }

    /// Scalar `Σ self ⊙ weights` against a constant weight tensor.
    pub fn weighted_sum(&self, weights: &[f64]) -> Var<'t> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id].value;
            assert_eq!(weights.len(), a.len(), "weighted_sum: weight count");
            Tensor::scalar(a.data().iter().zip(weights).map(|(x, w)| x * w).sum())
        };
        let rg = self.tape.needs(&[self.id]);
        self.tape.push(
            value,
            Op::WeightedSum {
                a: self.id,
                weights: weights.to_vec(),
            },
            rg,
        )
    }

    pub fn sum(&self) -> Var<'t> {
        self.unary(Op::Sum(self.id), |a| Tensor::scalar(a.data().iter().sum()))
    }

    pub fn mean(&self) -> Var<'t> {
        self.unary(Op::Mean(self.id), |a| {
            Tensor::scalar(a.data().iter().sum::<f64>() / a.len() as f64)
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn masked_softmax_zeroes_masked_columns() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::matrix(1, 3, vec![1.0, 2.0, 3.0]).unwrap());
        let y = x.softmax_rows(Some(&[false, true, false])).value();
        assert_eq!(y.data()[1], 0.0);
        assert!((y.data()[0] + y.data()[2] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn log_poisons_on_negative_input() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![-1.0]));
        let _ = x.log();
        assert_eq!(tape.poisoned(), Some("log"));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::vector(vec![2.0]));
        let c = tape.constant(Tensor::vector(vec![3.0]));
        let y = a.mul(c).sum();
        let g = tape.backward(y);
        assert_eq!(g[a.id()].as_deref(), Some(&[3.0][..]));
        assert!(g[c.id()].is_none());
    }

    #[test]
    fn gather_accumulates_repeated_rows() {
        let tape = Tape::new();
        let table = tape.leaf(Tensor::matrix(3, 2, vec![1., 2., 3., 4., 5., 6.]).unwrap());
        let y = table.gather_rows(&[2, 0, 2]).sum();
        assert_eq!(y.item(), 5. + 6. + 1. + 2. + 5. + 6.);
        let g = tape.backward(y);
        assert_eq!(g[table.id()].as_deref(), Some(&[1., 1., 0., 0., 2., 2.][..]));
    }
}
