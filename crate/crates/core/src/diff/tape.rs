use std::cell::{Ref, RefCell};
use std::rc::Rc;

use super::tensor::matmul_t;
use super::{DiffError, Tensor};

type Id = usize;

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul { a: Id, b: Id, ta: bool, tb: bool },
    Add(Id, Id),
    Scale(Id, f64),
    Mul(Id, Id),
    /// `[d] -> [rows x d]`
    BroadcastRows(Id, usize),
    /// `[rows x d] -> [d]`
    SumRows(Id),
    /// `[rows x 1] -> [rows x cols]`
    BroadcastCols(Id, usize),
    /// `[rows x d] -> [rows x 1]`
    SumCols(Id),
    /// `[1] -> shape`
    BroadcastScalar(Id, Vec<usize>),
    SumAll(Id),
    Relu(Id),
    /// Row-wise softmax.
    Softmax(Id),
    /// Mean softmax cross-entropy over rows.
    SoftmaxCe { logits: Id, labels: Rc<[usize]> },
    /// `(x + eps)^(-1/2)` elementwise.
    Rsqrt { x: Id, eps: f64 },
}

impl Op {
    fn inputs(&self) -> [Option<Id>; 2] {
        match *self {
            Op::Leaf => [None, None],
            Op::MatMul { a, b, .. } | Op::Add(a, b) | Op::Mul(a, b) => [Some(a), Some(b)],
            Op::Scale(a, _)
            | Op::BroadcastRows(a, _)
            | Op::SumRows(a)
            | Op::BroadcastCols(a, _)
            | Op::SumCols(a)
            | Op::BroadcastScalar(a, _)
            | Op::SumAll(a)
            | Op::Relu(a)
            | Op::Softmax(a)
            | Op::SoftmaxCe { logits: a, .. }
            | Op::Rsqrt { x: a, .. } => [Some(a), None],
        }
    }

    fn any_input(&self, f: impl FnMut(Id) -> bool) -> bool {
        self.inputs().into_iter().flatten().any(f)
    }

    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Add(..) => "add",
            Op::Scale(..) => "scale",
            Op::Mul(..) => "mul",
            Op::BroadcastRows(..) => "broadcast_rows",
            Op::SumRows(..) => "sum_rows",
            Op::BroadcastCols(..) => "broadcast_cols",
            Op::SumCols(..) => "sum_cols",
            Op::BroadcastScalar(..) => "broadcast_scalar",
            Op::SumAll(..) => "sum",
            Op::Relu(..) => "relu",
            Op::Softmax(..) => "softmax",
            Op::SoftmaxCe { .. } => "softmax_cross_entropy",
            Op::Rsqrt { .. } => "rsqrt",
        }
    }
}

struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// An append-only record of tensor operations.
///
/// A tape belongs to one thread; build a fresh one per step.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a recorded value.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: Id,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

fn row_softmax(z: &Tensor) -> Tensor {
    let (b, k) = z.dims2().expect("softmax on rank-2 input");
    let mut out = Vec::with_capacity(b * k);
    for i in 0..b {
        let row = z.row(i);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let start = out.len();
        let mut s = 0.0;
        for &v in row {
            let e = (v - m).exp();
            s += e;
            out.push(e);
        }
        for v in &mut out[start..] {
            *v /= s;
        }
    }
    Tensor::matrix(b, k, out)
}

/// Mean cross-entropy with max-subtraction.
pub(crate) fn softmax_ce_value(z: &Tensor, labels: &[usize]) -> Result<f64, DiffError> {
    let (b, k) = z.dims2()?;
    if k < 2 {
        return Err(DiffError::TooFewClasses {
            op: "softmax_cross_entropy",
            classes: k,
        });
    }
    if labels.len() != b {
        return Err(DiffError::LabelCount {
            labels: labels.len(),
            batch: b,
        });
    }
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(DiffError::LabelOutOfRange {
                label: y,
                classes: k,
            });
        }
        let row = z.row(i);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
        total += lse - row[y];
    }
    Ok(total / b as f64)
}

fn eval(op: &Op, nodes: &[Node]) -> Result<Tensor, DiffError> {
    let v = |id: Id| &nodes[id].value;
    let out = match op {
        Op::Leaf => unreachable!("leaves are not evaluated"),
        Op::MatMul { a, b, ta, tb } => matmul_t(v(*a), *ta, v(*b), *tb)?,
        Op::Add(a, b) => v(*a).add(v(*b))?,
        Op::Scale(a, c) => v(*a).scale(*c),
        Op::Mul(a, b) => v(*a).mul(v(*b))?,
        Op::BroadcastRows(a, rows) => {
            let x = v(*a);
            if x.rank() != 1 {
                return Err(DiffError::Rank {
                    expected: 1,
                    shape: x.shape().to_vec(),
                });
            }
            let mut data = Vec::with_capacity(rows * x.len());
            for _ in 0..*rows {
                data.extend_from_slice(x.data());
            }
            Tensor::matrix(*rows, x.len(), data)
        }
        Op::SumRows(a) => {
            let x = v(*a);
            let (r, c) = x.dims2()?;
            let mut s = vec![0.0; c];
            for i in 0..r {
                for (acc, &e) in s.iter_mut().zip(x.row(i)) {
                    *acc += e;
                }
            }
            Tensor::vector(s)
        }
        Op::BroadcastCols(a, cols) => {
            let x = v(*a);
            let (r, c) = x.dims2()?;
            if c != 1 {
                return Err(DiffError::ShapeMismatch {
                    op: "broadcast_cols",
                    left: x.shape().to_vec(),
                    right: vec![r, 1],
                });
            }
            Tensor::from_fn(r, *cols, |i, _| x.data()[i])
        }
        Op::SumCols(a) => {
            let x = v(*a);
            let (r, _) = x.dims2()?;
            Tensor::matrix(r, 1, (0..r).map(|i| x.row(i).iter().sum()).collect())
        }
        Op::BroadcastScalar(a, shape) => {
            let x = v(*a);
            if x.len() != 1 {
                return Err(DiffError::NonScalarLoss(x.shape().to_vec()));
            }
            Tensor::full(shape, x.item())
        }
        Op::SumAll(a) => Tensor::scalar(v(*a).sum()),
        Op::Relu(a) => v(*a).map(|e| if e > 0.0 { e } else { 0.0 }),
        Op::Softmax(a) => {
            v(*a).dims2()?;
            row_softmax(v(*a))
        }
        Op::SoftmaxCe { logits, labels } => Tensor::scalar(softmax_ce_value(v(*logits), labels)?),
        Op::Rsqrt { x, eps } => v(*x).map(|e| 1.0 / (e + eps).sqrt()),
    };
    if !out.is_finite() {
        return Err(DiffError::NonFinite(op.name()));
    }
    Ok(out)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A differentiable input.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push_leaf(value, true)
    }

    /// A value treated as constant by [`Tape::grad`].
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push_leaf(value, false)
    }

    fn push_leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            op: Op::Leaf,
            value,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn push(&self, op: Op) -> Result<Var<'_>, DiffError> {
        let (value, requires_grad) = {
            let nodes = self.nodes.borrow();
            let rg = op.any_input(|i| nodes[i].requires_grad);
            (eval(&op, &nodes)?, rg)
        };
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Ok(Var {
            tape: self,
            id: nodes.len() - 1,
        })
    }

    fn owns(&self, v: Var<'_>) -> Result<Id, DiffError> {
        if std::ptr::eq(v.tape, self) && v.id < self.len() {
            Ok(v.id)
        } else {
            Err(DiffError::ForeignVar(v.id))
        }
    }

    /// Recomputes every recorded operation from stored inputs and reports
    /// whether each reproduces its stored value bit for bit.
    pub fn replay(&self) -> Result<bool, DiffError> {
        let nodes = self.nodes.borrow();
        for n in nodes.iter() {
            if matches!(n.op, Op::Leaf) {
                continue;
            }
            let again = eval(&n.op, &nodes)?;
            let same = again
                .data()
                .iter()
                .zip(n.value.data())
                .all(|(a, b)| a.to_bits() == b.to_bits());
            if !same {
                return Ok(false);
            }
        }
        Ok(true)
    }

    /// Reverse-mode gradients of the scalar `loss` with respect to `wrt`, as
    /// plain tensors. Nodes created during the sweep are discarded.
    pub fn grad(&self, loss: Var<'_>, wrt: &[Var<'_>]) -> Result<Vec<Tensor>, DiffError> {
        let mark = self.len();
        let out = self
            .sweep(loss, wrt)
            .map(|vars| vars.into_iter().map(|v| self.value_of(v)).collect());
        self.nodes.borrow_mut().truncate(mark);
        out
    }

    /// Like [`Tape::grad`] but the gradients stay on the tape and can be
    /// differentiated again.
    pub fn grad_graph<'t>(
        &'t self,
        loss: Var<'t>,
        wrt: &[Var<'t>],
    ) -> Result<Vec<Var<'t>>, DiffError> {
        self.sweep(loss, wrt)
    }

    /// `create_graph` selects between [`Tape::grad_graph`] and [`Tape::grad`];
    /// in both cases the gradient values are returned.
    pub fn backward<'t>(
        &'t self,
        loss: Var<'t>,
        wrt: &[Var<'t>],
        create_graph: bool,
    ) -> Result<Vec<Tensor>, DiffError> {
        if create_graph {
            let vars = self.grad_graph(loss, wrt)?;
            Ok(vars.into_iter().map(|v| v.value()).collect())
        } else {
            self.grad(loss, wrt)
        }
    }

    fn value_of(&self, v: Var<'_>) -> Tensor {
        self.nodes.borrow()[v.id].value.clone()
    }

    fn sweep<'t>(&'t self, loss: Var<'_>, wrt: &[Var<'_>]) -> Result<Vec<Var<'t>>, DiffError> {
        let loss_id = self.owns(loss)?;
        let wrt_ids = wrt
            .iter()
            .map(|w| self.owns(*w))
            .collect::<Result<Vec<_>, _>>()?;
        let loss_shape = self.nodes.borrow()[loss_id].value.shape().to_vec();
        if loss_shape.iter().product::<usize>() != 1 {
            return Err(DiffError::NonScalarLoss(loss_shape));
        }

        // Nodes on some path from a `wrt` leaf to the loss.
        let mut live = vec![false; loss_id + 1];
        {
            let nodes = self.nodes.borrow();
            for &w in &wrt_ids {
                if w <= loss_id && nodes[w].requires_grad {
                    live[w] = true;
                }
            }
            for i in 0..=loss_id {
                if !live[i] && nodes[i].requires_grad && nodes[i].op.any_input(|j| live[j]) {
                    live[i] = true;
                }
            }
        }

        let mut grads: Vec<Option<Id>> = vec![None; loss_id + 1];
        if live[loss_id] {
            grads[loss_id] = Some(self.constant(Tensor::full(&loss_shape, 1.0)).id);
        }
        for i in (0..=loss_id).rev() {
            let Some(g) = grads[i] else { continue };
            if !live[i] {
                continue;
            }
            let op = self.nodes.borrow()[i].op.clone();
            let g = Var { tape: self, id: g };
            let me = Var { tape: self, id: i };
            for (input, contrib) in self.vjp(&op, me, g, &live)? {
                grads[input] = Some(match grads[input] {
                    None => contrib.id,
                    Some(prev) => Var { tape: self, id: prev }.add(contrib)?.id,
                });
            }
        }

        wrt_ids
            .iter()
            .map(|&w| match grads.get(w).copied().flatten() {
                Some(id) => Ok(Var { tape: self, id }),
                None => {
                    let shape = self.nodes.borrow()[w].value.shape().to_vec();
                    Ok(self.constant(Tensor::zeros(&shape)))
                }
            })
            .collect()
    }

    /// Vector-Jacobian products of one node, expressed as new tape operations.
    fn vjp<'t>(
        &'t self,
        op: &Op,
        out: Var<'t>,
        g: Var<'t>,
        live: &[bool],
    ) -> Result<Vec<(Id, Var<'t>)>, DiffError> {
        let var = |id| Var { tape: self, id };
        let mut res = Vec::with_capacity(2);
        match *op {
            Op::Leaf => {}
            Op::MatMul { a, b, ta, tb } => {
                let (av, bv) = (var(a), var(b));
                if live[a] {
                    let da = match (ta, tb) {
                        (false, false) => g.matmul_t(false, bv, true)?,
                        (false, true) => g.matmul_t(false, bv, false)?,
                        (true, false) => bv.matmul_t(false, g, true)?,
                        (true, true) => bv.matmul_t(true, g, true)?,
                    };
                    res.push((a, da));
                }
                if live[b] {
                    let db = match (ta, tb) {
                        (false, false) => av.matmul_t(true, g, false)?,
                        (false, true) => g.matmul_t(true, av, false)?,
                        (true, false) => av.matmul_t(false, g, false)?,
                        (true, true) => g.matmul_t(true, av, true)?,
                    };
                    res.push((b, db));
                }
            }
            Op::Add(a, b) => {
                if live[a] {
                    res.push((a, g));
                }
                if live[b] {
                    res.push((b, g));
                }
            }
            Op::Scale(a, c) => res.push((a, g.scale(c)?)),
            Op::Mul(a, b) => {
                if live[a] {
                    res.push((a, g.mul(var(b))?));
                }
                if live[b] {
                    res.push((b, g.mul(var(a))?));
                }
            }
            Op::BroadcastRows(a, _) => res.push((a, g.sum_rows()?)),
            Op::SumRows(a) => {
                let rows = var(a).shape()[0];
                res.push((a, g.broadcast_rows(rows)?));
            }
            Op::BroadcastCols(a, _) => res.push((a, g.sum_cols()?)),
            Op::SumCols(a) => {
                let cols = var(a).shape()[1];
                res.push((a, g.broadcast_cols(cols)?));
            }
            Op::BroadcastScalar(a, _) => res.push((a, g.sum()?)),
            Op::SumAll(a) => {
                let shape = var(a).shape();
                res.push((a, g.broadcast_scalar(&shape)?));
            }
            Op::Relu(a) => {
                // Subgradient 0 at the kink; the mask is constant, so the
                // second derivative vanishes.
                let mask = self.nodes.borrow()[a]
                    .value
                    .map(|e| if e > 0.0 { 1.0 } else { 0.0 });
                res.push((a, g.mul(self.constant(mask))?));
            }
            Op::Softmax(a) => {
                // s * (g - rowsum(g * s))
                let s = out;
                let cols = s.shape()[1];
                let inner = g.mul(s)?.sum_cols()?.broadcast_cols(cols)?;
                res.push((a, s.mul(g.sub(inner)?)?));
            }
            Op::SoftmaxCe { logits, ref labels } => {
                let z = var(logits);
                let (b, k) = {
                    let nodes = self.nodes.borrow();
                    nodes[logits].value.dims2()?
                };
                let mut onehot = vec![0.0; b * k];
                for (i, &y) in labels.iter().enumerate() {
                    onehot[i * k + y] = -1.0;
                }
                let diff = z.softmax()?.add(self.constant(Tensor::matrix(b, k, onehot)))?;
                let gz = g
                    .broadcast_scalar(&[b, k])?
                    .mul(diff)?
                    .scale(1.0 / b as f64)?;
                res.push((logits, gz));
            }
            Op::Rsqrt { x, .. } => {
                let y = out;
                let dy = y.mul(y)?.mul(y)?.scale(-0.5)?;
                res.push((x, g.mul(dy)?));
            }
        }
        Ok(res)
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
        self.tape.value_of(*self)
    }

    /// Borrow of the stored value; drop it before recording more operations.
    pub fn value_ref(&self) -> Ref<'t, Tensor> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value_ref().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    fn check(&self, other: Var<'_>) -> Result<(), DiffError> {
        self.tape.owns(other).map(|_| ())
    }

    pub fn matmul(self, rhs: Var<'t>) -> Result<Var<'t>, DiffError> {
        self.matmul_t(false, rhs, false)
    }

    /// `op(self) · op(rhs)` with optional transposes.
    pub fn matmul_t(self, ta: bool, rhs: Var<'t>, tb: bool) -> Result<Var<'t>, DiffError> {
        self.check(rhs)?;
        self.tape.push(Op::MatMul {
            a: self.id,
            b: rhs.id,
            ta,
            tb,
        })
    }

    pub fn add(self, rhs: Var<'t>) -> Result<Var<'t>, DiffError> {
        self.check(rhs)?;
        self.tape.push(Op::Add(self.id, rhs.id))
    }

    pub fn sub(self, rhs: Var<'t>) -> Result<Var<'t>, DiffError> {
        self.add(rhs.scale(-1.0)?)
    }

    pub fn scale(self, c: f64) -> Result<Var<'t>, DiffError> {
        self.tape.push(Op::Scale(self.id, c))
    }

    /// Elementwise product.
    pub fn mul(self, rhs: Var<'t>) -> Result<Var<'t>, DiffError> {
        self.check(rhs)?;
        self.tape.push(Op::Mul(self.id, rhs.id))
    }

    /// `self[B x d] + bias[d]` broadcast over rows.
    pub fn add_bias(self, bias: Var<'t>) -> Result<Var<'t>, DiffError> {
        let rows = self.value_ref().dims2()?.0;
        self.add(bias.broadcast_rows(rows)?)
    }

    pub fn broadcast_rows(self, rows: usize) -> Result<Var<'t>, DiffError> {
        self.tape.push(Op::BroadcastRows(self.id, rows))
    }

    pub fn sum_rows(self) -> Result<Var<'t>, DiffError> {
        self.tape.push(Op::SumRows(self.id))
    }

    pub fn broadcast_cols(self, cols: usize) -> Result<Var<'t>, DiffError> {
        self.tape.push(Op::BroadcastCols(self.id, cols))
    }

    pub fn sum_cols(self) -> Result<Var<'t>, DiffError> {
        self.tape.push(Op::SumCols(self.id))
    }

    pub fn broadcast_scalar(self, shape: &[usize]) -> Result<Var<'t>, DiffError> {
        self.tape.push(Op::BroadcastScalar(self.id, shape.to_vec()))
    }

    pub fn sum(self) -> Result<Var<'t>, DiffError> {
        self.tape.push(Op::SumAll(self.id))
    }

    pub fn relu(self) -> Result<Var<'t>, DiffError> {
        self.tape.push(Op::Relu(self.id))
    }

    pub fn softmax(self) -> Result<Var<'t>, DiffError> {
        self.tape.push(Op::Softmax(self.id))
    }

    /// Mean cross-entropy of row-wise softmax against class indices.
    pub fn softmax_cross_entropy(self, labels: &[usize]) -> Result<Var<'t>, DiffError> {
        self.tape.push(Op::SoftmaxCe {
            logits: self.id,
            labels: labels.into(),
        })
    }

    /// Mean over all elements of `(self - rhs)^2`.
    pub fn mse(self, rhs: Var<'t>) -> Result<Var<'t>, DiffError> {
        let (a, b) = (self.shape(), rhs.shape());
        if a != b {
            return Err(DiffError::ShapeMismatch {
                op: "mse",
                left: a,
                right: b,
            });
        }
        let n = a.iter().product::<usize>() as f64;
        let d = self.sub(rhs)?;
        d.mul(d)?.sum()?.scale(1.0 / n)
    }

    /// Each row divided by `sqrt(|row|^2 + eps)`.
    pub fn l2_normalize_rows(self, eps: f64) -> Result<Var<'t>, DiffError> {
        if !(eps > 0.0) {
            return Err(DiffError::BadEps(eps));
        }
        let cols = self.value_ref().dims2()?.1;
        let inv = self
            .mul(self)?
            .sum_cols()?
            .push_rsqrt(eps)?
            .broadcast_cols(cols)?;
        self.mul(inv)
    }

    fn push_rsqrt(self, eps: f64) -> Result<Var<'t>, DiffError> {
        self.tape.push(Op::Rsqrt { x: self.id, eps })
    }
}
