use std::cell::RefCell;
use std::fmt;
use std::sync::Arc;

use super::params::{ParamId, ParamSet};
use super::{Real, Tensor};
use crate::error::{contract_err, dim_err, Error, Result};

/// Recorded operation. Inputs are node ids; saved values are the node values
/// themselves, so only shape bookkeeping is stored here.
enum Op<F> {
    Leaf,
    MatMul {
        a: usize,
        b: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    BatchMatMul {
        a: usize,
        b: usize,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow {
        x: usize,
        bias: usize,
        cols: usize,
    },
    Scale(usize, F),
    AddScalar(usize),
    Sigmoid(usize),
    Tanh(usize),
    Relu(usize),
    Softmax {
        x: usize,
        outer: usize,
        len: usize,
        inner: usize,
    },
    LogSoftmax {
        x: usize,
        cols: usize,
    },
    Concat {
        parts: Vec<usize>,
        outer: usize,
        widths: Vec<usize>,
    },
    Narrow {
        x: usize,
        outer: usize,
        width_in: usize,
        start: usize,
        width: usize,
    },
    Reshape(usize),
    Transpose {
        x: usize,
        rows: usize,
        cols: usize,
    },
    Gather {
        table: usize,
        ids: Vec<usize>,
        cols: usize,
    },
    Pick {
        x: usize,
        ids: Vec<usize>,
        cols: usize,
    },
    RepeatRows {
        x: usize,
        times: usize,
        cols: usize,
    },
    Sum(usize),
    Mean(usize),
    SumLast {
        x: usize,
        cols: usize,
    },
    NormalizeRows {
        x: usize,
        cols: usize,
        norms: Vec<F>,
    },
}

struct Node<F> {
    shape: Vec<usize>,
    value: Arc<Vec<F>>,
    op: Op<F>,
    requires_grad: bool,
    param: Option<ParamId>,
    grad: Option<Vec<F>>,
}

/// Append-only record of executed operations.
pub struct Graph<F: Real> {
    nodes: RefCell<Vec<Node<F>>>,
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g, F: Real> {
    graph: &'g Graph<F>,
    id: usize,
}

impl<F: Real> fmt::Debug for Var<'_, F> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl<F: Real> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        numel(&shape[..axis]),
        shape[axis],
        numel(&shape[axis + 1..]),
    )
}

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, shape: Vec<usize>, value: Vec<F>, op: Op<F>, requires_grad: bool) -> Var<'_, F> {
        debug_assert_eq!(numel(&shape), value.len());
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            shape,
            value: Arc::new(value),
            op,
            requires_grad,
            param: None,
            grad: None,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    fn push_leaf(&self, t: &Tensor<F>, requires_grad: bool, param: Option<ParamId>) -> Var<'_, F> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            shape: t.shape().to_vec(),
            value: t.shared(),
            op: Op::Leaf,
            requires_grad,
            param,
            grad: None,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    /// Leaf whose gradient is tracked iff the tensor requires it.
    pub fn leaf(&self, t: &Tensor<F>) -> Var<'_, F> {
        self.push_leaf(t, t.requires_grad(), None)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, t: &Tensor<F>) -> Var<'_, F> {
        self.push_leaf(t, false, None)
    }

    /// Leaf built from raw parts, never differentiated.
    pub fn constant_from(&self, shape: Vec<usize>, data: Vec<F>) -> Result<Var<'_, F>> {
        let t = Tensor::new(shape, data)?;
        Ok(self.constant(&t))
    }

    /// Binds a parameter of `params`; its gradient can later be written back
    /// with [`ParamSet::accumulate_grads`].
    pub fn param(&self, params: &ParamSet<F>, id: ParamId) -> Var<'_, F> {
        let t = params.get(id);
        self.push_leaf(t, t.requires_grad(), Some(id))
    }

    fn shape_of(&self, id: usize) -> Vec<usize> {
        self.nodes.borrow()[id].shape.clone()
    }

    fn value_of(&self, id: usize) -> Arc<Vec<F>> {
        Arc::clone(&self.nodes.borrow()[id].value)
    }

    fn rg(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Gradient accumulated on a node by previous `backward` calls.
    pub fn grad(&self, v: Var<'_, F>) -> Option<Tensor<F>> {
        let nodes = self.nodes.borrow();
        let node = &nodes[v.id];
        node.grad
            .as_ref()
            .map(|g| Tensor::from_shared(node.shape.clone(), Arc::new(g.clone())))
    }

    /// Parameter-leaf gradients, in node order.
    pub(crate) fn param_grads(&self) -> Vec<(ParamId, Vec<F>)> {
        self.nodes
            .borrow()
            .iter()
            .filter_map(|n| match (n.param, &n.grad) {
                (Some(p), Some(g)) => Some((p, g.clone())),
                _ => None,
            })
            .collect()
    }

    /// Reverse pass from a one-element loss. Gradients are added (`+=`) onto
    /// every reachable leaf that requires them.
    pub fn backward(&self, loss: Var<'_, F>) -> Result<()> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return contract_err(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.shape
            ));
        }
        let mut grads: Vec<Option<Vec<F>>> = Vec::new();
        grads.resize_with(loss.id + 1, || None);
        grads[loss.id] = Some(vec![F::one()]);
        let mut leaf_grads = Vec::new();

        for id in (0..=loss.id).rev() {
            let Some(gy) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let y = &node.value;
            let mut send = |target: usize, contribution: Vec<F>| {
                if !nodes[target].requires_grad {
                    return;
                }
                match &mut grads[target] {
                    Some(acc) => acc
                        .iter_mut()
                        .zip(&contribution)
                        .for_each(|(a, c)| *a = *a + *c),
                    slot @ None => *slot = Some(contribution),
                }
            };
            match &node.op {
                Op::Leaf => leaf_grads.push((id, gy)),
                &Op::MatMul { a, b, m, k, n } => {
                    if nodes[a].requires_grad {
                        let mut da = vec![F::zero(); m * k];
                        F::gemm(m, n, k, &gy, false, &nodes[b].value, true, &mut da, false);
                        send(a, da);
                    }
                    if nodes[b].requires_grad {
                        let mut db = vec![F::zero(); k * n];
                        F::gemm(k, m, n, &nodes[a].value, true, &gy, false, &mut db, false);
                        send(b, db);
                    }
                }
                &Op::BatchMatMul {
                    a,
                    b,
                    batch,
                    m,
                    k,
                    n,
                } => {
                    let (av, bv) = (&nodes[a].value, &nodes[b].value);
                    if nodes[a].requires_grad {
                        let mut da = vec![F::zero(); batch * m * k];
                        for s in 0..batch {
                            F::gemm(
                                m,
                                n,
                                k,
                                &gy[s * m * n..],
                                false,
                                &bv[s * k * n..],
                                true,
                                &mut da[s * m * k..],
                                false,
                            );
                        }
                        send(a, da);
                    }
                    if nodes[b].requires_grad {
                        let mut db = vec![F::zero(); batch * k * n];
                        for s in 0..batch {
                            F::gemm(
                                k,
                                m,
                                n,
                                &av[s * m * k..],
                                true,
                                &gy[s * m * n..],
                                false,
                                &mut db[s * k * n..],
                                false,
                            );
                        }
                        send(b, db);
                    }
                }
                &Op::Add(a, b) => {
                    send(a, gy.clone());
                    send(b, gy);
                }
                &Op::Sub(a, b) => {
                    send(a, gy.clone());
                    send(b, gy.iter().map(|&g| -g).collect());
                }
                &Op::Mul(a, b) => {
                    let (av, bv) = (&nodes[a].value, &nodes[b].value);
                    if nodes[a].requires_grad {
                        send(a, gy.iter().zip(bv.iter()).map(|(&g, &x)| g * x).collect());
                    }
                    if nodes[b].requires_grad {
                        send(b, gy.iter().zip(av.iter()).map(|(&g, &x)| g * x).collect());
                    }
                }
                &Op::AddRow { x, bias, cols } => {
                    if nodes[bias].requires_grad {
                        let mut db = vec![F::zero(); cols];
                        for row in gy.chunks(cols) {
                            db.iter_mut().zip(row).for_each(|(d, &g)| *d = *d + g);
                        }
                        send(bias, db);
                    }
                    send(x, gy);
                }
                &Op::Scale(x, s) => send(x, gy.iter().map(|&g| g * s).collect()),
                &Op::AddScalar(x) => send(x, gy),
                &Op::Sigmoid(x) => send(
                    x,
                    gy.iter()
                        .zip(y.iter())
                        .map(|(&g, &s)| g * s * (F::one() - s))
                        .collect(),
                ),
                &Op::Tanh(x) => send(
                    x,
                    gy.iter()
                        .zip(y.iter())
                        .map(|(&g, &t)| g * (F::one() - t * t))
                        .collect(),
                ),
                &Op::Relu(x) => {
                    let xv = &nodes[x].value;
                    send(
                        x,
                        gy.iter()
                            .zip(xv.iter())
                            .map(|(&g, &v)| if v > F::zero() { g } else { F::zero() })
                            .collect(),
                    )
                }
                &Op::Softmax {
                    x,
                    outer,
                    len,
                    inner,
                } => {
                    let mut dx = vec![F::zero(); y.len()];
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |l: usize| (o * len + l) * inner + i;
                            let dot: F = (0..len).map(|l| gy[idx(l)] * y[idx(l)]).sum();
                            for l in 0..len {
                                dx[idx(l)] = y[idx(l)] * (gy[idx(l)] - dot);
                            }
                        }
                    }
                    send(x, dx);
                }
                &Op::LogSoftmax { x, cols } => {
                    let mut dx = vec![F::zero(); y.len()];
                    for ((drow, grow), yrow) in
                        dx.chunks_mut(cols).zip(gy.chunks(cols)).zip(y.chunks(cols))
                    {
                        let total: F = grow.iter().copied().sum();
                        for ((d, &g), &ly) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d = g - ly.exp() * total;
                        }
                    }
                    send(x, dx);
                }
                Op::Concat {
                    parts,
                    outer,
                    widths,
                } => {
                    let total: usize = widths.iter().sum();
                    let mut offset = 0;
                    for (&p, &w) in parts.iter().zip(widths) {
                        if nodes[p].requires_grad {
                            let mut dp = Vec::with_capacity(outer * w);
                            for o in 0..*outer {
                                dp.extend_from_slice(
                                    &gy[o * total + offset..o * total + offset + w],
                                );
                            }
                            send(p, dp);
                        }
                        offset += w;
                    }
                }
                &Op::Narrow {
                    x,
                    outer,
                    width_in,
                    start,
                    width,
                } => {
                    let mut dx = vec![F::zero(); outer * width_in];
                    for o in 0..outer {
                        dx[o * width_in + start..o * width_in + start + width]
                            .copy_from_slice(&gy[o * width..(o + 1) * width]);
                    }
                    send(x, dx);
                }
                &Op::Reshape(x) => send(x, gy),
                &Op::Transpose { x, rows, cols } => {
                    // y is cols×rows
                    let mut dx = vec![F::zero(); rows * cols];
                    for r in 0..rows {
                        for c in 0..cols {
                            dx[r * cols + c] = gy[c * rows + r];
                        }
                    }
                    send(x, dx);
                }
                Op::Gather { table, ids, cols } => {
                    let mut dt = vec![F::zero(); nodes[*table].value.len()];
                    for (row, &tok) in ids.iter().enumerate() {
                        let src = &gy[row * cols..(row + 1) * cols];
                        dt[tok * cols..(tok + 1) * cols]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(d, &g)| *d = *d + g);
                    }
                    send(*table, dt);
                }
                Op::Pick { x, ids, cols } => {
                    let mut dx = vec![F::zero(); ids.len() * cols];
                    for (row, &c) in ids.iter().enumerate() {
                        dx[row * cols + c] = gy[row];
                    }
                    send(*x, dx);
                }
                &Op::RepeatRows { x, times, cols } => {
                    let rows = nodes[x].value.len() / cols;
                    let mut dx = vec![F::zero(); rows * cols];
                    for r in 0..rows {
                        for t in 0..times {
                            let src = &gy[(r * times + t) * cols..(r * times + t + 1) * cols];
                            dx[r * cols..(r + 1) * cols]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(d, &g)| *d = *d + g);
                        }
                    }
                    send(x, dx);
                }
                &Op::Sum(x) => send(x, vec![gy[0]; nodes[x].value.len()]),
                &Op::Mean(x) => {
                    let n = nodes[x].value.len();
                    send(x, vec![gy[0] / F::from_usize(n).unwrap(); n]);
                }
                &Op::SumLast { x, cols } => {
                    let mut dx = Vec::with_capacity(gy.len() * cols);
                    for &g in &gy {
                        dx.extend(std::iter::repeat_n(g, cols));
                    }
                    send(x, dx);
                }
                Op::NormalizeRows { x, cols, norms } => {
                    let mut dx = vec![F::zero(); y.len()];
                    for (r, &norm) in norms.iter().enumerate() {
                        if norm <= F::zero() {
                            continue;
                        }
                        let span = r * cols..(r + 1) * cols;
                        let yr = &y[span.clone()];
                        let gr = &gy[span.clone()];
                        let dot: F = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for ((d, &a), &g) in dx[span].iter_mut().zip(yr).zip(gr) {
                            *d = (g - a * dot) / norm;
                        }
                    }
                    send(*x, dx);
                }
            }
        }
        drop(nodes);

        let mut nodes = self.nodes.borrow_mut();
        for (id, g) in leaf_grads {
            match &mut nodes[id].grad {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a = *a + *b),
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }
}

impl<'g, F: Real> Var<'g, F> {
    pub fn graph(&self) -> &'g Graph<F> {
        self.graph
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.shape_of(self.id)
    }

    pub fn numel(&self) -> usize {
        self.graph.nodes.borrow()[self.id].value.len()
    }

    pub fn value(&self) -> Tensor<F> {
        Tensor::from_shared(self.shape(), self.graph.value_of(self.id))
    }

    pub fn to_vec(&self) -> Vec<F> {
        self.graph.value_of(self.id).to_vec()
    }

    pub fn item(&self) -> F {
        self.graph.value_of(self.id)[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.rg(self.id)
    }

    pub fn grad(&self) -> Option<Tensor<F>> {
        self.graph.grad(*self)
    }

    fn same_graph(&self, other: &Var<'g, F>) {
        assert!(
            std::ptr::eq(self.graph, other.graph),
            "vars from different graphs"
        );
    }

    fn unary(&self, op: Op<F>, f: impl Fn(F) -> F) -> Var<'g, F> {
        let value: Vec<F> = self.graph.value_of(self.id).iter().map(|&x| f(x)).collect();
        self.graph
            .push(self.shape(), value, op, self.requires_grad())
    }

    fn zip_with(
        &self,
        other: &Var<'g, F>,
        name: &str,
        op: Op<F>,
        f: impl Fn(F, F) -> F,
    ) -> Result<Var<'g, F>> {
        self.same_graph(other);
        let (sa, sb) = (self.shape(), other.shape());
        if sa != sb {
            return dim_err(format!("{name}: shapes {sa:?} and {sb:?} differ"));
        }
        let (a, b) = (self.graph.value_of(self.id), self.graph.value_of(other.id));
        let value = a.iter().zip(b.iter()).map(|(&x, &y)| f(x, y)).collect();
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self.graph.push(sa, value, op, rg))
    }

    /// Matrix product of `m×k` and `k×n` operands.
    pub fn matmul(&self, other: &Var<'g, F>) -> Result<Var<'g, F>> {
        self.same_graph(other);
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return dim_err(format!("matmul: incompatible shapes {sa:?} and {sb:?}"));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![F::zero(); m * n];
        F::gemm(
            m,
            k,
            n,
            &self.graph.value_of(self.id),
            false,
            &self.graph.value_of(other.id),
            false,
            &mut out,
            false,
        );
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self.graph.push(
            vec![m, n],
            out,
            Op::MatMul {
                a: self.id,
                b: other.id,
                m,
                k,
                n,
            },
            rg,
        ))
    }

    /// Batched matrix product of `b×m×k` and `b×k×n` operands.
    pub fn batch_matmul(&self, other: &Var<'g, F>) -> Result<Var<'g, F>> {
        self.same_graph(other);
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return dim_err(format!(
                "batch_matmul: incompatible shapes {sa:?} and {sb:?}"
            ));
        }
        let (batch, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let (av, bv) = (self.graph.value_of(self.id), self.graph.value_of(other.id));
        let mut out = vec![F::zero(); batch * m * n];
        for s in 0..batch {
            F::gemm(
                m,
                k,
                n,
                &av[s * m * k..],
                false,
                &bv[s * k * n..],
                false,
                &mut out[s * m * n..],
                false,
            );
        }
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self.graph.push(
            vec![batch, m, n],
            out,
            Op::BatchMatMul {
                a: self.id,
                b: other.id,
                batch,
                m,
                k,
                n,
            },
            rg,
        ))
    }

    pub fn add(&self, other: &Var<'g, F>) -> Result<Var<'g, F>> {
        self.zip_with(other, "add", Op::Add(self.id, other.id), |a, b| a + b)
    }

    pub fn sub(&self, other: &Var<'g, F>) -> Result<Var<'g, F>> {
        self.zip_with(other, "sub", Op::Sub(self.id, other.id), |a, b| a - b)
    }

    pub fn mul(&self, other: &Var<'g, F>) -> Result<Var<'g, F>> {
        self.zip_with(other, "mul", Op::Mul(self.id, other.id), |a, b| a * b)
    }

    /// Adds a bias vector to every row (last axis).
    pub fn add_row(&self, bias: &Var<'g, F>) -> Result<Var<'g, F>> {
        self.same_graph(bias);
        let (sx, sb) = (self.shape(), bias.shape());
        let cols = *sx.last().unwrap();
        if numel(&sb) != cols || sb.iter().rev().skip(1).any(|&d| d != 1) {
            return dim_err(format!(
                "add_row: bias {sb:?} does not match rows of {sx:?}"
            ));
        }
        let (x, b) = (self.graph.value_of(self.id), self.graph.value_of(bias.id));
        let mut out = x.to_vec();
        for row in out.chunks_mut(cols) {
            row.iter_mut().zip(b.iter()).for_each(|(o, &v)| *o = *o + v);
        }
        let rg = self.requires_grad() || bias.requires_grad();
        Ok(self.graph.push(
            sx,
            out,
            Op::AddRow {
                x: self.id,
                bias: bias.id,
                cols,
            },
            rg,
        ))
    }

    pub fn scale(&self, s: f64) -> Var<'g, F> {
        let s = F::from_f64_lossy(s);
        self.unary(Op::Scale(self.id, s), |x| x * s)
    }

    pub fn neg(&self) -> Var<'g, F> {
        self.scale(-1.0)
    }

    pub fn add_scalar(&self, s: f64) -> Var<'g, F> {
        let s = F::from_f64_lossy(s);
        self.unary(Op::AddScalar(self.id), |x| x + s)
    }

    /// `1 - x`
    pub fn one_minus(&self) -> Var<'g, F> {
        self.neg().add_scalar(1.0)
    }

    pub fn sigmoid(&self) -> Var<'g, F> {
        self.unary(Op::Sigmoid(self.id), |x| {
            if x >= F::zero() {
                F::one() / (F::one() + (-x).exp())
            } else {
                let e = x.exp();
                e / (F::one() + e)
            }
        })
    }

    pub fn tanh(&self) -> Var<'g, F> {
        self.unary(Op::Tanh(self.id), |x| x.tanh())
    }

    pub fn relu(&self) -> Var<'g, F> {
        self.unary(Op::Relu(self.id), |x| x.max(F::zero()))
    }

    /// Softmax along `axis`, stabilized by subtracting the slice maximum.
    pub fn softmax(&self, axis: usize) -> Result<Var<'g, F>> {
        let shape = self.shape();
        if axis >= shape.len() {
            return dim_err(format!("softmax: axis {axis} out of range for {shape:?}"));
        }
        let x = self.graph.value_of(self.id);
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("softmax: non-finite input".into()));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let mut out = vec![F::zero(); x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |l: usize| (o * len + l) * inner + i;
                let max = (0..len).map(|l| x[idx(l)]).fold(F::neg_infinity(), F::max);
                let mut total = F::zero();
                for l in 0..len {
                    let e = (x[idx(l)] - max).exp();
                    out[idx(l)] = e;
                    total = total + e;
                }
                for l in 0..len {
                    out[idx(l)] = out[idx(l)] / total;
                }
            }
        }
        Ok(self.graph.push(
            shape,
            out,
            Op::Softmax {
                x: self.id,
                outer,
                len,
                inner,
            },
            self.requires_grad(),
        ))
    }

    /// Log-softmax along the last axis.
    pub fn log_softmax(&self) -> Result<Var<'g, F>> {
        let shape = self.shape();
        let cols = *shape.last().unwrap();
        let x = self.graph.value_of(self.id);
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("log_softmax: non-finite input".into()));
        }
        let mut out = vec![F::zero(); x.len()];
        for (orow, xrow) in out.chunks_mut(cols).zip(x.chunks(cols)) {
            let max = xrow.iter().copied().fold(F::neg_infinity(), F::max);
            let lse = xrow.iter().map(|&v| (v - max).exp()).sum::<F>().ln() + max;
            orow.iter_mut().zip(xrow).for_each(|(o, &v)| *o = v - lse);
        }
        Ok(self.graph.push(
            shape,
            out,
            Op::LogSoftmax { x: self.id, cols },
            self.requires_grad(),
        ))
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Var<'g, F>> {
        let old = self.shape();
        if numel(&shape) != numel(&old) || shape.contains(&0) {
            return dim_err(format!("reshape: cannot view {old:?} as {shape:?}"));
        }
        let value = self.graph.value_of(self.id);
        let mut nodes = self.graph.nodes.borrow_mut();
        let rg = nodes[self.id].requires_grad;
        nodes.push(Node {
            shape,
            value,
            op: Op::Reshape(self.id),
            requires_grad: rg,
            param: None,
            grad: None,
        });
        Ok(Var {
            graph: self.graph,
            id: nodes.len() - 1,
        })
    }

    pub fn transpose(&self) -> Result<Var<'g, F>> {
        let shape = self.shape();
        if shape.len() != 2 {
            return dim_err(format!("transpose: expected a matrix, got {shape:?}"));
        }
        let (rows, cols) = (shape[0], shape[1]);
        let x = self.graph.value_of(self.id);
        let mut out = vec![F::zero(); rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                out[c * rows + r] = x[r * cols + c];
            }
        }
        Ok(self.graph.push(
            vec![cols, rows],
            out,
            Op::Transpose {
                x: self.id,
                rows,
                cols,
            },
            self.requires_grad(),
        ))
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Var<'g, F>> {
        let shape = self.shape();
        if axis >= shape.len() || start + len > shape[axis] || len == 0 {
            return dim_err(format!(
                "narrow: [{start}, {}) along axis {axis} of {shape:?}",
                start + len
            ));
        }
        let (outer, extent, inner) = split_axis(&shape, axis);
        let (width_in, width, off) = (extent * inner, len * inner, start * inner);
        let x = self.graph.value_of(self.id);
        let mut out = Vec::with_capacity(outer * width);
        for o in 0..outer {
            out.extend_from_slice(&x[o * width_in + off..o * width_in + off + width]);
        }
        let mut new_shape = shape;
        new_shape[axis] = len;
        Ok(self.graph.push(
            new_shape,
            out,
            Op::Narrow {
                x: self.id,
                outer,
                width_in,
                start: off,
                width,
            },
            self.requires_grad(),
        ))
    }

    /// Gathers rows of a `vocab×cols` table.
    pub fn gather_rows(&self, ids: &[usize]) -> Result<Var<'g, F>> {
        let shape = self.shape();
        if shape.len() != 2 {
            return dim_err(format!(
                "gather_rows: table must be a matrix, got {shape:?}"
            ));
        }
        if ids.is_empty() {
            return dim_err("gather_rows: no ids");
        }
        let (rows, cols) = (shape[0], shape[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return contract_err(format!(
                "gather_rows: id {bad} outside table of {rows} rows"
            ));
        }
        let t = self.graph.value_of(self.id);
        let mut out = Vec::with_capacity(ids.len() * cols);
        for &i in ids {
            out.extend_from_slice(&t[i * cols..(i + 1) * cols]);
        }
        Ok(self.graph.push(
            vec![ids.len(), cols],
            out,
            Op::Gather {
                table: self.id,
                ids: ids.to_vec(),
                cols,
            },
            self.requires_grad(),
        ))
    }

    /// Picks element `ids[r]` from each row `r` of a matrix.
    pub fn pick(&self, ids: &[usize]) -> Result<Var<'g, F>> {
        let shape = self.shape();
        if shape.len() != 2 || shape[0] != ids.len() {
            return dim_err(format!("pick: {} ids for shape {shape:?}", ids.len()));
        }
        let cols = shape[1];
        if let Some(&bad) = ids.iter().find(|&&i| i >= cols) {
            return contract_err(format!("pick: column {bad} outside {cols} columns"));
        }
        let x = self.graph.value_of(self.id);
        let out = ids
            .iter()
            .enumerate()
            .map(|(r, &c)| x[r * cols + c])
            .collect();
        Ok(self.graph.push(
            vec![ids.len()],
            out,
            Op::Pick {
                x: self.id,
                ids: ids.to_vec(),
                cols,
            },
            self.requires_grad(),
        ))
    }

    /// Repeats every row of a matrix `times` times consecutively.
    pub fn repeat_rows(&self, times: usize) -> Result<Var<'g, F>> {
        let shape = self.shape();
        if shape.len() != 2 || times == 0 {
            return dim_err(format!("repeat_rows: shape {shape:?}, times {times}"));
        }
        let (rows, cols) = (shape[0], shape[1]);
        let x = self.graph.value_of(self.id);
        let mut out = Vec::with_capacity(rows * times * cols);
        for r in 0..rows {
            for _ in 0..times {
                out.extend_from_slice(&x[r * cols..(r + 1) * cols]);
            }
        }
        Ok(self.graph.push(
            vec![rows * times, cols],
            out,
            Op::RepeatRows {
                x: self.id,
                times,
                cols,
            },
            self.requires_grad(),
        ))
    }

    pub fn sum(&self) -> Var<'g, F> {
        let total = self.graph.value_of(self.id).iter().copied().sum();
        self.graph
            .push(vec![1], vec![total], Op::Sum(self.id), self.requires_grad())
    }

    pub fn mean(&self) -> Var<'g, F> {
        let x = self.graph.value_of(self.id);
        let total: F = x.iter().copied().sum();
        let mean = total / F::from_usize(x.len()).unwrap();
        self.graph
            .push(vec![1], vec![mean], Op::Mean(self.id), self.requires_grad())
    }

    /// Sums over the last axis.
    pub fn sum_last(&self) -> Var<'g, F> {
        let shape = self.shape();
        let cols = *shape.last().unwrap();
        let x = self.graph.value_of(self.id);
        let out: Vec<F> = x.chunks(cols).map(|r| r.iter().copied().sum()).collect();
        let mut new_shape = shape[..shape.len() - 1].to_vec();
        if new_shape.is_empty() {
            new_shape.push(1);
        }
        self.graph.push(
            new_shape,
            out,
            Op::SumLast { x: self.id, cols },
            self.requires_grad(),
        )
    }

    /// Scales every row of a matrix to unit L2 norm; all-zero rows stay zero.
    pub fn normalize_rows(&self) -> Result<Var<'g, F>> {
        let shape = self.shape();
        if shape.len() != 2 {
            return dim_err(format!("normalize_rows: expected a matrix, got {shape:?}"));
        }
        let cols = shape[1];
        let x = self.graph.value_of(self.id);
        let mut out = vec![F::zero(); x.len()];
        let mut norms = Vec::with_capacity(shape[0]);
        for (orow, xrow) in out.chunks_mut(cols).zip(x.chunks(cols)) {
            let norm = xrow.iter().map(|&v| v * v).sum::<F>().sqrt();
            if norm > F::zero() {
                orow.iter_mut().zip(xrow).for_each(|(o, &v)| *o = v / norm);
            }
            norms.push(norm);
        }
        Ok(self.graph.push(
            shape,
            out,
            Op::NormalizeRows {
                x: self.id,
                cols,
                norms,
            },
            self.requires_grad(),
        ))
    }

    pub fn backward(&self) -> Result<()> {
        self.graph.backward(*self)
    }
}

/// Concatenates along `axis`; all other extents must agree.
pub fn concat<'g, F: Real>(parts: &[Var<'g, F>], axis: usize) -> Result<Var<'g, F>> {
    let Some(first) = parts.first() else {
        return dim_err("concat: no inputs");
    };
    let graph = first.graph;
    let base = first.shape();
    if axis >= base.len() {
        return dim_err(format!("concat: axis {axis} out of range for {base:?}"));
    }
    let mut shapes = Vec::with_capacity(parts.len());
    for p in parts {
        first.same_graph(p);
        let s = p.shape();
        let compatible = s.len() == base.len()
            && s.iter()
                .zip(&base)
                .enumerate()
                .all(|(i, (a, b))| i == axis || a == b);
        if !compatible {
            return dim_err(format!(
                "concat: {s:?} incompatible with {base:?} along axis {axis}"
            ));
        }
        shapes.push(s);
    }
    let outer = numel(&base[..axis]);
    let inner = numel(&base[axis + 1..]);
    let widths: Vec<usize> = shapes.iter().map(|s| s[axis] * inner).collect();
    let total: usize = widths.iter().sum();
    let values: Vec<_> = parts.iter().map(|p| graph.value_of(p.id)).collect();
    let mut out = Vec::with_capacity(outer * total);
    for o in 0..outer {
        for (v, &w) in values.iter().zip(&widths) {
            out.extend_from_slice(&v[o * w..(o + 1) * w]);
        }
    }
    let mut shape = base;
    shape[axis] = total / inner;
    let rg = parts.iter().any(|p| p.requires_grad());
    Ok(graph.push(
        shape,
        out,
        Op::Concat {
            parts: parts.iter().map(|p| p.id).collect(),
            outer,
            widths,
        },
        rg,
    ))
}
