//! Reverse-mode automatic differentiation over a dynamic tape.
//!
//! A [`Graph`] records every primitive applied to its nodes in execution
//! order, so the recording order is a topological order and the backward
//! sweep simply walks the tape in reverse. A fresh graph is built for every
//! training step.

use crate::error::{NmtError, Result};
use crate::tensor::{forward_op, Op, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct Node {
    pub value: Tensor,
    /// `None` for leaves.
    pub op: Option<Op>,
    pub inputs: Vec<Var>,
    requires_grad: bool,
}

impl Node {
    pub fn is_leaf(&self) -> bool {
        self.op.is_none()
    }
}

#[derive(Debug, Default, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
}

macro_rules! unary {
    ($($name:ident => $op:expr),* $(,)?) => {
        $(pub fn $name(&mut self, x: Var) -> Result<Var> {
            self.apply($op, &[x])
        })*
    };
}

macro_rules! binary {
    ($($name:ident => $op:expr),* $(,)?) => {
        $(pub fn $name(&mut self, a: Var, b: Var) -> Result<Var> {
            self.apply($op, &[a, b])
        })*
    };
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds a leaf. Tracked tensors (those with a gradient slot) receive
    /// gradients on [`Graph::backward`].
    pub fn leaf(&mut self, value: Tensor) -> Var {
        let requires_grad = value.is_tracked();
        self.nodes.push(Node {
            value,
            op: None,
            inputs: Vec::new(),
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Adds a tracked leaf.
    pub fn param(&mut self, mut value: Tensor) -> Var {
        value.track();
        self.leaf(value)
    }

    /// Adds an untracked leaf.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value.without_grad())
    }

    pub fn apply(&mut self, op: Op, inputs: &[Var]) -> Result<Var> {
        let value = {
            let vals: Vec<&Tensor> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            forward_op(&op, &vals)?
        };
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op: Some(op),
            inputs: inputs.to_vec(),
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Drops every node recorded after the first `len`.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
    }

    pub fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Accumulated gradient of a tracked leaf.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.value.zero_grad();
        }
    }

    unary! {
        sigmoid => Op::Sigmoid,
        tanh => Op::Tanh,
        log => Op::Log,
        exp => Op::Exp,
        sum => Op::Sum,
        mean => Op::Mean,
        log_softmax_rows => Op::LogSoftmaxRows,
    }

    binary! {
        matmul => Op::Matmul,
        add => Op::Add,
        mul => Op::Mul,
        gate => Op::Gate,
        maximum => Op::MaximumPairwise,
        scale_rows => Op::ScaleRows,
    }

    pub fn softmax_rows(&mut self, x: Var, mask: Option<Vec<f64>>) -> Result<Var> {
        self.apply(Op::SoftmaxRows { mask }, &[x])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.apply(Op::Scale(c), &[x])
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        self.apply(Op::AddScalar(c), &[x])
    }

    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        self.apply(Op::Concat, xs)
    }

    pub fn slice(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        self.apply(Op::Slice { start, end }, &[x])
    }

    pub fn lookup_rows(&mut self, table: Var, ids: Vec<usize>) -> Result<Var> {
        self.apply(Op::LookupRows { ids }, &[table])
    }

    pub fn pick(&mut self, x: Var, ids: Vec<usize>) -> Result<Var> {
        self.apply(Op::Pick { ids }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        self.apply(Op::Reshape { shape }, &[x])
    }

    /// `Σ x_m · W_m + b`.
    pub fn affine(&mut self, terms: &[(Var, Var)], bias: Option<Var>) -> Result<Var> {
        let mut inputs: Vec<Var> = terms.iter().flat_map(|&(x, w)| [x, w]).collect();
        inputs.extend(bias);
        self.apply(
            Op::Affine {
                has_bias: bias.is_some(),
            },
            &inputs,
        )
    }

    /// Back-propagates from a scalar `loss`, adding `dloss/dleaf` into every
    /// tracked leaf's gradient slot. Gradients accumulate across calls.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes.is_empty() {
            return Ok(());
        }
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(NmtError::shape(
                "backward",
                format!("loss must be scalar, got {:?}", self.nodes[loss.0].value.shape()),
            ));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(dy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(op) = &node.op else {
                grads[i] = Some(dy);
                continue;
            };
            let contributions = self.adjoint(op, &node.inputs, &node.value, &dy);
            for (input, g) in node.inputs.iter().zip(contributions) {
                let Some(g) = g else { continue };
                if !self.wants(*input) {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            if node.is_leaf() {
                if let (Some(g), Some(slot)) = (g, node.value.grad_mut()) {
                    slot.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
                }
            }
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Vector-Jacobian products for each operand (`None` where not needed).
    fn adjoint(&self, op: &Op, inputs: &[Var], y: &Tensor, dy: &[f64]) -> Vec<Option<Vec<f64>>> {
        let val = |k: usize| &self.nodes[inputs[k].0].value;
        let want = |k: usize| self.wants(inputs[k]);
        let elementwise = |f: &dyn Fn(usize) -> f64| -> Vec<Option<Vec<f64>>> {
            vec![Some((0..dy.len()).map(|i| dy[i] * f(i)).collect())]
        };
        match op {
            Op::Matmul => {
                let (a, b) = (val(0), val(1));
                let (r, k, c) = (a.rows(), a.cols(), b.cols());
                let da = want(0).then(|| matmul_bt(dy, b.data(), r, c, k));
                let db = want(1).then(|| matmul_at(a.data(), dy, r, k, c));
                vec![da, db]
            }
            Op::Add => {
                let b = val(1);
                let db = want(1).then(|| {
                    if b.len() == dy.len() {
                        dy.to_vec()
                    } else {
                        col_sums(dy, b.len())
                    }
                });
                vec![want(0).then(|| dy.to_vec()), db]
            }
            Op::Mul | Op::Gate => {
                let (a, b) = (val(0).data(), val(1).data());
                vec![
                    want(0).then(|| dy.iter().zip(b).map(|(g, v)| g * v).collect()),
                    want(1).then(|| dy.iter().zip(a).map(|(g, v)| g * v).collect()),
                ]
            }
            Op::MaximumPairwise => {
                let (a, b) = (val(0).data(), val(1).data());
                let first: Vec<bool> = a.iter().zip(b).map(|(x, y)| x >= y).collect();
                vec![
                    want(0).then(|| dy.iter().zip(&first).map(|(g, &f)| if f { *g } else { 0.0 }).collect()),
                    want(1).then(|| dy.iter().zip(&first).map(|(g, &f)| if f { 0.0 } else { *g }).collect()),
                ]
            }
            Op::Sigmoid => {
                let yv = y.data();
                elementwise(&|i| yv[i] * (1.0 - yv[i]))
            }
            Op::Tanh => {
                let yv = y.data();
                elementwise(&|i| 1.0 - yv[i] * yv[i])
            }
            Op::Log => {
                let x = val(0).data();
                elementwise(&|i| 1.0 / x[i])
            }
            Op::Exp => {
                let yv = y.data();
                elementwise(&|i| yv[i])
            }
            Op::Scale(c) => elementwise(&|_| *c),
            Op::AddScalar(_) | Op::Reshape { .. } => vec![Some(dy.to_vec())],
            Op::SoftmaxRows { .. } => {
                let (r, c) = (y.rows(), y.cols());
                let yv = y.data();
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    let row = i * c..(i + 1) * c;
                    let dot: f64 = yv[row.clone()].iter().zip(&dy[row.clone()]).map(|(a, b)| a * b).sum();
                    for j in row {
                        dx[j] = yv[j] * (dy[j] - dot);
                    }
                }
                vec![Some(dx)]
            }
            Op::LogSoftmaxRows => {
                let (r, c) = (y.rows(), y.cols());
                let yv = y.data();
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    let row = i * c..(i + 1) * c;
                    let total: f64 = dy[row.clone()].iter().sum();
                    for j in row {
                        dx[j] = dy[j] - yv[j].exp() * total;
                    }
                }
                vec![Some(dx)]
            }
            Op::Concat => {
                let r = y.rows();
                let total = y.cols();
                let mut offset = 0;
                let mut out = Vec::with_capacity(inputs.len());
                for k in 0..inputs.len() {
                    let c = val(k).cols();
                    out.push(want(k).then(|| {
                        let mut g = Vec::with_capacity(r * c);
                        for i in 0..r {
                            g.extend_from_slice(&dy[i * total + offset..i * total + offset + c]);
                        }
                        g
                    }));
                    offset += c;
                }
                out
            }
            Op::Slice { start, end } => {
                let x = val(0);
                let (r, c) = (x.rows(), x.cols());
                let w = end - start;
                let mut g = vec![0.0; r * c];
                for i in 0..r {
                    g[i * c + start..i * c + end].copy_from_slice(&dy[i * w..(i + 1) * w]);
                }
                vec![Some(g)]
            }
            Op::Sum => vec![Some(vec![dy[0]; val(0).len()])],
            Op::Mean => {
                let n = val(0).len();
                vec![Some(vec![dy[0] / n as f64; n])]
            }
            Op::LookupRows { ids } => {
                let table = val(0);
                let c = table.cols();
                let mut g = vec![0.0; table.len()];
                for (k, &id) in ids.iter().enumerate() {
                    g[id * c..(id + 1) * c]
                        .iter_mut()
                        .zip(&dy[k * c..(k + 1) * c])
                        .for_each(|(a, b)| *a += b);
                }
                vec![Some(g)]
            }
            Op::Affine { has_bias } => {
                let pairs = inputs.len() / 2;
                let r = y.rows();
                let c = y.cols();
                let mut out = Vec::with_capacity(inputs.len());
                for m in 0..pairs {
                    let (x, w) = (val(2 * m), val(2 * m + 1));
                    let k = x.cols();
                    out.push(want(2 * m).then(|| matmul_bt(dy, w.data(), r, c, k)));
                    out.push(want(2 * m + 1).then(|| matmul_at(x.data(), dy, r, k, c)));
                }
                if *has_bias {
                    out.push(want(2 * pairs).then(|| col_sums(dy, c)));
                }
                out
            }
            Op::ScaleRows => {
                let (x, s) = (val(0), val(1));
                let c = x.cols();
                let dx = want(0).then(|| {
                    dy.iter()
                        .enumerate()
                        .map(|(i, g)| g * s.data()[i / c])
                        .collect()
                });
                let ds = want(1).then(|| {
                    (0..x.rows())
                        .map(|i| {
                            x.row_slice(i)
                                .iter()
                                .zip(&dy[i * c..(i + 1) * c])
                                .map(|(a, b)| a * b)
                                .sum()
                        })
                        .collect()
                });
                vec![dx, ds]
            }
            Op::Pick { ids } => {
                let x = val(0);
                let c = x.cols();
                let mut g = vec![0.0; x.len()];
                for (i, &id) in ids.iter().enumerate() {
                    g[i * c + id] = dy[i];
                }
                vec![Some(g)]
            }
        }
    }
}

/// `dy (r x c) · bᵀ` where `b` is `k x c`; result `r x k`.
fn matmul_bt(dy: &[f64], b: &[f64], r: usize, c: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * k];
    for i in 0..r {
        let g = &dy[i * c..(i + 1) * c];
        for p in 0..k {
            out[i * k + p] = g.iter().zip(&b[p * c..(p + 1) * c]).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `aᵀ (k x r) · dy (r x c)`; result `k x c`.
fn matmul_at(a: &[f64], dy: &[f64], r: usize, k: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * c];
    for i in 0..r {
        let g = &dy[i * c..(i + 1) * c];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            out[p * c..(p + 1) * c].iter_mut().zip(g).for_each(|(o, x)| *o += av * x);
        }
    }
    out
}

fn col_sums(dy: &[f64], c: usize) -> Vec<f64> {
    let mut out = vec![0.0; c];
    for (i, g) in dy.iter().enumerate() {
        out[i % c] += g;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_sum_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::row(vec![1.0, 2.0, 3.0]).unwrap());
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum(sq).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 4.0, 6.0]);
        // second pass accumulates
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[4.0, 8.0, 12.0]);
    }

    #[test]
    fn constant_loss_leaves_grads_zero() {
        let mut g = Graph::new();
        let x = g.param(Tensor::row(vec![1.0, 2.0]).unwrap());
        let c = g.constant(Tensor::row(vec![5.0, 6.0]).unwrap());
        let loss = g.sum(c).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_ignores_empty() {
        let mut g = Graph::new();
        g.backward(Var(0)).unwrap();
        let x = g.param(Tensor::row(vec![1.0, 2.0]).unwrap());
        assert!(g.backward(x).is_err());
    }
}
