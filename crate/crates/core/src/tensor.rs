//! Dense row-major `f64` tensors and the primitive kernels the model is
//! built from.
//!
//! Every primitive is a pure function of its inputs. The [`Graph`] tape in
//! [`crate::graph`] calls [`forward_op`] for values and records enough to run
//! the matching adjoint.
//!
//! [`Graph`]: crate::graph::Graph

use crate::error::{NmtError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(NmtError::shape("tensor", format!("zero extent in {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(NmtError::shape(
                "tensor",
                format!("shape {shape:?} needs {n} values, got {}", data.len()),
            ));
        }
        Ok(Tensor {
            shape,
            data,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
            grad: None,
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let mut t = Tensor::zeros(shape);
        t.data.iter_mut().for_each(|v| *v = value);
        t
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
            grad: None,
        }
    }

    /// A `rows x cols` matrix from row-major data.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn row(data: Vec<f64>) -> Result<Self> {
        let n = data.len();
        Tensor::new(vec![1, n], data)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    /// Rows of a matrix view; 1-d tensors are a single row.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 | 1 => 1,
            _ => self.shape[..self.shape.len() - 1].iter().product(),
        }
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    pub fn row_slice(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn get2(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn grad_mut(&mut self) -> Option<&mut Vec<f64>> {
        self.grad.as_mut()
    }

    /// Turns on gradient tracking, allocating a zeroed gradient slot.
    pub fn track(&mut self) {
        if self.grad.is_none() {
            self.grad = Some(vec![0.0; self.data.len()]);
        }
    }

    pub fn is_tracked(&self) -> bool {
        self.grad.is_some()
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn without_grad(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.clone(),
            grad: None,
        }
    }

    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.iter().any(|&d| d == 0) {
            return Err(NmtError::shape(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape),
            ));
        }
        self.shape = shape;
        if let Some(g) = self.grad.as_mut() {
            debug_assert_eq!(g.len(), n);
        }
        Ok(self)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn argmax(&self) -> usize {
        argmax(&self.data)
    }
}

/// Index of the largest value; ties go to the smallest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Primitive operations. Matrices are `rows x cols`; vectors are `1 x n`
/// matrices. Elementwise binary ops require equal shapes, except `Add` whose
/// second operand may be a trailing bias vector of length `cols`.
#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    Matmul,
    Add,
    Mul,
    /// Elementwise product where operand 0 is the signal and operand 1 a gate.
    /// Numerically identical to `Mul`; relevance propagation treats it apart.
    Gate,
    Sigmoid,
    Tanh,
    /// Row softmax; masked entries (mask value 0) get probability exactly 0.
    SoftmaxRows { mask: Option<Vec<f64>> },
    LogSoftmaxRows,
    /// Column-wise concatenation of matrices with equal row counts.
    Concat,
    /// Columns `start..end`.
    Slice { start: usize, end: usize },
    Sum,
    Mean,
    /// Gathers rows of the table (operand 0) by id.
    LookupRows { ids: Vec<usize> },
    Log,
    Exp,
    MaximumPairwise,
    /// `Σ_m x_m · W_m (+ b)`; operands alternate `x_0, W_0, x_1, W_1, ...`
    /// followed by an optional bias.
    Affine { has_bias: bool },
    Scale(f64),
    AddScalar(f64),
    /// Scales row `i` of operand 0 by the single entry in row `i` of operand 1.
    ScaleRows,
    /// One entry per row: `out[i] = x[i, ids[i]]`, shape `rows x 1`.
    Pick { ids: Vec<usize> },
    Reshape { shape: Vec<usize> },
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Matmul => "matmul",
            Op::Add => "add",
            Op::Mul => "mul",
            Op::Gate => "gate",
            Op::Sigmoid => "sigmoid",
            Op::Tanh => "tanh",
            Op::SoftmaxRows { .. } => "softmax_rows",
            Op::LogSoftmaxRows => "log_softmax_rows",
            Op::Concat => "concat",
            Op::Slice { .. } => "slice",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::LookupRows { .. } => "lookup_rows",
            Op::Log => "log",
            Op::Exp => "exp",
            Op::MaximumPairwise => "maximum_pairwise",
            Op::Affine { .. } => "affine",
            Op::Scale(_) => "scale",
            Op::AddScalar(_) => "add_scalar",
            Op::ScaleRows => "scale_rows",
            Op::Pick { .. } => "pick",
            Op::Reshape { .. } => "reshape",
        }
    }
}

fn arity(op: &'static str, inputs: &[&Tensor], n: usize) -> Result<()> {
    if inputs.len() != n {
        return Err(NmtError::shape(
            op,
            format!("expected {n} operands, got {}", inputs.len()),
        ));
    }
    Ok(())
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape != b.shape {
        return Err(NmtError::shape(op, format!("{:?} vs {:?}", a.shape, b.shape)));
    }
    Ok(())
}

fn is_matrix(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    if t.shape.len() != 2 {
        return Err(NmtError::shape(op, format!("expected a matrix, got {:?}", t.shape)));
    }
    Ok((t.shape[0], t.shape[1]))
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor {
        shape: t.shape.clone(),
        data: t.data.iter().map(|&v| f(v)).collect(),
        grad: None,
    }
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor {
        shape: a.shape.clone(),
        data: a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
        grad: None,
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `out += a · b` for row-major `a: r x k`, `b: k x c`.
pub(crate) fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], r: usize, k: usize, c: usize) {
    for i in 0..r {
        let out_row = &mut out[i * c..(i + 1) * c];
        for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * c..(p + 1) * c];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

fn bias_compatible(a: &Tensor, b: &Tensor) -> bool {
    let c = a.cols();
    a.shape.len() == 2 && b.len() == c && (b.shape == [c] || b.shape == [1, c])
}

pub(crate) fn check_softmax_mask(rows: usize, cols: usize, mask: &[f64]) -> Result<()> {
    if mask.len() != rows * cols {
        return Err(NmtError::shape(
            "softmax_rows",
            format!("mask has {} entries for {rows}x{cols}", mask.len()),
        ));
    }
    for r in 0..rows {
        if mask[r * cols..(r + 1) * cols].iter().all(|&m| m == 0.0) {
            return Err(NmtError::invalid(format!(
                "softmax_rows: row {r} is fully masked"
            )));
        }
    }
    Ok(())
}

/// Evaluates a primitive on concrete tensors.
pub fn forward_op(op: &Op, inputs: &[&Tensor]) -> Result<Tensor> {
    let name = op.name();
    match op {
        Op::Matmul => {
            arity(name, inputs, 2)?;
            let (r, k) = is_matrix(name, inputs[0])?;
            let (k2, c) = is_matrix(name, inputs[1])?;
            if k != k2 {
                return Err(NmtError::shape(
                    name,
                    format!("{:?} x {:?}", inputs[0].shape, inputs[1].shape),
                ));
            }
            let mut out = vec![0.0; r * c];
            matmul_acc(&inputs[0].data, &inputs[1].data, &mut out, r, k, c);
            Tensor::matrix(r, c, out)
        }
        Op::Add => {
            arity(name, inputs, 2)?;
            let (a, b) = (inputs[0], inputs[1]);
            if a.shape == b.shape {
                Ok(zip(a, b, |x, y| x + y))
            } else if bias_compatible(a, b) {
                let c = a.cols();
                let mut out = a.data.clone();
                for (i, v) in out.iter_mut().enumerate() {
                    *v += b.data[i % c];
                }
                Tensor::new(a.shape.clone(), out)
            } else {
                Err(NmtError::shape(name, format!("{:?} + {:?}", a.shape, b.shape)))
            }
        }
        Op::Mul | Op::Gate | Op::MaximumPairwise => {
            arity(name, inputs, 2)?;
            same_shape(name, inputs[0], inputs[1])?;
            Ok(match op {
                Op::MaximumPairwise => zip(inputs[0], inputs[1], f64::max),
                _ => zip(inputs[0], inputs[1], |x, y| x * y),
            })
        }
        Op::Sigmoid => {
            arity(name, inputs, 1)?;
            Ok(map(inputs[0], sigmoid))
        }
        Op::Tanh => {
            arity(name, inputs, 1)?;
            Ok(map(inputs[0], f64::tanh))
        }
        Op::Log => {
            arity(name, inputs, 1)?;
            Ok(map(inputs[0], f64::ln))
        }
        Op::Exp => {
            arity(name, inputs, 1)?;
            Ok(map(inputs[0], f64::exp))
        }
        Op::Scale(c) => {
            arity(name, inputs, 1)?;
            Ok(map(inputs[0], |v| v * c))
        }
        Op::AddScalar(c) => {
            arity(name, inputs, 1)?;
            Ok(map(inputs[0], |v| v + c))
        }
        Op::SoftmaxRows { mask } => {
            arity(name, inputs, 1)?;
            let x = inputs[0];
            let (r, c) = (x.rows(), x.cols());
            if let Some(m) = mask {
                check_softmax_mask(r, c, m)?;
            }
            let mut out = vec![0.0; r * c];
            for i in 0..r {
                let row = &x.data[i * c..(i + 1) * c];
                let keep = |j: usize| mask.as_ref().map_or(true, |m| m[i * c + j] != 0.0);
                let max = (0..c)
                    .filter(|&j| keep(j))
                    .map(|j| row[j])
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..c {
                    if keep(j) {
                        let e = (row[j] - max).exp();
                        out[i * c + j] = e;
                        total += e;
                    }
                }
                out[i * c..(i + 1) * c].iter_mut().for_each(|v| *v /= total);
            }
            Tensor::new(x.shape.clone(), out)
        }
        Op::LogSoftmaxRows => {
            arity(name, inputs, 1)?;
            let x = inputs[0];
            let (r, c) = (x.rows(), x.cols());
            let mut out = vec![0.0; r * c];
            for i in 0..r {
                let row = &x.data[i * c..(i + 1) * c];
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                for j in 0..c {
                    out[i * c + j] = row[j] - lse;
                }
            }
            Tensor::new(x.shape.clone(), out)
        }
        Op::Concat => {
            if inputs.is_empty() {
                return Err(NmtError::shape(name, "no operands"));
            }
            let r = is_matrix(name, inputs[0])?.0;
            let mut total = 0;
            for t in inputs {
                let (tr, tc) = is_matrix(name, t)?;
                if tr != r {
                    return Err(NmtError::shape(name, format!("row counts {r} vs {tr}")));
                }
                total += tc;
            }
            let mut out = Vec::with_capacity(r * total);
            for i in 0..r {
                for t in inputs {
                    out.extend_from_slice(t.row_slice(i));
                }
            }
            Tensor::matrix(r, total, out)
        }
        Op::Slice { start, end } => {
            arity(name, inputs, 1)?;
            let (r, c) = is_matrix(name, inputs[0])?;
            if start >= end || *end > c {
                return Err(NmtError::shape(
                    name,
                    format!("columns {start}..{end} of {:?}", inputs[0].shape),
                ));
            }
            let mut out = Vec::with_capacity(r * (end - start));
            for i in 0..r {
                out.extend_from_slice(&inputs[0].row_slice(i)[*start..*end]);
            }
            Tensor::matrix(r, end - start, out)
        }
        Op::Sum => {
            arity(name, inputs, 1)?;
            Ok(Tensor::scalar(inputs[0].data.iter().sum()))
        }
        Op::Mean => {
            arity(name, inputs, 1)?;
            let x = inputs[0];
            Ok(Tensor::scalar(x.data.iter().sum::<f64>() / x.len() as f64))
        }
        Op::LookupRows { ids } => {
            arity(name, inputs, 1)?;
            let (r, c) = is_matrix(name, inputs[0])?;
            if ids.is_empty() {
                return Err(NmtError::shape(name, "no ids"));
            }
            let mut out = Vec::with_capacity(ids.len() * c);
            for &id in ids {
                if id >= r {
                    return Err(NmtError::InvalidId { id, size: r });
                }
                out.extend_from_slice(inputs[0].row_slice(id));
            }
            Tensor::matrix(ids.len(), c, out)
        }
        Op::Affine { has_bias } => {
            let pairs = inputs.len() / 2;
            if pairs == 0 || inputs.len() != 2 * pairs + usize::from(*has_bias) {
                return Err(NmtError::shape(name, format!("{} operands", inputs.len())));
            }
            let r = is_matrix(name, inputs[0])?.0;
            let c = is_matrix(name, inputs[1])?.1;
            let mut out = vec![0.0; r * c];
            for m in 0..pairs {
                let (x, w) = (inputs[2 * m], inputs[2 * m + 1]);
                let (xr, k) = is_matrix(name, x)?;
                let (k2, wc) = is_matrix(name, w)?;
                if xr != r || k != k2 || wc != c {
                    return Err(NmtError::shape(
                        name,
                        format!("term {m}: {:?} x {:?} into {r}x{c}", x.shape, w.shape),
                    ));
                }
                matmul_acc(&x.data, &w.data, &mut out, r, k, c);
            }
            if *has_bias {
                let b = inputs[2 * pairs];
                if b.len() != c {
                    return Err(NmtError::shape(name, format!("bias {:?} for {c} columns", b.shape)));
                }
                for (i, v) in out.iter_mut().enumerate() {
                    *v += b.data[i % c];
                }
            }
            Tensor::matrix(r, c, out)
        }
        Op::ScaleRows => {
            arity(name, inputs, 2)?;
            let (r, c) = is_matrix(name, inputs[0])?;
            let s = inputs[1];
            if s.len() != r {
                return Err(NmtError::shape(
                    name,
                    format!("{:?} scaled by {:?}", inputs[0].shape, s.shape),
                ));
            }
            let mut out = inputs[0].data.clone();
            for i in 0..r {
                out[i * c..(i + 1) * c].iter_mut().for_each(|v| *v *= s.data[i]);
            }
            Tensor::matrix(r, c, out)
        }
        Op::Pick { ids } => {
            arity(name, inputs, 1)?;
            let (r, c) = is_matrix(name, inputs[0])?;
            if ids.len() != r {
                return Err(NmtError::shape(name, format!("{} ids for {r} rows", ids.len())));
            }
            let mut out = Vec::with_capacity(r);
            for (i, &id) in ids.iter().enumerate() {
                if id >= c {
                    return Err(NmtError::InvalidId { id, size: c });
                }
                out.push(inputs[0].data[i * c + id]);
            }
            Tensor::matrix(r, 1, out)
        }
        Op::Reshape { shape } => {
            arity(name, inputs, 1)?;
            inputs[0].without_grad().reshaped(shape.clone())
        }
    }
}

/// Scales every gradient by `max_norm / g` when the global L2 norm `g`
/// exceeds `max_norm`. Returns `g`. A non-finite norm leaves the gradients
/// untouched.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> Result<f64> {
    if !(max_norm > 0.0) {
        return Err(NmtError::invalid(format!("max_norm must be positive, got {max_norm}")));
    }
    let norm = grads
        .iter()
        .flat_map(|g| g.data.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm.is_finite() && norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data.iter_mut().for_each(|v| *v *= s);
        }
    }
    Ok(norm)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seeded(rows: usize, cols: usize, seed: u64) -> Tensor {
        // small LCG so the test does not depend on the RNG crate
        let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        let data = (0..rows * cols)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect();
        Tensor::matrix(rows, cols, data).unwrap()
    }

    #[test]
    fn sigmoid_at_zero() {
        let x = Tensor::row(vec![0.0, 0.0]).unwrap();
        let y = forward_op(&Op::Sigmoid, &[&x]).unwrap();
        assert_eq!(y.data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_uniform_logits() {
        let x = Tensor::row(vec![1.0, 1.0, 1.0]).unwrap();
        let y = forward_op(&Op::SoftmaxRows { mask: None }, &[&x]).unwrap();
        for v in y.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_masked_entries_are_exactly_zero() {
        let x = Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 0.5, -1.0, 4.0]).unwrap();
        let mask = vec![1.0, 1.0, 0.0, 1.0, 0.0, 0.0];
        let y = forward_op(&Op::SoftmaxRows { mask: Some(mask) }, &[&x]).unwrap();
        assert_eq!(y.get2(0, 2), 0.0);
        assert_eq!(y.get2(1, 1), 0.0);
        assert_eq!(y.get2(1, 0), 1.0);
        let fully = forward_op(
            &Op::SoftmaxRows {
                mask: Some(vec![1.0, 1.0, 1.0, 0.0, 0.0, 0.0]),
            },
            &[&x],
        );
        assert!(fully.is_err());
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let a = seeded(2, 3, 1);
        let b = seeded(3, 2, 2);
        let y = forward_op(&Op::Matmul, &[&a, &b]).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                let mut acc = 0.0;
                for k in 0..3 {
                    acc += a.get2(i, k) * b.get2(k, j);
                }
                assert!((y.get2(i, j) - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn shape_errors_name_the_op() {
        let a = seeded(2, 3, 1);
        let b = seeded(2, 3, 2);
        let err = forward_op(&Op::Matmul, &[&a, &b]).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("[2, 3]"), "{err}");
        let err = forward_op(&Op::Mul, &[&a, &seeded(3, 2, 0)]).unwrap_err().to_string();
        assert!(err.contains("mul"), "{err}");
    }

    #[test]
    fn add_broadcasts_trailing_bias_only() {
        let a = seeded(2, 3, 1);
        let b = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let y = forward_op(&Op::Add, &[&a, &b]).unwrap();
        assert!((y.get2(1, 2) - (a.get2(1, 2) + 3.0)).abs() < 1e-15);
        let col = seeded(2, 1, 3);
        assert!(forward_op(&Op::Add, &[&a, &col]).is_err());
    }

    #[test]
    fn clip_examples() {
        let mut g = vec![Tensor::scalar(3.0), Tensor::scalar(4.0)];
        assert_eq!(clip_global_norm(&mut g, 10.0).unwrap(), 5.0);
        assert_eq!(g[0].item(), 3.0);
        let n = clip_global_norm(&mut g, 1.0).unwrap();
        assert_eq!(n, 5.0);
        assert!((g[0].item() - 0.6).abs() < 1e-15 && (g[1].item() - 0.8).abs() < 1e-15);

        let mut bad = vec![Tensor::scalar(f64::NAN), Tensor::scalar(4.0)];
        let n = clip_global_norm(&mut bad, 1.0).unwrap();
        assert!(!n.is_finite());
        assert_eq!(bad[1].item(), 4.0);

        assert_eq!(clip_global_norm(&mut [], 1.0).unwrap(), 0.0);
    }

    #[test]
    fn tensor_invariants() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(vec![0, 2], vec![]).is_err());
        let mut t = Tensor::zeros(&[2, 3]);
        t.track();
        assert_eq!(t.grad().unwrap().len(), 6);
    }
}
