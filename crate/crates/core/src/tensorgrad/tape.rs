//! Define-by-run tape. Every op appends a node holding its output; node ids
//! increase in creation order, so walking the tape backwards is a reverse
//! topological order and each node is visited once.

use super::tensor::{gemm, Tensor, TensorError};

/// Lower clamp applied to probabilities inside cross-entropy.
pub const PROB_FLOOR: f64 = 1e-12;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How the right operand of a binary op is broadcast against the left one.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Bcast {
    Same,
    /// `1×n` against `m×n`.
    Row,
    /// `m×1` against `m×n`.
    Col,
    /// `1×1` against anything.
    Scalar,
}

impl Bcast {
    fn resolve(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Result<Self, TensorError> {
        let mismatch = || TensorError::ShapeMismatch {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        };
        if lhs == rhs {
            return Ok(Bcast::Same);
        }
        match (lhs, rhs) {
            (_, [1, 1]) => Ok(Bcast::Scalar),
            ([_, n], [1, k]) if n == k => Ok(Bcast::Row),
            ([m, _], [k, 1]) if m == k => Ok(Bcast::Col),
            _ => Err(mismatch()),
        }
    }

    #[inline]
    fn index(self, flat: usize, cols: usize) -> usize {
        match self {
            Bcast::Same => flat,
            Bcast::Row => flat % cols,
            Bcast::Col => flat / cols,
            Bcast::Scalar => 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

impl BinOp {
    fn name(self) -> &'static str {
        match self {
            BinOp::Add => "add",
            BinOp::Sub => "sub",
            BinOp::Mul => "mul",
            BinOp::Div => "div",
        }
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Binary(BinOp, Var, Var, Bcast),
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { input: Var, axis: usize, start: usize },
    Relu(Var),
    Sigmoid(Var),
    Softmax { input: Var, axis: usize },
    Sum(Var),
    Mean(Var),
    SumAxis { input: Var, axis: usize },
    Mse(Var, Var),
    CrossEntropy { probs: Var, target: Var },
    GatherRows { input: Var, index: Vec<usize> },
    ScatterAddRows { input: Var, index: Vec<usize> },
    Scale(Var, f64),
    AddScalar(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients from one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of a trainable leaf. Leaves the loss does not reach get zeros.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn axis_dims(op: &'static str, t: &Tensor, axis: usize) -> Result<(usize, usize), TensorError> {
    let dims = t.dims2(op)?;
    if axis > 1 {
        return Err(TensorError::Invalid {
            op,
            reason: format!("axis {axis} out of range for rank 2"),
        });
    }
    Ok(dims)
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Sign of every ReLU input on the tape, in recording order. Two points
    /// with equal patterns lie on the same linear piece of every ReLU.
    pub fn relu_pattern(&self) -> Vec<bool> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu(a) => Some(self.value(a).data().iter().map(|&v| v > 0.0)),
                _ => None,
            })
            .flatten()
            .collect()
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op, needs_grad: bool) -> Result<Var, TensorError> {
        if cfg!(debug_assertions) && !value.is_finite() {
            return Err(TensorError::NonFinite { op: op_name });
        }
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Trainable leaf; receives a gradient from [`Tape::backward`].
    pub fn param(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ar, ac) = self.value(a).dims2("matmul")?;
        let (br, bc) = self.value(b).dims2("matmul")?;
        if ac != br {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: vec![ar, ac],
                rhs: vec![br, bc],
            });
        }
        let mut out = vec![0.0; ar * bc];
        gemm(
            self.value(a).data(),
            (ar, ac),
            false,
            self.value(b).data(),
            (br, bc),
            false,
            &mut out,
            false,
        );
        let ng = self.needs(a) || self.needs(b);
        self.push("matmul", Tensor::from_parts(vec![ar, bc], out), Op::MatMul(a, b), ng)
    }

    fn binary(&mut self, kind: BinOp, a: Var, b: Var) -> Result<Var, TensorError> {
        let name = kind.name();
        let (av, bv) = (self.value(a), self.value(b));
        let bc = Bcast::resolve(name, av.shape(), bv.shape())?;
        let cols = av.cols();
        let (ad, bd) = (av.data(), bv.data());
        let out: Vec<f64> = match kind {
            BinOp::Add => (0..ad.len()).map(|t| ad[t] + bd[bc.index(t, cols)]).collect(),
            BinOp::Sub => (0..ad.len()).map(|t| ad[t] - bd[bc.index(t, cols)]).collect(),
            BinOp::Mul => (0..ad.len()).map(|t| ad[t] * bd[bc.index(t, cols)]).collect(),
            BinOp::Div => {
                if bd.iter().any(|&d| d == 0.0) {
                    return Err(TensorError::Invalid {
                        op: "div",
                        reason: "division by zero".into(),
                    });
                }
                (0..ad.len()).map(|t| ad[t] / bd[bc.index(t, cols)]).collect()
            }
        };
        let shape = av.shape().to_vec();
        let ng = self.needs(a) || self.needs(b);
        self.push(name, Tensor::from_parts(shape, out), Op::Binary(kind, a, b, bc), ng)
    }

    /// Element-wise sum; `b` may be a row, column or scalar broadcast.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(BinOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(BinOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(BinOp::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(BinOp::Div, a, b)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Result<Var, TensorError> {
        let v = self.value(a);
        let out = v.data().iter().map(|x| x * k).collect();
        let t = Tensor::from_parts(v.shape().to_vec(), out);
        let ng = self.needs(a);
        self.push("scale", t, Op::Scale(a, k), ng)
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Result<Var, TensorError> {
        let v = self.value(a);
        let out = v.data().iter().map(|x| x + k).collect();
        let t = Tensor::from_parts(v.shape().to_vec(), out);
        let ng = self.needs(a);
        self.push("add_scalar", t, Op::AddScalar(a), ng)
    }

    /// Concatenates rank-2 tensors along `axis` (0 = rows, 1 = columns).
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var, TensorError> {
        let first = *inputs.first().ok_or(TensorError::Invalid {
            op: "concat",
            reason: "no inputs".into(),
        })?;
        let (r0, c0) = axis_dims("concat", self.value(first), axis)?;
        let mut dims = Vec::with_capacity(inputs.len());
        for &v in inputs {
            let (r, c) = self.value(v).dims2("concat")?;
            if (axis == 0 && c != c0) || (axis == 1 && r != r0) {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: vec![r0, c0],
                    rhs: vec![r, c],
                });
            }
            dims.push((r, c));
        }
        let (out_shape, out) = if axis == 0 {
            let rows: usize = dims.iter().map(|d| d.0).sum();
            let mut out = Vec::with_capacity(rows * c0);
            for &v in inputs {
                out.extend_from_slice(self.value(v).data());
            }
            (vec![rows, c0], out)
        } else {
            let cols: usize = dims.iter().map(|d| d.1).sum();
            let mut out = Vec::with_capacity(r0 * cols);
            for r in 0..r0 {
                for &v in inputs {
                    out.extend_from_slice(self.value(v).row_slice(r));
                }
            }
            (vec![r0, cols], out)
        };
        let ng = inputs.iter().any(|&v| self.needs(v));
        self.push(
            "concat",
            Tensor::from_parts(out_shape, out),
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            ng,
        )
    }

    /// Rows or columns `start..end` of a rank-2 tensor.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var, TensorError> {
        let (r, c) = axis_dims("slice", self.value(a), axis)?;
        let limit = if axis == 0 { r } else { c };
        if start > end || end > limit {
            return Err(TensorError::Invalid {
                op: "slice",
                reason: format!("range {start}..{end} out of bounds for extent {limit}"),
            });
        }
        let v = self.value(a);
        let (shape, out) = if axis == 0 {
            (vec![end - start, c], v.data()[start * c..end * c].to_vec())
        } else {
            let mut out = Vec::with_capacity(r * (end - start));
            for row in 0..r {
                out.extend_from_slice(&v.row_slice(row)[start..end]);
            }
            (vec![r, end - start], out)
        };
        let ng = self.needs(a);
        self.push(
            "slice",
            Tensor::from_parts(shape, out),
            Op::Slice { input: a, axis, start },
            ng,
        )
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, TensorError> {
        let v = self.value(a);
        let out = v.data().iter().map(|&x| x.max(0.0)).collect();
        let t = Tensor::from_parts(v.shape().to_vec(), out);
        let ng = self.needs(a);
        self.push("relu", t, Op::Relu(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, TensorError> {
        let v = self.value(a);
        let out = v.data().iter().map(|&x| sigmoid(x)).collect();
        let t = Tensor::from_parts(v.shape().to_vec(), out);
        let ng = self.needs(a);
        self.push("sigmoid", t, Op::Sigmoid(a), ng)
    }

    /// Softmax along `axis` (1 normalizes each row).
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var, TensorError> {
        let (r, c) = axis_dims("softmax", self.value(a), axis)?;
        let x = self.value(a).data();
        let mut out = vec![0.0; r * c];
        let (outer, inner, stride_o, stride_i) = if axis == 1 { (r, c, c, 1) } else { (c, r, 1, c) };
        for o in 0..outer {
            let idx = |i: usize| o * stride_o + i * stride_i;
            let max = (0..inner).map(|i| x[idx(i)]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for i in 0..inner {
                let e = (x[idx(i)] - max).exp();
                out[idx(i)] = e;
                total += e;
            }
            for i in 0..inner {
                out[idx(i)] /= total;
            }
        }
        let ng = self.needs(a);
        self.push(
            "softmax",
            Tensor::from_parts(vec![r, c], out),
            Op::Softmax { input: a, axis },
            ng,
        )
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, TensorError> {
        let s = self.value(a).data().iter().sum();
        let ng = self.needs(a);
        self.push("sum", Tensor::from_parts(vec![1, 1], vec![s]), Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, TensorError> {
        let v = self.value(a);
        if v.numel() == 0 {
            return Err(TensorError::Invalid {
                op: "mean",
                reason: "empty tensor".into(),
            });
        }
        let m = v.data().iter().sum::<f64>() / v.numel() as f64;
        let ng = self.needs(a);
        self.push("mean", Tensor::from_parts(vec![1, 1], vec![m]), Op::Mean(a), ng)
    }

    /// Sums out `axis`: axis 0 gives `1×c`, axis 1 gives `r×1`.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var, TensorError> {
        let (r, c) = axis_dims("sum_axis", self.value(a), axis)?;
        let x = self.value(a).data();
        let (shape, out) = if axis == 0 {
            let mut out = vec![0.0; c];
            for row in x.chunks_exact(c.max(1)).take(r) {
                for (o, v) in out.iter_mut().zip(row) {
                    *o += v;
                }
            }
            (vec![1, c], out)
        } else {
            let out = (0..r).map(|i| x[i * c..(i + 1) * c].iter().sum()).collect();
            (vec![r, 1], out)
        };
        let ng = self.needs(a);
        self.push(
            "sum_axis",
            Tensor::from_parts(shape, out),
            Op::SumAxis { input: a, axis },
            ng,
        )
    }

    /// Mean squared difference over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "mse",
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        if av.numel() == 0 {
            return Err(TensorError::Invalid {
                op: "mse",
                reason: "empty tensor".into(),
            });
        }
        let m = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            / av.numel() as f64;
        let ng = self.needs(a) || self.needs(b);
        self.push("mse", Tensor::from_parts(vec![1, 1], vec![m]), Op::Mse(a, b), ng)
    }

    /// `-Σ target · ln(clamp(probs, 1e-12, 1))` summed over all rows.
    /// `target` is treated as a constant.
    pub fn cross_entropy(&mut self, probs: Var, target: Var) -> Result<Var, TensorError> {
        let (pv, tv) = (self.value(probs), self.value(target));
        if pv.shape() != tv.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                lhs: pv.shape().to_vec(),
                rhs: tv.shape().to_vec(),
            });
        }
        let loss: f64 = pv
            .data()
            .iter()
            .zip(tv.data())
            .filter(|(_, &t)| t != 0.0)
            .map(|(&p, &t)| -t * p.clamp(PROB_FLOOR, 1.0).ln())
            .sum();
        let ng = self.needs(probs);
        self.push(
            "cross_entropy",
            Tensor::from_parts(vec![1, 1], vec![loss]),
            Op::CrossEntropy { probs, target },
            ng,
        )
    }

    /// Row `index[i]` of `a` becomes row `i` of the output.
    pub fn gather_rows(&mut self, a: Var, index: &[usize]) -> Result<Var, TensorError> {
        let (r, c) = self.value(a).dims2("gather_rows")?;
        if let Some(&bad) = index.iter().find(|&&i| i >= r) {
            return Err(TensorError::Invalid {
                op: "gather_rows",
                reason: format!("row {bad} out of range for {r} rows"),
            });
        }
        let v = self.value(a);
        let mut out = Vec::with_capacity(index.len() * c);
        for &i in index {
            out.extend_from_slice(v.row_slice(i));
        }
        let ng = self.needs(a);
        self.push(
            "gather_rows",
            Tensor::from_parts(vec![index.len(), c], out),
            Op::GatherRows {
                input: a,
                index: index.to_vec(),
            },
            ng,
        )
    }

    /// Adds row `i` of `a` into output row `index[i]`; output has `rows` rows.
    pub fn scatter_add_rows(&mut self, a: Var, index: &[usize], rows: usize) -> Result<Var, TensorError> {
        let (r, c) = self.value(a).dims2("scatter_add_rows")?;
        if index.len() != r {
            return Err(TensorError::Invalid {
                op: "scatter_add_rows",
                reason: format!("{} indices for {r} rows", index.len()),
            });
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= rows) {
            return Err(TensorError::Invalid {
                op: "scatter_add_rows",
                reason: format!("target row {bad} out of range for {rows} rows"),
            });
        }
        let v = self.value(a);
        let mut out = vec![0.0; rows * c];
        for (i, &dst) in index.iter().enumerate() {
            for (o, x) in out[dst * c..(dst + 1) * c].iter_mut().zip(v.row_slice(i)) {
                *o += x;
            }
        }
        let ng = self.needs(a);
        self.push(
            "scatter_add_rows",
            Tensor::from_parts(vec![rows, c], out),
            Op::ScatterAddRows {
                input: a,
                index: index.to_vec(),
            },
            ng,
        )
    }

    /// Reverse pass from a single-element `loss`. Returns gradients of every
    /// trainable leaf; leaves the loss does not depend on get zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients, TensorError> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(TensorError::NotScalar(lv.shape().to_vec()));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor>> = vec![None; n];
        grads[loss.0] = Some(Tensor::ones(lv.shape()));

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad {
                grads[id] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(node, &g, &mut grads);
        }

        for (id, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.needs_grad {
                if grads[id].is_none() {
                    grads[id] = Some(Tensor::zeros(node.value.shape()));
                }
            } else {
                grads[id] = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, contrib: Vec<f64>) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(t) => {
                for (a, b) in t.data_mut().iter_mut().zip(contrib) {
                    *a += b;
                }
            }
            slot @ None => {
                *slot = Some(Tensor::from_parts(self.value(v).shape().to_vec(), contrib));
            }
        }
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (ar, ac) = (av.rows(), av.cols());
                let (br, bc) = (bv.rows(), bv.cols());
                if self.needs(*a) {
                    let mut ga = vec![0.0; ar * ac];
                    gemm(gd, (ar, bc), false, bv.data(), (br, bc), true, &mut ga, false);
                    self.accumulate(grads, *a, ga);
                }
                if self.needs(*b) {
                    let mut gb = vec![0.0; br * bc];
                    gemm(av.data(), (ar, ac), true, gd, (ar, bc), false, &mut gb, false);
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Binary(kind, a, b, bc) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (ad, bd) = (av.data(), bv.data());
                let cols = av.cols();
                if self.needs(*a) {
                    let ga: Vec<f64> = match kind {
                        BinOp::Add | BinOp::Sub => gd.to_vec(),
                        BinOp::Mul => (0..gd.len()).map(|t| gd[t] * bd[bc.index(t, cols)]).collect(),
                        BinOp::Div => (0..gd.len()).map(|t| gd[t] / bd[bc.index(t, cols)]).collect(),
                    };
                    self.accumulate(grads, *a, ga);
                }
                if self.needs(*b) {
                    let mut gb = vec![0.0; bd.len()];
                    for t in 0..gd.len() {
                        let j = bc.index(t, cols);
                        gb[j] += match kind {
                            BinOp::Add => gd[t],
                            BinOp::Sub => -gd[t],
                            BinOp::Mul => gd[t] * ad[t],
                            BinOp::Div => -gd[t] * out[t] / bd[j],
                        };
                    }
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Concat { inputs, axis } => {
                let (rows, cols) = (g.rows(), g.cols());
                let mut offset = 0;
                for &v in inputs {
                    let (r, c) = (self.value(v).rows(), self.value(v).cols());
                    if self.needs(v) {
                        let part = if *axis == 0 {
                            gd[offset * cols..(offset + r) * cols].to_vec()
                        } else {
                            let mut p = Vec::with_capacity(r * c);
                            for row in 0..rows {
                                p.extend_from_slice(&gd[row * cols + offset..row * cols + offset + c]);
                            }
                            p
                        };
                        self.accumulate(grads, v, part);
                    }
                    offset += if *axis == 0 { r } else { c };
                }
            }
            Op::Slice { input, axis, start } => {
                let iv = self.value(*input);
                let (r, c) = (iv.rows(), iv.cols());
                let mut gi = vec![0.0; r * c];
                if *axis == 0 {
                    gi[start * c..start * c + gd.len()].copy_from_slice(gd);
                } else {
                    let w = g.cols();
                    for row in 0..r {
                        gi[row * c + start..row * c + start + w].copy_from_slice(&gd[row * w..(row + 1) * w]);
                    }
                }
                self.accumulate(grads, *input, gi);
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                let gi = gd.iter().zip(x).map(|(g, &x)| if x > 0.0 { *g } else { 0.0 }).collect();
                self.accumulate(grads, *a, gi);
            }
            Op::Sigmoid(a) => {
                let gi = gd.iter().zip(out).map(|(g, y)| g * y * (1.0 - y)).collect();
                self.accumulate(grads, *a, gi);
            }
            Op::Softmax { input, axis } => {
                let (r, c) = (node.value.rows(), node.value.cols());
                let (outer, inner, so, si) = if *axis == 1 { (r, c, c, 1) } else { (c, r, 1, c) };
                let mut gi = vec![0.0; r * c];
                for o in 0..outer {
                    let idx = |i: usize| o * so + i * si;
                    let dot: f64 = (0..inner).map(|i| gd[idx(i)] * out[idx(i)]).sum();
                    for i in 0..inner {
                        gi[idx(i)] = out[idx(i)] * (gd[idx(i)] - dot);
                    }
                }
                self.accumulate(grads, *input, gi);
            }
            Op::Sum(a) => {
                let n = self.value(*a).numel();
                self.accumulate(grads, *a, vec![gd[0]; n]);
            }
            Op::Mean(a) => {
                let n = self.value(*a).numel();
                self.accumulate(grads, *a, vec![gd[0] / n as f64; n]);
            }
            Op::SumAxis { input, axis } => {
                let iv = self.value(*input);
                let (r, c) = (iv.rows(), iv.cols());
                let gi = (0..r * c)
                    .map(|t| if *axis == 0 { gd[t % c] } else { gd[t / c] })
                    .collect();
                self.accumulate(grads, *input, gi);
            }
            Op::Mse(a, b) => {
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                let k = 2.0 * gd[0] / ad.len() as f64;
                let diff: Vec<f64> = ad.iter().zip(bd).map(|(x, y)| k * (x - y)).collect();
                if self.needs(*b) {
                    self.accumulate(grads, *b, diff.iter().map(|d| -d).collect());
                }
                self.accumulate(grads, *a, diff);
            }
            Op::CrossEntropy { probs, target } => {
                let (pd, td) = (self.value(*probs).data(), self.value(*target).data());
                let gi = pd
                    .iter()
                    .zip(td)
                    .map(|(&p, &t)| {
                        if t == 0.0 || p < PROB_FLOOR || p > 1.0 {
                            0.0
                        } else {
                            -gd[0] * t / p
                        }
                    })
                    .collect();
                self.accumulate(grads, *probs, gi);
            }
            Op::GatherRows { input, index } => {
                let iv = self.value(*input);
                let c = iv.cols();
                let mut gi = vec![0.0; iv.numel()];
                for (i, &src) in index.iter().enumerate() {
                    for (o, x) in gi[src * c..(src + 1) * c].iter_mut().zip(&gd[i * c..(i + 1) * c]) {
                        *o += x;
                    }
                }
                self.accumulate(grads, *input, gi);
            }
            Op::ScatterAddRows { input, index } => {
                let c = g.cols();
                let mut gi = Vec::with_capacity(index.len() * c);
                for &dst in index {
                    gi.extend_from_slice(&gd[dst * c..(dst + 1) * c]);
                }
                self.accumulate(grads, *input, gi);
            }
            Op::Scale(a, k) => {
                self.accumulate(grads, *a, gd.iter().map(|g| g * k).collect());
            }
            Op::AddScalar(a) => {
                self.accumulate(grads, *a, gd.to_vec());
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::row(vec![0.0, 0.0]).unwrap());
        let y = tape.softmax(x, 1).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::matrix(2, 3, vec![1.0, -2.0, 30.0, 0.1, 0.2, -700.0]).unwrap());
        let y = tape.softmax(x, 1).unwrap();
        for r in 0..2 {
            let s: f64 = tape.value(y).row_slice(r).iter().sum();
            assert!((s - 1.0).abs() <= 1e-12);
        }
        let z = tape.softmax(x, 0).unwrap();
        let col0 = tape.value(z).get(0, 0) + tape.value(z).get(1, 0);
        assert!((col0 - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn relu_clips_negatives() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::row(vec![-1.0, 2.0]).unwrap());
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 2.0]);
    }

    #[test]
    fn uniform_cross_entropy_is_ln6() {
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::row(vec![1.0 / 6.0; 6]).unwrap());
        let mut onehot = vec![0.0; 6];
        onehot[4] = 1.0;
        let t = tape.constant(Tensor::row(onehot).unwrap());
        let l = tape.cross_entropy(p, t).unwrap();
        assert!((tape.value(l).item().unwrap() - 6f64.ln()).abs() < 1e-12);
        assert!((6f64.ln() - 1.791759).abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_clamps_zero_probability() {
        let mut tape = Tape::new();
        let p = tape.param(Tensor::row(vec![0.0, 1.0]).unwrap());
        let t = tape.constant(Tensor::row(vec![1.0, 0.0]).unwrap());
        let l = tape.cross_entropy(p, t).unwrap();
        let v = tape.value(l).item().unwrap();
        assert!((v - (-PROB_FLOOR.ln())).abs() < 1e-9);
        let g = tape.backward(l).unwrap();
        assert!(g.get(p).unwrap().is_finite());
    }

    #[test]
    fn identity_matmul() {
        let mut tape = Tape::new();
        let a_t = Tensor::matrix(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let i = tape.constant(Tensor::eye(3));
        let a = tape.constant(a_t.clone());
        let y = tape.matmul(i, a).unwrap();
        assert_eq!(tape.value(y), &a_t);
    }

    #[test]
    fn shape_errors_name_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err();
        assert_eq!(err.to_string(), "matmul: shape mismatch between [2, 3] and [2, 3]");
        let c = tape.constant(Tensor::zeros(&[3, 2]));
        assert!(tape.add(a, c).is_err());
    }

    #[test]
    fn sum_gives_ones_gradient() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::matrix(2, 2, vec![1.0, -3.0, 0.5, 9.0]).unwrap());
        let l = tape.sum(w).unwrap();
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(w).unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn mse_with_itself_has_zero_gradient() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::row(vec![1.0, -2.0, 3.0]).unwrap());
        let l = tape.mse(w, w).unwrap();
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(w).unwrap().data(), &[0.0; 3]);
    }

    #[test]
    fn unreached_param_gets_zeros() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::row(vec![1.0, 2.0]).unwrap());
        let unused = tape.param(Tensor::zeros(&[3, 1]));
        let l = tape.sum(w).unwrap();
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(unused).unwrap().data(), &[0.0; 3]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::row(vec![1.0, 2.0]).unwrap());
        assert_eq!(tape.backward(w).unwrap_err(), TensorError::NotScalar(vec![1, 2]));
    }

    #[test]
    fn shared_parameter_accumulates() {
        // l = sum(w * w) + sum(3w) -> dl/dw = 2w + 3
        let mut tape = Tape::new();
        let w = tape.param(Tensor::row(vec![1.0, -2.0]).unwrap());
        let sq = tape.mul(w, w).unwrap();
        let tri = tape.scale(w, 3.0).unwrap();
        let s1 = tape.sum(sq).unwrap();
        let s2 = tape.sum(tri).unwrap();
        let l = tape.add(s1, s2).unwrap();
        let g = tape.backward(l).unwrap();
        assert!(close(g.get(w).unwrap().data(), &[5.0, -1.0], 1e-12));
    }

    #[test]
    fn broadcasting_forms() {
        let mut tape = Tape::new();
        let m = tape.constant(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let row = tape.constant(Tensor::row(vec![10.0, 20.0]).unwrap());
        let col = tape.constant(Tensor::matrix(2, 1, vec![2.0, 4.0]).unwrap());
        let r = tape.add(m, row).unwrap();
        assert_eq!(tape.value(r).data(), &[11.0, 22.0, 13.0, 24.0]);
        let c = tape.div(m, col).unwrap();
        assert_eq!(tape.value(c).data(), &[0.5, 1.0, 0.75, 1.0]);
    }

    #[test]
    fn gather_and_scatter_are_adjoint() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::matrix(3, 1, vec![1.0, 2.0, 3.0]).unwrap());
        let g = tape.gather_rows(x, &[2, 0, 2]).unwrap();
        assert_eq!(tape.value(g).data(), &[3.0, 1.0, 3.0]);
        let s = tape.scatter_add_rows(g, &[0, 1, 1], 2).unwrap();
        assert_eq!(tape.value(s).data(), &[3.0, 4.0]);
        let l = tape.sum(s).unwrap();
        let grads = tape.backward(l).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 0.0, 2.0]);
    }

    #[test]
    fn concat_and_slice_roundtrip() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::matrix(2, 1, vec![1.0, 2.0]).unwrap());
        let b = tape.constant(Tensor::matrix(2, 2, vec![3.0, 4.0, 5.0, 6.0]).unwrap());
        let c = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.value(c).data(), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
        let s = tape.slice(c, 1, 1, 3).unwrap();
        assert_eq!(tape.value(s), tape.value(b));
        let rows = tape.concat(&[b, b], 0).unwrap();
        assert_eq!(tape.value(rows).shape(), &[4, 2]);
        assert!(tape.slice(c, 1, 2, 4).is_err());
    }
}
