//! Define-by-run computation graph with reverse-mode differentiation.
//!
//! Every op appends a node holding its forward value and whatever it needs
//! for the backward pass. Node ids are assigned in creation order, so the
//! node list is already topologically sorted and `backward` is one reverse
//! sweep. Parameters are borrowed from a [`ParamSet`] rather than copied.

use std::borrow::Cow;

use crate::error::{Result, TensorError};
use crate::kernels::{self, gemm, MatRef};
use crate::params::{ParamId, ParamSet};
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gather {
        table: Var,
        bags: Vec<Vec<usize>>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<f64>,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    MeanRows(Var),
    Sum(Var),
    Mix {
        weights: Var,
        parts: Vec<Var>,
    },
    SoftmaxCe {
        logits: Var,
        targets: Vec<Vec<usize>>,
        weights: Vec<f64>,
        probs: Vec<f64>,
    },
    PositiveBce {
        logits: Var,
        positives: Vec<Vec<usize>>,
        weights: Vec<f64>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param(_) => "param",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::AddBias(..) => "add_bias",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Softmax(_) => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gather { .. } => "gather",
            Op::Attention { .. } => "attention",
            Op::ConcatCols(_) => "concat_cols",
            Op::ConcatRows(_) => "concat_rows",
            Op::SliceRows { .. } => "slice_rows",
            Op::MeanRows(_) => "mean_rows",
            Op::Sum(_) => "sum",
            Op::Mix { .. } => "mix",
            Op::SoftmaxCe { .. } => "softmax_ce",
            Op::PositiveBce { .. } => "positive_bce",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf | Op::Param(_) => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::AddBias(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Scale(x, _)
            | Op::Relu(x)
            | Op::Sigmoid(x)
            | Op::Softmax(x)
            | Op::MeanRows(x)
            | Op::Sum(x)
            | Op::SliceRows { x, .. } => vec![*x],
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::Gather { table, .. } => vec![*table],
            Op::Attention { q, k, v, .. } => vec![*q, *k, *v],
            Op::ConcatCols(xs) | Op::ConcatRows(xs) => xs.clone(),
            Op::Mix { weights, parts } => {
                let mut v = vec![*weights];
                v.extend(parts);
                v
            }
            Op::SoftmaxCe { logits, .. } | Op::PositiveBce { logits, .. } => vec![*logits],
        }
    }
}

struct Node<'p> {
    value: Cow<'p, Tensor>,
    op: Op,
    needs_grad: bool,
}

/// Location of the first non-finite value found in a graph.
#[derive(Debug, Clone, PartialEq)]
pub struct NonFinite {
    pub var: Var,
    pub op: &'static str,
    pub param: Option<String>,
}

impl std::fmt::Display for NonFinite {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "node {} ({})", self.var.0, self.op)?;
        if let Some(p) = &self.param {
            write!(f, " param `{p}`")?;
        }
        Ok(())
    }
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradients {
    params: Vec<Option<Vec<f64>>>,
    inputs: Vec<(Var, Vec<f64>)>,
}

impl Gradients {
    pub fn param(&self, id: ParamId) -> Option<&[f64]> {
        self.params.get(id.0).and_then(|g| g.as_deref())
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.params
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_deref().map(|g| (ParamId(i), g)))
    }

    /// Gradient of a `requires_grad` input leaf.
    pub fn wrt(&self, var: Var) -> Option<&[f64]> {
        self.inputs
            .iter()
            .find(|(v, _)| *v == var)
            .map(|(_, g)| g.as_slice())
    }

    /// Adds another pass's parameter gradients into this one.
    pub fn add_assign(&mut self, other: &Gradients) {
        if self.params.len() < other.params.len() {
            self.params.resize(other.params.len(), None);
        }
        for (i, g) in other.params.iter().enumerate() {
            let Some(g) = g else { continue };
            match &mut self.params[i] {
                Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(g.clone()),
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.params.iter_mut().flatten() {
            g.iter_mut().for_each(|v| *v *= factor);
        }
    }

    /// Largest absolute entry across the parameter gradients.
    pub fn max_abs(&self) -> f64 {
        self.params
            .iter()
            .flatten()
            .flat_map(|g| g.iter())
            .fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

pub struct Graph<'p> {
    params: Option<&'p ParamSet>,
    param_vars: Vec<Option<Var>>,
    nodes: Vec<Node<'p>>,
}

impl Default for Graph<'static> {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph<'static> {
    /// Graph without parameters; leaves come from [`Graph::input`] only.
    pub fn new() -> Self {
        Graph {
            params: None,
            param_vars: Vec::new(),
            nodes: Vec::new(),
        }
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn rc(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
}

impl<'p> Graph<'p> {
    pub fn with_params(params: &'p ParamSet) -> Self {
        Graph {
            params: Some(params),
            param_vars: vec![None; params.len()],
            nodes: Vec::new(),
        }
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

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let needs_grad = op.inputs().iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Adds a leaf. Its gradient is reported when the tensor `requires_grad`.
    pub fn input(&mut self, t: Tensor) -> Var {
        let needs_grad = t.requires_grad();
        self.nodes.push(Node {
            value: Cow::Owned(t),
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf referencing a parameter. Repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Result<Var> {
        let params = self
            .params
            .ok_or_else(|| TensorError::Contract("graph has no parameter set".into()))?;
        if id.0 >= params.len() {
            return Err(TensorError::Index {
                op: "param",
                index: id.0,
                size: params.len(),
            });
        }
        if let Some(v) = self.param_vars[id.0] {
            return Ok(v);
        }
        self.nodes.push(Node {
            value: Cow::Borrowed(params.get(id)),
            op: Op::Param(id),
            needs_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        Ok(v)
    }

    pub fn param_named(&mut self, name: &str) -> Result<Var> {
        let params = self
            .params
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))?;
        let id = params.id(name)?;
        self.param(id)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.cols() != tb.rows() {
            return Err(shape_err("matmul", ta, tb));
        }
        let (m, k) = rc(ta);
        let n = tb.cols();
        let mut out = vec![0.0; m * n];
        gemm(
            MatRef::new(ta.data(), m, k),
            MatRef::new(tb.data(), k, n),
            &mut out,
            0.0,
        );
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err("add", ta, tb));
        }
        let out = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = ta.shape().to_vec();
        Ok(self.push(Tensor::from_parts(shape, out), Op::Add(a, b)))
    }

    /// Adds a `[n]` (or `[1, n]`) bias to every row of `a`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(bias));
        if tb.rows() != 1 || tb.cols() != ta.cols() {
            return Err(shape_err("add_bias", ta, tb));
        }
        let c = ta.cols();
        let out = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x + tb.data()[i % c])
            .collect();
        let shape = ta.shape().to_vec();
        Ok(self.push(Tensor::from_parts(shape, out), Op::AddBias(a, bias)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err("mul", ta, tb));
        }
        let out = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = ta.shape().to_vec();
        Ok(self.push(Tensor::from_parts(shape, out), Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let t = self.value(x);
        let out = t.data().iter().map(|v| v * factor).collect();
        let shape = t.shape().to_vec();
        self.push(Tensor::from_parts(shape, out), Op::Scale(x, factor))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out = t.data().iter().map(|v| v.max(0.0)).collect();
        let shape = t.shape().to_vec();
        self.push(Tensor::from_parts(shape, out), Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out = t.data().iter().map(|&v| kernels::sigmoid(v)).collect();
        let shape = t.shape().to_vec();
        self.push(Tensor::from_parts(shape, out), Op::Sigmoid(x))
    }

    /// Softmax over the last axis, with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let c = t.cols();
        let mut out = t.data().to_vec();
        out.chunks_mut(c).for_each(kernels::softmax_in_place);
        let shape = t.shape().to_vec();
        self.push(Tensor::from_parts(shape, out), Op::Softmax(x))
    }

    /// Normalizes each row to zero mean and unit variance, then applies
    /// `gain` and `bias` (both `[d]`).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let d = tx.cols();
        if tg.len() != d {
            return Err(shape_err("layer_norm", tx, tg));
        }
        if tb.len() != d {
            return Err(shape_err("layer_norm", tx, tb));
        }
        let rows = tx.rows();
        let mut xhat = vec![0.0; rows * d];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; rows * d];
        for r in 0..rows {
            let row = tx.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let s = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[r] = s;
            for j in 0..d {
                let h = (row[j] - mean) * s;
                xhat[r * d + j] = h;
                out[r * d + j] = h * tg.data()[j] + tb.data()[j];
            }
        }
        let shape = tx.shape().to_vec();
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
        ))
    }

    /// Row lookup: output row `i` is `table[indices[i]]`.
    pub fn embedding(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let bags = indices.iter().map(|&i| vec![i]).collect();
        self.embedding_bag_mean(table, bags)
    }

    /// Output row `i` is the mean of the table rows listed in `bags[i]`.
    pub fn embedding_bag_mean(&mut self, table: Var, bags: Vec<Vec<usize>>) -> Result<Var> {
        let t = self.value(table);
        let (vocab, d) = rc(t);
        if bags.is_empty() {
            return Err(TensorError::Contract(
                "embedding lookup needs >= 1 row".into(),
            ));
        }
        let mut out = vec![0.0; bags.len() * d];
        for (r, bag) in bags.iter().enumerate() {
            if bag.is_empty() {
                return Err(TensorError::Contract(format!("embedding bag {r} is empty")));
            }
            let inv = 1.0 / bag.len() as f64;
            for &idx in bag {
                if idx >= vocab {
                    return Err(TensorError::Index {
                        op: "embedding",
                        index: idx,
                        size: vocab,
                    });
                }
                let src = t.row(idx);
                let dst = &mut out[r * d..(r + 1) * d];
                dst.iter_mut().zip(src).for_each(|(o, s)| *o += s * inv);
            }
        }
        let n = bags.len();
        Ok(self.push(
            Tensor::from_parts(vec![n, d], out),
            Op::Gather { table, bags },
        ))
    }

    /// Multi-head scaled dot-product attention over `[n, d]` inputs.
    ///
    /// Each head sees a contiguous `d / heads` column block. With `causal`,
    /// row `i` attends only to rows `j <= i`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, causal: bool) -> Result<Var> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        if tq.shape() != tk.shape() {
            return Err(shape_err("attention", tq, tk));
        }
        if tq.shape() != tv.shape() {
            return Err(shape_err("attention", tq, tv));
        }
        let (n, d) = rc(tq);
        if heads == 0 || d % heads != 0 {
            return Err(TensorError::Contract(format!(
                "attention width {d} not divisible by {heads} heads"
            )));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut probs = vec![0.0; heads * n * n];
        let mut out = vec![0.0; n * d];
        let (qd, kd, vd) = (tq.data(), tk.data(), tv.data());
        for h in 0..heads {
            let off = h * dh;
            for i in 0..n {
                let visible = if causal { i + 1 } else { n };
                let p = &mut probs[(h * n + i) * n..(h * n + i + 1) * n];
                let qi = &qd[i * d + off..i * d + off + dh];
                for j in 0..visible {
                    let kj = &kd[j * d + off..j * d + off + dh];
                    p[j] = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                }
                kernels::softmax_in_place(&mut p[..visible]);
                let o = &mut out[i * d + off..i * d + off + dh];
                for j in 0..visible {
                    let vj = &vd[j * d + off..j * d + off + dh];
                    let w = p[j];
                    o.iter_mut().zip(vj).for_each(|(a, b)| *a += w * b);
                }
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![n, d], out),
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
        ))
    }

    /// Joins tensors with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| TensorError::Contract("concat of zero tensors".into()))?;
        let rows = self.value(first).rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let t = self.value(p);
            if t.rows() != rows {
                return Err(shape_err("concat_cols", self.value(first), t));
            }
            widths.push(t.cols());
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; rows * total];
        for r in 0..rows {
            let mut off = 0;
            for (&p, &w) in parts.iter().zip(&widths) {
                out[r * total + off..r * total + off + w].copy_from_slice(self.value(p).row(r));
                off += w;
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![rows, total], out),
            Op::ConcatCols(parts.to_vec()),
        ))
    }

    /// Stacks tensors with equal column counts vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| TensorError::Contract("concat of zero tensors".into()))?;
        let cols = self.value(first).cols();
        let mut out = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.cols() != cols {
                return Err(shape_err("concat_rows", self.value(first), t));
            }
            out.extend_from_slice(t.data());
        }
        let rows = out.len() / cols;
        Ok(self.push(
            Tensor::from_parts(vec![rows, cols], out),
            Op::ConcatRows(parts.to_vec()),
        ))
    }

    /// Rows `start..end` of a matrix.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(x);
        let (rows, cols) = rc(t);
        if start >= end || end > rows {
            return Err(TensorError::Index {
                op: "slice_rows",
                index: end,
                size: rows,
            });
        }
        let out = t.data()[start * cols..end * cols].to_vec();
        Ok(self.push(
            Tensor::from_parts(vec![end - start, cols], out),
            Op::SliceRows { x, start },
        ))
    }

    /// Column-wise mean, giving a `[1, d]` row.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let (rows, cols) = rc(t);
        let mut out = vec![0.0; cols];
        for r in 0..rows {
            out.iter_mut().zip(t.row(r)).for_each(|(o, v)| *o += v);
        }
        out.iter_mut().for_each(|v| *v /= rows as f64);
        self.push(Tensor::from_parts(vec![1, cols], out), Op::MeanRows(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    /// Row-wise convex mixing: `out[r] = sum_i weights[r, i] * parts[i][r]`.
    pub fn mix(&mut self, weights: Var, parts: &[Var]) -> Result<Var> {
        let tw = self.value(weights);
        let (n, m) = rc(tw);
        if m != parts.len() {
            return Err(TensorError::Contract(format!(
                "mix has {m} weight columns but {} parts",
                parts.len()
            )));
        }
        let first = self.value(parts[0]);
        let (pn, d) = rc(first);
        if pn != n {
            return Err(shape_err("mix", tw, first));
        }
        let mut out = vec![0.0; n * d];
        for (i, &p) in parts.iter().enumerate() {
            let tp = self.value(p);
            if rc(tp) != (n, d) {
                return Err(shape_err("mix", first, tp));
            }
            for r in 0..n {
                let w = tw.data()[r * m + i];
                out[r * d..(r + 1) * d]
                    .iter_mut()
                    .zip(tp.row(r))
                    .for_each(|(o, v)| *o += w * v);
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![n, d], out),
            Op::Mix {
                weights,
                parts: parts.to_vec(),
            },
        ))
    }

    /// Weighted cross-entropy over rows of logits:
    /// `sum_r weights[r] * -log softmax(logits[r])[targets[r]]`.
    /// Rows whose target is `None` contribute nothing.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: Var,
        targets: &[Option<usize>],
        weights: &[f64],
    ) -> Result<Var> {
        let sets: Vec<Vec<usize>> = targets
            .iter()
            .map(|t| t.iter().copied().collect())
            .collect();
        self.softmax_ce(logits, sets, weights, "softmax_cross_entropy")
    }

    /// Cross-entropy summed over several positive labels per row:
    /// `sum_r weights[r] * sum_{j in positives[r]} -log softmax(logits[r])[j]`.
    pub fn softmax_multi_cross_entropy(
        &mut self,
        logits: Var,
        positives: &[Vec<usize>],
        weights: &[f64],
    ) -> Result<Var> {
        self.softmax_ce(
            logits,
            positives.to_vec(),
            weights,
            "softmax_multi_cross_entropy",
        )
    }

    fn softmax_ce(
        &mut self,
        logits: Var,
        targets: Vec<Vec<usize>>,
        weights: &[f64],
        op: &'static str,
    ) -> Result<Var> {
        let t = self.value(logits);
        let (rows, c) = rc(t);
        if targets.len() != rows || weights.len() != rows {
            return Err(TensorError::Contract(format!(
                "cross-entropy over {rows} rows got {} targets and {} weights",
                targets.len(),
                weights.len()
            )));
        }
        let mut probs = t.data().to_vec();
        let mut loss = 0.0;
        for (r, labels) in targets.iter().enumerate() {
            if labels.is_empty() {
                continue;
            }
            let row = &mut probs[r * c..(r + 1) * c];
            let lse = kernels::log_sum_exp(row);
            for &target in labels {
                if target >= c {
                    return Err(TensorError::Index {
                        op,
                        index: target,
                        size: c,
                    });
                }
                loss += weights[r] * (lse - row[target]);
            }
            kernels::softmax_in_place(row);
        }
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCe {
                logits,
                targets,
                weights: weights.to_vec(),
                probs,
            },
        ))
    }

    /// Weighted binary cross-entropy on positive labels only:
    /// `sum_r weights[r] * sum_{j in positives[r]} -log sigmoid(logits[r, j])`.
    pub fn positive_bce(
        &mut self,
        logits: Var,
        positives: &[Vec<usize>],
        weights: &[f64],
    ) -> Result<Var> {
        let t = self.value(logits);
        let (rows, c) = rc(t);
        if positives.len() != rows || weights.len() != rows {
            return Err(TensorError::Contract(format!(
                "bce over {rows} rows got {} label sets and {} weights",
                positives.len(),
                weights.len()
            )));
        }
        let mut loss = 0.0;
        for r in 0..rows {
            for &j in &positives[r] {
                if j >= c {
                    return Err(TensorError::Index {
                        op: "positive_bce",
                        index: j,
                        size: c,
                    });
                }
                loss += weights[r] * kernels::softplus(-t.data()[r * c + j]);
            }
        }
        Ok(self.push(
            Tensor::scalar(loss),
            Op::PositiveBce {
                logits,
                positives: positives.to_vec(),
                weights: weights.to_vec(),
            },
        ))
    }

    /// First node, in creation order, holding a non-finite value.
    pub fn first_non_finite(&self) -> Option<NonFinite> {
        self.nodes.iter().enumerate().find_map(|(i, n)| {
            (!n.value.all_finite()).then(|| NonFinite {
                var: Var(i),
                op: n.op.name(),
                param: match (&n.op, self.params) {
                    (Op::Param(id), Some(ps)) => Some(ps.name(*id).to_string()),
                    _ => None,
                },
            })
        })
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lt.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Gradients {
            params: vec![None; self.params.map_or(0, ParamSet::len)],
            inputs: Vec::new(),
        };

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.backprop_node(Var(i), node, &g, &mut grads, &mut out);
        }
        out.inputs.reverse();
        Ok(out)
    }

    fn backprop_node(
        &self,
        var: Var,
        node: &Node<'p>,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
        out: &mut Gradients,
    ) {
        let y = node.value.as_ref();
        match &node.op {
            Op::Leaf => out.inputs.push((var, g.to_vec())),
            Op::Param(id) => match &mut out.params[id.0] {
                Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(g.to_vec()),
            },
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = rc(ta);
                let n = tb.cols();
                let gm = MatRef::new(g, m, n);
                self.acc(grads, *a, |da| {
                    gemm(gm, MatRef::new(tb.data(), k, n).t(), da, 1.0)
                });
                self.acc(grads, *b, |db| {
                    gemm(MatRef::new(ta.data(), m, k).t(), gm, db, 1.0)
                });
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, |da| add_into(da, g));
                self.acc(grads, *b, |db| add_into(db, g));
            }
            Op::AddBias(a, b) => {
                self.acc(grads, *a, |da| add_into(da, g));
                let c = self.value(*b).len();
                self.acc(grads, *b, |db| {
                    for row in g.chunks(c) {
                        add_into(db, row);
                    }
                });
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                self.acc(grads, *a, |da| {
                    da.iter_mut()
                        .zip(g.iter().zip(tb.data()))
                        .for_each(|(d, (g, y))| *d += g * y)
                });
                self.acc(grads, *b, |db| {
                    db.iter_mut()
                        .zip(g.iter().zip(ta.data()))
                        .for_each(|(d, (g, x))| *d += g * x)
                });
            }
            Op::Scale(x, f) => self.acc(grads, *x, |dx| {
                dx.iter_mut().zip(g).for_each(|(d, g)| *d += g * f)
            }),
            Op::Relu(x) => self.acc(grads, *x, |dx| {
                dx.iter_mut()
                    .zip(g.iter().zip(y.data()))
                    .for_each(|(d, (g, y))| {
                        if *y > 0.0 {
                            *d += g
                        }
                    })
            }),
            Op::Sigmoid(x) => self.acc(grads, *x, |dx| {
                dx.iter_mut()
                    .zip(g.iter().zip(y.data()))
                    .for_each(|(d, (g, y))| *d += g * y * (1.0 - y))
            }),
            Op::Softmax(x) => {
                let c = y.cols();
                self.acc(grads, *x, |dx| {
                    for ((dr, gr), yr) in dx.chunks_mut(c).zip(g.chunks(c)).zip(y.data().chunks(c))
                    {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        dr.iter_mut()
                            .zip(gr.iter().zip(yr))
                            .for_each(|(d, (g, y))| *d += y * (g - dot));
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let gv = self.value(*gain).data();
                let d = gv.len();
                self.acc(grads, *x, |dx| {
                    let mut dxhat = vec![0.0; d];
                    for r in 0..rstd.len() {
                        let gr = &g[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        for j in 0..d {
                            dxhat[j] = gr[j] * gv[j];
                        }
                        let mean_d = dxhat.iter().sum::<f64>() / d as f64;
                        let mean_dh =
                            dxhat.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        let dr = &mut dx[r * d..(r + 1) * d];
                        for j in 0..d {
                            dr[j] += rstd[r] * (dxhat[j] - mean_d - hr[j] * mean_dh);
                        }
                    }
                });
                self.acc(grads, *gain, |dg| {
                    for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                        dg.iter_mut()
                            .zip(gr.iter().zip(hr))
                            .for_each(|(o, (a, b))| *o += a * b);
                    }
                });
                self.acc(grads, *bias, |db| {
                    for gr in g.chunks(d) {
                        add_into(db, gr);
                    }
                });
            }
            Op::Gather { table, bags } => {
                let d = y.cols();
                self.acc(grads, *table, |dt| {
                    for (r, bag) in bags.iter().enumerate() {
                        let inv = 1.0 / bag.len() as f64;
                        let gr = &g[r * d..(r + 1) * d];
                        for &idx in bag {
                            dt[idx * d..(idx + 1) * d]
                                .iter_mut()
                                .zip(gr)
                                .for_each(|(o, v)| *o += v * inv);
                        }
                    }
                });
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => self.attention_backward(*q, *k, *v, *heads, probs, g, grads),
            Op::ConcatCols(parts) => {
                let total = y.cols();
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    self.acc(grads, p, |dp| {
                        for (dr, gr) in dp.chunks_mut(w).zip(g.chunks(total)) {
                            add_into(dr, &gr[off..off + w]);
                        }
                    });
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    self.acc(grads, p, |dp| add_into(dp, &g[off..off + len]));
                    off += len;
                }
            }
            Op::SliceRows { x, start } => {
                let c = y.cols();
                let s = start * c;
                self.acc(grads, *x, |dx| add_into(&mut dx[s..s + g.len()], g));
            }
            Op::MeanRows(x) => {
                let rows = self.value(*x).rows() as f64;
                let c = y.cols();
                self.acc(grads, *x, |dx| {
                    for dr in dx.chunks_mut(c) {
                        dr.iter_mut().zip(g).for_each(|(d, g)| *d += g / rows);
                    }
                });
            }
            Op::Sum(x) => self.acc(grads, *x, |dx| dx.iter_mut().for_each(|d| *d += g[0])),
            Op::Mix { weights, parts } => {
                let tw = self.value(*weights);
                let m = tw.cols();
                let d = y.cols();
                for (i, &p) in parts.iter().enumerate() {
                    self.acc(grads, p, |dp| {
                        for (r, (dr, gr)) in dp.chunks_mut(d).zip(g.chunks(d)).enumerate() {
                            let w = tw.data()[r * m + i];
                            dr.iter_mut().zip(gr).for_each(|(o, g)| *o += w * g);
                        }
                    });
                }
                self.acc(grads, *weights, |dw| {
                    for (i, &p) in parts.iter().enumerate() {
                        let tp = self.value(p);
                        for (r, gr) in g.chunks(d).enumerate() {
                            dw[r * m + i] +=
                                gr.iter().zip(tp.row(r)).map(|(a, b)| a * b).sum::<f64>();
                        }
                    }
                });
            }
            Op::SoftmaxCe {
                logits,
                targets,
                weights,
                probs,
            } => {
                let c = self.value(*logits).cols();
                self.acc(grads, *logits, |dz| {
                    for (r, labels) in targets.iter().enumerate() {
                        if labels.is_empty() {
                            continue;
                        }
                        let s = g[0] * weights[r];
                        let k = s * labels.len() as f64;
                        let pr = &probs[r * c..(r + 1) * c];
                        let dr = &mut dz[r * c..(r + 1) * c];
                        dr.iter_mut().zip(pr).for_each(|(d, p)| *d += k * p);
                        for &t in labels {
                            dr[t] -= s;
                        }
                    }
                });
            }
            Op::PositiveBce {
                logits,
                positives,
                weights,
            } => {
                let tz = self.value(*logits);
                let c = tz.cols();
                self.acc(grads, *logits, |dz| {
                    for (r, pos) in positives.iter().enumerate() {
                        let s = g[0] * weights[r];
                        for &j in pos {
                            dz[r * c + j] -= s * kernels::sigmoid(-tz.data()[r * c + j]);
                        }
                    }
                });
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: &[f64],
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let (n, d) = rc(tq);
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut dq = vec![0.0; n * d];
        let mut dk = vec![0.0; n * d];
        let mut dv = vec![0.0; n * d];
        let mut ds = vec![0.0; n];
        let (qd, kd, vd) = (tq.data(), tk.data(), tv.data());
        for h in 0..heads {
            let off = h * dh;
            for i in 0..n {
                let p = &probs[(h * n + i) * n..(h * n + i + 1) * n];
                let gi = &g[i * d + off..i * d + off + dh];
                // dP_ij = g_i . v_j ; dV_j += P_ij g_i
                let mut dot = 0.0;
                for j in 0..n {
                    if p[j] == 0.0 {
                        ds[j] = 0.0;
                        continue;
                    }
                    let vj = &vd[j * d + off..j * d + off + dh];
                    let dp: f64 = gi.iter().zip(vj).map(|(a, b)| a * b).sum();
                    ds[j] = dp;
                    dot += dp * p[j];
                    dv[j * d + off..j * d + off + dh]
                        .iter_mut()
                        .zip(gi)
                        .for_each(|(o, g)| *o += p[j] * g);
                }
                for j in 0..n {
                    if p[j] == 0.0 {
                        continue;
                    }
                    let s = p[j] * (ds[j] - dot) * scale;
                    let kj = &kd[j * d + off..j * d + off + dh];
                    let qi = &qd[i * d + off..i * d + off + dh];
                    dq[i * d + off..i * d + off + dh]
                        .iter_mut()
                        .zip(kj)
                        .for_each(|(o, x)| *o += s * x);
                    dk[j * d + off..j * d + off + dh]
                        .iter_mut()
                        .zip(qi)
                        .for_each(|(o, x)| *o += s * x);
                }
            }
        }
        self.acc(grads, q, |x| add_into(x, &dq));
        self.acc(grads, k, |x| add_into(x, &dk));
        self.acc(grads, v, |x| add_into(x, &dv));
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        let node = &self.nodes[v.0];
        if !node.needs_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; node.value.len()]);
        f(slot);
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}
