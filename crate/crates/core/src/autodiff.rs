//! Define-by-run reverse-mode differentiation over [`Tensor`]s.
//!
//! Every primitive executes eagerly and appends a node to the [`Tape`].
//! Nodes only reference earlier nodes, so index order is a topological order
//! and [`Tape::backward`] is a single reverse sweep.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Variance floor for layer and batch normalisation.
pub const NORM_EPS: f64 = 1e-5;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub type Gradients = BTreeMap<String, Tensor>;

#[derive(Debug)]
enum Op {
    Leaf,
    Constant,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Concat(Vec<Var>),
    Gather {
        table: Var,
        index: Vec<usize>,
    },
    RowSums(Var),
    MeanOfRows(Var),
    SumAll(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        floored: Vec<bool>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        floored: Vec<bool>,
        train: bool,
    },
    Bce {
        logits: Var,
        targets: Vec<f64>,
    },
    SoftmaxCe {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Constant => "constant",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::AddRow(..) => "add_row",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Concat(_) => "concat",
            Op::Gather { .. } => "gather",
            Op::RowSums(_) => "row_sums",
            Op::MeanOfRows(_) => "mean_of_rows",
            Op::SumAll(_) => "sum_all",
            Op::LayerNorm { .. } => "layer_norm",
            Op::BatchNorm { .. } => "batch_norm",
            Op::Bce { .. } => "bce_with_logits",
            Op::SoftmaxCe { .. } => "softmax_cross_entropy",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Batch statistics observed by a train-mode batch norm.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased (population) variance over the batch.
    pub var: Vec<f64>,
    pub count: usize,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    leaves: BTreeMap<String, Var>,
    constants: BTreeMap<String, Var>,
    consumed: bool,
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

    /// Register a named differentiable leaf.
    pub fn bind(&mut self, name: &str, value: Tensor) -> Result<Var> {
        if self.leaves.contains_key(name) {
            return Err(Error::DuplicateParam(name.to_string()));
        }
        let var = self.push_raw(value, Op::Leaf, true);
        self.leaves.insert(name.to_string(), var);
        Ok(var)
    }

    /// Look up a previously bound leaf.
    pub fn leaf(&self, name: &str) -> Result<Var> {
        self.leaves
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnboundLeaf(name.to_string()))
    }

    pub fn is_bound(&self, name: &str) -> bool {
        self.leaves.contains_key(name)
    }

    pub fn leaf_names(&self) -> impl Iterator<Item = &str> {
        self.leaves.keys().map(String::as_str)
    }

    /// A named non-differentiable input, shared across repeated lookups.
    pub fn named_constant(&mut self, name: &str, value: Tensor) -> Var {
        if let Some(v) = self.constants.get(name) {
            return *v;
        }
        let var = self.constant(value);
        self.constants.insert(name.to_string(), var);
        var
    }

    /// Any named node (leaf or constant) registered under `name`.
    pub fn lookup(&self, name: &str) -> Option<Var> {
        self.leaves.get(name).or_else(|| self.constants.get(name)).copied()
    }

    /// A non-differentiable input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Constant, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push_raw(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite {
                op: op.name(),
                node: self.nodes.len(),
            });
        }
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        Ok(self.push_raw(value, op, requires_grad))
    }

    fn check(&self, vars: &[Var]) -> Result<()> {
        for v in vars {
            if v.0 >= self.nodes.len() {
                return Err(Error::UnknownNode(v.0));
            }
        }
        Ok(())
    }

    fn shape_err(&self, op: &'static str, detail: String) -> Error {
        Error::Shape {
            op,
            node: self.nodes.len(),
            detail,
        }
    }

    fn matrix_dims(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        let s = self.value(v).shape();
        if s.len() != 2 {
            return Err(self.shape_err(op, format!("expected a matrix, got shape {s:?}")));
        }
        Ok((s[0], s[1]))
    }

    // ----- primitives ---------------------------------------------------

    /// `[n, k] x [k, m] -> [n, m]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(&[a, b])?;
        let (n, k) = self.matrix_dims("matmul", a)?;
        let (k2, m) = self.matrix_dims("matmul", b)?;
        if k != k2 {
            return Err(self.shape_err("matmul", format!("[{n}, {k}] x [{k2}, {m}]")));
        }
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), n, k, m);
        self.push(Tensor::from_parts(vec![n, m], out), Op::MatMul(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(&[a, b])?;
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(self.shape_err("add", format!("{:?} vs {:?}", va.shape(), vb.shape())));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let shape = va.shape().to_vec();
        self.push(Tensor::from_parts(shape, data), Op::Add(a, b), &[a, b])
    }

    /// Adds a vector of length `m` to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        self.check(&[x, row])?;
        let (vx, vr) = (self.value(x), self.value(row));
        if vr.shape().len() != 1 || vr.len() != vx.cols() {
            return Err(self.shape_err("add_row", format!("row {:?} against {:?}", vr.shape(), vx.shape())));
        }
        let m = vx.cols();
        let mut data = vx.data().to_vec();
        for chunk in data.chunks_mut(m) {
            for (d, r) in chunk.iter_mut().zip(vr.data()) {
                *d += r;
            }
        }
        let shape = vx.shape().to_vec();
        self.push(Tensor::from_parts(shape, data), Op::AddRow(x, row), &[x, row])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(&[a, b])?;
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(self.shape_err("mul", format!("{:?} vs {:?}", va.shape(), vb.shape())));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let shape = va.shape().to_vec();
        self.push(Tensor::from_parts(shape, data), Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        self.check(&[x])?;
        let value = self.value(x).map(|v| v * factor);
        self.push(value, Op::Scale(x, factor), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.check(&[x])?;
        let value = self.value(x).map(|v| if v > 0.0 { v } else { 0.0 });
        self.push(value, Op::Relu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.check(&[x])?;
        let value = self.value(x).map(sigmoid);
        self.push(value, Op::Sigmoid(x), &[x])
    }

    /// Concatenate along the last axis. All inputs share the leading extents.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        self.check(parts)?;
        let Some(first) = parts.first() else {
            return Err(self.shape_err("concat", "no inputs".into()));
        };
        let lead = self.value(*first).shape()[..self.value(*first).shape().len() - 1].to_vec();
        for p in parts {
            let s = self.value(*p).shape();
            if s[..s.len() - 1] != lead[..] {
                return Err(self.shape_err(
                    "concat",
                    format!("leading extents {:?} vs {:?}", &s[..s.len() - 1], lead),
                ));
            }
        }
        let rows = self.value(*first).rows();
        let widths: Vec<usize> = parts.iter().map(|p| self.value(*p).cols()).collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(self.value(*p).row(r));
            }
        }
        let mut shape = lead;
        shape.push(total);
        self.push(Tensor::from_parts(shape, data), Op::Concat(parts.to_vec()), parts)
    }

    /// Row lookup: `table[index[i], :]` for each `i`.
    pub fn gather(&mut self, table: Var, index: &[usize]) -> Result<Var> {
        self.check(&[table])?;
        let (rows, m) = self.matrix_dims("gather", table)?;
        if index.is_empty() {
            return Err(self.shape_err("gather", "empty index list".into()));
        }
        let t = self.value(table);
        let mut data = Vec::with_capacity(index.len() * m);
        for &i in index {
            if i >= rows {
                return Err(Error::IndexOutOfRange {
                    what: format!("gather table (node {})", table.0),
                    index: i,
                    size: rows,
                });
            }
            data.extend_from_slice(t.row(i));
        }
        self.push(
            Tensor::from_parts(vec![index.len(), m], data),
            Op::Gather {
                table,
                index: index.to_vec(),
            },
            &[table],
        )
    }

    /// `[n, m] -> [n]`, summing each row.
    pub fn row_sums(&mut self, x: Var) -> Result<Var> {
        self.check(&[x])?;
        let (n, _) = self.matrix_dims("row_sums", x)?;
        let v = self.value(x);
        let data = (0..n).map(|r| v.row(r).iter().sum()).collect();
        self.push(Tensor::from_parts(vec![n], data), Op::RowSums(x), &[x])
    }

    /// `[n, m] -> [m]`, averaging over rows.
    pub fn mean_of_rows(&mut self, x: Var) -> Result<Var> {
        self.check(&[x])?;
        let (n, m) = self.matrix_dims("mean_of_rows", x)?;
        let v = self.value(x);
        let mut data = vec![0.0; m];
        for r in 0..n {
            for (d, x) in data.iter_mut().zip(v.row(r)) {
                *d += x;
            }
        }
        let inv = 1.0 / n as f64;
        data.iter_mut().for_each(|d| *d *= inv);
        self.push(Tensor::from_parts(vec![m], data), Op::MeanOfRows(x), &[x])
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        self.check(&[x])?;
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(x), &[x])
    }

    /// Normalise each row over the last axis, then `gamma * xhat + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        self.check(&[x, gamma, beta])?;
        let m = self.value(x).cols();
        self.check_affine("layer_norm", m, gamma, beta)?;
        let v = self.value(x);
        let n = v.rows();
        let mut xhat = vec![0.0; n * m];
        let mut inv_std = vec![0.0; n];
        let mut floored = vec![false; n];
        for r in 0..n {
            let row = v.row(r);
            let mean = row.iter().sum::<f64>() / m as f64;
            let var = row.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / m as f64;
            floored[r] = var <= NORM_EPS;
            let is = 1.0 / var.max(NORM_EPS).sqrt();
            inv_std[r] = is;
            for c in 0..m {
                xhat[r * m + c] = (row[c] - mean) * is;
            }
        }
        let out = affine(&xhat, self.value(gamma).data(), self.value(beta).data());
        let shape = self.value(x).shape().to_vec();
        self.push(
            Tensor::from_parts(shape, out),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                floored,
            },
            &[x, gamma, beta],
        )
    }

    /// Batch norm over the row axis using the statistics of this batch.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var) -> Result<(Var, BatchStats)> {
        self.check(&[x, gamma, beta])?;
        let (n, m) = self.matrix_dims("batch_norm", x)?;
        self.check_affine("batch_norm", m, gamma, beta)?;
        let v = self.value(x);
        let mut mean = vec![0.0; m];
        let mut var = vec![0.0; m];
        for r in 0..n {
            for (acc, a) in mean.iter_mut().zip(v.row(r)) {
                *acc += a;
            }
        }
        mean.iter_mut().for_each(|a| *a /= n as f64);
        for r in 0..n {
            for c in 0..m {
                let d = v.row(r)[c] - mean[c];
                var[c] += d * d;
            }
        }
        var.iter_mut().for_each(|a| *a /= n as f64);
        let floored: Vec<bool> = var.iter().map(|&s| s <= NORM_EPS).collect();
        let inv_std: Vec<f64> = var.iter().map(|&s| 1.0 / s.max(NORM_EPS).sqrt()).collect();
        let mut xhat = vec![0.0; n * m];
        for r in 0..n {
            for c in 0..m {
                xhat[r * m + c] = (v.row(r)[c] - mean[c]) * inv_std[c];
            }
        }
        let out = affine(&xhat, self.value(gamma).data(), self.value(beta).data());
        let node = self.push(
            Tensor::from_parts(vec![n, m], out),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                floored,
                train: true,
            },
            &[x, gamma, beta],
        )?;
        Ok((node, BatchStats { mean, var, count: n }))
    }

    /// Batch norm with fixed running statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f64],
        running_var: &[f64],
    ) -> Result<Var> {
        self.check(&[x, gamma, beta])?;
        let (n, m) = self.matrix_dims("batch_norm", x)?;
        self.check_affine("batch_norm", m, gamma, beta)?;
        if running_mean.len() != m || running_var.len() != m {
            return Err(self.shape_err(
                "batch_norm",
                format!(
                    "running statistics of length {}/{} for width {m}",
                    running_mean.len(),
                    running_var.len()
                ),
            ));
        }
        let v = self.value(x);
        let inv_std: Vec<f64> = running_var.iter().map(|&s| 1.0 / s.max(NORM_EPS).sqrt()).collect();
        let mut xhat = vec![0.0; n * m];
        for r in 0..n {
            for c in 0..m {
                xhat[r * m + c] = (v.row(r)[c] - running_mean[c]) * inv_std[c];
            }
        }
        let out = affine(&xhat, self.value(gamma).data(), self.value(beta).data());
        self.push(
            Tensor::from_parts(vec![n, m], out),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                floored: vec![false; m],
                train: false,
            },
            &[x, gamma, beta],
        )
    }

    /// Summed binary cross-entropy of `sigmoid(logits)` against targets in `[0, 1]`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64]) -> Result<Var> {
        self.check(&[logits])?;
        let z = self.value(logits);
        if z.len() != targets.len() {
            return Err(self.shape_err(
                "bce_with_logits",
                format!("{} logits vs {} targets", z.len(), targets.len()),
            ));
        }
        let loss = z
            .data()
            .iter()
            .zip(targets)
            .map(|(&z, &y)| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p())
            .sum();
        self.push(
            Tensor::scalar(loss),
            Op::Bce {
                logits,
                targets: targets.to_vec(),
            },
            &[logits],
        )
    }

    /// Mean softmax cross-entropy over rows of `[n, classes]` logits.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        self.check(&[logits])?;
        let (n, classes) = self.matrix_dims("softmax_cross_entropy", logits)?;
        if targets.len() != n {
            return Err(self.shape_err(
                "softmax_cross_entropy",
                format!("{n} rows vs {} targets", targets.len()),
            ));
        }
        let z = self.value(logits);
        let mut probs = vec![0.0; n * classes];
        let mut loss = 0.0;
        for r in 0..n {
            if targets[r] >= classes {
                return Err(Error::IndexOutOfRange {
                    what: "softmax target class".into(),
                    index: targets[r],
                    size: classes,
                });
            }
            let row = z.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|&a| (a - max).exp()).sum();
            let lse = max + sum.ln();
            for c in 0..classes {
                probs[r * classes + c] = (row[c] - lse).exp();
            }
            loss += lse - row[targets[r]];
        }
        loss /= n as f64;
        self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCe {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        )
    }

    // ----- composites ---------------------------------------------------

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let neg = self.scale(b, -1.0)?;
        self.add(a, neg)
    }

    /// `x W + b`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, weight)?;
        match bias {
            Some(b) => self.add_row(y, b),
            None => Ok(y),
        }
    }

    fn check_affine(&self, op: &'static str, m: usize, gamma: Var, beta: Var) -> Result<()> {
        for p in [gamma, beta] {
            let s = self.value(p).shape();
            if s != [m] {
                return Err(self.shape_err(op, format!("affine parameter {s:?} for width {m}")));
            }
        }
        Ok(())
    }

    /// Sign pattern of every relu input on the tape; used to detect
    /// perturbations that cross a non-differentiable point.
    pub fn relu_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for node in &self.nodes {
            if let Op::Relu(x) = node.op {
                out.extend(self.nodes[x.0].value.data().iter().map(|&v| v > 0.0));
            }
        }
        out
    }

    // ----- backward -----------------------------------------------------

    /// Gradients of a scalar `root` for every bound leaf. Leaves that do not
    /// influence the root get exact zeros. A tape can be differentiated once.
    pub fn backward(&mut self, root: Var) -> Result<Gradients> {
        self.check(&[root])?;
        if self.consumed {
            return Err(Error::BackwardTwice);
        }
        let root_value = self.value(root);
        if !root_value.is_scalar() {
            return Err(Error::NonScalarRoot(root_value.shape().to_vec()));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![1.0]);
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
                continue;
            }
            self.propagate(idx, &g, &mut grads);
        }

        let mut out = BTreeMap::new();
        for (name, var) in &self.leaves {
            let shape = self.value(*var).shape().to_vec();
            let g = match grads.get_mut(var.0).and_then(Option::take) {
                Some(g) => Tensor::from_parts(shape, g),
                None => Tensor::zeros(&shape),
            };
            out.insert(name.clone(), g);
        }
        Ok(out)
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::MatMul(a, b) => {
                let (n, k) = (self.value(*a).shape()[0], self.value(*a).shape()[1]);
                let m = self.value(*b).shape()[1];
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if wants(*a) {
                    let acc = accum(grads, *a, n * k);
                    for i in 0..n {
                        let gi = &g[i * m..(i + 1) * m];
                        for kk in 0..k {
                            let bk = &vb[kk * m..(kk + 1) * m];
                            acc[i * k + kk] += dot(gi, bk);
                        }
                    }
                }
                if wants(*b) {
                    let acc = accum(grads, *b, k * m);
                    for i in 0..n {
                        let gi = &g[i * m..(i + 1) * m];
                        for kk in 0..k {
                            let aik = va[i * k + kk];
                            if aik == 0.0 {
                                continue;
                            }
                            let row = &mut acc[kk * m..(kk + 1) * m];
                            for (r, x) in row.iter_mut().zip(gi) {
                                *r += aik * x;
                            }
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if wants(*v) {
                        add_into(accum(grads, *v, g.len()), g);
                    }
                }
            }
            Op::AddRow(x, row) => {
                if wants(*x) {
                    add_into(accum(grads, *x, g.len()), g);
                }
                if wants(*row) {
                    let m = self.value(*row).len();
                    let acc = accum(grads, *row, m);
                    for chunk in g.chunks(m) {
                        add_into(acc, chunk);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if wants(*a) {
                    let acc = accum(grads, *a, g.len());
                    for i in 0..g.len() {
                        acc[i] += g[i] * vb[i];
                    }
                }
                if wants(*b) {
                    let acc = accum(grads, *b, g.len());
                    for i in 0..g.len() {
                        acc[i] += g[i] * va[i];
                    }
                }
            }
            Op::Scale(x, f) => {
                if wants(*x) {
                    let acc = accum(grads, *x, g.len());
                    for (a, gi) in acc.iter_mut().zip(g) {
                        *a += f * gi;
                    }
                }
            }
            Op::Relu(x) => {
                if wants(*x) {
                    let vx = self.value(*x).data();
                    let acc = accum(grads, *x, g.len());
                    for i in 0..g.len() {
                        if vx[i] > 0.0 {
                            acc[i] += g[i];
                        }
                    }
                }
            }
            Op::Sigmoid(x) => {
                if wants(*x) {
                    let y = node.value.data();
                    let acc = accum(grads, *x, g.len());
                    for i in 0..g.len() {
                        acc[i] += g[i] * y[i] * (1.0 - y[i]);
                    }
                }
            }
            Op::Concat(parts) => {
                let rows = node.value.rows();
                let total = node.value.cols();
                let mut offset = 0;
                for p in parts {
                    let w = self.value(*p).cols();
                    if wants(*p) {
                        let acc = accum(grads, *p, rows * w);
                        for r in 0..rows {
                            let src = &g[r * total + offset..r * total + offset + w];
                            add_into(&mut acc[r * w..(r + 1) * w], src);
                        }
                    }
                    offset += w;
                }
            }
            Op::Gather { table, index } => {
                if wants(*table) {
                    let m = self.value(*table).cols();
                    let len = self.value(*table).len();
                    let acc = accum(grads, *table, len);
                    for (i, &row) in index.iter().enumerate() {
                        add_into(&mut acc[row * m..(row + 1) * m], &g[i * m..(i + 1) * m]);
                    }
                }
            }
            Op::RowSums(x) => {
                if wants(*x) {
                    let m = self.value(*x).cols();
                    let acc = accum(grads, *x, g.len() * m);
                    for (r, gr) in g.iter().enumerate() {
                        acc[r * m..(r + 1) * m].iter_mut().for_each(|a| *a += gr);
                    }
                }
            }
            Op::MeanOfRows(x) => {
                if wants(*x) {
                    let n = self.value(*x).rows();
                    let inv = 1.0 / n as f64;
                    let m = g.len();
                    let acc = accum(grads, *x, n * m);
                    for r in 0..n {
                        for c in 0..m {
                            acc[r * m + c] += g[c] * inv;
                        }
                    }
                }
            }
            Op::SumAll(x) => {
                if wants(*x) {
                    let len = self.value(*x).len();
                    accum(grads, *x, len).iter_mut().for_each(|a| *a += g[0]);
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                floored,
            } => {
                let m = self.value(*x).cols();
                let n = xhat.len() / m;
                let gm = self.value(*gamma).data();
                self.affine_param_grads(*gamma, *beta, g, xhat, m, grads);
                if wants(*x) {
                    let acc = accum(grads, *x, n * m);
                    for r in 0..n {
                        let dxhat: Vec<f64> = (0..m).map(|c| g[r * m + c] * gm[c]).collect();
                        let xh = &xhat[r * m..(r + 1) * m];
                        let mean_d = dxhat.iter().sum::<f64>() / m as f64;
                        let mean_dx = if floored[r] { 0.0 } else { dot(&dxhat, xh) / m as f64 };
                        for c in 0..m {
                            acc[r * m + c] += inv_std[r] * (dxhat[c] - mean_d - xh[c] * mean_dx);
                        }
                    }
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                floored,
                train,
            } => {
                let m = self.value(*x).cols();
                let n = xhat.len() / m;
                let gm = self.value(*gamma).data();
                self.affine_param_grads(*gamma, *beta, g, xhat, m, grads);
                if wants(*x) {
                    let acc = accum(grads, *x, n * m);
                    if *train {
                        for c in 0..m {
                            let mut sum_d = 0.0;
                            let mut sum_dx = 0.0;
                            for r in 0..n {
                                let d = g[r * m + c] * gm[c];
                                sum_d += d;
                                sum_dx += d * xhat[r * m + c];
                            }
                            let mean_d = sum_d / n as f64;
                            let mean_dx = if floored[c] { 0.0 } else { sum_dx / n as f64 };
                            for r in 0..n {
                                let d = g[r * m + c] * gm[c];
                                acc[r * m + c] += inv_std[c] * (d - mean_d - xhat[r * m + c] * mean_dx);
                            }
                        }
                    } else {
                        for r in 0..n {
                            for c in 0..m {
                                acc[r * m + c] += g[r * m + c] * gm[c] * inv_std[c];
                            }
                        }
                    }
                }
            }
            Op::Bce { logits, targets } => {
                if wants(*logits) {
                    let z = self.value(*logits).data();
                    let acc = accum(grads, *logits, z.len());
                    for i in 0..z.len() {
                        acc[i] += g[0] * (sigmoid(z[i]) - targets[i]);
                    }
                }
            }
            Op::SoftmaxCe { logits, targets, probs } => {
                if wants(*logits) {
                    let classes = self.value(*logits).cols();
                    let n = targets.len();
                    let scale = g[0] / n as f64;
                    let acc = accum(grads, *logits, n * classes);
                    for r in 0..n {
                        for c in 0..classes {
                            let onehot = if c == targets[r] { 1.0 } else { 0.0 };
                            acc[r * classes + c] += scale * (probs[r * classes + c] - onehot);
                        }
                    }
                }
            }
        }
    }

    fn affine_param_grads(
        &self,
        gamma: Var,
        beta: Var,
        g: &[f64],
        xhat: &[f64],
        m: usize,
        grads: &mut [Option<Vec<f64>>],
    ) {
        if self.nodes[gamma.0].requires_grad {
            let acc = accum(grads, gamma, m);
            for (i, (gi, xh)) in g.iter().zip(xhat).enumerate() {
                acc[i % m] += gi * xh;
            }
        }
        if self.nodes[beta.0].requires_grad {
            let acc = accum(grads, beta, m);
            for chunk in g.chunks(m) {
                add_into(acc, chunk);
            }
        }
    }
}

fn accum(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(acc: &mut [f64], src: &[f64]) {
    for (a, s) in acc.iter_mut().zip(src) {
        *a += s;
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn affine(xhat: &[f64], gamma: &[f64], beta: &[f64]) -> Vec<f64> {
    let m = gamma.len();
    xhat.iter()
        .enumerate()
        .map(|(i, &v)| gamma[i % m] * v + beta[i % m])
        .collect()
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Row-major `[n, k] x [k, m]`. Zero entries of the left operand are
/// skipped, which makes constant adjacency and pooling matrices cheap.
fn matmul_raw(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let row = &mut out[i * m..(i + 1) * m];
        for kk in 0..k {
            let aik = a[i * k + kk];
            if aik == 0.0 {
                continue;
            }
            let bk = &b[kk * m..(kk + 1) * m];
            for (o, x) in row.iter_mut().zip(bk) {
                *o += aik * x;
            }
        }
    }
    out
}

/// Bind every entry of `bindings` as a leaf on a fresh tape and run `build`.
pub fn forward<F>(bindings: &BTreeMap<String, Tensor>, build: F) -> Result<(Tape, Var)>
where
    F: FnOnce(&mut Tape) -> Result<Var>,
{
    let mut tape = Tape::new();
    for (name, value) in bindings {
        tape.bind(name, value.clone())?;
    }
    let root = build(&mut tape)?;
    Ok((tape, root))
}

#[derive(Clone, Debug)]
pub struct FdOptions {
    pub step: f64,
    /// Check at most this many randomly chosen coordinates per leaf.
    pub max_coords_per_leaf: Option<usize>,
    pub seed: u64,
}

impl FdOptions {
    pub fn new(step: f64) -> Self {
        Self {
            step,
            max_coords_per_leaf: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FdReport {
    /// Max over checked coordinates of `|analytic - numeric| / max(1, |analytic|)`.
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates skipped because the perturbation crossed a relu kink.
    pub excluded: usize,
}

/// Compare analytic gradients against central differences for every coordinate.
pub fn finite_diff_check<F>(bindings: &BTreeMap<String, Tensor>, step: f64, build: F) -> Result<FdReport>
where
    F: Fn(&mut Tape) -> Result<Var>,
{
    finite_diff_check_with(bindings, &FdOptions::new(step), build)
}

pub fn finite_diff_check_with<F>(bindings: &BTreeMap<String, Tensor>, opts: &FdOptions, build: F) -> Result<FdReport>
where
    F: Fn(&mut Tape) -> Result<Var>,
{
    if opts.step <= 0.0 || !opts.step.is_finite() {
        return Err(Error::Config(format!(
            "finite-difference step {} must be > 0",
            opts.step
        )));
    }
    let (mut tape, root) = forward(bindings, &build)?;
    let base_pattern = tape.relu_pattern();
    let analytic = tape.backward(root)?;

    let eval = |name: &str, coord: usize, delta: f64| -> Result<(f64, Vec<bool>)> {
        let mut shifted = bindings.clone();
        let t = shifted.get_mut(name).expect("binding exists");
        t.data_mut()[coord] += delta;
        let (tape, root) = forward(&shifted, &build)?;
        Ok((tape.value(root).data()[0], tape.relu_pattern()))
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = FdReport {
        max_rel_error: 0.0,
        checked: 0,
        excluded: 0,
    };
    for (name, value) in bindings {
        let coords: Vec<usize> = match opts.max_coords_per_leaf {
            Some(limit) if limit < value.len() => {
                let mut c = sample(&mut rng, value.len(), limit).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..value.len()).collect(),
        };
        let grad = &analytic[name];
        for coord in coords {
            let (plus, p_pat) = eval(name, coord, opts.step)?;
            let (minus, m_pat) = eval(name, coord, -opts.step)?;
            if p_pat != base_pattern || m_pat != base_pattern {
                report.excluded += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = grad.data()[coord];
            let rel = (a - numeric).abs() / a.abs().max(1.0);
            report.max_rel_error = report.max_rel_error.max(rel);
            report.checked += 1;
        }
    }
    Ok(report)
}
