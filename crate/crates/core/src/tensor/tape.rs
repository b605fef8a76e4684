// Reverse-mode tape.
//
// Every operation evaluates eagerly, stores its output on the tape, and
// records which earlier nodes it read. Nodes are appended in evaluation order,
// so the node list is always topologically sorted and `backward` is a single
// reverse sweep.

use std::sync::Arc;

use super::kernels;
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Matmul { a: Var, b: Var, m: usize, k: usize, n: usize },
    MatmulNt { a: Var, b: Var, m: usize, k: usize, n: usize },
    Transpose { a: Var, rows: usize, cols: usize },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    AddRow { a: Var, bias: Var },
    MulRow { a: Var, gain: Var },
    Scale { a: Var, c: f64 },
    Relu { a: Var },
    Softplus { a: Var },
    Exp { a: Var },
    Sigmoid { a: Var },
    Softmax { a: Var, outer: usize, len: usize, inner: usize },
    ChannelNorm { a: Var, inv_std: Vec<f64> },
    ConcatCols { parts: Vec<(Var, usize)> },
    GatherRows { a: Var, index: Arc<[usize]> },
    SegmentMean { a: Var, segment: Arc<[usize]>, inv_count: Vec<f64> },
    Sum { a: Var },
    Mean { a: Var },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
    BceLogits { logits: Var, targets: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of evaluated operations.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every grad-enabled leaf.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }

    /// Number of leaves holding a gradient.
    pub fn len(&self) -> usize {
        self.grads.iter().filter(|g| g.is_some()).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
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

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn derived(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let rg = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.push(value, op, rg)
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let shape = self.shape(v);
        match shape {
            [r, c] => Ok((*r, *c)),
            _ => Err(Error::dim(op, shape, &[0, 0])),
        }
    }

    // ---- linear algebra -------------------------------------------------

    /// `a[m×k] · b[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(Error::dim("matmul", self.shape(a), self.shape(b)));
        }
        let data = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let value = Tensor::new(&[m, n], data)?;
        Ok(self.derived(value, Op::Matmul { a, b, m, k, n }, &[a, b]))
    }

    /// `a[m×k] · b[n×k]ᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul_nt")?;
        let (n, k2) = self.dims2(b, "matmul_nt")?;
        if k != k2 {
            return Err(Error::dim("matmul_nt", self.shape(a), self.shape(b)));
        }
        let data = kernels::matmul_nt(self.value(a).data(), self.value(b).data(), m, k, n);
        let value = Tensor::new(&[m, n], data)?;
        Ok(self.derived(value, Op::MatmulNt { a, b, m, k, n }, &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (rows, cols) = self.dims2(a, "transpose")?;
        let data = kernels::transpose(self.value(a).data(), rows, cols);
        let value = Tensor::new(&[cols, rows], data)?;
        Ok(self.derived(value, Op::Transpose { a, rows, cols }, &[a]))
    }

    // ---- elementwise ----------------------------------------------------

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(ta.shape(), data).expect("shapes checked")
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let ta = self.value(a);
        Tensor::new(ta.shape(), ta.data().iter().map(|x| f(*x)).collect()).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let v = self.zip_map(a, b, |x, y| x + y);
        Ok(self.derived(v, Op::Add { a, b }, &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let v = self.zip_map(a, b, |x, y| x - y);
        Ok(self.derived(v, Op::Sub { a, b }, &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let v = self.zip_map(a, b, |x, y| x * y);
        Ok(self.derived(v, Op::Mul { a, b }, &[a, b]))
    }

    fn row_operand(&self, a: Var, r: Var, op: &'static str) -> Result<(usize, usize)> {
        let (n, d) = self.dims2(a, op)?;
        if self.value(r).numel() != d || self.shape(r).len() > 2 || self.value(r).rows() != 1 {
            return Err(Error::dim(op, self.shape(a), self.shape(r)));
        }
        Ok((n, d))
    }

    /// `a[n×d] + bias[d]`, the bias added to every row.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (_, d) = self.row_operand(a, bias, "add_row")?;
        let b = self.value(bias).data();
        let ta = self.value(a);
        let data = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x + b[i % d])
            .collect();
        let v = Tensor::new(ta.shape(), data)?;
        Ok(self.derived(v, Op::AddRow { a, bias }, &[a, bias]))
    }

    /// `a[n×d] ⊙ gain[d]`, every row scaled entrywise.
    pub fn mul_row(&mut self, a: Var, gain: Var) -> Result<Var> {
        let (_, d) = self.row_operand(a, gain, "mul_row")?;
        let g = self.value(gain).data();
        let ta = self.value(a);
        let data = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x * g[i % d])
            .collect();
        let v = Tensor::new(ta.shape(), data)?;
        Ok(self.derived(v, Op::MulRow { a, gain }, &[a, gain]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.map(a, |x| c * x);
        self.derived(v, Op::Scale { a, c }, &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.map(a, |x| x.max(0.0));
        self.derived(v, Op::Relu { a }, &[a])
    }

    /// `ln(1 + eˣ)`, strictly positive.
    pub fn softplus(&mut self, a: Var) -> Var {
        let v = self.map(a, kernels::softplus);
        self.derived(v, Op::Softplus { a }, &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.map(a, f64::exp);
        self.derived(v, Op::Exp { a }, &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.map(a, kernels::sigmoid);
        self.derived(v, Op::Sigmoid { a }, &[a])
    }

    // ---- normalization --------------------------------------------------

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::Contract(format!(
                "softmax axis {axis} out of range for shape {shape:?}"
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.value(a).data();
        let mut data = vec![0.0; src.len()];
        let mut buf = vec![0.0; len];
        for o in 0..outer {
            for i in 0..inner {
                for (t, b) in buf.iter_mut().enumerate() {
                    *b = src[(o * len + t) * inner + i];
                }
                kernels::softmax_in_place(&mut buf);
                for (t, b) in buf.iter().enumerate() {
                    data[(o * len + t) * inner + i] = *b;
                }
            }
        }
        let v = Tensor::new(&shape, data)?;
        Ok(self.derived(v, Op::Softmax { a, outer, len, inner }, &[a]))
    }

    /// Per-row standardization `(x − mean) / sqrt(var + eps)` with population
    /// variance over the row.
    pub fn channel_normalize(&mut self, a: Var, eps: f64) -> Result<Var> {
        let (n, d) = self.dims2(a, "channel_normalize")?;
        if d == 0 {
            return Err(Error::Contract("channel_normalize needs d >= 1".into()));
        }
        let src = self.value(a).data();
        let mut data = vec![0.0; n * d];
        let mut inv_std = Vec::with_capacity(n);
        for r in 0..n {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            for (o, x) in data[r * d..(r + 1) * d].iter_mut().zip(row) {
                *o = (x - mean) * is;
            }
            inv_std.push(is);
        }
        let v = Tensor::new(&[n, d], data)?;
        Ok(self.derived(v, Op::ChannelNorm { a, inv_std }, &[a]))
    }

    // ---- structural -----------------------------------------------------

    /// Horizontal concatenation of matrices with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat_cols of nothing".into()))?;
        let (n, _) = self.dims2(first, "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims2(p, "concat_cols")?;
            if r != n {
                return Err(Error::dim("concat_cols", self.shape(first), self.shape(p)));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; n * total];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.value(p).data();
            for r in 0..n {
                data[r * total + offset..r * total + offset + w]
                    .copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            offset += w;
        }
        let v = Tensor::new(&[n, total], data)?;
        let op = Op::ConcatCols {
            parts: parts.iter().copied().zip(widths).collect(),
        };
        Ok(self.derived(v, op, parts))
    }

    /// `out[j] = a[index[j]]`.
    pub fn gather_rows(&mut self, a: Var, index: Arc<[usize]>) -> Result<Var> {
        let (n, d) = self.dims2(a, "gather_rows")?;
        if let Some(&bad) = index.iter().find(|&&i| i >= n) {
            return Err(Error::Contract(format!(
                "gather_rows index {bad} out of range for {n} rows"
            )));
        }
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(index.len() * d);
        for &i in index.iter() {
            data.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let v = Tensor::new(&[index.len(), d], data)?;
        Ok(self.derived(v, Op::GatherRows { a, index }, &[a]))
    }

    /// Mean of the rows of `a` grouped by `segment[j]` into `groups` output
    /// rows. Every group must be non-empty.
    pub fn segment_mean(&mut self, a: Var, segment: Arc<[usize]>, groups: usize) -> Result<Var> {
        let (n, d) = self.dims2(a, "segment_mean")?;
        if segment.len() != n {
            return Err(Error::dim("segment_mean", self.shape(a), &[segment.len()]));
        }
        let mut count = vec![0usize; groups];
        for &s in segment.iter() {
            if s >= groups {
                return Err(Error::Contract(format!(
                    "segment id {s} out of range for {groups} groups"
                )));
            }
            count[s] += 1;
        }
        if let Some(g) = count.iter().position(|&c| c == 0) {
            return Err(Error::Contract(format!("segment {g} has no members")));
        }
        let inv_count: Vec<f64> = count.iter().map(|&c| 1.0 / c as f64).collect();
        // Accumulating offsets from each group's first member keeps the mean of
        // identical rows exact.
        let src = self.value(a).data();
        let mut first = vec![usize::MAX; groups];
        for (j, &s) in segment.iter().enumerate() {
            if first[s] == usize::MAX {
                first[s] = j;
            }
        }
        let mut data = vec![0.0; groups * d];
        for (j, &s) in segment.iter().enumerate() {
            let base = &src[first[s] * d..(first[s] + 1) * d];
            let out = &mut data[s * d..(s + 1) * d];
            for ((o, x), b) in out.iter_mut().zip(&src[j * d..(j + 1) * d]).zip(base) {
                *o += x - b;
            }
        }
        for (g, &c) in count.iter().enumerate() {
            let base = &src[first[g] * d..(first[g] + 1) * d];
            for (o, b) in data[g * d..(g + 1) * d].iter_mut().zip(base) {
                *o = b + *o / c as f64;
            }
        }
        let v = Tensor::new(&[groups, d], data)?;
        Ok(self.derived(
            v,
            Op::SegmentMean {
                a,
                segment,
                inv_count,
            },
            &[a],
        ))
    }

    // ---- reductions and losses -----------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.derived(Tensor::scalar(s), Op::Sum { a }, &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.numel() == 0 {
            return Err(Error::Contract("mean of an empty tensor".into()));
        }
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        Ok(self.derived(Tensor::scalar(s), Op::Mean { a }, &[a]))
    }

    /// Mean over rows of `-log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (n, c) = self.dims2(logits, "cross_entropy")?;
        if labels.len() != n {
            return Err(Error::dim("cross_entropy", self.shape(logits), &[labels.len()]));
        }
        if n == 0 {
            return Err(Error::Contract("cross_entropy over zero rows".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Validation(format!(
                "label {bad} out of range for {c} classes"
            )));
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut loss = 0.0;
        for (r, &l) in labels.iter().enumerate() {
            let row = &mut probs[r * c..(r + 1) * c];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            loss += lse - row[l];
            kernels::softmax_in_place(row);
        }
        let v = Tensor::scalar(loss / n as f64);
        let op = Op::CrossEntropy {
            logits,
            labels: labels.to_vec(),
            probs,
        };
        Ok(self.derived(v, op, &[logits]))
    }

    /// Mean over all entries of binary cross entropy between `sigmoid(logits)`
    /// and `targets`, each target in {0, 1}.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &Tensor) -> Result<Var> {
        if self.shape(logits) != targets.shape() {
            return Err(Error::dim("bce_with_logits", self.shape(logits), targets.shape()));
        }
        if targets.numel() == 0 {
            return Err(Error::Contract("bce_with_logits over zero entries".into()));
        }
        if let Some(t) = targets.data().iter().find(|&&t| t != 0.0 && t != 1.0) {
            return Err(Error::Validation(format!("target {t} is not binary")));
        }
        let x = self.value(logits).data();
        let loss: f64 = x
            .iter()
            .zip(targets.data())
            .map(|(&x, &t)| x.max(0.0) - x * t + (-x.abs()).exp().ln_1p())
            .sum();
        let v = Tensor::scalar(loss / x.len() as f64);
        let op = Op::BceLogits {
            logits,
            targets: targets.data().to_vec(),
        };
        Ok(self.derived(v, op, &[logits]))
    }

    // ---- backward -------------------------------------------------------

    /// Gradients of the scalar `loss` with respect to every grad-enabled
    /// leaf recorded before it. Leaves the loss does not depend on receive
    /// zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        let mut out: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                if matches!(node.op, Op::Leaf) {
                    out[idx] = Some(Tensor::zeros(node.value.shape()));
                }
                continue;
            };
            self.backprop_node(node, g, &mut grads, &mut out[idx])?;
        }
        Ok(Gradients { grads: out })
    }

    fn backprop_node(
        &self,
        node: &Node,
        g: Vec<f64>,
        grads: &mut [Option<Vec<f64>>],
        leaf_out: &mut Option<Tensor>,
    ) -> Result<()> {
        let val = |v: Var| self.nodes[v.0].value.data();
        let mut acc = |v: Var, contrib: Vec<f64>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => {
                    for (e, c) in existing.iter_mut().zip(contrib) {
                        *e += c;
                    }
                }
                slot => *slot = Some(contrib),
            }
        };
        let needs = |v: Var| self.nodes[v.0].requires_grad;

        match &node.op {
            Op::Leaf => {
                *leaf_out = Some(Tensor::new(node.value.shape(), g)?);
            }
            &Op::Matmul { a, b, m, k, n } => {
                if needs(a) {
                    acc(a, kernels::matmul_nt(&g, val(b), m, n, k));
                }
                if needs(b) {
                    acc(b, kernels::matmul_tn(val(a), &g, m, k, n));
                }
            }
            &Op::MatmulNt { a, b, m, k, n } => {
                if needs(a) {
                    acc(a, kernels::matmul(&g, val(b), m, n, k));
                }
                if needs(b) {
                    acc(b, kernels::matmul_tn(&g, val(a), m, n, k));
                }
            }
            &Op::Transpose { a, rows, cols } => {
                acc(a, kernels::transpose(&g, cols, rows));
            }
            &Op::Add { a, b } => {
                if needs(b) {
                    acc(b, g.clone());
                }
                acc(a, g);
            }
            &Op::Sub { a, b } => {
                if needs(b) {
                    acc(b, g.iter().map(|x| -x).collect());
                }
                acc(a, g);
            }
            &Op::Mul { a, b } => {
                if needs(a) {
                    acc(a, g.iter().zip(val(b)).map(|(x, y)| x * y).collect());
                }
                if needs(b) {
                    acc(b, g.iter().zip(val(a)).map(|(x, y)| x * y).collect());
                }
            }
            &Op::AddRow { a, bias } => {
                if needs(bias) {
                    let d = self.nodes[bias.0].value.numel();
                    let mut gb = vec![0.0; d];
                    for (i, x) in g.iter().enumerate() {
                        gb[i % d] += x;
                    }
                    acc(bias, gb);
                }
                acc(a, g);
            }
            &Op::MulRow { a, gain } => {
                let gv = val(gain);
                let d = gv.len();
                if needs(gain) {
                    let mut gg = vec![0.0; d];
                    for (i, (x, av)) in g.iter().zip(val(a)).enumerate() {
                        gg[i % d] += x * av;
                    }
                    acc(gain, gg);
                }
                if needs(a) {
                    acc(a, g.iter().enumerate().map(|(i, x)| x * gv[i % d]).collect());
                }
            }
            &Op::Scale { a, c } => acc(a, g.iter().map(|x| c * x).collect()),
            &Op::Relu { a } => acc(
                a,
                g.iter()
                    .zip(val(a))
                    .map(|(x, &v)| if v > 0.0 { *x } else { 0.0 })
                    .collect(),
            ),
            &Op::Softplus { a } => acc(
                a,
                g.iter()
                    .zip(val(a))
                    .map(|(x, &v)| x * kernels::sigmoid(v))
                    .collect(),
            ),
            &Op::Exp { a } => acc(
                a,
                g.iter().zip(node.value.data()).map(|(x, y)| x * y).collect(),
            ),
            &Op::Sigmoid { a } => acc(
                a,
                g.iter()
                    .zip(node.value.data())
                    .map(|(x, y)| x * y * (1.0 - y))
                    .collect(),
            ),
            &Op::Softmax {
                a,
                outer,
                len,
                inner,
            } => {
                let y = node.value.data();
                let mut ga = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |t: usize| (o * len + t) * inner + i;
                        let dot: f64 = (0..len).map(|t| g[at(t)] * y[at(t)]).sum();
                        for t in 0..len {
                            ga[at(t)] = y[at(t)] * (g[at(t)] - dot);
                        }
                    }
                }
                acc(a, ga);
            }
            Op::ChannelNorm { a, inv_std } => {
                let y = node.value.data();
                let d = y.len() / inv_std.len();
                let mut ga = vec![0.0; y.len()];
                for (r, is) in inv_std.iter().enumerate() {
                    let gr = &g[r * d..(r + 1) * d];
                    let yr = &y[r * d..(r + 1) * d];
                    let mg = gr.iter().sum::<f64>() / d as f64;
                    let mgy = gr.iter().zip(yr).map(|(p, q)| p * q).sum::<f64>() / d as f64;
                    for c in 0..d {
                        ga[r * d + c] = is * (gr[c] - mg - yr[c] * mgy);
                    }
                }
                acc(*a, ga);
            }
            Op::ConcatCols { parts } => {
                let total: usize = parts.iter().map(|p| p.1).sum();
                let n = g.len() / total.max(1);
                let mut offset = 0;
                for &(p, w) in parts {
                    if needs(p) {
                        let mut gp = Vec::with_capacity(n * w);
                        for r in 0..n {
                            gp.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                        }
                        acc(p, gp);
                    }
                    offset += w;
                }
            }
            Op::GatherRows { a, index } => {
                let src = &self.nodes[a.0].value;
                let d = src.cols();
                let mut ga = vec![0.0; src.numel()];
                for (j, &i) in index.iter().enumerate() {
                    for c in 0..d {
                        ga[i * d + c] += g[j * d + c];
                    }
                }
                acc(*a, ga);
            }
            Op::SegmentMean {
                a,
                segment,
                inv_count,
            } => {
                let d = node.value.cols();
                let mut ga = Vec::with_capacity(segment.len() * d);
                for &s in segment.iter() {
                    ga.extend(g[s * d..(s + 1) * d].iter().map(|x| x * inv_count[s]));
                }
                acc(*a, ga);
            }
            &Op::Sum { a } => {
                let n = self.nodes[a.0].value.numel();
                acc(a, vec![g[0]; n]);
            }
            &Op::Mean { a } => {
                let n = self.nodes[a.0].value.numel();
                acc(a, vec![g[0] / n as f64; n]);
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let n = labels.len();
                let c = probs.len() / n;
                let scale = g[0] / n as f64;
                let mut gl: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (r, &l) in labels.iter().enumerate() {
                    gl[r * c + l] -= scale;
                }
                acc(*logits, gl);
            }
            Op::BceLogits { logits, targets } => {
                let x = val(*logits);
                let scale = g[0] / x.len() as f64;
                acc(
                    *logits,
                    x.iter()
                        .zip(targets)
                        .map(|(&x, &t)| (kernels::sigmoid(x) - t) * scale)
                        .collect(),
                );
            }
        }
        Ok(())
    }
}
