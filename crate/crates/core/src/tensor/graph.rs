use std::rc::Rc;

use super::ops::{
    erf_gelu, erf_gelu_grad, log_softmax_row, matmul_acc, matmul_at_acc, matmul_bt_acc,
    softmax_row,
};
use super::{Result, Tensor, TensorError};

pub const LAYER_NORM_EPS: f64 = 1e-6;

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Gather/scatter plan for a submanifold convolution: for every kernel
/// offset, the `(output_row, input_row)` pairs that touch it.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvRules {
    pub n_rows: usize,
    pub per_offset: Vec<Vec<(u32, u32)>>,
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Linear(Var, Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    MulConst(Var, Rc<Tensor>),
    Scale(Var, f64),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        offset: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Softmax(Var),
    LogSoftmax(Var),
    IndexSelect(Var, Rc<[usize]>),
    ScatterAdd(Var, Rc<[usize]>),
    ScatterMean(Var, Rc<[usize]>, Rc<[f64]>),
    ScaleRows(Var, Var),
    SelectEntries(Var, Rc<[usize]>, usize),
    MeanRows(Var),
    Sum(Var),
    Mean(Var),
    SparseConv(Var, Var, Rc<ConvRules>),
    L2NormalizeRows(Var, Vec<f64>),
    CrossEntropy(Var, Rc<[usize]>),
    SoftCrossEntropy(Var, Rc<Tensor>),
    ProbNll(Var, Rc<[usize]>, f64),
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Append-only record of a forward computation.
///
/// Nodes are pushed in evaluation order, so the node list is already a
/// topological order and backward is a single reverse sweep.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(self.shapes[v.0].clone(), g.clone()).expect("gradient shape"))
    }

    pub fn get_slice(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }
}

fn shape_err(op: &'static str, detail: String) -> TensorError {
    TensorError::Shape { op, detail }
}

fn is_vector_of(t: &Tensor, n: usize) -> bool {
    t.len() == n && (t.shape().len() == 1 || t.rows() == 1)
}

impl Graph {
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Ids of every leaf that takes gradients.
    pub fn grad_leaves(&self) -> Vec<Var> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| n.requires_grad && matches!(n.op, Op::Leaf))
            .map(|(i, _)| Var(i))
            .collect()
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push_unchecked(t, true, Op::Leaf)
    }

    /// Leaf that never receives gradients.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push_unchecked(t, false, Op::Leaf)
    }

    fn push_unchecked(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: Tensor, inputs: &[Var], op: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push_unchecked(value, requires_grad, op))
    }

    fn val(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.val(a), self.val(b));
        let (n, m) = (ta.rows(), ta.cols());
        if tb.rows() != m || tb.shape().len() != 2 {
            return Err(shape_err("matmul", format!("{:?} x {:?}", ta.shape(), tb.shape())));
        }
        let p = tb.cols();
        let mut out = vec![0.0; n * p];
        matmul_acc(ta.data(), tb.data(), &mut out, n, m, p);
        let value = Tensor::new(vec![n, p], out)?;
        self.push("matmul", value, &[a, b], Op::MatMul(a, b))
    }

    /// Transpose of a matrix.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let tx = self.val(x);
        if tx.shape().len() != 2 {
            return Err(shape_err("transpose", format!("{:?}", tx.shape())));
        }
        let (n, m) = (tx.rows(), tx.cols());
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                out[j * n + i] = tx.data()[i * m + j];
            }
        }
        let value = Tensor::new(vec![m, n], out)?;
        self.push("transpose", value, &[x], Op::Transpose(x))
    }

    /// `x·weight + bias` for `x: N×Din`, `weight: Din×Dout`, `bias: Dout`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let (tx, tw, tb) = (self.val(x), self.val(weight), self.val(bias));
        let (n, m) = (tx.rows(), tx.cols());
        if tw.shape().len() != 2 || tw.rows() != m || !is_vector_of(tb, tw.cols()) {
            return Err(shape_err(
                "linear",
                format!("x {:?} w {:?} b {:?}", tx.shape(), tw.shape(), tb.shape()),
            ));
        }
        let p = tw.cols();
        let mut out = Vec::with_capacity(n * p);
        for _ in 0..n {
            out.extend_from_slice(tb.data());
        }
        matmul_acc(tx.data(), tw.data(), &mut out, n, m, p);
        let value = Tensor::new(vec![n, p], out)?;
        self.push("linear", value, &[x, weight, bias], Op::Linear(x, weight, bias))
    }

    fn zip_same(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.val(a), self.val(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(name, format!("{:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same("add", a, b, |x, y| x + y)?;
        self.push("add", value, &[a, b], Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same("sub", a, b, |x, y| x - y)?;
        self.push("sub", value, &[a, b], Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same("mul", a, b, |x, y| x * y)?;
        self.push("mul", value, &[a, b], Op::Mul(a, b))
    }

    /// Elementwise product with a tensor that takes no gradient.
    pub fn mul_const(&mut self, x: Var, c: Rc<Tensor>) -> Result<Var> {
        let tx = self.val(x);
        if tx.shape() != c.shape() {
            return Err(shape_err("mul_const", format!("{:?} vs {:?}", tx.shape(), c.shape())));
        }
        let data = tx.data().iter().zip(c.data()).map(|(a, b)| a * b).collect();
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        self.push("mul_const", value, &[x], Op::MulConst(x, c))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let tx = self.val(x);
        let data = tx.data().iter().map(|v| v * s).collect();
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        self.push("scale", value, &[x], Op::Scale(x, s))
    }

    /// Broadcast-add a `D` vector to every row of `x: N×D`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (tx, tr) = (self.val(x), self.val(row));
        let d = tx.cols();
        if !is_vector_of(tr, d) {
            return Err(shape_err("add_row", format!("{:?} + {:?}", tx.shape(), tr.shape())));
        }
        let mut data = tx.data().to_vec();
        for chunk in data.chunks_mut(d) {
            for (o, r) in chunk.iter_mut().zip(tr.data()) {
                *o += r;
            }
        }
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        self.push("add_row", value, &[x, row], Op::AddRow(x, row))
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let tx = self.val(x);
        let data = tx.data().iter().map(|&v| erf_gelu(v)).collect();
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        self.push("gelu", value, &[x], Op::Gelu(x))
    }

    /// Per-row normalization to zero mean and unit variance, then `gain ⊙ · + offset`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, offset: Var) -> Result<Var> {
        let (tx, tg, to) = (self.val(x), self.val(gain), self.val(offset));
        let (n, d) = (tx.rows(), tx.cols());
        if !is_vector_of(tg, d) || !is_vector_of(to, d) {
            return Err(shape_err("layer_norm", format!("{:?} gain {:?}", tx.shape(), tg.shape())));
        }
        let mut xhat = vec![0.0; n * d];
        let mut inv_std = vec![0.0; n];
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            let row = tx.row(i);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[i] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[i * d + j] = h;
                out[i * d + j] = h * tg.data()[j] + to.data()[j];
            }
        }
        let value = Tensor::new(tx.shape().to_vec(), out)?;
        self.push(
            "layer_norm",
            value,
            &[x, gain, offset],
            Op::LayerNorm {
                x,
                gain,
                offset,
                xhat,
                inv_std,
            },
        )
    }

    pub fn softmax_last(&mut self, x: Var) -> Result<Var> {
        let tx = self.val(x);
        let k = tx.cols();
        let mut out = vec![0.0; tx.len()];
        for (row, o) in tx.data().chunks(k).zip(out.chunks_mut(k)) {
            softmax_row(row, o);
        }
        let value = Tensor::new(tx.shape().to_vec(), out)?;
        self.push("softmax_last", value, &[x], Op::Softmax(x))
    }

    pub fn log_softmax_last(&mut self, x: Var) -> Result<Var> {
        let tx = self.val(x);
        let k = tx.cols();
        let mut out = vec![0.0; tx.len()];
        for (row, o) in tx.data().chunks(k).zip(out.chunks_mut(k)) {
            log_softmax_row(row, o);
        }
        let value = Tensor::new(tx.shape().to_vec(), out)?;
        self.push("log_softmax_last", value, &[x], Op::LogSoftmax(x))
    }

    /// Rows of `x` picked by `idx` (repeats allowed).
    pub fn index_select(&mut self, x: Var, idx: Rc<[usize]>) -> Result<Var> {
        let tx = self.val(x);
        let (n, d) = (tx.rows(), tx.cols());
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx.iter() {
            if i >= n {
                return Err(TensorError::Index {
                    op: "index_select",
                    index: i,
                    len: n,
                });
            }
            out.extend_from_slice(tx.row(i));
        }
        let value = Tensor::new(vec![idx.len(), d], out)?;
        self.push("index_select", value, &[x], Op::IndexSelect(x, idx))
    }

    /// `out[idx[r]] += x[r]` into `n_out` zero rows.
    pub fn scatter_add(&mut self, x: Var, idx: Rc<[usize]>, n_out: usize) -> Result<Var> {
        let tx = self.val(x);
        let d = tx.cols();
        if idx.len() != tx.rows() {
            return Err(shape_err("scatter_add", format!("{} indices for {} rows", idx.len(), tx.rows())));
        }
        let mut out = vec![0.0; n_out * d];
        for (r, &t) in idx.iter().enumerate() {
            if t >= n_out {
                return Err(TensorError::Index {
                    op: "scatter_add",
                    index: t,
                    len: n_out,
                });
            }
            for (o, v) in out[t * d..(t + 1) * d].iter_mut().zip(tx.row(r)) {
                *o += v;
            }
        }
        let value = Tensor::new(vec![n_out, d], out)?;
        self.push("scatter_add", value, &[x], Op::ScatterAdd(x, idx))
    }

    /// Group mean: `out[g] = mean{ x[r] : assign[r] == g }`. Every group must be nonempty.
    pub fn scatter_mean(&mut self, x: Var, assign: Rc<[usize]>, n_out: usize) -> Result<Var> {
        let tx = self.val(x);
        let d = tx.cols();
        if assign.len() != tx.rows() {
            return Err(shape_err("scatter_mean", format!("{} indices for {} rows", assign.len(), tx.rows())));
        }
        let mut counts = vec![0.0; n_out];
        let mut out = vec![0.0; n_out * d];
        for (r, &g) in assign.iter().enumerate() {
            if g >= n_out {
                return Err(TensorError::Index {
                    op: "scatter_mean",
                    index: g,
                    len: n_out,
                });
            }
            counts[g] += 1.0;
            for (o, v) in out[g * d..(g + 1) * d].iter_mut().zip(tx.row(r)) {
                *o += v;
            }
        }
        for (g, &c) in counts.iter().enumerate() {
            if c == 0.0 {
                return Err(shape_err("scatter_mean", format!("empty group {g}")));
            }
            for o in &mut out[g * d..(g + 1) * d] {
                *o /= c;
            }
        }
        let value = Tensor::new(vec![n_out, d], out)?;
        let counts: Rc<[f64]> = counts.into();
        self.push("scatter_mean", value, &[x], Op::ScatterMean(x, assign, counts))
    }

    /// Multiply row `i` of `x: N×D` by `s[i]` where `s: N×1`.
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let (tx, ts) = (self.val(x), self.val(s));
        let (n, d) = (tx.rows(), tx.cols());
        if ts.len() != n {
            return Err(shape_err("scale_rows", format!("{:?} by {:?}", tx.shape(), ts.shape())));
        }
        let mut out = tx.data().to_vec();
        for (i, chunk) in out.chunks_mut(d).enumerate() {
            let f = ts.data()[i];
            for o in chunk {
                *o *= f;
            }
        }
        let value = Tensor::new(tx.shape().to_vec(), out)?;
        self.push("scale_rows", value, &[x, s], Op::ScaleRows(x, s))
    }

    /// Column `col` of `x` restricted to `rows`, as `len(rows)×1`.
    pub fn select_entries(&mut self, x: Var, rows: Rc<[usize]>, col: usize) -> Result<Var> {
        let tx = self.val(x);
        let (n, k) = (tx.rows(), tx.cols());
        if col >= k {
            return Err(TensorError::Index {
                op: "select_entries",
                index: col,
                len: k,
            });
        }
        let mut out = Vec::with_capacity(rows.len());
        for &r in rows.iter() {
            if r >= n {
                return Err(TensorError::Index {
                    op: "select_entries",
                    index: r,
                    len: n,
                });
            }
            out.push(tx.data()[r * k + col]);
        }
        let value = Tensor::new(vec![rows.len(), 1], out)?;
        self.push("select_entries", value, &[x], Op::SelectEntries(x, rows, col))
    }

    /// Column means of `x: N×K`, shape `[K]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let tx = self.val(x);
        let (n, k) = (tx.rows(), tx.cols());
        let mut out = vec![0.0; k];
        for row in tx.data().chunks(k) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        for o in &mut out {
            *o /= n as f64;
        }
        let value = Tensor::new(vec![k], out)?;
        self.push("mean_rows", value, &[x], Op::MeanRows(x))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.val(x).data().iter().sum();
        self.push("sum", Tensor::scalar(s), &[x], Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.val(x);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push("mean", Tensor::scalar(s), &[x], Op::Mean(x))
    }

    /// Submanifold sparse convolution without bias.
    ///
    /// `weight` is `(offsets·Din)×Dout`; block `o` holds the `Din×Dout`
    /// matrix applied to the neighbor at offset `o`.
    pub fn sparse_conv(&mut self, x: Var, weight: Var, rules: Rc<ConvRules>) -> Result<Var> {
        let (tx, tw) = (self.val(x), self.val(weight));
        let (n, din) = (tx.rows(), tx.cols());
        let n_off = rules.per_offset.len();
        if tw.rows() != n_off * din || rules.n_rows != n {
            return Err(shape_err(
                "sparse_conv",
                format!("x {:?}, w {:?}, {} offsets, {} rule rows", tx.shape(), tw.shape(), n_off, rules.n_rows),
            ));
        }
        let dout = tw.cols();
        let mut out = vec![0.0; n * dout];
        for (o, pairs) in rules.per_offset.iter().enumerate() {
            let w = &tw.data()[o * din * dout..(o + 1) * din * dout];
            for &(dst, src) in pairs {
                let (dst, src) = (dst as usize, src as usize);
                matmul_acc(tx.row(src), w, &mut out[dst * dout..(dst + 1) * dout], 1, din, dout);
            }
        }
        let value = Tensor::new(vec![n, dout], out)?;
        self.push("sparse_conv", value, &[x, weight], Op::SparseConv(x, weight, rules))
    }

    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let tx = self.val(x);
        let d = tx.cols();
        let mut norms = Vec::with_capacity(tx.rows());
        let mut out = tx.data().to_vec();
        for chunk in out.chunks_mut(d) {
            let nrm = chunk.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            norms.push(nrm);
            for v in chunk {
                *v /= nrm;
            }
        }
        let value = Tensor::new(tx.shape().to_vec(), out)?;
        self.push("l2_normalize_rows", value, &[x], Op::L2NormalizeRows(x, norms))
    }

    /// Mean cross-entropy of integer `labels` under `softmax(logits)`.
    pub fn cross_entropy(&mut self, logits: Var, labels: Rc<[usize]>) -> Result<Var> {
        let tl = self.val(logits);
        let (n, c) = (tl.rows(), tl.cols());
        if labels.len() != n || n == 0 {
            return Err(shape_err("cross_entropy", format!("{} labels for {} rows", labels.len(), n)));
        }
        let mut lsm = vec![0.0; c];
        let mut total = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            if y >= c {
                return Err(TensorError::Index {
                    op: "cross_entropy",
                    index: y,
                    len: c,
                });
            }
            log_softmax_row(tl.row(i), &mut lsm);
            total -= lsm[y];
        }
        let value = Tensor::scalar(total / n as f64);
        self.push("cross_entropy", value, &[logits], Op::CrossEntropy(logits, labels))
    }

    /// Mean of `−log max(probs[i, y_i], floor)` over rows.
    pub fn prob_nll(&mut self, probs: Var, labels: Rc<[usize]>, floor: f64) -> Result<Var> {
        let tp = self.val(probs);
        let (n, c) = (tp.rows(), tp.cols());
        if labels.len() != n || n == 0 {
            return Err(shape_err("prob_nll", format!("{} labels for {} rows", labels.len(), n)));
        }
        let mut total = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            if y >= c {
                return Err(TensorError::Index {
                    op: "prob_nll",
                    index: y,
                    len: c,
                });
            }
            total -= tp.get2(i, y).max(floor).ln();
        }
        let value = Tensor::scalar(total / n as f64);
        self.push("prob_nll", value, &[probs], Op::ProbNll(probs, labels, floor))
    }

    /// Mean over rows of `−Σ_c target[c]·log softmax(logits)[c]`; targets take no gradient.
    pub fn soft_cross_entropy(&mut self, logits: Var, target: Rc<Tensor>) -> Result<Var> {
        let tl = self.val(logits);
        if tl.shape() != target.shape() {
            return Err(shape_err("soft_cross_entropy", format!("{:?} vs {:?}", tl.shape(), target.shape())));
        }
        let (n, c) = (tl.rows(), tl.cols());
        let mut lsm = vec![0.0; c];
        let mut total = 0.0;
        for i in 0..n {
            log_softmax_row(tl.row(i), &mut lsm);
            total -= target.row(i).iter().zip(&lsm).map(|(t, l)| t * l).sum::<f64>();
        }
        let value = Tensor::scalar(total / n as f64);
        self.push("soft_cross_entropy", value, &[logits], Op::SoftCrossEntropy(logits, target))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.val(loss);
        if lt.len() != 1 {
            return Err(TensorError::NonScalarLoss(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.requires_grad {
                self.propagate(&node.op, &node.value, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| if n.requires_grad { g } else { None })
            .collect();
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn acc<'a>(&self, grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn propagate(&self, op: &Op, out: &Tensor, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.val(*a), self.val(*b));
                let (n, m, p) = (ta.rows(), ta.cols(), tb.cols());
                if let Some(ga) = self.acc(grads, *a) {
                    matmul_bt_acc(g, tb.data(), ga, n, m, p);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    matmul_at_acc(ta.data(), g, gb, n, m, p);
                }
            }
            Op::Transpose(x) => {
                let (n, m) = (out.cols(), out.rows());
                if let Some(gx) = self.acc(grads, *x) {
                    for i in 0..n {
                        for j in 0..m {
                            gx[i * m + j] += g[j * n + i];
                        }
                    }
                }
            }
            Op::Linear(x, w, b) => {
                let (tx, tw) = (self.val(*x), self.val(*w));
                let (n, m, p) = (tx.rows(), tx.cols(), tw.cols());
                if let Some(gx) = self.acc(grads, *x) {
                    matmul_bt_acc(g, tw.data(), gx, n, m, p);
                }
                if let Some(gw) = self.acc(grads, *w) {
                    matmul_at_acc(tx.data(), g, gw, n, m, p);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for row in g.chunks(p) {
                        for (o, v) in gb.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(gv) = self.acc(grads, v) {
                        add_into(gv, g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.acc(grads, *a) {
                    add_into(ga, g);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for (o, v) in gb.iter_mut().zip(g) {
                        *o -= v;
                    }
                }
            }
            Op::AddRow(x, row) => {
                if let Some(gx) = self.acc(grads, *x) {
                    add_into(gx, g);
                }
                let d = out.cols();
                if let Some(gr) = self.acc(grads, *row) {
                    for chunk in g.chunks(d) {
                        add_into(gr, chunk);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.val(*a).data(), self.val(*b).data());
                if let Some(ga) = self.acc(grads, *a) {
                    for ((o, gv), bv) in ga.iter_mut().zip(g).zip(tb) {
                        *o += gv * bv;
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for ((o, gv), av) in gb.iter_mut().zip(g).zip(ta) {
                        *o += gv * av;
                    }
                }
            }
            Op::MulConst(x, c) => {
                if let Some(gx) = self.acc(grads, *x) {
                    for ((o, gv), cv) in gx.iter_mut().zip(g).zip(c.data()) {
                        *o += gv * cv;
                    }
                }
            }
            Op::Scale(x, s) => {
                if let Some(gx) = self.acc(grads, *x) {
                    for (o, gv) in gx.iter_mut().zip(g) {
                        *o += gv * s;
                    }
                }
            }
            Op::Gelu(x) => {
                let tx = self.val(*x).data();
                if let Some(gx) = self.acc(grads, *x) {
                    for ((o, gv), &xv) in gx.iter_mut().zip(g).zip(tx) {
                        *o += gv * erf_gelu_grad(xv);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                offset,
                xhat,
                inv_std,
            } => {
                let d = out.cols();
                let tg = self.val(*gain).data();
                if let Some(gg) = self.acc(grads, *gain) {
                    for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            gg[j] += gr[j] * hr[j];
                        }
                    }
                }
                if let Some(go) = self.acc(grads, *offset) {
                    for gr in g.chunks(d) {
                        add_into(go, gr);
                    }
                }
                if let Some(gx) = self.acc(grads, *x) {
                    let mut dh = vec![0.0; d];
                    for (i, (gr, hr)) in g.chunks(d).zip(xhat.chunks(d)).enumerate() {
                        for j in 0..d {
                            dh[j] = gr[j] * tg[j];
                        }
                        let mean_dh = dh.iter().sum::<f64>() / d as f64;
                        let mean_dh_h = dh.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        let row = &mut gx[i * d..(i + 1) * d];
                        for j in 0..d {
                            row[j] += inv_std[i] * (dh[j] - mean_dh - hr[j] * mean_dh_h);
                        }
                    }
                }
            }
            Op::Softmax(x) => {
                let k = out.cols();
                if let Some(gx) = self.acc(grads, *x) {
                    for ((gr, pr), orow) in g.chunks(k).zip(out.data().chunks(k)).zip(gx.chunks_mut(k)) {
                        let dot: f64 = gr.iter().zip(pr).map(|(a, b)| a * b).sum();
                        for j in 0..k {
                            orow[j] += pr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::LogSoftmax(x) => {
                let k = out.cols();
                if let Some(gx) = self.acc(grads, *x) {
                    for ((gr, lr), orow) in g.chunks(k).zip(out.data().chunks(k)).zip(gx.chunks_mut(k)) {
                        let gsum: f64 = gr.iter().sum();
                        for j in 0..k {
                            orow[j] += gr[j] - lr[j].exp() * gsum;
                        }
                    }
                }
            }
            Op::IndexSelect(x, idx) => {
                let d = out.cols();
                if let Some(gx) = self.acc(grads, *x) {
                    for (r, &src) in idx.iter().enumerate() {
                        add_into(&mut gx[src * d..(src + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                }
            }
            Op::ScatterAdd(x, idx) => {
                let d = out.cols();
                if let Some(gx) = self.acc(grads, *x) {
                    for (r, &dst) in idx.iter().enumerate() {
                        add_into(&mut gx[r * d..(r + 1) * d], &g[dst * d..(dst + 1) * d]);
                    }
                }
            }
            Op::ScatterMean(x, assign, counts) => {
                let d = out.cols();
                if let Some(gx) = self.acc(grads, *x) {
                    for (r, &grp) in assign.iter().enumerate() {
                        let c = counts[grp];
                        for (o, gv) in gx[r * d..(r + 1) * d].iter_mut().zip(&g[grp * d..(grp + 1) * d]) {
                            *o += gv / c;
                        }
                    }
                }
            }
            Op::ScaleRows(x, s) => {
                let d = out.cols();
                let (tx, ts) = (self.val(*x).data(), self.val(*s).data());
                if let Some(gx) = self.acc(grads, *x) {
                    for (i, (o, gr)) in gx.chunks_mut(d).zip(g.chunks(d)).enumerate() {
                        for (ov, gv) in o.iter_mut().zip(gr) {
                            *ov += gv * ts[i];
                        }
                    }
                }
                if let Some(gs) = self.acc(grads, *s) {
                    for (i, (xr, gr)) in tx.chunks(d).zip(g.chunks(d)).enumerate() {
                        gs[i] += xr.iter().zip(gr).map(|(a, b)| a * b).sum::<f64>();
                    }
                }
            }
            Op::SelectEntries(x, rows, col) => {
                let k = self.val(*x).cols();
                if let Some(gx) = self.acc(grads, *x) {
                    for (r, &row) in rows.iter().enumerate() {
                        gx[row * k + col] += g[r];
                    }
                }
            }
            Op::MeanRows(x) => {
                let tx = self.val(*x);
                let (n, k) = (tx.rows(), tx.cols());
                if let Some(gx) = self.acc(grads, *x) {
                    for row in gx.chunks_mut(k) {
                        for (o, gv) in row.iter_mut().zip(g) {
                            *o += gv / n as f64;
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = self.acc(grads, *x) {
                    for o in gx.iter_mut() {
                        *o += g[0];
                    }
                }
            }
            Op::Mean(x) => {
                if let Some(gx) = self.acc(grads, *x) {
                    let n = gx.len() as f64;
                    for o in gx.iter_mut() {
                        *o += g[0] / n;
                    }
                }
            }
            Op::SparseConv(x, w, rules) => {
                let (tx, tw) = (self.val(*x), self.val(*w));
                let din = tx.cols();
                let dout = tw.cols();
                if let Some(gx) = self.acc(grads, *x) {
                    for (o, pairs) in rules.per_offset.iter().enumerate() {
                        let wo = &tw.data()[o * din * dout..(o + 1) * din * dout];
                        for &(dst, src) in pairs {
                            let (dst, src) = (dst as usize, src as usize);
                            matmul_bt_acc(
                                &g[dst * dout..(dst + 1) * dout],
                                wo,
                                &mut gx[src * din..(src + 1) * din],
                                1,
                                din,
                                dout,
                            );
                        }
                    }
                }
                if let Some(gw) = self.acc(grads, *w) {
                    for (o, pairs) in rules.per_offset.iter().enumerate() {
                        let gwo = &mut gw[o * din * dout..(o + 1) * din * dout];
                        for &(dst, src) in pairs {
                            let (dst, src) = (dst as usize, src as usize);
                            matmul_at_acc(tx.row(src), &g[dst * dout..(dst + 1) * dout], gwo, 1, din, dout);
                        }
                    }
                }
            }
            Op::L2NormalizeRows(x, norms) => {
                let d = out.cols();
                if let Some(gx) = self.acc(grads, *x) {
                    for (i, ((o, gr), yr)) in gx.chunks_mut(d).zip(g.chunks(d)).zip(out.data().chunks(d)).enumerate() {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for j in 0..d {
                            o[j] += (gr[j] - yr[j] * dot) / norms[i];
                        }
                    }
                }
            }
            Op::CrossEntropy(logits, labels) => {
                let tl = self.val(*logits);
                let (n, c) = (tl.rows(), tl.cols());
                if let Some(gl) = self.acc(grads, *logits) {
                    let scale = g[0] / n as f64;
                    let mut p = vec![0.0; c];
                    for (i, &y) in labels.iter().enumerate() {
                        softmax_row(tl.row(i), &mut p);
                        let row = &mut gl[i * c..(i + 1) * c];
                        for j in 0..c {
                            let t = if j == y { 1.0 } else { 0.0 };
                            row[j] += scale * (p[j] - t);
                        }
                    }
                }
            }
            Op::ProbNll(probs, labels, floor) => {
                let tp = self.val(*probs);
                let (n, c) = (tp.rows(), tp.cols());
                if let Some(gp) = self.acc(grads, *probs) {
                    for (i, &y) in labels.iter().enumerate() {
                        let q = tp.get2(i, y);
                        // clamped region is flat
                        if q > *floor {
                            gp[i * c + y] -= g[0] / (n as f64 * q);
                        }
                    }
                }
            }
            Op::SoftCrossEntropy(logits, target) => {
                let tl = self.val(*logits);
                let (n, c) = (tl.rows(), tl.cols());
                if let Some(gl) = self.acc(grads, *logits) {
                    let scale = g[0] / n as f64;
                    let mut p = vec![0.0; c];
                    for i in 0..n {
                        softmax_row(tl.row(i), &mut p);
                        let trow = target.row(i);
                        let tsum: f64 = trow.iter().sum();
                        let row = &mut gl[i * c..(i + 1) * c];
                        for j in 0..c {
                            row[j] += scale * (tsum * p[j] - trow[j]);
                        }
                    }
                }
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (o, v) in dst.iter_mut().zip(src) {
        *o += v;
    }
}
