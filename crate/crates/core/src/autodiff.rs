//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] is an append-only list of nodes built during one forward pass.
//! Node indices are assigned in creation order, so reverse index order is a
//! valid topological order for [`Graph::backward`]. Drop the graph after the
//! optimizer step; nothing persists between steps.

use crate::error::{Error, Result};
use crate::tensor::{gemm, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul,
    Transpose,
    Add,
    Sub,
    Mul,
    AddRow,
    Scale(f64),
    Gelu,
    Sum,
    Softmax {
        outer: usize,
        len: usize,
        inner: usize,
    },
    LayerNorm {
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Embedding {
        ids: Vec<usize>,
    },
    GatherRows {
        rows: Vec<usize>,
    },
    ConcatRows,
    Attention {
        seq: usize,
        heads: usize,
        mask: Vec<bool>,
        probs: Vec<f64>,
    },
    CrossEntropy {
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    L2 {
        diff: Vec<f64>,
    },
    KlDiv {
        teacher: Vec<f64>,
        probs: Vec<f64>,
    },
}

impl Op {
    fn tag(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul => "matmul",
            Op::Transpose => "transpose",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::AddRow => "add_row",
            Op::Scale(_) => "scale",
            Op::Gelu => "gelu",
            Op::Sum => "sum",
            Op::Softmax { .. } => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Embedding { .. } => "embedding",
            Op::GatherRows { .. } => "gather_rows",
            Op::ConcatRows => "concat_rows",
            Op::Attention { .. } => "attention",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::L2 { .. } => "l2_loss",
            Op::KlDiv { .. } => "kl_div",
        }
    }
}

struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    parents: Vec<Var>,
    requires_grad: bool,
    op: Op,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

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

    /// A leaf whose gradient is tracked.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            parents: Vec::new(),
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, parents: Vec<Var>, op: Op) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            parents,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    /// Gradient of a leaf, zero if never reached.
    pub fn grad_or_zeros(&self, v: Var) -> Tensor {
        self.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(self.shape(v)))
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    pub fn op_tag(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.tag()
    }

    pub fn parents(&self, v: Var) -> &[Var] {
        &self.nodes[v.0].parents
    }

    /// Attention probabilities `[batch, heads, seq, seq]` saved by [`Graph::attention`].
    pub fn attention_probs(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let out = av.matmul(bv)?;
        Ok(self.push(out, vec![a, b], Op::MatMul))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        if av.rank() != 2 {
            return Err(Error::shape("transpose", av.shape(), &[]));
        }
        let out = av.transpose2();
        Ok(self.push(out, vec![a], Op::Transpose))
    }

    fn zip_same(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::shape(op.tag(), av.shape(), bv.shape()));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(out, vec![a, b], op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, Op::Add, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, Op::Sub, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, Op::Mul, |x, y| x * y)
    }

    /// `x [.. × n] + bias [n]`, bias broadcast over rows.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        let n = xv.last_dim();
        if bv.numel() != n {
            return Err(Error::shape("add_row", xv.shape(), bv.shape()));
        }
        let mut out = xv.clone();
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        Ok(self.push(out, vec![x, bias], Op::AddRow))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).map(|v| v * c);
        self.push(out, vec![x], Op::Scale(c))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self
            .value(x)
            .map(|v| 0.5 * v * (1.0 + (GELU_C * (v + GELU_A * v * v * v)).tanh()));
        self.push(out, vec![x], Op::Gelu)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), vec![x], Op::Sum)
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        let shape = xv.shape();
        if axis >= shape.len().max(1) {
            return Err(Error::InvalidInput(format!(
                "softmax axis {axis} out of range for shape {shape:?}"
            )));
        }
        if !xv.is_finite() {
            return Err(Error::NonFinite { op: "softmax" });
        }
        let len = shape.get(axis).copied().unwrap_or(1);
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape.get(axis + 1..).map_or(1, |s| s.iter().product());
        let src = xv.data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let max = (0..len).map(|j| src[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..len {
                    let e = (src[at(j)] - max).exp();
                    out[at(j)] = e;
                    total += e;
                }
                for j in 0..len {
                    out[at(j)] /= total;
                }
            }
        }
        let out = Tensor::new(shape.to_vec(), out)?;
        Ok(self.push(out, vec![x], Op::Softmax { outer, len, inner }))
    }

    /// Layer normalization over the last axis followed by `gain ⊙ x̂ + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.last_dim();
        if d == 1 && eps == 0.0 {
            return Err(Error::InvalidInput(
                "layer_norm over a single feature with eps 0 has degenerate variance".into(),
            ));
        }
        let (gv, bv) = (self.value(gain), self.value(bias));
        if gv.numel() != d || bv.numel() != d {
            return Err(Error::shape("layer_norm", xv.shape(), gv.shape()));
        }
        if !xv.is_finite() {
            return Err(Error::NonFinite { op: "layer_norm" });
        }
        let rows = xv.rows();
        let mut xhat = vec![0.0; rows * d];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; rows * d];
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let denom = (var + eps).sqrt();
            let is = if denom > 0.0 { 1.0 / denom } else { 0.0 };
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = gv.data()[j] * h + bv.data()[j];
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.push(out, vec![x, gain, bias], Op::LayerNorm { xhat, inv_std }))
    }

    /// Row lookup `table[ids]` → `[ids.len() × H]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let out = self.value(table).select_rows(ids)?;
        Ok(self.push(out, vec![table], Op::Embedding { ids: ids.to_vec() }))
    }

    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        if rows.is_empty() {
            return Err(Error::InvalidInput("gather_rows with no rows".into()));
        }
        let out = self.value(x).select_rows(rows)?;
        Ok(self.push(out, vec![x], Op::GatherRows { rows: rows.to_vec() }))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::vstack(&values)?;
        Ok(self.push(out, parts.to_vec(), Op::ConcatRows))
    }

    /// Multi-head scaled dot-product self-attention over a packed batch.
    ///
    /// `q`, `k`, `v` are `[batch·seq × H]`; `mask` has `batch·seq` entries and
    /// marks real positions. Padded keys get exactly zero weight; padded
    /// query rows produce zero output.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, mask: &[bool], seq: usize, heads: usize) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        if qv.shape() != kv.shape() || qv.shape() != vv.shape() || qv.rank() != 2 {
            return Err(Error::shape("attention", qv.shape(), kv.shape()));
        }
        let (rows, width) = (qv.rows(), qv.last_dim());
        if seq == 0 || rows % seq != 0 || mask.len() != rows || heads == 0 || width % heads != 0 {
            return Err(Error::InvalidInput(format!(
                "attention layout: rows {rows}, seq {seq}, width {width}, heads {heads}, mask {}",
                mask.len()
            )));
        }
        let batch = rows / seq;
        let dh = width / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (qv.data(), kv.data(), vv.data());
        let mut out = vec![0.0; rows * width];
        let mut probs = vec![0.0; batch * heads * seq * seq];
        for b in 0..batch {
            let real: Vec<usize> = (0..seq).filter(|&j| mask[b * seq + j]).collect();
            if real.is_empty() {
                return Err(Error::InvalidInput(format!("sample {b} has no unmasked positions")));
            }
            for h in 0..heads {
                let off = h * dh;
                for &i in &real {
                    let qi = &qd[(b * seq + i) * width + off..][..dh];
                    let p = &mut probs[((b * heads + h) * seq + i) * seq..][..seq];
                    let mut max = f64::NEG_INFINITY;
                    for &j in &real {
                        let kj = &kd[(b * seq + j) * width + off..][..dh];
                        let s = dot(qi, kj) * scale;
                        p[j] = s;
                        max = max.max(s);
                    }
                    let mut total = 0.0;
                    for &j in &real {
                        p[j] = (p[j] - max).exp();
                        total += p[j];
                    }
                    let o = &mut out[(b * seq + i) * width + off..][..dh];
                    for &j in &real {
                        p[j] /= total;
                        let vj = &vd[(b * seq + j) * width + off..][..dh];
                        for (od, &vx) in o.iter_mut().zip(vj) {
                            *od += p[j] * vx;
                        }
                    }
                }
            }
        }
        let out = Tensor::new(vec![rows, width], out)?;
        Ok(self.push(
            out,
            vec![q, k, v],
            Op::Attention {
                seq,
                heads,
                mask: mask.to_vec(),
                probs,
            },
        ))
    }

    /// Mean over rows of `−log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let (p, classes) = (lv.rows(), lv.last_dim());
        if targets.is_empty() {
            return Err(Error::InvalidInput("cross_entropy over zero positions".into()));
        }
        if targets.len() != p || lv.rank() != 2 {
            return Err(Error::shape("cross_entropy", lv.shape(), &[targets.len()]));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= classes) {
            return Err(Error::Index { index: t, len: classes });
        }
        if !lv.is_finite() {
            return Err(Error::NonFinite { op: "cross_entropy" });
        }
        let mut probs = vec![0.0; p * classes];
        let mut loss = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let lse = log_softmax_row(lv.row(r), &mut probs[r * classes..(r + 1) * classes]);
            loss += lse - lv.row(r)[t];
        }
        let out = Tensor::scalar(loss / p as f64);
        Ok(self.push(
            out,
            vec![logits],
            Op::CrossEntropy {
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    /// Mean over rows of the squared Euclidean distance to `target`.
    pub fn l2_loss(&mut self, pred: Var, target: &Tensor) -> Result<Var> {
        let pv = self.value(pred);
        if pv.shape() != target.shape() {
            return Err(Error::shape("l2_loss", pv.shape(), target.shape()));
        }
        let diff: Vec<f64> = pv.data().iter().zip(target.data()).map(|(a, b)| a - b).collect();
        let p = pv.rows() as f64;
        let loss = diff.iter().map(|d| d * d).sum::<f64>() / p;
        Ok(self.push(Tensor::scalar(loss), vec![pred], Op::L2 { diff }))
    }

    /// Mean over rows of `KL(teacher ‖ softmax(logits))`.
    pub fn kl_div(&mut self, logits: Var, teacher: &Tensor) -> Result<Var> {
        let lv = self.value(logits);
        if lv.shape() != teacher.shape() || lv.rank() != 2 {
            return Err(Error::shape("kl_div", lv.shape(), teacher.shape()));
        }
        let (p, classes) = (lv.rows(), lv.last_dim());
        for r in 0..p {
            let row = teacher.row(r);
            let total: f64 = row.iter().sum();
            if row.iter().any(|&t| t.is_nan() || t < 0.0) || (total - 1.0).abs() > 1e-6 {
                return Err(Error::InvalidInput(format!(
                    "teacher row {r} is not a distribution (sum {total})"
                )));
            }
        }
        if !lv.is_finite() {
            return Err(Error::NonFinite { op: "kl_div" });
        }
        let mut probs = vec![0.0; p * classes];
        let mut loss = 0.0;
        for r in 0..p {
            let lse = log_softmax_row(lv.row(r), &mut probs[r * classes..(r + 1) * classes]);
            for (k, &t) in teacher.row(r).iter().enumerate() {
                if t > 0.0 {
                    loss += t * (t.ln() - (lv.row(r)[k] - lse));
                }
            }
        }
        let out = Tensor::scalar(loss / p as f64);
        Ok(self.push(
            out,
            vec![logits],
            Op::KlDiv {
                teacher: teacher.data().to_vec(),
                probs,
            },
        ))
    }

    /// Populates gradients of every reachable tracked leaf with `d loss / d leaf`.
    ///
    /// Leaf gradients accumulate across calls until [`Graph::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::InvalidInput(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Tensor::filled(lv.shape(), 1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                let slot = &mut self.nodes[i].grad;
                match slot {
                    Some(acc) => acc.add_assign(&g),
                    None => *slot = Some(g),
                }
                continue;
            }
            self.propagate(i, &g, &mut grads)?;
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[i];
        let ps = &node.parents;
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul => {
                let (a, b) = (ps[0], ps[1]);
                let (av, bv) = (self.value(a), self.value(b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if wants(a) {
                    let mut da = vec![0.0; m * k];
                    gemm(false, true, m, n, k, gd, bv.data(), &mut da, 0.0);
                    accumulate(grads, a, Tensor::new(vec![m, k], da)?);
                }
                if wants(b) {
                    let mut db = vec![0.0; k * n];
                    gemm(true, false, k, m, n, av.data(), gd, &mut db, 0.0);
                    accumulate(grads, b, Tensor::new(vec![k, n], db)?);
                }
            }
            Op::Transpose => accumulate(grads, ps[0], g.transpose2()),
            Op::Add => {
                for &p in ps {
                    if wants(p) {
                        accumulate(grads, p, g.clone());
                    }
                }
            }
            Op::Sub => {
                if wants(ps[0]) {
                    accumulate(grads, ps[0], g.clone());
                }
                if wants(ps[1]) {
                    accumulate(grads, ps[1], g.map(|v| -v));
                }
            }
            Op::Mul => {
                let (a, b) = (ps[0], ps[1]);
                if wants(a) {
                    let d = zip(gd, self.value(b).data(), |x, y| x * y);
                    accumulate(grads, a, Tensor::new(g.shape().to_vec(), d)?);
                }
                if wants(b) {
                    let d = zip(gd, self.value(a).data(), |x, y| x * y);
                    accumulate(grads, b, Tensor::new(g.shape().to_vec(), d)?);
                }
            }
            Op::AddRow => {
                if wants(ps[0]) {
                    accumulate(grads, ps[0], g.clone());
                }
                if wants(ps[1]) {
                    let n = g.last_dim();
                    let mut db = vec![0.0; n];
                    for r in 0..g.rows() {
                        for (d, x) in db.iter_mut().zip(g.row(r)) {
                            *d += x;
                        }
                    }
                    let shape = self.shape(ps[1]).to_vec();
                    accumulate(grads, ps[1], Tensor::new(shape, db)?);
                }
            }
            Op::Scale(c) => accumulate(grads, ps[0], g.map(|v| v * c)),
            Op::Gelu => {
                let xv = self.value(ps[0]);
                let d = zip(gd, xv.data(), |gg, x| gg * gelu_grad(x));
                accumulate(grads, ps[0], Tensor::new(xv.shape().to_vec(), d)?);
            }
            Op::Sum => {
                let s = g.item();
                accumulate(grads, ps[0], Tensor::filled(self.shape(ps[0]), s));
            }
            Op::Softmax { outer, len, inner } => {
                let y = node.value.data();
                let mut dx = vec![0.0; y.len()];
                for o in 0..*outer {
                    for c in 0..*inner {
                        let at = |j: usize| o * len * inner + j * inner + c;
                        let dotp: f64 = (0..*len).map(|j| gd[at(j)] * y[at(j)]).sum();
                        for j in 0..*len {
                            dx[at(j)] = y[at(j)] * (gd[at(j)] - dotp);
                        }
                    }
                }
                accumulate(grads, ps[0], Tensor::new(node.value.shape().to_vec(), dx)?);
            }
            Op::LayerNorm { xhat, inv_std } => {
                let (x, gain, bias) = (ps[0], ps[1], ps[2]);
                let gv = self.value(gain).data();
                let d = gv.len();
                let rows = inv_std.len();
                if wants(gain) || wants(bias) {
                    let mut dg = vec![0.0; d];
                    let mut db = vec![0.0; d];
                    for r in 0..rows {
                        for j in 0..d {
                            dg[j] += gd[r * d + j] * xhat[r * d + j];
                            db[j] += gd[r * d + j];
                        }
                    }
                    if wants(gain) {
                        accumulate(grads, gain, Tensor::new(self.shape(gain).to_vec(), dg)?);
                    }
                    if wants(bias) {
                        accumulate(grads, bias, Tensor::new(self.shape(bias).to_vec(), db)?);
                    }
                }
                if wants(x) {
                    let mut dx = vec![0.0; rows * d];
                    for r in 0..rows {
                        let mut mean_dh = 0.0;
                        let mut mean_dh_h = 0.0;
                        for j in 0..d {
                            let dh = gd[r * d + j] * gv[j];
                            mean_dh += dh;
                            mean_dh_h += dh * xhat[r * d + j];
                        }
                        mean_dh /= d as f64;
                        mean_dh_h /= d as f64;
                        for j in 0..d {
                            let dh = gd[r * d + j] * gv[j];
                            dx[r * d + j] = inv_std[r] * (dh - mean_dh - xhat[r * d + j] * mean_dh_h);
                        }
                    }
                    accumulate(grads, x, Tensor::new(self.shape(x).to_vec(), dx)?);
                }
            }
            Op::Embedding { ids } => {
                let mut dt = Tensor::zeros(self.shape(ps[0]));
                for (r, &id) in ids.iter().enumerate() {
                    for (a, b) in dt.row_mut(id).iter_mut().zip(g.row(r)) {
                        *a += b;
                    }
                }
                accumulate(grads, ps[0], dt);
            }
            Op::GatherRows { rows } => {
                let mut dx = Tensor::zeros(self.shape(ps[0]));
                for (r, &src) in rows.iter().enumerate() {
                    for (a, b) in dx.row_mut(src).iter_mut().zip(g.row(r)) {
                        *a += b;
                    }
                }
                accumulate(grads, ps[0], dx);
            }
            Op::ConcatRows => {
                let mut start = 0;
                for &p in ps {
                    let shape = self.shape(p).to_vec();
                    let n = self.value(p).numel();
                    if wants(p) {
                        accumulate(grads, p, Tensor::new(shape, gd[start..start + n].to_vec())?);
                    }
                    start += n;
                }
            }
            Op::Attention {
                seq,
                heads,
                mask,
                probs,
            } => {
                let (q, k, v) = (ps[0], ps[1], ps[2]);
                let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
                let width = self.value(q).last_dim();
                let (seq, heads) = (*seq, *heads);
                let rows = mask.len();
                let batch = rows / seq;
                let dh = width / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let mut dq = vec![0.0; rows * width];
                let mut dk = vec![0.0; rows * width];
                let mut dv = vec![0.0; rows * width];
                let mut dp = vec![0.0; seq];
                for b in 0..batch {
                    let real: Vec<usize> = (0..seq).filter(|&j| mask[b * seq + j]).collect();
                    for h in 0..heads {
                        let off = h * dh;
                        for &i in &real {
                            let p = &probs[((b * heads + h) * seq + i) * seq..][..seq];
                            let go = &gd[(b * seq + i) * width + off..][..dh];
                            let mut dotp = 0.0;
                            for &j in &real {
                                let vj = &vd[(b * seq + j) * width + off..][..dh];
                                dp[j] = dot(go, vj);
                                dotp += p[j] * dp[j];
                                let dvj = &mut dv[(b * seq + j) * width + off..][..dh];
                                for (a, &x) in dvj.iter_mut().zip(go) {
                                    *a += p[j] * x;
                                }
                            }
                            let qi_at = (b * seq + i) * width + off;
                            for &j in &real {
                                let ds = p[j] * (dp[j] - dotp) * scale;
                                let kj_at = (b * seq + j) * width + off;
                                for d in 0..dh {
                                    dq[qi_at + d] += ds * kd[kj_at + d];
                                    dk[kj_at + d] += ds * qd[qi_at + d];
                                }
                            }
                        }
                    }
                }
                let shape = vec![rows, width];
                if wants(q) {
                    accumulate(grads, q, Tensor::new(shape.clone(), dq)?);
                }
                if wants(k) {
                    accumulate(grads, k, Tensor::new(shape.clone(), dk)?);
                }
                if wants(v) {
                    accumulate(grads, v, Tensor::new(shape, dv)?);
                }
            }
            Op::CrossEntropy { targets, probs } => {
                let s = g.item() / targets.len() as f64;
                let classes = probs.len() / targets.len();
                let mut dx: Vec<f64> = probs.iter().map(|p| p * s).collect();
                for (r, &t) in targets.iter().enumerate() {
                    dx[r * classes + t] -= s;
                }
                accumulate(grads, ps[0], Tensor::new(self.shape(ps[0]).to_vec(), dx)?);
            }
            Op::L2 { diff } => {
                let rows = self.value(ps[0]).rows() as f64;
                let s = 2.0 * g.item() / rows;
                let dx = diff.iter().map(|d| d * s).collect();
                accumulate(grads, ps[0], Tensor::new(self.shape(ps[0]).to_vec(), dx)?);
            }
            Op::KlDiv { teacher, probs } => {
                let rows = self.value(ps[0]).rows() as f64;
                let s = g.item() / rows;
                let dx = zip(probs, teacher, |p, t| (p - t) * s);
                accumulate(grads, ps[0], Tensor::new(self.shape(ps[0]).to_vec(), dx)?);
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot => *slot = Some(g),
    }
}

fn zip(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Writes `softmax(row)` into `probs` and returns `logsumexp(row)`.
fn log_softmax_row(row: &[f64], probs: &mut [f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (p, &x) in probs.iter_mut().zip(row) {
        *p = (x - max).exp();
        total += *p;
    }
    for p in probs.iter_mut() {
        *p /= total;
    }
    max + total.ln()
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}
