use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::kernels::{gemm_nn, gemm_nt, gemm_tn};
use super::{Grads, ParamId, ParamSet, Tensor};
use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-10;

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Deliberately wrong backward rules, used to confirm that the finite
/// difference checker notices a broken gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    /// Softmax backward forgets the normalization term.
    Softmax,
    /// Layer-norm backward drops the mean-of-product correction.
    LayerNorm,
}

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Embedding { table: Var, ids: Vec<u32> },
    Softmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Relu(Var),
    Gelu(Var),
    ConcatCols(Vec<Var>),
    SliceCols { x: Var, start: usize },
    SliceRows { x: Var, start: usize },
    CrossEntropy { logits: Var, targets: Vec<u32>, ignore: u32, probs: Vec<f64>, count: usize },
    BceWithLogits { logits: Var, labels: Vec<f64> },
    Sum(Var),
    Mean(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Tape of recorded primitives.
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    param_vars: Vec<Option<Var>>,
    fault: Option<Fault>,
    centered_ce: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, detail: alloc::string::String) -> Error {
    Error::Shape { op, detail }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            param_vars: Vec::new(),
            fault: None,
            centered_ce: false,
        }
    }

    pub fn with_fault(fault: Fault) -> Self {
        Graph {
            fault: Some(fault),
            ..Self::new()
        }
    }

    /// Makes [`Graph::cross_entropy`] report `loss - ln V` instead of the
    /// loss. Gradients are unchanged; the value sits near zero for
    /// near-uniform predictions and is computed without first rounding at
    /// the magnitude of `ln V`, which keeps finite differences precise.
    pub fn centered(mut self) -> Self {
        self.centered_ce = true;
        self
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

    /// Gradient of the last `backward` target with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A value that receives no gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf whose gradient is tracked.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Parameter leaf; repeated calls for the same id share one node.
    pub fn param(&mut self, params: &ParamSet, id: ParamId) -> Var {
        if self.param_vars.len() <= id.0 {
            self.param_vars.resize(id.0 + 1, None);
        }
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let v = self.push(params.get(id).clone(), Op::Param(id), true);
        self.param_vars[id.0] = Some(v);
        v
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let ((m, k), (k2, n)) = (self.dims(a), self.dims(b));
        if k != k2 {
            return Err(shape_err("matmul", format!("[{m}x{k}] · [{k2}x{n}]")));
        }
        let mut out = vec![0.0; m * n];
        gemm_nn(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b), ng))
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let ((m, k), (n, k2)) = (self.dims(a), self.dims(b));
        if k != k2 {
            return Err(shape_err("matmul_t", format!("[{m}x{k}] · [{n}x{k2}]ᵀ")));
        }
        let mut out = vec![0.0; m * n];
        gemm_nt(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMulT(a, b), ng))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(shape_err(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::Add(a, b), ng))
    }

    /// Adds a length-`n` row vector to every row of `a[m×n]`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.dims(a);
        if self.value(bias).len() != n {
            return Err(shape_err(
                "add_bias",
                format!("[{m}x{n}] + bias of {}", self.value(bias).len()),
            ));
        }
        let b = self.value(bias).data();
        let mut data = self.value(a).data().to_vec();
        for row in data.chunks_mut(n.max(1)) {
            for (x, y) in row.iter_mut().zip(b) {
                *x += y;
            }
        }
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let ng = self.ng(a) || self.ng(bias);
        Ok(self.push(t, Op::AddBias(a, bias), ng))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let data = self.value(a).data().iter().map(|x| x * s).collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data).expect("same length");
        let ng = self.ng(a);
        self.push(t, Op::Scale(a, s), ng)
    }

    /// Gathers rows of `table` (one per id).
    pub fn embedding(&mut self, table: Var, ids: &[u32]) -> Result<Var> {
        let (v, d) = self.dims(table);
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            let id = id as usize;
            if id >= v {
                return Err(shape_err("embedding", format!("id {id} outside table of {v} rows")));
            }
            out.extend_from_slice(&src[id * d..(id + 1) * d]);
        }
        let t = Tensor::matrix(ids.len(), d, out)?;
        let ng = self.ng(table);
        Ok(self.push(t, Op::Embedding { table, ids: ids.to_vec() }, ng))
    }

    /// Row-wise softmax. `-inf` entries get weight exactly zero.
    pub fn softmax(&mut self, a: Var) -> Var {
        let (m, n) = self.dims(a);
        let mut data = self.value(a).data().to_vec();
        for row in data.chunks_mut(n.max(1)).take(m) {
            softmax_in_place(row);
        }
        let t = Tensor::new(self.value(a).shape().to_vec(), data).expect("same length");
        let ng = self.ng(a);
        self.push(t, Op::Softmax(a), ng)
    }

    /// Per-row normalization to zero mean and unit variance, then affine.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (m, n) = self.dims(x);
        if self.value(gamma).len() != n || self.value(beta).len() != n {
            return Err(shape_err(
                "layer_norm",
                format!(
                    "rows of {n} with gamma {} / beta {}",
                    self.value(gamma).len(),
                    self.value(beta).len()
                ),
            ));
        }
        let src = self.value(x).data();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; m * n];
        let mut rstd = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let row = &src[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rs = 1.0 / libm::sqrt(var + LN_EPS);
            rstd[r] = rs;
            for c in 0..n {
                let h = (row[c] - mean) * rs;
                xhat[r * n + c] = h;
                out[r * n + c] = h * g[c] + b[c];
            }
        }
        let t = Tensor::new(self.value(x).shape().to_vec(), out)?;
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        Ok(self.push(t, Op::LayerNorm { x, gamma, beta, xhat, rstd }, ng))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let data = self.value(a).data().iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data).expect("same length");
        let ng = self.ng(a);
        self.push(t, Op::Relu(a), ng)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let data = self.value(a).data().iter().map(|&x| gelu(x).0).collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data).expect("same length");
        let ng = self.ng(a);
        self.push(t, Op::Gelu(a), ng)
    }

    /// Concatenates matrices with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(Error::Empty("concat parts"))?;
        let m = self.dims(first).0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims(p);
            if r != m {
                return Err(shape_err("concat", format!("row counts {m} and {r}")));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; m * total];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.value(p).data();
            for r in 0..m {
                out[r * total + offset..r * total + offset + w].copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            offset += w;
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(Tensor::matrix(m, total, out)?, Op::ConcatCols(parts.to_vec()), ng))
    }

    /// Columns `start..end` of `x`.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.dims(x);
        if start > end || end > n {
            return Err(shape_err("slice", format!("columns {start}..{end} of {n}")));
        }
        let w = end - start;
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(m * w);
        for r in 0..m {
            out.extend_from_slice(&src[r * n + start..r * n + end]);
        }
        let ng = self.ng(x);
        Ok(self.push(Tensor::matrix(m, w, out)?, Op::SliceCols { x, start }, ng))
    }

    /// Rows `start..end` of `x`.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.dims(x);
        if start > end || end > m {
            return Err(shape_err("slice", format!("rows {start}..{end} of {m}")));
        }
        let out = self.value(x).data()[start * n..end * n].to_vec();
        let ng = self.ng(x);
        Ok(self.push(Tensor::matrix(end - start, n, out)?, Op::SliceRows { x, start }, ng))
    }

    /// Mean token cross-entropy of `logits[T×V]` against `targets`,
    /// skipping positions whose target equals `ignore`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[u32], ignore: u32) -> Result<Var> {
        let (t, v) = self.dims(logits);
        if targets.len() != t {
            return Err(shape_err(
                "cross_entropy",
                format!("{t} logit rows vs {} targets", targets.len()),
            ));
        }
        let src = self.value(logits).data();
        let mut probs = src.to_vec();
        let mut total = 0.0;
        let mut count = 0;
        for (r, &target) in targets.iter().enumerate() {
            let row = &mut probs[r * v..(r + 1) * v];
            softmax_in_place(row);
            if target == ignore {
                continue;
            }
            if target as usize >= v {
                return Err(shape_err("cross_entropy", format!("target {target} outside {v} classes")));
            }
            let logit_row = &src[r * v..(r + 1) * v];
            total += if self.centered_ce {
                centered_nll(logit_row, target as usize)
            } else {
                log_sum_exp(logit_row) - logit_row[target as usize]
            };
            count += 1;
        }
        if count == 0 {
            return Err(Error::Empty("cross_entropy targets"));
        }
        let ng = self.ng(logits);
        Ok(self.push(
            Tensor::scalar(total / count as f64),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                ignore,
                probs,
                count,
            },
            ng,
        ))
    }

    /// Mean binary cross-entropy of logistic outputs against 0/1 labels.
    pub fn bce_with_logits(&mut self, logits: Var, labels: &[f64]) -> Result<Var> {
        let z = self.value(logits).data();
        if z.len() != labels.len() || z.is_empty() {
            return Err(shape_err(
                "bce_with_logits",
                format!("{} logits vs {} labels", z.len(), labels.len()),
            ));
        }
        let total: f64 = z
            .iter()
            .zip(labels)
            .map(|(&z, &y)| softplus(z) - y * z)
            .sum();
        let ng = self.ng(logits);
        Ok(self.push(
            Tensor::scalar(total / z.len() as f64),
            Op::BceWithLogits {
                logits,
                labels: labels.to_vec(),
            },
            ng,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.len().max(1) as f64;
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::Mean(a), ng)
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(shape_err(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.value(loss).shape()),
            ));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else { continue };
            self.propagate(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    /// Adds the gradients of every parameter leaf into `grads`.
    pub fn accumulate_param_grads(&self, grads: &mut Grads) {
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Op::Param(id), Some(g)) = (&node.op, self.grads.get(i).and_then(Option::as_ref)) {
                for (dst, src) in grads.get_mut(*id).data_mut().iter_mut().zip(g) {
                    *dst += src;
                }
            }
        }
    }

    fn propagate(&mut self, i: usize, g: &[f64]) {
        // Inputs always precede their consumers, so splitting the node list
        // at `i` gives shared access to the op and mutable access to the
        // gradients of its inputs.
        let (before, rest) = self.nodes.split_at(i);
        let node = &rest[0];
        let grads = &mut self.grads;
        let fault = self.fault;
        let val = |v: &Var| &before[v.0].value;
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (m, k) = (val(a).rows(), val(a).cols());
                let n = val(b).cols();
                if let Some(ga) = acc(grads, before, a) {
                    gemm_nt(g, before[b.0].value.data(), ga, m, n, k);
                }
                if let Some(gb) = acc(grads, before, b) {
                    gemm_tn(before[a.0].value.data(), g, gb, m, k, n);
                }
            }
            Op::MatMulT(a, b) => {
                let (m, k) = (val(a).rows(), val(a).cols());
                let n = val(b).rows();
                if let Some(ga) = acc(grads, before, a) {
                    gemm_nn(g, before[b.0].value.data(), ga, m, n, k);
                }
                if let Some(gb) = acc(grads, before, b) {
                    gemm_tn(g, before[a.0].value.data(), gb, m, n, k);
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(gv) = acc(grads, before, v) {
                        gv.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::AddBias(a, bias) => {
                if let Some(ga) = acc(grads, before, a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                let n = val(bias).len();
                if let Some(gb) = acc(grads, before, bias) {
                    for row in g.chunks(n.max(1)) {
                        gb.iter_mut().zip(row).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::Mul(a, b) => {
                if let Some(ga) = acc(grads, before, a) {
                    let bv = before[b.0].value.data();
                    for ((x, gy), y) in ga.iter_mut().zip(g).zip(bv) {
                        *x += gy * y;
                    }
                }
                if let Some(gb) = acc(grads, before, b) {
                    let av = before[a.0].value.data();
                    for ((x, gy), y) in gb.iter_mut().zip(g).zip(av) {
                        *x += gy * y;
                    }
                }
            }
            Op::Scale(a, s) => {
                if let Some(ga) = acc(grads, before, a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += s * y);
                }
            }
            Op::Embedding { table, ids } => {
                let d = val(table).cols();
                if let Some(gt) = acc(grads, before, table) {
                    for (r, &id) in ids.iter().enumerate() {
                        let dst = &mut gt[id as usize * d..(id as usize + 1) * d];
                        dst.iter_mut().zip(&g[r * d..(r + 1) * d]).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::Softmax(a) => {
                let n = node.value.cols();
                let y = node.value.data();
                if let Some(ga) = acc(grads, before, a) {
                    for ((gr, yr), dst) in g.chunks(n).zip(y.chunks(n)).zip(ga.chunks_mut(n)) {
                        let dot: f64 = if fault == Some(Fault::Softmax) {
                            0.0
                        } else {
                            gr.iter().zip(yr).map(|(p, q)| p * q).sum()
                        };
                        for c in 0..n {
                            dst[c] += yr[c] * (gr[c] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let n = val(x).cols();
                let gm = before[gamma.0].value.data().to_vec();
                if let Some(gx) = acc(grads, before, x) {
                    for (r, &rs) in rstd.iter().enumerate() {
                        let gr = &g[r * n..(r + 1) * n];
                        let hr = &xhat[r * n..(r + 1) * n];
                        let mut mean_d = 0.0;
                        let mut mean_dh = 0.0;
                        for c in 0..n {
                            let d = gr[c] * gm[c];
                            mean_d += d;
                            mean_dh += d * hr[c];
                        }
                        mean_d /= n as f64;
                        mean_dh /= n as f64;
                        if fault == Some(Fault::LayerNorm) {
                            mean_dh = 0.0;
                        }
                        for c in 0..n {
                            let d = gr[c] * gm[c];
                            gx[r * n + c] += rs * (d - mean_d - hr[c] * mean_dh);
                        }
                    }
                }
                if let Some(gg) = acc(grads, before, gamma) {
                    for (gr, hr) in g.chunks(n).zip(xhat.chunks(n)) {
                        for c in 0..n {
                            gg[c] += gr[c] * hr[c];
                        }
                    }
                }
                if let Some(gb) = acc(grads, before, beta) {
                    for gr in g.chunks(n) {
                        gb.iter_mut().zip(gr).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::Relu(a) => {
                if let Some(ga) = acc(grads, before, a) {
                    let av = before[a.0].value.data();
                    for ((x, gy), z) in ga.iter_mut().zip(g).zip(av) {
                        if *z > 0.0 {
                            *x += gy;
                        }
                    }
                }
            }
            Op::Gelu(a) => {
                if let Some(ga) = acc(grads, before, a) {
                    let av = before[a.0].value.data();
                    for ((x, gy), &z) in ga.iter_mut().zip(g).zip(av) {
                        *x += gy * gelu(z).1;
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let m = node.value.rows();
                let total = node.value.cols();
                let mut offset = 0;
                for p in parts {
                    let w = val(p).cols();
                    if let Some(gp) = acc(grads, before, p) {
                        for r in 0..m {
                            let src = &g[r * total + offset..r * total + offset + w];
                            gp[r * w..(r + 1) * w].iter_mut().zip(src).for_each(|(x, y)| *x += y);
                        }
                    }
                    offset += w;
                }
            }
            Op::SliceCols { x, start } => {
                let n = val(x).cols();
                let (m, w) = (node.value.rows(), node.value.cols());
                if let Some(gx) = acc(grads, before, x) {
                    for r in 0..m {
                        let dst = &mut gx[r * n + start..r * n + start + w];
                        dst.iter_mut().zip(&g[r * w..(r + 1) * w]).for_each(|(a, b)| *a += b);
                    }
                }
            }
            Op::SliceRows { x, start } => {
                let n = val(x).cols();
                if let Some(gx) = acc(grads, before, x) {
                    let dst = &mut gx[start * n..start * n + g.len()];
                    dst.iter_mut().zip(g).for_each(|(a, b)| *a += b);
                }
            }
            Op::CrossEntropy { logits, targets, ignore, probs, count } => {
                let v = val(logits).cols();
                let scale = g[0] / *count as f64;
                if let Some(gl) = acc(grads, before, logits) {
                    for (r, &t) in targets.iter().enumerate() {
                        if t == *ignore {
                            continue;
                        }
                        for c in 0..v {
                            let onehot = if c == t as usize { 1.0 } else { 0.0 };
                            gl[r * v + c] += scale * (probs[r * v + c] - onehot);
                        }
                    }
                }
            }
            Op::BceWithLogits { logits, labels } => {
                let scale = g[0] / labels.len() as f64;
                if let Some(gl) = acc(grads, before, logits) {
                    let z = before[logits.0].value.data();
                    for ((x, &zi), &y) in gl.iter_mut().zip(z).zip(labels) {
                        *x += scale * (sigmoid(zi) - y);
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = acc(grads, before, a) {
                    ga.iter_mut().for_each(|x| *x += g[0]);
                }
            }
            Op::Mean(a) => {
                let n = val(a).len().max(1) as f64;
                if let Some(ga) = acc(grads, before, a) {
                    ga.iter_mut().for_each(|x| *x += g[0] / n);
                }
            }
        }
    }
}


fn acc<'a>(grads: &'a mut [Option<Vec<f64>>], before: &[Node], v: &Var) -> Option<&'a mut Vec<f64>> {
    if !before[v.0].needs_grad {
        return None;
    }
    let len = before[v.0].value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        row.iter_mut().for_each(|x| *x = 0.0);
        return;
    }
    let mut total = 0.0;
    for x in row.iter_mut() {
        *x = libm::exp(*x - max);
        total += *x;
    }
    row.iter_mut().for_each(|x| *x /= total);
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + libm::log(row.iter().map(|&x| libm::exp(x - max)).sum::<f64>())
}

/// `-log softmax(row)[target] - ln(len)`, accurate when the row is close
/// to uniform.
fn centered_nll(row: &[f64], target: usize) -> f64 {
    let zt = row[target];
    let spread = row.iter().fold(0.0_f64, |m, &z| m.max(libm::fabs(z - zt)));
    if spread > 1.0 {
        return log_sum_exp(row) - zt - libm::log(row.len() as f64);
    }
    let excess: f64 = row.iter().map(|&z| libm::expm1(z - zt)).sum::<f64>() / row.len() as f64;
    libm::log1p(excess)
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + libm::exp(-z))
    } else {
        let e = libm::exp(z);
        e / (1.0 + e)
    }
}

fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + libm::log1p(libm::exp(-z))
    } else {
        libm::log1p(libm::exp(z))
    }
}

/// GELU value and derivative.
fn gelu(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    let inner = C * (x + 0.044715 * x * x * x);
    let t = libm::tanh(inner);
    let value = 0.5 * x * (1.0 + t);
    let d_inner = C * (1.0 + 3.0 * 0.044715 * x * x);
    let deriv = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner;
    (value, deriv)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: usize, cols: usize, data: &[f64]) -> Tensor {
        Tensor::matrix(rows, cols, data.to_vec()).unwrap()
    }

    #[test]
    fn softmax_rows_normalize() {
        let mut g = Graph::new();
        let x = g.input(t(2, 3, &[1.0, 2.0, 3.0, -5.0, 0.0, f64::NEG_INFINITY]));
        let y = g.softmax(x);
        for r in 0..2 {
            let s: f64 = g.value(y).row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        assert_eq!(g.value(y).get(1, 2), 0.0);
    }

    #[test]
    fn uniform_cross_entropy_is_log_v() {
        let mut g = Graph::new();
        let v = 7;
        let x = g.input(Tensor::zeros(&[2, v]));
        let l = g.cross_entropy(x, &[3, 0], u32::MAX).unwrap();
        assert!((g.value(l).item() - libm::log(v as f64)).abs() < 1e-12);
        // Ignored positions are skipped; all ignored is an error.
        assert!(g.cross_entropy(x, &[9, 9], 9).is_err());
    }

    #[test]
    fn layer_norm_standardizes_rows() {
        let mut g = Graph::new();
        let x = g.input(t(2, 4, &[1.0, 2.0, 4.0, 8.0, -3.0, 0.5, 0.25, 9.0]));
        let gamma = g.constant(Tensor::new(alloc::vec![4], alloc::vec![1.0; 4]).unwrap());
        let beta = g.constant(Tensor::zeros(&[4]));
        let y = g.layer_norm(x, gamma, beta).unwrap();
        for r in 0..2 {
            let row = g.value(y).row(r);
            let mean = row.iter().sum::<f64>() / 4.0;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-9);
            assert!((var - 1.0).abs() < 1e-6, "var {var}");
        }
    }

    #[test]
    fn square_sum_gradient() {
        let mut g = Graph::new();
        let x = g.input(Tensor::scalar(3.0));
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum(sq);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    fn unreachable_leaf_gets_no_gradient() {
        let mut g = Graph::new();
        let x = g.input(Tensor::scalar(2.0));
        let unused = g.input(Tensor::scalar(5.0));
        let loss = g.scale(x, 4.0);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[4.0]);
        assert!(g.grad(unused).is_none());
    }

    #[test]
    fn backward_needs_scalar() {
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(&[2, 2]));
        assert!(matches!(g.backward(x), Err(Error::Shape { op: "backward", .. })));
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut g = Graph::new();
        let a = g.input(Tensor::zeros(&[2, 3]));
        let b = g.input(Tensor::zeros(&[2, 3]));
        match g.matmul(a, b) {
            Err(Error::Shape { op, detail }) => {
                assert_eq!(op, "matmul");
                assert!(detail.contains("2x3"));
            }
            other => panic!("expected shape error, got {other:?}"),
        }
        assert!(g.add_bias(a, b).is_err());
        assert!(g.slice_cols(a, 2, 4).is_err());
    }

    #[test]
    fn relu_and_concat_forward() {
        let mut g = Graph::new();
        let a = g.input(t(1, 2, &[-1.0, 2.0]));
        let r = g.relu(a);
        let c = g.concat_cols(&[r, a]).unwrap();
        assert_eq!(g.value(c).data(), &[0.0, 2.0, -1.0, 2.0]);
        let s = g.slice_cols(c, 1, 3).unwrap();
        assert_eq!(g.value(s).data(), &[2.0, -1.0]);
    }
}
