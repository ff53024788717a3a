use std::sync::Arc;

use super::{
    gelu_scalar, matmul_acc, matmul_nt_acc, matmul_tn_acc, normal_cdf, normal_pdf, sigmoid,
    softplus, GatherMap, Result, RowMix, Tensor, TensorError,
};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    Transpose(Var),
    Reshape(Var),
    Exp(Var),
    Gelu(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, eps: f64 },
    SqDist(Var, Var),
    MixRows(Arc<RowMix>, Var),
    Gather(Arc<GatherMap>, Var),
    ConcatCols(Vec<Var>),
    Sum(Var),
    WeightedSum(Var, Arc<Tensor>),
    BalancedBce { logits: Var, targets: Arc<Tensor>, beta: f64 },
}

struct Node {
    value: Arc<Tensor>,
    requires_grad: bool,
    op: Op,
}

/// Operation recorder for reverse-mode differentiation.
///
/// Values are computed eagerly when an operation is recorded. [`Tape::backward`]
/// then walks the recorded nodes in exact reverse order and accumulates
/// gradients into every node that requires one. Nodes whose inputs are all
/// constants never receive a gradient.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<Tensor> {
        let g = self.grads.get(var.0)?.as_ref()?;
        Some(Tensor {
            shape: self.shapes[var.0].clone(),
            data: g.clone(),
        })
    }

    pub fn get_data(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0)?.as_deref()
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::Shape {
        op,
        lhs: a.shape.clone(),
        rhs: b.shape.clone(),
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

    /// Drops every recorded node. Outstanding [`Var`]s become invalid.
    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.leaf_shared(Arc::new(value), requires_grad)
    }

    pub fn leaf_shared(&mut self, value: Arc<Tensor>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shared_value(&self, var: Var) -> Arc<Tensor> {
        Arc::clone(&self.nodes[var.0].value)
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn inputs(op: &Op) -> Vec<Var> {
        match op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::AddBias(a, b) | Op::SqDist(a, b) => {
                vec![*a, *b]
            }
            Op::Scale(x, _)
            | Op::Transpose(x)
            | Op::Reshape(x)
            | Op::Exp(x)
            | Op::Gelu(x)
            | Op::SoftmaxRows(x)
            | Op::LogSoftmaxRows(x)
            | Op::MixRows(_, x)
            | Op::Gather(_, x)
            | Op::Sum(x)
            | Op::WeightedSum(x, _) => vec![*x],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::ConcatCols(xs) => xs.clone(),
            Op::BalancedBce { logits, .. } => vec![*logits],
        }
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let inputs = Self::inputs(&op);
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        if cfg!(debug_assertions)
            && inputs.iter().all(|v| self.nodes[v.0].value.is_finite())
            && !value.is_finite()
        {
            panic!("non-finite output from finite inputs in tape op #{}", self.nodes.len());
        }
        self.nodes.push(Node {
            value: Arc::new(value),
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn matrix(&self, var: Var, op: &'static str) -> Result<(usize, usize)> {
        self.value(var).require_matrix(op)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (p, q) = self.matrix(a, "matmul")?;
        let (q2, r) = self.matrix(b, "matmul")?;
        if q != q2 {
            return Err(shape_err("matmul", self.value(a), self.value(b)));
        }
        let mut out = vec![0.0; p * r];
        matmul_acc(&self.value(a).data, &self.value(b).data, &mut out, p, q, r);
        Ok(self.push(Tensor { shape: vec![p, r], data: out }, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape != vb.shape {
            return Err(shape_err("add", va, vb));
        }
        let data = va.data.iter().zip(&vb.data).map(|(x, y)| x + y).collect();
        let shape = va.shape.clone();
        Ok(self.push(Tensor { shape, data }, Op::Add(a, b)))
    }

    /// `x[p×q] + b[q]` broadcast over rows.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (p, q) = self.matrix(x, "add_bias")?;
        let (vx, vb) = (self.value(x), self.value(bias));
        if vb.len() != q {
            return Err(shape_err("add_bias", vx, vb));
        }
        let mut data = vx.data.clone();
        for i in 0..p {
            for (o, b) in data[i * q..(i + 1) * q].iter_mut().zip(&vb.data) {
                *o += b;
            }
        }
        Ok(self.push(Tensor { shape: vec![p, q], data }, Op::AddBias(x, bias)))
    }

    /// `x·w + b` with `w[q×r]` and `b[r]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        self.add_bias(xw, b)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let v = self.value(x).map(|e| e * factor);
        self.push(v, Op::Scale(x, factor))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (p, q) = self.matrix(x, "transpose")?;
        let v = self.value(x);
        let mut data = vec![0.0; p * q];
        for i in 0..p {
            for j in 0..q {
                data[j * p + i] = v.data[i * q + j];
            }
        }
        Ok(self.push(Tensor { shape: vec![q, p], data }, Op::Transpose(x)))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).reshaped(shape)?;
        Ok(self.push(v, Op::Reshape(x)))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let v = self.value(x).map(f64::exp);
        self.push(v, Op::Exp(x))
    }

    /// Elementwise `x·Φ(x)` with the exact erf-based normal CDF.
    pub fn gelu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(gelu_scalar);
        self.push(v, Op::Gelu(x))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (p, q) = self.matrix(x, "softmax_rows")?;
        let mut data = self.value(x).data.clone();
        for row in data.chunks_mut(q).take(p) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for e in row.iter_mut() {
                *e = (*e - max).exp();
                s += *e;
            }
            for e in row.iter_mut() {
                *e /= s;
            }
        }
        Ok(self.push(Tensor { shape: vec![p, q], data }, Op::SoftmaxRows(x)))
    }

    /// Row-wise log-softmax.
    pub fn log_softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (p, q) = self.matrix(x, "log_softmax_rows")?;
        let mut data = self.value(x).data.clone();
        for row in data.chunks_mut(q).take(p) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|e| (e - max).exp()).sum::<f64>().ln();
            for e in row.iter_mut() {
                *e -= lse;
            }
        }
        Ok(self.push(Tensor { shape: vec![p, q], data }, Op::LogSoftmaxRows(x)))
    }

    /// Per-row layer normalization with affine `gamma`, `beta` of length `q`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (p, q) = self.matrix(x, "layer_norm")?;
        let (vx, vg, vb) = (self.value(x), self.value(gamma), self.value(beta));
        if vg.len() != q || vb.len() != q {
            return Err(shape_err("layer_norm", vx, vg));
        }
        let mut data = vec![0.0; p * q];
        for i in 0..p {
            let row = &vx.data[i * q..(i + 1) * q];
            let (mean, rstd) = row_stats(row, eps);
            for j in 0..q {
                data[i * q + j] = (row[j] - mean) * rstd * vg.data[j] + vb.data[j];
            }
        }
        Ok(self.push(
            Tensor { shape: vec![p, q], data },
            Op::LayerNorm { x, gamma, beta, eps },
        ))
    }

    /// Pairwise squared Euclidean distances `‖a_p − b_i‖²` → `[n×m]`.
    pub fn sq_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.matrix(a, "sq_dist")?;
        let (m, k2) = self.matrix(b, "sq_dist")?;
        if k != k2 {
            return Err(shape_err("sq_dist", self.value(a), self.value(b)));
        }
        let (va, vb) = (self.value(a), self.value(b));
        let mut data = vec![0.0; n * m];
        for p in 0..n {
            let ap = &va.data[p * k..(p + 1) * k];
            for i in 0..m {
                let bi = &vb.data[i * k..(i + 1) * k];
                data[p * m + i] = ap.iter().zip(bi).map(|(x, y)| (x - y) * (x - y)).sum();
            }
        }
        Ok(self.push(Tensor { shape: vec![n, m], data }, Op::SqDist(a, b)))
    }

    /// Applies a constant sparse row map.
    pub fn mix_rows(&mut self, map: &Arc<RowMix>, x: Var) -> Result<Var> {
        let (p, q) = self.matrix(x, "mix_rows")?;
        if p != map.in_rows() {
            return Err(TensorError::Shape {
                op: "mix_rows",
                lhs: vec![map.out_rows(), map.in_rows()],
                rhs: vec![p, q],
            });
        }
        let vx = self.value(x);
        let mut data = vec![0.0; map.out_rows() * q];
        for (r, row) in map.entries().iter().enumerate() {
            let out = &mut data[r * q..(r + 1) * q];
            for &(j, w) in row {
                for (o, v) in out.iter_mut().zip(&vx.data[j * q..(j + 1) * q]) {
                    *o += w * v;
                }
            }
        }
        let shape = vec![map.out_rows(), q];
        Ok(self.push(Tensor { shape, data }, Op::MixRows(Arc::clone(map), x)))
    }

    pub fn gather(&mut self, map: &Arc<GatherMap>, x: Var) -> Result<Var> {
        let vx = self.value(x);
        if vx.len() != map.in_len() {
            return Err(TensorError::Shape {
                op: "gather",
                lhs: vec![map.in_len()],
                rhs: vx.shape.clone(),
            });
        }
        let data = map
            .index()
            .iter()
            .map(|i| i.map_or(0.0, |i| vx.data[i]))
            .collect();
        let shape = map.out_shape().to_vec();
        Ok(self.push(Tensor { shape, data }, Op::Gather(Arc::clone(map), x)))
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| TensorError::Invalid("concat_cols of nothing".into()))?;
        let (p, _) = self.matrix(first, "concat_cols")?;
        let mut widths = Vec::with_capacity(xs.len());
        for &x in xs {
            let (pi, qi) = self.matrix(x, "concat_cols")?;
            if pi != p {
                return Err(shape_err("concat_cols", self.value(first), self.value(x)));
            }
            widths.push(qi);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(p * total);
        for i in 0..p {
            for (&x, &q) in xs.iter().zip(&widths) {
                data.extend_from_slice(&self.value(x).data[i * q..(i + 1) * q]);
            }
        }
        Ok(self.push(
            Tensor { shape: vec![p, total], data },
            Op::ConcatCols(xs.to_vec()),
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data.iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    /// `Σ w ⊙ x` against a constant weight tensor of the same length.
    pub fn weighted_sum(&mut self, x: Var, weights: Arc<Tensor>) -> Result<Var> {
        let vx = self.value(x);
        if vx.len() != weights.len() {
            return Err(shape_err("weighted_sum", vx, &weights));
        }
        let s = vx.data.iter().zip(&weights.data).map(|(a, b)| a * b).sum();
        Ok(self.push(Tensor::scalar(s), Op::WeightedSum(x, weights)))
    }

    /// Class-balanced binary cross-entropy from logits, averaged over elements:
    /// `−mean[β·y·log σ(z) + (1−β)·(1−y)·log(1−σ(z))]`.
    pub fn balanced_bce(&mut self, logits: Var, targets: Arc<Tensor>, beta: f64) -> Result<Var> {
        let vz = self.value(logits);
        if vz.len() != targets.len() {
            return Err(shape_err("balanced_bce", vz, &targets));
        }
        let n = vz.len() as f64;
        let mut total = 0.0;
        for (&z, &y) in vz.data.iter().zip(&targets.data) {
            // log σ(z) = −softplus(−z), log(1−σ(z)) = −softplus(z)
            total += beta * y * softplus(-z) + (1.0 - beta) * (1.0 - y) * softplus(z);
        }
        Ok(self.push(
            Tensor::scalar(total / n),
            Op::BalancedBce { logits, targets, beta },
        ))
    }

    /// Reverse pass from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.value(root).len() != 1 {
            return Err(TensorError::Invalid(format!(
                "backward root must be scalar, got shape {:?}",
                self.value(root).shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![1.0]);
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape.clone()).collect(),
        })
    }

    fn acc<'a>(&self, grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let len = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (p, q, r) = (va.shape[0], va.shape[1], vb.shape[1]);
                if let Some(ga) = self.acc(grads, *a) {
                    matmul_nt_acc(g, &vb.data, ga, p, q, r);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    matmul_tn_acc(&va.data, g, gb, p, q, r);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(gv) = self.acc(grads, v) {
                        for (o, gi) in gv.iter_mut().zip(g) {
                            *o += gi;
                        }
                    }
                }
            }
            Op::AddBias(x, b) => {
                if let Some(gx) = self.acc(grads, *x) {
                    for (o, gi) in gx.iter_mut().zip(g) {
                        *o += gi;
                    }
                }
                let q = self.value(*b).len();
                if let Some(gb) = self.acc(grads, *b) {
                    for row in g.chunks(q) {
                        for (o, gi) in gb.iter_mut().zip(row) {
                            *o += gi;
                        }
                    }
                }
            }
            Op::Scale(x, f) => {
                if let Some(gx) = self.acc(grads, *x) {
                    for (o, gi) in gx.iter_mut().zip(g) {
                        *o += f * gi;
                    }
                }
            }
            Op::Transpose(x) => {
                let (p, q) = (self.value(*x).shape[0], self.value(*x).shape[1]);
                if let Some(gx) = self.acc(grads, *x) {
                    for i in 0..p {
                        for j in 0..q {
                            gx[i * q + j] += g[j * p + i];
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(gx) = self.acc(grads, *x) {
                    for (o, gi) in gx.iter_mut().zip(g) {
                        *o += gi;
                    }
                }
            }
            Op::Exp(x) => {
                if let Some(gx) = self.acc(grads, *x) {
                    for ((o, gi), y) in gx.iter_mut().zip(g).zip(&out.data) {
                        *o += gi * y;
                    }
                }
            }
            Op::Gelu(x) => {
                let vx = self.value(*x);
                if let Some(gx) = self.acc(grads, *x) {
                    for ((o, gi), &xv) in gx.iter_mut().zip(g).zip(&vx.data) {
                        *o += gi * (normal_cdf(xv) + xv * normal_pdf(xv));
                    }
                }
            }
            Op::SoftmaxRows(x) => {
                let q = out.shape[1];
                if let Some(gx) = self.acc(grads, *x) {
                    for ((gxr, gr), yr) in gx.chunks_mut(q).zip(g.chunks(q)).zip(out.data.chunks(q)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for ((o, gi), y) in gxr.iter_mut().zip(gr).zip(yr) {
                            *o += y * (gi - dot);
                        }
                    }
                }
            }
            Op::LogSoftmaxRows(x) => {
                let q = out.shape[1];
                if let Some(gx) = self.acc(grads, *x) {
                    for ((gxr, gr), yr) in gx.chunks_mut(q).zip(g.chunks(q)).zip(out.data.chunks(q)) {
                        let total: f64 = gr.iter().sum();
                        for ((o, gi), y) in gxr.iter_mut().zip(gr).zip(yr) {
                            *o += gi - y.exp() * total;
                        }
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let vx = self.value(*x);
                let vg = self.value(*gamma);
                let q = vx.shape[1];
                let p = vx.shape[0];
                let mut xhat = vec![0.0; p * q];
                let mut rstds = vec![0.0; p];
                for i in 0..p {
                    let row = &vx.data[i * q..(i + 1) * q];
                    let (mean, rstd) = row_stats(row, *eps);
                    rstds[i] = rstd;
                    for j in 0..q {
                        xhat[i * q + j] = (row[j] - mean) * rstd;
                    }
                }
                if let Some(gg) = self.acc(grads, *gamma) {
                    for i in 0..p {
                        for j in 0..q {
                            gg[j] += g[i * q + j] * xhat[i * q + j];
                        }
                    }
                }
                if let Some(gb) = self.acc(grads, *beta) {
                    for row in g.chunks(q) {
                        for (o, gi) in gb.iter_mut().zip(row) {
                            *o += gi;
                        }
                    }
                }
                if let Some(gx) = self.acc(grads, *x) {
                    let qf = q as f64;
                    for i in 0..p {
                        let gxh: Vec<f64> =
                            (0..q).map(|j| g[i * q + j] * vg.data[j]).collect();
                        let xh = &xhat[i * q..(i + 1) * q];
                        let mean_g: f64 = gxh.iter().sum::<f64>() / qf;
                        let mean_gx: f64 =
                            gxh.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / qf;
                        for j in 0..q {
                            gx[i * q + j] += rstds[i] * (gxh[j] - mean_g - xh[j] * mean_gx);
                        }
                    }
                }
            }
            Op::SqDist(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (n, k, m) = (va.shape[0], va.shape[1], vb.shape[0]);
                if let Some(ga) = self.acc(grads, *a) {
                    for p in 0..n {
                        for i in 0..m {
                            let gpi = g[p * m + i];
                            for d in 0..k {
                                ga[p * k + d] += 2.0 * gpi * (va.data[p * k + d] - vb.data[i * k + d]);
                            }
                        }
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for p in 0..n {
                        for i in 0..m {
                            let gpi = g[p * m + i];
                            for d in 0..k {
                                gb[i * k + d] -= 2.0 * gpi * (va.data[p * k + d] - vb.data[i * k + d]);
                            }
                        }
                    }
                }
            }
            Op::MixRows(map, x) => {
                let q = out.shape[1];
                if let Some(gx) = self.acc(grads, *x) {
                    for (r, row) in map.entries().iter().enumerate() {
                        let gr = &g[r * q..(r + 1) * q];
                        for &(j, w) in row {
                            for (o, gi) in gx[j * q..(j + 1) * q].iter_mut().zip(gr) {
                                *o += w * gi;
                            }
                        }
                    }
                }
            }
            Op::Gather(map, x) => {
                if let Some(gx) = self.acc(grads, *x) {
                    for (gi, idx) in g.iter().zip(map.index()) {
                        if let Some(i) = idx {
                            gx[*i] += gi;
                        }
                    }
                }
            }
            Op::ConcatCols(xs) => {
                let total = out.shape[1];
                let p = out.shape[0];
                let mut offset = 0;
                for &x in xs {
                    let q = self.value(x).shape[1];
                    if let Some(gx) = self.acc(grads, x) {
                        for i in 0..p {
                            for j in 0..q {
                                gx[i * q + j] += g[i * total + offset + j];
                            }
                        }
                    }
                    offset += q;
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = self.acc(grads, *x) {
                    for o in gx.iter_mut() {
                        *o += g[0];
                    }
                }
            }
            Op::WeightedSum(x, w) => {
                if let Some(gx) = self.acc(grads, *x) {
                    for (o, wi) in gx.iter_mut().zip(&w.data) {
                        *o += g[0] * wi;
                    }
                }
            }
            Op::BalancedBce { logits, targets, beta } => {
                let vz = self.value(*logits);
                let n = vz.len() as f64;
                if let Some(gz) = self.acc(grads, *logits) {
                    for ((o, &z), &y) in gz.iter_mut().zip(&vz.data).zip(&targets.data) {
                        let s = sigmoid(z);
                        let d = -beta * y * (1.0 - s) + (1.0 - beta) * (1.0 - y) * s;
                        *o += g[0] * d / n;
                    }
                }
            }
        }
    }
}

fn row_stats(row: &[f64], eps: f64) -> (f64, f64) {
    let q = row.len() as f64;
    let mean = row.iter().sum::<f64>() / q;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / q;
    (mean, 1.0 / (var + eps).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let mut tape = Tape::new();
        let i = tape.constant(Tensor::identity(2));
        let a = tape.constant(m(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let ia = tape.matmul(i, a).unwrap();
        assert_eq!(tape.value(ia), tape.value(a));
        let ones = tape.constant(m(&[&[1.0], &[1.0]]));
        let r = tape.matmul(a, ones).unwrap();
        assert_eq!(tape.value(r).data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err();
        assert_eq!(
            err,
            TensorError::Shape {
                op: "matmul",
                lhs: vec![2, 3],
                rhs: vec![2, 3]
            }
        );
        assert!(err.to_string().contains("[2, 3] vs [2, 3]"));
    }

    #[test]
    fn softmax_uniform_and_stable() {
        let mut tape = Tape::new();
        let x = tape.constant(m(&[&[0.0, 0.0, 0.0], &[1000.0, 0.0, -1000.0]]));
        let y = tape.softmax_rows(x).unwrap();
        let v = tape.value(y);
        for j in 0..3 {
            assert!((v.get(0, j) - 1.0 / 3.0).abs() < 1e-15);
        }
        assert_eq!(v.get(1, 0), 1.0);
        assert_eq!(v.get(1, 1), 0.0);
        assert!(v.is_finite());
    }

    #[test]
    fn linear_identity_and_zero_input() {
        let mut tape = Tape::new();
        let x = tape.constant(m(&[&[1.0, -2.0], &[0.5, 3.0]]));
        let w = tape.constant(Tensor::identity(2));
        let b0 = tape.constant(Tensor::zeros(&[2]));
        let y = tape.linear(x, w, b0).unwrap();
        assert_eq!(tape.value(y), tape.value(x));

        let z = tape.constant(Tensor::zeros(&[3, 2]));
        let w = tape.constant(m(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]]));
        let b = tape.constant(Tensor::new(vec![3], vec![0.1, 0.2, 0.3]).unwrap());
        let y = tape.linear(z, w, b).unwrap();
        for r in 0..3 {
            assert_eq!(tape.value(y).row(r), &[0.1, 0.2, 0.3]);
        }
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let a = tape.constant(m(&[&[1.0, 2.0]]));
        let b = tape.param(m(&[&[3.0], &[4.0]]));
        let y = tape.matmul(a, b).unwrap();
        let s = tape.sum(y);
        let grads = tape.backward(s).unwrap();
        assert!(grads.get(a).is_none());
        assert_eq!(grads.get(b).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut tape = Tape::new();
        let a = tape.param(Tensor::zeros(&[2, 2]));
        assert!(tape.backward(a).is_err());
    }

    #[test]
    fn clear_drops_nodes() {
        let mut tape = Tape::new();
        let a = tape.param(Tensor::zeros(&[2, 2]));
        tape.sum(a);
        assert_eq!(tape.len(), 2);
        tape.clear();
        assert!(tape.is_empty());
    }

    #[test]
    fn gradients_accumulate_over_reuse() {
        // y = x + x, d(sum y)/dx = 2
        let mut tape = Tape::new();
        let x = tape.param(Tensor::zeros(&[3]));
        let y = tape.add(x, x).unwrap();
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, 2.0, 2.0]);
    }
}
