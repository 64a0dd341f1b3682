//! Reverse-mode differentiation over a linear tape.
//!
//! Every operation appends one node holding its forward value and enough
//! saved state for the backward rule. Node indices are the topological order,
//! so a single reverse sweep visits each operation exactly once.

use crate::error::{Error, Result};
use crate::tensor::{gemm_nn, gemm_nt, gemm_tn, Tensor};

/// Handle to a node on a [`Tape`].
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
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    LayerNorm {
        x: Var,
        scale: Var,
        shift: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    MaskedSoftmax {
        x: Var,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    Sum(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<f64>,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Single-owner recording of a forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every leaf that requires them.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Constant input; no gradient is tracked.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Differentiable input.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Validation pass over every recorded value.
    pub fn validate(&self) -> Result<()> {
        for (i, n) in self.nodes.iter().enumerate() {
            n.value
                .validate()
                .map_err(|e| Error::NonFinite(format!("tape node {i} ({:?}): {e}", op_name(&n.op))))?;
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.cols() != tb.rows() {
            return Err(shape_err("matmul", ta, tb));
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        let mut out = vec![0.0; m * n];
        gemm_nn(ta.data(), tb.data(), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if ta.shape().len() != 2 {
            return Err(Error::Shape {
                op: "transpose",
                lhs: ta.shape().to_vec(),
                rhs: vec![],
            });
        }
        let (m, n) = (ta.rows(), ta.cols());
        let d = ta.data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = d[i * n + j];
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(vec![n, m], out)?, Op::Transpose(a), rg))
    }

    fn zip_same(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(name, ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    /// Adds the vector `b` to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let c = ta.cols();
        if tb.numel() != c {
            return Err(shape_err("add_row", ta, tb));
        }
        let bd = tb.data();
        let mut out = ta.data().to_vec();
        for row in out.chunks_mut(c.max(1)) {
            for (o, &bv) in row.iter_mut().zip(bd) {
                *o += bv;
            }
        }
        let t = Tensor::new(ta.shape().to_vec(), out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::AddRow(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let ta = self.value(a);
        let t = Tensor::new(ta.shape().to_vec(), ta.data().iter().map(|&x| x * s).collect())
            .expect("same shape");
        let rg = self.rg(a);
        self.push(t, Op::Scale(a, s), rg)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let ta = self.value(a);
        let t = Tensor::new(ta.shape().to_vec(), ta.data().iter().map(|&x| x + s).collect())
            .expect("same shape");
        let rg = self.rg(a);
        self.push(t, Op::AddScalar(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let t = Tensor::new(ta.shape().to_vec(), ta.data().iter().map(|&x| x.max(0.0)).collect())
            .expect("same shape");
        let rg = self.rg(a);
        self.push(t, Op::Relu(a), rg)
    }

    /// Row-wise layer normalization with population variance.
    pub fn layer_norm(&mut self, x: Var, scale: Var, shift: Var, eps: f64) -> Result<Var> {
        let (tx, ts, tb) = (self.value(x), self.value(scale), self.value(shift));
        let d = tx.cols();
        if d < 2 {
            return Err(Error::InvalidTensor(format!("layer_norm needs at least 2 features, got {d}")));
        }
        if ts.numel() != d {
            return Err(shape_err("layer_norm scale", tx, ts));
        }
        if tb.numel() != d {
            return Err(shape_err("layer_norm shift", tx, tb));
        }
        if eps <= 0.0 {
            return Err(Error::InvalidTensor(format!("layer_norm eps must be positive, got {eps}")));
        }
        let rows = tx.rows();
        let mut xhat = vec![0.0; rows * d];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; rows * d];
        let (sd, bd) = (ts.data(), tb.data());
        for r in 0..rows {
            let row = tx.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * sd[j] + bd[j];
            }
        }
        let t = Tensor::new(tx.shape().to_vec(), out)?;
        let rg = self.rg(x) || self.rg(scale) || self.rg(shift);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                scale,
                shift,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Softmax along the last dimension over the positions where `mask` is
    /// true. Masked positions are exactly zero; this is the same function as
    /// adding `-inf` to masked scores, without producing NaN.
    pub fn masked_softmax(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let tx = self.value(x);
        if mask.len() != tx.numel() {
            return Err(Error::Shape {
                op: "masked_softmax",
                lhs: tx.shape().to_vec(),
                rhs: vec![mask.len()],
            });
        }
        let out = masked_softmax_values(tx.data(), mask, tx.cols())?;
        let t = Tensor::new(tx.shape().to_vec(), out)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::MaskedSoftmax { x }, rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        let c = tx.cols();
        if start + len > c {
            return Err(Error::Shape {
                op: "slice_cols",
                lhs: tx.shape().to_vec(),
                rhs: vec![start, len],
            });
        }
        let rows = tx.rows();
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&tx.row(r)[start..start + len]);
        }
        let t = Tensor::new(vec![rows, len], out)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::SliceCols { x, start }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        let mut total = 0;
        for &p in parts {
            let t = self.value(p);
            if t.rows() != rows {
                return Err(shape_err("concat_cols", self.value(parts[0]), t));
            }
            total += t.cols();
        }
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        let t = Tensor::new(vec![rows, total], out)?;
        Ok(self.push(t, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        let c = tx.cols();
        if start + len > tx.rows() {
            return Err(Error::Shape {
                op: "slice_rows",
                lhs: tx.shape().to_vec(),
                rhs: vec![start, len],
            });
        }
        let out = tx.data()[start * c..(start + len) * c].to_vec();
        let t = Tensor::new(vec![len, c], out)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::SliceRows { x, start }, rg))
    }

    /// Row lookup into an embedding table.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        let (n, c) = (tt.rows(), tt.cols());
        let mut out = Vec::with_capacity(ids.len() * c);
        for &id in ids {
            if id >= n {
                return Err(Error::TokenOutOfRange { id, size: n });
            }
            out.extend_from_slice(tt.row(id));
        }
        let t = Tensor::new(vec![ids.len(), c], out)?;
        let rg = self.rg(table);
        Ok(self.push(
            t,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// `Σ_t weights[t] · −log softmax(logits[t])[targets[t]]`. Rows with zero
    /// weight contribute nothing and receive no gradient.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[f64]) -> Result<Var> {
        let tl = self.value(logits);
        let (rows, v) = (tl.rows(), tl.cols());
        if targets.len() != rows || weights.len() != rows {
            return Err(Error::Shape {
                op: "cross_entropy",
                lhs: tl.shape().to_vec(),
                rhs: vec![targets.len(), weights.len()],
            });
        }
        let mut probs = vec![0.0; rows * v];
        let mut loss = 0.0;
        for r in 0..rows {
            let y = targets[r];
            if y >= v {
                return Err(Error::TokenOutOfRange { id: y, size: v });
            }
            if weights[r] == 0.0 {
                continue;
            }
            let row = tl.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (p, &x) in probs[r * v..(r + 1) * v].iter_mut().zip(row) {
                *p = (x - max).exp();
                z += *p;
            }
            for p in &mut probs[r * v..(r + 1) * v] {
                *p /= z;
            }
            loss += weights[r] * (max + z.ln() - row[y]);
        }
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar. Gradients accumulate additively over
    /// every use of a node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if !lt.is_scalar() {
            return Err(Error::NotScalar(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        if self.rg(loss) {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads);
        }
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| g.map(|d| Tensor::new(self.nodes[i].value.shape().to_vec(), d).expect("grad shape")))
            .collect();
        Ok(Gradients { grads })
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.rg(v) {
            return None;
        }
        let n = self.nodes[v.0].value.numel();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn backward_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                if let Some(ga) = self.acc(grads, *a) {
                    gemm_nt(g, tb.data(), ga, m, n, k);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    gemm_tn(ta.data(), g, gb, m, k, n);
                }
            }
            Op::Transpose(a) => {
                let ta = self.value(*a);
                let (m, n) = (ta.rows(), ta.cols());
                if let Some(ga) = self.acc(grads, *a) {
                    for i in 0..m {
                        for j in 0..n {
                            ga[i * n + j] += g[j * m + i];
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
                    for (o, &x) in gb.iter_mut().zip(g) {
                        *o -= x;
                    }
                }
            }
            Op::Mul(a, b) => {
                let bd = self.value(*b).data();
                if let Some(ga) = self.acc(grads, *a) {
                    for ((o, &x), &y) in ga.iter_mut().zip(g).zip(bd) {
                        *o += x * y;
                    }
                }
                let ad = self.value(*a).data();
                if let Some(gb) = self.acc(grads, *b) {
                    for ((o, &x), &y) in gb.iter_mut().zip(g).zip(ad) {
                        *o += x * y;
                    }
                }
            }
            Op::AddRow(a, b) => {
                if let Some(ga) = self.acc(grads, *a) {
                    add_into(ga, g);
                }
                let c = self.value(*b).numel();
                if let Some(gb) = self.acc(grads, *b) {
                    for row in g.chunks(c) {
                        add_into(gb, row);
                    }
                }
            }
            Op::Scale(a, s) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for (o, &x) in ga.iter_mut().zip(g) {
                        *o += x * s;
                    }
                }
            }
            Op::AddScalar(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    add_into(ga, g);
                }
            }
            Op::Relu(a) => {
                let ad = self.value(*a).data();
                if let Some(ga) = self.acc(grads, *a) {
                    for ((o, &x), &v) in ga.iter_mut().zip(g).zip(ad) {
                        if v > 0.0 {
                            *o += x;
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                scale,
                shift,
                xhat,
                rstd,
            } => {
                let d = self.value(*scale).numel();
                let rows = rstd.len();
                if let Some(gs) = self.acc(grads, *scale) {
                    for r in 0..rows {
                        for j in 0..d {
                            gs[j] += g[r * d + j] * xhat[r * d + j];
                        }
                    }
                }
                if let Some(gb) = self.acc(grads, *shift) {
                    for row in g.chunks(d) {
                        add_into(gb, row);
                    }
                }
                let sd = self.value(*scale).data();
                if let Some(gx) = self.acc(grads, *x) {
                    let mut dxhat = vec![0.0; d];
                    for r in 0..rows {
                        let (mut mean_d, mut mean_dx) = (0.0, 0.0);
                        for j in 0..d {
                            dxhat[j] = g[r * d + j] * sd[j];
                            mean_d += dxhat[j];
                            mean_dx += dxhat[j] * xhat[r * d + j];
                        }
                        mean_d /= d as f64;
                        mean_dx /= d as f64;
                        for j in 0..d {
                            gx[r * d + j] += rstd[r] * (dxhat[j] - mean_d - xhat[r * d + j] * mean_dx);
                        }
                    }
                }
            }
            Op::MaskedSoftmax { x } => {
                let y = node.value.data();
                let c = node.value.cols();
                if let Some(gx) = self.acc(grads, *x) {
                    for ((gr, yr), go) in g.chunks(c).zip(y.chunks(c)).zip(gx.chunks_mut(c)) {
                        let s: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for ((o, &gi), &yi) in go.iter_mut().zip(gr).zip(yr) {
                            *o += yi * (gi - s);
                        }
                    }
                }
            }
            Op::SliceCols { x, start } => {
                let c = self.value(*x).cols();
                let len = node.value.cols();
                if let Some(gx) = self.acc(grads, *x) {
                    for (r, row) in g.chunks(len.max(1)).enumerate() {
                        add_into(&mut gx[r * c + start..r * c + start + len], row);
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).cols();
                    if let Some(gp) = self.acc(grads, p) {
                        for (r, row) in gp.chunks_mut(len.max(1)).enumerate() {
                            add_into(row, &g[r * total + off..r * total + off + len]);
                        }
                    }
                    off += len;
                }
            }
            Op::SliceRows { x, start } => {
                let c = node.value.cols();
                if let Some(gx) = self.acc(grads, *x) {
                    add_into(&mut gx[start * c..start * c + g.len()], g);
                }
            }
            Op::Gather { table, ids } => {
                let c = node.value.cols();
                if let Some(gt) = self.acc(grads, *table) {
                    for (row, &id) in g.chunks(c.max(1)).zip(ids) {
                        add_into(&mut gt[id * c..(id + 1) * c], row);
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
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                probs,
            } => {
                let v = self.value(*logits).cols();
                if let Some(gl) = self.acc(grads, *logits) {
                    for (r, (&y, &w)) in targets.iter().zip(weights).enumerate() {
                        if w == 0.0 {
                            continue;
                        }
                        let s = g[0] * w;
                        for j in 0..v {
                            gl[r * v + j] += s * probs[r * v + j];
                        }
                        gl[r * v + y] -= s;
                    }
                }
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (o, &x) in dst.iter_mut().zip(src) {
        *o += x;
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::MatMul(..) => "matmul",
        Op::Transpose(_) => "transpose",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::AddRow(..) => "add_row",
        Op::Scale(..) => "scale",
        Op::AddScalar(_) => "add_scalar",
        Op::Relu(_) => "relu",
        Op::LayerNorm { .. } => "layer_norm",
        Op::MaskedSoftmax { .. } => "masked_softmax",
        Op::SliceCols { .. } => "slice_cols",
        Op::ConcatCols(_) => "concat_cols",
        Op::SliceRows { .. } => "slice_rows",
        Op::Gather { .. } => "gather_rows",
        Op::Sum(_) => "sum",
        Op::CrossEntropy { .. } => "cross_entropy",
    }
}

/// Plain (untracked) masked softmax over rows of width `cols`.
pub fn masked_softmax_values(x: &[f64], mask: &[bool], cols: usize) -> Result<Vec<f64>> {
    let mut out = vec![0.0; x.len()];
    for (r, ((xr, mr), or)) in x
        .chunks(cols)
        .zip(mask.chunks(cols))
        .zip(out.chunks_mut(cols))
        .enumerate()
    {
        let max = xr
            .iter()
            .zip(mr)
            .filter(|(_, &m)| m)
            .map(|(&v, _)| v)
            .fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return Err(Error::FullyMasked { row: r });
        }
        let mut z = 0.0;
        for ((o, &v), &m) in or.iter_mut().zip(xr).zip(mr) {
            if m {
                *o = (v - max).exp();
                z += *o;
            }
        }
        for o in or.iter_mut() {
            *o /= z;
        }
    }
    Ok(out)
}

/// Checks the tape gradient of a scalar function of several inputs against
/// central finite differences. Returns the largest
/// `|analytic − numeric| / max(1, |analytic|)` over all coordinates.
pub fn grad_check_many<F>(f: F, inputs: &[Tensor], step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&step) {
        return Err(Error::Config(format!("finite-difference step {step} outside [1e-7, 1e-3]")));
    }
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.param(x.clone())).collect();
        let out = f(&mut tape, &vars)?;
        tape.validate()?;
        let v = tape.value(out);
        if !v.is_scalar() {
            return Err(Error::NotScalar(v.shape().to_vec()));
        }
        Ok(v.item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.param(x.clone())).collect();
    let out = f(&mut tape, &vars)?;
    tape.validate()?;
    let grads = tape.backward(out)?;

    let mut worst = 0.0f64;
    let mut xs = inputs.to_vec();
    for (k, var) in vars.iter().enumerate() {
        let analytic = grads
            .get(*var)
            .map(|t| t.data().to_vec())
            .unwrap_or_else(|| vec![0.0; inputs[k].numel()]);
        for i in 0..inputs[k].numel() {
            let orig = xs[k].data()[i];
            xs[k].data_mut()[i] = orig + step;
            let plus = eval(&xs)?;
            xs[k].data_mut()[i] = orig - step;
            let minus = eval(&xs)?;
            xs[k].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic[i];
            let err = (a - numeric).abs() / a.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

/// Single-input form of [`grad_check_many`].
pub fn grad_check<F>(f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    grad_check_many(|t, v| f(t, v[0]), std::slice::from_ref(x), step)
}
