//! Reverse-mode tape over [`Tensor`] values.

use std::borrow::Cow;

use super::tensor::{gemm, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

const LN_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op {
    Input,
    Param(usize),
    MatMul(Var, Var),
    /// `x W + b` with `b` a row vector broadcast over rows.
    Linear(Var, Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    ScaleCols(Var, Vec<f64>),
    Silu(Var),
    Tanh(Var),
    LayerNorm(Var),
    ConcatCols(Vec<Var>),
    RepeatRows(Var, usize),
    TileRows(Var, usize),
    GroupMax(Var, Vec<usize>),
    GroupShift(Var, usize, isize),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        tq: usize,
        tk: usize,
        probs: Vec<f64>,
    },
    Reshape(Var),
    Mse(Var, Tensor),
}

struct Node<'p> {
    value: Cow<'p, Tensor>,
    op: Op,
    needs_grad: bool,
}

/// A single forward pass. Parameters are borrowed, not copied.
pub struct Graph<'p> {
    nodes: Vec<Node<'p>>,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p> Graph<'p> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    fn push(&mut self, value: Cow<'p, Tensor>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn derived(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.push(Cow::Owned(value), op, needs)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(Cow::Owned(t), Op::Input, false)
    }

    /// Trainable leaf; `index` identifies it in [`Graph::param_grads`].
    pub fn param(&mut self, index: usize, t: &'p Tensor) -> Var {
        self.push(Cow::Borrowed(t), Op::Param(index), true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = Tensor::zeros(av.rows(), bv.cols());
        gemm(1.0, av, false, bv, false, 0.0, &mut out);
        self.derived(out, Op::MatMul(a, b), &[a, b])
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        assert_eq!(bv.shape(), (1, wv.cols()), "bias shape mismatch");
        let mut out = Tensor::zeros(xv.rows(), wv.cols());
        for r in 0..out.rows() {
            out.row_mut(r).copy_from_slice(bv.data());
        }
        gemm(1.0, xv, false, wv, false, 1.0, &mut out);
        self.derived(out, Op::Linear(x, w, b), &[x, w, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        self.derived(out, Op::Add(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let bv = self.value(b);
        let mut out = self.value(a).clone();
        assert_eq!(out.shape(), bv.shape(), "mul shape mismatch");
        for (o, y) in out.data_mut().iter_mut().zip(bv.data()) {
            *o *= y;
        }
        self.derived(out, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let mut out = self.value(a).clone();
        out.scale(s);
        self.derived(out, Op::Scale(a, s), &[a])
    }

    /// Multiply column `c` by the constant `scales[c]`.
    pub fn scale_cols(&mut self, a: Var, scales: Vec<f64>) -> Var {
        let mut out = self.value(a).clone();
        assert_eq!(out.cols(), scales.len(), "scale_cols length mismatch");
        for r in 0..out.rows() {
            for (o, s) in out.row_mut(r).iter_mut().zip(&scales) {
                *o *= s;
            }
        }
        self.derived(out, Op::ScaleCols(a, scales), &[a])
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for v in out.data_mut() {
            *v *= sigmoid(*v);
        }
        self.derived(out, Op::Silu(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for v in out.data_mut() {
            *v = v.tanh();
        }
        self.derived(out, Op::Tanh(a), &[a])
    }

    /// Per-row normalization to zero mean and unit variance (no affine).
    pub fn layer_norm(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for r in 0..out.rows() {
            normalize_row(out.row_mut(r));
        }
        self.derived(out, Op::LayerNorm(a), &[a])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut out = Tensor::zeros(rows, cols);
        let mut c0 = 0;
        for p in parts {
            let pv = self.value(*p);
            assert_eq!(pv.rows(), rows, "concat row mismatch");
            for r in 0..rows {
                out.row_mut(r)[c0..c0 + pv.cols()].copy_from_slice(pv.row(r));
            }
            c0 += pv.cols();
        }
        self.derived(out, Op::ConcatCols(parts.to_vec()), parts)
    }

    /// Row `i` becomes rows `i*t .. i*t+t`.
    pub fn repeat_rows(&mut self, a: Var, t: usize) -> Var {
        let av = self.value(a);
        let mut out = Tensor::zeros(av.rows() * t, av.cols());
        for r in 0..av.rows() {
            for j in 0..t {
                out.row_mut(r * t + j).copy_from_slice(av.row(r));
            }
        }
        self.derived(out, Op::RepeatRows(a, t), &[a])
    }

    /// The whole matrix stacked `t` times.
    pub fn tile_rows(&mut self, a: Var, t: usize) -> Var {
        let av = self.value(a);
        let n = av.rows();
        let mut out = Tensor::zeros(n * t, av.cols());
        for j in 0..t {
            for r in 0..n {
                out.row_mut(j * n + r).copy_from_slice(av.row(r));
            }
        }
        self.derived(out, Op::TileRows(a, t), &[a])
    }

    /// Column-wise max over consecutive groups of `group` rows.
    pub fn group_max(&mut self, a: Var, group: usize) -> Var {
        let av = self.value(a);
        assert!(group > 0 && av.rows() % group == 0, "group_max size mismatch");
        let g = av.rows() / group;
        let cols = av.cols();
        let mut out = Tensor::zeros(g, cols);
        let mut arg = vec![0usize; g * cols];
        for gi in 0..g {
            for c in 0..cols {
                let mut best = f64::NEG_INFINITY;
                let mut bi = gi * group;
                for r in gi * group..(gi + 1) * group {
                    let v = av.get(r, c);
                    if v > best {
                        best = v;
                        bi = r;
                    }
                }
                out.set(gi, c, best);
                arg[gi * cols + c] = bi;
            }
        }
        self.derived(out, Op::GroupMax(a, arg), &[a])
    }

    /// Within each group of `group` rows, output row `t` takes input row
    /// `t + offset` (zero outside the group).
    pub fn group_shift(&mut self, a: Var, group: usize, offset: isize) -> Var {
        let av = self.value(a);
        assert!(group > 0 && av.rows() % group == 0, "group_shift size mismatch");
        let mut out = Tensor::zeros(av.rows(), av.cols());
        for g0 in (0..av.rows()).step_by(group) {
            for t in 0..group {
                let s = t as isize + offset;
                if s >= 0 && (s as usize) < group {
                    out.row_mut(g0 + t).copy_from_slice(av.row(g0 + s as usize));
                }
            }
        }
        self.derived(out, Op::GroupShift(a, group, offset), &[a])
    }

    /// Batched single-head scaled dot-product attention. `q` holds `tq` rows
    /// per batch item, `k` and `v` hold `tk` rows per item.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, tq: usize, tk: usize) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.cols();
        assert_eq!(kv.cols(), d, "attention key width mismatch");
        assert!(qv.rows() % tq == 0 && kv.rows() % tk == 0, "attention row mismatch");
        let batch = qv.rows() / tq;
        assert_eq!(kv.rows() / tk, batch, "attention batch mismatch");
        assert_eq!(vv.rows(), kv.rows(), "attention value rows mismatch");
        let dv = vv.cols();
        let inv = 1.0 / (d as f64).sqrt();
        let mut probs = vec![0.0; batch * tq * tk];
        let mut out = Tensor::zeros(qv.rows(), dv);
        for b in 0..batch {
            for i in 0..tq {
                let qi = qv.row(b * tq + i);
                let p = &mut probs[(b * tq + i) * tk..(b * tq + i + 1) * tk];
                for (j, pj) in p.iter_mut().enumerate() {
                    let kj = kv.row(b * tk + j);
                    *pj = qi.iter().zip(kj).map(|(x, y)| x * y).sum::<f64>() * inv;
                }
                softmax(p);
                let o = out.row_mut(b * tq + i);
                for (j, pj) in p.iter().enumerate() {
                    for (oc, vc) in o.iter_mut().zip(vv.row(b * tk + j)) {
                        *oc += pj * vc;
                    }
                }
            }
        }
        let op = Op::Attention {
            q,
            k,
            v,
            tq,
            tk,
            probs,
        };
        self.derived(out, op, &[q, k, v])
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let out = self.value(a).clone().reshaped(rows, cols);
        self.derived(out, Op::Reshape(a), &[a])
    }

    /// Mean squared error against a constant target; a 1x1 result.
    pub fn mse(&mut self, pred: Var, target: Tensor) -> Var {
        let pv = self.value(pred);
        assert_eq!(pv.shape(), target.shape(), "mse shape mismatch");
        let n = pv.len().max(1) as f64;
        let s: f64 = pv
            .data()
            .iter()
            .zip(target.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        self.derived(Tensor::from_vec(1, 1, vec![s / n]), Op::Mse(pred, target), &[pred])
    }

    /// Backpropagate from the scalar `loss` and return one gradient per
    /// parameter index in `0..n_params` (zero for unused parameters).
    pub fn param_grads(&self, loss: Var, n_params: usize) -> Vec<Tensor> {
        let mut grads = self.backward(loss);
        let mut out: Vec<Option<Tensor>> = (0..n_params).map(|_| None).collect();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Param(idx) = node.op {
                if let Some(g) = grads[i].take() {
                    match &mut out[idx] {
                        Some(acc) => acc.add_assign(&g),
                        slot => *slot = Some(g),
                    }
                }
            }
        }
        let shapes: Vec<Option<(usize, usize)>> = {
            let mut s = vec![None; n_params];
            for node in &self.nodes {
                if let Op::Param(idx) = node.op {
                    s[idx] = Some(node.value.shape());
                }
            }
            s
        };
        out.into_iter()
            .zip(shapes)
            .map(|(g, s)| {
                g.unwrap_or_else(|| {
                    let (r, c) = s.unwrap_or((0, 0));
                    Tensor::zeros(r, c)
                })
            })
            .collect()
    }

    /// Gradient of the scalar `loss` with respect to every node value.
    fn backward(&self, loss: Var) -> Vec<Option<Tensor>> {
        assert_eq!(self.value(loss).shape(), (1, 1), "backward needs a scalar");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::from_vec(1, 1, vec![1.0]));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        grads
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let y = &*node.value;
        let mut acc = |v: Var, t: Tensor| match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&t),
            slot => *slot = Some(t),
        };
        match &node.op {
            Op::Input | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    let mut ga = Tensor::zeros(av.rows(), av.cols());
                    gemm(1.0, g, false, bv, true, 0.0, &mut ga);
                    acc(*a, ga);
                }
                if self.wants(*b) {
                    let mut gb = Tensor::zeros(bv.rows(), bv.cols());
                    gemm(1.0, av, true, g, false, 0.0, &mut gb);
                    acc(*b, gb);
                }
            }
            Op::Linear(x, w, b) => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                if self.wants(*x) {
                    let mut gx = Tensor::zeros(xv.rows(), xv.cols());
                    gemm(1.0, g, false, wv, true, 0.0, &mut gx);
                    acc(*x, gx);
                }
                if self.wants(*w) {
                    let mut gw = Tensor::zeros(wv.rows(), wv.cols());
                    gemm(1.0, xv, true, g, false, 0.0, &mut gw);
                    acc(*w, gw);
                }
                if self.wants(*b) {
                    acc(*b, col_sums(g));
                }
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    acc(*a, g.clone());
                }
                if self.wants(*b) {
                    acc(*b, g.clone());
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    acc(*a, hadamard(g, bv));
                }
                if self.wants(*b) {
                    acc(*b, hadamard(g, av));
                }
            }
            Op::Scale(a, s) => {
                let mut ga = g.clone();
                ga.scale(*s);
                acc(*a, ga);
            }
            Op::ScaleCols(a, scales) => {
                let mut ga = g.clone();
                for r in 0..ga.rows() {
                    for (o, s) in ga.row_mut(r).iter_mut().zip(scales) {
                        *o *= s;
                    }
                }
                acc(*a, ga);
            }
            Op::Silu(a) => {
                let x = self.value(*a);
                let mut ga = g.clone();
                for (o, xv) in ga.data_mut().iter_mut().zip(x.data()) {
                    let s = sigmoid(*xv);
                    *o *= s * (1.0 + xv * (1.0 - s));
                }
                acc(*a, ga);
            }
            Op::Tanh(a) => {
                let mut ga = g.clone();
                for (o, yv) in ga.data_mut().iter_mut().zip(y.data()) {
                    *o *= 1.0 - yv * yv;
                }
                acc(*a, ga);
            }
            Op::LayerNorm(a) => {
                let x = self.value(*a);
                let n = x.cols() as f64;
                let mut ga = Tensor::zeros(x.rows(), x.cols());
                for r in 0..x.rows() {
                    let xr = x.row(r);
                    let mean = xr.iter().sum::<f64>() / n;
                    let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                    let rstd = 1.0 / (var + LN_EPS).sqrt();
                    let (gr, yr) = (g.row(r), y.row(r));
                    let gmean = gr.iter().sum::<f64>() / n;
                    let gy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / n;
                    for (c, o) in ga.row_mut(r).iter_mut().enumerate() {
                        *o = rstd * (gr[c] - gmean - yr[c] * gy);
                    }
                }
                acc(*a, ga);
            }
            Op::ConcatCols(parts) => {
                let mut c0 = 0;
                for p in parts {
                    let cols = self.value(*p).cols();
                    if self.wants(*p) {
                        let mut gp = Tensor::zeros(g.rows(), cols);
                        for r in 0..g.rows() {
                            gp.row_mut(r).copy_from_slice(&g.row(r)[c0..c0 + cols]);
                        }
                        acc(*p, gp);
                    }
                    c0 += cols;
                }
            }
            Op::RepeatRows(a, t) => {
                let av = self.value(*a);
                let mut ga = Tensor::zeros(av.rows(), av.cols());
                for r in 0..av.rows() {
                    for j in 0..*t {
                        let src = g.row(r * t + j).to_vec();
                        for (o, s) in ga.row_mut(r).iter_mut().zip(src) {
                            *o += s;
                        }
                    }
                }
                acc(*a, ga);
            }
            Op::TileRows(a, t) => {
                let av = self.value(*a);
                let n = av.rows();
                let mut ga = Tensor::zeros(n, av.cols());
                for j in 0..*t {
                    for r in 0..n {
                        for (o, s) in ga.row_mut(r).iter_mut().zip(g.row(j * n + r)) {
                            *o += s;
                        }
                    }
                }
                acc(*a, ga);
            }
            Op::GroupMax(a, arg) => {
                let av = self.value(*a);
                let cols = av.cols();
                let mut ga = Tensor::zeros(av.rows(), cols);
                for (idx, &src) in arg.iter().enumerate() {
                    let (gi, c) = (idx / cols, idx % cols);
                    let v = ga.get(src, c) + g.get(gi, c);
                    ga.set(src, c, v);
                }
                acc(*a, ga);
            }
            Op::GroupShift(a, group, offset) => {
                let mut ga = Tensor::zeros(g.rows(), g.cols());
                for g0 in (0..g.rows()).step_by(*group) {
                    for t in 0..*group {
                        let s = t as isize + offset;
                        if s >= 0 && (s as usize) < *group {
                            ga.row_mut(g0 + s as usize).copy_from_slice(g.row(g0 + t));
                        }
                    }
                }
                acc(*a, ga);
            }
            Op::Attention {
                q,
                k,
                v,
                tq,
                tk,
                probs,
            } => {
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let (tq, tk) = (*tq, *tk);
                let batch = qv.rows() / tq;
                let inv = 1.0 / (qv.cols() as f64).sqrt();
                let mut gq = Tensor::zeros(qv.rows(), qv.cols());
                let mut gk = Tensor::zeros(kv.rows(), kv.cols());
                let mut gv = Tensor::zeros(vv.rows(), vv.cols());
                let mut ds = vec![0.0; tk];
                for b in 0..batch {
                    for i in 0..tq {
                        let row = b * tq + i;
                        let p = &probs[row * tk..(row + 1) * tk];
                        let go = g.row(row);
                        for j in 0..tk {
                            let vr = vv.row(b * tk + j);
                            ds[j] = go.iter().zip(vr).map(|(x, y)| x * y).sum();
                            for (o, gg) in gv.row_mut(b * tk + j).iter_mut().zip(go) {
                                *o += p[j] * gg;
                            }
                        }
                        let dot: f64 = ds.iter().zip(p).map(|(a, b)| a * b).sum();
                        for j in 0..tk {
                            let s = p[j] * (ds[j] - dot) * inv;
                            if s == 0.0 {
                                continue;
                            }
                            let kr = kv.row(b * tk + j);
                            for (o, kk) in gq.row_mut(row).iter_mut().zip(kr) {
                                *o += s * kk;
                            }
                            let qr = qv.row(row);
                            for (o, qq) in gk.row_mut(b * tk + j).iter_mut().zip(qr) {
                                *o += s * qq;
                            }
                        }
                    }
                }
                if self.wants(*q) {
                    acc(*q, gq);
                }
                if self.wants(*k) {
                    acc(*k, gk);
                }
                if self.wants(*v) {
                    acc(*v, gv);
                }
            }
            Op::Reshape(a) => {
                let av = self.value(*a);
                acc(*a, g.clone().reshaped(av.rows(), av.cols()));
            }
            Op::Mse(p, target) => {
                let pv = self.value(*p);
                let scale = 2.0 * g.get(0, 0) / pv.len().max(1) as f64;
                let data = pv
                    .data()
                    .iter()
                    .zip(target.data())
                    .map(|(a, b)| scale * (a - b))
                    .collect();
                acc(*p, Tensor::from_vec(pv.rows(), pv.cols(), data));
            }
        }
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn softmax(p: &mut [f64]) {
    let m = p.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in p.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in p.iter_mut() {
        *v /= s;
    }
}

fn normalize_row(row: &mut [f64]) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let rstd = 1.0 / (var + LN_EPS).sqrt();
    for v in row.iter_mut() {
        *v = (*v - mean) * rstd;
    }
}

fn col_sums(g: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(1, g.cols());
    for r in 0..g.rows() {
        for (o, v) in out.row_mut(0).iter_mut().zip(g.row(r)) {
            *o += v;
        }
    }
    out
}

fn hadamard(a: &Tensor, b: &Tensor) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
    Tensor::from_vec(a.rows(), a.cols(), data)
}
