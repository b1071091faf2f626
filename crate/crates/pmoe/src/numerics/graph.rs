//! Reverse-mode automatic differentiation on a tape.
//!
//! Values are computed eagerly as operations are recorded, so `value()` can
//! be read at any point during construction. `backward()` replays the tape
//! in reverse, accumulating gradients for every node on a path from a
//! trainable leaf to the loss. Construction order is the topological order.

use super::tensor::softmax_slice;
use super::{gelu, gelu_deriv, Tensor};
use crate::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Per-parent gradient contributions returned by a backward function.
type BackwardFn = Box<dyn Fn(&BackwardCtx) -> Vec<Option<Tensor>>>;

struct BackwardCtx<'a> {
    parents: Vec<&'a Tensor>,
    value: &'a Tensor,
    grad: &'a Tensor,
    /// Which parents need a gradient at all; contributions for the others
    /// may be skipped (returned as None).
    needs: Vec<bool>,
}

struct Node {
    value: Tensor,
    parents: Vec<Var>,
    needs_grad: bool,
    backward: Option<BackwardFn>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, if any path existed.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }
}

/// Tape of eagerly evaluated tensor operations.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
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

    fn push(
        &mut self,
        value: Tensor,
        parents: Vec<Var>,
        backward: Option<BackwardFn>,
    ) -> Var {
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            value,
            parents,
            needs_grad,
            backward,
        });
        Var(self.nodes.len() - 1)
    }

    /// Insert a tensor as a leaf. Its `requires_grad` flag decides whether
    /// gradients flow back to it.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let needs_grad = t.requires_grad();
        self.nodes.push(Node {
            value: t,
            parents: vec![],
            needs_grad,
            backward: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        Ok(self.push(
            value,
            vec![a, b],
            Some(Box::new(|ctx| {
                vec![Some(ctx.grad.clone()), Some(ctx.grad.clone())]
            })),
        ))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).mul(self.value(b))?;
        Ok(self.push(
            value,
            vec![a, b],
            Some(Box::new(|ctx| {
                vec![
                    ctx.needs[0].then(|| ctx.grad.mul(ctx.parents[1]).unwrap()),
                    ctx.needs[1].then(|| ctx.grad.mul(ctx.parents[0]).unwrap()),
                ]
            })),
        ))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).scale(c);
        self.push(
            value,
            vec![a],
            Some(Box::new(move |ctx| vec![Some(ctx.grad.scale(c))])),
        )
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(
            value,
            vec![a, b],
            Some(Box::new(|ctx| {
                let (a, b) = (ctx.parents[0], ctx.parents[1]);
                let da = ctx.needs[0].then(|| {
                    ctx.grad.matmul(&b.transposed().unwrap()).unwrap()
                });
                let db = ctx.needs[1].then(|| {
                    a.transposed().unwrap().matmul(ctx.grad).unwrap()
                });
                vec![da, db]
            })),
        ))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).transposed()?;
        Ok(self.push(
            value,
            vec![a],
            Some(Box::new(|ctx| vec![Some(ctx.grad.transposed().unwrap())])),
        ))
    }

    /// `a + bias` with `bias` broadcast over the rows of `a`.
    pub fn add_row_broadcast(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(bias));
        if av.rank() != 2 || bv.shape() != [av.cols()] {
            return Err(Error::shape(format!(
                "row-broadcast add on {:?} + {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let n = av.cols();
        let mut data = av.data().to_vec();
        for row in data.chunks_exact_mut(n) {
            for (v, b) in row.iter_mut().zip(bv.data()) {
                *v += b;
            }
        }
        let value = Tensor::from_vec(data, av.shape())?;
        Ok(self.push(
            value,
            vec![a, bias],
            Some(Box::new(|ctx| {
                let n = ctx.parents[1].numel();
                let db = ctx.needs[1].then(|| {
                    let mut acc = vec![0.0; n];
                    for row in ctx.grad.data().chunks_exact(n) {
                        for (s, g) in acc.iter_mut().zip(row) {
                            *s += g;
                        }
                    }
                    Tensor::from_vec(acc, &[n]).unwrap()
                });
                vec![Some(ctx.grad.clone()), db]
            })),
        ))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let value = self.value(a).softmax_last();
        self.push(
            value,
            vec![a],
            Some(Box::new(|ctx| {
                let w = *ctx.value.shape().last().unwrap();
                let mut dx = vec![0.0; ctx.value.numel()];
                for ((y, g), d) in ctx
                    .value
                    .data()
                    .chunks_exact(w)
                    .zip(ctx.grad.data().chunks_exact(w))
                    .zip(dx.chunks_exact_mut(w))
                {
                    let dot: f64 = y.iter().zip(g).map(|(&yi, &gi)| yi * gi).sum();
                    for i in 0..w {
                        d[i] = y[i] * (g[i] - dot);
                    }
                }
                vec![Some(Tensor::from_vec(dx, ctx.value.shape()).unwrap())]
            })),
        )
    }

    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let value = self
            .value(x)
            .layernorm(self.value(gamma), self.value(beta), eps)?;
        Ok(self.push(
            value,
            vec![x, gamma, beta],
            Some(Box::new(move |ctx| {
                let x = ctx.parents[0];
                let gamma = ctx.parents[1];
                let w = gamma.numel();
                let rows = x.numel() / w;
                let mut dx = ctx.needs[0].then(|| vec![0.0; x.numel()]);
                let mut dgamma = vec![0.0; w];
                let mut dbeta = vec![0.0; w];
                for r in 0..rows {
                    let xr = &x.data()[r * w..(r + 1) * w];
                    let gr = &ctx.grad.data()[r * w..(r + 1) * w];
                    let mean = xr.iter().sum::<f64>() / w as f64;
                    let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / w as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    let mut mean_dy = 0.0;
                    let mut mean_dyx = 0.0;
                    for j in 0..w {
                        let xhat = (xr[j] - mean) * inv;
                        dgamma[j] += gr[j] * xhat;
                        dbeta[j] += gr[j];
                        let dyh = gr[j] * gamma.data()[j];
                        mean_dy += dyh;
                        mean_dyx += dyh * xhat;
                    }
                    mean_dy /= w as f64;
                    mean_dyx /= w as f64;
                    if let Some(dx) = dx.as_mut() {
                        for j in 0..w {
                            let xhat = (xr[j] - mean) * inv;
                            let dyh = gr[j] * gamma.data()[j];
                            dx[r * w + j] = inv * (dyh - mean_dy - xhat * mean_dyx);
                        }
                    }
                }
                vec![
                    dx.map(|d| Tensor::from_vec(d, x.shape()).unwrap()),
                    ctx.needs[1]
                        .then(|| Tensor::from_vec(dgamma, &[w]).unwrap()),
                    ctx.needs[2].then(|| Tensor::from_vec(dbeta, &[w]).unwrap()),
                ]
            })),
        ))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(gelu);
        self.push(
            value,
            vec![a],
            Some(Box::new(|ctx| {
                let dx: Vec<f64> = ctx
                    .parents[0]
                    .data()
                    .iter()
                    .zip(ctx.grad.data())
                    .map(|(&x, &g)| g * gelu_deriv(x))
                    .collect();
                vec![Some(Tensor::from_vec(dx, ctx.parents[0].shape()).unwrap())]
            })),
        )
    }

    /// Mean over the row axis of a rank-2 tensor: `[m, n] -> [n]`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        if self.value(a).rank() != 2 {
            return Err(Error::shape(format!(
                "mean_rows requires rank 2, got {:?}",
                self.value(a).shape()
            )));
        }
        let value = self.value(a).mean_axis(0)?;
        Ok(self.push(
            value,
            vec![a],
            Some(Box::new(|ctx| {
                let (m, n) = (ctx.parents[0].rows(), ctx.parents[0].cols());
                let scale = 1.0 / m as f64;
                let mut dx = vec![0.0; m * n];
                for r in 0..m {
                    for j in 0..n {
                        dx[r * n + j] = ctx.grad.data()[j] * scale;
                    }
                }
                vec![Some(Tensor::from_vec(dx, &[m, n]).unwrap())]
            })),
        ))
    }

    /// Repeat a length-n vector as m rows: `[n] -> [m, n]`.
    pub fn broadcast_rows(&mut self, v: Var, m: usize) -> Result<Var> {
        let vv = self.value(v);
        if vv.rank() != 1 {
            return Err(Error::shape(format!(
                "broadcast_rows requires rank 1, got {:?}",
                vv.shape()
            )));
        }
        let n = vv.numel();
        let mut data = Vec::with_capacity(m * n);
        for _ in 0..m {
            data.extend_from_slice(vv.data());
        }
        let value = Tensor::from_vec(data, &[m, n])?;
        Ok(self.push(
            value,
            vec![v],
            Some(Box::new(move |ctx| {
                let n = ctx.parents[0].numel();
                let mut acc = vec![0.0; n];
                for row in ctx.grad.data().chunks_exact(n) {
                    for (s, g) in acc.iter_mut().zip(row) {
                        *s += g;
                    }
                }
                vec![Some(Tensor::from_vec(acc, &[n]).unwrap())]
            })),
        ))
    }

    /// Repeat a length-m vector as n columns: `[m] -> [m, n]`.
    pub fn broadcast_cols(&mut self, v: Var, n: usize) -> Result<Var> {
        let vv = self.value(v);
        if vv.rank() != 1 {
            return Err(Error::shape(format!(
                "broadcast_cols requires rank 1, got {:?}",
                vv.shape()
            )));
        }
        let m = vv.numel();
        let mut data = Vec::with_capacity(m * n);
        for &x in vv.data() {
            data.extend(std::iter::repeat(x).take(n));
        }
        let value = Tensor::from_vec(data, &[m, n])?;
        Ok(self.push(
            value,
            vec![v],
            Some(Box::new(move |ctx| {
                let m = ctx.parents[0].numel();
                let n = ctx.grad.numel() / m;
                let mut acc = vec![0.0; m];
                for (i, row) in ctx.grad.data().chunks_exact(n).enumerate() {
                    acc[i] = row.iter().sum();
                }
                vec![Some(Tensor::from_vec(acc, &[m]).unwrap())]
            })),
        ))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let av = self.value(a);
        if av.rank() != 2 || start + len > av.rows() {
            return Err(Error::index(format!(
                "row slice {}..{} out of range for {:?}",
                start,
                start + len,
                av.shape()
            )));
        }
        let n = av.cols();
        let value = Tensor::from_vec(
            av.data()[start * n..(start + len) * n].to_vec(),
            &[len, n],
        )?;
        Ok(self.push(
            value,
            vec![a],
            Some(Box::new(move |ctx| {
                let (m, n) = (ctx.parents[0].rows(), ctx.parents[0].cols());
                let mut dx = vec![0.0; m * n];
                dx[start * n..(start + len) * n].copy_from_slice(ctx.grad.data());
                vec![Some(Tensor::from_vec(dx, &[m, n]).unwrap())]
            })),
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat_rows of zero tensors"));
        }
        let n = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut lens = Vec::with_capacity(parts.len());
        for &p in parts {
            let pv = self.value(p);
            if pv.rank() != 2 || pv.cols() != n {
                return Err(Error::shape(format!(
                    "concat_rows width mismatch: expected {}, got {:?}",
                    n,
                    pv.shape()
                )));
            }
            lens.push(pv.rows());
            data.extend_from_slice(pv.data());
        }
        let rows: usize = lens.iter().sum();
        let value = Tensor::from_vec(data, &[rows, n])?;
        Ok(self.push(
            value,
            parts.to_vec(),
            Some(Box::new(move |ctx| {
                let n = ctx.value.cols();
                let mut out = Vec::with_capacity(lens.len());
                let mut offset = 0;
                for &len in &lens {
                    let piece = ctx.grad.data()[offset * n..(offset + len) * n].to_vec();
                    out.push(Some(Tensor::from_vec(piece, &[len, n]).unwrap()));
                    offset += len;
                }
                out
            })),
        ))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let av = self.value(a);
        if av.rank() != 2 || start + len > av.cols() {
            return Err(Error::index(format!(
                "column slice {}..{} out of range for {:?}",
                start,
                start + len,
                av.shape()
            )));
        }
        let (m, n) = (av.rows(), av.cols());
        let mut data = Vec::with_capacity(m * len);
        for r in 0..m {
            data.extend_from_slice(&av.data()[r * n + start..r * n + start + len]);
        }
        let value = Tensor::from_vec(data, &[m, len])?;
        Ok(self.push(
            value,
            vec![a],
            Some(Box::new(move |ctx| {
                let (m, n) = (ctx.parents[0].rows(), ctx.parents[0].cols());
                let mut dx = vec![0.0; m * n];
                for r in 0..m {
                    dx[r * n + start..r * n + start + len]
                        .copy_from_slice(&ctx.grad.data()[r * len..(r + 1) * len]);
                }
                vec![Some(Tensor::from_vec(dx, &[m, n]).unwrap())]
            })),
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat_cols of zero tensors"));
        }
        let m = self.value(parts[0]).rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let pv = self.value(p);
            if pv.rank() != 2 || pv.rows() != m {
                return Err(Error::shape(format!(
                    "concat_cols height mismatch: expected {}, got {:?}",
                    m,
                    pv.shape()
                )));
            }
            widths.push(pv.cols());
        }
        let n: usize = widths.iter().sum();
        let mut data = vec![0.0; m * n];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let pv = self.value(p);
            for r in 0..m {
                data[r * n + offset..r * n + offset + w]
                    .copy_from_slice(&pv.data()[r * w..(r + 1) * w]);
            }
            offset += w;
        }
        let value = Tensor::from_vec(data, &[m, n])?;
        Ok(self.push(
            value,
            parts.to_vec(),
            Some(Box::new(move |ctx| {
                let m = ctx.value.rows();
                let n = ctx.value.cols();
                let mut out = Vec::with_capacity(widths.len());
                let mut offset = 0;
                for &w in &widths {
                    let mut piece = vec![0.0; m * w];
                    for r in 0..m {
                        piece[r * w..(r + 1) * w]
                            .copy_from_slice(&ctx.grad.data()[r * n + offset..r * n + offset + w]);
                    }
                    out.push(Some(Tensor::from_vec(piece, &[m, w]).unwrap()));
                    offset += w;
                }
                out
            })),
        ))
    }

    /// Select rows by index; repeated indices are allowed.
    pub fn gather_rows(&mut self, a: Var, indices: Vec<usize>) -> Result<Var> {
        let av = self.value(a);
        if av.rank() != 2 {
            return Err(Error::shape("gather_rows requires rank 2"));
        }
        let (m, n) = (av.rows(), av.cols());
        if indices.iter().any(|&i| i >= m) {
            return Err(Error::index(format!(
                "gather index out of range for {} rows",
                m
            )));
        }
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in &indices {
            data.extend_from_slice(&av.data()[i * n..(i + 1) * n]);
        }
        let value = Tensor::from_vec(data, &[indices.len(), n])?;
        Ok(self.push(
            value,
            vec![a],
            Some(Box::new(move |ctx| {
                let (m, n) = (ctx.parents[0].rows(), ctx.parents[0].cols());
                let mut dx = vec![0.0; m * n];
                for (t, &i) in indices.iter().enumerate() {
                    for j in 0..n {
                        dx[i * n + j] += ctx.grad.data()[t * n + j];
                    }
                }
                vec![Some(Tensor::from_vec(dx, &[m, n]).unwrap())]
            })),
        ))
    }

    /// Place the rows of `a` at `indices` within a zero matrix of
    /// `total_rows` rows. Indices must be distinct.
    pub fn scatter_rows(&mut self, a: Var, indices: Vec<usize>, total_rows: usize) -> Result<Var> {
        let av = self.value(a);
        if av.rank() != 2 || av.rows() != indices.len() {
            return Err(Error::shape("scatter_rows row count mismatch"));
        }
        if indices.iter().any(|&i| i >= total_rows) {
            return Err(Error::index("scatter index out of range"));
        }
        let n = av.cols();
        let mut data = vec![0.0; total_rows * n];
        for (t, &i) in indices.iter().enumerate() {
            data[i * n..(i + 1) * n].copy_from_slice(&av.data()[t * n..(t + 1) * n]);
        }
        let value = Tensor::from_vec(data, &[total_rows, n])?;
        Ok(self.push(
            value,
            vec![a],
            Some(Box::new(move |ctx| {
                let n = ctx.parents[0].cols();
                let mut dx = Vec::with_capacity(indices.len() * n);
                for &i in &indices {
                    dx.extend_from_slice(&ctx.grad.data()[i * n..(i + 1) * n]);
                }
                vec![Some(Tensor::from_vec(dx, &[indices.len(), n]).unwrap())]
            })),
        ))
    }

    /// Slice one expert's block from a rank-3 bank: `[K, P, D] -> [P, D]`.
    pub fn slice_bank(&mut self, bank: Var, k: usize) -> Result<Var> {
        let bv = self.value(bank);
        if bv.rank() != 3 {
            return Err(Error::shape(format!(
                "slice_bank requires rank 3, got {:?}",
                bv.shape()
            )));
        }
        let (kk, p, d) = (bv.shape()[0], bv.shape()[1], bv.shape()[2]);
        if k >= kk {
            return Err(Error::index(format!("expert {} out of {}", k, kk)));
        }
        let block = p * d;
        let value = Tensor::from_vec(bv.data()[k * block..(k + 1) * block].to_vec(), &[p, d])?;
        Ok(self.push(
            value,
            vec![bank],
            Some(Box::new(move |ctx| {
                let mut dx = vec![0.0; ctx.parents[0].numel()];
                dx[k * block..(k + 1) * block].copy_from_slice(ctx.grad.data());
                vec![Some(Tensor::from_vec(dx, ctx.parents[0].shape()).unwrap())]
            })),
        ))
    }

    /// Convex fusion of a prompt bank: `out[n, :] = sum_k w[n, k] * bank[k, n, :]`.
    pub fn fuse(&mut self, weights: Var, bank: Var) -> Result<Var> {
        let wv = self.value(weights);
        let bv = self.value(bank);
        if wv.rank() != 2 || bv.rank() != 3 {
            return Err(Error::shape("fuse expects weights rank 2 and bank rank 3"));
        }
        let (np, k) = (wv.rows(), wv.cols());
        if bv.shape()[0] != k || bv.shape()[1] != np {
            return Err(Error::shape(format!(
                "fuse shapes disagree: weights {:?} vs bank {:?}",
                wv.shape(),
                bv.shape()
            )));
        }
        let d = bv.shape()[2];
        let mut data = vec![0.0; np * d];
        for n in 0..np {
            for e in 0..k {
                let w = wv.data()[n * k + e];
                let src = &bv.data()[(e * np + n) * d..(e * np + n + 1) * d];
                for (o, &s) in data[n * d..(n + 1) * d].iter_mut().zip(src) {
                    *o += w * s;
                }
            }
        }
        let value = Tensor::from_vec(data, &[np, d])?;
        Ok(self.push(
            value,
            vec![weights, bank],
            Some(Box::new(move |ctx| {
                let wv = ctx.parents[0];
                let bv = ctx.parents[1];
                let dw = ctx.needs[0].then(|| {
                    let mut dw = vec![0.0; np * k];
                    for n in 0..np {
                        let g = &ctx.grad.data()[n * d..(n + 1) * d];
                        for e in 0..k {
                            let src = &bv.data()[(e * np + n) * d..(e * np + n + 1) * d];
                            dw[n * k + e] = g.iter().zip(src).map(|(&a, &b)| a * b).sum();
                        }
                    }
                    Tensor::from_vec(dw, &[np, k]).unwrap()
                });
                let db = ctx.needs[1].then(|| {
                    let mut db = vec![0.0; k * np * d];
                    for n in 0..np {
                        let g = &ctx.grad.data()[n * d..(n + 1) * d];
                        for e in 0..k {
                            let w = wv.data()[n * k + e];
                            let dst = &mut db[(e * np + n) * d..(e * np + n + 1) * d];
                            for (o, &gv) in dst.iter_mut().zip(g) {
                                *o = w * gv;
                            }
                        }
                    }
                    Tensor::from_vec(db, bv.shape()).unwrap()
                });
                vec![dw, db]
            })),
        ))
    }

    /// Mean cross-entropy of logit rows against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        if lv.rank() != 2 || lv.rows() != labels.len() {
            return Err(Error::shape(format!(
                "cross_entropy: logits {:?} vs {} labels",
                lv.shape(),
                labels.len()
            )));
        }
        let c = lv.cols();
        if labels.iter().any(|&y| y >= c) {
            return Err(Error::index("label out of class range"));
        }
        let b = labels.len();
        let mut total = 0.0;
        for (row, &y) in lv.data().chunks_exact(c).zip(labels) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[y];
        }
        let value = Tensor::scalar(total / b as f64);
        let labels = labels.to_vec();
        Ok(self.push(
            value,
            vec![logits],
            Some(Box::new(move |ctx| {
                let lv = ctx.parents[0];
                let c = lv.cols();
                let b = labels.len();
                let g = ctx.grad.item() / b as f64;
                let mut dx = lv.data().to_vec();
                for (row, &y) in dx.chunks_exact_mut(c).zip(&labels) {
                    softmax_slice(row);
                    row[y] -= 1.0;
                    for v in row.iter_mut() {
                        *v *= g;
                    }
                }
                vec![Some(Tensor::from_vec(dx, lv.shape()).unwrap())]
            })),
        ))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).data().iter().sum());
        self.push(
            value,
            vec![a],
            Some(Box::new(|ctx| {
                let g = ctx.grad.item();
                vec![Some(Tensor::full(ctx.parents[0].shape(), g))]
            })),
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshaped(shape)?;
        Ok(self.push(
            value,
            vec![a],
            Some(Box::new(|ctx| {
                vec![Some(
                    ctx.grad.reshaped(ctx.parents[0].shape()).unwrap(),
                )]
            })),
        ))
    }

    /// Reverse pass from a scalar loss. Returns gradients for every node
    /// that both influences the loss and descends from a grad-requiring leaf.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::shape(format!(
                "backward from non-scalar value of shape {:?}",
                lv.shape()
            )));
        }
        if !lv.is_finite() {
            return Err(Error::NonFinite("loss".into()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad || grads[id].is_none() {
                continue;
            }
            let Some(backward) = &node.backward else {
                continue; // leaf: keep its accumulated gradient
            };
            let grad = grads[id].take().unwrap();
            let ctx = BackwardCtx {
                parents: node.parents.iter().map(|p| &self.nodes[p.0].value).collect(),
                value: &node.value,
                grad: &grad,
                needs: node
                    .parents
                    .iter()
                    .map(|p| self.nodes[p.0].needs_grad)
                    .collect(),
            };
            let contributions = backward(&ctx);
            debug_assert_eq!(contributions.len(), node.parents.len());
            for (parent, contribution) in node.parents.iter().zip(contributions) {
                if !self.nodes[parent.0].needs_grad {
                    continue;
                }
                let Some(c) = contribution else { continue };
                match &mut grads[parent.0] {
                    Some(acc) => {
                        let sum = acc.add(&c)?;
                        *acc = sum;
                    }
                    slot => *slot = Some(c),
                }
            }
        }
        Ok(Gradients { grads })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn forward_values_match_tensor_ops() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::from_vec(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]).unwrap());
        let b = g.leaf(Tensor::from_vec(vec![1.0, 1.0], &[2, 1]).unwrap());
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[3.0, 7.0]);
    }

    #[test]
    fn backward_through_matmul_sum() {
        let mut g = Graph::new();
        let a = g.leaf(
            Tensor::from_vec(vec![1.0, 2.0, 3.0, 4.0], &[2, 2])
                .unwrap()
                .with_grad(),
        );
        let b = g.leaf(
            Tensor::from_vec(vec![5.0, 6.0], &[2, 1])
                .unwrap()
                .with_grad(),
        );
        let c = g.matmul(a, b).unwrap();
        let s = g.sum_all(c);
        let grads = g.backward(s).unwrap();
        // d(sum(A@b))/dA = ones @ b^T per row
        assert_eq!(grads.get(a).unwrap().data(), &[5.0, 6.0, 5.0, 6.0]);
        // d/db = column sums of A
        assert_eq!(grads.get(b).unwrap().data(), &[4.0, 6.0]);
    }

    #[test]
    fn no_grad_leaf_gets_none() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::from_vec(vec![1.0, 2.0], &[2, 1]).unwrap());
        let s = g.sum_all(a);
        let grads = g.backward(s).unwrap();
        assert!(grads.get(a).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::zeros(&[2, 2]).with_grad());
        assert!(g.backward(a).is_err());
    }

    #[test]
    fn fuse_selection_and_convexity() {
        // one-hot weights pick out one expert's token
        let mut g = Graph::new();
        let w = g.leaf(Tensor::from_vec(vec![0.0, 1.0], &[1, 2]).unwrap());
        let bank = g.leaf(Tensor::from_vec(vec![1.0, 0.0, 0.0, 2.0], &[2, 1, 2]).unwrap());
        let out = g.fuse(w, bank).unwrap();
        assert_eq!(g.value(out).data(), &[0.0, 2.0]);

        // hand-computed weighted sum: 0.25*[1,0] + 0.75*[0,2]
        let mut g = Graph::new();
        let w = g.leaf(Tensor::from_vec(vec![0.25, 0.75], &[1, 2]).unwrap());
        let bank = g.leaf(Tensor::from_vec(vec![1.0, 0.0, 0.0, 2.0], &[2, 1, 2]).unwrap());
        let out = g.fuse(w, bank).unwrap();
        assert_eq!(g.value(out).data(), &[0.25, 1.5]);
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let mut g = Graph::new();
        let logits = g.leaf(Tensor::zeros(&[1, 4]));
        let loss = g.cross_entropy(logits, &[2]).unwrap();
        assert!((g.value(loss).item() - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn scatter_gather_roundtrip() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::from_vec(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]).unwrap());
        let scattered = g.scatter_rows(a, vec![2, 0], 3).unwrap();
        assert_eq!(
            g.value(scattered).data(),
            &[3.0, 4.0, 0.0, 0.0, 1.0, 2.0]
        );
        let gathered = g.gather_rows(scattered, vec![2, 0]).unwrap();
        assert_eq!(g.value(gathered).data(), &[1.0, 2.0, 3.0, 4.0]);
    }
}
