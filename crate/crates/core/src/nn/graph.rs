//! Reverse-mode differentiation over a linear tape.
//!
//! A [`Graph`] records every operation applied during one forward pass. Its
//! parameter leaves borrow from a [`ParamStore`], so a forward pass never
//! copies weights. Calling [`Graph::backward`] walks the tape in reverse and
//! returns gradients for every node, including parameters.

use std::collections::HashMap;

use super::params::{ParamId, ParamStore};
use super::tensor::{gemm, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

const GN_EPS: f32 = 1e-5;

enum Op {
    Input,
    Param(ParamId),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        stats: Vec<(f32, f32)>,
    },
    Silu(Var),
    Add(Var, Var),
    AddChannel {
        x: Var,
        e: Var,
    },
    Concat(Var, Var),
    Upsample2x(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<f32>,
    },
    Rows {
        table: Var,
        idx: Vec<usize>,
    },
    Mse {
        pred: Var,
        target: Tensor,
    },
    Dot {
        x: Var,
        w: Tensor,
    },
    WeightedSum(Vec<(Var, f32)>),
}

struct Node {
    value: Option<Tensor>,
    op: Op,
}

pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
}

/// Gradients produced by [`Graph::backward`].
pub struct Grads {
    nodes: Vec<Option<Tensor>>,
    params: Vec<Option<Tensor>>,
}

impl Grads {
    /// Gradient of an input leaf. Interior nodes are consumed during the walk.
    pub fn var(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].as_ref()
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(id.0).and_then(Option::as_ref)
    }

    pub fn into_params(self) -> Vec<Option<Tensor>> {
        self.params
    }
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.params.get(*id),
            _ => unreachable!("node without value"),
        }
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars.get(&id) {
            return *v;
        }
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    /// `w` is `[C_out, C_in, k, k]`, `x` is `[N, C_in, H, W]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let out = {
            let xv = self.value(x);
            let wv = self.value(w);
            conv_forward(xv, wv, b.map(|b| self.value(b)), stride, pad)
        };
        self.push(out, Op::Conv2d { x, w, b, stride, pad })
    }

    /// `x` is `[N, in]`, `w` is `[out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let out = {
            let xv = self.value(x);
            let wv = self.value(w);
            let (n, din) = (xv.dim(0), xv.dim(1));
            let dout = wv.dim(0);
            assert_eq!(wv.dim(1), din, "linear: weight expects {} inputs, got {din}", wv.dim(1));
            let mut out = vec![0.0; n * dout];
            if let Some(b) = b {
                let bv = self.value(b).data();
                for row in out.chunks_exact_mut(dout) {
                    row.copy_from_slice(bv);
                }
            }
            gemm(n, din, dout, 1.0, xv.data(), (din, 1), wv.data(), (1, din), 1.0, &mut out, (dout, 1));
            Tensor::new(&[n, dout], out)
        };
        self.push(out, Op::Linear { x, w, b })
    }

    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Var {
        let (out, stats) = {
            let xv = self.value(x);
            let (n, c, h, w) = xv.dims4();
            assert!(c % groups == 0, "group_norm: {c} channels not divisible by {groups} groups");
            let gv = self.value(gamma).data();
            let bv = self.value(beta).data();
            let per_group = c / groups * h * w;
            let hw = h * w;
            let mut out = vec![0.0; xv.len()];
            let mut stats = Vec::with_capacity(n * groups);
            for (gi, chunk) in xv.data().chunks_exact(per_group).enumerate() {
                let mean = chunk.chunks(hw).map(|p| p.iter().sum::<f32>() as f64).sum::<f64>() / per_group as f64;
                let var = chunk
                    .chunks(hw)
                    .map(|p| {
                        let m = mean as f32;
                        p.iter().map(|&v| (v - m) * (v - m)).sum::<f32>() as f64
                    })
                    .sum::<f64>()
                    / per_group as f64;
                let rstd = 1.0 / (var + GN_EPS as f64).sqrt();
                let (mean, rstd) = (mean as f32, rstd as f32);
                stats.push((mean, rstd));
                let base = gi * per_group;
                let c0 = (gi % groups) * (c / groups);
                let dst = &mut out[base..base + per_group];
                for (p, (src, dst)) in chunk.chunks_exact(hw).zip(dst.chunks_exact_mut(hw)).enumerate() {
                    let scale = rstd * gv[c0 + p];
                    let shift = bv[c0 + p] - mean * scale;
                    for (d, &v) in dst.iter_mut().zip(src) {
                        *d = v * scale + shift;
                    }
                }
            }
            (Tensor::new(xv.shape(), out), stats)
        };
        self.push(
            out,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                stats,
            },
        )
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| v * sigmoid(v)).collect();
        let out = Tensor::new(xv.shape(), data);
        self.push(out, Op::Silu(x))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "add: shape mismatch");
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(av.shape(), data);
        self.push(out, Op::Add(a, b))
    }

    /// Adds a per-sample, per-channel vector `e: [N, C]` to every pixel of `x: [N, C, H, W]`.
    pub fn add_channel(&mut self, x: Var, e: Var) -> Var {
        let (xv, ev) = (self.value(x), self.value(e));
        let (n, c, h, w) = xv.dims4();
        assert_eq!(ev.shape(), &[n, c], "add_channel: embedding shape mismatch");
        let hw = h * w;
        let mut data = xv.data().to_vec();
        for (i, plane) in data.chunks_exact_mut(hw).enumerate() {
            let add = ev.data()[i];
            plane.iter_mut().for_each(|v| *v += add);
        }
        let out = Tensor::new(xv.shape(), data);
        self.push(out, Op::AddChannel { x, e })
    }

    /// Channel concatenation of two `[N, *, H, W]` tensors.
    pub fn concat(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let (n, ca, h, w) = av.dims4();
        let (nb, cb, hb, wb) = bv.dims4();
        assert_eq!((n, h, w), (nb, hb, wb), "concat: batch/spatial mismatch");
        let mut data = Vec::with_capacity(av.len() + bv.len());
        for i in 0..n {
            data.extend_from_slice(av.sample(i));
            data.extend_from_slice(bv.sample(i));
        }
        let out = Tensor::new(&[n, ca + cb, h, w], data);
        self.push(out, Op::Concat(a, b))
    }

    pub fn upsample2x(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (n, c, h, w) = xv.dims4();
        let (h2, w2) = (2 * h, 2 * w);
        let mut data = vec![0.0; n * c * h2 * w2];
        for (src, dst) in xv.data().chunks_exact(h * w).zip(data.chunks_exact_mut(h2 * w2)) {
            for y in 0..h2 {
                for x in 0..w2 {
                    dst[y * w2 + x] = src[(y / 2) * w + x / 2];
                }
            }
        }
        let out = Tensor::new(&[n, c, h2, w2], data);
        self.push(out, Op::Upsample2x(x))
    }

    /// Multi-head scaled dot-product attention over flattened spatial tokens.
    ///
    /// `q: [N, C, Hq, Wq]` supplies one query token per pixel, `k: [N, C, Hk, Wk]`
    /// and `v: [N, Cv, Hk, Wk]` one key/value token per source pixel. Channels
    /// are split evenly across `heads`. Returns `[N, Cv, Hq, Wq]` holding
    /// `softmax(Q K^T / sqrt(d)) V` per head, without any residual.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Var {
        let (out, probs) = attention_forward(self.value(q), self.value(k), self.value(v), heads);
        self.push(out, Op::Attention { q, k, v, heads, probs })
    }

    /// Row lookup: `table: [R, D]`, returns `[idx.len(), D]`.
    pub fn rows(&mut self, table: Var, idx: &[usize]) -> Var {
        let tv = self.value(table);
        let d = tv.dim(1);
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            assert!(i < tv.dim(0), "row index {i} out of range");
            data.extend_from_slice(&tv.data()[i * d..(i + 1) * d]);
        }
        let out = Tensor::new(&[idx.len(), d], data);
        self.push(
            out,
            Op::Rows {
                table,
                idx: idx.to_vec(),
            },
        )
    }

    /// Mean squared error over all elements.
    pub fn mse(&mut self, pred: Var, target: &Tensor) -> Var {
        let pv = self.value(pred);
        assert_eq!(pv.shape(), target.shape(), "mse: shape mismatch");
        let s: f64 = pv
            .data()
            .iter()
            .zip(target.data())
            .map(|(a, b)| ((a - b) as f64).powi(2))
            .sum();
        let out = Tensor::scalar((s / pv.len() as f64) as f32);
        self.push(
            out,
            Op::Mse {
                pred,
                target: target.clone(),
            },
        )
    }

    /// `sum(x * w)`, handy as a linear probe loss.
    pub fn dot(&mut self, x: Var, w: &Tensor) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.len(), w.len(), "dot: length mismatch");
        let s: f64 = xv.data().iter().zip(w.data()).map(|(a, b)| (a * b) as f64).sum();
        let out = Tensor::scalar(s as f32);
        self.push(out, Op::Dot { x, w: w.clone() })
    }

    /// `sum_i c_i * s_i` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f32)]) -> Var {
        let s = terms.iter().map(|&(v, c)| c * self.value(v).item()).sum();
        self.push(Tensor::scalar(s), Op::WeightedSum(terms.to_vec()))
    }

    /// Back-propagates from a scalar node.
    pub fn backward(&self, loss: Var) -> Grads {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        let mut param_grads: Vec<Option<Tensor>> = (0..self.params.len()).map(|_| None).collect();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Input => grads[i] = Some(g),
                Op::Param(id) => accumulate(&mut param_grads[id.0], g.clone()),
                Op::Conv2d { x, w, b, stride, pad } => {
                    let (dx, dw, db) = conv_backward(self.value(*x), self.value(*w), &g, *stride, *pad);
                    push_grad(&mut grads, *x, dx);
                    push_grad(&mut grads, *w, dw);
                    if let Some(b) = b {
                        push_grad(&mut grads, *b, db);
                    }
                }
                Op::Linear { x, w, b } => {
                    let (xv, wv) = (self.value(*x), self.value(*w));
                    let (n, din) = (xv.dim(0), xv.dim(1));
                    let dout = wv.dim(0);
                    let mut dx = vec![0.0; n * din];
                    gemm(n, dout, din, 1.0, g.data(), (dout, 1), wv.data(), (din, 1), 0.0, &mut dx, (din, 1));
                    let mut dw = vec![0.0; dout * din];
                    gemm(dout, n, din, 1.0, g.data(), (1, dout), xv.data(), (din, 1), 0.0, &mut dw, (din, 1));
                    push_grad(&mut grads, *x, Tensor::new(&[n, din], dx));
                    push_grad(&mut grads, *w, Tensor::new(&[dout, din], dw));
                    if let Some(b) = b {
                        let mut db = vec![0.0; dout];
                        for row in g.data().chunks_exact(dout) {
                            db.iter_mut().zip(row).for_each(|(a, r)| *a += r);
                        }
                        push_grad(&mut grads, *b, Tensor::new(&[dout], db));
                    }
                }
                Op::GroupNorm {
                    x,
                    gamma,
                    beta,
                    groups,
                    stats,
                } => {
                    let (dx, dg, db) = group_norm_backward(self.value(*x), self.value(*gamma), &g, *groups, stats);
                    push_grad(&mut grads, *x, dx);
                    push_grad(&mut grads, *gamma, dg);
                    push_grad(&mut grads, *beta, db);
                }
                Op::Silu(x) => {
                    let xv = self.value(*x);
                    let data = xv
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&v, &d)| {
                            let s = sigmoid(v);
                            d * s * (1.0 + v * (1.0 - s))
                        })
                        .collect();
                    push_grad(&mut grads, *x, Tensor::new(xv.shape(), data));
                }
                Op::Add(a, b) => {
                    push_grad(&mut grads, *a, g.clone());
                    push_grad(&mut grads, *b, g);
                }
                Op::AddChannel { x, e } => {
                    let (n, c, h, w) = g.dims4();
                    let de = g.data().chunks_exact(h * w).map(|p| p.iter().sum()).collect();
                    push_grad(&mut grads, *e, Tensor::new(&[n, c], de));
                    push_grad(&mut grads, *x, g);
                }
                Op::Concat(a, b) => {
                    let ca = self.value(*a).dim(1);
                    let (n, c, h, w) = g.dims4();
                    let (sa, sb) = (ca * h * w, (c - ca) * h * w);
                    let mut da = Vec::with_capacity(n * sa);
                    let mut db = Vec::with_capacity(n * sb);
                    for i in 0..n {
                        let s = g.sample(i);
                        da.extend_from_slice(&s[..sa]);
                        db.extend_from_slice(&s[sa..]);
                    }
                    push_grad(&mut grads, *a, Tensor::new(&[n, ca, h, w], da));
                    push_grad(&mut grads, *b, Tensor::new(&[n, c - ca, h, w], db));
                }
                Op::Upsample2x(x) => {
                    let (n, c, h, w) = self.value(*x).dims4();
                    let w2 = 2 * w;
                    let mut dx = vec![0.0; n * c * h * w];
                    for (src, dst) in g.data().chunks_exact(4 * h * w).zip(dx.chunks_exact_mut(h * w)) {
                        for (j, &v) in src.iter().enumerate() {
                            let (y, x) = (j / w2, j % w2);
                            dst[(y / 2) * w + x / 2] += v;
                        }
                    }
                    push_grad(&mut grads, *x, Tensor::new(&[n, c, h, w], dx));
                }
                Op::Attention { q, k, v, heads, probs } => {
                    let (dq, dk, dv) =
                        attention_backward(self.value(*q), self.value(*k), self.value(*v), *heads, probs, &g);
                    push_grad(&mut grads, *q, dq);
                    push_grad(&mut grads, *k, dk);
                    push_grad(&mut grads, *v, dv);
                }
                Op::Rows { table, idx } => {
                    let tv = self.value(*table);
                    let d = tv.dim(1);
                    let mut dt = vec![0.0; tv.len()];
                    for (row, &r) in g.data().chunks_exact(d).zip(idx) {
                        dt[r * d..(r + 1) * d].iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                    push_grad(&mut grads, *table, Tensor::new(tv.shape(), dt));
                }
                Op::Mse { pred, target } => {
                    let pv = self.value(*pred);
                    let scale = 2.0 * g.item() / pv.len() as f32;
                    let data = pv.data().iter().zip(target.data()).map(|(a, b)| scale * (a - b)).collect();
                    push_grad(&mut grads, *pred, Tensor::new(pv.shape(), data));
                }
                Op::Dot { x, w } => {
                    let s = g.item();
                    let data = w.data().iter().map(|v| v * s).collect();
                    push_grad(&mut grads, *x, Tensor::new(self.value(*x).shape(), data));
                }
                Op::WeightedSum(terms) => {
                    for &(v, c) in terms {
                        push_grad(&mut grads, v, Tensor::scalar(c * g.item()));
                    }
                }
            }
        }
        Grads {
            nodes: grads,
            params: param_grads,
        }
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(t) => t.add_assign(&g),
        None => *slot = Some(g),
    }
}

fn push_grad(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    accumulate(&mut grads[v.0], g);
}

fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

fn out_size(n: usize, k: usize, stride: usize, pad: usize) -> usize {
    (n + 2 * pad - k) / stride + 1
}

/// Output columns `ox` whose input column `ox * stride + kj - pad` lies in `0..w`.
fn valid_range(wo: usize, w: usize, kj: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(kj).div_ceil(stride);
    let hi = if w + pad > kj { ((w + pad - kj - 1) / stride + 1).min(wo) } else { 0 };
    (lo.min(hi), hi)
}

#[allow(clippy::too_many_arguments)]
fn im2col(x: &[f32], c: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize, cols: &mut [f32]) {
    let (ho, wo) = (out_size(h, k, stride, pad), out_size(w, k, stride, pad));
    let plane = ho * wo;
    for ch in 0..c {
        let src = &x[ch * h * w..(ch + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ch * k + ki) * k + kj;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                let (lo, hi) = valid_range(wo, w, kj, stride, pad);
                for oy in 0..ho {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    let line = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let srow = &src[iy as usize * w..(iy as usize + 1) * w];
                    line[..lo].fill(0.0);
                    line[hi..].fill(0.0);
                    if stride == 1 {
                        let start = lo + kj - pad;
                        line[lo..hi].copy_from_slice(&srow[start..start + hi - lo]);
                    } else {
                        for (ox, d) in line[lo..hi].iter_mut().enumerate() {
                            *d = srow[(lo + ox) * stride + kj - pad];
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im(cols: &[f32], c: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize, dx: &mut [f32]) {
    let (ho, wo) = (out_size(h, k, stride, pad), out_size(w, k, stride, pad));
    let plane = ho * wo;
    for ch in 0..c {
        let dst = &mut dx[ch * h * w..(ch + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ch * k + ki) * k + kj;
                let src = &cols[row * plane..(row + 1) * plane];
                let (lo, hi) = valid_range(wo, w, kj, stride, pad);
                for oy in 0..ho {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let drow = &mut dst[iy as usize * w..(iy as usize + 1) * w];
                    let line = &src[oy * wo..(oy + 1) * wo];
                    if stride == 1 {
                        let start = lo + kj - pad;
                        for (d, v) in drow[start..start + hi - lo].iter_mut().zip(&line[lo..hi]) {
                            *d += v;
                        }
                    } else {
                        for ox in lo..hi {
                            drow[ox * stride + kj - pad] += line[ox];
                        }
                    }
                }
            }
        }
    }
}

fn is_pointwise(k: usize, stride: usize, pad: usize) -> bool {
    k == 1 && stride == 1 && pad == 0
}

fn conv_forward(x: &Tensor, w: &Tensor, b: Option<&Tensor>, stride: usize, pad: usize) -> Tensor {
    let (n, cin, h, wd) = x.dims4();
    let (cout, wcin, k, k2) = w.dims4();
    assert_eq!(k, k2, "conv2d: only square kernels");
    assert_eq!(cin, wcin, "conv2d: input has {cin} channels, kernel expects {wcin}");
    let (ho, wo) = (out_size(h, k, stride, pad), out_size(wd, k, stride, pad));
    let (ckk, plane) = (cin * k * k, ho * wo);
    let mut out = vec![0.0; n * cout * plane];
    let mut cols = if is_pointwise(k, stride, pad) { Vec::new() } else { vec![0.0; ckk * plane] };
    for i in 0..n {
        let xi = x.sample(i);
        let dst = &mut out[i * cout * plane..(i + 1) * cout * plane];
        if let Some(b) = b {
            for (row, &bv) in dst.chunks_exact_mut(plane).zip(b.data()) {
                row.fill(bv);
            }
        }
        let src: &[f32] = if cols.is_empty() {
            xi
        } else {
            im2col(xi, cin, h, wd, k, stride, pad, &mut cols);
            &cols
        };
        gemm(cout, ckk, plane, 1.0, w.data(), (ckk, 1), src, (plane, 1), 1.0, dst, (plane, 1));
    }
    Tensor::new(&[n, cout, ho, wo], out)
}

fn conv_backward(x: &Tensor, w: &Tensor, g: &Tensor, stride: usize, pad: usize) -> (Tensor, Tensor, Tensor) {
    let (n, cin, h, wd) = x.dims4();
    let (cout, _, k, _) = w.dims4();
    let (_, _, ho, wo) = g.dims4();
    let (ckk, plane) = (cin * k * k, ho * wo);
    let pointwise = is_pointwise(k, stride, pad);
    let mut dx = vec![0.0; x.len()];
    let mut dw = vec![0.0; w.len()];
    let mut db = vec![0.0; cout];
    let mut cols = if pointwise { Vec::new() } else { vec![0.0; ckk * plane] };
    let mut dcols = vec![0.0; ckk * plane];
    for i in 0..n {
        let gi = g.sample(i);
        for (d, row) in db.iter_mut().zip(gi.chunks_exact(plane)) {
            *d += row.iter().sum::<f32>();
        }
        let xi = x.sample(i);
        let src: &[f32] = if pointwise {
            xi
        } else {
            im2col(xi, cin, h, wd, k, stride, pad, &mut cols);
            &cols
        };
        // dW += dY cols^T
        gemm(cout, plane, ckk, 1.0, gi, (plane, 1), src, (1, plane), 1.0, &mut dw, (ckk, 1));
        // dcols = W^T dY
        gemm(ckk, cout, plane, 1.0, w.data(), (1, ckk), gi, (plane, 1), 0.0, &mut dcols, (plane, 1));
        let dxi = &mut dx[i * cin * h * wd..(i + 1) * cin * h * wd];
        if pointwise {
            dxi.copy_from_slice(&dcols);
        } else {
            col2im(&dcols, cin, h, wd, k, stride, pad, dxi);
        }
    }
    (
        Tensor::new(x.shape(), dx),
        Tensor::new(w.shape(), dw),
        Tensor::new(&[cout], db),
    )
}

fn group_norm_backward(
    x: &Tensor,
    gamma: &Tensor,
    g: &Tensor,
    groups: usize,
    stats: &[(f32, f32)],
) -> (Tensor, Tensor, Tensor) {
    let (_, c, h, w) = x.dims4();
    let hw = h * w;
    let cg = c / groups;
    let per_group = cg * hw;
    let gv = gamma.data();
    let mut dx = vec![0.0; x.len()];
    let mut dgamma = vec![0.0f64; c];
    let mut dbeta = vec![0.0f64; c];
    for (gi, (xs, gs)) in x.data().chunks_exact(per_group).zip(g.data().chunks_exact(per_group)).enumerate() {
        let (mean, rstd) = stats[gi];
        let c0 = (gi % groups) * cg;
        let mut sum_dxhat = 0.0f64;
        let mut sum_dxhat_xhat = 0.0f64;
        for (p, (xp, gp)) in xs.chunks_exact(hw).zip(gs.chunks_exact(hw)).enumerate() {
            let (mut sg, mut sgx) = (0.0f32, 0.0f32);
            for (&xv, &gv_) in xp.iter().zip(gp) {
                sg += gv_;
                sgx += gv_ * (xv - mean) * rstd;
            }
            let ch = c0 + p;
            dgamma[ch] += sgx as f64;
            dbeta[ch] += sg as f64;
            sum_dxhat += (sg * gv[ch]) as f64;
            sum_dxhat_xhat += (sgx * gv[ch]) as f64;
        }
        let m = per_group as f64;
        let a = (sum_dxhat / m) as f32;
        let b = (sum_dxhat_xhat / m) as f32;
        let base = gi * per_group;
        let dst = &mut dx[base..base + per_group];
        for (p, ((xp, gp), dp)) in xs.chunks_exact(hw).zip(gs.chunks_exact(hw)).zip(dst.chunks_exact_mut(hw)).enumerate() {
            let gamma_c = gv[c0 + p];
            for ((&xv, &gv_), d) in xp.iter().zip(gp).zip(dp.iter_mut()) {
                let xhat = (xv - mean) * rstd;
                *d = rstd * (gv_ * gamma_c - a - xhat * b);
            }
        }
    }
    (
        Tensor::new(x.shape(), dx),
        Tensor::new(&[c], dgamma.into_iter().map(|v| v as f32).collect()),
        Tensor::new(&[c], dbeta.into_iter().map(|v| v as f32).collect()),
    )
}

fn attention_dims(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize) -> (usize, usize, usize, usize, usize) {
    let (n, c, hq, wq) = q.dims4();
    let (nk, ck, hk, wk) = k.dims4();
    let (nv, cv, hv, wv) = v.dims4();
    assert_eq!((n, c), (nk, ck), "attention: query/key batch or width mismatch");
    assert_eq!((nk, hk, wk), (nv, hv, wv), "attention: key/value token mismatch");
    assert!(heads > 0 && c % heads == 0 && cv % heads == 0, "attention: heads must divide widths");
    (n, c / heads, cv / heads, hq * wq, hk * wk)
}

pub(crate) fn attention_forward(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize) -> (Tensor, Vec<f32>) {
    let (n, dq, dv, lq, lk) = attention_dims(q, k, v, heads);
    let scale = 1.0 / (dq as f32).sqrt();
    let mut out = vec![0.0; n * heads * dv * lq];
    let mut probs = vec![0.0; n * heads * lq * lk];
    for b in 0..n {
        for h in 0..heads {
            let qh = &q.sample(b)[h * dq * lq..(h + 1) * dq * lq];
            let kh = &k.sample(b)[h * dq * lk..(h + 1) * dq * lk];
            let vh = &v.sample(b)[h * dv * lk..(h + 1) * dv * lk];
            let p = &mut probs[(b * heads + h) * lq * lk..(b * heads + h + 1) * lq * lk];
            // S = Q^T K, Q stored as (dq x lq), K as (dq x lk)
            gemm(lq, dq, lk, scale, qh, (1, lq), kh, (lk, 1), 0.0, p, (lk, 1));
            for row in p.chunks_exact_mut(lk) {
                softmax_in_place(row);
            }
            let oh = &mut out[(b * heads + h) * dv * lq..(b * heads + h + 1) * dv * lq];
            // O (dv x lq) = V (dv x lk) P^T
            gemm(dv, lk, lq, 1.0, vh, (lk, 1), p, (1, lk), 0.0, oh, (lq, 1));
        }
    }
    let (_, _, hq, wq) = q.dims4();
    (Tensor::new(&[n, heads * dv, hq, wq], out), probs)
}

fn attention_backward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    heads: usize,
    probs: &[f32],
    g: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let (n, dq, dv, lq, lk) = attention_dims(q, k, v, heads);
    let scale = 1.0 / (dq as f32).sqrt();
    let mut gq = vec![0.0; q.len()];
    let mut gk = vec![0.0; k.len()];
    let mut gv = vec![0.0; v.len()];
    let mut dp = vec![0.0; lq * lk];
    for b in 0..n {
        for h in 0..heads {
            let qoff = b * heads * dq * lq + h * dq * lq;
            let koff = b * heads * dq * lk + h * dq * lk;
            let voff = b * heads * dv * lk + h * dv * lk;
            let goff = (b * heads + h) * dv * lq;
            let qh = &q.data()[qoff..qoff + dq * lq];
            let kh = &k.data()[koff..koff + dq * lk];
            let vh = &v.data()[voff..voff + dv * lk];
            let gh = &g.data()[goff..goff + dv * lq];
            let p = &probs[(b * heads + h) * lq * lk..(b * heads + h + 1) * lq * lk];
            // dV (dv x lk) = dO (dv x lq) P (lq x lk)
            gemm(dv, lq, lk, 1.0, gh, (lq, 1), p, (lk, 1), 0.0, &mut gv[voff..voff + dv * lk], (lk, 1));
            // dP (lq x lk) = dO^T V
            gemm(lq, dv, lk, 1.0, gh, (1, lq), vh, (lk, 1), 0.0, &mut dp, (lk, 1));
            for (prow, drow) in p.chunks_exact(lk).zip(dp.chunks_exact_mut(lk)) {
                let dot: f32 = prow.iter().zip(drow.iter()).map(|(a, b)| a * b).sum();
                for (d, &pv) in drow.iter_mut().zip(prow) {
                    *d = pv * (*d - dot);
                }
            }
            // dQ (dq x lq) = K dS^T * scale
            gemm(dq, lk, lq, scale, kh, (lk, 1), &dp, (1, lk), 0.0, &mut gq[qoff..qoff + dq * lq], (lq, 1));
            // dK (dq x lk) = Q dS * scale
            gemm(dq, lq, lk, scale, qh, (lq, 1), &dp, (lk, 1), 0.0, &mut gk[koff..koff + dq * lk], (lk, 1));
        }
    }
    (
        Tensor::new(q.shape(), gq),
        Tensor::new(k.shape(), gk),
        Tensor::new(v.shape(), gv),
    )
}

fn softmax_in_place(row: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    row.iter_mut().for_each(|v| *v /= sum);
}
