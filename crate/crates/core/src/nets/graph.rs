//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] is built fresh for every forward pass. Each op appends a node
//! holding its output value and whatever it needs for the backward sweep;
//! [`Graph::backward`] walks the tape in reverse and accumulates gradients.

use std::collections::HashMap;

use super::params::{BufferId, ParamId, ParamStore};
use super::tensor::{gemm, Tensor};
use crate::error::{PecadError, Result};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl ConvGeom {
    pub fn out_size(&self, input: usize, kernel: usize) -> Option<usize> {
        let span = self.dilation * (kernel - 1) + 1;
        (input + 2 * self.padding)
            .checked_sub(span)
            .map(|v| v / self.stride + 1)
    }
}

/// Batch statistics observed in training mode, to be folded into running buffers.
#[derive(Debug, Clone)]
pub struct BnObservation {
    pub mean_buf: BufferId,
    pub var_buf: BufferId,
    pub mean: Vec<f64>,
    pub var_unbiased: Vec<f64>,
}

enum Op {
    Constant,
    Param,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    Relu(Var),
    Sigmoid(Var),
    Add(Var, Var),
    ScaleChannels {
        x: Var,
        s: Var,
    },
    GateSpatial {
        x: Var,
        a: Var,
    },
    GlobalAvgPool(Var),
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Concat(Vec<Var>),
    SliceChannels {
        x: Var,
        start: usize,
    },
    Upsample {
        x: Var,
        table_h: Vec<(usize, usize, f64)>,
        table_w: Vec<(usize, usize, f64)>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

pub struct Graph<'s> {
    store: &'s ParamStore,
    nodes: Vec<Node>,
    train: bool,
    param_vars: HashMap<ParamId, Var>,
    bn_observations: Vec<BnObservation>,
}

impl<'s> Graph<'s> {
    /// `train` selects batch statistics for batch normalisation.
    pub fn new(store: &'s ParamStore, train: bool) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            train,
            param_vars: HashMap::new(),
            bn_observations: Vec::new(),
        }
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn bn_observations(&self) -> &[BnObservation] {
        &self.bn_observations
    }

    pub fn take_bn_observations(&mut self) -> Vec<BnObservation> {
        std::mem::take(&mut self.bn_observations)
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let value = self.store.param(id).clone();
        let v = self.push(value, Op::Param);
        self.param_vars.insert(id, v);
        v
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom) -> Result<Var> {
        let (n, cin, h, wd) = self.value(x).dims4()?;
        let (cout, cin_g, kh, kw) = self.value(w).dims4()?;
        if geom.groups == 0 || cin % geom.groups != 0 || cout % geom.groups != 0 {
            return Err(PecadError::Shape(format!(
                "conv groups {} incompatible with {cin}->{cout} channels",
                geom.groups
            )));
        }
        if cin / geom.groups != cin_g {
            return Err(PecadError::Shape(format!(
                "conv expects {} input channels per group, weight has {cin_g}",
                cin / geom.groups
            )));
        }
        let (oh, ow) = match (geom.out_size(h, kh), geom.out_size(wd, kw)) {
            (Some(a), Some(b)) if a > 0 && b > 0 => (a, b),
            _ => {
                return Err(PecadError::Shape(format!(
                    "conv kernel {kh}x{kw} does not fit input {h}x{wd}"
                )))
            }
        };
        if let Some(b) = b {
            if self.value(b).shape() != [cout] {
                return Err(PecadError::Shape("conv bias length mismatch".into()));
            }
        }
        let cout_g = cout / geom.groups;
        let ckk = cin_g * kh * kw;
        let p = oh * ow;
        let mut out = vec![0.0; n * cout * p];
        let mut cols = vec![0.0; ckk * p];
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            for ni in 0..n {
                for g in 0..geom.groups {
                    let xs = &xv[(ni * cin + g * cin_g) * h * wd..(ni * cin + (g + 1) * cin_g) * h * wd];
                    im2col(xs, cin_g, h, wd, kh, kw, oh, ow, geom, &mut cols);
                    let wg = &wv[g * cout_g * ckk..(g + 1) * cout_g * ckk];
                    let og = &mut out[(ni * cout + g * cout_g) * p..(ni * cout + (g + 1) * cout_g) * p];
                    gemm(cout_g, ckk, p, wg, false, &cols, false, og, false);
                }
            }
            if let Some(b) = b {
                let bv = self.value(b).data();
                for ni in 0..n {
                    for (co, &bias) in bv.iter().enumerate() {
                        for o in &mut out[(ni * cout + co) * p..(ni * cout + co + 1) * p] {
                            *o += bias;
                        }
                    }
                }
            }
        }
        let value = Tensor::new(vec![n, cout, oh, ow], out)?;
        Ok(self.push(value, Op::Conv2d { x, w, b, geom }))
    }

    /// Batch normalisation over `(N, H, W)` per channel. In training mode the
    /// batch statistics are used and recorded; otherwise the running buffers.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: BufferId,
        running_var: BufferId,
    ) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return Err(PecadError::Shape("batch-norm affine length mismatch".into()));
        }
        let hw = h * w;
        let m = (n * hw) as f64;
        let xv = self.value(x).data();
        let (mean, var) = if self.train {
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for ci in 0..c {
                let mut s = 0.0;
                for ni in 0..n {
                    s += xv[(ni * c + ci) * hw..(ni * c + ci + 1) * hw].iter().sum::<f64>();
                }
                let mu = s / m;
                let mut ss = 0.0;
                for ni in 0..n {
                    for &v in &xv[(ni * c + ci) * hw..(ni * c + ci + 1) * hw] {
                        ss += (v - mu) * (v - mu);
                    }
                }
                mean[ci] = mu;
                var[ci] = ss / m;
            }
            (mean, var)
        } else {
            (
                self.store.buffer(running_mean).data().to_vec(),
                self.store.buffer(running_var).data().to_vec(),
            )
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * hw;
                for i in base..base + hw {
                    let xh = (xv[i] - mean[ci]) * inv_std[ci];
                    xhat[i] = xh;
                    out[i] = gv[ci] * xh + bv[ci];
                }
            }
        }
        if self.train {
            let correction = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
            self.bn_observations.push(BnObservation {
                mean_buf: running_mean,
                var_buf: running_var,
                mean,
                var_unbiased: var.iter().map(|v| v * correction).collect(),
            });
        }
        let value = Tensor::new(vec![n, c, h, w], out)?;
        let batch_stats = self.train;
        Ok(self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(0.0));
        self.push(value, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(sigmoid);
        self.push(value, Op::Sigmoid(x))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(PecadError::Shape(format!(
                "add of {:?} and {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        Ok(self.push(value, Op::Add(a, b)))
    }

    /// `x[n, c, :, :] * s[n, c]`.
    pub fn scale_channels(&mut self, x: Var, s: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if self.value(s).shape() != [n, c] {
            return Err(PecadError::Shape("channel scale shape mismatch".into()));
        }
        let hw = h * w;
        let sv = self.value(s).data();
        let mut out = self.value(x).data().to_vec();
        for (i, chunk) in out.chunks_mut(hw).enumerate() {
            for v in chunk {
                *v *= sv[i];
            }
        }
        let value = Tensor::new(vec![n, c, h, w], out)?;
        Ok(self.push(value, Op::ScaleChannels { x, s }))
    }

    /// `x[n, c, i, j] * a[n, 0, i, j]`.
    pub fn gate_spatial(&mut self, x: Var, a: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if self.value(a).shape() != [n, 1, h, w] {
            return Err(PecadError::Shape(format!(
                "attention map {:?} does not match features {:?}",
                self.value(a).shape(),
                [n, c, h, w]
            )));
        }
        let hw = h * w;
        let av = self.value(a).data();
        let mut out = self.value(x).data().to_vec();
        for ni in 0..n {
            let gate = &av[ni * hw..(ni + 1) * hw];
            for ci in 0..c {
                let base = (ni * c + ci) * hw;
                for (o, g) in out[base..base + hw].iter_mut().zip(gate) {
                    *o *= g;
                }
            }
        }
        let value = Tensor::new(vec![n, c, h, w], out)?;
        Ok(self.push(value, Op::GateSpatial { x, a }))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let hw = h * w;
        let out: Vec<f64> = self
            .value(x)
            .data()
            .chunks(hw)
            .map(|ch| ch.iter().sum::<f64>() / hw as f64)
            .collect();
        let value = Tensor::new(vec![n, c], out)?;
        Ok(self.push(value, Op::GlobalAvgPool(x)))
    }

    /// `x[n, in] · w[out, in]ᵀ + b[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (n, fin) = self.value(x).dims2()?;
        let (fout, win) = self.value(w).dims2()?;
        if win != fin || self.value(b).shape() != [fout] {
            return Err(PecadError::Shape(format!(
                "linear {fin} -> weight {:?}",
                self.value(w).shape()
            )));
        }
        let mut out = vec![0.0; n * fout];
        gemm(
            n,
            fin,
            fout,
            self.value(x).data(),
            false,
            self.value(w).data(),
            true,
            &mut out,
            false,
        );
        let bv = self.value(b).data();
        for row in out.chunks_mut(fout) {
            for (o, bias) in row.iter_mut().zip(bv) {
                *o += bias;
            }
        }
        let value = Tensor::new(vec![n, fout], out)?;
        Ok(self.push(value, Op::Linear { x, w, b }))
    }

    /// Channel concatenation of NCHW tensors.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let (n, _, h, w) = self
            .value(*parts.first().ok_or_else(|| PecadError::Shape("empty concat".into()))?)
            .dims4()?;
        let mut total_c = 0;
        for &p in parts {
            let (pn, pc, ph, pw) = self.value(p).dims4()?;
            if (pn, ph, pw) != (n, h, w) {
                return Err(PecadError::Shape(format!(
                    "concat spatial mismatch: {:?} vs {:?}",
                    self.value(p).shape(),
                    [n, pc, h, w]
                )));
            }
            total_c += pc;
        }
        let hw = h * w;
        let mut out = Vec::with_capacity(n * total_c * hw);
        for ni in 0..n {
            for &p in parts {
                let t = self.value(p);
                let pc = t.shape()[1];
                out.extend_from_slice(&t.data()[ni * pc * hw..(ni + 1) * pc * hw]);
            }
        }
        let value = Tensor::new(vec![n, total_c, h, w], out)?;
        Ok(self.push(value, Op::Concat(parts.to_vec())))
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if start + len > c || len == 0 {
            return Err(PecadError::Shape(format!(
                "channel slice {start}..{} out of {c}",
                start + len
            )));
        }
        let hw = h * w;
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(n * len * hw);
        for ni in 0..n {
            out.extend_from_slice(&xv[(ni * c + start) * hw..(ni * c + start + len) * hw]);
        }
        let value = Tensor::new(vec![n, len, h, w], out)?;
        Ok(self.push(value, Op::SliceChannels { x, start }))
    }

    /// Bilinear resize (half-pixel centres, edge clamped).
    pub fn upsample_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if out_h == 0 || out_w == 0 {
            return Err(PecadError::Shape("upsample to empty size".into()));
        }
        let table_h = interp_table(h, out_h);
        let table_w = interp_table(w, out_w);
        let xv = self.value(x).data();
        let mut out = vec![0.0; n * c * out_h * out_w];
        for plane in 0..n * c {
            let src = &xv[plane * h * w..(plane + 1) * h * w];
            let dst = &mut out[plane * out_h * out_w..(plane + 1) * out_h * out_w];
            for (oy, &(y0, y1, ly)) in table_h.iter().enumerate() {
                for (ox, &(x0, x1, lx)) in table_w.iter().enumerate() {
                    let top = src[y0 * w + x0] * (1.0 - lx) + src[y0 * w + x1] * lx;
                    let bot = src[y1 * w + x0] * (1.0 - lx) + src[y1 * w + x1] * lx;
                    dst[oy * out_w + ox] = top * (1.0 - ly) + bot * ly;
                }
            }
        }
        let value = Tensor::new(vec![n, c, out_h, out_w], out)?;
        Ok(self.push(
            value,
            Op::Upsample {
                x,
                table_h,
                table_w,
            },
        ))
    }

    /// Reverse sweep from `output`, seeded with `seed` (same shape as the output).
    pub fn backward(&self, output: Var, seed: Tensor) -> Result<Gradients> {
        if seed.shape() != self.value(output).shape() {
            return Err(PecadError::Shape(format!(
                "backward seed {:?} for output {:?}",
                seed.shape(),
                self.value(output).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        grads[output.0] = Some(seed);
        for idx in (0..=output.0).rev() {
            let Some(gy) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Constant | Op::Param => {
                    grads[idx] = Some(gy);
                }
                Op::Conv2d { x, w, b, geom } => {
                    let (dx, dw, db) = self.conv_backward(*x, *w, b.is_some(), *geom, &gy);
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *w, dw);
                    if let (Some(b), Some(db)) = (b, db) {
                        accumulate(&mut grads, *b, db);
                    }
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                    batch_stats,
                } => {
                    let (n, c, h, w) = gy.dims4()?;
                    let hw = h * w;
                    let m = (n * hw) as f64;
                    let gv = self.value(*gamma).data();
                    let g = gy.data();
                    let mut dgamma = vec![0.0; c];
                    let mut dbeta = vec![0.0; c];
                    for ni in 0..n {
                        for ci in 0..c {
                            let base = (ni * c + ci) * hw;
                            for i in base..base + hw {
                                dgamma[ci] += g[i] * xhat[i];
                                dbeta[ci] += g[i];
                            }
                        }
                    }
                    let mut dx = vec![0.0; g.len()];
                    for ni in 0..n {
                        for ci in 0..c {
                            let base = (ni * c + ci) * hw;
                            let scale = gv[ci] * inv_std[ci];
                            for i in base..base + hw {
                                dx[i] = if *batch_stats {
                                    scale * (g[i] - dbeta[ci] / m - xhat[i] * dgamma[ci] / m)
                                } else {
                                    scale * g[i]
                                };
                            }
                        }
                    }
                    accumulate(&mut grads, *x, Tensor::new(gy.shape().to_vec(), dx)?);
                    accumulate(&mut grads, *gamma, Tensor::new(vec![c], dgamma)?);
                    accumulate(&mut grads, *beta, Tensor::new(vec![c], dbeta)?);
                }
                Op::Relu(x) => {
                    let xv = self.value(*x).data();
                    let mut d = gy;
                    for (g, &v) in d.data_mut().iter_mut().zip(xv) {
                        if v <= 0.0 {
                            *g = 0.0;
                        }
                    }
                    accumulate(&mut grads, *x, d);
                }
                Op::Sigmoid(x) => {
                    let yv = node.value.data();
                    let mut d = gy;
                    for (g, &y) in d.data_mut().iter_mut().zip(yv) {
                        *g *= y * (1.0 - y);
                    }
                    accumulate(&mut grads, *x, d);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *b, gy.clone());
                    accumulate(&mut grads, *a, gy);
                }
                Op::ScaleChannels { x, s } => {
                    let xt = self.value(*x);
                    let (n, c, h, w) = xt.dims4()?;
                    let hw = h * w;
                    let sv = self.value(*s).data();
                    let mut dx = gy.clone();
                    let mut ds = vec![0.0; n * c];
                    for (i, chunk) in dx.data_mut().chunks_mut(hw).enumerate() {
                        let xs = &xt.data()[i * hw..(i + 1) * hw];
                        ds[i] = chunk.iter().zip(xs).map(|(g, x)| g * x).sum();
                        for v in chunk {
                            *v *= sv[i];
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *s, Tensor::new(vec![n, c], ds)?);
                }
                Op::GateSpatial { x, a } => {
                    let xt = self.value(*x);
                    let (n, c, h, w) = xt.dims4()?;
                    let hw = h * w;
                    let av = self.value(*a).data();
                    let g = gy.data();
                    let mut dx = vec![0.0; g.len()];
                    let mut da = vec![0.0; n * hw];
                    for ni in 0..n {
                        for ci in 0..c {
                            let base = (ni * c + ci) * hw;
                            for j in 0..hw {
                                dx[base + j] = g[base + j] * av[ni * hw + j];
                                da[ni * hw + j] += g[base + j] * xt.data()[base + j];
                            }
                        }
                    }
                    accumulate(&mut grads, *x, Tensor::new(xt.shape().to_vec(), dx)?);
                    accumulate(&mut grads, *a, Tensor::new(vec![n, 1, h, w], da)?);
                }
                Op::GlobalAvgPool(x) => {
                    let shape = self.value(*x).shape().to_vec();
                    let hw = shape[2] * shape[3];
                    let mut dx = Vec::with_capacity(hw * gy.numel());
                    for &g in gy.data() {
                        dx.extend(std::iter::repeat_n(g / hw as f64, hw));
                    }
                    accumulate(&mut grads, *x, Tensor::new(shape, dx)?);
                }
                Op::Linear { x, w, b } => {
                    let (n, fin) = self.value(*x).dims2()?;
                    let fout = self.value(*b).numel();
                    let mut dx = vec![0.0; n * fin];
                    gemm(n, fout, fin, gy.data(), false, self.value(*w).data(), false, &mut dx, false);
                    let mut dw = vec![0.0; fout * fin];
                    gemm(fout, n, fin, gy.data(), true, self.value(*x).data(), false, &mut dw, false);
                    let mut db = vec![0.0; fout];
                    for row in gy.data().chunks(fout) {
                        for (d, g) in db.iter_mut().zip(row) {
                            *d += g;
                        }
                    }
                    accumulate(&mut grads, *x, Tensor::new(vec![n, fin], dx)?);
                    accumulate(&mut grads, *w, Tensor::new(vec![fout, fin], dw)?);
                    accumulate(&mut grads, *b, Tensor::new(vec![fout], db)?);
                }
                Op::Concat(parts) => {
                    let (n, total_c, h, w) = gy.dims4()?;
                    let hw = h * w;
                    let mut offset = 0;
                    for &p in parts {
                        let pc = self.value(p).shape()[1];
                        let mut d = Vec::with_capacity(n * pc * hw);
                        for ni in 0..n {
                            let base = (ni * total_c + offset) * hw;
                            d.extend_from_slice(&gy.data()[base..base + pc * hw]);
                        }
                        accumulate(&mut grads, p, Tensor::new(vec![n, pc, h, w], d)?);
                        offset += pc;
                    }
                }
                Op::SliceChannels { x, start } => {
                    let shape = self.value(*x).shape().to_vec();
                    let (n, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
                    let len = gy.shape()[1];
                    let mut dx = vec![0.0; n * c * hw];
                    for ni in 0..n {
                        let dst = (ni * c + start) * hw;
                        dx[dst..dst + len * hw]
                            .copy_from_slice(&gy.data()[ni * len * hw..(ni + 1) * len * hw]);
                    }
                    accumulate(&mut grads, *x, Tensor::new(shape, dx)?);
                }
                Op::Upsample {
                    x,
                    table_h,
                    table_w,
                } => {
                    let shape = self.value(*x).shape().to_vec();
                    let (h, w) = (shape[2], shape[3]);
                    let (oh, ow) = (table_h.len(), table_w.len());
                    let planes = shape[0] * shape[1];
                    let mut dx = vec![0.0; planes * h * w];
                    for plane in 0..planes {
                        let g = &gy.data()[plane * oh * ow..(plane + 1) * oh * ow];
                        let d = &mut dx[plane * h * w..(plane + 1) * h * w];
                        for (oy, &(y0, y1, ly)) in table_h.iter().enumerate() {
                            for (ox, &(x0, x1, lx)) in table_w.iter().enumerate() {
                                let v = g[oy * ow + ox];
                                d[y0 * w + x0] += v * (1.0 - ly) * (1.0 - lx);
                                d[y0 * w + x1] += v * (1.0 - ly) * lx;
                                d[y1 * w + x0] += v * ly * (1.0 - lx);
                                d[y1 * w + x1] += v * ly * lx;
                            }
                        }
                    }
                    accumulate(&mut grads, *x, Tensor::new(shape, dx)?);
                }
            }
        }
        let param_grads = self
            .param_vars
            .iter()
            .filter_map(|(&id, &v)| grads.get(v.0).and_then(|g| g.clone()).map(|g| (id, g)))
            .collect();
        Ok(Gradients {
            by_var: grads,
            by_param: param_grads,
        })
    }

    fn conv_backward(
        &self,
        x: Var,
        w: Var,
        has_bias: bool,
        geom: ConvGeom,
        gy: &Tensor,
    ) -> (Tensor, Tensor, Option<Tensor>) {
        let xt = self.value(x);
        let wt = self.value(w);
        let (n, cin, h, wd) = xt.dims4().expect("checked in forward");
        let (cout, cin_g, kh, kw) = wt.dims4().expect("checked in forward");
        let (_, _, oh, ow) = gy.dims4().expect("conv output is NCHW");
        let cout_g = cout / geom.groups;
        let ckk = cin_g * kh * kw;
        let p = oh * ow;
        let mut dx = vec![0.0; xt.numel()];
        let mut dw = vec![0.0; wt.numel()];
        let mut cols = vec![0.0; ckk * p];
        let mut dcols = vec![0.0; ckk * p];
        let gyv = gy.data();
        for ni in 0..n {
            for g in 0..geom.groups {
                let xoff = (ni * cin + g * cin_g) * h * wd;
                let xs = &xt.data()[xoff..xoff + cin_g * h * wd];
                im2col(xs, cin_g, h, wd, kh, kw, oh, ow, geom, &mut cols);
                let gyg = &gyv[(ni * cout + g * cout_g) * p..(ni * cout + (g + 1) * cout_g) * p];
                let dwg = &mut dw[g * cout_g * ckk..(g + 1) * cout_g * ckk];
                gemm(cout_g, p, ckk, gyg, false, &cols, true, dwg, true);
                let wg = &wt.data()[g * cout_g * ckk..(g + 1) * cout_g * ckk];
                gemm(ckk, cout_g, p, wg, true, gyg, false, &mut dcols, false);
                col2im(&dcols, cin_g, h, wd, kh, kw, oh, ow, geom, &mut dx[xoff..xoff + cin_g * h * wd]);
            }
        }
        let db = has_bias.then(|| {
            let mut db = vec![0.0; cout];
            for ni in 0..n {
                for (co, d) in db.iter_mut().enumerate() {
                    *d += gyv[(ni * cout + co) * p..(ni * cout + co + 1) * p].iter().sum::<f64>();
                }
            }
            Tensor::new(vec![cout], db).expect("bias length")
        });
        (
            Tensor::new(xt.shape().to_vec(), dx).expect("same shape"),
            Tensor::new(wt.shape().to_vec(), dw).expect("same shape"),
            db,
        )
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn interp_table(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            let l = if i1 == i0 { 0.0 } else { src - i0 as f64 };
            (i0, i1, l)
        })
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &[f64],
    channels: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    geom: ConvGeom,
    cols: &mut [f64],
) {
    let p = oh * ow;
    let (s, pad, d) = (geom.stride as isize, geom.padding as isize, geom.dilation as isize);
    for c in 0..channels {
        let plane = &x[c * h * w..(c + 1) * h * w];
        for i in 0..kh {
            for j in 0..kw {
                let row = &mut cols[((c * kh + i) * kw + j) * p..((c * kh + i) * kw + j + 1) * p];
                for oy in 0..oh {
                    let iy = oy as isize * s - pad + i as isize * d;
                    let dst = &mut row[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    let off = j as isize * d - pad;
                    for (ox, v) in dst.iter_mut().enumerate() {
                        let ix = ox as isize * s + off;
                        *v = if ix < 0 || ix >= w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im(
    cols: &[f64],
    channels: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    geom: ConvGeom,
    dx: &mut [f64],
) {
    let p = oh * ow;
    let (s, pad, d) = (geom.stride as isize, geom.padding as isize, geom.dilation as isize);
    for c in 0..channels {
        let plane = &mut dx[c * h * w..(c + 1) * h * w];
        for i in 0..kh {
            for j in 0..kw {
                let row = &cols[((c * kh + i) * kw + j) * p..((c * kh + i) * kw + j + 1) * p];
                for oy in 0..oh {
                    let iy = oy as isize * s - pad + i as isize * d;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    let off = j as isize * d - pad;
                    for (ox, &v) in row[oy * ow..(oy + 1) * ow].iter().enumerate() {
                        let ix = ox as isize * s + off;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Result of a backward sweep.
pub struct Gradients {
    by_var: Vec<Option<Tensor>>,
    by_param: HashMap<ParamId, Tensor>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.by_var.get(v.0).and_then(Option::as_ref)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.by_param.get(&id)
    }

    /// Gradients aligned with the store's parameter order; unused parameters get zeros.
    pub fn dense(&self, store: &ParamStore) -> Vec<Tensor> {
        store
            .params()
            .iter()
            .enumerate()
            .map(|(i, p)| {
                self.by_param
                    .get(&ParamId(i))
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(p.shape()))
            })
            .collect()
    }
}

/// Fold recorded batch statistics into the store's running buffers.
pub fn apply_bn_observations(store: &mut ParamStore, observations: &[BnObservation]) {
    for obs in observations {
        for (r, &m) in store.buffer_mut(obs.mean_buf).data_mut().iter_mut().zip(&obs.mean) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
        }
        for (r, &v) in store.buffer_mut(obs.var_buf).data_mut().iter_mut().zip(&obs.var_unbiased) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v;
        }
    }
}
