//! Reverse-mode differentiation over a recorded tape of tensor operations.
//!
//! A [`Graph`] borrows a [`ParameterStore`] immutably, records every
//! operation applied during a forward pass and, in [`Mode::Train`], can
//! replay the tape backwards to produce [`Gradients`]. Parameters used more
//! than once (shared branches) enter the tape once and accumulate gradient
//! from every use.

use std::collections::HashMap;

use super::{ParamId, ParameterStore, Scalar, Tensor};
use crate::error::{Error, Result};

/// Batch-norm variance floor.
pub const BN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Batch statistics in batch norm; the tape can be differentiated.
    Train,
    /// Running statistics in batch norm; forward only.
    Infer,
}

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Batch statistics observed by one batch-norm node in train mode.
#[derive(Clone, Debug)]
pub struct RunningStatUpdate<T> {
    pub mean: ParamId,
    pub var: ParamId,
    pub batch_mean: Vec<T>,
    pub batch_var: Vec<T>,
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    ci: usize,
    co: usize,
    d: usize,
    h: usize,
    w: usize,
    kd: usize,
    kh: usize,
    kw: usize,
}

impl ConvGeom {
    fn k(&self) -> usize {
        self.ci * self.kd * self.kh * self.kw
    }

    fn p(&self) -> usize {
        self.d * self.h * self.w
    }

    fn pointwise(&self) -> bool {
        self.kd == 1 && self.kh == 1 && self.kw == 1
    }
}

enum Op<T> {
    Leaf,
    Param(ParamId),
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    Depthwise {
        x: Var,
        w: Var,
        b: Option<Var>,
        k: usize,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    MaxPool {
        x: Var,
        argmax: Vec<u32>,
    },
    AvgPool {
        x: Var,
    },
    Upsample {
        x: Var,
    },
    Sigmoid {
        x: Var,
    },
    Tanh {
        x: Var,
    },
    Relu {
        x: Var,
    },
    Swish {
        x: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Concat {
        parts: Vec<Var>,
    },
    Slice {
        x: Var,
        start: usize,
    },
    GlobalAvgPool {
        x: Var,
    },
    Stack {
        parts: Vec<Var>,
    },
    Select {
        x: Var,
        t: usize,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`].
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    params: Vec<(ParamId, Tensor<T>)>,
    leaves: HashMap<Var, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.params.iter().map(|(id, g)| (*id, g))
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.iter().find(|(p, _)| *p == id).map(|(_, g)| g)
    }

    pub fn param_mut(&mut self, id: ParamId) -> Option<&mut Tensor<T>> {
        self.params.iter_mut().find(|(p, _)| *p == id).map(|(_, g)| g)
    }

    /// Multiplies every gradient by `s`.
    pub fn scale(&mut self, s: T) {
        for (_, g) in &mut self.params {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
        for g in self.leaves.values_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }

    /// Gradient with respect to an input created by [`Graph::input_with_grad`].
    pub fn wrt(&self, var: Var) -> Option<&Tensor<T>> {
        self.leaves.get(&var)
    }
}

/// A forward tape over tensors of element type `T`.
pub struct Graph<'p, T: Scalar> {
    store: &'p ParameterStore<T>,
    mode: Mode,
    nodes: Vec<Node<T>>,
    param_vars: HashMap<ParamId, Var>,
    stats: Vec<RunningStatUpdate<T>>,
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    if a.len() != b.len() {
        return None;
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Some(x),
            (1, _) => Some(y),
            (_, 1) => Some(x),
            _ => None,
        })
        .collect()
}

/// For each output element, the flat index of the broadcast operand.
fn broadcast_index(src: &[usize], out: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let mut strides = vec![0usize; rank];
    let mut acc = 1;
    for d in (0..rank).rev() {
        strides[d] = if src[d] == 1 { 0 } else { acc };
        acc *= src[d];
    }
    let total: usize = out.iter().product();
    let mut idx = vec![0usize; total];
    let mut counter = vec![0usize; rank];
    let mut flat = 0usize;
    for slot in idx.iter_mut() {
        *slot = flat;
        for d in (0..rank).rev() {
            counter[d] += 1;
            flat += strides[d];
            if counter[d] < out[d] {
                break;
            }
            flat -= strides[d] * counter[d];
            counter[d] = 0;
        }
    }
    idx
}

/// Applies `f` element-wise over two broadcast operands. Adjacent axes with
/// the same broadcast pattern are merged so the inner loop stays long.
fn broadcast_zip<T: Scalar>(sa: &[usize], sb: &[usize], out: &[usize], av: &[T], bv: &[T], f: impl Fn(T, T) -> T) -> Vec<T> {
    let strides = |src: &[usize]| {
        let mut st = vec![0usize; src.len()];
        let mut acc = 1;
        for d in (0..src.len()).rev() {
            st[d] = if src[d] == 1 { 0 } else { acc };
            acc *= src[d];
        }
        st
    };
    let (st_a, st_b) = (strides(sa), strides(sb));
    // (extent, stride a, stride b) with mergeable neighbours collapsed.
    let mut dims: Vec<(usize, usize, usize)> = Vec::new();
    for d in 0..out.len() {
        if out[d] == 1 {
            continue;
        }
        if let Some(last) = dims.last_mut() {
            let same_a = (last.1 == 0) == (st_a[d] == 0);
            let same_b = (last.2 == 0) == (st_b[d] == 0);
            if same_a && same_b && last.1 == st_a[d] * out[d] && last.2 == st_b[d] * out[d] {
                *last = (last.0 * out[d], st_a[d], st_b[d]);
                continue;
            }
        }
        dims.push((out[d], st_a[d], st_b[d]));
    }
    if dims.is_empty() {
        dims.push((1, 0, 0));
    }
    let total: usize = out.iter().product();
    let mut res = Vec::with_capacity(total);
    let (inner, ia_step, ib_step) = *dims.last().expect("non-empty");
    let outer = &dims[..dims.len() - 1];
    let mut counter = vec![0usize; outer.len()];
    let (mut ia, mut ib) = (0usize, 0usize);
    loop {
        match (ia_step, ib_step) {
            (1, 1) => res.extend(av[ia..ia + inner].iter().zip(&bv[ib..ib + inner]).map(|(&x, &y)| f(x, y))),
            (1, 0) => res.extend(av[ia..ia + inner].iter().map(|&x| f(x, bv[ib]))),
            (0, 1) => res.extend(bv[ib..ib + inner].iter().map(|&y| f(av[ia], y))),
            _ => res.extend((0..inner).map(|i| f(av[ia + i * ia_step], bv[ib + i * ib_step]))),
        }
        let mut d = outer.len();
        loop {
            if d == 0 {
                return res;
            }
            d -= 1;
            counter[d] += 1;
            ia += outer[d].1;
            ib += outer[d].2;
            if counter[d] < outer[d].0 {
                break;
            }
            ia -= outer[d].1 * counter[d];
            ib -= outer[d].2 * counter[d];
            counter[d] = 0;
        }
    }
}

fn im2col<T: Scalar>(g: &ConvGeom, x: &[T], cols: &mut [T]) {
    let p = g.p();
    let (pd, ph, pw) = ((g.kd / 2) as isize, (g.kh / 2) as isize, (g.kw / 2) as isize);
    let mut row = 0;
    for c in 0..g.ci {
        for kz in 0..g.kd {
            let oz = kz as isize - pd;
            for ky in 0..g.kh {
                let oy = ky as isize - ph;
                for kx in 0..g.kw {
                    let ox = kx as isize - pw;
                    let lo = (-ox).max(0) as usize;
                    let hi = (g.w as isize - ox).clamp(0, g.w as isize) as usize;
                    let dst_row = &mut cols[row * p..(row + 1) * p];
                    for z in 0..g.d {
                        let sz = z as isize + oz;
                        for y in 0..g.h {
                            let sy = y as isize + oy;
                            let dst = &mut dst_row[(z * g.h + y) * g.w..(z * g.h + y + 1) * g.w];
                            if sz < 0 || sz >= g.d as isize || sy < 0 || sy >= g.h as isize || hi <= lo {
                                dst.fill(T::zero());
                                continue;
                            }
                            let base = ((c * g.d + sz as usize) * g.h + sy as usize) * g.w;
                            dst[..lo].fill(T::zero());
                            dst[hi..].fill(T::zero());
                            let s0 = (lo as isize + ox) as usize;
                            dst[lo..hi].copy_from_slice(&x[base + s0..base + s0 + (hi - lo)]);
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

fn col2im<T: Scalar>(g: &ConvGeom, cols: &[T], dx: &mut [T]) {
    let p = g.p();
    let (pd, ph, pw) = ((g.kd / 2) as isize, (g.kh / 2) as isize, (g.kw / 2) as isize);
    let mut row = 0;
    for c in 0..g.ci {
        for kz in 0..g.kd {
            let oz = kz as isize - pd;
            for ky in 0..g.kh {
                let oy = ky as isize - ph;
                for kx in 0..g.kw {
                    let ox = kx as isize - pw;
                    let lo = (-ox).max(0) as usize;
                    let hi = (g.w as isize - ox).clamp(0, g.w as isize) as usize;
                    let src_row = &cols[row * p..(row + 1) * p];
                    row += 1;
                    if hi <= lo {
                        continue;
                    }
                    for z in 0..g.d {
                        let sz = z as isize + oz;
                        if sz < 0 || sz >= g.d as isize {
                            continue;
                        }
                        for y in 0..g.h {
                            let sy = y as isize + oy;
                            if sy < 0 || sy >= g.h as isize {
                                continue;
                            }
                            let src = &src_row[(z * g.h + y) * g.w..(z * g.h + y + 1) * g.w];
                            let base = ((c * g.d + sz as usize) * g.h + sy as usize) * g.w;
                            let s0 = (lo as isize + ox) as usize;
                            for (d, &s) in dx[base + s0..base + s0 + (hi - lo)]
                                .iter_mut()
                                .zip(&src[lo..hi])
                            {
                                *d += s;
                            }
                        }
                    }
                }
            }
        }
    }
}

impl<'p, T: Scalar> Graph<'p, T> {
    pub fn new(store: &'p ParameterStore<T>, mode: Mode) -> Self {
        Graph {
            store,
            mode,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            stats: Vec::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &'p ParameterStore<T> {
        self.store
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Batch statistics recorded by batch-norm nodes during a train-mode pass.
    pub fn running_stat_updates(&self) -> &[RunningStatUpdate<T>] {
        &self.stats
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = self.mode == Mode::Train
            && match op {
                Op::Leaf | Op::Param(_) => false,
                _ => inputs.iter().any(|v| self.nodes[v.0].requires_grad),
            };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A constant input; no gradient is tracked for it.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, &[])
    }

    /// An input whose gradient is reported by [`Gradients::wrt`].
    pub fn input_with_grad(&mut self, value: Tensor<T>) -> Var {
        let v = self.push(value, Op::Leaf, &[]);
        self.nodes[v.0].requires_grad = self.mode == Mode::Train;
        v
    }

    /// Places a stored parameter on the tape (once per graph).
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let value = self.store.value(id).clone();
        let v = self.push(value, Op::Param(id), &[]);
        self.nodes[v.0].requires_grad = self.mode == Mode::Train && self.store.is_trainable(id);
        self.param_vars.insert(id, v);
        v
    }

    /// "Same"-padded, stride-1 convolution over `[N,C,H,W]` or `[N,C,T,H,W]`
    /// inputs with a kernel of matching rank and odd spatial extents.
    pub fn conv(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let (geom, out_shape) = match (xs.len(), ws.len()) {
            (4, 4) => (
                ConvGeom {
                    ci: xs[1],
                    co: ws[0],
                    d: 1,
                    h: xs[2],
                    w: xs[3],
                    kd: 1,
                    kh: ws[2],
                    kw: ws[3],
                },
                vec![xs[0], ws[0], xs[2], xs[3]],
            ),
            (5, 5) => (
                ConvGeom {
                    ci: xs[1],
                    co: ws[0],
                    d: xs[2],
                    h: xs[3],
                    w: xs[4],
                    kd: ws[2],
                    kh: ws[3],
                    kw: ws[4],
                },
                vec![xs[0], ws[0], xs[2], xs[3], xs[4]],
            ),
            _ => {
                return Err(Error::shape(
                    "conv",
                    format!("input {xs:?} incompatible with kernel {ws:?}"),
                ))
            }
        };
        if ws[1] != geom.ci {
            return Err(Error::shape(
                "conv",
                format!("kernel expects {} input channels, input has {}", ws[1], geom.ci),
            ));
        }
        if geom.kd % 2 == 0 || geom.kh % 2 == 0 || geom.kw % 2 == 0 {
            return Err(Error::shape("conv", format!("kernel {ws:?} has an even extent")));
        }
        if let Some(b) = b {
            if self.shape(b) != [geom.co] {
                return Err(Error::shape(
                    "conv",
                    format!("bias shape {:?}, expected [{}]", self.shape(b), geom.co),
                ));
            }
        }
        let n = xs[0];
        let (k, p) = (geom.k(), geom.p());
        let mut out = vec![T::zero(); n * geom.co * p];
        let mut cols = if geom.pointwise() {
            Vec::new()
        } else {
            vec![T::zero(); k * p]
        };
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            for s in 0..n {
                let xs_n = &xv[s * geom.ci * p..(s + 1) * geom.ci * p];
                let out_n = &mut out[s * geom.co * p..(s + 1) * geom.co * p];
                let cols_ref: &[T] = if geom.pointwise() {
                    xs_n
                } else {
                    im2col(&geom, xs_n, &mut cols);
                    &cols
                };
                T::gemm(false, false, geom.co, k, p, T::one(), wv, cols_ref, T::zero(), out_n);
                if let Some(b) = b {
                    let bv = self.value(b).data();
                    for (o, row) in out_n.chunks_exact_mut(p).enumerate() {
                        let bias = bv[o];
                        row.iter_mut().for_each(|v| *v += bias);
                    }
                }
            }
        }
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(Tensor::new(&out_shape, out), Op::Conv { x, w, b, geom }, &inputs))
    }

    /// Per-channel "same"-padded 2D convolution; kernel `[C, 1, k, k]`.
    pub fn depthwise_conv(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 || ws[0] != xs[1] || ws[1] != 1 || ws[2] != ws[3] || ws[2].is_multiple_of(2) {
            return Err(Error::shape(
                "depthwise_conv",
                format!("input {xs:?} incompatible with kernel {ws:?}"),
            ));
        }
        let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let k = ws[2];
        let pad = (k / 2) as isize;
        let mut out = vec![T::zero(); n * c * h * wd];
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            let bv = b.map(|b| self.value(b).data());
            for s in 0..n {
                for ch in 0..c {
                    let plane = &xv[(s * c + ch) * h * wd..(s * c + ch + 1) * h * wd];
                    let kern = &wv[ch * k * k..(ch + 1) * k * k];
                    let dst = &mut out[(s * c + ch) * h * wd..(s * c + ch + 1) * h * wd];
                    let bias = bv.map_or(T::zero(), |b| b[ch]);
                    dst.iter_mut().for_each(|v| *v = bias);
                    for ky in 0..k {
                        let oy = ky as isize - pad;
                        for kx in 0..k {
                            let ox = kx as isize - pad;
                            let kv = kern[ky * k + kx];
                            let lo = (-ox).max(0) as usize;
                            let hi = (wd as isize - ox).clamp(0, wd as isize) as usize;
                            if hi <= lo {
                                continue;
                            }
                            for y in 0..h {
                                let sy = y as isize + oy;
                                if sy < 0 || sy >= h as isize {
                                    continue;
                                }
                                let src = &plane[sy as usize * wd..(sy as usize + 1) * wd];
                                let row = &mut dst[y * wd..(y + 1) * wd];
                                for xx in lo..hi {
                                    row[xx] += kv * src[(xx as isize + ox) as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(Tensor::new(&xs, out), Op::Depthwise { x, w, b, k }, &inputs))
    }

    /// Batch normalization over every axis except channel axis 1. In train
    /// mode batch statistics are used and recorded; in infer mode the
    /// running statistics `running_mean`/`running_var` are used.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: ParamId,
        running_var: ParamId,
    ) -> Result<Var> {
        let (n, c, inner) = {
            let t = self.value(x);
            if t.shape().len() < 2 {
                return Err(Error::shape("batch_norm", format!("rank too low: {:?}", t.shape())));
            }
            t.split_dims()
        };
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape(
                "batch_norm",
                format!("affine params must be [{c}], got {:?}", self.shape(gamma)),
            ));
        }
        let eps = T::of(BN_EPS);
        let m = T::of((n * inner) as f64);
        let batch_stats = self.mode == Mode::Train;
        let xv = self.value(x).data();
        let (mean, var): (Vec<T>, Vec<T>) = if batch_stats {
            let mut mean = vec![T::zero(); c];
            let mut var = vec![T::zero(); c];
            for ch in 0..c {
                let mut s = T::zero();
                for b in 0..n {
                    s += xv[(b * c + ch) * inner..(b * c + ch + 1) * inner].iter().copied().sum();
                }
                let mu = s / m;
                let mut v = T::zero();
                for b in 0..n {
                    for &e in &xv[(b * c + ch) * inner..(b * c + ch + 1) * inner] {
                        v += (e - mu) * (e - mu);
                    }
                }
                mean[ch] = mu;
                var[ch] = v / m;
            }
            (mean, var)
        } else {
            (
                self.store.value(running_mean).data().to_vec(),
                self.store.value(running_var).data().to_vec(),
            )
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut xhat = vec![T::zero(); xv.len()];
        let mut out = vec![T::zero(); xv.len()];
        for b in 0..n {
            for ch in 0..c {
                let r = (b * c + ch) * inner..(b * c + ch + 1) * inner;
                for i in r {
                    let h = (xv[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = h;
                    out[i] = gv[ch] * h + bv[ch];
                }
            }
        }
        let shape = self.shape(x).to_vec();
        if batch_stats {
            self.stats.push(RunningStatUpdate {
                mean: running_mean,
                var: running_var,
                batch_mean: mean,
                batch_var: var,
            });
        }
        Ok(self.push(
            Tensor::new(&shape, out),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
            &[x, gamma, beta],
        ))
    }

    /// 2×2 max pooling with stride 2 over `[N,C,H,W]`; H and W must be even.
    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 || !xs[2].is_multiple_of(2) || !xs[3].is_multiple_of(2) {
            return Err(Error::shape("max_pool2", format!("needs [N,C,even,even], got {xs:?}")));
        }
        let (nc, h, w) = (xs[0] * xs[1], xs[2], xs[3]);
        let (oh, ow) = (h / 2, w / 2);
        let mut out = vec![T::zero(); nc * oh * ow];
        let mut argmax = vec![0u32; nc * oh * ow];
        let xv = self.value(x).data();
        for p in 0..nc {
            let plane = &xv[p * h * w..(p + 1) * h * w];
            for y in 0..oh {
                for xx in 0..ow {
                    let mut best = 2 * y * w + 2 * xx;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let i = (2 * y + dy) * w + 2 * xx + dx;
                        if plane[i] > plane[best] {
                            best = i;
                        }
                    }
                    let o = p * oh * ow + y * ow + xx;
                    out[o] = plane[best];
                    argmax[o] = best as u32;
                }
            }
        }
        Ok(self.push(
            Tensor::new(&[xs[0], xs[1], oh, ow], out),
            Op::MaxPool { x, argmax },
            &[x],
        ))
    }

    /// 2×2 average pooling with stride 2 over `[N,C,H,W]`; H and W must be even.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 || !xs[2].is_multiple_of(2) || !xs[3].is_multiple_of(2) {
            return Err(Error::shape("avg_pool2", format!("needs [N,C,even,even], got {xs:?}")));
        }
        let (nc, h, w) = (xs[0] * xs[1], xs[2], xs[3]);
        let (oh, ow) = (h / 2, w / 2);
        let quarter = T::of(0.25);
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); nc * oh * ow];
        for p in 0..nc {
            let plane = &xv[p * h * w..(p + 1) * h * w];
            for y in 0..oh {
                for xx in 0..ow {
                    let i = 2 * y * w + 2 * xx;
                    out[p * oh * ow + y * ow + xx] = (plane[i] + plane[i + 1] + plane[i + w] + plane[i + w + 1]) * quarter;
                }
            }
        }
        Ok(self.push(Tensor::new(&[xs[0], xs[1], oh, ow], out), Op::AvgPool { x }, &[x]))
    }

    /// Nearest-neighbour 2× upsampling of `[N,C,H,W]`.
    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(Error::shape("upsample2", format!("needs rank 4, got {xs:?}")));
        }
        let (nc, h, w) = (xs[0] * xs[1], xs[2], xs[3]);
        let (oh, ow) = (2 * h, 2 * w);
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); nc * oh * ow];
        for p in 0..nc {
            for y in 0..oh {
                let src = &xv[p * h * w + (y / 2) * w..p * h * w + (y / 2 + 1) * w];
                let dst = &mut out[p * oh * ow + y * ow..p * oh * ow + (y + 1) * ow];
                for (xx, d) in dst.iter_mut().enumerate() {
                    *d = src[xx / 2];
                }
            }
        }
        Ok(self.push(Tensor::new(&[xs[0], xs[1], oh, ow], out), Op::Upsample { x }, &[x]))
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let value = self.value(x).map(f);
        self.push(value, op, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid { x })
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.tanh(), Op::Tanh { x })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(T::zero()), Op::Relu { x })
    }

    pub fn swish(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * sigmoid(v), Op::Swish { x })
    }

    fn binary(&mut self, a: Var, b: Var, name: &str, mul: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let out_shape = broadcast_shape(&sa, &sb)
            .ok_or_else(|| Error::shape(name, format!("cannot broadcast {sa:?} with {sb:?}")))?;
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let f = |x: T, y: T| if mul { x * y } else { x + y };
        let out: Vec<T> = if sa == sb {
            av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect()
        } else {
            broadcast_zip(&sa, &sb, &out_shape, av, bv, f)
        };
        let op = if mul { Op::Mul { a, b } } else { Op::Add { a, b } };
        Ok(self.push(Tensor::new(&out_shape, out), op, &[a, b]))
    }

    /// Element-wise sum with size-1 broadcasting on equal-rank operands.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", false)
    }

    /// Element-wise (Hadamard) product with size-1 broadcasting.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", true)
    }

    /// Concatenation along channel axis 1.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self
            .shape(*parts.first().ok_or_else(|| Error::shape("concat", "no inputs"))?)
            .to_vec();
        let mut channels = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len() || s[0] != first[0] || s[2..] != first[2..] {
                return Err(Error::shape(
                    "concat",
                    format!("{s:?} does not match {first:?} outside axis 1"),
                ));
            }
            channels += s[1];
        }
        let n = first[0];
        let inner: usize = first[2..].iter().product();
        let mut out = Vec::with_capacity(n * channels * inner);
        for b in 0..n {
            for &p in parts {
                let t = self.value(p);
                let c = t.shape()[1];
                out.extend_from_slice(&t.data()[b * c * inner..(b + 1) * c * inner]);
            }
        }
        let mut shape = first.clone();
        shape[1] = channels;
        Ok(self.push(
            Tensor::new(&shape, out),
            Op::Concat {
                parts: parts.to_vec(),
            },
            parts,
        ))
    }

    /// Channels `start..start+len` of `x`.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 || start + len > xs[1] || len == 0 {
            return Err(Error::shape(
                "slice_channels",
                format!("channels {start}..{} of {xs:?}", start + len),
            ));
        }
        let (n, c, inner) = self.value(x).split_dims();
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(n * len * inner);
        for b in 0..n {
            out.extend_from_slice(&xv[(b * c + start) * inner..(b * c + start + len) * inner]);
        }
        let mut shape = xs;
        shape[1] = len;
        Ok(self.push(Tensor::new(&shape, out), Op::Slice { x, start }, &[x]))
    }

    /// Mean over the spatial axes of `[N,C,H,W]`, keeping them as size 1.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(Error::shape("global_avg_pool", format!("needs rank 4, got {xs:?}")));
        }
        let hw = xs[2] * xs[3];
        let denom = T::of(hw as f64);
        let out: Vec<T> = self
            .value(x)
            .data()
            .chunks_exact(hw)
            .map(|c| c.iter().copied().sum::<T>() / denom)
            .collect();
        Ok(self.push(Tensor::new(&[xs[0], xs[1], 1, 1], out), Op::GlobalAvgPool { x }, &[x]))
    }

    /// Stacks `T` tensors of shape `[N,C,H,W]` into `[N,C,T,H,W]`.
    pub fn stack_time(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self
            .shape(*parts.first().ok_or_else(|| Error::shape("stack_time", "no inputs"))?)
            .to_vec();
        if first.len() != 4 || parts.iter().any(|&p| self.shape(p) != first.as_slice()) {
            return Err(Error::shape("stack_time", "inputs must share one [N,C,H,W] shape"));
        }
        let t = parts.len();
        let (n, c, hw) = (first[0], first[1], first[2] * first[3]);
        let mut out = vec![T::zero(); n * c * t * hw];
        for (ti, &p) in parts.iter().enumerate() {
            let src = self.value(p).data();
            for nc in 0..n * c {
                out[(nc * t + ti) * hw..(nc * t + ti + 1) * hw]
                    .copy_from_slice(&src[nc * hw..(nc + 1) * hw]);
            }
        }
        Ok(self.push(
            Tensor::new(&[n, c, t, first[2], first[3]], out),
            Op::Stack {
                parts: parts.to_vec(),
            },
            parts,
        ))
    }

    /// Time step `t` of a `[N,C,T,H,W]` tensor as `[N,C,H,W]`.
    pub fn select_time(&mut self, x: Var, t: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 5 || t >= xs[2] {
            return Err(Error::shape("select_time", format!("step {t} of {xs:?}")));
        }
        let (nc, tt, hw) = (xs[0] * xs[1], xs[2], xs[3] * xs[4]);
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(nc * hw);
        for p in 0..nc {
            out.extend_from_slice(&xv[(p * tt + t) * hw..(p * tt + t + 1) * hw]);
        }
        Ok(self.push(
            Tensor::new(&[xs[0], xs[1], xs[3], xs[4]], out),
            Op::Select { x, t },
            &[x],
        ))
    }

    /// Replays the tape backwards from the seeded output gradients.
    pub fn backward(&self, seeds: &[(Var, Tensor<T>)]) -> Result<Gradients<T>> {
        if self.mode != Mode::Train {
            return Err(Error::State(
                "backward requires a graph recorded in train mode".into(),
            ));
        }
        if self.nodes.is_empty() {
            return Err(Error::State("backward called before any forward".into()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        for (v, g) in seeds {
            if v.0 >= self.nodes.len() {
                return Err(Error::State(format!("seed {v:?} is not on this tape")));
            }
            if g.shape() != self.nodes[v.0].value.shape() {
                return Err(Error::shape(
                    "backward",
                    format!(
                        "seed gradient {:?} for output {:?}",
                        g.shape(),
                        self.nodes[v.0].value.shape()
                    ),
                ));
            }
            accumulate(&mut grads, *v, g.clone());
        }
        let mut result = Gradients {
            params: Vec::new(),
            leaves: HashMap::new(),
        };
        for i in (0..self.nodes.len()).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {
                    if node.requires_grad {
                        result.leaves.insert(Var(i), g);
                    }
                }
                Op::Param(id) => {
                    if node.requires_grad {
                        result.params.push((*id, g));
                    }
                }
                _ => {
                    if node.requires_grad {
                        self.backprop_node(i, &g, &mut grads);
                    }
                }
            }
        }
        result.params.sort_by_key(|(id, _)| *id);
        Ok(result)
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        let gd = g.data();
        match &node.op {
            Op::Leaf | Op::Param(_) => unreachable!(),
            Op::Conv { x, w, b, geom } => {
                let xt = self.value(*x);
                let n = xt.shape()[0];
                let (k, p) = (geom.k(), geom.p());
                let wv = self.value(*w).data();
                let want_x = self.wants(*x);
                let want_w = self.wants(*w);
                let mut dw = if want_w { vec![T::zero(); geom.co * k] } else { Vec::new() };
                let mut dx = if want_x { vec![T::zero(); xt.len()] } else { Vec::new() };
                let mut cols = if geom.pointwise() { Vec::new() } else { vec![T::zero(); k * p] };
                let mut dcols = if want_x && !geom.pointwise() { vec![T::zero(); k * p] } else { Vec::new() };
                for s in 0..n {
                    let dy = &gd[s * geom.co * p..(s + 1) * geom.co * p];
                    let xs_n = &xt.data()[s * geom.ci * p..(s + 1) * geom.ci * p];
                    if want_w {
                        let cols_ref: &[T] = if geom.pointwise() {
                            xs_n
                        } else {
                            im2col(geom, xs_n, &mut cols);
                            &cols
                        };
                        T::gemm(false, true, geom.co, p, k, T::one(), dy, cols_ref, T::one(), &mut dw);
                    }
                    if want_x {
                        let dx_n = &mut dx[s * geom.ci * p..(s + 1) * geom.ci * p];
                        if geom.pointwise() {
                            T::gemm(true, false, k, geom.co, p, T::one(), wv, dy, T::one(), dx_n);
                        } else {
                            T::gemm(true, false, k, geom.co, p, T::one(), wv, dy, T::zero(), &mut dcols);
                            col2im(geom, &dcols, dx_n);
                        }
                    }
                }
                if want_x {
                    accumulate(grads, *x, Tensor::new(xt.shape(), dx));
                }
                if want_w {
                    accumulate(grads, *w, Tensor::new(self.shape(*w), dw));
                }
                if let Some(b) = b {
                    if self.wants(*b) {
                        let mut db = vec![T::zero(); geom.co];
                        for s in 0..n {
                            for (o, d) in db.iter_mut().enumerate() {
                                let off = (s * geom.co + o) * p;
                                *d += gd[off..off + p].iter().copied().sum();
                            }
                        }
                        accumulate(grads, *b, Tensor::new(&[geom.co], db));
                    }
                }
            }
            Op::Depthwise { x, w, b, k } => {
                let xt = self.value(*x);
                let s = xt.shape();
                let (n, c, h, wd) = (s[0], s[1], s[2], s[3]);
                let k = *k;
                let pad = (k / 2) as isize;
                let wv = self.value(*w).data();
                let xv = xt.data();
                let mut dx = vec![T::zero(); xv.len()];
                let mut dw = vec![T::zero(); c * k * k];
                for sn in 0..n {
                    for ch in 0..c {
                        let off = (sn * c + ch) * h * wd;
                        let plane = &xv[off..off + h * wd];
                        let gp = &gd[off..off + h * wd];
                        let dplane = &mut dx[off..off + h * wd];
                        for ky in 0..k {
                            let oy = ky as isize - pad;
                            for kx in 0..k {
                                let ox = kx as isize - pad;
                                let kv = wv[ch * k * k + ky * k + kx];
                                let lo = (-ox).max(0) as usize;
                                let hi = (wd as isize - ox).clamp(0, wd as isize) as usize;
                                let mut acc = T::zero();
                                for y in 0..h {
                                    let sy = y as isize + oy;
                                    if sy < 0 || sy >= h as isize || hi <= lo {
                                        continue;
                                    }
                                    for xx in lo..hi {
                                        let si = sy as usize * wd + (xx as isize + ox) as usize;
                                        let gy = gp[y * wd + xx];
                                        acc += gy * plane[si];
                                        dplane[si] += gy * kv;
                                    }
                                }
                                dw[ch * k * k + ky * k + kx] += acc;
                            }
                        }
                    }
                }
                if self.wants(*x) {
                    accumulate(grads, *x, Tensor::new(s, dx));
                }
                if self.wants(*w) {
                    accumulate(grads, *w, Tensor::new(self.shape(*w), dw));
                }
                if let Some(b) = b {
                    if self.wants(*b) {
                        let mut db = vec![T::zero(); c];
                        for (idx, chunk) in gd.chunks_exact(h * wd).enumerate() {
                            db[idx % c] += chunk.iter().copied().sum();
                        }
                        accumulate(grads, *b, Tensor::new(&[c], db));
                    }
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
                let (n, c, inner) = self.value(*x).split_dims();
                let m = T::of((n * inner) as f64);
                let gv = self.value(*gamma).data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for b in 0..n {
                    for ch in 0..c {
                        let r = (b * c + ch) * inner..(b * c + ch + 1) * inner;
                        for i in r {
                            dbeta[ch] += gd[i];
                            dgamma[ch] += gd[i] * xhat[i];
                        }
                    }
                }
                if self.wants(*x) {
                    let mut dx = vec![T::zero(); gd.len()];
                    for b in 0..n {
                        for ch in 0..c {
                            let scale = gv[ch] * inv_std[ch];
                            let r = (b * c + ch) * inner..(b * c + ch + 1) * inner;
                            for i in r {
                                dx[i] = if *batch_stats {
                                    scale / m * (m * gd[i] - dbeta[ch] - xhat[i] * dgamma[ch])
                                } else {
                                    scale * gd[i]
                                };
                            }
                        }
                    }
                    accumulate(grads, *x, Tensor::new(self.shape(*x), dx));
                }
                if self.wants(*gamma) {
                    accumulate(grads, *gamma, Tensor::new(&[c], dgamma));
                }
                if self.wants(*beta) {
                    accumulate(grads, *beta, Tensor::new(&[c], dbeta));
                }
            }
            Op::MaxPool { x, argmax } => {
                let xs = self.shape(*x);
                let plane_in = xs[2] * xs[3];
                let plane_out = plane_in / 4;
                let mut dx = vec![T::zero(); xs.iter().product()];
                for (o, (&gv, &a)) in gd.iter().zip(argmax).enumerate() {
                    let p = o / plane_out;
                    dx[p * plane_in + a as usize] += gv;
                }
                accumulate(grads, *x, Tensor::new(xs, dx));
            }
            Op::AvgPool { x } => {
                let xs = self.shape(*x);
                let (nc, h, w) = (xs[0] * xs[1], xs[2], xs[3]);
                let (oh, ow) = (h / 2, w / 2);
                let quarter = T::of(0.25);
                let mut dx = vec![T::zero(); nc * h * w];
                for p in 0..nc {
                    for y in 0..h {
                        for xx in 0..w {
                            dx[p * h * w + y * w + xx] = gd[p * oh * ow + (y / 2) * ow + xx / 2] * quarter;
                        }
                    }
                }
                accumulate(grads, *x, Tensor::new(xs, dx));
            }
            Op::Upsample { x } => {
                let xs = self.shape(*x);
                let (nc, h, w) = (xs[0] * xs[1], xs[2], xs[3]);
                let (oh, ow) = (2 * h, 2 * w);
                let mut dx = vec![T::zero(); nc * h * w];
                for p in 0..nc {
                    for y in 0..oh {
                        for xx in 0..ow {
                            dx[p * h * w + (y / 2) * w + xx / 2] += gd[p * oh * ow + y * ow + xx];
                        }
                    }
                }
                accumulate(grads, *x, Tensor::new(xs, dx));
            }
            Op::Sigmoid { x } => {
                let y = node.value.data();
                let dx = gd.iter().zip(y).map(|(&g, &s)| g * s * (T::one() - s)).collect();
                accumulate(grads, *x, Tensor::new(g.shape(), dx));
            }
            Op::Tanh { x } => {
                let y = node.value.data();
                let dx = gd.iter().zip(y).map(|(&g, &t)| g * (T::one() - t * t)).collect();
                accumulate(grads, *x, Tensor::new(g.shape(), dx));
            }
            Op::Relu { x } => {
                let xv = self.value(*x).data();
                let dx = gd
                    .iter()
                    .zip(xv)
                    .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
                    .collect();
                accumulate(grads, *x, Tensor::new(g.shape(), dx));
            }
            Op::Swish { x } => {
                let xv = self.value(*x).data();
                let dx = gd
                    .iter()
                    .zip(xv)
                    .map(|(&g, &v)| {
                        let s = sigmoid(v);
                        g * (s + v * s * (T::one() - s))
                    })
                    .collect();
                accumulate(grads, *x, Tensor::new(g.shape(), dx));
            }
            Op::Add { a, b } => {
                for v in [*a, *b] {
                    if self.wants(v) {
                        let reduced = reduce_to(g, self.shape(v), |gv, _| gv, None::<&[T]>);
                        accumulate(grads, v, reduced);
                    }
                }
            }
            Op::Mul { a, b } => {
                let out_shape = g.shape();
                for (v, other) in [(*a, *b), (*b, *a)] {
                    if !self.wants(v) {
                        continue;
                    }
                    let ot = self.value(other);
                    let other_full: Vec<T> = if ot.shape() == out_shape {
                        ot.data().to_vec()
                    } else {
                        broadcast_index(ot.shape(), out_shape)
                            .into_iter()
                            .map(|j| ot.data()[j])
                            .collect()
                    };
                    let reduced = reduce_to(g, self.shape(v), |gv, o| gv * o, Some(&other_full[..]));
                    accumulate(grads, v, reduced);
                }
            }
            Op::Concat { parts } => {
                let (n, _, inner) = g.split_dims();
                let total_c = g.shape()[1];
                let mut offset = 0;
                for &p in parts {
                    let ps = self.shape(p).to_vec();
                    let c = ps[1];
                    if self.wants(p) {
                        let mut dp = Vec::with_capacity(n * c * inner);
                        for b in 0..n {
                            let start = (b * total_c + offset) * inner;
                            dp.extend_from_slice(&gd[start..start + c * inner]);
                        }
                        accumulate(grads, p, Tensor::new(&ps, dp));
                    }
                    offset += c;
                }
            }
            Op::Slice { x, start } => {
                let xs = self.shape(*x);
                let (n, c, inner) = self.value(*x).split_dims();
                let len = g.shape()[1];
                let mut dx = vec![T::zero(); n * c * inner];
                for b in 0..n {
                    let dst = (b * c + start) * inner;
                    dx[dst..dst + len * inner].copy_from_slice(&gd[b * len * inner..(b + 1) * len * inner]);
                }
                accumulate(grads, *x, Tensor::new(xs, dx));
            }
            Op::GlobalAvgPool { x } => {
                let xs = self.shape(*x);
                let hw = xs[2] * xs[3];
                let denom = T::of(hw as f64);
                let mut dx = Vec::with_capacity(gd.len() * hw);
                for &gv in gd {
                    dx.extend(std::iter::repeat_n(gv / denom, hw));
                }
                accumulate(grads, *x, Tensor::new(xs, dx));
            }
            Op::Stack { parts } => {
                let s = g.shape();
                let (nc, t, hw) = (s[0] * s[1], s[2], s[3] * s[4]);
                for (ti, &p) in parts.iter().enumerate() {
                    if !self.wants(p) {
                        continue;
                    }
                    let mut dp = Vec::with_capacity(nc * hw);
                    for q in 0..nc {
                        dp.extend_from_slice(&gd[(q * t + ti) * hw..(q * t + ti + 1) * hw]);
                    }
                    accumulate(grads, p, Tensor::new(self.shape(p), dp));
                }
            }
            Op::Select { x, t } => {
                let xs = self.shape(*x);
                let (nc, tt, hw) = (xs[0] * xs[1], xs[2], xs[3] * xs[4]);
                let mut dx = vec![T::zero(); nc * tt * hw];
                for q in 0..nc {
                    dx[(q * tt + t) * hw..(q * tt + t + 1) * hw]
                        .copy_from_slice(&gd[q * hw..(q + 1) * hw]);
                }
                accumulate(grads, *x, Tensor::new(xs, dx));
            }
        }
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

/// Sums `f(g, other)` over the axes on which `target` was broadcast.
fn reduce_to<T: Scalar>(
    g: &Tensor<T>,
    target: &[usize],
    f: impl Fn(T, T) -> T,
    other: Option<&[T]>,
) -> Tensor<T> {
    let gd = g.data();
    let val = |i: usize| f(gd[i], other.map_or(T::one(), |o| o[i]));
    if g.shape() == target {
        return Tensor::new(target, (0..gd.len()).map(val).collect());
    }
    let idx = broadcast_index(target, g.shape());
    let mut out = vec![T::zero(); target.iter().product()];
    for (i, &j) in idx.iter().enumerate() {
        out[j] += val(i);
    }
    Tensor::new(target, out)
}
