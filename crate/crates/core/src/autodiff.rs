//! Minimal reverse-mode automatic differentiation over `ndarray` tensors.
//!
//! A [`Tape`] records one forward computation as a flat list of nodes; calling
//! [`Tape::backward`] walks the list in reverse and accumulates gradients.
//! Only the operations the networks and losses need are provided: same-shape
//! arithmetic, ReLU/sigmoid, 2-D convolution (im2col + GEMM), 2x2 max pooling,
//! 2x nearest-neighbor upsampling, channel concatenation, Gram matrices,
//! whole-tensor min-max scaling, full sums, and binary cross entropy on
//! logits. Convolution inputs are (C,H,W); scalars are 0-dimensional arrays.
//!
//! Gradients never propagate into subgraphs that contain no trainable leaf,
//! so frozen networks cost a forward pass plus the input-gradient path only.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayD, Ix1, Ix2, Ix3, Ix4, IxDyn};

/// Floating-point element type of a tape: f32 for training, f64 wherever
/// finite-difference verification needs the headroom.
pub trait Real:
    ndarray::NdFloat + num_traits::FromPrimitive + std::iter::Sum + for<'a> std::iter::Sum<&'a Self>
{
}
impl Real for f32 {}
impl Real for f64 {}

/// Shorthand for converting literal constants.
pub fn c<F: Real>(x: f64) -> F {
    F::from_f64(x).expect("constant conversion")
}

/// Handle to a node on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op<F: Real> {
    Leaf { trainable: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    Offset(Var, F),
    Relu(Var),
    Sigmoid(Var),
    Conv2d { input: Var, weight: Var, bias: Var, stride: usize, pad: usize },
    MaxPool2 { input: Var, argmax: Vec<u32> },
    Upsample2(Var),
    ConcatC(Var, Var),
    Sum(Var),
    Gram(Var),
    /// (x - min) / (max - min) over the whole tensor; degenerate (constant)
    /// inputs produce zeros and a zero gradient.
    MinMaxSpan { input: Var, argmin: usize, argmax: usize, degenerate: bool },
    BceWithLogits { logits: Var, targets: ArrayD<F> },
}

struct Node<F: Real> {
    value: ArrayD<F>,
    op: Op<F>,
    needs_grad: bool,
}

/// Gradients from one backward pass, indexed by [`Var`].
pub struct Gradients<F: Real> {
    grads: Vec<Option<ArrayD<F>>>,
    trainable: Vec<bool>,
}

impl<F: Real> Gradients<F> {
    /// Gradient with respect to a leaf. `None` for leaves created with
    /// `trainable = false` and for nodes the loss does not depend on.
    pub fn wrt(&self, var: Var) -> Option<&ArrayD<F>> {
        if !self.trainable[var.0] {
            return None;
        }
        self.grads[var.0].as_ref()
    }
}

pub struct Tape<F: Real> {
    nodes: Vec<Node<F>>,
}

impl<F: Real> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, value: ArrayD<F>, op: Op<F>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &ArrayD<F> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> F {
        let val = self.value(v);
        debug_assert_eq!(val.len(), 1, "scalar() on non-scalar node");
        *val.iter().next().expect("empty node")
    }

    pub fn leaf(&mut self, value: ArrayD<F>, trainable: bool) -> Var {
        self.push(value, Op::Leaf { trainable }, trainable)
    }

    pub fn constant(&mut self, value: ArrayD<F>) -> Var {
        self.leaf(value, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        debug_assert_eq!(self.value(a).shape(), self.value(b).shape());
        let value = &self.nodes[a.0].value + &self.nodes[b.0].value;
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        debug_assert_eq!(self.value(a).shape(), self.value(b).shape());
        let value = &self.nodes[a.0].value - &self.nodes[b.0].value;
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        debug_assert_eq!(self.value(a).shape(), self.value(b).shape());
        let value = &self.nodes[a.0].value * &self.nodes[b.0].value;
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, k: F) -> Var {
        let value = self.nodes[a.0].value.mapv(|v| v * k);
        let ng = self.needs(a);
        self.push(value, Op::Scale(a, k), ng)
    }

    pub fn offset(&mut self, a: Var, k: F) -> Var {
        let value = self.nodes[a.0].value.mapv(|v| v + k);
        let ng = self.needs(a);
        self.push(value, Op::Offset(a, k), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(|v| if v > F::zero() { v } else { F::zero() });
        let ng = self.needs(a);
        self.push(value, Op::Relu(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(stable_sigmoid);
        let ng = self.needs(a);
        self.push(value, Op::Sigmoid(a), ng)
    }

    /// 2-D convolution on (C,H,W) input with (Co,Ci,K,K) weights and (Co,)
    /// bias; padding K/2 keeps stride-1 outputs at the input resolution.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, stride: usize) -> Var {
        let x = self.value(input).view().into_dimensionality::<Ix3>().expect("conv input CHW");
        let w = self.value(weight).view().into_dimensionality::<Ix4>().expect("conv weight");
        let b = self.value(bias).view().into_dimensionality::<Ix1>().expect("conv bias");
        let (ci, h, win) = x.dim();
        let (co, wci, kh, kw) = w.dim();
        assert_eq!(ci, wci, "conv channel mismatch");
        assert_eq!(co, b.len(), "conv bias mismatch");
        let pad = kh / 2;
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (win + 2 * pad - kw) / stride + 1;

        let cols = im2col(&x.to_owned(), kh, kw, stride, pad, ho, wo);
        let w_mat = self.value(weight).to_shape((co, ci * kh * kw)).expect("weight reshape").to_owned();
        let mut out_mat = Array2::<F>::zeros((co, ho * wo));
        general_mat_mul(F::one(), &w_mat, &cols, F::zero(), &mut out_mat);
        for (o, mut row) in out_mat.rows_mut().into_iter().enumerate() {
            let bo = b[o];
            row.mapv_inplace(|v| v + bo);
        }
        let value = out_mat.into_shape_with_order((co, ho, wo)).expect("conv output reshape");
        let ng = self.needs(input) || self.needs(weight) || self.needs(bias);
        self.push(value.into_dyn(), Op::Conv2d { input, weight, bias, stride, pad }, ng)
    }

    /// 2x2 max pooling with stride 2; requires even spatial dims.
    pub fn max_pool2(&mut self, input: Var) -> Var {
        let x = self.value(input).view().into_dimensionality::<Ix3>().expect("pool input CHW");
        let (ch, h, w) = x.dim();
        assert!(h % 2 == 0 && w % 2 == 0, "max_pool2 needs even dims, got {h}x{w}");
        let (ho, wo) = (h / 2, w / 2);
        let mut value = ndarray::Array3::<F>::zeros((ch, ho, wo));
        let mut argmax = vec![0u32; ch * ho * wo];
        for cc in 0..ch {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = F::neg_infinity();
                    let mut best_idx = 0usize;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let (y, xx) = (2 * oy + dy, 2 * ox + dx);
                            let v = x[[cc, y, xx]];
                            if v > best {
                                best = v;
                                best_idx = (cc * h + y) * w + xx;
                            }
                        }
                    }
                    value[[cc, oy, ox]] = best;
                    argmax[(cc * ho + oy) * wo + ox] = best_idx as u32;
                }
            }
        }
        let ng = self.needs(input);
        self.push(value.into_dyn(), Op::MaxPool2 { input, argmax }, ng)
    }

    /// 2x nearest-neighbor upsampling.
    pub fn upsample2(&mut self, input: Var) -> Var {
        let x = self.value(input).view().into_dimensionality::<Ix3>().expect("upsample input CHW");
        let (ch, h, w) = x.dim();
        let value = ndarray::Array3::from_shape_fn((ch, 2 * h, 2 * w), |(cc, y, xx)| {
            x[[cc, y / 2, xx / 2]]
        });
        let ng = self.needs(input);
        self.push(value.into_dyn(), Op::Upsample2(input), ng)
    }

    /// Concatenates two (C,H,W) tensors along channels.
    pub fn concat_c(&mut self, a: Var, b: Var) -> Var {
        let xa = self.value(a).view().into_dimensionality::<Ix3>().expect("concat a");
        let xb = self.value(b).view().into_dimensionality::<Ix3>().expect("concat b");
        let (ca, h, w) = xa.dim();
        let (cb, hb, wb) = xb.dim();
        assert_eq!((h, w), (hb, wb), "concat spatial mismatch");
        let mut value = ndarray::Array3::<F>::zeros((ca + cb, h, w));
        value.slice_mut(ndarray::s![..ca, .., ..]).assign(&xa);
        value.slice_mut(ndarray::s![ca.., .., ..]).assign(&xb);
        let ng = self.needs(a) || self.needs(b);
        self.push(value.into_dyn(), Op::ConcatC(a, b), ng)
    }

    /// Sum over every element, producing a 0-dimensional scalar node.
    pub fn sum(&mut self, a: Var) -> Var {
        let total: F = self.value(a).iter().copied().sum();
        let value = ArrayD::from_elem(IxDyn(&[]), total);
        let ng = self.needs(a);
        self.push(value, Op::Sum(a), ng)
    }

    /// Mean over every element.
    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len();
        let s = self.sum(a);
        self.scale(s, F::one() / c::<F>(n as f64))
    }

    /// Channel Gram matrix of a (C,H,W) feature map: G = P P^T with P the
    /// (C, H*W) flattening; no normalization.
    pub fn gram(&mut self, a: Var) -> Var {
        let x = self.value(a).view().into_dimensionality::<Ix3>().expect("gram input CHW");
        let (ch, h, w) = x.dim();
        let p = self.value(a).to_shape((ch, h * w)).expect("gram reshape").to_owned();
        let mut g = Array2::<F>::zeros((ch, ch));
        general_mat_mul(F::one(), &p, &p.t(), F::zero(), &mut g);
        let ng = self.needs(a);
        self.push(g.into_dyn(), Op::Gram(a), ng)
    }

    /// Rescales the whole tensor to span [0,1]; constant tensors map to zeros.
    pub fn min_max_span(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let flat = x.as_slice().expect("contiguous");
        let mut argmin = 0usize;
        let mut argmax = 0usize;
        for (i, &v) in flat.iter().enumerate() {
            if v < flat[argmin] {
                argmin = i;
            }
            if v > flat[argmax] {
                argmax = i;
            }
        }
        let (lo, hi) = (flat[argmin], flat[argmax]);
        let degenerate = hi <= lo;
        let value = if degenerate {
            ArrayD::zeros(x.raw_dim())
        } else {
            let span = hi - lo;
            x.mapv(|v| (v - lo) / span)
        };
        let ng = self.needs(input) && !degenerate;
        self.push(value, Op::MinMaxSpan { input, argmin, argmax, degenerate }, ng)
    }

    /// Mean binary cross entropy of logits against fixed targets, computed in
    /// the numerically stable max(z,0) - z*y + ln(1+exp(-|z|)) form.
    pub fn bce_with_logits(&mut self, logits: Var, targets: ArrayD<F>) -> Var {
        let z = self.value(logits);
        assert_eq!(z.shape(), targets.shape(), "bce shape mismatch");
        let n = c::<F>(z.len() as f64);
        let total: F = z
            .iter()
            .zip(targets.iter())
            .map(|(&z, &y)| {
                let pos = if z > F::zero() { z } else { F::zero() };
                pos - z * y + (F::one() + (-z.abs()).exp()).ln()
            })
            .sum();
        let value = ArrayD::from_elem(IxDyn(&[]), total / n);
        let ng = self.needs(logits);
        self.push(value, Op::BceWithLogits { logits, targets }, ng)
    }

    /// Reverse pass from a scalar root. Returns per-node gradients; query the
    /// leaves you care about through [`Gradients::wrt`].
    pub fn backward(&self, root: Var) -> Gradients<F> {
        let mut grads: Vec<Option<ArrayD<F>>> = vec![None; self.nodes.len()];
        debug_assert_eq!(self.value(root).len(), 1, "backward root must be scalar");
        grads[root.0] = Some(ArrayD::from_elem(self.value(root).raw_dim(), F::one()));

        for i in (0..=root.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            // Re-store so callers can inspect leaf gradients.
            grads[i] = Some(g);
        }

        let trainable = self
            .nodes
            .iter()
            .map(|n| matches!(n.op, Op::Leaf { trainable: true }))
            .collect();
        Gradients { grads, trainable }
    }

    fn propagate(&self, idx: usize, g: &ArrayD<F>, grads: &mut [Option<ArrayD<F>>]) {
        fn accum<F: Real>(slot: &mut Option<ArrayD<F>>, delta: ArrayD<F>) {
            match slot {
                Some(acc) => *acc += &delta,
                None => *slot = Some(delta),
            }
        }

        match &self.nodes[idx].op {
            Op::Leaf { .. } => {}
            Op::Add(a, b) => {
                if self.needs(*a) {
                    accum(&mut grads[a.0], g.clone());
                }
                if self.needs(*b) {
                    accum(&mut grads[b.0], g.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.needs(*a) {
                    accum(&mut grads[a.0], g.clone());
                }
                if self.needs(*b) {
                    accum(&mut grads[b.0], g.mapv(|v| -v));
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    accum(&mut grads[a.0], g * &self.nodes[b.0].value);
                }
                if self.needs(*b) {
                    accum(&mut grads[b.0], g * &self.nodes[a.0].value);
                }
            }
            Op::Scale(a, k) => {
                if self.needs(*a) {
                    accum(&mut grads[a.0], g.mapv(|v| v * *k));
                }
            }
            Op::Offset(a, _) => {
                if self.needs(*a) {
                    accum(&mut grads[a.0], g.clone());
                }
            }
            Op::Relu(a) => {
                if self.needs(*a) {
                    let x = &self.nodes[a.0].value;
                    let mut d = g.clone();
                    ndarray::Zip::from(&mut d).and(x).for_each(|dv, &xv| {
                        if xv <= F::zero() {
                            *dv = F::zero();
                        }
                    });
                    accum(&mut grads[a.0], d);
                }
            }
            Op::Sigmoid(a) => {
                if self.needs(*a) {
                    let y = &self.nodes[idx].value;
                    let d = ndarray::Zip::from(g)
                        .and(y)
                        .map_collect(|&gv, &yv| gv * yv * (F::one() - yv));
                    accum(&mut grads[a.0], d);
                }
            }
            Op::Conv2d { input, weight, bias, stride, pad } => {
                self.conv2d_backward(*input, *weight, *bias, *stride, *pad, g, grads);
            }
            Op::MaxPool2 { input, argmax } => {
                if self.needs(*input) {
                    let mut dx = ArrayD::zeros(self.nodes[input.0].value.raw_dim());
                    let dx_flat = dx.as_slice_mut().expect("contiguous");
                    for (o, &src) in argmax.iter().enumerate() {
                        dx_flat[src as usize] += g.as_slice().expect("contiguous")[o];
                    }
                    accum(&mut grads[input.0], dx);
                }
            }
            Op::Upsample2(a) => {
                if self.needs(*a) {
                    let gv = g.view().into_dimensionality::<Ix3>().expect("upsample grad");
                    let (ch, h2, w2) = gv.dim();
                    let mut dx = ndarray::Array3::<F>::zeros((ch, h2 / 2, w2 / 2));
                    for cc in 0..ch {
                        for y in 0..h2 {
                            for xx in 0..w2 {
                                dx[[cc, y / 2, xx / 2]] += gv[[cc, y, xx]];
                            }
                        }
                    }
                    accum(&mut grads[a.0], dx.into_dyn());
                }
            }
            Op::ConcatC(a, b) => {
                let gv = g.view().into_dimensionality::<Ix3>().expect("concat grad");
                let ca = self.nodes[a.0].value.shape()[0];
                if self.needs(*a) {
                    accum(&mut grads[a.0], gv.slice(ndarray::s![..ca, .., ..]).to_owned().into_dyn());
                }
                if self.needs(*b) {
                    accum(&mut grads[b.0], gv.slice(ndarray::s![ca.., .., ..]).to_owned().into_dyn());
                }
            }
            Op::Sum(a) => {
                if self.needs(*a) {
                    let gs = *g.iter().next().expect("scalar grad");
                    accum(&mut grads[a.0], ArrayD::from_elem(self.nodes[a.0].value.raw_dim(), gs));
                }
            }
            Op::Gram(a) => {
                if self.needs(*a) {
                    let x = &self.nodes[a.0].value;
                    let shape = x.shape();
                    let (ch, hw) = (shape[0], shape[1] * shape[2]);
                    let p = x.to_shape((ch, hw)).expect("gram reshape").to_owned();
                    let gm = g.view().into_dimensionality::<Ix2>().expect("gram grad");
                    // dP = (dG + dG^T) P
                    let sym = &gm + &gm.t();
                    let mut dp = Array2::<F>::zeros((ch, hw));
                    general_mat_mul(F::one(), &sym, &p, F::zero(), &mut dp);
                    accum(&mut grads[a.0], dp.into_shape_with_order(x.raw_dim()).expect("dp reshape"));
                }
            }
            Op::MinMaxSpan { input, argmin, argmax, degenerate } => {
                if self.needs(*input) && !degenerate {
                    let x = self.nodes[input.0].value.as_slice().expect("contiguous");
                    let gf = g.as_slice().expect("contiguous");
                    let lo = x[*argmin];
                    let hi = x[*argmax];
                    let span = hi - lo;
                    let s: F = gf.iter().copied().sum();
                    let t: F = gf.iter().zip(x.iter()).map(|(&gv, &xv)| gv * (xv - lo)).sum();
                    let mut dx = g.mapv(|v| v / span);
                    let dxf = dx.as_slice_mut().expect("contiguous");
                    dxf[*argmin] += -s / span + t / (span * span);
                    dxf[*argmax] += -t / (span * span);
                    accum(&mut grads[input.0], dx);
                }
            }
            Op::BceWithLogits { logits, targets } => {
                if self.needs(*logits) {
                    let z = &self.nodes[logits.0].value;
                    let n = c::<F>(z.len() as f64);
                    let gs = *g.iter().next().expect("scalar grad");
                    let d = ndarray::Zip::from(z)
                        .and(targets)
                        .map_collect(|&zv, &yv| gs * (stable_sigmoid(zv) - yv) / n);
                    accum(&mut grads[logits.0], d);
                }
            }
        }
    }

    fn conv2d_backward(
        &self,
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        pad: usize,
        g: &ArrayD<F>,
        grads: &mut [Option<ArrayD<F>>],
    ) {
        let x = self.nodes[input.0]
            .value
            .view()
            .into_dimensionality::<Ix3>()
            .expect("conv input");
        let wshape = self.nodes[weight.0].value.shape().to_vec();
        let (co, ci, kh, kw) = (wshape[0], wshape[1], wshape[2], wshape[3]);
        let gshape = g.shape();
        let (ho, wo) = (gshape[1], gshape[2]);
        let g_mat = g.to_shape((co, ho * wo)).expect("grad reshape");

        if self.needs(bias) {
            let db = Array1::from_iter(g_mat.rows().into_iter().map(|r| r.sum()));
            match &mut grads[bias.0] {
                Some(acc) => *acc += &db.view().into_dyn(),
                None => grads[bias.0] = Some(db.into_dyn()),
            }
        }
        if self.needs(weight) {
            let cols = im2col(&x.to_owned(), kh, kw, stride, pad, ho, wo);
            let mut dw = Array2::<F>::zeros((co, ci * kh * kw));
            general_mat_mul(F::one(), &g_mat.view(), &cols.t(), F::zero(), &mut dw);
            let dw = dw
                .into_shape_with_order((co, ci, kh, kw))
                .expect("dw reshape")
                .into_dyn();
            match &mut grads[weight.0] {
                Some(acc) => *acc += &dw,
                None => grads[weight.0] = Some(dw),
            }
        }
        if self.needs(input) {
            let w_mat = self.nodes[weight.0]
                .value
                .to_shape((co, ci * kh * kw))
                .expect("weight reshape")
                .to_owned();
            let mut dcols = Array2::<F>::zeros((ci * kh * kw, ho * wo));
            general_mat_mul(F::one(), &w_mat.t(), &g_mat.view(), F::zero(), &mut dcols);
            let dx = col2im(&dcols, x.dim(), kh, kw, stride, pad, ho, wo);
            match &mut grads[input.0] {
                Some(acc) => *acc += &dx.view().into_dyn(),
                None => grads[input.0] = Some(dx.into_dyn()),
            }
        }
    }
}

fn stable_sigmoid<F: Real>(z: F) -> F {
    if z >= F::zero() {
        F::one() / (F::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (F::one() + e)
    }
}

/// Unfolds (C,H,W) into (C*K*K, Ho*Wo) patch columns.
fn im2col<F: Real>(
    x: &ndarray::Array3<F>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Array2<F> {
    let (ci, h, w) = x.dim();
    let mut cols = Array2::<F>::zeros((ci * kh * kw, ho * wo));
    let xs = x.as_slice().expect("contiguous input");
    let cs = cols.as_slice_mut().expect("contiguous cols");
    for cc in 0..ci {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (cc * kh + ky) * kw + kx;
                let base = row * ho * wo;
                for oy in 0..ho {
                    let y = (oy * stride + ky) as isize - pad as isize;
                    if y < 0 || y >= h as isize {
                        continue;
                    }
                    let src_row = (cc * h + y as usize) * w;
                    let dst_row = base + oy * wo;
                    for ox in 0..wo {
                        let xx = (ox * stride + kx) as isize - pad as isize;
                        if xx < 0 || xx >= w as isize {
                            continue;
                        }
                        cs[dst_row + ox] = xs[src_row + xx as usize];
                    }
                }
            }
        }
    }
    cols
}

/// Folds (C*K*K, Ho*Wo) patch-column gradients back onto the input, summing
/// overlaps.
fn col2im<F: Real>(
    cols: &Array2<F>,
    dim: (usize, usize, usize),
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> ndarray::Array3<F> {
    let (ci, h, w) = dim;
    let mut dx = ndarray::Array3::<F>::zeros(dim);
    let ds = dx.as_slice_mut().expect("contiguous dx");
    let cs = cols.as_slice().expect("contiguous cols");
    for cc in 0..ci {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (cc * kh + ky) * kw + kx;
                let base = row * ho * wo;
                for oy in 0..ho {
                    let y = (oy * stride + ky) as isize - pad as isize;
                    if y < 0 || y >= h as isize {
                        continue;
                    }
                    let dst_row = (cc * h + y as usize) * w;
                    let src_row = base + oy * wo;
                    for ox in 0..wo {
                        let xx = (ox * stride + kx) as isize - pad as isize;
                        if xx < 0 || xx >= w as isize {
                            continue;
                        }
                        ds[dst_row + xx as usize] += cs[src_row + ox];
                    }
                }
            }
        }
    }
    dx
}
