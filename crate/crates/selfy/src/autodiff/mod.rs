//! Reverse-mode differentiation over the crate's operation set.
//!
//! A [`Tape`] records one forward pass as an append-only node list (inputs
//! always precede consumers, so reverse append order is a valid backward
//! order). [`Tape::backward`] seeds a scalar loss node and walks the list in
//! reverse. Persistent gradient accumulators exist only for leaves created
//! with `requires_grad`; repeated backward calls without
//! [`Tape::zero_grads`] accumulate into them.
//!
//! Subgradient conventions: `relu'(0) = 0`, and the max subtracted inside
//! softmax / cross-entropy is treated as a constant.

mod gradcheck;
mod suite;

pub use gradcheck::{gradcheck, GradCheckEntry, GradCheckReport, FD_STEP, MIN_COORD_SAMPLES};
pub use suite::{registered_op_names, run_suite, SuiteEntry};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::stss::{cross_dot_backward, cross_dot_forward, stss_cosine_backward};
use crate::stss::{stss_transform_tiled, OffsetWindow, SimilarityKind};
use crate::tensor::{
    conv3d_fused, elementwise_add, mode_n_product, relu, softmax_over_axis, Tensor,
};

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Default `(x, y)` tile for the similarity kernel when driven from the tape.
const STSS_TILE: (usize, usize) = (4, 32);

enum Op<E: Scalar> {
    Leaf,
    Add(Var, Var),
    Scale(Var, E),
    Relu(Var),
    /// Broadcast `b` over the last axis of `x`.
    BiasAdd(Var, Var),
    /// `maybe_relu(x ×_axis w)`.
    ModeN { x: Var, w: Var, axis: usize, act: bool },
    /// `maybe_relu(conv3d(x, k) + bias)`, one materialised tensor per layer.
    ConvLayer {
        x: Var,
        k: Var,
        bias: Option<Var>,
        act: bool,
        strides: [usize; 3],
        pads: [usize; 3],
    },
    Softmax { x: Var, axis: usize, tau: E },
    /// Softmax-weighted expectation of integer displacements over the
    /// trailing `(U, V)` axes of a 6D similarity tensor.
    SoftArgmax { s: Var, tau: E },
    StssCosine { v: Var, window: OffsetWindow },
    /// Dot-product similarity between two already-embedded maps.
    StssCrossDot { q: Var, t: Var, window: OffsetWindow },
    Bilinear { x: Var, new_h: usize, new_w: usize },
    TemporalShift { x: Var, shift: usize },
    Permute { x: Var, perm: Vec<usize> },
    Reshape { x: Var },
    /// Mean over every axis but the last.
    GlobalMean { x: Var },
    CrossEntropy { logits: Var, label: usize },
    SumAll { x: Var },
    /// Negative-control fixture: forward is `2x` but backward claims `3`.
    /// Exists so the gradient checker's failure path stays honest.
    NegativeControl { x: Var },
}

struct Node<E: Scalar> {
    value: Tensor<E>,
    op: Op<E>,
    needs_grad: bool,
    is_leaf_param: bool,
}

pub struct Tape<E: Scalar> {
    nodes: Vec<Node<E>>,
    /// Persistent per-leaf accumulators, indexed like `nodes`.
    acc: Vec<Option<Tensor<E>>>,
}

impl<E: Scalar> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Scalar> Tape<E> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), acc: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<E>, op: Op<E>, needs_grad: bool, leaf_param: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad, is_leaf_param: leaf_param });
        self.acc.push(None);
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn leaf(&mut self, value: Tensor<E>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad, requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor<E> {
        &self.nodes[v.0].value
    }

    /// Accumulated gradient of a `requires_grad` leaf; `None` before any
    /// backward pass or for non-leaf nodes.
    pub fn grad(&self, v: Var) -> Option<&Tensor<E>> {
        self.acc[v.0].as_ref()
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.acc {
            *g = None;
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = elementwise_add(self.value(a), self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Add(a, b), ng, false))
    }

    pub fn scale(&mut self, x: Var, c: E) -> Var {
        let value = self.value(x).map(|v| v * c);
        let ng = self.needs(x);
        self.push(value, Op::Scale(x, c), ng, false)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = relu(self.value(x));
        let ng = self.needs(x);
        self.push(value, Op::Relu(x), ng, false)
    }

    pub fn bias_add(&mut self, x: Var, b: Var) -> Result<Var> {
        let xv = self.value(x);
        let bv = self.value(b);
        let c = *xv.shape().last().unwrap();
        if bv.shape() != [c] {
            return Err(Error::Shape(format!(
                "bias_add: bias {:?} does not match channel extent {c}",
                bv.shape()
            )));
        }
        let mut value = xv.clone();
        for row in value.data_mut().chunks_mut(c) {
            for (v, &bb) in row.iter_mut().zip(bv.data()) {
                *v += bb;
            }
        }
        let ng = self.needs(x) || self.needs(b);
        Ok(self.push(value, Op::BiasAdd(x, b), ng, false))
    }

    pub fn mode_n(&mut self, x: Var, w: Var, axis: usize, act: bool) -> Result<Var> {
        let mut value = mode_n_product(self.value(x), self.value(w), axis)?;
        if act {
            value = relu(&value);
        }
        let ng = self.needs(x) || self.needs(w);
        Ok(self.push(value, Op::ModeN { x, w, axis, act }, ng, false))
    }

    pub fn conv_layer(
        &mut self,
        x: Var,
        k: Var,
        bias: Option<Var>,
        act: bool,
        strides: [usize; 3],
        pads: [usize; 3],
    ) -> Result<Var> {
        let value = conv3d_fused(
            self.value(x),
            self.value(k),
            bias.map(|b| self.value(b)),
            act,
            strides,
            pads,
        )?;
        let ng = self.needs(x)
            || self.needs(k)
            || bias.map(|b| self.needs(b)).unwrap_or(false);
        Ok(self.push(value, Op::ConvLayer { x, k, bias, act, strides, pads }, ng, false))
    }

    pub fn softmax(&mut self, x: Var, axis: usize, tau: E) -> Result<Var> {
        let value = softmax_over_axis(self.value(x), axis, tau)?;
        let ng = self.needs(x);
        Ok(self.push(value, Op::Softmax { x, axis, tau }, ng, false))
    }

    pub fn soft_argmax(&mut self, s: Var, tau: E) -> Result<Var> {
        if !(tau > E::ZERO) {
            return Err(Error::Domain(format!("soft_argmax temperature must be > 0, got {tau}")));
        }
        let value = soft_argmax_forward(self.value(s), tau)?;
        let ng = self.needs(s);
        Ok(self.push(value, Op::SoftArgmax { s, tau }, ng, false))
    }

    pub fn stss_cosine(&mut self, v: Var, window: &OffsetWindow) -> Result<Var> {
        let s = stss_transform_tiled(
            self.value(v),
            window,
            &SimilarityKind::Cosine,
            STSS_TILE,
            true,
        )?;
        let ng = self.needs(v);
        Ok(self.push(s.values, Op::StssCosine { v, window: window.clone() }, ng, false))
    }

    pub fn stss_cross_dot(&mut self, q: Var, t: Var, window: &OffsetWindow) -> Result<Var> {
        let value = cross_dot_forward(self.value(q), self.value(t), window)?;
        let ng = self.needs(q) || self.needs(t);
        Ok(self.push(value, Op::StssCrossDot { q, t, window: window.clone() }, ng, false))
    }

    pub fn bilinear(&mut self, x: Var, new_h: usize, new_w: usize) -> Result<Var> {
        let value = crate::tensor::bilinear_resize_2d(self.value(x), new_h, new_w)?;
        let ng = self.needs(x);
        Ok(self.push(value, Op::Bilinear { x, new_h, new_w }, ng, false))
    }

    /// Shift the first `floor(f*C)` channels forward in `t`, the next
    /// `floor(f*C)` backward, zero-filling at clip boundaries.
    pub fn temporal_shift(&mut self, x: Var, fraction: f64) -> Result<Var> {
        if !(0.0 < fraction && fraction <= 0.5) {
            return Err(Error::Domain(format!(
                "temporal_shift fraction must lie in (0, 1/2], got {fraction}"
            )));
        }
        let xv = self.value(x);
        if xv.rank() != 4 {
            return Err(Error::Shape(format!(
                "temporal_shift wants (T, X, Y, C), got {:?}",
                xv.shape()
            )));
        }
        let c = xv.shape()[3];
        let shift = ((fraction * c as f64).floor()) as usize;
        let value = temporal_shift_forward(xv, shift);
        let ng = self.needs(x);
        Ok(self.push(value, Op::TemporalShift { x, shift }, ng, false))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let value = self.value(x).permute(perm)?;
        let ng = self.needs(x);
        Ok(self.push(value, Op::Permute { x, perm: perm.to_vec() }, ng, false))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        let ng = self.needs(x);
        Ok(self.push(value, Op::Reshape { x }, ng, false))
    }

    pub fn global_mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let c = *xv.shape().last().unwrap();
        let rows = xv.numel() / c;
        let inv = E::from_f64(1.0 / rows as f64);
        let mut out = Tensor::zeros(&[c]).expect("vector");
        for row in xv.data().chunks_exact(c) {
            for (o, &v) in out.data_mut().iter_mut().zip(row) {
                *o += v;
            }
        }
        for o in out.data_mut() {
            *o = *o * inv;
        }
        let ng = self.needs(x);
        self.push(out, Op::GlobalMean { x }, ng, false)
    }

    /// `-log softmax(logits)[label]`, max-subtracted.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let lv = self.value(logits);
        if lv.rank() != 1 {
            return Err(Error::Shape(format!(
                "cross_entropy wants rank-1 logits, got {:?}",
                lv.shape()
            )));
        }
        if label >= lv.numel() {
            return Err(Error::Domain(format!(
                "label {label} out of range for {} classes",
                lv.numel()
            )));
        }
        let loss = cross_entropy_value(lv.data(), label);
        let ng = self.needs(logits);
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropy { logits, label }, ng, false))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let mut s = E::ZERO;
        for &v in self.value(x).data() {
            s += v;
        }
        let ng = self.needs(x);
        self.push(Tensor::scalar(s), Op::SumAll { x }, ng, false)
    }

    /// See [`Op::NegativeControl`].
    pub fn negative_control(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v * E::from_f64(2.0));
        let ng = self.needs(x);
        self.push(value, Op::NegativeControl { x }, ng, false)
    }

    /// Reverse pass from a scalar `loss`. Leaf accumulators gain this pass's
    /// gradients (summing with anything already there).
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor<E>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(self.value(loss).shape(), E::ONE).unwrap());
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].is_leaf_param {
                match &mut self.acc[i] {
                    Some(acc) => {
                        for (a, &gv) in acc.data_mut().iter_mut().zip(g.data()) {
                            *a += gv;
                        }
                    }
                    slot => *slot = Some(g.clone()),
                }
            }
            self.propagate(i, &g, &mut grads)?;
        }
        Ok(())
    }

    fn accumulate(grads: &mut [Option<Tensor<E>>], v: Var, g: Tensor<E>) {
        match &mut grads[v.0] {
            Some(acc) => {
                debug_assert_eq!(acc.shape(), g.shape());
                for (a, &x) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += x;
                }
            }
            slot => *slot = Some(g),
        }
    }

    fn propagate(&self, i: usize, g: &Tensor<E>, grads: &mut [Option<Tensor<E>>]) -> Result<()> {
        let out = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if self.needs(*a) {
                    Self::accumulate(grads, *a, g.clone());
                }
                if self.needs(*b) {
                    Self::accumulate(grads, *b, g.clone());
                }
            }
            Op::Scale(x, c) => {
                if self.needs(*x) {
                    Self::accumulate(grads, *x, g.map(|v| v * *c));
                }
            }
            Op::Relu(x) => {
                if self.needs(*x) {
                    Self::accumulate(grads, *x, masked_by_positive(g, out));
                }
            }
            Op::BiasAdd(x, b) => {
                if self.needs(*x) {
                    Self::accumulate(grads, *x, g.clone());
                }
                if self.needs(*b) {
                    let c = *out.shape().last().unwrap();
                    let mut gb = Tensor::zeros(&[c])?;
                    for row in g.data().chunks_exact(c) {
                        for (o, &v) in gb.data_mut().iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                    Self::accumulate(grads, *b, gb);
                }
            }
            Op::ModeN { x, w, axis, act } => {
                let g_pre = if *act { masked_by_positive(g, out) } else { g.clone() };
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (gx, gw) = mode_n_backward(
                    xv,
                    wv,
                    *axis,
                    &g_pre,
                    self.needs(*x),
                    self.needs(*w),
                )?;
                if let Some(gx) = gx {
                    Self::accumulate(grads, *x, gx);
                }
                if let Some(gw) = gw {
                    Self::accumulate(grads, *w, gw);
                }
            }
            Op::ConvLayer { x, k, bias, act, strides, pads } => {
                let g_pre = if *act { masked_by_positive(g, out) } else { g.clone() };
                let xv = self.value(*x);
                let kv = self.value(*k);
                let geom = crate::tensor::conv::conv_geom(xv.shape(), kv.shape(), *strides, *pads)?;
                if let Some(b) = bias {
                    if self.needs(*b) {
                        let c = geom.c_out;
                        let mut gb = Tensor::zeros(&[c])?;
                        for row in g_pre.data().chunks_exact(c) {
                            for (o, &v) in gb.data_mut().iter_mut().zip(row) {
                                *o += v;
                            }
                        }
                        Self::accumulate(grads, *b, gb);
                    }
                }
                if self.needs(*k) {
                    let gk = crate::tensor::conv::conv3d_grad_kernel(
                        xv,
                        g_pre.data(),
                        kv.shape(),
                        &geom,
                    );
                    Self::accumulate(grads, *k, gk);
                }
                if self.needs(*x) {
                    let gx = crate::tensor::conv::conv3d_grad_input(
                        kv,
                        g_pre.data(),
                        xv.shape(),
                        &geom,
                    );
                    Self::accumulate(grads, *x, gx);
                }
            }
            Op::Softmax { x, axis, tau } => {
                if self.needs(*x) {
                    Self::accumulate(grads, *x, softmax_backward(out, g, *axis, *tau));
                }
            }
            Op::SoftArgmax { s, tau } => {
                if self.needs(*s) {
                    let gs = soft_argmax_backward(self.value(*s), out, g, *tau)?;
                    Self::accumulate(grads, *s, gs);
                }
            }
            Op::StssCosine { v, window } => {
                if self.needs(*v) {
                    let gv = stss_cosine_backward(self.value(*v), window, out, g);
                    Self::accumulate(grads, *v, gv);
                }
            }
            Op::StssCrossDot { q, t, window } => {
                let (gq, gt) = cross_dot_backward(self.value(*q), self.value(*t), window, g);
                if self.needs(*q) {
                    Self::accumulate(grads, *q, gq);
                }
                if self.needs(*t) {
                    Self::accumulate(grads, *t, gt);
                }
            }
            Op::Bilinear { x, new_h, new_w } => {
                if self.needs(*x) {
                    let gx = bilinear_backward(self.value(*x).shape(), g, *new_h, *new_w)?;
                    Self::accumulate(grads, *x, gx);
                }
            }
            Op::TemporalShift { x, shift } => {
                if self.needs(*x) {
                    Self::accumulate(grads, *x, temporal_shift_backward(g, *shift));
                }
            }
            Op::Permute { x, perm } => {
                if self.needs(*x) {
                    let mut inverse = vec![0usize; perm.len()];
                    for (i, &p) in perm.iter().enumerate() {
                        inverse[p] = i;
                    }
                    Self::accumulate(grads, *x, g.permute(&inverse)?);
                }
            }
            Op::Reshape { x } => {
                if self.needs(*x) {
                    Self::accumulate(grads, *x, g.reshape(self.value(*x).shape())?);
                }
            }
            Op::GlobalMean { x } => {
                if self.needs(*x) {
                    let xv = self.value(*x);
                    let c = *xv.shape().last().unwrap();
                    let rows = xv.numel() / c;
                    let inv = E::from_f64(1.0 / rows as f64);
                    let mut gx = Tensor::zeros(xv.shape())?;
                    for row in gx.data_mut().chunks_mut(c) {
                        for (o, &gv) in row.iter_mut().zip(g.data()) {
                            *o = gv * inv;
                        }
                    }
                    Self::accumulate(grads, *x, gx);
                }
            }
            Op::CrossEntropy { logits, label } => {
                if self.needs(*logits) {
                    let lv = self.value(*logits);
                    let mut gx = softmax_over_axis(lv, 0, E::ONE)?;
                    let gl = g.data()[0];
                    let gd = gx.data_mut();
                    gd[*label] = gd[*label] - E::ONE;
                    for v in gd.iter_mut() {
                        *v = *v * gl;
                    }
                    Self::accumulate(grads, *logits, gx);
                }
            }
            Op::SumAll { x } => {
                if self.needs(*x) {
                    let gx = Tensor::filled(self.value(*x).shape(), g.data()[0])?;
                    Self::accumulate(grads, *x, gx);
                }
            }
            Op::NegativeControl { x } => {
                if self.needs(*x) {
                    // wrong on purpose: claims d(2x)/dx = 3
                    Self::accumulate(grads, *x, g.map(|v| v * E::from_f64(3.0)));
                }
            }
        }
        Ok(())
    }
}

/// `g * (out > 0)` — the ReLU mask read off the post-activation values.
fn masked_by_positive<E: Scalar>(g: &Tensor<E>, out: &Tensor<E>) -> Tensor<E> {
    let mut m = g.clone();
    for (gv, &ov) in m.data_mut().iter_mut().zip(out.data()) {
        if !(ov > E::ZERO) {
            *gv = E::ZERO;
        }
    }
    m
}

fn softmax_backward<E: Scalar>(y: &Tensor<E>, g: &Tensor<E>, axis: usize, tau: E) -> Tensor<E> {
    let n = y.shape()[axis];
    let inner: usize = y.shape()[axis + 1..].iter().product();
    let outer: usize = y.shape()[..axis].iter().product();
    let mut gx = Tensor::zeros(y.shape()).expect("softmax shape");
    for o in 0..outer {
        for i in 0..inner {
            let base = o * n * inner + i;
            let mut dot = E::ZERO;
            for j in 0..n {
                dot += g.data()[base + j * inner] * y.data()[base + j * inner];
            }
            for j in 0..n {
                let idx = base + j * inner;
                gx.data_mut()[idx] = y.data()[idx] * (g.data()[idx] - dot) / tau;
            }
        }
    }
    gx
}

/// Soft-argmax over the trailing `(U, V)` axes of a 6D tensor, in
/// numerator/denominator form so a uniform slice yields exactly (0, 0).
pub(crate) fn soft_argmax_forward<E: Scalar>(s: &Tensor<E>, tau: E) -> Result<Tensor<E>> {
    if s.rank() != 6 {
        return Err(Error::Shape(format!(
            "soft_argmax wants (T, X, Y, L, U, V), got {:?}",
            s.shape()
        )));
    }
    let sh = s.shape();
    let (u_n, v_n) = (sh[4], sh[5]);
    let (d_u, d_v) = ((u_n as i64 - 1) / 2, (v_n as i64 - 1) / 2);
    let lanes = s.numel() / (u_n * v_n);
    let mut out = Tensor::zeros(&[sh[0], sh[1], sh[2], sh[3], 2])?;
    for lane in 0..lanes {
        let cell = &s.data()[lane * u_n * v_n..(lane + 1) * u_n * v_n];
        let mut max = cell[0];
        for &v in cell {
            if v > max {
                max = v;
            }
        }
        let mut den = E::ZERO;
        let mut num_u = E::ZERO;
        let mut num_v = E::ZERO;
        for ui in 0..u_n {
            let u = E::from_f64((ui as i64 - d_u) as f64);
            for vi in 0..v_n {
                let v = E::from_f64((vi as i64 - d_v) as f64);
                let e = ((cell[ui * v_n + vi] - max) / tau).exp();
                den += e;
                num_u += e * u;
                num_v += e * v;
            }
        }
        out.data_mut()[lane * 2] = num_u / den;
        out.data_mut()[lane * 2 + 1] = num_v / den;
    }
    Ok(out)
}

/// d soft_argmax / d s: with weights `p` and output `F`,
/// `gS = (p/tau) * (gF_u (u - F_u) + gF_v (v - F_v))`.
fn soft_argmax_backward<E: Scalar>(
    s: &Tensor<E>,
    f: &Tensor<E>,
    gf: &Tensor<E>,
    tau: E,
) -> Result<Tensor<E>> {
    let sh = s.shape();
    let (u_n, v_n) = (sh[4], sh[5]);
    let (d_u, d_v) = ((u_n as i64 - 1) / 2, (v_n as i64 - 1) / 2);
    let lanes = s.numel() / (u_n * v_n);
    let mut gs = Tensor::zeros(sh)?;
    for lane in 0..lanes {
        let cell = &s.data()[lane * u_n * v_n..(lane + 1) * u_n * v_n];
        let mut max = cell[0];
        for &v in cell {
            if v > max {
                max = v;
            }
        }
        let mut den = E::ZERO;
        let mut weights = vec![E::ZERO; u_n * v_n];
        for (w, &sv) in weights.iter_mut().zip(cell) {
            let e = ((sv - max) / tau).exp();
            *w = e;
            den += e;
        }
        let (fu, fv) = (f.data()[lane * 2], f.data()[lane * 2 + 1]);
        let (gu, gv) = (gf.data()[lane * 2], gf.data()[lane * 2 + 1]);
        let out_cell = &mut gs.data_mut()[lane * u_n * v_n..(lane + 1) * u_n * v_n];
        for ui in 0..u_n {
            let u = E::from_f64((ui as i64 - d_u) as f64);
            for vi in 0..v_n {
                let v = E::from_f64((vi as i64 - d_v) as f64);
                let p = weights[ui * v_n + vi] / den;
                out_cell[ui * v_n + vi] = p / tau * (gu * (u - fu) + gv * (v - fv));
            }
        }
    }
    Ok(gs)
}

fn mode_n_backward<E: Scalar>(
    x: &Tensor<E>,
    w: &Tensor<E>,
    axis: usize,
    g_pre: &Tensor<E>,
    need_x: bool,
    need_w: bool,
) -> Result<(Option<Tensor<E>>, Option<Tensor<E>>)> {
    let rank = x.rank();
    if axis == rank - 1 {
        return mode_last_backward(x, w, g_pre, need_x, need_w);
    }
    let mut to_last: Vec<usize> = (0..rank).filter(|&a| a != axis).collect();
    to_last.push(axis);
    let x_m = x.permute(&to_last)?;
    let g_m = g_pre.permute(&to_last)?;
    let (gx_m, gw) = mode_last_backward(&x_m, w, &g_m, need_x, need_w)?;
    let gx = match gx_m {
        Some(gx_m) => {
            let mut back = vec![0usize; rank];
            for (i, &p) in to_last.iter().enumerate() {
                back[p] = i;
            }
            Some(gx_m.permute(&back)?)
        }
        None => None,
    };
    Ok((gx, gw))
}

fn mode_last_backward<E: Scalar>(
    x: &Tensor<E>,
    w: &Tensor<E>,
    g_pre: &Tensor<E>,
    need_x: bool,
    need_w: bool,
) -> Result<(Option<Tensor<E>>, Option<Tensor<E>>)> {
    let (c_out, c_in) = (w.shape()[0], w.shape()[1]);
    let rows = x.numel() / c_in;
    let gx = if need_x {
        // gX = g · W  ([rows x c_out] · [c_out x c_in])
        let mut gx = Tensor::zeros(x.shape())?;
        E::gemm(
            rows,
            c_out,
            c_in,
            g_pre.data(),
            c_out as isize,
            1,
            w.data(),
            c_in as isize,
            1,
            gx.data_mut(),
        );
        Some(gx)
    } else {
        None
    };
    let gw = if need_w {
        // gW = gᵀ · X  ([c_out x rows] · [rows x c_in])
        let mut gw = Tensor::zeros(w.shape())?;
        E::gemm(
            c_out,
            rows,
            c_in,
            g_pre.data(),
            1,
            c_out as isize,
            x.data(),
            c_in as isize,
            1,
            gw.data_mut(),
        );
        Some(gw)
    } else {
        None
    };
    Ok((gx, gw))
}

fn bilinear_backward<E: Scalar>(
    in_shape: &[usize],
    g: &Tensor<E>,
    new_h: usize,
    new_w: usize,
) -> Result<Tensor<E>> {
    let plan = crate::tensor::BilinearPlan::new(in_shape, new_h, new_w)?;
    let (h, w, c) = (plan.in_h, plan.in_w, plan.channels);
    let mut gx = Tensor::zeros(in_shape)?;
    for b in 0..plan.batch {
        let src = &g.data()[b * new_h * new_w * c..(b + 1) * new_h * new_w * c];
        let dst = &mut gx.data_mut()[b * h * w * c..(b + 1) * h * w * c];
        for (oy, &(y0, y1, wy)) in plan.rows.iter().enumerate() {
            for (ox, &(x0, x1, wx)) in plan.cols.iter().enumerate() {
                let gcell = &src[(oy * new_w + ox) * c..(oy * new_w + ox + 1) * c];
                let (wy, wx) = (E::from_f64(wy), E::from_f64(wx));
                let one = E::ONE;
                for ch in 0..c {
                    let gv = gcell[ch];
                    dst[(y0 * w + x0) * c + ch] += gv * (one - wy) * (one - wx);
                    dst[(y0 * w + x1) * c + ch] += gv * (one - wy) * wx;
                    dst[(y1 * w + x0) * c + ch] += gv * wy * (one - wx);
                    dst[(y1 * w + x1) * c + ch] += gv * wy * wx;
                }
            }
        }
    }
    Ok(gx)
}

pub(crate) fn temporal_shift_forward<E: Scalar>(x: &Tensor<E>, shift: usize) -> Tensor<E> {
    let (t_n, x_n, y_n, c) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let mut out = x.clone();
    let plane = x_n * y_n;
    for t in 0..t_n {
        for p in 0..plane {
            let dst = (t * plane + p) * c;
            // forward block: out[t] = in[t-1]
            for ch in 0..shift {
                out.data_mut()[dst + ch] = if t == 0 {
                    E::ZERO
                } else {
                    x.data()[((t - 1) * plane + p) * c + ch]
                };
            }
            // backward block: out[t] = in[t+1]
            for ch in shift..2 * shift {
                out.data_mut()[dst + ch] = if t + 1 == t_n {
                    E::ZERO
                } else {
                    x.data()[((t + 1) * plane + p) * c + ch]
                };
            }
        }
    }
    out
}

fn temporal_shift_backward<E: Scalar>(g: &Tensor<E>, shift: usize) -> Tensor<E> {
    let (t_n, x_n, y_n, c) = (g.shape()[0], g.shape()[1], g.shape()[2], g.shape()[3]);
    let mut gx = g.clone();
    let plane = x_n * y_n;
    for t in 0..t_n {
        for p in 0..plane {
            let dst = (t * plane + p) * c;
            // transpose of "out[t] = in[t-1]" is "gin[t] = gout[t+1]"
            for ch in 0..shift {
                gx.data_mut()[dst + ch] = if t + 1 == t_n {
                    E::ZERO
                } else {
                    g.data()[((t + 1) * plane + p) * c + ch]
                };
            }
            for ch in shift..2 * shift {
                gx.data_mut()[dst + ch] = if t == 0 {
                    E::ZERO
                } else {
                    g.data()[((t - 1) * plane + p) * c + ch]
                };
            }
        }
    }
    gx
}

pub(crate) fn cross_entropy_value<E: Scalar>(logits: &[E], label: usize) -> E {
    let mut max = logits[0];
    for &v in logits {
        if v > max {
            max = v;
        }
    }
    let mut sum = E::ZERO;
    for &v in logits {
        sum += (v - max).exp();
    }
    sum.ln() - (logits[label] - max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_backward_is_ones() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_vec(&[3], vec![1.0, -2.0, 5.0]).unwrap(), true);
        let loss = tape.sum_all(x);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn dead_relu_has_zero_grad() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_vec(&[3], vec![-1.0, -2.0, -0.5]).unwrap(), true);
        let r = tape.relu(x);
        let loss = tape.sum_all(r);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn backward_accumulates_across_calls() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap(), true);
        let loss = tape.sum_all(x);
        tape.backward(loss).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 2.0]);
        tape.zero_grads();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap(), true);
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn cross_entropy_uniform_is_log_k() {
        let mut tape = Tape::<f64>::new();
        let logits = tape.leaf(Tensor::zeros(&[9]).unwrap(), true);
        let loss = tape.cross_entropy(logits, 3).unwrap();
        assert!((tape.value(loss).data()[0] - (9.0f64).ln()).abs() < 1e-12);
        let mut tape = Tape::<f64>::new();
        let mut lv = vec![0.0; 4];
        lv[2] = 50.0;
        let logits = tape.leaf(Tensor::from_vec(&[4], lv).unwrap(), false);
        let loss = tape.cross_entropy(logits, 2).unwrap();
        assert!(tape.value(loss).data()[0] < 1e-20);
    }

    #[test]
    fn cross_entropy_rejects_bad_label() {
        let mut tape = Tape::<f64>::new();
        let logits = tape.leaf(Tensor::zeros(&[4]).unwrap(), false);
        assert!(tape.cross_entropy(logits, 4).is_err());
    }

    #[test]
    fn temporal_shift_definition() {
        // T=2, C=4, f=1/4: channel 0 of frame 1 = channel 0 of frame 0,
        // channel 0 of frame 0 = 0
        let x = Tensor::from_vec(&[2, 1, 1, 4], (1..=8).map(|v| v as f64).collect()).unwrap();
        let mut tape = Tape::<f64>::new();
        let xv = tape.leaf(x.clone(), false);
        let s = tape.temporal_shift(xv, 0.25).unwrap();
        let out = tape.value(s);
        assert_eq!(out.get(&[1, 0, 0, 0]), x.get(&[0, 0, 0, 0]));
        assert_eq!(out.get(&[0, 0, 0, 0]), 0.0);
        // backward-shift channel: out[0, c1] = in[1, c1], out[1, c1] = 0
        assert_eq!(out.get(&[0, 0, 0, 1]), x.get(&[1, 0, 0, 1]));
        assert_eq!(out.get(&[1, 0, 0, 1]), 0.0);
        // untouched channels
        assert_eq!(out.get(&[0, 0, 0, 2]), x.get(&[0, 0, 0, 2]));
        assert_eq!(out.get(&[1, 0, 0, 3]), x.get(&[1, 0, 0, 3]));
    }

    #[test]
    fn temporal_shift_identity_when_fraction_rounds_to_zero() {
        let x = Tensor::from_vec(&[2, 1, 1, 3], (0..6).map(|v| v as f64).collect()).unwrap();
        let mut tape = Tape::<f64>::new();
        let xv = tape.leaf(x.clone(), false);
        let s = tape.temporal_shift(xv, 0.25).unwrap(); // floor(0.75) = 0
        assert_eq!(tape.value(s).data(), x.data());
    }

    #[test]
    fn soft_argmax_uniform_is_exact_zero() {
        let s = Tensor::filled(&[1, 1, 1, 1, 9, 9], 0.37f64).unwrap();
        let out = soft_argmax_forward(&s, 0.01).unwrap();
        assert_eq!(out.data(), &[0.0, 0.0]);
    }

    #[test]
    fn soft_argmax_peak_recovers_displacement() {
        let mut s = Tensor::zeros(&[1, 1, 1, 1, 5, 5]).unwrap();
        // displacement (u, v) = (2, -1) lives at index (d_u + 2, d_v - 1) = (4, 1)
        s.data_mut()[4 * 5 + 1] = 1.0;
        let out = soft_argmax_forward(&s, 0.01).unwrap();
        assert!((out.data()[0] - 2.0).abs() < 1e-3, "got {:?}", out.data());
        assert!((out.data()[1] + 1.0).abs() < 1e-3);
    }
}
