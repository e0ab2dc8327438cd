//! Minimal reverse-mode gradient tape over the rank-4 kernel set.
//!
//! Forward values are recorded into an arena; `backward` replays the ops in
//! reverse and returns one gradient per registered leaf. Leaves unreachable
//! from the loss get exact zeros. Single-owner: record and backward from one
//! logical thread.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::scalar::{lit, Scalar};
use crate::tensor::{self, Axis, ConvSpec, Tensor4};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Clone, Debug)]
enum Op<T> {
    Conv2d { x: NodeId, w: NodeId, spec: ConvSpec, out: NodeId },
    BiasAdd { x: NodeId, b: NodeId, out: NodeId },
    Bilinear { x: NodeId, out: NodeId },
    Softmax { x: NodeId, axis: Axis, out: NodeId },
    Sigmoid { x: NodeId, out: NodeId },
    Add { a: NodeId, b: NodeId, out: NodeId },
    Sub { a: NodeId, b: NodeId, out: NodeId },
    Mul { a: NodeId, b: NodeId, out: NodeId },
    Scale { x: NodeId, k: T, out: NodeId },
    MulConst { x: NodeId, c: Tensor4<T>, out: NodeId },
    Abs { x: NodeId, out: NodeId },
    LogFloor { x: NodeId, floor: T, out: NodeId },
    Sum { x: NodeId, out: NodeId },
    Mean { x: NodeId, out: NodeId },
    Var { x: NodeId, out: NodeId },
    DiffH { x: NodeId, out: NodeId },
    DiffW { x: NodeId, out: NodeId },
    FlipW { x: NodeId, out: NodeId },
    PadKernel { x: NodeId, out: NodeId },
    Reshape { x: NodeId, out: NodeId },
}

/// Reverse-mode tape: operation sequence + leaf registry.
pub struct GradTape<T: Scalar> {
    nodes: Vec<Tensor4<T>>,
    ops: Vec<Op<T>>,
    leaves: Vec<(String, NodeId)>,
    consumed: bool,
}

impl<T: Scalar> Default for GradTape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> GradTape<T> {
    pub fn new() -> Self {
        GradTape {
            nodes: Vec::new(),
            ops: Vec::new(),
            leaves: Vec::new(),
            consumed: false,
        }
    }

    fn push(&mut self, value: Tensor4<T>) -> NodeId {
        self.nodes.push(value);
        NodeId(self.nodes.len() - 1)
    }

    /// Register a named differentiable leaf.
    pub fn leaf(&mut self, name: impl Into<String>, value: Tensor4<T>) -> Result<NodeId> {
        let name = name.into();
        if self.leaves.iter().any(|(n, _)| *n == name) {
            return Err(Error::Tape(format!("duplicate leaf name {name}")));
        }
        let id = self.push(value);
        self.leaves.push((name, id));
        Ok(id)
    }

    /// Record a constant: participates in the forward but receives no gradient entry.
    pub fn constant(&mut self, value: Tensor4<T>) -> NodeId {
        self.push(value)
    }

    pub fn value(&self, id: NodeId) -> &Tensor4<T> {
        &self.nodes[id.0]
    }

    pub fn scalar_value(&self, id: NodeId) -> Result<T> {
        let v = self.value(id);
        if v.numel() != 1 {
            return Err(Error::Tape(format!("node has dims {:?}, not scalar", v.dims())));
        }
        Ok(v.data()[0])
    }

    pub fn conv2d(&mut self, x: NodeId, spec: ConvSpec, w: NodeId) -> Result<NodeId> {
        let y = tensor::conv2d(self.value(x), &spec, self.value(w), None)?;
        let out = self.push(y);
        self.ops.push(Op::Conv2d { x, w, spec, out });
        Ok(out)
    }

    /// Add a `(1, c, 1, 1)` bias tensor across channels.
    pub fn bias_add(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let [_, c, _, _] = self.value(x).dims();
        if self.value(b).dims() != [1, c, 1, 1] {
            return Err(Error::shape(format!(
                "bias dims {:?} != [1, {c}, 1, 1]",
                self.value(b).dims()
            )));
        }
        let y = tensor::add(self.value(x), self.value(b))?;
        let out = self.push(y);
        self.ops.push(Op::BiasAdd { x, b, out });
        Ok(out)
    }

    pub fn bilinear(&mut self, x: NodeId, out_h: usize, out_w: usize) -> Result<NodeId> {
        let y = tensor::bilinear_resize(self.value(x), out_h, out_w)?;
        let out = self.push(y);
        self.ops.push(Op::Bilinear { x, out });
        Ok(out)
    }

    pub fn softmax(&mut self, x: NodeId, axis: Axis) -> NodeId {
        let y = tensor::softmax_axis(self.value(x), axis);
        let out = self.push(y);
        self.ops.push(Op::Softmax { x, axis, out });
        out
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let y = tensor::sigmoid(self.value(x));
        let out = self.push(y);
        self.ops.push(Op::Sigmoid { x, out });
        out
    }

    fn same_dims(&self, a: NodeId, b: NodeId) -> Result<()> {
        if self.value(a).dims() != self.value(b).dims() {
            return Err(Error::shape(format!(
                "{:?} vs {:?}",
                self.value(a).dims(),
                self.value(b).dims()
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_dims(a, b)?;
        let y = tensor::add(self.value(a), self.value(b))?;
        let out = self.push(y);
        self.ops.push(Op::Add { a, b, out });
        Ok(out)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_dims(a, b)?;
        let y = tensor::sub(self.value(a), self.value(b))?;
        let out = self.push(y);
        self.ops.push(Op::Sub { a, b, out });
        Ok(out)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_dims(a, b)?;
        let y = tensor::mul(self.value(a), self.value(b))?;
        let out = self.push(y);
        self.ops.push(Op::Mul { a, b, out });
        Ok(out)
    }

    pub fn scale(&mut self, x: NodeId, k: T) -> NodeId {
        let y = self.value(x).scale(k);
        let out = self.push(y);
        self.ops.push(Op::Scale { x, k, out });
        out
    }

    /// Elementwise product with a non-differentiable tensor (drop masks etc.).
    pub fn mul_const(&mut self, x: NodeId, c: Tensor4<T>) -> Result<NodeId> {
        if self.value(x).dims() != c.dims() {
            return Err(Error::shape(format!("{:?} vs {:?}", self.value(x).dims(), c.dims())));
        }
        let y = tensor::mul(self.value(x), &c)?;
        let out = self.push(y);
        self.ops.push(Op::MulConst { x, c, out });
        Ok(out)
    }

    pub fn abs(&mut self, x: NodeId) -> NodeId {
        let y = self.value(x).map(|v| v.abs());
        let out = self.push(y);
        self.ops.push(Op::Abs { x, out });
        out
    }

    /// ln(max(x, floor)): the stabilized log used by the KL losses.
    pub fn log_floor(&mut self, x: NodeId, floor: T) -> NodeId {
        let y = self.value(x).map(|v| v.max(floor).ln());
        let out = self.push(y);
        self.ops.push(Op::LogFloor { x, floor, out });
        out
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let mut s = T::zero();
        for v in self.value(x).data() {
            s += *v;
        }
        let out = self.push(Tensor4::new([1, 1, 1, 1], vec![s]).unwrap());
        self.ops.push(Op::Sum { x, out });
        out
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        let m = tensor::mean_all(self.value(x))?;
        let out = self.push(Tensor4::new([1, 1, 1, 1], vec![m]).unwrap());
        self.ops.push(Op::Mean { x, out });
        Ok(out)
    }

    pub fn var(&mut self, x: NodeId) -> Result<NodeId> {
        let v = tensor::var_all(self.value(x))?;
        let out = self.push(Tensor4::new([1, 1, 1, 1], vec![v]).unwrap());
        self.ops.push(Op::Var { x, out });
        Ok(out)
    }

    /// Forward difference along height: `out[h] = x[h+1] - x[h]`.
    pub fn diff_h(&mut self, x: NodeId) -> Result<NodeId> {
        let [n, c, h, w] = self.value(x).dims();
        if h < 2 {
            return Err(Error::shape("diff_h needs height >= 2"));
        }
        let v = self.value(x);
        let y = Tensor4::from_fn([n, c, h - 1, w], |ni, ci, hi, wi| {
            v.at(ni, ci, hi + 1, wi) - v.at(ni, ci, hi, wi)
        });
        let out = self.push(y);
        self.ops.push(Op::DiffH { x, out });
        Ok(out)
    }

    /// Forward difference along width.
    pub fn diff_w(&mut self, x: NodeId) -> Result<NodeId> {
        let [n, c, h, w] = self.value(x).dims();
        if w < 2 {
            return Err(Error::shape("diff_w needs width >= 2"));
        }
        let v = self.value(x);
        let y = Tensor4::from_fn([n, c, h, w - 1], |ni, ci, hi, wi| {
            v.at(ni, ci, hi, wi + 1) - v.at(ni, ci, hi, wi)
        });
        let out = self.push(y);
        self.ops.push(Op::DiffW { x, out });
        Ok(out)
    }

    pub fn flip_w(&mut self, x: NodeId) -> NodeId {
        let y = tensor::flip_w(self.value(x));
        let out = self.push(y);
        self.ops.push(Op::FlipW { x, out });
        out
    }

    /// Zero-pad a kernel tensor so its spatial extent is centered inside
    /// `(k_h, k_w)`; extents must share parity so centering is exact.
    pub fn pad_kernel(&mut self, x: NodeId, k_h: usize, k_w: usize) -> Result<NodeId> {
        let [co, cg, sh, sw] = self.value(x).dims();
        if sh > k_h || sw > k_w || !(k_h - sh).is_multiple_of(2) || !(k_w - sw).is_multiple_of(2) {
            return Err(Error::shape(format!(
                "cannot center {}x{} inside {}x{}",
                sh, sw, k_h, k_w
            )));
        }
        let (oh, ow) = ((k_h - sh) / 2, (k_w - sw) / 2);
        let v = self.value(x);
        let mut y = Tensor4::zeros([co, cg, k_h, k_w]);
        for o in 0..co {
            for i in 0..cg {
                for a in 0..sh {
                    for b in 0..sw {
                        y.set(o, i, a + oh, b + ow, v.at(o, i, a, b));
                    }
                }
            }
        }
        let out = self.push(y);
        self.ops.push(Op::PadKernel { x, out });
        Ok(out)
    }

    pub fn reshape(&mut self, x: NodeId, dims: [usize; 4]) -> Result<NodeId> {
        let y = self.value(x).reshape(dims)?;
        let out = self.push(y);
        self.ops.push(Op::Reshape { x, out });
        Ok(out)
    }

    /// Reverse sweep from `root` (seed gradient `seed`), accumulating into `grads`.
    fn sweep(&self, root: NodeId, seed: T, grads: &mut [Option<Tensor4<T>>]) {
        let mut local: Vec<Option<Tensor4<T>>> = vec![None; self.nodes.len()];
        local[root.0] = Some(Tensor4::full(self.nodes[root.0].dims(), seed));
        for op in self.ops.iter().rev() {
            self.backward_op(op, &mut local);
        }
        for (slot, l) in grads.iter_mut().zip(local) {
            if let Some(g) = l {
                match slot {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(g.data().iter()) {
                            *a += *b;
                        }
                    }
                    None => *slot = Some(g),
                }
            }
        }
    }

    fn accumulate(grads: &mut [Option<Tensor4<T>>], id: NodeId, g: Tensor4<T>) {
        match &mut grads[id.0] {
            Some(acc) => {
                for (a, b) in acc.data_mut().iter_mut().zip(g.data().iter()) {
                    *a += *b;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn backward_op(&self, op: &Op<T>, grads: &mut [Option<Tensor4<T>>]) {
        match op {
            Op::Conv2d { x, w, spec, out } => {
                let Some(go) = grads[out.0].clone() else { return };
                let gx = tensor::conv2d_grad_input(&go, spec, &self.nodes[w.0], self.nodes[x.0].dims());
                let gw = tensor::conv2d_grad_weight(&go, spec, &self.nodes[x.0]);
                Self::accumulate(grads, *x, gx);
                Self::accumulate(grads, *w, gw);
            }
            Op::BiasAdd { x, b, out } => {
                let Some(go) = grads[out.0].clone() else { return };
                let [n, c, h, w] = go.dims();
                let mut gb = Tensor4::zeros([1, c, 1, 1]);
                for ni in 0..n {
                    for ci in 0..c {
                        let mut s = gb.at(0, ci, 0, 0);
                        for hi in 0..h {
                            for wi in 0..w {
                                s += go.at(ni, ci, hi, wi);
                            }
                        }
                        gb.set(0, ci, 0, 0, s);
                    }
                }
                Self::accumulate(grads, *x, go);
                Self::accumulate(grads, *b, gb);
            }
            Op::Bilinear { x, out } => {
                let Some(go) = grads[out.0].clone() else { return };
                let [n, c, ih, iw] = self.nodes[x.0].dims();
                let [_, _, oh, ow] = go.dims();
                let mut gx = Tensor4::zeros([n, c, ih, iw]);
                for ni in 0..n {
                    for ci in 0..c {
                        for a in 0..oh {
                            let (h0, h1, fh) = tensor::bilinear_axis(oh, ih, a);
                            for b in 0..ow {
                                let (w0, w1, fw) = tensor::bilinear_axis(ow, iw, b);
                                let g = go.at(ni, ci, a, b);
                                let (fh, fw) = (lit::<T>(fh), lit::<T>(fw));
                                let one = T::one();
                                let add = |gx: &mut Tensor4<T>, hh, ww, k: T| {
                                    let v = gx.at(ni, ci, hh, ww) + g * k;
                                    gx.set(ni, ci, hh, ww, v);
                                };
                                add(&mut gx, h0, w0, (one - fh) * (one - fw));
                                add(&mut gx, h0, w1, (one - fh) * fw);
                                add(&mut gx, h1, w0, fh * (one - fw));
                                add(&mut gx, h1, w1, fh * fw);
                            }
                        }
                    }
                }
                Self::accumulate(grads, *x, gx);
            }
            Op::Softmax { x, axis, out } => {
                let Some(go) = grads[out.0].clone() else { return };
                let y = &self.nodes[out.0];
                let dims = y.dims();
                let idx = axis.index();
                let len = dims[idx];
                let outer: usize = dims[..idx].iter().product();
                let inner: usize = dims[idx + 1..].iter().product();
                let mut gx = Tensor4::zeros(dims);
                let yd = y.data();
                let gd = go.data();
                let gxd = gx.data_mut();
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let mut dot = T::zero();
                        for k in 0..len {
                            dot += gd[base + k * inner] * yd[base + k * inner];
                        }
                        for k in 0..len {
                            gxd[base + k * inner] =
                                yd[base + k * inner] * (gd[base + k * inner] - dot);
                        }
                    }
                }
                Self::accumulate(grads, *x, gx);
            }
            Op::Sigmoid { x, out } => {
                let Some(go) = grads[out.0].clone() else { return };
                let y = &self.nodes[out.0];
                let mut gx = go.clone();
                for (g, &yv) in gx.data_mut().iter_mut().zip(y.data().iter()) {
                    *g = *g * yv * (T::one() - yv);
                }
                Self::accumulate(grads, *x, gx);
            }
            Op::Add { a, b, out } => {
                let Some(go) = grads[out.0].clone() else { return };
                Self::accumulate(grads, *a, go.clone());
                Self::accumulate(grads, *b, go);
            }
            Op::Sub { a, b, out } => {
                let Some(go) = grads[out.0].clone() else { return };
                Self::accumulate(grads, *a, go.clone());
                Self::accumulate(grads, *b, go.scale(-T::one()));
            }
            Op::Mul { a, b, out } => {
                let Some(go) = grads[out.0].clone() else { return };
                let ga = tensor::mul(&go, &self.nodes[b.0]).expect("dims checked");
                let gb = tensor::mul(&go, &self.nodes[a.0]).expect("dims checked");
                Self::accumulate(grads, *a, ga);
                Self::accumulate(grads, *b, gb);
            }
            Op::Scale { x, k, out } => {
                let Some(go) = grads[out.0].clone() else { return };
                Self::accumulate(grads, *x, go.scale(*k));
            }
            Op::MulConst { x, c, out } => {
                let Some(go) = grads[out.0].clone() else { return };
                let gx = tensor::mul(&go, c).expect("dims checked");
                Self::accumulate(grads, *x, gx);
            }
            Op::Abs { x, out } => {
                let Some(go) = grads[out.0].clone() else { return };
                let xv = &self.nodes[x.0];
                let mut gx = go.clone();
                for (g, &v) in gx.data_mut().iter_mut().zip(xv.data().iter()) {
                    *g *= if v > T::zero() {
                        T::one()
                    } else if v < T::zero() {
                        -T::one()
                    } else {
                        T::zero()
                    };
                }
                Self::accumulate(grads, *x, gx);
            }
            Op::LogFloor { x, floor, out } => {
                let Some(go) = grads[out.0].clone() else { return };
                let xv = &self.nodes[x.0];
                let mut gx = go.clone();
                for (g, &v) in gx.data_mut().iter_mut().zip(xv.data().iter()) {
                    *g = if v > *floor { *g / v } else { T::zero() };
                }
                Self::accumulate(grads, *x, gx);
            }
            Op::Sum { x, out } => {
                let Some(go) = grads[out.0].clone() else { return };
                let g = go.data()[0];
                Self::accumulate(grads, *x, Tensor4::full(self.nodes[x.0].dims(), g));
            }
            Op::Mean { x, out } => {
                let Some(go) = grads[out.0].clone() else { return };
                let n = self.nodes[x.0].numel();
                let g = go.data()[0] / lit::<T>(n as f64);
                Self::accumulate(grads, *x, Tensor4::full(self.nodes[x.0].dims(), g));
            }
            Op::Var { x, out } => {
                let Some(go) = grads[out.0].clone() else { return };
                let xv = &self.nodes[x.0];
                let n = lit::<T>(xv.numel() as f64);
                let m = tensor::mean_all(xv).expect("non-empty");
                let g = go.data()[0];
                let two = lit::<T>(2.0);
                let gx = xv.map(|v| g * two * (v - m) / n);
                Self::accumulate(grads, *x, gx);
            }
            Op::DiffH { x, out } => {
                let Some(go) = grads[out.0].clone() else { return };
                let [n, c, h, w] = self.nodes[x.0].dims();
                let mut gx = Tensor4::zeros([n, c, h, w]);
                for ni in 0..n {
                    for ci in 0..c {
                        for hi in 0..h - 1 {
                            for wi in 0..w {
                                let g = go.at(ni, ci, hi, wi);
                                let v = gx.at(ni, ci, hi + 1, wi) + g;
                                gx.set(ni, ci, hi + 1, wi, v);
                                let v = gx.at(ni, ci, hi, wi) - g;
                                gx.set(ni, ci, hi, wi, v);
                            }
                        }
                    }
                }
                Self::accumulate(grads, *x, gx);
            }
            Op::DiffW { x, out } => {
                let Some(go) = grads[out.0].clone() else { return };
                let [n, c, h, w] = self.nodes[x.0].dims();
                let mut gx = Tensor4::zeros([n, c, h, w]);
                for ni in 0..n {
                    for ci in 0..c {
                        for hi in 0..h {
                            for wi in 0..w - 1 {
                                let g = go.at(ni, ci, hi, wi);
                                let v = gx.at(ni, ci, hi, wi + 1) + g;
                                gx.set(ni, ci, hi, wi + 1, v);
                                let v = gx.at(ni, ci, hi, wi) - g;
                                gx.set(ni, ci, hi, wi, v);
                            }
                        }
                    }
                }
                Self::accumulate(grads, *x, gx);
            }
            Op::FlipW { x, out } => {
                let Some(go) = grads[out.0].clone() else { return };
                Self::accumulate(grads, *x, tensor::flip_w(&go));
            }
            Op::PadKernel { x, out } => {
                let Some(go) = grads[out.0].clone() else { return };
                let [co, cg, sh, sw] = self.nodes[x.0].dims();
                let [_, _, kh, kw] = go.dims();
                let (oh, ow) = ((kh - sh) / 2, (kw - sw) / 2);
                let gx = Tensor4::from_fn([co, cg, sh, sw], |o, i, a, b| go.at(o, i, a + oh, b + ow));
                Self::accumulate(grads, *x, gx);
            }
            Op::Reshape { x, out } => {
                let Some(go) = grads[out.0].clone() else { return };
                let gx = go.reshape(self.nodes[x.0].dims()).expect("same numel");
                Self::accumulate(grads, *x, gx);
            }
        }
    }

    fn leaf_grads(&self, grads: Vec<Option<Tensor4<T>>>) -> HashMap<String, Tensor4<T>> {
        let mut map = HashMap::new();
        for (name, id) in &self.leaves {
            let g = grads[id.0]
                .clone()
                .unwrap_or_else(|| Tensor4::zeros(self.nodes[id.0].dims()));
            map.insert(name.clone(), g);
        }
        map
    }

    /// Backward from one recorded scalar. Errors if the node is not scalar or
    /// the tape was already consumed.
    pub fn backward(&mut self, loss: NodeId) -> Result<HashMap<String, Tensor4<T>>> {
        self.backward_weighted(&[(loss, T::one())])
    }

    /// One reverse sweep per (scalar, coefficient) pair, gradients summed.
    pub fn backward_weighted(
        &mut self,
        losses: &[(NodeId, T)],
    ) -> Result<HashMap<String, Tensor4<T>>> {
        if self.consumed {
            return Err(Error::Tape("tape already consumed".into()));
        }
        for (loss, _) in losses {
            if self.nodes[loss.0].numel() != 1 {
                return Err(Error::Tape(format!(
                    "loss node has dims {:?}, not scalar",
                    self.nodes[loss.0].dims()
                )));
            }
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor4<T>>> = vec![None; self.nodes.len()];
        for (loss, coeff) in losses {
            self.sweep(*loss, *coeff, &mut grads);
        }
        Ok(self.leaf_grads(grads))
    }
}

/// Central finite differences of `f` around `x`, for gradient verification.
pub fn finite_difference<T: Scalar>(
    x: &Tensor4<T>,
    eps: f64,
    mut f: impl FnMut(&Tensor4<T>) -> T,
) -> Tensor4<T> {
    let mut g = Tensor4::zeros(x.dims());
    for i in 0..x.numel() {
        let mut hi = x.clone();
        hi.data_mut()[i] += lit::<T>(eps);
        let mut lo = x.clone();
        lo.data_mut()[i] -= lit::<T>(eps);
        g.data_mut()[i] = (f(&hi) - f(&lo)) / lit::<T>(2.0 * eps);
    }
    g
}

/// Relative gradient error in the max norm: ||got - want||_inf normalized by
/// the dominant gradient magnitude. Robust at elementwise zero crossings,
/// where per-element ratios only measure finite-difference truncation noise.
pub fn max_rel_err<T: Scalar>(got: &Tensor4<T>, want: &Tensor4<T>) -> f64 {
    let mut diff = 0.0f64;
    let mut scale = 0.0f64;
    for (a, b) in got.data().iter().zip(want.data().iter()) {
        let (a, b) = (a.to_f64().unwrap(), b.to_f64().unwrap());
        diff = diff.max((a - b).abs());
        scale = scale.max(a.abs().max(b.abs()));
    }
    if scale < 1e-12 {
        return diff;
    }
    diff / scale
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn rand_t(rng: &mut Rng, dims: [usize; 4]) -> Tensor4<f64> {
        Tensor4::from_fn(dims, |_, _, _, _| rng.uniform(-1.0, 1.0))
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = GradTape::<f64>::new();
        let x = tape.leaf("x", Tensor4::full([2, 3, 2, 2], 1.5)).unwrap();
        let loss = tape.sum(x);
        let g = tape.backward(loss).unwrap();
        assert!(g["x"].data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn half_square_gradient_is_x() {
        let mut rng = Rng::new(1);
        let xv = rand_t(&mut rng, [1, 2, 3, 3]);
        let mut tape = GradTape::<f64>::new();
        let x = tape.leaf("x", xv.clone()).unwrap();
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq);
        let loss = tape.scale(s, 0.5);
        let g = tape.backward(loss).unwrap();
        assert!(g["x"].max_abs_diff(&xv).unwrap() < 1e-12);
    }

    #[test]
    fn unreachable_leaf_gets_exact_zero() {
        let mut tape = GradTape::<f64>::new();
        let x = tape.leaf("x", Tensor4::full([1, 1, 2, 2], 2.0)).unwrap();
        let _unused = tape.leaf("unused", Tensor4::full([1, 1, 1, 1], 5.0)).unwrap();
        let loss = tape.sum(x);
        let g = tape.backward(loss).unwrap();
        assert!(g["unused"].data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn tape_consumed_errors_and_requires_scalar() {
        let mut tape = GradTape::<f64>::new();
        let x = tape.leaf("x", Tensor4::full([1, 1, 2, 2], 2.0)).unwrap();
        assert!(tape.backward(x).is_err()); // not scalar (tape not yet consumed)
        let mut tape = GradTape::<f64>::new();
        let x = tape.leaf("x", Tensor4::full([1, 1, 2, 2], 2.0)).unwrap();
        let loss = tape.sum(x);
        tape.backward(loss).unwrap();
        assert!(tape.backward(loss).is_err());
    }

    /// Every differentiable kernel against central finite differences at 64-bit.
    #[test]
    fn kernels_match_finite_differences() {
        let mut rng = Rng::new(42);
        type Case = (&'static str, fn(&mut GradTape<f64>, NodeId) -> NodeId);
        let cases: Vec<Case> = vec![
            ("conv", |t, x| {
                let spec = ConvSpec::new(3, 4, 3, 3).with_same_padding();
                let w = t.constant(Tensor4::from_fn(spec.weight_dims(), |a, b, c, d| {
                    ((a * 7 + b * 5 + c * 3 + d) as f64 * 0.17).sin()
                }));
                let y = t.conv2d(x, spec, w).unwrap();
                t.sum(y)
            }),
            ("bilinear", |t, x| {
                let y = t.bilinear(x, 9, 11).unwrap();
                let sq = t.mul(y, y).unwrap();
                t.sum(sq)
            }),
            ("softmax_c", |t, x| {
                let y = t.softmax(x, Axis::Channel);
                let sq = t.mul(y, y).unwrap();
                t.sum(sq)
            }),
            ("softmax_h", |t, x| {
                let y = t.softmax(x, Axis::Height);
                let sq = t.mul(y, y).unwrap();
                t.sum(sq)
            }),
            ("sigmoid", |t, x| {
                let y = t.sigmoid(x);
                let sq = t.mul(y, y).unwrap();
                t.sum(sq)
            }),
            ("mean", |t, x| {
                let y = t.mul(x, x).unwrap();
                t.mean(y).unwrap()
            }),
            ("var", |t, x| t.var(x).unwrap()),
            ("abs_mean", |t, x| {
                let y = t.abs(x);
                t.mean(y).unwrap()
            }),
            ("diff_flip", |t, x| {
                let d = t.diff_h(x).unwrap();
                let d = t.flip_w(d);
                let d2 = t.diff_w(d).unwrap();
                let sq = t.mul(d2, d2).unwrap();
                t.sum(sq)
            }),
            ("log_floor", |t, x| {
                let s = t.sigmoid(x); // keep arguments positive
                let l = t.log_floor(s, 1e-12);
                let y = t.mul(s, l).unwrap();
                t.sum(y)
            }),
        ];
        for (name, build) in cases {
            let xv = rand_t(&mut rng, [2, 3, 4, 5]);
            let mut tape = GradTape::<f64>::new();
            let x = tape.leaf("x", xv.clone()).unwrap();
            let loss = build(&mut tape, x);
            let grads = tape.backward(loss).unwrap();
            let fd = finite_difference(&xv, 1e-5, |xp| {
                let mut t2 = GradTape::<f64>::new();
                let x2 = t2.leaf("x", xp.clone()).unwrap();
                let l2 = build(&mut t2, x2);
                t2.scalar_value(l2).unwrap()
            });
            let err = max_rel_err(&grads["x"], &fd);
            assert!(err <= 1e-6, "{name}: max rel err {err}");
        }
    }

    #[test]
    #[allow(clippy::type_complexity)]
    fn conv_weight_and_bias_gradients_match_fd() {
        let mut rng = Rng::new(7);
        let spec = ConvSpec::new(4, 6, 3, 3).with_groups(2).with_same_padding();
        let xv = rand_t(&mut rng, [1, 4, 5, 5]);
        let wv = rand_t(&mut rng, spec.weight_dims());
        let bv = rand_t(&mut rng, [1, 6, 1, 1]);

        let run = |w: &Tensor4<f64>, b: &Tensor4<f64>| -> (f64, Option<(Tensor4<f64>, Tensor4<f64>)>) {
            let mut t = GradTape::<f64>::new();
            let x = t.constant(xv.clone());
            let wn = t.leaf("w", w.clone()).unwrap();
            let bn = t.leaf("b", b.clone()).unwrap();
            let y = t.conv2d(x, spec, wn).unwrap();
            let y = t.bias_add(y, bn).unwrap();
            let sq = t.mul(y, y).unwrap();
            let loss = t.sum(sq);
            let v = t.scalar_value(loss).unwrap();
            let g = t.backward(loss).unwrap();
            (v, Some((g["w"].clone(), g["b"].clone())))
        };
        let (_, g) = run(&wv, &bv);
        let (gw, gb) = g.unwrap();
        let fd_w = finite_difference(&wv, 1e-5, |wp| run(wp, &bv).0);
        let fd_b = finite_difference(&bv, 1e-5, |bp| run(&wv, bp).0);
        assert!(max_rel_err(&gw, &fd_w) <= 1e-6);
        assert!(max_rel_err(&gb, &fd_b) <= 1e-6);
    }

    #[test]
    fn sym_kl_of_softmaxes_matches_fd() {
        // loss = sym_kl(softmax(a), softmax(b)) on random 8-vectors
        let mut rng = Rng::new(11);
        let av = rand_t(&mut rng, [1, 8, 1, 1]);
        let bv = rand_t(&mut rng, [1, 8, 1, 1]);
        let build = |t: &mut GradTape<f64>, a: NodeId, b: NodeId| -> NodeId {
            let pa = t.softmax(a, Axis::Channel);
            let pb = t.softmax(b, Axis::Channel);
            let la = t.log_floor(pa, 1e-12);
            let lb = t.log_floor(pb, 1e-12);
            let d_ab = t.sub(la, lb).unwrap();
            let d_ba = t.sub(lb, la).unwrap();
            let t1 = t.mul(pa, d_ab).unwrap();
            let t2 = t.mul(pb, d_ba).unwrap();
            let s1 = t.sum(t1);
            let s2 = t.sum(t2);
            let s = t.add(s1, s2).unwrap();
            t.scale(s, 0.5)
        };
        let mut tape = GradTape::<f64>::new();
        let a = tape.leaf("a", av.clone()).unwrap();
        let b = tape.leaf("b", bv.clone()).unwrap();
        let loss = build(&mut tape, a, b);
        let g = tape.backward(loss).unwrap();
        let eval = |ap: &Tensor4<f64>, bp: &Tensor4<f64>| {
            let mut t = GradTape::<f64>::new();
            let a = t.leaf("a", ap.clone()).unwrap();
            let b = t.leaf("b", bp.clone()).unwrap();
            let l = build(&mut t, a, b);
            t.scalar_value(l).unwrap()
        };
        let fd_a = finite_difference(&av, 1e-5, |ap| eval(ap, &bv));
        let fd_b = finite_difference(&bv, 1e-5, |bp| eval(&av, bp));
        assert!(max_rel_err(&g["a"], &fd_a) <= 1e-6);
        assert!(max_rel_err(&g["b"], &fd_b) <= 1e-6);
    }

    #[test]
    fn weighted_backward_equals_scaled_sum() {
        let mut rng = Rng::new(3);
        let xv = rand_t(&mut rng, [1, 2, 3, 3]);
        let build = |t: &mut GradTape<f64>, x: NodeId| -> (NodeId, NodeId) {
            let s = t.sigmoid(x);
            let l1 = t.sum(s);
            let sq = t.mul(x, x).unwrap();
            let l2 = t.mean(sq).unwrap();
            (l1, l2)
        };
        let mut tape = GradTape::<f64>::new();
        let x = tape.leaf("x", xv.clone()).unwrap();
        let (l1, l2) = build(&mut tape, x);
        let g = tape.backward_weighted(&[(l1, 1.0), (l2, 2.0)]).unwrap();

        // oracle: single summed scalar
        let mut tape2 = GradTape::<f64>::new();
        let x2 = tape2.leaf("x", xv.clone()).unwrap();
        let (m1, m2) = build(&mut tape2, x2);
        let m2s = tape2.scale(m2, 2.0);
        let tot = tape2.add(m1, m2s).unwrap();
        let g2 = tape2.backward(tot).unwrap();
        assert!(max_rel_err(&g["x"], &g2["x"]) <= 1e-12);
    }
}
