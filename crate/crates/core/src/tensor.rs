//! Rank-4 tensor kernels in batch x channel x height x width layout.
//!
//! All kernels are pure functions over immutable inputs: identical inputs
//! produce bitwise-identical outputs. Row-major storage, width fastest.

use crate::error::{Error, Result};
use crate::scalar::{lit, Scalar};

/// Dense rank-4 array, `(n, c, h, w)`, row-major with `w` fastest-varying.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor4<T> {
    dims: [usize; 4],
    data: Vec<T>,
}

impl<T: Scalar> Tensor4<T> {
    pub fn new(dims: [usize; 4], data: Vec<T>) -> Result<Self> {
        let numel: usize = dims.iter().product();
        if data.len() != numel {
            return Err(Error::shape(format!(
                "data length {} != {}x{}x{}x{}",
                data.len(),
                dims[0],
                dims[1],
                dims[2],
                dims[3]
            )));
        }
        Ok(Tensor4 { dims, data })
    }

    pub fn zeros(dims: [usize; 4]) -> Self {
        Tensor4 {
            dims,
            data: vec![T::zero(); dims.iter().product()],
        }
    }

    pub fn full(dims: [usize; 4], value: T) -> Self {
        Tensor4 {
            dims,
            data: vec![value; dims.iter().product()],
        }
    }

    pub fn from_fn(dims: [usize; 4], mut f: impl FnMut(usize, usize, usize, usize) -> T) -> Self {
        let mut out = Tensor4::zeros(dims);
        for n in 0..dims[0] {
            for c in 0..dims[1] {
                for h in 0..dims[2] {
                    for w in 0..dims[3] {
                        let v = f(n, c, h, w);
                        out.data[((n * dims[1] + c) * dims[2] + h) * dims[3] + w] = v;
                    }
                }
            }
        }
        out
    }

    #[inline]
    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }

    #[inline]
    pub fn numel(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> T {
        self.data[((n * self.dims[1] + c) * self.dims[2] + h) * self.dims[3] + w]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, h: usize, w: usize, v: T) {
        self.data[((n * self.dims[1] + c) * self.dims[2] + h) * self.dims[3] + w] = v;
    }

    /// Reinterpret the storage under new dims with the same element count.
    pub fn reshape(&self, dims: [usize; 4]) -> Result<Self> {
        if dims.iter().product::<usize>() != self.numel() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} to {:?}",
                self.dims, dims
            )));
        }
        Ok(Tensor4 {
            dims,
            data: self.data.clone(),
        })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor4 {
            dims: self.dims,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, k: T) -> Self {
        self.map(|v| v * k)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Convert element type (f32 <-> f64).
    pub fn cast<U: Scalar>(&self) -> Tensor4<U> {
        Tensor4 {
            dims: self.dims,
            data: self
                .data
                .iter()
                .map(|v| U::from_f64(v.to_f64().unwrap()).unwrap())
                .collect(),
        }
    }

    /// Largest absolute elementwise difference; errors on shape mismatch.
    pub fn max_abs_diff(&self, other: &Self) -> Result<T> {
        if self.dims != other.dims {
            return Err(Error::shape(format!("{:?} vs {:?}", self.dims, other.dims)));
        }
        let mut m = T::zero();
        for (a, b) in self.data.iter().zip(other.data.iter()) {
            let d = (*a - *b).abs();
            if d > m {
                m = d;
            }
        }
        Ok(m)
    }
}

/// Reduction / softmax axis selector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Batch,
    Channel,
    Height,
    Width,
}

impl Axis {
    pub fn index(self) -> usize {
        match self {
            Axis::Batch => 0,
            Axis::Channel => 1,
            Axis::Height => 2,
            Axis::Width => 3,
        }
    }
}

/// Convolution site description: drives both the kernel and the complexity model.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub c_in: usize,
    pub c_out: usize,
    pub k_h: usize,
    pub k_w: usize,
    pub groups: usize,
    pub stride: (usize, usize),
    pub dilation: (usize, usize),
    pub padding: (usize, usize),
    pub has_bias: bool,
}

impl ConvSpec {
    pub fn new(c_in: usize, c_out: usize, k_h: usize, k_w: usize) -> Self {
        ConvSpec {
            c_in,
            c_out,
            k_h,
            k_w,
            groups: 1,
            stride: (1, 1),
            dilation: (1, 1),
            padding: (0, 0),
            has_bias: false,
        }
    }

    pub fn with_groups(mut self, g: usize) -> Self {
        self.groups = g;
        self
    }

    pub fn with_stride(mut self, s: usize) -> Self {
        self.stride = (s, s);
        self
    }

    pub fn with_dilation(mut self, d: usize) -> Self {
        self.dilation = (d, d);
        self
    }

    pub fn with_padding(mut self, p_h: usize, p_w: usize) -> Self {
        self.padding = (p_h, p_w);
        self
    }

    /// Padding that preserves spatial size at stride 1: p = d*(k-1)/2 for odd k.
    pub fn with_same_padding(mut self) -> Self {
        self.padding = (
            self.dilation.0 * (self.k_h - 1) / 2,
            self.dilation.1 * (self.k_w - 1) / 2,
        );
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.k_h == 0 || self.k_w == 0 {
            return Err(Error::Spec("kernel extents must be >= 1".into()));
        }
        if self.stride.0 == 0 || self.stride.1 == 0 || self.dilation.0 == 0 || self.dilation.1 == 0 {
            return Err(Error::Spec("stride and dilation must be >= 1".into()));
        }
        if self.groups == 0 || !self.c_in.is_multiple_of(self.groups) || !self.c_out.is_multiple_of(self.groups) {
            return Err(Error::Spec(format!(
                "groups {} must divide c_in {} and c_out {}",
                self.groups, self.c_in, self.c_out
            )));
        }
        Ok(())
    }

    /// Weight tensor dims: `(c_out, c_in/groups, k_h, k_w)`.
    pub fn weight_dims(&self) -> [usize; 4] {
        [self.c_out, self.c_in / self.groups, self.k_h, self.k_w]
    }

    /// Output spatial dims from the standard stride/dilation/padding arithmetic.
    pub fn out_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let eff_h = self.dilation.0 * (self.k_h - 1) + 1;
        let eff_w = self.dilation.1 * (self.k_w - 1) + 1;
        let full_h = h + 2 * self.padding.0;
        let full_w = w + 2 * self.padding.1;
        if full_h < eff_h || full_w < eff_w {
            return Err(Error::shape(format!(
                "input {}x{} too small for effective kernel {}x{}",
                h, w, eff_h, eff_w
            )));
        }
        Ok((
            (full_h - eff_h) / self.stride.0 + 1,
            (full_w - eff_w) / self.stride.1 + 1,
        ))
    }
}

/// Direct 2-D convolution. Values equal the nested-loop definition; zeros
/// outside the padded border.
pub fn conv2d<T: Scalar>(
    x: &Tensor4<T>,
    spec: &ConvSpec,
    w: &Tensor4<T>,
    bias: Option<&[T]>,
) -> Result<Tensor4<T>> {
    spec.validate()?;
    let [n, c, h, win] = x.dims();
    if c != spec.c_in {
        return Err(Error::shape(format!(
            "input channels {} != spec c_in {}",
            c, spec.c_in
        )));
    }
    if w.dims() != spec.weight_dims() {
        return Err(Error::shape(format!(
            "weight dims {:?} != expected {:?}",
            w.dims(),
            spec.weight_dims()
        )));
    }
    if let Some(b) = bias {
        if b.len() != spec.c_out {
            return Err(Error::shape(format!(
                "bias length {} != c_out {}",
                b.len(),
                spec.c_out
            )));
        }
    }
    let (ho, wo) = spec.out_hw(h, win)?;
    let cg_in = spec.c_in / spec.groups;
    let cg_out = spec.c_out / spec.groups;
    let mut out = Tensor4::zeros([n, spec.c_out, ho, wo]);

    let (s_h, s_w) = spec.stride;
    let (d_h, d_w) = spec.dilation;
    let (p_h, p_w) = spec.padding;
    let xd = x.data();
    let wd = w.data();
    let od = out.data_mut();
    for ni in 0..n {
        for oc in 0..spec.c_out {
            let g = oc / cg_out;
            let out_base = (ni * spec.c_out + oc) * ho * wo;
            if let Some(b) = bias {
                od[out_base..out_base + ho * wo].fill(b[oc]);
            }
            for ic in 0..cg_in {
                let xc = g * cg_in + ic;
                let x_base = (ni * spec.c_in + xc) * h * win;
                for kh in 0..spec.k_h {
                    let wrow = ((oc * cg_in + ic) * spec.k_h + kh) * spec.k_w;
                    for kw in 0..spec.k_w {
                        let wv = wd[wrow + kw];
                        if wv == T::zero() {
                            continue;
                        }
                        // valid output column range for this tap
                        let off_w = (kw * d_w) as isize - p_w as isize;
                        let ow_lo = if off_w >= 0 {
                            0
                        } else {
                            ((-off_w) as usize).div_ceil(s_w)
                        };
                        let ow_hi_excl = {
                            let max_iw = win as isize - 1 - off_w;
                            if max_iw < 0 {
                                0
                            } else {
                                (max_iw as usize / s_w + 1).min(wo)
                            }
                        };
                        if ow_lo >= ow_hi_excl {
                            continue;
                        }
                        for oh in 0..ho {
                            let ih = (oh * s_h + kh * d_h) as isize - p_h as isize;
                            if ih < 0 || ih >= h as isize {
                                continue;
                            }
                            let xrow = x_base + ih as usize * win;
                            let orow = out_base + oh * wo;
                            if s_w == 1 {
                                let ioff = (ow_lo as isize + off_w) as usize;
                                let src = &xd[xrow + ioff..xrow + ioff + (ow_hi_excl - ow_lo)];
                                let dst = &mut od[orow + ow_lo..orow + ow_hi_excl];
                                for (o, &v) in dst.iter_mut().zip(src.iter()) {
                                    *o += wv * v;
                                }
                            } else {
                                for ow in ow_lo..ow_hi_excl {
                                    let iw = (ow * s_w) as isize + off_w;
                                    od[orow + ow] += wv * xd[xrow + iw as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Scatter counterpart of `conv2d` w.r.t. the input: used by the tape.
pub(crate) fn conv2d_grad_input<T: Scalar>(
    grad_out: &Tensor4<T>,
    spec: &ConvSpec,
    w: &Tensor4<T>,
    in_dims: [usize; 4],
) -> Tensor4<T> {
    let [n, _, h, win] = in_dims;
    let [_, _, ho, wo] = grad_out.dims();
    let cg_in = spec.c_in / spec.groups;
    let cg_out = spec.c_out / spec.groups;
    let mut gx = Tensor4::zeros(in_dims);
    let gd = grad_out.data();
    let wd = w.data();
    let gxd = gx.data_mut();
    for ni in 0..n {
        for oc in 0..spec.c_out {
            let g = oc / cg_out;
            for oh in 0..ho {
                for ow in 0..wo {
                    let go = gd[((ni * spec.c_out + oc) * ho + oh) * wo + ow];
                    for ic in 0..cg_in {
                        let xc = g * cg_in + ic;
                        for kh in 0..spec.k_h {
                            let ih = (oh * spec.stride.0 + kh * spec.dilation.0) as isize
                                - spec.padding.0 as isize;
                            if ih < 0 || ih >= h as isize {
                                continue;
                            }
                            let xrow = ((ni * spec.c_in + xc) * h + ih as usize) * win;
                            let wrow = ((oc * cg_in + ic) * spec.k_h + kh) * spec.k_w;
                            for kw in 0..spec.k_w {
                                let iw = (ow * spec.stride.1 + kw * spec.dilation.1) as isize
                                    - spec.padding.1 as isize;
                                if iw < 0 || iw >= win as isize {
                                    continue;
                                }
                                gxd[xrow + iw as usize] += go * wd[wrow + kw];
                            }
                        }
                    }
                }
            }
        }
    }
    gx
}

/// Gradient of `conv2d` w.r.t. the weights.
pub(crate) fn conv2d_grad_weight<T: Scalar>(
    grad_out: &Tensor4<T>,
    spec: &ConvSpec,
    x: &Tensor4<T>,
) -> Tensor4<T> {
    let [n, _, h, win] = x.dims();
    let [_, _, ho, wo] = grad_out.dims();
    let cg_in = spec.c_in / spec.groups;
    let cg_out = spec.c_out / spec.groups;
    let mut gw = Tensor4::zeros(spec.weight_dims());
    let gd = grad_out.data();
    let xd = x.data();
    let gwd = gw.data_mut();
    for ni in 0..n {
        for oc in 0..spec.c_out {
            let g = oc / cg_out;
            for oh in 0..ho {
                for ow in 0..wo {
                    let go = gd[((ni * spec.c_out + oc) * ho + oh) * wo + ow];
                    for ic in 0..cg_in {
                        let xc = g * cg_in + ic;
                        for kh in 0..spec.k_h {
                            let ih = (oh * spec.stride.0 + kh * spec.dilation.0) as isize
                                - spec.padding.0 as isize;
                            if ih < 0 || ih >= h as isize {
                                continue;
                            }
                            let xrow = ((ni * spec.c_in + xc) * h + ih as usize) * win;
                            let wrow = ((oc * cg_in + ic) * spec.k_h + kh) * spec.k_w;
                            for kw in 0..spec.k_w {
                                let iw = (ow * spec.stride.1 + kw * spec.dilation.1) as isize
                                    - spec.padding.1 as isize;
                                if iw < 0 || iw >= win as isize {
                                    continue;
                                }
                                gwd[wrow + kw] += go * xd[xrow + iw as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    gw
}

/// Grouped delta kernel: 1 at the spatial center, routing each output channel
/// to its own channel within the group. Requires `c_in == c_out`.
pub fn delta_kernel<T: Scalar>(c: usize, groups: usize, k_h: usize, k_w: usize) -> Result<Tensor4<T>> {
    if !c.is_multiple_of(groups) {
        return Err(Error::Spec(format!("groups {} must divide channels {}", groups, c)));
    }
    if k_h.is_multiple_of(2) || k_w.is_multiple_of(2) {
        return Err(Error::Spec("delta kernel needs odd extents".into()));
    }
    let cg = c / groups;
    let mut w = Tensor4::zeros([c, cg, k_h, k_w]);
    for oc in 0..c {
        w.set(oc, oc % cg, k_h / 2, k_w / 2, T::one());
    }
    Ok(w)
}

/// Bilinear sample positions for one axis, align-corners-false with edge clamp.
#[inline]
pub(crate) fn bilinear_axis(out_len: usize, in_len: usize, i: usize) -> (usize, usize, f64) {
    let scale = in_len as f64 / out_len as f64;
    let src = (i as f64 + 0.5) * scale - 0.5;
    if src <= 0.0 {
        return (0, 0, 0.0);
    }
    let i0 = src.floor() as usize;
    if i0 + 1 >= in_len {
        return (in_len - 1, in_len - 1, 0.0);
    }
    (i0, i0 + 1, src - i0 as f64)
}

/// Bilinear resize (align-corners-false). Constant inputs map to the same
/// constant and identity resizes copy bitwise.
pub fn bilinear_resize<T: Scalar>(x: &Tensor4<T>, out_h: usize, out_w: usize) -> Result<Tensor4<T>> {
    let [n, c, h, w] = x.dims();
    if h == 0 || w == 0 || n == 0 || c == 0 {
        return Err(Error::shape("bilinear_resize on zero-sized input"));
    }
    if out_h == 0 || out_w == 0 {
        return Err(Error::invalid("output dims must be >= 1"));
    }
    let mut out = Tensor4::zeros([n, c, out_h, out_w]);
    for ni in 0..n {
        for ci in 0..c {
            for oh in 0..out_h {
                let (h0, h1, fh) = bilinear_axis(out_h, h, oh);
                let fh = lit::<T>(fh);
                for ow in 0..out_w {
                    let (w0, w1, fw) = bilinear_axis(out_w, w, ow);
                    let fw = lit::<T>(fw);
                    // v0 + f*(v1-v0) keeps constants and exact hits bitwise.
                    let a = x.at(ni, ci, h0, w0);
                    let b = x.at(ni, ci, h0, w1);
                    let cvl = x.at(ni, ci, h1, w0);
                    let d = x.at(ni, ci, h1, w1);
                    let top = a + fw * (b - a);
                    let bot = cvl + fw * (d - cvl);
                    out.set(ni, ci, oh, ow, top + fh * (bot - top));
                }
            }
        }
    }
    Ok(out)
}

fn line_iter(dims: [usize; 4], axis: Axis) -> (usize, usize, usize) {
    // Decompose indexing as outer * len * inner for the chosen axis.
    let idx = axis.index();
    let len = dims[idx];
    let outer: usize = dims[..idx].iter().product();
    let inner: usize = dims[idx + 1..].iter().product();
    (outer, len, inner)
}

/// Numerically-stabilized softmax along one axis (max subtraction).
pub fn softmax_axis<T: Scalar>(x: &Tensor4<T>, axis: Axis) -> Tensor4<T> {
    let (outer, len, inner) = line_iter(x.dims(), axis);
    let mut out = Tensor4::zeros(x.dims());
    let xd = x.data();
    let od = out.data_mut();
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut m = T::neg_infinity();
            for k in 0..len {
                let v = xd[base + k * inner];
                if v > m {
                    m = v;
                }
            }
            let mut sum = T::zero();
            for k in 0..len {
                let e = (xd[base + k * inner] - m).exp();
                od[base + k * inner] = e;
                sum += e;
            }
            for k in 0..len {
                od[base + k * inner] /= sum;
            }
        }
    }
    out
}

pub fn sigmoid<T: Scalar>(x: &Tensor4<T>) -> Tensor4<T> {
    x.map(|v| T::one() / (T::one() + (-v).exp()))
}

fn reduced_dims(dims: [usize; 4], axes: &[Axis]) -> [usize; 4] {
    let mut d = dims;
    for a in axes {
        d[a.index()] = 1;
    }
    d
}

/// Mean over the given axes; reduced axes keep size 1.
pub fn reduce_mean<T: Scalar>(x: &Tensor4<T>, axes: &[Axis]) -> Result<Tensor4<T>> {
    let rdims = reduced_dims(x.dims(), axes);
    let count: usize = x.numel() / rdims.iter().product::<usize>();
    if count == 0 || x.numel() == 0 {
        return Err(Error::invalid("empty reduction domain"));
    }
    let mut out = Tensor4::zeros(rdims);
    let [_, c, h, w] = x.dims();
    for n in 0..x.dims()[0] {
        for ci in 0..c {
            for hi in 0..h {
                for wi in 0..w {
                    let t = [
                        if rdims[0] == 1 && x.dims()[0] != 1 { 0 } else { n.min(rdims[0] - 1) },
                        if rdims[1] == 1 { 0 } else { ci },
                        if rdims[2] == 1 { 0 } else { hi },
                        if rdims[3] == 1 { 0 } else { wi },
                    ];
                    let v = out.at(t[0], t[1], t[2], t[3]) + x.at(n, ci, hi, wi);
                    out.set(t[0], t[1], t[2], t[3], v);
                }
            }
        }
    }
    let inv = T::one() / lit::<T>(count as f64);
    Ok(out.scale(inv))
}

/// Population (biased) variance over the given axes.
pub fn reduce_var<T: Scalar>(x: &Tensor4<T>, axes: &[Axis]) -> Result<Tensor4<T>> {
    let mean = reduce_mean(x, axes)?;
    let centered_sq = broadcast_zip(x, &mean, |a, b| {
        let d = a - b;
        d * d
    })?;
    reduce_mean(&centered_sq, axes)
}

/// Mean over every element.
pub fn mean_all<T: Scalar>(x: &Tensor4<T>) -> Result<T> {
    if x.numel() == 0 {
        return Err(Error::invalid("empty reduction domain"));
    }
    let mut s = T::zero();
    for v in x.data() {
        s += *v;
    }
    Ok(s / lit::<T>(x.numel() as f64))
}

/// Population variance over every element.
pub fn var_all<T: Scalar>(x: &Tensor4<T>) -> Result<T> {
    let m = mean_all(x)?;
    let mut s = T::zero();
    for v in x.data() {
        let d = *v - m;
        s += d * d;
    }
    Ok(s / lit::<T>(x.numel() as f64))
}

/// Median with the lower-central rule: for even lengths, the lower of the two
/// central order statistics.
pub fn reduce_median<T: Scalar>(x: &Tensor4<T>) -> Result<T> {
    if x.numel() == 0 {
        return Err(Error::invalid("median of empty tensor"));
    }
    let mut v: Vec<T> = x.data().to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).expect("finite values"));
    Ok(v[(v.len() - 1) / 2])
}

/// Median over a subset of elements selected by `keep`.
pub fn median_where<T: Scalar>(x: &Tensor4<T>, keep: impl Fn(usize) -> bool) -> Result<T> {
    let mut v: Vec<T> = x
        .data()
        .iter()
        .enumerate()
        .filter(|(i, _)| keep(*i))
        .map(|(_, t)| *t)
        .collect();
    if v.is_empty() {
        return Err(Error::invalid("median over empty selection"));
    }
    v.sort_by(|a, b| a.partial_cmp(b).expect("finite values"));
    Ok(v[(v.len() - 1) / 2])
}

fn broadcast_compatible(a: [usize; 4], b: [usize; 4]) -> bool {
    a.iter().zip(b.iter()).all(|(&x, &y)| x == y || x == 1 || y == 1)
}

/// Elementwise combine with numpy-style broadcasting over size-1 axes.
pub fn broadcast_zip<T: Scalar>(
    a: &Tensor4<T>,
    b: &Tensor4<T>,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor4<T>> {
    let (da, db) = (a.dims(), b.dims());
    if !broadcast_compatible(da, db) {
        return Err(Error::shape(format!("broadcast {:?} vs {:?}", da, db)));
    }
    let od = [
        da[0].max(db[0]),
        da[1].max(db[1]),
        da[2].max(db[2]),
        da[3].max(db[3]),
    ];
    let mut out = Tensor4::zeros(od);
    for n in 0..od[0] {
        for c in 0..od[1] {
            for h in 0..od[2] {
                for w in 0..od[3] {
                    let va = a.at(
                        if da[0] == 1 { 0 } else { n },
                        if da[1] == 1 { 0 } else { c },
                        if da[2] == 1 { 0 } else { h },
                        if da[3] == 1 { 0 } else { w },
                    );
                    let vb = b.at(
                        if db[0] == 1 { 0 } else { n },
                        if db[1] == 1 { 0 } else { c },
                        if db[2] == 1 { 0 } else { h },
                        if db[3] == 1 { 0 } else { w },
                    );
                    out.set(n, c, h, w, f(va, vb));
                }
            }
        }
    }
    Ok(out)
}

pub fn add<T: Scalar>(a: &Tensor4<T>, b: &Tensor4<T>) -> Result<Tensor4<T>> {
    broadcast_zip(a, b, |x, y| x + y)
}

pub fn sub<T: Scalar>(a: &Tensor4<T>, b: &Tensor4<T>) -> Result<Tensor4<T>> {
    broadcast_zip(a, b, |x, y| x - y)
}

pub fn mul<T: Scalar>(a: &Tensor4<T>, b: &Tensor4<T>) -> Result<Tensor4<T>> {
    broadcast_zip(a, b, |x, y| x * y)
}

/// Reverse the width axis.
pub fn flip_w<T: Scalar>(x: &Tensor4<T>) -> Tensor4<T> {
    let [n, c, h, w] = x.dims();
    Tensor4::from_fn([n, c, h, w], |ni, ci, hi, wi| x.at(ni, ci, hi, w - 1 - wi))
}
