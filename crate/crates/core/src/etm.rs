//! Equivalent transformation module: a train-time bank of filter branches
//! with different shapes that collapses into one filter for inference.
//!
//! A bank over a base `(K_h, K_w)` site holds, in order: an optional identity
//! branch (grouped delta kernel, admissible only for c_in = c_out at stride
//! 1), every proper odd sub-shape of the base extent, an element-dropped
//! full-shape branch, and a standard full-shape branch. The train-form
//! forward composes one convolution weight from all branches (scaled by
//! lambda_t = p_t / sqrt(var_t + 1e-5) and the sampled drop factors); fusion
//! freezes the same linear combination without drops.

use crate::drop::drop_conv_mask;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::{lit, Scalar};
use crate::tape::{GradTape, NodeId};
use crate::tensor::{self, conv2d, delta_kernel, ConvSpec, Tensor4};

pub const VAR_EPS: f64 = 1e-5;

/// One branch of the bank: weights stored zero-padded and centered at the
/// full base extent; `kernel` records the branch's own shape.
#[derive(Clone, Debug)]
pub struct EtmBranch<T> {
    pub shape_id: usize,
    pub kernel: (usize, usize),
    /// Aligned weights `(c_out, c_in/g, K_h, K_w)`, nonzero only on the
    /// centered `kernel` window.
    pub weights: Tensor4<T>,
    /// Learned scale p_t.
    pub scale: T,
    /// Running output variance (EMA), frozen at fuse time.
    pub var: T,
    /// Identity branches carry a constant delta kernel and are not learned.
    pub learnable: bool,
}

impl<T: Scalar> EtmBranch<T> {
    pub fn lambda(&self) -> T {
        self.scale / (self.var + lit::<T>(VAR_EPS)).sqrt()
    }

    /// The branch's own (k_h, k_w) window of the aligned weights.
    pub fn window(&self) -> Tensor4<T> {
        let [co, cg, kh, kw] = self.weights.dims();
        let (bh, bw) = self.kernel;
        let (oh, ow) = ((kh - bh) / 2, (kw - bw) / 2);
        Tensor4::from_fn([co, cg, bh, bw], |o, i, a, b| self.weights.at(o, i, a + oh, b + ow))
    }

    /// Write a small kernel into the centered window, zero elsewhere.
    pub fn set_window(&mut self, small: &Tensor4<T>) -> Result<()> {
        let [co, cg, kh, kw] = self.weights.dims();
        let [so, sg, sh, sw] = small.dims();
        if (so, sg) != (co, cg) || (sh, sw) != self.kernel {
            return Err(Error::shape(format!(
                "window dims {:?} incompatible with branch {:?}/{:?}",
                small.dims(),
                self.weights.dims(),
                self.kernel
            )));
        }
        let (oh, ow) = ((kh - sh) / 2, (kw - sw) / 2);
        let mut w = Tensor4::zeros([co, cg, kh, kw]);
        for o in 0..co {
            for i in 0..cg {
                for a in 0..sh {
                    for b in 0..sw {
                        w.set(o, i, a + oh, b + ow, small.at(o, i, a, b));
                    }
                }
            }
        }
        self.weights = w;
        Ok(())
    }

    /// True when the aligned weights are zero outside the centered window.
    pub fn support_preserved(&self) -> bool {
        let [co, cg, kh, kw] = self.weights.dims();
        let (bh, bw) = self.kernel;
        let (oh, ow) = ((kh - bh) / 2, (kw - bw) / 2);
        for o in 0..co {
            for i in 0..cg {
                for a in 0..kh {
                    for b in 0..kw {
                        let inside = a >= oh && a < oh + bh && b >= ow && b < ow + bw;
                        if !inside && self.weights.at(o, i, a, b) != T::zero() {
                            return false;
                        }
                    }
                }
            }
        }
        true
    }
}

/// The train-time branch bank for one filter site.
#[derive(Clone, Debug)]
pub struct EtmBank<T> {
    pub spec: ConvSpec,
    pub branches: Vec<EtmBranch<T>>,
    /// Number of distinct shapes: T = ceil(K_h/2) * ceil(K_w/2).
    pub shape_count: usize,
    pub pb_t: f64,
    pub r1: f64,
    pub r2: f64,
    pub ema_momentum: f64,
}

/// Single-filter equivalent of a bank.
#[derive(Clone, Debug)]
pub struct FusedFilter<T> {
    pub spec: ConvSpec,
    pub weights: Tensor4<T>,
}

/// Sampled drop decisions for one train-form forward: per-branch scale factor
/// (0 when branch-dropped, 1/(1-pb) otherwise) plus the element keep-mask for
/// the drop-conv branch.
#[derive(Clone, Debug)]
pub struct DropDraws {
    pub branch_factor: Vec<f64>,
    pub element_mask: Option<Tensor4<f64>>,
}

impl DropDraws {
    /// Drop-free draws: every factor 1, no element mask.
    pub fn none(branch_count: usize) -> Self {
        DropDraws {
            branch_factor: vec![1.0; branch_count],
            element_mask: None,
        }
    }
}

/// Build the bank for a base site: identity (when admissible), all proper odd
/// sub-shapes in lexicographic order, the element-dropped full shape, and the
/// standard full shape. Cold start: zero weights and p=0 everywhere except
/// the standard branch (p=1); the identity branch is a constant delta.
pub fn enumerate_branches<T: Scalar>(
    k_h_max: usize,
    k_w_max: usize,
    spec: &ConvSpec,
) -> Result<EtmBank<T>> {
    if k_h_max.is_multiple_of(2) || k_w_max.is_multiple_of(2) {
        return Err(Error::Spec("bank extents must be odd".into()));
    }
    let mut spec = *spec;
    spec.k_h = k_h_max;
    spec.k_w = k_w_max;
    spec.validate()?;
    let shape_count = k_h_max.div_ceil(2) * k_w_max.div_ceil(2);
    let wdims = spec.weight_dims();
    let identity_ok = spec.c_in == spec.c_out && spec.stride == (1, 1);

    let mut branches = Vec::new();
    if identity_ok {
        branches.push(EtmBranch {
            shape_id: 0,
            kernel: (1, 1),
            weights: delta_kernel::<T>(spec.c_out, spec.groups, k_h_max, k_w_max)?,
            scale: T::zero(),
            var: T::one(),
            learnable: false,
        });
    }
    let mut t = 1;
    for kh in (1..=k_h_max).step_by(2) {
        for kw in (1..=k_w_max).step_by(2) {
            if kh == k_h_max && kw == k_w_max {
                continue;
            }
            branches.push(EtmBranch {
                shape_id: t,
                kernel: (kh, kw),
                weights: Tensor4::zeros(wdims),
                scale: T::zero(),
                var: T::one(),
                learnable: true,
            });
            t += 1;
        }
    }
    debug_assert_eq!(t, shape_count);
    branches.push(EtmBranch {
        shape_id: shape_count,
        kernel: (k_h_max, k_w_max),
        weights: Tensor4::zeros(wdims),
        scale: T::zero(),
        var: T::one(),
        learnable: true,
    });
    branches.push(EtmBranch {
        shape_id: shape_count + 1,
        kernel: (k_h_max, k_w_max),
        weights: Tensor4::zeros(wdims),
        scale: T::one(),
        var: T::one(),
        learnable: true,
    });

    Ok(EtmBank {
        spec,
        branches,
        shape_count,
        pb_t: 0.1,
        r1: 0.1,
        r2: 0.5,
        ema_momentum: 0.1,
    })
}

impl<T: Scalar> EtmBank<T> {
    pub fn branch_count(&self) -> usize {
        self.branches.len()
    }

    /// Warm-start every learnable branch from a trained single filter: each
    /// branch takes the centered crop matching its own shape. Scales are
    /// left as configured (standard branch 1, others typically 0).
    pub fn init_from_single(&mut self, trained: &Tensor4<T>) -> Result<()> {
        if trained.dims() != self.spec.weight_dims() {
            return Err(Error::shape(format!(
                "trained filter dims {:?} != {:?}",
                trained.dims(),
                self.spec.weight_dims()
            )));
        }
        let [co, cg, kh, kw] = trained.dims();
        for b in self.branches.iter_mut().filter(|b| b.learnable) {
            let (bh, bw) = b.kernel;
            let (oh, ow) = ((kh - bh) / 2, (kw - bw) / 2);
            let crop = Tensor4::from_fn([co, cg, bh, bw], |o, i, a, c| {
                trained.at(o, i, a + oh, c + ow)
            });
            b.set_window(&crop)?;
        }
        Ok(())
    }

    fn has_identity(&self) -> bool {
        self.branches.first().map(|b| !b.learnable).unwrap_or(false)
    }

    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        let expected = self.shape_count + 1 + usize::from(self.has_identity());
        if self.branches.len() != expected {
            return Err(Error::Spec(format!(
                "bank holds {} branches, expected {}",
                self.branches.len(),
                expected
            )));
        }
        for b in &self.branches {
            if b.weights.dims() != self.spec.weight_dims() {
                return Err(Error::shape(format!(
                    "branch {} weights {:?} != {:?}",
                    b.shape_id,
                    b.weights.dims(),
                    self.spec.weight_dims()
                )));
            }
        }
        let last_two = &self.branches[self.branches.len() - 2..];
        if last_two.iter().any(|b| b.kernel != (self.spec.k_h, self.spec.k_w)) {
            return Err(Error::Spec("final two branches must have full extent".into()));
        }
        for rate in [self.pb_t, self.r1 * self.pb_t, self.r2 * self.pb_t] {
            if !(0.0..=1.0).contains(&rate) {
                return Err(Error::invalid(format!("drop rate {rate} out of [0,1]")));
            }
        }
        Ok(())
    }

    /// Learnable weight elements of the train form (window sizes).
    pub fn train_param_count(&self) -> u64 {
        self.branches
            .iter()
            .filter(|b| b.learnable)
            .map(|b| {
                let [co, cg, _, _] = b.weights.dims();
                (co * cg * b.kernel.0 * b.kernel.1) as u64
            })
            .sum()
    }

    /// Sample the drop decisions for one training forward, in branch order:
    /// every t < T draws survival at pb_t; the T-th branch draws survival at
    /// r1*pb_t and then its element keep-mask at r2*pb_t; the standard branch
    /// never drops.
    pub fn sample_draws(&self, rng: &mut Rng) -> DropDraws {
        let total = self.branches.len();
        let mut factor = vec![1.0; total];
        let mut element_mask = None;
        for (i, b) in self.branches.iter().enumerate() {
            if b.shape_id < self.shape_count {
                factor[i] = Self::branch_factor(self.pb_t, rng);
            } else if b.shape_id == self.shape_count {
                factor[i] = Self::branch_factor(self.r1 * self.pb_t, rng);
                let elem_rate = self.r2 * self.pb_t;
                if elem_rate > 0.0 {
                    let rate = elem_rate.min(1.0 - f64::EPSILON);
                    element_mask =
                        Some(drop_conv_mask(self.spec.weight_dims(), rate, rng).expect("valid rate"));
                }
            }
        }
        DropDraws {
            branch_factor: factor,
            element_mask,
        }
    }

    fn branch_factor(rate: f64, rng: &mut Rng) -> f64 {
        if rate <= 0.0 {
            1.0
        } else if rng.bernoulli(rate) {
            0.0
        } else {
            // unreachable for rate == 1, so the division is safe
            1.0 / (1.0 - rate)
        }
    }

    /// Refresh each branch's running output variance from its own output on `x`.
    pub fn update_stats(&mut self, x: &Tensor4<T>) -> Result<()> {
        let m = lit::<T>(self.ema_momentum);
        let one_m = T::one() - m;
        for b in &mut self.branches {
            let y = conv2d(x, &self.spec, &b.weights, None)?;
            let v = tensor::var_all(&y)?;
            b.var = one_m * b.var + m * v;
        }
        Ok(())
    }

    /// The composed single-convolution weight for the given draws.
    pub fn composite_weight(&self, draws: &DropDraws) -> Tensor4<T> {
        let mut acc = Tensor4::zeros(self.spec.weight_dims());
        for (i, b) in self.branches.iter().enumerate() {
            let f = draws.branch_factor[i];
            if f == 0.0 {
                continue;
            }
            let coeff = b.lambda() * lit::<T>(f);
            let masked: Tensor4<T>;
            let w = if b.shape_id == self.shape_count {
                match &draws.element_mask {
                    Some(mask) => {
                        masked = crate::drop::apply_conv_mask(&b.weights, mask);
                        &masked
                    }
                    None => &b.weights,
                }
            } else {
                &b.weights
            };
            for (a, v) in acc.data_mut().iter_mut().zip(w.data().iter()) {
                *a += coeff * *v;
            }
        }
        acc
    }
}

/// Train-form forward: one convolution with the branch-composed weight.
/// With `update_stats`, branch variances are refreshed from `x` first and the
/// refreshed values feed the lambdas of this pass.
pub fn forward_train<T: Scalar>(
    x: &Tensor4<T>,
    bank: &mut EtmBank<T>,
    rng: &mut Rng,
    update_stats: bool,
) -> Result<Tensor4<T>> {
    if x.dims()[1] != bank.spec.c_in {
        return Err(Error::shape(format!(
            "input channels {} != bank c_in {}",
            x.dims()[1],
            bank.spec.c_in
        )));
    }
    if update_stats {
        bank.update_stats(x)?;
    }
    let draws = bank.sample_draws(rng);
    let w = bank.composite_weight(&draws);
    conv2d(x, &bank.spec, &w, None)
}

/// Drop-free train-form forward with frozen statistics.
pub fn forward_drop_free<T: Scalar>(x: &Tensor4<T>, bank: &EtmBank<T>) -> Result<Tensor4<T>> {
    let w = bank.composite_weight(&DropDraws::none(bank.branch_count()));
    conv2d(x, &bank.spec, &w, None)
}

/// Collapse the bank into its single-filter equivalent with frozen variances.
pub fn fuse<T: Scalar>(bank: &EtmBank<T>) -> Result<FusedFilter<T>> {
    for b in &bank.branches {
        if !b.lambda().is_finite() {
            return Err(Error::invalid(format!(
                "branch {} has non-finite scale",
                b.shape_id
            )));
        }
    }
    let weights = bank.composite_weight(&DropDraws::none(bank.branch_count()));
    if !weights.all_finite() {
        return Err(Error::invalid("fused weights are not finite"));
    }
    Ok(FusedFilter {
        spec: bank.spec,
        weights,
    })
}

/// Fused inference: plain convolution with the equivalent weights.
pub fn forward_fused<T: Scalar>(x: &Tensor4<T>, f: &FusedFilter<T>) -> Result<Tensor4<T>> {
    conv2d(x, &f.spec, &f.weights, None)
}

/// Record the train-form forward on a tape with fixed draws. Learnable
/// branches become leaves named `{prefix}w{t}` holding their own (small)
/// kernel windows; returns the output node.
pub fn forward_train_on_tape<T: Scalar>(
    tape: &mut GradTape<T>,
    x: NodeId,
    bank: &EtmBank<T>,
    draws: &DropDraws,
    prefix: &str,
) -> Result<NodeId> {
    let (kh, kw) = (bank.spec.k_h, bank.spec.k_w);
    let mut acc: Option<NodeId> = None;
    for (i, b) in bank.branches.iter().enumerate() {
        let f = draws.branch_factor[i];
        let coeff = b.lambda() * lit::<T>(f);
        let node = if b.learnable {
            let leaf = tape.leaf(format!("{prefix}w{}", b.shape_id), b.window())?;
            if f == 0.0 {
                // dropped: contributes nothing; the leaf stays registered so
                // its gradient comes back as exact zero
                continue;
            }
            let padded = tape.pad_kernel(leaf, kh, kw)?;
            let mut n = tape.scale(padded, coeff);
            if b.shape_id == bank.shape_count {
                if let Some(mask) = &draws.element_mask {
                    let full = mask_to_full::<T>(mask, bank.spec.weight_dims());
                    n = tape.mul_const(n, full)?;
                }
            }
            n
        } else {
            if f == 0.0 {
                continue;
            }
            tape.constant(b.weights.scale(coeff))
        };
        acc = Some(match acc {
            Some(a) => tape.add(a, node)?,
            None => node,
        });
    }
    let w = acc.ok_or_else(|| Error::invalid("every branch dropped"))?;
    tape.conv2d(x, bank.spec, w)
}

fn mask_to_full<T: Scalar>(mask: &Tensor4<f64>, dims: [usize; 4]) -> Tensor4<T> {
    Tensor4::from_fn(dims, |o, _, khi, kwi| lit::<T>(mask.at(o, 0, khi, kwi)))
}

/// Outcome of one gradient-structure check.
#[derive(Clone, Debug)]
pub struct Eq16Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug)]
pub struct Eq16Report {
    pub checks: Vec<Eq16Check>,
    pub dropped: Vec<usize>,
    pub survived: Vec<usize>,
}

impl Eq16Report {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

/// Verify the gradient structure of the train form numerically: dropped
/// branches get exact zero gradient, the drop-conv branch's gradient is
/// masked by its element draw, surviving branch gradients are mutually
/// proportional to lambda_t times the drop factor on shared support, and the
/// tape agrees with central finite differences.
pub fn grad_check_eq16<T: Scalar>(
    bank: &EtmBank<T>,
    x: &Tensor4<T>,
    rng: &mut Rng,
) -> Result<Eq16Report> {
    let draws = bank.sample_draws(rng);
    let mut tape = GradTape::<T>::new();
    let xn = tape.constant(x.clone());
    let y = forward_train_on_tape(&mut tape, xn, bank, &draws, "")?;
    let loss = tape.sum(y);
    let grads = tape.backward(loss)?;

    let mut checks = Vec::new();
    let mut dropped = Vec::new();
    let mut survived = Vec::new();
    for (i, b) in bank.branches.iter().enumerate() {
        if !b.learnable {
            continue;
        }
        if draws.branch_factor[i] == 0.0 {
            dropped.push(b.shape_id);
        } else {
            survived.push(b.shape_id);
        }
    }

    // (a) dropped branches receive exact zero gradient
    for &t in &dropped {
        let g = &grads[&format!("w{t}")];
        let zero = g.data().iter().all(|&v| v == T::zero());
        checks.push(Eq16Check {
            name: format!("dropped_branch_{t}_zero_grad"),
            passed: zero,
            detail: format!("branch {t} dropped; gradient exactly zero: {zero}"),
        });
    }

    // (b) drop-conv branch gradient vanishes exactly where the mask is zero
    let t_drop = bank.shape_count;
    if survived.contains(&t_drop) {
        if let Some(mask) = &draws.element_mask {
            let g = &grads[&format!("w{t_drop}")];
            let [co, cg, kh, kw] = g.dims();
            let mut ok = true;
            for o in 0..co {
                for ic in 0..cg {
                    for a in 0..kh {
                        for bb in 0..kw {
                            if mask.at(o, 0, a, bb) == 0.0 && g.at(o, ic, a, bb) != T::zero() {
                                ok = false;
                            }
                        }
                    }
                }
            }
            checks.push(Eq16Check {
                name: "dropconv_grad_masked".into(),
                passed: ok,
                detail: format!("gradient zero wherever element mask is zero: {ok}"),
            });
        }
    }

    // (c) surviving plain branches: gradients proportional to lambda * factor
    //     on the overlap of their kernel windows
    let plain: Vec<usize> = bank
        .branches
        .iter()
        .enumerate()
        .filter(|(i, b)| {
            b.learnable && b.shape_id < bank.shape_count && draws.branch_factor[*i] > 0.0
        })
        .map(|(i, _)| i)
        .collect();
    for pair in plain.windows(2) {
        let (ia, ib) = (pair[0], pair[1]);
        let (ba, bb) = (&bank.branches[ia], &bank.branches[ib]);
        let ga = &grads[&format!("w{}", ba.shape_id)];
        let gb = &grads[&format!("w{}", bb.shape_id)];
        let ca = ba.lambda() * lit::<T>(draws.branch_factor[ia]);
        let cb = bb.lambda() * lit::<T>(draws.branch_factor[ib]);
        let (oh, ow) = (ba.kernel.0.min(bb.kernel.0), ba.kernel.1.min(bb.kernel.1));
        let [co, cg, _, _] = ga.dims();
        let mut worst = 0.0f64;
        for o in 0..co {
            for ic in 0..cg {
                for a in 0..oh {
                    for w in 0..ow {
                        let pa = ga.at(o, ic, a + (ba.kernel.0 - oh) / 2, w + (ba.kernel.1 - ow) / 2);
                        let pb = gb.at(o, ic, a + (bb.kernel.0 - oh) / 2, w + (bb.kernel.1 - ow) / 2);
                        // cross-multiplied proportionality: pa*cb == pb*ca
                        let lhs = (pa * cb).to_f64().unwrap();
                        let rhs = (pb * ca).to_f64().unwrap();
                        let scale = lhs.abs().max(rhs.abs());
                        if scale > 1e-12 {
                            worst = worst.max((lhs - rhs).abs() / scale);
                        }
                    }
                }
            }
        }
        checks.push(Eq16Check {
            name: format!("lambda_ratio_{}_{}", ba.shape_id, bb.shape_id),
            passed: worst <= 1e-6,
            detail: format!("proportionality residual {worst:.3e}"),
        });
    }

    // (d) tape gradient vs central finite differences on one surviving branch
    if let Some(&t) = survived.first() {
        let idx = bank
            .branches
            .iter()
            .position(|b| b.shape_id == t)
            .expect("branch exists");
        let base = bank.branches[idx].window();
        let fd = crate::tape::finite_difference(&base, 1e-5, |wp| {
            let mut b2 = bank.clone();
            b2.branches[idx].set_window(wp).expect("same dims");
            let w = b2.composite_weight(&draws);
            let y = conv2d(x, &b2.spec, &w, None).expect("forward");
            let mut s = T::zero();
            for v in y.data() {
                s += *v;
            }
            s
        });
        let err = crate::tape::max_rel_err(&grads[&format!("w{t}")], &fd);
        checks.push(Eq16Check {
            name: format!("finite_difference_branch_{t}"),
            passed: err <= 1e-6,
            detail: format!("max rel err {err:.3e}"),
        });
    }

    Ok(Eq16Report {
        checks,
        dropped,
        survived,
    })
}

/// Randomize a bank's weights, scales, and variances (tests, probes).
/// Weight magnitudes follow the usual 1/sqrt(fan_in) scale.
pub fn randomize_bank<T: Scalar>(bank: &mut EtmBank<T>, rng: &mut Rng) {
    for b in &mut bank.branches {
        if !b.learnable {
            b.scale = lit::<T>(rng.uniform(0.2, 1.2));
            b.var = lit::<T>(rng.uniform(0.25, 2.0));
            continue;
        }
        let [co, cg, _, _] = b.weights.dims();
        let limit = 1.0 / ((cg * b.kernel.0 * b.kernel.1) as f64).sqrt();
        let small = Tensor4::from_fn([co, cg, b.kernel.0, b.kernel.1], |_, _, _, _| {
            lit::<T>(rng.uniform(-limit, limit))
        });
        b.set_window(&small).expect("window fits");
        b.scale = lit::<T>(rng.uniform(0.2, 1.2));
        b.var = lit::<T>(rng.uniform(0.25, 2.0));
    }
}
