//! Batch-level drop, element-level weight drop, and the cosine drop schedule.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::{lit, Scalar};
use crate::tensor::Tensor4;

/// Train vs inference switch for all stochastic paths.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Cosine up/down ramp for the drop probability over training iterations:
/// 0 at i=0, peaks at pb_max when i = floor(N*r), back to 0 approaching N.
#[derive(Clone, Copy, Debug)]
pub struct DropSchedule {
    pub total_iters: u64,
    pub ramp_fraction: f64,
    pub pb_max: f64,
}

impl DropSchedule {
    pub fn new(total_iters: u64, ramp_fraction: f64, pb_max: f64) -> Result<Self> {
        if total_iters == 0 {
            return Err(Error::invalid("total_iters must be positive"));
        }
        if !(0.0..1.0).contains(&ramp_fraction) || ramp_fraction <= 0.0 {
            return Err(Error::invalid("ramp_fraction must lie in (0,1)"));
        }
        if !(0.0..1.0).contains(&pb_max) {
            return Err(Error::invalid("pb_max must lie in [0,1)"));
        }
        let peak = (total_iters as f64 * ramp_fraction).floor() as u64;
        if peak == 0 || peak >= total_iters {
            return Err(Error::invalid("floor(N*r) must fall strictly inside (0, N)"));
        }
        Ok(DropSchedule {
            total_iters,
            ramp_fraction,
            pb_max,
        })
    }

    fn peak_iter(&self) -> u64 {
        (self.total_iters as f64 * self.ramp_fraction).floor() as u64
    }
}

/// Drop probability at iteration `i`; continuous on [0, N) and bounded by pb_max.
pub fn schedule_pb(i: u64, sched: &DropSchedule) -> Result<f64> {
    let n = sched.total_iters;
    if i >= n {
        return Err(Error::invalid(format!("iteration {} out of range 0..{}", i, n)));
    }
    let peak = sched.peak_iter();
    let phase = if i < peak {
        std::f64::consts::PI * i as f64 / peak as f64
    } else {
        std::f64::consts::PI * (n - i) as f64 / (n - peak) as f64
    };
    Ok((1.0 - phase.cos()) * sched.pb_max / 2.0)
}

/// Whole-sample drop: each batch element's C*H*W slice is zeroed with
/// probability pb, otherwise scaled by 1/(1-pb). Identity at inference.
pub fn drop_batch<T: Scalar>(x: &Tensor4<T>, pb: f64, rng: &mut Rng, mode: Mode) -> Result<Tensor4<T>> {
    if !(0.0..1.0).contains(&pb) {
        return Err(Error::invalid(format!("drop rate {} must lie in [0,1)", pb)));
    }
    if mode == Mode::Infer || pb == 0.0 {
        return Ok(x.clone());
    }
    let [n, c, h, w] = x.dims();
    let slice = c * h * w;
    let keep_scale = lit::<T>(1.0 / (1.0 - pb));
    let mut out = x.clone();
    for ni in 0..n {
        let factor = if rng.bernoulli(pb) { T::zero() } else { keep_scale };
        for v in &mut out.data_mut()[ni * slice..(ni + 1) * slice] {
            *v *= factor;
        }
    }
    Ok(out)
}

/// Bernoulli keep-mask of shape `(c_out, k_h, k_w)` for element-level weight
/// drop, broadcast over the input-channel dim. No rescaling.
pub fn drop_conv_mask(w_dims: [usize; 4], pb_w: f64, rng: &mut Rng) -> Result<Tensor4<f64>> {
    if !(0.0..1.0).contains(&pb_w) {
        return Err(Error::invalid(format!("drop rate {} must lie in [0,1)", pb_w)));
    }
    let [c_out, _, k_h, k_w] = w_dims;
    let mut mask = Tensor4::zeros([c_out, 1, k_h, k_w]);
    for v in mask.data_mut() {
        *v = if rng.bernoulli(pb_w) { 0.0 } else { 1.0 };
    }
    Ok(mask)
}

/// Element-level weight drop per the keep-mask semantics above. Identity at
/// inference and for pb_w = 0.
pub fn drop_conv_weights<T: Scalar>(
    w: &Tensor4<T>,
    pb_w: f64,
    rng: &mut Rng,
    mode: Mode,
) -> Result<Tensor4<T>> {
    if !(0.0..1.0).contains(&pb_w) {
        return Err(Error::invalid(format!("drop rate {} must lie in [0,1)", pb_w)));
    }
    if mode == Mode::Infer || pb_w == 0.0 {
        return Ok(w.clone());
    }
    let mask = drop_conv_mask(w.dims(), pb_w, rng)?;
    Ok(apply_conv_mask(w, &mask))
}

/// Multiply weights by a `(c_out, 1, k_h, k_w)` mask broadcast over input channels.
pub fn apply_conv_mask<T: Scalar>(w: &Tensor4<T>, mask: &Tensor4<f64>) -> Tensor4<T> {
    let [c_out, cg, k_h, k_w] = w.dims();
    Tensor4::from_fn([c_out, cg, k_h, k_w], |o, i, kh, kw| {
        w.at(o, i, kh, kw) * lit::<T>(mask.at(o, 0, kh, kw))
    })
}
