//! Loss suite: pyramid supervision over transformed views with consistency
//! terms, per-level gradient accumulation, masked distribution-matching
//! distillation, and standard depth evaluation metrics.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::scalar::{lit, Scalar};
use crate::tape::{GradTape, NodeId};
use crate::tensor::{self, Axis, Tensor4};

pub const LOG_FLOOR: f64 = 1e-12;

/// One-sided KL of the softmax distributions along `axis`:
/// sum psi(a) * (log psi(a) - log psi(b)).
fn kl_one_sided<T: Scalar>(tape: &mut GradTape<T>, a: NodeId, b: NodeId, axis: Axis) -> Result<NodeId> {
    let pa = tape.softmax(a, axis);
    let pb = tape.softmax(b, axis);
    let la = tape.log_floor(pa, lit::<T>(LOG_FLOOR));
    let lb = tape.log_floor(pb, lit::<T>(LOG_FLOOR));
    let d = tape.sub(la, lb)?;
    let term = tape.mul(pa, d)?;
    Ok(tape.sum(term))
}

/// Symmetric KL with channel-axis softmax, recorded on a tape.
pub fn sym_kl_nodes<T: Scalar>(tape: &mut GradTape<T>, a: NodeId, b: NodeId) -> Result<NodeId> {
    let ab = kl_one_sided(tape, a, b, Axis::Channel)?;
    let ba = kl_one_sided(tape, b, a, Axis::Channel)?;
    let s = tape.add(ab, ba)?;
    Ok(tape.scale(s, lit::<T>(0.5)))
}

/// Symmetric KL between channel-softmax distributions of `a` and `b`.
pub fn sym_kl<T: Scalar>(a: &Tensor4<T>, b: &Tensor4<T>) -> Result<T> {
    if a.dims() != b.dims() {
        return Err(Error::shape(format!("{:?} vs {:?}", a.dims(), b.dims())));
    }
    let mut tape = GradTape::<T>::new();
    let an = tape.constant(a.clone());
    let bn = tape.constant(b.clone());
    let out = sym_kl_nodes(&mut tape, an, bn)?;
    tape.scalar_value(out)
}

/// One-sided KL with height-axis plus width-axis softmax, halved.
pub fn directional_kl_nodes<T: Scalar>(tape: &mut GradTape<T>, a: NodeId, b: NodeId) -> Result<NodeId> {
    let h = kl_one_sided(tape, a, b, Axis::Height)?;
    let w = kl_one_sided(tape, a, b, Axis::Width)?;
    let s = tape.add(h, w)?;
    Ok(tape.scale(s, lit::<T>(0.5)))
}

pub fn directional_kl<T: Scalar>(a: &Tensor4<T>, b: &Tensor4<T>) -> Result<T> {
    if a.dims() != b.dims() {
        return Err(Error::shape(format!("{:?} vs {:?}", a.dims(), b.dims())));
    }
    let mut tape = GradTape::<T>::new();
    let an = tape.constant(a.clone());
    let bn = tape.constant(b.clone());
    let out = directional_kl_nodes(&mut tape, an, bn)?;
    tape.scalar_value(out)
}

// ---------------------------------------------------------------------------
// pyramid loss
// ---------------------------------------------------------------------------

/// Input-view tags: source resolution, low/high resolution, horizontal flip,
/// color jitter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ViewKind {
    Cr,
    Lr,
    Hr,
    Flip,
    Color,
}

impl ViewKind {
    pub fn label(self) -> &'static str {
        match self {
            ViewKind::Cr => "cr",
            ViewKind::Lr => "lr",
            ViewKind::Hr => "hr",
            ViewKind::Flip => "flip",
            ViewKind::Color => "color",
        }
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct KindCoeffs {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

/// Per-view weighting of the pyramid loss plus the plugin mixing constants.
#[derive(Clone, Debug)]
pub struct PyramidCoeffs {
    pub per_kind: Vec<(ViewKind, KindCoeffs)>,
    pub lambda_p: f64,
    pub lambda_d: f64,
    pub lambda_f: f64,
}

impl PyramidCoeffs {
    /// Source view only.
    pub fn cr_only() -> Self {
        PyramidCoeffs {
            per_kind: vec![(
                ViewKind::Cr,
                KindCoeffs {
                    alpha: 1.0,
                    beta: 0.0,
                    gamma: 0.0,
                },
            )],
            lambda_p: 1.0,
            lambda_d: 1.0,
            lambda_f: 1.0,
        }
    }

    /// The per-kind defaults that performed best in ablation.
    pub fn defaults() -> Self {
        PyramidCoeffs {
            per_kind: vec![
                (ViewKind::Cr, KindCoeffs { alpha: 1.0, beta: 0.0, gamma: 0.0 }),
                (ViewKind::Lr, KindCoeffs { alpha: 0.5, beta: 1.0, gamma: 0.5 }),
                (ViewKind::Hr, KindCoeffs { alpha: 0.5, beta: 0.5, gamma: 0.1 }),
                (ViewKind::Flip, KindCoeffs { alpha: 1.0, beta: 0.1, gamma: 0.5 }),
                (ViewKind::Color, KindCoeffs { alpha: 1.0, beta: 0.1, gamma: 0.1 }),
            ],
            lambda_p: 1.0,
            lambda_d: 1.0,
            lambda_f: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut has_cr = false;
        for (kind, c) in &self.per_kind {
            if c.alpha < 0.0 || c.beta < 0.0 || c.gamma < 0.0 {
                return Err(Error::invalid("pyramid coefficients must be non-negative"));
            }
            if *kind == ViewKind::Cr {
                has_cr = true;
                if c.beta != 0.0 || c.gamma != 0.0 {
                    return Err(Error::invalid("cr carries no consistency terms"));
                }
                if c.alpha <= 0.0 {
                    return Err(Error::invalid("alpha_cr must be positive"));
                }
            }
        }
        if !has_cr {
            return Err(Error::invalid("cr view missing"));
        }
        Ok(())
    }
}

/// Inputs of one view: the transformed image and an optional supervision
/// target for the reference plugin.
#[derive(Clone, Debug)]
pub struct ViewData<T> {
    pub kind: ViewKind,
    pub image: Tensor4<T>,
    pub target_disp: Option<Tensor4<T>>,
}

/// Model outputs of one view, recorded on the shared tape.
#[derive(Clone, Debug)]
pub struct ViewOutputs {
    pub disp: Vec<NodeId>,
    pub feat: Vec<NodeId>,
}

/// Scalar components returned by a base-loss plugin.
#[derive(Clone, Copy, Debug)]
pub struct BaseComponents {
    pub photometric: NodeId,
    pub depth_structure: NodeId,
    pub feature: NodeId,
    pub smooth: NodeId,
}

/// Pluggable per-view base loss; internals are an exchangeable contract.
pub trait BaseLossPlugin<T: Scalar> {
    fn components(
        &self,
        tape: &mut GradTape<T>,
        data: &ViewData<T>,
        out: &ViewOutputs,
    ) -> Result<BaseComponents>;
}

/// Reference plugin: L1 disparity supervision against a provided target plus
/// edge-aware smoothness of the finest disparity; the depth-structure and
/// feature components are zero.
pub struct ReferenceLoss;

impl<T: Scalar> BaseLossPlugin<T> for ReferenceLoss {
    fn components(
        &self,
        tape: &mut GradTape<T>,
        data: &ViewData<T>,
        out: &ViewOutputs,
    ) -> Result<BaseComponents> {
        let zero = tape.constant(Tensor4::new([1, 1, 1, 1], vec![T::zero()]).unwrap());
        let d0 = *out
            .disp
            .first()
            .ok_or_else(|| Error::invalid("view without disparity output"))?;

        let photometric = match &data.target_disp {
            Some(target) => {
                let t = tape.constant(target.clone());
                let diff = tape.sub(d0, t)?;
                let a = tape.abs(diff);
                tape.mean(a)?
            }
            None => zero,
        };

        // edge-aware smoothness: |dx d| * exp(-|dx I|) + |dy d| * exp(-|dy I|),
        // with the image resampled to the disparity's resolution
        let [_, _, dh, dw] = tape.value(d0).dims();
        let img = if data.image.dims()[2] == dh && data.image.dims()[3] == dw {
            data.image.clone()
        } else {
            tensor::bilinear_resize(&data.image, dh, dw)?
        };
        let img = &img;
        let [n, c, h, w] = img.dims();
        let mut wx = Tensor4::zeros([n, 1, h, w - 1]);
        let mut wy = Tensor4::zeros([n, 1, h - 1, w]);
        for ni in 0..n {
            for hi in 0..h {
                for wi in 0..w - 1 {
                    let mut g = T::zero();
                    for ci in 0..c {
                        g += (img.at(ni, ci, hi, wi + 1) - img.at(ni, ci, hi, wi)).abs();
                    }
                    wx.set(ni, 0, hi, wi, (-(g / lit::<T>(c as f64))).exp());
                }
            }
        }
        for ni in 0..n {
            for hi in 0..h - 1 {
                for wi in 0..w {
                    let mut g = T::zero();
                    for ci in 0..c {
                        g += (img.at(ni, ci, hi + 1, wi) - img.at(ni, ci, hi, wi)).abs();
                    }
                    wy.set(ni, 0, hi, wi, (-(g / lit::<T>(c as f64))).exp());
                }
            }
        }
        let ddx = tape.diff_w(d0)?;
        let ddx = tape.abs(ddx);
        let ddx = tape.mul_const(ddx, wx)?;
        let sx = tape.mean(ddx)?;
        let ddy = tape.diff_h(d0)?;
        let ddy = tape.abs(ddy);
        let ddy = tape.mul_const(ddy, wy)?;
        let sy = tape.mean(ddy)?;
        let smooth = tape.add(sx, sy)?;

        Ok(BaseComponents {
            photometric,
            depth_structure: zero,
            feature: zero,
            smooth,
        })
    }
}

/// Spatial-support symmetric KL: each (sample, channel) map is one
/// distribution over its flattened pixels.
fn phi_spatial_sym_kl<T: Scalar>(tape: &mut GradTape<T>, a: NodeId, b: NodeId) -> Result<NodeId> {
    let [n, c, h, w] = tape.value(a).dims();
    if tape.value(b).dims() != [n, c, h, w] {
        return Err(Error::shape(format!(
            "consistency dims {:?} vs {:?}",
            tape.value(a).dims(),
            tape.value(b).dims()
        )));
    }
    let ar = tape.reshape(a, [n, 1, c, h * w])?;
    let br = tape.reshape(b, [n, 1, c, h * w])?;
    let ab = kl_one_sided(tape, ar, br, Axis::Width)?;
    let ba = kl_one_sided(tape, br, ar, Axis::Width)?;
    let s = tape.add(ab, ba)?;
    Ok(tape.scale(s, lit::<T>(0.5)))
}

/// Consistency measure between the source-view output and a transformed
/// view's output, recorded on a tape. The view output stays untouched; the
/// source output is flipped back or resampled to the view's resolution.
pub fn phi_k_nodes<T: Scalar>(
    tape: &mut GradTape<T>,
    kind: ViewKind,
    cr_out: NodeId,
    view_out: NodeId,
) -> Result<NodeId> {
    match kind {
        ViewKind::Cr => Ok(tape.constant(Tensor4::new([1, 1, 1, 1], vec![T::zero()]).unwrap())),
        ViewKind::Color => {
            let d = tape.sub(cr_out, view_out)?;
            let a = tape.abs(d);
            Ok(tape.sum(a))
        }
        ViewKind::Flip => {
            let back = tape.flip_w(view_out);
            phi_spatial_sym_kl(tape, cr_out, back)
        }
        ViewKind::Lr | ViewKind::Hr => {
            let [_, _, vh, vw] = tape.value(view_out).dims();
            let resampled = tape.bilinear(cr_out, vh, vw)?;
            phi_spatial_sym_kl(tape, resampled, view_out)
        }
    }
}

/// Plain (no-gradient) consistency measure between two view outputs.
pub fn phi_k<T: Scalar>(kind: ViewKind, cr_out: &Tensor4<T>, view_out: &Tensor4<T>) -> Result<T> {
    let mut tape = GradTape::<T>::new();
    let a = tape.constant(cr_out.clone());
    let b = tape.constant(view_out.clone());
    let out = phi_k_nodes(&mut tape, kind, a, b)?;
    tape.scalar_value(out)
}

/// One summand of the pyramid loss with its per-term breakdown.
#[derive(Clone, Debug)]
pub struct LossTerm {
    pub label: String,
    pub value: f64,
    pub weighted: f64,
}

#[derive(Clone, Debug, Default)]
pub struct LossReport {
    pub terms: Vec<LossTerm>,
    pub total: f64,
}

impl LossReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("term,value,weighted\n");
        for t in &self.terms {
            s.push_str(&format!("{},{},{}\n", t.label, t.value, t.weighted));
        }
        s.push_str(&format!("total,,{}\n", self.total));
        s
    }

    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for t in &self.terms {
            s.push_str(&format!(
                "{{\"term\":\"{}\",\"value\":{},\"weighted\":{}}}\n",
                t.label, t.value, t.weighted
            ));
        }
        s.push_str(&format!("{{\"term\":\"total\",\"weighted\":{}}}\n", self.total));
        s
    }
}

/// Per-level scalars ready for accumulation, plus the readable report.
pub struct PyramidLevels {
    pub levels: Vec<(ViewKind, NodeId)>,
    pub report: LossReport,
}

/// Assemble the pyramid loss over the provided views. Every requested kind
/// must come with outputs; the source view is mandatory.
pub fn pyramid_loss<T: Scalar>(
    tape: &mut GradTape<T>,
    views: &[(ViewData<T>, ViewOutputs)],
    coeffs: &PyramidCoeffs,
    plugin: &dyn BaseLossPlugin<T>,
) -> Result<PyramidLevels> {
    coeffs.validate()?;
    let cr = views
        .iter()
        .find(|(d, _)| d.kind == ViewKind::Cr)
        .ok_or_else(|| Error::invalid("cr view missing from inputs"))?;
    let mut levels = Vec::new();
    let mut report = LossReport::default();

    for (kind, kc) in &coeffs.per_kind {
        let Some((data, out)) = views.iter().find(|(d, _)| d.kind == *kind) else {
            return Err(Error::invalid(format!("view outputs for {} missing", kind.label())));
        };
        let mut level: Option<NodeId> = None;
        let mut add_term = |tape: &mut GradTape<T>, node: NodeId, weight: f64, label: String| -> Result<Option<NodeId>> {
            let value = tape.scalar_value(node)?.to_f64().unwrap();
            report.terms.push(LossTerm {
                label,
                value,
                weighted: weight * value,
            });
            if weight == 0.0 {
                return Ok(None);
            }
            Ok(Some(tape.scale(node, lit::<T>(weight))))
        };

        // alpha * L_k from the plugin
        let parts = plugin.components(tape, data, out)?;
        let lp = tape.scale(parts.photometric, lit::<T>(coeffs.lambda_p));
        let ld = tape.scale(parts.depth_structure, lit::<T>(coeffs.lambda_d));
        let lf = tape.scale(parts.feature, lit::<T>(coeffs.lambda_f));
        let s = tape.add(lp, ld)?;
        let s = tape.add(s, lf)?;
        let lk = tape.add(s, parts.smooth)?;
        if let Some(n) = add_term(tape, lk, kc.alpha, format!("{}.alpha", kind.label()))? {
            level = Some(n);
        }

        // beta * phi(d_cr, d_k) over the paired disparity scales
        if *kind != ViewKind::Cr {
            let pairs = cr.1.disp.len().min(out.disp.len());
            for i in 0..pairs {
                let phi = phi_k_nodes(tape, *kind, cr.1.disp[i], out.disp[i])?;
                if let Some(n) = add_term(tape, phi, kc.beta, format!("{}.beta.d{i}", kind.label()))? {
                    level = Some(match level {
                        Some(l) => tape.add(l, n)?,
                        None => n,
                    });
                }
            }
            // gamma * phi(f_cr, f_k) over the paired feature slots
            let pairs = cr.1.feat.len().min(out.feat.len());
            for i in 0..pairs {
                let phi = phi_k_nodes(tape, *kind, cr.1.feat[i], out.feat[i])?;
                if let Some(n) = add_term(tape, phi, kc.gamma, format!("{}.gamma.f{i}", kind.label()))? {
                    level = Some(match level {
                        Some(l) => tape.add(l, n)?,
                        None => n,
                    });
                }
            }
        }

        if let Some(l) = level {
            report.total += tape.scalar_value(l)?.to_f64().unwrap();
            levels.push((*kind, l));
        }
    }
    Ok(PyramidLevels { levels, report })
}

/// Backward per level with the given coefficients, gradients summed; by
/// linearity this equals backward of the weighted sum.
pub fn grad_accumulate<T: Scalar>(
    tape: &mut GradTape<T>,
    levels: &[(NodeId, T)],
) -> Result<HashMap<String, Tensor4<T>>> {
    tape.backward_weighted(levels)
}

// ---------------------------------------------------------------------------
// distillation loss
// ---------------------------------------------------------------------------

/// Distillation weighting and position-mask threshold.
#[derive(Clone, Copy, Debug)]
pub struct ApxCoeffs {
    pub lambda_enc: f64,
    pub lambda_dec: f64,
    pub lambda_disp: f64,
    pub mask_threshold: f64,
}

impl Default for ApxCoeffs {
    fn default() -> Self {
        ApxCoeffs {
            lambda_enc: 0.01,
            lambda_dec: 0.01,
            lambda_disp: 1.0,
            mask_threshold: 0.3,
        }
    }
}

impl ApxCoeffs {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.mask_threshold) || self.mask_threshold == 0.0 {
            return Err(Error::invalid("mask threshold must lie in (0,1)"));
        }
        if self.lambda_enc < 0.0 || self.lambda_dec < 0.0 || self.lambda_disp < 0.0 {
            return Err(Error::invalid("lambdas must be non-negative"));
        }
        Ok(())
    }
}

/// Position mask: keep pixels whose teacher disparity exceeds
/// threshold * median (lower-central rule), as exact 0/1 values.
pub fn apx_mask<T: Scalar>(teacher_disp: &Tensor4<T>, threshold: f64) -> Result<Tensor4<T>> {
    let med = tensor::reduce_median(teacher_disp)?;
    let cut = lit::<T>(threshold) * med;
    Ok(teacher_disp.map(|v| if v > cut { T::one() } else { T::zero() }))
}

/// Feature and disparity stacks exchanged between a student and a teacher.
#[derive(Clone, Debug)]
pub struct ApxMaps<T> {
    pub enc: Vec<Tensor4<T>>,
    pub dec: Vec<Tensor4<T>>,
    pub disp: Vec<Tensor4<T>>,
}

/// Student-side node handles for the tape-recorded forward.
#[derive(Clone, Debug)]
pub struct ApxNodes {
    pub enc: Vec<NodeId>,
    pub dec: Vec<NodeId>,
    pub disp: Vec<NodeId>,
}

/// Masked distribution-matching loss on a tape; the teacher enters as
/// constants (first KL argument), the student through node handles. Slot
/// counts are paired up to the shorter stack.
pub fn apx_loss_on_tape<T: Scalar>(
    tape: &mut GradTape<T>,
    student: &ApxNodes,
    teacher: &ApxMaps<T>,
    coeffs: &ApxCoeffs,
) -> Result<NodeId> {
    coeffs.validate()?;
    let zero = tape.constant(Tensor4::new([1, 1, 1, 1], vec![T::zero()]).unwrap());
    let mut total = zero;

    for (lambda, s_nodes, t_maps) in [
        (coeffs.lambda_enc, &student.enc, &teacher.enc),
        (coeffs.lambda_dec, &student.dec, &teacher.dec),
    ] {
        if lambda == 0.0 {
            continue;
        }
        let pairs = s_nodes.len().min(t_maps.len());
        for i in 0..pairs {
            let t = tape.constant(t_maps[i].clone());
            let p = directional_kl_nodes(tape, t, s_nodes[i])?;
            let p = tape.scale(p, lit::<T>(lambda));
            total = tape.add(total, p)?;
        }
    }

    if coeffs.lambda_disp > 0.0 {
        let pairs = student.disp.len().min(teacher.disp.len());
        for i in 0..pairs {
            let mask = apx_mask(&teacher.disp[i], coeffs.mask_threshold)?;
            let masked_teacher = tensor::mul(&teacher.disp[i], &mask)?;
            let t = tape.constant(masked_teacher);
            let s = tape.mul_const(student.disp[i], mask)?;
            let p = directional_kl_nodes(tape, t, s)?;
            let p = tape.scale(p, lit::<T>(coeffs.lambda_disp));
            total = tape.add(total, p)?;
        }
    }
    Ok(total)
}

/// Plain (no-gradient) evaluation of the distillation loss.
pub fn apx_loss<T: Scalar>(student: &ApxMaps<T>, teacher: &ApxMaps<T>, coeffs: &ApxCoeffs) -> Result<T> {
    let mut tape = GradTape::<T>::new();
    let nodes = ApxNodes {
        enc: student.enc.iter().map(|t| tape.constant(t.clone())).collect(),
        dec: student.dec.iter().map(|t| tape.constant(t.clone())).collect(),
        disp: student.disp.iter().map(|t| tape.constant(t.clone())).collect(),
    };
    let out = apx_loss_on_tape(&mut tape, &nodes, teacher, coeffs)?;
    tape.scalar_value(out)
}

// ---------------------------------------------------------------------------
// depth evaluation
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, Default)]
pub struct DepthMetrics {
    pub abs_rel: f64,
    pub sq_rel: f64,
    pub rmse: f64,
    pub rmse_log: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
}

impl DepthMetrics {
    pub fn header() -> &'static str {
        "AbsRel    SqRel     RMSE      RMSElog   d1        d2        d3"
    }

    pub fn row(&self) -> String {
        format!(
            "{:<9.4} {:<9.4} {:<9.4} {:<9.4} {:<9.4} {:<9.4} {:<9.4}",
            self.abs_rel, self.sq_rel, self.rmse, self.rmse_log, self.delta1, self.delta2, self.delta3
        )
    }
}

/// Median-aligned depth metrics over valid pixels. Validity defaults to
/// gt > 0 when no mask is given; the prediction is scaled by
/// median(gt)/median(pred) and clamped to [1e-3, cap].
pub fn eval_depth<T: Scalar>(
    pred: &Tensor4<T>,
    gt: &Tensor4<T>,
    valid: Option<&Tensor4<T>>,
    cap: f64,
) -> Result<DepthMetrics> {
    if cap <= 0.0 {
        return Err(Error::invalid("cap must be positive"));
    }
    if pred.dims() != gt.dims() {
        return Err(Error::shape(format!("{:?} vs {:?}", pred.dims(), gt.dims())));
    }
    if let Some(m) = valid {
        if m.dims() != gt.dims() {
            return Err(Error::shape("validity mask dims".to_string()));
        }
    }
    let is_valid = |i: usize| -> bool {
        match valid {
            Some(m) => m.data()[i] > T::zero(),
            None => gt.data()[i] > T::zero(),
        }
    };
    let med_gt = tensor::median_where(gt, is_valid)?.to_f64().unwrap();
    let med_pred = tensor::median_where(pred, is_valid)?.to_f64().unwrap();
    if med_pred <= 0.0 {
        return Err(Error::invalid("non-positive prediction median"));
    }
    let scale = med_gt / med_pred;

    let mut n = 0usize;
    let mut abs_rel = 0.0;
    let mut sq_rel = 0.0;
    let mut sq = 0.0;
    let mut sq_log = 0.0;
    let mut d1 = 0usize;
    let mut d2 = 0usize;
    let mut d3 = 0usize;
    for i in 0..gt.numel() {
        if !is_valid(i) {
            continue;
        }
        let g = gt.data()[i].to_f64().unwrap();
        let p = (pred.data()[i].to_f64().unwrap() * scale).clamp(1e-3, cap);
        n += 1;
        abs_rel += (p - g).abs() / g;
        sq_rel += (p - g) * (p - g) / g;
        sq += (p - g) * (p - g);
        sq_log += (p.ln() - g.ln()).powi(2);
        let r = (p / g).max(g / p);
        if r < 1.25 {
            d1 += 1;
        }
        if r < 1.25f64.powi(2) {
            d2 += 1;
        }
        if r < 1.25f64.powi(3) {
            d3 += 1;
        }
    }
    if n == 0 {
        return Err(Error::invalid("no valid pixels"));
    }
    let nf = n as f64;
    Ok(DepthMetrics {
        abs_rel: abs_rel / nf,
        sq_rel: sq_rel / nf,
        rmse: (sq / nf).sqrt(),
        rmse_log: (sq_log / nf).sqrt(),
        delta1: d1 as f64 / nf,
        delta2: d2 as f64 / nf,
        delta3: d3 as f64 / nf,
    })
}
