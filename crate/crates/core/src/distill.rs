//! Toy distillation: gradient descent on a student model against frozen
//! teacher maps under the masked distribution-matching loss, optionally with
//! source-view pyramid terms from the reference plugin.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::loss::{
    apx_loss_on_tape, pyramid_loss, ApxCoeffs, ApxMaps, ApxNodes, PyramidCoeffs, ReferenceLoss,
    ViewData, ViewKind, ViewOutputs,
};
use crate::net::{build_smalldepth, SmallDepthConfig, SmallDepthModel};
use crate::rng::Rng;
use crate::scalar::{lit, Scalar};
use crate::tape::GradTape;
use crate::tensor::Tensor4;

/// Adam over named tensors.
struct Adam<T> {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    m: HashMap<String, Tensor4<T>>,
    v: HashMap<String, Tensor4<T>>,
}

impl<T: Scalar> Adam<T> {
    fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: HashMap::new(),
            v: HashMap::new(),
        }
    }

    fn update(&mut self, weights: &mut HashMap<String, Tensor4<T>>, grads: &HashMap<String, Tensor4<T>>) {
        self.step += 1;
        let b1 = lit::<T>(self.beta1);
        let b2 = lit::<T>(self.beta2);
        let one = T::one();
        let corr1 = lit::<T>(1.0 - self.beta1.powi(self.step as i32));
        let corr2 = lit::<T>(1.0 - self.beta2.powi(self.step as i32));
        let lr = lit::<T>(self.lr);
        let eps = lit::<T>(self.eps);
        for (name, g) in grads {
            let Some(w) = weights.get_mut(name) else { continue };
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Tensor4::zeros(g.dims()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Tensor4::zeros(g.dims()));
            for i in 0..g.numel() {
                let gi = g.data()[i];
                let mi = b1 * m.data()[i] + (one - b1) * gi;
                let vi = b2 * v.data()[i] + (one - b2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let mhat = mi / corr1;
                let vhat = vi / corr2;
                w.data_mut()[i] = w.data()[i] - lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

/// Frozen teacher maps paired with the frame images that produced them.
pub struct DistillSet<T> {
    pub frames: Vec<(Tensor4<T>, ApxMaps<T>)>,
}

/// Synthesize a teacher: a random frozen model of the same config, run on
/// random frames.
pub fn synthetic_teacher<T: Scalar>(
    config: &SmallDepthConfig,
    input_hw: (usize, usize),
    frame_count: usize,
    seed: u64,
) -> Result<DistillSet<T>> {
    let mut rng = Rng::new(seed);
    let mut teacher_cfg = config.clone();
    teacher_cfg.etm = false;
    let teacher = build_smalldepth::<T>(&teacher_cfg, &mut rng)?;
    let mut frames = Vec::new();
    for _ in 0..frame_count.max(1) {
        let img = Tensor4::from_fn([1, 3, input_hw.0, input_hw.1], |_, _, _, _| {
            lit::<T>(rng.uniform(0.0, 1.0))
        });
        let maps = teacher.infer(&img)?;
        frames.push((
            img,
            ApxMaps {
                enc: maps.enc,
                dec: maps.dec,
                disp: maps.disp,
            },
        ));
    }
    Ok(DistillSet { frames })
}

#[derive(Clone, Debug)]
pub struct DistillReport {
    /// Distillation loss per iteration (before that iteration's update).
    pub trajectory: Vec<f64>,
    pub initial_apx: f64,
    pub final_apx: f64,
}

pub struct DistillOptions {
    pub iters: usize,
    pub lr: f64,
    pub coeffs: ApxCoeffs,
    pub with_pyramid: bool,
}

impl Default for DistillOptions {
    fn default() -> Self {
        DistillOptions {
            iters: 200,
            lr: 1e-2,
            coeffs: ApxCoeffs::default(),
            with_pyramid: false,
        }
    }
}

/// Run toy distillation, mutating the student in place. Returns the loss
/// trajectory; the final entry is evaluated after the last update.
pub fn run<T: Scalar>(
    student: &mut SmallDepthModel<T>,
    set: &DistillSet<T>,
    opts: &DistillOptions,
) -> Result<DistillReport> {
    if set.frames.is_empty() {
        return Err(Error::invalid("no distillation frames"));
    }
    let mut optimizer = Adam::<T>::new(opts.lr);
    let mut trajectory = Vec::new();

    for it in 0..opts.iters {
        let (img, teacher) = &set.frames[it % set.frames.len()];
        let mut tape = GradTape::<T>::new();
        let (enc, dec, disp) = student.forward_on_tape(&mut tape, img)?;
        let nodes = ApxNodes { enc, dec, disp };
        let apx = apx_loss_on_tape(&mut tape, &nodes, teacher, &opts.coeffs)?;
        trajectory.push(tape.scalar_value(apx)?.to_f64().unwrap());

        let mut losses = vec![(apx, T::one())];
        if opts.with_pyramid {
            let data = ViewData {
                kind: ViewKind::Cr,
                image: img.clone(),
                target_disp: teacher.disp.first().cloned(),
            };
            let out = ViewOutputs {
                disp: nodes.disp.clone(),
                feat: vec![],
            };
            let levels = pyramid_loss(&mut tape, &[(data, out)], &PyramidCoeffs::cr_only(), &ReferenceLoss)?;
            for (_, l) in levels.levels {
                losses.push((l, T::one()));
            }
        }

        let grads = tape.backward_weighted(&losses)?;
        let mut current: HashMap<String, Tensor4<T>> = HashMap::new();
        for (_, unit) in student.units() {
            if let crate::net::Filter::Single(w) = &unit.filter {
                current.insert(unit.name.clone(), w.clone());
            }
        }
        optimizer.update(&mut current, &grads);
        student.apply_weights(&current)?;
    }

    // closing evaluation on the first frame
    let (img, teacher) = &set.frames[0];
    let maps = student.infer(img)?;
    let student_maps = ApxMaps {
        enc: maps.enc,
        dec: maps.dec,
        disp: maps.disp,
    };
    let final_apx = crate::loss::apx_loss(&student_maps, teacher, &opts.coeffs)?
        .to_f64()
        .unwrap();
    Ok(DistillReport {
        initial_apx: trajectory[0],
        final_apx,
        trajectory,
    })
}
