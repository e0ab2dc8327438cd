//! Runnable property suite backing the `verify` command: fusion equivalence,
//! gradient structure, complexity oracles, drop semantics, loss identities,
//! and container round trips.

use crate::drop::{drop_batch, drop_conv_mask, Mode};
use crate::error::Result;
use crate::etm::{self, DropDraws, EtmBank};
use crate::io::WeightStore;
use crate::loss;
use crate::net::{build_smalldepth, Filter, SmallDepthConfig, SmallDepthModel};
use crate::profile;
use crate::rng::Rng;
use crate::scalar::{lit, Scalar};
use crate::tensor::{self, conv2d, ConvSpec, Tensor4};

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    fn new(name: &str, passed: bool, detail: String) -> Self {
        CheckResult {
            name: name.into(),
            passed,
            detail,
        }
    }
}

fn rand_tensor<T: Scalar>(rng: &mut Rng, dims: [usize; 4]) -> Tensor4<T> {
    Tensor4::from_fn(dims, |_, _, _, _| lit::<T>(rng.uniform(-1.0, 1.0)))
}

/// A random bank over channels <= 16, groups in {1, 2, c}, odd kernels.
pub fn random_bank<T: Scalar>(rng: &mut Rng) -> EtmBank<T> {
    let c_opts = [2usize, 4, 6, 8, 12, 16];
    let c_in = c_opts[rng.below(c_opts.len())];
    let c_out = if rng.bernoulli(0.5) { c_in } else { 2 * c_in };
    let g = match rng.below(3) {
        0 => 1,
        1 => 2,
        _ => c_in,
    };
    let kernels = [(1usize, 1usize), (3, 3), (1, 3), (3, 1), (5, 3), (5, 5)];
    let (kh, kw) = kernels[rng.below(kernels.len())];
    let spec = ConvSpec::new(c_in, c_out, kh, kw).with_groups(g).with_same_padding();
    let mut bank = etm::enumerate_branches::<T>(kh, kw, &spec).expect("valid spec");
    etm::randomize_bank(&mut bank, rng);
    bank
}

/// Drop-free multi-branch evaluation: the literal sum of per-branch
/// convolutions, independent of the composed-weight path.
pub fn multi_branch_reference<T: Scalar>(x: &Tensor4<T>, bank: &EtmBank<T>) -> Tensor4<T> {
    let draws = DropDraws::none(bank.branch_count());
    let mut acc: Option<Tensor4<T>> = None;
    for (i, b) in bank.branches.iter().enumerate() {
        if draws.branch_factor[i] == 0.0 {
            continue;
        }
        let w = b.weights.scale(b.lambda());
        let y = conv2d(x, &bank.spec, &w, None).expect("branch conv");
        acc = Some(match acc {
            Some(a) => tensor::add(&a, &y).expect("same dims"),
            None => y,
        });
    }
    acc.expect("at least one branch")
}

/// Max deviation between fused inference and the drop-free multi-branch
/// reference over `count` random bank configurations.
pub fn fusion_equivalence_sweep<T: Scalar>(count: usize, seed: u64) -> Result<f64> {
    let mut rng = Rng::new(seed);
    let mut worst = 0.0f64;
    for _ in 0..count {
        let bank = random_bank::<T>(&mut rng);
        let h = 3 + rng.below(10);
        let w = 3 + rng.below(10);
        let n = 1 + rng.below(2);
        let x = rand_tensor::<T>(&mut rng, [n, bank.spec.c_in, h, w]);
        let fused = etm::fuse(&bank)?;
        let got = etm::forward_fused(&x, &fused)?;
        let want = multi_branch_reference(&x, &bank);
        let dev = got.max_abs_diff(&want)?.to_f64().unwrap();
        worst = worst.max(dev);
        // the train-form forward (drop-free) must agree as well
        let train = etm::forward_drop_free(&x, &bank)?;
        worst = worst.max(train.max_abs_diff(&want)?.to_f64().unwrap());
    }
    Ok(worst)
}

pub fn check_fusion_equivalence(seed: u64) -> CheckResult {
    let dev32 = fusion_equivalence_sweep::<f32>(100, seed);
    let dev64 = fusion_equivalence_sweep::<f64>(100, seed + 1);
    match (dev32, dev64) {
        (Ok(d32), Ok(d64)) => CheckResult::new(
            "fusion_equivalence",
            d32 <= 1e-5 && d64 <= 1e-10,
            format!("max dev f32 {d32:.3e} (<=1e-5), f64 {d64:.3e} (<=1e-10)"),
        ),
        (a, b) => CheckResult::new("fusion_equivalence", false, format!("{a:?} / {b:?}")),
    }
}

/// End-to-end: fused model vs drop-free bank model on a random image.
pub fn check_end_to_end_fusion(seed: u64) -> CheckResult {
    let run = || -> Result<f64> {
        let mut rng = Rng::new(seed);
        let cfg = SmallDepthConfig {
            widths: [8, 8, 8, 16, 32],
            etm: true,
            ..Default::default()
        };
        let mut model = build_smalldepth::<f32>(&cfg, &mut rng)?;
        for unit in model.units_mut() {
            if let Filter::Bank(bank) = &mut unit.filter {
                etm::randomize_bank(bank, &mut rng);
                // keep scales moderate so activations stay in range
                for b in bank.branches.iter_mut() {
                    b.scale *= lit::<f32>(0.3);
                }
            }
        }
        let fused = model.fuse_all()?;
        let img = Tensor4::from_fn([1, 3, 64, 96], |_, _, _, _| rng.uniform(0.0, 1.0) as f32);
        let a = model.infer(&img)?;
        let b = fused.infer(&img)?;
        let mut worst = 0.0f64;
        for (x, y) in a.enc.iter().zip(b.enc.iter()) {
            worst = worst.max(x.max_abs_diff(y)? as f64);
        }
        for (x, y) in a.disp.iter().zip(b.disp.iter()) {
            worst = worst.max(x.max_abs_diff(y)? as f64);
        }
        Ok(worst)
    };
    match run() {
        Ok(dev) => CheckResult::new(
            "end_to_end_fusion",
            dev <= 1e-4,
            format!("max elementwise dev {dev:.3e} (<=1e-4)"),
        ),
        Err(e) => CheckResult::new("end_to_end_fusion", false, e.to_string()),
    }
}

pub fn check_eq16_gradients(seed: u64) -> CheckResult {
    let run = || -> Result<(bool, String)> {
        let mut rng = Rng::new(seed);
        let mut all = true;
        let mut detail = String::new();
        for trial in 0..5 {
            let spec = ConvSpec::new(6, 6, 3, 3).with_same_padding();
            let mut bank = etm::enumerate_branches::<f64>(3, 3, &spec)?;
            etm::randomize_bank(&mut bank, &mut rng);
            bank.pb_t = 0.5;
            bank.r1 = 0.5;
            bank.r2 = 1.0;
            let x = rand_tensor::<f64>(&mut rng, [1, 6, 6, 6]);
            let report = etm::grad_check_eq16(&bank, &x, &mut rng)?;
            if !report.all_passed() {
                all = false;
                for c in report.checks.iter().filter(|c| !c.passed) {
                    detail.push_str(&format!("trial {trial}: {} ({}); ", c.name, c.detail));
                }
            }
        }
        if detail.is_empty() {
            detail = "zero-grad on dropped, mask structure, ratios, FD agreement".into();
        }
        Ok((all, detail))
    };
    match run() {
        Ok((ok, detail)) => CheckResult::new("eq16_gradient_structure", ok, detail),
        Err(e) => CheckResult::new("eq16_gradient_structure", false, e.to_string()),
    }
}

pub fn check_complexity_oracles(seed: u64) -> CheckResult {
    let run = || -> Result<(bool, String)> {
        let mut rng = Rng::new(seed);
        let mut ok = true;
        let mut detail = String::new();
        for trial in 0..5 {
            let base = 4 + 4 * rng.below(3);
            let cfg = SmallDepthConfig {
                widths: [base, base, base * 2, base * 2, base * 4],
                ..Default::default()
            };
            let model = build_smalldepth::<f32>(&cfg, &mut rng)?;
            let report = profile::profile_model(&model, (64, 96))?;
            let total = report.totals(None).param;
            let brute = profile::brute_force_param_count(&model);
            if total != brute {
                ok = false;
                detail.push_str(&format!("trial {trial}: param {total} != brute {brute}; "));
            }
            for r in &report.rows {
                if !profile::mac_bound_holds(&r.spec, r.in_hw, r.out_hw) {
                    ok = false;
                    detail.push_str(&format!("trial {trial}: bound exceeded at {}; ", r.name));
                }
                let bound = profile::mac_lower_bound(
                    r.param,
                    r.spec.groups,
                    r.spec.k_h,
                    r.spec.k_w,
                    r.out_hw.0,
                    r.out_hw.1,
                );
                if bound > r.mac_bytes {
                    ok = false;
                    detail.push_str(&format!("trial {trial}: integer bound at {}; ", r.name));
                }
                if r.spec.c_in == r.spec.c_out && r.in_hw == r.out_hw && bound != r.mac_bytes {
                    ok = false;
                    detail.push_str(&format!("trial {trial}: equality missed at {}; ", r.name));
                }
            }
        }
        if detail.is_empty() {
            detail = "param totals equal brute force; bound holds with balanced equality".into();
        }
        Ok((ok, detail))
    };
    match run() {
        Ok((ok, detail)) => CheckResult::new("complexity_oracles", ok, detail),
        Err(e) => CheckResult::new("complexity_oracles", false, e.to_string()),
    }
}

pub fn check_drop_semantics(seed: u64) -> CheckResult {
    let run = || -> Result<(bool, String)> {
        let mut ok = true;
        let mut detail = String::new();
        for &pb in &[0.1, 0.5, 0.9] {
            let trials = 10_000usize;
            let x = Tensor4::<f64>::full([1, 1, 1, 1], 1.0);
            let mut rng = Rng::new(seed ^ (pb * 100.0) as u64);
            let mut sum = 0.0;
            for _ in 0..trials {
                sum += drop_batch(&x, pb, &mut rng, Mode::Train)?.at(0, 0, 0, 0);
            }
            let mean = sum / trials as f64;
            let sigma = (pb / ((1.0 - pb) * trials as f64)).sqrt();
            if (mean - 1.0).abs() > 3.0 * sigma {
                ok = false;
                detail.push_str(&format!("pb={pb}: mean {mean:.4} beyond 3 sigma; "));
            }
        }
        // mask constant across the input-channel dimension (exact)
        let mut rng = Rng::new(seed + 17);
        let mask = drop_conv_mask([8, 1, 3, 3], 0.5, &mut rng)?;
        let w = Tensor4::<f64>::full([8, 5, 3, 3], 1.0);
        let masked = crate::drop::apply_conv_mask(&w, &mask);
        for o in 0..8 {
            for kh in 0..3 {
                for kw in 0..3 {
                    let v = masked.at(o, 0, kh, kw);
                    for i in 1..5 {
                        if masked.at(o, i, kh, kw) != v {
                            ok = false;
                            detail.push_str("mask varies over input channels; ");
                        }
                    }
                }
            }
        }
        if detail.is_empty() {
            detail = "mean-preserving at pb in {0.1,0.5,0.9}; mask constant over c_in".into();
        }
        Ok((ok, detail))
    };
    match run() {
        Ok((ok, detail)) => CheckResult::new("drop_semantics", ok, detail),
        Err(e) => CheckResult::new("drop_semantics", false, e.to_string()),
    }
}

pub fn check_loss_identities(seed: u64) -> CheckResult {
    let run = || -> Result<(bool, String)> {
        let mut rng = Rng::new(seed);
        let mut ok = true;
        let mut detail = String::new();
        for _ in 0..1000 {
            let a = rand_tensor::<f64>(&mut rng, [1, 4, 2, 3]);
            let b = rand_tensor::<f64>(&mut rng, [1, 4, 2, 3]);
            let s = loss::sym_kl(&a, &b)?;
            let d = loss::directional_kl(&a, &b)?;
            if !(s > 0.0 && s.is_finite() && d > 0.0 && d.is_finite()) {
                ok = false;
                detail.push_str("random pair not strictly positive/finite; ");
                break;
            }
            if loss::sym_kl(&a, &a)? != 0.0 || loss::directional_kl(&b, &b)? != 0.0 {
                ok = false;
                detail.push_str("identical inputs not exactly zero; ");
                break;
            }
        }
        if detail.is_empty() {
            detail = "1000 random pairs: positive, finite, zero iff equal".into();
        }
        Ok((ok, detail))
    };
    match run() {
        Ok((ok, detail)) => CheckResult::new("loss_identities", ok, detail),
        Err(e) => CheckResult::new("loss_identities", false, e.to_string()),
    }
}

pub fn check_apx_mask(seed: u64) -> CheckResult {
    let run = || -> Result<(bool, String)> {
        let mut rng = Rng::new(seed);
        for _ in 0..100 {
            let d = Tensor4::from_fn([1, 1, 4, 6], |_, _, _, _| rng.uniform(0.0, 1.0));
            let m = loss::apx_mask(&d, 0.3)?;
            let mut v: Vec<f64> = d.data().to_vec();
            v.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let med = v[(v.len() - 1) / 2];
            for (i, &x) in d.data().iter().enumerate() {
                let want = if x > 0.3 * med { 1.0 } else { 0.0 };
                if m.data()[i] != want {
                    return Ok((false, format!("mask mismatch at {i}")));
                }
            }
        }
        let zeros = Tensor4::<f64>::zeros([1, 1, 3, 3]);
        let m = loss::apx_mask(&zeros, 0.3)?;
        if m.data().iter().any(|&v| v != 0.0) {
            return Ok((false, "all-zero input must give all-false".into()));
        }
        Ok((true, "100 random tensors match the sort+compare oracle; all-zero edge case".into()))
    };
    match run() {
        Ok((ok, detail)) => CheckResult::new("apx_mask_oracle", ok, detail),
        Err(e) => CheckResult::new("apx_mask_oracle", false, e.to_string()),
    }
}

pub fn check_io_round_trips(seed: u64) -> CheckResult {
    let run = || -> Result<(bool, String)> {
        let mut rng = Rng::new(seed);
        let dir = std::env::temp_dir().join(format!("smalldepth-verify-{seed}"));
        std::fs::create_dir_all(&dir)?;
        for trial in 0..100 {
            let mut store = WeightStore::new();
            let entries = 1 + rng.below(4);
            for e in 0..entries {
                let n = 1 + rng.below(20);
                let data: Vec<f32> = (0..n).map(|_| rng.uniform(-10.0, 10.0) as f32).collect();
                store.insert(format!("e{e}"), vec![n as u32], data)?;
            }
            let back = WeightStore::decode(&store.encode())?;
            if back != store {
                return Ok((false, format!("store mismatch on trial {trial}")));
            }
            let map = Tensor4::<f32>::from_fn([1, 1, 2 + rng.below(6), 2 + rng.below(6)], |_, _, _, _| {
                rng.uniform(0.0, 100.0) as f32
            });
            let path = dir.join("t.pfm");
            crate::io::write_pfm(&path, &map)?;
            let loaded: Tensor4<f32> = crate::io::read_pfm(&path)?;
            if loaded.dims() != map.dims() {
                return Ok((false, "pfm dims changed".into()));
            }
            let dev = loaded.max_abs_diff(&map)? as f64;
            if dev > 1e-6 {
                return Ok((false, format!("pfm dev {dev}")));
            }
        }
        Ok((true, "100 random stores bitwise; 100 PFM maps within 1e-6".into()))
    };
    match run() {
        Ok((ok, detail)) => CheckResult::new("io_round_trips", ok, detail),
        Err(e) => CheckResult::new("io_round_trips", false, e.to_string()),
    }
}

/// Fuse every bank of `model` and probe equivalence on random inputs,
/// reporting the max deviation (the `fuse` command's verification step).
pub fn probe_fusion<T: Scalar>(model: &SmallDepthModel<T>, seed: u64, probes: usize) -> Result<f64> {
    let fused = model.fuse_all()?;
    let mut rng = Rng::new(seed);
    let mut worst = 0.0f64;
    for _ in 0..probes {
        let img = Tensor4::from_fn([1, 3, 32, 64], |_, _, _, _| lit::<T>(rng.uniform(0.0, 1.0)));
        let a = model.infer(&img)?;
        let b = fused.infer(&img)?;
        for (x, y) in a.disp.iter().zip(b.disp.iter()) {
            worst = worst.max(x.max_abs_diff(y)?.to_f64().unwrap());
        }
    }
    Ok(worst)
}

/// The full property suite.
pub fn run_suite(seed: u64) -> Vec<CheckResult> {
    vec![
        check_fusion_equivalence(seed),
        check_end_to_end_fusion(seed + 1),
        check_eq16_gradients(seed + 2),
        check_complexity_oracles(seed + 3),
        check_drop_semantics(seed + 4),
        check_loss_identities(seed + 5),
        check_apx_mask(seed + 6),
        check_io_round_trips(seed + 7),
    ]
}
