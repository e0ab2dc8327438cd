//! End-to-end checks of the command-line surface via the built binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use smalldepth::etm;
use smalldepth::io::{self, WeightStore};
use smalldepth::net::{build_smalldepth, Filter, SmallDepthConfig, SmallDepthModel};
use smalldepth::{Rng, Tensor4};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_smalldepth"))
}

fn workdir(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("smalldepth-cli-{name}"));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn run_ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn small_cfg() -> SmallDepthConfig {
    SmallDepthConfig {
        widths: [8, 8, 8, 16, 32],
        ..Default::default()
    }
}

fn write_cfg(dir: &Path, name: &str, etm_on: bool) -> PathBuf {
    let mut cfg = small_cfg();
    cfg.etm = etm_on;
    let p = dir.join(name);
    std::fs::write(&p, io::render_config(&cfg)).unwrap();
    p
}

fn write_ppm(path: &Path, h: usize, w: usize, seed: u64) {
    let mut rng = Rng::new(seed);
    let mut bytes = format!("P6\n{w} {h}\n255\n").into_bytes();
    for _ in 0..h * w * 3 {
        bytes.push(rng.below(256) as u8);
    }
    std::fs::write(path, bytes).unwrap();
}

#[test]
fn profile_reports_published_budget() {
    let dir = workdir("profile");
    let csv = dir.join("rows.csv");
    let out = bin()
        .args(["profile", "--res", "128x416", "--csv"])
        .arg(&csv)
        .output()
        .unwrap();
    let stdout = run_ok(&out);
    let total_line = stdout
        .lines()
        .find(|l| l.starts_with("total"))
        .expect("total line");
    let param: f64 = total_line.split_whitespace().nth(1).unwrap().parse().unwrap();
    let rel = (param - 2.35e6) / 2.35e6;
    assert!(rel.abs() <= 0.15, "total param {param} rel {rel:+.3}");
    let rows = std::fs::read_to_string(&csv).unwrap();
    assert!(rows.lines().count() > 40);
    assert!(rows.starts_with("name,subgraph"));
}

#[test]
fn fuse_writes_equivalent_store_and_detects_corruption() {
    let dir = workdir("fuse");
    let cfg_on = write_cfg(&dir, "etm.cfg", true);

    // freshly initialized bank model with randomized branches
    let mut cfg = small_cfg();
    cfg.etm = true;
    let mut rng = Rng::new(7);
    let mut model = build_smalldepth::<f32>(&cfg, &mut rng).unwrap();
    for unit in model.units_mut() {
        if let Filter::Bank(bank) = &mut unit.filter {
            etm::randomize_bank(bank, &mut rng);
            for b in bank.branches.iter_mut() {
                b.scale *= 0.3;
            }
        }
    }
    let store_path = dir.join("model.sdw");
    model.to_store().unwrap().write_file(&store_path).unwrap();

    let fused_path = dir.join("fused.sdw");
    let out = bin()
        .args(["fuse", "--in"])
        .arg(&store_path)
        .arg("--out")
        .arg(&fused_path)
        .arg("--config")
        .arg(&cfg_on)
        .output()
        .unwrap();
    let stdout = run_ok(&out);
    let dev: f64 = stdout
        .lines()
        .find(|l| l.starts_with("max probe deviation"))
        .and_then(|l| l.split_whitespace().last())
        .unwrap()
        .parse()
        .unwrap();
    assert!(dev <= 1e-5, "probe deviation {dev}");

    // the fused store loads under etm = off and matches the bank model
    let mut cfg_off = cfg.clone();
    cfg_off.etm = false;
    let fused_store = WeightStore::read_file(&fused_path).unwrap();
    let fused = SmallDepthModel::<f32>::from_store(&cfg_off, &fused_store).unwrap();
    let img = Tensor4::from_fn([1, 3, 32, 64], |_, _, _, _| 0.5f32);
    let a = model.infer(&img).unwrap();
    let b = fused.infer(&img).unwrap();
    for (x, y) in a.disp.iter().zip(b.disp.iter()) {
        assert!(x.max_abs_diff(y).unwrap() <= 1e-4);
    }

    // flip a payload byte: the checksum-free read still succeeds, but the
    // fused outputs no longer match the pristine model
    let mut bytes = std::fs::read(&store_path).unwrap();
    // first entry is the stem weight: header is 12 bytes, entry header is
    // 2 + len("stem") + 1 + 1 + 4*4 bytes, then the payload
    let payload_off = 12 + 2 + 4 + 1 + 1 + 16;
    bytes[payload_off + 3] ^= 0x80; // flip the sign of the first weight
    let corrupted_path = dir.join("corrupt.sdw");
    std::fs::write(&corrupted_path, &bytes).unwrap();
    let corrupted_store = WeightStore::read_file(&corrupted_path).unwrap();
    let corrupted = SmallDepthModel::<f32>::from_store(&cfg, &corrupted_store).unwrap();
    let fused_corrupt = corrupted.fuse_all().unwrap();
    let c = fused_corrupt.infer(&img).unwrap();
    let mut dev = 0.0f32;
    for (x, y) in a.enc.iter().zip(c.enc.iter()) {
        dev = dev.max(x.max_abs_diff(y).unwrap());
    }
    assert!(dev > 1e-4, "corruption must surface downstream, dev {dev}");
}

#[test]
fn infer_is_bitwise_deterministic_and_validates_input() {
    let dir = workdir("infer");
    let cfg_off = write_cfg(&dir, "off.cfg", false);
    let mut rng = Rng::new(3);
    let model = build_smalldepth::<f32>(&small_cfg(), &mut rng).unwrap();
    let store_path = dir.join("m.sdw");
    model.to_store().unwrap().write_file(&store_path).unwrap();
    let img_path = dir.join("frame.ppm");
    write_ppm(&img_path, 32, 64, 9);

    let run = |out_name: &str| -> Vec<u8> {
        let out_path = dir.join(out_name);
        let out = bin()
            .args(["infer", "--weights"])
            .arg(&store_path)
            .arg("--image")
            .arg(&img_path)
            .arg("--out")
            .arg(&out_path)
            .arg("--config")
            .arg(&cfg_off)
            .output()
            .unwrap();
        run_ok(&out);
        std::fs::read(&out_path).unwrap()
    };
    assert_eq!(run("a.pfm"), run("b.pfm"), "identical runs must be bitwise equal");

    // ASCII PNM gets a nonzero exit with a diagnostic
    let bad = dir.join("ascii.pgm");
    std::fs::write(&bad, b"P2\n1 1\n255\n5\n").unwrap();
    let out = bin()
        .args(["infer", "--weights"])
        .arg(&store_path)
        .arg("--image")
        .arg(&bad)
        .arg("--out")
        .arg(dir.join("x.pfm"))
        .arg("--config")
        .arg(&cfg_off)
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("ASCII"));
}

#[test]
fn verify_command_passes() {
    let out = bin().args(["verify", "--seed", "99"]).output().unwrap();
    let stdout = run_ok(&out);
    assert!(stdout.contains("all checks passed"));
    assert_eq!(stdout.matches("[PASS]").count(), 8);
}

#[test]
fn verify_with_weights_checks_the_stored_model() {
    let dir = workdir("verify-weights");
    let mut cfg = small_cfg();
    cfg.etm = true;
    let cfg_path = write_cfg(&dir, "etm.cfg", true);
    let mut rng = Rng::new(13);
    let model = build_smalldepth::<f32>(&cfg, &mut rng).unwrap();
    let store_path = dir.join("m.sdw");
    model.to_store().unwrap().write_file(&store_path).unwrap();
    let out = bin()
        .args(["verify", "--seed", "5", "--weights"])
        .arg(&store_path)
        .arg("--config")
        .arg(&cfg_path)
        .output()
        .unwrap();
    let stdout = run_ok(&out);
    assert!(stdout.contains("model_param_oracle"));
    assert!(stdout.contains("model_fusion_probe"));
    assert_eq!(stdout.matches("[PASS]").count(), 10);
}

#[test]
fn distill_toy_halves_loss_with_bundled_teacher() {
    let dir = workdir("distill");
    // teacher bundle written through the public container format
    let cfg = small_cfg();
    let set = smalldepth::distill::synthetic_teacher::<f32>(&cfg, (32, 64), 2, 5).unwrap();
    let bundle = smalldepth::io::TeacherBundle {
        frames: set
            .frames
            .iter()
            .enumerate()
            .map(|(i, (_, maps))| (format!("frame{i}"), maps.clone()))
            .collect(),
    };
    let teacher_dir = dir.join("teacher");
    bundle.save_dir(&teacher_dir).unwrap();

    let out = bin()
        .args(["distill-toy", "--iters", "60", "--seed", "1", "--teacher"])
        .arg(&teacher_dir)
        .output()
        .unwrap();
    let stdout = run_ok(&out);
    let ratio: f64 = stdout
        .lines()
        .find(|l| l.contains("ratio"))
        .and_then(|l| l.split_whitespace().last())
        .unwrap()
        .parse()
        .unwrap();
    assert!(ratio < 1.0, "distillation must descend, ratio {ratio}");
}

#[test]
fn eval_command_reports_metrics() {
    let dir = workdir("eval");
    let pred = dir.join("pred");
    let gt = dir.join("gt");
    std::fs::create_dir_all(&pred).unwrap();
    std::fs::create_dir_all(&gt).unwrap();
    let mut rng = Rng::new(11);
    for i in 0..2 {
        let depth = Tensor4::<f32>::from_fn([1, 1, 8, 8], |_, _, _, _| rng.uniform(1.0, 60.0) as f32);
        io::write_pfm(gt.join(format!("f{i}.pfm")), &depth).unwrap();
        // scaled prediction: median alignment must cancel the factor
        io::write_pfm(pred.join(format!("f{i}.pfm")), &depth.scale(2.0)).unwrap();
    }
    let out = bin()
        .args(["eval", "--pred"])
        .arg(&pred)
        .arg("--gt")
        .arg(&gt)
        .args(["--cap", "80"])
        .output()
        .unwrap();
    let stdout = run_ok(&out);
    let mean_line = stdout.lines().find(|l| l.starts_with("mean")).unwrap();
    let abs_rel: f64 = mean_line.split_whitespace().nth(1).unwrap().parse().unwrap();
    assert!(abs_rel < 1e-5, "median alignment should cancel scaling, got {abs_rel}");
}
