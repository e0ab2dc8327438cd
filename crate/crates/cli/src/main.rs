use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use smalldepth::distill::{self, DistillOptions, DistillSet};
use smalldepth::io::{self, TeacherBundle, WeightStore};
use smalldepth::loss::{self, ApxCoeffs, ApxMaps, DepthMetrics};
use smalldepth::net::{build_smalldepth, disp_to_depth, SmallDepthConfig, SmallDepthModel};
use smalldepth::profile::profile_model;
use smalldepth::tensor::bilinear_resize;
use smalldepth::{verify, Rng, Tensor4};

#[derive(Parser)]
#[command(name = "smalldepth", about = "Lightweight depth-estimation toolkit", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Complexity report (Param / FLOPs / MAC) per filter site.
    Profile {
        /// Model config file; the built-in default when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Input resolution as HxW.
        #[arg(long, default_value = "128x416")]
        res: String,
        /// Write the per-site rows as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Fuse every branch bank into single filters and verify equivalence.
    Fuse {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long = "out")]
        output: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Random probes for the equivalence check.
        #[arg(long, default_value_t = 4)]
        probes: usize,
    },
    /// Run a stored model on an image and write the disparity or depth map.
    Infer {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Disparity scale to emit (0 = finest).
        #[arg(long, default_value_t = 0)]
        scale: usize,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Convert disparity to metric-style depth (1/(10*d + 0.01)).
        #[arg(long)]
        depth: bool,
        /// Keep the native map resolution instead of resampling to the input.
        #[arg(long)]
        no_upsample: bool,
        /// Also write a 16-bit PGM scaled by this factor.
        #[arg(long)]
        pgm16: Option<PathBuf>,
        #[arg(long, default_value_t = 256.0)]
        pgm_scale: f64,
    },
    /// Run the full property suite; nonzero exit on any violation.
    Verify {
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 20240501)]
        seed: u64,
    },
    /// Toy distillation against bundled or synthetic teacher maps.
    DistillToy {
        /// Directory of teacher frames (.sdw); synthetic teacher when omitted.
        #[arg(long)]
        teacher: Option<PathBuf>,
        #[arg(long, default_value_t = 200)]
        iters: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "32x64")]
        res: String,
        #[arg(long, default_value_t = 1e-2)]
        lr: f64,
        /// Add source-view pyramid terms from the reference plugin.
        #[arg(long)]
        pyramid: bool,
        /// Save the distilled student weights.
        #[arg(long)]
        save_student: Option<PathBuf>,
    },
    /// Depth metrics over paired prediction/ground-truth maps.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long, default_value_t = 80.0)]
        cap: f64,
    },
}

fn parse_res(s: &str) -> Result<(usize, usize)> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .with_context(|| format!("resolution `{s}` must look like 128x416"))?;
    Ok((h.trim().parse()?, w.trim().parse()?))
}

fn load_config(path: &Option<PathBuf>) -> Result<SmallDepthConfig> {
    match path {
        Some(p) => Ok(io::load_config(p).with_context(|| format!("reading {}", p.display()))?),
        None => Ok(SmallDepthConfig::default()),
    }
}

fn cmd_profile(config: Option<PathBuf>, res: String, csv: Option<PathBuf>) -> Result<()> {
    let cfg = load_config(&config)?;
    let (h, w) = parse_res(&res)?;
    let mut rng = Rng::new(0);
    let model = build_smalldepth::<f32>(&cfg, &mut rng)?;
    let report = profile_model(&model, (h, w))?;
    print!("{}", report.render_table());
    if let Some(path) = csv {
        std::fs::write(&path, report.to_csv())?;
        println!("rows written to {}", path.display());
    }
    Ok(())
}

fn cmd_fuse(input: PathBuf, output: PathBuf, config: Option<PathBuf>, seed: u64, probes: usize) -> Result<()> {
    let cfg = load_config(&config)?;
    if !cfg.etm {
        bail!("config has etm = off; nothing to fuse");
    }
    let store = WeightStore::read_file(&input).with_context(|| format!("reading {}", input.display()))?;
    let model = SmallDepthModel::<f32>::from_store(&cfg, &store)?;
    let max_dev = verify::probe_fusion(&model, seed, probes)?;
    let fused = model.fuse_all()?;
    fused.to_store()?.write_file(&output)?;
    println!("fused {} sites -> {}", model.units().len(), output.display());
    println!("max probe deviation {max_dev:.3e}");
    if max_dev > 1e-4 {
        bail!("fusion probe deviation {max_dev:.3e} exceeds 1e-4");
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_infer(
    weights: PathBuf,
    image: PathBuf,
    out: PathBuf,
    scale: usize,
    config: Option<PathBuf>,
    depth: bool,
    no_upsample: bool,
    pgm16: Option<PathBuf>,
    pgm_scale: f64,
) -> Result<()> {
    let cfg = load_config(&config)?;
    let store = WeightStore::read_file(&weights)?;
    let model = SmallDepthModel::<f32>::from_store(&cfg, &store)?;
    let img: Tensor4<f32> = io::read_image(&image)?;
    let [_, c, h, w] = img.dims();
    if c != 3 {
        bail!("expected a color (P6) image with 3 channels, got {c}");
    }
    if h % 32 != 0 || w % 32 != 0 {
        bail!("input dims {h}x{w} must be multiples of 32");
    }
    if scale > 3 {
        bail!("scale {scale} out of range 0..=3");
    }
    let maps = model.infer(&img)?;
    let mut map = maps.disp[scale].clone();
    if !no_upsample {
        map = bilinear_resize(&map, h, w)?;
    }
    if depth {
        map = disp_to_depth(&map);
    }
    io::write_pfm(&out, &map)?;
    println!(
        "{} map at scale {scale} ({}x{}) -> {}",
        if depth { "depth" } else { "disparity" },
        map.dims()[2],
        map.dims()[3],
        out.display()
    );
    if let Some(p) = pgm16 {
        io::write_pgm16(&p, &map, pgm_scale)?;
        println!("16-bit PGM (x{pgm_scale}) -> {}", p.display());
    }
    Ok(())
}

fn cmd_verify(weights: Option<PathBuf>, config: Option<PathBuf>, seed: u64) -> Result<()> {
    let mut failures = 0;
    for check in verify::run_suite(seed) {
        println!(
            "[{}] {}: {}",
            if check.passed { "PASS" } else { "FAIL" },
            check.name,
            check.detail
        );
        if !check.passed {
            failures += 1;
        }
    }
    if let Some(wpath) = weights {
        let cfg = load_config(&config)?;
        let store = WeightStore::read_file(&wpath)?;
        let model = SmallDepthModel::<f32>::from_store(&cfg, &store)?;
        let brute = smalldepth::profile::brute_force_param_count(&model);
        let report = profile_model(&model, (64, 96))?;
        let ok = report.totals(None).param == brute;
        println!(
            "[{}] model_param_oracle: profiled {} vs stored {}",
            if ok { "PASS" } else { "FAIL" },
            report.totals(None).param,
            brute
        );
        if !ok {
            failures += 1;
        }
        if cfg.etm {
            let dev = verify::probe_fusion(&model, seed, 2)?;
            let ok = dev <= 1e-4;
            println!(
                "[{}] model_fusion_probe: max deviation {dev:.3e}",
                if ok { "PASS" } else { "FAIL" }
            );
            if !ok {
                failures += 1;
            }
        }
    }
    if failures > 0 {
        bail!("{failures} check(s) failed");
    }
    println!("all checks passed");
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_distill(
    teacher: Option<PathBuf>,
    iters: usize,
    seed: u64,
    config: Option<PathBuf>,
    res: String,
    lr: f64,
    pyramid: bool,
    save_student: Option<PathBuf>,
) -> Result<()> {
    let cfg = match &config {
        Some(_) => load_config(&config)?,
        None => SmallDepthConfig {
            widths: [8, 8, 8, 16, 32],
            ..Default::default()
        },
    };
    let (h, w) = parse_res(&res)?;
    let set: DistillSet<f32> = match teacher {
        Some(dir) => {
            let bundle = TeacherBundle::<f32>::load_dir(&dir)?;
            // teacher maps pair with synthetic frames of the stated resolution;
            // resize teacher maps onto the student's slot dims
            let mut rng = Rng::new(seed);
            let mut probe_cfg = cfg.clone();
            probe_cfg.etm = false;
            let probe = build_smalldepth::<f32>(&probe_cfg, &mut rng)?;
            let img = Tensor4::from_fn([1, 3, h, w], |_, _, _, _| rng.uniform(0.0, 1.0) as f32);
            let maps = probe.infer(&img)?;
            let student_maps = ApxMaps {
                enc: maps.enc,
                dec: maps.dec,
                disp: maps.disp,
            };
            let bundle = bundle.resize_to(&student_maps)?;
            let mut rng2 = Rng::new(seed + 1);
            DistillSet {
                frames: bundle
                    .frames
                    .into_iter()
                    .map(|(_, maps)| {
                        let img =
                            Tensor4::from_fn([1, 3, h, w], |_, _, _, _| rng2.uniform(0.0, 1.0) as f32);
                        (img, maps)
                    })
                    .collect(),
            }
        }
        None => distill::synthetic_teacher::<f32>(&cfg, (h, w), 2, seed)?,
    };

    let mut student_cfg = cfg.clone();
    student_cfg.etm = false;
    let mut rng = Rng::new(seed ^ 0x5eed);
    let mut student = build_smalldepth::<f32>(&student_cfg, &mut rng)?;
    let opts = DistillOptions {
        iters,
        lr,
        coeffs: ApxCoeffs::default(),
        with_pyramid: pyramid,
    };
    let report = distill::run(&mut student, &set, &opts)?;
    for (i, v) in report.trajectory.iter().enumerate() {
        if i % 10 == 0 || i + 1 == report.trajectory.len() {
            println!("iter {i:>4}  apx {v:.6e}");
        }
    }
    println!(
        "initial apx {:.6e}  final apx {:.6e}  ratio {:.3}",
        report.initial_apx,
        report.final_apx,
        report.final_apx / report.initial_apx
    );
    if let Some(path) = save_student {
        student.to_store()?.write_file(&path)?;
        println!("student weights -> {}", path.display());
    }
    if !report.final_apx.is_finite() {
        bail!("distillation diverged");
    }
    Ok(())
}

fn cmd_eval(pred: PathBuf, gt: PathBuf, cap: f64) -> Result<()> {
    let mut pred_files: Vec<PathBuf> = std::fs::read_dir(&pred)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().map(|e| e == "pfm").unwrap_or(false))
        .collect();
    pred_files.sort();
    if pred_files.is_empty() {
        bail!("no .pfm predictions under {}", pred.display());
    }
    println!("{:<20} {}", "frame", DepthMetrics::header());
    let mut sums = [0.0f64; 7];
    let mut count = 0usize;
    for p in &pred_files {
        let stem = p.file_stem().unwrap().to_string_lossy().into_owned();
        let gt_path = gt.join(format!("{stem}.pfm"));
        if !gt_path.exists() {
            bail!("missing ground truth for {stem}");
        }
        let pd: Tensor4<f64> = io::read_pfm(p)?;
        let gd: Tensor4<f64> = io::read_pfm(&gt_path)?;
        let pd = if pd.dims() != gd.dims() {
            bilinear_resize(&pd, gd.dims()[2], gd.dims()[3])?
        } else {
            pd
        };
        let m = loss::eval_depth(&pd, &gd, None, cap)?;
        println!("{:<20} {}", stem, m.row());
        for (s, v) in sums.iter_mut().zip([m.abs_rel, m.sq_rel, m.rmse, m.rmse_log, m.delta1, m.delta2, m.delta3]) {
            *s += v;
        }
        count += 1;
    }
    let mean = DepthMetrics {
        abs_rel: sums[0] / count as f64,
        sq_rel: sums[1] / count as f64,
        rmse: sums[2] / count as f64,
        rmse_log: sums[3] / count as f64,
        delta1: sums[4] / count as f64,
        delta2: sums[5] / count as f64,
        delta3: sums[6] / count as f64,
    };
    println!("{:<20} {}", "mean", mean.row());
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Profile { config, res, csv } => cmd_profile(config, res, csv),
        Command::Fuse { input, output, config, seed, probes } => cmd_fuse(input, output, config, seed, probes),
        Command::Infer {
            weights,
            image,
            out,
            scale,
            config,
            depth,
            no_upsample,
            pgm16,
            pgm_scale,
        } => cmd_infer(weights, image, out, scale, config, depth, no_upsample, pgm16, pgm_scale),
        Command::Verify { weights, config, seed } => cmd_verify(weights, config, seed),
        Command::DistillToy {
            teacher,
            iters,
            seed,
            config,
            res,
            lr,
            pyramid,
            save_student,
        } => cmd_distill(teacher, iters, seed, config, res, lr, pyramid, save_student),
        Command::Eval { pred, gt, cap } => cmd_eval(pred, gt, cap),
    };
    if let Err(e) = result {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
