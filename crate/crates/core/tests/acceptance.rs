//! Acceptance suite. Each test prints one `criterion N: PASS|FAIL` line
//! before asserting.

mod common;

use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::OnceLock;

use bleedscope::config::{GaborParams, ModelConfig, OffsetNormalization};
use bleedscope::data::synth::{synth_clip, MotionProfile, SynthSpec};
use bleedscope::data::window_sampler;
use bleedscope::eval::metrics::{dice_score, iou, pck};
use bleedscope::eval::report::validate_report;
use bleedscope::maskbranch::gabor::{gabor_value, kernels_to_tensor, laplacian_5pt, laplacian_of_gabor, GaborBank};
use bleedscope::model::{BleedNet, FrameInput, Phase};
use bleedscope::nn::{depthwise_bank_sum, hash_tensors};
use bleedscope::pointbranch::flow::ClassicalFlow;
use bleedscope::pointbranch::{mean_background_offset, FlowSource, PointPrediction};
use bleedscope::rng::SeededRng;
use bleedscope::train::losses::{dice_loss, existence_bce, focal_loss, point_objective, scalar, smooth_l1};
use bleedscope::train::run::StepRecord;
use bleedscope::train::step::{step_a, step_b, partition, OptimState, PreparedClip, WindowRef};
use bleedscope::types::{BinaryMask, BleedAnnotation, Point};
use candle_core::{DType, Device, Tensor};
use ndarray::Array2;

fn verdict(n: u32, ok: bool, detail: impl std::fmt::Display) {
    println!("criterion {n}: {} {detail}", if ok { "PASS" } else { "FAIL" });
}

/// Small valid architecture for protocol checks.
fn small_config() -> ModelConfig {
    ModelConfig {
        input_resolution: 64,
        channels: 16,
        channels_f1: 8,
        channels_f2: 8,
        num_heads: 2,
        decoder_depth: 1,
        ..ModelConfig::default()
    }
}

#[test]
fn criterion_1_flow_offset_oracle() {
    let t0 = std::time::Instant::now();
    let mut worst_bg = 0.0f64;
    let mut worst_hw = 0.0f64;
    for (i, (clip, flows)) in common::synth_set(3, 24, 101).into_iter().enumerate() {
        let (h, w) = clip.dims();
        let spec_rng = SeededRng::new(101).split("synth");
        let spec = SynthSpec::from_profile(
            MotionProfile::Translate,
            24,
            (128, 128),
            &mut spec_rng.split_index("clip", i as u64),
        );
        for (k, f) in flows.iter().enumerate() {
            let mask = clip.frames[k + 1].1.mask_or_empty(h, w);
            let frac = mask.iter().filter(|&&b| !b).count() as f64 / (h * w) as f64;
            let (dx, dy) = spec.camera_path[k];
            let b = mean_background_offset(f, &mask, OffsetNormalization::BackgroundCount).unwrap();
            let p = mean_background_offset(f, &mask, OffsetNormalization::PaperHw).unwrap();
            worst_bg = worst_bg.max((b.dx - dx).abs()).max((b.dy - dy).abs());
            worst_hw = worst_hw.max((p.dx - frac * dx).abs()).max((p.dy - frac * dy).abs());
        }
    }

    let mut worst_classical = 0.0f64;
    let flow = ClassicalFlow::default();
    for (j, &(dx, dy)) in [(0.5, 0.0), (3.0, -2.0), (-3.0, 4.0), (0.0, -5.0), (-4.5, -1.5)].iter().enumerate() {
        let spec = SynthSpec {
            n_frames: 2,
            image_size: (128, 128),
            camera_path: vec![(dx, dy)],
            bleed_onset: 1,
            source_point_path: vec![Point::new(60.0, 70.0); 2],
            region_growth_rate: 0.0,
            texture_seed: 40 + j as u64,
        };
        let (clip, _) = synth_clip(&spec, "pan", &mut SeededRng::new(j as u64)).unwrap();
        let f = flow.estimate(&clip.frames[0].0, &clip.frames[1].0).unwrap();
        let mask = clip.frames[1].1.mask_or_empty(128, 128);
        let o = mean_background_offset(&f, &mask, OffsetNormalization::BackgroundCount).unwrap();
        worst_classical = worst_classical.max((o.dx - dx).abs()).max((o.dy - dy).abs());
    }
    let secs = t0.elapsed().as_secs_f64();
    let ok = worst_bg <= 1e-6 && worst_hw <= 1e-6 && worst_classical <= 0.5 && secs < 60.0;
    verdict(
        1,
        ok,
        format!("injected |err| bg {worst_bg:.2e} hw {worst_hw:.2e}; classical {worst_classical:.3} px; {secs:.1}s"),
    );
    assert!(ok);
}

#[test]
fn criterion_2_gradient_suite() {
    let t0 = std::time::Instant::now();
    let mut reports = vec![
        ("edge_generator", common::grad_edge_generator(1)),
        ("mask_decoder", common::grad_mask_decoder(2)),
        ("point_decoder", common::grad_point_decoder(3)),
    ];
    reports.extend(common::grad_losses(4));
    let worst = reports.iter().map(|(_, r)| r.max_rel_err).fold(0.0, f64::max);
    let secs = t0.elapsed().as_secs_f64();
    let ok = worst < 1e-3 && reports.iter().all(|(_, r)| r.checked > 0) && secs < 300.0;
    let detail: Vec<String> = reports.iter().map(|(n, r)| format!("{n} {:.1e}", r.max_rel_err)).collect();
    verdict(2, ok, format!("max rel err {worst:.2e} [{}]; {secs:.1}s", detail.join(", ")));
    for (n, r) in &reports {
        println!("  {n}: {r:?}");
    }
    for (n, r) in &reports {
        assert!(r.max_rel_err < 1e-3, "{n}: {r:?}");
    }
    assert!(ok);
}

struct PipelineRun {
    codes: Vec<(String, i32)>,
    root: PathBuf,
    steps: Vec<StepRecord>,
    report: serde_json::Value,
    metrics_a: String,
    metrics_b: String,
    train_secs: f64,
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_bleedscope"))
}

fn acceptance_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/acceptance.toml")
}

fn run_cli(codes: &mut Vec<(String, i32)>, name: &str, args: &[&str]) {
    let out = bin().args(args).output().unwrap();
    if !out.status.success() {
        eprintln!("{name} failed:\n{}", String::from_utf8_lossy(&out.stderr));
    }
    codes.push((name.to_string(), out.status.code().unwrap_or(-1)));
}

/// synth → train (twice) → eval → viz under the acceptance config. The
/// four clips all go to the training split so the same run also serves the
/// overfit oracle.
fn pipeline() -> &'static PipelineRun {
    static RUN: OnceLock<PipelineRun> = OnceLock::new();
    RUN.get_or_init(|| {
        let root = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance_pipeline");
        let _ = std::fs::remove_dir_all(&root);
        std::fs::create_dir_all(&root).unwrap();
        let p = |s: &str| root.join(s).to_string_lossy().into_owned();
        let cfg = acceptance_config().to_string_lossy().into_owned();
        let mut codes = Vec::new();
        run_cli(
            &mut codes,
            "synth",
            &["synth", "--out", &p("data"), "--clips", "4", "--frames", "32", "--seed", "0", "--test-clips", "0"],
        );
        let t0 = std::time::Instant::now();
        run_cli(&mut codes, "train#1", &["train", "--config", &cfg, "--data", &p("data"), "--out", &p("run_a")]);
        let train_secs = t0.elapsed().as_secs_f64();
        run_cli(&mut codes, "train#2", &["train", "--config", &cfg, "--data", &p("data"), "--out", &p("run_b")]);
        run_cli(
            &mut codes,
            "eval",
            &[
                "eval",
                "--checkpoint",
                &p("run_a/checkpoints/last.safetensors"),
                "--data",
                &p("data"),
                "--split",
                "train",
                "--out",
                &p("eval"),
            ],
        );
        run_cli(
            &mut codes,
            "viz",
            &[
                "viz",
                "--pred",
                &p("eval/predictions"),
                "--data",
                &p("data"),
                "--out",
                &p("viz"),
                "--metrics",
                &p("run_a/metrics.jsonl"),
            ],
        );
        let read = |s: &str| std::fs::read_to_string(root.join(s)).unwrap_or_default();
        let steps = read("run_a/steps.jsonl")
            .lines()
            .filter_map(|l| serde_json::from_str(l).ok())
            .collect();
        let report = serde_json::from_str(&read("eval/report.json")).unwrap_or(serde_json::Value::Null);
        PipelineRun {
            metrics_a: read("run_a/metrics.jsonl"),
            metrics_b: read("run_b/metrics.jsonl"),
            codes,
            root,
            steps,
            report,
            train_secs,
        }
    })
}

fn moving_average(v: &[f64], window: usize) -> Vec<f64> {
    v.windows(window).map(|w| w.iter().sum::<f64>() / window as f64).collect()
}

fn rises(v: &[f64]) -> usize {
    v.windows(2).filter(|w| w[1] > w[0]).count()
}

fn nonincreasing(v: &[f64]) -> bool {
    v.windows(2).all(|w| w[1] <= w[0])
}

#[test]
fn criterion_3_overfit_oracle() {
    let run = pipeline();
    let agg = &run.report["aggregate"];
    let train_iou = agg["iou"].as_f64().unwrap_or(f64::NAN);
    let pck10 = agg["pck"]["0.1"].as_f64().unwrap_or(f64::NAN);
    let lm: Vec<f64> = run.steps.iter().map(|s| s.loss_mask).collect();
    let lp: Vec<f64> = run.steps.iter().map(|s| s.loss_point).collect();
    let (mm, mp) = (moving_average(&lm, 20), moving_average(&lp, 20));
    let ends = |v: &[f64]| format!("{:.3}->{:.3}, {} rises", v.first().unwrap_or(&f64::NAN), v.last().unwrap_or(&f64::NAN), rises(v));
    let ok = run.steps.len() == 200
        && train_iou >= 0.80
        && pck10 >= 0.90
        && nonincreasing(&mm)
        && nonincreasing(&mp)
        && run.train_secs < 1800.0;
    verdict(
        3,
        ok,
        format!(
            "{} steps, train IoU {train_iou:.4}, PCK-10% {pck10:.4}, {:.0}s; L_m 20-step average {}; L_p 20-step average {}",
            run.steps.len(),
            run.train_secs,
            ends(&mm),
            ends(&mp)
        ),
    );
    assert!(ok);
}

#[test]
fn criterion_4_alternating_freeze() {
    let cfg = small_config();
    let model = BleedNet::new(&cfg, DType::F32).unwrap();
    let (clip, flows) = common::synth_set(1, 16, 7).pop().unwrap();
    let prepared = PreparedClip::new(&clip, &cfg, &FlowSource::Injected(flows), DType::F32).unwrap();
    let windows = window_sampler(prepared.clip.len(), cfg.window_size);
    let mut state = OptimState::new(&model, 50).unwrap();
    let (theta, vartheta) = partition(&model).unwrap();
    let names = |groups: &[bleedscope::train::optim::ParamGroup]| -> Vec<String> {
        groups.iter().flat_map(|g| g.params.iter().map(|(n, _)| n.clone())).collect()
    };
    let (theta, vartheta) = (names(&theta), names(&vartheta));
    let per_param = |model: &BleedNet| -> Vec<(String, String)> {
        model
            .store
            .tensors()
            .iter()
            .map(|(n, t)| (n.clone(), hash_tensors([(n, t)]).unwrap()))
            .collect()
    };
    let subset = |model: &BleedNet, names: &[String]| -> String {
        let all = model.store.tensors();
        hash_tensors(all.iter().filter(|(n, _)| names.contains(n))).unwrap()
    };
    let mut violations = Vec::new();
    let mut theta_moves = 0;
    let mut vartheta_moves = 0;
    for t in 1..=50u64 {
        let w = WindowRef {
            clip: &prepared,
            range: &windows[(t as usize - 1) % windows.len()],
        };
        let h0 = (subset(&model, &theta), subset(&model, &vartheta));
        let p0 = per_param(&model);
        step_a(&model, &w, &mut state, t).unwrap();
        let h1 = (subset(&model, &theta), subset(&model, &vartheta));
        let p1 = per_param(&model);
        step_b(&model, &w, &mut state, t).unwrap();
        state.step = t;
        let h2 = (subset(&model, &theta), subset(&model, &vartheta));
        let p2 = per_param(&model);
        if h1.1 != h0.1 {
            violations.push(format!("iteration {t}: point parameters moved in step A"));
        }
        if h2.0 != h1.0 {
            violations.push(format!("iteration {t}: encoder/mask parameters moved in step B"));
        }
        theta_moves += usize::from(h1.0 != h0.0);
        vartheta_moves += usize::from(h2.1 != h1.1);
        for ((n, a), ((_, b), (_, c))) in p0.iter().zip(p1.iter().zip(&p2)) {
            if a != b && b != c {
                violations.push(format!("iteration {t}: `{n}` changed in both steps"));
            }
        }
    }
    let ok = violations.is_empty() && theta_moves == 50 && vartheta_moves == 50;
    verdict(
        4,
        ok,
        format!(
            "50 iterations, θ updated in {theta_moves} A steps, ϑ in {vartheta_moves} B steps, {} violations",
            violations.len()
        ),
    );
    assert!(ok, "{violations:?}");
}

#[test]
fn criterion_5_memory_protocol() {
    let cfg = small_config();
    let model = BleedNet::new(&cfg, DType::F32).unwrap();
    let n = 300;
    let mut rng = SeededRng::new(5);
    let spec = SynthSpec::from_profile(MotionProfile::Random, n, (64, 64), &mut rng);
    let (clip, flows) = synth_clip(&spec, "long", &mut rng).unwrap();
    let prepared = PreparedClip::new(&clip, &cfg, &FlowSource::Injected(flows), DType::F32).unwrap();
    let mut stream = model.new_stream();
    let mut bad = Vec::new();
    let mut steady = None;
    for k in 0..n {
        let expected = k.min(cfg.memory_capacity);
        let (m, p) = (stream.mask_bank.len(), stream.point_bank.len());
        if m != expected || p != expected {
            bad.push(format!("frame {k}: banks {m}/{p}, expected {expected}"));
        }
        let fp = stream.footprint();
        if k >= cfg.memory_capacity + 1 {
            match steady {
                None => steady = Some(fp),
                Some(s) if s != fp => bad.push(format!("frame {k}: footprint {fp} != {s}")),
                _ => {}
            }
        }
        let input = FrameInput {
            frame: &prepared.clip.frames[k].0,
            flow: prepared.flow_into(k),
            forced_mask: None,
        };
        model.step(&mut stream, input, Phase::Infer).unwrap();
    }
    let ok = bad.is_empty() && stream.mask_bank.len() == cfg.memory_capacity;
    verdict(
        5,
        ok,
        format!("{n} frames, capacity {}, steady footprint {:?}, {} violations", cfg.memory_capacity, steady, bad.len()),
    );
    assert!(ok, "{bad:?}");
}

fn ln(x: f64) -> f64 {
    x.ln()
}

fn t2(v: &[f64], shape: (usize, usize, usize, usize)) -> Tensor {
    Tensor::from_vec(v.to_vec(), shape, &Device::Cpu).unwrap()
}

#[test]
fn criterion_6_metric_identities() {
    let mut rng = SeededRng::new(66);
    let mut worst_identity = 0.0f64;
    for _ in 0..1000 {
        let (h, w) = (1 + rng.below(12), 1 + rng.below(12));
        let pa = rng.uniform();
        let pb = rng.uniform();
        let a: BinaryMask = Array2::from_shape_fn((h, w), |_| rng.uniform() < pa);
        let b: BinaryMask = Array2::from_shape_fn((h, w), |_| rng.uniform() < pb);
        let j = iou(&a, &b);
        let d = dice_score(&a, &b);
        worst_identity = worst_identity.max((d - 2.0 * j / (1.0 + j)).abs());
    }

    let dims = (100, 100);
    let mut pck_monotone = true;
    for _ in 0..200 {
        let n = 1 + rng.below(10);
        let gts: Vec<BleedAnnotation> = (0..n)
            .map(|_| {
                let present = rng.uniform() < 0.8;
                BleedAnnotation::new(None, present.then(|| Point::new(rng.uniform() * 99.0, rng.uniform() * 99.0)))
            })
            .collect();
        let preds: Vec<PointPrediction> = (0..n)
            .map(|i| PointPrediction {
                coord: [rng.uniform(), rng.uniform()],
                score: rng.uniform(),
                frame_index: i,
            })
            .collect();
        let vals: Vec<f64> = [0.02, 0.05, 0.1, 0.2, 0.5, 1.5]
            .iter()
            .filter_map(|&k| pck(&preds, &gts, k, dims, 0.5))
            .collect();
        pck_monotone &= nonincreasing(&vals.iter().rev().copied().collect::<Vec<_>>());
    }

    // each pair: computed value, independent closed form
    let mut cases: Vec<(&str, f64, f64)> = Vec::new();
    let z = t2(&[ln(9.0)], (1, 1, 1, 1));
    let one = t2(&[1.0], (1, 1, 1, 1));
    cases.push((
        "focal p=0.9",
        scalar(&focal_loss(&z, &one, 0.25, 2.0).unwrap()).unwrap(),
        -0.25 * 0.1f64.powi(2) * 0.9f64.ln(),
    ));
    let mut p = vec![0.0; 400];
    let mut t = vec![0.0; 400];
    p[..100].iter_mut().for_each(|v| *v = 1.0);
    t[200..300].iter_mut().for_each(|v| *v = 1.0);
    cases.push((
        "dice disjoint",
        scalar(&dice_loss(&t2(&p, (1, 1, 20, 20)), &t2(&t, (1, 1, 20, 20)), 1.0).unwrap()).unwrap(),
        1.0 - 1.0 / 201.0,
    ));
    let zero = Tensor::zeros((1, 2), DType::F64, &Device::Cpu).unwrap();
    for (d, want) in [(0.5, 0.125), (2.0, 1.5)] {
        let x = Tensor::new(&[[d, 0.0f64]], &Device::Cpu).unwrap();
        cases.push(("smooth_l1", scalar(&smooth_l1(&x, &zero).unwrap()).unwrap(), want));
    }
    let s = Tensor::new(&[[ln(9.0)]], &Device::Cpu).unwrap();
    cases.push(("bce s=0.9", scalar(&existence_bce(&s, true).unwrap()).unwrap(), -(0.9f64.ln())));
    let gt = BleedAnnotation::new(None, Some(Point::new(20.0, 30.0)));
    let coord = Tensor::new(&[[0.7f64, 0.3]], &Device::Cpu).unwrap();
    let lp = point_objective(&coord, &s, &gt, dims, &ModelConfig::default().loss).unwrap();
    cases.push(("L_p", scalar(&lp.total).unwrap(), 0.5 * 0.125 - 0.9f64.ln()));

    let block = |r0: usize, c0: usize| -> BinaryMask { Array2::from_shape_fn((6, 6), |(r, c)| (r0..r0 + 2).contains(&r) && (c0..c0 + 2).contains(&c)) };
    let (a, b) = (block(2, 2), block(2, 3));
    cases.push(("iou shifted block", iou(&a, &b), 2.0 / 6.0));
    cases.push(("dice shifted block", dice_score(&a, &b), 2.0 * 2.0 / 8.0));
    let diag = (100f64 * 100.0 * 2.0).sqrt();
    let gts: Vec<BleedAnnotation> = (0..3).map(|_| BleedAnnotation::new(None, Some(Point::new(50.0, 50.0)))).collect();
    let preds: Vec<PointPrediction> = [0.0, 0.04, 0.2]
        .iter()
        .enumerate()
        .map(|(i, e)| PointPrediction {
            coord: [(50.0 + e * diag) / 100.0, 0.5],
            score: 0.9,
            frame_index: i,
        })
        .collect();
    cases.push(("pck 3 frames", pck(&preds, &gts, 0.05, dims, 0.5).unwrap(), 2.0 / 3.0));

    let worst_case = cases.iter().map(|(_, a, b)| (a - b).abs()).fold(0.0, f64::max);
    let ok = worst_identity < 1e-12 && pck_monotone && worst_case <= 1e-6;
    verdict(
        6,
        ok,
        format!(
            "Dice/IoU identity max dev {worst_identity:.1e} over 1000 pairs; PCK monotone {pck_monotone}; {} closed forms max dev {worst_case:.1e}",
            cases.len()
        ),
    );
    for (n, a, b) in &cases {
        assert!((a - b).abs() <= 1e-6, "{n}: {a} vs {b}");
    }
    assert!(ok);
}

#[test]
fn criterion_7_gabor() {
    let mut devs = Vec::new();
    for psi in [0.0, 0.4, 1.0, std::f64::consts::FRAC_PI_2, 2.5] {
        let p = GaborParams {
            phase: psi,
            ..GaborParams::default()
        };
        for theta in p.thetas() {
            devs.push((gabor_value(&p, theta, 0.0, 0.0) - psi.cos()).abs());
        }
    }
    let p = GaborParams {
        wavelength: 4.0,
        phase: 0.0,
        sigma: 2.0,
        aspect: 0.5,
        ..GaborParams::default()
    };
    let v20 = gabor_value(&p, 0.0, 2.0, 0.0);
    devs.push((v20 - (-0.5f64).exp() * std::f64::consts::PI.cos()).abs());
    let kernel_dev = devs.iter().copied().fold(0.0, f64::max);
    let rounded_ok = (v20 + 0.6065).abs() < 5e-5;

    let f = Array2::from_shape_fn((9, 9), |(_, c)| (c as f64 - 4.0).powi(2));
    let lap = laplacian_5pt(&f);
    let quad_dev = lap
        .slice(ndarray::s![1..8, 1..8])
        .iter()
        .map(|v| (v - 2.0).abs())
        .fold(0.0, f64::max);

    let bank = GaborBank::new(&GaborParams::default()).unwrap();
    let lg = kernels_to_tensor(&laplacian_of_gabor(&bank), DType::F64, &Device::Cpu).unwrap();
    let (side, k) = (24, bank.params.kernel_size);
    let x = Tensor::full(-1.7f64, (1, 3, side, side), &Device::Cpu).unwrap();
    let y: Vec<f64> = depthwise_bank_sum(&x, &lg).unwrap().flatten_all().unwrap().to_vec1().unwrap();
    let lo = k / 2;
    let mut interior = 0.0f64;
    for ch in 0..3 {
        for r in lo..side - lo {
            for c in lo..side - lo {
                interior = interior.max(y[ch * side * side + r * side + c].abs());
            }
        }
    }
    let ok = kernel_dev <= 1e-6 && rounded_ok && quad_dev <= 1e-9 && interior <= 1e-9;
    verdict(
        7,
        ok,
        format!(
            "kernel values max dev {kernel_dev:.1e}, g(2,0) = {v20:.6}, Laplacian(x²) dev {quad_dev:.1e}, L_g on constant interior max {interior:.1e}"
        ),
    );
    assert!(ok);
}

#[test]
fn criterion_8_pipeline_round_trip() {
    let run = pipeline();
    let codes_ok = run.codes.len() == 5 && run.codes.iter().all(|(_, c)| *c == 0);
    let schema = validate_report(&run.report);
    let identical = !run.metrics_a.is_empty() && run.metrics_a == run.metrics_b;
    let plots = ["loss.svg", "iou.svg", "pck.svg"]
        .iter()
        .all(|f| run.root.join("viz/plots").join(f).is_file());
    let ok = codes_ok && schema.is_ok() && identical && plots;
    verdict(
        8,
        ok,
        format!(
            "exit codes {:?}; report schema {}; metrics logs identical {identical}; plots {plots}",
            run.codes,
            match &schema {
                Ok(()) => "valid".to_string(),
                Err(e) => format!("invalid ({e})"),
            }
        ),
    );
    assert!(ok);
}
