//! Acceptance suite: one test per criterion, each printing a PASS/FAIL line
//! with its measurements (`cargo test --test acceptance -- --nocapture`).

use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::Instant;

use oneshot3d::geos::{geodesic_dijkstra, geodesic_raster, GeosConfig};
use oneshot3d::nn::{self, finite_diff_check, finite_diff_check_terms, Gradients, Layer, ModelParams, NetworkBuilder, NetworkSpec, DEFAULT_STEPS};
use oneshot3d::phantom::{generate_phantom, PhantomConfig};
use oneshot3d::pipeline::{
    run_pipeline_in, stage_propagate, stage_sweep_tau, ExperimentConfig, MetricsReport, ScribbleConfig, SubjectCounts,
    TREND_TOLERANCE,
};
use oneshot3d::prnet::{pred_offset, train_prnet, PRNet, PRNetConfig, PrnetTrainConfig};
use oneshot3d::propagate::{dfd_sim, filter_points, propagate_scribbles, LocatedPoint, PropagationConfig};
use oneshot3d::scribble::draw_support_scribble;
use oneshot3d::seg::{plc_correct, plc_update_delta, PlcConfig, PlcState, SegConfig, SegModel};
use oneshot3d::volume::normalize_intensity;
use oneshot3d::{Tensor, Volume3};
use proptest::prelude::*;
use proptest::test_runner::{Config as PropConfig, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn verdict(n: u32, name: &str, ok: bool, detail: &str) {
    println!(
        "criterion {n} [{}] {name}: {detail}",
        if ok { "PASS" } else { "FAIL" }
    );
    assert!(ok, "criterion {n} ({name}) failed: {detail}");
}

fn scratch(name: &str) -> PathBuf {
    let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance").join(name);
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

// ---------------------------------------------------------------- 1

/// conv → `layer` → conv (or dense) with a fixed quadratic read-out, so the
/// gradient of every parameter flows through the layer under test.
fn sandwich(layer: &str) -> (NetworkSpec, Tensor) {
    let act = Layer::LeakyRelu { slope: 0.1 };
    let mut b = NetworkBuilder::new(vec![2, 4, 4, 4]);
    let c = b.conv("pre", NetworkBuilder::INPUT, 2, 2, 3);
    match layer {
        "conv3d_stride2" => {
            let x = b.add(
                "mid",
                Layer::Conv3d {
                    in_ch: 2,
                    out_ch: 3,
                    kernel: 3,
                    stride: 2,
                    pad: 1,
                },
                &[c],
            );
            b.conv("post", x, 3, 2, 1)
        }
        "leaky_relu" => {
            let x = b.add("mid", act, &[c]);
            b.conv("post", x, 2, 2, 3)
        }
        "downsample2" => {
            let x = b.add("mid", Layer::Downsample2, &[c]);
            b.conv("post", x, 2, 2, 3)
        }
        "upsample2" => {
            let x = b.add("mid", Layer::Upsample2, &[c]);
            b.conv("post", x, 2, 2, 3)
        }
        "concat" => {
            let x = b.add("mid", Layer::Concat, &[c, NetworkBuilder::INPUT]);
            b.conv("post", x, 4, 2, 3)
        }
        "sigmoid" => {
            let x = b.add("mid", Layer::Sigmoid, &[c]);
            b.conv("post", x, 2, 2, 3)
        }
        "global_avg_pool+dense" => {
            let x = b.add("mid", Layer::GlobalAvgPool, &[c]);
            b.add(
                "post",
                Layer::Dense {
                    in_features: 2,
                    out_features: 3,
                },
                &[x],
            )
        }
        "tanh_scale" => {
            let x = b.add("mid", Layer::TanhScale { r: 2.5 }, &[c]);
            b.conv("post", x, 2, 2, 3)
        }
        other => panic!("unknown layer {other}"),
    };
    b.output("post");
    let spec = b.build().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let x = Tensor::new(vec![2, 4, 4, 4], (0..128).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    (spec, x)
}

/// Loss `Σ w·y + ½ Σ y²` with fixed pseudo-random `w`.
fn quadratic_loss(spec: &NetworkSpec, params: &ModelParams, x: &Tensor) -> oneshot3d::Result<(f64, Gradients)> {
    let pass = nn::forward(spec, params, x)?;
    let y = pass.output(spec, "post")?;
    let w: Vec<f64> = (0..y.len()).map(|i| ((i * 7919) % 13) as f64 / 13.0 - 0.5).collect();
    let loss = y.data().iter().zip(&w).map(|(y, w)| w * y + 0.5 * y * y).sum();
    let dy = Tensor::new(y.shape().to_vec(), y.data().iter().zip(&w).map(|(y, w)| w + y).collect())?;
    let g = nn::backward(spec, params, &pass, &[("post", &dy)])?;
    Ok((loss, g))
}

#[test]
fn criterion_1_gradient_correctness() {
    let t = Instant::now();
    let mut lines = Vec::new();
    let mut ok = true;
    for layer in [
        "conv3d_stride2",
        "leaky_relu",
        "downsample2",
        "upsample2",
        "concat",
        "sigmoid",
        "global_avg_pool+dense",
        "tanh_scale",
    ] {
        let (spec, x) = sandwich(layer);
        let params = ModelParams::init(&spec, 5);
        let r = finite_diff_check(&params, |p| quadratic_loss(&spec, p, &x), 64, &DEFAULT_STEPS, 1e-4, 1).unwrap();
        ok &= r.passed;
        lines.push(format!("{layer} {:.1e} ({} params)", r.max_rel_err, r.checked));
    }

    let cfg = PRNetConfig {
        patch_size: [16, 16, 16],
        encoder_channels: [4, 4, 8, 8],
        decoder_channels: [8, 4, 4, 4],
        ..PRNetConfig::default()
    };
    let net = PRNet::new(cfg, 60.0, 3).unwrap();
    let (v, _) = generate_phantom(&PhantomConfig::default(), 0).unwrap();
    let v = normalize_intensity(&v);
    let x0 = oneshot3d::volume::crop_patch(&v, [10, 20, 24], [16, 16, 16]).unwrap();
    let x1 = oneshot3d::volume::crop_patch(&v, [14, 30, 18], [16, 16, 16]).unwrap();
    let d10 = oneshot3d::prnet::gt_offset([14, 30, 18], [10, 20, 24], v.spacing());
    // L_ssl = dis + rec, differenced term by term
    let r = finite_diff_check_terms(
        &net.params,
        |p| {
            let (l, g) = net.pair_loss(p, &x0, &x1, d10)?;
            Ok((vec![l.dis, l.rec], g))
        },
        64,
        &DEFAULT_STEPS,
        1e-4,
        2,
    )
    .unwrap();
    ok &= r.passed;
    lines.push(format!("PRNet L_ssl {:.1e}", r.max_rel_err));

    let seg = SegModel::new(SegConfig {
        depth: 2,
        base_channels: 4,
        crop: [8, 8, 8],
        ..SegConfig::default()
    })
    .unwrap();
    let crop = oneshot3d::volume::crop_patch(&v, [12, 24, 24], [8, 8, 8]).unwrap();
    let labels: Vec<u8> = crop.data().iter().map(|&x| u8::from(x > 0.45)).collect();
    let r = finite_diff_check(
        &seg.params,
        |p| {
            let (l, g) = seg.crop_loss(p, &crop, &labels)?;
            Ok((l.total, g))
        },
        64,
        &DEFAULT_STEPS,
        1e-4,
        3,
    )
    .unwrap();
    ok &= r.passed;
    lines.push(format!("segmenter CE+Dice {:.1e}", r.max_rel_err));

    let secs = t.elapsed().as_secs_f64();
    ok &= secs < 120.0;
    verdict(
        1,
        "gradient correctness",
        ok,
        &format!("max rel err: {}; {secs:.1}s (limit 120s)", lines.join(", ")),
    );
}

// ---------------------------------------------------------------- 2

#[test]
fn criterion_2_geodesic_oracle() {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = 0.0f64;
    let mut runs = 0;
    for _ in 0..20 {
        let shape: [usize; 3] = std::array::from_fn(|_| rng.gen_range(4..=24));
        let spacing: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.5..2.5));
        let n = shape.iter().product();
        let data: Vec<f32> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
        let v = Volume3::new(shape, spacing, data).unwrap();
        let seeds: Vec<_> = (0..rng.gen_range(1..=5))
            .map(|_| std::array::from_fn(|a| rng.gen_range(0..shape[a])))
            .collect();
        for neighborhood in [6u8, 26] {
            for gamma in [0.0, 10.0, 32.0] {
                let cfg = GeosConfig {
                    gamma,
                    neighborhood,
                    max_passes: 10_000,
                    epsilon: 0.0,
                };
                let a = geodesic_raster(&v, &seeds, &cfg).unwrap();
                let b = geodesic_dijkstra(&v, &seeds, &cfg).unwrap();
                worst = worst.max(a.max_abs_diff(&b));
                runs += 1;
            }
        }
    }
    let secs = t.elapsed().as_secs_f64();
    verdict(
        2,
        "geodesic raster == Dijkstra",
        worst <= 1e-5 && secs < 120.0,
        &format!("{runs} comparisons, max |diff| {worst:.2e} (limit 1e-5), {secs:.1}s (limit 120s)"),
    );
}

// ---------------------------------------------------------------- 3

#[test]
fn criterion_3_offset_bound_and_antisymmetry() {
    let mut runner = TestRunner::new(PropConfig {
        cases: 10_000,
        ..PropConfig::default()
    });
    let coord = || prop::array::uniform3(-1e3f64..1e3);
    let result = runner.run(&(coord(), coord(), 1e-3f64..1e4), |(p0, p1, r)| {
        let d = pred_offset(p0, p1, r);
        let back = pred_offset(p1, p0, r);
        for a in 0..3 {
            prop_assert!(d[a] > -r && d[a] < r, "component {} = {} with r = {}", a, d[a], r);
            prop_assert_eq!(d[a], -back[a]);
        }
        Ok(())
    });
    verdict(
        3,
        "offset bound and antisymmetry",
        result.is_ok(),
        &match result {
            Ok(()) => "10000 random (p0, p1, r): all components in (-r, r), exact antisymmetry".into(),
            Err(e) => e.to_string(),
        },
    );
}

// ---------------------------------------------------------------- 4

#[test]
fn criterion_4_feature_check_properties() {
    let mut runner = TestRunner::new(PropConfig {
        cases: 2_000,
        ..PropConfig::default()
    });
    let feats = |n| prop::collection::vec(-10.0f64..10.0, n);
    let sims = runner.run(
        &(feats(5), feats(7), feats(5), feats(7), 1e-3f64..1e3, 1e-3f64..1e3),
        |(a2, a4, b2, b4, k, m)| {
            let s = dfd_sim(&a2, &a4, &b2, &b4).unwrap();
            prop_assert!((-1.0..=1.0).contains(&s));
            let nonzero = |v: &[f64]| v.iter().any(|x| *x != 0.0);
            if nonzero(&a2) && nonzero(&a4) {
                prop_assert!((dfd_sim(&a2, &a4, &a2, &a4).unwrap() - 1.0).abs() < 1e-12);
            }
            let scale = |v: &[f64], f: f64| v.iter().map(|x| x * f).collect::<Vec<_>>();
            let scaled = dfd_sim(&scale(&a2, k), &scale(&a4, m), &scale(&b2, m), &scale(&b4, k)).unwrap();
            prop_assert!((scaled - s).abs() < 1e-9, "{} vs {}", scaled, s);
            Ok(())
        },
    );
    let mono = runner.run(
        &(prop::collection::vec(prop::option::of(-1.0f64..=1.0), 1..80), -1.0f64..=1.0, -1.0f64..=1.0),
        |(sims, t1, t2)| {
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            let mut pts: Vec<LocatedPoint> = sims
                .iter()
                .map(|&sim| LocatedPoint {
                    source: [0; 3],
                    label: 1,
                    query: 0,
                    start: [0; 3],
                    located: [0; 3],
                    sim,
                    kept: false,
                })
                .collect();
            let kept_lo = filter_points(&mut pts, lo);
            let kept_hi = filter_points(&mut pts, hi);
            prop_assert!(kept_hi.iter().all(|i| kept_lo.contains(i)));
            Ok(())
        },
    );
    let ok = sims.is_ok() && mono.is_ok();
    let detail = match (&sims, &mono) {
        (Ok(()), Ok(())) => "sim in [-1,1], sim(v,v)=1, scale invariance, kept(tau2) ⊆ kept(tau1): 2000 cases each".into(),
        _ => format!("{sims:?} {mono:?}"),
    };
    verdict(4, "feature-check bounds and monotonicity", ok, &detail);
}

// ---------------------------------------------------------------- 5

#[test]
fn criterion_5_label_correction_schedule_and_rule() {
    let mut s = PlcState::new(&PlcConfig::default());
    let mut worst = 0.0f64;
    for k in 0..200 {
        worst = worst.max((s.delta - (0.95 * 0.99f64.powi(k)).max(0.85)).abs());
        s = plc_update_delta(&s);
    }
    let first = plc_update_delta(&PlcState::new(&PlcConfig::default())).delta;
    let examples = [
        plc_correct(&[0.96], &[0], 0.95, true).unwrap() == (vec![1], 1),
        plc_correct(&[0.96], &[1], 0.95, true).unwrap() == (vec![1], 0),
        plc_correct(&[0.0, 1.0, 0.3, 0.99], &[1, 0, 1, 0], 1.0, true).unwrap().1 == 0,
        (first - 0.9405).abs() < 1e-12,
        (PlcState::new(&PlcConfig::default()).delta_at(11) - 0.850_571_341_5).abs() < 1e-9,
        PlcState::new(&PlcConfig::default()).delta_at(12) == 0.85,
    ];
    let mut runner = TestRunner::new(PropConfig {
        cases: 2_000,
        ..PropConfig::default()
    });
    let mono = runner.run(
        &(prop::collection::vec((0.0f64..=1.0, 0u8..=1), 1..100), 0.5f64..=1.0, 0.5f64..=1.0),
        |(data, d1, d2)| {
            let (p, l): (Vec<f64>, Vec<u8>) = data.into_iter().unzip();
            let (lo, hi) = if d1 <= d2 { (d1, d2) } else { (d2, d1) };
            let (a, _) = plc_correct(&p, &l, lo, true).unwrap();
            let (b, _) = plc_correct(&p, &l, hi, true).unwrap();
            for i in 0..l.len() {
                prop_assert!(b[i] == l[i] || a[i] != l[i], "flip at {} under {} but not {}", i, hi, lo);
            }
            Ok(())
        },
    );
    let ok = worst <= 1e-12 && examples.iter().all(|&e| e) && mono.is_ok();
    verdict(
        5,
        "label-correction schedule and rule",
        ok,
        &format!(
            "schedule max |err| {worst:.1e} over 200 epochs; examples {examples:?}; monotone flip sets: {}",
            mono.is_ok()
        ),
    );
}

// ---------------------------------------------------------------- 6, 7

fn end_to_end_config() -> ExperimentConfig {
    ExperimentConfig {
        phantom: PhantomConfig::default(),
        subjects: SubjectCounts {
            unlabeled: 8,
            validation: 0,
            test: 4,
        },
        scribble: ScribbleConfig::default(),
        prnet: PRNetConfig::default(),
        prnet_train: PrnetTrainConfig::default(),
        propagation: PropagationConfig::default(),
        seg: SegConfig::default(),
        ..ExperimentConfig::default()
    }
}

struct EndToEnd {
    out: PathBuf,
    report: MetricsReport,
    secs: f64,
}

fn end_to_end() -> &'static EndToEnd {
    static RUN: OnceLock<EndToEnd> = OnceLock::new();
    RUN.get_or_init(|| {
        let out = scratch("end_to_end");
        let t = Instant::now();
        let report = run_pipeline_in(&end_to_end_config(), &out).expect("pipeline run");
        EndToEnd {
            out,
            report,
            secs: t.elapsed().as_secs_f64(),
        }
    })
}

#[test]
fn criterion_6_end_to_end_trend() {
    let run = end_to_end();
    let m = &run.report.mean;
    let (trained, plc) = (m.trained.unwrap(), m.trained_plc.unwrap());
    let ok = m.pseudo <= trained + TREND_TOLERANCE && trained <= plc + TREND_TOLERANCE && run.secs < 1800.0;
    verdict(
        6,
        "pseudo mask <= trained <= trained+PLC",
        ok,
        &format!(
            "mean test Dice {:.4} / {trained:.4} / {plc:.4} (tolerance {TREND_TOLERANCE}); {:.0}s (limit 1800s)",
            m.pseudo, run.secs
        ),
    );
}

fn copy_dir(from: &Path, to: &Path) {
    std::fs::create_dir_all(to).unwrap();
    for e in std::fs::read_dir(from).unwrap() {
        let e = e.unwrap();
        if e.file_type().unwrap().is_dir() {
            copy_dir(&e.path(), &to.join(e.file_name()));
        } else {
            std::fs::copy(e.path(), to.join(e.file_name())).unwrap();
        }
    }
}

#[test]
fn criterion_7_threshold_trend_under_localization_noise() {
    let base = end_to_end();
    let out = scratch("tau_noise");
    copy_dir(&base.out.join("data"), &out.join("data"));
    copy_dir(&base.out.join("prnet"), &out.join("prnet"));
    let mut cfg = end_to_end_config();
    cfg.propagation.loc_noise_voxels = 3;
    cfg.sweep_taus = vec![0.0, 0.5, 0.9];
    let t = Instant::now();
    stage_propagate(&cfg, &out).unwrap();
    let rows = stage_sweep_tau(&cfg, &out).unwrap();
    let secs = t.elapsed().as_secs_f64();
    let (r0, r5, r9) = (&rows[0], &rows[1], &rows[2]);
    let ok = r5.precision >= r0.precision && r5.mean_pseudo_dice >= r9.mean_pseudo_dice && secs < 600.0;
    verdict(
        7,
        "threshold ablation trend",
        ok,
        &format!(
            "precision tau 0/0.5/0.9 = {:.3}/{:.3}/{:.3} (kept {}/{}/{}), pseudo Dice {:.4}/{:.4}/{:.4}; {secs:.0}s (limit 600s)",
            r0.precision, r5.precision, r9.precision, r0.kept, r5.kept, r9.kept,
            r0.mean_pseudo_dice, r5.mean_pseudo_dice, r9.mean_pseudo_dice
        ),
    );
}

// ---------------------------------------------------------------- 8

fn small_config() -> ExperimentConfig {
    ExperimentConfig {
        phantom: PhantomConfig {
            shape: [16, 32, 32],
            ..PhantomConfig::default()
        },
        subjects: SubjectCounts {
            unlabeled: 2,
            validation: 1,
            test: 1,
        },
        scribble: ScribbleConfig {
            points_per_class: 6,
            ..ScribbleConfig::default()
        },
        prnet: PRNetConfig {
            patch_size: [16, 16, 16],
            encoder_channels: [4, 4, 8, 8],
            decoder_channels: [8, 4, 4, 4],
            ..PRNetConfig::default()
        },
        prnet_train: PrnetTrainConfig {
            batch: 2,
            epochs: 2,
            iters_per_epoch: 2,
            ..PrnetTrainConfig::default()
        },
        seg: SegConfig {
            depth: 2,
            base_channels: 4,
            crop: [8, 16, 16],
            epochs: 3,
            crops_per_epoch: 8,
            batch: 4,
            plc: PlcConfig {
                enabled: true,
                warmup_epochs: 1,
                ..PlcConfig::default()
            },
            ..SegConfig::default()
        },
        seed: 42,
        ..ExperimentConfig::default()
    }
}

#[test]
fn criterion_8_determinism() {
    let cfg = small_config();
    let (a, b) = (scratch("determinism_a"), scratch("determinism_b"));
    run_pipeline_in(&cfg, &a).unwrap();
    run_pipeline_in(&cfg, &b).unwrap();
    let ra = std::fs::read(a.join("report.json")).unwrap();
    let rb = std::fs::read(b.join("report.json")).unwrap();
    verdict(
        8,
        "byte-identical report.json",
        ra == rb,
        &format!("two runs, {} vs {} bytes, identical: {}", ra.len(), rb.len(), ra == rb),
    );
}

// ---------------------------------------------------------------- 9

#[test]
fn criterion_9_self_supervised_learnability() {
    let pc = PhantomConfig::default();
    let (v0, l0) = generate_phantom(&pc, 0).unwrap();
    let (v1, _) = generate_phantom(&pc, 1).unwrap();
    let vols = [normalize_intensity(&v0), normalize_intensity(&v1)];
    let cfg = PRNetConfig::default();
    let tc = PrnetTrainConfig {
        epochs: 10,
        ..PrnetTrainConfig::default()
    };
    let t = Instant::now();
    let (net, logs) = train_prnet(&vols, &cfg, &tc).unwrap();
    let train_secs = t.elapsed().as_secs_f64();
    let (first, last) = (logs[0].ssl, logs.last().unwrap().ssl);

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut scribble = draw_support_scribble(&l0, 1, 12, &mut rng).unwrap();
    scribble.extend(&draw_support_scribble(&l0, 2, 12, &mut rng).unwrap());
    let prop = PropagationConfig::default();
    let res = propagate_scribbles(&net, (&vols[0], &scribble), &[&vols[0]], &prop, &mut rng).unwrap();
    let points = &res.queries[0].points;
    let hits = points
        .iter()
        .filter(|p| {
            let d2: f64 = (0..3).map(|a| (p.located[a] as f64 - p.source[a] as f64).powi(2)).sum();
            d2.sqrt() <= 4.0
        })
        .count();
    let frac = hits as f64 / points.len() as f64;
    verdict(
        9,
        "self-supervised learnability",
        last < 0.5 * first && frac >= 0.8,
        &format!(
            "L_ssl {first:.3} -> {last:.3} (need < {:.3}); {hits}/{} support points within 4 voxels ({:.0}%, need 80%); training {train_secs:.0}s",
            0.5 * first,
            points.len(),
            100.0 * frac
        ),
    );
}
