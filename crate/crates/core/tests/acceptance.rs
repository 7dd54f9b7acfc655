//! End-to-end acceptance checks. Runs as a plain binary so every criterion
//! reports its own PASS/FAIL line; exits non-zero if any fails.

use std::collections::HashMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use nalgebra::{Matrix3, Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vpl::eval::{compute_iou, UnlabeledPolicy};
use vpl::pipeline::{camera_trajectory, label_sequence, with_workers, PipelineConfig, Workspace};
use vpl::pointcloud::{align, DensePointCloud, IntensityParams, RawScan, ScanSequence};
use vpl::segmenter::{LogitModel, OracleSegmenter, Segmenter};
use vpl::synth::{default_scene, generate};
use vpl::viewgen::{render, sample_poses, PoseNoiseParams, RenderSettings, EMPTY_PIXEL};
use vpl::voting::{backproject, elect, CompoundMode, Estimator, VoteTable};
use vpl::{ClassId, Pose, UNLABELED};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn base_config(k: usize, noise: f64, seed: u64) -> PipelineConfig {
    let mut cfg = PipelineConfig::default();
    cfg.views.count = k;
    cfg.segmenter.noise_rate = noise;
    cfg.override_seed(seed);
    cfg
}

fn miou_for(seed: u64, cfg: &PipelineConfig) -> f64 {
    let seq = generate(&default_scene(seed)).unwrap();
    label_sequence(&seq, cfg).unwrap().report.unwrap().miou
}

fn noiseless_end_to_end() -> Outcome {
    let (out, seq, elapsed) = with_workers(1, || {
        let start = Instant::now();
        let seq = generate(&default_scene(0)).unwrap();
        let out = label_sequence(&seq, &base_config(50, 0.0, 0)).unwrap();
        (out, seq, start.elapsed())
    })
    .unwrap();
    let gt = out.cloud.gt.as_ref().unwrap();
    let classes: std::collections::BTreeSet<_> = gt.iter().collect();
    let voted = compute_iou(&out.labels.labels, gt, 5, UnlabeledPolicy::Exclude).unwrap();
    let exact = voted.iou_per_class.len() == 5 && voted.iou_per_class.values().all(|&v| v == 1.0);
    let estimators_agree = [Estimator::SoftSum, Estimator::SoftCompound]
        .iter()
        .all(|&e| elect(&out.table, e, CompoundMode::LogSoftmax).labels == out.labels.labels);
    let coverage = out.report.unwrap().coverage;
    ensure(
        out.cloud.len() >= 10_000
            && classes.len() == 5
            && exact
            && estimators_agree
            && coverage >= 0.90
            && elapsed < Duration::from_secs(60)
            && seq.scans.len() == 20,
        format!(
            "{} points, per-class IoU on voted points {:?}, estimators agree: {estimators_agree}, \
             crop coverage {coverage:.4} (>= 0.90), single-thread runtime {elapsed:.2?} (< 60 s)",
            out.cloud.len(),
            voted.iou_per_class.values().collect::<Vec<_>>()
        ),
    )
}

fn noise_robustness() -> Outcome {
    let scores: Vec<f64> = (0..5)
        .map(|s| miou_for(s, &base_config(100, 0.3, s)))
        .collect();
    let m = mean(&scores);
    ensure(
        m >= 0.90,
        format!("mean mIoU {m:.4} (>= 0.90) over seeds {scores:.4?}"),
    )
}

fn view_count_trend() -> Outcome {
    let ks = [2usize, 10, 50];
    let means: Vec<f64> = ks
        .iter()
        .map(|&k| {
            mean(
                &(0..5)
                    .map(|s| miou_for(s, &base_config(k, 0.3, s)))
                    .collect::<Vec<_>>(),
            )
        })
        .collect();
    ensure(
        means[0] < means[1] && means[1] < means[2] && means[0] <= 0.5 * means[2],
        format!(
            "mean mIoU K=2: {:.4}, K=10: {:.4}, K=50: {:.4}",
            means[0], means[1], means[2]
        ),
    )
}

fn estimator_comparison() -> Outcome {
    let mut hard = Vec::new();
    let mut soft = Vec::new();
    let mut raw = Vec::new();
    for seed in 0..10 {
        let seq = generate(&default_scene(seed)).unwrap();
        let mut cfg = base_config(20, 0.3, seed);
        cfg.segmenter.logits = LogitModel::Calibrated;
        cfg.segmenter.margin = 1.0;
        let out = label_sequence(&seq, &cfg).unwrap();
        let gt = out.cloud.gt.as_ref().unwrap();
        let score = |e, mode| {
            let labels = elect(&out.table, e, mode);
            vpl::eval::evaluate(
                &out.cloud.positions,
                &labels.labels,
                gt,
                &seq.poses,
                5,
                &cfg.eval,
            )
            .unwrap()
            .miou
        };
        hard.push(score(Estimator::HardSum, CompoundMode::LogSoftmax));
        soft.push(score(Estimator::SoftSum, CompoundMode::LogSoftmax));
        raw.push(score(Estimator::SoftCompound, CompoundMode::RawProduct));
    }
    let (h, s, r) = (mean(&hard), mean(&soft), mean(&raw));
    ensure(
        s >= h && r <= s,
        format!("mean mIoU hard_sum {h:.4}, soft_sum {s:.4}, raw-product compound {r:.4}"),
    )
}

fn brute_force_iou(pred: &[ClassId], gt: &[ClassId], c: usize) -> Vec<Option<f64>> {
    // rows: gt, cols: pred, last column = unlabeled
    let mut m = vec![vec![0u64; c + 1]; c];
    for (&p, &g) in pred.iter().zip(gt) {
        if g == UNLABELED {
            continue;
        }
        let col = if p == UNLABELED { c } else { p as usize };
        m[g as usize][col] += 1;
    }
    (0..c)
        .map(|k| {
            let row: u64 = m[k].iter().sum();
            if row == 0 {
                return None;
            }
            let tp = m[k][k];
            let col: u64 = (0..c).map(|g| m[g][k]).sum();
            Some(tp as f64 / (row + col - tp) as f64)
        })
        .collect()
}

fn random_cloud(rng: &mut impl Rng, n: usize, classes: usize) -> DensePointCloud {
    let positions: Vec<Vector3<f64>> = (0..n)
        .map(|_| {
            Vector3::new(
                rng.random_range(-15.0..15.0),
                rng.random_range(-8.0..8.0),
                rng.random_range(-3.0..35.0),
            )
        })
        .collect();
    DensePointCloud {
        intensity: (0..n).map(|_| rng.random()).collect(),
        source_scan: vec![0; n],
        gt: Some(
            (0..n)
                .map(|_| rng.random_range(0..classes as ClassId))
                .collect(),
        ),
        intensity_range: (0.0, 1.0),
        class_names: (0..classes).map(|c| format!("c{c}")).collect(),
        positions,
    }
}

fn small_settings(rng: &mut impl Rng) -> RenderSettings {
    let mut s = RenderSettings::default();
    s.intrinsics.width = 96;
    s.intrinsics.height = 64;
    s.intrinsics.focal = 48.0;
    s.intrinsics.cx = 48.0;
    s.intrinsics.cy = 32.0;
    s.splat_radius = rng.random_range(0..3);
    s
}

fn random_pose(rng: &mut impl Rng) -> Pose {
    let r = Rotation3::from_euler_angles(
        rng.random_range(-0.3..0.3),
        rng.random_range(-0.3..0.3),
        rng.random_range(-0.3..0.3),
    );
    Pose::new(
        *r.matrix(),
        Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        ),
    )
    .unwrap()
}

fn oracle_equivalences() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);

    for instance in 0..100 {
        let n = if instance == 0 {
            1_000_000
        } else {
            rng.random_range(1..100_000)
        };
        let c = rng.random_range(1..8usize);
        let draw = |rng: &mut ChaCha8Rng| {
            if rng.random_bool(0.05) {
                UNLABELED
            } else {
                rng.random_range(0..c as ClassId)
            }
        };
        let pred: Vec<ClassId> = (0..n).map(|_| draw(&mut rng)).collect();
        let gt: Vec<ClassId> = (0..n).map(|_| draw(&mut rng)).collect();
        let report = compute_iou(&pred, &gt, c, UnlabeledPolicy::CountAsWrong).unwrap();
        for (k, want) in brute_force_iou(&pred, &gt, c).into_iter().enumerate() {
            if report.iou_per_class.get(&(k as ClassId)).copied() != want {
                return Err(format!("IoU mismatch on instance {instance}, class {k}"));
            }
        }
    }

    for scene in 0..20 {
        let n = rng.random_range(100..10_000);
        let c = rng.random_range(2..6);
        let cloud = random_cloud(&mut rng, n, c);
        let settings = small_settings(&mut rng);
        let oracle = OracleSegmenter::new(
            cloud.gt.as_deref(),
            vpl::segmenter::OracleParams {
                noise_rate: 0.4,
                seed: scene,
                ..Default::default()
            },
        )
        .unwrap();
        let mut table = VoteTable::new(n, c);
        let mut recount: HashMap<u32, Vec<u32>> = HashMap::new();
        for v in 0..rng.random_range(1..=20) {
            let view = render(&cloud, &random_pose(&mut rng), v, &settings).unwrap();
            let seg = oracle.segment(&view, c).unwrap();
            table
                .accumulate(&backproject(&view, &seg, false).unwrap())
                .unwrap();
            for (px, point) in view.occupied() {
                recount.entry(point).or_insert_with(|| vec![0; c])[seg.labels[px] as usize] += 1;
            }
        }
        let labels = elect(&table, Estimator::HardSum, CompoundMode::LogSoftmax).labels;
        for (i, &label) in labels.iter().enumerate() {
            let want = match recount.get(&(i as u32)) {
                None => UNLABELED,
                Some(counts) => {
                    let best = *counts.iter().max().unwrap();
                    counts.iter().position(|&x| x == best).unwrap() as ClassId
                }
            };
            if label != want {
                return Err(format!("hard_sum mismatch in scene {scene}, point {i}"));
            }
        }
    }

    let mut pixels_checked = 0usize;
    for trial in 0..10 {
        let n = rng.random_range(10..=10_000);
        let cloud = random_cloud(&mut rng, n, 3);
        let settings = small_settings(&mut rng);
        let pose = random_pose(&mut rng);
        let view = render(&cloud, &pose, trial, &settings).unwrap();
        let intr = &settings.intrinsics;
        let r = i64::from(settings.splat_radius);
        let mut best: Vec<Option<(f64, u32)>> = vec![None; view.num_pixels()];
        for (i, p) in cloud.positions.iter().enumerate() {
            let pc = pose.apply_inverse(p);
            if pc.z < settings.d_min || pc.z > settings.d_max {
                continue;
            }
            let Some((col, row)) = intr.project(&pc).and_then(|(u, v)| intr.pixel_of(u, v)) else {
                continue;
            };
            for y in i64::from(row) - r..=i64::from(row) + r {
                for x in i64::from(col) - r..=i64::from(col) + r {
                    if x < 0 || y < 0 || x >= i64::from(intr.width) || y >= i64::from(intr.height) {
                        continue;
                    }
                    let px = (y * i64::from(intr.width) + x) as usize;
                    // nearest wins; ties go to the lower index, which comes first
                    if best[px].is_none_or(|(d, _)| pc.z < d) {
                        best[px] = Some((pc.z, i as u32));
                    }
                }
            }
        }
        for (px, b) in best.iter().enumerate() {
            let want = b.map_or(EMPTY_PIXEL, |(_, i)| i);
            if view.point_index[px] != want {
                return Err(format!("z-buffer mismatch at pixel {px} of trial {trial}"));
            }
            pixels_checked += 1;
        }
    }
    Ok(format!(
        "100 IoU instances (largest 10^6 points), 20 hard_sum recounts, {pixels_checked} z-buffer pixels all match"
    ))
}

fn geometry_properties() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let settings = RenderSettings::default();
    let intr = settings.intrinsics;
    let bound = |depth: f64| (f64::from(settings.splat_radius) + 1.0) * depth / intr.focal + 1e-4;

    // Each point's own pixel, unprojected at its depth.
    let pose = random_pose(&mut rng);
    let mut worst_center = 0.0f64;
    let mut centre_violations = 0;
    let mut positions = Vec::new();
    while positions.len() < 10_000 {
        let z = rng.random_range(settings.d_min..settings.d_max);
        let u = rng.random_range(0.0..f64::from(intr.width));
        let v = rng.random_range(0.0..f64::from(intr.height));
        let world = pose.apply(&intr.unproject(u, v, z));
        let pc = pose.apply_inverse(&world);
        let Some((col, row)) = intr.project(&pc).and_then(|(u, v)| intr.pixel_of(u, v)) else {
            continue;
        };
        let back = pose.apply(&intr.unproject(f64::from(col) + 0.5, f64::from(row) + 0.5, pc.z));
        let err = (back - world).norm();
        worst_center = worst_center.max(err / bound(pc.z));
        centre_violations += usize::from(err > bound(pc.z));
        positions.push(world);
    }

    // Every occupied pixel of a render, against the point that won it, per camera axis.
    let n = positions.len();
    let cloud = DensePointCloud {
        intensity: vec![0.5; n],
        source_scan: vec![0; n],
        gt: None,
        intensity_range: (0.0, 1.0),
        class_names: vec!["x".into()],
        positions,
    };
    let view = render(&cloud, &pose, 0, &settings).unwrap();
    let mut splat_violations = 0;
    let mut splat_pixels = 0;
    for (px, point) in view.occupied() {
        let (col, row) = (px % intr.width as usize, px / intr.width as usize);
        let depth = view.depth[px];
        let back = intr.unproject(col as f64 + 0.5, row as f64 + 0.5, depth);
        let truth = pose.apply_inverse(&cloud.positions[point as usize]);
        let axis_err = (back - truth).abs().max();
        splat_violations += usize::from(axis_err > bound(depth));
        splat_pixels += 1;
    }

    // Depth window on every vote of a full pipeline run.
    let seq = generate(&default_scene(1)).unwrap();
    let cfg = base_config(30, 0.0, 1);
    let dense = align(&seq, &cfg.intensity.params()).unwrap();
    let render_settings = cfg.camera.render_settings();
    let poses = sample_poses(&camera_trajectory(&seq.poses), &cfg.views).unwrap();
    let oracle = OracleSegmenter::new(dense.gt.as_deref(), cfg.segmenter.oracle_params()).unwrap();
    let mut depth_violations = 0;
    let mut votes = 0;
    for (k, p) in poses.iter().enumerate() {
        let view = render(&dense, p, k, &render_settings).unwrap();
        let contributions = backproject(&view, &oracle.segment(&view, 5).unwrap(), false).unwrap();
        for &point in &contributions.points {
            let z = p.apply_inverse(&dense.positions[point as usize]).z;
            depth_violations +=
                usize::from(!(render_settings.d_min..=render_settings.d_max).contains(&z));
            votes += 1;
        }
    }

    // Rigid alignment preserves pairwise distances.
    let mut scans = Vec::new();
    let mut scan_poses = Vec::new();
    for s in 0..4 {
        let pts: Vec<Vector3<f64>> = (0..2_500)
            .map(|_| {
                Vector3::new(
                    rng.random_range(-50.0..50.0),
                    rng.random_range(-50.0..50.0),
                    rng.random_range(-5.0..5.0),
                )
            })
            .collect();
        scans.push(RawScan::new(s, pts, vec![0.5; 2_500], None).unwrap());
        let yaw = Matrix3::from(Rotation3::from_euler_angles(
            0.01 * s as f64,
            0.02,
            rng.random_range(-3.0..3.0),
        ));
        scan_poses.push(
            Pose::new(
                yaw,
                Vector3::new(
                    rng.random_range(-100.0..100.0),
                    rng.random_range(-100.0..100.0),
                    1.0,
                ),
            )
            .unwrap(),
        );
    }
    let seq = ScanSequence::new(scans, scan_poses, vec!["x".into()]).unwrap();
    let aligned = align(&seq, &IntensityParams::default()).unwrap();
    let mut worst_rigid = 0.0f64;
    for _ in 0..10_000 {
        let s = rng.random_range(0..4usize);
        let (a, b) = (rng.random_range(0..2_500), rng.random_range(0..2_500));
        let raw = (seq.scans[s].positions[a] - seq.scans[s].positions[b]).norm();
        let moved = (aligned.positions[s * 2_500 + a] - aligned.positions[s * 2_500 + b]).norm();
        worst_rigid = worst_rigid.max((raw - moved).abs());
    }

    ensure(
        centre_violations == 0 && splat_violations == 0 && depth_violations == 0 && worst_rigid < 1e-6,
        format!(
            "round-trip: 10^4 points, worst error {worst_center:.3} of bound, {splat_pixels} splat pixels, \
             {} violations; {votes} votes, {depth_violations} outside depth window; worst rigid drift {worst_rigid:.2e} m",
            centre_violations + splat_violations
        ),
    )
}

fn determinism() -> Outcome {
    let root = tempfile::tempdir().unwrap();
    let data = root.path().join("data");
    vpl::io::write_sequence(&generate(&default_scene(4)).unwrap(), &data).unwrap();
    let run = |name: &str, workers: usize| -> Vec<Vec<u8>> {
        let mut cfg = base_config(24, 0.3, 9);
        cfg.segmenter.logits = LogitModel::Calibrated;
        cfg.segmenter.margin = 2.0;
        cfg.paths.scans = data.join("scans");
        cfg.paths.poses = data.join("poses.txt");
        cfg.paths.labels = Some(data.join("labels"));
        cfg.paths.work_dir = root.path().join(name);
        cfg.run.workers = workers;
        cfg.run.chunk_size = 5;
        let mut ws = Workspace::new(cfg, false).unwrap();
        Estimator::ALL
            .iter()
            .map(|&e| std::fs::read(ws.vote(e).unwrap().labels_path).unwrap())
            .collect()
    };
    let a = run("a", 1);
    let b = run("b", 1);
    let c = run("c", 4);
    let d = run("d", 3);
    ensure(
        a == b && a == c && a == d,
        format!(
            "{} estimators x {} bytes identical across 2 single-worker runs and 3/4-worker runs",
            a.len(),
            a[0].len()
        ),
    )
}

fn degenerate_sampling() -> Outcome {
    let trajectory: Vec<Pose> = (0..25)
        .map(|i| {
            let a = 0.13 * f64::from(i);
            let r = Matrix3::from(Rotation3::from_euler_angles(0.02 * a, -0.01 * a, a));
            Pose::new(r, Vector3::new(10.0 * a.cos(), 10.0 * a.sin(), 0.1 * a)).unwrap()
        })
        .collect();
    let cameras = camera_trajectory(&trajectory);
    let params = PoseNoiseParams {
        theta_deg: 0.0,
        lambda: 0.0,
        gamma: 0.0,
        count: 1_000,
        seed: 3,
    };
    let sampled = sample_poses(&cameras, &params).unwrap();
    let members = sampled.iter().filter(|p| cameras.contains(p)).count();
    ensure(
        sampled.len() == 1_000 && members == 1_000,
        format!("{members}/1000 samples are exact trajectory members"),
    )
}

fn main() {
    let criteria: [Criterion; 8] = [
        ("1 noiseless end-to-end", noiseless_end_to_end),
        ("2 noise robustness", noise_robustness),
        ("3 view-count trend", view_count_trend),
        ("4 estimator comparison", estimator_comparison),
        ("5 oracle equivalences", oracle_equivalences),
        ("6 geometry properties", geometry_properties),
        ("7 determinism", determinism),
        ("8 degenerate pose sampling", degenerate_sampling),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS criterion {name} ({secs:.1} s): {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL criterion {name} ({secs:.1} s): {detail}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", 8 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
