//! Acceptance suite. Prints one line per criterion and fails if any check
//! fails. The training criteria (6, 7 and 8) take hours on a desktop CPU and
//! only run when `FISHBEV_ACCEPTANCE_TRAINING=1`; otherwise they are reported
//! as skipped.

use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use fishbev::augment::{apply_bev_augment, transform_labels, AugmentationConfig, BevTransform, SampledAugment};
use fishbev::camera::{CameraCalibration, CameraIntrinsics, CameraRig};
use fishbev::eval::{evaluate, MatchConfig, MetricsReport};
use fishbev::heads::{encode_detection, encode_segmentation, DecodeConfig};
use fishbev::losses::{compute_losses, total_loss, FocalConfig, LossReport, LossTerm, LossWeights};
use fishbev::network::{CameraView, ModelConfig};
use fishbev::pipeline::{
    cmd_eval, cmd_generate, cmd_train, read_log, run_bench, AugmentationSetting, Frame, RunConfig, Session, TRAIN_LOG,
};
use fishbev::polygon::{giou, transform_corners, ConvexQuad};
use fishbev::synth::{derive_labels, generate_scene, render_rig, sample_rng, Palette, SceneSpec};
use fishbev::tensor::{Graph, ParamId, Tensor};
use fishbev::types::{BevGridSpec, PolygonDetection, PolygonLabel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn frame(cfg: &ModelConfig, rig: &CameraRig, seed: u64) -> Frame {
    let world = generate_scene(&SceneSpec::default(), &mut sample_rng(seed, 0)).unwrap();
    let labels = derive_labels(&world, rig, &cfg.bev);
    let images = render_rig(&world.in_vehicle_frame(), rig, &Palette::default());
    Frame { id: 0, images, labels }
}

fn random_intrinsics(rng: &mut ChaCha8Rng) -> CameraIntrinsics {
    loop {
        let c = [
            rng.gen_range(200.0..420.0),
            rng.gen_range(-30.0..30.0),
            rng.gen_range(-20.0..20.0),
            rng.gen_range(-4.0..4.0),
        ];
        let pp = [rng.gen_range(620.0..660.0), rng.gen_range(460.0..500.0)];
        let alpha_max = rng.gen_range(80f64..100.0).to_radians();
        if let Ok(i) = CameraIntrinsics::new(c, pp, [1280, 960], alpha_max) {
            return i;
        }
    }
}

fn geometry_round_trip() -> Outcome {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let rig = CameraRig::synthetic_default();
    let (mut worst_px, mut worst_res, mut min_valid) = (0f64, 0f64, usize::MAX);
    for _ in 0..20 {
        let intr = random_intrinsics(&mut rng);
        for base in &rig.cameras {
            let cam = CameraCalibration {
                intrinsics: intr.clone(),
                ..base.clone()
            };
            let mut valid = 0;
            while valid < 10_000 {
                let px = [rng.gen_range(0.0..1280.0), rng.gen_range(0.0..960.0)];
                let Ok(ray) = cam.unproject_pixel(px) else { continue };
                let back = cam.project_ray(&ray).unwrap().expect("ray from a pixel projects");
                worst_px = worst_px.max((back[0] - px[0]).abs()).max((back[1] - px[1]).abs());
                valid += 1;
            }
            min_valid = min_valid.min(valid);
        }
        for _ in 0..1000 {
            let r = rng.gen_range(0.0..intr.max_radius());
            let a = intr.peft_inverse(r).unwrap();
            worst_res = worst_res.max((intr.peft_forward(a).unwrap() - r).abs());
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    check(
        worst_px <= 1e-6 && worst_res <= 1e-9 && secs < 10.0,
        format!("max pixel error {worst_px:.2e}, max inverse residual {worst_res:.2e}, {min_valid} pixels per camera, {secs:.1} s"),
    )
}

/// Totals of one frame through the tiny network, forward only: without and
/// with the GIoU term.
fn tiny_losses(session: &Session<f64>, f: &Frame) -> [f64; 2] {
    let cfg = &session.model.config;
    let inputs = session.inputs(f);
    let views: Vec<_> = inputs
        .iter()
        .zip(session.encodings())
        .map(|(image, encodings)| CameraView { image, encodings })
        .collect();
    let mut g = Graph::new();
    let out = session.model.forward(&mut g, &session.store, &views).unwrap();
    let det_t = encode_detection(&f.labels, &cfg.bev);
    let seg_t = encode_segmentation(&f.labels, &cfg.bev, cfg.seg_scale());
    let terms = compute_losses(&mut g, out.seg, out.det, &seg_t, &det_t, &cfg.bev, cfg.max_offset, FocalConfig::default()).unwrap();
    let report = total_loss(&mut g, &terms, &LossWeights::default()).unwrap().1;
    [report.total - report.weighted(LossTerm::PolygonGiou), report.total]
}

/// Fourth-order central differences of both totals. The step shrinks by
/// decades until two consecutive estimates agree, which keeps rounding
/// noise low on flat parameters without losing strongly curved ones.
fn central_difference(session: &mut Session<f64>, f: &Frame, id: ParamId, k: usize) -> [f64; 2] {
    let x0 = session.store.get(id).value.data()[k];
    let mut at = |dx: f64| {
        session.store.get_mut(id).value.data_mut()[k] = x0 + dx;
        tiny_losses(session, f)
    };
    let mut estimates: Vec<[f64; 2]> = Vec::new();
    let mut best = ([0.0; 2], f64::INFINITY);
    for h in [1e-2, 1e-3, 1e-4, 1e-5] {
        let (m2, m1, p1, p2) = (at(-2.0 * h), at(-h), at(h), at(2.0 * h));
        let d: [f64; 2] = std::array::from_fn(|i| (m2[i] - 8.0 * m1[i] + 8.0 * p1[i] - p2[i]) / (12.0 * h));
        if let Some(prev) = estimates.last() {
            let gap = (0..2)
                .map(|i| (d[i] - prev[i]).abs() / d[i].abs().max(1e-8))
                .fold(0.0, f64::max);
            if gap < best.1 {
                best = (d, gap);
            }
            if gap < 1e-7 {
                break;
            }
        }
        estimates.push(d);
    }
    at(0.0);
    best.0
}

fn gradient_fidelity() -> Outcome {
    let t0 = Instant::now();
    let rig = CameraRig::synthetic_default();
    let cfg = ModelConfig::tiny();
    let f = frame(&cfg, &rig, 3);
    let mut session = Session::<f64>::new(&cfg, rig, 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let ids: Vec<ParamId> = session.store.ids().collect();
    let sizes: Vec<usize> = ids.iter().map(|&id| session.store.get(id).value.len()).collect();
    let total: usize = sizes.iter().sum();
    let picks: Vec<(usize, usize)> = (0..200)
        .map(|_| {
            let mut k = rng.gen_range(0..total);
            let mut p = 0;
            while k >= sizes[p] {
                k -= sizes[p];
                p += 1;
            }
            (p, k)
        })
        .collect();
    let no_giou = LossWeights {
        polygon_giou: 0.0,
        ..LossWeights::default()
    };
    let grads: Vec<_> = [no_giou, LossWeights::default()]
        .iter()
        .map(|w| {
            session
                .sample_gradients(&f, &SampledAugment::identity(4), w, FocalConfig::default())
                .unwrap()
                .1
        })
        .collect();
    let mut worst = [0f64; 2];
    for &(p, k) in &picks {
        let id = ids[p];
        let fd = central_difference(&mut session, &f, id, k);
        for i in 0..2 {
            let analytic = grads[i][id.index()].as_ref().map_or(0.0, |g| g[k]);
            let rel = (analytic - fd[i]).abs() / analytic.abs().max(fd[i].abs()).max(1e-8);
            worst[i] = worst[i].max(rel);
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    check(
        worst[0] <= 1e-5 && worst[1] <= 1e-3 && secs < 300.0,
        format!(
            "200 parameters, max rel err {:.2e} without GIoU, {:.2e} with GIoU, {secs:.1} s",
            worst[0], worst[1]
        ),
    )
}

fn random_convex(rng: &mut ChaCha8Rng, center: [f64; 2]) -> ConvexQuad {
    loop {
        let mut angles: Vec<f64> = (0..4).map(|_| rng.gen_range(0.0..std::f64::consts::TAU)).collect();
        angles.sort_by(f64::total_cmp);
        let pts: Vec<[f64; 2]> = angles
            .iter()
            .map(|a| {
                let r = rng.gen_range(0.6..1.6);
                [center[0] + r * a.cos(), center[1] + r * a.sin()]
            })
            .collect();
        let q = [pts[0], pts[1], pts[2], pts[3]];
        if is_convex(&q) && shoelace(&q).abs() > 0.2 {
            return ConvexQuad::new(q);
        }
    }
}

fn cross(o: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

fn is_convex(q: &[[f64; 2]]) -> bool {
    let n = q.len();
    let s: Vec<f64> = (0..n).map(|i| cross(q[i], q[(i + 1) % n], q[(i + 2) % n])).collect();
    s.iter().all(|&c| c > 1e-6) || s.iter().all(|&c| c < -1e-6)
}

fn shoelace(q: &[[f64; 2]]) -> f64 {
    (0..q.len())
        .map(|i| {
            let (a, b) = (q[i], q[(i + 1) % q.len()]);
            a[0] * b[1] - a[1] * b[0]
        })
        .sum::<f64>()
        / 2.0
}

/// Monotone-chain hull, counter-clockwise.
fn hull(points: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut p = points.to_vec();
    p.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
    let mut h: Vec<[f64; 2]> = Vec::new();
    for pass in 0..2 {
        let start = h.len();
        for &x in &p {
            while h.len() >= start + 2 && cross(h[h.len() - 2], h[h.len() - 1], x) <= 0.0 {
                h.pop();
            }
            h.push(x);
        }
        h.pop();
        if pass == 0 {
            p.reverse();
        }
    }
    h
}

fn inside(poly: &[[f64; 2]], p: [f64; 2]) -> bool {
    let n = poly.len();
    let s: Vec<f64> = (0..n).map(|i| cross(poly[i], poly[(i + 1) % n], p)).collect();
    s.iter().all(|&c| c >= 0.0) || s.iter().all(|&c| c <= 0.0)
}

/// GIoU by counting pixel centers on an `n`×`n` raster over the pair's hull box.
fn raster_giou(a: &[[f64; 2]; 4], b: &[[f64; 2]; 4], n: usize) -> f64 {
    let all: Vec<[f64; 2]> = a.iter().chain(b).copied().collect();
    let h = hull(&all);
    let (x0, x1) = all.iter().fold((f64::MAX, f64::MIN), |(l, u), p| (l.min(p[0]), u.max(p[0])));
    let (y0, y1) = all.iter().fold((f64::MAX, f64::MIN), |(l, u), p| (l.min(p[1]), u.max(p[1])));
    let (dx, dy) = ((x1 - x0) / n as f64, (y1 - y0) / n as f64);
    let (mut inter, mut uni, mut hul) = (0u64, 0u64, 0u64);
    for j in 0..n {
        let y = y0 + (j as f64 + 0.5) * dy;
        for i in 0..n {
            let p = [x0 + (i as f64 + 0.5) * dx, y];
            let (ia, ib) = (inside(a, p), inside(b, p));
            inter += (ia && ib) as u64;
            uni += (ia || ib) as u64;
            hul += inside(&h, p) as u64;
        }
    }
    let (i, u, c) = (inter as f64, uni as f64, hul as f64);
    i / u - (c - u) / c
}

fn giou_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut worst = 0f64;
    for _ in 0..100 {
        let a = random_convex(&mut rng, [0.0, 0.0]);
        let offset = [rng.gen_range(-1.5..1.5), rng.gen_range(-1.5..1.5)];
        let b = random_convex(&mut rng, offset);
        let exact = giou(&a, &b).giou;
        worst = worst.max((exact - raster_giou(a.vertices(), b.vertices(), 2000)).abs());
    }
    let unit = |x: f64| ConvexQuad::new([[x, 0.0], [x + 1.0, 0.0], [x + 1.0, 1.0], [x, 1.0]]);
    let same = (giou(&unit(0.0), &unit(0.0)).giou - 1.0).abs();
    let offset = (giou(&unit(0.0), &unit(0.5)).giou - 1.0 / 3.0).abs();
    check(
        worst <= 2e-3 && same <= 1e-12 && offset <= 1e-12,
        format!("max raster deviation {worst:.2e} over 100 pairs, identical {same:.1e}, offset squares {offset:.1e}"),
    )
}

fn loss_arithmetic() -> Outcome {
    let unit = LossReport::from_values([1.0; 7], &LossWeights::default()).unwrap().total;
    let rig = CameraRig::synthetic_default();
    let cfg = ModelConfig::tiny();
    let f = frame(&cfg, &rig, 4);
    let session = Session::<f64>::new(&cfg, rig, 2).unwrap();
    let inputs = session.inputs(&f);
    let views: Vec<_> = inputs
        .iter()
        .zip(session.encodings())
        .map(|(image, encodings)| CameraView { image, encodings })
        .collect();
    let mut g = Graph::new();
    let out = session.model.forward(&mut g, &session.store, &views).unwrap();
    let grid = cfg.bev;
    let det_t = encode_detection(&f.labels, &grid);
    let seg_t = encode_segmentation(&f.labels, &grid, cfg.seg_scale());
    let terms = compute_losses(&mut g, out.seg, out.det, &seg_t, &det_t, &grid, cfg.max_offset, FocalConfig::default()).unwrap();
    let (total, report) = total_loss(&mut g, &terms, &LossWeights::default()).unwrap();
    let sum: f64 = report.terms.iter().map(|t| t.weighted).sum();
    let gap = (g.value(total).item() - sum).abs().max((report.total - sum).abs());
    check(
        unit == 1.95925 && gap <= 1e-9,
        format!("unit terms total {unit}, decomposition gap {gap:.1e}"),
    )
}

fn relabel(x: &PolygonLabel, yaw: f64, flip: bool, t: [f64; 2]) -> PolygonLabel {
    let v = x.visibility;
    PolygonLabel {
        corners: transform_corners(&x.corners, yaw, flip, t),
        visibility: if flip { [v[1], v[0], v[3], v[2]] } else { v },
        ..x.clone()
    }
}

fn redetect(x: &PolygonDetection, yaw: f64, flip: bool, t: [f64; 2]) -> PolygonDetection {
    let v = x.visibility;
    PolygonDetection {
        corners: transform_corners(&x.corners, yaw, flip, t),
        visibility: if flip { [v[1], v[0], v[3], v[2]] } else { v },
        ..x.clone()
    }
}

fn same_metrics(a: &MetricsReport, b: &MetricsReport) -> f64 {
    let opt = |x: Option<f64>, y: Option<f64>| match (x, y) {
        (Some(x), Some(y)) => (x - y).abs(),
        (None, None) => 0.0,
        _ => f64::INFINITY,
    };
    let counts = if a.overall.counts == b.overall.counts { 0.0 } else { f64::INFINITY };
    counts
        .max((a.overall.f1 - b.overall.f1).abs())
        .max(opt(a.distance_error_cm, b.distance_error_cm))
        .max(opt(a.visibility_accuracy, b.visibility_accuracy))
}

fn augmentation_soundness() -> Outcome {
    let rig = CameraRig::synthetic_default();
    let grid = BevGridSpec::default();
    let flip = BevTransform { flip: true, yaw: 0.0 };
    let mut flips_exact = true;
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let mut worst = 0f64;
    for s in 0..20 {
        let world = generate_scene(&SceneSpec::default(), &mut sample_rng(77, s)).unwrap();
        let labels = derive_labels(&world, &rig, &grid);
        let twice = transform_labels(&transform_labels(&labels, &flip, &grid), &flip, &grid);
        flips_exact &= twice == labels;

        let preds: Vec<PolygonDetection> = labels
            .iter()
            .enumerate()
            .map(|(i, l)| {
                let mut c = l.corners;
                for p in &mut c {
                    p[0] += rng.gen_range(-0.3..0.3);
                    p[1] += rng.gen_range(-0.3..0.3);
                }
                PolygonDetection {
                    class: l.class,
                    confidence: rng.gen_range(0.05..1.0),
                    corners: c,
                    visibility: std::array::from_fn(|_| rng.gen_range(0.0..1.0)),
                    id: i,
                }
            })
            .collect();
        let base = evaluate(&[(preds.clone(), labels.clone())], &MatchConfig::default());
        let (yaw, fl, t) = (rng.gen_range(-3.1..3.1), rng.gen_bool(0.5), [rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0)]);
        let moved = evaluate(
            &[(
                preds.iter().map(|p| redetect(p, yaw, fl, t)).collect(),
                labels.iter().map(|l| relabel(l, yaw, fl, t)).collect(),
            )],
            &MatchConfig::default(),
        );
        worst = worst.max(same_metrics(&base, &moved));
    }

    let cfg = AugmentationConfig {
        p_flip: 0.0,
        p_yaw: 0.0,
        ..AugmentationConfig::preset("full").unwrap()
    };
    let tiny = BevGridSpec {
        rows: 1,
        cols: 1,
        channels: 32,
        ..grid
    };
    let draws = 10_000;
    let mut total = 0.0;
    for _ in 0..draws {
        let aug = cfg.sample(&mut rng, 0, tiny.channels);
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::full(&[1, 1, tiny.channels], 1.0));
        let y = apply_bev_augment(&mut g, x, &tiny, &aug).unwrap();
        total += g.data(y).iter().sum::<f64>() / tiny.channels as f64;
    }
    let mean = total / draws as f64;
    check(
        flips_exact && worst <= 1e-9 && (mean - 1.0).abs() <= 0.01,
        format!(
            "double flip exact: {flips_exact}, rigid metric deviation {worst:.1e}, dropout mean magnitude {mean:.4} over {draws} draws (p = {})",
            cfg.p_feature_dropout
        ),
    )
}

fn throughput_harness() -> Outcome {
    let rig = CameraRig::synthetic_default();
    let cfg = ModelConfig::desk();
    let f = frame(&cfg, &rig, 8);
    let session = Session::<f32>::new(&cfg, rig, 0).unwrap();
    let r = run_bench(&session, &f, &DecodeConfig::default(), 2, 10).map_err(|e| e.to_string())?;
    let zero_rejected = run_bench(&session, &f, &DecodeConfig::default(), 0, 0).is_err();
    check(
        r.accounting_error <= 0.05 && r.stage_sum_ms <= r.total.mean_ms * 1.05 && zero_rejected,
        format!(
            "{:.2} fps, stage sum {:.2} ms vs total {:.2} ms ({:.2}% accounting error)",
            r.fps,
            r.stage_sum_ms,
            r.total.mean_ms,
            100.0 * r.accounting_error
        ),
    )
}

/// The overfit preset rooted in `dir`, optionally with a different step count.
fn training_config(dir: &Path, train: usize, steps: Option<u64>, augmentation: &str) -> RunConfig {
    let text = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/overfit.json")).unwrap();
    let mut cfg = RunConfig::from_json_str(&text, &[]).unwrap();
    cfg.paths.dataset = dir.join("data");
    cfg.paths.checkpoints = dir.join(format!("ckpt_{augmentation}"));
    cfg.paths.reports = dir.join(format!("reports_{augmentation}"));
    cfg.dataset.train = train;
    cfg.dataset.val = 64;
    if let Some(steps) = steps {
        cfg.train.steps = steps;
    }
    cfg.augmentation = AugmentationSetting::Preset(augmentation.into());
    cfg.validate().unwrap();
    cfg
}

fn train_and_eval(cfg: &RunConfig, splits: &[&str]) -> Result<Vec<MetricsReport>, String> {
    cmd_train(cfg).map_err(|e| e.to_string())?;
    splits
        .iter()
        .map(|s| {
            let mut c = cfg.clone();
            c.eval.split = s.to_string();
            cmd_eval(&c, None).map(|o| o.metrics).map_err(|e| e.to_string())
        })
        .collect()
}

struct OverfitRun {
    train: MetricsReport,
    val: MetricsReport,
    secs: f64,
    /// Mean loss of the last 100 logged steps over the mean of the first 10.
    loss_ratio: f64,
}

fn overfit_run() -> Result<OverfitRun, String> {
    let t0 = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let cfg = training_config(dir.path(), 32, None, "full");
    cmd_generate(&cfg).map_err(|e| e.to_string())?;
    let m = train_and_eval(&cfg, &["train", "val"])?;
    let secs = t0.elapsed().as_secs_f64();
    let log = read_log(&cfg.paths.reports.join(TRAIN_LOG)).map_err(|e| e.to_string())?;
    let mean = |s: &[fishbev::pipeline::StepLog]| s.iter().map(|l| l.loss).sum::<f64>() / s.len() as f64;
    let loss_ratio = mean(&log[log.len().saturating_sub(100)..]) / mean(&log[..10.min(log.len())]);
    Ok(OverfitRun {
        train: m[0].clone(),
        val: m[1].clone(),
        secs,
        loss_ratio,
    })
}

fn end_to_end(run: &Result<OverfitRun, String>) -> Outcome {
    let r = run.as_ref().map_err(|e| e.clone())?;
    let dist = r.train.distance_error_cm.unwrap_or(f64::INFINITY);
    check(
        r.train.overall.f1 >= 0.9 && dist <= 25.0 && r.val.overall.f1 >= 0.6 && r.secs <= 7200.0,
        format!(
            "train F1 {:.3}, distance {dist:.1} cm, held-out F1 {:.3}, {:.0} min (final/initial loss {:.3})",
            r.train.overall.f1,
            r.val.overall.f1,
            r.secs / 60.0,
            r.loss_ratio
        ),
    )
}

fn visibility(run: &Result<OverfitRun, String>) -> Outcome {
    let r = run.as_ref().map_err(|e| e.clone())?;
    let acc = r.train.visibility_accuracy.unwrap_or(0.0);
    check(acc >= 0.9, format!("visibility accuracy {acc:.3} on the overfit set"))
}

fn ablation_direction() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let steps = std::env::var("FISHBEV_ABLATION_STEPS")
        .ok()
        .and_then(|s| s.parse().ok())
        .unwrap_or(2000);
    let none = training_config(dir.path(), 256, Some(steps), "none");
    cmd_generate(&none).map_err(|e| e.to_string())?;
    let flip_yaw = training_config(dir.path(), 256, Some(steps), "flip_yaw");
    let a = train_and_eval(&none, &["val"])?[0].overall.f1;
    let b = train_and_eval(&flip_yaw, &["val"])?[0].overall.f1;
    check(
        b >= a - 0.02,
        format!("held-out F1 {a:.3} without augmentation, {b:.3} with flip+yaw ({steps} steps)"),
    )
}

fn main() -> ExitCode {
    let training = std::env::var("FISHBEV_ACCEPTANCE_TRAINING").is_ok_and(|v| v == "1");
    let mut failed = 0;
    let mut report = |n: usize, name: &str, out: Option<Outcome>| {
        let line = match out {
            Some(Ok(d)) => format!("PASS  {d}"),
            Some(Err(d)) => {
                failed += 1;
                format!("FAIL  {d}")
            }
            None => "SKIP  set FISHBEV_ACCEPTANCE_TRAINING=1 to run".to_string(),
        };
        println!("criterion {n} ({name}): {line}");
    };
    report(1, "geometry round trip", Some(geometry_round_trip()));
    report(2, "gradient fidelity", Some(gradient_fidelity()));
    report(3, "GIoU oracle", Some(giou_oracle()));
    report(4, "loss arithmetic", Some(loss_arithmetic()));
    report(5, "augmentation soundness", Some(augmentation_soundness()));
    let run = training.then(overfit_run);
    report(6, "end-to-end overfit", run.as_ref().map(end_to_end));
    report(7, "corner visibility", run.as_ref().map(visibility));
    report(8, "ablation direction", training.then(ablation_direction));
    report(9, "throughput harness", Some(throughput_harness()));
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
