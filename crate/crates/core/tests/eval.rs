mod common;

use gf_core::config::ConfigSection;
use gf_core::eval::{
    drift_curve, final_quarter_distance, probe_comparison, psnr, reprojection_error, revisit_error, ssim, teacher_feature_distance, Curve,
    EvalConfig, ImageView, MetricsReport, ReportMeta, PSNR_CAP,
};
use gf_core::model::ModelBundle;
use gf_core::rng::rng_for;
use gf_core::teacher::ProbeConfig;
use gf_core::worldgen::{generate_clips, CameraPose, Intrinsics, RenderedFrame, TrajectoryKind, VideoClip, WorldConfig};
use nalgebra::Vector3;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn depth_of(clip: &VideoClip) -> Vec<f32> {
    clip.frames.iter().flat_map(|f| f.depth.iter().copied()).collect()
}

fn with_rgb(clip: &VideoClip, mut f: impl FnMut(usize, &[f32]) -> Vec<f32>) -> VideoClip {
    let mut out = clip.clone();
    for (i, frame) in out.frames.iter_mut().enumerate() {
        frame.rgb = f(i, &clip.frames[i].rgb);
    }
    out
}

fn noisy(clip: &VideoClip, sigma: f64, seed: u64) -> VideoClip {
    let mut rng: ChaCha8Rng = rng_for(seed, "noise");
    let n = Normal::new(0.0, sigma).unwrap();
    with_rgb(clip, |_, rgb| rgb.iter().map(|&v| (v as f64 + n.sample(&mut rng)).clamp(0.0, 1.0) as f32).collect())
}

#[test]
fn reprojection_error_with_true_depth_is_subpixel_on_every_clip() {
    let wc = WorldConfig {
        clips: 8,
        frames: 12,
        ..WorldConfig::default()
    };
    for clip in generate_clips(&wc, 3).unwrap() {
        let mut rng: ChaCha8Rng = rng_for(clip.seed, "rpe");
        let e = reprojection_error(&clip, &depth_of(&clip), 4, 256, &mut rng).unwrap();
        assert!(e < 0.5, "clip {} ({}): {e}", clip.seed, clip.trajectory_kind);
    }
}

/// Two cameras looking down +z, the second shifted sideways by `baseline`;
/// frame 0 sees one point at depth `z`, frame 1 sees a wall at depth `z`.
fn stereo_clip(baseline: f64, z: f32) -> VideoClip {
    let k = Intrinsics::centered(28.0, 32, 32);
    let hw = 32 * 32;
    let px = 16 * 32 + 16;
    let pose0 = CameraPose::look_at(Vector3::zeros(), Vector3::z());
    let pose1 = CameraPose::look_at(Vector3::x() * baseline, Vector3::x() * baseline + Vector3::z());
    let p = gf_core::worldgen::unproject_pixel(16.5, 16.5, z as f64, &pose0, &k).unwrap();
    let mut depth0 = vec![f32::INFINITY; hw];
    depth0[px] = z;
    let mut points0 = vec![f32::NAN; hw * 3];
    points0[px * 3..px * 3 + 3].copy_from_slice(&[p.x as f32, p.y as f32, p.z as f32]);
    let frame = |pose, depth, point_map| RenderedFrame {
        rgb: vec![0.5; hw * 3],
        depth,
        point_map,
        pose,
        intrinsics: k,
    };
    VideoClip {
        frames: vec![frame(pose0, depth0, points0), frame(pose1, vec![z; hw], vec![0.0; hw * 3])],
        trajectory_kind: TrajectoryKind::Dolly,
        seed: 0,
    }
}

#[test]
fn doubled_depth_reprojects_with_half_the_parallax() {
    // Parallax f·b/z halves when the depth doubles: 28·0.5·(1/4 − 1/8) = 1.75 px.
    let clip = stereo_clip(0.5, 4.0);
    let pred = vec![8.0f32; 2 * 32 * 32];
    let mut rng: ChaCha8Rng = rng_for(0, "stereo");
    let e = reprojection_error(&clip, &pred, 1, 16, &mut rng).unwrap();
    assert!((e - 1.75).abs() < 1e-4, "{e}");
}

#[test]
fn reprojection_error_rejects_non_positive_depth() {
    let clip = stereo_clip(0.5, 4.0);
    let pred = vec![0.0f32; 2 * 32 * 32];
    let mut rng: ChaCha8Rng = rng_for(0, "stereo");
    assert!(reprojection_error(&clip, &pred, 1, 4, &mut rng).is_err());
    assert!(reprojection_error(&clip, &pred[..10], 1, 4, &mut rng).is_err());
    assert!(reprojection_error(&clip, &pred, 2, 4, &mut rng).is_err());
}

#[test]
fn reprojection_error_is_invariant_to_rigid_motion() {
    let clip = &generate_clips(&WorldConfig { clips: 1, frames: 12, ..WorldConfig::default() }, 5).unwrap()[0];
    let rigid = CameraPose {
        rotation: CameraPose::rot_y(0.7),
        translation: Vector3::new(1.0, 2.0, -3.0),
    };
    let mut moved = clip.clone();
    for f in &mut moved.frames {
        f.pose = rigid.compose(&f.pose);
        for p in f.point_map.chunks_mut(3) {
            if p[0].is_finite() {
                let q = rigid.rotation * Vector3::new(p[0] as f64, p[1] as f64, p[2] as f64) + rigid.translation;
                p.copy_from_slice(&[q.x as f32, q.y as f32, q.z as f32]);
            }
        }
    }
    let pred: Vec<f32> = depth_of(clip).iter().enumerate().map(|(i, d)| d * (1.0 + 0.2 * ((i % 7) as f32 / 7.0))).collect();
    let mut r1: ChaCha8Rng = rng_for(9, "rpe");
    let mut r2: ChaCha8Rng = rng_for(9, "rpe");
    let a = reprojection_error(clip, &pred, 4, 128, &mut r1).unwrap();
    let b = reprojection_error(&moved, &pred, 4, 128, &mut r2).unwrap();
    assert!(a > 0.1);
    assert!((a - b).abs() < 1e-3 * a.max(1.0), "{a} vs {b}");
}

fn revisit_clip() -> VideoClip {
    generate_clips(&common::revisit_world(1, 9), 2).unwrap().remove(0)
}

#[test]
fn ground_truth_revisit_closes_exactly() {
    for clip in generate_clips(&common::revisit_world(4, 9), 8).unwrap() {
        let r = revisit_error(&clip).unwrap();
        assert_eq!(r.mse, 0.0);
        assert_eq!(r.psnr, PSNR_CAP);
    }
}

#[test]
fn constant_video_has_zero_revisit_error() {
    let clip = with_rgb(&revisit_clip(), |_, rgb| vec![0.3; rgb.len()]);
    assert_eq!(revisit_error(&clip).unwrap().mse, 0.0);
}

#[test]
fn shifted_checkerboard_matches_hand_mse() {
    // Two-pixel columns rolled by one pixel differ on every other column.
    let base = revisit_clip();
    let last = base.len() - 1;
    let w = 16;
    let cell = |x: usize| ((x / 2) % 2) as f32;
    let clip = with_rgb(&base, |i, rgb| {
        (0..rgb.len())
            .map(|j| {
                let x = (j / 3) % w;
                if i == last {
                    cell((x + w - 1) % w)
                } else {
                    cell(x)
                }
            })
            .collect()
    });
    assert_eq!(revisit_error(&clip).unwrap().mse, 0.5);
}

#[test]
fn revisit_error_needs_a_revisit_clip() {
    let clip = &generate_clips(&WorldConfig { kinds: vec![TrajectoryKind::Orbit], ..common::tiny_world(1, 4) }, 1).unwrap()[0];
    assert!(revisit_error(clip).is_err());
}

#[test]
fn inverted_image_has_negative_ssim() {
    let clip = &common::tiny_clips(1, 2)[0];
    let rgb = &clip.frames[0].rgb;
    let inv: Vec<f32> = rgb.iter().map(|v| 1.0 - v).collect();
    let a = ImageView::new(rgb, 16, 16, 3).unwrap();
    let b = ImageView::new(&inv, 16, 16, 3).unwrap();
    assert!(ssim(&a, &b, 1.0).unwrap() < 0.0);
    assert!((ssim(&a, &a, 1.0).unwrap() - 1.0).abs() < 1e-9);
}

#[test]
fn feature_distance_is_a_symmetric_semimetric() {
    let teacher = common::tiny_teacher();
    let clips = common::tiny_clips(2, 4);
    let (a, b) = (&clips[0], &clips[1]);
    assert_eq!(teacher_feature_distance(a, a, &teacher).unwrap(), 0.0);
    let ab = teacher_feature_distance(a, b, &teacher).unwrap();
    let ba = teacher_feature_distance(b, a, &teacher).unwrap();
    assert!(ab > 0.0);
    assert!((ab - ba).abs() < 1e-9 * ab);
}

#[test]
fn metrics_order_degradations() {
    let teacher = common::tiny_teacher();
    let truth = &common::tiny_clips(1, 4)[0];
    let mild = noisy(truth, 0.02, 1);
    let strong = noisy(truth, 0.2, 2);
    let mut rng: ChaCha8Rng = rng_for(3, "u");
    let random = with_rgb(truth, |_, rgb| (0..rgb.len()).map(|_| rng.random::<f32>()).collect());

    let view = |c: &VideoClip| c.frames[1].rgb.clone();
    let score = |c: &VideoClip, f: fn(&ImageView<'_>, &ImageView<'_>, f64) -> gf_core::Result<f64>| {
        let (x, y) = (view(c), view(truth));
        f(&ImageView::new(&x, 16, 16, 3).unwrap(), &ImageView::new(&y, 16, 16, 3).unwrap(), 1.0).unwrap()
    };
    assert!(score(&mild, psnr) > score(&strong, psnr));
    assert!(score(&mild, ssim) > score(&strong, ssim));

    let tfd = |c: &VideoClip| teacher_feature_distance(c, truth, &teacher).unwrap();
    assert!(tfd(&mild) < tfd(&strong));
    assert!(tfd(&strong) < tfd(&random));
}

#[test]
fn drift_curve_of_identical_clips_is_flat() {
    let teacher = common::tiny_teacher();
    let truth = &common::tiny_clips(1, 10)[0];
    let c = drift_curve(truth, truth, 4, Some(&teacher)).unwrap();
    assert_eq!(c.psnr.len(), 7);
    assert!(c.psnr.iter().all(|&(_, v)| v == PSNR_CAP));
    assert!(c.teacher_distance.unwrap().iter().all(|&(_, v)| v == 0.0));
    let idx: Vec<usize> = c.psnr.iter().map(|p| p.0).collect();
    assert_eq!(idx, (0..7).collect::<Vec<_>>());
}

#[test]
fn drift_curve_falls_as_error_grows() {
    let truth = &common::tiny_clips(1, 12)[0];
    // ±σᵢ per value gives per-frame MSE σᵢ² exactly.
    let gen = with_rgb(truth, |i, rgb| {
        let s = 0.01 * (i + 1) as f32;
        rgb.iter().enumerate().map(|(j, v)| if j % 2 == 0 { v + s } else { v - s }).collect()
    });
    let c = drift_curve(&gen, truth, 3, None).unwrap();
    assert_eq!(c.psnr.len(), 10);
    assert!(c.teacher_distance.is_none());
    assert!(c.psnr.windows(2).all(|w| w[1].1 < w[0].1));
    let first = (10.0 * (1.0 / 0.01f64.powi(2)).log10() + 10.0 * (1.0 / 0.02f64.powi(2)).log10() + 10.0 * (1.0 / 0.03f64.powi(2)).log10()) / 3.0;
    assert!((c.psnr[0].1 - first).abs() < 1e-3, "{} vs {first}", c.psnr[0].1);
}

#[test]
fn drift_curve_rejects_bad_windows() {
    let truth = &common::tiny_clips(1, 4)[0];
    assert!(drift_curve(truth, truth, 0, None).is_err());
    assert!(drift_curve(truth, truth, 5, None).is_err());
}

#[test]
fn final_quarter_distance_uses_the_tail() {
    let teacher = common::tiny_teacher();
    let truth = &common::tiny_clips(1, 8)[0];
    let last = truth.len() - 1;
    let head_only = with_rgb(truth, |i, rgb| if i < 2 { vec![0.0; rgb.len()] } else { rgb.to_vec() });
    assert_eq!(final_quarter_distance(&head_only, truth, &teacher).unwrap(), 0.0);
    let tail = with_rgb(truth, |i, rgb| if i == last { vec![0.0; rgb.len()] } else { rgb.to_vec() });
    assert!(final_quarter_distance(&tail, truth, &teacher).unwrap() > 0.0);
}

#[test]
fn probe_comparison_of_a_model_with_itself_is_exact() {
    let model = ModelBundle::init(&common::tiny_model_cfg(), 8).unwrap();
    let clips = common::tiny_clips(4, 4);
    let pc = ProbeConfig {
        steps: 5,
        hidden: 8,
        ..ProbeConfig::default()
    };
    let c = probe_comparison(&model, &model, &clips, &pc, 0.1, 3).unwrap();
    assert_eq!(c.a.heldout_rmse, c.b.heldout_rmse);
    let other_tap = model.with_tap_layer(1).unwrap();
    assert!(probe_comparison(&model, &other_tap, &clips, &pc, 0.1, 3).is_err());
}

fn meta() -> ReportMeta {
    ReportMeta {
        run: "eval".into(),
        config_hash: "0123456789abcdef0123".into(),
        seed: 4,
        timestamp: 0,
    }
}

#[test]
fn report_round_trips_through_json() {
    let mut r = MetricsReport::new(meta());
    r.scalars.insert("psnr".into(), 23.5);
    r.scalars.insert("rpe".into(), 0.125);
    let curve: Curve = vec![(0, 20.0), (1, 19.5), (2, 18.0)];
    r.curves.insert("psnr".into(), curve);
    let line = r.to_json_line().unwrap();
    assert!(!line.contains('\n'));
    assert_eq!(MetricsReport::from_json_line(&line).unwrap(), r);
    assert_eq!(r.file_stem(), "eval-0123456789ab-s4");
}

#[test]
fn report_rejects_non_finite_scalars_and_unordered_curves() {
    let mut r = MetricsReport::new(meta());
    r.scalars.insert("psnr".into(), f64::NAN);
    assert!(r.to_json_line().is_err());
    let mut r = MetricsReport::new(meta());
    r.curves.insert("tfd".into(), vec![(1, 0.5), (1, 0.6)]);
    assert!(r.validate().is_err());
}

#[test]
fn eval_config_rejects_unknown_metrics() {
    let mut cfg = EvalConfig::default();
    assert!(cfg.set("metrics", "psnr,fid").is_err());
    assert!(cfg.set("metrics", "psnr,ssim").unwrap());
    assert!(cfg.wants("ssim") && !cfg.wants("rpe"));
}
