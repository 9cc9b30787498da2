//! Nearest-hit ray casting with Lambert shading.

use nalgebra::Vector3;
use rayon::prelude::*;

use super::camera::{project_point, CameraPose, Intrinsics};
use super::scene::{AaBox, Scene, FLOOR_HALF_EXTENT};
use super::trajectory::TrajectoryKind;

pub const AMBIENT: f64 = 0.35;
const HIT_EPS: f64 = 1e-9;

pub fn light_direction() -> Vector3<f64> {
    Vector3::new(0.5, 1.0, 0.3).normalize()
}

pub fn sky_point() -> f32 {
    f32::from_bits(0x7FC0_0000)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderedFrame {
    /// `H×W×3`, values in `[0, 1]`.
    pub rgb: Vec<f32>,
    /// `H×W` camera-z depth; `+∞` for sky.
    pub depth: Vec<f32>,
    /// `H×W×3` world position of the first hit; NaN for sky.
    pub point_map: Vec<f32>,
    pub pose: CameraPose,
    pub intrinsics: Intrinsics,
}

impl RenderedFrame {
    pub fn height(&self) -> usize {
        self.intrinsics.height
    }

    pub fn width(&self) -> usize {
        self.intrinsics.width
    }

    pub fn is_sky(&self, pixel: usize) -> bool {
        !self.depth[pixel].is_finite()
    }

    pub fn point(&self, pixel: usize) -> Vector3<f64> {
        let p = &self.point_map[3 * pixel..3 * pixel + 3];
        Vector3::new(p[0] as f64, p[1] as f64, p[2] as f64)
    }

    /// Bitwise equality of every plane, so NaN sky points compare equal.
    pub fn bit_identical(&self, other: &RenderedFrame) -> bool {
        fn bits(a: &[f32], b: &[f32]) -> bool {
            a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
        }
        bits(&self.rgb, &other.rgb)
            && bits(&self.depth, &other.depth)
            && bits(&self.point_map, &other.point_map)
            && self.pose == other.pose
            && self.intrinsics == other.intrinsics
    }

    pub fn color(&self, pixel: usize) -> [f32; 3] {
        [self.rgb[3 * pixel], self.rgb[3 * pixel + 1], self.rgb[3 * pixel + 2]]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VideoClip {
    pub frames: Vec<RenderedFrame>,
    pub trajectory_kind: TrajectoryKind,
    pub seed: u64,
}

impl VideoClip {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn intrinsics(&self) -> Intrinsics {
        self.frames[0].intrinsics
    }

    pub fn poses(&self) -> Vec<CameraPose> {
        self.frames.iter().map(|f| f.pose).collect()
    }
}

/// Entry parameter and outward face normal of a ray against a box.
pub fn intersect_box(origin: &Vector3<f64>, dir: &Vector3<f64>, b: &AaBox) -> Option<(f64, Vector3<f64>)> {
    let (lo, hi) = (b.min(), b.max());
    let mut t_near = f64::NEG_INFINITY;
    let mut t_far = f64::INFINITY;
    let mut axis = 0;
    for a in 0..3 {
        if dir[a].abs() < 1e-15 {
            if origin[a] < lo[a] || origin[a] > hi[a] {
                return None;
            }
            continue;
        }
        let inv = 1.0 / dir[a];
        let (mut t0, mut t1) = ((lo[a] - origin[a]) * inv, (hi[a] - origin[a]) * inv);
        if t0 > t1 {
            std::mem::swap(&mut t0, &mut t1);
        }
        if t0 > t_near {
            t_near = t0;
            axis = a;
        }
        t_far = t_far.min(t1);
    }
    if t_near > t_far || t_near <= HIT_EPS {
        return None;
    }
    let mut n = Vector3::zeros();
    n[axis] = -dir[axis].signum();
    Some((t_near, n))
}

fn intersect_floor(origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<f64> {
    if dir.y >= -1e-15 || origin.y <= 0.0 {
        return None;
    }
    let s = -origin.y / dir.y;
    let p = origin + dir * s;
    (p.x.abs() <= FLOOR_HALF_EXTENT && p.z.abs() <= FLOOR_HALF_EXTENT).then_some(s)
}

fn shade(albedo: [f64; 3], normal: &Vector3<f64>) -> [f32; 3] {
    let lambert = AMBIENT + (1.0 - AMBIENT) * normal.dot(&light_direction()).max(0.0);
    albedo.map(|c| (c * lambert).clamp(0.0, 1.0) as f32)
}

/// Ray parameter equals camera-frame depth because the camera-space
/// direction has unit z.
fn trace_pixel(scene: &Scene, pose: &CameraPose, k: &Intrinsics, row: usize, col: usize) -> Option<(f64, Vector3<f64>, [f32; 3])> {
    let u = col as f64 + 0.5;
    let v = row as f64 + 0.5;
    let dir = pose.rotation * Vector3::new((u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0);
    let origin = pose.translation;
    let mut best: Option<(f64, Vector3<f64>, [f32; 3])> = None;
    if let Some(s) = intersect_floor(&origin, &dir) {
        let p = origin + dir * s;
        best = Some((s, p, shade(scene.ground.albedo_at(p.x, p.z), &Vector3::y())));
    }
    for b in &scene.boxes {
        if let Some((s, n)) = intersect_box(&origin, &dir, b) {
            if best.is_none_or(|(bs, _, _)| s < bs) {
                best = Some((s, origin + dir * s, shade(b.albedo, &n)));
            }
        }
    }
    best
}

pub fn render_frame(scene: &Scene, pose: &CameraPose, k: &Intrinsics) -> RenderedFrame {
    let (h, w) = (k.height, k.width);
    let mut rgb = vec![0f32; h * w * 3];
    let mut depth = vec![f32::INFINITY; h * w];
    let mut point_map = vec![sky_point(); h * w * 3];
    for row in 0..h {
        for col in 0..w {
            let q = row * w + col;
            match trace_pixel(scene, pose, k, row, col) {
                Some((s, p, c)) => {
                    depth[q] = s as f32;
                    for a in 0..3 {
                        point_map[3 * q + a] = p[a] as f32;
                    }
                    rgb[3 * q..3 * q + 3].copy_from_slice(&c);
                }
                None => {
                    for a in 0..3 {
                        rgb[3 * q + a] = scene.background[a] as f32;
                    }
                }
            }
        }
    }
    RenderedFrame {
        rgb,
        depth,
        point_map,
        pose: *pose,
        intrinsics: *k,
    }
}

/// Frames are rendered in parallel; each is a pure function of its pose.
pub fn render_clip(scene: &Scene, poses: &[CameraPose], k: &Intrinsics, kind: TrajectoryKind, seed: u64) -> VideoClip {
    let frames = poses.par_iter().map(|p| render_frame(scene, p, k)).collect();
    VideoClip {
        frames,
        trajectory_kind: kind,
        seed,
    }
}

/// Photometric agreement of frame `a` against frame `b` over visible,
/// depth-consistent pixels. Returns `(agreeing, tested)`.
pub fn cross_view_agreement(a: &RenderedFrame, b: &RenderedFrame, depth_tol: f64, color_tol: f32) -> (usize, usize) {
    let k = &b.intrinsics;
    let (mut agree, mut tested) = (0, 0);
    for q in 0..a.depth.len() {
        if a.is_sky(q) {
            continue;
        }
        let Ok((u, v, z)) = project_point(&a.point(q), &b.pose, k) else {
            continue;
        };
        if !k.contains(u, v) {
            continue;
        }
        let qb = v.floor() as usize * k.width + u.floor() as usize;
        let db = b.depth[qb] as f64;
        if !db.is_finite() || (z - db).abs() > depth_tol * db {
            continue;
        }
        tested += 1;
        let (ca, cb) = (a.color(q), b.color(qb));
        if (0..3).all(|c| (ca[c] - cb[c]).abs() <= color_tol) {
            agree += 1;
        }
    }
    (agree, tested)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::worldgen::camera::unproject_pixel;
    use crate::worldgen::scene::{make_scene, GroundPlane};
    use crate::worldgen::trajectory::make_trajectory;

    fn empty_scene() -> Scene {
        Scene {
            ground: GroundPlane {
                cell: 1.0,
                albedo_a: [0.6; 3],
                albedo_b: [0.3; 3],
            },
            boxes: vec![],
            background: [0.1, 0.2, 0.3],
            seed: 0,
        }
    }

    /// Principal point on a pixel center, so pixel (16, 16) is the optical axis.
    fn axis_intrinsics() -> Intrinsics {
        Intrinsics::new(28.0, 28.0, 16.5, 16.5, 32, 32).unwrap()
    }

    #[test]
    fn looking_down_at_floor_from_height_two() {
        let eye = Vector3::new(0.3, 2.0, -0.7);
        let pose = CameraPose::look_at(eye, Vector3::new(0.3, 0.0, -0.7));
        let f = render_frame(&empty_scene(), &pose, &axis_intrinsics());
        let q = 16 * 32 + 16;
        assert!((f.depth[q] - 2.0).abs() < 1e-6);
        let p = f.point(q);
        assert!((p - Vector3::new(0.3, 0.0, -0.7)).norm() < 1e-6);
    }

    #[test]
    fn sky_pixels_get_sentinels_and_background() {
        let pose = CameraPose::look_at(Vector3::new(0.0, 1.0, 0.0), Vector3::new(0.0, 5.0, 0.1));
        let scene = empty_scene();
        let f = render_frame(&scene, &pose, &axis_intrinsics());
        let q = 16 * 32 + 16;
        assert_eq!(f.depth[q], f32::INFINITY);
        assert!(f.point_map[3 * q].is_nan());
        assert_eq!(f.color(q), scene.background.map(|c| c as f32));
    }

    /// Closed-form slab oracle written independently of `intersect_box`.
    fn slab_oracle(o: [f64; 3], d: [f64; 3], lo: [f64; 3], hi: [f64; 3]) -> Option<f64> {
        let mut enter: f64 = f64::NEG_INFINITY;
        let mut exit: f64 = f64::INFINITY;
        for a in 0..3 {
            let ta = (lo[a] - o[a]) / d[a];
            let tb = (hi[a] - o[a]) / d[a];
            enter = enter.max(ta.min(tb));
            exit = exit.min(ta.max(tb));
        }
        (enter <= exit && enter > 0.0).then_some(enter)
    }

    #[test]
    fn box_depth_matches_slab_oracle() {
        let mut scene = empty_scene();
        scene.boxes.push(AaBox {
            center: Vector3::new(0.2, 0.5, 0.1),
            half_extents: Vector3::new(0.5, 0.5, 0.5),
            albedo: [0.9, 0.1, 0.1],
        });
        let pose = CameraPose::look_at(Vector3::new(1.5, 1.7, -4.0), Vector3::new(0.2, 0.5, 0.1)).quantized();
        let k = axis_intrinsics();
        let f = render_frame(&scene, &pose, &k);
        let b = &scene.boxes[0];
        let mut checked = 0;
        for row in 0..32 {
            for col in 0..32 {
                let dc = Vector3::new((col as f64 + 0.5 - k.cx) / k.fx, (row as f64 + 0.5 - k.cy) / k.fy, 1.0);
                let d = pose.rotation * dc;
                let o = pose.translation;
                let Some(t) = slab_oracle(o.into(), d.into(), b.min().into(), b.max().into()) else {
                    continue;
                };
                let q = row * 32 + col;
                assert!((f.depth[q] as f64 - t).abs() < 1e-4, "pixel {row},{col}");
                assert!(f.color(q)[0] > f.color(q)[1], "box is the nearest hit");
                checked += 1;
            }
        }
        assert!(checked > 20, "box should cover several pixels, got {checked}");
        let q = 16 * 32 + 16;
        let axis_t = slab_oracle(pose.translation.into(), pose.forward().into(), b.min().into(), b.max().into()).unwrap();
        assert!((f.depth[q] as f64 - axis_t).abs() < 1e-4);
    }

    fn sample_clip(seed: u64, kind: TrajectoryKind) -> VideoClip {
        let scene = make_scene(seed);
        let poses = make_trajectory(kind, 6, &scene, seed).unwrap();
        render_clip(&scene, &poses, &Intrinsics::centered(28.0, 32, 32), kind, seed)
    }

    #[test]
    fn self_reprojection_and_depth_consistency() {
        for (i, kind) in TrajectoryKind::ALL.into_iter().enumerate() {
            let clip = sample_clip(10 + i as u64, kind);
            for f in &clip.frames {
                let w = f.width();
                for q in 0..f.depth.len() {
                    if f.is_sky(q) {
                        continue;
                    }
                    let (u, v, z) = project_point(&f.point(q), &f.pose, &f.intrinsics).unwrap();
                    let (uc, vc) = ((q % w) as f64 + 0.5, (q / w) as f64 + 0.5);
                    assert!((u - uc).abs() < 0.5 && (v - vc).abs() < 0.5);
                    assert!((z - f.depth[q] as f64).abs() < 1e-4 * z.max(1.0));
                    let back = unproject_pixel(uc, vc, f.depth[q] as f64, &f.pose, &f.intrinsics).unwrap();
                    assert!((back - f.point(q)).norm() < 1e-4 * z.max(1.0));
                }
            }
        }
    }

    #[test]
    fn cross_view_colors_agree() {
        for (i, kind) in [TrajectoryKind::Orbit, TrajectoryKind::RandomWalk, TrajectoryKind::Dolly].into_iter().enumerate() {
            let clip = sample_clip(30 + i as u64, kind);
            let (mut agree, mut tested) = (0, 0);
            for i in 0..clip.len() {
                for j in 0..clip.len() {
                    if i != j {
                        let (a, t) = cross_view_agreement(&clip.frames[i], &clip.frames[j], 0.01, 0.15);
                        agree += a;
                        tested += t;
                    }
                }
            }
            assert!(tested > 0);
            assert!(agree as f64 >= 0.9 * tested as f64, "{kind}: {agree}/{tested}");
        }
    }

    #[test]
    fn revisit_endpoints_render_identically() {
        let clip = sample_clip(5, TrajectoryKind::Revisit);
        assert!(clip.frames[0].bit_identical(&clip.frames[clip.len() - 1]));
    }

    #[test]
    fn rgb_in_unit_range() {
        let clip = sample_clip(6, TrajectoryKind::Orbit);
        assert!(clip.frames.iter().flat_map(|f| &f.rgb).all(|&c| (0.0..=1.0).contains(&c)));
    }
}
