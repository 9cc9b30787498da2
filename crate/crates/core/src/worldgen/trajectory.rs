//! Camera paths around a scene.

use std::f64::consts::TAU;
use std::fmt;
use std::str::FromStr;

use nalgebra::Vector3;
use rand::Rng;

use super::camera::CameraPose;
use super::scene::Scene;
use crate::error::{Error, Result};
use crate::rng::rng_for;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TrajectoryKind {
    Orbit,
    Dolly,
    Revisit,
    RandomWalk,
}

impl TrajectoryKind {
    pub const ALL: [TrajectoryKind; 4] = [Self::Orbit, Self::Dolly, Self::Revisit, Self::RandomWalk];

    pub fn code(self) -> u8 {
        match self {
            Self::Orbit => 0,
            Self::Dolly => 1,
            Self::Revisit => 2,
            Self::RandomWalk => 3,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.code() == code)
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Orbit => "orbit",
            Self::Dolly => "dolly",
            Self::Revisit => "revisit",
            Self::RandomWalk => "random_walk",
        }
    }
}

impl fmt::Display for TrajectoryKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TrajectoryKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown trajectory kind '{s}' (orbit, dolly, revisit, random_walk)")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryParams {
    pub radius: f64,
    pub height: f64,
    pub target: Vector3<f64>,
    pub orbit_arc_deg: f64,
    pub dolly_step: f64,
    pub walk_angle_step: f64,
    pub walk_radius_step: f64,
    pub walk_height_step: f64,
}

impl Default for TrajectoryParams {
    fn default() -> Self {
        Self {
            radius: 5.0,
            height: 3.2,
            target: Vector3::new(0.0, 0.2, 0.0),
            orbit_arc_deg: 90.0,
            dolly_step: 0.1,
            walk_angle_step: 0.12,
            walk_radius_step: 0.15,
            walk_height_step: 0.08,
        }
    }
}

fn orbit_pose(angle: f64, radius: f64, height: f64, target: Vector3<f64>) -> CameraPose {
    let eye = Vector3::new(radius * angle.cos(), height, radius * angle.sin());
    CameraPose::look_at(eye, target)
}

pub fn make_trajectory(kind: TrajectoryKind, n_frames: usize, scene: &Scene, seed: u64) -> Result<Vec<CameraPose>> {
    make_trajectory_with(kind, n_frames, scene, seed, &TrajectoryParams::default())
}

/// Poses are rounded to `f32` so they survive the dataset container exactly.
pub fn make_trajectory_with(
    kind: TrajectoryKind,
    n_frames: usize,
    scene: &Scene,
    seed: u64,
    p: &TrajectoryParams,
) -> Result<Vec<CameraPose>> {
    if n_frames < 2 {
        return Err(Error::invalid(format!("trajectory needs at least 2 frames, got {n_frames}")));
    }
    let mut rng = rng_for(seed, "trajectory");
    let start = rng.random_range(0.0..TAU);
    let poses: Vec<CameraPose> = match kind {
        TrajectoryKind::Revisit => {
            let first = orbit_pose(start, p.radius, p.height, p.target);
            (0..n_frames)
                .map(|k| {
                    let a = TAU * (k % (n_frames - 1)) as f64 / (n_frames - 1) as f64;
                    rotate_about_y(&first, a, &p.target)
                })
                .collect()
        }
        TrajectoryKind::Orbit => {
            let arc = p.orbit_arc_deg.to_radians();
            (0..n_frames)
                .map(|k| orbit_pose(start + arc * k as f64 / (n_frames - 1) as f64, p.radius, p.height, p.target))
                .collect()
        }
        TrajectoryKind::Dolly => {
            let first = orbit_pose(start, p.radius, p.height, p.target);
            let dir = first.forward();
            (0..n_frames)
                .map(|k| CameraPose {
                    rotation: first.rotation,
                    translation: first.translation + dir * (p.dolly_step * k as f64),
                })
                .collect()
        }
        TrajectoryKind::RandomWalk => {
            let (mut angle, mut radius, mut height) = (start, p.radius, p.height);
            let mut out = Vec::with_capacity(n_frames);
            for _ in 0..n_frames {
                out.push(orbit_pose(angle, radius, height, p.target));
                angle += rng.random_range(-p.walk_angle_step..=p.walk_angle_step);
                radius = (radius + rng.random_range(-p.walk_radius_step..=p.walk_radius_step)).clamp(4.2, 6.5);
                height = (height + rng.random_range(-p.walk_height_step..=p.walk_height_step)).clamp(2.2, 4.0);
            }
            out
        }
    };
    let poses: Vec<CameraPose> = poses.iter().map(CameraPose::quantized).collect();
    if let Some(k) = poses.iter().position(|c| scene.point_inside_any_box(&c.center())) {
        return Err(Error::invalid(format!("{kind} trajectory enters a box at frame {k}")));
    }
    Ok(poses)
}

/// Rotates a camera rigidly about the vertical axis through `pivot`.
fn rotate_about_y(pose: &CameraPose, angle: f64, pivot: &Vector3<f64>) -> CameraPose {
    let r = CameraPose::rot_y(angle);
    let pivot_xz = Vector3::new(pivot.x, 0.0, pivot.z);
    CameraPose {
        rotation: r * pose.rotation,
        translation: r * (pose.translation - pivot_xz) + pivot_xz,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::worldgen::scene::make_scene;

    #[test]
    fn revisit_closes_and_half_turn_is_opposite() {
        let s = make_scene(1);
        let p = make_trajectory(TrajectoryKind::Revisit, 9, &s, 3).unwrap();
        assert_eq!(p[0], p[8]);
        let expect = CameraPose::rot_y(std::f64::consts::PI) * p[0].rotation;
        assert!((p[4].rotation - expect).abs().max() < 1e-6);
        let c0 = p[0].center();
        assert!((p[4].center() - Vector3::new(-c0.x, c0.y, -c0.z)).norm() < 1e-5);
    }

    #[test]
    fn dolly_is_collinear_with_fixed_spacing() {
        let s = make_scene(2);
        let p = make_trajectory(TrajectoryKind::Dolly, 4, &s, 5).unwrap();
        let d = p[1].center() - p[0].center();
        for k in 1..4 {
            let step = p[k].center() - p[k - 1].center();
            assert!((step.norm() - 0.1).abs() < 1e-5);
            assert!(step.cross(&d).norm() < 1e-5);
        }
    }

    #[test]
    fn orbit_two_frames_are_distinct_and_on_the_circle() {
        let s = make_scene(3);
        let p = make_trajectory(TrajectoryKind::Orbit, 2, &s, 1).unwrap();
        assert_ne!(p[0], p[1]);
        for c in &p {
            let r = (c.center().x.powi(2) + c.center().z.powi(2)).sqrt();
            assert!((r - 5.0).abs() < 1e-5);
        }
    }

    #[test]
    fn rejects_single_frame() {
        assert!(make_trajectory(TrajectoryKind::Orbit, 1, &make_scene(0), 0).is_err());
    }

    #[test]
    fn rotations_stay_orthonormal() {
        let s = make_scene(4);
        for kind in TrajectoryKind::ALL {
            for pose in make_trajectory(kind, 16, &s, 9).unwrap() {
                assert!(pose.orthonormality_error() < 1e-6, "{kind}");
            }
        }
    }

    #[test]
    fn kind_codes_round_trip() {
        for k in TrajectoryKind::ALL {
            assert_eq!(TrajectoryKind::from_code(k.code()), Some(k));
            assert_eq!(k.name().parse::<TrajectoryKind>().unwrap(), k);
        }
    }
}
