//! Deterministic synthetic box world: scenes, camera paths, ray casting and
//! the clip container.

mod camera;
mod dataset;
mod render;
mod scene;
mod trajectory;

use rayon::prelude::*;

pub use camera::{project_point, unproject_pixel, CameraPose, Intrinsics};
pub use dataset::{decode_dataset, encode_dataset, read_dataset, write_dataset, DATASET_MAGIC, DATASET_VERSION, SKY_DEPTH};
pub use render::{cross_view_agreement, intersect_box, light_direction, render_clip, render_frame, sky_point, RenderedFrame, VideoClip, AMBIENT};
pub use scene::{make_scene, AaBox, GroundPlane, Scene, FLOOR_HALF_EXTENT, MAX_BOXES};
pub use trajectory::{make_trajectory, make_trajectory_with, TrajectoryKind, TrajectoryParams};

use crate::error::Result;
use crate::rng::derive_seed;

/// Settings for a batch of generated clips.
#[derive(Debug, Clone, PartialEq)]
pub struct WorldConfig {
    pub clips: usize,
    pub frames: usize,
    pub resolution: usize,
    pub focal: f64,
    pub kinds: Vec<TrajectoryKind>,
    pub trajectory: TrajectoryParams,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            clips: 64,
            frames: 8,
            resolution: 32,
            focal: 28.0,
            kinds: vec![TrajectoryKind::Orbit, TrajectoryKind::RandomWalk, TrajectoryKind::Revisit, TrajectoryKind::Dolly],
            trajectory: TrajectoryParams::default(),
        }
    }
}

impl WorldConfig {
    pub fn intrinsics(&self) -> Intrinsics {
        Intrinsics::centered(self.focal, self.resolution, self.resolution)
    }
}

/// Clip `i` uses scene seed `derive_seed(root, "clip/i")` and cycles through
/// `cfg.kinds`.
pub fn generate_clips(cfg: &WorldConfig, root_seed: u64) -> Result<Vec<VideoClip>> {
    if cfg.kinds.is_empty() {
        return Err(crate::error::Error::invalid("no trajectory kinds configured"));
    }
    let k = cfg.intrinsics();
    k.validate()?;
    (0..cfg.clips)
        .into_par_iter()
        .map(|i| {
            let seed = derive_seed(root_seed, &format!("clip/{i}"));
            let kind = cfg.kinds[i % cfg.kinds.len()];
            generate_clip(seed, kind, cfg.frames, &k, &cfg.trajectory)
        })
        .collect()
}

pub fn generate_clip(seed: u64, kind: TrajectoryKind, frames: usize, k: &Intrinsics, params: &TrajectoryParams) -> Result<VideoClip> {
    let scene = make_scene(seed);
    let poses = make_trajectory_with(kind, frames, &scene, seed, params)?;
    Ok(render_clip(&scene, &poses, k, kind, seed))
}

impl crate::config::ConfigSection for WorldConfig {
    fn prefix(&self) -> &'static str {
        "data"
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        use crate::config::join_list;
        vec![
            ("frames", self.frames.to_string()),
            ("resolution", self.resolution.to_string()),
            ("focal", self.focal.to_string()),
            ("kinds", join_list(&self.kinds)),
            ("orbit_arc_deg", self.trajectory.orbit_arc_deg.to_string()),
            ("dolly_step", self.trajectory.dolly_step.to_string()),
        ]
    }

    fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        use crate::config::{parse_list, parse_value as pv};
        match key {
            "frames" => self.frames = pv(key, value)?,
            "resolution" => self.resolution = pv(key, value)?,
            "focal" => self.focal = pv(key, value)?,
            "kinds" => self.kinds = parse_list(key, value)?,
            "orbit_arc_deg" => self.trajectory.orbit_arc_deg = pv(key, value)?,
            "dolly_step" => self.trajectory.dolly_step = pv(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}
