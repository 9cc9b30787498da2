#![allow(dead_code)]

use gf_core::model::ModelConfig;
use gf_core::teacher::{AttnScope, TeacherConfig, TeacherModel};
use gf_core::training::{LossMode, TrainConfig};
use gf_core::worldgen::{generate_clips, TrajectoryKind, VideoClip, WorldConfig};

pub fn tiny_world(clips: usize, frames: usize) -> WorldConfig {
    WorldConfig {
        clips,
        frames,
        resolution: 16,
        focal: 14.0,
        ..WorldConfig::default()
    }
}

pub fn tiny_clips(clips: usize, frames: usize) -> Vec<VideoClip> {
    generate_clips(&tiny_world(clips, frames), 7).unwrap()
}

pub fn revisit_world(clips: usize, frames: usize) -> WorldConfig {
    WorldConfig {
        kinds: vec![TrajectoryKind::Revisit],
        ..tiny_world(clips, frames)
    }
}

pub fn tiny_teacher_cfg() -> TeacherConfig {
    TeacherConfig {
        resolution: 16,
        dim: 16,
        layout: vec![AttnScope::Frame, AttnScope::Global],
        taps: vec![1, 2],
        steps: 20,
        ..TeacherConfig::default()
    }
}

pub fn tiny_teacher() -> TeacherModel {
    TeacherModel::init(&tiny_teacher_cfg(), 5).unwrap()
}

pub fn tiny_model_cfg() -> ModelConfig {
    ModelConfig {
        width: 32,
        heads: 2,
        blocks: 3,
        tap_layer: 2,
        resolution: 16,
        window: 4,
        projector_hidden: 32,
        target_layers: 2,
        target_dim: 16,
        scale_hidden: 16,
        ..ModelConfig::default()
    }
}

pub fn train_cfg(mode: LossMode, steps: usize) -> TrainConfig {
    TrainConfig {
        loss_mode: mode,
        steps,
        learning_rate: 2e-3,
        seed: 9,
        ..TrainConfig::default()
    }
}
