//! Random box worlds resting on a finite checkerboard floor.

use nalgebra::Vector3;
use rand::Rng;

use crate::rng::rng_for;

/// Half-size of the square floor; rays past it see sky.
pub const FLOOR_HALF_EXTENT: f64 = 10.0;
pub const MAX_BOXES: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AaBox {
    pub center: Vector3<f64>,
    pub half_extents: Vector3<f64>,
    pub albedo: [f64; 3],
}

impl AaBox {
    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        (0..3).all(|a| (p[a] - self.center[a]).abs() <= self.half_extents[a])
    }

    pub fn min(&self) -> Vector3<f64> {
        self.center - self.half_extents
    }

    pub fn max(&self) -> Vector3<f64> {
        self.center + self.half_extents
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundPlane {
    /// Checker square size in world units.
    pub cell: f64,
    pub albedo_a: [f64; 3],
    pub albedo_b: [f64; 3],
}

impl GroundPlane {
    pub fn albedo_at(&self, x: f64, z: f64) -> [f64; 3] {
        let parity = ((x / self.cell).floor() as i64 + (z / self.cell).floor() as i64).rem_euclid(2);
        if parity == 0 {
            self.albedo_a
        } else {
            self.albedo_b
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub ground: GroundPlane,
    pub boxes: Vec<AaBox>,
    pub background: [f64; 3],
    pub seed: u64,
}

impl Scene {
    pub fn point_inside_any_box(&self, p: &Vector3<f64>) -> bool {
        self.boxes.iter().any(|b| b.contains(p))
    }

    /// Canonical little-endian encoding, used for determinism checks.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&self.seed.to_le_bytes());
        let mut put = |v: f64| out.extend_from_slice(&v.to_le_bytes());
        put(self.ground.cell);
        self.ground.albedo_a.iter().chain(&self.ground.albedo_b).for_each(|&v| put(v));
        self.background.iter().for_each(|&v| put(v));
        for b in &self.boxes {
            b.center.iter().chain(b.half_extents.iter()).for_each(|&v| put(v));
            b.albedo.iter().for_each(|&v| put(v));
        }
        out
    }
}

fn color<R: Rng>(rng: &mut R, lo: f64, hi: f64) -> [f64; 3] {
    [rng.random_range(lo..hi), rng.random_range(lo..hi), rng.random_range(lo..hi)]
}

/// Deterministic scene for `seed`: 1 to 8 boxes inside a radius-2.5 disc.
pub fn make_scene(seed: u64) -> Scene {
    let mut rng = rng_for(seed, "scene");
    let n_boxes = rng.random_range(1..=8usize);
    let mut boxes = Vec::with_capacity(n_boxes);
    for _ in 0..n_boxes {
        let r = 2.5 * rng.random::<f64>().sqrt();
        let theta = rng.random_range(0.0..std::f64::consts::TAU);
        let half = Vector3::new(
            rng.random_range(0.25..0.8),
            rng.random_range(0.2..0.9),
            rng.random_range(0.25..0.8),
        );
        boxes.push(AaBox {
            center: Vector3::new(r * theta.cos(), half.y, r * theta.sin()),
            half_extents: half,
            albedo: color(&mut rng, 0.15, 0.95),
        });
    }
    let base = color(&mut rng, 0.45, 0.75);
    let ground = GroundPlane {
        cell: 1.0,
        albedo_a: base,
        albedo_b: base.map(|c| c * 0.45),
    };
    Scene {
        ground,
        boxes,
        background: [0.55, 0.7, 0.9].map(|c: f64| c + rng.random_range(-0.05..0.05)),
        seed,
    }
}
