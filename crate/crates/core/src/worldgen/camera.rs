//! Pinhole camera model.
//!
//! Camera frame: x right, y down, z forward. Poses are world-from-camera:
//! `p_world = R · p_cam + t`, with `t` the camera center.

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraPose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl CameraPose {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Camera at `eye` looking at `target` with world +Y up.
    pub fn look_at(eye: Vector3<f64>, target: Vector3<f64>) -> Self {
        let forward = (target - eye).normalize();
        let mut up = Vector3::y();
        if forward.cross(&up).norm() < 1e-9 {
            up = Vector3::z();
        }
        let right = forward.cross(&up).normalize();
        let down = forward.cross(&right);
        Self {
            rotation: Matrix3::from_columns(&[right, down, forward]),
            translation: eye,
        }
    }

    pub fn center(&self) -> Vector3<f64> {
        self.translation
    }

    pub fn forward(&self) -> Vector3<f64> {
        self.rotation.column(2).into_owned()
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &CameraPose) -> CameraPose {
        CameraPose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> CameraPose {
        let rt = self.rotation.transpose();
        CameraPose {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// Rounds every entry to the nearest `f32`, so the pose survives the
    /// dataset container unchanged.
    pub fn quantized(&self) -> CameraPose {
        CameraPose {
            rotation: self.rotation.map(|v| v as f32 as f64),
            translation: self.translation.map(|v| v as f32 as f64),
        }
    }

    /// `‖RᵀR − I‖∞`.
    pub fn orthonormality_error(&self) -> f64 {
        (self.rotation.transpose() * self.rotation - Matrix3::identity()).abs().max()
    }

    /// Row-major 3×4 `[R | t]`.
    pub fn to_rows(&self) -> [f64; 12] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[(0, 0)], r[(0, 1)], r[(0, 2)], t[0],
            r[(1, 0)], r[(1, 1)], r[(1, 2)], t[1],
            r[(2, 0)], r[(2, 1)], r[(2, 2)], t[2],
        ]
    }

    pub fn from_rows(v: &[f64; 12]) -> Self {
        Self {
            rotation: Matrix3::new(v[0], v[1], v[2], v[4], v[5], v[6], v[8], v[9], v[10]),
            translation: Vector3::new(v[3], v[7], v[11]),
        }
    }

    /// Rotation by `angle` radians about the world Y axis.
    pub fn rot_y(angle: f64) -> Matrix3<f64> {
        let (s, c) = angle.sin_cos();
        Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    /// Square pixels, principal point at the image center.
    pub fn centered(focal: f64, width: usize, height: usize) -> Self {
        Self {
            fx: focal,
            fy: focal,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            width,
            height,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && (0.0..self.width as f64).contains(&self.cx)
            && (0.0..self.height as f64).contains(&self.cy);
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("invalid intrinsics {self:?}")))
        }
    }

    pub fn contains(&self, u: f64, v: f64) -> bool {
        u >= 0.0 && v >= 0.0 && u < self.width as f64 && v < self.height as f64
    }
}

/// Π: world point to pixel coordinates and camera-frame depth.
pub fn project_point(p: &Vector3<f64>, pose: &CameraPose, k: &Intrinsics) -> Result<(f64, f64, f64)> {
    let pc = pose.rotation.transpose() * (p - pose.translation);
    if pc.z <= 0.0 || !pc.z.is_finite() {
        return Err(Error::BehindCamera { z: pc.z });
    }
    Ok((k.fx * pc.x / pc.z + k.cx, k.fy * pc.y / pc.z + k.cy, pc.z))
}

/// Inverse of [`project_point`] at a given camera-frame depth.
pub fn unproject_pixel(u: f64, v: f64, depth: f64, pose: &CameraPose, k: &Intrinsics) -> Result<Vector3<f64>> {
    if depth <= 0.0 || !depth.is_finite() {
        return Err(Error::invalid(format!("unproject needs positive depth, got {depth}")));
    }
    let pc = Vector3::new((u - k.cx) / k.fx * depth, (v - k.cy) / k.fy * depth, depth);
    Ok(pose.rotation * pc + pose.translation)
}
