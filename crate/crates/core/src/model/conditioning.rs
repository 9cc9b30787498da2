use gf_numerics::Tensor;

use crate::error::{Error, Result};
use crate::worldgen::{CameraPose, Intrinsics};

/// Values per frame: 12 pose entries plus 4 normalized intrinsics.
pub const COND_DIM: usize = 16;

/// Camera path expressed relative to its first frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Conditioning {
    pub relative_poses: Vec<CameraPose>,
    pub intrinsics: Intrinsics,
}

/// `rel_n = pose_0⁻¹ ∘ pose_n`, so frame 0 is always the identity and any
/// global rigid motion of the path cancels.
pub fn make_conditioning(poses: &[CameraPose], intrinsics: &Intrinsics) -> Result<Conditioning> {
    let first = poses.first().ok_or_else(|| Error::invalid("conditioning needs at least one pose"))?;
    let inv = first.inverse();
    Ok(Conditioning {
        relative_poses: poses.iter().map(|p| inv.compose(p)).collect(),
        intrinsics: *intrinsics,
    })
}

impl Conditioning {
    pub fn len(&self) -> usize {
        self.relative_poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.relative_poses.is_empty()
    }

    /// `[N, 16]` network input.
    pub fn to_tensor(&self) -> Tensor<f32> {
        let k = &self.intrinsics;
        let (w, h) = (k.width as f64, k.height as f64);
        let mut data = Vec::with_capacity(self.len() * COND_DIM);
        for p in &self.relative_poses {
            data.extend(p.to_rows().iter().map(|&v| v as f32));
            data.extend([k.fx / w, k.fy / h, k.cx / w, k.cy / h].map(|v| v as f32));
        }
        Tensor::from_vec(&[self.len(), COND_DIM], data).expect("conditioning shape")
    }

    /// Frames `[start, end)`, re-referenced to frame `start`.
    pub fn window(&self, start: usize, end: usize) -> Result<Conditioning> {
        if start >= end || end > self.len() {
            return Err(Error::invalid(format!("window {start}..{end} outside {} frames", self.len())));
        }
        make_conditioning(&self.relative_poses[start..end], &self.intrinsics)
    }
}
