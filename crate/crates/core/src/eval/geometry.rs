use rand::Rng;

use super::image::{mse, psnr_from_mse, ImageView};
use crate::error::{Error, Result};
use crate::worldgen::{project_point, unproject_pixel, TrajectoryKind, VideoClip};

/// Relative depth slack when testing that a correspondence is not occluded.
pub const VISIBILITY_TOLERANCE: f64 = 0.03;

/// Mean distance in pixels between ground-truth correspondences and
/// reprojections of points lifted with `pred_depth`.
///
/// `pred_depth` holds `[N, H, W]` values; frame `i` is paired with
/// `i + pair_stride`. Correspondences come from the clip's own geometry,
/// so `clip` must carry ground-truth depth and point maps.
pub fn reprojection_error<R: Rng + ?Sized>(
    clip: &VideoClip,
    pred_depth: &[f32],
    pair_stride: usize,
    sample_count: usize,
    rng: &mut R,
) -> Result<f64> {
    let k = clip.intrinsics();
    let hw = k.width * k.height;
    if pred_depth.len() != clip.len() * hw {
        return Err(Error::Metric(format!("{} depth values for {} frames of {hw} pixels", pred_depth.len(), clip.len())));
    }
    if pair_stride == 0 || pair_stride >= clip.len() {
        return Err(Error::Metric(format!("pair_stride {pair_stride} leaves no frame pairs in {} frames", clip.len())));
    }
    let (mut sum, mut valid) = (0.0, 0usize);
    for i in 0..clip.len() - pair_stride {
        let (fi, fj) = (&clip.frames[i], &clip.frames[i + pair_stride]);
        let candidates: Vec<usize> = (0..hw).filter(|&px| !fi.is_sky(px)).collect();
        if candidates.is_empty() {
            continue;
        }
        for _ in 0..sample_count {
            let px = candidates[rng.random_range(0..candidates.len())];
            let (u, v) = ((px % k.width) as f64 + 0.5, (px / k.width) as f64 + 0.5);
            let d = pred_depth[i * hw + px] as f64;
            if !(d.is_finite() && d > 0.0) {
                return Err(Error::Metric(format!("predicted depth {d} at frame {i} pixel {px} is not positive")));
            }
            let Ok((us, vs, zs)) = project_point(&fi.point(px), &fj.pose, &k) else { continue };
            if !k.contains(us, vs) {
                continue;
            }
            let target = (vs.floor() as usize) * k.width + us.floor() as usize;
            let seen = fj.depth[target] as f64;
            if !seen.is_finite() || (seen - zs).abs() > VISIBILITY_TOLERANCE * zs {
                continue;
            }
            let lifted = unproject_pixel(u, v, d, &fi.pose, &k)?;
            let Ok((up, vp, _)) = project_point(&lifted, &fj.pose, &k) else { continue };
            sum += ((up - us).powi(2) + (vp - vs).powi(2)).sqrt();
            valid += 1;
        }
    }
    if valid == 0 {
        return Err(Error::Metric("no valid correspondences for reprojection error".into()));
    }
    Ok(sum / valid as f64)
}

/// First-vs-last frame discrepancy of a revisit clip.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RevisitError {
    pub mse: f64,
    pub psnr: f64,
}

pub fn revisit_error(clip: &VideoClip) -> Result<RevisitError> {
    if clip.trajectory_kind != TrajectoryKind::Revisit {
        return Err(Error::Metric(format!("revisit error needs a revisit clip, got {}", clip.trajectory_kind)));
    }
    if clip.len() < 2 {
        return Err(Error::Metric("revisit error needs at least two frames".into()));
    }
    let k = clip.intrinsics();
    let first = ImageView::new(&clip.frames[0].rgb, k.height, k.width, 3)?;
    let last = ImageView::new(&clip.frames[clip.len() - 1].rgb, k.height, k.width, 3)?;
    let m = mse(&first, &last)?;
    Ok(RevisitError { mse: m, psnr: psnr_from_mse(m, 1.0) })
}
