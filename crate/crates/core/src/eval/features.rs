use gf_numerics::Tensor;

use super::image::{psnr, ImageView};
use crate::error::{Error, Result};
use crate::teacher::{clip_pixels, TeacherModel};
use crate::worldgen::VideoClip;

/// Frames per teacher pass when extracting features of long clips.
pub const TEACHER_WINDOW: usize = 8;

/// Mean per-token L2 distance between final-layer teacher features.
pub fn feature_distance_pixels(a: &Tensor<f32>, b: &Tensor<f32>, teacher: &TeacherModel) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Metric(format!("clip shapes differ: {:?} vs {:?}", a.shape(), b.shape())));
    }
    let fa = teacher.extract_features_windowed(a, TEACHER_WINDOW)?;
    let fb = teacher.extract_features_windowed(b, TEACHER_WINDOW)?;
    let last = fa.layers() - 1;
    let (ya, yb) = (fa.layer(last)?, fb.layer(last)?);
    let d = ya.last_dim();
    let tokens = ya.len() / d;
    let total: f64 = ya
        .data()
        .chunks(d)
        .zip(yb.data().chunks(d))
        .map(|(u, v)| u.iter().zip(v).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum::<f64>().sqrt())
        .sum();
    Ok(total / tokens as f64)
}

pub fn teacher_feature_distance(a: &VideoClip, b: &VideoClip, teacher: &TeacherModel) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Metric(format!("frame counts differ: {} vs {}", a.len(), b.len())));
    }
    feature_distance_pixels(&clip_pixels(a)?, &clip_pixels(b)?, teacher)
}

/// `(window start, value)` pairs.
pub type Curve = Vec<(usize, f64)>;

#[derive(Debug, Clone, PartialEq)]
pub struct DriftCurves {
    pub psnr: Curve,
    pub teacher_distance: Option<Curve>,
}

/// Windowed PSNR (and teacher feature distance) against ground truth.
///
/// Point `s` averages frames `s..s + window`, so there are
/// `len − window + 1` points.
pub fn drift_curve(generated: &VideoClip, truth: &VideoClip, window: usize, teacher: Option<&TeacherModel>) -> Result<DriftCurves> {
    if generated.len() != truth.len() {
        return Err(Error::Metric(format!("clip lengths differ: {} vs {}", generated.len(), truth.len())));
    }
    if window == 0 || window > truth.len() {
        return Err(Error::Metric(format!("drift window {window} does not fit {} frames", truth.len())));
    }
    let k = truth.intrinsics();
    let per_frame: Vec<f64> = generated
        .frames
        .iter()
        .zip(&truth.frames)
        .map(|(g, t)| psnr(&ImageView::new(&g.rgb, k.height, k.width, 3)?, &ImageView::new(&t.rgb, k.height, k.width, 3)?, 1.0))
        .collect::<Result<_>>()?;
    let points = truth.len() - window + 1;
    let psnr_curve = (0..points).map(|s| (s, per_frame[s..s + window].iter().sum::<f64>() / window as f64)).collect();
    let teacher_distance = match teacher {
        None => None,
        Some(t) => {
            let (pg, pt) = (clip_pixels(generated)?, clip_pixels(truth)?);
            let curve = (0..points)
                .map(|s| Ok((s, feature_distance_pixels(&pg.slice0(s, s + window)?, &pt.slice0(s, s + window)?, t)?)))
                .collect::<Result<Curve>>()?;
            Some(curve)
        }
    };
    Ok(DriftCurves {
        psnr: psnr_curve,
        teacher_distance,
    })
}

/// Teacher feature distance over the last quarter of the frames.
pub fn final_quarter_distance(generated: &VideoClip, truth: &VideoClip, teacher: &TeacherModel) -> Result<f64> {
    if generated.len() != truth.len() || truth.len() < 4 {
        return Err(Error::Metric("final-quarter distance needs equal clips of at least 4 frames".into()));
    }
    let start = truth.len() - truth.len() / 4;
    let (pg, pt) = (clip_pixels(generated)?, clip_pixels(truth)?);
    feature_distance_pixels(&pg.slice0(start, truth.len())?, &pt.slice0(start, truth.len())?, teacher)
}
