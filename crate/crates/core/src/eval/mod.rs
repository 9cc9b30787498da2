//! Consistency, image-quality and feature-space metrics plus the report
//! format they are written in.

mod features;
mod geometry;
mod image;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::config::{join_list, parse_list, ConfigSection};
use crate::error::{Error, Result};
use crate::model::ModelBundle;
use crate::sampling::{DiffusionFeatures, FeatureSpace};
use crate::teacher::{train_depth_probe, ProbeConfig, ProbeReport};
use crate::worldgen::VideoClip;

pub use features::{drift_curve, feature_distance_pixels, final_quarter_distance, teacher_feature_distance, Curve, DriftCurves, TEACHER_WINDOW};
pub use geometry::{reprojection_error, revisit_error, RevisitError, VISIBILITY_TOLERANCE};
pub use image::{mse, psnr, psnr_from_mse, ssim, ImageView, PSNR_CAP, SSIM_STRIDE, SSIM_WINDOW};

/// Names accepted in `eval.metrics`.
pub const METRIC_NAMES: [&str; 6] = ["psnr", "ssim", "rpe", "rve", "tfd", "probe_rmse"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub run: String,
    pub config_hash: String,
    pub seed: u64,
    /// Seconds since the Unix epoch; 0 in checked mode.
    pub timestamp: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub scalars: BTreeMap<String, f64>,
    pub curves: BTreeMap<String, Curve>,
    pub meta: ReportMeta,
}

impl MetricsReport {
    pub fn new(meta: ReportMeta) -> Self {
        Self {
            scalars: BTreeMap::new(),
            curves: BTreeMap::new(),
            meta,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in &self.scalars {
            if !v.is_finite() {
                return Err(Error::Metric(format!("scalar {name} is {v}")));
            }
        }
        for (name, c) in &self.curves {
            if c.windows(2).any(|w| w[1].0 <= w[0].0) {
                return Err(Error::Metric(format!("curve {name} is not increasing in frame index")));
            }
        }
        Ok(())
    }

    /// One JSON object, no trailing newline.
    pub fn to_json_line(&self) -> Result<String> {
        self.validate()?;
        serde_json::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn from_json_line(line: &str) -> Result<Self> {
        let r: Self = serde_json::from_str(line).map_err(|e| Error::Format(e.to_string()))?;
        r.validate()?;
        Ok(r)
    }

    /// Base name for files belonging to this report.
    pub fn file_stem(&self) -> String {
        let hash = &self.meta.config_hash[..self.meta.config_hash.len().min(12)];
        format!("{}-{hash}-s{}", self.meta.run, self.meta.seed)
    }
}

pub fn curve_csv(curve: &Curve) -> String {
    let mut s = String::from("frame_index,value\n");
    for (i, v) in curve {
        s.push_str(&format!("{i},{v:.9e}\n"));
    }
    s
}

/// Held-out probe RMSEs of two bundles under identical probe training.
#[derive(Debug, Clone)]
pub struct ProbeComparison {
    pub a: ProbeReport,
    pub b: ProbeReport,
}

/// Held-out report of a fresh probe on a bundle's frozen tapped hidden state.
pub fn hidden_probe(bundle: &ModelBundle, clips: &[VideoClip], cfg: &ProbeConfig, t_read: f64, seed: u64) -> Result<ProbeReport> {
    let source = DiffusionFeatures {
        bundle,
        t_read,
        space: FeatureSpace::Hidden,
        noise_seed: seed,
    };
    train_depth_probe(&source, clips, cfg, seed).map(|(_, report)| report)
}

/// Trains one fresh probe per bundle on its frozen tapped hidden state.
pub fn probe_comparison(
    a: &ModelBundle,
    b: &ModelBundle,
    clips: &[VideoClip],
    cfg: &ProbeConfig,
    t_read: f64,
    seed: u64,
) -> Result<ProbeComparison> {
    if !a.config().same_architecture(b.config()) || a.config().tap_layer != b.config().tap_layer {
        return Err(Error::Config("probe comparison needs bundles with the same architecture and tap layer".into()));
    }
    Ok(ProbeComparison {
        a: hidden_probe(a, clips, cfg, t_read, seed)?,
        b: hidden_probe(b, clips, cfg, t_read, seed)?,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub metrics: Vec<String>,
    pub pair_stride: usize,
    pub sample_count: usize,
    pub revisit_clips: usize,
    pub drift_window: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            metrics: METRIC_NAMES.iter().map(|s| s.to_string()).collect(),
            pair_stride: 4,
            sample_count: 256,
            revisit_clips: 20,
            drift_window: 8,
        }
    }
}

impl EvalConfig {
    pub fn wants(&self, metric: &str) -> bool {
        self.metrics.iter().any(|m| m == metric)
    }
}

impl ConfigSection for EvalConfig {
    fn prefix(&self) -> &'static str {
        "eval"
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("metrics", join_list(&self.metrics)),
            ("pair_stride", self.pair_stride.to_string()),
            ("sample_count", self.sample_count.to_string()),
            ("revisit_clips", self.revisit_clips.to_string()),
            ("drift_window", self.drift_window.to_string()),
        ]
    }

    fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        use crate::config::parse_value as pv;
        match key {
            "metrics" => {
                let list: Vec<String> = parse_list(key, value)?;
                if let Some(bad) = list.iter().find(|m| !METRIC_NAMES.contains(&m.as_str())) {
                    return Err(Error::Config(format!("unknown metric '{bad}' (valid: {})", METRIC_NAMES.join(", "))));
                }
                self.metrics = list;
            }
            "pair_stride" => self.pair_stride = pv(key, value)?,
            "sample_count" => self.sample_count = pv(key, value)?,
            "revisit_clips" => self.revisit_clips = pv(key, value)?,
            "drift_window" => self.drift_window = pv(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}
