//! Depth probes trained on frozen features.

use gf_numerics::{adamw_step, clip_grad_norm, AdamW, Graph, OptimizerState, ParamBuilder, ParameterSet, Tensor, Var};
use rand::Rng;
use rayon::prelude::*;

use super::{depth_targets, masked_mse, split_clips, TeacherModel};
use crate::error::{Error, Result};
use crate::nn::Mlp;
use crate::rng::rng_for;
use crate::worldgen::VideoClip;

/// Frozen per-token features for a clip, `[N, P, C]`.
pub trait FeatureSource: Sync {
    fn features(&self, clip: &VideoClip) -> Result<Tensor<f32>>;
    /// Identifies the producing model and layer; probes refuse features from another source.
    fn tag(&self) -> String;
}

/// One tapped layer of a teacher.
pub struct TeacherLayer<'a> {
    pub teacher: &'a TeacherModel,
    /// 0-based index into the feature stack.
    pub layer: usize,
}

impl FeatureSource for TeacherLayer<'_> {
    fn features(&self, clip: &VideoClip) -> Result<Tensor<f32>> {
        let y = self.teacher.extract_features_windowed(&super::clip_pixels(clip)?, 8)?;
        y.layer(self.layer)
    }

    fn tag(&self) -> String {
        format!("teacher:{}:layer{}", self.teacher.kind(), self.layer)
    }
}

/// The same vector for every token.
pub struct ConstantFeatures {
    pub dim: usize,
    pub patches: usize,
}

impl FeatureSource for ConstantFeatures {
    fn features(&self, clip: &VideoClip) -> Result<Tensor<f32>> {
        Ok(Tensor::ones(&[clip.len(), self.patches, self.dim]))
    }

    fn tag(&self) -> String {
        "constant".into()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeConfig {
    pub hidden: usize,
    pub steps: usize,
    pub lr: f64,
    pub heldout_fraction: f64,
    pub patch: usize,
    /// Predicted cells per patch side; each cell is upsampled by nearest neighbour.
    pub cells_per_side: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            steps: 600,
            lr: 1e-3,
            heldout_fraction: 0.25,
            patch: 4,
            cells_per_side: 4,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.cells_per_side == 0 || self.patch % self.cells_per_side != 0 || self.steps == 0 || self.hidden == 0 {
            return Err(Error::Config(format!(
                "probe needs steps >= 1, hidden >= 1 and cells_per_side dividing patch {}",
                self.patch
            )));
        }
        if !(0.0..1.0).contains(&self.heldout_fraction) {
            return Err(Error::Config("probe.heldout_fraction must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct DepthProbe {
    pub mlp: Mlp,
    pub params: ParameterSet<f32>,
    /// Per-channel standardization fitted on the training features.
    pub feature_mean: Vec<f32>,
    pub feature_std: Vec<f32>,
    pub upsample: Tensor<f32>,
    pub source_tag: String,
    pub patch: usize,
}

/// `[cells², patch²]` 0/1 matrix copying each cell to the pixels it covers.
fn upsample_matrix(patch: usize, cells: usize) -> Tensor<f32> {
    let ratio = patch / cells;
    let mut m = vec![0f32; cells * cells * patch * patch];
    for py in 0..patch {
        for px in 0..patch {
            let c = (py / ratio) * cells + px / ratio;
            m[c * patch * patch + py * patch + px] = 1.0;
        }
    }
    Tensor::from_vec(&[cells * cells, patch * patch], m).expect("upsample shape")
}

impl DepthProbe {
    fn standardize(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        let c = x.last_dim();
        if c != self.feature_mean.len() {
            return Err(Error::invalid(format!("probe expects {} channels, got {c}", self.feature_mean.len())));
        }
        let mut out = x.clone();
        for row in out.data_mut().chunks_mut(c) {
            for ((v, m), s) in row.iter_mut().zip(&self.feature_mean).zip(&self.feature_std) {
                *v = (*v - m) / s;
            }
        }
        Ok(out)
    }

    fn forward(&self, g: &mut Graph<f32>, p: &gf_numerics::Bound, x: &Tensor<f32>) -> Result<Var> {
        let x = g.constant(self.standardize(x)?);
        let cells = self.mlp.forward(g, p, x)?;
        let up = g.constant(self.upsample.clone());
        Ok(g.matmul(cells, up)?)
    }

    /// Log-depth in patch layout, `[N, P, patch²]`.
    pub fn predict_log_depth(&self, features: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let out = self.forward(&mut g, &p, features)?;
        Ok(g.value(out).clone())
    }
}

/// Positive depth maps `[N, H, W]` from features `[N, P, C]` tagged `source_tag`.
pub fn probe_depth(probe: &DepthProbe, features: &Tensor<f32>, source_tag: &str, height: usize, width: usize) -> Result<Tensor<f32>> {
    if source_tag != probe.source_tag {
        return Err(Error::invalid(format!(
            "probe trained on '{}' cannot read '{source_tag}'",
            probe.source_tag
        )));
    }
    let logd = probe.predict_log_depth(features)?;
    let depth = logd.map(|v| v.exp());
    let n = features.shape()[0];
    let img = crate::nn::unpatchify(&depth.reshape(&[n, features.shape()[1], probe.patch * probe.patch])?, probe.patch, height, width, 1)?;
    Ok(img.reshape(&[n, height, width])?)
}

/// Masked RMSE between `log(pred)` and ground-truth log-depth over non-sky pixels.
pub fn masked_log_rmse(pred_depth: &[f32], clip: &VideoClip) -> f64 {
    let (mut se, mut count) = (0.0, 0usize);
    for (f, chunk) in clip.frames.iter().zip(pred_depth.chunks(f_len(clip))) {
        for (&d, &p) in f.depth.iter().zip(chunk) {
            if d.is_finite() && d > 0.0 {
                let e = (p.ln() - d.ln()) as f64;
                se += e * e;
                count += 1;
            }
        }
    }
    (se / count.max(1) as f64).sqrt()
}

fn f_len(clip: &VideoClip) -> usize {
    clip.frames[0].depth.len()
}

/// Held-out RMSE of the best constant log-depth fitted on `train`.
pub fn constant_baseline_rmse(train: &[&VideoClip], heldout: &[&VideoClip]) -> f64 {
    let logs = |clips: &[&VideoClip]| -> Vec<f64> {
        clips
            .iter()
            .flat_map(|c| c.frames.iter().flat_map(|f| f.depth.iter()))
            .filter(|d| d.is_finite() && **d > 0.0)
            .map(|&d| (d as f64).ln())
            .collect()
    };
    let tr = logs(train);
    let mean = tr.iter().sum::<f64>() / tr.len().max(1) as f64;
    let ho = logs(heldout);
    (ho.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / ho.len().max(1) as f64).sqrt()
}

/// Precomputed supervision for one clip.
pub struct DepthTargets {
    pub features: Tensor<f32>,
    pub log_depth: Tensor<f32>,
    pub mask: Tensor<f32>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeRow {
    pub step: usize,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeReport {
    pub source_tag: String,
    pub train_rmse: f64,
    pub heldout_rmse: f64,
    pub constant_rmse: f64,
    pub log: Vec<ProbeRow>,
}

fn rmse_over(probe: &DepthProbe, items: &[DepthTargets]) -> Result<f64> {
    let (mut se, mut count) = (0.0, 0.0);
    for it in items {
        let pred = probe.predict_log_depth(&it.features)?;
        for ((&p, &t), &m) in pred.data().iter().zip(it.log_depth.data()).zip(it.mask.data()) {
            se += (m * (p - t) * (p - t)) as f64;
            count += m as f64;
        }
    }
    Ok((se / count.max(1.0)).sqrt())
}

/// Fits a fresh probe on the training split; the feature source is never updated.
pub fn train_depth_probe(source: &dyn FeatureSource, clips: &[VideoClip], cfg: &ProbeConfig, seed: u64) -> Result<(DepthProbe, ProbeReport)> {
    cfg.validate()?;
    if clips.len() < 2 {
        return Err(Error::invalid("probe training needs at least two clips"));
    }
    let (train, heldout) = split_clips(clips, cfg.heldout_fraction);
    let prepare = |c: &&VideoClip| -> Result<DepthTargets> {
        let (log_depth, mask) = depth_targets(c, cfg.patch)?;
        Ok(DepthTargets {
            features: source.features(c)?,
            log_depth,
            mask,
        })
    };
    let train_items: Vec<DepthTargets> = train.par_iter().map(prepare).collect::<Result<_>>()?;
    let held_items: Vec<DepthTargets> = heldout.par_iter().map(prepare).collect::<Result<_>>()?;

    let c = train_items[0].features.last_dim();
    let mut mean = vec![0f64; c];
    let mut sq = vec![0f64; c];
    let mut rows = 0usize;
    for it in &train_items {
        for row in it.features.data().chunks(c) {
            for (k, &v) in row.iter().enumerate() {
                mean[k] += v as f64;
                sq[k] += (v as f64) * (v as f64);
            }
            rows += 1;
        }
    }
    let feature_mean: Vec<f32> = mean.iter().map(|m| (m / rows as f64) as f32).collect();
    let feature_std: Vec<f32> = sq
        .iter()
        .zip(&mean)
        .map(|(s, m)| {
            let mu = m / rows as f64;
            ((s / rows as f64 - mu * mu).max(0.0).sqrt() as f32).max(1e-6)
        })
        .collect();

    let mut params = ParameterSet::new();
    let mut init_rng = rng_for(seed, "probe/init");
    let cells = cfg.cells_per_side * cfg.cells_per_side;
    let mlp = Mlp::new(&mut ParamBuilder::new(&mut params), "probe", [c, cfg.hidden, cells], &mut init_rng)?;
    let mut probe = DepthProbe {
        mlp,
        params,
        feature_mean,
        feature_std,
        upsample: upsample_matrix(cfg.patch, cfg.cells_per_side),
        source_tag: source.tag(),
        patch: cfg.patch,
    };
    let hp = AdamW {
        lr: cfg.lr,
        ..AdamW::default()
    };
    let mut state = OptimizerState::new(&probe.params);
    let mut rng = rng_for(seed, "probe/batches");
    let mut log = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let it = &train_items[rng.random_range(0..train_items.len())];
        let mut g = Graph::<f32>::new();
        let p = probe.params.bind(&mut g, true);
        let pred = probe.forward(&mut g, &p, &it.features)?;
        let loss = masked_mse(&mut g, pred, &it.log_depth, &it.mask)?;
        let value = g.value(loss).item() as f64;
        if !value.is_finite() {
            return Err(Error::Diverged {
                step,
                detail: format!("probe loss {value}"),
            });
        }
        let grads = g.backward(loss)?;
        let mut grads = p.grads(&probe.params, &grads);
        drop(g);
        clip_grad_norm(&mut grads, 1.0);
        adamw_step(&mut probe.params, &grads, &mut state, &hp)?;
        log.push(ProbeRow { step, loss: value });
    }
    let report = ProbeReport {
        source_tag: probe.source_tag.clone(),
        train_rmse: rmse_over(&probe, &train_items)?,
        heldout_rmse: rmse_over(&probe, &held_items)?,
        constant_rmse: constant_baseline_rmse(&train, &heldout),
        log,
    };
    Ok((probe, report))
}
