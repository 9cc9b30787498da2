//! Frozen geometry teacher: a small alternating-attention encoder trained to
//! regress log-depth, whose tapped activations form the alignment targets.

mod probe;

use std::fmt;
use std::str::FromStr;

use gf_numerics::{adamw_step, clip_grad_norm, AdamW, Bound, Checkpoint, Graph, OptimizerState, ParamBuilder, ParameterSet, Real, RoleTag, Tensor, Var};
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{patchify, Block, LayerNorm, Linear};
use crate::rng::rng_for;
use crate::worldgen::VideoClip;

pub use probe::{
    constant_baseline_rmse, masked_log_rmse, probe_depth, train_depth_probe, ConstantFeatures, DepthProbe, DepthTargets, FeatureSource,
    ProbeConfig, ProbeReport, ProbeRow, TeacherLayer,
};

/// Which frames an attention block mixes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttnScope {
    Frame,
    Global,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TeacherKind {
    /// Supervised on log-depth.
    Geometry,
    /// Supervised on RGB reconstruction only.
    Appearance,
    /// Never trained.
    Random,
}

impl TeacherKind {
    pub fn role(self) -> RoleTag {
        match self {
            Self::Geometry => RoleTag(*b"TCHR"),
            Self::Appearance => RoleTag(*b"APPR"),
            Self::Random => RoleTag(*b"RAND"),
        }
    }

    pub fn from_role(role: RoleTag) -> Option<Self> {
        [Self::Geometry, Self::Appearance, Self::Random].into_iter().find(|k| k.role() == role)
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Geometry => "geometry",
            Self::Appearance => "appearance",
            Self::Random => "random",
        }
    }

    fn head_channels(self) -> usize {
        match self {
            Self::Appearance => 3,
            _ => 1,
        }
    }
}

impl fmt::Display for TeacherKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TeacherKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "geometry" => Ok(Self::Geometry),
            "appearance" => Ok(Self::Appearance),
            "random" => Ok(Self::Random),
            _ => Err(Error::Config(format!("unknown teacher kind '{s}' (geometry, appearance, random)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TeacherConfig {
    pub patch: usize,
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub layout: Vec<AttnScope>,
    /// 1-based block indices whose outputs form the feature stack.
    pub taps: Vec<usize>,
    pub steps: usize,
    pub lr: f64,
    pub heldout_fraction: f64,
    pub resolution: usize,
    pub kind: TeacherKind,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            patch: 4,
            dim: 32,
            heads: 2,
            mlp_ratio: 4,
            layout: vec![AttnScope::Frame, AttnScope::Global, AttnScope::Frame, AttnScope::Global],
            taps: vec![2, 4],
            steps: 800,
            lr: 1e-3,
            heldout_fraction: 0.25,
            resolution: 32,
            kind: TeacherKind::Geometry,
        }
    }
}

impl TeacherConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.resolution % self.patch != 0 {
            return Err(Error::Config(format!("resolution {} not divisible by patch {}", self.resolution, self.patch)));
        }
        if self.layout.is_empty() || self.taps.is_empty() {
            return Err(Error::Config("teacher needs at least one block and one tap".into()));
        }
        if !self.taps.windows(2).all(|w| w[0] < w[1]) || self.taps[0] < 1 || *self.taps.last().unwrap() > self.layout.len() {
            return Err(Error::Config(format!(
                "taps {:?} must be strictly increasing within 1..={}",
                self.taps,
                self.layout.len()
            )));
        }
        if !(0.0..1.0).contains(&self.heldout_fraction) || self.steps == 0 {
            return Err(Error::Config("teacher steps must be >= 1 and heldout_fraction in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn patches(&self) -> usize {
        (self.resolution / self.patch).pow(2)
    }

    pub fn layers(&self) -> usize {
        self.taps.len()
    }
}

/// `y[L, N, P, D]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStack(pub Tensor<f32>);

impl FeatureStack {
    pub fn values(&self) -> &Tensor<f32> {
        &self.0
    }

    pub fn layers(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn frames(&self) -> usize {
        self.0.shape()[1]
    }

    /// `[N, P, D]` slice for tapped layer `l` (0-based).
    pub fn layer(&self, l: usize) -> Result<Tensor<f32>> {
        let s = self.0.shape();
        let t = self.0.slice0(l, l + 1)?;
        Ok(t.reshape(&s[1..])?)
    }

    /// Frames `[start, end)` of every layer.
    pub fn frames_range(&self, start: usize, end: usize) -> Result<FeatureStack> {
        let s = self.0.shape().to_vec();
        let parts: Vec<Tensor<f32>> = (0..s[0])
            .map(|l| self.layer(l).and_then(|t| Ok(t.slice0(start, end)?)))
            .collect::<Result<_>>()?;
        let rows: usize = (end - start) * s[2] * s[3];
        let mut data = Vec::with_capacity(s[0] * rows);
        for p in &parts {
            data.extend_from_slice(p.data());
        }
        Ok(FeatureStack(Tensor::from_vec(&[s[0], end - start, s[2], s[3]], data)?))
    }
}

/// Architecture handles; parameter values live in [`TeacherModel::params`].
#[derive(Debug, Clone)]
pub struct TeacherArch {
    pub embed: Linear,
    pub pos: gf_numerics::ParamId,
    pub blocks: Vec<Block>,
    pub head_norm: LayerNorm,
    pub head: Linear,
    pub cfg: TeacherConfig,
    pub kind: TeacherKind,
}

impl TeacherArch {
    pub fn build<T: Real, R: Rng>(params: &mut ParameterSet<T>, cfg: &TeacherConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let kind = cfg.kind;
        let mut b = ParamBuilder::new(params);
        let tok = cfg.patch * cfg.patch * 3;
        let embed = Linear::new(&mut b, "embed", tok, cfg.dim, rng)?;
        let pos = b.add("pos", Tensor::randn(&[cfg.patches(), cfg.dim], 0.1, rng))?;
        let blocks = (0..cfg.layout.len())
            .map(|i| Block::new(&mut b, &format!("block{i}"), cfg.dim, cfg.heads, cfg.mlp_ratio, rng))
            .collect::<Result<Vec<_>>>()?;
        let head_norm = LayerNorm::new(&mut b, "head_norm", cfg.dim)?;
        let out = cfg.patch * cfg.patch * kind.head_channels();
        let head = Linear::new(&mut b, "head", cfg.dim, out, rng)?;
        if kind != TeacherKind::Appearance {
            // Log-depth of a typical floor pixel.
            let bias = params.by_id_mut(head.bias);
            *bias = Tensor::full(&[out], T::of(6f64.ln()));
        }
        Ok(Self {
            embed,
            pos,
            blocks,
            head_norm,
            head,
            cfg: cfg.clone(),
            kind,
        })
    }

    /// `tokens[N, P, patch²·3]` → (tapped activations, head output `[N, P, patch²·c]`).
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, tokens: Var) -> Result<(Vec<Var>, Var)> {
        let s = g.shape(tokens).to_vec();
        let (n, np) = (s[0], s[1]);
        let d = self.cfg.dim;
        let x = self.embed.forward(g, p, tokens)?;
        let mut x = g.add(x, p[self.pos])?;
        let mut taps = Vec::with_capacity(self.cfg.taps.len());
        for (i, (block, scope)) in self.blocks.iter().zip(&self.cfg.layout).enumerate() {
            x = match scope {
                AttnScope::Frame => block.forward(g, p, x, None)?,
                AttnScope::Global => {
                    let flat = g.reshape(x, &[1, n * np, d])?;
                    let y = block.forward(g, p, flat, None)?;
                    g.reshape(y, &[n, np, d])?
                }
            };
            if self.cfg.taps.contains(&(i + 1)) {
                taps.push(x);
            }
        }
        let h = self.head_norm.forward(g, p, x)?;
        let out = self.head.forward(g, p, h)?;
        Ok((taps, out))
    }
}

#[derive(Debug, Clone)]
pub struct TeacherModel {
    pub arch: TeacherArch,
    pub params: ParameterSet<f32>,
}

/// Pixels in `[0, 1]` mapped to the `[-1, 1]` model range, `[N, H, W, 3]`.
pub fn clip_pixels(clip: &VideoClip) -> Result<Tensor<f32>> {
    let k = clip.intrinsics();
    let mut data = Vec::with_capacity(clip.len() * k.height * k.width * 3);
    for f in &clip.frames {
        data.extend(f.rgb.iter().map(|&c| 2.0 * c - 1.0));
    }
    Ok(Tensor::from_vec(&[clip.len(), k.height, k.width, 3], data)?)
}

/// Patchified log-depth targets `[N, P, patch²]` and sky mask (1 = valid).
pub fn depth_targets(clip: &VideoClip, patch: usize) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let k = clip.intrinsics();
    let mut logd = Vec::with_capacity(clip.len() * k.height * k.width);
    let mut mask = Vec::with_capacity(logd.capacity());
    for f in &clip.frames {
        for &d in &f.depth {
            let ok = d.is_finite() && d > 0.0;
            logd.push(if ok { d.ln() } else { 0.0 });
            mask.push(if ok { 1.0 } else { 0.0 });
        }
    }
    let shape = [clip.len(), k.height, k.width, 1];
    Ok((
        patchify(&Tensor::from_vec(&shape, logd)?, patch)?,
        patchify(&Tensor::from_vec(&shape, mask)?, patch)?,
    ))
}

/// `mean(mask · (pred − target)²)` over valid entries.
pub fn masked_mse<T: Real>(g: &mut Graph<T>, pred: Var, target: &Tensor<f32>, mask: &Tensor<f32>) -> Result<Var> {
    let count = mask.sum().max(1.0) as f64;
    let t = g.constant(target.cast());
    let m = g.constant(mask.cast());
    let diff = g.sub(pred, t)?;
    let sq = g.square(diff)?;
    let masked = g.mul(sq, m)?;
    let total = g.sum(masked)?;
    Ok(g.scale(total, 1.0 / count)?)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TeacherLogRow {
    pub step: usize,
    pub loss: f64,
}

impl TeacherModel {
    /// Freshly initialized, untrained network.
    pub fn init(cfg: &TeacherConfig, seed: u64) -> Result<Self> {
        let mut params = ParameterSet::new();
        let arch = TeacherArch::build(&mut params, cfg, &mut rng_for(seed, "teacher/init"))?;
        Ok(Self { arch, params })
    }

    pub fn kind(&self) -> TeacherKind {
        self.arch.kind
    }

    pub fn config(&self) -> &TeacherConfig {
        &self.arch.cfg
    }

    fn check_resolution(&self, pixels: &Tensor<f32>) -> Result<()> {
        let s = pixels.shape();
        let r = self.arch.cfg.resolution;
        if s.len() != 4 || s[1] != r || s[2] != r || s[3] != 3 {
            return Err(Error::invalid(format!("teacher expects [N, {r}, {r}, 3] pixels, got {s:?}")));
        }
        Ok(())
    }

    fn run(&self, pixels: &Tensor<f32>) -> Result<(Vec<Tensor<f32>>, Tensor<f32>)> {
        self.check_resolution(pixels)?;
        let mut g = Graph::<f32>::new();
        let p = self.params.bind(&mut g, false);
        let tok = g.constant(patchify(pixels, self.arch.cfg.patch)?);
        let (taps, out) = self.arch.forward(&mut g, &p, tok)?;
        Ok((taps.iter().map(|&v| g.value(v).clone()).collect(), g.value(out).clone()))
    }

    /// Tapped activations for pixels `[N, H, W, 3]` in `[-1, 1]`.
    pub fn extract_features(&self, pixels: &Tensor<f32>) -> Result<FeatureStack> {
        let (taps, _) = self.run(pixels)?;
        let mut data = Vec::with_capacity(taps.len() * taps[0].len());
        for t in &taps {
            data.extend_from_slice(t.data());
        }
        let s = taps[0].shape();
        Ok(FeatureStack(Tensor::from_vec(&[taps.len(), s[0], s[1], s[2]], data)?))
    }

    /// Features of a long clip in non-overlapping windows of `window` frames.
    pub fn extract_features_windowed(&self, pixels: &Tensor<f32>, window: usize) -> Result<FeatureStack> {
        let n = pixels.shape()[0];
        let mut layers: Vec<Vec<f32>> = vec![Vec::new(); self.arch.cfg.layers()];
        let mut start = 0;
        while start < n {
            let end = (start + window.max(1)).min(n);
            let f = self.extract_features(&pixels.slice0(start, end)?)?;
            for (l, buf) in layers.iter_mut().enumerate() {
                buf.extend_from_slice(f.layer(l)?.data());
            }
            start = end;
        }
        let (p, d) = (self.arch.cfg.patches(), self.arch.cfg.dim);
        Ok(FeatureStack(Tensor::from_vec(&[layers.len(), n, p, d], layers.concat())?))
    }

    /// Raw head output, `[N, P, patch²·c]`.
    pub fn head_output(&self, pixels: &Tensor<f32>) -> Result<Tensor<f32>> {
        Ok(self.run(pixels)?.1)
    }

    /// Applies only the depth head to a stack's final layer.
    pub fn head_from_features(&self, features: &FeatureStack) -> Result<Tensor<f32>> {
        let last = features.layer(features.layers() - 1)?;
        let mut g = Graph::<f32>::new();
        let p = self.params.bind(&mut g, false);
        let x = g.constant(last);
        let h = self.arch.head_norm.forward(&mut g, &p, x)?;
        let out = self.arch.head.forward(&mut g, &p, h)?;
        Ok(g.value(out).clone())
    }

    /// Masked log-depth RMSE of the depth head over `clips`.
    pub fn depth_rmse(&self, clips: &[&VideoClip]) -> Result<f64> {
        if self.kind() != TeacherKind::Geometry {
            return Err(Error::invalid(format!("{} teacher has no depth head", self.kind())));
        }
        let (mut se, mut count) = (0.0, 0.0);
        for clip in clips {
            let out = self.head_output(&clip_pixels(clip)?)?;
            let (t, m) = depth_targets(clip, self.arch.cfg.patch)?;
            for ((&o, &t), &m) in out.data().iter().zip(t.data()).zip(m.data()) {
                se += (m * (o - t) * (o - t)) as f64;
                count += m as f64;
            }
        }
        Ok((se / count.max(1.0)).sqrt())
    }

    fn objective<T: Real>(&self, g: &mut Graph<T>, p: &Bound, clip: &VideoClip) -> Result<Var> {
        let pixels = clip_pixels(clip)?;
        let tok = patchify(&pixels, self.arch.cfg.patch)?;
        let x = g.constant(tok.cast());
        let (_, out) = self.arch.forward(g, p, x)?;
        match self.kind() {
            TeacherKind::Appearance => {
                let ones = Tensor::ones(tok.shape());
                masked_mse(g, out, &tok, &ones)
            }
            _ => {
                let (t, m) = depth_targets(clip, self.arch.cfg.patch)?;
                masked_mse(g, out, &t, &m)
            }
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            role: self.kind().role(),
            params: self.params.clone(),
            optimizer: None,
            config: Some(crate::config::section_text(&self.arch.cfg)),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let kind = TeacherKind::from_role(ck.role)
            .ok_or_else(|| Error::Format(format!("checkpoint role {} is not a teacher", ck.role.as_str())))?;
        let mut cfg = TeacherConfig::default();
        if let Some(text) = &ck.config {
            crate::config::parse_section_text(&mut cfg, text)?;
        }
        cfg.kind = kind;
        let mut model = Self::init(&cfg, 0)?;
        model.params.load_from(&ck.params)?;
        Ok(model)
    }
}

pub fn parse_layout(v: &str) -> Result<Vec<AttnScope>> {
    v.split(',')
        .map(|s| match s.trim() {
            "frame" => Ok(AttnScope::Frame),
            "global" => Ok(AttnScope::Global),
            other => Err(Error::Config(format!("unknown attention scope '{other}' (frame, global)"))),
        })
        .collect()
}

/// Deterministic train/held-out split: the last `fraction` of clips are held out.
pub fn split_clips(clips: &[VideoClip], fraction: f64) -> (Vec<&VideoClip>, Vec<&VideoClip>) {
    let held = ((clips.len() as f64) * fraction).round() as usize;
    let held = held.min(clips.len().saturating_sub(1));
    let cut = clips.len() - held;
    (clips[..cut].iter().collect(), clips[cut..].iter().collect())
}

/// Trains a teacher of kind `cfg.kind` on the training split of `clips`.
///
/// A `Random` kind returns the initialization untouched with an empty log.
pub fn pretrain_teacher(clips: &[VideoClip], cfg: &TeacherConfig, seed: u64) -> Result<(TeacherModel, Vec<TeacherLogRow>)> {
    if clips.is_empty() {
        return Err(Error::invalid("teacher pretraining needs at least one clip"));
    }
    let mut model = TeacherModel::init(cfg, seed)?;
    if cfg.kind == TeacherKind::Random {
        return Ok((model, Vec::new()));
    }
    let (train, _) = split_clips(clips, cfg.heldout_fraction);
    let hp = AdamW {
        lr: cfg.lr,
        ..AdamW::default()
    };
    let mut state = OptimizerState::new(&model.params);
    let mut rng = rng_for(seed, "teacher/batches");
    let mut log = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let clip = train[rng.random_range(0..train.len())];
        let mut g = Graph::<f32>::new();
        let p = model.params.bind(&mut g, true);
        let loss = model.objective(&mut g, &p, clip)?;
        let value = g.value(loss).item() as f64;
        if !value.is_finite() {
            return Err(Error::Diverged {
                step,
                detail: format!("teacher loss {value}"),
            });
        }
        let grads = g.backward(loss)?;
        let mut grads = p.grads(&model.params, &grads);
        drop(g);
        clip_grad_norm(&mut grads, 1.0);
        adamw_step(&mut model.params, &grads, &mut state, &hp)?;
        log.push(TeacherLogRow { step, loss: value });
    }
    Ok((model, log))
}


fn layout_name(s: &AttnScope) -> &'static str {
    match s {
        AttnScope::Frame => "frame",
        AttnScope::Global => "global",
    }
}

impl crate::config::ConfigSection for TeacherConfig {
    fn prefix(&self) -> &'static str {
        "teacher"
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        use crate::config::join_list;
        vec![
            ("kind", self.kind.to_string()),
            ("patch", self.patch.to_string()),
            ("dim", self.dim.to_string()),
            ("heads", self.heads.to_string()),
            ("mlp_ratio", self.mlp_ratio.to_string()),
            ("layout", self.layout.iter().map(layout_name).collect::<Vec<_>>().join(",")),
            ("taps", join_list(&self.taps)),
            ("steps", self.steps.to_string()),
            ("lr", self.lr.to_string()),
            ("heldout_fraction", self.heldout_fraction.to_string()),
            ("resolution", self.resolution.to_string()),
        ]
    }

    fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        use crate::config::{parse_list, parse_value as pv};
        match key {
            "kind" => self.kind = pv(key, value)?,
            "patch" => self.patch = pv(key, value)?,
            "dim" => self.dim = pv(key, value)?,
            "heads" => self.heads = pv(key, value)?,
            "mlp_ratio" => self.mlp_ratio = pv(key, value)?,
            "layout" => self.layout = parse_layout(value)?,
            "taps" => self.taps = parse_list(key, value)?,
            "steps" => self.steps = pv(key, value)?,
            "lr" => self.lr = pv(key, value)?,
            "heldout_fraction" => self.heldout_fraction = pv(key, value)?,
            "resolution" => self.resolution = pv(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

impl crate::config::ConfigSection for ProbeConfig {
    fn prefix(&self) -> &'static str {
        "probe"
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("hidden", self.hidden.to_string()),
            ("steps", self.steps.to_string()),
            ("lr", self.lr.to_string()),
            ("heldout_fraction", self.heldout_fraction.to_string()),
            ("patch", self.patch.to_string()),
            ("cells_per_side", self.cells_per_side.to_string()),
        ]
    }

    fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        use crate::config::parse_value as pv;
        match key {
            "hidden" => self.hidden = pv(key, value)?,
            "steps" => self.steps = pv(key, value)?,
            "lr" => self.lr = pv(key, value)?,
            "heldout_fraction" => self.heldout_fraction = pv(key, value)?,
            "patch" => self.patch = pv(key, value)?,
            "cells_per_side" => self.cells_per_side = pv(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}
