//! The total objective, the optimizer loop and the ablation modes.

mod losses;

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use gf_numerics::{adamw_step, clip_grad_norm, gradient_check, AdamW, Bound, GradCheckOptions, GradCheckReport, Graph, OptimizerState, Real, Tensor, TensorError, Var};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::ConfigSection;
use crate::error::{Error, Result};
use crate::model::{make_conditioning, Conditioning, DiffusionArch, ForwardInput, ModelBundle, ModelConfig};
use crate::nn::patchify;
use crate::rng::rng_for;
use crate::teacher::{clip_pixels, FeatureStack, TeacherKind, TeacherModel};
use crate::worldgen::VideoClip;

pub use losses::{
    angular_loss, corrupt, fm_loss, mean_vector_norm, mse_alignment_loss, sample_noise, sample_timesteps, scale_loss, token_sq_distance,
};

/// Guards the unit normalization and cosine denominators.
pub const NORM_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossMode {
    FmOnly,
    Gf,
    /// Reserved; rejected at run time.
    GfPlus,
    MseAlign,
    ExternalCond,
}

impl LossMode {
    pub const ALL: [LossMode; 5] = [Self::FmOnly, Self::Gf, Self::GfPlus, Self::MseAlign, Self::ExternalCond];

    pub fn name(self) -> &'static str {
        match self {
            Self::FmOnly => "fm_only",
            Self::Gf => "gf",
            Self::GfPlus => "gf_plus",
            Self::MseAlign => "mse_align",
            Self::ExternalCond => "external_cond",
        }
    }

    /// Whether the objective reads teacher features of the clean frames.
    pub fn needs_targets(self) -> bool {
        matches!(self, Self::Gf | Self::MseAlign)
    }

    pub fn needs_teacher(self) -> bool {
        !matches!(self, Self::FmOnly)
    }
}

impl fmt::Display for LossMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s).ok_or_else(|| {
            let valid: Vec<&str> = Self::ALL.iter().map(|m| m.name()).collect();
            Error::Config(format!("unknown loss_mode '{s}' (valid: {})", valid.join(", ")))
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lambda_angular: f64,
    pub lambda_scale: f64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    pub loss_mode: LossMode,
    pub teacher_kind: TeacherKind,
    pub clip_norm: f64,
    /// 0 disables intermediate checkpoints.
    pub checkpoint_every: usize,
    /// NaN/Inf guards on every primitive.
    pub checked: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda_angular: 0.5,
            lambda_scale: 0.05,
            learning_rate: 5e-4,
            weight_decay: 0.01,
            batch_size: 1,
            steps: 2000,
            seed: 0,
            loss_mode: LossMode::Gf,
            teacher_kind: TeacherKind::Geometry,
            clip_norm: 1.0,
            checkpoint_every: 0,
            checked: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_angular < 0.0 || self.lambda_scale < 0.0 {
            return Err(Error::Config("alignment weights must be non-negative".into()));
        }
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::Config("train.steps and train.batch_size must be at least 1".into()));
        }
        Ok(())
    }

    /// Weights applied to the angular and scale columns in the total.
    pub fn effective_weights(&self) -> (f64, f64) {
        match self.loss_mode {
            LossMode::Gf | LossMode::GfPlus => (self.lambda_angular, self.lambda_scale),
            LossMode::MseAlign => (0.0, self.lambda_angular),
            LossMode::FmOnly | LossMode::ExternalCond => (0.0, 0.0),
        }
    }
}

/// Scalar components of one step's objective.
///
/// In `mse_align` mode the `scale` column carries the unnormalized MSE
/// alignment term and `angular` is reported without entering the total.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub fm: f64,
    pub angular: f64,
    pub scale: f64,
    pub total: f64,
    pub feature_norm_mean: f64,
}

/// Combines scalar components with the mode's weights.
pub fn total_loss(fm: f64, angular: f64, scale: f64, feature_norm_mean: f64, cfg: &TrainConfig) -> Result<LossBreakdown> {
    if cfg.loss_mode == LossMode::GfPlus {
        return Err(Error::Config("loss_mode gf_plus is reserved and not implemented".into()));
    }
    let (wa, ws) = cfg.effective_weights();
    Ok(LossBreakdown {
        fm,
        angular,
        scale,
        total: fm + wa * angular + ws * scale,
        feature_norm_mean,
    })
}

/// One clip window prepared for training.
#[derive(Debug, Clone)]
pub struct TrainItem {
    /// `[N, H, W, 3]` in model range.
    pub pixels: Tensor<f32>,
    pub cond: Conditioning,
    /// Teacher features of the clean frames.
    pub targets: Option<FeatureStack>,
}

impl TrainItem {
    pub fn from_clip(clip: &VideoClip, teacher: Option<&TeacherModel>) -> Result<Self> {
        Ok(Self {
            pixels: clip_pixels(clip)?,
            cond: make_conditioning(&clip.poses(), &clip.intrinsics())?,
            targets: teacher.map(|t| t.extract_features(&clip_pixels(clip)?)).transpose()?,
        })
    }
}

/// Per-item randomness of one step.
#[derive(Debug, Clone)]
pub struct StepNoise {
    pub t: Vec<f64>,
    pub eps: Tensor<f32>,
}

impl StepNoise {
    pub fn draw<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Self {
        let t = sample_timesteps(shape[0], rng);
        let eps = sample_noise(shape, rng);
        Self { t, eps }
    }
}

pub struct ObjectiveVars {
    pub total: Var,
    pub fm: Var,
    pub angular: Option<Var>,
    pub scale: Option<Var>,
    pub projected: Var,
}

/// Builds the full objective for one item on `g`.
///
/// `external` supplies teacher features of `x_t` for `external_cond`.
pub fn objective<T: Real>(
    arch: &DiffusionArch,
    g: &mut Graph<T>,
    p: &Bound,
    item: &TrainItem,
    noise: &StepNoise,
    cfg: &TrainConfig,
    external: Option<&Tensor<f32>>,
) -> Result<ObjectiveVars> {
    let mode = cfg.loss_mode;
    if mode == LossMode::GfPlus {
        return Err(Error::Config("loss_mode gf_plus is reserved and not implemented".into()));
    }
    if mode == LossMode::ExternalCond && external.is_none() {
        return Err(Error::invalid("external_cond needs teacher features of x_t"));
    }
    let x_t = corrupt(&item.pixels, &noise.t, &noise.eps)?;
    let input = ForwardInput {
        x_t: &x_t,
        t: &noise.t,
        cond: &item.cond,
        external: if mode == LossMode::ExternalCond { external } else { None },
    };
    let out = arch.forward(g, p, &input)?;
    let patch = arch.cfg.patch;
    let fm = fm_loss(g, out.velocity, &patchify(&item.pixels, patch)?, &patchify(&noise.eps, patch)?)?;
    let projected = arch.project_features(g, p, out.hidden)?;

    let y = item.targets.as_ref().map(|f| f.values());
    let (angular, scale) = match y {
        Some(y) => {
            let ang = angular_loss(g, y, projected, NORM_EPS)?;
            let sc = if mode == LossMode::MseAlign {
                mse_alignment_loss(g, y, projected)?
            } else {
                let (_, y_tilde) = arch.normalize_and_scale(g, p, projected, NORM_EPS)?;
                scale_loss(g, y, y_tilde)?
            };
            (Some(ang), Some(sc))
        }
        None if mode.needs_targets() => return Err(Error::invalid(format!("{mode} needs teacher targets"))),
        None => (None, None),
    };
    let (wa, ws) = cfg.effective_weights();
    let mut total = fm;
    if mode.needs_targets() {
        let (a, s) = (angular.expect("targets present"), scale.expect("targets present"));
        if mode == LossMode::Gf {
            let a = g.scale(a, wa)?;
            total = g.add(total, a)?;
        }
        let s = g.scale(s, ws)?;
        total = g.add(total, s)?;
    }
    Ok(ObjectiveVars {
        total,
        fm,
        angular,
        scale,
        projected,
    })
}

fn read_breakdown<T: Real>(g: &Graph<T>, v: &ObjectiveVars) -> LossBreakdown {
    let val = |x: Option<Var>| x.map(|x| g.value(x).item().to_f64()).unwrap_or(0.0);
    LossBreakdown {
        fm: val(Some(v.fm)),
        angular: val(v.angular),
        scale: val(v.scale),
        total: val(Some(v.total)),
        feature_norm_mean: mean_vector_norm(&g.value(v.projected).cast()),
    }
}

/// Teacher features of the corrupted input, for `external_cond`.
pub fn external_features(teacher: &TeacherModel, x_t: &Tensor<f32>) -> Result<Tensor<f32>> {
    let y = teacher.extract_features(x_t)?;
    y.layer(y.layers() - 1)
}

/// Finite-difference check of the full objective in `f64` at the bundle's
/// current parameters.
pub fn objective_gradient_check(
    bundle: &ModelBundle,
    item: &TrainItem,
    noise: &StepNoise,
    cfg: &TrainConfig,
    external: Option<&Tensor<f32>>,
    opts: GradCheckOptions,
) -> Result<GradCheckReport> {
    let params = bundle.params.cast::<f64>();
    let f = |g: &mut Graph<f64>, p: &Bound| -> gf_numerics::Result<Var> {
        objective(&bundle.arch, g, p, item, noise, cfg, external)
            .map(|v| v.total)
            .map_err(|e| TensorError::Params(e.to_string()))
    };
    Ok(gradient_check(f, &params, opts)?)
}

/// Forward, backward and one AdamW update over θ ∪ φ ∪ φ′.
pub fn train_step(
    bundle: &mut ModelBundle,
    state: &mut OptimizerState<f32>,
    batch: &[(&TrainItem, StepNoise)],
    teacher: Option<&TeacherModel>,
    cfg: &TrainConfig,
) -> Result<LossBreakdown> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let step = state.step as usize;
    let mut g = if cfg.checked { Graph::<f32>::checked() } else { Graph::<f32>::new() };
    let p = bundle.params.bind(&mut g, true);
    let mut parts = Vec::with_capacity(batch.len());
    let mut sum: Option<Var> = None;
    for (item, noise) in batch {
        let ext = if cfg.loss_mode == LossMode::ExternalCond {
            let t = teacher.ok_or_else(|| Error::invalid("external_cond needs a teacher"))?;
            Some(external_features(t, &corrupt(&item.pixels, &noise.t, &noise.eps)?)?)
        } else {
            None
        };
        let vars = objective(&bundle.arch, &mut g, &p, item, noise, cfg, ext.as_ref()).map_err(|e| match e {
            Error::Tensor(gf_numerics::TensorError::NonFinite { op }) => Error::Diverged {
                step,
                detail: format!("non-finite value in {op}"),
            },
            other => other,
        })?;
        parts.push(read_breakdown(&g, &vars));
        sum = Some(match sum {
            None => vars.total,
            Some(s) => g.add(s, vars.total)?,
        });
    }
    let loss = g.scale(sum.expect("nonempty batch"), 1.0 / batch.len() as f64)?;
    let b = batch.len() as f64;
    let mut out = LossBreakdown::default();
    for pb in &parts {
        out.fm += pb.fm / b;
        out.angular += pb.angular / b;
        out.scale += pb.scale / b;
        out.feature_norm_mean += pb.feature_norm_mean / b;
    }
    out.total = g.value(loss).item() as f64;
    if !out.total.is_finite() {
        return Err(Error::Diverged {
            step,
            detail: format!("total loss {} (feature_norm_mean {:.4e})", out.total, out.feature_norm_mean),
        });
    }
    let grads = g.backward(loss)?;
    let mut grads = p.grads(&bundle.params, &grads);
    drop(g);
    let norm = clip_grad_norm(&mut grads, cfg.clip_norm);
    if !norm.is_finite() {
        return Err(Error::Diverged {
            step,
            detail: format!("gradient norm {norm} (feature_norm_mean {:.4e})", out.feature_norm_mean),
        });
    }
    let hp = AdamW {
        lr: cfg.learning_rate,
        weight_decay: cfg.weight_decay,
        ..AdamW::default()
    };
    adamw_step(&mut bundle.params, &grads, state, &hp)?;
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRow {
    pub step: usize,
    pub breakdown: LossBreakdown,
    pub wall_ms: u64,
}

pub const LOSS_LOG_HEADER: &str = "step,fm,angular,scale,total,feature_norm_mean,wall_ms";

impl LossRow {
    pub fn csv(&self) -> String {
        let b = &self.breakdown;
        format!(
            "{},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{}",
            self.step, b.fm, b.angular, b.scale, b.total, b.feature_norm_mean, self.wall_ms
        )
    }
}

pub fn loss_log_csv(rows: &[LossRow]) -> String {
    let mut s = String::from(LOSS_LOG_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.csv());
        s.push('\n');
    }
    s
}

pub struct TrainOutput {
    pub bundle: ModelBundle,
    pub optimizer: OptimizerState<f32>,
    pub log: Vec<LossRow>,
}

/// Called with `(step, bundle, optimizer)` every `checkpoint_every` steps.
pub type CheckpointHook<'a> = dyn FnMut(usize, &ModelBundle, &OptimizerState<f32>) -> Result<()> + 'a;

/// Full run: shuffled clip batches, `cfg.steps` updates.
pub fn train_run(
    clips: &[VideoClip],
    teacher: Option<&TeacherModel>,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    mut on_checkpoint: Option<&mut CheckpointHook<'_>>,
) -> Result<TrainOutput> {
    cfg.validate()?;
    if clips.is_empty() {
        return Err(Error::invalid("training needs at least one clip"));
    }
    if cfg.loss_mode == LossMode::GfPlus {
        return Err(Error::Config("loss_mode gf_plus is reserved and not implemented".into()));
    }
    if cfg.loss_mode.needs_teacher() && teacher.is_none() {
        return Err(Error::Config(format!("loss_mode {} needs a teacher checkpoint", cfg.loss_mode)));
    }
    let mut bundle = ModelBundle::init(model_cfg, rng_for(cfg.seed, "model").random())?;
    let mut state = OptimizerState::new(&bundle.params);
    let window = model_cfg.window;
    let target_teacher = if cfg.loss_mode.needs_targets() { teacher } else { None };
    let items: Vec<TrainItem> = clips
        .par_iter()
        .map(|c| {
            let c = truncate_clip(c, window);
            TrainItem::from_clip(&c, target_teacher)
        })
        .collect::<Result<_>>()?;

    let mut order_rng: ChaCha8Rng = rng_for(cfg.seed, "train/order");
    let mut noise_rng: ChaCha8Rng = rng_for(cfg.seed, "train/noise");
    let mut order: Vec<usize> = Vec::new();
    let mut log = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let started = Instant::now();
        let mut batch = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            if order.is_empty() {
                order = (0..items.len()).collect();
                order.shuffle(&mut order_rng);
            }
            let item = &items[order.pop().expect("refilled")];
            let noise = StepNoise::draw(item.pixels.shape(), &mut noise_rng);
            batch.push((item, noise));
        }
        let breakdown = train_step(&mut bundle, &mut state, &batch, teacher, cfg)?;
        log.push(LossRow {
            step,
            breakdown,
            wall_ms: started.elapsed().as_millis() as u64,
        });
        if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 {
            if let Some(hook) = on_checkpoint.as_deref_mut() {
                hook(step + 1, &bundle, &state)?;
            }
        }
        if step % 100 == 0 {
            log::debug!("step {step} {breakdown:?}");
        }
    }
    Ok(TrainOutput {
        bundle,
        optimizer: state,
        log,
    })
}

/// First `window` frames of a clip.
pub fn truncate_clip(clip: &VideoClip, window: usize) -> VideoClip {
    let mut c = clip.clone();
    c.frames.truncate(window.max(1));
    c
}

impl ConfigSection for TrainConfig {
    fn prefix(&self) -> &'static str {
        "train"
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("lambda_angular", self.lambda_angular.to_string()),
            ("lambda_scale", self.lambda_scale.to_string()),
            ("learning_rate", self.learning_rate.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("steps", self.steps.to_string()),
            ("loss_mode", self.loss_mode.to_string()),
            ("teacher_kind", self.teacher_kind.to_string()),
            ("clip_norm", self.clip_norm.to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
        ]
    }

    fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        use crate::config::parse_value as pv;
        match key {
            "lambda_angular" => self.lambda_angular = pv(key, value)?,
            "lambda_scale" => self.lambda_scale = pv(key, value)?,
            "learning_rate" => self.learning_rate = pv(key, value)?,
            "weight_decay" => self.weight_decay = pv(key, value)?,
            "batch_size" => self.batch_size = pv(key, value)?,
            "steps" => self.steps = pv(key, value)?,
            "loss_mode" => self.loss_mode = value.trim().parse()?,
            "teacher_kind" => self.teacher_kind = value.trim().parse()?,
            "clip_norm" => self.clip_norm = pv(key, value)?,
            "checkpoint_every" => self.checkpoint_every = pv(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}
