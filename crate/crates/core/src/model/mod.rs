//! Frame-causal video transformer predicting flow-matching velocities, with
//! the hidden-state tap, projector and scale head used for alignment.

mod conditioning;

use gf_numerics::{Bound, Checkpoint, Graph, OptimizerState, ParamBuilder, ParamId, ParameterSet, Real, RoleTag, Tensor, Var};
use rand::Rng;

use crate::config::{parse_section_text, section_text, ConfigSection};
use crate::error::{Error, Result};
use crate::nn::{frame_causal_mask, patchify, unpatchify, Block, LayerNorm, Linear, Mlp};
use crate::rng::rng_for;

pub use conditioning::{make_conditioning, Conditioning, COND_DIM};

pub const MODEL_ROLE: RoleTag = RoleTag(*b"DIFU");
pub const TIME_FEATURES: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub patch: usize,
    pub width: usize,
    pub heads: usize,
    pub blocks: usize,
    pub mlp_ratio: usize,
    /// 1-based block whose output is tapped.
    pub tap_layer: usize,
    pub resolution: usize,
    /// Frames per training window.
    pub window: usize,
    pub projector_hidden: usize,
    /// Teacher feature-stack depth `L` and width `D`.
    pub target_layers: usize,
    pub target_dim: usize,
    pub scale_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            patch: 4,
            width: 64,
            heads: 4,
            blocks: 7,
            mlp_ratio: 2,
            tap_layer: 3,
            resolution: 32,
            window: 8,
            projector_hidden: 64,
            target_layers: 2,
            target_dim: 32,
            scale_hidden: 32,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.resolution % self.patch != 0 {
            return Err(Error::Config(format!("resolution {} not divisible by patch {}", self.resolution, self.patch)));
        }
        if self.tap_layer < 1 || self.tap_layer > self.blocks {
            return Err(Error::Config(format!("model.tap_layer {} outside 1..={}", self.tap_layer, self.blocks)));
        }
        if self.window == 0 || self.target_layers == 0 || self.target_dim == 0 {
            return Err(Error::Config("model.window, model.target_layers and model.target_dim must be positive".into()));
        }
        Ok(())
    }

    pub fn patches(&self) -> usize {
        (self.resolution / self.patch).pow(2)
    }

    pub fn token_dim(&self) -> usize {
        self.patch * self.patch * 3
    }

    /// Everything except the tap position, which does not change parameters.
    pub fn same_architecture(&self, other: &ModelConfig) -> bool {
        ModelConfig {
            tap_layer: other.tap_layer,
            ..self.clone()
        } == *other
    }
}

#[derive(Debug, Clone)]
pub struct DiffusionArch {
    pub embed: Linear,
    pub pos: ParamId,
    pub time_mlp: Mlp,
    pub cam_mlp: Mlp,
    /// Injects teacher features as additive token conditioning; zero at init.
    pub ext_proj: Linear,
    pub blocks: Vec<Block>,
    pub out_norm: LayerNorm,
    pub out: Linear,
    pub projector: Mlp,
    /// Residual two-layer head; identity at init.
    pub scale_head: Mlp,
    pub cfg: ModelConfig,
}

/// Sinusoidal features of `t·1000`, `[N, 64]`.
pub fn timestep_features(t: &[f64]) -> Tensor<f32> {
    let half = TIME_FEATURES / 2;
    let mut out = Vec::with_capacity(t.len() * TIME_FEATURES);
    for &ti in t {
        let s = ti * 1000.0;
        let freqs: Vec<f64> = (0..half).map(|i| (-(10000f64).ln() * i as f64 / half as f64).exp()).collect();
        out.extend(freqs.iter().map(|f| (s * f).sin() as f32));
        out.extend(freqs.iter().map(|f| (s * f).cos() as f32));
    }
    Tensor::from_vec(&[t.len(), TIME_FEATURES], out).expect("time features")
}

/// Inputs for one forward pass over a window of `N` frames.
#[derive(Debug, Clone)]
pub struct ForwardInput<'a> {
    /// `[N, H, W, 3]` in model range.
    pub x_t: &'a Tensor<f32>,
    pub t: &'a [f64],
    pub cond: &'a Conditioning,
    /// Teacher features `[N, P, D]` for external conditioning.
    pub external: Option<&'a Tensor<f32>>,
}

pub struct ForwardOutput {
    /// Velocity in patch layout, `[N, P, patch²·3]`.
    pub velocity: Var,
    /// Output of block `tap_layer`, `[N, P, width]`.
    pub hidden: Var,
}

impl DiffusionArch {
    pub fn build<T: Real, R: Rng>(params: &mut ParameterSet<T>, cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mut b = ParamBuilder::new(params);
        let w = cfg.width;
        let mut bb = b.scope("backbone");
        let embed = Linear::new(&mut bb, "embed", cfg.token_dim(), w, rng)?;
        let pos = bb.add("pos", Tensor::randn(&[cfg.patches(), w], 0.1, rng))?;
        let time_mlp = Mlp::new(&mut bb, "time", [TIME_FEATURES, w, w], rng)?;
        let cam_mlp = Mlp::new(&mut bb, "camera", [COND_DIM, w, w], rng)?;
        let ext_proj = Linear::zeros(&mut bb, "external", cfg.target_dim, w, rng)?;
        let blocks = (0..cfg.blocks)
            .map(|i| Block::new(&mut bb, &format!("block{i}"), w, cfg.heads, cfg.mlp_ratio, rng))
            .collect::<Result<Vec<_>>>()?;
        let out_norm = LayerNorm::new(&mut bb, "out_norm", w)?;
        let out = Linear::zeros(&mut bb, "out", w, cfg.token_dim(), rng)?;
        let projector = Mlp::new(&mut b, "projector", [w, cfg.projector_hidden, cfg.target_layers * cfg.target_dim], rng)?;
        let d = cfg.target_dim;
        let scale_head = Mlp::zero_out(&mut b, "scale_head", [d, cfg.scale_hidden, d], rng)?;
        Ok(Self {
            embed,
            pos,
            time_mlp,
            cam_mlp,
            ext_proj,
            blocks,
            out_norm,
            out,
            projector,
            scale_head,
            cfg: cfg.clone(),
        })
    }

    /// The velocity path stops at block `blocks`; with `stop_at_tap` only
    /// blocks up to the tap run and `velocity` aliases `hidden`.
    fn run<T: Real>(&self, g: &mut Graph<T>, p: &Bound, input: &ForwardInput<'_>, stop_at_tap: bool) -> Result<ForwardOutput> {
        let cfg = &self.cfg;
        let s = input.x_t.shape();
        if s.len() != 4 || s[1] != cfg.resolution || s[2] != cfg.resolution || s[3] != 3 {
            return Err(Error::invalid(format!("model expects [N, {r}, {r}, 3], got {s:?}", r = cfg.resolution)));
        }
        let n = s[0];
        if input.t.len() != n || input.cond.len() != n {
            return Err(Error::invalid(format!(
                "{n} frames but {} timesteps and {} poses",
                input.t.len(),
                input.cond.len()
            )));
        }
        if input.t.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return Err(Error::invalid(format!("timesteps must lie in [0, 1], got {:?}", input.t)));
        }
        let (np, w) = (cfg.patches(), cfg.width);
        let tokens = g.constant(patchify(input.x_t, cfg.patch)?.cast());
        let x = self.embed.forward(g, p, tokens)?;
        let mut x = g.add(x, p[self.pos])?;

        let tf = g.constant(timestep_features(input.t).cast());
        let te = self.time_mlp.forward(g, p, tf)?;
        let cf = g.constant(input.cond.to_tensor().cast());
        let ce = self.cam_mlp.forward(g, p, cf)?;
        let frame_bias = g.add(te, ce)?;
        let frame_bias = g.reshape(frame_bias, &[n, 1, w])?;
        x = g.add(x, frame_bias)?;
        if let Some(ext) = input.external {
            if ext.shape() != [n, np, cfg.target_dim] {
                return Err(Error::invalid(format!("external features {:?}, expected [{n}, {np}, {}]", ext.shape(), cfg.target_dim)));
            }
            let e = g.constant(ext.cast());
            let e = self.ext_proj.forward(g, p, e)?;
            x = g.add(x, e)?;
        }

        let mask = g.constant(frame_causal_mask::<T>(n, np));
        let mut x = g.reshape(x, &[1, n * np, w])?;
        let mut hidden = None;
        for (i, block) in self.blocks.iter().enumerate() {
            x = block.forward(g, p, x, Some(mask))?;
            if i + 1 == cfg.tap_layer {
                let h = g.reshape(x, &[n, np, w])?;
                hidden = Some(h);
                if stop_at_tap {
                    return Ok(ForwardOutput { velocity: h, hidden: h });
                }
            }
        }
        let x = self.out_norm.forward(g, p, x)?;
        let v = self.out.forward(g, p, x)?;
        let velocity = g.reshape(v, &[n, np, cfg.token_dim()])?;
        Ok(ForwardOutput {
            velocity,
            hidden: hidden.expect("tap layer validated"),
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, input: &ForwardInput<'_>) -> Result<ForwardOutput> {
        self.run(g, p, input, false)
    }

    /// Hidden tap only; skips the blocks after it.
    pub fn forward_hidden<T: Real>(&self, g: &mut Graph<T>, p: &Bound, input: &ForwardInput<'_>) -> Result<Var> {
        Ok(self.run(g, p, input, true)?.hidden)
    }

    /// `f_φ`: `h[N, P, D'] → [L, N, P, D]`.
    pub fn project_features<T: Real>(&self, g: &mut Graph<T>, p: &Bound, h: Var) -> Result<Var> {
        let s = g.shape(h).to_vec();
        let (l, d) = (self.cfg.target_layers, self.cfg.target_dim);
        let y = self.projector.forward(g, p, h)?;
        let y = g.reshape(y, &[s[0], s[1], l, d])?;
        Ok(g.permute(y, &[2, 0, 1, 3])?)
    }

    /// Unit-normalizes each projected vector, then maps it through `g_φ`.
    pub fn normalize_and_scale<T: Real>(&self, g: &mut Graph<T>, p: &Bound, projected: Var, eps: f64) -> Result<(Var, Var)> {
        let h_hat = g.l2_normalize_lastdim(projected, eps)?;
        let delta = self.scale_head.forward(g, p, h_hat)?;
        let y_tilde = g.add(h_hat, delta)?;
        Ok((h_hat, y_tilde))
    }
}

/// Backbone, projector and scale head with their parameter values.
#[derive(Debug, Clone)]
pub struct ModelBundle {
    pub arch: DiffusionArch,
    pub params: ParameterSet<f32>,
}

impl ModelBundle {
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        let mut params = ParameterSet::new();
        let arch = DiffusionArch::build(&mut params, cfg, &mut rng_for(seed, "model/init"))?;
        Ok(Self { arch, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.arch.cfg
    }

    /// Same weights, hidden state read from another block.
    pub fn with_tap_layer(&self, tap_layer: usize) -> Result<Self> {
        let mut out = self.clone();
        out.arch.cfg.tap_layer = tap_layer;
        out.arch.cfg.validate()?;
        Ok(out)
    }

    /// Velocity in pixel layout `[N, H, W, 3]`.
    pub fn velocity(&self, input: &ForwardInput<'_>) -> Result<Tensor<f32>> {
        let mut g = Graph::<f32>::new();
        let p = self.params.bind(&mut g, false);
        let out = self.arch.forward(&mut g, &p, input)?;
        let r = self.arch.cfg.resolution;
        unpatchify(g.value(out.velocity), self.arch.cfg.patch, r, r, 3)
    }

    /// Tapped hidden state `[N, P, D']`.
    pub fn hidden(&self, input: &ForwardInput<'_>) -> Result<Tensor<f32>> {
        let mut g = Graph::<f32>::new();
        let p = self.params.bind(&mut g, false);
        let h = self.arch.forward_hidden(&mut g, &p, input)?;
        Ok(g.value(h).clone())
    }

    /// `f_φ(h)` as `[L, N, P, D]`.
    pub fn projected(&self, input: &ForwardInput<'_>) -> Result<Tensor<f32>> {
        let mut g = Graph::<f32>::new();
        let p = self.params.bind(&mut g, false);
        let h = self.arch.forward_hidden(&mut g, &p, input)?;
        let y = self.arch.project_features(&mut g, &p, h)?;
        Ok(g.value(y).clone())
    }

    pub fn to_checkpoint(&self, optimizer: Option<OptimizerState<f32>>, extra_config: &str) -> Checkpoint {
        let mut text = section_text(&self.arch.cfg);
        text.push_str(extra_config);
        Checkpoint {
            role: MODEL_ROLE,
            params: self.params.clone(),
            optimizer,
            config: Some(text),
        }
    }

    /// Rebuilds the architecture from the `model.*` keys stored in the checkpoint.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.role != MODEL_ROLE {
            return Err(Error::Format(format!("checkpoint role {} is not a diffusion model", ck.role.as_str())));
        }
        let mut cfg = ModelConfig::default();
        if let Some(text) = &ck.config {
            parse_section_text(&mut cfg, text)?;
        }
        let mut bundle = Self::init(&cfg, 0)?;
        bundle.params.load_from(&ck.params)?;
        Ok(bundle)
    }
}

impl ConfigSection for ModelConfig {
    fn prefix(&self) -> &'static str {
        "model"
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("patch", self.patch.to_string()),
            ("width", self.width.to_string()),
            ("heads", self.heads.to_string()),
            ("blocks", self.blocks.to_string()),
            ("mlp_ratio", self.mlp_ratio.to_string()),
            ("tap_layer", self.tap_layer.to_string()),
            ("resolution", self.resolution.to_string()),
            ("window", self.window.to_string()),
            ("projector_hidden", self.projector_hidden.to_string()),
            ("target_layers", self.target_layers.to_string()),
            ("target_dim", self.target_dim.to_string()),
            ("scale_hidden", self.scale_hidden.to_string()),
        ]
    }

    fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        use crate::config::parse_value as pv;
        match key {
            "patch" => self.patch = pv(key, value)?,
            "width" => self.width = pv(key, value)?,
            "heads" => self.heads = pv(key, value)?,
            "blocks" => self.blocks = pv(key, value)?,
            "mlp_ratio" => self.mlp_ratio = pv(key, value)?,
            "tap_layer" => self.tap_layer = pv(key, value)?,
            "resolution" => self.resolution = pv(key, value)?,
            "window" => self.window = pv(key, value)?,
            "projector_hidden" => self.projector_hidden = pv(key, value)?,
            "target_layers" => self.target_layers = pv(key, value)?,
            "target_dim" => self.target_dim = pv(key, value)?,
            "scale_hidden" => self.scale_hidden = pv(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}
