//! Euler integration of the learned velocity field, clean-context
//! autoregressive rollouts and depth readout from generated frames.

use gf_numerics::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::config::ConfigSection;
use crate::error::{Error, Result};
use crate::model::{make_conditioning, Conditioning, ForwardInput, ModelBundle};
use crate::rng::rng_for;
use crate::teacher::{clip_pixels, probe_depth, DepthProbe, FeatureSource};
use crate::training::sample_noise;
use crate::worldgen::{sky_point, CameraPose, Intrinsics, RenderedFrame, TrajectoryKind, VideoClip};

/// Anything that predicts `dx/dt` for a window of frames in pixel layout.
pub trait VelocityField {
    fn velocity(&self, x_t: &Tensor<f32>, t: &[f64], cond: &Conditioning) -> Result<Tensor<f32>>;

    /// Largest window the field accepts, if bounded.
    fn max_window(&self) -> Option<usize> {
        None
    }
}

impl VelocityField for ModelBundle {
    fn velocity(&self, x_t: &Tensor<f32>, t: &[f64], cond: &Conditioning) -> Result<Tensor<f32>> {
        ModelBundle::velocity(
            self,
            &ForwardInput {
                x_t,
                t,
                cond,
                external: None,
            },
        )
    }

    fn max_window(&self) -> Option<usize> {
        Some(self.config().window)
    }
}

/// `x ← x − Δ ⊙ v(x, t)` per frame; frames with `Δ = 0` are copied untouched.
pub fn euler_step<F: VelocityField + ?Sized>(field: &F, x_t: &Tensor<f32>, t: &[f64], delta: &[f64], cond: &Conditioning) -> Result<Tensor<f32>> {
    let n = x_t.shape().first().copied().unwrap_or(0);
    if t.len() != n || delta.len() != n {
        return Err(Error::invalid(format!("{n} frames but {} timesteps and {} step sizes", t.len(), delta.len())));
    }
    for (i, (&ti, &di)) in t.iter().zip(delta).enumerate() {
        if di < 0.0 || ti - di < -1e-12 {
            return Err(Error::invalid(format!("frame {i}: step {di} from t={ti} leaves [0, 1]")));
        }
    }
    let v = field.velocity(x_t, t, cond)?;
    if v.shape() != x_t.shape() {
        return Err(Error::invalid(format!("velocity {:?} for input {:?}", v.shape(), x_t.shape())));
    }
    let frame = x_t.len() / n.max(1);
    let mut out = x_t.clone();
    for (i, &di) in delta.iter().enumerate() {
        if di == 0.0 {
            continue;
        }
        let d = di as f32;
        let range = i * frame..(i + 1) * frame;
        for (o, &vi) in out.data_mut()[range.clone()].iter_mut().zip(&v.data()[range]) {
            *o -= d * vi;
        }
    }
    Ok(out)
}

/// Timestep of a new frame after `k` of `steps` uniform steps.
pub fn schedule_time(k: usize, steps: usize) -> f64 {
    1.0 - k as f64 / steps as f64
}

/// Denoises `n_new` frames appended after clean `context`.
///
/// `cond` covers all `K + n_new` frames. Returns only the new frames,
/// clamped to `[−1, 1]`.
pub fn generate_chunk<F: VelocityField + ?Sized, R: Rng + ?Sized>(
    field: &F,
    context: &Tensor<f32>,
    n_new: usize,
    cond: &Conditioning,
    steps: usize,
    rng: &mut R,
) -> Result<Tensor<f32>> {
    let s = context.shape();
    if s.len() != 4 || s[0] == 0 {
        return Err(Error::invalid(format!("context must be a nonempty [K, H, W, 3] tensor, got {s:?}")));
    }
    if n_new == 0 || steps == 0 {
        return Err(Error::invalid("generate_chunk needs n_new ≥ 1 and steps ≥ 1"));
    }
    let k = s[0];
    let total = k + n_new;
    if let Some(max) = field.max_window() {
        if total > max {
            return Err(Error::invalid(format!("window of {total} frames exceeds the model's {max}")));
        }
    }
    if cond.len() != total {
        return Err(Error::invalid(format!("conditioning has {} frames, window has {total}", cond.len())));
    }
    let noise = sample_noise(&[n_new, s[1], s[2], s[3]], rng);
    let mut x = Tensor::concat0(&[context, &noise])?;
    let dt = 1.0 / steps as f64;
    for step in 0..steps {
        let t_new = schedule_time(step, steps);
        let mut t = vec![0.0; k];
        t.extend(std::iter::repeat_n(t_new, n_new));
        let mut delta = vec![0.0; k];
        // The last step lands exactly on 0.
        let d = if step + 1 == steps { t_new } else { dt };
        delta.extend(std::iter::repeat_n(d, n_new));
        x = euler_step(field, &x, &t, &delta, cond)?;
    }
    Ok(x.slice0(k, total)?.map(|v| v.clamp(-1.0, 1.0)))
}

/// Frame counts and poses of one autoregressive generation.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutPlan {
    pub context_frames: usize,
    pub chunk_frames: usize,
    pub total_frames: usize,
    pub euler_steps: usize,
    pub trajectory: Vec<CameraPose>,
    pub intrinsics: Intrinsics,
    pub seed: u64,
}

impl RolloutPlan {
    pub fn validate(&self) -> Result<()> {
        if self.context_frames == 0 || self.chunk_frames == 0 || self.euler_steps == 0 {
            return Err(Error::invalid("rollout needs context, chunk and step counts ≥ 1"));
        }
        if self.total_frames < self.context_frames {
            return Err(Error::invalid(format!(
                "total_frames {} is shorter than the {} context frames",
                self.total_frames, self.context_frames
            )));
        }
        if self.trajectory.len() != self.total_frames {
            return Err(Error::invalid(format!(
                "trajectory has {} poses for {} frames",
                self.trajectory.len(),
                self.total_frames
            )));
        }
        Ok(())
    }
}

/// Sliding-window generation from `given` clean frames.
///
/// Each chunk sees the last `K` frames produced so far as context, with
/// poses re-referenced to the window's first frame.
pub fn autoregressive_rollout<F: VelocityField + ?Sized>(field: &F, plan: &RolloutPlan, given: &Tensor<f32>) -> Result<Tensor<f32>> {
    plan.validate()?;
    let s = given.shape();
    let (h, w) = (plan.intrinsics.height, plan.intrinsics.width);
    if s.len() != 4 || s[0] == 0 || s[1] != h || s[2] != w || s[3] != 3 {
        return Err(Error::invalid(format!("given frames {s:?} do not match [_, {h}, {w}, 3]")));
    }
    if s[0] > plan.total_frames {
        return Err(Error::invalid("more given frames than total_frames"));
    }
    let mut rng: ChaCha8Rng = rng_for(plan.seed, "rollout");
    let mut frames: Vec<Tensor<f32>> = (0..s[0]).map(|i| given.slice0(i, i + 1)).collect::<std::result::Result<_, _>>()?;
    while frames.len() < plan.total_frames {
        let done = frames.len();
        let k = done.min(plan.context_frames);
        let n_new = plan.chunk_frames.min(plan.total_frames - done);
        let start = done - k;
        let refs: Vec<&Tensor<f32>> = frames[start..].iter().collect();
        let context = Tensor::concat0(&refs)?;
        let cond = make_conditioning(&plan.trajectory[start..done + n_new], &plan.intrinsics)?;
        let chunk = generate_chunk(field, &context, n_new, &cond, plan.euler_steps, &mut rng)?;
        for i in 0..n_new {
            frames.push(chunk.slice0(i, i + 1)?);
        }
    }
    let refs: Vec<&Tensor<f32>> = frames.iter().collect();
    Ok(Tensor::concat0(&refs)?)
}

/// Which diffusion activation a probe reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureSpace {
    /// Tapped hidden state `h`, `[N, P, D']`.
    Hidden,
    /// `f_φ(h)` with layers folded into channels, `[N, P, L·D]`.
    Projected,
}

impl FeatureSpace {
    pub fn name(self) -> &'static str {
        match self {
            Self::Hidden => "hidden",
            Self::Projected => "projected",
        }
    }
}

/// Frozen diffusion features of lightly re-noised frames.
pub struct DiffusionFeatures<'a> {
    pub bundle: &'a ModelBundle,
    pub t_read: f64,
    pub space: FeatureSpace,
    /// Seeds the re-noising; the same clip always sees the same noise.
    pub noise_seed: u64,
}

impl DiffusionFeatures<'_> {
    /// Features for `[N, H, W, 3]` pixels, processed in model-sized windows.
    pub fn features_for(&self, pixels: &Tensor<f32>, poses: &[CameraPose], intrinsics: &Intrinsics) -> Result<Tensor<f32>> {
        if !(0.0..=1.0).contains(&self.t_read) {
            return Err(Error::invalid(format!("t_read {} outside [0, 1]", self.t_read)));
        }
        let n = pixels.shape()[0];
        if poses.len() != n {
            return Err(Error::invalid(format!("{n} frames but {} poses", poses.len())));
        }
        let window = self.bundle.config().window;
        let mut rng: ChaCha8Rng = rng_for(self.noise_seed, "readout/noise");
        let eps = sample_noise(pixels.shape(), &mut rng);
        let mut parts = Vec::new();
        for start in (0..n).step_by(window) {
            let end = (start + window).min(n);
            let x = pixels.slice0(start, end)?;
            let e = eps.slice0(start, end)?;
            let t = vec![self.t_read; end - start];
            let x_t = crate::training::corrupt(&x, &t, &e)?;
            let cond = make_conditioning(&poses[start..end], intrinsics)?;
            let input = ForwardInput {
                x_t: &x_t,
                t: &t,
                cond: &cond,
                external: None,
            };
            let f = match self.space {
                FeatureSpace::Hidden => self.bundle.hidden(&input)?,
                FeatureSpace::Projected => fold_layers(&self.bundle.projected(&input)?)?,
            };
            parts.push(f);
        }
        let refs: Vec<&Tensor<f32>> = parts.iter().collect();
        Ok(Tensor::concat0(&refs)?)
    }
}

impl FeatureSource for DiffusionFeatures<'_> {
    fn features(&self, clip: &VideoClip) -> Result<Tensor<f32>> {
        self.features_for(&clip_pixels(clip)?, &clip.poses(), &clip.intrinsics())
    }

    fn tag(&self) -> String {
        format!(
            "diffusion:{}:tap{}:{}:t{}",
            &self.bundle.params.checksum()[..16],
            self.bundle.config().tap_layer,
            self.space.name(),
            self.t_read
        )
    }
}

/// `[L, N, P, D] → [N, P, L·D]`.
pub fn fold_layers(y: &Tensor<f32>) -> Result<Tensor<f32>> {
    let s = y.shape();
    if s.len() != 4 {
        return Err(Error::invalid(format!("expected [L, N, P, D], got {s:?}")));
    }
    let (l, n, p, d) = (s[0], s[1], s[2], s[3]);
    let src = y.data();
    let mut out = Vec::with_capacity(y.len());
    for ni in 0..n {
        for pi in 0..p {
            for li in 0..l {
                let o = ((li * n + ni) * p + pi) * d;
                out.extend_from_slice(&src[o..o + d]);
            }
        }
    }
    Ok(Tensor::from_vec(&[n, p, l * d], out)?)
}

/// Positive depth maps `[N, H, W]` read from generated frames through `f_φ`
/// and a probe trained on the same feature source.
pub fn readout_geometry(
    bundle: &ModelBundle,
    pixels: &Tensor<f32>,
    poses: &[CameraPose],
    intrinsics: &Intrinsics,
    probe: &DepthProbe,
    t_read: f64,
    noise_seed: u64,
) -> Result<Tensor<f32>> {
    let source = DiffusionFeatures {
        bundle,
        t_read,
        space: FeatureSpace::Projected,
        noise_seed,
    };
    let f = source.features_for(pixels, poses, intrinsics)?;
    probe_depth(probe, &f, &source.tag(), intrinsics.height, intrinsics.width)
}

/// Packs generated pixels into clip form.
///
/// Depth comes from `depth` when given, otherwise every pixel holds the sky
/// sentinel; point maps are unprojected from the depth.
pub fn pixels_to_clip(
    pixels: &Tensor<f32>,
    poses: &[CameraPose],
    intrinsics: &Intrinsics,
    depth: Option<&Tensor<f32>>,
    kind: TrajectoryKind,
    seed: u64,
) -> Result<VideoClip> {
    let s = pixels.shape();
    let (h, w) = (intrinsics.height, intrinsics.width);
    if s != [poses.len(), h, w, 3] {
        return Err(Error::invalid(format!("pixels {s:?} vs {} poses at {h}x{w}", poses.len())));
    }
    let hw = h * w;
    let mut frames = Vec::with_capacity(poses.len());
    for (i, pose) in poses.iter().enumerate() {
        let rgb: Vec<f32> = pixels.data()[i * hw * 3..(i + 1) * hw * 3].iter().map(|v| ((v + 1.0) * 0.5).clamp(0.0, 1.0)).collect();
        let (depth_plane, point_map) = match depth {
            Some(d) => {
                let dp = d.data()[i * hw..(i + 1) * hw].to_vec();
                let mut pm = Vec::with_capacity(hw * 3);
                for (px, &z) in dp.iter().enumerate() {
                    let (u, v) = ((px % w) as f64 + 0.5, (px / w) as f64 + 0.5);
                    match crate::worldgen::unproject_pixel(u, v, z as f64, pose, intrinsics) {
                        Ok(p) => pm.extend([p.x as f32, p.y as f32, p.z as f32]),
                        Err(_) => pm.extend([sky_point(); 3]),
                    }
                }
                (dp, pm)
            }
            None => (vec![f32::INFINITY; hw], vec![sky_point(); hw * 3]),
        };
        frames.push(RenderedFrame {
            rgb,
            depth: depth_plane,
            point_map,
            pose: *pose,
            intrinsics: *intrinsics,
        });
    }
    Ok(VideoClip {
        frames,
        trajectory_kind: kind,
        seed,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleConfig {
    pub context: usize,
    pub chunk: usize,
    pub frames: usize,
    pub euler_steps: usize,
    pub t_read: f64,
    pub trajectory: TrajectoryKind,
    /// Ground-truth frames handed to the rollout as clean context.
    pub given_frames: usize,
    /// Rollouts per `sample` run, each on its own scene.
    pub clips: usize,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            context: 4,
            chunk: 4,
            frames: 64,
            euler_steps: 32,
            t_read: 0.1,
            trajectory: TrajectoryKind::Orbit,
            given_frames: 1,
            clips: 1,
        }
    }
}

impl SampleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.context == 0 || self.chunk == 0 || self.euler_steps == 0 {
            return Err(Error::Config("sample.context, sample.chunk and sample.euler_steps must be at least 1".into()));
        }
        if self.clips == 0 {
            return Err(Error::Config("sample.clips must be at least 1".into()));
        }
        if self.given_frames == 0 || self.given_frames > self.frames {
            return Err(Error::Config("sample.given_frames must lie in [1, sample.frames]".into()));
        }
        if !(0.0..=1.0).contains(&self.t_read) {
            return Err(Error::Config("sample.t_read must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

impl ConfigSection for SampleConfig {
    fn prefix(&self) -> &'static str {
        "sample"
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("context", self.context.to_string()),
            ("chunk", self.chunk.to_string()),
            ("frames", self.frames.to_string()),
            ("euler_steps", self.euler_steps.to_string()),
            ("t_read", self.t_read.to_string()),
            ("trajectory", self.trajectory.to_string()),
            ("given_frames", self.given_frames.to_string()),
            ("clips", self.clips.to_string()),
        ]
    }

    fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        use crate::config::parse_value as pv;
        match key {
            "context" => self.context = pv(key, value)?,
            "chunk" => self.chunk = pv(key, value)?,
            "frames" => self.frames = pv(key, value)?,
            "euler_steps" => self.euler_steps = pv(key, value)?,
            "t_read" => self.t_read = pv(key, value)?,
            "trajectory" => self.trajectory = value.trim().parse()?,
            "given_frames" => self.given_frames = pv(key, value)?,
            "clips" => self.clips = pv(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}
