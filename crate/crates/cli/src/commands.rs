//! One function per subcommand, all run through [`execute`].

use std::fs;
use std::path::{Path, PathBuf};

use gf_core::config::Config;
use gf_core::eval::{
    drift_curve, final_quarter_distance, hidden_probe, psnr, reprojection_error, revisit_error, ssim, teacher_feature_distance, Curve, ImageView,
    MetricsReport, ReportMeta, curve_csv,
};
use gf_core::model::ModelBundle;
use gf_core::rng::{derive_seed, rng_for};
use gf_core::sampling::{autoregressive_rollout, pixels_to_clip, readout_geometry, DiffusionFeatures, FeatureSpace, RolloutPlan};
use gf_core::teacher::{clip_pixels, pretrain_teacher, split_clips, train_depth_probe, DepthProbe, TeacherModel};
use gf_core::training::{loss_log_csv, objective_gradient_check, train_run, StepNoise, TrainItem, LossRow};
use gf_core::worldgen::{decode_dataset, encode_dataset, generate_clips, make_scene, make_trajectory_with, render_clip, VideoClip};
use gf_numerics::{read_checkpoint, write_checkpoint, Checkpoint, GradCheckOptions};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ablate::run_ablation;
use crate::error::{CliError, Result};
use crate::manifest::{sha256_hex, unix_now, versions, Artifacts, Invocation, RunManifest};
use crate::plot::{line_chart, Series};

/// Worst relative error tolerated by the checked-mode gradient spot check.
pub const SPOT_CHECK_TOLERANCE: f64 = 1e-3;
pub const SPOT_CHECK_COORDS: usize = 20;

/// Everything a command needs besides its input paths.
#[derive(Debug, Clone)]
pub struct RunContext {
    pub config: Config,
    pub seed: u64,
    pub out: PathBuf,
    pub checked: bool,
}

impl RunContext {
    pub fn with_out(&self, out: PathBuf) -> Self {
        Self { out, ..self.clone() }
    }

    pub fn with_config(&self, config: Config) -> Self {
        Self { config, ..self.clone() }
    }

    /// Seconds since the epoch, or 0 in checked mode.
    pub fn stamp(&self) -> u64 {
        if self.checked {
            0
        } else {
            unix_now()
        }
    }

    pub fn config_hash(&self) -> String {
        sha256_hex(self.config.to_text().as_bytes())
    }
}

/// Runs `inv` into `ctx.out` and writes its manifest there.
pub fn execute(inv: &Invocation, ctx: &RunContext) -> Result<RunManifest> {
    let mut ctx = ctx.clone();
    ctx.config.sync();
    ctx.config.train.checked = ctx.checked;
    ctx.config.train.seed = ctx.seed;
    ctx.config.validate()?;
    fs::create_dir_all(&ctx.out).map_err(|e| CliError::io(&ctx.out, e))?;
    let manifest_path = ctx.out.join(RunManifest::file_name(inv.name()));
    if manifest_path.exists() {
        return Err(CliError::Usage(format!("{} already holds a {} run", ctx.out.display(), inv.name())));
    }
    let started = ctx.stamp();
    let mut art = Artifacts::new(&ctx.out);
    log::info!("{} → {}", inv.name(), ctx.out.display());
    match inv {
        Invocation::GenData => gen_data(&ctx, &mut art)?,
        Invocation::PretrainTeacher { data } => cmd_pretrain_teacher(&ctx, data, &mut art)?,
        Invocation::Train { data, teacher } => cmd_train(&ctx, data, teacher.as_deref(), &mut art)?,
        Invocation::Sample { model, data } => cmd_sample(&ctx, model, data.as_deref(), &mut art)?,
        Invocation::Eval {
            generated,
            reference,
            teacher,
            model,
            data,
        } => cmd_eval(&ctx, generated, reference, teacher.as_deref(), model.as_deref(), data.as_deref(), &mut art)?,
        Invocation::Ablate {
            preset,
            data,
            teacher,
            appearance_teacher,
        } => run_ablation(&ctx, preset, data, teacher, appearance_teacher.as_deref(), &mut art)?,
        Invocation::Probe {
            model,
            model_b,
            random_baseline,
            data,
        } => cmd_probe(&ctx, model, model_b.as_deref(), *random_baseline, data, &mut art)?,
    }
    let manifest = RunManifest {
        invocation: inv.clone(),
        config: ctx.config.to_text(),
        config_hash: ctx.config_hash(),
        seed: ctx.seed,
        checked: ctx.checked,
        inputs: art.inputs,
        outputs: art.outputs,
        started,
        finished: ctx.stamp(),
        versions: versions(),
        notes: art.notes,
    };
    fs::write(&manifest_path, manifest.to_json()).map_err(|e| CliError::io(&manifest_path, e))?;
    Ok(manifest)
}

/// Re-executes a recorded run into `out` after checking its inputs are unchanged.
pub fn rerun(manifest_path: &Path, out: &Path) -> Result<RunManifest> {
    let m = RunManifest::read(manifest_path)?;
    for input in &m.inputs {
        let bytes = fs::read(&input.path).map_err(|e| CliError::io(&input.path, e))?;
        if sha256_hex(&bytes) != input.sha256 {
            return Err(CliError::Manifest(format!("input {} changed since the recorded run", input.path)));
        }
    }
    let ctx = RunContext {
        config: Config::parse(&m.config)?,
        seed: m.seed,
        out: out.to_path_buf(),
        checked: m.checked,
    };
    execute(&m.invocation, &ctx)
}

pub(crate) fn load_clips(art: &mut Artifacts, role: &str, path: &Path) -> Result<Vec<VideoClip>> {
    let bytes = art.read_input(role, path)?;
    Ok(decode_dataset(&bytes)?)
}

fn load_checkpoint(art: &mut Artifacts, role: &str, path: &Path) -> Result<Checkpoint> {
    let bytes = art.read_input(role, path)?;
    Ok(read_checkpoint(&mut bytes.as_slice())?)
}

pub(crate) fn load_teacher(art: &mut Artifacts, role: &str, path: &Path) -> Result<TeacherModel> {
    Ok(TeacherModel::from_checkpoint(&load_checkpoint(art, role, path)?)?)
}

pub(crate) fn load_model(art: &mut Artifacts, role: &str, path: &Path) -> Result<ModelBundle> {
    Ok(ModelBundle::from_checkpoint(&load_checkpoint(art, role, path)?)?)
}

fn checkpoint_bytes(ck: &Checkpoint) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, ck)?;
    Ok(buf)
}

fn gen_data(ctx: &RunContext, art: &mut Artifacts) -> Result<()> {
    let clips_wanted = ctx.config.require_clips()?;
    let mut world = ctx.config.world.clone();
    world.clips = clips_wanted;
    let clips = generate_clips(&world, ctx.seed)?;
    art.write_output("dataset", "dataset.gfd", &encode_dataset(&clips)?)?;
    log::info!("{} clips × {} frames at {r}x{r}", clips.len(), world.frames, r = world.resolution);
    art.note("clips", clips.len());
    art.note("frames", world.frames);
    art.note("resolution", world.resolution);
    Ok(())
}

fn cmd_pretrain_teacher(ctx: &RunContext, data: &Path, art: &mut Artifacts) -> Result<()> {
    let clips = load_clips(art, "dataset", data)?;
    let cfg = &ctx.config.teacher;
    let (teacher, log) = pretrain_teacher(&clips, cfg, ctx.seed)?;
    art.write_output("teacher", "teacher.ckpt", &checkpoint_bytes(&teacher.to_checkpoint())?)?;
    let mut csv = String::from("step,loss\n");
    for row in &log {
        csv.push_str(&format!("{},{:.9e}\n", row.step, row.loss));
    }
    art.write_output("loss-log", "teacher_loss.csv", csv.as_bytes())?;
    let points = log.iter().map(|r| (r.step as f64, r.loss)).collect();
    let svg = line_chart("teacher pretraining", "step", "loss", &[Series { name: "loss", points }]);
    art.write_output("plot", "teacher_loss.svg", svg.as_bytes())?;
    art.note("teacher_kind", teacher.kind());
    if teacher.kind() == gf_core::teacher::TeacherKind::Geometry {
        let (_, heldout) = split_clips(&clips, cfg.heldout_fraction);
        let rmse = teacher.depth_rmse(&heldout)?;
        log::info!("teacher held-out log-depth RMSE {rmse:.4}");
        art.note("heldout_log_depth_rmse", format!("{rmse:.6}"));
    }
    Ok(())
}

fn zero_timings(rows: &mut [LossRow]) {
    for r in rows {
        r.wall_ms = 0;
    }
}

fn cmd_train(ctx: &RunContext, data: &Path, teacher_path: Option<&Path>, art: &mut Artifacts) -> Result<()> {
    let cfg = &ctx.config;
    let clips = load_clips(art, "dataset", data)?;
    let mode = cfg.train.loss_mode;
    let teacher = match teacher_path {
        Some(p) => Some(load_teacher(art, "teacher", p)?),
        None if mode.needs_teacher() => {
            return Err(CliError::Usage(format!("loss_mode {mode} needs --teacher")));
        }
        None => None,
    };
    if let Some(t) = &teacher {
        if mode.needs_teacher() && t.kind() != cfg.train.teacher_kind {
            return Err(CliError::Usage(format!(
                "train.teacher_kind is {} but the checkpoint holds a {} teacher",
                cfg.train.teacher_kind,
                t.kind()
            )));
        }
        let tc = t.config();
        if tc.dim != cfg.model.target_dim || tc.taps.len() != cfg.model.target_layers {
            return Err(CliError::Usage(format!(
                "teacher features are {}×{} but the model projects to {}×{}",
                tc.taps.len(),
                tc.dim,
                cfg.model.target_layers,
                cfg.model.target_dim
            )));
        }
    }
    let teacher = teacher.as_ref().filter(|_| mode.needs_teacher());
    art.note("loss_mode", mode);
    art.note("lambda_angular", cfg.train.lambda_angular);
    art.note("lambda_scale", cfg.train.lambda_scale);
    if ctx.checked {
        art.note("gradient_spot_check_max_rel_error", format!("{:.3e}", spot_check(ctx, &clips, teacher)?));
    }

    let mut hook = |step: usize, bundle: &ModelBundle, opt: &gf_numerics::OptimizerState<f32>| -> gf_core::Result<()> {
        let bytes = {
            let mut buf = Vec::new();
            write_checkpoint(&mut buf, &bundle.to_checkpoint(Some(opt.clone()), ""))
                .map_err(gf_core::Error::from)?;
            buf
        };
        art.write_output("intermediate-checkpoint", &format!("model-step{step}.ckpt"), &bytes)
            .map_err(|e| gf_core::Error::InvalidArgument(e.to_string()))?;
        Ok(())
    };
    let mut out = train_run(&clips, teacher, &cfg.model, &cfg.train, Some(&mut hook))?;
    if ctx.checked {
        zero_timings(&mut out.log);
    }
    let ck = out.bundle.to_checkpoint(Some(out.optimizer), "");
    art.write_output("model", "model.ckpt", &checkpoint_bytes(&ck)?)?;
    art.write_output("loss-log", "loss.csv", loss_log_csv(&out.log).as_bytes())?;
    let series = |name: &'static str, f: fn(&LossRow) -> f64| Series {
        name,
        points: out.log.iter().map(|r| (r.step as f64, f(r))).collect(),
    };
    let svg = line_chart(
        &format!("training ({mode})"),
        "step",
        "loss",
        &[
            series("fm", |r| r.breakdown.fm),
            series("angular", |r| r.breakdown.angular),
            series("scale", |r| r.breakdown.scale),
            series("total", |r| r.breakdown.total),
        ],
    );
    art.write_output("plot", "loss.svg", svg.as_bytes())?;
    if let Some(last) = out.log.last() {
        art.note("final_total", format!("{:.6e}", last.breakdown.total));
        art.note("final_feature_norm_mean", format!("{:.6e}", last.breakdown.feature_norm_mean));
    }
    Ok(())
}

/// f64 finite-difference check of the objective on the first clip.
fn spot_check(ctx: &RunContext, clips: &[VideoClip], teacher: Option<&TeacherModel>) -> Result<f64> {
    let cfg = &ctx.config;
    let clip = gf_core::training::truncate_clip(&clips[0], cfg.model.window);
    let target_teacher = teacher.filter(|_| cfg.train.loss_mode.needs_targets());
    let item = TrainItem::from_clip(&clip, target_teacher)?;
    let noise = StepNoise::draw(item.pixels.shape(), &mut rng_for(ctx.seed, "train/spot-check"));
    let external = match (cfg.train.loss_mode, teacher) {
        (gf_core::training::LossMode::ExternalCond, Some(t)) => {
            Some(gf_core::training::external_features(t, &gf_core::training::corrupt(&item.pixels, &noise.t, &noise.eps)?)?)
        }
        _ => None,
    };
    let bundle = ModelBundle::init(&cfg.model, derive_seed(ctx.seed, "train/spot-check"))?;
    let opts = GradCheckOptions {
        max_coords: Some(SPOT_CHECK_COORDS),
        seed: ctx.seed,
        ..GradCheckOptions::default()
    };
    let report = objective_gradient_check(&bundle, &item, &noise, &cfg.train, external.as_ref(), opts)?;
    if report.max_rel_error > SPOT_CHECK_TOLERANCE {
        return Err(CliError::Usage(format!(
            "gradient spot check failed: relative error {:.3e} at {:?}",
            report.max_rel_error, report.worst
        )));
    }
    Ok(report.max_rel_error)
}

fn readout_noise_seed(seed: u64) -> u64 {
    derive_seed(seed, "readout/noise")
}

/// Probe on the projected diffusion features that `readout_geometry` reads.
fn train_readout_probe(ctx: &RunContext, bundle: &ModelBundle, clips: &[VideoClip], art: &mut Artifacts) -> Result<DepthProbe> {
    let source = DiffusionFeatures {
        bundle,
        t_read: ctx.config.sample.t_read,
        space: FeatureSpace::Projected,
        noise_seed: readout_noise_seed(ctx.seed),
    };
    let (probe, report) = train_depth_probe(&source, clips, &ctx.config.probe, derive_seed(ctx.seed, "readout/probe"))?;
    art.note("readout_probe_heldout_rmse", format!("{:.6}", report.heldout_rmse));
    Ok(probe)
}

fn cmd_sample(ctx: &RunContext, model: &Path, data: Option<&Path>, art: &mut Artifacts) -> Result<()> {
    let cfg = &ctx.config;
    let bundle = load_model(art, "model", model)?;
    if !bundle.config().same_architecture(&cfg.model) {
        return Err(CliError::Usage("model checkpoint architecture differs from the model.* config".into()));
    }
    let probe = match data {
        Some(p) => {
            let clips = load_clips(art, "probe-dataset", p)?;
            Some(train_readout_probe(ctx, &bundle, &clips, art)?)
        }
        None => None,
    };
    let s = &cfg.sample;
    let k = cfg.world.intrinsics();
    let pairs: Vec<(VideoClip, VideoClip)> = (0..s.clips)
        .into_par_iter()
        .map(|c| -> Result<(VideoClip, VideoClip)> {
            let clip_seed = derive_seed(ctx.seed, &format!("sample/clip/{c}"));
            let scene = make_scene(clip_seed);
            let poses = make_trajectory_with(s.trajectory, s.frames, &scene, clip_seed, &cfg.world.trajectory)?;
            let truth = render_clip(&scene, &poses, &k, s.trajectory, clip_seed);
            let given = clip_pixels(&truth)?.slice0(0, s.given_frames)?;
            let plan = RolloutPlan {
                context_frames: s.context,
                chunk_frames: s.chunk,
                total_frames: s.frames,
                euler_steps: s.euler_steps,
                trajectory: poses.clone(),
                intrinsics: k,
                seed: clip_seed,
            };
            let pixels = autoregressive_rollout(&bundle, &plan, &given)?;
            let depth = match &probe {
                Some(p) => Some(readout_geometry(&bundle, &pixels, &poses, &k, p, s.t_read, readout_noise_seed(ctx.seed))?),
                None => None,
            };
            let mut generated = pixels_to_clip(&pixels, &poses, &k, depth.as_ref(), s.trajectory, clip_seed)?;
            for (g, t) in generated.frames.iter_mut().zip(&truth.frames).take(s.given_frames) {
                g.rgb.clone_from(&t.rgb);
            }
            Ok((generated, truth))
        })
        .collect::<Result<_>>()?;
    let (generated, reference): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
    art.write_output("generated", "generated.gfd", &encode_dataset(&generated)?)?;
    art.write_output("reference", "reference.gfd", &encode_dataset(&reference)?)?;
    art.note("clips", generated.len());
    art.note("trajectory_kind", s.trajectory);
    Ok(())
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len().max(1) as f64
}

fn mean_curve(curves: &[Curve]) -> Curve {
    let Some(first) = curves.first() else { return Vec::new() };
    first
        .iter()
        .enumerate()
        .map(|(i, &(x, _))| (x, mean(&curves.iter().map(|c| c[i].1).collect::<Vec<_>>())))
        .collect()
}

fn has_depth(clip: &VideoClip) -> bool {
    clip.frames.iter().all(|f| f.depth.iter().any(|d| d.is_finite()))
}

#[allow(clippy::too_many_arguments)]
fn cmd_eval(
    ctx: &RunContext,
    generated: &Path,
    reference: &Path,
    teacher: Option<&Path>,
    model: Option<&Path>,
    data: Option<&Path>,
    art: &mut Artifacts,
) -> Result<()> {
    let cfg = &ctx.config;
    let ec = &cfg.eval;
    let mut gen = load_clips(art, "generated", generated)?;
    let truth = load_clips(art, "reference", reference)?;
    if gen.len() != truth.len() || gen.iter().zip(&truth).any(|(g, t)| g.len() != t.len()) {
        return Err(CliError::Usage("generated and reference files must hold the same clips and frame counts".into()));
    }
    let teacher = teacher.map(|p| load_teacher(art, "teacher", p)).transpose()?;
    let bundle = model.map(|p| load_model(art, "model", p)).transpose()?;
    let probe_clips = data.map(|p| load_clips(art, "probe-dataset", p)).transpose()?;
    if ec.wants("tfd") && teacher.is_none() {
        return Err(CliError::Usage("metric tfd needs --teacher".into()));
    }
    if ec.wants("rve") {
        if let Some(c) = gen.iter().find(|c| c.trajectory_kind != gf_core::worldgen::TrajectoryKind::Revisit) {
            return Err(CliError::Usage(format!("metric rve needs revisit clips, got {}", c.trajectory_kind)));
        }
    }
    if ec.wants("rpe") && !gen.iter().all(has_depth) {
        let (Some(b), Some(clips)) = (&bundle, &probe_clips) else {
            return Err(CliError::Usage("generated clips carry no depth; pass --model and --data for readout".into()));
        };
        let probe = train_readout_probe(ctx, b, clips, art)?;
        for c in gen.iter_mut() {
            let pixels = clip_pixels(c)?;
            let depth = readout_geometry(b, &pixels, &c.poses(), &c.intrinsics(), &probe, cfg.sample.t_read, readout_noise_seed(ctx.seed))?;
            *c = pixels_to_clip(&pixels, &c.poses(), &c.intrinsics(), Some(&depth), c.trajectory_kind, c.seed)?;
        }
    }

    let mut report = MetricsReport::new(ReportMeta {
        run: "eval".into(),
        config_hash: ctx.config_hash(),
        seed: ctx.seed,
        timestamp: ctx.stamp(),
    });
    let frame_metric = |f: &dyn Fn(&ImageView<'_>, &ImageView<'_>) -> gf_core::Result<f64>| -> Result<f64> {
        let mut per_clip = Vec::new();
        for (g, t) in gen.iter().zip(&truth) {
            let k = t.intrinsics();
            let vals = g
                .frames
                .iter()
                .zip(&t.frames)
                .map(|(a, b)| f(&ImageView::new(&a.rgb, k.height, k.width, 3)?, &ImageView::new(&b.rgb, k.height, k.width, 3)?))
                .collect::<gf_core::Result<Vec<_>>>()?;
            per_clip.push(mean(&vals));
        }
        Ok(mean(&per_clip))
    };
    if ec.wants("psnr") {
        report.scalars.insert("psnr".into(), frame_metric(&|a, b| psnr(a, b, 1.0))?);
    }
    if ec.wants("ssim") {
        report.scalars.insert("ssim".into(), frame_metric(&|a, b| ssim(a, b, 1.0))?);
    }
    if ec.wants("rpe") {
        let vals = gen
            .iter()
            .zip(&truth)
            .enumerate()
            .map(|(i, (g, t))| {
                let depth: Vec<f32> = g.frames.iter().flat_map(|f| f.depth.iter().copied()).collect();
                let mut rng = rng_for(ctx.seed, &format!("eval/rpe/{i}"));
                reprojection_error(t, &depth, ec.pair_stride, ec.sample_count, &mut rng)
            })
            .collect::<gf_core::Result<Vec<_>>>()?;
        report.scalars.insert("rpe".into(), mean(&vals));
    }
    if ec.wants("rve") {
        let errs = gen.iter().map(revisit_error).collect::<gf_core::Result<Vec<_>>>()?;
        report.scalars.insert("rve".into(), mean(&errs.iter().map(|e| e.mse).collect::<Vec<_>>()));
        report.scalars.insert("rve_psnr".into(), mean(&errs.iter().map(|e| e.psnr).collect::<Vec<_>>()));
    }
    if ec.wants("tfd") {
        let t = teacher.as_ref().expect("checked above");
        let d = gen.iter().zip(&truth).map(|(g, r)| teacher_feature_distance(g, r, t)).collect::<gf_core::Result<Vec<_>>>()?;
        report.scalars.insert("tfd".into(), mean(&d));
        if truth[0].len() >= 4 {
            let q = gen.iter().zip(&truth).map(|(g, r)| final_quarter_distance(g, r, t)).collect::<gf_core::Result<Vec<_>>>()?;
            report.scalars.insert("tfd_final_quarter".into(), mean(&q));
        }
    }
    if (ec.wants("psnr") || ec.wants("tfd")) && truth[0].len() >= ec.drift_window {
        let tf = teacher.as_ref().filter(|_| ec.wants("tfd"));
        let curves = gen.iter().zip(&truth).map(|(g, r)| drift_curve(g, r, ec.drift_window, tf)).collect::<gf_core::Result<Vec<_>>>()?;
        report.curves.insert("drift_psnr".into(), mean_curve(&curves.iter().map(|c| c.psnr.clone()).collect::<Vec<_>>()));
        if tf.is_some() {
            let tfd: Vec<Curve> = curves.iter().filter_map(|c| c.teacher_distance.clone()).collect();
            report.curves.insert("drift_tfd".into(), mean_curve(&tfd));
        }
    }
    if ec.wants("probe_rmse") {
        let (Some(b), Some(clips)) = (&bundle, &probe_clips) else {
            return Err(CliError::Usage("metric probe_rmse needs --model and --data".into()));
        };
        let r = hidden_probe(b, clips, &cfg.probe, cfg.sample.t_read, derive_seed(ctx.seed, "probe"))?;
        report.scalars.insert("probe_rmse".into(), r.heldout_rmse);
    }
    write_report(art, &report)?;
    for (name, v) in &report.scalars {
        log::info!("{name} = {v:.6}");
    }
    Ok(())
}

/// Writes the JSONL line, one CSV per curve and a drift plot.
pub(crate) fn write_report(art: &mut Artifacts, report: &MetricsReport) -> Result<()> {
    let stem = report.file_stem();
    let mut line = report.to_json_line()?;
    line.push('\n');
    art.write_output("metrics", &format!("{stem}.jsonl"), line.as_bytes())?;
    for (name, curve) in &report.curves {
        art.write_output("curve", &format!("{stem}-{name}.csv"), curve_csv(curve).as_bytes())?;
        let points = curve.iter().map(|&(x, y)| (x as f64, y)).collect();
        let svg = line_chart(name, "window start frame", name, &[Series { name, points }]);
        art.write_output("plot", &format!("{stem}-{name}.svg"), svg.as_bytes())?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeEntry {
    pub label: String,
    /// Empty for the freshly initialized baseline.
    pub checkpoint: String,
    pub sha256: String,
    pub train_rmse: f64,
    pub heldout_rmse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeSummary {
    pub entries: Vec<ProbeEntry>,
    pub constant_rmse: f64,
}

fn cmd_probe(ctx: &RunContext, model: &Path, model_b: Option<&Path>, random_baseline: bool, data: &Path, art: &mut Artifacts) -> Result<()> {
    let cfg = &ctx.config;
    let clips = load_clips(art, "dataset", data)?;
    let mut bundles: Vec<(String, String, String, ModelBundle)> = Vec::new();
    for (label, path) in std::iter::once(("a", model)).chain(model_b.map(|p| ("b", p))) {
        let b = load_model(art, &format!("model-{label}"), path)?;
        let sha = art.inputs.last().expect("just recorded").sha256.clone();
        bundles.push((label.into(), path.display().to_string(), sha, b));
    }
    if let Some((_, _, _, b)) = bundles.get(1) {
        let a = &bundles[0].3;
        if !a.config().same_architecture(b.config()) || a.config().tap_layer != b.config().tap_layer {
            return Err(CliError::Usage("probe comparison needs checkpoints with the same architecture and tap layer".into()));
        }
    }
    if random_baseline {
        let init = ModelBundle::init(bundles[0].3.config(), derive_seed(ctx.seed, "probe/random-init"))?;
        bundles.push(("random".into(), String::new(), String::new(), init));
    }
    let seed = derive_seed(ctx.seed, "probe");
    let mut entries = Vec::new();
    let mut constant_rmse = f64::NAN;
    for (label, checkpoint, sha256, bundle) in &bundles {
        let r = hidden_probe(bundle, &clips, &cfg.probe, cfg.sample.t_read, seed)?;
        log::info!("probe {label}: held-out RMSE {:.4} (constant {:.4})", r.heldout_rmse, r.constant_rmse);
        constant_rmse = r.constant_rmse;
        entries.push(ProbeEntry {
            label: label.clone(),
            checkpoint: checkpoint.clone(),
            sha256: sha256.clone(),
            train_rmse: r.train_rmse,
            heldout_rmse: r.heldout_rmse,
        });
    }
    let mut report = MetricsReport::new(ReportMeta {
        run: "probe".into(),
        config_hash: ctx.config_hash(),
        seed: ctx.seed,
        timestamp: ctx.stamp(),
    });
    for e in &entries {
        report.scalars.insert(format!("probe_rmse_{}", e.label), e.heldout_rmse);
    }
    report.scalars.insert("constant_rmse".into(), constant_rmse);
    let summary = ProbeSummary { entries, constant_rmse };
    let mut json = serde_json::to_string_pretty(&summary).expect("summary serializes");
    json.push('\n');
    art.write_output("probe", "probe.json", json.as_bytes())?;
    write_report(art, &report)
}
