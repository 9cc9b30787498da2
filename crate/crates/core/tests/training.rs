mod common;

use common::*;
use gf_core::model::ModelBundle;
use gf_core::rng::rng_for;
use gf_core::training::{
    objective, objective_gradient_check, total_loss, train_run, train_step, truncate_clip, LossMode, StepNoise, TrainConfig, TrainItem,
};
use gf_core::Error;
use gf_numerics::{GradCheckOptions, Graph, OptimizerState};

fn item(mode: LossMode) -> (ModelBundle, TrainItem, StepNoise) {
    let clips = tiny_clips(1, 4);
    let teacher = tiny_teacher();
    let target = if mode.needs_targets() { Some(&teacher) } else { None };
    let item = TrainItem::from_clip(&truncate_clip(&clips[0], 4), target).unwrap();
    let noise = StepNoise::draw(item.pixels.shape(), &mut rng_for(1, "noise"));
    (ModelBundle::init(&tiny_model_cfg(), 3).unwrap(), item, noise)
}

#[test]
fn graph_total_matches_component_combination() {
    let (bundle, item, noise) = item(LossMode::Gf);
    let cfg = train_cfg(LossMode::Gf, 1);
    let mut g = Graph::<f64>::new();
    let p = bundle.params.cast::<f64>().bind(&mut g, false);
    let v = objective(&bundle.arch, &mut g, &p, &item, &noise, &cfg, None).unwrap();
    let val = |x| g.value(x).item();
    let b = total_loss(val(v.fm), val(v.angular.unwrap()), val(v.scale.unwrap()), 0.0, &cfg).unwrap();
    assert!((b.total - val(v.total)).abs() < 1e-6 * b.total.abs().max(1.0));
    assert!((-1.0..=1.0).contains(&b.angular) && b.scale >= 0.0 && b.fm >= 0.0);
}

#[test]
fn full_objective_passes_gradient_check_in_f64() {
    let (mut bundle, item, noise) = item(LossMode::Gf);
    // Move off the zero-initialized output layers so every path carries gradient.
    let teacher = tiny_teacher();
    let mut state = OptimizerState::new(&bundle.params);
    let cfg = train_cfg(LossMode::Gf, 1);
    for _ in 0..3 {
        train_step(&mut bundle, &mut state, &[(&item, noise.clone())], Some(&teacher), &cfg).unwrap();
    }
    let opts = GradCheckOptions {
        step: 1e-4,
        max_coords: Some(80),
        seed: 4,
        ..GradCheckOptions::default()
    };
    let report = objective_gradient_check(&bundle, &item, &noise, &cfg, None, opts).unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}

#[test]
fn scale_head_never_moves_the_angular_term() {
    let (bundle, item, noise) = item(LossMode::Gf);
    let cfg = train_cfg(LossMode::Gf, 1);
    let eval = |b: &ModelBundle| {
        let mut g = Graph::<f64>::new();
        let p = b.params.cast::<f64>().bind(&mut g, false);
        let v = objective(&b.arch, &mut g, &p, &item, &noise, &cfg, None).unwrap();
        (g.value(v.angular.unwrap()).item(), g.value(v.scale.unwrap()).item())
    };
    let (a0, s0) = eval(&bundle);
    let mut moved = bundle.clone();
    let ids: Vec<_> = moved
        .params
        .iter()
        .filter(|(name, _)| name.starts_with("scale_head"))
        .map(|(name, _)| name.to_string())
        .collect();
    assert!(!ids.is_empty());
    for name in ids {
        let id = moved.params.id_of(&name).unwrap();
        for v in moved.params.by_id_mut(id).data_mut() {
            *v += 0.05;
        }
    }
    let (a1, s1) = eval(&moved);
    assert_eq!(a0, a1);
    assert_ne!(s0, s1);
}

#[test]
fn zero_weights_reproduce_fm_only_bit_for_bit() {
    let clips = tiny_clips(3, 4);
    let teacher = tiny_teacher();
    let zero = TrainConfig {
        lambda_angular: 0.0,
        lambda_scale: 0.0,
        ..train_cfg(LossMode::Gf, 12)
    };
    let a = train_run(&clips, Some(&teacher), &tiny_model_cfg(), &zero, None).unwrap();
    let b = train_run(&clips, None, &tiny_model_cfg(), &train_cfg(LossMode::FmOnly, 12), None).unwrap();
    assert_eq!(a.bundle.params.checksum(), b.bundle.params.checksum());
    for (x, y) in a.log.iter().zip(&b.log) {
        assert_eq!(x.breakdown.fm.to_bits(), y.breakdown.fm.to_bits());
        assert_eq!(x.breakdown.total.to_bits(), y.breakdown.total.to_bits());
    }
}

#[test]
fn teacher_stays_frozen_and_runs_are_deterministic() {
    let clips = tiny_clips(3, 4);
    let teacher = tiny_teacher();
    let before = teacher.params.checksum();
    let cfg = train_cfg(LossMode::Gf, 100);
    let a = train_run(&clips, Some(&teacher), &tiny_model_cfg(), &cfg, None).unwrap();
    assert_eq!(teacher.params.checksum(), before);
    assert!(a.bundle.params.iter().all(|(name, _)| !name.starts_with("teacher")));
    let b = train_run(&clips, Some(&teacher), &tiny_model_cfg(), &TrainConfig { steps: 20, ..cfg }, None).unwrap();
    for (x, y) in a.log.iter().zip(&b.log) {
        assert_eq!(x.breakdown, y.breakdown);
    }
    // Alignment improves over the run.
    let head: f64 = a.log[..10].iter().map(|r| r.breakdown.angular).sum::<f64>() / 10.0;
    let tail: f64 = a.log[90..].iter().map(|r| r.breakdown.angular).sum::<f64>() / 10.0;
    assert!(tail < head, "angular {head} → {tail}");
}

#[test]
fn fm_only_reduces_flow_matching_loss() {
    let clips = tiny_clips(3, 4);
    let out = train_run(&clips, None, &tiny_model_cfg(), &train_cfg(LossMode::FmOnly, 80), None).unwrap();
    let head: f64 = out.log[..10].iter().map(|r| r.breakdown.fm).sum::<f64>() / 10.0;
    let tail: f64 = out.log[70..].iter().map(|r| r.breakdown.fm).sum::<f64>() / 10.0;
    assert!(tail < head, "fm {head} → {tail}");
    assert!(out.log.iter().all(|r| r.breakdown.angular == 0.0 && r.breakdown.total == r.breakdown.fm));
}

#[test]
fn non_finite_inputs_abort_with_diagnostics() {
    let (mut bundle, mut item, noise) = item(LossMode::Gf);
    item.pixels.data_mut()[0] = f32::NAN;
    let teacher = tiny_teacher();
    let mut state = OptimizerState::new(&bundle.params);
    for checked in [false, true] {
        let cfg = TrainConfig {
            checked,
            ..train_cfg(LossMode::Gf, 1)
        };
        match train_step(&mut bundle, &mut state, &[(&item, noise.clone())], Some(&teacher), &cfg) {
            Err(Error::Diverged { .. }) => {}
            other => panic!("expected divergence, got {other:?}"),
        }
    }
}

#[test]
fn teacher_requirements_per_mode() {
    let clips = tiny_clips(2, 4);
    for mode in [LossMode::Gf, LossMode::MseAlign, LossMode::ExternalCond] {
        assert!(train_run(&clips, None, &tiny_model_cfg(), &train_cfg(mode, 1), None).is_err());
    }
    assert!(train_run(&clips, Some(&tiny_teacher()), &tiny_model_cfg(), &train_cfg(LossMode::GfPlus, 1), None).is_err());
    let ext = train_run(&clips, Some(&tiny_teacher()), &tiny_model_cfg(), &train_cfg(LossMode::ExternalCond, 3), None).unwrap();
    assert_eq!(ext.log.len(), 3);
    assert!(ext.log.iter().all(|r| r.breakdown.total == r.breakdown.fm));
}

#[test]
fn checkpoints_fire_at_the_configured_interval() {
    let clips = tiny_clips(2, 4);
    let cfg = TrainConfig {
        checkpoint_every: 2,
        ..train_cfg(LossMode::FmOnly, 5)
    };
    let mut seen = Vec::new();
    let mut hook = |step: usize, _: &ModelBundle, _: &OptimizerState<f32>| {
        seen.push(step);
        Ok(())
    };
    train_run(&clips, None, &tiny_model_cfg(), &cfg, Some(&mut hook)).unwrap();
    assert_eq!(seen, [2, 4]);
}
