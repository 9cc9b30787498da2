//! Shared-seed run matrices and their comparison tables.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use gf_core::config::Config;
use gf_core::eval::{hidden_probe, Curve, MetricsReport, ReportMeta};
use gf_core::model::ModelBundle;
use gf_core::rng::derive_seed;
use gf_numerics::read_checkpoint;

use crate::commands::{execute, load_clips, RunContext};
use crate::error::{CliError, Result};
use crate::manifest::{Artifacts, Invocation, RunManifest};
use crate::plot::{line_chart, Series};

pub const PRESETS: [&str; 5] = ["layer_sweep", "loss_modes", "teacher_kinds", "external_vs_internal", "drift"];

/// Metrics ranked in the comparison table, with whether larger is better.
const RANKED: [(&str, bool); 6] = [
    ("probe_rmse", false),
    ("fm_final", false),
    ("tfd", false),
    ("tfd_final_quarter", false),
    ("psnr", true),
    ("ssim", true),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum TeacherChoice {
    Geometry,
    Appearance,
}

#[derive(Debug, Clone)]
struct Cell {
    name: String,
    overrides: Vec<(&'static str, String)>,
    teacher: TeacherChoice,
    rollout: bool,
}

fn cell(name: &str, overrides: &[(&'static str, &str)]) -> Cell {
    Cell {
        name: name.to_string(),
        overrides: overrides.iter().map(|&(k, v)| (k, v.to_string())).collect(),
        teacher: TeacherChoice::Geometry,
        rollout: false,
    }
}

fn cells(preset: &str, base: &Config) -> Result<Vec<Cell>> {
    let gf = ("train.loss_mode", "gf");
    Ok(match preset {
        "layer_sweep" => (1..=base.model.blocks)
            .map(|l| Cell {
                overrides: vec![("train.loss_mode", "gf".into()), ("model.tap_layer", l.to_string())],
                ..cell(&format!("tap{l}"), &[])
            })
            .collect(),
        "loss_modes" => vec![
            cell("fm_only", &[("train.loss_mode", "fm_only")]),
            cell("angular_only", &[gf, ("train.lambda_scale", "0")]),
            cell("gf", &[gf]),
            cell("mse_align", &[("train.loss_mode", "mse_align")]),
        ],
        "teacher_kinds" => vec![
            cell("geometry", &[gf, ("train.teacher_kind", "geometry")]),
            Cell {
                teacher: TeacherChoice::Appearance,
                ..cell("appearance", &[gf, ("train.teacher_kind", "appearance")])
            },
        ],
        "external_vs_internal" => vec![cell("external", &[("train.loss_mode", "external_cond")]), cell("internal", &[gf])],
        "drift" => vec![
            Cell {
                rollout: true,
                ..cell("gf", &[gf])
            },
            Cell {
                rollout: true,
                ..cell("fm_only", &[("train.loss_mode", "fm_only")])
            },
        ],
        other => {
            return Err(CliError::Usage(format!("unknown ablation preset '{other}' (valid: {})", PRESETS.join(", "))));
        }
    })
}

#[derive(Debug, Clone)]
struct Row {
    name: String,
    diverged: Option<String>,
    scalars: BTreeMap<String, f64>,
    curves: BTreeMap<String, Curve>,
    fm_curve: Vec<(f64, f64)>,
}

/// Last data row of a loss log, as `(fm, angular, scale, total, feature_norm_mean)`, plus the fm curve.
fn read_loss_log(path: &Path) -> Result<([f64; 5], Vec<(f64, f64)>)> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let mut last = [f64::NAN; 5];
    let mut fm = Vec::new();
    for line in text.lines().skip(1) {
        let cols: Vec<f64> = line.split(',').map(|c| c.parse().unwrap_or(f64::NAN)).collect();
        if cols.len() < 6 {
            return Err(CliError::Usage(format!("{}: malformed loss log row '{line}'", path.display())));
        }
        fm.push((cols[0], cols[1]));
        last.copy_from_slice(&cols[1..6]);
    }
    Ok((last, fm))
}

fn read_model(path: &Path) -> Result<ModelBundle> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(ModelBundle::from_checkpoint(&read_checkpoint(&mut bytes.as_slice())?)?)
}

fn read_report(dir: &Path, manifest: &RunManifest) -> Result<MetricsReport> {
    let f = manifest.output("metrics").ok_or_else(|| CliError::Manifest("eval run recorded no metrics".into()))?;
    let path = dir.join(&f.path);
    let text = fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
    Ok(MetricsReport::from_json_line(text.trim_end())?)
}

/// Runs the preset's matrix into subdirectories of `ctx.out`.
pub fn run_ablation(ctx: &RunContext, preset: &str, data: &Path, teacher: &Path, appearance_teacher: Option<&Path>, art: &mut Artifacts) -> Result<()> {
    let matrix = cells(preset, &ctx.config)?;
    let clips = load_clips(art, "dataset", data)?;
    art.read_input("teacher", teacher)?;
    let appearance: Option<PathBuf> = if matrix.iter().any(|c| c.teacher == TeacherChoice::Appearance) {
        Some(match appearance_teacher {
            Some(p) => {
                art.read_input("appearance-teacher", p)?;
                p.to_path_buf()
            }
            None => {
                let mut cfg = ctx.config.clone();
                cfg.set("teacher.kind", "appearance")?;
                let sub = ctx.with_config(cfg).with_out(ctx.out.join("appearance_teacher"));
                let m = execute(&Invocation::PretrainTeacher { data: data.to_path_buf() }, &sub)?;
                art.adopt_output("run-manifest", &format!("appearance_teacher/{}", RunManifest::file_name("pretrain-teacher")))?;
                let f = m.output("teacher").expect("pretrain writes a teacher");
                sub.out.join(&f.path)
            }
        })
    } else {
        None
    };

    let probe_seed = derive_seed(ctx.seed, "probe");
    let mut rows = Vec::new();
    for c in &matrix {
        let mut cfg = ctx.config.clone();
        for (k, v) in &c.overrides {
            cfg.set(k, v)?;
        }
        cfg.sync();
        let dir = ctx.out.join(&c.name);
        let sub = ctx.with_config(cfg.clone()).with_out(dir.clone());
        let teacher_path = match c.teacher {
            TeacherChoice::Geometry => teacher.to_path_buf(),
            TeacherChoice::Appearance => appearance.clone().expect("pretrained above"),
        };
        let inv = Invocation::Train {
            data: data.to_path_buf(),
            teacher: Some(teacher_path.clone()),
        };
        log::info!("ablation {preset}: cell {}", c.name);
        let mut row = Row {
            name: c.name.clone(),
            diverged: None,
            scalars: BTreeMap::new(),
            curves: BTreeMap::new(),
            fm_curve: Vec::new(),
        };
        match execute(&inv, &sub) {
            Ok(m) => {
                art.adopt_output("run-manifest", &format!("{}/{}", c.name, RunManifest::file_name("train")))?;
                let log = m.output("loss-log").expect("train writes a loss log");
                let ([fm, ang, sc, total, norm], fm_curve) = read_loss_log(&dir.join(&log.path))?;
                row.fm_curve = fm_curve;
                for (k, v) in [("fm_final", fm), ("angular_final", ang), ("scale_final", sc), ("total_final", total), ("feature_norm_final", norm)] {
                    row.scalars.insert(k.into(), v);
                }
                let model_path = dir.join(&m.output("model").expect("train writes a model").path);
                let bundle = read_model(&model_path)?;
                let r = hidden_probe(&bundle, &clips, &cfg.probe, cfg.sample.t_read, probe_seed)?;
                row.scalars.insert("probe_rmse".into(), r.heldout_rmse);
                row.scalars.insert("constant_rmse".into(), r.constant_rmse);
                if c.rollout {
                    let roll = sub.with_out(dir.join("rollout"));
                    let sm = execute(&Invocation::Sample { model: model_path, data: None }, &roll)?;
                    art.adopt_output("run-manifest", &format!("{}/rollout/{}", c.name, RunManifest::file_name("sample")))?;
                    let mut ecfg = cfg.clone();
                    ecfg.set("eval.metrics", "psnr,ssim,tfd")?;
                    let ev = sub.with_config(ecfg).with_out(dir.join("eval"));
                    let em = execute(
                        &Invocation::Eval {
                            generated: roll.out.join(&sm.output("generated").expect("sample output").path),
                            reference: roll.out.join(&sm.output("reference").expect("sample output").path),
                            teacher: Some(teacher_path),
                            model: None,
                            data: None,
                        },
                        &ev,
                    )?;
                    art.adopt_output("run-manifest", &format!("{}/eval/{}", c.name, RunManifest::file_name("eval")))?;
                    let rep = read_report(&ev.out, &em)?;
                    row.scalars.extend(rep.scalars);
                    row.curves.extend(rep.curves);
                }
            }
            Err(CliError::Core(gf_core::Error::Diverged { step, detail })) => {
                log::warn!("cell {} diverged at step {step}: {detail}", c.name);
                row.diverged = Some(format!("step {step}: {detail}"));
                row.scalars.insert("diverged_step".into(), step as f64);
            }
            Err(e) => return Err(e),
        }
        rows.push(row);
    }

    art.write_output("comparison", "ablation.csv", comparison_csv(&rows).as_bytes())?;
    let mut jsonl = String::new();
    for r in &rows {
        let mut rep = MetricsReport::new(ReportMeta {
            run: format!("{preset}/{}", r.name),
            config_hash: ctx.config_hash(),
            seed: ctx.seed,
            timestamp: ctx.stamp(),
        });
        rep.scalars = r.scalars.clone();
        rep.curves = r.curves.clone();
        jsonl.push_str(&rep.to_json_line()?);
        jsonl.push('\n');
    }
    art.write_output("metrics", "ablation.jsonl", jsonl.as_bytes())?;
    art.write_output("plot", "ablation.svg", plot(preset, &rows).as_bytes())?;
    art.note("preset", preset);
    art.note("rows", rows.len());
    Ok(())
}

fn comparison_csv(rows: &[Row]) -> String {
    let mut names: Vec<String> = rows.iter().flat_map(|r| r.scalars.keys().cloned()).collect();
    names.sort();
    names.dedup();
    let ranked: Vec<(&str, bool)> = RANKED.iter().copied().filter(|(m, _)| names.iter().any(|n| n == m)).collect();
    let mut ranks: Vec<BTreeMap<&str, usize>> = vec![BTreeMap::new(); rows.len()];
    for &(metric, higher_better) in &ranked {
        let mut order: Vec<(usize, f64)> = rows
            .iter()
            .enumerate()
            .filter(|(_, r)| r.diverged.is_none())
            .filter_map(|(i, r)| r.scalars.get(metric).map(|&v| (i, v)))
            .collect();
        order.sort_by(|a, b| {
            let o = a.1.total_cmp(&b.1);
            if higher_better {
                o.reverse()
            } else {
                o
            }
        });
        for (rank, (i, _)) in order.into_iter().enumerate() {
            ranks[i].insert(metric, rank + 1);
        }
    }
    let mut s = String::from("row,diverged");
    for n in &names {
        s.push(',');
        s.push_str(n);
    }
    for (m, _) in &ranked {
        s.push_str(&format!(",rank_{m}"));
    }
    s.push('\n');
    for (r, rk) in rows.iter().zip(&ranks) {
        s.push_str(&format!("{},{}", r.name, u8::from(r.diverged.is_some())));
        for n in &names {
            s.push(',');
            if let Some(v) = r.scalars.get(n) {
                s.push_str(&format!("{v:.9e}"));
            }
        }
        for (m, _) in &ranked {
            s.push(',');
            if let Some(k) = rk.get(m) {
                s.push_str(&k.to_string());
            }
        }
        s.push('\n');
    }
    s
}

fn plot(preset: &str, rows: &[Row]) -> String {
    match preset {
        "layer_sweep" => {
            let points = rows
                .iter()
                .enumerate()
                .filter_map(|(i, r)| r.scalars.get("probe_rmse").map(|&v| ((i + 1) as f64, v)))
                .collect();
            line_chart("probe RMSE by tap layer", "tap layer", "held-out log-depth RMSE", &[Series { name: "gf", points }])
        }
        "drift" => {
            let series: Vec<Series<'_>> = rows
                .iter()
                .filter_map(|r| {
                    r.curves.get("drift_tfd").map(|c| Series {
                        name: &r.name,
                        points: c.iter().map(|&(x, y)| (x as f64, y)).collect(),
                    })
                })
                .collect();
            line_chart("teacher feature distance over the rollout", "window start frame", "distance", &series)
        }
        _ => {
            let series: Vec<Series<'_>> = rows
                .iter()
                .map(|r| Series {
                    name: &r.name,
                    points: r.fm_curve.clone(),
                })
                .collect();
            line_chart(&format!("{preset}: flow-matching loss"), "step", "fm", &series)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matrices_have_the_expected_rows() {
        let base = Config::default();
        let names = |p: &str| cells(p, &base).unwrap().into_iter().map(|c| c.name).collect::<Vec<_>>();
        assert_eq!(names("layer_sweep").len(), 7);
        assert_eq!(names("loss_modes"), ["fm_only", "angular_only", "gf", "mse_align"]);
        assert_eq!(names("teacher_kinds"), ["geometry", "appearance"]);
        assert_eq!(names("external_vs_internal"), ["external", "internal"]);
        assert_eq!(names("drift"), ["gf", "fm_only"]);
        assert!(cells("nope", &base).is_err());
    }

    #[test]
    fn ranking_skips_diverged_rows() {
        let row = |name: &str, v: f64, diverged: bool| Row {
            name: name.into(),
            diverged: diverged.then(|| "x".to_string()),
            scalars: BTreeMap::from([("probe_rmse".to_string(), v)]),
            curves: BTreeMap::new(),
            fm_curve: Vec::new(),
        };
        let csv = comparison_csv(&[row("a", 0.5, false), row("b", 0.2, false), row("c", 0.1, true)]);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "row,diverged,probe_rmse,rank_probe_rmse");
        assert!(lines[1].ends_with(",2"));
        assert!(lines[2].ends_with(",1"));
        assert!(lines[3].ends_with(','));
    }
}
