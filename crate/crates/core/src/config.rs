//! Flat `section.key = value` configuration.
//!
//! Every key has a default except `data.clips`, which generation commands
//! require explicitly. Unknown keys are errors.

use std::fmt::Display;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::model::ModelConfig;
use crate::sampling::SampleConfig;
use crate::teacher::{ProbeConfig, TeacherConfig};
use crate::training::TrainConfig;
use crate::worldgen::WorldConfig;

/// One `prefix.*` group of keys.
pub trait ConfigSection {
    fn prefix(&self) -> &'static str;
    /// `(key, value)` pairs without the prefix, in a fixed order.
    fn entries(&self) -> Vec<(&'static str, String)>;
    /// Returns `Ok(false)` for keys this section does not know.
    fn set(&mut self, key: &str, value: &str) -> Result<bool>;
}

pub fn parse_value<V: FromStr>(key: &str, value: &str) -> Result<V>
where
    V::Err: Display,
{
    value
        .trim()
        .parse()
        .map_err(|e| Error::Config(format!("bad value '{value}' for {key}: {e}")))
}

pub fn parse_list<V: FromStr>(key: &str, value: &str) -> Result<Vec<V>>
where
    V::Err: Display,
{
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse_value(key, s))
        .collect()
}

pub fn join_list<V: Display>(items: &[V]) -> String {
    items.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

pub fn section_text(s: &dyn ConfigSection) -> String {
    s.entries()
        .into_iter()
        .map(|(k, v)| format!("{}.{} = {}\n", s.prefix(), k, v))
        .collect()
}

/// Splits `key = value` lines, skipping blanks and `#` comments.
pub fn parse_lines(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got '{raw}'", i + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Applies the lines of `text` that belong to `section`; other prefixes are skipped.
pub fn parse_section_text(section: &mut dyn ConfigSection, text: &str) -> Result<()> {
    let prefix = section.prefix();
    for (k, v) in parse_lines(text)? {
        if let Some(rest) = k.strip_prefix(prefix).and_then(|r| r.strip_prefix('.')) {
            if !section.set(rest, &v)? {
                return Err(Error::Config(format!("unknown key '{k}'")));
            }
        }
    }
    Ok(())
}

/// Every tunable of every command.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Config {
    pub world: WorldConfig,
    /// Required by dataset generation; no default.
    pub data_clips: Option<usize>,
    pub teacher: TeacherConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub sample: SampleConfig,
    pub eval: EvalConfig,
    pub probe: ProbeConfig,
}

impl Config {
    fn sections_mut(&mut self) -> [&mut dyn ConfigSection; 7] {
        [
            &mut self.world,
            &mut self.teacher,
            &mut self.model,
            &mut self.train,
            &mut self.sample,
            &mut self.eval,
            &mut self.probe,
        ]
    }

    fn sections(&self) -> [&dyn ConfigSection; 7] {
        [&self.world, &self.teacher, &self.model, &self.train, &self.sample, &self.eval, &self.probe]
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if key == "data.clips" {
            let n: usize = parse_value(key, value)?;
            self.data_clips = Some(n);
            self.world.clips = n;
            return Ok(());
        }
        let (prefix, rest) = key
            .split_once('.')
            .ok_or_else(|| Error::Config(format!("unknown key '{key}'")))?;
        for s in self.sections_mut() {
            if s.prefix() == prefix {
                return if s.set(rest, value)? {
                    Ok(())
                } else {
                    Err(Error::Config(format!("unknown key '{key}'")))
                };
            }
        }
        Err(Error::Config(format!("unknown key '{key}'")))
    }

    pub fn parse(text: &str) -> Result<Config> {
        let mut cfg = Config::default();
        for (k, v) in parse_lines(text)? {
            cfg.set(&k, &v)?;
        }
        cfg.sync();
        Ok(cfg)
    }

    /// Propagates values shared between sections.
    pub fn sync(&mut self) {
        self.teacher.resolution = self.world.resolution;
        self.model.resolution = self.world.resolution;
        self.model.target_layers = self.teacher.taps.len();
        self.model.target_dim = self.teacher.dim;
        self.probe.patch = self.model.patch;
    }

    pub fn require_clips(&self) -> Result<usize> {
        self.data_clips
            .ok_or_else(|| Error::Config("missing required key 'data.clips'".into()))
    }

    /// Fully resolved text; parsing it reproduces `self`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        if let Some(n) = self.data_clips {
            out.push_str(&format!("data.clips = {n}\n"));
        }
        for s in self.sections() {
            out.push_str(&section_text(s));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        self.teacher.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.sample.validate()?;
        self.probe.validate()?;
        Ok(())
    }
}
