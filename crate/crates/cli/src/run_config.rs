//! Layered run configuration: built-in preset, then a `key = value` file,
//! then command-line overrides.

use std::fs;
use std::path::Path;

use capctl_core::captioner::{CaptionerConfig, Direction};
use capctl_core::config::{apply_section, parse_kv, render_kv, KvSection};
use capctl_core::corpus::{Control, CorpusConfig};
use capctl_core::evaluator::EvalConfig;
use capctl_core::matcher::MatcherConfig;
use capctl_core::trainer::{TrainConfig, TrainMode};
use capctl_core::{Error, Result};

pub const SECTIONS: [&str; 5] = ["corpus", "captioner", "matcher", "train", "eval"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Preset {
    /// Small dimensions that train on one CPU core.
    Desk,
    /// Full-size dimensions.
    Full,
}

impl Preset {
    pub fn name(self) -> &'static str {
        match self {
            Preset::Desk => "desk",
            Preset::Full => "full",
        }
    }
}

/// Merged settings. Later entries win.
#[derive(Clone, Debug)]
pub struct RunConfig {
    pub preset: Preset,
    entries: Vec<(String, String)>,
}

fn section_entries(entries: &[(String, String)], section: &str) -> Vec<(String, String)> {
    entries
        .iter()
        .filter(|(k, _)| k.split_once('.').is_some_and(|(s, _)| s == section))
        .cloned()
        .collect()
}

/// Parses `KEY=VALUE` as given to `--set`.
pub fn parse_override(s: &str) -> Result<(String, String)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {s:?} must look like section.key=value")))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

impl RunConfig {
    /// Builds the merged config and checks every key against its section.
    pub fn new(
        preset: Preset,
        file: Option<&Path>,
        overrides: Vec<(String, String)>,
    ) -> Result<Self> {
        let mut entries =
            match file {
                Some(p) => parse_kv(&fs::read_to_string(p).map_err(|e| {
                    Error::Config(format!("cannot read config {}: {e}", p.display()))
                })?)?,
                None => Vec::new(),
            };
        entries.extend(overrides);
        for (k, _) in &entries {
            match k.split_once('.') {
                Some((s, rest)) if SECTIONS.contains(&s) && !rest.is_empty() => {}
                _ => return Err(Error::Config(format!("unknown key {k}"))),
            }
        }
        let rc = RunConfig { preset, entries };
        rc.corpus()?;
        rc.captioner(1, 1, Control::Quality, Direction::Forward)?;
        rc.matcher(1, 1)?;
        rc.train(rc.mode(None)?)?;
        rc.eval()?;
        Ok(rc)
    }

    fn apply<S: KvSection>(&self, section: &mut S, prefix: &str) -> Result<()> {
        apply_section(section, prefix, &section_entries(&self.entries, prefix))
    }

    pub fn corpus(&self) -> Result<CorpusConfig> {
        let mut c = CorpusConfig::default();
        self.apply(&mut c, "corpus")?;
        Ok(c)
    }

    pub fn captioner(
        &self,
        feat_dim: usize,
        vocab_size: usize,
        control: Control,
        direction: Direction,
    ) -> Result<CaptionerConfig> {
        let mut c = match self.preset {
            Preset::Desk => CaptionerConfig::desk(feat_dim, vocab_size),
            Preset::Full => CaptionerConfig::full(feat_dim, vocab_size),
        };
        c.control = control;
        c.direction = direction;
        self.apply(&mut c, "captioner")?;
        Ok(c)
    }

    pub fn matcher(&self, feat_dim: usize, vocab_size: usize) -> Result<MatcherConfig> {
        let mut c = match self.preset {
            Preset::Desk => MatcherConfig::desk(feat_dim, vocab_size),
            Preset::Full => MatcherConfig::full(feat_dim, vocab_size),
        };
        self.apply(&mut c, "matcher")?;
        Ok(c)
    }

    /// Training mode: the flag if given, else `train.mode`, else XE.
    pub fn mode(&self, flag: Option<TrainMode>) -> Result<TrainMode> {
        if let Some(m) = flag {
            return Ok(m);
        }
        match self.entries.iter().rev().find(|(k, _)| k == "train.mode") {
            Some((_, v)) => v.parse(),
            None => Ok(TrainMode::Xe),
        }
    }

    /// Training settings for `mode`; epoch defaults depend on the mode.
    pub fn train(&self, mode: TrainMode) -> Result<TrainConfig> {
        let mut c = match self.preset {
            Preset::Desk => TrainConfig::desk(mode),
            Preset::Full => TrainConfig::full(mode),
        };
        self.apply(&mut c, "train")?;
        c.mode = mode;
        Ok(c)
    }

    pub fn eval(&self) -> Result<EvalConfig> {
        let mut c = EvalConfig::default();
        self.apply(&mut c, "eval")?;
        Ok(c)
    }
}

/// Renders already-prefixed settings under a preset header.
pub fn render_effective(preset: Preset, sections: &[Vec<(String, String)>]) -> String {
    let mut s = format!("# preset = {}\n", preset.name());
    for rows in sections {
        s.push_str(&render_kv(rows));
    }
    s
}
