//! Run configuration.
//!
//! A run config is a TOML file with one section per module. Every file is
//! layered over a preset (`desk` or `paper`, chosen by its `preset` key),
//! and `section.key=value` overrides are applied last, so a file only
//! needs the keys it changes.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{Split, SynthSceneParams};
use crate::error::{Error, Result};
use crate::evalharness::AblationSpec;
use crate::features::ExtractorChoice;
use crate::losses::LossWeights;
use crate::model::{Rp2pnConfig, UNetConfig};
use crate::preprocess::InputOptions;

pub const DESK_TOML: &str = include_str!("../configs/desk.toml");
pub const PAPER_TOML: &str = include_str!("../configs/paper.toml");

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Desk,
    Paper,
}

impl Preset {
    pub fn toml(self) -> &'static str {
        match self {
            Preset::Desk => DESK_TOML,
            Preset::Paper => PAPER_TOML,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub root: PathBuf,
    /// Square random training crop; 0 trains on whole images.
    pub crop: usize,
}

/// Scene counts written by the `synth` command.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub train: usize,
    pub val: usize,
    pub test: usize,
    #[serde(default)]
    pub scene: SynthSceneParams,
}

impl SynthConfig {
    pub fn count(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::Test => self.test,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub base_width: usize,
    pub lstm_hidden: usize,
    pub down_levels: usize,
    pub polar_input: bool,
    pub polar_output: bool,
    pub with_iteration: bool,
    pub include_aop: bool,
    /// Overexposure threshold of the mask.
    pub tau: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Phase {
    pub rate: f64,
    pub epochs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schedule {
    pub phases: Vec<Phase>,
    /// Hard cap on optimizer steps; 0 means no cap.
    pub max_steps: usize,
    /// Checkpoint cadence in steps; 0 keeps only the final checkpoint.
    pub checkpoint_every: usize,
    /// Validation cadence in steps; 0 disables validation.
    pub validate_every: usize,
}

impl Schedule {
    pub fn total_epochs(&self) -> usize {
        self.phases.iter().map(|p| p.epochs).sum()
    }

    /// Learning rate of a (0-based) epoch. Epochs past the schedule keep the
    /// last rate.
    pub fn rate_at(&self, epoch: usize) -> f64 {
        let mut end = 0;
        for p in &self.phases {
            end += p.epochs;
            if epoch < end {
                return p.rate;
            }
        }
        self.phases.last().map_or(0.0, |p| p.rate)
    }

    pub fn total_steps(&self, steps_per_epoch: usize) -> usize {
        let all = self.total_epochs() * steps_per_epoch;
        if self.max_steps > 0 {
            all.min(self.max_steps)
        } else {
            all
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationSection {
    /// Split scored after training each variant.
    pub eval_split: Split,
    #[serde(default = "AblationSpec::table2")]
    pub specs: Vec<AblationSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: Preset,
    pub seed: u64,
    pub n_iters: usize,
    pub batch_size: usize,
    pub output_dir: PathBuf,
    pub data: DataConfig,
    pub synth: SynthConfig,
    pub model: ModelSection,
    pub losses: LossWeights,
    pub schedule: Schedule,
    pub extractor: ExtractorChoice,
    pub ablation: AblationSection,
}

fn parse_table(text: &str, origin: &str) -> Result<toml::Table> {
    text.parse::<toml::Table>()
        .map_err(|e| Error::Config(format!("{origin}: {e}")))
}

fn merge(base: &mut toml::Table, top: toml::Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Applies `a.b.c=value`. The value is parsed as TOML and falls back to a
/// bare string.
fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {spec:?} is not of the form key=value")))?;
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let keys: Vec<&str> = path.trim().split('.').collect();
    let (last, parents) = keys.split_last().expect("split yields one item");
    let mut cur = table;
    for k in parents {
        cur = cur
            .entry(k.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override {spec:?}: {k} is not a section")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

impl RunConfig {
    pub fn preset(p: Preset) -> Self {
        Self::from_layers(Some(("preset", p.toml())), &[]).expect("bundled presets parse")
    }

    /// Preset, then `file` (name and text), then overrides.
    pub fn from_layers(file: Option<(&str, &str)>, overrides: &[String]) -> Result<Self> {
        let user = match file {
            Some((name, text)) => parse_table(text, name)?,
            None => toml::Table::new(),
        };
        let preset: Preset = match user.get("preset") {
            Some(v) => v
                .clone()
                .try_into()
                .map_err(|e| Error::Config(format!("preset: {e}")))?,
            None => Preset::Desk,
        };
        let mut table = parse_table(preset.toml(), "preset")?;
        merge(&mut table, user);
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e| Error::Config(format!("{}: {e}", file.map_or("config", |f| f.0))))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_layers(Some((&path.display().to_string(), &text)), overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Range checks. Paths are checked by the commands that use them.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_iters == 0 {
            return bad("n_iters must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        let m = &self.model;
        if m.base_width == 0 || m.lstm_hidden == 0 {
            return bad("model widths must be positive".into());
        }
        if !(m.tau > 0.0 && m.tau <= 1.0) {
            return bad(format!("model.tau {} must lie in (0, 1]", m.tau));
        }
        if self.data.crop > 0 && !self.data.crop.is_multiple_of(1 << m.down_levels) {
            return bad(format!(
                "data.crop {} must be a multiple of {}",
                self.data.crop,
                1 << m.down_levels
            ));
        }
        self.losses.validate()?;
        if self.schedule.phases.is_empty() {
            return bad("schedule.phases is empty".into());
        }
        for p in &self.schedule.phases {
            if !(p.rate > 0.0 && p.rate.is_finite()) {
                return bad(format!("learning rate {} must be positive", p.rate));
            }
        }
        self.synth.scene.validate()?;
        self.model_config(1).validate()?;
        AblationSpec::check_unique(&self.ablation.specs)
    }

    pub fn input_options(&self) -> InputOptions {
        InputOptions {
            polar_input: self.model.polar_input,
            include_aop: self.model.include_aop,
            tau: self.model.tau,
        }
    }

    /// Iterations actually run: 1 for the variant without iteration.
    pub fn effective_iters(&self) -> usize {
        if self.model.with_iteration {
            self.n_iters
        } else {
            1
        }
    }

    pub fn model_config(&self, in_channels: usize) -> Rp2pnConfig {
        let m = &self.model;
        Rp2pnConfig {
            in_channels,
            r_net: UNetConfig::from_base(m.base_width, m.down_levels),
            t_net: UNetConfig::from_base(m.base_width, m.down_levels),
            lstm_hidden: m.with_iteration.then_some(m.lstm_hidden),
            polar_output: m.polar_output,
            n_iters: self.effective_iters(),
        }
    }

    /// The config with the switches of one ablation row.
    pub fn with_variant(&self, spec: &AblationSpec) -> Self {
        let mut c = self.clone();
        c.model.polar_input = spec.polar_input;
        c.model.polar_output = spec.polar_output;
        c.model.with_iteration = spec.with_iteration;
        c
    }

    /// Makes relative paths relative to `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.data.root);
        fix(&mut self.output_dir);
        if let ExtractorChoice::Pretrained { weights: Some(w) } = &mut self.extractor {
            fix(w);
        }
        if let crate::data::TextureSource::File { path } = &mut self.synth.scene.texture {
            fix(path);
        }
    }
}
