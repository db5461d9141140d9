//! Application configuration: built-in defaults, named presets, TOML files
//! and `key=value` overrides, merged in that order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::analysis::AnalysisConfig;
use crate::datagen::{AssetSource, AugmentConfig};
use crate::error::{LfpError, Result};
use crate::inference::InferenceConfig;
use crate::losses::LossConfig;
use crate::matting::MattingConfig;
use crate::model::LfpNet;
use crate::propagating::PropagatingConfig;
use crate::training::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// Width 8, inner 64, context 128.
    Tiny,
    /// Width 32, inner 256.
    Small,
    /// Full widths, inner 1024, context 2048.
    Paper,
}

impl Preset {
    pub const ALL: [Preset; 3] = [Preset::Tiny, Preset::Small, Preset::Paper];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Tiny => "tiny",
            Preset::Small => "small",
            Preset::Paper => "paper",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|p| p.name() == s).ok_or_else(|| LfpError::Config {
            path: "preset".into(),
            message: format!("unknown preset `{s}`; expected tiny, small or paper"),
        })
    }

    /// Values layered over the defaults.
    fn overlay(self) -> toml::Table {
        let text = match self {
            Preset::Tiny => TINY,
            Preset::Small => SMALL,
            Preset::Paper => PAPER,
        };
        text.parse().expect("preset tables are valid TOML")
    }
}

const TINY: &str = r#"
[datagen]
samples = 16
procedural_side = 96
[datagen.augment]
crop_sizes = [64]
trimap_kernel_range = [3, 15]

[propagating]
stem_width = 8
stage_widths = [8, 8, 8, 8]
decoder_widths = [8, 8, 8, 8]
[propagating.bottleneck]
aspp_branch_channels = 8
fuse_channels = 8

[matting]
stem_widths = [8, 8, 8]
stage_widths = [8, 8, 8, 8]
ppm_width = 8
decoder_widths = [8, 8, 8, 8]
head_widths = [8, 8]
[matting.fusion]
width = 8

[inference]
inner_side = 64

[training]
pretrain_epochs = 1
stage_epochs = [2, 1, 1]
[training.optimizer]
lr = 1e-3
"#;

const SMALL: &str = r#"
[datagen]
samples = 64
procedural_side = 384
[datagen.augment]
crop_sizes = [256]
trimap_kernel_range = [3, 25]

[propagating]
stem_width = 32
stage_widths = [32, 32, 32, 32]
decoder_widths = [32, 32, 32, 32]
[propagating.bottleneck]
aspp_branch_channels = 32
fuse_channels = 32

[matting]
stem_widths = [32, 32, 32]
stage_widths = [32, 32, 32, 32]
ppm_width = 32
decoder_widths = [32, 32, 32, 32]
head_widths = [32, 32]
[matting.fusion]
width = 32

[inference]
inner_side = 256
"#;

const PAPER: &str = r#"
[datagen]
procedural_side = 1024

[propagating]
stem_width = 64
stage_widths = [64, 128, 256, 512]
decoder_widths = [256, 128, 64, 32]
[propagating.bottleneck]
aspp_branch_channels = 256
fuse_channels = 256

[matting]
stem_widths = [32, 32, 64]
stage_widths = [64, 128, 256, 512]
ppm_width = 256
decoder_widths = [256, 128, 64, 32]
head_widths = [32, 32]
[matting.fusion]
width = 64

[inference]
inner_side = 1024
"#;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CoreConfig {
    /// Seed for parameter initialization and every derived stream.
    pub seed: u64,
    /// Single worker thread, so every run is bit-reproducible.
    pub deterministic: bool,
}

impl Default for CoreConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            deterministic: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatagenConfig {
    /// Samples written by `generate`.
    pub samples: usize,
    /// Side of the procedural scenes used when no asset folder is given.
    pub procedural_side: usize,
    pub augment: AugmentConfig,
}

impl Default for DatagenConfig {
    fn default() -> Self {
        Self {
            samples: 64,
            procedural_side: 512,
            augment: AugmentConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
#[derive(Default)]
pub struct AppConfig {
    pub preset: Option<Preset>,
    pub core: CoreConfig,
    pub datagen: DatagenConfig,
    pub propagating: PropagatingConfig,
    pub matting: MattingConfig,
    pub losses: LossConfig,
    pub inference: InferenceConfig,
    pub training: TrainConfig,
    pub analysis: AnalysisConfig,
}


fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn config_err(path: impl Into<String>, message: impl ToString) -> LfpError {
    LfpError::Config {
        path: path.into(),
        message: message.to_string(),
    }
}

/// `a.b.c=value` as a nested table. Values parse as TOML and fall back to a
/// bare string.
pub fn parse_override(spec: &str) -> Result<toml::Table> {
    let (key, value) = spec
        .split_once('=')
        .ok_or_else(|| config_err(spec, "override must have the form key=value"))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(config_err(key, "malformed key"));
    }
    let value = value.trim();
    let parsed = match format!("v = {value}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key v was just written"),
        Err(_) => toml::Value::String(value.to_string()),
    };
    let mut node = parsed;
    for part in key.rsplit('.') {
        let mut t = toml::Table::new();
        t.insert(part.to_string(), node);
        node = toml::Value::Table(t);
    }
    match node {
        toml::Value::Table(t) => Ok(t),
        _ => unreachable!("wrapped in at least one table"),
    }
}

impl AppConfig {
    pub fn preset(p: Preset) -> Self {
        Self::resolve(Some(p), toml::Table::new(), &[]).expect("presets resolve")
    }

    /// Merges defaults, the preset, `file` and `overrides` (each
    /// `key=value`). An explicit `preset` beats one named in the file.
    pub fn resolve(preset: Option<Preset>, file: toml::Table, overrides: &[String]) -> Result<Self> {
        let mut layers = Vec::with_capacity(overrides.len() + 1);
        let mut file_preset = None;
        let mut file = file;
        if let Some(v) = file.remove("preset") {
            let s = v.as_str().ok_or_else(|| config_err("preset", "must be a string"))?;
            file_preset = Some(Preset::parse(s)?);
        }
        layers.push(file);
        let mut set_preset = None;
        for o in overrides {
            let mut t = parse_override(o)?;
            if let Some(v) = t.remove("preset") {
                let s = v.as_str().ok_or_else(|| config_err("preset", "must be a string"))?;
                set_preset = Some(Preset::parse(s)?);
            }
            layers.push(t);
        }
        let preset = set_preset.or(preset).or(file_preset);

        let mut merged = toml::Table::try_from(AppConfig::default()).map_err(|e| config_err("", e))?;
        if let Some(p) = preset {
            merge(&mut merged, p.overlay());
        }
        for l in layers {
            merge(&mut merged, l);
        }
        if let Some(p) = preset {
            merged.insert("preset".into(), toml::Value::String(p.name().into()));
        }
        let cfg: AppConfig = serde_path_to_error::deserialize(toml::Value::Table(merged))
            .map_err(|e| config_err(e.path().to_string(), e.inner()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml_str(text: &str, preset: Option<Preset>, overrides: &[String]) -> Result<Self> {
        let de = toml::Deserializer::parse(text).map_err(|e| config_err("", e))?;
        let file: toml::Table = serde_path_to_error::deserialize(de).map_err(|e| config_err(e.path().to_string(), e.inner()))?;
        Self::resolve(preset, file, overrides)
    }

    pub fn load(path: Option<&Path>, preset: Option<Preset>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| LfpError::io(p, e))?,
            None => String::new(),
        };
        Self::from_toml_str(&text, preset, overrides)
    }

    pub fn validate(&self) -> Result<()> {
        let section = |name: &'static str| {
            move |e: LfpError| match e {
                LfpError::Parameter(m) => config_err(name, m),
                other => other,
            }
        };
        self.propagating.validate().map_err(section("propagating"))?;
        self.matting.validate().map_err(section("matting"))?;
        self.propagating.bottleneck.validate().map_err(section("propagating.bottleneck"))?;
        self.datagen.augment.validate()?;
        if self.datagen.procedural_side < 8 {
            return Err(config_err("datagen.procedural_side", "must be at least 8"));
        }
        self.losses.validate().map_err(section("losses"))?;
        self.inference.validate()?;
        self.training.validate()?;
        self.analysis.validate()?;
        LfpNet::new(&self.propagating, &self.matting).map_err(section("matting"))?;
        Ok(())
    }

    /// Loss settings in force for training: the `losses` section.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            loss: self.losses.clone(),
            seed: self.core.seed,
            ..self.training.clone()
        }
    }

    pub fn augment_config(&self) -> AugmentConfig {
        AugmentConfig {
            rng_seed: self.core.seed ^ self.datagen.augment.rng_seed,
            ..self.datagen.augment.clone()
        }
    }

    pub fn procedural_source(&self) -> AssetSource {
        AssetSource::Procedural {
            side: self.datagen.procedural_side,
        }
    }

    pub fn network(&self) -> Result<LfpNet> {
        LfpNet::new(&self.propagating, &self.matting)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("configuration serializes")
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("configuration serializes")
    }

    /// Writes the resolved configuration as `resolved_config.toml` in `dir`.
    pub fn echo(&self, dir: &Path) -> Result<()> {
        let path = dir.join("resolved_config.toml");
        std::fs::write(&path, self.to_toml_string()).map_err(|e| LfpError::io(path, e))
    }
}
