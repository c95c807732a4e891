//! Experiment configuration: a TOML document layered over a named preset.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::datagen::{generate_clip, load_vspw_dir, DatasetSpec, FrameClip};
use crate::error::{Error, Result};
use crate::losses::OhemConfig;
use crate::model::{ModelConfig, Variant};
use crate::trainer::StagePlan;

pub const OUTPUT_DIR_ENV: &str = "VIDSEG_OUTPUT_DIR";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Toy,
    Paper,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "toy" => Ok(Self::Toy),
            "paper" => Ok(Self::Paper),
            other => Err(Error::config(format!("unknown preset `{other}` (toy or paper)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synthetic,
    Vspw,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub source: DataSource,
    /// Training clips for the synthetic source; held-out clips continue the
    /// same generator after the last training clip.
    pub synthetic: DatasetSpec,
    pub val_clips: usize,
    pub vspw_root: Option<PathBuf>,
    pub train_split: String,
    pub val_split: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    /// Run the OHEM fine-tuning stage after stage 1.
    pub two_stage: bool,
    pub stage1: StagePlan,
    pub stage2: StagePlan,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Self::Train),
            "val" => Ok(Self::Val),
            other => Err(Error::config(format!("unknown split `{other}` (train or val)"))),
        }
    }
}

impl ExperimentConfig {
    pub fn preset(preset: Preset) -> Self {
        match preset {
            Preset::Toy => Self::toy(),
            Preset::Paper => Self::paper(),
        }
    }

    /// Desk-scale defaults: 8 synthetic 64x64 clips, four classes, the small
    /// backbone and 64x64 crops.
    pub fn toy() -> Self {
        let spec = DatasetSpec::default();
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs/toy"),
            dataset: DatasetConfig {
                source: DataSource::Synthetic,
                val_clips: 2,
                synthetic: spec.clone(),
                vspw_root: None,
                train_split: "train".into(),
                val_split: "val".into(),
            },
            model: ModelConfig::toy(spec.num_classes, Variant::Temporal),
            two_stage: true,
            stage1: StagePlan::stage1(),
            stage2: StagePlan::stage2(),
        }
    }

    /// Full-scale recipe: the large encoder, 124 VSPW classes, 479x479 crops
    /// and batch 8.
    pub fn paper() -> Self {
        let mut model = ModelConfig::toy(124, Variant::Temporal);
        model.backbone = BackboneConfig::large();
        let full = |mut p: StagePlan| {
            p.crop = [479, 479];
            p.batch_size = 8;
            p.ohem = OhemConfig::for_batch(p.batch_size, p.crop);
            p
        };
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs/paper"),
            dataset: DatasetConfig {
                source: DataSource::Vspw,
                vspw_root: Some(PathBuf::from("data/VSPW_480p")),
                ..Self::toy().dataset
            },
            model,
            two_stage: true,
            stage1: full(StagePlan::stage1()),
            stage2: full(StagePlan::stage2()),
        }
    }

    /// `preset` overlaid with the keys present in `text`.
    pub fn from_toml_str(text: &str, preset: Preset) -> Result<Self> {
        let mut base = toml::Value::try_from(Self::preset(preset))
            .map_err(|e| Error::config(format!("preset serialization: {e}")))?;
        let overlay: toml::Value = text
            .parse::<toml::Table>()
            .map(toml::Value::Table)
            .map_err(|e| Error::config(format!("invalid config: {e}")))?;
        merge(&mut base, overlay);
        let cfg: Self = base
            .try_into()
            .map_err(|e| Error::config(format!("invalid config: {e}")))?;
        Ok(cfg)
    }

    pub fn load(path: &Path, preset: Preset) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text, preset)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::config(format!("config serialization: {e}")))
    }

    /// Apply the output-directory environment override.
    pub fn apply_env(&mut self) {
        if let Some(dir) = std::env::var_os(OUTPUT_DIR_ENV).filter(|d| !d.is_empty()) {
            self.output_dir = PathBuf::from(dir);
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.stage1.validate()?;
        if self.stage1.stage != 1 {
            return Err(Error::config("[stage1] must have stage = 1"));
        }
        self.stage2.validate()?;
        if self.stage2.stage != 2 {
            return Err(Error::config("[stage2] must have stage = 2"));
        }
        if self.model.variant == Variant::Temporal {
            self.model.temporal.validate()?;
        }
        match self.dataset.source {
            DataSource::Synthetic => {
                self.dataset.synthetic.validate()?;
                if self.dataset.synthetic.num_classes != self.model.num_classes {
                    return Err(Error::config(format!(
                        "dataset has {} classes but the model predicts {}",
                        self.dataset.synthetic.num_classes, self.model.num_classes
                    )));
                }
            }
            DataSource::Vspw => {
                let root = self.vspw_root()?;
                if !root.is_dir() {
                    return Err(Error::io(
                        root,
                        std::io::Error::new(std::io::ErrorKind::NotFound, "dataset root not found"),
                    ));
                }
            }
        }
        Ok(())
    }

    fn vspw_root(&self) -> Result<&Path> {
        self.dataset
            .vspw_root
            .as_deref()
            .ok_or_else(|| Error::config("dataset.vspw_root is required for the vspw source"))
    }

    /// Synthetic clips of both splits, training first.
    pub fn synthetic_clips(&self) -> Result<(Vec<FrameClip>, Vec<FrameClip>)> {
        let n = self.dataset.synthetic.num_clips;
        let spec = DatasetSpec {
            num_clips: n + self.dataset.val_clips,
            ..self.dataset.synthetic.clone()
        };
        let train = (0..n).map(|i| generate_clip(&spec, i)).collect::<Result<_>>()?;
        let val = (n..spec.num_clips)
            .map(|i| generate_clip(&spec, i))
            .collect::<Result<_>>()?;
        Ok((train, val))
    }

    pub fn load_split(&self, split: Split) -> Result<Vec<FrameClip>> {
        match self.dataset.source {
            DataSource::Synthetic => {
                let (train, val) = self.synthetic_clips()?;
                Ok(match split {
                    Split::Train => train,
                    Split::Val => val,
                })
            }
            DataSource::Vspw => {
                let name = match split {
                    Split::Train => &self.dataset.train_split,
                    Split::Val => &self.dataset.val_split,
                };
                load_vspw_dir(self.vspw_root()?, name)?
                    .iter()
                    .map(|d| d.load(self.model.num_classes))
                    .collect()
            }
        }
    }
}

fn merge(base: &mut toml::Value, overlay: toml::Value) {
    match (base, overlay) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}
