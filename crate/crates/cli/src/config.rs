//! Run configuration: a TOML file with `[dataset]`, `[model]`,
//! `[training]` and `[paths]` sections, each optional and defaulted.
//! Command-line flags override individual fields, and the fully resolved
//! result is echoed into the output directory so a run can be reproduced
//! from its artifacts alone.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use rmfn_core::model::{RmfnConfig, RmfnVariant};
use rmfn_core::region::GridSpec;
use rmfn_core::synth::SynthSpec;
use rmfn_core::train::TrainConfig;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    /// original | a | b | c (rmfn_a etc. also accepted)
    pub variant: String,
    /// width multiplier for every conv and hidden FC layer
    pub channel_scale: f64,
    /// dropout rate after the first two FC layers
    pub dropout: f64,
    /// region grids; both default to the standard 224 grids and must be
    /// given explicitly for any other input side
    pub scale1: Option<GridSpec>,
    pub scale2: Option<GridSpec>,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            variant: "c".into(),
            channel_scale: 1.0,
            dropout: 0.5,
            scale1: None,
            scale2: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    /// where `gen` writes and `train`/`eval` read the dataset
    pub dataset_dir: PathBuf,
    /// where run artifacts land: config echo, run.log, trace, metrics
    pub out_dir: PathBuf,
    /// trained model location; defaults to `<out_dir>/model.ckpt`
    pub checkpoint: Option<PathBuf>,
}

impl Default for PathsSection {
    fn default() -> Self {
        PathsSection {
            dataset_dir: "data".into(),
            out_dir: "out".into(),
            checkpoint: None,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: SynthSpec,
    pub model: ModelSection,
    pub training: TrainConfig,
    pub paths: PathsSection,
}

/// Field-level command-line overrides, applied on top of the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    /// replaces both the dataset seed and the training seed
    pub seed: Option<u64>,
    pub variant: Option<String>,
    pub channel_scale: Option<f64>,
    pub epochs: Option<usize>,
    pub batch: Option<usize>,
    pub out: Option<PathBuf>,
}

impl RunConfig {
    pub fn load(path: Option<&Path>, overrides: &Overrides) -> Result<Self, String> {
        let mut config = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| format!("cannot read config {}: {e}", p.display()))?;
                toml::from_str(&text).map_err(|e| format!("config {}: {e}", p.display()))?
            }
            None => RunConfig::default(),
        };
        if let Some(seed) = overrides.seed {
            config.dataset.seed = seed;
            config.training.seed = seed;
        }
        if let Some(v) = &overrides.variant {
            config.model.variant = v.clone();
        }
        if let Some(s) = overrides.channel_scale {
            config.model.channel_scale = s;
        }
        if let Some(e) = overrides.epochs {
            config.training.epochs = e;
        }
        if let Some(b) = overrides.batch {
            config.training.batch_size = b;
        }
        if let Some(out) = &overrides.out {
            config.paths.out_dir = out.clone();
        }
        config.resolve()?;
        Ok(config)
    }

    /// Fills defaulted fields in place and validates what can be checked
    /// without touching the filesystem.
    fn resolve(&mut self) -> Result<(), String> {
        self.dataset.validate().map_err(|e| e.to_string())?;
        self.training.validate().map_err(|e| e.to_string())?;
        self.model.variant.parse::<RmfnVariant>().map_err(|e| e.to_string())?;
        let side = self.dataset.image_side;
        match (&self.model.scale1, &self.model.scale2) {
            (Some(_), Some(_)) => {}
            (None, None) if side == 224 => {
                self.model.scale1 = Some(GridSpec::new(7, 32, 0, 224, 2));
                self.model.scale2 = Some(GridSpec::new(5, 48, 4, 224, 4));
            }
            _ => {
                return Err(format!(
                    "image_side {side} needs explicit model.scale1 and model.scale2 grids \
                     (defaults exist only for 224)"
                ));
            }
        }
        if self.paths.checkpoint.is_none() {
            self.paths.checkpoint = Some(self.paths.out_dir.join("model.ckpt"));
        }
        Ok(())
    }

    /// The architecture this run trains or evaluates.
    pub fn model_config(&self) -> Result<RmfnConfig, String> {
        let variant = self.model.variant.parse::<RmfnVariant>().map_err(|e| e.to_string())?;
        RmfnConfig::vgg11_scaled(
            variant,
            self.dataset.image_side,
            1,
            self.model.channel_scale,
            self.model.dropout,
            self.model.scale1.expect("resolved"),
            self.model.scale2.expect("resolved"),
        )
        .map_err(|e| e.to_string())
    }

    pub fn checkpoint_path(&self) -> &Path {
        self.paths.checkpoint.as_deref().expect("resolved")
    }

    /// Writes the fully resolved config into the output directory. The
    /// echo is deterministic, so identical runs produce identical bytes.
    pub fn echo(&self, out_dir: &Path) -> Result<(), String> {
        let text = toml::to_string_pretty(self).map_err(|e| e.to_string())?;
        let path = out_dir.join("effective-config.toml");
        std::fs::write(&path, text).map_err(|e| format!("{}: {e}", path.display()))
    }
}
