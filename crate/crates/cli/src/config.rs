//! The run configuration document (TOML).

use std::path::Path;

use flipsbir::encoders::{CnnEncoderConfig, EncoderConfig};
use flipsbir::sampling::BatchSpec;
use flipsbir::synth::SynthSpec;
use flipsbir::training::{LossConfig, TrainSchedule};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub test_fraction: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self { test_fraction: 0.1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub ks: Vec<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { ks: vec![1, 2, 5, 10] }
    }
}

/// Every setting a command may read. Sections left out of the file keep their defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub synth: SynthSpec,
    pub split: SplitConfig,
    pub batch: BatchSpec,
    pub loss: LossConfig,
    pub schedule: TrainSchedule,
    pub eval: EvalConfig,
    /// Defaults to a CNN sized to the training data.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub photo_encoder: Option<EncoderConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sketch_encoder: Option<EncoderConfig>,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {}", path.display(), e.message())))
    }

    /// `--seed` replaces every seed in the document.
    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        if let Some(s) = seed {
            self.synth.seed = s;
            self.batch.seed = s;
            self.schedule.seed = s;
        }
        self
    }

    /// The encoder for one modality: the configured one, or the default CNN
    /// resized to `[channels, h, w]` images and `classes` categories.
    pub fn encoder(configured: &Option<EncoderConfig>, shape: [usize; 3], classes: usize) -> EncoderConfig {
        configured.clone().unwrap_or_else(|| {
            EncoderConfig::Cnn(CnnEncoderConfig {
                in_channels: shape[0],
                input_size: (shape[1], shape[2]),
                num_classes: classes,
                ..CnnEncoderConfig::default()
            })
        })
    }
}

/// The default document, for `--help`.
pub fn default_document() -> String {
    let body = toml::to_string(&RunConfig::default()).unwrap_or_default();
    let cnn = toml::to_string(&EncoderConfig::Cnn(CnnEncoderConfig::default())).unwrap_or_default();
    format!(
        "CONFIG FILE (TOML, unknown keys rejected). Defaults:\n\n{body}\n\
         # photo_encoder / sketch_encoder are optional; when absent each modality uses\n\
         # this CNN with in_channels, input_size and num_classes taken from the data.\n\
         # kind = \"vit\" selects the transformer instead.\n\
         [photo_encoder]\n{cnn}"
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_default() {
        let c: RunConfig = toml::from_str("").unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.schedule.batch_size, 128);
        assert_eq!(c.loss.margin, 3.0);
    }

    #[test]
    fn default_document_parses_back() {
        let text = toml::to_string(&RunConfig::default()).unwrap();
        assert_eq!(toml::from_str::<RunConfig>(&text).unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(toml::from_str::<RunConfig>("[loss]\nmargn = 2.0\n").is_err());
        assert!(toml::from_str::<RunConfig>("colour = 1\n").is_err());
        assert!(toml::from_str::<RunConfig>("[photo_encoder]\nkind = \"cnn\"\nstage_channel = [4]\n").is_err());
    }

    #[test]
    fn encoder_tables_parse() {
        let c: RunConfig = toml::from_str(
            "[photo_encoder]\nkind = \"vit\"\npatch_size = 4\n\n[sketch_encoder]\nkind = \"cnn\"\nstage_channels = [4, 8]\n",
        )
        .unwrap();
        assert!(matches!(c.photo_encoder, Some(EncoderConfig::Vit(ref v)) if v.patch_size == 4));
        assert!(matches!(c.sketch_encoder, Some(EncoderConfig::Cnn(ref v)) if v.stage_channels == [4, 8]));
    }

    #[test]
    fn seed_override_reaches_every_section() {
        let c = RunConfig::default().with_seed(Some(9));
        assert_eq!((c.synth.seed, c.batch.seed, c.schedule.seed), (9, 9, 9));
    }
}
