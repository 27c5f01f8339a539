//! Versioned JSON run configuration shared by every CLI subcommand.
//!
//! Unknown keys are rejected at every level. A config is validated in full
//! before any data is read or any model is trained.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::AugmentationSpec;
use crate::curvature::CurvatureConfig;
use crate::data::{make_synthetic, read_dataset, Dataset, SyntheticSpec};
use crate::encoder::{EncoderParams, EncoderSpec};
use crate::error::{Error, Result};
use crate::loss::LossKind;
use crate::pipeline::RemovalStrategy;
use crate::trainer::{train_ssl, TrainConfig, TrainOutcome};

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    /// Binary dataset file, or CSV when the extension is `.csv`.
    Path(PathBuf),
    Synthetic(SyntheticSpec),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationVariant {
    pub label: String,
    pub augmentation: AugmentationSpec,
}

fn default_strategies() -> Vec<RemovalStrategy> {
    vec![RemovalStrategy::Top, RemovalStrategy::Bottom, RemovalStrategy::Random]
}

fn default_fractions() -> Vec<f64> {
    vec![0.0, 0.1, 0.2, 0.3]
}

fn default_bins() -> usize {
    30
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentParams {
    /// Training seeds of the two stability runs; defaults to
    /// `(train.seed, train.seed + 1)`.
    #[serde(default)]
    pub seeds: Option<(u64, u64)>,
    #[serde(default = "default_strategies")]
    pub strategies: Vec<RemovalStrategy>,
    #[serde(default = "default_fractions")]
    pub fractions: Vec<f64>,
    #[serde(default)]
    pub variants: Vec<AblationVariant>,
    #[serde(default = "default_bins")]
    pub histogram_bins: usize,
}

impl Default for ExperimentParams {
    fn default() -> Self {
        Self {
            seeds: None,
            strategies: default_strategies(),
            fractions: default_fractions(),
            variants: Vec::new(),
            histogram_bins: default_bins(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub dataset: DatasetSource,
    #[serde(default)]
    pub encoder: Option<EncoderSpec>,
    /// Pre-trained parameters; takes precedence over `encoder` and `train`.
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub train: Option<TrainConfig>,
    #[serde(default)]
    pub augmentation: Option<AugmentationSpec>,
    #[serde(default)]
    pub curvature: Option<CurvatureConfig>,
    #[serde(default)]
    pub experiment: ExperimentParams,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn new(dataset: DatasetSource) -> Self {
        Self {
            schema_version: CONFIG_SCHEMA_VERSION,
            dataset,
            encoder: None,
            checkpoint: None,
            train: None,
            augmentation: None,
            curvature: None,
            experiment: ExperimentParams::default(),
            output_dir: None,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "config schema_version {} is not supported (expected {CONFIG_SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if let DatasetSource::Synthetic(s) = &self.dataset {
            if s.clusters < 2 {
                return Err(Error::Config("synthetic dataset needs at least 2 clusters".into()));
            }
            if !(s.radius < s.outlier_spread) {
                return Err(Error::Config("synthetic radius must be below outlier_spread".into()));
            }
        }
        if let Some(e) = &self.encoder {
            e.validate()?;
        }
        if let Some(t) = &self.train {
            t.validate()?;
        }
        if let Some(a) = &self.augmentation {
            a.validate()?;
        }
        if let Some(c) = &self.curvature {
            c.validate()?;
        }
        if let Some((a, b)) = self.experiment.seeds {
            if a == b {
                return Err(Error::Config("stability seeds must differ".into()));
            }
        }
        if let Some(f) = self.experiment.fractions.iter().find(|f| !(0.0..=0.9).contains(*f)) {
            return Err(Error::Config(format!("removal fraction {f} outside [0, 0.9]")));
        }
        for v in &self.experiment.variants {
            v.augmentation.validate()?;
        }
        if self.experiment.histogram_bins == 0 {
            return Err(Error::Config("histogram_bins must be at least 1".into()));
        }
        if self.checkpoint.is_none() && self.encoder.is_none() {
            return Err(Error::Config("missing field `encoder` (or a `checkpoint`)".into()));
        }
        Ok(())
    }

    pub fn load_dataset(&self) -> Result<Dataset> {
        match &self.dataset {
            DatasetSource::Path(p) => read_dataset(p),
            DatasetSource::Synthetic(s) => Ok(make_synthetic(s)?.data),
        }
    }

    pub fn augmentation(&self) -> AugmentationSpec {
        self.augmentation.clone().unwrap_or_default()
    }

    pub fn train_config(&self) -> TrainConfig {
        self.train.clone().unwrap_or_default()
    }

    pub fn encoder_spec(&self) -> Result<&EncoderSpec> {
        self.encoder
            .as_ref()
            .ok_or_else(|| Error::Config("missing field `encoder`".into()))
    }

    pub fn loss(&self) -> LossKind {
        self.train.as_ref().map(|t| t.loss).unwrap_or_default()
    }

    /// The configured curvature, or the rank-one closed form when it applies
    /// and dense Gauss-Newton otherwise.
    pub fn curvature_for(&self, params: &EncoderParams) -> CurvatureConfig {
        self.curvature.unwrap_or_else(|| match self.loss() {
            LossKind::SquaredEuclidean => CurvatureConfig::default_for(params.kind()),
            LossKind::CosineDistance => CurvatureConfig::default(),
        })
    }

    /// Encoder parameters to score with: the checkpoint if given, else a
    /// trained encoder when `train` is set, else the seeded initialisation.
    pub fn resolve_params(&self, data: &Dataset) -> Result<(EncoderParams, Option<TrainOutcome>)> {
        let params = if let Some(path) = &self.checkpoint {
            let file = std::fs::File::open(path)?;
            (EncoderParams::read_checkpoint(std::io::BufReader::new(file))?, None)
        } else {
            let spec = self.encoder_spec()?;
            match &self.train {
                Some(cfg) => {
                    let out = train_ssl(spec, data, cfg)?;
                    (out.params.clone(), Some(out))
                }
                None => (EncoderParams::init_seeded(spec)?, None),
            }
        };
        if params.0.input_dim() != data.dim() {
            return Err(Error::shape("encoder input", params.0.input_dim(), data.dim()));
        }
        Ok(params)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "schema_version": 1,
        "dataset": {"synthetic": {"clusters": 2, "per_cluster": 5, "dim": 4, "seed": 3}},
        "encoder": {"kind": "Linear", "input_dim": 4, "embed_dim": 2},
        "augmentation": {"family": {"kind": "gaussian_noise", "mu": 0.05, "sigma": 0.2}, "epsilon": 0.5}
    }"#;

    #[test]
    fn minimal_config_parses_and_round_trips() {
        let cfg = RunConfig::from_json(MINIMAL).unwrap();
        assert_eq!(cfg.augmentation().epsilon, 0.5);
        assert_eq!(cfg.experiment, ExperimentParams::default());
        let back = RunConfig::from_json(&cfg.to_json().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn missing_epsilon_is_named() {
        let text = MINIMAL.replace(r#", "epsilon": 0.5"#, "");
        let err = RunConfig::from_json(&text).unwrap_err();
        assert_eq!(err.exit_code(), 1);
        assert!(err.to_string().contains("epsilon"), "{err}");
    }

    #[test]
    fn unknown_keys_rejected() {
        let text = MINIMAL.replace(r#""schema_version": 1,"#, r#""schema_version": 1, "lambda": 0.1,"#);
        assert!(matches!(RunConfig::from_json(&text), Err(Error::Config(_))));
        let nested = MINIMAL.replace(r#""dim": 4,"#, r#""dim": 4, "noise": 1,"#);
        assert!(RunConfig::from_json(&nested).is_err());
    }

    #[test]
    fn wrong_version_rejected() {
        let text = MINIMAL.replace(r#""schema_version": 1"#, r#""schema_version": 2"#);
        let err = RunConfig::from_json(&text).unwrap_err();
        assert!(err.to_string().contains("schema_version"));
    }

    #[test]
    fn equal_stability_seeds_rejected() {
        let mut cfg = RunConfig::from_json(MINIMAL).unwrap();
        cfg.experiment.seeds = Some((4, 4));
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn untrained_params_match_dataset() {
        let cfg = RunConfig::from_json(MINIMAL).unwrap();
        let data = cfg.load_dataset().unwrap();
        let (p, outcome) = cfg.resolve_params(&data).unwrap();
        assert!(outcome.is_none());
        assert_eq!(p.input_dim(), 4);
        assert_eq!(data.len(), 10);
    }
}
