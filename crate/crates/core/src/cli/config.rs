//! The single run configuration file and its canonical hash.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::digest;
use crate::error::{PecadError, Result};
use crate::nets::{Arch, ClassifierConfig, Scale, SegmenterConfig};
use crate::phantom::PhantomSpec;
use crate::preprocess::PreprocConfig;
use crate::training::{LossKind, TrainConfig};
use crate::triage::TriageConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    /// Manifest path; empty means `<output_dir>/data/manifest.json`.
    pub manifest: String,
    /// `[train, val, test]` patient fractions.
    pub split_ratios: [f64; 3],
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self {
            manifest: String::new(),
            split_ratios: [0.7, 0.2, 0.1],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSection {
    pub n_pe: usize,
    pub n_non_pe: usize,
    pub template: PhantomSpec,
}

impl Default for PhantomSection {
    fn default() -> Self {
        Self {
            n_pe: 6,
            n_non_pe: 6,
            template: PhantomSpec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub scale: Scale,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self { scale: Scale::Desk }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingSection {
    pub classifier: TrainConfig,
    pub fp_classifier: TrainConfig,
    pub segmenter: TrainConfig,
    /// Start the false-positive-reduction DRN from the trained DRN's weights.
    pub fp_warm_start: bool,
}

impl Default for TrainingSection {
    fn default() -> Self {
        let classifier = TrainConfig {
            base_lr: 1e-2,
            max_epochs: 40,
            batch_size: 8,
            augment: false,
            ..TrainConfig::default()
        };
        Self {
            fp_classifier: classifier.clone(),
            classifier,
            segmenter: TrainConfig {
                base_lr: 1e-2,
                max_epochs: 40,
                batch_size: 4,
                loss: LossKind::BcePlusDice,
                augment: true,
                ..TrainConfig::default()
            },
            fp_warm_start: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsSection {
    pub threshold: f64,
    pub mask_threshold: f64,
}

impl Default for MetricsSection {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            mask_threshold: 0.5,
        }
    }
}

/// Everything a run needs; see `pecad.example.toml` for the key-by-key layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub dataset: DatasetSection,
    pub preprocess: PreprocConfig,
    pub phantom: PhantomSection,
    pub classifier: ModelSection,
    pub fp_classifier: ModelSection,
    pub segmenter: ModelSection,
    pub training: TrainingSection,
    pub triage: TriageConfig,
    pub metrics: MetricsSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("pecad-out"),
            dataset: DatasetSection::default(),
            preprocess: PreprocConfig {
                crop_size: 64,
                ..PreprocConfig::default()
            },
            phantom: PhantomSection::default(),
            classifier: ModelSection::default(),
            fp_classifier: ModelSection::default(),
            segmenter: ModelSection::default(),
            training: TrainingSection::default(),
            triage: TriageConfig::default(),
            metrics: MetricsSection::default(),
        }
    }
}

/// Model slots of a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Target {
    Drn,
    Mixnet,
    FpNet,
    Segmenter,
}

impl Target {
    pub const ALL: [Target; 4] = [Target::Drn, Target::Mixnet, Target::FpNet, Target::Segmenter];

    pub fn name(self) -> &'static str {
        match self {
            Target::Drn => "drn",
            Target::Mixnet => "mixnet",
            Target::FpNet => "fpnet",
            Target::Segmenter => "segmenter",
        }
    }

    /// Offset added to the run seed for this model's initialisation and shuffling.
    pub fn seed_offset(self) -> u64 {
        match self {
            Target::Drn => 101,
            Target::Mixnet => 202,
            Target::FpNet => 303,
            Target::Segmenter => 404,
        }
    }
}

impl std::str::FromStr for Target {
    type Err = PecadError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "drn" => Ok(Target::Drn),
            "mixnet" => Ok(Target::Mixnet),
            "fpnet" => Ok(Target::FpNet),
            "segmenter" => Ok(Target::Segmenter),
            other => Err(PecadError::Invalid(format!(
                "unknown train target {other} (expected drn, mixnet, fpnet or segmenter)"
            ))),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| PecadError::format("config", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| PecadError::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| PecadError::format("config", e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.preprocess.validate()?;
        self.phantom.template.validate()?;
        self.triage.validate()?;
        for t in [&self.training.classifier, &self.training.fp_classifier, &self.training.segmenter] {
            t.validate()?;
        }
        let r = self.dataset.split_ratios;
        if r.iter().any(|v| !v.is_finite() || *v < 0.0) || (r.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(PecadError::Config(format!("split_ratios {r:?} must be non-negative and sum to 1")));
        }
        for t in [self.metrics.threshold, self.metrics.mask_threshold] {
            if !(0.0..=1.0).contains(&t) {
                return Err(PecadError::Config(format!("metrics threshold {t} outside [0, 1]")));
            }
        }
        if self.training.fp_warm_start && self.classifier.scale != self.fp_classifier.scale {
            return Err(PecadError::Config(
                "fp_warm_start needs classifier and fp_classifier at the same scale".into(),
            ));
        }
        for target in [Target::Drn, Target::Mixnet, Target::FpNet] {
            self.classifier_config(target)?.validate()?;
        }
        self.segmenter_config().validate()
    }

    /// SHA-256 of the canonical JSON form; independent of key order in the file.
    ///
    /// `output_dir` is left out so a relocated run keeps its identity.
    pub fn config_hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serialises");
        if let Some(m) = v.as_object_mut() {
            m.remove("output_dir");
        }
        digest::canonical_hash(&v)
    }

    /// `<output_dir>/run-<first 12 hex digits of the config hash>`.
    pub fn run_dir(&self) -> PathBuf {
        self.output_dir.join(format!("run-{}", &self.config_hash()[..12]))
    }

    pub fn data_dir(&self) -> PathBuf {
        self.output_dir.join("data")
    }

    pub fn manifest_path(&self) -> PathBuf {
        if self.dataset.manifest.is_empty() {
            self.data_dir().join("manifest.json")
        } else {
            PathBuf::from(&self.dataset.manifest)
        }
    }

    pub fn split_path(&self) -> PathBuf {
        self.run_dir().join("split.json")
    }

    pub fn checkpoint_path(&self, target: Target) -> PathBuf {
        self.run_dir().join("checkpoints").join(format!("{}.ckpt", target.name()))
    }

    pub fn log_path(&self, target: Target) -> PathBuf {
        self.run_dir().join("logs").join(format!("{}.jsonl", target.name()))
    }

    pub fn classifier_config(&self, target: Target) -> Result<ClassifierConfig> {
        let (arch, scale) = match target {
            Target::Drn => (Arch::Drn, self.classifier.scale),
            Target::Mixnet => (Arch::Mixnet, self.classifier.scale),
            Target::FpNet => (Arch::Drn, self.fp_classifier.scale),
            Target::Segmenter => {
                return Err(PecadError::Invalid("the segmenter is not a classifier".into()));
            }
        };
        Ok(ClassifierConfig::preset(arch, scale).with_input_size(self.preprocess.crop_size))
    }

    pub fn segmenter_config(&self) -> SegmenterConfig {
        SegmenterConfig::preset(self.segmenter.scale).with_input_size(self.preprocess.crop_size)
    }

    pub fn train_config(&self, target: Target) -> TrainConfig {
        let base = match target {
            Target::Drn | Target::Mixnet => &self.training.classifier,
            Target::FpNet => &self.training.fp_classifier,
            Target::Segmenter => &self.training.segmenter,
        };
        TrainConfig {
            seed: self.seed.wrapping_add(target.seed_offset()),
            ..base.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_ignores_key_order() {
        let a = RunConfig::from_toml_str("seed = 3\n[metrics]\nthreshold = 0.4\nmask_threshold = 0.6\n").unwrap();
        let b = RunConfig::from_toml_str("[metrics]\nmask_threshold = 0.6\nthreshold = 0.4\n\n").unwrap();
        let b = RunConfig { seed: 3, ..b };
        assert_eq!(a.config_hash(), b.config_hash());
        assert_ne!(a.config_hash(), RunConfig::default().config_hash());
        let moved = RunConfig { output_dir: "elsewhere".into(), ..a.clone() };
        assert_eq!(moved.config_hash(), a.config_hash());
    }

    #[test]
    fn shipped_example_parses() {
        let cfg = RunConfig::from_toml_str(include_str!("../../../../pecad.example.toml")).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.phantom.n_pe + cfg.phantom.n_non_pe, 12);
    }

    #[test]
    fn toml_round_trip() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml_string().unwrap();
        assert_eq!(RunConfig::from_toml_str(&text).unwrap(), cfg);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        assert!(RunConfig::from_toml_str("sed = 1\n").is_err());
        assert!(RunConfig::from_toml_str("[dataset]\nsplit_ratios = [0.5, 0.5, 0.5]\n").is_err());
        assert!(RunConfig::from_toml_str("[preprocess]\ncrop_size = 60\n").is_err());
    }
}
