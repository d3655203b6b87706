//! The JSON run configuration: one section per pipeline stage.

use std::path::{Path, PathBuf};

use driftmask::augment::AugmentPlan;
use driftmask::detectors::{DetectorConfig, DetectorKind};
use driftmask::disentangle::DisentangleConfig;
use driftmask::evalkit::SweepSpec;
use driftmask::synthgen::SynthConfig;
use driftmask::tune::{EagConfig, GridSpec};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

/// Feature regime a detector is trained and scored in.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// Flattened raw signal samples.
    Raw,
    /// The full embedding.
    Embedding,
    /// The embedding restricted to a passed disentangler mask.
    #[value(name = "di", alias = "domain_invariant")]
    DomainInvariant,
}

impl Regime {
    pub const ALL: [Regime; 3] = [Regime::Raw, Regime::Embedding, Regime::DomainInvariant];

    pub fn name(self) -> &'static str {
        match self {
            Regime::Raw => "raw",
            Regime::Embedding => "embedding",
            Regime::DomainInvariant => "domain_invariant",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Built-in spectral featurizer.
    #[default]
    Spectral,
    /// Embeddings produced by an external exporter.
    External,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeaturizeConfig {
    pub method: Method,
    pub d: usize,
    /// Embedding file aligned by id with the signals, for `external`.
    pub embeddings: Option<PathBuf>,
}

impl Default for FeaturizeConfig {
    fn default() -> Self {
        FeaturizeConfig {
            method: Method::Spectral,
            d: 1024,
            embeddings: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    /// Signal file with every machine; when absent signals are generated
    /// from the `synth` section.
    pub signals: Option<PathBuf>,
    pub target_machine: String,
    /// Source machines; empty means every machine except the target.
    pub source_machines: Vec<String>,
    /// Multiplier on the generated per-machine record counts.
    pub scale: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            signals: None,
            target_machine: "M1".into(),
            source_machines: Vec::new(),
            scale: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TuneConfig {
    pub enabled: bool,
    pub grid: GridSpec,
    pub eag: EagConfig,
}

impl Default for TuneConfig {
    fn default() -> Self {
        TuneConfig {
            enabled: false,
            grid: GridSpec::standard(),
            eag: EagConfig::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub sweep: SweepSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub regime: Regime,
    pub regimes: Vec<Regime>,
    pub data: DataConfig,
    pub synth: SynthConfig,
    pub featurize: FeaturizeConfig,
    pub augment: Option<AugmentPlan>,
    pub disentangle: DisentangleConfig,
    /// Detectors to run, with the parameters used when tuning is off.
    pub detectors: Vec<DetectorConfig>,
    pub tune: TuneConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out: None,
            regime: Regime::Embedding,
            regimes: Regime::ALL.to_vec(),
            data: DataConfig::default(),
            synth: SynthConfig::default(),
            featurize: FeaturizeConfig::default(),
            augment: None,
            disentangle: DisentangleConfig::default(),
            detectors: DetectorKind::ALL.into_iter().map(DetectorConfig::default_for).collect(),
            tune: TuneConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))
    }

    /// Loads `path` when given, otherwise the defaults.
    pub fn load_or_default(path: Option<&Path>) -> CliResult<Self> {
        path.map_or_else(|| Ok(RunConfig::default()), RunConfig::load)
    }

    pub fn detector(&self, kind: DetectorKind) -> DetectorConfig {
        self.detectors
            .iter()
            .find(|c| c.kind() == kind)
            .cloned()
            .unwrap_or_else(|| DetectorConfig::default_for(kind))
    }

    pub fn validate(&self) -> CliResult<()> {
        if self.detectors.is_empty() {
            return Err(CliError::Usage("config lists no detectors".into()));
        }
        if self.regimes.is_empty() {
            return Err(CliError::Usage("config lists no regimes".into()));
        }
        let mut kinds: Vec<DetectorKind> = self.detectors.iter().map(DetectorConfig::kind).collect();
        kinds.sort();
        kinds.dedup();
        if kinds.len() != self.detectors.len() {
            return Err(CliError::Usage("config lists a detector twice".into()));
        }
        if !(self.data.scale > 0.0) {
            return Err(CliError::Usage(format!("data.scale must be positive, got {}", self.data.scale)));
        }
        if self.featurize.method == Method::External {
            if self.featurize.embeddings.is_none() {
                return Err(CliError::Usage("featurize.method external needs featurize.embeddings".into()));
            }
            if self.augment.is_some() {
                return Err(CliError::Usage(
                    "augmented records have no external embeddings; use the spectral method or drop augment".into(),
                ));
            }
        }
        Ok(())
    }
}
