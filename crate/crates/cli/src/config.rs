use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use resadapt::adapternet::{AdapterMode, BlockSpec, DomainHead, NetworkConfig};
use resadapt::data::DomainSpec;
use resadapt::trainer::{OptimSpec, Protocol};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

/// Environment variable that replaces the configured output root.
pub const OUTPUT_ENV: &str = "RESADAPT_OUT";

/// Network architecture fields; domain heads come from the domain list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSection {
    #[serde(default = "default_preset")]
    pub preset: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub blocks: Option<Vec<BlockSpec>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adapter_mode: Option<AdapterMode>,
}

fn default_preset() -> String {
    "desk".into()
}

impl Default for NetworkSection {
    fn default() -> Self {
        Self { preset: default_preset(), blocks: None, input_size: None, adapter_mode: None }
    }
}

impl NetworkSection {
    pub fn build(&self, heads: Vec<DomainHead>, seed: u64) -> Result<NetworkConfig, CliError> {
        let mut cfg = match self.preset.as_str() {
            "desk" => NetworkConfig::desk(heads),
            "resnet28" => NetworkConfig::resnet28(heads),
            other => return Err(CliError::Config(format!("unknown network preset {other:?} (expected desk or resnet28)"))),
        };
        if let Some(blocks) = &self.blocks {
            cfg.blocks = blocks.clone();
        }
        if let Some(size) = self.input_size {
            cfg.input_size = size;
        }
        if let Some(mode) = self.adapter_mode {
            cfg.adapter_mode = mode;
        }
        Ok(cfg.with_seed(seed))
    }
}

/// Settings of the auxiliary domain classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PredictorSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
}

impl Default for PredictorSection {
    fn default() -> Self {
        Self { epochs: 4, batch_size: 64, base_lr: 0.1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    pub domains: Vec<DomainSpec>,
    #[serde(default)]
    pub network: NetworkSection,
    #[serde(default)]
    pub optim: OptimSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub protocol: Option<Protocol>,
    #[serde(default)]
    pub final_pass_epochs: usize,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub predictor: PredictorSection,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

/// Parse failure with its position in the source document.
pub fn parse_error(path: &Path, e: &serde_json::Error) -> CliError {
    CliError::Config(format!("{}: parse error at line {}, column {}: {e}", path.display(), e.line(), e.column()))
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            CliError::Config(m) if m.starts_with("parse error") => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: Self = serde_json::from_str(text)
            .map_err(|e| CliError::Config(format!("parse error at line {}, column {}: {e}", e.line(), e.column())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        if self.experiment.is_empty() || self.experiment.contains(['/', '\\']) {
            return bad(format!("experiment name {:?} must be a plain non-empty name", self.experiment));
        }
        if self.domains.is_empty() {
            return bad("at least one domain is required".into());
        }
        let mut names = BTreeSet::new();
        for d in &self.domains {
            if !names.insert(d.name.as_str()) {
                return bad(format!("duplicate domain {:?}", d.name));
            }
            d.check().map_err(|e| CliError::Config(format!("domain {}: {e}", d.name)))?;
        }
        self.optim.validate().map_err(|e| CliError::Config(e.to_string()))?;
        if self.seeds.is_empty() {
            return bad("at least one seed is required".into());
        }
        let net = self.network.build(self.heads(), 0)?;
        if let Some(d) = self.domains.iter().find(|d| d.image_size != net.input_size || d.channels != net.in_channels) {
            return bad(format!(
                "domain {} has {}x{}x{} images but the network expects {}x{}x{}",
                d.name, d.channels, d.image_size, d.image_size, net.in_channels, net.input_size, net.input_size
            ));
        }
        Ok(())
    }

    pub fn heads(&self) -> Vec<DomainHead> {
        self.domains.iter().map(|d| DomainHead { name: d.name.clone(), classes: d.classes }).collect()
    }

    pub fn domain(&self, name: &str) -> Result<&DomainSpec, CliError> {
        self.domains.iter().find(|d| d.name == name).ok_or_else(|| {
            let known: Vec<&str> = self.domains.iter().map(|d| d.name.as_str()).collect();
            CliError::Usage(format!("unknown domain {name:?}; configured domains: {}", known.join(", ")))
        })
    }

    /// Canonical JSON of the effective configuration.
    pub fn canonical(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    /// SHA-256 of the canonical JSON, hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical().as_bytes()))
    }

    /// `<root>/<experiment>`, where the root is `$RESADAPT_OUT`, the
    /// configured output, or `out`.
    pub fn experiment_dir(&self) -> PathBuf {
        let root = std::env::var_os(OUTPUT_ENV)
            .map(PathBuf::from)
            .or_else(|| self.output.clone())
            .unwrap_or_else(|| PathBuf::from("out"));
        root.join(&self.experiment)
    }
}

/// Fixed directory layout of one experiment.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: PathBuf) -> Self {
        Self { root }
    }

    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn domain_dir(&self, name: &str) -> PathBuf {
        self.data().join(name)
    }

    pub fn manifest(&self, name: &str) -> PathBuf {
        self.domain_dir(name).join("manifest.json")
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }

    pub fn results(&self) -> PathBuf {
        self.root.join("results")
    }

    pub fn scores(&self) -> PathBuf {
        self.root.join("scores")
    }

    pub fn create(&self) -> Result<(), CliError> {
        for dir in [self.data(), self.checkpoints(), self.reports(), self.results(), self.scores()] {
            std::fs::create_dir_all(&dir).map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", dir.display())))?;
        }
        Ok(())
    }
}
