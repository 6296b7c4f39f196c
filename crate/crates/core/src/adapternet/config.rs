use serde::{Deserialize, Serialize};

/// How a network specializes itself per domain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdapterMode {
    /// Shared batch norm everywhere; only classifier heads are per domain.
    None,
    /// Per-domain batch norm after every shared convolution.
    BnOnly,
    /// Per-domain residual adapter unit after every shared convolution.
    SeriesAdapter,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockSpec {
    pub units: usize,
    pub width: usize,
    /// Stride of the first unit of the block.
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainHead {
    pub name: String,
    pub classes: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub preset: String,
    pub blocks: Vec<BlockSpec>,
    pub input_size: usize,
    #[serde(default = "default_in_channels")]
    pub in_channels: usize,
    pub adapter_mode: AdapterMode,
    #[serde(default)]
    pub domains: Vec<DomainHead>,
    #[serde(default)]
    pub seed: u64,
}

fn default_in_channels() -> usize {
    3
}

impl NetworkConfig {
    /// Three blocks of two units, widths 8/16/32, 32x32 input.
    pub fn desk(domains: Vec<DomainHead>) -> Self {
        Self {
            preset: "desk".into(),
            blocks: three_blocks(2, [8, 16, 32]),
            input_size: 32,
            in_channels: 3,
            adapter_mode: AdapterMode::SeriesAdapter,
            domains,
            seed: 0,
        }
    }

    /// Three blocks of four units, widths 64/128/256, 64x64 input.
    pub fn resnet28(domains: Vec<DomainHead>) -> Self {
        Self {
            preset: "resnet28".into(),
            blocks: three_blocks(4, [64, 128, 256]),
            input_size: 64,
            in_channels: 3,
            adapter_mode: AdapterMode::SeriesAdapter,
            domains,
            seed: 0,
        }
    }

    pub fn with_mode(mut self, mode: AdapterMode) -> Self {
        self.adapter_mode = mode;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn domain_index(&self, name: &str) -> Option<usize> {
        self.domains.iter().position(|d| d.name == name)
    }
}

pub(crate) fn three_blocks(units: usize, widths: [usize; 3]) -> Vec<BlockSpec> {
    widths
        .iter()
        .enumerate()
        .map(|(i, &width)| BlockSpec { units, width, stride: if i == 0 { 1 } else { 2 } })
        .collect()
}

/// Domain predictor for a main network: three blocks of two units at half
/// the main widths, no adapters, one head over `domain_names`.
pub fn domain_predictor_config(main: &NetworkConfig, domain_names: &[String]) -> NetworkConfig {
    let widths: Vec<usize> = main.blocks.iter().map(|b| (b.width / 2).max(1)).collect();
    let blocks = (0..3)
        .map(|i| BlockSpec {
            units: 2,
            width: widths[i.min(widths.len() - 1)],
            stride: if i == 0 { 1 } else { 2 },
        })
        .collect();
    NetworkConfig {
        preset: format!("{}-domain-predictor", main.preset),
        blocks,
        input_size: main.input_size,
        in_channels: main.in_channels,
        adapter_mode: AdapterMode::None,
        domains: vec![DomainHead { name: "domain".into(), classes: domain_names.len() }],
        seed: main.seed,
    }
}
