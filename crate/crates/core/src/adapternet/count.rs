use serde::Serialize;

use super::{AdapterNet, ConvSlot, DomainStage, ParamId, Role};
use crate::engine::Scalar;

/// Parameter counts of one residual unit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct UnitCount {
    pub in_channels: usize,
    pub width: usize,
    pub kernel: usize,
    /// Both shared filter banks with their biases.
    pub agnostic: usize,
    /// Per-domain stages of the unit, for one domain.
    pub specific: usize,
    /// Shared 1x1 projection on the skip path, when present.
    pub projection: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ParameterCount {
    /// Every shared parameter, including stem and projections.
    pub agnostic: usize,
    /// Domain-specific parameters (adapters and batch norms), per domain.
    pub specific_per_domain: Vec<usize>,
    pub classifier_per_domain: Vec<usize>,
    /// Shared stem and projection parameters (also part of `agnostic`).
    pub stem_and_projections: usize,
    pub units: Vec<UnitCount>,
}

impl ParameterCount {
    pub fn total(&self) -> usize {
        self.agnostic + self.specific_per_domain.iter().sum::<usize>() + self.classifier_per_domain.iter().sum::<usize>()
    }

    /// Shared parameters of a unit with `h x h` filter banks of `c` channels,
    /// as stated by the closed-form count `2(h²C² + hC)`.
    pub fn agnostic_formula(c: usize, h: usize) -> usize {
        2 * (h * h * c * c + h * c)
    }

    /// Per-domain parameters of a unit with `c` channels, `2(C² + 5C)`.
    pub fn specific_formula(c: usize) -> usize {
        2 * (c * c + 5 * c)
    }
}

pub fn count_parameters<T: Scalar>(net: &AdapterNet<T>) -> ParameterCount {
    let numel = |id: ParamId| net.params[id].numel();
    let conv = |c: &ConvSlot| numel(c.weight) + numel(c.bias);
    let stage_specific = |s: &DomainStage| match s {
        DomainStage::SharedBn(_) => 0,
        DomainStage::Bn(slots) => numel(slots[0].scale) + numel(slots[0].bias),
        DomainStage::Adapter(slots) => {
            let a = slots[0];
            [a.pre.scale, a.pre.bias, a.weight, a.bias, a.post.scale, a.post.bias].iter().map(|&id| numel(id)).sum()
        }
    };
    let units: Vec<UnitCount> = net
        .layout
        .units
        .iter()
        .map(|u| UnitCount {
            in_channels: u.in_channels,
            width: u.width,
            kernel: net.params[u.conv2.weight].tensor.shape()[2],
            agnostic: conv(&u.conv1) + conv(&u.conv2),
            specific: stage_specific(&u.stage1) + stage_specific(&u.stage2),
            projection: u.projection.as_ref().map_or(0, conv),
        })
        .collect();

    let nd = net.num_domains();
    let mut agnostic = 0;
    let mut specific = vec![0; nd];
    let mut classifier = vec![0; nd];
    for p in &net.params {
        match p.role {
            Role::DomainAgnostic => agnostic += p.numel(),
            Role::DomainSpecific(d) => specific[d] += p.numel(),
            Role::Classifier(d) => classifier[d] += p.numel(),
        }
    }
    let unit_agnostic: usize = units.iter().map(|u| u.agnostic).sum();
    ParameterCount {
        agnostic,
        specific_per_domain: specific,
        classifier_per_domain: classifier,
        stem_and_projections: agnostic - unit_agnostic,
        units,
    }
}
