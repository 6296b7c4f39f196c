//! Domain-parametric residual networks.
//!
//! A network is a stem convolution followed by residual units. Every unit
//! holds two shared 3x3 filter banks; after each of them sits a per-domain
//! stage whose form depends on [`AdapterMode`]:
//!
//! * `SeriesAdapter`: `A(x) = BN_post(x̂ + (α ∗ x̂ + β))` with `x̂ = BN_pre(x)`
//!   and `α` a bank of 1x1 filters. With `α = 0, β = 0` the inner residual
//!   map is exactly the identity.
//! * `BnOnly`: a per-domain batch norm.
//! * `None`: a batch norm shared by all domains.
//!
//! A unit computes `y = skip(x) + A₂(w₂ ∗ relu(A₁(w₁ ∗ x)))`, where the skip
//! is the identity or a shared 1x1 strided projection when the shape changes.
//! The feature map then goes through relu, global average pooling and the
//! domain's linear head.

mod checkpoint;
mod config;
mod count;
mod filter_bank;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{BnStats, EngineError, Mode, Scalar, Tape, Tensor, Var, BN_EPSILON, BN_MOMENTUM};

pub use checkpoint::{from_bytes, load, save, to_bytes, CheckpointError, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{domain_predictor_config, AdapterMode, BlockSpec, DomainHead, NetworkConfig};
pub use count::{count_parameters, ParameterCount, UnitCount};
pub use filter_bank::FilterBank;

pub type DomainId = usize;
pub type ParamId = usize;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("unknown domain {0}")]
    UnknownDomain(DomainId),
    #[error("invalid network configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Engine(#[from] EngineError),
}

/// Which domains a parameter serves.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Role {
    DomainAgnostic,
    DomainSpecific(DomainId),
    Classifier(DomainId),
}

impl Role {
    pub fn domain(self) -> Option<DomainId> {
        match self {
            Role::DomainAgnostic => None,
            Role::DomainSpecific(d) | Role::Classifier(d) => Some(d),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ParamKind {
    ConvWeight,
    ConvBias,
    AdapterWeight,
    AdapterBias,
    BnScale,
    BnBias,
    HeadWeight,
    HeadBias,
}

impl ParamKind {
    /// Weight decay applies to filter banks and classifier weights only.
    pub fn decay_eligible(self) -> bool {
        matches!(self, ParamKind::ConvWeight | ParamKind::AdapterWeight | ParamKind::HeadWeight)
    }

    pub fn is_batch_norm(self) -> bool {
        matches!(self, ParamKind::BnScale | ParamKind::BnBias)
    }
}

/// A named parameter tensor with an immutable role.
#[derive(Debug, Clone)]
pub struct ParamGroup<T> {
    name: String,
    role: Role,
    kind: ParamKind,
    pub tensor: Tensor<T>,
}

impl<T: Scalar> ParamGroup<T> {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn kind(&self) -> ParamKind {
        self.kind
    }

    pub fn decay_eligible(&self) -> bool {
        self.kind.decay_eligible()
    }

    pub fn numel(&self) -> usize {
        self.tensor.numel()
    }
}

/// Running statistics of one batch norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedStats<T> {
    pub name: String,
    pub role: Role,
    pub stats: BnStats<T>,
}

#[derive(Debug, Clone, Copy)]
struct ConvSlot {
    weight: ParamId,
    bias: ParamId,
    stride: usize,
    pad: usize,
}

#[derive(Debug, Clone, Copy)]
struct BnSlot {
    scale: ParamId,
    bias: ParamId,
    stats: usize,
}

#[derive(Debug, Clone, Copy)]
struct AdapterSlot {
    pre: BnSlot,
    weight: ParamId,
    bias: ParamId,
    post: BnSlot,
}

#[derive(Debug, Clone)]
enum DomainStage {
    SharedBn(BnSlot),
    Bn(Vec<BnSlot>),
    Adapter(Vec<AdapterSlot>),
}

#[derive(Debug, Clone)]
struct UnitLayout {
    conv1: ConvSlot,
    stage1: DomainStage,
    conv2: ConvSlot,
    stage2: DomainStage,
    projection: Option<ConvSlot>,
    in_channels: usize,
    width: usize,
}

#[derive(Debug, Clone, Copy)]
struct HeadSlot {
    weight: ParamId,
    bias: ParamId,
}

#[derive(Debug, Clone)]
struct Layout {
    stem: ConvSlot,
    stem_stage: DomainStage,
    units: Vec<UnitLayout>,
    heads: Vec<HeadSlot>,
}

/// Selects one of the two adapter positions in a residual unit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdapterPosition {
    First,
    Second,
}

/// The result of a recorded forward pass.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub logits: Var,
    /// Every parameter read by the pass, with its tape handle.
    pub bound: Vec<(ParamId, Var)>,
}

/// A multi-domain network `Φ(x, d) = head_d(features(x; shared, specific_d))`.
#[derive(Debug, Clone)]
pub struct AdapterNet<T> {
    config: NetworkConfig,
    params: Vec<ParamGroup<T>>,
    stats: Vec<NamedStats<T>>,
    layout: Layout,
}

enum Init {
    HeNormal { fan_in: usize },
    Uniform { bound: f64 },
    Zero,
    One,
}

fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3))
}

struct Builder<T> {
    seed: u64,
    params: Vec<ParamGroup<T>>,
    stats: Vec<NamedStats<T>>,
}

impl<T: Scalar> Builder<T> {
    fn param(&mut self, name: String, shape: &[usize], role: Role, kind: ParamKind, init: Init) -> ParamId {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ fnv1a(&name));
        let tensor = match init {
            Init::Zero => Tensor::zeros(shape),
            Init::One => Tensor::ones(shape),
            Init::HeNormal { fan_in } => {
                let std = (2.0 / fan_in as f64).sqrt();
                Tensor::from_fn(shape, |_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    T::cast_f64(z * std)
                })
            }
            Init::Uniform { bound } => {
                let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
                Tensor::from_fn(shape, |_| T::cast_f64(dist.sample(&mut rng)))
            }
        };
        self.params.push(ParamGroup { name, role, kind, tensor });
        self.params.len() - 1
    }

    fn conv(&mut self, name: &str, cout: usize, cin: usize, k: usize, stride: usize, role: Role) -> ConvSlot {
        let weight = self.param(
            format!("{name}.weight"),
            &[cout, cin, k, k],
            role,
            ParamKind::ConvWeight,
            Init::HeNormal { fan_in: cin * k * k },
        );
        let bias = self.param(format!("{name}.bias"), &[cout], role, ParamKind::ConvBias, Init::Zero);
        ConvSlot { weight, bias, stride, pad: k / 2 }
    }

    fn bn(&mut self, name: &str, c: usize, role: Role) -> BnSlot {
        let scale = self.param(format!("{name}.scale"), &[c], role, ParamKind::BnScale, Init::One);
        let bias = self.param(format!("{name}.bias"), &[c], role, ParamKind::BnBias, Init::Zero);
        self.stats.push(NamedStats { name: name.to_string(), role, stats: BnStats::new(c) });
        BnSlot { scale, bias, stats: self.stats.len() - 1 }
    }

    fn adapter(&mut self, name: &str, c: usize, role: Role) -> AdapterSlot {
        let pre = self.bn(&format!("{name}.pre"), c, role);
        let weight = self.param(format!("{name}.conv.weight"), &[c, c, 1, 1], role, ParamKind::AdapterWeight, Init::Zero);
        let bias = self.param(format!("{name}.conv.bias"), &[c], role, ParamKind::AdapterBias, Init::Zero);
        let post = self.bn(&format!("{name}.post"), c, role);
        AdapterSlot { pre, weight, bias, post }
    }

    fn stage(&mut self, name: &str, c: usize, mode: AdapterMode, domains: usize) -> DomainStage {
        match mode {
            AdapterMode::None => DomainStage::SharedBn(self.bn(&format!("{name}.bn"), c, Role::DomainAgnostic)),
            AdapterMode::BnOnly => DomainStage::Bn(
                (0..domains).map(|d| self.bn(&format!("{name}.bn.d{d}"), c, Role::DomainSpecific(d))).collect(),
            ),
            AdapterMode::SeriesAdapter => DomainStage::Adapter(
                (0..domains)
                    .map(|d| self.adapter(&format!("{name}.adapter.d{d}"), c, Role::DomainSpecific(d)))
                    .collect(),
            ),
        }
    }
}

fn validate(config: &NetworkConfig) -> Result<(), NetError> {
    if config.domains.is_empty() {
        return Err(NetError::Config("at least one domain must be registered".into()));
    }
    if config.blocks.is_empty() || config.blocks.iter().any(|b| b.units == 0 || b.width == 0 || b.stride == 0) {
        return Err(NetError::Config("blocks need positive unit counts, widths and strides".into()));
    }
    if config.input_size == 0 || config.in_channels == 0 {
        return Err(NetError::Config("input size and channels must be positive".into()));
    }
    if let Some(d) = config.domains.iter().find(|d| d.classes == 0) {
        return Err(NetError::Config(format!("domain {} has no classes", d.name)));
    }
    let mut names: Vec<&str> = config.domains.iter().map(|d| d.name.as_str()).collect();
    names.sort_unstable();
    if names.windows(2).any(|w| w[0] == w[1]) {
        return Err(NetError::Config("domain names must be unique".into()));
    }
    Ok(())
}

impl<T: Scalar> AdapterNet<T> {
    /// Builds a network with seeded initialization: He-normal shared filters,
    /// zero adapters, unit-scale batch norms, small uniform heads.
    pub fn build(config: NetworkConfig) -> Result<Self, NetError> {
        validate(&config)?;
        let mode = config.adapter_mode;
        let nd = config.domains.len();
        let mut b = Builder { seed: config.seed, params: Vec::new(), stats: Vec::new() };

        let first = config.blocks[0].width;
        let stem = b.conv("stem.conv", first, config.in_channels, 3, 1, Role::DomainAgnostic);
        let stem_stage = match mode {
            AdapterMode::None => DomainStage::SharedBn(b.bn("stem.bn", first, Role::DomainAgnostic)),
            _ => DomainStage::Bn((0..nd).map(|d| b.bn(&format!("stem.bn.d{d}"), first, Role::DomainSpecific(d))).collect()),
        };

        let mut units = Vec::new();
        let mut cin = first;
        for (bi, block) in config.blocks.iter().enumerate() {
            for ui in 0..block.units {
                let stride = if ui == 0 { block.stride } else { 1 };
                let prefix = format!("block{bi}.unit{ui}");
                let c = block.width;
                let conv1 = b.conv(&format!("{prefix}.conv1"), c, cin, 3, stride, Role::DomainAgnostic);
                let stage1 = b.stage(&format!("{prefix}.stage1"), c, mode, nd);
                let conv2 = b.conv(&format!("{prefix}.conv2"), c, c, 3, 1, Role::DomainAgnostic);
                let stage2 = b.stage(&format!("{prefix}.stage2"), c, mode, nd);
                let projection = (stride != 1 || cin != c)
                    .then(|| b.conv(&format!("{prefix}.projection"), c, cin, 1, stride, Role::DomainAgnostic));
                units.push(UnitLayout { conv1, stage1, conv2, stage2, projection, in_channels: cin, width: c });
                cin = c;
            }
        }

        let heads = config
            .domains
            .iter()
            .enumerate()
            .map(|(d, head)| {
                let bound = 1.0 / (cin as f64).sqrt();
                let weight = b.param(
                    format!("head.d{d}.weight"),
                    &[head.classes, cin],
                    Role::Classifier(d),
                    ParamKind::HeadWeight,
                    Init::Uniform { bound },
                );
                let bias = b.param(format!("head.d{d}.bias"), &[head.classes], Role::Classifier(d), ParamKind::HeadBias, Init::Zero);
                HeadSlot { weight, bias }
            })
            .collect();

        Ok(Self {
            config,
            params: b.params,
            stats: b.stats,
            layout: Layout { stem, stem_stage, units, heads },
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn num_domains(&self) -> usize {
        self.config.domains.len()
    }

    pub fn domain(&self, d: DomainId) -> Result<&DomainHead, NetError> {
        self.config.domains.get(d).ok_or(NetError::UnknownDomain(d))
    }

    pub fn params(&self) -> &[ParamGroup<T>] {
        &self.params
    }

    pub fn running_stats(&self) -> &[NamedStats<T>] {
        &self.stats
    }

    pub fn running_stats_mut(&mut self) -> &mut [NamedStats<T>] {
        &mut self.stats
    }

    /// Mutable access to a parameter tensor. Name and role stay fixed.
    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id].tensor
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn num_units(&self) -> usize {
        self.layout.units.len()
    }

    /// Parameter ids of the 1x1 adapter filter bank and its bias for one
    /// adapter of `domain`, if the network has adapters.
    pub fn adapter_params(&self, unit: usize, pos: AdapterPosition, domain: DomainId) -> Option<(ParamId, ParamId)> {
        let u = self.layout.units.get(unit)?;
        let stage = match pos {
            AdapterPosition::First => &u.stage1,
            AdapterPosition::Second => &u.stage2,
        };
        match stage {
            DomainStage::Adapter(slots) => slots.get(domain).map(|s| (s.weight, s.bias)),
            _ => None,
        }
    }

    /// Sets every adapter filter bank and bias of `domain` to zero.
    pub fn zero_adapters(&mut self, domain: DomainId) {
        for unit in 0..self.num_units() {
            for pos in [AdapterPosition::First, AdapterPosition::Second] {
                if let Some((w, b)) = self.adapter_params(unit, pos, domain) {
                    self.params[w].tensor = Tensor::zeros(self.params[w].tensor.shape());
                    self.params[b].tensor = Tensor::zeros(self.params[b].tensor.shape());
                }
            }
        }
    }

    /// Returns a network with one more domain. Its specific parameters and
    /// running statistics are copied from `init_from` when given, otherwise
    /// freshly initialized; its head is always fresh.
    pub fn add_domain(&self, head: DomainHead, init_from: Option<DomainId>) -> Result<Self, NetError> {
        if let Some(src) = init_from {
            self.domain(src)?;
        }
        let new_d = self.num_domains();
        let mut config = self.config.clone();
        config.domains.push(head);
        let mut net = Self::build(config)?;
        let mut copied = vec![false; net.params.len()];
        for (i, p) in net.params.iter_mut().enumerate() {
            if let Some(old) = self.params.iter().find(|o| o.name == p.name) {
                p.tensor = old.tensor.clone();
                copied[i] = true;
            }
        }
        for s in net.stats.iter_mut() {
            if let Some(old) = self.stats.iter().find(|o| o.name == s.name) {
                s.stats = old.stats.clone();
            }
        }
        if let Some(src) = init_from {
            let (from, to) = (format!(".d{src}."), format!(".d{new_d}."));
            for i in 0..net.params.len() {
                if net.params[i].role == Role::DomainSpecific(new_d) {
                    let src_name = net.params[i].name.replace(&to, &from);
                    if let Some(old) = self.params.iter().find(|o| o.name == src_name) {
                        net.params[i].tensor = old.tensor.clone();
                    }
                }
            }
            let (from, to) = (format!(".d{src}"), format!(".d{new_d}"));
            for s in net.stats.iter_mut() {
                if s.role == Role::DomainSpecific(new_d) {
                    let src_name = s.name.replace(&to, &from);
                    if let Some(old) = self.stats.iter().find(|o| o.name == src_name) {
                        s.stats = old.stats.clone();
                    }
                }
            }
        }
        Ok(net)
    }

    /// Records a forward pass for `domain`. Parameters become tape leaves on
    /// first use; a parameter requires a gradient when `trainable[id]` is
    /// set. In train mode the domain's batch norm running statistics are
    /// updated.
    pub fn forward(
        &mut self,
        tape: &mut Tape<T>,
        x: Var,
        domain: DomainId,
        mode: Mode,
        trainable: Option<&[bool]>,
    ) -> Result<ForwardPass, NetError> {
        let mut ctx = Ctx::new(&self.params, &mut self.stats, trainable, mode);
        run(&self.config, &self.layout, &mut ctx, tape, x, domain)
    }

    /// Eval-mode logits for a batch. Does not modify the network.
    pub fn predict(&self, x: &Tensor<T>, domain: DomainId) -> Result<Tensor<T>, NetError> {
        let mut stats = self.stats.clone();
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone(), false);
        let mut ctx = Ctx::new(&self.params, &mut stats, None, Mode::Eval);
        let out = run(&self.config, &self.layout, &mut ctx, &mut tape, xv, domain)?;
        Ok(tape.value(out.logits).clone())
    }

    /// The residual part `x ↦ x + (α ∗ x + β)` of one adapter of `domain`,
    /// without its batch norms.
    pub fn adapter_residual(
        &self,
        tape: &mut Tape<T>,
        x: Var,
        unit: usize,
        pos: AdapterPosition,
        domain: DomainId,
    ) -> Result<Var, NetError> {
        let (w, b) = self.adapter_params(unit, pos, domain).ok_or(NetError::UnknownDomain(domain))?;
        let wv = tape.leaf(self.params[w].tensor.clone(), false);
        let bv = tape.leaf(self.params[b].tensor.clone(), false);
        adapter_residual(tape, x, wv, bv)
    }
}

fn adapter_residual<T: Scalar>(tape: &mut Tape<T>, x: Var, weight: Var, bias: Var) -> Result<Var, NetError> {
    let delta = tape.conv2d(x, weight, Some(bias), 1, 0)?;
    Ok(tape.add(x, delta)?)
}

struct Ctx<'a, T> {
    params: &'a [ParamGroup<T>],
    stats: &'a mut [NamedStats<T>],
    trainable: Option<&'a [bool]>,
    mode: Mode,
    vars: Vec<Option<Var>>,
    bound: Vec<(ParamId, Var)>,
}

impl<'a, T: Scalar> Ctx<'a, T> {
    fn new(params: &'a [ParamGroup<T>], stats: &'a mut [NamedStats<T>], trainable: Option<&'a [bool]>, mode: Mode) -> Self {
        Self { params, stats, trainable, mode, vars: vec![None; params.len()], bound: Vec::new() }
    }

    fn p(&mut self, tape: &mut Tape<T>, id: ParamId) -> Var {
        if let Some(v) = self.vars[id] {
            return v;
        }
        let requires = self.trainable.is_some_and(|m| m[id]);
        let v = tape.leaf(self.params[id].tensor.clone(), requires);
        self.vars[id] = Some(v);
        self.bound.push((id, v));
        v
    }

    fn conv(&mut self, tape: &mut Tape<T>, x: Var, c: ConvSlot) -> Result<Var, NetError> {
        let (w, b) = (self.p(tape, c.weight), self.p(tape, c.bias));
        Ok(tape.conv2d(x, w, Some(b), c.stride, c.pad)?)
    }

    fn bn(&mut self, tape: &mut Tape<T>, x: Var, s: BnSlot) -> Result<Var, NetError> {
        let (scale, bias) = (self.p(tape, s.scale), self.p(tape, s.bias));
        let mode = self.mode;
        Ok(tape.batch_norm(x, scale, bias, &mut self.stats[s.stats].stats, mode, BN_EPSILON, BN_MOMENTUM)?)
    }

    fn stage(&mut self, tape: &mut Tape<T>, x: Var, stage: &DomainStage, d: DomainId) -> Result<Var, NetError> {
        match stage {
            DomainStage::SharedBn(s) => self.bn(tape, x, *s),
            DomainStage::Bn(slots) => self.bn(tape, x, slots[d]),
            DomainStage::Adapter(slots) => {
                let a = slots[d];
                let xhat = self.bn(tape, x, a.pre)?;
                let (w, b) = (self.p(tape, a.weight), self.p(tape, a.bias));
                let r = adapter_residual(tape, xhat, w, b)?;
                self.bn(tape, r, a.post)
            }
        }
    }
}

fn run<T: Scalar>(
    config: &NetworkConfig,
    layout: &Layout,
    ctx: &mut Ctx<'_, T>,
    tape: &mut Tape<T>,
    x: Var,
    domain: DomainId,
) -> Result<ForwardPass, NetError> {
    if domain >= config.domains.len() {
        return Err(NetError::UnknownDomain(domain));
    }
    let shape = tape.value(x).shape();
    let expected = [config.in_channels, config.input_size, config.input_size];
    if shape.len() != 4 || shape[1..] != expected {
        return Err(EngineError::Shape(format!("network expects [N, {expected:?}] input, got {shape:?}")).into());
    }

    let h = ctx.conv(tape, x, layout.stem)?;
    let h = ctx.stage(tape, h, &layout.stem_stage, domain)?;
    let mut h = tape.relu(h);
    for unit in &layout.units {
        let r = ctx.conv(tape, h, unit.conv1)?;
        let r = ctx.stage(tape, r, &unit.stage1, domain)?;
        let r = tape.relu(r);
        let r = ctx.conv(tape, r, unit.conv2)?;
        let r = ctx.stage(tape, r, &unit.stage2, domain)?;
        let skip = match unit.projection {
            Some(p) => ctx.conv(tape, h, p)?,
            None => h,
        };
        h = tape.add(skip, r)?;
    }
    let h = tape.relu(h);
    let pooled = tape.global_avg_pool(h)?;
    let head = layout.heads[domain];
    let (w, b) = (ctx.p(tape, head.weight), ctx.p(tape, head.bias));
    let logits = tape.linear(pooled, w, Some(b))?;
    Ok(ForwardPass { logits, bound: std::mem::take(&mut ctx.bound) })
}
