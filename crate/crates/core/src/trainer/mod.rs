//! Training protocols over [`AdapterNet`]: masked momentum SGD with
//! per-group weight decay, a step learning-rate schedule, best-validation
//! model selection and round-robin joint training.

mod optim;

use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapternet::{AdapterNet, DomainId, NetError, ParamKind, Role};
use crate::data::{normalize, DataError, Dataset, NormStats};
use crate::engine::{Mode, Scalar, Tape, Tensor};

pub use optim::{lr_at, sgd_update, LrDrop, OptimSpec, Sgd};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid optimizer settings: {0}")]
    Optim(String),
    #[error("unknown protocol {0:?}")]
    UnknownProtocol(String),
    #[error("training diverged: {0}")]
    Divergent(String),
    #[error("empty {0} split")]
    EmptySplit(&'static str),
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Data(#[from] DataError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Protocol {
    Scratch,
    FeatureExtract,
    Finetune,
    BnAdapt,
    ResAdapt,
    JointRoundRobin,
}

impl Protocol {
    pub const ALL: [Protocol; 6] = [
        Protocol::Scratch,
        Protocol::FeatureExtract,
        Protocol::Finetune,
        Protocol::BnAdapt,
        Protocol::ResAdapt,
        Protocol::JointRoundRobin,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Protocol::Scratch => "scratch",
            Protocol::FeatureExtract => "feature-extract",
            Protocol::Finetune => "finetune",
            Protocol::BnAdapt => "bn-adapt",
            Protocol::ResAdapt => "res-adapt",
            Protocol::JointRoundRobin => "joint-round-robin",
        }
    }

    /// Whether the protocol starts from a previously trained network.
    pub fn needs_source(self) -> bool {
        !matches!(self, Protocol::Scratch | Protocol::JointRoundRobin)
    }

    /// Feature extraction runs the frozen network in inference mode, so the
    /// new domain's batch norm statistics stay those of the source.
    fn forward_mode(self) -> Mode {
        match self {
            Protocol::FeatureExtract => Mode::Eval,
            _ => Mode::Train,
        }
    }
}

impl FromStr for Protocol {
    type Err = TrainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Protocol::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| TrainError::UnknownProtocol(s.to_string()))
    }
}

/// Which parameter groups a protocol may change when training `domains`.
pub fn freezing_mask<T: Scalar>(net: &AdapterNet<T>, protocol: Protocol, domains: &[DomainId]) -> Result<Vec<bool>, TrainError> {
    for &d in domains {
        net.domain(d)?;
    }
    let mine = |role: Role| role.domain().is_some_and(|d| domains.contains(&d));
    Ok(net
        .params()
        .iter()
        .map(|p| match protocol {
            Protocol::Scratch | Protocol::Finetune => true,
            Protocol::FeatureExtract => matches!(p.role(), Role::Classifier(_)) && mine(p.role()),
            Protocol::BnAdapt => match p.role() {
                Role::Classifier(_) => mine(p.role()),
                Role::DomainSpecific(_) => mine(p.role()) && p.kind().is_batch_norm(),
                Role::DomainAgnostic => false,
            },
            Protocol::ResAdapt => mine(p.role()),
            Protocol::JointRoundRobin => p.role() == Role::DomainAgnostic || mine(p.role()),
        })
        .collect())
}

/// Only the 1x1 adapter filter banks and biases of `domain`.
pub fn adapter_mask<T: Scalar>(net: &AdapterNet<T>, domain: DomainId) -> Vec<bool> {
    net.params()
        .iter()
        .map(|p| {
            p.role() == Role::DomainSpecific(domain) && matches!(p.kind(), ParamKind::AdapterWeight | ParamKind::AdapterBias)
        })
        .collect()
}

/// Trainable parameter counts by role.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Census {
    pub agnostic: usize,
    pub specific: usize,
    pub classifier: usize,
    pub model_total: usize,
}

impl Census {
    pub fn of<T: Scalar>(net: &AdapterNet<T>, mask: &[bool]) -> Self {
        let mut c = Census { agnostic: 0, specific: 0, classifier: 0, model_total: 0 };
        for (p, &on) in net.params().iter().zip(mask) {
            c.model_total += p.numel();
            if on {
                match p.role() {
                    Role::DomainAgnostic => c.agnostic += p.numel(),
                    Role::DomainSpecific(_) => c.specific += p.numel(),
                    Role::Classifier(_) => c.classifier += p.numel(),
                }
            }
        }
        c
    }

    pub fn trainable(&self) -> usize {
        self.agnostic + self.specific + self.classifier
    }

    pub fn fraction(&self) -> f64 {
        self.trainable() as f64 / self.model_total as f64
    }
}

/// The three splits of one domain with statistics from its train split.
#[derive(Debug, Clone)]
pub struct DomainData {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
    pub stats: NormStats,
}

impl DomainData {
    pub fn new(train: Dataset, val: Dataset, test: Dataset) -> Result<Self, TrainError> {
        if train.is_empty() {
            return Err(TrainError::EmptySplit("train"));
        }
        let stats = NormStats::compute(&train)?;
        Ok(Self { train, val, test, stats })
    }

    pub fn with_stats(train: Dataset, val: Dataset, test: Dataset, stats: NormStats) -> Self {
        Self { train, val, test, stats }
    }

    pub fn batch<T: Scalar>(&self, ds: &Dataset, indices: &[usize]) -> Result<Tensor<T>, TrainError> {
        Ok(normalize(ds, indices, Some(&self.stats))?)
    }
}

const EVAL_BATCH: usize = 250;

/// Eval-mode logits for every sample of `ds`, `[N, classes]`.
pub fn logits<T: Scalar>(net: &AdapterNet<T>, domain: DomainId, ds: &Dataset, stats: &NormStats) -> Result<Tensor<T>, TrainError> {
    if ds.is_empty() {
        return Err(TrainError::EmptySplit("evaluation"));
    }
    let classes = net.domain(domain)?.classes;
    let mut out = Vec::with_capacity(ds.len() * classes);
    let idx: Vec<usize> = (0..ds.len()).collect();
    for chunk in idx.chunks(EVAL_BATCH) {
        let x = normalize(ds, chunk, Some(stats))?;
        out.extend_from_slice(net.predict(&x, domain)?.data());
    }
    Tensor::from_vec(&[ds.len(), classes], out).map_err(|e| TrainError::Net(e.into()))
}

/// Fraction of samples whose arg-max logit equals the label.
pub fn accuracy<T: Scalar>(net: &AdapterNet<T>, domain: DomainId, ds: &Dataset, stats: &NormStats) -> Result<f64, TrainError> {
    let pred = logits(net, domain, ds, stats)?.argmax_rows();
    let hits = pred.iter().zip(&ds.labels).filter(|(p, &l)| **p == l as usize).count();
    Ok(hits as f64 / ds.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    /// Per trained domain, in the report's domain order.
    pub val_accuracy: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub protocol: Protocol,
    pub seed: u64,
    pub domains: Vec<String>,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    /// Validation accuracy of the retained model, per domain.
    pub val_accuracy: Vec<f64>,
    pub test_accuracy: Vec<f64>,
    pub census: Census,
    /// Wall-clock seconds; excluded from [`TrainReport::to_records`].
    #[serde(skip)]
    pub elapsed_secs: f64,
}

impl TrainReport {
    /// JSON lines: one record per epoch followed by a summary record.
    pub fn to_records(&self) -> String {
        let mut out = String::new();
        for e in &self.epochs {
            out += &serde_json::json!({ "record": "epoch", "epoch": e.epoch, "lr": e.lr, "train_loss": e.train_loss, "val_accuracy": e.val_accuracy }).to_string();
            out.push('\n');
        }
        let summary = serde_json::json!({
            "record": "summary",
            "protocol": self.protocol,
            "seed": self.seed,
            "domains": self.domains,
            "best_epoch": self.best_epoch,
            "val_accuracy": self.val_accuracy,
            "test_accuracy": self.test_accuracy,
            "census": self.census,
        });
        out += &summary.to_string();
        out.push('\n');
        out
    }
}

fn mix(seed: u64, domain: DomainId, pass: usize) -> u64 {
    let mut z = seed ^ (domain as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (pass as u64).wrapping_mul(0xc2b2_ae3d_27d4_eb4f);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z ^ (z >> 31)
}

/// Shuffled training order of `domain` for its `pass`-th sweep.
fn epoch_order(n: usize, seed: u64, domain: DomainId, pass: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(seed, domain, pass)));
    order
}

/// One forward, backward and update on a batch. Returns the batch loss.
#[allow(clippy::too_many_arguments)]
fn train_step<T: Scalar>(
    net: &mut AdapterNet<T>,
    sgd: &mut Sgd<T>,
    data: &DomainData,
    domain: DomainId,
    indices: &[usize],
    mask: &[bool],
    mode: Mode,
    lr: f64,
    momentum: f64,
    decay: f64,
) -> Result<f64, TrainError> {
    let x = data.batch::<T>(&data.train, indices)?;
    let labels: Vec<usize> = indices.iter().map(|&i| data.train.labels[i] as usize).collect();
    let mut tape = Tape::new();
    let xv = tape.leaf(x, false);
    let pass = net.forward(&mut tape, xv, domain, mode, Some(mask))?;
    let loss = tape.softmax_cross_entropy(pass.logits, &labels).map_err(NetError::from)?;
    let value = tape.value(loss).item().as_f64();
    if !value.is_finite() {
        return Err(TrainError::Divergent(format!("loss {value} on domain {domain}")));
    }
    tape.backward(loss).map_err(NetError::from)?;
    let grads: Vec<_> = pass
        .bound
        .iter()
        .filter(|(id, _)| mask[*id])
        .filter_map(|&(id, v)| tape.grad(v).map(|g| (id, g.clone())))
        .collect();
    sgd.step(net, &grads, lr, momentum, decay)?;
    Ok(value)
}

fn check_data(data: &DomainData) -> Result<(), TrainError> {
    if data.train.is_empty() {
        return Err(TrainError::EmptySplit("train"));
    }
    if data.val.is_empty() {
        return Err(TrainError::EmptySplit("validation"));
    }
    Ok(())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Trains `domain` under `protocol`, keeping the parameters of the epoch
/// with the best validation accuracy (earliest on ties).
pub fn train_domain<T: Scalar>(
    net: &mut AdapterNet<T>,
    domain: DomainId,
    data: &DomainData,
    optim: &OptimSpec,
    protocol: Protocol,
    seed: u64,
) -> Result<TrainReport, TrainError> {
    if protocol == Protocol::JointRoundRobin {
        return train_joint(net, &[domain], &[data], optim, 0, seed);
    }
    optim.validate()?;
    check_data(data)?;
    let start = Instant::now();
    let mask = freezing_mask(net, protocol, &[domain])?;
    let census = Census::of(net, &mask);
    let mode = protocol.forward_mode();
    let decay = optim.decay_for(domain);
    let mut sgd = Sgd::new(net.params().len());
    let mut epochs = Vec::with_capacity(optim.epochs);
    let mut best: Option<(f64, usize, AdapterNet<T>)> = None;
    for epoch in 0..optim.epochs {
        let lr = lr_at(optim, epoch);
        let order = epoch_order(data.train.len(), seed, domain, epoch);
        let mut losses = Vec::new();
        for batch in order.chunks(optim.batch_size) {
            losses.push(train_step(net, &mut sgd, data, domain, batch, &mask, mode, lr, optim.momentum, decay)?);
        }
        let val = accuracy(net, domain, &data.val, &data.stats)?;
        epochs.push(EpochRecord { epoch, lr, train_loss: mean(&losses), val_accuracy: vec![val] });
        if best.as_ref().is_none_or(|(b, _, _)| val > *b) {
            best = Some((val, epoch, net.clone()));
        }
    }
    let (val, best_epoch, kept) = best.expect("at least one epoch");
    *net = kept;
    let test = if data.test.is_empty() { f64::NAN } else { accuracy(net, domain, &data.test, &data.stats)? };
    Ok(TrainReport {
        protocol,
        seed,
        domains: vec![net.domain(domain)?.name.clone()],
        epochs,
        best_epoch,
        val_accuracy: vec![val],
        test_accuracy: vec![test],
        census,
        elapsed_secs: start.elapsed().as_secs_f64(),
    })
}

/// Round-robin joint training: each meta-iteration takes one batch from
/// every domain in order and updates immediately with that domain's groups
/// and the shared groups. An epoch is one sweep over the largest training
/// split; smaller domains reshuffle when exhausted. The model with the best
/// mean validation accuracy is kept, then `final_pass_epochs` of
/// adapter-only training follow for each domain.
pub fn train_joint<T: Scalar>(
    net: &mut AdapterNet<T>,
    domains: &[DomainId],
    data: &[&DomainData],
    optim: &OptimSpec,
    final_pass_epochs: usize,
    seed: u64,
) -> Result<TrainReport, TrainError> {
    optim.validate()?;
    if domains.is_empty() || domains.len() != data.len() {
        return Err(TrainError::Invalid("joint training needs one dataset per listed domain".into()));
    }
    for d in data {
        check_data(d)?;
    }
    let start = Instant::now();
    let masks: Vec<Vec<bool>> =
        domains.iter().map(|&d| freezing_mask(net, Protocol::JointRoundRobin, &[d])).collect::<Result<_, _>>()?;
    let census = Census::of(net, &freezing_mask(net, Protocol::JointRoundRobin, domains)?);
    let steps = data.iter().map(|d| d.train.len().div_ceil(optim.batch_size)).max().unwrap_or(0);

    struct Stream {
        pass: usize,
        order: Vec<usize>,
        at: usize,
    }
    let mut streams: Vec<Stream> = domains
        .iter()
        .zip(data)
        .map(|(&d, dd)| Stream { pass: 0, order: epoch_order(dd.train.len(), seed, d, 0), at: 0 })
        .collect();

    let mut sgd = Sgd::new(net.params().len());
    let mut epochs = Vec::with_capacity(optim.epochs);
    let mut best: Option<(f64, usize, Vec<f64>, AdapterNet<T>)> = None;
    for epoch in 0..optim.epochs {
        let lr = lr_at(optim, epoch);
        let mut losses = Vec::new();
        for _ in 0..steps {
            for (k, (&d, dd)) in domains.iter().zip(data).enumerate() {
                let s = &mut streams[k];
                if s.at >= s.order.len() {
                    s.pass += 1;
                    s.order = epoch_order(dd.train.len(), seed, d, s.pass);
                    s.at = 0;
                }
                let end = (s.at + optim.batch_size).min(s.order.len());
                let batch = s.order[s.at..end].to_vec();
                s.at = end;
                losses.push(train_step(net, &mut sgd, dd, d, &batch, &masks[k], Mode::Train, lr, optim.momentum, optim.decay_for(d))?);
            }
        }
        let val: Vec<f64> =
            domains.iter().zip(data).map(|(&d, dd)| accuracy(net, d, &dd.val, &dd.stats)).collect::<Result<_, _>>()?;
        let m = mean(&val);
        epochs.push(EpochRecord { epoch, lr, train_loss: mean(&losses), val_accuracy: val.clone() });
        if best.as_ref().is_none_or(|(b, ..)| m > *b) {
            best = Some((m, epoch, val, net.clone()));
        }
    }
    let (_, best_epoch, mut val, kept) = best.expect("at least one epoch");
    *net = kept;

    if final_pass_epochs > 0 {
        let pass = OptimSpec { epochs: final_pass_epochs, ..optim.clone() };
        for (k, (&d, dd)) in domains.iter().zip(data).enumerate() {
            let mask = adapter_mask(net, d);
            if !mask.iter().any(|&m| m) {
                continue;
            }
            let before = net.clone();
            let mut sgd = Sgd::new(net.params().len());
            let mut kept: Option<AdapterNet<T>> = None;
            for epoch in 0..pass.epochs {
                let lr = lr_at(&pass, epoch);
                let order = epoch_order(dd.train.len(), seed ^ 0xf1a1, d, epoch);
                for batch in order.chunks(pass.batch_size) {
                    train_step(net, &mut sgd, dd, d, batch, &mask, Mode::Train, lr, pass.momentum, pass.decay_for(d))?;
                }
                let acc = accuracy(net, d, &dd.val, &dd.stats)?;
                if acc > val[k] {
                    val[k] = acc;
                    kept = Some(net.clone());
                }
            }
            *net = kept.unwrap_or(before);
        }
    }

    let test = domains
        .iter()
        .zip(data)
        .map(|(&d, dd)| if dd.test.is_empty() { Ok(f64::NAN) } else { accuracy(net, d, &dd.test, &dd.stats) })
        .collect::<Result<_, _>>()?;
    Ok(TrainReport {
        protocol: Protocol::JointRoundRobin,
        seed,
        domains: domains.iter().map(|&d| net.domain(d).map(|h| h.name.clone())).collect::<Result<_, _>>()?,
        epochs,
        best_epoch,
        val_accuracy: val,
        test_accuracy: test,
        census,
        elapsed_secs: start.elapsed().as_secs_f64(),
    })
}
