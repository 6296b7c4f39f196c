//! Decathlon scoring: per-domain points `P · E_max^(−γ) · max(0, E_max − E)^γ`
//! summed over domains, baselines derived from a reference model's errors,
//! and evaluation with ground-truth or predicted domain routing.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapternet::{AdapterNet, DomainId};
use crate::data::{Dataset, NormStats};
use crate::engine::Scalar;
use crate::trainer::{logits, TrainError};

pub const DEFAULT_GAMMA: f64 = 2.0;
pub const DEFAULT_MAX_POINTS: f64 = 1000.0;

#[derive(Debug, Error)]
pub enum ScoreError {
    #[error("baseline error must lie in (0, 1], got {0}")]
    BadBaseline(f64),
    #[error("error rate {0} outside [0, 1]")]
    BadError(f64),
    #[error("domain {0} has no result")]
    MissingDomain(String),
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Train(#[from] TrainError),
}

/// Points for one domain. Zero at or above `e_max`, `max_points` at zero error.
pub fn domain_score(error: f64, e_max: f64, gamma: f64, max_points: f64) -> Result<f64, ScoreError> {
    if !(e_max > 0.0 && e_max <= 1.0) {
        return Err(ScoreError::BadBaseline(e_max));
    }
    if !(0.0..=1.0).contains(&error) {
        return Err(ScoreError::BadError(error));
    }
    Ok(max_points * ((e_max - error).max(0.0) / e_max).powf(gamma))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Baseline {
    pub e_max: f64,
    pub gamma: f64,
    pub max_points: f64,
}

impl Baseline {
    pub fn new(e_max: f64) -> Self {
        Self { e_max, gamma: DEFAULT_GAMMA, max_points: DEFAULT_MAX_POINTS }
    }

    /// The points coefficient `max_points · e_max^(−γ)`.
    pub fn points_coefficient(&self) -> f64 {
        self.max_points * self.e_max.powf(-self.gamma)
    }

    pub fn score(&self, error: f64) -> Result<f64, ScoreError> {
        domain_score(error, self.e_max, self.gamma, self.max_points)
    }

    fn check(&self) -> Result<(), ScoreError> {
        if !(self.e_max > 0.0 && self.e_max <= 1.0) {
            return Err(ScoreError::BadBaseline(self.e_max));
        }
        if !(self.gamma >= 1.0) || !(self.max_points > 0.0) {
            return Err(ScoreError::Invalid(format!("gamma must be ≥ 1 and max points positive: {self:?}")));
        }
        Ok(())
    }
}

/// Domain name → baseline. Iteration (and summation) is in name order.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BaselineTable {
    pub domains: BTreeMap<String, Baseline>,
}

impl BaselineTable {
    pub fn validate(&self) -> Result<(), ScoreError> {
        self.domains.values().try_for_each(Baseline::check)
    }
}

/// `E_max = min(1, factor · E_ref)` for every domain.
pub fn baselines_from_reference(reference_errors: &BTreeMap<String, f64>, factor: f64) -> Result<BaselineTable, ScoreError> {
    if !(factor >= 1.0) {
        return Err(ScoreError::Invalid(format!("baseline factor {factor} must be at least 1")));
    }
    let mut domains = BTreeMap::new();
    for (name, &e) in reference_errors {
        if !(e > 0.0 && e <= 1.0) {
            return Err(ScoreError::BadBaseline(e));
        }
        domains.insert(name.clone(), Baseline::new((factor * e).min(1.0)));
    }
    Ok(BaselineTable { domains })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalMode {
    OracleDomain,
    PredictedDomain,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DomainResult {
    pub error: f64,
    pub accuracy: f64,
    pub count: usize,
}

impl DomainResult {
    pub fn from_accuracy(accuracy: f64, count: usize) -> Self {
        Self { error: 1.0 - accuracy, accuracy, count }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub mode: EvalMode,
    pub domains: BTreeMap<String, DomainResult>,
    /// Fraction of test images routed to their own domain (predicted mode).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domain_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainScore {
    pub error: f64,
    pub e_max: f64,
    pub score: f64,
    pub rounded: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub domains: BTreeMap<String, DomainScore>,
    pub total: f64,
    pub total_rounded: i64,
}

impl ScoreReport {
    /// Fixed-width text table with two-decimal and rounded columns.
    pub fn to_table(&self) -> String {
        let width = self.domains.keys().map(String::len).max().unwrap_or(0).max(6);
        let mut out = format!("{:<width$}  {:>8}  {:>8}  {:>10}  {:>6}\n", "domain", "error", "e_max", "score", "points");
        for (name, s) in &self.domains {
            let _ = writeln!(out, "{name:<width$}  {:>8.4}  {:>8.4}  {:>10.2}  {:>6}", s.error, s.e_max, s.score, s.rounded);
        }
        let _ = writeln!(out, "{:<width$}  {:>8}  {:>8}  {:>10.2}  {:>6}", "total", "", "", self.total, self.total_rounded);
        out
    }
}

/// Sums domain scores over every domain of `baselines`; each must have a result.
pub fn decathlon_score(results: &EvalResult, baselines: &BaselineTable) -> Result<ScoreReport, ScoreError> {
    baselines.validate()?;
    let mut domains = BTreeMap::new();
    let mut total = 0.0;
    for (name, base) in &baselines.domains {
        let r = results.domains.get(name).ok_or_else(|| ScoreError::MissingDomain(name.clone()))?;
        let score = base.score(r.error)?;
        total += score;
        domains.insert(name.clone(), DomainScore { error: r.error, e_max: base.e_max, score, rounded: score.round() as i64 });
    }
    Ok(ScoreReport { domains, total, total_rounded: total.round() as i64 })
}

/// One row of published decathlon numbers: the fully fine-tuned reference
/// accuracy, a method's accuracy on the same domain and its published score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PublishedVector {
    pub domain: &'static str,
    pub method: &'static str,
    pub reference_accuracy: f64,
    pub accuracy: f64,
    pub published_score: f64,
}

/// Aircraft and ImageNet rows of the published Visual Decathlon results
/// (accuracies in percent).
pub fn published_vectors() -> [PublishedVector; 3] {
    [
        PublishedVector {
            domain: "aircraft",
            method: "res-adapt-decay",
            reference_accuracy: 60.34,
            accuracy: 61.87,
            published_score: 270.0,
        },
        PublishedVector {
            domain: "imagenet",
            method: "scratch-plus",
            reference_accuracy: 59.87,
            accuracy: 59.67,
            published_score: 247.0,
        },
        PublishedVector {
            domain: "aircraft",
            method: "finetune",
            reference_accuracy: 60.34,
            accuracy: 60.34,
            published_score: 250.0,
        },
    ]
}

impl PublishedVector {
    pub fn score(&self) -> Result<f64, ScoreError> {
        let reference_error = 1.0 - self.reference_accuracy / 100.0;
        let e_max = (2.0 * reference_error).min(1.0);
        domain_score(1.0 - self.accuracy / 100.0, e_max, DEFAULT_GAMMA, DEFAULT_MAX_POINTS)
    }
}

/// A domain's test split together with its normalization statistics.
#[derive(Debug, Clone, Copy)]
pub struct TestSet<'a> {
    pub domain: DomainId,
    pub data: &'a Dataset,
    pub stats: &'a NormStats,
}

/// Routes every test image through its ground-truth domain.
pub fn evaluate_oracle<T: Scalar>(net: &AdapterNet<T>, sets: &[TestSet<'_>]) -> Result<EvalResult, ScoreError> {
    let routes: Vec<Vec<DomainId>> = sets.iter().map(|s| vec![s.domain; s.data.len()]).collect();
    evaluate_routed(net, sets, &routes, EvalMode::OracleDomain)
}

/// Classifies each image's domain with `predictor` (single head with one
/// class per test set, in `sets` order), then routes it to that domain.
pub fn evaluate_predicted<T: Scalar>(
    net: &AdapterNet<T>,
    sets: &[TestSet<'_>],
    predictor: &AdapterNet<T>,
    predictor_stats: &NormStats,
) -> Result<EvalResult, ScoreError> {
    let routes = predict_routes(predictor, predictor_stats, sets)?;
    evaluate_routed(net, sets, &routes, EvalMode::PredictedDomain)
}

/// Predicted domain ids for every image of every set.
pub fn predict_routes<T: Scalar>(
    predictor: &AdapterNet<T>,
    predictor_stats: &NormStats,
    sets: &[TestSet<'_>],
) -> Result<Vec<Vec<DomainId>>, ScoreError> {
    let heads = predictor.num_domains();
    let classes = predictor.domain(0).map_err(TrainError::from)?.classes;
    if heads != 1 || classes != sets.len() {
        return Err(ScoreError::Invalid(format!(
            "domain predictor has {heads} head(s) with {classes} classes for {} domains",
            sets.len()
        )));
    }
    sets.iter()
        .map(|s| {
            let l = logits(predictor, 0, s.data, predictor_stats)?;
            Ok(l.argmax_rows().into_iter().map(|k| sets[k].domain).collect())
        })
        .collect()
}

/// Evaluates with explicit per-image routes. An image routed to a domain
/// other than its own counts as an error: label spaces of different domains
/// are disjoint.
pub fn evaluate_routed<T: Scalar>(
    net: &AdapterNet<T>,
    sets: &[TestSet<'_>],
    routes: &[Vec<DomainId>],
    mode: EvalMode,
) -> Result<EvalResult, ScoreError> {
    if routes.len() != sets.len() || routes.iter().zip(sets).any(|(r, s)| r.len() != s.data.len()) {
        return Err(ScoreError::Invalid("one route per test image is required".into()));
    }
    let mut domains = BTreeMap::new();
    let (mut routed_right, mut total) = (0, 0);
    for (set, route) in sets.iter().zip(routes) {
        let name = net.domain(set.domain).map_err(TrainError::from)?.name.clone();
        if set.data.is_empty() {
            return Err(ScoreError::Train(TrainError::EmptySplit("test")));
        }
        let own: Vec<usize> = (0..set.data.len()).filter(|&i| route[i] == set.domain).collect();
        routed_right += own.len();
        total += set.data.len();
        let mut hits = 0;
        if !own.is_empty() {
            let sub = set.data.subset(&own);
            let pred = logits(net, set.domain, &sub, set.stats)?.argmax_rows();
            hits = pred.iter().zip(&sub.labels).filter(|(p, &l)| **p == l as usize).count();
        }
        let accuracy = hits as f64 / set.data.len() as f64;
        domains.insert(name, DomainResult::from_accuracy(accuracy, set.data.len()));
    }
    let domain_accuracy = (mode == EvalMode::PredictedDomain).then(|| routed_right as f64 / total as f64);
    Ok(EvalResult { mode, domains, domain_accuracy })
}

/// Builds the domain-labelled union of several datasets: label `k` marks
/// samples of `parts[k]`.
pub fn domain_labelled(parts: &[&Dataset]) -> Result<Dataset, ScoreError> {
    let mut relabelled = Vec::with_capacity(parts.len());
    for (k, p) in parts.iter().enumerate() {
        let mut d = (*p).clone();
        d.labels = vec![k as u16; d.len()];
        relabelled.push(d);
    }
    let refs: Vec<&Dataset> = relabelled.iter().collect();
    let mut out = Dataset::concat(&refs).map_err(|e| ScoreError::Invalid(e.to_string()))?;
    out.provenance = "domain-labelled union".into();
    Ok(out)
}
