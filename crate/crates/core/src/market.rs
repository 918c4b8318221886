//! Static market description, validation, and the edge-indexed price state.
//!
//! A [`MarketInstance`] is the serializable description of sellers, producers
//! and buyers. [`Market`] is the validated, index-resolved form every solver
//! works on. Prices always live on edges: one entry per (buyer, model) pair and
//! one per (dataset, model) pair, laid out model by model.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on the per-model Shapley column sum.
pub const SHARE_SUM_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub id: String,
    /// Per-use offset paid to the seller; the seller's price floor.
    pub kappa_d: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BuyerEdge {
    pub id: String,
    /// Revenue weight of this buyer in the model's effective training revenue.
    pub omega: f64,
    /// Maximum willingness to pay.
    pub reserve: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub id: String,
    /// Per-sale offset of the producer.
    pub kappa_m: f64,
    /// Producer margin applied to data expenditure.
    pub delta: f64,
    pub datasets: Vec<String>,
    pub buyers: Vec<BuyerEdge>,
}

impl ModelSpec {
    /// Total buyer weight. Always derived from the edges.
    pub fn rho(&self) -> f64 {
        self.buyers.iter().map(|b| b.omega).sum()
    }
}

/// Seller list cap on a (dataset, model) edge.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CapEntry {
    pub dataset: String,
    pub model: String,
    pub cap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShapleyColumn {
    pub model: String,
    pub shares: BTreeMap<String, f64>,
}

/// Normalized per-model contribution shares.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ShapleyTable {
    pub columns: Vec<ShapleyColumn>,
}

impl ShapleyTable {
    pub fn column(&self, model: &str) -> Option<&ShapleyColumn> {
        self.columns.iter().find(|c| c.model == model)
    }

    pub fn share(&self, model: &str, dataset: &str) -> Option<f64> {
        self.column(model)
            .and_then(|c| c.shares.get(dataset).copied())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarketInstance {
    pub datasets: Vec<DatasetSpec>,
    pub models: Vec<ModelSpec>,
    #[serde(default)]
    pub caps: Vec<CapEntry>,
    pub shapley: ShapleyTable,
}

/// One failed invariant.
#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub field: String,
    pub invariant: String,
    pub value: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {} (got {})", self.field, self.invariant, self.value)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    fn push(&mut self, field: impl Into<String>, invariant: &str, value: impl fmt::Display) {
        self.violations.push(Violation {
            field: field.into(),
            invariant: invariant.to_string(),
            value: value.to_string(),
        });
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.violations.is_empty() {
            return write!(f, "ok");
        }
        let parts: Vec<String> = self.violations.iter().map(|v| v.to_string()).collect();
        write!(f, "{}", parts.join("; "))
    }
}

impl MarketInstance {
    /// Checks every standing condition. Violations are returned as data.
    pub fn validate(&self) -> ValidationReport {
        let mut report = ValidationReport::default();

        let mut dataset_ids = BTreeSet::new();
        for (i, d) in self.datasets.iter().enumerate() {
            if !dataset_ids.insert(d.id.as_str()) {
                report.push(format!("/datasets/{i}/id"), "dataset ids must be unique", &d.id);
            }
            if !(d.kappa_d.is_finite() && d.kappa_d > 0.0) {
                report.push(
                    format!("/datasets/{i}/kappa_d"),
                    "kappa_d must be strictly positive",
                    d.kappa_d,
                );
            }
        }

        let mut model_ids = BTreeSet::new();
        for (j, m) in self.models.iter().enumerate() {
            let at = format!("/models/{j}");
            if !model_ids.insert(m.id.as_str()) {
                report.push(format!("{at}/id"), "model ids must be unique", &m.id);
            }
            if !(m.kappa_m.is_finite() && m.kappa_m > 0.0) {
                report.push(format!("{at}/kappa_m"), "kappa_m must be strictly positive", m.kappa_m);
            }
            if !(m.delta.is_finite() && m.delta >= 0.0) {
                report.push(format!("{at}/delta"), "delta must be nonnegative", m.delta);
            }
            if m.datasets.is_empty() {
                report.push(format!("{at}/datasets"), "model must use at least one dataset", 0);
            }
            if m.buyers.is_empty() {
                report.push(format!("{at}/buyers"), "model must have at least one buyer edge", 0);
            }
            let mut used = BTreeSet::new();
            for (i, d) in m.datasets.iter().enumerate() {
                if !used.insert(d.as_str()) {
                    report.push(format!("{at}/datasets/{i}"), "dataset listed twice for model", d);
                }
                if !dataset_ids.contains(d.as_str()) {
                    report.push(format!("{at}/datasets/{i}"), "model references an unknown dataset", d);
                }
            }
            let mut buyer_ids = BTreeSet::new();
            for (k, b) in m.buyers.iter().enumerate() {
                if !buyer_ids.insert(b.id.as_str()) {
                    report.push(format!("{at}/buyers/{k}/id"), "buyer ids must be unique within a model", &b.id);
                }
                if !(b.omega.is_finite() && b.omega >= 0.0) {
                    report.push(format!("{at}/buyers/{k}/omega"), "omega must be nonnegative", b.omega);
                }
                if !(b.reserve.is_finite() && b.reserve > 0.0) {
                    report.push(format!("{at}/buyers/{k}/reserve"), "reserve must be strictly positive", b.reserve);
                }
            }
            let rho = m.rho();
            if !(rho.is_finite() && (0.0..1.0).contains(&rho)) {
                report.push(format!("{at}/buyers"), "rho must lie in [0,1)", rho);
            }

            // Shapley column for this model.
            let columns: Vec<(usize, &ShapleyColumn)> = self
                .shapley
                .columns
                .iter()
                .enumerate()
                .filter(|(_, c)| c.model == m.id)
                .collect();
            match columns.as_slice() {
                [] => report.push("/shapley", "every model needs a Shapley column", &m.id),
                [(c, col)] => {
                    let at = format!("/shapley/{c}/shares");
                    let expected: BTreeSet<&str> = m.datasets.iter().map(String::as_str).collect();
                    let found: BTreeSet<&str> = col.shares.keys().map(String::as_str).collect();
                    if expected != found {
                        report.push(
                            at.clone(),
                            "Shapley shares must cover exactly the model's datasets",
                            format!("{found:?}"),
                        );
                    }
                    for (d, v) in &col.shares {
                        if !(v.is_finite() && *v >= 0.0) {
                            report.push(format!("{at}/{d}"), "Shapley share must be nonnegative", v);
                        }
                    }
                    let sum: f64 = col.shares.values().sum();
                    if sum.is_nan() || (sum - 1.0).abs() > SHARE_SUM_TOLERANCE {
                        report.push(at, "Shapley shares must sum to 1", sum);
                    }
                }
                _ => report.push("/shapley", "duplicate Shapley column for model", &m.id),
            }
        }
        for (c, col) in self.shapley.columns.iter().enumerate() {
            if !model_ids.contains(col.model.as_str()) {
                report.push(format!("/shapley/{c}/model"), "Shapley column for unknown model", &col.model);
            }
        }

        let mut cap_edges = BTreeSet::new();
        for (c, cap) in self.caps.iter().enumerate() {
            let at = format!("/caps/{c}");
            let on_edge = self
                .models
                .iter()
                .any(|m| m.id == cap.model && m.datasets.contains(&cap.dataset));
            if !on_edge {
                report.push(
                    at.clone(),
                    "cap must sit on an existing dataset-model edge",
                    format!("({}, {})", cap.dataset, cap.model),
                );
            }
            if !cap_edges.insert((cap.dataset.as_str(), cap.model.as_str())) {
                report.push(at.clone(), "duplicate cap for edge", format!("({}, {})", cap.dataset, cap.model));
            }
            if !(cap.cap.is_finite() && cap.cap >= 0.0) {
                report.push(format!("{at}/cap"), "cap must be nonnegative", cap.cap);
            }
        }

        report
    }

    pub fn dataset(&self, id: &str) -> Option<&DatasetSpec> {
        self.datasets.iter().find(|d| d.id == id)
    }

    pub fn cap(&self, dataset: &str, model: &str) -> Option<f64> {
        self.caps
            .iter()
            .find(|c| c.dataset == dataset && c.model == model)
            .map(|c| c.cap)
    }
}

/// A model's slices into the edge arrays of a [`Market`].
#[derive(Debug, Clone)]
pub struct ModelBlock {
    pub id: String,
    pub kappa_m: f64,
    pub delta: f64,
    pub rho: f64,
    pub buyers: Range<usize>,
    pub data: Range<usize>,
}

impl ModelBlock {
    pub fn n_buyers(&self) -> usize {
        self.buyers.len()
    }

    pub fn n_datasets(&self) -> usize {
        self.data.len()
    }
}

#[derive(Debug, Clone)]
pub struct BuyerEdgeInfo {
    pub model: usize,
    pub buyer_id: String,
    pub omega: f64,
    pub reserve: f64,
}

#[derive(Debug, Clone)]
pub struct DataEdgeInfo {
    pub model: usize,
    pub dataset: usize,
    pub kappa_d: f64,
    pub share: f64,
    pub cap: Option<f64>,
}

/// Validated market with resolved edge indices. Immutable after construction.
#[derive(Debug, Clone)]
pub struct Market {
    instance: MarketInstance,
    models: Vec<ModelBlock>,
    buyer_edges: Vec<BuyerEdgeInfo>,
    data_edges: Vec<DataEdgeInfo>,
}

impl Market {
    pub fn new(instance: MarketInstance) -> Result<Self> {
        let report = instance.validate();
        if !report.is_valid() {
            return Err(Error::Invalid(report));
        }
        let dataset_index: HashMap<&str, usize> = instance
            .datasets
            .iter()
            .enumerate()
            .map(|(i, d)| (d.id.as_str(), i))
            .collect();

        let mut models = Vec::with_capacity(instance.models.len());
        let mut buyer_edges = Vec::new();
        let mut data_edges = Vec::new();
        for (j, m) in instance.models.iter().enumerate() {
            let b0 = buyer_edges.len();
            for b in &m.buyers {
                buyer_edges.push(BuyerEdgeInfo {
                    model: j,
                    buyer_id: b.id.clone(),
                    omega: b.omega,
                    reserve: b.reserve,
                });
            }
            let d0 = data_edges.len();
            let column = instance.shapley.column(&m.id).expect("validated");
            for d in &m.datasets {
                let i = dataset_index[d.as_str()];
                data_edges.push(DataEdgeInfo {
                    model: j,
                    dataset: i,
                    kappa_d: instance.datasets[i].kappa_d,
                    share: column.shares[d],
                    cap: instance.cap(d, &m.id),
                });
            }
            models.push(ModelBlock {
                id: m.id.clone(),
                kappa_m: m.kappa_m,
                delta: m.delta,
                rho: m.rho(),
                buyers: b0..buyer_edges.len(),
                data: d0..data_edges.len(),
            });
        }

        Ok(Self {
            instance,
            models,
            buyer_edges,
            data_edges,
        })
    }

    pub fn instance(&self) -> &MarketInstance {
        &self.instance
    }

    pub fn models(&self) -> &[ModelBlock] {
        &self.models
    }

    pub fn buyer_edges(&self) -> &[BuyerEdgeInfo] {
        &self.buyer_edges
    }

    pub fn data_edges(&self) -> &[DataEdgeInfo] {
        &self.data_edges
    }

    pub fn dataset_id(&self, index: usize) -> &str {
        &self.instance.datasets[index].id
    }

    /// Total number of scalar edge prices.
    pub fn dim(&self) -> usize {
        self.buyer_edges.len() + self.data_edges.len()
    }

    /// Sum of the data offsets used by model `j`.
    pub fn data_offset_sum(&self, j: usize) -> f64 {
        self.data_edges[self.models[j].data.clone()]
            .iter()
            .map(|e| e.kappa_d)
            .sum()
    }

    pub fn max_reserve(&self, j: usize) -> f64 {
        self.buyer_edges[self.models[j].buyers.clone()]
            .iter()
            .map(|e| e.reserve)
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min_reserve(&self, j: usize) -> f64 {
        self.buyer_edges[self.models[j].buyers.clone()]
            .iter()
            .map(|e| e.reserve)
            .fold(f64::INFINITY, f64::min)
    }
}

/// Joint price state: buyer edges first, then data edges, both model-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PriceVector {
    pub buyer: Vec<f64>,
    pub data: Vec<f64>,
}

impl PriceVector {
    pub fn zeros(market: &Market) -> Self {
        Self {
            buyer: vec![0.0; market.buyer_edges().len()],
            data: vec![0.0; market.data_edges().len()],
        }
    }

    pub fn dim(&self) -> usize {
        self.buyer.len() + self.data.len()
    }

    pub fn check_shape(&self, market: &Market) -> Result<()> {
        if self.buyer.len() != market.buyer_edges().len() || self.data.len() != market.data_edges().len() {
            return Err(Error::Shape {
                expected_buyer: market.buyer_edges().len(),
                expected_data: market.data_edges().len(),
                found_buyer: self.buyer.len(),
                found_data: self.data.len(),
            });
        }
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.buyer.iter().chain(self.data.iter())
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            buyer: self.buyer.iter().map(|x| x * factor).collect(),
            data: self.data.iter().map(|x| x * factor).collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.iter()
            .zip(other.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Componentwise `self <= other + slack`.
    pub fn le_with_slack(&self, other: &Self, slack: f64) -> bool {
        self.iter().zip(other.iter()).all(|(a, b)| *a <= *b + slack)
    }

    pub fn is_nonnegative(&self) -> bool {
        self.iter().all(|x| x.is_finite() && *x >= 0.0)
    }
}

/// Per-edge acceptance on both sides of the market.
#[derive(Debug, Clone, PartialEq)]
pub struct AcceptanceReport {
    pub buyer: Vec<bool>,
    pub data: Vec<bool>,
}

impl AcceptanceReport {
    /// Fraction of all edges, both categories pooled with equal weight, that accept.
    pub fn success_rate(&self) -> f64 {
        let total = self.buyer.len() + self.data.len();
        if total == 0 {
            return 1.0;
        }
        let ok = self.buyer.iter().chain(self.data.iter()).filter(|a| **a).count();
        ok as f64 / total as f64
    }

    pub fn buyer_feasible(&self) -> bool {
        self.buyer.iter().all(|a| *a)
    }

    pub fn data_feasible(&self) -> bool {
        self.data.iter().all(|a| *a)
    }

    pub fn all_accepted(&self) -> bool {
        self.buyer_feasible() && self.data_feasible()
    }
}

/// Buyers accept `p <= R`; sellers accept `p >= kappa_d`. Both inclusive.
pub fn acceptance_check(market: &Market, prices: &PriceVector) -> Result<AcceptanceReport> {
    prices.check_shape(market)?;
    let buyer = market
        .buyer_edges()
        .iter()
        .zip(&prices.buyer)
        .map(|(e, p)| *p <= e.reserve)
        .collect();
    let data = market
        .data_edges()
        .iter()
        .zip(&prices.data)
        .map(|(e, p)| *p >= e.kappa_d)
        .collect();
    Ok(AcceptanceReport { buyer, data })
}


#[cfg(test)]
mod tests {
    use super::testing::*;
    use super::*;

    fn invariants(instance: &MarketInstance) -> Vec<String> {
        instance
            .validate()
            .violations
            .into_iter()
            .map(|v| v.invariant)
            .collect()
    }

    #[test]
    fn well_formed_fixtures_pass() {
        assert!(e1().validate().is_valid());
        assert!(e2().validate().is_valid());
    }

    #[test]
    fn rho_of_one_is_rejected() {
        let mut inst = e1();
        inst.models[0].buyers[0].omega = 1.0;
        let report = inst.validate();
        assert_eq!(report.violations.len(), 1);
        assert_eq!(report.violations[0].invariant, "rho must lie in [0,1)");
        assert_eq!(report.violations[0].value, "1");
    }

    #[test]
    fn zero_kappa_d_is_rejected() {
        let mut inst = e1();
        inst.datasets[0].kappa_d = 0.0;
        let report = inst.validate();
        assert_eq!(report.violations[0].field, "/datasets/0/kappa_d");
        assert_eq!(report.violations[0].invariant, "kappa_d must be strictly positive");
    }

    #[test]
    fn each_single_field_corruption_is_caught() {
        type Mutation = fn(&mut MarketInstance);
        let mutations: Vec<(&str, Mutation)> = vec![
            ("kappa_m must be strictly positive", |i| i.models[0].kappa_m = -1.0),
            ("delta must be nonnegative", |i| i.models[0].delta = -0.1),
            ("omega must be nonnegative", |i| i.models[0].buyers[0].omega = -0.1),
            ("reserve must be strictly positive", |i| i.models[0].buyers[1].reserve = 0.0),
            ("Shapley shares must sum to 1", |i| {
                i.shapley.columns[0].shares.insert("D1".into(), 0.5);
            }),
            ("Shapley share must be nonnegative", |i| {
                i.shapley.columns[0].shares.insert("D1".into(), -0.2);
                i.shapley.columns[0].shares.insert("D2".into(), 1.2);
            }),
            ("dataset ids must be unique", |i| i.datasets[1].id = "D1".into()),
            ("model must have at least one buyer edge", |i| i.models[0].buyers.clear()),
            ("buyer ids must be unique within a model", |i| i.models[0].buyers[1].id = "B1".into()),
            ("every model needs a Shapley column", |i| i.shapley.columns.clear()),
            ("cap must sit on an existing dataset-model edge", |i| {
                i.caps.push(CapEntry { dataset: "D9".into(), model: "M1".into(), cap: 2.0 })
            }),
            ("kappa_d must be strictly positive", |i| i.datasets[1].kappa_d = f64::NAN),
        ];
        for (expected, mutate) in mutations {
            let mut inst = e2();
            mutate(&mut inst);
            let found = invariants(&inst);
            assert!(
                found.iter().any(|f| f == expected),
                "expected `{expected}`, got {found:?}"
            );
        }
    }

    #[test]
    fn dimension_counts_edges() {
        let m = market(e2());
        assert_eq!(m.dim(), 4);
        assert_eq!(PriceVector::zeros(&m).dim(), 4);
    }

    #[test]
    fn acceptance_is_inclusive_at_the_reserve() {
        let m = market(e1());
        let p = PriceVector { buyer: vec![100.0], data: vec![0.2] };
        let r = acceptance_check(&m, &p).unwrap();
        assert!(r.all_accepted());
        assert_eq!(r.success_rate(), 1.0);
    }

    #[test]
    fn acceptance_at_e1_equilibrium() {
        let m = market(e1());
        let p = PriceVector { buyer: vec![5.55], data: vec![0.2 + 0.6 * 5.55 / 1.1] };
        assert_eq!(acceptance_check(&m, &p).unwrap().success_rate(), 1.0);
    }

    #[test]
    fn acceptance_pools_both_sides() {
        let m = market(e2());
        let p = PriceVector { buyer: vec![150.0, 50.0], data: vec![0.05, 0.5] };
        let r = acceptance_check(&m, &p).unwrap();
        assert_eq!(r.buyer, vec![false, true]);
        assert_eq!(r.data, vec![false, true]);
        assert_eq!(r.success_rate(), 0.5);
    }

    #[test]
    fn acceptance_rejects_misaligned_prices() {
        let m = market(e2());
        let p = PriceVector { buyer: vec![1.0], data: vec![1.0, 1.0] };
        assert!(matches!(acceptance_check(&m, &p), Err(Error::Shape { .. })));
    }
}
