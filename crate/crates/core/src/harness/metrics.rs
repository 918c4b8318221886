//! Per-instance market metrics.

use serde::Serialize;

use crate::error::Result;
use crate::market::{acceptance_check, Market, PriceVector};

/// Ranks starting at 1, ties sharing their average rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation with average ranks for ties.
///
/// Fewer than two points gives NaN. If both samples are constant the result
/// is 1, and if exactly one is constant it is 0.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len(), "samples must be paired");
    if x.len() < 2 {
        return f64::NAN;
    }
    let (rx, ry) = (average_ranks(x), average_ranks(y));
    let n = x.len() as f64;
    let mean = (n + 1.0) / 2.0;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mean) * (b - mean);
        sxx += (a - mean) * (a - mean);
        syy += (b - mean) * (b - mean);
    }
    match (sxx == 0.0, syy == 0.0) {
        (true, true) => 1.0,
        (true, false) | (false, true) => 0.0,
        _ => (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0),
    }
}

/// Shapley shares against realized revenue shares for one model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelShares {
    pub model: String,
    pub datasets: Vec<String>,
    pub sv: Vec<f64>,
    /// `p_i / sum of the model's data prices`.
    pub share: Vec<f64>,
}

impl ModelShares {
    pub fn spearman(&self) -> f64 {
        spearman(&self.sv, &self.share)
    }
}

pub fn revenue_shares(market: &Market, prices: &PriceVector) -> Result<Vec<ModelShares>> {
    prices.check_shape(market)?;
    Ok(market
        .models()
        .iter()
        .map(|m| {
            let edges = &market.data_edges()[m.data.clone()];
            let paid = &prices.data[m.data.clone()];
            let total: f64 = paid.iter().sum();
            ModelShares {
                model: m.id.clone(),
                datasets: edges.iter().map(|e| market.dataset_id(e.dataset).to_string()).collect(),
                sv: edges.iter().map(|e| e.share).collect(),
                share: paid.iter().map(|p| p / total).collect(),
            }
        })
        .collect())
}

/// Per-model Spearman; models with fewer than two datasets give NaN.
pub fn per_model_spearman(market: &Market, prices: &PriceVector) -> Result<Vec<(String, f64)>> {
    Ok(revenue_shares(market, prices)?
        .into_iter()
        .map(|s| {
            if s.sv.len() < 2 {
                log::info!("skipping Spearman for model `{}` with a single dataset", s.model);
            }
            let rho = s.spearman();
            (s.model, rho)
        })
        .collect())
}

/// Mean of the finite entries, NaN when there are none.
pub fn finite_mean(values: impl IntoIterator<Item = f64>) -> f64 {
    let (sum, n) = values
        .into_iter()
        .filter(|v| v.is_finite())
        .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}

/// `R - p` on every buyer edge.
pub fn buyer_surplus(market: &Market, prices: &PriceVector) -> Vec<f64> {
    market
        .buyer_edges()
        .iter()
        .zip(&prices.buyer)
        .map(|(b, p)| b.reserve - p)
        .collect()
}

/// `p - kappa_D` on every data edge.
pub fn seller_profit(market: &Market, prices: &PriceVector) -> Vec<f64> {
    market
        .data_edges()
        .iter()
        .zip(&prices.data)
        .map(|(d, p)| p - d.kappa_d)
        .collect()
}

/// Largest deviation of realized revenue shares from
/// `(kD_i + c_j * SV_i) / sum(...)` with `c_j = rho_j * p_j / (1 + delta_j)`,
/// where `p_j` is the model's common buyer price.
pub fn structural_share_gap(market: &Market, prices: &PriceVector) -> Result<f64> {
    let shares = revenue_shares(market, prices)?;
    let mut gap: f64 = 0.0;
    for (m, s) in market.models().iter().zip(&shares) {
        let price = prices.buyer[m.buyers.start];
        let c = m.rho * price / (1.0 + m.delta);
        let edges = &market.data_edges()[m.data.clone()];
        let predicted: Vec<f64> = edges.iter().map(|e| e.kappa_d + c * e.share).collect();
        let total: f64 = predicted.iter().sum();
        for (p, realized) in predicted.iter().zip(&s.share) {
            gap = gap.max((p / total - realized).abs());
        }
    }
    Ok(gap)
}

/// Metrics of one price state.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRecord {
    pub method: String,
    pub stage: String,
    pub success_rate: f64,
    pub buyer_surplus: Vec<f64>,
    pub seller_profit: Vec<f64>,
    pub spearman: Vec<(String, f64)>,
}

impl MetricsRecord {
    pub fn compute(market: &Market, prices: &PriceVector, method: &str, stage: &str) -> Result<Self> {
        Ok(Self {
            method: method.to_string(),
            stage: stage.to_string(),
            success_rate: acceptance_check(market, prices)?.success_rate(),
            buyer_surplus: buyer_surplus(market, prices),
            seller_profit: seller_profit(market, prices),
            spearman: per_model_spearman(market, prices)?,
        })
    }
}
