//! Independent oracles and fixtures shared by the integration tests.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::PathBuf;

use coupled_market::format::load_instance;
use coupled_market::market::{Market, MarketInstance, PriceVector};
use coupled_market::quotation::QuotationParams;
use coupled_market::solver::{solve, SolverConfig};

pub fn fixture(name: &str) -> MarketInstance {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name);
    load_instance(&path).unwrap_or_else(|e| panic!("fixture {}: {e}", path.display()))
}

/// Shapley value of every player as the average marginal contribution over
/// all orderings, generated by Heap's algorithm.
pub fn permutation_shapley(n: usize, value: impl Fn(u32) -> f64) -> Vec<f64> {
    let mut perm: Vec<usize> = (0..n).collect();
    let mut totals = vec![0.0; n];
    let mut count = 0u64;
    let mut visit = |perm: &[usize]| {
        let mut coalition = 0u32;
        let mut before = value(0);
        for &p in perm {
            coalition |= 1 << p;
            let after = value(coalition);
            totals[p] += after - before;
            before = after;
        }
        count += 1;
    };
    let mut c = vec![0usize; n];
    visit(&perm);
    let mut i = 0;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                perm.swap(0, i);
            } else {
                perm.swap(c[i], i);
            }
            visit(&perm);
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    totals.iter().map(|t| t / count as f64).collect()
}

/// Equilibrium prices computed straight from the instance document.
///
/// Buyer prices are keyed by `(model, buyer)`, data prices by `(dataset, model)`.
pub struct KeyedPrices {
    pub buyer: BTreeMap<(String, String), f64>,
    pub data: BTreeMap<(String, String), f64>,
}

/// Every buyer of a model pays `(kM + (1 + d) S) / (1 - rho)`; dataset `i`
/// receives `kD_i + SV_i * rho * p / (1 + d)`. Offsets are grossed by `alpha`.
pub fn oracle_equilibrium(instance: &MarketInstance, alpha: f64) -> KeyedPrices {
    let kd: BTreeMap<&str, f64> = instance.datasets.iter().map(|d| (d.id.as_str(), d.kappa_d)).collect();
    let mut out = KeyedPrices { buyer: BTreeMap::new(), data: BTreeMap::new() };
    for m in &instance.models {
        let rho: f64 = m.buyers.iter().map(|b| b.omega).sum();
        let s: f64 = m.datasets.iter().map(|d| kd[d.as_str()]).sum();
        let p = alpha * (m.kappa_m + (1.0 + m.delta) * s) / (1.0 - rho);
        for b in &m.buyers {
            out.buyer.insert((m.id.clone(), b.id.clone()), p);
        }
        let col = instance.shapley.columns.iter().find(|c| c.model == m.id).unwrap();
        for d in &m.datasets {
            let v = alpha * kd[d.as_str()] + col.shares[d] * rho * p / (1.0 + m.delta);
            out.data.insert((d.clone(), m.id.clone()), v);
        }
    }
    out
}

/// Largest deviation between solver prices and keyed oracle prices.
pub fn max_deviation(market: &Market, prices: &PriceVector, oracle: &KeyedPrices) -> f64 {
    let mut worst: f64 = 0.0;
    for (e, b) in market.buyer_edges().iter().enumerate() {
        let key = (market.models()[b.model].id.clone(), b.buyer_id.clone());
        worst = worst.max((prices.buyer[e] - oracle.buyer[&key]).abs());
    }
    for (e, d) in market.data_edges().iter().enumerate() {
        let key = (market.dataset_id(d.dataset).to_string(), market.models()[d.model].id.clone());
        worst = worst.max((prices.data[e] - oracle.data[&key]).abs());
    }
    worst
}

/// Buyer feasibility of the solved fixed point under a uniform fee.
pub fn fee_feasible(market: &Market, fee: f64) -> bool {
    let params = QuotationParams::with_fee(fee).unwrap();
    let report = solve(market, params, &SolverConfig::default()).unwrap();
    assert!(report.converged);
    report.acceptance.buyer_feasible()
}

/// Largest fee on a `step` grid whose fixed point clears every reserve,
/// found by bisection over grid indices.
pub fn bisection_fee(market: &Market, step: f64) -> f64 {
    let top = ((1.0 - step) / step).floor() as u64;
    if !fee_feasible(market, 0.0) {
        return 0.0;
    }
    let (mut lo, mut hi) = (0u64, top + 1);
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if fee_feasible(market, mid as f64 * step) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    lo as f64 * step
}
