//! One-sided and broker-led comparison pipelines.
//!
//! Each baseline sets prices in a single pass without closing the loop
//! between the two layers:
//!
//! - `SupplyFirst` posts list caps on data edges and quotes buyers once.
//! - `DemandFirst` anchors buyers at the model offset and quotes data once.
//! - `BrokerCentric` targets a reserve quantile per model, backs out the
//!   implied markup over floor data costs, and quotes data with that markup.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::market::{Market, PriceVector};
use crate::quotation::{QuotationOperator, QuotationParams};
use crate::solver::{default_initialization, solve, synchronous_trajectory, Initialization, Schedule, SolverConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    TripleWin,
    SupplyFirst,
    DemandFirst,
    BrokerCentric,
}

impl Method {
    pub const ALL: [Method; 4] = [
        Method::TripleWin,
        Method::SupplyFirst,
        Method::DemandFirst,
        Method::BrokerCentric,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Method::TripleWin => "triplewin",
            Method::SupplyFirst => "sf",
            Method::DemandFirst => "df",
            Method::BrokerCentric => "bc",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "triplewin" | "tw" => Ok(Method::TripleWin),
            "sf" | "supply_first" => Ok(Method::SupplyFirst),
            "df" | "demand_first" => Ok(Method::DemandFirst),
            "bc" | "broker_centric" => Ok(Method::BrokerCentric),
            other => Err(Error::InvalidParameter(format!("unknown method `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BaselineConfig {
    /// Reserve quantile targeted by `BrokerCentric`.
    pub quantile: f64,
    pub propagation_rounds: usize,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            quantile: 0.5,
            propagation_rounds: 5,
        }
    }
}

impl BaselineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.quantile) {
            return Err(Error::InvalidParameter(format!(
                "quantile must lie in [0,1], got {}",
                self.quantile
            )));
        }
        if self.propagation_rounds == 0 {
            return Err(Error::InvalidParameter("propagation_rounds must be >= 1".into()));
        }
        Ok(())
    }
}

/// Quantile with linear interpolation between order statistics.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Data edges at their list caps, buyers quoted once from those caps.
pub fn supply_first(market: &Market, params: QuotationParams) -> Result<PriceVector> {
    let op = QuotationOperator::new(market, params)?;
    let data = market
        .data_edges()
        .iter()
        .map(|e| {
            e.cap.ok_or_else(|| Error::MissingCap {
                dataset: market.dataset_id(e.dataset).to_string(),
                model: market.models()[e.model].id.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let buyer = op.quote_buyers(&data)?;
    Ok(PriceVector { buyer, data })
}

/// Buyers anchored at the model offset, data quoted once from those bids.
pub fn demand_first(market: &Market, params: QuotationParams) -> Result<PriceVector> {
    let op = QuotationOperator::new(market, params)?;
    let mut buyer = vec![0.0; market.buyer_edges().len()];
    for (j, m) in market.models().iter().enumerate() {
        buyer[m.buyers.clone()].fill(op.model_offset(j));
    }
    let data = op.quote_data(&buyer)?;
    Ok(PriceVector { buyer, data })
}

/// Markup implied by targeting `target` over floor data costs, clamped at zero.
fn implied_markup(target: f64, model_offset: f64, floor_sum: f64) -> f64 {
    ((target - model_offset) / floor_sum - 1.0).max(0.0)
}

/// Reserve-quantile pricing with the implied markup replacing the margin.
///
/// The margin scaling multiplies the implied markup. At unit scaling every
/// buyer of model `j` pays the `q`-quantile `P_j` of its reserves, or the cost
/// floor `kM + S` when that quantile sits below it.
pub fn broker_centric(market: &Market, params: QuotationParams, q: f64) -> Result<PriceVector> {
    BaselineConfig { quantile: q, ..Default::default() }.validate()?;
    let op = QuotationOperator::new(market, params)?;
    let mut p = PriceVector::zeros(market);
    for (j, m) in market.models().iter().enumerate() {
        let reserves: Vec<f64> = m.buyers.clone().map(|e| market.buyer_edges()[e].reserve).collect();
        let target = quantile(&reserves, q);
        let k_m = op.model_offset(j);
        let floor_sum: f64 = m.data.clone().map(|e| op.data_offset(e)).sum();
        let markup = implied_markup(target, k_m, floor_sum);
        let price = if markup > 0.0 {
            target + (params.alpha_delta - 1.0) * markup * floor_sum
        } else {
            k_m + floor_sum
        };
        let margin = 1.0 + params.alpha_delta * markup;
        p.buyer[m.buyers.clone()].fill(price);
        for e in m.data.clone() {
            p.data[e] = op.data_offset(e) + market.data_edges()[e].share * m.rho * price / margin;
        }
    }
    Ok(p)
}

/// Final prices of `method`; `TripleWin` solves from the default start.
pub fn run_method(
    market: &Market,
    method: Method,
    params: QuotationParams,
    config: &BaselineConfig,
    solver: &SolverConfig,
) -> Result<PriceVector> {
    match method {
        Method::TripleWin => Ok(solve(market, params, solver)?.prices),
        Method::SupplyFirst => supply_first(market, params),
        Method::DemandFirst => demand_first(market, params),
        Method::BrokerCentric => broker_centric(market, params, config.quantile),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum StageLabel {
    Round(usize),
    Converged,
}

impl fmt::Display for StageLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StageLabel::Round(r) => write!(f, "{r}"),
            StageLabel::Converged => f.write_str("converged"),
        }
    }
}

/// Price states after 0..=rounds applications of the method's update.
///
/// Round 0 is the default start. A baseline update re-applies its single
/// pass, so its states are stationary from round 1 on. `TripleWin` applies
/// synchronous operator sweeps and appends the converged state.
pub fn staged_propagation(
    market: &Market,
    method: Method,
    params: QuotationParams,
    rounds: usize,
    config: &BaselineConfig,
    solver: &SolverConfig,
) -> Result<Vec<(StageLabel, PriceVector)>> {
    let start = default_initialization(market);
    let mut stages = Vec::with_capacity(rounds + 2);
    if method == Method::TripleWin {
        let op = QuotationOperator::new(market, params)?;
        let states = synchronous_trajectory(&op, &start, rounds)?;
        stages.extend(states.into_iter().enumerate().map(|(r, p)| (StageLabel::Round(r), p)));
        let config = SolverConfig {
            schedule: Schedule::Synchronous,
            init: Initialization::Given(start),
            ..solver.clone()
        };
        stages.push((StageLabel::Converged, solve(market, params, &config)?.prices));
    } else {
        let pass = run_method(market, method, params, config, solver)?;
        stages.push((StageLabel::Round(0), start));
        stages.extend((1..=rounds).map(|r| (StageLabel::Round(r), pass.clone())));
    }
    Ok(stages)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market::testing::{e1, e2, market};
    use crate::market::acceptance_check;

    #[test]
    fn supply_first_on_e1() {
        let p = supply_first(&market(e1()), QuotationParams::default()).unwrap();
        assert_eq!(p.data, vec![3.0]);
        assert!((p.buyer[0] - 5.3).abs() < 1e-12);
    }

    #[test]
    fn supply_first_needs_caps() {
        let err = supply_first(&market(e2()), QuotationParams::default()).unwrap_err();
        assert!(matches!(err, Error::MissingCap { .. }));
    }

    #[test]
    fn supply_first_at_floor_caps() {
        let mut inst = e2();
        for d in ["D1", "D2"] {
            let cap = inst.dataset(d).unwrap().kappa_d;
            inst.caps.push(crate::market::CapEntry { dataset: d.into(), model: "M1".into(), cap });
        }
        let p = supply_first(&market(inst), QuotationParams::default()).unwrap();
        assert!((p.buyer[0] - 1.4).abs() < 1e-12);
    }

    #[test]
    fn demand_first_on_e1() {
        let m = market(e1());
        let p = demand_first(&m, QuotationParams::default()).unwrap();
        assert_eq!(p.buyer, vec![2.0]);
        assert!((p.data[0] - (0.2 + 1.2 / 1.1)).abs() < 1e-12);
        assert!(acceptance_check(&m, &p).unwrap().data_feasible());
    }

    #[test]
    fn demand_first_without_coupling_pays_floors() {
        let mut inst = e2();
        for b in &mut inst.models[0].buyers {
            b.omega = 0.0;
        }
        let p = demand_first(&market(inst), QuotationParams::default()).unwrap();
        assert_eq!(p.data, vec![0.1, 0.3]);
    }

    #[test]
    fn broker_centric_on_e1() {
        let p = broker_centric(&market(e1()), QuotationParams::default(), 0.5).unwrap();
        assert_eq!(p.buyer, vec![100.0]);
        assert!((p.data[0] - (0.2 + 0.6 * 100.0 / 490.0)).abs() < 1e-12);
    }

    #[test]
    fn broker_centric_clamps_below_cost() {
        let mut inst = e1();
        inst.models[0].buyers[0].reserve = 2.1;
        let p = broker_centric(&market(inst), QuotationParams::default(), 0.5).unwrap();
        assert!((p.buyer[0] - 2.2).abs() < 1e-12);
        assert!((p.data[0] - (0.2 + 0.6 * 2.2)).abs() < 1e-12);
    }

    #[test]
    fn quantile_interpolates() {
        assert_eq!(quantile(&[100.0, 25.0], 0.5), 62.5);
        assert_eq!(quantile(&[3.0, 1.0, 2.0], 0.0), 1.0);
        assert_eq!(quantile(&[3.0, 1.0, 2.0], 1.0), 3.0);
        assert_eq!(quantile(&[7.0], 0.3), 7.0);
        let mut inst = e2();
        inst.models[0].buyers[0].reserve = 25.0;
        let p = broker_centric(&market(inst), QuotationParams::default(), 0.5).unwrap();
        assert_eq!(p.buyer, vec![62.5, 62.5]);
    }

    #[test]
    fn methods_parse_by_name() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        assert!("dealer".parse::<Method>().is_err());
    }

    #[test]
    fn triplewin_stages_on_e1() {
        let m = market(e1());
        let stages = staged_propagation(
            &m,
            Method::TripleWin,
            QuotationParams::default(),
            5,
            &BaselineConfig::default(),
            &SolverConfig::default(),
        )
        .unwrap();
        assert_eq!(stages.len(), 7);
        assert_eq!(stages[0].1, default_initialization(&m));
        let one = &stages[1].1;
        assert!((one.buyer[0] - 5.3).abs() < 1e-12);
        assert!((one.data[0] - (0.2 + 0.6 * 2.0 / 1.1)).abs() < 1e-12);
        assert_eq!(stages[6].0, StageLabel::Converged);
        assert!((stages[6].1.buyer[0] - 5.55).abs() < 1e-9);
    }

    #[test]
    fn baseline_stages_are_stationary() {
        let m = market(e1());
        for method in [Method::SupplyFirst, Method::DemandFirst, Method::BrokerCentric] {
            let stages = staged_propagation(
                &m,
                method,
                QuotationParams::default(),
                5,
                &BaselineConfig::default(),
                &SolverConfig::default(),
            )
            .unwrap();
            assert_eq!(stages.len(), 6);
            assert!(stages[1..].windows(2).all(|w| w[0].1 == w[1].1));
        }
    }
}
