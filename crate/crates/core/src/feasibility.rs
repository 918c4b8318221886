//! Feasibility regions in scaling space.
//!
//! A scaling triple multiplies every dataset offset, every model offset and
//! every margin of the instance. Buyer edge `(j, k)` is guaranteed feasible when
//!
//! ```text
//! (1 + a_delta * delta_j) * a_kd * S_j + a_km * kM_j <= R_jk - rho_j * Rmax_j
//! ```
//!
//! where `S_j` is the model's dataset-offset sum and `Rmax_j` its largest
//! reserve. Solving that inequality for one scaling gives the analytic
//! frontiers below. Numerical frontiers instead bisect on actual fixed points.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::market::{Market, MarketInstance, PriceVector};
use crate::quotation::QuotationParams;
use crate::solver::{solve, EquilibriumReport, SolverConfig};

/// Absolute resolution of numerical frontiers, in scaling units.
pub const BISECTION_TOLERANCE: f64 = 1e-6;
/// Numerical frontiers above this are reported as unbounded.
pub const UNBOUNDED_LIMIT: f64 = 1e9;
/// Smallest offset scaling probed; offsets must stay strictly positive.
const OFFSET_SCALING_FLOOR: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Axis {
    KappaD,
    KappaM,
    Delta,
}

impl Axis {
    pub fn name(&self) -> &'static str {
        match self {
            Axis::KappaD => "alpha_kd",
            Axis::KappaM => "alpha_km",
            Axis::Delta => "alpha_delta",
        }
    }

    fn floor(&self) -> f64 {
        match self {
            Axis::Delta => 0.0,
            _ => OFFSET_SCALING_FLOOR,
        }
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "alpha_kd" | "kd" | "kappa_d" => Ok(Axis::KappaD),
            "alpha_km" | "km" | "kappa_m" => Ok(Axis::KappaM),
            "alpha_delta" | "delta" => Ok(Axis::Delta),
            other => Err(Error::InvalidParameter(format!("unknown axis `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scalings {
    pub kappa_d: f64,
    pub kappa_m: f64,
    pub delta: f64,
}

impl Default for Scalings {
    fn default() -> Self {
        Self {
            kappa_d: 1.0,
            kappa_m: 1.0,
            delta: 1.0,
        }
    }
}

impl Scalings {
    pub fn new(kappa_d: f64, kappa_m: f64, delta: f64) -> Self {
        Self { kappa_d, kappa_m, delta }
    }

    pub fn get(&self, axis: Axis) -> f64 {
        match axis {
            Axis::KappaD => self.kappa_d,
            Axis::KappaM => self.kappa_m,
            Axis::Delta => self.delta,
        }
    }

    pub fn with(mut self, axis: Axis, value: f64) -> Self {
        match axis {
            Axis::KappaD => self.kappa_d = value,
            Axis::KappaM => self.kappa_m = value,
            Axis::Delta => self.delta = value,
        }
        self
    }

    pub fn params(&self) -> QuotationParams {
        QuotationParams::with_scalings(self.kappa_d, self.kappa_m, self.delta)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BindingEdge {
    pub model: String,
    pub buyer: String,
}

/// Largest admissible value of one scaling with the other two held fixed.
#[derive(Debug, Clone, PartialEq)]
pub enum Frontier {
    Bounded { value: f64, binding: BindingEdge },
    /// No finite value breaks feasibility.
    Unbounded,
    /// Not even the smallest value of the scaling is feasible.
    Infeasible { binding: Option<BindingEdge> },
    /// The numerical search could not bracket the frontier.
    Unresolved,
}

impl Frontier {
    /// Finite bound, `+inf` when unbounded, `None` otherwise.
    pub fn value(&self) -> Option<f64> {
        match self {
            Frontier::Bounded { value, .. } => Some(*value),
            Frontier::Unbounded => Some(f64::INFINITY),
            _ => None,
        }
    }

    pub fn binding(&self) -> Option<&BindingEdge> {
        match self {
            Frontier::Bounded { binding, .. } => Some(binding),
            Frontier::Infeasible { binding } => binding.as_ref(),
            _ => None,
        }
    }

    /// CSV cell: the value, `inf`, `infeasible` or `unresolved`.
    pub fn cell(&self) -> String {
        match self {
            Frontier::Bounded { value, .. } => format!("{value}"),
            Frontier::Unbounded => "inf".into(),
            Frontier::Infeasible { .. } => "infeasible".into(),
            Frontier::Unresolved => "unresolved".into(),
        }
    }
}

fn binding_edge(market: &Market, buyer_edge: usize) -> BindingEdge {
    let b = &market.buyer_edges()[buyer_edge];
    BindingEdge {
        model: market.models()[b.model].id.clone(),
        buyer: b.buyer_id.clone(),
    }
}

/// Right-hand side `R_jk - rho_j * Rmax_j` of every buyer edge.
fn edge_budgets(market: &Market) -> Vec<f64> {
    market
        .buyer_edges()
        .iter()
        .map(|b| b.reserve - market.models()[b.model].rho * market.max_reserve(b.model))
        .collect()
}

/// Analytic frontier of `axis`; the value of `axis` inside `at` is ignored.
pub fn analytic_max(market: &Market, axis: Axis, at: Scalings) -> Frontier {
    let budgets = edge_budgets(market);
    let mut best: Option<(f64, usize)> = None;
    for (e, b) in market.buyer_edges().iter().enumerate() {
        let m = &market.models()[b.model];
        let s = market.data_offset_sum(b.model);
        let budget = budgets[e];
        let bound = match axis {
            Axis::Delta => {
                let room = budget - at.kappa_m * m.kappa_m;
                if room <= 0.0 {
                    return Frontier::Infeasible { binding: Some(binding_edge(market, e)) };
                }
                if m.delta == 0.0 {
                    // Margin-free models do not restrict the margin scaling.
                    if at.kappa_d * s > room {
                        return Frontier::Infeasible { binding: Some(binding_edge(market, e)) };
                    }
                    continue;
                }
                (room / (at.kappa_d * s) - 1.0) / m.delta
            }
            Axis::KappaM => (budget - (1.0 + at.delta * m.delta) * at.kappa_d * s) / m.kappa_m,
            Axis::KappaD => (budget - at.kappa_m * m.kappa_m) / ((1.0 + at.delta * m.delta) * s),
        };
        if best.is_none_or(|(v, _)| bound < v) {
            best = Some((bound, e));
        }
    }
    match best {
        None => Frontier::Unbounded,
        Some((v, e)) => {
            let usable = match axis {
                Axis::Delta => v >= 0.0,
                _ => v > 0.0,
            };
            if usable {
                Frontier::Bounded { value: v, binding: binding_edge(market, e) }
            } else {
                Frontier::Infeasible { binding: Some(binding_edge(market, e)) }
            }
        }
    }
}

/// Outcome of the global feasibility condition at one scaling triple.
#[derive(Debug, Clone, PartialEq)]
pub struct FeasibilityVerdict {
    pub feasible: bool,
    /// Smallest `budget - demand` over buyer edges.
    pub min_slack: f64,
    pub binding: BindingEdge,
}

pub fn global_feasibility(market: &Market, at: Scalings) -> Result<FeasibilityVerdict> {
    at.params().validate()?;
    let budgets = edge_budgets(market);
    let (e, slack) = market
        .buyer_edges()
        .iter()
        .enumerate()
        .map(|(e, b)| {
            let m = &market.models()[b.model];
            let s = market.data_offset_sum(b.model);
            let demand = (1.0 + at.delta * m.delta) * at.kappa_d * s + at.kappa_m * m.kappa_m;
            (e, budgets[e] - demand)
        })
        .fold((0, f64::INFINITY), |acc, x| if x.1 < acc.1 { x } else { acc });
    Ok(FeasibilityVerdict {
        feasible: slack >= 0.0,
        min_slack: slack,
        binding: binding_edge(market, e),
    })
}

/// Fixed point at the given scalings.
pub fn solve_at(market: &Market, at: Scalings, config: &SolverConfig) -> Result<EquilibriumReport> {
    solve(market, at.params(), config)
}

/// `Some(true)` when the fixed point at `at` clears every buyer reserve;
/// `None` when the solver did not converge.
pub fn buyer_feasible_at(market: &Market, at: Scalings, config: &SolverConfig) -> Result<Option<bool>> {
    let report = solve_at(market, at, config)?;
    Ok(report.converged.then(|| report.acceptance.buyer_feasible()))
}

fn tightest_buyer(market: &Market, prices: &PriceVector) -> usize {
    market
        .buyer_edges()
        .iter()
        .enumerate()
        .map(|(e, b)| (e, b.reserve - prices.buyer[e]))
        .fold((0, f64::INFINITY), |acc, x| if x.1 < acc.1 { x } else { acc })
        .0
}

/// Numerical frontier of `axis` by bisection on solved fixed points.
///
/// The bracket starts at `[floor, 10 x analytic]` and doubles its upper end
/// while that end is still feasible.
pub fn numerical_max(market: &Market, axis: Axis, at: Scalings, config: &SolverConfig) -> Result<Frontier> {
    let feasible = |v: f64| buyer_feasible_at(market, at.with(axis, v), config);
    let floor = axis.floor();
    match feasible(floor)? {
        None => return Ok(Frontier::Unresolved),
        Some(false) => {
            let report = solve_at(market, at.with(axis, floor), config)?;
            let e = tightest_buyer(market, &report.prices);
            return Ok(Frontier::Infeasible { binding: Some(binding_edge(market, e)) });
        }
        Some(true) => {}
    }

    let mut lo = floor;
    let mut hi = match analytic_max(market, axis, at).value() {
        Some(v) if v.is_finite() && v > floor => 10.0 * v,
        _ => 1.0,
    };
    loop {
        match feasible(hi)? {
            None => return Ok(Frontier::Unresolved),
            Some(true) => {
                lo = hi;
                hi *= 2.0;
                if hi > UNBOUNDED_LIMIT {
                    return Ok(Frontier::Unbounded);
                }
            }
            Some(false) => break,
        }
    }
    while hi - lo > BISECTION_TOLERANCE {
        let mid = 0.5 * (lo + hi);
        match feasible(mid)? {
            None => return Ok(Frontier::Unresolved),
            Some(true) => lo = mid,
            Some(false) => hi = mid,
        }
    }
    let report = solve_at(market, at.with(axis, lo), config)?;
    let e = tightest_buyer(market, &report.prices);
    Ok(Frontier::Bounded { value: lo, binding: binding_edge(market, e) })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvelopePoint {
    pub x: f64,
    pub analytic: Frontier,
    pub numeric: Option<Frontier>,
}

/// Frontier of `y_axis` sampled along `x_axis`, the remaining axis fixed.
#[derive(Debug, Clone, PartialEq)]
pub struct FeasibilityEnvelope {
    pub x_axis: Axis,
    pub y_axis: Axis,
    pub fixed: Scalings,
    pub points: Vec<EnvelopePoint>,
}

/// Samples the envelope on `grid`. Numerical frontiers are traced only when a
/// solver configuration is given. Grid points are processed in parallel.
pub fn trace_envelope(
    market: &Market,
    x_axis: Axis,
    y_axis: Axis,
    fixed: Scalings,
    grid: &[f64],
    numeric: Option<&SolverConfig>,
) -> Result<FeasibilityEnvelope> {
    if x_axis == y_axis {
        return Err(Error::InvalidParameter("envelope axes must differ".into()));
    }
    if let Some(bad) = grid.iter().find(|x| !(x.is_finite() && **x >= x_axis.floor())) {
        return Err(Error::InvalidParameter(format!("grid value {bad} is out of range for {x_axis}")));
    }
    let points = grid
        .par_iter()
        .map(|&x| {
            let at = fixed.with(x_axis, x);
            let analytic = analytic_max(market, y_axis, at);
            let numeric = numeric.map(|c| numerical_max(market, y_axis, at, c)).transpose()?;
            Ok(EnvelopePoint { x, analytic, numeric })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FeasibilityEnvelope { x_axis, y_axis, fixed, points })
}

/// Margin-scaling frontier against the dataset-offset scaling.
pub fn envelope_alpha_delta_vs_alpha_kd(market: &Market, alpha_km: f64, grid: &[f64]) -> Result<FeasibilityEnvelope> {
    trace_envelope(market, Axis::KappaD, Axis::Delta, Scalings::new(1.0, alpha_km, 1.0), grid, None)
}

/// Margin-scaling frontier against the model-offset scaling.
pub fn envelope_alpha_delta_vs_alpha_km(market: &Market, alpha_kd: f64, grid: &[f64]) -> Result<FeasibilityEnvelope> {
    trace_envelope(market, Axis::KappaM, Axis::Delta, Scalings::new(alpha_kd, 1.0, 1.0), grid, None)
}

/// Model-offset frontier against the dataset-offset scaling at a fixed margin scaling.
pub fn envelope_km_vs_kd(market: &Market, alpha_delta: f64, grid: &[f64]) -> Result<FeasibilityEnvelope> {
    trace_envelope(market, Axis::KappaD, Axis::KappaM, Scalings::new(1.0, 1.0, alpha_delta), grid, None)
}

/// Writes `axis1,axis2_analytic_max,axis2_numeric_max,binding_model,binding_buyer`.
pub fn write_frontier_csv<W: Write>(writer: W, envelope: &FeasibilityEnvelope) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["axis1", "axis2_analytic_max", "axis2_numeric_max", "binding_model", "binding_buyer"])?;
    for p in &envelope.points {
        let numeric = p.numeric.as_ref().map(Frontier::cell).unwrap_or_default();
        let (model, buyer) = p
            .analytic
            .binding()
            .map(|b| (b.model.clone(), b.buyer.clone()))
            .unwrap_or_default();
        w.write_record([format!("{}", p.x), p.analytic.cell(), numeric, model, buyer])?;
    }
    w.flush()?;
    Ok(())
}

/// Nonnegative offset increases, aligned with the instance's dataset and model order.
#[derive(Debug, Clone, PartialEq)]
pub struct OffsetIncrements {
    pub kappa_d: Vec<f64>,
    pub kappa_m: Vec<f64>,
}

impl OffsetIncrements {
    pub fn zero(instance: &MarketInstance) -> Self {
        Self {
            kappa_d: vec![0.0; instance.datasets.len()],
            kappa_m: vec![0.0; instance.models.len()],
        }
    }

    pub fn apply(&self, instance: &MarketInstance) -> Result<MarketInstance> {
        if self.kappa_d.len() != instance.datasets.len() || self.kappa_m.len() != instance.models.len() {
            return Err(Error::InvalidParameter(
                "increments must list one value per dataset and per model".into(),
            ));
        }
        if let Some(bad) = self.kappa_d.iter().chain(&self.kappa_m).find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(Error::InvalidParameter(format!("offset increments must be nonnegative, got {bad}")));
        }
        let mut raised = instance.clone();
        for (d, inc) in raised.datasets.iter_mut().zip(&self.kappa_d) {
            d.kappa_d += inc;
        }
        for (m, inc) in raised.models.iter_mut().zip(&self.kappa_m) {
            m.kappa_m += inc;
        }
        Ok(raised)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MonotonicityVerdict {
    pub holds: bool,
    pub failures: Vec<String>,
    pub base: PriceVector,
    pub raised: PriceVector,
}

/// Weak slack in the componentwise comparison.
pub const MONOTONE_SLACK: f64 = 1e-9;
/// Minimum rise on components whose own offsets rose.
pub const STRICT_RISE: f64 = 1e-12;

/// Solves the instance before and after raising offsets and compares.
///
/// Every component must weakly rise. Buyer edges of a model whose model
/// offset or any used dataset offset rose, and data edges whose dataset
/// offset rose, must rise strictly. Both solves run to at least `1e-12`
/// so that solver error stays below the comparison slack.
pub fn offset_monotonicity_check(
    market: &Market,
    increments: &OffsetIncrements,
    params: QuotationParams,
    config: &SolverConfig,
) -> Result<MonotonicityVerdict> {
    let raised_market = Market::new(increments.apply(market.instance())?)?;
    let config = SolverConfig {
        tolerance: config.tolerance.min(1e-12),
        ..config.clone()
    };
    let base = solve(market, params, &config)?;
    let raised = solve(&raised_market, params, &config)?;
    let mut failures = Vec::new();
    if !(base.converged && raised.converged) {
        failures.push("solver did not converge".to_string());
    }

    let dataset_rose: Vec<bool> = increments.kappa_d.iter().map(|v| *v > 0.0).collect();
    let model_rose: Vec<bool> = market
        .models()
        .iter()
        .enumerate()
        .map(|(j, m)| increments.kappa_m[j] > 0.0 || m.data.clone().any(|e| dataset_rose[market.data_edges()[e].dataset]))
        .collect();

    let (p, q) = (&base.prices, &raised.prices);
    for (e, b) in market.buyer_edges().iter().enumerate() {
        let label = || format!("buyer edge {}/{}", market.models()[b.model].id, b.buyer_id);
        if q.buyer[e] < p.buyer[e] - MONOTONE_SLACK {
            failures.push(format!("{} fell from {} to {}", label(), p.buyer[e], q.buyer[e]));
        } else if model_rose[b.model] && q.buyer[e] <= p.buyer[e] + STRICT_RISE {
            failures.push(format!("{} did not rise ({} -> {})", label(), p.buyer[e], q.buyer[e]));
        }
    }
    for (e, d) in market.data_edges().iter().enumerate() {
        let label = || format!("data edge {}/{}", market.dataset_id(d.dataset), market.models()[d.model].id);
        if q.data[e] < p.data[e] - MONOTONE_SLACK {
            failures.push(format!("{} fell from {} to {}", label(), p.data[e], q.data[e]));
        } else if dataset_rose[d.dataset] && q.data[e] <= p.data[e] + STRICT_RISE {
            failures.push(format!("{} did not rise ({} -> {})", label(), p.data[e], q.data[e]));
        }
    }
    Ok(MonotonicityVerdict {
        holds: failures.is_empty(),
        failures,
        base: base.prices,
        raised: raised.prices,
    })
}

/// Largest uniform platform fee under which every buyer stays feasible.
#[derive(Debug, Clone, PartialEq)]
pub struct FeeReport {
    /// Largest admissible grossing factor.
    pub alpha_star: f64,
    /// `max(0, 1 - 1/alpha_star)`.
    pub tau_star: f64,
    pub binding_model: String,
    /// Admissible grossing factor of each model.
    pub per_model: Vec<(String, f64)>,
}

/// Per model `(1 - rho) * Rmin / (kM + (1 + delta) * S)`; the market value is the minimum.
pub fn max_uniform_fee(market: &Market) -> FeeReport {
    let per_model: Vec<(String, f64)> = market
        .models()
        .iter()
        .enumerate()
        .map(|(j, m)| {
            let cost = m.kappa_m + (1.0 + m.delta) * market.data_offset_sum(j);
            (m.id.clone(), (1.0 - m.rho) * market.min_reserve(j) / cost)
        })
        .collect();
    let (binding_model, alpha_star) = per_model
        .iter()
        .fold((String::new(), f64::INFINITY), |acc, (id, a)| {
            if *a < acc.1 {
                (id.clone(), *a)
            } else {
                acc
            }
        });
    FeeReport {
        alpha_star,
        tau_star: (1.0 - 1.0 / alpha_star).max(0.0),
        binding_model,
        per_model,
    }
}
