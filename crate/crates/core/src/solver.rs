//! Fixed-point iteration of the joint quotation operator.
//!
//! Three schedules are supported. `Synchronous` applies `p <- Q(p)`.
//! `BlockAlternating` refreshes the data block from the current buyer block and
//! then the buyer block from the new data block. `AsyncRandomFair` updates one
//! uniformly drawn coordinate at a time, in place, while guaranteeing every
//! coordinate is touched at least once per aligned window of `4 d` micro-steps.
//!
//! For every schedule a sweep is `d` coordinate updates and the residual
//! `||Q(p) - p||_2 / sqrt(d)` is recorded once per sweep, before the sweep.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::market::{acceptance_check, AcceptanceReport, Market, PriceVector};
use crate::quotation::{normalized_distance, QuotationOperator, QuotationParams};

/// Length of the async fairness window, in sweeps.
pub const FAIRNESS_WINDOW_SWEEPS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Schedule {
    Synchronous,
    BlockAlternating,
    AsyncRandomFair,
}

impl Schedule {
    pub const ALL: [Schedule; 3] = [
        Schedule::Synchronous,
        Schedule::BlockAlternating,
        Schedule::AsyncRandomFair,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Schedule::Synchronous => "sync",
            Schedule::BlockAlternating => "block",
            Schedule::AsyncRandomFair => "async",
        }
    }
}

impl fmt::Display for Schedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Schedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sync" | "synchronous" => Ok(Schedule::Synchronous),
            "block" | "block_alternating" => Ok(Schedule::BlockAlternating),
            "async" | "async_random_fair" => Ok(Schedule::AsyncRandomFair),
            other => Err(Error::InvalidParameter(format!("unknown schedule `{other}`"))),
        }
    }
}

/// Starting point of the iteration.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum Initialization {
    /// Data edges at their list cap (dataset offset when uncapped), buyer edges at `kappa_M`.
    #[default]
    ListCaps,
    Zero,
    Given(PriceVector),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig {
    pub tolerance: f64,
    pub max_iterations: usize,
    pub schedule: Schedule,
    /// Seeds the async schedule; ignored otherwise.
    pub seed: u64,
    pub init: Initialization,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            tolerance: 1e-10,
            max_iterations: 100_000,
            schedule: Schedule::Synchronous,
            seed: 0,
            init: Initialization::ListCaps,
        }
    }
}

impl SolverConfig {
    pub fn with_schedule(schedule: Schedule) -> Self {
        Self {
            schedule,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tolerance.is_finite() && self.tolerance > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "tolerance must be > 0, got {}",
                self.tolerance
            )));
        }
        if self.max_iterations == 0 {
            return Err(Error::InvalidParameter("max_iterations must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EquilibriumReport {
    pub prices: PriceVector,
    /// Sweeps performed.
    pub iterations: usize,
    /// Residual of the state before each sweep; the last entry belongs to `prices`.
    pub residual_trace: Vec<f64>,
    pub converged: bool,
    pub schedule: Schedule,
    pub acceptance: AcceptanceReport,
}

impl EquilibriumReport {
    pub fn final_residual(&self) -> f64 {
        self.residual_trace.last().copied().unwrap_or(f64::INFINITY)
    }
}

/// Table-style starting point: caps on data edges, `kappa_M` on buyer edges.
pub fn default_initialization(market: &Market) -> PriceVector {
    let mut buyer = vec![0.0; market.buyer_edges().len()];
    for m in market.models() {
        buyer[m.buyers.clone()].fill(m.kappa_m);
    }
    let data = market
        .data_edges()
        .iter()
        .map(|e| e.cap.unwrap_or(e.kappa_d))
        .collect();
    PriceVector { buyer, data }
}

fn initial_state(market: &Market, init: &Initialization) -> Result<PriceVector> {
    let p = match init {
        Initialization::ListCaps => default_initialization(market),
        Initialization::Zero => PriceVector::zeros(market),
        Initialization::Given(p) => {
            p.check_shape(market)?;
            p.clone()
        }
    };
    if !p.is_nonnegative() {
        return Err(Error::InvalidParameter("initial prices must be finite and nonnegative".into()));
    }
    Ok(p)
}

/// Picks coordinates uniformly at random, forcing any coordinate not yet
/// updated in the current window once the window would otherwise run out.
struct FairPicker {
    window: usize,
    step: usize,
    pending: Vec<bool>,
    pending_count: usize,
    cursor: usize,
    rng: ChaCha8Rng,
}

impl FairPicker {
    fn new(d: usize, seed: u64) -> Self {
        Self {
            window: FAIRNESS_WINDOW_SWEEPS * d,
            step: 0,
            pending: vec![true; d],
            pending_count: d,
            cursor: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn next(&mut self) -> usize {
        let offset = self.step % self.window;
        if offset == 0 {
            self.pending.fill(true);
            self.pending_count = self.pending.len();
            self.cursor = 0;
        }
        let remaining = self.window - offset;
        let c = if self.pending_count >= remaining {
            while !self.pending[self.cursor] {
                self.cursor += 1;
            }
            self.cursor
        } else {
            self.rng.random_range(0..self.pending.len())
        };
        if self.pending[c] {
            self.pending[c] = false;
            self.pending_count -= 1;
        }
        self.step += 1;
        c
    }
}

pub fn solve(market: &Market, params: QuotationParams, config: &SolverConfig) -> Result<EquilibriumReport> {
    let op = QuotationOperator::new(market, params)?;
    solve_with(&op, config)
}

/// Runs the configured schedule until the residual drops to the tolerance.
///
/// Hitting `max_iterations` yields `converged = false`, not an error.
pub fn solve_with(op: &QuotationOperator<'_>, config: &SolverConfig) -> Result<EquilibriumReport> {
    config.validate()?;
    let market = op.market();
    let mut p = initial_state(market, &config.init)?;
    let mut q = PriceVector::zeros(market);
    let mut trace = Vec::new();
    let mut picker = FairPicker::new(market.dim().max(1), config.seed);
    let n_buyer = market.buyer_edges().len();

    let mut converged = false;
    let mut iterations = 0;
    loop {
        op.apply_into(&p, &mut q);
        let r = normalized_distance(&q, &p);
        trace.push(r);
        if r <= config.tolerance {
            converged = true;
            break;
        }
        if !r.is_finite() || iterations == config.max_iterations {
            break;
        }
        match config.schedule {
            Schedule::Synchronous => std::mem::swap(&mut p, &mut q),
            Schedule::BlockAlternating => {
                op.quote_data_into(&p.buyer, &mut p.data);
                op.quote_buyers_into(&p.data, &mut p.buyer);
            }
            Schedule::AsyncRandomFair => {
                for _ in 0..market.dim() {
                    let c = picker.next();
                    if c < n_buyer {
                        p.buyer[c] = op.buyer_quote_at(c, &p.data);
                    } else {
                        let e = c - n_buyer;
                        p.data[e] = op.data_quote_at(e, &p.buyer);
                    }
                }
            }
        }
        iterations += 1;
    }
    if !converged {
        log::warn!(
            "{} schedule stopped after {iterations} sweeps with residual {:e}",
            config.schedule,
            trace.last().copied().unwrap_or(f64::NAN)
        );
    }

    let acceptance = acceptance_check(market, &p)?;
    Ok(EquilibriumReport {
        prices: p,
        iterations,
        residual_trace: trace,
        converged,
        schedule: config.schedule,
        acceptance,
    })
}

/// Equilibrium from the closed form.
///
/// Every buyer of model `j` pays `(kM + m * S) / (1 - rho)` where `kM` and `S`
/// are the effective model offset and data-offset sum and `m = 1 + delta`;
/// data edge `i` receives `kD_i + share_i * rho * p_M / m`.
pub fn closed_form_equilibrium(market: &Market, params: QuotationParams) -> Result<PriceVector> {
    let op = QuotationOperator::new(market, params)?;
    let mut p = PriceVector::zeros(market);
    for (j, m) in market.models().iter().enumerate() {
        let s: f64 = m.data.clone().map(|e| op.data_offset(e)).sum();
        let margin = op.margin_factor(j);
        let price = (op.model_offset(j) + margin * s) / (1.0 - m.rho);
        p.buyer[m.buyers.clone()].fill(price);
        for e in m.data.clone() {
            p.data[e] = op.data_offset(e) + market.data_edges()[e].share * m.rho * price / margin;
        }
    }
    Ok(p)
}

/// The super-solution `p_bar >= Q(p_bar)` built from the per-model bound
/// `L_j = (max_k kM_jk + m_j S_j) / (1 - rho_j)`.
pub fn feasible_upper_bound(market: &Market, params: QuotationParams) -> Result<PriceVector> {
    let op = QuotationOperator::new(market, params)?;
    let mut p = PriceVector::zeros(market);
    for (j, m) in market.models().iter().enumerate() {
        // One offset per model, so the max over buyers is that offset.
        let kappa_max = m.buyers.clone().map(|_| op.model_offset(j)).fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = m.data.clone().map(|e| op.data_offset(e)).sum();
        let margin = op.margin_factor(j);
        let bound = (kappa_max + margin * s) / (1.0 - m.rho);
        p.buyer[m.buyers.clone()].fill(bound);
        for e in m.data.clone() {
            let share = market.data_edges()[e].share;
            p.data[e] = op.data_offset(e) + share / margin * m.rho * bound;
        }
    }
    debug_assert!(is_super_solution(&op, &p, 1e-12));
    Ok(p)
}

/// `Q(p) <= p` componentwise, up to a relative slack.
pub fn is_super_solution(op: &QuotationOperator<'_>, p: &PriceVector, rel_slack: f64) -> bool {
    match op.apply(p) {
        Ok(q) => q
            .iter()
            .zip(p.iter())
            .all(|(qi, pi)| *qi <= *pi + rel_slack * pi.abs().max(1.0)),
        Err(_) => false,
    }
}

/// States `p, Q(p), Q^2(p), ...` for `steps` synchronous applications.
pub fn synchronous_trajectory(
    op: &QuotationOperator<'_>,
    start: &PriceVector,
    steps: usize,
) -> Result<Vec<PriceVector>> {
    start.check_shape(op.market())?;
    let mut states = Vec::with_capacity(steps + 1);
    states.push(start.clone());
    for _ in 0..steps {
        let next = op.apply(states.last().expect("non-empty"))?;
        states.push(next);
    }
    Ok(states)
}

/// Appends `instance_id,schedule,iteration,residual` rows, with a header when asked.
pub fn write_trace_csv<W: Write>(
    writer: W,
    instance_id: &str,
    report: &EquilibriumReport,
    header: bool,
) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(writer);
    if header {
        w.write_record(["instance_id", "schedule", "iteration", "residual"])?;
    }
    for (t, r) in report.residual_trace.iter().enumerate() {
        w.write_record([
            instance_id.to_string(),
            report.schedule.to_string(),
            t.to_string(),
            format!("{r:e}"),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct BuyerPriceRow {
    pub model: String,
    pub buyer: String,
    pub price: f64,
    pub reserve: f64,
    pub accepted: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct DataPriceRow {
    pub dataset: String,
    pub model: String,
    pub price: f64,
    pub kappa_d: f64,
    pub accepted: bool,
}

/// Edge-keyed prices with their acceptance verdicts.
pub fn keyed_prices(market: &Market, prices: &PriceVector) -> Result<(Vec<BuyerPriceRow>, Vec<DataPriceRow>)> {
    let acc = acceptance_check(market, prices)?;
    let buyers = market
        .buyer_edges()
        .iter()
        .enumerate()
        .map(|(e, b)| BuyerPriceRow {
            model: market.models()[b.model].id.clone(),
            buyer: b.buyer_id.clone(),
            price: prices.buyer[e],
            reserve: b.reserve,
            accepted: acc.buyer[e],
        })
        .collect();
    let data = market
        .data_edges()
        .iter()
        .enumerate()
        .map(|(e, d)| DataPriceRow {
            dataset: market.dataset_id(d.dataset).to_string(),
            model: market.models()[d.model].id.clone(),
            price: prices.data[e],
            kappa_d: d.kappa_d,
            accepted: acc.data[e],
        })
        .collect();
    Ok((buyers, data))
}

/// Serializable form of an [`EquilibriumReport`].
#[derive(Debug, Clone, Serialize)]
pub struct ReportDocument {
    pub schedule: String,
    pub converged: bool,
    pub iterations: usize,
    pub final_residual: f64,
    pub success_rate: f64,
    pub buyer_prices: Vec<BuyerPriceRow>,
    pub data_prices: Vec<DataPriceRow>,
    pub residual_trace: Vec<f64>,
}

impl ReportDocument {
    pub fn new(market: &Market, report: &EquilibriumReport) -> Result<Self> {
        let (buyer_prices, data_prices) = keyed_prices(market, &report.prices)?;
        Ok(Self {
            schedule: report.schedule.to_string(),
            converged: report.converged,
            iterations: report.iterations,
            final_residual: report.final_residual(),
            success_rate: report.acceptance.success_rate(),
            buyer_prices,
            data_prices,
            residual_trace: report.residual_trace.clone(),
        })
    }
}
