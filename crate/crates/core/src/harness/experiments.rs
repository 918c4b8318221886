//! Desk-scale experiment runs producing CSV-ready rows.
//!
//! Work fans out over seeds and grid cells with rayon; results are collected
//! in input order, so every run is reproducible for a given configuration.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use crate::baselines::{run_method, staged_propagation, BaselineConfig, Method, StageLabel};
use crate::error::{Error, Result};
use crate::feasibility::{analytic_max, numerical_max, Axis, Scalings};
use crate::market::{acceptance_check, Market};
use crate::quotation::QuotationParams;
use crate::solver::SolverConfig;

use super::generate::{generate, scale_reserves, GeneratorConfig};
use super::metrics::{buyer_surplus, finite_mean, revenue_shares, seller_profit};

pub const FAIRNESS_RHOS: [f64; 4] = [0.4, 0.6, 0.8, 0.99];
pub const STRESS_RESERVE_GRID: [f64; 6] = [0.5, 0.75, 1.0, 1.25, 1.5, 2.0];
pub const STRESS_MARGIN_GRID: [f64; 9] = [0.0, 1.0, 2.0, 5.0, 10.0, 20.0, 50.0, 100.0, 200.0];
pub const ENVELOPE_GRID: [f64; 5] = [0.25, 0.5, 1.0, 2.0, 4.0];
/// Success rate a method must reach for a stress level to count as sustained.
pub const SUSTAIN_THRESHOLD: f64 = 0.95;

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seeds: Vec<u64>,
    pub generator: GeneratorConfig,
    pub solver: SolverConfig,
    pub baseline: BaselineConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seeds: (0..20).collect(),
            generator: GeneratorConfig::default(),
            solver: SolverConfig::default(),
            baseline: BaselineConfig::default(),
        }
    }
}

impl ExperimentConfig {
    fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::InvalidParameter("experiments need at least one seed".into()));
        }
        self.generator.validate()?;
        self.solver.validate()?;
        self.baseline.validate()
    }
}

fn check_grid(name: &str, grid: &[f64], allow_zero: bool) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::InvalidParameter(format!("{name} grid is empty")));
    }
    if let Some(v) = grid.iter().find(|v| !(v.is_finite() && (**v > 0.0 || allow_zero && **v == 0.0))) {
        return Err(Error::InvalidParameter(format!("{name} grid value {v} is out of range")));
    }
    Ok(())
}

/// Writes rows with a header derived from the row type.
pub fn write_rows<W: Write, R: Serialize>(writer: W, rows: &[R]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_rows_to_path<R: Serialize>(path: impl AsRef<Path>, rows: &[R]) -> Result<()> {
    write_rows(BufWriter::new(File::create(path)?), rows)
}

/// One `(SV, revenue share)` point; `model` is `s<seed>/<model id>`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FairnessRow {
    pub rho: f64,
    pub method: String,
    pub model: String,
    pub spearman: f64,
    pub sv: f64,
    pub share: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FairnessSummary {
    pub rho: f64,
    pub method: Method,
    /// Mean per-model Spearman over seeds, skipping undefined entries.
    pub mean_spearman: f64,
    /// Largest deviation from the structural share identity (`TripleWin` only).
    pub structural_gap: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FairnessResult {
    pub rows: Vec<FairnessRow>,
    pub summary: Vec<FairnessSummary>,
}

/// Shapley shares against realized revenue shares across total buyer weights.
pub fn fairness_experiment(config: &ExperimentConfig, rhos: &[f64], methods: &[Method]) -> Result<FairnessResult> {
    config.validate()?;
    if rhos.is_empty() || rhos.iter().any(|r| !(0.0..1.0).contains(r)) {
        return Err(Error::InvalidParameter("rho grid values must lie in [0,1)".into()));
    }
    let cells: Vec<(f64, u64)> = rhos
        .iter()
        .flat_map(|&r| config.seeds.iter().map(move |&s| (r, s)))
        .collect();
    let per_cell = cells
        .par_iter()
        .map(|&(rho, seed)| {
            let market = Market::new(generate(&config.generator.clone().with_rho(rho), seed)?)?;
            methods
                .iter()
                .map(|&method| {
                    let prices = run_method(&market, method, QuotationParams::default(), &config.baseline, &config.solver)?;
                    let gap = if method == Method::TripleWin {
                        Some(super::metrics::structural_share_gap(&market, &prices)?)
                    } else {
                        None
                    };
                    let mut rows = Vec::new();
                    let mut rhos_per_model = Vec::new();
                    for s in revenue_shares(&market, &prices)? {
                        let r = s.spearman();
                        if s.sv.len() < 2 {
                            log::info!("seed {seed}: model `{}` has one dataset, Spearman skipped", s.model);
                        }
                        rhos_per_model.push(r);
                        for (sv, share) in s.sv.iter().zip(&s.share) {
                            rows.push(FairnessRow {
                                rho,
                                method: method.to_string(),
                                model: format!("s{seed}/{}", s.model),
                                spearman: r,
                                sv: *sv,
                                share: *share,
                            });
                        }
                    }
                    Ok((method, rows, rhos_per_model, gap))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;

    let mut rows = Vec::new();
    let mut summary = Vec::new();
    for &rho in rhos {
        for &method in methods {
            let mut values = Vec::new();
            let mut gap: Option<f64> = None;
            for ((r, _), results) in cells.iter().zip(&per_cell) {
                if *r != rho {
                    continue;
                }
                let (_, cell_rows, cell_rhos, cell_gap) =
                    results.iter().find(|(m, ..)| *m == method).expect("every method ran");
                rows.extend(cell_rows.iter().cloned());
                values.extend(cell_rhos.iter().copied());
                if let Some(g) = cell_gap {
                    gap = Some(gap.unwrap_or(0.0).max(*g));
                }
            }
            summary.push(FairnessSummary {
                rho,
                method,
                mean_spearman: finite_mean(values),
                structural_gap: gap,
            });
        }
    }
    Ok(FairnessResult { rows, summary })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StressRow {
    pub axis: String,
    pub value: f64,
    pub method: String,
    pub success_rate: f64,
}

pub const RESERVE_AXIS: &str = "alpha_r";
pub const MARGIN_AXIS: &str = "alpha_delta";

/// Mean market success rate per method under reserve and margin scaling.
pub fn stress_experiment(
    config: &ExperimentConfig,
    reserve_grid: &[f64],
    margin_grid: &[f64],
    methods: &[Method],
) -> Result<Vec<StressRow>> {
    config.validate()?;
    check_grid(RESERVE_AXIS, reserve_grid, false)?;
    check_grid(MARGIN_AXIS, margin_grid, true)?;
    let instances = config
        .seeds
        .par_iter()
        .map(|&s| generate(&config.generator, s))
        .collect::<Result<Vec<_>>>()?;

    let cells: Vec<(&str, f64, Method)> = reserve_grid
        .iter()
        .map(|&v| (RESERVE_AXIS, v))
        .chain(margin_grid.iter().map(|&v| (MARGIN_AXIS, v)))
        .flat_map(|(axis, v)| methods.iter().map(move |&m| (axis, v, m)))
        .collect();
    cells
        .par_iter()
        .map(|&(axis, value, method)| {
            let rates = instances
                .iter()
                .map(|inst| {
                    let (market, params) = if axis == RESERVE_AXIS {
                        (Market::new(scale_reserves(inst, value))?, QuotationParams::default())
                    } else {
                        (Market::new(inst.clone())?, QuotationParams::with_scalings(1.0, 1.0, value))
                    };
                    let prices = run_method(&market, method, params, &config.baseline, &config.solver)?;
                    Ok(acceptance_check(&market, &prices)?.success_rate())
                })
                .collect::<Result<Vec<f64>>>()?;
            Ok(StressRow {
                axis: axis.to_string(),
                value,
                method: method.to_string(),
                success_rate: rates.iter().sum::<f64>() / rates.len() as f64,
            })
        })
        .collect()
}

/// Largest grid value up to which `method` keeps at least `threshold` success
/// on `axis`, scanning the grid in ascending order.
pub fn sustained_limit(rows: &[StressRow], axis: &str, method: Method, threshold: f64) -> Option<f64> {
    let mut points: Vec<(f64, f64)> = rows
        .iter()
        .filter(|r| r.axis == axis && r.method == method.name())
        .map(|r| (r.value, r.success_rate))
        .collect();
    points.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut limit = None;
    for (v, rate) in points {
        if rate < threshold {
            break;
        }
        limit = Some(v);
    }
    limit
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PropagationRow {
    pub stage: String,
    pub method: String,
    pub side: String,
    pub value: f64,
}

pub const PROPAGATION_STAGES: [usize; 3] = [0, 1, 5];

/// Normalized buyer surplus and seller profit at selected propagation stages.
///
/// Values are divided by the largest absolute value on the same side of the
/// same instance across all methods and stages.
pub fn propagation_experiment(config: &ExperimentConfig, methods: &[Method]) -> Result<Vec<PropagationRow>> {
    config.validate()?;
    let rounds = *PROPAGATION_STAGES.iter().max().expect("non-empty");
    let per_seed = config
        .seeds
        .par_iter()
        .map(|&seed| {
            let market = Market::new(generate(&config.generator, seed)?)?;
            let mut raw: Vec<(String, Method, &'static str, Vec<f64>)> = Vec::new();
            for &method in methods {
                let stages = staged_propagation(
                    &market,
                    method,
                    QuotationParams::default(),
                    rounds,
                    &config.baseline,
                    &config.solver,
                )?;
                for (label, prices) in stages {
                    let keep = match label {
                        StageLabel::Round(r) => PROPAGATION_STAGES.contains(&r),
                        StageLabel::Converged => true,
                    };
                    if keep {
                        raw.push((label.to_string(), method, "buyer_surplus", buyer_surplus(&market, &prices)));
                        raw.push((label.to_string(), method, "seller_profit", seller_profit(&market, &prices)));
                    }
                }
            }
            let scale = |side: &str| {
                raw.iter()
                    .filter(|r| r.2 == side)
                    .flat_map(|r| r.3.iter())
                    .fold(0.0f64, |m, v| m.max(v.abs()))
            };
            let (buyer_scale, seller_scale) = (scale("buyer_surplus"), scale("seller_profit"));
            let rows: Vec<PropagationRow> = raw
                .iter()
                .flat_map(|(stage, method, side, values)| {
                    let s = if *side == "buyer_surplus" { buyer_scale } else { seller_scale };
                    values.iter().map(move |v| PropagationRow {
                        stage: stage.clone(),
                        method: method.to_string(),
                        side: side.to_string(),
                        value: if s > 0.0 { v / s } else { 0.0 },
                    })
                })
                .collect();
            Ok(rows)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(per_seed.into_iter().flatten().collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EnvelopeRow {
    pub panel: String,
    pub x: f64,
    pub analytic_y: String,
    pub numeric_y: String,
}

/// The three envelope panels: `(x axis, y axis)` with the remaining scaling at 1.
pub const ENVELOPE_PANELS: [(&str, Axis, Axis); 3] = [
    ("kd_delta", Axis::KappaD, Axis::Delta),
    ("km_delta", Axis::KappaM, Axis::Delta),
    ("kd_km", Axis::KappaD, Axis::KappaM),
];

/// Analytic and numerical frontiers of one instance on every panel.
pub fn envelope_experiment(market: &Market, grid: &[f64], solver: &SolverConfig) -> Result<Vec<EnvelopeRow>> {
    check_grid("envelope", grid, false)?;
    let cells: Vec<(&str, Axis, Axis, f64)> = ENVELOPE_PANELS
        .iter()
        .flat_map(|&(p, x, y)| grid.iter().map(move |&v| (p, x, y, v)))
        .collect();
    cells
        .par_iter()
        .map(|&(panel, x_axis, y_axis, x)| {
            let at = Scalings::default().with(x_axis, x);
            let analytic = analytic_max(market, y_axis, at);
            let numeric = numerical_max(market, y_axis, at, solver)?;
            Ok(EnvelopeRow {
                panel: panel.to_string(),
                x,
                analytic_y: analytic.cell(),
                numeric_y: numeric.cell(),
            })
        })
        .collect()
}
