//! Seeded synthetic markets.
//!
//! Every draw is made in a fixed order that does not depend on the total
//! buyer weight, so two instances generated from the same seed with different
//! weights differ only in their buyer weights.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp1;

use crate::error::{Error, Result};
use crate::market::{BuyerEdge, CapEntry, DatasetSpec, MarketInstance, ModelSpec, ShapleyColumn, ShapleyTable};
use crate::shapley::{normalize_column, shapley_values, UtilityTable, MAX_PLAYERS};

/// How per-model Shapley columns are produced.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ShapleySource {
    /// Uniform draw from the probability simplex.
    Dirichlet,
    /// Exact Shapley values of `U(S) = (sum of member weights)^exponent`
    /// with member weights drawn from `[0.5, 1.5]`.
    SyntheticUtility { exponent: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorConfig {
    pub n_datasets: usize,
    pub n_models: usize,
    /// Inclusive range of buyers per model.
    pub buyers_per_model: (usize, usize),
    /// Inclusive range of datasets used by each model.
    pub datasets_per_model: (usize, usize),
    pub kappa_d: (f64, f64),
    pub kappa_m: (f64, f64),
    pub delta: f64,
    pub reserve: (f64, f64),
    pub cap: (f64, f64),
    /// Total buyer weight of every model.
    pub rho: f64,
    pub shapley: ShapleySource,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            n_datasets: 7,
            n_models: 7,
            buyers_per_model: (1, 5),
            datasets_per_model: (7, 7),
            kappa_d: (0.10, 0.40),
            kappa_m: (1.0, 5.0),
            delta: 0.10,
            reserve: (25.0, 100.0),
            cap: (1.5, 4.0),
            rho: 0.6,
            shapley: ShapleySource::Dirichlet,
        }
    }
}

impl GeneratorConfig {
    pub fn with_rho(self, rho: f64) -> Self {
        Self { rho, ..self }
    }

    pub fn single_buyer(self) -> Self {
        Self {
            buyers_per_model: (1, 1),
            ..self
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidParameter(msg));
        if self.n_datasets == 0 || self.n_models == 0 {
            return bad("generator needs at least one dataset and one model".into());
        }
        let (bmin, bmax) = self.buyers_per_model;
        if bmin == 0 || bmin > bmax {
            return bad(format!("buyers_per_model range ({bmin}, {bmax}) is invalid"));
        }
        let (dmin, dmax) = self.datasets_per_model;
        if dmin == 0 || dmin > dmax || dmax > self.n_datasets {
            return bad(format!("datasets_per_model range ({dmin}, {dmax}) is invalid"));
        }
        for (name, (lo, hi)) in [
            ("kappa_d", self.kappa_d),
            ("kappa_m", self.kappa_m),
            ("reserve", self.reserve),
            ("cap", self.cap),
        ] {
            if !(lo.is_finite() && hi.is_finite() && lo > 0.0 && lo <= hi) {
                return bad(format!("{name} range ({lo}, {hi}) is invalid"));
            }
        }
        if !(self.delta.is_finite() && self.delta >= 0.0) {
            return bad(format!("delta must be >= 0, got {}", self.delta));
        }
        if !(0.0..1.0).contains(&self.rho) {
            return bad(format!("rho must lie in [0,1), got {}", self.rho));
        }
        if let ShapleySource::SyntheticUtility { exponent } = self.shapley {
            if !(exponent.is_finite() && exponent > 0.0) {
                return bad(format!("utility exponent must be > 0, got {exponent}"));
            }
            if dmax > MAX_PLAYERS {
                return Err(Error::Capacity { size: dmax, limit: MAX_PLAYERS });
            }
        }
        Ok(())
    }
}

fn draw(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    rng.random_range(lo..=hi)
}

fn shapley_column(
    rng: &mut ChaCha8Rng,
    model: &str,
    datasets: &[String],
    source: ShapleySource,
) -> Result<ShapleyColumn> {
    match source {
        ShapleySource::Dirichlet => {
            let raw: Vec<f64> = datasets.iter().map(|_| rng.sample::<f64, _>(Exp1)).collect();
            let sum: f64 = raw.iter().sum();
            Ok(ShapleyColumn {
                model: model.to_string(),
                shares: datasets.iter().cloned().zip(raw.iter().map(|v| v / sum)).collect(),
            })
        }
        ShapleySource::SyntheticUtility { exponent } => {
            let weights: Vec<f64> = datasets.iter().map(|_| rng.random_range(0.5..=1.5)).collect();
            let utility = UtilityTable::from_fn(datasets.to_vec(), |s| {
                let total: f64 = (0..weights.len()).filter(|i| s & (1 << i) != 0).map(|i| weights[i]).sum();
                total.powf(exponent)
            })?;
            let raw: Vec<(String, f64)> = datasets.iter().cloned().zip(shapley_values(&utility)?).collect();
            normalize_column(model, &raw)
        }
    }
}

/// Draws one instance. The same `(config, seed)` always yields the same instance.
pub fn generate(config: &GeneratorConfig, seed: u64) -> Result<MarketInstance> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let datasets: Vec<DatasetSpec> = (1..=config.n_datasets)
        .map(|i| DatasetSpec {
            id: format!("D{i}"),
            kappa_d: draw(&mut rng, config.kappa_d),
        })
        .collect();

    let mut models = Vec::with_capacity(config.n_models);
    let mut caps = Vec::new();
    let mut columns = Vec::with_capacity(config.n_models);
    for j in 1..=config.n_models {
        let id = format!("M{j}");
        let kappa_m = draw(&mut rng, config.kappa_m);

        let (dmin, dmax) = config.datasets_per_model;
        let n_used = rng.random_range(dmin..=dmax);
        let mut picked = sample(&mut rng, config.n_datasets, n_used).into_vec();
        picked.sort_unstable();
        let used: Vec<String> = picked.iter().map(|&i| datasets[i].id.clone()).collect();

        let (bmin, bmax) = config.buyers_per_model;
        let n_buyers = rng.random_range(bmin..=bmax);
        let raw: Vec<(f64, f64)> = (0..n_buyers)
            .map(|_| (1.0 - rng.random::<f64>(), draw(&mut rng, config.reserve)))
            .collect();
        let raw_sum: f64 = raw.iter().map(|(w, _)| w).sum();
        let mut assigned = 0.0;
        let buyers: Vec<BuyerEdge> = raw
            .iter()
            .enumerate()
            .map(|(k, (w, reserve))| {
                // The last weight absorbs rounding so the total is the target.
                let omega = if k + 1 == n_buyers {
                    (config.rho - assigned).max(0.0)
                } else {
                    config.rho * w / raw_sum
                };
                assigned += omega;
                BuyerEdge {
                    id: format!("B{}", k + 1),
                    omega,
                    reserve: *reserve,
                }
            })
            .collect();

        for d in &used {
            caps.push(CapEntry {
                dataset: d.clone(),
                model: id.clone(),
                cap: draw(&mut rng, config.cap),
            });
        }
        columns.push(shapley_column(&mut rng, &id, &used, config.shapley)?);
        models.push(ModelSpec {
            id,
            kappa_m,
            delta: config.delta,
            datasets: used,
            buyers,
        });
    }

    let instance = MarketInstance {
        datasets,
        models,
        caps,
        shapley: ShapleyTable { columns },
    };
    let report = instance.validate();
    if !report.is_valid() {
        return Err(Error::Invalid(report));
    }
    Ok(instance)
}

/// Copy of `instance` with every reserve multiplied by `factor`.
pub fn scale_reserves(instance: &MarketInstance, factor: f64) -> MarketInstance {
    let mut scaled = instance.clone();
    for m in &mut scaled.models {
        for b in &mut m.buyers {
            b.reserve *= factor;
        }
    }
    scaled
}

/// Shapley shares of every model, keyed by model then dataset.
pub fn shares_by_model(instance: &MarketInstance) -> BTreeMap<String, BTreeMap<String, f64>> {
    instance
        .shapley
        .columns
        .iter()
        .map(|c| (c.model.clone(), c.shares.clone()))
        .collect()
}
