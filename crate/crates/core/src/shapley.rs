//! Exact Shapley contributions of datasets to a model.
//!
//! Coalitions are bitmasks over the ground set, so player `i` is bit `i`.
//! Values are computed by full subset enumeration with the binomial weights
//! `1 / (n * C(n-1, |S|))`, which caps the ground set at [`MAX_PLAYERS`].

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::market::{ShapleyColumn, ShapleyTable};

/// Largest ground set handled by exact enumeration.
pub const MAX_PLAYERS: usize = 20;

/// A deterministic utility defined on every subset of a ground set.
pub trait CoalitionUtility {
    fn players(&self) -> &[String];

    /// Utility of the coalition whose members are the set bits of `coalition`.
    fn value(&self, coalition: u32) -> f64;
}

/// Utility given as a dense table indexed by coalition bitmask.
#[derive(Debug, Clone, PartialEq)]
pub struct UtilityTable {
    players: Vec<String>,
    values: Vec<f64>,
}

impl UtilityTable {
    pub fn new(players: Vec<String>, values: Vec<f64>) -> Result<Self> {
        check_capacity(players.len())?;
        let expected = 1usize << players.len();
        if values.len() != expected {
            return Err(Error::InvalidParameter(format!(
                "utility table needs {expected} entries for {} players, got {}",
                players.len(),
                values.len()
            )));
        }
        Ok(Self { players, values })
    }

    pub fn from_fn(players: Vec<String>, f: impl Fn(u32) -> f64) -> Result<Self> {
        check_capacity(players.len())?;
        let values = (0..1u32 << players.len()).map(f).collect();
        Ok(Self { players, values })
    }

    /// Builds one model's table from subset entries, which must cover every
    /// subset of the union of the listed datasets exactly once.
    pub fn from_entries<'a>(
        model: &str,
        entries: impl IntoIterator<Item = &'a SubsetUtility>,
    ) -> Result<Self> {
        let entries: Vec<&SubsetUtility> = entries.into_iter().filter(|e| e.model == model).collect();
        let incomplete = |reason: String| Error::IncompleteUtility {
            model: model.to_string(),
            reason,
        };
        let ground: BTreeSet<&str> = entries
            .iter()
            .flat_map(|e| e.subset.iter().map(String::as_str))
            .collect();
        let players: Vec<String> = ground.iter().map(|s| s.to_string()).collect();
        check_capacity(players.len())?;
        let index: BTreeMap<&str, usize> = ground.iter().enumerate().map(|(i, s)| (*s, i)).collect();

        let mut values = vec![None; 1usize << players.len()];
        for e in &entries {
            let mut mask = 0u32;
            for d in &e.subset {
                let bit = 1u32 << index[d.as_str()];
                if mask & bit != 0 {
                    return Err(incomplete(format!("dataset `{d}` repeated in a subset")));
                }
                mask |= bit;
            }
            if !e.utility.is_finite() {
                return Err(incomplete(format!("non-finite utility for subset {:?}", e.subset)));
            }
            if values[mask as usize].replace(e.utility).is_some() {
                return Err(incomplete(format!("subset {:?} listed twice", e.subset)));
            }
        }
        let missing = values.iter().filter(|v| v.is_none()).count();
        if missing > 0 {
            return Err(incomplete(format!(
                "{missing} of {} subsets have no utility",
                values.len()
            )));
        }
        Ok(Self {
            players,
            values: values.into_iter().map(Option::unwrap).collect(),
        })
    }
}

impl CoalitionUtility for UtilityTable {
    fn players(&self) -> &[String] {
        &self.players
    }

    fn value(&self, coalition: u32) -> f64 {
        self.values[coalition as usize]
    }
}

/// One row of a subset-utility input file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubsetUtility {
    pub model: String,
    pub subset: Vec<String>,
    pub utility: f64,
}

fn check_capacity(n: usize) -> Result<()> {
    if n > MAX_PLAYERS {
        return Err(Error::Capacity {
            size: n,
            limit: MAX_PLAYERS,
        });
    }
    Ok(())
}

fn binomial(n: usize, k: usize) -> f64 {
    let k = k.min(n - k);
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Weight `1 / (n * C(n-1, s))` for every coalition size `s` in `0..n`.
fn coalition_weights(n: usize) -> Vec<f64> {
    (0..n).map(|s| 1.0 / (n as f64 * binomial(n - 1, s))).collect()
}

fn shapley_of_player<U: CoalitionUtility + ?Sized>(u: &U, player: usize, weights: &[f64]) -> f64 {
    let n = u.players().len();
    let bit = 1u32 << player;
    let mut total = 0.0;
    for coalition in 0..1u32 << n {
        if coalition & bit != 0 {
            continue;
        }
        let marginal = u.value(coalition | bit) - u.value(coalition);
        total += weights[coalition.count_ones() as usize] * marginal;
    }
    total
}

/// Exact Shapley value of `dataset_id`.
pub fn shapley_exact<U: CoalitionUtility + ?Sized>(u: &U, dataset_id: &str) -> Result<f64> {
    let n = u.players().len();
    check_capacity(n)?;
    let player = u
        .players()
        .iter()
        .position(|p| p == dataset_id)
        .ok_or_else(|| Error::UnknownDataset(dataset_id.to_string()))?;
    Ok(shapley_of_player(u, player, &coalition_weights(n)))
}

/// Exact Shapley values of every player, in ground-set order.
pub fn shapley_values<U: CoalitionUtility + ?Sized>(u: &U) -> Result<Vec<f64>> {
    let n = u.players().len();
    check_capacity(n)?;
    if n == 0 {
        return Ok(Vec::new());
    }
    let weights = coalition_weights(n);
    Ok((0..n).map(|i| shapley_of_player(u, i, &weights)).collect())
}

/// Turns raw values into nonnegative shares summing to one.
///
/// Negative raw values are clamped to zero before dividing by the column sum.
pub fn normalize_column(model: &str, raw: &[(String, f64)]) -> Result<ShapleyColumn> {
    let raw_sum: f64 = raw.iter().map(|(_, v)| v).sum();
    if raw_sum.is_nan() || raw_sum <= 0.0 {
        return Err(Error::Normalization {
            model: model.to_string(),
            sum: raw_sum,
        });
    }
    let clamped: Vec<(String, f64)> = raw
        .iter()
        .map(|(d, v)| {
            if *v < 0.0 {
                log::warn!("clamping negative Shapley value {v} of `{d}` for model `{model}` to 0");
                (d.clone(), 0.0)
            } else {
                (d.clone(), *v)
            }
        })
        .collect();
    let sum: f64 = clamped.iter().map(|(_, v)| v).sum();
    Ok(ShapleyColumn {
        model: model.to_string(),
        shares: clamped.into_iter().map(|(d, v)| (d, v / sum)).collect(),
    })
}

/// Computes and normalizes one column per model.
pub fn shapley_table<U: CoalitionUtility>(utilities: &[(String, U)]) -> Result<ShapleyTable> {
    let columns = utilities
        .iter()
        .map(|(model, u)| {
            let values = shapley_values(u)?;
            let raw: Vec<(String, f64)> = u.players().iter().cloned().zip(values).collect();
            normalize_column(model, &raw)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ShapleyTable { columns })
}

/// Groups subset entries by model and builds the normalized table.
pub fn shapley_table_from_entries(entries: &[SubsetUtility]) -> Result<ShapleyTable> {
    let models: BTreeSet<&str> = entries.iter().map(|e| e.model.as_str()).collect();
    let utilities = models
        .into_iter()
        .map(|m| Ok((m.to_string(), UtilityTable::from_entries(m, entries)?)))
        .collect::<Result<Vec<_>>>()?;
    shapley_table(&utilities)
}
