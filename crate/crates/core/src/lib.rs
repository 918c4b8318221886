//! Coupled pricing for a three-sided data market.
//!
//! Data owners sell to a broker, the broker trains models, and buyers purchase
//! model access. Every edge of the market carries a price, and the prices of
//! the two sides are linked through the broker's revenue-sharing rule. The
//! equilibrium is the fixed point of the joint quotation operator.

pub mod baselines;
pub mod error;
pub mod feasibility;
pub mod format;
pub mod harness;
pub mod market;
pub mod quotation;
pub mod shapley;
pub mod solver;

pub use error::{Error, Result};
pub use market::{acceptance_check, AcceptanceReport, Market, MarketInstance, PriceVector};
pub use quotation::{joint_operator, residual, QuotationOperator, QuotationParams};
pub use solver::{solve, EquilibriumReport, Initialization, Schedule, SolverConfig};
