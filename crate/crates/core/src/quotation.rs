//! Buyer-side and data-side quotation mappings and the joint operator.
//!
//! For model `j` with data edges `i` and buyer edges `k`:
//!
//! ```text
//! v_B(k,j) = a * s_M * kappa_M(j) + (1 + s_delta * delta(j)) * sum_i p_D(i,j)
//! v_D(i,j) = a * s_D * kappa_D(i) + share(i,j) * W(j) / (1 + s_delta * delta(j))
//! W(j)     = sum_k omega(j,k) * p_B(k,j)
//! ```
//!
//! where `a = 1 / (1 - fee)` is the grossing factor and `s_*` are global
//! scalings of the instance's baseline offsets and margins.

use crate::error::{Error, Result};
use crate::market::{Market, PriceVector};

/// Parameters of the operator. The instance itself is never mutated.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuotationParams {
    /// Grossing factor `1 / (1 - fee)`, at least 1.
    pub grossing: f64,
    pub alpha_kappa_d: f64,
    pub alpha_kappa_m: f64,
    pub alpha_delta: f64,
}

impl Default for QuotationParams {
    fn default() -> Self {
        Self {
            grossing: 1.0,
            alpha_kappa_d: 1.0,
            alpha_kappa_m: 1.0,
            alpha_delta: 1.0,
        }
    }
}

impl QuotationParams {
    pub fn with_fee(fee: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&fee) {
            return Err(Error::InvalidParameter(format!("fee must lie in [0,1), got {fee}")));
        }
        Ok(Self {
            grossing: 1.0 / (1.0 - fee),
            ..Self::default()
        })
    }

    pub fn with_scalings(alpha_kappa_d: f64, alpha_kappa_m: f64, alpha_delta: f64) -> Self {
        Self {
            alpha_kappa_d,
            alpha_kappa_m,
            alpha_delta,
            ..Self::default()
        }
    }

    /// The fee implied by the grossing factor.
    pub fn fee(&self) -> f64 {
        1.0 - 1.0 / self.grossing
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.grossing.is_finite() && self.grossing >= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "grossing factor must be >= 1, got {}",
                self.grossing
            )));
        }
        for (name, v) in [("alpha_kappa_d", self.alpha_kappa_d), ("alpha_kappa_m", self.alpha_kappa_m)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidParameter(format!("{name} must be > 0, got {v}")));
            }
        }
        if !(self.alpha_delta.is_finite() && self.alpha_delta >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "alpha_delta must be >= 0, got {}",
                self.alpha_delta
            )));
        }
        Ok(())
    }
}

/// The joint quotation operator of one market under fixed parameters.
///
/// Effective offsets and coefficients are resolved once at construction.
#[derive(Debug, Clone)]
pub struct QuotationOperator<'a> {
    market: &'a Market,
    params: QuotationParams,
    /// Per model.
    kappa_m: Vec<f64>,
    margin: Vec<f64>,
    /// Per data edge.
    kappa_d: Vec<f64>,
    data_coef: Vec<f64>,
}

impl<'a> QuotationOperator<'a> {
    pub fn new(market: &'a Market, params: QuotationParams) -> Result<Self> {
        params.validate()?;
        let kappa_m = market
            .models()
            .iter()
            .map(|m| params.grossing * params.alpha_kappa_m * m.kappa_m)
            .collect();
        let margin: Vec<f64> = market
            .models()
            .iter()
            .map(|m| 1.0 + params.alpha_delta * m.delta)
            .collect();
        let kappa_d = market
            .data_edges()
            .iter()
            .map(|e| params.grossing * params.alpha_kappa_d * e.kappa_d)
            .collect();
        let data_coef = market
            .data_edges()
            .iter()
            .map(|e| e.share / margin[e.model])
            .collect();
        Ok(Self {
            market,
            params,
            kappa_m,
            margin,
            kappa_d,
            data_coef,
        })
    }

    pub fn market(&self) -> &'a Market {
        self.market
    }

    pub fn params(&self) -> QuotationParams {
        self.params
    }

    pub fn dim(&self) -> usize {
        self.market.dim()
    }

    /// Effective model-side offset of model `j`.
    pub fn model_offset(&self, j: usize) -> f64 {
        self.kappa_m[j]
    }

    /// `1 + alpha_delta * delta` of model `j`.
    pub fn margin_factor(&self, j: usize) -> f64 {
        self.margin[j]
    }

    /// Effective dataset offset on data edge `e`.
    pub fn data_offset(&self, e: usize) -> f64 {
        self.kappa_d[e]
    }

    /// `W_j` for every model.
    pub fn effective_revenue(&self, prices: &PriceVector) -> Result<Vec<f64>> {
        prices.check_shape(self.market)?;
        Ok(self.revenue_of(&prices.buyer))
    }

    pub(crate) fn revenue_of(&self, buyer: &[f64]) -> Vec<f64> {
        self.market
            .models()
            .iter()
            .map(|m| self.revenue_of_model(buyer, m.buyers.clone()))
            .collect()
    }

    fn revenue_of_model(&self, buyer: &[f64], range: std::ops::Range<usize>) -> f64 {
        self.market.buyer_edges()[range.clone()]
            .iter()
            .zip(&buyer[range])
            .map(|(e, p)| e.omega * p)
            .sum()
    }

    fn expenditure_of_model(&self, data: &[f64], range: std::ops::Range<usize>) -> f64 {
        data[range].iter().sum()
    }

    /// Buyer-side quotations from data prices. Constant across a model's buyers.
    pub fn quote_buyers(&self, data_prices: &[f64]) -> Result<Vec<f64>> {
        self.check_data(data_prices)?;
        let mut out = vec![0.0; self.market.buyer_edges().len()];
        self.quote_buyers_into(data_prices, &mut out);
        Ok(out)
    }

    /// Data-side quotations from buyer prices.
    pub fn quote_data(&self, buyer_prices: &[f64]) -> Result<Vec<f64>> {
        self.check_buyer(buyer_prices)?;
        let mut out = vec![0.0; self.market.data_edges().len()];
        self.quote_data_into(buyer_prices, &mut out);
        Ok(out)
    }

    pub(crate) fn quote_buyers_into(&self, data: &[f64], out: &mut [f64]) {
        for (j, m) in self.market.models().iter().enumerate() {
            let v = self.kappa_m[j] + self.margin[j] * self.expenditure_of_model(data, m.data.clone());
            out[m.buyers.clone()].fill(v);
        }
    }

    pub(crate) fn quote_data_into(&self, buyer: &[f64], out: &mut [f64]) {
        for m in self.market.models() {
            let w = self.revenue_of_model(buyer, m.buyers.clone());
            for e in m.data.clone() {
                out[e] = self.kappa_d[e] + self.data_coef[e] * w;
            }
        }
    }

    /// Quotation for a single buyer edge given the current state.
    pub(crate) fn buyer_quote_at(&self, edge: usize, data: &[f64]) -> f64 {
        let j = self.market.buyer_edges()[edge].model;
        let m = &self.market.models()[j];
        self.kappa_m[j] + self.margin[j] * self.expenditure_of_model(data, m.data.clone())
    }

    /// Quotation for a single data edge given the current state.
    pub(crate) fn data_quote_at(&self, edge: usize, buyer: &[f64]) -> f64 {
        let j = self.market.data_edges()[edge].model;
        let m = &self.market.models()[j];
        self.kappa_d[edge] + self.data_coef[edge] * self.revenue_of_model(buyer, m.buyers.clone())
    }

    /// `Q(p)`: both quotation blocks evaluated on the same state.
    pub fn apply(&self, prices: &PriceVector) -> Result<PriceVector> {
        prices.check_shape(self.market)?;
        let mut out = PriceVector::zeros(self.market);
        self.apply_into(prices, &mut out);
        Ok(out)
    }

    pub(crate) fn apply_into(&self, prices: &PriceVector, out: &mut PriceVector) {
        self.quote_buyers_into(&prices.data, &mut out.buyer);
        self.quote_data_into(&prices.buyer, &mut out.data);
    }

    /// `Q(0)`: the offset vector.
    pub fn offsets(&self) -> PriceVector {
        let mut buyer = vec![0.0; self.market.buyer_edges().len()];
        for (j, m) in self.market.models().iter().enumerate() {
            buyer[m.buyers.clone()].fill(self.kappa_m[j]);
        }
        PriceVector {
            buyer,
            data: self.kappa_d.clone(),
        }
    }

    /// Normalized fixed-point residual `||Q(p) - p||_2 / sqrt(d)`.
    pub fn residual(&self, prices: &PriceVector) -> Result<f64> {
        let q = self.apply(prices)?;
        Ok(normalized_distance(&q, prices))
    }

    fn check_buyer(&self, buyer: &[f64]) -> Result<()> {
        if buyer.len() != self.market.buyer_edges().len() {
            return Err(self.shape_error(buyer.len(), self.market.data_edges().len()));
        }
        Ok(())
    }

    fn check_data(&self, data: &[f64]) -> Result<()> {
        if data.len() != self.market.data_edges().len() {
            return Err(self.shape_error(self.market.buyer_edges().len(), data.len()));
        }
        Ok(())
    }

    fn shape_error(&self, found_buyer: usize, found_data: usize) -> Error {
        Error::Shape {
            expected_buyer: self.market.buyer_edges().len(),
            expected_data: self.market.data_edges().len(),
            found_buyer,
            found_data,
        }
    }
}

/// `||a - b||_2 / sqrt(d)`.
pub fn normalized_distance(a: &PriceVector, b: &PriceVector) -> f64 {
    let d = a.dim();
    if d == 0 {
        return 0.0;
    }
    let sq: f64 = a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum();
    sq.sqrt() / (d as f64).sqrt()
}

/// Convenience wrapper building a one-off operator.
pub fn joint_operator(market: &Market, prices: &PriceVector, params: QuotationParams) -> Result<PriceVector> {
    QuotationOperator::new(market, params)?.apply(prices)
}

pub fn residual(market: &Market, prices: &PriceVector, params: QuotationParams) -> Result<f64> {
    QuotationOperator::new(market, params)?.residual(prices)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market::testing::{e1, e2, market};

    const P_D_E1: f64 = 0.2 + 0.6 * 5.55 / 1.1;

    fn op(m: &Market) -> QuotationOperator<'_> {
        QuotationOperator::new(m, QuotationParams::default()).unwrap()
    }

    #[test]
    fn effective_revenue_examples() {
        let m1 = market(e1());
        let w = op(&m1).effective_revenue(&PriceVector { buyer: vec![5.55], data: vec![0.0] }).unwrap();
        assert!((w[0] - 3.33).abs() < 1e-12);
        let w = op(&m1).effective_revenue(&PriceVector::zeros(&m1)).unwrap();
        assert_eq!(w, vec![0.0]);

        let m2 = market(e2());
        let w = op(&m2)
            .effective_revenue(&PriceVector { buyer: vec![3.5, 3.5], data: vec![0.0, 0.0] })
            .unwrap();
        assert!((w[0] - 2.1).abs() < 1e-12);
    }

    #[test]
    fn buyer_quotes() {
        let m = market(e1());
        assert_eq!(op(&m).quote_buyers(&[0.0]).unwrap(), vec![2.0]);
        let v = op(&m).quote_buyers(&[P_D_E1]).unwrap();
        assert!((v[0] - 5.55).abs() < 1e-12);
        let fee = QuotationOperator::new(&m, QuotationParams { grossing: 2.0, ..Default::default() }).unwrap();
        assert_eq!(fee.quote_buyers(&[0.0]).unwrap(), vec![4.0]);

        let m2 = market(e2());
        let v = op(&m2).quote_buyers(&[1.0, 2.0]).unwrap();
        assert_eq!(v, vec![4.0, 4.0]);
    }

    #[test]
    fn data_quotes() {
        let m = market(e1());
        assert_eq!(op(&m).quote_data(&[0.0]).unwrap(), vec![0.2]);
        let v = op(&m).quote_data(&[5.55]).unwrap();
        assert!((v[0] - P_D_E1).abs() < 1e-12);
        assert!((v[0] - 3.227_272_727_272_727).abs() < 1e-12);

        let m2 = market(e2());
        let v = op(&m2).quote_data(&[3.5, 3.5]).unwrap();
        assert!((v[0] - 0.94).abs() < 1e-12);
        assert!((v[1] - 1.56).abs() < 1e-12);
    }

    #[test]
    fn operator_at_zero_is_the_offset_vector() {
        let m = market(e2());
        let params = QuotationParams { grossing: 1.5, ..Default::default() };
        let o = QuotationOperator::new(&m, params).unwrap();
        let q = o.apply(&PriceVector::zeros(&m)).unwrap();
        assert_eq!(q, o.offsets());
        assert_eq!(q.buyer, vec![1.5, 1.5]);
        assert!((q.data[0] - 0.15).abs() < 1e-15 && (q.data[1] - 0.45).abs() < 1e-15);
    }

    #[test]
    fn e1_fixed_point_is_stationary() {
        let m = market(e1());
        let p = PriceVector { buyer: vec![5.55], data: vec![P_D_E1] };
        let q = op(&m).apply(&p).unwrap();
        assert!(q.max_abs_diff(&p) <= 1e-12);
        assert!(op(&m).residual(&p).unwrap() <= 1e-12);
    }

    #[test]
    fn scalability_identity_on_e1() {
        let m = market(e1());
        let o = op(&m);
        let p = PriceVector { buyer: vec![5.0], data: vec![3.0] };
        let beta = 2.0;
        let lhs = o.apply(&p).unwrap().scaled(beta);
        let rhs = o.apply(&p.scaled(beta)).unwrap();
        let off = o.offsets();
        for ((l, r), k) in lhs.iter().zip(rhs.iter()).zip(off.iter()) {
            assert!((l - r - (beta - 1.0) * k).abs() < 1e-12);
            assert!(l - r > 0.0);
        }
    }

    #[test]
    fn residual_examples() {
        let m = market(e1());
        let o = op(&m);
        let r0 = o.residual(&PriceVector::zeros(&m)).unwrap();
        assert!((r0 - (2.0f64.powi(2) + 0.2f64.powi(2)).sqrt() / 2f64.sqrt()).abs() < 1e-15);

        let p = PriceVector { buyer: vec![5.0], data: vec![3.0] };
        let vb = 2.0 + 1.1 * 3.0;
        let vd = 0.2 + 0.6 * 5.0 / 1.1;
        let expected = ((vb - 5.0f64).powi(2) + (vd - 3.0f64).powi(2)).sqrt() / 2f64.sqrt();
        assert!((o.residual(&p).unwrap() - expected).abs() < 1e-15);
        assert!((vb - 5.3).abs() < 1e-12 && (vd - 2.927_272_727_272_727).abs() < 1e-12);
    }

    #[test]
    fn params_are_validated() {
        let m = market(e1());
        for bad in [
            QuotationParams { grossing: 0.9, ..Default::default() },
            QuotationParams { alpha_kappa_d: 0.0, ..Default::default() },
            QuotationParams { alpha_kappa_m: -1.0, ..Default::default() },
            QuotationParams { alpha_delta: -0.5, ..Default::default() },
        ] {
            assert!(QuotationOperator::new(&m, bad).is_err());
        }
        assert!(QuotationOperator::new(&m, QuotationParams::with_scalings(1.0, 1.0, 0.0)).is_ok());
        assert!(QuotationParams::with_fee(1.0).is_err());
        assert!((QuotationParams::with_fee(0.5).unwrap().grossing - 2.0).abs() < 1e-15);
    }

    #[test]
    fn mismatched_prices_are_rejected() {
        let m = market(e2());
        assert!(op(&m).quote_data(&[1.0]).is_err());
        assert!(op(&m).quote_buyers(&[1.0]).is_err());
        assert!(op(&m).apply(&PriceVector { buyer: vec![], data: vec![] }).is_err());
    }
}
