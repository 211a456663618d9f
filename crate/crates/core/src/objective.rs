//! End-of-period position of a bank, the softplus equity approximation, the
//! log utility applied to it, and Monte-Carlo expected utility over a fixed
//! draw matrix.
//!
//! Debt is never a free variable: the budget identity
//! `L = Ax + Aℓ + Σπ𝒦 + Σγℒ − K` gives it from the other controls.

use crate::domain::{Estimate, YieldCurveSpec};
use crate::returns::DrawMatrix;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ObjectiveError {
    #[error("non-finite utility {value} at draw {draw}")]
    NonFinite { draw: usize, value: f64 },
    #[error("yield curve: {0}")]
    Curve(String),
    #[error("draw matrix has {found} columns, bank index {needed} requested")]
    Columns { needed: usize, found: usize },
}

/// How the funding rate depends on the maturity control.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FundingRate {
    Fixed(f64),
    Curve(YieldCurveSpec),
}

impl FundingRate {
    pub fn rate(&self, maturity: f64) -> f64 {
        match self {
            FundingRate::Fixed(r) => *r,
            FundingRate::Curve(c) => yield_curve(maturity, c),
        }
    }

    /// First and second derivatives in the maturity control.
    pub fn slope(&self, maturity: f64) -> (f64, f64) {
        match self {
            FundingRate::Fixed(_) => (0.0, 0.0),
            FundingRate::Curve(c) => {
                let d = -c.beta * maturity.exp();
                (d, d)
            }
        }
    }
}

pub fn yield_curve(maturity: f64, spec: &YieldCurveSpec) -> f64 {
    spec.alpha - spec.beta * maturity.exp()
}

impl YieldCurveSpec {
    /// The curve must stay above the risk-free rate on [0,1] and have a
    /// nonzero slope.
    pub fn validate(&self, risk_free: f64) -> Result<(), ObjectiveError> {
        if !(self.beta > 0.0) {
            return Err(ObjectiveError::Curve(format!("beta = {} must be > 0", self.beta)));
        }
        // Decreasing in ω, so the minimum sits at ω = 1.
        let low = yield_curve(1.0, self);
        if !(low > risk_free) {
            return Err(ObjectiveError::Curve(format!(
                "r_D(1) = {low} does not exceed the risk-free rate {risk_free}"
            )));
        }
        Ok(())
    }
}

/// Required cash floor k^L·e^ω·e^L.
pub fn liquidity_requirement(maturity: f64, debt: f64, weight_liquidity: f64) -> f64 {
    weight_liquidity * maturity.exp() * debt.exp()
}

/// What another bank looks like from the optimizing bank's point of view.
#[derive(Debug, Clone, PartialEq)]
pub struct Counterparty {
    /// Column of this bank's returns in the draw matrix.
    pub bank: usize,
    pub scaling: f64,
    pub external_assets: f64,
    pub cash: f64,
    pub nominal_debt: f64,
    pub debt_rate: f64,
    pub equity_price: f64,
    pub debt_price: f64,
}

impl Counterparty {
    fn asset_value(&self, gross: f64, risk_free: f64) -> f64 {
        self.scaling * (self.external_assets * gross + self.cash * (1.0 + risk_free))
    }

    fn debt_due(&self) -> f64 {
        self.nominal_debt * (1.0 + self.debt_rate)
    }

    /// Equity payoff for one realization of this bank's gross return.
    pub fn equity_payoff(&self, gross: f64, risk_free: f64) -> f64 {
        (self.asset_value(gross, risk_free) - self.debt_due()).max(0.0)
    }

    pub fn debt_payoff(&self, gross: f64, risk_free: f64) -> f64 {
        self.asset_value(gross, risk_free).min(self.debt_due())
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CounterpartySnapshot {
    pub parties: Vec<Counterparty>,
}

/// Fixed parameters of the optimizing bank.
#[derive(Debug, Clone, PartialEq)]
pub struct OwnTerms {
    /// Column of this bank's returns in the draw matrix.
    pub bank: usize,
    pub equity: f64,
    pub funding: FundingRate,
    pub risk_free: f64,
}

/// Candidate asset side. `shares[k]` and `debts[k]` refer to
/// `snapshot.parties[k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlVector {
    pub external_assets: f64,
    pub cash: f64,
    pub maturity: f64,
    pub shares: Vec<f64>,
    pub debts: Vec<f64>,
}

impl ControlVector {
    pub fn autarkic(external_assets: f64, parties: usize) -> Self {
        ControlVector { external_assets, cash: 0.0, maturity: 0.0, shares: vec![0.0; parties], debts: vec![0.0; parties] }
    }

    /// Market value of cross-holdings at t=0.
    pub fn interbank_assets(&self, snap: &CounterpartySnapshot) -> f64 {
        snap.parties
            .iter()
            .enumerate()
            .map(|(k, c)| self.shares[k] * c.equity_price + self.debts[k] * c.debt_price)
            .sum()
    }

    pub fn total_assets(&self, snap: &CounterpartySnapshot) -> f64 {
        self.external_assets + self.cash + self.interbank_assets(snap)
    }

    /// Debt implied by the budget identity.
    pub fn implied_debt(&self, own: &OwnTerms, snap: &CounterpartySnapshot) -> f64 {
        self.total_assets(snap) - own.equity
    }

    /// Interbank assets over total assets.
    pub fn interbank_share(&self, snap: &CounterpartySnapshot) -> f64 {
        let total = self.total_assets(snap);
        if total > 0.0 {
            self.interbank_assets(snap) / total
        } else {
            0.0
        }
    }
}

/// End-of-period position before limited liability. `gross` holds one draw
/// of every bank's gross return, indexed by bank.
pub fn position(ctrl: &ControlVector, snap: &CounterpartySnapshot, own: &OwnTerms, gross: &[f64]) -> f64 {
    let rf = own.risk_free;
    let mut p = ctrl.external_assets * gross[own.bank] + ctrl.cash * (1.0 + rf);
    for (k, c) in snap.parties.iter().enumerate() {
        let g = gross[c.bank];
        p += ctrl.shares[k] * c.equity_payoff(g, rf) + ctrl.debts[k] * c.debt_payoff(g, rf);
    }
    p - (1.0 + own.funding.rate(ctrl.maturity)) * ctrl.implied_debt(own, snap)
}

/// Overflow-safe log(1 + e^P).
pub fn softplus_equity(p: f64) -> f64 {
    p.max(0.0) + (-p.abs()).exp().ln_1p()
}

/// log(softplus(P)).
pub fn utility_chain(p: f64) -> f64 {
    if p < -700.0 {
        // softplus(P) = e^P to working precision.
        p
    } else {
        softplus_equity(p).ln()
    }
}

/// Composite utility applied to the position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Utility {
    /// log of the softplus equity approximation.
    #[default]
    LogSoftplus,
    /// The position itself (risk neutrality, no limited liability).
    Linear,
}

impl Utility {
    pub fn value(self, p: f64) -> f64 {
        match self {
            Utility::LogSoftplus => utility_chain(p),
            Utility::Linear => p,
        }
    }

    /// Value, first and second derivative.
    pub fn eval(self, p: f64) -> (f64, f64, f64) {
        match self {
            Utility::Linear => (p, 1.0, 0.0),
            Utility::LogSoftplus => {
                if p < -700.0 {
                    return (p, 1.0, 0.0);
                }
                let e = (-p.abs()).exp();
                let s = p.max(0.0) + e.ln_1p();
                let sig = if p >= 0.0 { 1.0 / (1.0 + e) } else { e / (1.0 + e) };
                let r = sig / s;
                (s.ln(), r, r * (1.0 - sig - r))
            }
        }
    }
}

/// Per-draw payoffs that do not depend on the controls, so the position is
/// affine in (Ax, Aℓ, π, γ) once they are tabulated.
#[derive(Debug, Clone)]
pub struct Scenarios {
    pub own_gross: Vec<f64>,
    pub equity: Vec<Vec<f64>>,
    pub debt: Vec<Vec<f64>>,
}

impl Scenarios {
    pub fn new(draws: &DrawMatrix, snap: &CounterpartySnapshot, own: &OwnTerms) -> Result<Self, ObjectiveError> {
        let needed = snap.parties.iter().map(|c| c.bank).chain([own.bank]).max().unwrap_or(0);
        if needed >= draws.cols() {
            return Err(ObjectiveError::Columns { needed, found: draws.cols() });
        }
        let rf = own.risk_free;
        let equity = snap
            .parties
            .iter()
            .map(|c| draws.column(c.bank).iter().map(|&g| c.equity_payoff(g, rf)).collect())
            .collect();
        let debt = snap
            .parties
            .iter()
            .map(|c| draws.column(c.bank).iter().map(|&g| c.debt_payoff(g, rf)).collect())
            .collect();
        Ok(Scenarios { own_gross: draws.column(own.bank).to_vec(), equity, debt })
    }

    pub fn len(&self) -> usize {
        self.own_gross.len()
    }

    pub fn is_empty(&self) -> bool {
        self.own_gross.is_empty()
    }

    /// Position in draw `k`; `debt_cost` is (1 + r_D)·L.
    #[inline]
    pub fn position(&self, k: usize, ctrl: &ControlVector, cash_value: f64, debt_cost: f64) -> f64 {
        let mut p = ctrl.external_assets * self.own_gross[k] + cash_value;
        for j in 0..self.equity.len() {
            p += ctrl.shares[j] * self.equity[j][k] + ctrl.debts[j] * self.debt[j][k];
        }
        p - debt_cost
    }

    pub fn expected_utility(
        &self,
        ctrl: &ControlVector,
        snap: &CounterpartySnapshot,
        own: &OwnTerms,
        utility: Utility,
    ) -> Result<Estimate, ObjectiveError> {
        let cash_value = ctrl.cash * (1.0 + own.risk_free);
        let debt_cost = (1.0 + own.funding.rate(ctrl.maturity)) * ctrl.implied_debt(own, snap);
        let mut values = Vec::with_capacity(self.len());
        for k in 0..self.len() {
            let u = utility.value(self.position(k, ctrl, cash_value, debt_cost));
            if !u.is_finite() {
                return Err(ObjectiveError::NonFinite { draw: k, value: u });
            }
            values.push(u);
        }
        Ok(Estimate::from_sample(&values))
    }
}

/// Monte-Carlo expected utility of the position over a fixed draw matrix.
pub fn expected_utility(
    ctrl: &ControlVector,
    snap: &CounterpartySnapshot,
    own: &OwnTerms,
    draws: &DrawMatrix,
    utility: Utility,
) -> Result<Estimate, ObjectiveError> {
    Scenarios::new(draws, snap, own)?.expected_utility(ctrl, snap, own, utility)
}

/// Equity under exact limited liability, for diagnostics.
pub fn limited_liability_equity(p: f64) -> f64 {
    p.max(0.0)
}
