//! Expected end-of-period equity and debt of a bank whose external assets
//! follow a lognormal law, their prices (discounted at the risk-free rate
//! under the physical measure) and funding-cost attractiveness margins.
//!
//! Book-valued external assets sit next to claims priced off the same assets'
//! future returns. That asymmetry is kept as is.

use crate::domain::{Estimate, Institution};
use crate::objective::{ControlVector, CounterpartySnapshot, ObjectiveError, OwnTerms, Scenarios, Utility};
use crate::returns::{norm_cdf, LogNormal};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExpectedClaims {
    pub equity: f64,
    pub debt: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClaimPrices {
    pub market_equity: f64,
    pub market_debt: f64,
    pub expected_equity: f64,
    pub expected_debt: f64,
    pub scaling: f64,
}

/// E[K] and E[L] at the end of the period for a bank holding `scaling·Ax`
/// lognormal assets plus `scaling·Aℓ` cash, owing L*(1 + r_D).
///
/// Cash is folded into an effective strike `L*(1+r_D) − κAℓ(1+r_rf)`; with
/// no cash this is the textbook lognormal call/put split.
pub fn expected_claims(inst: &Institution, law: LogNormal, scaling: f64, risk_free: f64) -> ExpectedClaims {
    let due = inst.debt_due();
    let cash_value = scaling * inst.cash * (1.0 + risk_free);
    let risky = scaling * inst.external_assets;
    let strike = due - cash_value;
    if strike <= 0.0 {
        return ExpectedClaims { equity: risky * law.mean_gross() - strike, debt: due };
    }
    if risky <= 0.0 {
        return ExpectedClaims { equity: 0.0, debt: cash_value };
    }
    let LogNormal { log_mean: mu, log_vol: sigma } = law;
    if sigma == 0.0 {
        let asset = risky * mu.exp();
        return ExpectedClaims { equity: (asset - strike).max(0.0), debt: cash_value + asset.min(strike) };
    }
    let forward = risky * law.mean_gross();
    let u = ((strike / risky).ln() - mu) / sigma;
    // 1 − Φ(x) taken as Φ(−x) to avoid cancellation in the tails.
    let equity = forward * norm_cdf(sigma - u) - strike * norm_cdf(-u);
    let debt = forward * norm_cdf(u - sigma) + strike * norm_cdf(-u) + cash_value;
    ExpectedClaims { equity: equity.max(0.0), debt }
}

pub fn market_values(inst: &Institution, law: LogNormal, scaling: f64, risk_free: f64) -> ClaimPrices {
    let e = expected_claims(inst, law, scaling, risk_free);
    let discount = 1.0 + risk_free;
    ClaimPrices {
        market_equity: e.equity / discount,
        market_debt: e.debt / discount,
        expected_equity: e.equity,
        expected_debt: e.debt,
        scaling,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Attractiveness {
    pub attractive: bool,
    /// Expected payoff minus the funding cost of buying the claim.
    pub margin: f64,
}

/// Whether buying the issuer's equity beats the holder's funding cost
/// r_D(ω) when the holder is risk neutral.
pub fn share_attractive_rn(holder: &Institution, issuer: &ClaimPrices) -> Attractiveness {
    let margin = issuer.expected_equity - (1.0 + holder.debt_rate) * issuer.market_equity;
    Attractiveness { attractive: margin > 0.0, margin }
}

pub fn debt_attractive_rn(holder: &Institution, issuer: &ClaimPrices) -> Attractiveness {
    let margin = issuer.expected_debt - (1.0 + holder.debt_rate) * issuer.market_debt;
    Attractiveness { attractive: margin > 0.0, margin }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MarginalValue {
    pub gradient: Estimate,
    /// Positive gradient while the holding already sits at its cap.
    pub capped: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradientMargins {
    pub share: MarginalValue,
    pub debt: MarginalValue,
}

/// Monte-Carlo derivative of expected utility with respect to the holding of
/// counterparty `party`'s equity and debt at the candidate point `ctrl`.
///
/// Raising a holding by one unit adds its payoff and costs its price times
/// (1 + r_D), debt being adjusted through the budget identity.
pub fn attractiveness_general(
    ctrl: &ControlVector,
    snap: &CounterpartySnapshot,
    own: &OwnTerms,
    scen: &Scenarios,
    party: usize,
    caps: (f64, f64),
    utility: Utility,
) -> Result<GradientMargins, ObjectiveError> {
    let c = &snap.parties[party];
    let funding = 1.0 + own.funding.rate(ctrl.maturity);
    let cash_value = ctrl.cash * (1.0 + own.risk_free);
    let debt_cost = funding * ctrl.implied_debt(own, snap);
    let n = scen.len();
    let mut share = Vec::with_capacity(n);
    let mut debt = Vec::with_capacity(n);
    for k in 0..n {
        let p = scen.position(k, ctrl, cash_value, debt_cost);
        let (u, du, _) = utility.eval(p);
        if !u.is_finite() || !du.is_finite() {
            return Err(ObjectiveError::NonFinite { draw: k, value: u });
        }
        share.push(du * (scen.equity[party][k] - funding * c.equity_price));
        debt.push(du * (scen.debt[party][k] - funding * c.debt_price));
    }
    let mark = |values: &[f64], held: f64, cap: f64| {
        let gradient = Estimate::from_sample(values);
        MarginalValue { gradient, capped: gradient.mean > 0.0 && held >= cap - 1e-12 }
    };
    Ok(GradientMargins {
        share: mark(&share, ctrl.shares[party], caps.0),
        debt: mark(&debt, ctrl.debts[party], caps.1),
    })
}
