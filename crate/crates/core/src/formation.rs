//! Iterated best responses: banks take turns re-optimizing their balance
//! sheets against the latest published balance sheets of the others until no
//! control moves by more than a relative tolerance over a full round.

use crate::domain::{validate_network, BalanceSheet, Estimate, Institution, Network, ReturnModel};
use crate::objective::{ControlVector, Counterparty, CounterpartySnapshot, FundingRate, OwnTerms, Scenarios};
use crate::optimizer::{optimize_scenarios, OptimizeError, OptimizeSpec};
use crate::pricing::{market_values, ClaimPrices};
use crate::returns::{sample_gross_returns, LogNormal};

/// How a counterparty's external assets are inflated to stand in for its
/// unobserved interbank assets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ScalingMode {
    #[default]
    Unit,
    /// κ = (L + K)/(Ax + Aℓ) from the published balance sheet.
    BalanceSheet,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BankSetup {
    pub equity: f64,
    pub funding: FundingRate,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FormationConfig {
    pub banks: Vec<BankSetup>,
    pub model: ReturnModel,
    pub risk_free: f64,
    /// Optimizer settings shared by every step; its seed also drives the
    /// common draw matrix.
    pub spec: OptimizeSpec,
    pub max_rounds: usize,
    pub conv_tol: f64,
    pub scaling: ScalingMode,
    /// Bank indices in playing order.
    pub order: Vec<usize>,
    /// Debt holdings below this are set to zero in the returned network.
    pub debt_floor: f64,
}

impl FormationConfig {
    pub fn new(banks: Vec<BankSetup>, model: ReturnModel, spec: OptimizeSpec) -> Self {
        let order = (0..banks.len()).collect();
        FormationConfig {
            banks,
            model,
            risk_free: 0.0,
            spec,
            max_rounds: 20,
            conv_tol: 0.01,
            scaling: ScalingMode::Unit,
            order,
            debt_floor: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum FormationError {
    #[error("step {step} (bank {bank}): {source}")]
    Step { step: usize, bank: usize, source: OptimizeError },
    #[error("invalid formation setup: {0}")]
    Setup(String),
}

/// One bank's published balance sheet; rows cover all banks.
#[derive(Debug, Clone, PartialEq)]
pub struct Published {
    pub external_assets: f64,
    pub cash: f64,
    pub maturity: f64,
    pub shares: Vec<f64>,
    pub debts: Vec<f64>,
    pub debt: f64,
}

impl Published {
    fn flat(&self) -> Vec<f64> {
        let mut v = vec![self.external_assets, self.cash, self.maturity, self.debt];
        v.extend(&self.shares);
        v.extend(&self.debts);
        v
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuotedPrice {
    pub bank: usize,
    pub scaling: f64,
    pub equity_price: f64,
    pub debt_price: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub round: usize,
    pub bank: usize,
    pub sheet: Published,
    pub expected_utility: Estimate,
    pub quotes: Vec<QuotedPrice>,
    pub solvency_binds: bool,
    pub optimizer_converged: bool,
    /// Newton iterations of the slowest start.
    pub iterations: usize,
    /// Largest relative change against this bank's previous step.
    pub change: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FormationResult {
    pub network: Network,
    pub trajectory: Vec<StepRecord>,
    pub converged: bool,
    pub rounds: usize,
    /// Largest relative control change in each round from the second on.
    pub round_changes: Vec<f64>,
    /// Largest budget-identity error at final prices.
    pub consistency_residual: f64,
    pub prices: Vec<ClaimPrices>,
}

/// Relative change with an absolute floor for controls at zero.
pub fn relative_change(old: &[f64], new: &[f64]) -> f64 {
    old.iter().zip(new).map(|(o, n)| (n - o).abs() / o.abs().max(1e-8)).fold(0.0, f64::max)
}

fn law(model: &ReturnModel, i: usize) -> LogNormal {
    LogNormal { log_mean: model.log_mean[i], log_vol: model.log_vol[i] }
}

fn issuer_view(i: usize, setup: &BankSetup, p: &Published) -> Institution {
    Institution {
        id: i,
        external_assets: p.external_assets,
        cash: p.cash,
        nominal_debt: p.debt,
        equity_book: setup.equity,
        maturity: p.maturity,
        debt_rate: setup.funding.rate(p.maturity),
        shares_held: p.shares.clone(),
        debt_held: p.debts.clone(),
    }
}

fn scaling(mode: ScalingMode, setup: &BankSetup, p: &Published) -> f64 {
    match mode {
        ScalingMode::Unit => 1.0,
        ScalingMode::BalanceSheet => {
            let base = p.external_assets + p.cash;
            if base > 0.0 {
                ((p.debt + setup.equity) / base).max(1.0)
            } else {
                1.0
            }
        }
    }
}

pub fn form_network(cfg: &FormationConfig) -> Result<FormationResult, FormationError> {
    let n = cfg.banks.len();
    if n == 0 || cfg.model.dim() != n {
        return Err(FormationError::Setup(format!("{n} banks but a {}-asset return model", cfg.model.dim())));
    }
    let mut order_check = cfg.order.clone();
    order_check.sort_unstable();
    if order_check != (0..n).collect::<Vec<_>>() {
        return Err(FormationError::Setup("order must be a permutation of the banks".into()));
    }
    let draws = sample_gross_returns(&cfg.model, cfg.spec.draw_count, cfg.spec.seed)
        .map_err(|e| FormationError::Setup(e.to_string()))?;
    let rf = cfg.risk_free;
    let mut sheets: Vec<Option<Published>> = vec![None; n];
    let mut trajectory = Vec::new();
    let mut round_changes = Vec::new();
    let mut converged = false;
    let mut rounds = 0;
    let mut step = 0;
    for round in 1..=cfg.max_rounds.max(1) {
        rounds = round;
        let mut worst: f64 = 0.0;
        for &i in &cfg.order {
            step += 1;
            let mut quotes = Vec::new();
            let mut parties = Vec::new();
            for j in (0..n).filter(|&j| j != i) {
                let Some(p) = &sheets[j] else { continue };
                let setup = &cfg.banks[j];
                let kappa = scaling(cfg.scaling, setup, p);
                let issuer = issuer_view(j, setup, p);
                let price = market_values(&issuer, law(&cfg.model, j), kappa, rf);
                quotes.push(QuotedPrice { bank: j, scaling: kappa, equity_price: price.market_equity, debt_price: price.market_debt });
                parties.push(Counterparty {
                    bank: j,
                    scaling: kappa,
                    external_assets: p.external_assets,
                    cash: p.cash,
                    nominal_debt: p.debt,
                    debt_rate: issuer.debt_rate,
                    equity_price: price.market_equity,
                    debt_price: price.market_debt,
                });
            }
            let snap = CounterpartySnapshot { parties };
            let own = OwnTerms { bank: i, equity: cfg.banks[i].equity, funding: cfg.banks[i].funding, risk_free: rf };
            let mut spec = cfg.spec.clone();
            if snap.parties.is_empty() {
                spec.active.shares = false;
                spec.active.debts = false;
            }
            let fail = |source| FormationError::Step { step, bank: i, source };
            let scen = Scenarios::new(&draws, &snap, &own).map_err(|e| fail(e.into()))?;
            let res = optimize_scenarios(&spec, &own, &snap, &scen).map_err(fail)?;
            let mut shares = vec![0.0; n];
            let mut debts = vec![0.0; n];
            for (k, c) in snap.parties.iter().enumerate() {
                shares[c.bank] = res.control.shares[k];
                debts[c.bank] = res.control.debts[k];
            }
            let sheet = Published {
                external_assets: res.control.external_assets,
                cash: res.control.cash,
                maturity: res.control.maturity,
                shares,
                debts,
                debt: res.implied_debt,
            };
            let change = sheets[i].as_ref().map(|old| relative_change(&old.flat(), &sheet.flat()));
            if round > 1 {
                worst = worst.max(change.unwrap_or(f64::INFINITY));
            }
            trajectory.push(StepRecord {
                step,
                round,
                bank: i,
                sheet: sheet.clone(),
                expected_utility: res.expected_utility,
                quotes,
                solvency_binds: res.diagnostics.solvency_binds(),
                optimizer_converged: res.diagnostics.converged,
                iterations: res.diagnostics.starts.iter().map(|s| s.iterations).max().unwrap_or(0),
                change,
            });
            sheets[i] = Some(sheet);
        }
        if round > 1 {
            round_changes.push(worst);
            if worst < cfg.conv_tol {
                converged = true;
                break;
            }
        }
    }
    let sheets: Vec<Published> = sheets.into_iter().map(|s| s.expect("every bank played")).collect();
    let banks: Vec<BalanceSheet> = sheets
        .iter()
        .zip(&cfg.banks)
        .map(|(p, b)| BalanceSheet {
            external_assets: p.external_assets,
            cash: p.cash,
            nominal_debt: p.debt,
            equity_book: b.equity,
            maturity: p.maturity,
            debt_rate: b.funding.rate(p.maturity),
        })
        .collect();
    let network = Network {
        banks,
        share_matrix: sheets.iter().map(|p| p.shares.clone()).collect(),
        debt_matrix: sheets
            .iter()
            .map(|p| p.debts.iter().map(|&g| if g < cfg.debt_floor { 0.0 } else { g }).collect())
            .collect(),
        risk_free_rate: rf,
    };
    let violations = validate_network(&network);
    if !violations.is_empty() {
        let msg = violations.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; ");
        return Err(FormationError::Setup(format!("formed network is invalid: {msg}")));
    }
    let prices: Vec<ClaimPrices> = (0..n)
        .map(|j| {
            let kappa = scaling(cfg.scaling, &cfg.banks[j], &sheets[j]);
            market_values(&issuer_view(j, &cfg.banks[j], &sheets[j]), law(&cfg.model, j), kappa, rf)
        })
        .collect();
    let consistency_residual = (0..n)
        .map(|i| {
            let b = &network.banks[i];
            let interbank: f64 = (0..n)
                .map(|j| network.share_matrix[i][j] * prices[j].market_equity + network.debt_matrix[i][j] * prices[j].market_debt)
                .sum();
            (b.external_assets + b.cash + interbank - b.nominal_debt - b.equity_book).abs()
        })
        .fold(0.0, f64::max);
    Ok(FormationResult { network, trajectory, converged, rounds, round_changes, consistency_residual, prices })
}

/// Interbank assets over total assets of bank `i` at the given prices.
pub fn interbank_ratio(net: &Network, prices: &[ClaimPrices], i: usize) -> f64 {
    let b = &net.banks[i];
    let inter: f64 = (0..net.len())
        .map(|j| net.share_matrix[i][j] * prices[j].market_equity + net.debt_matrix[i][j] * prices[j].market_debt)
        .sum();
    let total = b.external_assets + b.cash + inter;
    if total > 0.0 {
        inter / total
    } else {
        0.0
    }
}

/// The control vector bank `i` holds in a formed network, against all others.
pub fn control_of(net: &Network, i: usize) -> ControlVector {
    let b = &net.banks[i];
    let others: Vec<usize> = (0..net.len()).filter(|&j| j != i).collect();
    ControlVector {
        external_assets: b.external_assets,
        cash: b.cash,
        maturity: b.maturity,
        shares: others.iter().map(|&j| net.share_matrix[i][j]).collect(),
        debts: others.iter().map(|&j| net.debt_matrix[i][j]).collect(),
    }
}
