//! Welfare of a formed network: end-of-period external assets net of the
//! deposit-insurance cost of creditor shortfalls, relative to initial lending.

use rayon::prelude::*;

use crate::clearing::{clear_heuristic, ClearingError, ClearingProblem};
use crate::domain::{validate_network, Estimate, Network, ReturnModel, Solvency};
use crate::returns::{sample_gross_returns, BLOCK_ROWS};

/// Which banks' realized external assets count towards welfare.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum WelfareVariant {
    /// Every bank's realized external assets count.
    #[default]
    Formula,
    /// Only solvent banks' realized external assets count.
    SolventOnly,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WelfareReport {
    /// Expected contribution of each bank, currency units.
    pub contributions: Vec<Estimate>,
    /// Expected total contribution.
    pub total: Estimate,
    /// Total contribution over initial external assets.
    pub welfare: Estimate,
    pub deposit_cost: f64,
    /// Fraction of draws in which at least one bank defaults.
    pub default_frequency: f64,
    pub draws_used: usize,
    pub seed: u64,
    pub variant: WelfareVariant,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum WelfareError {
    #[error("network is invalid: {0}")]
    Network(String),
    #[error("deposit cost {0} outside [0, 0.6]")]
    DepositCost(f64),
    #[error("initial external assets sum to zero; welfare ratio undefined")]
    NoLending,
    #[error("return model has {found} assets for {expected} banks")]
    Dimension { expected: usize, found: usize },
    #[error("sampling failed: {0}")]
    Sampling(String),
    #[error("clearing failed on draw {draw}: {source}")]
    Clearing { draw: usize, source: ClearingError },
}

/// Per-bank contributions for one realization of gross external returns.
///
/// Returns the contributions and whether any bank defaulted.
pub fn draw_contributions(
    net: &Network,
    gross: &[f64],
    deposit_cost: f64,
    variant: WelfareVariant,
) -> Result<(Vec<f64>, bool), ClearingError> {
    let realized: Vec<f64> = net.banks.iter().zip(gross).map(|(b, g)| b.external_assets * g).collect();
    let problem = ClearingProblem::from_network(net, &realized)?;
    let cleared = clear_heuristic(&problem)?;
    let mut any_default = false;
    let w = (0..net.len())
        .map(|i| {
            let solvent = cleared.regime[i] == Solvency::Solvent;
            any_default |= !solvent;
            let shortfall = (problem.due[i] - cleared.debt_value[i]).max(0.0);
            let counted = match variant {
                WelfareVariant::Formula => realized[i],
                WelfareVariant::SolventOnly if solvent => realized[i],
                WelfareVariant::SolventOnly => 0.0,
            };
            counted - deposit_cost * shortfall
        })
        .collect();
    Ok((w, any_default))
}

pub fn evaluate_welfare(
    net: &Network,
    model: &ReturnModel,
    deposit_cost: f64,
    n_draws: usize,
    seed: u64,
    variant: WelfareVariant,
) -> Result<WelfareReport, WelfareError> {
    let violations = validate_network(net);
    if !violations.is_empty() {
        let msg = violations.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; ");
        return Err(WelfareError::Network(msg));
    }
    if !(0.0..=0.6).contains(&deposit_cost) {
        return Err(WelfareError::DepositCost(deposit_cost));
    }
    if model.dim() != net.len() {
        return Err(WelfareError::Dimension { expected: net.len(), found: model.dim() });
    }
    let lending: f64 = net.banks.iter().map(|b| b.external_assets).sum();
    if lending <= 0.0 {
        return Err(WelfareError::NoLending);
    }
    let draws = sample_gross_returns(model, n_draws, seed).map_err(|e| WelfareError::Sampling(e.to_string()))?;
    let n = net.len();
    let starts: Vec<usize> = (0..n_draws).step_by(BLOCK_ROWS).collect();
    let chunks: Vec<Result<Vec<(Vec<f64>, bool)>, WelfareError>> = starts
        .par_iter()
        .map(|&start| {
            (start..(start + BLOCK_ROWS).min(n_draws))
                .map(|k| {
                    draw_contributions(net, &draws.row(k), deposit_cost, variant)
                        .map_err(|source| WelfareError::Clearing { draw: k, source })
                })
                .collect()
        })
        .collect();
    let mut per_bank = vec![Vec::with_capacity(n_draws); n];
    let mut totals = Vec::with_capacity(n_draws);
    let mut defaults = 0usize;
    for chunk in chunks {
        for (w, any_default) in chunk? {
            totals.push(w.iter().sum::<f64>());
            for (col, v) in per_bank.iter_mut().zip(w) {
                col.push(v);
            }
            defaults += usize::from(any_default);
        }
    }
    let ratios: Vec<f64> = totals.iter().map(|t| t / lending).collect();
    Ok(WelfareReport {
        contributions: per_bank.iter().map(|c| Estimate::from_sample(c)).collect(),
        total: Estimate::from_sample(&totals),
        welfare: Estimate::from_sample(&ratios),
        deposit_cost,
        default_frequency: if n_draws > 0 { defaults as f64 / n_draws as f64 } else { 0.0 },
        draws_used: n_draws,
        seed,
        variant,
    })
}
