//! Liquidation equilibrium of a network at the end of the period.
//!
//! Equity and debt values solve
//! `K = max(ΠK + ΓL + A − L*, 0)` and `L = min(ΠK + ΓL + A, L*)`.
//! Within a solvency regime the system is linear, so the solvers either pick
//! regimes and solve, or iterate the map directly.

use crate::domain::{ClearingResult, Network, Solvency, SolverMethod};
use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ClearingError {
    #[error("no consistent regime; closest was {best:?} with violation {violation}")]
    NoConsistentRegime { best: Vec<Solvency>, violation: f64 },
    #[error("fixed point did not converge in {iterations} iterations (last change {last_change})")]
    NoConvergence { iterations: usize, last_change: f64 },
    #[error("realized asset vector has length {found}, network has {expected} banks")]
    Shape { expected: usize, found: usize },
}

/// Clearing inputs: holdings, realized asset values and debt due.
#[derive(Debug, Clone, PartialEq)]
pub struct ClearingProblem {
    pub shares: Vec<Vec<f64>>,
    pub debts: Vec<Vec<f64>>,
    /// External assets plus cash at the end of the period.
    pub assets: Vec<f64>,
    /// Nominal debt grown at each bank's funding rate.
    pub due: Vec<f64>,
}

impl ClearingProblem {
    /// End-of-period problem for a network whose external assets are worth
    /// `realized_external` (currency units, not returns).
    pub fn from_network(net: &Network, realized_external: &[f64]) -> Result<Self, ClearingError> {
        if realized_external.len() != net.len() {
            return Err(ClearingError::Shape { expected: net.len(), found: realized_external.len() });
        }
        let rf = net.risk_free_rate;
        Ok(ClearingProblem {
            shares: net.share_matrix.clone(),
            debts: net.debt_matrix.clone(),
            assets: net.banks.iter().zip(realized_external).map(|(b, &x)| x + b.cash * (1.0 + rf)).collect(),
            due: net.banks.iter().map(|b| b.nominal_debt * (1.0 + b.debt_rate)).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.assets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assets.is_empty()
    }

    fn scale(&self) -> f64 {
        let total: f64 = self.assets.iter().chain(&self.due).sum();
        total.max(1.0)
    }

    /// Value of everything bank i owns at the given (K, L).
    fn gross_claims(&self, i: usize, equity: &[f64], debt: &[f64]) -> f64 {
        let mut v = self.assets[i];
        for j in 0..self.len() {
            v += self.shares[i][j] * equity[j] + self.debts[i][j] * debt[j];
        }
        v
    }

    /// One application of the clearing map.
    pub fn map(&self, equity: &[f64], debt: &[f64]) -> (Vec<f64>, Vec<f64>) {
        (0..self.len())
            .map(|i| {
                let v = self.gross_claims(i, equity, debt);
                ((v - self.due[i]).max(0.0), v.min(self.due[i]))
            })
            .unzip()
    }

    /// Largest violation of the equilibrium equations.
    pub fn residual(&self, equity: &[f64], debt: &[f64]) -> f64 {
        let (k, l) = self.map(equity, debt);
        (0..self.len())
            .map(|i| (k[i] - equity[i]).abs().max((l[i] - debt[i]).abs()))
            .fold(0.0, f64::max)
    }

    /// Solves the linear system of one regime. Unknown per bank is its equity
    /// when solvent and its debt value when in default.
    fn solve_regime(&self, regime: &[Solvency]) -> Option<(Vec<f64>, Vec<f64>)> {
        let n = self.len();
        let mut m = DMatrix::<f64>::identity(n, n);
        let mut rhs = DVector::<f64>::zeros(n);
        for i in 0..n {
            let mut b = self.assets[i];
            if regime[i] == Solvency::Solvent {
                b -= self.due[i];
            }
            for j in 0..n {
                match regime[j] {
                    Solvency::Solvent => {
                        m[(i, j)] -= self.shares[i][j];
                        b += self.debts[i][j] * self.due[j];
                    }
                    Solvency::Default => m[(i, j)] -= self.debts[i][j],
                }
            }
            rhs[i] = b;
        }
        let y = m.lu().solve(&rhs)?;
        let mut equity = vec![0.0; n];
        let mut debt = self.due.clone();
        for i in 0..n {
            match regime[i] {
                Solvency::Solvent => equity[i] = y[i],
                Solvency::Default => debt[i] = y[i],
            }
        }
        Some((equity, debt))
    }

    /// Sign violation of a regime's solution; zero when consistent.
    fn inconsistency(&self, regime: &[Solvency], equity: &[f64], debt: &[f64]) -> f64 {
        (0..self.len())
            .map(|i| match regime[i] {
                Solvency::Solvent => (-equity[i]).max(0.0),
                Solvency::Default => (debt[i] - self.due[i]).max(0.0).max(-debt[i]),
            })
            .fold(0.0, f64::max)
    }

    /// Tries one regime. On success returns values with ties at zero equity
    /// reclassified as default.
    fn attempt(&self, regime: &[Solvency]) -> Result<(Vec<f64>, Vec<f64>, Vec<Solvency>), f64> {
        let Some((mut equity, mut debt)) = self.solve_regime(regime) else {
            return Err(f64::INFINITY);
        };
        let eps = 1e-12 * self.scale();
        let bad = self.inconsistency(regime, &equity, &debt);
        if bad > eps || equity.iter().chain(&debt).any(|v| !v.is_finite()) {
            return Err(bad);
        }
        let mut out = regime.to_vec();
        for i in 0..self.len() {
            match regime[i] {
                Solvency::Solvent if equity[i] <= eps => {
                    equity[i] = 0.0;
                    out[i] = Solvency::Default;
                }
                Solvency::Solvent => {}
                Solvency::Default => {
                    debt[i] = debt[i].clamp(0.0, self.due[i]);
                }
            }
        }
        if self.residual(&equity, &debt) > 1e-9 * self.scale() {
            return Err(bad.max(eps));
        }
        Ok((equity, debt, out))
    }
}

fn regime_from_bits(n: usize, bits: u64) -> Vec<Solvency> {
    (0..n).map(|i| if bits >> i & 1 == 1 { Solvency::Default } else { Solvency::Solvent }).collect()
}

/// Every regime whose linear solution is sign-consistent.
pub fn consistent_regimes(p: &ClearingProblem) -> Vec<ClearingResult> {
    let n = p.len();
    (0..1u64 << n)
        .filter_map(|bits| {
            let regime = regime_from_bits(n, bits);
            p.attempt(&regime).ok().map(|(equity, debt_value, regime)| ClearingResult {
                equity,
                debt_value,
                regime,
                method: SolverMethod::BruteForce,
                work: bits as usize + 1,
            })
        })
        .collect()
}

/// Enumerates all 2^n regimes in binary order and returns the first
/// consistent one.
pub fn clear_bruteforce(p: &ClearingProblem) -> Result<ClearingResult, ClearingError> {
    let n = p.len();
    let mut best = (f64::INFINITY, regime_from_bits(n, 0));
    for bits in 0..1u64 << n {
        let regime = regime_from_bits(n, bits);
        match p.attempt(&regime) {
            Ok((equity, debt_value, regime)) => {
                return Ok(ClearingResult {
                    equity,
                    debt_value,
                    regime,
                    method: SolverMethod::BruteForce,
                    work: bits as usize + 1,
                })
            }
            Err(v) if v < best.0 => best = (v, regime),
            Err(_) => {}
        }
    }
    Err(ClearingError::NoConsistentRegime { best: best.1, violation: best.0 })
}

/// Solvency margins (A − L*)/L*; banks owing nothing get +∞.
pub fn regime_weights(p: &ClearingProblem) -> Vec<f64> {
    (0..p.len())
        .map(|i| if p.due[i] > 0.0 { (p.assets[i] - p.due[i]) / p.due[i] } else { f64::INFINITY })
        .collect()
}

/// Largest number of undetermined banks for which candidate regimes are
/// listed explicitly.
const MAX_FREE_BANKS: usize = 20;

/// Candidate regimes in the order the heuristic tests them: descending score
/// w·d, then fewer defaults, then lexicographic d (default before solvent).
/// Banks with positive weight are never put in default.
pub fn heuristic_order(p: &ClearingProblem) -> Option<Vec<Vec<Solvency>>> {
    let w = regime_weights(p);
    let free: Vec<usize> = (0..p.len()).filter(|&i| w[i] <= 0.0).collect();
    if free.len() > MAX_FREE_BANKS {
        return None;
    }
    let mut cands: Vec<(f64, usize, Vec<Solvency>)> = (0..1u64 << free.len())
        .map(|bits| {
            let mut d = vec![Solvency::Solvent; p.len()];
            for (k, &i) in free.iter().enumerate() {
                if bits >> k & 1 == 0 {
                    d[i] = Solvency::Default;
                }
            }
            let score: f64 = free.iter().map(|&i| w[i] * d[i].sign() as f64).sum();
            let defaults = d.iter().filter(|&&s| s == Solvency::Default).count();
            (score, defaults, d)
        })
        .collect();
    cands.sort_by(|a, b| {
        b.0.total_cmp(&a.0)
            .then(a.1.cmp(&b.1))
            .then_with(|| a.2.iter().map(|s| s.sign()).cmp(b.2.iter().map(|s| s.sign())))
    });
    Some(cands.into_iter().map(|c| c.2).collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeuristicOptions {
    /// Stop the regime search after this many regimes.
    pub max_regimes: Option<usize>,
    pub fallback_max_iter: usize,
    pub fallback_tol: f64,
}

impl Default for HeuristicOptions {
    fn default() -> Self {
        HeuristicOptions { max_regimes: None, fallback_max_iter: 1_000_000, fallback_tol: 1e-13 }
    }
}

/// Score-ordered regime search. Falls back to the fixed-point iteration when
/// no tested regime is consistent.
pub fn clear_heuristic(p: &ClearingProblem) -> Result<ClearingResult, ClearingError> {
    clear_heuristic_with(p, HeuristicOptions::default())
}

pub fn clear_heuristic_with(p: &ClearingProblem, opts: HeuristicOptions) -> Result<ClearingResult, ClearingError> {
    if let Some(order) = heuristic_order(p) {
        let limit = opts.max_regimes.unwrap_or(usize::MAX);
        for (k, regime) in order.iter().enumerate().take(limit) {
            if let Ok((equity, debt_value, regime)) = p.attempt(regime) {
                return Ok(ClearingResult { equity, debt_value, regime, method: SolverMethod::Heuristic, work: k + 1 });
            }
        }
    }
    clear_fixed_point(p, opts.fallback_max_iter, opts.fallback_tol)
}

/// Picard iteration of the clearing map, started with every bank paying its
/// debt in full. `tol` is relative to the problem's size.
pub fn clear_fixed_point(p: &ClearingProblem, max_iter: usize, tol: f64) -> Result<ClearingResult, ClearingError> {
    let n = p.len();
    let mut debt = p.due.clone();
    let mut equity: Vec<f64> = (0..n).map(|i| (p.assets[i] - p.due[i]).max(0.0)).collect();
    let limit = tol * p.scale();
    let mut change = f64::INFINITY;
    for iter in 0..=max_iter {
        let (k, l) = p.map(&equity, &debt);
        change = (0..n).map(|i| (k[i] - equity[i]).abs().max((l[i] - debt[i]).abs())).fold(0.0, f64::max);
        if change < limit {
            let regime = equity.iter().map(|&v| if v > 0.0 { Solvency::Solvent } else { Solvency::Default }).collect();
            return Ok(ClearingResult { equity, debt_value: debt, regime, method: SolverMethod::FixedPoint, work: iter });
        }
        equity = k;
        debt = l;
    }
    Err(ClearingError::NoConvergence { iterations: max_iter, last_change: change })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn problem(shares: Vec<Vec<f64>>, debts: Vec<Vec<f64>>, assets: Vec<f64>, due: Vec<f64>) -> ClearingProblem {
        ClearingProblem { shares, debts, assets, due }
    }

    #[test]
    fn unlinked_banks_get_merton_payoffs() {
        let z = vec![vec![0.0; 3]; 3];
        let p = problem(z.clone(), z, vec![10.0, 5.0, 7.0], vec![9.0, 6.0, 7.0]);
        for r in [clear_bruteforce(&p).unwrap(), clear_heuristic(&p).unwrap(), clear_fixed_point(&p, 100, 1e-14).unwrap()] {
            assert_eq!(r.equity, vec![1.0, 0.0, 0.0]);
            assert_eq!(r.debt_value, vec![9.0, 5.0, 7.0]);
            assert_eq!(r.regime, vec![Solvency::Solvent, Solvency::Default, Solvency::Default]);
        }
        assert_eq!(clear_fixed_point(&p, 100, 1e-14).unwrap().work, 1);
    }

    #[test]
    fn all_positive_weights_take_one_solve() {
        let p = problem(
            vec![vec![0.0, 0.2], vec![0.3, 0.0]],
            vec![vec![0.0, 0.1], vec![0.1, 0.0]],
            vec![10.0, 12.0],
            vec![9.0, 11.0],
        );
        let r = clear_heuristic(&p).unwrap();
        assert_eq!(r.work, 1);
        assert_eq!(r.regime, vec![Solvency::Solvent; 2]);
        assert!(p.residual(&r.equity, &r.debt_value) < 1e-12);
    }

    #[test]
    fn cross_holding_rescues_a_bank() {
        // Bank 2 is short on its own but holds half of bank 1's equity.
        let p = problem(vec![vec![0.0, 0.0], vec![0.5, 0.0]], vec![vec![0.0; 2]; 2], vec![20.0, 8.0], vec![10.0, 9.0]);
        let r = clear_bruteforce(&p).unwrap();
        assert_eq!(r.regime, vec![Solvency::Solvent, Solvency::Solvent]);
        assert!((r.equity[1] - 4.0).abs() < 1e-12);
        let h = clear_heuristic(&p).unwrap();
        assert_eq!(h.regime, r.regime);
        assert!(h.work > 1);
    }

    #[test]
    fn zero_equity_tie_is_default() {
        let z = vec![vec![0.0; 1]; 1];
        let p = problem(z.clone(), z, vec![9.0], vec![9.0]);
        let r = clear_bruteforce(&p).unwrap();
        assert_eq!(r.regime, vec![Solvency::Default]);
        assert_eq!((r.equity[0], r.debt_value[0]), (0.0, 9.0));
        assert_eq!(clear_heuristic(&p).unwrap().regime, vec![Solvency::Default]);
    }

    #[test]
    fn order_starts_at_sign_regime_and_skips_positive_weights() {
        let p = problem(vec![vec![0.0; 3]; 3], vec![vec![0.0; 3]; 3], vec![5.0, 12.0, 8.0], vec![10.0, 10.0, 10.0]);
        let order = heuristic_order(&p).unwrap();
        assert_eq!(order.len(), 4);
        assert_eq!(order[0], vec![Solvency::Default, Solvency::Solvent, Solvency::Default]);
        assert!(order.iter().all(|d| d[1] == Solvency::Solvent));
        // Flipping bank 3 (weight −0.2) costs less score than bank 1 (−0.5).
        assert_eq!(order[1], vec![Solvency::Default, Solvency::Solvent, Solvency::Solvent]);
    }
}
