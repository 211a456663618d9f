//! Shared data types: balance sheets, holding networks, regulation, return laws
//! and clearing outcomes.
//!
//! A [`Network`] owns the cross-holding matrices. [`Institution`] values handed
//! out by [`Network::institution`] are read-only views whose holding rows are
//! copied out of those matrices, so the two can never disagree.

use serde::{Deserialize, Serialize};
use std::fmt;

/// One bank's balance sheet at a date. Rows of holdings are views of the
/// owning network's matrices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Institution {
    pub id: usize,
    pub external_assets: f64,
    pub cash: f64,
    pub nominal_debt: f64,
    pub equity_book: f64,
    pub maturity: f64,
    pub debt_rate: f64,
    pub shares_held: Vec<f64>,
    pub debt_held: Vec<f64>,
}

impl Institution {
    /// Contractual debt repayable at the end of the period.
    pub fn debt_due(&self) -> f64 {
        self.nominal_debt * (1.0 + self.debt_rate)
    }
}

/// Balance-sheet entries of a bank that are not cross-holdings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceSheet {
    pub external_assets: f64,
    #[serde(default)]
    pub cash: f64,
    pub nominal_debt: f64,
    pub equity_book: f64,
    #[serde(default)]
    pub maturity: f64,
    #[serde(default)]
    pub debt_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub banks: Vec<BalanceSheet>,
    /// Row i, column j: fraction of bank j's equity held by bank i.
    pub share_matrix: Vec<Vec<f64>>,
    /// Row i, column j: fraction of bank j's debt held by bank i.
    pub debt_matrix: Vec<Vec<f64>>,
    #[serde(default)]
    pub risk_free_rate: f64,
}

/// A single broken network invariant.
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    Shape { what: &'static str, expected: usize, found: usize },
    NegativeBalance { bank: usize, field: &'static str, value: f64 },
    MaturityOutOfRange { bank: usize, value: f64 },
    HoldingOutOfRange { matrix: HoldingKind, row: usize, col: usize, value: f64 },
    SelfHolding { matrix: HoldingKind, bank: usize, value: f64 },
    ColumnSum { matrix: HoldingKind, col: usize, sum: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HoldingKind {
    Shares,
    Debt,
}

impl fmt::Display for HoldingKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            HoldingKind::Shares => write!(f, "share"),
            HoldingKind::Debt => write!(f, "debt"),
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Shape { what, expected, found } => {
                write!(f, "{what}: expected length {expected}, found {found}")
            }
            Violation::NegativeBalance { bank, field, value } => {
                write!(f, "bank {}: {field} = {value} is negative", bank + 1)
            }
            Violation::MaturityOutOfRange { bank, value } => {
                write!(f, "bank {}: maturity {value} outside [0,1]", bank + 1)
            }
            Violation::HoldingOutOfRange { matrix, row, col, value } => write!(
                f,
                "{matrix} holding ({}, {}) = {value} outside [0,1]",
                row + 1,
                col + 1
            ),
            Violation::SelfHolding { matrix, bank, value } => {
                write!(f, "bank {}: self {matrix} holding {value} must be 0", bank + 1)
            }
            Violation::ColumnSum { matrix, col, sum } => {
                let tag = match matrix {
                    HoldingKind::Shares => "(A3')",
                    HoldingKind::Debt => "(A2')",
                };
                write!(f, "{tag} {matrix} column {} sum {sum} >= 1", col + 1)
            }
        }
    }
}

impl Network {
    /// Network without any cross-holdings.
    pub fn autarkic(banks: Vec<BalanceSheet>, risk_free_rate: f64) -> Self {
        let n = banks.len();
        Network {
            banks,
            share_matrix: vec![vec![0.0; n]; n],
            debt_matrix: vec![vec![0.0; n]; n],
            risk_free_rate,
        }
    }

    pub fn len(&self) -> usize {
        self.banks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.banks.is_empty()
    }

    pub fn institution(&self, i: usize) -> Institution {
        let b = &self.banks[i];
        Institution {
            id: i,
            external_assets: b.external_assets,
            cash: b.cash,
            nominal_debt: b.nominal_debt,
            equity_book: b.equity_book,
            maturity: b.maturity,
            debt_rate: b.debt_rate,
            shares_held: self.share_matrix[i].clone(),
            debt_held: self.debt_matrix[i].clone(),
        }
    }

    pub fn institutions(&self) -> Vec<Institution> {
        (0..self.len()).map(|i| self.institution(i)).collect()
    }

    /// Adds a bank with no holdings and held by nobody.
    pub fn with_bank(&self, bank: BalanceSheet) -> Network {
        let mut out = self.clone();
        for row in out.share_matrix.iter_mut().chain(out.debt_matrix.iter_mut()) {
            row.push(0.0);
        }
        let n = out.banks.len() + 1;
        out.share_matrix.push(vec![0.0; n]);
        out.debt_matrix.push(vec![0.0; n]);
        out.banks.push(bank);
        out
    }
}

/// Lists every broken network invariant. An empty result means the network
/// admits a unique liquidation equilibrium.
pub fn validate_network(net: &Network) -> Vec<Violation> {
    let n = net.banks.len();
    let mut out = Vec::new();
    for (i, b) in net.banks.iter().enumerate() {
        for (field, value) in [
            ("external_assets", b.external_assets),
            ("cash", b.cash),
            ("nominal_debt", b.nominal_debt),
            ("equity_book", b.equity_book),
            ("debt_rate", b.debt_rate),
        ] {
            if !(value >= 0.0) {
                out.push(Violation::NegativeBalance { bank: i, field, value });
            }
        }
        if !(0.0..=1.0).contains(&b.maturity) {
            out.push(Violation::MaturityOutOfRange { bank: i, value: b.maturity });
        }
    }
    for (kind, m) in [(HoldingKind::Shares, &net.share_matrix), (HoldingKind::Debt, &net.debt_matrix)] {
        let what = match kind {
            HoldingKind::Shares => "share_matrix",
            HoldingKind::Debt => "debt_matrix",
        };
        if m.len() != n {
            out.push(Violation::Shape { what, expected: n, found: m.len() });
            continue;
        }
        if let Some(row) = m.iter().find(|r| r.len() != n) {
            out.push(Violation::Shape { what, expected: n, found: row.len() });
            continue;
        }
        for (i, row) in m.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                if !(0.0..=1.0).contains(&v) {
                    out.push(Violation::HoldingOutOfRange { matrix: kind, row: i, col: j, value: v });
                }
            }
            if row[i] != 0.0 {
                out.push(Violation::SelfHolding { matrix: kind, bank: i, value: row[i] });
            }
        }
        for j in 0..n {
            let sum: f64 = m.iter().map(|r| r[j]).sum();
            if !(sum < 1.0) {
                out.push(Violation::ColumnSum { matrix: kind, col: j, sum });
            }
        }
    }
    out
}

/// Capital and liquidity regulation applied to every bank.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegulatoryPolicy {
    /// k^A per institution.
    pub weight_external: Vec<f64>,
    pub weight_shares: f64,
    pub weight_debt: f64,
    pub weight_liquidity: f64,
    /// Tradable fraction of each institution's equity.
    pub float_cap_shares: Vec<f64>,
    /// Tradable fraction of each institution's debt.
    pub float_cap_debt: Vec<f64>,
    pub large_exposure_limit: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PolicyError {
    #[error("{field}: weight {value} outside (0,1)")]
    Weight { field: String, value: f64 },
    #[error("{field}: cap {value} outside [0,1]")]
    Cap { field: String, value: f64 },
    #[error("large_exposure_limit {0} outside (0,1]")]
    Limit(f64),
    #[error("{field}: expected {expected} entries, found {found}")]
    Length { field: &'static str, expected: usize, found: usize },
}

impl RegulatoryPolicy {
    /// Same weights for all `n` banks, fully floating equity and debt.
    pub fn uniform(n: usize, external: f64, shares: f64, debt: f64, liquidity: f64) -> Self {
        RegulatoryPolicy {
            weight_external: vec![external; n],
            weight_shares: shares,
            weight_debt: debt,
            weight_liquidity: liquidity,
            float_cap_shares: vec![1.0; n],
            float_cap_debt: vec![1.0; n],
            large_exposure_limit: None,
        }
    }

    pub fn validate(&self, n: usize) -> Result<(), PolicyError> {
        let unit_open = |field: String, v: f64| {
            if v > 0.0 && v < 1.0 {
                Ok(())
            } else {
                Err(PolicyError::Weight { field, value: v })
            }
        };
        for (field, v) in [("weight_external", &self.weight_external), ("float_cap_shares", &self.float_cap_shares), ("float_cap_debt", &self.float_cap_debt)] {
            if v.len() != n {
                return Err(PolicyError::Length { field, expected: n, found: v.len() });
            }
        }
        for (i, &k) in self.weight_external.iter().enumerate() {
            unit_open(format!("weight_external[{i}]"), k)?;
        }
        unit_open("weight_shares".into(), self.weight_shares)?;
        unit_open("weight_debt".into(), self.weight_debt)?;
        unit_open("weight_liquidity".into(), self.weight_liquidity)?;
        for (name, caps) in [("float_cap_shares", &self.float_cap_shares), ("float_cap_debt", &self.float_cap_debt)] {
            for (i, &c) in caps.iter().enumerate() {
                if !(0.0..=1.0).contains(&c) {
                    return Err(PolicyError::Cap { field: format!("{name}[{i}]"), value: c });
                }
            }
        }
        if let Some(l) = self.large_exposure_limit {
            if !(l > 0.0 && l <= 1.0) {
                return Err(PolicyError::Limit(l));
            }
        }
        Ok(())
    }
}

/// Multivariate lognormal law of gross returns on external assets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReturnModel {
    pub log_mean: Vec<f64>,
    pub log_vol: Vec<f64>,
    /// Row-major correlation matrix.
    pub correlation: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ModelError {
    #[error("return model dimensions disagree: {0}")]
    Shape(String),
    #[error("log volatility of asset {index} is {value}, must be > 0")]
    Volatility { index: usize, value: f64 },
    #[error("correlation ({row}, {col}) = {value} is invalid")]
    Correlation { row: usize, col: usize, value: f64 },
    #[error("correlation matrix is not positive semi-definite (pivot {pivot} = {value})")]
    NotPsd { pivot: usize, value: f64 },
}

impl ReturnModel {
    pub fn new(log_mean: Vec<f64>, log_vol: Vec<f64>, correlation: Vec<Vec<f64>>) -> Result<Self, ModelError> {
        let m = ReturnModel { log_mean, log_vol, correlation };
        m.check_shape()?;
        for (i, &s) in m.log_vol.iter().enumerate() {
            if !(s > 0.0 && s.is_finite()) {
                return Err(ModelError::Volatility { index: i, value: s });
            }
        }
        m.correlation_factor()?;
        Ok(m)
    }

    /// Zero-volatility law, for tests of deterministic limits only.
    #[doc(hidden)]
    pub fn degenerate(log_mean: Vec<f64>) -> Self {
        let n = log_mean.len();
        let correlation = (0..n).map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect();
        ReturnModel { log_mean, log_vol: vec![0.0; n], correlation }
    }

    /// Two assets with the same marginal law and correlation `rho`.
    pub fn symmetric_pair(mu: f64, sigma: f64, rho: f64) -> Result<Self, ModelError> {
        ReturnModel::new(vec![mu; 2], vec![sigma; 2], vec![vec![1.0, rho], vec![rho, 1.0]])
    }

    pub fn dim(&self) -> usize {
        self.log_mean.len()
    }

    fn check_shape(&self) -> Result<(), ModelError> {
        let n = self.log_mean.len();
        if self.log_vol.len() != n || self.correlation.len() != n || self.correlation.iter().any(|r| r.len() != n) {
            return Err(ModelError::Shape(format!(
                "{} means, {} vols, {} correlation rows",
                n,
                self.log_vol.len(),
                self.correlation.len()
            )));
        }
        Ok(())
    }

    /// Lower-triangular factor C with C·Cᵀ equal to the correlation matrix.
    /// Semi-definite matrices are accepted: a zero pivot zeroes its column.
    pub fn correlation_factor(&self) -> Result<Vec<Vec<f64>>, ModelError> {
        self.check_shape()?;
        let n = self.dim();
        let r = &self.correlation;
        for i in 0..n {
            for j in 0..n {
                let v = r[i][j];
                let bad = if i == j { v != 1.0 } else { !(v.abs() <= 1.0) || v != r[j][i] };
                if bad {
                    return Err(ModelError::Correlation { row: i, col: j, value: v });
                }
            }
        }
        const PIVOT_TOL: f64 = 1e-12;
        let mut c = vec![vec![0.0; n]; n];
        for j in 0..n {
            let d = r[j][j] - (0..j).map(|k| c[j][k] * c[j][k]).sum::<f64>();
            if d < -PIVOT_TOL {
                return Err(ModelError::NotPsd { pivot: j, value: d });
            }
            let diag = d.max(0.0).sqrt();
            c[j][j] = diag;
            for i in j + 1..n {
                let s = r[i][j] - (0..j).map(|k| c[i][k] * c[j][k]).sum::<f64>();
                if diag > PIVOT_TOL.sqrt() {
                    c[i][j] = s / diag;
                } else if s.abs() > 1e-9 {
                    return Err(ModelError::NotPsd { pivot: j, value: d });
                }
            }
        }
        Ok(c)
    }
}

/// Funding-rate curve r_D(ω) = α − β·e^ω.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct YieldCurveSpec {
    pub alpha: f64,
    pub beta: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Solvency {
    Solvent,
    Default,
}

impl Solvency {
    pub fn sign(self) -> i8 {
        match self {
            Solvency::Solvent => 1,
            Solvency::Default => -1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SolverMethod {
    Heuristic,
    BruteForce,
    FixedPoint,
}

impl fmt::Display for SolverMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SolverMethod::Heuristic => "heuristic",
            SolverMethod::BruteForce => "brute-force",
            SolverMethod::FixedPoint => "fixed-point",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClearingResult {
    pub equity: Vec<f64>,
    pub debt_value: Vec<f64>,
    pub regime: Vec<Solvency>,
    pub method: SolverMethod,
    /// Regimes (or iterations, for the fixed point) examined before success.
    pub work: usize,
}

/// Monte-Carlo mean with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub std_error: f64,
}

impl Estimate {
    /// Mean and standard error of the mean of a sample, by Welford's
    /// recurrence (a constant sample has exactly that mean).
    pub fn from_sample(values: &[f64]) -> Estimate {
        let n = values.len();
        if n == 0 {
            return Estimate { mean: f64::NAN, std_error: f64::NAN };
        }
        let mut mean = 0.0;
        let mut m2 = 0.0;
        for (k, &v) in values.iter().enumerate() {
            let delta = v - mean;
            mean += delta / (k + 1) as f64;
            m2 += delta * (v - mean);
        }
        if n == 1 {
            return Estimate { mean, std_error: 0.0 };
        }
        let var = m2 / (n - 1) as f64;
        Estimate { mean, std_error: (var / n as f64).sqrt() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bank(ax: f64, l: f64) -> BalanceSheet {
        BalanceSheet { external_assets: ax, cash: 0.0, nominal_debt: l, equity_book: ax - l, maturity: 0.0, debt_rate: 0.0 }
    }

    #[test]
    fn unlinked_pair_is_valid() {
        let net = Network::autarkic(vec![bank(10.0, 9.0), bank(10.0, 9.0)], 0.0);
        assert!(validate_network(&net).is_empty());
    }

    #[test]
    fn full_column_is_rejected() {
        let mut net = Network::autarkic(vec![bank(10.0, 9.0), bank(10.0, 9.0)], 0.0);
        net.share_matrix[1][0] = 1.0;
        let v = validate_network(&net);
        assert!(v.iter().any(|v| matches!(v, Violation::ColumnSum { matrix: HoldingKind::Shares, col: 0, .. })));
        assert!(v[0].to_string().contains("(A3')"));
    }

    #[test]
    fn typical_holdings_are_valid() {
        let mut net = Network::autarkic(vec![bank(14.0, 13.0), bank(14.0, 13.0)], 0.0);
        net.share_matrix = vec![vec![0.0, 0.45], vec![0.45, 0.0]];
        assert!(validate_network(&net).is_empty());
    }

    #[test]
    fn self_holdings_are_rejected() {
        let mut net = Network::autarkic(vec![bank(1.0, 0.5)], 0.0);
        net.debt_matrix[0][0] = 0.1;
        assert!(matches!(validate_network(&net)[0], Violation::SelfHolding { .. }));
    }

    #[test]
    fn institution_rows_come_from_matrices() {
        let mut net = Network::autarkic(vec![bank(1.0, 0.5), bank(2.0, 1.0)], 0.0);
        net.share_matrix[0][1] = 0.3;
        net.debt_matrix[1][0] = 0.2;
        assert_eq!(net.institution(0).shares_held, vec![0.0, 0.3]);
        assert_eq!(net.institution(1).debt_held, vec![0.2, 0.0]);
    }

    #[test]
    fn semidefinite_correlation_factors() {
        let m = ReturnModel::symmetric_pair(0.0, 0.1, 1.0).unwrap();
        let c = m.correlation_factor().unwrap();
        assert_eq!(c[1][0], 1.0);
        assert_eq!(c[1][1], 0.0);
        let bad = ReturnModel::new(
            vec![0.0; 3],
            vec![0.1; 3],
            vec![vec![1.0, 0.9, -0.9], vec![0.9, 1.0, 0.9], vec![-0.9, 0.9, 1.0]],
        );
        assert!(matches!(bad, Err(ModelError::NotPsd { .. })));
    }

    #[test]
    fn policy_validation() {
        let mut p = RegulatoryPolicy::uniform(2, 0.06, 0.232, 0.016, 0.1);
        assert!(p.validate(2).is_ok());
        p.weight_shares = 1.0;
        assert!(p.validate(2).is_err());
        p.weight_shares = 0.2;
        p.large_exposure_limit = Some(0.0);
        assert!(p.validate(2).is_err());
    }
}
