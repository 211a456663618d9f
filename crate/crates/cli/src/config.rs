//! Experiment configuration file.

use serde::Deserialize;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    #[serde(default)]
    pub simulation: Simulation,
    pub returns: Returns,
    pub banks: Banks,
    #[serde(default)]
    pub policy: Policy,
    #[serde(default)]
    pub welfare: WelfareSection,
    pub clear: Option<ClearSection>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Controls {
    /// External assets and interbank holdings; cash and maturity fixed.
    #[default]
    Reduced,
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Scaling {
    #[default]
    Unit,
    BalanceSheet,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum UtilityChoice {
    #[default]
    LogSoftplus,
    Linear,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Simulation {
    pub seed: u64,
    pub draws: usize,
    pub multi_start: usize,
    pub tol_obj: f64,
    pub max_iterations: usize,
    pub max_rounds: usize,
    pub conv_tol: f64,
    pub scaling: Scaling,
    pub utility: UtilityChoice,
    pub controls: Controls,
    pub liquidity_constraint: bool,
    pub fixed_cash: f64,
    pub fixed_maturity: f64,
    /// Playing order of the formation game; defaults to 0, 1, …
    pub order: Option<Vec<usize>>,
}

impl Default for Simulation {
    fn default() -> Self {
        Simulation {
            seed: 0,
            draws: 100_000,
            multi_start: 8,
            tol_obj: 1e-7,
            max_iterations: 5_000,
            max_rounds: 20,
            conv_tol: 0.01,
            scaling: Scaling::Unit,
            utility: UtilityChoice::LogSoftplus,
            controls: Controls::Reduced,
            liquidity_constraint: false,
            fixed_cash: 0.0,
            fixed_maturity: 0.0,
            order: None,
        }
    }
}

fn default_mean() -> f64 {
    0.01
}

fn default_pd() -> f64 {
    0.001
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Returns {
    #[serde(default = "default_mean")]
    pub mean_net_return: f64,
    #[serde(default = "default_pd")]
    pub prob_default: f64,
    pub leverage_ratio: f64,
    /// Pairwise correlation of all banks' returns; one grid axis.
    pub correlations: Vec<f64>,
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Curve {
    pub alpha: f64,
    pub beta: f64,
}

fn default_count() -> usize {
    2
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Banks {
    #[serde(default = "default_count")]
    pub count: usize,
    #[serde(default = "one")]
    pub equity: f64,
    #[serde(default)]
    pub debt_rate: f64,
    #[serde(default)]
    pub risk_free_rate: f64,
    /// Funding rate α − β·e^ω instead of the fixed `debt_rate`.
    pub yield_curve: Option<Curve>,
    /// Fixed counterparty of the single-bank experiment.
    pub counterparty: Option<CounterpartySection>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CounterpartySection {
    pub external_assets: f64,
    #[serde(default)]
    pub cash: f64,
    pub nominal_debt: f64,
    #[serde(default)]
    pub debt_rate: f64,
    #[serde(default = "one")]
    pub scaling: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Policy {
    pub weight_liquidity: f64,
    pub float_cap_shares: f64,
    pub float_cap_debt: f64,
    pub large_exposure_limit: Option<f64>,
    pub grid: Grid,
}

impl Default for Policy {
    fn default() -> Self {
        Policy {
            weight_liquidity: 0.1,
            float_cap_shares: 1.0,
            float_cap_debt: 1.0,
            large_exposure_limit: None,
            grid: Grid::default(),
        }
    }
}

/// Weight sets, zipped position by position.
#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct Grid {
    pub weight_external: Vec<f64>,
    pub weight_shares: Vec<f64>,
    pub weight_debt: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    #[default]
    Formula,
    SolventOnly,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WelfareSection {
    pub deposit_costs: Vec<f64>,
    pub variant: Variant,
    /// Draws for welfare evaluation; defaults to the simulation draws.
    pub draws: Option<usize>,
}

impl Default for WelfareSection {
    fn default() -> Self {
        WelfareSection { deposit_costs: vec![0.0], variant: Variant::Formula, draws: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ClearMethod {
    #[default]
    Heuristic,
    BruteForce,
    FixedPoint,
}

fn default_samples() -> usize {
    10
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClearSection {
    pub external_assets: Vec<f64>,
    #[serde(default)]
    pub cash: Vec<f64>,
    pub nominal_debt: Vec<f64>,
    #[serde(default)]
    pub debt_rate: Vec<f64>,
    pub shares: Vec<Vec<f64>>,
    pub debts: Vec<Vec<f64>>,
    /// Gross external returns, one row per scenario. Sampled when absent.
    pub shocks: Option<Vec<Vec<f64>>>,
    #[serde(default = "default_samples")]
    pub samples: usize,
    #[serde(default)]
    pub method: ClearMethod,
}

/// A configuration problem the user must fix, with the offending field.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("{path}: {message}")]
pub struct SchemaError {
    pub path: String,
    pub message: String,
}

fn schema(path: &str, message: impl Into<String>) -> SchemaError {
    SchemaError { path: path.into(), message: message.into() }
}

pub fn parse(text: &str) -> Result<Config, SchemaError> {
    let de = toml::Deserializer::parse(text).map_err(|e| schema("<document>", e.to_string().trim_end()))?;
    let cfg: Config = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        schema(&path, e.into_inner().message())
    })?;
    cfg.check()?;
    Ok(cfg)
}

impl Config {
    pub fn check(&self) -> Result<(), SchemaError> {
        let s = &self.simulation;
        if s.draws == 0 {
            return Err(schema("simulation.draws", "must be > 0"));
        }
        if s.multi_start == 0 {
            return Err(schema("simulation.multi_start", "must be > 0"));
        }
        if !(s.tol_obj > 0.0) {
            return Err(schema("simulation.tol_obj", "must be > 0"));
        }
        if !(s.conv_tol > 0.0) {
            return Err(schema("simulation.conv_tol", "must be > 0"));
        }
        if s.max_rounds == 0 {
            return Err(schema("simulation.max_rounds", "must be > 0"));
        }
        let n = self.banks.count;
        if n == 0 {
            return Err(schema("banks.count", "must be > 0"));
        }
        if let Some(order) = &s.order {
            let mut sorted = order.clone();
            sorted.sort_unstable();
            if sorted != (0..n).collect::<Vec<_>>() {
                return Err(schema("simulation.order", format!("must be a permutation of 0..{n}")));
            }
        }
        if !(self.banks.equity > 0.0) {
            return Err(schema("banks.equity", "must be > 0"));
        }
        if self.returns.correlations.is_empty() {
            return Err(schema("returns.correlations", "needs at least one value"));
        }
        for (i, r) in self.returns.correlations.iter().enumerate() {
            if !(-1.0..=1.0).contains(r) {
                return Err(schema(&format!("returns.correlations[{i}]"), "must lie in [-1, 1]"));
            }
        }
        let g = &self.policy.grid;
        if g.weight_shares.len() != g.weight_external.len() || g.weight_debt.len() != g.weight_external.len() {
            return Err(schema("policy.grid", "weight_external, weight_shares and weight_debt must have equal lengths"));
        }
        for (name, v) in [("weight_external", &g.weight_external), ("weight_shares", &g.weight_shares), ("weight_debt", &g.weight_debt)] {
            for (i, w) in v.iter().enumerate() {
                let ok = if name == "weight_external" { *w > 0.0 } else { *w >= 0.0 };
                if !ok || !w.is_finite() {
                    return Err(schema(&format!("policy.grid.{name}[{i}]"), "out of range"));
                }
            }
        }
        for (name, v) in [("float_cap_shares", self.policy.float_cap_shares), ("float_cap_debt", self.policy.float_cap_debt)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(schema(&format!("policy.{name}"), "must lie in [0, 1]"));
            }
        }
        for (i, c) in self.welfare.deposit_costs.iter().enumerate() {
            if !(0.0..=0.6).contains(c) {
                return Err(schema(&format!("welfare.deposit_costs[{i}]"), "must lie in [0, 0.6]"));
            }
        }
        if let Some(c) = &self.clear {
            c.check()?;
        }
        Ok(())
    }
}

impl ClearSection {
    pub fn len(&self) -> usize {
        self.external_assets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.external_assets.is_empty()
    }

    fn check(&self) -> Result<(), SchemaError> {
        let n = self.len();
        if n == 0 {
            return Err(schema("clear.external_assets", "needs at least one bank"));
        }
        for (name, len) in [
            ("nominal_debt", self.nominal_debt.len()),
            ("shares", self.shares.len()),
            ("debts", self.debts.len()),
        ] {
            if len != n {
                return Err(schema(&format!("clear.{name}"), format!("expected {n} entries, found {len}")));
            }
        }
        for (name, v) in [("cash", &self.cash), ("debt_rate", &self.debt_rate)] {
            if !v.is_empty() && v.len() != n {
                return Err(schema(&format!("clear.{name}"), format!("expected {n} entries, found {}", v.len())));
            }
        }
        for (name, m) in [("shares", &self.shares), ("debts", &self.debts)] {
            for (i, row) in m.iter().enumerate() {
                if row.len() != n {
                    return Err(schema(&format!("clear.{name}[{i}]"), format!("expected {n} entries, found {}", row.len())));
                }
            }
        }
        if let Some(shocks) = &self.shocks {
            for (k, row) in shocks.iter().enumerate() {
                if row.len() != n {
                    return Err(schema(&format!("clear.shocks[{k}]"), format!("expected {n} entries, found {}", row.len())));
                }
            }
        } else if self.samples == 0 {
            return Err(schema("clear.samples", "must be > 0 when no shocks are given"));
        }
        Ok(())
    }
}
