//! The five pipelines behind `--command`.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use netform::clearing::{clear_bruteforce, clear_fixed_point, clear_heuristic, ClearingProblem};
use netform::domain::{
    validate_network, BalanceSheet, Institution, Network, RegulatoryPolicy, ReturnModel, Solvency, YieldCurveSpec,
};
use netform::formation::{form_network, interbank_ratio, BankSetup, FormationConfig, FormationResult, ScalingMode};
use netform::objective::{Counterparty, CounterpartySnapshot, FundingRate, OwnTerms, Utility};
use netform::optimizer::{optimize, ActiveControls, OptimizeSpec};
use netform::pricing::market_values;
use netform::returns::{calibrate, sample_gross_returns, CalibrationTarget, LogNormal};
use netform::welfare::{evaluate_welfare, WelfareVariant};

use crate::config::{self, ClearMethod, Config, Controls, Scaling, SchemaError, UtilityChoice, Variant};
use crate::output::{list, manifest, num, pct, sha256_hex, Table};

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Command {
    Calibrate,
    OptimizeSingle,
    Form,
    Welfare,
    Clear,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Calibrate => "calibrate",
            Command::OptimizeSingle => "optimize-single",
            Command::Form => "form",
            Command::Welfare => "welfare",
            Command::Clear => "clear",
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub command: Command,
    pub config: PathBuf,
    pub out: PathBuf,
    pub seed: Option<u64>,
    pub draws: Option<usize>,
    pub threads: Option<usize>,
}

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error("config: {0}")]
    Schema(#[from] SchemaError),
    #[error("{module}: {message}")]
    Runtime { module: &'static str, message: String },
}

impl RunError {
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Schema(_) => 2,
            RunError::Runtime { .. } => 1,
        }
    }
}

fn runtime(module: &'static str, e: impl ToString) -> RunError {
    RunError::Runtime { module, message: e.to_string() }
}

fn schema(path: &str, message: impl Into<String>) -> RunError {
    RunError::Schema(SchemaError { path: path.into(), message: message.into() })
}

/// What a command produced: CSV files and report lines.
struct Artifacts {
    tables: Vec<(&'static str, Table)>,
    report: Vec<String>,
}

/// One grid cell: a weight set and a return correlation.
#[derive(Debug, Clone, Copy)]
struct Cell {
    index: usize,
    weight_external: f64,
    weight_shares: f64,
    weight_debt: f64,
    correlation: f64,
}

impl Cell {
    fn columns(&self) -> Vec<String> {
        vec![
            self.index.to_string(),
            num(self.weight_external),
            pct(self.weight_external),
            num(self.weight_shares),
            pct(self.weight_shares),
            num(self.weight_debt),
            pct(self.weight_debt),
            num(self.correlation),
        ]
    }

    fn label(&self) -> String {
        format!(
            "cell {} (k_A={}%, k_pi={}%, k_gamma={}%, rho={})",
            self.index,
            pct(self.weight_external),
            pct(self.weight_shares),
            pct(self.weight_debt),
            num(self.correlation)
        )
    }
}

const CELL_HEADER: [&str; 8] = [
    "cell",
    "weight_external",
    "weight_external_pct",
    "weight_shares",
    "weight_shares_pct",
    "weight_debt",
    "weight_debt_pct",
    "correlation",
];

fn header(extra: &[&'static str]) -> Vec<&'static str> {
    CELL_HEADER.iter().chain(extra).copied().collect()
}

/// Everything the pipelines need, resolved from the configuration.
struct Setup {
    cfg: Config,
    law: LogNormal,
    funding: FundingRate,
}

impl Setup {
    fn new(cfg: Config) -> Result<Self, RunError> {
        let r = &cfg.returns;
        let target = CalibrationTarget {
            mean_net_return: r.mean_net_return,
            prob_default: r.prob_default,
            leverage_ratio: r.leverage_ratio,
        };
        let law = calibrate(target).map_err(|e| schema("returns", e.to_string()))?;
        let funding = match cfg.banks.yield_curve {
            Some(c) => {
                let spec = YieldCurveSpec { alpha: c.alpha, beta: c.beta };
                spec.validate(cfg.banks.risk_free_rate).map_err(|e| schema("banks.yield_curve", e.to_string()))?;
                FundingRate::Curve(spec)
            }
            None => FundingRate::Fixed(cfg.banks.debt_rate),
        };
        Ok(Setup { cfg, law, funding })
    }

    fn cells(&self) -> Vec<Cell> {
        let g = &self.cfg.policy.grid;
        let mut out = Vec::new();
        for w in 0..g.weight_external.len() {
            for &rho in &self.cfg.returns.correlations {
                out.push(Cell {
                    index: out.len(),
                    weight_external: g.weight_external[w],
                    weight_shares: g.weight_shares[w],
                    weight_debt: g.weight_debt[w],
                    correlation: rho,
                });
            }
        }
        out
    }

    fn model(&self, n: usize, rho: f64) -> Result<ReturnModel, RunError> {
        let corr = (0..n).map(|i| (0..n).map(|j| if i == j { 1.0 } else { rho }).collect()).collect();
        ReturnModel::new(vec![self.law.log_mean; n], vec![self.law.log_vol; n], corr).map_err(|e| runtime("returns", e))
    }

    fn policy(&self, n: usize, cell: &Cell) -> Result<RegulatoryPolicy, RunError> {
        let p = &self.cfg.policy;
        let mut pol = RegulatoryPolicy::uniform(n, cell.weight_external, cell.weight_shares, cell.weight_debt, p.weight_liquidity);
        pol.float_cap_shares = vec![p.float_cap_shares; n];
        pol.float_cap_debt = vec![p.float_cap_debt; n];
        pol.large_exposure_limit = p.large_exposure_limit;
        pol.validate(n).map_err(|e| schema("policy", e.to_string()))?;
        Ok(pol)
    }

    fn spec(&self, policy: RegulatoryPolicy) -> OptimizeSpec {
        let s = &self.cfg.simulation;
        let mut spec = OptimizeSpec::new(policy);
        spec.active = match s.controls {
            Controls::Reduced => ActiveControls::reduced(),
            Controls::All => ActiveControls::all(),
        };
        spec.liquidity_constraint = s.liquidity_constraint;
        spec.fixed_cash = s.fixed_cash;
        spec.fixed_maturity = s.fixed_maturity;
        spec.draw_count = s.draws;
        spec.seed = s.seed;
        spec.tol_obj = s.tol_obj;
        spec.multi_start = s.multi_start;
        spec.max_iterations = s.max_iterations;
        spec.utility = match s.utility {
            UtilityChoice::LogSoftplus => Utility::LogSoftplus,
            UtilityChoice::Linear => Utility::Linear,
        };
        spec
    }

    fn check_grid(&self) -> Result<(), RunError> {
        if self.cfg.policy.grid.weight_external.is_empty() {
            return Err(schema("policy.grid", "needs at least one weight set for this command"));
        }
        Ok(())
    }

    fn formation(&self, cell: &Cell) -> Result<(FormationResult, ReturnModel), RunError> {
        let n = self.cfg.banks.count;
        let model = self.model(n, cell.correlation)?;
        let spec = self.spec(self.policy(n, cell)?);
        let banks = vec![BankSetup { equity: self.cfg.banks.equity, funding: self.funding }; n];
        let mut fc = FormationConfig::new(banks, model.clone(), spec);
        fc.risk_free = self.cfg.banks.risk_free_rate;
        fc.max_rounds = self.cfg.simulation.max_rounds;
        fc.conv_tol = self.cfg.simulation.conv_tol;
        fc.scaling = match self.cfg.simulation.scaling {
            Scaling::Unit => ScalingMode::Unit,
            Scaling::BalanceSheet => ScalingMode::BalanceSheet,
        };
        if let Some(order) = &self.cfg.simulation.order {
            fc.order = order.clone();
        }
        let res = form_network(&fc).map_err(|e| runtime("formation", format!("{}: {e}", cell.label())))?;
        Ok((res, model))
    }
}

/// Loads the configuration, runs the command and writes all artifacts.
pub fn run(opts: &RunOptions) -> Result<(), RunError> {
    let text = fs::read(&opts.config).map_err(|e| runtime("cli", format!("reading {}: {e}", opts.config.display())))?;
    let text_str = std::str::from_utf8(&text).map_err(|e| schema("<document>", e.to_string()))?;
    let mut cfg = config::parse(text_str)?;
    if let Some(seed) = opts.seed {
        cfg.simulation.seed = seed;
    }
    if let Some(draws) = opts.draws {
        if draws == 0 {
            return Err(schema("--draws", "must be > 0"));
        }
        cfg.simulation.draws = draws;
    }
    let seed = cfg.simulation.seed;
    let draws = cfg.simulation.draws;
    let setup = Setup::new(cfg)?;
    let artifacts = match opts.command {
        Command::Calibrate => calibrate_cmd(&setup),
        Command::OptimizeSingle => optimize_single(&setup)?,
        Command::Form => form_cmd(&setup)?,
        Command::Welfare => welfare_cmd(&setup)?,
        Command::Clear => clear_cmd(&setup)?,
    };
    write_artifacts(opts, &text, seed, draws, artifacts)
}

fn write_artifacts(opts: &RunOptions, config_bytes: &[u8], seed: u64, draws: usize, a: Artifacts) -> Result<(), RunError> {
    let out: &Path = &opts.out;
    fs::create_dir_all(out).map_err(|e| runtime("cli", format!("creating {}: {e}", out.display())))?;
    let mut entries = vec![
        ("command", opts.command.name().to_string()),
        ("config_sha256", sha256_hex(config_bytes)),
        ("seed", seed.to_string()),
        ("draws", draws.to_string()),
        ("netform_version", netform::VERSION.to_string()),
        ("cli_version", env!("CARGO_PKG_VERSION").to_string()),
    ];
    for (name, table) in &a.tables {
        let bytes = table.to_csv().map_err(|e| runtime("cli", e))?;
        fs::write(out.join(name), &bytes).map_err(|e| runtime("cli", format!("writing {name}: {e}")))?;
        entries.push((name, sha256_hex(&bytes)));
    }
    fs::write(out.join("manifest.txt"), manifest(&entries)).map_err(|e| runtime("cli", e))?;
    let mut report = format!("netform {}\n\n", opts.command.name());
    for line in &a.report {
        report.push_str(line);
        report.push('\n');
    }
    fs::write(out.join("report.txt"), report).map_err(|e| runtime("cli", e))?;
    Ok(())
}

fn calibrate_cmd(setup: &Setup) -> Artifacts {
    let r = &setup.cfg.returns;
    let mut t = Table::new(&[
        "bank",
        "log_mean",
        "log_vol",
        "mean_net_return",
        "mean_net_return_pct",
        "prob_default",
        "prob_default_pct",
        "leverage_ratio",
        "leverage_ratio_pct",
    ]);
    for i in 0..setup.cfg.banks.count {
        t.push(vec![
            i.to_string(),
            num(setup.law.log_mean),
            num(setup.law.log_vol),
            num(r.mean_net_return),
            pct(r.mean_net_return),
            num(r.prob_default),
            pct(r.prob_default),
            num(r.leverage_ratio),
            pct(r.leverage_ratio),
        ]);
    }
    let report = vec![format!(
        "Calibrated log-mean {} and log-volatility {} for m = {}%, p = {}%, L/A = {}%.",
        num(setup.law.log_mean),
        num(setup.law.log_vol),
        pct(r.mean_net_return),
        pct(r.prob_default),
        pct(r.leverage_ratio)
    )];
    Artifacts { tables: vec![("calibration.csv", t)], report }
}

fn optimize_single(setup: &Setup) -> Result<Artifacts, RunError> {
    setup.check_grid()?;
    let Some(cp) = setup.cfg.banks.counterparty.clone() else {
        return Err(schema("banks.counterparty", "required for optimize-single"));
    };
    let rf = setup.cfg.banks.risk_free_rate;
    let issuer = Institution {
        id: 1,
        external_assets: cp.external_assets,
        cash: cp.cash,
        nominal_debt: cp.nominal_debt,
        equity_book: cp.external_assets + cp.cash - cp.nominal_debt,
        maturity: 0.0,
        debt_rate: cp.debt_rate,
        shares_held: vec![],
        debt_held: vec![],
    };
    let prices = market_values(&issuer, setup.law, cp.scaling, rf);
    let snap = CounterpartySnapshot {
        parties: vec![Counterparty {
            bank: 1,
            scaling: cp.scaling,
            external_assets: cp.external_assets,
            cash: cp.cash,
            nominal_debt: cp.nominal_debt,
            debt_rate: cp.debt_rate,
            equity_price: prices.market_equity,
            debt_price: prices.market_debt,
        }],
    };
    let own = OwnTerms { bank: 0, equity: setup.cfg.banks.equity, funding: setup.funding, risk_free: rf };
    let cells = setup.cells();
    let results: Vec<Result<Vec<String>, RunError>> = cells
        .par_iter()
        .map(|cell| {
            let model = setup.model(2, cell.correlation)?;
            let spec = setup.spec(setup.policy(2, cell)?);
            let r = optimize(&spec, &own, &snap, &model).map_err(|e| runtime("optimizer", format!("{}: {e}", cell.label())))?;
            let c = &r.control;
            let ratio = c.interbank_share(&snap);
            let binding: Vec<String> = r.diagnostics.binding.iter().map(|b| b.to_string()).collect();
            let mut row = cell.columns();
            row.extend([
                num(c.external_assets),
                num(c.cash),
                num(c.maturity),
                num(c.shares[0]),
                pct(c.shares[0]),
                num(c.debts[0]),
                pct(c.debts[0]),
                num(r.implied_debt),
                num(ratio),
                pct(ratio),
                num(r.expected_utility.mean),
                num(r.expected_utility.std_error),
                binding.join(";"),
                r.diagnostics.converged.to_string(),
            ]);
            Ok(row)
        })
        .collect();
    let mut t = Table::new(&header(&[
        "external_assets",
        "cash",
        "maturity",
        "shares",
        "shares_pct",
        "debts",
        "debts_pct",
        "implied_debt",
        "interbank_ratio",
        "interbank_ratio_pct",
        "expected_utility",
        "expected_utility_se",
        "binding",
        "converged",
    ]));
    let mut report = vec![format!(
        "Single-bank optimum against a fixed counterparty (Ax = {}, L* = {}); equity price {}, debt price {}.",
        num(cp.external_assets),
        num(cp.nominal_debt),
        num(prices.market_equity),
        num(prices.market_debt)
    )];
    for (cell, r) in cells.iter().zip(results) {
        let row = r?;
        report.push(format!(
            "{}: Ax = {}, pi = {}%, gamma = {}%, IBA/TA = {}%, binding [{}]",
            cell.label(),
            row[8],
            row[12],
            row[14],
            row[17],
            row[20]
        ));
        t.push(row);
    }
    Ok(Artifacts { tables: vec![("optimize_single.csv", t)], report })
}

fn sheet_rows(cell: &Cell, res: &FormationResult, t: &mut Table) {
    let net = &res.network;
    for (i, b) in net.banks.iter().enumerate() {
        let ratio = interbank_ratio(net, &res.prices, i);
        let mut row = cell.columns();
        row.extend([
            i.to_string(),
            num(b.external_assets),
            num(b.cash),
            num(b.maturity),
            num(b.nominal_debt),
            num(b.equity_book),
            num(b.debt_rate),
            list(&net.share_matrix[i]),
            list(&net.debt_matrix[i]),
            num(ratio),
            pct(ratio),
            num(res.prices[i].market_equity),
            num(res.prices[i].market_debt),
        ]);
        t.push(row);
    }
}

const SHEET_COLUMNS: [&str; 13] = [
    "bank",
    "external_assets",
    "cash",
    "maturity",
    "implied_debt",
    "equity",
    "debt_rate",
    "shares",
    "debts",
    "interbank_ratio",
    "interbank_ratio_pct",
    "equity_price",
    "debt_price",
];

fn form_cmd(setup: &Setup) -> Result<Artifacts, RunError> {
    setup.check_grid()?;
    let cells = setup.cells();
    let results: Vec<Result<(FormationResult, ReturnModel), RunError>> =
        cells.par_iter().map(|cell| setup.formation(cell)).collect();
    let mut sheets = Table::new(&header(&SHEET_COLUMNS));
    let mut summary = Table::new(&header(&["converged", "rounds", "last_change", "consistency_residual"]));
    let mut traj = Table::new(&[
        "cell",
        "step",
        "round",
        "bank",
        "external_assets",
        "cash",
        "maturity",
        "implied_debt",
        "shares",
        "debts",
        "expected_utility",
        "expected_utility_se",
        "change",
        "solvency_binds",
        "iterations",
        "optimizer_converged",
    ]);
    let mut report = Vec::new();
    for (cell, r) in cells.iter().zip(results) {
        let (res, _) = r?;
        sheet_rows(cell, &res, &mut sheets);
        let last = res.round_changes.last().copied();
        let mut row = cell.columns();
        row.extend([
            res.converged.to_string(),
            res.rounds.to_string(),
            last.map(num).unwrap_or_default(),
            num(res.consistency_residual),
        ]);
        summary.push(row);
        for s in &res.trajectory {
            traj.push(vec![
                cell.index.to_string(),
                s.step.to_string(),
                s.round.to_string(),
                s.bank.to_string(),
                num(s.sheet.external_assets),
                num(s.sheet.cash),
                num(s.sheet.maturity),
                num(s.sheet.debt),
                list(&s.sheet.shares),
                list(&s.sheet.debts),
                num(s.expected_utility.mean),
                num(s.expected_utility.std_error),
                s.change.map(num).unwrap_or_default(),
                s.solvency_binds.to_string(),
                s.iterations.to_string(),
                s.optimizer_converged.to_string(),
            ]);
        }
        let status = if res.converged { "converged" } else { "NOT converged" };
        report.push(format!("{}: {status} after {} rounds", cell.label(), res.rounds));
        for (i, b) in res.network.banks.iter().enumerate() {
            report.push(format!(
                "  bank {i}: Ax = {}, L = {}, shares [{}], debts [{}], IBA/TA = {}%",
                num(b.external_assets),
                num(b.nominal_debt),
                list(&res.network.share_matrix[i]),
                list(&res.network.debt_matrix[i]),
                pct(interbank_ratio(&res.network, &res.prices, i))
            ));
        }
    }
    Ok(Artifacts {
        tables: vec![("balance_sheets.csv", sheets), ("formation.csv", summary), ("trajectory.csv", traj)],
        report,
    })
}

fn welfare_cmd(setup: &Setup) -> Result<Artifacts, RunError> {
    setup.check_grid()?;
    let cells = setup.cells();
    let w = &setup.cfg.welfare;
    let draws = w.draws.unwrap_or(setup.cfg.simulation.draws);
    // Evaluation shocks come from a different seed than the formation draws.
    let seed = setup.cfg.simulation.seed.wrapping_add(1);
    let variant = match w.variant {
        Variant::Formula => WelfareVariant::Formula,
        Variant::SolventOnly => WelfareVariant::SolventOnly,
    };
    let results: Vec<Result<Vec<Vec<String>>, RunError>> = cells
        .par_iter()
        .map(|cell| {
            let (res, model) = setup.formation(cell)?;
            w.deposit_costs
                .iter()
                .map(|&c| {
                    let rep = evaluate_welfare(&res.network, &model, c, draws, seed, variant)
                        .map_err(|e| runtime("welfare", format!("{}: {e}", cell.label())))?;
                    let means: Vec<f64> = rep.contributions.iter().map(|e| e.mean).collect();
                    let ses: Vec<f64> = rep.contributions.iter().map(|e| e.std_error).collect();
                    let mut row = cell.columns();
                    row.extend([
                        num(c),
                        num(rep.welfare.mean),
                        pct(rep.welfare.mean),
                        num(rep.welfare.std_error),
                        pct(rep.welfare.std_error),
                        num(rep.total.mean),
                        num(rep.total.std_error),
                        list(&means),
                        list(&ses),
                        num(rep.default_frequency),
                        pct(rep.default_frequency),
                        rep.draws_used.to_string(),
                        rep.seed.to_string(),
                        match variant {
                            WelfareVariant::Formula => "formula".into(),
                            WelfareVariant::SolventOnly => "solvent-only".into(),
                        },
                    ]);
                    Ok(row)
                })
                .collect()
        })
        .collect();
    let mut t = Table::new(&header(&[
        "deposit_cost",
        "welfare",
        "welfare_pct",
        "welfare_se",
        "welfare_se_pct",
        "total",
        "total_se",
        "contributions",
        "contributions_se",
        "default_frequency",
        "default_frequency_pct",
        "draws",
        "seed",
        "variant",
    ]));
    let mut report = Vec::new();
    for (cell, r) in cells.iter().zip(results) {
        for row in r? {
            report.push(format!(
                "{}, c = {}: W = {}% (se {}pp), total contribution {}",
                cell.label(),
                row[8],
                row[10],
                row[12],
                row[13]
            ));
            t.push(row);
        }
    }
    Ok(Artifacts { tables: vec![("welfare.csv", t)], report })
}

fn clear_cmd(setup: &Setup) -> Result<Artifacts, RunError> {
    let Some(c) = setup.cfg.clear.clone() else {
        return Err(schema("clear", "section required for the clear command"));
    };
    let n = c.len();
    let or_zero = |v: &Vec<f64>| if v.is_empty() { vec![0.0; n] } else { v.clone() };
    let cash = or_zero(&c.cash);
    let rates = or_zero(&c.debt_rate);
    let banks = (0..n)
        .map(|i| BalanceSheet {
            external_assets: c.external_assets[i],
            cash: cash[i],
            nominal_debt: c.nominal_debt[i],
            equity_book: c.external_assets[i] + cash[i] - c.nominal_debt[i],
            maturity: 0.0,
            debt_rate: rates[i],
        })
        .collect();
    let net = Network {
        banks,
        share_matrix: c.shares.clone(),
        debt_matrix: c.debts.clone(),
        risk_free_rate: setup.cfg.banks.risk_free_rate,
    };
    let violations = validate_network(&net);
    if !violations.is_empty() {
        let msg = violations.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; ");
        return Err(schema("clear", msg));
    }
    let shocks: Vec<Vec<f64>> = match &c.shocks {
        Some(s) => s.clone(),
        None => {
            let rho = setup.cfg.returns.correlations[0];
            let draws = sample_gross_returns(&setup.model(n, rho)?, c.samples, setup.cfg.simulation.seed)
                .map_err(|e| runtime("returns", e))?;
            (0..c.samples).map(|k| draws.row(k)).collect()
        }
    };
    let mut t = Table::new(&[
        "scenario",
        "bank",
        "gross_return",
        "equity",
        "debt_value",
        "debt_due",
        "regime",
        "method",
        "work",
    ]);
    let mut defaults = 0;
    for (k, gross) in shocks.iter().enumerate() {
        let realized: Vec<f64> = net.banks.iter().zip(gross).map(|(b, g)| b.external_assets * g).collect();
        let p = ClearingProblem::from_network(&net, &realized).map_err(|e| runtime("clearing", e))?;
        let res = match c.method {
            ClearMethod::Heuristic => clear_heuristic(&p),
            ClearMethod::BruteForce => clear_bruteforce(&p),
            ClearMethod::FixedPoint => clear_fixed_point(&p, 1_000_000, 1e-13),
        }
        .map_err(|e| runtime("clearing", format!("scenario {k}: {e}")))?;
        for i in 0..n {
            let regime = match res.regime[i] {
                Solvency::Solvent => "solvent",
                Solvency::Default => {
                    defaults += 1;
                    "default"
                }
            };
            t.push(vec![
                k.to_string(),
                i.to_string(),
                num(gross[i]),
                num(res.equity[i]),
                num(res.debt_value[i]),
                num(p.due[i]),
                regime.into(),
                res.method.to_string(),
                res.work.to_string(),
            ]);
        }
    }
    let report = vec![format!("Cleared {} scenarios for {n} banks; {defaults} bank defaults in total.", shocks.len())];
    Ok(Artifacts { tables: vec![("clear.csv", t)], report })
}
