//! Expected-utility maximization of one bank's balance sheet.
//!
//! With the draw matrix fixed the objective is a smooth concave function of
//! the controls, so a log-barrier interior-point Newton method is used: every
//! iterate stays strictly feasible, and exact gradients and Hessians come from
//! the tabulated scenario payoffs. Also here: a brute-force grid oracle, the
//! risk-neutral greedy allocator and the interconnection KKT test.

use crate::domain::{Estimate, RegulatoryPolicy, ReturnModel};
use crate::objective::{
    liquidity_requirement, ControlVector, CounterpartySnapshot, FundingRate, ObjectiveError, OwnTerms, Scenarios,
    Utility,
};
use crate::returns::{sample_gross_returns, DrawMatrix};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::fmt;

/// Which controls the optimizer may move.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ActiveControls {
    pub external_assets: bool,
    pub cash: bool,
    pub maturity: bool,
    pub shares: bool,
    pub debts: bool,
}

impl ActiveControls {
    /// External assets and both kinds of holdings; cash and maturity fixed.
    pub fn reduced() -> Self {
        ActiveControls { external_assets: true, cash: false, maturity: false, shares: true, debts: true }
    }

    pub fn autarkic() -> Self {
        ActiveControls { shares: false, debts: false, ..Self::reduced() }
    }

    pub fn all() -> Self {
        ActiveControls { external_assets: true, cash: true, maturity: true, shares: true, debts: true }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizeSpec {
    pub active: ActiveControls,
    pub policy: RegulatoryPolicy,
    /// Enforce the cash floor k^L·e^ω·e^L.
    pub liquidity_constraint: bool,
    pub fixed_cash: f64,
    pub fixed_maturity: f64,
    pub draw_count: usize,
    pub seed: u64,
    /// Relative objective accuracy. The barrier is driven until its duality
    /// gap is below `tol_obj · 1e-3 · max(1, |EU|)`.
    pub tol_obj: f64,
    pub tol_feas: f64,
    pub multi_start: usize,
    /// Newton iterations allowed per start.
    pub max_iterations: usize,
    pub utility: Utility,
}

impl OptimizeSpec {
    pub fn new(policy: RegulatoryPolicy) -> Self {
        OptimizeSpec {
            active: ActiveControls::reduced(),
            policy,
            liquidity_constraint: false,
            fixed_cash: 0.0,
            fixed_maturity: 0.0,
            draw_count: 100_000,
            seed: 0,
            tol_obj: 1e-7,
            tol_feas: 1e-9,
            multi_start: 8,
            max_iterations: 5_000,
            utility: Utility::LogSoftplus,
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum OptimizeError {
    #[error("admissible set is empty: {0}")]
    Infeasible(String),
    #[error("invalid specification: {0}")]
    Spec(String),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error("sampling: {0}")]
    Sampling(String),
    #[error("multi-starts disagree on {what}: {a} vs {b} (starts {start_a} and {start_b})")]
    StartsDisagree { what: &'static str, a: f64, b: f64, start_a: usize, start_b: usize },
    #[error("grid oracle handles at most 4 free controls, got {0}")]
    GridDimension(usize),
    #[error("no admissible grid point")]
    EmptyGrid,
}

/// One free coordinate of the search.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Var {
    ExternalAssets,
    Cash,
    Maturity,
    Share(usize),
    Debt(usize),
}

impl fmt::Display for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Var::ExternalAssets => write!(f, "external_assets"),
            Var::Cash => write!(f, "cash"),
            Var::Maturity => write!(f, "maturity"),
            Var::Share(k) => write!(f, "shares[{k}]"),
            Var::Debt(k) => write!(f, "debts[{k}]"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConstraintId {
    Solvency,
    Liquidity,
    NonNegativeDebt,
    LargeExposure(usize),
    Lower(Var),
    Upper(Var),
}

impl fmt::Display for ConstraintId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConstraintId::Solvency => write!(f, "SC"),
            ConstraintId::Liquidity => write!(f, "LC"),
            ConstraintId::NonNegativeDebt => write!(f, "L>=0"),
            ConstraintId::LargeExposure(k) => write!(f, "LE[{k}]"),
            ConstraintId::Lower(v) => write!(f, "{v}>=lo"),
            ConstraintId::Upper(v) => write!(f, "{v}<=hi"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StartSummary {
    pub start: usize,
    pub converged: bool,
    pub iterations: usize,
    pub objective: f64,
    pub external_assets: f64,
    pub implied_debt: f64,
    pub maturity: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Diagnostics {
    pub converged: bool,
    pub starts: Vec<StartSummary>,
    /// Slack of every constraint at the returned point (≥ 0 when satisfied).
    pub slacks: Vec<(ConstraintId, f64)>,
    pub binding: Vec<ConstraintId>,
    pub max_violation: f64,
}

impl Diagnostics {
    pub fn solvency_binds(&self) -> bool {
        self.binding.contains(&ConstraintId::Solvency)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizeResult {
    pub control: ControlVector,
    pub implied_debt: f64,
    pub expected_utility: Estimate,
    pub diagnostics: Diagnostics,
}

#[derive(Debug, Clone)]
enum Kind {
    /// a·x + b ≤ 0.
    Linear { a: Vec<f64>, b: f64 },
    Liquidity,
}

#[derive(Debug, Clone)]
struct Constraint {
    id: ConstraintId,
    kind: Kind,
}

/// The program of one bank over its free coordinates.
struct Program<'a> {
    own: &'a OwnTerms,
    snap: &'a CounterpartySnapshot,
    scen: &'a Scenarios,
    utility: Utility,
    vars: Vec<Var>,
    base: ControlVector,
    /// ∂L/∂x.
    debt_slope: Vec<f64>,
    weight_liquidity: f64,
    cons: Vec<Constraint>,
    upper: Vec<f64>,
    share_caps: Vec<f64>,
    debt_caps: Vec<f64>,
    weight_external: f64,
    weight_shares: f64,
    weight_debt: f64,
    exposure_limit: Option<f64>,
    liquidity: bool,
}

impl<'a> Program<'a> {
    fn new(
        spec: &OptimizeSpec,
        own: &'a OwnTerms,
        snap: &'a CounterpartySnapshot,
        scen: &'a Scenarios,
    ) -> Result<Self, OptimizeError> {
        let pol = &spec.policy;
        let n_banks = pol.weight_external.len();
        if own.bank >= n_banks || snap.parties.iter().any(|c| c.bank >= n_banks) {
            return Err(OptimizeError::Spec(format!("policy covers {n_banks} banks")));
        }
        if !spec.active.external_assets {
            return Err(OptimizeError::Spec("external assets must be a free control".into()));
        }
        if !(0.0..=1.0).contains(&spec.fixed_maturity) || spec.fixed_cash < 0.0 {
            return Err(OptimizeError::Spec("fixed cash or maturity out of range".into()));
        }
        let parties = snap.parties.len();
        let share_caps: Vec<f64> = snap.parties.iter().map(|c| pol.float_cap_shares[c.bank]).collect();
        let debt_caps: Vec<f64> = snap.parties.iter().map(|c| pol.float_cap_debt[c.bank]).collect();
        let mut vars = vec![Var::ExternalAssets];
        if spec.active.cash {
            vars.push(Var::Cash);
        }
        if spec.active.maturity && matches!(own.funding, FundingRate::Curve(_)) {
            vars.push(Var::Maturity);
        }
        for (k, c) in snap.parties.iter().enumerate() {
            if spec.active.shares && share_caps[k] > 0.0 && c.equity_price > 0.0 {
                vars.push(Var::Share(k));
            }
        }
        for (k, c) in snap.parties.iter().enumerate() {
            if spec.active.debts && debt_caps[k] > 0.0 && c.debt_price > 0.0 {
                vars.push(Var::Debt(k));
            }
        }
        let base = ControlVector {
            external_assets: 0.0,
            cash: spec.fixed_cash,
            maturity: spec.fixed_maturity,
            shares: vec![0.0; parties],
            debts: vec![0.0; parties],
        };
        let k_a = pol.weight_external[own.bank];
        let mut prog = Program {
            own,
            snap,
            scen,
            utility: spec.utility,
            debt_slope: vec![],
            weight_liquidity: pol.weight_liquidity,
            cons: vec![],
            upper: vec![],
            share_caps,
            debt_caps,
            weight_external: k_a,
            weight_shares: pol.weight_shares,
            weight_debt: pol.weight_debt,
            exposure_limit: pol.large_exposure_limit,
            liquidity: spec.liquidity_constraint,
            vars,
            base,
        };
        prog.debt_slope = prog.vars.iter().map(|&v| prog.debt_coefficient(v)).collect();
        prog.upper = prog.vars.iter().map(|&v| prog.upper_bound(v)).collect();
        prog.build_constraints();
        Ok(prog)
    }

    fn dim(&self) -> usize {
        self.vars.len()
    }

    fn equity(&self) -> f64 {
        self.own.equity
    }

    fn debt_coefficient(&self, v: Var) -> f64 {
        match v {
            Var::ExternalAssets | Var::Cash => 1.0,
            Var::Maturity => 0.0,
            Var::Share(k) => self.snap.parties[k].equity_price,
            Var::Debt(k) => self.snap.parties[k].debt_price,
        }
    }

    fn capital_coefficient(&self, v: Var) -> f64 {
        match v {
            Var::ExternalAssets => self.weight_external,
            Var::Cash | Var::Maturity => 0.0,
            Var::Share(k) => self.weight_shares * self.snap.parties[k].equity_price,
            Var::Debt(k) => self.weight_debt * self.snap.parties[k].debt_price,
        }
    }

    /// Box upper bound; external assets are bounded by solvency alone.
    fn upper_bound(&self, v: Var) -> f64 {
        match v {
            Var::ExternalAssets => self.equity() / self.weight_external,
            Var::Cash => 2.0 * self.equity() + self.weight_liquidity * std::f64::consts::E,
            Var::Maturity => 1.0,
            Var::Share(k) => self.share_caps[k],
            Var::Debt(k) => self.debt_caps[k],
        }
    }

    fn build_constraints(&mut self) {
        let d = self.dim();
        let mut cons = Vec::new();
        let zero = self.to_control(&vec![0.0; d]);
        let sc: Vec<f64> = self.vars.iter().map(|&v| self.capital_coefficient(v)).collect();
        cons.push(Constraint { id: ConstraintId::Solvency, kind: Kind::Linear { a: sc, b: -self.equity() } });
        let l0 = zero.implied_debt(self.own, self.snap);
        cons.push(Constraint {
            id: ConstraintId::NonNegativeDebt,
            kind: Kind::Linear { a: self.debt_slope.iter().map(|v| -v).collect(), b: -l0 },
        });
        if self.liquidity {
            cons.push(Constraint { id: ConstraintId::Liquidity, kind: Kind::Liquidity });
        }
        if let Some(limit) = self.exposure_limit {
            for k in 0..self.snap.parties.len() {
                let a: Vec<f64> = self
                    .vars
                    .iter()
                    .map(|&v| match v {
                        Var::Share(j) | Var::Debt(j) if j == k => self.capital_coefficient(v),
                        _ => 0.0,
                    })
                    .collect();
                if a.iter().any(|&x| x != 0.0) {
                    cons.push(Constraint {
                        id: ConstraintId::LargeExposure(k),
                        kind: Kind::Linear { a, b: -limit * self.equity() },
                    });
                }
            }
        }
        for (m, &v) in self.vars.iter().enumerate() {
            let mut a = vec![0.0; d];
            a[m] = -1.0;
            cons.push(Constraint { id: ConstraintId::Lower(v), kind: Kind::Linear { a, b: 0.0 } });
            // External assets are capped by solvency and cash only matters
            // through its cost, so neither needs an explicit upper face.
            if !matches!(v, Var::ExternalAssets | Var::Cash) {
                let mut a = vec![0.0; d];
                a[m] = 1.0;
                cons.push(Constraint { id: ConstraintId::Upper(v), kind: Kind::Linear { a, b: -self.upper[m] } });
            }
        }
        self.cons = cons;
    }

    fn to_control(&self, x: &[f64]) -> ControlVector {
        let mut c = self.base.clone();
        for (&v, &val) in self.vars.iter().zip(x) {
            match v {
                Var::ExternalAssets => c.external_assets = val,
                Var::Cash => c.cash = val,
                Var::Maturity => c.maturity = val,
                Var::Share(k) => c.shares[k] = val,
                Var::Debt(k) => c.debts[k] = val,
            }
        }
        c
    }

    fn from_control(&self, c: &ControlVector) -> Vec<f64> {
        self.vars
            .iter()
            .map(|&v| match v {
                Var::ExternalAssets => c.external_assets,
                Var::Cash => c.cash,
                Var::Maturity => c.maturity,
                Var::Share(k) => c.shares[k],
                Var::Debt(k) => c.debts[k],
            })
            .collect()
    }

    /// Constraint value (≤ 0 when satisfied).
    fn con_value(&self, c: &Constraint, x: &[f64], ctrl: &ControlVector) -> f64 {
        match &c.kind {
            Kind::Linear { a, b } => a.iter().zip(x).map(|(a, x)| a * x).sum::<f64>() + b,
            Kind::Liquidity => {
                let l = ctrl.implied_debt(self.own, self.snap);
                liquidity_requirement(ctrl.maturity, l, self.weight_liquidity) - ctrl.cash
            }
        }
    }

    /// Gradient and Hessian of a constraint.
    fn con_derivatives(&self, c: &Constraint, ctrl: &ControlVector) -> (Vec<f64>, Option<Vec<f64>>) {
        match &c.kind {
            Kind::Linear { a, .. } => (a.clone(), None),
            Kind::Liquidity => {
                let l = ctrl.implied_debt(self.own, self.snap);
                let req = liquidity_requirement(ctrl.maturity, l, self.weight_liquidity);
                // ∇(ω + L): the requirement is req·exp of it.
                let v: Vec<f64> = self
                    .vars
                    .iter()
                    .zip(&self.debt_slope)
                    .map(|(&var, &s)| s + if var == Var::Maturity { 1.0 } else { 0.0 })
                    .collect();
                let mut g: Vec<f64> = v.iter().map(|vi| req * vi).collect();
                if let Some(m) = self.vars.iter().position(|&var| var == Var::Cash) {
                    g[m] -= 1.0;
                }
                (g, Some(v.into_iter().map(|vi| vi * req.sqrt()).collect()))
            }
        }
    }

    fn strictly_feasible(&self, x: &[f64]) -> bool {
        let ctrl = self.to_control(x);
        self.cons.iter().all(|c| self.con_value(c, x, &ctrl) < 0.0)
    }

    /// Mean utility over the scenarios (plain sum, fixed order).
    fn objective(&self, x: &[f64]) -> f64 {
        let ctrl = self.to_control(x);
        let (cash_value, debt_cost) = self.affine_terms(&ctrl);
        let mut s = 0.0;
        for k in 0..self.scen.len() {
            s += self.utility.value(self.scen.position(k, &ctrl, cash_value, debt_cost));
        }
        s / self.scen.len() as f64
    }

    fn affine_terms(&self, ctrl: &ControlVector) -> (f64, f64) {
        let cash_value = ctrl.cash * (1.0 + self.own.risk_free);
        let debt_cost = (1.0 + self.own.funding.rate(ctrl.maturity)) * ctrl.implied_debt(self.own, self.snap);
        (cash_value, debt_cost)
    }

    /// Objective, gradient and Hessian.
    fn derivatives(&self, x: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
        let d = self.dim();
        let ctrl = self.to_control(x);
        let (cash_value, debt_cost) = self.affine_terms(&ctrl);
        let gross_rate = 1.0 + self.own.funding.rate(ctrl.maturity);
        let (r1, r2) = self.own.funding.slope(ctrl.maturity);
        let debt = ctrl.implied_debt(self.own, self.snap);
        let rf = 1.0 + self.own.risk_free;
        let mut f = 0.0;
        let mut g = vec![0.0; d];
        let mut h = vec![0.0; d * d];
        let mut mean_du = 0.0;
        let mut a = vec![0.0; d];
        for k in 0..self.scen.len() {
            let p = self.scen.position(k, &ctrl, cash_value, debt_cost);
            let (u, du, d2u) = self.utility.eval(p);
            f += u;
            mean_du += du;
            for (m, &v) in self.vars.iter().enumerate() {
                a[m] = match v {
                    Var::ExternalAssets => self.scen.own_gross[k] - gross_rate,
                    Var::Cash => rf - gross_rate,
                    Var::Maturity => -r1 * debt,
                    Var::Share(j) => self.scen.equity[j][k] - gross_rate * self.snap.parties[j].equity_price,
                    Var::Debt(j) => self.scen.debt[j][k] - gross_rate * self.snap.parties[j].debt_price,
                };
            }
            for m in 0..d {
                g[m] += du * a[m];
                let w = d2u * a[m];
                for q in 0..=m {
                    h[m * d + q] += w * a[q];
                }
            }
        }
        let n = self.scen.len() as f64;
        f /= n;
        mean_du /= n;
        for v in g.iter_mut() {
            *v /= n;
        }
        for m in 0..d {
            for q in 0..=m {
                h[m * d + q] /= n;
                h[q * d + m] = h[m * d + q];
            }
        }
        // Curvature of the position itself, only through the maturity control.
        if let Some(w) = self.vars.iter().position(|&v| v == Var::Maturity) {
            for m in 0..d {
                let term = if m == w { -r2 * debt } else { -r1 * self.debt_slope[m] };
                h[w * d + m] += mean_du * term;
                if m != w {
                    h[m * d + w] += mean_du * term;
                }
            }
        }
        (f, g, h)
    }

    fn barrier_value(&self, x: &[f64], mu: f64) -> f64 {
        let ctrl = self.to_control(x);
        let mut b = -self.objective(x);
        for c in &self.cons {
            let v = self.con_value(c, x, &ctrl);
            if v >= 0.0 {
                return f64::INFINITY;
            }
            b -= mu * (-v).ln();
        }
        b
    }

    /// Damped Newton on the barrier problem at weight `mu`.
    fn centre(&self, x: &mut Vec<f64>, mu: f64, budget: &mut usize) -> bool {
        let d = self.dim();
        loop {
            if *budget == 0 {
                return false;
            }
            *budget -= 1;
            let ctrl = self.to_control(x);
            let (_, g, h) = self.derivatives(x);
            let mut grad: Vec<f64> = g.iter().map(|v| -v).collect();
            let mut hess = DMatrix::from_fn(d, d, |i, j| -h[i * d + j]);
            for c in &self.cons {
                let v = self.con_value(c, x, &ctrl);
                let (cg, chess) = self.con_derivatives(c, &ctrl);
                let s = -v;
                for i in 0..d {
                    grad[i] += mu * cg[i] / s;
                    for j in 0..d {
                        hess[(i, j)] += mu * cg[i] * cg[j] / (s * s);
                    }
                }
                if let Some(r) = chess {
                    for i in 0..d {
                        for j in 0..d {
                            hess[(i, j)] += mu * r[i] * r[j] / s;
                        }
                    }
                }
            }
            let rhs = DVector::from_iterator(d, grad.iter().map(|v| -v));
            let step = match hess.clone().cholesky() {
                Some(ch) => ch.solve(&rhs),
                None => {
                    let scale = (0..d).map(|i| hess[(i, i)].abs()).fold(1e-12, f64::max);
                    let mut reg = hess.clone();
                    for i in 0..d {
                        reg[(i, i)] += 1e-8 * scale;
                    }
                    match reg.lu().solve(&rhs) {
                        Some(s) => s,
                        None => return false,
                    }
                }
            };
            let slope: f64 = grad.iter().zip(step.iter()).map(|(g, s)| g * s).sum();
            if -slope <= 2e-14 {
                return true;
            }
            let phi = self.barrier_value(x, mu);
            let mut t = 1.0;
            loop {
                let trial: Vec<f64> = x.iter().zip(step.iter()).map(|(x, s)| x + t * s).collect();
                if self.strictly_feasible(&trial) {
                    let val = self.barrier_value(&trial, mu);
                    if val < phi && val <= phi + 0.25 * t * slope {
                        *x = trial;
                        break;
                    }
                }
                t *= 0.5;
                if t < 1e-14 {
                    // No further decrease is measurable at double precision.
                    return true;
                }
            }
        }
    }

    fn solve_from(&self, mut x: Vec<f64>, tol_obj: f64, max_iterations: usize) -> (Vec<f64>, bool, usize) {
        let m = self.cons.len() as f64;
        let mut budget = max_iterations;
        let mut mu = 1e-3;
        let mut converged = true;
        loop {
            converged &= self.centre(&mut x, mu, &mut budget);
            let f = self.objective(&x);
            if m * mu <= tol_obj * 1e-3 * f.abs().max(1.0) || budget == 0 {
                break;
            }
            mu *= 0.02;
        }
        (x, converged && budget > 0, max_iterations - budget)
    }

    /// A strictly feasible point; start 0 is deterministic.
    fn start_point(&self, rng: &mut ChaCha8Rng, central: bool) -> Option<Vec<f64>> {
        let k0 = self.equity();
        let draw = |rng: &mut ChaCha8Rng, lo: f64, hi: f64| if central { 0.5 * (lo + hi) } else { rng.random_range(lo..hi) };
        for _ in 0..50 {
            let mut c = self.base.clone();
            let budget = draw(rng, 0.05, 0.5) * k0;
            for &v in &self.vars {
                let frac = draw(rng, 0.05, 0.95);
                match v {
                    Var::Share(k) => c.shares[k] = frac * self.share_caps[k],
                    Var::Debt(k) => c.debts[k] = frac * self.debt_caps[k],
                    Var::Maturity => c.maturity = draw(rng, 0.1, 0.9),
                    _ => {}
                }
            }
            let rw: f64 = (0..self.snap.parties.len())
                .map(|k| {
                    self.capital_coefficient(Var::Share(k)) * c.shares[k] + self.capital_coefficient(Var::Debt(k)) * c.debts[k]
                })
                .sum();
            // Keep interbank capital use inside the drawn budget and, when a
            // large-exposure limit applies, well inside it per counterparty.
            let mut scale = if rw > budget { budget / rw } else { 1.0 };
            if let Some(limit) = self.exposure_limit {
                for k in 0..self.snap.parties.len() {
                    let e = self.weight_shares * c.shares[k] * self.snap.parties[k].equity_price
                        + self.weight_debt * c.debts[k] * self.snap.parties[k].debt_price;
                    if e * scale > 0.5 * limit * k0 {
                        scale = 0.5 * limit * k0 / e;
                    }
                }
            }
            for k in 0..self.snap.parties.len() {
                c.shares[k] *= scale;
                c.debts[k] *= scale;
            }
            let interbank = c.interbank_assets(self.snap);
            let rw_used = rw * scale;
            let hi = (k0 - rw_used) / self.weight_external;
            if self.liquidity {
                // Little debt so that a modest cash buffer clears the floor.
                let target_debt = draw(rng, 0.01, 0.1) * k0;
                let need = liquidity_requirement(c.maturity, target_debt, self.weight_liquidity);
                if self.vars.contains(&Var::Cash) {
                    c.cash = need * draw(rng, 1.2, 2.0);
                }
                c.external_assets = target_debt + k0 - c.cash - interbank;
                if c.external_assets <= 0.0 || c.external_assets >= hi {
                    continue;
                }
            } else {
                if self.vars.contains(&Var::Cash) {
                    c.cash = draw(rng, 0.01, 0.2) * k0;
                }
                let lo = (k0 - c.cash - interbank).max(0.0);
                if !(hi > lo) {
                    continue;
                }
                c.external_assets = lo + draw(rng, 0.2, 0.8) * (hi - lo);
            }
            let x = self.from_control(&c);
            if self.strictly_feasible(&x) {
                return Some(x);
            }
        }
        None
    }

    /// Moves coordinates that sit within 1e-7 of a lower bound of zero onto it.
    fn snap_to_bounds(&self, x: &mut [f64], tol_feas: f64) {
        for m in 0..self.dim() {
            if x[m] > 0.0 && x[m] < 1e-7 * self.upper[m].max(1.0) {
                let keep = x[m];
                x[m] = 0.0;
                if self.max_violation(x) > tol_feas {
                    x[m] = keep;
                }
            }
        }
    }

    fn slacks(&self, x: &[f64]) -> Vec<(ConstraintId, f64)> {
        let ctrl = self.to_control(x);
        self.cons.iter().map(|c| (c.id, -self.con_value(c, x, &ctrl))).collect()
    }

    fn max_violation(&self, x: &[f64]) -> f64 {
        self.slacks(x).iter().map(|(_, s)| (-s).max(0.0)).fold(0.0, f64::max)
    }
}

/// Checks that the admissible set contains the canonical feasible point
/// (Ax, Aℓ) = (K − k^L·l(0,0), k^L·l(0,0)) with no debt.
fn precheck(spec: &OptimizeSpec, own: &OwnTerms) -> Result<(), OptimizeError> {
    let k0 = own.equity;
    if !(k0 >= 0.0) || !k0.is_finite() {
        return Err(OptimizeError::Infeasible(format!("equity {k0} must be finite and >= 0")));
    }
    if spec.liquidity_constraint {
        let floor = liquidity_requirement(0.0, 0.0, spec.policy.weight_liquidity);
        if k0 - floor < 0.0 {
            return Err(OptimizeError::Infeasible(format!(
                "equity {k0} below the liquidity floor k^L*l(0,0) = {floor}"
            )));
        }
        if !spec.active.cash && spec.fixed_cash < floor {
            return Err(OptimizeError::Infeasible(format!(
                "fixed cash {} below the liquidity floor {floor}",
                spec.fixed_cash
            )));
        }
    }
    if !(spec.tol_obj > 0.0 && spec.tol_feas > 0.0 && spec.multi_start >= 1) {
        return Err(OptimizeError::Spec("tolerances must be > 0 and multi_start >= 1".into()));
    }
    Ok(())
}

/// Samples the draw matrix from `spec.seed` and optimizes.
pub fn optimize(
    spec: &OptimizeSpec,
    own: &OwnTerms,
    snap: &CounterpartySnapshot,
    model: &ReturnModel,
) -> Result<OptimizeResult, OptimizeError> {
    let draws = sample_gross_returns(model, spec.draw_count, spec.seed).map_err(|e| OptimizeError::Sampling(e.to_string()))?;
    let scen = Scenarios::new(&draws, snap, own)?;
    optimize_scenarios(spec, own, snap, &scen)
}

pub fn optimize_with_draws(
    spec: &OptimizeSpec,
    own: &OwnTerms,
    snap: &CounterpartySnapshot,
    draws: &DrawMatrix,
) -> Result<OptimizeResult, OptimizeError> {
    let scen = Scenarios::new(draws, snap, own)?;
    optimize_scenarios(spec, own, snap, &scen)
}

fn agree(a: f64, b: f64) -> bool {
    (a - b).abs() <= 0.01 * a.abs().max(b.abs()).max(1e-6)
}

pub fn optimize_scenarios(
    spec: &OptimizeSpec,
    own: &OwnTerms,
    snap: &CounterpartySnapshot,
    scen: &Scenarios,
) -> Result<OptimizeResult, OptimizeError> {
    precheck(spec, own)?;
    let prog = Program::new(spec, own, snap, scen)?;
    if own.equity == 0.0 {
        let mut control = prog.base.clone();
        control.cash = if spec.active.cash { 0.0 } else { spec.fixed_cash };
        let eu = scen.expected_utility(&control, snap, own, spec.utility)?;
        let x = prog.from_control(&control);
        let slacks = prog.slacks(&x);
        return Ok(OptimizeResult {
            implied_debt: control.implied_debt(own, snap),
            control,
            expected_utility: eu,
            diagnostics: Diagnostics {
                converged: true,
                starts: vec![],
                binding: slacks.iter().filter(|(_, s)| s.abs() <= 0.0).map(|(id, _)| *id).collect(),
                max_violation: prog.max_violation(&x),
                slacks,
            },
        });
    }
    let starts: Vec<Option<(Vec<f64>, bool, usize)>> = (0..spec.multi_start)
        .into_par_iter()
        .map(|s| {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(s as u64 + 1);
            let x0 = prog.start_point(&mut rng, s == 0)?;
            let (mut x, ok, it) = prog.solve_from(x0, spec.tol_obj, spec.max_iterations);
            prog.snap_to_bounds(&mut x, spec.tol_feas);
            Some((x, ok, it))
        })
        .collect();
    if starts.iter().all(Option::is_none) {
        return Err(OptimizeError::Infeasible("no strictly feasible starting point found".into()));
    }
    let mut summaries = Vec::new();
    let mut best: Option<(usize, f64)> = None;
    for (s, r) in starts.iter().enumerate() {
        let Some((x, ok, it)) = r else { continue };
        let f = prog.objective(x);
        let c = prog.to_control(x);
        summaries.push(StartSummary {
            start: s,
            converged: *ok,
            iterations: *it,
            objective: f,
            external_assets: c.external_assets,
            implied_debt: c.implied_debt(own, snap),
            maturity: c.maturity,
        });
        if best.is_none_or(|(_, bf)| f > bf) {
            best = Some((s, f));
        }
    }
    let (best_start, _) = best.expect("at least one start");
    let lead = summaries.iter().find(|s| s.start == best_start).expect("best start summarized").clone();
    for s in summaries.iter().filter(|s| s.converged) {
        for (what, a, b) in [
            ("external assets", lead.external_assets, s.external_assets),
            ("implied debt", lead.implied_debt, s.implied_debt),
            ("maturity", lead.maturity, s.maturity),
        ] {
            if !agree(a, b) {
                return Err(OptimizeError::StartsDisagree { what, a, b, start_a: lead.start, start_b: s.start });
            }
        }
    }
    let x = starts[best_start].as_ref().expect("best start exists").0.clone();
    let control = prog.to_control(&x);
    let slacks = prog.slacks(&x);
    let threshold = 1e-6 * own.equity;
    let binding = slacks.iter().filter(|(_, s)| s.abs() <= threshold).map(|(id, _)| *id).collect();
    let max_violation = prog.max_violation(&x);
    let converged = summaries.iter().any(|s| s.converged) && max_violation <= spec.tol_feas;
    Ok(OptimizeResult {
        implied_debt: control.implied_debt(own, snap),
        expected_utility: scen.expected_utility(&control, snap, own, spec.utility)?,
        control,
        diagnostics: Diagnostics { converged, starts: summaries, slacks, binding, max_violation },
    })
}

/// Maximum utility over a regular grid of the free controls.
#[derive(Debug, Clone, PartialEq)]
pub struct GridResult {
    pub control: ControlVector,
    pub expected_utility: f64,
    pub points_evaluated: usize,
    /// Bound on how far the continuous optimum can exceed the grid optimum.
    pub gap_bound: f64,
    pub vars: Vec<Var>,
}

/// Exhaustive search over `resolution` points per free control. With one
/// point per axis the grid is the corner where all capital goes to external
/// assets.
pub fn grid_oracle(
    spec: &OptimizeSpec,
    own: &OwnTerms,
    snap: &CounterpartySnapshot,
    scen: &Scenarios,
    resolution: usize,
) -> Result<GridResult, OptimizeError> {
    precheck(spec, own)?;
    let prog = Program::new(spec, own, snap, scen)?;
    let d = prog.dim();
    if d > 4 {
        return Err(OptimizeError::GridDimension(d));
    }
    let r = resolution.max(1);
    let axis = |m: usize, i: usize| -> f64 {
        let hi = prog.upper[m];
        if r == 1 {
            if prog.vars[m] == Var::ExternalAssets {
                hi
            } else {
                0.0
            }
        } else {
            hi * i as f64 / (r - 1) as f64
        }
    };
    let total = r.pow(d as u32);
    let best = (0..total)
        .into_par_iter()
        .filter_map(|idx| {
            let mut rem = idx;
            let x: Vec<f64> = (0..d)
                .map(|m| {
                    let i = rem % r;
                    rem /= r;
                    axis(m, i)
                })
                .collect();
            (prog.max_violation(&x) <= spec.tol_feas).then(|| (idx, prog.objective(&x), x))
        })
        .reduce_with(|a, b| if b.1 > a.1 || (b.1 == a.1 && b.0 < a.0) { b } else { a });
    let Some((_, f, x)) = best else {
        return Err(OptimizeError::EmptyGrid);
    };
    Ok(GridResult {
        control: prog.to_control(&x),
        expected_utility: f,
        points_evaluated: total,
        gap_bound: grid_gap(&prog, r),
        vars: prog.vars.clone(),
    })
}

/// Σ over axes of (Lipschitz constant along the axis) × (grid spacing), with
/// |U′| ≤ 1 for both utilities.
fn grid_gap(prog: &Program, r: usize) -> f64 {
    let spacing = |m: usize| if r == 1 { prog.upper[m] } else { prog.upper[m] / (r - 1) as f64 };
    let n = prog.scen.len() as f64;
    let rates = [0.0, 1.0].map(|w| 1.0 + prog.own.funding.rate(w));
    let rf = 1.0 + prog.own.risk_free;
    let max_debt = prog.upper.iter().zip(&prog.debt_slope).map(|(u, s)| u * s).sum::<f64>() + prog.base.cash;
    prog.vars
        .iter()
        .enumerate()
        .map(|(m, &v)| {
            let lip = rates
                .iter()
                .map(|&gr| match v {
                    Var::ExternalAssets => prog.scen.own_gross.iter().map(|g| (g - gr).abs()).sum::<f64>() / n,
                    Var::Cash => (rf - gr).abs(),
                    Var::Maturity => {
                        let (a, _) = prog.own.funding.slope(0.0);
                        let (b, _) = prog.own.funding.slope(1.0);
                        a.abs().max(b.abs()) * max_debt
                    }
                    Var::Share(j) => {
                        let p = prog.snap.parties[j].equity_price;
                        prog.scen.equity[j].iter().map(|e| (e - gr * p).abs()).sum::<f64>() / n
                    }
                    Var::Debt(j) => {
                        let p = prog.snap.parties[j].debt_price;
                        prog.scen.debt[j].iter().map(|e| (e - gr * p).abs()).sum::<f64>() / n
                    }
                })
                .fold(0.0, f64::max);
            lip * spacing(m)
        })
        .sum()
}

/// One asset a risk-neutral bank may buy: payoff per unit, capital charge per
/// unit and an optional quantity cap.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MenuAsset {
    pub expected_return: f64,
    pub weight: f64,
    pub cap: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Allocation {
    pub amounts: Vec<f64>,
    /// Asset that received the last, partial fill.
    pub cut: Option<usize>,
    pub value: f64,
}

/// Fills assets in decreasing order of return per unit of capital until the
/// capital budget is used. Assets that do not pay are left out. Ties go to
/// the lower index.
pub fn greedy_risk_neutral(menu: &[MenuAsset], budget: f64) -> Allocation {
    let mut order: Vec<usize> = (0..menu.len()).collect();
    let ratio = |i: usize| menu[i].expected_return / menu[i].weight;
    order.sort_by(|&a, &b| ratio(b).total_cmp(&ratio(a)).then(a.cmp(&b)));
    let mut amounts = vec![0.0; menu.len()];
    let mut left = budget.max(0.0);
    let mut cut = None;
    for i in order {
        if left <= 0.0 || ratio(i) <= 0.0 {
            break;
        }
        let room = left / menu[i].weight;
        let take = menu[i].cap.map_or(room, |c| c.max(0.0).min(room));
        amounts[i] = take;
        if take >= room {
            left = 0.0;
            cut = Some(i);
        } else {
            left -= take * menu[i].weight;
        }
    }
    let value = amounts.iter().zip(menu).map(|(a, m)| a * m.expected_return).sum();
    Allocation { amounts, cut, value }
}

/// True when moving capital from external assets into counterparty equity
/// raises expected utility at the evaluated point, so no holding cannot be
/// optimal. Weights are capital charges per unit of each control.
pub fn kkt_interconnection_check(
    grad_external: f64,
    grad_shares: f64,
    weight_external: f64,
    weight_shares: f64,
) -> bool {
    grad_external / weight_external < grad_shares / weight_shares
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn greedy_two_assets_all_to_best() {
        let menu = [
            MenuAsset { expected_return: 0.1, weight: 0.06, cap: None },
            MenuAsset { expected_return: 0.02, weight: 0.232, cap: None },
        ];
        let a = greedy_risk_neutral(&menu, 1.0);
        assert!((a.amounts[0] - 1.0 / 0.06).abs() < 1e-12);
        assert_eq!(a.amounts[1], 0.0);
        assert_eq!(a.cut, Some(0));
    }

    #[test]
    fn greedy_cap_spills_to_next() {
        let menu = [
            MenuAsset { expected_return: 0.02, weight: 0.06, cap: None },
            MenuAsset { expected_return: 0.1, weight: 0.232, cap: Some(2.0) },
        ];
        let a = greedy_risk_neutral(&menu, 1.0);
        assert_eq!(a.amounts[1], 2.0);
        assert!((a.amounts[0] - (1.0 - 2.0 * 0.232) / 0.06).abs() < 1e-12);
        assert_eq!(a.cut, Some(0));
    }

    #[test]
    fn greedy_zero_budget_and_ties() {
        let menu = [
            MenuAsset { expected_return: 0.1, weight: 0.1, cap: None },
            MenuAsset { expected_return: 0.1, weight: 0.1, cap: None },
        ];
        assert!(greedy_risk_neutral(&menu, 0.0).amounts.iter().all(|&v| v == 0.0));
        let a = greedy_risk_neutral(&menu, 1.0);
        assert_eq!(a.amounts, vec![10.0, 0.0]);
    }

    #[test]
    fn kkt_check_compares_per_unit_capital() {
        assert!(!kkt_interconnection_check(0.01, 0.01, 0.06, 0.464));
        assert!(kkt_interconnection_check(0.001, 0.01, 0.06, 0.232));
    }
}
