use netform::domain::{validate_network, BalanceSheet, Network, RegulatoryPolicy, ReturnModel};
use netform::formation::{form_network, interbank_ratio, BankSetup, FormationConfig, FormationError};
use netform::objective::FundingRate;
use netform::optimizer::OptimizeSpec;
use netform::returns::{calibrate, CalibrationTarget};
use netform::welfare::{evaluate_welfare, WelfareError, WelfareVariant};
use proptest::prelude::*;

fn two_banks(rho: f64, k: (f64, f64, f64), draws: usize) -> FormationConfig {
    let law = calibrate(CalibrationTarget { mean_net_return: 0.01, prob_default: 0.001, leverage_ratio: 0.912 }).unwrap();
    let model = ReturnModel::symmetric_pair(law.log_mean, law.log_vol, rho).unwrap();
    let mut spec = OptimizeSpec::new(RegulatoryPolicy::uniform(2, k.0, k.1, k.2, 0.1));
    spec.draw_count = draws;
    spec.multi_start = 2;
    spec.seed = 3;
    let bank = BankSetup { equity: 1.0, funding: FundingRate::Fixed(0.0) };
    let mut cfg = FormationConfig::new(vec![bank.clone(), bank], model, spec);
    cfg.max_rounds = 8;
    cfg
}

#[test]
fn formation_is_deterministic() {
    let cfg = two_banks(-0.9, (0.06, 0.232, 0.016), 5000);
    let a = form_network(&cfg).unwrap();
    let b = form_network(&cfg).unwrap();
    assert_eq!(a, b);
}

#[test]
fn zero_float_caps_give_autarky_in_two_rounds() {
    let mut cfg = two_banks(-0.9, (0.06, 0.232, 0.016), 5000);
    cfg.spec.policy.float_cap_shares = vec![0.0; 2];
    cfg.spec.policy.float_cap_debt = vec![0.0; 2];
    let r = form_network(&cfg).unwrap();
    assert!(r.converged);
    assert_eq!(r.rounds, 2);
    for i in 0..2 {
        assert!((r.network.banks[i].external_assets - 1.0 / 0.06).abs() < 1e-6);
        assert_eq!(interbank_ratio(&r.network, &r.prices, i), 0.0);
    }
}

#[test]
fn strict_regulation_gives_autarky() {
    let r = form_network(&two_banks(-0.9, (0.12, 0.464, 0.032), 5000)).unwrap();
    assert!(r.converged);
    for i in 0..2 {
        let row: f64 = r.network.share_matrix[i].iter().chain(&r.network.debt_matrix[i]).sum();
        assert!(row < 1e-3, "bank {i} holds {row}");
    }
}

#[test]
fn formed_network_is_valid_and_balanced() {
    let r = form_network(&two_banks(-0.9, (0.06, 0.232, 0.016), 5000)).unwrap();
    assert!(validate_network(&r.network).is_empty());
    // Prices move by less than the convergence tolerance after a bank's last
    // step, so its budget identity holds to that order.
    let scale = r.network.banks[0].external_assets;
    assert!(r.consistency_residual < 0.01 * 0.01 * scale, "{}", r.consistency_residual);
    assert_eq!(r.round_changes.len(), r.rounds - 1);
    // Steps come in playing order, one per bank per round.
    assert_eq!(r.trajectory.len(), 2 * r.rounds);
    for (s, rec) in r.trajectory.iter().enumerate() {
        assert_eq!(rec.step, s + 1);
        assert_eq!(rec.bank, s % 2);
        assert_eq!(rec.round, s / 2 + 1);
    }
    // The first mover has nobody to trade with.
    assert!(r.trajectory[0].quotes.is_empty());
}

#[test]
fn bad_order_is_rejected() {
    let mut cfg = two_banks(-0.3, (0.06, 0.232, 0.016), 1000);
    cfg.order = vec![0, 0];
    assert!(matches!(form_network(&cfg), Err(FormationError::Setup(_))));
}

fn sheet(ax: f64, debt: f64) -> BalanceSheet {
    BalanceSheet { external_assets: ax, cash: 0.0, nominal_debt: debt, equity_book: ax - debt, maturity: 0.0, debt_rate: 0.0 }
}

/// Bank 0 loses 10% and defaults, bank 1 holds half of bank 0's debt.
fn stressed_pair() -> (Network, ReturnModel) {
    let net = Network {
        banks: vec![sheet(10.0, 9.5), sheet(10.0, 9.0)],
        share_matrix: vec![vec![0.0; 2]; 2],
        debt_matrix: vec![vec![0.0, 0.0], vec![0.5, 0.0]],
        risk_free_rate: 0.0,
    };
    (net, ReturnModel::degenerate(vec![0.9f64.ln(), 0.0]))
}

#[test]
fn welfare_by_hand() {
    let (net, model) = stressed_pair();
    let g0 = 0.9f64.ln().exp();
    let shortfall = 9.5 - 10.0 * g0;
    for c in [0.0, 0.3, 0.6] {
        let r = evaluate_welfare(&net, &model, c, 100, 1, WelfareVariant::Formula).unwrap();
        let expect = [10.0 * g0 - c * shortfall, 10.0];
        for i in 0..2 {
            assert!((r.contributions[i].mean - expect[i]).abs() < 1e-12);
        }
        assert!((r.welfare.mean - (expect[0] + expect[1]) / 20.0).abs() < 1e-12);
        assert_eq!(r.default_frequency, 1.0);
        let s = evaluate_welfare(&net, &model, c, 100, 1, WelfareVariant::SolventOnly).unwrap();
        assert!((s.contributions[0].mean + c * shortfall).abs() < 1e-12);
        assert!((s.contributions[1].mean - 10.0).abs() < 1e-12);
    }
}

#[test]
fn welfare_rejects_bad_inputs() {
    let (net, model) = stressed_pair();
    assert!(matches!(evaluate_welfare(&net, &model, 0.7, 10, 1, WelfareVariant::Formula), Err(WelfareError::DepositCost(_))));
    let wide = ReturnModel::degenerate(vec![0.0; 3]);
    assert!(matches!(evaluate_welfare(&net, &wide, 0.0, 10, 1, WelfareVariant::Formula), Err(WelfareError::Dimension { .. })));
    let mut bad = net.clone();
    bad.debt_matrix[1][0] = 1.0;
    assert!(matches!(evaluate_welfare(&bad, &model, 0.0, 10, 1, WelfareVariant::Formula), Err(WelfareError::Network(_))));
}

fn risky_pair(pi: f64, gamma: f64, lev: f64) -> (Network, ReturnModel) {
    let net = Network {
        banks: vec![sheet(10.0, 10.0 * lev), sheet(12.0, 12.0 * lev)],
        share_matrix: vec![vec![0.0, pi], vec![pi / 2.0, 0.0]],
        debt_matrix: vec![vec![0.0, gamma], vec![0.0, 0.0]],
        risk_free_rate: 0.0,
    };
    (net, ReturnModel::symmetric_pair(0.0, 0.15, -0.4).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn welfare_falls_with_deposit_cost(pi in 0.0f64..0.9, gamma in 0.0f64..0.9, lev in 0.7f64..1.0, c in 0.0f64..0.5, dc in 0.0f64..0.1) {
        let (net, model) = risky_pair(pi, gamma, lev);
        let a = evaluate_welfare(&net, &model, c, 2000, 9, WelfareVariant::Formula).unwrap();
        let b = evaluate_welfare(&net, &model, c + dc, 2000, 9, WelfareVariant::Formula).unwrap();
        prop_assert!(b.welfare.mean <= a.welfare.mean + 1e-15);
        let s = evaluate_welfare(&net, &model, c, 2000, 9, WelfareVariant::SolventOnly).unwrap();
        prop_assert!(s.welfare.mean <= a.welfare.mean + 1e-15);
    }

    #[test]
    fn without_defaults_welfare_is_mean_gross_return(pi in 0.0f64..0.9, c in 0.0f64..0.6) {
        // Tiny leverage: nobody can default, so c and the variant drop out.
        let (net, model) = risky_pair(pi, 0.0, 0.01);
        let a = evaluate_welfare(&net, &model, c, 3000, 4, WelfareVariant::Formula).unwrap();
        let b = evaluate_welfare(&net, &model, 0.0, 3000, 4, WelfareVariant::SolventOnly).unwrap();
        prop_assert_eq!(a.default_frequency, 0.0);
        prop_assert!((a.welfare.mean - b.welfare.mean).abs() < 1e-12);
        let draws = netform::returns::sample_gross_returns(&model, 3000, 4).unwrap();
        let direct: f64 = (0..3000).map(|k| (10.0 * draws.get(k, 0) + 12.0 * draws.get(k, 1)) / 22.0).sum::<f64>() / 3000.0;
        prop_assert!((a.welfare.mean - direct).abs() < 1e-12);
    }
}
