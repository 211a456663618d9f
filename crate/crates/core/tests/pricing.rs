use netform::domain::Institution;
use netform::pricing::{debt_attractive_rn, expected_claims, market_values, share_attractive_rn};
use netform::returns::LogNormal;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};

fn bank(ax: f64, cash: f64, debt: f64, rate: f64) -> Institution {
    Institution {
        id: 0,
        external_assets: ax,
        cash,
        nominal_debt: debt,
        equity_book: ax + cash - debt,
        maturity: 0.0,
        debt_rate: rate,
        shares_held: vec![],
        debt_held: vec![],
    }
}

fn phi(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Composite Simpson rule on [a, b] with `n` (even) panels.
fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        s += w * f(a + i as f64 * h);
    }
    s * h / 3.0
}

/// E[K], E[L] by integrating the payoffs against the normal density, split
/// at the default threshold so each piece is smooth.
fn quadrature(inst: &Institution, law: LogNormal, kappa: f64, rf: f64) -> (f64, f64) {
    let due = inst.nominal_debt * (1.0 + inst.debt_rate);
    let cash = kappa * inst.cash * (1.0 + rf);
    let assets = |z: f64| kappa * inst.external_assets * (law.log_mean + law.log_vol * z).exp() + cash;
    let lo = -12.0;
    let hi = 12.0;
    let kink = if kappa * inst.external_assets > 0.0 && due > cash {
        (((due - cash) / (kappa * inst.external_assets)).ln() - law.log_mean) / law.log_vol
    } else {
        lo
    }
    .clamp(lo, hi);
    let eq = |z: f64| (assets(z) - due).max(0.0) * phi(z);
    let dt = |z: f64| assets(z).min(due) * phi(z);
    let n = 20_000;
    (
        simpson(eq, lo, kink, n) + simpson(eq, kink, hi, n),
        simpson(dt, lo, kink, n) + simpson(dt, kink, hi, n),
    )
}

#[test]
fn closed_form_matches_quadrature() {
    let cases = [
        (10.0, 0.0, 9.0, 0.0, 0.0094, 0.0328, 1.0, 0.0),
        (10.0, 0.5, 9.0, 0.02, 0.0094, 0.0328, 1.0, 0.01),
        (5.0, 0.0, 4.9, 0.0, 0.0, 0.2, 1.3, 0.0),
        (1.0, 2.0, 2.5, 0.05, -0.05, 0.4, 1.0, 0.02),
        (8.0, 0.0, 1.0, 0.0, 0.01, 0.1, 1.0, 0.0),
    ];
    for (ax, cash, debt, rd, mu, sigma, kappa, rf) in cases {
        let inst = bank(ax, cash, debt, rd);
        let law = LogNormal { log_mean: mu, log_vol: sigma };
        let c = expected_claims(&inst, law, kappa, rf);
        let (qe, qd) = quadrature(&inst, law, kappa, rf);
        assert!((c.equity - qe).abs() <= 1e-9 * (1.0 + qe), "equity {} vs {qe}", c.equity);
        assert!((c.debt - qd).abs() <= 1e-9 * (1.0 + qd), "debt {} vs {qd}", c.debt);
    }
}

#[test]
fn closed_form_within_monte_carlo_error() {
    let inst = bank(10.0, 0.3, 9.5, 0.01);
    let law = LogNormal { log_mean: 0.005, log_vol: 0.08 };
    let c = expected_claims(&inst, law, 1.1, 0.01);
    let mut rng = ChaCha20Rng::seed_from_u64(99);
    let n = 400_000;
    let due = 9.5 * 1.01;
    let (mut se, mut se2, mut sd, mut sd2) = (0.0, 0.0, 0.0, 0.0);
    for _ in 0..n {
        let z: f64 = StandardNormal.sample(&mut rng);
        let a = 1.1 * (10.0 * (law.log_mean + law.log_vol * z).exp() + 0.3 * 1.01);
        let k = (a - due).max(0.0);
        let l = a.min(due);
        se += k;
        se2 += k * k;
        sd += l;
        sd2 += l * l;
    }
    let nf = n as f64;
    let (me, md) = (se / nf, sd / nf);
    let err_e = ((se2 / nf - me * me) / nf).sqrt();
    let err_d = ((sd2 / nf - md * md) / nf).sqrt();
    assert!((c.equity - me).abs() < 4.0 * err_e, "{} vs {me} ± {err_e}", c.equity);
    assert!((c.debt - md).abs() < 4.0 * err_d, "{} vs {md} ± {err_d}", c.debt);
}

#[test]
fn degenerate_cases() {
    let law = LogNormal { log_mean: 0.01, log_vol: 0.0 };
    let c = expected_claims(&bank(10.0, 0.0, 9.0, 0.0), law, 1.0, 0.0);
    assert!((c.equity - (10.0 * 0.01f64.exp() - 9.0)).abs() < 1e-14);
    assert_eq!(c.debt, 9.0);
    // Cash alone covers the debt.
    let law = LogNormal { log_mean: 0.0, log_vol: 0.3 };
    let c = expected_claims(&bank(4.0, 10.0, 5.0, 0.0), law, 1.0, 0.0);
    assert_eq!(c.debt, 5.0);
    assert!((c.equity - (4.0 * law.mean_gross() + 5.0)).abs() < 1e-12);
    // No risky assets.
    let c = expected_claims(&bank(0.0, 1.0, 3.0, 0.0), law, 1.0, 0.0);
    assert_eq!((c.equity, c.debt), (0.0, 1.0));
}

#[test]
fn risk_neutral_margins_vanish_at_risk_free_funding() {
    // Prices are expectations discounted at r_rf, so a holder funding at
    // exactly r_rf sees zero margin and one funding above it sees a loss.
    let law = LogNormal { log_mean: 0.01, log_vol: 0.05 };
    let issuer = market_values(&bank(10.0, 0.0, 9.0, 0.0), law, 1.0, 0.02);
    let holder = bank(5.0, 0.0, 4.0, 0.02);
    assert!(share_attractive_rn(&holder, &issuer).margin.abs() < 1e-12);
    assert!(debt_attractive_rn(&holder, &issuer).margin.abs() < 1e-12);
    let costly = bank(5.0, 0.0, 4.0, 0.05);
    assert!(!share_attractive_rn(&costly, &issuer).attractive);
    assert!(!debt_attractive_rn(&costly, &issuer).attractive);
}

proptest! {
    #[test]
    fn expected_claims_conserve_asset_value(
        ax in 0.1f64..50.0,
        cash in 0.0f64..5.0,
        lev in 0.0f64..1.5,
        rd in 0.0f64..0.1,
        mu in -0.1f64..0.1,
        sigma in 0.001f64..0.8,
        kappa in 1.0f64..2.0,
        rf in 0.0f64..0.05,
    ) {
        let inst = bank(ax, cash, lev * (ax + cash), rd);
        let law = LogNormal { log_mean: mu, log_vol: sigma };
        let c = expected_claims(&inst, law, kappa, rf);
        let total = kappa * (ax * law.mean_gross() + cash * (1.0 + rf));
        prop_assert!((c.equity + c.debt - total).abs() <= 1e-10 * total);
        prop_assert!(c.equity >= 0.0);
        prop_assert!(c.debt <= inst.nominal_debt * (1.0 + rd) * (1.0 + 1e-12));
    }

    #[test]
    fn equity_rises_and_debt_falls_with_volatility(
        ax in 1.0f64..20.0,
        lev in 0.5f64..1.2,
        s1 in 0.01f64..0.5,
        ds in 0.001f64..0.3,
    ) {
        let inst = bank(ax, 0.0, lev * ax, 0.0);
        let lo = expected_claims(&inst, LogNormal { log_mean: 0.0, log_vol: s1 }, 1.0, 0.0);
        let hi = expected_claims(&inst, LogNormal { log_mean: -ds * (2.0 * s1 + ds) / 2.0, log_vol: s1 + ds }, 1.0, 0.0);
        // Same mean gross return, wider spread: the call gains, the debt loses.
        prop_assert!(hi.equity >= lo.equity - 1e-12 * ax);
        prop_assert!(hi.debt <= lo.debt + 1e-12 * ax);
    }
}
