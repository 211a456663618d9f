use netform::domain::ReturnModel;
use netform::returns::{calibrate, implied_target, norm_cdf, sample_gross_returns, CalibrationTarget};
use proptest::prelude::*;

/// Volatility solving P(A·G < L) = p by bisection, with E[G] = 1 + m. The
/// default probability rises monotonically with the volatility when the
/// leverage is below 1 + m.
fn bisect_vol(t: CalibrationTarget) -> f64 {
    let c = (t.leverage_ratio / (1.0 + t.mean_net_return)).ln();
    let pd = |s: f64| norm_cdf((c + 0.5 * s * s) / s);
    let (mut lo, mut hi) = (1e-9, 50.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if pd(mid) > t.prob_default {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    0.5 * (lo + hi)
}

#[test]
fn calibration_agrees_with_bisection() {
    for (m, p, lev) in [(0.01, 0.001, 0.95), (0.01, 0.001, 0.912), (0.03, 0.01, 0.9), (0.0, 0.05, 0.8)] {
        let t = CalibrationTarget { mean_net_return: m, prob_default: p, leverage_ratio: lev };
        let law = calibrate(t).unwrap();
        let s = bisect_vol(t);
        assert!((law.log_vol - s).abs() < 1e-10, "{} vs {s}", law.log_vol);
        assert!((law.log_mean - ((1.0 + m).ln() - 0.5 * s * s)).abs() < 1e-10);
    }
}

#[test]
fn reference_calibration() {
    // m = 1%, p = 0.1%, leverage 95%: hand-evaluated closed form.
    let law = calibrate(CalibrationTarget { mean_net_return: 0.01, prob_default: 0.001, leverage_ratio: 0.95 }).unwrap();
    let z = -3.090_232_306_167_813_5_f64;
    let c = (0.95f64 / 1.01).ln();
    let sigma = z + (z * z - 2.0 * c).sqrt();
    assert!((law.log_vol - sigma).abs() < 1e-13);
    assert!((law.mean_gross() - 1.01).abs() < 1e-14);
}

proptest! {
    #[test]
    fn calibration_round_trip(m in -0.02f64..0.08, p in 1e-5f64..0.3, lev in 0.5f64..0.97) {
        let t = CalibrationTarget { mean_net_return: m, prob_default: p, leverage_ratio: lev };
        prop_assume!(lev < 1.0 + m);
        let law = calibrate(t).unwrap();
        let (pd, mean) = implied_target(law, lev);
        prop_assert!((pd - p).abs() <= 1e-12 * p.max(1e-3));
        prop_assert!((mean - m).abs() <= 1e-12);
    }

    #[test]
    fn volatility_rises_with_default_probability(m in 0.0f64..0.05, p in 1e-5f64..0.2, dp in 1e-6f64..0.1, lev in 0.5f64..0.97) {
        let a = calibrate(CalibrationTarget { mean_net_return: m, prob_default: p, leverage_ratio: lev }).unwrap();
        let b = calibrate(CalibrationTarget { mean_net_return: m, prob_default: p + dp, leverage_ratio: lev }).unwrap();
        prop_assert!(b.log_vol > a.log_vol);
    }
}

fn std_lognormal_cdf(x: f64, mu: f64, sigma: f64) -> f64 {
    norm_cdf((x.ln() - mu) / sigma)
}

/// Two-sided KS statistic of a sample against a continuous CDF.
fn ks_statistic(mut xs: Vec<f64>, cdf: impl Fn(f64) -> f64) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    xs.iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}

#[test]
fn marginals_pass_kolmogorov_smirnov() {
    let model = ReturnModel::new(vec![0.01, -0.02], vec![0.05, 0.3], vec![vec![1.0, -0.6], vec![-0.6, 1.0]]).unwrap();
    let n = 100_000;
    let d = sample_gross_returns(&model, n, 5).unwrap();
    // 1% critical value is 1.628/√n.
    let crit = 1.628 / (n as f64).sqrt();
    for i in 0..2 {
        let ks = ks_statistic(d.column(i).to_vec(), |x| std_lognormal_cdf(x, model.log_mean[i], model.log_vol[i]));
        assert!(ks < crit, "column {i}: D = {ks} >= {crit}");
    }
}

#[test]
fn log_returns_have_target_correlation() {
    for rho in [-0.9, -0.3, 0.0, 0.7] {
        let model = ReturnModel::symmetric_pair(0.0, 0.1, rho).unwrap();
        let n = 50_000;
        let d = sample_gross_returns(&model, n, 11).unwrap();
        let x: Vec<f64> = d.column(0).iter().map(|g| g.ln()).collect();
        let y: Vec<f64> = d.column(1).iter().map(|g| g.ln()).collect();
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let (mx, my) = (mean(&x), mean(&y));
        let cov: f64 = x.iter().zip(&y).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>();
        let vx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
        let vy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
        let r = cov / (vx * vy).sqrt();
        // Standard error of a sample correlation ≈ (1 − ρ²)/√n.
        let se = (1.0 - rho * rho) / (n as f64).sqrt();
        assert!((r - rho).abs() < 5.0 * se + 1e-3, "rho {rho}: sample {r}");
    }
}

#[test]
fn longer_samples_extend_shorter_ones() {
    let model = ReturnModel::symmetric_pair(0.01, 0.2, -0.5).unwrap();
    let short = sample_gross_returns(&model, 1500, 3).unwrap();
    let long = sample_gross_returns(&model, 5000, 3).unwrap();
    for i in 0..2 {
        assert_eq!(short.column(i), &long.column(i)[..1500]);
    }
    let other = sample_gross_returns(&model, 1500, 4).unwrap();
    assert_ne!(short.column(0), other.column(0));
}

#[test]
fn perfect_correlation_is_accepted() {
    let model = ReturnModel::symmetric_pair(0.0, 0.1, 1.0).unwrap();
    let d = sample_gross_returns(&model, 200, 1).unwrap();
    for k in 0..200 {
        assert!((d.get(k, 0) - d.get(k, 1)).abs() < 1e-12);
    }
}
