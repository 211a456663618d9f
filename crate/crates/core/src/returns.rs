//! Lognormal return law: calibration from (mean return, default probability,
//! leverage) and reproducible correlated sampling.

use crate::domain::{ModelError, ReturnModel};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use libm::erfc;
use statrs::function::erf::erfc_inv;

/// Net income on total assets of a bank that pays nothing on its debt.
pub const BASE_NET_RETURN: f64 = 0.01;

/// Draws generated from one RNG stream. Fixed so that output does not depend
/// on how blocks are spread over threads.
pub const BLOCK_ROWS: usize = 1024;

/// Standard normal CDF.
pub fn norm_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// Standard normal quantile.
pub fn norm_ppf(p: f64) -> f64 {
    -std::f64::consts::SQRT_2 * erfc_inv(2.0 * p)
}

pub fn norm_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalibrationTarget {
    pub mean_net_return: f64,
    pub prob_default: f64,
    pub leverage_ratio: f64,
}

/// Marginal law of a gross return: log G ~ N(log_mean, log_vol²).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogNormal {
    pub log_mean: f64,
    pub log_vol: f64,
}

impl LogNormal {
    pub fn mean_gross(&self) -> f64 {
        (self.log_mean + 0.5 * self.log_vol * self.log_vol).exp()
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CalibrationError {
    #[error("prob_default = {0} outside (0, 0.5]")]
    Probability(f64),
    #[error("leverage_ratio = {0} outside (0, 1)")]
    Leverage(f64),
    #[error("mean_net_return = {0} must exceed -1")]
    MeanReturn(f64),
    #[error(
        "calibration infeasible: discriminant {discriminant} <= 0 for prob_default = {prob_default}, \
         leverage_ratio = {leverage_ratio}, mean_net_return = {mean_net_return}"
    )]
    Discriminant { discriminant: f64, prob_default: f64, leverage_ratio: f64, mean_net_return: f64 },
}

/// Solves for the lognormal law whose mean gross return is 1 + m and under
/// which a bank with debt/assets ratio L/A defaults with probability p.
pub fn calibrate(target: CalibrationTarget) -> Result<LogNormal, CalibrationError> {
    let CalibrationTarget { mean_net_return: m, prob_default: p, leverage_ratio: lev } = target;
    if !(p > 0.0 && p <= 0.5) {
        return Err(CalibrationError::Probability(p));
    }
    if !(lev > 0.0 && lev < 1.0) {
        return Err(CalibrationError::Leverage(lev));
    }
    if !(1.0 + m > 0.0) {
        return Err(CalibrationError::MeanReturn(m));
    }
    let q = norm_ppf(p);
    let discriminant = q * q - 2.0 * (lev / (1.0 + m)).ln();
    if !(discriminant > 0.0) {
        return Err(CalibrationError::Discriminant {
            discriminant,
            prob_default: p,
            leverage_ratio: lev,
            mean_net_return: m,
        });
    }
    // Smaller root is negative.
    let log_vol = q + discriminant.sqrt();
    if !(log_vol > 0.0) {
        return Err(CalibrationError::Discriminant {
            discriminant,
            prob_default: p,
            leverage_ratio: lev,
            mean_net_return: m,
        });
    }
    Ok(LogNormal { log_mean: (1.0 + m).ln() - 0.5 * log_vol * log_vol, log_vol })
}

/// Default probability and mean net return implied by a lognormal law for a
/// bank with the given debt/assets ratio.
pub fn implied_target(cal: LogNormal, leverage_ratio: f64) -> (f64, f64) {
    let LogNormal { log_mean: mu, log_vol: s } = cal;
    let pd = norm_cdf((leverage_ratio.ln() - mu) / s);
    let m = (mu + 0.5 * s * s).exp_m1();
    (pd, m)
}

/// Net return on assets earned by a bank paying `debt_rate` at leverage `leverage`.
pub fn expected_net_return(debt_rate: f64, leverage: f64) -> f64 {
    expected_net_return_with_base(debt_rate, leverage, BASE_NET_RETURN)
}

pub fn expected_net_return_with_base(debt_rate: f64, leverage: f64, base: f64) -> f64 {
    base + debt_rate * leverage
}

/// Gross returns, `rows` draws of `cols` assets, stored column by column.
#[derive(Debug, Clone, PartialEq)]
pub struct DrawMatrix {
    rows: usize,
    columns: Vec<Vec<f64>>,
}

impl DrawMatrix {
    pub fn from_columns(columns: Vec<Vec<f64>>) -> Self {
        let rows = columns.first().map_or(0, Vec::len);
        assert!(columns.iter().all(|c| c.len() == rows), "ragged draw columns");
        DrawMatrix { rows, columns }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.columns.len()
    }

    pub fn column(&self, i: usize) -> &[f64] {
        &self.columns[i]
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.columns[col][row]
    }

    pub fn row(&self, row: usize) -> Vec<f64> {
        self.columns.iter().map(|c| c[row]).collect()
    }
}

/// Samples `n_draws` correlated gross returns exp(μ + σ·z).
///
/// Block `b` of `BLOCK_ROWS` rows is generated from ChaCha stream `b` under
/// `seed`, so the result is bit-identical however blocks are scheduled.
pub fn sample_gross_returns(model: &ReturnModel, n_draws: usize, seed: u64) -> Result<DrawMatrix, ModelError> {
    let factor = model.correlation_factor()?;
    let n = model.dim();
    let n_blocks = n_draws.div_ceil(BLOCK_ROWS);
    let blocks: Vec<Vec<f64>> = (0..n_blocks)
        .into_par_iter()
        .map(|b| {
            let rows = BLOCK_ROWS.min(n_draws - b * BLOCK_ROWS);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(b as u64);
            let mut z = vec![0.0; n];
            let mut out = Vec::with_capacity(rows * n);
            for _ in 0..rows {
                for zi in z.iter_mut() {
                    *zi = StandardNormal.sample(&mut rng);
                }
                for i in 0..n {
                    let y: f64 = (0..=i).map(|k| factor[i][k] * z[k]).sum();
                    out.push((model.log_mean[i] + model.log_vol[i] * y).exp());
                }
            }
            out
        })
        .collect();
    let mut columns = vec![Vec::with_capacity(n_draws); n];
    for block in &blocks {
        for row in block.chunks_exact(n.max(1)) {
            for (col, &v) in columns.iter_mut().zip(row) {
                col.push(v);
            }
        }
    }
    Ok(DrawMatrix { rows: n_draws, columns })
}
