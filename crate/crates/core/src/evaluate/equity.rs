use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::domain::NeighborhoodStats;
use crate::util::{mean, std_dev};

pub const MIN_NEIGHBORHOODS: usize = 4;

/// `y ~ intercept + beta_income * income_z + beta_pct_black * black_z`,
/// with both covariates z-scored over the sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EquityFit {
    pub intercept: f64,
    pub beta_income: f64,
    pub beta_pct_black: f64,
    pub r_squared: f64,
    pub n: usize,
}

fn zscore(xs: &[f64]) -> Result<Vec<f64>, EvalError> {
    let m = mean(xs);
    let s = std_dev(xs);
    if !(s > 1e-12 * m.abs().max(1.0)) {
        return Err(EvalError::SingularDesign("a covariate is constant".into()));
    }
    Ok(xs.iter().map(|x| (x - m) / s).collect())
}

/// Solves the 3x3 system by Gaussian elimination with partial pivoting.
fn solve3(mut a: [[f64; 3]; 3], mut b: [f64; 3]) -> Result<[f64; 3], EvalError> {
    let scale = a.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
    for col in 0..3 {
        let piv = (col..3)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .expect("nonempty range");
        if a[piv][col].abs() <= 1e-10 * scale {
            return Err(EvalError::SingularDesign("covariates are collinear".into()));
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for row in col + 1..3 {
            let f = a[row][col] / a[col][col];
            for k in col..3 {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = [0.0; 3];
    for row in (0..3).rev() {
        let tail: f64 = (row + 1..3).map(|k| a[row][k] * x[k]).sum();
        x[row] = (b[row] - tail) / a[row][row];
    }
    Ok(x)
}

/// OLS through the normal equations on standardized covariates.
pub fn ols_standardized(income: &[f64], pct_black: &[f64], y: &[f64]) -> Result<EquityFit, EvalError> {
    let n = y.len();
    if income.len() != n || pct_black.len() != n {
        return Err(EvalError::SingularDesign("covariate and response lengths differ".into()));
    }
    if n < MIN_NEIGHBORHOODS {
        return Err(EvalError::TooFewNeighborhoods(n));
    }
    let x1 = zscore(income)?;
    let x2 = zscore(pct_black)?;
    let mut xtx = [[0.0; 3]; 3];
    let mut xty = [0.0; 3];
    for i in 0..n {
        let row = [1.0, x1[i], x2[i]];
        for r in 0..3 {
            for c in 0..3 {
                xtx[r][c] += row[r] * row[c];
            }
            xty[r] += row[r] * y[i];
        }
    }
    let beta = solve3(xtx, xty)?;
    let ybar = mean(y);
    let (mut ss_res, mut ss_tot) = (0.0, 0.0);
    for i in 0..n {
        let fit = beta[0] + beta[1] * x1[i] + beta[2] * x2[i];
        ss_res += (y[i] - fit).powi(2);
        ss_tot += (y[i] - ybar).powi(2);
    }
    let r_squared = if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 1.0 };
    Ok(EquityFit {
        intercept: beta[0],
        beta_income: beta[1],
        beta_pct_black: beta[2],
        r_squared,
        n,
    })
}

/// 311 call volume regressed on neighborhood income and Black population share.
pub fn equity_probe(stats: &BTreeMap<String, NeighborhoodStats>) -> Result<EquityFit, EvalError> {
    let income: Vec<f64> = stats.values().map(|s| s.median_income).collect();
    let black: Vec<f64> = stats.values().map(|s| s.pct_black).collect();
    let calls: Vec<f64> = stats.values().map(|s| s.call_311_count as f64).collect();
    ols_standardized(&income, &black, &calls)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn too_few_neighborhoods() {
        let v = [1.0, 2.0, 3.0];
        assert!(matches!(
            ols_standardized(&v, &[3.0, 1.0, 2.0], &v),
            Err(EvalError::TooFewNeighborhoods(3))
        ));
    }

    #[test]
    fn collinear_covariates_are_singular() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0];
        let b = [2.0, 4.0, 6.0, 8.0, 10.0];
        assert!(matches!(ols_standardized(&a, &b, &a), Err(EvalError::SingularDesign(_))));
    }
}
