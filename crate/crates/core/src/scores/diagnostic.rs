//! Check of the factor-covariance assumption `(1/nJ) sum_i F_i F_i^T ~ I`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EntryTest {
    pub row: usize,
    pub col: usize,
    pub estimate: f64,
    /// Null value: 1 on the diagonal, 0 off it.
    pub null: f64,
    pub t_stat: f64,
    pub p_value: f64,
    pub significant: bool,
    pub significant_bonferroni: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiagnosticReport {
    /// Row-major `K x K` average factor covariance.
    pub h_hat: Vec<Vec<f64>>,
    pub n_subjects: usize,
    pub n_time: usize,
    pub alpha: f64,
    /// Upper-triangle entries (`K (K + 1) / 2` tests).
    pub tests: Vec<EntryTest>,
}

impl DiagnosticReport {
    pub fn h_matrix(&self) -> DMatrix<f64> {
        let k = self.h_hat.len();
        DMatrix::from_fn(k, k, |i, j| self.h_hat[i][j])
    }

    pub fn n_flagged(&self) -> usize {
        self.tests.iter().filter(|t| t.significant_bonferroni).count()
    }
}

/// Average factor covariance with subject-level two-sided one-sample t-tests of
/// `h_i(k, k') = J^{-1} (F_i F_i^T)_{kk'}` against the identity.
pub fn factor_cov_diagnostic(scores: &[DMatrix<f64>]) -> Result<DiagnosticReport> {
    let n = scores.len();
    if n < 2 {
        return Err(invalid("the diagnostic needs at least two subjects"));
    }
    let (k, j) = scores[0].shape();
    if scores.iter().any(|f| f.shape() != (k, j)) {
        return Err(Error::Shape("factor score matrices differ in shape".into()));
    }
    let per: Vec<DMatrix<f64>> = scores.iter().map(|f| f * f.transpose() / j as f64).collect();
    let mut h = DMatrix::zeros(k, k);
    for m in &per {
        h += m;
    }
    h /= n as f64;
    let h = (&h + h.transpose()) * 0.5;
    let alpha = 0.05;
    let m_tests = (k * (k + 1) / 2) as f64;
    let dist = StudentsT::new(0.0, 1.0, (n - 1) as f64).map_err(|e| Error::Numerical(e.to_string()))?;
    let mut tests = Vec::new();
    for r in 0..k {
        for c in r..k {
            let null = if r == c { 1.0 } else { 0.0 };
            let xs: Vec<f64> = per.iter().map(|m| m[(r, c)]).collect();
            let mean = xs.iter().sum::<f64>() / n as f64;
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            let se = (var / n as f64).sqrt();
            let diff = mean - null;
            let (t_stat, p_value) = if se > 0.0 {
                let t = diff / se;
                (t, 2.0 * dist.sf(t.abs()))
            } else if diff.abs() <= 1e-12 * (1.0 + null) {
                (0.0, 1.0)
            } else {
                (diff.signum() * f64::INFINITY, 0.0)
            };
            tests.push(EntryTest {
                row: r,
                col: c,
                estimate: h[(r, c)],
                null,
                t_stat,
                p_value,
                significant: p_value < alpha,
                significant_bonferroni: p_value * m_tests < alpha,
            });
        }
    }
    Ok(DiagnosticReport {
        h_hat: (0..k).map(|r| (0..k).map(|c| h[(r, c)]).collect()).collect(),
        n_subjects: n,
        n_time: j,
        alpha,
        tests,
    })
}
