//! Subject-level factor curves from fixed loadings: penalized function-on-scalar
//! regression (FOSR), the pointwise least-squares baseline (PWLS), spatially
//! blocked cross-validation of the roughness weight, and a diagnostic for the
//! "uncorrelated, unit variance" factor assumption.

pub mod basis;
pub mod diagnostic;

use std::ops::AddAssign;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::grid::SpatialGrid;
use crate::io::ScanTensor;

pub use basis::{build_basis, default_basis_size, TemporalBasis};
pub use diagnostic::{factor_cov_diagnostic, DiagnosticReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreMethod {
    Fosr,
    Pwls,
}

#[derive(Debug, Clone)]
pub struct FactorScores {
    /// `K x P` basis coefficients (FOSR only).
    pub a: Option<DMatrix<f64>>,
    /// `K x J` factor curves on the time grid.
    pub f_hat: DMatrix<f64>,
    pub gamma: Vec<f64>,
    pub method: ScoreMethod,
}

fn broadcast_gamma(gamma: &[f64], k: usize) -> Result<Vec<f64>> {
    let g = match gamma.len() {
        1 => vec![gamma[0]; k],
        n if n == k => gamma.to_vec(),
        n => return Err(invalid(format!("{n} roughness weights for {k} components"))),
    };
    if g.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
        return Err(invalid("roughness weights must be finite and nonnegative"));
    }
    Ok(g)
}

/// Cholesky factor, rejecting numerically singular matrices: a squared pivot below
/// `1e-12` of its diagonal entry means the column was cancelled to rounding level.
fn well_conditioned_cholesky(m: DMatrix<f64>) -> Option<Cholesky<f64, Dyn>> {
    let diag = m.diagonal();
    let chol = m.cholesky()?;
    let ok = chol
        .l_dirty()
        .diagonal()
        .iter()
        .zip(diag.iter())
        .all(|(&p, &a)| p * p > 1e-12 * a);
    ok.then_some(chol)
}

/// Factorized FOSR normal equations
/// `(E E^T (x) L^T L + D (x) diag(gamma)) vec(A) = vec(L^T X E^T)`,
/// reusable across subjects that share loadings.
pub struct FosrSolver {
    l: DMatrix<f64>,
    et: DMatrix<f64>,
    e: DMatrix<f64>,
    gamma: Vec<f64>,
    chol: Cholesky<f64, Dyn>,
}

impl FosrSolver {
    pub fn new(l: &DMatrix<f64>, basis: &TemporalBasis, gamma: &[f64]) -> Result<Self> {
        let k = l.ncols();
        let p = basis.size();
        let gamma = broadcast_gamma(gamma, k)?;
        let gram = l.transpose() * l;
        let eet = &basis.e * basis.e.transpose();
        let n = k * p;
        let mut sys = DMatrix::zeros(n, n);
        for p2 in 0..p {
            for p1 in 0..p {
                let (e, d) = (eet[(p1, p2)], basis.d[(p1, p2)]);
                for k2 in 0..k {
                    for k1 in 0..k {
                        let mut v = e * gram[(k1, k2)];
                        if k1 == k2 {
                            v += d * gamma[k1];
                        }
                        sys[(p1 * k + k1, p2 * k + k2)] = v;
                    }
                }
            }
        }
        let chol = well_conditioned_cholesky(sys).ok_or_else(|| {
            Error::Singular(
                "score system is singular: loadings are rank deficient; use a positive roughness weight".into(),
            )
        })?;
        Ok(Self {
            l: l.clone(),
            et: basis.e.transpose(),
            e: basis.e.clone(),
            gamma,
            chol,
        })
    }

    /// Coefficients and curves for one `M x J` data matrix.
    pub fn solve(&self, x: &DMatrix<f64>) -> Result<FactorScores> {
        if x.nrows() != self.l.nrows() || x.ncols() != self.e.ncols() {
            return Err(Error::Shape(format!(
                "scan is {}x{}, expected {}x{}",
                x.nrows(),
                x.ncols(),
                self.l.nrows(),
                self.e.ncols()
            )));
        }
        let k = self.l.ncols();
        let p = self.e.nrows();
        let rhs = self.l.transpose() * x * &self.et;
        let sol = self.chol.solve(&DVector::from_column_slice(rhs.as_slice()));
        let a = DMatrix::from_column_slice(k, p, sol.as_slice());
        let f_hat = &a * &self.e;
        Ok(FactorScores {
            a: Some(a),
            f_hat,
            gamma: self.gamma.clone(),
            method: ScoreMethod::Fosr,
        })
    }
}

/// FOSR scores for one subject.
pub fn fosr_scores(x: &DMatrix<f64>, l: &DMatrix<f64>, basis: &TemporalBasis, gamma: &[f64]) -> Result<FactorScores> {
    FosrSolver::new(l, basis, gamma)?.solve(x)
}

/// `1/2 ||X - L A E||^2 + 1/2 sum_k gamma_k (A D A^T)_kk`.
pub fn fosr_objective(x: &DMatrix<f64>, l: &DMatrix<f64>, basis: &TemporalBasis, gamma: &[f64], a: &DMatrix<f64>) -> f64 {
    let r = x - l * a * &basis.e;
    let ad = a * &basis.d;
    let pen: f64 = (0..a.nrows()).map(|k| gamma[k] * a.row(k).dot(&ad.row(k))).sum();
    0.5 * r.norm_squared() + 0.5 * pen
}

/// Gradient of [`fosr_objective`]: `-L^T X E^T + L^T L A E E^T + diag(gamma) A D`.
pub fn fosr_gradient(x: &DMatrix<f64>, l: &DMatrix<f64>, basis: &TemporalBasis, gamma: &[f64], a: &DMatrix<f64>) -> DMatrix<f64> {
    let e = &basis.e;
    let mut g = -(l.transpose() * x * e.transpose()) + l.transpose() * l * a * e * e.transpose();
    let ad = a * &basis.d;
    for k in 0..a.nrows() {
        let row = ad.row(k) * gamma[k];
        g.row_mut(k).add_assign(&row);
    }
    g
}

/// Pointwise least squares `F = (L^T L)^{-1} L^T X`.
pub fn pwls_scores(x: &DMatrix<f64>, l: &DMatrix<f64>) -> Result<FactorScores> {
    if x.nrows() != l.nrows() {
        return Err(Error::Shape(format!("scan has {} rows, loadings {}", x.nrows(), l.nrows())));
    }
    let chol = well_conditioned_cholesky(l.transpose() * l)
        .ok_or_else(|| Error::Singular("loadings are rank deficient".into()))?;
    Ok(FactorScores {
        a: None,
        f_hat: chol.solve(&(l.transpose() * x)),
        gamma: Vec::new(),
        method: ScoreMethod::Pwls,
    })
}

/// Score all subjects in parallel.
pub fn fosr_all(scans: &[ScanTensor], l: &DMatrix<f64>, basis: &TemporalBasis, gamma: &[f64]) -> Result<Vec<FactorScores>> {
    let solver = FosrSolver::new(l, basis, gamma)?;
    scans.par_iter().map(|s| solver.solve(&s.values)).collect()
}

pub fn pwls_all(scans: &[ScanTensor], l: &DMatrix<f64>) -> Result<Vec<FactorScores>> {
    scans.par_iter().map(|s| pwls_scores(&s.values, l)).collect()
}

/// Spatial blocks: split by the planes `x = 1/2` and `y = 1/2` (first two axes), giving
/// quadrants in 2-D and 3-D and halves in 1-D. Returns active positions per block.
pub fn spatial_blocks(grid: &SpatialGrid) -> Result<Vec<Vec<usize>>> {
    let axes = grid.ndim().min(2);
    let mut blocks = vec![Vec::new(); 1 << axes];
    for a in 0..grid.n_active() {
        let idx = grid.multi_index(a);
        let mut b = 0;
        for d in 0..axes {
            if grid.cell_center(idx[d], d) > 0.5 {
                b |= 1 << d;
            }
        }
        blocks[b].push(a);
    }
    if blocks.iter().any(Vec::is_empty) {
        return Err(invalid("a spatial fold is empty after masking"));
    }
    Ok(blocks)
}

fn select_rows(m: &DMatrix<f64>, rows: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), m.ncols(), |i, j| m[(rows[i], j)])
}

fn complement(n: usize, rows: &[usize]) -> Vec<usize> {
    let mut keep = vec![true; n];
    for &r in rows {
        keep[r] = false;
    }
    (0..n).filter(|&i| keep[i]).collect()
}

/// Scores fit without the voxels of `block`.
pub fn out_of_block_scores(
    x: &DMatrix<f64>,
    l: &DMatrix<f64>,
    basis: &TemporalBasis,
    gamma: &[f64],
    block: &[usize],
) -> Result<FactorScores> {
    let rest = complement(l.nrows(), block);
    fosr_scores(&select_rows(x, &rest), &select_rows(l, &rest), basis, gamma)
}

/// `M_v^{-1} ||X^(v) - L^(v) F^(-v)||^2`.
pub fn block_error(x: &DMatrix<f64>, l: &DMatrix<f64>, f_hat: &DMatrix<f64>, block: &[usize]) -> f64 {
    let r = select_rows(x, block) - select_rows(l, block) * f_hat;
    r.norm_squared() / block.len() as f64
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GammaPoint {
    pub gamma: Vec<f64>,
    /// Mean over subjects and folds.
    pub error: f64,
    /// Per-fold errors averaged over subjects.
    pub fold_errors: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GammaTuning {
    pub best: Vec<f64>,
    pub curve: Vec<GammaPoint>,
}

fn gamma_point(
    scans: &[ScanTensor],
    l: &DMatrix<f64>,
    basis: &TemporalBasis,
    blocks: &[Vec<usize>],
    gamma: &[f64],
) -> Result<GammaPoint> {
    let mut fold_errors = Vec::with_capacity(blocks.len());
    for block in blocks {
        let rest = complement(l.nrows(), block);
        let solver = FosrSolver::new(&select_rows(l, &rest), basis, gamma)?;
        let errs: Vec<f64> = scans
            .par_iter()
            .map(|s| {
                let fit = solver.solve(&select_rows(&s.values, &rest))?;
                Ok(block_error(&s.values, l, &fit.f_hat, block))
            })
            .collect::<Result<_>>()?;
        fold_errors.push(errs.iter().sum::<f64>() / errs.len() as f64);
    }
    Ok(GammaPoint {
        gamma: gamma.to_vec(),
        error: fold_errors.iter().sum::<f64>() / fold_errors.len() as f64,
        fold_errors,
    })
}

fn pick_gamma(points: &[GammaPoint], values: &[f64]) -> usize {
    let mut best = 0;
    for i in 1..points.len() {
        let (e, b) = (points[i].error, points[best].error);
        let tie = (e - b).abs() <= 1e-12 * e.abs().max(b.abs());
        if (!tie && e < b) || (tie && values[i] > values[best]) {
            best = i;
        }
    }
    best
}

/// Spatially blocked cross-validation of the roughness weight; ties go to the larger
/// weight. `folds` must match the block count implied by the grid.
pub fn spatial_cv_gamma(
    scans: &[ScanTensor],
    l: &DMatrix<f64>,
    basis: &TemporalBasis,
    gamma_grid: &[f64],
    folds: usize,
    uniform: bool,
) -> Result<GammaTuning> {
    if gamma_grid.is_empty() {
        return Err(invalid("empty roughness-weight grid"));
    }
    let Some(first) = scans.first() else {
        return Err(invalid("no scans to score"));
    };
    let blocks = spatial_blocks(&first.grid)?;
    if blocks.len() != folds {
        return Err(invalid(format!(
            "a {}-D grid splits into {} spatial folds, not {folds}",
            first.grid.ndim(),
            blocks.len()
        )));
    }
    let k = l.ncols();
    let mut curve: Vec<GammaPoint> = gamma_grid
        .iter()
        .map(|&g| gamma_point(scans, l, basis, &blocks, &vec![g; k]))
        .collect::<Result<_>>()?;
    let i0 = pick_gamma(&curve, gamma_grid);
    let mut best = vec![gamma_grid[i0]; k];
    let mut best_err = curve[i0].error;
    if !uniform && k > 1 {
        for comp in 0..k {
            let pts: Vec<GammaPoint> = gamma_grid
                .iter()
                .map(|&g| {
                    let mut cand = best.clone();
                    cand[comp] = g;
                    gamma_point(scans, l, basis, &blocks, &cand)
                })
                .collect::<Result<_>>()?;
            let i = pick_gamma(&pts, gamma_grid);
            if pts[i].error <= best_err * (1.0 + 1e-12) {
                best[comp] = gamma_grid[i];
                best_err = pts[i].error;
            }
            curve.extend(pts);
        }
    }
    Ok(GammaTuning { best, curve })
}

/// `||F - F_hat|| / ||F||` per component (rows).
pub fn normalized_factor_errors(truth: &DMatrix<f64>, est: &DMatrix<f64>) -> Vec<f64> {
    (0..truth.nrows())
        .map(|k| (truth.row(k) - est.row(k)).norm() / truth.row(k).norm())
        .collect()
}
