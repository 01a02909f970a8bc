//! Smoothing and shrinkage of rotated loadings, tuned by V-fold
//! cross-validation over subjects.
//!
//! For fold `v`, loadings are fit on all other subjects (`-v`), aligned to the
//! full-data fit, rotated with the full-data transform, postprocessed with a
//! candidate parameter, de-rotated (oblique case) and scored against the
//! held-out covariance `C^(v)` on the off-band entries.

pub mod smooth;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::completion::{complete_rank, extract_loadings, CompletionOptions};
use crate::covassembly::{
    empirical_spatial_cov, masked_lowrank_residual, spatial_cov_about, subject_mean, BandMask,
    CovOptions, OffBandPattern,
};
use crate::error::{invalid, Error, Result};
use crate::grid::SpatialGrid;
use crate::io::ScanTensor;
use crate::loadings::{LoadingSet, RotationKind, Stage};
use crate::rotation::{align_to_target, Alignment};

pub use smooth::{adaptive_shrink, gaussian_smooth};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct PostprocessConfig {
    /// Fixed per-component (or single) smoothing widths; skips tuning when set.
    pub sigma: Option<Vec<f64>>,
    /// Fixed per-component (or single) shrinkage levels; skips tuning when set.
    pub kappa: Option<Vec<f64>>,
    /// Candidate Gaussian standard deviations in voxel units.
    pub sigma_grid: Vec<f64>,
    /// Absolute shrinkage candidates; when absent they are derived from `kappa_fractions`.
    pub kappa_grid: Option<Vec<f64>>,
    /// Candidate `t` giving `kappa = (t max|L|)^3`, the level that zeroes entries below `t max|L|`.
    pub kappa_fractions: Vec<f64>,
    pub folds: usize,
    /// One parameter shared by all components instead of component-wise tuning.
    pub uniform: bool,
    pub smooth: bool,
    pub shrink: bool,
}

impl Default for PostprocessConfig {
    fn default() -> Self {
        Self {
            sigma: None,
            kappa: None,
            sigma_grid: vec![0.0, 0.5, 1.0, 1.5, 2.0, 3.0],
            kappa_grid: None,
            kappa_fractions: vec![0.0, 0.05, 0.1, 0.15, 0.2, 0.3, 0.4],
            folds: 3,
            uniform: true,
            smooth: true,
            shrink: true,
        }
    }
}

impl PostprocessConfig {
    pub fn validate(&self) -> Result<()> {
        if self.folds < 2 {
            return Err(invalid("at least two folds are required"));
        }
        if self.sigma_grid.is_empty() || self.kappa_fractions.is_empty() {
            return Err(invalid("empty tuning grid"));
        }
        if let Some(g) = &self.kappa_grid {
            if g.is_empty() {
                return Err(invalid("empty kappa grid"));
            }
        }
        let all = self
            .sigma_grid
            .iter()
            .chain(self.kappa_grid.iter().flatten())
            .chain(&self.kappa_fractions)
            .chain(self.sigma.iter().flatten())
            .chain(self.kappa.iter().flatten());
        for &v in all {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(invalid(format!("tuning parameter {v} must be finite and nonnegative")));
            }
        }
        Ok(())
    }
}

/// Apply per-component smoothing widths.
pub fn smooth_loadings(set: &LoadingSet, sigma: &[f64]) -> Result<LoadingSet> {
    let sigma = broadcast(sigma, set.n_components())?;
    let out = smooth_matrix(&set.grid, &set.matrix, &sigma);
    Ok(set.with_matrix(out, Stage::Smoothed))
}

/// Apply per-component shrinkage; refuses unsmoothed input unless `allow_unsmoothed`.
pub fn shrink_loadings(set: &LoadingSet, kappa: &[f64], allow_unsmoothed: bool) -> Result<LoadingSet> {
    if set.stage < Stage::Smoothed && !allow_unsmoothed {
        return Err(invalid("loadings must be smoothed before shrinkage"));
    }
    let kappa = broadcast(kappa, set.n_components())?;
    Ok(set.with_matrix(shrink_matrix(&set.matrix, &kappa), Stage::Shrunk))
}

fn broadcast(v: &[f64], k: usize) -> Result<Vec<f64>> {
    match v.len() {
        1 => Ok(vec![v[0]; k]),
        n if n == k => Ok(v.to_vec()),
        n => Err(invalid(format!("{n} parameters for {k} components"))),
    }
}

fn smooth_matrix(grid: &SpatialGrid, l: &DMatrix<f64>, sigma: &[f64]) -> DMatrix<f64> {
    let mut out = l.clone();
    for (k, &s) in sigma.iter().enumerate() {
        let col: Vec<f64> = l.column(k).iter().copied().collect();
        let sm = gaussian_smooth(grid, &col, s);
        out.column_mut(k).copy_from_slice(&sm);
    }
    out
}

fn shrink_matrix(l: &DMatrix<f64>, kappa: &[f64]) -> DMatrix<f64> {
    let mut out = l.clone();
    for (k, &kap) in kappa.iter().enumerate() {
        let col: Vec<f64> = l.column(k).iter().copied().collect();
        out.column_mut(k).copy_from_slice(&adaptive_shrink(&col, kap));
    }
    out
}

/// Round-robin assignment of subjects to folds.
pub fn fold_assignment(n: usize, v: usize) -> Result<Vec<Vec<usize>>> {
    if v < 2 {
        return Err(invalid("at least two folds are required"));
    }
    if n < v {
        return Err(invalid(format!("{n} subjects cannot fill {v} folds")));
    }
    let mut folds = vec![Vec::new(); v];
    for i in 0..n {
        folds[i % v].push(i);
    }
    Ok(folds)
}

/// Held-out covariances and aligned leave-fold-out loadings.
#[derive(Debug, Clone)]
pub struct FoldSet {
    pub folds: Vec<Vec<usize>>,
    pub held_out_cov: Vec<DMatrix<f64>>,
    /// `L^(-v)` aligned to the full-data initial loadings.
    pub train_loadings: Vec<DMatrix<f64>>,
    pub alignment_residual: Vec<f64>,
    pub pattern: OffBandPattern,
    pub grid: SpatialGrid,
}

/// Build the folds: `C^(v)` is centered with the all-subject mean (a fold may hold a
/// single subject); the `(-v)` fits use their own mean and the full-data rank.
pub fn make_folds(
    scans: &[ScanTensor],
    v: usize,
    mask: &BandMask,
    full_initial: &LoadingSet,
    completion: &CompletionOptions,
    cov_opts: &CovOptions,
) -> Result<FoldSet> {
    let folds = fold_assignment(scans.len(), v)?;
    let k = full_initial.n_components();
    let mean = subject_mean(scans)?;
    let mut held_out_cov = Vec::with_capacity(v);
    let mut train_loadings = Vec::with_capacity(v);
    let mut alignment_residual = Vec::with_capacity(v);
    for fold in &folds {
        let held: Vec<ScanTensor> = fold.iter().map(|&i| scans[i].clone()).collect();
        held_out_cov.push(spatial_cov_about(&held, &mean, mask, cov_opts)?.matrix);
        let train: Vec<ScanTensor> = (0..scans.len())
            .filter(|i| !fold.contains(i))
            .map(|i| scans[i].clone())
            .collect();
        let cov = empirical_spatial_cov(&train, mask, cov_opts)?;
        let fit = complete_rank(&cov, k, completion)?;
        let est = extract_loadings(&fit.v, mask.grid())?;
        let Alignment { aligned, residual, .. } =
            align_to_target(&est.loadings.matrix, &full_initial.matrix, RotationKind::Orthogonal)?;
        log::debug!("fold alignment residual {residual:.4e}");
        train_loadings.push(aligned);
        alignment_residual.push(residual);
    }
    Ok(FoldSet {
        folds,
        held_out_cov,
        train_loadings,
        alignment_residual,
        pattern: mask.pattern(),
        grid: mask.grid().clone(),
    })
}

/// Rotation carried from the full-data fit to the fold fits.
#[derive(Debug, Clone)]
pub struct RotationSpec {
    pub kind: RotationKind,
    /// `R` (orthogonal) or `T` (oblique), as stored on rotated loading sets.
    pub transform: DMatrix<f64>,
}

impl RotationSpec {
    pub fn identity(k: usize) -> Self {
        Self {
            kind: RotationKind::Orthogonal,
            transform: DMatrix::identity(k, k),
        }
    }

    pub fn from_loadings(set: &LoadingSet) -> Self {
        match (set.kind, &set.transform) {
            (Some(kind), Some(t)) => Self {
                kind,
                transform: t.clone(),
            },
            _ => Self::identity(set.n_components()),
        }
    }

    fn apply(&self, l: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        match self.kind {
            RotationKind::Orthogonal => Ok(l * &self.transform),
            RotationKind::Oblique => Ok(l * self
                .transform
                .clone()
                .try_inverse()
                .ok_or_else(|| Error::Singular("oblique transform".into()))?),
        }
    }

    /// Undo an oblique rotation so that the factors are (approximately) orthogonal.
    fn derotate(&self, l: &DMatrix<f64>) -> DMatrix<f64> {
        match self.kind {
            RotationKind::Orthogonal => l.clone(),
            RotationKind::Oblique => l * &self.transform,
        }
    }
}

/// Postprocessing applied to fold loadings for one CV evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub sigma: Vec<f64>,
    pub kappa: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvPoint {
    pub sigma: Vec<f64>,
    pub kappa: Option<Vec<f64>>,
    pub cv: f64,
    pub fold_errors: Vec<f64>,
}

/// `Err(v)` for every fold and their mean.
pub fn cv_error(folds: &FoldSet, rot: &RotationSpec, cand: &Candidate) -> Result<CvPoint> {
    let mut errors = Vec::with_capacity(folds.folds.len());
    for (l, c) in folds.train_loadings.iter().zip(&folds.held_out_cov) {
        let rotated = rot.apply(l)?;
        let mut post = smooth_matrix(&folds.grid, &rotated, &cand.sigma);
        if let Some(kappa) = &cand.kappa {
            post = shrink_matrix(&post, kappa);
        }
        let factor = rot.derotate(&post);
        errors.push(masked_lowrank_residual(c, &factor, &folds.pattern)?);
    }
    Ok(CvPoint {
        sigma: cand.sigma.clone(),
        kappa: cand.kappa.clone(),
        cv: errors.iter().sum::<f64>() / errors.len() as f64,
        fold_errors: errors,
    })
}

fn better(new: f64, old: f64) -> bool {
    new < old - 1e-12 * old.abs()
}

fn tie(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-12 * a.abs().max(b.abs())
}

/// Pick by lowest CV; ties resolved by `prefer(candidate, incumbent)`.
fn pick(points: &[(f64, f64)], prefer: impl Fn(f64, f64) -> bool) -> usize {
    let mut best = 0;
    for i in 1..points.len() {
        let (cv, p) = points[i];
        let (bcv, bp) = points[best];
        if better(cv, bcv) || (tie(cv, bcv) && prefer(p, bp)) {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone)]
pub struct Tuning {
    pub best: Vec<f64>,
    pub curve: Vec<CvPoint>,
}

fn tune(
    folds: &FoldSet,
    rot: &RotationSpec,
    grid: &[f64],
    uniform: bool,
    make: &(dyn Fn(&[f64]) -> Candidate + Sync),
    prefer: fn(f64, f64) -> bool,
) -> Result<Tuning> {
    if grid.is_empty() {
        return Err(invalid("empty tuning grid"));
    }
    let k = folds.train_loadings[0].ncols();
    let eval_all = |params: Vec<Vec<f64>>| -> Result<Vec<CvPoint>> {
        params
            .par_iter()
            .map(|p| cv_error(folds, rot, &make(p)))
            .collect()
    };
    let first = eval_all(grid.iter().map(|&g| vec![g; k]).collect())?;
    let scored: Vec<(f64, f64)> = first.iter().zip(grid).map(|(p, &g)| (p.cv, g)).collect();
    let i0 = pick(&scored, prefer);
    let mut best = vec![grid[i0]; k];
    let mut best_cv = first[i0].cv;
    let mut curve = first;
    if !uniform && k > 1 {
        for comp in 0..k {
            let params: Vec<Vec<f64>> = grid
                .iter()
                .map(|&g| {
                    let mut p = best.clone();
                    p[comp] = g;
                    p
                })
                .collect();
            let pts = eval_all(params)?;
            let scored: Vec<(f64, f64)> = pts.iter().zip(grid).map(|(p, &g)| (p.cv, g)).collect();
            let i = pick(&scored, prefer);
            if better(pts[i].cv, best_cv) || tie(pts[i].cv, best_cv) {
                best[comp] = grid[i];
                best_cv = pts[i].cv;
            }
            curve.extend(pts);
        }
    }
    Ok(Tuning { best, curve })
}

/// Tune smoothing widths; ties go to the smaller width.
pub fn cv_tune_sigma(folds: &FoldSet, rot: &RotationSpec, grid: &[f64], uniform: bool) -> Result<Tuning> {
    let make = |p: &[f64]| Candidate {
        sigma: p.to_vec(),
        kappa: None,
    };
    tune(folds, rot, grid, uniform, &make, |a, b| a < b)
}

/// Tune shrinkage after smoothing with `sigma`; ties go to the larger level.
pub fn cv_tune_kappa(
    folds: &FoldSet,
    rot: &RotationSpec,
    sigma: &[f64],
    grid: &[f64],
    uniform: bool,
) -> Result<Tuning> {
    let sigma = sigma.to_vec();
    let make = move |p: &[f64]| Candidate {
        sigma: sigma.clone(),
        kappa: Some(p.to_vec()),
    };
    tune(folds, rot, grid, uniform, &make, |a, b| a > b)
}

/// Outcome of the smoothing-then-shrinkage stage.
#[derive(Debug, Clone)]
pub struct PostprocessResult {
    pub sigma: Vec<f64>,
    pub kappa: Vec<f64>,
    pub smoothed: LoadingSet,
    pub shrunk: LoadingSet,
    pub sigma_curve: Vec<CvPoint>,
    pub kappa_curve: Vec<CvPoint>,
}

/// Smooth then shrink `rotated`, tuning any parameter that is not fixed in `cfg`.
pub fn postprocess(rotated: &LoadingSet, folds: Option<&FoldSet>, cfg: &PostprocessConfig) -> Result<PostprocessResult> {
    cfg.validate()?;
    let k = rotated.n_components();
    let rot = RotationSpec::from_loadings(rotated);
    let need_folds = || folds.ok_or_else(|| invalid("cross-validation folds are required for tuning"));
    let (sigma, sigma_curve) = if !cfg.smooth {
        (vec![0.0; k], Vec::new())
    } else if let Some(s) = &cfg.sigma {
        (broadcast(s, k)?, Vec::new())
    } else {
        let t = cv_tune_sigma(need_folds()?, &rot, &cfg.sigma_grid, cfg.uniform)?;
        (t.best, t.curve)
    };
    let smoothed = smooth_loadings(rotated, &sigma)?;
    let (kappa, kappa_curve) = if !cfg.shrink {
        (vec![0.0; k], Vec::new())
    } else if let Some(kv) = &cfg.kappa {
        (broadcast(kv, k)?, Vec::new())
    } else {
        let grid = match &cfg.kappa_grid {
            Some(g) => g.clone(),
            None => {
                let top = smoothed.matrix.iter().fold(0.0f64, |a, v| a.max(v.abs()));
                cfg.kappa_fractions.iter().map(|t| (t * top).powi(3)).collect()
            }
        };
        let t = cv_tune_kappa(need_folds()?, &rot, &sigma, &grid, cfg.uniform)?;
        (t.best, t.curve)
    };
    let shrunk = shrink_loadings(&smoothed, &kappa, false)?;
    Ok(PostprocessResult {
        sigma,
        kappa,
        smoothed,
        shrunk,
        sigma_curve,
        kappa_curve,
    })
}
