//! Orthogonal (varimax, quartimax) and oblique (direct oblimin) rotations of
//! matricized loadings, with seeded random restarts.

pub mod align;
pub mod criteria;
mod gpa;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::linalg::random_orthogonal;
use crate::loadings::{LoadingSet, RotationKind, Stage};

pub use align::{align_to_target, Alignment};
pub use criteria::RotationMethod;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct RotationOptions {
    pub restarts: usize,
    pub max_iters: usize,
    /// Projected-gradient tolerance on loadings scaled to unit mean column norm.
    pub tol: f64,
    /// Kaiser row normalization before rotating.
    pub kaiser: bool,
    pub seed: u64,
}

impl Default for RotationOptions {
    fn default() -> Self {
        Self {
            restarts: 10,
            max_iters: 1000,
            tol: 1e-8,
            kaiser: false,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RotationResult {
    /// Rotated loadings (stage `Rotated`, transform and `Phi` attached).
    pub loadings: LoadingSet,
    /// Orthogonal `R` (`L* = L R`) or oblique `T` (`L* = L T^{-1}`, unit rows).
    pub transform: DMatrix<f64>,
    pub kind: RotationKind,
    pub method: RotationMethod,
    /// Factor covariance `T T^T` (identity for orthogonal rotations).
    pub phi: DMatrix<f64>,
    pub criterion: f64,
    /// Criterion value after every accepted step of the winning restart.
    pub trace: Vec<f64>,
    pub converged: bool,
    pub restart: usize,
}

struct Candidate {
    restart: usize,
    outcome: gpa::GpaOutcome,
}

fn kaiser_weights(l: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_iterator(
        l.nrows(),
        l.row_iter().map(|r| {
            let n = r.norm();
            if n > 0.0 {
                n
            } else {
                1.0
            }
        }),
    )
}

/// Rotate `loadings` with the given criterion.
pub fn rotate(loadings: &LoadingSet, method: RotationMethod, opts: &RotationOptions) -> Result<RotationResult> {
    if let RotationMethod::Oblimin { alpha } = method {
        if alpha > 0.0 {
            return Err(invalid(format!("oblimin alpha {alpha} must not be positive")));
        }
    }
    let l = &loadings.matrix;
    if l.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite);
    }
    let (m, k) = l.shape();
    if k == 0 || m == 0 {
        return Err(invalid("cannot rotate an empty loading matrix"));
    }
    let kind = if method.is_oblique() {
        RotationKind::Oblique
    } else {
        RotationKind::Orthogonal
    };
    // criteria are homogeneous, so the optimal transform is scale invariant
    let scale = (l.norm_squared() / k as f64).sqrt();
    if scale == 0.0 {
        return Err(invalid("cannot rotate all-zero loadings"));
    }
    let weights = opts.kaiser.then(|| kaiser_weights(l));
    let mut a = l / scale;
    if let Some(w) = &weights {
        for (i, mut row) in a.row_iter_mut().enumerate() {
            row.unscale_mut(w[i] / scale);
        }
    }
    let settings = gpa::GpaSettings {
        tol: opts.tol,
        max_iters: opts.max_iters,
    };
    let candidates: Vec<Option<Candidate>> = if k == 1 {
        vec![Some(Candidate {
            restart: 0,
            outcome: gpa::GpaOutcome {
                t: DMatrix::identity(1, 1),
                f: method.value_grad(&a).0,
                trace: vec![method.value_grad(&a).0],
                iterations: 0,
                converged: true,
            },
        })]
    } else {
        (0..opts.restarts.max(1))
            .into_par_iter()
            .map(|r| {
                let t0 = if r == 0 {
                    DMatrix::identity(k, k)
                } else {
                    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
                    rng.set_stream(r as u64);
                    random_orthogonal(k, &mut rng)
                };
                let outcome = match kind {
                    RotationKind::Orthogonal => Some(gpa::orthogonal(&a, &t0, method, &settings)),
                    RotationKind::Oblique => gpa::oblique(&a, &t0, method, &settings)
                        .filter(|o| o.t.determinant().abs() >= 1e-10),
                };
                outcome.map(|outcome| Candidate { restart: r, outcome })
            })
            .collect()
    };
    let valid: Vec<Candidate> = candidates.into_iter().flatten().collect();
    let f_best = valid
        .iter()
        .map(|c| c.outcome.f)
        .fold(f64::INFINITY, f64::min);
    if !f_best.is_finite() {
        return Err(Error::Numerical(
            "every rotation restart degenerated (|det T| < 1e-10)".into(),
        ));
    }
    let tie = 1e-10 * (1.0 + f_best.abs());
    let best = valid
        .into_iter()
        .filter(|c| c.outcome.f <= f_best + tie)
        .min_by(|x, y| {
            let dx = (&x.outcome.t - DMatrix::identity(k, k)).norm();
            let dy = (&y.outcome.t - DMatrix::identity(k, k)).norm();
            dx.total_cmp(&dy).then(x.restart.cmp(&y.restart))
        })
        .expect("at least one candidate");
    if !best.outcome.converged {
        log::warn!(
            "{} rotation stopped after {} iterations without meeting the tolerance",
            method.label(),
            best.outcome.iterations
        );
    }
    // transform in the L* = L R / L* = L T^{-1} convention
    let (mut transform, mut rotated) = match kind {
        RotationKind::Orthogonal => {
            let r = best.outcome.t.clone();
            (r.clone(), l * &r)
        }
        RotationKind::Oblique => {
            let t = best.outcome.t.transpose();
            let ti = t
                .clone()
                .try_inverse()
                .ok_or_else(|| Error::Singular("oblique transform is singular".into()))?;
            (t, l * ti)
        }
    };
    if weights.is_some() {
        // the transform was computed on row-normalized loadings; apply it to the originals
        rotated = match kind {
            RotationKind::Orthogonal => l * &transform,
            RotationKind::Oblique => l * transform.clone().try_inverse().expect("checked above"),
        };
    }
    // order by descending squared column norm, largest-|entry| positive
    // (a single component keeps the identity transform)
    let mut order: Vec<usize> = (0..k).collect();
    let norms: Vec<f64> = (0..k).map(|c| rotated.column(c).norm_squared()).collect();
    order.sort_by(|&x, &y| norms[y].total_cmp(&norms[x]).then(x.cmp(&y)));
    let mut perm = DMatrix::zeros(k, k);
    for (dst, &src) in order.iter().enumerate() {
        let col = rotated.column(src);
        let big = col.iter().fold(0.0f64, |acc, &v| if v.abs() > acc.abs() { v } else { acc });
        perm[(src, dst)] = if big < 0.0 && k > 1 { -1.0 } else { 1.0 };
    }
    rotated = rotated * &perm;
    transform = match kind {
        RotationKind::Orthogonal => transform * &perm,
        RotationKind::Oblique => perm.transpose() * transform,
    };
    let phi = match kind {
        RotationKind::Orthogonal => DMatrix::identity(k, k),
        RotationKind::Oblique => &transform * transform.transpose(),
    };
    let s4 = scale.powi(4);
    let sign = match kind {
        RotationKind::Orthogonal => -4.0,
        RotationKind::Oblique => 2.0,
    };
    let trace: Vec<f64> = best.outcome.trace.iter().map(|f| sign * f * s4).collect();
    let criterion = method.criterion(&rotated);
    let mut out = loadings.with_matrix(rotated, Stage::Rotated);
    out.kind = Some(kind);
    out.transform = Some(transform.clone());
    out.phi = Some(phi.clone());
    Ok(RotationResult {
        loadings: out,
        transform,
        kind,
        method,
        phi,
        criterion,
        trace,
        converged: best.outcome.converged,
        restart: best.restart,
    })
}

pub fn rotate_orthogonal(loadings: &LoadingSet, method: RotationMethod, opts: &RotationOptions) -> Result<RotationResult> {
    if method.is_oblique() {
        return Err(invalid("oblimin is an oblique criterion"));
    }
    rotate(loadings, method, opts)
}

pub fn rotate_oblique(loadings: &LoadingSet, alpha: f64, opts: &RotationOptions) -> Result<RotationResult> {
    rotate(loadings, RotationMethod::Oblimin { alpha }, opts)
}
