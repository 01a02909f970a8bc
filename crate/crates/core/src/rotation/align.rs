//! Target alignment used to match cross-validation fits to the full-data fit.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::linalg::{apply_signed_permutation, greedy_signed_matching, procrustes};
use crate::loadings::RotationKind;

#[derive(Debug, Clone)]
pub struct Alignment {
    pub aligned: DMatrix<f64>,
    /// Matrix `W` with `aligned = source * W`.
    pub map: DMatrix<f64>,
    pub residual: f64,
}

fn signed_permutation_matrix(perm: &[usize], signs: &[f64], k: usize) -> DMatrix<f64> {
    let mut p = DMatrix::zeros(k, perm.len());
    for (c, (&src, &s)) in perm.iter().zip(signs).enumerate() {
        if src != usize::MAX {
            p[(src, c)] = s;
        }
    }
    p
}

/// Align `source` to `target` by an orthogonal map, or by a least-squares map with
/// unit-row normalization of its inverse (oblique).
pub fn align_to_target(source: &DMatrix<f64>, target: &DMatrix<f64>, kind: RotationKind) -> Result<Alignment> {
    if source.shape() != target.shape() {
        return Err(Error::Shape(format!(
            "alignment of {:?} onto {:?}",
            source.shape(),
            target.shape()
        )));
    }
    let k = source.ncols();
    let cross = source.transpose() * target;
    let sv = cross.singular_values();
    let smax = sv.max();
    let deficient = smax == 0.0 || sv.min() <= 1e-12 * smax;
    let (perm, signs) = greedy_signed_matching(source, target);
    let perm_map = signed_permutation_matrix(&perm, &signs, k);
    let permuted = apply_signed_permutation(source, &perm, &signs);
    let perm_resid = (&permuted - target).norm();
    if deficient {
        log::warn!("alignment cross-product is rank deficient; aligning by signed permutation only");
        return Ok(Alignment {
            aligned: permuted,
            map: perm_map,
            residual: perm_resid,
        });
    }
    let map = match kind {
        RotationKind::Orthogonal => procrustes(source, target)?,
        RotationKind::Oblique => {
            let gram = source.transpose() * source;
            let w = gram
                .cholesky()
                .ok_or_else(|| Error::Singular("source loadings are rank deficient".into()))?
                .solve(&cross);
            let mut t = w
                .try_inverse()
                .ok_or_else(|| Error::Singular("least-squares alignment map is singular".into()))?;
            for mut row in t.row_iter_mut() {
                let n = row.norm();
                row.unscale_mut(n);
            }
            t.try_inverse()
                .ok_or_else(|| Error::Singular("normalized alignment map is singular".into()))?
        }
    };
    let aligned = source * &map;
    let residual = (&aligned - target).norm();
    // snap to the signed permutation when it fits as well
    if perm_resid <= residual + 1e-12 * target.norm().max(1.0) {
        return Ok(Alignment {
            aligned: permuted,
            map: perm_map,
            residual: perm_resid,
        });
    }
    Ok(Alignment { aligned, map, residual })
}
