//! Small dense linear-algebra helpers shared across modules.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Eigenpairs of a symmetric matrix sorted by descending eigenvalue.
///
/// Exactly-zero rows are split off first (eigenvalue 0, unit eigenvector): the
/// implicit QR iteration in nalgebra can produce NaNs on tridiagonals with many
/// exact zeros, which masked covariances of sparse signals routinely have.
pub fn sym_eigen_desc(m: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = m.nrows();
    let sym = (m + m.transpose()) * 0.5;
    let keep: Vec<usize> = (0..n).filter(|&i| sym.row(i).iter().any(|&v| v != 0.0)).collect();
    let mut all_vals = DVector::zeros(n);
    let mut all_vecs = DMatrix::zeros(n, n);
    if keep.len() == n {
        let eig = SymmetricEigen::new(sym);
        all_vals = eig.eigenvalues;
        all_vecs = eig.eigenvectors;
    } else {
        let sub = DMatrix::from_fn(keep.len(), keep.len(), |i, j| sym[(keep[i], keep[j])]);
        let eig = SymmetricEigen::new(sub);
        for c in 0..keep.len() {
            all_vals[c] = eig.eigenvalues[c];
            for (r, &row) in keep.iter().enumerate() {
                all_vecs[(row, c)] = eig.eigenvectors[(r, c)];
            }
        }
        let dropped = (0..n).filter(|i| keep.binary_search(i).is_err());
        for (c, row) in (keep.len()..n).zip(dropped) {
            all_vecs[(row, c)] = 1.0;
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        all_vals[b]
            .partial_cmp(&all_vals[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let vals = DVector::from_iterator(n, order.iter().map(|&i| all_vals[i]));
    let mut vecs = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        vecs.set_column(dst, &all_vecs.column(src));
    }
    (vals, vecs)
}

/// Orthonormal basis for the column space via thin QR.
pub fn orthonormal_columns(m: &DMatrix<f64>) -> DMatrix<f64> {
    m.clone().qr().q()
}

/// Flip column signs so that each column's largest-magnitude entry is positive.
pub fn normalize_signs(m: &mut DMatrix<f64>) {
    for mut col in m.column_iter_mut() {
        let mut best = 0.0f64;
        for &v in col.iter() {
            if v.abs() > best.abs() {
                best = v;
            }
        }
        if best < 0.0 {
            col.neg_mut();
        }
    }
}

/// Orthogonal `R` minimizing `||source * R - target||_F`.
pub fn procrustes(source: &DMatrix<f64>, target: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if source.shape() != target.shape() {
        return Err(Error::Shape(format!(
            "procrustes shapes {:?} vs {:?}",
            source.shape(),
            target.shape()
        )));
    }
    let cross = source.transpose() * target;
    let svd = cross.svd(true, true);
    let u = svd.u.ok_or_else(|| Error::Numerical("svd failed".into()))?;
    let vt = svd.v_t.ok_or_else(|| Error::Numerical("svd failed".into()))?;
    Ok(u * vt)
}

/// Haar-distributed random orthogonal matrix.
pub fn random_orthogonal<R: Rng + ?Sized>(k: usize, rng: &mut R) -> DMatrix<f64> {
    let g = DMatrix::from_fn(k, k, |_, _| rng.sample::<f64, _>(StandardNormal));
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..k {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0f64, |acc, v| acc.max(v.abs()))
}

/// Column permutation and sign flips matching `source` columns to `target` greedily
/// by absolute inner product. Returns `(perm, signs)` with `source[:, perm[k]] * signs[k] ~ target[:, k]`.
pub fn greedy_signed_matching(source: &DMatrix<f64>, target: &DMatrix<f64>) -> (Vec<usize>, Vec<f64>) {
    let k = source.ncols().min(target.ncols());
    let cross = target.transpose() * source;
    let mut used_t = vec![false; cross.nrows()];
    let mut used_s = vec![false; cross.ncols()];
    let mut perm = vec![usize::MAX; target.ncols()];
    let mut signs = vec![1.0; target.ncols()];
    for _ in 0..k {
        let mut best = (-1.0, 0, 0);
        for t in 0..cross.nrows() {
            if used_t[t] {
                continue;
            }
            for s in 0..cross.ncols() {
                if !used_s[s] && cross[(t, s)].abs() > best.0 {
                    best = (cross[(t, s)].abs(), t, s);
                }
            }
        }
        let (_, t, s) = best;
        used_t[t] = true;
        used_s[s] = true;
        perm[t] = s;
        signs[t] = if cross[(t, s)] < 0.0 { -1.0 } else { 1.0 };
    }
    (perm, signs)
}

/// Apply a signed column permutation as produced by [`greedy_signed_matching`].
pub fn apply_signed_permutation(m: &DMatrix<f64>, perm: &[usize], signs: &[f64]) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(m.nrows(), perm.len());
    for (k, (&p, &s)) in perm.iter().zip(signs).enumerate() {
        if p != usize::MAX {
            out.set_column(k, &(m.column(p) * s));
        }
    }
    out
}

/// Largest principal angle (radians) between the column spaces of `a` and `b`.
pub fn subspace_angle(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let qa = orthonormal_columns(a);
    let qb = orthonormal_columns(b);
    let s = (qa.transpose() * qb).singular_values();
    let min_cos = s.iter().cloned().fold(f64::INFINITY, f64::min).clamp(-1.0, 1.0);
    min_cos.acos()
}
