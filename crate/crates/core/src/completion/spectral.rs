//! Truncated eigendecompositions for spectral initialization.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::linalg::{orthonormal_columns, sym_eigen_desc};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, schemars::JsonSchema, Default)]
#[serde(rename_all = "snake_case")]
pub enum SpectralMethod {
    /// Exact below 600 voxels, randomized above.
    #[default]
    Auto,
    Exact,
    Randomized,
}

const AUTO_EXACT_LIMIT: usize = 600;
const OVERSAMPLE: usize = 10;
const POWER_ITERS: usize = 6;

/// Leading `r` eigenpairs (descending) of a symmetric matrix.
pub fn top_eigenpairs(
    c: &DMatrix<f64>,
    r: usize,
    method: SpectralMethod,
    seed: u64,
) -> (DVector<f64>, DMatrix<f64>) {
    let n = c.nrows();
    let r = r.min(n);
    let exact = match method {
        SpectralMethod::Exact => true,
        SpectralMethod::Randomized => false,
        SpectralMethod::Auto => n <= AUTO_EXACT_LIMIT,
    };
    if exact || r + OVERSAMPLE >= n {
        let (vals, vecs) = sym_eigen_desc(c);
        return (vals.rows(0, r).into_owned(), vecs.columns(0, r).into_owned());
    }
    randomized(c, r, seed)
}

/// Randomized range finder with subspace iteration and a Rayleigh-Ritz step.
fn randomized(c: &DMatrix<f64>, r: usize, seed: u64) -> (DVector<f64>, DMatrix<f64>) {
    let n = c.nrows();
    let l = r + OVERSAMPLE;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let omega = DMatrix::from_fn(n, l, |_, _| rng.sample::<f64, _>(StandardNormal));
    let mut q = orthonormal_columns(&(c * omega));
    for _ in 0..POWER_ITERS {
        q = orthonormal_columns(&(c * &q));
    }
    let small = q.transpose() * c * &q;
    let (vals, w) = sym_eigen_desc(&small);
    let vecs = q * w;
    (vals.rows(0, r).into_owned(), vecs.columns(0, r).into_owned())
}

/// `V_0 = U_j diag(max(lambda, 0))^{1/2}`.
pub fn scaled_factor(vals: &DVector<f64>, vecs: &DMatrix<f64>, j: usize) -> DMatrix<f64> {
    let mut v = vecs.columns(0, j).into_owned();
    for k in 0..j {
        let s = vals[k].max(0.0).sqrt();
        v.column_mut(k).scale_mut(s);
    }
    v
}
