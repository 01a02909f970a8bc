//! Rotation criteria as minimization targets `f(L)` with gradients `df/dL`.
//!
//! Reported criterion values follow the usual orientation: quartimax and
//! varimax are maximized, oblimin is minimized.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(tag = "method", rename_all = "snake_case", deny_unknown_fields)]
pub enum RotationMethod {
    Varimax,
    Quartimax,
    /// Direct oblimin with `alpha <= 0`; `alpha = 0` is quartimin.
    Oblimin {
        #[serde(default)]
        alpha: f64,
    },
}

impl RotationMethod {
    pub fn is_oblique(&self) -> bool {
        matches!(self, RotationMethod::Oblimin { .. })
    }

    pub fn label(&self) -> &'static str {
        match self {
            RotationMethod::Varimax => "varimax",
            RotationMethod::Quartimax => "quartimax",
            RotationMethod::Oblimin { alpha } if *alpha == 0.0 => "quartimin",
            RotationMethod::Oblimin { .. } => "oblimin",
        }
    }

    /// Minimization target and its gradient.
    pub fn value_grad(&self, l: &DMatrix<f64>) -> (f64, DMatrix<f64>) {
        let l2 = l.component_mul(l);
        match *self {
            RotationMethod::Quartimax => {
                let f = -l2.norm_squared() / 4.0;
                (f, -l2.component_mul(l))
            }
            RotationMethod::Varimax => {
                let m = l.nrows() as f64;
                let mut q = l2;
                for mut col in q.column_iter_mut() {
                    let mean = col.sum() / m;
                    col.add_scalar_mut(-mean);
                }
                let f = -q.norm_squared() / 4.0;
                (f, -l.component_mul(&q))
            }
            RotationMethod::Oblimin { alpha } => {
                let x = oblimin_cross(&l2, alpha);
                let f = l2.component_mul(&x).sum() / 4.0;
                (f, l.component_mul(&x))
            }
        }
    }

    /// Criterion in its natural orientation.
    pub fn criterion(&self, l: &DMatrix<f64>) -> f64 {
        let (f, _) = self.value_grad(l);
        match self {
            RotationMethod::Quartimax | RotationMethod::Varimax => -4.0 * f,
            // sum over k < k' of the pairwise terms
            RotationMethod::Oblimin { .. } => 2.0 * f,
        }
    }
}

/// `(I - alpha/M 1 1^T) L^2 (1 1^T - I)`.
fn oblimin_cross(l2: &DMatrix<f64>, alpha: f64) -> DMatrix<f64> {
    let (m, k) = l2.shape();
    let mut x = DMatrix::zeros(m, k);
    for i in 0..m {
        let row_sum: f64 = l2.row(i).sum();
        for c in 0..k {
            x[(i, c)] = row_sum - l2[(i, c)];
        }
    }
    if alpha != 0.0 {
        for c in 0..k {
            let mean = x.column(c).sum() / m as f64;
            x.column_mut(c).add_scalar_mut(-alpha * mean);
        }
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> DMatrix<f64> {
        DMatrix::from_fn(7, 3, |i, j| ((i * 5 + j * 3) as f64 * 0.7).sin())
    }

    #[test]
    fn gradients_match_finite_differences() {
        let l = sample();
        for method in [
            RotationMethod::Varimax,
            RotationMethod::Quartimax,
            RotationMethod::Oblimin { alpha: 0.0 },
            RotationMethod::Oblimin { alpha: -0.5 },
        ] {
            let (_, g) = method.value_grad(&l);
            let h = 1e-6;
            for idx in 0..l.len() {
                let mut p = l.clone();
                let mut m = l.clone();
                p[idx] += h;
                m[idx] -= h;
                let fd = (method.value_grad(&p).0 - method.value_grad(&m).0) / (2.0 * h);
                assert!((fd - g[idx]).abs() < 1e-7, "{method:?} {idx}: {fd} vs {}", g[idx]);
            }
        }
    }

    #[test]
    fn explicit_forms() {
        let l = sample();
        let (m, k) = l.shape();
        let mut vari = 0.0;
        let mut quarti = 0.0;
        let mut obli = 0.0;
        for c in 0..k {
            let s2: f64 = (0..m).map(|i| l[(i, c)].powi(2)).sum();
            let s4: f64 = (0..m).map(|i| l[(i, c)].powi(4)).sum();
            quarti += s4;
            vari += s4 - s2 * s2 / m as f64;
            for c2 in c + 1..k {
                let cross: f64 = (0..m).map(|i| l[(i, c)].powi(2) * l[(i, c2)].powi(2)).sum();
                let s2b: f64 = (0..m).map(|i| l[(i, c2)].powi(2)).sum();
                obli += cross - (-0.3 / m as f64) * s2 * s2b;
            }
        }
        assert!((RotationMethod::Quartimax.criterion(&l) - quarti).abs() < 1e-12);
        assert!((RotationMethod::Varimax.criterion(&l) - vari).abs() < 1e-12);
        assert!((RotationMethod::Oblimin { alpha: -0.3 }.criterion(&l) - obli).abs() < 1e-12);
    }

    #[test]
    fn invariant_under_signed_permutation() {
        let l = sample();
        let p = DMatrix::from_row_slice(3, 3, &[0.0, -1.0, 0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0]);
        let lp = &l * p;
        for method in [RotationMethod::Varimax, RotationMethod::Quartimax, RotationMethod::Oblimin { alpha: -0.2 }] {
            assert!((method.criterion(&l) - method.criterion(&lp)).abs() < 1e-12);
        }
        assert_eq!(RotationMethod::Oblimin { alpha: 0.0 }.label(), "quartimin");
    }
}
