//! Masked factorized objective `f(V) = sum_{Z=1} (C - V V^T)^2` and its exact
//! quartic restriction to a search line.
//!
//! Factors are handled row-major (`n x k`, row `a` is `v_a`) so that the
//! per-entry dot products `v_a . v_b` read contiguous memory.

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::covassembly::OffBandPattern;

pub(crate) fn to_rows(m: &DMatrix<f64>) -> Vec<f64> {
    let (n, k) = m.shape();
    let mut out = vec![0.0; n * k];
    for j in 0..k {
        for i in 0..n {
            out[i * k + j] = m[(i, j)];
        }
    }
    out
}

pub(crate) fn from_rows(n: usize, k: usize, rows: &[f64]) -> DMatrix<f64> {
    DMatrix::from_row_slice(n, k, rows)
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn vdot(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b)
}

/// Objective over `w * C` restricted to an off-band pattern.
pub struct MaskedObjective<'a> {
    c: &'a DMatrix<f64>,
    pattern: &'a OffBandPattern,
    weight: f64,
    k: usize,
}

impl<'a> MaskedObjective<'a> {
    pub fn new(c: &'a DMatrix<f64>, pattern: &'a OffBandPattern, weight: f64, k: usize) -> Self {
        Self { c, pattern, weight, k }
    }

    pub fn n(&self) -> usize {
        self.c.nrows()
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn pattern(&self) -> &OffBandPattern {
        self.pattern
    }

    /// `w * C[a, b]` read from column `a` (C is symmetric).
    #[inline]
    pub fn entry(&self, a: usize, b: usize) -> f64 {
        self.weight * self.c.as_slice()[a * self.c.nrows() + b]
    }

    pub fn value(&self, v: &[f64]) -> f64 {
        let k = self.k;
        let parts: Vec<f64> = (0..self.n())
            .into_par_iter()
            .map(|a| {
                let va = &v[a * k..(a + 1) * k];
                let col = &self.c.as_slice()[a * self.n()..(a + 1) * self.n()];
                self.pattern
                    .row(a)
                    .iter()
                    .map(|&b| {
                        let b = b as usize;
                        let r = self.weight * col[b] - dot(va, &v[b * k..(b + 1) * k]);
                        r * r
                    })
                    .sum()
            })
            .collect();
        parts.iter().sum()
    }

    /// Value and gradient `-4 (Z o (C - V V^T)) V`.
    pub fn value_grad(&self, v: &[f64], grad: &mut [f64]) -> f64 {
        let k = self.k;
        let n = self.n();
        let parts: Vec<f64> = grad
            .par_chunks_mut(k)
            .enumerate()
            .map(|(a, ga)| {
                ga.iter_mut().for_each(|g| *g = 0.0);
                let va = &v[a * k..(a + 1) * k];
                let col = &self.c.as_slice()[a * n..(a + 1) * n];
                let mut fa = 0.0;
                for &b in self.pattern.row(a) {
                    let b = b as usize;
                    let vb = &v[b * k..(b + 1) * k];
                    let r = self.weight * col[b] - dot(va, vb);
                    fa += r * r;
                    for (g, x) in ga.iter_mut().zip(vb) {
                        *g -= 4.0 * r * x;
                    }
                }
                fa
            })
            .collect();
        parts.iter().sum()
    }

    /// Coefficients `[c0, .., c4]` of `f(V + alpha P)` as a quartic in `alpha`.
    pub fn line_quartic(&self, v: &[f64], p: &[f64]) -> [f64; 5] {
        let k = self.k;
        let n = self.n();
        let parts: Vec<[f64; 6]> = (0..n)
            .into_par_iter()
            .map(|a| {
                let va = &v[a * k..(a + 1) * k];
                let pa = &p[a * k..(a + 1) * k];
                let col = &self.c.as_slice()[a * n..(a + 1) * n];
                let mut s = [0.0; 6];
                for &b in self.pattern.row(a) {
                    let b = b as usize;
                    let vb = &v[b * k..(b + 1) * k];
                    let pb = &p[b * k..(b + 1) * k];
                    let r0 = self.weight * col[b] - dot(va, vb);
                    let am = dot(va, pb) + dot(pa, vb);
                    let bm = dot(pa, pb);
                    s[0] += r0 * r0;
                    s[1] += r0 * am;
                    s[2] += am * am;
                    s[3] += r0 * bm;
                    s[4] += am * bm;
                    s[5] += bm * bm;
                }
                s
            })
            .collect();
        let mut s = [0.0; 6];
        for part in &parts {
            for (acc, x) in s.iter_mut().zip(part) {
                *acc += x;
            }
        }
        [s[0], -2.0 * s[1], s[2] - 2.0 * s[3], 2.0 * s[4], s[5]]
    }
}

pub(crate) fn eval_quartic(c: &[f64; 5], x: f64) -> f64 {
    (((c[4] * x + c[3]) * x + c[2]) * x + c[1]) * x + c[0]
}

/// Real roots of `a3 x^3 + a2 x^2 + a1 x + a0`, polished by Newton steps.
pub(crate) fn cubic_roots(a3: f64, a2: f64, a1: f64, a0: f64) -> Vec<f64> {
    let scale = a3.abs().max(a2.abs()).max(a1.abs()).max(a0.abs());
    if scale == 0.0 {
        return Vec::new();
    }
    let mut roots = Vec::new();
    if a3.abs() <= 1e-14 * scale {
        if a2.abs() <= 1e-14 * scale {
            if a1 != 0.0 {
                roots.push(-a0 / a1);
            }
        } else {
            let disc = a1 * a1 - 4.0 * a2 * a0;
            if disc >= 0.0 {
                let q = -0.5 * (a1 + a1.signum() * disc.sqrt());
                if q != 0.0 {
                    roots.push(q / a2);
                    roots.push(a0 / q);
                } else {
                    roots.push(0.0);
                }
            }
        }
    } else {
        let (b, c, d) = (a2 / a3, a1 / a3, a0 / a3);
        let p = c - b * b / 3.0;
        let q = 2.0 * b * b * b / 27.0 - b * c / 3.0 + d;
        let disc = (q / 2.0).powi(2) + (p / 3.0).powi(3);
        let shift = -b / 3.0;
        if disc > 0.0 {
            let s = disc.sqrt();
            roots.push((-q / 2.0 + s).cbrt() + (-q / 2.0 - s).cbrt() + shift);
        } else if p == 0.0 {
            roots.push(shift);
        } else {
            let r = 2.0 * (-p / 3.0).sqrt();
            let arg = ((3.0 * q) / (2.0 * p) * (-3.0 / p).sqrt()).clamp(-1.0, 1.0);
            let phi = arg.acos() / 3.0;
            for i in 0..3 {
                roots.push(r * (phi - 2.0 * std::f64::consts::PI * i as f64 / 3.0).cos() + shift);
            }
        }
    }
    for x in roots.iter_mut() {
        for _ in 0..3 {
            let f = ((a3 * *x + a2) * *x + a1) * *x + a0;
            let df = (3.0 * a3 * *x + 2.0 * a2) * *x + a1;
            if df == 0.0 {
                break;
            }
            let step = f / df;
            if !step.is_finite() {
                break;
            }
            *x -= step;
        }
    }
    roots
}

/// Minimizing positive step of the quartic, if it decreases the objective.
pub(crate) fn exact_step(c: &[f64; 5]) -> Option<f64> {
    let roots = cubic_roots(4.0 * c[4], 3.0 * c[3], 2.0 * c[2], c[1]);
    let f0 = c[0];
    roots
        .into_iter()
        .filter(|&a| a > 0.0 && a.is_finite())
        .map(|a| (a, eval_quartic(c, a)))
        .filter(|&(_, f)| f < f0)
        .min_by(|x, y| x.1.total_cmp(&y.1))
        .map(|(a, _)| a)
}
