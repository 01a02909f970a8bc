//! Cubic B-spline temporal basis with its roughness penalty.

use nalgebra::DMatrix;

use crate::error::{invalid, Result};
use crate::simgen::time_grid;

/// Basis functions evaluated on the even time grid, with `D = <e_p'', e_q''>`.
#[derive(Debug, Clone)]
pub struct TemporalBasis {
    /// `P x J`, `(E)_{pj} = e_p(t_j)`.
    pub e: DMatrix<f64>,
    /// `P x P` roughness penalty.
    pub d: DMatrix<f64>,
    pub knots: Vec<f64>,
}

impl TemporalBasis {
    pub fn size(&self) -> usize {
        self.e.nrows()
    }

    pub fn n_time(&self) -> usize {
        self.e.ncols()
    }

    /// One basis function per time point (`E = I`); the penalty is the squared
    /// second-difference operator scaled to the unit interval.
    pub fn identity(j: usize) -> Self {
        let mut d = DMatrix::zeros(j, j);
        if j >= 3 {
            let h = 1.0 / (j - 1) as f64;
            let scale = 1.0 / h.powi(3);
            for r in 0..j - 2 {
                let w = [1.0, -2.0, 1.0];
                for a in 0..3 {
                    for b in 0..3 {
                        d[(r + a, r + b)] += scale * w[a] * w[b];
                    }
                }
            }
        }
        Self {
            e: DMatrix::identity(j, j),
            d,
            knots: Vec::new(),
        }
    }
}

/// `J/4` functions, but never fewer than the four a cubic needs.
///
/// Capping this (e.g. at 40) under-resolves factors whose squared-exponential
/// length scale is a few dozen time points, and the basis bias then outweighs
/// the denoising gained over pointwise least squares.
pub fn default_basis_size(j: usize) -> usize {
    (j / 4).max(4)
}

/// Clamped cubic B-splines on `[0, 1]` with `P - 4` equally spaced interior knots.
pub fn build_basis(p: usize, j: usize) -> Result<TemporalBasis> {
    if p < 4 {
        return Err(invalid(format!("a cubic B-spline basis needs at least 4 functions, got {p}")));
    }
    if p > j {
        return Err(invalid(format!("basis size {p} exceeds the {j} time points")));
    }
    let knots = clamped_knots(p, 3);
    let times = time_grid(j);
    let mut e = DMatrix::zeros(p, j);
    for (c, &t) in times.iter().enumerate() {
        for (r, v) in basis_derivs(&knots, 3, 0, t).into_iter().enumerate() {
            e[(r, c)] = v;
        }
    }
    // second derivatives are piecewise linear, so Simpson's rule on each knot span is exact
    let mut d = DMatrix::zeros(p, p);
    for w in knots.windows(2) {
        let (a, b) = (w[0], w[1]);
        if b <= a {
            continue;
        }
        let h = b - a;
        for (x, wt) in [(a, h / 6.0), (0.5 * (a + b), 4.0 * h / 6.0), (b, h / 6.0)] {
            let s = basis_derivs_in(&knots, 3, 2, x, a);
            for r in 0..p {
                if s[r] == 0.0 {
                    continue;
                }
                for c in 0..p {
                    d[(r, c)] += wt * (s[r] * s[c]);
                }
            }
        }
    }
    Ok(TemporalBasis { e, d, knots })
}

fn clamped_knots(p: usize, degree: usize) -> Vec<f64> {
    let interior = p - degree - 1;
    let mut knots = vec![0.0; degree + 1];
    for i in 1..=interior {
        knots.push(i as f64 / (interior + 1) as f64);
    }
    knots.extend(std::iter::repeat_n(1.0, degree + 1));
    knots
}

/// Span `[t_s, t_{s+1})` containing `x`; the right end belongs to the last nonempty span.
fn span_of(knots: &[f64], x: f64) -> usize {
    let last = knots
        .windows(2)
        .rposition(|w| w[1] > w[0])
        .expect("knot vector has a nonempty span");
    if x >= knots[last + 1] {
        return last;
    }
    knots
        .windows(2)
        .position(|w| w[0] <= x && x < w[1])
        .unwrap_or(0)
}

/// `d`-th derivatives of all degree-`p` B-splines at `x`.
pub fn basis_derivs(knots: &[f64], p: usize, d: usize, x: f64) -> Vec<f64> {
    let s = span_of(knots, x);
    derivs_on_span(knots, p, d, x, s)
}

/// As [`basis_derivs`], evaluated with the polynomial pieces of the span starting at `left`.
fn basis_derivs_in(knots: &[f64], p: usize, d: usize, x: f64, left: f64) -> Vec<f64> {
    let s = knots
        .windows(2)
        .position(|w| w[0] == left && w[1] > w[0])
        .expect("span start is a knot");
    derivs_on_span(knots, p, d, x, s)
}

fn ratio(a: f64, b: f64) -> f64 {
    if b == 0.0 {
        0.0
    } else {
        a / b
    }
}

fn derivs_on_span(knots: &[f64], p: usize, d: usize, x: f64, s: usize) -> Vec<f64> {
    let n = knots.len() - p - 1;
    if d > 0 {
        let lower = derivs_on_span(knots, p - 1, d - 1, x, s);
        return (0..n)
            .map(|i| {
                p as f64
                    * (ratio(lower[i], knots[i + p] - knots[i])
                        - ratio(lower[i + 1], knots[i + p + 1] - knots[i + 1]))
            })
            .collect();
    }
    let mut b = vec![0.0; knots.len() - 1];
    b[s] = 1.0;
    for q in 1..=p {
        let m = knots.len() - q - 1;
        let mut next = vec![0.0; m];
        for (i, slot) in next.iter_mut().enumerate() {
            *slot = ratio((x - knots[i]) * b[i], knots[i + q] - knots[i])
                + ratio((knots[i + q + 1] - x) * b[i + 1], knots[i + q + 1] - knots[i + 1]);
        }
        b = next;
    }
    b
}
