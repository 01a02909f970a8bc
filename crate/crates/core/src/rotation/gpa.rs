//! Gradient projection algorithms (Jennrich 2001, 2002) for orthogonal and
//! oblique rotation, in the convention `L = A T` (orthogonal) and
//! `L = A (T^T)^{-1}` with unit-length columns of `T` (oblique).

use nalgebra::DMatrix;

use super::criteria::RotationMethod;

#[derive(Debug, Clone)]
pub struct GpaOutcome {
    pub t: DMatrix<f64>,
    pub f: f64,
    pub trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct GpaSettings {
    pub tol: f64,
    pub max_iters: usize,
}

const MAX_HALVINGS: usize = 40;

fn polar(x: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let svd = x.clone().svd(true, true);
    Some(svd.u? * svd.v_t?)
}

pub fn orthogonal(a: &DMatrix<f64>, t0: &DMatrix<f64>, method: RotationMethod, s: &GpaSettings) -> GpaOutcome {
    let mut t = t0.clone();
    let (mut f, gq) = method.value_grad(&(a * &t));
    let mut g = a.transpose() * gq;
    let mut trace = vec![f];
    let mut al = 1.0;
    let mut converged = false;
    let mut iterations = 0;
    while iterations < s.max_iters {
        let m = t.transpose() * &g;
        let sym = (&m + m.transpose()) * 0.5;
        let gp = &g - &t * sym;
        let sn = gp.norm();
        if sn < s.tol {
            converged = true;
            break;
        }
        iterations += 1;
        al *= 2.0;
        let mut accepted = None;
        for _ in 0..=MAX_HALVINGS {
            let Some(tt) = polar(&(&t - &gp * al)) else {
                al *= 0.5;
                continue;
            };
            let (ft, gqt) = method.value_grad(&(a * &tt));
            if ft < f - 0.5 * sn * sn * al {
                accepted = Some((tt, ft, gqt));
                break;
            }
            al *= 0.5;
        }
        let Some((tt, ft, gqt)) = accepted else { break };
        t = tt;
        f = ft;
        g = a.transpose() * gqt;
        trace.push(f);
    }
    GpaOutcome {
        t,
        f,
        trace,
        iterations,
        converged,
    }
}

fn unit_columns(x: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = x.clone();
    for mut col in out.column_iter_mut() {
        let n = col.norm();
        col.unscale_mut(n);
    }
    out
}

/// Oblique loadings and the gradient with respect to `T`; `None` if `T` is singular.
fn oblique_eval(a: &DMatrix<f64>, t: &DMatrix<f64>, method: RotationMethod) -> Option<(f64, DMatrix<f64>)> {
    let ti = t.clone().try_inverse()?;
    let l = a * ti.transpose();
    let (f, gq) = method.value_grad(&l);
    let g = -(l.transpose() * gq * ti).transpose();
    Some((f, g))
}

pub fn oblique(a: &DMatrix<f64>, t0: &DMatrix<f64>, method: RotationMethod, s: &GpaSettings) -> Option<GpaOutcome> {
    let mut t = t0.clone();
    let (mut f, mut g) = oblique_eval(a, &t, method)?;
    let mut trace = vec![f];
    let mut al = 1.0;
    let mut converged = false;
    let mut iterations = 0;
    let k = t.ncols();
    while iterations < s.max_iters {
        let mut gp = g.clone();
        for c in 0..k {
            let d = t.column(c).dot(&g.column(c));
            gp.column_mut(c).axpy(-d, &t.column(c), 1.0);
        }
        let sn = gp.norm();
        if sn < s.tol {
            converged = true;
            break;
        }
        iterations += 1;
        al *= 2.0;
        let mut accepted = None;
        for _ in 0..=MAX_HALVINGS {
            let tt = unit_columns(&(&t - &gp * al));
            if let Some((ft, gt)) = oblique_eval(a, &tt, method) {
                if ft < f - 0.5 * sn * sn * al && tt.determinant().abs() > 1e-10 {
                    accepted = Some((tt, ft, gt));
                    break;
                }
            }
            al *= 0.5;
        }
        let Some((tt, ft, gt)) = accepted else { break };
        t = tt;
        f = ft;
        g = gt;
        trace.push(f);
    }
    Some(GpaOutcome {
        t,
        f,
        trace,
        iterations,
        converged,
    })
}
