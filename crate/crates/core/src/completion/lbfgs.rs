//! Limited-memory quasi-Newton minimization with an exact line search
//! (the objective is a quartic along any line).

use std::collections::VecDeque;

use crate::error::{Error, Result};

use super::objective::{exact_step, from_rows, vdot, MaskedObjective};

#[derive(Debug, Clone, Copy)]
pub struct LbfgsSettings {
    pub memory: usize,
    pub max_iters: usize,
    pub grad_tol: f64,
}

#[derive(Debug, Clone)]
pub struct SolveTrace {
    pub iterations: usize,
    pub value: f64,
    pub grad_norm: f64,
    pub converged: bool,
}

struct Pair {
    s: Vec<f64>,
    y: Vec<f64>,
    rho: f64,
}

fn direction(g: &[f64], mem: &VecDeque<Pair>) -> Vec<f64> {
    let mut q = g.to_vec();
    let mut alphas = Vec::with_capacity(mem.len());
    for p in mem.iter().rev() {
        let a = p.rho * vdot(&p.s, &q);
        for (qi, yi) in q.iter_mut().zip(&p.y) {
            *qi -= a * yi;
        }
        alphas.push(a);
    }
    if let Some(last) = mem.back() {
        let gamma = vdot(&last.s, &last.y) / vdot(&last.y, &last.y);
        q.iter_mut().for_each(|x| *x *= gamma);
    }
    for (p, a) in mem.iter().zip(alphas.iter().rev()) {
        let b = p.rho * vdot(&p.y, &q);
        for (qi, si) in q.iter_mut().zip(&p.s) {
            *qi += si * (a - b);
        }
    }
    q.iter_mut().for_each(|x| *x = -*x);
    q
}

/// Minimize in place; `x` is the row-major factor.
pub fn minimize(obj: &MaskedObjective, x: &mut Vec<f64>, s: &LbfgsSettings) -> Result<SolveTrace> {
    let len = x.len();
    let mut g = vec![0.0; len];
    let mut f = obj.value_grad(x, &mut g);
    if !f.is_finite() {
        return Err(Error::Numerical("non-finite objective at the starting point".into()));
    }
    let mut mem: VecDeque<Pair> = VecDeque::with_capacity(s.memory);
    let mut g_new = vec![0.0; len];
    let mut stall = 0;
    let mut iterations = 0;
    let mut converged = false;
    while iterations < s.max_iters {
        let gnorm = vdot(&g, &g).sqrt();
        if gnorm <= s.grad_tol * (1.0 + f) {
            converged = true;
            break;
        }
        iterations += 1;
        let mut d = direction(&g, &mem);
        if vdot(&g, &d) >= 0.0 {
            mem.clear();
            d = g.iter().map(|v| -v).collect();
        }
        let Some(alpha) = exact_step(&obj.line_quartic(x, &d)) else {
            if mem.is_empty() {
                break;
            }
            mem.clear();
            continue;
        };
        let x_new: Vec<f64> = x.iter().zip(&d).map(|(a, b)| a + alpha * b).collect();
        let f_new = obj.value_grad(&x_new, &mut g_new);
        if !f_new.is_finite() {
            return Err(Error::Diverged {
                iterations,
                last_value: f,
                last_iterate: Box::new(from_rows(obj.n(), obj.k(), x)),
            });
        }
        if f_new > f {
            if mem.is_empty() {
                break;
            }
            mem.clear();
            continue;
        }
        let step: Vec<f64> = d.iter().map(|v| alpha * v).collect();
        let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = vdot(&step, &y);
        if sy > 1e-12 * vdot(&step, &step).sqrt() * vdot(&y, &y).sqrt() {
            if mem.len() == s.memory {
                mem.pop_front();
            }
            mem.push_back(Pair { s: step, y, rho: 1.0 / sy });
        }
        if f - f_new <= 1e-15 * f.max(f64::MIN_POSITIVE) {
            stall += 1;
        } else {
            stall = 0;
        }
        *x = x_new;
        f = f_new;
        std::mem::swap(&mut g, &mut g_new);
        if stall >= 5 {
            break;
        }
    }
    let grad_norm = vdot(&g, &g).sqrt();
    converged |= grad_norm <= s.grad_tol * (1.0 + f);
    Ok(SolveTrace {
        iterations,
        value: f,
        grad_norm,
        converged,
    })
}
