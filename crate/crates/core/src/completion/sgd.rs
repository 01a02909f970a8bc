//! Stratified block-parallel stochastic gradient descent.
//!
//! Voxels are permuted (by seed) into `B` blocks. An epoch is a sequence of
//! strata; each stratum is a set of disjoint block pairs, so the workers of a
//! stratum never touch the same row of `V`. The off-diagonal strata come from
//! a round-robin tournament over the blocks and one extra stratum pairs every
//! block with itself, so every unordered masked pair is visited exactly once
//! per epoch.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::covassembly::OffBandPattern;
use crate::error::{Error, Result};

use super::lbfgs::SolveTrace;
use super::objective::{from_rows, MaskedObjective};

#[derive(Debug, Clone)]
pub struct Schedule {
    pub blocks: Vec<Vec<usize>>,
    pub strata: Vec<Vec<(usize, usize)>>,
    block_of: Vec<usize>,
    local: Vec<usize>,
}

/// Block partition and stratum sequence for `n` voxels.
pub fn schedule(n: usize, n_blocks: usize, seed: u64) -> Schedule {
    let b = n_blocks.clamp(1, n.max(1));
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut blocks = vec![Vec::new(); b];
    for (i, &v) in perm.iter().enumerate() {
        blocks[i % b].push(v);
    }
    for blk in &mut blocks {
        blk.sort_unstable();
    }
    let mut block_of = vec![0; n];
    let mut local = vec![0; n];
    for (id, blk) in blocks.iter().enumerate() {
        for (pos, &v) in blk.iter().enumerate() {
            block_of[v] = id;
            local[v] = pos;
        }
    }
    // circle method; a phantom team pads odd block counts
    let teams = if b % 2 == 0 { b } else { b + 1 };
    let mut strata = Vec::new();
    if teams > 1 {
        let mut ring: Vec<usize> = (1..teams).collect();
        for _ in 0..teams - 1 {
            let mut round = Vec::new();
            let lineup: Vec<usize> = std::iter::once(0).chain(ring.iter().copied()).collect();
            for i in 0..teams / 2 {
                let (p, q) = (lineup[i], lineup[teams - 1 - i]);
                if p < b && q < b {
                    round.push((p.min(q), p.max(q)));
                }
            }
            if !round.is_empty() {
                strata.push(round);
            }
            ring.rotate_right(1);
        }
    }
    strata.push((0..b).map(|p| (p, p)).collect());
    Schedule {
        blocks,
        strata,
        block_of,
        local,
    }
}

impl Schedule {
    /// Unordered masked pairs `(a, b)` with `a <= b` visited by block pair `(p, q)`.
    pub fn pairs<'a>(
        &'a self,
        pattern: &'a OffBandPattern,
        p: usize,
        q: usize,
    ) -> impl Iterator<Item = (usize, usize)> + 'a {
        self.blocks[p].iter().flat_map(move |&a| {
            pattern.row(a).iter().filter_map(move |&b| {
                let b = b as usize;
                let ok = self.block_of[b] == q && (p != q || b >= a);
                ok.then_some((a, b))
            })
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SgdSettings {
    pub n_blocks: usize,
    pub epochs: usize,
    pub learning_rate: Option<f64>,
    pub seed: u64,
}

fn sweep_pair(
    obj: &MaskedObjective,
    sched: &Schedule,
    v: &[f64],
    p: usize,
    q: usize,
    eta: f64,
) -> (Vec<f64>, Vec<f64>) {
    let k = obj.k();
    let gather = |blk: usize| -> Vec<f64> {
        sched.blocks[blk]
            .iter()
            .flat_map(|&a| v[a * k..(a + 1) * k].iter().copied())
            .collect()
    };
    let mut vp = gather(p);
    let mut vq = if p == q { Vec::new() } else { gather(q) };
    let mut old = vec![0.0; k];
    for (a, b) in sched.pairs(obj.pattern(), p, q) {
        let la = sched.local[a] * k;
        let lb = sched.local[b] * k;
        let c = obj.entry(a, b);
        if p == q && a == b {
            let va = &mut vp[la..la + k];
            let r = c - va.iter().map(|x| x * x).sum::<f64>();
            va.iter_mut().for_each(|x| *x += eta * 4.0 * r * *x);
            continue;
        }
        let (va, vb): (&mut [f64], &mut [f64]) = if p == q {
            if la < lb {
                let (lo, hi) = vp.split_at_mut(lb);
                (&mut lo[la..la + k], &mut hi[..k])
            } else {
                let (lo, hi) = vp.split_at_mut(la);
                (&mut hi[..k], &mut lo[lb..lb + k])
            }
        } else {
            (&mut vp[la..la + k], &mut vq[lb..lb + k])
        };
        let r = c - va.iter().zip(vb.iter()).map(|(x, y)| x * y).sum::<f64>();
        old.copy_from_slice(va);
        for (x, y) in va.iter_mut().zip(vb.iter()) {
            *x += eta * 4.0 * r * y;
        }
        for (y, x) in vb.iter_mut().zip(&old) {
            *y += eta * 4.0 * r * x;
        }
    }
    (vp, vq)
}

fn epoch(obj: &MaskedObjective, sched: &Schedule, v: &mut [f64], eta: f64, rng: &mut ChaCha8Rng) {
    let k = obj.k();
    let mut order: Vec<usize> = (0..sched.strata.len()).collect();
    order.shuffle(rng);
    for s in order {
        let results: Vec<(usize, usize, Vec<f64>, Vec<f64>)> = sched.strata[s]
            .par_iter()
            .map(|&(p, q)| {
                let (vp, vq) = sweep_pair(obj, sched, v, p, q, eta);
                (p, q, vp, vq)
            })
            .collect();
        for (p, q, vp, vq) in results {
            for (pos, &a) in sched.blocks[p].iter().enumerate() {
                v[a * k..(a + 1) * k].copy_from_slice(&vp[pos * k..(pos + 1) * k]);
            }
            if p != q {
                for (pos, &b) in sched.blocks[q].iter().enumerate() {
                    v[b * k..(b + 1) * k].copy_from_slice(&vq[pos * k..(pos + 1) * k]);
                }
            }
        }
    }
}

/// Run bold-driver SGD epochs in place.
pub fn minimize(obj: &MaskedObjective, x: &mut Vec<f64>, s: &SgdSettings) -> Result<SolveTrace> {
    let sched = schedule(obj.n(), s.n_blocks, s.seed);
    let k = obj.k();
    let n = obj.n();
    let nnz = obj.pattern().count().max(1) as f64;
    let mean_sq = x.iter().map(|v| v * v).sum::<f64>() / n.max(1) as f64;
    let mut eta = s
        .learning_rate
        .unwrap_or_else(|| 0.1 / (4.0 * (nnz / n as f64) * mean_sq.max(1e-12) / k as f64));
    let mut f = obj.value(x);
    let mut rng = ChaCha8Rng::seed_from_u64(s.seed ^ 0x5eed_5eed);
    let mut trial = x.clone();
    let mut iterations = 0;
    for _ in 0..s.epochs {
        iterations += 1;
        trial.copy_from_slice(x);
        epoch(obj, &sched, &mut trial, eta, &mut rng);
        let f_new = obj.value(&trial);
        if !f_new.is_finite() {
            if eta < 1e-300 {
                return Err(Error::Diverged {
                    iterations,
                    last_value: f,
                    last_iterate: Box::new(from_rows(n, k, x)),
                });
            }
            eta *= 0.5;
            continue;
        }
        if f_new < f {
            std::mem::swap(x, &mut trial);
            f = f_new;
            eta *= 1.05;
        } else {
            eta *= 0.5;
        }
    }
    let mut g = vec![0.0; x.len()];
    let f = obj.value_grad(x, &mut g);
    Ok(SolveTrace {
        iterations,
        value: f,
        grad_norm: g.iter().map(|v| v * v).sum::<f64>().sqrt(),
        converged: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    #[test]
    fn every_masked_pair_once_per_epoch() {
        for blocks in [1, 3, 4, 7] {
            let n = 23;
            let pattern = OffBandPattern::from_fn(n, |a, b| (a * 3 + b * 3) % 4 != 0 || a == b);
            let sched = schedule(n, blocks, 9);
            let mut seen: HashMap<(usize, usize), usize> = HashMap::new();
            for stratum in &sched.strata {
                let mut rows_used = vec![false; blocks];
                for &(p, q) in stratum {
                    assert!(!rows_used[p] && (p == q || !rows_used[q]), "blocks overlap in a stratum");
                    rows_used[p] = true;
                    rows_used[q] = true;
                    for (a, b) in sched.pairs(&pattern, p, q) {
                        *seen.entry((a.min(b), a.max(b))).or_default() += 1;
                    }
                }
            }
            for a in 0..n {
                for &b in pattern.row(a) {
                    let b = b as usize;
                    if a <= b {
                        assert_eq!(seen.get(&(a, b)), Some(&1), "pair ({a},{b}) with {blocks} blocks");
                    }
                }
            }
        }
    }
}
