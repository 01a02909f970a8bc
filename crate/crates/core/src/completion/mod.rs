//! Factorized masked low-rank completion of the average spatial covariance.
//!
//! For each candidate rank `j` the solver minimizes
//! `f(V) = || Z o (C - V V^T) ||_F^2` over `V in R^{M x j}`; the sequence of
//! minima forms a scree curve from which the number of factors is read off.

mod lbfgs;
pub mod objective;
pub mod sgd;
pub mod spectral;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::covassembly::{masked_lowrank_residual, MaskedCovariance, OffBandPattern};
use crate::error::{invalid, Error, Result};
use crate::grid::SpatialGrid;
use crate::linalg::{normalize_signs, sym_eigen_desc};
use crate::loadings::{LoadingSet, Stage};

pub use lbfgs::SolveTrace;
pub use spectral::SpectralMethod;

use objective::{from_rows, to_rows, MaskedObjective};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, schemars::JsonSchema, Default)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    #[default]
    QuasiNewton,
    BlockSgd,
    /// Block SGD warm-up followed by quasi-Newton polishing.
    Hybrid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct CompletionOptions {
    pub max_rank: usize,
    pub optimizer: Optimizer,
    /// Quasi-Newton iteration cap.
    pub max_iters: usize,
    /// Stop once `||grad|| <= grad_tol * (1 + f)` on the normalized problem.
    pub grad_tol: f64,
    /// Quasi-Newton memory.
    pub memory: usize,
    /// Number of voxel blocks for the stratified SGD schedule.
    pub n_strata: usize,
    pub sgd_epochs: usize,
    /// SGD epochs before switching to quasi-Newton in hybrid mode.
    pub warmup_epochs: usize,
    pub learning_rate: Option<f64>,
    pub spectral: SpectralMethod,
    pub seed: u64,
}

impl Default for CompletionOptions {
    fn default() -> Self {
        Self {
            max_rank: 4,
            optimizer: Optimizer::QuasiNewton,
            max_iters: 3000,
            grad_tol: 1e-9,
            memory: 10,
            n_strata: 8,
            sgd_epochs: 300,
            warmup_epochs: 20,
            learning_rate: None,
            spectral: SpectralMethod::Auto,
            seed: 0,
        }
    }
}

impl CompletionOptions {
    pub fn validate(&self) -> Result<()> {
        if self.max_rank == 0 {
            return Err(invalid("max_rank must be at least 1"));
        }
        if !(self.grad_tol > 0.0) {
            return Err(invalid("grad_tol must be positive"));
        }
        if self.memory == 0 || self.n_strata == 0 {
            return Err(invalid("memory and n_strata must be positive"));
        }
        Ok(())
    }
}

/// `K* = prod_d floor((1/2 - delta_d) M_d - 1)`.
pub fn rank_cap_dims(dims: &[usize], deltas: &[f64]) -> Result<usize> {
    if dims.len() != deltas.len() {
        return Err(invalid("one bandwidth per dimension required"));
    }
    let mut cap = 1usize;
    for (&m, &d) in dims.iter().zip(deltas) {
        if !(d >= 0.0) || d >= 0.5 {
            return Err(Error::Identifiability(format!(
                "bandwidth {d} must be below 1/2"
            )));
        }
        // the nudge keeps exact products such as 0.4 * 40 from flooring down
        let f = ((0.5 - d) * m as f64 - 1.0 + 1e-9).floor();
        if f < 1.0 {
            return Err(Error::Identifiability(format!(
                "bandwidth {d} leaves no identifiable factors on a dimension of size {m}"
            )));
        }
        cap *= f as usize;
    }
    Ok(cap)
}

pub fn rank_cap(grid: &SpatialGrid, delta: f64) -> Result<usize> {
    rank_cap_dims(grid.dims(), &vec![delta; grid.ndim()])
}

fn cap_for(cov: &MaskedCovariance) -> Result<usize> {
    rank_cap_dims(cov.mask.grid().dims(), cov.mask.deltas())
}

/// `V_0 = U_j Sigma_j^{1/2}` from the leading eigenpairs of `C`.
pub fn spectral_init(c: &DMatrix<f64>, j: usize, method: SpectralMethod, seed: u64) -> Result<DMatrix<f64>> {
    if j == 0 || j > c.nrows() {
        return Err(invalid(format!("rank {j} outside 1..={}", c.nrows())));
    }
    let (vals, vecs) = spectral::top_eigenpairs(c, j, method, seed);
    if vals.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("eigensolver returned non-finite values".into()));
    }
    Ok(spectral::scaled_factor(&vals, &vecs, j))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StartKind {
    Spectral,
    Warm,
    /// Previous rank's solution padded with a zero column.
    Embedded,
    Given,
}

/// Solution at one rank.
#[derive(Debug, Clone)]
pub struct RankFit {
    pub j: usize,
    pub v: DMatrix<f64>,
    pub f: f64,
    pub iterations: usize,
    /// Gradient norm on the normalized problem.
    pub grad_norm: f64,
    pub converged: bool,
    pub start: StartKind,
    pub rescaled: bool,
}

/// Minimize the masked objective from a given start.
pub fn complete_from(
    c: &DMatrix<f64>,
    pattern: &OffBandPattern,
    v0: &DMatrix<f64>,
    opts: &CompletionOptions,
) -> Result<RankFit> {
    opts.validate()?;
    let (n, j) = v0.shape();
    if c.nrows() != n || !c.is_square() || pattern.dim() != n {
        return Err(Error::Shape(format!(
            "covariance {:?}, start {:?}, mask {}",
            c.shape(),
            v0.shape(),
            pattern.dim()
        )));
    }
    if pattern.count() == 0 {
        return Err(invalid("mask has no off-band entries"));
    }
    if v0.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite);
    }
    // work on C / ||Z o C|| so that tolerances are scale free
    let scale = masked_lowrank_residual(c, &DMatrix::zeros(n, 1), pattern)?.sqrt();
    let w = if scale > 0.0 { 1.0 / scale } else { 1.0 };
    let obj = MaskedObjective::new(c, pattern, w, j);
    let x0: Vec<f64> = to_rows(v0).into_iter().map(|x| x * w.sqrt()).collect();
    let f0 = obj.value(&x0);
    let mut x = x0.clone();
    let qn = lbfgs::LbfgsSettings {
        memory: opts.memory,
        max_iters: opts.max_iters,
        grad_tol: opts.grad_tol,
    };
    let sgd_settings = |epochs| sgd::SgdSettings {
        n_blocks: opts.n_strata,
        epochs,
        learning_rate: opts.learning_rate,
        seed: opts.seed,
    };
    let trace = match opts.optimizer {
        Optimizer::QuasiNewton => lbfgs::minimize(&obj, &mut x, &qn)?,
        Optimizer::BlockSgd => sgd::minimize(&obj, &mut x, &sgd_settings(opts.sgd_epochs))?,
        Optimizer::Hybrid => {
            let warm = sgd::minimize(&obj, &mut x, &sgd_settings(opts.warmup_epochs))?;
            let mut polish = lbfgs::minimize(&obj, &mut x, &qn)?;
            polish.iterations += warm.iterations;
            polish
        }
    };
    if trace.value > f0 {
        x = x0;
    }
    let mut v = from_rows(n, j, &x) / w.sqrt();
    let tr = c.trace();
    let vv = v.norm_squared();
    let mut rescaled = false;
    if tr > 0.0 && vv > tr {
        log::info!("trace constraint active: rescaling factor by {:.6}", (tr / vv).sqrt());
        v *= (tr / vv).sqrt();
        rescaled = true;
    }
    let f = masked_lowrank_residual(c, &v, pattern)?;
    Ok(RankFit {
        j,
        v,
        f,
        iterations: trace.iterations,
        grad_norm: trace.grad_norm,
        converged: trace.converged,
        start: StartKind::Given,
        rescaled,
    })
}

/// Rank-`j` completion from the spectral initialization.
pub fn complete_rank(cov: &MaskedCovariance, j: usize, opts: &CompletionOptions) -> Result<RankFit> {
    let cap = cap_for(cov)?;
    if j == 0 || j > cap {
        return Err(Error::Identifiability(format!(
            "rank {j} exceeds the identifiability cap K* = {cap}"
        )));
    }
    let v0 = spectral_init(&cov.matrix, j, opts.spectral, opts.seed)?;
    let pattern = cov.mask.pattern();
    let mut fit = complete_from(&cov.matrix, &pattern, &v0, opts)?;
    fit.start = StartKind::Spectral;
    Ok(fit)
}

#[derive(Debug, Clone)]
pub struct RankPath {
    pub entries: Vec<RankFit>,
}

impl RankPath {
    pub fn values(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.f).collect()
    }

    pub fn get(&self, j: usize) -> Option<&RankFit> {
        self.entries.iter().find(|e| e.j == j)
    }

    /// Scree rows `(j, f_j, f_{j+1} / f_j)`; the last ratio is absent.
    pub fn scree(&self) -> Vec<(usize, f64, Option<f64>)> {
        let f = self.values();
        (0..f.len())
            .map(|i| (self.entries[i].j, f[i], f.get(i + 1).map(|next| next / f[i])))
            .collect()
    }
}

fn masked_residual_matrix(c: &DMatrix<f64>, v: &DMatrix<f64>, pattern: &OffBandPattern) -> DMatrix<f64> {
    let n = c.nrows();
    let mut r = DMatrix::zeros(n, n);
    for a in 0..n {
        for &b in pattern.row(a) {
            let b = b as usize;
            r[(a, b)] = c[(a, b)] - v.row(a).dot(&v.row(b));
        }
    }
    r
}

/// Fit ranks `1..=max_rank`, warm-starting each from the previous solution.
pub fn rank_path(cov: &MaskedCovariance, max_rank: usize, opts: &CompletionOptions) -> Result<RankPath> {
    opts.validate()?;
    let cap = cap_for(cov)?;
    if max_rank == 0 || max_rank > cap {
        return Err(Error::Identifiability(format!(
            "maximum rank {max_rank} outside 1..=K* = {cap}"
        )));
    }
    if max_rank > cov.dim() {
        return Err(invalid(format!("maximum rank {max_rank} exceeds {} voxels", cov.dim())));
    }
    let c = &cov.matrix;
    let pattern = cov.mask.pattern();
    let (vals, vecs) = spectral::top_eigenpairs(c, max_rank, opts.spectral, opts.seed);
    let mut entries: Vec<RankFit> = Vec::with_capacity(max_rank);
    for j in 1..=max_rank {
        let spectral_start = spectral::scaled_factor(&vals, &vecs, j);
        let (start, kind) = match entries.last() {
            None => (spectral_start, StartKind::Spectral),
            Some(prev) => {
                let resid = masked_residual_matrix(c, &prev.v, &pattern);
                let (lv, lu) = spectral::top_eigenpairs(&resid, 1, opts.spectral, opts.seed.wrapping_add(j as u64));
                let mut warm = prev.v.clone().insert_column(j - 1, 0.0);
                if lv[0] > 0.0 {
                    warm.set_column(j - 1, &(lu.column(0) * lv[0].sqrt()));
                }
                let fw = masked_lowrank_residual(c, &warm, &pattern)?;
                let fs = masked_lowrank_residual(c, &spectral_start, &pattern)?;
                if fw <= fs {
                    (warm, StartKind::Warm)
                } else {
                    (spectral_start, StartKind::Spectral)
                }
            }
        };
        let mut fit = complete_from(c, &pattern, &start, opts)?;
        fit.start = kind;
        if let Some(prev) = entries.last() {
            if fit.f > prev.f {
                log::debug!("rank {j} fit worse than rank {}; embedding previous solution", j - 1);
                fit = RankFit {
                    j,
                    v: prev.v.clone().insert_column(j - 1, 0.0),
                    f: prev.f,
                    iterations: fit.iterations,
                    grad_norm: fit.grad_norm,
                    converged: fit.converged,
                    start: StartKind::Embedded,
                    rescaled: fit.rescaled,
                };
            }
        }
        log::debug!("rank {j}: f = {:.6e} after {} iterations", fit.f, fit.iterations);
        entries.push(fit);
    }
    Ok(RankPath { entries })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, schemars::JsonSchema, Default)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum RankSelection {
    /// Largest second difference of `log f_j`.
    #[default]
    Elbow,
    /// Smallest `j` with `f_j < c`.
    Threshold { c: f64 },
    Fixed { j: usize },
}

pub fn select_rank_values(f: &[f64], mode: RankSelection) -> Result<usize> {
    if f.is_empty() {
        return Err(invalid("empty rank path"));
    }
    match mode {
        RankSelection::Fixed { j } => {
            if j == 0 {
                return Err(invalid("fixed rank must be positive"));
            }
            Ok(j)
        }
        RankSelection::Threshold { c } => f
            .iter()
            .position(|&v| v < c)
            .map(|i| i + 1)
            .ok_or_else(|| {
                let min = f.iter().cloned().fold(f64::INFINITY, f64::min);
                invalid(format!("no rank reaches f < {c}; smallest objective is {min:e}"))
            }),
        RankSelection::Elbow => {
            if f.len() < 3 {
                return Err(invalid("elbow selection needs at least three ranks"));
            }
            let lf: Vec<f64> = f.iter().map(|v| v.max(f64::MIN_POSITIVE).ln()).collect();
            let mut best = (f64::NEG_INFINITY, 2);
            for j in 2..f.len() {
                let d2 = lf[j - 2] - 2.0 * lf[j - 1] + lf[j];
                if d2 > best.0 {
                    best = (d2, j);
                }
            }
            Ok(best.1)
        }
    }
}

pub fn select_rank(path: &RankPath, mode: RankSelection) -> Result<usize> {
    select_rank_values(&path.values(), mode)
}

/// Global covariance estimate `G = V V^T` with its scaled eigenvectors.
#[derive(Debug, Clone)]
pub struct GlobalCovEstimate {
    pub k_hat: usize,
    pub v: DMatrix<f64>,
    pub eigenvalues: DVector<f64>,
    pub loadings: LoadingSet,
}

/// Scaled eigenvectors of `V V^T` via the `K x K` Gram matrix, descending, sign-normalized.
pub fn extract_loadings(v: &DMatrix<f64>, grid: &SpatialGrid) -> Result<GlobalCovEstimate> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite);
    }
    let k = v.ncols();
    if k == 0 {
        return Err(invalid("factor has no columns"));
    }
    let gram = v.transpose() * v;
    let (vals, w) = sym_eigen_desc(&gram);
    let top = vals[0].max(0.0);
    if top == 0.0 || vals[k - 1] <= 1e-13 * top {
        return Err(Error::Numerical(format!(
            "factor is rank deficient (eigenvalues {:?}): zero column",
            vals.as_slice()
        )));
    }
    let mut l = v * w;
    normalize_signs(&mut l);
    let loadings = LoadingSet::new(grid.clone(), l, Stage::Initial)?;
    Ok(GlobalCovEstimate {
        k_hat: k,
        v: v.clone(),
        eigenvalues: vals,
        loadings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::covassembly::{build_band_mask, BandMask, BandRule};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn gauss(n: usize, k: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        DMatrix::from_fn(n, k, |_, _| rng.sample::<f64, _>(StandardNormal))
    }

    #[test]
    fn rank_cap_examples() {
        let g = SpatialGrid::new(vec![40, 40]).unwrap();
        assert_eq!(rank_cap(&g, 0.1).unwrap(), 225);
        assert!(matches!(rank_cap(&g, 0.5), Err(Error::Identifiability(_))));
        let g1 = SpatialGrid::new(vec![10]).unwrap();
        assert_eq!(rank_cap(&g1, 0.1).unwrap(), 3);
    }

    #[test]
    fn spectral_init_on_diagonal() {
        let c = DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 1.0, 0.0]));
        let v = spectral_init(&c, 1, SpectralMethod::Exact, 0).unwrap();
        assert!((v[(0, 0)].abs() - 2.0).abs() < 1e-14 && v[(1, 0)] == 0.0 && v[(2, 0)] == 0.0);
        let v = spectral_init(&c, 2, SpectralMethod::Exact, 0).unwrap();
        assert!((v[(0, 0)].abs() - 2.0).abs() < 1e-14);
        assert!((v[(1, 1)].abs() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn randomized_init_matches_exact_subspace() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = gauss(100, 3, &mut rng);
        let c = &f * f.transpose();
        let a = spectral_init(&c, 3, SpectralMethod::Exact, 0).unwrap();
        let b = spectral_init(&c, 3, SpectralMethod::Randomized, 5).unwrap();
        assert!(crate::linalg::subspace_angle(&a, &b) < 1e-6);
    }

    fn off_diag(n: usize) -> OffBandPattern {
        OffBandPattern::from_fn(n, |a, b| a != b)
    }

    #[test]
    fn exact_low_rank_is_recovered() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let v = gauss(30, 2, &mut rng);
        let c = &v * v.transpose();
        // perturb the diagonal, which the mask hides
        let mut c_bad = c.clone();
        for i in 0..30 {
            c_bad[(i, i)] += 5.0;
        }
        let p = off_diag(30);
        let v0 = spectral_init(&c_bad, 2, SpectralMethod::Exact, 0).unwrap();
        let fit = complete_from(&c_bad, &p, &v0, &CompletionOptions::default()).unwrap();
        assert!(fit.f <= 1e-8 * c.norm_squared(), "f = {}", fit.f);
    }

    #[test]
    fn full_rank_full_mask_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let v = gauss(8, 8, &mut rng);
        let c = &v * v.transpose();
        let p = OffBandPattern::from_fn(8, |_, _| true);
        let v0 = spectral_init(&c, 8, SpectralMethod::Exact, 0).unwrap();
        let fit = complete_from(&c, &p, &v0, &CompletionOptions::default()).unwrap();
        assert!(fit.f < 1e-20 * c.norm_squared());
    }

    #[test]
    fn reported_objective_is_consistent() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = gauss(25, 25, &mut rng);
        let c = &a * a.transpose();
        let p = off_diag(25);
        let v0 = spectral_init(&c, 2, SpectralMethod::Exact, 0).unwrap();
        let fit = complete_from(&c, &p, &v0, &CompletionOptions::default()).unwrap();
        let direct = crate::covassembly::masked_residual_norm(&c, &(&fit.v * fit.v.transpose()), &p).unwrap();
        assert!((direct - fit.f).abs() <= 1e-10 * direct.max(1.0));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = gauss(20, 20, &mut rng);
        let c = &a * a.transpose();
        let p = OffBandPattern::from_fn(20, |x, y| (x as i64 - y as i64).abs() > 3);
        let obj = MaskedObjective::new(&c, &p, 1.0, 2);
        let v: Vec<f64> = (0..40).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let mut g = vec![0.0; 40];
        obj.value_grad(&v, &mut g);
        let h = 1e-6;
        for i in 0..40 {
            let mut vp = v.clone();
            let mut vm = v.clone();
            vp[i] += h;
            vm[i] -= h;
            let fd = (obj.value(&vp) - obj.value(&vm)) / (2.0 * h);
            assert!((fd - g[i]).abs() <= 1e-5 * g[i].abs().max(1.0), "{i}: {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn sgd_close_to_quasi_newton() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let v = gauss(60, 2, &mut rng);
        let noise = gauss(60, 60, &mut rng) * 0.3;
        let c = &v * v.transpose() + (&noise + noise.transpose()) * 0.5;
        let p = OffBandPattern::from_fn(60, |a, b| (a as i64 - b as i64).abs() > 2);
        let v0 = spectral_init(&c, 2, SpectralMethod::Exact, 0).unwrap();
        let qn = complete_from(&c, &p, &v0, &CompletionOptions::default()).unwrap();
        let opts = CompletionOptions {
            optimizer: Optimizer::BlockSgd,
            n_strata: 4,
            sgd_epochs: 400,
            ..Default::default()
        };
        let sgd = complete_from(&c, &p, &v0, &opts).unwrap();
        assert!((sgd.f - qn.f).abs() / qn.f < 0.05, "sgd {} vs qn {}", sgd.f, qn.f);
        let hybrid = complete_from(&c, &p, &v0, &CompletionOptions { optimizer: Optimizer::Hybrid, ..Default::default() }).unwrap();
        assert!((hybrid.f - qn.f).abs() / qn.f < 1e-6);
    }

    #[test]
    fn sgd_is_thread_count_independent() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let v = gauss(40, 2, &mut rng);
        let c = &v * v.transpose();
        let p = off_diag(40);
        let v0 = spectral_init(&(&c + DMatrix::identity(40, 40)), 2, SpectralMethod::Exact, 0).unwrap();
        let opts = CompletionOptions {
            optimizer: Optimizer::BlockSgd,
            sgd_epochs: 20,
            ..Default::default()
        };
        let run = |t| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(t)
                .build()
                .unwrap()
                .install(|| complete_from(&c, &p, &v0, &opts).unwrap())
        };
        assert_eq!(run(1).v, run(4).v);
    }

    fn grid_cov(seed: u64) -> MaskedCovariance {
        let g = SpatialGrid::new(vec![12, 12]).unwrap();
        let mask: BandMask = build_band_mask(&g, BandRule::Distance { delta: 0.1 }).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = gauss(144, 2, &mut rng);
        let noise = gauss(144, 144, &mut rng) * 0.05;
        let c = &v * v.transpose() + (&noise + noise.transpose()) * 0.5;
        MaskedCovariance {
            matrix: c,
            mask,
            n_subjects: 1,
            n_time: 1,
        }
    }

    #[test]
    fn rank_path_is_monotone_with_elbow() {
        let cov = grid_cov(7);
        let path = rank_path(&cov, 4, &CompletionOptions::default()).unwrap();
        let f = path.values();
        assert_eq!(f.len(), 4);
        for w in f.windows(2) {
            assert!(w[1] <= w[0]);
        }
        assert!(f[1] / f[0] < 0.2);
        assert!(f[2] / f[1] > 0.5);
        assert_eq!(select_rank(&path, RankSelection::Elbow).unwrap(), 2);
        let single = rank_path(&cov, 1, &CompletionOptions::default()).unwrap();
        assert_eq!(single.entries.len(), 1);
    }

    #[test]
    fn rank_requests_beyond_cap_rejected() {
        let cov = grid_cov(1);
        // 12x12 with delta 0.1: floor(0.4 * 12 - 1) = 3, K* = 9
        assert!(matches!(rank_path(&cov, 10, &CompletionOptions::default()), Err(Error::Identifiability(_))));
        assert!(matches!(complete_rank(&cov, 10, &CompletionOptions::default()), Err(Error::Identifiability(_))));
    }

    #[test]
    fn selection_rules() {
        let f = [100.0, 5.0, 4.5, 4.4];
        assert_eq!(select_rank_values(&f, RankSelection::Elbow).unwrap(), 2);
        assert_eq!(select_rank_values(&f, RankSelection::Threshold { c: 4.45 }).unwrap(), 4);
        assert_eq!(select_rank_values(&f, RankSelection::Threshold { c: 4.6 }).unwrap(), 3);
        assert!(select_rank_values(&f, RankSelection::Threshold { c: 1.0 }).is_err());
        assert_eq!(select_rank_values(&f, RankSelection::Fixed { j: 9 }).unwrap(), 9);
    }

    #[test]
    fn extracted_loadings_reproduce_factor() {
        let g = SpatialGrid::new(vec![5]).unwrap();
        let v = DMatrix::from_row_slice(5, 2, &[0.0, -3.0, 2.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let est = extract_loadings(&v, &g).unwrap();
        let l = &est.loadings.matrix;
        assert!((l[(0, 0)] - 3.0).abs() < 1e-12 && (l[(1, 1)] - 2.0).abs() < 1e-12);
        assert!((l * l.transpose() - &v * v.transpose()).abs().max() < 1e-10);
        for k in 0..2 {
            assert!((est.eigenvalues[k] - l.column(k).norm_squared()).abs() < 1e-10);
        }
        let zero = DMatrix::from_row_slice(5, 2, &[1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        assert!(extract_loadings(&zero, &g).is_err());
    }
}
