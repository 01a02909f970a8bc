//! Synthetic spatiotemporal data from the finite-resolution factor model
//!
//! `X_i = sum_k c_k z_k f_ik + sum_j a_ij v_ij u_ij`
//!
//! with unit-norm smooth loadings `z_k`, Gaussian-process factor curves, and
//! compactly supported local error components living inside a single cell of
//! the `delta`-tiling of the unit square.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::grid::SpatialGrid;
use crate::io::ScanTensor;
use crate::loadings::{LoadingSet, Stage};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(rename_all = "UPPERCASE")]
pub enum Scheme {
    /// Two bumps per loading.
    Bi,
    /// Network-like arrangement of bumps.
    Net,
    /// Three bumps per loading, one of them dominant.
    Tri,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    /// Side length of the square grid.
    pub m: usize,
    /// Keep only a centered `window x window` region of the grid.
    #[serde(default)]
    pub window: Option<usize>,
    #[serde(default = "default_j")]
    pub j: usize,
    pub k: usize,
    pub n: usize,
    pub scheme: Scheme,
    /// Local error bandwidth: support of each local component lies in one `delta`-cell.
    #[serde(default = "default_delta")]
    pub delta: f64,
    /// 1: `c_k ~ U[2, 3]`; 2: `c_k ~ U[0.8, 1.8]`.
    #[serde(default = "default_regime")]
    pub regime: u8,
    #[serde(default = "default_omega_f")]
    pub omega_f: f64,
    #[serde(default = "default_omega_u")]
    pub omega_u: f64,
    /// Local error components per subject.
    #[serde(default = "default_p")]
    pub p: usize,
    /// Oblique mixing of the factor stack, rows of `T`; requires `diag(T T^T) = 1`.
    #[serde(default)]
    pub oblique_t: Option<Vec<Vec<f64>>>,
    /// Multiplies the width of every local support box (1 keeps them inside a cell).
    #[serde(default = "one")]
    pub local_support_scale: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_j() -> usize {
    500
}
fn default_delta() -> f64 {
    0.1
}
fn default_regime() -> u8 {
    1
}
fn default_omega_f() -> f64 {
    0.02
}
fn default_omega_u() -> f64 {
    0.002
}
fn default_p() -> usize {
    50
}
fn one() -> f64 {
    1.0
}

impl SimConfig {
    /// Study defaults for a given grid, rank, sample size and scheme.
    pub fn new(m: usize, k: usize, n: usize, scheme: Scheme) -> Self {
        Self {
            m,
            window: None,
            j: default_j(),
            k,
            n,
            scheme,
            delta: default_delta(),
            regime: default_regime(),
            omega_f: default_omega_f(),
            omega_u: default_omega_u(),
            p: default_p(),
            oblique_t: None,
            local_support_scale: 1.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.j == 0 || self.k == 0 {
            return Err(invalid("n, j and k must be positive"));
        }
        if !(self.delta > 0.0 && self.delta < 0.5) {
            return Err(Error::Identifiability(format!(
                "bandwidth {} must lie in (0, 1/2)",
                self.delta
            )));
        }
        if !matches!(self.regime, 1 | 2) {
            return Err(invalid(format!("unknown regime {}", self.regime)));
        }
        if !(self.omega_f > 0.0 && self.omega_u > 0.0) {
            return Err(invalid("GP length parameters must be positive"));
        }
        if !(self.local_support_scale > 0.0) {
            return Err(invalid("local support scale must be positive"));
        }
        self.oblique_matrix()?;
        self.grid()?;
        Ok(())
    }

    pub fn grid(&self) -> Result<SpatialGrid> {
        match self.window {
            Some(h) => SpatialGrid::centered_square(self.m, h),
            None => SpatialGrid::new(vec![self.m, self.m]),
        }
    }

    fn oblique_matrix(&self) -> Result<Option<DMatrix<f64>>> {
        let Some(rows) = &self.oblique_t else {
            return Ok(None);
        };
        if rows.len() != self.k || rows.iter().any(|r| r.len() != self.k) {
            return Err(invalid(format!("oblique T must be {0}x{0}", self.k)));
        }
        let t = DMatrix::from_fn(self.k, self.k, |i, j| rows[i][j]);
        let h = &t * t.transpose();
        if (0..self.k).any(|i| (h[(i, i)] - 1.0).abs() > 1e-8) {
            return Err(invalid("oblique T must satisfy diag(T T^T) = 1"));
        }
        if t.determinant().abs() < 1e-10 {
            return Err(invalid("oblique T is singular"));
        }
        Ok(Some(t))
    }
}

/// Smooth compactly supported bump `exp(-1 / (1 - r^2))` for `|r| < 1`.
pub fn bump(r: f64) -> f64 {
    if r.abs() < 1.0 {
        (-1.0 / (1.0 - r * r)).exp()
    } else {
        0.0
    }
}

/// Radial blob: center, radius, relative amplitude (unit-square coordinates).
type Blob = ([f64; 2], f64, f64);

fn layout(scheme: Scheme, k: usize) -> Result<Vec<Vec<Blob>>> {
    let bi4: [Vec<Blob>; 4] = [
        vec![([0.25, 0.25], 0.12, 1.0), ([0.75, 0.75], 0.12, 1.0)],
        vec![([0.75, 0.25], 0.12, 1.0), ([0.25, 0.75], 0.12, 1.0)],
        vec![([0.5, 0.15], 0.12, 1.0), ([0.5, 0.85], 0.12, 1.0)],
        vec![([0.15, 0.5], 0.12, 1.0), ([0.85, 0.5], 0.12, 1.0)],
    ];
    let net: [Vec<Blob>; 4] = [
        // default-mode-like: midline pair
        vec![([0.5, 0.2], 0.1, 1.0), ([0.5, 0.6], 0.1, 1.0)],
        // executive-like: bilateral frontal pair
        vec![([0.3, 0.35], 0.08, 1.0), ([0.7, 0.35], 0.08, 1.0)],
        // left dorsal stream
        vec![([0.2, 0.6], 0.08, 1.0), ([0.25, 0.85], 0.07, 1.0)],
        // right dorsal stream
        vec![([0.8, 0.6], 0.08, 1.0), ([0.75, 0.85], 0.07, 1.0)],
    ];
    match (scheme, k) {
        (Scheme::Bi, 2) => Ok(vec![
            vec![([0.3, 0.3], 0.15, 1.0), ([0.7, 0.7], 0.15, 1.0)],
            vec![([0.7, 0.3], 0.15, 1.0), ([0.3, 0.7], 0.15, 1.0)],
        ]),
        (Scheme::Bi, 3 | 4) => Ok(bi4[..k].to_vec()),
        (Scheme::Net, 2 | 4) => Ok(net[..k].to_vec()),
        (Scheme::Tri, 8) => {
            // 5x5 lattice of slots; component k takes slots k, k+8, k+16, the first dominant
            let slot = |s: usize| [0.1 + 0.2 * (s % 5) as f64, 0.1 + 0.2 * (s / 5) as f64];
            Ok((0..8)
                .map(|c| {
                    vec![
                        (slot(c), 0.085, 2.0),
                        (slot(c + 8), 0.085, 1.0),
                        (slot(c + 16), 0.085, 1.0),
                    ]
                })
                .collect())
        }
        _ => Err(invalid(format!("scheme {scheme:?} is not defined for K = {k}"))),
    }
}

/// Unit-norm loading tensors on the full `M x M` grid, as the columns of a `M^2 x K` matrix
/// (rows in row-major voxel order).
pub fn make_loading_scheme(scheme: Scheme, m: usize, k: usize) -> Result<DMatrix<f64>> {
    if m < 2 {
        return Err(invalid("grid side must be at least 2"));
    }
    let blobs = layout(scheme, k)?;
    let mut z = DMatrix::zeros(m * m, k);
    for (c, comp) in blobs.iter().enumerate() {
        for row in 0..m {
            for col in 0..m {
                let x = (row as f64 + 0.5) / m as f64;
                let y = (col as f64 + 0.5) / m as f64;
                let v: f64 = comp
                    .iter()
                    .map(|&([cx, cy], rad, amp)| {
                        let r = ((x - cx).powi(2) + (y - cy).powi(2)).sqrt() / rad;
                        amp * bump(r)
                    })
                    .sum();
                z[(row * m + col, c)] = v;
            }
        }
        let norm = z.column(c).norm();
        if norm == 0.0 {
            return Err(invalid(format!("grid of side {m} is too coarse for the loading scheme")));
        }
        z.column_mut(c).unscale_mut(norm);
    }
    Ok(z)
}

/// Evenly spaced time grid on `[0, 1]`.
pub fn time_grid(j: usize) -> Vec<f64> {
    if j == 1 {
        return vec![0.0];
    }
    (0..j).map(|t| t as f64 / (j - 1) as f64).collect()
}

/// Cholesky factor of a squared-exponential kernel on the even time grid.
#[derive(Debug, Clone)]
pub struct GpSampler {
    factor: DMatrix<f64>,
    pub jitter: f64,
}

impl GpSampler {
    pub fn new(omega: f64, j: usize) -> Result<Self> {
        if !(omega > 0.0) {
            return Err(invalid(format!("GP length parameter {omega} must be positive")));
        }
        let t = time_grid(j);
        let kernel = DMatrix::from_fn(j, j, |a, b| {
            let d = t[a] - t[b];
            (-d * d / (2.0 * omega * omega)).exp()
        });
        let mut jitter = 1e-8;
        loop {
            let mut k = kernel.clone();
            for i in 0..j {
                k[(i, i)] += jitter;
            }
            if let Some(ch) = k.cholesky() {
                return Ok(Self {
                    factor: ch.l(),
                    jitter,
                });
            }
            jitter *= 10.0;
            if jitter > 1e-4 * (1.0 + 1e-9) {
                return Err(Error::Numerical(format!(
                    "squared-exponential kernel (omega = {omega}, J = {j}) is not factorizable with jitter up to 1e-4"
                )));
            }
        }
    }

    pub fn len(&self) -> usize {
        self.factor.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let xi = DVector::from_fn(self.len(), |_, _| rng.sample::<f64, _>(StandardNormal));
        &self.factor * xi
    }
}

/// One draw from the zero-mean squared-exponential GP on `J` even time points.
pub fn sample_gp<R: Rng + ?Sized>(omega: f64, j: usize, rng: &mut R) -> Result<DVector<f64>> {
    Ok(GpSampler::new(omega, j)?.draw(rng))
}

/// A local error component `a v u^T` restricted to the active voxels.
#[derive(Debug, Clone)]
pub struct LocalComponent {
    /// Inclusive multi-index ranges of the nonzero voxels on the full grid, per dimension.
    pub extent: [(usize, usize); 2],
    /// `(active position, value)` of the unit-norm spatial bump.
    pub spatial: Vec<(usize, f64)>,
    pub amplitude: f64,
    pub temporal: DVector<f64>,
}

#[derive(Debug, Clone)]
pub struct GroundTruth {
    /// True scaled loadings `c_k z_k` on the active voxels.
    pub loadings: LoadingSet,
    pub scales: Vec<f64>,
    /// Factor covariance `H = T T^T` (identity without oblique mixing).
    pub h: DMatrix<f64>,
    /// Per-subject true factor curves, `K x J`.
    pub factors: Vec<DMatrix<f64>>,
    pub local: Vec<Vec<LocalComponent>>,
    pub grid_side: usize,
}

impl GroundTruth {
    /// `G = L H L^T` over the active voxels.
    pub fn global_cov(&self) -> DMatrix<f64> {
        let l = &self.loadings.matrix;
        l * &self.h * l.transpose()
    }

    /// Global signal `Y_i = L F_i`.
    pub fn signal(&self, i: usize) -> DMatrix<f64> {
        &self.loadings.matrix * &self.factors[i]
    }

    /// Local error `eps_i = sum_j a_ij v_ij u_ij^T`.
    pub fn local_error(&self, i: usize) -> DMatrix<f64> {
        let j = self.factors[i].ncols();
        let mut e = DMatrix::zeros(self.loadings.matrix.nrows(), j);
        add_local(&mut e, &self.local[i]);
        e
    }
}

fn add_local(x: &mut DMatrix<f64>, comps: &[LocalComponent]) {
    for comp in comps {
        for &(row, v) in &comp.spatial {
            let w = comp.amplitude * v;
            for t in 0..comp.temporal.len() {
                x[(row, t)] += w * comp.temporal[t];
            }
        }
    }
}

/// True iff no local component couples two voxels at normalized distance `>= delta`
/// in some dimension, i.e. every local covariance lies strictly inside the band.
pub fn true_local_cov_band_check(truth: &GroundTruth, delta: f64) -> bool {
    let m = truth.grid_side as f64;
    truth.local.iter().flatten().all(|c| {
        c.extent
            .iter()
            .all(|&(lo, hi)| ((hi - lo) as f64) / m < delta - 1e-12)
    })
}

fn subject_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Bump supported on the box `[lo, hi]` (unit coordinates) evaluated at voxel centers of
/// an `m x m` grid; returns full-grid `(linear index, value)` pairs and index extents.
fn local_bump(m: usize, lo: [f64; 2], hi: [f64; 2]) -> (Vec<(usize, f64)>, [(usize, usize); 2]) {
    let inside = |d: usize| -> Vec<(usize, f64)> {
        let c = 0.5 * (lo[d] + hi[d]);
        let half = 0.5 * (hi[d] - lo[d]);
        (0..m)
            .filter_map(|i| {
                let x = (i as f64 + 0.5) / m as f64;
                let v = bump((x - c) / half);
                (v > 0.0).then_some((i, v))
            })
            .collect()
    };
    let rows = inside(0);
    let cols = inside(1);
    let mut vals = Vec::with_capacity(rows.len() * cols.len());
    for &(r, vr) in &rows {
        for &(c, vc) in &cols {
            vals.push((r * m + c, vr * vc));
        }
    }
    let ext = |v: &[(usize, f64)]| match (v.first(), v.last()) {
        (Some(a), Some(b)) => (a.0, b.0),
        _ => (0, 0),
    };
    (vals, [ext(&rows), ext(&cols)])
}

/// Simulate `n` scans and the ground truth that generated them.
pub fn simulate_dataset(cfg: &SimConfig) -> Result<(Vec<ScanTensor>, GroundTruth)> {
    cfg.validate()?;
    let grid = cfg.grid()?;
    let m = cfg.m;
    let z_full = make_loading_scheme(cfg.scheme, m, cfg.k)?;

    let mut rng = subject_rng(cfg.seed, 0);
    let (lo, hi) = if cfg.regime == 1 { (2.0, 3.0) } else { (0.8, 1.8) };
    let scales: Vec<f64> = (0..cfg.k)
        .map(|_| lo + (hi - lo) * rng.random::<f64>())
        .collect();

    let active = grid.active_linear_indices();
    let mut l = DMatrix::zeros(grid.n_active(), cfg.k);
    for (a, &lin) in active.iter().enumerate() {
        for k in 0..cfg.k {
            l[(a, k)] = scales[k] * z_full[(lin, k)];
        }
    }
    let t = cfg.oblique_matrix()?;
    let h = match &t {
        Some(t) => t * t.transpose(),
        None => DMatrix::identity(cfg.k, cfg.k),
    };

    let factor_gp = GpSampler::new(cfg.omega_f, cfg.j)?;
    let local_gp = if cfg.p > 0 {
        Some(GpSampler::new(cfg.omega_u, cfg.j)?)
    } else {
        None
    };

    // delta-cells tiling the unit square, clipped at the boundary
    let n_cells = (1.0 / cfg.delta - 1e-9).ceil() as usize;
    let cell_box = |p: usize| -> (f64, f64) {
        let a = p as f64 * cfg.delta;
        let b = ((p + 1) as f64 * cfg.delta).min(1.0);
        let c = 0.5 * (a + b);
        let half = 0.5 * (b - a) * cfg.local_support_scale;
        (c - half, c + half)
    };
    let mut bump_cache: HashMap<(usize, usize), (Vec<(usize, f64)>, [(usize, usize); 2])> =
        HashMap::new();
    for p in 0..n_cells {
        for q in 0..n_cells {
            let (x0, x1) = cell_box(p);
            let (y0, y1) = cell_box(q);
            let (vals, ext) = local_bump(m, [x0, y0], [x1, y1]);
            let norm = vals.iter().map(|(_, v)| v * v).sum::<f64>().sqrt();
            let vals: Vec<(usize, f64)> = if norm > 0.0 {
                vals.into_iter().map(|(i, v)| (i, v / norm)).collect()
            } else {
                Vec::new()
            };
            bump_cache.insert((p, q), (vals, ext));
        }
    }
    let position: HashMap<usize, usize> = active.iter().enumerate().map(|(a, &lin)| (lin, a)).collect();

    let subjects: Vec<(DMatrix<f64>, Vec<LocalComponent>)> = (0..cfg.n)
        .into_par_iter()
        .map(|i| {
            let mut rng = subject_rng(cfg.seed, 1 + i as u64);
            let mut f = DMatrix::zeros(cfg.k, cfg.j);
            for k in 0..cfg.k {
                f.set_row(k, &factor_gp.draw(&mut rng).transpose());
            }
            if let Some(t) = &t {
                f = t * f;
            }
            let mut comps = Vec::with_capacity(cfg.p);
            if let Some(gp) = &local_gp {
                for _ in 0..cfg.p {
                    let cell = (rng.random_range(0..n_cells), rng.random_range(0..n_cells));
                    let amplitude = 0.1 + 0.9 * rng.random::<f64>();
                    let temporal = gp.draw(&mut rng);
                    let (vals, extent) = &bump_cache[&cell];
                    let spatial = vals
                        .iter()
                        .filter_map(|(lin, v)| position.get(lin).map(|&a| (a, *v)))
                        .collect();
                    comps.push(LocalComponent {
                        extent: *extent,
                        spatial,
                        amplitude,
                        temporal,
                    });
                }
            }
            (f, comps)
        })
        .collect();

    let mut factors = Vec::with_capacity(cfg.n);
    let mut local = Vec::with_capacity(cfg.n);
    for (f, comps) in subjects {
        factors.push(f);
        local.push(comps);
    }
    let loadings = LoadingSet::new(grid.clone(), l, Stage::Initial)?;
    let truth = GroundTruth {
        loadings,
        scales,
        h,
        factors,
        local,
        grid_side: m,
    };
    let scans = (0..cfg.n)
        .into_par_iter()
        .map(|i| {
            let mut x = truth.signal(i);
            add_local(&mut x, &truth.local[i]);
            ScanTensor::new(grid.clone(), x)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((scans, truth))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn components(z: &DMatrix<f64>, m: usize, k: usize) -> usize {
        let mut seen = vec![false; m * m];
        let mut count = 0;
        for start in 0..m * m {
            if seen[start] || z[(start, k)] == 0.0 {
                continue;
            }
            count += 1;
            let mut stack = vec![start];
            seen[start] = true;
            while let Some(v) = stack.pop() {
                let (r, c) = (v / m, v % m);
                let mut nb = Vec::new();
                if r > 0 {
                    nb.push(v - m);
                }
                if r + 1 < m {
                    nb.push(v + m);
                }
                if c > 0 {
                    nb.push(v - 1);
                }
                if c + 1 < m {
                    nb.push(v + 1);
                }
                for w in nb {
                    if !seen[w] && z[(w, k)] != 0.0 {
                        seen[w] = true;
                        stack.push(w);
                    }
                }
            }
        }
        count
    }

    #[test]
    fn bi_has_two_blobs_and_unit_norm() {
        let z = make_loading_scheme(Scheme::Bi, 40, 2).unwrap();
        for k in 0..2 {
            assert!((z.column(k).norm() - 1.0).abs() < 1e-12);
            assert_eq!(components(&z, 40, k), 2);
        }
    }

    #[test]
    fn tri_has_three_blobs() {
        let z = make_loading_scheme(Scheme::Tri, 40, 8).unwrap();
        for k in 0..8 {
            assert!((z.column(k).norm() - 1.0).abs() < 1e-12);
            assert_eq!(components(&z, 40, k), 3);
        }
    }

    #[test]
    fn net_layouts_are_unit_norm() {
        for k in [2, 4] {
            let z = make_loading_scheme(Scheme::Net, 40, k).unwrap();
            for c in 0..k {
                assert!((z.column(c).norm() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn unsupported_pairs_rejected() {
        assert!(make_loading_scheme(Scheme::Tri, 40, 2).is_err());
        assert!(make_loading_scheme(Scheme::Net, 40, 3).is_err());
        assert!(make_loading_scheme(Scheme::Bi, 40, 5).is_err());
    }

    #[test]
    fn gp_flat_in_long_length_limit() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let v = sample_gp(1e6, 100, &mut rng).unwrap();
        let mean = v.mean();
        let spread = v.iter().map(|x| (x - mean).abs()).fold(0.0, f64::max);
        // relative to the unit marginal standard deviation of the process
        assert!(spread < 1e-3, "{spread} vs {mean}");
    }

    #[test]
    fn gp_pointwise_variance_is_one() {
        let gp = GpSampler::new(0.02, 100).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let draws: Vec<DVector<f64>> = (0..2000).map(|_| gp.draw(&mut rng)).collect();
        for t in [0, 37, 99] {
            let var = draws.iter().map(|d| d[t] * d[t]).sum::<f64>() / 2000.0;
            assert!((var - 1.0).abs() < 0.1, "variance {var} at {t}");
        }
    }

    #[test]
    fn gp_is_deterministic() {
        let a = sample_gp(0.02, 50, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        let b = sample_gp(0.02, 50, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        assert_eq!(a, b);
    }

    fn small(p: usize) -> SimConfig {
        let mut cfg = SimConfig::new(20, 2, 3, Scheme::Bi);
        cfg.j = 60;
        cfg.p = p;
        cfg.seed = 11;
        cfg
    }

    #[test]
    fn scans_decompose_into_signal_and_local_error() {
        let (scans, truth) = simulate_dataset(&small(10)).unwrap();
        for (i, s) in scans.iter().enumerate() {
            let recon = truth.signal(i) + truth.local_error(i);
            assert!((&s.values - recon).abs().max() < 1e-12);
        }
    }

    #[test]
    fn simulation_is_deterministic() {
        let (a, _) = simulate_dataset(&small(10)).unwrap();
        let (b, _) = simulate_dataset(&small(10)).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.values, y.values);
        }
    }

    #[test]
    fn regime_one_has_larger_global_term() {
        let mut c1 = small(0);
        let mut c2 = small(0);
        c1.regime = 1;
        c2.regime = 2;
        let (_, t1) = simulate_dataset(&c1).unwrap();
        let (_, t2) = simulate_dataset(&c2).unwrap();
        assert!(t1.global_cov().norm() > t2.global_cov().norm());
    }

    #[test]
    fn identity_mixing_keeps_identity_h() {
        let mut cfg = small(0);
        cfg.oblique_t = Some(vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        let (_, truth) = simulate_dataset(&cfg).unwrap();
        assert_eq!(truth.h, DMatrix::identity(2, 2));
        cfg.oblique_t = Some(vec![vec![1.0, 1.0], vec![0.0, 1.0]]);
        assert!(simulate_dataset(&cfg).is_err());
    }

    #[test]
    fn local_components_stay_in_band() {
        let (_, truth) = simulate_dataset(&small(20)).unwrap();
        assert!(true_local_cov_band_check(&truth, 0.1));
        let mut wide = small(20);
        wide.local_support_scale = 2.0;
        let (_, truth) = simulate_dataset(&wide).unwrap();
        assert!(!true_local_cov_band_check(&truth, 0.1));
        let (_, truth) = simulate_dataset(&small(0)).unwrap();
        assert!(true_local_cov_band_check(&truth, 0.1));
    }

    #[test]
    fn windowed_grid_restricts_loadings() {
        let mut cfg = small(5);
        cfg.window = Some(10);
        let (scans, truth) = simulate_dataset(&cfg).unwrap();
        assert_eq!(scans[0].values.nrows(), 100);
        assert_eq!(truth.loadings.matrix.nrows(), 100);
    }
}
