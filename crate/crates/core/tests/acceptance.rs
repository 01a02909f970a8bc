//! Acceptance harness: one PASS/FAIL line per criterion, written straight to
//! stdout so it shows up without `--nocapture`.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use tffa::completion::objective::MaskedObjective;
use tffa::completion::{complete_rank, rank_cap_dims, CompletionOptions};
use tffa::covassembly::{build_band_mask, empirical_spatial_cov, BandRule, CovOptions, MaskedCovariance};
use tffa::grid::SpatialGrid;
use tffa::io::read_tensor;
use tffa::loadings::{LoadingSet, Stage};
use tffa::pipeline::{emit_report, run_pipeline, run_study, with_threads, PipelineConfig, RunMode};
use tffa::rotation::{rotate, RotationMethod, RotationOptions};
use tffa::scores::{
    build_basis, default_basis_size, factor_cov_diagnostic, fosr_all, fosr_gradient, fosr_objective, fosr_scores,
    spatial_cv_gamma,
};
use tffa::simgen::{simulate_dataset, Scheme, SimConfig};

const SEED: u64 = 20240611;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn emit(id: usize, v: &Verdict) {
    let line = format!("AC{id} {} {}\n", if v.pass { "PASS" } else { "FAIL" }, v.detail);
    let mut out = std::io::stdout().lock();
    out.write_all(line.as_bytes()).unwrap();
    out.flush().unwrap();
}

fn randn(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.sample::<f64, _>(StandardNormal))
}

fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0f64, |a, v| a.max(v.abs()))
}

fn secs(d: Duration) -> f64 {
    d.as_secs_f64()
}

fn permutations(k: usize) -> Vec<Vec<usize>> {
    if k == 0 {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    for p in permutations(k - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, k - 1);
            out.push(q);
        }
    }
    out
}

/// Smallest max-abs deviation between `a` and any signed column permutation of `b`.
fn signed_perm_distance(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let k = a.ncols();
    let mut best = f64::INFINITY;
    for perm in permutations(k) {
        let mut worst = 0.0f64;
        for (ka, &kb) in perm.iter().enumerate() {
            let plus = (a.column(ka) - b.column(kb)).amax();
            let minus = (a.column(ka) + b.column(kb)).amax();
            worst = worst.max(plus.min(minus));
        }
        best = best.min(worst);
    }
    best
}

// 1. Noiseless recovery
fn ac1() -> Verdict {
    let t0 = Instant::now();
    let mut sim = SimConfig::new(40, 2, 20, Scheme::Bi);
    sim.p = 0;
    sim.seed = SEED;
    let (scans, truth) = simulate_dataset(&sim).unwrap();
    let mask = build_band_mask(&scans[0].grid, BandRule::Distance { delta: 0.1 }).unwrap();
    let cov = empirical_spatial_cov(&scans, &mask, &CovOptions::default()).unwrap();
    let opts = CompletionOptions {
        seed: SEED,
        ..CompletionOptions::default()
    };
    let fit = complete_rank(&cov, 2, &opts).unwrap();
    let elapsed = t0.elapsed();
    let g = truth.global_cov();
    let err = (&fit.v * fit.v.transpose() - &g).norm() / g.norm();
    // without local noise the full empirical covariance is itself an estimate of G;
    // its error is the sampling floor no completion can beat
    let floor = (&cov.matrix - &g).norm() / g.norm();
    verdict(
        err < 0.05 && elapsed < Duration::from_secs(300),
        format!(
            "E(G_hat) = {err:.4} (need < 0.05; empirical covariance E = {floor:.4}), {:.1} s",
            secs(elapsed)
        ),
    )
}

// 2 & 3. Study 1 direction and rank selection share one run
fn ac2_ac3() -> (Verdict, Verdict) {
    let t0 = Instant::now();
    let mut cfg = PipelineConfig::simulated(SimConfig::new(40, 2, 5, Scheme::Bi));
    cfg.mode = RunMode::Study1;
    cfg.seed = SEED;
    cfg.replications = 10;
    let tmp = tempfile::tempdir().unwrap();
    let report = run_study(&cfg, Some(tmp.path())).unwrap();
    emit_report(&report, tmp.path()).unwrap();
    let elapsed = t0.elapsed();
    let scenario = report.rows[0].scenario.clone();
    let rel = |est: &str| report.summary_for(&scenario, est).and_then(|s| s.mean_relative_error).unwrap();
    let (mc, mcs) = (rel("MC"), rel("MCS"));
    let files_ok = ["errors.csv", "summary.csv", "summary.json", "ranks.csv"]
        .iter()
        .all(|f| tmp.path().join(f).is_file());
    let tffa = report.summary_for(&scenario, "TFFA").unwrap().mean_error;
    let ac2 = verdict(
        mc >= 1.0 && mcs >= 1.0 && files_ok && elapsed < Duration::from_secs(1800),
        format!(
            "MC/TFFA = {mc:.4}, MCS/TFFA = {mcs:.4} (need >= 1), mean E(TFFA) = {tffa:.4}, report files {}, {:.0} s",
            if files_ok { "written" } else { "missing" },
            secs(elapsed)
        ),
    );
    let hits = report.ranks.iter().filter(|r| r.k_hat == 2).count();
    let ranks: Vec<usize> = report.ranks.iter().map(|r| r.k_hat).collect();
    let ac3 = verdict(
        hits >= 8 && report.ranks.len() == 10,
        format!("elbow picked K = 2 in {hits}/10 replications (need >= 8), K_hat = {ranks:?}"),
    );
    (ac2, ac3)
}

// 4. Study 3 direction
fn ac4() -> Verdict {
    let t0 = Instant::now();
    let mut cfg = PipelineConfig::simulated(SimConfig::new(40, 2, 20, Scheme::Bi));
    cfg.mode = RunMode::Study3;
    cfg.seed = SEED;
    cfg.replications = 10;
    cfg.study.heights = vec![20, 40];
    cfg.study.deltas = vec![0.05];
    let report = run_study(&cfg, None).unwrap();
    let mean = |h: usize, est: &str| report.summary_for(&format!("h{h}_delta0.05"), est).unwrap().mean_error;
    let (f20, p20, f40, p40) = (mean(20, "FOSR"), mean(20, "PWLS"), mean(40, "FOSR"), mean(40, "PWLS"));
    verdict(
        f20 < p20 && f40 < p40 && f40 < f20 && p40 < p20,
        format!(
            "h=20: FOSR {f20:.4} vs PWLS {p20:.4}; h=40: FOSR {f40:.4} vs PWLS {p40:.4}, {:.0} s",
            secs(t0.elapsed())
        ),
    )
}

/// Minimizer of `1/2 ||X - L A E||^2 + 1/2 sum_k gamma_k (A D A^T)_kk` from the explicit
/// `MJ x KP` design `E^T (x) L`, solved by LU.
fn dense_fosr(x: &DMatrix<f64>, l: &DMatrix<f64>, e: &DMatrix<f64>, d: &DMatrix<f64>, gamma: &[f64]) -> DMatrix<f64> {
    let (k, p) = (l.ncols(), e.nrows());
    let design = e.transpose().kronecker(l);
    let mut hess = design.transpose() * &design;
    for a in 0..p {
        for b in 0..p {
            for kk in 0..k {
                hess[(a * k + kk, b * k + kk)] += d[(a, b)] * gamma[kk];
            }
        }
    }
    let rhs = design.transpose() * nalgebra::DVector::from_column_slice(x.as_slice());
    let sol = hess.lu().solve(&rhs).expect("dense system solvable");
    DMatrix::from_column_slice(k, p, sol.as_slice())
}

// 5. FOSR closed form against the dense quadratic
fn ac5() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED + 5);
    let basis = build_basis(10, 60).unwrap();
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let l = randn(&mut rng, 30, 3);
        let x = randn(&mut rng, 30, 60);
        for g in [0.0, 1.0, 10.0] {
            let gamma = [g; 3];
            let a = fosr_scores(&x, &l, &basis, &gamma).unwrap().a.unwrap();
            let oracle = dense_fosr(&x, &l, &basis.e, &basis.d, &gamma);
            worst = worst.max((&a - &oracle).norm() / oracle.norm());
        }
    }
    verdict(worst < 1e-8, format!("max relative error {worst:.2e} over 20 instances x 3 gammas (need < 1e-8)"))
}

// 6. Rotation invariants
fn ac6() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED + 6);
    let (mut orth, mut recon_o, mut diag_t, mut recon_t) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for i in 0..50 {
        let l = randn(&mut rng, 40, 3);
        let set = LoadingSet::new(SpatialGrid::new(vec![40]).unwrap(), l.clone(), Stage::Initial).unwrap();
        let opts = RotationOptions {
            seed: i,
            ..RotationOptions::default()
        };
        let llt = &l * l.transpose();
        for method in [RotationMethod::Varimax, RotationMethod::Quartimax] {
            let r = rotate(&set, method, &opts).unwrap();
            let rt = &r.transform;
            orth = orth.max(max_abs(&(rt.transpose() * rt - DMatrix::identity(3, 3))));
            let ls = &r.loadings.matrix;
            recon_o = recon_o.max(max_abs(&(ls * ls.transpose() - &llt)));
        }
        let r = rotate(&set, RotationMethod::Oblimin { alpha: 0.0 }, &opts).unwrap();
        let t = &r.transform;
        let ttt = t * t.transpose();
        diag_t = diag_t.max((0..3).map(|k| (ttt[(k, k)] - 1.0).abs()).fold(0.0, f64::max));
        let ls = &r.loadings.matrix;
        recon_t = recon_t.max(max_abs(&(ls * &ttt * ls.transpose() - &llt)));
    }

    // planted simple structure seen through a 45 degree rotation
    let m = 40;
    let l0 = DMatrix::from_fn(m, 2, |r, c| {
        let w = 0.5 + (r as f64 * 0.37).sin().abs();
        if (r < m / 2) == (c == 0) {
            w
        } else {
            0.0
        }
    });
    let s = std::f64::consts::FRAC_1_SQRT_2;
    let rot45 = DMatrix::from_row_slice(2, 2, &[s, -s, s, s]);
    let mixed = LoadingSet::new(SpatialGrid::new(vec![m]).unwrap(), &l0 * rot45, Stage::Initial).unwrap();
    let mut planted = 0.0f64;
    for method in [RotationMethod::Varimax, RotationMethod::Quartimax, RotationMethod::Oblimin { alpha: 0.0 }] {
        let r = rotate(&mixed, method, &RotationOptions::default()).unwrap();
        planted = planted.max(signed_perm_distance(&r.loadings.matrix, &l0));
    }
    verdict(
        orth < 1e-10 && recon_o < 1e-10 && diag_t < 1e-8 && recon_t < 1e-8 && planted < 1e-4,
        format!(
            "|R'R-I| {orth:.1e}, |L*L*'-LL'| {recon_o:.1e}, |diag(TT')-1| {diag_t:.1e}, oblique reconstruction {recon_t:.1e}, planted recovery {planted:.1e}"
        ),
    )
}

fn central_diff(f: &dyn Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut y = x.to_vec();
    (0..x.len())
        .map(|i| {
            y[i] = x[i] + h;
            let up = f(&y);
            y[i] = x[i] - h;
            let down = f(&y);
            y[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

fn rel_diff(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    num / den
}

// 7. Gradient checks
fn ac7() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED + 7);
    let h = 1e-6;
    let mut worst_c = 0.0f64;
    for _ in 0..5 {
        let grid = SpatialGrid::new(vec![6, 6]).unwrap();
        let mask = build_band_mask(&grid, BandRule::Distance { delta: 0.1 }).unwrap();
        let pattern = mask.pattern();
        let b = randn(&mut rng, 36, 3);
        let c = &b * b.transpose() + randn(&mut rng, 36, 36).map(|v| 0.05 * v);
        let c = (&c + c.transpose()) * 0.5;
        let obj = MaskedObjective::new(&c, &pattern, 1.0, 2);
        let v: Vec<f64> = (0..72).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let mut g = vec![0.0; 72];
        obj.value_grad(&v, &mut g);
        let fd = central_diff(&|x| obj.value(x), &v, h);
        worst_c = worst_c.max(rel_diff(&g, &fd));
    }
    let basis = build_basis(8, 40).unwrap();
    let mut worst_f = 0.0f64;
    for _ in 0..5 {
        let l = randn(&mut rng, 20, 2);
        let x = randn(&mut rng, 20, 40);
        let a = randn(&mut rng, 2, 8);
        let gamma = [0.5, 2.0];
        let g = fosr_gradient(&x, &l, &basis, &gamma, &a);
        let f = |v: &[f64]| fosr_objective(&x, &l, &basis, &gamma, &DMatrix::from_column_slice(2, 8, v));
        let fd = central_diff(&f, a.as_slice(), h);
        worst_f = worst_f.max(rel_diff(g.as_slice(), &fd));
    }
    verdict(
        worst_c < 1e-5 && worst_f < 1e-5,
        format!("completion gradient {worst_c:.1e}, FOSR residual {worst_f:.1e} (need < 1e-5)"),
    )
}

fn estimated_h(sim: &SimConfig) -> (DMatrix<f64>, DMatrix<f64>, usize) {
    let (scans, truth) = simulate_dataset(sim).unwrap();
    let l = &truth.loadings.matrix;
    let basis = build_basis(default_basis_size(sim.j), sim.j).unwrap();
    let grid = [0.0, 1e-6, 1e-5, 1e-4, 1e-3, 1e-2, 1e-1, 1.0];
    let gamma = spatial_cv_gamma(&scans, l, &basis, &grid, 4, true).unwrap().best;
    let f: Vec<DMatrix<f64>> = fosr_all(&scans, l, &basis, &gamma)
        .unwrap()
        .into_iter()
        .map(|s| s.f_hat)
        .collect();
    let rep = factor_cov_diagnostic(&f).unwrap();
    (rep.h_matrix(), truth.h.clone(), rep.n_flagged())
}

// 8. Diagnostic calibration
fn ac8() -> Verdict {
    let mut sim = SimConfig::new(20, 3, 50, Scheme::Bi);
    sim.seed = SEED + 8;
    let (h_orth, _, flags) = estimated_h(&sim);
    let dev_orth = max_abs(&(&h_orth - DMatrix::identity(3, 3)));
    sim.oblique_t = Some(vec![vec![1.0, 0.0, 0.0], vec![0.6, 0.8, 0.0], vec![0.0, 0.6, 0.8]]);
    let (h_obl, h_true, _) = estimated_h(&sim);
    let dev_obl = max_abs(&(&h_obl - &h_true));
    verdict(
        dev_orth < 0.15 && flags == 0 && dev_obl < 0.2,
        format!(
            "orthogonal |H_hat - I| = {dev_orth:.3} (need < 0.15) with {flags} Bonferroni flags; oblique |H_hat - H| = {dev_obl:.3} (need < 0.2)"
        ),
    )
}

fn collect_files(dir: &Path, base: &Path, out: &mut Vec<std::path::PathBuf>) {
    let mut entries: Vec<_> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    entries.sort();
    for p in entries {
        if p.is_dir() {
            collect_files(&p, base, out);
        } else {
            out.push(p.strip_prefix(base).unwrap().to_path_buf());
        }
    }
}

fn numbers(path: &Path) -> Vec<f64> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("tft") => read_tensor(path).unwrap().data,
        Some("csv") => fs::read_to_string(path)
            .unwrap()
            .split([',', '\n', ';'])
            .filter_map(|t| t.trim().parse::<f64>().ok())
            .collect(),
        _ => Vec::new(),
    }
}

// 9. Determinism and thread-count equivalence
fn ac9() -> Verdict {
    let mut sim = SimConfig::new(20, 2, 5, Scheme::Bi);
    sim.j = 100;
    sim.p = 10;
    let mut cfg = PipelineConfig::simulated(sim);
    cfg.seed = SEED;
    let tmp = tempfile::tempdir().unwrap();
    let dirs: Vec<_> = ["a", "b", "t1", "t8"].iter().map(|d| tmp.path().join(d)).collect();
    run_pipeline(&cfg, &dirs[0]).unwrap();
    run_pipeline(&cfg, &dirs[1]).unwrap();
    with_threads(Some(1), || run_pipeline(&cfg, &dirs[2])).unwrap().unwrap();
    with_threads(Some(8), || run_pipeline(&cfg, &dirs[3])).unwrap().unwrap();

    let mut files = Vec::new();
    collect_files(&dirs[0], &dirs[0], &mut files);
    let mut csv_same = true;
    let mut n_csv = 0;
    for f in files.iter().filter(|f| f.extension().is_some_and(|e| e == "csv")) {
        n_csv += 1;
        csv_same &= fs::read(dirs[0].join(f)).unwrap() == fs::read(dirs[1].join(f)).unwrap();
    }
    let mut worst = 0.0f64;
    let mut n_numeric = 0;
    let mut shapes_match = true;
    for f in &files {
        let (x, y) = (numbers(&dirs[2].join(f)), numbers(&dirs[3].join(f)));
        if x.is_empty() {
            continue;
        }
        n_numeric += 1;
        shapes_match &= x.len() == y.len();
        for (u, v) in x.iter().zip(&y) {
            worst = worst.max((u - v).abs() / (1.0 + u.abs()));
        }
    }
    verdict(
        csv_same && shapes_match && worst <= 1e-12,
        format!(
            "{n_csv} CSVs {} across repeated runs; 1 vs 8 threads max deviation {worst:.1e} over {n_numeric} numeric artifacts",
            if csv_same { "byte-identical" } else { "DIFFER" }
        ),
    )
}

// 10. Identifiability cap
fn ac10() -> Verdict {
    let cap = rank_cap_dims(&[40, 40], &[0.1, 0.1]).unwrap();

    let grid = SpatialGrid::new(vec![10, 10]).unwrap();
    let mask = build_band_mask(&grid, BandRule::Distance { delta: 0.1 }).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(SEED + 10);
    let b = randn(&mut rng, 100, 2);
    let cov = MaskedCovariance {
        matrix: &b * b.transpose(),
        mask,
        n_subjects: 5,
        n_time: 10,
    };
    let small_cap = rank_cap_dims(&[10, 10], &[0.1, 0.1]).unwrap();
    let over = complete_rank(&cov, small_cap + 1, &CompletionOptions::default());
    let over_rejected = matches!(&over, Err(e) if e.is_validation());

    let mut cfg = PipelineConfig::simulated(SimConfig::new(20, 2, 5, Scheme::Bi));
    cfg.band = BandRule::Distance { delta: 0.5 };
    let wide_rejected = matches!(cfg.validate(), Err(e) if e.is_validation());
    let cap_rejects = matches!(rank_cap_dims(&[40, 40], &[0.5, 0.5]), Err(e) if e.is_validation());
    verdict(
        cap == 225 && over_rejected && wide_rejected && cap_rejects,
        format!(
            "K*(40, 0.1) = {cap}; j = K*+1 {}; delta = 0.5 {}",
            if over_rejected { "rejected" } else { "ACCEPTED" },
            if wide_rejected && cap_rejects { "rejected" } else { "ACCEPTED" }
        ),
    )
}

#[test]
fn acceptance_criteria() {
    let mut verdicts = Vec::new();
    let mut record = |id: usize, v: Verdict| {
        emit(id, &v);
        verdicts.push((id, v.pass));
    };
    record(1, ac1());
    let (v2, v3) = ac2_ac3();
    record(2, v2);
    record(3, v3);
    record(4, ac4());
    record(5, ac5());
    record(6, ac6());
    record(7, ac7());
    record(8, ac8());
    record(9, ac9());
    record(10, ac10());
    let passed = verdicts.iter().filter(|(_, p)| *p).count();
    emit_summary(passed, verdicts.len());
}

fn emit_summary(passed: usize, total: usize) {
    let mut out = std::io::stdout().lock();
    writeln!(out, "acceptance: {passed}/{total} criteria pass").unwrap();
    out.flush().unwrap();
}
