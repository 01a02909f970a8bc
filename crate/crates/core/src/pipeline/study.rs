//! Simulation studies: global covariance accuracy (study 1), subspace
//! expression under orthogonal and oblique rotation (study 2), and factor score
//! accuracy of FOSR against pointwise least squares (study 3).

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use rayon::prelude::*;

use super::config::{PipelineConfig, RunMode};
use super::report::{RankRow, ReportRow, ScreeSeries, StudyReport};
use super::{derive_seed, normalized_error, num, write_csv};
use crate::completion::{complete_rank, extract_loadings, rank_path, select_rank};
use crate::covassembly::{build_band_mask, empirical_spatial_cov};
use crate::error::{invalid, Error, Result};
use crate::grid::SpatialGrid;
use crate::loadings::RotationKind;
use crate::postprocess::{make_folds, postprocess};
use crate::rotation::{align_to_target, rotate, RotationMethod};
use crate::scores::{build_basis, default_basis_size, fosr_all, normalized_factor_errors, pwls_all, spatial_cv_gamma};
use crate::simgen::{simulate_dataset, SimConfig};

fn scenario_label(sim: &SimConfig) -> String {
    let scheme = serde_json::to_value(sim.scheme)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_default();
    format!("{scheme}_K{}_delta{}_regime{}_n{}", sim.k, sim.delta, sim.regime, sim.n)
}

fn rep_sim(cfg: &PipelineConfig, stream: u64) -> Result<SimConfig> {
    let mut sim = cfg
        .simulation
        .clone()
        .ok_or_else(|| invalid("studies need a `simulation` block"))?;
    sim.seed = derive_seed(cfg.seed, stream);
    Ok(sim)
}

/// Output of one study-1 replication.
#[derive(Debug, Clone)]
pub struct Study1Replication {
    pub rows: Vec<ReportRow>,
    pub k_hat: usize,
    pub scree: Vec<(usize, f64, Option<f64>)>,
}

/// Simulate, fit, rotate and postprocess once; errors of the MC (completion only),
/// MCS (with smoothing) and TFFA (smoothing and shrinkage) estimates of `G`.
pub fn study1_replication(cfg: &PipelineConfig, rep: usize) -> Result<Study1Replication> {
    let sim = rep_sim(cfg, rep as u64)?;
    let scenario = scenario_label(&sim);
    let (scans, truth) = simulate_dataset(&sim)?;
    let g = truth.global_cov();
    let grid = scans[0].grid.clone();
    let mask = build_band_mask(&grid, cfg.band.clone())?;
    let cov = empirical_spatial_cov(&scans, &mask, &cfg.covariance)?;
    let mut completion = cfg.completion.clone();
    completion.seed = sim.seed;
    let path = rank_path(&cov, completion.max_rank, &completion)?;
    let k_hat = select_rank(&path, cfg.rank)?;
    let fit = path
        .get(k_hat)
        .ok_or_else(|| invalid(format!("selected rank {k_hat} is outside the fitted path")))?;
    let initial = extract_loadings(&fit.v, &grid)?.loadings;
    let mut ropts = cfg.rotation.options.clone();
    ropts.seed = sim.seed;
    let rotated = rotate(&initial, cfg.rotation.method, &ropts)?.loadings;
    let folds = make_folds(&scans, cfg.postprocess.folds, &mask, &initial, &completion, &cfg.covariance)?;
    let mut pp = cfg.postprocess.clone();
    pp.smooth = true;
    pp.shrink = true;
    let post = postprocess(&rotated, Some(&folds), &pp)?;

    let mc = normalized_error(&g, &(&fit.v * fit.v.transpose()));
    let mcs = normalized_error(&g, &post.smoothed.global_covariance());
    let tffa = normalized_error(&g, &post.shrunk.global_covariance());
    log::info!("study1 rep {rep}: K = {k_hat}, E(MC) = {mc:.4}, E(MCS) = {mcs:.4}, E(TFFA) = {tffa:.4}");
    let rows = [("TFFA", tffa), ("MCS", mcs), ("MC", mc)]
        .into_iter()
        .map(|(est, e)| ReportRow {
            scenario: scenario.clone(),
            replication: rep,
            estimator: est.into(),
            error: e,
            relative_error: Some(e / tffa),
        })
        .collect();
    Ok(Study1Replication {
        rows,
        k_hat,
        scree: path.scree(),
    })
}

/// Factor-score errors `E_ik` of one study-3 replication with the true loadings.
#[derive(Debug, Clone)]
pub struct Study3Replication {
    pub scenario: String,
    /// `(estimator, subject, component, E_ik)`.
    pub errors: Vec<(String, usize, usize, f64)>,
    pub gamma: Vec<f64>,
}

impl Study3Replication {
    pub fn mean(&self, estimator: &str) -> f64 {
        let v: Vec<f64> = self
            .errors
            .iter()
            .filter(|e| e.0 == estimator)
            .map(|e| e.3)
            .collect();
        v.iter().sum::<f64>() / v.len() as f64
    }
}

pub fn study3_replication(cfg: &PipelineConfig, h: usize, delta: f64, rep: usize, stream: u64) -> Result<Study3Replication> {
    let mut sim = rep_sim(cfg, stream)?;
    sim.window = Some(h);
    sim.delta = delta;
    let scenario = format!("h{h}_delta{delta}");
    let (scans, truth) = simulate_dataset(&sim)?;
    let l = &truth.loadings.matrix;
    let j = sim.j;
    let basis = build_basis(cfg.scores.basis_size.unwrap_or_else(|| default_basis_size(j)), j)?;
    let gamma = match &cfg.scores.gamma {
        Some(g) => g.clone(),
        None => spatial_cv_gamma(&scans, l, &basis, &cfg.scores.gamma_grid, cfg.scores.folds, cfg.scores.uniform)?.best,
    };
    let fosr = fosr_all(&scans, l, &basis, &gamma)?;
    let pwls = pwls_all(&scans, l)?;
    let mut errors = Vec::new();
    for (name, est) in [("FOSR", &fosr), ("PWLS", &pwls)] {
        for (i, s) in est.iter().enumerate() {
            for (k, e) in normalized_factor_errors(&truth.factors[i], &s.f_hat).into_iter().enumerate() {
                errors.push((name.to_string(), i, k, e));
            }
        }
    }
    log::info!("study3 {scenario} rep {rep}: gamma = {gamma:?}");
    Ok(Study3Replication { scenario, errors, gamma })
}

fn loading_grid_rows(grid: &SpatialGrid, l: &DMatrix<f64>) -> Vec<Vec<String>> {
    (0..l.nrows())
        .map(|a| {
            let mut row: Vec<String> = grid.multi_index(a).iter().map(|i| i.to_string()).collect();
            row.extend(l.row(a).iter().map(|v| num(*v)));
            row
        })
        .collect()
}

fn write_loading_grid(path: &Path, grid: &SpatialGrid, l: &DMatrix<f64>) -> Result<()> {
    let mut header: Vec<String> = (0..grid.ndim()).map(|d| format!("i{d}")).collect();
    header.extend((0..l.ncols()).map(|k| format!("L{}", k + 1)));
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    write_csv(path, &header, &loading_grid_rows(grid, l))
}

/// Orthogonal (varimax) and oblique (quartimin) fits at `K` and the configured larger
/// ranks; returns `(rows, alignment rows)` and writes the final loadings as CSV grids.
fn study2_replication(cfg: &PipelineConfig, rep: usize, out: Option<&Path>) -> Result<(Vec<ReportRow>, Vec<Vec<String>>)> {
    let sim = rep_sim(cfg, rep as u64)?;
    let scenario = scenario_label(&sim);
    let (scans, truth) = simulate_dataset(&sim)?;
    let g = truth.global_cov();
    let grid = scans[0].grid.clone();
    let mask = build_band_mask(&grid, cfg.band.clone())?;
    let cov = empirical_spatial_cov(&scans, &mask, &cfg.covariance)?;
    let mut completion = cfg.completion.clone();
    completion.seed = sim.seed;
    let mut ranks = vec![sim.k];
    ranks.extend(cfg.study.extra_ranks.iter().map(|e| sim.k + e));
    let mut rows = Vec::new();
    let mut align_rows = Vec::new();
    for &rank in &ranks {
        let fit = complete_rank(&cov, rank, &completion)?;
        let initial = extract_loadings(&fit.v, &grid)?.loadings;
        let folds = make_folds(&scans, cfg.postprocess.folds, &mask, &initial, &completion, &cfg.covariance)?;
        for (label, method) in [
            ("orthogonal", RotationMethod::Varimax),
            ("oblique", RotationMethod::Oblimin { alpha: 0.0 }),
        ] {
            let mut ropts = cfg.rotation.options.clone();
            ropts.seed = sim.seed;
            let rot = rotate(&initial, method, &ropts)?;
            let post = postprocess(&rot.loadings, Some(&folds), &cfg.postprocess)?;
            let estimator = format!("{label}_K{rank}");
            rows.push(ReportRow {
                scenario: scenario.clone(),
                replication: rep,
                estimator: estimator.clone(),
                error: normalized_error(&g, &post.shrunk.global_covariance()),
                relative_error: None,
            });
            if rank == sim.k {
                let kind = if method.is_oblique() {
                    RotationKind::Oblique
                } else {
                    RotationKind::Orthogonal
                };
                let al = align_to_target(&post.shrunk.matrix, &truth.loadings.matrix, kind)?;
                align_rows.push(vec![
                    scenario.clone(),
                    rep.to_string(),
                    estimator.clone(),
                    num(al.residual / truth.loadings.matrix.norm()),
                ]);
            }
            if let Some(dir) = out {
                let d = dir.join("loadings");
                fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
                write_loading_grid(&d.join(format!("rep{rep:03}_{estimator}.csv")), &grid, &post.shrunk.matrix)?;
                if rep == 0 && rank == sim.k && label == "orthogonal" {
                    write_loading_grid(&d.join("truth.csv"), &grid, &truth.loadings.matrix)?;
                }
            }
        }
    }
    Ok((rows, align_rows))
}

/// Run the study selected by `cfg.mode`; study 2 writes loading grids under `out`.
pub fn run_study(cfg: &PipelineConfig, out: Option<&Path>) -> Result<StudyReport> {
    cfg.validate()?;
    if cfg.replications == 0 {
        return Err(invalid("a study needs at least one replication"));
    }
    let reps: Vec<usize> = (0..cfg.replications).collect();
    let mut report = StudyReport {
        mode: cfg.mode,
        replications: cfg.replications,
        baseline: None,
        rows: Vec::new(),
        ranks: Vec::new(),
        scree: Vec::new(),
        omitted_estimators: Vec::new(),
    };
    match cfg.mode {
        RunMode::Single => return Err(invalid("single runs go through run_pipeline")),
        RunMode::Study1 => {
            let results: Vec<Study1Replication> = reps
                .par_iter()
                .map(|&r| study1_replication(cfg, r))
                .collect::<Result<_>>()?;
            report.baseline = Some("TFFA".into());
            report.omitted_estimators = vec!["ICAS".into(), "ICA".into()];
            for (r, res) in results.into_iter().enumerate() {
                let scenario = res.rows[0].scenario.clone();
                report.ranks.push(RankRow {
                    scenario: scenario.clone(),
                    replication: r,
                    k_hat: res.k_hat,
                });
                report.scree.push(ScreeSeries {
                    scenario,
                    replication: r,
                    rows: res.scree,
                });
                report.rows.extend(res.rows);
            }
        }
        RunMode::Study2 => {
            report.omitted_estimators = vec!["ICAS".into()];
            let results: Vec<(Vec<ReportRow>, Vec<Vec<String>>)> = reps
                .par_iter()
                .map(|&r| study2_replication(cfg, r, out))
                .collect::<Result<_>>()?;
            let mut align = Vec::new();
            for (rows, a) in results {
                report.rows.extend(rows);
                align.extend(a);
            }
            if let Some(dir) = out {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                write_csv(
                    &dir.join("alignment.csv"),
                    &["scenario", "replication", "estimator", "relative_residual"],
                    &align,
                )?;
            }
        }
        RunMode::Study3 => {
            let mut cells = Vec::new();
            for &h in &cfg.study.heights {
                for &d in &cfg.study.deltas {
                    for &r in &reps {
                        cells.push((h, d, r));
                    }
                }
            }
            let results: Vec<Study3Replication> = cells
                .par_iter()
                .enumerate()
                .map(|(c, &(h, d, r))| study3_replication(cfg, h, d, r, c as u64))
                .collect::<Result<_>>()?;
            let mut detail = Vec::new();
            report.baseline = Some("FOSR".into());
            for (res, &(_, _, r)) in results.iter().zip(&cells) {
                let fosr = res.mean("FOSR");
                for est in ["FOSR", "PWLS"] {
                    let e = res.mean(est);
                    report.rows.push(ReportRow {
                        scenario: res.scenario.clone(),
                        replication: r,
                        estimator: est.into(),
                        error: e,
                        relative_error: Some(e / fosr),
                    });
                }
                for (est, i, k, e) in &res.errors {
                    detail.push(vec![
                        res.scenario.clone(),
                        r.to_string(),
                        est.clone(),
                        i.to_string(),
                        k.to_string(),
                        num(*e),
                    ]);
                }
            }
            if let Some(dir) = out {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                write_csv(
                    &dir.join("factor_errors.csv"),
                    &["scenario", "replication", "estimator", "subject", "component", "error"],
                    &detail,
                )?;
            }
        }
    }
    Ok(report)
}
