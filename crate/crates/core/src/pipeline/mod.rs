//! End-to-end orchestration: simulate/load → covariance → completion →
//! rotation → postprocessing → factor scores → diagnostic, with every
//! intermediate persisted so a run can resume from its last finished stage.

pub mod config;
pub mod report;
pub mod study;

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::completion::{extract_loadings, rank_path, select_rank, CompletionOptions, RankPath, RankSelection};
use crate::covassembly::{build_band_mask, empirical_spatial_cov, BandMask, BandRule, CovOptions, MaskedCovariance};
use crate::error::{invalid, Error, Result};
use crate::grid::SpatialGrid;
use crate::io::{load_dataset_from, read_matrix, write_dataset, write_matrix, Dtype, ScanTensor};
use crate::loadings::{LoadingSet, RotationKind, Stage};
use crate::postprocess::{make_folds, postprocess, CvPoint, PostprocessConfig, PostprocessResult};
use crate::rotation::{rotate, RotationResult};
use crate::scores::{
    build_basis, default_basis_size, factor_cov_diagnostic, fosr_all, spatial_cv_gamma, DiagnosticReport, GammaPoint,
};
use crate::simgen::{simulate_dataset, GroundTruth, SimConfig};

pub use config::{PipelineConfig, RotationStage, RunMode, ScoresConfig, StudyConfig};
pub use report::{emit_report, ReportRow, StudyReport, SummaryRow};
pub use study::run_study;

pub const STAGES: [&str; 7] = ["data", "cov", "fit", "rotate", "postprocess", "scores", "diagnose"];

/// Stage manifest written as `<stage>/stage.json` once the stage completes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    pub version: String,
    pub seed: u64,
    pub elapsed_seconds: f64,
}

#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub run_dir: PathBuf,
    /// Stages executed by this invocation (the rest were loaded from disk).
    pub executed: Vec<String>,
    pub k_hat: usize,
    pub sigma: Vec<f64>,
    pub kappa: Vec<f64>,
    pub gamma: Vec<f64>,
    pub flagged: usize,
}

/// Run `f` on a dedicated pool of `threads` workers (all cores when `None`).
pub fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        if n == 0 {
            return Err(invalid("thread count must be positive"));
        }
        builder = builder.num_threads(n);
    }
    let pool = builder.build().map_err(|e| Error::Numerical(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

/// Independent seed for stream `stream` of a base seed.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(header).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.write_record(r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn num(x: f64) -> String {
    format!("{x}")
}

pub(crate) fn scree_rows(path: &RankPath) -> Vec<Vec<String>> {
    path.scree()
        .into_iter()
        .map(|(j, f, r)| vec![j.to_string(), num(f), r.map(num).unwrap_or_default()])
        .collect()
}

pub(crate) fn cv_rows(curve: &[CvPoint]) -> Vec<Vec<String>> {
    curve
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let params = p.kappa.as_ref().unwrap_or(&p.sigma);
            vec![
                i.to_string(),
                params.iter().map(|v| num(*v)).collect::<Vec<_>>().join(";"),
                num(p.cv),
                p.fold_errors.iter().map(|v| num(*v)).collect::<Vec<_>>().join(";"),
            ]
        })
        .collect()
}

fn gamma_rows(curve: &[GammaPoint]) -> Vec<Vec<String>> {
    curve
        .iter()
        .enumerate()
        .map(|(i, p)| {
            vec![
                i.to_string(),
                p.gamma.iter().map(|v| num(*v)).collect::<Vec<_>>().join(";"),
                num(p.error),
                p.fold_errors.iter().map(|v| num(*v)).collect::<Vec<_>>().join(";"),
            ]
        })
        .collect()
}

/// Normalized error `||G - x||_F / ||G||_F`.
pub fn normalized_error(truth: &DMatrix<f64>, est: &DMatrix<f64>) -> f64 {
    (truth - est).norm() / truth.norm()
}

/// `fit/fit.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitInfo {
    pub k_hat: usize,
    pub seed: u64,
    pub objective: Vec<f64>,
    pub iterations: Vec<usize>,
    pub grad_norm: Vec<f64>,
    pub converged: Vec<bool>,
}

/// `rotate/rotate.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RotateInfo {
    pub kind: RotationKind,
    pub method: String,
    pub criterion: f64,
    pub converged: bool,
    pub restart: usize,
}

/// `postprocess/post.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PostInfo {
    pub sigma: Vec<f64>,
    pub kappa: Vec<f64>,
    pub alignment_residuals: Vec<f64>,
}

/// `scores/scores.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoresInfo {
    pub gamma: Vec<f64>,
    pub basis_size: usize,
    pub n_subjects: usize,
}

/// Summary written at the run root after the last stage.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    pub k_hat: usize,
    pub sigma: Vec<f64>,
    pub kappa: Vec<f64>,
    pub gamma: Vec<f64>,
    pub bonferroni_flags: usize,
    /// Normalized global-covariance errors, present for simulated data.
    pub errors: Option<EstimatorErrors>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EstimatorErrors {
    pub mc: f64,
    pub mcs: f64,
    pub tffa: f64,
}

struct Run<'a> {
    cfg: &'a PipelineConfig,
    dir: PathBuf,
    executed: Vec<String>,
    dirty: bool,
}

impl Run<'_> {
    fn stage_dir(&self, stage: &str) -> PathBuf {
        self.dir.join(stage)
    }

    /// Whether `stage` must run: its manifest is missing or an upstream stage re-ran.
    fn needs(&mut self, stage: &str) -> Result<bool> {
        let dir = self.stage_dir(stage);
        if !self.dirty && dir.join("stage.json").is_file() {
            log::info!("stage {stage}: reusing {}", dir.display());
            return Ok(false);
        }
        self.dirty = true;
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        log::info!("stage {stage}: running");
        Ok(true)
    }

    fn finish(&mut self, stage: &str, start: Instant) -> Result<()> {
        let rec = StageRecord {
            stage: stage.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed: self.cfg.seed,
            elapsed_seconds: start.elapsed().as_secs_f64(),
        };
        write_json(&self.stage_dir(stage).join("stage.json"), &rec)?;
        self.executed.push(stage.to_string());
        Ok(())
    }
}

fn effective_sim(cfg: &PipelineConfig) -> Option<SimConfig> {
    cfg.simulation.clone().map(|mut s| {
        s.seed = cfg.seed;
        s
    })
}

/// Ground truth under `<dir>/truth/`: loadings, factor covariance `H`, and per-subject factors.
pub fn write_truth(dir: &Path, truth: &GroundTruth) -> Result<()> {
    let t = dir.join("truth");
    fs::create_dir_all(t.join("factors")).map_err(|e| Error::io(&t, e))?;
    write_matrix(t.join("loadings.tft"), &truth.loadings.matrix)?;
    write_matrix(t.join("h.tft"), &truth.h)?;
    for (i, f) in truth.factors.iter().enumerate() {
        write_matrix(t.join(format!("factors/factor_{i:04}.tft")), f)?;
    }
    Ok(())
}

/// Simulate and persist scans, manifest, and ground truth; returns the manifest path.
pub fn write_simulation(dir: &Path, sim: &SimConfig) -> Result<PathBuf> {
    let (scans, truth) = simulate_dataset(sim)?;
    let manifest = write_dataset(dir, &scans, Dtype::F64)?;
    write_truth(dir, &truth)?;
    write_json(&dir.join("simulation.json"), sim)?;
    Ok(manifest)
}

/// True global covariance stored with simulated data, if any.
pub fn load_truth_cov(data_dir: &Path) -> Result<Option<DMatrix<f64>>> {
    let t = data_dir.join("truth");
    if !t.join("loadings.tft").is_file() {
        return Ok(None);
    }
    let l = read_matrix(t.join("loadings.tft"))?;
    let h = read_matrix(t.join("h.tft"))?;
    Ok(Some(&l * h * l.transpose()))
}

/// Empirical covariance stage: `C.tft` and `cov.json`.
pub fn cov_stage(scans: &[ScanTensor], band: &BandRule, opts: &CovOptions, dir: &Path) -> Result<MaskedCovariance> {
    let first = scans.first().ok_or_else(|| invalid("no scans"))?;
    let mask = build_band_mask(&first.grid, band.clone())?;
    let cov = empirical_spatial_cov(scans, &mask, opts)?;
    write_matrix(dir.join("C.tft"), &cov.matrix)?;
    write_json(
        &dir.join("cov.json"),
        &serde_json::json!({
            "n_subjects": cov.n_subjects,
            "n_time": cov.n_time,
            "dim": cov.dim(),
            "trace": cov.trace(),
            "band": band,
            "off_band_entries": mask.pattern().count(),
        }),
    )?;
    Ok(cov)
}

/// Subspace estimation stage: rank path, selection, `scree.csv`, `V.tft`, `L.tft`, `fit.json`.
pub fn fit_stage(
    cov: &MaskedCovariance,
    completion: &CompletionOptions,
    rank: RankSelection,
    dir: &Path,
) -> Result<(usize, DMatrix<f64>)> {
    let path = rank_path(cov, completion.max_rank, completion)?;
    let k_hat = select_rank(&path, rank)?;
    let fit = path
        .get(k_hat)
        .ok_or_else(|| invalid(format!("selected rank {k_hat} is outside the fitted path")))?;
    write_csv(&dir.join("scree.csv"), &["j", "f_j", "ratio"], &scree_rows(&path))?;
    write_matrix(dir.join("V.tft"), &fit.v)?;
    let est = extract_loadings(&fit.v, cov.mask.grid())?;
    write_matrix(dir.join("L.tft"), &est.loadings.matrix)?;
    write_json(
        &dir.join("fit.json"),
        &FitInfo {
            k_hat,
            seed: completion.seed,
            objective: path.values(),
            iterations: path.entries.iter().map(|e| e.iterations).collect(),
            grad_norm: path.entries.iter().map(|e| e.grad_norm).collect(),
            converged: path.entries.iter().map(|e| e.converged).collect(),
        },
    )?;
    Ok((k_hat, fit.v.clone()))
}

/// Rotation stage: `Lstar.tft`, `transform.tft`, `phi.tft`, `trace.csv`, `rotate.json`.
pub fn rotate_stage(initial: &LoadingSet, stage: &RotationStage, seed: u64, dir: &Path) -> Result<LoadingSet> {
    let mut opts = stage.options.clone();
    opts.seed = seed;
    let res: RotationResult = rotate(initial, stage.method, &opts)?;
    write_matrix(dir.join("Lstar.tft"), &res.loadings.matrix)?;
    write_matrix(dir.join("transform.tft"), &res.transform)?;
    write_matrix(dir.join("phi.tft"), &res.phi)?;
    let trace: Vec<Vec<String>> = res.trace.iter().enumerate().map(|(i, f)| vec![i.to_string(), num(*f)]).collect();
    write_csv(&dir.join("trace.csv"), &["iteration", "criterion"], &trace)?;
    write_json(
        &dir.join("rotate.json"),
        &RotateInfo {
            kind: res.kind,
            method: res.method.label().to_string(),
            criterion: res.criterion,
            converged: res.converged,
            restart: res.restart,
        },
    )?;
    Ok(res.loadings)
}

/// Rotated loadings persisted by [`rotate_stage`], placed on `grid`.
pub fn load_rotated(grid: &SpatialGrid, dir: &Path) -> Result<LoadingSet> {
    let info: RotateInfo = read_json(&dir.join("rotate.json"))?;
    let mut set = LoadingSet::new(grid.clone(), read_matrix(dir.join("Lstar.tft"))?, Stage::Rotated)?;
    set.kind = Some(info.kind);
    set.transform = Some(read_matrix(dir.join("transform.tft"))?);
    set.phi = Some(read_matrix(dir.join("phi.tft"))?);
    Ok(set)
}

/// Postprocessing stage: `Ltilde.tft`, `Lbar.tft`, `cv_sigma.csv`, `cv_kappa.csv`, `post.json`.
#[allow(clippy::too_many_arguments)]
pub fn postprocess_stage(
    scans: &[ScanTensor],
    mask: &BandMask,
    initial: &LoadingSet,
    rotated: &LoadingSet,
    pp: &PostprocessConfig,
    completion: &CompletionOptions,
    cov_opts: &CovOptions,
    dir: &Path,
) -> Result<PostprocessResult> {
    let tuning = pp.smooth && pp.sigma.is_none() || pp.shrink && pp.kappa.is_none();
    let folds = if tuning {
        Some(make_folds(scans, pp.folds, mask, initial, completion, cov_opts)?)
    } else {
        None
    };
    let res = postprocess(rotated, folds.as_ref(), pp)?;
    write_matrix(dir.join("Ltilde.tft"), &res.smoothed.matrix)?;
    write_matrix(dir.join("Lbar.tft"), &res.shrunk.matrix)?;
    let header = ["index", "parameters", "cv", "fold_errors"];
    write_csv(&dir.join("cv_sigma.csv"), &header, &cv_rows(&res.sigma_curve))?;
    write_csv(&dir.join("cv_kappa.csv"), &header, &cv_rows(&res.kappa_curve))?;
    write_json(
        &dir.join("post.json"),
        &PostInfo {
            sigma: res.sigma.clone(),
            kappa: res.kappa.clone(),
            alignment_residuals: folds.map(|f| f.alignment_residual).unwrap_or_default(),
        },
    )?;
    Ok(res)
}

/// Factor-score stage: `F_<i>.tft` per subject, `gamma_cv.csv`, `scores.json`.
pub fn scores_stage(scans: &[ScanTensor], l: &DMatrix<f64>, cfg: &ScoresConfig, dir: &Path) -> Result<(Vec<DMatrix<f64>>, Vec<f64>)> {
    let first = scans.first().ok_or_else(|| invalid("no scans"))?;
    let j = first.n_time();
    let p = cfg.basis_size.unwrap_or_else(|| default_basis_size(j));
    let basis = build_basis(p, j)?;
    let (gamma, curve) = match &cfg.gamma {
        Some(g) => (g.clone(), Vec::new()),
        None => {
            let t = spatial_cv_gamma(scans, l, &basis, &cfg.gamma_grid, cfg.folds, cfg.uniform)?;
            (t.best, t.curve)
        }
    };
    let scores = fosr_all(scans, l, &basis, &gamma)?;
    for (i, s) in scores.iter().enumerate() {
        write_matrix(dir.join(format!("F_{i:04}.tft")), &s.f_hat)?;
    }
    write_csv(&dir.join("gamma_cv.csv"), &["index", "gamma", "error", "fold_errors"], &gamma_rows(&curve))?;
    write_json(
        &dir.join("scores.json"),
        &ScoresInfo {
            gamma: gamma.clone(),
            basis_size: p,
            n_subjects: scores.len(),
        },
    )?;
    Ok((scores.into_iter().map(|s| s.f_hat).collect(), gamma))
}

/// Score matrices and metadata persisted by [`scores_stage`].
pub fn load_scores(dir: &Path) -> Result<(Vec<DMatrix<f64>>, ScoresInfo)> {
    let info: ScoresInfo = read_json(&dir.join("scores.json"))?;
    let f = (0..info.n_subjects)
        .map(|i| read_matrix(dir.join(format!("F_{i:04}.tft"))))
        .collect::<Result<Vec<_>>>()?;
    Ok((f, info))
}

/// Diagnostic stage: `<json>` report plus a heatmap CSV at `<csv>`.
pub fn diagnose_stage(f_hats: &[DMatrix<f64>], json: &Path, csv: &Path) -> Result<DiagnosticReport> {
    let rep = factor_cov_diagnostic(f_hats)?;
    write_json(json, &rep)?;
    report::write_heatmap(csv, &rep)?;
    Ok(rep)
}

/// Execute (or resume) a single configured run under `out`.
pub fn run_pipeline(cfg: &PipelineConfig, out: &Path) -> Result<PipelineOutcome> {
    cfg.validate()?;
    if cfg.mode != RunMode::Single {
        return Err(invalid("run_pipeline handles single runs; use run_study for studies"));
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_json(&out.join("config.json"), cfg)?;
    let mut run = Run {
        cfg,
        dir: out.to_path_buf(),
        executed: Vec::new(),
        dirty: false,
    };

    let data_dir = run.stage_dir("data");
    if run.needs("data")? {
        let t0 = Instant::now();
        match (effective_sim(cfg), &cfg.dataset) {
            (Some(sim), _) => {
                write_simulation(&data_dir, &sim)?;
            }
            (None, Some(path)) => {
                let src = fs::canonicalize(path).map_err(|e| Error::io(path, e))?;
                load_dataset_from(&src)?;
                write_json(&data_dir.join("source.json"), &serde_json::json!({ "manifest": src }))?;
            }
            (None, None) => unreachable!("validated"),
        }
        run.finish("data", t0)?;
    }
    let scans: Vec<ScanTensor> = if data_dir.join("manifest.json").is_file() {
        load_dataset_from(data_dir.join("manifest.json"))?
    } else {
        let src: serde_json::Value = read_json(&data_dir.join("source.json"))?;
        let path = src["manifest"]
            .as_str()
            .ok_or_else(|| invalid("data/source.json lacks a manifest path"))?;
        load_dataset_from(path)?
    };
    let grid = scans[0].grid.clone();
    let mask = build_band_mask(&grid, cfg.band.clone())?;

    let cov_dir = run.stage_dir("cov");
    let cov = if run.needs("cov")? {
        let t0 = Instant::now();
        let cov = cov_stage(&scans, &cfg.band, &cfg.covariance, &cov_dir)?;
        run.finish("cov", t0)?;
        cov
    } else {
        MaskedCovariance {
            matrix: read_matrix(cov_dir.join("C.tft"))?,
            mask: mask.clone(),
            n_subjects: scans.len(),
            n_time: scans[0].n_time(),
        }
    };

    let mut completion = cfg.completion.clone();
    completion.seed = cfg.seed;
    let fit_dir = run.stage_dir("fit");
    let (k_hat, v) = if run.needs("fit")? {
        let t0 = Instant::now();
        let out = fit_stage(&cov, &completion, cfg.rank, &fit_dir)?;
        run.finish("fit", t0)?;
        out
    } else {
        let info: FitInfo = read_json(&fit_dir.join("fit.json"))?;
        (info.k_hat, read_matrix(fit_dir.join("V.tft"))?)
    };
    let initial = extract_loadings(&v, &grid)?.loadings;

    let rot_dir = run.stage_dir("rotate");
    let rotated = if run.needs("rotate")? {
        let t0 = Instant::now();
        let r = rotate_stage(&initial, &cfg.rotation, cfg.seed, &rot_dir)?;
        run.finish("rotate", t0)?;
        r
    } else {
        load_rotated(&grid, &rot_dir)?
    };

    let post_dir = run.stage_dir("postprocess");
    let (smoothed, shrunk, sigma, kappa) = if run.needs("postprocess")? {
        let t0 = Instant::now();
        let res = postprocess_stage(&scans, &mask, &initial, &rotated, &cfg.postprocess, &completion, &cfg.covariance, &post_dir)?;
        run.finish("postprocess", t0)?;
        (res.smoothed, res.shrunk, res.sigma, res.kappa)
    } else {
        let info: PostInfo = read_json(&post_dir.join("post.json"))?;
        let smoothed = rotated.with_matrix(read_matrix(post_dir.join("Ltilde.tft"))?, Stage::Smoothed);
        let shrunk = rotated.with_matrix(read_matrix(post_dir.join("Lbar.tft"))?, Stage::Shrunk);
        (smoothed, shrunk, info.sigma, info.kappa)
    };

    let scores_dir = run.stage_dir("scores");
    let (f_hats, gamma) = if run.needs("scores")? {
        let t0 = Instant::now();
        let out = scores_stage(&scans, &shrunk.matrix, &cfg.scores, &scores_dir)?;
        run.finish("scores", t0)?;
        out
    } else {
        let (f, info) = load_scores(&scores_dir)?;
        (f, info.gamma)
    };

    let diag_dir = run.stage_dir("diagnose");
    let flagged = if run.needs("diagnose")? {
        let t0 = Instant::now();
        let rep = diagnose_stage(&f_hats, &diag_dir.join("diagnostic.json"), &diag_dir.join("heatmap.csv"))?;
        run.finish("diagnose", t0)?;
        rep.n_flagged()
    } else {
        let rep: DiagnosticReport = read_json(&diag_dir.join("diagnostic.json"))?;
        rep.n_flagged()
    };

    let errors = match load_truth_cov(&data_dir)? {
        Some(g) => Some(EstimatorErrors {
            mc: normalized_error(&g, &(&v * v.transpose())),
            mcs: normalized_error(&g, &smoothed.global_covariance()),
            tffa: normalized_error(&g, &shrunk.global_covariance()),
        }),
        None => None,
    };
    write_json(
        &out.join("summary.json"),
        &RunSummary {
            k_hat,
            sigma: sigma.clone(),
            kappa: kappa.clone(),
            gamma: gamma.clone(),
            bonferroni_flags: flagged,
            errors,
        },
    )?;
    Ok(PipelineOutcome {
        run_dir: out.to_path_buf(),
        executed: run.executed,
        k_hat,
        sigma,
        kappa,
        gamma,
        flagged,
    })
}
