use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};

use tffa::completion::{extract_loadings, Optimizer, RankSelection};
use tffa::covassembly::{build_band_mask, BandRule, MaskedCovariance};
use tffa::grid::SpatialGrid;
use tffa::io::{load_dataset_from, read_matrix, write_matrix, DatasetManifest};
use tffa::loadings::{LoadingSet, Stage};
use tffa::pipeline::{
    cov_stage, diagnose_stage, emit_report, fit_stage, load_rotated, load_scores, load_truth_cov,
    postprocess_stage, read_json, rotate_stage, run_pipeline, run_study, scores_stage, with_threads,
    write_json, write_simulation, PipelineConfig, RunMode, StudyReport,
};
use tffa::rotation::RotationMethod;
use tffa::simgen::SimConfig;
use tffa::Error;

#[derive(Parser, Debug)]
#[command(name = "tffa", version, about = "Temporal functional factor analysis")]
struct Cli {
    /// JSON configuration (a pipeline config; `simulate` also accepts a bare simulation block).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (all cores by default).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum MaskRule {
    Fixed,
    Distance,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Select {
    Elbow,
    Threshold,
    Fixed,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum OptimizerArg {
    Lbfgs,
    Sgd,
    Hybrid,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum MethodArg {
    Varimax,
    Quartimax,
    Oblimin,
    Quartimin,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate scans with ground truth.
    Simulate,
    /// Empirical spatial covariance of a dataset.
    Cov {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_enum)]
        mask_rule: Option<MaskRule>,
        #[arg(long)]
        delta: Option<f64>,
        /// Band radius in voxels for the fixed rule.
        #[arg(long)]
        radius: Option<usize>,
    },
    /// Masked low-rank completion over a rank path.
    Fit {
        /// Covariance directory written by `cov` (or its `C.tft`).
        #[arg(long)]
        cov: PathBuf,
        #[arg(long)]
        max_rank: Option<usize>,
        #[arg(long, value_enum)]
        select: Option<Select>,
        /// Cutoff for `--select threshold`.
        #[arg(long)]
        threshold: Option<f64>,
        /// Rank for `--select fixed`.
        #[arg(long)]
        rank: Option<usize>,
        #[arg(long, value_enum)]
        optimizer: Option<OptimizerArg>,
    },
    /// Rotate a loading matrix.
    Rotate {
        #[arg(long)]
        loadings: PathBuf,
        #[arg(long, value_enum)]
        method: Option<MethodArg>,
        #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
        alpha: f64,
    },
    /// Cross-validated smoothing and shrinkage.
    Postprocess {
        #[arg(long)]
        fit: PathBuf,
        #[arg(long)]
        rot: PathBuf,
        #[arg(long)]
        folds: Option<usize>,
        #[arg(long, value_delimiter = ',')]
        sigma_grid: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',')]
        kappa_grid: Option<Vec<f64>>,
    },
    /// Function-on-scalar factor scores.
    Scores {
        #[arg(long)]
        scans: PathBuf,
        #[arg(long)]
        loadings: PathBuf,
        /// Number of B-spline basis functions.
        #[arg(long = "P")]
        basis_size: Option<usize>,
        #[arg(long, value_delimiter = ',')]
        gamma_grid: Option<Vec<f64>>,
        /// Fixed roughness weight; skips tuning.
        #[arg(long, value_delimiter = ',')]
        gamma: Option<Vec<f64>>,
    },
    /// Factor-covariance diagnostic on estimated scores.
    Diagnose {
        #[arg(long)]
        scores: PathBuf,
    },
    /// Full single run (resumable).
    Pipeline,
    /// Simulation study selected by the config's `mode`.
    Study,
    /// Re-emit report tables from a saved `report.json`.
    Report {
        #[arg(long)]
        input: PathBuf,
    },
    /// Print the configuration JSON schema.
    Schema,
}

fn validation(msg: impl Into<String>) -> anyhow::Error {
    Error::Validation(msg.into()).into()
}

fn out_dir(cli: &Cli) -> anyhow::Result<PathBuf> {
    let out = cli.out.clone().ok_or_else(|| validation("--out is required"))?;
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    Ok(out)
}

/// Pipeline config from `--config`, or defaults for a stage command.
fn stage_config(cli: &Cli) -> anyhow::Result<PipelineConfig> {
    match &cli.config {
        Some(p) => Ok(read_config_unchecked(p)?),
        None => Ok(PipelineConfig::simulated(SimConfig::new(
            20,
            2,
            5,
            tffa::simgen::Scheme::Bi,
        ))),
    }
}

/// Stage commands only use the stage sections, so run-level checks are skipped.
fn read_config_unchecked(path: &Path) -> tffa::Result<PipelineConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::Validation(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Validation(format!("config: {e}")))
}

fn run_config(cli: &Cli) -> anyhow::Result<PipelineConfig> {
    let path = cli.config.as_ref().ok_or_else(|| validation("--config is required"))?;
    let mut cfg = read_config_unchecked(path)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Provenance carried between stage directories.
fn write_source(dir: &Path, manifest: &Path, band: &BandRule) -> anyhow::Result<()> {
    write_json(
        &dir.join("source.json"),
        &serde_json::json!({ "manifest": manifest, "band": band }),
    )?;
    Ok(())
}

fn read_source(dir: &Path) -> anyhow::Result<(PathBuf, BandRule)> {
    let v: serde_json::Value = read_json(&dir.join("source.json"))
        .with_context(|| format!("{} was not written by this tool", dir.display()))?;
    let manifest = v["manifest"]
        .as_str()
        .map(PathBuf::from)
        .ok_or_else(|| validation("source.json lacks a manifest"))?;
    let band: BandRule = serde_json::from_value(v["band"].clone()).map_err(Error::from)?;
    Ok((manifest, band))
}

fn manifest_grid(manifest: &Path) -> anyhow::Result<SpatialGrid> {
    let m = DatasetManifest::read(manifest)?;
    let base = manifest.parent().unwrap_or(Path::new("."));
    Ok(m.load_grid(base)?)
}

fn dir_of(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.to_path_buf()
    } else {
        p.parent().map(Path::to_path_buf).unwrap_or_default()
    }
}

fn simulate(cli: &Cli) -> anyhow::Result<()> {
    let path = cli.config.as_ref().ok_or_else(|| validation("--config is required"))?;
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(Error::from)?;
    let mut sim: SimConfig = match value.get("simulation") {
        Some(s) => serde_json::from_value(s.clone()).map_err(Error::from)?,
        None => serde_json::from_value(value).map_err(Error::from)?,
    };
    if let Some(s) = cli.seed {
        sim.seed = s;
    }
    sim.validate()?;
    let out = out_dir(cli)?;
    let manifest = write_simulation(&out, &sim)?;
    if let Some(g) = load_truth_cov(&out)? {
        write_matrix(out.join("truth/G.tft"), &g)?;
    }
    println!("{}", manifest.display());
    Ok(())
}

fn cov(cli: &Cli, manifest: &Path, rule: Option<MaskRule>, delta: Option<f64>, radius: Option<usize>) -> anyhow::Result<()> {
    let cfg = stage_config(cli)?;
    let band = match rule {
        None => cfg.band.clone(),
        Some(MaskRule::Distance) => BandRule::Distance {
            delta: delta.ok_or_else(|| validation("--mask-rule distance needs --delta"))?,
        },
        Some(MaskRule::Fixed) => BandRule::FixedFraction { radius: radius.map(|r| vec![r]) },
    };
    let manifest = fs::canonicalize(manifest).with_context(|| format!("reading {}", manifest.display()))?;
    let scans = load_dataset_from(&manifest)?;
    let band = match band {
        BandRule::FixedFraction { radius: Some(r) } if r.len() == 1 => BandRule::FixedFraction {
            radius: Some(vec![r[0]; scans[0].grid.ndim()]),
        },
        b => b,
    };
    let out = out_dir(cli)?;
    let c = cov_stage(&scans, &band, &cfg.covariance, &out)?;
    write_source(&out, &manifest, &band)?;
    println!("covariance {}x{} from {} subjects", c.dim(), c.dim(), c.n_subjects);
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn fit(
    cli: &Cli,
    cov_path: &Path,
    max_rank: Option<usize>,
    select: Option<Select>,
    threshold: Option<f64>,
    rank: Option<usize>,
    optimizer: Option<OptimizerArg>,
) -> anyhow::Result<()> {
    let cfg = stage_config(cli)?;
    let cov_dir = dir_of(cov_path);
    let (manifest, band) = read_source(&cov_dir)?;
    let grid = manifest_grid(&manifest)?;
    let mask = build_band_mask(&grid, band.clone())?;
    let info: serde_json::Value = read_json(&cov_dir.join("cov.json"))?;
    let cov = MaskedCovariance {
        matrix: read_matrix(cov_dir.join("C.tft"))?,
        mask,
        n_subjects: info["n_subjects"].as_u64().unwrap_or(0) as usize,
        n_time: info["n_time"].as_u64().unwrap_or(0) as usize,
    };
    let mut completion = cfg.completion.clone();
    if let Some(r) = max_rank {
        completion.max_rank = r;
    }
    if let Some(o) = optimizer {
        completion.optimizer = match o {
            OptimizerArg::Lbfgs => Optimizer::QuasiNewton,
            OptimizerArg::Sgd => Optimizer::BlockSgd,
            OptimizerArg::Hybrid => Optimizer::Hybrid,
        };
    }
    completion.seed = cli.seed.unwrap_or(cfg.seed);
    completion.validate()?;
    let selection = match select {
        None => cfg.rank,
        Some(Select::Elbow) => RankSelection::Elbow,
        Some(Select::Threshold) => RankSelection::Threshold {
            c: threshold.ok_or_else(|| validation("--select threshold needs --threshold"))?,
        },
        Some(Select::Fixed) => RankSelection::Fixed {
            j: rank.ok_or_else(|| validation("--select fixed needs --rank"))?,
        },
    };
    let out = out_dir(cli)?;
    let (k_hat, _) = fit_stage(&cov, &completion, selection, &out)?;
    write_source(&out, &manifest, &band)?;
    println!("selected rank {k_hat}");
    Ok(())
}

fn rotate_cmd(cli: &Cli, loadings: &Path, method: Option<MethodArg>, alpha: f64) -> anyhow::Result<()> {
    let cfg = stage_config(cli)?;
    let mut stage = cfg.rotation.clone();
    if let Some(m) = method {
        stage.method = match m {
            MethodArg::Varimax => RotationMethod::Varimax,
            MethodArg::Quartimax => RotationMethod::Quartimax,
            MethodArg::Oblimin => RotationMethod::Oblimin { alpha },
            MethodArg::Quartimin => RotationMethod::Oblimin { alpha: 0.0 },
        };
    }
    let m = read_matrix(loadings)?;
    // rotation ignores geometry, so a flat grid suffices
    let grid = SpatialGrid::new(vec![m.nrows()])?;
    let set = LoadingSet::new(grid, m, Stage::Initial)?;
    let out = out_dir(cli)?;
    let rotated = rotate_stage(&set, &stage, cli.seed.unwrap_or(cfg.seed), &out)?;
    println!("rotated {} components ({})", rotated.n_components(), stage.method.label());
    Ok(())
}

fn postprocess_cmd(
    cli: &Cli,
    fit_dir: &Path,
    rot_dir: &Path,
    folds: Option<usize>,
    sigma_grid: Option<Vec<f64>>,
    kappa_grid: Option<Vec<f64>>,
) -> anyhow::Result<()> {
    let cfg = stage_config(cli)?;
    let (manifest, band) = read_source(fit_dir)?;
    let scans = load_dataset_from(&manifest)?;
    let grid = scans[0].grid.clone();
    let mask = build_band_mask(&grid, band.clone())?;
    let v = read_matrix(fit_dir.join("V.tft"))?;
    let initial = extract_loadings(&v, &grid)?.loadings;
    let rotated = load_rotated(&grid, rot_dir)?;
    let mut pp = cfg.postprocess.clone();
    if let Some(f) = folds {
        pp.folds = f;
    }
    if let Some(g) = sigma_grid {
        pp.sigma_grid = g;
    }
    if kappa_grid.is_some() {
        pp.kappa_grid = kappa_grid;
    }
    pp.validate()?;
    let mut completion = cfg.completion.clone();
    completion.seed = cli.seed.unwrap_or(cfg.seed);
    let out = out_dir(cli)?;
    let res = postprocess_stage(&scans, &mask, &initial, &rotated, &pp, &completion, &cfg.covariance, &out)?;
    write_source(&out, &manifest, &band)?;
    println!("sigma {:?} kappa {:?}", res.sigma, res.kappa);
    Ok(())
}

fn scores_cmd(
    cli: &Cli,
    scans: &Path,
    loadings: &Path,
    basis_size: Option<usize>,
    gamma_grid: Option<Vec<f64>>,
    gamma: Option<Vec<f64>>,
) -> anyhow::Result<()> {
    let cfg = stage_config(cli)?;
    let mut sc = cfg.scores.clone();
    if basis_size.is_some() {
        sc.basis_size = basis_size;
    }
    if let Some(g) = gamma_grid {
        sc.gamma_grid = g;
    }
    if gamma.is_some() {
        sc.gamma = gamma;
    }
    let data = load_dataset_from(scans)?;
    let l = read_matrix(loadings)?;
    let out = out_dir(cli)?;
    let (f, g) = scores_stage(&data, &l, &sc, &out)?;
    println!("scores for {} subjects, gamma {:?}", f.len(), g);
    Ok(())
}

fn diagnose_cmd(cli: &Cli, scores: &Path) -> anyhow::Result<()> {
    let (f, _) = load_scores(scores)?;
    let out = cli.out.clone().ok_or_else(|| validation("--out is required"))?;
    let (json, csv) = if out.extension().is_some_and(|e| e == "json") {
        if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent)?;
        }
        (out.clone(), out.with_extension("csv"))
    } else {
        fs::create_dir_all(&out)?;
        (out.join("diagnostic.json"), out.join("heatmap.csv"))
    };
    let rep = diagnose_stage(&f, &json, &csv)?;
    println!("{} of {} entries flagged after Bonferroni", rep.n_flagged(), rep.tests.len());
    Ok(())
}

fn pipeline_cmd(cli: &Cli) -> anyhow::Result<()> {
    let mut cfg = run_config(cli)?;
    if cfg.mode != RunMode::Single {
        return Err(validation("`pipeline` runs mode \"single\"; use `study` for studies"));
    }
    let out = cli.out.clone().or_else(|| cfg.output.clone()).ok_or_else(|| validation("--out is required"))?;
    cfg.output = Some(out.clone());
    let outcome = run_pipeline(&cfg, &out)?;
    println!(
        "rank {} | executed: {} | summary: {}",
        outcome.k_hat,
        if outcome.executed.is_empty() { "nothing".to_string() } else { outcome.executed.join(", ") },
        out.join("summary.json").display()
    );
    Ok(())
}

fn study_cmd(cli: &Cli) -> anyhow::Result<()> {
    let cfg = run_config(cli)?;
    if cfg.mode == RunMode::Single {
        return Err(validation("`study` needs mode study1, study2, or study3"));
    }
    let out = cli.out.clone().or_else(|| cfg.output.clone()).ok_or_else(|| validation("--out is required"))?;
    fs::create_dir_all(&out)?;
    write_json(&out.join("config.json"), &cfg)?;
    let report = run_study(&cfg, Some(&out))?;
    write_json(&out.join("report.json"), &report)?;
    emit_report(&report, &out)?;
    for s in report.summary() {
        println!(
            "{:<40} {:<10} mean {:.4} sd {:.4}",
            s.scenario, s.estimator, s.mean_error, s.sd_error
        );
    }
    Ok(())
}

fn report_cmd(cli: &Cli, input: &Path) -> anyhow::Result<()> {
    let report: StudyReport = read_json(input)?;
    let out = out_dir(cli)?;
    emit_report(&report, &out)?;
    println!("{} rows written to {}", report.rows.len(), out.display());
    Ok(())
}

fn schema_cmd(cli: &Cli) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(&PipelineConfig::schema())?;
    match &cli.out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display()))?,
        None => println!("{text}"),
    }
    Ok(())
}

fn dispatch(cli: &Cli) -> anyhow::Result<()> {
    match &cli.command {
        Command::Simulate => simulate(cli),
        Command::Cov {
            manifest,
            mask_rule,
            delta,
            radius,
        } => cov(cli, manifest, *mask_rule, *delta, *radius),
        Command::Fit {
            cov,
            max_rank,
            select,
            threshold,
            rank,
            optimizer,
        } => fit(cli, cov, *max_rank, *select, *threshold, *rank, *optimizer),
        Command::Rotate { loadings, method, alpha } => rotate_cmd(cli, loadings, *method, *alpha),
        Command::Postprocess {
            fit,
            rot,
            folds,
            sigma_grid,
            kappa_grid,
        } => postprocess_cmd(cli, fit, rot, *folds, sigma_grid.clone(), kappa_grid.clone()),
        Command::Scores {
            scans,
            loadings,
            basis_size,
            gamma_grid,
            gamma,
        } => scores_cmd(cli, scans, loadings, *basis_size, gamma_grid.clone(), gamma.clone()),
        Command::Diagnose { scores } => diagnose_cmd(cli, scores),
        Command::Pipeline => pipeline_cmd(cli),
        Command::Study => study_cmd(cli),
        Command::Report { input } => report_cmd(cli, input),
        Command::Schema => schema_cmd(cli),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(e) if e.is_validation() => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = with_threads(cli.threads, || dispatch(&cli))
        .map_err(anyhow::Error::from)
        .and_then(|r| r);
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

