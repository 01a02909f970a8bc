use std::fs;
use std::path::Path;

use tffa::covassembly::BandRule;
use tffa::pipeline::{run_pipeline, with_threads, PipelineConfig};
use tffa::simgen::{Scheme, SimConfig};

fn small_config() -> PipelineConfig {
    let mut sim = SimConfig::new(20, 2, 5, Scheme::Bi);
    sim.j = 100;
    sim.p = 10;
    let mut cfg = PipelineConfig::simulated(sim);
    cfg.seed = 7;
    cfg.rotation.options.restarts = 4;
    cfg
}

fn csv_files(dir: &Path) -> Vec<(String, String)> {
    let mut out = Vec::new();
    for stage in tffa::pipeline::STAGES {
        let d = dir.join(stage);
        let Ok(entries) = fs::read_dir(&d) else { continue };
        let mut names: Vec<_> = entries.map(|e| e.unwrap().path()).collect();
        names.sort();
        for p in names {
            if p.extension().is_some_and(|e| e == "csv") {
                out.push((
                    p.strip_prefix(dir).unwrap().display().to_string(),
                    fs::read_to_string(&p).unwrap(),
                ));
            }
        }
    }
    out
}

#[test]
fn smoke_resume_and_determinism() {
    let cfg = small_config();
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let first = run_pipeline(&cfg, &a).unwrap();
    assert_eq!(first.executed, tffa::pipeline::STAGES.to_vec());
    assert!(first.k_hat >= 1);
    for f in [
        "data/manifest.json",
        "cov/C.tft",
        "fit/scree.csv",
        "fit/L.tft",
        "rotate/Lstar.tft",
        "rotate/trace.csv",
        "postprocess/Lbar.tft",
        "postprocess/cv_sigma.csv",
        "postprocess/cv_kappa.csv",
        "scores/F_0000.tft",
        "scores/gamma_cv.csv",
        "diagnose/diagnostic.json",
        "diagnose/heatmap.csv",
        "summary.json",
    ] {
        assert!(a.join(f).is_file(), "missing {f}");
    }
    let scree = fs::read_to_string(a.join("fit/scree.csv")).unwrap();
    assert!(scree.starts_with("j,f_j,ratio"));

    // resuming after removing the score stage re-runs only stage (iv)
    let before = csv_files(&a);
    fs::remove_dir_all(a.join("scores")).unwrap();
    let second = run_pipeline(&cfg, &a).unwrap();
    assert_eq!(second.executed, vec!["scores".to_string(), "diagnose".to_string()]);
    assert_eq!(csv_files(&a), before);

    // a fresh run with the same seed reproduces every CSV byte for byte
    let b = tmp.path().join("b");
    run_pipeline(&cfg, &b).unwrap();
    assert_eq!(csv_files(&b), before);
}

#[test]
fn thread_count_does_not_change_results() {
    let cfg = small_config();
    let tmp = tempfile::tempdir().unwrap();
    let one = tmp.path().join("one");
    let eight = tmp.path().join("eight");
    with_threads(Some(1), || run_pipeline(&cfg, &one)).unwrap().unwrap();
    with_threads(Some(8), || run_pipeline(&cfg, &eight)).unwrap().unwrap();
    for (p, q) in csv_files(&one).iter().zip(csv_files(&eight).iter()) {
        assert_eq!(p.0, q.0);
        let parse = |s: &str| -> Vec<f64> {
            s.split([',', '\n', ';'])
                .filter_map(|t| t.parse::<f64>().ok())
                .collect()
        };
        let (x, y) = (parse(&p.1), parse(&q.1));
        assert_eq!(x.len(), y.len(), "{}", p.0);
        for (u, v) in x.iter().zip(&y) {
            assert!((u - v).abs() <= 1e-12 * (1.0 + u.abs()), "{}: {u} vs {v}", p.0);
        }
    }
}

#[test]
fn invalid_band_is_rejected_before_running() {
    let mut cfg = small_config();
    cfg.band = BandRule::Distance { delta: 0.6 };
    let tmp = tempfile::tempdir().unwrap();
    let err = run_pipeline(&cfg, tmp.path()).unwrap_err();
    assert!(err.is_validation());
    assert!(!tmp.path().join("data").exists());
}
