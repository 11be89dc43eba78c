//! End-to-end exercises of the pipeline stages and the `sona` binary on a
//! deliberately tiny configuration: every stage in seconds, real artifacts
//! on disk, real lineage checks.

use std::path::Path;
use std::process::Command;
use std::sync::OnceLock;

use sona_cli::config::PipelineConfig;
use sona_cli::pipeline::{Pipeline, SweepKind};
use sona_core::data::{Archive, BenchmarkSplits};
use sona_core::detector::LossTier;
use sona_core::guidance::{GuidanceKind, OutlierSet, TildeTPolicy};
use tempfile::TempDir;

/// Small enough that every stage runs in seconds.
fn tiny_config() -> PipelineConfig {
    let mut cfg = PipelineConfig::default();
    cfg.seed = 11;
    cfg.data.side = 16;
    cfg.data.id_train = 32;
    cfg.data.id_test = 16;
    cfg.data.near_ood_test = 16;
    cfg.data.far_ood_test = 16;
    cfg.data.prompt_train = 16;
    cfg.diffusion.t_max = 10;
    cfg.diffusion.base_channels = 4;
    cfg.diffusion.levels = 1;
    cfg.diffusion.cond_dim = 8;
    cfg.diffusion.groups = 2;
    cfg.diffusion.steps = 40;
    cfg.diffusion.batch_size = 8;
    cfg.outliers.count = 8;
    cfg.detector.epochs = 1;
    cfg.detector.batch_size = 16;
    cfg.eval.probe_epochs = 1;
    cfg
}

/// Dataset + diffusion checkpoint built once, then copied into each
/// test's own working directory.
fn upstream() -> &'static Path {
    static DIR: OnceLock<TempDir> = OnceLock::new();
    DIR.get_or_init(|| {
        let dir = TempDir::new().unwrap();
        let p = Pipeline::new(tiny_config(), dir.path()).unwrap();
        p.gen_data().unwrap();
        p.train_diffusion().unwrap();
        dir
    })
    .path()
}

fn workdir_with_upstream() -> TempDir {
    let dir = TempDir::new().unwrap();
    for name in ["data.sona", "diffusion.sona"] {
        std::fs::copy(upstream().join(name), dir.path().join(name)).unwrap();
    }
    dir
}

#[test]
fn zero_step_noising_reproduces_the_sources() {
    let dir = workdir_with_upstream();
    let p = Pipeline::new(tiny_config(), dir.path()).unwrap();
    let path = p
        .gen_outliers(GuidanceKind::Sona, Some(TildeTPolicy::Fixed(0)), 0)
        .unwrap();

    let set = OutlierSet::from_archive(&Archive::load(&path).unwrap()).unwrap();
    let data = Archive::load(&dir.path().join("data.sona")).unwrap();
    let splits = BenchmarkSplits::from_archive(&data).unwrap();
    assert_eq!(set.len(), 8);
    for i in 0..set.len() {
        let src = &splits.id_train[set.source_indices[i]].pixels;
        assert_eq!(
            set.image(i).data(),
            src.data(),
            "unnoised outlier {i} must equal its source bit for bit"
        );
    }
}

#[test]
fn missing_artifacts_name_the_producing_command() {
    let dir = TempDir::new().unwrap();
    let p = Pipeline::new(tiny_config(), dir.path()).unwrap();
    let err = p.train_diffusion().unwrap_err().to_string();
    assert!(err.contains("gen-data"), "unhelpful error: {err}");

    let dir = workdir_with_upstream();
    let p = Pipeline::new(tiny_config(), dir.path()).unwrap();
    let err = p
        .train_detector(LossTier::Full, GuidanceKind::Sona, 0)
        .unwrap_err()
        .to_string();
    assert!(err.contains("gen-outliers"), "unhelpful error: {err}");
}

#[test]
fn eval_refuses_stale_artifacts_unless_forced() {
    let dir = workdir_with_upstream();
    let p = Pipeline::new(tiny_config(), dir.path()).unwrap();
    p.gen_outliers(GuidanceKind::Sona, None, 0).unwrap();
    p.train_detector(LossTier::Full, GuidanceKind::Sona, 0)
        .unwrap();
    let (report, files) = p.eval(LossTier::Full, GuidanceKind::Sona, 0, false).unwrap();

    assert!(files.report_csv.exists() && files.scores_csv.exists());
    assert!(report.find("id_accuracy", "id_test").is_some());
    assert!(report.find("auroc", "near_ood_test").is_some());
    assert!(report.find("auroc", "far_ood_test").is_some());
    assert!(report.find("nuisance_retention", "sona").is_some());
    assert!(report.find("semantic_shift", "sona").is_some());

    // A seed change invalidates every stamped artifact…
    let mut other = tiny_config();
    other.seed = 12;
    let stale = Pipeline::new(other, dir.path()).unwrap();
    let err = stale
        .eval(LossTier::Full, GuidanceKind::Sona, 0, false)
        .unwrap_err()
        .to_string();
    assert!(err.contains("different configuration"), "{err}");
    assert!(err.contains("--force"), "{err}");

    // …but --force accepts them as-is.
    stale
        .eval(LossTier::Full, GuidanceKind::Sona, 0, true)
        .unwrap();
}

#[test]
fn sweep_reuses_upstream_and_consolidates_reports() {
    let dir = workdir_with_upstream();
    let p = Pipeline::new(tiny_config(), dir.path()).unwrap();
    let csv = p
        .ablate(SweepKind::S, &["5".into(), "10".into()])
        .unwrap();

    let text = std::fs::read_to_string(&csv).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next(),
        Some("sweep,param,section,metric,split,value,seed,config_hash")
    );
    let rows: Vec<&str> = lines.collect();
    let auroc_of = |value: &str| -> Vec<&str> {
        rows.iter()
            .copied()
            .filter(|r| r.starts_with(&format!("s,{value},ood,auroc,near_ood_test,")))
            .collect()
    };
    assert_eq!(auroc_of("5").len(), 1);
    assert_eq!(auroc_of("10").len(), 1);

    // Variants differ in config hash but wrote complete per-variant reports.
    let hash = |row: &str| row.rsplit(',').next().unwrap().to_string();
    assert_ne!(hash(auroc_of("5")[0]), hash(auroc_of("10")[0]));
    for v in ["5", "10"] {
        let report = dir
            .path()
            .join("sweep_s")
            .join(v)
            .join("eval_full_sona/report.csv");
        assert!(report.exists(), "missing {}", report.display());
    }

    // A bad value is rejected before any variant runs.
    let err = p
        .ablate(SweepKind::Lambda, &["0.9".into()])
        .unwrap_err()
        .to_string();
    assert!(err.contains("mask fraction"), "{err}");
}

fn sona_bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_sona"))
}

#[test]
fn binary_runs_stages_and_reports_errors_actionably() {
    let dir = TempDir::new().unwrap();
    let cfg_path = dir.path().join("run.toml");
    std::fs::write(&cfg_path, tiny_config().to_canonical_toml()).unwrap();
    let base = |cmd: &str| {
        let mut c = sona_bin();
        c.arg(cmd)
            .arg("--workdir")
            .arg(dir.path())
            .arg("--config")
            .arg(&cfg_path);
        c
    };

    // Missing upstream artifact → failure that names the fix.
    let out = base("train-diffusion").output().unwrap();
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("gen-data"), "{stderr}");

    // gen-data succeeds and is logged in the manifest.
    let out = base("gen-data").output().unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(dir.path().join("data.sona").exists());
    let manifest = std::fs::read_to_string(dir.path().join("manifest.log")).unwrap();
    assert!(manifest.contains("gen-data"), "{manifest}");

    // Unknown configuration keys are rejected by name.
    let bad_path = dir.path().join("bad.toml");
    std::fs::write(&bad_path, "[diffusion]\nt_mox = 50\n").unwrap();
    let out = sona_bin()
        .arg("gen-data")
        .arg("--workdir")
        .arg(dir.path())
        .arg("--config")
        .arg(&bad_path)
        .output()
        .unwrap();
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("t_mox"), "{stderr}");

    // The printed default configuration round-trips.
    let out = sona_bin().arg("default-config").output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let parsed = PipelineConfig::from_toml(&text).unwrap();
    assert_eq!(parsed, PipelineConfig::default());
}
