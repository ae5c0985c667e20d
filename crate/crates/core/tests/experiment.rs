use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use fanosense::experiment::*;
use fanosense::inference::{fit_frequency_vs_voltage, VoltageSweepPoint};

fn reference_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/reference.toml")
}

fn reference() -> ExperimentConfig {
    ExperimentConfig::load(&reference_path()).unwrap()
}

fn files_under(root: &Path) -> BTreeSet<String> {
    let mut out = BTreeSet::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(path.strip_prefix(root).unwrap().to_string_lossy().replace('\\', "/"));
            }
        }
    }
    out
}

#[test]
fn reference_config_has_the_frozen_manifest_hash() {
    let manifest = ExperimentManifest::from_config(reference()).unwrap();
    assert_eq!(manifest.voltage_schedule.len(), 11);
    assert_eq!(manifest.content_hash(), "6996bd4a6d5d45012010f442b6945c3c4878c158d9eeb1f672d1ed257cd45440");
}

#[test]
fn reference_sweep_outputs_match_the_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = ExperimentManifest::from_config(reference()).unwrap();
    let report = run_sweep(&manifest, tmp.path()).unwrap();
    assert_eq!(report.status, SweepStatus::Complete);
    assert_eq!(report.n_failed, 0);
    let dir = tmp.path().join("reference");
    let listed: BTreeSet<String> = manifest.outputs.iter().cloned().collect();
    assert_eq!(files_under(&dir), listed);
    let inference = report.inference.expect("11 voltages give an inference");
    assert!(inference.charge > 0.0);
    assert_eq!(report.manifest_sha256, manifest.content_hash());
    // The manifest written to disk reloads to the same hash.
    let written: ExperimentManifest = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(written.content_hash(), manifest.content_hash());
}

#[test]
fn identical_manifests_give_identical_bytes() {
    let manifest = ExperimentManifest::from_config(reference()).unwrap();
    let runs: Vec<_> = (0..2).map(|_| tempfile::tempdir().unwrap()).collect();
    for r in &runs {
        run_sweep(&manifest, r.path()).unwrap();
    }
    let (da, db) = (runs[0].path().join("reference"), runs[1].path().join("reference"));
    let files = files_under(&da);
    assert_eq!(files, files_under(&db));
    for f in &files {
        assert_eq!(fs::read(da.join(f)).unwrap(), fs::read(db.join(f)).unwrap(), "{f} differs");
    }

    // The worker count changes the manifest but none of the data.
    let mut cfg = reference();
    cfg.workers = 1;
    let serial = tempfile::tempdir().unwrap();
    run_sweep(&ExperimentManifest::from_config(cfg).unwrap(), serial.path()).unwrap();
    let dc = serial.path().join("reference");
    for f in files.iter().filter(|f| *f != "manifest.json" && *f != "report.json") {
        assert_eq!(fs::read(da.join(f)).unwrap(), fs::read(dc.join(f)).unwrap(), "{f} differs");
    }
}

#[test]
fn rerunning_into_an_existing_directory_is_refused() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = reference();
    cfg.sweep.voltages = vec![0.0];
    let manifest = ExperimentManifest::from_config(cfg).unwrap();
    run_sweep(&manifest, tmp.path()).unwrap();
    let err = run_sweep(&manifest, tmp.path()).unwrap_err();
    assert!(matches!(err, ExperimentError::AlreadyExists(_)));
    assert_eq!(err.exit_code(), 2);
}

fn infer(voltage_sign: f64, charge_sign: i64) -> fanosense::inference::InferenceResult {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = reference();
    cfg.sweep.voltages = cfg.sweep.voltages.iter().map(|v| voltage_sign * v).collect();
    cfg.particle.charge_elementary *= charge_sign;
    run_sweep(&ExperimentManifest::from_config(cfg).unwrap(), tmp.path()).unwrap().inference.unwrap()
}

#[test]
fn needle_polarity_does_not_change_the_inferred_charge() {
    let pos = infer(1.0, 1);
    let neg = infer(-1.0, 1);
    assert!(neg.charge > 0.0);
    let se = pos.charge_error.hypot(neg.charge_error);
    assert!((pos.charge - neg.charge).abs() < 3.0 * se, "{} vs {} (se {se})", pos.charge, neg.charge);
}

#[test]
fn particle_charge_sign_is_recovered() {
    let pos = infer(1.0, 1);
    let neg = infer(1.0, -1);
    assert!(pos.charge > 0.0 && neg.charge < 0.0);
    let se = pos.charge_error.hypot(neg.charge_error);
    assert!((pos.charge + neg.charge).abs() < 3.0 * se);
}

#[test]
fn relabelling_the_sweep_with_negated_voltages_flips_the_charge() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = reference();
    let report = run_sweep(&ExperimentManifest::from_config(cfg.clone()).unwrap(), tmp.path()).unwrap();
    let points = read_points_csv(&tmp.path().join("reference/points.csv")).unwrap();
    let flipped: Vec<VoltageSweepPoint> = points.iter().map(|p| VoltageSweepPoint { voltage: -p.voltage, ..*p }).collect();
    let a = fit_frequency_vs_voltage(&points, &cfg.trap_config(), &cfg.needle_at(1.0)).unwrap();
    let b = fit_frequency_vs_voltage(&flipped, &cfg.trap_config(), &cfg.needle_at(1.0)).unwrap();
    assert_eq!(a.charge, report.inference.unwrap().charge);
    assert!((a.charge + b.charge).abs() <= 1e-12 * a.charge.abs());
    assert!((a.mass / b.mass - 1.0).abs() <= 1e-12);
}

#[test]
fn zero_only_schedule_is_a_baseline_run() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = reference();
    cfg.sweep.voltages = vec![0.0];
    let report = run_sweep(&ExperimentManifest::from_config(cfg).unwrap(), tmp.path()).unwrap();
    assert_eq!(report.n_points, 1);
    assert!(report.inference.is_none());
    assert!(report.inference_note.is_some());
    assert_eq!(report.status, SweepStatus::Complete);
    let fit: serde_json::Value = serde_json::from_str(&fs::read_to_string(tmp.path().join("reference").join(&report.points[0].fit)).unwrap()).unwrap();
    assert_eq!(fit["model"], "lorentzian");
}

#[test]
fn empty_schedule_is_rejected_before_any_work() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = reference();
    cfg.sweep.voltages.clear();
    let err = ExperimentManifest::from_config(cfg).unwrap_err();
    assert!(matches!(&err, ConfigError::Validation { field, .. } if field.contains("voltages")), "{err}");
    assert!(fs::read_dir(tmp.path()).unwrap().next().is_none());
}

#[test]
fn sim_mode_sweep_fits_lorentzians() {
    let tmp = tempfile::tempdir().unwrap();
    let text = r#"
experiment_id = "sim"
mode = "sim"
[simulation]
duration = 0.3
[spectral]
segment_length = 4096
[sweep]
voltages = [0.0, 3000.0, 10000.0]
seed = 5
"#;
    let cfg = ExperimentConfig::from_toml(text).unwrap();
    let report = run_sweep(&ExperimentManifest::from_config(cfg).unwrap(), tmp.path()).unwrap();
    assert_eq!(report.n_failed, 0);
    for p in &report.points {
        let fit: serde_json::Value = serde_json::from_str(&fs::read_to_string(tmp.path().join("sim").join(&p.fit)).unwrap()).unwrap();
        assert_eq!(fit["model"], "lorentzian");
    }
}

#[test]
fn documented_defaults_match_the_code() {
    let doc = fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("../../docs/config.md")).unwrap();
    let start = doc.find("```toml\n").expect("defaults block") + "```toml\n".len();
    let end = start + doc[start..].find("```").unwrap();
    // The documented empty schedule does not validate on its own.
    let block = doc[start..end].replace("voltages = []", "voltages = [0.0]");
    let parsed = ExperimentConfig::from_toml(&block).unwrap();
    let mut expected = ExperimentConfig::default();
    expected.sweep.voltages = vec![0.0];
    assert_eq!(parsed, expected);
}
