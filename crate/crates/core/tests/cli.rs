//! The `mimu` binary end to end on tiny configs.

mod common;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mimu_core::cli::{load_run_manifest, verify_run_manifest};
use mimu_core::config::MimuConfig;
use mimu_core::synthdata::{load_manifest, DatasetConfig};
use mimu_core::training::RunReport;
use tempfile::TempDir;

use common::tiny_model;

fn mimu(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mimu"))
        .args(args)
        .env("MIMU_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = mimu(args);
    assert!(
        out.status.success(),
        "mimu {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Default two-shortcut images at full resolution, few examples, a small
/// model and one epoch.
fn tiny_toml(seed: u64) -> String {
    let mut cfg = MimuConfig {
        seed,
        data: DatasetConfig {
            train_size: 32,
            dev_size: 16,
            ood_size: 16,
            ..DatasetConfig::default()
        },
        model: tiny_model(),
        ..MimuConfig::default()
    };
    cfg.train.epochs = 1;
    cfg.train.batch_size = 16;
    cfg.to_toml_string()
}

struct Workspace {
    dir: TempDir,
}

impl Workspace {
    fn new() -> Self {
        let ws = Workspace {
            dir: tempfile::tempdir().unwrap(),
        };
        fs::write(ws.path("cfg.toml"), tiny_toml(1)).unwrap();
        ws
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn gen(&self, name: &str, extra: &[&str]) -> PathBuf {
        let out = self.path(name);
        let cfg = self.path("cfg.toml");
        let mut args = vec!["gen-data", "--config", p(&cfg), "--out", p(&out)];
        args.extend_from_slice(extra);
        ok(&args);
        out
    }

    fn train(&self, mode: &str, bundle: &Path, out: &str, extra: &[&str]) -> (PathBuf, Output) {
        let out_dir = self.path(out);
        let cfg = self.path("cfg.toml");
        let mut args = vec![
            "train",
            "--config",
            p(&cfg),
            "--bundle",
            p(bundle),
            "--mode",
            mode,
            "--out",
            p(&out_dir),
        ];
        args.extend_from_slice(extra);
        let output = ok(&args);
        (out_dir, output)
    }
}

fn report(dir: &Path) -> RunReport {
    serde_json::from_slice(&fs::read(dir.join("report.json")).unwrap()).unwrap()
}

#[test]
fn gen_data_prints_an_audit_row_per_shortcut_and_split() {
    let ws = Workspace::new();
    let out = ws.path("bundle");
    let o = ok(&["gen-data", "--config", p(&ws.path("cfg.toml")), "--out", p(&out)]);
    let stdout = String::from_utf8(o.stdout).unwrap();
    // 2 shortcuts x (train, dev, rand_b, rand_bw, rand_w)
    let rows = stdout.lines().filter(|l| l.starts_with("| background") || l.starts_with("| watermark")).count();
    assert_eq!(rows, 10, "{stdout}");
    let manifest = load_manifest(&out).unwrap();
    assert!(manifest.run.is_some());
}

#[test]
fn gen_data_is_reproducible() {
    let ws = Workspace::new();
    let a = ws.gen("a", &[]);
    let b = ws.gen("b", &[]);
    let c = ws.gen("c", &["--seed", "9"]);
    let (ma, mb, mc) = (load_manifest(&a).unwrap(), load_manifest(&b).unwrap(), load_manifest(&c).unwrap());
    assert_eq!(ma.bundle_hash, mb.bundle_hash);
    assert_ne!(ma.bundle_hash, mc.bundle_hash);
    for s in &ma.splits {
        assert_eq!(fs::read(a.join(&s.file)).unwrap(), fs::read(b.join(&s.file)).unwrap());
    }
}

#[test]
fn invalid_correlation_exits_with_config_error() {
    let ws = Workspace::new();
    let bad = tiny_toml(1).replacen("correlation = 0.95", "correlation = 1.3", 1);
    assert!(bad.contains("1.3"));
    fs::write(ws.path("bad.toml"), bad).unwrap();
    let o = mimu(&["gen-data", "--config", p(&ws.path("bad.toml")), "--out", p(&ws.path("x"))]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("correlation"), "{err}");
}

#[test]
fn unknown_keys_and_missing_files_have_distinct_exit_codes() {
    let ws = Workspace::new();
    fs::write(ws.path("typo.toml"), "[train]\nepochz = 3\n").unwrap();
    let o = mimu(&["gen-data", "--config", p(&ws.path("typo.toml")), "--out", p(&ws.path("x"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("epochz"));

    let o = mimu(&["gen-data", "--config", p(&ws.path("absent.toml")), "--out", p(&ws.path("x"))]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn target_mode_requires_a_source_checkpoint() {
    let ws = Workspace::new();
    let bundle = ws.gen("bundle", &[]);
    let o = mimu(&[
        "train", "--config", p(&ws.path("cfg.toml")), "--bundle", p(&bundle), "--mode", "target", "--out",
        p(&ws.path("t")),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("source-checkpoint"));
}

#[test]
fn mimu_full_writes_the_complete_run() {
    let ws = Workspace::new();
    let bundle = ws.gen("bundle", &[]);
    let (dir, _) = ws.train("mimu-full", &bundle, "run", &[]);
    for f in [
        "config.toml", "source.json", "source.bin", "target.json", "target.bin", "platt.json", "report.json",
        "curves.csv", "source_report.json", "source_curves.csv", "manifest.json",
    ] {
        assert!(dir.join(f).exists(), "missing {f}");
    }
    let r = report(&dir);
    let cal = r.calibrated_metrics.as_ref().unwrap();
    for split in ["dev", "rand_b", "rand_w", "rand_bw"] {
        assert!(cal.contains_key(split) && r.final_metrics.contains_key(split));
    }
    let m = verify_run_manifest(&dir).unwrap();
    assert_eq!(m.inputs["bundle"].sha256, load_manifest(&bundle).unwrap().bundle_hash);
    assert_eq!(m.seed, Some(1));
    assert!(m.effective_config.unwrap().contains("mask_fraction = 0.1"));

    // the frozen source can seed a separate target run with identical output
    let (t, _) = ws.train("target", &bundle, "t", &["--source-checkpoint", p(&dir.join("source.json"))]);
    assert_eq!(fs::read(t.join("target.bin")).unwrap(), fs::read(dir.join("target.bin")).unwrap());
    assert_eq!(fs::read(t.join("report.json")).unwrap(), fs::read(dir.join("report.json")).unwrap());
}

#[test]
fn training_is_idempotent_into_fresh_directories() {
    let ws = Workspace::new();
    let bundle = ws.gen("bundle", &[]);
    let (a, _) = ws.train("erm", &bundle, "a", &[]);
    let (b, _) = ws.train("erm", &bundle, "b", &[]);
    let (ma, mb) = (load_run_manifest(&a).unwrap(), load_run_manifest(&b).unwrap());
    assert_eq!(ma.outputs, mb.outputs);
    assert!(ma.outputs.contains_key("model.bin") && ma.outputs.contains_key("report.json"));
}

#[test]
fn ablation_flag_is_recorded() {
    let ws = Workspace::new();
    let bundle = ws.gen("bundle", &[]);
    let (dir, _) = ws.train("mimu-full", &bundle, "run", &["--ablate", "s-i"]);
    let s = report(&dir).settings;
    assert_eq!(s.lambda_2, 0.0);
    assert_eq!(s.mask_fraction, 0.0);
    let (dir, _) = ws.train("source", &bundle, "src", &["--ablate", "s-c"]);
    assert_eq!(report(&dir).settings.lambda_c, 0.0);

    let o = mimu(&[
        "train", "--config", p(&ws.path("cfg.toml")), "--bundle", p(&bundle), "--mode", "erm", "--out",
        p(&ws.path("x")), "--ablate", "s-x",
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn report_adds_delta_columns_only_for_comparisons() {
    let ws = Workspace::new();
    let bundle = ws.gen("bundle", &[]);
    let (erm, _) = ws.train("erm", &bundle, "erm", &[]);
    let (full, _) = ws.train("mimu-full", &bundle, "full", &[]);

    let single = ws.path("single");
    ok(&["report", p(&erm), "--out", p(&single)]);
    let md = fs::read_to_string(single.join("comparison.md")).unwrap();
    assert!(!md.contains('Δ'), "{md}");

    let pair = ws.path("pair");
    ok(&["report", p(&erm), p(&full), "--out", p(&pair), "--examples", "0,1"]);
    let md = fs::read_to_string(pair.join("comparison.md")).unwrap();
    for split in ["dev", "rand_b", "rand_w", "rand_bw"] {
        assert!(md.contains(&format!("{split} Δacc")), "{md}");
    }
    assert!(pair.join("comparison.csv").exists());
    assert!(pair.join("reliability_full_dev.csv").exists());
    let heatmaps = fs::read_dir(&pair)
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.path().extension().is_some_and(|x| x == "pgm"))
        .count();
    assert!(heatmaps > 0);
    verify_run_manifest(&pair).unwrap();
}

#[test]
fn report_refuses_runs_on_different_bundles() {
    let ws = Workspace::new();
    let a = ws.gen("a", &[]);
    let b = ws.gen("b", &["--seed", "5"]);
    let (ra, _) = ws.train("erm", &a, "ra", &[]);
    let (rb, _) = ws.train("erm", &b, "rb", &[]);
    let o = mimu(&["report", p(&ra), p(&rb), "--out", p(&ws.path("r"))]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn investigation_mode_reports_five_variants() {
    let ws = Workspace::new();
    let out = ws.path("inv");
    ok(&[
        "train", "--config", p(&ws.path("cfg.toml")), "--mode", "investigation", "--out", p(&out), "--seeds", "0",
        "--parallel",
    ]);
    let v: serde_json::Value = serde_json::from_slice(&fs::read(out.join("investigation.json")).unwrap()).unwrap();
    assert_eq!(v["variants"].as_array().unwrap().len(), 5);
    assert!(v["assumption_1"].is_boolean() && v["assumption_2"].is_boolean());
    verify_run_manifest(&out).unwrap();
}

#[test]
fn shipped_configs_load() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for name in ["default.toml", "tiny.toml", "text.toml"] {
        MimuConfig::load(&dir.join(name)).unwrap_or_else(|e| panic!("{name}: {e}"));
    }
    let default = MimuConfig::load(&dir.join("default.toml")).unwrap();
    assert_eq!(default, MimuConfig::default());
}
