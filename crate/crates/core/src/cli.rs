//! The `mimu` command line: data generation, training and reporting.
//!
//! Exit codes: 0 success, 2 configuration or validation error, 3 I/O error,
//! 4 numerical failure (divergence).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::config::{Ablation, MimuConfig};
use crate::error::{MimuError, Result};
use crate::hashing::sha256_hex;
use crate::model::{
    forward_cached, load_checkpoint, save_checkpoint, FrozenParams, Readout, TransformerParams,
};
use crate::synthdata::{audit_cooccurrence, generate, load_bundle, save_bundle, DatasetBundle, InputShape};
use crate::training::{
    run_investigation, train_erm, train_source, train_target, RunReport, SplitMetrics,
};

pub const RUN_MANIFEST: &str = "manifest.json";
pub const REPORT_FILE: &str = "report.json";

#[derive(Debug, Parser)]
#[command(name = "mimu", version, about = "Shortcut-robust training with a calibrated source and an attention-aligned target")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Erm,
    Source,
    Target,
    MimuFull,
    Investigation,
}

impl Mode {
    fn name(self) -> &'static str {
        match self {
            Mode::Erm => "erm",
            Mode::Source => "source",
            Mode::Target => "target",
            Mode::MimuFull => "mimu-full",
            Mode::Investigation => "investigation",
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a dataset bundle and print the cue co-occurrence audit.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model (or run the five-variant investigation).
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Bundle directory; not needed for `investigation`.
        #[arg(long)]
        bundle: Option<PathBuf>,
        #[arg(long, value_enum)]
        mode: Mode,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Source checkpoint (`.json` file or a directory holding `source.json`).
        #[arg(long)]
        source_checkpoint: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        ablate: Vec<String>,
        /// Investigation only: train the variants of a seed concurrently.
        #[arg(long)]
        parallel: bool,
        /// Investigation only: seeds to average over.
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
        seeds: Vec<u64>,
    },
    /// Compare runs: accuracy/ECE table with deltas against the first run,
    /// reliability CSVs and attention heatmaps.
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Dev-split example indices to export attention heatmaps for.
        #[arg(long, value_delimiter = ',')]
        examples: Vec<usize>,
        /// Bundle for heatmaps; defaults to the one recorded by the first run.
        #[arg(long)]
        bundle: Option<PathBuf>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputArtifact {
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub config_path: Option<String>,
    pub config_hash: Option<String>,
    /// Effective config after flag overrides, as TOML.
    pub effective_config: Option<String>,
    pub inputs: BTreeMap<String, InputArtifact>,
    /// Output file (relative to the run directory) to sha256.
    pub outputs: BTreeMap<String, String>,
    pub seed: Option<u64>,
    pub tool_version: String,
    pub started_at_unix: u64,
    pub finished_at_unix: u64,
    pub wall_clock_secs: f64,
}

impl RunManifest {
    fn new(command: &str, cfg: Option<(&Path, &MimuConfig)>) -> Self {
        RunManifest {
            command: command.into(),
            args: std::env::args().collect(),
            config_path: cfg.map(|(p, _)| p.display().to_string()),
            config_hash: cfg.map(|(_, c)| c.hash()),
            effective_config: cfg.map(|(_, c)| c.to_toml_string()),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            seed: cfg.map(|(_, c)| c.seed),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            started_at_unix: unix_now(),
            finished_at_unix: 0,
            wall_clock_secs: 0.0,
        }
    }

    fn finish(&mut self, start: Instant) {
        self.finished_at_unix = unix_now();
        self.wall_clock_secs = start.elapsed().as_secs_f64();
    }
}

fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| MimuError::io(path, e))
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| MimuError::io(path, e))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| MimuError::io(dir, e))
}

/// Writes `name` into `dir` and records its hash in the manifest.
fn emit(dir: &Path, name: &str, bytes: impl AsRef<[u8]>, m: &mut RunManifest) -> Result<()> {
    let bytes = bytes.as_ref();
    write(&dir.join(name), bytes)?;
    m.outputs.insert(name.into(), sha256_hex(bytes));
    Ok(())
}

fn record_existing(dir: &Path, name: &str, m: &mut RunManifest) -> Result<()> {
    let bytes = read(&dir.join(name))?;
    m.outputs.insert(name.into(), sha256_hex(&bytes));
    Ok(())
}

fn save_manifest(dir: &Path, m: &RunManifest) -> Result<()> {
    write(
        &dir.join(RUN_MANIFEST),
        serde_json::to_string_pretty(m).expect("manifest serializes"),
    )
}

pub fn load_run_manifest(dir: &Path) -> Result<RunManifest> {
    let path = dir.join(RUN_MANIFEST);
    serde_json::from_slice(&read(&path)?).map_err(|e| MimuError::format(&path, e.to_string()))
}

/// Re-hashes every output listed in a run manifest.
pub fn verify_run_manifest(dir: &Path) -> Result<RunManifest> {
    let m = load_run_manifest(dir)?;
    for (name, hash) in &m.outputs {
        let path = dir.join(name);
        if sha256_hex(&read(&path)?) != *hash {
            return Err(MimuError::format(path, "hash does not match the run manifest"));
        }
    }
    Ok(m)
}

fn load_config(path: &Path, seed: Option<u64>, ablate: &[String]) -> Result<MimuConfig> {
    let mut cfg = MimuConfig::load(path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    for a in ablate {
        let a: Ablation = a.parse()?;
        if !cfg.train.ablate.contains(&a) {
            cfg.train.ablate.push(a);
        }
    }
    cfg.validate()?;
    Ok(cfg.effective())
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { config, out, seed } => cmd_gen_data(&config, &out, seed),
        Command::Train {
            config,
            bundle,
            mode,
            out,
            seed,
            source_checkpoint,
            ablate,
            parallel,
            seeds,
        } => cmd_train(&TrainArgs {
            config,
            bundle,
            mode,
            out,
            seed,
            source_checkpoint,
            ablate,
            parallel,
            seeds,
        }),
        Command::Report {
            runs,
            out,
            examples,
            bundle,
        } => cmd_report(&runs, &out, &examples, bundle.as_deref()),
    }
}

pub fn cmd_gen_data(config: &Path, out: &Path, seed: Option<u64>) -> Result<()> {
    let start = Instant::now();
    let cfg = load_config(config, seed, &[])?;
    let bundle = generate(&cfg.data, cfg.seed)?;
    let mut manifest = save_bundle(&bundle, out)?;

    println!("| shortcut | split | co-occurrence |");
    println!("|---|---|---|");
    let mut splits: Vec<(&str, &[crate::synthdata::Example])> = vec![("train", &bundle.train)];
    splits.extend(bundle.eval_splits());
    for s in &bundle.meta.shortcuts {
        for (name, split) in &splits {
            println!("| {} | {} | {:.4} |", s.label(), name, audit_cooccurrence(split, s)?);
        }
    }

    let mut run = RunManifest::new("gen-data", Some((config, &cfg)));
    for s in &manifest.splits {
        run.outputs.insert(s.file.clone(), s.sha256.clone());
        record_existing(out, &s.cues_file, &mut run)?;
    }
    run.finish(start);
    manifest.run = Some(serde_json::to_value(&run).expect("run manifest serializes"));
    write(
        &out.join("manifest.json"),
        serde_json::to_string_pretty(&manifest).expect("manifest serializes"),
    )?;
    println!("bundle {} written to {}", manifest.bundle_hash, out.display());
    Ok(())
}

pub struct TrainArgs {
    pub config: PathBuf,
    pub bundle: Option<PathBuf>,
    pub mode: Mode,
    pub out: PathBuf,
    pub seed: Option<u64>,
    pub source_checkpoint: Option<PathBuf>,
    pub ablate: Vec<String>,
    pub parallel: bool,
    pub seeds: Vec<u64>,
}

fn checkpoint_location(path: &Path) -> (PathBuf, String) {
    if path.extension().is_some_and(|e| e == "json") {
        let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let stem = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "source".into());
        (dir, stem)
    } else {
        (path.to_path_buf(), "source".into())
    }
}

fn save_model(
    dir: &Path,
    stem: &str,
    params: &TransformerParams<f32>,
    m: &mut RunManifest,
) -> Result<()> {
    save_checkpoint(params, dir, stem)?;
    record_existing(dir, &format!("{stem}.json"), m)?;
    record_existing(dir, &format!("{stem}.bin"), m)
}

fn emit_report(dir: &Path, prefix: &str, r: &RunReport, m: &mut RunManifest) -> Result<()> {
    emit(dir, &format!("{prefix}report.json"), r.to_json(), m)?;
    emit(dir, &format!("{prefix}curves.csv"), r.curves_csv(), m)
}

fn print_metrics(title: &str, metrics: &BTreeMap<String, SplitMetrics>) {
    println!("{title}");
    println!("| split | accuracy | ECE |");
    println!("|---|---|---|");
    for (split, m) in metrics {
        println!("| {split} | {:.4} | {:.4} |", m.accuracy, m.ece.ece);
    }
}

fn print_report(r: &RunReport) {
    print_metrics(&format!("{} (softmax)", r.mode), &r.final_metrics);
    if let Some(c) = &r.calibrated_metrics {
        print_metrics(&format!("{} (Platt-calibrated)", r.mode), c);
    }
}

pub fn cmd_train(a: &TrainArgs) -> Result<()> {
    let start = Instant::now();
    let cfg = load_config(&a.config, a.seed, &a.ablate)?;
    create_dir(&a.out)?;
    let mut m = RunManifest::new(&format!("train --mode {}", a.mode.name()), Some((&a.config, &cfg)));
    emit(&a.out, "config.toml", cfg.to_toml_string(), &mut m)?;

    if a.mode == Mode::Investigation {
        let seeds = match a.seed {
            Some(s) if a.seeds == [0, 1, 2, 3, 4] => vec![s],
            _ => a.seeds.clone(),
        };
        let report = run_investigation(&cfg, &seeds, a.parallel)?;
        emit(&a.out, "investigation.json", report.to_json(), &mut m)?;
        emit(&a.out, "investigation.md", report.markdown(), &mut m)?;
        println!("{}", report.markdown());
        m.finish(start);
        return save_manifest(&a.out, &m);
    }

    let bundle_dir = a
        .bundle
        .as_ref()
        .ok_or_else(|| MimuError::config("--bundle", "required for this mode"))?;
    let source_loc = match a.mode {
        Mode::Target => Some(checkpoint_location(a.source_checkpoint.as_ref().ok_or_else(|| {
            MimuError::config("--source-checkpoint", "mode `target` needs a frozen source checkpoint")
        })?)),
        _ => None,
    };
    let (bundle, bundle_manifest) = load_bundle(bundle_dir)?;
    check_bundle_matches(&bundle, &cfg)?;
    m.inputs.insert(
        "bundle".into(),
        InputArtifact {
            path: bundle_dir.display().to_string(),
            sha256: bundle_manifest.bundle_hash.clone(),
        },
    );

    let out = &a.out;
    let mut wall = 0.0;
    match a.mode {
        Mode::Erm => {
            let (params, report) = train_erm(&bundle, &cfg)?;
            wall += report.wall_clock_secs;
            save_model(out, "model", &params, &mut m)?;
            emit_report(out, "", &report, &mut m)?;
            print_report(&report);
        }
        Mode::Source => {
            let (params, report) = train_source(&bundle, &cfg)?;
            wall += report.wall_clock_secs;
            save_model(out, "source", params.params(), &mut m)?;
            emit_report(out, "", &report, &mut m)?;
            print_report(&report);
        }
        Mode::Target => {
            let (dir, stem) = source_loc.expect("checked above");
            let json = dir.join(format!("{stem}.json"));
            let source = FrozenParams::freeze(load_checkpoint::<f32>(&dir, &stem)?);
            m.inputs.insert(
                "source_checkpoint".into(),
                InputArtifact {
                    path: json.display().to_string(),
                    sha256: sha256_hex(&read(&json)?),
                },
            );
            let (params, platt, report) = train_target(&bundle, &cfg, &source)?;
            wall += report.wall_clock_secs;
            save_model(out, "target", &params, &mut m)?;
            emit(out, "platt.json", serde_json::to_string_pretty(&platt).expect("platt serializes"), &mut m)?;
            emit_report(out, "", &report, &mut m)?;
            print_report(&report);
        }
        Mode::MimuFull => {
            let (source, source_report) = train_source(&bundle, &cfg)?;
            save_model(out, "source", source.params(), &mut m)?;
            emit_report(out, "source_", &source_report, &mut m)?;
            let (params, platt, report) = train_target(&bundle, &cfg, &source)?;
            wall += source_report.wall_clock_secs + report.wall_clock_secs;
            save_model(out, "target", &params, &mut m)?;
            emit(out, "platt.json", serde_json::to_string_pretty(&platt).expect("platt serializes"), &mut m)?;
            emit_report(out, "", &report, &mut m)?;
            print_report(&source_report);
            print_report(&report);
        }
        Mode::Investigation => unreachable!("handled above"),
    }
    log::info!("training took {wall:.1}s");
    m.finish(start);
    save_manifest(out, &m)
}

fn check_bundle_matches(bundle: &DatasetBundle, cfg: &MimuConfig) -> Result<()> {
    if bundle.meta.input != cfg.data.input_shape() || bundle.meta.num_classes != cfg.data.num_classes {
        return Err(MimuError::config(
            "data",
            "bundle input shape or class count differs from the config",
        ));
    }
    Ok(())
}

struct LoadedRun {
    name: String,
    dir: PathBuf,
    report: RunReport,
}

fn load_run(dir: &Path) -> Result<LoadedRun> {
    let path = dir.join(REPORT_FILE);
    let bytes = read(&path)?;
    let report: RunReport = serde_json::from_slice(&bytes)
        .map_err(|e| MimuError::config(path.display().to_string(), format!("not a run report: {e}")))?;
    let name = dir
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string());
    Ok(LoadedRun {
        name,
        dir: dir.to_path_buf(),
        report,
    })
}

fn deployed(r: &RunReport) -> &BTreeMap<String, SplitMetrics> {
    r.calibrated_metrics.as_ref().unwrap_or(&r.final_metrics)
}

/// Markdown and CSV comparison tables. Delta columns appear from the second
/// run on and are relative to the first.
pub fn comparison_tables(runs: &[(String, RunReport)]) -> (String, String) {
    let splits: Vec<String> = deployed(&runs[0].1).keys().cloned().collect();
    let with_delta = runs.len() > 1;
    let mut cols = vec!["run".to_string(), "mode".to_string()];
    for s in &splits {
        cols.push(format!("{s} acc"));
        if with_delta {
            cols.push(format!("{s} Δacc"));
        }
        cols.push(format!("{s} ECE"));
        if with_delta {
            cols.push(format!("{s} ΔECE"));
        }
    }
    let mut md = format!("| {} |\n|{}\n", cols.join(" | "), "---|".repeat(cols.len()));
    let mut csv = cols
        .iter()
        .map(|c| c.replace(' ', "_").replace('Δ', "delta_"))
        .collect::<Vec<_>>()
        .join(",");
    csv.push('\n');
    let base = deployed(&runs[0].1);
    for (name, r) in runs {
        let metrics = deployed(r);
        let mut cells = vec![name.clone(), r.mode.clone()];
        for s in &splits {
            let (acc, e) = metrics
                .get(s)
                .map(|m| (m.accuracy, m.ece.ece))
                .unwrap_or((f64::NAN, f64::NAN));
            let (bacc, be) = base
                .get(s)
                .map(|m| (m.accuracy, m.ece.ece))
                .unwrap_or((f64::NAN, f64::NAN));
            cells.push(format!("{acc:.4}"));
            if with_delta {
                cells.push(format!("{:+.4}", acc - bacc));
            }
            cells.push(format!("{e:.4}"));
            if with_delta {
                cells.push(format!("{:+.4}", e - be));
            }
        }
        let _ = writeln!(md, "| {} |", cells.join(" | "));
        csv.push_str(&cells.join(","));
        csv.push('\n');
    }
    (md, csv)
}

fn model_in_run(dir: &Path) -> Option<&'static str> {
    ["target", "model", "source"]
        .into_iter()
        .find(|stem| dir.join(format!("{stem}.json")).exists())
}

/// Patch-grid (images) or single-row (text) layout of a length-`l` vector.
fn attention_grid(v: &[f64], shape: &InputShape, readout: Readout) -> Vec<Vec<f64>> {
    match (*shape, readout) {
        (InputShape::Image { height, width, patch, .. }, Readout::ClassToken) => {
            let cols = width / patch;
            let rows = height / patch;
            (0..rows).map(|r| v[1 + r * cols..1 + (r + 1) * cols].to_vec()).collect()
        }
        _ => vec![v.to_vec()],
    }
}

/// Binary PGM, each cell drawn as a `scale x scale` block, max value white.
pub fn grayscale_pgm(grid: &[Vec<f64>], scale: usize) -> Vec<u8> {
    let rows = grid.len();
    let cols = grid.first().map_or(0, Vec::len);
    let max = grid.iter().flatten().cloned().fold(0.0f64, f64::max);
    let mut out = format!("P5\n{} {}\n255\n", cols * scale, rows * scale).into_bytes();
    for row in grid {
        for _ in 0..scale {
            for &v in row {
                let px = if max > 0.0 { (v / max * 255.0).round() as u8 } else { 0 };
                out.extend(std::iter::repeat(px).take(scale));
            }
        }
    }
    out
}

fn grid_csv(grid: &[Vec<f64>]) -> String {
    grid.iter()
        .map(|r| r.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(","))
        .collect::<Vec<_>>()
        .join("\n")
        + "\n"
}

pub fn cmd_report(run_dirs: &[PathBuf], out: &Path, examples: &[usize], bundle: Option<&Path>) -> Result<()> {
    let start = Instant::now();
    let runs: Vec<LoadedRun> = run_dirs.iter().map(|d| load_run(d)).collect::<Result<_>>()?;
    let first_hash = &runs[0].report.dataset_hash;
    if let Some(bad) = runs.iter().find(|r| &r.report.dataset_hash != first_hash) {
        return Err(MimuError::config(
            "runs",
            format!(
                "run `{}` was trained on dataset {}, not {} like `{}`",
                bad.name, bad.report.dataset_hash, first_hash, runs[0].name
            ),
        ));
    }
    create_dir(out)?;
    let mut m = RunManifest::new("report", None);
    for r in &runs {
        m.inputs.insert(
            format!("run:{}", r.name),
            InputArtifact {
                path: r.dir.display().to_string(),
                sha256: sha256_hex(&read(&r.dir.join(REPORT_FILE))?),
            },
        );
    }

    let named: Vec<(String, RunReport)> = runs.iter().map(|r| (r.name.clone(), r.report.clone())).collect();
    let (md, csv) = comparison_tables(&named);
    emit(out, "comparison.md", &md, &mut m)?;
    emit(out, "comparison.csv", &csv, &mut m)?;
    print!("{md}");

    for r in &runs {
        for (split, metrics) in deployed(&r.report) {
            emit(
                out,
                &format!("reliability_{}_{split}.csv", r.name),
                metrics.ece.reliability_csv(),
                &mut m,
            )?;
        }
    }

    if !examples.is_empty() {
        let bundle_dir = match bundle {
            Some(b) => b.to_path_buf(),
            None => {
                let man = load_run_manifest(&runs[0].dir)?;
                PathBuf::from(
                    man.inputs
                        .get("bundle")
                        .ok_or_else(|| MimuError::config("--bundle", "no bundle recorded for the first run"))?
                        .path
                        .clone(),
                )
            }
        };
        let (data, _) = load_bundle(&bundle_dir)?;
        if crate::synthdata::bundle_hash(&data)? != *first_hash {
            return Err(MimuError::config("--bundle", "bundle differs from the one the runs used"));
        }
        for r in &runs {
            let Some(stem) = model_in_run(&r.dir) else {
                log::warn!("run `{}` has no checkpoint; skipping heatmaps", r.name);
                continue;
            };
            let params = load_checkpoint::<f32>(&r.dir, stem)?;
            let (nh, l) = (params.config.num_heads, params.config.seq_len);
            for &i in examples {
                let ex = data.dev_iid.get(i).ok_or_else(|| {
                    MimuError::config("--examples", format!("dev has only {} examples", data.dev_iid.len()))
                })?;
                let cache = forward_cached(&params, &ex.features)?;
                let stack = cache.attention(nh, l);
                for (tag, vec) in [("target", stack.target_vector()), ("last", stack.source_vector())] {
                    let v: Vec<f64> = vec.0.iter().map(|&x| x as f64).collect();
                    let grid = attention_grid(&v, &data.meta.input, params.config.readout);
                    let base = format!("attention_{}_{tag}_dev{i}", r.name);
                    emit(out, &format!("{base}.csv"), grid_csv(&grid), &mut m)?;
                    emit(out, &format!("{base}.pgm"), grayscale_pgm(&grid, 16), &mut m)?;
                }
            }
        }
    }
    m.finish(start);
    save_manifest(out, &m)
}
