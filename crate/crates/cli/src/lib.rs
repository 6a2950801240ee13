//! Command implementations behind the `geoprobe` binary.
//!
//! Output layout under `output_dir`:
//!
//! ```text
//! dataset/manifest.json      config hash, counts, per-set seeds and files
//! dataset/timing.csv         wall-clock seconds per set (kept out of the manifest)
//! dataset/*.gpss             one slice set per (f, d, i, rep)
//! labels.json                capped label table with its source hash
//! reports/<protocol>/<mode>/ report.json, summary/quadrants/records CSV, 4 SVGs
//! checkpoints/<protocol>/    one .gpck per fold
//! sweep/                     sweep.json, sweep.csv, budget_*.svg
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use geoprobe::config::{LabelsSource, ProbingConfig, RunConfig};
use geoprobe::dataset::{generate_one, SuiteSpec};
use geoprobe::evaluation::{budget_sweep, fold_seed, run_protocol_with, Report, SweepCell};
use geoprobe::io::{self, Checkpoint, ModelManifest, RngState};
use geoprobe::labels::{aggregate_runs, LabelTable};
use geoprobe::plot::{self, BudgetMetric};
use geoprobe::probing::{DatapointId, SliceSet};
use geoprobe::seed::stream;
use geoprobe::synthetic::{synthetic_ert, SyntheticSpec};
use geoprobe::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const LABELS_FILE: &str = "labels.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: DatapointId,
    pub file: String,
    pub seed: u64,
    pub evaluations: u64,
}

/// Everything needed to check that a dataset matches a config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub dataset_hash: String,
    pub suite: SuiteSpec,
    pub probing: ProbingConfig,
    pub count: usize,
    pub total_evaluations: u64,
    pub entries: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelsFile {
    pub labels_hash: String,
    pub source: String,
    pub warnings: Vec<String>,
    pub table: LabelTable,
}

pub fn dataset_dir(cfg: &RunConfig) -> PathBuf {
    cfg.output_dir.join("dataset")
}

fn refuse_mismatch(what: &str, found: &str, expected: &str, force: bool) -> Result<()> {
    if found != expected && !force {
        return Err(Error::Config(format!(
            "{what} hash {found} does not match the config ({expected}); rerun the producing command or pass --force"
        )));
    }
    Ok(())
}

/// Writes one slice-set file per datapoint plus the manifest and timing table.
pub fn generate(cfg: &RunConfig, force: bool) -> Result<DatasetManifest> {
    let dir = dataset_dir(cfg);
    let manifest_path = dir.join(MANIFEST_FILE);
    let hash = cfg.dataset_hash();
    if manifest_path.is_file() {
        let old: DatasetManifest = io::read_json(&manifest_path)?;
        refuse_mismatch("existing dataset", &old.dataset_hash, &hash, force)?;
    }
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let probe = cfg.probing.spec();
    let timing_path = dir.join("timing.csv");
    io::write_bytes(&timing_path, b"function_id,dimension,instance_id,repetition,evaluations,seconds\n")?;
    let mut entries = Vec::with_capacity(cfg.suite.len());
    for id in cfg.suite.index() {
        let (set, cost) = generate_one(id, &probe, cfg.probing.seed)?;
        let file = io::slice_file_name(&id);
        io::write_slice_set(&dir.join(&file), &set)?;
        io::append_line(
            &timing_path,
            &format!(
                "{},{},{},{},{},{}",
                id.function_id, id.dimension, id.instance_id, id.repetition, cost.evaluations, cost.seconds
            ),
        )?;
        entries.push(ManifestEntry {
            id,
            file,
            seed: id.seed(cfg.probing.seed),
            evaluations: cost.evaluations,
        });
    }
    let manifest = DatasetManifest {
        dataset_hash: hash,
        suite: cfg.suite.clone(),
        probing: cfg.probing.clone(),
        count: entries.len(),
        total_evaluations: entries.iter().map(|e| e.evaluations).sum(),
        entries,
    };
    io::write_json(&manifest_path, &manifest)?;
    Ok(manifest)
}

/// Loads every slice set listed in the manifest, checking the config hash.
pub fn load_dataset(cfg: &RunConfig, force: bool) -> Result<Vec<SliceSet>> {
    let dir = dataset_dir(cfg);
    let manifest: DatasetManifest = io::read_json(&dir.join(MANIFEST_FILE))?;
    refuse_mismatch("dataset", &manifest.dataset_hash, &cfg.dataset_hash(), force)?;
    manifest
        .entries
        .iter()
        .map(|e| {
            let set = io::read_slice_set(&dir.join(&e.file))?;
            if set.id != e.id {
                return Err(Error::Data(format!("{} holds {:?}, manifest says {:?}", e.file, set.id, e.id)));
            }
            Ok(set)
        })
        .collect()
}

/// Builds the label table from the configured source.
pub fn build_labels(cfg: &RunConfig) -> Result<LabelsFile> {
    let (records, source) = match &cfg.labels {
        LabelsSource::Runs { path } => (aggregate_runs(&io::read_runs_csv(path)?)?, format!("runs:{}", path.display())),
        LabelsSource::Ert { path } => (io::read_ert_csv(path)?, format!("ert:{}", path.display())),
        LabelsSource::Synthetic(spec) => (synthetic_ert(spec)?, "synthetic".to_string()),
    };
    let table = LabelTable::from_records(&records)?;
    let warnings = table
        .never_successful()
        .into_iter()
        .map(|a| format!("algorithm `{a}` never reached the target on any problem"))
        .collect();
    Ok(LabelsFile {
        labels_hash: cfg.labels_hash()?,
        source,
        warnings,
        table,
    })
}

pub fn ingest(cfg: &RunConfig) -> Result<LabelsFile> {
    let labels = build_labels(cfg)?;
    io::write_json(&cfg.output_dir.join(LABELS_FILE), &labels)?;
    Ok(labels)
}

pub fn load_labels(cfg: &RunConfig, force: bool) -> Result<LabelTable> {
    let file: LabelsFile = io::read_json(&cfg.output_dir.join(LABELS_FILE))?;
    refuse_mismatch("labels", &file.labels_hash, &cfg.labels_hash()?, force)?;
    Ok(file.table)
}

/// Writes the synthetic benchmark as an ERT CSV; returns the row count.
pub fn synthetic_labels(spec: &SyntheticSpec, out: &Path) -> Result<usize> {
    let records = synthetic_ert(spec)?;
    io::write_ert_csv(out, &records)?;
    Ok(records.len())
}

/// Every artefact derived from one report.
pub fn write_report(dir: &Path, report: &Report) -> Result<Vec<PathBuf>> {
    let files = [
        "report.json",
        "summary.csv",
        "quadrants.csv",
        "records.csv",
        "histogram.svg",
        "survival.svg",
        "selection.svg",
        "gap_closure.svg",
    ];
    let paths: Vec<PathBuf> = files.iter().map(|f| dir.join(f)).collect();
    io::write_json(&paths[0], report)?;
    io::write_summary_csv(&paths[1], report)?;
    io::write_quadrants_csv(&paths[2], report)?;
    io::write_records_csv(&paths[3], report)?;
    io::write_bytes(&paths[4], plot::relert_histogram(report).as_bytes())?;
    io::write_bytes(&paths[5], plot::survival_plot(report).as_bytes())?;
    io::write_bytes(&paths[6], plot::selection_bars(report).as_bytes())?;
    io::write_bytes(&paths[7], plot::gap_closure_heatmap(report).as_bytes())?;
    Ok(paths)
}

/// Runs the configured protocol and writes reports, plots and fold checkpoints.
pub fn evaluate(cfg: &RunConfig, force: bool) -> Result<Vec<Report>> {
    let dataset = load_dataset(cfg, force)?;
    let labels = load_labels(cfg, force)?;
    let protocol = cfg.evaluation.protocol;
    let eval = cfg.eval_config();
    let ck_dir = cfg.output_dir.join("checkpoints").join(protocol.name());
    let mut failure = None;
    let reports = run_protocol_with(&dataset, &labels, &eval, protocol, &cfg.evaluation.modes, |fold, params| {
        if failure.is_some() {
            return;
        }
        let ck = Checkpoint {
            manifest: ModelManifest {
                n_algorithms: params.architecture.n_algorithms,
                resolution: cfg.probing.resolution,
                slices: cfg.probing.slices,
                ablation: params.architecture.ablation,
                seed: eval.train.seed,
            },
            rng: RngState::capture(&stream(fold_seed(protocol, fold, eval.seed))),
            params: params.clone(),
        };
        let written = io::encode_checkpoint(&ck)
            .and_then(|bytes| io::write_bytes(&ck_dir.join(format!("fold_{fold}.gpck")), &bytes));
        if let Err(e) = written {
            failure = Some(e);
        }
    })?;
    if let Some(e) = failure {
        return Err(e);
    }
    for r in &reports {
        let dir = cfg.output_dir.join("reports").join(protocol.name()).join(r.mode.name());
        write_report(&dir, r)?;
    }
    Ok(reports)
}

/// Budget sweep over the configured `k` and `r` grids.
pub fn sweep(cfg: &RunConfig, force: bool) -> Result<Vec<SweepCell>> {
    let labels = load_labels(cfg, force)?;
    let cells = budget_sweep(
        &cfg.suite,
        &cfg.probing.spec(),
        &labels,
        &cfg.sweep.slices,
        &cfg.sweep.resolutions,
        cfg.sweep.protocol,
        &cfg.eval_config(),
        cfg.probing.seed,
    )?;
    let dir = cfg.output_dir.join("sweep");
    io::write_json(&dir.join("sweep.json"), &cells)?;
    io::write_sweep_csv(&dir.join("sweep.csv"), &cells)?;
    for m in BudgetMetric::ALL {
        io::write_bytes(&dir.join(format!("{}.svg", m.file_stem())), plot::budget_heatmap(&cells, m).as_bytes())?;
    }
    Ok(cells)
}
