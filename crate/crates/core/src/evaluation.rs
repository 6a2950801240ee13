//! Split protocols, relERT statistics, tail quadrants and the per-fold
//! train/select/score loop.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dataset::{generate_one, SuiteSpec};
use crate::error::{Error, Result};
use crate::labels::{identify_sbs, tail_prior, LabelRow, LabelTable, SbsCriterion, TrainingSplit};
use crate::model::{train, Example, ModelParams, TrainConfig};
use crate::probing::{DatapointId, ProbeSpec, SliceSet};
use crate::seed::{mix, stream, tag};
use crate::selector::{select, SelectionMode};
use crate::stats::{mean, quantile_sorted, sorted_copy};

pub const DEFAULT_FOLDS: usize = 5;
pub const FIXED_TAIL_THRESHOLD: f64 = 1000.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Protocol {
    /// Leave-instance-out: fold `j` holds out the `j`-th instance of every problem.
    Lio,
    /// Grouped random: `(f, d, i)` groups split into 5 seeded folds.
    Random,
    /// Leave-problem-out: one fold per function id.
    Lpo,
}

impl Protocol {
    pub fn name(self) -> &'static str {
        match self {
            Protocol::Lio => "lio",
            Protocol::Random => "random",
            Protocol::Lpo => "lpo",
        }
    }

    fn tag(self) -> u64 {
        match self {
            Protocol::Lio => 1,
            Protocol::Random => 2,
            Protocol::Lpo => 3,
        }
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Protocol {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "lio" => Ok(Protocol::Lio),
            "random" => Ok(Protocol::Random),
            "lpo" => Ok(Protocol::Lpo),
            other => Err(Error::Config(format!("unknown protocol `{other}` (expected lio, random or lpo)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub train: Vec<DatapointId>,
    pub test: Vec<DatapointId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub protocol: Protocol,
    pub folds: Vec<Fold>,
}

/// Partitions `index` into train/test folds. Empty test folds are dropped.
pub fn make_split(protocol: Protocol, index: &[DatapointId], seed: u64) -> Result<SplitPlan> {
    if index.is_empty() {
        return Err(Error::Config("cannot split an empty dataset".into()));
    }
    let fold_of: HashMap<DatapointId, usize> = match protocol {
        Protocol::Lio => {
            let mut per_problem: BTreeMap<(u32, u32), BTreeSet<u32>> = BTreeMap::new();
            for id in index {
                per_problem.entry(id.problem()).or_default().insert(id.instance_id);
            }
            index
                .iter()
                .map(|id| {
                    let rank = per_problem[&id.problem()].range(..id.instance_id).count();
                    (*id, rank % DEFAULT_FOLDS)
                })
                .collect()
        }
        Protocol::Random => {
            let mut groups: Vec<(u32, u32, u32)> = index.iter().map(DatapointId::group).collect::<BTreeSet<_>>().into_iter().collect();
            let mut rng = stream(mix(&[tag::FOLD, protocol.tag(), seed]));
            crate::model::shuffle(&mut groups, &mut rng);
            let assignment: HashMap<(u32, u32, u32), usize> = groups
                .into_iter()
                .enumerate()
                .map(|(i, g)| (g, i % DEFAULT_FOLDS))
                .collect();
            index.iter().map(|id| (*id, assignment[&id.group()])).collect()
        }
        Protocol::Lpo => {
            let functions: Vec<u32> = index.iter().map(|id| id.function_id).collect::<BTreeSet<_>>().into_iter().collect();
            index
                .iter()
                .map(|id| (*id, functions.binary_search(&id.function_id).expect("present")))
                .collect()
        }
    };
    let n_folds = fold_of.values().max().map_or(0, |m| m + 1);
    let folds = (0..n_folds)
        .map(|j| Fold {
            train: index.iter().filter(|id| fold_of[id] != j).copied().collect(),
            test: index.iter().filter(|id| fold_of[id] == j).copied().collect(),
        })
        .filter(|f| !f.test.is_empty())
        .collect();
    Ok(SplitPlan { protocol, folds })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub median: f64,
    pub p90: f64,
}

/// Mean, median and type-7 90th percentile.
pub fn statistics(values: &[f64]) -> Result<Summary> {
    if values.is_empty() {
        return Err(Error::Input("statistics of an empty sample".into()));
    }
    let sorted = sorted_copy(values);
    Ok(Summary {
        mean: mean(values),
        median: quantile_sorted(&sorted, 0.5),
        p90: quantile_sorted(&sorted, 0.9),
    })
}

/// Fraction `(sbs - selector) / (sbs - 1)` of the gap to the oracle closed;
/// 0 when the single best solver is already optimal.
pub fn gap_closure(sbs: f64, selector: f64) -> f64 {
    if sbs == 1.0 {
        0.0
    } else {
        (sbs - selector) / (sbs - 1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Quadrants {
    pub neither: usize,
    pub sbs_only: usize,
    pub both: usize,
    pub selector_only: usize,
}

impl Quadrants {
    pub fn total(&self) -> usize {
        self.neither + self.sbs_only + self.both + self.selector_only
    }
}

/// Counts datapoints by which of selector / SBS exceed `threshold` (strictly).
pub fn tail_quadrants(selector: &[f64], sbs: &[f64], threshold: f64) -> Result<Quadrants> {
    if selector.len() != sbs.len() {
        return Err(Error::Input(format!(
            "tail quadrants need aligned lists, got {} and {}",
            selector.len(),
            sbs.len()
        )));
    }
    let mut q = Quadrants::default();
    for (&a, &s) in selector.iter().zip(sbs) {
        match (s > threshold, a > threshold) {
            (false, false) => q.neither += 1,
            (true, false) => q.sbs_only += 1,
            (true, true) => q.both += 1,
            (false, true) => q.selector_only += 1,
        }
    }
    Ok(q)
}

/// Standard partition of the 24 functions into five groups.
pub fn function_group(function_id: u32) -> &'static str {
    match function_id {
        1..=5 => "f1-f5",
        6..=9 => "f6-f9",
        10..=14 => "f10-f14",
        15..=19 => "f15-f19",
        _ => "f20-f24",
    }
}

/// Outcome of one test datapoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatapointRecord {
    pub id: DatapointId,
    pub fold: usize,
    pub chosen: usize,
    pub vbs: usize,
    pub selector_relert: f64,
    pub sbs_relert: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub group: String,
    /// `None` aggregates over all dimensions.
    pub dimension: Option<u32>,
    pub count: usize,
    pub sbs: Summary,
    pub selector: Summary,
    /// Gap closure of each statistic.
    pub closure: Summary,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadrantRow {
    pub threshold_name: String,
    pub threshold: f64,
    pub counts: Quadrants,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub protocol: Protocol,
    pub mode: SelectionMode,
    pub algorithms: Vec<String>,
    pub cap: f64,
    pub folds: usize,
    pub sbs_algorithm: usize,
    pub sbs_q90: f64,
    pub overall: CellSummary,
    pub cells: Vec<CellSummary>,
    pub quadrants: Vec<QuadrantRow>,
    pub selection_counts: Vec<usize>,
    pub records: Vec<DatapointRecord>,
}

fn summarize_cell(group: &str, dimension: Option<u32>, records: &[&DatapointRecord]) -> Result<CellSummary> {
    let sel: Vec<f64> = records.iter().map(|r| r.selector_relert).collect();
    let sbs: Vec<f64> = records.iter().map(|r| r.sbs_relert).collect();
    let s = statistics(&sbs)?;
    let a = statistics(&sel)?;
    Ok(CellSummary {
        group: group.to_string(),
        dimension,
        count: records.len(),
        sbs: s,
        selector: a,
        closure: Summary {
            mean: gap_closure(s.mean, a.mean),
            median: gap_closure(s.median, a.median),
            p90: gap_closure(s.p90, a.p90),
        },
        accuracy: records.iter().filter(|r| r.selector_relert == 1.0).count() as f64 / records.len() as f64,
    })
}

impl Report {
    /// Assembles summaries from raw records; the SBS baseline and its
    /// quantile are supplied by the caller.
    pub fn from_records(
        protocol: Protocol,
        mode: SelectionMode,
        labels: &LabelTable,
        folds: usize,
        sbs_algorithm: usize,
        sbs_q90: f64,
        mut records: Vec<DatapointRecord>,
    ) -> Result<Self> {
        records.sort_by_key(|r| r.id);
        let all: Vec<&DatapointRecord> = records.iter().collect();
        let overall = summarize_cell("all", None, &all)?;
        let mut cells = Vec::new();
        let groups: BTreeSet<(u32, &str)> = records
            .iter()
            .map(|r| (group_order(r.id.function_id), function_group(r.id.function_id)))
            .collect();
        let dims: BTreeSet<u32> = records.iter().map(|r| r.id.dimension).collect();
        let group_names: Vec<&str> = groups.iter().map(|g| g.1).chain(["all"]).collect();
        for g in group_names {
            for d in dims.iter().map(|&d| Some(d)).chain([None]) {
                let sel: Vec<&DatapointRecord> = records
                    .iter()
                    .filter(|r| (g == "all" || function_group(r.id.function_id) == g) && d.is_none_or(|d| r.id.dimension == d))
                    .collect();
                if !sel.is_empty() {
                    cells.push(summarize_cell(g, d, &sel)?);
                }
            }
        }
        let sel: Vec<f64> = records.iter().map(|r| r.selector_relert).collect();
        let sbs: Vec<f64> = records.iter().map(|r| r.sbs_relert).collect();
        let quadrants = vec![
            QuadrantRow {
                threshold_name: "q90_sbs".into(),
                threshold: sbs_q90,
                counts: tail_quadrants(&sel, &sbs, sbs_q90)?,
            },
            QuadrantRow {
                threshold_name: "1000".into(),
                threshold: FIXED_TAIL_THRESHOLD,
                counts: tail_quadrants(&sel, &sbs, FIXED_TAIL_THRESHOLD)?,
            },
        ];
        let mut selection_counts = vec![0; labels.n_algorithms()];
        for r in &records {
            selection_counts[r.chosen] += 1;
        }
        Ok(Self {
            protocol,
            mode,
            algorithms: labels.algorithms.clone(),
            cap: labels.cap,
            folds,
            sbs_algorithm,
            sbs_q90,
            overall,
            cells,
            quadrants,
            selection_counts,
            records,
        })
    }

    pub fn cell(&self, group: &str, dimension: Option<u32>) -> Option<&CellSummary> {
        self.cells.iter().find(|c| c.group == group && c.dimension == dimension)
    }
}

fn group_order(function_id: u32) -> u32 {
    match function_id {
        1..=5 => 0,
        6..=9 => 1,
        10..=14 => 2,
        15..=19 => 3,
        _ => 4,
    }
}

/// Label rows of every datapoint, one per datapoint.
fn rows_for<'a>(labels: &'a LabelTable, ids: &[DatapointId]) -> Result<Vec<&'a LabelRow>> {
    ids.iter()
        .map(|id| {
            labels
                .row(id.function_id, id.dimension)
                .ok_or_else(|| Error::Data(format!("no label row for f{} d{}", id.function_id, id.dimension)))
        })
        .collect()
}

/// The benchmark-wide single best solver over the given datapoints.
pub fn global_sbs(labels: &LabelTable, ids: &[DatapointId], criterion: SbsCriterion) -> Result<(usize, f64)> {
    let split = TrainingSplit::new(rows_for(labels, ids)?)?;
    let sbs = identify_sbs(&split, criterion);
    Ok((sbs.algorithm, sbs.q90))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub train: TrainConfig,
    pub sbs_criterion: SbsCriterion,
    pub seed: u64,
    /// Inference batch size.
    pub batch_size: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            sbs_criterion: SbsCriterion::Mean,
            seed: 0,
            batch_size: 64,
        }
    }
}

/// Training seed of fold `fold` under `protocol`.
pub fn fold_seed(protocol: Protocol, fold: usize, global_seed: u64) -> u64 {
    mix(&[tag::FOLD, protocol.tag(), fold as u64, global_seed])
}

/// Trains one model per fold and scores every test datapoint under each of
/// `modes`. Returns one report per mode, in the order given.
pub fn run_protocol_modes(
    dataset: &[SliceSet],
    labels: &LabelTable,
    cfg: &EvalConfig,
    protocol: Protocol,
    modes: &[SelectionMode],
) -> Result<Vec<Report>> {
    run_protocol_with(dataset, labels, cfg, protocol, modes, |_, _| {})
}

/// As [`run_protocol_modes`], calling `on_fold(index, trained)` after each fold trains.
pub fn run_protocol_with(
    dataset: &[SliceSet],
    labels: &LabelTable,
    cfg: &EvalConfig,
    protocol: Protocol,
    modes: &[SelectionMode],
    mut on_fold: impl FnMut(usize, &ModelParams),
) -> Result<Vec<Report>> {
    if modes.is_empty() {
        return Err(Error::Config("no selection mode requested".into()));
    }
    let by_id: HashMap<DatapointId, &SliceSet> = dataset.iter().map(|s| (s.id, s)).collect();
    if by_id.len() != dataset.len() {
        return Err(Error::Data("duplicate datapoint ids in the dataset".into()));
    }
    let index: Vec<DatapointId> = {
        let mut v: Vec<DatapointId> = by_id.keys().copied().collect();
        v.sort();
        v
    };
    let (sbs_algorithm, sbs_q90) = global_sbs(labels, &index, cfg.sbs_criterion)?;
    let plan = make_split(protocol, &index, cfg.seed)?;
    let a = labels.n_algorithms();
    let mut records: Vec<Vec<DatapointRecord>> = vec![Vec::new(); modes.len()];
    for (j, fold) in plan.folds.iter().enumerate() {
        let train_rows = rows_for(labels, &fold.train)?;
        let cats: Vec<Vec<bool>> = train_rows.iter().map(|r| labels.catastrophe(r)).collect();
        let examples: Vec<Example> = fold
            .train
            .iter()
            .zip(&train_rows)
            .zip(&cats)
            .map(|((id, row), cat)| Example {
                slices: by_id[id],
                relert: &row.relert,
                catastrophe: cat,
            })
            .collect();
        let split = TrainingSplit::new(train_rows.clone())?;
        let fold_sbs = identify_sbs(&split, cfg.sbs_criterion);
        let prior = tail_prior(&split, fold_sbs.q90);
        let train_cfg = TrainConfig {
            seed: fold_seed(protocol, j, cfg.seed),
            ..cfg.train.clone()
        };
        let trained = train(&examples, a, &train_cfg)?;
        on_fold(j, &trained.params);
        for chunk in fold.test.chunks(cfg.batch_size.max(1)) {
            let sets: Vec<&SliceSet> = chunk.iter().map(|id| by_id[id]).collect();
            let pred = trained.params.forward(&sets)?;
            for (b, id) in chunk.iter().enumerate() {
                let row = labels.row(id.function_id, id.dimension).expect("checked above");
                let y = &pred.regression[b * a..(b + 1) * a];
                let logits = pred.catastrophe_logits.as_ref().map(|l| &l[b * a..(b + 1) * a]);
                for (m, mode) in modes.iter().enumerate() {
                    let choice = select(y, logits, &prior, labels.cap, *mode)?;
                    records[m].push(DatapointRecord {
                        id: *id,
                        fold: j,
                        chosen: choice.chosen,
                        vbs: row.vbs,
                        selector_relert: row.relert[choice.chosen],
                        sbs_relert: row.relert[sbs_algorithm],
                    });
                }
            }
        }
    }
    modes
        .iter()
        .zip(records)
        .map(|(mode, recs)| Report::from_records(protocol, *mode, labels, plan.folds.len(), sbs_algorithm, sbs_q90, recs))
        .collect()
}

/// Single-mode convenience over [`run_protocol_modes`].
pub fn run_protocol(dataset: &[SliceSet], labels: &LabelTable, cfg: &EvalConfig, protocol: Protocol, mode: SelectionMode) -> Result<Report> {
    Ok(run_protocol_modes(dataset, labels, cfg, protocol, &[mode])?.remove(0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub slices: usize,
    pub resolution: usize,
    pub evaluations_per_datapoint: u64,
    pub mean_probe_seconds: f64,
    pub summary: Summary,
    pub accuracy: f64,
}

/// Regenerates the dataset for every `(k, r)` and runs `protocol` on it.
#[allow(clippy::too_many_arguments)]
pub fn budget_sweep(
    suite: &SuiteSpec,
    base_probe: &ProbeSpec,
    labels: &LabelTable,
    ks: &[usize],
    rs: &[usize],
    protocol: Protocol,
    cfg: &EvalConfig,
    global_seed: u64,
) -> Result<Vec<SweepCell>> {
    if let Some(r) = rs.iter().find(|&&r| r == 0 || r % 4 != 0) {
        return Err(Error::Config(format!("sweep resolution {r} is not a multiple of 4")));
    }
    suite.validate()?;
    let mut cells = Vec::with_capacity(ks.len() * rs.len());
    for &k in ks {
        for &r in rs {
            let probe = ProbeSpec {
                slices: k,
                resolution: r,
                ..*base_probe
            };
            let mut sets = Vec::with_capacity(suite.len());
            let mut seconds = 0.0;
            let mut evaluations = 0;
            for id in suite.index() {
                let (set, cost) = generate_one(id, &probe, global_seed)?;
                seconds += cost.seconds;
                evaluations = cost.evaluations;
                sets.push(set);
            }
            let report = run_protocol(&sets, labels, cfg, protocol, SelectionMode::Full)?;
            cells.push(SweepCell {
                slices: k,
                resolution: r,
                evaluations_per_datapoint: evaluations,
                mean_probe_seconds: seconds / sets.len() as f64,
                summary: report.overall.selector,
                accuracy: report.overall.accuracy,
            });
        }
    }
    Ok(cells)
}
