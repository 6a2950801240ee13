//! Performance labels: ERT, relERT, PAR10 capping, catastrophe flags, single
//! best solver and the training-split tail prior.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::{mean, quantile, quantile_sorted, sorted_copy};

pub const LAMBDA_CAP: f64 = 3.0;
pub const LAMBDA_Q90: f64 = 3.0;
pub const PAR_FACTOR: f64 = 10.0;

/// One solver run on one problem instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub function_id: u32,
    pub dimension: u32,
    pub instance_id: u32,
    pub algorithm: String,
    pub evaluations: u64,
    pub success: bool,
}

/// `sum FE / sum Succ` over pooled runs; `None` when no run succeeded.
pub fn compute_ert(runs: &[RunRecord]) -> Result<Option<f64>> {
    if runs.is_empty() {
        return Err(Error::Input("ERT of an empty run list".into()));
    }
    let evaluations: f64 = runs.iter().map(|r| r.evaluations as f64).sum();
    let successes = runs.iter().filter(|r| r.success).count();
    Ok((successes > 0).then(|| evaluations / successes as f64))
}

/// Divides a row by its smallest defined ERT.
pub fn compute_relert(ert_row: &[Option<f64>]) -> Result<Vec<Option<f64>>> {
    let best = ert_row
        .iter()
        .flatten()
        .copied()
        .fold(f64::INFINITY, f64::min);
    if !best.is_finite() {
        return Err(Error::Data("relERT row has no finite ERT".into()));
    }
    Ok(ert_row
        .iter()
        .map(|e| e.map(|v| v / best))
        .collect())
}

/// Pre-aggregated ERT of one algorithm on one `(f, d)` problem; `None`
/// when no run reached the target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErtRecord {
    pub function_id: u32,
    pub dimension: u32,
    pub algorithm: String,
    pub ert: Option<f64>,
}

/// Pools runs over instances into one ERT per `(f, d, algorithm)`.
pub fn aggregate_runs(runs: &[RunRecord]) -> Result<Vec<ErtRecord>> {
    let mut groups: std::collections::BTreeMap<(u32, u32, &str), Vec<RunRecord>> = Default::default();
    for r in runs {
        groups
            .entry((r.function_id, r.dimension, r.algorithm.as_str()))
            .or_default()
            .push(r.clone());
    }
    groups
        .into_iter()
        .map(|((f, d, a), rs)| {
            Ok(ErtRecord {
                function_id: f,
                dimension: d,
                algorithm: a.to_string(),
                ert: compute_ert(&rs)?,
            })
        })
        .collect()
}

/// A relERT entry before or after capping.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Entry {
    Finite(f64),
    Undefined,
    /// Imputed; holds the cap it was imputed with.
    Capped(f64),
}

impl Entry {
    pub fn from_relert(value: Option<f64>) -> Self {
        value.map_or(Entry::Undefined, Entry::Finite)
    }

    pub fn value(&self) -> Option<f64> {
        match *self {
            Entry::Finite(v) | Entry::Capped(v) => Some(v),
            Entry::Undefined => None,
        }
    }
}

/// Replaces every undefined (or previously capped) entry by
/// `10 x max finite entry`. Returns the table and the cap.
pub fn impute_par10(table: &[Vec<Entry>]) -> Result<(Vec<Vec<Entry>>, f64)> {
    let finite_max = table
        .iter()
        .flatten()
        .filter_map(|e| match e {
            Entry::Finite(v) => Some(*v),
            _ => None,
        })
        .fold(f64::NEG_INFINITY, f64::max);
    if finite_max == f64::NEG_INFINITY {
        return Err(Error::Data("no finite relERT in the table".into()));
    }
    let cap = PAR_FACTOR * finite_max;
    let capped = table
        .iter()
        .map(|row| {
            row.iter()
                .map(|e| match e {
                    Entry::Finite(v) => Entry::Finite(*v),
                    Entry::Undefined | Entry::Capped(_) => Entry::Capped(cap),
                })
                .collect()
        })
        .collect();
    Ok((capped, cap))
}

/// `1[entry == cap]`, by exact comparison.
pub fn catastrophe_labels(values: &[Vec<f64>], cap: f64) -> Vec<Vec<bool>> {
    values
        .iter()
        .map(|row| row.iter().map(|&v| v == cap).collect())
        .collect()
}

/// Capped relERT row of one `(f, d)` problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelRow {
    pub function_id: u32,
    pub dimension: u32,
    pub relert: Vec<f64>,
    pub capped: Vec<bool>,
    pub vbs: usize,
}

/// Labels for every `(f, d)` problem over a fixed portfolio.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelTable {
    pub algorithms: Vec<String>,
    pub cap: f64,
    pub rows: Vec<LabelRow>,
}

impl LabelTable {
    /// Builds capped labels from per-problem ERT rows (`None` = no success).
    pub fn from_ert(algorithms: Vec<String>, ert: &[((u32, u32), Vec<Option<f64>>)]) -> Result<Self> {
        if algorithms.len() < 2 {
            return Err(Error::Data("a label table needs at least 2 algorithms".into()));
        }
        let mut rel = Vec::with_capacity(ert.len());
        for ((f, d), row) in ert {
            if row.len() != algorithms.len() {
                return Err(Error::Data(format!(
                    "problem (f{f}, d{d}) has {} ERT entries for {} algorithms",
                    row.len(),
                    algorithms.len()
                )));
            }
            let r = compute_relert(row)
                .map_err(|_| Error::Data(format!("problem (f{f}, d{d}): no algorithm ever succeeded")))?;
            rel.push(r.into_iter().map(Entry::from_relert).collect::<Vec<_>>());
        }
        let (capped, cap) = impute_par10(&rel)?;
        let rows = ert
            .iter()
            .zip(capped)
            .map(|(((f, d), _), entries)| {
                let relert: Vec<f64> = entries.iter().map(|e| e.value().expect("imputed")).collect();
                let vbs = argmin(&relert);
                LabelRow {
                    function_id: *f,
                    dimension: *d,
                    capped: entries.iter().map(|e| matches!(e, Entry::Capped(_))).collect(),
                    relert,
                    vbs,
                }
            })
            .collect();
        let mut table = Self { algorithms, cap, rows };
        table.rows.sort_by_key(|r| (r.function_id, r.dimension));
        Ok(table)
    }

    /// Builds labels from ERT records. Algorithms are ordered by first
    /// appearance; every problem must list every algorithm exactly once.
    pub fn from_records(records: &[ErtRecord]) -> Result<Self> {
        let mut algorithms: Vec<String> = Vec::new();
        for r in records {
            if !algorithms.contains(&r.algorithm) {
                algorithms.push(r.algorithm.clone());
            }
        }
        let mut problems: std::collections::BTreeMap<(u32, u32), Vec<Option<Option<f64>>>> = Default::default();
        for r in records {
            let row = problems
                .entry((r.function_id, r.dimension))
                .or_insert_with(|| vec![None; algorithms.len()]);
            let a = algorithms.iter().position(|x| *x == r.algorithm).expect("collected");
            if row[a].is_some() {
                return Err(Error::Data(format!(
                    "duplicate ERT for {} on f{} d{}",
                    r.algorithm, r.function_id, r.dimension
                )));
            }
            row[a] = Some(r.ert);
        }
        let mut rows = Vec::with_capacity(problems.len());
        for ((f, d), row) in problems {
            if let Some(a) = row.iter().position(Option::is_none) {
                return Err(Error::Data(format!("no ERT for {} on f{f} d{d}", algorithms[a])));
            }
            rows.push(((f, d), row.into_iter().map(|e| e.expect("checked")).collect()));
        }
        Self::from_ert(algorithms, &rows)
    }

    pub fn n_algorithms(&self) -> usize {
        self.algorithms.len()
    }

    pub fn row(&self, function_id: u32, dimension: u32) -> Option<&LabelRow> {
        self.rows
            .binary_search_by_key(&(function_id, dimension), |r| (r.function_id, r.dimension))
            .ok()
            .map(|i| &self.rows[i])
    }

    /// Catastrophe indicators `relERT == cap` for one row.
    pub fn catastrophe(&self, row: &LabelRow) -> Vec<bool> {
        row.relert.iter().map(|&v| v == self.cap).collect()
    }

    /// Algorithms with no finite entry anywhere.
    pub fn never_successful(&self) -> Vec<&str> {
        (0..self.n_algorithms())
            .filter(|&a| self.rows.iter().all(|r| r.capped[a]))
            .map(|a| self.algorithms[a].as_str())
            .collect()
    }
}

/// Lowest index among minimal entries.
pub fn argmin(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v < values[best] {
            best = i;
        }
    }
    best
}

/// Label rows of the training datapoints only, one entry per datapoint.
///
/// The tail prior and the single best solver are computed from this type so
/// test rows cannot reach them.
#[derive(Debug, Clone)]
pub struct TrainingSplit<'a> {
    rows: Vec<&'a LabelRow>,
}

impl<'a> TrainingSplit<'a> {
    pub fn new(rows: Vec<&'a LabelRow>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Data("training split has no rows".into()));
        }
        let width = rows[0].relert.len();
        if rows.iter().any(|r| r.relert.len() != width) {
            return Err(Error::Shape("training rows differ in portfolio size".into()));
        }
        Ok(Self { rows })
    }

    pub fn rows(&self) -> &[&'a LabelRow] {
        &self.rows
    }

    pub fn n_algorithms(&self) -> usize {
        self.rows[0].relert.len()
    }

    fn column(&self, a: usize) -> Vec<f64> {
        self.rows.iter().map(|r| r.relert[a]).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SbsCriterion {
    #[default]
    Mean,
    Median,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SingleBest {
    pub algorithm: usize,
    /// 90th percentile of the single best solver's relERT over the split.
    pub q90: f64,
}

/// Argmin of the aggregate relERT per algorithm (ties to the lower index).
pub fn identify_sbs(split: &TrainingSplit<'_>, criterion: SbsCriterion) -> SingleBest {
    let scores: Vec<f64> = (0..split.n_algorithms())
        .map(|a| {
            let col = split.column(a);
            match criterion {
                SbsCriterion::Mean => mean(&col),
                SbsCriterion::Median => quantile(&col, 0.5),
            }
        })
        .collect();
    let algorithm = argmin(&scores);
    let sorted = sorted_copy(&split.column(algorithm));
    SingleBest {
        algorithm,
        q90: quantile_sorted(&sorted, 0.9),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TailPrior {
    pub p_cap: Vec<f64>,
    pub p_q90: Vec<f64>,
    pub rho: Vec<f64>,
    pub reference_q90: f64,
}

impl TailPrior {
    pub fn zeros(n_algorithms: usize) -> Self {
        Self {
            p_cap: vec![0.0; n_algorithms],
            p_q90: vec![0.0; n_algorithms],
            rho: vec![0.0; n_algorithms],
            reference_q90: 0.0,
        }
    }

    pub fn from_rates(p_cap: Vec<f64>, p_q90: Vec<f64>, reference_q90: f64) -> Self {
        let rho = p_cap
            .iter()
            .zip(&p_q90)
            .map(|(c, q)| LAMBDA_CAP * c + LAMBDA_Q90 * q)
            .collect();
        Self {
            p_cap,
            p_q90,
            rho,
            reference_q90,
        }
    }
}

/// `rho_a = 3 P(capped_a) + 3 P(relERT_a > q90)` over the training split.
pub fn tail_prior(split: &TrainingSplit<'_>, sbs_q90: f64) -> TailPrior {
    let n = split.rows.len() as f64;
    let a = split.n_algorithms();
    let p_cap = (0..a)
        .map(|j| split.rows.iter().filter(|r| r.capped[j]).count() as f64 / n)
        .collect();
    let p_q90 = (0..a)
        .map(|j| split.rows.iter().filter(|r| r.relert[j] > sbs_q90).count() as f64 / n)
        .collect();
    TailPrior::from_rates(p_cap, p_q90, sbs_q90)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(evals: u64, success: bool) -> RunRecord {
        RunRecord {
            function_id: 1,
            dimension: 2,
            instance_id: 1,
            algorithm: "a".into(),
            evaluations: evals,
            success,
        }
    }

    #[test]
    fn ert_hand_values() {
        let runs = [run(100, true), run(200, false), run(300, true)];
        assert_eq!(compute_ert(&runs).unwrap(), Some(300.0));
        assert_eq!(compute_ert(&[run(1, true), run(1, true)]).unwrap(), Some(1.0));
        assert_eq!(compute_ert(&[run(5, false)]).unwrap(), None);
        assert!(compute_ert(&[]).is_err());
    }

    #[test]
    fn adding_a_failure_increases_ert() {
        let mut runs = vec![run(100, true), run(40, true)];
        let before = compute_ert(&runs).unwrap().unwrap();
        runs.push(run(10, false));
        assert!(compute_ert(&runs).unwrap().unwrap() > before);
    }

    #[test]
    fn relert_hand_values() {
        let r = compute_relert(&[Some(100.0), Some(50.0), Some(200.0)]).unwrap();
        assert_eq!(r, vec![Some(2.0), Some(1.0), Some(4.0)]);
        assert_eq!(compute_relert(&[Some(7.0)]).unwrap(), vec![Some(1.0)]);
        assert_eq!(compute_relert(&[Some(50.0), None]).unwrap(), vec![Some(1.0), None]);
        assert!(matches!(compute_relert(&[None, None]), Err(Error::Data(_))));
    }

    #[test]
    fn par10_hand_values_and_idempotence() {
        let t = vec![
            vec![Entry::Finite(1.0), Entry::Finite(150.0)],
            vec![Entry::Undefined, Entry::Finite(1.0)],
        ];
        let (c, cap) = impute_par10(&t).unwrap();
        assert_eq!(cap, 1500.0);
        assert_eq!(c[1][0], Entry::Capped(1500.0));
        let (c2, cap2) = impute_par10(&c).unwrap();
        assert_eq!((c2, cap2), (c.clone(), cap));
        let full = vec![vec![Entry::Finite(1.0), Entry::Finite(3.0)]];
        let (same, cap) = impute_par10(&full).unwrap();
        assert_eq!((same, cap), (full, 30.0));
    }

    #[test]
    fn catastrophe_labels_are_exact() {
        let cap = 1500.0;
        let labels = catastrophe_labels(&[vec![cap, cap - 1e-9, 1.0]], cap);
        assert_eq!(labels, vec![vec![true, false, false]]);
    }

    fn table() -> LabelTable {
        LabelTable::from_ert(
            vec!["x".into(), "y".into()],
            &[
                ((2, 3), vec![Some(10.0), Some(40.0)]),
                ((1, 2), vec![None, Some(5.0)]),
                ((1, 3), vec![Some(30.0), Some(10.0)]),
            ],
        )
        .unwrap()
    }

    #[test]
    fn label_table_construction() {
        let t = table();
        assert_eq!(t.cap, 40.0);
        assert_eq!(t.row(1, 2).unwrap().relert, vec![40.0, 1.0]);
        assert_eq!(t.row(1, 2).unwrap().vbs, 1);
        assert_eq!(t.row(2, 3).unwrap().vbs, 0);
        assert!(t.row(9, 9).is_none());
        for r in &t.rows {
            assert_eq!(r.relert.iter().copied().fold(f64::INFINITY, f64::min), 1.0);
        }
        assert_eq!(t.catastrophe(t.row(1, 2).unwrap()), vec![true, false]);
        assert!(t.never_successful().is_empty());
    }

    #[test]
    fn sbs_rules() {
        let rows = [
            LabelRow { function_id: 1, dimension: 2, relert: vec![5.0, 1.0], capped: vec![false; 2], vbs: 1 },
            LabelRow { function_id: 2, dimension: 2, relert: vec![5.0, 3.0], capped: vec![false; 2], vbs: 1 },
        ];
        let split = TrainingSplit::new(rows.iter().collect()).unwrap();
        assert_eq!(identify_sbs(&split, SbsCriterion::Mean).algorithm, 1);
        let tied = [LabelRow { function_id: 1, dimension: 2, relert: vec![2.0, 2.0], capped: vec![false; 2], vbs: 0 }];
        let split = TrainingSplit::new(tied.iter().collect()).unwrap();
        assert_eq!(identify_sbs(&split, SbsCriterion::Mean).algorithm, 0);

        let many: Vec<LabelRow> = (1..=10)
            .map(|v| LabelRow { function_id: v, dimension: 2, relert: vec![v as f64, 100.0], capped: vec![false; 2], vbs: 0 })
            .collect();
        let split = TrainingSplit::new(many.iter().collect()).unwrap();
        let sbs = identify_sbs(&split, SbsCriterion::Median);
        assert_eq!(sbs.algorithm, 0);
        assert!((sbs.q90 - 9.1).abs() < 1e-12);
    }

    #[test]
    fn tail_prior_hand_values() {
        assert!((TailPrior::from_rates(vec![0.1], vec![0.2], 0.0).rho[0] - 0.9).abs() < 1e-15);
        let rows = [
            LabelRow { function_id: 1, dimension: 2, relert: vec![1.0, 50.0], capped: vec![false, true], vbs: 0 },
            LabelRow { function_id: 2, dimension: 2, relert: vec![1.0, 50.0], capped: vec![false, true], vbs: 0 },
        ];
        let split = TrainingSplit::new(rows.iter().collect()).unwrap();
        let prior = tail_prior(&split, 1.0);
        assert_eq!(prior.rho, vec![0.0, 6.0]);
        // Strict exceedance: values equal to the reference do not count.
        assert_eq!(prior.p_q90[0], 0.0);
    }
}
