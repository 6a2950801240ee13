//! Benchmark suites and slice-set generation.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::bbob::{make_instance, NUM_FUNCTIONS};
use crate::error::{Error, Result};
use crate::probing::{build_probe_set_with, Counted, DatapointId, ProbeSpec, SliceSet};

/// The `(f, d, i, rep)` grid of a benchmark.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuiteSpec {
    pub functions: Vec<u32>,
    pub dimensions: Vec<u32>,
    pub instances: Vec<u32>,
    pub repetitions: u32,
}

impl Default for SuiteSpec {
    /// 24 functions x d in {2, 3, 5, 10} x instances 1..5 x 10 repetitions.
    fn default() -> Self {
        Self {
            functions: (1..=NUM_FUNCTIONS).collect(),
            dimensions: vec![2, 3, 5, 10],
            instances: (1..=5).collect(),
            repetitions: 10,
        }
    }
}

impl SuiteSpec {
    pub fn validate(&self) -> Result<()> {
        if self.functions.is_empty() || self.dimensions.is_empty() || self.instances.is_empty() || self.repetitions == 0 {
            return Err(Error::Config("suite needs functions, dimensions, instances and repetitions >= 1".into()));
        }
        if let Some(f) = self.functions.iter().find(|&&f| f == 0 || f > NUM_FUNCTIONS) {
            return Err(Error::Config(format!("function id {f} outside 1..{NUM_FUNCTIONS}")));
        }
        if let Some(d) = self.dimensions.iter().find(|&&d| d < 2) {
            return Err(Error::Config(format!("dimension {d} < 2")));
        }
        if self.instances.contains(&0) {
            return Err(Error::Config("instance ids start at 1".into()));
        }
        Ok(())
    }

    /// Every datapoint id in `(f, d, i, rep)` order.
    pub fn index(&self) -> Vec<DatapointId> {
        let mut ids = Vec::new();
        for &function_id in &self.functions {
            for &dimension in &self.dimensions {
                for &instance_id in &self.instances {
                    for repetition in 0..self.repetitions {
                        ids.push(DatapointId {
                            function_id,
                            dimension,
                            instance_id,
                            repetition,
                        });
                    }
                }
            }
        }
        ids
    }

    pub fn len(&self) -> usize {
        self.functions.len() * self.dimensions.len() * self.instances.len() * self.repetitions as usize
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Cost of building one slice set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeCost {
    pub id: DatapointId,
    pub evaluations: u64,
    pub seconds: f64,
}

/// Builds the slice set of one datapoint with its derived seed.
pub fn generate_one(id: DatapointId, probe: &ProbeSpec, global_seed: u64) -> Result<(SliceSet, ProbeCost)> {
    let instance = make_instance(id.function_id, id.dimension as usize, id.instance_id)?;
    let counted = Counted::new(&instance);
    let start = Instant::now();
    let set = build_probe_set_with(&counted, probe, id.seed(global_seed), id)?;
    let seconds = start.elapsed().as_secs_f64();
    Ok((
        set,
        ProbeCost {
            id,
            evaluations: counted.calls(),
            seconds,
        },
    ))
}

/// Slice sets for every datapoint of `suite`, in index order.
pub fn generate_dataset(suite: &SuiteSpec, probe: &ProbeSpec, global_seed: u64) -> Result<(Vec<SliceSet>, Vec<ProbeCost>)> {
    suite.validate()?;
    let mut sets = Vec::with_capacity(suite.len());
    let mut costs = Vec::with_capacity(suite.len());
    for id in suite.index() {
        let (set, cost) = generate_one(id, probe, global_seed)?;
        sets.push(set);
        costs.push(cost);
    }
    Ok((sets, costs))
}
