//! A constructed two-solver benchmark with known ground truth.
//!
//! Each solver specialises in one function family: on its own family its
//! ERT is `50 d (1 + 0.05 f)`, the other solver needs `4 + (f mod 5) + d`
//! times as many evaluations. Optional cap injection marks entries as
//! never successful, independently with a fixed rate; a row never loses
//! both entries.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::ErtRecord;
use crate::seed::{mix, open01, stream, tag};

pub const SMOOTH_SOLVER: &str = "smooth-specialist";
pub const RUGGED_SOLVER: &str = "rugged-specialist";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    /// Functions on which the first solver is best (isotropic, low frequency).
    pub smooth_family: Vec<u32>,
    /// Functions on which the second solver is best (high-frequency multimodal).
    pub rugged_family: Vec<u32>,
    pub dimensions: Vec<u32>,
    pub cap_injection_rate: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            smooth_family: vec![1, 2, 10, 14],
            rugged_family: vec![3, 15, 16, 23],
            dimensions: vec![2, 3],
            cap_injection_rate: 0.0,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn functions(&self) -> Vec<u32> {
        let mut f: Vec<u32> = self.smooth_family.iter().chain(&self.rugged_family).copied().collect();
        f.sort_unstable();
        f
    }

    pub fn validate(&self) -> Result<()> {
    if !(0.0..=1.0).contains(&self.cap_injection_rate) {
        return Err(Error::Config(format!(
            "cap injection rate {} outside [0, 1]",
            self.cap_injection_rate
        )));
    }
    if self.smooth_family.iter().any(|f| self.rugged_family.contains(f)) {
        return Err(Error::Config("a function cannot belong to both families".into()));
    }
    if self.functions().is_empty() || self.dimensions.is_empty() {
        return Err(Error::Config("synthetic spec needs functions and dimensions".into()));
    }
        Ok(())
    }

    /// Index of the specialist solver for `function_id`.
    pub fn specialist(&self, function_id: u32) -> Option<usize> {
        if self.smooth_family.contains(&function_id) {
            Some(0)
        } else if self.rugged_family.contains(&function_id) {
            Some(1)
        } else {
            None
        }
    }
}

pub fn specialist_ert(function_id: u32, dimension: u32) -> f64 {
    50.0 * dimension as f64 * (1.0 + 0.05 * function_id as f64)
}

pub fn other_factor(function_id: u32, dimension: u32) -> f64 {
    (4 + function_id % 5 + dimension) as f64
}

/// ERT records for every `(f, d)` of the spec, both solvers per problem.
pub fn synthetic_ert(spec: &SyntheticSpec) -> Result<Vec<ErtRecord>> {
    spec.validate()?;
    let mut rng = stream(mix(&[tag::SYNTHETIC, spec.seed]));
    let names = [SMOOTH_SOLVER, RUGGED_SOLVER];
    let mut out = Vec::new();
    for f in spec.functions() {
        let best = spec.specialist(f).expect("member of a family");
        for &d in &spec.dimensions {
            let base = specialist_ert(f, d);
            let ert = [0, 1].map(|a| if a == best { base } else { base * other_factor(f, d) });
            let mut failed = [0, 1].map(|_| open01(&mut rng) < spec.cap_injection_rate);
            if failed.iter().all(|&x| x) {
                failed[1] = false;
            }
            for a in 0..2 {
                out.push(ErtRecord {
                    function_id: f,
                    dimension: d,
                    algorithm: names[a].to_string(),
                    ert: (!failed[a]).then_some(ert[a]),
                });
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labels::LabelTable;

    #[test]
    fn default_spec_separates_families() {
        let spec = SyntheticSpec::default();
        let labels = LabelTable::from_records(&synthetic_ert(&spec).unwrap()).unwrap();
        assert_eq!(labels.rows.len(), 16);
        for row in &labels.rows {
            assert_eq!(row.vbs, spec.specialist(row.function_id).unwrap());
            assert!(row.capped.iter().all(|c| !c));
        }
    }

    #[test]
    fn injection_count_is_binomial() {
        let spec = SyntheticSpec {
            smooth_family: (1..=10).collect(),
            rugged_family: (11..=20).collect(),
            dimensions: vec![2, 3],
            cap_injection_rate: 0.1,
            seed: 5,
        };
        let recs = synthetic_ert(&spec).unwrap();
        assert_eq!(recs.len(), 80);
        let injected = recs.iter().filter(|r| r.ert.is_none()).count();
        // Binomial(80, 0.1): mean 8, sd 2.68; allow three standard deviations.
        assert!((1..=16).contains(&injected), "{injected}");
        let labels = LabelTable::from_records(&recs).unwrap();
        let cats = labels.rows.iter().flat_map(|r| labels.catastrophe(r)).filter(|&c| c).count();
        assert_eq!(cats, injected);
    }
}
