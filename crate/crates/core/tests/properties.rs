use std::collections::{BTreeMap, BTreeSet};

use proptest::prelude::*;

use geoprobe::dataset::SuiteSpec;
use geoprobe::evaluation::{make_split, statistics, Protocol};
use geoprobe::labels::{
    compute_ert, compute_relert, identify_sbs, impute_par10, tail_prior, Entry, LabelTable, RunRecord, SbsCriterion,
    TailPrior, TrainingSplit,
};
use geoprobe::model::{init_parameters, ModelParams};
use geoprobe::probing::normalize_slice;
use geoprobe::seed::stream;
use geoprobe::selector::{select, SelectionMode};

fn suite() -> impl Strategy<Value = SuiteSpec> {
    (
        proptest::sample::subsequence((1u32..=24).collect::<Vec<_>>(), 1..5),
        proptest::sample::subsequence(vec![2u32, 3, 5, 10], 1..3),
        1u32..7,
        1u32..3,
    )
        .prop_map(|(functions, dimensions, n_inst, repetitions)| SuiteSpec {
            functions,
            dimensions,
            instances: (1..=n_inst).collect(),
            repetitions,
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn splits_partition_and_never_leak_groups(s in suite(), seed in any::<u64>(), p in 0usize..3) {
        let protocol = [Protocol::Lio, Protocol::Random, Protocol::Lpo][p];
        let index = s.index();
        let plan = make_split(protocol, &index, seed).unwrap();
        let mut seen = BTreeMap::new();
        for (k, fold) in plan.folds.iter().enumerate() {
            prop_assert!(!fold.test.is_empty());
            let train: BTreeSet<_> = fold.train.iter().copied().collect();
            prop_assert_eq!(train.len() + fold.test.len(), index.len());
            for id in &fold.test {
                prop_assert!(!train.contains(id));
                prop_assert!(seen.insert(*id, k).is_none(), "{:?} tested twice", id);
            }
            let test_groups: BTreeSet<_> = fold.test.iter().map(|id| id.group()).collect();
            prop_assert!(fold.train.iter().all(|id| !test_groups.contains(&id.group())));
            match protocol {
                Protocol::Lpo => {
                    let f: BTreeSet<_> = fold.test.iter().map(|id| id.function_id).collect();
                    prop_assert_eq!(f.len(), 1);
                    prop_assert!(fold.train.iter().all(|id| !f.contains(&id.function_id)));
                }
                Protocol::Lio => {
                    // Held-out instances leave their problems represented in training.
                    if s.instances.len() >= 2 {
                        let train_problems: BTreeSet<_> = fold.train.iter().map(|id| id.problem()).collect();
                        prop_assert!(fold.test.iter().all(|id| train_problems.contains(&id.problem())));
                    }
                }
                Protocol::Random => {}
            }
        }
        prop_assert_eq!(seen.len(), index.len());
    }

    #[test]
    fn normalized_slices_stay_in_unit_interval(
        raw in proptest::collection::vec(-1e6f64..1e6, 1..64),
        mask_bits in any::<u64>(),
    ) {
        let mask: Vec<bool> = (0..raw.len()).map(|i| mask_bits >> (i % 64) & 1 == 1).collect();
        let (x, range, iqr) = normalize_slice(&raw, &mask);
        prop_assert!(range >= iqr && iqr >= 0.0);
        let valid: Vec<f64> = x.iter().zip(&mask).filter(|(_, &m)| m).map(|(&v, _)| v).collect();
        for (v, m) in x.iter().zip(&mask) {
            if !m { prop_assert_eq!(*v, 0.5); }
            prop_assert!((0.0..=1.0).contains(v));
        }
        let distinct: BTreeSet<u64> = raw.iter().zip(&mask).filter(|(_, &m)| m).map(|(v, _)| v.to_bits()).collect();
        if distinct.len() >= 2 {
            prop_assert_eq!(valid.iter().copied().fold(f64::INFINITY, f64::min), 0.0);
            prop_assert_eq!(valid.iter().copied().fold(f64::NEG_INFINITY, f64::max), 1.0);
        } else {
            prop_assert!(valid.iter().all(|&v| v == 0.5));
        }
    }

    #[test]
    fn normalization_is_exactly_affine_invariant_on_integer_grids(
        raw in proptest::collection::vec(-1000i32..1000, 2..64),
        a in 1i32..50,
        b in -1000i32..1000,
        mask_bits in any::<u64>(),
    ) {
        // Integer data and coefficients keep every intermediate exact.
        let mask: Vec<bool> = (0..raw.len()).map(|i| mask_bits >> (i % 64) & 1 == 1).collect();
        let r: Vec<f64> = raw.iter().map(|&v| v as f64).collect();
        let t: Vec<f64> = raw.iter().map(|&v| (a * v + b) as f64).collect();
        let (x, range, iqr) = normalize_slice(&r, &mask);
        let (y, range2, iqr2) = normalize_slice(&t, &mask);
        prop_assert_eq!(&x, &y);
        prop_assert_eq!(range2, a as f64 * range);
        prop_assert!((iqr2 - a as f64 * iqr).abs() <= 1e-9 * (1.0 + iqr2.abs()));
        let n: Vec<f64> = raw.iter().map(|&v| (-a * v + b) as f64).collect();
        let (z, _, _) = normalize_slice(&n, &mask);
        for ((xv, zv), m) in x.iter().zip(&z).zip(&mask) {
            if *m && range > 0.0 {
                prop_assert!((zv - (1.0 - xv)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn argmin_is_shift_invariant(
        eighths in proptest::collection::vec(-400i32..400, 2..13),
        shift in -4000i32..4000,
        logits in proptest::collection::vec(-3.0f64..3.0, 13),
        rho in proptest::collection::vec(0u8..4, 13),
        mode in 0usize..4,
    ) {
        // Multiples of 1/8 keep `y + c` exact, so ties are preserved too.
        let a = eighths.len();
        let y: Vec<f64> = eighths.iter().map(|&v| v as f64 / 8.0).collect();
        let ys: Vec<f64> = y.iter().map(|v| v + shift as f64 / 8.0).collect();
        let prior = TailPrior::from_rates(rho[..a].iter().map(|&r| r as f64 / 8.0).collect(), vec![0.0; a], 1.0);
        let mode = SelectionMode::ALL[mode];
        let base = select(&y, Some(&logits[..a]), &prior, 64.0, mode).unwrap();
        let moved = select(&ys, Some(&logits[..a]), &prior, 64.0, mode).unwrap();
        prop_assert_eq!(base.chosen, moved.chosen);
    }
}

#[derive(Debug, Clone)]
struct Cell {
    evaluations: Vec<u64>,
    successes: Vec<bool>,
}

fn table_strategy() -> impl Strategy<Value = Vec<Vec<Cell>>> {
    (1usize..6, 2usize..5).prop_flat_map(|(rows, algs)| {
        let cell = (1usize..5).prop_flat_map(|runs| {
            (
                proptest::collection::vec(1u64..10_000, runs),
                proptest::collection::vec(proptest::bool::weighted(0.6), runs),
            )
                .prop_map(|(evaluations, successes)| Cell { evaluations, successes })
        });
        proptest::collection::vec(proptest::collection::vec(cell, algs), rows)
    })
}

/// Direct transcription of the label definitions on plain floats.
fn brute_force(table: &[Vec<Cell>]) -> Option<(Vec<Vec<f64>>, f64)> {
    let ert: Vec<Vec<Option<f64>>> = table
        .iter()
        .map(|row| {
            row.iter()
                .map(|c| {
                    let s = c.successes.iter().filter(|&&s| s).count();
                    (s > 0).then(|| c.evaluations.iter().sum::<u64>() as f64 / s as f64)
                })
                .collect()
        })
        .collect();
    let mut rel = Vec::new();
    for row in &ert {
        let best = row.iter().flatten().copied().reduce(f64::min)?;
        rel.push(row.iter().map(|e| e.map(|v| v / best)).collect::<Vec<_>>());
    }
    let max = rel.iter().flatten().flatten().copied().reduce(f64::max)?;
    let cap = 10.0 * max;
    Some((rel.iter().map(|r| r.iter().map(|e| e.unwrap_or(cap)).collect()).collect(), cap))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn labels_match_brute_force(table in table_strategy()) {
        let oracle = brute_force(&table);
        let mut rel = Vec::new();
        let mut defined = true;
        for row in &table {
            let ert: Vec<Option<f64>> = row
                .iter()
                .map(|c| {
                    let runs: Vec<RunRecord> = c
                        .evaluations
                        .iter()
                        .zip(&c.successes)
                        .map(|(&e, &s)| RunRecord { function_id: 1, dimension: 2, instance_id: 1, algorithm: "a".into(), evaluations: e, success: s })
                        .collect();
                    compute_ert(&runs).unwrap()
                })
                .collect();
            match compute_relert(&ert) {
                Ok(r) => rel.push(r.into_iter().map(Entry::from_relert).collect::<Vec<_>>()),
                Err(_) => defined = false,
            }
        }
        match oracle {
            None => prop_assert!(!defined || impute_par10(&rel).is_err()),
            Some((values, cap)) => {
                prop_assert!(defined);
                let (capped, c) = impute_par10(&rel).unwrap();
                prop_assert_eq!(c, cap);
                let got: Vec<Vec<f64>> = capped.iter().map(|r| r.iter().map(|e| e.value().unwrap()).collect()).collect();
                prop_assert_eq!(&got, &values);
                let (again, c2) = impute_par10(&capped).unwrap();
                prop_assert_eq!(c2, c);
                prop_assert_eq!(again, capped);
                for row in &got {
                    prop_assert_eq!(row.iter().copied().fold(f64::INFINITY, f64::min), 1.0);
                }
            }
        }
    }
}

#[test]
fn tail_prior_and_sbs_on_a_hand_table() {
    let rows: Vec<((u32, u32), Vec<Option<f64>>)> = vec![
        ((1, 2), vec![Some(10.0), Some(20.0), None]),
        ((2, 2), vec![Some(40.0), Some(20.0), Some(10.0)]),
        ((3, 2), vec![Some(10.0), None, Some(30.0)]),
    ];
    let table = LabelTable::from_ert(vec!["a".into(), "b".into(), "c".into()], &rows).unwrap();
    assert_eq!(table.cap, 40.0);
    let split = TrainingSplit::new(table.rows.iter().collect()).unwrap();
    let sbs = identify_sbs(&split, SbsCriterion::Mean);
    assert_eq!(sbs.algorithm, 0);
    let prior = tail_prior(&split, sbs.q90);
    assert_eq!(prior.p_cap, vec![0.0, 1.0 / 3.0, 1.0 / 3.0]);
    assert_eq!(statistics(&[1.0, 4.0, 1.0]).unwrap().median, 1.0);
}

#[test]
fn aggregation_is_permutation_invariant() {
    use rand::seq::SliceRandom;
    use rand::Rng;
    let params: ModelParams = init_parameters(12, 3).unwrap();
    let mut rng = stream(99);
    let dim = params.architecture.conditioned_dim();
    let z: Vec<Vec<f64>> = (0..5).map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let base = params.aggregate(&z, 3).unwrap();
    assert_eq!(base.len(), 145);
    for _ in 0..100 {
        let mut p = z.clone();
        p.shuffle(&mut rng);
        let other = params.aggregate(&p, 3).unwrap();
        let dev = base.iter().zip(&other).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(dev < 1e-9, "permutation moved Z by {dev}");
    }
}
