use std::collections::BTreeSet;

use vsdet::eval::MetricKind;
use vsdet::experiment::{compare_strategies, full_supervision, run_experiment, ClassPool, ExperimentConfig};
use vsdet::io;
use vsdet::pool::Pool;
use vsdet::strategies::Strategy;
use vsdet::synth::{generate_synthetic, SyntheticConfig};

fn pool() -> Pool {
    pool_with(0.8)
}

fn pool_with(positive_fraction: f64) -> Pool {
    generate_synthetic(&SyntheticConfig {
        dim: 6,
        n_train: 24,
        n_test: 12,
        proposals_per_image: 8,
        noise_level: 0.5,
        positive_fraction,
        ..SyntheticConfig::default()
    })
    .unwrap()
}

#[test]
fn random_runs_are_distinct_reproducible_and_averaged() {
    let pool = pool();
    let cfg = ExperimentConfig {
        budget: 10,
        seeds: (0..5).collect(),
        query: vsdet::strategies::QueryConfig {
            strategy: Strategy::Random,
            ..Default::default()
        },
        ..ExperimentConfig::default()
    };
    let a = run_experiment(&cfg, &pool).unwrap();
    let b = run_experiment(&cfg, &pool).unwrap();
    assert_eq!(io::run_record_json(&a).unwrap(), io::run_record_json(&b).unwrap());
    let logs: BTreeSet<Vec<_>> = a
        .runs
        .iter()
        .map(|r| r.query_log.iter().flat_map(|q| q.chosen.clone()).collect())
        .collect();
    assert_eq!(logs.len(), 5);
    for (k, p) in a.mean_curve.points.iter().enumerate() {
        let mean = a.runs.iter().map(|r| r.curve.points[k].metric_value).sum::<f64>() / 5.0;
        assert!((p.metric_value - mean).abs() < 1e-12);
    }
}

#[test]
fn query_logs_are_distinct_and_grow_by_batch() {
    let pool = pool();
    for batch in [1, 3] {
        let cfg = ExperimentConfig {
            budget: 14,
            batch,
            query: vsdet::strategies::QueryConfig {
                strategy: Strategy::Sm,
                ..Default::default()
            },
            ..ExperimentConfig::default()
        };
        let run = &run_experiment(&cfg, &pool).unwrap().runs[0];
        let mut seen: BTreeSet<_> = run.seed_set.iter().copied().collect();
        for q in &run.query_log {
            assert_eq!(q.n_annotated_before, seen.len());
            assert!(q.chosen.len() <= batch);
            for id in &q.chosen {
                assert!(seen.insert(*id), "{id} queried twice");
            }
        }
        assert!(run.query_log.len() <= cfg.budget);
        assert!(seen.len() <= cfg.budget);
        run.audit().unwrap();
    }
}

#[test]
fn annotating_everything_reaches_full_supervision() {
    // queries only draw positive images, so every training image must be one
    let pool = pool_with(1.0);
    let cfg = ExperimentConfig {
        budget: 24,
        batch: 4,
        metric: MetricKind::Accuracy,
        ..ExperimentConfig::default()
    };
    let record = run_experiment(&cfg, &pool).unwrap();
    let last = record.runs[0].curve.points.last().unwrap();
    assert_eq!(last.n_annotated, 24);
    assert_eq!(last.pct_of_train, 1.0);
    let full = full_supervision(&cfg, &pool, 0).unwrap();
    // same constraint set, different SGD shuffles: one test image of slack
    assert!(
        (last.metric_value - full).abs() <= 1.0 / 12.0 + 1e-12,
        "{} vs {full}",
        last.metric_value
    );
}

#[test]
fn single_strategy_single_class_gives_one_cell() {
    let pool = pool();
    let classes = [ClassPool {
        name: "only".into(),
        pool: &pool,
    }];
    let cmp = compare_strategies(&ExperimentConfig::default(), &[Strategy::Random], &classes, 0.5).unwrap();
    assert_eq!(cmp.table.strategies, vec!["RANDOM".to_string()]);
    assert_eq!(cmp.table.rows.len(), 1);
    assert_eq!(cmp.table.rows[0].1.len(), 1);
    assert_eq!(cmp.table.mean_row(), cmp.table.rows[0].1);
}

#[test]
fn mean_row_is_the_arithmetic_mean_of_class_rows() {
    let pools: Vec<Pool> = (0..3)
        .map(|s| {
            generate_synthetic(&SyntheticConfig {
                dim: 5,
                n_train: 20,
                n_test: 10,
                proposals_per_image: 6,
                planted_weight_seed: s,
                noise_level: 0.5,
                ..SyntheticConfig::default()
            })
            .unwrap()
        })
        .collect();
    let classes: Vec<ClassPool<'_>> = pools
        .iter()
        .enumerate()
        .map(|(k, pool)| ClassPool {
            name: format!("c{k}"),
            pool,
        })
        .collect();
    let cmp = compare_strategies(
        &ExperimentConfig::default(),
        &[Strategy::Random, Strategy::Ent, Strategy::Ms],
        &classes,
        0.3,
    )
    .unwrap();
    let mean = cmp.table.mean_row();
    for j in 0..3 {
        let want = cmp.table.rows.iter().map(|(_, v)| v[j]).sum::<f64>() / 3.0;
        assert!((mean[j] - want).abs() < 1e-12);
    }
}
