use std::fs;
use std::path::PathBuf;

use vsdet::experiment::{Experiment, ExperimentConfig};
use vsdet::geometry::{ImageId, Label};
use vsdet::io;
use vsdet::mssvm::{build_constraints, train_cutting_plane};
use vsdet::pool::{Pool, Split};
use vsdet::strategies::Strategy;
use vsdet::synth::{generate_synthetic, SyntheticConfig};
use vsdet::Error;

fn golden(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/golden")
        .join(name)
}

fn small(noise_level: f64) -> SyntheticConfig {
    SyntheticConfig {
        dim: 6,
        n_train: 20,
        n_test: 10,
        proposals_per_image: 8,
        noise_level,
        positive_fraction: 0.8,
        ..SyntheticConfig::default()
    }
}

#[test]
fn golden_two_image_file() {
    let pool = io::load_pool(golden("two_images.pool")).unwrap();
    assert_eq!(pool.dim(), 3);
    assert_eq!(pool.len(), 2);
    assert_eq!(pool.train_ids(), vec![ImageId(0)]);
    assert_eq!(pool.test_ids(), vec![ImageId(7)]);
    assert_eq!(pool.annotated(), &[ImageId(0)]);

    let a = pool.image(ImageId(0)).unwrap();
    assert_eq!(a.label, Label::Positive);
    assert_eq!(a.proposals.len(), 3);
    assert_eq!(a.gt_boxes.len(), 1);
    // the full-image window was listed second and is moved to the front
    assert_eq!(a.proposals[0].feature, vec![0.0, 1.0, 0.5]);
    assert_eq!(a.proposals[1].feature, vec![1.5, -0.25, 2.0]);

    let b = pool.image(ImageId(7)).unwrap();
    assert_eq!(b.label, Label::Negative);
    assert!(b.gt_boxes.is_empty());
    assert_eq!(b.proposals[1].feature, vec![1e-3, -250.0, 0.0]);
    assert_eq!(pool.split(ImageId(7)).unwrap(), Split::Test);
}

#[test]
fn generation_is_byte_identical_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.pool"), dir.path().join("b.pool"));
    io::save_pool(&generate_synthetic(&small(0.3)).unwrap(), &a).unwrap();
    io::save_pool(&generate_synthetic(&small(0.3)).unwrap(), &b).unwrap();
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let other = dir.path().join("c.pool");
    let cfg = SyntheticConfig {
        planted_weight_seed: 1,
        ..small(0.3)
    };
    io::save_pool(&generate_synthetic(&cfg).unwrap(), &other).unwrap();
    assert_ne!(fs::read(&a).unwrap(), fs::read(&other).unwrap());
}

#[test]
fn noise_free_pool_is_separable_by_the_cutting_plane_trainer() {
    let pool = generate_synthetic(&small(0.0)).unwrap();
    let cs = build_constraints(&pool, &pool.train_ids()).unwrap();
    let model = train_cutting_plane(&cs, 0.0, 1e-9).unwrap();
    let worst = cs
        .iter()
        .map(|c| c.signed_margin(&model.w))
        .fold(f64::INFINITY, f64::min);
    assert!(worst >= 1.0 - 1e-6, "min margin {worst}");
}

#[test]
fn extreme_finite_values_survive_a_round_trip() {
    let mut pool = generate_synthetic(&SyntheticConfig {
        dim: 4,
        n_train: 2,
        n_test: 1,
        proposals_per_image: 3,
        ..SyntheticConfig::default()
    })
    .unwrap();
    let values = [f64::MAX, f64::MIN_POSITIVE, -5e-324, 0.1 + 0.2];
    let mut images: Vec<_> = pool.entries().map(|(i, s)| (i.clone(), s)).collect();
    images[0].0.proposals[1].feature = values.to_vec();
    pool = Pool::new(4, images).unwrap();
    let dir = tempfile::tempdir().unwrap();
    for sidecar in [false, true] {
        let path = dir.path().join(format!("x{sidecar}.pool"));
        if sidecar {
            io::save_pool_with_sidecar(&pool, &path).unwrap();
        } else {
            io::save_pool(&pool, &path).unwrap();
        }
        let back = io::load_pool(&path).unwrap();
        assert_eq!(back, pool);
        assert_eq!(back.images()[0].proposals[1].feature, values);
    }
}

#[test]
fn resuming_after_query_three_matches_a_straight_run() {
    let pool = generate_synthetic(&small(0.4)).unwrap();
    let mut cfg = ExperimentConfig::default();
    cfg.query.strategy = Strategy::Apt;
    cfg.budget = 9;
    let mut straight = Experiment::new(&cfg, &pool, 3).unwrap();
    straight.run_to_end().unwrap();
    let straight = straight.into_seed_run();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.json");
    let mut e = Experiment::new(&cfg, &pool, 3).unwrap();
    while e.state().query_log.len() < 3 {
        e.step().unwrap();
    }
    io::checkpoint(e.state(), &path).unwrap();
    let mut resumed = Experiment::from_state(&pool, io::resume(&path).unwrap()).unwrap();
    resumed.run_to_end().unwrap();
    let resumed = resumed.into_seed_run();
    assert_eq!(resumed.curve, straight.curve);
    assert_eq!(resumed.query_log, straight.query_log);

    // a finished state resumes as a no-op
    let mut done = Experiment::new(&cfg, &pool, 3).unwrap();
    done.run_to_end().unwrap();
    io::checkpoint(done.state(), &path).unwrap();
    let before = io::resume(&path).unwrap();
    let mut again = Experiment::from_state(&pool, before.clone()).unwrap();
    assert!(again.is_finished());
    again.run_to_end().unwrap();
    assert_eq!(again.state(), &before);
}

#[test]
fn checkpoint_for_another_pool_is_rejected() {
    let pool = generate_synthetic(&small(0.4)).unwrap();
    let cfg = ExperimentConfig {
        budget: 4,
        ..ExperimentConfig::default()
    };
    let e = Experiment::new(&cfg, &pool, 0).unwrap();
    let other = generate_synthetic(&SyntheticConfig {
        n_train: 12,
        ..small(0.4)
    })
    .unwrap();
    let err = Experiment::from_state(&other, e.state().clone()).unwrap_err();
    assert!(matches!(err, Error::Schema(_)), "{err}");
}
