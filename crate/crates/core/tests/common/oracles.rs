use std::collections::BTreeMap;

use rand::seq::IteratorRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vsdet::geometry::{iou, BoundingBox, ImageId, ImageSample, Label, Proposal};
use vsdet::mssvm::{build_constraints, train_sgd, Model, SgdParams};
use vsdet::pool::{Pool, Split};
use vsdet::strategies::Strategy;
use vsdet::synth::{generate_synthetic, SyntheticConfig};

pub fn small_pool(seed: u64) -> Pool {
    noisy_pool(seed, 0.4)
}

pub fn noisy_pool(seed: u64, noise_level: f64) -> Pool {
    generate_synthetic(&SyntheticConfig {
        dim: 5,
        n_train: 20,
        n_test: 4,
        proposals_per_image: 8,
        planted_weight_seed: seed,
        noise_level,
        positive_fraction: 0.8,
        ..Default::default()
    })
    .unwrap()
}

/// Pool with a few random positive annotations and a model trained on them.
pub fn annotated_setup(seed: u64) -> (Pool, Model) {
    let mut pool = small_pool(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let positives: Vec<ImageId> = pool
        .train_ids()
        .into_iter()
        .filter(|&id| pool.image(id).unwrap().is_positive())
        .collect();
    for id in positives.into_iter().choose_multiple(&mut rng, 3) {
        pool.annotate(id).unwrap();
    }
    let cs = build_constraints(&pool, pool.annotated()).unwrap();
    let model = train_sgd(
        &cs,
        &SgdParams {
            lambda: 0.01,
            epochs: 5,
            seed,
            eta0: 0.1,
        },
    )
    .unwrap();
    (pool, model)
}

pub fn hat_scores(model: &Model, img: &ImageSample) -> Vec<f64> {
    img.proposals
        .iter()
        .map(|p| p.feature.iter().zip(&model.w_hat).map(|(a, b)| a * b).sum())
        .collect()
}

pub fn literal_ent(s: &[f64]) -> f64 {
    let z: f64 = s.iter().map(|v| v.exp()).sum();
    -s.iter().map(|v| v.exp() / z).map(|p| p * p.ln()).sum::<f64>()
}

pub fn literal_mm(s: &[f64]) -> f64 {
    let z: f64 = s.iter().map(|v| v.exp()).sum();
    s.iter().map(|v| v.exp() / z).fold(0.0, f64::max)
}

pub fn sorted_desc(s: &[f64]) -> Vec<f64> {
    let mut v = s.to_vec();
    v.sort_by(|a, b| b.partial_cmp(a).unwrap());
    v
}

/// Literal MSM: set A, Gaussian kernel with the median bandwidth, case split.
pub fn literal_msm(pool: &Pool, model: &Model, cands: &[ImageId]) -> BTreeMap<ImageId, f64> {
    let score = |f: &[f64]| f.iter().zip(&model.w_hat).map(|(a, b)| a * b).sum::<f64>();
    let mut a_set: Vec<Vec<f64>> = Vec::new();
    let mut annotated = pool.annotated().to_vec();
    annotated.sort();
    for id in annotated {
        let img = pool.image(id).unwrap();
        let covers: Vec<usize> = img
            .gt_boxes
            .iter()
            .map(|g| {
                let ious: Vec<f64> = img.proposals.iter().map(|p| iou(&p.bbox, g)).collect();
                let m = ious.iter().copied().fold(f64::MIN, f64::max);
                ious.iter().position(|&v| v == m).unwrap()
            })
            .collect();
        let top = covers
            .iter()
            .copied()
            .max_by(|&a, &b| {
                score(&img.proposals[a].feature)
                    .partial_cmp(&score(&img.proposals[b].feature))
                    .unwrap()
                    .then(b.cmp(&a))
            })
            .unwrap();
        a_set.push(img.proposals[top].feature.clone());
    }
    let best_two = |img: &ImageSample| {
        let s = hat_scores(model, img);
        let mut idx: Vec<usize> = (0..s.len()).collect();
        idx.sort_by(|&x, &y| s[y].partial_cmp(&s[x]).unwrap().then(x.cmp(&y)));
        (idx[0], idx[1])
    };
    let dist = |u: &[f64], v: &[f64]| u.iter().zip(v).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let mut ds = Vec::new();
    for &id in cands {
        let img = pool.image(id).unwrap();
        let (b, _) = best_two(img);
        for a in &a_set {
            ds.push(dist(a, &img.proposals[b].feature));
        }
    }
    ds.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = ds.len();
    let sigma = if n % 2 == 1 {
        ds[n / 2]
    } else {
        (ds[n / 2 - 1] + ds[n / 2]) / 2.0
    };
    let mut out = BTreeMap::new();
    for &id in cands {
        let img = pool.image(id).unwrap();
        let (b, c) = best_two(img);
        let fb = &img.proposals[b].feature;
        let kernel: Vec<f64> = a_set
            .iter()
            .map(|a| (-dist(a, fb).powi(2) / (2.0 * sigma * sigma)).exp())
            .collect();
        let kmax = kernel.iter().copied().fold(f64::MIN, f64::max);
        let a = &a_set[kernel.iter().position(|&k| k == kmax).unwrap()];
        let (sb, sc, sa) = (score(fb), score(&img.proposals[c].feature), score(a));
        out.insert(id, if sb >= sa { sb - sc } else { sa - sb });
    }
    out
}

pub fn argbest(values: &BTreeMap<ImageId, f64>, maximize: bool) -> ImageId {
    let mut best: Option<(ImageId, f64)> = None;
    for (&id, &v) in values {
        let better = match best {
            None => true,
            Some((_, b)) => (maximize && v > b) || (!maximize && v < b),
        };
        if better {
            best = Some((id, v));
        }
    }
    best.unwrap().0
}

pub fn positive_candidates(pool: &Pool) -> Vec<ImageId> {
    pool.unannotated()
        .into_iter()
        .filter(|&id| pool.image(id).unwrap().is_positive())
        .collect()
}

pub fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BoundingBox {
    BoundingBox::new(x1, y1, x2, y2).unwrap()
}

/// 100x100 positive image with ground truth (10,10,50,50); proposal 1 is the
/// ground truth itself, the others lie elsewhere.
pub fn hand_image(id: u32, features: &[[f64; 2]]) -> ImageSample {
    let mut proposals = vec![Proposal {
        bbox: bx(0.0, 0.0, 100.0, 100.0),
        feature: features[0].to_vec(),
    }];
    for (k, f) in features.iter().enumerate().skip(1) {
        let bbox = if k == 1 {
            bx(10.0, 10.0, 50.0, 50.0)
        } else {
            let o = 50.0 + k as f64;
            bx(o, o, o + 10.0, o + 10.0)
        };
        proposals.push(Proposal {
            bbox,
            feature: f.to_vec(),
        });
    }
    ImageSample {
        id: ImageId(id),
        label: Label::Positive,
        width: 100.0,
        height: 100.0,
        proposals,
        gt_boxes: vec![bx(10.0, 10.0, 50.0, 50.0)],
    }
}

pub fn hand_pool(images: Vec<ImageSample>) -> Pool {
    let mut entries: Vec<(ImageSample, Split)> = images.into_iter().map(|i| (i, Split::Train)).collect();
    entries.push((hand_image(99, &[[0.0, 0.0], [1.0, 0.0]]), Split::Test));
    Pool::new(2, entries).unwrap()
}

/// Selection each score-based strategy should make, from the literal formulas.
pub fn literal_selections(pool: &Pool, model: &Model, cands: &[ImageId]) -> Vec<(Strategy, ImageId)> {
    let per_image = |f: &dyn Fn(&[f64]) -> f64| -> BTreeMap<ImageId, f64> {
        cands
            .iter()
            .map(|&id| (id, f(&hat_scores(model, pool.image(id).unwrap()))))
            .collect()
    };
    vec![
        (Strategy::Ent, argbest(&per_image(&literal_ent), true)),
        (Strategy::Mm, argbest(&per_image(&literal_mm), false)),
        (
            Strategy::Ms,
            argbest(
                &per_image(&|s| {
                    let d = sorted_desc(s);
                    d[0] - d[1]
                }),
                false,
            ),
        ),
        (
            Strategy::Sm,
            argbest(&per_image(&|s| s.iter().map(|v| v.abs()).fold(0.0, f64::max)), false),
        ),
        (Strategy::Msm, argbest(&literal_msm(pool, model, cands), false)),
    ]
}
