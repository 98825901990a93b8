//! Synthetic pools with a planted localization direction.
//!
//! Every proposal feature is
//!
//! ```text
//! psi = base_image + signal * q * w_planted + clutter_image * P(z) + noise * e
//! ```
//!
//! where `q` is the proposal's best IoU with the ground truth (on a negative
//! image, 1 for the full-image window and 0 elsewhere), `P` projects
//! onto the orthogonal complement of the unit planted direction, and `z`, `e`
//! are standard Gaussian draws. Overlaps are sampled so that no proposal lands
//! within `IOU_GAP` of the 0.5 threshold and positives are pairwise at least
//! `IOU_GAP` apart, so with `noise = 0` the planted direction ranks every
//! positive strictly above the barely-correct window and every negative
//! strictly below it, and puts the full image of a negative image first.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, BoundingBox, ImageId, ImageSample, Label, Proposal, DEFAULT_IOU_THRESHOLD};
use crate::linalg;
use crate::pool::{Pool, Split};
use crate::rng;

/// Minimum separation between positive overlaps, and half-width of the
/// forbidden band around the IoU threshold.
pub const IOU_GAP: f64 = 0.01;

const MAX_DRAWS: usize = 100_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub dim: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub proposals_per_image: usize,
    /// Root seed for the planted direction and every draw after it.
    pub planted_weight_seed: u64,
    pub noise_level: f64,
    pub positive_fraction: f64,
    /// Length of the planted component per unit of IoU.
    pub signal: f64,
    /// Median per-image scale of the nuisance component orthogonal to the planted direction.
    pub clutter: f64,
    pub base_scale: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            dim: 16,
            n_train: 200,
            n_test: 100,
            proposals_per_image: 50,
            planted_weight_seed: 0,
            noise_level: 0.0,
            positive_fraction: 1.0,
            signal: 5.0,
            clutter: 8.0,
            base_scale: 1.0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.dim == 0 {
            return bad("dim must be positive");
        }
        if self.n_train == 0 || self.n_test == 0 {
            return bad("n_train and n_test must be at least 1");
        }
        if self.proposals_per_image < 2 {
            return bad("proposals_per_image must be at least 2");
        }
        if !(self.noise_level >= 0.0 && self.noise_level.is_finite()) {
            return bad("noise_level must be finite and non-negative");
        }
        if !(0.0..=1.0).contains(&self.positive_fraction) {
            return bad("positive_fraction must lie in [0, 1]");
        }
        for (name, v) in [
            ("signal", self.signal),
            ("clutter", self.clutter),
            ("base_scale", self.base_scale),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and non-negative")));
            }
        }
        Ok(())
    }
}

/// Unit-norm planted direction of a configuration.
pub fn planted_direction(cfg: &SyntheticConfig) -> Vec<f64> {
    let mut rng = rng::rng_from(cfg.planted_weight_seed, &[0]);
    loop {
        let w = gaussian(&mut rng, cfg.dim);
        if linalg::norm(&w) > 1e-8 {
            return linalg::normalized(&w);
        }
    }
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn in_forbidden_band(q: f64) -> bool {
    (DEFAULT_IOU_THRESHOLD - IOU_GAP..DEFAULT_IOU_THRESHOLD + IOU_GAP).contains(&q)
}

fn random_box(rng: &mut ChaCha8Rng, w: f64, h: f64) -> BoundingBox {
    loop {
        let bw = rng.random_range(0.05..0.9) * w;
        let bh = rng.random_range(0.05..0.9) * h;
        let x = rng.random_range(0.0..(w - bw));
        let y = rng.random_range(0.0..(h - bh));
        if let Ok(b) = BoundingBox::new(x, y, x + bw, y + bh) {
            return b;
        }
    }
}

fn jittered_box(rng: &mut ChaCha8Rng, gt: &BoundingBox, spread: f64, w: f64, h: f64) -> Option<BoundingBox> {
    let [x1, y1, x2, y2] = gt.coords();
    let (gw, gh) = (gt.width(), gt.height());
    let mut d = || -> f64 { StandardNormal.sample(rng) };
    let nx1 = (x1 + spread * gw * d()).clamp(0.0, w);
    let ny1 = (y1 + spread * gh * d()).clamp(0.0, h);
    let nx2 = (x2 + spread * gw * d()).clamp(0.0, w);
    let ny2 = (y2 + spread * gh * d()).clamp(0.0, h);
    BoundingBox::new(nx1, ny1, nx2, ny2).ok()
}

struct Layout {
    boxes: Vec<BoundingBox>,
    overlaps: Vec<f64>,
}

/// Samples proposal boxes whose overlaps obey the gap rules.
fn sample_layout(rng: &mut ChaCha8Rng, n: usize, w: f64, h: f64, gt: Option<&BoundingBox>) -> Result<Layout> {
    let full = BoundingBox::new(0.0, 0.0, w, h)?;
    let overlap = |b: &BoundingBox| gt.map_or(0.0, |g| iou(b, g));
    let mut boxes = vec![full];
    let mut overlaps = vec![overlap(&full)];
    let mut draws = 0;
    while boxes.len() < n {
        draws += 1;
        if draws > MAX_DRAWS {
            return Err(Error::Config(format!(
                "could not place {n} proposals under the overlap gap rules"
            )));
        }
        let candidate = match gt {
            // the first proposal is a tight positive so every positive image has one
            Some(g) if boxes.len() == 1 => jittered_box(rng, g, 0.05, w, h),
            Some(g) if rng.random_bool(0.5) => jittered_box(rng, g, 0.25, w, h),
            _ => Some(random_box(rng, w, h)),
        };
        let Some(b) = candidate else { continue };
        let q = overlap(&b);
        if in_forbidden_band(q) {
            continue;
        }
        if q >= DEFAULT_IOU_THRESHOLD
            && overlaps
                .iter()
                .any(|&o| o >= DEFAULT_IOU_THRESHOLD && (o - q).abs() < IOU_GAP)
        {
            continue;
        }
        if gt.is_some() && boxes.len() == 1 && q < 0.6 {
            continue;
        }
        boxes.push(b);
        overlaps.push(q);
    }
    Ok(Layout { boxes, overlaps })
}

/// Generates a pool. Ids are `0..n_train` (train) followed by the test images.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<Pool> {
    cfg.validate()?;
    let planted = planted_direction(cfg);
    let project = |z: &mut Vec<f64>| {
        let c = linalg::dot(z, &planted);
        linalg::axpy(-c, &planted, z);
    };

    let mut entries = Vec::with_capacity(cfg.n_train + cfg.n_test);
    for (split, count, offset) in [(Split::Train, cfg.n_train, 0), (Split::Test, cfg.n_test, cfg.n_train)] {
        let n_pos = positives_in_split(cfg.positive_fraction, count, split);
        for k in 0..count {
            let id = (offset + k) as u32;
            let mut rng = rng::rng_from(cfg.planted_weight_seed, &[1, id as u64]);
            let label = if k < n_pos { Label::Positive } else { Label::Negative };
            let w = rng.random_range(80.0..120.0);
            let h = rng.random_range(80.0..120.0);
            let gt = match label {
                Label::Positive => {
                    let gw = rng.random_range(0.2..0.55) * w;
                    let gh = rng.random_range(0.2..0.55) * h;
                    let x = rng.random_range(0.0..(w - gw));
                    let y = rng.random_range(0.0..(h - gh));
                    vec![BoundingBox::new(x, y, x + gw, y + gh)?]
                }
                Label::Negative => Vec::new(),
            };
            let layout = sample_layout(&mut rng, cfg.proposals_per_image, w, h, gt.first())?;
            let base: Vec<f64> = gaussian(&mut rng, cfg.dim)
                .into_iter()
                .map(|v| v * cfg.base_scale)
                .collect();
            let lognormal: f64 = StandardNormal.sample(&mut rng);
            let clutter = cfg.clutter * (0.5 * lognormal).exp();
            let proposals = layout
                .boxes
                .into_iter()
                .zip(layout.overlaps)
                .enumerate()
                .map(|(k, (bbox, q))| {
                    // the full image is the correct output of a negative image
                    let q = if label == Label::Negative && k == 0 { 1.0 } else { q };
                    let mut feature = base.clone();
                    linalg::axpy(cfg.signal * q, &planted, &mut feature);
                    let mut z = gaussian(&mut rng, cfg.dim);
                    project(&mut z);
                    linalg::axpy(clutter, &z, &mut feature);
                    let e = gaussian(&mut rng, cfg.dim);
                    linalg::axpy(cfg.noise_level, &e, &mut feature);
                    Proposal { bbox, feature }
                })
                .collect();
            let img = ImageSample {
                id: ImageId(id),
                label,
                width: w,
                height: h,
                proposals,
                gt_boxes: gt,
            };
            entries.push((img, split));
        }
    }
    Pool::new(cfg.dim, entries)
}

fn positives_in_split(fraction: f64, count: usize, split: Split) -> usize {
    let n = (fraction * count as f64).round() as usize;
    // keep at least one positive test image so localization metrics are defined
    if split == Split::Test && fraction > 0.0 {
        n.max(1)
    } else {
        n
    }
}
