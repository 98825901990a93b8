//! Score-based rules: SM, MSM and the ENT, MM, MS baselines.
//!
//! All of them read the normalized weight `w_hat`, so rescaling `w` never
//! changes a selection.

use super::{Bandwidth, QueryContext};
use crate::error::{Error, Result};
use crate::geometry::{iou, ImageId, ImageSample};
use crate::linalg::{dot, sq_dist};
use crate::mssvm::Model;

fn scores(model: &Model, img: &ImageSample) -> Result<Vec<f64>> {
    (0..img.proposals.len()).map(|y| model.score_hat(img, y)).collect()
}

fn require_two(img: &ImageSample) -> Result<()> {
    if img.proposals.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "image {} needs at least two proposals",
            img.id
        )));
    }
    Ok(())
}

/// Largest |w_hat . psi| over the image's proposals (smallest wins).
pub fn sm_score(model: &Model, img: &ImageSample) -> Result<f64> {
    Ok(scores(model, img)?.into_iter().map(f64::abs).fold(0.0, f64::max))
}

/// Entropy of a softmax over `s`, shifted by the maximum.
pub fn entropy(s: &[f64]) -> f64 {
    let m = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = s.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    let mean_shifted: f64 = e.iter().zip(s).map(|(ek, sk)| ek * (sk - m)).sum::<f64>() / z;
    (z.ln() - mean_shifted).max(0.0)
}

/// Largest softmax probability over `s`.
pub fn softmax_max(s: &[f64]) -> f64 {
    let m = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    1.0 / s.iter().map(|v| (v - m).exp()).sum::<f64>()
}

/// Entropy of the window distribution `exp(w_hat . psi)` (largest wins).
pub fn ent_score(model: &Model, img: &ImageSample) -> Result<f64> {
    require_two(img)?;
    Ok(entropy(&scores(model, img)?))
}

/// Largest window probability (smallest wins).
pub fn mm_score(model: &Model, img: &ImageSample) -> Result<f64> {
    require_two(img)?;
    Ok(softmax_max(&scores(model, img)?))
}

/// Indices of the best and second-best windows, ties to the lower index.
fn top_two(s: &[f64]) -> (usize, usize) {
    let mut b = 0;
    for y in 1..s.len() {
        if s[y] > s[b] {
            b = y;
        }
    }
    let mut c = if b == 0 { 1 } else { 0 };
    for y in 0..s.len() {
        if y != b && s[y] > s[c] {
            c = y;
        }
    }
    (b, c)
}

/// Gap between the two best window scores (smallest wins).
pub fn ms_margin(model: &Model, img: &ImageSample) -> Result<f64> {
    require_two(img)?;
    let s = scores(model, img)?;
    let (b, c) = top_two(&s);
    Ok(s[b] - s[c])
}

/// One feature per annotated positive image: among the windows that best
/// cover each ground-truth box, the one `w_hat` scores highest.
pub fn annotation_set<'a>(ctx: &QueryContext<'a>) -> Result<Vec<&'a [f64]>> {
    let mut ids = ctx.pool.annotated().to_vec();
    ids.sort_unstable();
    let mut out = Vec::new();
    for id in ids {
        let img = ctx.pool.image(id)?;
        if !img.is_positive() {
            continue;
        }
        let mut best: Option<(usize, f64)> = None;
        for gt in &img.gt_boxes {
            let mut cover = 0;
            let mut cover_iou = f64::NEG_INFINITY;
            for (y, p) in img.proposals.iter().enumerate() {
                let v = iou(&p.bbox, gt);
                if v > cover_iou {
                    cover = y;
                    cover_iou = v;
                }
            }
            let s = ctx.model.score_hat(img, cover)?;
            let better = match best {
                None => true,
                Some((y, bs)) => s > bs || (s == bs && cover < y),
            };
            if better {
                best = Some((cover, s));
            }
        }
        if let Some((y, _)) = best {
            out.push(img.feature(y)?);
        }
    }
    Ok(out)
}

/// Annotation features and kernel bandwidth shared by all candidates of one query.
pub struct MsmSetup<'a> {
    pub annotations: Vec<&'a [f64]>,
    pub sigma: f64,
}

impl<'a> MsmSetup<'a> {
    pub fn new(ctx: &QueryContext<'a>, candidates: &[ImageId]) -> Result<Self> {
        let annotations = annotation_set(ctx)?;
        if annotations.is_empty() {
            return Err(Error::EmptyAnnotated);
        }
        let sigma = match ctx.cfg.msm_kernel_bandwidth {
            Bandwidth::Fixed(s) => s,
            Bandwidth::Median => {
                let mut d = Vec::with_capacity(annotations.len() * candidates.len());
                for &id in candidates {
                    let img = ctx.pool.image(id)?;
                    let (b, _) = top_two(&scores(ctx.model, img)?);
                    let fb = img.feature(b)?;
                    d.extend(annotations.iter().map(|a| sq_dist(a, fb).sqrt()));
                }
                median(&mut d).filter(|m| *m > 0.0).unwrap_or(1.0)
            }
        };
        Ok(MsmSetup { annotations, sigma })
    }

    /// Index of the annotation most similar to `f` under the Gaussian kernel.
    pub fn most_similar(&self, f: &[f64]) -> usize {
        // compare log-kernels so far-away annotations cannot underflow into a tie
        let two_s2 = 2.0 * self.sigma * self.sigma;
        let mut best = 0;
        let mut best_k = f64::NEG_INFINITY;
        for (k, a) in self.annotations.iter().enumerate() {
            let lk = -sq_dist(a, f) / two_s2;
            if lk > best_k {
                best = k;
                best_k = lk;
            }
        }
        best
    }
}

fn median(v: &mut [f64]) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

/// Margin of a candidate against its top rival or the closest annotation (smallest wins).
pub fn msm_margin(ctx: &QueryContext<'_>, setup: &MsmSetup<'_>, id: ImageId) -> Result<f64> {
    let img = ctx.pool.image(id)?;
    require_two(img)?;
    let s = scores(ctx.model, img)?;
    let (b, c) = top_two(&s);
    let a = setup.annotations[setup.most_similar(img.feature(b)?)];
    let sa = dot(&ctx.model.w_hat, a);
    Ok(if s[b] >= sa { s[b] - s[c] } else { sa - s[b] })
}
