//! Retraining-based rules: APT, OPT and MC.

use serde::{Deserialize, Serialize};

use super::QueryContext;
use crate::error::{Error, Result};
use crate::geometry::{ImageId, ImageSample};
use crate::linalg::{dot, norm, normalized, sub};
use crate::mssvm::{image_constraints, train_sgd_from, Constraint, Sign};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptMode {
    /// Reference window is the highest-scored annotated `y_j`.
    Pessimistic,
    /// Reference window is the lowest-scored annotated `y_j`.
    Optimistic,
}

/// Result of the alternating predict/retrain loop for one candidate.
#[derive(Debug, Clone, PartialEq)]
pub struct FutureOutcome {
    /// Criterion value (margin for APT/OPT, angle for MC); `None` if undefined.
    pub score: Option<f64>,
    pub w_star: Vec<f64>,
    /// Predicted positive windows of the candidate, ascending index.
    pub predicted: Vec<usize>,
    /// Predicted reference window (APT, MC); `None` for OPT.
    pub y_star: Option<usize>,
    /// Retrains performed.
    pub iterations: usize,
}

/// Proposals whose score under `w` is at least `threshold`.
fn above(img: &ImageSample, w: &[f64], threshold: f64) -> Vec<usize> {
    (0..img.proposals.len())
        .filter(|&y| dot(w, &img.proposals[y].feature) >= threshold)
        .collect()
}

/// Lowest-scored member of `set` under `w`, ties to the lowest index.
fn lowest(img: &ImageSample, w: &[f64], set: &[usize]) -> usize {
    let mut best = set[0];
    let mut best_s = dot(w, &img.proposals[best].feature);
    for &y in &set[1..] {
        let s = dot(w, &img.proposals[y].feature);
        if s < best_s {
            best = y;
            best_s = s;
        }
    }
    best
}

/// Constraints tying every proposal of `img` to an external reference feature.
fn reference_constraints(img: &ImageSample, id: ImageId, pos: &[usize], reference: &[f64]) -> Vec<Constraint> {
    (0..img.proposals.len())
        .map(|y| Constraint {
            image_id: id,
            y_index: y,
            sign: if pos.binary_search(&y).is_ok() {
                Sign::Plus
            } else {
                Sign::Minus
            },
            vector: sub(&img.proposals[y].feature, reference),
        })
        .collect()
}

fn retrain(ctx: &QueryContext<'_>, id: ImageId, extra: Vec<Constraint>) -> Result<Vec<f64>> {
    let mut cs = ctx.q_constraints.clone();
    cs.extend(extra);
    let m = train_sgd_from(&cs, &ctx.inner_params(id), &ctx.model.w, ctx.warm_start_steps())?;
    Ok(m.w)
}

/// Runs the predict/retrain loop up to the retrained weight (no criterion yet).
///
/// Returns `None` when the first prediction has no positive window.
fn apt_loop(ctx: &QueryContext<'_>, id: ImageId) -> Result<Option<FutureOutcome>> {
    let img = ctx.pool.image(id)?;
    let Some(divider) = ctx.extreme_reference(&ctx.model.w, false) else {
        return Err(Error::EmptyAnnotated);
    };
    let mut w_star: Option<Vec<f64>> = None;
    let mut predicted: Vec<usize> = Vec::new();
    let mut iterations = 0;
    while iterations < ctx.cfg.apt_max_inner_iters {
        let w = w_star.as_deref().unwrap_or(&ctx.model.w);
        let pos = above(img, w, dot(w, divider.feature));
        if pos.is_empty() {
            if w_star.is_none() {
                log::debug!("apt: image {id} has no window above the divider");
                return Ok(None);
            }
            break;
        }
        if w_star.is_some() && pos == predicted {
            break;
        }
        let y_star = lowest(img, w, &pos);
        w_star = Some(retrain(ctx, id, image_constraints(img, &pos, y_star)?)?);
        predicted = pos;
        iterations += 1;
    }
    let w_star = w_star.expect("at least one retrain");
    // the final reference window comes from the retrained weight
    let pos = above(img, &w_star, dot(&w_star, divider.feature));
    if !pos.is_empty() {
        predicted = pos;
    }
    let y_star = lowest(img, &w_star, &predicted);
    Ok(Some(FutureOutcome {
        score: None,
        w_star,
        predicted,
        y_star: Some(y_star),
        iterations,
    }))
}

/// Smallest |w_hat . (psi_y - reference)| over proposals other than `skip`.
fn min_abs_margin(img: &ImageSample, w_hat: &[f64], reference: &[f64], skip: Option<usize>) -> Option<f64> {
    let r = dot(w_hat, reference);
    (0..img.proposals.len())
        .filter(|&y| Some(y) != skip)
        .map(|y| (dot(w_hat, &img.proposals[y].feature) - r).abs())
        .reduce(f64::min)
}

/// Future margin of a candidate estimated by alternating prediction and retraining.
///
/// `None` when no window of the candidate scores at or above the divider.
pub fn apt_future_margin(ctx: &QueryContext<'_>, id: ImageId) -> Result<Option<FutureOutcome>> {
    let Some(mut out) = apt_loop(ctx, id)? else {
        return Ok(None);
    };
    let img = ctx.pool.image(id)?;
    let y_star = out.y_star.expect("apt sets y_star");
    let w_hat = normalized(&out.w_star);
    out.score = min_abs_margin(img, &w_hat, &img.proposals[y_star].feature, Some(y_star));
    Ok(Some(out))
}

/// Future margin with the reference window borrowed from an annotated image.
///
/// Unlike APT the reference is not one of the candidate's windows, so a
/// candidate with no window above it is still scored.
pub fn opt_future_margin(ctx: &QueryContext<'_>, id: ImageId, mode: OptMode) -> Result<Option<FutureOutcome>> {
    let img = ctx.pool.image(id)?;
    let Some(reference) = ctx.extreme_reference(&ctx.model.w, mode == OptMode::Pessimistic) else {
        return Err(Error::EmptyAnnotated);
    };
    let feat = reference.feature;
    let mut w_star: Option<Vec<f64>> = None;
    let mut predicted: Vec<usize> = Vec::new();
    let mut iterations = 0;
    while iterations < ctx.cfg.apt_max_inner_iters {
        let w = w_star.as_deref().unwrap_or(&ctx.model.w);
        // an empty prediction still constrains every window below the reference
        let pos = above(img, w, dot(w, feat));
        if w_star.is_some() && pos == predicted {
            break;
        }
        w_star = Some(retrain(ctx, id, reference_constraints(img, id, &pos, feat))?);
        predicted = pos;
        iterations += 1;
    }
    let w_star = w_star.expect("at least one retrain");
    let score = min_abs_margin(img, &normalized(&w_star), feat, None);
    Ok(Some(FutureOutcome {
        score,
        w_star,
        predicted,
        y_star: None,
        iterations,
    }))
}

/// Angle between two weight vectors with the sign ignored, in `[0, pi/2]`.
///
/// `None` if either vector is zero.
pub fn model_change_angle(a: &[f64], b: &[f64]) -> Option<f64> {
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    Some((dot(a, b).abs() / (na * nb)).clamp(0.0, 1.0).acos())
}

/// Angular model change caused by annotating the candidate, via the APT retrain.
pub fn mc_score(ctx: &QueryContext<'_>, id: ImageId) -> Result<Option<FutureOutcome>> {
    let Some(mut out) = apt_loop(ctx, id)? else {
        return Ok(None);
    };
    out.score = model_change_angle(&out.w_star, &ctx.model.w);
    Ok(Some(out))
}
