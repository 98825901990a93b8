//! Monte-Carlo version-space volume and empirical checks of two SGD properties:
//! the warm-start gap bound (`thm1_report`) and single-step argmin agreement
//! (`thm2_check`).
//!
//! The version space here is the sign version space: unit directions `u`
//! with `sign * (u . v) > 0` for every constraint. Its volume is reported as
//! a fraction of the sphere.

use std::collections::BTreeMap;

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::ImageId;
use crate::linalg::{dot, norm, normalized, sq_dist};
use crate::mssvm::{
    build_constraints, image_constraints, sgd_step, train_sgd_from, true_annotation, Constraint, SgdParams,
};
use crate::pool::Pool;
use crate::rng;

/// Largest dimension the sampler accepts.
pub const MAX_DIM: usize = 12;
pub const MIN_SAMPLES: usize = 1000;
const SHARD: usize = 8192;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VersionSpaceEstimate {
    pub fraction: f64,
    pub n_samples: usize,
    pub seed: u64,
    pub stderr: f64,
}

impl VersionSpaceEstimate {
    fn from_count(count: usize, n_samples: usize, seed: u64) -> Self {
        let fraction = count as f64 / n_samples as f64;
        VersionSpaceEstimate {
            fraction,
            n_samples,
            seed,
            stderr: (fraction * (1.0 - fraction) / n_samples as f64).sqrt(),
        }
    }
}

fn check_budget(dim: usize, n_samples: usize) -> Result<()> {
    if dim == 0 || dim > MAX_DIM {
        return Err(Error::InvalidInput(format!(
            "version-space sampling supports 1..={MAX_DIM} dimensions, got {dim}"
        )));
    }
    if n_samples < MIN_SAMPLES {
        return Err(Error::InvalidInput(format!(
            "need at least {MIN_SAMPLES} samples, got {n_samples}"
        )));
    }
    Ok(())
}

fn consistent(u: &[f64], constraints: &[Constraint]) -> bool {
    constraints.iter().all(|c| c.sign.value() * dot(u, &c.vector) > 0.0)
}

/// Draws `n_samples` isotropic Gaussian directions in shards with their own
/// seeds and passes each shard to `f`; results come back in shard order.
///
/// Directions are not normalized: the sign tests only depend on the ray.
fn sample_shards<T, F>(dim: usize, n_samples: usize, seed: u64, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(&[f64]) -> T + Sync,
{
    let shards = n_samples.div_ceil(SHARD);
    (0..shards)
        .into_par_iter()
        .map(|k| {
            let len = SHARD.min(n_samples - k * SHARD);
            let mut rng = rng::rng_from(seed, &[rng::TAG_SHARD, k as u64]);
            let buf: Vec<f64> = (0..len * dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            f(&buf)
        })
        .collect()
}

/// Fraction of the unit sphere consistent with every constraint.
pub fn estimate_volume(
    constraints: &[Constraint],
    dim: usize,
    n_samples: usize,
    seed: u64,
) -> Result<VersionSpaceEstimate> {
    check_budget(dim, n_samples)?;
    if let Some(c) = constraints.iter().find(|c| c.vector.len() != dim) {
        return Err(Error::DimensionMismatch {
            expected: dim,
            found: c.vector.len(),
        });
    }
    if constraints.is_empty() {
        return Ok(VersionSpaceEstimate::from_count(n_samples, n_samples, seed));
    }
    let count: usize = sample_shards(dim, n_samples, seed, |buf| {
        buf.chunks_exact(dim).filter(|u| consistent(u, constraints)).count()
    })
    .into_iter()
    .sum();
    Ok(VersionSpaceEstimate::from_count(count, n_samples, seed))
}

/// How much annotating each candidate would shrink the version space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReductionRank {
    pub chosen: ImageId,
    /// Volume of the current version space.
    pub base: VersionSpaceEstimate,
    /// Removed fraction of the sphere per candidate.
    pub reductions: BTreeMap<ImageId, f64>,
    /// 1 for the largest reduction; candidates with equal reduction share a rank.
    pub rank: usize,
    pub median_reduction: f64,
    pub at_least_median: bool,
}

/// Ranks the `chosen` candidate by the volume its true annotation would remove.
///
/// All candidates are measured on one shared set of sample directions, so
/// their differences are not blurred by independent sampling noise.
pub fn reduction_rank(
    pool: &Pool,
    candidates: &[ImageId],
    chosen: ImageId,
    n_samples: usize,
    seed: u64,
) -> Result<ReductionRank> {
    if !candidates.contains(&chosen) {
        return Err(Error::InvalidInput(format!("chosen image {chosen} is not a candidate")));
    }
    let dim = pool.dim();
    check_budget(dim, n_samples)?;
    let q = build_constraints(pool, pool.annotated())?;
    let mut extra = Vec::with_capacity(candidates.len());
    for &id in candidates {
        let img = pool.image(id)?;
        let cs = match true_annotation(img) {
            Ok((pos, y)) => image_constraints(img, &pos, y)?,
            Err(Error::NoPositiveProposal(_)) => Vec::new(),
            Err(e) => return Err(e),
        };
        extra.push(cs);
    }
    // per shard: surviving base count and, per candidate, survivors that the candidate keeps
    let shards = sample_shards(dim, n_samples, seed, |buf| {
        let kept: Vec<&[f64]> = buf.chunks_exact(dim).filter(|u| consistent(u, &q)).collect();
        let per: Vec<usize> = extra
            .iter()
            .map(|cs| kept.iter().filter(|u| consistent(u, cs)).count())
            .collect();
        (kept.len(), per)
    });
    let base_count: usize = shards.iter().map(|(b, _)| b).sum();
    let mut reductions = BTreeMap::new();
    for (k, &id) in candidates.iter().enumerate() {
        let after: usize = shards.iter().map(|(_, per)| per[k]).sum();
        reductions.insert(id, (base_count - after) as f64 / n_samples as f64);
    }
    let mine = reductions[&chosen];
    let rank = 1 + reductions.values().filter(|&&r| r > mine).count();
    let mut sorted: Vec<f64> = reductions.values().copied().collect();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let median_reduction = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    };
    Ok(ReductionRank {
        chosen,
        base: VersionSpaceEstimate::from_count(base_count, n_samples, seed),
        reductions,
        rank,
        median_reduction,
        at_least_median: mine >= median_reduction,
    })
}

/// Diagnostic record for one step of either check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoremReport {
    pub t: usize,
    pub bound_value: Option<f64>,
    pub measured_gap: Option<f64>,
    pub theta_t: Option<f64>,
    pub contraction_factor: Option<f64>,
    /// Clause 1: `argmin w_{t+1} . w_t` equals `argmin q_i (w_{t+1} . p_i)`.
    pub argmin_match: Option<bool>,
    /// Clause 2: `argmin q_i (w_t . p_i)` equals `argmin q_i (w_hat_{t+1} . p_i)`.
    pub clause2_match: Option<bool>,
}

/// `(1 - lambda/(m t)) ln(1 + 1/(t - 1))`, defined for `t >= 2`.
pub fn contraction_factor(t: usize, lambda: f64, m: usize) -> Result<f64> {
    if t < 2 {
        return Err(Error::InvalidInput(format!("contraction factor needs t >= 2, got {t}")));
    }
    if m == 0 {
        return Err(Error::InvalidInput("window count must be positive".into()));
    }
    let t = t as f64;
    Ok((1.0 - lambda / (m as f64 * t)) * (1.0 / (t - 1.0)).ln_1p())
}

/// A small binary problem: current weight and unlabeled pairs `(p_i, q_i)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Thm2Instance {
    pub t: usize,
    pub w_t: Vec<f64>,
    pub p: Vec<Vec<f64>>,
    pub q: Vec<f64>,
}

fn argmin_by<F: Fn(usize) -> f64>(n: usize, f: F) -> usize {
    let mut best = 0;
    let mut best_v = f(0);
    for i in 1..n {
        let v = f(i);
        if v < best_v {
            best = i;
            best_v = v;
        }
    }
    best
}

/// Evaluates both argmin clauses, where `w_{t+1}` for candidate `i` is one
/// SGD step from `w_t` on `(p_i, q_i)` with the step size of iteration `t`.
pub fn thm2_check(instances: &[Thm2Instance], sgd: &SgdParams) -> Result<Vec<TheoremReport>> {
    let mut out = Vec::with_capacity(instances.len());
    for inst in instances {
        let n = inst.p.len();
        if n == 0 || inst.q.len() != n {
            return Err(Error::InvalidInput("instance needs matching, nonempty p and q".into()));
        }
        if let Some(p) = inst.p.iter().find(|p| p.len() != inst.w_t.len()) {
            return Err(Error::DimensionMismatch {
                expected: inst.w_t.len(),
                found: p.len(),
            });
        }
        let eta = sgd.eta(inst.t.max(1) as u64);
        let next: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                let mut w = inst.w_t.clone();
                sgd_step(&mut w, &inst.p[i], inst.q[i], eta, sgd.lambda);
                w
            })
            .collect();
        let a = argmin_by(n, |i| dot(&next[i], &inst.w_t));
        let b = argmin_by(n, |i| inst.q[i] * dot(&next[i], &inst.p[i]));
        let c = argmin_by(n, |i| inst.q[i] * dot(&inst.w_t, &inst.p[i]));
        let d = argmin_by(n, |i| inst.q[i] * dot(&normalized(&next[i]), &inst.p[i]));
        out.push(TheoremReport {
            t: inst.t,
            bound_value: None,
            measured_gap: None,
            theta_t: None,
            contraction_factor: None,
            argmin_match: Some(a == b),
            clause2_match: Some(c == d),
        });
    }
    Ok(out)
}

/// Random instances on which the single-step update has an active hinge:
/// unit-norm `p_i`, `|w_t| < 1` and `eta lambda < 1`.
pub fn random_thm2_instances(count: usize, dim: usize, candidates: usize, seed: u64) -> Vec<Thm2Instance> {
    use rand::Rng;
    let mut rng = rng::rng_from(seed, &[rng::TAG_INIT]);
    (0..count)
        .map(|_| {
            let gauss = |rng: &mut rand_chacha::ChaCha8Rng| -> Vec<f64> {
                (0..dim).map(|_| StandardNormal.sample(rng)).collect()
            };
            let mut w_t = normalized(&gauss(&mut rng));
            let r: f64 = rng.random_range(0.05..0.9);
            w_t.iter_mut().for_each(|v| *v *= r);
            let p = (0..candidates).map(|_| normalized(&gauss(&mut rng))).collect();
            let q = (0..candidates)
                .map(|_| if rng.random_bool(0.5) { 1.0 } else { -1.0 })
                .collect();
            Thm2Instance {
                t: rng.random_range(2..50),
                w_t,
                p,
                q,
            }
        })
        .collect()
}

/// One query step of an APT run, as needed by the warm-start gap report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryTrace {
    /// Images annotated before the query, in annotation order.
    pub annotated_before: Vec<ImageId>,
    pub w_t: Vec<f64>,
    /// SGD steps already taken by the schedule that produced `w_t`.
    pub steps: u64,
    pub image: ImageId,
    /// APT's predicted positive windows and reference window for `image`.
    pub predicted: Vec<usize>,
    pub y_star: usize,
}

/// Compares the measured gap between truly and predictively retrained weights
/// with the warm-start gap bound, for each traced step.
///
/// The bound is `c_t (2 (1 - theta_t) + |psi(y*) - psi(y_i)|)`, where `c_t` is
/// [`contraction_factor`] and `theta_t` is the fraction of the true constraints
/// that `w_t` already satisfies.
///
/// `t` is the number of annotated images after the query. Both retrains
/// warm-start from `w_t` with the same seed per repeat; the gap is the norm of
/// the mean difference over `repeats`.
pub fn thm1_report(pool: &Pool, trace: &[QueryTrace], sgd: &SgdParams, repeats: usize) -> Result<Vec<TheoremReport>> {
    if repeats == 0 {
        return Err(Error::Config("repeats must be positive".into()));
    }
    let mut out = Vec::with_capacity(trace.len());
    for step in trace {
        let t = step.annotated_before.len() + 1;
        let img = pool.image(step.image)?;
        let m = img.proposals.len();
        let factor = contraction_factor(t, sgd.lambda, m)?;
        let q = build_constraints(pool, &step.annotated_before)?;
        let (pos, y_i) = true_annotation(img)?;
        let truth = image_constraints(img, &pos, y_i)?;
        let guess = image_constraints(img, &step.predicted, step.y_star)?;
        let theta =
            truth.iter().filter(|c| c.signed_margin(&step.w_t) > 0.0).count() as f64 / truth.len().max(1) as f64;
        let y_dist = sq_dist(img.feature(step.y_star)?, img.feature(y_i)?).sqrt();
        let t0 = step.steps.max(q.len() as u64);
        let mut mean_gap = vec![0.0; pool.dim()];
        for r in 0..repeats {
            let params = SgdParams {
                seed: rng::derive_seed(sgd.seed, &[step.image.0 as u64, r as u64]),
                ..*sgd
            };
            let with = |extra: &[Constraint]| -> Result<Vec<f64>> {
                let mut cs = q.clone();
                cs.extend_from_slice(extra);
                Ok(train_sgd_from(&cs, &params, &step.w_t, t0)?.w)
            };
            let (a, b) = (with(&truth)?, with(&guess)?);
            for k in 0..mean_gap.len() {
                mean_gap[k] += (a[k] - b[k]) / repeats as f64;
            }
        }
        out.push(TheoremReport {
            t,
            bound_value: Some(factor * (2.0 * (1.0 - theta) + y_dist)),
            measured_gap: Some(norm(&mean_gap)),
            theta_t: Some(theta),
            contraction_factor: Some(factor),
            argmin_match: None,
            clause2_match: None,
        });
    }
    Ok(out)
}
