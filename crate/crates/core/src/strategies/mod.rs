//! Query strategies: choose the next unannotated image to send to the annotator.
//!
//! Retraining-based rules estimate what the model would look like after the
//! candidate is annotated:
//!
//! * `Apt` alternates between predicting the candidate's positive windows
//!   from scores and retraining, and scores the candidate by the margin of the
//!   retrained model on its own windows (smallest wins).
//! * `Opt` borrows the reference window from an annotated image instead of
//!   predicting it (pessimistic early on, optimistic later).
//! * `Mc` measures the angle between the retrained and current weights (largest wins).
//!
//! Score-based rules only look at the current normalized weight `w_hat`:
//! `Sm`, `Msm`, `Ent`, `Mm`, `Ms`. `Random` draws uniformly.
//!
//! Every rule breaks ties toward the lowest image id and is a deterministic
//! function of its inputs and `rng_seed`; per-candidate work runs in parallel
//! and is reduced in id order.

mod future;
mod uncertainty;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::ImageId;
use crate::linalg::dot;
use crate::mssvm::{build_constraints, true_annotation, Constraint, Model, SgdParams};
use crate::pool::Pool;
use crate::rng;

pub use future::{apt_future_margin, mc_score, model_change_angle, opt_future_margin, FutureOutcome, OptMode};
pub use uncertainty::{
    annotation_set, ent_score, entropy, mm_score, ms_margin, msm_margin, sm_score, softmax_max, MsmSetup,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Random,
    Ent,
    Mm,
    Ms,
    Sm,
    Msm,
    Mc,
    Opt,
    Apt,
}

impl Strategy {
    pub const ALL: [Strategy; 9] = [
        Strategy::Random,
        Strategy::Ent,
        Strategy::Mm,
        Strategy::Ms,
        Strategy::Sm,
        Strategy::Msm,
        Strategy::Mc,
        Strategy::Opt,
        Strategy::Apt,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Random => "random",
            Strategy::Ent => "ent",
            Strategy::Mm => "mm",
            Strategy::Ms => "ms",
            Strategy::Sm => "sm",
            Strategy::Msm => "msm",
            Strategy::Mc => "mc",
            Strategy::Opt => "opt",
            Strategy::Apt => "apt",
        }
    }

    pub fn orientation(self) -> Orientation {
        match self {
            Strategy::Random => Orientation::Random,
            Strategy::Ent | Strategy::Mc => Orientation::Max,
            _ => Orientation::Min,
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown strategy {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Orientation {
    Min,
    Max,
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Bandwidth {
    /// Median distance between annotation features and candidate top windows.
    Median,
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QueryConfig {
    pub strategy: Strategy,
    pub apt_max_inner_iters: usize,
    /// Queries answered before OPT switches from pessimistic to optimistic.
    pub opt_switch_after: usize,
    pub msm_kernel_bandwidth: Bandwidth,
    /// Inner retraining for APT, OPT and MC. The seed is mixed with the query
    /// seed and the candidate id.
    pub inner_sgd: SgdParams,
    /// Only positive images are candidates.
    pub positive_only: bool,
}

impl Default for QueryConfig {
    fn default() -> Self {
        QueryConfig {
            strategy: Strategy::Apt,
            apt_max_inner_iters: 10,
            opt_switch_after: 5,
            msm_kernel_bandwidth: Bandwidth::Median,
            inner_sgd: SgdParams {
                epochs: 2,
                ..SgdParams::default()
            },
            positive_only: true,
        }
    }
}

impl QueryConfig {
    pub fn validate(&self) -> Result<()> {
        if self.apt_max_inner_iters == 0 {
            return Err(Error::Config("apt_max_inner_iters must be positive".into()));
        }
        if self.inner_sgd.epochs == 0 {
            return Err(Error::Config("inner SGD epochs must be positive".into()));
        }
        if let Bandwidth::Fixed(b) = self.msm_kernel_bandwidth {
            if !(b > 0.0 && b.is_finite()) {
                return Err(Error::Config("kernel bandwidth must be positive".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryResult {
    pub chosen: ImageId,
    /// Strategy that actually made the choice (`Random` after a fallback).
    pub strategy: Strategy,
    pub orientation: Orientation,
    pub fallback: bool,
    /// Criterion value per candidate; `None` when the candidate could not be scored.
    pub scores: BTreeMap<ImageId, Option<f64>>,
    /// Candidates from best to worst; the first entry is `chosen`.
    #[serde(skip)]
    pub ranking: Vec<ImageId>,
    /// Retraining details of the chosen candidate (APT, OPT, MC).
    #[serde(skip)]
    pub detail: Option<FutureOutcome>,
}

impl QueryResult {
    /// The best `k` candidates.
    pub fn top(&self, k: usize) -> &[ImageId] {
        &self.ranking[..k.min(self.ranking.len())]
    }
}

/// A reference window `y_j` of an annotated positive image.
#[derive(Debug, Clone)]
pub struct Reference<'a> {
    pub image: ImageId,
    pub proposal: usize,
    pub feature: &'a [f64],
}

/// Everything the per-candidate rules share within one query.
pub struct QueryContext<'a> {
    pub pool: &'a Pool,
    pub model: &'a Model,
    pub cfg: &'a QueryConfig,
    pub rng_seed: u64,
    /// Constraints of the annotated set, ascending image id.
    pub q_constraints: Vec<Constraint>,
    /// True reference windows of the annotated positive images, ascending image id.
    pub references: Vec<Reference<'a>>,
}

impl<'a> QueryContext<'a> {
    pub fn new(model: &'a Model, pool: &'a Pool, cfg: &'a QueryConfig, rng_seed: u64) -> Result<Self> {
        let mut ids = pool.annotated().to_vec();
        ids.sort_unstable();
        let q_constraints = build_constraints(pool, &ids)?;
        let mut references = Vec::new();
        for id in ids {
            let img = pool.image(id)?;
            if !img.is_positive() {
                continue;
            }
            if let Ok((_, y)) = true_annotation(img) {
                references.push(Reference {
                    image: id,
                    proposal: y,
                    feature: img.feature(y)?,
                });
            }
        }
        Ok(QueryContext {
            pool,
            model,
            cfg,
            rng_seed,
            q_constraints,
            references,
        })
    }

    /// Step count the inner SGD continues from when warm-starting at `w_t`.
    pub fn warm_start_steps(&self) -> u64 {
        self.model.steps.max(self.q_constraints.len() as u64)
    }

    pub fn inner_params(&self, candidate: ImageId) -> SgdParams {
        SgdParams {
            seed: inner_seed(self.cfg, self.rng_seed, candidate),
            ..self.cfg.inner_sgd
        }
    }

    /// Reference window with the extreme score under `w`; ties to the lowest (image, proposal).
    pub fn extreme_reference(&self, w: &[f64], highest: bool) -> Option<&Reference<'a>> {
        let mut best: Option<(&Reference<'a>, f64)> = None;
        for r in &self.references {
            let s = dot(w, r.feature);
            let better = match best {
                None => true,
                Some((_, b)) => {
                    if highest {
                        s > b
                    } else {
                        s < b
                    }
                }
            };
            if better {
                best = Some((r, s));
            }
        }
        best.map(|(r, _)| r)
    }
}

/// Seed of the inner retraining for one candidate.
pub fn inner_seed(cfg: &QueryConfig, rng_seed: u64, candidate: ImageId) -> u64 {
    rng::derive_seed(cfg.inner_sgd.seed, &[rng::TAG_INNER, rng_seed, candidate.0 as u64])
}

/// Images eligible for the next query, ascending id.
pub fn candidates(pool: &Pool, cfg: &QueryConfig) -> Result<Vec<ImageId>> {
    let mut out = Vec::new();
    for id in pool.unannotated() {
        if !cfg.positive_only || pool.image(id)?.is_positive() {
            out.push(id);
        }
    }
    Ok(out)
}

/// Ranks candidates by score; unscorable candidates go last. Ties keep id order.
fn rank(scored: &[(ImageId, Option<f64>)], orientation: Orientation) -> Vec<ImageId> {
    let mut order: Vec<(ImageId, Option<f64>)> = scored.to_vec();
    order.sort_by(|a, b| match (a.1, b.1) {
        (Some(x), Some(y)) => {
            let o = match orientation {
                Orientation::Max => y.total_cmp(&x),
                _ => x.total_cmp(&y),
            };
            o.then(a.0.cmp(&b.0))
        }
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => a.0.cmp(&b.0),
    });
    order.into_iter().map(|(id, _)| id).collect()
}

fn random_result(ids: &[ImageId], rng_seed: u64, fallback: bool) -> QueryResult {
    let mut ranking = ids.to_vec();
    ranking.shuffle(&mut rng::rng_from(rng_seed, &[rng::TAG_QUERY]));
    QueryResult {
        chosen: ranking[0],
        strategy: Strategy::Random,
        orientation: Orientation::Random,
        fallback,
        scores: BTreeMap::new(),
        ranking,
        detail: None,
    }
}

/// Selects the next image to annotate.
///
/// `round` is the number of queries already answered; it only affects OPT's
/// pessimistic/optimistic switch.
pub fn query(model: &Model, pool: &Pool, cfg: &QueryConfig, rng_seed: u64, round: usize) -> Result<QueryResult> {
    cfg.validate()?;
    let ids = candidates(pool, cfg)?;
    if ids.is_empty() {
        return Err(Error::EmptyCandidates);
    }
    let strategy = cfg.strategy;
    if strategy == Strategy::Random {
        return Ok(random_result(&ids, rng_seed, false));
    }
    if model.is_zero() {
        log::warn!("{strategy}: current weight is zero, querying at random");
        return Ok(random_result(&ids, rng_seed, true));
    }
    let ctx = QueryContext::new(model, pool, cfg, rng_seed)?;
    let needs_references = matches!(strategy, Strategy::Apt | Strategy::Opt | Strategy::Mc | Strategy::Msm);
    if needs_references && ctx.references.is_empty() {
        log::warn!("{strategy}: no annotated positive image yet, querying at random");
        return Ok(random_result(&ids, rng_seed, true));
    }

    let scored: Vec<(ImageId, Option<f64>, Option<FutureOutcome>)> = match strategy {
        Strategy::Apt | Strategy::Mc | Strategy::Opt => {
            let mode = if round < cfg.opt_switch_after {
                OptMode::Pessimistic
            } else {
                OptMode::Optimistic
            };
            ids.par_iter()
                .map(|&id| {
                    let outcome = match strategy {
                        Strategy::Apt => apt_future_margin(&ctx, id)?,
                        Strategy::Mc => mc_score(&ctx, id)?,
                        _ => opt_future_margin(&ctx, id, mode)?,
                    };
                    let score = outcome.as_ref().and_then(|o| o.score);
                    Ok((id, score, outcome))
                })
                .collect::<Result<Vec<_>>>()?
        }
        Strategy::Msm => {
            let setup = MsmSetup::new(&ctx, &ids)?;
            ids.iter()
                .map(|&id| Ok((id, Some(msm_margin(&ctx, &setup, id)?), None)))
                .collect::<Result<Vec<_>>>()?
        }
        _ => ids
            .par_iter()
            .map(|&id| {
                let img = pool.image(id)?;
                let v = match strategy {
                    Strategy::Sm => sm_score(model, img)?,
                    Strategy::Ent => ent_score(model, img)?,
                    Strategy::Mm => mm_score(model, img)?,
                    _ => ms_margin(model, img)?,
                };
                Ok((id, Some(v), None))
            })
            .collect::<Result<Vec<_>>>()?,
    };

    if scored.iter().all(|(_, s, _)| s.is_none()) {
        log::warn!("{strategy}: no candidate could be scored, querying at random");
        return Ok(random_result(&ids, rng_seed, true));
    }
    let pairs: Vec<(ImageId, Option<f64>)> = scored.iter().map(|(id, s, _)| (*id, *s)).collect();
    let orientation = strategy.orientation();
    let ranking = rank(&pairs, orientation);
    let chosen = ranking[0];
    let detail = scored
        .into_iter()
        .find(|(id, _, _)| *id == chosen)
        .and_then(|(_, _, d)| d);
    Ok(QueryResult {
        chosen,
        strategy,
        orientation,
        fallback: false,
        scores: pairs.into_iter().collect(),
        ranking,
        detail,
    })
}
