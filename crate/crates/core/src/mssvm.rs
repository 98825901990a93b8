//! Constraint construction and training for the difference-of-feature SVM.
//!
//! Each annotated image contributes one signed constraint per proposal `y`
//! other than its reference window `y_i`:
//!
//! ```text
//! sign(y) * w . (psi(y) - psi(y_i)) >= 1,   sign(y) = +1 if y is positive else -1
//! ```
//!
//! The hard-margin program is relaxed to the regularized hinge objective
//! `lambda/2 |w|^2 + mean_k max(0, 1 - s_k w.v_k)`, which both trainers
//! minimize: a Pegasos-style stochastic subgradient solver and an exact
//! cutting-plane solver working on the dual.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{positive_set, select_y_i, ImageId, ImageSample, DEFAULT_IOU_THRESHOLD};
use crate::linalg::{axpy, dot, norm, normalized, scale};
use crate::pool::Pool;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Sign {
    Plus,
    Minus,
}

impl Sign {
    #[inline]
    pub fn value(self) -> f64 {
        match self {
            Sign::Plus => 1.0,
            Sign::Minus => -1.0,
        }
    }
}

/// One row of the constraint system.
#[derive(Debug, Clone, PartialEq)]
pub struct Constraint {
    pub image_id: ImageId,
    pub y_index: usize,
    pub sign: Sign,
    pub vector: Vec<f64>,
}

impl Constraint {
    #[inline]
    pub fn signed_margin(&self, w: &[f64]) -> f64 {
        self.sign.value() * dot(w, &self.vector)
    }
}

/// Constraints of one image given its (true or predicted) positive set and reference window.
pub fn image_constraints(img: &ImageSample, pos: &[usize], y_i: usize) -> Result<Vec<Constraint>> {
    let reference = img.feature(y_i)?;
    let mut out = Vec::with_capacity(img.proposals.len().saturating_sub(1));
    for (y, p) in img.proposals.iter().enumerate() {
        if y == y_i {
            continue;
        }
        if p.feature.len() != reference.len() {
            return Err(Error::DimensionMismatch {
                expected: reference.len(),
                found: p.feature.len(),
            });
        }
        let sign = if pos.contains(&y) { Sign::Plus } else { Sign::Minus };
        out.push(Constraint {
            image_id: img.id,
            y_index: y,
            sign,
            vector: crate::linalg::sub(&p.feature, reference),
        });
    }
    Ok(out)
}

/// The true positive set and reference window of an image.
pub fn true_annotation(img: &ImageSample) -> Result<(Vec<usize>, usize)> {
    let pos = positive_set(img, DEFAULT_IOU_THRESHOLD);
    let y_i = select_y_i(img, &pos)?;
    Ok((pos, y_i))
}

/// Constraints of all `annotated` images, in ascending id order.
///
/// Positive images without any proposal above the overlap threshold are
/// skipped with a warning.
pub fn build_constraints(pool: &Pool, annotated: &[ImageId]) -> Result<Vec<Constraint>> {
    let mut ids = annotated.to_vec();
    ids.sort_unstable();
    ids.dedup();
    let mut out = Vec::new();
    for id in ids {
        let img = pool.image(id)?;
        match true_annotation(img) {
            Ok((pos, y_i)) => out.extend(image_constraints(img, &pos, y_i)?),
            Err(Error::NoPositiveProposal(id)) => {
                log::warn!("image {id}: no proposal clears the overlap threshold, skipped");
            }
            Err(e) => return Err(e),
        }
    }
    let dim = pool.dim();
    if let Some(c) = out.iter().find(|c| c.vector.len() != dim) {
        return Err(Error::DimensionMismatch {
            expected: dim,
            found: c.vector.len(),
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Trainer {
    Sgd,
    Cp,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EtaSchedule {
    /// `eta_t = 1 / (lambda t)`
    InverseLambdaT,
    Constant(f64),
    /// Not an SGD model.
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub w: Vec<f64>,
    /// `w / |w|`, or zero when `w` is zero.
    pub w_hat: Vec<f64>,
    pub trainer: Trainer,
    pub lambda: f64,
    pub eta_schedule: EtaSchedule,
    pub epochs: usize,
    pub seed: u64,
    pub objective_value: f64,
    /// Total SGD steps behind `w`, used to continue the step-size schedule on warm starts.
    pub steps: u64,
    /// Objective after each SGD epoch, or the working-set objective after each CP iteration.
    pub history: Vec<f64>,
}

impl Model {
    pub fn zeros(dim: usize) -> Self {
        Model {
            w: vec![0.0; dim],
            w_hat: vec![0.0; dim],
            trainer: Trainer::Sgd,
            lambda: 0.0,
            eta_schedule: EtaSchedule::None,
            epochs: 0,
            seed: 0,
            objective_value: f64::NAN,
            steps: 0,
            history: Vec::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.w.len()
    }

    pub fn is_zero(&self) -> bool {
        self.w.iter().all(|&v| v == 0.0)
    }

    /// Copy with `w` replaced (and `w_hat` recomputed).
    pub fn with_weights(&self, w: Vec<f64>) -> Self {
        Model {
            w_hat: normalized(&w),
            w,
            ..self.clone()
        }
    }

    /// Raw score `w . psi(y)`.
    pub fn score(&self, img: &ImageSample, y: usize) -> Result<f64> {
        let f = img.feature(y)?;
        if f.len() != self.w.len() {
            return Err(Error::DimensionMismatch {
                expected: self.w.len(),
                found: f.len(),
            });
        }
        Ok(dot(&self.w, f))
    }

    /// Normalized score `w_hat . psi(y)`.
    pub fn score_hat(&self, img: &ImageSample, y: usize) -> Result<f64> {
        let f = img.feature(y)?;
        if f.len() != self.w.len() {
            return Err(Error::DimensionMismatch {
                expected: self.w.len(),
                found: f.len(),
            });
        }
        Ok(dot(&self.w_hat, f))
    }
}

/// `w . psi(img, y)`
pub fn score(model: &Model, img: &ImageSample, y: usize) -> Result<f64> {
    model.score(img, y)
}

/// `lambda/2 |w|^2 + mean hinge`
pub fn objective(constraints: &[Constraint], w: &[f64], lambda: f64) -> f64 {
    let hinge: f64 = constraints.iter().map(|c| (1.0 - c.signed_margin(w)).max(0.0)).sum();
    let n = constraints.len().max(1) as f64;
    0.5 * lambda * dot(w, w) + hinge / n
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdParams {
    pub lambda: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Step size when `lambda == 0`.
    pub eta0: f64,
}

impl Default for SgdParams {
    fn default() -> Self {
        SgdParams {
            lambda: 1e-2,
            epochs: 20,
            seed: 0,
            eta0: 0.1,
        }
    }
}

impl SgdParams {
    fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config("lambda must be finite and non-negative".into()));
        }
        if self.lambda == 0.0 && !(self.eta0 > 0.0 && self.eta0.is_finite()) {
            return Err(Error::Config("eta0 must be positive when lambda is 0".into()));
        }
        Ok(())
    }

    pub fn eta(&self, t: u64) -> f64 {
        if self.lambda > 0.0 {
            1.0 / (self.lambda * t as f64)
        } else {
            self.eta0
        }
    }

    fn schedule(&self) -> EtaSchedule {
        if self.lambda > 0.0 {
            EtaSchedule::InverseLambdaT
        } else {
            EtaSchedule::Constant(self.eta0)
        }
    }
}

/// One stochastic subgradient step on a single constraint:
/// `w <- (1 - eta lambda) w + eta s x` when the hinge is active, else only the shrink.
#[inline]
pub fn sgd_step(w: &mut [f64], x: &[f64], sign: f64, eta: f64, lambda: f64) {
    let active = sign * dot(w, x) < 1.0;
    let shrink = 1.0 - eta * lambda;
    if shrink != 1.0 {
        scale(shrink, w);
    }
    if active {
        axpy(eta * sign, x, w);
    }
}

/// Stochastic subgradient training from `w = 0`.
pub fn train_sgd(constraints: &[Constraint], params: &SgdParams) -> Result<Model> {
    let dim = constraints.first().map_or(0, |c| c.vector.len());
    train_sgd_from(constraints, params, &vec![0.0; dim], 0)
}

/// Continues stochastic subgradient training from `w0`, whose schedule has
/// already taken `t0` steps. Each epoch visits every constraint once in a
/// seeded shuffled order.
pub fn train_sgd_from(constraints: &[Constraint], params: &SgdParams, w0: &[f64], t0: u64) -> Result<Model> {
    params.validate()?;
    if constraints.is_empty() {
        return Err(Error::EmptyTrainingSet);
    }
    let dim = w0.len();
    if let Some(c) = constraints.iter().find(|c| c.vector.len() != dim) {
        return Err(Error::DimensionMismatch {
            expected: dim,
            found: c.vector.len(),
        });
    }
    let radius = if params.lambda > 0.0 {
        1.0 / params.lambda.sqrt()
    } else {
        f64::INFINITY
    };
    let mut rng = rng::rng_from(params.seed, &[rng::TAG_TRAIN]);
    let mut order: Vec<usize> = (0..constraints.len()).collect();
    let mut w = w0.to_vec();
    let mut t = t0;
    let mut history = Vec::with_capacity(params.epochs);
    for epoch in 0..params.epochs {
        order.shuffle(&mut rng);
        for &k in &order {
            t += 1;
            let c = &constraints[k];
            sgd_step(&mut w, &c.vector, c.sign.value(), params.eta(t), params.lambda);
            let n = norm(&w);
            if n > radius {
                scale(radius / n, &mut w);
            }
        }
        if w.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence(format!("non-finite weight after epoch {epoch}")));
        }
        history.push(objective(constraints, &w, params.lambda));
    }
    let objective_value = objective(constraints, &w, params.lambda);
    Ok(Model {
        w_hat: normalized(&w),
        w,
        trainer: Trainer::Sgd,
        lambda: params.lambda,
        eta_schedule: params.schedule(),
        epochs: params.epochs,
        seed: params.seed,
        objective_value,
        steps: t,
        history,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CpParams {
    pub lambda: f64,
    /// Stop once no constraint outside the working set is violated by `tol` or more.
    pub tol: f64,
    pub max_iter: usize,
    /// Largest projected-gradient magnitude at which the working-set dual solve stops.
    pub inner_eps: f64,
    pub max_sweeps: usize,
}

impl Default for CpParams {
    fn default() -> Self {
        CpParams {
            lambda: 1e-2,
            tol: 1e-6,
            max_iter: 10_000,
            inner_eps: 1e-10,
            max_sweeps: 200_000,
        }
    }
}

/// Cutting-plane training with default solver settings.
pub fn train_cutting_plane(constraints: &[Constraint], lambda: f64, tol: f64) -> Result<Model> {
    train_cp(
        constraints,
        &CpParams {
            lambda,
            tol,
            ..Default::default()
        },
    )
}

/// Cutting-plane training.
///
/// Each iteration adds, for every image, its most violated constraint not yet
/// in the working set, then re-solves the working-set dual
///
/// ```text
/// max  sum_k b_k - 1/2 |sum_k b_k s_k v_k|^2,   0 <= b_k <= 1/(lambda n)
/// ```
///
/// by coordinate ascent warm-started from the previous solution, with
/// `w = sum_k b_k s_k v_k`. With `lambda = 0` the box is unbounded and the
/// solver returns the hard-margin solution, which requires separable data.
pub fn train_cp(constraints: &[Constraint], params: &CpParams) -> Result<Model> {
    if !(params.lambda >= 0.0 && params.lambda.is_finite()) {
        return Err(Error::Config("lambda must be finite and non-negative".into()));
    }
    if params.tol.is_nan() || params.tol <= 0.0 {
        return Err(Error::Config("tol must be positive".into()));
    }
    if constraints.is_empty() {
        return Err(Error::EmptyTrainingSet);
    }
    let n = constraints.len();
    let dim = constraints[0].vector.len();
    if let Some(c) = constraints.iter().find(|c| c.vector.len() != dim) {
        return Err(Error::DimensionMismatch {
            expected: dim,
            found: c.vector.len(),
        });
    }
    let upper = if params.lambda > 0.0 {
        1.0 / (params.lambda * n as f64)
    } else {
        f64::INFINITY
    };
    let sq: Vec<f64> = constraints.iter().map(|c| dot(&c.vector, &c.vector)).collect();
    let mut beta = vec![0.0; n];
    let mut in_ws = vec![false; n];
    let mut ws: Vec<usize> = Vec::new();
    let mut w = vec![0.0; dim];
    let mut history = Vec::new();

    for _ in 0..params.max_iter {
        // most violated constraint per image among those not yet in the working set
        let mut worst: Vec<(ImageId, usize, f64)> = Vec::new();
        let mut max_violation = f64::NEG_INFINITY;
        for (k, c) in constraints.iter().enumerate() {
            if in_ws[k] {
                continue;
            }
            let v = 1.0 - c.signed_margin(&w);
            max_violation = max_violation.max(v);
            if v < params.tol {
                continue;
            }
            match worst.iter_mut().find(|(id, _, _)| *id == c.image_id) {
                Some(slot) if v > slot.2 => *slot = (c.image_id, k, v),
                Some(_) => {}
                None => worst.push((c.image_id, k, v)),
            }
        }
        if max_violation < params.tol || worst.is_empty() {
            break;
        }
        for (_, k, _) in worst {
            in_ws[k] = true;
            ws.push(k);
        }
        solve_working_set(constraints, &sq, &ws, upper, params, &mut beta, &mut w)?;
        let dual = beta.iter().sum::<f64>() - 0.5 * dot(&w, &w);
        history.push(if params.lambda > 0.0 {
            params.lambda * dual
        } else {
            dual
        });
    }

    let objective_value = objective(constraints, &w, params.lambda);
    Ok(Model {
        w_hat: normalized(&w),
        w,
        trainer: Trainer::Cp,
        lambda: params.lambda,
        eta_schedule: EtaSchedule::None,
        epochs: history.len(),
        seed: 0,
        objective_value,
        steps: 0,
        history,
    })
}

fn solve_working_set(
    constraints: &[Constraint],
    sq: &[f64],
    ws: &[usize],
    upper: f64,
    params: &CpParams,
    beta: &mut [f64],
    w: &mut [f64],
) -> Result<()> {
    for _ in 0..params.max_sweeps {
        let mut pg_worst = 0.0f64;
        for &k in ws {
            if sq[k] == 0.0 {
                continue;
            }
            let c = &constraints[k];
            let s = c.sign.value();
            let g = s * dot(w, &c.vector) - 1.0;
            let pg = if beta[k] <= 0.0 {
                g.min(0.0)
            } else if beta[k] >= upper {
                g.max(0.0)
            } else {
                g
            };
            pg_worst = pg_worst.max(pg.abs());
            if pg != 0.0 {
                let new = (beta[k] - g / sq[k]).clamp(0.0, upper);
                let delta = new - beta[k];
                if delta != 0.0 {
                    axpy(delta * s, &c.vector, w);
                    beta[k] = new;
                }
            }
        }
        if w.iter().any(|v| !v.is_finite()) || beta.iter().any(|&b| b > 1e15) {
            return Err(Error::Divergence(
                "dual variables unbounded; constraints are not separable at lambda = 0".into(),
            ));
        }
        if pg_worst <= params.inner_eps {
            return Ok(());
        }
    }
    if upper.is_infinite() {
        return Err(Error::Divergence(
            "hard-margin dual did not converge; constraints are likely not separable".into(),
        ));
    }
    log::warn!("cutting-plane inner solve hit the sweep limit");
    Ok(())
}

/// `min |w_hat . F(x_j, y_j, y)|` over the annotated images and their proposals.
pub fn min_margin(model: &Model, pool: &Pool, annotated: &[ImageId]) -> Result<f64> {
    if annotated.is_empty() {
        return Err(Error::EmptyAnnotated);
    }
    let constraints = build_constraints(pool, annotated)?;
    if constraints.is_empty() {
        return Err(Error::EmptyTrainingSet);
    }
    Ok(constraints
        .iter()
        .map(|c| dot(&model.w_hat, &c.vector).abs())
        .fold(f64::INFINITY, f64::min))
}
