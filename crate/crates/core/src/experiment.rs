//! The active-learning loop: seed, then train, evaluate, query and reveal until
//! the budget is spent.
//!
//! An [`Experiment`] is a resumable state machine. Every random draw is derived
//! from `(seed, round)`, so a run restored from [`ExperimentState`] continues
//! exactly like an uninterrupted one.

use std::collections::BTreeSet;
use std::time::{Duration, Instant};

use rand::seq::IteratorRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{evaluate, pct_full_supervision, ComparisonTable, LearningCurve, MetricKind};
use crate::geometry::ImageId;
use crate::mssvm::{build_constraints, train_cp, train_sgd, Constraint, CpParams, Model, SgdParams, Trainer};
use crate::pool::{Pool, Split};
use crate::rng;
use crate::strategies::{self, QueryConfig, Strategy};
use crate::versionspace::{reduction_rank, QueryTrace, ReductionRank};

/// Version of the checkpoint and results schemas.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainerConfig {
    pub trainer: Trainer,
    pub lambda: f64,
    pub epochs: usize,
    /// SGD step size when `lambda == 0`.
    pub eta0: f64,
    /// Cutting-plane violation tolerance.
    pub tol: f64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            trainer: Trainer::Sgd,
            lambda: 1e-2,
            epochs: 20,
            eta0: 0.1,
            tol: 1e-4,
        }
    }
}

impl TrainerConfig {
    /// Trains on `constraints`; an empty set yields the zero model.
    pub fn train(&self, constraints: &[Constraint], dim: usize, seed: u64) -> Result<Model> {
        if constraints.is_empty() {
            return Ok(Model::zeros(dim));
        }
        match self.trainer {
            Trainer::Sgd => train_sgd(
                constraints,
                &SgdParams {
                    lambda: self.lambda,
                    epochs: self.epochs,
                    seed,
                    eta0: self.eta0,
                },
            ),
            Trainer::Cp => train_cp(
                constraints,
                &CpParams {
                    lambda: self.lambda,
                    tol: self.tol,
                    ..CpParams::default()
                },
            ),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub query: QueryConfig,
    pub trainer: TrainerConfig,
    /// Annotated images at which the run stops (seed set included).
    pub budget: usize,
    pub seed_size: usize,
    pub batch: usize,
    pub metric: MetricKind,
    pub seeds: Vec<u64>,
    /// Curve change that marks a query as influential (gain) or outlier (drop).
    pub influence_eps: f64,
    /// Record the APT trace of each query (for the warm-start gap report).
    pub record_trace: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            query: QueryConfig::default(),
            trainer: TrainerConfig::default(),
            budget: 60,
            seed_size: 2,
            batch: 1,
            metric: MetricKind::Accuracy,
            seeds: vec![0],
            influence_eps: 0.02,
            record_trace: false,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self, pool: &Pool) -> Result<()> {
        self.query.validate()?;
        let n_train = pool.train_ids().len();
        if self.seed_size == 0 {
            return Err(Error::Config("seed_size must be at least 1".into()));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch must be at least 1".into()));
        }
        if self.budget > n_train {
            return Err(Error::Config(format!(
                "budget {} exceeds the {n_train} training images",
                self.budget
            )));
        }
        if self.budget < self.seed_size {
            return Err(Error::Config(format!(
                "budget {} is smaller than seed_size {}",
                self.budget, self.seed_size
            )));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if !(self.trainer.lambda >= 0.0 && self.trainer.lambda.is_finite()) {
            return Err(Error::Config("lambda must be finite and non-negative".into()));
        }
        if self.trainer.epochs == 0 {
            return Err(Error::Config("epochs must be positive".into()));
        }
        let positives = positive_train_ids(pool)?.len();
        if self.seed_size > positives {
            return Err(Error::Config(format!(
                "seed_size {} exceeds the {positives} positive training images",
                self.seed_size
            )));
        }
        Ok(())
    }
}

fn positive_train_ids(pool: &Pool) -> Result<Vec<ImageId>> {
    let mut out = Vec::new();
    for id in pool.train_ids() {
        if pool.image(id)?.is_positive() {
            out.push(id);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Effect {
    Influential,
    Outlier,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryLogEntry {
    pub round: usize,
    pub n_annotated_before: usize,
    pub chosen: Vec<ImageId>,
    /// Strategy that made the choice; differs from the configured one after a fallback.
    pub strategy: Strategy,
    pub fallback: bool,
    pub scores: std::collections::BTreeMap<ImageId, Option<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub effect: Option<Effect>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace: Option<QueryTrace>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PhaseTimings {
    pub train: Duration,
    pub eval: Duration,
    pub query: Duration,
}

/// Everything needed to continue a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentState {
    pub version: u32,
    pub config: ExperimentConfig,
    pub seed: u64,
    /// Pool shape the state was created for: (images, train images, dimension).
    pub pool_shape: (usize, usize, usize),
    pub seed_set: Vec<ImageId>,
    /// Annotated images in annotation order.
    pub annotated: Vec<ImageId>,
    pub round: usize,
    pub curve: LearningCurve,
    pub query_log: Vec<QueryLogEntry>,
    /// Images whose constraints entered training, per round.
    pub trained_on: Vec<Vec<ImageId>>,
    pub finished: bool,
    #[serde(skip)]
    pub timings: PhaseTimings,
}

#[derive(Debug)]
pub struct Experiment {
    pool: Pool,
    state: ExperimentState,
}

fn pool_shape(pool: &Pool) -> (usize, usize, usize) {
    (pool.len(), pool.train_ids().len(), pool.dim())
}

impl Experiment {
    /// Starts a run: draws the seed set of positive training images.
    pub fn new(cfg: &ExperimentConfig, pool: &Pool, seed: u64) -> Result<Self> {
        cfg.validate(pool)?;
        let mut pool = pool.clone();
        pool.clear_annotations();
        let mut rng = rng::rng_from(seed, &[rng::TAG_INIT]);
        let mut seed_set = positive_train_ids(&pool)?
            .into_iter()
            .choose_multiple(&mut rng, cfg.seed_size);
        seed_set.sort_unstable();
        for &id in &seed_set {
            pool.annotate(id)?;
        }
        let state = ExperimentState {
            version: SCHEMA_VERSION,
            config: cfg.clone(),
            seed,
            pool_shape: pool_shape(&pool),
            annotated: seed_set.clone(),
            seed_set,
            round: 0,
            curve: LearningCurve::new(cfg.query.strategy.name(), seed, cfg.metric),
            query_log: Vec::new(),
            trained_on: Vec::new(),
            finished: false,
            timings: PhaseTimings::default(),
        };
        Ok(Experiment { pool, state })
    }

    /// Restores a run on the pool it was started with.
    pub fn from_state(pool: &Pool, state: ExperimentState) -> Result<Self> {
        if state.version != SCHEMA_VERSION {
            return Err(Error::Schema(format!(
                "checkpoint version {} is not supported (expected {SCHEMA_VERSION})",
                state.version
            )));
        }
        if state.pool_shape != pool_shape(pool) {
            return Err(Error::Schema("checkpoint was taken on a different pool".into()));
        }
        state.config.validate(pool)?;
        let mut pool = pool.clone();
        pool.clear_annotations();
        for &id in &state.annotated {
            pool.annotate(id)?;
        }
        Ok(Experiment { pool, state })
    }

    pub fn state(&self) -> &ExperimentState {
        &self.state
    }

    pub fn pool(&self) -> &Pool {
        &self.pool
    }

    pub fn is_finished(&self) -> bool {
        self.state.finished
    }

    /// Trains on the annotated set and checks that nothing else leaked in.
    fn train(&mut self) -> Result<Model> {
        let cfg = &self.state.config;
        let cs = build_constraints(&self.pool, self.pool.annotated())?;
        let used: BTreeSet<ImageId> = cs.iter().map(|c| c.image_id).collect();
        for &id in &used {
            if !self.pool.is_annotated(id) || self.pool.split(id)? != Split::Train {
                return Err(Error::Leakage(id));
            }
        }
        self.state.trained_on.push(used.into_iter().collect());
        let seed = rng::derive_seed(self.state.seed, &[rng::TAG_TRAIN, self.state.round as u64]);
        cfg.trainer.train(&cs, self.pool.dim(), seed)
    }

    /// One round: train, evaluate, and (unless the budget is reached) query and annotate.
    pub fn step(&mut self) -> Result<()> {
        if self.state.finished {
            return Ok(());
        }
        let t = Instant::now();
        let model = self.train()?;
        self.state.timings.train += t.elapsed();

        let t = Instant::now();
        let value = evaluate(&model, &self.pool, self.state.config.metric)?;
        let n_train = self.state.pool_shape.1;
        self.state.curve.push(self.pool.annotated().len(), n_train, value)?;
        self.state.timings.eval += t.elapsed();

        let cfg = &self.state.config;
        let n = self.pool.annotated().len();
        if n >= cfg.budget {
            self.finish();
            return Ok(());
        }
        let t = Instant::now();
        let rng_seed = rng::derive_seed(self.state.seed, &[rng::TAG_QUERY, self.state.round as u64]);
        let result = match strategies::query(&model, &self.pool, &cfg.query, rng_seed, self.state.round) {
            Err(Error::EmptyCandidates) => {
                log::info!("no candidates left after {n} annotations");
                self.finish();
                return Ok(());
            }
            r => r?,
        };
        self.state.timings.query += t.elapsed();
        let take = cfg.batch.min(cfg.budget - n);
        let chosen: Vec<ImageId> = result.top(take).to_vec();
        let trace = match (&result.detail, cfg.record_trace) {
            (Some(d), true) if d.y_star.is_some() => Some(QueryTrace {
                annotated_before: self.pool.annotated().to_vec(),
                w_t: model.w.clone(),
                steps: model.steps,
                image: result.chosen,
                predicted: d.predicted.clone(),
                y_star: d.y_star.unwrap_or_default(),
            }),
            _ => None,
        };
        for &id in &chosen {
            self.pool.annotate(id)?;
            self.state.annotated.push(id);
        }
        self.state.query_log.push(QueryLogEntry {
            round: self.state.round,
            n_annotated_before: n,
            chosen,
            strategy: result.strategy,
            fallback: result.fallback,
            scores: result.scores,
            effect: None,
            trace,
        });
        self.state.round += 1;
        Ok(())
    }

    fn finish(&mut self) {
        self.state.finished = true;
        let eps = self.state.config.influence_eps;
        let points = &self.state.curve.points;
        for (k, entry) in self.state.query_log.iter_mut().enumerate() {
            let (Some(a), Some(b)) = (points.get(k), points.get(k + 1)) else {
                continue;
            };
            let delta = b.metric_value - a.metric_value;
            entry.effect = if delta > eps {
                Some(Effect::Influential)
            } else if delta < -eps {
                Some(Effect::Outlier)
            } else {
                None
            };
        }
    }

    pub fn run_to_end(&mut self) -> Result<()> {
        while !self.state.finished {
            self.step()?;
        }
        Ok(())
    }

    pub fn into_seed_run(self) -> SeedRun {
        let s = self.state;
        SeedRun {
            seed: s.seed,
            seed_set: s.seed_set,
            query_log: s.query_log,
            curve: s.curve,
            trained_on: s.trained_on,
            timings: s.timings,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    pub seed_set: Vec<ImageId>,
    pub query_log: Vec<QueryLogEntry>,
    pub curve: LearningCurve,
    pub trained_on: Vec<Vec<ImageId>>,
    #[serde(skip)]
    pub timings: PhaseTimings,
}

impl SeedRun {
    /// Checks that every training round used only images annotated by then.
    pub fn audit(&self) -> Result<()> {
        let mut allowed: BTreeSet<ImageId> = self.seed_set.iter().copied().collect();
        for (round, used) in self.trained_on.iter().enumerate() {
            if let Some(&bad) = used.iter().find(|id| !allowed.contains(id)) {
                return Err(Error::Leakage(bad));
            }
            if let Some(entry) = self.query_log.get(round) {
                allowed.extend(entry.chosen.iter().copied());
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub version: u32,
    pub config: ExperimentConfig,
    pub runs: Vec<SeedRun>,
    /// Mean over seeds at the annotated counts every run reached.
    pub mean_curve: LearningCurve,
}

impl RunRecord {
    pub fn timings(&self) -> PhaseTimings {
        self.runs.iter().fold(PhaseTimings::default(), |acc, r| PhaseTimings {
            train: acc.train + r.timings.train,
            eval: acc.eval + r.timings.eval,
            query: acc.query + r.timings.query,
        })
    }
}

/// Pointwise mean of curves over the annotated counts they share.
pub fn mean_curve(curves: &[LearningCurve], n_train: usize) -> Result<LearningCurve> {
    let first = curves
        .first()
        .ok_or_else(|| Error::InvalidInput("no curves to average".into()))?;
    let mut out = LearningCurve::new(first.strategy.clone(), first.seed, first.metric);
    for p in &first.points {
        let values: Vec<f64> = curves
            .iter()
            .filter_map(|c| c.points.iter().find(|q| q.n_annotated == p.n_annotated))
            .map(|q| q.metric_value)
            .collect();
        if values.len() == curves.len() {
            out.push(p.n_annotated, n_train, values.iter().sum::<f64>() / values.len() as f64)?;
        }
    }
    Ok(out)
}

/// Runs the configured strategy once per seed.
pub fn run_experiment(cfg: &ExperimentConfig, pool: &Pool) -> Result<RunRecord> {
    let mut runs = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let mut e = Experiment::new(cfg, pool, seed)?;
        e.run_to_end()?;
        runs.push(e.into_seed_run());
    }
    let curves: Vec<LearningCurve> = runs.iter().map(|r| r.curve.clone()).collect();
    Ok(RunRecord {
        version: SCHEMA_VERSION,
        config: cfg.clone(),
        mean_curve: mean_curve(&curves, pool.train_ids().len())?,
        runs,
    })
}

/// Metric of a model trained on every training image.
pub fn full_supervision(cfg: &ExperimentConfig, pool: &Pool, seed: u64) -> Result<f64> {
    let cs = build_constraints(pool, &pool.train_ids())?;
    let model = cfg
        .trainer
        .train(&cs, pool.dim(), rng::derive_seed(seed, &[rng::TAG_TRAIN, u64::MAX]))?;
    evaluate(&model, pool, cfg.metric)
}

/// Annotated count at which a curve first reaches `fraction` of `full`;
/// runs that never get there are charged the whole training split.
pub fn budget_to_reach(curve: &LearningCurve, full: f64, fraction: f64, n_train: usize) -> usize {
    curve.first_reaching(fraction * full).unwrap_or(n_train)
}

/// One class of a comparison: a named pool.
pub struct ClassPool<'a> {
    pub name: String,
    pub pool: &'a Pool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub version: u32,
    pub budget_fraction: f64,
    pub table: ComparisonTable,
    /// Full-supervision metric per class.
    pub full: Vec<(String, f64)>,
    pub records: Vec<(String, RunRecord)>,
}

/// Runs every strategy on every class with the same seeds and reports, per
/// cell, the seed-averaged best metric within `budget_fraction` of the
/// training split as a percentage of full supervision.
pub fn compare_strategies(
    cfg: &ExperimentConfig,
    strategies: &[Strategy],
    classes: &[ClassPool<'_>],
    budget_fraction: f64,
) -> Result<Comparison> {
    if strategies.is_empty() || classes.is_empty() {
        return Err(Error::Config("need at least one strategy and one class".into()));
    }
    if !(budget_fraction > 0.0 && budget_fraction <= 1.0) {
        return Err(Error::Config("budget fraction must lie in (0, 1]".into()));
    }
    let mut table = ComparisonTable::new(strategies.iter().map(|s| s.name().to_uppercase()).collect());
    let mut full = Vec::new();
    let mut records = Vec::new();
    for class in classes {
        let n_train = class.pool.train_ids().len();
        let full_value = full_supervision(cfg, class.pool, cfg.seeds[0])?;
        let mut row = Vec::with_capacity(strategies.len());
        for &strategy in strategies {
            let mut c = cfg.clone();
            c.query.strategy = strategy;
            c.budget = ((budget_fraction * n_train as f64).floor() as usize).clamp(c.seed_size, n_train);
            let record = run_experiment(&c, class.pool)?;
            let mut sum = 0.0;
            for r in &record.runs {
                sum += pct_full_supervision(&r.curve, full_value, budget_fraction)?;
            }
            row.push(sum / record.runs.len() as f64);
            records.push((format!("{}/{}", class.name, strategy), record));
        }
        table.push_row(class.name.clone(), row)?;
        full.push((class.name.clone(), full_value));
    }
    Ok(Comparison {
        version: SCHEMA_VERSION,
        budget_fraction,
        table,
        full,
        records,
    })
}

/// Version-space reduction of each of the first `steps` queries of a run,
/// measured on the pool as it was before the query.
pub fn reduction_trace(
    cfg: &ExperimentConfig,
    pool: &Pool,
    seed: u64,
    steps: usize,
    n_samples: usize,
) -> Result<Vec<ReductionRank>> {
    let mut e = Experiment::new(cfg, pool, seed)?;
    let mut out = Vec::with_capacity(steps);
    while out.len() < steps && !e.is_finished() {
        let before = e.state().query_log.len();
        e.step()?;
        let Some(entry) = e.state().query_log.get(before) else {
            continue;
        };
        let mut prior = pool.clone();
        prior.clear_annotations();
        for &id in &e.state().annotated[..entry.n_annotated_before] {
            prior.annotate(id)?;
        }
        let cands = strategies::candidates(&prior, &cfg.query)?;
        let sample_seed = rng::derive_seed(seed, &[rng::TAG_SHARD, entry.round as u64]);
        out.push(reduction_rank(&prior, &cands, entry.chosen[0], n_samples, sample_seed)?);
    }
    Ok(out)
}

/// Runs one seed with trace recording on and returns the traced queries.
pub fn query_traces(cfg: &ExperimentConfig, pool: &Pool, seed: u64) -> Result<Vec<QueryTrace>> {
    let cfg = ExperimentConfig {
        record_trace: true,
        ..cfg.clone()
    };
    let mut e = Experiment::new(&cfg, pool, seed)?;
    e.run_to_end()?;
    Ok(e.into_seed_run()
        .query_log
        .into_iter()
        .filter_map(|q| q.trace)
        .collect())
}
