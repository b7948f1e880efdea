//! The optimization loop: propose a batch, evaluate the objective, refresh
//! the model, recommend a minimizer.
//!
//! The loop is deliberately small. Model building lives in [`crate::gp`],
//! batch selection in [`crate::acquisition`], hyperparameter sampling in
//! [`crate::hyper`]; this module owns the bookkeeping that strings them
//! together reproducibly: which stream every random draw comes from, how
//! evaluation failures are retried, and what ends up in the trace.

use std::time::Instant;

use nalgebra::DVector;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::acquisition::{
    d_ei_select, d_ei_value, ei_select, maximize_batch, ucb_beta, ucb_pe_select_integrated,
    AcquisitionBudget, AcquisitionEstimate, CandidateBatch, FantasyScheme,
};
use crate::domain::Domain;
use crate::error::{Error, Result};
use crate::gp::{build_posterior, GpPosterior, ObservationRecord};
use crate::hyper::sample_hyperparameters;
use crate::kernel::KernelSpec;
use crate::opt::{grid_argmin, mesh, multistart_minimize};
use crate::stream::{
    child_seed, substream, STREAM_DESIGN, STREAM_EVAL, STREAM_HYPER, STREAM_RECOMMEND,
    STREAM_SELECT,
};

/// What the loop observes at each evaluated point.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Value plus one directional derivative along the batch direction.
    Directional,
    /// Value plus every partial the availability mask allows.
    FullGradient,
    /// Value only.
    ValueOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AcquisitionKind {
    Dkg,
    Kg,
    Ei,
    Dei,
    UcbPe,
}

/// Hyperparameter treatment: a fixed kernel, or posterior samples refreshed
/// on the documented cadence.
#[derive(Debug, Clone)]
pub enum HyperMode {
    Fixed { kernel: KernelSpec, prior_mean: f64 },
    Sampled { m: usize, walkers: usize, burn_in: usize },
}

/// Everything a run needs besides the objective and the seed.
#[derive(Debug, Clone)]
pub struct ProblemSpec {
    pub domain: Domain,
    pub q: usize,
    pub iterations: usize,
    pub mode: Mode,
    /// Which partials are observable (used by `FullGradient` mode and by the
    /// derivative-aware EI believers).
    pub mask: Vec<bool>,
    pub acquisition: AcquisitionKind,
    pub hyper: HyperMode,
    pub budget: AcquisitionBudget,
    /// Monte-Carlo draws behind the reported acquisition value for the EI
    /// family (the KG family reports its re-ranking estimate instead).
    pub fantasies: usize,
}

impl ProblemSpec {
    pub fn new(
        domain: Domain,
        q: usize,
        iterations: usize,
        mode: Mode,
        acquisition: AcquisitionKind,
    ) -> Self {
        let d = domain.dim();
        Self {
            domain,
            q,
            iterations,
            mode,
            mask: vec![true; d],
            acquisition,
            hyper: HyperMode::Sampled {
                m: 10,
                walkers: 20,
                burn_in: 200,
            },
            budget: AcquisitionBudget::default(),
            fantasies: 1024,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.q == 0 {
            return Err(Error::Contract("batch size must be at least 1".into()));
        }
        if self.iterations == 0 {
            return Err(Error::Contract("need at least one iteration".into()));
        }
        if self.mask.len() != self.domain.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.domain.dim(),
                got: self.mask.len(),
            });
        }
        if self.mode == Mode::Directional && self.mask.iter().any(|m| !m) {
            return Err(Error::Contract(
                "directional mode needs every partial observable".into(),
            ));
        }
        if let HyperMode::Fixed { kernel, .. } = &self.hyper {
            if kernel.dim() != self.domain.dim() {
                return Err(Error::DimensionMismatch {
                    expected: self.domain.dim(),
                    got: kernel.dim(),
                });
            }
        }
        Ok(())
    }

    /// The fantasy channels implied by the observation mode.
    pub fn scheme(&self) -> FantasyScheme {
        match self.mode {
            Mode::Directional => FantasyScheme::Directional,
            Mode::FullGradient => FantasyScheme::Partials(self.mask.clone()),
            Mode::ValueOnly => FantasyScheme::ValueOnly,
        }
    }
}

/// What an [`Objective`] is asked to measure at one point.
#[derive(Debug, Clone)]
pub enum ObservationRequest<'a> {
    Value,
    ValueAndPartials(&'a [bool]),
    ValueAndDirectional(&'a DVector<f64>),
}

/// An evaluable objective. Implementations draw their observation noise from
/// the supplied generator so the loop's stream discipline covers them.
pub trait Objective: Sync {
    fn dim(&self) -> usize;

    fn evaluate(
        &self,
        x: &DVector<f64>,
        request: &ObservationRequest,
        rng: &mut ChaCha8Rng,
    ) -> Result<ObservationRecord>;

    /// Noise-free objective value, when the ground truth is known (used for
    /// regret accounting, never by the optimizer).
    fn true_value(&self, x: &DVector<f64>) -> Option<f64>;
}

/// One row of the trace.
#[derive(Debug, Clone)]
pub struct IterationRecord {
    pub iteration: usize,
    /// Cumulative successful evaluations including the initial design.
    pub eval_count: usize,
    pub batch: CandidateBatch,
    pub observations: Vec<ObservationRecord>,
    pub recommendation: DVector<f64>,
    /// Model-averaged posterior mean at the recommendation.
    pub rec_mean: f64,
    /// Ground-truth value at the recommendation, when the objective knows it.
    pub rec_true: Option<f64>,
    pub acq: AcquisitionEstimate,
    pub wall_ms: f64,
    /// Log posteriors of the hyperparameter samples behind this iteration
    /// (empty under fixed hyperparameters).
    pub hyper_log_posteriors: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct RunTrace {
    /// Evaluations spent on the initial design.
    pub initial_evals: usize,
    pub records: Vec<IterationRecord>,
    /// False when an objective failure aborted the run early.
    pub complete: bool,
}

/// Mutable loop state; advance it with [`step`] or drive it to completion
/// with [`run`].
#[derive(Debug)]
pub struct RunState {
    problem: ProblemSpec,
    seed: u64,
    iteration: usize,
    eval_count: usize,
    initial_evals: usize,
    history: Vec<ObservationRecord>,
    hyper: Vec<(KernelSpec, f64)>,
    hyper_log_posteriors: Vec<f64>,
    records: Vec<IterationRecord>,
    aborted: bool,
}

/// Evaluates one point with the retry policy: a failure redraws the point
/// uniformly once; a second failure gives up.
fn evaluate_with_retry(
    objective: &dyn Objective,
    domain: &Domain,
    x: &DVector<f64>,
    request: &ObservationRequest,
    seed: u64,
    eval_index: usize,
) -> Result<ObservationRecord> {
    let mut rng = substream(seed, STREAM_EVAL + eval_index as u64);
    match objective.evaluate(x, request, &mut rng) {
        Ok(rec) => Ok(rec),
        Err(first) => {
            let retry = domain.sample_uniform(&mut rng);
            log::warn!(
                "objective failed at {:?} ({first}); redrawing to {:?}",
                x.as_slice(),
                retry.as_slice()
            );
            objective.evaluate(&retry, request, &mut rng).map_err(|second| {
                Error::Evaluation(format!(
                    "evaluation failed twice (original point {:?}: {first}; redrawn point {:?}: {second})",
                    x.as_slice(),
                    retry.as_slice()
                ))
            })
        }
    }
}

/// Initial design: evenly spaced grid indices on finite domains, a Halton
/// sequence otherwise, `2 (d + 1)` points either way.
fn design_points(domain: &Domain, count: usize) -> Vec<DVector<f64>> {
    if let Some(grid) = domain.grid() {
        let g = grid.len();
        let mut picked: Vec<usize> = if count >= g {
            (0..g).collect()
        } else {
            (0..count)
                .map(|i| (i * (g - 1)) / (count - 1).max(1))
                .collect()
        };
        picked.dedup();
        picked.into_iter().map(|i| grid[i].clone()).collect()
    } else {
        domain.halton(count)
    }
}

fn random_unit(dim: usize, rng: &mut ChaCha8Rng) -> DVector<f64> {
    loop {
        let v = DVector::from_fn(dim, |_, _| {
            rng.sample::<f64, _>(rand_distr::StandardNormal)
        });
        let n = v.norm();
        if n > 1e-9 {
            return v / n;
        }
    }
}

impl RunState {
    /// Builds the state and spends the initial design budget. An aborted
    /// design (two failures at some point) yields a state that refuses to
    /// step, so the caller still gets a well-formed incomplete trace.
    pub fn initialize(
        problem: ProblemSpec,
        objective: &dyn Objective,
        seed: u64,
    ) -> Result<Self> {
        problem.validate()?;
        if objective.dim() != problem.domain.dim() {
            return Err(Error::DimensionMismatch {
                expected: problem.domain.dim(),
                got: objective.dim(),
            });
        }
        let d = problem.domain.dim();
        let count = 2 * (d + 1);
        let points = design_points(&problem.domain, count);
        let mut design_rng = substream(seed, STREAM_DESIGN);
        let mut history = Vec::with_capacity(points.len());
        let mut aborted = false;
        let mut evals = 0usize;
        for (k, x) in points.iter().enumerate() {
            let theta;
            let request = match problem.mode {
                Mode::Directional => {
                    theta = random_unit(d, &mut design_rng);
                    ObservationRequest::ValueAndDirectional(&theta)
                }
                Mode::FullGradient => ObservationRequest::ValueAndPartials(&problem.mask),
                Mode::ValueOnly => ObservationRequest::Value,
            };
            match evaluate_with_retry(objective, &problem.domain, x, &request, seed, k) {
                Ok(rec) => {
                    history.push(rec);
                    evals += 1;
                }
                Err(e) => {
                    log::warn!("initial design aborted: {e}");
                    aborted = true;
                    break;
                }
            }
        }
        Ok(Self {
            problem,
            seed,
            iteration: 0,
            eval_count: evals,
            initial_evals: evals,
            history,
            hyper: Vec::new(),
            hyper_log_posteriors: Vec::new(),
            records: Vec::new(),
            aborted,
        })
    }

    pub fn problem(&self) -> &ProblemSpec {
        &self.problem
    }

    pub fn history(&self) -> &[ObservationRecord] {
        &self.history
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn eval_count(&self) -> usize {
        self.eval_count
    }

    pub fn aborted(&self) -> bool {
        self.aborted
    }

    pub fn records(&self) -> &[IterationRecord] {
        &self.records
    }

    /// Current hyperparameter settings, resampling first when the cadence
    /// says so: every iteration for the first five, then every fifth.
    fn refresh_hyper(&mut self) -> Result<()> {
        let due = match &self.problem.hyper {
            HyperMode::Fixed { kernel, prior_mean } => {
                if self.hyper.is_empty() {
                    self.hyper = vec![(kernel.clone(), *prior_mean)];
                }
                return Ok(());
            }
            HyperMode::Sampled { .. } => {
                self.hyper.is_empty() || self.iteration < 5 || self.iteration % 5 == 0
            }
        };
        if !due {
            return Ok(());
        }
        let HyperMode::Sampled { m, walkers, burn_in } = self.problem.hyper else {
            unreachable!()
        };
        let samples = sample_hyperparameters(
            &self.history,
            &self.problem.domain,
            m,
            walkers,
            burn_in,
            child_seed(self.seed, STREAM_HYPER + self.iteration as u64),
        )?;
        self.hyper_log_posteriors = samples.iter().map(|s| s.log_posterior).collect();
        self.hyper = samples
            .into_iter()
            .map(|s| (s.kernel, s.prior_mean))
            .collect();
        Ok(())
    }

    fn build_models(&self) -> Result<Vec<GpPosterior>> {
        self.hyper
            .iter()
            .map(|(kernel, mean)| {
                build_posterior(
                    *mean,
                    kernel.clone(),
                    self.problem.domain.clone(),
                    self.history.clone(),
                )
            })
            .collect()
    }

    fn select_batch(
        &self,
        models: &[GpPosterior],
    ) -> Result<(CandidateBatch, AcquisitionEstimate)> {
        let p = &self.problem;
        let sel_seed = child_seed(self.seed, STREAM_SELECT + self.iteration as u64);
        match p.acquisition {
            AcquisitionKind::Dkg | AcquisitionKind::Kg => {
                maximize_batch(models, p.q, &p.scheme(), &p.budget, sel_seed)
            }
            AcquisitionKind::Ei => {
                let batch = ei_select(models, p.q, sel_seed)?;
                let est = integrated_ei_estimate(models, &batch, p.fantasies, sel_seed)?;
                Ok((batch, est))
            }
            AcquisitionKind::Dei => {
                let batch = d_ei_select(models, p.q, &p.mask, sel_seed)?;
                let est = integrated_ei_estimate(models, &batch, p.fantasies, sel_seed)?;
                Ok((batch, est))
            }
            AcquisitionKind::UcbPe => {
                let beta = ucb_beta(self.iteration + 1);
                let batch = ucb_pe_select_integrated(models, p.q, beta, sel_seed)?;
                let x0 = &batch.points[0];
                let m = models.len() as f64;
                let mean: f64 = models.iter().map(|p| p.mean_value(x0)).sum::<f64>() / m;
                let var: f64 =
                    models.iter().map(|p| p.variance_value(x0)).sum::<f64>() / m;
                let lcb = mean - beta.sqrt() * var.max(0.0).sqrt();
                Ok((
                    batch,
                    AcquisitionEstimate {
                        value: lcb,
                        std_error: 0.0,
                        num_fantasies: 0,
                    },
                ))
            }
        }
    }

    /// One propose/evaluate/update/recommend round. Returns `false` when an
    /// evaluation failure aborted the run (the trace so far stays valid).
    pub fn step(&mut self, objective: &dyn Objective) -> Result<bool> {
        if self.aborted {
            return Ok(false);
        }
        if self.iteration >= self.problem.iterations {
            return Err(Error::Contract("iteration budget exhausted".into()));
        }
        let started = Instant::now();
        self.refresh_hyper()?;
        let models = self.build_models()?;
        let (batch, acq) = self.select_batch(&models)?;

        let mut observations = Vec::with_capacity(batch.points.len());
        for (j, x) in batch.points.iter().enumerate() {
            let request = match self.problem.mode {
                Mode::Directional => ObservationRequest::ValueAndDirectional(
                    batch.direction.as_ref().expect("directional batch carries a direction"),
                ),
                Mode::FullGradient => ObservationRequest::ValueAndPartials(&self.problem.mask),
                Mode::ValueOnly => ObservationRequest::Value,
            };
            match evaluate_with_retry(
                objective,
                &self.problem.domain,
                x,
                &request,
                self.seed,
                self.eval_count + j,
            ) {
                Ok(rec) => observations.push(rec),
                Err(e) => {
                    log::warn!("run aborted at iteration {}: {e}", self.iteration);
                    self.aborted = true;
                    return Ok(false);
                }
            }
        }
        self.eval_count += observations.len();
        self.history.extend(observations.iter().cloned());

        let post_models = self.build_models()?;
        let rec_seed = child_seed(self.seed, STREAM_RECOMMEND + self.iteration as u64);
        let (recommendation, rec_mean) = recommend_from_models(&post_models, rec_seed);
        let rec_true = objective.true_value(&recommendation);

        self.records.push(IterationRecord {
            iteration: self.iteration,
            eval_count: self.eval_count,
            batch,
            observations,
            recommendation,
            rec_mean,
            rec_true,
            acq,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
            hyper_log_posteriors: self.hyper_log_posteriors.clone(),
        });
        self.iteration += 1;
        Ok(true)
    }

    /// The current recommendation: argmin of the model-averaged posterior
    /// mean, rebuilt from the current history.
    pub fn recommend(&mut self) -> Result<(DVector<f64>, f64)> {
        self.refresh_hyper()?;
        let models = self.build_models()?;
        let rec_seed = child_seed(self.seed, STREAM_RECOMMEND + self.iteration as u64);
        Ok(recommend_from_models(&models, rec_seed))
    }

    pub fn into_trace(self) -> RunTrace {
        RunTrace {
            initial_evals: self.initial_evals,
            records: self.records,
            complete: !self.aborted,
        }
    }
}

/// Averages `d_ei_value` over the hyperparameter models with a shared fantasy
/// stream; standard errors combine in quadrature.
fn integrated_ei_estimate(
    models: &[GpPosterior],
    batch: &CandidateBatch,
    fantasies: usize,
    seed: u64,
) -> Result<AcquisitionEstimate> {
    let m = models.len() as f64;
    let mut value = 0.0;
    let mut var = 0.0;
    for model in models {
        let est = d_ei_value(model, batch, fantasies, seed)?;
        value += est.value;
        var += est.std_error * est.std_error;
    }
    Ok(AcquisitionEstimate {
        value: value / m,
        std_error: var.sqrt() / m,
        num_fantasies: fantasies,
    })
}

/// Argmin of the model-averaged value-channel posterior mean over the domain:
/// grid enumeration on finite domains, otherwise multi-start projected
/// descent seeded with each model's cached mean minimizer, a Latin hypercube,
/// and (in low dimension) the best point of a dense mesh scan.
pub fn recommend_from_models(models: &[GpPosterior], seed: u64) -> (DVector<f64>, f64) {
    assert!(!models.is_empty(), "need at least one model to recommend");
    let domain = models[0].domain().clone();
    let m = models.len() as f64;
    let avg_mean = |x: &DVector<f64>| models.iter().map(|p| p.mean_value(x)).sum::<f64>() / m;

    if let Some(grid) = domain.grid() {
        let (idx, value) = grid_argmin(&mut |x: &DVector<f64>| avg_mean(x), grid);
        return (grid[idx].clone(), value);
    }

    let mut starts: Vec<DVector<f64>> = models
        .iter()
        .map(|p| p.mean_minimizer().0)
        .collect();
    let mut rng = substream(seed, STREAM_RECOMMEND);
    starts.extend(domain.latin_hypercube(8, &mut rng));
    let scan = match domain.dim() {
        1 => Some(mesh(&domain, 2001)),
        2 => Some(mesh(&domain, 71)),
        _ => None,
    };
    let mut scan_best: Option<(DVector<f64>, f64)> = None;
    if let Some(points) = scan {
        let (idx, value) = grid_argmin(&mut |x: &DVector<f64>| avg_mean(x), &points);
        starts.push(points[idx].clone());
        scan_best = Some((points[idx].clone(), value));
    }

    let mut fg = |x: &DVector<f64>| {
        let g = models
            .iter()
            .fold(DVector::zeros(domain.dim()), |acc, p| acc + p.mean_gradient(x))
            / m;
        (avg_mean(x), g)
    };
    let outcome = multistart_minimize(&mut fg, &starts, &domain, 60, 0.1);
    match scan_best {
        Some((x, v)) if v < outcome.value => (x, v),
        _ => (outcome.x, outcome.value),
    }
}

/// Runs the whole loop: initial design, `iterations` steps, trace. Objective
/// failures abort early with `complete = false`; everything else is an error.
pub fn run(problem: &ProblemSpec, objective: &dyn Objective, seed: u64) -> Result<RunTrace> {
    let mut state = RunState::initialize(problem.clone(), objective, seed)?;
    for _ in 0..problem.iterations {
        if !state.step(objective)? {
            break;
        }
    }
    Ok(state.into_trace())
}
