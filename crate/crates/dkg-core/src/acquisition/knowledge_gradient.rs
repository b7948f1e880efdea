//! Knowledge-gradient acquisition with and without derivative fantasies.
//!
//! The score of a batch is the expected decrease of the minimum posterior
//! value mean once the batch would be observed. The expectation is a Monte
//! Carlo average over whitened fantasy draws; every draw requires its own
//! inner minimization of the fantasized mean. The batch itself is found by
//! stochastic gradient ascent using the envelope derivative of the inner
//! problem, with a fixed-seed re-ranking pass at the end.

use nalgebra::DVector;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::domain::Domain;
use crate::error::{Error, Result};
use crate::gp::{build_posterior, GpPosterior, ObservationRecord};
use crate::kernel::KernelSpec;
use crate::opt;
use crate::stream::{child_seed, substream, STREAM_BASELINE, STREAM_FANTASY, STREAM_RERANK, STREAM_RESTART};

use super::fantasy::{sigma_factor_with, FantasyScheme, SigmaFactor};
use super::{AcquisitionEstimate, BatchGradient, CandidateBatch, FantasyDraw};

const INNER_LR: f64 = 0.03;
const OUTER_LR: f64 = 0.3;
const INTERIOR_MARGIN: f64 = 1e-6;

/// Search budgets for the nested optimization. The defaults are what the
/// benchmark driver uses.
#[derive(Debug, Clone, PartialEq)]
pub struct AcquisitionBudget {
    /// Starts for each inner minimization (Latin hypercube plus the current
    /// posterior-mean minimizer).
    pub inner_starts: usize,
    /// Descent steps per inner start.
    pub inner_steps: usize,
    /// Independent ascent restarts of the outer search.
    pub outer_restarts: usize,
    /// Stochastic gradient steps per restart, one fantasy draw each.
    pub sga_steps: usize,
    /// Fantasies used to re-rank restart results with a shared seed.
    pub rerank_fantasies: usize,
}

impl Default for AcquisitionBudget {
    fn default() -> Self {
        AcquisitionBudget {
            inner_starts: 8,
            inner_steps: 30,
            outer_restarts: 8,
            sga_steps: 50,
            rerank_fantasies: 64,
        }
    }
}

fn scheme_for(p: &GpPosterior, batch: &CandidateBatch) -> FantasyScheme {
    if batch.direction.is_some() {
        FantasyScheme::Directional
    } else {
        FantasyScheme::full_gradient(p.domain().dim())
    }
}

/// Start points for the inner search: the posterior-mean minimizer plus a
/// Latin hypercube fill. Frozen per seed so that the baseline and every
/// fantasy solve the same problem family from the same starts.
fn inner_start_points(p: &GpPosterior, count: usize, seed: u64) -> Vec<DVector<f64>> {
    let mut starts = Vec::with_capacity(count.max(1));
    starts.push(p.mean_minimizer().0);
    if count > 1 {
        let mut rng = substream(seed, STREAM_BASELINE);
        starts.extend(p.domain().latin_hypercube(count - 1, &mut rng));
    }
    starts
}

/// Minimizes g(x) = mean(x) + rows(x) . w. Finite domains are enumerated
/// exactly; continuous domains run projected multi-start descent.
fn minimize_g(
    factor: &SigmaFactor,
    w: &DVector<f64>,
    starts: &[DVector<f64>],
    steps: usize,
) -> (DVector<f64>, f64) {
    if let Some(grid_vals) = factor.grid_values() {
        let grid = factor.posterior().domain().grid().unwrap();
        let mut best_i = 0;
        let mut best = f64::INFINITY;
        for (i, (mean, rows)) in grid_vals.iter().enumerate() {
            let g = mean + rows.dot(w);
            if g < best {
                best = g;
                best_i = i;
            }
        }
        return (grid[best_i].clone(), best);
    }
    let u = factor.u_from_w(w);
    let mut fg = |x: &DVector<f64>| factor.g_and_grad(x, &u);
    let out = opt::multistart_minimize(
        &mut fg,
        starts,
        factor.posterior().domain(),
        steps,
        INNER_LR,
    );
    (out.x, out.value)
}

/// Minimizes the fantasized posterior mean for one draw. Returns the
/// minimizer and its value.
pub fn inner_minimize(
    p: &GpPosterior,
    factor: &SigmaFactor,
    w: &FantasyDraw,
    starts: usize,
    seed: u64,
) -> Result<(DVector<f64>, f64)> {
    if starts == 0 {
        return Err(Error::Contract("inner search needs at least one start".into()));
    }
    if w.w.len() != factor.fantasy_dim() {
        return Err(Error::DimensionMismatch {
            expected: factor.fantasy_dim(),
            got: w.w.len(),
        });
    }
    let start_points = inner_start_points(p, starts, seed);
    Ok(minimize_g(factor, &w.w, &start_points, AcquisitionBudget::default().inner_steps))
}

/// The general Monte Carlo estimator behind the d-KG family. The scheme
/// decides which channels each fantasy carries; everything else is shared.
pub fn value_with(
    p: &GpPosterior,
    batch: &CandidateBatch,
    scheme: &FantasyScheme,
    num_fantasies: usize,
    seed: u64,
    budget: &AcquisitionBudget,
) -> Result<AcquisitionEstimate> {
    if num_fantasies == 0 {
        return Err(Error::Contract("need at least one fantasy".into()));
    }
    let factor = sigma_factor_with(p, batch, scheme)?;
    let m = factor.fantasy_dim();
    let starts = inner_start_points(p, budget.inner_starts, seed);

    // Baseline: the current minimum of the posterior mean, found with the
    // same machinery (w = 0) and the same starts, so a batch carrying no
    // information cancels to zero instead of to optimizer noise.
    let (_, min0) = minimize_g(&factor, &DVector::zeros(m), &starts, budget.inner_steps);

    let deltas: Vec<f64> = (0..num_fantasies)
        .into_par_iter()
        .map(|i| {
            let mut rng = substream(seed, STREAM_FANTASY + i as u64);
            let w = DVector::from_fn(m, |_, _| rng.sample::<f64, _>(StandardNormal));
            let (_, min_i) = minimize_g(&factor, &w, &starts, budget.inner_steps);
            min0 - min_i
        })
        .collect();

    let value = deltas.iter().sum::<f64>() / num_fantasies as f64;
    let std_error = if num_fantasies > 1 {
        let var = deltas.iter().map(|d| (d - value).powi(2)).sum::<f64>()
            / (num_fantasies - 1) as f64;
        (var / num_fantasies as f64).sqrt()
    } else {
        0.0
    };
    Ok(AcquisitionEstimate {
        value,
        std_error,
        num_fantasies,
    })
}

/// d-KG value of a batch: fantasies carry the value channel plus derivative
/// information (directional when the batch has a direction, the full
/// gradient otherwise).
pub fn dkg_value(
    p: &GpPosterior,
    batch: &CandidateBatch,
    num_fantasies: usize,
    seed: u64,
) -> Result<AcquisitionEstimate> {
    value_with(
        p,
        batch,
        &scheme_for(p, batch),
        num_fantasies,
        seed,
        &AcquisitionBudget::default(),
    )
}

/// Plain KG value: identical machinery with derivative channels removed, so
/// fantasies cover observed values only.
pub fn kg_value(
    p: &GpPosterior,
    batch: &CandidateBatch,
    num_fantasies: usize,
    seed: u64,
) -> Result<AcquisitionEstimate> {
    value_with(
        p,
        batch,
        &FantasyScheme::ValueOnly,
        num_fantasies,
        seed,
        &AcquisitionBudget::default(),
    )
}

fn gradient_with(
    p: &GpPosterior,
    batch: &CandidateBatch,
    scheme: &FantasyScheme,
    w: &FantasyDraw,
    seed: u64,
) -> Result<BatchGradient> {
    let factor = sigma_factor_with(p, batch, scheme)?;
    if w.w.len() != factor.fantasy_dim() {
        return Err(Error::DimensionMismatch {
            expected: factor.fantasy_dim(),
            got: w.w.len(),
        });
    }
    let budget = AcquisitionBudget::default();
    let starts = inner_start_points(p, budget.inner_starts, seed);
    let (x_star, _) = minimize_g(&factor, &w.w, &starts, budget.inner_steps);
    Ok(factor.envelope_gradient(&x_star, &w.w))
}

/// Single-draw stochastic gradient of the d-KG value with respect to the
/// batch, by the envelope theorem: the inner minimizer is held fixed while
/// the batch moves. Unbiased over draws of w.
pub fn dkg_gradient(p: &GpPosterior, batch: &CandidateBatch, w: &FantasyDraw) -> Result<BatchGradient> {
    dkg_gradient_seeded(p, batch, w, 0)
}

/// Like `dkg_gradient` with an explicit seed for the inner-search starts, so
/// value and gradient evaluations can share common random numbers.
pub fn dkg_gradient_seeded(
    p: &GpPosterior,
    batch: &CandidateBatch,
    w: &FantasyDraw,
    seed: u64,
) -> Result<BatchGradient> {
    gradient_with(p, batch, &scheme_for(p, batch), w, seed)
}

/// Stochastic gradient of the plain KG value.
pub fn kg_gradient(p: &GpPosterior, batch: &CandidateBatch, w: &FantasyDraw) -> Result<BatchGradient> {
    gradient_with(p, batch, &FantasyScheme::ValueOnly, w, 0)
}

/// Average acquisition across several posteriors (typically one per
/// hyperparameter sample), standard errors combined in quadrature. All
/// models share one fantasy stream, so identical models give identical
/// addends.
pub fn integrated_value(
    posteriors: &[GpPosterior],
    batch: &CandidateBatch,
    scheme: &FantasyScheme,
    num_fantasies: usize,
    seed: u64,
    budget: &AcquisitionBudget,
) -> Result<AcquisitionEstimate> {
    if posteriors.is_empty() {
        return Err(Error::Contract("need at least one posterior".into()));
    }
    let mut sum = 0.0;
    let mut var_sum = 0.0;
    for p in posteriors {
        let est = value_with(p, batch, scheme, num_fantasies, seed, budget)?;
        sum += est.value;
        var_sum += est.std_error * est.std_error;
    }
    let m = posteriors.len() as f64;
    Ok(AcquisitionEstimate {
        value: sum / m,
        std_error: var_sum.sqrt() / m,
        num_fantasies,
    })
}

/// Average acquisition over explicit hyperparameter samples, each paired
/// with its prior mean. Posteriors are rebuilt per sample on the shared
/// history.
pub fn integrated_acquisition(
    hyper_samples: &[(KernelSpec, f64)],
    domain: &Domain,
    history: &[ObservationRecord],
    batch: &CandidateBatch,
    num_fantasies: usize,
    seed: u64,
) -> Result<AcquisitionEstimate> {
    if hyper_samples.is_empty() {
        return Err(Error::Contract("need at least one hyperparameter sample".into()));
    }
    let posteriors: Vec<GpPosterior> = hyper_samples
        .iter()
        .map(|(kernel, mean)| {
            build_posterior(*mean, kernel.clone(), domain.clone(), history.to_vec())
        })
        .collect::<Result<_>>()?;
    let scheme = scheme_for(&posteriors[0], batch);
    integrated_value(
        &posteriors,
        batch,
        &scheme,
        num_fantasies,
        seed,
        &AcquisitionBudget::default(),
    )
}

/// A random unit direction.
fn random_unit(d: usize, rng: &mut ChaCha8Rng) -> DVector<f64> {
    let v = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
    let n = v.norm();
    if n > 1e-12 {
        v / n
    } else {
        let mut e = DVector::zeros(d);
        e[0] = 1.0;
        e
    }
}

/// Initial batch of a restart, drawn before the ascent starts so tests can
/// reproduce it from the seed.
fn restart_initial(
    domain: &Domain,
    q: usize,
    scheme: &FantasyScheme,
    rng: &mut ChaCha8Rng,
) -> CandidateBatch {
    let mut points = domain.latin_hypercube(q, rng);
    for x in &mut points {
        domain.project_interior(x, INTERIOR_MARGIN);
    }
    let direction = scheme
        .needs_direction()
        .then(|| random_unit(domain.dim(), rng));
    CandidateBatch { points, direction }
}

/// Maximizes the batch acquisition over the domain. Continuous domains run
/// multi-start stochastic gradient ascent followed by a fixed-seed re-rank
/// over restart results and their initial batches; finite domains score
/// every batch of grid points exhaustively.
pub fn maximize_batch(
    posteriors: &[GpPosterior],
    q: usize,
    scheme: &FantasyScheme,
    budget: &AcquisitionBudget,
    seed: u64,
) -> Result<(CandidateBatch, AcquisitionEstimate)> {
    if posteriors.is_empty() {
        return Err(Error::Contract("need at least one posterior".into()));
    }
    if q == 0 {
        return Err(Error::Contract("batch size must be at least 1".into()));
    }
    if budget.outer_restarts == 0 || budget.sga_steps == 0 {
        return Err(Error::Contract("outer search needs restarts and steps".into()));
    }
    let domain = posteriors[0].domain();
    if domain.grid().is_some() {
        return maximize_on_grid(posteriors, q, scheme, budget, seed);
    }
    let d = domain.dim();
    let m = q * scheme.channels_per_point();

    let mut finals = Vec::with_capacity(budget.outer_restarts);
    let mut initials = Vec::with_capacity(budget.outer_restarts);
    for r in 0..budget.outer_restarts {
        let mut rng = substream(seed, STREAM_RESTART + r as u64);
        let initial = restart_initial(domain, q, scheme, &mut rng);
        let mut points = initial.points.clone();
        let mut direction = initial.direction.clone();

        for t in 1..=budget.sga_steps {
            let batch = CandidateBatch {
                points: points.clone(),
                direction: direction.clone(),
            };
            let w = DVector::from_fn(m, |_, _| rng.sample::<f64, _>(StandardNormal));
            let extra_starts = if budget.inner_starts > 1 {
                domain.latin_hypercube(budget.inner_starts - 1, &mut rng)
            } else {
                Vec::new()
            };

            // Average the envelope gradient over the posteriors, each with
            // its own inner minimization under the shared draw.
            let mut acc_points = vec![DVector::zeros(d); q];
            let mut acc_dir = direction.as_ref().map(|_| DVector::zeros(d));
            for model in posteriors {
                let factor = sigma_factor_with(model, &batch, scheme)?;
                let mut starts = Vec::with_capacity(budget.inner_starts);
                starts.push(model.mean_minimizer().0);
                starts.extend(extra_starts.iter().cloned());
                let (x_star, _) = minimize_g(&factor, &w, &starts, budget.inner_steps);
                let g = factor.envelope_gradient(&x_star, &w);
                for (acc, gp) in acc_points.iter_mut().zip(&g.points) {
                    *acc += gp;
                }
                if let (Some(acc), Some(gd)) = (acc_dir.as_mut(), g.direction.as_ref()) {
                    *acc += gd;
                }
            }
            let scale = 1.0 / posteriors.len() as f64;
            let lr = OUTER_LR / (t as f64).powf(0.7);
            let mut finite = true;
            for gp in &acc_points {
                finite &= gp.iter().all(|v| v.is_finite());
            }
            if let Some(gd) = &acc_dir {
                finite &= gd.iter().all(|v| v.is_finite());
            }
            if !finite {
                log::warn!("non-finite batch gradient at restart {r}, step {t}; stopping ascent");
                break;
            }
            for (x, gp) in points.iter_mut().zip(&acc_points) {
                *x += lr * scale * gp;
                domain.project_interior(x, INTERIOR_MARGIN);
            }
            if let (Some(th), Some(gd)) = (direction.as_mut(), acc_dir.as_ref()) {
                let cand = &*th + lr * scale * gd;
                let n = cand.norm();
                if n > 1e-12 {
                    *th = cand / n;
                }
            }
        }
        finals.push(CandidateBatch { points, direction });
        initials.push(initial);
    }

    // Re-rank ascent results and initial batches with one shared seed; ties
    // go to the earliest candidate, and ascent results come first.
    let pool: Vec<CandidateBatch> = finals.into_iter().chain(initials).collect();
    let rerank_seed = child_seed(seed, STREAM_RERANK);
    let mut best: Option<(usize, AcquisitionEstimate)> = None;
    for (i, cand) in pool.iter().enumerate() {
        let est = integrated_value(
            posteriors,
            cand,
            scheme,
            budget.rerank_fantasies,
            rerank_seed,
            budget,
        )?;
        if best.as_ref().map_or(true, |(_, b)| est.value > b.value) {
            best = Some((i, est));
        }
    }
    let (i, est) = best.unwrap();
    Ok((pool[i].clone(), est))
}

/// Exhaustive batch scoring on a finite domain: every multiset of q grid
/// points is a candidate, scored with the shared re-rank seed.
fn maximize_on_grid(
    posteriors: &[GpPosterior],
    q: usize,
    scheme: &FantasyScheme,
    budget: &AcquisitionBudget,
    seed: u64,
) -> Result<(CandidateBatch, AcquisitionEstimate)> {
    let domain = posteriors[0].domain();
    let grid = domain.grid().unwrap();
    let direction = if scheme.needs_direction() {
        if domain.dim() != 1 {
            return Err(Error::Contract(
                "directional selection on finite domains is only supported in one dimension".into(),
            ));
        }
        Some(DVector::from_element(1, 1.0))
    } else {
        None
    };

    let combos = multisets(grid.len(), q)?;
    let rerank_seed = child_seed(seed, STREAM_RERANK);
    let mut best: Option<(usize, AcquisitionEstimate)> = None;
    let estimates: Vec<Result<AcquisitionEstimate>> = combos
        .par_iter()
        .map(|combo| {
            let batch = CandidateBatch {
                points: combo.iter().map(|&i| grid[i].clone()).collect(),
                direction: direction.clone(),
            };
            integrated_value(
                posteriors,
                &batch,
                scheme,
                budget.rerank_fantasies,
                rerank_seed,
                budget,
            )
        })
        .collect();
    for (i, est) in estimates.into_iter().enumerate() {
        let est = est?;
        if best.as_ref().map_or(true, |(_, b)| est.value > b.value) {
            best = Some((i, est));
        }
    }
    let (i, est) = best.unwrap();
    let batch = CandidateBatch {
        points: combos[i].iter().map(|&k| grid[k].clone()).collect(),
        direction,
    };
    Ok((batch, est))
}

/// All nondecreasing index tuples of length q over n items, in
/// lexicographic order.
fn multisets(n: usize, q: usize) -> Result<Vec<Vec<usize>>> {
    let mut count: usize = 1;
    for k in 0..q {
        count = count
            .checked_mul(n + k)
            .map(|c| c / (k + 1))
            .ok_or_else(|| Error::Contract("finite-domain batch enumeration overflow".into()))?;
    }
    if count > 20_000 {
        return Err(Error::Contract(format!(
            "finite-domain batch enumeration would score {count} candidates; reduce q or the grid"
        )));
    }
    let mut out = Vec::with_capacity(count);
    let mut cur = vec![0usize; q];
    loop {
        out.push(cur.clone());
        // Advance the rightmost index that can still grow.
        let mut k = q;
        loop {
            if k == 0 {
                return Ok(out);
            }
            k -= 1;
            if cur[k] + 1 < n {
                let v = cur[k] + 1;
                for slot in cur.iter_mut().skip(k) {
                    *slot = v;
                }
                break;
            }
        }
    }
}

/// Directional-mode batch search on a single posterior: the default
/// acquisition maximizer.
pub fn outer_maximize(
    p: &GpPosterior,
    q: usize,
    restarts: usize,
    sga_steps: usize,
    seed: u64,
) -> Result<(CandidateBatch, AcquisitionEstimate)> {
    let budget = AcquisitionBudget {
        outer_restarts: restarts,
        sga_steps,
        ..Default::default()
    };
    maximize_batch(
        std::slice::from_ref(p),
        q,
        &FantasyScheme::Directional,
        &budget,
        seed,
    )
}

/// Plain KG batch search: value-only fantasies.
pub fn kg_maximize(
    p: &GpPosterior,
    q: usize,
    restarts: usize,
    sga_steps: usize,
    seed: u64,
) -> Result<(CandidateBatch, AcquisitionEstimate)> {
    let budget = AcquisitionBudget {
        outer_restarts: restarts,
        sga_steps,
        ..Default::default()
    };
    maximize_batch(
        std::slice::from_ref(p),
        q,
        &FantasyScheme::ValueOnly,
        &budget,
        seed,
    )
}
