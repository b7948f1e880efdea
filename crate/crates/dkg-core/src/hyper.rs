//! Marginal likelihood and fully Bayesian hyperparameter sampling.
//!
//! The model has `d + 4` free hyperparameters: signal variance, `d` length
//! scales, one value-channel noise variance, one noise variance shared by all
//! derivative channels, and the constant prior mean. Sampling works on the
//! vector `psi = [ln alpha, ln l_1 .. ln l_d, ln nu_value, ln nu_deriv, mu]`
//! with independent Gaussian priors on every component except the mean, which
//! is flat. A Gaussian prior on a log-parameter is exactly a log-normal prior
//! on the original scale, so positivity never needs explicit handling.
//!
//! The sampler is the affine-invariant stretch-move ensemble method: a
//! population of walkers, each proposing moves along lines through another
//! walker's position. It needs no gradients and no per-parameter step-size
//! tuning, which suits a posterior whose conditioning varies wildly with the
//! length scales.

use nalgebra::DVector;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::chol::{cholesky_with_jitter, solve_lower};
use crate::domain::Domain;
use crate::error::{Error, Result};
use crate::gp::{assemble_gram, centered_observations, flatten_channels, ObservationRecord};
use crate::kernel::KernelSpec;
use crate::stream::{substream, STREAM_HYPER};

/// A log-density over `R^dim`, the sampler's only view of the target.
///
/// Implementations may return `-inf` for impossible points; the sampler never
/// accepts a move into them.
pub trait LogDensity: Sync {
    fn dim(&self) -> usize;
    fn log_density(&self, x: &DVector<f64>) -> f64;
}

/// One retained hyperparameter draw.
#[derive(Debug, Clone)]
pub struct HyperSample {
    pub kernel: KernelSpec,
    pub prior_mean: f64,
    /// Unnormalized log posterior (marginal likelihood plus log priors).
    pub log_posterior: f64,
}

/// Gaussian log marginal likelihood of every observed channel in `history`
/// under the joint derivative-aware prior:
/// `-1/2 r' G^-1 r - sum_i ln L_ii - n/2 ln(2 pi)` with `G = L L'` the noisy
/// Gram matrix and `r` the prior-mean-centered observation vector.
///
/// Returns `-inf` when the Gram matrix stays singular through the jitter
/// ladder or when the history does not fit the kernel dimension, so the value
/// can be fed straight into an acceptance ratio.
pub fn log_marginal_likelihood(
    kernel: &KernelSpec,
    prior_mean: f64,
    history: &[ObservationRecord],
) -> f64 {
    if history.iter().any(|r| r.validate(kernel.dim()).is_err()) {
        return f64::NEG_INFINITY;
    }
    let channels = flatten_channels(history);
    let n = channels.len();
    if n == 0 {
        return 0.0;
    }
    let gram = assemble_gram(kernel, history, &channels);
    let factor = match cholesky_with_jitter(&gram) {
        Ok(f) => f,
        Err(_) => return f64::NEG_INFINITY,
    };
    let centered = centered_observations(prior_mean, history, &channels);
    let half_solved = solve_lower(&factor.l, &centered);
    let quad = half_solved.dot(&half_solved);
    let log_det_half: f64 = (0..n).map(|i| factor.l[(i, i)].ln()).sum();
    let lml = -0.5 * quad - log_det_half - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln();
    if lml.is_nan() {
        f64::NEG_INFINITY
    } else {
        lml
    }
}

/// Everything `ensemble_sample` hands back: the post-burn-in chain and its
/// overall acceptance rate.
#[derive(Debug, Clone)]
pub struct EnsembleRun {
    /// `(position, log density)` pairs, step-major: all walkers of the first
    /// retained step, then all walkers of the second, and so on.
    pub samples: Vec<(DVector<f64>, f64)>,
    pub acceptance_rate: f64,
}

/// Affine-invariant stretch-move ensemble MCMC.
///
/// Runs `burn_in + keep_steps` full-ensemble updates from `init` and returns
/// the positions of every walker on each of the last `keep_steps` steps,
/// `init.len() * keep_steps` samples in all. Each update moves the first half
/// of the ensemble against a snapshot of the second half and then the second
/// half against the updated first half, so density evaluations within a half
/// are independent and run in parallel. Deterministic for a given `rng`
/// state: all randomness is drawn sequentially before the parallel section.
///
/// Stretch factors use the standard tuning `a = 2`: `z = (u + 1)^2 / 2` for
/// uniform `u`, accepted with probability `z^(dim-1) * pi(proposal) / pi(x)`.
pub fn ensemble_sample<T: LogDensity + ?Sized>(
    target: &T,
    burn_in: usize,
    keep_steps: usize,
    init: &[DVector<f64>],
    rng: &mut ChaCha8Rng,
) -> Result<EnsembleRun> {
    let walkers = init.len();
    if walkers < 4 || walkers % 2 != 0 {
        return Err(Error::Contract(format!(
            "ensemble needs an even number of walkers, at least 4, got {walkers}"
        )));
    }
    let dim = target.dim();
    for (i, w) in init.iter().enumerate() {
        if w.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: init[i].len(),
            });
        }
    }

    let mut positions: Vec<DVector<f64>> = init.to_vec();
    let mut log_probs: Vec<f64> = positions
        .par_iter()
        .map(|x| target.log_density(x))
        .collect();
    if log_probs.iter().all(|lp| *lp == f64::NEG_INFINITY) {
        return Err(Error::SamplerInit(
            "every initial walker has zero posterior density".into(),
        ));
    }

    let half = walkers / 2;
    let power = dim as f64 - 1.0;
    let mut accepted = 0usize;
    let total_moves = walkers * (burn_in + keep_steps);
    let mut samples = Vec::with_capacity(walkers * keep_steps);

    for step in 0..burn_in + keep_steps {
        // Update [lo, hi) against the complementary half [other_lo, other_hi).
        for (lo, hi, other_lo) in [(0, half, half), (half, walkers, 0)] {
            // Draw all randomness up front so the parallel evaluation cannot
            // perturb the stream order.
            let moves: Vec<(usize, f64, f64)> = (lo..hi)
                .map(|_| {
                    let partner = other_lo + rng.random_range(0..half);
                    let u: f64 = rng.random();
                    let z = (u + 1.0) * (u + 1.0) / 2.0;
                    let accept_u: f64 = rng.random();
                    (partner, z, accept_u)
                })
                .collect();
            let proposals: Vec<(DVector<f64>, f64)> = (lo..hi)
                .into_par_iter()
                .map(|i| {
                    let (partner, z, _) = moves[i - lo];
                    let candidate =
                        &positions[partner] + (&positions[i] - &positions[partner]) * z;
                    let lp = target.log_density(&candidate);
                    (candidate, lp)
                })
                .collect();
            for (offset, (candidate, lp_new)) in proposals.into_iter().enumerate() {
                let i = lo + offset;
                let (_, z, accept_u) = moves[offset];
                let take = if lp_new == f64::NEG_INFINITY {
                    false
                } else if log_probs[i] == f64::NEG_INFINITY {
                    true
                } else {
                    accept_u.ln() < power * z.ln() + lp_new - log_probs[i]
                };
                if take {
                    positions[i] = candidate;
                    log_probs[i] = lp_new;
                    accepted += 1;
                }
            }
        }
        if step >= burn_in {
            for i in 0..walkers {
                samples.push((positions[i].clone(), log_probs[i]));
            }
        }
    }

    let acceptance_rate = accepted as f64 / total_moves as f64;
    if !(0.1..0.9).contains(&acceptance_rate) {
        log::warn!(
            "ensemble sampler acceptance rate {acceptance_rate:.3} outside (0.1, 0.9); \
             the chain may mix poorly"
        );
    }
    Ok(EnsembleRun {
        samples,
        acceptance_rate,
    })
}

/// The hyperparameter posterior in `psi` coordinates.
struct HyperPosterior<'a> {
    history: &'a [ObservationRecord],
    input_dim: usize,
    prior_center: DVector<f64>,
    prior_sd: DVector<f64>,
}

/// Largest magnitude allowed for a log-scale coordinate before the point is
/// rejected outright; `e^60` is already far beyond any useful scale.
const PSI_LOG_BOUND: f64 = 60.0;

fn kernel_from_psi(psi: &DVector<f64>, input_dim: usize) -> Option<(KernelSpec, f64)> {
    let d = input_dim;
    if psi.iter().take(d + 3).any(|p| p.abs() > PSI_LOG_BOUND) {
        return None;
    }
    let signal = psi[0].exp();
    let scales = DVector::from_fn(d, |i, _| psi[1 + i].exp());
    let mut noise = DVector::from_element(d + 1, psi[d + 2].exp());
    noise[0] = psi[d + 1].exp();
    let mean = psi[d + 3];
    KernelSpec::new(signal, scales, noise)
        .ok()
        .map(|k| (k, mean))
}

impl LogDensity for HyperPosterior<'_> {
    fn dim(&self) -> usize {
        self.input_dim + 4
    }

    fn log_density(&self, psi: &DVector<f64>) -> f64 {
        let Some((kernel, mean)) = kernel_from_psi(psi, self.input_dim) else {
            return f64::NEG_INFINITY;
        };
        let mut prior = 0.0;
        for i in 0..psi.len() {
            let sd = self.prior_sd[i];
            if sd.is_finite() {
                let t = (psi[i] - self.prior_center[i]) / sd;
                prior -= 0.5 * t * t;
            }
        }
        prior + log_marginal_likelihood(&kernel, mean, self.history)
    }
}

/// Prior centers and widths in `psi` space. Log-normal medians: 1 for the
/// signal variance, a quarter of the box width per length scale, 0.1 for both
/// noise variances. The mean is flat (infinite width).
fn psi_prior(domain: &Domain) -> (DVector<f64>, DVector<f64>) {
    let d = domain.dim();
    let mut center = DVector::zeros(d + 4);
    let mut sd = DVector::zeros(d + 4);
    center[0] = 0.0;
    sd[0] = 3.0;
    for i in 0..d {
        let width = domain.upper()[i] - domain.lower()[i];
        center[1 + i] = (width / 4.0).max(1e-8).ln();
        sd[1 + i] = 1.0;
    }
    center[d + 1] = 0.1f64.ln();
    sd[d + 1] = 3.0;
    center[d + 2] = 0.1f64.ln();
    sd[d + 2] = 3.0;
    center[d + 3] = 0.0;
    sd[d + 3] = f64::INFINITY;
    (center, sd)
}

/// A starting cloud for the walkers: the prior length-scale centers combined
/// with data-driven scales (sample variance of the observed values), jittered
/// by a small Gaussian ball.
fn init_positions(
    history: &[ObservationRecord],
    domain: &Domain,
    walkers: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<DVector<f64>> {
    let d = domain.dim();
    let values: Vec<f64> = history.iter().filter_map(|r| r.value).collect();
    let mean = if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    };
    let var = if values.len() < 2 {
        1.0
    } else {
        values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (values.len() - 1) as f64
    };
    let var = var.max(1e-4);

    let mut center = DVector::zeros(d + 4);
    center[0] = var.ln();
    for i in 0..d {
        let width = domain.upper()[i] - domain.lower()[i];
        center[1 + i] = (width / 4.0).max(1e-8).ln();
    }
    center[d + 1] = (0.05 * var).max(1e-6).ln();
    center[d + 2] = (0.05 * var).max(1e-6).ln();
    center[d + 3] = mean;

    let normal = rand_distr::StandardNormal;
    (0..walkers)
        .map(|_| {
            DVector::from_fn(d + 4, |i, _| {
                center[i] + 0.1 * rng.sample::<f64, _>(normal)
            })
        })
        .collect()
}

/// Draws `m` hyperparameter samples from the posterior over
/// `(signal variance, length scales, value noise, derivative noise, mean)`
/// given the history, via the stretch-move ensemble sampler.
///
/// The chain keeps `5 m` post-burn-in steps and thins them into `m`
/// contiguous blocks, returning the highest-log-posterior walker state of
/// each block; `m = 1` therefore returns the single best retained state.
/// `walkers` is raised to at least twice the number of free parameters (and
/// to an even count) if the caller passes fewer. Deterministic given `seed`.
pub fn sample_hyperparameters(
    history: &[ObservationRecord],
    domain: &Domain,
    m: usize,
    walkers: usize,
    burn_in: usize,
    seed: u64,
) -> Result<Vec<HyperSample>> {
    if m == 0 {
        return Err(Error::Contract("need at least one hyperparameter sample".into()));
    }
    let d = domain.dim();
    let psi_dim = d + 4;
    let walkers = {
        let w = walkers.max(2 * psi_dim).max(4);
        w + w % 2
    };
    let (prior_center, prior_sd) = psi_prior(domain);
    let target = HyperPosterior {
        history,
        input_dim: d,
        prior_center,
        prior_sd,
    };

    let mut rng = substream(seed, STREAM_HYPER);
    let init = init_positions(history, domain, walkers, &mut rng);
    let keep_steps = 5 * m;
    let run = ensemble_sample(&target, burn_in, keep_steps, &init, &mut rng)?;

    let mut out = Vec::with_capacity(m);
    let block = keep_steps / m;
    for b in 0..m {
        let start = b * block * walkers;
        let end = (b + 1) * block * walkers;
        let slice = &run.samples[start..end];
        let best = slice
            .iter()
            .enumerate()
            .max_by(|(ia, (_, la)), (ib, (_, lb))| {
                la.partial_cmp(lb)
                    .unwrap_or(std::cmp::Ordering::Equal)
                    // Ties keep the earliest entry.
                    .then(ib.cmp(ia))
            })
            .map(|(_, s)| s)
            .expect("thinning block is nonempty");
        let (kernel, prior_mean) = kernel_from_psi(&best.0, d).ok_or_else(|| {
            Error::SamplerInit("retained sample fails kernel positivity".into())
        })?;
        out.push(HyperSample {
            kernel,
            prior_mean,
            log_posterior: best.1,
        });
    }
    Ok(out)
}
