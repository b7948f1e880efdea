//! Expected improvement, in closed form for single points and by Monte
//! Carlo for batches under a derivative-aware posterior.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use crate::chol::cholesky_with_jitter;
use crate::error::{Error, Result};
use crate::gp::{GpPosterior, ObservationRecord};
use crate::kernel::Channel;
use crate::opt;
use crate::stream::{substream, STREAM_FANTASY, STREAM_SELECT};

use super::{AcquisitionEstimate, CandidateBatch};

/// Standard deviations below which the posterior is treated as collapsed
/// and EI degenerates to the positive part of the mean improvement.
const SD_FLOOR: f64 = 1e-12;

/// Closed-form expected improvement of a single point under the value
/// posterior, with the incumbent taken as the minimum posterior mean over
/// evaluated points.
pub fn ei_value(p: &GpPosterior, x: &DVector<f64>) -> f64 {
    let tau = p.incumbent_mean();
    let mu = p.mean_value(x);
    let sd = p.variance_value(x).sqrt();
    if sd <= SD_FLOOR {
        return (tau - mu).max(0.0);
    }
    let z = (tau - mu) / sd;
    let n = Normal::new(0.0, 1.0).unwrap();
    sd * (z * n.cdf(z) + n.pdf(z))
}

/// Analytic gradient of `ei_value`.
pub fn ei_gradient(p: &GpPosterior, x: &DVector<f64>) -> DVector<f64> {
    let tau = p.incumbent_mean();
    let (mu, dmu) = p.mean_and_gradient(x);
    let (var, dvar) = p.variance_value_and_grad(x);
    let sd = var.sqrt();
    if sd <= SD_FLOOR {
        return if tau > mu { -dmu } else { DVector::zeros(x.len()) };
    }
    let z = (tau - mu) / sd;
    let n = Normal::new(0.0, 1.0).unwrap();
    let dsd = dvar / (2.0 * sd);
    -n.cdf(z) * dmu + n.pdf(z) * dsd
}

/// Monte Carlo batch expected improvement: the expected positive part of
/// incumbent minus the batch minimum of the latent values, under the joint
/// value posterior at the batch points. Derivative observations in the
/// history sharpen this posterior; the estimator itself never fantasizes
/// derivatives.
pub fn d_ei_value(
    p: &GpPosterior,
    batch: &CandidateBatch,
    num_fantasies: usize,
    seed: u64,
) -> Result<AcquisitionEstimate> {
    if num_fantasies == 0 {
        return Err(Error::Contract("need at least one fantasy".into()));
    }
    let q = batch.q();
    if q == 0 {
        return Err(Error::Contract("candidate batch is empty".into()));
    }
    for z in &batch.points {
        if !p.domain().contains(z) {
            return Err(Error::Contract("batch point lies outside the domain".into()));
        }
    }
    let tau = p.incumbent_mean();

    // Joint value posterior at the batch points.
    let mut means = DVector::zeros(q);
    let mut solved = Vec::with_capacity(q);
    for (i, z) in batch.points.iter().enumerate() {
        let (v, t) = p.solved_cross(z, &[Channel::Value]);
        means[i] = p.prior_mean() + v.column(0).dot(p.alpha());
        solved.push(t.column(0).clone_owned());
    }
    let mut cov = DMatrix::zeros(q, q);
    for i in 0..q {
        for j in i..q {
            let prior = p
                .kernel()
                .pair(&batch.points[i], &batch.points[j])
                .cov(&Channel::Value, &Channel::Value);
            let v = prior - solved[i].dot(&solved[j]);
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    let factor = cholesky_with_jitter(&cov)
        .map_err(|pivot| Error::SingularFantasy { point: pivot })?;

    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for i in 0..num_fantasies {
        let mut rng = substream(seed, STREAM_FANTASY + i as u64);
        let eps = DVector::from_fn(q, |_, _| rng.sample::<f64, _>(StandardNormal));
        let f = &means + &factor.l * eps;
        let imp = (tau - f.min()).max(0.0);
        sum += imp;
        sum_sq += imp * imp;
    }
    let nf = num_fantasies as f64;
    let value = sum / nf;
    let std_error = if num_fantasies > 1 {
        let var = (sum_sq - sum * sum / nf) / (nf - 1.0);
        (var.max(0.0) / nf).sqrt()
    } else {
        0.0
    };
    Ok(AcquisitionEstimate {
        value,
        std_error,
        num_fantasies,
    })
}

/// Maximizes the model-averaged single-point EI: multistart descent on the
/// negated EI, seeded from a Latin hypercube plus the best point of a
/// deterministic space-filling scan.
fn argmax_ei(posteriors: &[GpPosterior], seed: u64) -> DVector<f64> {
    let domain = posteriors[0].domain();
    let avg_ei = |x: &DVector<f64>| {
        posteriors.iter().map(|p| ei_value(p, x)).sum::<f64>() / posteriors.len() as f64
    };
    if let Some(grid) = domain.grid() {
        let (i, _) = opt::grid_argmin(&mut |x: &DVector<f64>| -avg_ei(x), grid);
        return grid[i].clone();
    }
    let mut rng = substream(seed, STREAM_SELECT);
    let mut starts = domain.latin_hypercube(8, &mut rng);
    let scan = domain.halton(256);
    let (si, _) = opt::grid_argmin(&mut |x: &DVector<f64>| -avg_ei(x), &scan);
    starts.push(scan[si].clone());

    let mut fg = |x: &DVector<f64>| {
        let mut v = 0.0;
        let mut g = DVector::zeros(domain.dim());
        for p in posteriors {
            v -= ei_value(p, x);
            g -= ei_gradient(p, x);
        }
        let m = posteriors.len() as f64;
        (v / m, g / m)
    };
    let out = opt::multistart_minimize(&mut fg, &starts, domain, 60, 0.3);
    // Guard against a descent run ending below the scan's best point.
    if -avg_ei(&out.x) <= -avg_ei(&scan[si]) {
        out.x
    } else {
        scan[si].clone()
    }
}

/// Greedy batch selection by EI with believer updates: each chosen point is
/// added to every model as a value observation at its own posterior mean,
/// and the next point maximizes EI under the updated models.
pub fn ei_select(posteriors: &[GpPosterior], q: usize, seed: u64) -> Result<CandidateBatch> {
    select_with_believers(posteriors, q, seed, false, &[])
}

/// Greedy batch selection for the derivative-aware EI baseline: believer
/// updates carry the posterior mean gradient on the masked coordinates, so
/// later picks account for the derivative information a real evaluation
/// would return.
pub fn d_ei_select(
    posteriors: &[GpPosterior],
    q: usize,
    mask: &[bool],
    seed: u64,
) -> Result<CandidateBatch> {
    select_with_believers(posteriors, q, seed, true, mask)
}

fn select_with_believers(
    posteriors: &[GpPosterior],
    q: usize,
    seed: u64,
    with_derivatives: bool,
    mask: &[bool],
) -> Result<CandidateBatch> {
    if posteriors.is_empty() {
        return Err(Error::Contract("need at least one posterior".into()));
    }
    if q == 0 {
        return Err(Error::Contract("batch size must be at least 1".into()));
    }
    let dim = posteriors[0].domain().dim();
    if with_derivatives && mask.len() != dim {
        return Err(Error::DimensionMismatch {
            expected: dim,
            got: mask.len(),
        });
    }
    let mut points = Vec::with_capacity(q);
    let mut owned: Option<Vec<GpPosterior>> = None;
    for step in 0..q {
        let models: &[GpPosterior] = owned.as_deref().unwrap_or(posteriors);
        let x = argmax_ei(models, crate::stream::child_seed(seed, step as u64));
        if step + 1 < q {
            let next = models
                .iter()
                .map(|p| {
                    let record = if with_derivatives && mask.iter().any(|on| *on) {
                        ObservationRecord::with_masked_gradient(
                            x.clone(),
                            p.mean_value(&x),
                            mask.to_vec(),
                            p.mean_gradient(&x),
                        )
                    } else {
                        ObservationRecord::value_only(x.clone(), p.mean_value(&x))
                    };
                    p.with_observations(vec![record])
                })
                .collect::<Result<Vec<_>>>()?;
            owned = Some(next);
        }
        points.push(x);
    }
    Ok(CandidateBatch::new(points))
}
