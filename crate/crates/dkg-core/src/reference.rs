//! Slow reference implementations used to validate the fast paths.
//!
//! Everything here favors obviousness over speed: posteriors are conditioned
//! by explicitly inverting the noisy Gram block, fantasy updates rebuild the
//! posterior from scratch per draw, and derivatives are checked against
//! central finite differences. The test suites compare the production code
//! against these; production code must never call into this module.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::chol::cholesky_with_jitter;
use crate::gp::{self, GpPosterior, ObservationRecord};
use crate::kernel::{Channel, KernelSpec};
use crate::stream::substream;

/// Central-difference gradient of a scalar function.
pub fn central_diff_gradient<F>(f: F, x: &DVector<f64>, h: f64) -> DVector<f64>
where
    F: Fn(&DVector<f64>) -> f64,
{
    DVector::from_fn(x.len(), |k, _| {
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[k] += h;
        xm[k] -= h;
        (f(&xp) - f(&xm)) / (2.0 * h)
    })
}

/// Central difference of a univariate function.
pub fn central_diff<F>(f: F, t: f64, h: f64) -> f64
where
    F: Fn(f64) -> f64,
{
    (f(t + h) - f(t - h)) / (2.0 * h)
}

/// Posterior mean and covariance of arbitrary query channels, conditioned by
/// assembling the full joint covariance of history and query channels and
/// inverting the noisy history block.
pub fn conditioned_by_block_inversion(
    prior_mean: f64,
    kernel: &KernelSpec,
    history: &[ObservationRecord],
    query: &[(DVector<f64>, Channel)],
) -> (DVector<f64>, DMatrix<f64>) {
    let hist_channels = gp::flatten_channels(history);
    let n = hist_channels.len();
    let m = query.len();

    let loc = |i: usize| -> &DVector<f64> { &history[hist_channels[i].0].location };
    let hch = |i: usize| -> &Channel { &hist_channels[i].1 };

    let prior_of = |ch: &Channel| -> f64 {
        match ch {
            Channel::Value => prior_mean,
            _ => 0.0,
        }
    };

    let mut c_hh = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            c_hh[(i, j)] = kernel.pair(loc(i), loc(j)).cov(hch(i), hch(j));
        }
        c_hh[(i, i)] += kernel.channel_noise(hch(i));
    }
    let mut c_qh = DMatrix::zeros(m, n);
    for a in 0..m {
        for i in 0..n {
            c_qh[(a, i)] = kernel.pair(&query[a].0, loc(i)).cov(&query[a].1, hch(i));
        }
    }
    let mut c_qq = DMatrix::zeros(m, m);
    for a in 0..m {
        for b in 0..m {
            c_qq[(a, b)] = kernel.pair(&query[a].0, &query[b].0).cov(&query[a].1, &query[b].1);
        }
    }

    if n == 0 {
        let mean = DVector::from_fn(m, |a, _| prior_of(&query[a].1));
        return (mean, c_qq);
    }

    let inv = c_hh.try_inverse().expect("history Gram must be invertible");
    let centered = DVector::from_fn(n, |i, _| {
        history[hist_channels[i].0].channel_value(hch(i)) - prior_of(hch(i))
    });
    let mean = DVector::from_fn(m, |a, _| prior_of(&query[a].1))
        + &c_qh * (&inv * &centered);
    let cov = &c_qq - &c_qh * inv * c_qh.transpose();
    (mean, cov)
}

/// For each draw, samples hypothetical observations of the given channels at
/// the batch points from the posterior predictive, rebuilds the posterior
/// with those observations appended, and records the new value-channel mean
/// at each point of `xs`.
///
/// The predictive distribution is obtained by block inversion, independently
/// of the factorized update used in production.
pub fn fantasy_mean_curves(
    p: &GpPosterior,
    batch_points: &[DVector<f64>],
    channels_per_point: &[Vec<Channel>],
    xs: &[DVector<f64>],
    n_draws: usize,
    seed: u64,
) -> Vec<Vec<f64>> {
    assert_eq!(batch_points.len(), channels_per_point.len());
    let query: Vec<(DVector<f64>, Channel)> = batch_points
        .iter()
        .zip(channels_per_point)
        .flat_map(|(z, chans)| chans.iter().map(move |c| (z.clone(), c.clone())))
        .collect();
    let (pred_mean, pred_cov) = conditioned_by_block_inversion(
        p.prior_mean(),
        p.kernel(),
        p.history(),
        &query,
    );
    let mut noisy = pred_cov;
    for (i, (_, ch)) in query.iter().enumerate() {
        noisy[(i, i)] += p.kernel().channel_noise(ch);
    }
    let l = cholesky_with_jitter(&noisy)
        .expect("predictive covariance must be factorizable")
        .l;
    let m = query.len();

    (0..n_draws)
        .map(|draw| {
            let mut rng = substream(seed, draw as u64);
            let w = DVector::from_fn(m, |_, _| rng.sample::<f64, _>(StandardNormal));
            let obs = &pred_mean + &l * w;
            let mut records = Vec::with_capacity(batch_points.len());
            let mut idx = 0;
            for (z, chans) in batch_points.iter().zip(channels_per_point) {
                let mut rec = ObservationRecord {
                    location: z.clone(),
                    value: None,
                    partials: None,
                    directional: None,
                };
                for ch in chans {
                    match ch {
                        Channel::Value => rec.value = Some(obs[idx]),
                        Channel::Partial(i) => {
                            let d = z.len();
                            let p = rec.partials.get_or_insert(gp::PartialObservations {
                                mask: vec![false; d],
                                values: DVector::zeros(d),
                            });
                            p.mask[*i] = true;
                            p.values[*i] = obs[idx];
                        }
                        Channel::Directional(u) => {
                            rec.directional = Some(gp::DirectionalObservation {
                                direction: u.clone(),
                                value: obs[idx],
                            });
                        }
                    }
                    idx += 1;
                }
                records.push(rec);
            }
            let updated = p
                .with_observations(records)
                .expect("fantasy posterior must build");
            xs.iter().map(|x| updated.mean_value(x)).collect()
        })
        .collect()
}
