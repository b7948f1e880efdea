//! The sigma factor: a linear map from standardized normal draws to one-step
//! updated posterior value means, plus its derivatives with respect to the
//! candidate batch.
//!
//! For a batch z with fantasy channels c_1..c_m, the updated value mean is in
//! distribution
//!
//!   mean_new(x) = mean(x) + rows(x) . W,   W ~ N(0, I_m),
//!
//! where rows(x) is the posterior cross covariance between f(x) and the
//! fantasy observations, whitened by the Cholesky factor of the fantasy
//! observation covariance. Everything downstream (the sampled objective g,
//! its x-gradient for the inner search, and the batch gradient used by the
//! outer search) is computed from this one factorization.

use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};

use crate::chol::{chol_pushforward, cholesky_with_jitter, solve_lower, solve_lower_transpose};
use crate::error::{Error, Result};
use crate::gp::GpPosterior;
use crate::kernel::Channel;

use super::{BatchGradient, CandidateBatch};

/// Which channels each fantasized evaluation of a batch point reports.
#[derive(Debug, Clone, PartialEq)]
pub enum FantasyScheme {
    /// Value plus one directional derivative along the shared batch direction.
    Directional,
    /// Value plus the partial derivatives flagged in the mask.
    Partials(Vec<bool>),
    /// Value only. This is what reduces the search to plain knowledge
    /// gradient.
    ValueOnly,
}

impl FantasyScheme {
    /// The partial-derivative scheme with every coordinate turned on.
    pub fn full_gradient(dim: usize) -> Self {
        FantasyScheme::Partials(vec![true; dim])
    }

    pub fn needs_direction(&self) -> bool {
        matches!(self, FantasyScheme::Directional)
    }

    /// Number of channels each batch point contributes to a fantasy.
    pub fn channels_per_point(&self) -> usize {
        match self {
            FantasyScheme::Directional => 2,
            FantasyScheme::Partials(mask) => 1 + mask.iter().filter(|on| **on).count(),
            FantasyScheme::ValueOnly => 1,
        }
    }

    /// The concrete channel list for one batch point, value channel first.
    pub(crate) fn point_channels(&self, direction: Option<&DVector<f64>>) -> Result<Vec<Channel>> {
        match self {
            FantasyScheme::Directional => {
                let theta = direction.ok_or_else(|| {
                    Error::Contract("directional fantasies need a batch direction".into())
                })?;
                Ok(vec![Channel::Value, Channel::Directional(theta.clone())])
            }
            FantasyScheme::Partials(mask) => {
                let mut chans = vec![Channel::Value];
                for (i, on) in mask.iter().enumerate() {
                    if *on {
                        chans.push(Channel::Partial(i));
                    }
                }
                Ok(chans)
            }
            FantasyScheme::ValueOnly => Ok(vec![Channel::Value]),
        }
    }
}

/// Whitened fantasy update for a fixed batch. See the module docs.
pub struct SigmaFactor<'a> {
    posterior: &'a GpPosterior,
    scheme: FantasyScheme,
    points: Vec<DVector<f64>>,
    direction: Option<DVector<f64>>,
    per_point: Vec<Channel>,
    chan_of: Vec<(usize, Channel)>,
    /// n x m solved history cross covariances of the fantasy channels.
    s: DMatrix<f64>,
    /// Lower Cholesky factor of the fantasy observation covariance.
    d_hat: DMatrix<f64>,
    jitter: f64,
    /// For finite domains: (posterior mean, rows) at every grid point.
    grid_cache: OnceLock<Vec<(f64, DVector<f64>)>>,
}

/// Builds the sigma factor, inferring the fantasy scheme from the batch: a
/// batch carrying a direction fantasizes value plus directional derivative,
/// otherwise value plus the full gradient.
pub fn sigma_factor<'a>(p: &'a GpPosterior, batch: &CandidateBatch) -> Result<SigmaFactor<'a>> {
    let scheme = if batch.direction.is_some() {
        FantasyScheme::Directional
    } else {
        FantasyScheme::full_gradient(p.domain().dim())
    };
    sigma_factor_with(p, batch, &scheme)
}

/// Builds the sigma factor for an explicit fantasy scheme.
pub fn sigma_factor_with<'a>(
    p: &'a GpPosterior,
    batch: &CandidateBatch,
    scheme: &FantasyScheme,
) -> Result<SigmaFactor<'a>> {
    if let FantasyScheme::Partials(mask) = scheme {
        if mask.len() != p.domain().dim() {
            return Err(Error::DimensionMismatch {
                expected: p.domain().dim(),
                got: mask.len(),
            });
        }
    }
    batch.validate(p.domain(), scheme)?;
    let per_point = scheme.point_channels(batch.direction.as_ref())?;
    let c = per_point.len();
    let q = batch.points.len();
    let m = q * c;
    let n = p.num_channels();

    let mut s = DMatrix::zeros(n, m);
    let mut chan_of = Vec::with_capacity(m);
    for (pi, z) in batch.points.iter().enumerate() {
        let (_, solved) = p.solved_cross(z, &per_point);
        for (ci, ch) in per_point.iter().enumerate() {
            s.set_column(pi * c + ci, &solved.column(ci));
            chan_of.push((pi, ch.clone()));
        }
    }

    // Fantasy observation covariance: posterior covariance of the channels
    // plus observation noise on the diagonal.
    let mut cov = DMatrix::zeros(m, m);
    for a in 0..m {
        for b in a..m {
            let (pa, cha) = &chan_of[a];
            let (pb, chb) = &chan_of[b];
            let prior = p
                .kernel()
                .pair(&batch.points[*pa], &batch.points[*pb])
                .cov(cha, chb);
            let v = prior - s.column(a).dot(&s.column(b));
            cov[(a, b)] = v;
            cov[(b, a)] = v;
        }
    }
    for a in 0..m {
        cov[(a, a)] += p.kernel().channel_noise(&chan_of[a].1);
    }

    let factor = cholesky_with_jitter(&cov).map_err(|pivot| Error::SingularFantasy {
        point: chan_of[pivot].0,
    })?;

    Ok(SigmaFactor {
        posterior: p,
        scheme: scheme.clone(),
        points: batch.points.clone(),
        direction: batch.direction.clone(),
        per_point,
        chan_of,
        s,
        d_hat: factor.l,
        jitter: factor.jitter,
        grid_cache: OnceLock::new(),
    })
}

impl<'a> SigmaFactor<'a> {
    /// Dimension of the standardized draw W.
    pub fn fantasy_dim(&self) -> usize {
        self.chan_of.len()
    }

    pub fn posterior(&self) -> &'a GpPosterior {
        self.posterior
    }

    pub fn points(&self) -> &[DVector<f64>] {
        &self.points
    }

    pub fn direction(&self) -> Option<&DVector<f64>> {
        self.direction.as_ref()
    }

    pub fn scheme(&self) -> &FantasyScheme {
        &self.scheme
    }

    /// Lower Cholesky factor of the fantasy observation covariance.
    pub fn cholesky(&self) -> &DMatrix<f64> {
        &self.d_hat
    }

    /// Jitter the factorization needed, zero in the typical case.
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    /// The coefficient vector of W in the updated value mean at x.
    pub fn rows(&self, x: &DVector<f64>) -> DVector<f64> {
        let (_, r) = self.mean_and_r(x);
        solve_lower(&self.d_hat, &r)
    }

    /// Posterior value mean together with `rows(x)`.
    pub(crate) fn mean_and_rows(&self, x: &DVector<f64>) -> (f64, DVector<f64>) {
        let (mean, r) = self.mean_and_r(x);
        (mean, solve_lower(&self.d_hat, &r))
    }

    /// Posterior value mean at x and the unwhitened cross covariance between
    /// f(x) and the fantasy observations.
    fn mean_and_r(&self, x: &DVector<f64>) -> (f64, DVector<f64>) {
        let (v, t) = self.posterior.solved_cross(x, &[Channel::Value]);
        let mean = self.posterior.prior_mean() + v.column(0).dot(self.posterior.alpha());
        let t = t.column(0);
        let m = self.fantasy_dim();
        let c = self.per_point.len();
        let mut r = DVector::zeros(m);
        for (pi, z) in self.points.iter().enumerate() {
            let pair = self.posterior.kernel().pair(x, z);
            for (ci, ch) in self.per_point.iter().enumerate() {
                let j = pi * c + ci;
                r[j] = pair.cov(&Channel::Value, ch) - t.dot(&self.s.column(j));
            }
        }
        (mean, r)
    }

    /// Transforms a raw draw w into the coefficient vector u with
    /// `rows(x) . w = r(x) . u`.
    pub fn u_from_w(&self, w: &DVector<f64>) -> DVector<f64> {
        solve_lower_transpose(&self.d_hat, w)
    }

    /// The sampled objective g(x) = mean(x) + r(x) . u.
    pub fn g_value(&self, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
        let (mean, r) = self.mean_and_r(x);
        mean + r.dot(u)
    }

    /// g(x) together with its x-gradient, both analytic.
    pub(super) fn g_and_grad(&self, x: &DVector<f64>, u: &DVector<f64>) -> (f64, DVector<f64>) {
        let d = x.len();
        let mut chans = Vec::with_capacity(d + 1);
        chans.push(Channel::Value);
        for k in 0..d {
            chans.push(Channel::Partial(k));
        }
        let (v, t) = self.posterior.solved_cross(x, &chans);
        let alpha = self.posterior.alpha();
        let mut g = self.posterior.prior_mean() + v.column(0).dot(alpha);
        let mut grad = DVector::from_fn(d, |k, _| v.column(k + 1).dot(alpha));

        let c = self.per_point.len();
        for (pi, z) in self.points.iter().enumerate() {
            let pair = self.posterior.kernel().pair(x, z);
            for (ci, ch) in self.per_point.iter().enumerate() {
                let j = pi * c + ci;
                let sj = self.s.column(j);
                let r_j = pair.cov(&Channel::Value, ch) - t.column(0).dot(&sj);
                g += u[j] * r_j;
                for k in 0..d {
                    let dr_jk = pair.cov(&Channel::Partial(k), ch) - t.column(k + 1).dot(&sj);
                    grad[k] += u[j] * dr_jk;
                }
            }
        }
        (g, grad)
    }

    /// For finite domains: posterior mean and rows at every grid point,
    /// computed once and cached.
    pub(super) fn grid_values(&self) -> Option<&[(f64, DVector<f64>)]> {
        let grid = self.posterior.domain().grid()?;
        Some(self.grid_cache.get_or_init(|| {
            grid.iter().map(|x| self.mean_and_rows(x)).collect()
        }))
    }

    /// Gradient of F(z, theta) = mean(x*) + rows(x*) . w with respect to the
    /// batch, holding the inner minimizer x* fixed. Returns the gradient of
    /// the acquisition, which is -dF. The direction block, when present, is
    /// the gradient through the unit-norm reparameterization, so it is
    /// tangent to the sphere.
    pub(super) fn envelope_gradient(&self, x_star: &DVector<f64>, w: &DVector<f64>) -> BatchGradient {
        let d = x_star.len();
        let q = self.points.len();
        let c = self.per_point.len();
        let m = self.fantasy_dim();
        let kernel = self.posterior.kernel();

        let (_, r) = self.mean_and_r(x_star);
        let y = solve_lower(&self.d_hat, &r);
        let u = self.u_from_w(w);
        let (_, t_x) = self.posterior.solved_cross(x_star, &[Channel::Value]);
        let t_x = t_x.column(0).clone_owned();

        // Solved history cross covariances of the partial channels at each
        // batch point: these are the location derivatives of the solved
        // value-channel cross covariance, and the direction derivatives of
        // the directional channel.
        let partial_chans: Vec<Channel> = (0..d).map(Channel::Partial).collect();
        let sp: Vec<DMatrix<f64>> = self
            .points
            .iter()
            .map(|z| self.posterior.solved_cross(z, &partial_chans).1)
            .collect();

        // Location derivatives of the solved cross covariances of the
        // non-value channels: ds_non[pi][k] is n x (c - 1).
        let non_value: Vec<Channel> = self.per_point[1..].to_vec();
        let ds_non: Vec<Vec<DMatrix<f64>>> = self
            .points
            .iter()
            .map(|z| {
                (0..d)
                    .map(|k| {
                        if non_value.is_empty() {
                            DMatrix::zeros(self.posterior.num_channels(), 0)
                        } else {
                            let dv = self.posterior.cross_cov_d2(z, &non_value, k);
                            crate::chol::solve_lower_matrix(self.posterior.gram_cholesky(), &dv)
                        }
                    })
                    .collect()
            })
            .collect();

        // ds(j, k): derivative of the solved cross covariance s_j with
        // respect to coordinate k of its own batch point.
        let ds = |j: usize, k: usize| -> DVector<f64> {
            let (pj, ch) = &self.chan_of[j];
            match ch {
                Channel::Value => sp[*pj].column(k).clone_owned(),
                _ => {
                    let ci = j % c;
                    ds_non[*pj][k].column(ci - 1).clone_owned()
                }
            }
        };

        let mut grad_points = Vec::with_capacity(q);
        for pi in 0..q {
            let mut gp = DVector::zeros(d);
            let pair_x = kernel.pair(x_star, &self.points[pi]);
            for k in 0..d {
                // dr: only the channels of point pi move.
                let mut dr_dot_u = 0.0;
                for ci in 0..c {
                    let j = pi * c + ci;
                    let prior_d = pair_x.cov_d2(&Channel::Value, &self.per_point[ci], k);
                    dr_dot_u += u[j] * (prior_d - t_x.dot(&ds(j, k)));
                }

                // dC: rows and columns touching point pi.
                let mut dc = DMatrix::zeros(m, m);
                for a in 0..m {
                    for b in a..m {
                        let (pa, cha) = &self.chan_of[a];
                        let (pb, chb) = &self.chan_of[b];
                        if *pa != pi && *pb != pi {
                            continue;
                        }
                        let pair_ab = kernel.pair(&self.points[*pa], &self.points[*pb]);
                        let mut v = 0.0;
                        if *pa == pi {
                            v += pair_ab.cov_d1(cha, chb, k) - ds(a, k).dot(&self.s.column(b));
                        }
                        if *pb == pi {
                            v += pair_ab.cov_d2(cha, chb, k) - self.s.column(a).dot(&ds(b, k));
                        }
                        dc[(a, b)] = v;
                        dc[(b, a)] = v;
                    }
                }
                let phi = chol_pushforward(&self.d_hat, &dc);
                let df = dr_dot_u - w.dot(&(&phi * &y));
                gp[k] = -df;
            }
            grad_points.push(gp);
        }

        let grad_direction = self.direction.as_ref().map(|theta| {
            let noise = kernel.noise_variances();
            let mut gt = DVector::zeros(d);
            for k in 0..d {
                let mut dr_dot_u = 0.0;
                let mut dc = DMatrix::zeros(m, m);
                for a in 0..m {
                    let (pa, cha) = &self.chan_of[a];
                    if matches!(cha, Channel::Directional(_)) {
                        let pair_x = kernel.pair(x_star, &self.points[*pa]);
                        let prior_d = pair_x.cov(&Channel::Value, &Channel::Partial(k));
                        dr_dot_u += u[a] * (prior_d - t_x.dot(&sp[*pa].column(k)));
                    }
                    for b in a..m {
                        let (pb, chb) = &self.chan_of[b];
                        let a_dir = matches!(cha, Channel::Directional(_));
                        let b_dir = matches!(chb, Channel::Directional(_));
                        if !a_dir && !b_dir {
                            continue;
                        }
                        let pair_ab = kernel.pair(&self.points[*pa], &self.points[*pb]);
                        let mut v = 0.0;
                        if a_dir {
                            v += pair_ab.cov(&Channel::Partial(k), chb)
                                - sp[*pa].column(k).dot(&self.s.column(b));
                        }
                        if b_dir {
                            v += pair_ab.cov(cha, &Channel::Partial(k))
                                - self.s.column(a).dot(&sp[*pb].column(k));
                        }
                        if a == b && a_dir {
                            // Directional observation noise is a quadratic
                            // form in theta.
                            v += 2.0 * theta[k] * noise[k + 1];
                        }
                        dc[(a, b)] = v;
                        dc[(b, a)] = v;
                    }
                }
                let phi = chol_pushforward(&self.d_hat, &dc);
                let df = dr_dot_u - w.dot(&(&phi * &y));
                gt[k] = -df;
            }
            // Project onto the tangent space of the unit sphere: this is the
            // gradient through renormalization.
            let radial = theta.dot(&gt);
            gt - theta * radial
        });

        BatchGradient {
            points: grad_points,
            direction: grad_direction,
        }
    }
}
