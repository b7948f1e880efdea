//! Joint Gaussian-process inference over a function and its gradient, with
//! incomplete observations.
//!
//! Every history record contributes only the channels that were actually
//! observed (value, a masked subset of partials, a directional derivative),
//! and the Gram matrix is assembled over exactly those channels. Directional
//! derivatives enter as linear functionals of the gradient, so no extra
//! modeling assumptions are needed beyond the joint kernel.

use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector, Matrix2, Vector2};

use crate::chol::{cholesky_with_jitter, solve_posdef};
use crate::domain::Domain;
use crate::error::{Error, Result};
use crate::kernel::{Channel, KernelSpec};
use crate::opt;
use crate::stream::{substream, STREAM_RECOMMEND};

/// Observed partial derivatives. `values[i]` is meaningful only where
/// `mask[i]` is true.
#[derive(Debug, Clone, PartialEq)]
pub struct PartialObservations {
    pub mask: Vec<bool>,
    pub values: DVector<f64>,
}

/// An observed directional derivative `direction . grad y(x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DirectionalObservation {
    pub direction: DVector<f64>,
    pub value: f64,
}

/// One evaluation of the objective: a location plus whichever channels the
/// evaluation produced. At least one channel must be present.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationRecord {
    pub location: DVector<f64>,
    pub value: Option<f64>,
    pub partials: Option<PartialObservations>,
    pub directional: Option<DirectionalObservation>,
}

impl ObservationRecord {
    pub fn value_only(location: DVector<f64>, value: f64) -> Self {
        Self {
            location,
            value: Some(value),
            partials: None,
            directional: None,
        }
    }

    /// A value plus the full gradient.
    pub fn with_full_gradient(location: DVector<f64>, value: f64, gradient: DVector<f64>) -> Self {
        let d = gradient.len();
        Self {
            location,
            value: Some(value),
            partials: Some(PartialObservations {
                mask: vec![true; d],
                values: gradient,
            }),
            directional: None,
        }
    }

    /// A value plus the masked partials.
    pub fn with_masked_gradient(
        location: DVector<f64>,
        value: f64,
        mask: Vec<bool>,
        partial_values: DVector<f64>,
    ) -> Self {
        Self {
            location,
            value: Some(value),
            partials: Some(PartialObservations {
                mask,
                values: partial_values,
            }),
            directional: None,
        }
    }

    /// A value plus one directional derivative.
    pub fn with_directional(
        location: DVector<f64>,
        value: f64,
        direction: DVector<f64>,
        directional_value: f64,
    ) -> Self {
        Self {
            location,
            value: Some(value),
            partials: None,
            directional: Some(DirectionalObservation {
                direction,
                value: directional_value,
            }),
        }
    }

    /// The observed channels in canonical order: value, partials by
    /// ascending index, then the directional channel.
    pub fn channels(&self) -> Vec<Channel> {
        let mut out = Vec::new();
        if self.value.is_some() {
            out.push(Channel::Value);
        }
        if let Some(p) = &self.partials {
            for (i, &m) in p.mask.iter().enumerate() {
                if m {
                    out.push(Channel::Partial(i));
                }
            }
        }
        if let Some(d) = &self.directional {
            out.push(Channel::Directional(d.direction.clone()));
        }
        out
    }

    pub fn num_channels(&self) -> usize {
        self.value.is_some() as usize
            + self
                .partials
                .as_ref()
                .map_or(0, |p| p.mask.iter().filter(|&&m| m).count())
            + self.directional.is_some() as usize
    }

    /// The observed value of one of this record's channels.
    pub fn channel_value(&self, channel: &Channel) -> f64 {
        match channel {
            Channel::Value => self.value.expect("value channel not observed"),
            Channel::Partial(i) => {
                let p = self.partials.as_ref().expect("partials not observed");
                assert!(p.mask[*i], "partial {i} not observed");
                p.values[*i]
            }
            Channel::Directional(_) => {
                self.directional
                    .as_ref()
                    .expect("directional channel not observed")
                    .value
            }
        }
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.location.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: self.location.len(),
            });
        }
        if !self.location.iter().all(|v| v.is_finite()) {
            return Err(Error::Contract("observation location must be finite".into()));
        }
        if self.num_channels() == 0 {
            return Err(Error::Contract(
                "observation must carry at least one channel".into(),
            ));
        }
        if let Some(v) = self.value {
            if !v.is_finite() {
                return Err(Error::Contract("observed value must be finite".into()));
            }
        }
        if let Some(p) = &self.partials {
            if p.mask.len() != dim || p.values.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: p.mask.len().max(p.values.len()),
                });
            }
            for (i, &m) in p.mask.iter().enumerate() {
                if m && !p.values[i].is_finite() {
                    return Err(Error::Contract(format!("observed partial {i} must be finite")));
                }
            }
        }
        if let Some(dir) = &self.directional {
            if dir.direction.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: dir.direction.len(),
                });
            }
            if (dir.direction.norm() - 1.0).abs() > 1e-12 {
                return Err(Error::Contract(
                    "directional-derivative direction must have unit norm (within 1e-12)".into(),
                ));
            }
            if !dir.value.is_finite() {
                return Err(Error::Contract("observed directional value must be finite".into()));
            }
        }
        Ok(())
    }
}

/// Prior mean of a channel: the constant `mu` for the value channel, zero for
/// every derivative channel (the gradient of a constant).
fn channel_prior_mean(prior_mean: f64, channel: &Channel) -> f64 {
    match channel {
        Channel::Value => prior_mean,
        _ => 0.0,
    }
}

pub(crate) fn flatten_channels(history: &[ObservationRecord]) -> Vec<(usize, Channel)> {
    let mut out = Vec::new();
    for (ri, rec) in history.iter().enumerate() {
        for ch in rec.channels() {
            out.push((ri, ch));
        }
    }
    out
}

/// Gram matrix over the flattened channels: prior covariances plus the
/// per-channel noise variances on the diagonal.
pub(crate) fn assemble_gram(
    kernel: &KernelSpec,
    history: &[ObservationRecord],
    channels: &[(usize, Channel)],
) -> DMatrix<f64> {
    let n = channels.len();
    let mut g = DMatrix::zeros(n, n);
    let mut i = 0;
    while i < n {
        let (ri, _) = channels[i];
        let mut j = i;
        while j < n {
            let (rj, _) = channels[j];
            let pair = kernel.pair(&history[ri].location, &history[rj].location);
            // Fill the whole (record ri, record rj) block from one pair.
            let mut a = i;
            while a < n && channels[a].0 == ri {
                let mut b = j.max(a);
                while b < n && channels[b].0 == rj {
                    let v = pair.cov(&channels[a].1, &channels[b].1);
                    g[(a, b)] = v;
                    g[(b, a)] = v;
                    b += 1;
                }
                a += 1;
            }
            while j < n && channels[j].0 == rj {
                j += 1;
            }
        }
        while i < n && channels[i].0 == ri {
            i += 1;
        }
    }
    for (idx, (_, ch)) in channels.iter().enumerate() {
        g[(idx, idx)] += kernel.channel_noise(ch);
    }
    g
}

pub(crate) fn centered_observations(
    prior_mean: f64,
    history: &[ObservationRecord],
    channels: &[(usize, Channel)],
) -> DVector<f64> {
    DVector::from_iterator(
        channels.len(),
        channels.iter().map(|(ri, ch)| {
            history[*ri].channel_value(ch) - channel_prior_mean(prior_mean, ch)
        }),
    )
}

/// An immutable conditioned Gaussian process over `(f, grad f)`.
///
/// Construction factors the observed-channel Gram matrix once; afterwards any
/// number of threads may query means and covariances concurrently.
#[derive(Debug)]
pub struct GpPosterior {
    kernel: KernelSpec,
    prior_mean: f64,
    domain: Domain,
    history: Vec<ObservationRecord>,
    channels: Vec<(usize, Channel)>,
    gram_l: DMatrix<f64>,
    jitter: f64,
    alpha: DVector<f64>,
    mean_min: OnceLock<(DVector<f64>, f64)>,
    incumbent: OnceLock<f64>,
}

/// Builds the posterior for the given history (empty history yields the
/// prior). Fails with a `SingularModel` error naming the offending record if
/// the Gram factorization does not succeed on the jitter ladder.
pub fn build_posterior(
    prior_mean: f64,
    kernel: KernelSpec,
    domain: Domain,
    history: Vec<ObservationRecord>,
) -> Result<GpPosterior> {
    if kernel.dim() != domain.dim() {
        return Err(Error::DimensionMismatch {
            expected: domain.dim(),
            got: kernel.dim(),
        });
    }
    for rec in &history {
        rec.validate(domain.dim())?;
        if !domain.contains(&rec.location) {
            return Err(Error::Contract(format!(
                "observation location {:?} lies outside the domain box",
                rec.location.as_slice()
            )));
        }
    }
    let channels = flatten_channels(&history);
    let gram = assemble_gram(&kernel, &history, &channels);
    let factor = cholesky_with_jitter(&gram).map_err(|pivot| Error::SingularModel {
        record: channels[pivot].0,
    })?;
    let centered = centered_observations(prior_mean, &history, &channels);
    let alpha = solve_posdef(&factor.l, &centered);
    Ok(GpPosterior {
        kernel,
        prior_mean,
        domain,
        history,
        channels,
        gram_l: factor.l,
        jitter: factor.jitter,
        alpha,
        mean_min: OnceLock::new(),
        incumbent: OnceLock::new(),
    })
}

impl GpPosterior {
    pub fn kernel(&self) -> &KernelSpec {
        &self.kernel
    }

    pub fn prior_mean(&self) -> f64 {
        self.prior_mean
    }

    pub fn domain(&self) -> &Domain {
        &self.domain
    }

    pub fn history(&self) -> &[ObservationRecord] {
        &self.history
    }

    pub fn dim(&self) -> usize {
        self.domain.dim()
    }

    pub fn num_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn gram_cholesky(&self) -> &DMatrix<f64> {
        &self.gram_l
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn alpha(&self) -> &DVector<f64> {
        &self.alpha
    }

    /// Rebuilds the posterior with extra observations appended.
    pub fn with_observations(&self, extra: Vec<ObservationRecord>) -> Result<GpPosterior> {
        let mut history = self.history.clone();
        history.extend(extra);
        build_posterior(self.prior_mean, self.kernel.clone(), self.domain.clone(), history)
    }

    /// Prior covariances between every history channel and the given query
    /// channels at `x`; an `n x c` matrix.
    pub(crate) fn cross_cov(&self, x: &DVector<f64>, query: &[Channel]) -> DMatrix<f64> {
        let n = self.channels.len();
        let mut v = DMatrix::zeros(n, query.len());
        let mut i = 0;
        while i < n {
            let ri = self.channels[i].0;
            let pair = self.kernel.pair(&self.history[ri].location, x);
            while i < n && self.channels[i].0 == ri {
                for (c, qch) in query.iter().enumerate() {
                    v[(i, c)] = pair.cov(&self.channels[i].1, qch);
                }
                i += 1;
            }
        }
        v
    }

    /// Posterior mean of the value channel.
    pub fn mean_value(&self, x: &DVector<f64>) -> f64 {
        self.mean_channel(x, &Channel::Value)
    }

    /// Posterior mean of an arbitrary channel.
    pub fn mean_channel(&self, x: &DVector<f64>, channel: &Channel) -> f64 {
        let v = self.cross_cov(x, std::slice::from_ref(channel));
        channel_prior_mean(self.prior_mean, channel) + v.column(0).dot(&self.alpha)
    }

    /// Exact gradient of the value-channel posterior mean.
    pub fn mean_gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        self.mean_and_gradient(x).1
    }

    /// Value-channel posterior mean together with its gradient, sharing the
    /// per-record kernel work.
    pub fn mean_and_gradient(&self, x: &DVector<f64>) -> (f64, DVector<f64>) {
        let d = self.dim();
        let mut mean = self.prior_mean;
        let mut grad = DVector::zeros(d);
        let n = self.channels.len();
        let mut i = 0;
        while i < n {
            let ri = self.channels[i].0;
            let pair = self.kernel.pair(&self.history[ri].location, x);
            while i < n && self.channels[i].0 == ri {
                let a = self.alpha[i];
                let hch = &self.channels[i].1;
                mean += a * pair.cov(hch, &Channel::Value);
                for m in 0..d {
                    grad[m] += a * pair.cov(hch, &Channel::Partial(m));
                }
                i += 1;
            }
        }
        (mean, grad)
    }

    /// Prior cross covariances solved against the Gram factor:
    /// returns `(prior, L^{-1} prior)` for the query channels at `x`.
    pub(crate) fn solved_cross(
        &self,
        x: &DVector<f64>,
        query: &[Channel],
    ) -> (DMatrix<f64>, DMatrix<f64>) {
        let v = self.cross_cov(x, query);
        let solved = crate::chol::solve_lower_matrix(&self.gram_l, &v);
        (v, solved)
    }

    /// Derivative of the history cross covariances with respect to the `m`-th
    /// coordinate of the query location: entry `(h, c)` is
    /// `d cov(history channel h, query channel c at x) / d x_m`.
    pub(crate) fn cross_cov_d2(
        &self,
        x: &DVector<f64>,
        query: &[Channel],
        m: usize,
    ) -> DMatrix<f64> {
        let n = self.channels.len();
        let mut v = DMatrix::zeros(n, query.len());
        let mut i = 0;
        while i < n {
            let ri = self.channels[i].0;
            let pair = self.kernel.pair(&self.history[ri].location, x);
            while i < n && self.channels[i].0 == ri {
                for (c, qch) in query.iter().enumerate() {
                    v[(i, c)] = pair.cov_d2(&self.channels[i].1, qch, m);
                }
                i += 1;
            }
        }
        v
    }

    /// Posterior variance of the value channel.
    pub fn variance_value(&self, x: &DVector<f64>) -> f64 {
        let (_, s) = self.solved_cross(x, &[Channel::Value]);
        let prior = self.kernel.signal_variance();
        (prior - s.column(0).dot(&s.column(0))).max(0.0)
    }

    /// Value-channel posterior variance together with its gradient.
    pub fn variance_value_and_grad(&self, x: &DVector<f64>) -> (f64, DVector<f64>) {
        let d = self.dim();
        let mut chans = Vec::with_capacity(d + 1);
        chans.push(Channel::Value);
        for k in 0..d {
            chans.push(Channel::Partial(k));
        }
        let (_, t) = self.solved_cross(x, &chans);
        let tv = t.column(0);
        let var = (self.kernel.signal_variance() - tv.dot(&tv)).max(0.0);
        let grad = DVector::from_fn(d, |k, _| -2.0 * tv.dot(&t.column(k + 1)));
        (var, grad)
    }

    /// Joint posterior means and covariance over all `d + 1` channels at each
    /// query point. Channel order per point: value, then partials.
    pub fn posterior_query(&self, xs: &[DVector<f64>]) -> Result<JointQuery> {
        if xs.is_empty() {
            return Err(Error::Contract("posterior_query needs at least one point".into()));
        }
        let d = self.dim();
        for x in xs {
            if x.len() != d {
                return Err(Error::DimensionMismatch { expected: d, got: x.len() });
            }
        }
        let per = d + 1;
        let query_channels: Vec<Channel> = std::iter::once(Channel::Value)
            .chain((0..d).map(Channel::Partial))
            .collect();

        let mut means = Vec::with_capacity(xs.len());
        let mut solved = Vec::with_capacity(xs.len());
        let mut priors = Vec::with_capacity(xs.len());
        for x in xs {
            let (v, s) = self.solved_cross(x, &query_channels);
            means.push(DVector::from_fn(per, |c, _| {
                channel_prior_mean(self.prior_mean, &query_channels[c])
                    + v.column(c).dot(&self.alpha)
            }));
            priors.push(v);
            solved.push(s);
        }

        let m = per * xs.len();
        let mut cov = DMatrix::zeros(m, m);
        for (pa, xa) in xs.iter().enumerate() {
            for (pb, xb) in xs.iter().enumerate().skip(pa) {
                let pair = self.kernel.pair(xa, xb);
                for ca in 0..per {
                    for cb in 0..per {
                        let prior = pair.cov(&query_channels[ca], &query_channels[cb]);
                        let v = prior - solved[pa].column(ca).dot(&solved[pb].column(cb));
                        cov[(pa * per + ca, pb * per + cb)] = v;
                        cov[(pb * per + cb, pa * per + ca)] = v;
                    }
                }
            }
        }
        // The loop fills both triangles from the same dot products, but the
        // diagonal blocks are written twice; symmetrize to be safe.
        let cov = (&cov + cov.transpose()) * 0.5;
        Ok(JointQuery { means, cov })
    }

    /// The `(f, theta . grad f)` view of this posterior.
    pub fn project_directional(&self, theta: DVector<f64>) -> Result<BivariateProjection<'_>> {
        if theta.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: theta.len(),
            });
        }
        if (theta.norm() - 1.0).abs() > 1e-12 {
            return Err(Error::Contract(
                "projection direction must have unit norm (within 1e-12)".into(),
            ));
        }
        Ok(BivariateProjection { posterior: self, theta })
    }

    /// The minimum of the value-channel posterior mean at the history
    /// locations: the incumbent used by expected improvement.
    pub fn incumbent_mean(&self) -> f64 {
        *self.incumbent.get_or_init(|| {
            self.history
                .iter()
                .map(|r| self.mean_value(&r.location))
                .fold(f64::INFINITY, f64::min)
                .min(self.prior_mean) // empty history: the prior level
        })
    }

    /// The global minimizer of the value-channel posterior mean, cached after
    /// the first computation. Uses grid enumeration on finite domains, and a
    /// fixed-seed multi-start descent (with a dense-grid sweep in one or two
    /// dimensions) otherwise.
    pub fn mean_minimizer(&self) -> (DVector<f64>, f64) {
        self.mean_min
            .get_or_init(|| {
                if let Some(grid) = self.domain.grid() {
                    let mut f = |x: &DVector<f64>| self.mean_value(x);
                    let (i, v) = opt::grid_argmin(&mut f, grid);
                    return (grid[i].clone(), v);
                }
                let mut starts = Vec::new();
                if self.dim() <= 2 {
                    let mesh = opt::mesh(&self.domain, if self.dim() == 1 { 101 } else { 33 });
                    let mut f = |x: &DVector<f64>| self.mean_value(x);
                    let (i, _) = opt::grid_argmin(&mut f, &mesh);
                    starts.push(mesh[i].clone());
                }
                if let Some(best) = self
                    .history
                    .iter()
                    .map(|r| (r.location.clone(), self.mean_value(&r.location)))
                    .min_by(|a, b| a.1.total_cmp(&b.1))
                {
                    starts.push(best.0);
                }
                let mut rng = substream(0, STREAM_RECOMMEND);
                starts.extend(self.domain.latin_hypercube(7, &mut rng));
                let mut fg = |x: &DVector<f64>| self.mean_and_gradient(x);
                let out = opt::multistart_minimize(&mut fg, &starts, &self.domain, 60, 0.3);
                (out.x, out.value)
            })
            .clone()
    }
}

/// Joint query result: per-point means over the `d + 1` channels and the full
/// covariance across all points and channels.
#[derive(Debug, Clone)]
pub struct JointQuery {
    pub means: Vec<DVector<f64>>,
    pub cov: DMatrix<f64>,
}

/// The bivariate process `(f(x), theta . grad f(x))` induced by a posterior
/// and a unit direction.
#[derive(Debug, Clone)]
pub struct BivariateProjection<'a> {
    posterior: &'a GpPosterior,
    theta: DVector<f64>,
}

impl<'a> BivariateProjection<'a> {
    pub fn direction(&self) -> &DVector<f64> {
        &self.theta
    }

    /// Posterior mean of `(f, theta . grad f)` at `x`.
    pub fn mean(&self, x: &DVector<f64>) -> Vector2<f64> {
        let (m, g) = self.posterior.mean_and_gradient(x);
        Vector2::new(m, self.theta.dot(&g))
    }

    /// Posterior 2x2 covariance between the projected channels at two points.
    pub fn cov(&self, x1: &DVector<f64>, x2: &DVector<f64>) -> Matrix2<f64> {
        let chans = [Channel::Value, Channel::Directional(self.theta.clone())];
        let (_, s1) = self.posterior.solved_cross(x1, &chans);
        let (_, s2) = self.posterior.solved_cross(x2, &chans);
        let pair = self.posterior.kernel.pair(x1, x2);
        Matrix2::from_fn(|i, j| {
            pair.cov(&chans[i], &chans[j]) - s1.column(i).dot(&s2.column(j))
        })
    }

    /// Per-channel observation-noise variances `(value, directional)`.
    pub fn noise(&self) -> Vector2<f64> {
        Vector2::new(
            self.posterior.kernel.channel_noise(&Channel::Value),
            self.posterior
                .kernel
                .channel_noise(&Channel::Directional(self.theta.clone())),
        )
    }
}
