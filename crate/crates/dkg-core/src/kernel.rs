//! Squared-exponential kernel over a function and its derivatives.
//!
//! The prior treats `(f, df/dx_1, ..., df/dx_d)` as one multi-output Gaussian
//! process. Because differentiation is linear, every covariance between
//! observable channels (the value, a partial derivative, or a directional
//! derivative) is a derivative of the base kernel. This module evaluates
//! those derivatives in closed form, together with one further derivative
//! with respect to a location coordinate, which the acquisition gradients
//! need.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// One observable output channel attached to a location.
#[derive(Debug, Clone, PartialEq)]
pub enum Channel {
    /// The function value `f(x)`.
    Value,
    /// The partial derivative `df/dx_i`.
    Partial(usize),
    /// The directional derivative `u . grad f(x)` for a unit vector `u`.
    Directional(DVector<f64>),
}

/// Hyperparameters of the squared-exponential kernel with per-dimension
/// length scales, plus the per-channel observation-noise variances.
///
/// `noise_variances` has `d + 1` entries: index 0 is the function-value
/// channel, index `i >= 1` the `i`-th partial-derivative channel. A
/// directional derivative along `u` carries noise `sum_i u_i^2 s_i^2`, the
/// variance of a weighted sum of independent per-partial noises.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelSpec {
    signal_variance: f64,
    length_scales: DVector<f64>,
    noise_variances: DVector<f64>,
}

impl KernelSpec {
    pub fn new(
        signal_variance: f64,
        length_scales: DVector<f64>,
        noise_variances: DVector<f64>,
    ) -> Result<Self> {
        if !(signal_variance > 0.0) || !signal_variance.is_finite() {
            return Err(Error::Contract("signal variance must be positive and finite".into()));
        }
        if length_scales.is_empty() {
            return Err(Error::Contract("need at least one length scale".into()));
        }
        if length_scales.iter().any(|l| !(*l > 0.0) || !l.is_finite()) {
            return Err(Error::Contract("length scales must be positive and finite".into()));
        }
        if noise_variances.len() != length_scales.len() + 1 {
            return Err(Error::DimensionMismatch {
                expected: length_scales.len() + 1,
                got: noise_variances.len(),
            });
        }
        if noise_variances.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::Contract("noise variances must be nonnegative and finite".into()));
        }
        Ok(Self {
            signal_variance,
            length_scales,
            noise_variances,
        })
    }

    /// Convenience constructor with one shared length scale and channel-tied
    /// noise (`value_noise` on channel 0, `deriv_noise` on every derivative
    /// channel).
    pub fn isotropic(
        dim: usize,
        signal_variance: f64,
        length_scale: f64,
        value_noise: f64,
        deriv_noise: f64,
    ) -> Result<Self> {
        let mut noise = DVector::from_element(dim + 1, deriv_noise);
        noise[0] = value_noise;
        Self::new(
            signal_variance,
            DVector::from_element(dim, length_scale),
            noise,
        )
    }

    pub fn dim(&self) -> usize {
        self.length_scales.len()
    }

    pub fn signal_variance(&self) -> f64 {
        self.signal_variance
    }

    pub fn length_scales(&self) -> &DVector<f64> {
        &self.length_scales
    }

    pub fn noise_variances(&self) -> &DVector<f64> {
        &self.noise_variances
    }

    /// Observation-noise variance of a channel.
    pub fn channel_noise(&self, channel: &Channel) -> f64 {
        match channel {
            Channel::Value => self.noise_variances[0],
            Channel::Partial(i) => self.noise_variances[i + 1],
            Channel::Directional(u) => u
                .iter()
                .enumerate()
                .map(|(i, ui)| ui * ui * self.noise_variances[i + 1])
                .sum(),
        }
    }

    /// The base kernel `k(x, x')`.
    pub fn k(&self, x: &DVector<f64>, x_prime: &DVector<f64>) -> f64 {
        self.pair(x, x_prime).k
    }

    /// Precomputes the quantities shared by every channel covariance of one
    /// point pair.
    pub fn pair(&self, x: &DVector<f64>, x_prime: &DVector<f64>) -> PairKernel {
        debug_assert_eq!(x.len(), self.dim());
        debug_assert_eq!(x_prime.len(), self.dim());
        let mut r = 0.0;
        let mut delta = DVector::zeros(self.dim());
        for k in 0..self.dim() {
            let l2 = self.length_scales[k] * self.length_scales[k];
            let diff = x[k] - x_prime[k];
            r += diff * diff / l2;
            delta[k] = diff / l2;
        }
        PairKernel {
            k: self.signal_variance * (-0.5 * r).exp(),
            delta,
            inv_l2: DVector::from_fn(self.dim(), |k, _| {
                1.0 / (self.length_scales[k] * self.length_scales[k])
            }),
        }
    }
}

/// Channel covariances for a fixed point pair `(x, x')`.
///
/// With `delta_k = (x_k - x'_k) / l_k^2` and `e_ij = [i == j] / l_i^2`:
///
/// ```text
/// cov(V, V)     = k
/// cov(V, P_j)   = k delta_j
/// cov(P_i, V)   = -k delta_i
/// cov(P_i, P_j) = k (e_ij - delta_i delta_j)
/// ```
///
/// Directional channels are linear combinations of partials. All entries are
/// functions of `x - x'`, so a derivative in the first location equals minus
/// the derivative in the second.
pub struct PairKernel {
    k: f64,
    delta: DVector<f64>,
    inv_l2: DVector<f64>,
}

impl PairKernel {
    pub fn base(&self) -> f64 {
        self.k
    }

    fn e(&self, i: usize, j: usize) -> f64 {
        if i == j {
            self.inv_l2[i]
        } else {
            0.0
        }
    }

    fn cov_basic(&self, a: &Channel, b: &Channel) -> f64 {
        match (a, b) {
            (Channel::Value, Channel::Value) => self.k,
            (Channel::Value, Channel::Partial(j)) => self.k * self.delta[*j],
            (Channel::Partial(i), Channel::Value) => -self.k * self.delta[*i],
            (Channel::Partial(i), Channel::Partial(j)) => {
                self.k * (self.e(*i, *j) - self.delta[*i] * self.delta[*j])
            }
            _ => unreachable!("directional channels handled by cov()"),
        }
    }

    /// Prior covariance between channel `a` at `x` and channel `b` at `x'`.
    pub fn cov(&self, a: &Channel, b: &Channel) -> f64 {
        match (a, b) {
            (Channel::Directional(u), other) => u
                .iter()
                .enumerate()
                .map(|(i, ui)| ui * self.cov(&Channel::Partial(i), other))
                .sum(),
            (other, Channel::Directional(u)) => u
                .iter()
                .enumerate()
                .map(|(j, uj)| uj * self.cov_basic(other, &Channel::Partial(j)))
                .sum(),
            (a, b) => self.cov_basic(a, b),
        }
    }

    fn cov_d2_basic(&self, a: &Channel, b: &Channel, m: usize) -> f64 {
        let d = &self.delta;
        match (a, b) {
            (Channel::Value, Channel::Value) => self.k * d[m],
            (Channel::Value, Channel::Partial(j)) => self.k * (d[*j] * d[m] - self.e(*j, m)),
            (Channel::Partial(i), Channel::Value) => self.k * (self.e(*i, m) - d[*i] * d[m]),
            (Channel::Partial(i), Channel::Partial(j)) => {
                let (i, j) = (*i, *j);
                self.k
                    * (self.e(i, j) * d[m] + self.e(i, m) * d[j] + self.e(j, m) * d[i]
                        - d[i] * d[j] * d[m])
            }
            _ => unreachable!("directional channels handled by cov_d2()"),
        }
    }

    /// Derivative of `cov(a at x, b at x')` with respect to the coordinate
    /// `x'_m` of the second location.
    pub fn cov_d2(&self, a: &Channel, b: &Channel, m: usize) -> f64 {
        match (a, b) {
            (Channel::Directional(u), other) => u
                .iter()
                .enumerate()
                .map(|(i, ui)| ui * self.cov_d2(&Channel::Partial(i), other, m))
                .sum(),
            (other, Channel::Directional(u)) => u
                .iter()
                .enumerate()
                .map(|(j, uj)| uj * self.cov_d2_basic(other, &Channel::Partial(j), m))
                .sum(),
            (a, b) => self.cov_d2_basic(a, b, m),
        }
    }

    /// Derivative with respect to the coordinate `x_m` of the first location.
    pub fn cov_d1(&self, a: &Channel, b: &Channel, m: usize) -> f64 {
        -self.cov_d2(a, b, m)
    }
}

/// The joint `(d+1) x (d+1)` prior covariance of `(f, grad f)` between two
/// points: row/column 0 is the value channel, row/column `i` the `i`-th
/// partial.
pub fn joint_covariance(
    x: &DVector<f64>,
    x_prime: &DVector<f64>,
    kernel: &KernelSpec,
) -> Result<DMatrix<f64>> {
    let d = kernel.dim();
    if x.len() != d {
        return Err(Error::DimensionMismatch { expected: d, got: x.len() });
    }
    if x_prime.len() != d {
        return Err(Error::DimensionMismatch { expected: d, got: x_prime.len() });
    }
    let pair = kernel.pair(x, x_prime);
    let ch = |i: usize| if i == 0 { Channel::Value } else { Channel::Partial(i - 1) };
    Ok(DMatrix::from_fn(d + 1, d + 1, |i, j| pair.cov(&ch(i), &ch(j))))
}
