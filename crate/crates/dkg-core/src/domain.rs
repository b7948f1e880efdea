//! Box-shaped search domains, optionally restricted to a finite grid.

use nalgebra::DVector;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// A box `[lower_k, upper_k]^d`, optionally carrying a finite set of feasible
/// points. When the grid is present, optimizers in this crate enumerate it
/// instead of running continuous searches; the box is then just the grid's
/// bounding box.
#[derive(Debug, Clone, PartialEq)]
pub struct Domain {
    lower: DVector<f64>,
    upper: DVector<f64>,
    grid: Option<Vec<DVector<f64>>>,
}

impl Domain {
    pub fn new(lower: DVector<f64>, upper: DVector<f64>) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(Error::DimensionMismatch {
                expected: lower.len(),
                got: upper.len(),
            });
        }
        if lower.len() == 0 {
            return Err(Error::Contract("domain must have dimension >= 1".into()));
        }
        if lower.iter().zip(upper.iter()).any(|(l, u)| !(l < u)) {
            return Err(Error::Contract(
                "domain bounds must satisfy lower < upper in every dimension".into(),
            ));
        }
        Ok(Self {
            lower,
            upper,
            grid: None,
        })
    }

    pub fn from_bounds(bounds: &[(f64, f64)]) -> Result<Self> {
        Self::new(
            DVector::from_iterator(bounds.len(), bounds.iter().map(|b| b.0)),
            DVector::from_iterator(bounds.len(), bounds.iter().map(|b| b.1)),
        )
    }

    pub fn unit_cube(dim: usize) -> Self {
        Self::new(DVector::zeros(dim), DVector::from_element(dim, 1.0))
            .expect("unit cube bounds are valid")
    }

    /// A finite domain consisting of the given points; the box becomes their
    /// bounding box (inflated slightly when a coordinate is constant).
    pub fn finite(points: Vec<DVector<f64>>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Contract("finite domain needs at least one point".into()));
        }
        let dim = points[0].len();
        if points.iter().any(|p| p.len() != dim) {
            return Err(Error::Contract("finite domain points must share a dimension".into()));
        }
        let mut lower = points[0].clone();
        let mut upper = points[0].clone();
        for p in &points {
            for k in 0..dim {
                lower[k] = lower[k].min(p[k]);
                upper[k] = upper[k].max(p[k]);
            }
        }
        for k in 0..dim {
            if upper[k] - lower[k] < 1e-12 {
                lower[k] -= 0.5;
                upper[k] += 0.5;
            }
        }
        let mut domain = Self::new(lower, upper)?;
        domain.grid = Some(points);
        Ok(domain)
    }

    /// An evenly spaced grid of `n` points on `[lo, hi]` (one-dimensional).
    pub fn grid_1d(lo: f64, hi: f64, n: usize) -> Result<Self> {
        if n < 2 {
            return Err(Error::Contract("grid needs at least two points".into()));
        }
        let points = (0..n)
            .map(|i| DVector::from_element(1, lo + (hi - lo) * i as f64 / (n - 1) as f64))
            .collect();
        Self::finite(points)
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &DVector<f64> {
        &self.lower
    }

    pub fn upper(&self) -> &DVector<f64> {
        &self.upper
    }

    pub fn width(&self, k: usize) -> f64 {
        self.upper[k] - self.lower[k]
    }

    pub fn grid(&self) -> Option<&[DVector<f64>]> {
        self.grid.as_deref()
    }

    pub fn contains(&self, x: &DVector<f64>) -> bool {
        x.len() == self.dim()
            && x.iter().enumerate().all(|(k, &v)| {
                let slack = 1e-9 * (1.0 + self.width(k));
                v >= self.lower[k] - slack && v <= self.upper[k] + slack
            })
    }

    /// Clamps `x` onto the box.
    pub fn project(&self, x: &mut DVector<f64>) {
        for k in 0..self.dim() {
            x[k] = x[k].clamp(self.lower[k], self.upper[k]);
        }
    }

    /// Clamps `x` strictly inside the box, `margin_frac` of the width away
    /// from each face. Batch candidates are kept here so that the envelope
    /// gradient stays valid away from the boundary.
    pub fn project_interior(&self, x: &mut DVector<f64>, margin_frac: f64) {
        for k in 0..self.dim() {
            let m = margin_frac * self.width(k);
            x[k] = x[k].clamp(self.lower[k] + m, self.upper[k] - m);
        }
    }

    pub fn sample_uniform(&self, rng: &mut ChaCha8Rng) -> DVector<f64> {
        DVector::from_fn(self.dim(), |k, _| {
            self.lower[k] + self.width(k) * rng.random::<f64>()
        })
    }

    /// A Latin hypercube design of `n` points: each dimension is split into n
    /// strata, every stratum is hit exactly once, strata are paired by
    /// independent permutations.
    pub fn latin_hypercube(&self, n: usize, rng: &mut ChaCha8Rng) -> Vec<DVector<f64>> {
        let d = self.dim();
        let mut strata: Vec<Vec<usize>> = Vec::with_capacity(d);
        for _ in 0..d {
            let mut idx: Vec<usize> = (0..n).collect();
            // Fisher-Yates with draws in a fixed order.
            for i in (1..n).rev() {
                let j = rng.random_range(0..=i);
                idx.swap(i, j);
            }
            strata.push(idx);
        }
        (0..n)
            .map(|i| {
                DVector::from_fn(d, |k, _| {
                    let cell = strata[k][i] as f64;
                    let u = (cell + rng.random::<f64>()) / n as f64;
                    self.lower[k] + self.width(k) * u
                })
            })
            .collect()
    }

    /// The first `n` points of the Halton sequence (skipping index 0), mapped
    /// into the box. Supports up to 16 dimensions.
    pub fn halton(&self, n: usize) -> Vec<DVector<f64>> {
        const PRIMES: [u64; 16] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53];
        let d = self.dim();
        assert!(d <= PRIMES.len(), "Halton design supports up to 16 dimensions");
        (1..=n as u64)
            .map(|i| {
                DVector::from_fn(d, |k, _| {
                    self.lower[k] + self.width(k) * radical_inverse(i, PRIMES[k])
                })
            })
            .collect()
    }
}

fn radical_inverse(mut i: u64, base: u64) -> f64 {
    let mut inv = 0.0;
    let mut f = 1.0 / base as f64;
    while i > 0 {
        inv += f * (i % base) as f64;
        i /= base;
        f /= base as f64;
    }
    inv
}
