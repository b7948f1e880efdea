//! Acquisition functions for choosing where to evaluate next.
//!
//! The central family here scores a candidate batch by the expected drop in
//! the minimum of the posterior mean after the batch would be observed. The
//! expectation is estimated with Monte Carlo fantasies, and the estimator is
//! differentiable in the batch, which is what makes gradient-based batch
//! search work. Expected improvement and a UCB/pure-exploration hybrid are
//! provided as baselines.

mod expected_improvement;
mod fantasy;
mod knowledge_gradient;
mod ucb;

pub use expected_improvement::{d_ei_select, d_ei_value, ei_gradient, ei_select, ei_value};
pub use fantasy::{sigma_factor, sigma_factor_with, FantasyScheme, SigmaFactor};
pub use knowledge_gradient::{
    dkg_gradient, dkg_gradient_seeded, dkg_value, inner_minimize, integrated_acquisition,
    integrated_value, kg_gradient, kg_maximize, kg_value, maximize_batch, outer_maximize,
    value_with, AcquisitionBudget,
};
pub use ucb::{ucb_beta, ucb_pe_select, ucb_pe_select_integrated};

use nalgebra::DVector;

use crate::domain::Domain;
use crate::error::{Error, Result};

/// A batch of points proposed for evaluation, with the shared derivative
/// direction when one is being chosen alongside the points.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateBatch {
    pub points: Vec<DVector<f64>>,
    pub direction: Option<DVector<f64>>,
}

impl CandidateBatch {
    /// A batch with no direction attached.
    pub fn new(points: Vec<DVector<f64>>) -> Self {
        CandidateBatch {
            points,
            direction: None,
        }
    }

    /// A batch carrying a shared derivative direction.
    pub fn directional(points: Vec<DVector<f64>>, direction: DVector<f64>) -> Self {
        CandidateBatch {
            points,
            direction: Some(direction),
        }
    }

    pub fn q(&self) -> usize {
        self.points.len()
    }

    /// Checks the batch against a domain and a fantasy scheme: points must be
    /// inside the domain with matching dimension, and a unit direction must be
    /// present exactly when the scheme asks for one.
    pub fn validate(&self, domain: &Domain, scheme: &FantasyScheme) -> Result<()> {
        if self.points.is_empty() {
            return Err(Error::Contract("candidate batch is empty".into()));
        }
        for (i, x) in self.points.iter().enumerate() {
            if x.len() != domain.dim() {
                return Err(Error::DimensionMismatch {
                    expected: domain.dim(),
                    got: x.len(),
                });
            }
            if !domain.contains(x) {
                return Err(Error::Contract(format!(
                    "batch point {i} lies outside the domain"
                )));
            }
        }
        if scheme.needs_direction() {
            match &self.direction {
                None => {
                    return Err(Error::Contract(
                        "directional fantasies need a batch direction".into(),
                    ))
                }
                Some(theta) => {
                    if theta.len() != domain.dim() {
                        return Err(Error::DimensionMismatch {
                            expected: domain.dim(),
                            got: theta.len(),
                        });
                    }
                    if (theta.norm() - 1.0).abs() > 1e-12 {
                        return Err(Error::Contract(
                            "batch direction must have unit norm".into(),
                        ));
                    }
                }
            }
        }
        Ok(())
    }
}

/// One draw of the standardized fantasy noise shared by gradient and value
/// evaluations of the same fantasy.
#[derive(Debug, Clone, PartialEq)]
pub struct FantasyDraw {
    pub w: DVector<f64>,
}

/// A Monte Carlo acquisition estimate with its precision.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AcquisitionEstimate {
    pub value: f64,
    pub std_error: f64,
    pub num_fantasies: usize,
}

/// Gradient of a batch acquisition, laid out alongside the batch: one vector
/// per point plus an optional direction block.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchGradient {
    pub points: Vec<DVector<f64>>,
    pub direction: Option<DVector<f64>>,
}

impl BatchGradient {
    /// Concatenates the point blocks and the direction block into one vector.
    pub fn flat(&self) -> DVector<f64> {
        let d = self.points.first().map_or(0, |g| g.len());
        let total = self.points.len() * d + self.direction.as_ref().map_or(0, |g| g.len());
        let mut out = DVector::zeros(total);
        let mut k = 0;
        for g in &self.points {
            for v in g.iter() {
                out[k] = *v;
                k += 1;
            }
        }
        if let Some(g) = &self.direction {
            for v in g.iter() {
                out[k] = *v;
                k += 1;
            }
        }
        out
    }
}
