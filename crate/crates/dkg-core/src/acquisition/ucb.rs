//! UCB with pure exploration: one confidence-bound minimizer plus q - 1
//! points of maximal posterior variance conditioned on the pending picks.

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::gp::{GpPosterior, ObservationRecord};
use crate::opt;
use crate::stream::{child_seed, substream, STREAM_SELECT};

use super::CandidateBatch;

/// Confidence parameter for round t (1-based), shrinking the failure
/// probability like 1/t^2.
pub fn ucb_beta(t: usize) -> f64 {
    let t = t.max(1) as f64;
    2.0 * (std::f64::consts::PI.powi(2) * t * t / 0.6).ln()
}

/// Selects a batch: the minimizer of mean - sqrt(beta) * sd first, then
/// q - 1 exploration points, each maximizing the value variance conditioned
/// on everything already pending. Works on a single posterior.
pub fn ucb_pe_select(p: &GpPosterior, q: usize, beta: f64, seed: u64) -> Result<CandidateBatch> {
    ucb_pe_select_integrated(std::slice::from_ref(p), q, beta, seed)
}

/// Model-averaged variant used when hyperparameters are sampled: means and
/// variances are averaged across the posteriors.
pub fn ucb_pe_select_integrated(
    posteriors: &[GpPosterior],
    q: usize,
    beta: f64,
    seed: u64,
) -> Result<CandidateBatch> {
    if posteriors.is_empty() {
        return Err(Error::Contract("need at least one posterior".into()));
    }
    if q == 0 {
        return Err(Error::Contract("batch size must be at least 1".into()));
    }
    if !(beta.is_finite() && beta >= 0.0) {
        return Err(Error::Contract("beta must be finite and nonnegative".into()));
    }
    let domain = posteriors[0].domain().clone();
    let m = posteriors.len() as f64;

    // Lower confidence bound on the averaged model.
    let lcb = |models: &[GpPosterior], x: &DVector<f64>| -> (f64, DVector<f64>) {
        let mut mu = 0.0;
        let mut dmu = DVector::zeros(domain.dim());
        let mut var = 0.0;
        let mut dvar = DVector::zeros(domain.dim());
        for p in models {
            let (mv, mg) = p.mean_and_gradient(x);
            let (vv, vg) = p.variance_value_and_grad(x);
            mu += mv;
            dmu += mg;
            var += vv;
            dvar += vg;
        }
        mu /= m;
        dmu /= m;
        var /= m;
        dvar /= m;
        let sd = var.max(0.0).sqrt();
        if sd <= 1e-12 {
            (mu, dmu)
        } else {
            (mu - beta.sqrt() * sd, dmu - beta.sqrt() / (2.0 * sd) * dvar)
        }
    };
    let variance = |models: &[GpPosterior], x: &DVector<f64>| -> (f64, DVector<f64>) {
        let mut var = 0.0;
        let mut dvar = DVector::zeros(domain.dim());
        for p in models {
            let (vv, vg) = p.variance_value_and_grad(x);
            var += vv;
            dvar += vg;
        }
        (var / m, dvar / m)
    };

    let mut points: Vec<DVector<f64>> = Vec::with_capacity(q);
    let mut owned: Option<Vec<GpPosterior>> = None;
    for step in 0..q {
        let models: &[GpPosterior] = owned.as_deref().unwrap_or(posteriors);
        let x = if step == 0 {
            minimize_surface(&domain, child_seed(seed, 0), &mut |x| lcb(models, x))
        } else {
            // Maximize variance: minimize its negation.
            minimize_surface(&domain, child_seed(seed, step as u64), &mut |x| {
                let (v, g) = variance(models, x);
                (-v, -g)
            })
        };
        if step + 1 < q {
            let next = models
                .iter()
                .map(|p| {
                    // Conditioning on a pending point only needs its location;
                    // the believed value is the model's own mean.
                    let rec = ObservationRecord::value_only(x.clone(), p.mean_value(&x));
                    p.with_observations(vec![rec])
                })
                .collect::<Result<Vec<_>>>()?;
            owned = Some(next);
        }
        points.push(x);
    }
    Ok(CandidateBatch::new(points))
}

/// Minimizes a smooth surface over the domain: exhaustive on grids,
/// otherwise multistart descent plus a dense mesh scan in low dimension,
/// returning whichever candidate evaluates lowest.
fn minimize_surface<F>(domain: &crate::domain::Domain, seed: u64, fg: &mut F) -> DVector<f64>
where
    F: FnMut(&DVector<f64>) -> (f64, DVector<f64>),
{
    if let Some(grid) = domain.grid() {
        let (i, _) = opt::grid_argmin(&mut |x: &DVector<f64>| fg(x).0, grid);
        return grid[i].clone();
    }
    let mut rng = substream(seed, STREAM_SELECT);
    let mut starts = domain.latin_hypercube(8, &mut rng);
    let mesh_scan: Vec<DVector<f64>> = match domain.dim() {
        1 => opt::mesh(domain, 1001),
        2 => opt::mesh(domain, 41),
        _ => domain.halton(256),
    };
    let (mi, mesh_best) = opt::grid_argmin(&mut |x: &DVector<f64>| fg(x).0, &mesh_scan);
    starts.push(mesh_scan[mi].clone());
    let out = opt::multistart_minimize(fg, &starts, domain, 60, 0.1);
    if out.value <= mesh_best {
        out.x
    } else {
        mesh_scan[mi].clone()
    }
}
