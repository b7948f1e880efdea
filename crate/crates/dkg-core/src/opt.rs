//! Small deterministic optimizers: projected gradient descent with the
//! decaying step size used throughout the crate, multi-start drivers, and
//! grid enumeration for finite domains and low-dimensional fallbacks.

use nalgebra::DVector;

use crate::domain::Domain;

#[derive(Debug, Clone)]
pub struct DescentOutcome {
    pub x: DVector<f64>,
    pub value: f64,
}

/// Projected gradient descent with step size `lr0 / t^0.7`, `t = 1..=steps`.
/// The iterate is clamped onto the box after every step and the final
/// (last-iterate) point is returned with its objective value. A non-finite
/// gradient aborts the remaining steps of this start.
pub fn projected_descent<F>(
    fg: &mut F,
    start: &DVector<f64>,
    domain: &Domain,
    steps: usize,
    lr0: f64,
) -> DescentOutcome
where
    F: FnMut(&DVector<f64>) -> (f64, DVector<f64>),
{
    let mut x = start.clone();
    domain.project(&mut x);
    for t in 1..=steps {
        let (_, g) = fg(&x);
        if !g.iter().all(|v| v.is_finite()) {
            log::debug!("descent aborted: non-finite gradient at step {t}");
            break;
        }
        let lr = lr0 / (t as f64).powf(0.7);
        x.axpy(-lr, &g, 1.0);
        domain.project(&mut x);
    }
    let (value, _) = fg(&x);
    DescentOutcome { x, value }
}

/// Runs `projected_descent` from every start and returns the lowest terminal
/// value; exact ties go to the earliest start.
pub fn multistart_minimize<F>(
    fg: &mut F,
    starts: &[DVector<f64>],
    domain: &Domain,
    steps: usize,
    lr0: f64,
) -> DescentOutcome
where
    F: FnMut(&DVector<f64>) -> (f64, DVector<f64>),
{
    assert!(!starts.is_empty(), "need at least one start");
    let mut best: Option<DescentOutcome> = None;
    for s in starts {
        let out = projected_descent(fg, s, domain, steps, lr0);
        let better = match &best {
            None => true,
            Some(b) => out.value < b.value,
        };
        if better {
            best = Some(out);
        }
    }
    best.unwrap()
}

/// Index and value of the minimum of `f` over a finite point set; ties go to
/// the lowest index.
pub fn grid_argmin<F>(f: &mut F, points: &[DVector<f64>]) -> (usize, f64)
where
    F: FnMut(&DVector<f64>) -> f64,
{
    assert!(!points.is_empty());
    let mut best = (0, f(&points[0]));
    for (i, p) in points.iter().enumerate().skip(1) {
        let v = f(p);
        if v < best.1 {
            best = (i, v);
        }
    }
    best
}

/// A regular product mesh with `per_dim` points per axis. Supported for
/// one and two dimensions (the dense-grid fallbacks).
pub fn mesh(domain: &Domain, per_dim: usize) -> Vec<DVector<f64>> {
    assert!(per_dim >= 2);
    let d = domain.dim();
    let axis = |k: usize, i: usize| {
        domain.lower()[k] + domain.width(k) * i as f64 / (per_dim - 1) as f64
    };
    match d {
        1 => (0..per_dim)
            .map(|i| DVector::from_element(1, axis(0, i)))
            .collect(),
        2 => {
            let mut pts = Vec::with_capacity(per_dim * per_dim);
            for i in 0..per_dim {
                for j in 0..per_dim {
                    pts.push(DVector::from_vec(vec![axis(0, i), axis(1, j)]));
                }
            }
            pts
        }
        _ => panic!("mesh only supports one or two dimensions, got {d}"),
    }
}
