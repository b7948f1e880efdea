//! Synthetic minimization benchmarks with analytic gradients, plus the 1-d
//! illustration scenario comparing derivative-aware and derivative-free
//! selection.
//!
//! Every benchmark is audited the first time the registry is touched: the
//! analytic gradient must match central finite differences at 100 random
//! points and the stored minimum value must match an evaluation at the stored
//! minimizers. A typo in a formula therefore fails loudly at startup instead
//! of quietly skewing regret curves.

use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::acquisition::{value_with, AcquisitionBudget, CandidateBatch, FantasyScheme};
use crate::chol::cholesky_with_jitter;
use crate::domain::Domain;
use crate::driver::{Objective, ObservationRequest};
use crate::error::{Error, Result};
use crate::gp::{build_posterior, GpPosterior, ObservationRecord};
use crate::kernel::{Channel, KernelSpec};
use crate::reference::central_diff_gradient;
use crate::stream::{child_seed, substream, STREAM_EVAL, STREAM_TRUTH};

/// A benchmark: formula, gradient, box, known optimum, and the defaults the
/// experiments use (observable-partial mask and batch size).
pub struct BenchmarkDef {
    pub name: &'static str,
    pub dim: usize,
    pub bounds: &'static [(f64, f64)],
    pub value: fn(&DVector<f64>) -> f64,
    pub gradient: fn(&DVector<f64>) -> DVector<f64>,
    /// Global minimum value.
    pub f_star: f64,
    /// Known global minimizers (one row per minimizer).
    pub minimizers: &'static [&'static [f64]],
    pub default_mask: &'static [bool],
    pub default_q: usize,
}

impl BenchmarkDef {
    pub fn domain(&self) -> Domain {
        Domain::from_bounds(self.bounds).expect("benchmark bounds are valid")
    }

    pub fn contains(&self, x: &DVector<f64>) -> bool {
        x.len() == self.dim
            && x.iter()
                .zip(self.bounds)
                .all(|(v, (lo, hi))| *v >= *lo && *v <= *hi)
    }
}

// ---------------------------------------------------------------------------
// Formulas.

fn branin_value(x: &DVector<f64>) -> f64 {
    let (x1, x2) = (x[0], x[1]);
    let b = 5.1 / (4.0 * std::f64::consts::PI.powi(2));
    let c = 5.0 / std::f64::consts::PI;
    let t = 1.0 / (8.0 * std::f64::consts::PI);
    let u = x2 - b * x1 * x1 + c * x1 - 6.0;
    u * u + 10.0 * (1.0 - t) * x1.cos() + 10.0
}

fn branin_gradient(x: &DVector<f64>) -> DVector<f64> {
    let (x1, x2) = (x[0], x[1]);
    let b = 5.1 / (4.0 * std::f64::consts::PI.powi(2));
    let c = 5.0 / std::f64::consts::PI;
    let t = 1.0 / (8.0 * std::f64::consts::PI);
    let u = x2 - b * x1 * x1 + c * x1 - 6.0;
    DVector::from_column_slice(&[
        2.0 * u * (c - 2.0 * b * x1) - 10.0 * (1.0 - t) * x1.sin(),
        2.0 * u,
    ])
}

fn rosenbrock_value(x: &DVector<f64>) -> f64 {
    (0..x.len() - 1)
        .map(|i| {
            let a = x[i + 1] - x[i] * x[i];
            let b = 1.0 - x[i];
            100.0 * a * a + b * b
        })
        .sum()
}

fn rosenbrock_gradient(x: &DVector<f64>) -> DVector<f64> {
    let d = x.len();
    DVector::from_fn(d, |k, _| {
        let mut g = 0.0;
        if k + 1 < d {
            g += -400.0 * x[k] * (x[k + 1] - x[k] * x[k]) - 2.0 * (1.0 - x[k]);
        }
        if k > 0 {
            g += 200.0 * (x[k] - x[k - 1] * x[k - 1]);
        }
        g
    })
}

fn ackley_value(x: &DVector<f64>) -> f64 {
    let d = x.len() as f64;
    let radial = (x.iter().map(|v| v * v).sum::<f64>() / d).sqrt();
    let waves = x.iter().map(|v| (2.0 * std::f64::consts::PI * v).cos()).sum::<f64>() / d;
    -20.0 * (-0.2 * radial).exp() - waves.exp() + 20.0 + std::f64::consts::E
}

fn ackley_gradient(x: &DVector<f64>) -> DVector<f64> {
    let d = x.len() as f64;
    let radial = (x.iter().map(|v| v * v).sum::<f64>() / d).sqrt();
    let waves = x.iter().map(|v| (2.0 * std::f64::consts::PI * v).cos()).sum::<f64>() / d;
    let wave_scale = waves.exp() * 2.0 * std::f64::consts::PI / d;
    DVector::from_fn(x.len(), |k, _| {
        // The radial term is not differentiable at the origin; its symmetric
        // limit there is zero, which is also the value the minimum reports.
        let radial_part = if radial > 1e-12 {
            4.0 * (-0.2 * radial).exp() * x[k] / (d * radial)
        } else {
            0.0
        };
        radial_part + wave_scale * (2.0 * std::f64::consts::PI * x[k]).sin()
    })
}

fn levy_w(x: f64) -> f64 {
    1.0 + (x - 1.0) / 4.0
}

fn levy_value(x: &DVector<f64>) -> f64 {
    let d = x.len();
    let pi = std::f64::consts::PI;
    let w0 = levy_w(x[0]);
    let mut f = (pi * w0).sin().powi(2);
    for j in 0..d - 1 {
        let w = levy_w(x[j]);
        let s = (pi * w + 1.0).sin();
        f += (w - 1.0) * (w - 1.0) * (1.0 + 10.0 * s * s);
    }
    let wd = levy_w(x[d - 1]);
    let s = (2.0 * pi * wd).sin();
    f + (wd - 1.0) * (wd - 1.0) * (1.0 + s * s)
}

fn levy_gradient(x: &DVector<f64>) -> DVector<f64> {
    let d = x.len();
    let pi = std::f64::consts::PI;
    let mut df_dw = DVector::zeros(d);
    let w0 = levy_w(x[0]);
    df_dw[0] += pi * (2.0 * pi * w0).sin();
    for j in 0..d - 1 {
        let w = levy_w(x[j]);
        let s = (pi * w + 1.0).sin();
        df_dw[j] += 2.0 * (w - 1.0) * (1.0 + 10.0 * s * s)
            + (w - 1.0) * (w - 1.0) * 10.0 * pi * (2.0 * (pi * w + 1.0)).sin();
    }
    let wd = levy_w(x[d - 1]);
    let s = (2.0 * pi * wd).sin();
    df_dw[d - 1] += 2.0 * (wd - 1.0) * (1.0 + s * s)
        + (wd - 1.0) * (wd - 1.0) * 2.0 * pi * (4.0 * pi * wd).sin();
    // dw/dx = 1/4 on every coordinate.
    df_dw / 4.0
}

const HARTMANN_ALPHA: [f64; 4] = [1.0, 1.2, 3.0, 3.2];
const HARTMANN_A: [[f64; 6]; 4] = [
    [10.0, 3.0, 17.0, 3.5, 1.7, 8.0],
    [0.05, 10.0, 17.0, 0.1, 8.0, 14.0],
    [3.0, 3.5, 1.7, 10.0, 17.0, 8.0],
    [17.0, 8.0, 0.05, 10.0, 0.1, 14.0],
];
const HARTMANN_P: [[f64; 6]; 4] = [
    [0.1312, 0.1696, 0.5569, 0.0124, 0.8283, 0.5886],
    [0.2329, 0.4135, 0.8307, 0.3736, 0.1004, 0.9991],
    [0.2348, 0.1451, 0.3522, 0.2883, 0.3047, 0.6650],
    [0.4047, 0.8828, 0.8732, 0.5743, 0.1091, 0.0381],
];

fn hartmann_value(x: &DVector<f64>) -> f64 {
    -(0..4)
        .map(|i| {
            let inner: f64 = (0..6)
                .map(|j| {
                    let t = x[j] - HARTMANN_P[i][j];
                    HARTMANN_A[i][j] * t * t
                })
                .sum();
            HARTMANN_ALPHA[i] * (-inner).exp()
        })
        .sum::<f64>()
}

fn hartmann_gradient(x: &DVector<f64>) -> DVector<f64> {
    let mut g = DVector::zeros(6);
    for i in 0..4 {
        let inner: f64 = (0..6)
            .map(|j| {
                let t = x[j] - HARTMANN_P[i][j];
                HARTMANN_A[i][j] * t * t
            })
            .sum();
        let weight = HARTMANN_ALPHA[i] * (-inner).exp();
        for k in 0..6 {
            g[k] += weight * 2.0 * HARTMANN_A[i][k] * (x[k] - HARTMANN_P[i][k]);
        }
    }
    g
}

fn cosine_value(x: &DVector<f64>) -> f64 {
    x.iter()
        .map(|v| v * v - 0.1 * (5.0 * std::f64::consts::PI * v).cos())
        .sum()
}

fn cosine_gradient(x: &DVector<f64>) -> DVector<f64> {
    DVector::from_fn(x.len(), |k, _| {
        2.0 * x[k] + 0.5 * std::f64::consts::PI * (5.0 * std::f64::consts::PI * x[k]).sin()
    })
}

// ---------------------------------------------------------------------------
// Registry.

const BRANIN_BOUNDS: [(f64, f64); 2] = [(-5.0, 15.0), (0.0, 15.0)];
const ROSENBROCK_BOUNDS: [(f64, f64); 3] = [(-2.0, 2.0); 3];
const ACKLEY_BOUNDS: [(f64, f64); 5] = [(-2.0, 2.0); 5];
const LEVY_BOUNDS: [(f64, f64); 4] = [(-10.0, 10.0); 4];
const HARTMANN_BOUNDS: [(f64, f64); 6] = [(0.0, 1.0); 6];
const COSINE_BOUNDS: [(f64, f64); 8] = [(-1.0, 1.0); 8];

const BRANIN_MINIMIZERS: [&[f64]; 3] = [
    &[-std::f64::consts::PI, 12.275],
    &[std::f64::consts::PI, 2.275],
    &[9.42478, 2.475],
];
const ROSENBROCK_MIN: [&[f64]; 1] = [&[1.0, 1.0, 1.0]];
const ACKLEY_MIN: [&[f64]; 1] = [&[0.0; 5]];
const LEVY_MIN: [&[f64]; 1] = [&[1.0; 4]];
const HARTMANN_MIN: [&[f64]; 1] = [&[
    0.20169, 0.150011, 0.476874, 0.275332, 0.311652, 0.6573,
]];
const COSINE_MIN: [&[f64]; 1] = [&[0.0; 8]];

fn definitions() -> Vec<BenchmarkDef> {
    vec![
        BenchmarkDef {
            name: "branin2",
            dim: 2,
            bounds: &BRANIN_BOUNDS,
            value: branin_value,
            gradient: branin_gradient,
            f_star: 0.397887,
            minimizers: &BRANIN_MINIMIZERS,
            default_mask: &[true; 2],
            default_q: 4,
        },
        BenchmarkDef {
            name: "rosenbrock3",
            dim: 3,
            bounds: &ROSENBROCK_BOUNDS,
            value: rosenbrock_value,
            gradient: rosenbrock_gradient,
            f_star: 0.0,
            minimizers: &ROSENBROCK_MIN,
            default_mask: &[false, false, true],
            default_q: 4,
        },
        BenchmarkDef {
            name: "ackley5",
            dim: 5,
            bounds: &ACKLEY_BOUNDS,
            value: ackley_value,
            gradient: ackley_gradient,
            f_star: 0.0,
            minimizers: &ACKLEY_MIN,
            default_mask: &[true; 5],
            default_q: 4,
        },
        BenchmarkDef {
            name: "levy4",
            dim: 4,
            bounds: &LEVY_BOUNDS,
            value: levy_value,
            gradient: levy_gradient,
            f_star: 0.0,
            minimizers: &LEVY_MIN,
            default_mask: &[false, false, false, true],
            default_q: 8,
        },
        BenchmarkDef {
            name: "hartmann6",
            dim: 6,
            bounds: &HARTMANN_BOUNDS,
            value: hartmann_value,
            gradient: hartmann_gradient,
            f_star: -3.322368011391339,
            minimizers: &HARTMANN_MIN,
            default_mask: &[true; 6],
            default_q: 8,
        },
        BenchmarkDef {
            name: "cosine8",
            dim: 8,
            bounds: &COSINE_BOUNDS,
            value: cosine_value,
            gradient: cosine_gradient,
            f_star: -0.8,
            minimizers: &COSINE_MIN,
            default_mask: &[true, true, false, false, false, false, false, false],
            default_q: 8,
        },
    ]
}

/// Checks one definition: gradient against central differences (h = 1e-6,
/// relative error 1e-5) at 100 random interior points, and the stored
/// minimum against evaluation at every stored minimizer (1e-6).
fn audit(def: &BenchmarkDef) {
    assert_eq!(def.bounds.len(), def.dim, "{}: bounds shape", def.name);
    assert_eq!(def.default_mask.len(), def.dim, "{}: mask shape", def.name);
    let mut rng = substream(7, STREAM_TRUTH);
    for _ in 0..100 {
        let x = DVector::from_fn(def.dim, |k, _| {
            let (lo, hi) = def.bounds[k];
            lo + (hi - lo) * rng.random::<f64>()
        });
        let analytic = (def.gradient)(&x);
        let fd = central_diff_gradient(def.value, &x, 1e-6);
        let err = (&analytic - &fd).norm();
        let scale = analytic.norm().max(1.0);
        assert!(
            err <= 1e-5 * scale,
            "{}: gradient mismatch {err:.3e} (scale {scale:.3e}) at {:?}",
            def.name,
            x.as_slice()
        );
    }
    for m in def.minimizers {
        let x = DVector::from_column_slice(m);
        let v = (def.value)(&x);
        assert!(
            (v - def.f_star).abs() <= 1e-6,
            "{}: stored minimum {} but f(minimizer) = {v}",
            def.name,
            def.f_star
        );
    }
}

static REGISTRY: OnceLock<Vec<BenchmarkDef>> = OnceLock::new();

/// All benchmarks, audited on first access.
pub fn registry() -> &'static [BenchmarkDef] {
    REGISTRY
        .get_or_init(|| {
            let defs = definitions();
            for def in &defs {
                audit(def);
            }
            defs
        })
        .as_slice()
}

/// Looks a benchmark up by its registry name (`branin2`, `rosenbrock3`,
/// `ackley5`, `levy4`, `hartmann6`, `cosine8`).
pub fn benchmark(name: &str) -> Option<&'static BenchmarkDef> {
    registry().iter().find(|d| d.name == name)
}

// ---------------------------------------------------------------------------
// Noise and evaluation.

/// Per-channel observation noise: one standard deviation for the value and
/// one per partial derivative.
#[derive(Debug, Clone)]
pub struct NoiseSpec {
    sd: DVector<f64>,
}

impl NoiseSpec {
    pub fn new(sd: DVector<f64>) -> Result<Self> {
        if sd.iter().any(|s| !(*s >= 0.0) || !s.is_finite()) {
            return Err(Error::Contract(
                "noise standard deviations must be nonnegative and finite".into(),
            ));
        }
        Ok(Self { sd })
    }

    /// The same standard deviation on the value and every partial.
    pub fn homoscedastic(dim: usize, sd: f64) -> Result<Self> {
        Self::new(DVector::from_element(dim + 1, sd))
    }

    pub fn noise_free(dim: usize) -> Self {
        Self {
            sd: DVector::zeros(dim + 1),
        }
    }

    pub fn value_sd(&self) -> f64 {
        self.sd[0]
    }

    pub fn partial_sd(&self, k: usize) -> f64 {
        self.sd[k + 1]
    }
}

/// Evaluates a benchmark at `x`: the value and each masked partial get
/// independent Gaussian noise with the per-channel standard deviations in
/// `noise`. Deterministic given `seed`.
pub fn evaluate(
    def: &BenchmarkDef,
    x: &DVector<f64>,
    noise: &NoiseSpec,
    mask: &[bool],
    seed: u64,
) -> Result<ObservationRecord> {
    if !def.contains(x) {
        return Err(Error::Contract(format!(
            "{}: point {:?} outside the box",
            def.name,
            x.as_slice()
        )));
    }
    if mask.len() != def.dim {
        return Err(Error::DimensionMismatch {
            expected: def.dim,
            got: mask.len(),
        });
    }
    let mut rng = substream(seed, STREAM_EVAL);
    let normal = rand_distr::StandardNormal;
    let value = (def.value)(x) + noise.value_sd() * rng.sample::<f64, _>(normal);
    if mask.iter().all(|m| !m) {
        return Ok(ObservationRecord::value_only(x.clone(), value));
    }
    let mut grad = (def.gradient)(x);
    for k in 0..def.dim {
        if mask[k] {
            grad[k] += noise.partial_sd(k) * rng.sample::<f64, _>(normal);
        } else {
            grad[k] = 0.0;
        }
    }
    Ok(ObservationRecord::with_masked_gradient(
        x.clone(),
        value,
        mask.to_vec(),
        grad,
    ))
}

/// Noise-free regret of a candidate: `f(x) - f_star` and its log10, with the
/// regret clipped at 1e-12 before the logarithm.
pub fn immediate_regret(def: &BenchmarkDef, x: &DVector<f64>) -> (f64, f64) {
    let regret = ((def.value)(x) - def.f_star).max(0.0);
    (regret, regret.max(1e-12).log10())
}

// ---------------------------------------------------------------------------
// The driver-facing objective.

/// A benchmark wrapped for the optimization loop: the model works on the
/// unit cube, and this adapter owns the affine map to the physical box.
/// Observation noise is injected on the physical scale, so a partial
/// observation in unit coordinates is `width_k * (df/dx_k + noise)`.
pub struct BenchObjective {
    def: &'static BenchmarkDef,
    noise: NoiseSpec,
}

impl BenchObjective {
    pub fn new(def: &'static BenchmarkDef, noise: NoiseSpec) -> Self {
        Self { def, noise }
    }

    pub fn def(&self) -> &'static BenchmarkDef {
        self.def
    }

    pub fn unit_domain(&self) -> Domain {
        Domain::unit_cube(self.def.dim)
    }

    pub fn width(&self, k: usize) -> f64 {
        let (lo, hi) = self.def.bounds[k];
        hi - lo
    }

    /// Maps a unit-cube point to the benchmark's box.
    pub fn to_physical(&self, u: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(self.def.dim, |k, _| {
            let (lo, hi) = self.def.bounds[k];
            (lo + u[k] * (hi - lo)).clamp(lo, hi)
        })
    }

    /// Regret of a unit-cube recommendation.
    pub fn regret_of(&self, u: &DVector<f64>) -> (f64, f64) {
        immediate_regret(self.def, &self.to_physical(u))
    }
}

impl Objective for BenchObjective {
    fn dim(&self) -> usize {
        self.def.dim
    }

    fn evaluate(
        &self,
        u: &DVector<f64>,
        request: &ObservationRequest,
        rng: &mut ChaCha8Rng,
    ) -> Result<ObservationRecord> {
        let x = self.to_physical(u);
        let normal = rand_distr::StandardNormal;
        let value = (self.def.value)(&x) + self.noise.value_sd() * rng.sample::<f64, _>(normal);
        match request {
            ObservationRequest::Value => Ok(ObservationRecord::value_only(u.clone(), value)),
            ObservationRequest::ValueAndPartials(mask) => {
                if mask.len() != self.def.dim {
                    return Err(Error::DimensionMismatch {
                        expected: self.def.dim,
                        got: mask.len(),
                    });
                }
                let phys = (self.def.gradient)(&x);
                let mut grad = DVector::zeros(self.def.dim);
                for k in 0..self.def.dim {
                    if mask[k] {
                        let noisy = phys[k] + self.noise.partial_sd(k) * rng.sample::<f64, _>(normal);
                        grad[k] = self.width(k) * noisy;
                    }
                }
                Ok(ObservationRecord::with_masked_gradient(
                    u.clone(),
                    value,
                    mask.to_vec(),
                    grad,
                ))
            }
            ObservationRequest::ValueAndDirectional(theta) => {
                let phys = (self.def.gradient)(&x);
                let mut directional = 0.0;
                for k in 0..self.def.dim {
                    let noisy = phys[k] + self.noise.partial_sd(k) * rng.sample::<f64, _>(normal);
                    directional += theta[k] * self.width(k) * noisy;
                }
                Ok(ObservationRecord::with_directional(
                    u.clone(),
                    value,
                    (*theta).clone(),
                    directional,
                ))
            }
        }
    }

    fn true_value(&self, u: &DVector<f64>) -> Option<f64> {
        Some((self.def.value)(&self.to_physical(u)))
    }
}

// ---------------------------------------------------------------------------
// The 1-d illustration scenario.

/// Grid tables for the illustration: a sampled truth, two posteriors (with
/// and without derivative observations), four acquisition curves, each
/// method's pick, and the four post-sample posteriors.
#[derive(Debug, Clone)]
pub struct Figure1Data {
    pub grid: Vec<f64>,
    pub truth_value: Vec<f64>,
    pub truth_partial: Vec<f64>,
    pub history_indices: Vec<usize>,
    /// Posterior conditioned on values only.
    pub value_mean: Vec<f64>,
    pub value_sd: Vec<f64>,
    /// Posterior conditioned on values and gradients.
    pub grad_mean: Vec<f64>,
    pub grad_sd: Vec<f64>,
    pub kg: Vec<f64>,
    pub kg_se: Vec<f64>,
    pub dkg: Vec<f64>,
    pub dkg_se: Vec<f64>,
    pub ei: Vec<f64>,
    pub dei: Vec<f64>,
    pub kg_pick: usize,
    pub dkg_pick: usize,
    pub ei_pick: usize,
    pub dei_pick: usize,
    pub post_kg_mean: Vec<f64>,
    pub post_kg_sd: Vec<f64>,
    pub post_dkg_mean: Vec<f64>,
    pub post_dkg_sd: Vec<f64>,
    pub post_ei_mean: Vec<f64>,
    pub post_ei_sd: Vec<f64>,
    pub post_dei_mean: Vec<f64>,
    pub post_dei_sd: Vec<f64>,
}

/// The scenario's data tables plus the two live posteriors, so callers can
/// score further batches against the same models.
pub struct Figure1Scenario {
    pub data: Figure1Data,
    pub value_model: GpPosterior,
    pub grad_model: GpPosterior,
}

fn mean_sd_curves(p: &GpPosterior, grid: &[DVector<f64>]) -> (Vec<f64>, Vec<f64>) {
    let mean = grid.iter().map(|x| p.mean_value(x)).collect();
    let sd = grid
        .iter()
        .map(|x| p.variance_value(x).max(0.0).sqrt())
        .collect();
    (mean, sd)
}

fn argmax_ties_low(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

pub fn figure1_scenario(seed: u64) -> Result<Figure1Scenario> {
    figure1_scenario_sized(seed, 201, 2048)
}

/// The full construction with explicit grid size and fantasy count.
///
/// A 1-d truth is drawn jointly with its derivative from the model prior at
/// every grid point, a 4-point history is fixed, and the four acquisitions
/// are scored at every grid candidate (`q = 1`, direction `[1]` for the
/// derivative-aware pair, common fantasy numbers across candidates).
pub fn figure1_scenario_sized(
    seed: u64,
    grid_size: usize,
    fantasies: usize,
) -> Result<Figure1Scenario> {
    if grid_size < 8 {
        return Err(Error::Contract("illustration grid needs at least 8 points".into()));
    }
    let domain = Domain::grid_1d(0.0, 1.0, grid_size)?;
    let grid: Vec<DVector<f64>> = domain.grid().expect("grid domain").to_vec();
    let kernel = KernelSpec::isotropic(1, 1.0, 0.15, 1e-6, 1e-6)?;

    // Joint truth draw of (value, derivative) at every grid point.
    let n = 2 * grid_size;
    let mut prior = DMatrix::zeros(n, n);
    for a in 0..grid_size {
        for b in a..grid_size {
            let pair = kernel.pair(&grid[a], &grid[b]);
            for (ca, cha) in [Channel::Value, Channel::Partial(0)].iter().enumerate() {
                for (cb, chb) in [Channel::Value, Channel::Partial(0)].iter().enumerate() {
                    let v = pair.cov(cha, chb);
                    prior[(2 * a + ca, 2 * b + cb)] = v;
                    prior[(2 * b + cb, 2 * a + ca)] = v;
                }
            }
        }
    }
    let factor = cholesky_with_jitter(&prior)
        .map_err(|p| Error::SingularModel { record: p / 2 })?;
    let mut rng = substream(seed, STREAM_TRUTH);
    let z = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(rand_distr::StandardNormal));
    let sample = &factor.l * z;
    let truth_value: Vec<f64> = (0..grid_size).map(|j| sample[2 * j]).collect();
    let truth_partial: Vec<f64> = (0..grid_size).map(|j| sample[2 * j + 1]).collect();

    // A small fixed history, identical locations for both posteriors.
    let history_indices: Vec<usize> = [0.1, 0.37, 0.63, 0.9]
        .iter()
        .map(|f| ((grid_size - 1) as f64 * f).round() as usize)
        .collect();
    let value_history: Vec<ObservationRecord> = history_indices
        .iter()
        .map(|&j| ObservationRecord::value_only(grid[j].clone(), truth_value[j]))
        .collect();
    let grad_history: Vec<ObservationRecord> = history_indices
        .iter()
        .map(|&j| {
            ObservationRecord::with_full_gradient(
                grid[j].clone(),
                truth_value[j],
                DVector::from_element(1, truth_partial[j]),
            )
        })
        .collect();
    let value_model = build_posterior(0.0, kernel.clone(), domain.clone(), value_history)?;
    let grad_model = build_posterior(0.0, kernel.clone(), domain.clone(), grad_history)?;

    let (value_mean, value_sd) = mean_sd_curves(&value_model, &grid);
    let (grad_mean, grad_sd) = mean_sd_curves(&grad_model, &grid);

    // Acquisition curves; one shared seed keeps the fantasy numbers common
    // across candidates.
    let budget = AcquisitionBudget::default();
    let curve_seed = child_seed(seed, 1);
    let mut kg = Vec::with_capacity(grid_size);
    let mut kg_se = Vec::with_capacity(grid_size);
    let mut dkg = Vec::with_capacity(grid_size);
    let mut dkg_se = Vec::with_capacity(grid_size);
    let mut ei = Vec::with_capacity(grid_size);
    let mut dei = Vec::with_capacity(grid_size);
    for x in &grid {
        let plain = CandidateBatch::new(vec![x.clone()]);
        let directed = CandidateBatch::directional(vec![x.clone()], DVector::from_element(1, 1.0));
        let kg_est = value_with(
            &value_model,
            &plain,
            &FantasyScheme::ValueOnly,
            fantasies,
            curve_seed,
            &budget,
        )?;
        kg.push(kg_est.value);
        kg_se.push(kg_est.std_error);
        let dkg_est = value_with(
            &grad_model,
            &directed,
            &FantasyScheme::Directional,
            fantasies,
            curve_seed,
            &budget,
        )?;
        dkg.push(dkg_est.value);
        dkg_se.push(dkg_est.std_error);
        ei.push(crate::acquisition::ei_value(&value_model, x));
        dei.push(crate::acquisition::ei_value(&grad_model, x));
    }

    let kg_pick = argmax_ties_low(&kg);
    let dkg_pick = argmax_ties_low(&dkg);
    let ei_pick = argmax_ties_low(&ei);
    let dei_pick = argmax_ties_low(&dei);

    // Post-sample posteriors: each method observes the truth at its pick,
    // through its own channel set.
    let value_obs = |j: usize| ObservationRecord::value_only(grid[j].clone(), truth_value[j]);
    let grad_obs = |j: usize| {
        ObservationRecord::with_full_gradient(
            grid[j].clone(),
            truth_value[j],
            DVector::from_element(1, truth_partial[j]),
        )
    };
    let post_kg = value_model.with_observations(vec![value_obs(kg_pick)])?;
    let post_ei = value_model.with_observations(vec![value_obs(ei_pick)])?;
    let post_dkg = grad_model.with_observations(vec![grad_obs(dkg_pick)])?;
    let post_dei = grad_model.with_observations(vec![grad_obs(dei_pick)])?;
    let (post_kg_mean, post_kg_sd) = mean_sd_curves(&post_kg, &grid);
    let (post_ei_mean, post_ei_sd) = mean_sd_curves(&post_ei, &grid);
    let (post_dkg_mean, post_dkg_sd) = mean_sd_curves(&post_dkg, &grid);
    let (post_dei_mean, post_dei_sd) = mean_sd_curves(&post_dei, &grid);

    Ok(Figure1Scenario {
        data: Figure1Data {
            grid: grid.iter().map(|x| x[0]).collect(),
            truth_value,
            truth_partial,
            history_indices,
            value_mean,
            value_sd,
            grad_mean,
            grad_sd,
            kg,
            kg_se,
            dkg,
            dkg_se,
            ei,
            dei,
            kg_pick,
            dkg_pick,
            ei_pick,
            dei_pick,
            post_kg_mean,
            post_kg_sd,
            post_dkg_mean,
            post_dkg_sd,
            post_ei_mean,
            post_ei_sd,
            post_dei_mean,
            post_dei_sd,
        },
        value_model,
        grad_model,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dvector;

    #[test]
    fn registry_lists_all_six_audited_benchmarks() {
        let names: Vec<&str> = registry().iter().map(|d| d.name).collect();
        assert_eq!(
            names,
            vec!["branin2", "rosenbrock3", "ackley5", "levy4", "hartmann6", "cosine8"]
        );
        assert!(benchmark("hartmann6").is_some());
        assert!(benchmark("nope").is_none());
        let q: Vec<usize> = registry().iter().map(|d| d.default_q).collect();
        assert_eq!(q, vec![4, 4, 4, 8, 8, 8]);
    }

    #[test]
    fn masks_expose_the_documented_partials() {
        assert_eq!(benchmark("rosenbrock3").unwrap().default_mask, &[false, false, true]);
        assert_eq!(
            benchmark("levy4").unwrap().default_mask,
            &[false, false, false, true]
        );
        let cosine = benchmark("cosine8").unwrap().default_mask;
        assert_eq!(cosine.iter().filter(|m| **m).count(), 2);
        assert!(cosine[0] && cosine[1]);
        assert!(benchmark("branin2").unwrap().default_mask.iter().all(|m| *m));
        assert!(benchmark("ackley5").unwrap().default_mask.iter().all(|m| *m));
        assert!(benchmark("hartmann6").unwrap().default_mask.iter().all(|m| *m));
    }

    #[test]
    fn known_minima_evaluate_as_stored() {
        let rosen = benchmark("rosenbrock3").unwrap();
        let rec = evaluate(
            rosen,
            &dvector![1.0, 1.0, 1.0],
            &NoiseSpec::noise_free(3),
            rosen.default_mask,
            0,
        )
        .unwrap();
        assert!(rec.value.unwrap().abs() <= 1e-12);
        assert!(rec.partials.as_ref().unwrap().values[2].abs() <= 1e-12);

        let ackley = benchmark("ackley5").unwrap();
        let rec = evaluate(
            ackley,
            &DVector::zeros(5),
            &NoiseSpec::noise_free(5),
            ackley.default_mask,
            0,
        )
        .unwrap();
        assert!(rec.value.unwrap().abs() <= 1e-12);
        assert!(rec.partials.as_ref().unwrap().values.amax() <= 1e-12);

        let branin = benchmark("branin2").unwrap();
        let v = (branin.value)(&dvector![std::f64::consts::PI, 2.275]);
        assert!((v - 0.397887).abs() <= 1e-4);

        let hartmann = benchmark("hartmann6").unwrap();
        let x = DVector::from_column_slice(hartmann.minimizers[0]);
        let (regret, _) = immediate_regret(hartmann, &x);
        assert!((hartmann.value)(&x) < -3.3223);
        assert!(regret <= 1e-4);

        let cosine = benchmark("cosine8").unwrap();
        assert!(((cosine.value)(&DVector::zeros(8)) + 0.8).abs() <= 1e-12);

        let levy = benchmark("levy4").unwrap();
        assert!((levy.value)(&DVector::from_element(4, 1.0)).abs() <= 1e-12);
    }

    #[test]
    fn regret_is_clipped_and_seed_free() {
        let branin = benchmark("branin2").unwrap();
        let x = dvector![std::f64::consts::PI, 2.275];
        let (r, log_r) = immediate_regret(branin, &x);
        assert!(r >= 0.0);
        assert!(log_r >= -12.0 - 1e-9);
        let (r2, _) = immediate_regret(branin, &dvector![0.0, 0.0]);
        assert!(r2 > 1.0);
    }

    #[test]
    fn evaluation_is_deterministic_and_masked() {
        let levy = benchmark("levy4").unwrap();
        let x = dvector![1.5, -2.0, 3.0, 0.5];
        let noise = NoiseSpec::homoscedastic(4, 0.5).unwrap();
        let a = evaluate(levy, &x, &noise, levy.default_mask, 42).unwrap();
        let b = evaluate(levy, &x, &noise, levy.default_mask, 42).unwrap();
        assert_eq!(a.value, b.value);
        assert_eq!(
            a.partials.as_ref().unwrap().values,
            b.partials.as_ref().unwrap().values
        );
        let c = evaluate(levy, &x, &noise, levy.default_mask, 43).unwrap();
        assert_ne!(a.value, c.value);
        // Only the fourth partial is observed.
        assert_eq!(a.channels().len(), 2);
        assert_eq!(
            a.partials.as_ref().unwrap().mask,
            vec![false, false, false, true]
        );
        // Noise-free evaluation reproduces the formula exactly.
        let clean = evaluate(levy, &x, &NoiseSpec::noise_free(4), levy.default_mask, 7).unwrap();
        assert_eq!(clean.value.unwrap(), (levy.value)(&x));
    }

    #[test]
    fn evaluation_rejects_points_outside_the_box() {
        let branin = benchmark("branin2").unwrap();
        let err = evaluate(
            branin,
            &dvector![20.0, 0.0],
            &NoiseSpec::noise_free(2),
            branin.default_mask,
            0,
        );
        assert!(matches!(err, Err(Error::Contract(_))));
    }

    #[test]
    fn injected_noise_has_the_declared_scale() {
        let branin = benchmark("branin2").unwrap();
        let x = dvector![3.0, 5.0];
        let clean = (branin.value)(&x);
        let noise = NoiseSpec::homoscedastic(2, 0.5).unwrap();
        let n = 4000;
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for seed in 0..n {
            let rec = evaluate(branin, &x, &noise, branin.default_mask, seed).unwrap();
            let e = rec.value.unwrap() - clean;
            sum += e;
            sum_sq += e * e;
        }
        let mean = sum / n as f64;
        let sd = (sum_sq / n as f64 - mean * mean).sqrt();
        assert!(mean.abs() <= 0.05, "noise mean {mean}");
        assert!((sd - 0.5).abs() <= 0.05, "noise sd {sd}");
    }

    #[test]
    fn unit_cube_objective_scales_gradients_by_the_box_width() {
        let branin = benchmark("branin2").unwrap();
        let objective = BenchObjective::new(branin, NoiseSpec::noise_free(2));
        let u = dvector![0.4, 0.3];
        let x = objective.to_physical(&u);
        assert!((x[0] - (-5.0 + 0.4 * 20.0)).abs() <= 1e-12);
        assert!((x[1] - 0.3 * 15.0).abs() <= 1e-12);

        let mut rng = substream(0, STREAM_EVAL);
        let rec = objective
            .evaluate(
                &u,
                &ObservationRequest::ValueAndPartials(&[true, true]),
                &mut rng,
            )
            .unwrap();
        let phys = (branin.gradient)(&x);
        let vals = &rec.partials.as_ref().unwrap().values;
        assert!((vals[0] - 20.0 * phys[0]).abs() <= 1e-10);
        assert!((vals[1] - 15.0 * phys[1]).abs() <= 1e-10);

        // The directional observation contracts the scaled gradient with the
        // unit-cube direction.
        let theta = dvector![0.6, 0.8];
        let rec = objective
            .evaluate(
                &u,
                &ObservationRequest::ValueAndDirectional(&theta),
                &mut rng,
            )
            .unwrap();
        let want = 0.6 * 20.0 * phys[0] + 0.8 * 15.0 * phys[1];
        assert!((rec.directional.as_ref().unwrap().value - want).abs() <= 1e-10);
        assert_eq!(objective.true_value(&u).unwrap(), (branin.value)(&x));
    }

    #[test]
    fn illustration_tables_have_the_configured_shape() {
        let scenario = figure1_scenario_sized(3, 61, 256).unwrap();
        let d = &scenario.data;
        for curve in [
            &d.grid,
            &d.truth_value,
            &d.truth_partial,
            &d.value_mean,
            &d.value_sd,
            &d.grad_mean,
            &d.grad_sd,
            &d.kg,
            &d.kg_se,
            &d.dkg,
            &d.dkg_se,
            &d.ei,
            &d.dei,
            &d.post_kg_mean,
            &d.post_kg_sd,
            &d.post_dkg_mean,
            &d.post_dkg_sd,
            &d.post_ei_mean,
            &d.post_ei_sd,
            &d.post_dei_mean,
            &d.post_dei_sd,
        ] {
            assert_eq!(curve.len(), 61);
        }
        for pick in [d.kg_pick, d.dkg_pick, d.ei_pick, d.dei_pick] {
            assert!(pick < 61);
        }
    }

    #[test]
    fn derivative_observations_shrink_the_posterior_everywhere() {
        let scenario = figure1_scenario_sized(5, 101, 64).unwrap();
        let d = &scenario.data;
        for j in 0..101 {
            assert!(
                d.grad_sd[j] * d.grad_sd[j] <= d.value_sd[j] * d.value_sd[j] + 1e-10,
                "variance at grid index {j}: with gradients {} vs without {}",
                d.grad_sd[j] * d.grad_sd[j],
                d.value_sd[j] * d.value_sd[j]
            );
        }
    }

    #[test]
    fn acquisition_curves_are_nonnegative_within_noise() {
        let scenario = figure1_scenario_sized(11, 81, 256).unwrap();
        let d = &scenario.data;
        for j in 0..81 {
            assert!(d.kg[j] >= -3.0 * d.kg_se[j] - 1e-9, "kg at {j}: {}", d.kg[j]);
            assert!(
                d.dkg[j] >= -3.0 * d.dkg_se[j] - 1e-9,
                "dkg at {j}: {}",
                d.dkg[j]
            );
            assert!(d.ei[j] >= -1e-12);
            assert!(d.dei[j] >= -1e-12);
        }
    }

    #[test]
    fn illustration_is_deterministic_in_the_seed() {
        let a = figure1_scenario_sized(9, 41, 128).unwrap();
        let b = figure1_scenario_sized(9, 41, 128).unwrap();
        assert_eq!(a.data.kg_pick, b.data.kg_pick);
        assert_eq!(a.data.dkg_pick, b.data.dkg_pick);
        assert_eq!(a.data.truth_value, b.data.truth_value);
        assert_eq!(a.data.dkg, b.data.dkg);
    }
}
