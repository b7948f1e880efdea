//! The end-to-end checks this workspace must pass before a release: exact
//! posterior algebra, derivative kernels, the stochastic acquisition
//! gradient, the value-of-information ordering, desk-scale consistency and
//! regret behavior, masked-gradient bookkeeping, and the hyperparameter
//! sampler. One test per check; each prints the measured quantities so a
//! failure tells the whole story on its own.

use std::time::Instant;

use dkg_cli::config::{AcquisitionName, BudgetOverrides, ExperimentConfig, HyperOverrides, ModeName};
use dkg_cli::runner::run_experiment;
use dkg_core::acquisition::{
    dkg_gradient_seeded, dkg_value, inner_minimize, kg_value, sigma_factor, FantasyDraw,
};
use dkg_core::driver::{
    run, AcquisitionKind, HyperMode, Mode, Objective, ObservationRequest, ProblemSpec,
};
use dkg_core::gp::{build_posterior, ObservationRecord};
use dkg_core::hyper::{ensemble_sample, sample_hyperparameters, LogDensity};
use dkg_core::kernel::{Channel, KernelSpec};
use dkg_core::reference::conditioned_by_block_inversion;
use dkg_core::stream::{substream, STREAM_FANTASY, STREAM_HYPER, STREAM_TRUTH};
use dkg_core::{
    benchmark, evaluate_benchmark, figure1_scenario, CandidateBatch, Domain, NoiseSpec,
};
use nalgebra::{dvector, DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(rand_distr::StandardNormal)
}

/// A kernel with per-dimension length scales drawn from comfortable ranges.
fn random_kernel(d: usize, rng: &mut ChaCha8Rng) -> KernelSpec {
    let signal = 0.4 + 1.6 * rng.random::<f64>();
    let lengths = DVector::from_fn(d, |_, _| 0.15 + 0.45 * rng.random::<f64>());
    let mut noises = DVector::zeros(d + 1);
    for k in 0..=d {
        noises[k] = 0.01 + 0.09 * rng.random::<f64>();
    }
    KernelSpec::new(signal, lengths, noises).unwrap()
}

fn random_record(d: usize, rng: &mut ChaCha8Rng) -> ObservationRecord {
    let x = DVector::from_fn(d, |_, _| rng.random::<f64>());
    let y = standard_normal(rng);
    match rng.random_range(0..4) {
        0 => ObservationRecord::value_only(x, y),
        1 => {
            let g = DVector::from_fn(d, |_, _| 2.0 * standard_normal(rng));
            ObservationRecord::with_full_gradient(x, y, g)
        }
        2 => {
            let mut mask = vec![false; d];
            mask[rng.random_range(0..d)] = true;
            for b in mask.iter_mut() {
                if rng.random::<f64>() < 0.5 {
                    *b = true;
                }
            }
            let g = DVector::from_fn(d, |_, _| 2.0 * standard_normal(rng));
            ObservationRecord::with_masked_gradient(x, y, mask, g)
        }
        _ => {
            let theta = DVector::from_fn(d, |_, _| standard_normal(rng)).normalize();
            let s = 2.0 * standard_normal(rng);
            ObservationRecord::with_directional(x, y, theta, s)
        }
    }
}

/// Check 1: the incremental posterior (Cholesky downdates and channel
/// bookkeeping) agrees with brute-force joint-Gaussian conditioning on 200
/// random mixed-channel histories in up to three dimensions.
#[test]
fn acceptance_01_posterior_matches_brute_force_conditioning() {
    let t0 = Instant::now();
    let mut worst: f64 = 0.0;
    for case in 0..200u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + case);
        let d = 1 + (case % 3) as usize;
        let kernel = random_kernel(d, &mut rng);
        let prior_mean = 2.0 * rng.random::<f64>() - 1.0;
        let n = 1 + rng.random_range(0..6);
        let history: Vec<ObservationRecord> =
            (0..n).map(|_| random_record(d, &mut rng)).collect();

        let p = build_posterior(
            prior_mean,
            kernel.clone(),
            Domain::unit_cube(d),
            history.clone(),
        )
        .unwrap();

        let xs: Vec<DVector<f64>> = (0..3)
            .map(|_| DVector::from_fn(d, |_, _| rng.random::<f64>()))
            .collect();
        let query = p.posterior_query(&xs).unwrap();

        let mut oracle_query: Vec<(DVector<f64>, Channel)> = Vec::new();
        for x in &xs {
            oracle_query.push((x.clone(), Channel::Value));
            for k in 0..d {
                oracle_query.push((x.clone(), Channel::Partial(k)));
            }
        }
        let (mean, cov) =
            conditioned_by_block_inversion(prior_mean, &kernel, &history, &oracle_query);

        let per = d + 1;
        for (pt, got_mean) in query.means.iter().enumerate() {
            for c in 0..per {
                worst = worst.max((got_mean[c] - mean[pt * per + c]).abs());
            }
        }
        for i in 0..cov.nrows() {
            for j in 0..cov.ncols() {
                worst = worst.max((query.cov[(i, j)] - cov[(i, j)]).abs());
            }
        }
    }
    println!(
        "posterior vs brute force: max abs deviation {worst:.3e} over 200 histories \
         ({:.1?})",
        t0.elapsed()
    );
    assert!(worst <= 1e-8, "max abs deviation {worst:.3e} exceeds 1e-8");
}

/// Check 2: the analytic derivative blocks of the covariance agree with
/// central finite differences (h = 1e-6) on 100 random pairs for each input
/// dimension in {1, 2, 3, 6}. Blocks are compared by their largest entry.
#[test]
fn acceptance_02_kernel_derivative_blocks_match_finite_differences() {
    let t0 = Instant::now();
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for &d in &[1usize, 2, 3, 6] {
        for pair in 0..100u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(2000 + 100 * d as u64 + pair);
            let kernel = random_kernel(d, &mut rng);
            let x = DVector::from_fn(d, |_, _| 2.0 * rng.random::<f64>() - 1.0);
            let xp = if pair % 4 == 0 {
                &x + DVector::from_fn(d, |_, _| 0.1 * standard_normal(&mut rng))
            } else {
                DVector::from_fn(d, |_, _| 2.0 * rng.random::<f64>() - 1.0)
            };
            let pk = kernel.pair(&x, &xp);

            // First-derivative block in the second argument.
            let mut j_max: f64 = 0.0;
            let mut j_err: f64 = 0.0;
            for j in 0..d {
                let analytic = pk.cov(&Channel::Value, &Channel::Partial(j));
                let mut hi = xp.clone();
                hi[j] += h;
                let mut lo = xp.clone();
                lo[j] -= h;
                let fd = (kernel.k(&x, &hi) - kernel.k(&x, &lo)) / (2.0 * h);
                j_max = j_max.max(analytic.abs());
                j_err = j_err.max((fd - analytic).abs());
            }
            // Mirror block in the first argument.
            for i in 0..d {
                let analytic = pk.cov(&Channel::Partial(i), &Channel::Value);
                let mut hi = x.clone();
                hi[i] += h;
                let mut lo = x.clone();
                lo[i] -= h;
                let fd = (kernel.k(&hi, &xp) - kernel.k(&lo, &xp)) / (2.0 * h);
                j_max = j_max.max(analytic.abs());
                j_err = j_err.max((fd - analytic).abs());
            }
            // Mixed second-derivative block, differenced through the
            // analytic first-derivative block.
            let mut h_max: f64 = 0.0;
            let mut h_err: f64 = 0.0;
            for i in 0..d {
                let mut hi = x.clone();
                hi[i] += h;
                let mut lo = x.clone();
                lo[i] -= h;
                let pk_hi = kernel.pair(&hi, &xp);
                let pk_lo = kernel.pair(&lo, &xp);
                for j in 0..d {
                    let analytic = pk.cov(&Channel::Partial(i), &Channel::Partial(j));
                    let fd = (pk_hi.cov(&Channel::Value, &Channel::Partial(j))
                        - pk_lo.cov(&Channel::Value, &Channel::Partial(j)))
                        / (2.0 * h);
                    h_max = h_max.max(analytic.abs());
                    h_err = h_err.max((fd - analytic).abs());
                }
            }
            worst = worst.max(j_err / j_max.max(1e-10));
            worst = worst.max(h_err / h_max.max(1e-10));
        }
    }
    println!(
        "kernel derivative blocks: worst block-relative deviation {worst:.3e} ({:.1?})",
        t0.elapsed()
    );
    assert!(worst <= 1e-4, "worst relative deviation {worst:.3e} exceeds 1e-4");
}

struct GradientInstance {
    name: &'static str,
    kernel: KernelSpec,
    prior_mean: f64,
    history: Vec<ObservationRecord>,
    points: Vec<DVector<f64>>,
    theta: DVector<f64>,
}

fn gradient_instances() -> Vec<GradientInstance> {
    vec![
        GradientInstance {
            name: "1-d mid lengths",
            kernel: KernelSpec::isotropic(1, 1.0, 0.35, 0.09, 0.05).unwrap(),
            prior_mean: 0.2,
            history: vec![
                ObservationRecord::with_full_gradient(dvector![0.25], 0.4, dvector![-1.1]),
                ObservationRecord::with_full_gradient(dvector![0.6], -0.5, dvector![0.3]),
                ObservationRecord::with_full_gradient(dvector![0.85], 0.2, dvector![0.9]),
            ],
            points: vec![dvector![0.25], dvector![0.30]],
            theta: dvector![1.0],
        },
        GradientInstance {
            name: "1-d short lengths noisy",
            kernel: KernelSpec::isotropic(1, 1.5, 0.2, 0.2, 0.1).unwrap(),
            prior_mean: 0.0,
            history: vec![
                ObservationRecord::with_full_gradient(dvector![0.1], 0.9, dvector![-2.0]),
                ObservationRecord::value_only(dvector![0.45], -0.7),
                ObservationRecord::with_full_gradient(dvector![0.8], 0.5, dvector![1.4]),
            ],
            points: vec![dvector![0.30], dvector![0.55]],
            theta: dvector![1.0],
        },
        GradientInstance {
            name: "1-d long lengths",
            kernel: KernelSpec::isotropic(1, 0.8, 0.5, 0.04, 0.04).unwrap(),
            prior_mean: -0.3,
            history: vec![
                ObservationRecord::with_full_gradient(dvector![0.2], -0.1, dvector![-0.8]),
                ObservationRecord::with_full_gradient(dvector![0.9], 0.6, dvector![1.1]),
            ],
            points: vec![dvector![0.15], dvector![0.20]],
            theta: dvector![1.0],
        },
        GradientInstance {
            name: "2-d anisotropic",
            kernel: KernelSpec::new(
                1.2,
                dvector![0.25, 0.7],
                dvector![0.15, 0.08, 0.08],
            )
            .unwrap(),
            prior_mean: 0.1,
            history: vec![
                ObservationRecord::with_full_gradient(
                    dvector![0.2, 0.3],
                    0.5,
                    dvector![-2.2, 0.4],
                ),
                ObservationRecord::with_full_gradient(
                    dvector![0.7, 0.2],
                    -0.4,
                    dvector![1.6, -0.5],
                ),
                ObservationRecord::with_full_gradient(
                    dvector![0.5, 0.8],
                    0.1,
                    dvector![0.9, 0.6],
                ),
            ],
            points: vec![dvector![0.6540, 0.4653], dvector![0.7217, 0.2092]],
            theta: dvector![0.5647, 0.8253].normalize(),
        },
    ]
}

/// Check 3: the mean of many per-draw envelope gradients matches central
/// finite differences of the Monte-Carlo value computed from the very same
/// fantasy stream, coordinate by coordinate, to 5 percent. Direction
/// coordinates are differenced along the unit sphere.
#[test]
fn acceptance_03_envelope_gradient_matches_paired_finite_differences() {
    let t0 = Instant::now();
    let n = 1 << 12;
    let seed = 3;
    let h = 1e-3;
    for instance in gradient_instances() {
        let d = instance.theta.len();
        let q = instance.points.len();
        let p = build_posterior(
            instance.prior_mean,
            instance.kernel.clone(),
            Domain::unit_cube(d),
            instance.history.clone(),
        )
        .unwrap();
        let batch =
            CandidateBatch::directional(instance.points.clone(), instance.theta.clone());
        let m = sigma_factor(&p, &batch).unwrap().fantasy_dim();

        let mut grad_sum = DVector::zeros(q * d + d);
        for i in 0..n {
            let mut rng = substream(seed, STREAM_FANTASY + i as u64);
            let w = DVector::from_fn(m, |_, _| standard_normal(&mut rng));
            let g = dkg_gradient_seeded(&p, &batch, &FantasyDraw { w }, seed).unwrap();
            grad_sum += g.flat();
        }
        let grad = grad_sum / n as f64;

        let value_of = |points: Vec<DVector<f64>>, theta: DVector<f64>| {
            let b = CandidateBatch::directional(points, theta.normalize());
            dkg_value(&p, &b, n, seed).unwrap().value
        };

        // Point coordinates.
        for c in 0..q * d {
            let (pt, k) = (c / d, c % d);
            let mut hi = instance.points.clone();
            hi[pt][k] += h;
            let mut lo = instance.points.clone();
            lo[pt][k] -= h;
            let fd = (value_of(hi, instance.theta.clone())
                - value_of(lo, instance.theta.clone()))
                / (2.0 * h);
            let rel = (grad[c] - fd).abs() / fd.abs();
            println!(
                "{}: point coord {c}: gradient {:+.5} vs differences {fd:+.5} (rel {:.3})",
                instance.name, grad[c], rel
            );
            assert!(fd.abs() >= 0.01, "{}: coordinate {c} is degenerate", instance.name);
            assert!(
                rel <= 0.05,
                "{}: coordinate {c} off by {:.1}%",
                instance.name,
                100.0 * rel
            );
        }
        // Direction coordinates, differenced on the sphere. The tangent
        // projection makes radial perturbations vanish, so in one dimension
        // the whole block must be zero.
        for k in 0..d {
            let c = q * d + k;
            let mut hi = instance.theta.clone();
            hi[k] += h;
            let mut lo = instance.theta.clone();
            lo[k] -= h;
            let fd = (value_of(instance.points.clone(), hi)
                - value_of(instance.points.clone(), lo))
                / (2.0 * h);
            if d == 1 {
                assert!(
                    grad[c].abs() <= 1e-12 && fd.abs() <= 1e-9,
                    "{}: radial direction coordinate must vanish, got {} vs {fd}",
                    instance.name,
                    grad[c]
                );
                continue;
            }
            let rel = (grad[c] - fd).abs() / fd.abs();
            println!(
                "{}: direction coord {k}: gradient {:+.5} vs differences {fd:+.5} (rel {:.3})",
                instance.name, grad[c], rel
            );
            assert!(fd.abs() >= 0.01, "{}: direction {k} is degenerate", instance.name);
            assert!(
                rel <= 0.05,
                "{}: direction {k} off by {:.1}%",
                instance.name,
                100.0 * rel
            );
        }
    }
    println!("envelope gradients matched in {:.1?}", t0.elapsed());
}

/// One random grid posterior plus a two-point batch, shared by checks 4 and 5.
fn grid_case(case: u64) -> (dkg_core::gp::GpPosterior, CandidateBatch, CandidateBatch) {
    let mut rng = ChaCha8Rng::seed_from_u64(50 + case);
    let domain = Domain::grid_1d(0.0, 1.0, 25).unwrap();
    let grid: Vec<DVector<f64>> = domain.grid().unwrap().to_vec();
    let kernel = KernelSpec::isotropic(
        1,
        0.5 + 1.5 * rng.random::<f64>(),
        0.1 + 0.3 * rng.random::<f64>(),
        0.01 + 0.09 * rng.random::<f64>(),
        0.01 + 0.09 * rng.random::<f64>(),
    )
    .unwrap();
    let mut indices = Vec::new();
    while indices.len() < 3 {
        let i = rng.random_range(0..grid.len());
        if !indices.contains(&i) {
            indices.push(i);
        }
    }
    let history: Vec<ObservationRecord> = indices
        .iter()
        .map(|&i| {
            let y = standard_normal(&mut rng);
            let g = 2.0 * standard_normal(&mut rng);
            ObservationRecord::with_full_gradient(grid[i].clone(), y, dvector![g])
        })
        .collect();
    let p = build_posterior(0.0, kernel, domain, history).unwrap();

    let z1 = grid[rng.random_range(0..grid.len())].clone();
    let z2 = grid[rng.random_range(0..grid.len())].clone();
    let with_grad = CandidateBatch::directional(vec![z1.clone(), z2.clone()], dvector![1.0]);
    let value_only = CandidateBatch::new(vec![z1, z2]);
    (p, with_grad, value_only)
}

/// Check 4: derivative fantasies never lose to value-only fantasies at the
/// same locations, and win strictly in at least half of 20 random cases,
/// with paired fantasy draws at 2^15 per estimate.
#[test]
fn acceptance_04_derivative_information_dominates_and_often_strictly() {
    let t0 = Instant::now();
    let nf = 1 << 15;
    let mut strict = 0;
    for case in 0..20u64 {
        let (p, with_grad, value_only) = grid_case(case);
        let d = dkg_value(&p, &with_grad, nf, 9).unwrap();
        let k = kg_value(&p, &value_only, nf, 9).unwrap();
        let se = (d.std_error * d.std_error + k.std_error * k.std_error).sqrt();
        assert!(
            d.value >= k.value - 3.0 * se,
            "case {case}: derivative value {} below value-only {} (3 se = {})",
            d.value,
            k.value,
            3.0 * se
        );
        if d.value - k.value > 3.0 * se {
            strict += 1;
        }
        println!(
            "case {case:>2}: derivative {:.5} value-only {:.5} (3 se = {:.5})",
            d.value,
            k.value,
            3.0 * se
        );
    }
    println!(
        "strictly better in {strict} of 20 cases ({:.1?})",
        t0.elapsed()
    );
    assert!(strict >= 10, "only {strict} strict wins; need at least 10");
}

/// Check 5: every estimate the value-of-information family produced across
/// the instances of checks 3 and 4 is nonnegative up to Monte-Carlo error.
#[test]
fn acceptance_05_value_of_information_is_never_negative() {
    let t0 = Instant::now();
    let nf = 1 << 12;
    let mut lowest = f64::INFINITY;
    for case in 0..20u64 {
        let (p, with_grad, value_only) = grid_case(case);
        for est in [
            dkg_value(&p, &with_grad, nf, 9).unwrap(),
            kg_value(&p, &value_only, nf, 9).unwrap(),
        ] {
            lowest = lowest.min(est.value + 3.0 * est.std_error);
            assert!(
                est.value >= -3.0 * est.std_error,
                "case {case}: estimate {} below -3 se {}",
                est.value,
                -3.0 * est.std_error
            );
        }
    }
    for instance in gradient_instances() {
        let d = instance.theta.len();
        let p = build_posterior(
            instance.prior_mean,
            instance.kernel.clone(),
            Domain::unit_cube(d),
            instance.history.clone(),
        )
        .unwrap();
        let batch = CandidateBatch::directional(instance.points.clone(), instance.theta.clone());
        let est = dkg_value(&p, &batch, nf, 3).unwrap();
        lowest = lowest.min(est.value + 3.0 * est.std_error);
        assert!(
            est.value >= -3.0 * est.std_error,
            "{}: estimate {} below -3 se {}",
            instance.name,
            est.value,
            -3.0 * est.std_error
        );
    }
    println!(
        "lowest (value + 3 se) across the family: {lowest:.5} ({:.1?})",
        t0.elapsed()
    );
}

/// A noise-free tabulated truth on a finite grid, observed exactly.
struct GridTruth {
    xs: Vec<DVector<f64>>,
    values: Vec<f64>,
    slopes: Vec<f64>,
}

impl GridTruth {
    fn index_of(&self, x: &DVector<f64>) -> usize {
        self.xs
            .iter()
            .position(|xi| (xi - x).norm() < 1e-9)
            .expect("queries stay on the grid")
    }

    fn argmin(&self) -> usize {
        let mut best = 0;
        for i in 1..self.values.len() {
            if self.values[i] < self.values[best] {
                best = i;
            }
        }
        best
    }
}

impl Objective for GridTruth {
    fn dim(&self) -> usize {
        1
    }

    fn evaluate(
        &self,
        x: &DVector<f64>,
        request: &ObservationRequest<'_>,
        _rng: &mut ChaCha8Rng,
    ) -> dkg_core::Result<ObservationRecord> {
        let i = self.index_of(x);
        Ok(match request {
            ObservationRequest::Value => ObservationRecord::value_only(x.clone(), self.values[i]),
            ObservationRequest::ValueAndPartials(mask) => ObservationRecord::with_masked_gradient(
                x.clone(),
                self.values[i],
                mask.to_vec(),
                dvector![self.slopes[i]],
            ),
            ObservationRequest::ValueAndDirectional(theta) => ObservationRecord::with_directional(
                x.clone(),
                self.values[i],
                (*theta).clone(),
                theta[0] * self.slopes[i],
            ),
        })
    }

    fn true_value(&self, x: &DVector<f64>) -> Option<f64> {
        Some(self.values[self.index_of(x)])
    }
}

/// Check 6: on a 20-point grid with noise-free observations and the truth
/// drawn from the model's own prior, the recommendation after 20 one-point
/// iterations lands on the sampled truth's minimizer in at least 95 percent
/// of 50 seeded runs.
#[test]
fn acceptance_06_grid_search_recovers_the_sampled_minimum() {
    let t0 = Instant::now();
    let g = 20;
    let kernel = KernelSpec::isotropic(1, 1.0, 0.15, 1e-8, 1e-8).unwrap();
    let domain = Domain::grid_1d(0.0, 1.0, g).unwrap();
    let xs: Vec<DVector<f64>> = domain.grid().unwrap().to_vec();

    // Joint prior over (value, slope) at every grid point, point-major.
    let channels = [Channel::Value, Channel::Partial(0)];
    let mut gram = DMatrix::zeros(2 * g, 2 * g);
    for a in 0..g {
        for b in 0..g {
            let pk = kernel.pair(&xs[a], &xs[b]);
            for (ca, cha) in channels.iter().enumerate() {
                for (cb, chb) in channels.iter().enumerate() {
                    gram[(2 * a + ca, 2 * b + cb)] = pk.cov(cha, chb);
                }
            }
        }
    }
    let l = (gram + DMatrix::identity(2 * g, 2 * g) * 1e-10)
        .cholesky()
        .expect("prior covariance is positive definite")
        .l();

    let mut successes = 0;
    for r in 0..50u64 {
        let seed = 6000 + r;
        let mut rng = substream(seed, STREAM_TRUTH);
        let z = DVector::from_fn(2 * g, |_, _| standard_normal(&mut rng));
        let draw = &l * z;
        let truth = GridTruth {
            xs: xs.clone(),
            values: (0..g).map(|i| draw[2 * i]).collect(),
            slopes: (0..g).map(|i| draw[2 * i + 1]).collect(),
        };

        let mut problem = ProblemSpec::new(
            domain.clone(),
            1,
            20,
            Mode::Directional,
            AcquisitionKind::Dkg,
        );
        problem.hyper = HyperMode::Fixed {
            kernel: kernel.clone(),
            prior_mean: 0.0,
        };
        let trace = run(&problem, &truth, seed).unwrap();
        assert!(trace.complete);
        let rec = &trace.records.last().unwrap().recommendation;
        if truth.index_of(rec) == truth.argmin() {
            successes += 1;
        }
    }
    println!(
        "recovered the sampled minimum in {successes} of 50 runs ({:.1?})",
        t0.elapsed()
    );
    assert!(successes >= 48, "only {successes} of 50 runs found the minimum");
}

/// Check 7: in the one-dimensional illustration, conditioning on gradients
/// never increases the posterior variance anywhere, and the point chosen by
/// the derivative knowledge gradient scores decisively higher than the point
/// chosen by derivative expected improvement under the same criterion.
#[test]
fn acceptance_07_gradients_shrink_variance_and_change_the_chosen_point() {
    let t0 = Instant::now();
    let scenario = figure1_scenario(17).unwrap();
    let data = &scenario.data;

    for i in 0..data.grid.len() {
        let with = data.grad_sd[i] * data.grad_sd[i];
        let without = data.value_sd[i] * data.value_sd[i];
        assert!(
            with <= without + 1e-10,
            "x = {}: variance rose from {without:.3e} to {with:.3e} with gradients",
            data.grid[i]
        );
    }

    let a = data.dkg_pick;
    let b = data.dei_pick;
    assert!(a != b, "both criteria chose the same grid point");

    // Score the two chosen points head to head under the derivative
    // knowledge gradient. The fantasy stream is shared, the domain is a
    // finite grid (so each inner solve is exact), and the baseline is the
    // same posterior both times, so the per-draw difference of fantasized
    // minima estimates the margin directly with its own standard error.
    let p = &scenario.grad_model;
    let direction = dvector![1.0];
    let batch_a = CandidateBatch::directional(vec![dvector![data.grid[a]]], direction.clone());
    let batch_b = CandidateBatch::directional(vec![dvector![data.grid[b]]], direction);
    let factor_a = sigma_factor(p, &batch_a).unwrap();
    let factor_b = sigma_factor(p, &batch_b).unwrap();
    let m = factor_a.fantasy_dim();
    assert_eq!(m, factor_b.fantasy_dim());
    let n = 1 << 15;
    let seed = 7;
    let mut diffs = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = substream(seed, STREAM_FANTASY + i as u64);
        let w = DVector::from_fn(m, |_, _| standard_normal(&mut rng));
        let (_, min_a) =
            inner_minimize(p, &factor_a, &FantasyDraw { w: w.clone() }, 1, seed).unwrap();
        let (_, min_b) = inner_minimize(p, &factor_b, &FantasyDraw { w }, 1, seed).unwrap();
        diffs.push(min_b - min_a);
    }
    let margin = diffs.iter().sum::<f64>() / n as f64;
    let var = diffs.iter().map(|d| (d - margin).powi(2)).sum::<f64>() / (n - 1) as f64;
    let se = (var / n as f64).sqrt();
    println!(
        "picks {:.3} vs {:.3}: margin {margin:.5} against 3 se = {:.5} ({:.1?})",
        data.grid[a],
        data.grid[b],
        3.0 * se,
        t0.elapsed()
    );
    assert!(
        margin > 3.0 * se,
        "margin {margin:.5} does not clear 3 se = {:.5}",
        3.0 * se
    );
}

fn regret_config(
    acquisition: AcquisitionName,
    mode: ModeName,
    dir: &std::path::Path,
) -> ExperimentConfig {
    ExperimentConfig {
        benchmark: "branin2".into(),
        acquisition,
        mode: Some(mode),
        q: Some(4),
        iterations: 10,
        replications: 10,
        noise_sd: 0.5,
        mask: None,
        seed: 2024,
        output_dir: Some(dir.to_string_lossy().into_owned()),
        fantasies: Some(256),
        budget: Some(BudgetOverrides {
            inner_starts: Some(4),
            inner_steps: Some(20),
            outer_restarts: Some(3),
            sga_steps: Some(30),
            rerank_fantasies: Some(24),
        }),
        hyper: Some(HyperOverrides {
            samples: Some(3),
            walkers: Some(14),
            burn_in: Some(80),
        }),
        fig1_grid: None,
        fig1_fantasies: None,
    }
}

fn final_log10_regrets(summary: &dkg_cli::runner::ExperimentSummary) -> Vec<f64> {
    let mut out = Vec::new();
    for o in &summary.outcomes {
        assert!(o.complete, "replication {} did not complete", o.index);
        out.push(o.final_log10_regret.expect("completed runs report regret"));
    }
    out
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Check 8: ten paired desk-scale runs on the two-dimensional well-known
/// test surface with noisy values and gradients. The gradient-using runs
/// must end at least as well as the value-only runs in median log10 regret,
/// and below 1 in absolute regret.
#[test]
fn acceptance_08_gradients_help_on_the_desk_scale_regression() {
    let t0 = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let with = regret_config(
        AcquisitionName::Dkg,
        ModeName::FullGradient,
        &dir.path().join("with-gradients"),
    );
    let without = regret_config(
        AcquisitionName::Kg,
        ModeName::ValueOnly,
        &dir.path().join("value-only"),
    );

    let summary_with = run_experiment(&with, 1).unwrap();
    let mut finals_with = final_log10_regrets(&summary_with);
    println!(
        "with gradients: {:?} ({:.1?})",
        finals_with
            .iter()
            .map(|v| (v * 100.0).round() / 100.0)
            .collect::<Vec<_>>(),
        t0.elapsed()
    );

    let summary_without = run_experiment(&without, 1).unwrap();
    let mut finals_without = final_log10_regrets(&summary_without);
    println!(
        "value only:     {:?} ({:.1?})",
        finals_without
            .iter()
            .map(|v| (v * 100.0).round() / 100.0)
            .collect::<Vec<_>>(),
        t0.elapsed()
    );

    let med_with = median(&mut finals_with);
    let med_without = median(&mut finals_without);
    println!("median log10 regret: {med_with:.3} with gradients, {med_without:.3} without");
    assert!(
        med_with <= med_without,
        "gradients made the median worse: {med_with:.3} vs {med_without:.3}"
    );
    assert!(
        med_with <= 0.0,
        "median log10 regret {med_with:.3} is above 0"
    );
}

/// Check 9: with only one observable partial derivative, every batch point
/// contributes exactly two observation channels, and the emitted trace obeys
/// the schema.
#[test]
fn acceptance_09_masked_runs_carry_two_channels_and_valid_traces() {
    let t0 = Instant::now();
    for (name, partial) in [("rosenbrock3", 2usize), ("levy4", 3usize)] {
        let dir = tempfile::tempdir().unwrap();
        let config = ExperimentConfig {
            benchmark: name.into(),
            acquisition: AcquisitionName::Dkg,
            mode: None,
            q: Some(2),
            iterations: 2,
            replications: 1,
            noise_sd: 0.5,
            mask: None,
            seed: 31,
            output_dir: Some(dir.path().to_string_lossy().into_owned()),
            fantasies: Some(32),
            budget: Some(BudgetOverrides {
                inner_starts: Some(2),
                inner_steps: Some(8),
                outer_restarts: Some(2),
                sga_steps: Some(6),
                rerank_fantasies: Some(8),
            }),
            hyper: Some(HyperOverrides {
                samples: Some(1),
                walkers: Some(16),
                burn_in: Some(15),
            }),
            fig1_grid: None,
            fig1_fantasies: None,
        };
        let resolved = config.resolve().unwrap();
        assert_eq!(resolved.mode, ModeName::FullGradient);

        // Channel accounting, straight from the driver.
        let objective = resolved.objective();
        let trace = run(&resolved.problem, &objective, 31).unwrap();
        assert!(trace.complete);
        for record in &trace.records {
            assert_eq!(record.observations.len(), 2);
            for obs in &record.observations {
                assert_eq!(obs.num_channels(), 2, "{name}: expected value + one partial");
                assert_eq!(
                    obs.channels(),
                    vec![Channel::Value, Channel::Partial(partial)],
                    "{name}: wrong channels"
                );
            }
        }

        // Schema of the emitted trace.
        let summary = run_experiment(&config, 1).unwrap();
        assert!(summary.outcomes[0].complete);
        let def = benchmark(name).unwrap();
        let text =
            std::fs::read_to_string(dir.path().join("trace_r000.csv")).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        let mut want_header = vec!["iteration".to_string(), "eval_count".to_string()];
        for k in 0..def.dim {
            want_header.push(format!("rec_x{k}"));
        }
        want_header.extend(
            ["rec_value", "regret", "log10_regret", "acq_value", "wall_ms"]
                .iter()
                .map(|s| s.to_string()),
        );
        assert_eq!(lines[0], want_header.join(","));
        assert_eq!(lines.len(), 1 + config.iterations);
        let initial = 2 * (def.dim + 1);
        for (t, line) in lines[1..].iter().enumerate() {
            let fields: Vec<f64> = line.split(',').map(|f| f.parse().unwrap()).collect();
            assert_eq!(fields.len(), 2 + def.dim + 5);
            assert_eq!(fields[0] as usize, t);
            assert_eq!(fields[1] as usize, initial + 2 * (t + 1));
            for (k, &(lo, hi)) in def.bounds.iter().enumerate() {
                assert!((lo..=hi).contains(&fields[2 + k]), "{line}");
            }
            let value = fields[2 + def.dim];
            let regret = fields[3 + def.dim];
            let lg = fields[4 + def.dim];
            assert!((regret - (value - def.f_star).max(0.0)).abs() <= 1e-9);
            assert!((lg - regret.max(1e-12).log10()).abs() <= 1e-9);
            assert!(fields.iter().all(|f| f.is_finite()), "{line}");
        }
    }
    println!("masked runs validated ({:.1?})", t0.elapsed());
}

struct GaussianTarget {
    mean: DVector<f64>,
    precision: DMatrix<f64>,
}

impl LogDensity for GaussianTarget {
    fn dim(&self) -> usize {
        2
    }

    fn log_density(&self, x: &DVector<f64>) -> f64 {
        let r = x - &self.mean;
        -0.5 * (&self.precision * &r).dot(&r)
    }
}

/// Check 10: the stretch-move ensemble recovers the moments of a correlated
/// two-dimensional Gaussian from ten thousand retained samples, and the
/// hyperparameter posterior over a real benchmark history yields ten usable
/// samples.
#[test]
fn acceptance_10_ensemble_sampler_moments_and_posterior_samples() {
    let t0 = Instant::now();
    let cov = DMatrix::from_row_slice(2, 2, &[1.2, 0.4, 0.4, 0.8]);
    let target = GaussianTarget {
        mean: dvector![1.0, -2.0],
        precision: cov.clone().try_inverse().unwrap(),
    };
    let mut rng = substream(155, STREAM_HYPER);
    let init: Vec<DVector<f64>> = (0..20)
        .map(|_| DVector::from_fn(2, |_, _| standard_normal(&mut rng)))
        .collect();
    let ensemble = ensemble_sample(&target, 300, 500, &init, &mut rng).unwrap();
    assert_eq!(ensemble.samples.len(), 10_000);

    let n = ensemble.samples.len() as f64;
    let mut mean = DVector::zeros(2);
    for (x, _) in &ensemble.samples {
        mean += x;
    }
    mean /= n;
    let mut c = DMatrix::zeros(2, 2);
    for (x, _) in &ensemble.samples {
        let r = x - &mean;
        c += &r * r.transpose();
    }
    c /= n - 1.0;
    let mut worst: f64 = 0.0;
    for i in 0..2 {
        let want = target.mean[i];
        worst = worst.max((mean[i] - want).abs() / want.abs());
        assert!(
            (mean[i] - want).abs() <= 0.05 * want.abs(),
            "mean[{i}] = {} vs {want}",
            mean[i]
        );
        for j in 0..2 {
            let want = cov[(i, j)];
            worst = worst.max((c[(i, j)] - want).abs() / want.abs().max(0.5));
            assert!(
                (c[(i, j)] - want).abs() <= 0.05 * want.abs().max(0.5),
                "cov[({i},{j})] = {} vs {want}",
                c[(i, j)]
            );
        }
    }
    println!("gaussian moments within {:.2}% of truth", 100.0 * worst);

    let def = benchmark("branin2").unwrap();
    let domain = Domain::from_bounds(def.bounds).unwrap();
    let noise = NoiseSpec::homoscedastic(def.dim, 0.5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let history: Vec<ObservationRecord> = domain
        .latin_hypercube(12, &mut rng)
        .into_iter()
        .enumerate()
        .map(|(i, x)| {
            evaluate_benchmark(def, &x, &noise, &[true, true], 100 + i as u64).unwrap()
        })
        .collect();
    let samples = sample_hyperparameters(&history, &domain, 10, 14, 150, 42).unwrap();
    assert_eq!(samples.len(), 10);
    for (i, s) in samples.iter().enumerate() {
        assert!(
            s.log_posterior.is_finite(),
            "sample {i} has log posterior {}",
            s.log_posterior
        );
    }
    println!(
        "10 posterior samples, log posteriors {:.1} to {:.1} ({:.1?})",
        samples
            .iter()
            .map(|s| s.log_posterior)
            .fold(f64::INFINITY, f64::min),
        samples
            .iter()
            .map(|s| s.log_posterior)
            .fold(f64::NEG_INFINITY, f64::max),
        t0.elapsed()
    );
}
