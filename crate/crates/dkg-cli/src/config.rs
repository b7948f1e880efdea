//! Experiment configuration: a strict JSON schema with defaults, plus the
//! translation into a driver problem and a noisy benchmark objective.

use std::fmt;
use std::path::{Path, PathBuf};

use dkg_core::driver::{AcquisitionKind, HyperMode, Mode, ProblemSpec};
use dkg_core::{benchmark, BenchObjective, BenchmarkDef, Domain, NoiseSpec};
use serde::{Deserialize, Serialize};

#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl std::error::Error for ConfigError {}

fn bad(msg: impl Into<String>) -> ConfigError {
    ConfigError(msg.into())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AcquisitionName {
    Dkg,
    Kg,
    Ei,
    Dei,
    Ucbpe,
}

impl AcquisitionName {
    pub fn as_str(self) -> &'static str {
        match self {
            AcquisitionName::Dkg => "dkg",
            AcquisitionName::Kg => "kg",
            AcquisitionName::Ei => "ei",
            AcquisitionName::Dei => "dei",
            AcquisitionName::Ucbpe => "ucbpe",
        }
    }

    fn kind(self) -> AcquisitionKind {
        match self {
            AcquisitionName::Dkg => AcquisitionKind::Dkg,
            AcquisitionName::Kg => AcquisitionKind::Kg,
            AcquisitionName::Ei => AcquisitionKind::Ei,
            AcquisitionName::Dei => AcquisitionKind::Dei,
            AcquisitionName::Ucbpe => AcquisitionKind::UcbPe,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModeName {
    Directional,
    FullGradient,
    ValueOnly,
}

impl ModeName {
    pub fn as_str(self) -> &'static str {
        match self {
            ModeName::Directional => "directional",
            ModeName::FullGradient => "full-gradient",
            ModeName::ValueOnly => "value-only",
        }
    }
}

/// Optional overrides for the acquisition search budget. Absent fields keep
/// the library defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BudgetOverrides {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inner_starts: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inner_steps: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub outer_restarts: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sga_steps: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rerank_fantasies: Option<usize>,
}

/// Optional overrides for the hyperparameter sampler.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HyperOverrides {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub samples: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub walkers: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub burn_in: Option<usize>,
}

fn default_iterations() -> usize {
    10
}

fn default_replications() -> usize {
    1
}

fn default_noise_sd() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Registry name, e.g. "branin2" or "hartmann6".
    pub benchmark: String,
    pub acquisition: AcquisitionName,
    /// Observation mode; derived from the acquisition when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<ModeName>,
    /// Batch size; the benchmark's default when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q: Option<usize>,
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    #[serde(default = "default_replications")]
    pub replications: usize,
    /// Homoscedastic noise standard deviation applied to every channel.
    #[serde(default = "default_noise_sd")]
    pub noise_sd: f64,
    /// Observable-partial override; the benchmark's default when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<Vec<bool>>,
    #[serde(default)]
    pub seed: u64,
    /// Where result files go; `DKG_OUTPUT_DIR` beats this, and both beat
    /// `results/<benchmark>-<acquisition>`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<String>,
    /// Fantasy draws behind reported acquisition values.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fantasies: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub budget: Option<BudgetOverrides>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hyper: Option<HyperOverrides>,
    /// Grid size for the `fig1` verb (default 201).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fig1_grid: Option<usize>,
    /// Fantasy draws per grid point for the `fig1` verb (default 2048).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fig1_fantasies: Option<usize>,
}

/// A validated config with every default filled in, ready to run.
pub struct Resolved {
    pub def: &'static BenchmarkDef,
    pub mode: ModeName,
    pub problem: ProblemSpec,
    pub noise: NoiseSpec,
    pub output_dir: PathBuf,
}

pub fn parse_config(path: &Path) -> Result<ExperimentConfig, ConfigError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| bad(format!("cannot read {}: {e}", path.display())))?;
    let config: ExperimentConfig = serde_json::from_str(&text)
        .map_err(|e| bad(format!("{}: {e}", path.display())))?;
    config.resolve()?;
    Ok(config)
}

impl ExperimentConfig {
    /// The observation mode implied by the acquisition when none is given:
    /// the KG family observes derivatives (one retained directional
    /// derivative when every partial is available, the masked partials
    /// otherwise), derivative-aware EI observes the masked partials, and the
    /// derivative-free baselines observe values only.
    fn derived_mode(&self, mask: &[bool]) -> ModeName {
        match self.acquisition {
            AcquisitionName::Dkg => {
                if mask.iter().all(|&b| b) {
                    ModeName::Directional
                } else {
                    ModeName::FullGradient
                }
            }
            AcquisitionName::Dei => ModeName::FullGradient,
            AcquisitionName::Kg | AcquisitionName::Ei | AcquisitionName::Ucbpe => {
                ModeName::ValueOnly
            }
        }
    }

    pub fn resolve(&self) -> Result<Resolved, ConfigError> {
        let def = benchmark(&self.benchmark).ok_or_else(|| {
            let known: Vec<&str> = dkg_core::benchmark_registry()
                .iter()
                .map(|d| d.name)
                .collect();
            bad(format!(
                "benchmark: unknown name {:?}; known: {}",
                self.benchmark,
                known.join(", ")
            ))
        })?;

        let mask = match &self.mask {
            Some(m) => {
                if m.len() != def.dim {
                    return Err(bad(format!(
                        "mask: length {} does not match {} which has {} inputs",
                        m.len(),
                        def.name,
                        def.dim
                    )));
                }
                m.clone()
            }
            None => def.default_mask.to_vec(),
        };

        let mode = self.mode.unwrap_or_else(|| self.derived_mode(&mask));
        if mode == ModeName::Directional && !mask.iter().all(|&b| b) {
            return Err(bad(
                "mode: directional retention needs every partial observable; \
                 widen the mask or use full-gradient",
            ));
        }
        if self.acquisition == AcquisitionName::Dei && mode == ModeName::ValueOnly {
            return Err(bad(
                "acquisition: dei needs derivative observations; \
                 use mode full-gradient or directional, or switch to ei",
            ));
        }

        let q = self.q.unwrap_or(def.default_q);
        if q == 0 {
            return Err(bad("q: batch size must be at least 1"));
        }
        if self.iterations == 0 {
            return Err(bad("iterations: must be at least 1"));
        }
        if self.replications == 0 {
            return Err(bad("replications: must be at least 1"));
        }
        if !self.noise_sd.is_finite() || self.noise_sd < 0.0 {
            return Err(bad(format!(
                "noise_sd: must be a finite non-negative number, got {}",
                self.noise_sd
            )));
        }
        if self.fantasies == Some(0) {
            return Err(bad("fantasies: must be at least 1"));
        }
        if let Some(g) = self.fig1_grid {
            if g < 8 {
                return Err(bad("fig1_grid: need at least 8 points"));
            }
        }
        if self.fig1_fantasies == Some(0) {
            return Err(bad("fig1_fantasies: must be at least 1"));
        }

        let driver_mode = match mode {
            ModeName::Directional => Mode::Directional,
            ModeName::FullGradient => Mode::FullGradient,
            ModeName::ValueOnly => Mode::ValueOnly,
        };
        let mut problem = ProblemSpec::new(
            Domain::unit_cube(def.dim),
            q,
            self.iterations,
            driver_mode,
            self.acquisition.kind(),
        );
        problem.mask = mask;
        if let Some(f) = self.fantasies {
            problem.fantasies = f;
        }
        if let Some(b) = &self.budget {
            let check = |name: &str, v: Option<usize>| -> Result<(), ConfigError> {
                if v == Some(0) {
                    Err(bad(format!("budget.{name}: must be at least 1")))
                } else {
                    Ok(())
                }
            };
            check("inner_starts", b.inner_starts)?;
            check("inner_steps", b.inner_steps)?;
            check("outer_restarts", b.outer_restarts)?;
            check("sga_steps", b.sga_steps)?;
            check("rerank_fantasies", b.rerank_fantasies)?;
            if let Some(v) = b.inner_starts {
                problem.budget.inner_starts = v;
            }
            if let Some(v) = b.inner_steps {
                problem.budget.inner_steps = v;
            }
            if let Some(v) = b.outer_restarts {
                problem.budget.outer_restarts = v;
            }
            if let Some(v) = b.sga_steps {
                problem.budget.sga_steps = v;
            }
            if let Some(v) = b.rerank_fantasies {
                problem.budget.rerank_fantasies = v;
            }
        }
        if let Some(h) = &self.hyper {
            if h.samples == Some(0) {
                return Err(bad("hyper.samples: must be at least 1"));
            }
            let (mut m, mut walkers, mut burn_in) = match problem.hyper {
                HyperMode::Sampled { m, walkers, burn_in } => (m, walkers, burn_in),
                HyperMode::Fixed { .. } => unreachable!("new problems sample hypers"),
            };
            if let Some(v) = h.samples {
                m = v;
            }
            if let Some(v) = h.walkers {
                walkers = v;
            }
            if let Some(v) = h.burn_in {
                burn_in = v;
            }
            problem.hyper = HyperMode::Sampled { m, walkers, burn_in };
        }
        problem
            .validate()
            .map_err(|e| bad(format!("invalid problem: {e}")))?;

        let noise = NoiseSpec::homoscedastic(def.dim, self.noise_sd)
            .map_err(|e| bad(format!("noise_sd: {e}")))?;
        let output_dir = std::env::var_os("DKG_OUTPUT_DIR")
            .map(PathBuf::from)
            .or_else(|| self.output_dir.as_ref().map(PathBuf::from))
            .unwrap_or_else(|| {
                PathBuf::from(format!(
                    "results/{}-{}",
                    self.benchmark,
                    self.acquisition.as_str()
                ))
            });

        Ok(Resolved {
            def,
            mode,
            problem,
            noise,
            output_dir,
        })
    }
}

impl Resolved {
    pub fn objective(&self) -> BenchObjective {
        BenchObjective::new(self.def, self.noise.clone())
    }
}
