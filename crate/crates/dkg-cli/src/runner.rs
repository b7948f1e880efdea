//! Executes configured experiments and writes the result files: one trace
//! CSV per replication, one aggregate CSV across them, and a metadata JSON
//! describing exactly what ran.

use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use dkg_core::driver::{run, RunTrace};
use dkg_core::stream::child_seed;
use dkg_core::{figure1_scenario_sized, immediate_regret, Figure1Data};
use serde_json::json;

use crate::config::{ConfigError, ExperimentConfig, Resolved};

#[derive(Debug)]
pub enum RunnerError {
    /// The config failed validation; callers exit 2.
    Config(ConfigError),
    /// Running or writing results failed; callers exit 3.
    Run(String),
}

impl fmt::Display for RunnerError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RunnerError::Config(e) => write!(f, "{e}"),
            RunnerError::Run(msg) => write!(f, "{msg}"),
        }
    }
}

impl std::error::Error for RunnerError {}

impl From<ConfigError> for RunnerError {
    fn from(e: ConfigError) -> Self {
        RunnerError::Config(e)
    }
}

fn io_err(context: &str, e: impl fmt::Display) -> RunnerError {
    RunnerError::Run(format!("{context}: {e}"))
}

/// What happened to one replication.
pub struct ReplicationOutcome {
    pub index: usize,
    pub seed: u64,
    pub complete: bool,
    pub rows: usize,
    pub final_log10_regret: Option<f64>,
    pub error: Option<String>,
    pub trace_file: Option<String>,
    /// Per-iteration log10 regret, kept for aggregation.
    log10: Vec<f64>,
}

pub struct ExperimentSummary {
    pub output_dir: PathBuf,
    pub outcomes: Vec<ReplicationOutcome>,
    pub aggregate_rows: usize,
}

fn trace_file_name(index: usize) -> String {
    format!("trace_r{index:03}.csv")
}

/// Writes one replication's trace. Recommendations are reported in the
/// benchmark's physical coordinates; `rec_value` is the noise-free objective
/// there, and regret is measured against the stored optimum.
fn write_trace(
    path: &Path,
    resolved: &Resolved,
    trace: &RunTrace,
) -> Result<Vec<f64>, RunnerError> {
    let objective = resolved.objective();
    let mut wtr = csv::Writer::from_path(path).map_err(|e| io_err("trace", e))?;
    let mut header = vec!["iteration".to_string(), "eval_count".to_string()];
    for k in 0..resolved.def.dim {
        header.push(format!("rec_x{k}"));
    }
    header.extend(
        ["rec_value", "regret", "log10_regret", "acq_value", "wall_ms"]
            .iter()
            .map(|s| s.to_string()),
    );
    wtr.write_record(&header).map_err(|e| io_err("trace", e))?;

    let mut log10 = Vec::with_capacity(trace.records.len());
    for rec in &trace.records {
        let physical = objective.to_physical(&rec.recommendation);
        let value = (resolved.def.value)(&physical);
        let (regret, lg) = immediate_regret(resolved.def, &physical);
        log10.push(lg);
        let mut row = vec![rec.iteration.to_string(), rec.eval_count.to_string()];
        for k in 0..resolved.def.dim {
            row.push(format!("{}", physical[k]));
        }
        row.push(format!("{value}"));
        row.push(format!("{regret}"));
        row.push(format!("{lg}"));
        row.push(format!("{}", rec.acq.value));
        row.push(format!("{}", rec.wall_ms));
        wtr.write_record(&row).map_err(|e| io_err("trace", e))?;
    }
    wtr.flush().map_err(|e| io_err("trace", e))?;
    Ok(log10)
}

fn run_one(
    config: &ExperimentConfig,
    resolved: &Resolved,
    index: usize,
) -> ReplicationOutcome {
    let seed = child_seed(config.seed, index as u64);
    let objective = resolved.objective();
    let mut outcome = ReplicationOutcome {
        index,
        seed,
        complete: false,
        rows: 0,
        final_log10_regret: None,
        error: None,
        trace_file: None,
        log10: Vec::new(),
    };
    match run(&resolved.problem, &objective, seed) {
        Ok(trace) => {
            outcome.complete = trace.complete && trace.records.len() == config.iterations;
            outcome.rows = trace.records.len();
            let file = trace_file_name(index);
            let path = resolved.output_dir.join(&file);
            match write_trace(&path, resolved, &trace) {
                Ok(log10) => {
                    outcome.final_log10_regret = log10.last().copied();
                    outcome.log10 = log10;
                    outcome.trace_file = Some(file);
                }
                Err(e) => {
                    outcome.complete = false;
                    outcome.error = Some(e.to_string());
                }
            }
            if !trace.complete {
                outcome.error = Some("run aborted before the configured horizon".into());
            }
        }
        Err(e) => outcome.error = Some(e.to_string()),
    }
    outcome
}

/// Runs every replication (up to `jobs` at a time), writes per-replication
/// traces, aggregates log10 immediate regret across the completed ones, and
/// records everything in `metadata.json`. A failed replication is recorded
/// and skipped by the aggregate rather than failing the experiment, unless
/// nothing completes at all.
pub fn run_experiment(
    config: &ExperimentConfig,
    jobs: usize,
) -> Result<ExperimentSummary, RunnerError> {
    let resolved = config.resolve()?;
    std::fs::create_dir_all(&resolved.output_dir).map_err(|e| io_err("output dir", e))?;

    let replications = config.replications;
    let jobs = jobs.clamp(1, replications);
    let outcomes: Vec<ReplicationOutcome> = if jobs == 1 {
        (0..replications)
            .map(|i| run_one(config, &resolved, i))
            .collect()
    } else {
        let next = AtomicUsize::new(0);
        let slots: Mutex<Vec<Option<ReplicationOutcome>>> =
            Mutex::new((0..replications).map(|_| None).collect());
        std::thread::scope(|scope| {
            for _ in 0..jobs {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    if i >= replications {
                        break;
                    }
                    let outcome = run_one(config, &resolved, i);
                    slots.lock().unwrap()[i] = Some(outcome);
                });
            }
        });
        slots
            .into_inner()
            .unwrap()
            .into_iter()
            .map(|o| o.expect("every replication index was visited"))
            .collect()
    };

    let completed: Vec<&ReplicationOutcome> =
        outcomes.iter().filter(|o| o.complete).collect();
    if completed.is_empty() {
        let first = outcomes
            .iter()
            .find_map(|o| o.error.as_deref())
            .unwrap_or("no replication completed");
        return Err(RunnerError::Run(format!(
            "all {replications} replications failed: {first}"
        )));
    }

    let aggregate_path = resolved.output_dir.join("aggregate.csv");
    let mut wtr = csv::Writer::from_path(&aggregate_path).map_err(|e| io_err("aggregate", e))?;
    wtr.write_record(["iteration", "mean_log10_regret", "sd_log10_regret"])
        .map_err(|e| io_err("aggregate", e))?;
    for t in 0..config.iterations {
        let values: Vec<f64> = completed.iter().map(|o| o.log10[t]).collect();
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let sd = if values.len() > 1 {
            (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        wtr.write_record([t.to_string(), format!("{mean}"), format!("{sd}")])
            .map_err(|e| io_err("aggregate", e))?;
    }
    wtr.flush().map_err(|e| io_err("aggregate", e))?;

    let metadata = json!({
        "config": config,
        "benchmark": {
            "name": resolved.def.name,
            "dim": resolved.def.dim,
            "bounds": resolved.def.bounds,
            "f_star": resolved.def.f_star,
            "default_q": resolved.def.default_q,
        },
        "effective": {
            "q": resolved.problem.q,
            "mode": resolved.mode.as_str(),
            "mask": resolved.problem.mask,
            "fantasies": resolved.problem.fantasies,
        },
        "jobs": jobs,
        "replications": outcomes.iter().map(|o| json!({
            "index": o.index,
            "seed": o.seed,
            "complete": o.complete,
            "rows": o.rows,
            "final_log10_regret": o.final_log10_regret,
            "trace_file": o.trace_file,
            "error": o.error,
        })).collect::<Vec<_>>(),
    });
    std::fs::write(
        resolved.output_dir.join("metadata.json"),
        serde_json::to_string_pretty(&metadata).map_err(|e| io_err("metadata", e))? + "\n",
    )
    .map_err(|e| io_err("metadata", e))?;

    Ok(ExperimentSummary {
        output_dir: resolved.output_dir,
        outcomes,
        aggregate_rows: config.iterations,
    })
}

fn write_fig1_grid(path: &Path, data: &Figure1Data) -> Result<(), RunnerError> {
    let mut wtr = csv::Writer::from_path(path).map_err(|e| io_err("fig1 grid", e))?;
    wtr.write_record([
        "x",
        "truth_value",
        "truth_partial",
        "value_mean",
        "value_sd",
        "grad_mean",
        "grad_sd",
        "kg",
        "kg_se",
        "dkg",
        "dkg_se",
        "ei",
        "dei",
        "post_kg_mean",
        "post_kg_sd",
        "post_dkg_mean",
        "post_dkg_sd",
        "post_ei_mean",
        "post_ei_sd",
        "post_dei_mean",
        "post_dei_sd",
    ])
    .map_err(|e| io_err("fig1 grid", e))?;
    for i in 0..data.grid.len() {
        let cols = [
            data.grid[i],
            data.truth_value[i],
            data.truth_partial[i],
            data.value_mean[i],
            data.value_sd[i],
            data.grad_mean[i],
            data.grad_sd[i],
            data.kg[i],
            data.kg_se[i],
            data.dkg[i],
            data.dkg_se[i],
            data.ei[i],
            data.dei[i],
            data.post_kg_mean[i],
            data.post_kg_sd[i],
            data.post_dkg_mean[i],
            data.post_dkg_sd[i],
            data.post_ei_mean[i],
            data.post_ei_sd[i],
            data.post_dei_mean[i],
            data.post_dei_sd[i],
        ];
        let row: Vec<String> = cols.iter().map(|v| format!("{v}")).collect();
        wtr.write_record(&row).map_err(|e| io_err("fig1 grid", e))?;
    }
    wtr.flush().map_err(|e| io_err("fig1 grid", e))
}

/// Writes the one-dimensional illustration for the config's seed: the grid
/// table with every curve, the per-method picks, and a small metadata file.
/// The expected-improvement scores are closed form, so their pick rows carry
/// a zero standard error.
pub fn emit_figure1(config: &ExperimentConfig) -> Result<PathBuf, RunnerError> {
    let resolved = config.resolve()?;
    std::fs::create_dir_all(&resolved.output_dir).map_err(|e| io_err("output dir", e))?;
    let grid_size = config.fig1_grid.unwrap_or(201);
    let fantasies = config.fig1_fantasies.unwrap_or(2048);
    let scenario = figure1_scenario_sized(config.seed, grid_size, fantasies)
        .map_err(|e| RunnerError::Run(format!("fig1 scenario: {e}")))?;
    let data = &scenario.data;

    write_fig1_grid(&resolved.output_dir.join("fig1_grid.csv"), data)?;

    let picks_path = resolved.output_dir.join("fig1_picks.csv");
    let mut wtr = csv::Writer::from_path(&picks_path).map_err(|e| io_err("fig1 picks", e))?;
    wtr.write_record(["method", "x", "score", "std_error"])
        .map_err(|e| io_err("fig1 picks", e))?;
    let picks = [
        ("kg", data.kg_pick, data.kg[data.kg_pick], data.kg_se[data.kg_pick]),
        ("dkg", data.dkg_pick, data.dkg[data.dkg_pick], data.dkg_se[data.dkg_pick]),
        ("ei", data.ei_pick, data.ei[data.ei_pick], 0.0),
        ("dei", data.dei_pick, data.dei[data.dei_pick], 0.0),
    ];
    for (method, idx, score, se) in picks {
        wtr.write_record([
            method.to_string(),
            format!("{}", data.grid[idx]),
            format!("{score}"),
            format!("{se}"),
        ])
        .map_err(|e| io_err("fig1 picks", e))?;
    }
    wtr.flush().map_err(|e| io_err("fig1 picks", e))?;

    let meta = json!({
        "seed": config.seed,
        "grid_size": grid_size,
        "fantasies": fantasies,
        "history_x": data.history_indices.iter().map(|&i| data.grid[i]).collect::<Vec<_>>(),
    });
    std::fs::write(
        resolved.output_dir.join("fig1_meta.json"),
        serde_json::to_string_pretty(&meta).map_err(|e| io_err("fig1 meta", e))? + "\n",
    )
    .map_err(|e| io_err("fig1 meta", e))?;

    Ok(resolved.output_dir)
}
