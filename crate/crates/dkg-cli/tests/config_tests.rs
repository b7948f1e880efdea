//! Config parsing: defaults, strictness, round-trips, and the validation of
//! acquisition/mode combinations.

use std::path::PathBuf;

use dkg_cli::config::{parse_config, AcquisitionName, ExperimentConfig, ModeName};

fn write_json(name: &str, text: &str) -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join(name);
    std::fs::write(&path, text).unwrap();
    (dir, path)
}

#[test]
fn minimal_config_fills_documented_defaults() {
    let (_dir, path) = write_json(
        "minimal.json",
        r#"{"benchmark": "branin2", "acquisition": "dkg"}"#,
    );
    let config = parse_config(&path).unwrap();
    assert_eq!(config.iterations, 10);
    assert_eq!(config.replications, 1);
    assert_eq!(config.noise_sd, 0.5);
    assert_eq!(config.seed, 0);
    assert_eq!(config.q, None);

    let resolved = config.resolve().unwrap();
    assert_eq!(resolved.problem.q, 4, "branin's default batch size");
    assert_eq!(resolved.mode, ModeName::Directional);
    assert_eq!(resolved.problem.mask, vec![true, true]);
}

#[test]
fn masked_benchmarks_default_to_partial_observations() {
    let (_dir, path) = write_json(
        "rosen.json",
        r#"{"benchmark": "rosenbrock3", "acquisition": "dkg"}"#,
    );
    let resolved = parse_config(&path).unwrap().resolve().unwrap();
    assert_eq!(resolved.mode, ModeName::FullGradient);
    assert_eq!(resolved.problem.mask, vec![false, false, true]);
}

#[test]
fn unknown_keys_are_rejected_by_name() {
    let (_dir, path) = write_json(
        "typo.json",
        r#"{"benchmark": "branin2", "acquisition": "dkg", "learning_rate_typo": 3}"#,
    );
    let err = parse_config(&path).unwrap_err().to_string();
    assert!(
        err.contains("learning_rate_typo"),
        "error must name the offending key: {err}"
    );
}

#[test]
fn configs_round_trip_through_serialization() {
    let (_dir, path) = write_json(
        "full.json",
        r#"{
            "benchmark": "hartmann6",
            "acquisition": "kg",
            "mode": "value-only",
            "q": 3,
            "iterations": 7,
            "replications": 20,
            "noise_sd": 0.25,
            "mask": [true, true, true, true, true, true],
            "seed": 99,
            "output_dir": "somewhere",
            "fantasies": 512,
            "budget": {"inner_starts": 5, "sga_steps": 12},
            "hyper": {"samples": 4, "burn_in": 50}
        }"#,
    );
    let config = parse_config(&path).unwrap();
    assert_eq!(config.replications, 20);

    let json = serde_json::to_string(&config).unwrap();
    let reparsed: ExperimentConfig = serde_json::from_str(&json).unwrap();
    assert_eq!(reparsed, config);
}

#[test]
fn invalid_combinations_are_rejected_with_the_reason() {
    let (_dir, path) = write_json(
        "dei.json",
        r#"{"benchmark": "branin2", "acquisition": "dei", "mode": "value-only"}"#,
    );
    let err = parse_config(&path).unwrap_err().to_string();
    assert!(err.contains("dei"), "{err}");

    let (_dir2, path2) = write_json(
        "dir.json",
        r#"{"benchmark": "rosenbrock3", "acquisition": "dkg", "mode": "directional"}"#,
    );
    let err2 = parse_config(&path2).unwrap_err().to_string();
    assert!(err2.contains("mask") || err2.contains("directional"), "{err2}");

    let (_dir3, path3) = write_json(
        "len.json",
        r#"{"benchmark": "branin2", "acquisition": "dkg", "mask": [true]}"#,
    );
    let err3 = parse_config(&path3).unwrap_err().to_string();
    assert!(err3.contains("mask"), "{err3}");
}

#[test]
fn unknown_benchmarks_list_the_registry() {
    let (_dir, path) = write_json(
        "bad.json",
        r#"{"benchmark": "branin99", "acquisition": "dkg"}"#,
    );
    let err = parse_config(&path).unwrap_err().to_string();
    assert!(err.contains("branin99") && err.contains("hartmann6"), "{err}");
}

#[test]
fn acquisition_names_use_lowercase_spellings() {
    for (text, want) in [
        ("\"dkg\"", AcquisitionName::Dkg),
        ("\"kg\"", AcquisitionName::Kg),
        ("\"ei\"", AcquisitionName::Ei),
        ("\"dei\"", AcquisitionName::Dei),
        ("\"ucbpe\"", AcquisitionName::Ucbpe),
    ] {
        let parsed: AcquisitionName = serde_json::from_str(text).unwrap();
        assert_eq!(parsed, want);
    }
}
