use std::path::PathBuf;

use opdlab::config::ExperimentConfig;
use opdlab::trainer::{run_experiment, TELEMETRY_FILE};

fn recipes() -> Vec<PathBuf> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../recipes");
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "toml"))
        .collect();
    out.sort();
    out
}

#[test]
fn every_shipped_recipe_replays_byte_identical() {
    let recipes = recipes();
    assert_eq!(recipes.len(), 7);
    let tmp = tempfile::tempdir().unwrap();
    for path in recipes {
        let cfg = ExperimentConfig::load(&path).unwrap();
        let name = path.file_stem().unwrap().to_string_lossy().into_owned();
        let csv = |tag: &str| {
            let dir = tmp.path().join(format!("{name}-{tag}"));
            run_experiment(&cfg, &dir).unwrap();
            std::fs::read(dir.join(TELEMETRY_FILE)).unwrap()
        };
        let (a, b) = (csv("a"), csv("b"));
        assert!(a.len() > 100, "{name}: telemetry is nearly empty");
        assert!(a == b, "{name}: telemetry differs between runs");
    }
}

#[test]
fn recipes_round_trip_through_toml() {
    for path in recipes() {
        let cfg = ExperimentConfig::load(&path).unwrap();
        assert_eq!(ExperimentConfig::from_toml(&cfg.to_toml()).unwrap(), cfg, "{}", path.display());
    }
}
