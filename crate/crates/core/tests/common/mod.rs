#![allow(dead_code)]

use std::sync::Arc;

use caac::aar::AarConfig;
use caac::generation::GenerationConfig;
use caac::metrics::MetricReport;
use caac::suite::{evaluate, run_suite, SuiteRun};
use caac::vtc::{default_vtc_layers, CalibrationSet, LayerRange, Normalization};
use caac::world::{World, WorldConfig};

pub const SEEDS: u64 = 50;
pub const MAX_NEW: usize = 32;

pub fn seeds() -> Vec<u64> {
    (0..SEEDS).collect()
}

pub fn world_with(f: impl FnOnce(&mut WorldConfig)) -> World {
    let mut c = WorldConfig::default();
    f(&mut c);
    World::new(c).unwrap()
}

pub fn frozen_world() -> World {
    World::new(WorldConfig::default()).unwrap()
}

pub fn vtc_layers(world: &World) -> LayerRange {
    default_vtc_layers(world.config.num_layers)
}

pub fn calibration(world: &World, beta: f64, mode: Normalization) -> Arc<CalibrationSet> {
    let (set, _) = CalibrationSet::build(
        &world.decoder,
        &world.vocab.default_reference(),
        &world.vocab.reference_patches(),
        vtc_layers(world),
        beta,
        mode,
    )
    .unwrap();
    Arc::new(set)
}

pub fn baseline_config(world: &World) -> GenerationConfig {
    let mut g = GenerationConfig::new(MAX_NEW, world.vocab.eos());
    g.snapshots = true;
    g
}

/// VTC (PaperLiteral, beta 0.5) and AAR defaults.
pub fn full_config(world: &World) -> GenerationConfig {
    let mut g = baseline_config(world);
    g.vtc = Some(calibration(world, 0.5, Normalization::PaperLiteral));
    g.aar = Some(AarConfig::default());
    g
}

pub fn suite(world: &World, g: &GenerationConfig) -> Vec<SuiteRun> {
    run_suite(world, g, &seeds()).unwrap()
}

pub fn report(world: &World, runs: &[SuiteRun]) -> MetricReport {
    evaluate(world, runs, vtc_layers(world)).unwrap()
}

pub fn run_report(world: &World, g: &GenerationConfig) -> MetricReport {
    report(world, &suite(world, g))
}

pub fn golden_path(name: &str) -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/golden")
        .join(name)
}

/// Compares `actual` with a stored golden file, or rewrites it when `CAAC_BLESS=1`.
pub fn check_golden(name: &str, actual: &serde_json::Value) {
    let path = golden_path(name);
    if std::env::var("CAAC_BLESS").as_deref() == Ok("1") {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        std::fs::write(&path, serde_json::to_string_pretty(actual).unwrap() + "\n").unwrap();
        return;
    }
    let text = std::fs::read_to_string(&path)
        .unwrap_or_else(|e| panic!("{}: {e}; run with CAAC_BLESS=1", path.display()));
    let expected: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_close(&expected, actual, name);
}

pub fn assert_close(expected: &serde_json::Value, actual: &serde_json::Value, at: &str) {
    use serde_json::Value;
    match (expected, actual) {
        (Value::Number(a), Value::Number(b)) => {
            let (a, b) = (a.as_f64().unwrap(), b.as_f64().unwrap());
            assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0), "{at}: {a} vs {b}");
        }
        (Value::Array(a), Value::Array(b)) => {
            assert_eq!(a.len(), b.len(), "{at}: length");
            for (i, (x, y)) in a.iter().zip(b).enumerate() {
                assert_close(x, y, &format!("{at}[{i}]"));
            }
        }
        (Value::Object(a), Value::Object(b)) => {
            let ka: Vec<_> = a.keys().collect();
            let kb: Vec<_> = b.keys().collect();
            assert_eq!(ka, kb, "{at}: keys");
            for (k, x) in a {
                assert_close(x, &b[k], &format!("{at}.{k}"));
            }
        }
        _ => assert_eq!(expected, actual, "{at}"),
    }
}
