//! Seed-suite fan-out shared by the CLI and the test suites.

use rayon::prelude::*;

use crate::error::Result;
use crate::generation::{generate, GenerationConfig, GenerationTrace};
use crate::metrics::{report, MetricReport, ScoredRun};
use crate::vtc::LayerRange;
use crate::world::{Label, Scene, World};

#[derive(Clone, Debug)]
pub struct SuiteRun {
    pub scene: Scene,
    pub trace: GenerationTrace,
    pub labels: Vec<Label>,
}

/// Generates one response per seed. Results come back in seed order.
pub fn run_suite(world: &World, gcfg: &GenerationConfig, seeds: &[u64]) -> Result<Vec<SuiteRun>> {
    seeds
        .par_iter()
        .map(|&seed| {
            let scene = world.sample_scene(seed)?;
            let prompt = world.prompt(&scene)?;
            let trace = generate(&world.decoder, &prompt, gcfg)?;
            let labels = world.label_tokens(&trace.tokens(), &scene)?;
            Ok(SuiteRun {
                scene,
                trace,
                labels,
            })
        })
        .collect()
}

pub fn evaluate(
    world: &World,
    runs: &[SuiteRun],
    concentration_layers: LayerRange,
) -> Result<MetricReport> {
    let scored: Vec<ScoredRun<'_>> = runs
        .iter()
        .map(|r| ScoredRun {
            scene: &r.scene,
            trace: &r.trace,
            labels: &r.labels,
        })
        .collect();
    report(&world.vocab, &scored, concentration_layers)
}
