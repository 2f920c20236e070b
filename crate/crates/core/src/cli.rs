//! Command-line operator surface.
//!
//! Every subcommand reads a JSON [`RunConfig`], applies flag overrides, echoes
//! the effective config into the output directory and writes its artifacts
//! there. Exit codes: 0 ok, 1 other failure, 2 config, 3 numeric, 4 missing
//! artifact.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::aar::AarConfig;
use crate::error::{Error, Result};
use crate::generation::{Cell, GenerationConfig};
use crate::metrics::MetricReport;
use crate::plot::{bar_chart, histogram, line_chart, Series};
use crate::relevancy::{concentration_profile, decay_trace};
use crate::suite::{evaluate, run_suite, SuiteRun};
use crate::vtc::{
    default_vtc_layers, flattening_spread, CalibrationSet, LayerRange, Normalization, ReferenceSpec,
};
use crate::world::{HeadParams, Label, PlantedBias, World, WorldConfig};

/// Scene and planted-bias parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldSection {
    pub num_objects: usize,
    pub image_slots: usize,
    pub present: usize,
    pub max_object_slots: usize,
    pub prior_top_mass: f64,
    pub bias: PlantedBias,
    pub head: HeadParams,
}

impl Default for WorldSection {
    fn default() -> Self {
        let w = WorldConfig::default();
        Self {
            num_objects: w.num_objects,
            image_slots: w.image_slots,
            present: w.present,
            max_object_slots: w.max_object_slots,
            prior_top_mass: w.prior_top_mass,
            bias: w.bias,
            head: w.head,
        }
    }
}

/// Decoder shape and weight seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub num_layers: usize,
    pub num_heads: usize,
    pub model_dim: usize,
    pub seed: u64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let w = WorldConfig::default();
        Self {
            num_layers: w.num_layers,
            num_heads: w.num_heads,
            model_dim: w.model_dim,
            seed: w.seed,
        }
    }
}

/// Contiguous seed suite `start..start + count`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeedSuite {
    pub start: u64,
    pub count: u64,
}

impl SeedSuite {
    pub fn seeds(&self) -> Vec<u64> {
        (self.start..self.start + self.count).collect()
    }
}

impl FromStr for SeedSuite {
    type Err = String;

    /// `N` for `0..N`, or `A..B`.
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let parse = |x: &str| {
            x.trim()
                .parse::<u64>()
                .map_err(|e| format!("bad seed `{x}`: {e}"))
        };
        match s.split_once("..") {
            Some((a, b)) => {
                let (a, b) = (parse(a)?, parse(b)?);
                if b < a {
                    return Err(format!("empty seed range {s}"));
                }
                Ok(Self {
                    start: a,
                    count: b - a,
                })
            }
            None => Ok(Self {
                start: 0,
                count: parse(s)?,
            }),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub world: WorldSection,
    pub model: ModelSection,
    /// `None` uses a black image with the generic query, last row only.
    pub reference: Option<ReferenceSpec>,
    pub vtc_enabled: bool,
    pub beta: f64,
    /// `None` uses the first `ceil(10 L / 32)` layers.
    pub vtc_layer_range: Option<LayerRange>,
    pub normalization: Normalization,
    /// `None` disables re-scaling.
    pub aar: Option<AarConfig>,
    pub max_new_tokens: usize,
    pub seeds: SeedSuite,
    pub output_dir: PathBuf,
    /// `None` means `<output_dir>/calibration.json`.
    pub calibration_path: Option<PathBuf>,
    pub row_renorm: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            world: WorldSection::default(),
            model: ModelSection::default(),
            reference: None,
            vtc_enabled: true,
            beta: 0.5,
            vtc_layer_range: None,
            normalization: Normalization::PaperLiteral,
            aar: Some(AarConfig::default()),
            max_new_tokens: 32,
            seeds: SeedSuite {
                start: 0,
                count: 50,
            },
            output_dir: PathBuf::from("caac-out"),
            calibration_path: None,
            row_renorm: true,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| {
            Error::config(
                path.display().to_string(),
                format!("cannot read config: {e}"),
            )
        })?;
        let cfg: Self = serde_json::from_str(&text)
            .map_err(|e| Error::config(path.display().to_string(), e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn world_config(&self) -> WorldConfig {
        let w = &self.world;
        WorldConfig {
            num_objects: w.num_objects,
            image_slots: w.image_slots,
            present: w.present,
            max_object_slots: w.max_object_slots,
            prior_top_mass: w.prior_top_mass,
            num_layers: self.model.num_layers,
            num_heads: self.model.num_heads,
            model_dim: self.model.model_dim,
            seed: self.model.seed,
            bias: w.bias.clone(),
            head: w.head.clone(),
        }
    }

    pub fn layer_range(&self) -> LayerRange {
        self.vtc_layer_range
            .unwrap_or_else(|| default_vtc_layers(self.model.num_layers))
    }

    pub fn calibration_file(&self) -> PathBuf {
        self.calibration_path
            .clone()
            .unwrap_or_else(|| self.output_dir.join("calibration.json"))
    }

    pub fn validate(&self) -> Result<()> {
        self.world_config().validate()?;
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::config(
                "beta",
                format!("{} is outside [0, 1]", self.beta),
            ));
        }
        let r = self.layer_range();
        if r.0 > r.1 || r.1 > self.model.num_layers {
            return Err(Error::config(
                "vtc_layer_range",
                format!(
                    "[{}, {}) is not within {} layers",
                    r.0, r.1, self.model.num_layers
                ),
            ));
        }
        if let Some(a) = &self.aar {
            a.validate()?;
            if let Some(r) = a.layer_range {
                if r.0 > r.1 || r.1 > self.model.num_layers {
                    return Err(Error::config(
                        "aar.layer_range",
                        "outside the model's layers",
                    ));
                }
            }
        }
        if self.max_new_tokens == 0 {
            return Err(Error::config("max_new_tokens", "must be at least 1"));
        }
        if self.seeds.count == 0 {
            return Err(Error::config("seeds.count", "must be at least 1"));
        }
        if let Some(rf) = &self.reference {
            if rf.window == 0 || rf.window > rf.query_ids.len() {
                return Err(Error::config(
                    "reference.window",
                    "must be in 1..=number of query tokens",
                ));
            }
        }
        Ok(())
    }

    pub fn apply(&mut self, o: &Overrides) -> Result<()> {
        if let Some(b) = o.beta {
            self.beta = b;
        }
        if let Some(p) = o.p_thr {
            self.aar.get_or_insert_with(AarConfig::default).p_thr = p;
        }
        if let Some(l) = o.lambda_max {
            self.aar.get_or_insert_with(AarConfig::default).lambda_max = l;
        }
        if let Some(n) = o.max_new_tokens {
            self.max_new_tokens = n;
        }
        if let Some(s) = o.seeds {
            self.seeds = s;
        }
        if let Some(d) = &o.out {
            self.output_dir = d.clone();
        }
        if let Some(c) = &o.calibration {
            self.calibration_path = Some(c.clone());
        }
        self.validate()
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "caac",
    version,
    about = "Confidence-aware attention calibration on a planted-bias world"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Capture the reference input and write calibration vectors.
    Calibrate(CommonArgs),
    /// Generate traces for one cell.
    Run(CellArgs),
    /// Generate traces for one cell and write the metric report.
    Eval(CellArgs),
    /// Run the four-cell ablation grid.
    Ablate(CommonArgs),
    /// Relevancy decay, attention concentration and confidence analyses.
    Relevancy(CellArgs),
    /// Print the default config as JSON.
    DefaultConfig,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Overrides {
    /// VTC blend weight in [0, 1].
    #[arg(long)]
    pub beta: Option<f64>,
    /// Confidence threshold below which AAR fires.
    #[arg(long)]
    pub p_thr: Option<f64>,
    /// Largest AAR scale.
    #[arg(long)]
    pub lambda_max: Option<f64>,
    /// Generation horizon.
    #[arg(long)]
    pub max_new_tokens: Option<usize>,
    /// `N` for seeds 0..N, or `A..B`.
    #[arg(long)]
    pub seeds: Option<SeedSuite>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Calibration file.
    #[arg(long)]
    pub calibration: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct CommonArgs {
    /// JSON run config; defaults apply when omitted.
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum CellArg {
    Baseline,
    VtcOnly,
    AarOnly,
    Both,
}

impl From<CellArg> for Cell {
    fn from(c: CellArg) -> Self {
        match c {
            CellArg::Baseline => Cell::Baseline,
            CellArg::VtcOnly => Cell::VtcOnly,
            CellArg::AarOnly => Cell::AarOnly,
            CellArg::Both => Cell::Both,
        }
    }
}

#[derive(Args, Debug)]
pub struct CellArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Which interventions are active; `both` follows the config.
    #[arg(long, value_enum, default_value = "both")]
    pub cell: CellArg,
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config { .. } | Error::Json(_) => 2,
        Error::Numeric(_) => 3,
        Error::MissingArtifact(_) => 4,
        _ => 1,
    }
}

/// Parses `args` and runs the command; returns the process exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Calibrate(a) => cmd_calibrate(&effective(&a)?),
        Command::Run(a) => cmd_run(&effective(&a.common)?, a.cell.into(), false),
        Command::Eval(a) => cmd_run(&effective(&a.common)?, a.cell.into(), true),
        Command::Ablate(a) => cmd_ablate(&effective(&a)?),
        Command::Relevancy(a) => cmd_relevancy(&effective(&a.common)?, a.cell.into()),
        Command::DefaultConfig => {
            println!("{}", serde_json::to_string_pretty(&RunConfig::default())?);
            Ok(())
        }
    }
}

/// Config file (or defaults) with flags applied on top.
pub fn effective(a: &CommonArgs) -> Result<RunConfig> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.apply(&a.overrides)?;
    Ok(cfg)
}

fn prepare_output(cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(&cfg.output_dir)?;
    fs::write(
        cfg.output_dir.join("effective_config.json"),
        serde_json::to_string_pretty(cfg)? + "\n",
    )?;
    Ok(())
}

fn reference(cfg: &RunConfig, world: &World) -> ReferenceSpec {
    cfg.reference
        .clone()
        .unwrap_or_else(|| world.vocab.default_reference())
}

pub fn cmd_calibrate(cfg: &RunConfig) -> Result<()> {
    let world = World::new(cfg.world_config())?;
    let (set, captured) = CalibrationSet::build(
        &world.decoder,
        &reference(cfg, &world),
        &world.vocab.reference_patches(),
        cfg.layer_range(),
        cfg.beta,
        cfg.normalization,
    )?;
    if captured.floored > 0 {
        eprintln!("warning: {} reference entries floored", captured.floored);
    }
    for rec in &set.vectors {
        let v = &captured.rows[rec.layer][rec.head];
        let cal = set.vector(rec.layer, rec.head).expect("vector just built");
        let spread = flattening_spread(v, &cal);
        let top = concentration_profile(v)?.top_decile;
        println!(
            "layer {} head {}: reference top-decile {top:.4}, flattened spread {spread:.3e}",
            rec.layer, rec.head
        );
        if !(spread < 1e-9) {
            return Err(Error::Numeric(crate::error::NumericSite::Input));
        }
    }
    prepare_output(cfg)?;
    let path = cfg.calibration_file();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    set.save(&path)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn load_calibration(cfg: &RunConfig, world: &World) -> Result<Arc<CalibrationSet>> {
    let set = CalibrationSet::load(&cfg.calibration_file(), &world.decoder)?;
    if let Some(rec) = set.vectors.first() {
        if rec.mode != cfg.normalization {
            return Err(Error::config(
                "normalization",
                format!(
                    "calibration file was built with {:?}, config asks for {:?}",
                    rec.mode, cfg.normalization
                ),
            ));
        }
    }
    let set = set
        .with_layer_range(cfg.layer_range())
        .with_beta(cfg.beta)?;
    set.validate_for(&world.decoder)?;
    Ok(Arc::new(set))
}

/// Generation config with every intervention the config enables.
pub fn full_generation(
    cfg: &RunConfig,
    world: &World,
    needs_vtc: bool,
) -> Result<GenerationConfig> {
    let mut g = GenerationConfig::new(cfg.max_new_tokens, world.vocab.eos());
    g.row_renorm = cfg.row_renorm;
    g.snapshots = true;
    g.aar = cfg.aar.clone();
    if needs_vtc && cfg.vtc_enabled && cfg.beta > 0.0 {
        g.vtc = Some(load_calibration(cfg, world)?);
    }
    g.validate()?;
    Ok(g)
}

fn uses_vtc(cell: Cell) -> bool {
    matches!(cell, Cell::VtcOnly | Cell::Both)
}

#[derive(Serialize)]
struct TraceLine<'a> {
    seed: u64,
    step: usize,
    #[serde(flatten)]
    record: &'a crate::generation::StepRecord,
}

fn write_traces(path: &Path, runs: &[SuiteRun]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for r in runs {
        for (step, record) in r.trace.steps.iter().enumerate() {
            serde_json::to_writer(
                &mut w,
                &TraceLine {
                    seed: r.scene.seed,
                    step,
                    record,
                },
            )?;
            w.write_all(b"\n")?;
        }
    }
    w.flush()?;
    Ok(())
}

fn write_report(dir: &Path, stem: &str, report: &MetricReport) -> Result<()> {
    fs::write(
        dir.join(format!("{stem}.json")),
        serde_json::to_string_pretty(report)? + "\n",
    )?;
    fs::write(dir.join(format!("{stem}.csv")), report.to_csv())?;
    Ok(())
}

fn run_cell(cfg: &RunConfig, world: &World, cell: Cell) -> Result<Vec<SuiteRun>> {
    let full = full_generation(cfg, world, uses_vtc(cell))?;
    run_suite(world, &cell.configure(&full), &cfg.seeds.seeds())
}

pub fn cmd_run(cfg: &RunConfig, cell: Cell, with_report: bool) -> Result<()> {
    let world = World::new(cfg.world_config())?;
    let runs = run_cell(cfg, &world, cell)?;
    prepare_output(cfg)?;
    write_traces(&cfg.output_dir.join("traces.jsonl"), &runs)?;
    if with_report {
        let report = evaluate(&world, &runs, cfg.layer_range())?;
        write_report(&cfg.output_dir, "report", &report)?;
        println!(
            "{cell}: CHAIR_i {:.4} CHAIR_s {:.4} HAL {:.4} COVER {:.4} trigger rate {:.4}",
            report.chair_i, report.chair_s, report.hal, report.cover, report.trigger_rate
        );
    } else {
        let steps: usize = runs.iter().map(|r| r.trace.steps.len()).sum();
        println!("{cell}: {} seeds, {steps} generated tokens", runs.len());
    }
    Ok(())
}

pub fn cmd_ablate(cfg: &RunConfig) -> Result<()> {
    let world = World::new(cfg.world_config())?;
    let full = full_generation(cfg, &world, true)?;
    let seeds = cfg.seeds.seeds();
    prepare_output(cfg)?;
    let mut reports = BTreeMap::new();
    let mut csv = String::from("cell,chair_i,chair_s,amber_chair,hal,cover,trigger_rate\n");
    for cell in Cell::ALL {
        let runs = run_suite(&world, &cell.configure(&full), &seeds)?;
        write_traces(
            &cfg.output_dir.join(format!("traces_{}.jsonl", cell.name())),
            &runs,
        )?;
        let r = evaluate(&world, &runs, cfg.layer_range())?;
        csv.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            cell.name(),
            r.chair_i,
            r.chair_s,
            r.amber_chair,
            r.hal,
            r.cover,
            r.trigger_rate
        ));
        println!(
            "{:<9} CHAIR_i {:.4} CHAIR_s {:.4} HAL {:.4} COVER {:.4} trigger rate {:.4}",
            cell.name(),
            r.chair_i,
            r.chair_s,
            r.hal,
            r.cover,
            r.trigger_rate
        );
        reports.insert(cell.name(), r);
    }
    fs::write(
        cfg.output_dir.join("ablation.json"),
        serde_json::to_string_pretty(&reports)? + "\n",
    )?;
    fs::write(cfg.output_dir.join("ablation.csv"), &csv)?;
    let bars: Vec<(&str, f64)> = reports.iter().map(|(k, r)| (*k, r.chair_i)).collect();
    fs::write(
        cfg.output_dir.join("ablation.svg"),
        bar_chart("CHAIR_i by cell", "CHAIR_i", &bars),
    )?;
    Ok(())
}

#[derive(Serialize)]
struct RelevancySummary {
    cell: &'static str,
    decay_series: Vec<(usize, f64)>,
    decay_correlation: f64,
    concentration_cumulative: Vec<f64>,
    concentration_top_decile: f64,
    p_truthful: Option<f64>,
    p_hallucinatory: Option<f64>,
}

pub fn cmd_relevancy(cfg: &RunConfig, cell: Cell) -> Result<()> {
    let world = World::new(cfg.world_config())?;
    let runs = run_cell(cfg, &world, cell)?;
    let traces: Vec<_> = runs.iter().map(|r| r.trace.clone()).collect();
    let decay = decay_trace(&traces)?;

    // Mean sorted cumulative share of first-step image attention.
    let layers = cfg.layer_range();
    let mut cumulative = vec![0.0; cfg.world.image_slots];
    let mut count = 0usize;
    for r in &runs {
        let Some(rows) = r.trace.steps.first().and_then(|s| s.image_rows.as_ref()) else {
            continue;
        };
        for l in layers.range() {
            let p = concentration_profile(&rows[l])?;
            cumulative
                .iter_mut()
                .zip(&p.cumulative)
                .for_each(|(a, b)| *a += b);
            count += 1;
        }
    }
    if count > 0 {
        cumulative.iter_mut().for_each(|x| *x /= count as f64);
    }
    let report = evaluate(&world, &runs, layers)?;

    prepare_output(cfg)?;
    let dir = &cfg.output_dir;
    write_traces(&dir.join("traces.jsonl"), &runs)?;

    let mut csv = String::from("seed,position,r_rel,p_t,label\n");
    let mut truthful = Vec::new();
    let mut halluc = Vec::new();
    for r in &runs {
        for (i, (s, l)) in r.trace.steps.iter().zip(&r.labels).enumerate() {
            let label = match l {
                Label::Truthful => {
                    truthful.push(s.p_t);
                    "truthful"
                }
                Label::Hallucinatory => {
                    halluc.push(s.p_t);
                    "hallucinatory"
                }
                Label::Function => "function",
            };
            csv.push_str(&format!(
                "{},{i},{},{},{label}\n",
                r.scene.seed,
                s.r_rel.unwrap_or(f64::NAN),
                s.p_t
            ));
        }
    }
    fs::write(dir.join("relevancy.csv"), csv)?;

    let mut csv = String::from("position,r_rel\n");
    for (p, v) in &decay.series {
        csv.push_str(&format!("{p},{v}\n"));
    }
    fs::write(dir.join("decay.csv"), csv)?;

    let mut csv = String::from("rank,cumulative_share\n");
    for (i, v) in cumulative.iter().enumerate() {
        csv.push_str(&format!("{},{v}\n", i + 1));
    }
    fs::write(dir.join("concentration.csv"), csv)?;

    fs::write(
        dir.join("decay.svg"),
        line_chart(
            "Relative image relevancy by position",
            "generated position",
            "R_rel",
            &[Series {
                name: cell.name(),
                points: decay.series.iter().map(|(p, v)| (*p as f64, *v)).collect(),
            }],
        ),
    )?;
    fs::write(
        dir.join("concentration.svg"),
        line_chart(
            "Cumulative image attention share",
            "rank",
            "cumulative share",
            &[Series {
                name: cell.name(),
                points: cumulative
                    .iter()
                    .enumerate()
                    .map(|(i, v)| ((i + 1) as f64, *v))
                    .collect(),
            }],
        ),
    )?;
    fs::write(
        dir.join("confidence.svg"),
        histogram(
            "Confidence by token label",
            "p_t",
            &[("truthful", &truthful), ("hallucinatory", &halluc)],
            20,
        ),
    )?;

    let summary = RelevancySummary {
        cell: cell.name(),
        decay_series: decay.series.clone(),
        decay_correlation: decay.correlation,
        concentration_top_decile: report.concentration_top_decile.unwrap_or(f64::NAN),
        concentration_cumulative: cumulative,
        p_truthful: report.confidence.as_ref().map(|c| c.truthful),
        p_hallucinatory: report.confidence.as_ref().map(|c| c.hallucinatory),
    };
    fs::write(
        dir.join("relevancy.json"),
        serde_json::to_string_pretty(&summary)? + "\n",
    )?;
    write_report(dir, "report", &report)?;
    println!(
        "{cell}: decay correlation {:.4}, top-decile share {:.4}",
        summary.decay_correlation, summary.concentration_top_decile
    );
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_suites_parse() {
        assert_eq!(
            "5".parse::<SeedSuite>().unwrap(),
            SeedSuite { start: 0, count: 5 }
        );
        assert_eq!(
            "3..7".parse::<SeedSuite>().unwrap(),
            SeedSuite { start: 3, count: 4 }
        );
        assert!("7..3".parse::<SeedSuite>().is_err());
        assert!("x".parse::<SeedSuite>().is_err());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let e = serde_json::from_str::<RunConfig>(r#"{"betta": 0.5}"#).unwrap_err();
        assert!(e.to_string().contains("betta"));
        let e =
            serde_json::from_str::<RunConfig>(r#"{"world": {"bias": {"sinks": 1}}}"#).unwrap_err();
        assert!(e.to_string().contains("sinks"));
    }

    #[test]
    fn partial_config_keeps_defaults() {
        let c: RunConfig = serde_json::from_str(r#"{"beta": 0.25}"#).unwrap();
        assert_eq!(c.beta, 0.25);
        assert_eq!(c.world, WorldSection::default());
        assert_eq!(c.world_config(), WorldConfig::default());
    }

    #[test]
    fn flags_override_config() {
        let mut c = RunConfig::default();
        c.apply(&Overrides {
            beta: Some(0.0),
            p_thr: Some(0.1),
            lambda_max: Some(2.0),
            max_new_tokens: Some(7),
            seeds: Some(SeedSuite { start: 2, count: 3 }),
            ..Overrides::default()
        })
        .unwrap();
        assert_eq!(c.beta, 0.0);
        let a = c.aar.as_ref().unwrap();
        assert_eq!((a.p_thr, a.lambda_max), (0.1, 2.0));
        assert_eq!(c.max_new_tokens, 7);
        assert_eq!(c.seeds.seeds(), vec![2, 3, 4]);
    }

    #[test]
    fn bad_beta_names_the_field() {
        let mut c = RunConfig::default();
        let e = c
            .apply(&Overrides {
                beta: Some(1.5),
                ..Overrides::default()
            })
            .unwrap_err();
        assert_eq!(exit_code(&e), 2);
        assert!(e.to_string().contains("beta"));
    }

    #[test]
    fn default_layer_range_follows_depth() {
        let mut c = RunConfig::default();
        assert_eq!(c.layer_range(), LayerRange(0, 1));
        c.model.num_layers = 4;
        assert_eq!(c.layer_range(), LayerRange(0, 2));
    }
}
