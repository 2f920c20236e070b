//! Dual-pass greedy generation.
//!
//! Every step runs pass 1 with calibration hooks only. If the pass-1
//! confidence is below `p_thr`, pass 2 reruns the forward pass with the
//! image-score scaling added and its argmax is emitted instead.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Write};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::aar::{aar_hook, decide, read_confidence, AarConfig, ScaleDecision};
use crate::error::{Error, Result};
use crate::model::{image_mass, AttentionTensor, Decoder, HookSet, TokenId, TokenSequence};
use crate::relevancy::{compute_relevancy, relative_image_relevancy};
use crate::vtc::CalibrationSet;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Decoding {
    Greedy,
}

#[derive(Clone, Debug)]
pub struct GenerationConfig {
    pub max_new_tokens: usize,
    pub decoding: Decoding,
    pub eos_token: TokenId,
    pub vtc: Option<Arc<CalibrationSet>>,
    pub aar: Option<AarConfig>,
    pub row_renorm: bool,
    /// Record per-step image rows and relative image relevancy.
    pub snapshots: bool,
}

impl GenerationConfig {
    pub fn new(max_new_tokens: usize, eos_token: TokenId) -> Self {
        Self {
            max_new_tokens,
            decoding: Decoding::Greedy,
            eos_token,
            vtc: None,
            aar: None,
            row_renorm: true,
            snapshots: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_new_tokens == 0 {
            return Err(Error::config("max_new_tokens", "must be at least 1"));
        }
        if let Some(a) = &self.aar {
            a.validate()?;
        }
        Ok(())
    }

    fn pass1_hooks(&self) -> HookSet {
        HookSet {
            pre_softmax: Vec::new(),
            post_softmax: self
                .vtc
                .as_ref()
                .and_then(|v| v.hook())
                .into_iter()
                .collect(),
            row_renorm: self.row_renorm,
        }
    }

    fn pass2_hooks(&self, num_layers: usize, lambda_t: f64) -> HookSet {
        let mut hooks = self.pass1_hooks();
        if let Some(a) = &self.aar {
            hooks.pre_softmax.push(aar_hook(a, num_layers, lambda_t));
        }
        hooks
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub token_id: TokenId,
    pub p_t: f64,
    pub triggered: bool,
    pub lambda_t: f64,
    pub image_mass_pass1: f64,
    pub image_mass_final: f64,
    pub pass2_executed: bool,
    /// Head-mean last-row image attention per layer, final pass.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_rows: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r_rel: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationTrace {
    pub prompt: TokenSequence,
    pub steps: Vec<StepRecord>,
}

impl GenerationTrace {
    pub fn tokens(&self) -> Vec<TokenId> {
        self.steps.iter().map(|s| s.token_id).collect()
    }

    pub fn sequence(&self) -> TokenSequence {
        let mut seq = self.prompt.clone();
        for s in &self.steps {
            seq.push_generated(s.token_id);
        }
        seq
    }

    pub fn trigger_count(&self) -> usize {
        self.steps.iter().filter(|s| s.triggered).count()
    }

    /// One JSON object per step.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for s in &self.steps {
            serde_json::to_writer(&mut w, s)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(prompt: TokenSequence, r: R) -> Result<Self> {
        let mut steps = Vec::new();
        for line in r.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            steps.push(serde_json::from_str(&line)?);
        }
        Ok(Self { prompt, steps })
    }
}

/// A forward error together with the steps completed before it.
#[derive(Debug)]
pub struct GenerationFailure {
    pub source: Error,
    pub partial: GenerationTrace,
}

impl fmt::Display for GenerationFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "generation failed after {} steps: {}",
            self.partial.steps.len(),
            self.source
        )
    }
}

impl std::error::Error for GenerationFailure {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.source)
    }
}

impl From<GenerationFailure> for Error {
    fn from(f: GenerationFailure) -> Self {
        f.source
    }
}

/// Lowest index among the maxima.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

fn final_image_mass(attn: &AttentionTensor, n_img: usize) -> Result<f64> {
    let last_layer = attn.num_layers() - 1;
    let row = attn.mean_row(last_layer, attn.seq_len() - 1);
    image_mass(&row, n_img)
}

fn image_rows(attn: &AttentionTensor, n_img: usize) -> Vec<Vec<f64>> {
    let last = attn.seq_len() - 1;
    (0..attn.num_layers())
        .map(|l| attn.mean_row(l, last)[..n_img].to_vec())
        .collect()
}

pub fn generate(
    decoder: &Decoder,
    prompt: &TokenSequence,
    gcfg: &GenerationConfig,
) -> std::result::Result<GenerationTrace, GenerationFailure> {
    let mut trace = GenerationTrace {
        prompt: prompt.clone(),
        steps: Vec::new(),
    };
    let fail = |source: Error, trace: GenerationTrace| GenerationFailure {
        source,
        partial: trace,
    };
    if let Err(e) = check_inputs(decoder, prompt, gcfg) {
        return Err(fail(e, trace));
    }
    let n_img = decoder.config().image_slots;
    let num_layers = decoder.config().num_layers;
    let pass1 = gcfg.pass1_hooks();
    let mut seq = prompt.clone();

    for _ in 0..gcfg.max_new_tokens {
        let step = (|| -> Result<StepRecord> {
            let first = decoder.forward(&seq, &pass1)?;
            let p_t = read_confidence(&first.logits)?;
            let decision = match &gcfg.aar {
                Some(a) => decide(p_t, a)?,
                None => ScaleDecision {
                    p_t,
                    triggered: false,
                    lambda_t: 1.0,
                },
            };
            let mass1 = final_image_mass(&first.attn, n_img)?;
            let chosen = if decision.triggered {
                decoder.forward(&seq, &gcfg.pass2_hooks(num_layers, decision.lambda_t))?
            } else {
                first
            };
            let token_id = argmax(&chosen.logits) as TokenId;
            let mass_final = if decision.triggered {
                final_image_mass(&chosen.attn, n_img)?
            } else {
                mass1
            };
            let (image_rows, r_rel) = if gcfg.snapshots {
                let r = compute_relevancy(&chosen.attn, None)?;
                let rel = relative_image_relevancy(&r, n_img, seq.len() - 1)?;
                (Some(image_rows(&chosen.attn, n_img)), Some(rel))
            } else {
                (None, None)
            };
            Ok(StepRecord {
                token_id,
                p_t,
                triggered: decision.triggered,
                lambda_t: decision.lambda_t,
                image_mass_pass1: mass1,
                image_mass_final: mass_final,
                pass2_executed: decision.triggered,
                image_rows,
                r_rel,
            })
        })();
        let record = match step {
            Ok(r) => r,
            Err(e) => return Err(fail(e, trace)),
        };
        let token = record.token_id;
        trace.steps.push(record);
        seq.push_generated(token);
        if token == gcfg.eos_token {
            break;
        }
    }
    Ok(trace)
}

fn check_inputs(decoder: &Decoder, prompt: &TokenSequence, gcfg: &GenerationConfig) -> Result<()> {
    gcfg.validate()?;
    if prompt.num_generated() != 0 {
        return Err(Error::domain("prompt already contains generated tokens"));
    }
    if let Some(v) = &gcfg.vtc {
        v.validate_for(decoder)?;
    }
    Ok(())
}

/// Recomputes the emitted token of a step from its prefix and logged lambda.
pub fn replay_step(
    decoder: &Decoder,
    prefix: &TokenSequence,
    gcfg: &GenerationConfig,
    record: &StepRecord,
) -> Result<TokenId> {
    let hooks = if record.pass2_executed {
        gcfg.pass2_hooks(decoder.config().num_layers, record.lambda_t)
    } else {
        gcfg.pass1_hooks()
    };
    let out = decoder.forward(prefix, &hooks)?;
    Ok(argmax(&out.logits) as TokenId)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Cell {
    Baseline,
    VtcOnly,
    AarOnly,
    Both,
}

impl Cell {
    pub const ALL: [Cell; 4] = [Cell::Baseline, Cell::VtcOnly, Cell::AarOnly, Cell::Both];

    pub fn name(self) -> &'static str {
        match self {
            Cell::Baseline => "baseline",
            Cell::VtcOnly => "vtc_only",
            Cell::AarOnly => "aar_only",
            Cell::Both => "both",
        }
    }

    /// Derives this cell's config from a full (VTC + AAR) config.
    pub fn configure(self, full: &GenerationConfig) -> GenerationConfig {
        let mut g = full.clone();
        match self {
            Cell::Baseline => {
                g.vtc = None;
                g.aar = None;
            }
            Cell::VtcOnly => g.aar = None,
            Cell::AarOnly => g.vtc = None,
            Cell::Both => {}
        }
        g
    }
}

impl fmt::Display for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

pub fn ablate(
    decoder: &Decoder,
    prompt: &TokenSequence,
    full: &GenerationConfig,
) -> Result<BTreeMap<Cell, GenerationTrace>> {
    Cell::ALL
        .iter()
        .map(|&c| Ok((c, generate(decoder, prompt, &c.configure(full))?)))
        .collect()
}
