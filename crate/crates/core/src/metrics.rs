//! Object-hallucination metrics against synthetic ground truth.
//!
//! All object metrics count distinct mentions. Suite-level CHAIR_i is the
//! mean of per-response values, which makes it coincide with the AMBER-style
//! CHAIR on single-response suites.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generation::GenerationTrace;
use crate::model::TokenId;
use crate::relevancy::{concentration_profile, decay_trace};
use crate::vtc::LayerRange;
use crate::world::{Label, Scene, Vocabulary};

fn distinct(mentioned: &[TokenId]) -> BTreeSet<TokenId> {
    mentioned.iter().copied().collect()
}

/// Hallucinated share of distinct mentions; 0 when nothing is mentioned.
pub fn chair_i(mentioned: &[TokenId], present: &[TokenId]) -> f64 {
    let m = distinct(mentioned);
    if m.is_empty() {
        return 0.0;
    }
    let bad = m.iter().filter(|o| !present.contains(o)).count();
    bad as f64 / m.len() as f64
}

/// Share of sentences with at least one absent-object mention.
pub fn chair_s(sentences: &[Vec<TokenId>], present: &[TokenId]) -> f64 {
    if sentences.is_empty() {
        return 0.0;
    }
    let bad = sentences
        .iter()
        .filter(|s| s.iter().any(|o| !present.contains(o)))
        .count();
    bad as f64 / sentences.len() as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AmberTriplet {
    pub chair: f64,
    pub hal: f64,
    pub cover: f64,
}

/// `responses[i]` holds the mentions of response `i`, `present[i]` its scene.
pub fn amber_triplet(responses: &[Vec<TokenId>], present: &[Vec<TokenId>]) -> Result<AmberTriplet> {
    if responses.is_empty() {
        return Err(Error::domain("AMBER metrics over an empty suite"));
    }
    if responses.len() != present.len() {
        return Err(Error::domain("one response per scene is required"));
    }
    let n = responses.len() as f64;
    let mut chair = 0.0;
    let mut hal = 0.0;
    let mut cover = 0.0;
    for (r, p) in responses.iter().zip(present) {
        let c = chair_i(r, p);
        chair += c;
        if c > 0.0 {
            hal += 1.0;
        }
        let m = distinct(r);
        let covered = p.iter().filter(|o| m.contains(o)).count();
        if !p.is_empty() {
            cover += covered as f64 / p.len() as f64;
        }
    }
    Ok(AmberTriplet {
        chair: chair / n,
        hal: hal / n,
        cover: cover / n,
    })
}

/// Object tokens of a response, in order.
pub fn mentions(vocab: &Vocabulary, tokens: &[TokenId]) -> Vec<TokenId> {
    tokens
        .iter()
        .copied()
        .filter(|t| vocab.is_object(*t))
        .collect()
}

/// SEP-delimited spans holding at least one object.
pub fn sentences(vocab: &Vocabulary, tokens: &[TokenId]) -> Vec<Vec<TokenId>> {
    tokens
        .split(|t| *t == vocab.sep() || *t == vocab.eos())
        .map(|s| mentions(vocab, s))
        .filter(|s| !s.is_empty())
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedMetrics {
    pub seed: u64,
    pub chair_i: f64,
    pub chair_s: f64,
    pub hallucinated: bool,
    pub cover: f64,
    pub steps: usize,
    pub triggered: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceSplit {
    pub truthful: f64,
    pub hallucinatory: f64,
    pub difference: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Telemetry {
    pub trigger_rate: f64,
    pub decay_correlation: Option<f64>,
    pub concentration_top_decile: Option<f64>,
    pub confidence: Option<ConfidenceSplit>,
}

/// One scored generation.
pub struct ScoredRun<'a> {
    pub scene: &'a Scene,
    pub trace: &'a GenerationTrace,
    pub labels: &'a [Label],
}

/// Suite telemetry. `concentration_layers` selects which layers' first-step
/// image rows enter the top-decile share.
pub fn telemetry(runs: &[ScoredRun<'_>], concentration_layers: LayerRange) -> Result<Telemetry> {
    if runs.is_empty() {
        return Err(Error::domain("telemetry over an empty suite"));
    }
    let steps: usize = runs.iter().map(|r| r.trace.steps.len()).sum();
    let triggered: usize = runs.iter().map(|r| r.trace.trigger_count()).sum();
    let trigger_rate = if steps == 0 {
        0.0
    } else {
        triggered as f64 / steps as f64
    };

    let has_snapshots = runs
        .iter()
        .all(|r| r.trace.steps.iter().all(|s| s.r_rel.is_some()));
    let decay_correlation = if has_snapshots {
        let traces: Vec<GenerationTrace> = runs.iter().map(|r| r.trace.clone()).collect();
        decay_trace(&traces).ok().map(|d| d.correlation)
    } else {
        None
    };

    let mut conc = Vec::new();
    for r in runs {
        let Some(rows) = r.trace.steps.first().and_then(|s| s.image_rows.as_ref()) else {
            continue;
        };
        for l in concentration_layers.range() {
            if let Some(row) = rows.get(l) {
                conc.push(concentration_profile(row)?.top_decile);
            }
        }
    }
    let concentration_top_decile =
        (!conc.is_empty()).then(|| conc.iter().sum::<f64>() / conc.len() as f64);

    let mut truthful = Vec::new();
    let mut halluc = Vec::new();
    for r in runs {
        for (s, l) in r.trace.steps.iter().zip(r.labels) {
            match l {
                Label::Truthful => truthful.push(s.p_t),
                Label::Hallucinatory => halluc.push(s.p_t),
                Label::Function => {}
            }
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let confidence = (!truthful.is_empty() && !halluc.is_empty()).then(|| {
        let t = mean(&truthful);
        let h = mean(&halluc);
        ConfidenceSplit {
            truthful: t,
            hallucinatory: h,
            difference: t - h,
        }
    });

    Ok(Telemetry {
        trigger_rate,
        decay_correlation,
        concentration_top_decile,
        confidence,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub chair_i: f64,
    pub chair_s: f64,
    pub amber_chair: f64,
    pub hal: f64,
    pub cover: f64,
    pub trigger_rate: f64,
    pub decay_correlation: Option<f64>,
    pub concentration_top_decile: Option<f64>,
    pub confidence: Option<ConfidenceSplit>,
    pub per_seed: Vec<SeedMetrics>,
}

pub fn report(
    vocab: &Vocabulary,
    runs: &[ScoredRun<'_>],
    concentration_layers: LayerRange,
) -> Result<MetricReport> {
    if runs.is_empty() {
        return Err(Error::domain("report over an empty suite"));
    }
    let mut per_seed = Vec::with_capacity(runs.len());
    let mut responses = Vec::with_capacity(runs.len());
    let mut presents = Vec::with_capacity(runs.len());
    for r in runs {
        let tokens = r.trace.tokens();
        let m = mentions(vocab, &tokens);
        let present = &r.scene.present;
        let ci = chair_i(&m, present);
        let triplet = amber_triplet(std::slice::from_ref(&m), std::slice::from_ref(present))?;
        per_seed.push(SeedMetrics {
            seed: r.scene.seed,
            chair_i: ci,
            chair_s: chair_s(&sentences(vocab, &tokens), present),
            hallucinated: ci > 0.0,
            cover: triplet.cover,
            steps: r.trace.steps.len(),
            triggered: r.trace.trigger_count(),
        });
        responses.push(m);
        presents.push(present.clone());
    }
    let amber = amber_triplet(&responses, &presents)?;
    let n = per_seed.len() as f64;
    let t = telemetry(runs, concentration_layers)?;
    Ok(MetricReport {
        chair_i: per_seed.iter().map(|s| s.chair_i).sum::<f64>() / n,
        chair_s: per_seed.iter().map(|s| s.chair_s).sum::<f64>() / n,
        amber_chair: amber.chair,
        hal: amber.hal,
        cover: amber.cover,
        trigger_rate: t.trigger_rate,
        decay_correlation: t.decay_correlation,
        concentration_top_decile: t.concentration_top_decile,
        confidence: t.confidence,
        per_seed,
    })
}

impl MetricReport {
    /// Flat `metric,value` rows for plotting.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,value\n");
        let mut row = |k: &str, v: f64| out.push_str(&format!("{k},{v}\n"));
        row("chair_i", self.chair_i);
        row("chair_s", self.chair_s);
        row("amber_chair", self.amber_chair);
        row("hal", self.hal);
        row("cover", self.cover);
        row("trigger_rate", self.trigger_rate);
        if let Some(d) = self.decay_correlation {
            row("decay_correlation", d);
        }
        if let Some(c) = self.concentration_top_decile {
            row("concentration_top_decile", c);
        }
        if let Some(c) = &self.confidence {
            row("p_truthful", c.truthful);
            row("p_hallucinatory", c.hallucinatory);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chair_i_examples() {
        // cat = 0, dog = 1, car = 2
        assert!((chair_i(&[0, 1, 2], &[0, 1]) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(chair_i(&[0, 1, 1], &[0, 1, 5]), 0.0);
        assert_eq!(chair_i(&[3, 4], &[0, 1]), 1.0);
        assert_eq!(chair_i(&[], &[0]), 0.0);
        assert!((chair_i(&[2, 2, 2, 0], &[0]) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn chair_s_examples() {
        let present = [0, 1];
        assert_eq!(chair_s(&[vec![0], vec![1, 0]], &present), 0.0);
        assert_eq!(chair_s(&[vec![5], vec![1, 6]], &present), 1.0);
        let spans = vec![vec![5], vec![0], vec![1], vec![0, 7], vec![1]];
        assert!((chair_s(&spans, &present) - 0.4).abs() < 1e-15);
        assert_eq!(chair_s(&[], &present), 0.0);
    }

    #[test]
    fn amber_examples() {
        let present = vec![vec![0, 1], vec![2, 3, 4]];
        let exact = amber_triplet(&present, &present).unwrap();
        assert_eq!(
            exact,
            AmberTriplet {
                chair: 0.0,
                hal: 0.0,
                cover: 1.0
            }
        );
        let wrong = amber_triplet(&[vec![7], vec![8, 9]], &present).unwrap();
        assert_eq!(
            wrong,
            AmberTriplet {
                chair: 1.0,
                hal: 1.0,
                cover: 0.0
            }
        );
        assert!(amber_triplet(&[], &[]).is_err());
    }

    #[test]
    fn sentence_segmentation() {
        let v = Vocabulary::new(10);
        let toks = [1, 2, v.sep(), 3, v.sep(), v.eos()];
        assert_eq!(sentences(&v, &toks), vec![vec![1, 2], vec![3]]);
        assert_eq!(mentions(&v, &toks), vec![1, 2, 3]);
    }
}
