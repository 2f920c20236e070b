//! Visual-token calibration.
//!
//! A reference input (meaningless image, generic query) is run once through
//! the decoder. For every (layer, head) the last-row attention over image
//! columns is inverted and rescaled into a calibration vector. At generation
//! time the live image-column row is multiplied by that vector and blended
//! with the original row by `beta`.

use std::ops::Range;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Decoder, Hook, HookSet, RowHook, TokenId, TokenSequence};

/// Floor applied to captured attention before inversion.
pub const CAPTURE_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Normalization {
    /// Scale the inverse by `sum(v) / sum(1/v)`.
    #[default]
    PaperLiteral,
    /// Scale the inverse by `sum(v) / n`, so `sum(v * cal) == sum(v)`.
    SumPreserving,
}

/// Half-open layer interval, serialized as `[start, end]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LayerRange(pub usize, pub usize);

impl LayerRange {
    pub fn range(self) -> Range<usize> {
        self.0..self.1
    }

    pub fn len(self) -> usize {
        self.1.saturating_sub(self.0)
    }

    pub fn is_empty(self) -> bool {
        self.len() == 0
    }

    pub fn contains(self, layer: usize) -> bool {
        self.range().contains(&layer)
    }
}

/// First `ceil(10/32 * L)` layers.
pub fn default_vtc_layers(num_layers: usize) -> LayerRange {
    LayerRange(0, (10 * num_layers).div_ceil(32))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum ReferenceImage {
    Black,
    Noise { seed: u64 },
    Uniform,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceSpec {
    pub image_kind: ReferenceImage,
    pub query_ids: Vec<TokenId>,
    /// Number of trailing rows averaged.
    pub window: usize,
}

/// Input-only patch tokens used to draw reference images.
#[derive(Clone, Debug)]
pub struct ReferencePatches {
    pub black: TokenId,
    pub uniform: TokenId,
    pub noise: Vec<TokenId>,
}

impl ReferencePatches {
    pub fn image(&self, kind: &ReferenceImage, slots: usize) -> Result<Vec<TokenId>> {
        Ok(match kind {
            ReferenceImage::Black => vec![self.black; slots],
            ReferenceImage::Uniform => vec![self.uniform; slots],
            ReferenceImage::Noise { seed } => {
                if self.noise.is_empty() {
                    return Err(Error::domain("no noise patches in vocabulary"));
                }
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                (0..slots)
                    .map(|_| self.noise[rng.random_range(0..self.noise.len())])
                    .collect()
            }
        })
    }
}

/// Captured reference rows `[layer][head] -> image columns`.
#[derive(Clone, Debug, PartialEq)]
pub struct CapturedReference {
    pub rows: Vec<Vec<Vec<f64>>>,
    /// Entries raised to [`CAPTURE_FLOOR`].
    pub floored: usize,
}

pub fn capture_reference(
    decoder: &Decoder,
    reference: &ReferenceSpec,
    patches: &ReferencePatches,
) -> Result<CapturedReference> {
    let cfg = decoder.config();
    let n_img = cfg.image_slots;
    if reference.window == 0 || reference.window > reference.query_ids.len() {
        return Err(Error::config(
            "reference.window",
            format!(
                "window {} must be in 1..={} (query length)",
                reference.window,
                reference.query_ids.len()
            ),
        ));
    }
    let image = patches.image(&reference.image_kind, n_img)?;
    let seq = TokenSequence::new(&image, &reference.query_ids)?;
    let out = decoder.forward(&seq, &HookSet::empty())?;
    let last = seq.len() - 1;
    let w = reference.window;
    let mut floored = 0;
    let mut rows = Vec::with_capacity(cfg.num_layers);
    for l in 0..cfg.num_layers {
        let mut per_head = Vec::with_capacity(cfg.num_heads);
        for h in 0..cfg.num_heads {
            let mut v = vec![0.0; n_img];
            for q in last + 1 - w..=last {
                for (acc, x) in v.iter_mut().zip(&out.attn.row(l, h, q)[..n_img]) {
                    *acc += x;
                }
            }
            for x in v.iter_mut() {
                *x /= w as f64;
                if *x < CAPTURE_FLOOR {
                    *x = CAPTURE_FLOOR;
                    floored += 1;
                }
            }
            per_head.push(v);
        }
        rows.push(per_head);
    }
    Ok(CapturedReference { rows, floored })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationVector {
    pub entries: Vec<f64>,
    pub normalization: Normalization,
}

pub fn build_calibration_vector(v_ref: &[f64], mode: Normalization) -> Result<CalibrationVector> {
    if v_ref.is_empty() {
        return Err(Error::domain("empty reference row"));
    }
    if let Some(bad) = v_ref.iter().find(|v| !(**v > 0.0) || !v.is_finite()) {
        return Err(Error::domain(format!(
            "reference entry {bad} is not strictly positive"
        )));
    }
    let inverse: Vec<f64> = v_ref.iter().map(|v| 1.0 / v).collect();
    let total: f64 = v_ref.iter().sum();
    let scale = match mode {
        Normalization::PaperLiteral => total / inverse.iter().sum::<f64>(),
        Normalization::SumPreserving => total / v_ref.len() as f64,
    };
    Ok(CalibrationVector {
        entries: inverse.iter().map(|x| scale * x).collect(),
        normalization: mode,
    })
}

/// Relative spread `(max - min) / mean` of `v_ref * cal`.
pub fn flattening_spread(v_ref: &[f64], cal: &CalibrationVector) -> f64 {
    let prod: Vec<f64> = v_ref.iter().zip(&cal.entries).map(|(a, b)| a * b).collect();
    let max = prod.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = prod.iter().copied().fold(f64::INFINITY, f64::min);
    let mean = prod.iter().sum::<f64>() / prod.len() as f64;
    (max - min) / mean
}

#[derive(Clone, Debug, PartialEq)]
pub struct SmoothedRow {
    pub original: Vec<f64>,
    pub calibrated: Vec<f64>,
    pub smoothed: Vec<f64>,
}

pub fn apply_vtc(v: &[f64], cal: &CalibrationVector, beta: f64) -> Result<SmoothedRow> {
    if v.len() != cal.entries.len() {
        return Err(Error::domain(format!(
            "row has {} image columns, calibration has {}",
            v.len(),
            cal.entries.len()
        )));
    }
    check_beta(beta)?;
    let calibrated: Vec<f64> = v.iter().zip(&cal.entries).map(|(a, c)| a * c).collect();
    let smoothed = smooth(v, &calibrated, beta);
    Ok(SmoothedRow {
        original: v.to_vec(),
        calibrated,
        smoothed,
    })
}

fn smooth(v: &[f64], u: &[f64], beta: f64) -> Vec<f64> {
    if beta == 0.0 {
        return v.to_vec();
    }
    v.iter()
        .zip(u)
        .map(|(a, b)| (1.0 - beta) * a + beta * b)
        .collect()
}

fn check_beta(beta: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::config("beta", format!("{beta} is outside [0, 1]")));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VectorRecord {
    pub layer: usize,
    pub head: usize,
    pub mode: Normalization,
    pub entries: Vec<f64>,
}

/// Calibration vectors for every (layer, head); `layer_range` selects where
/// they are applied.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationSet {
    pub model_fingerprint: String,
    pub reference: ReferenceSpec,
    pub beta: f64,
    pub layer_range: LayerRange,
    pub vectors: Vec<VectorRecord>,
}

impl CalibrationSet {
    /// Captures the reference and builds one vector per (layer, head).
    pub fn build(
        decoder: &Decoder,
        reference: &ReferenceSpec,
        patches: &ReferencePatches,
        layer_range: LayerRange,
        beta: f64,
        mode: Normalization,
    ) -> Result<(Self, CapturedReference)> {
        check_beta(beta)?;
        let cfg = decoder.config();
        if layer_range.1 > cfg.num_layers || layer_range.0 > layer_range.1 {
            return Err(Error::config(
                "vtc_layer_range",
                format!(
                    "[{}, {}) is not within {} layers",
                    layer_range.0, layer_range.1, cfg.num_layers
                ),
            ));
        }
        let captured = capture_reference(decoder, reference, patches)?;
        let mut vectors = Vec::new();
        for (layer, heads) in captured.rows.iter().enumerate() {
            for (head, v) in heads.iter().enumerate() {
                let cal = build_calibration_vector(v, mode)?;
                vectors.push(VectorRecord {
                    layer,
                    head,
                    mode,
                    entries: cal.entries,
                });
            }
        }
        let set = Self {
            model_fingerprint: decoder.fingerprint(),
            reference: reference.clone(),
            beta,
            layer_range,
            vectors,
        };
        Ok((set, captured))
    }

    pub fn vector(&self, layer: usize, head: usize) -> Option<CalibrationVector> {
        self.vectors
            .iter()
            .find(|r| r.layer == layer && r.head == head)
            .map(|r| CalibrationVector {
                entries: r.entries.clone(),
                normalization: r.mode,
            })
    }

    pub fn with_layer_range(&self, layer_range: LayerRange) -> Self {
        Self {
            layer_range,
            ..self.clone()
        }
    }

    pub fn with_beta(&self, beta: f64) -> Result<Self> {
        check_beta(beta)?;
        Ok(Self {
            beta,
            ..self.clone()
        })
    }

    /// Structural checks plus a fingerprint match against `decoder`.
    pub fn validate_for(&self, decoder: &Decoder) -> Result<()> {
        check_beta(self.beta)?;
        if self.model_fingerprint != decoder.fingerprint() {
            return Err(Error::config(
                "model_fingerprint",
                "calibration was built for a different model",
            ));
        }
        let cfg = decoder.config();
        if self.layer_range.1 > cfg.num_layers || self.layer_range.0 > self.layer_range.1 {
            return Err(Error::config("layer_range", "outside the model's layers"));
        }
        for layer in self.layer_range.range() {
            for head in 0..cfg.num_heads {
                let Some(v) = self
                    .vectors
                    .iter()
                    .find(|r| r.layer == layer && r.head == head)
                else {
                    return Err(Error::config(
                        "vectors",
                        format!("missing vector for layer {layer}, head {head}"),
                    ));
                };
                if v.entries.len() != cfg.image_slots {
                    return Err(Error::config(
                        "vectors.entries",
                        format!("layer {layer} head {head} has wrong length"),
                    ));
                }
                if v.entries.iter().any(|x| !(*x > 0.0) || !x.is_finite()) {
                    return Err(Error::config(
                        "vectors.entries",
                        format!("layer {layer} head {head} has a nonpositive entry"),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()? + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path, decoder: &Decoder) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::MissingArtifact(path.display().to_string())
            } else {
                Error::Io(e)
            }
        })?;
        let set = Self::from_json(&text)?;
        set.validate_for(decoder)?;
        Ok(set)
    }

    /// Post-softmax hook applying this calibration. `None` when `beta == 0`.
    pub fn hook(self: &Arc<Self>) -> Option<Hook> {
        (self.beta != 0.0 && !self.layer_range.is_empty()).then(|| {
            Hook::new(
                self.layer_range.range(),
                Arc::new(VtcHook(Arc::clone(self))),
            )
        })
    }
}

#[derive(Debug)]
pub struct VtcHook(pub Arc<CalibrationSet>);

impl RowHook for VtcHook {
    fn apply(&self, layer: usize, head: usize, image_row: &mut [f64]) -> Result<()> {
        let set = &self.0;
        let rec = set
            .vectors
            .iter()
            .find(|r| r.layer == layer && r.head == head)
            .ok_or_else(|| {
                Error::domain(format!("no calibration for layer {layer}, head {head}"))
            })?;
        if rec.entries.len() != image_row.len() {
            return Err(Error::domain("calibration length mismatch"));
        }
        if set.beta == 0.0 {
            return Ok(());
        }
        for (x, c) in image_row.iter_mut().zip(&rec.entries) {
            *x = (1.0 - set.beta) * *x + set.beta * (*x * c);
        }
        Ok(())
    }
}
