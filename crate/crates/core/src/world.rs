//! Synthetic planted-bias world.
//!
//! Scenes place a handful of objects into image slots. The decoder is the
//! generic attention core with two planted pathologies injected at the score
//! stage: content-independent attention sinks on a fixed set of image
//! positions, and a per-step decay of image-column scores. The output head
//! mixes visual evidence (attention-weighted slot identities) with a
//! co-occurrence prior, so hallucination appears when image attention is
//! misallocated or has faded.

use std::collections::BTreeSet;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{Decoder, ModelConfig, OutputHead, Readout, ScoreBias, TokenId, TokenSequence};
use crate::vtc::{ReferenceImage, ReferencePatches, ReferenceSpec};

const QUERY_WORDS: usize = 8;
const NOISE_PATCHES: usize = 16;
const MAX_SEQ_LEN: usize = 256;
const FLOOR_LOGIT: f64 = -30.0;

/// Token-id layout: objects first, then specials, query words and patches.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub num_objects: usize,
}

impl Vocabulary {
    pub fn new(num_objects: usize) -> Self {
        Self { num_objects }
    }

    pub fn bos(&self) -> TokenId {
        self.num_objects as TokenId
    }

    pub fn eos(&self) -> TokenId {
        self.bos() + 1
    }

    pub fn sep(&self) -> TokenId {
        self.bos() + 2
    }

    /// Empty image slot; also the black reference patch.
    pub fn null_patch(&self) -> TokenId {
        self.bos() + 3
    }

    pub fn gray_patch(&self) -> TokenId {
        self.bos() + 4
    }

    pub fn query_word(&self, i: usize) -> TokenId {
        assert!(i < QUERY_WORDS);
        self.bos() + 5 + i as TokenId
    }

    pub fn noise_patch(&self, i: usize) -> TokenId {
        assert!(i < NOISE_PATCHES);
        self.query_word(0) + (QUERY_WORDS + i) as TokenId
    }

    pub fn size(&self) -> usize {
        self.num_objects + 5 + QUERY_WORDS + NOISE_PATCHES
    }

    pub fn is_object(&self, id: TokenId) -> bool {
        (id as usize) < self.num_objects
    }

    /// Tokens the output head may emit.
    pub fn is_emittable(&self, id: TokenId) -> bool {
        self.is_object(id) || id == self.eos() || id == self.sep()
    }

    /// "please describe the image"
    pub fn scene_query(&self) -> Vec<TokenId> {
        (0..4).map(|i| self.query_word(i)).collect()
    }

    /// "what is this ?"
    pub fn generic_query(&self) -> Vec<TokenId> {
        (4..8).map(|i| self.query_word(i)).collect()
    }

    pub fn reference_patches(&self) -> ReferencePatches {
        ReferencePatches {
            black: self.null_patch(),
            uniform: self.gray_patch(),
            noise: (0..NOISE_PATCHES).map(|i| self.noise_patch(i)).collect(),
        }
    }

    pub fn default_reference(&self) -> ReferenceSpec {
        ReferenceSpec {
            image_kind: ReferenceImage::Black,
            query_ids: self.generic_query(),
            window: 1,
        }
    }
}

/// Row-stochastic co-occurrence prior over objects.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorTable {
    pub rows: Vec<Vec<f64>>,
    /// Strongest neighbor of each object.
    pub neighbor: Vec<usize>,
}

impl PriorTable {
    /// Each row puts `top_mass` on one random neighbor and spreads the rest
    /// over the other objects with random weights. The diagonal is zero.
    pub fn generate(num_objects: usize, top_mass: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5052_494f_5254_4142);
        let k = num_objects;
        let mut rows = Vec::with_capacity(k);
        let mut neighbor = Vec::with_capacity(k);
        for i in 0..k {
            if k == 1 {
                rows.push(vec![1.0]);
                neighbor.push(0);
                continue;
            }
            let mut nb = rng.random_range(0..k - 1);
            if nb >= i {
                nb += 1;
            }
            let mut w: Vec<f64> = (0..k)
                .map(|_| -rng.random::<f64>().max(1e-12).ln())
                .collect();
            w[i] = 0.0;
            w[nb] = 0.0;
            let rest: f64 = w.iter().sum();
            let spread = if k > 2 { 1.0 - top_mass } else { 0.0 };
            let mut row: Vec<f64> = w.iter().map(|x| spread * x / rest.max(1e-300)).collect();
            row[nb] = 1.0 - spread;
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|x| *x /= s);
            rows.push(row);
            neighbor.push(nb);
        }
        Self { rows, neighbor }
    }

    pub fn check(&self) -> Result<()> {
        for (i, r) in self.rows.iter().enumerate() {
            let s: f64 = r.iter().sum();
            if (s - 1.0).abs() > 1e-9 || r.iter().any(|x| *x < 0.0) {
                return Err(Error::domain(format!("prior row {i} is not stochastic")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlantedBias {
    pub sink_strength: f64,
    /// `None` means `ceil(0.05 * N_i)` sinks.
    #[serde(default)]
    pub sink_count: Option<usize>,
    pub decay: f64,
    pub prior_weight: f64,
}

impl Default for PlantedBias {
    fn default() -> Self {
        Self {
            sink_strength: 4.0,
            sink_count: None,
            decay: 0.1,
            prior_weight: 1.0,
        }
    }
}

impl PlantedBias {
    pub fn none() -> Self {
        Self {
            sink_strength: 0.0,
            sink_count: None,
            decay: 0.0,
            prior_weight: 0.0,
        }
    }
}

/// Gains of the planted output head and fixed score offsets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadParams {
    pub visual_gain: f64,
    pub prior_gain: f64,
    pub repeat_penalty: f64,
    pub stop_gain: f64,
    pub eos_offset: f64,
    pub eos_slope: f64,
    pub span_len: usize,
    pub sep_gain: f64,
    pub content_gain: f64,
    pub image_affinity: f64,
    pub text_affinity: f64,
}

impl Default for HeadParams {
    fn default() -> Self {
        Self {
            visual_gain: 40.0,
            prior_gain: 12.0,
            repeat_penalty: 12.0,
            stop_gain: 30.0,
            eos_offset: 26.0,
            eos_slope: 0.1,
            span_len: 2,
            sep_gain: 8.0,
            content_gain: 0.3,
            image_affinity: 4.0,
            text_affinity: 5.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    pub num_objects: usize,
    pub image_slots: usize,
    pub present: usize,
    pub max_object_slots: usize,
    pub prior_top_mass: f64,
    pub num_layers: usize,
    pub num_heads: usize,
    pub model_dim: usize,
    pub seed: u64,
    pub bias: PlantedBias,
    pub head: HeadParams,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            num_objects: 64,
            image_slots: 32,
            present: 5,
            max_object_slots: 4,
            prior_top_mass: 0.5,
            num_layers: 2,
            num_heads: 4,
            model_dim: 64,
            seed: 0,
            bias: PlantedBias::default(),
            head: HeadParams::default(),
        }
    }
}

impl WorldConfig {
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            num_layers: self.num_layers,
            num_heads: self.num_heads,
            model_dim: self.model_dim,
            image_slots: self.image_slots,
            vocab_size: Vocabulary::new(self.num_objects).size(),
            max_seq_len: MAX_SEQ_LEN,
            seed: self.seed,
        }
    }

    pub fn sink_count(&self) -> usize {
        self.bias
            .sink_count
            .unwrap_or_else(|| (self.image_slots as f64 * 0.05).ceil() as usize)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_objects == 0 {
            return Err(Error::config("world.num_objects", "must be positive"));
        }
        if self.present == 0 || self.present > self.num_objects.min(self.image_slots) {
            return Err(Error::config(
                "world.present",
                "must be in 1..=min(num_objects, image_slots)",
            ));
        }
        if self.max_object_slots == 0 {
            return Err(Error::config("world.max_object_slots", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.prior_top_mass) {
            return Err(Error::config("world.prior_top_mass", "must be in [0, 1]"));
        }
        let b = &self.bias;
        if !(b.sink_strength >= 0.0) {
            return Err(Error::config("world.bias.sink_strength", "must be >= 0"));
        }
        if !(b.decay >= 0.0) {
            return Err(Error::config("world.bias.decay", "must be >= 0"));
        }
        if !(0.0..=1.0).contains(&b.prior_weight) {
            return Err(Error::config(
                "world.bias.prior_weight",
                "must be in [0, 1]",
            ));
        }
        if self.sink_count() > self.image_slots {
            return Err(Error::config(
                "world.bias.sink_count",
                "exceeds image slots",
            ));
        }
        if self.head.span_len == 0 {
            return Err(Error::config("world.head.span_len", "must be positive"));
        }
        self.model_config().validate()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scene {
    pub seed: u64,
    /// Present objects, ascending.
    pub present: Vec<TokenId>,
    /// Token id per image slot; empty slots hold the null patch.
    pub layout: Vec<TokenId>,
}

impl Scene {
    pub fn contains(&self, id: TokenId) -> bool {
        self.present.binary_search(&id).is_ok()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Label {
    Truthful,
    Hallucinatory,
    Function,
}

/// The planted world: vocabulary, prior, sink positions and decoder.
#[derive(Clone, Debug)]
pub struct World {
    pub config: WorldConfig,
    pub vocab: Vocabulary,
    pub prior: Arc<PriorTable>,
    pub sinks: Vec<usize>,
    pub decoder: Decoder,
}

impl World {
    pub fn new(config: WorldConfig) -> Result<Self> {
        config.validate()?;
        let vocab = Vocabulary::new(config.num_objects);
        let prior = Arc::new(PriorTable::generate(
            config.num_objects,
            config.prior_top_mass,
            config.seed,
        ));
        prior.check()?;
        let sinks = sink_positions(config.image_slots, config.sink_count(), config.seed);
        let decoder = build_planted_decoder(&config, &vocab, &prior, &sinks)?;
        Ok(Self {
            config,
            vocab,
            prior,
            sinks,
            decoder,
        })
    }

    pub fn sample_scene(&self, seed: u64) -> Result<Scene> {
        sample_scene(
            &self.vocab,
            &self.prior,
            self.config.present,
            self.config.image_slots,
            self.config.max_object_slots,
            seed,
        )
    }

    pub fn prompt(&self, scene: &Scene) -> Result<TokenSequence> {
        TokenSequence::new(&scene.layout, &self.vocab.scene_query())
    }

    pub fn label_tokens(&self, tokens: &[TokenId], scene: &Scene) -> Result<Vec<Label>> {
        label_tokens(&self.vocab, tokens, scene)
    }
}

/// Fixed sink positions drawn once from the world seed.
pub fn sink_positions(image_slots: usize, count: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5349_4e4b);
    let mut all: Vec<usize> = (0..image_slots).collect();
    all.shuffle(&mut rng);
    let mut s: Vec<usize> = all.into_iter().take(count).collect();
    s.sort_unstable();
    s
}

pub fn sample_scene(
    vocab: &Vocabulary,
    prior: &PriorTable,
    k: usize,
    image_slots: usize,
    max_object_slots: usize,
    seed: u64,
) -> Result<Scene> {
    let n_obj = vocab.num_objects;
    if k == 0 || k > n_obj.min(image_slots) {
        return Err(Error::domain(format!(
            "k = {k} is outside 1..={}",
            n_obj.min(image_slots)
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut present: Vec<usize> = Vec::with_capacity(k);
    let mut excluded = BTreeSet::new();
    while present.len() < k {
        let mut candidates: Vec<usize> = (0..n_obj)
            .filter(|o| !present.contains(o) && !excluded.contains(o))
            .collect();
        if candidates.is_empty() {
            candidates = (0..n_obj).filter(|o| !present.contains(o)).collect();
        }
        let obj = candidates[rng.random_range(0..candidates.len())];
        present.push(obj);
        let nb = prior.neighbor[obj];
        if present.contains(&nb) || excluded.contains(&nb) {
            continue;
        }
        if rng.random_bool(0.5) {
            if present.len() < k {
                present.push(nb);
            }
        } else {
            excluded.insert(nb);
        }
    }

    // At least one slot per object, the rest drawn up to `max_object_slots`.
    let mut sizes = Vec::with_capacity(k);
    let mut budget = image_slots;
    for i in 0..k {
        let reserve = k - i - 1;
        let cap = max_object_slots.max(1).min(budget - reserve);
        let s = rng.random_range(1..=cap);
        sizes.push(s);
        budget -= s;
    }
    let mut slots: Vec<usize> = (0..image_slots).collect();
    slots.shuffle(&mut rng);
    let mut layout = vec![vocab.null_patch(); image_slots];
    let mut it = slots.into_iter();
    for (obj, size) in present.iter().zip(&sizes) {
        for slot in it.by_ref().take(*size) {
            layout[slot] = *obj as TokenId;
        }
    }
    let mut present: Vec<TokenId> = present.into_iter().map(|o| o as TokenId).collect();
    present.sort_unstable();
    Ok(Scene {
        seed,
        present,
        layout,
    })
}

/// SHA-256 over the layouts of a scene suite, in seed order.
pub fn scene_fingerprint(scenes: &[Scene]) -> String {
    let mut h = Sha256::new();
    for s in scenes {
        h.update(s.seed.to_le_bytes());
        for id in &s.layout {
            h.update(id.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

pub fn label_tokens(vocab: &Vocabulary, tokens: &[TokenId], scene: &Scene) -> Result<Vec<Label>> {
    tokens
        .iter()
        .map(|&t| {
            if vocab.is_object(t) {
                Ok(if scene.contains(t) {
                    Label::Truthful
                } else {
                    Label::Hallucinatory
                })
            } else if t == vocab.bos() || t == vocab.eos() || t == vocab.sep() {
                Ok(Label::Function)
            } else {
                Err(Error::domain(format!("token {t} is not an output token")))
            }
        })
        .collect()
}

pub fn build_planted_decoder(
    config: &WorldConfig,
    vocab: &Vocabulary,
    prior: &Arc<PriorTable>,
    sinks: &[usize],
) -> Result<Decoder> {
    let h = &config.head;
    let bias = ScoreBias {
        content_gain: h.content_gain,
        image_affinity: h.image_affinity,
        text_affinity: h.text_affinity,
        sink_positions: sinks.to_vec(),
        sink_strength: config.bias.sink_strength,
        decay: config.bias.decay,
        text_budget: true,
    };
    let head = PlantedHead {
        vocab: vocab.clone(),
        prior: Arc::clone(prior),
        prior_weight: config.bias.prior_weight,
        params: h.clone(),
    };
    Decoder::new(config.model_config(), bias, Arc::new(head))
}

/// Output head mixing slot evidence and the co-occurrence prior.
///
/// With `m` the final layer's head-mean image mass and `e_k` the share of
/// image attention (averaged over layers) landing on slots of object `k`:
///
/// * unmentioned object: `G_v m e_k + G_p a (1 - m) prior[prev][k]`
/// * mentioned object: the prior term minus `repeat_penalty`
/// * EOS: `G_stop d + slope t - offset`, `d` the fraction of objects shown
///   in the image that have been mentioned
/// * SEP: `+sep_gain` once a span holds `span_len` objects, else `-sep_gain`
#[derive(Debug, Clone)]
pub struct PlantedHead {
    pub vocab: Vocabulary,
    pub prior: Arc<PriorTable>,
    pub prior_weight: f64,
    pub params: HeadParams,
}

impl OutputHead for PlantedHead {
    fn logits(&self, r: &Readout<'_>) -> Vec<f64> {
        let p = &self.params;
        let vocab = &self.vocab;
        let n_img = r.seq.num_image();
        let layers = r.attn.num_layers();
        let last = r.seq.len() - 1;

        let mut share = vec![0.0; n_img];
        let mut m_img = 0.0;
        for l in 0..layers {
            let row = r.attn.mean_row(l, last);
            let img = &row[..n_img];
            let mass: f64 = img.iter().sum();
            if l + 1 == layers {
                m_img = mass;
            }
            if mass > 0.0 {
                for (s, x) in share.iter_mut().zip(img) {
                    *s += x / mass / layers as f64;
                }
            }
        }

        let mut evidence = vec![0.0; vocab.num_objects];
        for (slot, &id) in r.seq.image_ids().iter().enumerate() {
            if vocab.is_object(id) {
                evidence[id as usize] += share[slot];
            }
        }

        let generated = r.seq.generated_ids();
        let mut mentioned = vec![false; vocab.num_objects];
        let mut prev = None;
        let mut span = 0usize;
        for &t in generated {
            if vocab.is_object(t) {
                mentioned[t as usize] = true;
                prev = Some(t as usize);
                span += 1;
            } else if t == vocab.sep() {
                span = 0;
            }
        }
        let mut shown = vec![false; vocab.num_objects];
        for &id in r.seq.image_ids() {
            if vocab.is_object(id) {
                shown[id as usize] = true;
            }
        }
        let n_shown = shown.iter().filter(|x| **x).count();
        let done = if n_shown == 0 {
            1.0
        } else {
            (0..vocab.num_objects)
                .filter(|&o| shown[o] && mentioned[o])
                .count() as f64
                / n_shown as f64
        };

        let prior_scale = p.prior_gain * self.prior_weight * (1.0 - m_img);
        let mut logits = vec![FLOOR_LOGIT; vocab.size()];
        for (o, logit) in logits.iter_mut().enumerate().take(vocab.num_objects) {
            let prior = prev.map_or(0.0, |pv| self.prior.rows[pv][o]);
            let base = prior_scale * prior;
            *logit = if mentioned[o] {
                base - p.repeat_penalty
            } else {
                base + p.visual_gain * m_img * evidence[o]
            };
        }
        let t = generated.len() as f64;
        logits[vocab.eos() as usize] = p.stop_gain * done + p.eos_slope * t - p.eos_offset;
        logits[vocab.sep() as usize] = if span >= p.span_len {
            p.sep_gain
        } else {
            -p.sep_gain
        };
        logits
    }

    fn describe(&self) -> String {
        format!(
            "planted:{}:{}:{}",
            serde_json::to_string(&self.params).unwrap_or_default(),
            self.prior_weight,
            self.vocab.num_objects
        )
    }
}
