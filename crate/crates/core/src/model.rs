//! Minimal causal multi-head attention decoder.
//!
//! The decoder has no learned parameters: embeddings and projections are drawn
//! from `ModelConfig::seed`. Additive score terms ([`ScoreBias`]) are injected
//! before any hook runs, and the logits come from a pluggable [`OutputHead`].
//!
//! Interventions are expressed as [`Hook`]s that touch only the image columns
//! of the last query row, the row that produces the next token. Pre-softmax
//! hooks see raw scores, post-softmax hooks see attention weights.

use std::fmt;
use std::ops::Range;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, NumericSite, Result};

pub type TokenId = u32;

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub model_dim: usize,
    pub image_slots: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_layers", self.num_layers),
            ("num_heads", self.num_heads),
            ("model_dim", self.model_dim),
            ("image_slots", self.image_slots),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("model.{name}"), "must be positive"));
            }
        }
        if !self.model_dim.is_multiple_of(self.num_heads) {
            return Err(Error::config(
                "model.model_dim",
                format!(
                    "{} is not divisible by num_heads {}",
                    self.model_dim, self.num_heads
                ),
            ));
        }
        if self.image_slots >= self.max_seq_len {
            return Err(Error::config(
                "model.image_slots",
                format!(
                    "{} must be below max_seq_len {}",
                    self.image_slots, self.max_seq_len
                ),
            ));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Modality {
    Image,
    Query,
    Generated,
}

/// Image prefix, then query tokens, then generated tokens.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    ids: Vec<TokenId>,
    modality: Vec<Modality>,
}

impl TokenSequence {
    pub fn new(image: &[TokenId], query: &[TokenId]) -> Result<Self> {
        if image.is_empty() {
            return Err(Error::domain("a sequence needs at least one image token"));
        }
        if query.is_empty() {
            return Err(Error::domain("a sequence needs at least one query token"));
        }
        let mut ids = Vec::with_capacity(image.len() + query.len());
        ids.extend_from_slice(image);
        ids.extend_from_slice(query);
        let mut modality = vec![Modality::Image; image.len()];
        modality.resize(ids.len(), Modality::Query);
        Ok(Self { ids, modality })
    }

    /// Builds a sequence from raw parts, checking the modality ordering.
    pub fn from_parts(ids: Vec<TokenId>, modality: Vec<Modality>) -> Result<Self> {
        if ids.len() != modality.len() {
            return Err(Error::domain(format!(
                "{} ids but {} modality tags",
                ids.len(),
                modality.len()
            )));
        }
        if modality.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::domain(
                "modality tags must run Image, then Query, then Generated",
            ));
        }
        let seq = Self { ids, modality };
        if seq.num_image() == 0 || seq.num_query() == 0 {
            return Err(Error::domain(
                "a sequence needs at least one image and one query token",
            ));
        }
        Ok(seq)
    }

    pub fn push_generated(&mut self, id: TokenId) {
        self.ids.push(id);
        self.modality.push(Modality::Generated);
    }

    pub fn ids(&self) -> &[TokenId] {
        &self.ids
    }

    pub fn modality(&self) -> &[Modality] {
        &self.modality
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    fn count(&self, m: Modality) -> usize {
        self.modality.iter().filter(|&&x| x == m).count()
    }

    pub fn num_image(&self) -> usize {
        self.count(Modality::Image)
    }

    pub fn num_query(&self) -> usize {
        self.count(Modality::Query)
    }

    pub fn num_generated(&self) -> usize {
        self.count(Modality::Generated)
    }

    pub fn image_ids(&self) -> &[TokenId] {
        &self.ids[..self.num_image()]
    }

    pub fn generated_ids(&self) -> &[TokenId] {
        &self.ids[self.len() - self.num_generated()..]
    }

    /// Prefix without generated tokens.
    pub fn prompt(&self) -> TokenSequence {
        let n = self.len() - self.num_generated();
        Self {
            ids: self.ids[..n].to_vec(),
            modality: self.modality[..n].to_vec(),
        }
    }
}

/// Post-softmax attention, `[layer][head][query][key]`, stored flat.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionTensor {
    layers: usize,
    heads: usize,
    len: usize,
    data: Vec<f64>,
}

impl AttentionTensor {
    pub fn zeros(layers: usize, heads: usize, len: usize) -> Self {
        Self {
            layers,
            heads,
            len,
            data: vec![0.0; layers * heads * len * len],
        }
    }

    pub fn num_layers(&self) -> usize {
        self.layers
    }

    pub fn num_heads(&self) -> usize {
        self.heads
    }

    pub fn seq_len(&self) -> usize {
        self.len
    }

    fn offset(&self, layer: usize, head: usize, query: usize) -> usize {
        ((layer * self.heads + head) * self.len + query) * self.len
    }

    pub fn get(&self, layer: usize, head: usize, query: usize, key: usize) -> f64 {
        self.data[self.offset(layer, head, query) + key]
    }

    pub fn set(&mut self, layer: usize, head: usize, query: usize, key: usize, v: f64) {
        let o = self.offset(layer, head, query);
        self.data[o + key] = v;
    }

    /// Full row over all key positions (zeros past the query position).
    pub fn row(&self, layer: usize, head: usize, query: usize) -> &[f64] {
        let o = self.offset(layer, head, query);
        &self.data[o..o + self.len]
    }

    pub fn row_mut(&mut self, layer: usize, head: usize, query: usize) -> &mut [f64] {
        let o = self.offset(layer, head, query);
        &mut self.data[o..o + self.len]
    }

    /// Head-averaged row of one layer.
    pub fn mean_row(&self, layer: usize, query: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.len];
        for h in 0..self.heads {
            for (o, v) in out.iter_mut().zip(self.row(layer, h, query)) {
                *o += v;
            }
        }
        let inv = 1.0 / self.heads as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        out
    }

    /// Checks row-stochasticity within `tol` and exact causal support.
    pub fn check_invariants(&self, tol: f64) -> Result<()> {
        for l in 0..self.layers {
            for h in 0..self.heads {
                for q in 0..self.len {
                    let row = self.row(l, h, q);
                    if row[q + 1..].iter().any(|&v| v != 0.0) {
                        return Err(Error::domain(format!(
                            "layer {l} head {h} row {q} attends to a future position"
                        )));
                    }
                    if row.iter().any(|&v| v < 0.0 || !v.is_finite()) {
                        return Err(Error::domain(format!(
                            "layer {l} head {h} row {q} has a negative or non-finite entry"
                        )));
                    }
                    let s: f64 = row.iter().sum();
                    if (s - 1.0).abs() > tol {
                        return Err(Error::domain(format!(
                            "layer {l} head {h} row {q} sums to {s}"
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Numerically stable softmax over one row.
pub fn softmax_row(scores: &[f64]) -> Result<Vec<f64>> {
    if scores.is_empty() {
        return Err(Error::domain("softmax of an empty vector"));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Numeric(NumericSite::Input));
    }
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let z: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= z);
    Ok(out)
}

/// Attention mass on the first `image_slots` entries of a row.
pub fn image_mass(row: &[f64], image_slots: usize) -> Result<f64> {
    if image_slots > row.len() {
        return Err(Error::domain(format!(
            "{image_slots} image slots exceed row length {}",
            row.len()
        )));
    }
    Ok(row[..image_slots].iter().sum())
}

/// A transform over the image columns of the last query row.
pub trait RowHook: Send + Sync + fmt::Debug {
    fn apply(&self, layer: usize, head: usize, image_row: &mut [f64]) -> Result<()>;
}

/// Adapter so tests and callers can install plain closures.
pub struct FnHook<F>(pub F);

impl<F> fmt::Debug for FnHook<F> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("FnHook")
    }
}

impl<F> RowHook for FnHook<F>
where
    F: Fn(usize, usize, &mut [f64]) + Send + Sync,
{
    fn apply(&self, layer: usize, head: usize, image_row: &mut [f64]) -> Result<()> {
        (self.0)(layer, head, image_row);
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Hook {
    pub layers: Range<usize>,
    pub enabled: bool,
    pub op: Arc<dyn RowHook>,
}

impl Hook {
    pub fn new(layers: Range<usize>, op: Arc<dyn RowHook>) -> Self {
        Self {
            layers,
            enabled: true,
            op,
        }
    }

    pub fn from_fn<F>(layers: Range<usize>, f: F) -> Self
    where
        F: Fn(usize, usize, &mut [f64]) + Send + Sync + 'static,
    {
        Self::new(layers, Arc::new(FnHook(f)))
    }

    fn active(&self, layer: usize) -> bool {
        self.enabled && self.layers.contains(&layer)
    }
}

/// Ordered hooks for both stages. Hooks run in list order.
#[derive(Clone, Debug)]
pub struct HookSet {
    pub pre_softmax: Vec<Hook>,
    pub post_softmax: Vec<Hook>,
    /// Renormalize the full last row after post-softmax hooks changed it.
    pub row_renorm: bool,
}

impl Default for HookSet {
    fn default() -> Self {
        Self {
            pre_softmax: Vec::new(),
            post_softmax: Vec::new(),
            row_renorm: true,
        }
    }
}

impl HookSet {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.pre_softmax.is_empty() && self.post_softmax.is_empty()
    }
}

/// Additive score terms applied before every hook.
///
/// Image columns receive `image_affinity`, `sink_strength` on `sink_positions`,
/// and `-decay * t` where `t` counts generated tokens up to the query row.
/// Text columns receive `text_affinity`; with `text_budget` set, every text row
/// also subtracts `ln(n_text / n_query)`, `n_text` counting the text positions
/// the row can see, so the text block has the same aggregate weight in every
/// text row.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreBias {
    pub content_gain: f64,
    pub image_affinity: f64,
    pub text_affinity: f64,
    pub sink_positions: Vec<usize>,
    pub sink_strength: f64,
    pub decay: f64,
    pub text_budget: bool,
}

impl ScoreBias {
    /// Plain decoder: content scores only.
    pub fn neutral() -> Self {
        Self {
            content_gain: 1.0,
            ..Self::default()
        }
    }
}

/// What an output head gets to read after the last layer.
pub struct Readout<'a> {
    pub seq: &'a TokenSequence,
    pub attn: &'a AttentionTensor,
    /// Final hidden state of the last position.
    pub hidden: &'a [f64],
    pub embeddings: &'a [Vec<f64>],
}

pub trait OutputHead: Send + Sync + fmt::Debug {
    fn logits(&self, readout: &Readout<'_>) -> Vec<f64>;

    /// Stable description folded into the decoder fingerprint.
    fn describe(&self) -> String;
}

/// Tied-embedding readout: `logits = E h`.
#[derive(Debug, Clone, Copy, Default)]
pub struct TiedHead;

impl OutputHead for TiedHead {
    fn logits(&self, r: &Readout<'_>) -> Vec<f64> {
        r.embeddings.iter().map(|e| dot(e, r.hidden)).collect()
    }

    fn describe(&self) -> String {
        "tied".to_string()
    }
}

#[derive(Debug, Clone)]
struct LayerWeights {
    wq: Vec<f64>,
    wk: Vec<f64>,
    wv: Vec<f64>,
    wo: Vec<f64>,
}

/// Perturbation of one post-softmax entry, used by finite differences.
#[derive(Clone, Copy, Debug)]
pub(crate) struct AttnEdit {
    pub layer: usize,
    pub head: usize,
    pub query: usize,
    pub key: usize,
    pub delta: f64,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub logits: Vec<f64>,
    pub attn: AttentionTensor,
    /// Pre-softmax scores after planted terms and pre-softmax hooks; masked
    /// entries are zero. Only filled when requested.
    pub scores: Option<AttentionTensor>,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct ForwardOptions {
    pub capture_scores: bool,
}

const RESIDUAL_GAIN: f64 = 0.5;

#[derive(Debug, Clone)]
pub struct Decoder {
    cfg: ModelConfig,
    bias: ScoreBias,
    head: Arc<dyn OutputHead>,
    embed: Vec<Vec<f64>>,
    pos: Vec<Vec<f64>>,
    positional: bool,
    layers: Vec<LayerWeights>,
}

impl Decoder {
    pub fn new(cfg: ModelConfig, bias: ScoreBias, head: Arc<dyn OutputHead>) -> Result<Self> {
        cfg.validate()?;
        if let Some(&p) = bias.sink_positions.iter().find(|&&p| p >= cfg.image_slots) {
            return Err(Error::config(
                "bias.sink_positions",
                format!(
                    "position {p} is outside the {} image slots",
                    cfg.image_slots
                ),
            ));
        }
        let d = cfg.model_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut gauss = |scale: f64| -> f64 {
            let z: f64 = StandardNormal.sample(&mut rng);
            z * scale
        };
        let emb_scale = 1.0 / (d as f64).sqrt();
        let embed = (0..cfg.vocab_size)
            .map(|_| (0..d).map(|_| gauss(emb_scale)).collect())
            .collect();
        let pos = (0..cfg.max_seq_len)
            .map(|_| (0..d).map(|_| gauss(0.1 * emb_scale)).collect())
            .collect();
        let layers = (0..cfg.num_layers)
            .map(|_| {
                let mut mat = || (0..d * d).map(|_| gauss(emb_scale)).collect::<Vec<_>>();
                LayerWeights {
                    wq: mat(),
                    wk: mat(),
                    wv: mat(),
                    wo: mat(),
                }
            })
            .collect();
        Ok(Self {
            cfg,
            bias,
            head,
            embed,
            pos,
            positional: true,
            layers,
        })
    }

    /// Decoder with neutral bias and tied readout.
    pub fn plain(cfg: ModelConfig) -> Result<Self> {
        Self::new(cfg, ScoreBias::neutral(), Arc::new(TiedHead))
    }

    /// Same decoder with the positional table zeroed.
    pub fn without_positions(&self) -> Self {
        let mut out = self.clone();
        out.pos.iter_mut().flatten().for_each(|x| *x = 0.0);
        out.positional = false;
        out
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn bias(&self) -> &ScoreBias {
        &self.bias
    }

    /// Same weights and head, different planted score terms.
    pub fn with_bias(&self, bias: ScoreBias) -> Result<Self> {
        let mut out = self.clone();
        if let Some(&p) = bias
            .sink_positions
            .iter()
            .find(|&&p| p >= self.cfg.image_slots)
        {
            return Err(Error::config(
                "bias.sink_positions",
                format!("position {p} is outside the image slots"),
            ));
        }
        out.bias = bias;
        Ok(out)
    }

    /// Hex digest over config, planted terms and head description.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.cfg).expect("config serializes"));
        h.update(serde_json::to_vec(&self.bias).expect("bias serializes"));
        h.update(self.head.describe().as_bytes());
        if !self.positional {
            h.update(b"no-positions");
        }
        hex::encode(h.finalize())
    }

    pub fn forward(&self, seq: &TokenSequence, hooks: &HookSet) -> Result<ForwardOutput> {
        self.forward_with(seq, hooks, ForwardOptions::default(), None)
    }

    pub fn forward_opts(
        &self,
        seq: &TokenSequence,
        hooks: &HookSet,
        opts: ForwardOptions,
    ) -> Result<ForwardOutput> {
        self.forward_with(seq, hooks, opts, None)
    }

    pub(crate) fn forward_with(
        &self,
        seq: &TokenSequence,
        hooks: &HookSet,
        opts: ForwardOptions,
        edit: Option<AttnEdit>,
    ) -> Result<ForwardOutput> {
        let cfg = &self.cfg;
        let n = seq.len();
        if n > cfg.max_seq_len {
            return Err(Error::Length {
                len: n,
                max: cfg.max_seq_len,
            });
        }
        let n_img = seq.num_image();
        if n_img != cfg.image_slots {
            return Err(Error::domain(format!(
                "sequence has {n_img} image tokens, config expects {}",
                cfg.image_slots
            )));
        }
        if let Some(&bad) = seq.ids().iter().find(|&&id| id as usize >= cfg.vocab_size) {
            return Err(Error::domain(format!(
                "token id {bad} outside vocabulary of {}",
                cfg.vocab_size
            )));
        }
        let n_query = seq.num_query();
        let d = cfg.model_dim;
        let dh = cfg.head_dim();
        let inv_sqrt_dh = 1.0 / (dh as f64).sqrt();

        // Generated-token count up to and including each position.
        let mut gen_step = Vec::with_capacity(n);
        let mut acc = 0usize;
        for m in seq.modality() {
            if *m == Modality::Generated {
                acc += 1;
            }
            gen_step.push(acc);
        }

        let mut hidden: Vec<Vec<f64>> = seq
            .ids()
            .iter()
            .enumerate()
            .map(|(p, &id)| {
                self.embed[id as usize]
                    .iter()
                    .zip(&self.pos[p])
                    .map(|(e, q)| e + q)
                    .collect()
            })
            .collect();

        let mut attn = AttentionTensor::zeros(cfg.num_layers, cfg.num_heads, n);
        let mut scores_out = opts
            .capture_scores
            .then(|| AttentionTensor::zeros(cfg.num_layers, cfg.num_heads, n));
        let last = n - 1;
        let mut scores = vec![0.0; n];

        for (l, w) in self.layers.iter().enumerate() {
            let normed: Vec<Vec<f64>> = hidden.iter().map(|h| rms_norm(h)).collect();
            let q: Vec<Vec<f64>> = normed.iter().map(|x| matvec(&w.wq, x, d)).collect();
            let k: Vec<Vec<f64>> = normed.iter().map(|x| matvec(&w.wk, x, d)).collect();
            let v: Vec<Vec<f64>> = normed.iter().map(|x| matvec(&w.wv, x, d)).collect();
            let mut mixed = vec![vec![0.0; d]; n];

            for h in 0..cfg.num_heads {
                let span = h * dh..(h + 1) * dh;
                for row in 0..n {
                    let qh = &q[row][span.clone()];
                    let keys = &mut scores[..=row];
                    for (col, s) in keys.iter_mut().enumerate() {
                        let content = dot(qh, &k[col][span.clone()]) * inv_sqrt_dh;
                        *s = self.bias.content_gain * content
                            + self.planted(row, col, n_img, n_query, gen_step[row]);
                    }
                    if row == last {
                        for hook in hooks.pre_softmax.iter().filter(|hk| hk.active(l)) {
                            hook.op.apply(l, h, &mut keys[..n_img])?;
                        }
                    }
                    if keys.iter().any(|s| !s.is_finite()) {
                        return Err(Error::Numeric(NumericSite::Scores { layer: l, head: h }));
                    }
                    if let Some(so) = scores_out.as_mut() {
                        so.row_mut(l, h, row)[..=row].copy_from_slice(keys);
                    }
                    let probs = softmax_row(keys)?;
                    let out_row = attn.row_mut(l, h, row);
                    out_row[..=row].copy_from_slice(&probs);

                    if row == last {
                        let mut changed = false;
                        for hook in hooks.post_softmax.iter().filter(|hk| hk.active(l)) {
                            let before: Vec<f64> = out_row[..n_img].to_vec();
                            hook.op.apply(l, h, &mut out_row[..n_img])?;
                            changed |= before
                                .iter()
                                .zip(&out_row[..n_img])
                                .any(|(a, b)| a.to_bits() != b.to_bits());
                        }
                        if changed && hooks.row_renorm {
                            let s: f64 = out_row.iter().sum();
                            if s > 0.0 && s.is_finite() {
                                out_row.iter_mut().for_each(|x| *x /= s);
                            }
                        }
                        if out_row.iter().any(|x| !x.is_finite() || *x < 0.0) {
                            return Err(Error::Numeric(NumericSite::Attention {
                                layer: l,
                                head: h,
                            }));
                        }
                    }
                    if let Some(e) = edit {
                        if e.layer == l && e.head == h && e.query == row {
                            out_row[e.key] += e.delta;
                        }
                    }

                    let out = &mut mixed[row][span.clone()];
                    for (col, a) in out_row[..=row].iter().enumerate() {
                        if *a == 0.0 {
                            continue;
                        }
                        for (o, x) in out.iter_mut().zip(&v[col][span.clone()]) {
                            *o += a * x;
                        }
                    }
                }
            }

            for (hrow, m) in hidden.iter_mut().zip(&mixed) {
                let proj = matvec(&w.wo, m, d);
                for (x, p) in hrow.iter_mut().zip(proj) {
                    *x += RESIDUAL_GAIN * p;
                }
            }
            if hidden.iter().flatten().any(|x| !x.is_finite()) {
                return Err(Error::Numeric(NumericSite::Hidden { layer: l }));
            }
        }

        let final_hidden = rms_norm(&hidden[last]);
        let logits = self.head.logits(&Readout {
            seq,
            attn: &attn,
            hidden: &final_hidden,
            embeddings: &self.embed,
        });
        if logits.len() != cfg.vocab_size || logits.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric(NumericSite::Logits));
        }
        Ok(ForwardOutput {
            logits,
            attn,
            scores: scores_out,
        })
    }

    fn planted(&self, row: usize, col: usize, n_img: usize, n_query: usize, step: usize) -> f64 {
        let b = &self.bias;
        if col < n_img {
            let sink = if b.sink_positions.contains(&col) {
                b.sink_strength
            } else {
                0.0
            };
            b.image_affinity + sink - b.decay * step as f64
        } else {
            let n_text = row + 1 - n_img;
            let budget = if b.text_budget && n_query > 0 {
                (n_text as f64 / n_query as f64).ln()
            } else {
                0.0
            };
            b.text_affinity - budget
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn matvec(m: &[f64], x: &[f64], d: usize) -> Vec<f64> {
    m.chunks_exact(d).map(|r| dot(r, x)).collect()
}

fn rms_norm(x: &[f64]) -> Vec<f64> {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let inv = 1.0 / (ms + 1e-12).sqrt();
    x.iter().map(|v| v * inv).collect()
}
