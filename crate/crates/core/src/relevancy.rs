//! Layer-propagated relevancy maps.
//!
//! Rows are indexed by output position: `row(j)[i]` is the influence of input
//! token `i` on position `j`. Starting from the identity, each layer applies
//! `R <- R + A R` with `A` the head-aggregated, row-renormalized attention.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generation::GenerationTrace;
use crate::model::{AttentionTensor, Decoder, ForwardOptions, HookSet, TokenSequence};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Aggregation {
    UniformRollout,
    GradientWeighted,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RelevancyMap {
    rows: Vec<Vec<f64>>,
    pub aggregation: Aggregation,
}

impl RelevancyMap {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Influence of every input on output position `j`.
    pub fn row(&self, j: usize) -> &[f64] {
        &self.rows[j]
    }

    /// Influence of input `i` on output `j`.
    pub fn influence(&self, i: usize, j: usize) -> f64 {
        self.rows[j][i]
    }
}

/// Head-mean attention of one layer, optionally gradient weighted and
/// clamped at zero, with rows renormalized. All-zero rows stay zero.
fn aggregate_layer(
    attn: &AttentionTensor,
    grads: Option<&AttentionTensor>,
    layer: usize,
) -> Vec<Vec<f64>> {
    let n = attn.seq_len();
    let heads = attn.num_heads();
    let mut out = vec![vec![0.0; n]; n];
    for (q, row) in out.iter_mut().enumerate() {
        for h in 0..heads {
            let a = attn.row(layer, h, q);
            match grads {
                None => row.iter_mut().zip(a).for_each(|(o, x)| *o += x),
                Some(g) => {
                    let g = g.row(layer, h, q);
                    for ((o, x), gx) in row.iter_mut().zip(a).zip(g) {
                        *o += gx * x;
                    }
                }
            }
        }
        let inv = 1.0 / heads as f64;
        for x in row.iter_mut() {
            *x = (*x * inv).max(0.0);
        }
        let s: f64 = row.iter().sum();
        if s > 0.0 {
            row.iter_mut().for_each(|x| *x /= s);
        }
    }
    out
}

pub fn compute_relevancy(
    attn: &AttentionTensor,
    grads: Option<&AttentionTensor>,
) -> Result<RelevancyMap> {
    let n = attn.seq_len();
    if let Some(g) = grads {
        if g.num_layers() != attn.num_layers()
            || g.num_heads() != attn.num_heads()
            || g.seq_len() != n
        {
            return Err(Error::domain(
                "gradient tensor shape differs from attention",
            ));
        }
    }
    let mut rows: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut r = vec![0.0; n];
            r[j] = 1.0;
            r
        })
        .collect();
    for l in 0..attn.num_layers() {
        let a = aggregate_layer(attn, grads, l);
        // Causal: row q only reads rows k <= q, so updating in reverse keeps
        // the previous R available for every read.
        for q in (0..n).rev() {
            let mut add = vec![0.0; n];
            for (k, w) in a[q].iter().enumerate().take(q + 1) {
                if *w == 0.0 {
                    continue;
                }
                for (o, x) in add.iter_mut().zip(&rows[k]) {
                    *o += w * x;
                }
            }
            for (r, x) in rows[q].iter_mut().zip(add) {
                *r += x;
            }
        }
    }
    for r in rows.iter_mut() {
        let s: f64 = r.iter().sum();
        if s > 0.0 {
            r.iter_mut().for_each(|x| *x /= s);
        }
    }
    Ok(RelevancyMap {
        rows,
        aggregation: if grads.is_some() {
            Aggregation::GradientWeighted
        } else {
            Aggregation::UniformRollout
        },
    })
}

/// Image share of the relevancy reaching `out_pos`.
pub fn relative_image_relevancy(
    r: &RelevancyMap,
    image_slots: usize,
    out_pos: usize,
) -> Result<f64> {
    if out_pos >= r.len() {
        return Err(Error::domain(format!(
            "position {out_pos} outside map of size {}",
            r.len()
        )));
    }
    let col = r.row(out_pos);
    if image_slots > col.len() {
        return Err(Error::domain("image slots exceed map size"));
    }
    let total: f64 = col.iter().sum();
    if total <= 0.0 {
        return Err(Error::domain(format!(
            "no relevancy reaches position {out_pos}"
        )));
    }
    Ok(col[..image_slots].iter().sum::<f64>() / total)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConcentrationProfile {
    /// Cumulative share after sorting descending; last entry is 1.
    pub cumulative: Vec<f64>,
    /// Share held by the top `ceil(0.1 n)` entries.
    pub top_decile: f64,
}

pub fn concentration_profile(values: &[f64]) -> Result<ConcentrationProfile> {
    if values.iter().any(|v| *v < 0.0 || !v.is_finite()) {
        return Err(Error::domain(
            "concentration input must be finite and nonnegative",
        ));
    }
    let total: f64 = values.iter().sum();
    if total <= 0.0 {
        return Err(Error::domain("concentration of an all-zero vector"));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut acc = 0.0;
    let cumulative: Vec<f64> = sorted
        .iter()
        .map(|v| {
            acc += v;
            acc / total
        })
        .collect();
    let top = (values.len() as f64 * 0.1).ceil() as usize;
    Ok(ConcentrationProfile {
        top_decile: cumulative[top.max(1) - 1],
        cumulative,
    })
}

/// Central finite differences of `logits[target]` with respect to every
/// causal post-softmax attention entry.
pub fn attention_gradients(
    decoder: &Decoder,
    seq: &TokenSequence,
    hooks: &HookSet,
    target: usize,
    step: f64,
) -> Result<AttentionTensor> {
    let cfg = decoder.config();
    let n = seq.len();
    let mut grads = AttentionTensor::zeros(cfg.num_layers, cfg.num_heads, n);
    for l in 0..cfg.num_layers {
        for h in 0..cfg.num_heads {
            for q in 0..n {
                for k in 0..=q {
                    let eval = |delta: f64| -> Result<f64> {
                        let edit = crate::model::AttnEdit {
                            layer: l,
                            head: h,
                            query: q,
                            key: k,
                            delta,
                        };
                        let out = decoder.forward_with(
                            seq,
                            hooks,
                            ForwardOptions::default(),
                            Some(edit),
                        )?;
                        Ok(out.logits[target])
                    };
                    let g = (eval(step)? - eval(-step)?) / (2.0 * step);
                    grads.set(l, h, q, k, g);
                }
            }
        }
    }
    Ok(grads)
}

/// Spearman rank correlation with average ranks for ties. Zero when either
/// series is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len());
    let rx = ranks(x);
    let ry = ranks(y);
    pearson(&rx, &ry)
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = r;
        }
        i = j + 1;
    }
    out
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return 0.0;
    }
    sxy / (sxx * syy).sqrt()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecayTrace {
    /// `(generation step, mean relative image relevancy)`.
    pub series: Vec<(usize, f64)>,
    pub correlation: f64,
}

pub fn decay_trace(traces: &[GenerationTrace]) -> Result<DecayTrace> {
    let mut sums: Vec<(f64, usize)> = Vec::new();
    for t in traces {
        for (pos, step) in t.steps.iter().enumerate() {
            let Some(r) = step.r_rel else {
                return Err(Error::domain("trace step has no relevancy snapshot"));
            };
            if sums.len() <= pos {
                sums.resize(pos + 1, (0.0, 0));
            }
            sums[pos].0 += r;
            sums[pos].1 += 1;
        }
    }
    if sums.len() < 3 {
        return Err(Error::domain(format!(
            "decay trace needs at least 3 positions, got {}",
            sums.len()
        )));
    }
    let series: Vec<(usize, f64)> = sums
        .iter()
        .enumerate()
        .map(|(p, (s, c))| (p, s / *c as f64))
        .collect();
    let xs: Vec<f64> = series.iter().map(|(p, _)| *p as f64).collect();
    let ys: Vec<f64> = series.iter().map(|(_, r)| *r).collect();
    Ok(DecayTrace {
        correlation: spearman(&xs, &ys),
        series,
    })
}
