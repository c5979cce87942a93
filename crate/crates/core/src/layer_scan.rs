//! Culture-sensitive layer detection from modifier-to-noun attention.
//!
//! Attention matrices follow the row-attends-to-column convention: entry
//! `[i, j]` is the mass token `i` (a culture modifier) sends to token `j`
//! (a target noun). All reductions run in `f64`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numeric::{exact_mean, exact_sum};
use crate::trace_store::{AttentionDirection, Condition, TensorEntry, TokenGroups, TraceBundle};

#[derive(Debug, Error, PartialEq)]
pub enum ScanError {
    #[error("attention tensor must have at least one head")]
    ZeroHeads,
    #[error("expected a B x H x S x S attention tensor, got dims {0:?}")]
    BadShape(Vec<u64>),
    #[error("{0} index set is empty")]
    EmptyIndexSet(&'static str),
    #[error("{group} index {index} out of range for sequence length {seq_len}")]
    IndexOutOfRange {
        group: &'static str,
        index: usize,
        seq_len: usize,
    },
    #[error("pair {pair_id:?}: cult trace {cult:?} and noun trace {noun:?} differ in shape")]
    ShapeMismatch {
        pair_id: String,
        cult: (usize, usize, usize),
        noun: (usize, usize, usize),
    },
    #[error("layer selection needs at least 3 layers, got {0}")]
    TooFewLayers(usize),
    #[error("no prompt pairs to scan")]
    NoPairs,
    #[error("missing attention tensor for pair {pair_id:?} at (layer {layer}, {condition})")]
    MissingTensor {
        pair_id: String,
        layer: usize,
        condition: Condition,
    },
    #[error("bundle declares {0:?}; row-attends-to-column is required")]
    Direction(AttentionDirection),
}

/// Borrowed `B x H x S x S` attention tensor.
#[derive(Debug, Clone, Copy)]
pub struct AttentionView<'a> {
    pub batch: usize,
    pub heads: usize,
    pub seq: usize,
    pub data: &'a [f32],
}

impl<'a> AttentionView<'a> {
    pub fn new(batch: usize, heads: usize, seq: usize, data: &'a [f32]) -> Result<Self, ScanError> {
        if data.len() != batch * heads * seq * seq {
            return Err(ScanError::BadShape(vec![batch as u64, heads as u64, seq as u64, seq as u64]));
        }
        Ok(AttentionView { batch, heads, seq, data })
    }

    pub fn from_entry(entry: &'a TensorEntry) -> Result<Self, ScanError> {
        match entry.dims.as_slice() {
            &[b, h, s, s2] if s == s2 => Self::new(b as usize, h as usize, s as usize, &entry.data),
            dims => Err(ScanError::BadShape(dims.to_vec())),
        }
    }

    fn shape(&self) -> (usize, usize, usize) {
        (self.batch, self.heads, self.seq)
    }
}

/// Head-averaged attention, `B x S x S`, in `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadAveraged {
    pub batch: usize,
    pub seq: usize,
    pub data: Vec<f64>,
}

impl HeadAveraged {
    #[inline]
    pub fn get(&self, b: usize, i: usize, j: usize) -> f64 {
        self.data[(b * self.seq + i) * self.seq + j]
    }
}

/// Mean over heads, accumulated in ascending head order.
pub fn head_average(attn: &AttentionView<'_>) -> Result<HeadAveraged, ScanError> {
    if attn.heads == 0 {
        return Err(ScanError::ZeroHeads);
    }
    let plane = attn.seq * attn.seq;
    let mut data = vec![0.0f64; attn.batch * plane];
    for b in 0..attn.batch {
        let out = &mut data[b * plane..(b + 1) * plane];
        for h in 0..attn.heads {
            let src = &attn.data[(b * attn.heads + h) * plane..][..plane];
            for (o, &v) in out.iter_mut().zip(src) {
                *o += f64::from(v);
            }
        }
        let heads = attn.heads as f64;
        out.iter_mut().for_each(|o| *o /= heads);
    }
    Ok(HeadAveraged {
        batch: attn.batch,
        seq: attn.seq,
        data,
    })
}

fn check_indices(group: &'static str, idx: &[usize], seq_len: usize) -> Result<(), ScanError> {
    if idx.is_empty() {
        return Err(ScanError::EmptyIndexSet(group));
    }
    if let Some(&index) = idx.iter().find(|&&i| i >= seq_len) {
        return Err(ScanError::IndexOutOfRange { group, index, seq_len });
    }
    Ok(())
}

/// Mean modifier-to-noun attention mass over the `T_cult x T_noun` block,
/// averaged over the batch.
pub fn cultural_attention(avg: &HeadAveraged, t_cult: &[usize], t_noun: &[usize]) -> Result<f64, ScanError> {
    check_indices("t_cult", t_cult, avg.seq)?;
    check_indices("t_noun", t_noun, avg.seq)?;
    let mut total = 0.0;
    for b in 0..avg.batch {
        let mut block = 0.0;
        for &c in t_cult {
            for &n in t_noun {
                block += avg.get(b, c, n);
            }
        }
        total += block;
    }
    Ok(total / avg.batch as f64 / (t_cult.len() * t_noun.len()) as f64)
}

/// Both prompts of one pair at a single layer.
#[derive(Debug, Clone, Copy)]
pub struct PairTraces<'a> {
    pub pair_id: &'a str,
    pub cult: AttentionView<'a>,
    pub noun: AttentionView<'a>,
    pub cult_groups: &'a TokenGroups,
    pub noun_groups: &'a TokenGroups,
}

impl<'a> PairTraces<'a> {
    /// The same pair with the two conditions exchanged.
    pub fn swapped(&self) -> Self {
        PairTraces {
            pair_id: self.pair_id,
            cult: self.noun,
            noun: self.cult,
            cult_groups: self.noun_groups,
            noun_groups: self.cult_groups,
        }
    }
}

/// CA of one prompt. Noun-only prompts without modifier tokens are scored on
/// their surrogate positions (BOS when none are annotated).
pub fn prompt_ca(view: &AttentionView<'_>, groups: &TokenGroups) -> Result<f64, ScanError> {
    let avg = head_average(view)?;
    cultural_attention(&avg, groups.modifier_positions(), &groups.t_noun)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeltaCa {
    pub ca_cult: f64,
    pub ca_noun: f64,
    /// `ca_cult - ca_noun`.
    pub delta: f64,
    /// Standard error of the per-pair differences (0 for a single pair).
    pub stderr: f64,
}

/// Mean cultural-minus-noun CA over prompt pairs at one layer.
///
/// Means use a correctly rounded sum, so the result is invariant under any
/// permutation of `pairs` and exactly negated when conditions are swapped.
pub fn delta_ca(pairs: &[PairTraces<'_>]) -> Result<DeltaCa, ScanError> {
    if pairs.is_empty() {
        return Err(ScanError::NoPairs);
    }
    let mut cult = Vec::with_capacity(pairs.len());
    let mut noun = Vec::with_capacity(pairs.len());
    for p in pairs {
        if p.cult.shape() != p.noun.shape() {
            return Err(ScanError::ShapeMismatch {
                pair_id: p.pair_id.to_string(),
                cult: p.cult.shape(),
                noun: p.noun.shape(),
            });
        }
        cult.push(prompt_ca(&p.cult, p.cult_groups)?);
        noun.push(prompt_ca(&p.noun, p.noun_groups)?);
    }
    let ca_cult = exact_mean(&cult).unwrap_or(0.0);
    let ca_noun = exact_mean(&noun).unwrap_or(0.0);
    let delta = ca_cult - ca_noun;
    let n = pairs.len() as f64;
    let stderr = if pairs.len() > 1 {
        let sq = exact_sum(cult.iter().zip(&noun).map(|(c, m)| {
            let d = (c - m) - delta;
            d * d
        }));
        (sq / (n - 1.0)).sqrt() / n.sqrt()
    } else {
        0.0
    };
    Ok(DeltaCa {
        ca_cult,
        ca_noun,
        delta,
        stderr,
    })
}

/// When a layer counts as culture-sensitive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectionRule {
    /// A layer must exceed `margin_factor` times the mean of its neighbors.
    pub margin_factor: f64,
    /// A layer must also reach this fraction of the curve's maximum. Zero
    /// (or negative) disables the gate and leaves the bare neighbor rule.
    pub min_peak_fraction: f64,
}

impl Default for SelectionRule {
    fn default() -> Self {
        SelectionRule {
            margin_factor: 1.0,
            min_peak_fraction: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSelection {
    pub layers: Vec<usize>,
    /// Nothing passed the rule; `layers` is the argmax singleton.
    pub fallback: bool,
}

pub fn select_sensitive_layers(curve: &[f64], rule: &SelectionRule) -> Result<LayerSelection, ScanError> {
    let n = curve.len();
    if n < 3 {
        return Err(ScanError::TooFewLayers(n));
    }
    let peak = curve.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let gate = rule.min_peak_fraction > 0.0;
    let layers: Vec<usize> = (0..n)
        .filter(|&l| {
            let neighbors = match l {
                0 => curve[1],
                l if l == n - 1 => curve[n - 2],
                l => (curve[l - 1] + curve[l + 1]) / 2.0,
            };
            let local = curve[l] > rule.margin_factor * neighbors;
            let notable = !gate || (peak > 0.0 && curve[l] >= rule.min_peak_fraction * peak);
            local && notable
        })
        .collect();
    if layers.is_empty() {
        // First maximal index.
        let argmax = curve
            .iter()
            .enumerate()
            .fold(0, |best, (i, &v)| if v > curve[best] { i } else { best });
        return Ok(LayerSelection {
            layers: vec![argmax],
            fallback: true,
        });
    }
    Ok(LayerSelection { layers, fallback: false })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerScanResult {
    pub delta_ca: Vec<f64>,
    pub ca_cult: Vec<f64>,
    pub ca_noun: Vec<f64>,
    pub delta_stderr: Vec<f64>,
    pub sensitive_layers: Vec<usize>,
    pub fallback: bool,
    pub n_pairs: usize,
    pub rule: SelectionRule,
    /// How noun-only modifier slots were scored.
    pub noun_surrogate: String,
}

impl LayerScanResult {
    /// The single top layer used by downstream stages.
    pub fn top_layer(&self) -> Option<usize> {
        self.sensitive_layers
            .iter()
            .copied()
            .max_by(|&a, &b| self.delta_ca[a].total_cmp(&self.delta_ca[b]).then(b.cmp(&a)))
    }
}

pub const NOUN_SURROGATE_NOTE: &str =
    "noun-only CA scored on annotated modifier-slot positions of the noun prompt, BOS (position 0) when none are annotated";

/// Runs the scan over every layer and annotation of a bundle.
pub fn scan_layers(bundle: &TraceBundle, rule: &SelectionRule) -> Result<LayerScanResult, ScanError> {
    let m = &bundle.manifest;
    if m.direction != AttentionDirection::RowAttendsToColumn {
        return Err(ScanError::Direction(m.direction));
    }
    if m.annotations.is_empty() {
        return Err(ScanError::NoPairs);
    }
    let mut result = LayerScanResult {
        delta_ca: Vec::with_capacity(m.n_layers),
        ca_cult: Vec::with_capacity(m.n_layers),
        ca_noun: Vec::with_capacity(m.n_layers),
        delta_stderr: Vec::with_capacity(m.n_layers),
        sensitive_layers: vec![],
        fallback: false,
        n_pairs: m.annotations.len(),
        rule: *rule,
        noun_surrogate: format!("{NOUN_SURROGATE_NOTE}; extractor: {}", m.noun_surrogate),
    };
    for layer in 0..m.n_layers {
        let mut pairs = Vec::with_capacity(m.annotations.len());
        for a in &m.annotations {
            let fetch = |condition| {
                bundle
                    .attention(layer, condition, &a.pair_id)
                    .ok_or_else(|| ScanError::MissingTensor {
                        pair_id: a.pair_id.clone(),
                        layer,
                        condition,
                    })
                    .and_then(AttentionView::from_entry)
            };
            pairs.push(PairTraces {
                pair_id: &a.pair_id,
                cult: fetch(Condition::Cult)?,
                noun: fetch(Condition::Noun)?,
                cult_groups: &a.cult,
                noun_groups: &a.noun,
            });
        }
        let d = delta_ca(&pairs)?;
        result.delta_ca.push(d.delta);
        result.ca_cult.push(d.ca_cult);
        result.ca_noun.push(d.ca_noun);
        result.delta_stderr.push(d.stderr);
    }
    let sel = select_sensitive_layers(&result.delta_ca, rule)?;
    result.sensitive_layers = sel.layers;
    result.fallback = sel.fallback;
    Ok(result)
}
