//! Weighted-frequency scoring of SAE latents and culture-neuron selection.

use ndarray::{ArrayView2, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::FeatureSet;
use crate::trace_store::Condition;

#[derive(Debug, Error, PartialEq)]
pub enum NeuronError {
    #[error("latent matrix has no rows")]
    NoSamples,
    #[error("latent matrix has a non-finite value at ({row}, {col})")]
    NonFinite { row: usize, col: usize },
    #[error("beta must be > 0, got {0}")]
    BadBeta(f64),
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("no selectable neurons: every cultural score is zero")]
    AllZero,
    #[error("invalid selection policy: {0}")]
    BadPolicy(String),
}

pub const DEFAULT_BETA: f64 = 1e-6;

fn check(z: &ArrayView2<'_, f32>) -> Result<(), NeuronError> {
    if z.nrows() == 0 {
        return Err(NeuronError::NoSamples);
    }
    if let Some(((row, col), _)) = z.indexed_iter().find(|(_, v)| !v.is_finite()) {
        return Err(NeuronError::NonFinite { row, col });
    }
    Ok(())
}

/// Fraction of rows where each latent exceeds `epsilon`.
pub fn activation_frequency(z: &ArrayView2<'_, f32>, epsilon: f64) -> Result<Vec<f64>, NeuronError> {
    check(z)?;
    let n = z.nrows() as f64;
    Ok(z.columns()
        .into_iter()
        .map(|c| c.iter().filter(|&&v| f64::from(v) > epsilon).count() as f64 / n)
        .collect())
}

/// Mean of each latent over the rows where it exceeds `epsilon`, damped by `beta`.
pub fn mean_magnitude(z: &ArrayView2<'_, f32>, epsilon: f64, beta: f64) -> Result<Vec<f64>, NeuronError> {
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(NeuronError::BadBeta(beta));
    }
    check(z)?;
    Ok(z.columns()
        .into_iter()
        .map(|c| {
            let (sum, count) = c
                .iter()
                .map(|&v| f64::from(v))
                .filter(|&v| v > epsilon)
                .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
            sum / (count as f64 + beta)
        })
        .collect())
}

pub fn weighted_frequency_score(f: &[f64], mu: &[f64]) -> Result<Vec<f64>, NeuronError> {
    if f.len() != mu.len() {
        return Err(NeuronError::LengthMismatch { left: f.len(), right: mu.len() });
    }
    Ok(f.iter().zip(mu).map(|(a, b)| a * b).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectionPolicy {
    pub max_candidates: usize,
    pub elbow_ratio: f64,
    pub fixed_k: usize,
    pub noun_fraction: f64,
    /// Successor scores are floored at this fraction of the top score when
    /// forming drop ratios, so a fall to exact zero is finite.
    pub tail_floor: f64,
}

impl Default for SelectionPolicy {
    fn default() -> Self {
        SelectionPolicy {
            max_candidates: 64,
            elbow_ratio: 3.0,
            fixed_k: 8,
            noun_fraction: 0.5,
            tail_floor: 1e-3,
        }
    }
}

impl SelectionPolicy {
    fn validate(&self) -> Result<(), NeuronError> {
        let bad = |m: String| Err(NeuronError::BadPolicy(m));
        if self.max_candidates == 0 || self.fixed_k == 0 {
            return bad("max_candidates and fixed_k must be at least 1".into());
        }
        if !(self.elbow_ratio >= 1.0 && self.elbow_ratio.is_finite()) {
            return bad(format!("elbow_ratio {} must be finite and >= 1", self.elbow_ratio));
        }
        if !(self.noun_fraction >= 0.0 && self.noun_fraction.is_finite()) {
            return bad(format!("noun_fraction {} must be finite and >= 0", self.noun_fraction));
        }
        if !(self.tail_floor > 0.0 && self.tail_floor < 1.0) {
            return bad(format!("tail_floor {} must lie in (0, 1)", self.tail_floor));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionDiagnostics {
    /// Latents ranked by cultural score, truncated to the candidate window.
    pub ranking: Vec<usize>,
    /// `ratios[r]` compares rank `r` with rank `r + 1`.
    pub drop_ratios: Vec<f64>,
    pub elbow_ratio_observed: f64,
    pub fallback: bool,
    /// Candidates dropped for noun-side salience.
    pub removed_for_noun: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    /// Sorted latent indices.
    pub selected: Vec<usize>,
    pub k_selected: usize,
    pub diagnostics: SelectionDiagnostics,
}

/// Ranks latents by `wfs_cult`, cuts at the sharpest drop and filters out
/// latents that are almost as salient under noun-only prompts.
pub fn select_culture_neurons(
    wfs_cult: &[f64],
    wfs_noun: &[f64],
    policy: &SelectionPolicy,
) -> Result<Selection, NeuronError> {
    if wfs_cult.len() != wfs_noun.len() {
        return Err(NeuronError::LengthMismatch { left: wfs_cult.len(), right: wfs_noun.len() });
    }
    policy.validate()?;
    let mut ranking: Vec<usize> = (0..wfs_cult.len()).filter(|&m| wfs_cult[m] > 0.0).collect();
    if ranking.is_empty() {
        return Err(NeuronError::AllZero);
    }
    ranking.sort_by(|&a, &b| wfs_cult[b].total_cmp(&wfs_cult[a]).then(a.cmp(&b)));
    let window = ranking.len().min(policy.max_candidates);
    let top = wfs_cult[ranking[0]];
    let floor = policy.tail_floor * top;
    let score = |r: usize| ranking.get(r).map_or(0.0, |&m| wfs_cult[m]);
    let drop_ratios: Vec<f64> = (0..window).map(|r| score(r) / score(r + 1).max(floor)).collect();
    let (best_r, best) = drop_ratios
        .iter()
        .copied()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |acc, (r, v)| if v > acc.1 { (r, v) } else { acc });
    let fallback = best < policy.elbow_ratio;
    let k = if fallback { policy.fixed_k.min(ranking.len()) } else { best_r + 1 };

    let mut selected = Vec::new();
    let mut removed_for_noun = Vec::new();
    for &m in &ranking[..k] {
        if wfs_noun[m] >= policy.noun_fraction * wfs_cult[m] {
            removed_for_noun.push(m);
        } else {
            selected.push(m);
        }
    }
    selected.sort_unstable();
    ranking.truncate(window);
    Ok(Selection {
        k_selected: selected.len(),
        selected,
        diagnostics: SelectionDiagnostics {
            ranking,
            drop_ratios,
            elbow_ratio_observed: best,
            fallback,
            removed_for_noun,
        },
    })
}

pub const NOUN_SALIENCE_NOTE: &str = "noun-side scores come from latents of noun-only prompt features";
pub const LATENT_INDEX_NOTE: &str = "neurons are indexed in the SAE latent space";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeuronReport {
    pub culture_label: String,
    pub f_cult: Vec<f64>,
    pub f_noun: Vec<f64>,
    pub mu_cult: Vec<f64>,
    pub mu_noun: Vec<f64>,
    pub wfs_cult: Vec<f64>,
    pub wfs_noun: Vec<f64>,
    pub selected: Vec<usize>,
    pub k_selected: usize,
    pub epsilon: f64,
    pub beta: f64,
    pub policy: SelectionPolicy,
    pub diagnostics: SelectionDiagnostics,
    pub notes: Vec<String>,
}

/// Scores one culture from its cultural-prompt and noun-prompt latents.
pub fn scan_culture(
    culture_label: &str,
    z_cult: &ArrayView2<'_, f32>,
    z_noun: &ArrayView2<'_, f32>,
    epsilon: f64,
    beta: f64,
    policy: &SelectionPolicy,
) -> Result<NeuronReport, NeuronError> {
    if z_cult.ncols() != z_noun.ncols() {
        return Err(NeuronError::LengthMismatch { left: z_cult.ncols(), right: z_noun.ncols() });
    }
    let f_cult = activation_frequency(z_cult, epsilon)?;
    let f_noun = activation_frequency(z_noun, epsilon)?;
    let mu_cult = mean_magnitude(z_cult, epsilon, beta)?;
    let mu_noun = mean_magnitude(z_noun, epsilon, beta)?;
    let wfs_cult = weighted_frequency_score(&f_cult, &mu_cult)?;
    let wfs_noun = weighted_frequency_score(&f_noun, &mu_noun)?;
    let sel = select_culture_neurons(&wfs_cult, &wfs_noun, policy)?;
    Ok(NeuronReport {
        culture_label: culture_label.to_string(),
        f_cult,
        f_noun,
        mu_cult,
        mu_noun,
        wfs_cult,
        wfs_noun,
        selected: sel.selected,
        k_selected: sel.k_selected,
        epsilon,
        beta,
        policy: *policy,
        diagnostics: sel.diagnostics,
        notes: vec![NOUN_SALIENCE_NOTE.into(), LATENT_INDEX_NOTE.into()],
    })
}

/// Scores every culture of a labeled feature set from its latents `z`,
/// one row per feature row.
pub fn scan_feature_set(
    z: &ArrayView2<'_, f32>,
    fs: &FeatureSet,
    epsilon: f64,
    beta: f64,
    policy: &SelectionPolicy,
) -> Result<Vec<NeuronReport>, NeuronError> {
    if z.nrows() != fs.rows.len() {
        return Err(NeuronError::LengthMismatch { left: z.nrows(), right: fs.rows.len() });
    }
    fs.cultures()
        .iter()
        .map(|c| {
            let zc = z.select(Axis(0), &fs.rows_where(c, Condition::Cult));
            let zn = z.select(Axis(0), &fs.rows_where(c, Condition::Noun));
            scan_culture(c, &zc.view(), &zn.view(), epsilon, beta, policy)
        })
        .collect()
}
