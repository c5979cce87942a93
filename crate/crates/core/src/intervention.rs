//! Latent amplification and masking through a trained SAE.

use std::collections::BTreeSet;

use ndarray::{Array2, ArrayView2, ArrayViewD, ArrayD, IxDyn};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::FeatureSet;
use crate::neuron_scan::NeuronReport;
use crate::topk_sae::{SaeError, SaeModel};
use crate::trace_store::Condition;

/// Default amplification coefficient.
pub const DEFAULT_LAMBDA: f64 = 7.0;
/// Alternative coefficient also accepted by the CLI.
pub const ALT_LAMBDA: f64 = 6.0;

#[derive(Debug, Error)]
pub enum InterventionError {
    #[error("latent index {index} out of range for d_hidden {d_hidden}")]
    IndexOutOfRange { index: usize, d_hidden: usize },
    #[error("lambda {0} must be finite and >= -1")]
    BadLambda(f64),
    #[error("input has {got} trailing features, model expects {expected}")]
    FeatureDim { expected: usize, got: usize },
    #[error("cannot draw {size} latents from {available} available")]
    SetTooLarge { size: usize, available: usize },
    #[error("feature set carries no planted dictionary")]
    NoPlantedTruth,
    #[error("culture {0:?} has no planted latents or no cultural rows")]
    UnknownCulture(String),
    #[error(transparent)]
    Sae(#[from] SaeError),
}

impl InterventionError {
    pub fn is_validation(&self) -> bool {
        match self {
            InterventionError::Sae(e) => e.is_validation(),
            _ => true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Amplify,
    Mask,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionConfig {
    pub mode: Mode,
    pub neuron_set: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    #[serde(default)]
    pub seed: u64,
}

impl InterventionConfig {
    /// Effective per-latent factor `1 + lambda`; masking is `lambda = -1`.
    pub fn factor_lambda(&self) -> f64 {
        match self.mode {
            Mode::Mask => -1.0,
            Mode::Amplify => self.lambda.unwrap_or(DEFAULT_LAMBDA),
        }
    }
}

fn check_set(set: &[usize], d_hidden: usize) -> Result<(), InterventionError> {
    match set.iter().find(|&&m| m >= d_hidden) {
        Some(&index) => Err(InterventionError::IndexOutOfRange { index, d_hidden }),
        None => Ok(()),
    }
}

/// Scales the given latent columns of `z` by `1 + lambda` in place.
pub fn scale_latents(z: &mut Array2<f32>, set: &[usize], lambda: f64) -> Result<(), InterventionError> {
    if !(lambda >= -1.0 && lambda.is_finite()) {
        return Err(InterventionError::BadLambda(lambda));
    }
    check_set(set, z.ncols())?;
    let unique: BTreeSet<usize> = set.iter().copied().collect();
    let factor = (1.0 + lambda) as f32;
    for m in unique {
        z.column_mut(m).mapv_inplace(|v| v * factor);
    }
    Ok(())
}

fn as_rows<'a>(model: &SaeModel, f: &'a ArrayViewD<'_, f32>) -> Result<ArrayView2<'a, f32>, InterventionError> {
    let last = f.shape().last().copied().unwrap_or(0);
    if f.ndim() == 0 || last != model.d_in {
        return Err(InterventionError::FeatureDim { expected: model.d_in, got: last });
    }
    let rows = f.len() / last;
    let f_std = f.view();
    f_std
        .into_shape_with_order((rows, last))
        .map_err(|_| InterventionError::FeatureDim { expected: model.d_in, got: last })
}

/// Encodes `f` (any shape ending in `d_in`), scales `set` by `1 + lambda`,
/// decodes, and restores the input shape.
pub fn amplify(model: &SaeModel, f: &ArrayViewD<'_, f32>, set: &[usize], lambda: f64) -> Result<ArrayD<f32>, InterventionError> {
    check_set(set, model.d_hidden)?;
    if !(lambda >= -1.0 && lambda.is_finite()) {
        return Err(InterventionError::BadLambda(lambda));
    }
    let standard = f.as_standard_layout();
    let view = standard.view();
    let rows = as_rows(model, &view)?;
    let mut z = model.encode(&rows)?;
    scale_latents(&mut z, set, lambda)?;
    let out = model.decode(&z.view())?;
    Ok(out.into_shape_with_order(IxDyn(f.shape())).expect("same element count"))
}

/// Zeroes the latents in `set` before decoding.
pub fn mask(model: &SaeModel, f: &ArrayViewD<'_, f32>, set: &[usize]) -> Result<ArrayD<f32>, InterventionError> {
    amplify(model, f, set, -1.0)
}

pub fn apply(model: &SaeModel, f: &ArrayViewD<'_, f32>, cfg: &InterventionConfig) -> Result<ArrayD<f32>, InterventionError> {
    amplify(model, f, &cfg.neuron_set, cfg.factor_lambda())
}

/// Uniform sample of `size` latents outside `exclude`, sorted.
pub fn random_neuron_set(size: usize, d_hidden: usize, exclude: &[usize], seed: u64) -> Result<Vec<usize>, InterventionError> {
    let excluded: BTreeSet<usize> = exclude.iter().copied().filter(|&m| m < d_hidden).collect();
    let pool: Vec<usize> = (0..d_hidden).filter(|m| !excluded.contains(m)).collect();
    if size > pool.len() {
        return Err(InterventionError::SetTooLarge { size, available: pool.len() });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out: Vec<usize> = sample(&mut rng, pool.len(), size).into_iter().map(|i| pool[i]).collect();
    out.sort_unstable();
    Ok(out)
}

/// Energy of `x` rows inside the span of orthonormal `basis` rows.
pub fn subspace_energy(x: &ArrayView2<'_, f32>, basis: &ArrayView2<'_, f32>) -> f64 {
    let mut e = 0.0;
    for row in x.rows() {
        for b in basis.rows() {
            let p: f64 = row.iter().zip(b.iter()).map(|(&a, &c)| f64::from(a) * f64::from(c)).sum();
            e += p * p;
        }
    }
    e
}

/// Metric value with its signed change from the baseline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AblationEntry {
    pub value: f64,
    pub delta: f64,
}

impl AblationEntry {
    /// Two decimals, e.g. `7.65 (-27.97)`.
    pub fn format(&self) -> String {
        format!("{} ({})", fmt2(self.value), fmt2(self.delta))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub baseline: f64,
    pub masked_topk: AblationEntry,
    pub masked_random: AblationEntry,
}

fn round2(v: f64) -> f64 {
    let r = (v * 100.0).round() / 100.0;
    if r == 0.0 {
        0.0
    } else {
        r
    }
}

fn fmt2(v: f64) -> String {
    format!("{:.2}", round2(v))
}

/// Deltas are rounded to two decimals so `value - baseline` on two-decimal
/// inputs comes out exact.
pub fn ablation_report(baseline: f64, topk: f64, random: f64) -> AblationReport {
    let entry = |v: f64| AblationEntry { value: v, delta: round2(v - baseline) };
    AblationReport {
        baseline,
        masked_topk: entry(topk),
        masked_random: entry(random),
    }
}

impl AblationReport {
    pub fn rows(&self) -> [(&'static str, String); 3] {
        [
            ("Baseline", fmt2(self.baseline)),
            ("Masked Top-K Neurons", self.masked_topk.format()),
            ("Masked Random Neurons", self.masked_random.format()),
        ]
    }
}

// ---------------------------------------------------------------------------
// Planted-direction metrics
// ---------------------------------------------------------------------------

/// Planted-direction energy across amplification strengths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaSweep {
    pub culture_label: String,
    pub lambdas: Vec<f64>,
    pub energy: Vec<f64>,
}

/// Cultural rows and orthonormal planted atoms of one culture.
fn planted_rows(fs: &FeatureSet, culture: &str) -> Result<(Array2<f32>, Array2<f32>), InterventionError> {
    let truth = fs.planted.as_ref().ok_or(InterventionError::NoPlantedTruth)?;
    let basis = truth.culture_atoms(culture).ok_or_else(|| InterventionError::UnknownCulture(culture.to_string()))?;
    let rows = fs.rows_where(culture, Condition::Cult);
    if rows.is_empty() || basis.nrows() == 0 {
        return Err(InterventionError::UnknownCulture(culture.to_string()));
    }
    Ok((fs.select(&rows), basis))
}

fn energy_after(model: &SaeModel, x: &Array2<f32>, basis: &Array2<f32>, set: &[usize], lambda: f64) -> Result<f64, InterventionError> {
    let out = amplify(model, &x.view().into_dyn(), set, lambda)?;
    let out = out.into_dimensionality::<ndarray::Ix2>().expect("two-dimensional input");
    Ok(subspace_energy(&out.view(), &basis.view()))
}

/// Energy in the culture's planted subspace after amplifying `set` by each
/// `lambda`, over the culture's cultural rows.
pub fn lambda_sweep(
    model: &SaeModel,
    fs: &FeatureSet,
    culture: &str,
    set: &[usize],
    lambdas: &[f64],
) -> Result<LambdaSweep, InterventionError> {
    let (x, basis) = planted_rows(fs, culture)?;
    let energy = lambdas
        .iter()
        .map(|&l| energy_after(model, &x, &basis, set, l))
        .collect::<Result<_, _>>()?;
    Ok(LambdaSweep { culture_label: culture.to_string(), lambdas: lambdas.to_vec(), energy })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CultureMasking {
    pub culture_label: String,
    pub selected: Vec<usize>,
    pub random: Vec<usize>,
    pub energy_data: f64,
    pub energy_baseline: f64,
    pub energy_masked_topk: f64,
    pub energy_masked_random: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskValidation {
    /// Scores are `100 x` reconstruction energy over data energy in the
    /// planted subspaces, pooled over cultures.
    pub report: AblationReport,
    pub cultures: Vec<CultureMasking>,
}

/// Masks each culture's selected latents, and an equal-size disjoint random
/// set, then measures what is left of the planted culture directions.
pub fn validate_masking(
    model: &SaeModel,
    fs: &FeatureSet,
    reports: &[NeuronReport],
    seed: u64,
) -> Result<MaskValidation, InterventionError> {
    let mut cultures = Vec::new();
    for (i, r) in reports.iter().enumerate() {
        let (x, basis) = planted_rows(fs, &r.culture_label)?;
        let random = random_neuron_set(r.selected.len(), model.d_hidden, &r.selected, crate::numeric::derive_seed(seed, &[i as u64]))?;
        cultures.push(CultureMasking {
            culture_label: r.culture_label.clone(),
            energy_data: subspace_energy(&x.view(), &basis.view()),
            energy_baseline: energy_after(model, &x, &basis, &[], 0.0)?,
            energy_masked_topk: energy_after(model, &x, &basis, &r.selected, -1.0)?,
            energy_masked_random: energy_after(model, &x, &basis, &random, -1.0)?,
            selected: r.selected.clone(),
            random,
        });
    }
    let total = |f: fn(&CultureMasking) -> f64| cultures.iter().map(f).sum::<f64>();
    let data = total(|c| c.energy_data);
    let score = |e: f64| if data > 0.0 { 100.0 * e / data } else { 0.0 };
    let report = ablation_report(
        score(total(|c| c.energy_baseline)),
        score(total(|c| c.energy_masked_topk)),
        score(total(|c| c.energy_masked_random)),
    );
    Ok(MaskValidation { report, cultures })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topk_sae::init_sae;
    use ndarray::{array, Array1, Array3};

    fn toy() -> SaeModel {
        let mut m = init_sae(2, 2, 2, 0).unwrap();
        m.w_enc = array![[1.0, 0.0], [0.0, 1.0]];
        m.w_dec = array![[0.6, 0.8], [-0.8, 0.6]];
        m.b_dec = Array1::from(vec![0.25, -0.5]);
        m
    }

    #[test]
    fn closed_form_single_latent_shift() {
        let m = toy();
        let f = array![[1.5f32, 2.0]].into_dyn();
        let base = amplify(&m, &f.view(), &[], 0.0).unwrap();
        let amp = amplify(&m, &f.view(), &[0], 1.0).unwrap();
        let z0 = 1.5f32;
        for j in 0..2 {
            assert!((amp[[0, j]] - base[[0, j]] - z0 * m.w_dec[[0, j]]).abs() < 1e-6);
        }
    }

    #[test]
    fn identities() {
        let m = init_sae(6, 16, 4, 3).unwrap();
        let f = Array3::from_shape_fn((2, 3, 6), |(a, b, c)| ((a * 7 + b * 3 + c) as f32 * 0.37).sin()).into_dyn();
        let plain = m.reconstruct(&f.view().into_shape_with_order((6, 6)).unwrap()).unwrap();
        let zero = amplify(&m, &f.view(), &[1, 5], 0.0).unwrap();
        assert_eq!(zero.shape(), &[2, 3, 6]);
        assert_eq!(zero.as_slice().unwrap(), plain.as_slice().unwrap());
        let empty = amplify(&m, &f.view(), &[], 5.0).unwrap();
        assert_eq!(empty, zero);
        let all: Vec<usize> = (0..16).collect();
        let masked = mask(&m, &f.view(), &all).unwrap();
        for row in masked.into_shape_with_order((6, 6)).unwrap().rows() {
            assert_eq!(row, m.b_dec);
        }
        let a = mask(&m, &f.view(), &[2, 3]).unwrap();
        let b = amplify(&m, &f.view(), &[2, 3], -1.0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn validation() {
        let m = init_sae(6, 16, 4, 3).unwrap();
        let f = Array2::<f32>::zeros((2, 6)).into_dyn();
        assert!(matches!(amplify(&m, &f.view(), &[16], 1.0), Err(InterventionError::IndexOutOfRange { index: 16, .. })));
        assert!(matches!(amplify(&m, &f.view(), &[0], -1.5), Err(InterventionError::BadLambda(_))));
        let wrong = Array2::<f32>::zeros((2, 5)).into_dyn();
        assert!(matches!(amplify(&m, &wrong.view(), &[], 1.0), Err(InterventionError::FeatureDim { expected: 6, got: 5 })));
    }

    #[test]
    fn random_sets() {
        assert!(random_neuron_set(0, 10, &[], 1).unwrap().is_empty());
        let a = random_neuron_set(5, 100, &[1, 2, 3], 9).unwrap();
        assert_eq!(a, random_neuron_set(5, 100, &[1, 2, 3], 9).unwrap());
        assert!(a.iter().all(|m| ![1, 2, 3].contains(m)));
        assert!(matches!(random_neuron_set(8, 10, &[0, 1, 2], 0), Err(InterventionError::SetTooLarge { size: 8, available: 7 })));
    }

    #[test]
    fn random_sets_are_uniform() {
        let mut counts = [0usize; 100];
        for seed in 0..1000 {
            for m in random_neuron_set(5, 100, &[], seed).unwrap() {
                counts[m] += 1;
            }
        }
        for (m, &c) in counts.iter().enumerate() {
            let freq = c as f64 / 1000.0;
            assert!((freq - 0.05).abs() <= 0.02, "index {m}: {freq}");
        }
    }

    #[test]
    fn ablation_deltas() {
        let r = ablation_report(35.62, 7.65, 33.04);
        assert_eq!(r.masked_topk.delta, -27.97);
        assert_eq!(r.masked_random.delta, -2.58);
        assert_eq!(r.masked_topk.format(), "7.65 (-27.97)");
        assert_eq!(r.masked_random.format(), "33.04 (-2.58)");
        let r = ablation_report(44.54, 12.04, 42.45);
        assert_eq!(r.masked_topk.delta, -32.50);
        assert_eq!(r.masked_random.delta, -2.09);
        assert_eq!(r.masked_topk.format(), "12.04 (-32.50)");
        let same = ablation_report(3.0, 3.0, 3.0);
        assert_eq!(same.masked_topk.format(), "3.00 (0.00)");
    }

    #[test]
    fn subspace_energy_of_basis_rows() {
        let basis = array![[1.0f32, 0.0, 0.0], [0.0, 1.0, 0.0]];
        let x = array![[3.0f32, 4.0, 12.0]];
        assert_eq!(subspace_energy(&x.view(), &basis.view()), 25.0);
    }
}
