//! Synthetic traces and SAE datasets with planted ground truth.
//!
//! Trace fixtures are softmax attention over Gaussian logits. At the planted
//! layer, cultural prompts get extra mass on their modifier-to-noun cells,
//! after which the touched rows are renormalized. Sparse datasets are
//! `x = z D` with a unit-atom dictionary and nonnegative sparse codes;
//! labeled samples additionally fire their culture's planted atoms.

use ndarray::{Array1, Array2};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::layer_enhancer::{pipeline_forward, EnhancerModel, Sample, ToyPipeline};
use crate::numeric::derive_seed;
use crate::trace_store::{
    AttentionDirection, AttentionStage, Condition, Manifest, PromptPairAnnotation, TensorEntry, TensorKey, TokenGroups,
    TraceBundle,
};

#[derive(Debug, Error, PartialEq)]
pub enum FixtureError {
    #[error("invalid fixture spec: {0}")]
    Spec(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CulturePlant {
    pub label: String,
    /// Atom indices fired only by this culture's cultural samples.
    pub latents: Vec<usize>,
}

/// Sparse-dataset part of a fixture spec.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseSpec {
    pub d_in: usize,
    pub n_atoms: usize,
    /// Background atoms active in every sample.
    pub k_background: usize,
    pub n_samples: usize,
    /// Atoms fired by both conditions (noun-side concepts).
    #[serde(default)]
    pub shared_latents: Vec<usize>,
    #[serde(default = "default_fire_prob")]
    pub culture_fire_prob: f64,
    #[serde(default = "default_fire_prob")]
    pub shared_fire_prob: f64,
    #[serde(default)]
    pub noise_scale: f64,
    pub seed: u64,
}

fn default_fire_prob() -> f64 {
    0.7
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantSpec {
    pub n_layers: usize,
    pub n_heads: usize,
    pub seq_len: usize,
    pub batch: usize,
    pub planted_layer: usize,
    pub boost: f64,
    pub n_pairs: usize,
    pub cultures: Vec<CulturePlant>,
    pub noise_scale: f64,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sae_dataset: Option<SparseSpec>,
}

impl PlantSpec {
    /// 12 layers, boost 0.3 at layer 5, 32 pairs over two cultures.
    pub fn standard(seed: u64) -> Self {
        PlantSpec {
            n_layers: 12,
            n_heads: 4,
            seq_len: 8,
            batch: 2,
            planted_layer: 5,
            boost: 0.3,
            n_pairs: 32,
            cultures: vec![
                CulturePlant { label: "chinese".into(), latents: vec![0, 1, 2] },
                CulturePlant { label: "japanese".into(), latents: vec![3, 4, 5] },
            ],
            noise_scale: 1.0,
            seed,
            sae_dataset: None,
        }
    }

    pub fn validate(&self) -> Result<(), FixtureError> {
        let fail = |m: String| Err(FixtureError::Spec(m));
        if self.n_layers == 0 || self.n_heads == 0 || self.batch == 0 || self.n_pairs == 0 {
            return fail("n_layers, n_heads, batch and n_pairs must be at least 1".into());
        }
        if self.seq_len < 5 {
            return fail(format!("seq_len {} too short for BOS + 2 modifiers + 2 nouns", self.seq_len));
        }
        if self.planted_layer >= self.n_layers {
            return fail(format!("planted_layer {} >= n_layers {}", self.planted_layer, self.n_layers));
        }
        if !(self.boost >= 0.0 && self.boost.is_finite()) {
            return fail(format!("boost {} must be finite and >= 0", self.boost));
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return fail(format!("noise_scale {} must be finite and >= 0", self.noise_scale));
        }
        if self.cultures.is_empty() {
            return fail("at least one culture is required".into());
        }
        check_disjoint(&self.cultures, &[])?;
        Ok(())
    }
}

fn check_disjoint(cultures: &[CulturePlant], shared: &[usize]) -> Result<(), FixtureError> {
    let mut seen = std::collections::BTreeMap::new();
    let groups = cultures
        .iter()
        .map(|c| (c.label.as_str(), c.latents.as_slice()))
        .chain(std::iter::once(("shared", shared)));
    for (owner, latents) in groups {
        for &l in latents {
            if let Some(prev) = seen.insert(l, owner) {
                return Err(FixtureError::Spec(format!("latent {l} planted for both {prev:?} and {owner:?}")));
            }
        }
    }
    Ok(())
}

/// Modifier-to-noun cells boosted for one pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoostedCells {
    pub pair_id: String,
    pub rows: Vec<usize>,
    pub cols: Vec<usize>,
}

/// Everything needed to recompute the planted quantities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub spec: PlantSpec,
    pub planted_layer: usize,
    pub boost: f64,
    pub boosted: Vec<BoostedCells>,
    pub culture_latents: Vec<CulturePlant>,
}

const NOUNS: [&str; 6] = ["house", "dress", "meal", "temple", "festival", "garden"];

fn softmax_rows(logits: &mut [f32], seq: usize) {
    for row in logits.chunks_mut(seq) {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0f64;
        for v in row.iter_mut() {
            let e = f64::from(*v - max).exp();
            *v = e as f32;
            sum += e;
        }
        row.iter_mut().for_each(|v| *v = (f64::from(*v) / sum) as f32);
    }
}

/// Builds the planted trace bundle and its ground-truth record.
pub fn make_planted_traces(spec: &PlantSpec) -> Result<(TraceBundle, GroundTruth), FixtureError> {
    spec.validate()?;
    let (s, h, b) = (spec.seq_len, spec.n_heads, spec.batch);
    let mut layout_rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &[0xA11]));
    let mut annotations = Vec::with_capacity(spec.n_pairs);
    for i in 0..spec.n_pairs {
        let culture = &spec.cultures[i % spec.cultures.len()].label;
        let n_mod = layout_rng.random_range(1..=2usize);
        let n_noun = layout_rng.random_range(1..=2usize);
        let noun_word = NOUNS[layout_rng.random_range(0..NOUNS.len())];
        let t_cult: Vec<usize> = (1..=n_mod).collect();
        let t_noun: Vec<usize> = (n_mod + 1..=n_mod + n_noun).collect();
        annotations.push(PromptPairAnnotation {
            pair_id: format!("p{i:03}"),
            culture_label: culture.clone(),
            cult_prompt_text: format!("{culture} style {noun_word}"),
            noun_prompt_text: noun_word.to_string(),
            cult: TokenGroups { t_cult, t_noun, seq_len: s },
            noun: TokenGroups {
                t_cult: vec![],
                t_noun: (1..=n_noun).collect(),
                seq_len: s,
            },
        });
    }

    let mut keyed = Vec::with_capacity(spec.n_layers * 2 * spec.n_pairs);
    let mut boosted = Vec::new();
    for layer in 0..spec.n_layers {
        for (ci, cond) in [Condition::Cult, Condition::Noun].into_iter().enumerate() {
            for (pi, a) in annotations.iter().enumerate() {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &[layer as u64, ci as u64, pi as u64]));
                let mut data: Vec<f32> = (0..b * h * s * s)
                    .map(|_| (spec.noise_scale * rng.sample::<f64, _>(StandardNormal)) as f32)
                    .collect();
                softmax_rows(&mut data, s);
                if layer == spec.planted_layer && cond == Condition::Cult && spec.boost > 0.0 {
                    for plane in data.chunks_mut(s * s) {
                        for &r in &a.cult.t_cult {
                            let row = &mut plane[r * s..(r + 1) * s];
                            for &c in &a.cult.t_noun {
                                row[c] = (f64::from(row[c]) + spec.boost) as f32;
                            }
                            let sum: f64 = row.iter().map(|&v| f64::from(v)).sum();
                            row.iter_mut().for_each(|v| *v = (f64::from(*v) / sum) as f32);
                        }
                    }
                    boosted.push(BoostedCells {
                        pair_id: a.pair_id.clone(),
                        rows: a.cult.t_cult.clone(),
                        cols: a.cult.t_noun.clone(),
                    });
                }
                let key = TensorKey::attention(layer, cond, a.pair_id.clone());
                let entry = TensorEntry::new(key.canonical_name(), vec![b as u64, h as u64, s as u64, s as u64], data)
                    .expect("dims agree");
                keyed.push((Some(key), entry));
            }
        }
    }
    let manifest = Manifest {
        model_name: "planted-fixture".into(),
        n_layers: spec.n_layers,
        n_heads: h,
        seq_len: s,
        batch: b,
        hidden_dim: None,
        attention_stage: AttentionStage::PostSoftmax,
        direction: AttentionDirection::RowAttendsToColumn,
        noun_surrogate: "bos".into(),
        cultures: spec.cultures.iter().map(|c| c.label.clone()).collect(),
        annotations,
        tensors: vec![],
    };
    let bundle = TraceBundle::from_keyed(manifest, keyed);
    let truth = GroundTruth {
        spec: spec.clone(),
        planted_layer: spec.planted_layer,
        boost: spec.boost,
        boosted,
        culture_latents: spec.cultures.clone(),
    };
    Ok((bundle, truth))
}

/// Which condition and culture produced a sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleLabel {
    pub condition: Condition,
    pub culture: usize,
}

/// Full generative state of a planted sparse dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseDataset {
    /// `n x d_in`.
    pub data: Array2<f32>,
    /// `n_atoms x d_in`, unit rows.
    pub dictionary: Array2<f32>,
    /// `n x n_atoms`, nonnegative.
    pub codes: Array2<f32>,
    /// Empty when no cultures were planted.
    pub labels: Vec<SampleLabel>,
    pub cultures: Vec<CulturePlant>,
    pub shared_latents: Vec<usize>,
}

impl SparseDataset {
    /// Rows with the given culture and condition.
    pub fn rows_where(&self, culture: usize, condition: Condition) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, l)| l.culture == culture && l.condition == condition)
            .map(|(i, _)| i)
            .collect()
    }

    /// The planted atoms of one culture, `m x d_in`.
    pub fn culture_atoms(&self, culture: usize) -> Array2<f32> {
        self.dictionary.select(ndarray::Axis(0), &self.cultures[culture].latents)
    }
}

fn unit_gaussian(rng: &mut ChaCha8Rng, d: usize) -> Array1<f64> {
    loop {
        let v = Array1::from_shape_fn(d, |_| rng.sample::<f64, _>(StandardNormal));
        let n = v.dot(&v).sqrt();
        if n > 1e-9 {
            return v / n;
        }
    }
}

/// Orthonormal basis of `R^d` from Gram-Schmidt on Gaussian vectors.
fn random_orthonormal(rng: &mut ChaCha8Rng, d: usize) -> Vec<Array1<f64>> {
    let mut basis: Vec<Array1<f64>> = Vec::with_capacity(d);
    while basis.len() < d {
        let mut v = unit_gaussian(rng, d);
        for b in &basis {
            let p = v.dot(b);
            v.scaled_add(-p, b);
        }
        let n = v.dot(&v).sqrt();
        if n > 1e-6 {
            basis.push(v / n);
        }
    }
    basis
}

/// Generates `x = z D (+ noise)`.
///
/// Without cultures every sample has exactly `k_background` active atoms and
/// `D` has i.i.d. Gaussian unit rows. With cultures, culture atoms are an
/// orthonormal set orthogonal to every other atom, so the energy of a
/// reconstruction inside a culture's span measures that culture's signal.
/// If additionally `n_atoms <= d_in`, the whole dictionary is orthonormal.
pub fn make_sparse_dataset(spec: &SparseSpec, cultures: &[CulturePlant]) -> Result<SparseDataset, FixtureError> {
    let fail = |m: String| Err(FixtureError::Spec(m));
    if spec.d_in == 0 || spec.n_atoms == 0 || spec.n_samples == 0 {
        return fail("d_in, n_atoms and n_samples must be at least 1".into());
    }
    check_disjoint(cultures, &spec.shared_latents)?;
    let planted: Vec<usize> = cultures.iter().flat_map(|c| c.latents.iter().copied()).collect();
    if let Some(&bad) = planted.iter().chain(&spec.shared_latents).find(|&&l| l >= spec.n_atoms) {
        return fail(format!("latent {bad} >= n_atoms {}", spec.n_atoms));
    }
    let is_special = |j: usize| planted.contains(&j) || spec.shared_latents.contains(&j);
    let background: Vec<usize> = (0..spec.n_atoms).filter(|&j| !is_special(j)).collect();
    if spec.k_background > background.len() {
        return fail(format!(
            "k_background {} exceeds the {} background atoms",
            spec.k_background,
            background.len()
        ));
    }
    if !cultures.is_empty() && planted.len() >= spec.d_in {
        return fail(format!("{} culture atoms need d_in > {}", planted.len(), planted.len()));
    }
    for p in [spec.culture_fire_prob, spec.shared_fire_prob] {
        if !(0.0..=1.0).contains(&p) {
            return fail(format!("fire probability {p} outside [0, 1]"));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let d = spec.d_in;
    let mut dictionary = Array2::<f64>::zeros((spec.n_atoms, d));
    if cultures.is_empty() {
        for mut row in dictionary.rows_mut() {
            row.assign(&unit_gaussian(&mut rng, d));
        }
    } else {
        let basis = random_orthonormal(&mut rng, d);
        let (culture_basis, rest) = basis.split_at(planted.len());
        for (&atom, b) in planted.iter().zip(culture_basis) {
            dictionary.row_mut(atom).assign(b);
        }
        let mut spare = rest.iter();
        for j in (0..spec.n_atoms).filter(|j| !planted.contains(j)) {
            if spec.n_atoms <= d {
                dictionary.row_mut(j).assign(spare.next().expect("n_atoms <= d_in"));
                continue;
            }
            let coeffs = unit_gaussian(&mut rng, rest.len());
            let mut v = Array1::<f64>::zeros(d);
            for (c, b) in coeffs.iter().zip(rest) {
                v.scaled_add(*c, b);
            }
            dictionary.row_mut(j).assign(&v);
        }
    }

    let n = spec.n_samples;
    let mut codes = Array2::<f64>::zeros((n, spec.n_atoms));
    let mut labels = Vec::new();
    for i in 0..n {
        let mut row = codes.row_mut(i);
        for idx in sample(&mut rng, background.len(), spec.k_background).into_iter() {
            row[background[idx]] = rng.random_range(0.5..1.5);
        }
        if cultures.is_empty() {
            continue;
        }
        let label = SampleLabel {
            culture: i % cultures.len(),
            condition: if (i / cultures.len()).is_multiple_of(2) { Condition::Cult } else { Condition::Noun },
        };
        for &j in &spec.shared_latents {
            if rng.random_bool(spec.shared_fire_prob) {
                row[j] = rng.random_range(1.0..2.0);
            }
        }
        if label.condition == Condition::Cult {
            for &j in &cultures[label.culture].latents {
                if rng.random_bool(spec.culture_fire_prob) {
                    row[j] = rng.random_range(1.0..2.0);
                }
            }
        }
        labels.push(label);
    }
    let mut data = codes.dot(&dictionary);
    if spec.noise_scale > 0.0 {
        data.mapv_inplace(|v| v + spec.noise_scale * rng.sample::<f64, _>(StandardNormal));
    }
    let f32s = |a: Array2<f64>| a.mapv(|v| v as f32);
    Ok(SparseDataset {
        data: f32s(data),
        dictionary: f32s(dictionary),
        codes: f32s(codes),
        labels,
        cultures: cultures.to_vec(),
        shared_latents: spec.shared_latents.clone(),
    })
}

/// Training pairs whose targets come from a hidden adapter.
#[derive(Debug, Clone, PartialEq)]
pub struct EnhancerTask {
    pub target: EnhancerModel,
    pub samples: Vec<Sample>,
}

/// Targets are the pipeline outputs under `init` with `W2` replaced by a
/// random `N(0, 1/d_mid)` matrix, so the optimum is reachable from `init`.
pub fn make_enhancer_task(
    pipe: &ToyPipeline,
    init: &EnhancerModel,
    n_samples: usize,
    seed: u64,
) -> Result<EnhancerTask, FixtureError> {
    if n_samples == 0 {
        return Err(FixtureError::Spec("n_samples must be positive".into()));
    }
    let mut target = init.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0xE4]));
    let std = 1.0 / (init.d_mid as f64).sqrt();
    target.w2.mapv_inplace(|_| std * rng.sample::<f64, _>(StandardNormal));
    let samples = (0..n_samples)
        .map(|i| {
            let prompt = pipe.random_prompt(derive_seed(seed, &[i as u64]));
            let target_image = pipeline_forward(pipe, Some(&target), &prompt.view()).map_err(|e| FixtureError::Spec(e.to_string()))?;
            Ok(Sample { prompt, target: target_image })
        })
        .collect::<Result<_, FixtureError>>()?;
    Ok(EnhancerTask { target, samples })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layer_scan::{scan_layers, SelectionRule};

    #[test]
    fn planted_layer_is_recovered() {
        let (bundle, truth) = make_planted_traces(&PlantSpec::standard(1)).unwrap();
        let scan = scan_layers(&bundle, &SelectionRule::default()).unwrap();
        assert_eq!(scan.sensitive_layers, vec![truth.planted_layer]);
        let peak = scan.delta_ca[5];
        for (l, &d) in scan.delta_ca.iter().enumerate() {
            if l != 5 {
                assert!(peak >= 3.0 * d.abs(), "layer {l}: {d} vs peak {peak}");
            }
        }
    }

    #[test]
    fn zero_boost_leaves_no_signal() {
        let spec = PlantSpec { boost: 0.0, ..PlantSpec::standard(4) };
        let (bundle, _) = make_planted_traces(&spec).unwrap();
        let scan = scan_layers(&bundle, &SelectionRule::default()).unwrap();
        let l = spec.planted_layer;
        assert!(scan.delta_ca[l].abs() < 3.0 * scan.delta_stderr[l], "{} vs {}", scan.delta_ca[l], scan.delta_stderr[l]);
    }

    #[test]
    fn seeds_change_tensors_not_the_selected_layer() {
        let (a, _) = make_planted_traces(&PlantSpec::standard(2)).unwrap();
        let (b, _) = make_planted_traces(&PlantSpec::standard(3)).unwrap();
        assert_ne!(a.tensors[0].data, b.tensors[0].data);
        let rule = SelectionRule::default();
        assert_eq!(scan_layers(&a, &rule).unwrap().sensitive_layers, vec![5]);
        assert_eq!(scan_layers(&b, &rule).unwrap().sensitive_layers, vec![5]);
    }

    #[test]
    fn generation_is_deterministic_and_stochastic_rows() {
        let spec = PlantSpec::standard(9);
        let (a, ta) = make_planted_traces(&spec).unwrap();
        let (b, tb) = make_planted_traces(&spec).unwrap();
        assert!(a.bits_eq(&b));
        assert_eq!(ta, tb);
        for t in &a.tensors {
            for row in t.data.chunks(spec.seq_len) {
                let s: f64 = row.iter().map(|&v| f64::from(v)).sum();
                assert!((s - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn truth_reconstructs_the_boosted_cells() {
        let (bundle, truth) = make_planted_traces(&PlantSpec::standard(5)).unwrap();
        assert_eq!(truth.boosted.len(), truth.spec.n_pairs);
        for cells in &truth.boosted {
            let a = bundle.manifest.annotation(&cells.pair_id).unwrap();
            assert_eq!(a.cult.t_cult, cells.rows);
            assert_eq!(a.cult.t_noun, cells.cols);
        }
        let (again, _) = make_planted_traces(&truth.spec).unwrap();
        assert!(again.bits_eq(&bundle));
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let bad_layer = PlantSpec { planted_layer: 12, ..PlantSpec::standard(0) };
        assert!(make_planted_traces(&bad_layer).is_err());
        let mut overlapping = PlantSpec::standard(0);
        overlapping.cultures[1].latents = vec![2, 7];
        assert!(make_planted_traces(&overlapping).is_err());
    }

    fn sparse(n: usize, k: usize) -> SparseSpec {
        SparseSpec {
            d_in: 16,
            n_atoms: 32,
            k_background: k,
            n_samples: n,
            shared_latents: vec![],
            culture_fire_prob: 0.7,
            shared_fire_prob: 0.7,
            noise_scale: 0.0,
            seed: 3,
        }
    }

    #[test]
    fn single_sparse_sample_is_one_scaled_atom() {
        let ds = make_sparse_dataset(&sparse(1, 1), &[]).unwrap();
        let nz: Vec<usize> = (0..32).filter(|&j| ds.codes[[0, j]] != 0.0).collect();
        assert_eq!(nz.len(), 1);
        let c = ds.codes[[0, nz[0]]];
        for (x, a) in ds.data.row(0).iter().zip(ds.dictionary.row(nz[0])) {
            assert!((x - c * a).abs() < 1e-6);
        }
    }

    #[test]
    fn noiseless_data_is_exactly_generated() {
        let cultures = [CulturePlant { label: "a".into(), latents: vec![0, 1, 2] }];
        let spec = SparseSpec { shared_latents: vec![3, 4], ..sparse(64, 3) };
        let ds = make_sparse_dataset(&spec, &cultures).unwrap();
        let rec = ds.codes.dot(&ds.dictionary);
        for (a, b) in rec.iter().zip(ds.data.iter()) {
            assert!((a - b).abs() < 1e-5);
        }
        for row in ds.dictionary.rows() {
            let n: f32 = row.dot(&row);
            assert!((n - 1.0).abs() < 1e-5);
        }
        // Culture atoms are orthogonal to everything else.
        for j in 0..3 {
            for m in 3..32 {
                assert!(ds.dictionary.row(j).dot(&ds.dictionary.row(m)).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn culture_latents_fire_only_on_cultural_samples() {
        let cultures = [
            CulturePlant { label: "a".into(), latents: vec![0, 1, 2] },
            CulturePlant { label: "b".into(), latents: vec![5, 6, 7] },
        ];
        let spec = SparseSpec { shared_latents: vec![3, 4], ..sparse(400, 2) };
        let ds = make_sparse_dataset(&spec, &cultures).unwrap();
        for (i, l) in ds.labels.iter().enumerate() {
            for (ci, c) in cultures.iter().enumerate() {
                for &j in &c.latents {
                    if l.condition == Condition::Noun || l.culture != ci {
                        assert_eq!(ds.codes[[i, j]], 0.0);
                    }
                }
            }
        }
        let shared_on_noun = ds
            .rows_where(0, Condition::Noun)
            .iter()
            .filter(|&&i| ds.codes[[i, 3]] > 0.0)
            .count();
        assert!(shared_on_noun > 0);
        assert!(make_sparse_dataset(&spec, &ds.cultures).unwrap() == ds);
    }

    #[test]
    fn enhancer_task_is_reachable() {
        use crate::layer_enhancer::{dataset_loss, ToyPipelineSpec};
        let pipe = ToyPipeline::build(ToyPipelineSpec::standard(3)).unwrap();
        let init = EnhancerModel::init(16, 4, 1).unwrap();
        let task = make_enhancer_task(&pipe, &init, 4, 3).unwrap();
        assert_eq!(dataset_loss(&pipe, &task.target, &task.samples).unwrap(), 0.0);
        assert!(dataset_loss(&pipe, &init, &task.samples).unwrap() > 0.0);
        assert_eq!(task.target.w1, init.w1);
    }

}
