//! SAE input features and their on-disk container.
//!
//! Trace features are the head-averaged modifier-to-noun attention block of
//! one layer, flattened row-major into a fixed `max_tc x max_tn` grid. Pairs
//! with fewer tokens are zero-padded and carry a validity mask. Noun-only
//! prompts use the surrogate modifier positions of [`TokenGroups`].

use std::path::Path;

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::layer_scan::{head_average, AttentionView, ScanError};
use crate::synth_fixtures::{CulturePlant, SparseDataset};
use crate::trace_store::{self, Condition, ContainerManifest, StoreError, TensorDecl, TensorEntry, TokenGroups, TraceBundle};

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("layer {layer} out of range for {n_layers} layers")]
    LayerOutOfRange { layer: usize, n_layers: usize },
    #[error("bundle has no prompt pairs")]
    NoPairs,
    #[error("missing attention tensor for pair {pair_id:?} ({condition}) at layer {layer}")]
    MissingTensor { pair_id: String, condition: Condition, layer: usize },
    #[error("token groups exceed the feature grid {max_tc}x{max_tn}")]
    GridOverflow { max_tc: usize, max_tn: usize },
    #[error("feature file: {0}")]
    File(String),
    #[error(transparent)]
    Scan(#[from] ScanError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

impl FeatureError {
    pub fn is_validation(&self) -> bool {
        match self {
            FeatureError::Store(e) => e.is_validation(),
            _ => true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureGrid {
    pub max_tc: usize,
    pub max_tn: usize,
}

impl FeatureGrid {
    pub fn d_in(&self) -> usize {
        self.max_tc * self.max_tn
    }

    /// Smallest grid holding every pair of the bundle under both conditions.
    pub fn for_bundle(bundle: &TraceBundle) -> Self {
        let mut g = FeatureGrid { max_tc: 1, max_tn: 1 };
        for a in &bundle.manifest.annotations {
            for c in [Condition::Cult, Condition::Noun] {
                let groups = a.groups(c);
                g.max_tc = g.max_tc.max(groups.modifier_positions().len());
                g.max_tn = g.max_tn.max(groups.t_noun.len());
            }
        }
        g
    }
}

/// Per-batch feature rows and the shared validity mask for one prompt.
pub fn prompt_features(
    entry: &TensorEntry,
    groups: &TokenGroups,
    grid: FeatureGrid,
) -> Result<(Array2<f32>, Vec<f32>), FeatureError> {
    let rows = groups.modifier_positions();
    if rows.len() > grid.max_tc || groups.t_noun.len() > grid.max_tn {
        return Err(FeatureError::GridOverflow { max_tc: grid.max_tc, max_tn: grid.max_tn });
    }
    let avg = head_average(&AttentionView::from_entry(entry)?)?;
    let mut out = Array2::<f32>::zeros((avg.batch, grid.d_in()));
    let mut mask = vec![0.0f32; grid.d_in()];
    for (i, &r) in rows.iter().enumerate() {
        for (j, &c) in groups.t_noun.iter().enumerate() {
            if r >= avg.seq || c >= avg.seq {
                return Err(FeatureError::Scan(ScanError::IndexOutOfRange {
                    group: "feature",
                    index: r.max(c),
                    seq_len: avg.seq,
                }));
            }
            let slot = i * grid.max_tn + j;
            mask[slot] = 1.0;
            for b in 0..avg.batch {
                out[[b, slot]] = avg.get(b, r, c) as f32;
            }
        }
    }
    Ok((out, mask))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RowLabel {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pair_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub culture: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub condition: Option<Condition>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FeatureSource {
    Traces { layer: usize, grid: FeatureGrid },
    Synthetic,
}

/// Generative truth carried by synthetic feature sets.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantedTruth {
    pub dictionary: Array2<f32>,
    pub codes: Array2<f32>,
    pub cultures: Vec<CulturePlant>,
    pub shared_latents: Vec<usize>,
}

impl PlantedTruth {
    pub fn culture_atoms(&self, label: &str) -> Option<Array2<f32>> {
        let plant = self.cultures.iter().find(|c| c.label == label)?;
        Some(self.dictionary.select(Axis(0), &plant.latents))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    /// `n x d_in`.
    pub data: Array2<f32>,
    /// Validity of each column per row, present for trace features.
    pub mask: Option<Array2<f32>>,
    pub rows: Vec<RowLabel>,
    pub source: FeatureSource,
    pub planted: Option<PlantedTruth>,
}

impl FeatureSet {
    pub fn d_in(&self) -> usize {
        self.data.ncols()
    }

    /// Culture labels in order of first appearance.
    pub fn cultures(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for c in self.rows.iter().filter_map(|r| r.culture.as_ref()) {
            if !out.contains(c) {
                out.push(c.clone());
            }
        }
        out
    }

    pub fn rows_where(&self, culture: &str, condition: Condition) -> Vec<usize> {
        self.rows
            .iter()
            .enumerate()
            .filter(|(_, r)| r.culture.as_deref() == Some(culture) && r.condition == Some(condition))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn select(&self, rows: &[usize]) -> Array2<f32> {
        self.data.select(Axis(0), rows)
    }

    /// Same labels and truth with replaced feature rows.
    pub fn with_data(&self, data: Array2<f32>) -> FeatureSet {
        FeatureSet { data, ..self.clone() }
    }
}

/// Features of every pair and condition at `layer`, one row per batch element.
pub fn from_traces(bundle: &TraceBundle, layer: usize) -> Result<FeatureSet, FeatureError> {
    let m = &bundle.manifest;
    if layer >= m.n_layers {
        return Err(FeatureError::LayerOutOfRange { layer, n_layers: m.n_layers });
    }
    if m.annotations.is_empty() {
        return Err(FeatureError::NoPairs);
    }
    let grid = FeatureGrid::for_bundle(bundle);
    let mut blocks = Vec::new();
    let mut masks = Vec::new();
    let mut rows = Vec::new();
    for a in &m.annotations {
        for condition in [Condition::Cult, Condition::Noun] {
            let entry = bundle.attention(layer, condition, &a.pair_id).ok_or_else(|| FeatureError::MissingTensor {
                pair_id: a.pair_id.clone(),
                condition,
                layer,
            })?;
            let (f, mask) = prompt_features(entry, a.groups(condition), grid)?;
            for _ in 0..f.nrows() {
                rows.push(RowLabel {
                    pair_id: Some(a.pair_id.clone()),
                    culture: Some(a.culture_label.clone()),
                    condition: Some(condition),
                });
                masks.push(mask.clone());
            }
            blocks.push(f);
        }
    }
    let views: Vec<_> = blocks.iter().map(|b| b.view()).collect();
    let data = ndarray::concatenate(Axis(0), &views).expect("equal widths");
    let mask = Array2::from_shape_vec((rows.len(), grid.d_in()), masks.concat()).expect("mask shape");
    Ok(FeatureSet {
        data,
        mask: Some(mask),
        rows,
        source: FeatureSource::Traces { layer, grid },
        planted: None,
    })
}

/// Wraps a planted sparse dataset; labels carry culture names.
pub fn from_sparse(ds: &SparseDataset) -> FeatureSet {
    let rows = if ds.labels.is_empty() {
        vec![RowLabel { pair_id: None, culture: None, condition: None }; ds.data.nrows()]
    } else {
        ds.labels
            .iter()
            .map(|l| RowLabel {
                pair_id: None,
                culture: Some(ds.cultures[l.culture].label.clone()),
                condition: Some(l.condition),
            })
            .collect()
    };
    FeatureSet {
        data: ds.data.clone(),
        mask: None,
        rows,
        source: FeatureSource::Synthetic,
        planted: Some(PlantedTruth {
            dictionary: ds.dictionary.clone(),
            codes: ds.codes.clone(),
            cultures: ds.cultures.clone(),
            shared_latents: ds.shared_latents.clone(),
        }),
    }
}

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMeta {
    pub d_in: usize,
    pub n_rows: usize,
    pub source: FeatureSource,
    pub rows: Vec<RowLabel>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub cultures: Vec<CulturePlant>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub shared_latents: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct FeatureFile {
    feature_manifest: FeatureMeta,
    tensors: Vec<TensorDecl>,
}

impl ContainerManifest for FeatureFile {
    fn tensor_decls(&self) -> &[TensorDecl] {
        &self.tensors
    }
}

fn matrix_entry(name: &str, a: &Array2<f32>) -> TensorEntry {
    let data = a.as_standard_layout().iter().copied().collect();
    TensorEntry::new(name, vec![a.nrows() as u64, a.ncols() as u64], data).expect("matrix shape")
}

pub fn encode_features(fs: &FeatureSet) -> Result<Vec<u8>, FeatureError> {
    let mut tensors = vec![matrix_entry("features", &fs.data)];
    if let Some(mask) = &fs.mask {
        tensors.push(matrix_entry("mask", mask));
    }
    if let Some(p) = &fs.planted {
        tensors.push(matrix_entry("dictionary", &p.dictionary));
        tensors.push(matrix_entry("codes", &p.codes));
    }
    let file = FeatureFile {
        feature_manifest: FeatureMeta {
            d_in: fs.d_in(),
            n_rows: fs.data.nrows(),
            source: fs.source.clone(),
            rows: fs.rows.clone(),
            cultures: fs.planted.as_ref().map(|p| p.cultures.clone()).unwrap_or_default(),
            shared_latents: fs.planted.as_ref().map(|p| p.shared_latents.clone()).unwrap_or_default(),
        },
        tensors: tensors.iter().map(|t| t.decl(None)).collect(),
    };
    Ok(trace_store::encode_container(&file, &tensors)?)
}

pub fn decode_features(bytes: &[u8]) -> Result<FeatureSet, FeatureError> {
    let (file, tensors) = trace_store::decode_container::<FeatureFile>(bytes)?;
    let meta = file.feature_manifest;
    if meta.rows.len() != meta.n_rows {
        return Err(FeatureError::File(format!("{} row labels for {} rows", meta.rows.len(), meta.n_rows)));
    }
    let mut named: std::collections::BTreeMap<String, TensorEntry> =
        tensors.into_iter().map(|t| (t.name.clone(), t)).collect();
    let mut take = |name: &str, rows: Option<usize>, cols: Option<usize>| -> Result<Option<Array2<f32>>, FeatureError> {
        let Some(t) = named.remove(name) else { return Ok(None) };
        let dims = t.dims_usize();
        let ok = dims.len() == 2 && rows.is_none_or(|r| dims[0] == r) && cols.is_none_or(|c| dims[1] == c);
        if !ok {
            return Err(FeatureError::File(format!("tensor {name:?} has dims {:?}", t.dims)));
        }
        Ok(Some(Array2::from_shape_vec((dims[0], dims[1]), t.data).expect("checked dims")))
    };
    let data = take("features", Some(meta.n_rows), Some(meta.d_in))?
        .ok_or_else(|| FeatureError::File("missing tensor \"features\"".into()))?;
    let mask = take("mask", Some(meta.n_rows), Some(meta.d_in))?;
    let dictionary = take("dictionary", None, Some(meta.d_in))?;
    let codes = take("codes", Some(meta.n_rows), dictionary.as_ref().map(|d| d.nrows()))?;
    let planted = match (dictionary, codes) {
        (Some(dictionary), Some(codes)) => Some(PlantedTruth {
            dictionary,
            codes,
            cultures: meta.cultures,
            shared_latents: meta.shared_latents,
        }),
        (None, None) => None,
        _ => return Err(FeatureError::File("dictionary and codes must appear together".into())),
    };
    if let Some(extra) = named.keys().next() {
        return Err(FeatureError::File(format!("unexpected tensor {extra:?}")));
    }
    Ok(FeatureSet { data, mask, rows: meta.rows, source: meta.source, planted })
}

pub fn save_features(fs: &FeatureSet, path: &Path) -> Result<u64, FeatureError> {
    let bytes = encode_features(fs)?;
    std::fs::write(path, &bytes).map_err(|source| StoreError::Io { path: path.display().to_string(), source })?;
    Ok(bytes.len() as u64)
}

pub fn load_features(path: &Path) -> Result<FeatureSet, FeatureError> {
    let bytes = std::fs::read(path).map_err(|source| StoreError::Io { path: path.display().to_string(), source })?;
    decode_features(&bytes)
}
