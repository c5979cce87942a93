//! The CPTR v1 container and the trace bundle stored in it.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "CPTR" | version: u32 | manifest_len: u64 | manifest (UTF-8 JSON)
//! then for every tensor declared in the manifest, in declaration order:
//! name_len: u32 | name | ndim: u32 | dims: u64 * ndim | dtype: u32 | payload
//! ```
//!
//! The manifest is a JSON object carrying a `tensors` array that declares
//! the name, dims and dtype of every section. Section headers are checked
//! against those declarations on load, so corrupting any structural field
//! (magic, version, lengths, dims, dtype, names) produces an error.

use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MAGIC: [u8; 4] = *b"CPTR";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic bytes {found:?}, expected \"CPTR\"")]
    BadMagic { found: Vec<u8> },
    #[error("unsupported container version {found}, expected {VERSION}")]
    UnsupportedVersion { found: u32 },
    #[error("truncated {section}: needed {needed} bytes at offset {offset}, {available} available")]
    Truncated {
        section: String,
        offset: usize,
        needed: usize,
        available: usize,
    },
    #[error("malformed manifest: {0}")]
    Manifest(String),
    #[error("tensor section {index} does not match its declaration: {detail}")]
    SectionMismatch { index: usize, detail: String },
    #[error("unknown dtype code {code} for tensor {tensor:?}")]
    UnknownDType { tensor: String, code: u32 },
    #[error("tensor {tensor:?}: payload has {actual} values but dims {dims:?} require {expected}")]
    PayloadLength {
        tensor: String,
        dims: Vec<u64>,
        expected: u64,
        actual: usize,
    },
    #[error("tensor {tensor:?}: non-finite value at element {element} (byte offset {byte_offset})")]
    NonFinite {
        tensor: String,
        element: usize,
        byte_offset: usize,
    },
    #[error("{0} trailing bytes after the last tensor section")]
    TrailingBytes(usize),
    #[error("invariant violations: {}", format_violations(.0))]
    Invariant(Vec<Violation>),
}

impl StoreError {
    /// Errors caused by bad input data rather than the environment.
    pub fn is_validation(&self) -> bool {
        !matches!(self, StoreError::Io { .. })
    }
}

fn format_violations(v: &[Violation]) -> String {
    v.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; ")
}

/// Element type code. Only 32-bit IEEE-754 floats exist in v1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DType {
    F32,
}

impl DType {
    pub const fn code(self) -> u32 {
        match self {
            DType::F32 => 0,
        }
    }

    pub fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(DType::F32),
            _ => None,
        }
    }

    pub const fn size(self) -> usize {
        match self {
            DType::F32 => 4,
        }
    }
}

/// One named, row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorEntry {
    pub name: String,
    pub dims: Vec<u64>,
    pub dtype: DType,
    pub data: Vec<f32>,
}

impl TensorEntry {
    pub fn new(name: impl Into<String>, dims: Vec<u64>, data: Vec<f32>) -> Result<Self, StoreError> {
        let entry = TensorEntry {
            name: name.into(),
            dims,
            dtype: DType::F32,
            data,
        };
        entry.check_length()?;
        Ok(entry)
    }

    pub fn numel(&self) -> Option<u64> {
        self.dims.iter().try_fold(1u64, |acc, &d| acc.checked_mul(d))
    }

    pub fn dims_usize(&self) -> Vec<usize> {
        self.dims.iter().map(|&d| d as usize).collect()
    }

    fn check_length(&self) -> Result<(), StoreError> {
        let expected = self.numel().unwrap_or(u64::MAX);
        if expected != self.data.len() as u64 {
            return Err(StoreError::PayloadLength {
                tensor: self.name.clone(),
                dims: self.dims.clone(),
                expected,
                actual: self.data.len(),
            });
        }
        Ok(())
    }

    fn check_finite(&self, payload_offset: usize) -> Result<(), StoreError> {
        match self.data.iter().position(|v| !v.is_finite()) {
            Some(element) => Err(StoreError::NonFinite {
                tensor: self.name.clone(),
                element,
                byte_offset: payload_offset + element * self.dtype.size(),
            }),
            None => Ok(()),
        }
    }

    /// Bitwise equality, distinguishing `0.0` from `-0.0`.
    pub fn bits_eq(&self, other: &TensorEntry) -> bool {
        self.name == other.name
            && self.dims == other.dims
            && self.dtype == other.dtype
            && self.data.len() == other.data.len()
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub fn decl(&self, key: Option<TensorKey>) -> TensorDecl {
        TensorDecl {
            name: self.name.clone(),
            dims: self.dims.clone(),
            dtype: self.dtype.code(),
            key,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    /// "culture-style modifier + noun" prompt.
    Cult,
    /// "noun-only" prompt.
    Noun,
}

impl Condition {
    pub fn as_str(self) -> &'static str {
        match self {
            Condition::Cult => "cult",
            Condition::Noun => "noun",
        }
    }

    pub fn other(self) -> Self {
        match self {
            Condition::Cult => Condition::Noun,
            Condition::Noun => Condition::Cult,
        }
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorKind {
    /// `B x H x S x S` post- or pre-softmax attention.
    Attention,
    /// `B x S x D` hidden states.
    Hidden,
}

/// What a trace tensor holds.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TensorKey {
    pub kind: TensorKind,
    pub layer: usize,
    pub condition: Condition,
    pub pair_id: String,
}

impl TensorKey {
    pub fn attention(layer: usize, condition: Condition, pair_id: impl Into<String>) -> Self {
        TensorKey {
            kind: TensorKind::Attention,
            layer,
            condition,
            pair_id: pair_id.into(),
        }
    }

    /// Canonical section name, e.g. `attn/L05/cult/p003`.
    pub fn canonical_name(&self) -> String {
        let kind = match self.kind {
            TensorKind::Attention => "attn",
            TensorKind::Hidden => "hidden",
        };
        format!("{kind}/L{:02}/{}/{}", self.layer, self.condition, self.pair_id)
    }
}

/// Manifest-side declaration of one tensor section.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorDecl {
    pub name: String,
    pub dims: Vec<u64>,
    pub dtype: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub key: Option<TensorKey>,
}

/// A manifest type that can frame a CPTR container.
pub trait ContainerManifest: Serialize + DeserializeOwned {
    fn tensor_decls(&self) -> &[TensorDecl];
}

/// Serializes a manifest and its tensors into CPTR bytes.
pub fn encode_container<M: ContainerManifest>(
    manifest: &M,
    tensors: &[TensorEntry],
) -> Result<Vec<u8>, StoreError> {
    let decls = manifest.tensor_decls();
    if decls.len() != tensors.len() {
        return Err(StoreError::SectionMismatch {
            index: decls.len().min(tensors.len()),
            detail: format!("{} declared, {} supplied", decls.len(), tensors.len()),
        });
    }
    for (index, (decl, entry)) in decls.iter().zip(tensors).enumerate() {
        entry.check_length()?;
        entry.check_finite(0)?;
        compare_decl(index, decl, &entry.name, &entry.dims, entry.dtype.code())?;
    }

    let manifest_bytes =
        serde_json::to_vec(manifest).map_err(|e| StoreError::Manifest(e.to_string()))?;
    let payload: usize = tensors.iter().map(|t| t.data.len() * 4 + t.name.len() + t.dims.len() * 8 + 12).sum();
    let mut out = Vec::with_capacity(16 + manifest_bytes.len() + payload);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(manifest_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&manifest_bytes);
    for t in tensors {
        out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
        out.extend_from_slice(t.name.as_bytes());
        out.extend_from_slice(&(t.dims.len() as u32).to_le_bytes());
        for d in &t.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        out.extend_from_slice(&t.dtype.code().to_le_bytes());
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

fn compare_decl(index: usize, decl: &TensorDecl, name: &str, dims: &[u64], dtype: u32) -> Result<(), StoreError> {
    if decl.name != name {
        return Err(StoreError::SectionMismatch {
            index,
            detail: format!("name {name:?} but declared {:?}", decl.name),
        });
    }
    if decl.dims != dims {
        return Err(StoreError::SectionMismatch {
            index,
            detail: format!("tensor {name:?} has dims {dims:?} but declared {:?}", decl.dims),
        });
    }
    if decl.dtype != dtype {
        return Err(StoreError::SectionMismatch {
            index,
            detail: format!("tensor {name:?} has dtype {dtype} but declared {}", decl.dtype),
        });
    }
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, section: impl FnOnce() -> String) -> Result<&'a [u8], StoreError> {
        let available = self.bytes.len() - self.pos;
        if n > available {
            return Err(StoreError::Truncated {
                section: section(),
                offset: self.pos,
                needed: n,
                available,
            });
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u32(&mut self, section: impl FnOnce() -> String) -> Result<u32, StoreError> {
        let b = self.take(4, section)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self, section: impl FnOnce() -> String) -> Result<u64, StoreError> {
        let b = self.take(8, section)?;
        let mut a = [0u8; 8];
        a.copy_from_slice(b);
        Ok(u64::from_le_bytes(a))
    }
}

/// Parses CPTR bytes, checking every section against the manifest.
pub fn decode_container<M: ContainerManifest>(bytes: &[u8]) -> Result<(M, Vec<TensorEntry>), StoreError> {
    let mut cur = Cursor { bytes, pos: 0 };
    if bytes.len() < MAGIC.len() && !MAGIC.starts_with(bytes) {
        return Err(StoreError::BadMagic { found: bytes.to_vec() });
    }
    let magic = cur.take(4, || "magic".into())?;
    if magic != MAGIC {
        return Err(StoreError::BadMagic { found: magic.to_vec() });
    }
    let version = cur.u32(|| "version".into())?;
    if version != VERSION {
        return Err(StoreError::UnsupportedVersion { found: version });
    }
    let manifest_len = cur.u64(|| "manifest length".into())?;
    let manifest_len = usize::try_from(manifest_len).map_err(|_| StoreError::Truncated {
        section: "manifest".into(),
        offset: cur.pos,
        needed: usize::MAX,
        available: bytes.len() - cur.pos,
    })?;
    let manifest_bytes = cur.take(manifest_len, || "manifest".into())?;
    let manifest: M =
        serde_json::from_slice(manifest_bytes).map_err(|e| StoreError::Manifest(e.to_string()))?;

    let mut tensors = Vec::with_capacity(manifest.tensor_decls().len());
    for (index, decl) in manifest.tensor_decls().iter().enumerate() {
        let section = || format!("tensor section {index} ({:?})", decl.name);
        let name_len = cur.u32(section)? as usize;
        let name_bytes = cur.take(name_len, section)?;
        let name = std::str::from_utf8(name_bytes).map_err(|_| StoreError::SectionMismatch {
            index,
            detail: "tensor name is not valid UTF-8".into(),
        })?;
        let ndim = cur.u32(section)? as usize;
        if ndim != decl.dims.len() {
            return Err(StoreError::SectionMismatch {
                index,
                detail: format!("tensor {name:?} has ndim {ndim} but declared {}", decl.dims.len()),
            });
        }
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(cur.u64(section)?);
        }
        let code = cur.u32(section)?;
        let dtype = DType::from_code(code).ok_or_else(|| StoreError::UnknownDType {
            tensor: name.to_string(),
            code,
        })?;
        compare_decl(index, decl, name, &dims, code)?;
        let numel = dims
            .iter()
            .try_fold(1u64, |acc, &d| acc.checked_mul(d))
            .and_then(|n| usize::try_from(n).ok())
            .and_then(|n| n.checked_mul(dtype.size()));
        let Some(payload_len) = numel else {
            return Err(StoreError::Truncated {
                section: section(),
                offset: cur.pos,
                needed: usize::MAX,
                available: bytes.len() - cur.pos,
            });
        };
        let payload_offset = cur.pos;
        let payload = cur.take(payload_len, section)?;
        let data: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let entry = TensorEntry {
            name: name.to_string(),
            dims,
            dtype,
            data,
        };
        entry.check_finite(payload_offset)?;
        tensors.push(entry);
    }
    if cur.pos != bytes.len() {
        return Err(StoreError::TrailingBytes(bytes.len() - cur.pos));
    }
    Ok((manifest, tensors))
}

pub fn write_container<M: ContainerManifest>(
    path: &Path,
    manifest: &M,
    tensors: &[TensorEntry],
) -> Result<u64, StoreError> {
    let bytes = encode_container(manifest, tensors)?;
    fs::write(path, &bytes).map_err(|source| StoreError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(bytes.len() as u64)
}

pub fn read_container<M: ContainerManifest>(path: &Path) -> Result<(M, Vec<TensorEntry>), StoreError> {
    let bytes = fs::read(path).map_err(|source| StoreError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode_container(&bytes)
}

// ---------------------------------------------------------------------------
// Trace bundles
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionStage {
    PostSoftmax,
    PreSoftmax,
}

/// Which index of an `S x S` attention matrix is the attending token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionDirection {
    /// `A[i, j]` is the attention token `i` pays to token `j`.
    RowAttendsToColumn,
    ColumnAttendsToRow,
}

/// Token groups for one prompt of a pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenGroups {
    /// Culture-modifier positions. For the noun-only prompt these are the
    /// surrogate positions occupying the modifier's slot; empty means BOS.
    pub t_cult: Vec<usize>,
    pub t_noun: Vec<usize>,
    pub seq_len: usize,
}

/// Positions used as the modifier group when a noun-only record has none.
pub const BOS_SURROGATE: [usize; 1] = [0];

impl TokenGroups {
    /// Modifier positions with the BOS surrogate applied.
    pub fn modifier_positions(&self) -> &[usize] {
        if self.t_cult.is_empty() {
            &BOS_SURROGATE
        } else {
            &self.t_cult
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptPairAnnotation {
    pub pair_id: String,
    pub culture_label: String,
    pub cult_prompt_text: String,
    pub noun_prompt_text: String,
    pub cult: TokenGroups,
    pub noun: TokenGroups,
}

impl PromptPairAnnotation {
    pub fn groups(&self, condition: Condition) -> &TokenGroups {
        match condition {
            Condition::Cult => &self.cult,
            Condition::Noun => &self.noun,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub model_name: String,
    pub n_layers: usize,
    pub n_heads: usize,
    pub seq_len: usize,
    pub batch: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hidden_dim: Option<usize>,
    pub attention_stage: AttentionStage,
    pub direction: AttentionDirection,
    /// Free-text description of how noun-only modifier slots were filled.
    pub noun_surrogate: String,
    pub cultures: Vec<String>,
    pub annotations: Vec<PromptPairAnnotation>,
    pub tensors: Vec<TensorDecl>,
}

impl ContainerManifest for Manifest {
    fn tensor_decls(&self) -> &[TensorDecl] {
        &self.tensors
    }
}

impl Manifest {
    pub fn annotation(&self, pair_id: &str) -> Option<&PromptPairAnnotation> {
        self.annotations.iter().find(|a| a.pair_id == pair_id)
    }
}

/// A single validation finding.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Violation {
    pub field: String,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

fn check_groups(out: &mut Vec<Violation>, field: String, pair_id: &str, g: &TokenGroups, max_s: usize, need_cult: bool) {
    let mut push = |suffix: &str, message: String| {
        out.push(Violation {
            field: format!("{field}.{suffix}"),
            message: format!("pair {pair_id:?}: {message}"),
        })
    };
    if g.seq_len == 0 || g.seq_len > max_s {
        push("seq_len", format!("seq_len {} outside 1..={max_s}", g.seq_len));
    }
    for (name, idx) in [("t_cult", &g.t_cult), ("t_noun", &g.t_noun)] {
        if idx.windows(2).any(|w| w[0] >= w[1]) {
            push(name, "indices must be strictly ascending".into());
        }
        if let Some(bad) = idx.iter().find(|&&i| i >= g.seq_len) {
            push(name, format!("index {bad} >= seq_len {}", g.seq_len));
        }
    }
    if need_cult && g.t_cult.is_empty() {
        push("t_cult", "must be non-empty for the cultural prompt".into());
    }
    if g.t_noun.is_empty() {
        push("t_noun", "must be non-empty".into());
    }
    let cult: BTreeSet<_> = g.t_cult.iter().collect();
    if let Some(shared) = g.t_noun.iter().find(|i| cult.contains(i)) {
        push("t_noun", format!("index {shared} also appears in t_cult"));
    }
}

/// Returns every manifest violation, sorted by field name then message.
pub fn validate_manifest(m: &Manifest) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut push = |field: &str, message: String| {
        out.push(Violation {
            field: field.to_string(),
            message,
        })
    };
    for (field, value) in [
        ("batch", m.batch),
        ("n_heads", m.n_heads),
        ("n_layers", m.n_layers),
        ("seq_len", m.seq_len),
    ] {
        if value == 0 {
            push(field, "must be at least 1".into());
        }
    }
    let mut seen = HashSet::new();
    for c in &m.cultures {
        if !seen.insert(c.as_str()) {
            push("cultures", format!("duplicate culture {c:?}"));
        }
    }

    let mut pair_ids = HashSet::new();
    for a in &m.annotations {
        if !pair_ids.insert(a.pair_id.as_str()) {
            push("annotations.pair_id", format!("duplicate pair id {:?}", a.pair_id));
        }
        if !m.cultures.iter().any(|c| c == &a.culture_label) {
            push(
                &format!("annotations[{}].culture_label", a.pair_id),
                format!("pair {:?}: culture {:?} not in taxonomy", a.pair_id, a.culture_label),
            );
        }
    }
    for a in &m.annotations {
        check_groups(&mut out, format!("annotations[{}].cult", a.pair_id), &a.pair_id, &a.cult, m.seq_len, true);
        check_groups(&mut out, format!("annotations[{}].noun", a.pair_id), &a.pair_id, &a.noun, m.seq_len, false);
    }

    let mut push = |field: &str, message: String| {
        out.push(Violation {
            field: field.to_string(),
            message,
        })
    };
    let mut names = HashSet::new();
    let mut present = HashSet::new();
    for d in &m.tensors {
        if !names.insert(d.name.as_str()) {
            push("tensors.name", format!("duplicate tensor name {:?}", d.name));
        }
        if DType::from_code(d.dtype).is_none() {
            push("tensors.dtype", format!("tensor {:?}: unknown dtype code {}", d.name, d.dtype));
        }
        let Some(key) = &d.key else { continue };
        if key.layer >= m.n_layers {
            push("tensors.key.layer", format!("tensor {:?}: layer {} >= n_layers {}", d.name, key.layer, m.n_layers));
        }
        if !pair_ids.contains(key.pair_id.as_str()) {
            push("tensors.key.pair_id", format!("tensor {:?}: unknown pair {:?}", d.name, key.pair_id));
        }
        let (b, h, s) = (m.batch as u64, m.n_heads as u64, m.seq_len as u64);
        let expected = match key.kind {
            TensorKind::Attention => Some(vec![b, h, s, s]),
            TensorKind::Hidden => m.hidden_dim.map(|hd| vec![b, s, hd as u64]),
        };
        match expected {
            Some(e) if e != d.dims => push(
                "tensors.dims",
                format!("tensor {:?}: dims {:?} disagree with declared {:?}", d.name, d.dims, e),
            ),
            None => push(
                "hidden_dim",
                format!("tensor {:?} holds hidden states but hidden_dim is undeclared", d.name),
            ),
            _ => {}
        }
        if key.kind == TensorKind::Attention {
            present.insert((key.layer, key.condition, key.pair_id.as_str()));
        }
    }
    for a in &m.annotations {
        for layer in 0..m.n_layers {
            for cond in [Condition::Cult, Condition::Noun] {
                if !present.contains(&(layer, cond, a.pair_id.as_str())) {
                    push(
                        "tensors",
                        format!(
                            "pair {:?} references missing attention tensor (layer {layer}, {cond})",
                            a.pair_id
                        ),
                    );
                }
            }
        }
    }
    out.sort();
    out
}

/// A probing run: manifest plus tensor payloads in manifest order.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceBundle {
    pub manifest: Manifest,
    pub tensors: Vec<TensorEntry>,
}

impl TraceBundle {
    /// Builds a bundle from keyed tensors, generating the declarations.
    pub fn from_keyed(mut manifest: Manifest, keyed: Vec<(Option<TensorKey>, TensorEntry)>) -> Self {
        manifest.tensors = keyed.iter().map(|(k, t)| t.decl(k.clone())).collect();
        TraceBundle {
            manifest,
            tensors: keyed.into_iter().map(|(_, t)| t).collect(),
        }
    }

    pub fn find(&self, key: &TensorKey) -> Option<&TensorEntry> {
        self.manifest
            .tensors
            .iter()
            .position(|d| d.key.as_ref() == Some(key))
            .and_then(|i| self.tensors.get(i))
    }

    pub fn attention(&self, layer: usize, condition: Condition, pair_id: &str) -> Option<&TensorEntry> {
        self.find(&TensorKey::attention(layer, condition, pair_id))
    }

    /// Bitwise equality of manifests and payloads.
    pub fn bits_eq(&self, other: &TraceBundle) -> bool {
        self.manifest == other.manifest
            && self.tensors.len() == other.tensors.len()
            && self.tensors.iter().zip(&other.tensors).all(|(a, b)| a.bits_eq(b))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, StoreError> {
        let violations = validate_manifest(&self.manifest);
        if !violations.is_empty() {
            return Err(StoreError::Invariant(violations));
        }
        encode_container(&self.manifest, &self.tensors)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, StoreError> {
        let (manifest, tensors) = decode_container::<Manifest>(bytes)?;
        let violations = validate_manifest(&manifest);
        if !violations.is_empty() {
            return Err(StoreError::Invariant(violations));
        }
        Ok(TraceBundle { manifest, tensors })
    }
}

/// Writes `bundle` to `path`, returning the number of bytes written.
pub fn write_bundle(bundle: &TraceBundle, path: &Path) -> Result<u64, StoreError> {
    let bytes = bundle.to_bytes()?;
    fs::write(path, &bytes).map_err(|source| StoreError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(bytes.len() as u64)
}

pub fn read_bundle(path: &Path) -> Result<TraceBundle, StoreError> {
    let bytes = fs::read(path).map_err(|source| StoreError::Io {
        path: path.display().to_string(),
        source,
    })?;
    TraceBundle::from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_manifest() -> Manifest {
        Manifest {
            model_name: "toy".into(),
            n_layers: 1,
            n_heads: 1,
            seq_len: 2,
            batch: 1,
            hidden_dim: None,
            attention_stage: AttentionStage::PostSoftmax,
            direction: AttentionDirection::RowAttendsToColumn,
            noun_surrogate: "bos".into(),
            cultures: vec!["chinese".into()],
            annotations: vec![PromptPairAnnotation {
                pair_id: "p0".into(),
                culture_label: "chinese".into(),
                cult_prompt_text: "Chinese house".into(),
                noun_prompt_text: "house".into(),
                cult: TokenGroups { t_cult: vec![0], t_noun: vec![1], seq_len: 2 },
                noun: TokenGroups { t_cult: vec![], t_noun: vec![1], seq_len: 2 },
            }],
            tensors: vec![],
        }
    }

    fn tiny_bundle() -> TraceBundle {
        let keyed = [Condition::Cult, Condition::Noun]
            .into_iter()
            .map(|c| {
                let key = TensorKey::attention(0, c, "p0");
                let t = TensorEntry::new(key.canonical_name(), vec![1, 1, 2, 2], vec![0.0; 4]).unwrap();
                (Some(key), t)
            })
            .collect();
        TraceBundle::from_keyed(tiny_manifest(), keyed)
    }

    #[test]
    fn zero_tensor_round_trip_has_deterministic_size() {
        let b = tiny_bundle();
        let bytes = b.to_bytes().unwrap();
        let manifest_len = serde_json::to_vec(&b.manifest).unwrap().len();
        let section = |name: &str| 4 + name.len() + 4 + 4 * 8 + 4 + 4 * 4;
        let expected = 4 + 4 + 8 + manifest_len + section("attn/L00/cult/p0") + section("attn/L00/noun/p0");
        assert_eq!(bytes.len(), expected);
        let back = TraceBundle::from_bytes(&bytes).unwrap();
        assert!(back.bits_eq(&b));
    }

    #[test]
    fn mismatched_payload_names_the_tensor() {
        let mut b = tiny_bundle();
        b.tensors[1].data.pop();
        let err = b.to_bytes().unwrap_err();
        assert!(err.to_string().contains("attn/L00/noun/p0"), "{err}");
    }

    #[test]
    fn bad_magic_is_rejected() {
        let mut bytes = tiny_bundle().to_bytes().unwrap();
        bytes[..4].copy_from_slice(b"XXXX");
        assert!(matches!(TraceBundle::from_bytes(&bytes), Err(StoreError::BadMagic { .. })));
        assert!(matches!(TraceBundle::from_bytes(b"XY"), Err(StoreError::BadMagic { .. })));
        assert!(matches!(TraceBundle::from_bytes(b"CP"), Err(StoreError::Truncated { .. })));
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let mut bytes = tiny_bundle().to_bytes().unwrap();
        bytes[4] = 2;
        assert!(matches!(
            TraceBundle::from_bytes(&bytes),
            Err(StoreError::UnsupportedVersion { found: 2 })
        ));
    }

    #[test]
    fn truncation_is_rejected() {
        let bytes = tiny_bundle().to_bytes().unwrap();
        for cut in [10, 20, bytes.len() - 1] {
            assert!(TraceBundle::from_bytes(&bytes[..cut]).is_err(), "cut at {cut}");
        }
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(TraceBundle::from_bytes(&extra), Err(StoreError::TrailingBytes(1))));
    }

    #[test]
    fn nan_payload_is_rejected_at_the_right_tensor() {
        let b = tiny_bundle();
        let mut bytes = b.to_bytes().unwrap();
        // Last value of the last tensor.
        let at = bytes.len() - 4;
        bytes[at..].copy_from_slice(&f32::NAN.to_le_bytes());
        match TraceBundle::from_bytes(&bytes) {
            Err(StoreError::NonFinite { tensor, element, byte_offset }) => {
                assert_eq!(tensor, "attn/L00/noun/p0");
                assert_eq!(element, 3);
                assert_eq!(byte_offset, at);
            }
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }

    #[test]
    fn valid_manifest_has_no_violations() {
        assert!(validate_manifest(&tiny_bundle().manifest).is_empty());
    }

    #[test]
    fn out_of_range_index_cites_pair_id() {
        let mut m = tiny_bundle().manifest;
        m.annotations[0].cult.t_noun = vec![2];
        let v = validate_manifest(&m);
        assert_eq!(v.len(), 1, "{v:?}");
        assert!(v[0].message.contains("\"p0\""));
        assert_eq!(v[0].field, "annotations[p0].cult.t_noun");
    }

    #[test]
    fn missing_tensor_names_layer_and_condition() {
        let mut b = tiny_bundle();
        b.manifest.tensors.remove(1);
        b.tensors.remove(1);
        let v = validate_manifest(&b.manifest);
        assert_eq!(v.len(), 1, "{v:?}");
        assert!(v[0].message.contains("(layer 0, noun)"), "{}", v[0].message);
    }

    #[test]
    fn all_violations_are_reported_in_field_order() {
        let mut m = tiny_bundle().manifest;
        m.seq_len = 0;
        m.batch = 0;
        m.annotations[0].culture_label = "martian".into();
        m.annotations[0].cult.t_noun = vec![0];
        let v = validate_manifest(&m);
        let fields: Vec<_> = v.iter().map(|v| v.field.as_str()).collect();
        let mut sorted = fields.clone();
        sorted.sort();
        assert_eq!(fields, sorted);
        assert!(fields.contains(&"batch"));
        assert!(fields.contains(&"seq_len"));
        assert!(fields.contains(&"annotations[p0].culture_label"));
        assert!(v.iter().any(|v| v.message.contains("also appears in t_cult")));
    }
}
