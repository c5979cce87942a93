//! Top-K sparse autoencoder over attention features.
//!
//! `encode(x) = TopK(ReLU(x W_enc + b_enc))`, `decode(z) = z W_dec + b_dec`.
//! Decoder atoms are the rows of `W_dec` (`d_hidden x d_in`) and are kept
//! at unit L2 norm. Training minimizes the mean squared reconstruction error
//! with AdamW, treating the Top-K support as fixed within a step.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numeric::sha256_hex;
use crate::optim::{AdamW, AdamWConfig};
use crate::trace_store::{self, ContainerManifest, StoreError, TensorDecl, TensorEntry};

/// Latent width used for the production-scale configuration.
pub const DEFAULT_HIDDEN: usize = 4096;
/// Fraction of latents kept active per sample.
pub const ACTIVE_FRACTION_DENOM: usize = 32;
pub const DEFAULT_LEARNING_RATE: f64 = 4e-4;

/// `ceil(d_hidden / 32)`; 128 at the default width.
pub fn default_k(d_hidden: usize) -> usize {
    d_hidden.div_ceil(ACTIVE_FRACTION_DENOM)
}

/// Decoder rows whose norm is already within this of 1 are left untouched,
/// which makes renormalization idempotent.
const RENORM_TOLERANCE: f64 = 2e-6;

#[derive(Debug, Error)]
pub enum SaeError {
    #[error("dimensions must be at least 1 (d_in={d_in}, d_hidden={d_hidden}, k={k})")]
    ZeroDim { d_in: usize, d_hidden: usize, k: usize },
    #[error("k={k} exceeds d_hidden={d_hidden}")]
    KTooLarge { k: usize, d_hidden: usize },
    #[error("{what}: expected width {expected}, got {got}")]
    DimMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("non-finite input value at row {row}, column {col}")]
    NonFiniteInput { row: usize, col: usize },
    #[error("non-finite training loss at step {step}")]
    NonFiniteLoss { step: usize },
    #[error("training needs at least batch_size={batch_size} rows, got {rows}")]
    NotEnoughData { rows: usize, batch_size: usize },
    #[error("invalid training config: {0}")]
    BadConfig(String),
    #[error("model file: {0}")]
    File(String),
    #[error(transparent)]
    Store(#[from] StoreError),
}

impl SaeError {
    pub fn is_validation(&self) -> bool {
        match self {
            SaeError::Store(e) => e.is_validation(),
            SaeError::NonFiniteLoss { .. } => false,
            _ => true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SaeModel {
    pub d_in: usize,
    pub d_hidden: usize,
    pub k: usize,
    /// `d_in x d_hidden`.
    pub w_enc: Array2<f32>,
    pub b_enc: Array1<f32>,
    /// `d_hidden x d_in`; row `m` is the decoder atom of latent `m`.
    pub w_dec: Array2<f32>,
    pub b_dec: Array1<f32>,
    pub seed: u64,
    /// SHA-256 of the training config, once trained.
    pub train_digest: Option<String>,
}

fn renormalize_rows(w: &mut Array2<f32>) {
    for mut row in w.rows_mut() {
        let norm = row.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>().sqrt();
        if norm > 0.0 && (norm - 1.0).abs() > RENORM_TOLERANCE {
            row.mapv_inplace(|v| (f64::from(v) / norm) as f32);
        }
    }
}

/// Deterministic initialization: uniform encoder in `±1/sqrt(d_in)`, decoder
/// the transposed encoder with unit atoms, zero biases.
pub fn init_sae(d_in: usize, d_hidden: usize, k: usize, seed: u64) -> Result<SaeModel, SaeError> {
    if d_in == 0 || d_hidden == 0 || k == 0 {
        return Err(SaeError::ZeroDim { d_in, d_hidden, k });
    }
    if k > d_hidden {
        return Err(SaeError::KTooLarge { k, d_hidden });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bound = 1.0 / (d_in as f32).sqrt();
    let w_enc = Array2::from_shape_fn((d_in, d_hidden), |_| rng.random_range(-bound..bound));
    let mut w_dec = w_enc.t().as_standard_layout().into_owned();
    renormalize_rows(&mut w_dec);
    Ok(SaeModel {
        d_in,
        d_hidden,
        k,
        w_enc,
        b_enc: Array1::zeros(d_hidden),
        w_dec,
        b_dec: Array1::zeros(d_in),
        seed,
        train_digest: None,
    })
}

/// [`init_sae`] with the decoder bias at the column means of `data`.
pub fn init_sae_for_data(data: &ArrayView2<'_, f32>, d_hidden: usize, k: usize, seed: u64) -> Result<SaeModel, SaeError> {
    let mut m = init_sae(data.ncols(), d_hidden, k, seed)?;
    m.check_input(data, "initialization data", data.ncols())?;
    if data.nrows() > 0 {
        let mean = data.mapv(f64::from).mean_axis(Axis(0)).expect("non-empty");
        m.b_dec = mean.mapv(|v| v as f32);
    }
    Ok(m)
}

/// Active latents of one row: `(latent index, value)`, value > 0.
pub type ActiveSet = Vec<(usize, f32)>;

/// Keeps the `k` largest positive entries; ties go to the lower index.
pub fn top_k_positive(pre: &[f32], k: usize) -> ActiveSet {
    let mut active: ActiveSet = pre
        .iter()
        .enumerate()
        .filter(|(_, &v)| v > 0.0)
        .map(|(i, &v)| (i, v))
        .collect();
    let order = |a: &(usize, f32), b: &(usize, f32)| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0));
    if active.len() > k {
        active.select_nth_unstable_by(k - 1, order);
        active.truncate(k);
    }
    active.sort_unstable_by_key(|&(i, _)| i);
    active
}

impl SaeModel {
    fn check_input(&self, x: &ArrayView2<'_, f32>, what: &'static str, width: usize) -> Result<(), SaeError> {
        if x.ncols() != width {
            return Err(SaeError::DimMismatch {
                what,
                expected: width,
                got: x.ncols(),
            });
        }
        if let Some(((row, col), _)) = x.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(SaeError::NonFiniteInput { row, col });
        }
        Ok(())
    }

    /// Pre-activations `x W_enc + b_enc`.
    pub fn pre_activations(&self, x: &ArrayView2<'_, f32>) -> Result<Array2<f32>, SaeError> {
        self.check_input(x, "encode input", self.d_in)?;
        Ok(x.dot(&self.w_enc) + &self.b_enc)
    }

    /// Sparse codes per row.
    pub fn encode_sparse(&self, x: &ArrayView2<'_, f32>) -> Result<Vec<ActiveSet>, SaeError> {
        let pre = self.pre_activations(x)?;
        Ok(pre
            .rows()
            .into_iter()
            .map(|r| top_k_positive(r.as_slice().expect("row-major"), self.k))
            .collect())
    }

    /// Dense `n x d_hidden` latents.
    pub fn encode(&self, x: &ArrayView2<'_, f32>) -> Result<Array2<f32>, SaeError> {
        let codes = self.encode_sparse(x)?;
        let mut z = Array2::zeros((x.nrows(), self.d_hidden));
        for (mut row, active) in z.rows_mut().into_iter().zip(&codes) {
            for &(i, v) in active {
                row[i] = v;
            }
        }
        Ok(z)
    }

    pub fn decode(&self, z: &ArrayView2<'_, f32>) -> Result<Array2<f32>, SaeError> {
        self.check_input(z, "decode input", self.d_hidden)?;
        Ok(z.dot(&self.w_dec) + &self.b_dec)
    }

    pub fn reconstruct(&self, x: &ArrayView2<'_, f32>) -> Result<Array2<f32>, SaeError> {
        let z = self.encode(x)?;
        self.decode(&z.view())
    }

    /// Mean squared error per element over `data`.
    pub fn mse(&self, data: &ArrayView2<'_, f32>) -> Result<f64, SaeError> {
        let rec = self.reconstruct(data)?;
        let sq: f64 = rec
            .iter()
            .zip(data.iter())
            .map(|(&a, &b)| {
                let d = f64::from(a) - f64::from(b);
                d * d
            })
            .sum();
        Ok(sq / data.len().max(1) as f64)
    }

    /// Squared reconstruction error over the data's squared deviation from
    /// its column means (fraction of variance unexplained).
    pub fn relative_mse(&self, data: &ArrayView2<'_, f32>) -> Result<f64, SaeError> {
        let rec = self.reconstruct(data)?;
        let mean = data.mapv(f64::from).mean_axis(Axis(0)).unwrap_or_else(|| Array1::zeros(data.ncols()));
        let mut err = 0.0;
        let mut var = 0.0;
        for (x, xr) in data.rows().into_iter().zip(rec.rows()) {
            for ((&a, &b), &m) in x.iter().zip(xr.iter()).zip(mean.iter()) {
                let d = f64::from(a) - f64::from(b);
                let c = f64::from(a) - m;
                err += d * d;
                var += c * c;
            }
        }
        Ok(if var > 0.0 { err / var } else { err })
    }

    /// L2 norms of the decoder atoms.
    pub fn atom_norms(&self) -> Vec<f64> {
        self.w_dec
            .rows()
            .into_iter()
            .map(|r| r.iter().map(|&v| f64::from(v).powi(2)).sum::<f64>().sqrt())
            .collect()
    }

    pub fn bits_eq(&self, other: &SaeModel) -> bool {
        let same = |a: &[f32], b: &[f32]| a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits());
        self.d_in == other.d_in
            && self.d_hidden == other.d_hidden
            && self.k == other.k
            && self.seed == other.seed
            && same(self.w_enc.as_slice().unwrap(), other.w_enc.as_slice().unwrap())
            && same(self.b_enc.as_slice().unwrap(), other.b_enc.as_slice().unwrap())
            && same(self.w_dec.as_slice().unwrap(), other.w_dec.as_slice().unwrap())
            && same(self.b_dec.as_slice().unwrap(), other.b_dec.as_slice().unwrap())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaeTrainConfig {
    pub learning_rate: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
}

impl Default for SaeTrainConfig {
    fn default() -> Self {
        SaeTrainConfig {
            learning_rate: DEFAULT_LEARNING_RATE,
            steps: 5000,
            batch_size: 256,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
        }
    }
}

impl SaeTrainConfig {
    pub fn digest(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("config serializes"))
    }

    fn validate(&self) -> Result<(), SaeError> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(SaeError::BadConfig(format!("learning_rate {} must be finite and >= 0", self.learning_rate)));
        }
        if self.steps == 0 {
            return Err(SaeError::BadConfig("steps must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(SaeError::BadConfig("batch_size must be at least 1".into()));
        }
        Ok(())
    }
}

/// Trains a copy of `model` on `data` (`N x d_in`), returning the model and
/// the per-step batch loss.
pub fn train(model: &SaeModel, data: &ArrayView2<'_, f32>, cfg: &SaeTrainConfig) -> Result<(SaeModel, Vec<f64>), SaeError> {
    cfg.validate()?;
    model.check_input(data, "training data", model.d_in)?;
    let n = data.nrows();
    if n < cfg.batch_size {
        return Err(SaeError::NotEnoughData {
            rows: n,
            batch_size: cfg.batch_size,
        });
    }
    let (d_in, d_hidden) = (model.d_in, model.d_hidden);
    let mut m = model.clone();
    let mut opt = AdamW::new(
        AdamWConfig {
            learning_rate: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
        },
        &[(d_in * d_hidden, true), (d_hidden, false), (d_hidden * d_in, true), (d_in, false)],
    );
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut cursor = n;

    let bsz = cfg.batch_size;
    let mut xb = Array2::<f32>::zeros((bsz, d_in));
    let mut g_w_enc = Array2::<f32>::zeros((d_in, d_hidden));
    let mut g_b_enc = Array1::<f32>::zeros(d_hidden);
    let mut g_w_dec = Array2::<f32>::zeros((d_hidden, d_in));
    let mut g_b_dec = Array1::<f32>::zeros(d_in);
    let mut residual = vec![0.0f32; d_in];
    let mut history = Vec::with_capacity(cfg.steps);
    let scale = 2.0 / (bsz * d_in) as f64;

    for step in 0..cfg.steps {
        if cursor + bsz > n {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        for (mut dst, &src) in xb.rows_mut().into_iter().zip(&order[cursor..cursor + bsz]) {
            dst.assign(&data.row(src));
        }
        cursor += bsz;

        let pre = xb.dot(&m.w_enc) + &m.b_enc;
        g_w_enc.fill(0.0);
        g_b_enc.fill(0.0);
        g_w_dec.fill(0.0);
        g_b_dec.fill(0.0);
        let mut loss = 0.0f64;
        for (x, p) in xb.rows().into_iter().zip(pre.rows()) {
            let active = top_k_positive(p.as_slice().expect("row-major"), m.k);
            residual.copy_from_slice(m.b_dec.as_slice().unwrap());
            for &(j, z) in &active {
                for (r, &w) in residual.iter_mut().zip(m.w_dec.row(j)) {
                    *r += z * w;
                }
            }
            for (r, &xi) in residual.iter_mut().zip(x.iter()) {
                let d = *r - xi;
                loss += f64::from(d) * f64::from(d);
                *r = (f64::from(d) * scale) as f32;
            }
            for (gb, &g) in g_b_dec.iter_mut().zip(&residual) {
                *gb += g;
            }
            for &(j, z) in &active {
                let mut dz = 0.0f32;
                let w_row = m.w_dec.row(j);
                for ((gw, &g), &w) in g_w_dec.row_mut(j).iter_mut().zip(&residual).zip(w_row.iter()) {
                    *gw += z * g;
                    dz += g * w;
                }
                g_b_enc[j] += dz;
                for (i, &xi) in x.iter().enumerate() {
                    g_w_enc[[i, j]] += xi * dz;
                }
            }
        }
        let loss = loss / (bsz * d_in) as f64;
        if !loss.is_finite() {
            return Err(SaeError::NonFiniteLoss { step });
        }
        history.push(loss);

        opt.begin_step();
        opt.update(0, m.w_enc.as_slice_mut().unwrap(), g_w_enc.as_slice().unwrap());
        opt.update(1, m.b_enc.as_slice_mut().unwrap(), g_b_enc.as_slice().unwrap());
        opt.update(2, m.w_dec.as_slice_mut().unwrap(), g_w_dec.as_slice().unwrap());
        opt.update(3, m.b_dec.as_slice_mut().unwrap(), g_b_dec.as_slice().unwrap());
        renormalize_rows(&mut m.w_dec);
    }
    m.train_digest = Some(cfg.digest());
    Ok((m, history))
}

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaeManifest {
    pub d_in: usize,
    pub d_hidden: usize,
    pub k: usize,
    pub seed: u64,
    pub train_config_digest: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SaeFile {
    sae_manifest: SaeManifest,
    tensors: Vec<TensorDecl>,
}

impl ContainerManifest for SaeFile {
    fn tensor_decls(&self) -> &[TensorDecl] {
        &self.tensors
    }
}

const SAE_TENSORS: [&str; 4] = ["w_enc", "b_enc", "w_dec", "b_dec"];

fn sae_entries(m: &SaeModel) -> Vec<TensorEntry> {
    let entry = |name: &str, dims: Vec<u64>, data: &[f32]| TensorEntry::new(name, dims, data.to_vec()).expect("shapes agree");
    let (di, dh) = (m.d_in as u64, m.d_hidden as u64);
    vec![
        entry("w_enc", vec![di, dh], m.w_enc.as_slice().unwrap()),
        entry("b_enc", vec![dh], m.b_enc.as_slice().unwrap()),
        entry("w_dec", vec![dh, di], m.w_dec.as_slice().unwrap()),
        entry("b_dec", vec![di], m.b_dec.as_slice().unwrap()),
    ]
}

pub fn encode_sae(m: &SaeModel) -> Result<Vec<u8>, SaeError> {
    let tensors = sae_entries(m);
    let file = SaeFile {
        sae_manifest: SaeManifest {
            d_in: m.d_in,
            d_hidden: m.d_hidden,
            k: m.k,
            seed: m.seed,
            train_config_digest: m.train_digest.clone(),
        },
        tensors: tensors.iter().map(|t| t.decl(None)).collect(),
    };
    Ok(trace_store::encode_container(&file, &tensors)?)
}

pub fn decode_sae(bytes: &[u8]) -> Result<SaeModel, SaeError> {
    let (file, tensors) = trace_store::decode_container::<SaeFile>(bytes)?;
    let man = file.sae_manifest;
    if man.k == 0 || man.k > man.d_hidden || man.d_in == 0 {
        return Err(SaeError::File(format!(
            "manifest declares d_in={}, d_hidden={}, k={}",
            man.d_in, man.d_hidden, man.k
        )));
    }
    let names: Vec<&str> = tensors.iter().map(|t| t.name.as_str()).collect();
    if names != SAE_TENSORS {
        return Err(SaeError::File(format!("expected tensors {SAE_TENSORS:?}, found {names:?}")));
    }
    let (di, dh) = (man.d_in as u64, man.d_hidden as u64);
    let expected: [Vec<u64>; 4] = [vec![di, dh], vec![dh], vec![dh, di], vec![di]];
    for (t, want) in tensors.iter().zip(&expected) {
        if &t.dims != want {
            return Err(SaeError::File(format!(
                "tensor {:?} has dims {:?} but the manifest (d_in={}, d_hidden={}) implies {:?}",
                t.name, t.dims, man.d_in, man.d_hidden, want
            )));
        }
    }
    let mut it = tensors.into_iter();
    let mut next = || it.next().expect("four tensors").data;
    let w_enc = Array2::from_shape_vec((man.d_in, man.d_hidden), next()).expect("checked dims");
    let b_enc = Array1::from_vec(next());
    let w_dec = Array2::from_shape_vec((man.d_hidden, man.d_in), next()).expect("checked dims");
    let b_dec = Array1::from_vec(next());
    Ok(SaeModel {
        d_in: man.d_in,
        d_hidden: man.d_hidden,
        k: man.k,
        w_enc,
        b_enc,
        w_dec,
        b_dec,
        seed: man.seed,
        train_digest: man.train_config_digest,
    })
}

pub fn save_sae(m: &SaeModel, path: &Path) -> Result<u64, SaeError> {
    let bytes = encode_sae(m)?;
    std::fs::write(path, &bytes).map_err(|source| {
        SaeError::Store(StoreError::Io {
            path: path.display().to_string(),
            source,
        })
    })?;
    Ok(bytes.len() as u64)
}

pub fn load_sae(path: &Path) -> Result<SaeModel, SaeError> {
    let bytes = std::fs::read(path).map_err(|source| {
        SaeError::Store(StoreError::Io {
            path: path.display().to_string(),
            source,
        })
    })?;
    decode_sae(&bytes)
}
