//! Residual bottleneck adapter at the culture-sensitive layer and its
//! pixel-MSE training loop through a frozen toy generator.
//!
//! The adapter computes `h~ = h + g(gelu(h W1) W2)` row by row, with `g` a
//! bias-free RMS normalization scaled by `norm_scale`. `W2` starts at zero so
//! the adapted pipeline reproduces the frozen one exactly.
//!
//! All arithmetic is `f64`. Gradients are analytic; [`gradient_check`]
//! compares them to central differences.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numeric::{derive_seed, digest_f64};
use crate::optim::{AdamW, AdamWConfig};
use crate::trace_store::{self, ContainerManifest, StoreError, TensorDecl, TensorEntry};

/// Added under the square root of the RMS normalization.
pub const RMS_EPS: f64 = 1e-6;
pub const DEFAULT_LR: f64 = 5e-5;
pub const DEFAULT_STEPS: usize = 2000;

#[derive(Debug, Error)]
pub enum EnhancerError {
    #[error("{what}: expected {expected}, got {found}")]
    Dim { what: &'static str, expected: String, found: String },
    #[error("invalid pipeline spec: {0}")]
    Spec(String),
    #[error("training dataset is empty")]
    EmptyDataset,
    #[error("non-finite {0}")]
    NonFinite(String),
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },
    #[error("enhancer file: {0}")]
    File(String),
    #[error(transparent)]
    Store(#[from] StoreError),
}

impl EnhancerError {
    pub fn is_validation(&self) -> bool {
        match self {
            EnhancerError::Store(e) => e.is_validation(),
            EnhancerError::NonFiniteLoss { .. } => false,
            _ => true,
        }
    }
}

fn dim_err(what: &'static str, expected: impl std::fmt::Debug, found: impl std::fmt::Debug) -> EnhancerError {
    EnhancerError::Dim { what, expected: format!("{expected:?}"), found: format!("{found:?}") }
}

// ---------------------------------------------------------------------------
// Adapter
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct EnhancerModel {
    pub d: usize,
    pub d_mid: usize,
    /// `d x d_mid`.
    pub w1: Array2<f64>,
    /// `d_mid x d`.
    pub w2: Array2<f64>,
    pub norm_scale: Array1<f64>,
    pub seed: u64,
}

impl EnhancerModel {
    /// `W1 ~ N(0, 1/d)`, `W2 = 0`, unit gain.
    pub fn init(d: usize, d_mid: usize, seed: u64) -> Result<Self, EnhancerError> {
        if d == 0 || d_mid == 0 {
            return Err(EnhancerError::Spec(format!("d={d}, d_mid={d_mid} must be positive")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std = 1.0 / (d as f64).sqrt();
        let w1 = Array2::from_shape_fn((d, d_mid), |_| std * rng.sample::<f64, _>(StandardNormal));
        Ok(EnhancerModel {
            d,
            d_mid,
            w1,
            w2: Array2::zeros((d_mid, d)),
            norm_scale: Array1::ones(d),
            seed,
        })
    }

    /// Bottleneck of a quarter of the host width, at least 1.
    pub fn default_d_mid(d: usize) -> usize {
        (d / 4).max(1)
    }

    pub fn n_params(&self) -> usize {
        self.w1.len() + self.w2.len() + self.norm_scale.len()
    }

    fn check(&self) -> Result<(), EnhancerError> {
        if self.w1.dim() != (self.d, self.d_mid) {
            return Err(dim_err("W1", (self.d, self.d_mid), self.w1.dim()));
        }
        if self.w2.dim() != (self.d_mid, self.d) {
            return Err(dim_err("W2", (self.d_mid, self.d), self.w2.dim()));
        }
        if self.norm_scale.len() != self.d {
            return Err(dim_err("norm_scale", self.d, self.norm_scale.len()));
        }
        for (name, p) in self.params() {
            if p.iter().any(|v| !v.is_finite()) {
                return Err(EnhancerError::NonFinite(format!("enhancer parameter {name}")));
            }
        }
        Ok(())
    }

    fn params(&self) -> [(&'static str, &[f64]); 3] {
        [
            ("w1", self.w1.as_slice().expect("standard layout")),
            ("w2", self.w2.as_slice().expect("standard layout")),
            ("norm_scale", self.norm_scale.as_slice().expect("standard layout")),
        ]
    }

    fn params_mut(&mut self) -> [&mut [f64]; 3] {
        [
            self.w1.as_slice_mut().expect("standard layout"),
            self.w2.as_slice_mut().expect("standard layout"),
            self.norm_scale.as_slice_mut().expect("standard layout"),
        ]
    }

    pub fn digest(&self) -> String {
        let [a, b, c] = self.params();
        digest_f64(&[a.1, b.1, c.1])
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub fn gelu(u: f64) -> f64 {
    0.5 * u * (1.0 + (GELU_C * (u + GELU_A * u * u * u)).tanh())
}

pub fn gelu_grad(u: f64) -> f64 {
    let t = (GELU_C * (u + GELU_A * u * u * u)).tanh();
    0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * u * u)
}

/// Row-wise `v / sqrt(mean(v^2) + eps) * scale`; an all-zero row maps to zero.
pub fn rms_norm(v: &ArrayView2<f64>, scale: &Array1<f64>) -> (Array2<f64>, Array1<f64>) {
    let d = v.ncols() as f64;
    let mut out = Array2::zeros(v.raw_dim());
    let mut rms = Array1::zeros(v.nrows());
    for (i, row) in v.outer_iter().enumerate() {
        let r = (row.iter().map(|x| x * x).sum::<f64>() / d + RMS_EPS).sqrt();
        rms[i] = r;
        if row.iter().all(|&x| x == 0.0) {
            continue;
        }
        for (j, &x) in row.iter().enumerate() {
            out[[i, j]] = x / r * scale[j];
        }
    }
    (out, rms)
}

struct AdapterCache {
    h: Array2<f64>,
    u: Array2<f64>,
    a: Array2<f64>,
    v: Array2<f64>,
    rms: Array1<f64>,
}

fn adapter_forward(enh: &EnhancerModel, h: &Array2<f64>) -> (Array2<f64>, AdapterCache) {
    let u = h.dot(&enh.w1);
    let a = u.mapv(gelu);
    let v = a.dot(&enh.w2);
    let (g, rms) = rms_norm(&v.view(), &enh.norm_scale);
    (h + &g, AdapterCache { h: h.clone(), u, a, v, rms })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnhancerGrads {
    pub w1: Array2<f64>,
    pub w2: Array2<f64>,
    pub norm_scale: Array1<f64>,
}

impl EnhancerGrads {
    fn slices(&self) -> [&[f64]; 3] {
        [
            self.w1.as_slice().expect("standard layout"),
            self.w2.as_slice().expect("standard layout"),
            self.norm_scale.as_slice().expect("standard layout"),
        ]
    }

    pub fn max_abs(&self) -> f64 {
        self.slices().iter().flat_map(|s| s.iter()).fold(0.0, |m, v| m.max(v.abs()))
    }
}

fn adapter_backward(enh: &EnhancerModel, c: &AdapterCache, dh_out: &Array2<f64>) -> EnhancerGrads {
    let d = enh.d as f64;
    let mut ds = Array1::<f64>::zeros(enh.d);
    let mut dv = Array2::<f64>::zeros(c.v.raw_dim());
    for i in 0..c.v.nrows() {
        let r = c.rms[i];
        let v = c.v.row(i);
        let dy = dh_out.row(i);
        let mut qv = 0.0;
        for j in 0..enh.d {
            ds[j] += dy[j] * v[j] / r;
            qv += dy[j] * enh.norm_scale[j] * v[j];
        }
        let r3 = r * r * r;
        for j in 0..enh.d {
            dv[[i, j]] = dy[j] * enh.norm_scale[j] / r - v[j] * qv / (d * r3);
        }
    }
    let w2 = c.a.t().dot(&dv);
    let mut du = dv.dot(&enh.w2.t());
    du.zip_mut_with(&c.u, |g, &u| *g *= gelu_grad(u));
    let w1 = c.h.t().dot(&du);
    EnhancerGrads { w1, w2, norm_scale: ds }
}

/// Applies the adapter to `n x d` hidden states.
pub fn enhancer_forward(enh: &EnhancerModel, h: &ArrayView2<f64>) -> Result<Array2<f64>, EnhancerError> {
    enh.check()?;
    if h.ncols() != enh.d {
        return Err(dim_err("hidden width", enh.d, h.ncols()));
    }
    if h.iter().any(|v| !v.is_finite()) {
        return Err(EnhancerError::NonFinite("hidden state".into()));
    }
    Ok(adapter_forward(enh, &h.to_owned()).0)
}

// ---------------------------------------------------------------------------
// Toy pipeline
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyPipelineSpec {
    pub d: usize,
    pub n_tokens: usize,
    pub n_layers: usize,
    pub host_layer: usize,
    pub grid: (usize, usize),
    pub seed: u64,
}

impl ToyPipelineSpec {
    pub fn standard(seed: u64) -> Self {
        ToyPipelineSpec { d: 16, n_tokens: 6, n_layers: 4, host_layer: 1, grid: (16, 16), seed }
    }
}

/// One frozen encoder layer: `h' = h + tanh(mix h weight)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenLayer {
    /// Row-stochastic token mixing, `n_tokens x n_tokens`.
    pub mix: Array2<f64>,
    /// `d x d`.
    pub weight: Array2<f64>,
}

/// Frozen encoder stack plus a linear generator from the mean-pooled
/// encoding to an image grid. The adapter runs on the output of
/// `host_layer`.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyPipeline {
    pub spec: ToyPipelineSpec,
    pub layers: Vec<FrozenLayer>,
    /// `(rows * cols) x d`.
    pub generator: Array2<f64>,
}

impl ToyPipeline {
    pub fn build(spec: ToyPipelineSpec) -> Result<Self, EnhancerError> {
        let ToyPipelineSpec { d, n_tokens, n_layers, host_layer, grid, seed } = spec;
        if d == 0 || n_tokens == 0 || grid.0 == 0 || grid.1 == 0 {
            return Err(EnhancerError::Spec(format!("zero dimension in {spec:?}")));
        }
        if host_layer >= n_layers {
            return Err(EnhancerError::Spec(format!("host layer {host_layer} outside {n_layers} layers")));
        }
        let std = 1.0 / (d as f64).sqrt();
        let layers = (0..n_layers)
            .map(|l| {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[l as u64]));
                let mut mix = Array2::from_shape_fn((n_tokens, n_tokens), |_| rng.sample::<f64, _>(StandardNormal));
                for mut row in mix.outer_iter_mut() {
                    let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                    row.mapv_inplace(|x| (x - m).exp());
                    let s = row.sum();
                    row /= s;
                }
                let weight = Array2::from_shape_fn((d, d), |_| std * rng.sample::<f64, _>(StandardNormal));
                FrozenLayer { mix, weight }
            })
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[u64::MAX]));
        let generator = Array2::from_shape_fn((grid.0 * grid.1, d), |_| std * rng.sample::<f64, _>(StandardNormal));
        Ok(ToyPipeline { spec, layers, generator })
    }

    pub fn n_pixels(&self) -> usize {
        self.generator.nrows()
    }

    /// SHA-256 over every frozen parameter.
    pub fn digest(&self) -> String {
        let mut slices: Vec<&[f64]> = Vec::new();
        for l in &self.layers {
            slices.push(l.mix.as_slice().expect("standard layout"));
            slices.push(l.weight.as_slice().expect("standard layout"));
        }
        slices.push(self.generator.as_slice().expect("standard layout"));
        digest_f64(&slices)
    }

    fn check_prompt(&self, p: &ArrayView2<f64>) -> Result<(), EnhancerError> {
        let want = (self.spec.n_tokens, self.spec.d);
        if p.dim() != want {
            return Err(dim_err("prompt features", want, p.dim()));
        }
        if p.iter().any(|v| !v.is_finite()) {
            return Err(EnhancerError::NonFinite("prompt features".into()));
        }
        Ok(())
    }

    fn check_enhancer(&self, enh: &EnhancerModel) -> Result<(), EnhancerError> {
        enh.check()?;
        if enh.d != self.spec.d {
            return Err(dim_err("enhancer width", self.spec.d, enh.d));
        }
        Ok(())
    }

    /// Random `n_tokens x d` prompt features.
    pub fn random_prompt(&self, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((self.spec.n_tokens, self.spec.d), |_| rng.sample::<f64, _>(StandardNormal))
    }
}

struct PipelineCache {
    /// Tanh activations of the layers after the host.
    tanh_after: Vec<Array2<f64>>,
    adapter: Option<AdapterCache>,
}

fn run_pipeline(pipe: &ToyPipeline, enh: Option<&EnhancerModel>, p: &Array2<f64>) -> (Array1<f64>, PipelineCache) {
    let host = pipe.spec.host_layer;
    let mut h = p.clone();
    let mut cache = PipelineCache { tanh_after: Vec::new(), adapter: None };
    for (l, layer) in pipe.layers.iter().enumerate() {
        let t = layer.mix.dot(&h).dot(&layer.weight).mapv(f64::tanh);
        h += &t;
        if l > host {
            cache.tanh_after.push(t);
        }
        if l == host {
            if let Some(e) = enh {
                let (out, c) = adapter_forward(e, &h);
                h = out;
                cache.adapter = Some(c);
            }
        }
    }
    let pooled = h.mean_axis(Axis(0)).expect("non-empty prompt");
    (pipe.generator.dot(&pooled), cache)
}

/// Image values for one prompt; `enh = None` runs the bare pipeline.
pub fn pipeline_forward(
    pipe: &ToyPipeline,
    enh: Option<&EnhancerModel>,
    prompt: &ArrayView2<f64>,
) -> Result<Array1<f64>, EnhancerError> {
    pipe.check_prompt(prompt)?;
    if let Some(e) = enh {
        pipe.check_enhancer(e)?;
    }
    Ok(run_pipeline(pipe, enh, &prompt.to_owned()).0)
}

/// Mean of squared differences over all elements.
pub fn mse_loss(x_hat: &[f64], x_star: &[f64]) -> Result<f64, EnhancerError> {
    if x_hat.len() != x_star.len() {
        return Err(dim_err("target length", x_hat.len(), x_star.len()));
    }
    if x_hat.is_empty() {
        return Err(dim_err("target length", "non-empty", 0));
    }
    let s: f64 = x_hat.iter().zip(x_star).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(s / x_hat.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub prompt: Array2<f64>,
    pub target: Array1<f64>,
}

impl Sample {
    fn check(&self, pipe: &ToyPipeline) -> Result<(), EnhancerError> {
        pipe.check_prompt(&self.prompt.view())?;
        if self.target.len() != pipe.n_pixels() {
            return Err(dim_err("target length", pipe.n_pixels(), self.target.len()));
        }
        if self.target.iter().any(|v| !v.is_finite()) {
            return Err(EnhancerError::NonFinite("target".into()));
        }
        Ok(())
    }
}

fn loss_and_grads_unchecked(pipe: &ToyPipeline, enh: &EnhancerModel, s: &Sample) -> (f64, EnhancerGrads) {
    let (x, cache) = run_pipeline(pipe, Some(enh), &s.prompt);
    let n = x.len() as f64;
    let diff = &x - &s.target;
    let loss = diff.iter().map(|v| v * v).sum::<f64>() / n;
    let dx = diff * (2.0 / n);
    let dpool = pipe.generator.t().dot(&dx);
    let t = pipe.spec.n_tokens;
    let mut dh = Array2::from_shape_fn((t, pipe.spec.d), |(_, j)| dpool[j] / t as f64);
    let host = pipe.spec.host_layer;
    for (k, l) in (host + 1..pipe.layers.len()).enumerate().rev() {
        let layer = &pipe.layers[l];
        let th = &cache.tanh_after[k];
        let dz = &dh * &th.mapv(|v| 1.0 - v * v);
        dh = dh + layer.mix.t().dot(&dz).dot(&layer.weight.t());
    }
    let grads = adapter_backward(enh, cache.adapter.as_ref().expect("adapter ran"), &dh);
    (loss, grads)
}

/// Per-sample loss and its analytic gradient with respect to the adapter.
pub fn loss_and_grads(pipe: &ToyPipeline, enh: &EnhancerModel, s: &Sample) -> Result<(f64, EnhancerGrads), EnhancerError> {
    pipe.check_enhancer(enh)?;
    s.check(pipe)?;
    Ok(loss_and_grads_unchecked(pipe, enh, s))
}

/// Mean loss over a dataset.
pub fn dataset_loss(pipe: &ToyPipeline, enh: &EnhancerModel, samples: &[Sample]) -> Result<f64, EnhancerError> {
    if samples.is_empty() {
        return Err(EnhancerError::EmptyDataset);
    }
    pipe.check_enhancer(enh)?;
    let mut total = 0.0;
    for s in samples {
        s.check(pipe)?;
        let x = run_pipeline(pipe, Some(enh), &s.prompt).0;
        total += mse_loss(x.as_slice().expect("contiguous"), s.target.as_slice().expect("contiguous"))?;
    }
    Ok(total / samples.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnhancerTrainConfig {
    pub steps: usize,
    pub optimizer: AdamWConfig,
    /// Seeds the sample order.
    pub seed: u64,
}

impl Default for EnhancerTrainConfig {
    fn default() -> Self {
        EnhancerTrainConfig { steps: DEFAULT_STEPS, optimizer: AdamWConfig::with_lr(DEFAULT_LR), seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub model: EnhancerModel,
    /// Loss of the sample drawn at each step, before its update.
    pub losses: Vec<f64>,
    pub initial_loss: f64,
    pub final_loss: f64,
}

/// Batch-size-1 AdamW over `W1`, `W2` and `norm_scale`; decay skips the gain.
/// Samples are visited in a fresh shuffled order each epoch.
pub fn train_enhancer(
    pipe: &ToyPipeline,
    init: &EnhancerModel,
    samples: &[Sample],
    cfg: &EnhancerTrainConfig,
) -> Result<TrainOutcome, EnhancerError> {
    if samples.is_empty() {
        return Err(EnhancerError::EmptyDataset);
    }
    pipe.check_enhancer(init)?;
    for s in samples {
        s.check(pipe)?;
    }
    let mut enh = init.clone();
    let initial_loss = dataset_loss(pipe, &enh, samples)?;
    let mut opt = AdamW::new(
        cfg.optimizer,
        &[(enh.w1.len(), true), (enh.w2.len(), true), (enh.norm_scale.len(), false)],
    );
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let pos = step % samples.len();
        if pos == 0 {
            order.shuffle(&mut rng);
        }
        let (loss, grads) = loss_and_grads_unchecked(pipe, &enh, &samples[order[pos]]);
        if !loss.is_finite() {
            return Err(EnhancerError::NonFiniteLoss { step });
        }
        losses.push(loss);
        opt.begin_step();
        for (slot, (p, g)) in enh.params_mut().into_iter().zip(grads.slices()).enumerate() {
            opt.update(slot, p, g);
        }
    }
    let final_loss = dataset_loss(pipe, &enh, samples)?;
    if !final_loss.is_finite() {
        return Err(EnhancerError::NonFiniteLoss { step: cfg.steps });
    }
    Ok(TrainOutcome { model: enh, losses, initial_loss, final_loss })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub n_params: usize,
}

/// Central differences over every adapter parameter against the analytic
/// gradient. Relative error is `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn gradient_check(
    pipe: &ToyPipeline,
    enh: &EnhancerModel,
    sample: &Sample,
    step_size: f64,
) -> Result<GradCheck, EnhancerError> {
    let (_, analytic) = loss_and_grads(pipe, enh, sample)?;
    let analytic: Vec<f64> = analytic.slices().iter().flat_map(|s| s.iter().copied()).collect();
    let mut probe = enh.clone();
    let mut idx = 0;
    let mut out = GradCheck { max_rel_error: 0.0, max_abs_error: 0.0, n_params: analytic.len() };
    for slot in 0..3 {
        let len = probe.params_mut()[slot].len();
        for i in 0..len {
            let orig = probe.params_mut()[slot][i];
            probe.params_mut()[slot][i] = orig + step_size;
            let up = loss_and_grads_unchecked(pipe, &probe, sample).0;
            probe.params_mut()[slot][i] = orig - step_size;
            let down = loss_and_grads_unchecked(pipe, &probe, sample).0;
            probe.params_mut()[slot][i] = orig;
            let numeric = (up - down) / (2.0 * step_size);
            let a = analytic[idx];
            let abs = (a - numeric).abs();
            out.max_abs_error = out.max_abs_error.max(abs);
            out.max_rel_error = out.max_rel_error.max(abs / a.abs().max(numeric.abs()).max(1e-8));
            idx += 1;
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnhancerManifest {
    pub d: usize,
    pub d_mid: usize,
    pub seed: u64,
    pub activation: String,
    pub normalization: String,
    pub rms_eps: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pipeline: Option<ToyPipelineSpec>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct EnhancerFile {
    enhancer_manifest: EnhancerManifest,
    tensors: Vec<TensorDecl>,
}

impl ContainerManifest for EnhancerFile {
    fn tensor_decls(&self) -> &[TensorDecl] {
        &self.tensors
    }
}

const ENHANCER_TENSORS: [&str; 3] = ["w1", "w2", "norm_scale"];

/// Stores parameters as `f32`.
pub fn encode_enhancer(enh: &EnhancerModel, pipeline: Option<ToyPipelineSpec>) -> Result<Vec<u8>, EnhancerError> {
    enh.check()?;
    let dims = [vec![enh.d as u64, enh.d_mid as u64], vec![enh.d_mid as u64, enh.d as u64], vec![enh.d as u64]];
    let tensors: Vec<TensorEntry> = enh
        .params()
        .iter()
        .zip(dims)
        .map(|((name, p), dims)| TensorEntry::new(*name, dims, p.iter().map(|&v| v as f32).collect()))
        .collect::<Result<_, _>>()?;
    let file = EnhancerFile {
        enhancer_manifest: EnhancerManifest {
            d: enh.d,
            d_mid: enh.d_mid,
            seed: enh.seed,
            activation: "gelu_tanh".into(),
            normalization: "rms".into(),
            rms_eps: RMS_EPS,
            pipeline,
        },
        tensors: tensors.iter().map(|t| t.decl(None)).collect(),
    };
    Ok(trace_store::encode_container(&file, &tensors)?)
}

pub fn decode_enhancer(bytes: &[u8]) -> Result<(EnhancerModel, EnhancerManifest), EnhancerError> {
    let (file, tensors) = trace_store::decode_container::<EnhancerFile>(bytes)?;
    let man = file.enhancer_manifest;
    if man.d == 0 || man.d_mid == 0 {
        return Err(EnhancerError::File(format!("manifest declares d={}, d_mid={}", man.d, man.d_mid)));
    }
    if man.activation != "gelu_tanh" || man.normalization != "rms" {
        return Err(EnhancerError::File(format!(
            "unsupported activation {:?} / normalization {:?}",
            man.activation, man.normalization
        )));
    }
    let names: Vec<&str> = tensors.iter().map(|t| t.name.as_str()).collect();
    if names != ENHANCER_TENSORS {
        return Err(EnhancerError::File(format!("expected tensors {ENHANCER_TENSORS:?}, found {names:?}")));
    }
    let (d, m) = (man.d as u64, man.d_mid as u64);
    let expected = [vec![d, m], vec![m, d], vec![d]];
    for (t, want) in tensors.iter().zip(&expected) {
        if &t.dims != want {
            return Err(EnhancerError::File(format!("tensor {:?} has dims {:?}, expected {want:?}", t.name, t.dims)));
        }
    }
    let mut it = tensors.into_iter().map(|t| t.data.into_iter().map(f64::from).collect::<Vec<_>>());
    let w1 = Array2::from_shape_vec((man.d, man.d_mid), it.next().expect("three tensors")).expect("checked dims");
    let w2 = Array2::from_shape_vec((man.d_mid, man.d), it.next().expect("three tensors")).expect("checked dims");
    let norm_scale = Array1::from_vec(it.next().expect("three tensors"));
    let model = EnhancerModel { d: man.d, d_mid: man.d_mid, w1, w2, norm_scale, seed: man.seed };
    Ok((model, man))
}

pub fn save_enhancer(enh: &EnhancerModel, pipeline: Option<ToyPipelineSpec>, path: &Path) -> Result<u64, EnhancerError> {
    let bytes = encode_enhancer(enh, pipeline)?;
    std::fs::write(path, &bytes).map_err(|source| StoreError::Io { path: path.display().to_string(), source })?;
    Ok(bytes.len() as u64)
}

pub fn load_enhancer(path: &Path) -> Result<(EnhancerModel, EnhancerManifest), EnhancerError> {
    let bytes = std::fs::read(path).map_err(|source| StoreError::Io { path: path.display().to_string(), source })?;
    decode_enhancer(&bytes)
}
