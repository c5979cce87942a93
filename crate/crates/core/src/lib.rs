//! Localize culture-sensitive layers and neurons in text-encoder attention
//! traces, then strengthen them: scale culture latents of a Top-K sparse
//! autoencoder before decoding, or train a small residual adapter at the
//! sensitive layer against a frozen generator.
//!
//! Every detection stage has a synthetic counterpart in [`synth_fixtures`]
//! whose planted ground truth serves as the oracle in tests.

pub mod numeric;
pub mod optim;
pub mod trace_store;
pub mod layer_scan;
pub mod topk_sae;
pub mod synth_fixtures;
pub mod neuron_scan;
pub mod intervention;
pub mod features;
pub mod layer_enhancer;
pub mod report;
