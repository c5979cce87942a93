//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero on any unexpected result.

use std::time::{Duration, Instant};

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use culture_probe::features::{from_sparse, FeatureSet};
use culture_probe::intervention::{ablation_report, amplify, lambda_sweep, scale_latents, validate_masking};
use culture_probe::layer_enhancer::{
    gradient_check, pipeline_forward, train_enhancer, EnhancerModel, EnhancerTrainConfig, Sample, ToyPipeline,
    ToyPipelineSpec,
};
use culture_probe::layer_scan::{scan_layers, SelectionRule};
use culture_probe::neuron_scan::{scan_feature_set, NeuronReport, SelectionPolicy, DEFAULT_BETA};
use culture_probe::report::{render, Format, ResultFile};
use culture_probe::synth_fixtures::{
    make_enhancer_task, make_planted_traces, make_sparse_dataset, CulturePlant, PlantSpec, SparseSpec,
};
use culture_probe::topk_sae::{init_sae_for_data, train, SaeModel, SaeTrainConfig};
use culture_probe::trace_store::{StoreError, TraceBundle};

// A1
const A1_SEEDS: u64 = 20;
const A1_MIN_HITS: usize = 19;
const A1_TIME_LIMIT: Duration = Duration::from_secs(10);
// A2
const A2_MAX_REL_MSE: f64 = 0.05;
const A2_TIME_LIMIT: Duration = Duration::from_secs(120);
// A3
const A3_SEEDS: u64 = 20;
const A3_MIN_HITS: usize = 18;
// A4
const A4_MIN_TOPK_REDUCTION: f64 = 0.90;
const A4_MAX_RANDOM_REDUCTION: f64 = 0.20;
// A5
const A5_LAMBDAS: [f64; 9] = [0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0];
// A6
const A6_GRAD_POINTS: u64 = 10;
const A6_MAX_REL_ERR: f64 = 1e-4;
const A6_FD_STEP: f64 = 1e-5;
const A6_MAX_LOSS_RATIO: f64 = 0.5;
const A6_STEPS: usize = 2000;
const A6_LR: f64 = 5e-5;
// A7
const A7_BUNDLES: u64 = 100;

/// Criteria that cannot be met as stated; they must still fail.
const EXPECTED_FAILURES: &[&str] = &["A2"];

struct Outcome {
    id: &'static str,
    pass: bool,
    detail: String,
}

fn outcome(id: &'static str, pass: bool, detail: String) -> Outcome {
    Outcome { id, pass, detail }
}

// ---------------------------------------------------------------------------
// A1
// ---------------------------------------------------------------------------

fn a1() -> Outcome {
    let start = Instant::now();
    let mut hits = 0;
    let mut misses = Vec::new();
    for seed in 0..A1_SEEDS {
        let spec = PlantSpec::standard(seed);
        let (bundle, truth) = make_planted_traces(&spec).expect("fixture");
        let scan = scan_layers(&bundle, &SelectionRule::default()).expect("scan");
        if scan.sensitive_layers == [truth.planted_layer] && truth.planted_layer == 5 {
            hits += 1;
        } else {
            misses.push((seed, scan.sensitive_layers));
        }
    }
    let elapsed = start.elapsed();
    outcome(
        "A1",
        hits >= A1_MIN_HITS && elapsed < A1_TIME_LIMIT,
        format!(
            "planted layer 5 selected alone in {hits}/{A1_SEEDS} seeds (need >= {A1_MIN_HITS}), {:.2} s (limit {} s), misses {misses:?}",
            elapsed.as_secs_f64(),
            A1_TIME_LIMIT.as_secs()
        ),
    )
}

// ---------------------------------------------------------------------------
// A2
// ---------------------------------------------------------------------------

fn a2() -> Outcome {
    let start = Instant::now();
    let spec = SparseSpec {
        d_in: 64,
        n_atoms: 256,
        k_background: 8,
        n_samples: 4096,
        shared_latents: vec![],
        culture_fire_prob: 0.0,
        shared_fire_prob: 0.0,
        noise_scale: 0.0,
        seed: 0,
    };
    let ds = make_sparse_dataset(&spec, &[]).expect("dataset");
    let data = ds.data.view();
    let init = init_sae_for_data(&data, 256, 8, 0).expect("init");
    let (model, _) = train(&init, &data, &SaeTrainConfig { steps: 5000, ..Default::default() }).expect("train");
    let rel = model.relative_mse(&data).expect("mse");
    let active = model.encode_sparse(&data).expect("encode");
    let exact = active.iter().filter(|a| a.len() == 8).count();
    let elapsed = start.elapsed();
    outcome(
        "A2",
        rel <= A2_MAX_REL_MSE && exact == active.len() && elapsed < A2_TIME_LIMIT,
        format!(
            "relative mse {rel:.4} (need <= {A2_MAX_REL_MSE}), exact-k rows {exact}/{}, {:.1} s (limit {} s)",
            active.len(),
            elapsed.as_secs_f64(),
            A2_TIME_LIMIT.as_secs()
        ),
    )
}

// ---------------------------------------------------------------------------
// A3-A5 fixture
// ---------------------------------------------------------------------------

fn cultures() -> Vec<CulturePlant> {
    vec![
        CulturePlant { label: "a".into(), latents: vec![0, 1, 2] },
        CulturePlant { label: "b".into(), latents: vec![3, 4, 5] },
    ]
}

fn neuron_fixture(seed: u64) -> SparseSpec {
    SparseSpec {
        d_in: 64,
        n_atoms: 32,
        k_background: 2,
        n_samples: 4096,
        shared_latents: vec![6, 7],
        culture_fire_prob: 0.6,
        shared_fire_prob: 0.3,
        noise_scale: 0.0,
        seed,
    }
}

struct NeuronRun {
    seed: u64,
    fs: FeatureSet,
    model: SaeModel,
    reports: Vec<NeuronReport>,
}

fn neuron_run(seed: u64) -> NeuronRun {
    let ds = make_sparse_dataset(&neuron_fixture(seed), &cultures()).expect("dataset");
    let fs = from_sparse(&ds);
    let data = fs.data.view();
    let init = init_sae_for_data(&data, 32, 6, seed).expect("init");
    let cfg = SaeTrainConfig { steps: 5000, batch_size: 256, seed, ..Default::default() };
    let (model, _) = train(&init, &data, &cfg).expect("train");
    let z = model.encode(&data).expect("encode");
    let reports = scan_feature_set(&z.view(), &fs, 0.0, DEFAULT_BETA, &SelectionPolicy::default()).expect("scan");
    NeuronRun { seed, fs, model, reports }
}

/// Planted atom with the largest signed cosine to each decoder atom.
fn matched_atom(model: &SaeModel, dictionary: &Array2<f32>, latent: usize) -> usize {
    let w = model.w_dec.row(latent);
    let wn = w.dot(&w).sqrt();
    let mut best = (f32::NEG_INFINITY, 0);
    for (j, atom) in dictionary.outer_iter().enumerate() {
        let c = w.dot(&atom) / (wn * atom.dot(&atom).sqrt());
        if c > best.0 {
            best = (c, j);
        }
    }
    best.1
}

fn recovered_exactly(run: &NeuronRun) -> bool {
    let truth = run.fs.planted.as_ref().expect("planted");
    truth.cultures.iter().all(|plant| {
        let Some(r) = run.reports.iter().find(|r| r.culture_label == plant.label) else {
            return false;
        };
        let mut atoms: Vec<usize> = r.selected.iter().map(|&m| matched_atom(&run.model, &truth.dictionary, m)).collect();
        atoms.sort_unstable();
        r.selected.len() == plant.latents.len() && atoms == plant.latents
    })
}

fn a3(runs: &[NeuronRun]) -> Outcome {
    let hits = runs.iter().filter(|r| recovered_exactly(r)).count();
    let misses: Vec<u64> = runs.iter().filter(|r| !recovered_exactly(r)).map(|r| r.seed).collect();
    outcome(
        "A3",
        hits >= A3_MIN_HITS,
        format!("exactly the 3 planted latents per culture in {hits}/{A3_SEEDS} seeds (need >= {A3_MIN_HITS}), misses {misses:?}"),
    )
}

fn a4(runs: &[NeuronRun]) -> Outcome {
    // Pooled over cultures per run, as in the ablation table; every seed must pass.
    let mut worst_topk = f64::INFINITY;
    let mut worst_random = f64::NEG_INFINITY;
    let mut worst_culture = f64::INFINITY;
    for run in runs {
        let v = validate_masking(&run.model, &run.fs, &run.reports, run.seed).expect("masking");
        let total = |f: fn(&culture_probe::intervention::CultureMasking) -> f64| v.cultures.iter().map(f).sum::<f64>();
        let base = total(|c| c.energy_baseline);
        worst_topk = worst_topk.min(1.0 - total(|c| c.energy_masked_topk) / base);
        worst_random = worst_random.max(1.0 - total(|c| c.energy_masked_random) / base);
        for c in &v.cultures {
            worst_culture = worst_culture.min(1.0 - c.energy_masked_topk / c.energy_baseline);
        }
    }
    let t = ablation_report(35.62, 7.65, 33.04);
    let rows = t.rows();
    let format_ok = rows[0].1 == "35.62" && rows[1].1 == "7.65 (-27.97)" && rows[2].1 == "33.04 (-2.58)";
    outcome(
        "A4",
        worst_topk >= A4_MIN_TOPK_REDUCTION && worst_random <= A4_MAX_RANDOM_REDUCTION && format_ok,
        format!(
            "min top-k reduction {:.2}% (need >= {:.0}%, lowest single culture {:.2}%), max random reduction {:.2}% (need <= {:.0}%) over {} seeds; table rows {:?}",
            100.0 * worst_topk,
            100.0 * A4_MIN_TOPK_REDUCTION,
            100.0 * worst_culture,
            100.0 * worst_random,
            100.0 * A4_MAX_RANDOM_REDUCTION,
            runs.len(),
            rows.iter().map(|r| r.1.as_str()).collect::<Vec<_>>()
        ),
    )
}

fn a5(runs: &[NeuronRun]) -> Outcome {
    let mut identity = true;
    let mut outside_unchanged = true;
    let mut monotone = true;
    for run in runs {
        let x = run.fs.data.view();
        let plain = run.model.reconstruct(&x).expect("reconstruct");
        let set: Vec<usize> = run.reports.iter().flat_map(|r| r.selected.iter().copied()).collect();
        let at_zero = amplify(&run.model, &x.into_dyn(), &set, 0.0).expect("amplify");
        identity &= plain.iter().zip(at_zero.iter()).all(|(a, b)| a.to_bits() == b.to_bits());

        let z = run.model.encode(&x).expect("encode");
        for &lambda in &A5_LAMBDAS {
            let mut scaled = z.clone();
            scale_latents(&mut scaled, &set, lambda).expect("scale");
            for m in (0..run.model.d_hidden).filter(|m| !set.contains(m)) {
                outside_unchanged &=
                    z.column(m).iter().zip(scaled.column(m).iter()).all(|(a, b)| a.to_bits() == b.to_bits());
            }
        }
        for r in &run.reports {
            let sweep = lambda_sweep(&run.model, &run.fs, &r.culture_label, &r.selected, &A5_LAMBDAS).expect("sweep");
            monotone &= sweep.energy.windows(2).all(|w| w[1] >= w[0]);
        }
    }
    outcome(
        "A5",
        identity && outside_unchanged && monotone,
        format!(
            "lambda=0 bit-identical to round trip: {identity}; latents outside the set bit-unchanged: {outside_unchanged}; energy nondecreasing over lambda 0..8: {monotone} ({} seeds)",
            runs.len()
        ),
    )
}

// ---------------------------------------------------------------------------
// A6
// ---------------------------------------------------------------------------

fn a6() -> Outcome {
    let spec = ToyPipelineSpec::standard(11);
    let pipe = ToyPipeline::build(spec).expect("pipeline");
    let d_mid = EnhancerModel::default_d_mid(spec.d);
    let init = EnhancerModel::init(spec.d, d_mid, 12).expect("init");

    let identity = (0..8).all(|i| {
        let p = pipe.random_prompt(100 + i);
        let bare = pipeline_forward(&pipe, None, &p.view()).unwrap();
        let adapted = pipeline_forward(&pipe, Some(&init), &p.view()).unwrap();
        bare.iter().zip(adapted.iter()).all(|(a, b)| a.to_bits() == b.to_bits())
    });

    let mut worst = 0.0f64;
    for point in 0..A6_GRAD_POINTS {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + point);
        let mut e = EnhancerModel::init(spec.d, d_mid, 2000 + point).unwrap();
        e.w2.mapv_inplace(|_| 0.5 * rng.sample::<f64, _>(StandardNormal));
        e.norm_scale.mapv_inplace(|_| 0.5 + rng.random::<f64>());
        let target = Array1::from_shape_fn(pipe.n_pixels(), |_| rng.sample::<f64, _>(StandardNormal));
        let sample = Sample { prompt: pipe.random_prompt(3000 + point), target };
        worst = worst.max(gradient_check(&pipe, &e, &sample, A6_FD_STEP).unwrap().max_rel_error);
    }

    let task = make_enhancer_task(&pipe, &init, 8, 13).expect("task");
    let before = pipe.digest();
    let cfg = EnhancerTrainConfig { steps: A6_STEPS, optimizer: culture_probe::optim::AdamWConfig::with_lr(A6_LR), seed: 0 };
    let out = train_enhancer(&pipe, &init, &task.samples, &cfg).expect("train");
    let frozen = before == pipe.digest();
    let ratio = out.final_loss / out.initial_loss;
    outcome(
        "A6",
        identity && worst <= A6_MAX_REL_ERR && ratio <= A6_MAX_LOSS_RATIO && frozen,
        format!(
            "zero-init identity exact: {identity}; max gradient rel error {worst:.2e} over {A6_GRAD_POINTS} points (need <= {A6_MAX_REL_ERR:.0e}); loss {:.4} -> {:.4}, ratio {ratio:.4} after {A6_STEPS} steps at lr {A6_LR:e} (need <= {A6_MAX_LOSS_RATIO}); backbone digest unchanged: {frozen}",
            out.initial_loss, out.final_loss
        ),
    )
}

// ---------------------------------------------------------------------------
// A7
// ---------------------------------------------------------------------------

fn random_bundle(seed: u64) -> TraceBundle {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_layers = rng.random_range(3..7);
    let spec = PlantSpec {
        n_layers,
        n_heads: rng.random_range(1..4),
        seq_len: rng.random_range(5..10),
        batch: rng.random_range(1..4),
        planted_layer: rng.random_range(0..n_layers),
        boost: rng.random_range(0.0..1.0),
        n_pairs: rng.random_range(1..5),
        cultures: vec![
            CulturePlant { label: "x".into(), latents: vec![0] },
            CulturePlant { label: "y".into(), latents: vec![1] },
        ],
        noise_scale: rng.random_range(0.0..3.0),
        seed,
        sae_dataset: None,
    };
    make_planted_traces(&spec).expect("fixture").0
}

/// Byte offset of the first tensor section.
fn first_section(bytes: &[u8]) -> usize {
    16 + u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize
}

fn with_manifest(bytes: &[u8], edit: impl FnOnce(&mut serde_json::Value)) -> Vec<u8> {
    let start = first_section(bytes);
    let mut manifest: serde_json::Value = serde_json::from_slice(&bytes[16..start]).unwrap();
    edit(&mut manifest);
    let text = serde_json::to_vec(&manifest).unwrap();
    let mut out = bytes[..8].to_vec();
    out.extend_from_slice(&(text.len() as u64).to_le_bytes());
    out.extend_from_slice(&text);
    out.extend_from_slice(&bytes[start..]);
    out
}

type Corruption = (&'static str, Vec<u8>, fn(&StoreError) -> bool);

fn corruptions(good: &[u8]) -> Vec<Corruption> {
    let mut v: Vec<Corruption> = Vec::new();
    let mut b = good.to_vec();
    b[0] = b'X';
    v.push(("bad magic", b, |e| matches!(e, StoreError::BadMagic { .. })));
    let mut b = good.to_vec();
    b[4..8].copy_from_slice(&2u32.to_le_bytes());
    v.push(("bad version", b, |e| matches!(e, StoreError::UnsupportedVersion { .. })));
    let sec = first_section(good);
    for cut in [3, 12, sec - 1, sec + 2, good.len() - 1] {
        v.push(("truncated", good[..cut].to_vec(), |e| matches!(e, StoreError::Truncated { .. })));
    }
    let mut b = good.to_vec();
    b.extend_from_slice(&[0, 0, 0]);
    v.push(("trailing bytes", b, |e| matches!(e, StoreError::TrailingBytes(3))));
    let mut b = good.to_vec();
    b[16] = b'#';
    v.push(("malformed manifest", b, |e| matches!(e, StoreError::Manifest(_))));
    let n = good.len();
    let mut b = good.to_vec();
    b[n - 4..].copy_from_slice(&f32::NAN.to_le_bytes());
    v.push(("nan payload", b, |e| matches!(e, StoreError::NonFinite { .. })));
    let mut b = good.to_vec();
    b[n - 4..].copy_from_slice(&f32::INFINITY.to_le_bytes());
    v.push(("inf payload", b, |e| matches!(e, StoreError::NonFinite { .. })));
    // dtype field of the first section
    let name_len = u32::from_le_bytes(good[sec..sec + 4].try_into().unwrap()) as usize;
    let ndim_at = sec + 4 + name_len;
    let ndim = u32::from_le_bytes(good[ndim_at..ndim_at + 4].try_into().unwrap()) as usize;
    let dtype_at = ndim_at + 4 + 8 * ndim;
    let mut b = good.to_vec();
    b[dtype_at..dtype_at + 4].copy_from_slice(&9u32.to_le_bytes());
    v.push(("unknown dtype", b, |e| matches!(e, StoreError::UnknownDType { code: 9, .. })));
    let b = with_manifest(good, |m| m["tensors"][0]["dims"][0] = serde_json::json!(99));
    v.push(("declaration mismatch", b, |e| matches!(e, StoreError::SectionMismatch { .. })));
    let b = with_manifest(good, |m| m["annotations"][0]["cult"]["t_noun"] = serde_json::json!([999]));
    v.push(("invariant violation", b, |e| matches!(e, StoreError::Invariant(_))));
    v
}

fn a7(runs: &[NeuronRun]) -> Outcome {
    let mut round_trips = 0;
    for seed in 0..A7_BUNDLES {
        let bundle = random_bundle(seed);
        let bytes = bundle.to_bytes().expect("encode");
        let back = TraceBundle::from_bytes(&bytes).expect("decode");
        if back.bits_eq(&bundle) && back.to_bytes().expect("re-encode") == bytes {
            round_trips += 1;
        }
    }
    let good = random_bundle(7).to_bytes().unwrap();
    let cases = corruptions(&good);
    let mut rejected = 0;
    let mut escaped = Vec::new();
    for (name, bytes, expected) in &cases {
        match TraceBundle::from_bytes(bytes) {
            Err(e) if expected(&e) => rejected += 1,
            other => escaped.push((*name, other.err().map(|e| e.to_string()))),
        }
    }
    let (bundle, _) = make_planted_traces(&PlantSpec::standard(3)).unwrap();
    let mut inputs = vec![ResultFile::Layers(scan_layers(&bundle, &SelectionRule::default()).unwrap())];
    if let Some(run) = runs.first() {
        inputs.push(ResultFile::Neurons(run.reports.clone()));
        inputs.push(ResultFile::Masking(validate_masking(&run.model, &run.fs, &run.reports, 0).unwrap()));
    }
    let stable = [Format::Svg, Format::Csv]
        .iter()
        .all(|&f| (0..3).map(|_| render(&inputs, f).unwrap()).collect::<Vec<_>>().windows(2).all(|w| w[0] == w[1]));
    outcome(
        "A7",
        round_trips == A7_BUNDLES && rejected == cases.len() && stable,
        format!(
            "bit-exact round trips {round_trips}/{A7_BUNDLES}; corruptions rejected {rejected}/{} {escaped:?}; SVG/CSV byte-stable: {stable}",
            cases.len()
        ),
    )
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    if args.iter().any(|a| a == "--list") {
        for id in ["A1", "A2", "A3", "A4", "A5", "A6", "A7"] {
            println!("{id}: test");
        }
        return;
    }
    let mut results = vec![a1()];
    let runs: Vec<NeuronRun> = std::thread::scope(|s| {
        let a2_handle = s.spawn(a2);
        let handles: Vec<_> = (0..A3_SEEDS).map(|seed| s.spawn(move || neuron_run(seed))).collect();
        let runs = handles.into_iter().map(|h| h.join().expect("neuron run")).collect();
        results.push(a2_handle.join().expect("A2"));
        runs
    });
    results.push(a3(&runs));
    results.push(a4(&runs));
    results.push(a5(&runs));
    results.push(a6());
    results.push(a7(&runs));

    let mut unexpected = Vec::new();
    for r in &results {
        let expected_fail = EXPECTED_FAILURES.contains(&r.id);
        let tag = match (r.pass, expected_fail) {
            (true, false) => "PASS",
            (false, true) => "FAIL (expected)",
            (false, false) => "FAIL",
            (true, true) => "PASS (unexpected)",
        };
        println!("{} {tag}: {}", r.id, r.detail);
        if r.pass == expected_fail {
            unexpected.push(r.id);
        }
    }
    if !unexpected.is_empty() {
        eprintln!("unexpected acceptance results: {unexpected:?}");
        std::process::exit(1);
    }
}
