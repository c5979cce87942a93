use ndarray::{Array2, Ix2};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use culture_probe::intervention::{amplify, mask, scale_latents};
use culture_probe::layer_enhancer::{pipeline_forward, EnhancerModel, ToyPipeline, ToyPipelineSpec};
use culture_probe::synth_fixtures::{make_planted_traces, CulturePlant, PlantSpec};
use culture_probe::topk_sae::{init_sae, train, SaeTrainConfig};
use culture_probe::trace_store::TraceBundle;

fn spec_strategy() -> impl Strategy<Value = PlantSpec> {
    (3usize..6, 1usize..3, 5usize..8, 1usize..3, 1usize..4, any::<u64>()).prop_flat_map(|(l, h, s, b, n, seed)| {
        (0..l, 0.05f64..1.0).prop_map(move |(planted_layer, boost)| PlantSpec {
            n_layers: l,
            n_heads: h,
            seq_len: s,
            batch: b,
            planted_layer,
            boost,
            n_pairs: n,
            cultures: vec![
                CulturePlant { label: "x".into(), latents: vec![0] },
                CulturePlant { label: "y".into(), latents: vec![1] },
            ],
            noise_scale: 1.0,
            seed,
            sae_dataset: None,
        })
    })
}

fn header_end(bytes: &[u8]) -> usize {
    16 + u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize
}

/// Offsets of every magic, dims and dtype byte.
fn structural_offsets(bytes: &[u8], n_sections: usize) -> Vec<usize> {
    let mut out: Vec<usize> = (0..4).collect();
    let mut pos = header_end(bytes);
    let u32_at = |p: usize| u32::from_le_bytes(bytes[p..p + 4].try_into().unwrap()) as usize;
    for _ in 0..n_sections {
        pos += 4 + u32_at(pos);
        let ndim = u32_at(pos);
        pos += 4;
        let mut numel = 1;
        for d in 0..ndim {
            let at = pos + 8 * d;
            numel *= u64::from_le_bytes(bytes[at..at + 8].try_into().unwrap()) as usize;
        }
        out.extend(pos..pos + 8 * ndim + 4);
        pos += 8 * ndim + 4 + 4 * numel;
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn bundles_round_trip_bit_exact(spec in spec_strategy()) {
        let (bundle, _) = make_planted_traces(&spec).unwrap();
        let bytes = bundle.to_bytes().unwrap();
        let back = TraceBundle::from_bytes(&bytes).unwrap();
        prop_assert!(back.bits_eq(&bundle));
        prop_assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn structural_byte_corruption_is_rejected(spec in spec_strategy(), pick in any::<prop::sample::Index>(), flip in 1u8..=255) {
        let (bundle, _) = make_planted_traces(&spec).unwrap();
        let mut bytes = bundle.to_bytes().unwrap();
        let offsets = structural_offsets(&bytes, bundle.tensors.len());
        let at = offsets[pick.index(offsets.len())];
        bytes[at] ^= flip;
        prop_assert!(TraceBundle::from_bytes(&bytes).is_err(), "byte {} accepted", at);
    }

    #[test]
    fn fixtures_are_deterministic_and_stochastic(spec in spec_strategy()) {
        let (a, ta) = make_planted_traces(&spec).unwrap();
        let (b, tb) = make_planted_traces(&spec).unwrap();
        prop_assert!(a.bits_eq(&b));
        prop_assert_eq!(ta, tb);
        for t in a.tensors.iter().filter(|t| t.name.starts_with("attn/")) {
            let s = *t.dims.last().unwrap() as usize;
            for row in t.data.chunks(s) {
                let sum: f64 = row.iter().map(|&v| f64::from(v)).sum();
                prop_assert!((sum - 1.0).abs() <= 1e-6, "{} row sums to {}", t.name, sum);
            }
        }
    }

    #[test]
    fn amplify_is_local_affine_and_masks_at_minus_one(seed in any::<u64>(), lambda in -1.0f64..8.0) {
        let model = init_sae(8, 24, 5, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Array2::from_shape_fn((6, 8), |_| rng.sample::<f32, _>(StandardNormal));
        let set: Vec<usize> = (0..24).filter(|_| rng.random_bool(0.3)).collect();

        let z = model.encode(&x.view()).unwrap();
        let mut scaled = z.clone();
        scale_latents(&mut scaled, &set, lambda).unwrap();
        for m in (0..24).filter(|m| !set.contains(m)) {
            for (a, b) in z.column(m).iter().zip(scaled.column(m)) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }

        let xd = x.clone().into_dyn();
        let at = |l: f64| amplify(&model, &xd.view(), &set, l).unwrap().into_dimensionality::<Ix2>().unwrap();
        let (y0, y1, yl) = (at(0.0), at(1.0), at(lambda));
        for ((a, b), c) in y0.iter().zip(y1.iter()).zip(yl.iter()) {
            let predicted = f64::from(*a) + lambda * (f64::from(*b) - f64::from(*a));
            prop_assert!((predicted - f64::from(*c)).abs() <= 1e-5 * (1.0 + predicted.abs()));
        }
        let masked = mask(&model, &xd.view(), &set).unwrap();
        let minus_one = amplify(&model, &xd.view(), &set, -1.0).unwrap();
        prop_assert!(masked.iter().zip(minus_one.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn zero_output_projection_is_identity(seed in any::<u64>(), prompt in any::<u64>()) {
        let pipe = ToyPipeline::build(ToyPipelineSpec::standard(seed)).unwrap();
        let mut e = EnhancerModel::init(16, 4, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        e.w1.mapv_inplace(|_| 3.0 * rng.sample::<f64, _>(StandardNormal));
        e.norm_scale.mapv_inplace(|_| rng.random_range(-4.0..4.0));
        let p = pipe.random_prompt(prompt);
        let bare = pipeline_forward(&pipe, None, &p.view()).unwrap();
        let adapted = pipeline_forward(&pipe, Some(&e), &p.view()).unwrap();
        prop_assert!(bare.iter().zip(adapted.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn decoder_atoms_stay_unit_norm(seed in any::<u64>(), steps in 1usize..20) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = Array2::from_shape_fn((64, 12), |_| rng.sample::<f32, _>(StandardNormal));
        let model = init_sae(12, 20, 3, seed).unwrap();
        let cfg = SaeTrainConfig { steps, batch_size: 16, seed, ..Default::default() };
        let (trained, losses) = train(&model, &data.view(), &cfg).unwrap();
        prop_assert_eq!(losses.len(), steps);
        for n in trained.atom_norms() {
            prop_assert!((n - 1.0).abs() <= 1e-5, "atom norm {}", n);
        }
    }
}
