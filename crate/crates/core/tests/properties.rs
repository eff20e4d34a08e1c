//! Property tests over the spec's cross-cutting invariants.

use adapterlab::adapters::{make_adapter, param_count, AdapterConfig, NewLn, PretrainedLn};
use adapterlab::backbone::{BackboneConfig, TapSite};
use adapterlab::checkpoint::{parse_container, write_container};
use adapterlab::tape::{Activation, Tape};
use adapterlab::tensor::{ParamGroup, Tensor};
use proptest::prelude::*;

fn activation_strategy() -> impl Strategy<Value = Activation> {
    prop_oneof![
        Just(Activation::Relu),
        Just(Activation::LeakyRelu { slope: 0.01 }),
        Just(Activation::Swish),
        Just(Activation::Gelu),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_sum_to_one_and_stay_positive(
        rows in 1usize..5,
        cols in 1usize..9,
        values in prop::collection::vec(-50.0f64..50.0, 1..40),
    ) {
        let mut data = vec![0.0; rows * cols];
        for (i, v) in data.iter_mut().enumerate() {
            *v = values[i % values.len()];
        }
        let mut tape = Tape::new();
        let x = tape.constant(rows, cols, data).unwrap();
        let s = tape.softmax_rows(x).unwrap();
        let out = tape.value(s);
        for r in 0..rows {
            let row = &out[r * cols..(r + 1) * cols];
            let sum: f64 = row.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12, "row sum {sum}");
            prop_assert!(row.iter().all(|v| *v > 0.0), "non-positive weight in {row:?}");
        }
    }

    #[test]
    fn shared_input_gradient_is_sum_of_single_paths(
        values in prop::collection::vec(-2.0f64..2.0, 4),
        scale in -3.0f64..3.0,
    ) {
        // f(w) = sum(scale * w) + sum(w .* w); gradient = scale + 2w
        let w = Tensor::from_vec("w", &[1, 4], values.clone()).unwrap();
        let mut tape = Tape::new();
        let wv = tape.param(&w).unwrap();
        let scaled = tape.scale(wv, scale).unwrap();
        let sq = tape.mul(wv, wv).unwrap();
        let both = tape.add(scaled, sq).unwrap();
        let loss = tape.sum_all(both).unwrap();
        let grads = tape.backward(loss).unwrap();
        let g = grads.get("w").unwrap();
        for (gv, x) in g.iter().zip(&values) {
            prop_assert!((gv - (scale + 2.0 * x)).abs() < 1e-12);
        }
    }

    #[test]
    fn param_count_matches_traversal_for_any_grid_cell(
        placement_both in any::<bool>(),
        reduction_idx in 0usize..4,
        new_ln_idx in 0usize..4,
        pre_ln_idx in 0usize..4,
        nonlinearity in activation_strategy(),
    ) {
        let cfg = BackboneConfig::toy();
        let adapter = AdapterConfig {
            placement: if placement_both {
                vec![TapSite::Bottom, TapSite::Top]
            } else {
                vec![TapSite::Top]
            },
            reduction_factor: [2, 8, 16, 64][reduction_idx],
            nonlinearity,
            residual: true,
            pretrained_ln: [
                PretrainedLn::None,
                PretrainedLn::Before,
                PretrainedLn::After,
                PretrainedLn::BeforeAndAfter,
            ][pre_ln_idx],
            new_ln: [NewLn::None, NewLn::BeforeAdapter, NewLn::AfterAdapter, NewLn::Inside][new_ln_idx],
            preset: adapterlab::adapters::Preset::Custom,
            init_style: adapterlab::adapters::InitStyle::IdentityZero,
        };
        let phi = make_adapter(&cfg, &adapter, "p", 1).unwrap();
        prop_assert_eq!(phi.num_scalars(), param_count(&adapter, &cfg));
    }

    #[test]
    fn containers_round_trip_bit_exactly(
        shapes in prop::collection::vec((1usize..5, 1usize..5), 1..4),
        seed in any::<u64>(),
    ) {
        let mut rng = adapterlab::SplitRng::new(seed);
        let tensors: Vec<Tensor> = shapes
            .iter()
            .enumerate()
            .map(|(i, (r, c))| Tensor::normal(format!("t{i}"), &[*r, *c], 1.0, &mut rng))
            .collect();
        let refs: Vec<&Tensor> = tensors.iter().collect();
        // write to memory through the same encoder the file writer uses
        let dir = std::env::temp_dir().join(format!("prop-ckpt-{}-{}", std::process::id(), seed));
        let path = dir.join("t.adpt");
        write_container(&path, serde_json::json!({}), "fp", serde_json::json!({}), &refs).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::remove_dir_all(&dir).ok();
        let parsed = parse_container(&bytes).unwrap();
        prop_assert_eq!(parsed.tensors.len(), tensors.len());
        for (orig, got) in tensors.iter().zip(&parsed.tensors) {
            prop_assert_eq!(&orig.name, &got.name);
            prop_assert_eq!(&orig.shape, &got.shape);
            let ob: Vec<u64> = orig.data.iter().map(|v| v.to_bits()).collect();
            let gb: Vec<u64> = got.data.iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(ob, gb);
        }
    }

    #[test]
    fn batching_partitions_every_instance_exactly_once(
        n in 1usize..40,
        batch_size in 1usize..9,
        seed in any::<u64>(),
        epoch in 0u64..4,
    ) {
        let instances: Vec<adapterlab::tasks::TaskInstance> = (0..n)
            .map(|i| adapterlab::tasks::TaskInstance {
                tokens: vec![2, 3 + (i % 5) as u32, 8 + (i / 5) as u32],
                label: i % 2,
            })
            .collect();
        let batches = adapterlab::tasks::batches(&instances, batch_size, seed, epoch).unwrap();
        let total: usize = batches.iter().map(|b| b.labels.len()).sum();
        prop_assert_eq!(total, n);
        for (i, b) in batches.iter().enumerate() {
            if i + 1 < batches.len() {
                prop_assert_eq!(b.labels.len(), batch_size);
            } else {
                prop_assert!(b.labels.len() <= batch_size);
            }
        }
        // same (seed, epoch) reproduces the same order
        let again = adapterlab::tasks::batches(&instances, batch_size, seed, epoch).unwrap();
        for (x, y) in batches.iter().zip(&again) {
            prop_assert_eq!(&x.tokens.ids, &y.tokens.ids);
            prop_assert_eq!(&x.labels, &y.labels);
        }
    }
}
