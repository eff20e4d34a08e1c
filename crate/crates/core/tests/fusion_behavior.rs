//! Fusion-in-the-encoder behavior: exact identity embedding, near-uniform
//! startup weights, activation traces, gradient correctness of the mixer
//! inside the full model, padding invariance and checkpoint round-trips.

mod common;

use adapterlab::adapters::{
    deserialize_adapter, make_adapter, serialize_adapter, AdapterConfig, InitStyle,
};
use adapterlab::backbone::{encoder_forward, BackboneParams, HookPlan, TokenBatch};
use adapterlab::fusion::{
    deserialize_fusion, fusion_init, serialize_fusion, trace_activations, FusionConfig,
};
use adapterlab::gradcheck::grad_check;
use adapterlab::model::{collect_logits, Assembly, ClassifierHead};
use adapterlab::rng::SplitRng;
use adapterlab::tape::Tape;
use adapterlab::tasks::TaskInstance;
use adapterlab::tensor::{ParamGroup, Tensor};

use common::{overwrite_backbone, overwrite_group, small_backbone, tiny_backbone};

fn random_instances(n: usize, vocab: u32, seed: u64) -> Vec<TaskInstance> {
    let mut rng = SplitRng::new(seed);
    (0..n)
        .map(|_| {
            let len = 4 + rng.below(8);
            let mut tokens = vec![2u32];
            for _ in 1..len {
                tokens.push(3 + rng.below((vocab - 3) as usize) as u32);
            }
            TaskInstance { tokens, label: rng.below(2) }
        })
        .collect()
}

#[test]
fn single_member_identity_value_equals_single_adapter_model() {
    let cfg = small_backbone();
    let root = SplitRng::new(42);
    let backbone = BackboneParams::init(&cfg, &mut root.substream("backbone")).unwrap();
    // a non-trivial adapter: random projections on both sides
    let mut acfg = AdapterConfig::pfeiffer(4);
    acfg.init_style = InitStyle::FullRandom;
    let phi = make_adapter(&cfg, &acfg, "solo", 7).unwrap();
    let head = ClassifierHead::init("solo", cfg.hidden_dim, 2, &mut root.substream("head"));

    let mut psi = fusion_init(&cfg, &[&phi], "solo", 3, FusionConfig::default()).unwrap();
    for layer in &mut psi.layers {
        layer.v.data.copy_from_slice(&Tensor::eye("", cfg.hidden_dim).data);
    }

    let instances = random_instances(200, cfg.vocab_size as u32, 5);
    let adapter_logits = collect_logits(
        &Assembly { backbone: &backbone, hooks: HookPlan::Adapter(&phi), head: &head },
        &instances,
        16,
    )
    .unwrap();
    let fused_logits = collect_logits(
        &Assembly {
            backbone: &backbone,
            hooks: HookPlan::Fusion { members: vec![&phi], psi: &psi },
            head: &head,
        },
        &instances,
        16,
    )
    .unwrap();
    let mut max_abs = 0.0f64;
    for (a, b) in adapter_logits.iter().zip(&fused_logits) {
        for (x, y) in a.iter().zip(b) {
            max_abs = max_abs.max((x - y).abs());
        }
    }
    assert_eq!(max_abs, 0.0, "fused and single-adapter logits differ");
}

#[test]
fn fresh_fusion_over_identical_members_is_uniform() {
    let cfg = small_backbone(); // d=32 keeps it quick; exactness is structural
    let root = SplitRng::new(1);
    let backbone = BackboneParams::init(&cfg, &mut root.substream("backbone")).unwrap();
    // identical member values under different names: same init seed
    let members: Vec<_> = (0..4)
        .map(|i| make_adapter(&cfg, &AdapterConfig::pfeiffer(4), &format!("m{i}"), 11).unwrap())
        .collect();
    for m in &members[1..] {
        assert_eq!(m.sites[0].down_w.data, members[0].sites[0].down_w.data);
    }
    let refs: Vec<_> = members.iter().collect();
    let psi = fusion_init(&cfg, &refs, "m0", 9, FusionConfig::default()).unwrap();
    let head = ClassifierHead::init("m0", cfg.hidden_dim, 2, &mut root.substream("head"));

    let instances = random_instances(64, cfg.vocab_size as u32, 2); // >= 256 positions
    let assembly = Assembly {
        backbone: &backbone,
        hooks: HookPlan::Fusion { members: refs.clone(), psi: &psi },
        head: &head,
    };
    let trace = trace_activations(&assembly, &instances, 16).unwrap();
    assert!(trace.positions >= 256);
    for layer in &trace.layers {
        for &m in &layer.mean {
            assert!((m - 0.25).abs() < 0.02, "layer {} mean {m}", layer.layer);
        }
    }
}

#[test]
fn fresh_fusion_over_distinct_members_is_near_uniform() {
    let cfg = small_backbone();
    let root = SplitRng::new(21);
    let backbone = BackboneParams::init(&cfg, &mut root.substream("backbone")).unwrap();
    let mut acfg = AdapterConfig::pfeiffer(4);
    acfg.init_style = InitStyle::FullRandom;
    let members: Vec<_> = (0..3)
        .map(|i| make_adapter(&cfg, &acfg, &format!("m{i}"), 100 + i).unwrap())
        .collect();
    let refs: Vec<_> = members.iter().collect();
    let psi = fusion_init(&cfg, &refs, "m0", 9, FusionConfig::default()).unwrap();
    let head = ClassifierHead::init("m0", cfg.hidden_dim, 2, &mut root.substream("head"));
    let instances = random_instances(64, cfg.vocab_size as u32, 3);
    let assembly = Assembly {
        backbone: &backbone,
        hooks: HookPlan::Fusion { members: refs.clone(), psi: &psi },
        head: &head,
    };
    let trace = trace_activations(&assembly, &instances, 16).unwrap();
    for layer in &trace.layers {
        let sum: f64 = layer.mean.iter().sum();
        assert!((sum - 1.0).abs() < 1e-6);
        for &m in &layer.mean {
            assert!((m - 1.0 / 3.0).abs() < 0.02, "layer {} mean {m}", layer.layer);
        }
    }
}

#[test]
fn trace_with_single_member_is_all_ones() {
    let cfg = tiny_backbone();
    let root = SplitRng::new(4);
    let backbone = BackboneParams::init(&cfg, &mut root.substream("backbone")).unwrap();
    let phi = make_adapter(&cfg, &AdapterConfig::pfeiffer(4), "only", 1).unwrap();
    let psi = fusion_init(&cfg, &[&phi], "only", 2, FusionConfig::default()).unwrap();
    let head = ClassifierHead::init("only", cfg.hidden_dim, 2, &mut root.substream("head"));
    let instances = random_instances(10, cfg.vocab_size as u32, 8);
    let assembly = Assembly {
        backbone: &backbone,
        hooks: HookPlan::Fusion { members: vec![&phi], psi: &psi },
        head: &head,
    };
    let trace = trace_activations(&assembly, &instances, 4).unwrap();
    assert_eq!(trace.layers.len(), cfg.num_layers);
    for layer in &trace.layers {
        assert_eq!(layer.mean, vec![1.0]);
    }
}

#[test]
fn drop_last_layer_removes_final_layer_from_trace() {
    let cfg = tiny_backbone();
    let root = SplitRng::new(4);
    let backbone = BackboneParams::init(&cfg, &mut root.substream("backbone")).unwrap();
    let phi = make_adapter(&cfg, &AdapterConfig::pfeiffer(4), "only", 1).unwrap();
    let fc = FusionConfig { drop_last_layer: true, ..Default::default() };
    let psi = fusion_init(&cfg, &[&phi], "only", 2, fc).unwrap();
    let head = ClassifierHead::init("only", cfg.hidden_dim, 2, &mut root.substream("head"));
    let instances = random_instances(6, cfg.vocab_size as u32, 8);
    let assembly = Assembly {
        backbone: &backbone,
        hooks: HookPlan::Fusion { members: vec![&phi], psi: &psi },
        head: &head,
    };
    let trace = trace_activations(&assembly, &instances, 4).unwrap();
    assert_eq!(trace.layers.len(), cfg.num_layers - 1);
    assert!(trace.layers.iter().all(|l| l.layer != cfg.num_layers));
}

#[test]
fn fusion_gradients_in_full_model_match_finite_differences() {
    // d=8, 2 layers, 3 members: check the fusion matrices through the whole
    // classification loss
    let mut cfg = tiny_backbone();
    cfg.hidden_dim = 8;
    cfg.ffn_dim = 16;
    cfg.vocab_size = 20;
    let root = SplitRng::new(33);
    let backbone = BackboneParams::init(&cfg, &mut root.substream("backbone")).unwrap();
    let mut acfg = AdapterConfig::pfeiffer(2);
    acfg.init_style = InitStyle::FullRandom;
    let members: Vec<_> =
        (0..3).map(|i| make_adapter(&cfg, &acfg, &format!("m{i}"), 50 + i).unwrap()).collect();
    let refs: Vec<_> = members.iter().collect();
    let proto_psi = fusion_init(&cfg, &refs, "m0", 4, FusionConfig::default()).unwrap();
    let head = ClassifierHead::init("m0", cfg.hidden_dim, 3, &mut root.substream("head"));

    let batch = TokenBatch::from_rows(&[vec![2, 5, 6, 7], vec![2, 8, 9]]).unwrap();
    let labels = vec![0usize, 2];

    let mut flat = common::flatten(&proto_psi);
    let report = grad_check(
        &mut flat,
        |tape, ps| {
            let (psi, _) = overwrite_group(&proto_psi, ps, 0);
            let assembly = Assembly {
                backbone: &backbone,
                hooks: HookPlan::Fusion { members: refs.clone(), psi: &psi },
                head: &head,
            };
            let (loss, _, _) = assembly.loss(tape, &batch, &labels, None)?;
            Ok(loss)
        },
        1e-5,
        1e-4,
    )
    .unwrap();
    assert!(report.pass(), "{}", report.render());
}

#[test]
fn adapter_gradients_in_full_model_match_finite_differences() {
    let mut cfg = tiny_backbone();
    cfg.hidden_dim = 8;
    cfg.ffn_dim = 16;
    cfg.vocab_size = 20;
    let root = SplitRng::new(35);
    let backbone = BackboneParams::init(&cfg, &mut root.substream("backbone")).unwrap();
    let mut acfg = AdapterConfig::houlsby(2);
    acfg.init_style = InitStyle::FullRandom;
    let proto = make_adapter(&cfg, &acfg, "t", 3).unwrap();
    let head = ClassifierHead::init("t", cfg.hidden_dim, 2, &mut root.substream("head"));
    let batch = TokenBatch::from_rows(&[vec![2, 5, 6, 7, 8]]).unwrap();
    let labels = vec![1usize];
    let mut flat = common::flatten(&proto);
    let report = grad_check(
        &mut flat,
        |tape, ps| {
            let (phi, _) = overwrite_group(&proto, ps, 0);
            let assembly =
                Assembly { backbone: &backbone, hooks: HookPlan::Adapter(&phi), head: &head };
            let (loss, _, _) = assembly.loss(tape, &batch, &labels, None)?;
            Ok(loss)
        },
        1e-5,
        1e-4,
    )
    .unwrap();
    assert!(report.pass(), "{}", report.render());
}

#[test]
fn bottom_only_placement_works_through_hooks_alone() {
    // the tap mechanism expresses bottom-only placement without touching
    // encoder code: a random bottom adapter changes outputs, a zero-init
    // one (with before-only norm wiring) does not
    let cfg = tiny_backbone();
    let backbone = BackboneParams::init(&cfg, &mut SplitRng::new(9).substream("backbone")).unwrap();
    let mut acfg = AdapterConfig::pfeiffer(4);
    acfg.placement = vec![adapterlab::backbone::TapSite::Bottom];
    acfg.pretrained_ln = adapterlab::adapters::PretrainedLn::Before;
    acfg.preset = adapterlab::adapters::Preset::Custom;
    let batch = TokenBatch::from_rows(&[vec![2, 7, 8, 9]]).unwrap();

    let zero = make_adapter(&cfg, &acfg, "z", 1).unwrap();
    let mut t1 = Tape::new();
    let plain = encoder_forward(&mut t1, &backbone, &batch, &HookPlan::None, None).unwrap();
    let mut t2 = Tape::new();
    let hooked = encoder_forward(&mut t2, &backbone, &batch, &HookPlan::Adapter(&zero), None).unwrap();
    assert_eq!(t1.value(plain.hidden), t2.value(hooked.hidden));

    acfg.init_style = InitStyle::FullRandom;
    let live = make_adapter(&cfg, &acfg, "r", 2).unwrap();
    let mut t3 = Tape::new();
    let changed = encoder_forward(&mut t3, &backbone, &batch, &HookPlan::Adapter(&live), None).unwrap();
    assert_ne!(t1.value(plain.hidden), t3.value(changed.hidden));
}

#[test]
fn padding_does_not_change_logits() {
    let cfg = small_backbone();
    let root = SplitRng::new(6);
    let backbone = BackboneParams::init(&cfg, &mut root.substream("backbone")).unwrap();
    let head = ClassifierHead::init("t", cfg.hidden_dim, 2, &mut root.substream("head"));
    let assembly = Assembly { backbone: &backbone, hooks: HookPlan::None, head: &head };

    let seq = vec![2u32, 10, 11, 12, 13];
    // unpadded: alone in a batch
    let unpadded = collect_logits(&assembly, &[TaskInstance { tokens: seq.clone(), label: 0 }], 1)
        .unwrap();
    // padded: batched with a longer sequence so it gains pad positions
    let long = vec![2u32, 20, 21, 22, 23, 24, 25, 26, 27, 28];
    let padded = collect_logits(
        &assembly,
        &[
            TaskInstance { tokens: seq, label: 0 },
            TaskInstance { tokens: long, label: 1 },
        ],
        2,
    )
    .unwrap();
    for (a, b) in unpadded[0].iter().zip(&padded[0]) {
        assert!((a - b).abs() < 1e-10, "{a} vs {b}");
    }
}

#[test]
fn adapter_checkpoint_round_trip_and_fingerprint_guard() {
    let cfg = small_backbone();
    let mut acfg = AdapterConfig::houlsby(8);
    acfg.new_ln = adapterlab::adapters::NewLn::Inside;
    acfg.preset = adapterlab::adapters::Preset::Custom;
    acfg.init_style = InitStyle::FullRandom;
    let phi = make_adapter(&cfg, &acfg, "ser", 77).unwrap();

    let dir = std::env::temp_dir().join(format!("adapter-ckpt-{}", std::process::id()));
    let path = dir.join("ser.adpt");
    serialize_adapter(&phi, serde_json::json!({"dev_accuracy": 0.93, "seed": 77}), &path).unwrap();

    let loaded = deserialize_adapter(&path, &cfg).unwrap();
    assert_eq!(loaded.digest(), phi.digest());
    assert_eq!(loaded.config, phi.config);
    assert_eq!(loaded.task, phi.task);

    // different layer count: hard compatibility error
    let mut other = cfg.clone();
    other.num_layers = 4;
    assert!(matches!(
        deserialize_adapter(&path, &other),
        Err(adapterlab::Error::Compat(_))
    ));
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn fusion_checkpoint_round_trip() {
    let cfg = small_backbone();
    let members: Vec<_> = (0..2)
        .map(|i| make_adapter(&cfg, &AdapterConfig::pfeiffer(4), &format!("m{i}"), i).unwrap())
        .collect();
    let refs: Vec<_> = members.iter().collect();
    let psi = fusion_init(&cfg, &refs, "m1", 8, FusionConfig::default()).unwrap();
    let dir = std::env::temp_dir().join(format!("fusion-ckpt-{}", std::process::id()));
    let path = dir.join("f.adpt");
    serialize_fusion(&psi, serde_json::json!({}), &path).unwrap();
    let loaded = deserialize_fusion(&path, &cfg).unwrap();
    assert_eq!(loaded.digest(), psi.digest());
    assert_eq!(loaded.members, psi.members);
    assert_eq!(loaded.target_task, psi.target_task);
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn backbone_gradients_through_fusion_hooks_match_finite_differences() {
    // gradients must also be right for tensors *upstream* of the hooks
    let mut cfg = tiny_backbone();
    cfg.hidden_dim = 8;
    cfg.ffn_dim = 12;
    cfg.vocab_size = 16;
    cfg.num_layers = 1;
    let root = SplitRng::new(40);
    let proto = BackboneParams::init(&cfg, &mut root.substream("backbone")).unwrap();
    let mut acfg = AdapterConfig::pfeiffer(2);
    acfg.init_style = InitStyle::FullRandom;
    let members: Vec<_> =
        (0..2).map(|i| make_adapter(&cfg, &acfg, &format!("m{i}"), 60 + i).unwrap()).collect();
    let refs: Vec<_> = members.iter().collect();
    let psi = fusion_init(&cfg, &refs, "m0", 4, FusionConfig::default()).unwrap();
    let head = ClassifierHead::init("m0", cfg.hidden_dim, 2, &mut root.substream("head"));
    let batch = TokenBatch::from_rows(&[vec![2, 5, 6]]).unwrap();
    let labels = vec![0usize];
    let mut flat = common::flatten(&proto);
    let report = grad_check(
        &mut flat,
        |tape, ps| {
            let (b, _) = overwrite_backbone(&proto, ps, 0);
            let assembly = Assembly {
                backbone: &b,
                hooks: HookPlan::Fusion { members: refs.clone(), psi: &psi },
                head: &head,
            };
            let (loss, _, _) = assembly.loss(tape, &batch, &labels, None)?;
            Ok(loss)
        },
        1e-5,
        1e-4,
    )
    .unwrap();
    assert!(report.pass(), "{}", report.render());
}
