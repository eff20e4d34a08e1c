//! Relatedness structure: full overlap means perfect transfer, zero overlap
//! means zero information, both verified by independent oracles.

mod common;

use adapterlab::backbone::{pretrain_mlm, MlmTrainConfig};
use adapterlab::model::Assembly;
use adapterlab::tasks::{generate_suite, RelatednessLink, SuiteConfig, TaskKind, TaskSpec};
use adapterlab::training::{evaluate, train_baseline, BaselineMode, TrainConfig};

use common::small_backbone;

fn keyword_spec(name: &str, train: usize, links: Vec<RelatednessLink>) -> TaskSpec {
    TaskSpec {
        name: name.into(),
        kind: TaskKind::Keyword,
        num_classes: 4,
        markers_per_class: 2,
        train_size: train,
        dev_size: 100,
        test_size: 100,
        links,
        min_len: None,
        max_len: None,
    }
}

#[test]
fn full_overlap_clone_transfers_perfectly() {
    // a model trained on A is evaluated on its clone B without any tuning:
    // same marker-to-label map, so accuracy must carry over
    let cfg = small_backbone();
    let suite_cfg = SuiteConfig {
        tasks: vec![
            keyword_spec("source", 400, Vec::new()),
            TaskSpec {
                name: "mirror".into(),
                kind: TaskKind::Clone,
                num_classes: 4,
                markers_per_class: 2,
                train_size: 100,
                dev_size: 100,
                test_size: 100,
                links: vec![RelatednessLink { task: "source".into(), coefficient: 1.0 }],
                min_len: None,
                max_len: None,
            },
        ],
        vocab_size: cfg.vocab_size,
        max_seq_len: cfg.max_seq_len,
        corpus_size: 300,
    };
    let suite = generate_suite(&suite_cfg, 5150).unwrap();
    let mlm = MlmTrainConfig { steps: 600, batch_size: 16, base_lr: 5e-3, seed: 2, ..Default::default() };
    let (backbone, _) = pretrain_mlm(&cfg, &suite.corpus, &mlm).unwrap();

    let tc = TrainConfig {
        base_lr: 3e-3,
        max_epochs: 12,
        early_stop_patience: 6,
        schedule: adapterlab::optim::Schedule::Constant,
        ..TrainConfig::adapter_defaults(3)
    };
    let run = train_baseline(&backbone, &[suite.task("source").unwrap()], BaselineMode::Full, &tc)
        .unwrap();
    let trained = run.backbone.unwrap();
    let source_acc = run.record.final_dev_accuracy;
    assert!(source_acc > 0.95, "source model reached only {source_acc}");

    let assembly = Assembly {
        backbone: &trained,
        hooks: adapterlab::backbone::HookPlan::None,
        head: &run.heads[0],
    };
    let mirror_acc = evaluate(&assembly, &suite.task("mirror").unwrap().dev, 64).unwrap().accuracy;
    assert!(
        mirror_acc >= source_acc - 0.03,
        "transfer to the full-overlap clone lost accuracy: {mirror_acc} vs {source_acc}"
    );
}

#[test]
fn zero_overlap_markers_carry_no_information() {
    // bag-of-marker features of A estimated against B's labels over 10k
    // samples: every marker's mutual information is below 0.01 bits
    let cfg = small_backbone();
    let suite_cfg = SuiteConfig {
        tasks: vec![
            keyword_spec("a", 200, Vec::new()),
            keyword_spec("b", 10_000, Vec::new()),
        ],
        vocab_size: cfg.vocab_size,
        max_seq_len: cfg.max_seq_len,
        corpus_size: 50,
    };
    let suite = generate_suite(&suite_cfg, 777).unwrap();
    let a_markers = suite.task("a").unwrap().all_markers();
    let b = suite.task("b").unwrap();
    let samples: Vec<_> = b.train.iter().chain(&b.dev).chain(&b.test).collect();
    assert!(samples.len() >= 10_000);

    for &marker in &a_markers {
        // joint counts over (presence, label)
        let mut joint = vec![[0usize; 2]; b.num_classes];
        for inst in &samples {
            let present = inst.tokens.contains(&marker) as usize;
            joint[inst.label][present] += 1;
        }
        let n = samples.len() as f64;
        let mut mi = 0.0;
        for x in 0..2 {
            let px: f64 = joint.iter().map(|row| row[x]).sum::<usize>() as f64 / n;
            if px == 0.0 {
                continue;
            }
            for (y, row) in joint.iter().enumerate() {
                let py: f64 = joint[y].iter().sum::<usize>() as f64 / n;
                let pxy = row[x] as f64 / n;
                if pxy > 0.0 {
                    mi += pxy * (pxy / (px * py)).log2();
                }
            }
        }
        assert!(mi < 0.01, "marker {marker} carries {mi} bits about the other task");
    }
}
