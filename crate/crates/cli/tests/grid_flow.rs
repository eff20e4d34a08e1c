//! Grid-search behavior: degenerate grids reduce to single runs, and the
//! outputs carry the ranked table plus progressive marginals.

use adapterlab::adapters::{NewLn, PretrainedLn};
use adapterlab::backbone::{BackboneConfig, MlmTrainConfig};
use adapterlab::optim::Schedule;
use adapterlab::tape::Activation;
use adapterlab::tasks::{generate_suite, SuiteConfig, TaskKind, TaskSpec};
use adapterlab::training::{train_st_adapter, TrainConfig};
use adapterlab_cli::config::{ExperimentConfig, Mode, TrainSection, SCHEMA_VERSION};
use adapterlab_cli::grid::{grid_search, GridConfig, GridPlacement, GridSpec};

fn tiny_experiment() -> ExperimentConfig {
    let backbone = BackboneConfig {
        vocab_size: 48,
        max_seq_len: 16,
        hidden_dim: 16,
        num_layers: 2,
        num_heads: 2,
        ffn_dim: 32,
        dropout_rate: 0.0,
        ffn_activation: Activation::Gelu,
        pooling: Default::default(),
    };
    let task = TaskSpec {
        name: "probe".into(),
        kind: TaskKind::Keyword,
        num_classes: 2,
        markers_per_class: 2,
        train_size: 60,
        dev_size: 40,
        test_size: 40,
        links: Vec::new(),
        min_len: None,
        max_len: None,
    };
    let quick = TrainConfig {
        base_lr: 5e-3,
        batch_size: 16,
        max_epochs: 2,
        early_stop_patience: 2,
        schedule: Schedule::Constant,
        ..TrainConfig::adapter_defaults(0)
    };
    ExperimentConfig {
        schema_version: SCHEMA_VERSION,
        suite: SuiteConfig { tasks: vec![task], vocab_size: 48, max_seq_len: 16, corpus_size: 60 },
        suite_seed: 5,
        modes: vec![Mode::StAdapter],
        train: TrainSection {
            mlm: MlmTrainConfig { steps: 40, batch_size: 8, base_lr: 5e-3, ..Default::default() },
            adapter: quick.clone(),
            fusion: quick.clone(),
            baseline: quick,
        },
        adapter: adapterlab::adapters::AdapterConfig::pfeiffer(4),
        fusion: Default::default(),
        fusion_members: Vec::new(),
        fusion_targets: Vec::new(),
        seeds: vec![1],
        backbone,
    }
}

#[test]
fn degenerate_single_cell_grid_equals_direct_run() {
    let experiment = tiny_experiment();
    let grid = GridSpec {
        placements: vec![GridPlacement::Top],
        pretrained_ln: vec![PretrainedLn::BeforeAndAfter],
        new_ln: vec![NewLn::None],
        reduction_factors: vec![4],
        nonlinearities: vec!["relu".into()],
        probe_tasks: vec!["probe".into()],
        max_cells: 600,
    };
    assert_eq!(grid.cell_count(), 1);
    let cells = grid.enumerate_cells().unwrap();

    let out = std::env::temp_dir().join(format!("grid-one-{}", std::process::id()));
    std::fs::remove_dir_all(&out).ok();
    let cfg = GridConfig { schema_version: 1, experiment: experiment.clone(), grid };
    let results = grid_search(&cfg, &out, false, 1).unwrap();
    assert_eq!(results.rows.len(), 1);

    // the one cell's accuracy equals a direct single-task run with the same
    // backbone, config and seed
    let suite = generate_suite(&experiment.suite, experiment.suite_seed).unwrap();
    let mlm = MlmTrainConfig { seed: 1, ..experiment.train.mlm.clone() };
    let (backbone, _) =
        adapterlab::backbone::pretrain_mlm(&experiment.backbone, &suite.corpus, &mlm).unwrap();
    let tc = TrainConfig { seed: 1, ..experiment.train.adapter.clone() };
    let direct =
        train_st_adapter(&backbone, suite.task("probe").unwrap(), &cells[0].config, &tc).unwrap();
    assert_eq!(results.rows[0].per_task["probe"], direct.record.final_dev_accuracy);
    assert_eq!(results.best.aggregate, direct.record.final_dev_accuracy);

    assert!(out.join("grid.csv").exists());
    assert!(out.join("marginals.md").exists());
    assert!(out.join("best.json").exists());
    std::fs::remove_dir_all(&out).ok();
}

#[test]
fn small_grid_ranks_and_marginalizes() {
    let experiment = tiny_experiment();
    let grid = GridSpec {
        placements: vec![GridPlacement::Top, GridPlacement::Both],
        pretrained_ln: vec![PretrainedLn::BeforeAndAfter, PretrainedLn::Before],
        new_ln: vec![NewLn::None],
        reduction_factors: vec![4],
        nonlinearities: vec!["relu".into(), "swish".into()],
        probe_tasks: vec!["probe".into()],
        max_cells: 600,
    };
    assert_eq!(grid.cell_count(), 8);
    let out = std::env::temp_dir().join(format!("grid-small-{}", std::process::id()));
    std::fs::remove_dir_all(&out).ok();
    let cfg = GridConfig { schema_version: 1, experiment, grid };
    let results = grid_search(&cfg, &out, false, 2).unwrap();
    assert_eq!(results.rows.len(), 8);
    // ranked descending
    for pair in results.rows.windows(2) {
        assert!(pair[0].aggregate >= pair[1].aggregate);
        assert_eq!(pair[0].rank + 1, pair[1].rank);
    }
    // marginal tables follow the progressive conditioning scheme
    assert_eq!(results.marginals.len(), 3);
    assert_eq!(results.marginals[0].axis, "placement");
    assert_eq!(results.marginals[0].rows.len(), 2);
    assert_eq!(results.marginals[1].axis, "pretrained_ln");
    assert!(results.marginals[1].conditioned_on[0].starts_with("placement="));
    assert_eq!(results.marginals[2].axis, "new_ln");
    let csv = std::fs::read_to_string(out.join("grid.csv")).unwrap();
    assert_eq!(csv.lines().count(), 9);
    std::fs::remove_dir_all(&out).ok();
}
