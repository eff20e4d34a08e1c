//! Experiment orchestration: pretraining, stage-1 and stage-2 training and
//! the baselines over a task suite, with per-run records, checkpoints, an
//! activation trace per fusion run and a summary table of mean and standard
//! deviation over the seed set.
//!
//! Output directory layout:
//!
//! ```text
//! out/
//!   config.json                      the experiment config as run
//!   suite/{task}.{train,dev,test}.jsonl + manifest.json
//!   backbone/seed{S}.adpt
//!   adapters/{task}/seed{S}.adpt     stage-1 single-task adapters
//!   mt/seed{S}/theta.adpt, mt/seed{S}/{task}.adpt
//!   runs/{mode}/{task|joint}/seed{S}/record.json
//!   fusion_st/{target}/seed{S}.adpt + trace-seed{S}.json   (same for fusion_mt)
//!   summary.json / summary.csv / summary.md
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use adapterlab::adapters::{deserialize_adapter, serialize_adapter, AdapterParams};
use adapterlab::backbone::{load_backbone, pretrain_mlm, save_backbone, BackboneParams};
use adapterlab::checkpoint::write_atomic;
use adapterlab::error::{Error, Result};
use adapterlab::fusion::serialize_fusion;
use adapterlab::model::save_head;
use adapterlab::tasks::{export_jsonl, generate_suite, Suite};
use adapterlab::training::{
    train_baseline, train_fusion, train_mt_adapters, train_st_adapter, BaselineMode, TrainConfig,
};
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, Mode};
use crate::pool::parallel_map;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SummaryCell {
    pub mean: f64,
    pub std: f64,
    pub accuracies: Vec<f64>,
}

impl SummaryCell {
    fn from_accuracies(accs: Vec<f64>) -> SummaryCell {
        let n = accs.len() as f64;
        let mean = accs.iter().sum::<f64>() / n;
        let var = accs.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
        SummaryCell { mean, std: var.sqrt(), accuracies: accs }
    }
}

/// Dev-set accuracy per task per mode, aggregated over seeds.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Summary {
    pub schema_version: u32,
    pub tasks: Vec<String>,
    pub columns: Vec<String>,
    pub seeds: Vec<u64>,
    pub cells: BTreeMap<String, BTreeMap<String, SummaryCell>>,
}

impl Summary {
    pub fn read(path: &Path) -> Result<Summary> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &serde_json::to_vec_pretty(self)?)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("task");
        for c in &self.columns {
            out.push_str(&format!(",{c}_mean,{c}_std"));
        }
        out.push('\n');
        for task in &self.tasks {
            out.push_str(task);
            for c in &self.columns {
                match self.cells.get(task).and_then(|m| m.get(c)) {
                    Some(cell) => out.push_str(&format!(",{:.4},{:.4}", cell.mean, cell.std)),
                    None => out.push_str(",,"),
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn to_markdown(&self) -> String {
        let mut out = String::from("# Results (dev accuracy, mean +/- std over seeds)\n\n| task |");
        for c in &self.columns {
            out.push_str(&format!(" {c} |"));
        }
        out.push_str("\n|---|");
        out.push_str(&"---|".repeat(self.columns.len()));
        out.push('\n');
        for task in &self.tasks {
            out.push_str(&format!("| {task} |"));
            for c in &self.columns {
                match self.cells.get(task).and_then(|m| m.get(c)) {
                    Some(cell) => out.push_str(&format!(
                        " {:.2} +/- {:.2} |",
                        cell.mean * 100.0,
                        cell.std * 100.0
                    )),
                    None => out.push_str(" - |"),
                }
            }
            out.push('\n');
        }
        out
    }
}

fn seeded(tc: &TrainConfig, seed: u64) -> TrainConfig {
    TrainConfig { seed, ..tc.clone() }
}

fn record_path(out: &Path, mode: Mode, unit: &str, seed: u64) -> PathBuf {
    out.join("runs").join(mode.as_str()).join(unit).join(format!("seed{seed}")).join("record.json")
}

#[derive(Debug)]
pub struct ExperimentOutput {
    pub summary: Summary,
    pub out_dir: PathBuf,
}

/// Execute every configured mode in dependency order. Refuses a non-empty
/// output directory unless `force` wipes it first.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    out_dir: &Path,
    force: bool,
    workers: usize,
) -> Result<ExperimentOutput> {
    cfg.validate()?;
    if cfg.modes.contains(&Mode::FusionSt) && !cfg.modes.contains(&Mode::StAdapter) {
        return Err(Error::Compat(
            "fusion_st requires its stage-1 artifacts: add st_adapter to modes".into(),
        ));
    }
    if cfg.modes.contains(&Mode::FusionMt) && !cfg.modes.contains(&Mode::MtAdapters) {
        return Err(Error::Compat(
            "fusion_mt requires its stage-1 artifacts: add mt_adapters to modes".into(),
        ));
    }

    if out_dir.exists() && std::fs::read_dir(out_dir)?.next().is_some() {
        if !force {
            return Err(Error::Compat(format!(
                "output directory {} already contains results (use --force to overwrite)",
                out_dir.display()
            )));
        }
        std::fs::remove_dir_all(out_dir)?;
    }
    std::fs::create_dir_all(out_dir)?;
    write_atomic(&out_dir.join("config.json"), &serde_json::to_vec_pretty(cfg)?)?;

    let suite = write_suite(cfg, out_dir)?;
    let backbones = pretrain_all(cfg, &suite, out_dir, workers)?;

    let tasks: Vec<String> = cfg.suite.tasks.iter().map(|t| t.name.clone()).collect();
    let mut cells: BTreeMap<String, BTreeMap<String, SummaryCell>> = BTreeMap::new();
    let mut record_cell = |task: &str, mode: Mode, accs: Vec<f64>| {
        cells
            .entry(task.to_string())
            .or_default()
            .insert(mode.as_str().to_string(), SummaryCell::from_accuracies(accs));
    };

    // stage-1 artifacts kept for stage 2
    let mut st_adapters: BTreeMap<(String, u64), AdapterParams> = BTreeMap::new();
    let mut mt_artifacts: BTreeMap<u64, (BackboneParams, Vec<AdapterParams>)> = BTreeMap::new();

    for mode in Mode::all() {
        if !cfg.modes.contains(&mode) {
            continue;
        }
        match mode {
            Mode::HeadOnly | Mode::Full => {
                let jobs: Vec<(String, u64)> = tasks
                    .iter()
                    .flat_map(|t| cfg.seeds.iter().map(move |s| (t.clone(), *s)))
                    .collect();
                let results = parallel_map(jobs, workers, |(task, seed)| -> Result<_> {
                    let dataset = suite.task(&task)?;
                    let bmode = if mode == Mode::HeadOnly {
                        BaselineMode::HeadOnly
                    } else {
                        BaselineMode::Full
                    };
                    let run = train_baseline(
                        &backbones[&seed],
                        &[dataset],
                        bmode,
                        &seeded(&cfg.train.baseline, seed),
                    )?;
                    Ok((task, seed, run))
                });
                let fp = cfg.backbone.fingerprint();
                let mut accs: BTreeMap<String, Vec<f64>> = BTreeMap::new();
                for r in results {
                    let (task, seed, run) = r?;
                    let run_dir = record_path(out_dir, mode, &task, seed);
                    run.record.write(&run_dir)?;
                    let dir = run_dir.parent().unwrap();
                    save_head(
                        &run.heads[0],
                        &fp,
                        serde_json::json!({"seed": seed}),
                        &dir.join("head.adpt"),
                    )?;
                    if let Some(theta) = &run.backbone {
                        save_backbone(
                            theta,
                            serde_json::json!({"seed": seed, "mode": mode.as_str()}),
                            &dir.join("theta.adpt"),
                        )?;
                    }
                    accs.entry(task).or_default().push(run.record.final_dev_accuracy);
                }
                for (task, a) in accs {
                    record_cell(&task, mode, a);
                }
            }
            Mode::StAdapter => {
                let jobs: Vec<(String, u64)> = tasks
                    .iter()
                    .flat_map(|t| cfg.seeds.iter().map(move |s| (t.clone(), *s)))
                    .collect();
                let results = parallel_map(jobs, workers, |(task, seed)| -> Result<_> {
                    let dataset = suite.task(&task)?;
                    let run = train_st_adapter(
                        &backbones[&seed],
                        dataset,
                        &cfg.adapter,
                        &seeded(&cfg.train.adapter, seed),
                    )?;
                    Ok((task, seed, run))
                });
                let mut accs: BTreeMap<String, Vec<f64>> = BTreeMap::new();
                for r in results {
                    let (task, seed, run) = r?;
                    run.record.write(&record_path(out_dir, mode, &task, seed))?;
                    serialize_adapter(
                        &run.adapter,
                        serde_json::json!({
                            "task": task,
                            "seed": seed,
                            "dev_accuracy": run.record.final_dev_accuracy,
                        }),
                        &out_dir.join("adapters").join(&task).join(format!("seed{seed}.adpt")),
                    )?;
                    save_head(
                        &run.head,
                        &cfg.backbone.fingerprint(),
                        serde_json::json!({"seed": seed}),
                        &out_dir.join("adapters").join(&task).join(format!("seed{seed}.head.adpt")),
                    )?;
                    accs.entry(task.clone()).or_default().push(run.record.final_dev_accuracy);
                    st_adapters.insert((task, seed), run.adapter);
                }
                for (task, a) in accs {
                    record_cell(&task, mode, a);
                }
            }
            Mode::MtAdapters => {
                let jobs: Vec<u64> = cfg.seeds.clone();
                let task_refs: Vec<&adapterlab::tasks::TaskDataset> =
                    tasks.iter().map(|t| suite.task(t)).collect::<Result<_>>()?;
                let results = parallel_map(jobs, workers, |seed| -> Result<_> {
                    let run = train_mt_adapters(
                        &backbones[&seed],
                        &task_refs,
                        &cfg.adapter,
                        &seeded(&cfg.train.mt, seed),
                    )?;
                    Ok((seed, run))
                });
                let mut accs: BTreeMap<String, Vec<f64>> = BTreeMap::new();
                for r in results {
                    let (seed, run) = r?;
                    run.record.write(&record_path(out_dir, mode, "joint", seed))?;
                    let mt_dir = out_dir.join("mt").join(format!("seed{seed}"));
                    save_backbone(
                        &run.backbone,
                        serde_json::json!({"seed": seed, "mode": "mt_adapters"}),
                        &mt_dir.join("theta.adpt"),
                    )?;
                    for adapter in &run.adapters {
                        serialize_adapter(
                            adapter,
                            serde_json::json!({"seed": seed, "mode": "mt_adapters"}),
                            &mt_dir.join(format!("{}.adpt", adapter.task)),
                        )?;
                    }
                    for head in &run.heads {
                        save_head(
                            head,
                            &cfg.backbone.fingerprint(),
                            serde_json::json!({"seed": seed, "mode": "mt_adapters"}),
                            &mt_dir.join(format!("{}.head.adpt", head.task)),
                        )?;
                    }
                    for (task, acc) in &run.record.per_task_dev {
                        accs.entry(task.clone()).or_default().push(*acc);
                    }
                    mt_artifacts.insert(seed, (run.backbone, run.adapters));
                }
                for (task, a) in accs {
                    record_cell(&task, mode, a);
                }
            }
            Mode::FusionSt | Mode::FusionMt => {
                let member_names = cfg.member_names();
                let targets = cfg.target_names();
                let jobs: Vec<(String, u64)> = targets
                    .iter()
                    .flat_map(|t| cfg.seeds.iter().map(move |s| (t.clone(), *s)))
                    .collect();
                let results = parallel_map(jobs, workers, |(target, seed)| -> Result<_> {
                    let dataset = suite.task(&target)?;
                    let (theta, members): (&BackboneParams, Vec<&AdapterParams>) =
                        if mode == Mode::FusionSt {
                            let members = member_names
                                .iter()
                                .map(|m| {
                                    st_adapters.get(&(m.clone(), seed)).ok_or_else(|| {
                                        Error::Compat(format!(
                                            "missing stage-1 adapter for {m} seed {seed}"
                                        ))
                                    })
                                })
                                .collect::<Result<_>>()?;
                            (&backbones[&seed], members)
                        } else {
                            let (theta, adapters) = mt_artifacts.get(&seed).ok_or_else(|| {
                                Error::Compat(format!("missing joint stage-1 artifacts for seed {seed}"))
                            })?;
                            let members = member_names
                                .iter()
                                .map(|m| {
                                    adapters.iter().find(|a| &a.task == m).ok_or_else(|| {
                                        Error::Compat(format!("missing joint adapter for {m}"))
                                    })
                                })
                                .collect::<Result<_>>()?;
                            (theta, members)
                        };
                    let run = train_fusion(
                        theta,
                        &members,
                        dataset,
                        &cfg.fusion,
                        &seeded(&cfg.train.fusion, seed),
                        None,
                    )?;
                    Ok((target, seed, run))
                });
                let mut accs: BTreeMap<String, Vec<f64>> = BTreeMap::new();
                for r in results {
                    let (target, seed, run) = r?;
                    run.record.write(&record_path(out_dir, mode, &target, seed))?;
                    let dir = out_dir.join(mode.as_str()).join(&target);
                    serialize_fusion(
                        &run.psi,
                        serde_json::json!({"seed": seed, "target": target}),
                        &dir.join(format!("seed{seed}.adpt")),
                    )?;
                    save_head(
                        &run.head,
                        &cfg.backbone.fingerprint(),
                        serde_json::json!({"seed": seed, "target": target}),
                        &dir.join(format!("seed{seed}.head.adpt")),
                    )?;
                    write_atomic(
                        &dir.join(format!("trace-seed{seed}.json")),
                        &serde_json::to_vec_pretty(&run.trace)?,
                    )?;
                    accs.entry(target.clone()).or_default().push(run.record.final_dev_accuracy);
                }
                for (task, a) in accs {
                    record_cell(&task, mode, a);
                }
            }
        }
    }
    drop(record_cell);

    let summary = Summary {
        schema_version: crate::config::SCHEMA_VERSION,
        tasks,
        columns: Mode::all()
            .iter()
            .filter(|m| cfg.modes.contains(m))
            .map(|m| m.as_str().to_string())
            .collect(),
        seeds: cfg.seeds.clone(),
        cells,
    };
    summary.write(&out_dir.join("summary.json"))?;
    write_atomic(&out_dir.join("summary.csv"), summary.to_csv().as_bytes())?;
    write_atomic(&out_dir.join("summary.md"), summary.to_markdown().as_bytes())?;
    Ok(ExperimentOutput { summary, out_dir: out_dir.to_path_buf() })
}

/// Generate the suite and export it as line-delimited JSON plus a manifest.
pub fn write_suite(cfg: &ExperimentConfig, out_dir: &Path) -> Result<Suite> {
    let suite = generate_suite(&cfg.suite, cfg.suite_seed)?;
    let dir = out_dir.join("suite");
    std::fs::create_dir_all(&dir)?;
    for task in &suite.tasks {
        export_jsonl(&task.train, &dir.join(format!("{}.train.jsonl", task.name)))?;
        export_jsonl(&task.dev, &dir.join(format!("{}.dev.jsonl", task.name)))?;
        export_jsonl(&task.test, &dir.join(format!("{}.test.jsonl", task.name)))?;
    }
    let manifest = serde_json::json!({
        "schema_version": crate::config::SCHEMA_VERSION,
        "suite_seed": cfg.suite_seed,
        "vocab_size": cfg.suite.vocab_size,
        "tasks": suite.tasks.iter().map(|t| serde_json::json!({
            "name": t.name,
            "kind": t.kind,
            "num_classes": t.num_classes,
            "markers": t.markers,
            "sizes": [t.train.len(), t.dev.len(), t.test.len()],
        })).collect::<Vec<_>>(),
        "corpus_size": suite.corpus.len(),
    });
    write_atomic(&dir.join("manifest.json"), &serde_json::to_vec_pretty(&manifest)?)?;
    Ok(suite)
}

/// Pretrain (or load) one backbone per seed and checkpoint each.
pub fn pretrain_all(
    cfg: &ExperimentConfig,
    suite: &Suite,
    out_dir: &Path,
    workers: usize,
) -> Result<BTreeMap<u64, BackboneParams>> {
    let results = parallel_map(cfg.seeds.clone(), workers, |seed| -> Result<_> {
        let mlm = adapterlab::backbone::MlmTrainConfig { seed, ..cfg.train.mlm.clone() };
        let (params, final_loss) = pretrain_mlm(&cfg.backbone, &suite.corpus, &mlm)?;
        Ok((seed, params, final_loss))
    });
    let mut out = BTreeMap::new();
    for r in results {
        let (seed, params, final_loss) = r?;
        save_backbone(
            &params,
            serde_json::json!({"seed": seed, "final_mlm_loss": final_loss}),
            &out_dir.join("backbone").join(format!("seed{seed}.adpt")),
        )?;
        out.insert(seed, params);
    }
    Ok(out)
}

/// Load the per-seed backbones a previous invocation checkpointed.
pub fn load_backbones(out_dir: &Path, seeds: &[u64]) -> Result<BTreeMap<u64, BackboneParams>> {
    let mut out = BTreeMap::new();
    for &seed in seeds {
        let path = out_dir.join("backbone").join(format!("seed{seed}.adpt"));
        if !path.exists() {
            return Err(Error::Compat(format!(
                "missing backbone checkpoint {} (run the pretrain step first)",
                path.display()
            )));
        }
        out.insert(seed, load_backbone(&path)?);
    }
    Ok(out)
}

/// Load stage-1 single-task adapters a previous invocation checkpointed.
pub fn load_st_adapters(
    out_dir: &Path,
    cfg: &ExperimentConfig,
    names: &[String],
    seed: u64,
) -> Result<Vec<AdapterParams>> {
    let mut out = Vec::new();
    for name in names {
        let path = out_dir.join("adapters").join(name).join(format!("seed{seed}.adpt"));
        if !path.exists() {
            return Err(Error::Compat(format!(
                "missing stage-1 adapter checkpoint {} (run train-adapter first)",
                path.display()
            )));
        }
        out.push(deserialize_adapter(&path, &cfg.backbone)?);
    }
    Ok(out)
}
