//! Command-line entry point.
//!
//! Exit codes: 0 success, 2 configuration error, 3 missing or incompatible
//! artifact, 4 budget exceeded.

use std::path::{Path, PathBuf};

use adapterlab::adapters::deserialize_adapter;
use adapterlab::backbone::{load_backbone, HookPlan};
use adapterlab::error::Error;
use adapterlab::fusion::{deserialize_fusion, FusionActivationTrace};
use adapterlab::model::{evaluate, load_head, save_head, Assembly};
use adapterlab::tasks::generate_suite;
use adapterlab::training::{
    train_baseline, train_fusion, train_mt_adapters, train_st_adapter, BaselineMode, TrainConfig,
};
use adapterlab_cli::compare::compare_report;
use adapterlab_cli::config::{load_experiment, ExperimentConfig};
use adapterlab_cli::experiment::{
    load_backbones, load_st_adapters, pretrain_all, run_experiment, write_suite,
};
use adapterlab_cli::grid::{grid_search, load_grid};
use adapterlab_cli::heatmap::{average_traces, export_heatmap};
use adapterlab_cli::pool::parallel_map;
use adapterlab_cli::verify::full_assembly_grad_check;
use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "adapterlab", about = "Adapter and fusion experiments on a miniature transformer encoder", version)]
struct Cli {
    /// experiment (or grid) configuration file
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// output directory for artifacts and reports
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// restrict the configured seed set to this single seed
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// overwrite existing outputs
    #[arg(long, global = true)]
    force: bool,
    /// worker threads for independent runs
    #[arg(long, global = true, default_value_t = 1)]
    workers: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Stage1 {
    St,
    Mt,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SplitArg {
    Dev,
    Test,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain one backbone per seed on the suite's corpus
    Pretrain,
    /// Generate the task suite and export it as line-delimited JSON
    GenTasks,
    /// Train single-task adapters (all tasks, or --task)
    TrainAdapter {
        #[arg(long)]
        task: Option<String>,
    },
    /// Train adapters for all tasks jointly with a trainable backbone
    TrainMta,
    /// Train a fusion layer over stage-1 adapters for each target task
    TrainFusion {
        #[arg(long)]
        target: Option<String>,
        #[arg(long, value_enum, default_value = "st")]
        stage1: Stage1,
    },
    /// Train a baseline: head_only, full, or sequential over all tasks
    TrainBaseline {
        #[arg(long)]
        mode: String,
        #[arg(long)]
        task: Option<String>,
    },
    /// Evaluate a trained artifact on a split
    Eval {
        #[arg(long)]
        mode: String,
        #[arg(long)]
        task: String,
        #[arg(long, value_enum, default_value = "dev")]
        split: SplitArg,
        #[arg(long)]
        eval_seed: Option<u64>,
    },
    /// Exhaustive adapter architecture search over the configured axes
    GridSearch,
    /// Export fusion activation traces as a heatmap CSV
    Heatmap {
        #[arg(long, value_enum, default_value = "st")]
        stage1: Stage1,
        #[arg(long)]
        csv: Option<PathBuf>,
        /// comma-separated 1-based layer selection
        #[arg(long)]
        layers: Option<String>,
    },
    /// Compare two run directories' summaries
    Compare {
        baseline: PathBuf,
        candidate: PathBuf,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Verify analytic gradients of the full fused assembly against
    /// central finite differences
    GradCheck {
        #[arg(long, default_value_t = 1e-5)]
        h: f64,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        #[arg(long, default_value_t = 0)]
        check_seed: u64,
    },
    /// Run the full experiment: pretrain, stage 1, stage 2, summary
    Run,
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Usage(_) | Error::Data(_) | Error::Json(_) | Error::Shape(_)
        | Error::Numeric(_) | Error::Check(_) => 2,
        Error::Io(_) | Error::Format(_) | Error::Compat(_) => 3,
        Error::Budget(_) => 4,
    }
}

fn main() {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(code) => std::process::exit(code),
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(exit_code(&e));
        }
    }
}

fn require_config(cli: &Cli) -> Result<ExperimentConfig, Error> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Error::Config("--config PATH is required for this command".into()))?;
    let mut cfg = load_experiment(path)?;
    if let Some(seed) = cli.seed {
        cfg.seeds = vec![seed];
    }
    Ok(cfg)
}

/// `--out` wins; otherwise the config's `output_dir` applies.
fn resolve_out(cli: &Cli, cfg: Option<&ExperimentConfig>) -> Result<PathBuf, Error> {
    if let Some(out) = &cli.out {
        return Ok(out.clone());
    }
    if let Some(out) = cfg.and_then(|c| c.output_dir.clone()) {
        return Ok(out);
    }
    Err(Error::Config("--out DIR (or output_dir in the config) is required for this command".into()))
}

fn seeded(tc: &TrainConfig, seed: u64) -> TrainConfig {
    TrainConfig { seed, ..tc.clone() }
}

fn dispatch(cli: Cli) -> Result<i32, Error> {
    match &cli.command {
        Command::Run => {
            let cfg = require_config(&cli)?;
            let out = resolve_out(&cli, Some(&cfg))?;
            let result = run_experiment(&cfg, &out, cli.force, cli.workers)?;
            println!("{}", result.summary.to_markdown());
            println!("artifacts written to {}", out.display());
            Ok(0)
        }
        Command::GenTasks => {
            let cfg = require_config(&cli)?;
            let out = resolve_out(&cli, Some(&cfg))?;
            let suite = write_suite(&cfg, &out)?;
            println!(
                "wrote {} tasks and a {}-sequence corpus manifest under {}",
                suite.tasks.len(),
                suite.corpus.len(),
                out.join("suite").display()
            );
            Ok(0)
        }
        Command::Pretrain => {
            let cfg = require_config(&cli)?;
            let out = resolve_out(&cli, Some(&cfg))?;
            let suite = generate_suite(&cfg.suite, cfg.suite_seed)?;
            let backbones = pretrain_all(&cfg, &suite, &out, cli.workers)?;
            for seed in backbones.keys() {
                println!("backbone seed {seed}: {}", out.join("backbone").join(format!("seed{seed}.adpt")).display());
            }
            Ok(0)
        }
        Command::TrainAdapter { task } => {
            let cfg = require_config(&cli)?;
            let out = resolve_out(&cli, Some(&cfg))?;
            let suite = generate_suite(&cfg.suite, cfg.suite_seed)?;
            let backbones = load_backbones(&out, &cfg.seeds)?;
            let tasks: Vec<String> = match task {
                Some(t) => vec![t.clone()],
                None => cfg.suite.tasks.iter().map(|t| t.name.clone()).collect(),
            };
            let jobs: Vec<(String, u64)> = tasks
                .iter()
                .flat_map(|t| cfg.seeds.iter().map(move |s| (t.clone(), *s)))
                .collect();
            let results = parallel_map(jobs, cli.workers, |(task, seed)| {
                let dataset = suite.task(&task)?;
                let run = train_st_adapter(
                    &backbones[&seed],
                    dataset,
                    &cfg.adapter,
                    &seeded(&cfg.train.adapter, seed),
                )?;
                Ok::<_, Error>((task, seed, run))
            });
            for r in results {
                let (task, seed, run) = r?;
                let dir = out.join("adapters").join(&task);
                adapterlab::adapters::serialize_adapter(
                    &run.adapter,
                    serde_json::json!({"seed": seed, "dev_accuracy": run.record.final_dev_accuracy}),
                    &dir.join(format!("seed{seed}.adpt")),
                )?;
                save_head(
                    &run.head,
                    &cfg.backbone.fingerprint(),
                    serde_json::json!({"seed": seed}),
                    &dir.join(format!("seed{seed}.head.adpt")),
                )?;
                run.record.write(
                    &out.join("runs").join("st_adapter").join(&task).join(format!("seed{seed}")).join("record.json"),
                )?;
                println!("st_adapter {task} seed {seed}: dev {:.4}", run.record.final_dev_accuracy);
            }
            Ok(0)
        }
        Command::TrainMta => {
            let cfg = require_config(&cli)?;
            let out = resolve_out(&cli, Some(&cfg))?;
            let suite = generate_suite(&cfg.suite, cfg.suite_seed)?;
            let backbones = load_backbones(&out, &cfg.seeds)?;
            let task_refs: Vec<&adapterlab::tasks::TaskDataset> = cfg
                .suite
                .tasks
                .iter()
                .map(|t| suite.task(&t.name))
                .collect::<Result<_, Error>>()?;
            for &seed in &cfg.seeds {
                let run = train_mt_adapters(
                    &backbones[&seed],
                    &task_refs,
                    &cfg.adapter,
                    &seeded(&cfg.train.mt, seed),
                )?;
                let mt_dir = out.join("mt").join(format!("seed{seed}"));
                adapterlab::backbone::save_backbone(
                    &run.backbone,
                    serde_json::json!({"seed": seed}),
                    &mt_dir.join("theta.adpt"),
                )?;
                for adapter in &run.adapters {
                    adapterlab::adapters::serialize_adapter(
                        adapter,
                        serde_json::json!({"seed": seed}),
                        &mt_dir.join(format!("{}.adpt", adapter.task)),
                    )?;
                }
                for head in &run.heads {
                    save_head(
                        head,
                        &cfg.backbone.fingerprint(),
                        serde_json::json!({"seed": seed}),
                        &mt_dir.join(format!("{}.head.adpt", head.task)),
                    )?;
                }
                run.record.write(
                    &out.join("runs").join("mt_adapters").join("joint").join(format!("seed{seed}")).join("record.json"),
                )?;
                println!("mt_adapters seed {seed}: mean dev {:.4}", run.record.final_dev_accuracy);
            }
            Ok(0)
        }
        Command::TrainFusion { target, stage1 } => {
            let cfg = require_config(&cli)?;
            let out = resolve_out(&cli, Some(&cfg))?;
            let suite = generate_suite(&cfg.suite, cfg.suite_seed)?;
            let member_names = cfg.member_names();
            let targets: Vec<String> = match target {
                Some(t) => vec![t.clone()],
                None => cfg.target_names(),
            };
            let mode_dir = match stage1 {
                Stage1::St => "fusion_st",
                Stage1::Mt => "fusion_mt",
            };
            for &seed in &cfg.seeds {
                let (theta, members) = match stage1 {
                    Stage1::St => {
                        let theta = load_backbones(&out, &[seed])?.remove(&seed).unwrap();
                        let members = load_st_adapters(&out, &cfg, &member_names, seed)?;
                        (theta, members)
                    }
                    Stage1::Mt => {
                        let mt_dir = out.join("mt").join(format!("seed{seed}"));
                        let theta_path = mt_dir.join("theta.adpt");
                        if !theta_path.exists() {
                            return Err(Error::Compat(format!(
                                "missing joint backbone checkpoint {} (run train-mta first)",
                                theta_path.display()
                            )));
                        }
                        let theta = load_backbone(&theta_path)?;
                        let members = member_names
                            .iter()
                            .map(|m| deserialize_adapter(&mt_dir.join(format!("{m}.adpt")), &cfg.backbone))
                            .collect::<Result<Vec<_>, Error>>()?;
                        (theta, members)
                    }
                };
                for target in &targets {
                    let dataset = suite.task(target)?;
                    let member_refs: Vec<&adapterlab::adapters::AdapterParams> = members.iter().collect();
                    let run = train_fusion(
                        &theta,
                        &member_refs,
                        dataset,
                        &cfg.fusion,
                        &seeded(&cfg.train.fusion, seed),
                        None,
                    )?;
                    let dir = out.join(mode_dir).join(target);
                    adapterlab::fusion::serialize_fusion(
                        &run.psi,
                        serde_json::json!({"seed": seed, "target": target}),
                        &dir.join(format!("seed{seed}.adpt")),
                    )?;
                    save_head(
                        &run.head,
                        &cfg.backbone.fingerprint(),
                        serde_json::json!({"seed": seed}),
                        &dir.join(format!("seed{seed}.head.adpt")),
                    )?;
                    adapterlab::checkpoint::write_atomic(
                        &dir.join(format!("trace-seed{seed}.json")),
                        &serde_json::to_vec_pretty(&run.trace)?,
                    )?;
                    run.record.write(
                        &out.join("runs").join(mode_dir).join(target).join(format!("seed{seed}")).join("record.json"),
                    )?;
                    println!("{mode_dir} {target} seed {seed}: dev {:.4}", run.record.final_dev_accuracy);
                }
            }
            Ok(0)
        }
        Command::TrainBaseline { mode, task } => {
            let cfg = require_config(&cli)?;
            let out = resolve_out(&cli, Some(&cfg))?;
            let suite = generate_suite(&cfg.suite, cfg.suite_seed)?;
            let backbones = load_backbones(&out, &cfg.seeds)?;
            let bmode = match mode.as_str() {
                "head_only" => BaselineMode::HeadOnly,
                "full" => BaselineMode::Full,
                "sequential" => BaselineMode::Sequential,
                other => return Err(Error::Config(format!("unknown baseline mode: {other}"))),
            };
            let fp = cfg.backbone.fingerprint();
            for &seed in &cfg.seeds {
                let tasks: Vec<&adapterlab::tasks::TaskDataset> = match (bmode, task) {
                    (BaselineMode::Sequential, None) => cfg
                        .suite
                        .tasks
                        .iter()
                        .map(|t| suite.task(&t.name))
                        .collect::<Result<_, Error>>()?,
                    (_, Some(t)) => vec![suite.task(t)?],
                    (_, None) => {
                        return Err(Error::Config(
                            "--task is required for head_only and full baselines".into(),
                        ))
                    }
                };
                let run = train_baseline(&backbones[&seed], &tasks, bmode, &seeded(&cfg.train.baseline, seed))?;
                let unit = if bmode == BaselineMode::Sequential {
                    "joint".to_string()
                } else {
                    tasks[0].name.clone()
                };
                let dir = out.join("runs").join(mode).join(&unit).join(format!("seed{seed}"));
                run.record.write(&dir.join("record.json"))?;
                for head in &run.heads {
                    save_head(
                        head,
                        &fp,
                        serde_json::json!({"seed": seed}),
                        &dir.join(format!("head-{}.adpt", head.task)),
                    )?;
                }
                if let Some(theta) = &run.backbone {
                    adapterlab::backbone::save_backbone(
                        theta,
                        serde_json::json!({"seed": seed, "mode": mode}),
                        &dir.join("theta.adpt"),
                    )?;
                }
                println!("{mode} {unit} seed {seed}: dev {:.4}", run.record.final_dev_accuracy);
            }
            Ok(0)
        }
        Command::Eval { mode, task, split, eval_seed } => {
            let cfg = require_config(&cli)?;
            let out = resolve_out(&cli, Some(&cfg))?;
            let seed = eval_seed.or(cli.seed).unwrap_or(cfg.seeds[0]);
            let suite = generate_suite(&cfg.suite, cfg.suite_seed)?;
            let dataset = suite.task(task)?;
            let instances = match split {
                SplitArg::Dev => &dataset.dev,
                SplitArg::Test => &dataset.test,
            };
            let fp = cfg.backbone.fingerprint();
            let result = match mode.as_str() {
                "head_only" => {
                    let theta = load_backbones(&out, &[seed])?.remove(&seed).unwrap();
                    let head = load_head(
                        &out.join("runs").join("head_only").join(task).join(format!("seed{seed}")).join("head.adpt"),
                        &fp,
                    )?;
                    evaluate(&Assembly { backbone: &theta, hooks: HookPlan::None, head: &head }, instances, 64)?
                }
                "full" => {
                    let dir = out.join("runs").join("full").join(task).join(format!("seed{seed}"));
                    let theta = load_backbone(&dir.join("theta.adpt"))?;
                    let head = load_head(&dir.join("head.adpt"), &fp)?;
                    evaluate(&Assembly { backbone: &theta, hooks: HookPlan::None, head: &head }, instances, 64)?
                }
                "st_adapter" => {
                    let theta = load_backbones(&out, &[seed])?.remove(&seed).unwrap();
                    let dir = out.join("adapters").join(task);
                    let adapter = deserialize_adapter(&dir.join(format!("seed{seed}.adpt")), &cfg.backbone)?;
                    let head = load_head(&dir.join(format!("seed{seed}.head.adpt")), &fp)?;
                    evaluate(
                        &Assembly { backbone: &theta, hooks: HookPlan::Adapter(&adapter), head: &head },
                        instances,
                        64,
                    )?
                }
                "mt_adapters" => {
                    let mt_dir = out.join("mt").join(format!("seed{seed}"));
                    let theta = load_backbone(&mt_dir.join("theta.adpt"))?;
                    let adapter = deserialize_adapter(&mt_dir.join(format!("{task}.adpt")), &cfg.backbone)?;
                    let head = load_head(&mt_dir.join(format!("{task}.head.adpt")), &fp)?;
                    evaluate(
                        &Assembly { backbone: &theta, hooks: HookPlan::Adapter(&adapter), head: &head },
                        instances,
                        64,
                    )?
                }
                "fusion_st" | "fusion_mt" => {
                    let (theta, members) = if mode == "fusion_st" {
                        let theta = load_backbones(&out, &[seed])?.remove(&seed).unwrap();
                        let members = load_st_adapters(&out, &cfg, &cfg.member_names(), seed)?;
                        (theta, members)
                    } else {
                        let mt_dir = out.join("mt").join(format!("seed{seed}"));
                        let theta = load_backbone(&mt_dir.join("theta.adpt"))?;
                        let members = cfg
                            .member_names()
                            .iter()
                            .map(|m| deserialize_adapter(&mt_dir.join(format!("{m}.adpt")), &cfg.backbone))
                            .collect::<Result<Vec<_>, Error>>()?;
                        (theta, members)
                    };
                    let dir = out.join(mode).join(task);
                    let psi = deserialize_fusion(&dir.join(format!("seed{seed}.adpt")), &cfg.backbone)?;
                    let head = load_head(&dir.join(format!("seed{seed}.head.adpt")), &fp)?;
                    let member_refs: Vec<&adapterlab::adapters::AdapterParams> = members.iter().collect();
                    evaluate(
                        &Assembly {
                            backbone: &theta,
                            hooks: HookPlan::Fusion { members: member_refs, psi: &psi },
                            head: &head,
                        },
                        instances,
                        64,
                    )?
                }
                other => return Err(Error::Config(format!("unknown eval mode: {other}"))),
            };
            println!(
                "{}",
                serde_json::to_string_pretty(&serde_json::json!({
                    "task": task,
                    "mode": mode,
                    "split": match split { SplitArg::Dev => "dev", SplitArg::Test => "test" },
                    "seed": seed,
                    "accuracy": result.accuracy,
                    "correct": result.correct,
                    "total": result.total,
                    "per_class": result.per_class.iter().map(|c| serde_json::json!({
                        "correct": c.correct, "total": c.total,
                    })).collect::<Vec<_>>(),
                }))?
            );
            Ok(0)
        }
        Command::GridSearch => {
            let path = cli
                .config
                .as_ref()
                .ok_or_else(|| Error::Config("--config PATH is required for grid-search".into()))?;
            let mut grid_cfg = load_grid(path)?;
            if let Some(seed) = cli.seed {
                grid_cfg.experiment.seeds = vec![seed];
            }
            let out = resolve_out(&cli, Some(&cfg))?;
            let results = grid_search(&grid_cfg, &out, cli.force, cli.workers)?;
            println!("{}", results.marginals_markdown());
            println!(
                "best cell: {} (aggregate dev accuracy {:.4})",
                results.best.cell.label(),
                results.best.aggregate
            );
            Ok(0)
        }
        Command::Heatmap { stage1, csv, layers } => {
            let cfg = require_config(&cli)?;
            let out = resolve_out(&cli, Some(&cfg))?;
            let mode_dir = match stage1 {
                Stage1::St => "fusion_st",
                Stage1::Mt => "fusion_mt",
            };
            let traces = load_traces(&out.join(mode_dir), &cfg.seeds)?;
            let selection: Option<Vec<usize>> = match layers {
                Some(s) => Some(
                    s.split(',')
                        .map(|x| {
                            x.trim()
                                .parse::<usize>()
                                .map_err(|_| Error::Config(format!("bad layer index: {x}")))
                        })
                        .collect::<Result<_, Error>>()?,
                ),
                None => None,
            };
            let contents = export_heatmap(&traces, selection.as_deref())?;
            let path = csv.clone().unwrap_or_else(|| out.join("heatmap.csv"));
            adapterlab::checkpoint::write_atomic(&path, contents.as_bytes())?;
            println!("wrote {}", path.display());
            Ok(0)
        }
        Command::Compare { baseline, candidate, csv } => {
            let report = compare_report(baseline, candidate)?;
            println!("{}", report.to_markdown());
            if let Some(path) = csv {
                adapterlab::checkpoint::write_atomic(path, report.to_csv().as_bytes())?;
            }
            if report.has_absent {
                eprintln!("error: some tasks are absent from one of the runs");
                return Ok(3);
            }
            Ok(0)
        }
        Command::GradCheck { h, tol, check_seed } => {
            let report = full_assembly_grad_check(*check_seed, *h, *tol)?;
            print!("{}", report.render());
            Ok(if report.pass() { 0 } else { 1 })
        }
    }
}

/// Load all per-seed traces under a fusion directory and average them per
/// target, so the exported heatmap reflects the full seed set.
fn load_traces(dir: &Path, seeds: &[u64]) -> Result<Vec<FusionActivationTrace>, Error> {
    if !dir.exists() {
        return Err(Error::Compat(format!(
            "no fusion traces at {} (run train-fusion first)",
            dir.display()
        )));
    }
    let mut traces = Vec::new();
    let mut targets: Vec<String> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .map(|e| e.file_name().to_string_lossy().to_string())
        .collect();
    targets.sort();
    for target in targets {
        let mut per_seed = Vec::new();
        for &seed in seeds {
            let path = dir.join(&target).join(format!("trace-seed{seed}.json"));
            if path.exists() {
                let t: FusionActivationTrace = serde_json::from_slice(&std::fs::read(&path)?)?;
                per_seed.push(t);
            }
        }
        if per_seed.is_empty() {
            continue;
        }
        traces.push(average_traces(per_seed)?);
    }
    if traces.is_empty() {
        return Err(Error::Compat(format!("no traces found under {}", dir.display())));
    }
    Ok(traces)
}
