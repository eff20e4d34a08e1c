//! Adapter architecture grid search: the Cartesian product of placement,
//! pretrained-norm position, new-norm position, reduction factor and
//! nonlinearity, scored by single-task adapter training on a few probe
//! tasks, with progressively conditioned marginal tables.

use std::collections::BTreeMap;
use std::path::Path;

use adapterlab::adapters::{AdapterConfig, InitStyle, NewLn, Preset, PretrainedLn};
use adapterlab::backbone::TapSite;
use adapterlab::checkpoint::write_atomic;
use adapterlab::error::{Error, Result};
use adapterlab::tape::Activation;
use adapterlab::training::{train_st_adapter, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::experiment::{pretrain_all, write_suite};
use crate::pool::parallel_map;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridPlacement {
    Top,
    Bottom,
    Both,
}

impl GridPlacement {
    fn to_sites(self) -> Vec<TapSite> {
        match self {
            GridPlacement::Top => vec![TapSite::Top],
            GridPlacement::Bottom => vec![TapSite::Bottom],
            GridPlacement::Both => vec![TapSite::Bottom, TapSite::Top],
        }
    }

    fn label(&self) -> &'static str {
        match self {
            GridPlacement::Top => "top",
            GridPlacement::Bottom => "bottom",
            GridPlacement::Both => "both",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    #[serde(default = "default_placements")]
    pub placements: Vec<GridPlacement>,
    #[serde(default = "default_pretrained_ln")]
    pub pretrained_ln: Vec<PretrainedLn>,
    #[serde(default = "default_new_ln")]
    pub new_ln: Vec<NewLn>,
    #[serde(default = "default_reductions")]
    pub reduction_factors: Vec<usize>,
    /// nonlinearity names resolved through the activation parser
    #[serde(default = "default_nonlinearities")]
    pub nonlinearities: Vec<String>,
    /// probe tasks scored per cell; empty means the suite's first three
    #[serde(default)]
    pub probe_tasks: Vec<String>,
    /// conscious-choice guard on the cell count
    #[serde(default = "default_max_cells")]
    pub max_cells: usize,
}

fn default_placements() -> Vec<GridPlacement> {
    vec![GridPlacement::Top, GridPlacement::Bottom, GridPlacement::Both]
}

fn default_pretrained_ln() -> Vec<PretrainedLn> {
    vec![PretrainedLn::None, PretrainedLn::Before, PretrainedLn::After, PretrainedLn::BeforeAndAfter]
}

fn default_new_ln() -> Vec<NewLn> {
    vec![NewLn::None, NewLn::BeforeAdapter, NewLn::AfterAdapter, NewLn::Inside]
}

fn default_reductions() -> Vec<usize> {
    vec![2, 8, 16, 64]
}

fn default_nonlinearities() -> Vec<String> {
    vec!["relu".into(), "leakyrelu".into(), "swish".into()]
}

fn default_max_cells() -> usize {
    600
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            placements: default_placements(),
            pretrained_ln: default_pretrained_ln(),
            new_ln: default_new_ln(),
            reduction_factors: default_reductions(),
            nonlinearities: default_nonlinearities(),
            probe_tasks: Vec::new(),
            max_cells: default_max_cells(),
        }
    }
}

impl GridSpec {
    pub fn cell_count(&self) -> usize {
        self.placements.len()
            * self.pretrained_ln.len()
            * self.new_ln.len()
            * self.reduction_factors.len()
            * self.nonlinearities.len()
    }

    /// The full Cartesian product in axis-major order.
    pub fn enumerate_cells(&self) -> Result<Vec<GridCell>> {
        let mut cells = Vec::with_capacity(self.cell_count());
        for &placement in &self.placements {
            for &pre_ln in &self.pretrained_ln {
                for &new_ln in &self.new_ln {
                    for &r in &self.reduction_factors {
                        for nl in &self.nonlinearities {
                            let nonlinearity = Activation::parse(nl, 0.01)?;
                            let config = AdapterConfig {
                                placement: placement.to_sites(),
                                reduction_factor: r,
                                nonlinearity,
                                residual: true,
                                pretrained_ln: pre_ln,
                                new_ln,
                                preset: Preset::Custom,
                                init_style: InitStyle::IdentityZero,
                            };
                            cells.push(GridCell {
                                index: cells.len(),
                                placement,
                                pretrained_ln: pre_ln,
                                new_ln,
                                reduction_factor: r,
                                nonlinearity: nl.clone(),
                                config,
                            });
                        }
                    }
                }
            }
        }
        Ok(cells)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GridCell {
    pub index: usize,
    pub placement: GridPlacement,
    pub pretrained_ln: PretrainedLn,
    pub new_ln: NewLn,
    pub reduction_factor: usize,
    pub nonlinearity: String,
    #[serde(skip)]
    pub config: AdapterConfig,
}

impl GridCell {
    pub fn label(&self) -> String {
        format!(
            "placement={},pretrained_ln={},new_ln={},r={},nonlinearity={}",
            self.placement.label(),
            serde_variant(&self.pretrained_ln),
            serde_variant(&self.new_ln),
            self.reduction_factor,
            self.nonlinearity
        )
    }

    /// Whether this cell's architecture is expressible as a named preset.
    pub fn as_preset(&self) -> Preset {
        let mut candidate = self.config.clone();
        candidate.preset = Preset::Pfeiffer;
        if candidate.validate(&adapterlab::backbone::BackboneConfig::toy()).is_ok() {
            return Preset::Pfeiffer;
        }
        candidate.preset = Preset::Houlsby;
        if candidate.validate(&adapterlab::backbone::BackboneConfig::toy()).is_ok() {
            return Preset::Houlsby;
        }
        Preset::Custom
    }
}

fn serde_variant<T: Serialize>(v: &T) -> String {
    serde_json::to_value(v)
        .ok()
        .and_then(|j| j.as_str().map(|s| s.to_string()))
        .unwrap_or_default()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub schema_version: u32,
    pub experiment: ExperimentConfig,
    #[serde(default)]
    pub grid: GridSpec,
}

pub fn load_grid(path: &Path) -> Result<GridConfig> {
    let bytes = std::fs::read(path)?;
    let cfg: GridConfig = serde_json::from_slice(&bytes)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    if cfg.schema_version != crate::config::SCHEMA_VERSION {
        return Err(Error::Config(format!("schema_version {} unsupported", cfg.schema_version)));
    }
    cfg.experiment.validate()?;
    Ok(cfg)
}

#[derive(Debug, Clone, Serialize)]
pub struct GridRow {
    pub cell: GridCell,
    /// mean dev accuracy per probe task (over seeds)
    pub per_task: BTreeMap<String, f64>,
    /// mean over probe tasks
    pub aggregate: f64,
    pub rank: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct MarginalTable {
    pub axis: String,
    /// conditioning applied before marginalizing (best-so-far settings)
    pub conditioned_on: Vec<String>,
    pub rows: Vec<(String, f64)>,
}

#[derive(Debug, Serialize)]
pub struct GridResults {
    pub rows: Vec<GridRow>,
    pub best: GridRow,
    pub marginals: Vec<MarginalTable>,
}

impl GridResults {
    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("rank,placement,pretrained_ln,new_ln,reduction_factor,nonlinearity,aggregate");
        let task_names: Vec<String> = self.rows[0].per_task.keys().cloned().collect();
        for t in &task_names {
            out.push_str(&format!(",{t}"));
        }
        out.push('\n');
        for row in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{:.4}",
                row.rank,
                row.cell.placement.label(),
                serde_variant(&row.cell.pretrained_ln),
                serde_variant(&row.cell.new_ln),
                row.cell.reduction_factor,
                row.cell.nonlinearity,
                row.aggregate
            ));
            for t in &task_names {
                out.push_str(&format!(",{:.4}", row.per_task[t]));
            }
            out.push('\n');
        }
        out
    }

    pub fn marginals_markdown(&self) -> String {
        let mut out = String::from("# Per-axis marginal mean dev accuracy\n");
        for table in &self.marginals {
            out.push_str(&format!("\n## {}", table.axis));
            if !table.conditioned_on.is_empty() {
                out.push_str(&format!(" (fixing {})", table.conditioned_on.join(", ")));
            }
            out.push_str("\n\n| value | mean accuracy |\n|---|---|\n");
            for (value, acc) in &table.rows {
                out.push_str(&format!("| {value} | {:.2} |\n", acc * 100.0));
            }
        }
        out
    }
}

/// Train every grid cell on every probe task over the seed set and rank the
/// cells by mean dev accuracy. The cell count must fit the budget guard.
pub fn grid_search(cfg: &GridConfig, out_dir: &Path, force: bool, workers: usize) -> Result<GridResults> {
    let cells = cfg.grid.enumerate_cells()?;
    if cells.len() > cfg.grid.max_cells {
        return Err(Error::Budget(format!(
            "grid of {} cells exceeds the budget of {} (raise max_cells to proceed)",
            cells.len(),
            cfg.grid.max_cells
        )));
    }
    for cell in &cells {
        cell.config.validate(&cfg.experiment.backbone)?;
    }
    let probe_tasks: Vec<String> = if cfg.grid.probe_tasks.is_empty() {
        cfg.experiment.suite.tasks.iter().take(3).map(|t| t.name.clone()).collect()
    } else {
        cfg.grid.probe_tasks.clone()
    };
    for t in &probe_tasks {
        if !cfg.experiment.suite.tasks.iter().any(|s| &s.name == t) {
            return Err(Error::Config(format!("probe task {t} is not a suite task")));
        }
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

    let suite = write_suite(&cfg.experiment, out_dir)?;
    let backbones = pretrain_all(&cfg.experiment, &suite, out_dir, workers)?;

    let jobs: Vec<(usize, String, u64)> = cells
        .iter()
        .flat_map(|c| {
            let idx = c.index;
            probe_tasks.iter().flat_map(move |t| {
                cfg.experiment.seeds.iter().map(move |s| (idx, t.clone(), *s))
            })
        })
        .collect();
    let results = parallel_map(jobs, workers, |(cell_idx, task, seed)| -> Result<_> {
        let dataset = suite.task(&task)?;
        let tc = TrainConfig { seed, ..cfg.experiment.train.adapter.clone() };
        let run = train_st_adapter(&backbones[&seed], dataset, &cells[cell_idx].config, &tc)?;
        Ok((cell_idx, task, run.record.final_dev_accuracy))
    });

    let mut per_cell_task: BTreeMap<(usize, String), Vec<f64>> = BTreeMap::new();
    for r in results {
        let (idx, task, acc) = r?;
        per_cell_task.entry((idx, task)).or_default().push(acc);
    }

    let mut rows: Vec<GridRow> = cells
        .into_iter()
        .map(|cell| {
            let mut per_task = BTreeMap::new();
            for t in &probe_tasks {
                let accs = &per_cell_task[&(cell.index, t.clone())];
                per_task.insert(t.clone(), accs.iter().sum::<f64>() / accs.len() as f64);
            }
            let aggregate = per_task.values().sum::<f64>() / per_task.len() as f64;
            GridRow { cell, per_task, aggregate, rank: 0 }
        })
        .collect();
    rows.sort_by(|a, b| b.aggregate.total_cmp(&a.aggregate).then(a.cell.index.cmp(&b.cell.index)));
    for (i, row) in rows.iter_mut().enumerate() {
        row.rank = i + 1;
    }
    let best = rows[0].clone();

    let marginals = build_marginals(&rows, &best);
    let results = GridResults { rows, best, marginals };
    write_atomic(&out_dir.join("grid.csv"), results.to_csv().as_bytes())?;
    write_atomic(&out_dir.join("marginals.md"), results.marginals_markdown().as_bytes())?;
    write_atomic(
        &out_dir.join("best.json"),
        &serde_json::to_vec_pretty(&serde_json::json!({
            "label": results.best.cell.label(),
            "aggregate": results.best.aggregate,
            "per_task": results.best.per_task,
            "preset_equivalent": results.best.cell.as_preset(),
            "config": results.best.cell.config,
        }))?,
    )?;
    Ok(results)
}

/// Progressive marginal tables: (a) placement over all cells, (b)
/// pretrained-norm position with the best placement fixed, (c) new-norm
/// position with both fixed.
fn build_marginals(rows: &[GridRow], best: &GridRow) -> Vec<MarginalTable> {
    let mean_where = |pred: &dyn Fn(&GridRow) -> bool, key: &dyn Fn(&GridRow) -> String| {
        let mut groups: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for r in rows.iter().filter(|r| pred(r)) {
            groups.entry(key(r)).or_default().push(r.aggregate);
        }
        groups
            .into_iter()
            .map(|(k, v)| (k, v.iter().sum::<f64>() / v.len() as f64))
            .collect::<Vec<_>>()
    };

    let placement = best.cell.placement;
    let pre_ln = best.cell.pretrained_ln;
    vec![
        MarginalTable {
            axis: "placement".into(),
            conditioned_on: vec![],
            rows: mean_where(&|_| true, &|r| r.cell.placement.label().to_string()),
        },
        MarginalTable {
            axis: "pretrained_ln".into(),
            conditioned_on: vec![format!("placement={}", placement.label())],
            rows: mean_where(&|r| r.cell.placement == placement, &|r| {
                serde_variant(&r.cell.pretrained_ln)
            }),
        },
        MarginalTable {
            axis: "new_ln".into(),
            conditioned_on: vec![
                format!("placement={}", placement.label()),
                format!("pretrained_ln={}", serde_variant(&pre_ln)),
            ],
            rows: mean_where(
                &|r| r.cell.placement == placement && r.cell.pretrained_ln == pre_ln,
                &|r| serde_variant(&r.cell.new_ln),
            ),
        },
    ]
}
