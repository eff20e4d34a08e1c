//! Training pipelines: single-task adapters, jointly trained multi-task
//! adapters, fusion over frozen adapters, and the head-only / full /
//! sequential fine-tuning baselines.
//!
//! Every pipeline shares the same skeleton: epoch-seeded batches, AdamW with
//! a learning-rate schedule, dev-accuracy early stopping with best-epoch
//! restoration, and a run record carrying per-epoch stats plus before/after
//! digests of every parameter group. The digests are the freeze ledger: a
//! mode may only change the tensors it documents as trainable, and equal
//! digests prove the rest were untouched.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::adapters::{make_adapter, AdapterConfig, AdapterParams};
use crate::backbone::{BackboneParams, HookPlan};
use crate::error::{Error, Result};
use crate::fusion::{
    fusion_init, fusion_regularizer, trace_activations, FusionActivationTrace, FusionConfig,
    FusionParams,
};
pub use crate::model::ClassifierHead;
use crate::model::{evaluate as model_evaluate, Assembly, EvalResult};
use crate::optim::{schedule_lr, OptimizerState, Schedule};
use crate::rng::SplitRng;
use crate::tape::Tape;
use crate::tasks::{batches, TaskDataset, TaskInstance};
use crate::tensor::{ParamGroup, Tensor};

const EVAL_BATCH: usize = 64;

/// value snapshot of one parameter group, for best-epoch restoration
type Snapshot = Vec<(String, Vec<f64>)>;

/// How often the dev set is scored. `Steps(k)` adds mid-epoch evaluations
/// every `k` optimizer steps on top of the end-of-epoch one; early-stopping
/// patience counts evaluation points.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalCadence {
    Epoch,
    Steps(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MtSampling {
    /// batch draws proportional to training-set size
    Proportional,
    /// proportional to sqrt(size); softens large-task dominance
    Sqrt,
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    #[serde(default = "default_cadence")]
    pub eval_every: EvalCadence,
    pub seed: u64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default = "default_train_schedule")]
    pub schedule: Schedule,
    #[serde(default = "default_sampling")]
    pub mt_sampling: MtSampling,
    #[serde(default = "default_lambda")]
    pub fusion_lambda: f64,
    /// reuse the stage-1 head instead of re-initializing it for fusion
    #[serde(default)]
    pub reuse_stage1_head: bool,
}

fn default_cadence() -> EvalCadence {
    EvalCadence::Epoch
}

fn default_train_schedule() -> Schedule {
    Schedule::LinearDecay
}

fn default_sampling() -> MtSampling {
    MtSampling::Sqrt
}

fn default_lambda() -> f64 {
    0.01
}

impl TrainConfig {
    /// Stage-1 adapter defaults: AdamW at 1e-4 with linear decay, batch 16,
    /// up to 30 epochs with early stopping.
    pub fn adapter_defaults(seed: u64) -> TrainConfig {
        TrainConfig {
            base_lr: 1e-4,
            batch_size: 16,
            max_epochs: 30,
            early_stop_patience: 3,
            eval_every: EvalCadence::Epoch,
            seed,
            weight_decay: 0.0,
            schedule: Schedule::LinearDecay,
            mt_sampling: MtSampling::Sqrt,
            fusion_lambda: 0.01,
            reuse_stage1_head: false,
        }
    }

    /// Stage-2 fusion defaults: 5e-5 for up to 10 epochs.
    pub fn fusion_defaults(seed: u64) -> TrainConfig {
        TrainConfig {
            base_lr: 5e-5,
            max_epochs: 10,
            ..TrainConfig::adapter_defaults(seed)
        }
    }

    /// Baseline fine-tuning defaults; the higher rate suits full-model
    /// updates at this scale.
    pub fn baseline_defaults(seed: u64) -> TrainConfig {
        TrainConfig { base_lr: 3e-4, ..TrainConfig::adapter_defaults(seed) }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_epochs < 1 {
            return Err(Error::Config("max_epochs must be at least 1".into()));
        }
        if self.early_stop_patience < 1 {
            return Err(Error::Config("early_stop_patience must be at least 1".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.base_lr.is_nan() || self.base_lr <= 0.0 {
            return Err(Error::Config("base_lr must be positive".into()));
        }
        if self.fusion_lambda < 0.0 {
            return Err(Error::Config("fusion_lambda must be non-negative".into()));
        }
        if let EvalCadence::Steps(0) = self.eval_every {
            return Err(Error::Config("eval_every steps must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStat {
    pub epoch: usize,
    pub step: u64,
    pub train_loss: f64,
    pub dev_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DigestPair {
    pub before: String,
    pub after: String,
}

impl DigestPair {
    pub fn unchanged(&self) -> bool {
        self.before == self.after
    }
}

/// Everything a finished run reports. Serialized as JSON next to the run's
/// checkpoints; identical configs and seeds reproduce identical records
/// except for `wall_time_secs`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub mode: String,
    pub tasks: Vec<String>,
    pub evals: Vec<EpochStat>,
    pub best_epoch: usize,
    pub best_dev_accuracy: f64,
    pub final_dev_accuracy: f64,
    pub final_test_accuracy: f64,
    #[serde(default)]
    pub per_task_dev: BTreeMap<String, f64>,
    /// sequential mode: dev accuracy of every already-trained task after
    /// each stage
    #[serde(default)]
    pub stage_evals: Vec<BTreeMap<String, f64>>,
    pub wall_time_secs: f64,
    pub seeds: Vec<u64>,
    pub config: serde_json::Value,
    /// before/after content hashes per parameter group (the freeze ledger)
    pub digests: BTreeMap<String, DigestPair>,
    #[serde(default)]
    pub warnings: Vec<String>,
}

impl RunRecord {
    /// The record with volatile fields cleared, for reproducibility
    /// comparisons.
    pub fn comparable(&self) -> RunRecord {
        let mut r = self.clone();
        r.wall_time_secs = 0.0;
        r
    }

    pub fn write(&self, path: &std::path::Path) -> Result<()> {
        let bytes = serde_json::to_vec_pretty(self)?;
        crate::checkpoint::write_atomic(path, &bytes)
    }

    pub fn read(path: &std::path::Path) -> Result<RunRecord> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}

// ---- shared fitting machinery -------------------------------------------------

struct FitTracker {
    evals: Vec<EpochStat>,
    best_idx: Option<usize>,
}

impl FitTracker {
    fn new() -> FitTracker {
        FitTracker { evals: Vec::new(), best_idx: None }
    }

    /// Record an evaluation point; true when it is a new best.
    fn observe(&mut self, stat: EpochStat) -> bool {
        let improved = match self.best_idx {
            None => true,
            Some(i) => stat.dev_accuracy > self.evals[i].dev_accuracy,
        };
        self.evals.push(stat);
        if improved {
            self.best_idx = Some(self.evals.len() - 1);
        }
        improved
    }

    fn should_stop(&self, patience: usize) -> bool {
        match self.best_idx {
            None => false,
            Some(i) => self.evals.len() - 1 - i >= patience,
        }
    }

    fn best(&self) -> Option<&EpochStat> {
        self.best_idx.map(|i| &self.evals[i])
    }
}

fn check_task_fits(backbone: &BackboneParams, task: &TaskDataset) -> Result<()> {
    if task.train.is_empty() || task.dev.is_empty() || task.test.is_empty() {
        return Err(Error::Data(format!("task {} has an empty split", task.name)));
    }
    let vocab = backbone.config.vocab_size as u32;
    for inst in task.train.iter().chain(&task.dev).chain(&task.test) {
        if inst.tokens.iter().any(|t| *t >= vocab) {
            return Err(Error::Config(format!(
                "task {} uses tokens outside the backbone vocabulary of {vocab}",
                task.name
            )));
        }
        if inst.label >= task.num_classes {
            return Err(Error::Data(format!("task {} label {} out of range", task.name, inst.label)));
        }
    }
    Ok(())
}

fn step_tensors(opt: &mut OptimizerState, tensors: &mut Vec<&mut Tensor>, lr: f64) -> Result<()> {
    opt.step(tensors, lr)
}

fn total_steps(instances: usize, batch_size: usize, max_epochs: usize) -> u64 {
    (instances.div_ceil(batch_size) * max_epochs) as u64
}

/// Unnormalized batch-sampling weights per task.
pub fn sampling_weights(sizes: &[usize], strategy: MtSampling) -> Vec<f64> {
    sizes
        .iter()
        .map(|&s| match strategy {
            MtSampling::Proportional => s as f64,
            MtSampling::Sqrt => (s as f64).sqrt(),
            MtSampling::Uniform => 1.0,
        })
        .collect()
}

/// Re-export of the assembly evaluator: argmax accuracy with per-class
/// counts, deterministic, ties to the lowest class index.
pub fn evaluate(assembly: &Assembly<'_>, instances: &[TaskInstance], batch_size: usize) -> Result<EvalResult> {
    model_evaluate(assembly, instances, batch_size)
}

// ---- single-task adapter (stage 1) ---------------------------------------------

pub struct StAdapterRun {
    pub adapter: AdapterParams,
    pub head: ClassifierHead,
    pub record: RunRecord,
}

/// Train one task's adapter and head with the backbone frozen.
pub fn train_st_adapter(
    backbone: &BackboneParams,
    task: &TaskDataset,
    adapter_cfg: &AdapterConfig,
    tc: &TrainConfig,
) -> Result<StAdapterRun> {
    tc.validate()?;
    check_task_fits(backbone, task)?;
    let start = Instant::now();
    let root = SplitRng::new(tc.seed);
    let d = backbone.config.hidden_dim;

    let mut adapter = make_adapter(
        &backbone.config,
        adapter_cfg,
        &task.name,
        root.substream(&format!("adapter.{}", task.name)).next_u64(),
    )?;
    let mut head =
        ClassifierHead::init(&task.name, d, task.num_classes, &mut root.substream("head"));
    let mut dropout_rng = root.substream("dropout");

    let theta_before = backbone.digest();
    let mut warnings = Vec::new();
    if !backbone.pretrained {
        warnings.push("backbone is randomly initialized, not pretrained".to_string());
    }

    let mut opt = OptimizerState::new(tc.base_lr, tc.weight_decay);
    let total = total_steps(task.train.len(), tc.batch_size, tc.max_epochs);
    let mut step = 0u64;
    let mut fit = FitTracker::new();
    let mut best: Option<(Snapshot, Snapshot)> = None;

    'training: for epoch in 0..tc.max_epochs {
        let mut loss_sum = 0.0;
        let mut loss_n = 0usize;
        for batch in batches(&task.train, tc.batch_size, tc.seed, epoch as u64)? {
            let mut tape = Tape::new();
            let assembly =
                Assembly { backbone, hooks: HookPlan::Adapter(&adapter), head: &head };
            let dr = (backbone.config.dropout_rate > 0.0).then_some(&mut dropout_rng);
            let (loss, _, _) = assembly.loss(&mut tape, &batch.tokens, &batch.labels, dr)?;
            loss_sum += tape.scalar(loss)?;
            loss_n += 1;
            let grads = tape.backward(loss)?;
            drop(tape);
            grads.accumulate_into(&mut adapter)?;
            grads.accumulate_into(&mut head)?;
            let lr = schedule_lr(tc.schedule, step, total, tc.base_lr)?;
            let mut tensors = adapter.tensors_mut();
            tensors.extend(head.tensors_mut());
            step_tensors(&mut opt, &mut tensors, lr)?;
            adapter.visit_mut(&mut |t| t.zero_grad());
            head.visit_mut(&mut |t| t.zero_grad());
            step += 1;

            if let EvalCadence::Steps(k) = tc.eval_every {
                if step % k as u64 == 0 {
                    let dev = model_evaluate(
                        &Assembly { backbone, hooks: HookPlan::Adapter(&adapter), head: &head },
                        &task.dev,
                        EVAL_BATCH,
                    )?;
                    let improved = fit.observe(EpochStat {
                        epoch,
                        step,
                        train_loss: loss_sum / loss_n as f64,
                        dev_accuracy: dev.accuracy,
                    });
                    if improved {
                        best = Some((adapter.snapshot(), head.snapshot()));
                    }
                    if fit.should_stop(tc.early_stop_patience) {
                        break 'training;
                    }
                }
            }
        }
        let dev = model_evaluate(
            &Assembly { backbone, hooks: HookPlan::Adapter(&adapter), head: &head },
            &task.dev,
            EVAL_BATCH,
        )?;
        let improved = fit.observe(EpochStat {
            epoch,
            step,
            train_loss: loss_sum / loss_n.max(1) as f64,
            dev_accuracy: dev.accuracy,
        });
        if improved {
            best = Some((adapter.snapshot(), head.snapshot()));
        }
        if fit.should_stop(tc.early_stop_patience) {
            break 'training;
        }
    }

    if let Some((a, h)) = &best {
        adapter.restore(a)?;
        head.restore(h)?;
    }
    let best_stat = fit.best().cloned().unwrap();
    let final_dev = model_evaluate(
        &Assembly { backbone, hooks: HookPlan::Adapter(&adapter), head: &head },
        &task.dev,
        EVAL_BATCH,
    )?;
    let final_test = model_evaluate(
        &Assembly { backbone, hooks: HookPlan::Adapter(&adapter), head: &head },
        &task.test,
        EVAL_BATCH,
    )?;

    let mut digests = BTreeMap::new();
    digests.insert(
        "theta".to_string(),
        DigestPair { before: theta_before, after: backbone.digest() },
    );
    digests.insert(
        format!("adapter:{}", task.name),
        DigestPair { before: String::new(), after: adapter.digest() },
    );
    digests.insert(
        format!("head:{}", task.name),
        DigestPair { before: String::new(), after: head.digest() },
    );

    let record = RunRecord {
        mode: "st_adapter".to_string(),
        tasks: vec![task.name.clone()],
        evals: fit.evals,
        best_epoch: best_stat.epoch,
        best_dev_accuracy: best_stat.dev_accuracy,
        final_dev_accuracy: final_dev.accuracy,
        final_test_accuracy: final_test.accuracy,
        per_task_dev: BTreeMap::from([(task.name.clone(), final_dev.accuracy)]),
        stage_evals: Vec::new(),
        wall_time_secs: start.elapsed().as_secs_f64(),
        seeds: vec![tc.seed],
        config: serde_json::json!({ "train": tc, "adapter": adapter_cfg }),
        digests,
        warnings,
    };
    Ok(StAdapterRun { adapter, head, record })
}

// ---- multi-task adapters (stage 1, joint) ---------------------------------------

pub struct MtAdaptersRun {
    pub backbone: BackboneParams,
    pub adapters: Vec<AdapterParams>,
    pub heads: Vec<ClassifierHead>,
    pub record: RunRecord,
}

struct TaskStream<'a> {
    task: &'a TaskDataset,
    queue: Vec<crate::tasks::Batch>,
    cursor: usize,
    refills: u64,
    seed: u64,
    batch_size: usize,
}

impl<'a> TaskStream<'a> {
    fn new(task: &'a TaskDataset, batch_size: usize, seed: u64) -> Result<TaskStream<'a>> {
        let mut s = TaskStream { task, queue: Vec::new(), cursor: 0, refills: 0, seed, batch_size };
        s.refill()?;
        Ok(s)
    }

    fn refill(&mut self) -> Result<()> {
        self.queue = batches(&self.task.train, self.batch_size, self.seed, self.refills)?;
        self.refills += 1;
        self.cursor = 0;
        Ok(())
    }

    fn next(&mut self) -> Result<crate::tasks::Batch> {
        if self.cursor >= self.queue.len() {
            self.refill()?;
        }
        let b = self.queue[self.cursor].clone();
        self.cursor += 1;
        Ok(b)
    }
}

/// Train adapters for all tasks jointly, with the backbone trainable
/// alongside the per-task adapters and heads. Each batch is drawn from one
/// task according to the sampling strategy.
pub fn train_mt_adapters(
    backbone: &BackboneParams,
    tasks: &[&TaskDataset],
    adapter_cfg: &AdapterConfig,
    tc: &TrainConfig,
) -> Result<MtAdaptersRun> {
    tc.validate()?;
    if tasks.len() < 2 {
        return Err(Error::Usage("joint adapter training needs at least 2 tasks".into()));
    }
    for t in tasks {
        check_task_fits(backbone, t)?;
    }
    let start = Instant::now();
    let root = SplitRng::new(tc.seed);
    let d = backbone.config.hidden_dim;

    let theta_before = backbone.digest();
    let mut theta = backbone.clone();
    let mut adapters = Vec::with_capacity(tasks.len());
    let mut heads = Vec::with_capacity(tasks.len());
    for (i, task) in tasks.iter().enumerate() {
        adapters.push(make_adapter(
            &backbone.config,
            adapter_cfg,
            &task.name,
            root.substream_indexed("mt.adapter", i as u64).next_u64(),
        )?);
        heads.push(ClassifierHead::init(
            &task.name,
            d,
            task.num_classes,
            &mut root.substream_indexed("mt.head", i as u64),
        ));
    }
    let mut dropout_rng = root.substream("dropout");

    let sizes: Vec<usize> = tasks.iter().map(|t| t.train.len()).collect();
    let weights = sampling_weights(&sizes, tc.mt_sampling);
    let mut sampler = root.substream("mt.sampling");
    let mut streams: Vec<TaskStream> = tasks
        .iter()
        .map(|t| TaskStream::new(t, tc.batch_size, tc.seed))
        .collect::<Result<_>>()?;

    let steps_per_epoch = sizes.iter().sum::<usize>().div_ceil(tc.batch_size);
    let total = (steps_per_epoch * tc.max_epochs) as u64;
    let mut opt = OptimizerState::new(tc.base_lr, tc.weight_decay);
    let mut step = 0u64;
    let mut fit = FitTracker::new();
    let mut best: Option<(Snapshot, Vec<Snapshot>, Vec<Snapshot>)> = None;

    let mut warnings = Vec::new();
    if !backbone.pretrained {
        warnings.push("backbone is randomly initialized, not pretrained".to_string());
    }

    'training: for epoch in 0..tc.max_epochs {
        let mut loss_sum = 0.0;
        for _ in 0..steps_per_epoch {
            let ti = sampler.weighted(&weights);
            let batch = streams[ti].next()?;
            let mut tape = Tape::new();
            let assembly =
                Assembly { backbone: &theta, hooks: HookPlan::Adapter(&adapters[ti]), head: &heads[ti] };
            let dr = (theta.config.dropout_rate > 0.0).then_some(&mut dropout_rng);
            let (loss, _, _) = assembly.loss(&mut tape, &batch.tokens, &batch.labels, dr)?;
            loss_sum += tape.scalar(loss)?;
            let grads = tape.backward(loss)?;
            drop(tape);
            grads.accumulate_into(&mut theta)?;
            grads.accumulate_into(&mut adapters[ti])?;
            grads.accumulate_into(&mut heads[ti])?;
            let lr = schedule_lr(tc.schedule, step, total, tc.base_lr)?;
            let mut tensors = theta.tensors_mut();
            tensors.extend(adapters[ti].tensors_mut());
            tensors.extend(heads[ti].tensors_mut());
            step_tensors(&mut opt, &mut tensors, lr)?;
            theta.visit_mut(&mut |t| t.zero_grad());
            adapters[ti].visit_mut(&mut |t| t.zero_grad());
            heads[ti].visit_mut(&mut |t| t.zero_grad());
            step += 1;

            if let EvalCadence::Steps(k) = tc.eval_every {
                if step % k as u64 == 0 {
                    let mut accs = Vec::with_capacity(tasks.len());
                    for (i, task) in tasks.iter().enumerate() {
                        let r = model_evaluate(
                            &Assembly {
                                backbone: &theta,
                                hooks: HookPlan::Adapter(&adapters[i]),
                                head: &heads[i],
                            },
                            &task.dev,
                            EVAL_BATCH,
                        )?;
                        accs.push(r.accuracy);
                    }
                    let mean = accs.iter().sum::<f64>() / accs.len() as f64;
                    let improved = fit.observe(EpochStat {
                        epoch,
                        step,
                        train_loss: loss_sum / step.max(1) as f64,
                        dev_accuracy: mean,
                    });
                    if improved {
                        best = Some((
                            theta.snapshot(),
                            adapters.iter().map(|a| a.snapshot()).collect(),
                            heads.iter().map(|h| h.snapshot()).collect(),
                        ));
                    }
                    if fit.should_stop(tc.early_stop_patience) {
                        break 'training;
                    }
                }
            }
        }
        // mean dev accuracy across tasks drives early stopping
        let mut accs = Vec::with_capacity(tasks.len());
        for (i, task) in tasks.iter().enumerate() {
            let r = model_evaluate(
                &Assembly { backbone: &theta, hooks: HookPlan::Adapter(&adapters[i]), head: &heads[i] },
                &task.dev,
                EVAL_BATCH,
            )?;
            accs.push(r.accuracy);
        }
        let mean = accs.iter().sum::<f64>() / accs.len() as f64;
        let improved = fit.observe(EpochStat {
            epoch,
            step,
            train_loss: loss_sum / steps_per_epoch as f64,
            dev_accuracy: mean,
        });
        if improved {
            best = Some((
                theta.snapshot(),
                adapters.iter().map(|a| a.snapshot()).collect(),
                heads.iter().map(|h| h.snapshot()).collect(),
            ));
        }
        if fit.should_stop(tc.early_stop_patience) {
            break 'training;
        }
    }

    if let Some((ts, asnaps, hsnaps)) = &best {
        theta.restore(ts)?;
        for (a, s) in adapters.iter_mut().zip(asnaps) {
            a.restore(s)?;
        }
        for (h, s) in heads.iter_mut().zip(hsnaps) {
            h.restore(s)?;
        }
    }

    let mut per_task_dev = BTreeMap::new();
    let mut test_accs = Vec::new();
    for (i, task) in tasks.iter().enumerate() {
        let assembly =
            Assembly { backbone: &theta, hooks: HookPlan::Adapter(&adapters[i]), head: &heads[i] };
        per_task_dev.insert(task.name.clone(), model_evaluate(&assembly, &task.dev, EVAL_BATCH)?.accuracy);
        test_accs.push(model_evaluate(&assembly, &task.test, EVAL_BATCH)?.accuracy);
    }
    let best_stat = fit.best().cloned().unwrap();
    let final_dev = per_task_dev.values().sum::<f64>() / per_task_dev.len() as f64;
    let final_test = test_accs.iter().sum::<f64>() / test_accs.len() as f64;

    let mut digests = BTreeMap::new();
    digests.insert("theta".to_string(), DigestPair { before: theta_before, after: theta.digest() });
    for (i, task) in tasks.iter().enumerate() {
        digests.insert(
            format!("adapter:{}", task.name),
            DigestPair { before: String::new(), after: adapters[i].digest() },
        );
        digests.insert(
            format!("head:{}", task.name),
            DigestPair { before: String::new(), after: heads[i].digest() },
        );
    }

    let record = RunRecord {
        mode: "mt_adapters".to_string(),
        tasks: tasks.iter().map(|t| t.name.clone()).collect(),
        evals: fit.evals,
        best_epoch: best_stat.epoch,
        best_dev_accuracy: best_stat.dev_accuracy,
        final_dev_accuracy: final_dev,
        final_test_accuracy: final_test,
        per_task_dev,
        stage_evals: Vec::new(),
        wall_time_secs: start.elapsed().as_secs_f64(),
        seeds: vec![tc.seed],
        config: serde_json::json!({ "train": tc, "adapter": adapter_cfg }),
        digests,
        warnings,
    };
    Ok(MtAdaptersRun { backbone: theta, adapters, heads, record })
}

// ---- fusion (stage 2) ------------------------------------------------------------

pub struct FusionRun {
    pub psi: FusionParams,
    pub head: ClassifierHead,
    pub record: RunRecord,
    pub trace: FusionActivationTrace,
}

/// Train a fusion layer over frozen member adapters for the target task.
/// Only the fusion matrices and the target head change; the backbone and
/// every member are digest-verified frozen.
pub fn train_fusion(
    backbone: &BackboneParams,
    members: &[&AdapterParams],
    target: &TaskDataset,
    fusion_cfg: &FusionConfig,
    tc: &TrainConfig,
    stage1_head: Option<&ClassifierHead>,
) -> Result<FusionRun> {
    tc.validate()?;
    check_task_fits(backbone, target)?;
    let start = Instant::now();
    let root = SplitRng::new(tc.seed);
    let d = backbone.config.hidden_dim;

    let theta_before = backbone.digest();
    let member_before: Vec<String> = members.iter().map(|m| m.digest()).collect();

    let mut psi = fusion_init(
        &backbone.config,
        members,
        &target.name,
        root.substream(&format!("fusion.{}", target.name)).next_u64(),
        fusion_cfg.clone(),
    )?;
    let mut head = match (tc.reuse_stage1_head, stage1_head) {
        (true, Some(h)) => h.clone(),
        _ => ClassifierHead::init(
            &target.name,
            d,
            target.num_classes,
            &mut root.substream("fusion.head"),
        ),
    };
    let mut dropout_rng = root.substream("dropout");

    let mut opt = OptimizerState::new(tc.base_lr, tc.weight_decay);
    let total = total_steps(target.train.len(), tc.batch_size, tc.max_epochs);
    let mut step = 0u64;
    let mut fit = FitTracker::new();
    let mut best: Option<(Snapshot, Snapshot)> = None;

    'training: for epoch in 0..tc.max_epochs {
        let mut loss_sum = 0.0;
        let mut loss_n = 0usize;
        for batch in batches(&target.train, tc.batch_size, tc.seed, epoch as u64)? {
            let mut tape = Tape::new();
            let assembly = Assembly {
                backbone,
                hooks: HookPlan::Fusion { members: members.to_vec(), psi: &psi },
                head: &head,
            };
            let dr = (backbone.config.dropout_rate > 0.0).then_some(&mut dropout_rng);
            let (ce, _, out) = assembly.loss(&mut tape, &batch.tokens, &batch.labels, dr)?;
            // psi is already bound on this tape through the hook plan; the
            // regularizer reuses those bindings via the encoder output
            let loss = if tc.fusion_lambda > 0.0 {
                let reg = fusion_regularizer(&mut tape, &psi, &out.fusion_vars, tc.fusion_lambda)?;
                tape.add(ce, reg)?
            } else {
                ce
            };
            loss_sum += tape.scalar(ce)?;
            loss_n += 1;
            let grads = tape.backward(loss)?;
            drop(tape);
            grads.accumulate_into(&mut psi)?;
            grads.accumulate_into(&mut head)?;
            let lr = schedule_lr(tc.schedule, step, total, tc.base_lr)?;
            let mut tensors = psi.active_tensors_mut();
            tensors.extend(head.tensors_mut());
            step_tensors(&mut opt, &mut tensors, lr)?;
            psi.visit_mut(&mut |t| t.zero_grad());
            head.visit_mut(&mut |t| t.zero_grad());
            step += 1;

            if let EvalCadence::Steps(k) = tc.eval_every {
                if step % k as u64 == 0 {
                    let dev = model_evaluate(
                        &Assembly {
                            backbone,
                            hooks: HookPlan::Fusion { members: members.to_vec(), psi: &psi },
                            head: &head,
                        },
                        &target.dev,
                        EVAL_BATCH,
                    )?;
                    let improved = fit.observe(EpochStat {
                        epoch,
                        step,
                        train_loss: loss_sum / loss_n.max(1) as f64,
                        dev_accuracy: dev.accuracy,
                    });
                    if improved {
                        best = Some((psi.snapshot(), head.snapshot()));
                    }
                    if fit.should_stop(tc.early_stop_patience) {
                        break 'training;
                    }
                }
            }
        }
        let dev = model_evaluate(
            &Assembly {
                backbone,
                hooks: HookPlan::Fusion { members: members.to_vec(), psi: &psi },
                head: &head,
            },
            &target.dev,
            EVAL_BATCH,
        )?;
        let improved = fit.observe(EpochStat {
            epoch,
            step,
            train_loss: loss_sum / loss_n.max(1) as f64,
            dev_accuracy: dev.accuracy,
        });
        if improved {
            best = Some((psi.snapshot(), head.snapshot()));
        }
        if fit.should_stop(tc.early_stop_patience) {
            break 'training;
        }
    }

    if let Some((p, h)) = &best {
        psi.restore(p)?;
        head.restore(h)?;
    }
    let best_stat = fit.best().cloned().unwrap();
    let assembly = Assembly {
        backbone,
        hooks: HookPlan::Fusion { members: members.to_vec(), psi: &psi },
        head: &head,
    };
    let final_dev = model_evaluate(&assembly, &target.dev, EVAL_BATCH)?;
    let final_test = model_evaluate(&assembly, &target.test, EVAL_BATCH)?;
    let trace = trace_activations(&assembly, &target.dev, EVAL_BATCH)?;

    let mut digests = BTreeMap::new();
    digests.insert("theta".to_string(), DigestPair { before: theta_before, after: backbone.digest() });
    for (m, before) in members.iter().zip(member_before) {
        digests.insert(
            format!("adapter:{}", m.task),
            DigestPair { before, after: m.digest() },
        );
    }
    digests.insert(
        format!("fusion:{}", target.name),
        DigestPair { before: String::new(), after: psi.digest() },
    );
    digests.insert(
        format!("head:{}", target.name),
        DigestPair { before: String::new(), after: head.digest() },
    );

    let record = RunRecord {
        mode: "fusion".to_string(),
        tasks: vec![target.name.clone()],
        evals: fit.evals,
        best_epoch: best_stat.epoch,
        best_dev_accuracy: best_stat.dev_accuracy,
        final_dev_accuracy: final_dev.accuracy,
        final_test_accuracy: final_test.accuracy,
        per_task_dev: BTreeMap::from([(target.name.clone(), final_dev.accuracy)]),
        stage_evals: Vec::new(),
        wall_time_secs: start.elapsed().as_secs_f64(),
        seeds: vec![tc.seed],
        config: serde_json::json!({
            "train": tc,
            "fusion": fusion_cfg,
            "members": psi.members,
            "lr_grid": [6e-6, 5e-5, 1e-4, 2e-4],
        }),
        digests,
        warnings: Vec::new(),
    };
    Ok(FusionRun { psi, head, record, trace })
}

// ---- baselines ---------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineMode {
    HeadOnly,
    Full,
    Sequential,
}

pub struct BaselineRun {
    /// trained backbone for full/sequential; None for head-only
    pub backbone: Option<BackboneParams>,
    pub heads: Vec<ClassifierHead>,
    pub record: RunRecord,
}

/// Baseline trainers. `HeadOnly` and `Full` take exactly one task;
/// `Sequential` fine-tunes the full model over the tasks in order and
/// re-evaluates every already-trained task after each stage.
pub fn train_baseline(
    backbone: &BackboneParams,
    tasks: &[&TaskDataset],
    mode: BaselineMode,
    tc: &TrainConfig,
) -> Result<BaselineRun> {
    tc.validate()?;
    if tasks.is_empty() {
        return Err(Error::Usage("baseline training needs at least one task".into()));
    }
    if mode != BaselineMode::Sequential && tasks.len() != 1 {
        return Err(Error::Usage("head_only and full baselines take exactly one task".into()));
    }
    for t in tasks {
        check_task_fits(backbone, t)?;
    }
    let start = Instant::now();
    let theta_before = backbone.digest();
    let mut warnings = Vec::new();
    if !backbone.pretrained {
        warnings.push("backbone is randomly initialized, not pretrained".to_string());
    }

    match mode {
        BaselineMode::HeadOnly => {
            let task = tasks[0];
            let (head, fit, best_stat) = fit_single(backbone, None, task, tc, "head")?;
            let assembly = Assembly { backbone, hooks: HookPlan::None, head: &head };
            let final_dev = model_evaluate(&assembly, &task.dev, EVAL_BATCH)?;
            let final_test = model_evaluate(&assembly, &task.test, EVAL_BATCH)?;
            let mut digests = BTreeMap::new();
            digests.insert(
                "theta".to_string(),
                DigestPair { before: theta_before, after: backbone.digest() },
            );
            digests.insert(
                format!("head:{}", task.name),
                DigestPair { before: String::new(), after: head.digest() },
            );
            let record = RunRecord {
                mode: "head_only".to_string(),
                tasks: vec![task.name.clone()],
                evals: fit,
                best_epoch: best_stat.epoch,
                best_dev_accuracy: best_stat.dev_accuracy,
                final_dev_accuracy: final_dev.accuracy,
                final_test_accuracy: final_test.accuracy,
                per_task_dev: BTreeMap::from([(task.name.clone(), final_dev.accuracy)]),
                stage_evals: Vec::new(),
                wall_time_secs: start.elapsed().as_secs_f64(),
                seeds: vec![tc.seed],
                config: serde_json::json!({ "train": tc, "mode": "head_only" }),
                digests,
                warnings,
            };
            Ok(BaselineRun { backbone: None, heads: vec![head], record })
        }
        BaselineMode::Full => {
            let task = tasks[0];
            let mut theta = backbone.clone();
            let (head, fit, best_stat) = fit_full(&mut theta, task, tc)?;
            let assembly = Assembly { backbone: &theta, hooks: HookPlan::None, head: &head };
            let final_dev = model_evaluate(&assembly, &task.dev, EVAL_BATCH)?;
            let final_test = model_evaluate(&assembly, &task.test, EVAL_BATCH)?;
            let mut digests = BTreeMap::new();
            digests.insert(
                "theta".to_string(),
                DigestPair { before: theta_before, after: theta.digest() },
            );
            digests.insert(
                format!("head:{}", task.name),
                DigestPair { before: String::new(), after: head.digest() },
            );
            let record = RunRecord {
                mode: "full".to_string(),
                tasks: vec![task.name.clone()],
                evals: fit,
                best_epoch: best_stat.epoch,
                best_dev_accuracy: best_stat.dev_accuracy,
                final_dev_accuracy: final_dev.accuracy,
                final_test_accuracy: final_test.accuracy,
                per_task_dev: BTreeMap::from([(task.name.clone(), final_dev.accuracy)]),
                stage_evals: Vec::new(),
                wall_time_secs: start.elapsed().as_secs_f64(),
                seeds: vec![tc.seed],
                config: serde_json::json!({ "train": tc, "mode": "full" }),
                digests,
                warnings,
            };
            Ok(BaselineRun { backbone: Some(theta), heads: vec![head], record })
        }
        BaselineMode::Sequential => {
            let mut theta = backbone.clone();
            let mut heads: Vec<ClassifierHead> = Vec::new();
            let mut stage_evals = Vec::new();
            let mut all_evals = Vec::new();
            let mut last_best = None;
            for task in tasks {
                let (head, fit, best_stat) = fit_full(&mut theta, task, tc)?;
                heads.push(head);
                all_evals.extend(fit);
                last_best = Some(best_stat);
                // score every task trained so far on the current backbone
                let mut evals = BTreeMap::new();
                for (i, seen) in tasks.iter().take(heads.len()).enumerate() {
                    let assembly =
                        Assembly { backbone: &theta, hooks: HookPlan::None, head: &heads[i] };
                    evals.insert(
                        seen.name.clone(),
                        model_evaluate(&assembly, &seen.dev, EVAL_BATCH)?.accuracy,
                    );
                }
                stage_evals.push(evals);
            }
            let last = tasks.last().unwrap();
            let assembly =
                Assembly { backbone: &theta, hooks: HookPlan::None, head: heads.last().unwrap() };
            let final_dev = model_evaluate(&assembly, &last.dev, EVAL_BATCH)?;
            let final_test = model_evaluate(&assembly, &last.test, EVAL_BATCH)?;
            let best_stat = last_best.unwrap();
            let mut digests = BTreeMap::new();
            digests.insert(
                "theta".to_string(),
                DigestPair { before: theta_before, after: theta.digest() },
            );
            let per_task_dev = stage_evals.last().cloned().unwrap_or_default();
            let record = RunRecord {
                mode: "sequential".to_string(),
                tasks: tasks.iter().map(|t| t.name.clone()).collect(),
                evals: all_evals,
                best_epoch: best_stat.epoch,
                best_dev_accuracy: best_stat.dev_accuracy,
                final_dev_accuracy: final_dev.accuracy,
                final_test_accuracy: final_test.accuracy,
                per_task_dev,
                stage_evals,
                wall_time_secs: start.elapsed().as_secs_f64(),
                seeds: vec![tc.seed],
                config: serde_json::json!({ "train": tc, "mode": "sequential" }),
                digests,
                warnings,
            };
            Ok(BaselineRun { backbone: Some(theta), heads, record })
        }
    }
}

/// Head-only fit against a frozen backbone.
fn fit_single(
    backbone: &BackboneParams,
    _hooks: Option<()>,
    task: &TaskDataset,
    tc: &TrainConfig,
    head_label: &str,
) -> Result<(ClassifierHead, Vec<EpochStat>, EpochStat)> {
    let root = SplitRng::new(tc.seed);
    let mut head = ClassifierHead::init(
        &task.name,
        backbone.config.hidden_dim,
        task.num_classes,
        &mut root.substream(head_label),
    );
    let mut opt = OptimizerState::new(tc.base_lr, tc.weight_decay);
    let total = total_steps(task.train.len(), tc.batch_size, tc.max_epochs);
    let mut step = 0u64;
    let mut fit = FitTracker::new();
    let mut best: Option<Snapshot> = None;
    'training: for epoch in 0..tc.max_epochs {
        let mut loss_sum = 0.0;
        let mut loss_n = 0usize;
        for batch in batches(&task.train, tc.batch_size, tc.seed, epoch as u64)? {
            let mut tape = Tape::new();
            let assembly = Assembly { backbone, hooks: HookPlan::None, head: &head };
            let (loss, _, _) = assembly.loss(&mut tape, &batch.tokens, &batch.labels, None)?;
            loss_sum += tape.scalar(loss)?;
            loss_n += 1;
            let grads = tape.backward(loss)?;
            drop(tape);
            grads.accumulate_into(&mut head)?;
            let lr = schedule_lr(tc.schedule, step, total, tc.base_lr)?;
            let mut tensors = head.tensors_mut();
            step_tensors(&mut opt, &mut tensors, lr)?;
            head.visit_mut(&mut |t| t.zero_grad());
            step += 1;

            if let EvalCadence::Steps(k) = tc.eval_every {
                if step % k as u64 == 0 {
                    let dev = model_evaluate(
                        &Assembly { backbone, hooks: HookPlan::None, head: &head },
                        &task.dev,
                        EVAL_BATCH,
                    )?;
                    let improved = fit.observe(EpochStat {
                        epoch,
                        step,
                        train_loss: loss_sum / loss_n.max(1) as f64,
                        dev_accuracy: dev.accuracy,
                    });
                    if improved {
                        best = Some(head.snapshot());
                    }
                    if fit.should_stop(tc.early_stop_patience) {
                        break 'training;
                    }
                }
            }
        }
        let dev = model_evaluate(
            &Assembly { backbone, hooks: HookPlan::None, head: &head },
            &task.dev,
            EVAL_BATCH,
        )?;
        let improved = fit.observe(EpochStat {
            epoch,
            step,
            train_loss: loss_sum / loss_n.max(1) as f64,
            dev_accuracy: dev.accuracy,
        });
        if improved {
            best = Some(head.snapshot());
        }
        if fit.should_stop(tc.early_stop_patience) {
            break 'training;
        }
    }
    if let Some(s) = &best {
        head.restore(s)?;
    }
    let best_stat = fit.best().cloned().unwrap();
    Ok((head, fit.evals, best_stat))
}

/// Full fine-tuning of `theta` plus a fresh head on one task, in place.
fn fit_full(
    theta: &mut BackboneParams,
    task: &TaskDataset,
    tc: &TrainConfig,
) -> Result<(ClassifierHead, Vec<EpochStat>, EpochStat)> {
    let root = SplitRng::new(tc.seed);
    let mut head = ClassifierHead::init(
        &task.name,
        theta.config.hidden_dim,
        task.num_classes,
        &mut root.substream(&format!("full.head.{}", task.name)),
    );
    let mut dropout_rng = root.substream("dropout");
    let mut opt = OptimizerState::new(tc.base_lr, tc.weight_decay);
    let total = total_steps(task.train.len(), tc.batch_size, tc.max_epochs);
    let mut step = 0u64;
    let mut fit = FitTracker::new();
    let mut best: Option<(Snapshot, Snapshot)> = None;
    'training: for epoch in 0..tc.max_epochs {
        let mut loss_sum = 0.0;
        let mut loss_n = 0usize;
        for batch in batches(&task.train, tc.batch_size, tc.seed, epoch as u64)? {
            let mut tape = Tape::new();
            let assembly = Assembly { backbone: theta, hooks: HookPlan::None, head: &head };
            let dr = (theta.config.dropout_rate > 0.0).then_some(&mut dropout_rng);
            let (loss, _, _) = assembly.loss(&mut tape, &batch.tokens, &batch.labels, dr)?;
            loss_sum += tape.scalar(loss)?;
            loss_n += 1;
            let grads = tape.backward(loss)?;
            drop(tape);
            grads.accumulate_into(theta)?;
            grads.accumulate_into(&mut head)?;
            let lr = schedule_lr(tc.schedule, step, total, tc.base_lr)?;
            let mut tensors = theta.tensors_mut();
            tensors.extend(head.tensors_mut());
            step_tensors(&mut opt, &mut tensors, lr)?;
            theta.visit_mut(&mut |t| t.zero_grad());
            head.visit_mut(&mut |t| t.zero_grad());
            step += 1;

            if let EvalCadence::Steps(k) = tc.eval_every {
                if step % k as u64 == 0 {
                    let dev = model_evaluate(
                        &Assembly { backbone: theta, hooks: HookPlan::None, head: &head },
                        &task.dev,
                        EVAL_BATCH,
                    )?;
                    let improved = fit.observe(EpochStat {
                        epoch,
                        step,
                        train_loss: loss_sum / loss_n.max(1) as f64,
                        dev_accuracy: dev.accuracy,
                    });
                    if improved {
                        best = Some((theta.snapshot(), head.snapshot()));
                    }
                    if fit.should_stop(tc.early_stop_patience) {
                        break 'training;
                    }
                }
            }
        }
        let dev = model_evaluate(
            &Assembly { backbone: theta, hooks: HookPlan::None, head: &head },
            &task.dev,
            EVAL_BATCH,
        )?;
        let improved = fit.observe(EpochStat {
            epoch,
            step,
            train_loss: loss_sum / loss_n.max(1) as f64,
            dev_accuracy: dev.accuracy,
        });
        if improved {
            best = Some((theta.snapshot(), head.snapshot()));
        }
        if fit.should_stop(tc.early_stop_patience) {
            break 'training;
        }
    }
    if let Some((t, h)) = &best {
        theta.restore(t)?;
        head.restore(h)?;
    }
    let best_stat = fit.best().cloned().unwrap();
    Ok((head, fit.evals, best_stat))
}
