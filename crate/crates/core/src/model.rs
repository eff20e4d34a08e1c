//! Model assembly: backbone + optional hooks + classification head, with
//! deterministic evaluation.
//!
//! Classification pools the first-position hidden state (the leading class
//! marker token) and projects it through the task's head.

use crate::backbone::{encoder_forward, BackboneParams, EncoderOut, HookPlan, TokenBatch};
use crate::error::{Error, Result};
use crate::rng::SplitRng;
use crate::tape::{Tape, Var};
use crate::tasks::TaskInstance;
use crate::tensor::{ParamGroup, Tensor};

/// Per-task classification head: pooled-representation projection plus bias.
/// Trainable in every mode, including fusion training.
#[derive(Debug, Clone)]
pub struct ClassifierHead {
    pub task: String,
    pub num_classes: usize,
    pub weight: Tensor,
    pub bias: Tensor,
}

impl ClassifierHead {
    pub fn init(task: &str, hidden_dim: usize, num_classes: usize, rng: &mut SplitRng) -> ClassifierHead {
        ClassifierHead {
            task: task.to_string(),
            num_classes,
            weight: Tensor::normal(format!("head.{task}.w"), &[hidden_dim, num_classes], 0.02, rng),
            bias: Tensor::zeros(format!("head.{task}.b"), &[1, num_classes]),
        }
    }
}

impl ParamGroup for ClassifierHead {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Tensor)) {
        f(&self.weight);
        f(&self.bias);
    }

    fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut Tensor)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

#[derive(serde::Serialize, serde::Deserialize)]
struct HeadHeader {
    task: String,
    num_classes: usize,
    hidden_dim: usize,
}

pub fn save_head(
    head: &ClassifierHead,
    backbone_fingerprint: &str,
    metadata: serde_json::Value,
    path: &std::path::Path,
) -> Result<()> {
    let header = HeadHeader {
        task: head.task.clone(),
        num_classes: head.num_classes,
        hidden_dim: head.weight.shape[0],
    };
    crate::checkpoint::write_container(
        path,
        serde_json::to_value(&header)?,
        backbone_fingerprint,
        metadata,
        &head.tensors(),
    )
}

pub fn load_head(path: &std::path::Path, expected_fingerprint: &str) -> Result<ClassifierHead> {
    let container = crate::checkpoint::read_container(path)?;
    if container.fingerprint != expected_fingerprint {
        return Err(Error::Compat(format!(
            "head checkpoint fingerprint {} does not match backbone {}",
            container.fingerprint, expected_fingerprint
        )));
    }
    let header: HeadHeader = serde_json::from_value(container.config.clone())?;
    let mut tensors = container.tensors.into_iter();
    let weight = tensors
        .next()
        .ok_or_else(|| Error::Format("head checkpoint missing weight tensor".into()))?;
    let bias = tensors
        .next()
        .ok_or_else(|| Error::Format("head checkpoint missing bias tensor".into()))?;
    if weight.shape != vec![header.hidden_dim, header.num_classes] {
        return Err(Error::Format(format!("head weight has shape {:?}", weight.shape)));
    }
    Ok(ClassifierHead {
        task: header.task,
        num_classes: header.num_classes,
        weight: Tensor { trainable: true, ..weight },
        bias: Tensor { trainable: true, ..bias },
    })
}

/// Everything needed to map a token batch to logits.
pub struct Assembly<'a> {
    pub backbone: &'a BackboneParams,
    pub hooks: HookPlan<'a>,
    pub head: &'a ClassifierHead,
}

impl Assembly<'_> {
    /// Forward to per-sequence logits `[batch, classes]`.
    pub fn logits(
        &self,
        tape: &mut Tape,
        batch: &TokenBatch,
        dropout_rng: Option<&mut SplitRng>,
    ) -> Result<(Var, EncoderOut)> {
        let out = encoder_forward(tape, self.backbone, batch, &self.hooks, dropout_rng)?;
        let pooled = pool(tape, self.backbone.config.pooling, &out, batch)?;
        let w = tape.param(&self.head.weight)?;
        let b = tape.param(&self.head.bias)?;
        let proj = tape.matmul(pooled, w)?;
        let logits = tape.add_row_broadcast(proj, b)?;
        Ok((logits, out))
    }

    /// Cross-entropy loss over a labeled batch.
    pub fn loss(
        &self,
        tape: &mut Tape,
        batch: &TokenBatch,
        labels: &[usize],
        dropout_rng: Option<&mut SplitRng>,
    ) -> Result<(Var, Var, EncoderOut)> {
        let (logits, out) = self.logits(tape, batch, dropout_rng)?;
        let loss = tape.cross_entropy(logits, labels)?;
        Ok((loss, logits, out))
    }
}

/// Pool per-position states to one row per sequence. Mean pooling weights
/// only content positions (pads excluded), implemented as a single constant
/// averaging matrix so gradients flow through a plain matmul.
fn pool(
    tape: &mut Tape,
    pooling: crate::backbone::Pooling,
    out: &EncoderOut,
    batch: &TokenBatch,
) -> Result<Var> {
    match pooling {
        crate::backbone::Pooling::FirstToken => {
            let first: Vec<usize> = (0..batch.batch).map(|b| b * batch.seq).collect();
            tape.gather_rows(out.hidden, &first)
        }
        crate::backbone::Pooling::Mean => {
            let rows = batch.batch;
            let cols = batch.batch * batch.seq;
            let mut weights = vec![0.0; rows * cols];
            for b in 0..batch.batch {
                let content: Vec<usize> =
                    (0..batch.seq).filter(|t| !batch.is_pad(b, *t)).collect();
                let w = 1.0 / content.len() as f64;
                for t in content {
                    weights[b * cols + b * batch.seq + t] = w;
                }
            }
            let w = tape.constant(rows, cols, weights)?;
            tape.matmul(w, out.hidden)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassCount {
    pub correct: usize,
    pub total: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    pub accuracy: f64,
    pub correct: usize,
    pub total: usize,
    pub per_class: Vec<ClassCount>,
}

/// Argmax prediction of one logit row; ties break toward the lowest class.
pub fn argmax_class(row: &[f64]) -> usize {
    let mut best = 0;
    for (c, v) in row.iter().enumerate().skip(1) {
        if *v > row[best] {
            best = c;
        }
    }
    best
}

/// Deterministic accuracy over a split: instances are batched in order
/// (no shuffling, no dropout).
pub fn evaluate(assembly: &Assembly<'_>, instances: &[TaskInstance], batch_size: usize) -> Result<EvalResult> {
    if instances.is_empty() {
        return Err(Error::Data("cannot evaluate an empty split".into()));
    }
    let classes = assembly.head.num_classes;
    let mut per_class = vec![ClassCount { correct: 0, total: 0 }; classes];
    let mut correct = 0usize;
    for chunk in instances.chunks(batch_size.max(1)) {
        let rows: Vec<Vec<u32>> = chunk.iter().map(|i| i.tokens.clone()).collect();
        let batch = TokenBatch::from_rows(&rows)?;
        let mut tape = Tape::new();
        let (logits, _) = assembly.logits(&mut tape, &batch, None)?;
        let values = tape.value(logits);
        for (i, inst) in chunk.iter().enumerate() {
            if inst.label >= classes {
                return Err(Error::Data(format!("label {} out of range", inst.label)));
            }
            let row = &values[i * classes..(i + 1) * classes];
            let pred = argmax_class(row);
            per_class[inst.label].total += 1;
            if pred == inst.label {
                per_class[inst.label].correct += 1;
                correct += 1;
            }
        }
    }
    Ok(EvalResult {
        accuracy: correct as f64 / instances.len() as f64,
        correct,
        total: instances.len(),
        per_class,
    })
}

/// Full logit matrix over a split, row per instance. Used by tests that
/// compare two assemblies bit-for-bit.
pub fn collect_logits(
    assembly: &Assembly<'_>,
    instances: &[TaskInstance],
    batch_size: usize,
) -> Result<Vec<Vec<f64>>> {
    let classes = assembly.head.num_classes;
    let mut out = Vec::with_capacity(instances.len());
    for chunk in instances.chunks(batch_size.max(1)) {
        let rows: Vec<Vec<u32>> = chunk.iter().map(|i| i.tokens.clone()).collect();
        let batch = TokenBatch::from_rows(&rows)?;
        let mut tape = Tape::new();
        let (logits, _) = assembly.logits(&mut tape, &batch, None)?;
        let values = tape.value(logits);
        for i in 0..chunk.len() {
            out.push(values[i * classes..(i + 1) * classes].to_vec());
        }
    }
    Ok(out)
}
