//! Shared helpers for the integration suites: tiny configurations, flat
//! parameter views for finite-difference checks, and independent oracles
//! (bag-of-tokens logistic regression, unigram baselines).

#![allow(dead_code)]

use adapterlab::backbone::{BackboneConfig, BackboneParams};
use adapterlab::tape::Activation;
use adapterlab::tasks::TaskInstance;
use adapterlab::tensor::{ParamGroup, Tensor};

/// Smallest model that still has multi-head attention and depth.
pub fn tiny_backbone() -> BackboneConfig {
    BackboneConfig {
        vocab_size: 48,
        max_seq_len: 16,
        hidden_dim: 16,
        num_layers: 2,
        num_heads: 2,
        ffn_dim: 32,
        dropout_rate: 0.0,
        ffn_activation: Activation::Gelu,
        pooling: Default::default(),
    }
}

/// Mid-size model for behavioral experiments.
pub fn small_backbone() -> BackboneConfig {
    BackboneConfig {
        vocab_size: 64,
        max_seq_len: 16,
        hidden_dim: 32,
        num_layers: 2,
        num_heads: 2,
        ffn_dim: 64,
        dropout_rate: 0.0,
        ffn_activation: Activation::Gelu,
        pooling: Default::default(),
    }
}

/// Clone every tensor of a group into a flat list (for grad_check).
pub fn flatten(group: &dyn ParamGroup) -> Vec<Tensor> {
    group.tensors().into_iter().cloned().collect()
}

/// Overwrite a backbone's tensor values from a flat slice in visit order,
/// starting at `offset`; returns the number of tensors consumed.
pub fn overwrite_backbone(proto: &BackboneParams, ps: &[Tensor], offset: usize) -> (BackboneParams, usize) {
    let mut b = proto.clone();
    let mut i = offset;
    b.visit_mut(&mut |t| {
        t.data.copy_from_slice(&ps[i].data);
        i += 1;
    });
    (b, i)
}

pub fn overwrite_group<G: ParamGroup + Clone>(proto: &G, ps: &[Tensor], offset: usize) -> (G, usize) {
    let mut g = proto.clone();
    let mut i = offset;
    g.visit_mut(&mut |t| {
        t.data.copy_from_slice(&ps[i].data);
        i += 1;
    });
    (g, i)
}

/// Multinomial logistic regression over bag-of-token counts: an independent
/// check that a task is linearly separable from token counts alone.
pub fn bag_of_tokens_logistic_accuracy(
    train: &[TaskInstance],
    eval: &[TaskInstance],
    num_classes: usize,
    vocab: usize,
) -> f64 {
    let feats = |inst: &TaskInstance| -> Vec<f64> {
        let mut v = vec![0.0; vocab];
        for &t in &inst.tokens {
            v[t as usize] += 1.0;
        }
        v
    };
    let mut w = vec![0.0f64; vocab * num_classes];
    let mut b = vec![0.0f64; num_classes];
    let lr = 0.5;
    for _ in 0..200 {
        let mut gw = vec![0.0f64; vocab * num_classes];
        let mut gb = vec![0.0f64; num_classes];
        for inst in train {
            let x = feats(inst);
            let mut logits = b.clone();
            for (j, &xv) in x.iter().enumerate() {
                if xv != 0.0 {
                    for c in 0..num_classes {
                        logits[c] += xv * w[j * num_classes + c];
                    }
                }
            }
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            let sum: f64 = exps.iter().sum();
            for c in 0..num_classes {
                let p = exps[c] / sum;
                let err = p - if c == inst.label { 1.0 } else { 0.0 };
                gb[c] += err;
                for (j, &xv) in x.iter().enumerate() {
                    if xv != 0.0 {
                        gw[j * num_classes + c] += err * xv;
                    }
                }
            }
        }
        let n = train.len() as f64;
        for (wv, g) in w.iter_mut().zip(&gw) {
            *wv -= lr * g / n;
        }
        for (bv, g) in b.iter_mut().zip(&gb) {
            *bv -= lr * g / n;
        }
    }
    let mut correct = 0;
    for inst in eval {
        let x = feats(inst);
        let mut logits = b.clone();
        for (j, &xv) in x.iter().enumerate() {
            if xv != 0.0 {
                for c in 0..num_classes {
                    logits[c] += xv * w[j * num_classes + c];
                }
            }
        }
        let mut best = 0;
        for c in 1..num_classes {
            if logits[c] > logits[best] {
                best = c;
            }
        }
        if best == inst.label {
            correct += 1;
        }
    }
    correct as f64 / eval.len() as f64
}

/// Accuracy of always predicting the most frequent content token, computed
/// from corpus counts: the baseline masked-token prediction must beat.
pub fn unigram_baseline(corpus: &[Vec<u32>]) -> f64 {
    let mut counts = std::collections::HashMap::new();
    let mut total = 0usize;
    for seq in corpus {
        for &t in seq.iter().skip(1) {
            *counts.entry(t).or_insert(0usize) += 1;
            total += 1;
        }
    }
    let max = counts.values().max().copied().unwrap_or(0);
    max as f64 / total as f64
}
