//! The fusion layer: per-encoder-layer Query/Key/Value matrices that mix the
//! outputs of N member adapters as a learned, input-dependent convex
//! combination.
//!
//! Per position, with `h` the sub-layer output before the pretrained norm
//! and `z_n` the member adapter outputs:
//!
//! ```text
//! q      = h Q_l
//! e_n    = q . (z_n K_l)            n = 1..N
//! s      = softmax(e_1 .. e_N)
//! o      = sum_n s_n (z_n V_l)
//! ```
//!
//! Q and K start random (std 0.02); V starts at the identity plus
//! off-diagonal noise of Frobenius norm 1e-6, so the mixer initially passes
//! member outputs through nearly unchanged. There are no biases.

use serde::{Deserialize, Serialize};

use crate::adapters::AdapterParams;
use crate::backbone::BackboneConfig;
use crate::checkpoint::{self, Container};
use crate::error::{Error, Result};
use crate::rng::SplitRng;
use crate::tape::{Tape, Var};
use crate::tensor::{ParamGroup, Tensor};

/// Which penalty `fusion_regularizer` applies to the value matrices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ValueReg {
    /// `lambda * sum_l ||V_l - I||_F^2`: penalize drift away from the
    /// identity the value matrices start at.
    #[default]
    DeviationFromIdentity,
    /// `lambda * sum_l ||V_l||_F^2`
    PlainNorm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct FusionConfig {
    /// skip fusion (and its members) in the final layer
    pub drop_last_layer: bool,
    pub value_reg: ValueReg,
}

#[derive(Debug, Clone)]
pub struct FusionLayer {
    pub q: Tensor,
    pub k: Tensor,
    pub v: Tensor,
}

/// Fusion parameters for one target task: exactly `3 * L * d^2` scalars in
/// `fusion.{target}.layer{l}.{q,k,v}` order, plus the ordered member list
/// fixed at construction.
#[derive(Debug, Clone)]
pub struct FusionParams {
    pub target_task: String,
    pub members: Vec<String>,
    pub config: FusionConfig,
    pub backbone_fingerprint: String,
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub layers: Vec<FusionLayer>,
}

impl ParamGroup for FusionParams {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Tensor)) {
        for l in &self.layers {
            f(&l.q);
            f(&l.k);
            f(&l.v);
        }
    }

    fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut Tensor)) {
        for l in &mut self.layers {
            f(&mut l.q);
            f(&mut l.k);
            f(&mut l.v);
        }
    }
}

impl FusionParams {
    pub fn num_members(&self) -> usize {
        self.members.len()
    }

    /// Layers where fusion actually runs; the optimizer and the regularizer
    /// both use this so unused tensors never receive (or require) gradients.
    pub fn active_layers(&self) -> std::ops::Range<usize> {
        if self.config.drop_last_layer && self.num_layers > 1 {
            0..self.num_layers - 1
        } else {
            0..self.num_layers
        }
    }

    /// Mutable tensors of the active layers only.
    pub fn active_tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let active = self.active_layers();
        let mut out = Vec::with_capacity(3 * active.len());
        for l in &mut self.layers[active] {
            out.push(&mut l.q);
            out.push(&mut l.k);
            out.push(&mut l.v);
        }
        out
    }
}

/// Initialize fusion parameters over an ordered member set. Members must
/// share the backbone fingerprint and placement set.
pub fn fusion_init(
    backbone: &BackboneConfig,
    members: &[&AdapterParams],
    target_task: &str,
    seed: u64,
    config: FusionConfig,
) -> Result<FusionParams> {
    if members.is_empty() {
        return Err(Error::Usage("fusion requires at least one member adapter".into()));
    }
    let fp = backbone.fingerprint();
    let placement = members[0].config.placement_set();
    for m in members {
        if m.backbone_fingerprint != fp {
            return Err(Error::Compat(format!(
                "member {} was built for a different backbone (fingerprint {})",
                m.task, m.backbone_fingerprint
            )));
        }
        if m.config.placement_set() != placement {
            return Err(Error::Compat(format!(
                "member {} placement differs from the first member",
                m.task
            )));
        }
    }
    let d = backbone.hidden_dim;
    let mut rng = SplitRng::new(seed).substream("fusion");
    let mut layers = Vec::with_capacity(backbone.num_layers);
    for l in 0..backbone.num_layers {
        let p = |suffix: &str| format!("fusion.{target_task}.layer{l}.{suffix}");
        let q = Tensor::normal(p("q"), &[d, d], 0.02, &mut rng);
        let k = Tensor::normal(p("k"), &[d, d], 0.02, &mut rng);
        // identity plus off-diagonal noise scaled to Frobenius norm 1e-6
        let mut v = Tensor::eye(p("v"), d);
        let mut noise = vec![0.0; d * d];
        for r in 0..d {
            for c in 0..d {
                if r != c {
                    noise[r * d + c] = rng.normal();
                }
            }
        }
        let norm = noise.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            let scale = 1e-6 / norm;
            for (vv, nn) in v.data.iter_mut().zip(&noise) {
                *vv += scale * nn;
            }
        }
        layers.push(FusionLayer { q, k, v });
    }
    Ok(FusionParams {
        target_task: target_task.to_string(),
        members: members.iter().map(|m| m.task.clone()).collect(),
        config,
        backbone_fingerprint: fp,
        hidden_dim: d,
        num_layers: backbone.num_layers,
        layers,
    })
}

/// Tape bindings for the fusion stack.
pub struct BoundFusion {
    layers: Vec<BoundFusionLayer>,
}

#[derive(Clone, Copy)]
pub struct BoundFusionLayer {
    pub q: Var,
    pub k: Var,
    pub v: Var,
}

impl BoundFusion {
    pub fn layer(&self, l: usize) -> Result<&BoundFusionLayer> {
        self.layers.get(l).ok_or_else(|| Error::Usage(format!("fusion has no layer {l}")))
    }

    pub fn layer_vars(&self) -> Vec<BoundFusionLayer> {
        self.layers.clone()
    }
}

pub fn bind_fusion(tape: &mut Tape, psi: &FusionParams) -> Result<BoundFusion> {
    let mut layers = Vec::with_capacity(psi.layers.len());
    for l in &psi.layers {
        layers.push(BoundFusionLayer {
            q: tape.param(&l.q)?,
            k: tape.param(&l.k)?,
            v: tape.param(&l.v)?,
        });
    }
    Ok(BoundFusion { layers })
}

/// Mix member outputs at one layer. `h` is the query source `[P, d]`, `zs`
/// the member outputs (each `[P, d]`). Returns the mixed output `[P, d]` and
/// the per-position weights `[P, N]`.
pub fn fusion_forward(
    tape: &mut Tape,
    layer: &BoundFusionLayer,
    h: Var,
    zs: &[Var],
) -> Result<(Var, Var)> {
    if zs.is_empty() {
        return Err(Error::Usage("fusion_forward with zero members".into()));
    }
    let q = tape.matmul(h, layer.q)?;
    let mut logits = Vec::with_capacity(zs.len());
    for &z in zs {
        let key = tape.matmul(z, layer.k)?;
        let prod = tape.mul(q, key)?;
        logits.push(tape.row_sum(prod)?);
    }
    let logits = tape.concat_cols(&logits)?;
    let s = tape.softmax_rows(logits)?;
    let mut out: Option<Var> = None;
    for (n, &z) in zs.iter().enumerate() {
        let value = tape.matmul(z, layer.v)?;
        let weight = tape.slice_cols(s, n, 1)?;
        let term = tape.mul_col_broadcast(value, weight)?;
        out = Some(match out {
            Some(acc) => tape.add(acc, term)?,
            None => term,
        });
    }
    Ok((out.unwrap(), s))
}

/// Value-matrix penalty added to the stage-2 training loss; Q and K are
/// unregularized. Only active layers contribute. `layers` are the bound
/// fusion variables on the same tape (from `bind_fusion` or the encoder's
/// hook plan).
pub fn fusion_regularizer(
    tape: &mut Tape,
    psi: &FusionParams,
    layers: &[BoundFusionLayer],
    lambda: f64,
) -> Result<Var> {
    let d = psi.hidden_dim;
    let mut total: Option<Var> = None;
    for l in psi.active_layers() {
        let v = layers
            .get(l)
            .ok_or_else(|| Error::Usage(format!("fusion regularizer missing layer {l}")))?
            .v;
        let dev = match psi.config.value_reg {
            ValueReg::DeviationFromIdentity => {
                let eye = tape.constant(d, d, Tensor::eye("", d).data)?;
                tape.sub(v, eye)?
            }
            ValueReg::PlainNorm => v,
        };
        let sq = tape.mul(dev, dev)?;
        let s = tape.sum_all(sq)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, s)?,
            None => s,
        });
    }
    let total = total.ok_or_else(|| Error::Usage("regularizer over zero layers".into()))?;
    tape.scale(total, lambda)
}

// ---- checkpointing -----------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct FusionHeaderConfig {
    target_task: String,
    members: Vec<String>,
    fusion: FusionConfig,
    hidden_dim: usize,
    num_layers: usize,
}

pub fn serialize_fusion(
    psi: &FusionParams,
    metadata: serde_json::Value,
    path: &std::path::Path,
) -> Result<()> {
    let header = FusionHeaderConfig {
        target_task: psi.target_task.clone(),
        members: psi.members.clone(),
        fusion: psi.config.clone(),
        hidden_dim: psi.hidden_dim,
        num_layers: psi.num_layers,
    };
    checkpoint::write_container(
        path,
        serde_json::to_value(&header)?,
        &psi.backbone_fingerprint,
        metadata,
        &psi.tensors(),
    )
}

pub fn deserialize_fusion(path: &std::path::Path, backbone: &BackboneConfig) -> Result<FusionParams> {
    let container = checkpoint::read_container(path)?;
    fusion_from_container(container, backbone)
}

pub fn fusion_from_container(container: Container, backbone: &BackboneConfig) -> Result<FusionParams> {
    if container.fingerprint != backbone.fingerprint() {
        return Err(Error::Compat(format!(
            "fusion checkpoint fingerprint {} does not match backbone {}",
            container.fingerprint,
            backbone.fingerprint()
        )));
    }
    let header: FusionHeaderConfig = serde_json::from_value(container.config.clone())?;
    if header.hidden_dim != backbone.hidden_dim || header.num_layers != backbone.num_layers {
        return Err(Error::Compat("fusion checkpoint dimensions do not match backbone".into()));
    }
    let d = header.hidden_dim;
    let mut by_name: std::collections::HashMap<String, Tensor> =
        container.tensors.into_iter().map(|t| (t.name.clone(), t)).collect();
    let mut layers = Vec::with_capacity(header.num_layers);
    for l in 0..header.num_layers {
        let mut take = |suffix: &str| -> Result<Tensor> {
            let name = format!("fusion.{}.layer{l}.{suffix}", header.target_task);
            let t = by_name
                .remove(&name)
                .ok_or_else(|| Error::Format(format!("checkpoint is missing tensor {name}")))?;
            if t.shape != vec![d, d] {
                return Err(Error::Format(format!("tensor {name} has shape {:?}", t.shape)));
            }
            Ok(t)
        };
        layers.push(FusionLayer { q: take("q")?, k: take("k")?, v: take("v")? });
    }
    if !by_name.is_empty() {
        let extra: Vec<String> = by_name.keys().cloned().collect();
        return Err(Error::Format(format!("checkpoint has unexpected tensors: {extra:?}")));
    }
    Ok(FusionParams {
        target_task: header.target_task,
        members: header.members,
        config: header.fusion,
        backbone_fingerprint: container.fingerprint,
        hidden_dim: d,
        num_layers: header.num_layers,
        layers,
    })
}

// ---- activation tracing ------------------------------------------------------

/// Mean softmax weight per (layer, member), averaged over every content
/// position of every evaluated instance. Layers are numbered from 1; when
/// members sit at both taps of a layer, both contribute to that layer's
/// average.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct FusionActivationTrace {
    pub target_task: String,
    pub members: Vec<String>,
    pub layers: Vec<LayerActivations>,
    pub instances: usize,
    pub positions: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LayerActivations {
    /// 1-based encoder layer
    pub layer: usize,
    /// mean weight per member, in member order
    pub mean: Vec<f64>,
}

impl FusionActivationTrace {
    /// Every layer's means must sum to 1 (each position's weights do).
    pub fn validate(&self) -> Result<()> {
        for l in &self.layers {
            let sum: f64 = l.mean.iter().sum();
            if (sum - 1.0).abs() > 1e-6 {
                return Err(Error::Numeric(format!(
                    "layer {} trace sums to {sum}, expected 1",
                    l.layer
                )));
            }
            if l.mean.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::Numeric(format!("layer {} trace outside [0,1]", l.layer)));
            }
        }
        Ok(())
    }

    /// Index of the member with the highest mean weight at a layer.
    pub fn argmax_member(&self, layer_1based: usize) -> Option<usize> {
        self.layers.iter().find(|l| l.layer == layer_1based).map(|l| {
            let mut best = 0;
            for (i, v) in l.mean.iter().enumerate().skip(1) {
                if *v > l.mean[best] {
                    best = i;
                }
            }
            best
        })
    }
}

/// Run the fused assembly over a dataset and average the softmax weights per
/// (layer, member) across all content (non-pad) positions pooled over every
/// instance. The assembly must carry fusion hooks.
pub fn trace_activations(
    assembly: &crate::model::Assembly<'_>,
    instances: &[crate::tasks::TaskInstance],
    batch_size: usize,
) -> Result<FusionActivationTrace> {
    use crate::backbone::HookPlan;
    let (psi, num_members) = match &assembly.hooks {
        HookPlan::Fusion { members, psi } => (*psi, members.len()),
        _ => return Err(Error::Usage("activation tracing requires fusion hooks".into())),
    };
    if instances.is_empty() {
        return Err(Error::Data("cannot trace over an empty dataset".into()));
    }
    let num_layers = psi.num_layers;
    let mut sums = vec![vec![0.0f64; num_members]; num_layers];
    let mut counts = vec![0usize; num_layers];
    let mut total_positions = 0usize;

    for chunk in instances.chunks(batch_size.max(1)) {
        let rows: Vec<Vec<u32>> = chunk.iter().map(|i| i.tokens.clone()).collect();
        let batch = crate::backbone::TokenBatch::from_rows(&rows)?;
        let mut tape = Tape::new();
        let (_, out) = assembly.logits(&mut tape, &batch, None)?;
        let content: Vec<usize> = (0..batch.batch)
            .flat_map(|b| (0..batch.seq).map(move |t| (b, t)))
            .filter(|(b, t)| !batch.is_pad(*b, *t))
            .map(|(b, t)| b * batch.seq + t)
            .collect();
        total_positions += content.len();
        for (layer, _site, s) in &out.fusion_weights {
            let sv = tape.value(*s);
            for &p in &content {
                for n in 0..num_members {
                    sums[*layer][n] += sv[p * num_members + n];
                }
            }
            counts[*layer] += content.len();
        }
    }

    let mut layers = Vec::new();
    for l in 0..num_layers {
        if counts[l] == 0 {
            continue; // site without fusion (e.g. dropped last layer)
        }
        let mean: Vec<f64> = sums[l].iter().map(|s| s / counts[l] as f64).collect();
        layers.push(LayerActivations { layer: l + 1, mean });
    }
    let trace = FusionActivationTrace {
        target_task: psi.target_task.clone(),
        members: psi.members.clone(),
        layers,
        instances: instances.len(),
        positions: total_positions,
    };
    trace.validate()?;
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::{make_adapter, AdapterConfig};
    use crate::gradcheck::grad_check;

    fn toy_members(cfg: &BackboneConfig, n: usize) -> Vec<AdapterParams> {
        (0..n)
            .map(|i| make_adapter(cfg, &AdapterConfig::pfeiffer(16), &format!("task{i}"), i as u64).unwrap())
            .collect()
    }

    #[test]
    fn init_value_matrix_norms() {
        let cfg = BackboneConfig::toy();
        let members = toy_members(&cfg, 3);
        let refs: Vec<&AdapterParams> = members.iter().collect();
        let psi = fusion_init(&cfg, &refs, "task0", 5, FusionConfig::default()).unwrap();
        let d = cfg.hidden_dim;
        for layer in &psi.layers {
            let mut dev_sq = 0.0;
            for r in 0..d {
                for c in 0..d {
                    let expect = if r == c { 1.0 } else { 0.0 };
                    let diff = layer.v.data[r * d + c] - expect;
                    dev_sq += diff * diff;
                    if r == c {
                        assert!((layer.v.data[r * d + c] - 1.0).abs() <= 1e-6);
                    }
                }
            }
            let dev = dev_sq.sqrt();
            assert!((dev - 1e-6).abs() < 1e-12, "|V - I|_F = {dev}");
        }
    }

    #[test]
    fn init_is_deterministic() {
        let cfg = BackboneConfig::toy();
        let members = toy_members(&cfg, 2);
        let refs: Vec<&AdapterParams> = members.iter().collect();
        let a = fusion_init(&cfg, &refs, "t", 5, FusionConfig::default()).unwrap();
        let b = fusion_init(&cfg, &refs, "t", 5, FusionConfig::default()).unwrap();
        assert_eq!(a.digest(), b.digest());
    }

    #[test]
    fn mismatched_member_fingerprints_rejected() {
        let cfg = BackboneConfig::toy();
        let mut other = cfg.clone();
        other.num_layers = 2;
        let a = make_adapter(&cfg, &AdapterConfig::pfeiffer(16), "a", 1).unwrap();
        let b = make_adapter(&other, &AdapterConfig::pfeiffer(16), "b", 2).unwrap();
        let err = fusion_init(&cfg, &[&a, &b], "a", 0, FusionConfig::default());
        assert!(matches!(err, Err(Error::Compat(_))));
    }

    #[test]
    fn single_member_identity_value_passes_through() {
        let cfg = BackboneConfig::toy();
        let members = toy_members(&cfg, 1);
        let refs: Vec<&AdapterParams> = members.iter().collect();
        let mut psi = fusion_init(&cfg, &refs, "task0", 5, FusionConfig::default()).unwrap();
        // force V to the exact identity
        let d = cfg.hidden_dim;
        for l in &mut psi.layers {
            l.v.data.copy_from_slice(&Tensor::eye("", d).data);
        }
        let mut rng = SplitRng::new(8);
        let mut tape = Tape::new();
        let bound = bind_fusion(&mut tape, &psi).unwrap();
        let hdata: Vec<f64> = (0..6 * d).map(|_| rng.normal()).collect();
        let zdata: Vec<f64> = (0..6 * d).map(|_| rng.normal()).collect();
        let h = tape.constant(6, d, hdata).unwrap();
        let z = tape.constant(6, d, zdata.clone()).unwrap();
        let (o, s) = fusion_forward(&mut tape, bound.layer(0).unwrap(), h, &[z]).unwrap();
        assert!(tape.value(s).iter().all(|v| *v == 1.0));
        for (got, want) in tape.value(o).iter().zip(&zdata) {
            assert_eq!(got, want);
        }
    }

    #[test]
    fn identical_members_yield_their_common_value() {
        // weights can be anything, but the convex combination of identical
        // values is that value
        let cfg = BackboneConfig::toy();
        let members = toy_members(&cfg, 3);
        let refs: Vec<&AdapterParams> = members.iter().collect();
        let psi = fusion_init(&cfg, &refs, "task0", 5, FusionConfig::default()).unwrap();
        let d = cfg.hidden_dim;
        let mut rng = SplitRng::new(9);
        let mut tape = Tape::new();
        let bound = bind_fusion(&mut tape, &psi).unwrap();
        let hdata: Vec<f64> = (0..4 * d).map(|_| rng.normal()).collect();
        let zdata: Vec<f64> = (0..4 * d).map(|_| rng.normal()).collect();
        let h = tape.constant(4, d, hdata).unwrap();
        let z1 = tape.constant(4, d, zdata.clone()).unwrap();
        let z2 = tape.constant(4, d, zdata.clone()).unwrap();
        let z3 = tape.constant(4, d, zdata.clone()).unwrap();
        let (o, _) = fusion_forward(&mut tape, bound.layer(1).unwrap(), h, &[z1, z2, z3]).unwrap();
        // compare against z V directly
        let zv = tape.constant(4, d, zdata).unwrap();
        let v = bound.layer(1).unwrap().v;
        let want = tape.matmul(zv, v).unwrap();
        for (got, want) in tape.value(o).iter().zip(tape.value(want)) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn two_member_hand_case() {
        // q = [1, 0]; keys [1,0] and [0,1] give logits (1, 0), so
        // s = (0.73106, 0.26894); with V = I and z1 = [1,1], z2 = [3,1]:
        // o = 0.73106*[1,1] + 0.26894*[3,1] = (1.53788, 1.0).
        // K is solved so the z rows map to those keys:
        // K = Z^-1 with Z = [[1,1],[3,1]] => [[-0.5,0.5],[1.5,-0.5]]
        let mut tape = Tape::new();
        let k_mat = tape.constant(2, 2, vec![-0.5, 0.5, 1.5, -0.5]).unwrap();
        let q_mat = tape.constant(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let v_mat = tape.constant(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let layer = BoundFusionLayer { q: q_mat, k: k_mat, v: v_mat };
        let h = tape.constant(1, 2, vec![1.0, 0.0]).unwrap();
        let z1 = tape.constant(1, 2, vec![1.0, 1.0]).unwrap();
        let z2 = tape.constant(1, 2, vec![3.0, 1.0]).unwrap();
        let (o, s) = fusion_forward(&mut tape, &layer, h, &[z1, z2]).unwrap();
        let sv = tape.value(s);
        assert!((sv[0] - 0.73106).abs() < 1e-5, "{sv:?}");
        assert!((sv[1] - 0.26894).abs() < 1e-5);
        let ov = tape.value(o);
        assert!((ov[0] - 1.53788).abs() < 1e-5, "{ov:?}");
        assert!((ov[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn weights_sum_to_one_per_position() {
        let cfg = BackboneConfig::toy();
        let members = toy_members(&cfg, 4);
        let refs: Vec<&AdapterParams> = members.iter().collect();
        let psi = fusion_init(&cfg, &refs, "task0", 3, FusionConfig::default()).unwrap();
        let d = cfg.hidden_dim;
        let mut rng = SplitRng::new(10);
        let mut tape = Tape::new();
        let bound = bind_fusion(&mut tape, &psi).unwrap();
        let h = tape.constant(8, d, (0..8 * d).map(|_| rng.normal()).collect()).unwrap();
        let zs: Vec<Var> = (0..4)
            .map(|_| tape.constant(8, d, (0..8 * d).map(|_| rng.normal()).collect()).unwrap())
            .collect();
        let (_, s) = fusion_forward(&mut tape, bound.layer(2).unwrap(), h, &zs).unwrap();
        let sv = tape.value(s);
        for r in 0..8 {
            let sum: f64 = sv[r * 4..(r + 1) * 4].iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn regularizer_values() {
        let cfg = {
            let mut c = BackboneConfig::toy();
            c.num_layers = 1;
            c
        };
        let members = toy_members(&cfg, 2);
        let refs: Vec<&AdapterParams> = members.iter().collect();
        let mut psi = fusion_init(&cfg, &refs, "t", 0, FusionConfig::default()).unwrap();
        let d = cfg.hidden_dim;
        // V = I exactly: zero penalty
        psi.layers[0].v.data.copy_from_slice(&Tensor::eye("", d).data);
        {
            let mut tape = Tape::new();
            let bound = bind_fusion(&mut tape, &psi).unwrap();
            let reg = fusion_regularizer(&mut tape, &psi, &bound.layer_vars(), 0.01).unwrap();
            assert_eq!(tape.scalar(reg).unwrap(), 0.0);
        }
        // V = I + E with |E|_F = 2, lambda 0.01: penalty 0.04
        {
            let mut v = Tensor::eye("", d).data;
            v[1] += 2.0; // single off-diagonal entry of 2 has Frobenius norm 2
            psi.layers[0].v.data.copy_from_slice(&v);
            let mut tape = Tape::new();
            let bound = bind_fusion(&mut tape, &psi).unwrap();
            let reg = fusion_regularizer(&mut tape, &psi, &bound.layer_vars(), 0.01).unwrap();
            assert!((tape.scalar(reg).unwrap() - 0.04).abs() < 1e-12);
        }
    }

    #[test]
    fn regularizer_gradient_is_2_lambda_v_minus_i() {
        let mut small = BackboneConfig::toy();
        small.hidden_dim = 8;
        small.num_heads = 2;
        small.num_layers = 1;
        let members: Vec<AdapterParams> =
            vec![make_adapter(&small, &AdapterConfig::pfeiffer(2), "a", 1).unwrap()];
        let refs: Vec<&AdapterParams> = members.iter().collect();
        let mut psi = fusion_init(&small, &refs, "a", 2, FusionConfig::default()).unwrap();
        let mut rng = SplitRng::new(4);
        rng.fill_normal(&mut psi.layers[0].v.data, 0.5);

        let lambda = 0.01;
        let v_tensor = psi.layers[0].v.clone();
        let d = small.hidden_dim;
        let report = grad_check(
            &mut [v_tensor.clone()],
            |tape, ps| {
                let v = tape.param(&ps[0])?;
                let eye = tape.constant(d, d, Tensor::eye("", d).data)?;
                let dev = tape.sub(v, eye)?;
                let sq = tape.mul(dev, dev)?;
                let sum = tape.sum_all(sq)?;
                tape.scale(sum, lambda)
            },
            1e-6,
            1e-6,
        )
        .unwrap();
        assert!(report.pass(), "{}", report.render());

        // and the analytic gradient is 2 lambda (V - I)
        let mut tape = Tape::new();
        let v = tape.param(&v_tensor).unwrap();
        let eye = tape.constant(d, d, Tensor::eye("", d).data).unwrap();
        let dev = tape.sub(v, eye).unwrap();
        let sq = tape.mul(dev, dev).unwrap();
        let sum = tape.sum_all(sq).unwrap();
        let loss = tape.scale(sum, lambda).unwrap();
        let grads = tape.backward(loss).unwrap();
        let g = grads.get(&v_tensor.name).unwrap();
        for r in 0..d {
            for c in 0..d {
                let expect =
                    2.0 * lambda * (v_tensor.data[r * d + c] - if r == c { 1.0 } else { 0.0 });
                assert!((g[r * d + c] - expect).abs() < 1e-12);
            }
        }
    }
}
