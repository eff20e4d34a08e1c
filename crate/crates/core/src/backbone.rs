//! Miniature transformer encoder: token + learned position embeddings,
//! post-norm multi-head attention and feed-forward sub-layers, masked-token
//! pretraining, and the tap points where adapter or fusion hooks attach.
//!
//! Each layer computes
//!
//! ```text
//! r_bottom = x + Attention(x)          -- bottom tap value
//! x        = tap(bottom, r_bottom)     -- default: LayerNorm(r_bottom)
//! r_top    = x + FFN(x)                -- top tap value
//! x        = tap(top, r_top)           -- default: LayerNorm(r_top)
//! ```
//!
//! A hook takes over the norm step of its tap: it receives the pre-norm
//! residual sum together with the layer's pretrained norm parameters and
//! produces the sub-layer output. With no hooks (or identity hooks) the
//! computation is exactly the plain post-norm encoder, so every placement
//! combination is expressible through hooks alone.

use serde::{Deserialize, Serialize};

use crate::adapters::{adapter_apply, bind_adapter, AdapterParams, BoundAdapter};
use crate::error::{Error, Result};
use crate::fusion::{bind_fusion, fusion_forward, BoundFusion, BoundFusionLayer, FusionParams};
use crate::optim::{schedule_lr, OptimizerState, Schedule};
use crate::rng::SplitRng;
use crate::tape::{Activation, Tape, Var};
use crate::tensor::{ParamGroup, Tensor};

pub const PAD_TOKEN: u32 = 0;
pub const MASK_TOKEN: u32 = 1;
pub const CLS_TOKEN: u32 = 2;
pub const NUM_RESERVED_TOKENS: u32 = 3;

/// Additive attention-mask value for padded key positions. exp of a shifted
/// score this low underflows to exactly 0.0, so padded positions get weight
/// zero and extra padding cannot leak into real positions.
const MASKED_SCORE: f64 = -1e30;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    #[serde(default)]
    pub dropout_rate: f64,
    #[serde(default = "default_ffn_activation")]
    pub ffn_activation: Activation,
    #[serde(default)]
    pub pooling: Pooling,
}

fn default_ffn_activation() -> Activation {
    Activation::Gelu
}

/// How per-position states become the classification representation: the
/// leading class-marker position's state (default) or a pad-masked mean
/// over content positions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    #[default]
    FirstToken,
    Mean,
}

impl BackboneConfig {
    /// Seconds-scale defaults: deep enough for layer-wise analysis, small
    /// enough that full pipelines run in seconds.
    pub fn toy() -> BackboneConfig {
        BackboneConfig {
            vocab_size: 64,
            max_seq_len: 32,
            hidden_dim: 64,
            num_layers: 4,
            num_heads: 4,
            ffn_dim: 128,
            dropout_rate: 0.0,
            ffn_activation: Activation::Gelu,
            pooling: Pooling::FirstToken,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 || self.num_layers == 0 || self.num_heads == 0 || self.ffn_dim == 0 {
            return Err(Error::Config("backbone dimensions must be positive".into()));
        }
        if self.hidden_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "hidden_dim {} not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            )));
        }
        if self.max_seq_len < 1 {
            return Err(Error::Config("max_seq_len must be at least 1".into()));
        }
        if self.vocab_size <= NUM_RESERVED_TOKENS as usize {
            return Err(Error::Config(format!(
                "vocab_size {} leaves no room after the {} reserved tokens",
                self.vocab_size, NUM_RESERVED_TOKENS
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!("dropout_rate {} not in [0, 1)", self.dropout_rate)));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }

    /// Stable hash of the structural dimensions; adapter and fusion
    /// checkpoints must match it to load.
    pub fn fingerprint(&self) -> String {
        let repr = format!(
            "v{}:t{}:d{}:l{}:h{}:f{}",
            self.vocab_size, self.max_seq_len, self.hidden_dim, self.num_layers, self.num_heads,
            self.ffn_dim
        );
        format!("{:016x}", crate::rng::fnv1a64(repr.as_bytes()))
    }
}

#[derive(Debug, Clone)]
pub struct LayerParams {
    pub attn_wq: Tensor,
    pub attn_wk: Tensor,
    pub attn_wv: Tensor,
    pub attn_wo: Tensor,
    pub attn_ln_gain: Tensor,
    pub attn_ln_bias: Tensor,
    pub ffn_w1: Tensor,
    pub ffn_b1: Tensor,
    pub ffn_w2: Tensor,
    pub ffn_b2: Tensor,
    pub ffn_ln_gain: Tensor,
    pub ffn_ln_bias: Tensor,
}

/// The complete encoder parameter set. Tensor names follow
/// `backbone.emb.{tok,pos}` then per layer
/// `backbone.layer{i}.{attn.{wq,wk,wv,wo}, attn_ln.{gain,bias},
/// ffn.{w1,b1,w2,b2}, ffn_ln.{gain,bias}}`; `visit` enumerates them in
/// exactly that order, which is also the checkpoint order.
#[derive(Debug, Clone)]
pub struct BackboneParams {
    pub config: BackboneConfig,
    pub tok_emb: Tensor,
    pub pos_emb: Tensor,
    pub layers: Vec<LayerParams>,
    /// false until produced by `pretrain_mlm`; training on a random backbone
    /// is allowed but tagged with a warning in the run record.
    pub pretrained: bool,
}

impl BackboneParams {
    /// Fresh initialization: embeddings and projections N(0, 0.02), biases
    /// zero, norm gains one.
    pub fn init(config: &BackboneConfig, rng: &mut SplitRng) -> Result<BackboneParams> {
        config.validate()?;
        let d = config.hidden_dim;
        let f = config.ffn_dim;
        let std = 0.02;
        let mut layers = Vec::with_capacity(config.num_layers);
        for i in 0..config.num_layers {
            let p = |suffix: &str| format!("backbone.layer{i}.{suffix}");
            layers.push(LayerParams {
                attn_wq: Tensor::normal(p("attn.wq"), &[d, d], std, rng),
                attn_wk: Tensor::normal(p("attn.wk"), &[d, d], std, rng),
                attn_wv: Tensor::normal(p("attn.wv"), &[d, d], std, rng),
                attn_wo: Tensor::normal(p("attn.wo"), &[d, d], std, rng),
                attn_ln_gain: Tensor::full(p("attn_ln.gain"), &[1, d], 1.0),
                attn_ln_bias: Tensor::zeros(p("attn_ln.bias"), &[1, d]),
                ffn_w1: Tensor::normal(p("ffn.w1"), &[d, f], std, rng),
                ffn_b1: Tensor::zeros(p("ffn.b1"), &[1, f]),
                ffn_w2: Tensor::normal(p("ffn.w2"), &[f, d], std, rng),
                ffn_b2: Tensor::zeros(p("ffn.b2"), &[1, d]),
                ffn_ln_gain: Tensor::full(p("ffn_ln.gain"), &[1, d], 1.0),
                ffn_ln_bias: Tensor::zeros(p("ffn_ln.bias"), &[1, d]),
            });
        }
        Ok(BackboneParams {
            config: config.clone(),
            tok_emb: Tensor::normal("backbone.emb.tok", &[config.vocab_size, d], std, rng),
            pos_emb: Tensor::normal("backbone.emb.pos", &[config.max_seq_len, d], std, rng),
            layers,
            pretrained: false,
        })
    }

    pub fn fingerprint(&self) -> String {
        self.config.fingerprint()
    }
}

impl ParamGroup for BackboneParams {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Tensor)) {
        f(&self.tok_emb);
        f(&self.pos_emb);
        for l in &self.layers {
            f(&l.attn_wq);
            f(&l.attn_wk);
            f(&l.attn_wv);
            f(&l.attn_wo);
            f(&l.attn_ln_gain);
            f(&l.attn_ln_bias);
            f(&l.ffn_w1);
            f(&l.ffn_b1);
            f(&l.ffn_w2);
            f(&l.ffn_b2);
            f(&l.ffn_ln_gain);
            f(&l.ffn_ln_bias);
        }
    }

    fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut Tensor)) {
        f(&mut self.tok_emb);
        f(&mut self.pos_emb);
        for l in &mut self.layers {
            f(&mut l.attn_wq);
            f(&mut l.attn_wk);
            f(&mut l.attn_wv);
            f(&mut l.attn_wo);
            f(&mut l.attn_ln_gain);
            f(&mut l.attn_ln_bias);
            f(&mut l.ffn_w1);
            f(&mut l.ffn_b1);
            f(&mut l.ffn_w2);
            f(&mut l.ffn_b2);
            f(&mut l.ffn_ln_gain);
            f(&mut l.ffn_ln_bias);
        }
    }
}

/// Padded token matrix, row-major `batch x seq`.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenBatch {
    pub ids: Vec<u32>,
    pub batch: usize,
    pub seq: usize,
}

impl TokenBatch {
    pub fn from_rows(rows: &[Vec<u32>]) -> Result<TokenBatch> {
        if rows.is_empty() {
            return Err(Error::Data("empty token batch".into()));
        }
        let seq = rows.iter().map(|r| r.len()).max().unwrap();
        if seq == 0 {
            return Err(Error::Data("zero-length sequences in batch".into()));
        }
        let mut ids = vec![PAD_TOKEN; rows.len() * seq];
        for (i, row) in rows.iter().enumerate() {
            ids[i * seq..i * seq + row.len()].copy_from_slice(row);
        }
        Ok(TokenBatch { ids, batch: rows.len(), seq })
    }

    pub fn get(&self, b: usize, t: usize) -> u32 {
        self.ids[b * self.seq + t]
    }

    pub fn is_pad(&self, b: usize, t: usize) -> bool {
        self.get(b, t) == PAD_TOKEN
    }
}

/// Where a hook attaches within a layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TapSite {
    /// after multi-head attention
    Bottom,
    /// after the feed-forward sub-layer
    Top,
}

/// Transforms applied at the layer taps.
pub enum HookPlan<'a> {
    /// plain encoder
    None,
    /// exercises the tap plumbing; bit-identical to `None`
    Identity,
    /// one task's adapter at the placements its config names
    Adapter(&'a AdapterParams),
    /// N member adapters mixed by a fusion layer at the members' placements
    Fusion { members: Vec<&'a AdapterParams>, psi: &'a FusionParams },
}

/// Encoder results: final states, the per-layer tap values (the pre-norm
/// residual sums), and per-position fusion weights when fusion is hooked in.
pub struct EncoderOut {
    /// final hidden states, `(batch * seq) x hidden_dim`
    pub hidden: Var,
    /// bound token embedding table; used for tied-output prediction
    pub tok_table: Var,
    /// `(layer, site, value)` for every layer; values are `(batch*seq) x d`
    pub taps: Vec<(usize, TapSite, Var)>,
    /// `(layer, site, weights)`; weights are `(batch*seq) x N`
    pub fusion_weights: Vec<(usize, TapSite, Var)>,
    /// bound fusion matrices per layer when fusion hooks are installed
    /// (lets the caller add the value regularizer on the same tape)
    pub fusion_vars: Vec<BoundFusionLayer>,
}

enum BoundHooks<'a> {
    None,
    Identity,
    Adapter {
        phi: &'a AdapterParams,
        bound: BoundAdapter,
    },
    Fusion {
        members: Vec<(&'a AdapterParams, BoundAdapter)>,
        psi: &'a FusionParams,
        bound: BoundFusion,
    },
}

fn bind_hooks<'a>(
    tape: &mut Tape,
    plan: &'a HookPlan<'a>,
    config: &BackboneConfig,
) -> Result<BoundHooks<'a>> {
    let check_dims = |phi: &AdapterParams| -> Result<()> {
        if phi.hidden_dim != config.hidden_dim || phi.num_layers != config.num_layers {
            return Err(Error::Config(format!(
                "adapter {} built for d={} L={}, backbone has d={} L={}",
                phi.task, phi.hidden_dim, phi.num_layers, config.hidden_dim, config.num_layers
            )));
        }
        Ok(())
    };
    match plan {
        HookPlan::None => Ok(BoundHooks::None),
        HookPlan::Identity => Ok(BoundHooks::Identity),
        HookPlan::Adapter(phi) => {
            check_dims(phi)?;
            Ok(BoundHooks::Adapter { phi, bound: bind_adapter(tape, phi)? })
        }
        HookPlan::Fusion { members, psi } => {
            if members.is_empty() {
                return Err(Error::Usage("fusion hook with zero member adapters".into()));
            }
            if members.len() != psi.members.len()
                || members.iter().zip(&psi.members).any(|(m, name)| m.task != *name)
            {
                return Err(Error::Compat(format!(
                    "fusion member order {:?} does not match the provided adapters",
                    psi.members
                )));
            }
            let placement = members[0].config.placement_set();
            for m in members {
                check_dims(m)?;
                if m.config.placement_set() != placement {
                    return Err(Error::Compat(format!(
                        "fusion members disagree on placement: {} differs",
                        m.task
                    )));
                }
            }
            if psi.hidden_dim != config.hidden_dim || psi.num_layers != config.num_layers {
                return Err(Error::Config(format!(
                    "fusion layer built for d={} L={}, backbone has d={} L={}",
                    psi.hidden_dim, psi.num_layers, config.hidden_dim, config.num_layers
                )));
            }
            let mut bound_members = Vec::with_capacity(members.len());
            for m in members.iter() {
                bound_members.push((*m, bind_adapter(tape, m)?));
            }
            Ok(BoundHooks::Fusion { members: bound_members, psi, bound: bind_fusion(tape, psi)? })
        }
    }
}

struct BoundLayer {
    wq: Var,
    wk: Var,
    wv: Var,
    wo: Var,
    attn_ln: (Var, Var),
    w1: Var,
    b1: Var,
    w2: Var,
    b2: Var,
    ffn_ln: (Var, Var),
}

/// Run the encoder over a token batch, applying `hooks` at the taps.
///
/// Padded key positions are masked out of attention, so extra padding never
/// changes the hidden states of real positions. Dropout (when configured and
/// an rng is supplied) is applied to both sub-layer outputs before their
/// residual adds; pass `None` for evaluation.
pub fn encoder_forward(
    tape: &mut Tape,
    params: &BackboneParams,
    batch: &TokenBatch,
    hooks: &HookPlan<'_>,
    mut dropout_rng: Option<&mut SplitRng>,
) -> Result<EncoderOut> {
    let cfg = &params.config;
    if batch.seq > cfg.max_seq_len {
        return Err(Error::Data(format!(
            "sequence length {} exceeds max_seq_len {}",
            batch.seq, cfg.max_seq_len
        )));
    }
    if let Some(bad) = batch.ids.iter().find(|id| **id as usize >= cfg.vocab_size) {
        return Err(Error::Data(format!("token id {bad} out of vocabulary {}", cfg.vocab_size)));
    }

    let bound_hooks = bind_hooks(tape, hooks, cfg)?;

    let tok = tape.param(&params.tok_emb)?;
    let pos = tape.param(&params.pos_emb)?;
    let mut layers = Vec::with_capacity(params.layers.len());
    for l in &params.layers {
        layers.push(BoundLayer {
            wq: tape.param(&l.attn_wq)?,
            wk: tape.param(&l.attn_wk)?,
            wv: tape.param(&l.attn_wv)?,
            wo: tape.param(&l.attn_wo)?,
            attn_ln: (tape.param(&l.attn_ln_gain)?, tape.param(&l.attn_ln_bias)?),
            w1: tape.param(&l.ffn_w1)?,
            b1: tape.param(&l.ffn_b1)?,
            w2: tape.param(&l.ffn_w2)?,
            b2: tape.param(&l.ffn_b2)?,
            ffn_ln: (tape.param(&l.ffn_ln_gain)?, tape.param(&l.ffn_ln_bias)?),
        });
    }

    // embeddings
    let tok_rows: Vec<usize> = batch.ids.iter().map(|id| *id as usize).collect();
    let pos_rows: Vec<usize> = (0..batch.batch).flat_map(|_| 0..batch.seq).collect();
    let te = tape.gather_rows(tok, &tok_rows)?;
    let pe = tape.gather_rows(pos, &pos_rows)?;
    let mut x = tape.add(te, pe)?;

    // per-sequence attention masks; None when a sequence has no padding
    let masks: Vec<Option<Vec<f64>>> = (0..batch.batch)
        .map(|b| {
            let padded: Vec<usize> = (0..batch.seq).filter(|t| batch.is_pad(b, *t)).collect();
            if padded.is_empty() {
                None
            } else {
                let mut m = vec![0.0; batch.seq * batch.seq];
                for q in 0..batch.seq {
                    for &k in &padded {
                        m[q * batch.seq + k] = MASKED_SCORE;
                    }
                }
                Some(m)
            }
        })
        .collect();

    let mut taps = Vec::new();
    let mut fusion_weights = Vec::new();
    let fusion_vars = match &bound_hooks {
        BoundHooks::Fusion { bound, .. } => bound.layer_vars(),
        _ => Vec::new(),
    };
    let last_layer = params.layers.len() - 1;

    for (li, layer) in layers.iter().enumerate() {
        let attn_out = mha_forward(tape, cfg, layer, x, batch, &masks)?;
        let attn_out = maybe_dropout(tape, attn_out, cfg.dropout_rate, &mut dropout_rng)?;
        let r_bottom = tape.add(x, attn_out)?;
        taps.push((li, TapSite::Bottom, r_bottom));
        x = apply_tap(
            tape,
            &bound_hooks,
            li,
            last_layer,
            TapSite::Bottom,
            r_bottom,
            layer.attn_ln,
            &mut fusion_weights,
        )?;

        let ffn_out = ffn_forward(tape, cfg, layer, x)?;
        let ffn_out = maybe_dropout(tape, ffn_out, cfg.dropout_rate, &mut dropout_rng)?;
        let r_top = tape.add(x, ffn_out)?;
        taps.push((li, TapSite::Top, r_top));
        x = apply_tap(
            tape,
            &bound_hooks,
            li,
            last_layer,
            TapSite::Top,
            r_top,
            layer.ffn_ln,
            &mut fusion_weights,
        )?;
    }

    Ok(EncoderOut { hidden: x, tok_table: tok, taps, fusion_weights, fusion_vars })
}

fn maybe_dropout(
    tape: &mut Tape,
    x: Var,
    rate: f64,
    rng: &mut Option<&mut SplitRng>,
) -> Result<Var> {
    if rate == 0.0 {
        return Ok(x);
    }
    let rng = match rng {
        Some(r) => r,
        None => return Ok(x), // evaluation mode
    };
    let (m, n) = tape.shape(x);
    let keep = 1.0 - rate;
    let mask: Vec<f64> =
        (0..m * n).map(|_| if rng.next_f64() < keep { 1.0 / keep } else { 0.0 }).collect();
    let mask = tape.constant(m, n, mask)?;
    tape.mul(x, mask)
}

/// Scaled dot-product multi-head self-attention, output projected. Returns
/// the sub-layer output before the residual add. The query/key/value and
/// output projections run over the whole batch at once; only the attention
/// itself is per sequence.
fn mha_forward(
    tape: &mut Tape,
    cfg: &BackboneConfig,
    layer: &BoundLayer,
    x: Var,
    batch: &TokenBatch,
    masks: &[Option<Vec<f64>>],
) -> Result<Var> {
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let t = batch.seq;
    let q_all = tape.matmul(x, layer.wq)?;
    let k_all = tape.matmul(x, layer.wk)?;
    let v_all = tape.matmul(x, layer.wv)?;
    let mut per_seq = Vec::with_capacity(batch.batch);
    for b in 0..batch.batch {
        let rows: Vec<usize> = (b * t..(b + 1) * t).collect();
        let q = tape.gather_rows(q_all, &rows)?;
        let k = tape.gather_rows(k_all, &rows)?;
        let v = tape.gather_rows(v_all, &rows)?;
        let mut heads = Vec::with_capacity(cfg.num_heads);
        for h in 0..cfg.num_heads {
            let qh = tape.slice_cols(q, h * dh, dh)?;
            let kh = tape.slice_cols(k, h * dh, dh)?;
            let vh = tape.slice_cols(v, h * dh, dh)?;
            let kt = tape.transpose(kh)?;
            let mut scores = tape.matmul(qh, kt)?;
            scores = tape.scale(scores, scale)?;
            if let Some(mask) = &masks[b] {
                let mask = tape.constant(t, t, mask.clone())?;
                scores = tape.add(scores, mask)?;
            }
            let attn = tape.softmax_rows(scores)?;
            heads.push(tape.matmul(attn, vh)?);
        }
        per_seq.push(tape.concat_cols(&heads)?);
    }
    let ctx = tape.concat_rows(&per_seq)?;
    tape.matmul(ctx, layer.wo)
}

fn ffn_forward(tape: &mut Tape, cfg: &BackboneConfig, layer: &BoundLayer, x: Var) -> Result<Var> {
    let h = tape.matmul(x, layer.w1)?;
    let h = tape.add_row_broadcast(h, layer.b1)?;
    let a = tape.activation(h, cfg.ffn_activation)?;
    let out = tape.matmul(a, layer.w2)?;
    tape.add_row_broadcast(out, layer.b2)
}

#[allow(clippy::too_many_arguments)]
fn apply_tap(
    tape: &mut Tape,
    hooks: &BoundHooks<'_>,
    layer: usize,
    last_layer: usize,
    site: TapSite,
    r: Var,
    ln: (Var, Var),
    fusion_weights: &mut Vec<(usize, TapSite, Var)>,
) -> Result<Var> {
    match hooks {
        BoundHooks::None | BoundHooks::Identity => tape.layer_norm(r, ln.0, ln.1),
        BoundHooks::Adapter { phi, bound } => {
            if !phi.config.has_placement(site) {
                return tape.layer_norm(r, ln.0, ln.1);
            }
            let cfg = &phi.config;
            let h_in =
                if cfg.pretrained_ln.has_before() { tape.layer_norm(r, ln.0, ln.1)? } else { r };
            let a = adapter_apply(tape, cfg, bound.site(layer, site)?, h_in)?;
            if cfg.pretrained_ln.has_after() {
                tape.layer_norm(a, ln.0, ln.1)
            } else {
                Ok(a)
            }
        }
        BoundHooks::Fusion { members, psi, bound } => {
            let shared_cfg = &members[0].0.config;
            if !shared_cfg.has_placement(site) || (psi.config.drop_last_layer && layer == last_layer)
            {
                return tape.layer_norm(r, ln.0, ln.1);
            }
            // all members share the placement config, so the before/after
            // norm wiring follows the shared member config
            let h_in = if shared_cfg.pretrained_ln.has_before() {
                tape.layer_norm(r, ln.0, ln.1)?
            } else {
                r
            };
            let mut zs = Vec::with_capacity(members.len());
            for (phi, bound_phi) in members {
                zs.push(adapter_apply(tape, &phi.config, bound_phi.site(layer, site)?, h_in)?);
            }
            // the query comes from the sub-layer output before the norm
            let (o, s) = fusion_forward(tape, bound.layer(layer)?, r, &zs)?;
            fusion_weights.push((layer, site, s));
            if shared_cfg.pretrained_ln.has_after() {
                tape.layer_norm(o, ln.0, ln.1)
            } else {
                Ok(o)
            }
        }
    }
}

// ---- checkpointing -----------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct BackboneHeaderConfig {
    backbone: BackboneConfig,
    pretrained: bool,
}

pub fn save_backbone(
    params: &BackboneParams,
    metadata: serde_json::Value,
    path: &std::path::Path,
) -> Result<()> {
    let header =
        BackboneHeaderConfig { backbone: params.config.clone(), pretrained: params.pretrained };
    crate::checkpoint::write_container(
        path,
        serde_json::to_value(&header)?,
        &params.fingerprint(),
        metadata,
        &params.tensors(),
    )
}

pub fn load_backbone(path: &std::path::Path) -> Result<BackboneParams> {
    let container = crate::checkpoint::read_container(path)?;
    let header: BackboneHeaderConfig = serde_json::from_value(container.config.clone())?;
    if container.fingerprint != header.backbone.fingerprint() {
        return Err(Error::Compat(
            "backbone checkpoint fingerprint does not match its own config".into(),
        ));
    }
    let mut params = BackboneParams::init(&header.backbone, &mut SplitRng::new(0))?;
    let mut by_name: std::collections::HashMap<String, Tensor> =
        container.tensors.into_iter().map(|t| (t.name.clone(), t)).collect();
    let mut missing = Vec::new();
    let mut shape_err = None;
    params.visit_mut(&mut |t| match by_name.remove(&t.name) {
        Some(loaded) => {
            if loaded.shape != t.shape {
                shape_err = Some(format!(
                    "tensor {} has shape {:?}, expected {:?}",
                    t.name, loaded.shape, t.shape
                ));
            } else {
                t.data = loaded.data;
            }
        }
        None => missing.push(t.name.clone()),
    });
    if let Some(msg) = shape_err {
        return Err(Error::Format(msg));
    }
    if !missing.is_empty() {
        return Err(Error::Format(format!("checkpoint is missing tensors: {missing:?}")));
    }
    if !by_name.is_empty() {
        let extra: Vec<String> = by_name.keys().cloned().collect();
        return Err(Error::Format(format!("checkpoint has unexpected tensors: {extra:?}")));
    }
    params.pretrained = header.pretrained;
    Ok(params)
}

// ---- masked-token pretraining ----------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlmTrainConfig {
    /// optimizer steps; 0 returns the initialization unchanged
    pub steps: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    /// fraction of content positions replaced by the mask token
    pub mask_rate: f64,
    pub seed: u64,
    #[serde(default = "default_schedule")]
    pub schedule: Schedule,
    #[serde(default)]
    pub weight_decay: f64,
}

fn default_schedule() -> Schedule {
    Schedule::LinearDecay
}

impl Default for MlmTrainConfig {
    fn default() -> Self {
        MlmTrainConfig {
            steps: 800,
            batch_size: 16,
            base_lr: 5e-3,
            mask_rate: 0.15,
            seed: 0,
            schedule: Schedule::Constant,
            weight_decay: 0.0,
        }
    }
}

/// Pick maskable positions (content tokens: not pad, not the leading class
/// marker) and decide which get masked. At least one position is masked
/// whenever any candidate exists.
fn choose_masked(batch: &TokenBatch, mask_rate: f64, rng: &mut SplitRng) -> Vec<usize> {
    let mut masked = Vec::new();
    let mut candidates = Vec::new();
    for b in 0..batch.batch {
        for t in 0..batch.seq {
            let id = batch.get(b, t);
            if id == PAD_TOKEN || (t == 0 && id == CLS_TOKEN) {
                continue;
            }
            let flat = b * batch.seq + t;
            candidates.push(flat);
            if rng.next_f64() < mask_rate {
                masked.push(flat);
            }
        }
    }
    if masked.is_empty() && !candidates.is_empty() {
        masked.push(candidates[rng.below(candidates.len())]);
    }
    masked
}

fn mlm_logits(
    tape: &mut Tape,
    out: &EncoderOut,
    masked: &[usize],
) -> Result<Var> {
    let picked = tape.gather_rows(out.hidden, masked)?;
    // tied output embedding: predict through the transposed token table
    let emb_t = tape.transpose(out.tok_table)?;
    tape.matmul(picked, emb_t)
}

/// Masked-token pretraining: minimizes cross-entropy of the original token
/// at masked positions. Returns the trained parameters and the final step's
/// loss.
pub fn pretrain_mlm(
    config: &BackboneConfig,
    corpus: &[Vec<u32>],
    train: &MlmTrainConfig,
) -> Result<(BackboneParams, f64)> {
    if corpus.is_empty() {
        return Err(Error::Data("empty pretraining corpus".into()));
    }
    let root = SplitRng::new(train.seed);
    let mut params = BackboneParams::init(config, &mut root.substream("backbone"))?;
    let mut batch_rng = root.substream("mlm.batches");
    let mut opt = OptimizerState::new(train.base_lr, train.weight_decay);
    let mut final_loss = f64::NAN;

    for step in 0..train.steps {
        let rows: Vec<Vec<u32>> = (0..train.batch_size)
            .map(|_| corpus[batch_rng.below(corpus.len())].clone())
            .collect();
        let batch = TokenBatch::from_rows(&rows)?;
        let masked = choose_masked(&batch, train.mask_rate, &mut batch_rng);
        if masked.is_empty() {
            continue;
        }
        let labels: Vec<usize> = masked.iter().map(|&p| batch.ids[p] as usize).collect();
        let mut masked_batch = batch;
        for &p in &masked {
            masked_batch.ids[p] = MASK_TOKEN;
        }

        let mut tape = Tape::new();
        let out = encoder_forward(&mut tape, &params, &masked_batch, &HookPlan::None, None)?;
        let logits = mlm_logits(&mut tape, &out, &masked)?;
        let loss = tape.cross_entropy(logits, &labels)?;
        final_loss = tape.scalar(loss)?;
        let grads = tape.backward(loss)?;
        grads.accumulate_into(&mut params)?;
        let lr = schedule_lr(train.schedule, step as u64, train.steps as u64, train.base_lr)?;
        let mut tensors = params.tensors_mut();
        opt.step(&mut tensors, lr)?;
        params.visit_mut(&mut |t| t.zero_grad());
    }

    params.pretrained = train.steps > 0;
    Ok((params, final_loss))
}

/// Argmax masked-token accuracy over `sequences`. Deterministic per seed.
pub fn masked_token_accuracy(
    params: &BackboneParams,
    sequences: &[Vec<u32>],
    mask_rate: f64,
    seed: u64,
) -> Result<f64> {
    if sequences.is_empty() {
        return Err(Error::Data("no sequences to evaluate".into()));
    }
    let mut rng = SplitRng::new(seed).substream("mlm.eval");
    let mut correct = 0usize;
    let mut total = 0usize;
    for chunk in sequences.chunks(32) {
        let batch = TokenBatch::from_rows(chunk)?;
        let masked = choose_masked(&batch, mask_rate, &mut rng);
        if masked.is_empty() {
            continue;
        }
        let labels: Vec<usize> = masked.iter().map(|&p| batch.ids[p] as usize).collect();
        let mut masked_batch = batch;
        for &p in &masked {
            masked_batch.ids[p] = MASK_TOKEN;
        }
        let mut tape = Tape::new();
        let out = encoder_forward(&mut tape, params, &masked_batch, &HookPlan::None, None)?;
        let logits = mlm_logits(&mut tape, &out, &masked)?;
        let v = tape.value(logits);
        let vocab = params.config.vocab_size;
        for (i, &label) in labels.iter().enumerate() {
            let row = &v[i * vocab..(i + 1) * vocab];
            let mut best = 0usize;
            for c in 1..vocab {
                if row[c] > row[best] {
                    best = c;
                }
            }
            if best == label {
                correct += 1;
            }
            total += 1;
        }
    }
    if total == 0 {
        return Err(Error::Data("no maskable positions in evaluation set".into()));
    }
    Ok(correct as f64 / total as f64)
}
