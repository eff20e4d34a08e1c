//! Bottleneck adapter modules: a down-projection, nonlinearity and
//! up-projection inserted at the encoder taps, with the full configuration
//! grid (placement, pretrained/new layer-norm positions, reduction factor,
//! nonlinearity), closed-form parameter accounting and checkpointing.

use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneConfig, TapSite};
use crate::checkpoint::{self, Container};
use crate::error::{Error, Result};
use crate::rng::SplitRng;
use crate::tape::{Activation, Tape, Var};
use crate::tensor::{ParamGroup, Tensor};

/// How the layer's pretrained norm wraps the adapter at its tap:
/// `Before` normalizes the adapter input, `After` re-applies the norm to the
/// adapter output (residual included), `BeforeAndAfter` does both, `None`
/// skips the pretrained norm entirely at hooked taps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PretrainedLn {
    None,
    Before,
    After,
    BeforeAndAfter,
}

impl PretrainedLn {
    pub fn has_before(&self) -> bool {
        matches!(self, PretrainedLn::Before | PretrainedLn::BeforeAndAfter)
    }

    pub fn has_after(&self) -> bool {
        matches!(self, PretrainedLn::After | PretrainedLn::BeforeAndAfter)
    }
}

/// Position of a freshly trained norm inside the adapter. All positions live
/// on the bottleneck branch, so a zero-initialized adapter stays an exact
/// identity. `Inside` sits between the nonlinearity and the up-projection
/// and therefore normalizes the bottleneck width.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NewLn {
    #[default]
    None,
    BeforeAdapter,
    AfterAdapter,
    Inside,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Pfeiffer,
    Houlsby,
    #[default]
    Custom,
}

/// `IdentityZero` starts the up-projection (and biases) at zero so a fresh
/// adapter with a residual is an exact identity; `FullRandom` initializes
/// both projections with small random values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InitStyle {
    #[default]
    IdentityZero,
    FullRandom,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterConfig {
    /// taps the adapter occupies; deduplicated set semantics
    pub placement: Vec<TapSite>,
    /// bottleneck width is hidden_dim / reduction_factor
    pub reduction_factor: usize,
    #[serde(default = "default_nonlinearity")]
    pub nonlinearity: Activation,
    #[serde(default = "default_true")]
    pub residual: bool,
    #[serde(default = "default_pretrained_ln")]
    pub pretrained_ln: PretrainedLn,
    #[serde(default)]
    pub new_ln: NewLn,
    #[serde(default)]
    pub preset: Preset,
    #[serde(default)]
    pub init_style: InitStyle,
}

fn default_nonlinearity() -> Activation {
    Activation::Relu
}

fn default_true() -> bool {
    true
}

fn default_pretrained_ln() -> PretrainedLn {
    PretrainedLn::BeforeAndAfter
}

impl AdapterConfig {
    /// Single adapter after the feed-forward sub-layer, pretrained norm
    /// before and after, no new norm.
    pub fn pfeiffer(reduction_factor: usize) -> AdapterConfig {
        AdapterConfig {
            placement: vec![TapSite::Top],
            reduction_factor,
            nonlinearity: Activation::Relu,
            residual: true,
            pretrained_ln: PretrainedLn::BeforeAndAfter,
            new_ln: NewLn::None,
            preset: Preset::Pfeiffer,
            init_style: InitStyle::IdentityZero,
        }
    }

    /// Adapters after both the attention and feed-forward sub-layers.
    pub fn houlsby(reduction_factor: usize) -> AdapterConfig {
        AdapterConfig {
            placement: vec![TapSite::Bottom, TapSite::Top],
            reduction_factor,
            nonlinearity: Activation::Relu,
            residual: true,
            pretrained_ln: PretrainedLn::BeforeAndAfter,
            new_ln: NewLn::None,
            preset: Preset::Houlsby,
            init_style: InitStyle::IdentityZero,
        }
    }

    /// Sorted, deduplicated placement set.
    pub fn placement_set(&self) -> Vec<TapSite> {
        let mut p = self.placement.clone();
        p.sort();
        p.dedup();
        p
    }

    pub fn has_placement(&self, site: TapSite) -> bool {
        self.placement.contains(&site)
    }

    pub fn validate(&self, backbone: &BackboneConfig) -> Result<()> {
        if self.placement.is_empty() {
            return Err(Error::Config("adapter placement set is empty".into()));
        }
        if self.reduction_factor == 0 || backbone.hidden_dim % self.reduction_factor != 0 {
            return Err(Error::Config(format!(
                "hidden_dim {} not divisible by reduction_factor {}",
                backbone.hidden_dim, self.reduction_factor
            )));
        }
        match self.preset {
            Preset::Pfeiffer => {
                let ok = self.placement_set() == vec![TapSite::Top]
                    && self.pretrained_ln == PretrainedLn::BeforeAndAfter
                    && self.new_ln == NewLn::None;
                if !ok {
                    return Err(Error::Config(
                        "preset pfeiffer requires placement=[top], pretrained_ln=before_and_after, new_ln=none"
                            .into(),
                    ));
                }
            }
            Preset::Houlsby => {
                if self.placement_set() != vec![TapSite::Bottom, TapSite::Top] {
                    return Err(Error::Config(
                        "preset houlsby requires placement=[bottom, top]".into(),
                    ));
                }
            }
            Preset::Custom => {}
        }
        Ok(())
    }

    pub fn bottleneck_dim(&self, backbone: &BackboneConfig) -> usize {
        backbone.hidden_dim / self.reduction_factor
    }
}

/// One adapter instance at one (layer, site).
#[derive(Debug, Clone)]
pub struct AdapterSite {
    pub layer: usize,
    pub site: TapSite,
    pub down_w: Tensor,
    pub down_b: Tensor,
    pub up_w: Tensor,
    pub up_b: Tensor,
    pub ln_gain: Option<Tensor>,
    pub ln_bias: Option<Tensor>,
}

/// A task's adapter stack: one bottleneck per layer per placement. Tensor
/// names follow `adapter.{task}.layer{l}.{bottom|top}.{down.w,down.b,up.w,up.b,ln.gain,ln.bias}`
/// in layer-major, bottom-before-top order; `visit` enumerates exactly that
/// order.
#[derive(Debug, Clone)]
pub struct AdapterParams {
    pub task: String,
    pub config: AdapterConfig,
    pub backbone_fingerprint: String,
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub sites: Vec<AdapterSite>,
}

impl ParamGroup for AdapterParams {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Tensor)) {
        for s in &self.sites {
            f(&s.down_w);
            f(&s.down_b);
            f(&s.up_w);
            f(&s.up_b);
            if let Some(g) = &s.ln_gain {
                f(g);
            }
            if let Some(b) = &s.ln_bias {
                f(b);
            }
        }
    }

    fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut Tensor)) {
        for s in &mut self.sites {
            f(&mut s.down_w);
            f(&mut s.down_b);
            f(&mut s.up_w);
            f(&mut s.up_b);
            if let Some(g) = &mut s.ln_gain {
                f(g);
            }
            if let Some(b) = &mut s.ln_bias {
                f(b);
            }
        }
    }
}

fn site_tag(site: TapSite) -> &'static str {
    match site {
        TapSite::Bottom => "bottom",
        TapSite::Top => "top",
    }
}

/// Create a task's adapter stack. Down-projections start at N(0, 0.01); with
/// the default `IdentityZero` style the up-projection and all biases start
/// at zero, making a residual adapter an exact identity map.
pub fn make_adapter(
    backbone: &BackboneConfig,
    config: &AdapterConfig,
    task: &str,
    seed: u64,
) -> Result<AdapterParams> {
    config.validate(backbone)?;
    let d = backbone.hidden_dim;
    let bn = config.bottleneck_dim(backbone);
    let mut rng = SplitRng::new(seed).substream("adapter");
    let mut sites = Vec::new();
    for layer in 0..backbone.num_layers {
        for site in config.placement_set() {
            let p = |suffix: &str| format!("adapter.{task}.layer{layer}.{}.{suffix}", site_tag(site));
            let up_w = match config.init_style {
                InitStyle::IdentityZero => Tensor::zeros(p("up.w"), &[bn, d]),
                InitStyle::FullRandom => Tensor::normal(p("up.w"), &[bn, d], 0.01, &mut rng),
            };
            let ln_dim = match config.new_ln {
                NewLn::None => None,
                NewLn::Inside => Some(bn),
                NewLn::BeforeAdapter | NewLn::AfterAdapter => Some(d),
            };
            sites.push(AdapterSite {
                layer,
                site,
                down_w: Tensor::normal(p("down.w"), &[d, bn], 0.01, &mut rng),
                down_b: Tensor::zeros(p("down.b"), &[1, bn]),
                up_w,
                up_b: Tensor::zeros(p("up.b"), &[1, d]),
                ln_gain: ln_dim.map(|n| Tensor::full(p("ln.gain"), &[1, n], 1.0)),
                ln_bias: ln_dim.map(|n| Tensor::zeros(p("ln.bias"), &[1, n])),
            });
        }
    }
    Ok(AdapterParams {
        task: task.to_string(),
        config: config.clone(),
        backbone_fingerprint: backbone.fingerprint(),
        hidden_dim: d,
        num_layers: backbone.num_layers,
        sites,
    })
}

/// Closed-form scalar parameter count for a configuration:
/// per layer per placement `d*bn + bn + bn*d + d` for the projections and
/// biases, plus two norm vectors when a new norm is configured (width `d`
/// for before/after, bottleneck width for inside).
pub fn param_count(config: &AdapterConfig, backbone: &BackboneConfig) -> usize {
    let d = backbone.hidden_dim;
    let bn = d / config.reduction_factor;
    let per_site = d * bn + bn + bn * d + d
        + match config.new_ln {
            NewLn::None => 0,
            NewLn::Inside => 2 * bn,
            NewLn::BeforeAdapter | NewLn::AfterAdapter => 2 * d,
        };
    per_site * backbone.num_layers * config.placement_set().len()
}

/// Tape bindings for one adapter stack.
pub struct BoundAdapter {
    sites: Vec<(usize, TapSite, BoundAdapterSite)>,
}

pub struct BoundAdapterSite {
    down_w: Var,
    down_b: Var,
    up_w: Var,
    up_b: Var,
    ln: Option<(Var, Var)>,
}

impl BoundAdapter {
    pub fn site(&self, layer: usize, site: TapSite) -> Result<&BoundAdapterSite> {
        self.sites
            .iter()
            .find(|(l, s, _)| *l == layer && *s == site)
            .map(|(_, _, b)| b)
            .ok_or_else(|| Error::Usage(format!("adapter has no site at layer {layer} {site:?}")))
    }
}

pub fn bind_adapter(tape: &mut Tape, phi: &AdapterParams) -> Result<BoundAdapter> {
    let mut sites = Vec::with_capacity(phi.sites.len());
    for s in &phi.sites {
        let ln = match (&s.ln_gain, &s.ln_bias) {
            (Some(g), Some(b)) => Some((tape.param(g)?, tape.param(b)?)),
            _ => None,
        };
        sites.push((
            s.layer,
            s.site,
            BoundAdapterSite {
                down_w: tape.param(&s.down_w)?,
                down_b: tape.param(&s.down_b)?,
                up_w: tape.param(&s.up_w)?,
                up_b: tape.param(&s.up_b)?,
                ln,
            },
        ));
    }
    Ok(BoundAdapter { sites })
}

/// The bottleneck transform at one tap:
/// optional new-norm(before) -> down -> nonlinearity -> optional
/// new-norm(inside) -> up -> optional new-norm(after) -> residual add.
pub fn adapter_forward(
    tape: &mut Tape,
    config: &AdapterConfig,
    bound: &BoundAdapterSite,
    x: Var,
) -> Result<Var> {
    let mut branch = x;
    if config.new_ln == NewLn::BeforeAdapter {
        let (g, b) = bound.ln.ok_or_else(|| Error::Usage("new_ln tensors missing".into()))?;
        branch = tape.layer_norm(branch, g, b)?;
    }
    branch = tape.matmul(branch, bound.down_w)?;
    branch = tape.add_row_broadcast(branch, bound.down_b)?;
    branch = tape.activation(branch, config.nonlinearity)?;
    if config.new_ln == NewLn::Inside {
        let (g, b) = bound.ln.ok_or_else(|| Error::Usage("new_ln tensors missing".into()))?;
        branch = tape.layer_norm(branch, g, b)?;
    }
    branch = tape.matmul(branch, bound.up_w)?;
    branch = tape.add_row_broadcast(branch, bound.up_b)?;
    if config.new_ln == NewLn::AfterAdapter {
        let (g, b) = bound.ln.ok_or_else(|| Error::Usage("new_ln tensors missing".into()))?;
        branch = tape.layer_norm(branch, g, b)?;
    }
    if config.residual {
        tape.add(x, branch)
    } else {
        Ok(branch)
    }
}

/// Alias used by the encoder taps.
pub(crate) fn adapter_apply(
    tape: &mut Tape,
    config: &AdapterConfig,
    bound: &BoundAdapterSite,
    x: Var,
) -> Result<Var> {
    adapter_forward(tape, config, bound, x)
}

// ---- checkpointing ----------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct AdapterHeaderConfig {
    task: String,
    adapter: AdapterConfig,
    hidden_dim: usize,
    num_layers: usize,
}

/// Write an adapter checkpoint in the shared tensor-container format.
pub fn serialize_adapter(
    phi: &AdapterParams,
    metadata: serde_json::Value,
    path: &std::path::Path,
) -> Result<()> {
    let header = AdapterHeaderConfig {
        task: phi.task.clone(),
        adapter: phi.config.clone(),
        hidden_dim: phi.hidden_dim,
        num_layers: phi.num_layers,
    };
    checkpoint::write_container(
        path,
        serde_json::to_value(&header)?,
        &phi.backbone_fingerprint,
        metadata,
        &phi.tensors(),
    )
}

/// Load an adapter checkpoint, validating the container format and the
/// backbone fingerprint before reconstructing the parameter stack.
pub fn deserialize_adapter(path: &std::path::Path, backbone: &BackboneConfig) -> Result<AdapterParams> {
    let container = checkpoint::read_container(path)?;
    adapter_from_container(container, backbone)
}

pub fn adapter_from_container(
    container: Container,
    backbone: &BackboneConfig,
) -> Result<AdapterParams> {
    if container.fingerprint != backbone.fingerprint() {
        return Err(Error::Compat(format!(
            "adapter checkpoint fingerprint {} does not match backbone {}",
            container.fingerprint,
            backbone.fingerprint()
        )));
    }
    let header: AdapterHeaderConfig = serde_json::from_value(container.config.clone())?;
    // rebuild an empty stack with the right structure, then fill by name
    let mut phi = make_adapter(backbone, &header.adapter, &header.task, 0)?;
    let mut tensors: std::collections::HashMap<String, Tensor> =
        container.tensors.into_iter().map(|t| (t.name.clone(), t)).collect();
    let mut missing = Vec::new();
    let mut shape_err = None;
    phi.visit_mut(&mut |t| {
        match tensors.remove(&t.name) {
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
        }
    });
    if let Some(msg) = shape_err {
        return Err(Error::Format(msg));
    }
    if !missing.is_empty() {
        return Err(Error::Format(format!("checkpoint is missing tensors: {missing:?}")));
    }
    if !tensors.is_empty() {
        let extra: Vec<String> = tensors.keys().cloned().collect();
        return Err(Error::Format(format!("checkpoint has unexpected tensors: {extra:?}")));
    }
    Ok(phi)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bottleneck_dims() {
        let mut big = BackboneConfig::toy();
        big.hidden_dim = 768;
        big.num_heads = 12;
        assert_eq!(AdapterConfig::pfeiffer(64).bottleneck_dim(&big), 12);
        assert_eq!(AdapterConfig::pfeiffer(16).bottleneck_dim(&BackboneConfig::toy()), 4);
    }

    #[test]
    fn indivisible_reduction_factor_rejected() {
        let cfg = BackboneConfig::toy(); // d = 64
        let adapter = AdapterConfig::pfeiffer(24);
        assert!(matches!(adapter.validate(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn preset_consistency_enforced() {
        let cfg = BackboneConfig::toy();
        let mut bad = AdapterConfig::pfeiffer(16);
        bad.placement = vec![TapSite::Bottom];
        assert!(bad.validate(&cfg).is_err());
        let mut bad2 = AdapterConfig::houlsby(16);
        bad2.placement = vec![TapSite::Top];
        assert!(bad2.validate(&cfg).is_err());
    }

    #[test]
    fn param_count_examples() {
        let mut cfg = BackboneConfig::toy();
        cfg.num_layers = 1;
        // d=64, r=16: 64*4 + 4 + 4*64 + 64 = 580
        assert_eq!(param_count(&AdapterConfig::pfeiffer(16), &cfg), 580);
        // r=d: bottleneck 1: 64 + 1 + 64 + 64 = 193
        assert_eq!(param_count(&AdapterConfig::pfeiffer(64), &cfg), 193);
        // houlsby doubles pfeiffer at equal r with no new norm
        assert_eq!(
            param_count(&AdapterConfig::houlsby(16), &cfg),
            2 * param_count(&AdapterConfig::pfeiffer(16), &cfg)
        );
    }

    #[test]
    fn param_count_matches_instantiated_scalars() {
        let cfg = BackboneConfig::toy();
        for new_ln in [NewLn::None, NewLn::BeforeAdapter, NewLn::AfterAdapter, NewLn::Inside] {
            for placement in [vec![TapSite::Top], vec![TapSite::Bottom, TapSite::Top]] {
                let adapter = AdapterConfig {
                    placement,
                    reduction_factor: 8,
                    nonlinearity: Activation::Relu,
                    residual: true,
                    pretrained_ln: PretrainedLn::BeforeAndAfter,
                    new_ln,
                    preset: Preset::Custom,
                    init_style: InitStyle::IdentityZero,
                };
                let phi = make_adapter(&cfg, &adapter, "t", 1).unwrap();
                assert_eq!(phi.num_scalars(), param_count(&adapter, &cfg), "{new_ln:?}");
            }
        }
    }

    #[test]
    fn fresh_adapter_is_exact_identity() {
        let cfg = BackboneConfig::toy();
        let phi = make_adapter(&cfg, &AdapterConfig::pfeiffer(16), "t", 7).unwrap();
        let mut rng = SplitRng::new(3);
        let mut tape = Tape::new();
        let bound = bind_adapter(&mut tape, &phi).unwrap();
        let data: Vec<f64> = (0..5 * 64).map(|_| rng.normal_scaled(0.0, 1.0)).collect();
        let x = tape.constant(5, 64, data.clone()).unwrap();
        let y = adapter_forward(&mut tape, &phi.config, bound.site(0, TapSite::Top).unwrap(), x)
            .unwrap();
        assert_eq!(tape.value(y), data.as_slice());
    }

    #[test]
    fn fresh_adapter_without_residual_is_zero() {
        let cfg = BackboneConfig::toy();
        let mut adapter = AdapterConfig::pfeiffer(16);
        adapter.residual = false;
        adapter.preset = Preset::Custom;
        let phi = make_adapter(&cfg, &adapter, "t", 7).unwrap();
        let mut tape = Tape::new();
        let bound = bind_adapter(&mut tape, &phi).unwrap();
        let x = tape.constant(2, 64, vec![0.5; 128]).unwrap();
        let y = adapter_forward(&mut tape, &adapter, bound.site(1, TapSite::Top).unwrap(), x)
            .unwrap();
        assert!(tape.value(y).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn missing_site_is_usage_error() {
        let cfg = BackboneConfig::toy();
        let phi = make_adapter(&cfg, &AdapterConfig::pfeiffer(16), "t", 7).unwrap();
        let mut tape = Tape::new();
        let bound = bind_adapter(&mut tape, &phi).unwrap();
        assert!(bound.site(0, TapSite::Bottom).is_err());
        assert!(bound.site(cfg.num_layers, TapSite::Top).is_err());
    }
}
