//! Full-model gradient verification: every trainable tensor in the
//! backbone, three member adapters, the fusion stack and the head, checked
//! against central finite differences on a small model.

use adapterlab::adapters::{make_adapter, AdapterConfig, AdapterParams, InitStyle};
use adapterlab::backbone::{BackboneConfig, BackboneParams, HookPlan, TokenBatch};
use adapterlab::error::Result;
use adapterlab::fusion::{fusion_init, FusionConfig, FusionParams};
use adapterlab::gradcheck::{grad_check, GradCheckReport};
use adapterlab::model::{Assembly, ClassifierHead};
use adapterlab::rng::SplitRng;
use adapterlab::tape::Activation;
use adapterlab::tensor::{ParamGroup, Tensor};

/// The verification model: d=8, 2 layers, 2 heads, 3 member adapters with
/// fusion, and a 3-class head.
pub struct VerifyAssembly {
    pub backbone: BackboneParams,
    pub members: Vec<AdapterParams>,
    pub psi: FusionParams,
    pub head: ClassifierHead,
    pub batch: TokenBatch,
    pub labels: Vec<usize>,
}

pub fn build_verify_assembly(seed: u64) -> Result<VerifyAssembly> {
    let config = BackboneConfig {
        vocab_size: 16,
        max_seq_len: 8,
        hidden_dim: 8,
        num_layers: 2,
        num_heads: 2,
        ffn_dim: 16,
        dropout_rate: 0.0,
        ffn_activation: Activation::Gelu,
        pooling: Default::default(),
    };
    let root = SplitRng::new(seed);
    let backbone = BackboneParams::init(&config, &mut root.substream("backbone"))?;
    let mut acfg = AdapterConfig::pfeiffer(2);
    // random both ways so adapter outputs differ and every path carries signal
    acfg.init_style = InitStyle::FullRandom;
    let members: Vec<AdapterParams> = (0..3)
        .map(|i| make_adapter(&config, &acfg, &format!("m{i}"), seed.wrapping_add(i)))
        .collect::<Result<_>>()?;
    let refs: Vec<&AdapterParams> = members.iter().collect();
    let psi = fusion_init(&config, &refs, "m0", seed ^ 0x5a5a, FusionConfig::default())?;
    let head = ClassifierHead::init("m0", config.hidden_dim, 3, &mut root.substream("head"));
    let batch = TokenBatch::from_rows(&[vec![2, 5, 6, 7], vec![2, 8, 9]])?;
    let labels = vec![0usize, 2];
    Ok(VerifyAssembly { backbone, members, psi, head, batch, labels })
}

/// Flatten every parameter group of the assembly in a fixed order.
fn flatten_all(va: &VerifyAssembly) -> Vec<Tensor> {
    let mut flat: Vec<Tensor> = Vec::new();
    va.backbone.visit(&mut |t| flat.push(t.clone()));
    for m in &va.members {
        m.visit(&mut |t| flat.push(t.clone()));
    }
    va.psi.visit(&mut |t| flat.push(t.clone()));
    va.head.visit(&mut |t| flat.push(t.clone()));
    flat
}

fn overwrite_all(va: &VerifyAssembly, ps: &[Tensor]) -> VerifyAssembly {
    let mut i = 0;
    let mut copy = VerifyAssembly {
        backbone: va.backbone.clone(),
        members: va.members.clone(),
        psi: va.psi.clone(),
        head: va.head.clone(),
        batch: va.batch.clone(),
        labels: va.labels.clone(),
    };
    let mut take = |t: &mut Tensor| {
        t.data.copy_from_slice(&ps[i].data);
        i += 1;
    };
    copy.backbone.visit_mut(&mut take);
    for m in &mut copy.members {
        m.visit_mut(&mut take);
    }
    copy.psi.visit_mut(&mut take);
    copy.head.visit_mut(&mut take);
    copy
}

/// Check every trainable tensor of the full fused assembly against central
/// finite differences at the given step size and tolerance.
pub fn full_assembly_grad_check(seed: u64, h: f64, tol: f64) -> Result<GradCheckReport> {
    let va = build_verify_assembly(seed)?;
    let mut flat = flatten_all(&va);
    grad_check(
        &mut flat,
        |tape, ps| {
            let current = overwrite_all(&va, ps);
            let assembly = Assembly {
                backbone: &current.backbone,
                hooks: HookPlan::Fusion {
                    members: current.members.iter().collect(),
                    psi: &current.psi,
                },
                head: &current.head,
            };
            let (loss, _, _) = assembly.loss(tape, &current.batch, &current.labels, None)?;
            Ok(loss)
        },
        h,
        tol,
    )
}
