//! Activation-heatmap export: one CSV row per (layer, target task, member
//! adapter) with the mean softmax weight, over a configurable layer
//! selection.

use adapterlab::error::{Error, Result};
use adapterlab::fusion::FusionActivationTrace;

/// Average traces of the same target over seeds (structure must agree).
pub fn average_traces(mut traces: Vec<FusionActivationTrace>) -> Result<FusionActivationTrace> {
    if traces.is_empty() {
        return Err(Error::Usage("no traces to average".into()));
    }
    let mut out = traces.remove(0);
    for t in &traces {
        if t.members != out.members || t.layers.len() != out.layers.len() {
            return Err(Error::Usage(format!(
                "traces for {} disagree on structure",
                out.target_task
            )));
        }
        for (acc, layer) in out.layers.iter_mut().zip(&t.layers) {
            for (a, m) in acc.mean.iter_mut().zip(&layer.mean) {
                *a += m;
            }
        }
        out.instances += t.instances;
        out.positions += t.positions;
    }
    let n = (traces.len() + 1) as f64;
    for layer in &mut out.layers {
        for m in &mut layer.mean {
            *m /= n;
        }
    }
    Ok(out)
}

/// Layers exported by default for a depth-`l` model: 1, ceil(7l/12),
/// ceil(9l/12) and l (deduplicated, ascending).
pub fn default_layer_selection(num_layers: usize) -> Vec<usize> {
    let mut v = vec![
        1,
        (7 * num_layers).div_ceil(12),
        (9 * num_layers).div_ceil(12),
        num_layers,
    ];
    v.sort();
    v.dedup();
    v.retain(|l| *l >= 1 && *l <= num_layers);
    v
}

/// Render traces as CSV with columns `layer,target_task,adapter,mean_activation`.
/// All traces must share the member list; per-(layer, target) rows sum to 1.
pub fn export_heatmap(
    traces: &[FusionActivationTrace],
    layer_selection: Option<&[usize]>,
) -> Result<String> {
    if traces.is_empty() {
        return Err(Error::Usage("no traces to export".into()));
    }
    let members = &traces[0].members;
    for t in traces {
        if &t.members != members {
            return Err(Error::Usage(format!(
                "trace for {} has a different member list",
                t.target_task
            )));
        }
        t.validate()?;
    }
    let max_layer = traces
        .iter()
        .flat_map(|t| t.layers.iter().map(|l| l.layer))
        .max()
        .unwrap_or(1);
    let default_sel;
    let selection: &[usize] = match layer_selection {
        Some(s) => s,
        None => {
            default_sel = default_layer_selection(max_layer);
            &default_sel
        }
    };

    let mut csv = String::from("layer,target_task,adapter,mean_activation\n");
    for &layer in selection {
        for trace in traces {
            let Some(row) = trace.layers.iter().find(|l| l.layer == layer) else {
                continue;
            };
            for (member, mean) in members.iter().zip(&row.mean) {
                csv.push_str(&format!("{layer},{},{member},{mean:.12}\n", trace.target_task));
            }
        }
    }
    Ok(csv)
}
