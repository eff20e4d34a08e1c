//! Central finite-difference verification of analytic gradients.
//!
//! The numeric side perturbs one parameter coordinate at a time and re-runs
//! the forward program only; it never touches the tape's backward pass, so
//! the two routes stay independent.

use crate::error::{Error, Result};
use crate::tape::{GradMap, Tape, Var};
use crate::tensor::Tensor;

/// One parameter's worst coordinate.
#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub pass: bool,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub per_param: Vec<ParamCheck>,
    pub tol: f64,
    pub h: f64,
}

impl GradCheckReport {
    pub fn pass(&self) -> bool {
        self.per_param.iter().all(|p| p.pass)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.per_param.iter().map(|p| p.max_rel_err).fold(0.0, f64::max)
    }

    /// One line per parameter, pass/fail marked.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for p in &self.per_param {
            out.push_str(&format!(
                "{} {:<40} max_rel_err {:.3e} (analytic {:+.6e}, numeric {:+.6e} at [{}])\n",
                if p.pass { "PASS" } else { "FAIL" },
                p.name,
                p.max_rel_err,
                p.analytic_at_worst,
                p.numeric_at_worst,
                p.worst_index
            ));
        }
        out.push_str(&format!(
            "overall: {} (tol {:.1e}, h {:.1e})\n",
            if self.pass() { "PASS" } else { "FAIL" },
            self.tol,
            self.h
        ));
        out
    }
}

/// Compare the tape gradient of `build` against central differences
/// `(f(x+h) - f(x-h)) / 2h` for every coordinate of every trainable tensor
/// in `params`.
///
/// `build` must construct the full forward program on the given tape from
/// the current parameter values and return the scalar loss. It is run once
/// per perturbed coordinate, so it must be deterministic; non-determinism is
/// detected by evaluating the unperturbed program twice and reported as a
/// check error.
///
/// The error measure is `|analytic - numeric| / max(1, |analytic|, |numeric|)`,
/// i.e. absolute for small gradients and relative for large ones.
pub fn grad_check<F>(params: &mut [Tensor], build: F, h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Tensor]) -> Result<Var>,
{
    if h <= 0.0 {
        return Err(Error::Usage("grad_check requires h > 0".into()));
    }

    let eval = |params: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let loss = build(&mut tape, params)?;
        tape.scalar(loss)
    };

    let base = eval(params)?;
    let again = eval(params)?;
    if base.to_bits() != again.to_bits() {
        return Err(Error::Check(format!(
            "program is not deterministic: {base:?} vs {again:?}"
        )));
    }

    // analytic gradients from one backward pass
    let mut tape = Tape::new();
    let loss = build(&mut tape, params)?;
    let grads = tape.backward(loss)?;

    check_against(params, &eval, &grads, h, tol)
}

/// The comparison half of [`grad_check`], with the analytic gradients
/// supplied by the caller. Lets a corrupted gradient be fed in as a negative
/// control for the checker itself.
pub fn grad_check_against<F>(
    params: &mut [Tensor],
    build: F,
    analytic: &GradMap,
    h: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Tensor]) -> Result<Var>,
{
    let eval = |params: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let loss = build(&mut tape, params)?;
        tape.scalar(loss)
    };
    check_against(params, &eval, analytic, h, tol)
}

fn check_against(
    params: &mut [Tensor],
    eval: &dyn Fn(&[Tensor]) -> Result<f64>,
    grads: &GradMap,
    h: f64,
    tol: f64,
) -> Result<GradCheckReport> {
    let mut per_param = Vec::new();
    for i in 0..params.len() {
        if !params[i].trainable {
            continue;
        }
        let name = params[i].name.clone();
        let numel = params[i].data.len();
        let mut worst = ParamCheck {
            name: name.clone(),
            max_rel_err: 0.0,
            worst_index: 0,
            analytic_at_worst: 0.0,
            numeric_at_worst: 0.0,
            pass: true,
        };
        for j in 0..numel {
            let orig = params[i].data[j];
            params[i].data[j] = orig + h;
            let plus = eval(params)?;
            params[i].data[j] = orig - h;
            let minus = eval(params)?;
            params[i].data[j] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let analytic = grads.get(&name).map(|g| g[j]).unwrap_or(0.0);
            let scale = 1.0f64.max(analytic.abs()).max(numeric.abs());
            let rel = (analytic - numeric).abs() / scale;
            if rel > worst.max_rel_err {
                worst.max_rel_err = rel;
                worst.worst_index = j;
                worst.analytic_at_worst = analytic;
                worst.numeric_at_worst = numeric;
            }
        }
        worst.pass = worst.max_rel_err <= tol;
        per_param.push(worst);
    }

    Ok(GradCheckReport { per_param, tol, h })
}
