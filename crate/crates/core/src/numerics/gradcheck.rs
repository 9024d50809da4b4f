//! Central finite-difference gradient checking.
//!
//! The checked function is only ever *evaluated* here; the numeric gradient
//! never touches the backward pass it is compared against.

use super::{Graph, ParamStore, Tensor, Var};
use crate::error::Result;

/// Outcome of comparing analytic and numeric gradients.
#[derive(Clone, Debug)]
pub struct GradReport {
    pub max_rel_err: f64,
    /// Location of the worst entry: input or parameter name, and flat index.
    pub worst: String,
    pub checked: usize,
}

/// Relative error with a floor on the denominator, so entries whose true
/// gradient is ~0 are compared on an absolute scale.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

pub const REL_FLOOR: f64 = 1e-3;

/// Deterministic projection weights so every output element matters.
fn projection(shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |i| ((i as f64) * 0.618_033_988_75 + 0.3).sin() + 0.1)
}

fn scalarize<'g>(out: Var<'g>) -> Result<Var<'g>> {
    let g = out.graph();
    let w = g.constant(projection(&out.shape()));
    out.mul(w)?.sum()
}

/// Checks gradients of `f` w.r.t. every input tensor and every parameter in `store`.
pub fn check<F>(store: &ParamStore, inputs: &[Tensor], h: f64, f: F) -> Result<GradReport>
where
    F: for<'g> Fn(&'g Graph, &ParamStore, &[Var<'g>]) -> Result<Var<'g>>,
{
    let eval = |store: &ParamStore, inputs: &[Tensor]| -> Result<f64> {
        let g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&g, store, &vars)?;
        Ok(scalarize(out)?.value().item())
    };

    let g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = f(&g, store, &vars)?;
    let loss = scalarize(out)?;
    let grads = g.backward(loss)?;

    let mut report = GradReport {
        max_rel_err: 0.0,
        worst: String::new(),
        checked: 0,
    };
    let note = |err: f64, label: String, report: &mut GradReport| {
        report.checked += 1;
        if err > report.max_rel_err || report.worst.is_empty() {
            report.max_rel_err = report.max_rel_err.max(err);
            report.worst = label;
        }
    };

    for (k, t) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[k]).cloned().unwrap_or_else(|| Tensor::zeros(t.shape()));
        let mut probe = inputs.to_vec();
        for i in 0..t.numel() {
            let orig = t.data()[i];
            probe[k].data_mut()[i] = orig + h;
            let up = eval(store, &probe)?;
            probe[k].data_mut()[i] = orig - h;
            let down = eval(store, &probe)?;
            probe[k].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            note(rel_err(analytic.data()[i], numeric), format!("input {k}[{i}]"), &mut report);
        }
    }

    let analytic_params: std::collections::HashMap<_, _> = grads.params().iter().cloned().collect();
    let mut probe = store.clone();
    for (idx, p) in store.iter().enumerate() {
        let id = store.id(&p.name).expect("own name");
        debug_assert_eq!(id.index(), idx);
        let analytic = analytic_params
            .get(&id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(p.tensor.shape()));
        for i in 0..p.tensor.numel() {
            let orig = p.tensor.data()[i];
            probe.get_mut(id).tensor.data_mut()[i] = orig + h;
            let up = eval(&probe, inputs)?;
            probe.get_mut(id).tensor.data_mut()[i] = orig - h;
            let down = eval(&probe, inputs)?;
            probe.get_mut(id).tensor.data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            note(rel_err(analytic.data()[i], numeric), format!("{}[{i}]", p.name), &mut report);
        }
    }
    Ok(report)
}
