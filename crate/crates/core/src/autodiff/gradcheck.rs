//! Central finite-difference verification of backward rules.

use super::{Graph, Result, Var};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;

/// Relative errors divide by `max(|analytic|, |numeric|, REL_ERROR_FLOOR)`, so
/// gradients near zero are compared absolutely at that scale.
pub const REL_ERROR_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub checked: usize,
}

impl GradcheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

/// Compares the graph's gradients of `build`'s scalar output with respect to
/// every input against central differences with step `h`.
///
/// `build` must be deterministic (seed any randomness inside it); it is called
/// once with a recording graph and twice per input entry without one.
pub fn check_gradients<F>(build: F, inputs: &[Tensor], h: f64) -> Result<GradcheckReport>
where
    F: Fn(&Graph, &[Var]) -> Result<Var>,
{
    check_gradients_with(build, inputs, h, Graph::new)
}

pub fn check_gradients_with<F, G>(build: F, inputs: &[Tensor], h: f64, make_graph: G) -> Result<GradcheckReport>
where
    F: Fn(&Graph, &[Var]) -> Result<Var>,
    G: Fn() -> Graph,
{
    let g = make_graph();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let loss = build(&g, &vars)?;
    let grads = g.backward(loss)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.wrt(&g, v)).collect();

    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let g = Graph::inference();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let loss = build(&g, &vars)?;
        Ok(g.value(loss).item())
    };

    let mut report = GradcheckReport { max_rel_error: 0.0, max_abs_error: 0.0, checked: 0 };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.len() {
            let orig = input.data()[j];
            work[i].data_mut()[j] = orig + h;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = orig - h;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[i].data()[j];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
            report.max_abs_error = report.max_abs_error.max(abs);
            report.max_rel_error = report.max_rel_error.max(rel);
            report.checked += 1;
        }
    }
    Ok(report)
}
