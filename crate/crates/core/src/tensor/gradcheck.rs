use super::{Graph, ParamId, ParamSet, Var};
use crate::error::Result;

/// Outcome of comparing analytic gradients with central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    /// max over elements of |analytic − numeric| / max(1e-12, |analytic| + |numeric|);
    /// infinite when any value is non-finite.
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst element.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

impl GradCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error.is_finite() && self.max_rel_error < tol
    }
}

/// Checks the gradients of `build_loss` with respect to every parameter in
/// `params` against central finite differences of width `2·step`.
pub fn finite_diff_check<B>(params: &ParamSet<f64>, step: f64, build_loss: B) -> Result<GradCheck>
where
    B: for<'g> Fn(&'g Graph<f64>, &ParamSet<f64>) -> Result<Var<'g, f64>>,
{
    finite_diff_check_scaled(params, step, 1.0, build_loss)
}

/// Same as [`finite_diff_check`] but multiplies the analytic gradients by
/// `analytic_scale` first; used to confirm that a corrupted backward pass
/// is detected.
pub fn finite_diff_check_scaled<B>(
    params: &ParamSet<f64>,
    step: f64,
    analytic_scale: f64,
    build_loss: B,
) -> Result<GradCheck>
where
    B: for<'g> Fn(&'g Graph<f64>, &ParamSet<f64>) -> Result<Var<'g, f64>>,
{
    let mut work = params.clone();
    work.zero_grads();
    {
        let g = Graph::new();
        let loss = build_loss(&g, &work)?;
        g.backward(loss)?;
        work.accumulate_grads(&g);
    }
    let analytic: Vec<Vec<f64>> = work
        .iter()
        .map(|(_, _, t)| match t.grad() {
            Some(gr) => gr.iter().map(|v| v * analytic_scale).collect(),
            None => vec![0.0; t.numel()],
        })
        .collect();
    work.zero_grads();

    let eval = |p: &ParamSet<f64>| -> Result<f64> {
        let g = Graph::new();
        Ok(build_loss(&g, p)?.item())
    };

    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    for (pi, grads) in analytic.iter().enumerate() {
        let id = ParamId(pi);
        for (ei, &a) in grads.iter().enumerate() {
            let orig = work.get(id).data()[ei];
            work.get_mut(id).data_mut()[ei] = orig + step;
            let plus = eval(&work)?;
            work.get_mut(id).data_mut()[ei] = orig - step;
            let minus = eval(&work)?;
            work.get_mut(id).data_mut()[ei] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let rel = if a.is_finite() && numeric.is_finite() {
                (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-12)
            } else {
                f64::INFINITY
            };
            report.checked += 1;
            if rel > report.max_rel_error || (rel.is_nan() && !report.max_rel_error.is_nan()) {
                report.max_rel_error = rel;
                report.worst = Some((work.name(id).to_string(), ei));
            }
        }
    }
    Ok(report)
}
