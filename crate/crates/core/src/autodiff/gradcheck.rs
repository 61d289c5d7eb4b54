use crate::autodiff::{Graph, Tensor, Var};
use crate::error::Result;

/// Outcome of comparing analytic gradients against central differences.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// `max |a - n| / max(|a|, |n|, 1e-8)` over all coordinates.
    pub max_rel_err: f64,
    /// `(parameter index, coordinate)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub coordinates: usize,
    pub passed: bool,
}

/// Checks the gradient of the scalar built by `f` with respect to `params`.
///
/// `f` must be deterministic: any dropout stream has to be recreated from the
/// same seed inside the closure so every evaluation sees identical masks.
pub fn grad_check<F>(f: F, params: &mut [Tensor<f64>], eps: f64, tolerance: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.leaf(p.clone())).collect();
    let loss = f(&mut g, &vars)?;
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| g.grad(v).map(Tensor::to_f64_vec).unwrap_or_default())
        .collect();
    drop(g);

    let eval = |params: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = params.iter().map(|p| g.constant(p.clone())).collect();
        let loss = f(&mut g, &vars)?;
        Ok(g.value(loss).item())
    };

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
        coordinates: 0,
        passed: true,
    };
    for p in 0..params.len() {
        #[allow(clippy::needless_range_loop)]
        for c in 0..params[p].numel() {
            let orig = params[p].data()[c];
            params[p].data_mut()[c] = orig + eps;
            let up = eval(params)?;
            params[p].data_mut()[c] = orig - eps;
            let down = eval(params)?;
            params[p].data_mut()[c] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic[p].get(c).copied().unwrap_or(0.0);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            report.coordinates += 1;
            if rel > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = rel;
                report.worst = Some((p, c));
                report.worst_analytic = a;
                report.worst_numeric = numeric;
            }
        }
    }
    report.passed = report.max_rel_err <= tolerance;
    Ok(report)
}
