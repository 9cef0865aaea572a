//! Central-difference gradient verification.

use super::{Graph, NumError, NumResult, Tensor, TensorId};

/// Per-parameter comparison of analytic and numeric gradients.
#[derive(Debug, Clone)]
pub struct ParamGradCheck {
    pub name: String,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub max_rel_err: f64,
}

/// Report for one finite-difference check over a parameter set.
#[derive(Debug, Clone)]
pub struct GradReport {
    pub params: Vec<ParamGradCheck>,
    pub max_rel_err: f64,
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-8)
}

/// Verify the analytic gradient of a scalar-valued graph against central
/// differences `(f(p + eps) - f(p - eps)) / (2 eps)`, one coordinate at a
/// time. The builder must be deterministic; it is re-invoked on a fresh
/// graph for every perturbed evaluation.
pub fn finite_diff_check<F>(
    params: &[(String, Tensor)],
    eps: f64,
    build: F,
) -> NumResult<GradReport>
where
    F: Fn(&mut Graph, &[TensorId]) -> NumResult<TensorId>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(NumError::Config(format!("finite-difference eps {eps} outside [1e-7, 1e-3]")));
    }
    if params.is_empty() {
        return Err(NumError::Config("finite_diff_check needs at least one parameter".into()));
    }

    // Analytic pass.
    let mut g = Graph::new();
    let ids: Vec<TensorId> = params
        .iter()
        .map(|(_, t)| g.input(&t.clone().with_grad()))
        .collect();
    let loss = build(&mut g, &ids)?;
    if g.shape(loss) != (1, 1) {
        return Err(NumError::Dimension("finite_diff_check loss must be scalar".into()));
    }
    if !g.scalar_value(loss).is_finite() {
        return Err(NumError::Numeric("finite_diff_check on non-finite loss".into()));
    }
    let grads = g.backward(loss)?;

    let eval = |perturbed: &[Tensor]| -> NumResult<f64> {
        let mut g = Graph::new();
        let ids: Vec<TensorId> = perturbed.iter().map(|t| g.input(t)).collect();
        let loss = build(&mut g, &ids)?;
        let v = g.scalar_value(loss);
        if !v.is_finite() {
            return Err(NumError::Numeric(format!("non-finite objective value {v}")));
        }
        Ok(v)
    };

    let mut report = GradReport { params: Vec::new(), max_rel_err: 0.0 };
    let base: Vec<Tensor> = params.iter().map(|(_, t)| t.clone()).collect();
    for (pi, (name, tensor)) in params.iter().enumerate() {
        let analytic = grads
            .get(ids[pi])
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![0.0; tensor.numel()]);
        let mut numeric = Vec::with_capacity(tensor.numel());
        for ci in 0..tensor.numel() {
            let mut plus = base.clone();
            let mut minus = base.clone();
            let mut vp = tensor.values().to_vec();
            let mut vm = vp.clone();
            vp[ci] += eps;
            vm[ci] -= eps;
            plus[pi].set_values(vp)?;
            minus[pi].set_values(vm)?;
            numeric.push((eval(&plus)? - eval(&minus)?) / (2.0 * eps));
        }
        let max_rel = analytic
            .iter()
            .zip(&numeric)
            .map(|(a, n)| rel_err(*a, *n))
            .fold(0.0, f64::max);
        report.max_rel_err = report.max_rel_err.max(max_rel);
        report.params.push(ParamGradCheck {
            name: name.clone(),
            analytic,
            numeric,
            max_rel_err: max_rel,
        });
    }
    Ok(report)
}
