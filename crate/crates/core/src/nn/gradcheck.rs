use super::reference::{forward_f64, Activations};
use super::{ActivationPattern, NnError, ParamStore, Stack, Tape, Tensor};

/// A scalar loss over parameters, reachable by two independent routes.
pub trait Objective {
    /// Production path: accumulates dLoss/dθ into the gradient slots of `params`.
    fn backprop(&self, params: &mut ParamStore) -> Result<(), NnError>;

    /// The same loss from a double-precision reference forward pass, plus the
    /// activation pattern that pass took.
    fn reference_loss(&self, params: &ParamStore) -> Result<(f64, ActivationPattern), NnError>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// Parameter holding the worst entry, its flat index, analytic and numeric values.
    pub worst: Option<(String, usize, f64, f64)>,
    pub checked: usize,
    /// Entries whose perturbation crossed a relu kink or flipped a pool winner.
    pub skipped: usize,
}

/// Compares analytic gradients against central differences for every scalar parameter.
///
/// Relative error is `|a - n| / max(|a|, |n|, 1e-8)`. The numeric side uses
/// [`Objective::reference_loss`]. Entries whose ±eps perturbation changes the
/// activation pattern are excluded, since the loss is not differentiable
/// across them.
pub fn grad_check_objective<O: Objective + ?Sized>(
    objective: &O,
    params: &mut ParamStore,
    eps: f32,
) -> Result<GradCheckReport, NnError> {
    if !(eps > 0.0) {
        return Err(NnError::Hyperparameter(format!("eps must be > 0, got {eps}")));
    }
    params.zero_grads();
    objective.backprop(params)?;
    let analytic: Vec<(String, Vec<f32>)> = params
        .iter()
        .map(|p| (p.name.clone(), p.grad.data().to_vec()))
        .collect();
    params.zero_grads();
    let (_, base_pattern) = objective.reference_loss(params)?;

    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst: None,
        checked: 0,
        skipped: 0,
    };
    for (name, grads) in &analytic {
        for (idx, &a) in grads.iter().enumerate() {
            let original = params.get(name)?.value.data()[idx];
            let plus = original + eps;
            let minus = original - eps;
            params.get_mut(name)?.value.data_mut()[idx] = plus;
            let (lp, pp) = objective.reference_loss(params)?;
            params.get_mut(name)?.value.data_mut()[idx] = minus;
            let (lm, pm) = objective.reference_loss(params)?;
            params.get_mut(name)?.value.data_mut()[idx] = original;
            if pp != base_pattern || pm != base_pattern {
                report.skipped += 1;
                continue;
            }
            let numeric = (lp - lm) / (plus as f64 - minus as f64);
            let a = a as f64;
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            report.checked += 1;
            if rel > report.max_relative_error {
                report.max_relative_error = rel;
                report.worst = Some((name.clone(), idx, a, numeric));
            }
        }
    }
    Ok(report)
}

/// Loss `sum_i c_i * y_i` over the stack output with fixed pseudo-random weights `c`.
struct StackProbe<'a> {
    stack: &'a Stack,
    input: &'a Tensor,
}

pub fn probe_weight(i: usize) -> f32 {
    // deterministic values spread over [-1, 1]
    ((i as f32 + 1.0) * 0.618_034).fract() * 2.0 - 1.0
}

impl Objective for StackProbe<'_> {
    fn backprop(&self, params: &mut ParamStore) -> Result<(), NnError> {
        let mut tape = Tape::default();
        let y = self.stack.forward_cached(params, self.input, &mut tape)?;
        let g = Tensor::new(y.shape().to_vec(), (0..y.len()).map(probe_weight).collect())?;
        self.stack.backward_params(params, &tape, &g)
    }

    fn reference_loss(&self, params: &ParamStore) -> Result<(f64, ActivationPattern), NnError> {
        let mut pattern = ActivationPattern::default();
        let x = Activations::from_f32(self.input.shape(), self.input.data());
        let y = forward_f64(self.stack, params, &x, &mut pattern)?;
        let loss = y.data.iter().enumerate().map(|(i, v)| probe_weight(i) as f64 * v).sum();
        Ok((loss, pattern))
    }
}

/// Max relative error between analytic and central-difference gradients of a stack.
pub fn grad_check(stack: &Stack, params: &mut ParamStore, input: &Tensor, eps: f32) -> Result<f64, NnError> {
    grad_check_report(stack, params, input, eps).map(|r| r.max_relative_error)
}

/// [`grad_check`] with the full report.
pub fn grad_check_report(
    stack: &Stack,
    params: &mut ParamStore,
    input: &Tensor,
    eps: f32,
) -> Result<GradCheckReport, NnError> {
    if params.numel() > 10_000 {
        return Err(NnError::Config(format!(
            "grad_check enumerates every parameter; {} is too many",
            params.numel()
        )));
    }
    grad_check_objective(&StackProbe { stack, input }, params, eps)
}
