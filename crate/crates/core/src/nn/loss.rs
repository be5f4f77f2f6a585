use super::{NnError, Tensor};

/// `-ln softmax(logits)[label]` for one logit vector.
///
/// Written as `ln(1 + sum_j exp(z_j - z_label))` so confident predictions
/// keep their tiny loss instead of rounding to zero.
pub fn cross_entropy_single(logits: &[f32], label: usize) -> Result<f32, NnError> {
    if label >= logits.len() || logits.len() < 2 {
        return Err(NnError::InvalidLabel {
            label,
            classes: logits.len(),
        });
    }
    let zl = logits[label];
    let m = logits
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != label)
        .map(|(_, &z)| z - zl)
        .fold(f32::NEG_INFINITY, f32::max);
    let rest = |shift: f32| -> f32 {
        logits
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != label)
            .map(|(_, &z)| (z - zl - shift).exp())
            .sum()
    };
    Ok(if m < 0.0 {
        rest(0.0).ln_1p()
    } else {
        m + ((-m).exp() + rest(m)).ln()
    })
}

/// How per-sample losses combine into the batch loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    #[default]
    Mean,
    Sum,
}

/// Mean cross-entropy over a `[N, K]` batch and its gradient with respect to the logits.
pub fn cross_entropy(logits: &Tensor, labels: &[u8]) -> Result<(f32, Tensor), NnError> {
    cross_entropy_reduced(logits, labels, Reduction::Mean)
}

/// Batch cross-entropy under `reduction` and its gradient with respect to the logits.
pub fn cross_entropy_reduced(logits: &Tensor, labels: &[u8], reduction: Reduction) -> Result<(f32, Tensor), NnError> {
    if logits.shape().len() != 2 || logits.batch() != labels.len() {
        return Err(NnError::Shape(format!(
            "logits {:?} vs {} labels",
            logits.shape(),
            labels.len()
        )));
    }
    let n = labels.len();
    let k = logits.shape()[1];
    let probs = super::softmax_rows(logits);
    let mut grad = probs.clone();
    let mut total = 0.0f64;
    for (i, &label) in labels.iter().enumerate() {
        let label = label as usize;
        total += cross_entropy_single(logits.row(i), label)? as f64;
        let row = &mut grad.data_mut()[i * k..(i + 1) * k];
        row[label] -= 1.0;
        if reduction == Reduction::Mean {
            for v in row.iter_mut() {
                *v /= n as f32;
            }
        }
    }
    Ok(match reduction {
        Reduction::Mean => ((total / n as f64) as f32, grad),
        Reduction::Sum => (total as f32, grad),
    })
}
