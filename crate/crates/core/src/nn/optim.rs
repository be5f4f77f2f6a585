use super::{NnError, ParamStore};

/// Plain stochastic gradient descent, no momentum.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sgd {
    lr: f32,
}

impl Sgd {
    pub fn new(lr: f32) -> Result<Self, NnError> {
        if !(lr.is_finite() && lr > 0.0) {
            return Err(NnError::Hyperparameter(format!("learning rate must be > 0, got {lr}")));
        }
        Ok(Self { lr })
    }

    pub fn lr(&self) -> f32 {
        self.lr
    }

    /// `theta -= lr * grad` for every parameter, then zeroes the gradients.
    pub fn step(&self, params: &mut ParamStore) {
        for p in params.iter_mut() {
            for (v, g) in p.value.data_mut().iter_mut().zip(p.grad.data_mut()) {
                *v -= self.lr * *g;
                *g = 0.0;
            }
        }
    }

    /// Like [`Sgd::step`] but only touches parameters whose name starts with one of `prefixes`.
    /// Gradients of all parameters are still zeroed.
    pub fn step_only(&self, params: &mut ParamStore, prefixes: &[&str]) {
        for p in params.iter_mut() {
            let active = prefixes.iter().any(|pre| p.name.starts_with(pre));
            for (v, g) in p.value.data_mut().iter_mut().zip(p.grad.data_mut()) {
                if active {
                    *v -= self.lr * *g;
                }
                *g = 0.0;
            }
        }
    }
}
