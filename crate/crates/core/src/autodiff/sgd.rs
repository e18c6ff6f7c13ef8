use super::error::AdError;
use super::tensor::Params;

/// SGD with momentum and weight decay.
///
/// Per step: `v <- momentum*v + grad + weight_decay*param` followed by
/// `param <- param - lr*v`; gradients are cleared afterwards.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(
        learning_rate: f64,
        momentum: f64,
        weight_decay: f64,
        params: &Params,
    ) -> Result<Self, AdError> {
        if !(learning_rate > 0.0) {
            return Err(AdError::Optimizer(format!(
                "learning rate must be positive, got {learning_rate}"
            )));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(AdError::Optimizer(format!(
                "momentum must lie in [0,1), got {momentum}"
            )));
        }
        if weight_decay < 0.0 {
            return Err(AdError::Optimizer(format!(
                "weight decay must be non-negative, got {weight_decay}"
            )));
        }
        let velocity = params
            .iter()
            .map(|(_, t)| vec![0.0; t.numel()])
            .collect();
        Ok(OptimizerState {
            learning_rate,
            momentum,
            weight_decay,
            velocity,
        })
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.learning_rate = lr;
    }

    /// Apply one update to every grad-requiring parameter and clear gradients.
    /// A grad-requiring parameter without a populated gradient is an error.
    pub fn step(&mut self, params: &mut Params) -> Result<(), AdError> {
        if self.velocity.len() != params.len() {
            return Err(AdError::Optimizer(
                "optimizer state does not match parameter set".into(),
            ));
        }
        for (i, (name, t)) in params.iter_mut().enumerate() {
            if !t.requires_grad {
                continue;
            }
            let grad = match t.grad.take() {
                Some(g) => g,
                None => return Err(AdError::MissingGradient(name.to_string())),
            };
            let v = &mut self.velocity[i];
            for j in 0..v.len() {
                v[j] = self.momentum * v[j] + grad[j] + self.weight_decay * t.values[j];
                t.values[j] -= self.learning_rate * v[j];
            }
        }
        Ok(())
    }
}
