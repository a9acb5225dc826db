use crate::error::{Error, Result};
use crate::nn::stack::LayerStack;
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimAlgorithm {
    Sgd { lr: f32, momentum: f32 },
    Adam { lr: f32, beta1: f32, beta2: f32, eps: f32 },
}

impl Default for OptimAlgorithm {
    fn default() -> Self {
        OptimAlgorithm::Adam {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Optimizer state for one [`LayerStack`]. Moment buffers are created on
/// the first step and indexed by (layer, parameter) position.
#[derive(Debug, Clone)]
pub struct OptimState {
    pub algorithm: OptimAlgorithm,
    step_count: u64,
    first: Vec<Vec<Matrix>>,
    second: Vec<Vec<Matrix>>,
}

impl OptimState {
    pub fn new(algorithm: OptimAlgorithm) -> Self {
        Self {
            algorithm,
            step_count: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    fn ensure_buffers(&mut self, stack: &LayerStack) {
        if !self.first.is_empty() {
            return;
        }
        let zeros = || -> Vec<Vec<Matrix>> {
            stack
                .layers()
                .iter()
                .map(|l| l.params.iter().map(|p| Matrix::zeros(p.value.rows(), p.value.cols())).collect())
                .collect()
        };
        self.first = zeros();
        if matches!(self.algorithm, OptimAlgorithm::Adam { .. }) {
            self.second = zeros();
        }
    }

    /// Applies one update from the stack's gradients, then zeroes them.
    pub fn step(&mut self, stack: &mut LayerStack) -> Result<()> {
        if let Some(l) = stack.layers().iter().find(|l| !l.params.is_empty() && !l.has_grads) {
            return Err(Error::MissingGrads(l.name.clone()));
        }
        self.ensure_buffers(stack);
        if self.first.len() != stack.len() {
            return Err(Error::Shape("optimizer state belongs to a different stack".into()));
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        match self.algorithm {
            OptimAlgorithm::Sgd { lr, momentum } => {
                for (li, layer) in stack.layers_mut().iter_mut().enumerate() {
                    for (pi, p) in layer.params.iter_mut().enumerate() {
                        let vel = &mut self.first[li][pi];
                        for ((w, v), g) in p
                            .value
                            .as_mut_slice()
                            .iter_mut()
                            .zip(vel.as_mut_slice())
                            .zip(p.grad.as_slice())
                        {
                            *v = momentum * *v + g;
                            *w -= lr * *v;
                        }
                    }
                }
            }
            OptimAlgorithm::Adam { lr, beta1, beta2, eps } => {
                let c1 = (1.0 - f64::from(beta1).powi(t)) as f32;
                let c2 = (1.0 - f64::from(beta2).powi(t)) as f32;
                for (li, layer) in stack.layers_mut().iter_mut().enumerate() {
                    for (pi, p) in layer.params.iter_mut().enumerate() {
                        let m = self.first[li][pi].as_mut_slice();
                        let v = self.second[li][pi].as_mut_slice();
                        for (((w, m), v), &g) in p
                            .value
                            .as_mut_slice()
                            .iter_mut()
                            .zip(m)
                            .zip(v)
                            .zip(p.grad.as_slice())
                        {
                            *m = beta1 * *m + (1.0 - beta1) * g;
                            *v = beta2 * *v + (1.0 - beta2) * g * g;
                            let m_hat = *m / c1;
                            let v_hat = *v / c2;
                            *w -= lr * m_hat / (v_hat.sqrt() + eps);
                        }
                    }
                }
            }
        }
        stack.zero_grads();
        Ok(())
    }
}
