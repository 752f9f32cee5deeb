use crate::error::{check_len, Error, Result};

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step_count: u64,
    first_moment: Vec<f64>,
    second_moment: Vec<f64>,
}

impl Adam {
    pub fn new(num_params: usize, learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step_count: 0,
            first_moment: vec![0.0; num_params],
            second_moment: vec![0.0; num_params],
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn num_params(&self) -> usize {
        self.first_moment.len()
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        self.step_parts(&mut [params], grads)
    }

    /// One update over parameters split across several buffers; `grads` is
    /// their concatenation.
    pub fn step_parts(&mut self, parts: &mut [&mut [f64]], grads: &[f64]) -> Result<()> {
        let total: usize = parts.iter().map(|p| p.len()).sum();
        check_len("adam parameters", self.first_moment.len(), total)?;
        check_len("adam gradients", total, grads.len())?;
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite {
                what: "adam gradient",
                layer: 0,
            });
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let mut i = 0;
        for part in parts.iter_mut() {
            for p in part.iter_mut() {
                let g = grads[i];
                let m = &mut self.first_moment[i];
                let v = &mut self.second_moment[i];
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *p -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
                i += 1;
            }
        }
        Ok(())
    }
}
