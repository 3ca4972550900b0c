//! Adam with bias correction.

use super::tensor::Scalar;
use super::NumericsError;

/// Hyperparameters; defaults are beta1=0.9, beta2=0.999, eps=1e-8, lr=1e-4.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First/second moment estimates plus the shared step counter. One slot per
/// parameter, in the same canonical order as the parameter list itself.
#[derive(Debug, Clone)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(config: AdamConfig, param_lens: &[usize]) -> Self {
        Self {
            config,
            step: 0,
            m: param_lens.iter().map(|&n| vec![T::zero(); n]).collect(),
            v: param_lens.iter().map(|&n| vec![T::zero(); n]).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    pub fn moments(&self) -> (&[Vec<T>], &[Vec<T>]) {
        (&self.m, &self.v)
    }

    /// Restore moments and step counter (training resume path).
    pub fn restore(&mut self, step: u64, m: Vec<Vec<T>>, v: Vec<Vec<T>>) {
        assert_eq!(m.len(), self.m.len());
        assert_eq!(v.len(), self.v.len());
        self.step = step;
        self.m = m;
        self.v = v;
    }

    /// One update over every (name, param, grad) triple. Parameter order
    /// must match the order `param_lens` was built from.
    pub fn step<'a>(
        &mut self,
        params: impl Iterator<Item = (&'a str, &'a mut [T], &'a [T])>,
    ) -> Result<(), NumericsError> {
        self.step += 1;
        let t = self.step as f64;
        let lr = T::c(self.config.lr);
        let b1 = T::c(self.config.beta1);
        let b2 = T::c(self.config.beta2);
        let eps = T::c(self.config.eps);
        let bc1 = T::c(1.0 - self.config.beta1.powf(t));
        let bc2 = T::c(1.0 - self.config.beta2.powf(t));
        let one = T::one();

        for (idx, (name, param, grad)) in params.enumerate() {
            if !grad.iter().all(|g| g.is_finite()) {
                return Err(NumericsError::NonFiniteGradient { param: name.to_string() });
            }
            assert_eq!(param.len(), grad.len(), "grad shape for {name}");
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            assert_eq!(m.len(), param.len(), "moment shape for {name}");
            for i in 0..param.len() {
                m[i] = b1 * m[i] + (one - b1) * grad[i];
                v[i] = b2 * v[i] + (one - b2) * grad[i] * grad[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                param[i] = param[i] - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_is_fixed_point() {
        let mut state = AdamState::<f32>::new(AdamConfig::default(), &[3]);
        let mut p = vec![1.0f32, -2.0, 0.5];
        let g = vec![0.0f32; 3];
        state
            .step([("w", p.as_mut_slice(), g.as_slice())].into_iter())
            .unwrap();
        assert_eq!(p, vec![1.0, -2.0, 0.5]);
    }

    #[test]
    fn first_step_moves_by_about_lr() {
        // Hand evaluation of the recurrence: m_hat = v_hat = 1 at step 1,
        // so the update is lr / (1 + eps).
        let cfg = AdamConfig { lr: 0.1, ..Default::default() };
        let mut state = AdamState::<f32>::new(cfg, &[1]);
        let mut p = vec![1.0f32];
        let g = vec![1.0f32];
        state
            .step([("w", p.as_mut_slice(), g.as_slice())].into_iter())
            .unwrap();
        assert!((p[0] - 0.9).abs() < 1e-6, "{}", p[0]);
    }

    #[test]
    fn converges_on_quadratic() {
        // f(w) = w^2, grad = 2w, w0 = 1.
        let cfg = AdamConfig { lr: 0.05, ..Default::default() };
        let mut state = AdamState::<f32>::new(cfg, &[1]);
        let mut w = vec![1.0f32];
        for _ in 0..200 {
            let g = vec![2.0 * w[0]];
            state
                .step([("w", w.as_mut_slice(), g.as_slice())].into_iter())
                .unwrap();
        }
        assert!(w[0].abs() < 0.05, "w = {}", w[0]);
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let mut state = AdamState::<f32>::new(AdamConfig::default(), &[1]);
        let mut p = vec![1.0f32];
        let g = vec![f32::NAN];
        let err = state
            .step([("encoder.w_q", p.as_mut_slice(), g.as_slice())].into_iter())
            .unwrap_err();
        assert!(err.to_string().contains("encoder.w_q"));
    }

    #[test]
    fn step_counter_increments() {
        let mut state = AdamState::<f32>::new(AdamConfig::default(), &[1]);
        let mut p = vec![0.0f32];
        for expect in 1..=5u64 {
            let g = vec![0.1f32];
            state
                .step([("w", p.as_mut_slice(), g.as_slice())].into_iter())
                .unwrap();
            assert_eq!(state.step_count(), expect);
        }
    }
}
