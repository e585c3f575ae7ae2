//! AdamW with decoupled weight decay and bias correction.

use super::Tensor;

/// Per-parameter first/second moment state, keyed by position in the
/// parameter list handed to [`AdamW::step`]. The list must be stable across
/// steps (same tensors, same order).
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(lr: f64, betas: (f64, f64), weight_decay: f64) -> AdamW {
        AdamW {
            lr,
            beta1: betas.0,
            beta2: betas.1,
            eps: 1e-8,
            weight_decay,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// One update over `params`, consuming their accumulated gradients.
    /// Parameters without a gradient are treated as having zero gradient
    /// (their value still decays when `weight_decay > 0`).
    pub fn step(&mut self, params: &[Tensor]) {
        if self.m.len() != params.len() {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = params.iter().map(|p| vec![0.0; p.len()]).collect();
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);

        for (idx, param) in params.iter().enumerate() {
            let grad = param.grad();
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            param.apply_update(|i, value| {
                let g = grad.as_ref().map_or(0.0, |g| g[i]);
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                *value -= self.lr * (m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * *value);
            });
        }
    }

    pub fn zero_grad(&self, params: &[Tensor]) {
        for p in params {
            p.zero_grad();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_grad_and_zero_decay_leave_params_unchanged() {
        let p = Tensor::from_vec(&[2], vec![1.0, -2.0]).unwrap().requires_grad();
        let mut opt = AdamW::new(0.1, (0.9, 0.999), 0.0);
        opt.step(std::slice::from_ref(&p));
        assert_eq!(p.to_vec(), vec![1.0, -2.0]);
    }

    #[test]
    fn one_step_decreases_a_quadratic() {
        let w = Tensor::from_vec(&[1], vec![3.0]).unwrap().requires_grad();
        let mut opt = AdamW::new(0.05, (0.9, 0.999), 0.0);
        let f = |w: &Tensor| w.mul(w).unwrap().sum();
        let before = f(&w).item();
        let loss = f(&w);
        loss.backward().unwrap();
        opt.step(std::slice::from_ref(&w));
        let after = f(&w).item();
        assert!(after < before, "{after} !< {before}");
    }

    #[test]
    fn matches_hand_stepped_scalar_trace() {
        // f(w) = w^2 from w0 = 1.0, lr = 0.1, betas (0.9, 0.999), no decay.
        // Expected trace computed by hand from the update equations:
        //   g_t = 2 w_{t-1}
        //   m_t = 0.9 m_{t-1} + 0.1 g_t       v_t = 0.999 v_{t-1} + 0.001 g_t^2
        //   w_t = w_{t-1} - 0.1 * (m_t / (1-0.9^t)) / (sqrt(v_t / (1-0.999^t)) + 1e-8)
        let lr = 0.1;
        let (b1, b2) = (0.9, 0.999);
        let eps = 1e-8;
        let mut w_ref: f64 = 1.0;
        let (mut m, mut v) = (0.0_f64, 0.0_f64);
        let mut expected = Vec::new();
        for t in 1..=3 {
            let g = 2.0 * w_ref;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let m_hat = m / (1.0 - b1.powi(t));
            let v_hat = v / (1.0 - b2.powi(t));
            w_ref -= lr * m_hat / (v_hat.sqrt() + eps);
            expected.push(w_ref);
        }

        let w = Tensor::from_vec(&[1], vec![1.0]).unwrap().requires_grad();
        let mut opt = AdamW::new(lr, (b1, b2), 0.0);
        let mut got = Vec::new();
        for _ in 0..3 {
            let loss = w.mul(&w).unwrap().sum();
            loss.backward().unwrap();
            opt.step(std::slice::from_ref(&w));
            opt.zero_grad(std::slice::from_ref(&w));
            got.push(w.to_vec()[0]);
        }
        for (g, e) in got.iter().zip(&expected) {
            assert!((g - e).abs() < 1e-12, "{g} vs {e}");
        }
    }

    #[test]
    fn weight_decay_shrinks_without_gradient() {
        let p = Tensor::from_vec(&[1], vec![2.0]).unwrap().requires_grad();
        let mut opt = AdamW::new(0.1, (0.9, 0.999), 0.5);
        opt.step(std::slice::from_ref(&p));
        // decoupled decay: w -= lr * wd * w
        assert!((p.to_vec()[0] - (2.0 - 0.1 * 0.5 * 2.0)).abs() < 1e-12);
    }
}
