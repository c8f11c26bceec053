/// Adam with bias correction; the learning rate is supplied per step.
#[derive(Debug, Clone)]
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// Rebuilds a state saved with [`Adam::moments`].
    pub fn from_moments(m: Vec<f64>, v: Vec<f64>, t: i32) -> Self {
        assert_eq!(m.len(), v.len());
        Adam { m, v, t, ..Adam::new(0) }
    }

    /// First and second moment estimates and the step count.
    pub fn moments(&self) -> (&[f64], &[f64], i32) {
        (&self.m, &self.v, self.t)
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        self.step_with(params, grads, |_| lr);
    }

    /// Step with a per-coordinate learning rate.
    pub fn step_with(&mut self, params: &mut [f64], grads: &[f64], lr: impl Fn(usize) -> f64) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= lr(i) * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

/// `base · factor^⌊epoch / every⌋`.
pub fn step_decay_lr(base: f64, epoch: usize, every: usize, factor: f64) -> f64 {
    base * factor.powi((epoch / every.max(1)) as i32)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_is_noop() {
        let mut p = vec![1.0, -2.0, 3.5];
        let before = p.clone();
        let mut opt = Adam::new(3);
        for _ in 0..5 {
            opt.step(&mut p, &[0.0; 3], 0.1);
        }
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // m̂ = g, v̂ = g², so the step is lr·g/(|g| + eps)
        let mut p = vec![0.0; 3];
        let g = [0.5, -3.0, 1e3];
        Adam::new(3).step(&mut p, &g, 1e-3);
        for (x, gi) in p.iter().zip(g) {
            let expected = -1e-3 * gi / (gi.abs() + 1e-8);
            assert!((x - expected).abs() < 1e-15, "{x} vs {expected}");
        }
    }

    #[test]
    fn halving_schedule() {
        assert_eq!(step_decay_lr(1e-3, 0, 30, 0.5), 1e-3);
        assert_eq!(step_decay_lr(1e-3, 29, 30, 0.5), 1e-3);
        assert_eq!(step_decay_lr(1e-3, 30, 30, 0.5), 5e-4);
        assert_eq!(step_decay_lr(1e-3, 60, 30, 0.5), 2.5e-4);
    }
}
