//! AdamW with decoupled weight decay and bias correction.

use super::Element;

#[derive(Debug, Clone)]
pub struct AdamW<E: Element> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: u64,
    m: Vec<Vec<E>>,
    v: Vec<Vec<E>>,
}

impl<E: Element> AdamW<E> {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamW { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, t: 0, m: Vec::new(), v: Vec::new() }
    }

    /// Advance the shared step counter; call once per optimization step,
    /// before the per-parameter updates.
    pub fn begin_step(&mut self) {
        self.t += 1;
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// Update one parameter slice. `idx` must be stable across steps; moment
    /// buffers are created lazily in index order.
    pub fn update(&mut self, idx: usize, param: &mut [E], grad: &[E]) {
        debug_assert_eq!(param.len(), grad.len());
        while self.m.len() <= idx {
            self.m.push(Vec::new());
            self.v.push(Vec::new());
        }
        if self.m[idx].is_empty() {
            self.m[idx] = vec![E::zero(); param.len()];
            self.v[idx] = vec![E::zero(); param.len()];
        }
        let b1 = E::from_f64(self.beta1);
        let b2 = E::from_f64(self.beta2);
        let one = E::one();
        let lr = E::from_f64(self.lr);
        let eps = E::from_f64(self.eps);
        let bc1 = E::from_f64(1.0 - self.beta1.powi(self.t as i32));
        let bc2 = E::from_f64(1.0 - self.beta2.powi(self.t as i32));
        let decay = E::from_f64(1.0 - self.lr * self.weight_decay);
        let m = &mut self.m[idx];
        let v = &mut self.v[idx];
        for i in 0..param.len() {
            let g = grad[i];
            m[i] = b1 * m[i] + (one - b1) * g;
            v[i] = b2 * v[i] + (one - b2) * g * g;
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            // decoupled decay is applied to the parameter, not the gradient
            param[i] = param[i] * decay - lr * mhat / (vhat.sqrt() + eps);
        }
    }

    pub fn state(&self) -> (&[Vec<E>], &[Vec<E>], u64) {
        (&self.m, &self.v, self.t)
    }

    pub fn restore_state(&mut self, m: Vec<Vec<E>>, v: Vec<Vec<E>>, t: u64) {
        self.m = m;
        self.v = v;
        self.t = t;
    }
}
