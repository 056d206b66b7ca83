//! Adam with per-entry freezing.

#[derive(Clone, Debug)]
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    steps: i32,
    slots: Vec<(Vec<f64>, Vec<f64>)>,
}

impl Adam {
    /// One moment slot per parameter tensor, sized by `sizes`.
    pub fn new(sizes: &[usize]) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            steps: 0,
            slots: sizes.iter().map(|&n| (vec![0.0; n], vec![0.0; n])).collect(),
        }
    }

    /// Advances the bias-correction clock; call once per optimizer step.
    pub fn begin_step(&mut self) {
        self.steps += 1;
    }

    /// Descends `param` along `grad`. Entries whose `active` flag is 0 are
    /// left untouched, moments included.
    pub fn apply(&mut self, slot: usize, param: &mut [f64], grad: &[f64], lr: f64, active: Option<&[f64]>) {
        let (m, v) = &mut self.slots[slot];
        let c1 = 1.0 - self.beta1.powi(self.steps);
        let c2 = 1.0 - self.beta2.powi(self.steps);
        for i in 0..param.len() {
            if active.is_some_and(|a| a[i] == 0.0) {
                continue;
            }
            let g = grad[i];
            m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
            v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
            let mhat = m[i] / c1;
            let vhat = v[i] / c2;
            param[i] -= lr * mhat / (vhat.sqrt() + self.eps);
        }
    }
}
