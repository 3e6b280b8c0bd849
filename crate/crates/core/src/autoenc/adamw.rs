/// AdamW with decoupled weight decay (Loshchilov & Hutter): the decay is
/// applied to the parameter directly, not folded into the gradient moments.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update of every parameter block against its gradient block.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[Vec<f64>]) {
        assert_eq!(params.len(), grads.len(), "parameter/gradient block count");
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let decay = 1.0 - self.lr * self.weight_decay;
        for (b, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[b], &mut self.v[b]);
            for k in 0..p.len() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g[k];
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g[k] * g[k];
                let m_hat = m[k] / bc1;
                let v_hat = v[k] / bc2;
                p[k] = p[k] * decay - self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_decays_geometrically() {
        let mut opt = AdamW::new(1e-2, 0.5);
        let mut p = vec![1.0, -2.0];
        let g = vec![vec![0.0, 0.0]];
        for step in 1..=10 {
            opt.step(&mut [p.as_mut_slice()], &g);
            let f = (1.0 - 1e-2 * 0.5f64).powi(step);
            assert_eq!(p[0], (0..step).fold(1.0, |a, _| a * (1.0 - 1e-2 * 0.5)));
            assert!((p[1] + 2.0 * f).abs() < 1e-15);
        }
    }

    #[test]
    fn first_step_moves_by_lr_against_sign() {
        // bias correction makes the first step ±lr regardless of |g|
        let mut opt = AdamW::new(0.1, 0.0);
        let mut p = vec![0.0, 0.0];
        opt.step(&mut [p.as_mut_slice()], &[vec![3.0, -1e-3]]);
        assert!((p[0] + 0.1).abs() < 1e-6);
        assert!((p[1] - 0.1).abs() < 1e-4);
        assert_eq!(opt.steps_taken(), 1);
    }

    #[test]
    fn minimises_a_quadratic() {
        let mut opt = AdamW::new(0.05, 0.0);
        let mut p = vec![3.0];
        for _ in 0..2000 {
            let g = vec![vec![2.0 * (p[0] - 1.0)]];
            opt.step(&mut [p.as_mut_slice()], &g);
        }
        assert!((p[0] - 1.0).abs() < 1e-3);
    }
}
