use robustsim_autodiff::Tensor;

/// Heavy-ball SGD: `v = mu * v + g`, `p -= lr * v`, with optional
/// rescaling of the joint gradient to a maximum l2 norm.
#[derive(Debug, Clone)]
pub struct MomentumSgd {
    lr: f64,
    momentum: f64,
    clip_norm: Option<f64>,
    velocity: Vec<Vec<f64>>,
}

impl MomentumSgd {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Self {
            lr,
            momentum,
            clip_norm: None,
            velocity: Vec::new(),
        }
    }

    pub fn with_clip_norm(mut self, clip: Option<f64>) -> Self {
        self.clip_norm = clip;
        self
    }

    /// Updates `params` in place from same-shaped `grads`.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) {
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| vec![0.0; p.len()]).collect();
        }
        let norm = grads.iter().map(|g| g.data().iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt();
        let scale = match self.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            for ((p, &g), v) in p.data_mut().iter_mut().zip(g.data()).zip(v.iter_mut()) {
                *v = self.momentum * *v + scale * g;
                *p -= self.lr * *v;
            }
        }
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((p, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
            }
        }
    }
}

/// Outer optimizer choice for training loops.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

/// Either optimizer behind one `step`.
#[derive(Debug, Clone)]
pub enum Optimizer {
    Sgd(MomentumSgd),
    Adam(Adam),
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, momentum: f64, clip_norm: Option<f64>) -> Self {
        match kind {
            OptimizerKind::Sgd => Optimizer::Sgd(MomentumSgd::new(lr, momentum).with_clip_norm(clip_norm)),
            OptimizerKind::Adam => Optimizer::Adam(Adam::new(lr)),
        }
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) {
        match self {
            Optimizer::Sgd(o) => o.step(params, grads),
            Optimizer::Adam(o) => o.step(params, grads),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimizes_a_quadratic() {
        let mut opt = MomentumSgd::new(0.1, 0.9);
        let mut p = vec![Tensor::from_vec(vec![3.0, -2.0])];
        for _ in 0..500 {
            let g = vec![p[0].map(|v| 2.0 * v)];
            opt.step(&mut p, &g);
        }
        assert!(p[0].l2_norm() < 1e-6);
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut opt = Adam::new(0.05);
        let mut p = vec![Tensor::from_vec(vec![3.0, -2.0])];
        for _ in 0..2000 {
            let g = vec![p[0].map(|v| 2.0 * v)];
            opt.step(&mut p, &g);
        }
        assert!(p[0].l2_norm() < 1e-3);
    }

    #[test]
    fn clipping_bounds_the_first_step() {
        let mut opt = MomentumSgd::new(1.0, 0.0).with_clip_norm(Some(0.5));
        let mut p = vec![Tensor::from_vec(vec![0.0, 0.0])];
        opt.step(&mut p, &[Tensor::from_vec(vec![30.0, 40.0])]);
        assert!((p[0].l2_norm() - 0.5).abs() < 1e-12);
    }
}
