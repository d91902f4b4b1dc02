use serde::{Deserialize, Serialize};

use super::{shape_err, NnError, Result, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd { lr: f64 },
    Adam { lr: f64, beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn adam(lr: f64) -> Self {
        OptimizerKind::Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    pub fn lr(&self) -> f64 {
        match *self {
            OptimizerKind::Sgd { lr } | OptimizerKind::Adam { lr, .. } => lr,
        }
    }
}

/// First-order optimizer with an optional per-epoch exponential learning-rate decay.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    decay: Option<f64>,
    epoch: u32,
    t: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind) -> Result<Self> {
        let ok = match kind {
            OptimizerKind::Sgd { lr } => lr.is_finite() && lr >= 0.0,
            OptimizerKind::Adam { lr, beta1, beta2, eps } => {
                lr.is_finite()
                    && lr >= 0.0
                    && (0.0..1.0).contains(&beta1)
                    && (0.0..1.0).contains(&beta2)
                    && eps > 0.0
            }
        };
        if !ok {
            return Err(NnError::Config(format!("invalid optimizer settings {kind:?}")));
        }
        Ok(Self { kind, decay: None, epoch: 0, t: 0, m: Vec::new(), v: Vec::new() })
    }

    pub fn with_decay(mut self, rate: f64) -> Result<Self> {
        if !(rate > 0.0 && rate <= 1.0) {
            return Err(NnError::Config(format!("decay rate must be in (0, 1], got {rate}")));
        }
        self.decay = Some(rate);
        Ok(self)
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn current_lr(&self) -> f64 {
        self.kind.lr() * self.decay.map_or(1.0, |r| r.powi(self.epoch as i32))
    }

    pub fn end_epoch(&mut self) {
        self.epoch += 1;
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Applies one update. Rejects the whole step, leaving parameters and
    /// moments untouched, if any gradient entry is non-finite.
    pub fn step(&mut self, mut params: Vec<&mut Tensor>, grads: &[Tensor]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(shape_err("optimizer tensor count", &[params.len()], &[grads.len()]));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(shape_err("optimizer gradient", p.shape(), g.shape()));
            }
            if g.data().iter().any(|v| !v.is_finite()) {
                return Err(NnError::NonFiniteGradient(i));
            }
        }
        let lr = self.current_lr();
        self.t += 1;
        match self.kind {
            OptimizerKind::Sgd { .. } => {
                for (p, g) in params.iter_mut().zip(grads) {
                    for (w, d) in p.data_mut().iter_mut().zip(g.data()) {
                        *w -= lr * d;
                    }
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps, .. } => {
                if self.m.is_empty() {
                    self.m = grads.iter().map(|g| Tensor::zeros(g.shape())).collect();
                    self.v = self.m.clone();
                }
                let c1 = 1.0 - beta1.powi(self.t as i32);
                let c2 = 1.0 - beta2.powi(self.t as i32);
                for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
                    for (((w, d), mi), vi) in
                        p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut())
                    {
                        *mi = beta1 * *mi + (1.0 - beta1) * d;
                        *vi = beta2 * *vi + (1.0 - beta2) * d * d;
                        *w -= lr * (*mi / c1) / ((*vi / c2).sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_step() {
        let mut p = Tensor::vector(vec![1.0, 2.0]);
        let g = Tensor::vector(vec![0.5, -1.0]);
        let mut opt = Optimizer::new(OptimizerKind::Sgd { lr: 0.1 }).unwrap();
        opt.step(vec![&mut p], &[g]).unwrap();
        assert_eq!(p.data(), &[0.95, 2.1]);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        // Bias correction makes the first Adam step ±lr per coordinate.
        let mut p = Tensor::vector(vec![0.0, 0.0]);
        let g = Tensor::vector(vec![3.0, -0.01]);
        let mut opt = Optimizer::new(OptimizerKind::adam(1e-3)).unwrap();
        opt.step(vec![&mut p], &[g]).unwrap();
        assert!((p.data()[0] + 1e-3).abs() < 1e-9);
        assert!((p.data()[1] - 1e-3).abs() < 1e-6);
    }

    #[test]
    fn decay_compounds_per_epoch() {
        let mut opt = Optimizer::new(OptimizerKind::adam(1e-3)).unwrap().with_decay(0.95).unwrap();
        opt.end_epoch();
        opt.end_epoch();
        assert!((opt.current_lr() - 1e-3 * 0.95 * 0.95).abs() < 1e-18);
    }

    #[test]
    fn non_finite_gradient_rejected_without_update() {
        let mut p = Tensor::vector(vec![1.0]);
        let mut opt = Optimizer::new(OptimizerKind::adam(1e-3)).unwrap();
        let err = opt.step(vec![&mut p], &[Tensor::vector(vec![f64::NAN])]).unwrap_err();
        assert_eq!(err, NnError::NonFiniteGradient(0));
        assert_eq!(p.data(), &[1.0]);
        assert_eq!(opt.steps(), 0);
    }

    #[test]
    fn sgd_small_rate_unit_gradient() {
        let mut p = Tensor::vector(vec![0.25]);
        let mut opt = Optimizer::new(OptimizerKind::Sgd { lr: 1e-5 }).unwrap();
        opt.step(vec![&mut p], &[Tensor::vector(vec![1.0])]).unwrap();
        assert_eq!(p.data()[0], 0.25 - 1e-5);
    }

    #[test]
    fn adam_zero_gradient_is_a_no_op() {
        let mut p = Tensor::vector(vec![1.5, -2.0]);
        let mut opt = Optimizer::new(OptimizerKind::adam(1e-3)).unwrap();
        for _ in 0..10 {
            opt.step(vec![&mut p], &[Tensor::zeros(&[2])]).unwrap();
        }
        assert_eq!(p.data(), &[1.5, -2.0]);
    }

    #[test]
    fn adam_minimizes_a_convex_quadratic() {
        // f(p) = ½ Σ a_i (p_i − c_i)²
        let a = [1.0, 4.0, 0.5];
        let c = [0.3, -0.2, 0.1];
        let grad = |p: &Tensor| Tensor::vector((0..3).map(|i| a[i] * (p.data()[i] - c[i])).collect());
        let mut p = Tensor::vector(vec![0.0; 3]);
        let mut opt = Optimizer::new(OptimizerKind::adam(0.05)).unwrap().with_decay(0.7).unwrap();
        for step in 0..100 {
            let g = grad(&p);
            opt.step(vec![&mut p], &[g]).unwrap();
            if step % 10 == 9 {
                opt.end_epoch();
            }
        }
        let norm = grad(&p).data().iter().map(|g| g * g).sum::<f64>().sqrt();
        assert!(norm < 1e-3, "gradient norm {norm}");
    }
}
