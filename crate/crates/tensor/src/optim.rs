use crate::error::{Result, TensorError};
use crate::tensor::ParamSet;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            momentum: 0.9,
            weight_decay: 0.0,
        }
    }
}

/// Multiplies the learning rate by `factor` once the monitored loss has
/// failed to improve for `patience` consecutive epochs.
#[derive(Debug, Clone, PartialEq)]
pub struct PlateauDecay {
    pub patience: usize,
    pub factor: f64,
    pub best: f64,
    pub epochs_since_best: usize,
}

impl PlateauDecay {
    pub fn new(patience: usize, factor: f64) -> Self {
        Self {
            patience,
            factor,
            best: f64::INFINITY,
            epochs_since_best: 0,
        }
    }
}

/// Momentum SGD: `v <- momentum * v + grad`, `param <- param - lr * v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub config: SgdConfig,
    pub plateau: Option<PlateauDecay>,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(config: SgdConfig, params: &ParamSet) -> Result<Self> {
        if !(config.learning_rate > 0.0) {
            return Err(TensorError::InvalidArgument(format!(
                "learning rate must be positive, got {}",
                config.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&config.momentum) {
            return Err(TensorError::InvalidArgument(format!(
                "momentum must lie in [0, 1), got {}",
                config.momentum
            )));
        }
        Ok(Self {
            config,
            plateau: None,
            velocity: params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect(),
        })
    }

    pub fn with_plateau(mut self, patience: usize, factor: f64) -> Self {
        self.plateau = Some(PlateauDecay::new(patience, factor));
        self
    }

    pub fn learning_rate(&self) -> f64 {
        self.config.learning_rate
    }

    pub fn velocity(&self) -> &[Vec<f64>] {
        &self.velocity
    }

    pub fn step(&mut self, params: &mut ParamSet) -> Result<()> {
        if params.len() != self.velocity.len() {
            return Err(TensorError::InvalidArgument(format!(
                "optimizer tracks {} parameters, set has {}",
                self.velocity.len(),
                params.len()
            )));
        }
        let SgdConfig {
            learning_rate: lr,
            momentum,
            weight_decay,
        } = self.config;
        for (t, v) in params.tensors_mut().zip(&mut self.velocity) {
            if v.len() != t.numel() {
                return Err(TensorError::InvalidArgument("velocity shape drifted from parameter".into()));
            }
            let Some(grad) = t.grad.take() else { continue };
            for ((vi, gi), pi) in v.iter_mut().zip(&grad).zip(t.data().iter()) {
                *vi = momentum * *vi + gi + weight_decay * pi;
            }
            for (pi, vi) in t.data_mut().iter_mut().zip(v.iter()) {
                *pi -= lr * *vi;
            }
            t.grad = Some(grad);
        }
        Ok(())
    }

    /// Feeds one epoch's training loss to the plateau schedule. Returns
    /// `true` when the learning rate was decayed.
    pub fn observe_epoch_loss(&mut self, loss: f64) -> bool {
        let Some(p) = self.plateau.as_mut() else {
            return false;
        };
        if loss < p.best {
            p.best = loss;
            p.epochs_since_best = 0;
            return false;
        }
        p.epochs_since_best += 1;
        if p.epochs_since_best >= p.patience {
            p.epochs_since_best = 0;
            self.config.learning_rate *= p.factor;
            return true;
        }
        false
    }
}

/// 2-norm of all gradients concatenated. Missing gradients count as zero.
pub fn global_grad_norm(params: &ParamSet) -> f64 {
    params
        .iter()
        .filter_map(|(_, t)| t.grad.as_ref())
        .flat_map(|g| g.iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt()
}

/// Rescales every gradient by `max_norm / norm` when the global norm exceeds
/// `max_norm`. Returns the norm measured before clipping.
pub fn clip_global_norm(params: &mut ParamSet, max_norm: f64) -> Result<f64> {
    if !(max_norm > 0.0) {
        return Err(TensorError::InvalidArgument(format!("max_norm must be positive, got {max_norm}")));
    }
    let norm = global_grad_norm(params);
    if norm > max_norm {
        let s = max_norm / norm;
        for t in params.tensors_mut() {
            if let Some(g) = t.grad.as_mut() {
                g.iter_mut().for_each(|x| *x *= s);
            }
        }
    }
    Ok(norm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn one_param(value: f64, grad: f64) -> ParamSet {
        let mut ps = ParamSet::new();
        let id = ps.add("w", Tensor::new(vec![1], vec![value]).unwrap());
        ps.get_mut(id).grad = Some(vec![grad]);
        ps
    }

    fn grads(ps: &ParamSet) -> Vec<Vec<f64>> {
        ps.iter().map(|(_, t)| t.grad.clone().unwrap()).collect()
    }

    #[test]
    fn plain_sgd_step() {
        let mut ps = one_param(0.0, 1.0);
        let cfg = SgdConfig {
            learning_rate: 0.1,
            momentum: 0.0,
            weight_decay: 0.0,
        };
        Sgd::new(cfg, &ps).unwrap().step(&mut ps).unwrap();
        assert!((ps.flatten()[0] + 0.1).abs() < 1e-15);
    }

    #[test]
    fn momentum_two_steps() {
        let mut ps = one_param(0.0, 1.0);
        let cfg = SgdConfig {
            learning_rate: 0.1,
            momentum: 0.9,
            weight_decay: 0.0,
        };
        let mut opt = Sgd::new(cfg, &ps).unwrap();
        opt.step(&mut ps).unwrap();
        opt.step(&mut ps).unwrap();
        assert!((opt.velocity()[0][0] - 1.9).abs() < 1e-15);
        assert!((ps.flatten()[0] + 0.29).abs() < 1e-12);
    }

    #[test]
    fn plateau_decays_after_patience() {
        let ps = one_param(0.0, 0.0);
        let mut opt = Sgd::new(SgdConfig::default(), &ps).unwrap().with_plateau(10, 0.1);
        assert!(!opt.observe_epoch_loss(1.0));
        for _ in 0..9 {
            assert!(!opt.observe_epoch_loss(1.0));
        }
        assert!(opt.observe_epoch_loss(1.0));
        assert!((opt.learning_rate() - 0.001).abs() < 1e-15);
        // improvement resets the counter
        assert!(!opt.observe_epoch_loss(0.5));
    }

    #[test]
    fn rejects_bad_config() {
        let ps = one_param(0.0, 0.0);
        let mut cfg = SgdConfig::default();
        cfg.momentum = 1.0;
        assert!(Sgd::new(cfg, &ps).is_err());
        cfg.momentum = 0.5;
        cfg.learning_rate = 0.0;
        assert!(Sgd::new(cfg, &ps).is_err());
    }

    #[test]
    fn clip_leaves_small_norm() {
        let mut ps = ParamSet::new();
        let id = ps.add("w", Tensor::zeros(vec![2]));
        ps.get_mut(id).grad = Some(vec![3.0, 4.0]);
        assert_eq!(clip_global_norm(&mut ps, 100.0).unwrap(), 5.0);
        assert_eq!(grads(&ps), vec![vec![3.0, 4.0]]);
    }

    #[test]
    fn clip_rescales_exactly() {
        let mut ps = ParamSet::new();
        let id = ps.add("w", Tensor::zeros(vec![2]));
        ps.get_mut(id).grad = Some(vec![30.0, 40.0]);
        clip_global_norm(&mut ps, 5.0).unwrap();
        assert_eq!(grads(&ps), vec![vec![3.0, 4.0]]);
    }

    #[test]
    fn clip_is_global() {
        let mut ps = ParamSet::new();
        let a = ps.add("a", Tensor::zeros(vec![2]));
        let b = ps.add("b", Tensor::zeros(vec![2]));
        ps.get_mut(a).grad = Some(vec![1.0, 0.0]);
        ps.get_mut(b).grad = Some(vec![0.0, 1.0]);
        clip_global_norm(&mut ps, 1.0).unwrap();
        let s = 1.0 / 2f64.sqrt();
        let g = grads(&ps);
        assert!((g[0][0] - s).abs() < 1e-15 && (g[1][1] - s).abs() < 1e-15);
        assert!(clip_global_norm(&mut ps, 0.0).is_err());
        assert!(clip_global_norm(&mut ps, -1.0).is_err());
    }
}
