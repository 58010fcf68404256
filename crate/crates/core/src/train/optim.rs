//! Nesterov SGD and Adam with coupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ParamKind;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    SgdNesterov,
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_betas")]
    pub betas: (f64, f64),
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default = "default_true")]
    pub decay_excludes_coefficients: bool,
}

fn default_momentum() -> f64 {
    0.9
}

fn default_betas() -> (f64, f64) {
    (0.9, 0.999)
}

fn default_eps() -> f64 {
    1e-8
}

fn default_true() -> bool {
    true
}

impl OptimizerConfig {
    pub fn adam(lr: f64) -> Self {
        Self {
            kind: OptimizerKind::Adam,
            lr,
            momentum: default_momentum(),
            betas: default_betas(),
            eps: default_eps(),
            weight_decay: 0.0,
            decay_excludes_coefficients: true,
        }
    }

    pub fn sgd_nesterov(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Self {
            kind: OptimizerKind::SgdNesterov,
            momentum,
            weight_decay,
            ..Self::adam(lr)
        }
    }

    /// Every violated constraint, as human-readable messages.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            v.push(format!("optimizer.lr must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            v.push(format!("optimizer.momentum must be in [0, 1), got {}", self.momentum));
        }
        for (name, b) in [("betas.0", self.betas.0), ("betas.1", self.betas.1)] {
            if !(0.0..1.0).contains(&b) {
                v.push(format!("optimizer.{name} must be in [0, 1), got {b}"));
            }
        }
        if !(self.eps > 0.0) {
            v.push(format!("optimizer.eps must be positive, got {}", self.eps));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            v.push(format!(
                "optimizer.weight_decay must be non-negative, got {}",
                self.weight_decay
            ));
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v))
        }
    }

    fn decays(&self, kind: ParamKind) -> bool {
        self.weight_decay > 0.0
            && !(kind == ParamKind::Coefficient && self.decay_excludes_coefficients)
    }
}

/// Per-parameter moment buffers. For SGD only `m` (the velocity) is used.
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer {
    pub config: OptimizerConfig,
    pub steps: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            steps: 0,
            m: Vec::new(),
            v: Vec::new(),
        })
    }

    /// Applies one update. `params` and `grads` are matched by position; the
    /// state buffers are created on the first call.
    pub fn step(
        &mut self,
        params: &mut [(String, ParamKind, &mut Tensor)],
        grads: &[Tensor],
        lr: f64,
    ) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Dimension(format!(
                "{} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|(_, _, p)| Tensor::zeros(p.shape())).collect();
            if self.config.kind == OptimizerKind::Adam {
                self.v = self.m.clone();
            }
        }
        if self.m.len() != params.len() {
            return Err(Error::Dimension(format!(
                "optimizer tracks {} tensors, step received {}",
                self.m.len(),
                params.len()
            )));
        }
        for (i, ((name, _, p), g)) in params.iter().zip(grads).enumerate() {
            for found in [g.shape(), self.m[i].shape()] {
                if found != p.shape() {
                    return Err(Error::TensorShape {
                        name: name.clone(),
                        expected: p.shape().to_vec(),
                        found: found.to_vec(),
                    });
                }
            }
        }
        self.steps += 1;
        let cfg = &self.config;
        match cfg.kind {
            OptimizerKind::SgdNesterov => {
                let mu = cfg.momentum;
                for (i, ((_, kind, p), g)) in params.iter_mut().zip(grads).enumerate() {
                    let decay = if cfg.decays(*kind) { cfg.weight_decay } else { 0.0 };
                    let vel = self.m[i].data_mut();
                    for ((w, &gr), v) in p.data_mut().iter_mut().zip(g.data()).zip(vel) {
                        let gt = gr + decay * *w;
                        *v = mu * *v + gt;
                        *w -= lr * (gt + mu * *v);
                    }
                }
            }
            OptimizerKind::Adam => {
                let (b1, b2) = cfg.betas;
                let t = self.steps as i32;
                let c1 = 1.0 - b1.powi(t);
                let c2 = 1.0 - b2.powi(t);
                for (i, ((_, kind, p), g)) in params.iter_mut().zip(grads).enumerate() {
                    let decay = if cfg.decays(*kind) { cfg.weight_decay } else { 0.0 };
                    let m = self.m[i].data_mut();
                    let v = self.v[i].data_mut();
                    for (j, (w, &gr)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                        let gt = gr + decay * *w;
                        m[j] = b1 * m[j] + (1.0 - b1) * gt;
                        v[j] = b2 * v[j] + (1.0 - b2) * gt * gt;
                        let mhat = m[j] / c1;
                        let vhat = v[j] / c2;
                        *w -= lr * mhat / (vhat.sqrt() + cfg.eps);
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

    fn one(v: f64) -> Tensor {
        Tensor::new(&[1], vec![v]).unwrap()
    }

    fn step(opt: &mut Optimizer, w: &mut Tensor, kind: ParamKind, g: f64, lr: f64) {
        let mut params = vec![("w".to_string(), kind, w)];
        opt.step(&mut params, &[one(g)], lr).unwrap();
    }

    #[test]
    fn plain_sgd() {
        let mut opt = Optimizer::new(OptimizerConfig::sgd_nesterov(0.1, 0.0, 0.0)).unwrap();
        let mut w = one(1.0);
        step(&mut opt, &mut w, ParamKind::Weight, 0.5, 0.1);
        assert!((w.data()[0] - 0.95).abs() < 1e-15);
    }

    #[test]
    fn coefficient_decay_exclusion() {
        let mut with = Optimizer::new(OptimizerConfig::sgd_nesterov(0.1, 0.9, 5e-4)).unwrap();
        let mut without = Optimizer::new(OptimizerConfig::sgd_nesterov(0.1, 0.9, 0.0)).unwrap();
        let (mut a, mut b) = (one(0.7), one(0.7));
        for g in [0.3, -0.2, 0.1] {
            step(&mut with, &mut a, ParamKind::Coefficient, g, 0.1);
            step(&mut without, &mut b, ParamKind::Coefficient, g, 0.1);
        }
        assert_eq!(a, b);
        let mut c = one(0.7);
        let mut decayed = Optimizer::new(OptimizerConfig::sgd_nesterov(0.1, 0.9, 5e-4)).unwrap();
        step(&mut decayed, &mut c, ParamKind::Weight, 0.3, 0.1);
        assert_ne!(c.data()[0], 0.7 - 0.1 * (0.3 + 0.9 * 0.3));
    }

    #[test]
    fn adam_first_step() {
        let mut opt = Optimizer::new(OptimizerConfig::adam(0.01)).unwrap();
        let mut w = one(0.0);
        step(&mut opt, &mut w, ParamKind::Weight, 1.0, 0.01);
        assert!((w.data()[0] + 0.01 / (1.0 + 1e-8)).abs() < 1e-15);
    }

    #[test]
    fn adam_zero_gradient_is_noop() {
        let mut opt = Optimizer::new(OptimizerConfig::adam(0.01)).unwrap();
        let mut w = one(3.0);
        for _ in 0..3 {
            step(&mut opt, &mut w, ParamKind::Weight, 0.0, 0.01);
        }
        assert_eq!(w.data()[0], 3.0);
    }

    #[test]
    fn invalid_configs_list_every_violation() {
        let mut cfg = OptimizerConfig::adam(-1.0);
        cfg.momentum = 1.0;
        cfg.betas = (0.9, 1.2);
        match cfg.validate() {
            Err(Error::Config(v)) => assert_eq!(v.len(), 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn shape_mismatch_names_tensor() {
        let mut opt = Optimizer::new(OptimizerConfig::adam(0.01)).unwrap();
        let mut w = Tensor::zeros(&[2]);
        let mut params = vec![("layer0.kernel".to_string(), ParamKind::Weight, &mut w)];
        match opt.step(&mut params, &[one(1.0)], 0.01) {
            Err(Error::TensorShape { name, .. }) => assert_eq!(name, "layer0.kernel"),
            other => panic!("{other:?}"),
        }
    }
}
