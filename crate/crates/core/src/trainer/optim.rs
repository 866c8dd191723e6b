use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::segnet::ParamSet;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerKind {
    Sgd { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl OptimizerKind {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            OptimizerKind::Sgd { momentum } => (0.0..1.0).contains(&momentum),
            OptimizerKind::Adam { beta1, beta2, eps } => {
                (0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0
            }
        };
        if !ok {
            return Err(Error::config("optimizer", format!("{self:?} is out of range")));
        }
        Ok(())
    }
}

/// Optimizer state for one parameter set.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    weight_decay: f64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
    steps: i32,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, weight_decay: f64, params: &ParamSet) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        Self {
            kind,
            lr,
            weight_decay,
            second: if matches!(kind, OptimizerKind::Adam { .. }) { zeros.clone() } else { Vec::new() },
            first: zeros,
            steps: 0,
        }
    }

    /// One update. `grads[i]` is `None` for parameters that received no
    /// gradient; they still decay and coast on momentum.
    ///
    /// SGD: `v ← μ·v + g`, `θ ← θ - lr·v`. Adam: bias-corrected moments.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Option<Tensor>]) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::ParamMismatch(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        self.steps += 1;
        let (lr, wd) = (self.lr, self.weight_decay);
        for (i, theta) in params.tensors_mut().enumerate() {
            let g = grads[i].as_ref();
            let m = self.first[i].data_mut();
            let th = theta.data_mut();
            let grad_at = |k: usize, th: f64| g.map_or(0.0, |g| g.data()[k]) + wd * th;
            match self.kind {
                OptimizerKind::Sgd { momentum } => {
                    for k in 0..th.len() {
                        m[k] = momentum * m[k] + grad_at(k, th[k]);
                        th[k] -= lr * m[k];
                    }
                }
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    let v = self.second[i].data_mut();
                    let c1 = 1.0 - beta1.powi(self.steps);
                    let c2 = 1.0 - beta2.powi(self.steps);
                    for k in 0..th.len() {
                        let gk = grad_at(k, th[k]);
                        m[k] = beta1 * m[k] + (1.0 - beta1) * gk;
                        v[k] = beta2 * v[k] + (1.0 - beta2) * gk * gk;
                        th[k] -= lr * (m[k] / c1) / ((v[k] / c2).sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}
