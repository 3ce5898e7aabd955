//! Adam with one learning rate per parameter group.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{Model, ModelGrads, ParamGroup};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr_adapter: f64,
    pub lr_disc: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr_adapter: 1e-4,
            lr_disc: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr_adapter >= 0.0
            && self.lr_disc >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer config {self:?}")))
        }
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    cfg: OptimConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl Adam {
    pub fn new(model: &Model, cfg: OptimConfig) -> Self {
        let shapes: Vec<usize> = model.param_slices().iter().map(|(_, s)| s.len()).collect();
        Adam {
            cfg,
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, model: &mut Model, grads: &ModelGrads) {
        self.t += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        let gs = grads.slices();
        for (((group, p), g), (m, v)) in model
            .param_slices_mut()
            .into_iter()
            .zip(gs)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let lr = match group {
                ParamGroup::Adapter => c.lr_adapter,
                ParamGroup::Discriminator => c.lr_disc,
            };
            for i in 0..p.len() {
                let gi = g[i] + c.weight_decay * p[i];
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gi;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gi * gi;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                p[i] -= lr * mh / (vh.sqrt() + c.eps);
            }
        }
    }
}
