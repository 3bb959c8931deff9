//! First-order optimisers over a parameter store.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::ParamStore;

fn beta1() -> f64 {
    0.9
}
fn beta2() -> f64 {
    0.999
}
fn eps() -> f64 {
    1e-8
}
fn weight_decay() -> f64 {
    0.01
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum OptimizerSpec {
    Sgd,
    Adam {
        #[serde(default = "beta1")]
        beta1: f64,
        #[serde(default = "beta2")]
        beta2: f64,
        #[serde(default = "eps")]
        eps: f64,
    },
    /// Adam with weight decay applied directly to the parameters.
    #[serde(rename = "adamw")]
    AdamW {
        #[serde(default = "beta1")]
        beta1: f64,
        #[serde(default = "beta2")]
        beta2: f64,
        #[serde(default = "eps")]
        eps: f64,
        #[serde(default = "weight_decay")]
        weight_decay: f64,
    },
}

impl OptimizerSpec {
    pub fn adam() -> Self {
        OptimizerSpec::Adam {
            beta1: beta1(),
            beta2: beta2(),
            eps: eps(),
        }
    }

    pub fn adamw() -> Self {
        OptimizerSpec::AdamW {
            beta1: beta1(),
            beta2: beta2(),
            eps: eps(),
            weight_decay: weight_decay(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let check = |b1: f64, b2: f64, e: f64| {
            if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) {
                return Err(Error::invalid("betas must lie in [0, 1)"));
            }
            if !(e > 0.0) {
                return Err(Error::invalid("eps must be positive"));
            }
            Ok(())
        };
        match *self {
            OptimizerSpec::Sgd => Ok(()),
            OptimizerSpec::Adam { beta1, beta2, eps } => check(beta1, beta2, eps),
            OptimizerSpec::AdamW {
                beta1,
                beta2,
                eps,
                weight_decay,
            } => {
                check(beta1, beta2, eps)?;
                if !(weight_decay >= 0.0) {
                    return Err(Error::invalid("weight_decay must be non-negative"));
                }
                Ok(())
            }
        }
    }
}

/// Optimiser state for one parameter store layout.
#[derive(Clone, Debug)]
pub struct Optimizer {
    spec: OptimizerSpec,
    m: ParamStore,
    v: ParamStore,
    t: i32,
}

impl Optimizer {
    pub fn new(spec: OptimizerSpec, params: &ParamStore) -> Result<Self> {
        spec.validate()?;
        Ok(Self {
            spec,
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        })
    }

    /// One update with learning rate `lr`; `grads` shares the layout of the
    /// store the optimiser was built for.
    pub fn step(&mut self, params: &mut ParamStore, grads: &ParamStore, lr: f64) {
        assert_eq!(params.len(), grads.len(), "gradient layout mismatch");
        self.t = self.t.saturating_add(1);
        let (b1, b2, eps, wd) = match self.spec {
            OptimizerSpec::Sgd => {
                for i in 0..params.len() {
                    let g = grads.by_index(i).1;
                    params.by_index_mut(i).zip_mut_with(g, |p, &g| *p -= lr * g);
                }
                return;
            }
            OptimizerSpec::Adam { beta1, beta2, eps } => (beta1, beta2, eps, 0.0),
            OptimizerSpec::AdamW {
                beta1,
                beta2,
                eps,
                weight_decay,
            } => (beta1, beta2, eps, weight_decay),
        };
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        for i in 0..params.len() {
            let g = grads.by_index(i).1;
            let m = self.m.by_index_mut(i);
            m.zip_mut_with(g, |m, &g| *m = b1 * *m + (1.0 - b1) * g);
            let v = self.v.by_index_mut(i);
            v.zip_mut_with(g, |v, &g| *v = b2 * *v + (1.0 - b2) * g * g);
            let (m, v) = (self.m.by_index(i).1, self.v.by_index(i).1);
            let p = params.by_index_mut(i);
            ndarray::Zip::from(p).and(m).and(v).for_each(|p, &m, &v| {
                let update = (m / c1) / ((v / c2).sqrt() + eps) + wd * *p;
                *p -= lr * update;
            });
        }
    }
}
