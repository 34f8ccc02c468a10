use super::graph::Graph;
use super::params::{ParamId, ParamStore};
use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moments are created lazily per parameter.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Option<Tensor>>,
    v: Vec<Option<Tensor>>,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        AdamState {
            config,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, id: ParamId) -> Option<&Tensor> {
        self.m.get(id.0).and_then(Option::as_ref)
    }

    pub fn second_moment(&self, id: ParamId) -> Option<&Tensor> {
        self.v.get(id.0).and_then(Option::as_ref)
    }

    /// Apply one update from explicit gradients. Every gradient is checked
    /// before any parameter changes; a non-finite value aborts the step.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, &Tensor)]) -> Result<()> {
        if self.config.lr <= 0.0 || !self.config.lr.is_finite() {
            return Err(Error::Config(format!(
                "adam learning rate must be positive, got {}",
                self.config.lr
            )));
        }
        for (id, g) in grads {
            if g.shape() != store.value(*id).shape() {
                return Err(Error::Shape {
                    op: "adam_step",
                    lhs: store.value(*id).shape(),
                    rhs: g.shape(),
                });
            }
            if !g.all_finite() {
                return Err(Error::NonFiniteGradient {
                    id: id.0,
                    name: store.name(*id).to_string(),
                });
            }
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        if self.m.len() < store.len() {
            self.m.resize(store.len(), None);
            self.v.resize(store.len(), None);
        }
        for (id, g) in grads {
            if !store.is_trainable(*id) {
                continue;
            }
            let s = g.shape();
            let m = self.m[id.0].get_or_insert_with(|| Tensor::zeros(s.rows, s.cols));
            let v = self.v[id.0].get_or_insert_with(|| Tensor::zeros(s.rows, s.cols));
            let p = store.value_mut(*id);
            let (md, vd, pd) = (m.data_mut(), v.data_mut(), p.data_mut());
            for (k, gv) in g.data().iter().enumerate() {
                md[k] = beta1 * md[k] + (1.0 - beta1) * gv;
                vd[k] = beta2 * vd[k] + (1.0 - beta2) * gv * gv;
                let mhat = md[k] / bc1;
                let vhat = vd[k] / bc2;
                pd[k] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }

    /// Step using the gradients accumulated in `graph`. Parameters the loss
    /// did not reach receive a zero gradient.
    pub fn step_graph(&mut self, store: &mut ParamStore, graph: &Graph) -> Result<()> {
        let zeros: Vec<(ParamId, Tensor)> = graph
            .param_grads()
            .into_iter()
            .filter(|(_, g)| g.is_none())
            .map(|(id, _)| {
                let s = store.value(id).shape();
                (id, Tensor::zeros(s.rows, s.cols))
            })
            .collect();
        let mut grads: Vec<(ParamId, &Tensor)> = graph
            .param_grads()
            .into_iter()
            .filter_map(|(id, g)| g.map(|g| (id, g)))
            .collect();
        grads.extend(zeros.iter().map(|(id, t)| (*id, t)));
        grads.sort_by_key(|(id, _)| *id);
        self.step(store, &grads)
    }
}
