//! AdamW with decoupled weight decay.
//!
//! Training uses unusually aggressive moment constants (`beta1 = 0.8`,
//! `beta2 = 0.99`) — the GAN-style objective benefits from short moment
//! memory — with weight decay `1e-5`. The learning rate itself is owned
//! by the caller (the trainer applies its epoch decay schedule before
//! each step).

use crate::nn::params::ParamSet;
use ndarray::Array2;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.8,
            beta2: 0.99,
            eps: 1e-8,
            weight_decay: 1e-5,
        }
    }
}

/// Optimizer state: first/second moment per parameter plus the step
/// counter used for bias correction.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
    t: u64,
}

impl AdamW {
    pub fn new(params: &ParamSet, cfg: AdamWConfig) -> Self {
        AdamW {
            cfg,
            m: params.zero_grads(),
            v: params.zero_grads(),
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One update over all parameters. `grads` is indexed like the
    /// parameter set (`ParamId::index`).
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Array2<f64>], lr: f64) {
        assert_eq!(grads.len(), params.len(), "gradient count mismatch");
        self.t += 1;
        let b1 = self.cfg.beta1;
        let b2 = self.cfg.beta2;
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        for id in params.ids().collect::<Vec<_>>() {
            let i = id.index();
            let g = &grads[i];
            self.m[i].zip_mut_with(g, |m, &g| *m = b1 * *m + (1.0 - b1) * g);
            self.v[i].zip_mut_with(g, |v, &g| *v = b2 * *v + (1.0 - b2) * g * g);
            let p = params.get_mut(id);
            for ((p, &m), &v) in p.iter_mut().zip(self.m[i].iter()).zip(self.v[i].iter()) {
                let m_hat = m / bc1;
                let v_hat = v / bc2;
                *p -= lr * (m_hat / (v_hat.sqrt() + self.cfg.eps) + self.cfg.weight_decay * *p);
            }
        }
    }

    /// Serializes moments for checkpointing, keyed by parameter name.
    pub fn to_map(
        &self,
        params: &ParamSet,
    ) -> (u64, std::collections::BTreeMap<String, (Vec<f64>, Vec<f64>)>) {
        let mut map = std::collections::BTreeMap::new();
        for id in params.ids() {
            map.insert(
                params.name(id).to_string(),
                (
                    self.m[id.index()].iter().copied().collect(),
                    self.v[id.index()].iter().copied().collect(),
                ),
            );
        }
        (self.t, map)
    }

    /// Restores moments saved by [`AdamW::to_map`].
    pub fn load_map(
        &mut self,
        params: &ParamSet,
        t: u64,
        map: &std::collections::BTreeMap<String, (Vec<f64>, Vec<f64>)>,
    ) -> crate::Result<()> {
        self.t = t;
        for id in params.ids() {
            let name = params.name(id);
            let (m, v) = map.get(name).ok_or_else(|| {
                crate::Error::Checkpoint(format!("optimizer state missing for {name}"))
            })?;
            let dim = params.get(id).dim();
            if m.len() != dim.0 * dim.1 || v.len() != dim.0 * dim.1 {
                return Err(crate::Error::Checkpoint(format!(
                    "optimizer state size mismatch for {name}"
                )));
            }
            self.m[id.index()] = Array2::from_shape_vec(dim, m.clone()).expect("size checked");
            self.v[id.index()] = Array2::from_shape_vec(dim, v.clone()).expect("size checked");
        }
        Ok(())
    }
}
