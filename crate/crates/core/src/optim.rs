//! Adam (no weight decay) over named parameters.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::checkpoint::Extras;
use crate::model::{Grads, ParameterSet};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global L2 norm clip applied before the update; `None` disables it.
    pub clip_norm: Option<f64>,
}

impl AdamConfig {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: Some(1.0),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Applies one update. Only trainable parameters are touched; gradients
    /// for frozen paths are ignored.
    pub fn step(&mut self, params: &mut ParameterSet, grads: &Grads) -> Result<()> {
        let c = &self.config;
        let clip = match c.clip_norm {
            Some(max) => {
                let norm = grads.values().flatten().map(|g| g * g).sum::<f64>().sqrt();
                if norm > max {
                    max / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (path, g) in grads {
            let p = params.get_mut(path)?;
            if !p.trainable {
                continue;
            }
            let n = p.tensor.numel();
            if g.len() != n {
                return Err(Error::Config(format!(
                    "gradient for `{path}` has {} entries, parameter has {n}",
                    g.len()
                )));
            }
            let m = self.m.entry(path.clone()).or_insert_with(|| vec![0.0; n]);
            let v = self.v.entry(path.clone()).or_insert_with(|| vec![0.0; n]);
            let data = p.tensor.data_mut();
            for i in 0..n {
                let gi = g[i] * clip;
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gi;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gi * gi;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                data[i] -= c.lr * mh / (vh.sqrt() + c.eps);
            }
        }
        Ok(())
    }

    /// Moments as checkpoint buffers (`adam.m.{path}`, `adam.v.{path}`) and the
    /// step count and config as metadata.
    pub fn export(&self, extras: &mut Extras) -> Result<()> {
        for (k, m) in &self.m {
            extras.aux.insert(format!("adam.m.{k}"), m.clone());
        }
        for (k, v) in &self.v {
            extras.aux.insert(format!("adam.v.{k}"), v.clone());
        }
        extras.meta.insert("adam.step".into(), self.step.into());
        extras.meta.insert("adam.config".into(), serde_json::to_value(&self.config)?);
        Ok(())
    }

    /// Rebuilds optimizer state saved by [`Adam::export`], if present.
    pub fn import(extras: &Extras) -> Result<Option<Self>> {
        let Some(step) = extras.meta.get("adam.step") else {
            return Ok(None);
        };
        let step = step
            .as_u64()
            .ok_or_else(|| Error::Format("adam.step is not an integer".into()))?;
        let config: AdamConfig = serde_json::from_value(
            extras
                .meta
                .get("adam.config")
                .cloned()
                .ok_or_else(|| Error::Format("adam.config missing".into()))?,
        )?;
        let mut adam = Adam::new(config);
        adam.step = step;
        for (k, buf) in &extras.aux {
            if let Some(p) = k.strip_prefix("adam.m.") {
                adam.m.insert(p.to_string(), buf.clone());
            } else if let Some(p) = k.strip_prefix("adam.v.") {
                adam.v.insert(p.to_string(), buf.clone());
            }
        }
        Ok(Some(adam))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;
    use crate::model::ParamKind;

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut ps = ParameterSet::new();
        ps.insert("w", Tensor::new(vec![2], vec![1.0, -1.0]).unwrap(), ParamKind::Base)
            .unwrap();
        let mut adam = Adam::new(AdamConfig {
            clip_norm: None,
            ..AdamConfig::new(0.1)
        });
        let grads = Grads::from([("w".to_string(), vec![0.5, -2.0])]);
        adam.step(&mut ps, &grads).unwrap();
        let d = ps.tensor("w").unwrap().data();
        assert!((d[0] - 0.9).abs() < 1e-6);
        assert!((d[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn frozen_parameters_are_skipped() {
        let mut ps = ParameterSet::new();
        ps.insert("w", Tensor::full(&[1], 1.0), ParamKind::Base).unwrap();
        ps.set_trainable(ParamKind::Base, false);
        let mut adam = Adam::new(AdamConfig::new(0.1));
        adam.step(&mut ps, &Grads::from([("w".to_string(), vec![1.0])]))
            .unwrap();
        assert_eq!(ps.tensor("w").unwrap().data(), &[1.0]);
    }

    #[test]
    fn export_import_round_trip() {
        let mut ps = ParameterSet::new();
        ps.insert("w", Tensor::full(&[3], 1.0), ParamKind::Base).unwrap();
        let mut adam = Adam::new(AdamConfig::new(0.01));
        let grads = Grads::from([("w".to_string(), vec![0.1, 0.2, 0.3])]);
        adam.step(&mut ps, &grads).unwrap();
        let mut ex = Extras::default();
        adam.export(&mut ex).unwrap();
        let back = Adam::import(&ex).unwrap().unwrap();
        assert_eq!(back, adam);
    }
}
