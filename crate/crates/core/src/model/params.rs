use std::collections::{BTreeMap, HashMap};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Which part of a model a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamKind {
    Base,
    Peft,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub tensor: Tensor,
    pub trainable: bool,
    pub kind: ParamKind,
}

/// Named parameters in deterministic (lexicographic) order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterSet {
    entries: BTreeMap<String, Param>,
}

/// Per-path gradients of the trainable parameters.
pub type Grads = BTreeMap<String, Vec<f64>>;

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, path: impl Into<String>, tensor: Tensor, kind: ParamKind) -> Result<()> {
        let path = path.into();
        if self.entries.contains_key(&path) {
            return Err(Error::DuplicateParam(path));
        }
        self.entries.insert(
            path,
            Param {
                tensor,
                trainable: true,
                kind,
            },
        );
        Ok(())
    }

    pub fn get(&self, path: &str) -> Result<&Param> {
        self.entries
            .get(path)
            .ok_or_else(|| Error::MissingParam(path.to_string()))
    }

    pub fn get_mut(&mut self, path: &str) -> Result<&mut Param> {
        self.entries
            .get_mut(path)
            .ok_or_else(|| Error::MissingParam(path.to_string()))
    }

    pub fn tensor(&self, path: &str) -> Result<&Tensor> {
        Ok(&self.get(path)?.tensor)
    }

    pub fn contains(&self, path: &str) -> bool {
        self.entries.contains_key(path)
    }

    pub fn remove(&mut self, path: &str) -> Option<Param> {
        self.entries.remove(path)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param)> {
        self.entries.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn paths(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn set_trainable(&mut self, kind: ParamKind, trainable: bool) {
        for p in self.entries.values_mut().filter(|p| p.kind == kind) {
            p.trainable = trainable;
        }
    }

    pub fn numel(&self, filter: impl Fn(&Param) -> bool) -> usize {
        self.entries
            .values()
            .filter(|p| filter(p))
            .map(|p| p.tensor.numel())
            .sum()
    }

    /// Records every parameter on `tape`; trainable ones require gradients.
    pub fn bind(&self, tape: &mut Tape) -> HashMap<String, Var> {
        self.entries
            .iter()
            .map(|(k, p)| (k.clone(), tape.leaf(p.tensor.clone(), p.trainable)))
            .collect()
    }

    /// Copies gradients into each parameter's grad slot (trainable only).
    pub fn store_grads(&mut self, grads: &Grads) -> Result<()> {
        for (path, g) in grads {
            let p = self.get_mut(path)?;
            p.tensor.set_grad(Some(g.clone()))?;
        }
        Ok(())
    }
}

/// A tape with the model's parameters bound to it.
pub struct Graph {
    pub tape: Tape,
    vars: HashMap<String, Var>,
    /// `alpha / rank` applied to low-rank updates, when present.
    pub lora_scale: f64,
}

impl Graph {
    pub fn new(params: &ParameterSet) -> Self {
        let mut tape = Tape::new();
        let vars = params.bind(&mut tape);
        Self {
            tape,
            vars,
            lora_scale: 1.0,
        }
    }

    pub fn p(&self, path: &str) -> Result<Var> {
        self.vars
            .get(path)
            .copied()
            .ok_or_else(|| Error::MissingParam(path.to_string()))
    }

    pub fn has(&self, path: &str) -> bool {
        self.vars.contains_key(path)
    }

    /// Gradients of trainable parameters after `tape.backward`. Trainable
    /// parameters unreachable from the loss report zeros.
    pub fn grads(&self) -> Grads {
        self.vars
            .iter()
            .filter(|(_, v)| self.tape.requires_grad(**v))
            .map(|(k, v)| {
                let g = self
                    .tape
                    .grad(*v)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; self.tape.value(*v).numel()]);
                (k.clone(), g)
            })
            .collect()
    }
}

pub(crate) fn normal_tensor<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], std: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let dist = Normal::new(0.0, std).expect("std is finite and positive");
    Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect())
        .expect("shape and data agree")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_and_missing_paths() {
        let mut ps = ParameterSet::new();
        ps.insert("a", Tensor::zeros(&[2]), ParamKind::Base).unwrap();
        assert!(matches!(
            ps.insert("a", Tensor::zeros(&[2]), ParamKind::Base),
            Err(Error::DuplicateParam(_))
        ));
        assert!(matches!(ps.get("b"), Err(Error::MissingParam(_))));
    }

    #[test]
    fn frozen_params_get_no_gradient() {
        let mut ps = ParameterSet::new();
        ps.insert("w", Tensor::full(&[1], 2.0), ParamKind::Base).unwrap();
        ps.insert("p", Tensor::full(&[1], 3.0), ParamKind::Peft).unwrap();
        ps.set_trainable(ParamKind::Base, false);
        let mut g = Graph::new(&ps);
        let (w, p) = (g.p("w").unwrap(), g.p("p").unwrap());
        let l = g.tape.mul(w, p).unwrap();
        g.tape.backward(l).unwrap();
        let grads = g.grads();
        assert_eq!(grads.len(), 1);
        assert_eq!(grads["p"], vec![2.0]);
    }
}
