use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tensor, Var};
use crate::error::{Error, Result};
use crate::model::layers::linear;
use crate::model::{normal_tensor, Graph, ParamKind, ParameterSet};

pub const SEED_PATH: &str = "ptuning.seed";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PtuningConfig {
    pub n_virtual: usize,
    /// Hidden width of the two-layer prompt encoder.
    pub hidden: usize,
    /// Standard deviation of the seed embeddings.
    pub init_std: f64,
}

impl PtuningConfig {
    pub fn new(n_virtual: usize, hidden: usize) -> Self {
        Self {
            n_virtual,
            hidden,
            init_std: 0.1,
        }
    }

    /// 100 virtual tokens, prompt encoder hidden width 2048.
    pub fn full_scale() -> Self {
        Self::new(100, 2048)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_virtual == 0 {
            return Err(Error::Peft("n_virtual must be at least 1".into()));
        }
        if self.hidden == 0 {
            return Err(Error::Peft("prompt encoder hidden width must be at least 1".into()));
        }
        if !(self.init_std.is_finite() && self.init_std > 0.0) {
            return Err(Error::Peft("init_std must be positive".into()));
        }
        Ok(())
    }
}

pub(crate) fn init_params<R: Rng + ?Sized>(
    cfg: &PtuningConfig,
    d: usize,
    rng: &mut R,
) -> Result<ParameterSet> {
    let h = cfg.hidden;
    let mut ps = ParameterSet::new();
    ps.insert(SEED_PATH, normal_tensor(rng, &[cfg.n_virtual, d], cfg.init_std), ParamKind::Peft)?;
    ps.insert("ptuning.fc1", normal_tensor(rng, &[d, h], 1.0 / (d as f64).sqrt()), ParamKind::Peft)?;
    ps.insert("ptuning.fc1.bias", Tensor::zeros(&[h]), ParamKind::Peft)?;
    ps.insert("ptuning.fc2", normal_tensor(rng, &[h, d], 1.0 / (h as f64).sqrt()), ParamKind::Peft)?;
    ps.insert("ptuning.fc2.bias", Tensor::zeros(&[d]), ParamKind::Peft)?;
    Ok(ps)
}

/// `[n_virtual × d]` prompt-encoder output, recomputed on every forward so
/// the encoder itself trains. `None` when the model has no prompt encoder.
pub fn virtual_embeddings(g: &mut Graph) -> Result<Option<Var>> {
    if !g.has(SEED_PATH) {
        return Ok(None);
    }
    let seed = g.p(SEED_PATH)?;
    let h = linear(g, seed, "ptuning.fc1")?;
    let h = g.tape.gelu(h)?;
    Ok(Some(linear(g, h, "ptuning.fc2")?))
}
