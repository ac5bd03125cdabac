//! Checkpoint directories.
//!
//! A checkpoint is a directory holding `manifest.json` and `tensors.bin`. The
//! manifest records the architecture, the optional PEFT config, and for every
//! tensor its path, shape, trainable flag, kind and `[offset, offset+len)`
//! range (in f64 elements) into `tensors.bin`, which stores raw little-endian
//! f64 values back to back. Auxiliary buffers (optimizer moments) and free-form
//! metadata ride along in the same files.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::peft::PeftConfig;

use super::{Architecture, Model, ParamKind, ParameterSet};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const TENSORS_FILE: &str = "tensors.bin";
const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub path: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
    pub kind: ParamKind,
    pub offset: usize,
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuxEntry {
    pub name: String,
    pub offset: usize,
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub arch: Architecture,
    pub peft: Option<PeftConfig>,
    /// Hash of the base tensors this checkpoint was derived from, if any.
    pub base_hash: Option<String>,
    pub tensors: Vec<TensorEntry>,
    #[serde(default)]
    pub aux: Vec<AuxEntry>,
    #[serde(default)]
    pub meta: BTreeMap<String, serde_json::Value>,
}

/// Everything stored in a checkpoint directory besides the parameters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Extras {
    pub aux: BTreeMap<String, Vec<f64>>,
    pub meta: BTreeMap<String, serde_json::Value>,
}

/// SHA-256 over the base tensors (path, shape, little-endian data) in path order.
pub fn base_hash(params: &ParameterSet) -> String {
    let mut h = Sha256::new();
    for (path, p) in params.iter().filter(|(_, p)| p.kind == ParamKind::Base) {
        h.update((path.len() as u64).to_le_bytes());
        h.update(path.as_bytes());
        h.update((p.tensor.rank() as u64).to_le_bytes());
        for &s in p.tensor.shape() {
            h.update((s as u64).to_le_bytes());
        }
        for v in p.tensor.data() {
            h.update(v.to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Writes every parameter of `model` plus `extras` to `dir`.
pub fn save(dir: &Path, model: &Model, extras: &Extras) -> Result<()> {
    write_dir(dir, model, |_| true, None, extras)
}

/// Writes only the PEFT tensors of `model`, tagged with the hash of its base.
pub fn save_peft(dir: &Path, model: &Model, extras: &Extras) -> Result<()> {
    if model.peft.is_none() {
        return Err(Error::Peft("model has no PEFT method to save".into()));
    }
    let hash = base_hash(&model.params);
    write_dir(dir, model, |k| k == ParamKind::Peft, Some(hash), extras)
}

fn write_dir(
    dir: &Path,
    model: &Model,
    keep: impl Fn(ParamKind) -> bool,
    base_hash: Option<String>,
    extras: &Extras,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut buf: Vec<u8> = Vec::new();
    let mut offset = 0;
    let mut push = |data: &[f64]| {
        for v in data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        let start = offset;
        offset += data.len();
        start
    };
    let mut tensors = Vec::new();
    for (path, p) in model.params.iter().filter(|(_, p)| keep(p.kind)) {
        let start = push(p.tensor.data());
        tensors.push(TensorEntry {
            path: path.clone(),
            shape: p.tensor.shape().to_vec(),
            trainable: p.trainable,
            kind: p.kind,
            offset: start,
            len: p.tensor.numel(),
        });
    }
    let mut aux = Vec::new();
    for (name, data) in &extras.aux {
        let start = push(data);
        aux.push(AuxEntry {
            name: name.clone(),
            offset: start,
            len: data.len(),
        });
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        arch: model.arch.clone(),
        peft: model.peft.clone(),
        base_hash,
        tensors,
        aux,
        meta: extras.meta.clone(),
    };
    fs::write(dir.join(TENSORS_FILE), buf)?;
    fs::write(
        dir.join(MANIFEST_FILE),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
    let m: Manifest = serde_json::from_str(&text)?;
    if m.format_version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported format version {}",
            m.format_version
        )));
    }
    Ok(m)
}

fn read_values(dir: &Path) -> Result<Vec<f64>> {
    let bytes = fs::read(dir.join(TENSORS_FILE))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::Format(format!(
            "{TENSORS_FILE} length {} is not a multiple of 8",
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}

fn slice<'a>(values: &'a [f64], what: &str, offset: usize, len: usize) -> Result<&'a [f64]> {
    values
        .get(offset..offset + len)
        .ok_or_else(|| Error::Format(format!("`{what}` lies outside {TENSORS_FILE}")))
}

fn read_extras(m: &Manifest, values: &[f64]) -> Result<Extras> {
    let mut aux = BTreeMap::new();
    for a in &m.aux {
        aux.insert(a.name.clone(), slice(values, &a.name, a.offset, a.len)?.to_vec());
    }
    Ok(Extras {
        aux,
        meta: m.meta.clone(),
    })
}

fn read_params(m: &Manifest, values: &[f64]) -> Result<ParameterSet> {
    let mut params = ParameterSet::new();
    for e in &m.tensors {
        let data = slice(values, &e.path, e.offset, e.len)?.to_vec();
        params.insert(e.path.clone(), Tensor::new(e.shape.clone(), data)?, e.kind)?;
        params.get_mut(&e.path)?.trainable = e.trainable;
    }
    Ok(params)
}

/// Loads a full checkpoint written by [`save`].
pub fn load(dir: &Path) -> Result<(Model, Extras)> {
    let m = read_manifest(dir)?;
    if m.base_hash.is_some() {
        return Err(Error::Format(
            "this is a PEFT checkpoint; load it on top of its base".into(),
        ));
    }
    let values = read_values(dir)?;
    let model = Model {
        arch: m.arch.clone(),
        params: read_params(&m, &values)?,
        peft: m.peft.clone(),
    };
    Ok((model, read_extras(&m, &values)?))
}

/// Loads a PEFT checkpoint on top of `base`, which must hash to the value
/// recorded at save time.
pub fn load_peft(dir: &Path, base: &Model) -> Result<(Model, Extras)> {
    let m = read_manifest(dir)?;
    let Some(expected) = m.base_hash.clone() else {
        return Err(Error::Format("not a PEFT checkpoint".into()));
    };
    if m.arch != base.arch {
        return Err(Error::Format("architecture differs from the base model".into()));
    }
    let found = base_hash(&base.params);
    if found != expected {
        return Err(Error::BaseHashMismatch { expected, found });
    }
    let values = read_values(dir)?;
    let mut model = base.clone();
    let peft_params = read_params(&m, &values)?;
    model.params.set_trainable(ParamKind::Base, false);
    for (path, p) in peft_params.iter() {
        model.params.remove(path);
        model.params.insert(path.clone(), p.tensor.clone(), ParamKind::Peft)?;
        model.params.get_mut(path)?.trainable = p.trainable;
    }
    model.peft = m.peft.clone();
    Ok((model, read_extras(&m, &values)?))
}
