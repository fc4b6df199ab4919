//! Single-file checkpoint archives: named tensors plus a JSON metadata blob
//! stored as a `u8` tensor under `__meta__`.

use std::collections::BTreeMap;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use tch::nn::VarStore;
use tch::{Kind, Tensor};

use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;
const META_KEY: &str = "__meta__";

#[derive(Serialize, Deserialize)]
struct Envelope<M> {
    format_version: u32,
    kind: String,
    meta: M,
}

pub struct Archive {
    pub kind: String,
    meta_json: String,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Archive {
    pub fn meta<M: DeserializeOwned>(&self) -> Result<M> {
        let env: Envelope<M> = serde_json::from_str(&self.meta_json)?;
        Ok(env.meta)
    }

    /// Copies tensors stored under `prefix` into the matching variables.
    pub fn restore_vars(&self, prefix: &str, vs: &mut VarStore) -> Result<()> {
        for (name, mut var) in vs.variables() {
            let key = format!("{prefix}{name}");
            let src = self
                .tensors
                .get(&key)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {key}")))?;
            if src.size() != var.size() {
                return Err(Error::Checkpoint(format!(
                    "shape mismatch for {key}: {:?} vs {:?}",
                    src.size(),
                    var.size()
                )));
            }
            tch::no_grad(|| var.copy_(src));
        }
        Ok(())
    }
}

pub fn var_tensors(prefix: &str, vs: &VarStore) -> Vec<(String, Tensor)> {
    let mut out: Vec<(String, Tensor)> = vs
        .variables()
        .into_iter()
        .map(|(n, t)| (format!("{prefix}{n}"), t.detach()))
        .collect();
    out.sort_by(|a, b| a.0.cmp(&b.0));
    out
}

pub fn save_archive<M: Serialize>(
    path: impl AsRef<Path>,
    kind: &str,
    meta: &M,
    tensors: Vec<(String, Tensor)>,
) -> Result<()> {
    let path = path.as_ref();
    let env = Envelope {
        format_version: FORMAT_VERSION,
        kind: kind.to_string(),
        meta,
    };
    let json = serde_json::to_vec(&env)?;
    let mut all = tensors;
    all.push((META_KEY.to_string(), Tensor::from_slice(&json).to_kind(Kind::Uint8)));
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Tensor::save_multi(&all, path)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
}

pub fn load_archive(path: impl AsRef<Path>, expected_kind: &str) -> Result<Archive> {
    let path = path.as_ref();
    let loaded = Tensor::load_multi(path)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    let mut tensors: BTreeMap<String, Tensor> = loaded.into_iter().collect();
    let meta = tensors
        .remove(META_KEY)
        .ok_or_else(|| Error::Checkpoint(format!("{} has no metadata", path.display())))?;
    let bytes: Vec<u8> = Vec::try_from(&meta)
        .map_err(|e| Error::Checkpoint(format!("metadata unreadable: {e}")))?;
    let meta_json = String::from_utf8(bytes)
        .map_err(|e| Error::Checkpoint(format!("metadata not utf-8: {e}")))?;
    let head: Envelope<serde_json::Value> = serde_json::from_str(&meta_json)?;
    if head.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {}",
            head.format_version
        )));
    }
    if head.kind != expected_kind {
        return Err(Error::Checkpoint(format!(
            "{} holds a {} checkpoint, expected {expected_kind}",
            path.display(),
            head.kind
        )));
    }
    Ok(Archive {
        kind: head.kind,
        meta_json,
        tensors,
    })
}
