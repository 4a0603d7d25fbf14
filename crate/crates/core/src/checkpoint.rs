//! JSON checkpoints.
//!
//! Each trainable tensor is stored under its parameter path as
//! `{"shape": [...], "data": [...]}`; everything else lives under `"meta"`.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};

use crate::data::Normalizer;
use crate::error::{Error, Result};
use crate::model::{Hetvae, HetvaeConfig};
use crate::numgrad::{AdamState, Array, ParamStore};
use crate::objective::LossRecord;
use crate::untan::UnionTimeSet;

/// Hex SHA-256 of a value's JSON serialization.
pub fn config_hash<T: Serialize>(value: &T) -> Result<String> {
    let text = serde_json::to_string(value)?;
    Ok(Sha256::digest(text.as_bytes())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect())
}

#[derive(Serialize, Deserialize)]
struct StoredTensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    #[serde(default = "yes", skip_serializing_if = "is_true")]
    trainable: bool,
}

fn yes() -> bool {
    true
}

fn is_true(b: &bool) -> bool {
    *b
}

#[derive(Serialize, Deserialize)]
struct Meta {
    config_hash: String,
    model_hash: String,
    seed: u64,
    step: u64,
    model_config: HetvaeConfig,
    union: UnionTimeSet,
    normalizer: Normalizer,
    adam: AdamState,
    history: Vec<LossRecord>,
    run: Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Hetvae,
    pub adam: AdamState,
    pub normalizer: Normalizer,
    pub history: Vec<LossRecord>,
    pub seed: u64,
    /// Resolved run configuration that produced this checkpoint.
    pub run: Value,
}

impl Checkpoint {
    pub fn step(&self) -> u64 {
        self.adam.step
    }

    pub fn model_hash(&self) -> Result<String> {
        config_hash(&self.model.config)
    }

    pub fn to_json(&self) -> Result<Value> {
        let mut root = Map::new();
        for (name, entry) in self.model.params.iter() {
            if name == "meta" {
                return Err(Error::Contract("`meta` is reserved in checkpoints".into()));
            }
            let t = StoredTensor {
                shape: entry.value.shape().to_vec(),
                data: entry.value.data().to_vec(),
                trainable: entry.trainable,
            };
            root.insert(name.clone(), serde_json::to_value(t)?);
        }
        let meta = Meta {
            config_hash: config_hash(&self.run)?,
            model_hash: self.model_hash()?,
            seed: self.seed,
            step: self.adam.step,
            model_config: self.model.config.clone(),
            union: self.model.union.clone(),
            normalizer: self.normalizer.clone(),
            adam: self.adam.clone(),
            history: self.history.clone(),
            run: self.run.clone(),
        };
        root.insert("meta".into(), serde_json::to_value(meta)?);
        Ok(Value::Object(root))
    }

    pub fn from_json(value: Value) -> Result<Self> {
        let Value::Object(mut root) = value else {
            return Err(Error::Data("checkpoint is not a JSON object".into()));
        };
        let meta = root
            .remove("meta")
            .ok_or_else(|| Error::Data("checkpoint has no `meta` block".into()))?;
        let meta: Meta = serde_json::from_value(meta)?;
        if config_hash(&meta.run)? != meta.config_hash {
            return Err(Error::Data("checkpoint config hash does not match its embedded config".into()));
        }
        let mut params = ParamStore::new();
        for (name, v) in root {
            let t: StoredTensor = serde_json::from_value(v)?;
            let a = Array::new(t.shape, t.data)?;
            if t.trainable {
                params.insert(name, a)?;
            } else {
                params.insert_frozen(name, a)?;
            }
        }
        let expected = Hetvae::new(meta.model_config.clone(), meta.union.clone(), 0)?;
        for (name, entry) in expected.params.iter() {
            match params.get(name) {
                Some(a) if a.shape() == entry.value.shape() => {}
                Some(a) => {
                    return Err(Error::Data(format!(
                        "parameter `{name}` has shape {:?}, config implies {:?}",
                        a.shape(),
                        entry.value.shape()
                    )))
                }
                None => return Err(Error::Data(format!("checkpoint is missing parameter `{name}`"))),
            }
        }
        if params.len() != expected.params.len() {
            return Err(Error::Data("checkpoint has parameters the config does not define".into()));
        }
        Ok(Self {
            model: Hetvae {
                config: meta.model_config,
                params,
                union: meta.union,
            },
            adam: meta.adam,
            normalizer: meta.normalizer,
            history: meta.history,
            seed: meta.seed,
            run: meta.run,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string(&self.to_json()?)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(serde_json::from_str(&text)?)
    }
}

/// Wraps a payload with a `meta` block.
pub fn with_meta<T: Serialize>(payload: &T, run: &Value, seed: u64) -> Result<Value> {
    let mut v = serde_json::to_value(payload)?;
    let meta = json!({ "config_hash": config_hash(run)?, "seed": seed, "run": run });
    match &mut v {
        Value::Object(map) => {
            map.insert("meta".into(), meta);
            Ok(v)
        }
        _ => Ok(json!({ "data": v, "meta": meta })),
    }
}
