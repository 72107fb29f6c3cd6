use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netgraph::{NetworkGraph, Partition};
use crate::params::ParamStore;

/// Backbone (with the classification head) and decoder parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub backbone: ParamStore,
    pub decoder: ParamStore,
}

impl Model {
    pub fn init(graph: &NetworkGraph, seed: u64, bn_scale: f64) -> Self {
        Model::split(graph, &ParamStore::init(graph, seed, bn_scale))
    }

    pub fn split(graph: &NetworkGraph, all: &ParamStore) -> Self {
        Model {
            backbone: all.restrict(graph, Partition::Backbone),
            decoder: all.restrict(graph, Partition::Decoder),
        }
    }

    pub fn merged(&self) -> ParamStore {
        self.backbone.merged(&self.decoder)
    }
}

pub const CHECKPOINT_FORMAT: &str = "segprune-model";
pub const CHECKPOINT_VERSION: u32 = 1;

/// A graph together with its weights, as persisted after every stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelCheckpoint {
    pub format: String,
    pub version: u32,
    pub stage: String,
    pub config_hash: String,
    pub graph: NetworkGraph,
    pub model: Model,
}

impl ModelCheckpoint {
    pub fn new(stage: &str, config_hash: &str, graph: NetworkGraph, model: Model) -> Self {
        ModelCheckpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            stage: stage.into(),
            config_hash: config_hash.into(),
            graph,
            model,
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), serde_json::to_string(self)?.as_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let ck: ModelCheckpoint = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(Error::Parse(format!("unsupported checkpoint {} v{}", ck.format, ck.version)));
        }
        Ok(ck)
    }
}

/// Writes through a temporary sibling and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    ensure_parent(path)?;
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(format!(".tmp{}", std::process::id()));
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    Ok(())
}
