use super::{Model, ModelConfig, ModelError, ModelFrame, Result};
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;

const MANIFEST: &str = "manifest.json";
const BLOB: &str = "params.bin";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the blob, in elements.
    pub offset: usize,
    pub decay: bool,
}

/// Architecture and tensor index of a saved model. Parameters live in a
/// single little-endian `f32` blob next to it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub schema_version: u32,
    pub config: ModelConfig,
    pub frame: ModelFrame,
    pub tensors: Vec<TensorEntry>,
}

pub fn save_checkpoint(model: &Model<f32>, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut tensors = Vec::with_capacity(model.params.len());
    let mut blob = Vec::with_capacity(model.params.num_scalars() * 4);
    let mut offset = 0;
    for (name, t, decay) in model.params.iter() {
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: t.shape.clone(),
            offset,
            decay,
        });
        offset += t.len();
        for v in &t.data {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = CheckpointManifest {
        schema_version: CHECKPOINT_SCHEMA_VERSION,
        config: model.config.clone(),
        frame: model.frame,
        tensors,
    };
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    fs::write(dir.join(MANIFEST), json)?;
    fs::write(dir.join(BLOB), blob)?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<Model<f32>> {
    let text = fs::read_to_string(dir.join(MANIFEST))?;
    let manifest: CheckpointManifest =
        serde_json::from_str(&text).map_err(|e| ModelError::Checkpoint(format!("{}: {e}", dir.join(MANIFEST).display())))?;
    if manifest.schema_version != CHECKPOINT_SCHEMA_VERSION {
        return Err(ModelError::Checkpoint(format!("unsupported schema version {}", manifest.schema_version)));
    }
    let mut model = Model::<f32>::new(manifest.config.clone(), manifest.frame)?;
    if manifest.tensors.len() != model.params.len() {
        return Err(ModelError::Checkpoint(format!(
            "manifest lists {} tensors, architecture has {}",
            manifest.tensors.len(),
            model.params.len()
        )));
    }
    let blob = fs::read(dir.join(BLOB))?;
    if blob.len() % 4 != 0 {
        return Err(ModelError::Checkpoint("blob length is not a multiple of 4".into()));
    }
    let values: Vec<f32> = blob.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
    let ids: Vec<_> = (0..model.params.len()).map(crate::nncore::ParamId).collect();
    for (entry, id) in manifest.tensors.iter().zip(ids) {
        let (name, decay) = (model.params.name(id).to_string(), model.params.decays(id));
        let t = model.params.get_mut(id);
        if entry.name != name || entry.shape != t.shape || entry.decay != decay {
            return Err(ModelError::Checkpoint(format!(
                "tensor {} {:?} does not match architecture tensor {} {:?}",
                entry.name, entry.shape, name, t.shape
            )));
        }
        let end = entry.offset + t.len();
        if end > values.len() {
            return Err(ModelError::Checkpoint(format!("tensor {} runs past the end of the blob", entry.name)));
        }
        t.data.copy_from_slice(&values[entry.offset..end]);
    }
    Ok(model)
}
