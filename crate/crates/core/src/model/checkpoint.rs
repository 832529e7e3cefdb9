use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig, Param};
use crate::diffmath::container::{read_tensor, write_tensor};
use crate::diffmath::Tensor;
use crate::error::{Error, Result};

pub const PARAMS_FILE: &str = "params.json";
const FORMAT_VERSION: u32 = 1;

/// Model state plus named auxiliary tensors (optimizer moments).
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub step: u64,
    pub extra: Vec<(String, Tensor)>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    file: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Index {
    format_version: u32,
    model: ModelConfig,
    tau: f32,
    step: u64,
    backbones_frozen: bool,
    params: Vec<Entry>,
    #[serde(default)]
    extra: Vec<Entry>,
}

fn write_entries(dir: &Path, items: &[(&str, &Tensor)]) -> Result<Vec<Entry>> {
    items
        .iter()
        .map(|(name, t)| {
            let file = format!("{name}.t32");
            write_tensor(&dir.join(&file), t)?;
            Ok(Entry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                file,
            })
        })
        .collect()
}

fn read_entry(dir: &Path, e: &Entry) -> Result<Tensor> {
    let path = dir.join(&e.file);
    let t = read_tensor(&path)?;
    if t.shape() != e.shape.as_slice() {
        return Err(Error::Format {
            path,
            reason: format!("shape {:?} differs from recorded {:?}", t.shape(), e.shape),
        });
    }
    Ok(t)
}

/// Writes one tensor file per parameter and per extra tensor, then
/// `params.json` indexing them.
pub fn save_checkpoint(dir: &Path, ckpt: &Checkpoint) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let model = &ckpt.model;
    let params: Vec<(&str, &Tensor)> = model.params().iter().map(|p| (p.name.as_str(), &p.value)).collect();
    let extra: Vec<(&str, &Tensor)> = ckpt.extra.iter().map(|(n, t)| (n.as_str(), t)).collect();
    let index = Index {
        format_version: FORMAT_VERSION,
        model: model.config.clone(),
        tau: model.tau,
        step: ckpt.step,
        backbones_frozen: model.backbones_frozen(),
        params: write_entries(dir, &params)?,
        extra: write_entries(dir, &extra)?,
    };
    let path = dir.join(PARAMS_FILE);
    let text = serde_json::to_string_pretty(&index).expect("index serializes");
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let path = dir.join(PARAMS_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let index: Index = serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.clone(),
        reason: e.to_string(),
    })?;
    if index.format_version != FORMAT_VERSION {
        return Err(Error::Format {
            path,
            reason: format!("unsupported format version {}", index.format_version),
        });
    }
    let reference = Model::new(index.model.clone(), 0)?;
    let params = index
        .params
        .iter()
        .zip(reference.params())
        .map(|(e, r)| {
            Ok(Param {
                name: e.name.clone(),
                value: read_entry(dir, e)?,
                backbone: r.backbone,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut model = Model::from_parts(index.model, params, index.tau).map_err(|e| Error::Format {
        path: path.clone(),
        reason: e.to_string(),
    })?;
    model.freeze_backbones(index.backbones_frozen);
    let extra = index
        .extra
        .iter()
        .map(|e| Ok((e.name.clone(), read_entry(dir, e)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(Checkpoint {
        model,
        step: index.step,
        extra,
    })
}
