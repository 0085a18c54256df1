//! Checkpoint directories:
//!
//! ```text
//! config.json          format tag, MgNOConfig, normalization
//! layer{l}/            W_Mg manifest + kernels of hidden layer l
//! layer{l}/mix.mgt     B^l
//! layer{l}/bias.mgt    b^l
//! output/              W_Mg of the output layer
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Layer, MgNOConfig, MgNOParams, Model, Normalizer};
use crate::error::{Error, Result};
use crate::mgt::Tensor;
use crate::multigrid::{load_weights, save_weights};

pub const CHECKPOINT_FORMAT: &str = "mgno-net/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub format: String,
    pub config: MgNOConfig,
    pub normalizer: Normalizer,
    /// Epoch the parameters were taken after, if written during training.
    #[serde(default)]
    pub epoch: Option<usize>,
    /// Training grid `[height, width]`, when known.
    #[serde(default)]
    pub grid: Option<[usize; 2]>,
}

impl CheckpointMeta {
    pub fn parse(text: &str) -> Result<Self> {
        let meta: CheckpointMeta = serde_json::from_str(text)?;
        if meta.format != CHECKPOINT_FORMAT {
            return Err(Error::Format(format!(
                "unsupported checkpoint format {:?}, expected {CHECKPOINT_FORMAT}",
                meta.format
            )));
        }
        meta.config.validate()?;
        Ok(meta)
    }
}

pub fn save_model(dir: impl AsRef<Path>, model: &Model, epoch: Option<usize>) -> Result<()> {
    let dir = dir.as_ref();
    model.params.validate(&model.config)?;
    fs::create_dir_all(dir)?;
    for (l, layer) in model.params.layers.iter().enumerate() {
        let sub = dir.join(format!("layer{l}"));
        save_weights(&sub, &layer.wmg, &model.config.wmg[l])?;
        Tensor::from(&layer.mix).write(sub.join("mix.mgt"))?;
        Tensor::from(layer.bias.as_slice()).write(sub.join("bias.mgt"))?;
    }
    save_weights(dir.join("output"), &model.params.output, &model.config.wmg[model.config.layers])?;
    let meta = CheckpointMeta {
        format: CHECKPOINT_FORMAT.into(),
        config: model.config.clone(),
        normalizer: model.normalizer,
        epoch,
        grid: model.grid.map(|(h, w)| [h, w]),
    };
    fs::write(dir.join("config.json"), serde_json::to_string_pretty(&meta)? + "\n")?;
    Ok(())
}

pub fn load_model(dir: impl AsRef<Path>) -> Result<Model> {
    let dir = dir.as_ref();
    let meta = CheckpointMeta::parse(&fs::read_to_string(dir.join("config.json"))?)?;
    let config = meta.config;
    let mut layers = Vec::with_capacity(config.layers);
    for l in 0..config.layers {
        let sub = dir.join(format!("layer{l}"));
        let (wmg, stored) = load_weights(&sub)?;
        if stored != config.wmg[l] {
            return Err(Error::Format(format!("layer{l} manifest disagrees with config.json")));
        }
        layers.push(Layer {
            wmg,
            mix: Tensor::read(sub.join("mix.mgt"))?.into_matrix()?,
            bias: Tensor::read(sub.join("bias.mgt"))?.into_vector()?,
        });
    }
    let (output, stored) = load_weights(dir.join("output"))?;
    if stored != config.wmg[config.layers] {
        return Err(Error::Format("output manifest disagrees with config.json".into()));
    }
    let params = MgNOParams { layers, output };
    params.validate(&config)?;
    Ok(Model { config, params, normalizer: meta.normalizer, grid: meta.grid.map(|[h, w]| (h, w)) })
}
