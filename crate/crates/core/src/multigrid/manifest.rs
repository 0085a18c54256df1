//! On-disk layout of one `W_Mg`: `manifest.json` plus one MGT1 file per kernel.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{MgConfig, MgWeights};
use crate::error::{Error, Result};
use crate::mgt::Tensor;
use crate::tensor::Kernel;

pub const WEIGHTS_FORMAT: &str = "mgno-wmg/1";
const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelEntry {
    pub name: String,
    pub file: String,
    pub dims: [usize; 4],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightsManifest {
    pub format: String,
    pub config: MgConfig,
    pub kernels: Vec<KernelEntry>,
}

impl WeightsManifest {
    /// Parses and checks a manifest without touching any kernel file.
    pub fn parse(text: &str) -> Result<Self> {
        let m: WeightsManifest = serde_json::from_str(text)?;
        if m.format != WEIGHTS_FORMAT {
            return Err(Error::Format(format!("unsupported weights format {:?}, expected {WEIGHTS_FORMAT}", m.format)));
        }
        m.config.validate()?;
        let want: Vec<_> = super::kernel_shapes(&m.config)
            .named()
            .into_iter()
            .map(|(n, &(o, i, kh, kw))| (n, [o, i, kh, kw]))
            .collect();
        let have: Vec<_> = m.kernels.iter().map(|e| (e.name.clone(), e.dims)).collect();
        if want != have {
            return Err(Error::Format("kernel list does not match the config".into()));
        }
        for e in &m.kernels {
            if e.file.contains(['/', '\\']) || e.file.starts_with('.') {
                return Err(Error::Format(format!("kernel file name {:?} must be a plain file name", e.file)));
            }
        }
        Ok(m)
    }
}

/// Writes `w` under `dir` (created if missing).
pub fn save_weights(dir: impl AsRef<Path>, w: &MgWeights, cfg: &MgConfig) -> Result<()> {
    w.validate(cfg)?;
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut kernels = Vec::new();
    for (name, k) in w.named() {
        let file = format!("{name}.mgt");
        Tensor::from(k).write(dir.join(&file))?;
        let (o, i, kh, kw) = k.dims();
        kernels.push(KernelEntry { name, file, dims: [o, i, kh, kw] });
    }
    let manifest = WeightsManifest { format: WEIGHTS_FORMAT.into(), config: cfg.clone(), kernels };
    fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(())
}

pub fn load_weights(dir: impl AsRef<Path>) -> Result<(MgWeights, MgConfig)> {
    let dir = dir.as_ref();
    let manifest = WeightsManifest::parse(&fs::read_to_string(dir.join(MANIFEST))?)?;
    let mut w = MgWeights::zeros(&manifest.config);
    for ((_, slot), entry) in w.named_mut().into_iter().zip(&manifest.kernels) {
        let k: Kernel = Tensor::read(dir.join(&entry.file))?.into_kernel()?;
        if k.dims() != slot.dims() {
            return Err(Error::Format(format!(
                "{} has dims {:?}, manifest says {:?}",
                entry.file,
                k.dims(),
                entry.dims
            )));
        }
        *slot = k;
    }
    Ok((w, manifest.config))
}
