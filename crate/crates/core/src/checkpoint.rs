//! Checkpoint directories.
//!
//! ```text
//! <dir>/manifest.json           Manifest (format version, stage, steps, config echo)
//! <dir>/<group>.safetensors     one blob per parameter group
//! ```
//!
//! Groups are `driven_encoder`, `unet`, `refnet`, `image_encoder`,
//! `temporal` and, for learned codecs, `codec`. Loading rebuilds the model
//! from the echoed config, inserts temporal layers when the manifest lists a
//! `temporal` blob, then overwrites every parameter from the blobs.

use std::fmt;
use std::fs;
use std::path::Path;

use candle_core::{DType, Device};
use serde::{Deserialize, Serialize};

use crate::model::{ModelConfig, PortraitModel};
use crate::params::hash_tensor;
use crate::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Init,
    Stage1,
    GazeFt,
    Stage2,
}

impl Stage {
    pub fn as_str(&self) -> &'static str {
        match self {
            Stage::Init => "init",
            Stage::Stage1 => "stage1",
            Stage::GazeFt => "gaze_ft",
            Stage::Stage2 => "stage2",
        }
    }

    /// Stage tag the input checkpoint must carry before this stage may run.
    pub fn prerequisite(&self) -> Option<Stage> {
        match self {
            Stage::Init => None,
            Stage::Stage1 => Some(Stage::Init),
            Stage::GazeFt => Some(Stage::Stage1),
            Stage::Stage2 => Some(Stage::GazeFt),
        }
    }

    pub fn check_input(&self, found: Stage) -> Result<()> {
        match self.prerequisite() {
            Some(required) if required != found => Err(Error::StageOrder {
                stage: self.as_str().into(),
                required: required.as_str().into(),
                found: found.as_str().into(),
            }),
            _ => Ok(()),
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModuleEntry {
    pub group: String,
    pub file: String,
    /// Equal to the group name; temporal blobs are addressable as one set.
    pub tag: String,
    pub tensors: usize,
    pub elements: usize,
    /// sha256 over the per-tensor hashes in name order.
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub stage: Stage,
    pub step_count: u64,
    pub seed: u64,
    pub dtype: String,
    pub model: ModelConfig,
    pub modules: Vec<ModuleEntry>,
    /// Caller-provided run information (config file, overrides, etc.).
    #[serde(default)]
    pub run: serde_json::Value,
}

impl Manifest {
    pub fn has_group(&self, group: &str) -> bool {
        self.modules.iter().any(|m| m.group == group)
    }
}

pub fn parse_dtype(s: &str) -> Result<DType> {
    match s {
        "f32" => Ok(DType::F32),
        "f64" => Ok(DType::F64),
        other => Err(Error::BadCheckpoint(format!("unsupported dtype `{other}`"))),
    }
}

pub fn dtype_name(d: DType) -> &'static str {
    match d {
        DType::F64 => "f64",
        _ => "f32",
    }
}

fn group_digest(model: &PortraitModel, group: &str) -> Result<(usize, usize, String)> {
    use sha2::{Digest, Sha256};
    let names = model.store.names_in_groups(&[group]);
    let mut hasher = Sha256::new();
    let mut elements = 0;
    for n in &names {
        let var = model.store.get(n).expect("listed name");
        elements += var.elem_count();
        hasher.update(n.as_bytes());
        hasher.update(hash_tensor(var.as_tensor())?.as_bytes());
    }
    Ok((names.len(), elements, hex::encode(hasher.finalize())))
}

pub fn save(dir: &Path, model: &PortraitModel, stage: Stage, step_count: u64, run: serde_json::Value) -> Result<Manifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut modules = Vec::new();
    for group in model.store.groups_present() {
        let file = format!("{group}.safetensors");
        model.store.save_group(&group, &dir.join(&file))?;
        let (tensors, elements, sha256) = group_digest(model, &group)?;
        modules.push(ModuleEntry {
            tag: group.clone(),
            group,
            file,
            tensors,
            elements,
            sha256,
        });
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        stage,
        step_count,
        seed: model.store.seed(),
        dtype: dtype_name(model.dtype()).into(),
        model: model.config().clone(),
        modules,
        run,
    };
    let path = dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json("checkpoint manifest", e))?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    if !path.is_file() {
        return Err(Error::MissingCheckpoint(dir.to_path_buf()));
    }
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::BadCheckpoint(format!(
            "format version {} (expected {FORMAT_VERSION})",
            manifest.format_version
        )));
    }
    Ok(manifest)
}

pub fn load(dir: &Path, device: &Device) -> Result<(PortraitModel, Manifest)> {
    let manifest = read_manifest(dir)?;
    let dtype = parse_dtype(&manifest.dtype)?;
    let mut model = PortraitModel::build(&manifest.model, manifest.seed, dtype, device)?;
    if manifest.has_group(crate::temporal::GROUP) {
        model.insert_temporal()?;
    }
    let expected = model.store.groups_present();
    let listed: std::collections::BTreeSet<String> = manifest.modules.iter().map(|m| m.group.clone()).collect();
    if expected != listed {
        return Err(Error::BadCheckpoint(format!(
            "manifest lists groups {listed:?}, model has {expected:?}"
        )));
    }
    for m in &manifest.modules {
        let path = dir.join(&m.file);
        if !path.is_file() {
            return Err(Error::BadCheckpoint(format!("missing blob {}", path.display())));
        }
        let n = model.store.load_blob(&path)?;
        let (tensors, _, sha256) = group_digest(&model, &m.group)?;
        if n != tensors || sha256 != m.sha256 {
            return Err(Error::BadCheckpoint(format!("blob {} does not match its manifest entry", m.file)));
        }
    }
    Ok((model, manifest))
}
