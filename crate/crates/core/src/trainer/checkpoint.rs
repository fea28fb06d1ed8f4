//! Checkpoint directories: `manifest.json` plus a little-endian `params.bin`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{OptimizerStates, TrainConfig};
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::networks::{init_model, GeneratorConfig, ModelState};
use crate::scalar::Scalar;

pub const CHECKPOINT_VERSION: &str = "pfcpgan-ckpt-1";
const MANIFEST: &str = "manifest.json";
const PAYLOAD: &str = "params.bin";

pub fn checkpoint_dir_name(step: u64) -> String {
    format!("step_{step:06}")
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Byte offset into `params.bin`.
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Seeds {
    pub model: u64,
    pub batches: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub version: String,
    pub step: u64,
    pub dtype: String,
    pub train_config: TrainConfig,
    pub loss_config: LossConfig,
    pub model_config: GeneratorConfig,
    pub seeds: Seeds,
    /// Adam step counters per optimised network.
    pub optimizer_steps: BTreeMap<String, u64>,
    pub arrays: Vec<ArrayEntry>,
    /// `sha256:<hex>` of `params.bin`.
    pub digest: String,
}

impl CheckpointManifest {
    /// Names of model parameter arrays (optimizer moments excluded).
    pub fn model_array_names(&self) -> Vec<&str> {
        self.arrays
            .iter()
            .map(|a| a.name.as_str())
            .filter(|n| !n.starts_with("adam."))
            .collect()
    }
}

fn sha256_tag(bytes: &[u8]) -> String {
    format!("sha256:{}", hex::encode(Sha256::digest(bytes)))
}

fn moment_names<T: Scalar>(state: &ModelState<T>, group: &str) -> Vec<(String, Vec<usize>)> {
    state
        .named_params()
        .into_iter()
        .filter(|(n, _)| n.starts_with(group) && n.as_bytes().get(group.len()) == Some(&b'.'))
        .map(|(n, p)| (n[group.len() + 1..].to_string(), p.shape.clone()))
        .collect()
}

/// Writes `state` and optimizer moments to the directory `path`.
pub fn save_checkpoint<T: Scalar>(
    state: &ModelState<T>,
    opt: &OptimizerStates<T>,
    config: &TrainConfig,
    path: &Path,
) -> Result<CheckpointManifest> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))?;
    let mut payload = Vec::new();
    let mut arrays = Vec::new();
    let mut push = |name: String, shape: Vec<usize>, data: &[T], payload: &mut Vec<u8>| {
        arrays.push(ArrayEntry {
            name,
            shape,
            dtype: T::DTYPE.to_string(),
            offset: payload.len() as u64,
        });
        for &v in data {
            v.write_le(payload);
        }
    };
    for (name, p) in state.named_params() {
        push(name, p.shape.clone(), &p.data, &mut payload);
    }
    let mut optimizer_steps = BTreeMap::new();
    for (group, st) in opt.groups() {
        optimizer_steps.insert(group.to_string(), st.t);
        let names = moment_names(state, group);
        for (kind, moments) in [("m", &st.m), ("v", &st.v)] {
            for ((name, shape), data) in names.iter().zip(moments) {
                push(format!("adam.{group}.{kind}.{name}"), shape.clone(), data, &mut payload);
            }
        }
    }
    let manifest = CheckpointManifest {
        version: CHECKPOINT_VERSION.to_string(),
        step: state.step,
        dtype: T::DTYPE.to_string(),
        train_config: config.clone(),
        loss_config: config.loss_config.clone(),
        model_config: state.config.clone(),
        seeds: Seeds {
            model: state.seed,
            batches: config.seed,
        },
        optimizer_steps,
        arrays,
        digest: sha256_tag(&payload),
    };
    let payload_path = path.join(PAYLOAD);
    fs::write(&payload_path, &payload).map_err(|e| Error::io(&payload_path, e))?;
    let manifest_path = path.join(MANIFEST);
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Checkpoint(format!("serialising manifest: {e}")))?;
    fs::write(&manifest_path, json).map_err(|e| Error::io(&manifest_path, e))?;
    Ok(manifest)
}

fn read_verified(path: &Path) -> Result<(CheckpointManifest, Vec<u8>)> {
    let manifest_path = path.join(MANIFEST);
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let raw: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", manifest_path.display())))?;
    let version = raw.get("version").and_then(|v| v.as_str()).unwrap_or("<missing>");
    if version != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch {
            expected: CHECKPOINT_VERSION.to_string(),
            found: version.to_string(),
        });
    }
    let manifest: CheckpointManifest = serde_json::from_value(raw)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", manifest_path.display())))?;
    let payload_path = path.join(PAYLOAD);
    let payload = fs::read(&payload_path).map_err(|e| Error::io(&payload_path, e))?;
    let found = sha256_tag(&payload);
    if found != manifest.digest {
        return Err(Error::DigestMismatch {
            path: payload_path,
            expected: manifest.digest.clone(),
            found,
        });
    }
    Ok((manifest, payload))
}

/// The manifest of a checkpoint, after version and digest checks.
pub fn read_manifest(path: &Path) -> Result<CheckpointManifest> {
    read_verified(path).map(|(m, _)| m)
}

fn dtype_bytes(dtype: &str) -> Result<usize> {
    match dtype {
        "f32" => Ok(4),
        "f64" => Ok(8),
        other => Err(Error::Checkpoint(format!("unknown dtype `{other}`"))),
    }
}

fn slice_entry<'a>(entry: &ArrayEntry, payload: &'a [u8]) -> Result<&'a [u8]> {
    let count: usize = entry.shape.iter().product();
    let bytes = count * dtype_bytes(&entry.dtype)?;
    let start = entry.offset as usize;
    payload.get(start..start + bytes).ok_or_else(|| {
        Error::Checkpoint(format!(
            "array {} overruns the payload ({} bytes at {start})",
            entry.name, bytes
        ))
    })
}

fn decode<T: Scalar>(entry: &ArrayEntry, payload: &[u8]) -> Result<Vec<T>> {
    if entry.dtype != T::DTYPE {
        return Err(Error::Checkpoint(format!(
            "array {} is {}, expected {}",
            entry.name,
            entry.dtype,
            T::DTYPE
        )));
    }
    let bytes = slice_entry(entry, payload)?;
    Ok(bytes.chunks_exact(T::BYTES).map(T::read_le).collect())
}

fn fill<T: Scalar>(
    index: &BTreeMap<&str, &ArrayEntry>,
    payload: &[u8],
    name: &str,
    shape: &[usize],
) -> Result<Vec<T>> {
    let entry = index
        .get(name)
        .ok_or_else(|| Error::MissingArray(name.to_string()))?;
    if entry.shape != shape {
        return Err(Error::Dimension(format!(
            "array {name} has shape {:?}, model expects {shape:?}",
            entry.shape
        )));
    }
    decode(entry, payload)
}

/// Restores model, optimizer moments and training config; the payload digest
/// is verified before anything is decoded.
pub fn load_checkpoint<T: Scalar>(
    path: &Path,
) -> Result<(ModelState<T>, OptimizerStates<T>, TrainConfig)> {
    let (manifest, payload) = read_verified(path)?;
    if manifest.dtype != T::DTYPE {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {} arrays; requested precision is {}",
            manifest.dtype,
            T::DTYPE
        )));
    }
    // Build the skeleton without external weight hooks; every array is
    // overwritten from the payload anyway.
    let skeleton_cfg = GeneratorConfig {
        encoder_weights: None,
        perceptual_weights: None,
        ..manifest.model_config.clone()
    };
    let mut state = init_model::<T>(&skeleton_cfg, manifest.seeds.model)?;
    state.config = manifest.model_config.clone();
    state.step = manifest.step;
    let index: BTreeMap<&str, &ArrayEntry> =
        manifest.arrays.iter().map(|a| (a.name.as_str(), a)).collect();

    let names: Vec<(String, Vec<usize>)> = state
        .named_params()
        .into_iter()
        .map(|(n, p)| (n, p.shape.clone()))
        .collect();
    for ((name, shape), param) in names.iter().zip(state.params_mut()) {
        param.data = fill(&index, &payload, name, shape)?;
    }

    let mut opt = OptimizerStates::new(&state);
    let groups: Vec<(&str, Vec<(String, Vec<usize>)>)> = ["gen_profile", "gen_frontal", "disc_profile", "disc_frontal"]
        .into_iter()
        .map(|g| (g, moment_names(&state, g)))
        .collect();
    for ((group, st), (_, names)) in opt.groups_mut().into_iter().zip(&groups) {
        st.t = *manifest
            .optimizer_steps
            .get(group)
            .ok_or_else(|| Error::MissingArray(format!("optimizer step counter {group}")))?;
        for (kind, moments) in [("m", &mut st.m), ("v", &mut st.v)] {
            for ((name, shape), buf) in names.iter().zip(moments.iter_mut()) {
                *buf = fill(&index, &payload, &format!("adam.{group}.{kind}.{name}"), shape)?;
            }
        }
    }
    let mut config = manifest.train_config.clone();
    config.loss_config = manifest.loss_config.clone();
    Ok((state, opt, config))
}

/// Every array of a checkpoint widened to `f64`, keyed by name. Used to import
/// externally trained weights.
pub fn read_named_arrays(path: &Path) -> Result<BTreeMap<String, (Vec<usize>, Vec<f64>)>> {
    let (manifest, payload) = read_verified(path)?;
    let mut out = BTreeMap::new();
    for entry in &manifest.arrays {
        let values = match entry.dtype.as_str() {
            "f32" => decode::<f32>(entry, &payload)?
                .into_iter()
                .map(f64::from)
                .collect(),
            _ => decode::<f64>(entry, &payload)?,
        };
        out.insert(entry.name.clone(), (entry.shape.clone(), values));
    }
    Ok(out)
}
