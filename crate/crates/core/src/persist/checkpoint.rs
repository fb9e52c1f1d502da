use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::AgentModel;
use crate::numerics::{AdamState, Tensor};
use crate::scalar::Scalar;

use super::RunConfig;

pub const FORMAT_VERSION: u32 = 1;

/// A trained (or freshly initialized) model with its provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub config: RunConfig,
    pub seed: u64,
    /// Environment steps the parameters were trained for.
    pub step_count: u64,
    pub model: AgentModel<T>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Adam update count of this tensor.
    pub adam_steps: u64,
}

/// On-disk layout. The payload holds, per manifest entry, the parameter,
/// Adam first moment and Adam second moment, each as little-endian reals.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileRepr {
    format_version: u32,
    dtype: String,
    seed: u64,
    step_count: u64,
    config: RunConfig,
    manifest: Vec<ManifestEntry>,
    payload_sha256: String,
    payload: String,
}

#[derive(Deserialize)]
struct VersionProbe {
    format_version: u32,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

impl<T: Scalar> Checkpoint<T> {
    pub fn to_json(&self) -> Result<String> {
        let mut manifest = Vec::new();
        let mut payload = Vec::new();
        for (_, set) in self.model.param_sets() {
            for (name, t) in set.named_tensors() {
                let st = set.adam_state(&name).expect("optimizer state mirrors parameters");
                manifest.push(ManifestEntry {
                    name,
                    shape: t.shape().to_vec(),
                    adam_steps: st.step_count,
                });
                for src in [t, &st.m, &st.v] {
                    for &x in src.data() {
                        x.write_le(&mut payload);
                    }
                }
            }
        }
        let repr = FileRepr {
            format_version: FORMAT_VERSION,
            dtype: T::DTYPE.to_string(),
            seed: self.seed,
            step_count: self.step_count,
            config: self.config.clone(),
            manifest,
            payload_sha256: hex(&Sha256::digest(&payload)),
            payload: B64.encode(&payload),
        };
        Ok(serde_json::to_string(&repr)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let probe: VersionProbe =
            serde_json::from_str(text).map_err(|e| Error::Integrity(format!("unreadable checkpoint header: {e}")))?;
        if probe.format_version != FORMAT_VERSION {
            return Err(Error::UnsupportedVersion {
                found: probe.format_version,
                supported: FORMAT_VERSION,
            });
        }
        let repr: FileRepr =
            serde_json::from_str(text).map_err(|e| Error::Integrity(format!("malformed checkpoint: {e}")))?;
        if repr.dtype != T::DTYPE {
            return Err(Error::Data(format!(
                "checkpoint stores {} values, expected {}",
                repr.dtype,
                T::DTYPE
            )));
        }
        let payload = B64
            .decode(repr.payload.as_bytes())
            .map_err(|e| Error::Integrity(format!("payload is not valid base64: {e}")))?;
        if hex(&Sha256::digest(&payload)) != repr.payload_sha256 {
            return Err(Error::Integrity("payload digest mismatch".into()));
        }
        let expected: usize = repr.manifest.iter().map(|e| 3 * e.shape.iter().product::<usize>()).sum();
        if payload.len() != expected * T::BYTES {
            return Err(Error::Integrity(format!(
                "payload holds {} bytes, manifest describes {}",
                payload.len(),
                expected * T::BYTES
            )));
        }

        repr.config.model.validate()?;
        let mut model: AgentModel<T> = AgentModel::init(repr.config.model.clone(), 0)?;
        let names: Vec<String> = model
            .param_sets()
            .iter()
            .flat_map(|(_, s)| s.named_tensors().map(|(n, _)| n).collect::<Vec<_>>())
            .collect();
        let listed: Vec<&String> = repr.manifest.iter().map(|e| &e.name).collect();
        if names.iter().collect::<Vec<_>>() != listed {
            return Err(Error::Integrity("manifest does not match the configured architecture".into()));
        }

        let mut offset = 0;
        let mut read = |shape: &[usize]| -> Result<Tensor<T>> {
            let n: usize = shape.iter().product();
            let bytes = &payload[offset..offset + n * T::BYTES];
            offset += n * T::BYTES;
            Tensor::new(shape.to_vec(), bytes.chunks_exact(T::BYTES).map(T::read_le).collect())
        };
        for entry in &repr.manifest {
            let param = read(&entry.shape)?;
            let m = read(&entry.shape)?;
            let v = read(&entry.shape)?;
            let set = model
                .param_sets_mut()
                .into_iter()
                .find(|(n, _)| entry.name.starts_with(&format!("{n}.")))
                .map(|(_, s)| s)
                .expect("name checked above");
            let slot = set.tensor_mut(&entry.name).expect("name checked above");
            if slot.shape() != entry.shape.as_slice() {
                return Err(Error::Integrity(format!(
                    "manifest shape {:?} of `{}` disagrees with architecture {:?}",
                    entry.shape,
                    entry.name,
                    slot.shape()
                )));
            }
            *slot = param;
            set.set_adam_state(
                &entry.name,
                AdamState {
                    m,
                    v,
                    step_count: entry.adam_steps,
                },
            )?;
        }
        Ok(Checkpoint {
            config: repr.config,
            seed: repr.seed,
            step_count: repr.step_count,
            model,
        })
    }
}

/// Writes atomically via a temporary sibling file.
pub fn save_checkpoint<T: Scalar>(path: &Path, ckpt: &Checkpoint<T>) -> Result<()> {
    let text = ckpt.to_json()?;
    let tmp = path.with_extension("json.tmp");
    std::fs::write(&tmp, text)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    Checkpoint::from_json(&std::fs::read_to_string(path)?)
}
