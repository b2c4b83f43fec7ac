//! Checkpoint directories: raw parameter blobs plus a plain-text manifest.
//!
//! Tensors are stored as a single binary file of named, shape-tagged blobs in
//! the tape's native element width, so a save/load round trip reproduces
//! bit-identical forward passes. The manifest records the architecture, epoch,
//! global seed, and a hash of the optimizer state.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use sha2::Digest;

use crate::autodiff::Real;
use crate::error::{Error, Result};
use crate::nets::{UNet, UNetConfig};
use crate::optim::Adam;

const TENSOR_MAGIC: &[u8; 8] = b"OCTTNSR1";

fn float_width<F: Real>() -> u8 {
    std::mem::size_of::<F>() as u8
}

/// Writes named tensors as `magic, count, [name, ndim, dims, data]*`.
pub fn write_named_tensors<'a, F: Real>(
    path: &Path,
    tensors: impl Iterator<Item = (&'a str, &'a ArrayD<F>)>,
) -> Result<()> {
    let entries: Vec<(&str, &ArrayD<F>)> = tensors.collect();
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(TENSOR_MAGIC);
    buf.push(float_width::<F>());
    buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, tensor) in entries {
        let name_bytes = name.as_bytes();
        buf.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
        buf.extend_from_slice(name_bytes);
        buf.push(tensor.ndim() as u8);
        for d in tensor.shape() {
            buf.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        for v in tensor.iter() {
            let x = v.to_f64().expect("tensor value");
            match float_width::<F>() {
                4 => buf.extend_from_slice(&(x as f32).to_le_bytes()),
                _ => buf.extend_from_slice(&x.to_le_bytes()),
            }
        }
    }
    std::fs::write(path, &buf).map_err(|e| Error::io(path, e))
}

/// Reads a named-tensor file written by [`write_named_tensors`].
pub fn read_named_tensors<F: Real>(path: &Path) -> Result<BTreeMap<String, ArrayD<F>>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let fail = |msg: &str| Error::Checkpoint(format!("{}: {msg}", path.display()));
    if bytes.len() < 13 || &bytes[..8] != TENSOR_MAGIC {
        return Err(fail("not a tensor blob file"));
    }
    let width = bytes[8];
    if width != float_width::<F>() {
        return Err(fail(&format!(
            "stored element width {width} does not match requested width {}",
            float_width::<F>()
        )));
    }
    let count = u32::from_le_bytes(bytes[9..13].try_into().unwrap()) as usize;
    let mut offset = 13usize;
    let mut out = BTreeMap::new();
    for _ in 0..count {
        let take = |offset: &mut usize, n: usize| -> Result<&[u8]> {
            let slice = bytes
                .get(*offset..*offset + n)
                .ok_or_else(|| fail("truncated tensor file"))?;
            *offset += n;
            Ok(slice)
        };
        let name_len = u16::from_le_bytes(take(&mut offset, 2)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(&mut offset, name_len)?.to_vec())
            .map_err(|_| fail("invalid tensor name"))?;
        let ndim = take(&mut offset, 1)?[0] as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(u64::from_le_bytes(take(&mut offset, 8)?.try_into().unwrap()) as usize);
        }
        let len: usize = dims.iter().product();
        let data = take(&mut offset, len * width as usize)?;
        let values: Vec<F> = match width {
            4 => data
                .chunks_exact(4)
                .map(|c| crate::autodiff::c::<F>(f32::from_le_bytes(c.try_into().unwrap()) as f64))
                .collect(),
            _ => data
                .chunks_exact(8)
                .map(|c| crate::autodiff::c::<F>(f64::from_le_bytes(c.try_into().unwrap())))
                .collect(),
        };
        let tensor = ArrayD::from_shape_vec(IxDyn(&dims), values)
            .map_err(|_| fail("tensor shape/data mismatch"))?;
        out.insert(name, tensor);
    }
    Ok(out)
}

/// SHA-256 over tensor bytes, for the frozen-parameter and optimizer-state
/// fingerprints recorded in manifests.
pub fn hash_tensors<'a, F: Real>(tensors: impl Iterator<Item = &'a ArrayD<F>>) -> String {
    let mut hasher = sha2::Sha256::new();
    for tensor in tensors {
        for d in tensor.shape() {
            hasher.update((*d as u64).to_le_bytes());
        }
        for v in tensor.iter() {
            let x = v.to_f64().expect("tensor value");
            match float_width::<F>() {
                4 => hasher.update((x as f32).to_le_bytes()),
                _ => hasher.update(x.to_le_bytes()),
            }
        }
    }
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Plain-text manifest stored beside the parameter blobs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointManifest {
    /// "detector" or "processor".
    pub kind: String,
    pub config: UNetConfig,
    pub epoch: usize,
    pub global_seed: u64,
    /// Spatial size the network was trained at; inference resizes to this.
    pub input_size: (usize, usize),
    pub element_width: u8,
    pub param_hash: String,
    pub optimizer_state_hash: String,
    pub base_learning_rate: f64,
}

/// A trained network together with its manifest and optimizer state.
pub struct Checkpoint<F: Real> {
    pub manifest: CheckpointManifest,
    pub net: UNet<F>,
    pub optimizer: Option<Adam<F>>,
}

impl<F: Real> Checkpoint<F> {
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_named_tensors::<F>(
            &dir.join("params.bin"),
            self.net.names.iter().map(|n| n.as_str()).zip(self.net.params.iter()),
        )?;
        let mut manifest = self.manifest.clone();
        manifest.element_width = float_width::<F>();
        manifest.param_hash = hash_tensors::<F>(self.net.params.iter());
        if let Some(adam) = &self.optimizer {
            let step = adam_step_tensor(adam);
            let mut named = adam_named_tensors(&self.net.names, adam);
            named.push((step.0.clone(), &step.1));
            write_named_tensors::<F>(
                &dir.join("optimizer.bin"),
                named.iter().map(|(n, t)| (n.as_str(), *t)),
            )?;
            manifest.optimizer_state_hash = hash_tensors::<F>(adam.m.iter().chain(adam.v.iter()));
        } else {
            manifest.optimizer_state_hash = String::new();
        }
        let json = serde_json::to_string_pretty(&manifest)
            .map_err(|e| Error::Checkpoint(format!("manifest encode: {e}")))?;
        let path = dir.join("manifest.json");
        let mut f = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        f.write_all(json.as_bytes()).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Checkpoint<F>> {
        let manifest_path = dir.join("manifest.json");
        let json = std::fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let manifest: CheckpointManifest = serde_json::from_str(&json)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", manifest_path.display())))?;
        let blobs = read_named_tensors::<F>(&dir.join("params.bin"))?;
        let mut net = UNet::<F>::init(manifest.config.clone(), 0)?;
        for (name, param) in net.names.iter().zip(net.params.iter_mut()) {
            let loaded = blobs.get(name).ok_or_else(|| {
                Error::Checkpoint(format!("{}: missing tensor {name}", dir.display()))
            })?;
            if loaded.shape() != param.shape() {
                return Err(Error::Checkpoint(format!(
                    "{}: tensor {name} has shape {:?}, manifest architecture expects {:?}",
                    dir.display(),
                    loaded.shape(),
                    param.shape()
                )));
            }
            *param = loaded.clone();
        }
        let expected = hash_tensors::<F>(net.params.iter());
        if manifest.param_hash != expected {
            return Err(Error::Checkpoint(format!(
                "{}: parameter hash mismatch (file corrupt?)",
                dir.display()
            )));
        }
        let opt_path = dir.join("optimizer.bin");
        let optimizer = if opt_path.is_file() {
            let blobs = read_named_tensors::<F>(&opt_path)?;
            Some(adam_from_named_tensors(&net.names, &blobs, dir)?)
        } else {
            None
        };
        Ok(Checkpoint { manifest, net, optimizer })
    }
}

fn adam_named_tensors<'a, F: Real>(
    param_names: &'a [String],
    adam: &'a Adam<F>,
) -> Vec<(String, &'a ArrayD<F>)> {
    let mut named = Vec::new();
    for (name, m) in param_names.iter().zip(adam.m.iter()) {
        named.push((format!("adam.m.{name}"), m));
    }
    for (name, v) in param_names.iter().zip(adam.v.iter()) {
        named.push((format!("adam.v.{name}"), v));
    }
    named
}

static ADAM_STEP_KEY: &str = "adam.t";

fn adam_from_named_tensors<F: Real>(
    param_names: &[String],
    blobs: &BTreeMap<String, ArrayD<F>>,
    dir: &Path,
) -> Result<Adam<F>> {
    let mut adam = Adam::new();
    let missing = |name: &str| Error::Checkpoint(format!("{}: missing tensor {name}", dir.display()));
    for name in param_names {
        let key = format!("adam.m.{name}");
        adam.m.push(blobs.get(&key).ok_or_else(|| missing(&key))?.clone());
        let key = format!("adam.v.{name}");
        adam.v.push(blobs.get(&key).ok_or_else(|| missing(&key))?.clone());
    }
    if let Some(t) = blobs.get(ADAM_STEP_KEY) {
        adam.t = t.iter().next().and_then(|v| v.to_f64()).unwrap_or(0.0) as u64;
    }
    Ok(adam)
}

/// Appends the scalar step counter to the optimizer tensor list at save time.
pub(crate) fn adam_step_tensor<F: Real>(adam: &Adam<F>) -> (String, ArrayD<F>) {
    (
        ADAM_STEP_KEY.to_string(),
        ArrayD::from_elem(IxDyn(&[1]), crate::autodiff::c::<F>(adam.t as f64)),
    )
}
