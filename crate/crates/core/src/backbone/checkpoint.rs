//! Weight checkpoints: a magic line, a JSON manifest line, then raw `f32`
//! little-endian parameters.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{BackboneConfig, LossKind, SegModel};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8] = b"PSEGCKPT1\n";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneManifest {
    pub kind: String,
    pub arch: BackboneConfig,
    pub arch_hash: String,
    pub tap_level: usize,
    pub loss: LossKind,
    pub param_count: usize,
    pub weights_sha256: String,
}

impl BackboneManifest {
    pub const KIND: &'static str = "backbone";

    pub fn for_model(model: &SegModel<f32>, loss: LossKind) -> Self {
        Self {
            kind: Self::KIND.into(),
            arch: model.config.clone(),
            arch_hash: model.config.arch_hash(),
            tap_level: model.config.tap_level,
            loss,
            param_count: model.param_count(),
            weights_sha256: model.checksum(),
        }
    }
}

pub(crate) fn write_checkpoint<M: Serialize>(path: &Path, manifest: &M, params: &[&[f32]]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    out.write_all(CHECKPOINT_MAGIC)?;
    serde_json::to_writer(&mut out, manifest)?;
    out.write_all(b"\n")?;
    for p in params {
        for v in *p {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

pub(crate) fn read_checkpoint<M: DeserializeOwned>(path: &Path) -> Result<(M, Vec<f32>)> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let mut magic = vec![0u8; CHECKPOINT_MAGIC.len()];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Format("checkpoint truncated before magic".into()))?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a checkpoint file".into()));
    }
    let mut line = String::new();
    r.read_line(&mut line)?;
    let manifest: M = serde_json::from_str(line.trim_end())
        .map_err(|e| Error::Format(format!("bad checkpoint manifest: {e}")))?;
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() % 4 != 0 {
        return Err(Error::Format("checkpoint payload is not a whole number of f32".into()));
    }
    let params = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok((manifest, params))
}

/// Copy a flat parameter vector into `slots`, in order.
pub(crate) fn scatter_params(flat: &[f32], slots: Vec<&mut Vec<f32>>) -> Result<()> {
    let need: usize = slots.iter().map(|s| s.len()).sum();
    if need != flat.len() {
        return Err(Error::Mismatch(format!(
            "checkpoint holds {} parameters, architecture needs {need}",
            flat.len()
        )));
    }
    let mut off = 0;
    for s in slots {
        let n = s.len();
        s.copy_from_slice(&flat[off..off + n]);
        off += n;
    }
    Ok(())
}

pub fn save_backbone(model: &SegModel<f32>, loss: LossKind, path: impl AsRef<Path>) -> Result<BackboneManifest> {
    let manifest = BackboneManifest::for_model(model, loss);
    let params: Vec<&[f32]> = model
        .convs()
        .into_iter()
        .flat_map(|c| [c.weight.as_slice(), c.bias.as_slice()])
        .collect();
    write_checkpoint(path.as_ref(), &manifest, &params)?;
    Ok(manifest)
}

/// Load a backbone, verifying the manifest against the payload.
pub fn load_backbone(path: impl AsRef<Path>) -> Result<(SegModel<f32>, BackboneManifest)> {
    let (manifest, flat): (BackboneManifest, _) = read_checkpoint(path.as_ref())?;
    if manifest.kind != BackboneManifest::KIND {
        return Err(Error::Mismatch(format!("expected a backbone checkpoint, found {:?}", manifest.kind)));
    }
    if manifest.arch_hash != manifest.arch.arch_hash() {
        return Err(Error::Mismatch("architecture hash does not match architecture".into()));
    }
    if manifest.tap_level != manifest.arch.tap_level {
        return Err(Error::Mismatch("tap level disagrees with architecture".into()));
    }
    let mut model = SegModel::<f32>::new(manifest.arch.clone())?;
    if manifest.param_count != model.param_count() {
        return Err(Error::Mismatch(format!(
            "manifest declares {} parameters, architecture has {}",
            manifest.param_count,
            model.param_count()
        )));
    }
    let slots = model
        .convs_mut()
        .into_iter()
        .flat_map(|c| [&mut c.weight, &mut c.bias])
        .collect();
    scatter_params(&flat, slots)?;
    if model.checksum() != manifest.weights_sha256 {
        return Err(Error::Mismatch("weight checksum does not match manifest".into()));
    }
    Ok((model, manifest))
}
