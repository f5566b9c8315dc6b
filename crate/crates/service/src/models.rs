//! Read-only model registry backed by a directory of checkpoints.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

use serde::Serialize;

use propaseg_core::backbone::{load_backbone, save_backbone, BackboneManifest, LossKind, SegModel};
use propaseg_core::fusion::{load_fusion, save_fusion, FusionModel};
use propaseg_core::Result;

use crate::error::{ApiError, ApiResult};

pub const BACKBONE_FILE: &str = "backbone.ckpt";
pub const FUSION_FILE: &str = "fusion.ckpt";

#[derive(Debug)]
pub struct LoadedModel {
    pub id: String,
    pub seg: Arc<SegModel<f32>>,
    pub fusion: Option<Arc<FusionModel<f32>>>,
    pub manifest: BackboneManifest,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ModelChecksums {
    pub id: String,
    pub backbone_sha256: String,
    pub fusion_sha256: Option<String>,
}

impl LoadedModel {
    /// Hashes recomputed from the in-memory weights.
    pub fn checksums(&self) -> ModelChecksums {
        ModelChecksums {
            id: self.id.clone(),
            backbone_sha256: self.seg.checksum(),
            fusion_sha256: self.fusion.as_ref().map(|f| f.checksum()),
        }
    }
}

/// Write a model directory `<dir>/<id>/` the registry can serve.
pub fn install_model(
    dir: &Path,
    id: &str,
    seg: &SegModel<f32>,
    loss: LossKind,
    fusion: Option<&FusionModel<f32>>,
) -> Result<PathBuf> {
    let root = dir.join(id);
    std::fs::create_dir_all(&root)?;
    save_backbone(seg, loss, root.join(BACKBONE_FILE))?;
    if let Some(f) = fusion {
        save_fusion(f, root.join(FUSION_FILE))?;
    }
    Ok(root)
}

/// Models are loaded on first use and then shared by all sessions.
#[derive(Debug)]
pub struct ModelRegistry {
    dir: PathBuf,
    loaded: RwLock<HashMap<String, Arc<LoadedModel>>>,
}

fn valid_id(id: &str) -> bool {
    !id.is_empty() && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.') && id != "." && id != ".."
}

impl ModelRegistry {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self {
            dir: dir.into(),
            loaded: RwLock::new(HashMap::new()),
        }
    }

    /// Ids with a backbone checkpoint on disk, sorted.
    pub fn available(&self) -> Vec<String> {
        let mut ids: Vec<String> = std::fs::read_dir(&self.dir)
            .into_iter()
            .flatten()
            .flatten()
            .filter(|e| e.path().join(BACKBONE_FILE).is_file())
            .filter_map(|e| e.file_name().into_string().ok())
            .collect();
        ids.sort();
        ids
    }

    pub fn get(&self, id: &str) -> ApiResult<Arc<LoadedModel>> {
        if let Some(m) = self.loaded.read().expect("registry lock").get(id) {
            return Ok(m.clone());
        }
        let root = self.dir.join(id);
        if !valid_id(id) || !root.join(BACKBONE_FILE).is_file() {
            return Err(ApiError::not_found("model_not_found", format!("no model {id:?}")));
        }
        let (seg, manifest) = load_backbone(root.join(BACKBONE_FILE))
            .map_err(|e| ApiError::internal(format!("model {id:?}: {e}")))?;
        let fusion = match root.join(FUSION_FILE) {
            p if p.is_file() => Some(Arc::new(
                load_fusion(&p, &seg)
                    .map_err(|e| ApiError::internal(format!("model {id:?} fusion: {e}")))?
                    .0,
            )),
            _ => None,
        };
        let model = Arc::new(LoadedModel {
            id: id.to_string(),
            seg: Arc::new(seg),
            fusion,
            manifest,
        });
        let mut map = self.loaded.write().expect("registry lock");
        Ok(map.entry(id.to_string()).or_insert(model).clone())
    }
}
