//! File-backed session persistence: one directory per session holding the
//! volume (and label) as PVOL1 files plus a JSON state file.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use propaseg_core::orchestrator::SessionConfig;
use propaseg_core::volume::{load_mask, load_volume, save_mask, save_volume, Dims3, MaskVolume, Spacing, Volume};
use propaseg_core::{Error, Result};

use crate::rle::RleMask;

pub const VOLUME_FILE: &str = "volume.pvol";
pub const LABEL_FILE: &str = "label.pvol";
pub const STATE_FILE: &str = "state.json";

pub fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoredEdit {
    pub slice: usize,
    pub mask: RleMask,
}

/// Everything needed to rebuild a session after a restart; edits are
/// replayed in order on load.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionRecord {
    pub id: String,
    pub model_id: String,
    pub use_fusion: bool,
    pub config: SessionConfig,
    pub dims: Dims3,
    pub spacing: Spacing,
    pub channels: usize,
    pub has_label: bool,
    /// Where the volume came from: a path, `upload`, or `phantom`.
    pub source: String,
    pub created_ms: u64,
    pub updated_ms: u64,
    pub edits: Vec<StoredEdit>,
}

fn valid_id(id: &str) -> bool {
    !id.is_empty() && id.len() <= 64 && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-')
}

#[derive(Clone, Debug)]
pub struct SessionStore {
    dir: PathBuf,
}

impl SessionStore {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn root(&self, id: &str) -> Result<PathBuf> {
        if !valid_id(id) {
            return Err(Error::Validation(format!("malformed session id {id:?}")));
        }
        Ok(self.dir.join(id))
    }

    pub fn exists(&self, id: &str) -> bool {
        self.root(id).map(|r| r.join(STATE_FILE).is_file()).unwrap_or(false)
    }

    pub fn create(&self, record: &SessionRecord, volume: &Volume, label: Option<&MaskVolume>) -> Result<()> {
        let root = self.root(&record.id)?;
        std::fs::create_dir_all(&root)?;
        save_volume(volume, root.join(VOLUME_FILE))?;
        if let Some(l) = label {
            save_mask(l, root.join(LABEL_FILE))?;
        }
        self.save_state(record)
    }

    /// Replace the state file atomically.
    pub fn save_state(&self, record: &SessionRecord) -> Result<()> {
        let root = self.root(&record.id)?;
        let tmp = root.join(format!("{STATE_FILE}.tmp"));
        std::fs::write(&tmp, serde_json::to_vec_pretty(record)?)?;
        std::fs::rename(tmp, root.join(STATE_FILE))?;
        Ok(())
    }

    pub fn load(&self, id: &str) -> Result<(SessionRecord, Volume, Option<MaskVolume>)> {
        let root = self.root(id)?;
        let record: SessionRecord = serde_json::from_slice(&std::fs::read(root.join(STATE_FILE))?)?;
        let volume = load_volume(root.join(VOLUME_FILE))?;
        let label = if record.has_label {
            Some(load_mask(root.join(LABEL_FILE))?)
        } else {
            None
        };
        Ok((record, volume, label))
    }
}
