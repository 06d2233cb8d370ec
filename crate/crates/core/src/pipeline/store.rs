//! Disk-backed volume and instance sources.

use std::borrow::Cow;
use std::collections::HashMap;
use std::path::{Path, PathBuf};

use crate::dataset::{InstanceRow, Label, Manifest};
use crate::ensemble_eval::VolumeStore;
use crate::error::{Error, Result};
use crate::model::InstanceSource;
use crate::volume::{load_volume, Volume};

/// `path` itself when absolute, else joined onto `base`.
pub fn resolve(base: &Path, path: &str) -> PathBuf {
    let p = Path::new(path);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Registered volumes read from disk on every request.
#[derive(Debug, Clone, Default)]
pub struct DiskVolumeStore {
    paths: HashMap<String, PathBuf>,
}

impl DiskVolumeStore {
    /// Registered paths of `manifest`, relative to `base`.
    pub fn registered(manifest: &Manifest, base: &Path) -> Result<Self> {
        let mut paths = HashMap::new();
        for s in &manifest.subjects {
            if s.registered_path.is_empty() {
                return Err(Error::InvalidArgument(format!("subject {} has no registered volume", s.subject_id)));
            }
            paths.insert(s.subject_id.clone(), resolve(base, &s.registered_path));
        }
        Ok(DiskVolumeStore { paths })
    }
}

impl VolumeStore for DiskVolumeStore {
    fn volume(&self, subject_id: &str) -> Result<Cow<'_, Volume>> {
        let path = self
            .paths
            .get(subject_id)
            .ok_or_else(|| Error::InvalidArgument(format!("no volume for subject {subject_id}")))?;
        Ok(Cow::Owned(load_volume(path)?))
    }
}

/// Persisted instances, loaded lazily.
#[derive(Debug, Clone, Default)]
pub struct DiskInstances {
    pub rows: Vec<InstanceRow>,
    base: PathBuf,
}

impl DiskInstances {
    pub fn new(rows: Vec<InstanceRow>, base: impl Into<PathBuf>) -> Self {
        DiskInstances { rows, base: base.into() }
    }

    pub fn path(&self, i: usize) -> PathBuf {
        resolve(&self.base, &self.rows[i].path)
    }
}

impl InstanceSource for DiskInstances {
    fn len(&self) -> usize {
        self.rows.len()
    }

    fn label(&self, i: usize) -> Label {
        self.rows[i].label
    }

    fn load(&self, i: usize) -> Result<Cow<'_, [f32]>> {
        Ok(Cow::Owned(load_volume(self.path(i))?.into_data()))
    }
}
