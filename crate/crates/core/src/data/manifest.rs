use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{read_dataset, DataError, Dataset, DomainSpec, NormStats, Split};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitFile {
    pub split: Split,
    /// Relative to the manifest's directory.
    pub path: PathBuf,
    pub count: usize,
}

/// JSON description of one domain on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainManifest {
    pub name: String,
    pub classes: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub stats: Option<NormStats>,
    #[serde(default)]
    pub decay: Option<f64>,
    pub files: Vec<SplitFile>,
    /// Generator parameters for synthetic domains.
    #[serde(default)]
    pub generator: Option<DomainSpec>,
}

impl DomainManifest {
    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        let text = serde_json::to_string_pretty(self).map_err(|e| DataError::Manifest(e.to_string()))?;
        std::fs::write(path, text + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| DataError::Manifest(format!("{}: {e}", path.display())))
    }

    pub fn file(&self, split: Split) -> Option<&SplitFile> {
        self.files.iter().find(|f| f.split == split)
    }

    /// Reads one split, resolving its path against `dir` and checking it
    /// against the recorded geometry and class count.
    pub fn read_split(&self, dir: &Path, split: Split) -> Result<Dataset, DataError> {
        let entry = self
            .file(split)
            .ok_or_else(|| DataError::Manifest(format!("domain {} has no {} split", self.name, split.as_str())))?;
        let mut ds = read_dataset(&dir.join(&entry.path))?;
        if (ds.channels, ds.height, ds.width) != (self.channels, self.height, self.width) || ds.len() != entry.count {
            return Err(DataError::Manifest(format!(
                "domain {} {} split does not match its manifest",
                self.name,
                split.as_str()
            )));
        }
        if let Some(&l) = ds.labels.iter().find(|&&l| l as usize >= self.classes) {
            return Err(DataError::Invalid(format!("label {l} outside {} classes", self.classes)));
        }
        ds.split = Some(split);
        Ok(ds)
    }
}
