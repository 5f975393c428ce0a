//! On-disk dataset layout shared by the shapes testbed, the corruption
//! deriver and the CLI: `images/`, `masks/`, `index.jsonl`.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One image/mask pair of a source dataset.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct DatasetEntry {
    pub id: String,
    pub image: PathBuf,
    pub mask: PathBuf,
}

/// A materialized dataset directory.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub entries: Vec<DatasetEntry>,
}

impl Dataset {
    pub fn load(root: &Path) -> Result<Self> {
        let index = root.join("index.jsonl");
        let file = fs::File::open(&index)
            .map_err(|e| Error::invalid(format!("cannot open {}: {e}", index.display())))?;
        let mut entries = Vec::new();
        for line in BufReader::new(file).lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            entries.push(serde_json::from_str::<DatasetEntry>(&line)?);
        }
        if entries.is_empty() {
            return Err(Error::Empty(format!("dataset index {}", index.display())));
        }
        Ok(Dataset {
            root: root.to_path_buf(),
            entries,
        })
    }

    pub fn save_index(&self) -> Result<()> {
        let mut file = fs::File::create(self.root.join("index.jsonl"))?;
        for entry in &self.entries {
            writeln!(file, "{}", serde_json::to_string(entry)?)?;
        }
        Ok(())
    }

    pub fn image_path(&self, entry: &DatasetEntry) -> PathBuf {
        resolve(&self.root, &entry.image)
    }

    pub fn mask_path(&self, entry: &DatasetEntry) -> PathBuf {
        resolve(&self.root, &entry.mask)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

pub(crate) fn resolve(root: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        root.join(p)
    }
}

/// Create `images/` and `masks/` under `root`.
pub fn init_layout(root: &Path) -> Result<()> {
    fs::create_dir_all(root.join("images"))?;
    fs::create_dir_all(root.join("masks"))?;
    Ok(())
}
