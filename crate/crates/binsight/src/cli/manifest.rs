//! Dataset manifests: CSV rows binding image files to their labels and to a
//! train/val/test split. Split membership is data, never computed.

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};

use crate::byteplot::{lanczos_resize, load_png, ByteImage};
use crate::classify::{BinaryLabel, LabelHierarchy, Task};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn parse(s: &str) -> Result<Split> {
        match s.trim().to_ascii_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "val" | "validation" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Dataset(format!("unknown split `{other}`"))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone)]
pub struct ManifestRow {
    /// Absolute path (relative manifest entries are resolved against the
    /// manifest's own directory).
    pub image_path: PathBuf,
    pub binary_label: BinaryLabel,
    pub type_label: String,
    pub family_label: String,
    pub split: Split,
}

impl ManifestRow {
    /// Class label string for a task.
    pub fn label(&self, task: Task) -> &str {
        match task {
            Task::Binary => self.binary_label.as_str(),
            Task::Type => &self.type_label,
            Task::Family => &self.family_label,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct DatasetManifest {
    pub rows: Vec<ManifestRow>,
}

impl DatasetManifest {
    /// Loads and validates `image_path,binary_label,type_label,family_label,split`.
    ///
    /// Checks: header shape, every path exists, labels are present in the
    /// hierarchy and consistent with its binary mapping, and no path occurs
    /// in more than one split.
    pub fn load_csv(path: &Path, hierarchy: &LabelHierarchy) -> Result<DatasetManifest> {
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        let mut reader = csv::Reader::from_path(path)?;
        let headers = reader.headers()?.clone();
        let expected = ["image_path", "binary_label", "type_label", "family_label", "split"];
        if headers.iter().collect::<Vec<_>>() != expected {
            return Err(Error::Dataset(format!(
                "manifest header must be `{}`, got `{}`",
                expected.join(","),
                headers.iter().collect::<Vec<_>>().join(",")
            )));
        }

        let mut rows = Vec::new();
        let mut seen: BTreeMap<PathBuf, Split> = BTreeMap::new();
        for (i, record) in reader.records().enumerate() {
            let record = record?;
            let context = |msg: String| Error::Dataset(format!("manifest row {}: {msg}", i + 2));
            if record.len() != 5 {
                return Err(context(format!("expected 5 columns, got {}", record.len())));
            }
            let raw_path = Path::new(&record[0]);
            let image_path = if raw_path.is_absolute() {
                raw_path.to_path_buf()
            } else {
                base.join(raw_path)
            };
            if !image_path.is_file() {
                return Err(context(format!("image `{}` does not exist", image_path.display())));
            }
            let binary_label = BinaryLabel::parse(&record[1]).map_err(|e| context(e.to_string()))?;
            let type_label = record[2].to_string();
            let family_label = record[3].to_string();
            if !hierarchy.contains_type(&type_label) {
                return Err(context(format!("type `{type_label}` not in hierarchy")));
            }
            if !hierarchy.contains_family(&family_label) {
                return Err(context(format!("family `{family_label}` not in hierarchy")));
            }
            for (kind, mapped) in [
                ("type", hierarchy.type_binary(&type_label)?),
                ("family", hierarchy.family_binary(&family_label)?),
            ] {
                if mapped != binary_label {
                    return Err(context(format!(
                        "{kind} label maps to {} but the row says {}",
                        mapped.as_str(),
                        binary_label.as_str()
                    )));
                }
            }
            let split = Split::parse(&record[4]).map_err(|e| context(e.to_string()))?;
            if let Some(previous) = seen.get(&image_path) {
                if *previous != split {
                    return Err(context(format!(
                        "`{}` appears in both {} and {}",
                        image_path.display(),
                        previous.as_str(),
                        split.as_str()
                    )));
                }
            }
            seen.insert(image_path.clone(), split);
            rows.push(ManifestRow {
                image_path,
                binary_label,
                type_label,
                family_label,
                split,
            });
        }
        if rows.is_empty() {
            return Err(Error::Dataset("manifest has no rows".into()));
        }
        Ok(DatasetManifest { rows })
    }

    pub fn split(&self, split: Split) -> Vec<&ManifestRow> {
        self.rows.iter().filter(|r| r.split == split).collect()
    }

    /// Training-split label counts for a task (drives class re-balancing).
    pub fn train_counts(&self, task: Task) -> BTreeMap<String, u64> {
        let mut counts = BTreeMap::new();
        for row in self.split(Split::Train) {
            *counts.entry(row.label(task).to_string()).or_insert(0) += 1;
        }
        counts
    }

    /// Distinct labels used by this manifest for a task, in hierarchy order.
    pub fn used_labels(&self, task: Task, hierarchy: &LabelHierarchy) -> Vec<String> {
        let used: HashSet<&str> = self.rows.iter().map(|r| r.label(task)).collect();
        hierarchy
            .labels_for(task)
            .into_iter()
            .filter(|l| used.contains(l.as_str()))
            .collect()
    }
}

/// Loads a manifest row's PNG and resamples it to `side`² when needed.
pub fn load_row_image(row: &ManifestRow, side: usize, in_channels: usize) -> Result<ByteImage> {
    let img = load_png(&row.image_path)?;
    if img.channels != in_channels {
        return Err(Error::Geometry {
            expected: format!("{in_channels}-channel image at {}", row.image_path.display()),
            got: format!("{} channels", img.channels),
        });
    }
    let img = if img.width == side && img.height == side {
        img
    } else {
        lanczos_resize(&img, side, side)?
    };
    Ok(img)
}
