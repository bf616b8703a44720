//! Bags, datasets, manifests and splits.

mod bagfile;
mod splits;
mod synthetic;

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{HmilError, Result};
use crate::hierarchy::Taxonomy;
use crate::tensor::Matrix;

pub use bagfile::{decode_bag, encode_bag, read_bag_file, read_csv_bag, write_bag_file, BAG_MAGIC};
pub use splits::{make_splits, SplitScheme, StratifyOn};
pub use synthetic::{generate_synthetic, SyntheticConfig};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
    #[default]
    Unassigned,
}

impl std::str::FromStr for Split {
    type Err = HmilError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" | "valid" | "validation" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            "unassigned" | "" => Ok(Split::Unassigned),
            other => Err(HmilError::Data(format!("unknown split `{other}`"))),
        }
    }
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
            Split::Unassigned => "unassigned",
        }
    }
}

/// One bag: an `N x d` instance feature matrix with its two labels.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBag {
    pub bag_id: String,
    pub features: Matrix,
    pub y_f: usize,
    pub y_c: usize,
    pub split: Split,
}

impl FeatureBag {
    pub fn num_instances(&self) -> usize {
        self.features.rows()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub taxonomy: Taxonomy,
    pub bags: Vec<FeatureBag>,
    pub d: usize,
}

impl Dataset {
    /// Checks ids, labels, widths and the coarse/fine label agreement.
    pub fn new(taxonomy: Taxonomy, bags: Vec<FeatureBag>, d: usize) -> Result<Self> {
        if bags.is_empty() {
            return Err(HmilError::Data("dataset empty".into()));
        }
        let mut ids = HashSet::new();
        for b in &bags {
            if !ids.insert(b.bag_id.as_str()) {
                return Err(HmilError::Data(format!("duplicate bag id `{}`", b.bag_id)));
            }
            if b.y_f >= taxonomy.num_fine() {
                return Err(HmilError::Label(format!("bag `{}`: fine label {} out of range", b.bag_id, b.y_f)));
            }
            if b.y_c != taxonomy.parent(b.y_f) {
                return Err(HmilError::Label(format!(
                    "bag `{}`: coarse label `{}` is not the parent of fine label `{}`",
                    b.bag_id,
                    taxonomy.coarse_names().get(b.y_c).map_or("?", String::as_str),
                    taxonomy.fine_names()[b.y_f]
                )));
            }
            if b.features.rows() == 0 {
                return Err(HmilError::Data(format!("bag `{}` has no instances", b.bag_id)));
            }
            if b.features.cols() != d {
                return Err(HmilError::Data(format!(
                    "bag `{}` has width {}, dataset width is {d}",
                    b.bag_id,
                    b.features.cols()
                )));
            }
        }
        Ok(Dataset { taxonomy, bags, d })
    }

    pub fn len(&self) -> usize {
        self.bags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bags.is_empty()
    }

    pub fn split(&self, split: Split) -> Vec<&FeatureBag> {
        self.bags.iter().filter(|b| b.split == split).collect()
    }

    pub fn all_assigned(&self) -> bool {
        self.bags.iter().all(|b| b.split != Split::Unassigned)
    }

    /// Bags per fine class, in class order.
    pub fn fine_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.taxonomy.num_fine()];
        for b in &self.bags {
            counts[b.y_f] += 1;
        }
        counts
    }

    pub fn split_counts(&self) -> BTreeMap<Split, usize> {
        let mut counts = BTreeMap::new();
        for b in &self.bags {
            *counts.entry(b.split).or_insert(0) += 1;
        }
        counts
    }

    /// Writes `taxonomy.json`, `manifest.json` and one `bags/<id>.hmb` per bag.
    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        let bag_dir = dir.join("bags");
        std::fs::create_dir_all(&bag_dir).map_err(|e| HmilError::io(&bag_dir, e))?;
        self.taxonomy.save(&dir.join("taxonomy.json"))?;
        let mut entries = Vec::with_capacity(self.bags.len());
        for b in &self.bags {
            let rel = format!("bags/{}.hmb", b.bag_id);
            write_bag_file(&dir.join(&rel), &b.features)?;
            entries.push(ManifestBag {
                id: b.bag_id.clone(),
                file: rel,
                fine: self.taxonomy.fine_names()[b.y_f].clone(),
                coarse: self.taxonomy.coarse_names()[b.y_c].clone(),
                split: Some(b.split.as_str().to_owned()),
            });
        }
        let manifest = Manifest {
            taxonomy: "taxonomy.json".into(),
            d: self.d,
            bags: entries,
        };
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        std::fs::write(&path, text).map_err(|e| HmilError::io(&path, e))?;
        Ok(path)
    }
}

/// `{"taxonomy": path, "d": int, "bags": [...]}`; paths are relative to the manifest.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub taxonomy: String,
    pub d: usize,
    pub bags: Vec<ManifestBag>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManifestBag {
    pub id: String,
    pub file: String,
    pub fine: String,
    pub coarse: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<String>,
}

/// Loads a manifest and every bag it references. Files ending in `.csv`
/// are read through the CSV importer, everything else as `HMB1`.
pub fn load_dataset(manifest_path: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(manifest_path).map_err(|e| HmilError::io(manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| HmilError::json(manifest_path, e))?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let taxonomy = Taxonomy::load(&base.join(&manifest.taxonomy))?;
    if manifest.bags.is_empty() {
        return Err(HmilError::Data("dataset empty".into()));
    }
    let mut bags = Vec::with_capacity(manifest.bags.len());
    for entry in &manifest.bags {
        let y_f = taxonomy
            .fine_index(&entry.fine)
            .ok_or_else(|| HmilError::Label(format!("bag `{}`: unknown fine label `{}`", entry.id, entry.fine)))?;
        let y_c = taxonomy
            .coarse_index(&entry.coarse)
            .ok_or_else(|| HmilError::Label(format!("bag `{}`: unknown coarse label `{}`", entry.id, entry.coarse)))?;
        let path = base.join(&entry.file);
        let features = if path.extension().is_some_and(|e| e == "csv") {
            read_csv_bag(&path)?
        } else {
            read_bag_file(&path)?
        };
        let split = entry.split.as_deref().unwrap_or("unassigned").parse()?;
        bags.push(FeatureBag {
            bag_id: entry.id.clone(),
            features,
            y_f,
            y_c,
            split,
        });
    }
    Dataset::new(taxonomy, bags, manifest.d)
}
