//! Dataset manifests, identity subsetting, pair protocols, the synthetic
//! identity generator and image preprocessing.
//!
//! Manifest files are CSV with the header `path,identity,group`; the `group`
//! column may be omitted or left empty. Relative paths resolve against the
//! directory holding the manifest.

mod augment;
mod pairs;
mod synth;

pub use augment::{
    apply_op, hflip, load_image, preprocess, AugmentConfig, Preprocessor, RandAugOp, RANDAUG_OPS,
};
pub use pairs::{generate_pairs, possible_pairs, Pair, PairLabel, PairProtocol, FOLDS};
pub use synth::{
    generate_synthetic_dataset, write_synthetic_dataset, SynthConfig, SynthDataset, SynthFiles,
};

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Record {
    pub path: String,
    pub identity: String,
    #[serde(default)]
    pub group: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub records: Vec<Record>,
    /// Directory relative record paths are resolved against.
    pub base_dir: PathBuf,
}

impl DatasetManifest {
    pub fn new(records: Vec<Record>, base_dir: impl Into<PathBuf>) -> Result<Self> {
        for (i, r) in records.iter().enumerate() {
            if r.identity.trim().is_empty() {
                return Err(Error::InvalidManifest(format!("record {i} has an empty identity")));
            }
            if r.path.trim().is_empty() {
                return Err(Error::InvalidManifest(format!("record {i} has an empty path")));
            }
        }
        Ok(Self {
            records,
            base_dir: base_dir.into(),
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_reader(file, parent_dir(path))
    }

    pub fn from_reader(reader: impl std::io::Read, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let headers = rdr.headers()?.clone();
        for required in ["path", "identity"] {
            if !headers.iter().any(|h| h == required) {
                return Err(Error::InvalidManifest(format!("missing `{required}` column")));
            }
        }
        let mut records = Vec::new();
        for row in rdr.deserialize() {
            let mut r: Record = row?;
            if r.group.as_deref().is_some_and(str::is_empty) {
                r.group = None;
            }
            records.push(r);
        }
        Self::new(records, base_dir)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write(file)
    }

    pub fn write(&self, writer: impl std::io::Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["path", "identity", "group"])?;
        for r in &self.records {
            w.write_record([
                r.path.as_str(),
                r.identity.as_str(),
                r.group.as_deref().unwrap_or(""),
            ])?;
        }
        w.flush().map_err(|e| Error::io("<manifest>", e))?;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Sorted distinct identity ids.
    pub fn identities(&self) -> Vec<String> {
        self.records
            .iter()
            .map(|r| r.identity.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    pub fn num_identities(&self) -> usize {
        self.identities().len()
    }

    /// Identity id → contiguous class index, in sorted id order.
    pub fn class_indices(&self) -> BTreeMap<String, usize> {
        self.identities()
            .into_iter()
            .enumerate()
            .map(|(i, id)| (id, i))
            .collect()
    }

    /// Class index of every record.
    pub fn labels(&self) -> Vec<usize> {
        let idx = self.class_indices();
        self.records.iter().map(|r| idx[&r.identity]).collect()
    }

    /// Identity id → record positions.
    pub fn index(&self) -> BTreeMap<String, Vec<usize>> {
        let mut out: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (i, r) in self.records.iter().enumerate() {
            out.entry(r.identity.clone()).or_default().push(i);
        }
        out
    }

    pub fn resolve(&self, path: &str) -> PathBuf {
        let p = Path::new(path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// Decodes every referenced image once.
    pub fn check_images(&self) -> Result<()> {
        for r in &self.records {
            load_image(&self.resolve(&r.path))?;
        }
        Ok(())
    }

    fn retain_identities(&self, keep: &BTreeSet<String>) -> Self {
        Self {
            records: self
                .records
                .iter()
                .filter(|r| keep.contains(&r.identity))
                .cloned()
                .collect(),
            base_dir: self.base_dir.clone(),
        }
    }
}

pub(crate) fn parent_dir(path: &Path) -> PathBuf {
    path.parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DepthMode {
    /// Seeded uniform choice of identities.
    #[default]
    RandomIdentities,
    /// Identities with the most images, ties broken by id.
    TopByImageCount,
}

impl std::str::FromStr for DepthMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random_identities" | "random" => Ok(Self::RandomIdentities),
            "top_by_image_count" | "top" => Ok(Self::TopByImageCount),
            other => Err(Error::config(
                "subset.depth_mode",
                format!("unknown mode `{other}` (random_identities | top_by_image_count)"),
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubsetSpec {
    pub width: usize,
    #[serde(default)]
    pub depth_mode: DepthMode,
    #[serde(default)]
    pub seed: u64,
}

/// Identity order used for random subsets: sorted ids, then a seeded
/// shuffle. A width-`n` subset takes the first `n`, so smaller widths are
/// always contained in larger ones under the same seed.
pub fn identity_order(identities: &[String], seed: u64) -> Vec<String> {
    let mut ids = identities.to_vec();
    ids.sort();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    ids
}

/// Keeps all images of the selected identities, in their original order.
pub fn subset(manifest: &DatasetManifest, spec: &SubsetSpec) -> Result<DatasetManifest> {
    let index = manifest.index();
    if spec.width > index.len() {
        return Err(Error::SubsetTooWide {
            requested: spec.width,
            available: index.len(),
        });
    }
    let chosen: BTreeSet<String> = match spec.depth_mode {
        DepthMode::RandomIdentities => {
            let ids: Vec<String> = index.keys().cloned().collect();
            identity_order(&ids, spec.seed)
                .into_iter()
                .take(spec.width)
                .collect()
        }
        DepthMode::TopByImageCount => {
            let mut counts: Vec<(&String, usize)> =
                index.iter().map(|(id, v)| (id, v.len())).collect();
            counts.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
            counts
                .into_iter()
                .take(spec.width)
                .map(|(id, _)| id.clone())
                .collect()
        }
    };
    Ok(manifest.retain_identities(&chosen))
}

/// Splits each identity's images (in record order) into the first
/// `len - holdout` for training and the last `holdout` for evaluation.
pub fn split_holdout(manifest: &DatasetManifest, holdout: usize) -> (DatasetManifest, DatasetManifest) {
    let index = manifest.index();
    let mut held = BTreeSet::new();
    for positions in index.values() {
        let k = holdout.min(positions.len());
        held.extend(positions[positions.len() - k..].iter().copied());
    }
    let pick = |want_held: bool| DatasetManifest {
        records: manifest
            .records
            .iter()
            .enumerate()
            .filter(|(i, _)| held.contains(i) == want_held)
            .map(|(_, r)| r.clone())
            .collect(),
        base_dir: manifest.base_dir.clone(),
    };
    (pick(false), pick(true))
}
