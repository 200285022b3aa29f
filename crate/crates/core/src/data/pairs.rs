//! Verification pair protocols.
//!
//! File format: CSV with header `pathA,pathB,label` or
//! `pathA,pathB,label,fold`; `label` is `genuine` or `impostor`, `fold` an
//! integer in `0..10`. Without a fold column the pairs are cut into ten
//! contiguous blocks in file order.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{parent_dir, DatasetManifest};
use crate::error::{Error, Result};

pub const FOLDS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PairLabel {
    Genuine,
    Impostor,
}

impl PairLabel {
    pub fn is_genuine(self) -> bool {
        self == PairLabel::Genuine
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pair {
    pub a: String,
    pub b: String,
    pub label: PairLabel,
    pub fold: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairProtocol {
    pub pairs: Vec<Pair>,
    pub base_dir: PathBuf,
}

#[derive(Deserialize)]
struct Row {
    #[serde(rename = "pathA")]
    a: String,
    #[serde(rename = "pathB")]
    b: String,
    label: PairLabel,
    #[serde(default)]
    fold: Option<usize>,
}

impl PairProtocol {
    pub fn new(pairs: Vec<Pair>, base_dir: impl Into<PathBuf>) -> Result<Self> {
        if let Some(p) = pairs.iter().find(|p| p.fold >= FOLDS) {
            return Err(Error::InvalidProtocol(format!(
                "fold {} outside 0..{FOLDS}",
                p.fold
            )));
        }
        Ok(Self {
            pairs,
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
        let rows: Vec<Row> = rdr.deserialize().collect::<std::result::Result<_, _>>()?;
        let with_fold = rows.iter().filter(|r| r.fold.is_some()).count();
        if with_fold != 0 && with_fold != rows.len() {
            return Err(Error::InvalidProtocol(
                "fold given for some pairs but not others".into(),
            ));
        }
        let n = rows.len();
        let pairs = rows
            .into_iter()
            .enumerate()
            .map(|(i, r)| Pair {
                a: r.a,
                b: r.b,
                label: r.label,
                fold: r.fold.unwrap_or(i * FOLDS / n.max(1)),
            })
            .collect();
        Self::new(pairs, base_dir)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write(file)
    }

    pub fn write(&self, writer: impl std::io::Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["pathA", "pathB", "label", "fold"])?;
        for p in &self.pairs {
            let label = match p.label {
                PairLabel::Genuine => "genuine",
                PairLabel::Impostor => "impostor",
            };
            w.write_record([p.a.as_str(), p.b.as_str(), label, &p.fold.to_string()])?;
        }
        w.flush().map_err(|e| Error::io("<pairs>", e))?;
        Ok(())
    }

    pub fn resolve(&self, path: &str) -> PathBuf {
        let p = Path::new(path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// Distinct image paths in first-use order.
    pub fn unique_paths(&self) -> Vec<String> {
        let mut seen = HashSet::new();
        let mut out = Vec::new();
        for p in &self.pairs {
            for path in [&p.a, &p.b] {
                if seen.insert(path.clone()) {
                    out.push(path.clone());
                }
            }
        }
        out
    }

    pub fn labels(&self) -> Vec<bool> {
        self.pairs.iter().map(|p| p.label.is_genuine()).collect()
    }

    pub fn folds(&self) -> Vec<usize> {
        self.pairs.iter().map(|p| p.fold).collect()
    }
}

/// Number of (genuine, impostor) unordered image pairs the manifest allows.
pub fn possible_pairs(manifest: &DatasetManifest) -> (u64, u64) {
    let n = manifest.len() as u64;
    let genuine: u64 = manifest
        .index()
        .values()
        .map(|v| {
            let k = v.len() as u64;
            k * k.saturating_sub(1) / 2
        })
        .sum();
    (genuine, n * n.saturating_sub(1) / 2 - genuine)
}

/// Above this many impostor candidates they are sampled rather than
/// enumerated.
const ENUMERATE_LIMIT: u64 = 2_000_000;

/// Balanced protocol: `k` genuine and `k` impostor pairs with
/// `k = min(#genuine, #impostor, max_per_class)`, drawn with the seed, each
/// label spread round-robin over the ten folds.
pub fn generate_pairs(
    manifest: &DatasetManifest,
    max_per_class: Option<usize>,
    seed: u64,
) -> Result<PairProtocol> {
    let (n_gen, n_imp) = possible_pairs(manifest);
    let k = n_gen.min(n_imp).min(max_per_class.map_or(u64::MAX, |m| m as u64)) as usize;
    if k == 0 {
        return Err(Error::InvalidProtocol(format!(
            "manifest allows {n_gen} genuine and {n_imp} impostor pairs; need at least one of each"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut genuine: Vec<(usize, usize)> = Vec::new();
    for positions in manifest.index().values() {
        for (x, &i) in positions.iter().enumerate() {
            for &j in &positions[x + 1..] {
                genuine.push((i, j));
            }
        }
    }
    genuine.shuffle(&mut rng);
    genuine.truncate(k);

    let ids: Vec<&str> = manifest.records.iter().map(|r| r.identity.as_str()).collect();
    let n = ids.len();
    let impostor: Vec<(usize, usize)> = if n_imp <= ENUMERATE_LIMIT {
        let mut all = Vec::with_capacity(n_imp as usize);
        for i in 0..n {
            for j in i + 1..n {
                if ids[i] != ids[j] {
                    all.push((i, j));
                }
            }
        }
        all.shuffle(&mut rng);
        all.truncate(k);
        all
    } else {
        let mut seen = HashSet::new();
        let mut out = Vec::with_capacity(k);
        while out.len() < k {
            let i = rng.random_range(0..n);
            let j = rng.random_range(0..n);
            let key = (i.min(j), i.max(j));
            if ids[i] != ids[j] && seen.insert(key) {
                out.push(key);
            }
        }
        out
    };

    let mut pairs = Vec::with_capacity(2 * k);
    for fold in 0..FOLDS {
        for (label, list) in [(PairLabel::Genuine, &genuine), (PairLabel::Impostor, &impostor)] {
            for &(i, j) in list.iter().skip(fold).step_by(FOLDS) {
                pairs.push(Pair {
                    a: manifest.records[i].path.clone(),
                    b: manifest.records[j].path.clone(),
                    label,
                    fold,
                });
            }
        }
    }
    PairProtocol::new(pairs, manifest.base_dir.clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Record;

    fn manifest(counts: &[usize]) -> DatasetManifest {
        let records = counts
            .iter()
            .enumerate()
            .flat_map(|(i, &c)| {
                (0..c).map(move |j| Record {
                    path: format!("{i}_{j}.png"),
                    identity: format!("id{i}"),
                    group: None,
                })
            })
            .collect();
        DatasetManifest::new(records, ".").unwrap()
    }

    #[test]
    fn two_singletons_allow_one_impostor() {
        assert_eq!(possible_pairs(&manifest(&[1, 1])), (0, 1));
        assert!(generate_pairs(&manifest(&[1, 1]), None, 0).is_err());
        assert_eq!(possible_pairs(&manifest(&[3, 2])), (4, 6));
    }

    #[test]
    fn generated_protocol_is_balanced_per_fold() {
        let p = generate_pairs(&manifest(&[5; 10]), None, 3).unwrap();
        assert_eq!(p.pairs.len(), 200);
        for fold in 0..FOLDS {
            let in_fold: Vec<_> = p.pairs.iter().filter(|x| x.fold == fold).collect();
            let g = in_fold.iter().filter(|x| x.label.is_genuine()).count();
            assert_eq!((g, in_fold.len() - g), (10, 10));
        }
        for pair in &p.pairs {
            let same = pair.a.split('_').next() == pair.b.split('_').next();
            assert_eq!(same, pair.label.is_genuine());
            assert_ne!(pair.a, pair.b);
        }
        assert_eq!(p, generate_pairs(&manifest(&[5; 10]), None, 3).unwrap());
        assert_eq!(generate_pairs(&manifest(&[5; 10]), Some(30), 3).unwrap().pairs.len(), 60);
    }

    #[test]
    fn round_trip_and_missing_fold_column() {
        let p = generate_pairs(&manifest(&[3; 4]), None, 1).unwrap();
        let mut buf = Vec::new();
        p.write(&mut buf).unwrap();
        assert_eq!(PairProtocol::from_reader(buf.as_slice(), ".").unwrap(), p);

        let text: String = std::iter::once("pathA,pathB,label\n".to_string())
            .chain((0..20).map(|i| format!("x{i},y{i},{}\n", if i % 2 == 0 { "genuine" } else { "impostor" })))
            .collect();
        let q = PairProtocol::from_reader(text.as_bytes(), ".").unwrap();
        assert_eq!(q.folds(), (0..20).map(|i| i / 2).collect::<Vec<_>>());
    }

    #[test]
    fn bad_rows_rejected() {
        assert!(PairProtocol::from_reader("pathA,pathB,label\na,b,same\n".as_bytes(), ".").is_err());
        assert!(PairProtocol::from_reader("pathA,pathB,label,fold\na,b,genuine,10\n".as_bytes(), ".").is_err());
        assert!(PairProtocol::from_reader(
            "pathA,pathB,label,fold\na,b,genuine,1\nc,d,impostor,\n".as_bytes(),
            "."
        )
        .is_err());
    }
}
