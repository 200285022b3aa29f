//! Seeded synthetic identity dataset.
//!
//! Each identity is a smooth template: a base colour plus a handful of
//! coloured Gaussian blobs. Each image of the identity renders the template
//! with a small shift, then applies a strong brightness offset, a mild
//! contrast change, a linear illumination ramp and pixel noise.
//!
//! The brightness offset dominates the global colour statistics that an
//! untrained random encoder mostly responds to, so such an encoder scores
//! near chance, while the blob layout stays stable within an identity.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{generate_pairs, split_holdout, DatasetManifest, PairProtocol, Record};
use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub identities: usize,
    pub per_identity: usize,
    pub image_size: usize,
    pub seed: u64,
    /// Number of round-robin group labels; 0 leaves records ungrouped.
    #[serde(default)]
    pub groups: usize,
    #[serde(default = "default_blobs")]
    pub blobs: usize,
    /// Multiplier on every per-image perturbation.
    #[serde(default = "default_nuisance")]
    pub nuisance: f64,
}

fn default_blobs() -> usize {
    6
}

fn default_nuisance() -> f64 {
    1.0
}

impl SynthConfig {
    pub fn new(identities: usize, per_identity: usize, image_size: usize, seed: u64) -> Self {
        Self {
            identities,
            per_identity,
            image_size,
            seed,
            groups: 0,
            blobs: default_blobs(),
            nuisance: default_nuisance(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("synth.identities", self.identities),
            ("synth.per_identity", self.per_identity),
            ("synth.image_size", self.image_size),
            ("synth.blobs", self.blobs),
        ] {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if !(self.nuisance >= 0.0 && self.nuisance.is_finite()) {
            return Err(Error::config("synth.nuisance", "must be a non-negative number"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    /// Paths are relative: `images/id0003/0007.png`.
    pub manifest: DatasetManifest,
    pub images: Vec<RgbImage>,
}

struct Blob {
    cx: f64,
    cy: f64,
    inv_two_var: f64,
    amp: [f64; 3],
}

struct Template {
    base: [f64; 3],
    blobs: Vec<Blob>,
}

impl Template {
    fn sample(cfg: &SynthConfig, identity: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed::chain(
            cfg.seed,
            &["synth.identity", &identity.to_string()],
        ));
        let s = cfg.image_size as f64;
        let base = [0; 3].map(|_| rng.random_range(0.35..0.65));
        let blobs = (0..cfg.blobs)
            .map(|_| {
                let sigma = rng.random_range(0.06..0.16) * s;
                Blob {
                    cx: rng.random_range(0.15..0.85) * s,
                    cy: rng.random_range(0.15..0.85) * s,
                    inv_two_var: 1.0 / (2.0 * sigma * sigma),
                    amp: [0; 3].map(|_| rng.random_range(-0.35..0.35)),
                }
            })
            .collect();
        Self { base, blobs }
    }

    fn value(&self, x: f64, y: f64, c: usize) -> f64 {
        self.base[c]
            + self
                .blobs
                .iter()
                .map(|b| {
                    let d2 = (x - b.cx).powi(2) + (y - b.cy).powi(2);
                    b.amp[c] * (-d2 * b.inv_two_var).exp()
                })
                .sum::<f64>()
    }
}

fn render(cfg: &SynthConfig, template: &Template, identity: usize, index: usize) -> RgbImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed::chain(
        cfg.seed,
        &["synth.image", &identity.to_string(), &index.to_string()],
    ));
    let s = cfg.image_size;
    let k = cfg.nuisance;
    let max_shift = (s as f64 / 28.0).round().max(1.0) as i64;
    let dx = rng.random_range(-max_shift..=max_shift) as f64;
    let dy = rng.random_range(-max_shift..=max_shift) as f64;
    let contrast = 1.0 + k * rng.random_range(-0.15..0.15);
    let brightness = k * rng.random_range(-0.5..0.5);
    let angle = rng.random_range(0.0..std::f64::consts::TAU);
    let ramp = k * rng.random_range(0.0..0.15);
    let noise = Normal::new(0.0, 0.02 * k + 1e-12).expect("finite std");
    let half = s as f64 / 2.0;
    let mut img = RgbImage::new(s as u32, s as u32);
    for y in 0..s {
        for x in 0..s {
            let (xf, yf) = (x as f64 + 0.5, y as f64 + 0.5);
            let light = ramp * ((xf - half) * angle.cos() + (yf - half) * angle.sin()) / s as f64;
            let px = [0, 1, 2].map(|c| {
                let t = template.value(xf - dx, yf - dy, c);
                let v = 0.5 + contrast * (t - 0.5) + brightness + light
                    + noise.sample(&mut rng);
                (v.clamp(0.0, 1.0) * 255.0).round() as u8
            });
            img.put_pixel(x as u32, y as u32, Rgb(px));
        }
    }
    img
}

/// Deterministic synthetic dataset with default perturbation settings.
pub fn generate_synthetic_dataset(
    n_identities: usize,
    images_per_identity: usize,
    image_size: usize,
    seed: u64,
) -> Result<SynthDataset> {
    SynthConfig::new(n_identities, images_per_identity, image_size, seed).generate()
}

impl SynthConfig {
    pub fn generate(&self) -> Result<SynthDataset> {
        self.validate()?;
        let mut records = Vec::with_capacity(self.identities * self.per_identity);
        let mut images = Vec::with_capacity(records.capacity());
        for id in 0..self.identities {
            let template = Template::sample(self, id);
            for j in 0..self.per_identity {
                records.push(Record {
                    path: format!("images/id{id:04}/{j:04}.png"),
                    identity: format!("id{id:04}"),
                    group: (self.groups > 0).then(|| format!("g{}", id % self.groups)),
                });
                images.push(render(self, &template, id, j));
            }
        }
        Ok(SynthDataset {
            manifest: DatasetManifest::new(records, ".")?,
            images,
        })
    }
}

/// Paths written by [`write_synthetic_dataset`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SynthFiles {
    /// Every image.
    pub manifest: PathBuf,
    /// Images left for training after the hold-out split.
    pub train: PathBuf,
    /// Held-out images.
    pub heldout: PathBuf,
    /// Balanced pair protocol over the held-out images.
    pub pairs: PathBuf,
}

/// Writes PNGs plus `manifest.csv`, `train.csv`, `heldout.csv` and
/// `pairs.csv` under `out`. The last `holdout` images of every identity are
/// reserved for the pair protocol; with `holdout = 0` pairs are drawn from
/// all images and `train.csv` equals `manifest.csv`.
pub fn write_synthetic_dataset(
    dataset: &SynthDataset,
    out: impl AsRef<Path>,
    holdout: usize,
    pair_seed: u64,
) -> Result<SynthFiles> {
    let out = out.as_ref();
    for (record, img) in dataset.manifest.records.iter().zip(&dataset.images) {
        let path = out.join(&record.path);
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        img.save(&path).map_err(|source| Error::Decode {
            path: path.clone(),
            source,
        })?;
    }
    let mut manifest = dataset.manifest.clone();
    manifest.base_dir = out.to_path_buf();
    let (train, heldout) = if holdout == 0 {
        (manifest.clone(), manifest.clone())
    } else {
        split_holdout(&manifest, holdout)
    };
    let files = SynthFiles {
        manifest: out.join("manifest.csv"),
        train: out.join("train.csv"),
        heldout: out.join("heldout.csv"),
        pairs: out.join("pairs.csv"),
    };
    manifest.save(&files.manifest)?;
    train.save(&files.train)?;
    heldout.save(&files.heldout)?;
    pair_protocol(&heldout, pair_seed)?.save(&files.pairs)?;
    Ok(files)
}

/// Balanced pairs over the manifest. With groups, each group gets its own
/// balanced protocol (impostors stay inside the group) so that every group
/// covers all ten folds.
fn pair_protocol(manifest: &DatasetManifest, pair_seed: u64) -> Result<PairProtocol> {
    let mut groups: BTreeMap<&str, Vec<Record>> = BTreeMap::new();
    for r in &manifest.records {
        match &r.group {
            Some(g) => groups.entry(g.as_str()).or_default().push(r.clone()),
            None => return generate_pairs(manifest, None, pair_seed),
        }
    }
    let mut pairs = Vec::new();
    for (g, records) in groups {
        let part = DatasetManifest::new(records, manifest.base_dir.clone())?;
        pairs.extend(generate_pairs(&part, None, seed::derive(pair_seed, g))?.pairs);
    }
    PairProtocol::new(pairs, manifest.base_dir.clone())
}
