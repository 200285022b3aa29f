//! Training checkpoints: adapters, head, optimizer moments, the training
//! configuration and the fingerprint of the backbone they belong to.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::ArrayD;

use super::{AdamW, TrainConfig};
use crate::container::NamedArrays;
use crate::error::{Error, Result};
use crate::loss::CosFaceHead;
use crate::nn::Linear;
use crate::vit::{AdapterSet, ViTBackbone, ViTConfig};

const FORMAT: &str = "facelora-checkpoint-v1";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub vit: ViTConfig,
    pub seed: u64,
    pub adapters: AdapterSet,
    pub head: CosFaceHead,
    pub optimizer: AdamW,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimizer steps.
    pub step: usize,
    pub backbone_fingerprint: String,
    /// Identity ids in class-index order.
    pub classes: Vec<String>,
}

impl Checkpoint {
    /// Adapter factors and head parameters keyed by their optimizer names.
    pub fn trainable(&self) -> BTreeMap<String, ArrayD<f64>> {
        let mut out = BTreeMap::new();
        for (k, a) in self.adapters.named_factors() {
            out.insert(format!("adapter.{k}"), a.clone().into_dyn());
        }
        out.insert("head.weight".into(), self.head.weight.clone().into_dyn());
        if let Some(n) = &self.head.neck {
            out.insert("head.neck.weight".into(), n.weight.clone().into_dyn());
            if let Some(b) = &n.bias {
                out.insert("head.neck.bias".into(), b.clone().into_dyn());
            }
        }
        out
    }

    pub fn to_named_arrays(&self) -> Result<NamedArrays> {
        let mut c = NamedArrays::new();
        for (k, a) in self.trainable() {
            c.insert(k, a);
        }
        for (k, a) in &self.optimizer.m {
            c.insert(format!("optim.m.{k}"), a.clone());
        }
        for (k, a) in &self.optimizer.v {
            c.insert(format!("optim.v.{k}"), a.clone());
        }
        let meta = &mut c.metadata;
        meta.insert("format".into(), FORMAT.into());
        meta.insert("train_config".into(), serde_json::to_string(&self.config)?);
        meta.insert("vit_config".into(), serde_json::to_string(&self.vit)?);
        meta.insert("seed".into(), self.seed.to_string());
        meta.insert("epoch".into(), self.epoch.to_string());
        meta.insert("step".into(), self.step.to_string());
        meta.insert("optim_t".into(), self.optimizer.t.to_string());
        meta.insert("backbone_fingerprint".into(), self.backbone_fingerprint.clone());
        meta.insert("classes".into(), serde_json::to_string(&self.classes)?);
        Ok(c)
    }

    pub fn from_named_arrays(c: &NamedArrays) -> Result<Self> {
        if c.meta("format")? != FORMAT {
            return Err(Error::Container(format!(
                "not a training checkpoint (format `{}`)",
                c.meta("format")?
            )));
        }
        let parse = |key: &str| -> Result<u64> {
            c.meta(key)?
                .parse()
                .map_err(|_| Error::Container(format!("metadata `{key}` is not an integer")))
        };
        let config: TrainConfig = serde_json::from_str(c.meta("train_config")?)?;
        let vit: ViTConfig = serde_json::from_str(c.meta("vit_config")?)?;
        let classes: Vec<String> = serde_json::from_str(c.meta("classes")?)?;

        let mut adapters = AdapterSet::init(&vit, config.lora, 0)?;
        for (k, f) in adapters.named_factors_mut() {
            *f = c.require2(&format!("adapter.{k}"), f.nrows(), f.ncols())?;
        }
        let dim = config.neck.unwrap_or(vit.d_model);
        let weight = c.require2("head.weight", classes.len(), dim)?;
        let mut head = CosFaceHead::new(weight, config.margin, config.scale)?;
        if config.neck.is_some() {
            head.neck = Some(Linear {
                weight: c.require2("head.neck.weight", dim, vit.d_model)?,
                bias: Some(c.require1("head.neck.bias", dim)?),
            });
        }

        let mut optimizer = AdamW::new(&config);
        optimizer.t = parse("optim_t")?;
        for (name, a) in c.arrays.iter() {
            if let Some(k) = name.strip_prefix("optim.m.") {
                optimizer.m.insert(k.to_string(), a.clone());
            } else if let Some(k) = name.strip_prefix("optim.v.") {
                optimizer.v.insert(k.to_string(), a.clone());
            }
        }
        let out = Self {
            seed: parse("seed")?,
            epoch: parse("epoch")? as usize,
            step: parse("step")? as usize,
            backbone_fingerprint: c.meta("backbone_fingerprint")?.to_string(),
            config,
            vit,
            adapters,
            head,
            optimizer,
            classes,
        };
        let names: Vec<String> = out.trainable().into_keys().collect();
        for k in out.optimizer.m.keys().chain(out.optimizer.v.keys()) {
            if !names.contains(k) {
                return Err(Error::Container(format!("optimizer state for unknown parameter `{k}`")));
            }
        }
        Ok(out)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_named_arrays()?.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_named_arrays(&NamedArrays::load(path)?)
    }

    /// Fails unless the checkpoint was trained on exactly this backbone.
    pub fn verify_backbone(&self, backbone: &ViTBackbone) -> Result<()> {
        let actual = backbone.fingerprint();
        if actual != self.backbone_fingerprint {
            return Err(Error::FingerprintMismatch {
                expected: self.backbone_fingerprint.clone(),
                actual,
            });
        }
        Ok(())
    }
}

/// Number of scalar entries that differ between two parameter snapshots
/// (entries present in only one snapshot count in full).
pub fn changed_parameters(
    before: &BTreeMap<String, ArrayD<f64>>,
    after: &BTreeMap<String, ArrayD<f64>>,
) -> usize {
    let mut n = 0;
    for (k, a) in after {
        match before.get(k) {
            Some(b) if b.shape() == a.shape() => {
                n += a.iter().zip(b.iter()).filter(|(x, y)| x.to_bits() != y.to_bits()).count()
            }
            _ => n += a.len(),
        }
    }
    n + before.keys().filter(|k| !after.contains_key(*k)).map(|k| before[k].len()).sum::<usize>()
}
