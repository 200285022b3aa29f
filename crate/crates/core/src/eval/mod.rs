//! Verification scoring, ten-fold accuracy, ROC / TAR@FAR and demographic
//! bias statistics, plus the report pipeline that ties them to a model.

mod metrics;

pub use metrics::{
    bias_from_accuracies, bias_from_scores, bias_report, candidate_thresholds, fmt2, roc_curve,
    similarity, tar_at_far, tenfold_accuracy, BiasReport, GroupAccuracy, RocPoint, TarAtFar,
    TenFold,
};

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::Path;

use ndarray::Array1;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::container::NamedArrays;
use crate::data::{load_image, DatasetManifest, PairProtocol, Preprocessor};
use crate::error::{Error, Result};
use crate::vit::{AdapterSet, ViTBackbone};

pub const DEFAULT_FAR_TARGETS: [f64; 3] = [1e-3, 1e-4, 1e-5];

/// Where embeddings come from.
#[derive(Clone, Copy)]
pub enum EmbeddingSource<'a> {
    /// Run the backbone (optionally with adapters) on decoded images.
    Model {
        backbone: &'a ViTBackbone,
        adapters: Option<&'a AdapterSet>,
        preprocessor: &'a Preprocessor,
    },
    /// Precomputed embeddings keyed by the image path as written in the
    /// protocol.
    Table(&'a NamedArrays),
}

impl EmbeddingSource<'_> {
    fn embed(&self, protocol: &PairProtocol, path: &str) -> Result<Array1<f64>> {
        match self {
            EmbeddingSource::Model {
                backbone,
                adapters,
                preprocessor,
            } => {
                let img = load_image(&protocol.resolve(path))?;
                let x = preprocessor.apply(&img, false, 0);
                Ok(backbone.extract_embedding(x.view(), *adapters)?.raw)
            }
            EmbeddingSource::Table(t) => {
                let a = t.get(path).ok_or_else(|| Error::MissingImage(path.to_string()))?;
                Ok(Array1::from_iter(a.iter().copied()))
            }
        }
    }
}

/// Embeds every listed image; the result is keyed by path.
pub fn export_embeddings(
    source: EmbeddingSource<'_>,
    protocol: &PairProtocol,
    paths: &[String],
) -> Result<NamedArrays> {
    let embedded: Vec<Array1<f64>> = paths
        .par_iter()
        .map(|p| source.embed(protocol, p))
        .collect::<Result<_>>()?;
    let mut out = NamedArrays::new();
    for (p, e) in paths.iter().zip(embedded) {
        out.insert1(p.clone(), &e);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub far_targets: Vec<f64>,
    /// Compute a bias block over the benchmarks (treated as groups).
    pub bias: bool,
    /// Embed each unique image once instead of once per pair side.
    pub use_cache: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            far_targets: DEFAULT_FAR_TARGETS.to_vec(),
            bias: false,
            use_cache: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub name: String,
    pub pairs: usize,
    pub genuine: usize,
    pub impostor: usize,
    /// Ten-fold verification accuracy in percent.
    pub accuracy: f64,
    pub fold_accuracies: Vec<f64>,
    pub fold_thresholds: Vec<f64>,
    pub tar_at_far: Vec<TarAtFar>,
    pub roc: Vec<RocPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub benchmarks: Vec<BenchmarkReport>,
    pub bias: Option<BiasReport>,
}

/// Cosine score of every pair.
pub fn score_pairs(
    source: EmbeddingSource<'_>,
    protocol: &PairProtocol,
    use_cache: bool,
) -> Result<Vec<f64>> {
    if use_cache {
        let paths = protocol.unique_paths();
        let embedded: Vec<Array1<f64>> = paths
            .par_iter()
            .map(|p| source.embed(protocol, p))
            .collect::<Result<_>>()?;
        let cache: HashMap<&str, &Array1<f64>> =
            paths.iter().map(String::as_str).zip(embedded.iter()).collect();
        protocol
            .pairs
            .iter()
            .map(|p| similarity(cache[p.a.as_str()].view(), cache[p.b.as_str()].view()))
            .collect()
    } else {
        protocol
            .pairs
            .par_iter()
            .map(|p| {
                let a = source.embed(protocol, &p.a)?;
                let b = source.embed(protocol, &p.b)?;
                similarity(a.view(), b.view())
            })
            .collect()
    }
}

pub fn benchmark_report(
    name: &str,
    scores: &[f64],
    labels: &[bool],
    folds: &[usize],
    far_targets: &[f64],
) -> Result<BenchmarkReport> {
    let tf = tenfold_accuracy(scores, labels, folds)?;
    let genuine = labels.iter().filter(|&&l| l).count();
    Ok(BenchmarkReport {
        name: name.to_string(),
        pairs: scores.len(),
        genuine,
        impostor: scores.len() - genuine,
        accuracy: tf.accuracy,
        fold_accuracies: tf.fold_accuracies,
        fold_thresholds: tf.thresholds,
        tar_at_far: tar_at_far(scores, labels, far_targets)?,
        roc: roc_curve(scores, labels)?,
    })
}

/// Scores every benchmark protocol and assembles one report.
pub fn evaluate(
    source: EmbeddingSource<'_>,
    benchmarks: &[(String, PairProtocol)],
    options: &EvalOptions,
) -> Result<MetricReport> {
    let mut reports = Vec::with_capacity(benchmarks.len());
    for (name, protocol) in benchmarks {
        let scores = score_pairs(source, protocol, options.use_cache)?;
        reports.push(benchmark_report(
            name,
            &scores,
            &protocol.labels(),
            &protocol.folds(),
            &options.far_targets,
        )?);
    }
    let bias = if options.bias {
        Some(bias_report(
            &reports
                .iter()
                .map(|r| GroupAccuracy {
                    group: r.name.clone(),
                    accuracy: r.accuracy,
                })
                .collect::<Vec<_>>(),
        )?)
    } else {
        None
    };
    Ok(MetricReport {
        benchmarks: reports,
        bias,
    })
}

/// Splits a protocol into per-group protocols using the groups recorded in
/// a manifest. Pairs whose images fall in different groups, or have no
/// group, are dropped.
pub fn split_by_group(
    protocol: &PairProtocol,
    manifest: &DatasetManifest,
) -> Result<Vec<(String, PairProtocol)>> {
    let group_of: HashMap<&str, &str> = manifest
        .records
        .iter()
        .filter_map(|r| r.group.as_deref().map(|g| (r.path.as_str(), g)))
        .collect();
    let mut out: BTreeMap<String, Vec<crate::data::Pair>> = BTreeMap::new();
    for p in &protocol.pairs {
        if let (Some(a), Some(b)) = (group_of.get(p.a.as_str()), group_of.get(p.b.as_str())) {
            if a == b {
                out.entry(a.to_string()).or_default().push(p.clone());
            }
        }
    }
    out.into_iter()
        .map(|(g, pairs)| Ok((g, PairProtocol::new(pairs, protocol.base_dir.clone())?)))
        .collect()
}

impl MetricReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()? + "\n").map_err(|e| Error::io(path, e))
    }

    /// Flat `metric,value` table.
    pub fn summary_rows(&self) -> Vec<(String, String)> {
        let mut rows = Vec::new();
        for b in &self.benchmarks {
            rows.push((format!("{}.pairs", b.name), b.pairs.to_string()));
            rows.push((format!("{}.accuracy", b.name), fmt2(b.accuracy)));
            for t in &b.tar_at_far {
                rows.push((format!("{}.tar@far={:e}", b.name, t.far_target), format!("{:.4}", t.tar)));
            }
        }
        if let Some(bias) = &self.bias {
            rows.push(("bias.average".into(), fmt2(bias.average)));
            rows.push(("bias.std".into(), fmt2(bias.std)));
            rows.push((
                "bias.ser".into(),
                bias.ser.map_or_else(|| "inf".to_string(), fmt2),
            ));
        }
        rows
    }

    pub fn write_summary_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["metric", "value"])?;
        for (k, v) in self.summary_rows() {
            w.write_record([k, v])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// One `roc_<benchmark>.csv` per benchmark with columns `far,tar`.
    pub fn write_roc_csv(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        for b in &self.benchmarks {
            let path = dir.join(format!("roc_{}.csv", b.name));
            let mut f = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
            let mut text = String::from("far,tar\n");
            for p in &b.roc {
                text.push_str(&format!("{},{}\n", p.far, p.tar));
            }
            f.write_all(text.as_bytes()).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Pair, PairLabel};

    fn table_and_protocol() -> (NamedArrays, PairProtocol) {
        let mut t = NamedArrays::new();
        let mut pairs = Vec::new();
        for i in 0..40 {
            let angle = i as f64 * 0.37;
            t.insert1(format!("a{i}"), &Array1::from(vec![angle.cos(), angle.sin(), 0.1]));
            let genuine = i % 2 == 0;
            let other = if genuine { angle + 0.05 * (i as f64 % 3.0) } else { angle + 1.5 };
            t.insert1(format!("b{i}"), &Array1::from(vec![other.cos(), other.sin(), 0.1]));
            pairs.push(Pair {
                a: format!("a{i}"),
                b: format!("b{i}"),
                label: if genuine { PairLabel::Genuine } else { PairLabel::Impostor },
                fold: i % 10,
            });
        }
        (t, PairProtocol::new(pairs, ".").unwrap())
    }

    #[test]
    fn report_is_deterministic_and_cache_transparent() {
        let (t, p) = table_and_protocol();
        let bench = vec![("toy".to_string(), p)];
        let a = evaluate(EmbeddingSource::Table(&t), &bench, &EvalOptions::default()).unwrap();
        let b = evaluate(EmbeddingSource::Table(&t), &bench, &EvalOptions::default()).unwrap();
        let c = evaluate(
            EmbeddingSource::Table(&t),
            &bench,
            &EvalOptions {
                use_cache: false,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
        assert_eq!(a, c);
        assert_eq!(a.benchmarks[0].accuracy, 100.0);
        assert!(a.bias.is_none());
    }

    #[test]
    fn missing_embedding_is_reported() {
        let (mut t, p) = table_and_protocol();
        t.arrays.remove("b3");
        let err = evaluate(EmbeddingSource::Table(&t), &[("x".into(), p)], &EvalOptions::default());
        assert!(matches!(err, Err(Error::MissingImage(p)) if p == "b3"));
    }

    #[test]
    fn outputs_are_written() {
        let (t, p) = table_and_protocol();
        let bench = vec![("one".to_string(), p.clone()), ("two".to_string(), p)];
        let opts = EvalOptions {
            bias: true,
            ..Default::default()
        };
        let r = evaluate(EmbeddingSource::Table(&t), &bench, &opts).unwrap();
        let bias = r.bias.as_ref().unwrap();
        assert_eq!((bias.std, bias.ser), (0.0, Some(1.0)));
        let dir = tempfile::tempdir().unwrap();
        r.write_json(dir.path().join("report.json")).unwrap();
        r.write_summary_csv(dir.path().join("summary.csv")).unwrap();
        r.write_roc_csv(dir.path()).unwrap();
        let summary = std::fs::read_to_string(dir.path().join("summary.csv")).unwrap();
        assert!(summary.starts_with("metric,value\none.pairs,40\none.accuracy,100.00\n"));
        assert!(summary.contains("bias.ser,1.00"));
        let roc = std::fs::read_to_string(dir.path().join("roc_two.csv")).unwrap();
        assert!(roc.starts_with("far,tar\n"));
        let back: MetricReport =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
        assert_eq!(back, r);
    }
}
