//! Importing backbone weights from named-array containers through a
//! name-translation table.

use std::collections::{BTreeMap, BTreeSet};

use ndarray::{s, Array1, Array2, ArrayD, Axis, IxDyn};

use super::{Block, ViTBackbone, ViTConfig};
use crate::container::{check_shape, NamedArrays};
use crate::error::{Error, Result};
use crate::nn::{LayerNorm, Linear};

pub const DINOV2_MAPPING: &str = include_str!("../../mappings/dinov2.map");
pub const CLIP_MAPPING: &str = include_str!("../../mappings/clip.map");

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Op {
    Squeeze,
    Rows { index: usize, chunks: usize },
    Transpose,
    Flatten,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Rule {
    canonical: String,
    source: String,
    ops: Vec<Op>,
}

/// Translation table from canonical backbone names to source names.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct NameMapping {
    rules: Vec<Rule>,
    identity: bool,
    pub pixel_mean: Option<Vec<f64>>,
    pub pixel_std: Option<Vec<f64>>,
}

impl NameMapping {
    /// Maps every canonical name to itself (containers written by this crate).
    pub fn canonical() -> Self {
        Self {
            identity: true,
            ..Self::default()
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut mapping = NameMapping::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |reason: String| Error::Mapping {
                line: lineno + 1,
                reason,
            };
            if let Some((key, value)) = line.split_once('=').filter(|_| !line.contains("<-")) {
                let values = value
                    .split(',')
                    .map(|v| v.trim().parse::<f64>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|e| err(format!("bad number list: {e}")))?;
                match key.trim() {
                    "mean" => mapping.pixel_mean = Some(values),
                    "std" => mapping.pixel_std = Some(values),
                    other => return Err(err(format!("unknown directive `{other}`"))),
                }
                continue;
            }
            let (canonical, rest) = line
                .split_once("<-")
                .ok_or_else(|| err("expected `<canonical> <- <source> [ops]`".into()))?;
            let mut parts = rest.split_whitespace();
            let source = parts
                .next()
                .ok_or_else(|| err("missing source name".into()))?;
            let ops = parts
                .map(|tok| parse_op(tok).ok_or_else(|| err(format!("unknown op `{tok}`"))))
                .collect::<Result<Vec<_>>>()?;
            mapping.rules.push(Rule {
                canonical: canonical.trim().to_string(),
                source: source.to_string(),
                ops,
            });
        }
        Ok(mapping)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Canonical name → (source name, ops) for a backbone with `n_layers`.
    fn expand(&self, n_layers: usize) -> BTreeMap<String, (String, Vec<Op>)> {
        let mut out = BTreeMap::new();
        for rule in &self.rules {
            if rule.canonical.contains("{i}") || rule.source.contains("{i}") {
                for i in 0..n_layers {
                    let idx = i.to_string();
                    out.insert(
                        rule.canonical.replace("{i}", &idx),
                        (rule.source.replace("{i}", &idx), rule.ops.clone()),
                    );
                }
            } else {
                out.insert(rule.canonical.clone(), (rule.source.clone(), rule.ops.clone()));
            }
        }
        out
    }
}

fn parse_op(tok: &str) -> Option<Op> {
    match tok {
        "squeeze" => Some(Op::Squeeze),
        "transpose" => Some(Op::Transpose),
        "flatten" => Some(Op::Flatten),
        _ => {
            let spec = tok.strip_prefix("rows=")?;
            let (k, n) = spec.split_once('/')?;
            let index = k.parse().ok()?;
            let chunks: usize = n.parse().ok()?;
            (chunks > 0 && index < chunks).then_some(Op::Rows { index, chunks })
        }
    }
}

fn apply_op(name: &str, a: ArrayD<f64>, op: Op) -> Result<ArrayD<f64>> {
    let bad = |why: &str| Error::Container(format!("`{name}`: cannot apply {op:?}: {why}"));
    Ok(match op {
        Op::Squeeze => {
            let keep: Vec<usize> = {
                let shape = a.shape();
                let lead = shape.iter().take_while(|&&d| d == 1).count();
                shape[lead.min(shape.len().saturating_sub(1))..].to_vec()
            };
            a.into_shape_with_order(IxDyn(&keep)).map_err(|e| bad(&e.to_string()))?
        }
        Op::Rows { index, chunks } => {
            let rows = a.shape().first().copied().ok_or_else(|| bad("scalar"))?;
            if rows % chunks != 0 {
                return Err(bad("axis 0 not divisible"));
            }
            let size = rows / chunks;
            a.slice_axis(Axis(0), (index * size..(index + 1) * size).into())
                .to_owned()
        }
        Op::Transpose => {
            if a.ndim() != 2 {
                return Err(bad("not a matrix"));
            }
            a.reversed_axes().as_standard_layout().to_owned()
        }
        Op::Flatten => {
            let shape = a.shape().to_vec();
            let first = *shape.first().ok_or_else(|| bad("scalar"))?;
            let rest: usize = shape[1..].iter().product();
            a.as_standard_layout()
                .to_owned()
                .into_shape_with_order(IxDyn(&[first, rest]))
                .map_err(|e| bad(&e.to_string()))?
        }
    })
}

/// Result of [`load_backbone_weights`].
#[derive(Debug, Clone)]
pub struct LoadReport {
    pub backbone: ViTBackbone,
    /// Source arrays no rule consumed.
    pub unused: Vec<String>,
    /// Optional canonical parameters that were absent and took defaults.
    pub defaulted: Vec<String>,
    pub fingerprint: String,
}

struct Loader<'a> {
    source: &'a NamedArrays,
    table: Option<BTreeMap<String, (String, Vec<Op>)>>,
    used: BTreeSet<String>,
    defaulted: Vec<String>,
}

impl Loader<'_> {
    /// Resolves one canonical parameter. `Ok(None)` only for optional names.
    fn fetch(&mut self, canonical: &str, optional: bool) -> Result<Option<ArrayD<f64>>> {
        let (source_name, ops) = match &self.table {
            None => (canonical.to_string(), Vec::new()),
            Some(t) => match t.get(canonical) {
                Some((s, ops)) => (s.clone(), ops.clone()),
                None if optional => {
                    self.defaulted.push(canonical.to_string());
                    return Ok(None);
                }
                None => return Err(Error::MissingParameter(canonical.to_string())),
            },
        };
        let Some(array) = self.source.get(&source_name) else {
            if optional {
                self.defaulted.push(canonical.to_string());
                return Ok(None);
            }
            return Err(Error::MissingParameter(canonical.to_string()));
        };
        self.used.insert(source_name.clone());
        let mut array = array.clone();
        for op in ops {
            array = apply_op(&source_name, array, op)?;
        }
        Ok(Some(array))
    }

    fn vector(&mut self, name: &str, len: usize) -> Result<Array1<f64>> {
        let a = self.fetch(name, false)?.expect("required");
        check_shape(name, &[len], a.shape())?;
        Ok(a.into_dimensionality().expect("checked"))
    }

    fn vector_or(&mut self, name: &str, len: usize, default: f64) -> Result<Array1<f64>> {
        match self.fetch(name, true)? {
            Some(a) => {
                check_shape(name, &[len], a.shape())?;
                Ok(a.into_dimensionality().expect("checked"))
            }
            None => Ok(Array1::from_elem(len, default)),
        }
    }

    fn matrix(&mut self, name: &str, rows: usize, cols: usize) -> Result<Array2<f64>> {
        let a = self.fetch(name, false)?.expect("required");
        check_shape(name, &[rows, cols], a.shape())?;
        Ok(a.into_dimensionality().expect("checked"))
    }

    fn linear(&mut self, prefix: &str, out: usize, inp: usize) -> Result<Linear> {
        let weight = self.matrix(&format!("{prefix}.weight"), out, inp)?;
        let bias_name = format!("{prefix}.bias");
        let bias = match self.fetch(&bias_name, true)? {
            Some(b) => {
                check_shape(&bias_name, &[out], b.shape())?;
                Some(b.into_dimensionality().expect("checked"))
            }
            None => None,
        };
        Ok(Linear { weight, bias })
    }

    fn layer_norm(&mut self, prefix: &str, dim: usize, eps: f64) -> Result<LayerNorm> {
        Ok(LayerNorm {
            gamma: self.vector(&format!("{prefix}.weight"), dim)?,
            beta: self.vector_or(&format!("{prefix}.bias"), dim, 0.0)?,
            eps,
        })
    }

    fn optional_layer_norm(&mut self, prefix: &str, dim: usize, eps: f64) -> Result<Option<LayerNorm>> {
        let name = format!("{prefix}.weight");
        match self.fetch(&name, true)? {
            None => Ok(None),
            Some(g) => {
                check_shape(&name, &[dim], g.shape())?;
                Ok(Some(LayerNorm {
                    gamma: g.into_dimensionality().expect("checked"),
                    beta: self.vector_or(&format!("{prefix}.bias"), dim, 0.0)?,
                    eps,
                }))
            }
        }
    }
}

/// Builds a backbone from `source`, translating names through `mapping`.
///
/// Position tables with a different square grid are resized bicubically.
/// The returned fingerprint is computed over the canonical arrays, so a
/// re-saved backbone keeps the same fingerprint.
pub fn load_backbone_weights(
    source: &NamedArrays,
    mapping: &NameMapping,
    config: &ViTConfig,
) -> Result<LoadReport> {
    config.validate()?;
    let mut loader = Loader {
        source,
        table: (!mapping.identity).then(|| mapping.expand(config.n_layers)),
        used: BTreeSet::new(),
        defaulted: Vec::new(),
    };
    let d = config.d_model;
    let hidden = config.mlp_hidden();
    let eps = config.layer_norm_eps;

    let patch_embed = loader.linear("patch_embed", d, config.patch_dim())?;
    let cls_token = loader.vector("cls_token", d)?;
    let pos_raw = loader.fetch("pos_embed", false)?.expect("required");
    let pos_embed = match pos_raw.shape() {
        [n, w] if *w == d && *n == config.num_tokens() => {
            pos_raw.into_dimensionality().expect("checked")
        }
        [n, w] if *w == d && is_square(n.saturating_sub(1)) && *n > 1 => {
            let table: Array2<f64> = pos_raw.into_dimensionality().expect("checked");
            interpolate_pos_embed(&table, config.grid())?
        }
        other => {
            return Err(Error::ShapeConflict {
                name: "pos_embed".into(),
                expected: vec![config.num_tokens(), d],
                found: other.to_vec(),
            })
        }
    };
    let norm_pre = loader.optional_layer_norm("norm_pre", d, eps)?;
    let mut blocks = Vec::with_capacity(config.n_layers);
    for i in 0..config.n_layers {
        let p = format!("blocks.{i}");
        blocks.push(Block {
            norm1: loader.layer_norm(&format!("{p}.norm1"), d, eps)?,
            q: loader.linear(&format!("{p}.attn.q"), d, d)?,
            k: loader.linear(&format!("{p}.attn.k"), d, d)?,
            v: loader.linear(&format!("{p}.attn.v"), d, d)?,
            o: loader.linear(&format!("{p}.attn.proj"), d, d)?,
            ls1: loader.vector_or(&format!("{p}.ls1"), d, 1.0)?,
            norm2: loader.layer_norm(&format!("{p}.norm2"), d, eps)?,
            fc1: loader.linear(&format!("{p}.mlp.fc1"), hidden, d)?,
            fc2: loader.linear(&format!("{p}.mlp.fc2"), d, hidden)?,
            ls2: loader.vector_or(&format!("{p}.ls2"), d, 1.0)?,
        });
    }
    let norm = loader.layer_norm("norm", d, eps)?;

    let parse_list = |key: &str| -> Result<Option<Vec<f64>>> {
        source
            .metadata
            .get(key)
            .map(|s| {
                s.split(',')
                    .map(|v| v.trim().parse::<f64>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|e| Error::Container(format!("metadata `{key}`: {e}")))
            })
            .transpose()
    };
    let pixel_mean = match &mapping.pixel_mean {
        Some(m) => m.clone(),
        None => parse_list("pixel_mean")?.unwrap_or_else(|| vec![0.5; config.channels]),
    };
    let pixel_std = match &mapping.pixel_std {
        Some(m) => m.clone(),
        None => parse_list("pixel_std")?.unwrap_or_else(|| vec![0.5; config.channels]),
    };
    for (field, v) in [("pixel_mean", &pixel_mean), ("pixel_std", &pixel_std)] {
        if v.len() != config.channels {
            return Err(Error::config(field, format!("expected {} values", config.channels)));
        }
    }
    if pixel_std.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::config("pixel_std", "must be positive"));
    }

    let unused = source
        .arrays
        .keys()
        .filter(|k| !loader.used.contains(*k))
        .cloned()
        .collect();
    let backbone = ViTBackbone {
        config: config.clone(),
        patch_embed,
        cls_token,
        pos_embed,
        norm_pre,
        blocks,
        norm,
        pixel_mean,
        pixel_std,
    };
    let fingerprint = backbone.fingerprint();
    Ok(LoadReport {
        backbone,
        unused,
        defaulted: loader.defaulted,
        fingerprint,
    })
}

fn is_square(n: usize) -> bool {
    let r = (n as f64).sqrt().round() as usize;
    r * r == n
}

fn cubic_weight(t: f64) -> f64 {
    const A: f64 = -0.75;
    let t = t.abs();
    if t <= 1.0 {
        ((A + 2.0) * t - (A + 3.0)) * t * t + 1.0
    } else if t < 2.0 {
        ((A * t - 5.0 * A) * t + 8.0 * A) * t - 4.0 * A
    } else {
        0.0
    }
}

/// Resizes a `(1 + g², d)` position table (CLS row first) to a new square
/// grid with bicubic interpolation (Keys kernel, `a = -0.75`, half-pixel
/// centres, clamped borders). The CLS row is copied unchanged.
pub fn interpolate_pos_embed(table: &Array2<f64>, new_grid: usize) -> Result<Array2<f64>> {
    let n = table.nrows().saturating_sub(1);
    if table.nrows() < 2 || !is_square(n) || new_grid == 0 {
        return Err(Error::dims("position table rows", "1 + g²", table.nrows()));
    }
    let old_grid = (n as f64).sqrt().round() as usize;
    let d = table.ncols();
    let mut out = Array2::zeros((1 + new_grid * new_grid, d));
    out.row_mut(0).assign(&table.row(0));
    let grid = table.slice(s![1.., ..]);
    let scale = old_grid as f64 / new_grid as f64;
    let taps = |dst: usize| -> [(usize, f64); 4] {
        let src = (dst as f64 + 0.5) * scale - 0.5;
        let base = src.floor();
        let frac = src - base;
        let mut out = [(0usize, 0.0); 4];
        for (j, slot) in out.iter_mut().enumerate() {
            let offset = j as f64 - 1.0;
            let idx = (base + offset).clamp(0.0, (old_grid - 1) as f64) as usize;
            *slot = (idx, cubic_weight(frac - offset));
        }
        out
    };
    for y in 0..new_grid {
        let ty = taps(y);
        for x in 0..new_grid {
            let tx = taps(x);
            let mut row = out.row_mut(1 + y * new_grid + x);
            for &(sy, wy) in &ty {
                for &(sx, wx) in &tx {
                    row.scaled_add(wy * wx, &grid.row(sy * old_grid + sx));
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;

    #[test]
    fn bicubic_identity_and_constant() {
        let table = Array2::from_shape_fn((1 + 9, 2), |(i, j)| (i * 3 + j) as f64);
        let same = interpolate_pos_embed(&table, 3).unwrap();
        assert!((&same - &table).iter().all(|v| v.abs() < 1e-12));
        let constant = Array2::from_elem((1 + 16, 3), 2.5);
        let up = interpolate_pos_embed(&constant, 7).unwrap();
        assert_eq!(up.nrows(), 50);
        assert!(up.iter().all(|v| (v - 2.5).abs() < 1e-12));
    }

    #[test]
    fn bicubic_matches_reference_resampler() {
        // 4×4 grid of 0.1·g² − g (g = row-major index) resized to 6×6; expected
        // values produced by a reference bicubic resampler (a = -0.75,
        // align_corners = false).
        let mut table = Array2::zeros((17, 1));
        for g in 0..16 {
            let v = g as f64;
            table[[1 + g, 0]] = 0.1 * v * v - v;
        }
        let up = interpolate_pos_embed(&table, 6).unwrap();
        let expected = [
            0.29248649691357964, -0.20425347222222273, -0.9458076131687254, -1.3875257201646098,
            -1.8874131944444452, -2.149430941358026, -1.225086805555556, -1.52734375,
            -1.9506944444444452, -2.165972222222223, -2.3476562500000004, -2.4151909722222227,
            -2.5690715020576125, -2.5531249999999988, -2.4558470507544565, -2.3006344307270212,
            -1.9616898148148116, -1.7110210905349759, -2.1496784979423866, -1.9072916666666666,
            -1.4395233196159114, -1.0206618655692725, -0.3112268518518502, 0.16588220164609338,
            0.37300347222222296, 0.9335937500000007, 1.9219907407407435, 2.7113425925925942,
            3.941406250000001, 4.736718750000001, 2.6109857253086446, 3.3660590277777804,
            4.672659465020583, 5.68845164609054, 7.236718750000004, 8.226514274691363,
        ];
        for (i, e) in expected.iter().enumerate() {
            assert!((up[[1 + i, 0]] - e).abs() < 1e-12, "{i}: {} vs {e}", up[[1 + i, 0]]);
        }
    }

    #[test]
    fn mapping_parse_errors_carry_line_numbers() {
        let err = NameMapping::parse("# header\nfoo <- bar rows=3/3\n").unwrap_err();
        assert!(matches!(err, Error::Mapping { line: 2, .. }));
        assert!(NameMapping::parse("nonsense line").is_err());
        assert!(NameMapping::parse("gamma = 1,2").is_err());
    }

    #[test]
    fn shipped_mappings_parse() {
        let d = NameMapping::parse(DINOV2_MAPPING).unwrap();
        assert_eq!(d.pixel_mean.as_deref(), Some(&[0.485, 0.456, 0.406][..]));
        let c = NameMapping::parse(CLIP_MAPPING).unwrap();
        assert!(c.expand(2).contains_key("blocks.1.attn.v.bias"));
    }

    #[test]
    fn ops_reshape_as_declared() {
        let conv = Array4::from_shape_fn((2, 3, 2, 2), |(o, c, y, x)| (o * 100 + c * 10 + y * 2 + x) as f64);
        let flat = apply_op("w", conv.into_dyn(), Op::Flatten).unwrap();
        assert_eq!(flat.shape(), &[2, 12]);
        assert_eq!(flat[[1, 5]], 100.0 + 10.0 + 1.0);
        let fused = Array2::from_shape_fn((6, 2), |(i, _)| i as f64).into_dyn();
        let k = apply_op("qkv", fused, Op::Rows { index: 1, chunks: 3 }).unwrap();
        assert_eq!(k.shape(), &[2, 2]);
        assert_eq!(k[[0, 0]], 2.0);
        let lead = ArrayD::<f64>::zeros(IxDyn(&[1, 1, 5]));
        assert_eq!(apply_op("cls", lead, Op::Squeeze).unwrap().shape(), &[5]);
    }
}
