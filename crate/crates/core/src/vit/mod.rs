//! Pre-norm Vision Transformer with low-rank adapters on the attention
//! query and value projections. The CLS token's final hidden state (after
//! the closing layer norm) is the face embedding.
//!
//! Everything here runs in `f64`. Backbone weights are never written to
//! after construction; the backward pass only produces adapter gradients.

mod attention;
mod import;

use ndarray::{s, Array1, Array2, Array3, ArrayView2, ArrayView3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::container::NamedArrays;
use crate::error::{Error, Result};
use crate::lora::{AdapterConfig, LoraGrad, ProjectionAdapter};
use crate::nn::{gelu, gelu_grad, LayerNorm, LayerNormCache, Linear};

pub use attention::{attention_head, attention_probs, multi_head_attention};
pub use import::{
    interpolate_pos_embed, load_backbone_weights, LoadReport, NameMapping, CLIP_MAPPING,
    DINOV2_MAPPING,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Gelu,
    /// `x · sigmoid(1.702 x)`, used by CLIP-style towers.
    QuickGelu,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => gelu(x),
            Activation::QuickGelu => x / (1.0 + (-1.702 * x).exp()),
        }
    }

    fn grad(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => gelu_grad(x),
            Activation::QuickGelu => {
                let sig = 1.0 / (1.0 + (-1.702 * x).exp());
                sig + 1.702 * x * sig * (1.0 - sig)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ViTConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub mlp_ratio: f64,
    pub layer_norm_eps: f64,
    pub activation: Activation,
}

impl Default for ViTConfig {
    /// Desk-scale default: 56×56 input, patch 14, width 192, 3 heads, 4 blocks.
    fn default() -> Self {
        Self {
            image_size: 56,
            patch_size: 14,
            channels: 3,
            d_model: 192,
            n_heads: 3,
            n_layers: 4,
            mlp_ratio: 4.0,
            layer_norm_eps: 1e-6,
            activation: Activation::Gelu,
        }
    }
}

impl ViTConfig {
    /// ViT-S/14 at 224 pixels (DINOv2 small layout).
    pub fn vit_small_14() -> Self {
        Self {
            image_size: 224,
            patch_size: 14,
            d_model: 384,
            n_heads: 6,
            n_layers: 12,
            ..Self::default()
        }
    }

    /// ViT-B/16 at 224 pixels (CLIP base layout).
    pub fn vit_base_16() -> Self {
        Self {
            image_size: 224,
            patch_size: 16,
            d_model: 768,
            n_heads: 12,
            n_layers: 12,
            layer_norm_eps: 1e-5,
            activation: Activation::QuickGelu,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image_size", self.image_size),
            ("patch_size", self.patch_size),
            ("channels", self.channels),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("n_layers", self.n_layers),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("vit.{field}"), "must be positive"));
            }
        }
        if !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::config(
                "vit.patch_size",
                format!("image_size {} not divisible by patch_size {}", self.image_size, self.patch_size),
            ));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::config(
                "vit.n_heads",
                format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads),
            ));
        }
        if !(self.mlp_ratio > 0.0) || self.mlp_hidden() == 0 {
            return Err(Error::config("vit.mlp_ratio", "must give a positive hidden width"));
        }
        if !(self.layer_norm_eps > 0.0) {
            return Err(Error::config("vit.layer_norm_eps", "must be positive"));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn num_tokens(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn d_k(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.d_model as f64 * self.mlp_ratio).round() as usize
    }
}

/// One pre-norm transformer block. All weights are frozen.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub norm1: LayerNorm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    /// Per-channel residual scaling of the attention branch (ones if unused).
    pub ls1: Array1<f64>,
    pub norm2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
    pub ls2: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViTBackbone {
    pub config: ViTConfig,
    /// `d_model × (channels · patch · patch)`; patch vectors are flattened
    /// channel-major then row-major, matching a `(d, c, p, p)` convolution.
    pub patch_embed: Linear,
    pub cls_token: Array1<f64>,
    pub pos_embed: Array2<f64>,
    /// Optional layer norm applied to the token sequence before block 0.
    pub norm_pre: Option<LayerNorm>,
    pub blocks: Vec<Block>,
    pub norm: LayerNorm,
    pub pixel_mean: Vec<f64>,
    pub pixel_std: Vec<f64>,
}

/// Adapters of one block.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionAdapters {
    pub q: ProjectionAdapter,
    pub v: ProjectionAdapter,
}

/// All adapters injected into a backbone, one pair per block.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterSet {
    pub config: AdapterConfig,
    pub blocks: Vec<AttentionAdapters>,
}

/// Gradients for an [`AdapterSet`], laid out identically.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterGrads {
    pub blocks: Vec<(Vec<LoraGrad>, Vec<LoraGrad>)>,
}

impl AdapterSet {
    pub fn init(vit: &ViTConfig, config: AdapterConfig, seed: u64) -> Result<Self> {
        let blocks = (0..vit.n_layers)
            .map(|i| {
                let base = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(1000 * i as u64);
                Ok(AttentionAdapters {
                    q: ProjectionAdapter::init(
                        vit.d_model,
                        vit.n_heads,
                        config.realization,
                        config.rank,
                        config.alpha,
                        config.scaling_mode,
                        base,
                    )?,
                    v: ProjectionAdapter::init(
                        vit.d_model,
                        vit.n_heads,
                        config.realization,
                        config.rank,
                        config.alpha,
                        config.scaling_mode,
                        base + 500,
                    )?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { config, blocks })
    }

    pub fn num_parameters(&self) -> usize {
        self.blocks
            .iter()
            .map(|b| b.q.num_parameters() + b.v.num_parameters())
            .sum()
    }

    pub fn zero_grads(&self) -> AdapterGrads {
        AdapterGrads {
            blocks: self
                .blocks
                .iter()
                .map(|b| (b.q.zero_grads(), b.v.zero_grads()))
                .collect(),
        }
    }

    /// Every factor with its checkpoint key `<block>.<fused|head>.<q|v>.<A|B>`.
    pub fn named_factors(&self) -> Vec<(String, &Array2<f64>)> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            for (tag, proj) in [("q", &b.q), ("v", &b.v)] {
                for (j, part) in proj.parts.iter().enumerate() {
                    let key = format!("{i}.{}.{tag}", proj.part_key(j));
                    out.push((format!("{key}.A"), &part.a));
                    out.push((format!("{key}.B"), &part.b));
                }
            }
        }
        out
    }

    pub fn named_factors_mut(&mut self) -> Vec<(String, &mut Array2<f64>)> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter_mut().enumerate() {
            for (tag, proj) in [("q", &mut b.q), ("v", &mut b.v)] {
                let keys: Vec<String> = (0..proj.parts.len()).map(|j| proj.part_key(j)).collect();
                for (part, pk) in proj.parts.iter_mut().zip(keys) {
                    let key = format!("{i}.{pk}.{tag}");
                    out.push((format!("{key}.A"), &mut part.a));
                    out.push((format!("{key}.B"), &mut part.b));
                }
            }
        }
        out
    }

    /// `true` when every `B` factor is zero, i.e. the adapters are inert.
    pub fn is_identity(&self) -> bool {
        self.blocks.iter().all(|b| {
            b.q.parts
                .iter()
                .chain(b.v.parts.iter())
                .all(|p| p.b.iter().all(|&v| v == 0.0))
        })
    }
}

impl AdapterGrads {
    pub fn add_assign(&mut self, other: &AdapterGrads) {
        for ((q, v), (oq, ov)) in self.blocks.iter_mut().zip(&other.blocks) {
            for (g, o) in q.iter_mut().chain(v.iter_mut()).zip(oq.iter().chain(ov.iter())) {
                g.a += &o.a;
                g.b += &o.b;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for (q, v) in &mut self.blocks {
            for g in q.iter_mut().chain(v.iter_mut()) {
                g.a *= factor;
                g.b *= factor;
            }
        }
    }

    /// Same order as [`AdapterSet::named_factors`].
    pub fn flat(&self) -> Vec<&Array2<f64>> {
        let mut out = Vec::new();
        for (q, v) in &self.blocks {
            for g in q.iter().chain(v.iter()) {
                out.push(&g.a);
                out.push(&g.b);
            }
        }
        out
    }
}

/// Final-layer CLS state of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct FaceEmbedding {
    pub raw: Array1<f64>,
}

impl FaceEmbedding {
    pub fn dim(&self) -> usize {
        self.raw.len()
    }

    /// Unit-norm copy used for scoring.
    pub fn normalized(&self) -> Result<Array1<f64>> {
        let norm = self.raw.dot(&self.raw).sqrt();
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(Error::ZeroNorm);
        }
        Ok(&self.raw / norm)
    }
}

struct BlockCache {
    x_in: Array2<f64>,
    ln1: LayerNormCache,
    h1: Array2<f64>,
    attn: attention::AttentionCache,
    ln2: LayerNormCache,
    pre_act: Array2<f64>,
}

/// Everything the backward pass needs from one forward pass.
pub struct ForwardCache {
    blocks: Vec<BlockCache>,
    final_ln: LayerNormCache,
}

fn normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    let n = Normal::new(0.0, std).expect("finite std");
    Array2::from_shape_simple_fn((rows, cols), || n.sample(rng))
}

fn normal_vector(rng: &mut ChaCha8Rng, len: usize, std: f64) -> Array1<f64> {
    let n = Normal::new(0.0, std).expect("finite std");
    Array1::from_shape_simple_fn(len, || n.sample(rng))
}

impl ViTBackbone {
    /// Seeded random backbone: dense weights `N(0, 1/fan_in)`, small random
    /// biases, CLS and position tables `N(0, 0.02²)`. Stands in for a
    /// pretrained network in desk-scale runs and tests.
    pub fn random(config: ViTConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model;
        let hidden = config.mlp_hidden();
        let linear = |rng: &mut ChaCha8Rng, out: usize, inp: usize| Linear {
            weight: normal_matrix(rng, out, inp, 1.0 / (inp as f64).sqrt()),
            bias: Some(normal_vector(rng, out, 0.02)),
        };
        let patch_embed = linear(&mut rng, d, config.patch_dim());
        let cls_token = normal_vector(&mut rng, d, 0.02);
        let pos_embed = normal_matrix(&mut rng, config.num_tokens(), d, 0.02);
        let eps = config.layer_norm_eps;
        let blocks = (0..config.n_layers)
            .map(|_| Block {
                norm1: LayerNorm::identity(d, eps),
                q: linear(&mut rng, d, d),
                k: linear(&mut rng, d, d),
                v: linear(&mut rng, d, d),
                o: linear(&mut rng, d, d),
                ls1: Array1::ones(d),
                norm2: LayerNorm::identity(d, eps),
                fc1: linear(&mut rng, hidden, d),
                fc2: linear(&mut rng, d, hidden),
                ls2: Array1::ones(d),
            })
            .collect();
        Ok(Self {
            patch_embed,
            cls_token,
            pos_embed,
            norm_pre: None,
            blocks,
            norm: LayerNorm::identity(d, eps),
            pixel_mean: vec![0.5; config.channels],
            pixel_std: vec![0.5; config.channels],
            config,
        })
    }

    pub fn num_parameters(&self) -> usize {
        self.to_named_arrays().arrays.values().map(|a| a.len()).sum()
    }

    /// Splits the image into non-overlapping patches, projects them, prepends
    /// the CLS token and adds position embeddings. Row 0 is CLS.
    pub fn patchify_and_embed(&self, image: ArrayView3<f64>) -> Result<Array2<f64>> {
        let cfg = &self.config;
        let (h, w, c) = image.dim();
        if h != cfg.image_size || w != cfg.image_size || c != cfg.channels {
            return Err(Error::dims(
                "input image (H, W, C)",
                (cfg.image_size, cfg.image_size, cfg.channels),
                (h, w, c),
            ));
        }
        let p = cfg.patch_size;
        let grid = cfg.grid();
        let mut patches = Array2::zeros((cfg.num_patches(), cfg.patch_dim()));
        for gy in 0..grid {
            for gx in 0..grid {
                let mut row = patches.row_mut(gy * grid + gx);
                let mut idx = 0;
                for ch in 0..c {
                    for y in 0..p {
                        for x in 0..p {
                            row[idx] = image[[gy * p + y, gx * p + x, ch]];
                            idx += 1;
                        }
                    }
                }
            }
        }
        let embedded = self.patch_embed.forward_rows(patches.view())?;
        let mut tokens = Array2::zeros((cfg.num_tokens(), cfg.d_model));
        tokens.row_mut(0).assign(&self.cls_token);
        tokens.slice_mut(s![1.., ..]).assign(&embedded);
        tokens += &self.pos_embed;
        Ok(tokens)
    }

    fn check_adapters(&self, adapters: Option<&AdapterSet>) -> Result<()> {
        if let Some(a) = adapters {
            if a.blocks.len() != self.blocks.len() {
                return Err(Error::dims("adapter blocks", self.blocks.len(), a.blocks.len()));
            }
        }
        Ok(())
    }

    fn block_forward(
        &self,
        block: &Block,
        x: Array2<f64>,
        adapters: Option<&AttentionAdapters>,
    ) -> Result<(Array2<f64>, BlockCache)> {
        let (h1, ln1) = block.norm1.forward(x.view());
        let (attn_out, attn) =
            attention::attention_forward(block, self.config.n_heads, h1.view(), adapters)?;
        let x_mid = &x + &(attn_out * &block.ls1);
        let (h2, ln2) = block.norm2.forward(x_mid.view());
        let pre_act = block.fc1.forward_rows(h2.view())?;
        let act = pre_act.mapv(|v| self.config.activation.apply(v));
        let mlp = block.fc2.forward_rows(act.view())?;
        let x_out = &x_mid + &(mlp * &block.ls2);
        Ok((
            x_out,
            BlockCache {
                x_in: x,
                ln1,
                h1,
                attn,
                ln2,
                pre_act,
            },
        ))
    }

    /// Returns the full token sequence after the last block (before the
    /// closing norm).
    pub fn encode_tokens(
        &self,
        image: ArrayView3<f64>,
        adapters: Option<&AdapterSet>,
    ) -> Result<Array2<f64>> {
        self.check_adapters(adapters)?;
        let mut x = self.input_tokens(image)?;
        for (i, block) in self.blocks.iter().enumerate() {
            x = self
                .block_forward(block, x, adapters.map(|a| &a.blocks[i]))?
                .0;
        }
        Ok(x)
    }

    fn input_tokens(&self, image: ArrayView3<f64>) -> Result<Array2<f64>> {
        let tokens = self.patchify_and_embed(image)?;
        Ok(match &self.norm_pre {
            Some(ln) => ln.forward(tokens.view()).0,
            None => tokens,
        })
    }

    /// Final CLS hidden state. Deterministic; no stochastic layers exist.
    pub fn extract_embedding(
        &self,
        image: ArrayView3<f64>,
        adapters: Option<&AdapterSet>,
    ) -> Result<FaceEmbedding> {
        let tokens = self.encode_tokens(image, adapters)?;
        let cls = tokens.slice(s![0..1, ..]);
        let (out, _) = self.norm.forward(cls);
        Ok(FaceEmbedding {
            raw: out.row(0).to_owned(),
        })
    }

    /// Forward pass keeping the activations needed by [`Self::backward`].
    pub fn forward_train(
        &self,
        image: ArrayView3<f64>,
        adapters: &AdapterSet,
    ) -> Result<(FaceEmbedding, ForwardCache)> {
        self.check_adapters(Some(adapters))?;
        let mut x = self.input_tokens(image)?;
        let mut caches = Vec::with_capacity(self.blocks.len());
        for (block, ad) in self.blocks.iter().zip(&adapters.blocks) {
            let (next, cache) = self.block_forward(block, x, Some(ad))?;
            caches.push(cache);
            x = next;
        }
        let (out, final_ln) = self.norm.forward(x.slice(s![0..1, ..]));
        Ok((
            FaceEmbedding {
                raw: out.row(0).to_owned(),
            },
            ForwardCache {
                blocks: caches,
                final_ln,
            },
        ))
    }

    /// Backpropagates `d_embedding` to the adapter factors. Frozen weights
    /// get no gradient.
    pub fn backward(
        &self,
        adapters: &AdapterSet,
        cache: &ForwardCache,
        d_embedding: ArrayView2<f64>,
    ) -> AdapterGrads {
        let mut grads = adapters.zero_grads();
        let d_cls = self.norm.backward(&cache.final_ln, d_embedding);
        let mut dx = Array2::zeros((self.config.num_tokens(), self.config.d_model));
        dx.row_mut(0).assign(&d_cls.row(0));
        for i in (0..self.blocks.len()).rev() {
            let (gq, gv) = &mut grads.blocks[i];
            dx = self.block_backward(
                &self.blocks[i],
                &adapters.blocks[i],
                &cache.blocks[i],
                dx,
                gq,
                gv,
                i > 0,
            );
        }
        grads
    }

    #[allow(clippy::too_many_arguments)]
    fn block_backward(
        &self,
        block: &Block,
        adapters: &AttentionAdapters,
        cache: &BlockCache,
        d_out: Array2<f64>,
        grad_q: &mut [LoraGrad],
        grad_v: &mut [LoraGrad],
        need_input_grad: bool,
    ) -> Array2<f64> {
        let act = self.config.activation;
        // MLP branch
        let d_mlp = &d_out * &block.ls2;
        let d_act = block.fc2.backward_input(d_mlp.view());
        let d_pre = &d_act * &cache.pre_act.mapv(|v| act.grad(v));
        let d_h2 = block.fc1.backward_input(d_pre.view());
        let d_mid = &d_out + &block.norm2.backward(&cache.ln2, d_h2.view());

        // attention branch
        let d_attn = &d_mid * &block.ls1;
        let d_concat = block.o.backward_input(d_attn.view());
        let a = &cache.attn;
        let n_heads = self.config.n_heads;
        let d_k = self.config.d_k();
        let inv_sqrt = 1.0 / (d_k as f64).sqrt();
        let mut dq = Array2::zeros(a.q.raw_dim());
        let mut dk = Array2::zeros(a.k.raw_dim());
        let mut dv = Array2::zeros(a.v.raw_dim());
        for h in 0..n_heads {
            let cols = s![.., h * d_k..(h + 1) * d_k];
            let p = &a.probs[h];
            let d_head = d_concat.slice(cols);
            let dp = d_head.dot(&a.v.slice(cols).t());
            dv.slice_mut(cols).assign(&p.t().dot(&d_head));
            let ds = crate::nn::softmax_rows_backward(p.view(), dp.view()) * inv_sqrt;
            dq.slice_mut(cols).assign(&ds.dot(&a.k.slice(cols)));
            dk.slice_mut(cols).assign(&ds.t().dot(&a.q.slice(cols)));
        }
        let h1 = cache.h1.view();
        let mut d_h1 = block.k.backward_input(dk.view());
        d_h1 += &adapters.q.backward_rows(
            &block.q,
            h1,
            a.q_adapter.as_ref().expect("adapter cache"),
            dq.view(),
            grad_q,
        );
        d_h1 += &adapters.v.backward_rows(
            &block.v,
            h1,
            a.v_adapter.as_ref().expect("adapter cache"),
            dv.view(),
            grad_v,
        );
        if !need_input_grad {
            return Array2::zeros(cache.x_in.raw_dim());
        }
        d_mid + block.norm1.backward(&cache.ln1, d_h1.view())
    }

    /// Canonical named-array layout of this backbone.
    pub fn to_named_arrays(&self) -> NamedArrays {
        let mut c = NamedArrays::new();
        let lin = |c: &mut NamedArrays, name: &str, l: &Linear| {
            c.insert2(format!("{name}.weight"), &l.weight);
            if let Some(b) = &l.bias {
                c.insert1(format!("{name}.bias"), b);
            }
        };
        let ln = |c: &mut NamedArrays, name: &str, l: &LayerNorm| {
            c.insert1(format!("{name}.weight"), &l.gamma);
            c.insert1(format!("{name}.bias"), &l.beta);
        };
        lin(&mut c, "patch_embed", &self.patch_embed);
        c.insert1("cls_token", &self.cls_token);
        c.insert2("pos_embed", &self.pos_embed);
        if let Some(pre) = &self.norm_pre {
            ln(&mut c, "norm_pre", pre);
        }
        for (i, b) in self.blocks.iter().enumerate() {
            let p = format!("blocks.{i}");
            ln(&mut c, &format!("{p}.norm1"), &b.norm1);
            lin(&mut c, &format!("{p}.attn.q"), &b.q);
            lin(&mut c, &format!("{p}.attn.k"), &b.k);
            lin(&mut c, &format!("{p}.attn.v"), &b.v);
            lin(&mut c, &format!("{p}.attn.proj"), &b.o);
            c.insert1(format!("{p}.ls1"), &b.ls1);
            ln(&mut c, &format!("{p}.norm2"), &b.norm2);
            lin(&mut c, &format!("{p}.mlp.fc1"), &b.fc1);
            lin(&mut c, &format!("{p}.mlp.fc2"), &b.fc2);
            c.insert1(format!("{p}.ls2"), &b.ls2);
        }
        ln(&mut c, "norm", &self.norm);
        c.metadata.insert(
            "vit_config".into(),
            serde_json::to_string(&self.config).expect("config serialises"),
        );
        c.metadata.insert("pixel_mean".into(), join(&self.pixel_mean));
        c.metadata.insert("pixel_std".into(), join(&self.pixel_std));
        c
    }

    /// SHA-256 fingerprint of all backbone arrays.
    pub fn fingerprint(&self) -> String {
        self.to_named_arrays().fingerprint()
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        self.to_named_arrays().save(path)
    }

    /// Loads a backbone saved by [`Self::save`] (canonical names, config in
    /// the metadata).
    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let c = NamedArrays::load(path)?;
        let config: ViTConfig = serde_json::from_str(c.meta("vit_config")?)?;
        Ok(load_backbone_weights(&c, &NameMapping::canonical(), &config)?.backbone)
    }

    /// Plain backbone with every adapter folded into its frozen projection.
    pub fn merged(&self, adapters: &AdapterSet) -> Result<Self> {
        self.check_adapters(Some(adapters))?;
        let mut out = self.clone();
        for (block, ad) in out.blocks.iter_mut().zip(&adapters.blocks) {
            block.q = ad.q.merge(&block.q);
            block.v = ad.v.merge(&block.v);
        }
        Ok(out)
    }
}

pub(crate) fn join(values: &[f64]) -> String {
    values
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

/// A random image in backbone input space, for tests and benchmarks.
pub fn random_image(config: &ViTConfig, seed: u64) -> Array3<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = Normal::new(0.0, 1.0).expect("finite std");
    Array3::from_shape_simple_fn(
        (config.image_size, config.image_size, config.channels),
        || n.sample(&mut rng),
    )
}
