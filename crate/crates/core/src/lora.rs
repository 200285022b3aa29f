//! Low-rank adapters on frozen dense layers.
//!
//! An adapter holds `A` (`r × k`) and `B` (`d × r`) and contributes
//! `scale · B · A · x` on top of a frozen `W0 · x`. The scale is `alpha / r`
//! for standard LoRA and `alpha / sqrt(r)` for rank-stabilised LoRA. It is
//! applied identically in the forward pass and in [`AdaptedLinear::merge`].

use std::fmt;
use std::str::FromStr;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Linear, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScalingMode {
    /// `alpha / r`
    Standard,
    /// `alpha / sqrt(r)`
    #[default]
    RankStabilized,
}

impl ScalingMode {
    pub fn scale(self, alpha: f64, rank: usize) -> f64 {
        match self {
            ScalingMode::Standard => alpha / rank as f64,
            ScalingMode::RankStabilized => alpha / (rank as f64).sqrt(),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ScalingMode::Standard => "standard",
            ScalingMode::RankStabilized => "rank_stabilized",
        }
    }
}

impl fmt::Display for ScalingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ScalingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(ScalingMode::Standard),
            "rank_stabilized" | "rslora" => Ok(ScalingMode::RankStabilized),
            other => Err(Error::config(
                "scaling_mode",
                format!("unknown scaling mode `{other}`"),
            )),
        }
    }
}

/// How an adapter is laid over a multi-head projection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Realization {
    /// One adapter on the whole `d_model × d_model` projection.
    #[default]
    Fused,
    /// One adapter per head, each on that head's `d_k × d_model` row block.
    PerHead,
}

impl Realization {
    pub fn as_str(self) -> &'static str {
        match self {
            Realization::Fused => "fused",
            Realization::PerHead => "per_head",
        }
    }
}

impl FromStr for Realization {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fused" => Ok(Realization::Fused),
            "per_head" => Ok(Realization::PerHead),
            other => Err(Error::config(
                "realization",
                format!("unknown realization `{other}`"),
            )),
        }
    }
}

/// Hyper-parameters shared by every adapter injected into a backbone.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdapterConfig {
    pub rank: usize,
    pub alpha: f64,
    pub scaling_mode: ScalingMode,
    pub realization: Realization,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            rank: 16,
            alpha: 16.0,
            scaling_mode: ScalingMode::RankStabilized,
            realization: Realization::Fused,
        }
    }
}

impl AdapterConfig {
    pub fn scale(&self) -> f64 {
        self.scaling_mode.scale(self.alpha, self.rank)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter<F = f64> {
    /// Down projection, `r × k`.
    pub a: Array2<F>,
    /// Up projection, `d × r`.
    pub b: Array2<F>,
    pub alpha: f64,
    pub mode: ScalingMode,
}

/// Creates an adapter for a `d × k` weight: `A ~ N(0, 1/k)`, `B = 0`.
pub fn init_adapter<F: Scalar>(
    d: usize,
    k: usize,
    rank: usize,
    alpha: f64,
    mode: ScalingMode,
    seed: u64,
) -> Result<LoraAdapter<F>> {
    check_rank(d, k, rank)?;
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::InvalidAlpha(alpha));
    }
    if 2 * rank > d.min(k) {
        log::warn!(
            "LoRA rank {rank} exceeds half of min({d}, {k}); the update is not low-rank in practice"
        );
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0 / (k as f64).sqrt()).expect("finite std");
    let a = Array2::from_shape_simple_fn((rank, k), || {
        F::from_f64(normal.sample(&mut rng)).expect("representable")
    });
    Ok(LoraAdapter {
        a,
        b: Array2::zeros((d, rank)),
        alpha,
        mode,
    })
}

fn check_rank(d: usize, k: usize, rank: usize) -> Result<()> {
    if rank == 0 || rank > d.min(k) {
        return Err(Error::InvalidRank { rank, d, k });
    }
    Ok(())
}

impl<F: Scalar> LoraAdapter<F> {
    /// Wraps existing factors, validating shapes and hyper-parameters.
    pub fn from_parts(a: Array2<F>, b: Array2<F>, alpha: f64, mode: ScalingMode) -> Result<Self> {
        if a.nrows() != b.ncols() {
            return Err(Error::dims("adapter rank (rows of A vs cols of B)", b.ncols(), a.nrows()));
        }
        check_rank(b.nrows(), a.ncols(), a.nrows())?;
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(Error::InvalidAlpha(alpha));
        }
        Ok(Self { a, b, alpha, mode })
    }

    pub fn rank(&self) -> usize {
        self.a.nrows()
    }

    pub fn in_features(&self) -> usize {
        self.a.ncols()
    }

    pub fn out_features(&self) -> usize {
        self.b.nrows()
    }

    pub fn scale(&self) -> F {
        F::from_f64(self.mode.scale(self.alpha, self.rank())).expect("representable")
    }

    /// `r · (d + k)`
    pub fn num_parameters(&self) -> usize {
        self.a.len() + self.b.len()
    }

    /// `scale · B · A`, the dense update this adapter represents.
    pub fn delta(&self) -> Array2<F> {
        self.b.dot(&self.a) * self.scale()
    }

    /// Returns `(scale · (X Aᵀ) Bᵀ, X Aᵀ)` for row inputs `X`.
    pub fn forward_rows(&self, x: ArrayView2<F>) -> (Array2<F>, Array2<F>) {
        let u = x.dot(&self.a.t());
        let y = u.dot(&self.b.t()) * self.scale();
        (y, u)
    }

    /// Backward through [`LoraAdapter::forward_rows`]. Returns the input
    /// gradient and accumulates parameter gradients into `grad`.
    pub fn backward_rows(
        &self,
        x: ArrayView2<F>,
        u: ArrayView2<F>,
        dy: ArrayView2<F>,
        grad: &mut LoraGrad<F>,
    ) -> Array2<F> {
        let s = self.scale();
        // dU = s · dY · B
        let du = dy.dot(&self.b) * s;
        grad.b.scaled_add(s, &dy.t().dot(&u));
        grad.a += &du.t().dot(&x);
        du.dot(&self.a)
    }
}

/// Gradient buffers shaped like an adapter's factors.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraGrad<F = f64> {
    pub a: Array2<F>,
    pub b: Array2<F>,
}

impl<F: Scalar> LoraGrad<F> {
    pub fn zeros_like(adapter: &LoraAdapter<F>) -> Self {
        Self {
            a: Array2::zeros(adapter.a.raw_dim()),
            b: Array2::zeros(adapter.b.raw_dim()),
        }
    }
}

/// A frozen dense layer with one low-rank adapter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptedLinear<F = f64> {
    pub base: Linear<F>,
    pub adapter: LoraAdapter<F>,
}

impl<F: Scalar> AdaptedLinear<F> {
    pub fn new(base: Linear<F>, adapter: LoraAdapter<F>) -> Result<Self> {
        if adapter.out_features() != base.out_features()
            || adapter.in_features() != base.in_features()
        {
            return Err(Error::dims(
                "adapter vs frozen weight",
                base.weight.dim(),
                (adapter.out_features(), adapter.in_features()),
            ));
        }
        Ok(Self { base, adapter })
    }

    /// `W0 x + scale · B (A x) (+ bias)`
    pub fn forward(&self, x: ArrayView1<F>) -> Result<Array1<F>> {
        let mut y = self.base.forward(x)?;
        let ax = self.adapter.a.dot(&x);
        y.scaled_add(self.adapter.scale(), &self.adapter.b.dot(&ax));
        Ok(y)
    }

    pub fn forward_rows(&self, x: ArrayView2<F>) -> Result<Array2<F>> {
        let mut y = self.base.forward_rows(x)?;
        y += &self.adapter.forward_rows(x).0;
        Ok(y)
    }

    /// Folds the scaled update into a plain layer. `self` is left untouched.
    pub fn merge(&self) -> Linear<F> {
        Linear {
            weight: &self.base.weight + &self.adapter.delta(),
            bias: self.base.bias.clone(),
        }
    }

    pub fn trainable_parameters(&self) -> usize {
        self.adapter.num_parameters()
    }
}

/// Adapter(s) attached to one attention projection. In the fused
/// realization there is a single adapter; per-head there is one adapter per
/// row block of the projection's output.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionAdapter<F = f64> {
    pub realization: Realization,
    pub parts: Vec<LoraAdapter<F>>,
}

/// Forward-pass state saved for [`ProjectionAdapter::backward_rows`].
#[derive(Debug, Clone)]
pub struct ProjectionCache<F = f64> {
    u: Vec<Array2<F>>,
}

impl<F: Scalar> ProjectionAdapter<F> {
    /// Fresh adapter(s) for a square `d_model` projection split into `n_heads`.
    pub fn init(
        d_model: usize,
        n_heads: usize,
        realization: Realization,
        rank: usize,
        alpha: f64,
        mode: ScalingMode,
        seed: u64,
    ) -> Result<Self> {
        let parts = match realization {
            Realization::Fused => vec![init_adapter(d_model, d_model, rank, alpha, mode, seed)?],
            Realization::PerHead => {
                if n_heads == 0 || !d_model.is_multiple_of(n_heads) {
                    return Err(Error::config("n_heads", "d_model must be divisible by n_heads"));
                }
                let d_k = d_model / n_heads;
                (0..n_heads)
                    .map(|h| {
                        init_adapter(
                            d_k,
                            d_model,
                            rank,
                            alpha,
                            mode,
                            seed.wrapping_add(h as u64 + 1),
                        )
                    })
                    .collect::<Result<_>>()?
            }
        };
        Ok(Self { realization, parts })
    }

    fn rows_per_part(&self) -> usize {
        self.parts[0].out_features()
    }

    pub fn out_features(&self) -> usize {
        self.parts.iter().map(|p| p.out_features()).sum()
    }

    pub fn num_parameters(&self) -> usize {
        self.parts.iter().map(|p| p.num_parameters()).sum()
    }

    /// Frozen forward plus every adapter's contribution on its row block.
    pub fn forward_rows(
        &self,
        base: &Linear<F>,
        x: ArrayView2<F>,
    ) -> Result<(Array2<F>, ProjectionCache<F>)> {
        if self.out_features() != base.out_features()
            || self.parts.iter().any(|p| p.in_features() != base.in_features())
        {
            return Err(Error::dims(
                "projection adapter vs frozen weight",
                base.weight.dim(),
                (self.out_features(), self.parts[0].in_features()),
            ));
        }
        let mut y = base.forward_rows(x)?;
        let rows = self.rows_per_part();
        let mut u = Vec::with_capacity(self.parts.len());
        for (h, part) in self.parts.iter().enumerate() {
            let (dy, uh) = part.forward_rows(x);
            let mut block = y.slice_mut(s![.., h * rows..(h + 1) * rows]);
            block += &dy;
            u.push(uh);
        }
        Ok((y, ProjectionCache { u }))
    }

    pub fn backward_rows(
        &self,
        base: &Linear<F>,
        x: ArrayView2<F>,
        cache: &ProjectionCache<F>,
        dy: ArrayView2<F>,
        grads: &mut [LoraGrad<F>],
    ) -> Array2<F> {
        let mut dx = base.backward_input(dy);
        let rows = self.rows_per_part();
        for (h, (part, grad)) in self.parts.iter().zip(grads.iter_mut()).enumerate() {
            let dyh = dy.slice(s![.., h * rows..(h + 1) * rows]);
            dx += &part.backward_rows(x, cache.u[h].view(), dyh, grad);
        }
        dx
    }

    pub fn merge(&self, base: &Linear<F>) -> Linear<F> {
        let mut weight = base.weight.clone();
        let rows = self.rows_per_part();
        for (h, part) in self.parts.iter().enumerate() {
            let mut block = weight.slice_mut(s![h * rows..(h + 1) * rows, ..]);
            block += &part.delta();
        }
        Linear {
            weight,
            bias: base.bias.clone(),
        }
    }

    pub fn zero_grads(&self) -> Vec<LoraGrad<F>> {
        self.parts.iter().map(LoraGrad::zeros_like).collect()
    }

    /// Key segment used in checkpoints: `fused` or the head index.
    pub fn part_key(&self, index: usize) -> String {
        match self.realization {
            Realization::Fused => "fused".to_string(),
            Realization::PerHead => index.to_string(),
        }
    }
}
