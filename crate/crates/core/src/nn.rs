//! Frozen building blocks shared by the backbone: dense layers, layer norm,
//! GELU and row softmax, each with the input-gradient pass needed to
//! backpropagate into the adapters. None of these produce weight gradients.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, NdFloat, Zip};
use num_traits::FromPrimitive;

use crate::error::{Error, Result};

/// Scalar types the adapter math is generic over (`f32`, `f64`).
pub trait Scalar: NdFloat + FromPrimitive {}
impl<T: NdFloat + FromPrimitive> Scalar for T {}

/// Dense layer `y = W x + b` with `W` stored as `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<F = f64> {
    pub weight: Array2<F>,
    pub bias: Option<Array1<F>>,
}

impl<F: Scalar> Linear<F> {
    pub fn new(weight: Array2<F>, bias: Option<Array1<F>>) -> Result<Self> {
        if let Some(b) = &bias {
            if b.len() != weight.nrows() {
                return Err(Error::dims("linear bias", weight.nrows(), b.len()));
            }
        }
        Ok(Self { weight, bias })
    }

    pub fn in_features(&self) -> usize {
        self.weight.ncols()
    }

    pub fn out_features(&self) -> usize {
        self.weight.nrows()
    }

    pub fn forward(&self, x: ArrayView1<F>) -> Result<Array1<F>> {
        if x.len() != self.in_features() {
            return Err(Error::dims("linear input", self.in_features(), x.len()));
        }
        let mut y = self.weight.dot(&x);
        if let Some(b) = &self.bias {
            y += b;
        }
        Ok(y)
    }

    /// Applies the layer to every row of `x` (`n × in` → `n × out`).
    pub fn forward_rows(&self, x: ArrayView2<F>) -> Result<Array2<F>> {
        if x.ncols() != self.in_features() {
            return Err(Error::dims("linear input", self.in_features(), x.ncols()));
        }
        let mut y = x.dot(&self.weight.t());
        if let Some(b) = &self.bias {
            y += b;
        }
        Ok(y)
    }

    /// Gradient with respect to the rows of the input.
    pub fn backward_input(&self, dy: ArrayView2<F>) -> Array2<F> {
        dy.dot(&self.weight)
    }
}

/// Layer normalisation over the feature axis with affine parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub eps: f64,
}

/// Saved activations for [`LayerNorm::backward`].
#[derive(Debug, Clone)]
pub struct LayerNormCache {
    normalized: Array2<f64>,
    inv_std: Array1<f64>,
}

impl LayerNorm {
    pub fn identity(dim: usize, eps: f64) -> Self {
        Self {
            gamma: Array1::ones(dim),
            beta: Array1::zeros(dim),
            eps,
        }
    }

    pub fn dim(&self) -> usize {
        self.gamma.len()
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> (Array2<f64>, LayerNormCache) {
        let n = x.ncols() as f64;
        let mut normalized = x.to_owned();
        let mut inv_std = Array1::zeros(x.nrows());
        for (mut row, s) in normalized.rows_mut().into_iter().zip(inv_std.iter_mut()) {
            let mean = row.sum() / n;
            row -= mean;
            let var = row.iter().map(|v| v * v).sum::<f64>() / n;
            *s = 1.0 / (var + self.eps).sqrt();
            row *= *s;
        }
        let y = &normalized * &self.gamma + &self.beta;
        (
            y,
            LayerNormCache {
                normalized,
                inv_std,
            },
        )
    }

    pub fn backward(&self, cache: &LayerNormCache, dy: ArrayView2<f64>) -> Array2<f64> {
        let n = dy.ncols() as f64;
        let dxhat = &dy * &self.gamma;
        let mut dx = Array2::zeros(dy.raw_dim());
        for (((mut out, g), xh), s) in dx
            .rows_mut()
            .into_iter()
            .zip(dxhat.rows())
            .zip(cache.normalized.rows())
            .zip(cache.inv_std.iter())
        {
            let sum_g = g.sum();
            let sum_gx = g.dot(&xh);
            Zip::from(&mut out)
                .and(&g)
                .and(&xh)
                .for_each(|o, &gi, &xi| *o = s / n * (n * gi - sum_g - xi * sum_gx));
        }
        dx
    }
}

const INV_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Exact (erf-based) GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * INV_SQRT_2))
}

pub fn gelu_grad(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * INV_SQRT_2)) + x * INV_SQRT_2PI * (-0.5 * x * x).exp()
}

/// Numerically stable softmax applied independently to each row.
pub fn softmax_rows(scores: &mut Array2<f64>) {
    for mut row in scores.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let total = row.sum();
        row /= total;
    }
}

/// Backward pass of a row softmax given its output `p` and upstream `dp`.
pub fn softmax_rows_backward(p: ArrayView2<f64>, dp: ArrayView2<f64>) -> Array2<f64> {
    let dots = (&p * &dp).sum_axis(Axis(1));
    let mut ds = dp.to_owned();
    for ((mut row, prow), d) in ds.rows_mut().into_iter().zip(p.rows()).zip(dots.iter()) {
        row -= *d;
        row *= &prow;
    }
    ds
}
