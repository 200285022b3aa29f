//! Scaled dot-product attention and the multi-head layer with adapters on
//! the query and value projections.

use ndarray::{s, Array2, ArrayView2};

use super::{AttentionAdapters, Block};
use crate::error::{Error, Result};
use crate::lora::ProjectionCache;
use crate::nn::softmax_rows;

/// `softmax(Q Kᵀ / sqrt(d_k)) V` for one head, also returning the
/// attention probabilities.
pub fn attention_probs(
    q: ArrayView2<f64>,
    k: ArrayView2<f64>,
    v: ArrayView2<f64>,
) -> Result<(Array2<f64>, Array2<f64>)> {
    if q.ncols() != k.ncols() {
        return Err(Error::dims("attention key width", q.ncols(), k.ncols()));
    }
    if k.nrows() != v.nrows() {
        return Err(Error::dims("attention key/value length", k.nrows(), v.nrows()));
    }
    let d_k = q.ncols() as f64;
    let mut p = q.dot(&k.t()) / d_k.sqrt();
    softmax_rows(&mut p);
    let out = p.dot(&v);
    Ok((out, p))
}

pub fn attention_head(
    q: ArrayView2<f64>,
    k: ArrayView2<f64>,
    v: ArrayView2<f64>,
) -> Result<Array2<f64>> {
    attention_probs(q, k, v).map(|(out, _)| out)
}

/// Intermediate values of one multi-head attention call.
#[derive(Debug, Clone)]
pub(crate) struct AttentionCache {
    pub q: Array2<f64>,
    pub k: Array2<f64>,
    pub v: Array2<f64>,
    pub q_adapter: Option<ProjectionCache>,
    pub v_adapter: Option<ProjectionCache>,
    pub probs: Vec<Array2<f64>>,
}

pub(crate) fn attention_forward(
    block: &Block,
    n_heads: usize,
    x: ArrayView2<f64>,
    adapters: Option<&AttentionAdapters>,
) -> Result<(Array2<f64>, AttentionCache)> {
    let d_model = block.q.out_features();
    if x.ncols() != d_model {
        return Err(Error::dims("attention input width", d_model, x.ncols()));
    }
    let (q, q_adapter) = match adapters {
        Some(a) => {
            let (q, c) = a.q.forward_rows(&block.q, x)?;
            (q, Some(c))
        }
        None => (block.q.forward_rows(x)?, None),
    };
    let k = block.k.forward_rows(x)?;
    let (v, v_adapter) = match adapters {
        Some(a) => {
            let (v, c) = a.v.forward_rows(&block.v, x)?;
            (v, Some(c))
        }
        None => (block.v.forward_rows(x)?, None),
    };
    let d_k = d_model / n_heads;
    let mut concat = Array2::zeros((x.nrows(), d_model));
    let mut probs = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let cols = s![.., h * d_k..(h + 1) * d_k];
        let (out, p) = attention_probs(q.slice(cols), k.slice(cols), v.slice(cols))?;
        concat.slice_mut(cols).assign(&out);
        probs.push(p);
    }
    let out = block.o.forward_rows(concat.view())?;
    Ok((
        out,
        AttentionCache {
            q,
            k,
            v,
            q_adapter,
            v_adapter,
            probs,
        },
    ))
}

/// Multi-head self-attention over already normalised tokens:
/// `Concat(head_1, …, head_h) Wᵒ`, with `Q` and `V` carrying the adapters
/// when given.
pub fn multi_head_attention(
    tokens: ArrayView2<f64>,
    block: &Block,
    n_heads: usize,
    adapters: Option<&AttentionAdapters>,
) -> Result<Array2<f64>> {
    if n_heads == 0 || !block.q.out_features().is_multiple_of(n_heads) {
        return Err(Error::config("n_heads", "d_model must be divisible by n_heads"));
    }
    attention_forward(block, n_heads, tokens, adapters).map(|(out, _)| out)
}
