//! CosFace classification head: large-margin cosine loss over L2-normalised
//! embeddings and class weights.
//!
//! Target logit is `s · (cos θ_y − m)`, every other logit is `s · cos θ_j`.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::nn::Linear;

/// Guards normalisation of all-zero class weights.
pub const NORM_EPS: f64 = 1e-12;

pub const DEFAULT_MARGIN: f64 = 0.3;
pub const DEFAULT_SCALE: f64 = 64.0;

#[derive(Debug, Clone, PartialEq)]
pub struct CosFaceHead {
    /// `C × D` class centres (normalised at use).
    pub weight: Array2<f64>,
    pub margin: f64,
    pub scale: f64,
    /// Optional trainable projection applied to the embedding before scoring.
    pub neck: Option<Linear>,
}

/// Gradients for the trainable parts of a [`CosFaceHead`].
#[derive(Debug, Clone, PartialEq)]
pub struct HeadGrads {
    pub weight: Array2<f64>,
    pub neck: Option<(Array2<f64>, Array1<f64>)>,
}

fn check_params(margin: f64, scale: f64) -> Result<()> {
    if !(0.0..1.0).contains(&margin) {
        return Err(Error::config("loss.margin", "must lie in [0, 1)"));
    }
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::config("loss.scale", "must be positive"));
    }
    Ok(())
}

fn unit(v: ArrayView1<f64>) -> (Array1<f64>, f64) {
    let norm = v.dot(&v).sqrt();
    (&v / norm.max(NORM_EPS), norm)
}

/// Backward of `v / max(‖v‖, eps)` given the unit vector and the norm.
fn unit_backward(u: ArrayView1<f64>, norm: f64, du: ArrayView1<f64>) -> Array1<f64> {
    if norm <= NORM_EPS {
        return &du / NORM_EPS;
    }
    (&du - &(&u * u.dot(&du))) / norm
}

impl CosFaceHead {
    pub fn new(weight: Array2<f64>, margin: f64, scale: f64) -> Result<Self> {
        check_params(margin, scale)?;
        Ok(Self {
            weight,
            margin,
            scale,
            neck: None,
        })
    }

    /// Class centres drawn from `N(0, 1/D)`.
    pub fn init(classes: usize, dim: usize, margin: f64, scale: f64, seed: u64) -> Result<Self> {
        if classes == 0 || dim == 0 {
            return Err(Error::config("loss.classes", "need at least one class and dimension"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = Normal::new(0.0, 1.0 / (dim as f64).sqrt()).expect("finite std");
        Self::new(
            Array2::from_shape_simple_fn((classes, dim), || n.sample(&mut rng)),
            margin,
            scale,
        )
    }

    /// Adds a linear neck `input_dim → output_dim`; class centres are
    /// re-initialised to the neck's width.
    pub fn with_neck(mut self, input_dim: usize, seed: u64) -> Self {
        let out = self.weight.ncols();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = Normal::new(0.0, 1.0 / (input_dim as f64).sqrt()).expect("finite std");
        self.neck = Some(Linear {
            weight: Array2::from_shape_simple_fn((out, input_dim), || n.sample(&mut rng)),
            bias: Some(Array1::zeros(out)),
        });
        self
    }

    pub fn classes(&self) -> usize {
        self.weight.nrows()
    }

    /// Width of the embeddings this head accepts.
    pub fn input_dim(&self) -> usize {
        match &self.neck {
            Some(n) => n.in_features(),
            None => self.weight.ncols(),
        }
    }

    pub fn num_parameters(&self) -> usize {
        self.weight.len()
            + self
                .neck
                .as_ref()
                .map_or(0, |n| n.weight.len() + n.bias.as_ref().map_or(0, |b| b.len()))
    }

    fn project(&self, embedding: ArrayView1<f64>) -> Result<Array1<f64>> {
        if embedding.len() != self.input_dim() {
            return Err(Error::dims("head input", self.input_dim(), embedding.len()));
        }
        let norm = embedding.dot(&embedding).sqrt();
        if !(norm > 0.0) {
            return Err(Error::ZeroNorm);
        }
        match &self.neck {
            Some(n) => n.forward(embedding),
            None => Ok(embedding.to_owned()),
        }
    }

    fn unit_weights(&self) -> (Array2<f64>, Array1<f64>) {
        let norms = self.weight.map_axis(Axis(1), |r| r.dot(&r).sqrt());
        let mut w = self.weight.clone();
        for (mut row, n) in w.rows_mut().into_iter().zip(norms.iter()) {
            row /= n.max(NORM_EPS);
        }
        (w, norms)
    }

    /// Cosines between the embedding and every class centre.
    pub fn cosines(&self, embedding: ArrayView1<f64>) -> Result<Array1<f64>> {
        let z = self.project(embedding)?;
        let (u, _) = unit(z.view());
        Ok(self.unit_weights().0.dot(&u))
    }

    pub fn logits(&self, embedding: ArrayView1<f64>, label: usize) -> Result<Array1<f64>> {
        if label >= self.classes() {
            return Err(Error::LabelOutOfRange {
                label,
                classes: self.classes(),
            });
        }
        let mut logits = self.cosines(embedding)?;
        logits[label] -= self.margin;
        logits *= self.scale;
        Ok(logits)
    }

    /// Mean cross-entropy of the margin logits over a batch (rows).
    pub fn loss(&self, embeddings: ArrayView2<f64>, labels: &[usize]) -> Result<f64> {
        Ok(self.loss_and_grads(embeddings, labels)?.0)
    }

    /// Loss, gradient with respect to each (raw) embedding row, and head
    /// parameter gradients.
    pub fn loss_and_grads(
        &self,
        embeddings: ArrayView2<f64>,
        labels: &[usize],
    ) -> Result<(f64, Array2<f64>, HeadGrads)> {
        let batch = embeddings.nrows();
        if batch == 0 {
            return Err(Error::EmptyBatch);
        }
        if labels.len() != batch {
            return Err(Error::dims("labels", batch, labels.len()));
        }
        let (w_unit, w_norms) = self.unit_weights();
        let mut d_w_unit = Array2::zeros(self.weight.raw_dim());
        let mut d_emb = Array2::zeros(embeddings.raw_dim());
        let mut neck_grads = self
            .neck
            .as_ref()
            .map(|n| (Array2::zeros(n.weight.raw_dim()), Array1::zeros(n.out_features())));
        let mut total = 0.0;
        for (i, (row, &label)) in embeddings.rows().into_iter().zip(labels).enumerate() {
            if label >= self.classes() {
                return Err(Error::LabelOutOfRange {
                    label,
                    classes: self.classes(),
                });
            }
            let z = self.project(row)?;
            let (u, norm) = unit(z.view());
            let mut logits = w_unit.dot(&u);
            logits[label] -= self.margin;
            logits *= self.scale;
            let max = logits.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let lse = max + logits.mapv(|v| (v - max).exp()).sum().ln();
            total += lse - logits[label];

            // d loss / d cos_j = s · (p_j − [j = y]) / B
            let mut d_cos = logits.mapv(|v| (v - lse).exp());
            d_cos[label] -= 1.0;
            d_cos *= self.scale / batch as f64;

            d_w_unit += &d_cos
                .view()
                .insert_axis(Axis(1))
                .dot(&u.view().insert_axis(Axis(0)));
            let d_u = w_unit.t().dot(&d_cos);
            let d_z = unit_backward(u.view(), norm, d_u.view());
            let d_e = match (&self.neck, &mut neck_grads) {
                (Some(n), Some((gw, gb))) => {
                    *gw += &d_z
                        .view()
                        .insert_axis(Axis(1))
                        .dot(&row.insert_axis(Axis(0)));
                    *gb += &d_z;
                    n.weight.t().dot(&d_z)
                }
                _ => d_z,
            };
            d_emb.row_mut(i).assign(&d_e);
        }
        let mut d_weight = Array2::zeros(self.weight.raw_dim());
        for (((mut out, du), u), &n) in d_weight
            .rows_mut()
            .into_iter()
            .zip(d_w_unit.rows())
            .zip(w_unit.rows())
            .zip(w_norms.iter())
        {
            out.assign(&unit_backward(u, n, du));
        }
        Ok((
            total / batch as f64,
            d_emb,
            HeadGrads {
                weight: d_weight,
                neck: neck_grads,
            },
        ))
    }
}

/// Cross-entropy of one logit vector against `label`.
pub fn cross_entropy(logits: ArrayView1<f64>, label: usize) -> f64 {
    let max = logits.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    max + logits.mapv(|v| (v - max).exp()).sum().ln() - logits[label]
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-1.0..1.0))
    }

    #[test]
    fn hand_example_two_classes() {
        // cos θ_y = 0.8, cos θ_other = 0.5
        let theta_y = 0.8f64.acos();
        let theta_o = 0.5f64.acos();
        let head = CosFaceHead::new(
            array![[theta_y.cos(), theta_y.sin()], [theta_o.cos(), theta_o.sin()]],
            0.3,
            2.0,
        )
        .unwrap();
        let e = array![1.0, 0.0];
        let logits = head.logits(e.view(), 0).unwrap();
        assert!((logits[0] - 1.0).abs() < 1e-12);
        assert!((logits[1] - 1.0).abs() < 1e-12);
        let loss = head.loss(e.view().insert_axis(Axis(0)), &[0]).unwrap();
        assert!((loss - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn zero_margin_unit_scale_gives_raw_cosines() {
        let head = CosFaceHead::new(random(4, 3, 1), 0.0, 1.0).unwrap();
        let e = array![0.2, -0.4, 0.9];
        let logits = head.logits(e.view(), 2).unwrap();
        let cos = head.cosines(e.view()).unwrap();
        assert_eq!(logits, cos);
        let ce = cross_entropy(cos.view(), 2);
        let loss = head.loss(e.view().insert_axis(Axis(0)), &[2]).unwrap();
        assert!((ce - loss).abs() < 1e-12);
        assert!(cos.iter().all(|c| (-1.0..=1.0).contains(c)));
    }

    #[test]
    fn errors() {
        let head = CosFaceHead::new(random(3, 2, 2), 0.3, 64.0).unwrap();
        assert!(matches!(
            head.logits(array![1.0, 0.0].view(), 3),
            Err(Error::LabelOutOfRange { label: 3, classes: 3 })
        ));
        assert!(matches!(head.logits(array![0.0, 0.0].view(), 0), Err(Error::ZeroNorm)));
        assert!(matches!(
            head.loss(Array2::zeros((0, 2)).view(), &[]),
            Err(Error::EmptyBatch)
        ));
        assert!(CosFaceHead::new(random(3, 2, 2), 1.0, 64.0).is_err());
        assert!(CosFaceHead::new(random(3, 2, 2), 0.3, 0.0).is_err());
    }

    #[test]
    fn perfect_alignment_loss_vanishes_with_scale() {
        let w = array![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        let e = array![[2.0, 0.0, 0.0]];
        let mut prev = f64::INFINITY;
        for s in [1.0, 4.0, 16.0, 64.0] {
            let loss = CosFaceHead::new(w.clone(), 0.0, s).unwrap().loss(e.view(), &[0]).unwrap();
            assert!(loss < prev);
            prev = loss;
        }
        assert!(prev < 1e-20);
    }

    #[test]
    fn zero_class_weight_is_guarded() {
        let head = CosFaceHead::new(array![[0.0, 0.0], [1.0, 0.0]], 0.3, 64.0).unwrap();
        let loss = head.loss(array![[1.0, 1.0]].view(), &[0]).unwrap();
        assert!(loss.is_finite());
    }

    /// Independent scalar implementation with explicit loops.
    fn loop_loss(w: &Array2<f64>, e: &Array2<f64>, labels: &[usize], m: f64, s: f64) -> f64 {
        let mut total = 0.0;
        for i in 0..e.nrows() {
            let mut en = 0.0;
            for k in 0..e.ncols() {
                en += e[[i, k]] * e[[i, k]];
            }
            let en = en.sqrt();
            let mut logits = Vec::new();
            for j in 0..w.nrows() {
                let mut wn = 0.0;
                let mut dot = 0.0;
                for k in 0..w.ncols() {
                    wn += w[[j, k]] * w[[j, k]];
                    dot += w[[j, k]] * e[[i, k]];
                }
                let cos = dot / (wn.sqrt() * en);
                logits.push(if j == labels[i] { s * (cos - m) } else { s * cos });
            }
            let mut z = 0.0;
            for l in &logits {
                z += l.exp();
            }
            total += -(logits[labels[i]].exp() / z).ln();
        }
        total / e.nrows() as f64
    }

    #[test]
    fn batch_loss_matches_loop_oracle() {
        let w = random(4, 5, 3);
        let e = random(6, 5, 4);
        let labels = [0, 3, 1, 2, 2, 0];
        for (m, s) in [(0.3, 8.0), (0.0, 1.0), (0.35, 16.0)] {
            let head = CosFaceHead::new(w.clone(), m, s).unwrap();
            let loss = head.loss(e.view(), &labels).unwrap();
            let oracle = loop_loss(&w, &e, &labels, m, s);
            assert!((loss - oracle).abs() <= 1e-10, "{loss} vs {oracle}");
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let e = random(5, 4, 5);
        let labels = [1, 0, 2, 2, 1];
        for with_neck in [false, true] {
            let mut head = CosFaceHead::init(3, 4, 0.3, 64.0, 6).unwrap();
            if with_neck {
                head = CosFaceHead::init(3, 3, 0.3, 64.0, 6).unwrap().with_neck(4, 7);
                let n = head.neck.as_mut().unwrap();
                n.bias = Some(array![0.1, -0.2, 0.05]);
            }
            let (_, d_emb, grads) = head.loss_and_grads(e.view(), &labels).unwrap();
            let h = 1e-6;
            let check = |analytic: f64, fd: f64, what: &str| {
                let rel = (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-6);
                assert!(rel <= 1e-4, "{what}: analytic {analytic} fd {fd}");
            };
            for idx in 0..e.len() {
                let mut p = e.clone();
                p.as_slice_mut().unwrap()[idx] += h;
                let mut m = e.clone();
                m.as_slice_mut().unwrap()[idx] -= h;
                let fd = (head.loss(p.view(), &labels).unwrap() - head.loss(m.view(), &labels).unwrap()) / (2.0 * h);
                check(d_emb.as_slice().unwrap()[idx], fd, "embedding");
            }
            for idx in 0..head.weight.len() {
                let mut p = head.clone();
                p.weight.as_slice_mut().unwrap()[idx] += h;
                let mut m = head.clone();
                m.weight.as_slice_mut().unwrap()[idx] -= h;
                let fd = (p.loss(e.view(), &labels).unwrap() - m.loss(e.view(), &labels).unwrap()) / (2.0 * h);
                check(grads.weight.as_slice().unwrap()[idx], fd, "weight");
            }
            if let Some((gw, gb)) = &grads.neck {
                for idx in 0..gw.len() {
                    let mut p = head.clone();
                    p.neck.as_mut().unwrap().weight.as_slice_mut().unwrap()[idx] += h;
                    let mut m = head.clone();
                    m.neck.as_mut().unwrap().weight.as_slice_mut().unwrap()[idx] -= h;
                    let fd = (p.loss(e.view(), &labels).unwrap() - m.loss(e.view(), &labels).unwrap()) / (2.0 * h);
                    check(gw.as_slice().unwrap()[idx], fd, "neck weight");
                }
                for idx in 0..gb.len() {
                    let mut p = head.clone();
                    p.neck.as_mut().unwrap().bias.as_mut().unwrap()[idx] += h;
                    let mut m = head.clone();
                    m.neck.as_mut().unwrap().bias.as_mut().unwrap()[idx] -= h;
                    let fd = (p.loss(e.view(), &labels).unwrap() - m.loss(e.view(), &labels).unwrap()) / (2.0 * h);
                    check(gb[idx], fd, "neck bias");
                }
            }
        }
    }

    proptest! {
        #[test]
        fn logits_ignore_embedding_scale(seed in 0u64..1000, factor in 1e-3f64..1e3) {
            let head = CosFaceHead::new(random(5, 4, seed), 0.3, 64.0).unwrap();
            let e = random(1, 4, seed + 1).row(0).to_owned();
            let a = head.logits(e.view(), 1).unwrap();
            let b = head.logits((&e * factor).view(), 1).unwrap();
            for (x, y) in a.iter().zip(b.iter()) {
                prop_assert!((x - y).abs() <= 1e-9);
            }
        }

        #[test]
        fn loss_nondecreasing_in_margin(seed in 0u64..1000, m1 in 0.0f64..0.99, m2 in 0.0f64..0.99) {
            let (lo, hi) = if m1 <= m2 { (m1, m2) } else { (m2, m1) };
            let w = random(4, 3, seed);
            let e = random(5, 3, seed + 7);
            let labels = [0, 1, 2, 3, 0];
            let l_lo = CosFaceHead::new(w.clone(), lo, 16.0).unwrap().loss(e.view(), &labels).unwrap();
            let l_hi = CosFaceHead::new(w, hi, 16.0).unwrap().loss(e.view(), &labels).unwrap();
            prop_assert!(l_hi >= l_lo - 1e-12);
        }
    }
}
