//! Verification metrics over pair scores.
//!
//! Scores are compared with a `score >= threshold` rule everywhere.

use ndarray::ArrayView1;
use serde::{Deserialize, Serialize};

use crate::data::FOLDS;
use crate::error::{Error, Result};

/// Cosine of the angle between two embeddings, clamped to `[-1, 1]`.
pub fn similarity(a: ArrayView1<f64>, b: ArrayView1<f64>) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::dims("embedding length", a.len(), b.len()));
    }
    let na = a.dot(&a).sqrt();
    let nb = b.dot(&b).sqrt();
    if !(na > 0.0 && nb > 0.0) {
        return Err(Error::ZeroNorm);
    }
    Ok((a.dot(&b) / (na * nb)).clamp(-1.0, 1.0))
}

fn check_lengths(scores: &[f64], labels: &[bool]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::dims("scores vs labels", scores.len(), labels.len()));
    }
    Ok(())
}

/// Sorted distinct scores.
fn distinct(scores: &[f64]) -> Vec<f64> {
    let mut v = scores.to_vec();
    v.sort_by(f64::total_cmp);
    v.dedup();
    v
}

/// Candidate thresholds: one below the smallest score, the midpoints between
/// adjacent distinct scores, and one above the largest score.
pub fn candidate_thresholds(scores: &[f64]) -> Vec<f64> {
    let d = distinct(scores);
    let mut out = Vec::with_capacity(d.len() + 1);
    if let (Some(first), Some(last)) = (d.first(), d.last()) {
        out.push(first - 1.0);
        out.extend(d.windows(2).map(|w| 0.5 * (w[0] + w[1])));
        out.push(last + 1.0);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TenFold {
    /// Mean of the per-fold accuracies, in percent.
    pub accuracy: f64,
    pub fold_accuracies: Vec<f64>,
    pub thresholds: Vec<f64>,
}

/// Ten-fold verification accuracy. For each fold the threshold maximising
/// accuracy on the other nine folds is chosen from
/// [`candidate_thresholds`] of all scores (ties go to the smallest
/// threshold) and applied to the held-out fold.
pub fn tenfold_accuracy(scores: &[f64], labels: &[bool], folds: &[usize]) -> Result<TenFold> {
    check_lengths(scores, labels)?;
    if folds.len() != scores.len() {
        return Err(Error::dims("scores vs folds", scores.len(), folds.len()));
    }
    if let Some(&f) = folds.iter().find(|&&f| f >= FOLDS) {
        return Err(Error::InvalidProtocol(format!("fold {f} outside 0..{FOLDS}")));
    }
    for f in 0..FOLDS {
        if !folds.contains(&f) {
            return Err(Error::MissingFold(f));
        }
    }
    let levels = distinct(scores);
    let candidates = candidate_thresholds(scores);
    // Candidate c predicts "genuine" exactly for scores at level >= c.
    let level_of = |s: f64| levels.partition_point(|&l| l < s);
    let level: Vec<usize> = scores.iter().map(|&s| level_of(s)).collect();
    let k = levels.len();

    let mut result = TenFold {
        accuracy: 0.0,
        fold_accuracies: Vec::with_capacity(FOLDS),
        thresholds: Vec::with_capacity(FOLDS),
    };
    for f in 0..FOLDS {
        let mut gen = vec![0usize; k];
        let mut imp = vec![0usize; k];
        for i in 0..scores.len() {
            if folds[i] != f {
                if labels[i] {
                    gen[level[i]] += 1;
                } else {
                    imp[level[i]] += 1;
                }
            }
        }
        // correct(c) = #genuine at level >= c + #impostor at level < c
        let mut correct: usize = gen.iter().sum();
        let mut best = (correct, 0usize);
        for c in 1..=k {
            correct = correct + imp[c - 1] - gen[c - 1];
            if correct > best.0 {
                best = (correct, c);
            }
        }
        let c = best.1;
        let (mut right, mut total) = (0usize, 0usize);
        for i in 0..scores.len() {
            if folds[i] == f {
                total += 1;
                if (level[i] >= c) == labels[i] {
                    right += 1;
                }
            }
        }
        result.thresholds.push(candidates[c]);
        result.fold_accuracies.push(100.0 * right as f64 / total as f64);
    }
    result.accuracy = result.fold_accuracies.iter().sum::<f64>() / FOLDS as f64;
    Ok(result)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TarAtFar {
    pub far_target: f64,
    pub tar: f64,
    /// FAR actually reached at the chosen threshold.
    pub far: f64,
    /// `None` when no observed score reaches the target (nothing accepted).
    pub threshold: Option<f64>,
    /// False when fewer than `1 / far_target` impostor scores exist; the
    /// value is then computed at the zero-FAR threshold.
    pub attainable: bool,
}

fn split(scores: &[f64], labels: &[bool]) -> Result<(Vec<f64>, Vec<f64>)> {
    check_lengths(scores, labels)?;
    let mut gen = Vec::new();
    let mut imp = Vec::new();
    for (&s, &l) in scores.iter().zip(labels) {
        if l {
            gen.push(s);
        } else {
            imp.push(s);
        }
    }
    if gen.is_empty() || imp.is_empty() {
        return Err(Error::DegenerateScores);
    }
    gen.sort_by(f64::total_cmp);
    imp.sort_by(f64::total_cmp);
    Ok((gen, imp))
}

fn fraction_at_or_above(sorted: &[f64], t: f64) -> f64 {
    (sorted.len() - sorted.partition_point(|&s| s < t)) as f64 / sorted.len() as f64
}

/// TAR at each FAR target. The threshold is the smallest observed score
/// whose FAR does not exceed the target.
pub fn tar_at_far(scores: &[f64], labels: &[bool], far_targets: &[f64]) -> Result<Vec<TarAtFar>> {
    let (gen, imp) = split(scores, labels)?;
    let levels = distinct(scores);
    far_targets
        .iter()
        .map(|&target| {
            if !(0.0..=1.0).contains(&target) {
                return Err(Error::config("far_targets", "must lie in [0, 1]"));
            }
            // FAR is non-increasing in the threshold, so the admissible
            // thresholds form a suffix of the sorted levels.
            let first = levels.partition_point(|&t| fraction_at_or_above(&imp, t) > target);
            let threshold = levels.get(first).copied();
            let (tar, far) = match threshold {
                Some(t) => (fraction_at_or_above(&gen, t), fraction_at_or_above(&imp, t)),
                None => (0.0, 0.0),
            };
            Ok(TarAtFar {
                far_target: target,
                tar,
                far,
                threshold,
                attainable: target * imp.len() as f64 >= 1.0,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub far: f64,
    pub tar: f64,
}

/// Empirical ROC: one point per distinct score (as threshold), from the
/// strictest to the loosest, with no interpolation.
pub fn roc_curve(scores: &[f64], labels: &[bool]) -> Result<Vec<RocPoint>> {
    let (gen, imp) = split(scores, labels)?;
    Ok(distinct(scores)
        .into_iter()
        .rev()
        .map(|t| RocPoint {
            threshold: t,
            far: fraction_at_or_above(&imp, t),
            tar: fraction_at_or_above(&gen, t),
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupAccuracy {
    pub group: String,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasReport {
    pub groups: Vec<GroupAccuracy>,
    pub average: f64,
    /// Sample standard deviation (divisor n − 1).
    pub std: f64,
    /// Max group error over min group error; `None` when the smallest error
    /// is zero but the largest is not.
    pub ser: Option<f64>,
    pub ser_infinite: bool,
}

/// Average, STD and SER over per-group accuracies (percent).
pub fn bias_report(groups: &[GroupAccuracy]) -> Result<BiasReport> {
    let n = groups.len();
    if n < 2 {
        return Err(Error::TooFewGroups(n));
    }
    if let Some(g) = groups.iter().find(|g| !(0.0..=100.0).contains(&g.accuracy)) {
        return Err(Error::config(
            "accuracies",
            format!("{} is outside [0, 100] for group `{}`", g.accuracy, g.group),
        ));
    }
    let acc: Vec<f64> = groups.iter().map(|g| g.accuracy).collect();
    let average = acc.iter().sum::<f64>() / n as f64;
    let var = acc.iter().map(|a| (a - average).powi(2)).sum::<f64>() / (n - 1) as f64;
    let errors: Vec<f64> = acc.iter().map(|a| 100.0 - a).collect();
    let max_err = errors.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min_err = errors.iter().copied().fold(f64::INFINITY, f64::min);
    let (ser, ser_infinite) = if min_err > 0.0 {
        (Some(max_err / min_err), false)
    } else if max_err > 0.0 {
        (None, true)
    } else {
        (Some(1.0), false)
    };
    Ok(BiasReport {
        groups: groups.to_vec(),
        average,
        std: var.sqrt(),
        ser,
        ser_infinite,
    })
}

/// Convenience wrapper over `(name, accuracy)` pairs.
pub fn bias_from_accuracies(accuracies: &[(String, f64)]) -> Result<BiasReport> {
    bias_report(
        &accuracies
            .iter()
            .map(|(g, a)| GroupAccuracy {
                group: g.clone(),
                accuracy: *a,
            })
            .collect::<Vec<_>>(),
    )
}

/// Per-group ten-fold accuracies from each group's scores, labels and folds.
pub fn bias_from_scores(groups: &[(String, Vec<f64>, Vec<bool>, Vec<usize>)]) -> Result<BiasReport> {
    let mut acc = Vec::with_capacity(groups.len());
    for (name, scores, labels, folds) in groups {
        if scores.is_empty() {
            return Err(Error::EmptyGroup(name.clone()));
        }
        acc.push(GroupAccuracy {
            group: name.clone(),
            accuracy: tenfold_accuracy(scores, labels, folds)?.accuracy,
        });
    }
    bias_report(&acc)
}

/// Two-decimal rendering with ties rounded away from zero. A tiny nudge
/// keeps decimal ties such as 78.565 (stored just below) rounding up.
pub fn fmt2(x: f64) -> String {
    if !x.is_finite() {
        return x.to_string();
    }
    format!("{:.2}", x + x.signum() * 1e-9)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn similarity_examples() {
        let e = array![0.3, -1.2, 2.0];
        assert!((similarity(e.view(), e.view()).unwrap() - 1.0).abs() < 1e-15);
        assert!((similarity(e.view(), (-&e).view()).unwrap() + 1.0).abs() < 1e-15);
        let s = similarity(array![1.0, 0.0].view(), array![1.0, 1.0].view()).unwrap();
        assert!((s - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
        assert!(matches!(
            similarity(array![0.0, 0.0].view(), array![1.0, 1.0].view()),
            Err(Error::ZeroNorm)
        ));
    }

    fn folds(n: usize) -> Vec<usize> {
        (0..n).map(|i| i % FOLDS).collect()
    }

    #[test]
    fn perfectly_separated_scores_give_100() {
        let scores: Vec<f64> = (0..40).map(|i| if i % 2 == 0 { 0.9 + i as f64 * 1e-3 } else { -0.2 }).collect();
        let labels: Vec<bool> = (0..40).map(|i| i % 2 == 0).collect();
        // folds i % 10: even and odd indices meet in every fold
        let r = tenfold_accuracy(&scores, &labels, &folds(40)).unwrap();
        assert_eq!(r.accuracy, 100.0);
    }

    #[test]
    fn constant_scores_on_balanced_folds_give_50() {
        let labels: Vec<bool> = (0..40).map(|i| (i / 10) % 2 == 0).collect();
        let r = tenfold_accuracy(&[0.3; 40], &labels, &folds(40)).unwrap();
        assert_eq!(r.accuracy, 50.0);
    }

    #[test]
    fn missing_fold_is_an_error() {
        let f: Vec<usize> = (0..20).map(|i| i % 9).collect();
        assert!(matches!(
            tenfold_accuracy(&[0.0; 20], &[true; 20], &f),
            Err(Error::MissingFold(9))
        ));
    }

    #[test]
    fn tar_examples() {
        let scores = [1.0, 1.0, 1.0, 0.0, 0.0, 0.0];
        let labels = [true, true, true, false, false, false];
        for r in tar_at_far(&scores, &labels, &[1e-3, 1e-4, 1e-5]).unwrap() {
            assert_eq!(r.tar, 1.0);
            assert_eq!(r.far, 0.0);
        }

        let mut scores: Vec<f64> = (0..10).map(|i| i as f64 / 10.0).collect();
        let mut labels = vec![false; 10];
        scores.extend([0.95, 0.5, 0.2]);
        labels.extend([true, true, true]);
        let r = &tar_at_far(&scores, &labels, &[1e-3]).unwrap()[0];
        assert!(!r.attainable);
        assert_eq!(r.far, 0.0);
        assert_eq!(r.threshold, Some(0.95));
        assert!((r.tar - 1.0 / 3.0).abs() < 1e-15);
        let r = &tar_at_far(&scores, &labels, &[0.1]).unwrap()[0];
        assert!(r.attainable);
        assert_eq!(r.threshold, Some(0.9));
        assert!((r.far - 0.1).abs() < 1e-15);
    }

    #[test]
    fn tar_when_top_score_is_impostor() {
        let r = &tar_at_far(&[0.5, 0.9], &[true, false], &[0.0]).unwrap()[0];
        assert_eq!(r.threshold, None);
        assert_eq!(r.tar, 0.0);
        assert!(matches!(tar_at_far(&[0.5], &[true], &[0.1]), Err(Error::DegenerateScores)));
    }

    #[test]
    fn roc_is_a_monotone_staircase() {
        let scores = [0.9, 0.8, 0.8, 0.1, 0.5];
        let labels = [true, false, true, false, true];
        let roc = roc_curve(&scores, &labels).unwrap();
        assert_eq!(roc.len(), 4);
        assert_eq!((roc[0].far, roc[0].tar), (0.0, 1.0 / 3.0));
        assert_eq!((roc[3].far, roc[3].tar), (1.0, 1.0));
        for w in roc.windows(2) {
            assert!(w[1].far >= w[0].far && w[1].tar >= w[0].tar);
        }
    }

    fn bias(acc: &[f64]) -> BiasReport {
        let named: Vec<(String, f64)> = acc.iter().enumerate().map(|(i, &a)| (format!("g{i}"), a)).collect();
        bias_from_accuracies(&named).unwrap()
    }

    #[test]
    fn bias_examples_from_rfw_rows() {
        let r = bias(&[75.25, 75.68, 84.75, 78.58]);
        assert_eq!((fmt2(r.average).as_str(), fmt2(r.std).as_str()), ("78.57", "4.38"));
        assert_eq!(fmt2(r.ser.unwrap()), "1.62");
        // Reference tables print 2.68; the exact ratio is 2.686.
        let r = bias(&[96.65, 96.32, 98.63, 96.68]);
        assert_eq!(fmt2(r.average), "97.07");
        assert_eq!(fmt2(r.std), "1.05");
        assert!((r.ser.unwrap() - 2.68).abs() <= 0.01);
    }

    #[test]
    fn bias_edge_cases() {
        let r = bias(&[90.0, 90.0, 90.0]);
        assert_eq!((r.std, r.ser), (0.0, Some(1.0)));
        let r = bias(&[100.0, 95.0]);
        assert!(r.ser_infinite && r.ser.is_none());
        assert_eq!(bias(&[100.0, 100.0]).ser, Some(1.0));
        assert!(matches!(bias_from_accuracies(&[("a".into(), 50.0)]), Err(Error::TooFewGroups(1))));
        assert!(matches!(
            bias_from_scores(&[("a".into(), vec![], vec![], vec![]), ("b".into(), vec![], vec![], vec![])]),
            Err(Error::EmptyGroup(_))
        ));
    }

    #[test]
    fn fmt2_rounds_ties_away() {
        assert_eq!(fmt2(78.565), "78.57");
        assert_eq!(fmt2(1.005), "1.01");
        assert_eq!(fmt2(-2.345), "-2.35");
        assert_eq!(fmt2(4.384), "4.38");
    }
}
