//! Accuracy, expected calibration error and resource accounting.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_ECE_BINS: usize = 20;

/// Fraction of exact index matches.
pub fn top1_accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::invalid(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::invalid("accuracy of an empty set"));
    }
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / predictions.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EceBin {
    /// Upper edge `k/n`; the bin covers `((k−1)/n, k/n]`.
    pub upper: f64,
    pub count: usize,
    /// Mean confidence, 0 for an empty bin.
    pub confidence: f64,
    /// Mean accuracy, 0 for an empty bin.
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EceReport {
    pub num_bins: usize,
    pub bins: Vec<EceBin>,
    pub total: usize,
    pub ece: f64,
}

/// 0-based bin of `conf` among `n` equal-width bins `((k−1)/n, k/n]`, with
/// a confidence of exactly 0 placed in the first bin.
pub fn bin_index(conf: f64, n: usize) -> usize {
    let nf = n as f64;
    let mut k = ((conf * nf).ceil() as usize).clamp(1, n);
    // Settle rounding at the edges against the same k/n boundaries.
    while k > 1 && conf <= (k - 1) as f64 / nf {
        k -= 1;
    }
    while k < n && conf > k as f64 / nf {
        k += 1;
    }
    k - 1
}

/// Expected calibration error over equal-width confidence bins.
pub fn ece(confidences: &[f64], correct: &[bool], num_bins: usize) -> Result<EceReport> {
    if confidences.is_empty() {
        return Err(Error::invalid("ECE of an empty set"));
    }
    if confidences.len() != correct.len() {
        return Err(Error::invalid("confidences and correctness flags differ in length"));
    }
    if num_bins == 0 {
        return Err(Error::invalid("ECE needs at least one bin"));
    }
    if let Some(c) = confidences.iter().find(|c| !(0.0..=1.0).contains(*c)) {
        return Err(Error::invalid(format!("confidence {c} outside [0, 1]")));
    }
    let mut count = vec![0usize; num_bins];
    let mut conf_sum = vec![0.0f64; num_bins];
    let mut hit = vec![0usize; num_bins];
    for (&c, &ok) in confidences.iter().zip(correct) {
        let b = bin_index(c, num_bins);
        count[b] += 1;
        conf_sum[b] += c;
        hit[b] += usize::from(ok);
    }
    let m = confidences.len() as f64;
    let mut total = 0.0;
    let bins = (0..num_bins)
        .map(|b| {
            let (confidence, accuracy) = if count[b] == 0 {
                (0.0, 0.0)
            } else {
                (conf_sum[b] / count[b] as f64, hit[b] as f64 / count[b] as f64)
            };
            total += count[b] as f64 / m * (accuracy - confidence).abs();
            EceBin {
                upper: (b + 1) as f64 / num_bins as f64,
                count: count[b],
                confidence,
                accuracy,
            }
        })
        .collect();
    Ok(EceReport {
        num_bins,
        bins,
        total: confidences.len(),
        ece: total,
    })
}

/// Memory and runtime figures for one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResourceReport {
    pub trainable_params: usize,
    pub total_params: usize,
    pub peak_tape_nodes: usize,
    pub wall_ms_per_episode: f64,
}

/// Median of a non-empty sample; mean of the middle pair for even sizes.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[mid] } else { (v[mid - 1] + v[mid]) / 2.0 })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accuracy_hand_values() {
        assert_eq!(top1_accuracy(&[1, 2, 3], &[1, 2, 3]).unwrap(), 1.0);
        assert_eq!(top1_accuracy(&[0, 0], &[1, 1]).unwrap(), 0.0);
        assert_eq!(top1_accuracy(&[1, 2, 3, 4], &[1, 2, 3, 0]).unwrap(), 0.75);
        assert!(top1_accuracy(&[1], &[1, 2]).is_err());
        assert!(top1_accuracy(&[], &[]).is_err());
    }

    #[test]
    fn ece_hand_values() {
        assert_eq!(ece(&[1.0, 1.0], &[true, true], 20).unwrap().ece, 0.0);
        let r = ece(&[0.9, 0.9, 0.6, 0.6], &[true, false, true, false], 20).unwrap();
        assert!((r.ece - 0.25).abs() < 1e-12);
        assert_eq!(r.bins.iter().filter(|b| b.count > 0).count(), 2);
        assert!((ece(&[0.7], &[false], 20).unwrap().ece - 0.7).abs() < 1e-12);
        assert!(ece(&[], &[], 20).is_err());
        assert!(ece(&[1.5], &[true], 20).is_err());
    }

    #[test]
    fn bins_are_right_closed() {
        assert_eq!(bin_index(0.0, 20), 0);
        assert_eq!(bin_index(0.05, 20), 0);
        assert_eq!(bin_index(0.050001, 20), 1);
        assert_eq!(bin_index(1.0, 20), 19);
        assert_eq!(bin_index(0.3, 10), 2);
    }

    #[test]
    fn median_values() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median(&[]), None);
    }
}
