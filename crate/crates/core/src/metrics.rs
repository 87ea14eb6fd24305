//! Accuracy and expected calibration error.
//!
//! Confidence is the top-label probability. Bins are `B` equal-width
//! intervals `[0, 1/B), ..., [(B-1)/B, 1]`; a confidence of exactly 1 falls
//! in the top bin. Ties in `argmax` go to the lowest class index.

use std::fmt::Write;

use serde::{Deserialize, Serialize};

use crate::error::{MimuError, Result};

const ROW_TOL: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinStats {
    pub count: usize,
    pub mean_confidence: f64,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EceReport {
    pub num_bins: usize,
    pub per_bin: Vec<BinStats>,
    pub ece: f64,
}

impl EceReport {
    pub fn total(&self) -> usize {
        self.per_bin.iter().map(|b| b.count).sum()
    }

    /// Pools two reports with the same binning.
    pub fn merge(&self, other: &EceReport) -> Result<EceReport> {
        if self.num_bins != other.num_bins {
            return Err(MimuError::InvalidInput(format!(
                "cannot merge {} bins with {} bins",
                self.num_bins, other.num_bins
            )));
        }
        let per_bin: Vec<BinStats> = self
            .per_bin
            .iter()
            .zip(&other.per_bin)
            .map(|(a, b)| {
                let n = a.count + b.count;
                if n == 0 {
                    return BinStats {
                        count: 0,
                        mean_confidence: 0.0,
                        accuracy: 0.0,
                    };
                }
                let (na, nb) = (a.count as f64, b.count as f64);
                BinStats {
                    count: n,
                    mean_confidence: (na * a.mean_confidence + nb * b.mean_confidence) / n as f64,
                    accuracy: (na * a.accuracy + nb * b.accuracy) / n as f64,
                }
            })
            .collect();
        Ok(EceReport {
            num_bins: self.num_bins,
            ece: ece_from_bins(&per_bin),
            per_bin,
        })
    }

    /// `bin_center,confidence,accuracy,count` rows for reliability diagrams.
    pub fn reliability_csv(&self) -> String {
        let mut out = String::from("bin_center,confidence,accuracy,count\n");
        let width = 1.0 / self.num_bins as f64;
        for (i, b) in self.per_bin.iter().enumerate() {
            let _ = writeln!(
                out,
                "{},{},{},{}",
                (i as f64 + 0.5) * width,
                b.mean_confidence,
                b.accuracy,
                b.count
            );
        }
        out
    }
}

/// `sum_i (N_i / N) |accuracy_i - confidence_i|` over non-empty bins.
pub fn ece_from_bins(per_bin: &[BinStats]) -> f64 {
    let n: usize = per_bin.iter().map(|b| b.count).sum();
    if n == 0 {
        return 0.0;
    }
    per_bin
        .iter()
        .filter(|b| b.count > 0)
        .map(|b| b.count as f64 / n as f64 * (b.accuracy - b.mean_confidence).abs())
        .sum()
}

/// Argmax with lowest-index tie-break.
pub fn predict(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn check_rows<R: AsRef<[f64]>>(probs: &[R], labels: &[usize]) -> Result<()> {
    if probs.len() != labels.len() {
        return Err(MimuError::shape("labels", probs.len(), labels.len()));
    }
    for (i, (row, &y)) in probs.iter().zip(labels).enumerate() {
        let row = row.as_ref();
        if y >= row.len() {
            return Err(MimuError::InvalidInput(format!("label {y} outside row {i}")));
        }
        let sum: f64 = row.iter().sum();
        if row.iter().any(|v| !(v.is_finite() && *v >= 0.0)) || (sum - 1.0).abs() > ROW_TOL {
            return Err(MimuError::InvalidInput(format!("row {i} is not a distribution")));
        }
    }
    Ok(())
}

pub fn ece<R: AsRef<[f64]>>(probs: &[R], labels: &[usize], num_bins: usize) -> Result<EceReport> {
    if num_bins == 0 {
        return Err(MimuError::InvalidInput("ECE needs at least one bin".into()));
    }
    check_rows(probs, labels)?;
    let mut count = vec![0usize; num_bins];
    let mut conf = vec![0.0f64; num_bins];
    let mut hits = vec![0usize; num_bins];
    for (row, &y) in probs.iter().zip(labels) {
        let row = row.as_ref();
        let pred = predict(row);
        let c = row[pred].min(1.0);
        let bin = ((c * num_bins as f64) as usize).min(num_bins - 1);
        count[bin] += 1;
        conf[bin] += c;
        hits[bin] += (pred == y) as usize;
    }
    let per_bin: Vec<BinStats> = (0..num_bins)
        .map(|i| {
            if count[i] == 0 {
                BinStats {
                    count: 0,
                    mean_confidence: 0.0,
                    accuracy: 0.0,
                }
            } else {
                BinStats {
                    count: count[i],
                    mean_confidence: conf[i] / count[i] as f64,
                    accuracy: hits[i] as f64 / count[i] as f64,
                }
            }
        })
        .collect();
    Ok(EceReport {
        num_bins,
        ece: ece_from_bins(&per_bin),
        per_bin,
    })
}

pub fn accuracy<R: AsRef<[f64]>>(probs: &[R], labels: &[usize]) -> Result<f64> {
    if probs.len() != labels.len() {
        return Err(MimuError::shape("labels", probs.len(), labels.len()));
    }
    if probs.is_empty() {
        return Err(MimuError::InvalidInput("accuracy of an empty split".into()));
    }
    let correct = probs
        .iter()
        .zip(labels)
        .filter(|(row, &y)| predict(row.as_ref()) == y)
        .count();
    Ok(correct as f64 / probs.len() as f64)
}
