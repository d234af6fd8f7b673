//! Accuracy, predictive entropy, PAvPU and total variation.

use alloc::vec::Vec;

use crate::error::{contract, Error, Result};
use crate::graph::{spmm, SparseMatrix};
use crate::tensor::Tensor;

/// Tolerance on `Σ p = 1` for a row to count as a distribution.
pub const SIMPLEX_TOL: f64 = 1e-9;

pub fn accuracy(predictions: &[usize], labels: &[usize], idx: &[usize]) -> Result<f64> {
    if idx.is_empty() {
        return Err(contract!("accuracy over an empty index set"));
    }
    let mut correct = 0usize;
    for &i in idx {
        if i >= predictions.len() || i >= labels.len() {
            return Err(contract!("index {i} out of range"));
        }
        correct += usize::from(predictions[i] == labels[i]);
    }
    Ok(correct as f64 / idx.len() as f64)
}

/// `-Σ_c p log p` per row, with `0 log 0 = 0`.
pub fn predictive_entropy(probs: &Tensor) -> Result<Vec<f64>> {
    (0..probs.rows())
        .map(|r| {
            let row = probs.row(r);
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > SIMPLEX_TOL || row.iter().any(|&p| !(p >= -SIMPLEX_TOL)) {
                return Err(contract!("row {r} is not a distribution (sum {sum})"));
            }
            Ok(-row.iter().filter(|&&p| p > 0.0).map(|&p| p * libm::log(p)).sum::<f64>())
        })
        .collect()
}

/// Which maximum the threshold fractions scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EntropyScale {
    /// Largest entropy among the evaluated nodes.
    #[default]
    ObservedMax,
    /// `ln C`.
    LogClasses(usize),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PavpuPoint {
    pub frac: f64,
    pub threshold: f64,
    pub pavpu: f64,
    /// `n_ac / (n_ac + n_ic)`; NaN when nothing is certain.
    pub p_acc_given_cert: f64,
    /// `n_ic / (n_ic + n_iu)`; NaN when nothing is inaccurate.
    pub p_cert_given_inacc: f64,
}

/// A node is certain iff its entropy is at most `frac · max`.
pub fn pavpu_report(correct: &[bool], entropy: &[f64], fracs: &[f64], scale: EntropyScale) -> Result<Vec<PavpuPoint>> {
    if correct.is_empty() || correct.len() != entropy.len() {
        return Err(contract!("pavpu needs equal, non-empty inputs"));
    }
    if fracs.iter().any(|f| !(0.0..=1.0).contains(f)) {
        return Err(contract!("threshold fractions must lie in [0, 1]"));
    }
    if entropy.iter().any(|e| !e.is_finite()) {
        return Err(Error::NonFinite("entropy"));
    }
    let max = match scale {
        EntropyScale::ObservedMax => entropy.iter().cloned().fold(0.0, f64::max),
        EntropyScale::LogClasses(c) => libm::log(c as f64),
    };
    let n = correct.len() as f64;
    Ok(fracs
        .iter()
        .map(|&frac| {
            let threshold = frac * max;
            let (mut ac, mut ic, mut iu) = (0usize, 0usize, 0usize);
            for (&ok, &h) in correct.iter().zip(entropy) {
                match (ok, h <= threshold) {
                    (true, true) => ac += 1,
                    (true, false) => {}
                    (false, true) => ic += 1,
                    (false, false) => iu += 1,
                }
            }
            let ratio = |a: usize, b: usize| if a + b == 0 { f64::NAN } else { a as f64 / (a + b) as f64 };
            PavpuPoint {
                frac,
                threshold,
                pavpu: (ac + iu) as f64 / n,
                p_acc_given_cert: ratio(ac, ic),
                p_cert_given_inacc: ratio(ic, iu),
            }
        })
        .collect())
}

/// `(n_ac + n_iu) / N` per threshold fraction, thresholds relative to the
/// largest observed entropy.
pub fn pavpu(correct: &[bool], entropy: &[f64], fracs: &[f64]) -> Result<Vec<f64>> {
    Ok(pavpu_report(correct, entropy, fracs, EntropyScale::ObservedMax)?.into_iter().map(|p| p.pavpu).collect())
}

/// Per-node uncertainty summary.
#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintyReport {
    pub nodes: Vec<usize>,
    pub entropy: Vec<f64>,
    pub correct: Vec<bool>,
    pub points: Vec<PavpuPoint>,
}

/// Entropy, correctness and PAvPU over `idx` from mean predictive rows.
pub fn uncertainty_report(
    mean_probs: &Tensor,
    labels: &[usize],
    idx: &[usize],
    fracs: &[f64],
    scale: EntropyScale,
) -> Result<UncertaintyReport> {
    let all = predictive_entropy(mean_probs)?;
    let pred = mean_probs.argmax_rows();
    let entropy: Vec<f64> = idx.iter().map(|&i| all[i]).collect();
    let correct: Vec<bool> = idx.iter().map(|&i| pred[i] == labels[i]).collect();
    let points = pavpu_report(&correct, &entropy, fracs, scale)?;
    Ok(UncertaintyReport { nodes: idx.to_vec(), entropy, correct, points })
}

/// `‖H − A·H / λ‖²_F`, divided by `‖H‖²_F` when `normalized` (0 for `H = 0`).
pub fn total_variation(h: &Tensor, a: &SparseMatrix, lam: f64, normalized: bool) -> Result<f64> {
    if !(lam > 0.0) {
        return Err(contract!("total variation needs λ > 0, got {lam}"));
    }
    let ah = spmm(a, h)?;
    let inv = 1.0 / lam;
    let tv: f64 = h.data().iter().zip(ah.data()).map(|(x, y)| (x - inv * y) * (x - inv * y)).sum();
    if !normalized {
        return Ok(tv);
    }
    let norm = h.frobenius_sq();
    Ok(if norm == 0.0 { 0.0 } else { tv / norm })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::build_adjacency;

    #[test]
    fn accuracy_counts() {
        assert_eq!(accuracy(&[0, 1, 2, 0], &[0, 1, 2, 1], &[0, 1, 2, 3]).unwrap(), 0.75);
        assert_eq!(accuracy(&[1], &[1], &[0]).unwrap(), 1.0);
        assert!(accuracy(&[1], &[1], &[]).is_err());
    }

    #[test]
    fn entropy_values() {
        let t = Tensor::from_rows(&[&[1.0, 0.0, 0.0], &[0.5, 0.5, 0.0]]).unwrap();
        let h = predictive_entropy(&t).unwrap();
        assert_eq!(h[0], 0.0);
        assert!((h[1] - libm::log(2.0)).abs() < 1e-15);
        let u = Tensor::full(1, 7, 1.0 / 7.0);
        assert!((predictive_entropy(&u).unwrap()[0] - 1.945_910_149_055_313_3).abs() < 1e-12);
        assert!(predictive_entropy(&Tensor::from_rows(&[&[0.6, 0.6]]).unwrap()).is_err());
    }

    #[test]
    fn pavpu_counting_case() {
        let correct = [true, true, false, false];
        let entropy = [0.1, 0.9, 0.2, 1.0];
        assert_eq!(pavpu(&correct, &entropy, &[0.5]).unwrap(), [0.5]);
        assert_eq!(pavpu(&correct, &entropy, &[1.0]).unwrap(), [0.5]);
        assert_eq!(pavpu(&[true; 3], &[0.0; 3], &[0.5]).unwrap(), [1.0]);
        assert!(pavpu(&[], &[], &[0.5]).is_err());
    }

    #[test]
    fn tv_path_example() {
        let a = build_adjacency(&[(0, 1), (1, 2)], 3, true).unwrap();
        let x = Tensor::from_vec(3, 1, alloc::vec![1.0, 0.0, -1.0]).unwrap();
        assert!((total_variation(&x, &a, libm::sqrt(2.0), false).unwrap() - 2.0).abs() < 1e-15);
        assert_eq!(total_variation(&Tensor::zeros(3, 2), &a, 1.0, true).unwrap(), 0.0);
        assert!(total_variation(&x, &a, 0.0, false).is_err());
    }
}
