//! Training objectives and their gradients.
//!
//! * self-calibration: `lambda_c * sum_k (p_k - y_k)^2 - sum_k y_k log p_k`
//! * distillation: `T^2 * KL(P_t || P_s)` on temperature-softened outputs
//! * label: cross-entropy
//! * attention alignment: mean of the `M` largest absolute differences
//!   between min-max normalised attention vectors on unmasked positions
//! * total: `lab + lambda_1 * kd + lambda_2 * att`
//!
//! Every log term clamps its probability at [`PROB_EPS`]. Below the clamp
//! the loss is flat, so its gradient there is zero.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MimuError, Result};
use crate::real::Real;

pub const PROB_EPS: f64 = 1e-12;
const SUM_TOL: f64 = 1e-6;

/// Positions excluded from attention alignment. Sorted, distinct.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskSet {
    positions: Vec<usize>,
    seq_len: usize,
}

impl MaskSet {
    pub fn new(mut positions: Vec<usize>, seq_len: usize) -> Result<Self> {
        positions.sort_unstable();
        let n = positions.len();
        positions.dedup();
        if positions.len() != n {
            return Err(MimuError::InvalidInput("mask positions must be distinct".into()));
        }
        if positions.last().is_some_and(|&p| p >= seq_len) {
            return Err(MimuError::InvalidInput(format!(
                "mask position outside sequence of length {seq_len}"
            )));
        }
        if n >= seq_len {
            return Err(MimuError::InvalidInput(format!(
                "mask of {n} positions leaves nothing of a length-{seq_len} sequence"
            )));
        }
        Ok(MaskSet { positions, seq_len })
    }

    pub fn empty(seq_len: usize) -> Self {
        MaskSet {
            positions: Vec::new(),
            seq_len,
        }
    }

    pub fn positions(&self) -> &[usize] {
        &self.positions
    }

    /// Cardinality `N`.
    pub fn n(&self) -> usize {
        self.positions.len()
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn contains(&self, p: usize) -> bool {
        self.positions.binary_search(&p).is_ok()
    }

    /// Unmasked positions in increasing order.
    pub fn kept(&self) -> Vec<usize> {
        (0..self.seq_len).filter(|&p| !self.contains(p)).collect()
    }

    /// Adds `p` to the mask (e.g. the class token when it is excluded).
    pub fn with_position(&self, p: usize) -> Result<Self> {
        let mut pos = self.positions.clone();
        if !self.contains(p) {
            pos.push(p);
        }
        MaskSet::new(pos, self.seq_len)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_c: f64,
    pub lambda_1: f64,
    pub lambda_2: f64,
    pub temperature: f64,
    /// Number of largest differences averaged by the alignment loss.
    pub top_m: usize,
}

impl LossWeights {
    pub fn validate(&self, seq_len: usize, masked: usize) -> Result<()> {
        for (key, v) in [
            ("loss.lambda_c", self.lambda_c),
            ("loss.lambda_1", self.lambda_1),
            ("loss.lambda_2", self.lambda_2),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(MimuError::config(key, format!("{v} must be a finite value >= 0")));
            }
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(MimuError::config("loss.temperature", "must be > 0"));
        }
        if self.top_m == 0 || self.top_m + masked > seq_len {
            return Err(MimuError::config(
                "loss.top_m_fraction",
                format!(
                    "M = {} must lie in [1, l - N] = [1, {}]",
                    self.top_m,
                    seq_len.saturating_sub(masked)
                ),
            ));
        }
        Ok(())
    }
}

fn check_distribution<F: Real>(p: &[F], what: &str) -> Result<()> {
    let mut sum = 0.0;
    for &v in p {
        let v = v.as_f64();
        if !v.is_finite() || v < 0.0 {
            return Err(MimuError::InvalidInput(format!("{what} has entry {v}")));
        }
        sum += v;
    }
    // f32 rows carry a few ulps of rounding per entry
    let tol = SUM_TOL.max(16.0 * p.len() as f64 * F::epsilon().as_f64());
    if (sum - 1.0).abs() > tol {
        return Err(MimuError::InvalidInput(format!("{what} sums to {sum}, not 1")));
    }
    Ok(())
}

fn check_one_hot<F: Real>(y: &[F], k: usize) -> Result<()> {
    if y.len() != k {
        return Err(MimuError::shape("target", k, y.len()));
    }
    let ones = y.iter().filter(|&&v| v == F::one()).count();
    let zeros = y.iter().filter(|&&v| v == F::zero()).count();
    if ones != 1 || zeros != k - 1 {
        return Err(MimuError::InvalidInput("target must be one-hot".into()));
    }
    Ok(())
}

pub fn one_hot<F: Real>(class: usize, k: usize) -> Vec<F> {
    let mut v = vec![F::zero(); k];
    v[class] = F::one();
    v
}

/// Self-calibration loss and its gradient w.r.t. `pred`.
pub fn calibration_loss_with_grad<F: Real>(
    pred: &[F],
    target: &[F],
    lambda_c: f64,
) -> Result<(F, Vec<F>)> {
    check_distribution(pred, "prediction")?;
    check_one_hot(target, pred.len())?;
    let eps = F::c(PROB_EPS);
    let lc = F::c(lambda_c);
    let two = F::c(2.0);
    let mut loss = F::zero();
    let mut grad = vec![F::zero(); pred.len()];
    for (k, (&p, &y)) in pred.iter().zip(target).enumerate() {
        let diff = p - y;
        loss += lc * diff * diff;
        grad[k] = lc * two * diff;
        if y > F::zero() {
            loss -= y * p.max(eps).ln();
            if p >= eps {
                grad[k] -= y / p;
            }
        }
    }
    Ok((loss, grad))
}

pub fn calibration_loss<F: Real>(pred: &[F], target: &[F], lambda_c: f64) -> Result<F> {
    calibration_loss_with_grad(pred, target, lambda_c).map(|(l, _)| l)
}

/// Cross-entropy `-sum_k y_k log p_k` and its gradient w.r.t. `pred`.
pub fn label_loss_with_grad<F: Real>(pred: &[F], target: &[F]) -> Result<(F, Vec<F>)> {
    calibration_loss_with_grad(pred, target, 0.0)
}

pub fn label_loss<F: Real>(pred: &[F], target: &[F]) -> Result<F> {
    calibration_loss(pred, target, 0.0)
}

/// `T^2 * KL(P_t || P_s)` and its gradient w.r.t. `P_t`. The source side is
/// treated as a constant.
pub fn kd_loss_with_grad<F: Real>(
    target_probs: &[F],
    source_probs: &[F],
    temperature: f64,
) -> Result<(F, Vec<F>)> {
    if target_probs.len() != source_probs.len() {
        return Err(MimuError::shape("source probabilities", target_probs.len(), source_probs.len()));
    }
    if !(temperature > 0.0) {
        return Err(MimuError::InvalidInput("temperature must be > 0".into()));
    }
    for &v in target_probs.iter().chain(source_probs) {
        if !(v > F::zero()) || !v.is_finite() {
            return Err(MimuError::InvalidInput(format!(
                "distillation needs strictly positive probabilities, got {v}"
            )));
        }
    }
    let t2 = F::c(temperature * temperature);
    let mut kl = F::zero();
    let mut grad = Vec::with_capacity(target_probs.len());
    for (&pt, &ps) in target_probs.iter().zip(source_probs) {
        let log_ratio = pt.ln() - ps.ln();
        kl += pt * log_ratio;
        grad.push(t2 * (log_ratio + F::one()));
    }
    // KL is non-negative; clip rounding noise at equality
    Ok((t2 * kl.max(F::zero()), grad))
}

pub fn kd_loss<F: Real>(target_probs: &[F], source_probs: &[F], temperature: f64) -> Result<F> {
    kd_loss_with_grad(target_probs, source_probs, temperature).map(|(l, _)| l)
}

/// `T^2 * KL(P_s || P_t)`, the teacher-first direction, and its gradient
/// w.r.t. `P_t`.
pub fn kd_loss_reverse_with_grad<F: Real>(
    target_probs: &[F],
    source_probs: &[F],
    temperature: f64,
) -> Result<(F, Vec<F>)> {
    // validation is shared with the forward direction
    kd_loss_with_grad(target_probs, source_probs, temperature)?;
    let t2 = F::c(temperature * temperature);
    let mut kl = F::zero();
    let mut grad = Vec::with_capacity(target_probs.len());
    for (&pt, &ps) in target_probs.iter().zip(source_probs) {
        kl += ps * (ps.ln() - pt.ln());
        grad.push(-t2 * ps / pt);
    }
    Ok((t2 * kl.max(F::zero()), grad))
}

/// `softmax(logits / T)`.
pub fn softened<F: Real>(logits: &[F], temperature: f64) -> Vec<F> {
    let inv = F::c(1.0 / temperature);
    let scaled: Vec<F> = logits.iter().map(|&z| z * inv).collect();
    crate::model::softmax(&scaled)
}

/// Pulls a gradient on `p = softmax(z)` back to `z`.
pub fn softmax_backward<F: Real>(probs: &[F], dprobs: &[F]) -> Vec<F> {
    let dot: F = probs.iter().zip(dprobs).map(|(&p, &g)| p * g).sum();
    probs
        .iter()
        .zip(dprobs)
        .map(|(&p, &g)| p * (g - dot))
        .collect()
}

/// Uniform sample of `n` distinct positions out of `seq_len`.
pub fn random_mask<R: Rng + ?Sized>(seq_len: usize, n: usize, rng: &mut R) -> Result<MaskSet> {
    if n >= seq_len {
        return Err(MimuError::InvalidInput(format!(
            "cannot mask {n} of {seq_len} positions (need N < l)"
        )));
    }
    let positions = rand::seq::index::sample(rng, seq_len, n).into_vec();
    MaskSet::new(positions, seq_len)
}

struct MinMax {
    normalized: Vec<f64>,
    argmin: usize,
    argmax: usize,
    range: f64,
}

/// Min-max normalisation; a constant vector maps to zeros.
fn min_max(v: &[f64]) -> MinMax {
    let mut argmin = 0;
    let mut argmax = 0;
    for (i, &x) in v.iter().enumerate() {
        if x < v[argmin] {
            argmin = i;
        }
        if x > v[argmax] {
            argmax = i;
        }
    }
    let range = v[argmax] - v[argmin];
    let normalized = if range > 0.0 {
        v.iter().map(|&x| (x - v[argmin]) / range).collect()
    } else {
        vec![0.0; v.len()]
    };
    MinMax {
        normalized,
        argmin,
        argmax,
        range,
    }
}

/// Alignment loss and its gradient w.r.t. `a_t` (length `l`, zero on masked
/// positions). `a_s` is a constant. The top-`M` selection and the min/max
/// positions are held fixed when differentiating.
pub fn attention_alignment_loss_with_grad<F: Real>(
    a_t: &[F],
    a_s: &[F],
    mask: &MaskSet,
    top_m: usize,
) -> Result<(F, Vec<F>)> {
    let l = a_t.len();
    if a_s.len() != l {
        return Err(MimuError::shape("source attention vector", l, a_s.len()));
    }
    if mask.seq_len() != l {
        return Err(MimuError::shape("mask length", l, mask.seq_len()));
    }
    let kept = mask.kept();
    if top_m == 0 || top_m > kept.len() {
        return Err(MimuError::InvalidInput(format!(
            "M = {top_m} must lie in [1, {}]",
            kept.len()
        )));
    }
    let rt: Vec<f64> = kept.iter().map(|&p| a_t[p].as_f64()).collect();
    let rs: Vec<f64> = kept.iter().map(|&p| a_s[p].as_f64()).collect();
    if rt.iter().chain(&rs).any(|v| !v.is_finite()) {
        return Err(MimuError::NonFinite("attention vector".into()));
    }
    let nt = min_max(&rt);
    let ns = min_max(&rs);
    let diffs: Vec<f64> = nt
        .normalized
        .iter()
        .zip(&ns.normalized)
        .map(|(a, b)| a - b)
        .collect();

    let mut order: Vec<usize> = (0..diffs.len()).collect();
    // stable: equal differences keep the lower position first
    order.sort_by(|&i, &j| diffs[j].abs().total_cmp(&diffs[i].abs()));
    let selected = &order[..top_m];
    let loss = selected.iter().map(|&i| diffs[i].abs()).sum::<f64>() / top_m as f64;

    let mut grad = vec![F::zero(); l];
    if nt.range > 0.0 {
        let mut coef = vec![0.0; diffs.len()];
        for &i in selected {
            coef[i] = diffs[i].signum() * (diffs[i] != 0.0) as u8 as f64 / top_m as f64;
        }
        let sum_c: f64 = coef.iter().sum();
        let sum_cn: f64 = coef.iter().zip(&nt.normalized).map(|(c, n)| c * n).sum();
        let mut g = vec![0.0; diffs.len()];
        for (gi, ci) in g.iter_mut().zip(&coef) {
            *gi = ci / nt.range;
        }
        g[nt.argmin] += (sum_cn - sum_c) / nt.range;
        g[nt.argmax] -= sum_cn / nt.range;
        for (r, &p) in kept.iter().enumerate() {
            grad[p] = F::c(g[r]);
        }
    }
    Ok((F::c(loss), grad))
}

pub fn attention_alignment_loss<F: Real>(
    a_t: &[F],
    a_s: &[F],
    mask: &MaskSet,
    top_m: usize,
) -> Result<F> {
    attention_alignment_loss_with_grad(a_t, a_s, mask, top_m).map(|(l, _)| l)
}

/// `lab + lambda_1 * kd + lambda_2 * att`.
pub fn total_target_loss(lab: f64, kd: f64, att: f64, w: &LossWeights) -> Result<f64> {
    for (name, v) in [("label", lab), ("distillation", kd), ("alignment", att)] {
        if !v.is_finite() {
            return Err(MimuError::NonFinite(format!("{name} loss")));
        }
    }
    Ok(lab + w.lambda_1 * kd + w.lambda_2 * att)
}

/// Mask size `N` and top-`M` count for a sequence of length `l`.
pub fn mask_and_top_m(seq_len: usize, mask_fraction: f64, top_m_fraction: f64) -> (usize, usize) {
    let n = ((mask_fraction * seq_len as f64).round() as usize).min(seq_len - 1);
    let remaining = seq_len - n;
    let m = ((top_m_fraction * remaining as f64).round() as usize).clamp(1, remaining);
    (n, m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn calibration_loss_examples() {
        let y = [1.0f64, 0.0];
        let v = calibration_loss(&[0.5, 0.5], &y, 1.0).unwrap();
        assert!((v - (0.5 + 2f64.ln())).abs() < 1e-12);
        assert_eq!(calibration_loss(&[1.0, 0.0], &y, 1.0).unwrap(), 0.0);
        let p = [0.2, 0.8];
        assert_eq!(
            calibration_loss(&p, &y, 0.0).unwrap(),
            label_loss(&p, &y).unwrap()
        );
    }

    #[test]
    fn calibration_loss_clamps_zero_probability() {
        let v = calibration_loss(&[0.0f64, 1.0], &[1.0, 0.0], 0.0).unwrap();
        assert!((v + PROB_EPS.ln()).abs() < 1e-9);
    }

    #[test]
    fn calibration_loss_rejects_unnormalized() {
        assert!(calibration_loss(&[0.5f64, 0.6], &[1.0, 0.0], 1.0).is_err());
        assert!(calibration_loss(&[0.5f64, 0.5], &[0.5, 0.5], 1.0).is_err());
    }

    #[test]
    fn kd_examples() {
        let v = kd_loss(&[0.5f64, 0.5], &[0.75, 0.25], 2.0).unwrap();
        let want = 4.0 * (0.5 * (0.5f64 / 0.75).ln() + 0.5 * (0.5f64 / 0.25).ln());
        assert!((v - want).abs() < 1e-12);
        assert_eq!(kd_loss(&[0.3f64, 0.7], &[0.3, 0.7], 3.0).unwrap(), 0.0);
        assert!(kd_loss(&[0.0f64, 1.0], &[0.5, 0.5], 1.0).is_err());
    }

    #[test]
    fn label_loss_uniform() {
        let v = label_loss(&[1.0 / 3.0f64; 3], &[0.0, 1.0, 0.0]).unwrap();
        assert!((v - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn mask_basics() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(random_mask(10, 0, &mut rng).unwrap().n(), 0);
        let a = random_mask(10, 2, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = random_mask(10, 2, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.n(), 2);
        assert!(random_mask(10, 10, &mut rng).is_err());
    }

    #[test]
    fn alignment_hand_example() {
        let mask = MaskSet::empty(4);
        let v = attention_alignment_loss(&[0.1f64, 0.2, 0.3, 0.4], &[0.4, 0.3, 0.2, 0.1], &mask, 2)
            .unwrap();
        assert!((v - 1.0).abs() < 1e-12);
    }

    #[test]
    fn alignment_degenerate_vector_normalizes_to_zero() {
        let mask = MaskSet::empty(3);
        let v = attention_alignment_loss(&[1.0f64 / 3.0; 3], &[0.2, 0.3, 0.5], &mask, 1).unwrap();
        assert!((v - 1.0).abs() < 1e-12);
    }

    #[test]
    fn total_loss_examples() {
        let w = LossWeights {
            lambda_c: 1.0,
            lambda_1: 0.5,
            lambda_2: 0.1,
            temperature: 2.0,
            top_m: 1,
        };
        assert!((total_target_loss(1.0, 2.0, 3.0, &w).unwrap() - 2.3).abs() < 1e-12);
        assert!(total_target_loss(f64::NAN, 0.0, 0.0, &w).is_err());
    }

    #[test]
    fn mask_and_m_defaults() {
        assert_eq!(mask_and_top_m(17, 0.1, 0.5), (2, 8));
        assert_eq!(mask_and_top_m(32, 0.2, 0.5), (6, 13));
        assert_eq!(mask_and_top_m(17, 0.0, 0.5), (0, 9));
    }
}
