//! Per-class logistic (Platt) calibration of classifier scores.
//!
//! For class `k` with score `f_k`, `p_k = 1 / (1 + exp(A_k f_k + B_k))`.
//! Each class is fitted one-vs-rest by damped Newton iterations on the
//! binary cross-entropy with a small L2 penalty on `(A_k, B_k)`, which keeps
//! the minimiser finite on separable scores. Calibrated outputs are the
//! per-class probabilities renormalised to sum to one.

use serde::{Deserialize, Serialize};

use crate::error::{MimuError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlattParams {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub l2: f64,
    pub max_iter: usize,
    pub grad_tol: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            l2: 1e-4,
            max_iter: 100,
            grad_tol: 1e-8,
        }
    }
}

/// Fitted parameters plus per-class diagnostics; serialised next to the
/// target checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlattFit {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub fit_split: String,
    pub iterations: Vec<usize>,
    pub final_loss: Vec<f64>,
}

impl PlattFit {
    pub fn params(&self) -> PlattParams {
        PlattParams {
            a: self.a.clone(),
            b: self.b.clone(),
        }
    }
}

#[inline]
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Probability of the positive class under `(a, b)`.
#[inline]
pub fn platt_probability(score: f64, a: f64, b: f64) -> f64 {
    sigmoid(-(a * score + b))
}

struct Binary<'a> {
    scores: &'a [f64],
    targets: &'a [bool],
    l2: f64,
}

impl Binary<'_> {
    fn objective(&self, a: f64, b: f64) -> f64 {
        let n = self.scores.len() as f64;
        let data: f64 = self
            .scores
            .iter()
            .zip(self.targets)
            .map(|(&f, &y)| {
                let t = a * f + b;
                if y {
                    softplus(t)
                } else {
                    softplus(-t)
                }
            })
            .sum();
        data / n + self.l2 * (a * a + b * b)
    }

    /// Gradient and Hessian at `(a, b)`.
    fn derivatives(&self, a: f64, b: f64) -> ([f64; 2], [[f64; 2]; 2]) {
        let n = self.scores.len() as f64;
        let mut g = [0.0; 2];
        let mut h = [[0.0; 2]; 2];
        for (&f, &y) in self.scores.iter().zip(self.targets) {
            let p = platt_probability(f, a, b);
            let r = y as u8 as f64 - p;
            let w = p * (1.0 - p);
            g[0] += r * f;
            g[1] += r;
            h[0][0] += w * f * f;
            h[0][1] += w * f;
            h[1][1] += w;
        }
        let two_l2 = 2.0 * self.l2;
        g = [g[0] / n + two_l2 * a, g[1] / n + two_l2 * b];
        h[0][0] = h[0][0] / n + two_l2;
        h[0][1] /= n;
        h[1][1] = h[1][1] / n + two_l2;
        h[1][0] = h[0][1];
        (g, h)
    }

    fn fit(&self, opts: &FitOptions) -> (f64, f64, usize, f64) {
        let (mut a, mut b) = (0.0, 0.0);
        let mut obj = self.objective(a, b);
        let mut iters = 0;
        while iters < opts.max_iter {
            let (g, h) = self.derivatives(a, b);
            if g[0].hypot(g[1]) < opts.grad_tol {
                break;
            }
            iters += 1;
            let det = h[0][0] * h[1][1] - h[0][1] * h[1][0];
            let (da, db) = if det > 0.0 && det.is_finite() {
                (
                    -(h[1][1] * g[0] - h[0][1] * g[1]) / det,
                    -(h[0][0] * g[1] - h[1][0] * g[0]) / det,
                )
            } else {
                (-g[0], -g[1])
            };
            let slope = g[0] * da + g[1] * db;
            let mut step = 1.0;
            loop {
                let (na, nb) = (a + step * da, b + step * db);
                let nobj = self.objective(na, nb);
                if nobj <= obj + 1e-4 * step * slope {
                    a = na;
                    b = nb;
                    obj = nobj;
                    break;
                }
                step *= 0.5;
                if step < 1e-12 {
                    return (a, b, iters, obj);
                }
            }
        }
        (a, b, iters, obj)
    }
}

/// Fits one logistic model per class on `scores` (examples x K).
pub fn fit_platt(
    scores: &[Vec<f64>],
    labels: &[usize],
    opts: &FitOptions,
    fit_split: &str,
) -> Result<PlattFit> {
    if scores.len() != labels.len() {
        return Err(MimuError::shape("labels", scores.len(), labels.len()));
    }
    let k = scores.first().map(|r| r.len()).unwrap_or(0);
    if k < 2 {
        return Err(MimuError::InvalidInput("need at least two classes of scores".into()));
    }
    for row in scores {
        if row.len() != k {
            return Err(MimuError::shape("score row", k, row.len()));
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(MimuError::NonFinite("calibration scores".into()));
        }
    }
    let mut counts = vec![0usize; k];
    for &y in labels {
        if y >= k {
            return Err(MimuError::InvalidInput(format!("label {y} outside {k} classes")));
        }
        counts[y] += 1;
    }
    let missing: Vec<usize> = (0..k).filter(|&c| counts[c] < 2).collect();
    if !missing.is_empty() {
        return Err(MimuError::MissingClasses(missing));
    }

    let mut fit = PlattFit {
        a: Vec::with_capacity(k),
        b: Vec::with_capacity(k),
        fit_split: fit_split.to_string(),
        iterations: Vec::with_capacity(k),
        final_loss: Vec::with_capacity(k),
    };
    for class in 0..k {
        let column: Vec<f64> = scores.iter().map(|r| r[class]).collect();
        let targets: Vec<bool> = labels.iter().map(|&y| y == class).collect();
        let problem = Binary {
            scores: &column,
            targets: &targets,
            l2: opts.l2,
        };
        let (a, b, iters, loss) = problem.fit(opts);
        fit.a.push(a);
        fit.b.push(b);
        fit.iterations.push(iters);
        fit.final_loss.push(loss);
    }
    Ok(fit)
}

/// Calibrated distribution for one score vector.
pub fn apply_platt(scores: &[f64], params: &PlattParams) -> Result<Vec<f64>> {
    let k = scores.len();
    if params.a.len() != k || params.b.len() != k {
        return Err(MimuError::shape("Platt parameters", k, params.a.len()));
    }
    if scores.iter().chain(&params.a).chain(&params.b).any(|v| !v.is_finite()) {
        return Err(MimuError::NonFinite("Platt input".into()));
    }
    let raw: Vec<f64> = (0..k)
        .map(|c| platt_probability(scores[c], params.a[c], params.b[c]))
        .collect();
    let total: f64 = raw.iter().sum();
    if total > 0.0 {
        return Ok(raw.iter().map(|p| p / total).collect());
    }
    // every sigmoid underflowed: renormalise in log space
    let logs: Vec<f64> = (0..k)
        .map(|c| -softplus(params.a[c] * scores[c] + params.b[c]))
        .collect();
    Ok(crate::model::softmax(&logs))
}
