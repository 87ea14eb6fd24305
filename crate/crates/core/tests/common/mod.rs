//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use mimu_core::config::MimuConfig;
use mimu_core::losses::*;
use mimu_core::model::*;
use mimu_core::synthdata::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const H: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-4;

pub fn tiny_model() -> ModelSettings {
    ModelSettings {
        num_layers: 2,
        num_heads: 2,
        hidden_dim: 16,
        ffn_dim: 24,
    }
}

/// 16x16 images with a background cue only; trains in well under a second
/// per epoch.
pub fn tiny_image_data(correlation: f64) -> DatasetConfig {
    let mut cfg = DatasetConfig::default();
    cfg.image.height = 16;
    cfg.image.width = 16;
    cfg.image.object_min = 6;
    cfg.image.object_max = 8;
    cfg.num_classes = 2;
    cfg.shortcuts = vec![ShortcutSpec::new(ShortcutKind::BackgroundColor, correlation)];
    cfg.train_size = 96;
    cfg.dev_size = 48;
    cfg.ood_size = 48;
    cfg
}

pub fn tiny_config(seed: u64, epochs: usize) -> MimuConfig {
    let mut cfg = MimuConfig {
        seed,
        data: tiny_image_data(0.9),
        model: tiny_model(),
        ..MimuConfig::default()
    };
    cfg.train.epochs = epochs;
    cfg.train.batch_size = 16;
    cfg.eval.ood_every = 1;
    cfg
}

/// Cross-entropy plus linear functionals of both attention reductions, so
/// every branch of the backward pass is exercised.
fn objective(p: &TransformerParams<f64>, x: &Features, label: usize, wt: &[f64], ws: &[f64]) -> f64 {
    let c = forward_cached(p, x).unwrap();
    let cfg = &p.config;
    let stack = c.attention(cfg.num_heads, cfg.seq_len);
    let at = stack.target_vector().0;
    let as_ = stack.source_vector().0;
    -c.probs[label].ln()
        + at.iter().zip(wt).map(|(a, w)| a * w).sum::<f64>()
        + as_.iter().zip(ws).map(|(a, w)| a * w).sum::<f64>()
}

/// Worst relative error over parameter groups between the analytic
/// gradient and central differences.
pub fn model_gradient_error(p: &TransformerParams<f64>, x: &Features, label: usize) -> f64 {
    let l = p.config.seq_len;
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let wt: Vec<f64> = (0..l).map(|_| rng.gen_range(-3.0..3.0)).collect();
    let ws: Vec<f64> = (0..l).map(|_| rng.gen_range(-3.0..3.0)).collect();

    // analytic: two backward calls, one per attention reduction
    let mut grads = TransformerParams::<f64>::zeros(&p.config).unwrap();
    let cache = forward_cached(p, x).unwrap();
    let dlogits: Vec<f64> = cache
        .probs
        .iter()
        .enumerate()
        .map(|(k, &pk)| pk - (k == label) as u8 as f64)
        .collect();
    backward(p, &cache, &dlogits, AttentionGrad::AllLayers(&wt), &mut grads).unwrap();
    let zeros = vec![0.0; p.config.num_classes];
    backward(p, &cache, &zeros, AttentionGrad::LastLayer(&ws), &mut grads).unwrap();

    let analytic: Vec<Vec<f64>> = grads.named().into_iter().map(|(_, t)| t.data.clone()).collect();
    let mut probe = p.clone();
    let mut worst = 0.0f64;
    for (ti, a) in analytic.iter().enumerate() {
        let mut numeric = vec![0.0; a.len()];
        for (i, n) in numeric.iter_mut().enumerate() {
            let orig = probe.tensors_mut()[ti].data[i];
            probe.tensors_mut()[ti].data[i] = orig + H;
            let up = objective(&probe, x, label, &wt, &ws);
            probe.tensors_mut()[ti].data[i] = orig - H;
            let down = objective(&probe, x, label, &wt, &ws);
            probe.tensors_mut()[ti].data[i] = orig;
            *n = (up - down) / (2.0 * H);
        }
        let diff: f64 = a.iter().zip(&numeric).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nn: f64 = numeric.iter().map(|x| x * x).sum::<f64>().sqrt();
        worst = worst.max(diff / na.max(nn).max(1e-8));
    }
    worst
}

pub fn image_gradient_case() -> (TransformerParams<f64>, Example) {
    let mut cfg = DatasetConfig::default();
    cfg.image.height = 16;
    cfg.image.width = 16;
    cfg.image.object_min = 6;
    cfg.image.object_max = 8;
    // watermark glyphs need a larger canvas; the background cue suffices here
    cfg.shortcuts.truncate(1);
    cfg.train_size = 2;
    cfg.dev_size = 1;
    cfg.ood_size = 1;
    let b = generate(&cfg, 3).unwrap();
    let mc = TransformerConfig::for_input(&b.meta.input, 4, &tiny_model());
    (TransformerParams::<f64>::init(&mc, 5).unwrap(), b.train[1].clone())
}

pub fn text_gradient_case() -> (TransformerParams<f64>, Example) {
    let mut cfg = DatasetConfig::text(3, 0.9);
    cfg.text.seq_len = 10;
    cfg.text.vocab_size = 16;
    cfg.train_size = 2;
    cfg.dev_size = 1;
    cfg.ood_size = 1;
    let b = generate(&cfg, 3).unwrap();
    let mc = TransformerConfig::for_input(&b.meta.input, 3, &tiny_model());
    (TransformerParams::<f64>::init(&mc, 5).unwrap(), b.train[0].clone())
}

fn fd_error(f: impl Fn(&[f64]) -> f64, x: &[f64], analytic: &[f64]) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let mut up = x.to_vec();
        let mut down = x.to_vec();
        up[i] += H;
        down[i] -= H;
        let num = (f(&up) - f(&down)) / (2.0 * H);
        worst = worst.max((num - analytic[i]).abs() / num.abs().max(analytic[i].abs()).max(1e-6));
    }
    worst
}

pub fn random_simplex(rng: &mut ChaCha8Rng, k: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..k).map(|_| rng.gen_range(0.1..1.0)).collect();
    let s: f64 = raw.iter().sum();
    raw.iter().map(|v| v / s).collect()
}

/// Worst relative error of the calibration, label and distillation
/// gradients, each taken through the softmax.
pub fn loss_gradient_error(seed: u64, trials: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for trial in 0..trials {
        let k = 2 + trial % 4;
        let y = one_hot::<f64>(trial % k, k);
        let logits: Vec<f64> = (0..k).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let lambda_c = rng.gen_range(0.0..2.0);

        // calibration loss through softmax: the pre-condition (a normalized
        // prediction) holds everywhere along logit perturbations
        let f = |z: &[f64]| calibration_loss(&softmax(z), &y, lambda_c).unwrap();
        let p = softmax(&logits);
        let (_, gp) = calibration_loss_with_grad(&p, &y, lambda_c).unwrap();
        worst = worst.max(fd_error(f, &logits, &softmax_backward(&p, &gp)));

        let f = |z: &[f64]| label_loss(&softmax(z), &y).unwrap();
        let (_, gp) = label_loss_with_grad(&p, &y).unwrap();
        worst = worst.max(fd_error(f, &logits, &softmax_backward(&p, &gp)));

        // distillation on softened outputs, source fixed
        let t = rng.gen_range(0.5..4.0);
        let source: Vec<f64> = (0..k).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let ps = softened(&source, t);
        let f = |z: &[f64]| kd_loss(&softened(z, t), &ps, t).unwrap();
        let pt = softened(&logits, t);
        let (_, gp) = kd_loss_with_grad(&pt, &ps, t).unwrap();
        let g: Vec<f64> = softmax_backward(&pt, &gp).iter().map(|v| v / t).collect();
        worst = worst.max(fd_error(f, &logits, &g));
    }
    worst
}

/// Worst relative error of the alignment gradient over `cases` random
/// points away from top-M boundaries and min/max ties. Also checks that
/// masked positions receive exactly zero gradient.
pub fn alignment_gradient_error(seed: u64, cases: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let mut checked = 0;
    while checked < cases {
        let l = rng.gen_range(4..12);
        let at = random_simplex(&mut rng, l);
        let as_ = random_simplex(&mut rng, l);
        let n = rng.gen_range(0..l - 2);
        let mask = random_mask(l, n, &mut rng).unwrap();
        let m = rng.gen_range(1..=l - n);

        let kept = mask.kept();
        let norm = |v: &[f64]| {
            let r: Vec<f64> = kept.iter().map(|&p| v[p]).collect();
            let mn = r.iter().cloned().fold(f64::INFINITY, f64::min);
            let mx = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            r.iter().map(|x| (x - mn) / (mx - mn)).collect::<Vec<_>>()
        };
        let mut d: Vec<f64> = norm(&at).iter().zip(norm(&as_)).map(|(a, b)| (a - b).abs()).collect();
        d.sort_by(|a, b| b.total_cmp(a));
        if m < d.len() && d[m - 1] - d[m] < 1e-3 {
            continue;
        }
        let mut sorted: Vec<f64> = kept.iter().map(|&p| at[p]).collect();
        sorted.sort_by(f64::total_cmp);
        if sorted.windows(2).any(|w| w[1] - w[0] < 1e-3) {
            continue;
        }

        let (_, g) = attention_alignment_loss_with_grad(&at, &as_, &mask, m).unwrap();
        let f = |x: &[f64]| attention_alignment_loss(x, &as_, &mask, m).unwrap();
        worst = worst.max(fd_error(f, &at, &g));
        if mask.positions().iter().any(|&p| g[p] != 0.0) {
            return f64::INFINITY;
        }
        checked += 1;
    }
    worst
}

/// Per-position inclusion frequency of `random_mask(l, n)` over `draws`.
pub fn mask_inclusion_frequencies(l: usize, n: usize, draws: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut counts = vec![0usize; l];
    for _ in 0..draws {
        let m = random_mask(l, n, &mut rng).unwrap();
        assert_eq!(m.n(), n);
        for &p in m.positions() {
            counts[p] += 1;
        }
    }
    counts.iter().map(|&c| c as f64 / draws as f64).collect()
}
