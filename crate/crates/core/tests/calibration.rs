//! Platt scaling on constructed score sets.

use mimu_core::calibration::*;
use mimu_core::metrics::ece;
use mimu_core::model::softmax;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, WeightedIndex};

struct Fixture {
    scores: Vec<Vec<f64>>,
    labels: Vec<usize>,
}

impl Fixture {
    fn halves(&self) -> (Fixture, Fixture) {
        let mid = self.labels.len() / 2;
        (
            Fixture {
                scores: self.scores[..mid].to_vec(),
                labels: self.labels[..mid].to_vec(),
            },
            Fixture {
                scores: self.scores[mid..].to_vec(),
                labels: self.labels[mid..].to_vec(),
            },
        )
    }
}

/// Labels drawn from `softmax(z)`, so `softmax(z)` is calibrated by
/// construction; the scores handed out are `temperature * z`.
fn miscalibrated(k: usize, n: usize, temperature: f64, seed: u64) -> Fixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.5).unwrap();
    let mut scores = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let z: Vec<f64> = (0..k).map(|_| normal.sample(&mut rng)).collect();
        // keep every class present in both halves
        let y = if i < 2 * k { i % k } else { WeightedIndex::new(softmax(&z)).unwrap().sample(&mut rng) };
        scores.push(z.iter().map(|v| v * temperature).collect());
        labels.push(y);
    }
    Fixture { scores, labels }
}

fn softmax_ece(f: &Fixture) -> f64 {
    let probs: Vec<Vec<f64>> = f.scores.iter().map(|s| softmax(s)).collect();
    ece(&probs, &f.labels, 15).unwrap().ece
}

fn platt_ece(f: &Fixture, params: &PlattParams) -> f64 {
    let probs: Vec<Vec<f64>> = f.scores.iter().map(|s| apply_platt(s, params).unwrap()).collect();
    ece(&probs, &f.labels, 15).unwrap().ece
}

/// Mean one-vs-rest binary cross-entropy of the unnormalised sigmoids.
fn binary_ce(f: &Fixture, params: &PlattParams) -> f64 {
    let k = params.a.len();
    let mut total = 0.0;
    for (s, &y) in f.scores.iter().zip(&f.labels) {
        for c in 0..k {
            let p = platt_probability(s[c], params.a[c], params.b[c]).clamp(1e-12, 1.0 - 1e-12);
            total -= if y == c { p.ln() } else { (1.0 - p).ln() };
        }
    }
    total / (f.labels.len() * k) as f64
}

#[test]
fn separable_scores_fit_finite_parameters() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let k = 3;
    let make = |rng: &mut ChaCha8Rng, n: usize| {
        let labels: Vec<usize> = (0..n).map(|i| i % k).collect();
        let scores = labels
            .iter()
            .map(|&y| (0..k).map(|c| if c == y { rng.gen_range(4.0..6.0) } else { rng.gen_range(-6.0..-4.0) }).collect())
            .collect();
        Fixture { scores, labels }
    };
    let train = make(&mut rng, 90);
    let held_out = make(&mut rng, 90);
    let fit = fit_platt(&train.scores, &train.labels, &FitOptions::default(), "dev").unwrap();
    assert!(fit.a.iter().chain(&fit.b).all(|v| v.is_finite()));
    assert!(fit.a.iter().all(|&a| a < 0.0));
    let ce = binary_ce(&held_out, &fit.params());
    assert!(ce < 0.1, "held-out binary cross-entropy {ce}");
}

#[test]
fn uninformative_scores_give_prevalence() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let k = 4;
    let n = 800;
    let labels: Vec<usize> = (0..n).map(|i| i % k).collect();
    let scores: Vec<Vec<f64>> = (0..n).map(|_| (0..k).map(|_| rng.gen_range(-2.0..2.0)).collect()).collect();
    let fit = fit_platt(&scores, &labels, &FitOptions::default(), "dev").unwrap();
    let params = fit.params();
    for c in 0..k {
        assert!(fit.a[c].abs() < 0.5, "A[{c}] = {}", fit.a[c]);
    }
    for s in scores.iter().take(50) {
        for (c, p) in apply_platt(s, &params).unwrap().iter().enumerate() {
            assert!((p - 0.25).abs() < 0.1, "class {c}: {p}");
        }
    }
}

#[test]
fn fitting_is_deterministic() {
    let f = miscalibrated(3, 300, 3.0, 3);
    let a = fit_platt(&f.scores, &f.labels, &FitOptions::default(), "dev").unwrap();
    let b = fit_platt(&f.scores, &f.labels, &FitOptions::default(), "dev").unwrap();
    assert_eq!(a, b);
}

fn held_out(k: usize, temperature: f64, seed: u64) -> (f64, f64) {
    let f = miscalibrated(k, 4000, temperature, seed);
    let (fit_half, eval_half) = f.halves();
    let fit = fit_platt(&fit_half.scores, &fit_half.labels, &FitOptions::default(), "dev").unwrap();
    (softmax_ece(&eval_half), platt_ece(&eval_half, &fit.params()))
}

#[test]
fn held_out_ece_improves_on_badly_miscalibrated_scores() {
    for (seed, temperature) in [(10, 4.0), (12, 0.3), (13, 0.2)] {
        for k in [3, 5] {
            let (raw, cal) = held_out(k, temperature, seed);
            assert!(raw > 0.2, "fixture not miscalibrated enough: {raw}");
            assert!(cal < raw - 0.05, "T = {temperature}, K = {k}: {raw} -> {cal}");
        }
    }
}

/// Each sigmoid sees only its own class score, so after normalization the
/// output is underconfident whenever the other scores carry information.
/// On scores whose softmax is already calibrated this leaves a held-out
/// ECE of roughly 0.1, far above the raw softmax.
#[test]
fn one_vs_rest_normalization_has_an_ece_floor() {
    for k in [2, 3, 5] {
        let (raw, cal) = held_out(k, 1.0, 20);
        assert!(raw < 0.05, "K = {k}: raw {raw}");
        assert!(cal > 0.08, "K = {k}: calibrated {cal}");
    }
}

#[test]
fn missing_classes_are_listed() {
    let scores = vec![vec![0.0, 1.0, 2.0]; 4];
    let err = fit_platt(&scores, &[0, 0, 1, 1], &FitOptions::default(), "dev").unwrap_err();
    assert!(err.to_string().contains('2'), "{err}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn calibrated_outputs_are_distributions(
        k in 2usize..7,
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = PlattParams {
            a: (0..k).map(|_| rng.gen_range(-20.0..5.0)).collect(),
            b: (0..k).map(|_| rng.gen_range(-20.0..20.0)).collect(),
        };
        let s: Vec<f64> = (0..k).map(|_| rng.gen_range(-50.0..50.0)).collect();
        let p = apply_platt(&s, &params).unwrap();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!(p.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn negative_slope_is_monotone(
        k in 2usize..7,
        seed in any::<u64>(),
        bump in 0.01f64..3.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = PlattParams {
            a: (0..k).map(|_| rng.gen_range(-3.0..-0.1)).collect(),
            b: (0..k).map(|_| rng.gen_range(-2.0..2.0)).collect(),
        };
        let s: Vec<f64> = (0..k).map(|_| rng.gen_range(-4.0..4.0)).collect();
        let c = rng.gen_range(0..k);
        let before = apply_platt(&s, &params).unwrap();
        let mut t = s.clone();
        t[c] += bump;
        let after = apply_platt(&t, &params).unwrap();
        prop_assert!(after[c] > before[c]);
    }

    #[test]
    fn class_relabelling_permutes_the_fit(seed in 0u64..200) {
        let f = miscalibrated(3, 120, 2.0, seed);
        let perm = [2usize, 0, 1];
        let scores: Vec<Vec<f64>> = f
            .scores
            .iter()
            .map(|s| {
                let mut t = vec![0.0; 3];
                for c in 0..3 {
                    t[perm[c]] = s[c];
                }
                t
            })
            .collect();
        let labels: Vec<usize> = f.labels.iter().map(|&y| perm[y]).collect();
        let a = fit_platt(&f.scores, &f.labels, &FitOptions::default(), "dev").unwrap();
        let b = fit_platt(&scores, &labels, &FitOptions::default(), "dev").unwrap();
        for c in 0..3 {
            prop_assert_eq!(a.a[c], b.a[perm[c]]);
            prop_assert_eq!(a.b[c], b.b[perm[c]]);
        }
    }
}
