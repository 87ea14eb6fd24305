//! Invariants of the losses, metrics and attention reductions.

mod common;

use mimu_core::losses::*;
use mimu_core::metrics::*;
use mimu_core::model::*;
use mimu_core::synthdata::*;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::*;

fn simplex(k: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.01f64..1.0, k).prop_map(|v| {
        let s: f64 = v.iter().sum();
        v.into_iter().map(|x| x / s).collect()
    })
}

fn sized_simplex() -> impl Strategy<Value = Vec<f64>> {
    (2usize..8).prop_flat_map(simplex)
}

fn probs_and_labels() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<usize>)> {
    (2usize..6, 1usize..60).prop_flat_map(|(k, n)| {
        (
            prop::collection::vec(simplex(k), n),
            prop::collection::vec(0..k, n),
        )
    })
}

/// Two vectors of length `l`, a mask and an `M` valid for them.
fn alignment_case() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<usize>, usize)> {
    (3usize..12).prop_flat_map(|l| {
        (
            simplex(l),
            simplex(l),
            prop::sample::subsequence((0..l).collect::<Vec<_>>(), 0..l - 1),
        )
            .prop_flat_map(move |(a, b, mask)| {
                let kept = l - mask.len();
                (Just(a), Just(b), Just(mask), 1..=kept)
            })
    })
}

proptest! {
    #[test]
    fn calibration_loss_is_nonnegative_and_reduces_to_cross_entropy(
        p in sized_simplex(),
        class in 0usize..8,
        lambda_c in 0.0f64..3.0,
    ) {
        let k = p.len();
        let y = one_hot::<f64>(class % k, k);
        let v = calibration_loss(&p, &y, lambda_c).unwrap();
        prop_assert!(v >= 0.0);
        prop_assert_eq!(calibration_loss(&p, &y, 0.0).unwrap(), label_loss(&p, &y).unwrap());
        let oracle = -p[class % k].ln()
            + lambda_c * p.iter().zip(&y).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        prop_assert!((v - oracle).abs() < 1e-9);
    }

    #[test]
    fn distillation_is_a_scaled_divergence(
        (pt, ps) in (2usize..8).prop_flat_map(|k| (simplex(k), simplex(k))),
        t in 0.5f64..5.0,
    ) {
        let v = kd_loss(&pt, &ps, t).unwrap();
        prop_assert!(v >= -1e-12);
        prop_assert!(kd_loss(&pt, &pt, t).unwrap().abs() < 1e-12);
        let oracle = t * t * pt.iter().zip(&ps).map(|(a, b)| a * (a / b).ln()).sum::<f64>();
        prop_assert!((v - oracle).abs() < 1e-9);
        if pt.iter().zip(&ps).any(|(a, b)| (a - b).abs() > 1e-3) {
            prop_assert!(v > 0.0);
        }
    }

    #[test]
    fn alignment_is_bounded_and_permutation_invariant(
        (at, as_, masked, m) in alignment_case(),
        perm_seed in any::<u64>(),
    ) {
        let l = at.len();
        let mask = MaskSet::new(masked.clone(), l).unwrap();
        let v = attention_alignment_loss(&at, &as_, &mask, m).unwrap();
        prop_assert!((0.0..=1.0 + 1e-12).contains(&v));
        prop_assert_eq!(attention_alignment_loss(&at, &at, &mask, m).unwrap(), 0.0);

        let mut perm: Vec<usize> = (0..l).collect();
        use rand::seq::SliceRandom;
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(perm_seed));
        // position i moves to perm[i]
        let mut pt = vec![0.0; l];
        let mut ps = vec![0.0; l];
        for i in 0..l {
            pt[perm[i]] = at[i];
            ps[perm[i]] = as_[i];
        }
        let pmask = MaskSet::new(masked.iter().map(|&i| perm[i]).collect(), l).unwrap();
        let w = attention_alignment_loss(&pt, &ps, &pmask, m).unwrap();
        prop_assert!((v - w).abs() < 1e-12);
    }

    #[test]
    fn masks_have_exact_distinct_positions(l in 2usize..40, frac in 0.0f64..1.0, seed in any::<u64>()) {
        let n = ((l - 1) as f64 * frac) as usize;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = random_mask(l, n, &mut rng).unwrap();
        let mut pos = m.positions().to_vec();
        prop_assert_eq!(pos.len(), n);
        pos.dedup();
        prop_assert_eq!(pos.len(), n);
        prop_assert!(pos.iter().all(|&p| p < l));
        prop_assert_eq!(m.kept().len(), l - n);
        prop_assert!(random_mask(l, l, &mut rng).is_err());
    }

    #[test]
    fn ece_bins_are_consistent((probs, labels) in probs_and_labels(), bins in 1usize..20) {
        let r = ece(&probs, &labels, bins).unwrap();
        prop_assert!((0.0..=1.0).contains(&r.ece));
        prop_assert_eq!(r.total(), labels.len());
        prop_assert!((ece_from_bins(&r.per_bin) - r.ece).abs() < 1e-12);
        for (i, b) in r.per_bin.iter().enumerate() {
            if b.count > 0 {
                let lo = i as f64 / bins as f64;
                let hi = (i + 1) as f64 / bins as f64;
                prop_assert!(b.mean_confidence >= lo - 1e-12 && b.mean_confidence <= hi + 1e-12);
            }
        }
        // independent recomputation from the definition
        let n = labels.len() as f64;
        let mut acc = vec![(0.0, 0.0, 0usize); bins];
        for (p, &y) in probs.iter().zip(&labels) {
            let (arg, conf) = p.iter().enumerate().fold((0, f64::MIN), |b, (i, &v)| if v > b.1 { (i, v) } else { b });
            let bin = ((conf * bins as f64) as usize).min(bins - 1);
            acc[bin].0 += conf;
            acc[bin].1 += (arg == y) as u8 as f64;
            acc[bin].2 += 1;
        }
        let oracle: f64 = acc
            .iter()
            .filter(|b| b.2 > 0)
            .map(|b| (b.1 - b.0).abs() / n)
            .sum();
        prop_assert!((oracle - r.ece).abs() < 1e-9, "{oracle} vs {}", r.ece);
    }

    #[test]
    fn ece_reports_merge_like_concatenation(
        (probs, labels) in probs_and_labels(),
        split in 0usize..60,
        bins in 1usize..20,
    ) {
        let cut = split.min(labels.len());
        prop_assume!(cut > 0 && cut < labels.len());
        let a = ece(&probs[..cut], &labels[..cut], bins).unwrap();
        let b = ece(&probs[cut..], &labels[cut..], bins).unwrap();
        let whole = ece(&probs, &labels, bins).unwrap();
        let merged = a.merge(&b).unwrap();
        prop_assert_eq!(merged.total(), whole.total());
        prop_assert!((merged.ece - whole.ece).abs() < 1e-9);
    }

    #[test]
    fn accuracy_ignores_argmax_preserving_transforms((probs, labels) in probs_and_labels()) {
        let squashed: Vec<Vec<f64>> = probs
            .iter()
            .map(|p| {
                let q: Vec<f64> = p.iter().map(|v| v.powi(3)).collect();
                let s: f64 = q.iter().sum();
                q.into_iter().map(|v| v / s).collect()
            })
            .collect();
        prop_assert_eq!(accuracy(&probs, &labels).unwrap(), accuracy(&squashed, &labels).unwrap());
    }

    #[test]
    fn attention_is_row_stochastic(seed in 0u64..1000, text in any::<bool>()) {
        let (mut p, ex) = if text { text_gradient_case() } else { image_gradient_case() };
        p = TransformerParams::init(&p.config, seed).unwrap();
        let c = forward_cached(&p, &ex.features).unwrap();
        let cfg = &p.config;
        let stack = c.attention(cfg.num_heads, cfg.seq_len);
        for row in stack.data.chunks_exact(cfg.seq_len) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-5);
            prop_assert!(row.iter().all(|&a| a >= 0.0));
        }
        for v in [stack.source_vector(), stack.target_vector()] {
            prop_assert!((v.0.iter().sum::<f64>() - 1.0).abs() < 1e-5);
        }
        // the target reduction is the plain average of the layer vectors
        let u = stack.layer_vector(0).0;
        let w = stack.layer_vector(1).0;
        for ((t, a), b) in stack.target_vector().0.iter().zip(&u).zip(&w) {
            prop_assert!((t - (a + b) / 2.0).abs() < 1e-12);
        }
        prop_assert!((c.probs.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }
}

#[test]
fn mask_inclusion_matches_n_over_l() {
    let freq = mask_inclusion_frequencies(10, 2, 10_000, 17);
    assert!(freq.iter().all(|f| (0.17..=0.23).contains(f)), "{freq:?}");
    // binomial(10^4, 0.2): sd 0.004; 3.29 sd is a two-sided 0.001 band per
    // position, i.e. 0.01 family-wise over ten positions
    assert!(freq.iter().all(|f| (f - 0.2).abs() < 3.29 * 0.004), "{freq:?}");
}

#[test]
fn single_layer_reductions_coincide() {
    let mut cfg = DatasetConfig::text(3, 0.9);
    cfg.text.seq_len = 8;
    cfg.text.vocab_size = 16;
    cfg.train_size = 1;
    cfg.dev_size = 1;
    cfg.ood_size = 1;
    let b = generate(&cfg, 1).unwrap();
    let mut settings = tiny_model();
    settings.num_layers = 1;
    let mc = TransformerConfig::for_input(&b.meta.input, 3, &settings);
    let p = TransformerParams::<f64>::init(&mc, 2).unwrap();
    let c = forward_cached(&p, &b.train[0].features).unwrap();
    let s = c.attention(mc.num_heads, mc.seq_len);
    assert_eq!(s.source_vector(), s.target_vector());
}
