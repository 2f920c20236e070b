use proptest::prelude::*;

use caac::aar::{apply_aar, compute_lambda, AarConfig};
use caac::metrics::chair_i;
use caac::model::{image_mass, softmax_row, Decoder, Hook, HookSet, ModelConfig, TokenSequence};
use caac::relevancy::{concentration_profile, spearman};
use caac::vtc::{apply_vtc, build_calibration_vector, flattening_spread, Normalization};

fn positive_vec(n: std::ops::Range<usize>) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(1e-6f64..1.0, n)
}

fn small_decoder() -> Decoder {
    Decoder::plain(ModelConfig {
        num_layers: 2,
        num_heads: 2,
        model_dim: 8,
        image_slots: 3,
        vocab_size: 10,
        max_seq_len: 16,
        seed: 9,
    })
    .unwrap()
}

proptest! {
    #[test]
    fn softmax_is_shift_invariant(s in prop::collection::vec(-20.0f64..20.0, 1..16), c in -50.0f64..50.0) {
        let a = softmax_row(&s).unwrap();
        let shifted: Vec<f64> = s.iter().map(|x| x + c).collect();
        let b = softmax_row(&shifted).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-12);
        }
        prop_assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn calibration_flattens_any_positive_reference(v in positive_vec(1..40)) {
        for mode in [Normalization::PaperLiteral, Normalization::SumPreserving] {
            let cal = build_calibration_vector(&v, mode).unwrap();
            prop_assert!(flattening_spread(&v, &cal) < 1e-9);
            prop_assert!(cal.entries.iter().all(|x| *x > 0.0 && x.is_finite()));
        }
        let cal = build_calibration_vector(&v, Normalization::SumPreserving).unwrap();
        let prod: f64 = v.iter().zip(&cal.entries).map(|(a, b)| a * b).sum();
        let total: f64 = v.iter().sum();
        prop_assert!((prod - total).abs() <= 1e-12 * total.max(1.0));
    }

    #[test]
    fn smoothing_is_affine_in_beta(
        v in positive_vec(2..20),
        b1 in 0.0f64..=1.0,
        b2 in 0.0f64..=1.0,
    ) {
        let reference: Vec<f64> = v.iter().rev().copied().collect();
        let cal = build_calibration_vector(&reference, Normalization::SumPreserving).unwrap();
        let s1 = apply_vtc(&v, &cal, b1).unwrap();
        let s2 = apply_vtc(&v, &cal, b2).unwrap();
        for i in 0..v.len() {
            prop_assert!((s1.calibrated[i] - v[i] * cal.entries[i]).abs() < 1e-15);
            let expect = (1.0 - b1) * v[i] + b1 * s1.calibrated[i];
            prop_assert!((s1.smoothed[i] - expect).abs() < 1e-12);
            // Slope between two betas is V_u - V.
            if (b1 - b2).abs() > 1e-3 {
                let slope = (s1.smoothed[i] - s2.smoothed[i]) / (b1 - b2);
                prop_assert!((slope - (s1.calibrated[i] - v[i])).abs() < 1e-8);
            }
        }
        let zero = apply_vtc(&v, &cal, 0.0).unwrap();
        prop_assert_eq!(zero.smoothed, v);
    }

    #[test]
    fn larger_beta_never_sharpens_the_reference_peak(
        v in positive_vec(4..24),
        sink in 0usize..4,
        mass in 0.1f64..1.0,
        b1 in 0.0f64..=1.0,
        b2 in 0.0f64..=1.0,
    ) {
        let mut reference = v.clone();
        reference[sink] += 5.0;
        let row: Vec<f64> = reference.iter().map(|x| x * mass).collect();
        let (lo, hi) = if b1 <= b2 { (b1, b2) } else { (b2, b1) };
        for mode in [Normalization::PaperLiteral, Normalization::SumPreserving] {
            let cal = build_calibration_vector(&reference, mode).unwrap();
            let share = |b: f64| {
                let s = apply_vtc(&row, &cal, b).unwrap().smoothed;
                s[sink] / s.iter().sum::<f64>()
            };
            prop_assert!(share(hi) <= share(lo) + 1e-12);
        }
    }

    #[test]
    fn lambda_is_monotone_and_bounded(p1 in 0.0f64..=1.0, p2 in 0.0f64..=1.0, lmax in 1.0f64..4.0) {
        let cfg = AarConfig { lambda_max: lmax, ..AarConfig::default() };
        let (lo, hi) = if p1 <= p2 { (p1, p2) } else { (p2, p1) };
        let a = compute_lambda(lo, &cfg).unwrap();
        let b = compute_lambda(hi, &cfg).unwrap();
        prop_assert!(a >= b);
        prop_assert!(b >= cfg.lambda_min - 1e-15 && a <= cfg.lambda_max + 1e-15);
    }

    #[test]
    fn image_mass_grows_with_lambda_for_positive_scores(
        img in prop::collection::vec(0.0f64..5.0, 1..12),
        text in prop::collection::vec(-5.0f64..5.0, 1..12),
        l1 in 1.0f64..3.0,
        l2 in 1.0f64..3.0,
    ) {
        let n = img.len();
        let scores: Vec<f64> = img.iter().chain(&text).copied().collect();
        let (lo, hi) = if l1 <= l2 { (l1, l2) } else { (l2, l1) };
        let m = |l: f64| image_mass(&softmax_row(&apply_aar(&scores, n, l).unwrap()).unwrap(), n).unwrap();
        prop_assert!(m(hi) >= m(lo) - 1e-12);
    }

    #[test]
    fn pre_softmax_hooks_compose_in_order(a in 1.0f64..2.0, b in -1.0f64..1.0) {
        let dec = small_decoder();
        let seq = TokenSequence::new(&[1, 2, 3], &[4, 5]).unwrap();
        let f = move |_: usize, _: usize, r: &mut [f64]| r.iter_mut().for_each(|x| *x *= a);
        let g = move |_: usize, _: usize, r: &mut [f64]| r.iter_mut().for_each(|x| *x += b);
        let two = HookSet {
            pre_softmax: vec![Hook::from_fn(0..2, f), Hook::from_fn(0..2, g)],
            ..HookSet::default()
        };
        let composed = HookSet {
            pre_softmax: vec![Hook::from_fn(0..2, move |l, h, r: &mut [f64]| {
                f(l, h, r);
                g(l, h, r);
            })],
            ..HookSet::default()
        };
        let x = dec.forward(&seq, &two).unwrap();
        let y = dec.forward(&seq, &composed).unwrap();
        prop_assert_eq!(x.logits, y.logits);
        // Order matters: add-then-scale differs from scale-then-add when b != 0.
        if b.abs() > 1e-3 && (a - 1.0).abs() > 1e-3 {
            let swapped = HookSet {
                pre_softmax: vec![Hook::from_fn(0..2, g), Hook::from_fn(0..2, f)],
                ..HookSet::default()
            };
            let z = dec.forward(&seq, &swapped).unwrap();
            prop_assert!(z.attn.row(0, 0, 4) != x.attn.row(0, 0, 4));
        }
    }

    #[test]
    fn concentration_profile_is_a_cdf(v in prop::collection::vec(0.0f64..1.0, 1..40)) {
        prop_assume!(v.iter().sum::<f64>() > 0.0);
        let p = concentration_profile(&v).unwrap();
        prop_assert!(p.cumulative.windows(2).all(|w| w[1] >= w[0] - 1e-15));
        prop_assert!((p.cumulative.last().unwrap() - 1.0).abs() < 1e-12);
        prop_assert!(p.top_decile >= 0.1 - 1e-12 || v.len() < 10);
    }

    #[test]
    fn chair_is_a_bounded_set_function(
        mut m in prop::collection::vec(0u32..20, 0..15),
        present in prop::collection::vec(0u32..20, 1..8),
    ) {
        let c = chair_i(&m, &present);
        prop_assert!((0.0..=1.0).contains(&c));
        m.reverse();
        prop_assert_eq!(c, chair_i(&m, &present));
        let mut doubled = m.clone();
        doubled.extend(m.iter().copied());
        prop_assert_eq!(c, chair_i(&doubled, &present));
    }

    #[test]
    fn spearman_ignores_monotone_transforms(x in prop::collection::vec(-10.0f64..10.0, 3..30)) {
        let y: Vec<f64> = x.iter().map(|v| v.exp()).collect();
        let r = spearman(&x, &y);
        let distinct = {
            let mut s = x.clone();
            s.sort_by(|a, b| a.total_cmp(b));
            s.dedup();
            s.len()
        };
        if distinct > 1 {
            prop_assert!((r - 1.0).abs() < 1e-12);
        }
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&spearman(&x, &neg)));
    }
}

#[test]
fn vtc_hook_keeps_rows_stochastic() {
    let dec = small_decoder();
    let seq = TokenSequence::new(&[1, 2, 3], &[4, 5]).unwrap();
    let hooks = HookSet {
        post_softmax: vec![Hook::from_fn(0..2, |_, _, r: &mut [f64]| {
            r[0] *= 3.0;
            r[1] *= 0.2;
        })],
        ..HookSet::default()
    };
    let out = dec.forward(&seq, &hooks).unwrap();
    out.attn.check_invariants(1e-12).unwrap();
}
