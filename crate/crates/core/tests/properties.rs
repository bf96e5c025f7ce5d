use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use c2g_core::data::{apply_augmentation, distinct_colours, hflip, AugmentationPolicy, ImageSample};
use c2g_core::losses::{
    linear_log_penalty, loss_substrate, loss_vgg, negative_diff, positive_diff, LossReport, LossWeights,
};
use c2g_core::models::{sample_target, TargetVector};
use c2g_core::tensor::WnLayout;
use c2g_core::Tape;

fn target_and_probs() -> impl Strategy<Value = (Vec<bool>, Vec<f64>)> {
    (1usize..9).prop_flat_map(|n| (prop::collection::vec(any::<bool>(), n), prop::collection::vec(0.0f64..=1.0, n)))
}

proptest! {
    #[test]
    fn positive_plus_negative_is_gap((bits, v) in target_and_probs()) {
        let n = bits.len();
        let t = TargetVector::new(bits.clone());
        let mut tape = Tape::<f64>::new();
        let vv = tape.constant(&[1, n], v.clone()).unwrap();
        let p = positive_diff(&mut tape, vv, &t).unwrap();
        let q = negative_diff(&mut tape, vv, &t).unwrap();
        for i in 0..n {
            let ti = if bits[i] { 1.0 } else { 0.0 };
            prop_assert!((tape.value(p)[i] + tape.value(q)[i] - (ti - v[i]).abs()).abs() < 1e-12);
            // Each entry sits on exactly one side.
            prop_assert!(tape.value(p)[i] == 0.0 || tape.value(q)[i] == 0.0);
        }
    }

    #[test]
    fn penalty_is_non_negative_and_increasing(a in 0.0f64..0.99, b in 0.0f64..0.99) {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(&[2, 1], vec![a, b]).unwrap();
        let l = linear_log_penalty(&mut tape, x).unwrap();
        let (la, lb) = (tape.value(l)[0], tape.value(l)[1]);
        prop_assert!(la >= 0.0 && lb >= 0.0);
        if a < b {
            prop_assert!(la <= lb);
        }
    }

    #[test]
    fn substrate_loss_bounds_mean_gap(
        pairs in prop::collection::vec((-1.0f64..=1.0, -1.0f64..=1.0), 1..40)
    ) {
        let (s, g): (Vec<f64>, Vec<f64>) = pairs.iter().copied().unzip();
        let n = s.len();
        let mut tape = Tape::<f64>::new();
        let sv = tape.constant(&[n], s.clone()).unwrap();
        let gv = tape.constant(&[n], g.clone()).unwrap();
        let l = loss_substrate(&mut tape, sv, gv).unwrap();
        let gap = s.iter().zip(&g).map(|(a, b)| (a - b).abs()).sum::<f64>() / n as f64;
        prop_assert!(tape.scalar(l) >= gap - 1e-12);
    }

    #[test]
    fn vgg_is_invariant_to_crop_order(seed in any::<u64>(), k in 1usize..5) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 4;
        let t = TargetVector::from_indices(n, &[1]).unwrap();
        let cr: Vec<f64> = (0..2 * n).map(|_| rng.random()).collect();
        let crops: Vec<Vec<f64>> = (0..k).map(|_| (0..2 * n).map(|_| rng.random()).collect()).collect();
        let eval = |order: &[usize]| {
            let mut tape = Tape::<f64>::new();
            let c = tape.constant(&[2, n], cr.clone()).unwrap();
            let cs: Vec<_> = order.iter().map(|&i| tape.constant(&[2, n], crops[i].clone()).unwrap()).collect();
            let terms = loss_vgg(&mut tape, c, &cs, &t).unwrap();
            (tape.scalar(terms.l_p), tape.scalar(terms.l_n), tape.scalar(terms.l_vgg))
        };
        let fwd: Vec<usize> = (0..k).collect();
        let rev: Vec<usize> = (0..k).rev().collect();
        let (a, b) = (eval(&fwd), eval(&rev));
        prop_assert_eq!(a, b);
        prop_assert!((a.2 - (a.0 + a.1)).abs() < 1e-12);
    }

    #[test]
    fn weight_norm_rows_have_norm_g(
        v in prop::collection::vec(0.1f64..2.0, 12),
        g in prop::collection::vec(0.1f64..3.0, 3),
        scale in 0.1f64..10.0,
    ) {
        let eff = |v: Vec<f64>| {
            let mut tape = Tape::<f64>::new();
            let vv = tape.constant(&[3, 4], v).unwrap();
            let gv = tape.constant(&[3], g.clone()).unwrap();
            let w = tape.weight_norm(vv, gv, WnLayout::OutMajor).unwrap();
            tape.value(w).to_vec()
        };
        let w = eff(v.clone());
        for (row, gi) in w.chunks(4).zip(&g) {
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            prop_assert!((norm - gi).abs() < 1e-9);
        }
        // Invariant to rescaling the direction.
        let w2 = eff(v.iter().map(|x| x * scale).collect());
        for (a, b) in w.iter().zip(&w2) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn report_total_is_weighted_sum(c in prop::collection::vec(0.0f64..10.0, 6)) {
        let w = LossWeights::default();
        let r = LossReport::from_components(c[0], c[1], c[2], c[3], c[4], c[5], &w);
        prop_assert_eq!(r.l_vgg, r.l_p + r.l_n);
        let expect = w.w_cgan * r.l_cgan_g + w.w_mask * r.l_mask + w.w_vgg * r.l_vgg + w.w_sub * r.l_sub;
        prop_assert!((r.total - expect).abs() <= 1e-9 * expect.max(1.0));
        let (_, back) = LossReport::parse_csv_line(&r.csv_line(3)).unwrap();
        prop_assert_eq!(back, r);
    }

    #[test]
    fn sampled_targets_respect_limits(seed in any::<u64>(), n in 1usize..9, p_null in 0.0f64..0.9) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let max_mixed = 1 + (seed as usize % n);
        let t = sample_target(n, p_null, max_mixed, &mut rng).unwrap();
        prop_assert_eq!(t.len(), n);
        prop_assert!(t.popcount() <= max_mixed);
    }

    #[test]
    fn augmentation_never_adds_colours(seed in any::<u64>(), w in 1usize..10, h in 1usize..10) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let palette: Vec<[u8; 3]> = (0..3).map(|_| rng.random()).collect();
        let rgb: Vec<u8> = (0..w * h).flat_map(|_| palette[rng.random_range(0..3)]).collect();
        let img = ImageSample::from_rgb_bytes(w, h, &rgb, Some(1)).unwrap();
        let out = apply_augmentation(&img, &AugmentationPolicy::default(), &mut rng);
        prop_assert!(distinct_colours(&out) <= distinct_colours(&img));
        prop_assert_eq!(out.label, Some(1));
        prop_assert_eq!(out.pixels.shape(), img.pixels.shape());
        prop_assert_eq!(hflip(&hflip(&img)), img);
    }
}
