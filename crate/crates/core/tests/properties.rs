use goat_core::align::decompose_lora_step;
use goat_core::costmodel::format_truncated;
use goat_core::moe::{
    build_goat_layer, goat_s_scales, load_fractions, route_logits, softmax, LayerConfig, Variant,
};
use goat_core::numkit::svd;
use goat_core::svdseg::{make_segments, SegmentStrategy};
use goat_core::{Matrix, Rng};
use nalgebra::DMatrix;
use proptest::prelude::*;

fn logits_and_k() -> impl Strategy<Value = (Vec<f64>, usize)> {
    prop::collection::vec(-20.0f64..20.0, 1..16).prop_flat_map(|z| {
        let e = z.len();
        (Just(z), 1..=e)
    })
}

proptest! {
    #[test]
    fn routing_weights_form_a_distribution_over_the_top_k((z, k) in logits_and_k()) {
        let r = route_logits(z.clone(), k).unwrap();
        prop_assert_eq!(r.indices.len(), k);
        prop_assert!(r.indices.windows(2).all(|w| w[0] < w[1]));
        let sum: f64 = r.weights.iter().sum();
        prop_assert!((sum - 1.0).abs() < 1e-12);
        for (i, w) in r.weights.iter().enumerate() {
            if r.is_selected(i) {
                prop_assert!(*w > 0.0);
            } else {
                prop_assert_eq!(*w, 0.0);
            }
        }
        let lowest_kept = r.indices.iter().map(|&i| z[i]).fold(f64::INFINITY, f64::min);
        for i in (0..z.len()).filter(|i| !r.is_selected(*i)) {
            prop_assert!(z[i] <= lowest_kept);
        }
    }

    #[test]
    fn routing_is_shift_invariant((z, k) in logits_and_k(), c in -50.0f64..50.0) {
        let a = route_logits(z.clone(), k).unwrap();
        let b = route_logits(z.iter().map(|v| v + c).collect(), k).unwrap();
        prop_assert_eq!(&a.indices, &b.indices);
        for (x, y) in a.weights.iter().zip(&b.weights) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_is_positive_and_normalised(z in prop::collection::vec(-700.0f64..700.0, 1..20)) {
        let p = softmax(&z);
        prop_assert!(p.iter().all(|v| *v >= 0.0 && v.is_finite()));
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn load_fractions_sum_to_the_expert_count(
        seed in any::<u64>(),
        e in 1usize..10,
        tokens in 1usize..40,
    ) {
        let mut rng = Rng::new(seed);
        let k = 1 + rng.below(e);
        let routes: Vec<_> = (0..tokens)
            .map(|_| route_logits(rng.normal_vec(e, 1.0), k).unwrap())
            .collect();
        let f = load_fractions(&routes, e, k).unwrap();
        prop_assert!((f.iter().sum::<f64>() - e as f64).abs() < 1e-9);
    }

    #[test]
    fn segments_are_disjoint_and_inside_the_spectrum(
        seed in any::<u64>(),
        m in 2usize..24,
        n in 2usize..24,
        experts in 1usize..6,
        d in 1usize..4,
        which in 0usize..4,
    ) {
        let h = m.min(n);
        prop_assume!(experts * d <= h);
        let strategy = SegmentStrategy::ALL[which];
        let segs = make_segments(m, n, experts, experts * d, strategy, &mut Rng::new(seed)).unwrap();
        prop_assert_eq!(segs.len(), experts);
        for (j, s) in segs.iter().enumerate() {
            prop_assert_eq!(s.width, d);
            prop_assert!(s.end() <= h);
            prop_assert_eq!(s.expert_index, j + 1);
            for t in &segs[j + 1..] {
                prop_assert!(!s.overlaps(t));
            }
        }
    }

    #[test]
    fn initialization_preserves_the_pretrained_weight(
        seed in any::<u64>(),
        m in 4usize..12,
        n in 4usize..12,
        which in 0usize..4,
        variant in prop::sample::select(vec![Variant::Goat, Variant::GoatS, Variant::ZeroMoE]),
        rho in 0.5f64..20.0,
    ) {
        let mut rng = Rng::new(seed);
        let w0 = rng.normal_matrix(m, n, 1.0);
        let cfg = LayerConfig {
            experts: 2,
            k: 1,
            rank: 4,
            rho,
            variant,
            strategy: SegmentStrategy::ALL[which],
            ..LayerConfig::default()
        };
        let layer = build_goat_layer(&w0, &cfg, &mut rng).unwrap();
        prop_assert!(layer.alignment_error(&w0).unwrap() <= 1e-8 * w0.frobenius_norm().max(1.0));
    }

    #[test]
    fn lora_step_splits_into_first_order_and_remainder(
        seed in any::<u64>(),
        m in 1usize..8,
        n in 1usize..8,
        r in 1usize..4,
        s in 0.1f64..5.0,
        eta in 1e-5f64..1e-1,
    ) {
        let mut rng = Rng::new(seed);
        let b = rng.normal_matrix(m, r, 1.0);
        let a = rng.normal_matrix(r, n, 1.0);
        let g = rng.normal_matrix(m, n, 1.0);
        let d = decompose_lora_step(&b, &a, &g, s, eta).unwrap();
        let scale = 1.0 + s * b.frobenius_norm() * a.frobenius_norm();
        prop_assert!(d.residual <= 1e-12 * scale, "{} vs {}", d.residual, scale);
    }

    #[test]
    fn goat_s_scales_equalise_scaled_segment_mass(
        sums in prop::collection::vec(1e-3f64..1e3, 1..12),
        s1 in 1e-2f64..1e2,
    ) {
        let scales = goat_s_scales(&sums, s1).unwrap();
        let target = s1 * s1 * sums[0];
        for (s, v) in scales.iter().zip(&sums) {
            prop_assert!((s * s * v - target).abs() <= 1e-12 * target);
        }
    }

    #[test]
    fn truncated_display_never_rounds_up(x in 0.0f64..1000.0) {
        let shown: f64 = format_truncated(x, 2).parse().unwrap();
        prop_assert!(shown <= x + 1e-9);
        prop_assert!(x - shown < 0.01 + 1e-9);
    }

    #[test]
    fn transpose_reverses_products(seed in any::<u64>(), m in 1usize..6, k in 1usize..6, n in 1usize..6) {
        let mut rng = Rng::new(seed);
        let a = rng.normal_matrix(m, k, 1.0);
        let b = rng.normal_matrix(k, n, 1.0);
        let lhs = a.matmul(&b).unwrap().transpose();
        let rhs = b.transpose().matmul(&a.transpose()).unwrap();
        prop_assert!(lhs.sub(&rhs).unwrap().max_abs() < 1e-12);
        prop_assert_eq!(Matrix::identity(m).matmul(&a).unwrap(), a);
    }

    #[test]
    fn jacobi_svd_agrees_with_nalgebra(seed in any::<u64>(), m in 1usize..10, n in 1usize..10) {
        let w = Rng::new(seed).normal_matrix(m, n, 1.0);
        let f = svd(&w).unwrap();
        let mut oracle: Vec<f64> = DMatrix::from_row_slice(m, n, w.data()).singular_values().iter().copied().collect();
        oracle.sort_by(|a, b| b.partial_cmp(a).unwrap());
        prop_assert_eq!(f.sigma.len(), m.min(n));
        for (s, o) in f.sigma.iter().zip(&oracle) {
            prop_assert!((s - o).abs() <= 1e-10 * oracle[0].max(1.0), "{} vs {}", s, o);
        }
        prop_assert!(f.reconstruct().sub(&w).unwrap().max_abs() <= 1e-10 * oracle[0].max(1.0));
        let h = m.min(n);
        let utu = f.u.transpose().matmul(&f.u).unwrap();
        let vtv = f.v.transpose().matmul(&f.v).unwrap();
        prop_assert!(utu.sub(&Matrix::identity(h)).unwrap().max_abs() < 1e-10);
        prop_assert!(vtv.sub(&Matrix::identity(h)).unwrap().max_abs() < 1e-10);
    }
}
