//! Hand-derived values checked against the library.

use goat_core::align::equivalent_gradient;
use goat_core::costmodel::{param_count, Backbone, MethodQuery};
use goat_core::moe::{
    balance_loss, build_goat_layer, route_logits, theoretical_scale, GoatLayer, LayerConfig,
    LayerMeta, Router, Variant,
};
use goat_core::svdseg::{ExpertPair, ExpertSource, SegmentStrategy};
use goat_core::{Matrix, Rng};

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

fn query(s: &str) -> MethodQuery {
    s.parse().unwrap()
}

#[test]
fn vit_full_tuning_total() {
    // Frame (C+1)·P²·H + 3H + P·H + H² = 3,145,728 + 2,304 + 24,576 + 589,824
    // = 3,762,432; encoder 12·(12·768² + 2·768) = 84,953,088.
    let spec = Backbone::VitBase.spec();
    let r = param_count(&spec, query("full-ft")).unwrap();
    assert_eq!(r.total_params, 88_715_520.0);
    assert_eq!(r.trainable_params, r.total_params);
}

#[test]
fn vit_mixture_of_lora_trainable_count() {
    // (18·H·r + 9·H·e)·L with H=768, r=8, e=8, L=12.
    let spec = Backbone::VitBase.spec();
    let r = param_count(&spec, query("molora")).unwrap();
    assert_eq!(r.trainable_params, 1_990_656.0);
    assert_eq!(r.display_proportion(), "2.24");
}

#[test]
fn scaling_rule_value() {
    // √(3·64·1e-3 / 2) = √0.096
    let s = theoretical_scale(64, 1e-3, 2.0).unwrap();
    assert!(close(s, 0.309_838_667_696_593_35, 1e-15));
}

#[test]
fn top_two_of_three_with_log_three_gap() {
    let r = route_logits(vec![0.0, 3f64.ln(), -1.0], 2).unwrap();
    assert_eq!(r.indices, vec![0, 1]);
    assert!(close(r.weights[0], 0.25, 1e-15));
    assert!(close(r.weights[1], 0.75, 1e-15));
    assert_eq!(r.weights[2], 0.0);
}

#[test]
fn balance_loss_of_collapsed_routing() {
    // Both tokens pick expert 1: f = (0, 2), P = (1/4, 3/4), L = 3/2.
    let z = vec![0.0, 3f64.ln()];
    let routes = vec![route_logits(z.clone(), 1).unwrap(); 2];
    let loss = balance_loss(&routes, &[z.clone(), z], 2, 1).unwrap();
    assert!(close(loss, 1.5, 1e-15));
}

#[test]
fn dense_two_expert_forward() {
    // W = I, experts e₁e₁ᵀ and e₂e₂ᵀ, s = 2, x = (1, 1), logits (0, ln 3):
    // y = x + 2·(¼·e₁ + ¾·e₂) = (1.5, 2.5).
    let e1 = ExpertPair::new(
        Matrix::from_rows(&[vec![1.0], vec![0.0]]).unwrap(),
        Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap(),
        ExpertSource::ZeroInit,
    )
    .unwrap();
    let e2 = ExpertPair::new(
        Matrix::from_rows(&[vec![0.0], vec![1.0]]).unwrap(),
        Matrix::from_rows(&[vec![0.0, 1.0]]).unwrap(),
        ExpertSource::ZeroInit,
    )
    .unwrap();
    let router = Router::new(
        Matrix::from_rows(&[vec![0.0, 0.0], vec![3f64.ln(), 0.0]]).unwrap(),
        2,
    )
    .unwrap();
    let meta = LayerMeta {
        variant: Variant::ZeroMoE,
        strategy: None,
        rank: 2,
        seed: 0,
        segments: vec![],
    };
    let layer = GoatLayer::new(
        Matrix::identity(2),
        vec![e1, e2],
        router,
        vec![2.0, 2.0],
        1.0,
        0.0,
        meta,
    )
    .unwrap();
    let (y, _) = layer.forward(&[1.0, 1.0]).unwrap();
    assert!(close(y[0], 1.5, 1e-15) && close(y[1], 2.5, 1e-15), "{y:?}");
}

#[test]
fn equivalent_gradient_by_hand() {
    // b = e₁, a = e₂ᵀ, g = [[1,2],[3,4]]: bbᵀg = [[1,2],[0,0]],
    // g·aᵀa = [[0,2],[0,4]]; s = 2 multiplies the sum by 4.
    let b = Matrix::from_rows(&[vec![1.0], vec![0.0]]).unwrap();
    let a = Matrix::from_rows(&[vec![0.0, 1.0]]).unwrap();
    let g = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
    let eg = equivalent_gradient(&b, &a, &g, 2.0).unwrap();
    assert_eq!(
        eg,
        Matrix::from_rows(&[vec![4.0, 16.0], vec![0.0, 16.0]]).unwrap()
    );
}

#[test]
fn residual_base_weight_of_a_diagonal_matrix() {
    // W₀ = diag(4, 1), E = 2, d = 1, ρ = 2: the segments sum to W₀, each
    // expert carries segment/ρ, so w_base = W₀·(1 − 1/(E·ρ)) = diag(3, 0.75).
    // The scale is √(3·n·η/d) = √6.
    let w0 = Matrix::diag(&[4.0, 1.0]);
    let cfg = LayerConfig {
        experts: 2,
        k: 1,
        rank: 2,
        rho: 2.0,
        strategy: SegmentStrategy::Ours,
        ..LayerConfig::default()
    };
    let layer = build_goat_layer(&w0, &cfg, &mut Rng::new(0)).unwrap();
    let expected = Matrix::diag(&[3.0, 0.75]);
    assert!(
        layer.w_base.sub(&expected).unwrap().max_abs() < 1e-12,
        "{:?}",
        layer.w_base
    );
    assert!(layer.scales.iter().all(|s| close(*s, 6f64.sqrt(), 1e-15)));
}
