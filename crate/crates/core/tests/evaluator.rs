//! Consistency-error scoring, coverage curves, latency reports and
//! overlays.

use dvpnet::codec::Codec;
use dvpnet::eval::{
    bench_latency, center_baseline, coverage_curve, evaluate, overlay, save_overlay, scene_ce,
    scene_edges, EvalError,
};
use dvpnet::geometry::{d_rms_bruteforce, Point2};
use dvpnet::image::RgbImage;
use dvpnet::model::{DvpNet, ModelConfig};
use dvpnet::synth::{scene_at, SceneConfig};
use proptest::prelude::*;

#[test]
fn true_vp_scores_zero() {
    let config = SceneConfig::with_size(128, 40);
    for i in 0..100 {
        let s = scene_at(&config, i).unwrap();
        assert!(scene_ce(&s, s.vp).unwrap() <= 1e-6);
    }
}

#[test]
fn corner_detection_matches_angle_sweep() {
    let config = SceneConfig::with_size(128, 41);
    for i in 0..10 {
        let s = scene_at(&config, i).unwrap();
        let corner = Point2::new(0.0, 0.0);
        let edges = scene_edges(&s).unwrap();
        assert_eq!(edges[0].len(), 64);
        let sweep: f64 = edges
            .iter()
            .map(|e| d_rms_bruteforce(e, corner, 100_000).unwrap())
            .sum::<f64>()
            / 2.0;
        let expected = sweep * 100.0 / (128.0f64 * 2.0f64.sqrt());
        let ce = scene_ce(&s, corner).unwrap();
        assert!((ce - expected).abs() <= 1e-4, "{ce} vs {expected}");
        assert!(ce > 0.0);
    }
}

#[test]
fn coverage_edge_cases() {
    let c = coverage_curve(&[0.5, 1.5, 3.0], &[1.0, 2.0, 5.0]).unwrap();
    assert_eq!(c.coverage, [1.0 / 3.0, 2.0 / 3.0, 1.0]);
    assert_eq!(coverage_curve(&[0.5, 1.5], &[0.1]).unwrap().coverage, [0.0]);
    assert!(matches!(coverage_curve(&[], &[1.0]), Err(EvalError::Empty)));
    assert!(matches!(coverage_curve(&[1.0], &[1.0, 1.0]), Err(EvalError::Thresholds)));
}

proptest! {
    #[test]
    fn coverage_is_monotone_and_reaches_one(
        ces in prop::collection::vec(0.0f64..20.0, 1..60),
        mut ts in prop::collection::vec(0.0f64..25.0, 1..20),
    ) {
        ts.sort_by(f64::total_cmp);
        ts.dedup();
        let c = coverage_curve(&ces, &ts).unwrap();
        prop_assert!(c.coverage.windows(2).all(|w| w[0] <= w[1]));
        prop_assert!(c.coverage.iter().all(|v| (0.0..=1.0).contains(v)));
        let max = ces.iter().copied().fold(0.0, f64::max);
        prop_assert_eq!(coverage_curve(&ces, &[max]).unwrap().coverage, vec![1.0]);
    }
}

fn small_net() -> DvpNet<f32> {
    DvpNet::build(&ModelConfig::desk(96, 0.25, 3)).unwrap()
}

#[test]
fn evaluate_is_order_independent() {
    let net = small_net();
    let codec = Codec::for_model(net.config());
    let config = SceneConfig::with_size(96, 42);
    let scenes: Vec<_> = (0..20).map(|i| scene_at(&config, i).unwrap()).collect();
    let records = evaluate(&net, &codec, &scenes).unwrap();
    assert_eq!(records.len(), scenes.len());
    let reversed: Vec<_> = scenes.iter().rev().cloned().collect();
    let back = evaluate(&net, &codec, &reversed).unwrap();
    for (a, b) in records.iter().zip(back.iter().rev()) {
        assert_eq!(a.detection, b.detection);
        assert_eq!(a.ce, b.ce);
    }
    assert!(records.iter().all(|r| r.ce >= 0.0));
}

#[test]
fn evaluate_rejects_wrong_size() {
    let net = small_net();
    let codec = Codec::for_model(net.config());
    let s = scene_at(&SceneConfig::with_size(128, 1), 0).unwrap();
    assert!(matches!(evaluate(&net, &codec, &[s]), Err(EvalError::InputSize { .. })));
}

#[test]
fn center_baseline_matches_scene_ce() {
    let config = SceneConfig::with_size(128, 43);
    let scenes: Vec<_> = (0..5).map(|i| scene_at(&config, i).unwrap()).collect();
    let base = center_baseline(&scenes).unwrap();
    for (s, b) in scenes.iter().zip(base) {
        assert_eq!(scene_ce(s, Point2::new(64.0, 64.0)).unwrap(), b);
    }
}

#[test]
fn latency_order_statistics() {
    let net = small_net();
    let r = bench_latency(&net, 1, 10).unwrap();
    assert!(r.p5_ms <= r.median_ms && r.median_ms <= r.p95_ms);
    assert_eq!(r.fps, 1000.0 / r.median_ms);
    assert!(bench_latency(&net, 0, 10).is_err());
    assert!(bench_latency(&net, 1, 9).is_err());
}

#[test]
fn narrow_model_is_faster() {
    let narrow = DvpNet::<f32>::build(&ModelConfig::desk(128, 0.25, 7)).unwrap();
    let wide = DvpNet::<f32>::build(&ModelConfig::desk(128, 1.0, 7)).unwrap();
    let a = bench_latency(&narrow, 2, 10).unwrap();
    let b = bench_latency(&wide, 2, 10).unwrap();
    assert!(a.median_ms < b.median_ms, "{} vs {}", a.median_ms, b.median_ms);
}

#[test]
fn overlay_draws_on_a_copy() {
    let net = small_net();
    let codec = Codec::for_model(net.config());
    let s = scene_at(&SceneConfig::with_size(96, 44), 0).unwrap();
    let r = evaluate(&net, &codec, std::slice::from_ref(&s)).unwrap();
    let img = overlay(&s.image, &r[0].detection, Some(&s));
    assert_eq!((img.width(), img.height()), (96, 96));
    assert_ne!(img, s.image);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("o/overlay.png");
    save_overlay(&path, &s.image, &r[0].detection, None).unwrap();
    assert_eq!(RgbImage::load_png(&path).unwrap().width(), 96);
}
