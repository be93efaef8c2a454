//! Generated scenes satisfy the annotation rules, survive augmentation and
//! round-trip through the on-disk dataset.

use dvpnet::codec::Codec;
use dvpnet::dataio::{derive_vp, validate};
use dvpnet::geometry::{intersect, Point2};
use dvpnet::synth::{augment, build_dataset, scene_at, transform, SceneConfig};
use dvpnet::trainer::load_dataset;

#[test]
fn thousand_seeds_have_no_violations() {
    let codec = Codec::new(128, 7);
    for seed in 0..1000 {
        let config = SceneConfig::with_size(128, seed);
        let scene = scene_at(&config, 0).unwrap();
        let record = scene.record(format!("{seed}.png"));
        let v = validate(&record);
        assert!(v.is_empty(), "seed {seed}: {v:?}");
        assert!(codec.encode_targets(&scene.labels()).is_ok(), "seed {seed}");
        let (lo, hi) = (0.1 * 128.0, 0.9 * 128.0);
        assert!((lo..=hi).contains(&scene.vp.x) && (lo..=hi).contains(&scene.vp.y));
    }
}

#[test]
fn augmentation_keeps_vp_at_the_line_intersection() {
    let config = SceneConfig::with_size(128, 77);
    let mut checked = 0;
    for i in 0..200 {
        let scene = scene_at(&config, i).unwrap();
        let mut rng = config.rng_for(5000 + i);
        let aug = augment(&scene, &mut rng, 0.5, 10.0);
        let derived = intersect(&aug.main_lines[0].line(), &aug.main_lines[1].line()).unwrap();
        assert!(derived.distance(&aug.vp) <= 1e-6, "scene {i}");
        assert!(validate(&aug.record("a.png".into())).is_empty(), "scene {i}");
        if aug != scene {
            checked += 1;
        }
    }
    assert!(checked > 100, "only {checked} scenes changed");
}

#[test]
fn transform_moves_vp_like_the_image() {
    let scene = scene_at(&SceneConfig::with_size(128, 8), 0).unwrap();
    let flipped = transform(&scene, true, 0.0).unwrap();
    assert!((flipped.vp.x - (128.0 - scene.vp.x)).abs() < 1e-9);
    assert!((flipped.vp.y - scene.vp.y).abs() < 1e-9);
    let back = transform(&flipped, true, 0.0).unwrap();
    assert!(back.vp.distance(&scene.vp) < 1e-9);
    // a quarter turn about the center maps (x, y) to (128 − y, x) or its mirror
    if let Some(rot) = transform(&scene, false, std::f64::consts::FRAC_PI_2) {
        let c = Point2::new(64.0, 64.0);
        assert!((rot.vp.distance(&c) - scene.vp.distance(&c)).abs() < 1e-9);
    }
}

#[test]
fn dataset_round_trips_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let config = SceneConfig::with_size(96, 12);
    let m = build_dataset(&config, 10, 0.8, dir.path()).unwrap();
    assert_eq!((m.train_count, m.test_count), (8, 2));
    let train = load_dataset(&m.train_annotations).unwrap();
    let test = load_dataset(&m.test_annotations).unwrap();
    assert_eq!((train.len(), test.len()), (8, 2));
    for (i, s) in train.iter().chain(&test).enumerate() {
        let original = scene_at(&config, i as u64).unwrap();
        assert!(s.vp.distance(&original.vp) < 1e-9);
        for (a, b) in s.image.data().iter().zip(original.image.data()) {
            assert!((a - b.clamp(0.0, 1.0)).abs() <= 0.5 / 255.0 + 1e-6);
        }
        let r = s.record("x.png".into());
        assert!(derive_vp(&r).unwrap().distance(&s.vp) < 1e-6);
    }
    // same config, same bytes
    let dir2 = tempfile::tempdir().unwrap();
    build_dataset(&config, 10, 0.8, dir2.path()).unwrap();
    for rel in ["train.jsonl", "test.jsonl", "images/train/000003.png", "images/test/000009.png"] {
        assert_eq!(
            std::fs::read(dir.path().join(rel)).unwrap(),
            std::fs::read(dir2.path().join(rel)).unwrap(),
            "{rel}"
        );
    }
}

#[test]
fn corrupt_annotations_are_rejected_on_load() {
    let dir = tempfile::tempdir().unwrap();
    let m = build_dataset(&SceneConfig::with_size(96, 1), 4, 0.5, dir.path()).unwrap();
    let text = std::fs::read_to_string(&m.train_annotations).unwrap();
    let bad = text.replacen("\"vp\":[", "\"vp\":[3", 1);
    std::fs::write(&m.train_annotations, bad).unwrap();
    assert!(load_dataset(&m.train_annotations).is_err());
}
