mod common;

use common::*;
use rand::seq::SliceRandom;
use tunegs::fixture::{toy_cameras, toy_scene};
use tunegs::importance::*;
use tunegs::render::HitWeighting;
use tunegs::{GaussianScene, RenderConfig};

fn exact_config() -> RenderConfig {
    RenderConfig {
        transmittance_floor: 0.0,
        ..RenderConfig::default()
    }
}

#[test]
fn scores_match_oracle_weights() {
    for seed in 0..5 {
        let mut r = rng(seed);
        let scene = random_scene(&mut r, 20);
        let cams = [front_camera(24, 20, 22.0), oblique_camera(24, 20, 22.0)];
        let cfg = exact_config();
        let report = compute_importance(&scene, &cams, &cfg, HitWeighting::Blend).unwrap();
        let mut want = vec![0.0; scene.len()];
        for c in &cams {
            for (w, o) in want.iter_mut().zip(oracle_render(&scene, c, &cfg).weights) {
                *w += o;
            }
        }
        for (a, b) in report.scores.iter().zip(&want) {
            assert!((a - b).abs() <= 1e-9 * b.abs().max(1.0), "{a} vs {b}");
        }
        for w in report.ranking.windows(2) {
            let (a, b) = (report.scores[w[0]], report.scores[w[1]]);
            assert!(a > b || (a == b && w[0] < w[1]));
        }
    }
}

#[test]
fn filter_keeps_top_fraction_in_order() {
    let scores = vec![0.5, 3.0, 0.0, 3.0, 1.0, 2.0];
    let report = ImportanceReport::from_scores(scores);
    assert_eq!(report.ranking, vec![1, 3, 5, 4, 0, 2]);
    let mut r = rng(1);
    let scene = random_scene(&mut r, 6);
    let (kept, map) = filter_scene(&scene, &report, 0.5).unwrap();
    assert_eq!(kept.len(), 3);
    assert_eq!(map.old_to_new, vec![None, Some(0), None, Some(1), None, Some(2)]);
    for (old, new) in map.old_to_new.iter().enumerate() {
        if let Some(n) = new {
            assert_eq!(kept.primitives()[*n], scene.primitives()[old]);
        }
    }
    assert_eq!(filter_scene(&scene, &report, 0.01).unwrap().0.len(), 1);
    assert_eq!(filter_scene(&scene, &report, 1.0).unwrap().0, scene);
    assert!(filter_scene(&scene, &report, 0.0).is_err());
    assert!(filter_scene(&scene, &report, 1.5).is_err());
    assert!(filter_scene(&random_scene(&mut r, 5), &report, 0.5).is_err());
    assert_eq!(map.translate(&[0, 1, 5, 9]), vec![0, 2]);
    assert_eq!(IndexMap::from_json_str(&map.to_json_string()).unwrap(), map);
}

#[test]
fn filtering_the_full_scene_is_idempotent() {
    let scene = toy_scene();
    let cams = toy_cameras();
    let cfg = RenderConfig::default();
    let report = compute_importance(&scene, &cams, &cfg, HitWeighting::Blend).unwrap();
    let (once, _) = filter_scene(&scene, &report, 1.0).unwrap();
    assert_eq!(once, scene);
    let (half, _) = filter_scene(&scene, &report, 0.5).unwrap();
    let again = compute_importance(&half, &cams, &cfg, HitWeighting::Blend).unwrap();
    let (twice, map) = filter_scene(&half, &again, 1.0).unwrap();
    assert_eq!(twice, half);
    assert_eq!(map, IndexMap::identity(half.len()));
}

#[test]
fn scores_follow_primitives_under_reordering() {
    let mut r = rng(8);
    let scene = random_scene(&mut r, 16);
    let cams = [front_camera(20, 16, 18.0)];
    let cfg = exact_config();
    let base = compute_importance(&scene, &cams, &cfg, HitWeighting::RawOpacity).unwrap();
    let mut perm: Vec<usize> = (0..16).collect();
    perm.shuffle(&mut r);
    let shuffled = GaussianScene::from_primitives_unchecked(
        perm.iter().map(|&i| scene.primitives()[i].clone()).collect(),
    );
    let moved = compute_importance(&shuffled, &cams, &cfg, HitWeighting::RawOpacity).unwrap();
    for (new, &old) in perm.iter().enumerate() {
        assert!((moved.scores[new] - base.scores[old]).abs() < 1e-9);
    }
}

#[test]
fn raw_opacity_weighting_differs_from_blend() {
    let mut r = rng(9);
    let scene = random_scene(&mut r, 12);
    let cams = [front_camera(20, 16, 18.0)];
    let raw = compute_importance(&scene, &cams, &exact_config(), HitWeighting::RawOpacity).unwrap();
    let blend = compute_importance(&scene, &cams, &exact_config(), HitWeighting::Blend).unwrap();
    assert!(raw.scores.iter().all(|v| v.is_finite() && *v >= 0.0));
    assert!(raw.scores.iter().zip(&blend.scores).any(|(a, b)| a != b));
    assert!(compute_importance(&scene, &[], &exact_config(), HitWeighting::Blend).is_err());
}
