use tunegs::fixture::{toy_cameras, toy_scene, toy_style_image};
use tunegs::guidance::*;
use tunegs::loss::Perceptual;
use tunegs::style::{StyleOffsetField, StyleTuner};
use tunegs::stylizer::{build_manifest, LoadedManifest, Procedural, StyleReference};
use tunegs::{GaussianScene, RenderConfig};

fn setup() -> (GaussianScene, Vec<tunegs::Camera>, LoadedManifest, tempfile::TempDir) {
    let scene = toy_scene();
    let cams = toy_cameras();
    let dir = tempfile::tempdir().unwrap();
    let reference = StyleReference::new("toy", toy_style_image()).unwrap();
    let manifest = build_manifest(&scene, &cams, &Procedural(reference), dir.path(), 0, &RenderConfig::default()).unwrap();
    (scene, cams, manifest, dir)
}

fn config(s1: usize, s2: usize) -> TrainConfig {
    TrainConfig {
        stage1_steps: s1,
        stage2_steps: s2,
        seed: 4,
        ..TrainConfig::default()
    }
}

#[test]
fn zero_steps_change_nothing() {
    let (scene, cams, manifest, _dir) = setup();
    let mut field = StyleOffsetField::zeros("toy", scene.len());
    let mut tuner = StyleTuner::default();
    let trace = train_stage1(&scene, &cams, &manifest, &mut field, &mut tuner, &config(0, 0)).unwrap();
    assert!(trace.is_empty());
    assert!(field.is_zero());
    assert_eq!(tuner.embeddings(), StyleTuner::default().embeddings());
    assert!(!tuner.trainable[9]);
}

#[test]
fn one_step_moves_offsets_and_top_only() {
    let (scene, cams, manifest, _dir) = setup();
    let mut field = StyleOffsetField::zeros("toy", scene.len());
    let mut tuner = StyleTuner::default();
    let trace = train_stage1(&scene, &cams, &manifest, &mut field, &mut tuner, &config(1, 0)).unwrap();
    assert_eq!(trace.len(), 1);
    assert_eq!(trace[0].stage, 1);
    assert_eq!(trace[0].beta, 1.0);
    assert!(trace[0].total > 0.0);
    assert!(!field.is_zero());
    assert!(field.all_finite());
    let fresh = StyleTuner::default();
    assert_eq!(*tuner.embedding(0), [0.0f32; 14]);
    for z in 1..9 {
        assert_eq!(tuner.embedding(z), fresh.embedding(z));
    }
    // The gain gradient is proportional to the offsets, which start at zero.
    assert_eq!(tuner.embedding(9), fresh.embedding(9));
    train_stage1(&scene, &cams, &manifest, &mut field, &mut tuner, &config(1, 0)).unwrap();
    assert_ne!(tuner.embedding(9), fresh.embedding(9));
    assert_eq!(*tuner.embedding(0), [0.0f32; 14]);
}

#[test]
fn training_is_deterministic() {
    let (scene, cams, manifest, _dir) = setup();
    let cfg = config(6, 6);
    let a = fit(&scene, &cams, &manifest, StyleTuner::default(), &cfg).unwrap();
    let b = fit(&scene, &cams, &manifest, StyleTuner::default(), &cfg).unwrap();
    assert_eq!(a.0.as_slice(), b.0.as_slice());
    assert_eq!(a.1, b.1);
    assert_eq!(a.2, b.2);
    let other = fit(&scene, &cams, &manifest, StyleTuner::default(), &TrainConfig { seed: 5, ..cfg }).unwrap();
    assert_ne!(a.2, other.2);
}

#[test]
fn stage_two_freezes_offsets_and_endpoints() {
    let (scene, cams, manifest, _dir) = setup();
    let cfg = config(5, 40);
    let mut field = StyleOffsetField::zeros("toy", scene.len());
    let mut tuner = StyleTuner::default();
    train_stage1(&scene, &cams, &manifest, &mut field, &mut tuner, &cfg).unwrap();
    let digest = field.digest();
    let top = *tuner.embedding(9);
    let before = tuner.clone();
    let out = train_stage2(&scene, &cams, &manifest, &field, &mut tuner, &cfg).unwrap();
    assert_eq!(field.digest(), digest);
    assert_eq!(*tuner.embedding(9), top);
    assert_eq!(*tuner.embedding(0), [0.0f32; 14]);
    assert_eq!(out.bucket_updates[0], 0);
    assert_eq!(out.bucket_updates[9], 0);
    assert_eq!(out.bucket_updates.iter().sum::<usize>(), 40);
    for z in 1..9 {
        if out.bucket_updates[z] > 0 {
            assert_ne!(tuner.embedding(z), before.embedding(z));
        } else {
            assert_eq!(tuner.embedding(z), before.embedding(z));
        }
    }
    for row in &out.trace {
        assert_eq!(row.stage, 2);
        assert!(row.beta > 0.1 && row.beta <= 0.9);
    }
}

#[test]
fn two_levels_have_nothing_to_train() {
    let (scene, cams, manifest, _dir) = setup();
    let field = StyleOffsetField::zeros("toy", scene.len());
    let mut tuner = StyleTuner::new(0.0, 1.0, 2).unwrap();
    let before = tuner.clone();
    let out = train_stage2(&scene, &cams, &manifest, &field, &mut tuner, &config(0, 10)).unwrap();
    assert!(out.trace.is_empty());
    assert_eq!(tuner, before);
}

#[test]
fn invalid_configs_are_rejected() {
    let (scene, cams, manifest, _dir) = setup();
    let mut field = StyleOffsetField::zeros("toy", scene.len());
    let mut tuner = StyleTuner::default();
    let mut bad = config(1, 0);
    bad.views_per_step = 0;
    assert!(train_stage1(&scene, &cams, &manifest, &mut field, &mut tuner, &bad).is_err());
    let mut bad = config(1, 0);
    bad.learning_rates.color = 0.0;
    assert!(train_stage1(&scene, &cams, &manifest, &mut field, &mut tuner, &bad).is_err());
    let mut short = StyleOffsetField::zeros("toy", 3);
    assert!(train_stage1(&scene, &cams, &manifest, &mut short, &mut tuner, &config(1, 0)).is_err());
}

#[test]
fn trace_csv_layout() {
    let (scene, cams, manifest, _dir) = setup();
    let cfg = TrainConfig {
        perceptual: Perceptual::None,
        views_per_step: 2,
        ..config(2, 2)
    };
    let (_, _, trace) = fit(&scene, &cams, &manifest, StyleTuner::default(), &cfg).unwrap();
    let mut buf = Vec::new();
    write_trace_csv(&trace, &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "step,stage,beta,l1,perceptual,total");
    assert_eq!(lines.len(), 5);
    assert!(lines[1].starts_with("0,1,1"));
    assert!(lines[3].starts_with("0,2,"));
    assert!(trace.iter().all(|r| r.perceptual == 0.0 && r.total == r.l1));
}
