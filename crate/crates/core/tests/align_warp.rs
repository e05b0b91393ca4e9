mod common;

use common::*;
use rand::Rng;
use tunegs::align::*;
use tunegs::fixture::{plane_cameras, plane_scene, toy_cameras, toy_scene, toy_style_image, PLANE_DEPTH};
use tunegs::metrics::pair_rmse;
use tunegs::render::render_depth;
use tunegs::stylizer::*;
use tunegs::{Camera, Image, RenderConfig};

/// Two-channel map holding each cell's own pixel coordinates.
fn coordinates(cam: &Camera) -> FeatureMap {
    FeatureMap::from_image(&Image::from_fn(cam.width as usize, cam.height as usize, 2, |x, y, c| {
        if c == 0 {
            x as f64
        } else {
            y as f64
        }
    }))
}

#[test]
fn planar_disparity_matches_analytic() {
    let scene = plane_scene();
    let cams = plane_cameras(5);
    let cfg = RenderConfig::default();
    let d0 = render_depth(&scene, &cams[0], &cfg);
    for j in 1..5 {
        let baseline = (cams[0].translation.x - cams[j].translation.x).abs();
        let expected = cams[0].fx * baseline / PLANE_DEPTH;
        let w = warp_feature(&coordinates(&cams[0]), &d0, &cams[0], &cams[j], None, 0.0).unwrap();
        let mut checked = 0;
        for v in 0..64 {
            for u in 0..64 {
                let cell = v * 64 + u;
                if !w.warped.valid[cell] {
                    continue;
                }
                let src = w.warped.cell(cell);
                let disparity = src[0] - u as f64;
                assert!((disparity - expected).abs() <= 0.5, "view {j} at ({u},{v}): {disparity} vs {expected}");
                assert_eq!(src[1], v as f64);
                checked += 1;
            }
        }
        assert!(checked > 64 * (64 - expected as usize) * 9 / 10);
    }
}

#[test]
fn round_trip_returns_home() {
    let scene = plane_scene();
    let cams = plane_cameras(3);
    let cfg = RenderConfig::default();
    let (a, b) = (&cams[0], &cams[2]);
    let da = render_depth(&scene, a, &cfg);
    let db = render_depth(&scene, b, &cfg);
    let ab = warp_feature(&coordinates(a), &da, a, b, None, 0.0).unwrap();
    let back = warp_feature(&ab.warped, &db, b, a, None, 0.0).unwrap();
    let mut valid = 0;
    let mut home = 0;
    for v in 0..64 {
        for u in 0..64 {
            let cell = v * 64 + u;
            if !back.warped.valid[cell] {
                continue;
            }
            valid += 1;
            let p = back.warped.cell(cell);
            if (p[0] - u as f64).abs() <= 0.5 && (p[1] - v as f64).abs() <= 0.5 {
                home += 1;
            }
        }
    }
    assert!(valid > 2000);
    assert!(home as f64 >= 0.95 * valid as f64, "{home}/{valid}");
}

fn random_map(r: &mut impl Rng, w: usize, h: usize, dim: usize, invalid: f64) -> FeatureMap {
    let mut m = FeatureMap::new(w, h, dim);
    for i in 0..w * h {
        if r.gen_bool(invalid) {
            continue;
        }
        m.valid[i] = true;
        for d in 0..dim {
            m.data[i * dim + d] = r.gen_range(-1.5..1.5);
        }
    }
    m
}

fn as_warp(m: FeatureMap) -> WarpResult {
    let coverage = m.coverage();
    let depth = vec![1.0; m.cells()];
    WarpResult {
        warped: m,
        coverage,
        depth,
    }
}

/// Softmax without max subtraction over an explicitly concatenated key list.
fn brute_attention(q: &FeatureMap, k: &FeatureMap, v: &FeatureMap, kw: &FeatureMap, vw: &FeatureMap) -> FeatureMap {
    let mut keys = Vec::new();
    let mut values = Vec::new();
    for (km, vm) in [(kw, vw), (k, v)] {
        for i in 0..km.cells() {
            if km.valid[i] && vm.valid[i] {
                keys.push(km.cell(i).to_vec());
                values.push(vm.cell(i).to_vec());
            }
        }
    }
    let d = q.dim as f64;
    let mut out = FeatureMap::new(q.width, q.height, q.dim);
    for i in 0..q.cells() {
        if !q.valid[i] {
            continue;
        }
        out.valid[i] = true;
        let e: Vec<f64> = keys
            .iter()
            .map(|key| (key.iter().zip(q.cell(i)).map(|(a, b)| a * b).sum::<f64>() / d.sqrt()).exp())
            .collect();
        let z: f64 = e.iter().sum();
        for (ek, val) in e.iter().zip(&values) {
            for c in 0..q.dim {
                out.data[i * q.dim + c] += ek / z * val[c];
            }
        }
    }
    out
}

#[test]
fn attention_matches_brute_force() {
    for seed in 0..10 {
        let mut r = rng(seed);
        let q = random_map(&mut r, 4, 4, 8, 0.2);
        let k = random_map(&mut r, 4, 4, 8, 0.2);
        let mut v = random_map(&mut r, 4, 4, 8, 0.0);
        v.valid = k.valid.clone();
        let kw = random_map(&mut r, 4, 4, 8, 0.4);
        let mut vw = random_map(&mut r, 4, 4, 8, 0.0);
        vw.valid = kw.valid.clone();
        let want = brute_attention(&q, &k, &v, &kw, &vw);
        let got = mutual_attention(&q, &k, &v, &as_warp(kw.clone()), &as_warp(vw.clone())).unwrap();
        assert_eq!(got.valid, want.valid);
        for (a, b) in got.data.iter().zip(&want.data) {
            assert!((a - b).abs() < 1e-5);
        }
        let weights = mutual_attention_weights(&q, &k, &v, &as_warp(kw), &as_warp(vw)).unwrap();
        assert_eq!(weights.len(), q.valid.iter().filter(|&&x| x).count());
        for row in &weights {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&w| w >= 0.0));
        }
    }
}

#[test]
fn duplicated_keys_do_not_change_output() {
    let mut r = rng(31);
    let q = random_map(&mut r, 4, 4, 8, 0.0);
    let k = random_map(&mut r, 4, 4, 8, 0.0);
    let v = random_map(&mut r, 4, 4, 8, 0.0);
    let empty = as_warp(FeatureMap::new(4, 4, 8));
    let alone = mutual_attention(&q, &k, &v, &empty, &empty).unwrap();
    let doubled = mutual_attention(&q, &k, &v, &as_warp(k.clone()), &as_warp(v.clone())).unwrap();
    for (a, b) in alone.data.iter().zip(&doubled.data) {
        assert!((a - b).abs() < 1e-6);
    }
}

#[test]
fn output_is_convex_combination_and_equivariant() {
    let mut r = rng(32);
    let q = random_map(&mut r, 4, 4, 8, 0.0);
    let k = random_map(&mut r, 4, 4, 8, 0.0);
    let v = random_map(&mut r, 4, 4, 8, 0.0);
    let kw = as_warp(random_map(&mut r, 4, 4, 8, 0.0));
    let vw = as_warp(random_map(&mut r, 4, 4, 8, 0.0));
    let out = mutual_attention(&q, &k, &v, &kw, &vw).unwrap();
    for c in 0..8 {
        let vals = (0..16).flat_map(|i| [v.cell(i)[c], vw.warped.cell(i)[c]]);
        let (lo, hi) = vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), x| (l.min(x), h.max(x)));
        for i in 0..16 {
            let o = out.cell(i)[c];
            assert!(o >= lo - 1e-12 && o <= hi + 1e-12);
        }
    }

    // Reversing the query cells reverses the output rows.
    let mut qr = q.clone();
    for i in 0..16 {
        qr.data[i * 8..(i + 1) * 8].copy_from_slice(q.cell(15 - i));
    }
    let outr = mutual_attention(&qr, &k, &v, &kw, &vw).unwrap();
    for i in 0..16 {
        for (a, b) in outr.cell(i).iter().zip(out.cell(15 - i)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    // Reordering the keys together with their values changes nothing.
    let perm: Vec<usize> = (0..16).map(|i| (i * 7 + 3) % 16).collect();
    let shuffle = |m: &FeatureMap| {
        let mut s = m.clone();
        for (dst, &src) in perm.iter().enumerate() {
            s.data[dst * 8..(dst + 1) * 8].copy_from_slice(m.cell(src));
        }
        s
    };
    let outk = mutual_attention(&q, &shuffle(&k), &shuffle(&v), &kw, &vw).unwrap();
    for (a, b) in outk.data.iter().zip(&out.data) {
        assert!((a - b).abs() < 1e-9);
    }
}

#[test]
fn mismatched_shapes_are_rejected() {
    let mut r = rng(33);
    let q = random_map(&mut r, 4, 4, 8, 0.0);
    let k = random_map(&mut r, 4, 4, 4, 0.0);
    let w = as_warp(random_map(&mut r, 4, 4, 8, 0.0));
    assert!(mutual_attention(&q, &k, &k, &w, &w).is_err());
    let cams = plane_cameras(2);
    let small = FeatureMap::new(8, 8, 3);
    let depth = Image::filled(64, 64, 1, 5.0);
    assert!(warp_feature(&small, &depth, &cams[0], &cams[1], None, 0.0).is_err());
}

fn toy_targets(dir: &std::path::Path) -> LoadedManifest {
    let reference = StyleReference::new("toy", toy_style_image()).unwrap();
    build_manifest(&toy_scene(), &toy_cameras(), &Procedural(reference), dir, 2, &RenderConfig::default()).unwrap()
}

#[test]
fn anchor_and_zero_blend_leave_images_alone() {
    let src = tempfile::tempdir().unwrap();
    let loaded = toy_targets(src.path());
    let scene = toy_scene();
    let cams = toy_cameras();

    let out = tempfile::tempdir().unwrap();
    let aligned = align_manifest(&loaded, &scene, &cams, &AlignConfig::default(), out.path()).unwrap();
    let a = loaded.anchor();
    assert_eq!(aligned.images[a], loaded.images[a]);
    assert_eq!(aligned.manifest.alignment, Alignment::ContentCalibrated);
    assert!((0..cams.len()).any(|i| aligned.images[i] != loaded.images[i]));
    let reread = load_manifest(out.path().join(MANIFEST_FILE), &cams).unwrap();
    assert_eq!(reread.images, aligned.images);
    assert!(align_manifest(&aligned, &scene, &cams, &AlignConfig::default(), out.path()).is_err());

    let zero = AlignConfig {
        lambda: 0.0,
        ..AlignConfig::default()
    };
    let out0 = tempfile::tempdir().unwrap();
    let same = align_manifest(&loaded, &scene, &cams, &zero, out0.path()).unwrap();
    assert_eq!(same.images, loaded.images);
}

/// Two plane views stylized with different references, the first one
/// anchoring.
fn inconsistent_plane(dir: &std::path::Path) -> (LoadedManifest, Vec<Camera>) {
    let scene = plane_scene();
    let all = plane_cameras(3);
    let cams = vec![all[0].clone(), all[2].clone()];
    let cfg = RenderConfig::default();
    let warm = StyleReference::new("warm", Image::from_fn(16, 16, 3, |x, _, c| [0.8, 0.45, 0.2][c] + 0.01 * x as f64)).unwrap();
    let cool = StyleReference::new("cool", Image::from_fn(16, 16, 3, |_, y, c| [0.2, 0.4, 0.75][c] + 0.01 * y as f64)).unwrap();
    let images = [&warm, &cool]
        .iter()
        .zip(&cams)
        .map(|(s, c)| {
            let img = procedural_stylize(&tunegs::render::render_color(&scene, c, &cfg), s).unwrap();
            Image::decode_png(&img.encode_png().unwrap()).unwrap()
        })
        .collect();
    let manifest = StyleTargetManifest {
        style_id: "mixed".into(),
        alignment: Alignment::None,
        entries: cams
            .iter()
            .enumerate()
            .map(|(i, c)| ManifestEntry {
                view_id: c.view_id.clone(),
                path: format!("{}.png", c.view_id),
                anchor: i == 0,
            })
            .collect(),
    };
    let loaded = LoadedManifest {
        manifest,
        dir: dir.to_path_buf(),
        images,
    };
    loaded.save(dir).unwrap();
    (loaded, cams)
}

#[test]
fn alignment_reduces_cross_view_error() {
    let dir = tempfile::tempdir().unwrap();
    let (loaded, cams) = inconsistent_plane(dir.path());
    let scene = plane_scene();
    let cfg = RenderConfig::default();
    let d0 = render_depth(&scene, &cams[0], &cfg);
    let d1 = render_depth(&scene, &cams[1], &cfg);
    let measure = |m: &LoadedManifest| {
        pair_rmse(&m.images[0], &d0, &cams[0], &m.images[1], Some(&d1), &cams[1], 0.05)
            .unwrap()
            .0
            .unwrap()
    };
    let out = tempfile::tempdir().unwrap();
    let aligned = align_manifest(&loaded, &scene, &cams, &AlignConfig::default(), out.path()).unwrap();
    let (before, after) = (measure(&loaded), measure(&aligned));
    assert!(after <= before, "{after} > {before}");
    assert!(after < 0.9 * before, "{after} vs {before}");
}
