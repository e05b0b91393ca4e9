//! Gaussian scene and camera types with their JSON file formats.
//!
//! Opacity is stored as a logit and scale as a log so that additive attribute
//! offsets can never leave the valid parameter domain. Quaternions are `wxyz`.

use std::collections::HashSet;
use std::path::Path;

use nalgebra::{Matrix3, Point3, Vector3};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha512};

use crate::error::{Error, Result};

/// One anisotropic 3D Gaussian.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianPrimitive {
    pub position: [f64; 3],
    pub log_scale: [f64; 3],
    /// Unit quaternion, `w, x, y, z`.
    pub rotation: [f64; 4],
    pub opacity_logit: f64,
    /// Raw RGB; clamped to `[0, 1]` only when rendering.
    pub color: [f64; 3],
}

impl GaussianPrimitive {
    pub fn opacity(&self) -> f64 {
        sigmoid(self.opacity_logit)
    }

    pub fn is_finite(&self) -> bool {
        self.position
            .iter()
            .chain(&self.log_scale)
            .chain(&self.rotation)
            .chain(&self.color)
            .chain(std::iter::once(&self.opacity_logit))
            .all(|v| v.is_finite())
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Normalizes a `wxyz` quaternion. A zero quaternion maps to identity.
pub fn normalize_quat(q: [f64; 4]) -> [f64; 4] {
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n == 0.0 || !n.is_finite() {
        return [1.0, 0.0, 0.0, 0.0];
    }
    // Leaves already-normalized input alone so that save/load round trips
    // are bit-exact.
    if (n - 1.0).abs() <= 4.0 * f64::EPSILON {
        return q;
    }
    [q[0] / n, q[1] / n, q[2] / n, q[3] / n]
}

/// Rotation matrix of a unit `wxyz` quaternion (no normalization applied).
pub fn quat_to_matrix(q: [f64; 4]) -> Matrix3<f64> {
    let [w, x, y, z] = q;
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Inverse of [`quat_to_matrix`] for proper rotation matrices.
pub fn matrix_to_quat(m: &Matrix3<f64>) -> [f64; 4] {
    let rot = nalgebra::Rotation3::from_matrix_unchecked(*m);
    let q = nalgebra::UnitQuaternion::from_rotation_matrix(&rot);
    [q.w, q.i, q.j, q.k]
}

/// An ordered collection of primitives. Indices are stable identities.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianScene {
    primitives: Vec<GaussianPrimitive>,
}

impl GaussianScene {
    /// Builds a scene, renormalizing rotations and rejecting non-finite
    /// attributes.
    pub fn new(mut primitives: Vec<GaussianPrimitive>) -> Result<Self> {
        if primitives.is_empty() {
            return Err(Error::Validation("scene has no primitives".into()));
        }
        for (i, p) in primitives.iter_mut().enumerate() {
            if !p.is_finite() {
                return Err(Error::Validation(format!(
                    "primitive {i} has a non-finite attribute"
                )));
            }
            p.rotation = normalize_quat(p.rotation);
        }
        Ok(Self { primitives })
    }

    /// Builds a scene that may be empty. Used for render edge cases and
    /// filtering results; I/O never produces one.
    pub fn from_primitives_unchecked(primitives: Vec<GaussianPrimitive>) -> Self {
        Self { primitives }
    }

    pub fn len(&self) -> usize {
        self.primitives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.primitives.is_empty()
    }

    pub fn primitives(&self) -> &[GaussianPrimitive] {
        &self.primitives
    }

    pub fn primitives_mut(&mut self) -> &mut [GaussianPrimitive] {
        &mut self.primitives
    }

    pub fn into_primitives(self) -> Vec<GaussianPrimitive> {
        self.primitives
    }

    /// Axis-aligned bounds of the primitive centers.
    pub fn bounds(&self) -> ([f64; 3], [f64; 3]) {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in &self.primitives {
            for k in 0..3 {
                lo[k] = lo[k].min(p.position[k]);
                hi[k] = hi[k].max(p.position[k]);
            }
        }
        (lo, hi)
    }

    /// SHA-512 of the canonical JSON encoding.
    pub fn fingerprint(&self) -> [u8; 64] {
        let bytes = self.to_json_string().into_bytes();
        let digest = Sha512::digest(&bytes);
        let mut out = [0u8; 64];
        out.copy_from_slice(&digest);
        out
    }

    pub fn to_json_string(&self) -> String {
        let file = SceneFile {
            primitives: self
                .primitives
                .iter()
                .map(|p| PrimitiveRecord {
                    mu: p.position.map(LenientF64),
                    log_scale: p.log_scale.map(LenientF64),
                    rot: p.rotation.map(LenientF64),
                    opacity_logit: LenientF64(p.opacity_logit),
                    color: p.color.map(LenientF64),
                })
                .collect(),
        };
        serde_json::to_string(&file).expect("scene serialization cannot fail")
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let cleaned = replace_bare_nonfinite(text);
        let file: SceneFile =
            serde_json::from_str(&cleaned).map_err(|e| Error::json("scene JSON", e))?;
        let primitives = file
            .primitives
            .into_iter()
            .map(|r| GaussianPrimitive {
                position: r.mu.map(|v| v.0),
                log_scale: r.log_scale.map(|v| v.0),
                rotation: r.rot.map(|v| v.0),
                opacity_logit: r.opacity_logit.0,
                color: r.color.map(|v| v.0),
            })
            .collect();
        Self::new(primitives)
    }
}

pub fn load_scene_json(path: impl AsRef<Path>) -> Result<GaussianScene> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    GaussianScene::from_json_str(&text)
}

pub fn save_scene_json(scene: &GaussianScene, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, scene.to_json_string()).map_err(|e| Error::io(path, e))
}

#[derive(Serialize, Deserialize)]
struct SceneFile {
    primitives: Vec<PrimitiveRecord>,
}

#[derive(Serialize, Deserialize)]
struct PrimitiveRecord {
    mu: [LenientF64; 3],
    log_scale: [LenientF64; 3],
    rot: [LenientF64; 4],
    opacity_logit: LenientF64,
    color: [LenientF64; 3],
}

/// Float that deserializes `null` (what bare `NaN`/`Infinity` tokens are
/// rewritten to) as NaN so validation can report the primitive index.
#[derive(Clone, Copy)]
struct LenientF64(f64);

impl Serialize for LenientF64 {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_f64(self.0)
    }
}

impl<'de> Deserialize<'de> for LenientF64 {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let v: Option<f64> = Option::deserialize(d)?;
        Ok(LenientF64(v.unwrap_or(f64::NAN)))
    }
}

/// Rewrites bare `NaN`, `Infinity` and `-Infinity` tokens (as emitted by
/// Python's json module) to `null`, leaving string contents alone.
fn replace_bare_nonfinite(text: &str) -> std::borrow::Cow<'_, str> {
    if !(text.contains("NaN") || text.contains("Infinity")) {
        return std::borrow::Cow::Borrowed(text);
    }
    let mut out = String::with_capacity(text.len());
    let mut in_string = false;
    let mut escaped = false;
    let mut rest = text;
    while let Some(c) = rest.chars().next() {
        if in_string {
            out.push(c);
            if escaped {
                escaped = false;
            } else if c == '\\' {
                escaped = true;
            } else if c == '"' {
                in_string = false;
            }
            rest = &rest[c.len_utf8()..];
            continue;
        }
        if c == '"' {
            in_string = true;
            out.push(c);
            rest = &rest[1..];
            continue;
        }
        let token = ["-Infinity", "Infinity", "NaN"]
            .into_iter()
            .find(|t| rest.starts_with(t));
        match token {
            Some(t) => {
                out.push_str("null");
                rest = &rest[t.len()..];
            }
            None => {
                out.push(c);
                rest = &rest[c.len_utf8()..];
            }
        }
    }
    std::borrow::Cow::Owned(out)
}

/// Pinhole camera with a rigid world-to-camera transform. Camera space looks
/// down `+z` with `+y` pointing down the image.
#[derive(Clone, Debug, PartialEq)]
pub struct Camera {
    pub view_id: String,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Camera {
    /// Validates intrinsics and that the rotation is orthonormal within 1e-6.
    pub fn validate(&self) -> Result<()> {
        let id = &self.view_id;
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::Validation(format!("camera {id}: fx, fy must be > 0")));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::Validation(format!("camera {id}: empty image size")));
        }
        if ![self.cx, self.cy].iter().all(|v| v.is_finite())
            || !self.translation.iter().all(|v| v.is_finite())
        {
            return Err(Error::Validation(format!("camera {id}: non-finite value")));
        }
        let gram = self.rotation.transpose() * self.rotation;
        let err = (gram - Matrix3::identity()).abs().max();
        if !(err <= 1e-6) || !(self.rotation.determinant() > 0.0) {
            return Err(Error::Validation(format!(
                "camera {id}: rotation is not orthonormal (|RᵀR - I| = {err:e})"
            )));
        }
        Ok(())
    }

    pub fn world_to_camera(&self, p: &Point3<f64>) -> Point3<f64> {
        Point3::from(self.rotation * p.coords + self.translation)
    }

    pub fn camera_to_world(&self, p: &Point3<f64>) -> Point3<f64> {
        Point3::from(self.rotation.transpose() * (p.coords - self.translation))
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Point3<f64> {
        self.camera_to_world(&Point3::origin())
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }

    /// Same pose, intrinsics rescaled to a `width x height` image.
    pub fn resized(&self, width: u32, height: u32) -> Camera {
        let sx = width as f64 / self.width as f64;
        let sy = height as f64 / self.height as f64;
        Camera {
            fx: self.fx * sx,
            fy: self.fy * sy,
            cx: self.cx * sx,
            cy: self.cy * sy,
            width,
            height,
            ..self.clone()
        }
    }

    /// Camera for a grid downscaled by an integer `factor`. Cell `(i, j)` covers
    /// pixels `factor*i .. factor*i + factor - 1`, so its center sits at
    /// `factor*i + (factor-1)/2` in the original pixel frame.
    pub fn downscaled(&self, factor: u32) -> Camera {
        let s = factor as f64;
        let shift = (s - 1.0) / 2.0;
        Camera {
            fx: self.fx / s,
            fy: self.fy / s,
            cx: (self.cx - shift) / s,
            cy: (self.cy - shift) / s,
            width: self.width.div_ceil(factor),
            height: self.height.div_ceil(factor),
            ..self.clone()
        }
    }

    /// Looks from `eye` toward `target`; `up` is the approximate world up.
    pub fn look_at(
        view_id: impl Into<String>,
        eye: Point3<f64>,
        target: Point3<f64>,
        up: Vector3<f64>,
        focal: f64,
        width: u32,
        height: u32,
    ) -> Camera {
        let forward = (target - eye).normalize();
        let right = forward.cross(&up).normalize();
        let down = forward.cross(&right);
        let rotation = Matrix3::from_rows(&[
            right.transpose(),
            down.transpose(),
            forward.transpose(),
        ]);
        let translation = -(rotation * eye.coords);
        Camera {
            view_id: view_id.into(),
            fx: focal,
            fy: focal,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            width,
            height,
            rotation,
            translation,
        }
    }

    fn to_record(&self) -> CameraRecord {
        let t = self.translation;
        CameraRecord {
            view_id: self.view_id.clone(),
            fx: self.fx,
            fy: self.fy,
            cx: self.cx,
            cy: self.cy,
            width: self.width,
            height: self.height,
            w2c_rot: matrix_to_quat(&self.rotation),
            w2c_trans: [t.x, t.y, t.z],
        }
    }

    fn from_record(r: CameraRecord) -> Result<Camera> {
        // Not renormalized: a non-unit quaternion yields a scaled matrix and
        // fails the orthonormality check below.
        let q = r.w2c_rot;
        let cam = Camera {
            view_id: r.view_id,
            fx: r.fx,
            fy: r.fy,
            cx: r.cx,
            cy: r.cy,
            width: r.width,
            height: r.height,
            rotation: quat_to_matrix(q),
            translation: Vector3::from(r.w2c_trans),
        };
        cam.validate()?;
        Ok(Camera {
            rotation: quat_to_matrix(normalize_quat(q)),
            ..cam
        })
    }
}

#[derive(Serialize, Deserialize)]
struct CameraFile {
    cameras: Vec<CameraRecord>,
}

#[derive(Serialize, Deserialize)]
struct CameraRecord {
    view_id: String,
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    width: u32,
    height: u32,
    w2c_rot: [f64; 4],
    w2c_trans: [f64; 3],
}

pub fn cameras_from_json_str(text: &str) -> Result<Vec<Camera>> {
    let file: CameraFile =
        serde_json::from_str(text).map_err(|e| Error::json("camera JSON", e))?;
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(file.cameras.len());
    for rec in file.cameras {
        if !seen.insert(rec.view_id.clone()) {
            return Err(Error::Validation(format!(
                "duplicate view_id {:?}",
                rec.view_id
            )));
        }
        out.push(Camera::from_record(rec)?);
    }
    Ok(out)
}

pub fn cameras_to_json_string(cameras: &[Camera]) -> String {
    let file = CameraFile {
        cameras: cameras.iter().map(Camera::to_record).collect(),
    };
    serde_json::to_string_pretty(&file).expect("camera serialization cannot fail")
}

pub fn load_cameras(path: impl AsRef<Path>) -> Result<Vec<Camera>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    cameras_from_json_str(&text)
}

pub fn save_cameras(cameras: &[Camera], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, cameras_to_json_string(cameras)).map_err(|e| Error::io(path, e))
}

/// Looks up a camera by view id.
pub fn find_camera<'a>(cameras: &'a [Camera], view_id: &str) -> Option<&'a Camera> {
    cameras.iter().find(|c| c.view_id == view_id)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn prim(rot: [f64; 4]) -> GaussianPrimitive {
        GaussianPrimitive {
            position: [0.1, -0.2, 3.0],
            log_scale: [-1.0, -1.5, -2.0],
            rotation: rot,
            opacity_logit: 0.3,
            color: [0.2, 0.4, 0.6],
        }
    }

    #[test]
    fn json_round_trip_is_bit_identical() {
        let scene = GaussianScene::new(vec![
            prim([1.0, 0.0, 0.0, 0.0]),
            GaussianPrimitive {
                position: [1.0 / 3.0, 2e-9, -7.25],
                ..prim([0.5, 0.5, 0.5, 0.5])
            },
        ])
        .unwrap();
        let text = scene.to_json_string();
        let back = GaussianScene::from_json_str(&text).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back, scene);
        assert_eq!(back.to_json_string(), text);
    }

    #[test]
    fn random_rotations_survive_round_trip() {
        let prims = (0..500)
            .map(|i| {
                let t = i as f64 * 0.37;
                prim([t.sin() + 0.1, (2.0 * t).cos(), 0.3 * t.sin(), (1.7 * t).cos()])
            })
            .collect();
        let scene = GaussianScene::new(prims).unwrap();
        let back = GaussianScene::from_json_str(&scene.to_json_string()).unwrap();
        assert_eq!(back, scene);
        assert_eq!(back.fingerprint(), scene.fingerprint());
    }

    #[test]
    fn rotation_renormalized_on_load() {
        let text = r#"{"primitives":[{"mu":[0,0,0],"log_scale":[0,0,0],"rot":[2,0,0,0],"opacity_logit":0,"color":[1,1,1]}]}"#;
        let scene = GaussianScene::from_json_str(text).unwrap();
        assert_eq!(scene.primitives()[0].rotation, [1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn nan_opacity_is_a_validation_error_naming_the_index() {
        let text = r#"{"primitives":[{"mu":[0,0,0],"log_scale":[0,0,0],"rot":[1,0,0,0],"opacity_logit":NaN,"color":[1,1,1]}]}"#;
        match GaussianScene::from_json_str(text) {
            Err(Error::Validation(msg)) => assert!(msg.contains("primitive 0"), "{msg}"),
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn malformed_json_reports_line() {
        let text = "{\"primitives\": [\n  {\"mu\": [0,0,\n}";
        match GaussianScene::from_json_str(text) {
            Err(Error::Parse { line, .. }) => assert!(line >= 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn nan_inside_string_is_untouched() {
        assert_eq!(replace_bare_nonfinite(r#"{"a":"NaN","b":NaN}"#), r#"{"a":"NaN","b":null}"#);
    }

    fn camera_json(id: &str, q: [f64; 4]) -> String {
        format!(
            r#"{{"view_id":"{id}","fx":50,"fy":50,"cx":32,"cy":32,"width":64,"height":64,"w2c_rot":[{},{},{},{}],"w2c_trans":[0,0,0]}}"#,
            q[0], q[1], q[2], q[3]
        )
    }

    #[test]
    fn identity_camera_maps_origin_to_origin() {
        let text = format!(r#"{{"cameras":[{}]}}"#, camera_json("v0", [1.0, 0.0, 0.0, 0.0]));
        let cams = cameras_from_json_str(&text).unwrap();
        let p = cams[0].world_to_camera(&Point3::origin());
        assert_eq!(p, Point3::origin());
    }

    #[test]
    fn eight_cameras_keep_file_order() {
        let entries: Vec<String> = (0..8)
            .map(|i| camera_json(&format!("v{i}"), [1.0, 0.0, 0.0, 0.0]))
            .collect();
        let text = format!(r#"{{"cameras":[{}]}}"#, entries.join(","));
        let cams = cameras_from_json_str(&text).unwrap();
        let ids: Vec<_> = cams.iter().map(|c| c.view_id.as_str()).collect();
        assert_eq!(ids, ["v0", "v1", "v2", "v3", "v4", "v5", "v6", "v7"]);
    }

    #[test]
    fn duplicate_view_id_rejected() {
        let c = camera_json("v0", [1.0, 0.0, 0.0, 0.0]);
        let text = format!(r#"{{"cameras":[{c},{c}]}}"#);
        assert!(matches!(cameras_from_json_str(&text), Err(Error::Validation(_))));
    }

    #[test]
    fn non_orthonormal_rotation_rejected() {
        let text = format!(r#"{{"cameras":[{}]}}"#, camera_json("v0", [0.9, 0.3, 0.0, 0.0]));
        assert!(matches!(cameras_from_json_str(&text), Err(Error::Validation(_))));
    }

    #[test]
    fn camera_round_trip() {
        let cam = Camera::look_at(
            "a",
            Point3::new(1.0, -0.5, -4.0),
            Point3::origin(),
            Vector3::new(0.0, -1.0, 0.0),
            60.0,
            64,
            48,
        );
        let back = cameras_from_json_str(&cameras_to_json_string(&[cam.clone()])).unwrap();
        assert!((back[0].rotation - cam.rotation).abs().max() < 1e-12);
        assert!((back[0].translation - cam.translation).abs().max() < 1e-12);
    }

    #[test]
    fn look_at_puts_target_on_axis() {
        let cam = Camera::look_at(
            "a",
            Point3::new(2.0, 1.0, -5.0),
            Point3::new(0.0, 0.5, 0.0),
            Vector3::new(0.0, -1.0, 0.0),
            60.0,
            64,
            64,
        );
        cam.validate().unwrap();
        let p = cam.world_to_camera(&Point3::new(0.0, 0.5, 0.0));
        assert!(p.x.abs() < 1e-12 && p.y.abs() < 1e-12 && p.z > 0.0);
    }

    #[test]
    fn downscaled_camera_maps_cell_centers() {
        let cam = Camera::look_at(
            "a",
            Point3::new(0.0, 0.0, -5.0),
            Point3::origin(),
            Vector3::new(0.0, -1.0, 0.0),
            64.0,
            64,
            64,
        );
        let small = cam.downscaled(4);
        // Pixel 10 in the full grid is at cell-space (10 - 1.5) / 4.
        let p = Point3::new(0.3, 0.1, 0.0);
        let c = cam.world_to_camera(&p);
        let u_full = cam.fx * c.x / c.z + cam.cx;
        let u_small = small.fx * c.x / c.z + small.cx;
        assert!(((u_full - 1.5) / 4.0 - u_small).abs() < 1e-12);
        assert_eq!(small.width, 16);
    }
}
