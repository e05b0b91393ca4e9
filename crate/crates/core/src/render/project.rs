use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector3};

use super::{RenderConfig, RenderDiagnostics, MAX_CONDITION, NEAR_PLANE};
use crate::scene::{normalize_quat, quat_to_matrix, sigmoid, Camera, GaussianScene};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct PixelBox {
    pub x0: i64,
    pub x1: i64,
    pub y0: i64,
    pub y1: i64,
}

/// A primitive projected into one view, with the intermediates the backward
/// pass needs.
#[derive(Clone, Debug)]
pub(crate) struct Projected {
    pub index: usize,
    pub mean: [f64; 2],
    pub depth: f64,
    /// Inverse 2D covariance as `(a, b, c)` for `[[a, b], [b, c]]`.
    pub conic: [f64; 3],
    pub opacity: f64,
    /// Color clamped to `[0, 1]`.
    pub color: [f64; 3],
    pub bbox: PixelBox,
    pub cam_point: Vector3<f64>,
    pub cov3d: Matrix3<f64>,
    pub rot: Matrix3<f64>,
    pub scale: Vector3<f64>,
    pub quat: [f64; 4],
    pub quat_norm: f64,
    /// `J W`, the linearized world-to-image map.
    pub jw: Matrix2x3<f64>,
    pub color_pass: [bool; 3],
}

/// Projects all primitives and returns them sorted front to back, ties broken
/// by primitive index.
pub(crate) fn project_scene(
    scene: &GaussianScene,
    camera: &Camera,
    config: &RenderConfig,
) -> (Vec<Projected>, RenderDiagnostics) {
    let mut diag = RenderDiagnostics::default();
    let mut out = Vec::with_capacity(scene.len());
    for (index, prim) in scene.primitives().iter().enumerate() {
        let world = Vector3::from(prim.position);
        let t = camera.rotation * world + camera.translation;
        if t.z <= NEAR_PLANE {
            diag.behind_camera += 1;
            continue;
        }
        let q_raw = prim.rotation;
        let quat_norm = q_raw.iter().map(|v| v * v).sum::<f64>().sqrt();
        let quat = normalize_quat(q_raw);
        let rot = quat_to_matrix(quat);
        let scale = Vector3::from(prim.log_scale).map(f64::exp);
        let m = rot * Matrix3::from_diagonal(&scale);
        let cov3d = m * m.transpose();

        let (fx, fy) = (camera.fx, camera.fy);
        let inv_z = 1.0 / t.z;
        let j = Matrix2x3::new(
            fx * inv_z,
            0.0,
            -fx * t.x * inv_z * inv_z,
            0.0,
            fy * inv_z,
            -fy * t.y * inv_z * inv_z,
        );
        let jw = j * camera.rotation;
        let cov2d: Matrix2<f64> = jw * cov3d * jw.transpose();
        let (p, q, r) = (cov2d[(0, 0)], cov2d[(0, 1)], cov2d[(1, 1)]);
        let det = p * r - q * q;
        let tr_half = 0.5 * (p + r);
        let disc = (tr_half * tr_half - det).max(0.0).sqrt();
        let lmax = tr_half + disc;
        let lmin = tr_half - disc;
        if !(det > 0.0) || !(lmin > 0.0) || lmax / lmin > MAX_CONDITION || !lmax.is_finite() {
            diag.degenerate += 1;
            continue;
        }
        let conic = [r / det, -q / det, p / det];
        let mean = [fx * t.x * inv_z + camera.cx, fy * t.y * inv_z + camera.cy];
        // Extent of the clipped ellipse along each axis.
        let rx = config.sigma_clip * p.sqrt();
        let ry = config.sigma_clip * r.sqrt();
        let bbox = PixelBox {
            x0: (mean[0] - rx).ceil().max(-1.0).min(camera.width as f64) as i64,
            x1: (mean[0] + rx).floor().max(-1.0).min(camera.width as f64) as i64,
            y0: (mean[1] - ry).ceil().max(-1.0).min(camera.height as f64) as i64,
            y1: (mean[1] + ry).floor().max(-1.0).min(camera.height as f64) as i64,
        };
        let visible = bbox.x1 >= 0
            && bbox.x0 < camera.width as i64
            && bbox.y1 >= 0
            && bbox.y0 < camera.height as i64
            && bbox.x0 <= bbox.x1
            && bbox.y0 <= bbox.y1;
        if !visible {
            continue;
        }
        let color_pass = prim.color.map(|c| (0.0..=1.0).contains(&c));
        out.push(Projected {
            index,
            mean,
            depth: t.z,
            conic,
            opacity: sigmoid(prim.opacity_logit),
            color: prim.color.map(|c| c.clamp(0.0, 1.0)),
            bbox,
            cam_point: t,
            cov3d,
            rot,
            scale,
            quat,
            quat_norm,
            jw,
            color_pass,
        });
    }
    out.sort_by(|a, b| a.depth.total_cmp(&b.depth).then(a.index.cmp(&b.index)));
    (out, diag)
}
