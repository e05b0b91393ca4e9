//! Reverse-mode gradients of `sum(loss_gradient * color)` with respect to
//! every primitive attribute.
//!
//! Per pixel the forward pass is recomputed and swept back to front with the
//! "color behind" recursion `B_i = a_i c_i + (1 - a_i) B_{i+1}`, which gives
//! `dC/da_i = T_i (c_i - B_{i+1})` without dividing by `1 - a_i`.

use nalgebra::{Matrix2, Matrix3, Vector3};

use super::{PixelVisitor, Projected, RenderConfig, View, ROW_BLOCKS};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::par;
use crate::scene::{Camera, GaussianScene};

/// Per-primitive gradients, parallel to the scene.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneGradients {
    pub position: Vec<[f64; 3]>,
    pub log_scale: Vec<[f64; 3]>,
    pub rotation: Vec<[f64; 4]>,
    pub opacity_logit: Vec<f64>,
    pub color: Vec<[f64; 3]>,
}

impl SceneGradients {
    pub fn zeros(n: usize) -> Self {
        Self {
            position: vec![[0.0; 3]; n],
            log_scale: vec![[0.0; 3]; n],
            rotation: vec![[0.0; 4]; n],
            opacity_logit: vec![0.0; n],
            color: vec![[0.0; 3]; n],
        }
    }

    pub fn len(&self) -> usize {
        self.opacity_logit.len()
    }

    pub fn is_empty(&self) -> bool {
        self.opacity_logit.is_empty()
    }

    /// The 14 channels of primitive `i` in `position, log_scale, rotation,
    /// opacity, color` order.
    pub fn channels(&self, i: usize) -> [f64; 14] {
        let mut out = [0.0; 14];
        out[0..3].copy_from_slice(&self.position[i]);
        out[3..6].copy_from_slice(&self.log_scale[i]);
        out[6..10].copy_from_slice(&self.rotation[i]);
        out[10] = self.opacity_logit[i];
        out[11..14].copy_from_slice(&self.color[i]);
        out
    }

    pub fn add_assign(&mut self, other: &SceneGradients) {
        fn add<const K: usize>(a: &mut [[f64; K]], b: &[[f64; K]]) {
            for (x, y) in a.iter_mut().zip(b) {
                for k in 0..K {
                    x[k] += y[k];
                }
            }
        }
        add(&mut self.position, &other.position);
        add(&mut self.log_scale, &other.log_scale);
        add(&mut self.rotation, &other.rotation);
        add(&mut self.color, &other.color);
        for (x, y) in self.opacity_logit.iter_mut().zip(&other.opacity_logit) {
            *x += y;
        }
    }

    pub fn all_finite(&self) -> bool {
        (0..self.len()).all(|i| self.channels(i).iter().all(|v| v.is_finite()))
    }
}

/// Screen-space gradient accumulators for one projected primitive.
#[derive(Clone, Copy, Default)]
struct ScreenGrad {
    mean: [f64; 2],
    conic: [f64; 3],
    opacity: f64,
    color: [f64; 3],
}

struct Contribution {
    rank: usize,
    alpha: f64,
    transmittance: f64,
    power_exp: f64,
}

struct Collect<'a>(&'a mut Vec<Contribution>);

impl PixelVisitor for Collect<'_> {
    #[inline]
    fn hit(&mut self, rank: usize, _: &Projected, alpha: f64, transmittance: f64, power: f64) {
        self.0.push(Contribution {
            rank,
            alpha,
            transmittance,
            power_exp: (-power).exp(),
        });
    }
}

/// Gradients of the scalar `sum_{pixels, channels} loss_gradient * color`.
pub fn backward(
    scene: &GaussianScene,
    camera: &Camera,
    config: &RenderConfig,
    loss_gradient: &Image,
) -> Result<SceneGradients> {
    let (w, h) = (camera.width as usize, camera.height as usize);
    if loss_gradient.width() != w || loss_gradient.height() != h || loss_gradient.channels() != 3 {
        return Err(Error::Shape(format!(
            "loss gradient is {}x{}x{}, camera is {h}x{w}x3",
            loss_gradient.height(),
            loss_gradient.width(),
            loss_gradient.channels()
        )));
    }
    if let Some(i) = loss_gradient.data().iter().position(|v| !v.is_finite()) {
        let px = i / 3;
        return Err(Error::Validation(format!(
            "non-finite loss gradient at pixel ({}, {})",
            px % w,
            px / w
        )));
    }

    let view = View::new(scene, camera, config);
    let bg = config.background;
    let parts = par::map_blocks(h, ROW_BLOCKS, |rows| {
        let mut acc = vec![ScreenGrad::default(); view.sorted.len()];
        let candidates = view.rows_candidates(rows.clone());
        let mut hits = Vec::new();
        for y in rows {
            for x in 0..w {
                let g = loss_gradient.pixel(x, y);
                if g.iter().all(|&v| v == 0.0) {
                    continue;
                }
                hits.clear();
                view.composite(&candidates, x, y, &mut Collect(&mut hits));
                let mut behind = bg;
                for c in hits.iter().rev() {
                    let p = &view.sorted[c.rank];
                    let a = &mut acc[c.rank];
                    let weight = c.alpha * c.transmittance;
                    let mut d_alpha = 0.0;
                    for k in 0..3 {
                        a.color[k] += g[k] * weight;
                        d_alpha += g[k] * (p.color[k] - behind[k]);
                        behind[k] = c.alpha * p.color[k] + (1.0 - c.alpha) * behind[k];
                    }
                    d_alpha *= c.transmittance;
                    // alpha = opacity * exp(-power)
                    a.opacity += d_alpha * c.power_exp;
                    let d_power = -d_alpha * c.alpha;
                    let dx = x as f64 - p.mean[0];
                    let dy = y as f64 - p.mean[1];
                    let [ca, cb, cc] = p.conic;
                    a.mean[0] -= d_power * (ca * dx + cb * dy);
                    a.mean[1] -= d_power * (cb * dx + cc * dy);
                    a.conic[0] += d_power * 0.5 * dx * dx;
                    a.conic[1] += d_power * dx * dy;
                    a.conic[2] += d_power * 0.5 * dy * dy;
                }
            }
        }
        acc
    });

    let mut screen = vec![ScreenGrad::default(); view.sorted.len()];
    for part in parts {
        for (s, p) in screen.iter_mut().zip(part) {
            for k in 0..2 {
                s.mean[k] += p.mean[k];
            }
            for k in 0..3 {
                s.conic[k] += p.conic[k];
                s.color[k] += p.color[k];
            }
            s.opacity += p.opacity;
        }
    }

    let mut grads = SceneGradients::zeros(scene.len());
    for (p, s) in view.sorted.iter().zip(&screen) {
        chain_primitive(p, s, camera, scene, &mut grads);
    }
    Ok(grads)
}

/// Pushes screen-space gradients back to the primitive's stored attributes.
fn chain_primitive(
    p: &Projected,
    s: &ScreenGrad,
    camera: &Camera,
    scene: &GaussianScene,
    grads: &mut SceneGradients,
) {
    let i = p.index;
    let prim = &scene.primitives()[i];

    for k in 0..3 {
        if p.color_pass[k] {
            grads.color[i][k] += s.color[k];
        }
    }
    let sig = p.opacity;
    grads.opacity_logit[i] += s.opacity * sig * (1.0 - sig);

    // Conic (inverse covariance) to 2D covariance: dS = -M G M.
    let m = Matrix2::new(p.conic[0], p.conic[1], p.conic[1], p.conic[2]);
    let g_conic = Matrix2::new(s.conic[0], 0.5 * s.conic[1], 0.5 * s.conic[1], s.conic[2]);
    let g_cov2d = -(m * g_conic * m);

    // cov2d = T cov3d T^T with T = J W.
    let g_cov3d: Matrix3<f64> = p.jw.transpose() * g_cov2d * p.jw;
    let g_jw = 2.0 * g_cov2d * p.jw * p.cov3d;
    let g_j = g_jw * camera.rotation.transpose();

    let (fx, fy) = (camera.fx, camera.fy);
    let t = p.cam_point;
    let inv_z = 1.0 / t.z;
    let inv_z2 = inv_z * inv_z;
    let inv_z3 = inv_z2 * inv_z;
    let mut g_t = Vector3::zeros();
    // Mean: u = fx x / z + cx, v = fy y / z + cy.
    g_t.x += s.mean[0] * fx * inv_z;
    g_t.y += s.mean[1] * fy * inv_z;
    g_t.z -= s.mean[0] * fx * t.x * inv_z2 + s.mean[1] * fy * t.y * inv_z2;
    // Jacobian entries.
    g_t.z -= g_j[(0, 0)] * fx * inv_z2;
    g_t.x -= g_j[(0, 2)] * fx * inv_z2;
    g_t.z += g_j[(0, 2)] * 2.0 * fx * t.x * inv_z3;
    g_t.z -= g_j[(1, 1)] * fy * inv_z2;
    g_t.y -= g_j[(1, 2)] * fy * inv_z2;
    g_t.z += g_j[(1, 2)] * 2.0 * fy * t.y * inv_z3;
    let g_world = camera.rotation.transpose() * g_t;
    for k in 0..3 {
        grads.position[i][k] += g_world[k];
    }

    // cov3d = M M^T with M = R diag(s).
    let mmat = p.rot * Matrix3::from_diagonal(&p.scale);
    let g_m = 2.0 * g_cov3d * mmat;
    let mut g_r = Matrix3::zeros();
    for r in 0..3 {
        for c in 0..3 {
            g_r[(r, c)] = g_m[(r, c)] * p.scale[c];
        }
    }
    for k in 0..3 {
        let g_s: f64 = (0..3).map(|r| g_m[(r, k)] * p.rot[(r, k)]).sum();
        grads.log_scale[i][k] += g_s * p.scale[k];
    }

    let g_qhat = quat_matrix_grad(p.quat, &g_r);
    // Through q_hat = q / |q|.
    let dot: f64 = (0..4).map(|k| g_qhat[k] * p.quat[k]).sum();
    let norm = if p.quat_norm > 0.0 { p.quat_norm } else { 1.0 };
    debug_assert!(prim.rotation.iter().all(|v| v.is_finite()));
    for k in 0..4 {
        grads.rotation[i][k] += (g_qhat[k] - p.quat[k] * dot) / norm;
    }
}

/// Gradient of a loss with respect to the entries of a unit quaternion, given
/// the gradient `g` with respect to its rotation matrix.
fn quat_matrix_grad(q: [f64; 4], g: &Matrix3<f64>) -> [f64; 4] {
    let [w, x, y, z] = q;
    let gm = |r: usize, c: usize| g[(r, c)];
    [
        2.0 * (-z * gm(0, 1) + y * gm(0, 2) + z * gm(1, 0) - x * gm(1, 2) - y * gm(2, 0)
            + x * gm(2, 1)),
        2.0 * (y * gm(0, 1) + z * gm(0, 2) + y * gm(1, 0) - 2.0 * x * gm(1, 1) - w * gm(1, 2)
            + z * gm(2, 0)
            + w * gm(2, 1)
            - 2.0 * x * gm(2, 2)),
        2.0 * (-2.0 * y * gm(0, 0) + x * gm(0, 1) + w * gm(0, 2) + x * gm(1, 0) + z * gm(1, 2)
            - w * gm(2, 0)
            + z * gm(2, 1)
            - 2.0 * y * gm(2, 2)),
        2.0 * (-2.0 * z * gm(0, 0) - w * gm(0, 1) + x * gm(0, 2) + w * gm(1, 0)
            - 2.0 * z * gm(1, 1)
            + y * gm(1, 2)
            + x * gm(2, 0)
            + y * gm(2, 1)),
    ]
}
