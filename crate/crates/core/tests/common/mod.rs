#![allow(dead_code)]

use nalgebra::{Matrix3, Point3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tunegs::{Camera, GaussianPrimitive, GaussianScene, Image, RenderConfig};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn front_camera(w: u32, h: u32, f: f64) -> Camera {
    Camera {
        view_id: "front".into(),
        fx: f,
        fy: f,
        cx: (w as f64 - 1.0) / 2.0,
        cy: (h as f64 - 1.0) / 2.0,
        width: w,
        height: h,
        rotation: Matrix3::identity(),
        translation: Vector3::zeros(),
    }
}

/// A camera slightly off-axis so that the view rotation is not trivial.
pub fn oblique_camera(w: u32, h: u32, f: f64) -> Camera {
    Camera::look_at(
        "oblique",
        Point3::new(0.4, -0.3, -0.5),
        Point3::new(0.0, 0.0, 3.5),
        Vector3::new(0.0, -1.0, 0.0),
        f,
        w,
        h,
    )
}

pub fn random_quat(rng: &mut impl Rng) -> [f64; 4] {
    loop {
        let q: [f64; 4] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
        let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 0.2 && n < 1.0 {
            return q.map(|v| v / n);
        }
    }
}

/// Random primitives inside the view frustum of the test cameras.
pub fn random_scene(rng: &mut impl Rng, n: usize) -> GaussianScene {
    let prims = (0..n)
        .map(|_| {
            let z = rng.gen_range(2.0..5.0);
            GaussianPrimitive {
                position: [
                    rng.gen_range(-0.25..0.25) * z,
                    rng.gen_range(-0.25..0.25) * z,
                    z,
                ],
                log_scale: std::array::from_fn(|_| rng.gen_range((0.08f64).ln()..(0.35f64).ln())),
                rotation: random_quat(rng),
                opacity_logit: rng.gen_range(-1.5..2.0),
                color: std::array::from_fn(|_| rng.gen_range(0.1..0.9)),
            }
        })
        .collect();
    GaussianScene::new(prims).unwrap()
}

pub fn random_image(rng: &mut impl Rng, w: usize, h: usize, lo: f64, hi: f64) -> Image {
    Image::from_fn(w, h, 3, |_, _, _| rng.gen_range(lo..hi))
}

/// Render settings under which alpha is a smooth function of every attribute
/// (no visible footprint clipping, cutoff or early termination).
pub fn smooth_config() -> RenderConfig {
    RenderConfig {
        alpha_cutoff: 1e-12,
        transmittance_floor: 0.0,
        background: [0.2, 0.1, 0.3],
        sigma_clip: 8.0,
    }
}

pub struct OracleOutput {
    pub color: Image,
    /// Weighted depth, `+inf` where nothing contributes.
    pub depth: Image,
    /// Sum of alpha * T per primitive.
    pub weights: Vec<f64>,
}

/// Brute-force compositing: every primitive, every pixel, exact depth order,
/// no bounding boxes and no early termination.
pub fn oracle_render(scene: &GaussianScene, cam: &Camera, cfg: &RenderConfig) -> OracleOutput {
    use nalgebra::{Matrix2, Matrix2x3, Quaternion, UnitQuaternion};
    struct Splat {
        index: usize,
        z: f64,
        mean: (f64, f64),
        inv: Matrix2<f64>,
        opacity: f64,
        color: [f64; 3],
    }
    let mut splats = Vec::new();
    for (index, p) in scene.primitives().iter().enumerate() {
        let t = cam.rotation * Vector3::from(p.position) + cam.translation;
        if t.z <= 0.01 {
            continue;
        }
        let [w, x, y, z] = p.rotation;
        let rot = UnitQuaternion::from_quaternion(Quaternion::new(w, x, y, z)).to_rotation_matrix();
        let s = Matrix3::from_diagonal(&Vector3::from(p.log_scale).map(f64::exp));
        let cov = rot.matrix() * s * s * rot.matrix().transpose();
        let j = Matrix2x3::new(
            cam.fx / t.z,
            0.0,
            -cam.fx * t.x / (t.z * t.z),
            0.0,
            cam.fy / t.z,
            -cam.fy * t.y / (t.z * t.z),
        );
        let cov2 = j * cam.rotation * cov * cam.rotation.transpose() * j.transpose();
        let Some(inv) = cov2.try_inverse() else { continue };
        splats.push(Splat {
            index,
            z: t.z,
            mean: (cam.fx * t.x / t.z + cam.cx, cam.fy * t.y / t.z + cam.cy),
            inv,
            opacity: 1.0 / (1.0 + (-p.opacity_logit).exp()),
            color: p.color.map(|c| c.clamp(0.0, 1.0)),
        });
    }
    splats.sort_by(|a, b| a.z.partial_cmp(&b.z).unwrap().then(a.index.cmp(&b.index)));
    let (w, h) = (cam.width as usize, cam.height as usize);
    let mut color = Image::new(w, h, 3);
    let mut depth = Image::new(w, h, 1);
    let mut weights = vec![0.0; scene.len()];
    for py in 0..h {
        for px in 0..w {
            let mut t = 1.0;
            let mut c = [0.0; 3];
            let (mut dsum, mut wsum) = (0.0, 0.0);
            for s in &splats {
                let d = nalgebra::Vector2::new(px as f64 - s.mean.0, py as f64 - s.mean.1);
                let m2 = (d.transpose() * s.inv * d)[(0, 0)];
                if m2 > cfg.sigma_clip * cfg.sigma_clip {
                    continue;
                }
                let alpha = s.opacity * (-0.5 * m2).exp();
                if alpha < cfg.alpha_cutoff {
                    continue;
                }
                for k in 0..3 {
                    c[k] += s.color[k] * alpha * t;
                }
                dsum += s.z * alpha * t;
                wsum += alpha * t;
                weights[s.index] += alpha * t;
                t *= 1.0 - alpha;
            }
            for k in 0..3 {
                color.set(px, py, k, c[k] + t * cfg.background[k]);
            }
            depth.set(px, py, 0, if wsum > 0.0 { dsum / wsum.max(1e-8) } else { f64::INFINITY });
        }
    }
    OracleOutput { color, depth, weights }
}

pub fn max_abs_diff(a: &Image, b: &Image) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| if x == y { 0.0 } else { (x - y).abs() })
        .fold(0.0, f64::max)
}
