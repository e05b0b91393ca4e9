//! Deterministic scenes used by tests, the CLI and the browser demo.

use std::f64::consts::PI;

use nalgebra::{Matrix3, Point3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::image::Image;
use crate::scene::{Camera, GaussianPrimitive, GaussianScene};

pub const TOY_SIZE: u32 = 64;
pub const TOY_VIEWS: usize = 8;
pub const TOY_PRIMITIVES: usize = 256;
pub const TOY_SEED: u64 = 7;

pub const PLANE_DEPTH: f64 = 5.0;
pub const PLANE_FOCAL: f64 = 60.0;
/// Camera spacing giving a disparity of two pixels per step on the plane.
pub const PLANE_BASELINE: f64 = 2.0 * PLANE_DEPTH / PLANE_FOCAL;
pub const PLANE_VIEWS: usize = 12;

fn random_rotation(rng: &mut impl Rng) -> [f64; 4] {
    let q: [f64; 4] = [
        rng.gen_range(-1.0..1.0),
        rng.gen_range(-1.0..1.0),
        rng.gen_range(-1.0..1.0),
        rng.gen_range(-1.0..1.0),
    ];
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-3);
    q.map(|v| v / n)
}

fn flat(position: [f64; 3], sx: f64, sy: f64, logit: f64, color: [f64; 3]) -> GaussianPrimitive {
    GaussianPrimitive {
        position,
        log_scale: [sx.ln(), sy.ln(), (0.05f64).ln()],
        rotation: [1.0, 0.0, 0.0, 0.0],
        opacity_logit: logit,
        color,
    }
}

/// Eight cameras on an arc around the origin, 64x64 pixels.
pub fn toy_cameras() -> Vec<Camera> {
    (0..TOY_VIEWS)
        .map(|i| {
            let theta = (-30.0 + 60.0 * i as f64 / (TOY_VIEWS - 1) as f64) * PI / 180.0;
            let eye = Point3::new(5.0 * theta.sin(), -0.4, -5.0 * theta.cos());
            Camera::look_at(
                format!("v{i}"),
                eye,
                Point3::origin(),
                Vector3::new(0.0, 1.0, 0.0),
                70.0,
                TOY_SIZE,
                TOY_SIZE,
            )
        })
        .collect()
}

/// The toy scene: an opaque textured backdrop, colored clusters in front of
/// it, and low-value primitives (hidden behind the backdrop or faint) that
/// the importance filter should discard.
pub fn toy_scene() -> GaussianScene {
    let mut rng = ChaCha8Rng::seed_from_u64(TOY_SEED);
    let mut prims = Vec::with_capacity(TOY_PRIMITIVES);

    // Backdrop at z = 3, 10 x 6 overlapping opaque disks.
    for iy in 0..6 {
        for ix in 0..10 {
            let x = -8.1 + 1.8 * ix as f64;
            let y = -4.5 + 1.8 * iy as f64;
            let u = ix as f64 / 9.0;
            let v = iy as f64 / 5.0;
            let color = [0.25 + 0.5 * u, 0.3 + 0.4 * v, 0.7 - 0.4 * u * v];
            prims.push(flat([x, y, 3.0], 1.5, 1.5, 6.0, color));
        }
    }

    // Colored clusters between the cameras and the backdrop.
    let palette = [
        [0.9, 0.2, 0.2],
        [0.2, 0.8, 0.3],
        [0.2, 0.3, 0.9],
        [0.9, 0.8, 0.2],
        [0.7, 0.3, 0.8],
        [0.2, 0.8, 0.8],
    ];
    let centers = [
        [-1.2, -0.6, 0.2],
        [1.0, -0.8, -0.3],
        [0.0, 0.6, 0.5],
        [-0.9, 1.0, -0.6],
        [1.3, 0.7, 0.8],
        [0.2, -1.3, 1.2],
    ];
    for (c, base) in centers.iter().zip(palette) {
        for _ in 0..20 {
            let position = [
                c[0] + rng.gen_range(-0.45..0.45),
                c[1] + rng.gen_range(-0.45..0.45),
                c[2] + rng.gen_range(-0.45..0.45),
            ];
            let scale: f64 = rng.gen_range(0.12..0.32);
            let aniso: f64 = rng.gen_range(0.6..1.4);
            prims.push(GaussianPrimitive {
                position,
                log_scale: [
                    (scale * aniso).ln(),
                    (scale / aniso).ln(),
                    (scale * rng.gen_range(0.5f64..1.0)).ln(),
                ],
                rotation: random_rotation(&mut rng),
                opacity_logit: rng.gen_range(0.5..4.0),
                color: base.map(|v: f64| (v + rng.gen_range(-0.1..0.1)).clamp(0.0, 1.0)),
            });
        }
    }

    // Hidden behind the backdrop.
    while prims.len() < 60 + 120 + 46 {
        prims.push(GaussianPrimitive {
            position: [
                rng.gen_range(-4.0..4.0),
                rng.gen_range(-3.0..3.0),
                rng.gen_range(3.6..5.0),
            ],
            log_scale: [rng.gen_range(-1.6f64..-0.8); 3],
            rotation: random_rotation(&mut rng),
            opacity_logit: rng.gen_range(0.0..3.0),
            color: [rng.gen(), rng.gen(), rng.gen()],
        });
    }

    // Faint specks in front.
    while prims.len() < TOY_PRIMITIVES {
        prims.push(GaussianPrimitive {
            position: [
                rng.gen_range(-1.8..1.8),
                rng.gen_range(-1.5..1.5),
                rng.gen_range(-1.0..1.5),
            ],
            log_scale: [rng.gen_range(-3.5f64..-2.5); 3],
            rotation: random_rotation(&mut rng),
            opacity_logit: rng.gen_range(-5.0..-3.0),
            color: [rng.gen(), rng.gen(), rng.gen()],
        });
    }

    // Interleave so that storage order carries no information.
    let mut order: Vec<usize> = (0..prims.len()).collect();
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    let prims = order.into_iter().map(|i| prims[i].clone()).collect();
    GaussianScene::new(prims).expect("toy scene is valid")
}

/// A smooth reference image for the toy style.
pub fn toy_style_image() -> Image {
    Image::from_fn(32, 32, 3, |x, y, c| {
        let (u, v) = (x as f64 / 31.0, y as f64 / 31.0);
        match c {
            0 => 0.55 + 0.35 * (3.0 * u + v).sin(),
            1 => 0.35 + 0.15 * (2.0 * v).cos(),
            _ => 0.2 + 0.15 * u * v,
        }
    })
}

/// Smooth texture used on the plane.
pub fn plane_texture(x: f64, y: f64) -> [f64; 3] {
    [
        0.5 + 0.25 * (0.9 * x + 0.3 * y).sin(),
        0.5 + 0.25 * (0.7 * y - 0.2 * x).cos(),
        0.5 + 0.2 * (0.5 * x + 0.6 * y).sin(),
    ]
}

/// A fronto-parallel textured plane at `z = PLANE_DEPTH`.
pub fn plane_scene() -> GaussianScene {
    let step = 0.25;
    let mut prims = Vec::new();
    let (nx, ny) = (37, 29);
    for iy in 0..ny {
        for ix in 0..nx {
            let x = -4.5 + step * ix as f64;
            let y = -3.5 + step * iy as f64;
            prims.push(flat([x, y, PLANE_DEPTH], 0.2, 0.2, 4.0, plane_texture(x, y)));
        }
    }
    GaussianScene::new(prims).expect("plane scene is valid")
}

/// Cameras looking down `+z`, translated along `x` by `PLANE_BASELINE`.
pub fn plane_cameras(count: usize) -> Vec<Camera> {
    (0..count)
        .map(|i| {
            let x = (i as f64 - (count as f64 - 1.0) / 2.0) * PLANE_BASELINE;
            Camera {
                view_id: format!("p{i}"),
                fx: PLANE_FOCAL,
                fy: PLANE_FOCAL,
                cx: 31.5,
                cy: 31.5,
                width: 64,
                height: 64,
                rotation: Matrix3::identity(),
                translation: Vector3::new(-x, 0.0, 0.0),
            }
        })
        .collect()
}
