//! CPU splatting renderer.
//!
//! Each primitive is projected with the affine (Jacobian) approximation of
//! perspective, sorted front to back by camera depth (ties by index), and
//! alpha-composited per pixel:
//!
//! ```text
//! C = sum_i c_i a_i T_i + T_end * background,   T_i = prod_{j<i} (1 - a_j)
//! a_i = opacity_i * exp(-0.5 d^T inv(cov2d_i) d)
//! ```
//!
//! Pixel `(x, y)` is sampled at integer coordinates `(x, y)`.

mod backward;
mod project;

pub use backward::{backward, SceneGradients};
pub(crate) use project::{project_scene, Projected};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::par;
use crate::scene::{Camera, GaussianScene};

/// Splats closer than this camera depth are culled.
pub const NEAR_PLANE: f64 = 0.01;

/// Condition number above which a projected covariance is treated as
/// degenerate.
pub const MAX_CONDITION: f64 = 1e12;

const ROW_BLOCKS: usize = 16;

#[derive(Clone, Debug, PartialEq)]
pub struct RenderConfig {
    pub alpha_cutoff: f64,
    pub transmittance_floor: f64,
    pub background: [f64; 3],
    /// Footprint extent in standard deviations (Mahalanobis radius).
    pub sigma_clip: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            alpha_cutoff: 1.0 / 255.0,
            transmittance_floor: 1e-4,
            background: [0.0; 3],
            sigma_clip: 3.0,
        }
    }
}

impl RenderConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha_cutoff > 0.0 && self.alpha_cutoff < 1.0) {
            return Err(Error::Argument("alpha_cutoff must be in (0, 1)".into()));
        }
        if !(self.transmittance_floor >= 0.0 && self.transmittance_floor < 1.0) {
            return Err(Error::Argument("transmittance_floor must be in [0, 1)".into()));
        }
        if !(self.sigma_clip > 0.0) {
            return Err(Error::Argument("sigma_clip must be > 0".into()));
        }
        Ok(())
    }
}

/// One primitive's contribution to one pixel.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HitRecord {
    pub primitive: u32,
    /// Linear pixel index `y * width + x`.
    pub pixel: u32,
    pub alpha: f64,
    /// Transmittance before this primitive.
    pub transmittance: f64,
}

impl HitRecord {
    pub fn weight(&self) -> f64 {
        self.alpha * self.transmittance
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RenderDiagnostics {
    pub behind_camera: usize,
    pub degenerate: usize,
}

#[derive(Clone, Debug)]
pub struct RenderOutput {
    pub color: Image,
    /// Alpha-blended camera depth; `+inf` where nothing was hit.
    pub depth: Image,
    /// Hits in pixel order, front to back within a pixel.
    pub hit_records: Vec<HitRecord>,
    pub per_pixel_weight_sum: Image,
    pub diagnostics: RenderDiagnostics,
}

impl RenderOutput {
    /// Sum of `alpha * T` per primitive over all pixels.
    pub fn weight_per_primitive(&self, count: usize) -> Vec<f64> {
        let mut out = vec![0.0; count];
        for h in &self.hit_records {
            out[h.primitive as usize] += h.weight();
        }
        out
    }
}

/// How hit contributions are weighted when accumulating importance.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum HitWeighting {
    /// The blending weight `alpha_i * T_i` actually used by the renderer.
    #[default]
    Blend,
    /// Raw opacity with raw-opacity transmittance, `sigma_i * prod (1 - sigma_j)`
    /// over the primitives hit before it.
    RawOpacity,
}

/// Per-pixel compositing visitor.
pub(crate) trait PixelVisitor {
    fn hit(&mut self, rank: usize, p: &Projected, alpha: f64, transmittance: f64, power: f64);
}

impl PixelVisitor for () {
    #[inline]
    fn hit(&mut self, _: usize, _: &Projected, _: f64, _: f64, _: f64) {}
}

/// Prepared view: projected primitives in depth order.
pub(crate) struct View<'a> {
    pub config: &'a RenderConfig,
    pub sorted: Vec<Projected>,
    pub diagnostics: RenderDiagnostics,
}

impl<'a> View<'a> {
    pub fn new(scene: &GaussianScene, camera: &Camera, config: &'a RenderConfig) -> Self {
        let (sorted, diagnostics) = project_scene(scene, camera, config);
        View {
            config,
            sorted,
            diagnostics,
        }
    }

    /// Ranks (indices into `sorted`) whose footprint touches any row in `rows`.
    pub fn rows_candidates(&self, rows: std::ops::Range<usize>) -> Vec<usize> {
        let (lo, hi) = (rows.start as i64, rows.end as i64 - 1);
        (0..self.sorted.len())
            .filter(|&r| {
                let b = &self.sorted[r].bbox;
                b.y0 <= hi && b.y1 >= lo
            })
            .collect()
    }

    /// Composites one pixel. Returns `(color, depth_sum, weight_sum, T_end)`
    /// where color excludes the background term.
    #[inline]
    pub fn composite<V: PixelVisitor>(
        &self,
        candidates: &[usize],
        x: usize,
        y: usize,
        visitor: &mut V,
    ) -> ([f64; 3], f64, f64, f64) {
        let (px, py) = (x as f64, y as f64);
        let (xi, yi) = (x as i64, y as i64);
        let clip = 0.5 * self.config.sigma_clip * self.config.sigma_clip;
        let mut t = 1.0;
        let mut color = [0.0; 3];
        let mut depth = 0.0;
        let mut wsum = 0.0;
        for &rank in candidates {
            let p = &self.sorted[rank];
            let b = &p.bbox;
            if xi < b.x0 || xi > b.x1 || yi < b.y0 || yi > b.y1 {
                continue;
            }
            let dx = px - p.mean[0];
            let dy = py - p.mean[1];
            let power = 0.5 * (p.conic[0] * dx * dx + p.conic[2] * dy * dy) + p.conic[1] * dx * dy;
            if power > clip || power < 0.0 {
                continue;
            }
            let alpha = p.opacity * (-power).exp();
            if alpha < self.config.alpha_cutoff {
                continue;
            }
            let w = alpha * t;
            for k in 0..3 {
                color[k] += p.color[k] * w;
            }
            depth += p.depth * w;
            wsum += w;
            visitor.hit(rank, p, alpha, t, power);
            t *= 1.0 - alpha;
            if t < self.config.transmittance_floor {
                break;
            }
        }
        (color, depth, wsum, t)
    }
}

struct HitCollector<'v> {
    pixel: u32,
    out: &'v mut Vec<HitRecord>,
}

impl PixelVisitor for HitCollector<'_> {
    #[inline]
    fn hit(&mut self, _: usize, p: &Projected, alpha: f64, transmittance: f64, _: f64) {
        self.out.push(HitRecord {
            primitive: p.index as u32,
            pixel: self.pixel,
            alpha,
            transmittance,
        });
    }
}

struct BlockOutput {
    color: Vec<f64>,
    depth: Vec<f64>,
    weight: Vec<f64>,
    hits: Vec<HitRecord>,
}

fn render_impl(
    scene: &GaussianScene,
    camera: &Camera,
    config: &RenderConfig,
    collect_hits: bool,
) -> RenderOutput {
    let view = View::new(scene, camera, config);
    let (w, h) = (camera.width as usize, camera.height as usize);
    let blocks = par::map_blocks(h, ROW_BLOCKS, |rows| {
        let candidates = view.rows_candidates(rows.clone());
        let n = rows.len() * w;
        let mut out = BlockOutput {
            color: Vec::with_capacity(n * 3),
            depth: Vec::with_capacity(n),
            weight: Vec::with_capacity(n),
            hits: Vec::new(),
        };
        for y in rows {
            let row: Vec<usize> = candidates
                .iter()
                .copied()
                .filter(|&r| {
                    let b = &view.sorted[r].bbox;
                    b.y0 <= y as i64 && b.y1 >= y as i64
                })
                .collect();
            for x in 0..w {
                let (c, dsum, wsum, t) = if collect_hits {
                    let mut v = HitCollector {
                        pixel: (y * w + x) as u32,
                        out: &mut out.hits,
                    };
                    view.composite(&row, x, y, &mut v)
                } else {
                    view.composite(&row, x, y, &mut ())
                };
                for k in 0..3 {
                    out.color.push(c[k] + t * config.background[k]);
                }
                out.depth.push(blend_depth(dsum, wsum));
                out.weight.push(wsum);
            }
        }
        out
    });

    let mut color = Vec::with_capacity(w * h * 3);
    let mut depth = Vec::with_capacity(w * h);
    let mut weight = Vec::with_capacity(w * h);
    let mut hits = Vec::new();
    for b in blocks {
        color.extend(b.color);
        depth.extend(b.depth);
        weight.extend(b.weight);
        hits.extend(b.hits);
    }
    RenderOutput {
        color: Image::from_vec(w, h, 3, color).expect("block sizes add up"),
        depth: Image::from_vec(w, h, 1, depth).expect("block sizes add up"),
        hit_records: hits,
        per_pixel_weight_sum: Image::from_vec(w, h, 1, weight).expect("block sizes add up"),
        diagnostics: view.diagnostics,
    }
}

/// Depth normalized by accumulated weight; invalid (`+inf`) when nothing hit.
pub const DEPTH_EPS: f64 = 1e-8;

fn blend_depth(depth_sum: f64, weight_sum: f64) -> f64 {
    if weight_sum > 0.0 {
        depth_sum / weight_sum.max(DEPTH_EPS)
    } else {
        f64::INFINITY
    }
}

/// Full render with hit records.
pub fn render(scene: &GaussianScene, camera: &Camera, config: &RenderConfig) -> RenderOutput {
    render_impl(scene, camera, config, true)
}

/// Color-only render (no hit records), used by optimization and serving.
pub fn render_color(scene: &GaussianScene, camera: &Camera, config: &RenderConfig) -> Image {
    render_impl(scene, camera, config, false).color
}

/// Color and depth without hit records.
pub fn render_color_depth(
    scene: &GaussianScene,
    camera: &Camera,
    config: &RenderConfig,
) -> (Image, Image) {
    let out = render_impl(scene, camera, config, false);
    (out.color, out.depth)
}

pub fn render_depth(scene: &GaussianScene, camera: &Camera, config: &RenderConfig) -> Image {
    render_impl(scene, camera, config, false).depth
}

struct ScoreVisitor<'a> {
    weighting: HitWeighting,
    raw_t: f64,
    scores: &'a mut [f64],
}

impl PixelVisitor for ScoreVisitor<'_> {
    #[inline]
    fn hit(&mut self, _: usize, p: &Projected, alpha: f64, transmittance: f64, _: f64) {
        match self.weighting {
            HitWeighting::Blend => self.scores[p.index] += alpha * transmittance,
            HitWeighting::RawOpacity => {
                self.scores[p.index] += p.opacity * self.raw_t;
                self.raw_t *= 1.0 - p.opacity;
            }
        }
    }
}

/// Accumulated hit weight of every primitive over every pixel of every view.
pub fn record_hits(
    scene: &GaussianScene,
    cameras: &[Camera],
    config: &RenderConfig,
    weighting: HitWeighting,
) -> Result<Vec<f64>> {
    if cameras.is_empty() {
        return Err(Error::Argument("record_hits needs at least one camera".into()));
    }
    let n = scene.len();
    let mut total = vec![0.0; n];
    for camera in cameras {
        let view = View::new(scene, camera, config);
        let w = camera.width as usize;
        let parts = par::map_blocks(camera.height as usize, ROW_BLOCKS, |rows| {
            let candidates = view.rows_candidates(rows.clone());
            let mut scores = vec![0.0; n];
            for y in rows {
                for x in 0..w {
                    let mut v = ScoreVisitor {
                        weighting,
                        raw_t: 1.0,
                        scores: &mut scores,
                    };
                    view.composite(&candidates, x, y, &mut v);
                }
            }
            scores
        });
        for part in parts {
            for (t, s) in total.iter_mut().zip(part) {
                *t += s;
            }
        }
    }
    Ok(total)
}
