//! Cross-view alignment: depth-based feature warping and mutual attention
//! over concatenated warped and current keys.

use std::path::Path;

use nalgebra::Point3;

use crate::error::{Error, Result};
use crate::image::Image;
use crate::render::{render_depth, RenderConfig, NEAR_PLANE};
use crate::scene::{find_camera, Camera, GaussianScene};
use crate::stylizer::{Alignment, LoadedManifest};

/// A grid of feature vectors with a validity flag per cell. Invalid cells
/// hold zeros.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub width: usize,
    pub height: usize,
    pub dim: usize,
    pub data: Vec<f64>,
    pub valid: Vec<bool>,
}

impl FeatureMap {
    pub fn new(width: usize, height: usize, dim: usize) -> Self {
        Self {
            width,
            height,
            dim,
            data: vec![0.0; width * height * dim],
            valid: vec![false; width * height],
        }
    }

    /// Every pixel becomes a valid cell with `channels` features.
    pub fn from_image(img: &Image) -> Self {
        Self {
            width: img.width(),
            height: img.height(),
            dim: img.channels(),
            data: img.data().to_vec(),
            valid: vec![true; img.pixel_count()],
        }
    }

    pub fn to_image(&self) -> Image {
        Image::from_vec(self.width, self.height, self.dim, self.data.clone())
            .expect("feature map buffer matches its shape")
    }

    /// Validity as a one-channel `{0, 1}` image.
    pub fn validity_image(&self) -> Image {
        let data = self.valid.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect();
        Image::from_vec(self.width, self.height, 1, data).expect("validity matches its shape")
    }

    pub fn cells(&self) -> usize {
        self.width * self.height
    }

    pub fn cell(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    fn cell_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn coverage(&self) -> f64 {
        if self.valid.is_empty() {
            return 0.0;
        }
        self.valid.iter().filter(|&&v| v).count() as f64 / self.valid.len() as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WarpResult {
    pub warped: FeatureMap,
    pub coverage: f64,
    /// Camera-space depth of each warped cell in the destination view.
    pub depth: Vec<f64>,
}

fn check_grid(map_w: usize, map_h: usize, cam: &Camera, what: &str) -> Result<()> {
    if map_w != cam.width as usize || map_h != cam.height as usize {
        return Err(Error::Shape(format!(
            "{what} grid is {map_w}x{map_h} but camera {} is {}x{}",
            cam.view_id, cam.width, cam.height
        )));
    }
    Ok(())
}

/// Forward-warps `src` into `dst_cam`'s grid using `src_depth`. Collisions
/// keep the nearest point. With `dst_depth`, cells whose warped depth differs
/// from it by more than `z_tolerance` are invalid.
pub fn warp_feature(
    src: &FeatureMap,
    src_depth: &Image,
    src_cam: &Camera,
    dst_cam: &Camera,
    dst_depth: Option<&Image>,
    z_tolerance: f64,
) -> Result<WarpResult> {
    check_grid(src.width, src.height, src_cam, "source feature")?;
    check_grid(src_depth.width(), src_depth.height(), src_cam, "source depth")?;
    if src_depth.channels() != 1 {
        return Err(Error::Shape("depth must have one channel".into()));
    }
    let (dw, dh) = (dst_cam.width as usize, dst_cam.height as usize);
    if let Some(d) = dst_depth {
        check_grid(d.width(), d.height(), dst_cam, "destination depth")?;
    }
    let mut out = FeatureMap::new(dw, dh, src.dim);
    let mut zbuf = vec![f64::INFINITY; dw * dh];
    for y in 0..src.height {
        for x in 0..src.width {
            let i = y * src.width + x;
            let z = src_depth.get(x, y, 0);
            if !src.valid[i] || !z.is_finite() || z <= 0.0 {
                continue;
            }
            let pc = Point3::new(
                (x as f64 - src_cam.cx) / src_cam.fx * z,
                (y as f64 - src_cam.cy) / src_cam.fy * z,
                z,
            );
            let q = dst_cam.world_to_camera(&src_cam.camera_to_world(&pc));
            if q.z <= NEAR_PLANE {
                continue;
            }
            let u = (dst_cam.fx * q.x / q.z + dst_cam.cx).round();
            let v = (dst_cam.fy * q.y / q.z + dst_cam.cy).round();
            if !(u >= 0.0 && v >= 0.0 && u < dw as f64 && v < dh as f64) {
                continue;
            }
            let j = v as usize * dw + u as usize;
            if q.z < zbuf[j] {
                zbuf[j] = q.z;
                out.cell_mut(j).copy_from_slice(src.cell(i));
                out.valid[j] = true;
            }
        }
    }
    if let Some(d) = dst_depth {
        for j in 0..dw * dh {
            if out.valid[j] && !((zbuf[j] - d.data()[j]).abs() <= z_tolerance) {
                out.valid[j] = false;
                out.cell_mut(j).fill(0.0);
            }
        }
    }
    for j in 0..dw * dh {
        if !out.valid[j] {
            zbuf[j] = f64::INFINITY;
        }
    }
    let coverage = out.coverage();
    Ok(WarpResult {
        warped: out,
        coverage,
        depth: zbuf,
    })
}

/// Key/value rows: valid warped cells first, then valid current cells.
fn gather<'a>(
    k_cur: &'a FeatureMap,
    v_cur: &'a FeatureMap,
    k_warp: &'a WarpResult,
    v_warp: &'a WarpResult,
) -> (Vec<&'a [f64]>, Vec<&'a [f64]>) {
    let mut keys = Vec::new();
    let mut values = Vec::new();
    let kw = &k_warp.warped;
    let vw = &v_warp.warped;
    for i in 0..kw.cells() {
        if kw.valid[i] && vw.valid[i] {
            keys.push(kw.cell(i));
            values.push(vw.cell(i));
        }
    }
    for i in 0..k_cur.cells() {
        if k_cur.valid[i] && v_cur.valid[i] {
            keys.push(k_cur.cell(i));
            values.push(v_cur.cell(i));
        }
    }
    (keys, values)
}

fn check_dims(
    q: &FeatureMap,
    k_cur: &FeatureMap,
    v_cur: &FeatureMap,
    k_warp: &WarpResult,
    v_warp: &WarpResult,
) -> Result<()> {
    let dims = [q.dim, k_cur.dim, v_cur.dim, k_warp.warped.dim, v_warp.warped.dim];
    if dims.iter().any(|&d| d != q.dim) || q.dim == 0 {
        return Err(Error::Shape(format!("attention feature dims differ: {dims:?}")));
    }
    if k_cur.cells() != v_cur.cells() || k_warp.warped.cells() != v_warp.warped.cells() {
        return Err(Error::Shape("key and value grids differ in size".into()));
    }
    Ok(())
}

/// Softmax weights of one query over `keys`, with max subtraction.
pub fn attention_row(query: &[f64], keys: &[&[f64]]) -> Vec<f64> {
    let scale = 1.0 / (query.len() as f64).sqrt();
    let logits: Vec<f64> = keys
        .iter()
        .map(|k| k.iter().zip(query).map(|(a, b)| a * b).sum::<f64>() * scale)
        .collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut w: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = w.iter().sum();
    w.iter_mut().for_each(|x| *x /= sum);
    w
}

/// `softmax(Q K^T / sqrt(d)) V` where keys and values are the valid warped
/// cells followed by the current cells. Invalid queries give zero rows.
pub fn mutual_attention(
    q: &FeatureMap,
    k_cur: &FeatureMap,
    v_cur: &FeatureMap,
    k_warp: &WarpResult,
    v_warp: &WarpResult,
) -> Result<FeatureMap> {
    check_dims(q, k_cur, v_cur, k_warp, v_warp)?;
    let (keys, values) = gather(k_cur, v_cur, k_warp, v_warp);
    let mut out = FeatureMap::new(q.width, q.height, q.dim);
    if keys.is_empty() {
        return Ok(out);
    }
    for i in 0..q.cells() {
        if !q.valid[i] {
            continue;
        }
        let w = attention_row(q.cell(i), &keys);
        let row = out.cell_mut(i);
        for (wk, v) in w.iter().zip(&values) {
            for (o, x) in row.iter_mut().zip(*v) {
                *o += wk * x;
            }
        }
        out.valid[i] = true;
    }
    Ok(out)
}

/// The full attention matrix, one row per valid query.
pub fn mutual_attention_weights(
    q: &FeatureMap,
    k_cur: &FeatureMap,
    v_cur: &FeatureMap,
    k_warp: &WarpResult,
    v_warp: &WarpResult,
) -> Result<Vec<Vec<f64>>> {
    check_dims(q, k_cur, v_cur, k_warp, v_warp)?;
    let (keys, _) = gather(k_cur, v_cur, k_warp, v_warp);
    Ok((0..q.cells())
        .filter(|&i| q.valid[i])
        .map(|i| attention_row(q.cell(i), &keys))
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct AlignConfig {
    pub feature_scale: u32,
    pub lambda: f64,
    /// Depth test tolerance; `None` uses 1% of the farthest rendered depth.
    pub z_tolerance: Option<f64>,
    pub render: RenderConfig,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self {
            feature_scale: 4,
            lambda: 0.5,
            z_tolerance: None,
            render: RenderConfig::default(),
        }
    }
}

fn finite_max(img: &Image) -> Option<f64> {
    img.data()
        .iter()
        .copied()
        .filter(|v| v.is_finite())
        .fold(None, |m, v| Some(m.map_or(v, |m: f64| m.max(v))))
}

/// Pulls every non-anchor target toward the anchor: the anchor's feature
/// grid is warped into each view, attended together with the view's own
/// features, upsampled and blended in with weight `lambda` on covered cells.
/// Images are written to `out_dir` with the manifest marked
/// content-calibrated.
pub fn align_manifest(
    loaded: &LoadedManifest,
    scene: &GaussianScene,
    cameras: &[Camera],
    config: &AlignConfig,
    out_dir: impl AsRef<Path>,
) -> Result<LoadedManifest> {
    if loaded.manifest.alignment != Alignment::None {
        return Err(Error::Validation("manifest is already aligned".into()));
    }
    if config.feature_scale == 0 {
        return Err(Error::Argument("feature scale must be at least 1".into()));
    }
    if !(0.0..=1.0).contains(&config.lambda) {
        return Err(Error::Argument(format!("blend weight {} not in [0, 1]", config.lambda)));
    }
    loaded.validate(cameras)?;
    let s = config.feature_scale;
    let anchor = loaded.anchor();
    let anchor_entry = &loaded.manifest.entries[anchor];
    let anchor_cam = find_camera(cameras, &anchor_entry.view_id)
        .expect("validated")
        .downscaled(s);
    let anchor_depth = render_depth(scene, &anchor_cam, &config.render);
    let far = finite_max(&anchor_depth).ok_or_else(|| {
        Error::Validation(format!(
            "anchor view {} has no rendered depth",
            anchor_entry.view_id
        ))
    })?;
    let tol = config.z_tolerance.unwrap_or(0.01 * far);
    let anchor_feat = FeatureMap::from_image(&loaded.images[anchor].downsample(s as usize));

    let mut images = Vec::with_capacity(loaded.images.len());
    for (i, (entry, img)) in loaded.manifest.entries.iter().zip(&loaded.images).enumerate() {
        if i == anchor || config.lambda == 0.0 {
            images.push(img.clone());
            continue;
        }
        let cam = find_camera(cameras, &entry.view_id).expect("validated").downscaled(s);
        let depth = render_depth(scene, &cam, &config.render);
        let own = FeatureMap::from_image(&img.downsample(s as usize));
        let warp = warp_feature(&anchor_feat, &anchor_depth, &anchor_cam, &cam, Some(&depth), tol)?;
        let attn = mutual_attention(&own, &own, &own, &warp, &warp)?;
        let mut out = img.clone();
        let ch = img.channels();
        for y in 0..img.height() {
            for x in 0..img.width() {
                let cell = (y / s as usize) * own.width + x / s as usize;
                if !warp.warped.valid[cell] {
                    continue;
                }
                let a = attn.cell(cell);
                let px = out.pixel_mut(x, y);
                for c in 0..ch {
                    px[c] = ((1.0 - config.lambda) * px[c] + config.lambda * a[c]).clamp(0.0, 1.0);
                }
            }
        }
        images.push(Image::decode_png(&out.encode_png()?)?);
    }
    let mut manifest = loaded.manifest.clone();
    manifest.alignment = Alignment::ContentCalibrated;
    let aligned = LoadedManifest {
        manifest,
        dir: out_dir.as_ref().to_path_buf(),
        images,
    };
    aligned.save(out_dir)?;
    Ok(aligned)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{Matrix3, Vector3};

    fn cam(id: &str, tx: f64) -> Camera {
        Camera {
            view_id: id.into(),
            fx: 10.0,
            fy: 10.0,
            cx: 3.5,
            cy: 3.5,
            width: 8,
            height: 8,
            rotation: Matrix3::identity(),
            translation: Vector3::new(tx, 0.0, 0.0),
        }
    }

    fn ramp() -> FeatureMap {
        FeatureMap::from_image(&Image::from_fn(8, 8, 2, |x, y, c| (x + 8 * y + c) as f64))
    }

    #[test]
    fn identity_warp() {
        let src = ramp();
        let depth = Image::filled(8, 8, 1, 5.0);
        let w = warp_feature(&src, &depth, &cam("a", 0.0), &cam("a", 0.0), None, 0.0).unwrap();
        assert_eq!(w.warped, src);
        assert_eq!(w.coverage, 1.0);
    }

    #[test]
    fn translation_shifts_by_disparity() {
        let src = ramp();
        let depth = Image::filled(8, 8, 1, 5.0);
        // Camera translation -1 moves the scene by fx * 1 / 5 = 2 px.
        let w = warp_feature(&src, &depth, &cam("a", 0.0), &cam("b", 1.0), None, 0.0).unwrap();
        for y in 0..8 {
            for x in 0..8 {
                let j = y * 8 + x;
                if x >= 2 {
                    assert!(w.warped.valid[j]);
                    assert_eq!(w.warped.cell(j), src.cell(y * 8 + x - 2));
                } else {
                    assert!(!w.warped.valid[j]);
                    assert_eq!(w.warped.cell(j), &[0.0, 0.0]);
                }
            }
        }
        assert!((w.coverage - 0.75).abs() < 1e-12);
    }

    #[test]
    fn behind_destination_is_dropped() {
        let src = ramp();
        let depth = Image::filled(8, 8, 1, 1.0);
        let mut dst = cam("b", 0.0);
        dst.translation = Vector3::new(0.0, 0.0, -2.0);
        let w = warp_feature(&src, &depth, &cam("a", 0.0), &dst, None, 0.0).unwrap();
        assert_eq!(w.coverage, 0.0);
    }

    #[test]
    fn depth_test_invalidates_mismatch() {
        let src = ramp();
        let depth = Image::filled(8, 8, 1, 5.0);
        let dst_depth = Image::filled(8, 8, 1, 4.0);
        let c = cam("a", 0.0);
        let w = warp_feature(&src, &depth, &c, &c, Some(&dst_depth), 0.5).unwrap();
        assert_eq!(w.coverage, 0.0);
        let w = warp_feature(&src, &depth, &c, &c, Some(&dst_depth), 1.5).unwrap();
        assert_eq!(w.coverage, 1.0);
    }

    #[test]
    fn grid_mismatch_is_error() {
        let src = ramp();
        let depth = Image::filled(8, 8, 1, 5.0);
        let mut c = cam("a", 0.0);
        c.width = 7;
        assert!(warp_feature(&src, &depth, &c, &cam("b", 0.0), None, 0.0).is_err());
    }

    #[test]
    fn empty_warp_is_self_attention() {
        let f = ramp();
        let mut empty = FeatureMap::new(8, 8, 2);
        empty.valid.fill(false);
        let warp = WarpResult {
            warped: empty,
            coverage: 0.0,
            depth: vec![f64::INFINITY; 64],
        };
        let with = mutual_attention(&f, &f, &f, &warp, &warp).unwrap();
        let identity = warp_feature(&f, &Image::filled(8, 8, 1, 1.0), &cam("a", 0.0), &cam("a", 0.0), None, 0.0)
            .unwrap();
        let dup = mutual_attention(&f, &f, &f, &identity, &identity).unwrap();
        for (a, b) in with.data.iter().zip(&dup.data) {
            assert!((a - b).abs() < 1e-6);
        }
        let bad = FeatureMap::new(8, 8, 3);
        assert!(mutual_attention(&bad, &f, &f, &warp, &warp).is_err());
    }
}
