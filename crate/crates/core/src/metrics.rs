//! Warp-based multi-view consistency.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::align::{warp_feature, FeatureMap};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::scene::Camera;

pub use crate::loss::rmse;

pub const MIN_COVERAGE: f64 = 0.2;
pub const PROTOCOL: &str = "depth-warp";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairResult {
    pub view_a: String,
    pub view_b: String,
    pub interval: usize,
    /// `None` when nothing survived the warp.
    pub rmse: Option<f64>,
    pub coverage: f64,
    /// Set when coverage is below the threshold; such pairs are left out of
    /// the means.
    pub excluded: bool,
    /// Reserved for distances supplied by an external perceptual model.
    pub lpips: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub protocol: String,
    pub pairs: Vec<PairResult>,
    /// Mean RMSE per interval over included pairs.
    pub interval_means: BTreeMap<usize, Option<f64>>,
    pub short_mean: Option<f64>,
    pub long_mean: Option<f64>,
}

impl ConsistencyReport {
    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialization cannot fail")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConsistencyConfig {
    pub intervals: Vec<usize>,
    pub pairs_per_interval: usize,
    pub seed: u64,
    /// Depth test tolerance for occlusions; `None` disables the test.
    pub z_tolerance: Option<f64>,
}

impl Default for ConsistencyConfig {
    fn default() -> Self {
        Self {
            intervals: vec![2, 10],
            pairs_per_interval: 10,
            seed: 0,
            z_tolerance: None,
        }
    }
}

/// Evenly spaced start indices with a seeded offset.
pub fn select_pairs(cameras: usize, interval: usize, count: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
    if cameras < interval + 1 {
        return Err(Error::Argument(format!(
            "interval {interval} needs at least {} cameras, have {cameras}",
            interval + 1
        )));
    }
    let candidates = cameras - interval;
    if count >= candidates {
        return Ok((0..candidates).collect());
    }
    let stride = candidates as f64 / count as f64;
    let offset = rng.gen::<f64>() * stride;
    Ok((0..count)
        .map(|j| ((offset + j as f64 * stride).floor() as usize).min(candidates - 1))
        .collect())
}

/// Warps `image_a` into view `b` with `depth_a` and compares it with
/// `image_b` over the covered pixels.
pub fn pair_rmse(
    image_a: &Image,
    depth_a: &Image,
    cam_a: &Camera,
    image_b: &Image,
    depth_b: Option<&Image>,
    cam_b: &Camera,
    z_tolerance: f64,
) -> Result<(Option<f64>, f64)> {
    let warp = warp_feature(
        &FeatureMap::from_image(image_a),
        depth_a,
        cam_a,
        cam_b,
        depth_b,
        z_tolerance,
    )?;
    if warp.coverage == 0.0 {
        return Ok((None, 0.0));
    }
    let warped = warp.warped.to_image();
    let value = rmse(&warped, image_b, Some(&warp.warped.valid))?;
    Ok((Some(value), warp.coverage))
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = values.collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Consistency over camera pairs `(i, i + interval)` in trajectory order.
/// `images` and `depths` are parallel to `cameras`.
pub fn consistency(
    cameras: &[Camera],
    images: &[Image],
    depths: &[Image],
    config: &ConsistencyConfig,
) -> Result<ConsistencyReport> {
    if images.len() != cameras.len() || depths.len() != cameras.len() {
        return Err(Error::Shape(format!(
            "{} cameras but {} images and {} depth maps",
            cameras.len(),
            images.len(),
            depths.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut pairs = Vec::new();
    let mut interval_means = BTreeMap::new();
    for &interval in &config.intervals {
        let starts = select_pairs(cameras.len(), interval, config.pairs_per_interval, &mut rng)?;
        let mut results = Vec::with_capacity(starts.len());
        for i in starts {
            let j = i + interval;
            let (value, coverage) = pair_rmse(
                &images[i],
                &depths[i],
                &cameras[i],
                &images[j],
                config.z_tolerance.map(|_| &depths[j]),
                &cameras[j],
                config.z_tolerance.unwrap_or(0.0),
            )?;
            results.push(PairResult {
                view_a: cameras[i].view_id.clone(),
                view_b: cameras[j].view_id.clone(),
                interval,
                rmse: value,
                coverage,
                excluded: coverage < MIN_COVERAGE || value.is_none(),
                lpips: None,
            });
        }
        let m = mean(results.iter().filter(|p| !p.excluded).filter_map(|p| p.rmse));
        interval_means.insert(interval, m);
        pairs.extend(results);
    }
    let short_mean = config.intervals.iter().min().and_then(|k| interval_means[k]);
    let long_mean = config.intervals.iter().max().and_then(|k| interval_means[k]);
    Ok(ConsistencyReport {
        protocol: PROTOCOL.into(),
        pairs,
        interval_means,
        short_mean,
        long_mean,
    })
}
