//! Importance scoring and pruning of redundant primitives.
//!
//! A primitive's score is its accumulated blending contribution over every
//! pixel of every training view. Primitives that are rarely hit, nearly
//! transparent or occluded score low and are removed before style fields are
//! attached.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::render::{record_hits, HitWeighting, RenderConfig};
use crate::scene::{Camera, GaussianScene};

pub const DEFAULT_KEEP: f64 = 0.5;

#[derive(Clone, Debug, PartialEq)]
pub struct ImportanceReport {
    pub scores: Vec<f64>,
    /// Primitive indices by descending score, ties by index.
    pub ranking: Vec<usize>,
    pub kept_fraction: f64,
}

pub fn compute_importance(
    scene: &GaussianScene,
    cameras: &[Camera],
    config: &RenderConfig,
    weighting: HitWeighting,
) -> Result<ImportanceReport> {
    let scores = record_hits(scene, cameras, config, weighting)?;
    Ok(ImportanceReport::from_scores(scores))
}

impl ImportanceReport {
    pub fn from_scores(scores: Vec<f64>) -> Self {
        let mut ranking: Vec<usize> = (0..scores.len()).collect();
        ranking.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        Self {
            scores,
            ranking,
            kept_fraction: 1.0,
        }
    }
}

/// Maps old primitive indices to new ones; `None` for removed primitives.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IndexMap {
    pub old_to_new: Vec<Option<usize>>,
}

impl IndexMap {
    pub fn identity(n: usize) -> Self {
        Self {
            old_to_new: (0..n).map(Some).collect(),
        }
    }

    /// Translates indices, dropping removed ones.
    pub fn translate(&self, indices: &[usize]) -> Vec<usize> {
        indices
            .iter()
            .filter_map(|&i| self.old_to_new.get(i).copied().flatten())
            .collect()
    }

    pub fn to_json_string(&self) -> String {
        #[derive(Serialize)]
        struct File {
            old_to_new: Vec<i64>,
            #[serde(rename = "-1 means removed")]
            note: bool,
        }
        let f = File {
            old_to_new: self
                .old_to_new
                .iter()
                .map(|v| v.map_or(-1, |i| i as i64))
                .collect(),
            note: true,
        };
        serde_json::to_string(&f).expect("index map serialization cannot fail")
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct File {
            old_to_new: Vec<i64>,
        }
        let f: File = serde_json::from_str(text).map_err(|e| Error::json("index map", e))?;
        Ok(Self {
            old_to_new: f
                .old_to_new
                .into_iter()
                .map(|v| usize::try_from(v).ok())
                .collect(),
        })
    }
}

/// Keeps the `ceil(keep * N)` best-ranked primitives in their original
/// relative order.
pub fn filter_scene(
    scene: &GaussianScene,
    report: &ImportanceReport,
    keep: f64,
) -> Result<(GaussianScene, IndexMap)> {
    if !(keep > 0.0 && keep <= 1.0) {
        return Err(Error::Argument(format!("keep fraction {keep} not in (0, 1]")));
    }
    let n = scene.len();
    if report.scores.len() != n || report.ranking.len() != n {
        return Err(Error::Shape(format!(
            "importance report covers {} primitives, scene has {n}",
            report.scores.len()
        )));
    }
    let count = ((keep * n as f64).ceil() as usize).clamp(1, n);
    let mut selected = vec![false; n];
    for &i in &report.ranking[..count] {
        selected[i] = true;
    }
    let mut old_to_new = vec![None; n];
    let mut prims = Vec::with_capacity(count);
    for (i, p) in scene.primitives().iter().enumerate() {
        if selected[i] {
            old_to_new[i] = Some(prims.len());
            prims.push(p.clone());
        }
    }
    Ok((
        GaussianScene::from_primitives_unchecked(prims),
        IndexMap { old_to_new },
    ))
}

/// Keeps a uniformly random subset of the same size, for comparison.
pub fn random_subset(scene: &GaussianScene, keep: f64, rng: &mut impl rand::Rng) -> GaussianScene {
    use rand::seq::index::sample;
    let n = scene.len();
    let count = ((keep * n as f64).ceil() as usize).clamp(1, n);
    let mut idx = sample(rng, n, count).into_vec();
    idx.sort_unstable();
    GaussianScene::from_primitives_unchecked(
        idx.into_iter().map(|i| scene.primitives()[i].clone()).collect(),
    )
}
