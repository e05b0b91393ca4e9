//! Stylized target views and the manifest that lists them.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::render::{render_color, RenderConfig};
use crate::scene::{find_camera, Camera, GaussianScene};

pub const STD_FLOOR: f64 = 1e-4;
pub const MANIFEST_FILE: &str = "manifest.json";

/// A reference style image with its per-channel statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct StyleReference {
    pub style_id: String,
    pub image: Image,
    /// Per-channel `(mean, std)`, always recomputed from `image`.
    pub stats: Vec<(f64, f64)>,
}

impl StyleReference {
    pub fn new(style_id: impl Into<String>, image: Image) -> Result<Self> {
        if image.is_empty() {
            return Err(Error::Validation("style reference image is empty".into()));
        }
        if image.channels() != 3 {
            return Err(Error::Shape(format!(
                "style reference has {} channels, expected 3",
                image.channels()
            )));
        }
        let stats = image.channel_stats();
        Ok(Self {
            style_id: style_id.into(),
            image,
            stats,
        })
    }

    /// Loads a PNG or `.f32img`; the style id defaults to the file stem.
    pub fn load(path: impl AsRef<Path>, style_id: Option<&str>) -> Result<Self> {
        let path = path.as_ref();
        let id = match style_id {
            Some(s) => s.to_string(),
            None => path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "style".into()),
        };
        Self::new(id, Image::load(path)?)
    }
}

/// Per-channel statistics transfer onto the reference, clamped to `[0, 1]`.
pub fn procedural_stylize(view: &Image, reference: &StyleReference) -> Result<Image> {
    if view.is_empty() {
        return Err(Error::Validation("cannot stylize an empty image".into()));
    }
    if view.channels() != reference.stats.len() {
        return Err(Error::Shape(format!(
            "view has {} channels, reference has {}",
            view.channels(),
            reference.stats.len()
        )));
    }
    let src = view.channel_stats();
    let ch = view.channels();
    let mut out = view.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        let (mv, sv) = src[i % ch];
        let (mr, sr) = reference.stats[i % ch];
        *v = ((*v - mv) * (sr / sv.max(STD_FLOOR)) + mr).clamp(0.0, 1.0);
    }
    Ok(out)
}

/// Produces the stylized target for one rendered view.
pub trait Stylizer {
    fn style_id(&self) -> &str;
    fn stylize(&self, view_id: &str, render: &Image) -> Result<Image>;
}

pub struct Procedural(pub StyleReference);

impl Stylizer for Procedural {
    fn style_id(&self) -> &str {
        &self.0.style_id
    }

    fn stylize(&self, _view_id: &str, render: &Image) -> Result<Image> {
        procedural_stylize(render, &self.0)
    }
}

/// Reads targets produced elsewhere from `<dir>/<view_id>.png`.
pub struct External {
    pub style_id: String,
    pub dir: PathBuf,
}

impl Stylizer for External {
    fn style_id(&self) -> &str {
        &self.style_id
    }

    fn stylize(&self, view_id: &str, render: &Image) -> Result<Image> {
        let path = self.dir.join(format!("{view_id}.png"));
        if !path.is_file() {
            return Err(Error::Validation(format!(
                "external stylizer has no image for view {view_id} ({})",
                path.display()
            )));
        }
        let img = Image::load(&path)?;
        if img.width() != render.width() || img.height() != render.height() {
            return Err(Error::Shape(format!(
                "external image for view {view_id} is {}x{}, expected {}x{}",
                img.width(),
                img.height(),
                render.width(),
                render.height()
            )));
        }
        Ok(img)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Alignment {
    #[default]
    None,
    FeatureInjected,
    ContentCalibrated,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub view_id: String,
    /// Relative to the manifest's directory.
    pub path: String,
    pub anchor: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StyleTargetManifest {
    pub style_id: String,
    pub alignment: Alignment,
    pub entries: Vec<ManifestEntry>,
}

impl StyleTargetManifest {
    pub fn from_json_str(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::json("manifest", e))
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serialization cannot fail")
    }

    /// Exactly one anchor, unique view ids, each naming a camera.
    pub fn validate(&self, cameras: &[Camera]) -> Result<()> {
        let anchors = self.entries.iter().filter(|e| e.anchor).count();
        if anchors != 1 {
            return Err(Error::Validation(format!(
                "manifest has {anchors} anchor entries, expected exactly 1"
            )));
        }
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !seen.insert(e.view_id.as_str()) {
                return Err(Error::Validation(format!(
                    "manifest lists view {} twice",
                    e.view_id
                )));
            }
            if find_camera(cameras, &e.view_id).is_none() {
                return Err(Error::Validation(format!(
                    "manifest view {} has no camera",
                    e.view_id
                )));
            }
        }
        Ok(())
    }

    pub fn anchor_index(&self) -> Option<usize> {
        self.entries.iter().position(|e| e.anchor)
    }
}

/// A manifest with its decoded target images, parallel to `entries`.
#[derive(Clone, Debug, PartialEq)]
pub struct LoadedManifest {
    pub manifest: StyleTargetManifest,
    pub dir: PathBuf,
    pub images: Vec<Image>,
}

impl LoadedManifest {
    pub fn anchor(&self) -> usize {
        self.manifest.anchor_index().expect("validated manifest has an anchor")
    }

    pub fn target(&self, view_id: &str) -> Option<&Image> {
        self.manifest
            .entries
            .iter()
            .position(|e| e.view_id == view_id)
            .map(|i| &self.images[i])
    }

    /// Checks the manifest against cameras, including image sizes.
    pub fn validate(&self, cameras: &[Camera]) -> Result<()> {
        self.manifest.validate(cameras)?;
        for (e, img) in self.manifest.entries.iter().zip(&self.images) {
            let cam = find_camera(cameras, &e.view_id).expect("validated");
            if img.width() != cam.width as usize || img.height() != cam.height as usize {
                return Err(Error::Shape(format!(
                    "target for view {} is {}x{}, camera is {}x{}",
                    e.view_id,
                    img.width(),
                    img.height(),
                    cam.width,
                    cam.height
                )));
            }
        }
        Ok(())
    }

    /// Writes every image as PNG plus `manifest.json` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<PathBuf> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (e, img) in self.manifest.entries.iter().zip(&self.images) {
            img.save_png(dir.join(&e.path))?;
        }
        let path = dir.join(MANIFEST_FILE);
        std::fs::write(&path, self.manifest.to_json_string()).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

/// Loads a manifest and its images, validating against `cameras`.
pub fn load_manifest(path: impl AsRef<Path>, cameras: &[Camera]) -> Result<LoadedManifest> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest = StyleTargetManifest::from_json_str(&text)?;
    manifest.validate(cameras)?;
    let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut images = Vec::with_capacity(manifest.entries.len());
    for e in &manifest.entries {
        let p = dir.join(&e.path);
        if !p.is_file() {
            return Err(Error::Validation(format!(
                "target image for view {} is missing ({})",
                e.view_id,
                p.display()
            )));
        }
        let img = Image::load(&p)?;
        if img.channels() != 3 {
            return Err(Error::Shape(format!("target for view {} is not RGB", e.view_id)));
        }
        images.push(img);
    }
    let loaded = LoadedManifest {
        manifest,
        dir,
        images,
    };
    loaded.validate(cameras)?;
    Ok(loaded)
}

/// Renders every camera from `scene`, stylizes it, writes PNGs and the
/// manifest into `out_dir` and picks the anchor with a seeded RNG.
pub fn build_manifest(
    scene: &GaussianScene,
    cameras: &[Camera],
    stylizer: &dyn Stylizer,
    out_dir: impl AsRef<Path>,
    seed: u64,
    config: &RenderConfig,
) -> Result<LoadedManifest> {
    if cameras.is_empty() {
        return Err(Error::Argument("no cameras to stylize".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let anchor = rng.gen_range(0..cameras.len());
    let mut entries = Vec::with_capacity(cameras.len());
    let mut images = Vec::with_capacity(cameras.len());
    for (i, cam) in cameras.iter().enumerate() {
        let render = render_color(scene, cam, config);
        let styled = stylizer.stylize(&cam.view_id, &render)?;
        // Keep exactly what the PNG on disk will hold.
        images.push(Image::decode_png(&styled.encode_png()?)?);
        entries.push(ManifestEntry {
            view_id: cam.view_id.clone(),
            path: format!("{}.png", cam.view_id),
            anchor: i == anchor,
        });
    }
    let loaded = LoadedManifest {
        manifest: StyleTargetManifest {
            style_id: stylizer.style_id().to_string(),
            alignment: Alignment::None,
            entries,
        },
        dir: out_dir.as_ref().to_path_buf(),
        images,
    };
    loaded.manifest.validate(cameras)?;
    loaded.save(out_dir)?;
    Ok(loaded)
}
