//! Browser bindings over the toy fixture: fit a style field, render it at a
//! chosen intensity, prune the scene and preview depth warps between views.

use std::path::PathBuf;

use tunegs::align::{warp_feature, FeatureMap};
use tunegs::fixture::{toy_cameras, toy_scene, toy_style_image};
use tunegs::guidance::{train_stage1, train_stage2, TrainConfig};
use tunegs::importance::{compute_importance, filter_scene, ImportanceReport};
use tunegs::render::{render_color, render_color_depth, HitWeighting};
use tunegs::style::{compose, FieldFile, StyleOffsetField, StyleTuner};
use tunegs::stylizer::{procedural_stylize, Alignment, LoadedManifest, ManifestEntry, StyleReference, StyleTargetManifest};
use tunegs::{Camera, GaussianScene, Image, RenderConfig};
use wasm_bindgen::prelude::*;

fn js_err(e: tunegs::Error) -> JsError {
    JsError::new(&e.to_string())
}

fn rgba(img: &Image) -> Vec<u8> {
    let rgb = img.to_u8();
    let mut out = Vec::with_capacity(img.pixel_count() * 4);
    for px in rgb.chunks(3) {
        out.extend_from_slice(px);
        out.push(255);
    }
    out
}

#[wasm_bindgen]
pub struct Demo {
    scene: GaussianScene,
    cameras: Vec<Camera>,
    field: StyleOffsetField,
    tuner: StyleTuner,
    importance: Option<ImportanceReport>,
    config: RenderConfig,
}

impl Default for Demo {
    fn default() -> Self {
        let scene = toy_scene();
        let field = StyleOffsetField::zeros("toy", scene.len());
        Self {
            scene,
            cameras: toy_cameras(),
            field,
            tuner: StyleTuner::default(),
            importance: None,
            config: RenderConfig::default(),
        }
    }
}

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new() -> Demo {
        Self::default()
    }

    pub fn views(&self) -> usize {
        self.cameras.len()
    }

    pub fn width(&self) -> u32 {
        self.cameras[0].width
    }

    pub fn height(&self) -> u32 {
        self.cameras[0].height
    }

    pub fn primitives(&self) -> usize {
        self.scene.len()
    }

    pub fn beta_min(&self) -> f64 {
        self.tuner.a as f64
    }

    pub fn beta_max(&self) -> f64 {
        self.tuner.b as f64
    }

    /// Fits a fresh field to procedural targets of the built-in style image.
    /// View 0 is the anchor.
    pub fn fit(&mut self, stage1_steps: usize, stage2_steps: usize, seed: u64) -> Result<(), JsError> {
        let reference = StyleReference::new("toy", toy_style_image()).map_err(js_err)?;
        let mut images = Vec::with_capacity(self.cameras.len());
        for cam in &self.cameras {
            let base = render_color(&self.scene, cam, &self.config);
            let styled = procedural_stylize(&base, &reference).map_err(js_err)?;
            images.push(Image::decode_png(&styled.encode_png().map_err(js_err)?).map_err(js_err)?);
        }
        let manifest = LoadedManifest {
            manifest: StyleTargetManifest {
                style_id: "toy".into(),
                alignment: Alignment::None,
                entries: self
                    .cameras
                    .iter()
                    .enumerate()
                    .map(|(i, c)| ManifestEntry {
                        view_id: c.view_id.clone(),
                        path: format!("{}.png", c.view_id),
                        anchor: i == 0,
                    })
                    .collect(),
            },
            dir: PathBuf::new(),
            images,
        };
        let config = TrainConfig {
            stage1_steps,
            stage2_steps,
            seed,
            ..TrainConfig::default()
        };
        let mut field = StyleOffsetField::zeros("toy", self.scene.len());
        let mut tuner = StyleTuner::default();
        train_stage1(&self.scene, &self.cameras, &manifest, &mut field, &mut tuner, &config).map_err(js_err)?;
        train_stage2(&self.scene, &self.cameras, &manifest, &field, &mut tuner, &config).map_err(js_err)?;
        self.field = field;
        self.tuner = tuner;
        Ok(())
    }

    /// Replaces the field with a `.stylefield` file trained on the toy scene.
    pub fn load_field(&mut self, bytes: &[u8]) -> Result<(), JsError> {
        let file = FieldFile::decode(bytes).map_err(js_err)?;
        file.check_scene(&self.scene).map_err(js_err)?;
        self.field = file.field;
        self.tuner = file.tuner;
        Ok(())
    }

    pub fn field_bytes(&self) -> Vec<u8> {
        FieldFile {
            field: self.field.clone(),
            tuner: self.tuner.clone(),
            fingerprint: self.scene.fingerprint(),
        }
        .encode()
    }

    /// RGBA pixels of `view` stylized at intensity `beta`.
    pub fn render_beta(&self, view: usize, beta: f64) -> Result<Vec<u8>, JsError> {
        let cam = self.camera(view)?;
        let v = self.tuner.embedding_for(beta).map_err(js_err)?;
        let styled = compose(&self.scene, &self.field, &v, None).map_err(js_err)?;
        Ok(rgba(&render_color(&styled, cam, &self.config)))
    }

    /// RGBA pixels of the unstyled scene after keeping the top `keep`
    /// fraction of primitives by importance.
    pub fn render_filtered(&mut self, view: usize, keep: f64) -> Result<Vec<u8>, JsError> {
        let cam = self.camera(view)?.clone();
        if self.importance.is_none() {
            let report =
                compute_importance(&self.scene, &self.cameras, &self.config, HitWeighting::Blend).map_err(js_err)?;
            self.importance = Some(report);
        }
        let report = self.importance.as_ref().expect("computed above");
        let (kept, _) = filter_scene(&self.scene, report, keep).map_err(js_err)?;
        Ok(rgba(&render_color(&kept, &cam, &self.config)))
    }

    /// RGBA pixels of the base render of `src` warped into `dst` by depth.
    /// Cells nothing lands on are painted magenta.
    pub fn warp_preview(&self, src: usize, dst: usize) -> Result<Vec<u8>, JsError> {
        let (a, b) = (self.camera(src)?, self.camera(dst)?);
        let (color, depth) = render_color_depth(&self.scene, a, &self.config);
        let (_, dst_depth) = render_color_depth(&self.scene, b, &self.config);
        let warped = warp_feature(&FeatureMap::from_image(&color), &depth, a, b, Some(&dst_depth), 0.05)
            .map_err(js_err)?
            .warped;
        let mut img = warped.to_image();
        for cell in 0..warped.cells() {
            if !warped.valid[cell] {
                img.data_mut()[cell * 3..cell * 3 + 3].copy_from_slice(&[1.0, 0.0, 1.0]);
            }
        }
        Ok(rgba(&img))
    }
}

impl Demo {
    fn camera(&self, view: usize) -> Result<&Camera, JsError> {
        self.cameras
            .get(view)
            .ok_or_else(|| JsError::new(&format!("view {view} out of range")))
    }
}
