//! Two-stage fitting of a style field and its tuner.
//!
//! Stage 1 fits the offsets and the top tuner embedding to the stylized
//! targets. Stage 2 freezes both and trains the interior embeddings with a
//! loss that blends the base render and the target by the sampled intensity.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::loss::{full_loss, tunable_loss, LossReport, Perceptual, Stage};
use crate::optim::{Adam, AdamConfig};
use crate::par;
use crate::render::{backward, render_color, RenderConfig, SceneGradients};
use crate::scene::{find_camera, Camera, GaussianScene};
use crate::style::{
    compose, compose_backward, StyleOffsetField, StyleTuner, CHANNELS, COLOR, LOG_SCALE, OPACITY,
    POSITION, ROTATION,
};
use crate::stylizer::LoadedManifest;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LearningRates {
    pub position: f64,
    pub log_scale: f64,
    pub rotation: f64,
    pub opacity_logit: f64,
    pub color: f64,
    pub embeddings: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            position: 1e-4,
            log_scale: 1e-3,
            rotation: 1e-4,
            opacity_logit: 5e-2,
            color: 1e-2,
            embeddings: 1e-2,
        }
    }
}

impl LearningRates {
    pub fn for_channel(&self, k: usize) -> f64 {
        match k {
            k if POSITION.contains(&k) => self.position,
            k if LOG_SCALE.contains(&k) => self.log_scale,
            k if ROTATION.contains(&k) => self.rotation,
            OPACITY => self.opacity_logit,
            k if COLOR.contains(&k) => self.color,
            _ => unreachable!("channel {k} out of range"),
        }
    }

    fn validate(&self) -> Result<()> {
        let all = [
            self.position,
            self.log_scale,
            self.rotation,
            self.opacity_logit,
            self.color,
            self.embeddings,
        ];
        if all.iter().all(|&r| r > 0.0 && r.is_finite()) {
            Ok(())
        } else {
            Err(Error::Argument("learning rates must be positive".into()))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub stage1_steps: usize,
    pub stage2_steps: usize,
    pub learning_rates: LearningRates,
    pub perceptual_weight: f64,
    pub perceptual: Perceptual,
    pub seed: u64,
    pub views_per_step: usize,
    pub render: RenderConfig,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage1_steps: 2000,
            stage2_steps: 2000,
            learning_rates: LearningRates::default(),
            perceptual_weight: 1.0,
            perceptual: Perceptual::MsSsim,
            seed: 0,
            views_per_step: 1,
            render: RenderConfig::default(),
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        self.learning_rates.validate()?;
        self.render.validate()?;
        if self.views_per_step == 0 {
            return Err(Error::Argument("views_per_step must be at least 1".into()));
        }
        if !(self.perceptual_weight >= 0.0 && self.perceptual_weight.is_finite()) {
            return Err(Error::Argument("perceptual weight must be non-negative".into()));
        }
        Ok(())
    }
}

/// One row of the loss trace.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub stage: u8,
    pub beta: f64,
    pub l1: f64,
    pub perceptual: f64,
    pub total: f64,
}

impl TraceRow {
    fn new(step: usize, r: &LossReport) -> Self {
        Self {
            step,
            stage: r.stage.number(),
            beta: r.beta_used,
            l1: r.l1,
            perceptual: r.perceptual,
            total: r.total,
        }
    }
}

pub fn write_trace_csv(rows: &[TraceRow], mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "step,stage,beta,l1,perceptual,total")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            r.step, r.stage, r.beta, r.l1, r.perceptual, r.total
        )?;
    }
    Ok(())
}

pub fn save_trace_csv(rows: &[TraceRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(f);
    write_trace_csv(rows, &mut w)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

struct View<'a> {
    camera: &'a Camera,
    target: &'a Image,
}

fn training_views<'a>(
    scene: &GaussianScene,
    cameras: &'a [Camera],
    manifest: &'a LoadedManifest,
    field: &StyleOffsetField,
) -> Result<Vec<View<'a>>> {
    manifest.validate(cameras)?;
    if field.len() != scene.len() {
        return Err(Error::Shape(format!(
            "style field has {} rows, scene has {} primitives",
            field.len(),
            scene.len()
        )));
    }
    if manifest.images.is_empty() {
        return Err(Error::Validation("manifest has no targets".into()));
    }
    Ok(manifest
        .manifest
        .entries
        .iter()
        .zip(&manifest.images)
        .map(|(e, target)| View {
            camera: find_camera(cameras, &e.view_id).expect("validated"),
            target,
        })
        .collect())
}

fn average(reports: &[LossReport]) -> LossReport {
    let n = reports.len() as f64;
    let mut r = reports[0];
    r.l1 = reports.iter().map(|x| x.l1).sum::<f64>() / n;
    r.perceptual = reports.iter().map(|x| x.perceptual).sum::<f64>() / n;
    r.total = reports.iter().map(|x| x.total).sum::<f64>() / n;
    r
}

fn scale_image(img: &mut Image, s: f64) {
    img.data_mut().iter_mut().for_each(|v| *v *= s);
}

fn stage_rng(seed: u64, stage: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stage);
    rng
}

/// Full-style fitting. Updates the offsets and the top embedding only.
pub fn train_stage1(
    scene: &GaussianScene,
    cameras: &[Camera],
    manifest: &LoadedManifest,
    field: &mut StyleOffsetField,
    tuner: &mut StyleTuner,
    config: &TrainConfig,
) -> Result<Vec<TraceRow>> {
    config.validate()?;
    let views = training_views(scene, cameras, manifest, field)?;
    let top = tuner.levels() - 1;
    let lr = config.learning_rates;
    let mut rng = stage_rng(config.seed, 1);
    let mut adam_offsets = Adam::new(field.as_slice().len(), config.adam);
    let mut adam_top = Adam::new(CHANNELS, config.adam);
    let mut trace = Vec::with_capacity(config.stage1_steps);
    for step in 0..config.stage1_steps {
        let v = tuner.embedding(top).map(f64::from);
        let composed = compose(scene, field, &v, None)?;
        let mut grads = SceneGradients::zeros(scene.len());
        let mut reports = Vec::with_capacity(config.views_per_step);
        for _ in 0..config.views_per_step {
            let view = &views[rng.gen_range(0..views.len())];
            let render = render_color(&composed, view.camera, &config.render);
            let mut eval = full_loss(
                &view.camera.view_id,
                &render,
                view.target,
                &config.perceptual,
                config.perceptual_weight,
                Stage::Stage1,
            )?;
            scale_image(&mut eval.grad, 1.0 / config.views_per_step as f64);
            grads.add_assign(&backward(&composed, view.camera, &config.render, &eval.grad)?);
            reports.push(eval.report);
        }
        let cg = compose_backward(scene, field, &v, &grads)?;
        adam_offsets.step(field.as_mut_slice(), &cg.offsets, |i| lr.for_channel(i % CHANNELS));
        adam_top.step(tuner.embedding_mut(top)?, &cg.gain, |_| lr.embeddings);
        trace.push(TraceRow::new(step, &average(&reports)));
    }
    tuner.trainable[top] = false;
    Ok(trace)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stage2Outcome {
    pub trace: Vec<TraceRow>,
    /// Number of updates each embedding received.
    pub bucket_updates: Vec<usize>,
}

/// Samples an intensity inside the interior buckets `1..=Z-2` and returns it
/// with its bucket.
pub fn sample_interior_beta(tuner: &StyleTuner, rng: &mut impl Rng) -> (f64, usize) {
    let (a, b) = (tuner.a as f64, tuner.b as f64);
    let q = tuner.quantum();
    let u: f64 = rng.gen();
    let beta = b - q - u * (b - a - 2.0 * q);
    let z = tuner
        .staircase(beta)
        .expect("interior beta is in range")
        .clamp(1, tuner.levels() - 2);
    (beta, z)
}

/// Tunable fitting of the interior embeddings. Offsets and the two endpoint
/// embeddings are left untouched.
pub fn train_stage2(
    scene: &GaussianScene,
    cameras: &[Camera],
    manifest: &LoadedManifest,
    field: &StyleOffsetField,
    tuner: &mut StyleTuner,
    config: &TrainConfig,
) -> Result<Stage2Outcome> {
    config.validate()?;
    let levels = tuner.levels();
    let mut outcome = Stage2Outcome {
        trace: Vec::with_capacity(config.stage2_steps),
        bucket_updates: vec![0; levels],
    };
    if levels < 3 {
        log::warn!("tuner has {levels} levels and no interior embedding to train");
        return Ok(outcome);
    }
    let views = training_views(scene, cameras, manifest, field)?;
    let base_renders: Vec<Image> =
        par::map_items(&views, |v| render_color(scene, v.camera, &config.render));
    let lr = config.learning_rates.embeddings;
    let (a, b) = (tuner.a as f64, tuner.b as f64);
    let mut rng = stage_rng(config.seed, 2);
    let mut adams = vec![Adam::new(CHANNELS, config.adam); levels];
    for step in 0..config.stage2_steps {
        let (beta, z) = sample_interior_beta(tuner, &mut rng);
        let weight = (beta - a) / (b - a);
        let v = tuner.embedding(z).map(f64::from);
        let composed = compose(scene, field, &v, None)?;
        let mut grads = SceneGradients::zeros(scene.len());
        let mut reports = Vec::with_capacity(config.views_per_step);
        for _ in 0..config.views_per_step {
            let k = rng.gen_range(0..views.len());
            let view = &views[k];
            let render = render_color(&composed, view.camera, &config.render);
            let mut eval = tunable_loss(
                &view.camera.view_id,
                &render,
                &base_renders[k],
                view.target,
                weight,
                &config.perceptual,
                config.perceptual_weight,
            )?;
            eval.report.beta_used = beta;
            scale_image(&mut eval.grad, 1.0 / config.views_per_step as f64);
            grads.add_assign(&backward(&composed, view.camera, &config.render, &eval.grad)?);
            reports.push(eval.report);
        }
        let cg = compose_backward(scene, field, &v, &grads)?;
        adams[z].step(tuner.embedding_mut(z)?, &cg.gain, |_| lr);
        outcome.bucket_updates[z] += 1;
        outcome.trace.push(TraceRow::new(step, &average(&reports)));
    }
    Ok(outcome)
}

/// Stage 1 followed by stage 2 on a fresh field and tuner.
pub fn fit(
    scene: &GaussianScene,
    cameras: &[Camera],
    manifest: &LoadedManifest,
    tuner: StyleTuner,
    config: &TrainConfig,
) -> Result<(StyleOffsetField, StyleTuner, Vec<TraceRow>)> {
    let mut field = StyleOffsetField::zeros(manifest.manifest.style_id.clone(), scene.len());
    let mut tuner = tuner;
    let mut trace = train_stage1(scene, cameras, manifest, &mut field, &mut tuner, config)?;
    let s2 = train_stage2(scene, cameras, manifest, &field, &mut tuner, config)?;
    trace.extend(s2.trace);
    Ok((field, tuner, trace))
}
