//! Per-primitive style offsets, the quantized intensity tuner and scene
//! composition.
//!
//! A stylized primitive is `base + v * offset` channel by channel, where `v`
//! is the tuner embedding selected by the intensity `beta`. Channels are
//! ordered `position(3), log_scale(3), rotation(4), opacity(1), color(3)`.

use std::collections::HashSet;
use std::io::{Read, Write};
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::render::SceneGradients;
use crate::scene::{normalize_quat, GaussianScene};

pub const CHANNELS: usize = 14;
pub const POSITION: Range<usize> = 0..3;
pub const LOG_SCALE: Range<usize> = 3..6;
pub const ROTATION: Range<usize> = 6..10;
pub const OPACITY: usize = 10;
pub const COLOR: Range<usize> = 11..14;

pub const DEFAULT_LEVELS: usize = 10;

pub type Embedding = [f32; CHANNELS];

/// Attribute offsets for one reference style, one row of 14 channels per
/// primitive.
#[derive(Clone, Debug, PartialEq)]
pub struct StyleOffsetField {
    pub style_id: String,
    data: Vec<f32>,
}

impl StyleOffsetField {
    pub fn zeros(style_id: impl Into<String>, n: usize) -> Self {
        Self {
            style_id: style_id.into(),
            data: vec![0.0; n * CHANNELS],
        }
    }

    pub fn from_rows(style_id: impl Into<String>, rows: Vec<Embedding>) -> Self {
        Self {
            style_id: style_id.into(),
            data: rows.into_iter().flatten().collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.data.len() / CHANNELS
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * CHANNELS..(i + 1) * CHANNELS]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        &mut self.data[i * CHANNELS..(i + 1) * CHANNELS]
    }

    /// Row-major `N x 14` storage.
    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// SHA-512 over the little-endian offset bytes.
    pub fn digest(&self) -> [u8; 64] {
        use sha2::{Digest, Sha512};
        let mut h = Sha512::new();
        for v in &self.data {
            h.update(v.to_le_bytes());
        }
        h.finalize().into()
    }
}

/// Quantized intensity control with one learnable gain vector per level.
#[derive(Clone, Debug, PartialEq)]
pub struct StyleTuner {
    pub a: f32,
    pub b: f32,
    embeddings: Vec<Embedding>,
    pub trainable: Vec<bool>,
}

impl Default for StyleTuner {
    fn default() -> Self {
        Self::new(0.0, 1.0, DEFAULT_LEVELS).expect("default tuner is valid")
    }
}

impl StyleTuner {
    /// Fresh tuner: embedding 0 pinned to zero, all others ones.
    pub fn new(a: f32, b: f32, levels: usize) -> Result<Self> {
        if !(a.is_finite() && b.is_finite() && a < b) {
            return Err(Error::Argument(format!("tuner range [{a}, {b}] is empty")));
        }
        if levels < 2 {
            return Err(Error::Argument(format!("tuner needs at least 2 levels, got {levels}")));
        }
        let mut embeddings = vec![[1.0; CHANNELS]; levels];
        embeddings[0] = [0.0; CHANNELS];
        let mut trainable = vec![true; levels];
        trainable[0] = false;
        Ok(Self {
            a,
            b,
            embeddings,
            trainable,
        })
    }

    pub fn levels(&self) -> usize {
        self.embeddings.len()
    }

    pub fn embeddings(&self) -> &[Embedding] {
        &self.embeddings
    }

    pub fn embedding(&self, z: usize) -> &Embedding {
        &self.embeddings[z]
    }

    /// Mutable access to a non-pinned embedding.
    pub fn embedding_mut(&mut self, z: usize) -> Result<&mut Embedding> {
        if z == 0 {
            return Err(Error::Argument("embedding 0 is pinned to zero".into()));
        }
        self.embeddings
            .get_mut(z)
            .ok_or_else(|| Error::Range(format!("embedding {z} out of range")))
    }

    pub fn quantum(&self) -> f64 {
        (self.b as f64 - self.a as f64) / self.levels() as f64
    }

    /// Bucket index of `beta`. A value on a bucket edge goes to the lower
    /// bucket; `beta = b` goes to the top bucket.
    pub fn staircase(&self, beta: f64) -> Result<usize> {
        let (a, b) = (self.a as f64, self.b as f64);
        if !(beta >= a && beta <= b) {
            return Err(Error::Range(format!("beta {beta} outside [{a}, {b}]")));
        }
        let t = (beta - a) / self.quantum();
        let edge = t.round();
        let z = if (t - edge).abs() <= 1e-9 * edge.max(1.0) {
            edge - 1.0
        } else {
            t.floor()
        };
        Ok((z.max(0.0) as usize).min(self.levels() - 1))
    }

    pub fn embedding_for(&self, beta: f64) -> Result<[f64; CHANNELS]> {
        let z = self.staircase(beta)?;
        Ok(self.embeddings[z].map(f64::from))
    }

    /// SHA-512 over the little-endian bytes of embedding `z`.
    pub fn embedding_digest(&self, z: usize) -> [u8; 64] {
        use sha2::{Digest, Sha512};
        let mut h = Sha512::new();
        for v in &self.embeddings[z] {
            h.update(v.to_le_bytes());
        }
        h.finalize().into()
    }
}

fn check_mask(mask: &[usize], n: usize) -> Result<()> {
    match mask.iter().find(|&&i| i >= n) {
        Some(i) => Err(Error::Range(format!("mask index {i} out of range for {n} primitives"))),
        None => Ok(()),
    }
}

fn check_field(base: &GaussianScene, field: &StyleOffsetField) -> Result<()> {
    if field.len() != base.len() {
        return Err(Error::Shape(format!(
            "style field '{}' has {} rows, scene has {} primitives",
            field.style_id,
            field.len(),
            base.len()
        )));
    }
    Ok(())
}

/// Applies `v * offset` to the primitives selected by `mask` (all when
/// `None`). A zero gain leaves the channel bit-identical to the base.
pub fn compose(
    base: &GaussianScene,
    field: &StyleOffsetField,
    v: &[f64; CHANNELS],
    mask: Option<&[usize]>,
) -> Result<GaussianScene> {
    let mut out = base.clone();
    compose_into(&mut out, base, field, v, mask)?;
    Ok(out)
}

fn compose_into(
    out: &mut GaussianScene,
    base: &GaussianScene,
    field: &StyleOffsetField,
    v: &[f64; CHANNELS],
    mask: Option<&[usize]>,
) -> Result<()> {
    check_field(base, field)?;
    if let Some(m) = mask {
        check_mask(m, base.len())?;
    }
    let apply = |i: usize, prims: &mut [crate::GaussianPrimitive]| {
        let d = field.row(i);
        let b = &base.primitives()[i];
        let p = &mut prims[i];
        let shift = |x: f64, k: usize| {
            if v[k] == 0.0 {
                x
            } else {
                x + v[k] * d[k] as f64
            }
        };
        for k in 0..3 {
            p.position[k] = shift(b.position[k], POSITION.start + k);
            p.log_scale[k] = shift(b.log_scale[k], LOG_SCALE.start + k);
            p.color[k] = shift(b.color[k], COLOR.start + k);
        }
        p.opacity_logit = shift(b.opacity_logit, OPACITY);
        let moved = ROTATION.clone().any(|k| v[k] * d[k] as f64 != 0.0);
        p.rotation = if moved {
            let mut q = b.rotation;
            for (j, k) in ROTATION.enumerate() {
                q[j] += v[k] * d[k] as f64;
            }
            normalize_quat(q)
        } else {
            b.rotation
        };
    };
    let prims = out.primitives_mut();
    match mask {
        Some(m) => m.iter().for_each(|&i| apply(i, prims)),
        None => (0..base.len()).for_each(|i| apply(i, prims)),
    }
    Ok(())
}

/// Gradients of a loss with respect to the offsets and the gain vector,
/// given the loss gradient on the composed scene.
#[derive(Clone, Debug, PartialEq)]
pub struct ComposeGradients {
    /// Row-major `N x 14`, parallel to the field.
    pub offsets: Vec<f64>,
    pub gain: [f64; CHANNELS],
}

pub fn compose_backward(
    base: &GaussianScene,
    field: &StyleOffsetField,
    v: &[f64; CHANNELS],
    scene_grad: &SceneGradients,
) -> Result<ComposeGradients> {
    check_field(base, field)?;
    if scene_grad.len() != base.len() {
        return Err(Error::Shape(format!(
            "gradient covers {} primitives, scene has {}",
            scene_grad.len(),
            base.len()
        )));
    }
    let mut offsets = vec![0.0; field.as_slice().len()];
    let mut gain = [0.0; CHANNELS];
    for i in 0..base.len() {
        let mut g = scene_grad.channels(i);
        let d = field.row(i);
        let q = base.primitives()[i].rotation;
        let mut x = [0.0; 4];
        for (j, k) in ROTATION.enumerate() {
            x[j] = q[j] + v[k] * d[k] as f64;
        }
        // The renderer gradient is already tangent to the unit sphere, so
        // the normalization only contributes the 1/|x| factor.
        let norm = x.iter().map(|t| t * t).sum::<f64>().sqrt();
        if norm > 0.0 {
            for k in ROTATION {
                g[k] /= norm;
            }
        }
        let row = &mut offsets[i * CHANNELS..(i + 1) * CHANNELS];
        for k in 0..CHANNELS {
            row[k] = v[k] * g[k];
            gain[k] += d[k] as f64 * g[k];
        }
    }
    Ok(ComposeGradients { offsets, gain })
}

/// One style applied to a scene.
#[derive(Clone, Debug)]
pub struct StyleLayer<'a> {
    pub field: &'a StyleOffsetField,
    pub tuner: &'a StyleTuner,
    pub beta: f64,
    pub mask: Option<&'a [usize]>,
}

#[derive(Clone, Debug)]
pub struct StyledScene<'a> {
    pub base: &'a GaussianScene,
    pub active: Vec<StyleLayer<'a>>,
}

impl StyledScene<'_> {
    pub fn validate(&self) -> Result<()> {
        let n = self.base.len();
        let mut seen = HashSet::new();
        for layer in &self.active {
            check_field(self.base, layer.field)?;
            if let Some(m) = layer.mask {
                check_mask(m, n)?;
                let own: HashSet<usize> = m.iter().copied().collect();
                if let Some(i) = own.iter().find(|i| seen.contains(*i)) {
                    return Err(Error::Validation(format!(
                        "masks overlap at primitive {i} (style '{}')",
                        layer.field.style_id
                    )));
                }
                seen.extend(own);
            }
        }
        Ok(())
    }
}

/// Composes every layer in order over the base scene.
pub fn compose_multi(styled: &StyledScene) -> Result<GaussianScene> {
    styled.validate()?;
    let mut out = styled.base.clone();
    for layer in &styled.active {
        let v = layer.tuner.embedding_for(layer.beta)?;
        let current = out.clone();
        compose_into(&mut out, &current, layer.field, &v, layer.mask)?;
    }
    Ok(out)
}

/// A named set of primitive indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub id: String,
    pub indices: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct MaskFile {
    indices: Vec<usize>,
}

impl Mask {
    pub fn from_json_str(id: impl Into<String>, text: &str) -> Result<Self> {
        let f: MaskFile = serde_json::from_str(text).map_err(|e| Error::json("mask", e))?;
        Ok(Self {
            id: id.into(),
            indices: f.indices,
        })
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string(&MaskFile {
            indices: self.indices.clone(),
        })
        .expect("mask serialization cannot fail")
    }

    /// Loads a mask; its id is the file stem.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let id = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        Self::from_json_str(id, &text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json_string()).map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        check_mask(&self.indices, n)
    }
}

pub const FIELD_MAGIC: &[u8; 4] = b"STYF";
pub const FIELD_VERSION: u32 = 1;

/// A style field file: offsets, tuner and the fingerprint of the scene they
/// were trained on.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldFile {
    pub field: StyleOffsetField,
    pub tuner: StyleTuner,
    pub fingerprint: [u8; 64],
}

impl FieldFile {
    /// Checks the field against a scene. A different primitive count is an
    /// error; a different fingerprint only logs a warning and returns false.
    pub fn check_scene(&self, scene: &GaussianScene) -> Result<bool> {
        if self.field.len() != scene.len() {
            return Err(Error::Shape(format!(
                "style field '{}' has {} rows, scene has {} primitives",
                self.field.style_id,
                self.field.len(),
                scene.len()
            )));
        }
        let same = scene.fingerprint() == self.fingerprint;
        if !same {
            log::warn!(
                "style field '{}' was trained on a different scene",
                self.field.style_id
            );
        }
        Ok(same)
    }

    pub fn encode(&self) -> Vec<u8> {
        let n = self.field.len();
        let z = self.tuner.levels();
        let mut out = Vec::with_capacity(92 + 4 * CHANNELS * (n + z) + self.field.style_id.len());
        out.extend_from_slice(FIELD_MAGIC);
        out.extend_from_slice(&FIELD_VERSION.to_le_bytes());
        out.extend_from_slice(&(n as u32).to_le_bytes());
        out.extend_from_slice(&(z as u32).to_le_bytes());
        out.extend_from_slice(&self.tuner.a.to_le_bytes());
        out.extend_from_slice(&self.tuner.b.to_le_bytes());
        out.extend_from_slice(&self.fingerprint);
        for group in [POSITION, LOG_SCALE, ROTATION, OPACITY..OPACITY + 1, COLOR] {
            for i in 0..n {
                for v in &self.field.row(i)[group.clone()] {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        for e in self.tuner.embeddings() {
            for v in e {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.extend_from_slice(&(self.field.style_id.len() as u32).to_le_bytes());
        out.extend_from_slice(self.field.style_id.as_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != FIELD_MAGIC {
            return Err(Error::Corrupt("not a style field file".into()));
        }
        let version = r.u32()?;
        if version != FIELD_VERSION {
            return Err(Error::Unsupported(format!("style field version {version}")));
        }
        let n = r.u32()? as usize;
        let z = r.u32()? as usize;
        let a = r.f32()?;
        let b = r.f32()?;
        let mut fingerprint = [0u8; 64];
        fingerprint.copy_from_slice(r.take(64)?);

        let body = 4 * CHANNELS * (n + z);
        if bytes.len() < r.pos + body + 4 {
            return Err(Error::Corrupt(format!(
                "header declares {n} primitives and {z} levels but the file is {} bytes",
                bytes.len()
            )));
        }
        let mut data = vec![0.0f32; n * CHANNELS];
        for group in [POSITION, LOG_SCALE, ROTATION, OPACITY..OPACITY + 1, COLOR] {
            for i in 0..n {
                for k in group.clone() {
                    data[i * CHANNELS + k] = r.f32()?;
                }
            }
        }
        let mut embeddings = vec![[0.0f32; CHANNELS]; z];
        for e in &mut embeddings {
            for v in e.iter_mut() {
                *v = r.f32()?;
            }
        }
        let id_len = r.u32()? as usize;
        if r.remaining() != id_len {
            return Err(Error::Corrupt(format!(
                "style id length {id_len} does not match the {} trailing bytes",
                r.remaining()
            )));
        }
        let style_id = String::from_utf8(r.take(id_len)?.to_vec())
            .map_err(|_| Error::Corrupt("style id is not UTF-8".into()))?;

        let mut tuner = StyleTuner::new(a, b, z).map_err(|e| Error::Corrupt(e.to_string()))?;
        if embeddings[0].iter().any(|&v| v != 0.0) {
            return Err(Error::Corrupt("embedding 0 is not zero".into()));
        }
        tuner.embeddings = embeddings;
        let field = StyleOffsetField { style_id, data };
        if !field.all_finite() || tuner.embeddings.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Corrupt("non-finite value in style field".into()));
        }
        Ok(Self {
            field,
            tuner,
            fingerprint,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(Error::Corrupt("unexpected end of style field file".into()));
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}
