//! Float image buffers plus the PNG and `.f32img` codecs.
//!
//! `.f32img` layout (little-endian): magic `F32I`, `u32` height, `u32` width,
//! `u32` channels, then `height * width * channels` `f32` values in row-major
//! HWC order.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const F32IMG_MAGIC: &[u8; 4] = b"F32I";

/// Row-major `height x width x channels` float buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        Self::filled(width, height, channels, 0.0)
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        }
    }

    pub fn from_vec(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(Error::Shape(format!(
                "buffer of {} values for {height}x{width}x{channels} image",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut img = Self::new(width, height, channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    img.data[(y * width + x) * channels + c] = f(x, y, c);
                }
            }
        }
        img
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    pub fn check_same_shape(&self, other: &Image) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "{}x{}x{} vs {}x{}x{}",
                self.height, self.width, self.channels, other.height, other.width, other.channels
            )))
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f64) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> &[f64] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    #[inline]
    pub fn pixel_mut(&mut self, x: usize, y: usize) -> &mut [f64] {
        let i = (y * self.width + x) * self.channels;
        &mut self.data[i..i + self.channels]
    }

    /// Single channel view as a new one-channel image.
    pub fn channel(&self, c: usize) -> Image {
        Image::from_fn(self.width, self.height, 1, |x, y, _| self.get(x, y, c))
    }

    /// Per-channel mean and population standard deviation.
    pub fn channel_stats(&self) -> Vec<(f64, f64)> {
        let n = self.pixel_count() as f64;
        (0..self.channels)
            .map(|c| {
                let mean = self.data.iter().skip(c).step_by(self.channels).sum::<f64>() / n;
                let var = self
                    .data
                    .iter()
                    .skip(c)
                    .step_by(self.channels)
                    .map(|v| (v - mean) * (v - mean))
                    .sum::<f64>()
                    / n;
                (mean, var.sqrt())
            })
            .collect()
    }

    /// Average-pools by an integer factor; partial edge blocks average what
    /// they cover.
    pub fn downsample(&self, factor: usize) -> Image {
        assert!(factor >= 1);
        let w = self.width.div_ceil(factor);
        let h = self.height.div_ceil(factor);
        let mut out = Image::new(w, h, self.channels);
        for oy in 0..h {
            for ox in 0..w {
                let mut n = 0.0;
                let acc = out.pixel_mut(ox, oy);
                for y in oy * factor..((oy + 1) * factor).min(self.height) {
                    for x in ox * factor..((ox + 1) * factor).min(self.width) {
                        n += 1.0;
                        let src = &self.data[(y * self.width + x) * self.channels..];
                        for (a, s) in acc.iter_mut().zip(src) {
                            *a += s;
                        }
                    }
                }
                for a in acc.iter_mut() {
                    *a /= n;
                }
            }
        }
        out
    }

    /// Nearest-neighbour upsampling back to `width x height`.
    pub fn upsample_nearest(&self, factor: usize, width: usize, height: usize) -> Image {
        Image::from_fn(width, height, self.channels, |x, y, c| {
            self.get((x / factor).min(self.width - 1), (y / factor).min(self.height - 1), c)
        })
    }

    pub fn clamped(&self) -> Image {
        Image {
            data: self.data.iter().map(|v| v.clamp(0.0, 1.0)).collect(),
            ..self.clone()
        }
    }

    /// 8-bit RGB(A) bytes: linear values scaled to 0-255, round half up.
    pub fn to_u8(&self) -> Vec<u8> {
        self.data.iter().map(|&v| quantize_u8(v)).collect()
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let color = match self.channels {
            1 => png::ColorType::Grayscale,
            3 => png::ColorType::Rgb,
            4 => png::ColorType::Rgba,
            c => return Err(Error::Unsupported(format!("PNG with {c} channels"))),
        };
        let mut out = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut out, self.width as u32, self.height as u32);
            enc.set_color(color);
            enc.set_depth(png::BitDepth::Eight);
            let mut writer = enc
                .write_header()
                .map_err(|e| Error::Unsupported(format!("PNG encode: {e}")))?;
            writer
                .write_image_data(&self.to_u8())
                .map_err(|e| Error::Unsupported(format!("PNG encode: {e}")))?;
        }
        Ok(out)
    }

    /// Decodes an 8-bit PNG into RGB floats in `[0, 1]`; gray is replicated
    /// and alpha dropped.
    pub fn decode_png(bytes: &[u8]) -> Result<Image> {
        let mut decoder = png::Decoder::new(std::io::Cursor::new(bytes));
        decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
        let mut reader = decoder
            .read_info()
            .map_err(|e| Error::Unsupported(format!("PNG decode: {e}")))?;
        let mut buf = vec![
            0;
            reader
                .output_buffer_size()
                .ok_or_else(|| Error::Unsupported("PNG too large".into()))?
        ];
        let info = reader
            .next_frame(&mut buf)
            .map_err(|e| Error::Unsupported(format!("PNG decode: {e}")))?;
        let src_ch = match info.color_type {
            png::ColorType::Grayscale => 1,
            png::ColorType::GrayscaleAlpha => 2,
            png::ColorType::Rgb => 3,
            png::ColorType::Rgba => 4,
            png::ColorType::Indexed => {
                return Err(Error::Unsupported("indexed PNG after expansion".into()))
            }
        };
        let (w, h) = (info.width as usize, info.height as usize);
        let bytes = &buf[..info.buffer_size()];
        Ok(Image::from_fn(w, h, 3, |x, y, c| {
            let base = (y * w + x) * src_ch;
            let v = if src_ch < 3 { bytes[base] } else { bytes[base + c] };
            v as f64 / 255.0
        }))
    }

    pub fn write_f32img(&self, mut w: impl Write) -> std::io::Result<()> {
        w.write_all(F32IMG_MAGIC)?;
        w.write_all(&(self.height as u32).to_le_bytes())?;
        w.write_all(&(self.width as u32).to_le_bytes())?;
        w.write_all(&(self.channels as u32).to_le_bytes())?;
        let mut buf = Vec::with_capacity(self.data.len() * 4);
        for v in &self.data {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        w.write_all(&buf)
    }

    pub fn read_f32img(mut r: impl Read) -> Result<Image> {
        let mut header = [0u8; 16];
        r.read_exact(&mut header)
            .map_err(|_| Error::Corrupt("truncated .f32img header".into()))?;
        if &header[0..4] != F32IMG_MAGIC {
            return Err(Error::Corrupt("bad .f32img magic".into()));
        }
        let word = |i: usize| u32::from_le_bytes(header[i..i + 4].try_into().unwrap()) as usize;
        let (h, w, c) = (word(4), word(8), word(12));
        let n = h
            .checked_mul(w)
            .and_then(|v| v.checked_mul(c))
            .ok_or_else(|| Error::Corrupt(".f32img dimensions overflow".into()))?;
        let mut raw = Vec::new();
        r.read_to_end(&mut raw)
            .map_err(|e| Error::Corrupt(format!(".f32img body: {e}")))?;
        if raw.len() != n * 4 {
            return Err(Error::Corrupt(format!(
                ".f32img body has {} bytes, expected {}",
                raw.len(),
                n * 4
            )));
        }
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect();
        Image::from_vec(w, h, c, data)
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.encode_png()?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn save_f32img(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut buf = Vec::new();
        self.write_f32img(&mut buf).expect("writing to a Vec cannot fail");
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    /// Loads a PNG or `.f32img`, chosen by extension.
    pub fn load(path: impl AsRef<Path>) -> Result<Image> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        match path.extension().and_then(|e| e.to_str()) {
            Some("f32img") => Image::read_f32img(&bytes[..]),
            Some("png") | Some("PNG") => Image::decode_png(&bytes),
            _ => Err(Error::Unsupported(format!(
                "{}: expected .png or .f32img",
                path.display()
            ))),
        }
    }

    /// Saves as PNG or `.f32img` by extension.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        match path.extension().and_then(|e| e.to_str()) {
            Some("f32img") => self.save_f32img(path),
            _ => self.save_png(path),
        }
    }
}

/// Clamp to `[0, 1]`, scale to 255 and round half up.
pub fn quantize_u8(v: f64) -> u8 {
    let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
    (v * 255.0 + 0.5).floor().min(255.0) as u8
}
