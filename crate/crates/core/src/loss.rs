//! Image losses with gradients with respect to the first argument.
//!
//! The perceptual distance is `1 - mean SSIM` averaged over three dyadic
//! scales. Each SSIM statistic uses an 11x11 Gaussian window (sigma 1.5)
//! renormalized at the image border.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

pub const SSIM_RADIUS: usize = 5;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_SCALES: usize = 3;
pub const MIN_PERCEPTUAL_SIDE: usize = 16;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

/// Mean absolute difference over all pixels and channels.
pub fn l1_loss(a: &Image, b: &Image) -> Result<f64> {
    a.check_same_shape(b)?;
    let n = a.data().len() as f64;
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum::<f64>() / n)
}

pub fn l1_loss_grad(a: &Image, b: &Image) -> Result<(f64, Image)> {
    let value = l1_loss(a, b)?;
    let n = a.data().len() as f64;
    let mut g = Image::new(a.width(), a.height(), a.channels());
    for ((o, x), y) in g.data_mut().iter_mut().zip(a.data()).zip(b.data()) {
        *o = if x > y {
            1.0 / n
        } else if x < y {
            -1.0 / n
        } else {
            0.0
        };
    }
    Ok((value, g))
}

fn gaussian_taps() -> [f64; 2 * SSIM_RADIUS + 1] {
    let mut w = [0.0; 2 * SSIM_RADIUS + 1];
    for (i, t) in w.iter_mut().enumerate() {
        let d = i as f64 - SSIM_RADIUS as f64;
        *t = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    w
}

/// Separable border-renormalized Gaussian filter on single-channel planes.
struct Window {
    taps: [f64; 2 * SSIM_RADIUS + 1],
    w: usize,
    h: usize,
    norm_x: Vec<f64>,
    norm_y: Vec<f64>,
}

impl Window {
    fn new(w: usize, h: usize) -> Self {
        let taps = gaussian_taps();
        let norm = |len: usize| -> Vec<f64> {
            (0..len)
                .map(|p| {
                    let lo = p.saturating_sub(SSIM_RADIUS);
                    let hi = (p + SSIM_RADIUS).min(len - 1);
                    (lo..=hi).map(|q| taps[q + SSIM_RADIUS - p]).sum()
                })
                .collect()
        };
        Self {
            taps,
            w,
            h,
            norm_x: norm(w),
            norm_y: norm(h),
        }
    }

    fn conv_axis(&self, src: &[f64], horizontal: bool) -> Vec<f64> {
        let (w, h) = (self.w, self.h);
        let mut out = vec![0.0; w * h];
        for y in 0..h {
            for x in 0..w {
                let (p, len) = if horizontal { (x, w) } else { (y, h) };
                let lo = p.saturating_sub(SSIM_RADIUS);
                let hi = (p + SSIM_RADIUS).min(len - 1);
                let mut acc = 0.0;
                for q in lo..=hi {
                    let idx = if horizontal { y * w + q } else { q * w + x };
                    acc += self.taps[q + SSIM_RADIUS - p] * src[idx];
                }
                out[y * w + x] = acc;
            }
        }
        out
    }

    fn scale(&self, buf: &mut [f64]) {
        for y in 0..self.h {
            for x in 0..self.w {
                buf[y * self.w + x] /= self.norm_x[x] * self.norm_y[y];
            }
        }
    }

    fn apply(&self, src: &[f64]) -> Vec<f64> {
        let mut out = self.conv_axis(&self.conv_axis(src, true), false);
        self.scale(&mut out);
        out
    }

    fn apply_transpose(&self, src: &[f64]) -> Vec<f64> {
        let mut tmp = src.to_vec();
        self.scale(&mut tmp);
        self.conv_axis(&self.conv_axis(&tmp, false), true)
    }
}

/// Mean SSIM of one scale and, optionally, its gradient with respect to `a`.
fn ssim_scale(a: &Image, b: &Image, want_grad: bool) -> (f64, Option<Image>) {
    let (w, h, ch) = (a.width(), a.height(), a.channels());
    let win = Window::new(w, h);
    let count = (w * h * ch) as f64;
    let mut total = 0.0;
    let mut grad = want_grad.then(|| Image::new(w, h, ch));
    for c in 0..ch {
        let pa: Vec<f64> = a.data().iter().skip(c).step_by(ch).copied().collect();
        let pb: Vec<f64> = b.data().iter().skip(c).step_by(ch).copied().collect();
        let prod = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(u, v)| u * v).collect::<Vec<_>>();
        let mu_a = win.apply(&pa);
        let mu_b = win.apply(&pb);
        let e_aa = win.apply(&prod(&pa, &pa));
        let e_bb = win.apply(&prod(&pb, &pb));
        let e_ab = win.apply(&prod(&pa, &pb));
        let n = w * h;
        let mut d_mu = vec![0.0; n];
        let mut d_eaa = vec![0.0; n];
        let mut d_eab = vec![0.0; n];
        for p in 0..n {
            let (ma, mb) = (mu_a[p], mu_b[p]);
            let saa = e_aa[p] - ma * ma;
            let sbb = e_bb[p] - mb * mb;
            let sab = e_ab[p] - ma * mb;
            let a1 = 2.0 * ma * mb + C1;
            let a2 = 2.0 * sab + C2;
            let b1 = ma * ma + mb * mb + C1;
            let b2 = saa + sbb + C2;
            let f = a1 * a2 / (b1 * b2);
            total += f;
            if want_grad {
                let f_mu = 2.0 * mb * a2 / (b1 * b2) - f * 2.0 * ma / b1;
                let f_sab = 2.0 * a1 / (b1 * b2);
                let f_saa = -f / b2;
                d_mu[p] = (f_mu - 2.0 * ma * f_saa - mb * f_sab) / count;
                d_eaa[p] = f_saa / count;
                d_eab[p] = f_sab / count;
            }
        }
        if let Some(g) = grad.as_mut() {
            let t_mu = win.apply_transpose(&d_mu);
            let t_eaa = win.apply_transpose(&d_eaa);
            let t_eab = win.apply_transpose(&d_eab);
            for q in 0..n {
                g.data_mut()[q * ch + c] = t_mu[q] + 2.0 * pa[q] * t_eaa[q] + pb[q] * t_eab[q];
            }
        }
    }
    (total / count, grad)
}

/// Spreads a gradient on a 2x average-pooled image back to the source grid.
fn downsample_backward(g: &Image, width: usize, height: usize) -> Image {
    let ch = g.channels();
    let mut out = Image::new(width, height, ch);
    for y in 0..height {
        for x in 0..width {
            let (ox, oy) = (x / 2, y / 2);
            let nx = (2 * ox + 2).min(width) - 2 * ox;
            let ny = (2 * oy + 2).min(height) - 2 * oy;
            let inv = 1.0 / (nx * ny) as f64;
            for c in 0..ch {
                out.set(x, y, c, g.get(ox, oy, c) * inv);
            }
        }
    }
    out
}

fn check_perceptual(a: &Image, b: &Image) -> Result<()> {
    a.check_same_shape(b)?;
    if a.width().min(a.height()) < MIN_PERCEPTUAL_SIDE {
        return Err(Error::Shape(format!(
            "perceptual loss needs images of at least {MIN_PERCEPTUAL_SIDE} px per side, got {}x{}",
            a.width(),
            a.height()
        )));
    }
    Ok(())
}

fn msssim_impl(a: &Image, b: &Image, want_grad: bool) -> Result<(f64, Option<Image>)> {
    check_perceptual(a, b)?;
    let mut pyramid = vec![(a.clone(), b.clone())];
    for _ in 1..SSIM_SCALES {
        let (pa, pb) = pyramid.last().unwrap();
        pyramid.push((pa.downsample(2), pb.downsample(2)));
    }
    let mut sum = 0.0;
    let mut grads = Vec::new();
    for (pa, pb) in &pyramid {
        let (s, g) = ssim_scale(pa, pb, want_grad);
        sum += s;
        grads.push(g);
    }
    let value = 1.0 - sum / SSIM_SCALES as f64;
    if !want_grad {
        return Ok((value, None));
    }
    let mut acc: Option<Image> = None;
    for g in grads.into_iter().rev() {
        let mut g = g.expect("gradient requested");
        if let Some(deeper) = acc.take() {
            let up = downsample_backward(&deeper, g.width(), g.height());
            for (x, y) in g.data_mut().iter_mut().zip(up.data()) {
                *x += y;
            }
        }
        acc = Some(g);
    }
    let mut g = acc.expect("at least one scale");
    for v in g.data_mut() {
        *v *= -1.0 / SSIM_SCALES as f64;
    }
    Ok((value, Some(g)))
}

/// `1 - mean SSIM` over three dyadic scales. Zero for identical images.
pub fn perceptual_loss(a: &Image, b: &Image) -> Result<f64> {
    msssim_impl(a, b, false).map(|(v, _)| v)
}

pub fn perceptual_loss_grad(a: &Image, b: &Image) -> Result<(f64, Image)> {
    msssim_impl(a, b, true).map(|(v, g)| (v, g.expect("gradient requested")))
}

/// Which perceptual distance a training run uses.
#[derive(Clone, Debug, Default, PartialEq)]
pub enum Perceptual {
    #[default]
    MsSsim,
    None,
    /// Precomputed distances keyed by view id. They enter the reported loss
    /// but carry no gradient.
    External(BTreeMap<String, f64>),
}

impl Perceptual {
    pub fn name(&self) -> &'static str {
        match self {
            Perceptual::MsSsim => "msssim",
            Perceptual::None => "none",
            Perceptual::External(_) => "external",
        }
    }

    /// Distance between `render` and `reference` and its gradient with respect
    /// to `render`.
    pub fn eval(&self, view_id: &str, render: &Image, reference: &Image) -> Result<(f64, Option<Image>)> {
        match self {
            Perceptual::MsSsim => perceptual_loss_grad(render, reference).map(|(v, g)| (v, Some(g))),
            Perceptual::None => {
                render.check_same_shape(reference)?;
                Ok((0.0, None))
            }
            Perceptual::External(table) => {
                render.check_same_shape(reference)?;
                let v = table.get(view_id).copied().ok_or_else(|| {
                    Error::Validation(format!("no external perceptual distance for view {view_id}"))
                })?;
                Ok((v, None))
            }
        }
    }

    /// Reads `view_id,distance` lines, with an optional header.
    pub fn external_from_csv(text: &str) -> Result<Self> {
        let mut table = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let mut parts = line.splitn(2, ',');
            let id = parts.next().unwrap_or_default().trim();
            let raw = parts.next().unwrap_or_default().trim();
            match raw.parse::<f64>() {
                Ok(v) if v.is_finite() => {
                    table.insert(id.to_string(), v);
                }
                _ if i == 0 => continue,
                _ => {
                    return Err(Error::Parse {
                        what: "perceptual table".into(),
                        line: i + 1,
                        column: 1,
                        message: format!("bad distance '{raw}'"),
                    })
                }
            }
        }
        Ok(Perceptual::External(table))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Stage1,
    Stage2,
}

impl Stage {
    pub fn number(self) -> u8 {
        match self {
            Stage::Stage1 => 1,
            Stage::Stage2 => 2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l1: f64,
    pub perceptual: f64,
    pub total: f64,
    pub beta_used: f64,
    pub stage: Stage,
}

/// A loss value with its gradient with respect to the render.
#[derive(Clone, Debug)]
pub struct LossEval {
    pub report: LossReport,
    pub grad: Image,
}

/// `l1 + w * perceptual` of `render` against one reference.
fn pair_loss(
    view_id: &str,
    render: &Image,
    reference: &Image,
    perceptual: &Perceptual,
    weight: f64,
) -> Result<(f64, f64, Image)> {
    let (l1, mut grad) = l1_loss_grad(render, reference)?;
    let (p, pg) = if weight == 0.0 {
        (0.0, None)
    } else {
        perceptual.eval(view_id, render, reference)?
    };
    if let Some(pg) = pg {
        for (g, q) in grad.data_mut().iter_mut().zip(pg.data()) {
            *g += weight * q;
        }
    }
    Ok((l1, p, grad))
}

/// Full-style loss against the stylized target.
pub fn full_loss(
    view_id: &str,
    render: &Image,
    target: &Image,
    perceptual: &Perceptual,
    weight: f64,
    stage: Stage,
) -> Result<LossEval> {
    let (l1, p, grad) = pair_loss(view_id, render, target, perceptual, weight)?;
    Ok(LossEval {
        report: LossReport {
            l1,
            perceptual: p,
            total: l1 + weight * p,
            beta_used: 1.0,
            stage,
        },
        grad,
    })
}

/// `(1 - beta) * zero_style + beta * full_style`, where zero-style compares
/// the render with the unstylized base render.
pub fn tunable_loss(
    view_id: &str,
    render: &Image,
    base: &Image,
    target: &Image,
    beta: f64,
    perceptual: &Perceptual,
    weight: f64,
) -> Result<LossEval> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::Range(format!("beta {beta} outside [0, 1]")));
    }
    render.check_same_shape(base)?;
    render.check_same_shape(target)?;
    let (l1z, pz, gz) = pair_loss(view_id, render, base, perceptual, weight)?;
    let (l1f, pf, gf) = pair_loss(view_id, render, target, perceptual, weight)?;
    let mix = |z: f64, f: f64| {
        if beta == 0.0 {
            z
        } else if beta == 1.0 {
            f
        } else {
            (1.0 - beta) * z + beta * f
        }
    };
    let mut grad = gz;
    for (g, f) in grad.data_mut().iter_mut().zip(gf.data()) {
        *g = mix(*g, *f);
    }
    Ok(LossEval {
        report: LossReport {
            l1: mix(l1z, l1f),
            perceptual: mix(pz, pf),
            total: mix(l1z + weight * pz, l1f + weight * pf),
            beta_used: beta,
            stage: Stage::Stage2,
        },
        grad,
    })
}

/// Root mean square difference, optionally restricted to pixels where `mask`
/// is set.
pub fn rmse(a: &Image, b: &Image, mask: Option<&[bool]>) -> Result<f64> {
    a.check_same_shape(b)?;
    let ch = a.channels();
    let mut sum = 0.0;
    let mut n = 0usize;
    for p in 0..a.pixel_count() {
        if let Some(m) = mask {
            if m.len() != a.pixel_count() {
                return Err(Error::Shape(format!(
                    "mask has {} cells, image has {} pixels",
                    m.len(),
                    a.pixel_count()
                )));
            }
            if !m[p] {
                continue;
            }
        }
        for c in 0..ch {
            let d = a.data()[p * ch + c] - b.data()[p * ch + c];
            sum += d * d;
        }
        n += ch;
    }
    if n == 0 {
        return Err(Error::Argument("rmse over an empty mask".into()));
    }
    Ok((sum / n as f64).sqrt())
}
