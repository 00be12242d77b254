//! Image quality metrics on the 0–255 scale.

use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::image::{read_gray8, read_rgb8, Rgb8};

pub const PSNR_CAP: f64 = 99.0;
const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn same_size(a: &Rgb8, b: &Rgb8) -> Result<()> {
    if a.width != b.width || a.height != b.height || a.data.len() != b.data.len() {
        return Err(Error::SizeMismatch(format!(
            "images are {}x{} and {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    Ok(())
}

fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        PSNR_CAP
    } else {
        (10.0 * (255.0 * 255.0 / mse).log10()).min(PSNR_CAP)
    }
}

/// Squared and absolute error sums over the pixels selected by `mask`
/// (all pixels when `None`), with the number of channel values summed.
fn error_sums(a: &Rgb8, b: &Rgb8, mask: Option<&[bool]>) -> Result<(f64, f64, usize)> {
    same_size(a, b)?;
    if let Some(m) = mask {
        if m.len() != a.width * a.height {
            return Err(Error::SizeMismatch("mask does not match the image".into()));
        }
    }
    let (mut sq, mut abs, mut n) = (0.0, 0.0, 0);
    for (i, (pa, pb)) in a.data.chunks_exact(3).zip(b.data.chunks_exact(3)).enumerate() {
        if mask.is_some_and(|m| !m[i]) {
            continue;
        }
        for c in 0..3 {
            let d = pa[c] as f64 - pb[c] as f64;
            sq += d * d;
            abs += d.abs();
        }
        n += 3;
    }
    Ok((sq, abs, n))
}

pub fn psnr(a: &Rgb8, b: &Rgb8) -> Result<f64> {
    let (sq, _, n) = error_sums(a, b, None)?;
    Ok(psnr_from_mse(sq / n.max(1) as f64))
}

/// PSNR over the pixels where `mask` is set.
pub fn psnr_masked(a: &Rgb8, b: &Rgb8, mask: &[bool]) -> Result<f64> {
    let (sq, _, n) = error_sums(a, b, Some(mask))?;
    Ok(psnr_from_mse(sq / n.max(1) as f64))
}

/// Mean absolute error per channel value.
pub fn mae(a: &Rgb8, b: &Rgb8) -> Result<f64> {
    let (_, abs, n) = error_sums(a, b, None)?;
    Ok(abs / n.max(1) as f64)
}

pub fn mae_masked(a: &Rgb8, b: &Rgb8, mask: &[bool]) -> Result<f64> {
    let (_, abs, n) = error_sums(a, b, Some(mask))?;
    Ok(abs / n.max(1) as f64)
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-(i as f64 - r).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Valid-region separable filtering of a `w x h` plane.
fn filter(plane: &[f64], w: usize, h: usize, g: &[f64]) -> (Vec<f64>, usize, usize) {
    let k = g.len();
    let (ow, oh) = (w + 1 - k, h + 1 - k);
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..k).map(|i| g[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..k).map(|i| g[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    (out, ow, oh)
}

/// Mean structural similarity with an 11x11 Gaussian window (sigma 1.5),
/// averaged over the valid region and the three channels.
pub fn ssim(a: &Rgb8, b: &Rgb8) -> Result<f64> {
    same_size(a, b)?;
    let (w, h) = (a.width, a.height);
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::InvalidInput(format!("SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels")));
    }
    let g = gaussian_window();
    let c1 = (SSIM_K1 * 255.0).powi(2);
    let c2 = (SSIM_K2 * 255.0).powi(2);
    let mut total = 0.0;
    for c in 0..3 {
        let x: Vec<f64> = a.data.iter().skip(c).step_by(3).map(|&v| v as f64).collect();
        let y: Vec<f64> = b.data.iter().skip(c).step_by(3).map(|&v| v as f64).collect();
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
        let (mx, ow, oh) = filter(&x, w, h, &g);
        let (my, _, _) = filter(&y, w, h, &g);
        let (sxx, _, _) = filter(&xx, w, h, &g);
        let (syy, _, _) = filter(&yy, w, h, &g);
        let (sxy, _, _) = filter(&xy, w, h, &g);
        let mut acc = 0.0;
        for i in 0..ow * oh {
            let vx = sxx[i] - mx[i] * mx[i];
            let vy = syy[i] - my[i] * my[i];
            let cov = sxy[i] - mx[i] * my[i];
            acc += ((2.0 * mx[i] * my[i] + c1) * (2.0 * cov + c2))
                / ((mx[i] * mx[i] + my[i] * my[i] + c1) * (vx + vy + c2));
        }
        total += acc / (ow * oh) as f64;
    }
    Ok(total / 3.0)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FrameMetrics {
    pub name: String,
    pub psnr: f64,
    pub ssim: f64,
    pub mae: f64,
    /// Foreground-only variants, present when a mask was available.
    pub psnr_foreground: Option<f64>,
    pub mae_foreground: Option<f64>,
}

impl FrameMetrics {
    pub fn compute(name: impl Into<String>, rendered: &Rgb8, truth: &Rgb8, mask: Option<&[bool]>) -> Result<Self> {
        Ok(Self {
            name: name.into(),
            psnr: psnr(rendered, truth)?,
            ssim: ssim(rendered, truth)?,
            mae: mae(rendered, truth)?,
            psnr_foreground: mask.map(|m| psnr_masked(rendered, truth, m)).transpose()?,
            mae_foreground: mask.map(|m| mae_masked(rendered, truth, m)).transpose()?,
        })
    }
}

/// Per-frame metrics and their means. LPIPS needs a pretrained perceptual
/// network and is not computed.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricReport {
    pub frames: Vec<FrameMetrics>,
    pub psnr: f64,
    pub ssim: f64,
    pub mae: f64,
    pub psnr_foreground: Option<f64>,
    pub mae_foreground: Option<f64>,
    pub lpips: &'static str,
}

impl MetricReport {
    pub fn new(frames: Vec<FrameMetrics>) -> Self {
        let n = frames.len().max(1) as f64;
        let mean = |f: fn(&FrameMetrics) -> f64| frames.iter().map(f).sum::<f64>() / n;
        let mean_opt = |f: fn(&FrameMetrics) -> Option<f64>| {
            let v: Option<Vec<f64>> = frames.iter().map(f).collect();
            v.filter(|v| !v.is_empty()).map(|v| v.iter().sum::<f64>() / v.len() as f64)
        };
        Self {
            psnr: mean(|f| f.psnr),
            ssim: mean(|f| f.ssim),
            mae: mean(|f| f.mae),
            psnr_foreground: mean_opt(|f| f.psnr_foreground),
            mae_foreground: mean_opt(|f| f.mae_foreground),
            lpips: "unreported",
            frames,
        }
    }

    pub fn summary(&self) -> String {
        let fg = match (self.psnr_foreground, self.mae_foreground) {
            (Some(p), Some(m)) => format!("  fg PSNR {p:.2} dB  fg MAE {m:.3}"),
            _ => String::new(),
        };
        format!(
            "{} images  PSNR {:.2} dB  SSIM {:.4}  MAE {:.3}{fg}  LPIPS unreported",
            self.frames.len(),
            self.psnr,
            self.ssim,
            self.mae
        )
    }
}

/// Compares every `*.rgb.png` below `rendered` with the file at the same
/// relative path below `truth`. A `*.mask.png` next to the ground truth
/// enables the foreground metrics.
pub fn evaluate_dirs(rendered: &Path, truth: &Path) -> Result<MetricReport> {
    let mut files = Vec::new();
    collect_rgb(rendered, Path::new(""), &mut files)?;
    files.sort();
    if files.is_empty() {
        return Err(Error::InvalidInput(format!("no *.rgb.png files under {}", rendered.display())));
    }
    let mut frames = Vec::with_capacity(files.len());
    for rel in files {
        let r = read_rgb8(&rendered.join(&rel))?;
        let t = read_rgb8(&truth.join(&rel))?;
        let name = rel.to_string_lossy().into_owned();
        let mask_path = truth.join(name.replace(".rgb.png", ".mask.png"));
        let mask = if mask_path.exists() {
            let (w, h, m) = read_gray8(&mask_path)?;
            if w != t.width || h != t.height {
                return Err(Error::SizeMismatch(format!("mask {} has the wrong size", mask_path.display())));
            }
            Some(m.into_iter().map(|v| v > 127).collect::<Vec<bool>>())
        } else {
            None
        };
        frames.push(FrameMetrics::compute(name, &r, &t, mask.as_deref())?);
    }
    Ok(MetricReport::new(frames))
}

fn collect_rgb(root: &Path, rel: &Path, out: &mut Vec<std::path::PathBuf>) -> Result<()> {
    let dir = root.join(rel);
    let entries = std::fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))?;
    for e in entries {
        let e = e.map_err(|e| Error::io(&dir, e))?;
        let name = e.file_name();
        let path = rel.join(&name);
        if e.path().is_dir() {
            collect_rgb(root, &path, out)?;
        } else if name.to_string_lossy().ends_with(".rgb.png") {
            out.push(path);
        }
    }
    Ok(())
}
