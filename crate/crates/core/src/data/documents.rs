//! Synthetic planar documents: an ID-card-like rectangle (border, text
//! bars, photo block) perspective-warped over a cluttered background.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::perturb::{draw_homography, warp_image, Corners, PerturbConfig, PerturbSample};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::geometry::{corners_to_homography, invert};
use crate::pgm;

/// Card width as a fraction of the raster width.
const CARD_WIDTH: f64 = 0.6;
/// Width over height of an ID-1 card.
const CARD_ASPECT: f64 = 1.586;

/// Corners of the unperturbed card on an `height x width` raster.
pub fn card_corners(height: usize, width: usize) -> Corners {
    let (h, w) = (height as f64, width as f64);
    let cw = CARD_WIDTH * w;
    let ch = cw / CARD_ASPECT;
    let x0 = ((w - cw) / 2.0).round();
    let y0 = ((h - ch) / 2.0).round();
    let x1 = x0 + cw.round() - 1.0;
    let y1 = y0 + ch.round() - 1.0;
    [[x0, y0], [x1, y0], [x1, y1], [x0, y1]]
}

struct Canvas {
    h: usize,
    w: usize,
    px: Vec<f64>,
}

impl Canvas {
    fn new(h: usize, w: usize, value: f64) -> Self {
        Canvas {
            h,
            w,
            px: vec![value; h * w],
        }
    }

    /// Fills the half-open pixel box, clipped to the canvas.
    fn rect(&mut self, x0: f64, y0: f64, x1: f64, y1: f64, value: f64) {
        let cx = |v: f64| (v.max(0.0) as usize).min(self.w);
        let cy = |v: f64| (v.max(0.0) as usize).min(self.h);
        for y in cy(y0)..cy(y1) {
            for x in cx(x0)..cx(x1) {
                self.px[y * self.w + x] = value;
            }
        }
    }

    fn disc(&mut self, cx: f64, cy: f64, r: f64, value: f64) {
        for y in 0..self.h {
            for x in 0..self.w {
                if (x as f64 - cx).hypot(y as f64 - cy) <= r {
                    self.px[y * self.w + x] = value;
                }
            }
        }
    }

    fn line(&mut self, (ax, ay): (f64, f64), (bx, by): (f64, f64), value: f64) {
        let steps = (bx - ax).abs().max((by - ay).abs()).ceil().max(1.0) as usize;
        for i in 0..=steps {
            let t = i as f64 / steps as f64;
            let (x, y) = (ax + t * (bx - ax), ay + t * (by - ay));
            if x >= 0.0 && y >= 0.0 && (x as usize) < self.w && (y as usize) < self.h {
                self.px[y as usize * self.w + x as usize] = value;
            }
        }
    }

    fn into_tensor(self) -> Tensor {
        let data = self.px.into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
        Tensor::new(vec![1, self.h, self.w], data).expect("canvas shape")
    }
}

fn clutter<R: Rng + ?Sized>(h: usize, w: usize, rng: &mut R) -> Tensor {
    let mut c = Canvas::new(h, w, rng.random_range(0.15..0.55));
    let (hf, wf) = (h as f64, w as f64);
    for _ in 0..rng.random_range(6..14) {
        let v = rng.random_range(0.0..1.0);
        if rng.random_bool(0.5) {
            let (x, y) = (rng.random_range(0.0..wf), rng.random_range(0.0..hf));
            c.rect(x, y, x + rng.random_range(0.05..0.4) * wf, y + rng.random_range(0.05..0.4) * hf, v);
        } else {
            let r = rng.random_range(0.03..0.15) * wf;
            c.disc(rng.random_range(0.0..wf), rng.random_range(0.0..hf), r, v);
        }
    }
    for _ in 0..rng.random_range(3..8) {
        let a = (rng.random_range(0.0..wf), rng.random_range(0.0..hf));
        let b = (rng.random_range(0.0..wf), rng.random_range(0.0..hf));
        c.line(a, b, rng.random_range(0.0..1.0));
    }
    let noise = Normal::new(0.0, 0.03).expect("positive std");
    c.px.iter_mut().for_each(|v| *v += noise.sample(rng));
    c.into_tensor()
}

/// Card content and its coverage mask, both in the canonical frame.
fn card<R: Rng + ?Sized>(h: usize, w: usize, corners: &Corners, rng: &mut R) -> (Tensor, Tensor) {
    let [x0, y0] = corners[0];
    let [x1, y1] = corners[2];
    let (x1, y1) = (x1 + 1.0, y1 + 1.0);
    let (cw, ch) = (x1 - x0, y1 - y0);
    let mut c = Canvas::new(h, w, 0.0);
    c.rect(x0, y0, x1, y1, rng.random_range(0.2..0.3));
    let b = (0.02 * cw).max(1.0);
    c.rect(x0 + b, y0 + b, x1 - b, y1 - b, rng.random_range(0.8..0.95));
    // Header band.
    c.rect(x0 + b, y0 + b, x1 - b, y0 + 0.16 * ch, rng.random_range(0.55..0.7));
    // Photo block with coarse texture.
    let (px0, py0, px1, py1) = (x0 + 0.05 * cw, y0 + 0.25 * ch, x0 + 0.3 * cw, y0 + 0.88 * ch);
    let tone = rng.random_range(0.3..0.6);
    let cell = (0.02 * cw).max(1.0);
    let mut y = py0;
    while y < py1 {
        let mut x = px0;
        while x < px1 {
            c.rect(x, y, (x + cell).min(px1), (y + cell).min(py1), tone + rng.random_range(-0.1..0.1));
            x += cell;
        }
        y += cell;
    }
    // Text-like bars.
    let rows = rng.random_range(5..8);
    let bar_h = (0.035 * ch).max(1.0);
    for r in 0..rows {
        let by = y0 + 0.28 * ch + r as f64 * (0.6 * ch / rows as f64);
        let len = rng.random_range(0.25..0.6) * cw;
        c.rect(x0 + 0.36 * cw, by, x0 + 0.36 * cw + len, by + bar_h, rng.random_range(0.1..0.35));
    }
    let mut mask = Canvas::new(h, w, 0.0);
    mask.rect(x0, y0, x1, y1, 1.0);
    (c.into_tensor(), mask.into_tensor())
}

/// Renders `count` perturbed documents on `raster = (height, width)`.
/// Noise scale is `cfg.sigma * cfg.raster` pixels; labels are 0.
pub fn synth_documents<R: Rng + ?Sized>(
    count: usize,
    raster: (usize, usize),
    cfg: &PerturbConfig,
    rng: &mut R,
) -> Result<Vec<PerturbSample>> {
    let (h, w) = raster;
    if h < 16 || w < 16 {
        return Err(Error::Config(format!("document raster {h}x{w} is too small")));
    }
    let canonical = card_corners(h, w);
    (0..count)
        .map(|_| {
            let background = clutter(h, w, rng);
            let (content, mask) = card(h, w, &canonical, rng);
            let (gt_corners, gt_homography) = draw_homography(&canonical, cfg, rng)?;
            let back = invert(&gt_homography)?;
            let content = warp_image(&content, &back)?;
            let mask = warp_image(&mask, &back)?;
            let data = background
                .data()
                .iter()
                .zip(content.data())
                .zip(mask.data())
                .map(|((bg, fg), m)| (m * fg + (1.0 - m) * bg).clamp(0.0, 1.0))
                .collect();
            Ok(PerturbSample {
                image: Tensor::new(vec![1, h, w], data)?,
                canonical,
                gt_corners,
                gt_homography,
                label: 0,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub label: usize,
    pub corners: Corners,
}

/// Writes one PGM per sample plus `manifest.txt` with lines
/// `path label x0 y0 x1 y1 x2 y2 x3 y3`.
pub fn write_manifest(dir: &Path, samples: &[PerturbSample]) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let mut text = String::new();
    for (i, s) in samples.iter().enumerate() {
        let name = format!("doc_{i:05}.pgm");
        let shape = s.image.shape();
        pgm::write(&dir.join(&name), shape[2], shape[1], s.image.data())?;
        write!(text, "{name} {}", s.label).expect("write to String");
        for c in &s.gt_corners {
            write!(text, " {} {}", c[0], c[1]).expect("write to String");
        }
        text.push('\n');
    }
    let path = dir.join("manifest.txt");
    std::fs::write(&path, text)?;
    Ok(path)
}

/// Parses a manifest; relative image paths resolve against its directory.
pub fn load_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let bad = |msg: &str| Error::Data(format!("{}:{}: {msg}", path.display(), lineno + 1));
        if fields.len() != 10 {
            return Err(bad(&format!("expected 10 fields, found {}", fields.len())));
        }
        let label = fields[1].parse().map_err(|_| bad("bad label"))?;
        let mut vals = [0.0; 8];
        for (v, f) in vals.iter_mut().zip(&fields[2..]) {
            *v = f.parse().map_err(|_| bad(&format!("bad coordinate {f:?}")))?;
        }
        out.push(ManifestEntry {
            path: base.join(fields[0]),
            label,
            corners: [[vals[0], vals[1]], [vals[2], vals[3]], [vals[4], vals[5]], [vals[6], vals[7]]],
        });
    }
    Ok(out)
}

/// Reloads samples written by [`write_manifest`] (pixels are 8-bit
/// quantized by the round trip).
pub fn load_documents(path: &Path) -> Result<Vec<PerturbSample>> {
    load_manifest(path)?
        .into_iter()
        .map(|e| {
            let (w, h, px) = pgm::read(&e.path)?;
            let canonical = card_corners(h, w);
            Ok(PerturbSample {
                image: Tensor::new(vec![1, h, w], px)?,
                canonical,
                gt_corners: e.corners,
                gt_homography: corners_to_homography(&canonical, &e.corners)?,
                label: e.label,
            })
        })
        .collect()
}
