//! Test error, normalized corner error, CED curves and alignment images.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::autodiff::Tensor;
use crate::data::{Batch, Corners, PerturbSample};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::pgm;

fn chunks(samples: &[PerturbSample], batch: usize) -> Result<impl Iterator<Item = Result<Batch>> + '_> {
    if batch == 0 {
        return Err(Error::Config("eval batch size must be at least 1".into()));
    }
    if samples.is_empty() {
        return Err(Error::Usage("no samples to evaluate".into()));
    }
    Ok(samples.chunks(batch).map(Batch::from_samples))
}

/// Index of the largest logit per row; ties go to the lowest index.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks(k)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect()
}

/// Fraction of `samples` whose predicted class differs from the label.
pub fn classification_error(model: &Model, samples: &[PerturbSample], batch: usize) -> Result<f64> {
    let mut wrong = 0usize;
    for b in chunks(samples, batch)? {
        let b = b?;
        let pred = argmax_rows(&model.logits(&b.images)?);
        wrong += pred.iter().zip(&b.labels).filter(|(p, l)| p != l).count();
    }
    Ok(wrong as f64 / samples.len() as f64)
}

/// Mean point-to-point distance over the four corners, divided by `diag`.
pub fn corner_error(pred: &Corners, gt: &Corners, diag: f64) -> f64 {
    let total: f64 = pred
        .iter()
        .zip(gt)
        .map(|(p, g)| (p[0] - g[0]).hypot(p[1] - g[1]))
        .sum();
    total / 4.0 / diag
}

/// Per-sample corner error of `model`'s alignment, normalized by each
/// sample's ground-truth diagonal.
pub fn corner_errors(model: &Model, samples: &[PerturbSample], batch: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(samples.len());
    for (b, group) in chunks(samples, batch)?.zip(samples.chunks(batch)) {
        let pred = model.predict_corners(&b?)?;
        for (p, s) in pred.iter().zip(group) {
            out.push(corner_error(p, &s.gt_corners, s.diagonal()));
        }
    }
    Ok(out)
}

/// Cumulative error distribution sampled at evenly spaced thresholds.
#[derive(Clone, Debug, PartialEq)]
pub struct CedCurve {
    pub thresholds: Vec<f64>,
    pub fractions: Vec<f64>,
}

impl CedCurve {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("threshold,fraction\n");
        for (t, f) in self.thresholds.iter().zip(&self.fractions) {
            writeln!(s, "{t:e},{f:e}").expect("string write");
        }
        s
    }
}

/// CED on `points` thresholds spanning `[0, max_threshold]` and the
/// trapezoidal area under it divided by `max_threshold`.
pub fn ced_and_auc(errors: &[f64], max_threshold: f64, points: usize) -> Result<(CedCurve, f64)> {
    if errors.is_empty() {
        return Err(Error::Usage("CED needs at least one error value".into()));
    }
    if points < 2 {
        return Err(Error::Usage(format!("CED needs at least 2 points, got {points}")));
    }
    if !(max_threshold.is_finite() && max_threshold > 0.0) {
        return Err(Error::Usage(format!("CED threshold must be positive, got {max_threshold}")));
    }
    let mut sorted = errors.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let step = max_threshold / (points - 1) as f64;
    let thresholds: Vec<f64> = (0..points).map(|k| k as f64 * step).collect();
    let fractions: Vec<f64> = thresholds
        .iter()
        .map(|&t| sorted.partition_point(|&e| e <= t) as f64 / n)
        .collect();
    // Area divided by max_threshold; every interval has width 1/(points-1)
    // after normalization.
    let area: f64 = fractions.windows(2).map(|w| 0.5 * (w[0] + w[1])).sum();
    Ok((CedCurve { thresholds, fractions }, area / (points - 1) as f64))
}

/// Pixelwise mean and population variance of `[N,C,H,W]` images, averaged
/// over channels.
pub fn mean_variance(images: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
    let s = images.shape();
    if s.len() != 4 || s[0] == 0 {
        return Err(Error::dim("mean_variance", format!("need non-empty [N,C,H,W], got {s:?}")));
    }
    let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
    let gray: Vec<Vec<f64>> = images
        .data()
        .chunks(c * hw)
        .map(|img| (0..hw).map(|i| (0..c).map(|ch| img[ch * hw + i]).sum::<f64>() / c as f64).collect())
        .collect();
    let mean: Vec<f64> = (0..hw).map(|i| gray.iter().map(|g| g[i]).sum::<f64>() / n as f64).collect();
    let var = (0..hw)
        .map(|i| gray.iter().map(|g| (g[i] - mean[i]).powi(2)).sum::<f64>() / n as f64)
        .collect();
    Ok((mean, var))
}

/// Mean squared forward difference of a row-major `width x height` image.
pub fn gradient_energy(pixels: &[f64], width: usize, height: usize) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for y in 0..height {
        for x in 0..width {
            let v = pixels[y * width + x];
            if x + 1 < width {
                total += (pixels[y * width + x + 1] - v).powi(2);
                count += 1;
            }
            if y + 1 < height {
                total += (pixels[(y + 1) * width + x] - v).powi(2);
                count += 1;
            }
        }
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}

/// Summary of one mean/variance image pair.
#[derive(Clone, Debug, PartialEq)]
pub struct MeanVarianceEntry {
    pub group: String,
    pub count: usize,
    pub variance_scale: f64,
    pub mean_gradient_energy: f64,
    pub mean_path: PathBuf,
    pub variance_path: PathBuf,
}

/// Writes `{prefix}_{group}_mean.pgm` and `{prefix}_{group}_variance.pgm`
/// for the aligned `images`, overall or per label. Variance images are
/// divided by their maximum; the maxima go to `{prefix}_variance_scale.txt`.
pub fn mean_variance_images(
    images: &Tensor,
    labels: &[usize],
    group_by_label: bool,
    dir: &Path,
    prefix: &str,
) -> Result<Vec<MeanVarianceEntry>> {
    let s = images.shape();
    if s.len() != 4 || s[0] != labels.len() {
        return Err(Error::dim("mean_variance_images", format!("{s:?} images for {} labels", labels.len())));
    }
    std::fs::create_dir_all(dir)?;
    let (h, w) = (s[2], s[3]);
    let mut groups: Vec<(String, Vec<usize>)> = Vec::new();
    if group_by_label {
        let mut classes: Vec<usize> = labels.to_vec();
        classes.sort_unstable();
        classes.dedup();
        for c in classes {
            groups.push((format!("class{c}"), (0..labels.len()).filter(|&i| labels[i] == c).collect()));
        }
    } else {
        groups.push(("all".into(), (0..labels.len()).collect()));
    }
    let mut entries = Vec::new();
    let mut sidecar = String::from("group,count,variance_scale\n");
    for (group, idx) in groups {
        let subset = Tensor::stack(&idx.iter().map(|&i| images.slice_outer(i)).collect::<Result<Vec<_>>>()?)?;
        let (mean, var) = mean_variance(&subset)?;
        let scale = var.iter().copied().fold(0.0, f64::max);
        let scaled: Vec<f64> = if scale > 0.0 {
            var.iter().map(|v| v / scale).collect()
        } else {
            vec![0.0; var.len()]
        };
        let mean_path = dir.join(format!("{prefix}_{group}_mean.pgm"));
        let variance_path = dir.join(format!("{prefix}_{group}_variance.pgm"));
        pgm::write(&mean_path, w, h, &mean)?;
        pgm::write(&variance_path, w, h, &scaled)?;
        writeln!(sidecar, "{group},{},{scale:e}", idx.len()).expect("string write");
        entries.push(MeanVarianceEntry {
            group,
            count: idx.len(),
            variance_scale: scale,
            mean_gradient_energy: gradient_energy(&mean, w, h),
            mean_path,
            variance_path,
        });
    }
    std::fs::write(dir.join(format!("{prefix}_variance_scale.txt")), sidecar)?;
    Ok(entries)
}

/// Tiles `samples` rows of `input, level 1, ..., level T` into one
/// grayscale raster `(width, height, pixels)`.
pub fn gallery_raster(inputs: &Tensor, per_level: &[Tensor]) -> Result<(usize, usize, Vec<f64>)> {
    let s = inputs.shape();
    if s.len() != 4 {
        return Err(Error::dim("gallery", format!("inputs must be [N,C,H,W], got {s:?}")));
    }
    if let Some(t) = per_level.iter().find(|t| t.shape() != s) {
        return Err(Error::dim("gallery", format!("level shape {:?} differs from {s:?}", t.shape())));
    }
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let cols = per_level.len() + 1;
    let (gw, gh) = (cols * w, n * h);
    let mut out = vec![0.0; gw * gh];
    for (col, src) in std::iter::once(inputs).chain(per_level).enumerate() {
        for i in 0..n {
            let img = &src.data()[i * c * h * w..(i + 1) * c * h * w];
            for y in 0..h {
                for x in 0..w {
                    let v = (0..c).map(|ch| img[ch * h * w + y * w + x]).sum::<f64>() / c as f64;
                    out[(i * h + y) * gw + col * w + x] = v;
                }
            }
        }
    }
    Ok((gw, gh, out))
}

/// Aligns the first `count` samples and writes the per-level gallery.
pub fn per_level_gallery(model: &Model, samples: &[PerturbSample], count: usize, path: &Path) -> Result<(usize, usize)> {
    let count = count.min(samples.len());
    if count == 0 {
        return Err(Error::Usage("gallery needs at least one sample".into()));
    }
    let batch = Batch::from_samples(&samples[..count])?;
    let aligned = model
        .align(&batch.images)?
        .ok_or_else(|| Error::Usage("gallery needs an alignment stack".into()))?;
    let (w, h, px) = gallery_raster(&batch.images, &aligned.per_level_warped)?;
    pgm::write(path, w, h, &px)?;
    Ok((w, h))
}

/// Aligned images of `samples` (the inputs for a model without a stack).
pub fn aligned_images(model: &Model, samples: &[PerturbSample], batch: usize) -> Result<Tensor> {
    let mut parts = Vec::new();
    for b in chunks(samples, batch)? {
        let b = b?;
        let imgs = match model.align(&b.images)? {
            Some(r) => r.warped,
            None => b.images,
        };
        for i in 0..imgs.shape()[0] {
            parts.push(imgs.slice_outer(i)?);
        }
    }
    Tensor::stack(&parts)
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct EvalReport {
    pub model_id: String,
    pub test_error: Option<f64>,
    pub corner_errors: Vec<f64>,
    pub ced: Option<CedCurve>,
    pub auc: Option<f64>,
    pub auc_threshold: Option<f64>,
    pub mean_gradient_energy: Option<f64>,
    pub artifacts: Vec<PathBuf>,
}

impl EvalReport {
    /// `metric,value` rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,value\n");
        writeln!(s, "model,{}", self.model_id).expect("string write");
        if let Some(e) = self.test_error {
            writeln!(s, "test_error,{e:e}").expect("string write");
        }
        if !self.corner_errors.is_empty() {
            let n = self.corner_errors.len() as f64;
            writeln!(s, "mean_corner_error,{:e}", self.corner_errors.iter().sum::<f64>() / n).expect("string write");
        }
        if let (Some(a), Some(t)) = (self.auc, self.auc_threshold) {
            writeln!(s, "auc@{t},{a:e}").expect("string write");
        }
        if let Some(g) = self.mean_gradient_energy {
            writeln!(s, "mean_image_gradient_energy,{g:e}").expect("string write");
        }
        s
    }

    /// Writes `report.csv`, and `ced.csv` plus `corner_errors.csv` when
    /// corner errors were measured.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir)?;
        let mut written = vec![dir.join("report.csv")];
        std::fs::write(&written[0], self.to_csv())?;
        if let Some(ced) = &self.ced {
            let p = dir.join("ced.csv");
            std::fs::write(&p, ced.to_csv())?;
            written.push(p);
        }
        if !self.corner_errors.is_empty() {
            let p = dir.join("corner_errors.csv");
            let mut s = String::from("sample,error\n");
            for (i, e) in self.corner_errors.iter().enumerate() {
                writeln!(s, "{i},{e:e}").expect("string write");
            }
            std::fs::write(&p, s)?;
            written.push(p);
        }
        Ok(written)
    }
}
