use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::geometry::{
    bilinear_sample, corners_to_homography, homography_grid, invert, pixel_homography_to_norm, Homography,
    WarpParams,
};

/// Four `(x, y)` pixel positions: top-left, top-right, bottom-right,
/// bottom-left.
pub type Corners = [[f64; 2]; 4];

const MAX_RETRIES: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PerturbConfig {
    /// Noise scale as a fraction of the raster size.
    pub sigma: f64,
    /// Raster size `s` in pixels.
    pub raster: usize,
    /// Clamp every offset to `[-sigma*s, sigma*s]`.
    pub clamp: bool,
}

impl PerturbConfig {
    pub fn new(sigma: f64, raster: usize, clamp: bool) -> Result<Self> {
        if !(sigma > 0.0 && sigma <= 0.5) {
            return Err(Error::Config(format!("sigma {sigma} outside (0, 0.5]")));
        }
        if raster < 2 {
            return Err(Error::Config(format!("raster {raster} is too small")));
        }
        Ok(PerturbConfig { sigma, raster, clamp })
    }

    /// Standard deviation (and clamp bound) of each offset in pixels.
    pub fn scale_px(&self) -> f64 {
        self.sigma * self.raster as f64
    }
}

/// One draw of the corner noise model: an independent offset per corner
/// coordinate plus one translation shared by all corners.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CornerNoise {
    pub offsets: Corners,
    pub translation: [f64; 2],
}

impl CornerNoise {
    pub fn draw<R: Rng + ?Sized>(cfg: &PerturbConfig, rng: &mut R) -> Self {
        let bound = cfg.scale_px();
        let normal = Normal::new(0.0, bound).expect("positive std");
        let mut sample = || {
            let v: f64 = normal.sample(rng);
            if cfg.clamp {
                v.clamp(-bound, bound)
            } else {
                v
            }
        };
        let mut offsets = [[0.0; 2]; 4];
        for c in offsets.iter_mut() {
            c[0] = sample();
            c[1] = sample();
        }
        let translation = [sample(), sample()];
        CornerNoise { offsets, translation }
    }

    pub fn apply(&self, corners: &Corners) -> Corners {
        let mut out = *corners;
        for (c, o) in out.iter_mut().zip(&self.offsets) {
            c[0] += o[0] + self.translation[0];
            c[1] += o[1] + self.translation[1];
        }
        out
    }
}

/// Pixel corners of an `s x s` raster.
pub fn canonical_corners(s: usize) -> Corners {
    let m = s as f64 - 1.0;
    [[0.0, 0.0], [m, 0.0], [m, m], [0.0, m]]
}

#[derive(Clone, Debug, PartialEq)]
pub struct PerturbSample {
    /// `[C, s, s]`.
    pub image: Tensor,
    /// Reference corners before perturbation.
    pub canonical: Corners,
    pub gt_corners: Corners,
    /// Pixel-space homography mapping `canonical` onto `gt_corners`. The
    /// perturbed image shows the original at `gt_homography^-1 x`, so
    /// warping it by this homography undoes the perturbation.
    pub gt_homography: Homography,
    pub label: usize,
}

impl PerturbSample {
    /// The ground truth as normalized warp parameters.
    pub fn gt_params(&self) -> Result<WarpParams> {
        let s = self.image.shape();
        pixel_homography_to_norm(&self.gt_homography, s[2], s[1])?.to_params()
    }

    /// Mean length of the two diagonals of the ground-truth quadrilateral.
    pub fn diagonal(&self) -> f64 {
        let d = |a: [f64; 2], b: [f64; 2]| (a[0] - b[0]).hypot(a[1] - b[1]);
        0.5 * (d(self.gt_corners[0], self.gt_corners[2]) + d(self.gt_corners[1], self.gt_corners[3]))
    }
}

/// Backward warp of a `[C,H,W]` image: output pixel `x` shows the input at
/// `h(x)` (pixel coordinates), zero outside.
pub fn warp_image(image: &Tensor, h: &Homography) -> Result<Tensor> {
    let s = image.shape();
    if s.len() != 3 {
        return Err(Error::dim("warp_image", format!("image must be [C,H,W], got {s:?}")));
    }
    let (height, width) = (s[1], s[2]);
    let grid = homography_grid(&pixel_homography_to_norm(h, width, height)?, height, width)?;
    let batched = image.reshape(&[1, s[0], height, width])?;
    let mut out = bilinear_sample(&batched, &grid)?.reshape(s)?;
    // Convex weights can overshoot [0, 1] by an ulp.
    out.data_mut().iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    Ok(out)
}

/// Draws noise until the displaced corners form a valid quadrilateral.
pub(crate) fn draw_homography<R: Rng + ?Sized>(
    canonical: &Corners,
    cfg: &PerturbConfig,
    rng: &mut R,
) -> Result<(Corners, Homography)> {
    for _ in 0..MAX_RETRIES {
        let displaced = CornerNoise::draw(cfg, rng).apply(canonical);
        if let Ok(h) = corners_to_homography(canonical, &displaced) {
            if invert(&h).is_ok() {
                return Ok((displaced, h));
            }
        }
    }
    Err(Error::Degenerate(format!(
        "no valid corner configuration after {MAX_RETRIES} draws (sigma {})",
        cfg.sigma
    )))
}

/// Perspective-perturbs a square `[C, s, s]` image.
pub fn perturb<R: Rng + ?Sized>(image: &Tensor, label: usize, cfg: &PerturbConfig, rng: &mut R) -> Result<PerturbSample> {
    let s = image.shape();
    if s.len() != 3 || s[1] != s[2] || s[1] != cfg.raster {
        return Err(Error::dim(
            "perturb",
            format!("image {s:?} is not [C,{0},{0}]", cfg.raster),
        ));
    }
    let canonical = canonical_corners(cfg.raster);
    let (gt_corners, gt_homography) = draw_homography(&canonical, cfg, rng)?;
    let warped = warp_image(image, &invert(&gt_homography)?)?;
    Ok(PerturbSample {
        image: warped,
        canonical,
        gt_corners,
        gt_homography,
        label,
    })
}
