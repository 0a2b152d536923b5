//! Perspective warps: the 8-parameter homography layout, the sampling-grid
//! generator, the differentiable bilinear sampler, and 4-point homography
//! estimation.
//!
//! Coordinates are normalized to `[-1, 1]` on both axes with the
//! align-corners convention: `-1` and `+1` sit on the centres of the first
//! and last pixel. A warp maps *output* pixels to *source* locations
//! (backward warping), so sampling an image with the grid of `H` shows the
//! source content at `H(x)` in output pixel `x`.

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Number of warp parameters of a perspective transform.
pub const WARP_DIM: usize = 8;

/// Smallest admissible projective denominator when mapping a point.
pub const MIN_PROJECTIVE_W: f64 = 1e-8;

/// Sample positions closer than this (in pixels) to an integer pixel are
/// snapped onto it, so that normalized round trips land exactly on pixels.
const SNAP_TOL: f64 = 1e-9;

/// Warp parameters `p` in normalized units; `p = 0` is the identity.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WarpParams(pub [f64; WARP_DIM]);

impl WarpParams {
    pub const IDENTITY: WarpParams = WarpParams([0.0; WARP_DIM]);

    pub fn new(p: [f64; WARP_DIM]) -> Result<Self> {
        if let Some(i) = p.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("warp parameter {i} is {}", p[i])));
        }
        Ok(WarpParams(p))
    }

    pub fn from_slice(p: &[f64]) -> Result<Self> {
        let arr: [f64; WARP_DIM] = p
            .try_into()
            .map_err(|_| Error::dim("warp_params", format!("expected 8 values, got {}", p.len())))?;
        Self::new(arr)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Additive update `p + dp`, taken literally in parameter space.
pub fn compose_additive(p: &WarpParams, dp: &WarpParams) -> WarpParams {
    let mut out = p.0;
    out.iter_mut().zip(dp.0).for_each(|(a, b)| *a += b);
    WarpParams(out)
}

/// 3x3 projective transform, row-major, scaled so that `h[2][2] == 1`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Homography(pub [[f64; 3]; 3]);

impl Homography {
    pub const IDENTITY: Homography = Homography([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);

    pub fn translation(tx: f64, ty: f64) -> Self {
        Homography([[1.0, 0.0, tx], [0.0, 1.0, ty], [0.0, 0.0, 1.0]])
    }

    pub fn matrix(&self) -> &[[f64; 3]; 3] {
        &self.0
    }

    pub fn det(&self) -> f64 {
        let m = &self.0;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    /// Rescales so that `h[2][2] == 1`.
    pub fn normalized(&self) -> Result<Self> {
        let s = self.0[2][2];
        if s.abs() < 1e-12 {
            return Err(Error::Degenerate(format!("h33 = {s:e} cannot be normalized to 1")));
        }
        let mut m = self.0;
        m.iter_mut().flatten().for_each(|v| *v /= s);
        Ok(Homography(m))
    }

    pub fn mul(&self, other: &Homography) -> Homography {
        let mut m = [[0.0; 3]; 3];
        for (i, row) in m.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (0..3).map(|k| self.0[i][k] * other.0[k][j]).sum();
            }
        }
        Homography(m)
    }

    /// Maps a point with perspective division.
    pub fn apply(&self, x: f64, y: f64) -> Result<(f64, f64)> {
        let m = &self.0;
        let w = m[2][0] * x + m[2][1] * y + m[2][2];
        if w.abs() < MIN_PROJECTIVE_W {
            return Err(Error::Degenerate(format!("point ({x}, {y}) maps to infinity (w = {w:e})")));
        }
        Ok((
            (m[0][0] * x + m[0][1] * y + m[0][2]) / w,
            (m[1][0] * x + m[1][1] * y + m[1][2]) / w,
        ))
    }

    /// Parameters of this (normalized) homography: `p = H - I`.
    pub fn to_params(&self) -> Result<WarpParams> {
        let m = self.normalized()?.0;
        WarpParams::new([
            m[0][0] - 1.0,
            m[0][1],
            m[0][2],
            m[1][0],
            m[1][1] - 1.0,
            m[1][2],
            m[2][0],
            m[2][1],
        ])
    }
}

/// `H(p) = [[1+p1, p2, p3], [p4, 1+p5, p6], [p7, p8, 1]]`.
pub fn params_to_homography(p: &WarpParams) -> Result<Homography> {
    let p = WarpParams::new(p.0)?.0;
    Ok(Homography([
        [1.0 + p[0], p[1], p[2]],
        [p[3], 1.0 + p[4], p[5]],
        [p[6], p[7], 1.0],
    ]))
}

/// Inverse homography, normalized so that `h[2][2] == 1`.
pub fn invert(h: &Homography) -> Result<Homography> {
    let det = h.det();
    if !det.is_finite() || det.abs() < 1e-12 {
        return Err(Error::Degenerate(format!("homography is singular (det = {det:e})")));
    }
    let m = &h.0;
    let adj = [
        [
            m[1][1] * m[2][2] - m[1][2] * m[2][1],
            m[0][2] * m[2][1] - m[0][1] * m[2][2],
            m[0][1] * m[1][2] - m[0][2] * m[1][1],
        ],
        [
            m[1][2] * m[2][0] - m[1][0] * m[2][2],
            m[0][0] * m[2][2] - m[0][2] * m[2][0],
            m[0][2] * m[1][0] - m[0][0] * m[1][2],
        ],
        [
            m[1][0] * m[2][1] - m[1][1] * m[2][0],
            m[0][1] * m[2][0] - m[0][0] * m[2][1],
            m[0][0] * m[1][1] - m[0][1] * m[1][0],
        ],
    ];
    let mut inv = adj;
    inv.iter_mut().flatten().for_each(|v| *v /= det);
    Homography(inv).normalized()
}

fn triangle_area2(a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> f64 {
    (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
}

fn check_no_three_collinear(pts: &[[f64; 2]; 4], which: &str) -> Result<()> {
    let scale = pts
        .iter()
        .flat_map(|p| pts.iter().map(move |q| (p[0] - q[0]).hypot(p[1] - q[1])))
        .fold(0.0, f64::max);
    if scale == 0.0 {
        return Err(Error::Degenerate(format!("{which} points coincide")));
    }
    for (i, j, k) in [(0, 1, 2), (0, 1, 3), (0, 2, 3), (1, 2, 3)] {
        if triangle_area2(pts[i], pts[j], pts[k]).abs() < 1e-12 * scale * scale {
            return Err(Error::Degenerate(format!(
                "{which} points {i}, {j}, {k} are collinear"
            )));
        }
    }
    Ok(())
}

/// Similarity that moves the centroid to the origin and the mean distance to
/// `sqrt(2)`.
fn conditioning(pts: &[[f64; 2]; 4]) -> Homography {
    let cx = pts.iter().map(|p| p[0]).sum::<f64>() / 4.0;
    let cy = pts.iter().map(|p| p[1]).sum::<f64>() / 4.0;
    let mean = pts.iter().map(|p| (p[0] - cx).hypot(p[1] - cy)).sum::<f64>() / 4.0;
    let s = std::f64::consts::SQRT_2 / mean;
    Homography([[s, 0.0, -s * cx], [0.0, s, -s * cy], [0.0, 0.0, 1.0]])
}

/// Solves `a x = b` for a dense 8x8 system by Gaussian elimination with
/// partial pivoting.
fn solve8(mut a: [[f64; 8]; 8], mut b: [f64; 8]) -> Result<[f64; 8]> {
    for col in 0..8 {
        let pivot = (col..8)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .expect("non-empty range");
        if a[pivot][col].abs() < 1e-12 {
            return Err(Error::Degenerate(format!(
                "homography system is singular at column {col}"
            )));
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..8 {
            let f = a[row][col] / a[col][col];
            if f == 0.0 {
                continue;
            }
            for k in col..8 {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = [0.0; 8];
    for row in (0..8).rev() {
        let tail: f64 = (row + 1..8).map(|k| a[row][k] * x[k]).sum();
        x[row] = (b[row] - tail) / a[row][row];
    }
    Ok(x)
}

/// Four-point direct linear transform: the homography mapping each `src`
/// corner onto the matching `dst` corner.
pub fn corners_to_homography(src: &[[f64; 2]; 4], dst: &[[f64; 2]; 4]) -> Result<Homography> {
    check_no_three_collinear(src, "source")?;
    check_no_three_collinear(dst, "destination")?;
    let ts = conditioning(src);
    let td = conditioning(dst);
    let mut a = [[0.0; 8]; 8];
    let mut b = [0.0; 8];
    for i in 0..4 {
        let (x, y) = ts.apply(src[i][0], src[i][1])?;
        let (u, v) = td.apply(dst[i][0], dst[i][1])?;
        a[2 * i] = [x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y];
        b[2 * i] = u;
        a[2 * i + 1] = [0.0, 0.0, 0.0, x, y, 1.0, -v * x, -v * y];
        b[2 * i + 1] = v;
    }
    let h = solve8(a, b)?;
    let conditioned = Homography([[h[0], h[1], h[2]], [h[3], h[4], h[5]], [h[6], h[7], 1.0]]);
    invert(&td)?.mul(&conditioned).mul(&ts).normalized()
}

/// Normalized coordinate of pixel index `i` on an axis of `extent` pixels.
pub fn pixel_to_norm(i: f64, extent: usize) -> f64 {
    2.0 * i / (extent as f64 - 1.0) - 1.0
}

pub fn norm_to_pixel(x: f64, extent: usize) -> f64 {
    (x + 1.0) * 0.5 * (extent as f64 - 1.0)
}

/// Expresses a pixel-space homography in normalized coordinates.
pub fn pixel_homography_to_norm(h: &Homography, width: usize, height: usize) -> Result<Homography> {
    let sx = 2.0 / (width as f64 - 1.0);
    let sy = 2.0 / (height as f64 - 1.0);
    let to_norm = Homography([[sx, 0.0, -1.0], [0.0, sy, -1.0], [0.0, 0.0, 1.0]]);
    to_norm.mul(h).mul(&invert(&to_norm)?).normalized()
}

/// Source locations for every output pixel of an `H x W` raster.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleGrid {
    /// `[H, W, 2]` of `(x, y)` in normalized coordinates.
    pub coords: Tensor,
}

impl SampleGrid {
    pub fn height(&self) -> usize {
        self.coords.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.coords.shape()[1]
    }
}

/// Grid generator for a single set of parameters (no gradient tracking;
/// see [`crate::autodiff::Graph::warp_grid`] for the differentiable form).
pub fn generate_grid(p: &WarpParams, height: usize, width: usize) -> Result<SampleGrid> {
    if height < 2 || width < 2 {
        return Err(Error::dim(
            "generate_grid",
            format!("raster {height}x{width} must be at least 2x2"),
        ));
    }
    let p = WarpParams::new(p.0)?;
    let coords = grid_forward(&p.0, 1, height, width)?;
    Ok(SampleGrid {
        coords: Tensor::new(vec![height, width, 2], coords)?,
    })
}

/// Grid of an arbitrary homography (used to synthesize perturbations).
pub fn homography_grid(h: &Homography, height: usize, width: usize) -> Result<SampleGrid> {
    generate_grid(&h.to_params()?, height, width)
}

/// Bilinear sampling of a `[N,C,H,W]` batch with one shared grid.
pub fn bilinear_sample(image: &Tensor, grid: &SampleGrid) -> Result<Tensor> {
    let s = image.shape();
    if s.len() != 4 {
        return Err(Error::dim("bilinear_sample", format!("image must be [N,C,H,W], got {s:?}")));
    }
    let (oh, ow) = (grid.height(), grid.width());
    let mut batched = Vec::with_capacity(s[0] * oh * ow * 2);
    for _ in 0..s[0] {
        batched.extend_from_slice(grid.coords.data());
    }
    let out = sample_forward(image.data(), s, &batched, oh, ow);
    Tensor::new(vec![s[0], s[1], oh, ow], out)
}

fn mesh(i: usize, j: usize, height: usize, width: usize) -> (f64, f64) {
    (pixel_to_norm(j as f64, width), pixel_to_norm(i as f64, height))
}

pub(crate) fn grid_forward(params: &[f64], batch: usize, height: usize, width: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(batch * height * width * 2);
    for n in 0..batch {
        let p = &params[n * WARP_DIM..(n + 1) * WARP_DIM];
        for i in 0..height {
            for j in 0..width {
                let (x, y) = mesh(i, j, height, width);
                let u = (1.0 + p[0]) * x + p[1] * y + p[2];
                let v = p[3] * x + (1.0 + p[4]) * y + p[5];
                let w = p[6] * x + p[7] * y + 1.0;
                if !(w.abs() >= MIN_PROJECTIVE_W) {
                    return Err(Error::DegenerateWarp {
                        sample: n,
                        row: i,
                        col: j,
                        w,
                    });
                }
                out.push(u / w);
                out.push(v / w);
            }
        }
    }
    Ok(out)
}

/// Derivative of `(u/w, v/w)` with respect to the 8 parameters, accumulated
/// with weights `(gx, gy)` into `gp`.
#[inline]
fn accumulate_param_grad(p: &[f64], x: f64, y: f64, gx: f64, gy: f64, gp: &mut [f64]) {
    let u = (1.0 + p[0]) * x + p[1] * y + p[2];
    let v = p[3] * x + (1.0 + p[4]) * y + p[5];
    let w = p[6] * x + p[7] * y + 1.0;
    let inv = 1.0 / w;
    let a = gx * inv;
    let b = gy * inv;
    gp[0] += a * x;
    gp[1] += a * y;
    gp[2] += a;
    gp[3] += b * x;
    gp[4] += b * y;
    gp[5] += b;
    let c = -(gx * u + gy * v) * inv * inv;
    gp[6] += c * x;
    gp[7] += c * y;
}

pub(crate) fn grid_backward(
    params: &[f64],
    batch: usize,
    height: usize,
    width: usize,
    grad_grid: &[f64],
    grad_params: &mut [f64],
) {
    for n in 0..batch {
        let p = &params[n * WARP_DIM..(n + 1) * WARP_DIM];
        let gp = &mut grad_params[n * WARP_DIM..(n + 1) * WARP_DIM];
        for i in 0..height {
            for j in 0..width {
                let (x, y) = mesh(i, j, height, width);
                let k = ((n * height + i) * width + j) * 2;
                accumulate_param_grad(p, x, y, grad_grid[k], grad_grid[k + 1], gp);
            }
        }
    }
}

pub(crate) fn project_forward(params: &[f64], batch: usize, points: &[[f64; 2]]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(batch * points.len() * 2);
    for n in 0..batch {
        let p = &params[n * WARP_DIM..(n + 1) * WARP_DIM];
        for (k, &[x, y]) in points.iter().enumerate() {
            let w = p[6] * x + p[7] * y + 1.0;
            if !(w.abs() >= MIN_PROJECTIVE_W) {
                return Err(Error::DegenerateWarp {
                    sample: n,
                    row: k,
                    col: 0,
                    w,
                });
            }
            out.push(((1.0 + p[0]) * x + p[1] * y + p[2]) / w);
            out.push((p[3] * x + (1.0 + p[4]) * y + p[5]) / w);
        }
    }
    Ok(out)
}

pub(crate) fn project_backward(
    params: &[f64],
    batch: usize,
    points: &[[f64; 2]],
    grad_out: &[f64],
    grad_params: &mut [f64],
) {
    for n in 0..batch {
        let p = &params[n * WARP_DIM..(n + 1) * WARP_DIM];
        let gp = &mut grad_params[n * WARP_DIM..(n + 1) * WARP_DIM];
        for (k, &[x, y]) in points.iter().enumerate() {
            let o = (n * points.len() + k) * 2;
            accumulate_param_grad(p, x, y, grad_out[o], grad_out[o + 1], gp);
        }
    }
}

#[inline]
fn to_pixel(g: f64, extent: usize) -> f64 {
    let px = norm_to_pixel(g, extent);
    let r = px.round();
    if (px - r).abs() < SNAP_TOL {
        r
    } else {
        px
    }
}

/// Neighbour lookup with zero padding.
#[inline]
fn at(plane: &[f64], h: usize, w: usize, y: isize, x: isize) -> f64 {
    if x < 0 || y < 0 || x >= w as isize || y >= h as isize {
        0.0
    } else {
        plane[y as usize * w + x as usize]
    }
}

pub(crate) fn sample_forward(image: &[f64], shape: &[usize], grid: &[f64], oh: usize, ow: usize) -> Vec<f64> {
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let mut out = vec![0.0; n * c * oh * ow];
    for b in 0..n {
        for i in 0..oh {
            for j in 0..ow {
                let k = ((b * oh + i) * ow + j) * 2;
                let px = to_pixel(grid[k], w);
                let py = to_pixel(grid[k + 1], h);
                let (x0, y0) = (px.floor(), py.floor());
                let (fx, fy) = (px - x0, py - y0);
                let (x0, y0) = (x0 as isize, y0 as isize);
                for ch in 0..c {
                    let plane = &image[(b * c + ch) * h * w..(b * c + ch + 1) * h * w];
                    let v00 = at(plane, h, w, y0, x0);
                    let v01 = at(plane, h, w, y0, x0 + 1);
                    let v10 = at(plane, h, w, y0 + 1, x0);
                    let v11 = at(plane, h, w, y0 + 1, x0 + 1);
                    out[((b * c + ch) * oh + i) * ow + j] = (1.0 - fy) * ((1.0 - fx) * v00 + fx * v01)
                        + fy * ((1.0 - fx) * v10 + fx * v11);
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn sample_backward(
    image: &[f64],
    shape: &[usize],
    grid: &[f64],
    oh: usize,
    ow: usize,
    grad_out: &[f64],
    mut grad_image: Option<&mut [f64]>,
    mut grad_grid: Option<&mut [f64]>,
) {
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let sx = 0.5 * (w as f64 - 1.0);
    let sy = 0.5 * (h as f64 - 1.0);
    for b in 0..n {
        for i in 0..oh {
            for j in 0..ow {
                let k = ((b * oh + i) * ow + j) * 2;
                let px = to_pixel(grid[k], w);
                let py = to_pixel(grid[k + 1], h);
                let (x0f, y0f) = (px.floor(), py.floor());
                let (fx, fy) = (px - x0f, py - y0f);
                let (x0, y0) = (x0f as isize, y0f as isize);
                let mut dpx = 0.0;
                let mut dpy = 0.0;
                for ch in 0..c {
                    let g = grad_out[((b * c + ch) * oh + i) * ow + j];
                    if g == 0.0 {
                        continue;
                    }
                    let off = (b * c + ch) * h * w;
                    if let Some(gi) = grad_image.as_deref_mut() {
                        let plane = &mut gi[off..off + h * w];
                        let weights = [
                            (y0, x0, (1.0 - fy) * (1.0 - fx)),
                            (y0, x0 + 1, (1.0 - fy) * fx),
                            (y0 + 1, x0, fy * (1.0 - fx)),
                            (y0 + 1, x0 + 1, fy * fx),
                        ];
                        for (yy, xx, wt) in weights {
                            if xx >= 0 && yy >= 0 && (xx as usize) < w && (yy as usize) < h {
                                plane[yy as usize * w + xx as usize] += g * wt;
                            }
                        }
                    }
                    if grad_grid.is_some() {
                        let plane = &image[off..off + h * w];
                        let v00 = at(plane, h, w, y0, x0);
                        let v01 = at(plane, h, w, y0, x0 + 1);
                        let v10 = at(plane, h, w, y0 + 1, x0);
                        let v11 = at(plane, h, w, y0 + 1, x0 + 1);
                        dpx += g * ((1.0 - fy) * (v01 - v00) + fy * (v11 - v10));
                        dpy += g * ((1.0 - fx) * (v10 - v00) + fx * (v11 - v01));
                    }
                }
                if let Some(gg) = grad_grid.as_deref_mut() {
                    gg[k] += dpx * sx;
                    gg[k + 1] += dpy * sy;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn close(a: &Homography, b: &Homography, tol: f64) -> bool {
        a.0.iter()
            .flatten()
            .zip(b.0.iter().flatten())
            .all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn params_layout() {
        assert_eq!(params_to_homography(&WarpParams::IDENTITY).unwrap(), Homography::IDENTITY);
        let t = params_to_homography(&WarpParams([0.0, 0.0, 0.3, 0.0, 0.0, -0.2, 0.0, 0.0])).unwrap();
        assert_eq!(t, Homography::translation(0.3, -0.2));
        let s = params_to_homography(&WarpParams([0.1, 0.0, 0.0, 0.0, 0.1, 0.0, 0.0, 0.0])).unwrap();
        assert_eq!(s.0, [[1.1, 0.0, 0.0], [0.0, 1.1, 0.0], [0.0, 0.0, 1.0]]);
        assert!(matches!(
            params_to_homography(&WarpParams([f64::NAN, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0])),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn additive_composition() {
        let p = WarpParams([0.5, -1.0, 2.0, 0.0, 0.25, 1.0, 3.0, -2.0]);
        assert_eq!(compose_additive(&p, &WarpParams::IDENTITY), p);
        assert_eq!(compose_additive(&WarpParams::IDENTITY, &p), p);
        let ones = WarpParams([1.0; 8]);
        assert_eq!(compose_additive(&ones, &ones), WarpParams([2.0; 8]));
    }

    #[test]
    fn identity_grid_is_meshgrid() {
        let g = generate_grid(&WarpParams::IDENTITY, 3, 5).unwrap();
        for i in 0..3 {
            for j in 0..5 {
                let k = (i * 5 + j) * 2;
                assert_eq!(g.coords.data()[k], pixel_to_norm(j as f64, 5));
                assert_eq!(g.coords.data()[k + 1], pixel_to_norm(i as f64, 3));
            }
        }
    }

    #[test]
    fn translation_grid_shifts() {
        let base = generate_grid(&WarpParams::IDENTITY, 4, 4).unwrap();
        let g = generate_grid(&WarpParams([0.0, 0.0, 0.25, 0.0, 0.0, -0.5, 0.0, 0.0]), 4, 4).unwrap();
        for (k, (a, b)) in g.coords.data().iter().zip(base.coords.data()).enumerate() {
            let shift = if k % 2 == 0 { 0.25 } else { -0.5 };
            assert!((a - b - shift).abs() < 1e-15);
        }
    }

    #[test]
    fn projective_corner_value() {
        let g = generate_grid(&WarpParams([0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.5, 0.0]), 2, 2).unwrap();
        // Bottom-right output pixel is (1, 1): w = 1.5.
        let k = (2 + 1) * 2;
        assert!((g.coords.data()[k] - 1.0 / 1.5).abs() < 1e-15);
        assert!((g.coords.data()[k + 1] - 1.0 / 1.5).abs() < 1e-15);
    }

    #[test]
    fn degenerate_grid_names_pixel() {
        // w = 1 + p7 * x vanishes at x = 1 (the last column) for p7 = -1.
        let err = generate_grid(&WarpParams([0.0, 0.0, 0.0, 0.0, 0.0, 0.0, -1.0, 0.0]), 3, 3).unwrap_err();
        match err {
            Error::DegenerateWarp { row, col, .. } => assert_eq!((row, col), (0, 2)),
            other => panic!("unexpected {other:?}"),
        }
        assert!(generate_grid(&WarpParams::IDENTITY, 1, 4).is_err());
    }

    #[test]
    fn identity_sampling_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (h, w) in [(28, 28), (36, 36), (7, 13)] {
            let data: Vec<f64> = (0..2 * h * w).map(|_| rng.random::<f64>()).collect();
            let img = Tensor::new(vec![1, 2, h, w], data).unwrap();
            let grid = generate_grid(&WarpParams::IDENTITY, h, w).unwrap();
            let out = bilinear_sample(&img, &grid).unwrap();
            assert_eq!(out, img);
        }
    }

    #[test]
    fn midpoint_and_padding() {
        let img = Tensor::new(vec![1, 1, 2, 2], vec![0.0, 4.0, 0.0, 4.0]).unwrap();
        let mid = SampleGrid {
            coords: Tensor::new(vec![1, 1, 2], vec![0.0, -1.0]).unwrap(),
        };
        assert_eq!(bilinear_sample(&img, &mid).unwrap().data(), &[2.0]);
        let outside = SampleGrid {
            coords: Tensor::new(vec![1, 1, 2], vec![5.0, -7.0]).unwrap(),
        };
        assert_eq!(bilinear_sample(&img, &outside).unwrap().data(), &[0.0]);
    }

    #[test]
    fn dlt_examples() {
        let square = [[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]];
        let h = corners_to_homography(&square, &square).unwrap();
        assert!(close(&h, &Homography::IDENTITY, 1e-12));

        let shifted = square.map(|p| [p[0] + 0.3, p[1] + 0.3]);
        let h = corners_to_homography(&square, &shifted).unwrap();
        assert!(close(&h, &Homography::translation(0.3, 0.3), 1e-12));

        let quad = [[0.0, 0.0], [1.0, 0.1], [1.1, 1.0], [0.0, 1.0]];
        let h = corners_to_homography(&square, &quad).unwrap();
        for (s, d) in square.iter().zip(&quad) {
            let (x, y) = h.apply(s[0], s[1]).unwrap();
            assert!((x - d[0]).abs() < 1e-9 && (y - d[1]).abs() < 1e-9);
        }
    }

    #[test]
    fn dlt_rejects_collinear() {
        let line = [[0.0, 0.0], [1.0, 0.0], [2.0, 0.0], [0.0, 1.0]];
        let square = [[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]];
        assert!(matches!(corners_to_homography(&line, &square), Err(Error::Degenerate(_))));
        assert!(matches!(corners_to_homography(&square, &line), Err(Error::Degenerate(_))));
    }

    #[test]
    fn inverse_examples() {
        assert_eq!(invert(&Homography::IDENTITY).unwrap(), Homography::IDENTITY);
        let t = invert(&Homography::translation(2.0, -3.0)).unwrap();
        assert!(close(&t, &Homography::translation(-2.0, 3.0), 1e-15));

        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let mut m = [[0.0; 3]; 3];
            m.iter_mut().flatten().for_each(|v| *v = rng.random_range(-1.0..1.0));
            m[2][2] = 1.0;
            let h = Homography(m);
            if h.det().abs() < 1e-3 {
                continue;
            }
            let prod = h.mul(&invert(&h).unwrap()).normalized().unwrap();
            assert!(close(&prod, &Homography::IDENTITY, 1e-9), "{prod:?}");
        }
        let singular = Homography([[1.0, 2.0, 3.0], [2.0, 4.0, 6.0], [0.0, 0.0, 1.0]]);
        assert!(matches!(invert(&singular), Err(Error::Degenerate(_))));
    }

    #[test]
    fn params_round_trip_through_homography() {
        let p = WarpParams([0.05, -0.02, 0.1, 0.03, -0.04, -0.07, 0.01, -0.02]);
        let back = params_to_homography(&p).unwrap().to_params().unwrap();
        for (a, b) in back.0.iter().zip(p.0) {
            assert!((a - b).abs() < 1e-15);
        }
    }
}
