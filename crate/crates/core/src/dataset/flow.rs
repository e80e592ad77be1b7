//! Dense optical flow via coarse-to-fine pyramidal Lucas-Kanade.
//!
//! The pairing pipeline only needs reliable magnitudes around one pixel to
//! gate clips and integrate blur sizes, so a classical 3-level LK (5×5
//! window, 3 warp iterations per level) replaces the learned flow model the
//! capture protocol originally used.

use crate::error::{Error, Result};
use crate::image_buf::ImageBuf;

pub const PYRAMID_LEVELS: usize = 3;
pub const WINDOW_RADIUS: usize = 2; // 5×5 window
pub const WARP_ITERATIONS: usize = 3;
/// Smallest eigenvalue of the 2×2 structure tensor below which a pixel
/// counts as degenerate (no usable texture) for the confidence statistic.
const LAMBDA_MIN: f32 = 1e-6;
/// Tikhonov damping added to the structure tensor's diagonal. Well-textured
/// window sums sit around 0.1–1, so strong directions are barely touched,
/// while aperture-problem directions (λ ≈ 1e-3) get their updates shrunk
/// hard and stay near the coarse-to-fine prior instead of running away.
const DAMPING: f32 = 1e-2;
/// A single LK iteration cannot see motion beyond its window.
const MAX_STEP: f32 = WINDOW_RADIUS as f32;

/// Per-pixel displacement from the first image to the second, in pixels.
#[derive(Clone, Debug)]
pub struct FlowField {
    pub width: usize,
    pub height: usize,
    pub u: Vec<f32>,
    pub v: Vec<f32>,
    /// Set when most pixels had a degenerate structure tensor (e.g. constant
    /// images); the zero flow reported there is a convention, not a
    /// measurement.
    pub low_confidence: bool,
}

/// Pixels within this margin of the border have truncated solver windows and
/// can reference content that exists in only one of the two frames, so their
/// flow is unreliable by construction. Field-level statistics skip them.
pub const VALID_MARGIN: usize = WINDOW_RADIUS + 2;

impl FlowField {
    pub fn magnitudes(&self) -> Vec<f32> {
        self.u
            .iter()
            .zip(&self.v)
            .map(|(&u, &v)| (u * u + v * v).sqrt())
            .collect()
    }

    /// Magnitudes over pixels at least [`VALID_MARGIN`] from every border —
    /// or the full field when the image has no such interior.
    pub fn interior_magnitudes(&self) -> Vec<f32> {
        let m = VALID_MARGIN;
        if self.width <= 2 * m || self.height <= 2 * m {
            return self.magnitudes();
        }
        let mut out = Vec::with_capacity((self.width - 2 * m) * (self.height - 2 * m));
        for y in m..self.height - m {
            for x in m..self.width - m {
                let i = y * self.width + x;
                let (u, v) = (self.u[i], self.v[i]);
                out.push((u * u + v * v).sqrt());
            }
        }
        out
    }
}

/// Nearest-rank percentile (`p` in [0, 100]) of an unsorted slice.
pub fn percentile(xs: &[f32], p: f64) -> f32 {
    if xs.is_empty() {
        return 0.0;
    }
    let mut sorted = xs.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

/// Grayscale raster with the handful of operations LK needs.
struct Gray {
    w: usize,
    h: usize,
    pix: Vec<f32>,
}

impl Gray {
    fn from_image(img: &ImageBuf) -> Self {
        Gray {
            w: img.width(),
            h: img.height(),
            pix: img.to_gray(),
        }
    }

    #[inline]
    fn at(&self, x: isize, y: isize) -> f32 {
        let xc = x.clamp(0, self.w as isize - 1) as usize;
        let yc = y.clamp(0, self.h as isize - 1) as usize;
        self.pix[yc * self.w + xc]
    }

    fn bilinear(&self, x: f32, y: f32) -> f32 {
        let xf = x.clamp(0.0, (self.w - 1) as f32);
        let yf = y.clamp(0.0, (self.h - 1) as f32);
        let x0 = xf.floor() as usize;
        let y0 = yf.floor() as usize;
        let x1 = (x0 + 1).min(self.w - 1);
        let y1 = (y0 + 1).min(self.h - 1);
        let fx = xf - x0 as f32;
        let fy = yf - y0 as f32;
        let top = self.pix[y0 * self.w + x0] * (1.0 - fx) + self.pix[y0 * self.w + x1] * fx;
        let bot = self.pix[y1 * self.w + x0] * (1.0 - fx) + self.pix[y1 * self.w + x1] * fx;
        top * (1.0 - fy) + bot * fy
    }

    /// 2×2 area mean with floor extents, the pyramid's downsampling step.
    fn half(&self) -> Gray {
        let (w, h) = (self.w / 2, self.h / 2);
        let mut pix = vec![0.0f32; w * h];
        for y in 0..h {
            for x in 0..w {
                let i = 2 * y * self.w + 2 * x;
                pix[y * w + x] =
                    0.25 * (self.pix[i] + self.pix[i + 1] + self.pix[i + self.w] + self.pix[i + self.w + 1]);
            }
        }
        Gray { w, h, pix }
    }

    /// Separable binomial [1 2 1]/4 smoothing with clamped borders. LK
    /// differentiates its inputs, so pixel-scale noise must be attenuated
    /// first or the per-window solutions scatter far beyond the true motion.
    fn smoothed(&self) -> Gray {
        let (w, h) = (self.w, self.h);
        let mut tmp = vec![0.0f32; w * h];
        for y in 0..h as isize {
            for x in 0..w as isize {
                tmp[y as usize * w + x as usize] =
                    0.25 * self.at(x - 1, y) + 0.5 * self.at(x, y) + 0.25 * self.at(x + 1, y);
            }
        }
        let horiz = Gray { w, h, pix: tmp };
        let mut pix = vec![0.0f32; w * h];
        for y in 0..h as isize {
            for x in 0..w as isize {
                pix[y as usize * w + x as usize] = 0.25 * horiz.at(x, y - 1)
                    + 0.5 * horiz.at(x, y)
                    + 0.25 * horiz.at(x, y + 1);
            }
        }
        Gray { w, h, pix }
    }
}

/// Box sum over the (2r+1)² window clamped to the image, separable passes.
fn box_sum(src: &[f32], w: usize, h: usize, r: usize) -> Vec<f32> {
    let r = r as isize;
    let mut rows = vec![0.0f32; w * h];
    for y in 0..h {
        let line = &src[y * w..(y + 1) * w];
        for x in 0..w as isize {
            let lo = (x - r).max(0) as usize;
            let hi = ((x + r) as usize).min(w - 1);
            rows[y * w + x as usize] = line[lo..=hi].iter().sum();
        }
    }
    let mut out = vec![0.0f32; w * h];
    for y in 0..h as isize {
        let lo = (y - r).max(0) as usize;
        let hi = ((y + r) as usize).min(h - 1);
        for x in 0..w {
            let mut s = 0.0;
            for yy in lo..=hi {
                s += rows[yy * w + x];
            }
            out[y as usize * w + x] = s;
        }
    }
    out
}

/// Refines `(u, v)` in place with LK warp iterations at one pyramid level.
/// Returns the count of degenerate pixels in the final iteration.
fn lk_level(a: &Gray, b: &Gray, u: &mut [f32], v: &mut [f32]) -> usize {
    let (w, h) = (a.w, a.h);
    let n = w * h;

    // Template gradients (central differences, clamped at borders).
    let mut ix = vec![0.0f32; n];
    let mut iy = vec![0.0f32; n];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let i = y as usize * w + x as usize;
            ix[i] = 0.5 * (a.at(x + 1, y) - a.at(x - 1, y));
            iy[i] = 0.5 * (a.at(x, y + 1) - a.at(x, y - 1));
        }
    }
    let gxx = box_sum(&ix.iter().map(|g| g * g).collect::<Vec<_>>(), w, h, WINDOW_RADIUS);
    let gxy = box_sum(
        &ix.iter().zip(&iy).map(|(gx, gy)| gx * gy).collect::<Vec<_>>(),
        w,
        h,
        WINDOW_RADIUS,
    );
    let gyy = box_sum(&iy.iter().map(|g| g * g).collect::<Vec<_>>(), w, h, WINDOW_RADIUS);

    let mut degenerate = 0;
    let mut it = vec![0.0f32; n];
    for _ in 0..WARP_ITERATIONS {
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                it[i] = b.bilinear(x as f32 + u[i], y as f32 + v[i]) - a.pix[i];
            }
        }
        let bx = box_sum(
            &ix.iter().zip(&it).map(|(g, t)| g * t).collect::<Vec<_>>(),
            w,
            h,
            WINDOW_RADIUS,
        );
        let by = box_sum(
            &iy.iter().zip(&it).map(|(g, t)| g * t).collect::<Vec<_>>(),
            w,
            h,
            WINDOW_RADIUS,
        );

        degenerate = 0;
        for i in 0..n {
            let (xx, xy, yy) = (gxx[i], gxy[i], gyy[i]);
            let det = xx * yy - xy * xy;
            let trace = xx + yy;
            let lambda_min = 0.5 * (trace - (trace * trace - 4.0 * det).max(0.0).sqrt());
            if lambda_min <= LAMBDA_MIN {
                degenerate += 1;
            }
            // Damped solve of (G + εI) δ = −b; exact zero stays exact zero.
            let (dxx, dyy) = (xx + DAMPING, yy + DAMPING);
            let ddet = dxx * dyy - xy * xy;
            let du = (-(dyy * bx[i] - xy * by[i]) / ddet).clamp(-MAX_STEP, MAX_STEP);
            let dv = (-(dxx * by[i] - xy * bx[i]) / ddet).clamp(-MAX_STEP, MAX_STEP);
            u[i] += du;
            v[i] += dv;
        }
    }
    degenerate
}

/// Bilinearly upsamples a coarse flow component to `w × h`, doubling values.
fn upsample_flow(coarse: &[f32], cw: usize, ch: usize, w: usize, h: usize) -> Vec<f32> {
    let grid = Gray {
        w: cw,
        h: ch,
        pix: coarse.to_vec(),
    };
    let mut out = vec![0.0f32; w * h];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = 2.0 * grid.bilinear(x as f32 / 2.0, y as f32 / 2.0);
        }
    }
    out
}

/// Dense displacement from `a` to `b`: `b(x + u, y + v) ≈ a(x, y)`.
pub fn estimate_flow(a: &ImageBuf, b: &ImageBuf) -> Result<FlowField> {
    if a.width() != b.width() || a.height() != b.height() {
        return Err(Error::ShapeMismatch {
            op: "estimate_flow",
            detail: format!(
                "{}x{} vs {}x{}",
                a.width(),
                a.height(),
                b.width(),
                b.height()
            ),
        });
    }

    let mut pyr_a = vec![Gray::from_image(a)];
    let mut pyr_b = vec![Gray::from_image(b)];
    for _ in 1..PYRAMID_LEVELS {
        let next = pyr_a.last().unwrap().half();
        if next.w < 2 * WINDOW_RADIUS + 1 || next.h < 2 * WINDOW_RADIUS + 1 {
            break;
        }
        pyr_a.push(next);
        pyr_b.push(pyr_b.last().unwrap().half());
    }

    let coarsest = pyr_a.len() - 1;
    let mut u = vec![0.0f32; pyr_a[coarsest].w * pyr_a[coarsest].h];
    let mut v = u.clone();
    let mut degenerate = 0;
    for level in (0..=coarsest).rev() {
        let (la, lb) = (pyr_a[level].smoothed(), pyr_b[level].smoothed());
        if level != coarsest {
            let prev = &pyr_a[level + 1];
            u = upsample_flow(&u, prev.w, prev.h, la.w, la.h);
            v = upsample_flow(&v, prev.w, prev.h, la.w, la.h);
        }
        degenerate = lk_level(&la, &lb, &mut u, &mut v);
    }

    let full = &pyr_a[0];
    let low_confidence = degenerate * 2 > full.w * full.h;
    Ok(FlowField {
        width: full.w,
        height: full.h,
        u,
        v,
        low_confidence,
    })
}
