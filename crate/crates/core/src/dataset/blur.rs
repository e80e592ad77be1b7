//! Shift-invariant blur: random motion PSFs and true 2D convolution.
//!
//! Kernels are rasterized sub-pixel motion trajectories — a damped random
//! walk splatted bilinearly onto a grid — normalized to unit mass, with
//! support capped at 31×31.

use rand::Rng;

use crate::error::{Error, Result};
use crate::image_buf::ImageBuf;

pub const MAX_KERNEL_SIZE: usize = 31;
const WALK_STEPS: usize = 48;

/// Normalized point-spread function with odd square support; the anchor is
/// the geometric center `(size−1)/2`.
#[derive(Clone, Debug)]
pub struct BlurKernel {
    size: usize,
    k: Vec<f32>,
}

impl BlurKernel {
    pub fn new(size: usize, k: Vec<f32>) -> Result<Self> {
        if size == 0 || size % 2 == 0 || size > MAX_KERNEL_SIZE {
            return Err(Error::Unsupported {
                op: "BlurKernel::new",
                detail: format!("size {size} must be odd and within 1..={MAX_KERNEL_SIZE}"),
            });
        }
        if k.len() != size * size {
            return Err(Error::ShapeMismatch {
                op: "BlurKernel::new",
                detail: format!("{size}x{size} kernel needs {} taps, got {}", size * size, k.len()),
            });
        }
        let sum: f64 = k.iter().map(|&v| v as f64).sum();
        if k.iter().any(|&v| !v.is_finite() || v < 0.0) || (sum - 1.0).abs() > 1e-6 {
            return Err(Error::Unsupported {
                op: "BlurKernel::new",
                detail: format!("taps must be finite, non-negative, and sum to 1 (sum = {sum})"),
            });
        }
        Ok(Self { size, k })
    }

    /// The 1×1 identity kernel.
    pub fn delta() -> Self {
        Self { size: 1, k: vec![1.0] }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn taps(&self) -> &[f32] {
        &self.k
    }

    #[inline]
    fn at(&self, i: usize, j: usize) -> f32 {
        self.k[j * self.size + i]
    }

    /// Translates the mass by integer `(dx, dy)` within the same support;
    /// `None` if any non-zero tap would leave it. Used to verify the
    /// shift-ambiguity identity: blurring a shifted image with the oppositely
    /// shifted kernel reproduces the original blur.
    pub fn shifted(&self, dx: i32, dy: i32) -> Option<BlurKernel> {
        let s = self.size as i32;
        let mut k = vec![0.0f32; self.k.len()];
        for j in 0..s {
            for i in 0..s {
                let v = self.at(i as usize, j as usize);
                if v == 0.0 {
                    continue;
                }
                let (ni, nj) = (i + dx, j + dy);
                if ni < 0 || nj < 0 || ni >= s || nj >= s {
                    return None;
                }
                k[(nj * s + ni) as usize] = v;
            }
        }
        Some(BlurKernel { size: self.size, k })
    }

    /// Second-moment blur extent: `4·σ` of the mass distribution, which for a
    /// uniform straight-line PSF of length L is ≈1.15·L — commensurate with
    /// the flow-integrated path-length estimate used for averaged pairs.
    pub fn blur_size_estimate(&self) -> f64 {
        let (mut mx, mut my) = (0.0f64, 0.0f64);
        for j in 0..self.size {
            for i in 0..self.size {
                let w = self.at(i, j) as f64;
                mx += w * i as f64;
                my += w * j as f64;
            }
        }
        let mut var = 0.0f64;
        for j in 0..self.size {
            for i in 0..self.size {
                let w = self.at(i, j) as f64;
                let (dx, dy) = (i as f64 - mx, j as f64 - my);
                var += w * (dx * dx + dy * dy);
            }
        }
        4.0 * var.sqrt()
    }
}

/// Rasterizes a damped random-walk trajectory into a PSF. The walk runs on
/// the full 31×31 grid; the lit region is then cropped to a tight odd square
/// and renormalized.
pub fn random_blur_kernel<R: Rng>(rng: &mut R) -> BlurKernel {
    let full = MAX_KERNEL_SIZE;
    let mut grid = vec![0.0f64; full * full];
    let c = (full / 2) as f64;
    let (mut x, mut y) = (c, c);
    let speed = rng.random_range(0.05..0.85);
    let angle = rng.random_range(0.0..std::f64::consts::TAU);
    let (mut vx, mut vy) = (speed * angle.cos(), speed * angle.sin());

    for _ in 0..WALK_STEPS {
        // Bilinear splat of unit mass at the current sub-pixel position.
        let (x0, y0) = (x.floor(), y.floor());
        let (fx, fy) = (x - x0, y - y0);
        let (i, j) = (x0 as usize, y0 as usize);
        grid[j * full + i] += (1.0 - fx) * (1.0 - fy);
        grid[j * full + i + 1] += fx * (1.0 - fy);
        grid[(j + 1) * full + i] += (1.0 - fx) * fy;
        grid[(j + 1) * full + i + 1] += fx * fy;

        vx = 0.97 * vx + rng.random_range(-0.12..0.12);
        vy = 0.97 * vy + rng.random_range(-0.12..0.12);
        x = (x + vx).clamp(1.0, full as f64 - 2.001);
        y = (y + vy).clamp(1.0, full as f64 - 2.001);
    }

    // Tight bounding box of the lit taps, expanded to an odd square.
    let (mut i0, mut i1, mut j0, mut j1) = (full, 0usize, full, 0usize);
    for j in 0..full {
        for i in 0..full {
            if grid[j * full + i] > 0.0 {
                i0 = i0.min(i);
                i1 = i1.max(i);
                j0 = j0.min(j);
                j1 = j1.max(j);
            }
        }
    }
    let extent = (i1 - i0 + 1).max(j1 - j0 + 1);
    let size = (extent | 1).min(full); // force odd
    let mut k = vec![0.0f32; size * size];
    let total: f64 = grid.iter().sum();
    for j in 0..=(j1 - j0) {
        for i in 0..=(i1 - i0) {
            k[j * size + i] = (grid[(j0 + j) * full + (i0 + i)] / total) as f32;
        }
    }
    // Renormalize in f32 so the unit-sum invariant holds in the stored dtype.
    let sum: f32 = k.iter().sum();
    for v in &mut k {
        *v /= sum;
    }
    BlurKernel { size, k }
}

/// True 2D convolution with zero padding:
/// `out(x, y) = Σ_{s} k(s) · img(x − sx, y − sy)` with `s` measured from the
/// kernel center. Output size equals input size.
pub fn apply_blur(img: &ImageBuf, kernel: &BlurKernel) -> ImageBuf {
    let (w, h) = (img.width(), img.height());
    let size = kernel.size as i32;
    let c = (size - 1) / 2;
    let mut out = ImageBuf::new(w, h);
    for ch in 0..3 {
        for y in 0..h as i32 {
            for x in 0..w as i32 {
                let mut acc = 0.0f32;
                for j in 0..size {
                    for i in 0..size {
                        let tap = kernel.at(i as usize, j as usize);
                        if tap == 0.0 {
                            continue;
                        }
                        let sx = x - (i - c);
                        let sy = y - (j - c);
                        if sx >= 0 && sy >= 0 && sx < w as i32 && sy < h as i32 {
                            acc += tap * img.get(ch, sx as usize, sy as usize);
                        }
                    }
                }
                out.set(ch, x as usize, y as usize, acc);
            }
        }
    }
    out
}
