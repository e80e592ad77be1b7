//! Linear-light RGB image buffers.
//!
//! Files are 8-bit sRGB; everything in memory is linear [0,1] `f32`, planar
//! RGB (`data[c·H·W + y·W + x]`). The sRGB transfer conversion is an explicit,
//! separately tested step at the I/O boundary.

use std::path::Path;
use std::sync::OnceLock;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct ImageBuf {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

/// sRGB electro-optical transfer (decode), computed in f64 for headroom.
fn srgb_decode(encoded: f64) -> f64 {
    if encoded <= 0.04045 {
        encoded / 12.92
    } else {
        ((encoded + 0.055) / 1.055).powf(2.4)
    }
}

/// Inverse transfer (encode linear → sRGB-encoded, both in [0,1]).
fn srgb_encode(linear: f64) -> f64 {
    if linear <= 0.0031308 {
        12.92 * linear
    } else {
        1.055 * linear.powf(1.0 / 2.4) - 0.055
    }
}

fn decode_lut() -> &'static [f32; 256] {
    static LUT: OnceLock<[f32; 256]> = OnceLock::new();
    LUT.get_or_init(|| {
        let mut lut = [0.0f32; 256];
        for (v, slot) in lut.iter_mut().enumerate() {
            *slot = srgb_decode(v as f64 / 255.0) as f32;
        }
        lut
    })
}

pub fn srgb_u8_to_linear(v: u8) -> f32 {
    decode_lut()[v as usize]
}

pub fn linear_to_srgb_u8(linear: f32) -> u8 {
    let encoded = srgb_encode((linear as f64).clamp(0.0, 1.0));
    (encoded * 255.0).round().clamp(0.0, 255.0) as u8
}

impl ImageBuf {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; 3 * width * height],
        }
    }

    pub fn from_planar(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != 3 * width * height {
            return Err(Error::ShapeMismatch {
                op: "ImageBuf::from_planar",
                detail: format!(
                    "{width}x{height} RGB needs {} floats, got {}",
                    3 * width * height,
                    data.len()
                ),
            });
        }
        Ok(Self { width, height, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, c: usize, x: usize, y: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, x: usize, y: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    /// Bilinear sample with edge clamping; coordinates are pixel centers.
    pub fn bilinear(&self, c: usize, x: f32, y: f32) -> f32 {
        let xf = x.clamp(0.0, (self.width - 1) as f32);
        let yf = y.clamp(0.0, (self.height - 1) as f32);
        let x0 = xf.floor() as usize;
        let y0 = yf.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let fx = xf - x0 as f32;
        let fy = yf - y0 as f32;
        let p00 = self.get(c, x0, y0);
        let p10 = self.get(c, x1, y0);
        let p01 = self.get(c, x0, y1);
        let p11 = self.get(c, x1, y1);
        (p00 * (1.0 - fx) + p10 * fx) * (1.0 - fy) + (p01 * (1.0 - fx) + p11 * fx) * fy
    }

    /// Translates content by `(dx, dy)` pixels: `out(x,y) = in(x−dx, y−dy)`,
    /// bilinear with edge clamp.
    pub fn shift_by(&self, dx: f32, dy: f32) -> ImageBuf {
        let mut out = ImageBuf::new(self.width, self.height);
        for c in 0..3 {
            for y in 0..self.height {
                for x in 0..self.width {
                    out.set(c, x, y, self.bilinear(c, x as f32 - dx, y as f32 - dy));
                }
            }
        }
        out
    }

    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<ImageBuf> {
        if x0 + w > self.width || y0 + h > self.height {
            return Err(Error::ShapeMismatch {
                op: "ImageBuf::crop",
                detail: format!(
                    "crop {w}x{h}+{x0}+{y0} exceeds image {}x{}",
                    self.width, self.height
                ),
            });
        }
        let mut out = ImageBuf::new(w, h);
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    out.set(c, x, y, self.get(c, x0 + x, y0 + y));
                }
            }
        }
        Ok(out)
    }

    /// Pads by mirroring without repeating the border pixel (reflect-101):
    /// column −1 reads column 1, column `w` reads column `w−2`.
    pub fn pad_reflect101(&self, left: usize, right: usize, top: usize, bottom: usize) -> Result<ImageBuf> {
        // Reflection about both edges is periodic with period 2n−2; padding
        // beyond one period would need repeated mirroring, which no caller
        // legitimately wants.
        if self.width < 2 || self.height < 2
            || left.max(right) >= self.width
            || top.max(bottom) >= self.height
        {
            return Err(Error::Unsupported {
                op: "pad_reflect101",
                detail: format!(
                    "padding ({left},{right},{top},{bottom}) too large for {}x{} image",
                    self.width, self.height
                ),
            });
        }
        let mirror = |i: isize, n: usize| -> usize {
            if i < 0 {
                (-i) as usize
            } else if i as usize >= n {
                2 * n - 2 - i as usize
            } else {
                i as usize
            }
        };
        let (w, h) = (self.width + left + right, self.height + top + bottom);
        let mut out = ImageBuf::new(w, h);
        for c in 0..3 {
            for y in 0..h {
                let sy = mirror(y as isize - top as isize, self.height);
                for x in 0..w {
                    let sx = mirror(x as isize - left as isize, self.width);
                    out.set(c, x, y, self.get(c, sx, sy));
                }
            }
        }
        Ok(out)
    }

    pub fn flip_horizontal(&self) -> ImageBuf {
        let mut out = ImageBuf::new(self.width, self.height);
        for c in 0..3 {
            for y in 0..self.height {
                for x in 0..self.width {
                    out.set(c, x, y, self.get(c, self.width - 1 - x, y));
                }
            }
        }
        out
    }

    /// Area downsampling by an integer factor with floor semantics: output
    /// extents are `⌊W/f⌋ × ⌊H/f⌋` and trailing rows/columns that do not fill
    /// a block are dropped. Each output pixel is the plain mean of its block.
    pub fn downsample_area(&self, factor: usize) -> Result<ImageBuf> {
        if factor == 0 {
            return Err(Error::Unsupported {
                op: "downsample_area",
                detail: "factor must be at least 1".into(),
            });
        }
        let (ow, oh) = (self.width / factor, self.height / factor);
        if ow == 0 || oh == 0 {
            return Err(Error::ShapeMismatch {
                op: "downsample_area",
                detail: format!(
                    "image {}x{} too small for factor {factor}",
                    self.width, self.height
                ),
            });
        }
        let inv = 1.0 / (factor * factor) as f32;
        let mut out = ImageBuf::new(ow, oh);
        for c in 0..3 {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut s = 0.0f32;
                    for yy in 0..factor {
                        for xx in 0..factor {
                            s += self.get(c, ox * factor + xx, oy * factor + yy);
                        }
                    }
                    out.set(c, ox, oy, s * inv);
                }
            }
        }
        Ok(out)
    }

    /// Grayscale projection (BT.601 luma weights on linear values).
    pub fn to_gray(&self) -> Vec<f32> {
        let hw = self.width * self.height;
        let (r, rest) = self.data.split_at(hw);
        let (g, b) = rest.split_at(hw);
        r.iter()
            .zip(g)
            .zip(b)
            .map(|((rv, gv), bv)| 0.299 * rv + 0.587 * gv + 0.114 * bv)
            .collect()
    }

    pub fn clamp01(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    /// `[1, 3, H, W]` tensor view of this image.
    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::from_vec(&[1, 3, self.height, self.width], self.data.clone())
            .expect("planar layout matches NCHW")
    }

    /// Stacks same-size images into a `[B, 3, H, W]` tensor.
    pub fn batch_to_tensor(images: &[&ImageBuf]) -> Result<Tensor<f32>> {
        let Some(first) = images.first() else {
            return Err(Error::EmptyDataset("batch_to_tensor of no images".into()));
        };
        let (w, h) = (first.width, first.height);
        let mut data = Vec::with_capacity(images.len() * 3 * w * h);
        for img in images {
            if img.width != w || img.height != h {
                return Err(Error::ShapeMismatch {
                    op: "batch_to_tensor",
                    detail: format!(
                        "mixed sizes in batch: {w}x{h} vs {}x{}",
                        img.width, img.height
                    ),
                });
            }
            data.extend_from_slice(&img.data);
        }
        Tensor::from_vec(&[images.len(), 3, h, w], data)
    }

    /// Extracts batch item `b` of a `[B, 3, H, W]` tensor.
    pub fn from_tensor(t: &Tensor<f32>, b: usize) -> Result<ImageBuf> {
        match *t.shape() {
            [bs, 3, h, w] if b < bs => {
                let start = b * 3 * h * w;
                Ok(ImageBuf {
                    width: w,
                    height: h,
                    data: t.data()[start..start + 3 * h * w].to_vec(),
                })
            }
            ref s => Err(Error::ShapeMismatch {
                op: "ImageBuf::from_tensor",
                detail: format!("expected [B, 3, H, W] with item {b}, got {s:?}"),
            }),
        }
    }

    pub fn load(path: &Path) -> Result<ImageBuf> {
        let img = image::open(path)
            .map_err(|e| Error::Image {
                path: path.display().to_string(),
                detail: e.to_string(),
            })?
            .to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let raw = img.into_raw();
        let hw = w * h;
        let mut data = vec![0.0f32; 3 * hw];
        for (i, px) in raw.chunks_exact(3).enumerate() {
            data[i] = srgb_u8_to_linear(px[0]);
            data[hw + i] = srgb_u8_to_linear(px[1]);
            data[2 * hw + i] = srgb_u8_to_linear(px[2]);
        }
        Ok(ImageBuf {
            width: w,
            height: h,
            data,
        })
    }

    /// Encodes to 8-bit sRGB; the format follows the file extension
    /// (`.png` or `.ppm`). Values are clamped to [0,1] on the way out.
    pub fn save(&self, path: &Path) -> Result<()> {
        let hw = self.width * self.height;
        let mut raw = vec![0u8; 3 * hw];
        for i in 0..hw {
            raw[3 * i] = linear_to_srgb_u8(self.data[i]);
            raw[3 * i + 1] = linear_to_srgb_u8(self.data[hw + i]);
            raw[3 * i + 2] = linear_to_srgb_u8(self.data[2 * hw + i]);
        }
        let img = image::RgbImage::from_raw(self.width as u32, self.height as u32, raw)
            .expect("buffer sized to dimensions");
        img.save(path).map_err(|e| Error::Image {
            path: path.display().to_string(),
            detail: e.to_string(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn srgb_round_trip_is_exact_for_all_256_codes() {
        for v in 0..=255u8 {
            let linear = srgb_u8_to_linear(v);
            assert_eq!(
                linear_to_srgb_u8(linear),
                v,
                "code {v} failed decode→encode round trip"
            );
        }
        // Linear values are monotone and span [0, 1].
        assert_eq!(srgb_u8_to_linear(0), 0.0);
        assert!((srgb_u8_to_linear(255) - 1.0).abs() < 1e-6);
        for v in 0..255u8 {
            assert!(srgb_u8_to_linear(v) < srgb_u8_to_linear(v + 1));
        }
    }

    #[test]
    fn file_round_trip_preserves_quantized_values() {
        let dir = std::env::temp_dir().join(format!("imgio-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let mut img = ImageBuf::new(7, 5);
        for c in 0..3 {
            for y in 0..5 {
                for x in 0..7 {
                    img.set(c, x, y, srgb_u8_to_linear(((c * 83 + y * 31 + x * 17) % 256) as u8));
                }
            }
        }
        for ext in ["png", "ppm"] {
            let path = dir.join(format!("t.{ext}"));
            img.save(&path).unwrap();
            let back = ImageBuf::load(&path).unwrap();
            assert_eq!(back.width(), 7);
            assert_eq!(back.height(), 5);
            assert_eq!(back.data(), img.data(), "{ext} round trip");
        }
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn downsample_area_uses_floor_extents() {
        // 7x5 at factor 3 -> 2x1; only the top-left 6x3 region participates.
        let mut img = ImageBuf::new(7, 5);
        for y in 0..5 {
            for x in 0..7 {
                img.set(0, x, y, (x + y) as f32);
            }
        }
        let ds = img.downsample_area(3).unwrap();
        assert_eq!((ds.width(), ds.height()), (2, 1));
        // Block (0,0): x in 0..3, y in 0..3 of x+y -> mean = 2.0
        assert!((ds.get(0, 0, 0) - 2.0).abs() < 1e-6);
        // Block (1,0): x in 3..6 -> mean = 5.0
        assert!((ds.get(0, 1, 0) - 5.0).abs() < 1e-6);
        assert!(img.downsample_area(0).is_err());
        assert!(ImageBuf::new(2, 2).downsample_area(3).is_err());
    }

    #[test]
    fn bilinear_interpolates_and_clamps() {
        let mut img = ImageBuf::new(2, 2);
        img.set(0, 0, 0, 0.0);
        img.set(0, 1, 0, 1.0);
        img.set(0, 0, 1, 2.0);
        img.set(0, 1, 1, 3.0);
        assert!((img.bilinear(0, 0.5, 0.5) - 1.5).abs() < 1e-6, "center is the mean");
        assert_eq!(img.bilinear(0, -5.0, 0.0), 0.0, "clamps left");
        assert_eq!(img.bilinear(0, 5.0, 5.0), 3.0, "clamps bottom-right");
    }

    #[test]
    fn shift_by_moves_content() {
        let mut img = ImageBuf::new(5, 5);
        img.set(0, 2, 2, 1.0);
        let moved = img.shift_by(1.0, 0.0);
        assert_eq!(moved.get(0, 3, 2), 1.0, "content moved +1 in x");
        assert_eq!(moved.get(0, 2, 2), 0.0);
        // Half-pixel shift splits the mass bilinearly.
        let half = img.shift_by(0.5, 0.0);
        assert!((half.get(0, 2, 2) - 0.5).abs() < 1e-6);
        assert!((half.get(0, 3, 2) - 0.5).abs() < 1e-6);
    }

    #[test]
    fn tensor_round_trip_and_batching() {
        let mut a = ImageBuf::new(4, 3);
        let mut b = ImageBuf::new(4, 3);
        for (i, v) in a.data_mut().iter_mut().enumerate() {
            *v = i as f32;
        }
        for (i, v) in b.data_mut().iter_mut().enumerate() {
            *v = -(i as f32);
        }
        let t = ImageBuf::batch_to_tensor(&[&a, &b]).unwrap();
        assert_eq!(t.shape(), &[2, 3, 3, 4]);
        assert_eq!(ImageBuf::from_tensor(&t, 0).unwrap(), a);
        assert_eq!(ImageBuf::from_tensor(&t, 1).unwrap(), b);
        assert!(ImageBuf::from_tensor(&t, 2).is_err());
        let c = ImageBuf::new(2, 2);
        assert!(ImageBuf::batch_to_tensor(&[&a, &c]).is_err(), "mixed sizes");
    }

    #[test]
    fn reflect101_mirrors_without_repeating_the_edge() {
        let mut img = ImageBuf::new(4, 3);
        for y in 0..3 {
            for x in 0..4 {
                img.set(0, x, y, (10 * y + x) as f32);
            }
        }
        let p = img.pad_reflect101(2, 1, 1, 2).unwrap();
        assert_eq!((p.width(), p.height()), (7, 6));
        // Row −1 mirrors row 1; column −1 mirrors column 1, −2 mirrors 2.
        assert_eq!(p.get(0, 2, 1), img.get(0, 0, 0), "origin preserved");
        assert_eq!(p.get(0, 1, 1), img.get(0, 1, 0));
        assert_eq!(p.get(0, 0, 1), img.get(0, 2, 0));
        assert_eq!(p.get(0, 2, 0), img.get(0, 0, 1));
        // Right: column w mirrors w−2. Bottom: row h mirrors h−2.
        assert_eq!(p.get(0, 6, 1), img.get(0, 2, 0));
        assert_eq!(p.get(0, 2, 4), img.get(0, 0, 1));
        assert_eq!(p.get(0, 2, 5), img.get(0, 0, 0));
        // Interior copied verbatim.
        assert_eq!(p.get(0, 3, 2), img.get(0, 1, 1));
        // Oversized padding is rejected, not silently wrapped.
        assert!(img.pad_reflect101(4, 0, 0, 0).is_err());
        assert!(ImageBuf::new(1, 5).pad_reflect101(0, 0, 1, 1).is_err());
    }

    #[test]
    fn gray_projection_uses_luma_weights() {
        let mut img = ImageBuf::new(1, 1);
        img.set(0, 0, 0, 1.0);
        img.set(1, 0, 0, 0.5);
        img.set(2, 0, 0, 0.25);
        let g = img.to_gray();
        assert!((g[0] - (0.299 + 0.587 * 0.5 + 0.114 * 0.25)).abs() < 1e-6);
    }
}
