//! Synthetic frame sequences with known ground-truth motion.
//!
//! A renderer that warps one sharp image along a prescribed trajectory stands
//! in for camera capture: every derived quantity downstream (flow, gating,
//! blur size, frame averages) can then be checked against the trajectory that
//! generated the data instead of against hand-picked constants.

use crate::image_buf::ImageBuf;

/// Scene motion, in pixels per frame step.
#[derive(Clone, Copy, Debug)]
pub enum Motion {
    /// The whole frame translates rigidly.
    Global { velocity: (f32, f32) },
    /// Left and right halves translate independently (a hard vertical seam),
    /// giving a spatially varying ground-truth flow.
    TwoObject {
        left_velocity: (f32, f32),
        right_velocity: (f32, f32),
    },
}

/// Frames plus the per-frame displacements that produced them.
#[derive(Debug)]
pub struct SyntheticSequence {
    pub frames: Vec<ImageBuf>,
    /// Displacement of frame `i` relative to the sharp source; for
    /// `TwoObject` this is the left half's displacement.
    pub true_offsets: Vec<(f32, f32)>,
}

/// Renders `n_frames` views of `sharp` moving at constant velocity, centered
/// so the middle frame of an odd-length sequence is exactly the source image.
///
/// The scene is reflect-padded before shifting and cropped back afterwards,
/// so every frame is a genuine translation of one extended scene — edge
/// clamping would otherwise fabricate stationary bands that no camera
/// produces and that corrupt flow-based oracles.
pub fn render_synthetic_sequence(sharp: &ImageBuf, motion: Motion, n_frames: usize) -> SyntheticSequence {
    let center = (n_frames as f32 - 1.0) / 2.0;
    let speeds: Vec<(f32, f32)> = match motion {
        Motion::Global { velocity } => vec![velocity],
        Motion::TwoObject {
            left_velocity,
            right_velocity,
        } => vec![left_velocity, right_velocity],
    };
    let max_shift = speeds
        .iter()
        .map(|(vx, vy)| (vx.abs().max(vy.abs()) * center).ceil() as usize + 1)
        .max()
        .unwrap();
    let (w, h) = (sharp.width(), sharp.height());
    let padded = sharp
        .pad_reflect101(max_shift, max_shift, max_shift, max_shift)
        .expect("fixture motion within one mirror period");
    let m = max_shift;
    let view = |dx: f32, dy: f32| {
        padded
            .shift_by(dx, dy)
            .crop(m, m, w, h)
            .expect("crop within padded extents")
    };

    let mut frames = Vec::with_capacity(n_frames);
    let mut true_offsets = Vec::with_capacity(n_frames);
    for i in 0..n_frames {
        let t = i as f32 - center;
        let frame = match motion {
            Motion::Global { velocity: (vx, vy) } => view(vx * t, vy * t),
            Motion::TwoObject {
                left_velocity: (lx, ly),
                right_velocity: (rx, ry),
            } => {
                let left = view(lx * t, ly * t);
                let right = view(rx * t, ry * t);
                let mut frame = left;
                let split = w / 2;
                for c in 0..3 {
                    for y in 0..h {
                        for x in split..w {
                            frame.set(c, x, y, right.get(c, x, y));
                        }
                    }
                }
                frame
            }
        };
        frames.push(frame);
        let (vx, vy) = match motion {
            Motion::Global { velocity } => velocity,
            Motion::TwoObject { left_velocity, .. } => left_velocity,
        };
        true_offsets.push((vx * t, vy * t));
    }
    SyntheticSequence { frames, true_offsets }
}

fn xorshift(state: &mut u64) -> u64 {
    let mut x = *state;
    x ^= x << 13;
    x ^= x >> 7;
    x ^= x << 17;
    *state = x;
    x
}

/// Deterministic test image: low-frequency sinusoids for trackable structure
/// plus band-limited speckle so no region is flat, values well inside [0, 1].
/// The speckle is box-smoothed twice — raw white noise carries near-Nyquist
/// energy whose appearance changes with sub-pixel resampling phase, which
/// violates the brightness-constancy assumption in a way no real band-limited
/// camera image does.
pub fn textured_image(w: usize, h: usize, seed: u64) -> ImageBuf {
    let mut state = seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) | 1;
    let mut speckle = vec![0.0f32; w * h];
    for s in speckle.iter_mut() {
        *s = (xorshift(&mut state) >> 40) as f32 / (1u64 << 24) as f32 - 0.5;
    }
    let box3 = |src: &[f32]| {
        let mut out = vec![0.0f32; w * h];
        for y in 0..h {
            for x in 0..w {
                let mut s = 0.0;
                let mut n = 0.0;
                for dy in -1i32..=1 {
                    for dx in -1i32..=1 {
                        let xx = x as i32 + dx;
                        let yy = y as i32 + dy;
                        if xx >= 0 && yy >= 0 && (xx as usize) < w && (yy as usize) < h {
                            s += src[yy as usize * w + xx as usize];
                            n += 1.0;
                        }
                    }
                }
                out[y * w + x] = s / n;
            }
        }
        out
    };
    let smooth = box3(&box3(&speckle));

    let mut img = ImageBuf::new(w, h);
    for c in 0..3 {
        let (fx, fy) = (0.55 + 0.13 * c as f32, 0.38 + 0.11 * c as f32);
        for y in 0..h {
            for x in 0..w {
                let wave = 0.25 * (fx * x as f32).sin() * (fy * y as f32).cos()
                    + 0.15 * (0.23 * (x + 2 * y) as f32).sin();
                let v = 0.5 + wave + 0.6 * smooth[y * w + x];
                img.set(c, x, y, v.clamp(0.02, 0.98));
            }
        }
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_motion_reproduces_the_sharp_image() {
        let sharp = textured_image(24, 16, 1);
        let seq = render_synthetic_sequence(&sharp, Motion::Global { velocity: (0.0, 0.0) }, 7);
        assert_eq!(seq.frames.len(), 7);
        for f in &seq.frames {
            assert_eq!(f.data(), sharp.data(), "zero trajectory must be exact");
        }
    }

    #[test]
    fn central_frame_is_the_source_and_offsets_follow_velocity() {
        let sharp = textured_image(24, 16, 2);
        let seq = render_synthetic_sequence(&sharp, Motion::Global { velocity: (0.5, 0.5) }, 9);
        assert_eq!(seq.frames[4].data(), sharp.data(), "displacement 0 at the center");
        for (i, &(dx, dy)) in seq.true_offsets.iter().enumerate() {
            let t = i as f32 - 4.0;
            assert_eq!((dx, dy), (0.5 * t, 0.5 * t));
        }
        // Adjacent-frame step is the velocity itself.
        assert_eq!(
            seq.true_offsets[5].0 - seq.true_offsets[4].0,
            0.5,
            "unit step in x per frame interval"
        );
    }

    #[test]
    fn two_object_motion_differs_across_the_seam() {
        let sharp = textured_image(32, 16, 3);
        let seq = render_synthetic_sequence(
            &sharp,
            Motion::TwoObject {
                left_velocity: (1.0, 0.0),
                right_velocity: (-1.0, 0.0),
            },
            3,
        );
        let first = &seq.frames[0]; // t = −1: left shifted by −1, right by +1
        let left_expect = sharp.shift_by(-1.0, 0.0);
        let right_expect = sharp.shift_by(1.0, 0.0);
        assert_eq!(first.get(0, 5, 8), left_expect.get(0, 5, 8));
        assert_eq!(first.get(0, 25, 8), right_expect.get(0, 25, 8));
        assert_ne!(first.get(0, 5, 8), first.get(0, 25, 8));
    }

    #[test]
    fn textured_image_is_deterministic_and_varied() {
        let a = textured_image(16, 16, 7);
        let b = textured_image(16, 16, 7);
        let c = textured_image(16, 16, 8);
        assert_eq!(a.data(), b.data());
        assert_ne!(a.data(), c.data());
        let (min, max) = a
            .data()
            .iter()
            .fold((1.0f32, 0.0f32), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        assert!(min >= 0.02 && max <= 0.98);
        assert!(max - min > 0.3, "needs contrast for flow to latch onto");
    }
}
