//! Blurry/sharp pair synthesis.
//!
//! The averaged-frames path (`synth_wild`) turns high-fps frame sequences
//! into pairs: downsample, pick a random odd clip length Nₑ ∈ [7, 23], gate
//! each clip on optical-flow magnitude, then average the clip into the blurry
//! image and keep the central frame as the sharp one. The shift-invariant
//! path (`synth_si`) convolves sharp images with random motion PSFs instead.
//! All processing happens on linear-light values; files are 8-bit sRGB.

pub mod blur;
pub mod flow;
pub mod synthetic;

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image_buf::ImageBuf;
use blur::{apply_blur, random_blur_kernel, BlurKernel};
use flow::{estimate_flow, percentile};

pub const NE_MIN: usize = 7;
pub const NE_MAX: usize = 23;
/// "No more than 1 pixel" of adjacent-frame motion.
pub const DEFAULT_FLOW_THRESHOLD: f64 = 1.0;
/// The threshold is enforced at this percentile of per-pixel magnitudes, not
/// at the max, to tolerate flow-estimation outliers.
pub const DEFAULT_GATE_PERCENTILE: f64 = 99.0;
/// Permissive RMS grayscale matching-error bound; the capture study reports
/// the analogous bound was never exceeded, so this mostly exists to be logged.
pub const DEFAULT_MATCH_BOUND: f64 = 0.25;

/// An ordered, constant-size frame sequence.
#[derive(Debug)]
pub struct FrameSequence {
    pub frames: Vec<ImageBuf>,
    pub nominal_fps: f64,
    pub source_id: String,
}

impl FrameSequence {
    pub fn new(frames: Vec<ImageBuf>, nominal_fps: f64, source_id: String) -> Result<Self> {
        let Some(first) = frames.first() else {
            return Err(Error::EmptyDataset(format!("sequence {source_id} has no frames")));
        };
        let (w, h) = (first.width(), first.height());
        if frames.iter().any(|f| f.width() != w || f.height() != h) {
            return Err(Error::ShapeMismatch {
                op: "FrameSequence::new",
                detail: format!("sequence {source_id} mixes frame sizes"),
            });
        }
        Ok(Self {
            frames,
            nominal_fps,
            source_id,
        })
    }

    /// Loads every `.png`/`.ppm` in `dir`, ordered by file name.
    pub fn load_dir(dir: &Path, nominal_fps: f64) -> Result<Self> {
        let files = list_images(dir)?;
        let frames = files
            .iter()
            .map(|p| ImageBuf::load(p))
            .collect::<Result<Vec<_>>>()?;
        let id = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| dir.display().to_string());
        FrameSequence::new(frames, nominal_fps, id)
    }
}

/// Files with an image extension in `dir`, sorted by name for determinism.
fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .map(|e| e.path())
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "ppm"))
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::EmptyDataset(format!(
            "no .png/.ppm files in {}",
            dir.display()
        )));
    }
    Ok(files)
}

/// Area-averages every frame by `1/factor` (floor extents).
pub fn downsample_frames(seq: &FrameSequence, factor: usize) -> Result<FrameSequence> {
    let frames = seq
        .frames
        .iter()
        .map(|f| f.downsample_area(factor))
        .collect::<Result<Vec<_>>>()?;
    FrameSequence::new(frames, seq.nominal_fps, seq.source_id.clone())
}

/// Uniform odd Nₑ in [7, 23].
pub fn sample_ne<R: Rng>(rng: &mut R) -> usize {
    NE_MIN + 2 * rng.random_range(0..=(NE_MAX - NE_MIN) / 2)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Rejection {
    FlowTooLarge,
    MatchingError,
}

impl Rejection {
    pub fn as_str(self) -> &'static str {
        match self {
            Rejection::FlowTooLarge => "flow-too-large",
            Rejection::MatchingError => "matching-error",
        }
    }
}

/// One candidate clip: `ne` frames starting at `start`, plus the gate verdict.
#[derive(Clone, Copy, Debug)]
pub struct ClipSpec {
    pub start: usize,
    pub ne: usize,
    pub rejection: Option<Rejection>,
}

impl ClipSpec {
    pub fn new(start: usize, ne: usize) -> Result<Self> {
        if ne % 2 == 0 || !(NE_MIN..=NE_MAX).contains(&ne) {
            return Err(Error::Unsupported {
                op: "ClipSpec::new",
                detail: format!("ne = {ne} must be odd and within [{NE_MIN}, {NE_MAX}]"),
            });
        }
        Ok(Self {
            start,
            ne,
            rejection: None,
        })
    }

    pub fn accepted(&self) -> bool {
        self.rejection.is_none()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GateReport {
    pub rejection: Option<Rejection>,
    /// Largest per-adjacent-pair flow magnitude at the gate percentile.
    pub max_flow: f64,
    /// Largest adjacent-frame RMS difference on grayscale values.
    pub matching_error: f64,
}

impl GateReport {
    pub fn accepted(&self) -> bool {
        self.rejection.is_none()
    }
}

/// Accepts a clip iff every adjacent frame pair moves by at most `threshold`
/// pixels at the given flow-magnitude percentile; additionally flags clips
/// whose grayscale L² matching error exceeds `match_bound`. The percentile
/// is taken over interior pixels (see [`flow::VALID_MARGIN`]) because border
/// flow is unreliable regardless of scene motion.
pub fn gate_clip(
    frames: &[ImageBuf],
    threshold: f64,
    gate_percentile: f64,
    match_bound: f64,
) -> Result<GateReport> {
    if frames.len() < 2 {
        return Err(Error::EmptyDataset("gate_clip needs at least two frames".into()));
    }
    let mut max_flow = 0.0f64;
    let mut matching_error = 0.0f64;
    for win in frames.windows(2) {
        let flow = estimate_flow(&win[0], &win[1])?;
        max_flow = max_flow.max(percentile(&flow.interior_magnitudes(), gate_percentile) as f64);

        let (ga, gb) = (win[0].to_gray(), win[1].to_gray());
        let mse: f64 = ga
            .iter()
            .zip(&gb)
            .map(|(&a, &b)| {
                let d = (a - b) as f64;
                d * d
            })
            .sum::<f64>()
            / ga.len() as f64;
        matching_error = matching_error.max(mse.sqrt());
    }
    let rejection = if max_flow > threshold {
        Some(Rejection::FlowTooLarge)
    } else if matching_error > match_bound {
        Some(Rejection::MatchingError)
    } else {
        None
    };
    Ok(GateReport {
        rejection,
        max_flow,
        matching_error,
    })
}

/// A blurry/sharp training pair and the flow-integrated blur extent.
#[derive(Debug)]
pub struct ImagePair {
    pub blurry: ImageBuf,
    pub sharp: ImageBuf,
    pub mean_blur_size: f64,
}

/// Averages the clip into the blurry image and takes its central frame as
/// the sharp one. The mean is accumulated in f64 and divided (not multiplied
/// by a reciprocal) so that identical frames reproduce themselves bit-exactly.
pub fn make_pair(frames: &[ImageBuf], spec: &ClipSpec) -> Result<ImagePair> {
    ClipSpec::new(spec.start, spec.ne)?; // re-validate the ne invariant
    if !spec.accepted() {
        return Err(Error::Unsupported {
            op: "make_pair",
            detail: format!(
                "clip at {} was rejected ({})",
                spec.start,
                spec.rejection.map_or("?", Rejection::as_str)
            ),
        });
    }
    let end = spec.start + spec.ne;
    if end > frames.len() {
        return Err(Error::ShapeMismatch {
            op: "make_pair",
            detail: format!(
                "clip [{}, {end}) exceeds the {} available frames",
                spec.start,
                frames.len()
            ),
        });
    }
    let clip = &frames[spec.start..end];
    let sharp = clip[spec.ne / 2].clone();

    let mut acc = vec![0.0f64; sharp.data().len()];
    for frame in clip {
        for (a, &v) in acc.iter_mut().zip(frame.data()) {
            *a += v as f64;
        }
    }
    let n = spec.ne as f64;
    let mean: Vec<f32> = acc.iter().map(|&s| (s / n) as f32).collect();
    let blurry = ImageBuf::from_planar(sharp.width(), sharp.height(), mean)?;

    Ok(ImagePair {
        blurry,
        sharp,
        mean_blur_size: estimate_blur_size(clip)?,
    })
}

/// Integrates adjacent-frame flow magnitudes per pixel over the clip and
/// averages over the image's interior (border flow being unreliable): the
/// expected blur path length in pixels.
pub fn estimate_blur_size(frames: &[ImageBuf]) -> Result<f64> {
    if frames.len() < 2 {
        return Err(Error::EmptyDataset(
            "blur-size estimation needs at least two frames".into(),
        ));
    }
    let mut path: Option<Vec<f64>> = None;
    for win in frames.windows(2) {
        let flow = estimate_flow(&win[0], &win[1])?;
        let mags = flow.interior_magnitudes();
        let acc = path.get_or_insert_with(|| vec![0.0; mags.len()]);
        for (p, m) in acc.iter_mut().zip(mags) {
            *p += m as f64;
        }
    }
    let path = path.expect("windows(2) yields at least one pair");
    Ok(path.iter().sum::<f64>() / path.len() as f64)
}

// ---------------------------------------------------------------------------
// Manifest: one pair per line, tab-separated, paths relative to the manifest.

pub const MANIFEST_HEADER: &str = "id\tblur\tsharp\tne\tmean_blur_size";

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    pub blur: String,
    pub sharp: String,
    /// Number of averaged frames; 1 for shift-invariant (convolved) pairs.
    pub ne: usize,
    pub mean_blur_size: f64,
}

impl ManifestEntry {
    /// Absolute image paths given the manifest's own location.
    pub fn resolve(&self, manifest_path: &Path) -> (PathBuf, PathBuf) {
        let base = manifest_path.parent().unwrap_or(Path::new("."));
        (base.join(&self.blur), base.join(&self.sharp))
    }
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut text = String::from(MANIFEST_HEADER);
    text.push('\n');
    for e in entries {
        text.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\n",
            e.id, e.blur, e.sharp, e.ne, e.mean_blur_size
        ));
    }
    fs::write(path, text)?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, first)) if first == MANIFEST_HEADER => {}
        _ => {
            return Err(Error::Manifest {
                line: 1,
                detail: format!("expected header `{MANIFEST_HEADER}`"),
            })
        }
    }
    let mut entries = Vec::new();
    for (idx, line) in lines {
        if line.is_empty() {
            continue;
        }
        let lineno = idx + 1;
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 5 {
            return Err(Error::Manifest {
                line: lineno,
                detail: format!("expected 5 tab-separated fields, got {}", cols.len()),
            });
        }
        let ne: usize = cols[3].parse().map_err(|_| Error::Manifest {
            line: lineno,
            detail: format!("ne `{}` is not an integer", cols[3]),
        })?;
        let mean_blur_size: f64 = cols[4].parse().map_err(|_| Error::Manifest {
            line: lineno,
            detail: format!("mean_blur_size `{}` is not a number", cols[4]),
        })?;
        entries.push(ManifestEntry {
            id: cols[0].to_string(),
            blur: cols[1].to_string(),
            sharp: cols[2].to_string(),
            ne,
            mean_blur_size,
        });
    }
    if entries.is_empty() {
        return Err(Error::EmptyDataset(format!(
            "manifest {} lists no pairs",
            path.display()
        )));
    }
    Ok(entries)
}

/// Loads every manifest pair as (blurry, sharp, entry).
pub fn load_pairs(manifest_path: &Path) -> Result<Vec<(ImageBuf, ImageBuf, ManifestEntry)>> {
    read_manifest(manifest_path)?
        .into_iter()
        .map(|e| {
            let (bp, sp) = e.resolve(manifest_path);
            Ok((ImageBuf::load(&bp)?, ImageBuf::load(&sp)?, e))
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Drivers.

#[derive(Clone, Copy, Debug)]
pub struct WildOptions {
    pub threshold: f64,
    pub gate_percentile: f64,
    pub match_bound: f64,
    pub downsample: usize,
    pub seed: u64,
}

impl Default for WildOptions {
    fn default() -> Self {
        Self {
            threshold: DEFAULT_FLOW_THRESHOLD,
            gate_percentile: DEFAULT_GATE_PERCENTILE,
            match_bound: DEFAULT_MATCH_BOUND,
            downsample: 3,
            seed: 0,
        }
    }
}

#[derive(Debug)]
pub struct WildSummary {
    pub sequences: usize,
    pub accepted: usize,
    pub rejected_flow: usize,
    pub rejected_match: usize,
    pub manifest_path: PathBuf,
}

/// Frame directories under `frames_root` (or `frames_root` itself if it
/// holds images directly) → gated, averaged pairs + manifest in `out_dir`.
///
/// Clips are carved sequentially: a fresh Nₑ is drawn per candidate and the
/// cursor advances by Nₑ whether or not the clip passes the gate, so the RNG
/// stream depends only on the seed and each sequence's frame count.
pub fn synth_wild(frames_root: &Path, out_dir: &Path, opts: &WildOptions) -> Result<WildSummary> {
    let mut seq_dirs: Vec<PathBuf> = fs::read_dir(frames_root)?
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .map(|e| e.path())
        .filter(|p| p.is_dir())
        .collect();
    seq_dirs.sort();
    if seq_dirs.is_empty() {
        seq_dirs.push(frames_root.to_path_buf());
    }

    fs::create_dir_all(out_dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut entries = Vec::new();
    let mut summary = WildSummary {
        sequences: seq_dirs.len(),
        accepted: 0,
        rejected_flow: 0,
        rejected_match: 0,
        manifest_path: out_dir.join("manifest.tsv"),
    };

    for dir in &seq_dirs {
        let seq = FrameSequence::load_dir(dir, 240.0)?;
        let seq = downsample_frames(&seq, opts.downsample)?;
        let mut cursor = 0;
        while cursor + NE_MIN <= seq.frames.len() {
            let ne = sample_ne(&mut rng);
            if cursor + ne > seq.frames.len() {
                break;
            }
            let mut spec = ClipSpec::new(cursor, ne)?;
            let clip = &seq.frames[cursor..cursor + ne];
            let gate = gate_clip(clip, opts.threshold, opts.gate_percentile, opts.match_bound)?;
            spec.rejection = gate.rejection;
            match gate.rejection {
                None => {
                    let pair = make_pair(&seq.frames, &spec)?;
                    let id = format!("{:04}", entries.len());
                    let blur_name = format!("{id}_blur.png");
                    let sharp_name = format!("{id}_sharp.png");
                    pair.blurry.save(&out_dir.join(&blur_name))?;
                    pair.sharp.save(&out_dir.join(&sharp_name))?;
                    entries.push(ManifestEntry {
                        id,
                        blur: blur_name,
                        sharp: sharp_name,
                        ne,
                        mean_blur_size: pair.mean_blur_size,
                    });
                    summary.accepted += 1;
                }
                Some(Rejection::FlowTooLarge) => summary.rejected_flow += 1,
                Some(Rejection::MatchingError) => summary.rejected_match += 1,
            }
            cursor += ne;
        }
    }

    if entries.is_empty() {
        return Err(Error::EmptyDataset(
            "no clip passed the gate; nothing to write".into(),
        ));
    }
    write_manifest(&summary.manifest_path, &entries)?;
    Ok(summary)
}

#[derive(Debug)]
pub struct SiSummary {
    pub pairs: usize,
    pub kernels: usize,
    pub manifest_path: PathBuf,
}

/// Sharp images × random motion PSFs → shift-invariant pairs + manifest.
///
/// `force_delta` substitutes the identity kernel (debugging aid: blurry must
/// then equal sharp); `dump_kernels` writes each PSF, peak-normalized, as a
/// grayscale PNG next to the pairs.
pub fn synth_si(
    sharp_dir: &Path,
    out_dir: &Path,
    num_kernels: usize,
    seed: u64,
    force_delta: bool,
    dump_kernels: bool,
) -> Result<SiSummary> {
    let files = list_images(sharp_dir)?;
    if num_kernels == 0 {
        return Err(Error::Unsupported {
            op: "synth_si",
            detail: "num_kernels must be at least 1".into(),
        });
    }
    fs::create_dir_all(out_dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let kernels: Vec<BlurKernel> = if force_delta {
        vec![BlurKernel::delta()]
    } else {
        (0..num_kernels).map(|_| random_blur_kernel(&mut rng)).collect()
    };

    if dump_kernels {
        for (i, k) in kernels.iter().enumerate() {
            let peak = k.taps().iter().cloned().fold(0.0f32, f32::max);
            let mut img = ImageBuf::new(k.size(), k.size());
            for y in 0..k.size() {
                for x in 0..k.size() {
                    let v = k.taps()[y * k.size() + x] / peak;
                    for c in 0..3 {
                        img.set(c, x, y, v);
                    }
                }
            }
            img.save(&out_dir.join(format!("kernel_{i:03}.png")))?;
        }
    }

    let mut entries = Vec::new();
    for path in &files {
        let sharp = ImageBuf::load(path)?;
        let k = &kernels[rng.random_range(0..kernels.len())];
        let blurry = apply_blur(&sharp, k);
        let id = format!("{:04}", entries.len());
        let blur_name = format!("{id}_blur.png");
        let sharp_name = format!("{id}_sharp.png");
        blurry.save(&out_dir.join(&blur_name))?;
        sharp.save(&out_dir.join(&sharp_name))?;
        entries.push(ManifestEntry {
            id,
            blur: blur_name,
            sharp: sharp_name,
            ne: 1,
            mean_blur_size: k.blur_size_estimate(),
        });
    }

    let manifest_path = out_dir.join("manifest.tsv");
    write_manifest(&manifest_path, &entries)?;
    Ok(SiSummary {
        pairs: entries.len(),
        kernels: kernels.len(),
        manifest_path,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use synthetic::{render_synthetic_sequence, textured_image, Motion};

    #[test]
    fn sample_ne_is_odd_in_range_and_covers_all_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut seen = std::collections::BTreeSet::new();
        for _ in 0..300 {
            let ne = sample_ne(&mut rng);
            assert!(ne % 2 == 1 && (NE_MIN..=NE_MAX).contains(&ne));
            seen.insert(ne);
        }
        assert_eq!(seen.len(), 9, "all nine odd values should appear: {seen:?}");
    }

    #[test]
    fn gate_accepts_slow_and_rejects_fast_clips() {
        let sharp = textured_image(48, 40, 21);
        let slow = render_synthetic_sequence(&sharp, Motion::Global { velocity: (0.5, 0.0) }, 7);
        let fast = render_synthetic_sequence(&sharp, Motion::Global { velocity: (2.0, 0.0) }, 7);

        let ok = gate_clip(&slow.frames, 1.0, 99.0, DEFAULT_MATCH_BOUND).unwrap();
        assert!(ok.accepted(), "0.5 px/frame motion must pass: {ok:?}");
        assert!(ok.max_flow < 1.0 && ok.max_flow > 0.2);

        let bad = gate_clip(&fast.frames, 1.0, 99.0, DEFAULT_MATCH_BOUND).unwrap();
        assert_eq!(bad.rejection, Some(Rejection::FlowTooLarge), "{bad:?}");

        // Monotonicity: what fails at 1.0 px also fails at any smaller
        // threshold, and the slow clip fails once the threshold undercuts
        // its measured flow.
        let stricter = gate_clip(&slow.frames, 0.1, 99.0, DEFAULT_MATCH_BOUND).unwrap();
        assert_eq!(stricter.rejection, Some(Rejection::FlowTooLarge));

        // Identical frames: zero flow, zero matching error.
        let still = vec![sharp.clone(), sharp.clone(), sharp.clone()];
        let report = gate_clip(&still, 1.0, 99.0, DEFAULT_MATCH_BOUND).unwrap();
        assert!(report.accepted());
        assert_eq!(report.max_flow, 0.0);
        assert_eq!(report.matching_error, 0.0);
    }

    #[test]
    fn gate_flags_matching_error_when_flow_is_fine() {
        let sharp = textured_image(48, 40, 22);
        let slow = render_synthetic_sequence(&sharp, Motion::Global { velocity: (0.3, 0.0) }, 7);
        // A zero matching bound turns any real content change into a flag,
        // while the flow gate still passes — exercising the second reason.
        let report = gate_clip(&slow.frames, 1.0, 99.0, 0.0).unwrap();
        assert_eq!(report.rejection, Some(Rejection::MatchingError), "{report:?}");
        assert!(report.matching_error > 0.0);
    }

    #[test]
    fn make_pair_mean_and_central_frame_are_exact() {
        // Identical frames: g must equal f bit for bit (f64 sum of n equal
        // values divided by n is exact).
        let sharp = textured_image(32, 24, 30);
        let still: Vec<ImageBuf> = (0..7).map(|_| sharp.clone()).collect();
        let spec = ClipSpec::new(0, 7).unwrap();
        let pair = make_pair(&still, &spec).unwrap();
        assert_eq!(pair.blurry.data(), pair.sharp.data(), "zero motion ⇒ g == f");
        assert_eq!(pair.sharp.data(), sharp.data());
        assert_eq!(pair.mean_blur_size, 0.0);

        // Constant frames valued k/16 (dyadic, exactly representable):
        // mean of 1/16 .. 7/16 is exactly 4/16.
        let constants: Vec<ImageBuf> = (1..=7)
            .map(|k| {
                let mut img = ImageBuf::new(8, 8);
                img.data_mut().fill(k as f32 / 16.0);
                img
            })
            .collect();
        let pair = make_pair(&constants, &spec).unwrap();
        assert!(pair.blurry.data().iter().all(|&v| v == 0.25));
        assert!(pair.sharp.data().iter().all(|&v| v == 0.25), "central frame is #4");

        // Pair integrity: recomputing the mean reproduces g bit-exactly.
        let mut acc = vec![0.0f64; 8 * 8 * 3];
        for f in &constants {
            for (a, &v) in acc.iter_mut().zip(f.data()) {
                *a += v as f64;
            }
        }
        let recomputed: Vec<f32> = acc.iter().map(|&s| (s / 7.0) as f32).collect();
        assert_eq!(recomputed, pair.blurry.data());

        // Averaging commutes with a linear color transform (dyadic scale).
        let halved: Vec<ImageBuf> = constants
            .iter()
            .map(|f| {
                let mut h = f.clone();
                for v in h.data_mut() {
                    *v *= 0.5;
                }
                h
            })
            .collect();
        let half_pair = make_pair(&halved, &spec).unwrap();
        let expect: Vec<f32> = pair.blurry.data().iter().map(|&v| v * 0.5).collect();
        assert_eq!(half_pair.blurry.data(), &expect[..]);

        // Rejected specs must not produce pairs.
        let mut rejected = spec;
        rejected.rejection = Some(Rejection::FlowTooLarge);
        assert!(make_pair(&still, &rejected).is_err());
        // Invalid ne is caught even without a gate.
        assert!(ClipSpec::new(0, 6).is_err());
        assert!(ClipSpec::new(0, 25).is_err());
    }

    #[test]
    fn frame_average_matches_line_integrated_blur() {
        // Smooth, low-frequency scene translating at 0.5 px/frame: the
        // 9-frame average is a 9-point quadrature of the continuous motion
        // blur over the same ±2 px span. Against an 81-point reference the
        // quadrature error must stay under 2/255 mean absolute difference.
        let (w, h) = (48, 32);
        let mut sharp = ImageBuf::new(w, h);
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    let v = 0.5
                        + 0.25 * (0.20 * x as f32).sin() * (0.17 * y as f32).cos()
                        + 0.15 * (0.15 * (x + y) as f32).sin();
                    sharp.set(c, x, y, v);
                }
            }
        }
        let seq = render_synthetic_sequence(&sharp, Motion::Global { velocity: (0.5, 0.0) }, 9);
        let spec = ClipSpec::new(0, 9).unwrap();
        let pair = make_pair(&seq.frames, &spec).unwrap();

        let samples = 81;
        let mut acc = vec![0.0f64; sharp.data().len()];
        for m in 0..samples {
            let off = -2.0 + 4.0 * m as f32 / (samples - 1) as f32;
            for (a, &v) in acc.iter_mut().zip(sharp.shift_by(off, 0.0).data()) {
                *a += v as f64;
            }
        }
        let margin = 4; // skip pixels whose warp clamped at the border
        let mut total = 0.0f64;
        let mut count = 0usize;
        for c in 0..3 {
            for y in margin..h - margin {
                for x in margin..w - margin {
                    let i = (c * h + y) * w + x;
                    let fine = acc[i] / samples as f64;
                    total += (pair.blurry.data()[i] as f64 - fine).abs();
                    count += 1;
                }
            }
        }
        let mad = total / count as f64;
        assert!(mad < 2.0 / 255.0, "mean abs diff {mad} vs 9-point average");
    }

    #[test]
    fn blur_size_integrates_flow_and_scales_with_speed() {
        let sharp = textured_image(48, 40, 31);
        let still: Vec<ImageBuf> = (0..3).map(|_| sharp.clone()).collect();
        assert_eq!(estimate_blur_size(&still).unwrap(), 0.0);

        let slow = render_synthetic_sequence(&sharp, Motion::Global { velocity: (0.5, 0.0) }, 9);
        let est = estimate_blur_size(&slow.frames).unwrap();
        assert!(
            (est - 4.0).abs() < 0.6,
            "8 intervals × 0.5 px ⇒ ≈ 4.0, got {est}"
        );

        let fast = render_synthetic_sequence(&sharp, Motion::Global { velocity: (1.0, 0.0) }, 9);
        let est2 = estimate_blur_size(&fast.frames).unwrap();
        let ratio = est2 / est;
        assert!((1.6..=2.4).contains(&ratio), "doubling speed gave ratio {ratio}");
    }

    #[test]
    fn manifest_round_trips_and_rejects_malformed_lines() {
        let dir = std::env::temp_dir().join(format!("manifest-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("manifest.tsv");
        let entries = vec![
            ManifestEntry {
                id: "0000".into(),
                blur: "0000_blur.png".into(),
                sharp: "0000_sharp.png".into(),
                ne: 9,
                mean_blur_size: 3.25,
            },
            ManifestEntry {
                id: "0001".into(),
                blur: "sub/0001_blur.png".into(),
                sharp: "sub/0001_sharp.png".into(),
                ne: 1,
                mean_blur_size: 0.123456789012345,
            },
        ];
        write_manifest(&path, &entries).unwrap();
        let back = read_manifest(&path).unwrap();
        assert_eq!(back, entries, "f64 and paths survive the round trip");
        let (bp, _) = back[1].resolve(&path);
        assert_eq!(bp, dir.join("sub/0001_blur.png"));

        fs::write(&path, "wrong\theader\n").unwrap();
        match read_manifest(&path).unwrap_err() {
            Error::Manifest { line: 1, .. } => {}
            e => panic!("expected header error, got {e:?}"),
        }
        fs::write(&path, format!("{MANIFEST_HEADER}\n0000\tb.png\ts.png\tnine\t1.0\n")).unwrap();
        match read_manifest(&path).unwrap_err() {
            Error::Manifest { line: 2, detail } => assert!(detail.contains("nine")),
            e => panic!("expected ne error, got {e:?}"),
        }
        fs::write(&path, format!("{MANIFEST_HEADER}\n")).unwrap();
        assert!(matches!(read_manifest(&path).unwrap_err(), Error::EmptyDataset(_)));
        fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn synth_si_with_delta_kernel_reproduces_sharp_images() {
        let dir = std::env::temp_dir().join(format!("si-{}", std::process::id()));
        let sharp_dir = dir.join("sharp");
        let out_dir = dir.join("out");
        fs::create_dir_all(&sharp_dir).unwrap();
        textured_image(24, 16, 40).save(&sharp_dir.join("a.png")).unwrap();
        textured_image(24, 16, 41).save(&sharp_dir.join("b.png")).unwrap();

        let summary = synth_si(&sharp_dir, &out_dir, 5, 123, true, true).unwrap();
        assert_eq!(summary.pairs, 2);
        let pairs = load_pairs(&summary.manifest_path).unwrap();
        for (blurry, sharp, entry) in &pairs {
            assert_eq!(blurry.data(), sharp.data(), "delta kernel is the identity");
            assert_eq!(entry.ne, 1);
            assert_eq!(entry.mean_blur_size, 0.0);
        }
        assert!(out_dir.join("kernel_000.png").exists(), "dump_kernels wrote PSFs");
        fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn synth_wild_gates_and_is_deterministic() {
        let dir = std::env::temp_dir().join(format!("wild-{}", std::process::id()));
        let frames_root = dir.join("frames");
        let sharp = textured_image(40, 32, 50);
        for (name, vel) in [("seq_slow", 0.4f32), ("seq_fast", 2.5f32)] {
            let seq_dir = frames_root.join(name);
            fs::create_dir_all(&seq_dir).unwrap();
            let seq =
                render_synthetic_sequence(&sharp, Motion::Global { velocity: (vel, 0.0) }, 25);
            for (i, f) in seq.frames.iter().enumerate() {
                f.save(&seq_dir.join(format!("frame_{i:03}.png"))).unwrap();
            }
        }

        let opts = WildOptions {
            downsample: 1,
            seed: 9,
            ..WildOptions::default()
        };
        let summary = synth_wild(&frames_root, &dir.join("out_a"), &opts).unwrap();
        assert_eq!(summary.sequences, 2);
        assert!(summary.accepted >= 1, "slow clips must pass: {summary:?}");
        assert!(summary.rejected_flow >= 1, "fast clips must fail: {summary:?}");

        let again = synth_wild(&frames_root, &dir.join("out_b"), &opts).unwrap();
        let a = fs::read_to_string(&summary.manifest_path).unwrap();
        let b = fs::read_to_string(&again.manifest_path).unwrap();
        assert_eq!(a, b, "same seed, same manifest");

        // Every emitted pair still holds the mean invariant after the sRGB
        // file round trip: re-reading gives valid, same-size images.
        for (blurry, sharp_img, _) in load_pairs(&summary.manifest_path).unwrap() {
            assert_eq!(blurry.width(), sharp_img.width());
            assert_eq!(blurry.height(), sharp_img.height());
        }
        fs::remove_dir_all(&dir).ok();
    }
}
