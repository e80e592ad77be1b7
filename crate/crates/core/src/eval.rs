//! Evaluation: PSNR against reference sharp images, batch scoring over a
//! manifest, whole-image inference at arbitrary sizes, and the residual-
//! versus-blur-size correlation analysis.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use crate::dataset::{read_manifest, ManifestEntry};
use crate::error::{Error, Result};
use crate::image_buf::ImageBuf;
use crate::net::DeblurNet;

/// Stand-in dB value written to CSV when images are identical (MSE = 0).
pub const PSNR_CAP: f64 = 99.0;

/// PSNR with peak 1.0; identical images get a sentinel instead of +∞.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Psnr {
    Db(f64),
    Identical,
}

impl Psnr {
    /// The dB value with the identical case capped for CSV columns.
    pub fn db_capped(self) -> f64 {
        match self {
            Psnr::Db(v) => v,
            Psnr::Identical => PSNR_CAP,
        }
    }

    pub fn is_identical(self) -> bool {
        matches!(self, Psnr::Identical)
    }
}

impl fmt::Display for Psnr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.db_capped())
    }
}

fn psnr_from_mse(mse: f64) -> Psnr {
    if mse == 0.0 {
        Psnr::Identical
    } else {
        Psnr::Db(10.0 * (1.0 / mse).log10())
    }
}

/// PSNR of two raw sample slices (peak 1.0), entirely in f64 — the precision
/// reference the image version matches after exact f32 → f64 promotion.
pub fn psnr_data(a: &[f64], b: &[f64]) -> Result<Psnr> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::ShapeMismatch {
            op: "psnr_data",
            detail: format!("{} vs {} samples", a.len(), b.len()),
        });
    }
    let mse = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.len() as f64;
    Ok(psnr_from_mse(mse))
}

/// `10·log₁₀(1 / MSE)` with MSE in f64 over all pixels and channels;
/// images are expected in [0, 1] (peak 1.0).
pub fn psnr(a: &ImageBuf, b: &ImageBuf) -> Result<Psnr> {
    if a.width() != b.width() || a.height() != b.height() {
        return Err(Error::ShapeMismatch {
            op: "psnr",
            detail: format!(
                "{}x{} vs {}x{}",
                a.width(),
                a.height(),
                b.width(),
                b.height()
            ),
        });
    }
    let mse: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum::<f64>()
        / a.data().len() as f64;
    Ok(psnr_from_mse(mse))
}

/// Runs the network on one image of arbitrary size, without clamping:
/// reflect-101 padding (right/bottom) to multiples of 4, eval-mode forward,
/// crop back. The smallest supported extent is 3 pixels (reflection needs
/// pad < extent and the pad can reach 3).
fn restored_unclamped(net: &DeblurNet<f32>, img: &ImageBuf) -> Result<ImageBuf> {
    let (w, h) = (img.width(), img.height());
    let pad_r = (4 - w % 4) % 4;
    let pad_b = (4 - h % 4) % 4;
    let padded = if pad_r != 0 || pad_b != 0 {
        img.pad_reflect101(0, pad_r, 0, pad_b)?
    } else {
        img.clone()
    };
    let g = padded.to_tensor();
    let py = net.forward_pyramid(&g, false)?;
    let full = ImageBuf::from_tensor(&py.s1, 0)?;
    full.crop(0, 0, w, h)
}

/// Deblurs one image: padded eval-mode inference, output clamped to [0, 1].
pub fn deblur(net: &DeblurNet<f32>, img: &ImageBuf) -> Result<ImageBuf> {
    let mut out = restored_unclamped(net, img)?;
    out.clamp01();
    Ok(out)
}

pub const EVAL_CSV_HEADER: &str = "pair_id,psnr_output,psnr_input,residual_l1,mean_blur_size,flags";

#[derive(Clone, Debug)]
pub struct EvalRecord {
    pub id: String,
    pub psnr_output: Psnr,
    pub psnr_input: Psnr,
    /// Mean |restored − input|: the magnitude of the full-resolution
    /// subgraph's additive residual, before clamping.
    pub residual_l1: f64,
    pub mean_blur_size: f64,
}

impl EvalRecord {
    fn flags(&self) -> String {
        let mut f = Vec::new();
        if self.psnr_output.is_identical() {
            f.push("output-identical");
        }
        if self.psnr_input.is_identical() {
            f.push("input-identical");
        }
        f.join(";")
    }
}

#[derive(Debug)]
pub struct EvalSummary {
    pub records: Vec<EvalRecord>,
    pub mean_psnr_output: f64,
    pub mean_psnr_input: f64,
    pub csv_path: PathBuf,
}

/// Scores every manifest pair with the model and writes one CSV row each;
/// sequential in manifest order, so two runs produce identical files.
pub fn evaluate(net: &DeblurNet<f32>, manifest_path: &Path, csv_path: &Path) -> Result<EvalSummary> {
    let entries = read_manifest(manifest_path)?;
    let mut records = Vec::with_capacity(entries.len());
    let mut text = String::from(EVAL_CSV_HEADER);
    text.push('\n');

    for entry in &entries {
        let record = eval_pair(net, manifest_path, entry)?;
        text.push_str(&format!(
            "{},{},{},{},{},{}\n",
            record.id,
            record.psnr_output,
            record.psnr_input,
            record.residual_l1,
            record.mean_blur_size,
            record.flags()
        ));
        records.push(record);
    }

    let n = records.len() as f64;
    let mean_psnr_output = records.iter().map(|r| r.psnr_output.db_capped()).sum::<f64>() / n;
    let mean_psnr_input = records.iter().map(|r| r.psnr_input.db_capped()).sum::<f64>() / n;
    fs::write(csv_path, text)?;
    Ok(EvalSummary {
        records,
        mean_psnr_output,
        mean_psnr_input,
        csv_path: csv_path.to_path_buf(),
    })
}

fn eval_pair(net: &DeblurNet<f32>, manifest_path: &Path, entry: &ManifestEntry) -> Result<EvalRecord> {
    let (blur_path, sharp_path) = entry.resolve(manifest_path);
    let blurry = ImageBuf::load(&blur_path)?;
    let sharp = ImageBuf::load(&sharp_path)?;

    let raw = restored_unclamped(net, &blurry)?;
    let residual_l1 = raw
        .data()
        .iter()
        .zip(blurry.data())
        .map(|(&o, &g)| (o as f64 - g as f64).abs())
        .sum::<f64>()
        / raw.data().len() as f64;
    let mut output = raw;
    output.clamp01();

    Ok(EvalRecord {
        id: entry.id.clone(),
        psnr_output: psnr(&output, &sharp)?,
        psnr_input: psnr(&blurry, &sharp)?,
        residual_l1,
        mean_blur_size: entry.mean_blur_size,
    })
}

/// Standardizes to mean 0 and (population) standard deviation 1.
/// `None` when the series is constant — there is nothing to normalize.
pub fn standardize(xs: &[f64]) -> Option<Vec<f64>> {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    if var == 0.0 {
        return None;
    }
    let std = var.sqrt();
    Some(xs.iter().map(|x| (x - mean) / std).collect())
}

/// Pearson correlation; `None` when either series is constant.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    let (sx, sy) = (standardize(xs)?, standardize(ys)?);
    let n = sx.len() as f64;
    Some(sx.iter().zip(&sy).map(|(a, b)| a * b).sum::<f64>() / n)
}

pub const ANALYSIS_CSV_HEADER: &str = "pair_id,blur_size_std,residual_std";

#[derive(Debug)]
pub struct AnalysisSummary {
    pub pairs: usize,
    /// `None` when a series was constant (e.g. an identity model's residuals).
    pub pearson_r: Option<f64>,
    pub csv_path: PathBuf,
}

/// Correlates per-pair residual magnitude with the manifest's blur-size
/// estimate: writes the two standardized series as plot-ready CSV columns
/// and reports their Pearson correlation.
pub fn residual_analysis(
    net: &DeblurNet<f32>,
    manifest_path: &Path,
    csv_path: &Path,
) -> Result<AnalysisSummary> {
    let entries = read_manifest(manifest_path)?;
    let mut residuals = Vec::with_capacity(entries.len());
    for entry in &entries {
        residuals.push(eval_pair(net, manifest_path, entry)?.residual_l1);
    }
    let sizes: Vec<f64> = entries.iter().map(|e| e.mean_blur_size).collect();

    let std_sizes = standardize(&sizes);
    let std_res = standardize(&residuals);
    let mut text = String::from(ANALYSIS_CSV_HEADER);
    text.push('\n');
    for (i, entry) in entries.iter().enumerate() {
        // A constant series has no standardized form; keep the CSV plottable
        // by writing zeros there (the summary's None marks it undefined).
        let a = std_sizes.as_ref().map_or(0.0, |s| s[i]);
        let b = std_res.as_ref().map_or(0.0, |s| s[i]);
        text.push_str(&format!("{},{a},{b}\n", entry.id));
    }
    fs::write(csv_path, text)?;

    Ok(AnalysisSummary {
        pairs: entries.len(),
        pearson_r: pearson(&sizes, &residuals),
        csv_path: csv_path.to_path_buf(),
    })
}
