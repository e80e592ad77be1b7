//! The training loop: batched random crops, per-iteration CSV logging,
//! periodic checkpoints, and bit-identical resume.
//!
//! Determinism contract: a single `ChaCha8Rng` drives parameter init and all
//! sampling, and its stream position is stored in every checkpoint. Per
//! iteration, each batch slot consumes randomness in this fixed order:
//! pair index, crop x, crop y, then (only when augmentation is on) the flip
//! coin. Changing that order, or drawing from the RNG anywhere else in the
//! loop, silently breaks resume — treat it as part of the checkpoint format.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint;
use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::image_buf::ImageBuf;
use crate::net::{DeblurNet, LossBreakdown};
use crate::optim::{adam_step, lr_at, AdamState};
use crate::tensor::{Scalar, Tensor};

pub const LOSS_LOG_HEADER: &str = "iteration,l1,l2,l3,total,lr";

/// One training example: the blurry input and its sharp target, same size.
pub type Pair = (ImageBuf, ImageBuf);

#[derive(Debug)]
pub struct TrainReport {
    /// Total completed iterations when the run ended (resumes included).
    pub iterations_run: u64,
    /// Breakdown of the last logged iteration, if any ran.
    pub final_loss: Option<LossBreakdown>,
    pub checkpoints: Vec<PathBuf>,
    pub log_path: PathBuf,
}

fn to_batch<T: Scalar>(crops: &[ImageBuf]) -> Result<Tensor<T>> {
    let refs: Vec<&ImageBuf> = crops.iter().collect();
    let t = ImageBuf::batch_to_tensor(&refs)?;
    let data = t.data().iter().map(|&v| T::from_f64(v as f64)).collect();
    Tensor::from_vec(t.shape(), data)
}

fn check_pairs(pairs: &[Pair], crop: usize) -> Result<()> {
    if pairs.is_empty() {
        return Err(Error::EmptyDataset("training requires at least one pair".into()));
    }
    for (i, (g, f)) in pairs.iter().enumerate() {
        if g.width() != f.width() || g.height() != f.height() {
            return Err(Error::ShapeMismatch {
                op: "train",
                detail: format!(
                    "pair {i}: blurry {}x{} vs sharp {}x{}",
                    g.width(),
                    g.height(),
                    f.width(),
                    f.height()
                ),
            });
        }
        if g.width() < crop || g.height() < crop {
            return Err(Error::ShapeMismatch {
                op: "train",
                detail: format!(
                    "pair {i} is {}x{}, smaller than the {crop}px crop",
                    g.width(),
                    g.height()
                ),
            });
        }
    }
    Ok(())
}

/// Rewrites the loss log so it contains the header plus exactly the rows
/// before `start`. A crash between a checkpoint and the next one may leave
/// rows past the checkpointed iteration; resuming replays those iterations,
/// so stale rows must go or the log would hold duplicates.
fn reset_log(path: &Path, start: u64) -> Result<fs::File> {
    let mut kept = String::from(LOSS_LOG_HEADER);
    kept.push('\n');
    if start > 0 && path.exists() {
        for line in fs::read_to_string(path)?.lines().skip(1) {
            let iter: u64 = line
                .split(',')
                .next()
                .and_then(|s| s.parse().ok())
                .unwrap_or(u64::MAX);
            if iter < start {
                kept.push_str(line);
                kept.push('\n');
            }
        }
    }
    fs::write(path, kept)?;
    Ok(fs::OpenOptions::new().append(true).open(path)?)
}

/// Runs (or resumes) training over `pairs`, writing `loss.csv` and
/// `ckpt-NNNNNNN.bin` files into `out_dir`.
///
/// With `resume_from`, the snapshot's network, optimizer state, and RNG
/// position are restored and the loop continues at the stored iteration;
/// given the same config and data, the continuation is bit-identical to an
/// uninterrupted run (checkpoint bytes and loss log alike).
pub fn train<T: Scalar>(
    pairs: &[Pair],
    cfg: &TrainConfig,
    out_dir: &Path,
    resume_from: Option<&Path>,
) -> Result<TrainReport> {
    cfg.validate()?;
    check_pairs(pairs, cfg.crop_size)?;
    fs::create_dir_all(out_dir)?;

    let (mut net, mut adam, mut rng, start) = match resume_from {
        Some(path) => {
            let snap = checkpoint::load::<T>(path, true)?;
            if snap.net.width_multiplier != cfg.width_multiplier {
                return Err(Error::Checkpoint(format!(
                    "checkpoint width_multiplier {} does not match configured {}",
                    snap.net.width_multiplier, cfg.width_multiplier
                )));
            }
            (snap.net, snap.adam, snap.rng, snap.iteration)
        }
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let net = DeblurNet::new(cfg.width_multiplier, true, &mut rng)?;
            let adam = AdamState::new(&net);
            (net, adam, rng, 0)
        }
    };

    let log_path = out_dir.join("loss.csv");
    let mut log = reset_log(&log_path, start)?;
    let mut checkpoints = Vec::new();
    let mut final_loss = None;

    for iter in start..cfg.iterations {
        let lr = lr_at(cfg.base_lr, iter);

        let mut g_crops = Vec::with_capacity(cfg.batch_size);
        let mut f_crops = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let idx = rng.random_range(0..pairs.len());
            let (g, f) = &pairs[idx];
            let x0 = rng.random_range(0..=g.width() - cfg.crop_size);
            let y0 = rng.random_range(0..=g.height() - cfg.crop_size);
            let mut gc = g.crop(x0, y0, cfg.crop_size, cfg.crop_size)?;
            let mut fc = f.crop(x0, y0, cfg.crop_size, cfg.crop_size)?;
            if cfg.augment && rng.random_bool(0.5) {
                gc = gc.flip_horizontal();
                fc = fc.flip_horizontal();
            }
            g_crops.push(gc);
            f_crops.push(fc);
        }
        let g_batch = to_batch::<T>(&g_crops)?;
        let f_batch = to_batch::<T>(&f_crops)?;

        let (total, breakdown) = net.loss(&g_batch, &f_batch, true)?;
        total.backward()?;
        adam_step(&mut net, &mut adam, lr, iter)?;

        writeln!(
            log,
            "{iter},{},{},{},{},{lr}",
            breakdown.l1, breakdown.l2, breakdown.l3, breakdown.total
        )?;
        final_loss = Some(breakdown);

        let done = iter + 1;
        let at_interval = cfg.checkpoint_every != 0 && done % cfg.checkpoint_every == 0;
        if at_interval || done == cfg.iterations {
            log.flush()?;
            let path = out_dir.join(format!("ckpt-{done:07}.bin"));
            checkpoint::save(&path, &net, &adam, done, &rng)?;
            checkpoints.push(path);
        }
    }
    log.flush()?;

    Ok(TrainReport {
        iterations_run: cfg.iterations.max(start),
        final_loss,
        checkpoints,
        log_path,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicU32, Ordering};

    fn tmp_dir(tag: &str) -> PathBuf {
        static N: AtomicU32 = AtomicU32::new(0);
        let dir = std::env::temp_dir().join(format!(
            "train-{tag}-{}-{}",
            std::process::id(),
            N.fetch_add(1, Ordering::Relaxed)
        ));
        fs::create_dir_all(&dir).unwrap();
        dir
    }

    fn toy_pairs(n: usize, w: usize, h: usize) -> Vec<Pair> {
        (0..n)
            .map(|i| {
                let mut f = ImageBuf::new(w, h);
                for c in 0..3 {
                    for y in 0..h {
                        for x in 0..w {
                            let v = ((x * 37 + y * 23 + c * 11 + i * 7) % 97) as f32 / 96.0;
                            f.set(c, x, y, v);
                        }
                    }
                }
                let g = f.shift_by(0.5, 0.0);
                (g, f)
            })
            .collect()
    }

    fn toy_cfg() -> TrainConfig {
        let mut cfg = TrainConfig::default();
        cfg.width_multiplier = 0.125;
        cfg.batch_size = 2;
        cfg.crop_size = 8;
        cfg.iterations = 6;
        cfg.checkpoint_every = 3;
        cfg.seed = 7;
        cfg.augment = true;
        cfg
    }

    #[test]
    fn resume_matches_uninterrupted_run_bit_for_bit() {
        let pairs = toy_pairs(3, 12, 10);
        let cfg = toy_cfg();

        let dir_a = tmp_dir("full");
        let report_a = train::<f32>(&pairs, &cfg, &dir_a, None).unwrap();
        assert_eq!(report_a.iterations_run, 6);
        assert_eq!(report_a.checkpoints.len(), 2, "checkpoints at 3 and 6");

        let dir_b = tmp_dir("split");
        let mut first_half = cfg.clone();
        first_half.iterations = 3;
        train::<f32>(&pairs, &first_half, &dir_b, None).unwrap();
        let mid = dir_b.join("ckpt-0000003.bin");
        let report_b = train::<f32>(&pairs, &cfg, &dir_b, Some(&mid)).unwrap();
        assert_eq!(report_b.iterations_run, 6);

        let final_a = fs::read(dir_a.join("ckpt-0000006.bin")).unwrap();
        let final_b = fs::read(dir_b.join("ckpt-0000006.bin")).unwrap();
        assert_eq!(final_a, final_b, "resumed final checkpoint must be byte-identical");

        let log_a = fs::read_to_string(dir_a.join("loss.csv")).unwrap();
        let log_b = fs::read_to_string(dir_b.join("loss.csv")).unwrap();
        assert_eq!(log_a, log_b, "loss logs must be identical after resume");

        let lines: Vec<&str> = log_a.lines().collect();
        assert_eq!(lines[0], LOSS_LOG_HEADER);
        assert_eq!(lines.len(), 7, "header plus one row per iteration");
        for (i, row) in lines[1..].iter().enumerate() {
            let cols: Vec<&str> = row.split(',').collect();
            assert_eq!(cols.len(), 6);
            assert_eq!(cols[0].parse::<u64>().unwrap(), i as u64);
            let lr: f64 = cols[5].parse().unwrap();
            assert_eq!(lr, lr_at(cfg.base_lr, i as u64));
            assert!(cols[1..5].iter().all(|c| c.parse::<f64>().unwrap().is_finite()));
        }

        fs::remove_dir_all(&dir_a).ok();
        fs::remove_dir_all(&dir_b).ok();
    }

    #[test]
    fn stale_log_rows_are_dropped_on_resume() {
        let pairs = toy_pairs(2, 12, 10);
        let cfg = toy_cfg();

        let dir = tmp_dir("stale");
        let mut first_half = cfg.clone();
        first_half.iterations = 3;
        train::<f32>(&pairs, &first_half, &dir, None).unwrap();
        // Simulate a crash that logged rows past the checkpoint.
        let log_path = dir.join("loss.csv");
        let mut tampered = fs::read_to_string(&log_path).unwrap();
        tampered.push_str("3,9,9,9,27,0.001\n4,8,8,8,24,0.001\n");
        fs::write(&log_path, tampered).unwrap();

        train::<f32>(&pairs, &cfg, &dir, Some(&dir.join("ckpt-0000003.bin"))).unwrap();
        let log = fs::read_to_string(&log_path).unwrap();
        assert_eq!(log.lines().count(), 7, "stale rows replaced, not duplicated");
        assert!(!log.contains(",9,9,9,"), "tampered rows must be gone");

        fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn train_validates_dataset_and_resume_width() {
        let cfg = toy_cfg();
        let dir = tmp_dir("validate");

        let err = train::<f32>(&[], &cfg, &dir, None).unwrap_err();
        assert!(matches!(err, Error::EmptyDataset(_)));

        let small = toy_pairs(1, 4, 4);
        let err = train::<f32>(&small, &cfg, &dir, None).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch { .. }));

        let lopsided = vec![(ImageBuf::new(12, 10), ImageBuf::new(10, 12))];
        let err = train::<f32>(&lopsided, &cfg, &dir, None).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch { .. }));

        // checkpoint_every = 0 means "final checkpoint only".
        let pairs = toy_pairs(1, 12, 10);
        let mut end_only = cfg.clone();
        end_only.iterations = 2;
        end_only.checkpoint_every = 0;
        let report = train::<f32>(&pairs, &end_only, &dir.join("end-only"), None).unwrap();
        assert_eq!(report.checkpoints.len(), 1);

        // A checkpoint written at one width must not silently resume another.
        let mut one = cfg.clone();
        one.iterations = 1;
        one.checkpoint_every = 1;
        train::<f32>(&pairs, &one, &dir, None).unwrap();
        let mut wider = cfg.clone();
        wider.width_multiplier = 0.25;
        let err =
            train::<f32>(&pairs, &wider, &dir, Some(&dir.join("ckpt-0000001.bin"))).unwrap_err();
        assert!(matches!(err, Error::Checkpoint(_)), "got {err:?}");

        fs::remove_dir_all(&dir).ok();
    }
}
