//! Versioned binary training snapshots.
//!
//! A checkpoint is everything needed to continue training bit-for-bit: model
//! parameters, batch-norm running buffers, Adam moments, the iteration
//! counter, and the exact data-RNG position. All integers and floats are
//! little-endian; the write order is the network's canonical parameter
//! order, so saving the same state twice produces identical bytes.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::net::DeblurNet;
use crate::optim::AdamState;
use crate::tensor::Scalar;

const MAGIC: &[u8; 8] = b"DBNCKPT\0";
const VERSION: u32 = 1;
/// Loss-convention tag baked into every checkpoint: 1 = per-scale mean
/// squared error. A checkpoint trained under a different convention must not
/// silently resume under this one.
const LOSS_CONVENTION_MEAN: u8 = 1;

/// A fully reconstructed training state.
pub struct TrainSnapshot<T: Scalar> {
    pub net: DeblurNet<T>,
    pub adam: AdamState<T>,
    pub iteration: u64,
    pub rng: ChaCha8Rng,
}

fn scalar_to_bytes<T: Scalar>(values: &[T], out: &mut Vec<u8>) {
    match T::DTYPE {
        crate::tensor::Dtype::F32 => {
            for v in values {
                out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
            }
        }
        crate::tensor::Dtype::F64 => {
            for v in values {
                out.extend_from_slice(&v.as_f64().to_le_bytes());
            }
        }
    }
}

fn scalar_size<T: Scalar>() -> usize {
    match T::DTYPE {
        crate::tensor::Dtype::F32 => 4,
        crate::tensor::Dtype::F64 => 8,
    }
}

struct Reader<R: Read> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.inner.read_exact(&mut buf).map_err(|e| {
            Error::Checkpoint(format!("truncated file: wanted {n} bytes, {e}"))
        })?;
        Ok(buf)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.bytes(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.bytes(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }

    fn u128(&mut self) -> Result<u128> {
        Ok(u128::from_le_bytes(self.bytes(16)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }

    fn name(&mut self) -> Result<String> {
        let len = self.u16()? as usize;
        String::from_utf8(self.bytes(len)?)
            .map_err(|_| Error::Checkpoint("non-UTF-8 name".into()))
    }

    fn scalars<T: Scalar>(&mut self, count: usize) -> Result<Vec<T>> {
        let raw = self.bytes(count * scalar_size::<T>())?;
        let mut out = Vec::with_capacity(count);
        match T::DTYPE {
            crate::tensor::Dtype::F32 => {
                for c in raw.chunks_exact(4) {
                    out.push(T::from_f64(f32::from_le_bytes(c.try_into().unwrap()) as f64));
                }
            }
            crate::tensor::Dtype::F64 => {
                for c in raw.chunks_exact(8) {
                    out.push(T::from_f64(f64::from_le_bytes(c.try_into().unwrap())));
                }
            }
        }
        Ok(out)
    }
}

fn write_name(buf: &mut Vec<u8>, name: &str) {
    buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
}

pub fn save<T: Scalar>(
    path: &Path,
    net: &DeblurNet<T>,
    adam: &AdamState<T>,
    iteration: u64,
    rng: &ChaCha8Rng,
) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.push(T::DTYPE.tag());
    buf.push(LOSS_CONVENTION_MEAN);
    buf.extend_from_slice(&net.width_multiplier.to_le_bytes());
    buf.extend_from_slice(&iteration.to_le_bytes());
    buf.extend_from_slice(&rng.get_seed());
    buf.extend_from_slice(&rng.get_word_pos().to_le_bytes());

    let params = net.params();
    buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, p) in &params {
        write_name(&mut buf, name);
        buf.push(p.shape().len() as u8);
        for &d in p.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        scalar_to_bytes(p.data(), &mut buf);
    }

    let bn_states = net.bn_states();
    buf.extend_from_slice(&(bn_states.len() as u32).to_le_bytes());
    for (name, bn) in &bn_states {
        write_name(&mut buf, name);
        let mean = bn.running_mean.borrow();
        let var = bn.running_var.borrow();
        buf.extend_from_slice(&(mean.len() as u32).to_le_bytes());
        scalar_to_bytes(&mean, &mut buf);
        scalar_to_bytes(&var, &mut buf);
    }

    buf.extend_from_slice(&adam.t.to_le_bytes());
    if adam.m.len() != params.len() {
        return Err(Error::Checkpoint(format!(
            "optimizer tracks {} tensors but the network has {} parameters",
            adam.m.len(),
            params.len()
        )));
    }
    for (idx, (_, p)) in params.iter().enumerate() {
        if adam.m[idx].len() != p.numel() || adam.v[idx].len() != p.numel() {
            return Err(Error::Checkpoint("optimizer moment length mismatch".into()));
        }
        scalar_to_bytes(&adam.m[idx], &mut buf);
        scalar_to_bytes(&adam.v[idx], &mut buf);
    }

    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&buf)?;
    w.flush()?;
    Ok(())
}

pub fn load<T: Scalar>(path: &Path, tracked: bool) -> Result<TrainSnapshot<T>> {
    let mut r = Reader {
        inner: BufReader::new(File::open(path)?),
    };
    if r.bytes(8)? != MAGIC {
        return Err(Error::Checkpoint("bad magic: not a checkpoint file".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {version}; this build reads version {VERSION}"
        )));
    }
    let dtype = r.u8()?;
    if dtype != T::DTYPE.tag() {
        return Err(Error::Checkpoint(format!(
            "dtype tag {dtype} does not match the requested element type {}",
            T::DTYPE
        )));
    }
    let loss_tag = r.u8()?;
    if loss_tag != LOSS_CONVENTION_MEAN {
        return Err(Error::Checkpoint(format!(
            "loss convention tag {loss_tag} is not the per-scale mean (1)"
        )));
    }
    let width_multiplier = r.f64()?;
    let iteration = r.u64()?;
    let seed: [u8; 32] = r.bytes(32)?.try_into().unwrap();
    let word_pos = r.u128()?;
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_word_pos(word_pos);

    // Construct the architecture, then overwrite every tensor. The throwaway
    // init RNG is never visible: all parameters come from the file.
    let mut init_rng = ChaCha8Rng::seed_from_u64(0);
    let mut net = DeblurNet::<T>::new(width_multiplier, tracked, &mut init_rng)?;

    let n_params = r.u32()? as usize;
    {
        let mut params = net.params_mut();
        if n_params != params.len() {
            return Err(Error::Checkpoint(format!(
                "file holds {n_params} parameters, architecture has {}",
                params.len()
            )));
        }
        for (name, p) in params.iter_mut() {
            let file_name = r.name()?;
            if &file_name != name {
                return Err(Error::Checkpoint(format!(
                    "parameter order mismatch: file has {file_name}, expected {name}"
                )));
            }
            let ndim = r.u8()? as usize;
            let mut dims = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                dims.push(r.u32()? as usize);
            }
            if dims != p.shape() {
                return Err(Error::Checkpoint(format!(
                    "{name}: file shape {dims:?} vs architecture {:?}",
                    p.shape()
                )));
            }
            let data = r.scalars::<T>(p.numel())?;
            p.replace_data(data);
        }
    }

    let n_bn = r.u32()? as usize;
    {
        let bn_states = net.bn_states();
        if n_bn != bn_states.len() {
            return Err(Error::Checkpoint(format!(
                "file holds {n_bn} batch-norm buffers, architecture has {}",
                bn_states.len()
            )));
        }
        for (name, bn) in &bn_states {
            let file_name = r.name()?;
            if &file_name != name {
                return Err(Error::Checkpoint(format!(
                    "batch-norm order mismatch: file has {file_name}, expected {name}"
                )));
            }
            let channels = r.u32()? as usize;
            if channels != bn.channels() {
                return Err(Error::Checkpoint(format!(
                    "{name}: file has {channels} channels, architecture {}",
                    bn.channels()
                )));
            }
            *bn.running_mean.borrow_mut() = r.scalars::<T>(channels)?;
            *bn.running_var.borrow_mut() = r.scalars::<T>(channels)?;
        }
    }

    let mut adam = AdamState::new(&net);
    adam.t = r.u64()?;
    for (idx, (_, p)) in net.params().iter().enumerate() {
        adam.m[idx] = r.scalars::<T>(p.numel())?;
        adam.v[idx] = r.scalars::<T>(p.numel())?;
    }

    let mut trailing = Vec::new();
    r.inner.read_to_end(&mut trailing)?;
    if !trailing.is_empty() {
        return Err(Error::Checkpoint(format!(
            "{} unexpected trailing bytes",
            trailing.len()
        )));
    }

    Ok(TrainSnapshot {
        net,
        adam,
        iteration,
        rng,
    })
}
