//! Fixed little-endian binary layout for tensors and clip files.
//!
//! The same tensor encoding backs corpus clips and training checkpoints, so
//! byte-identical reproducibility reduces to writing identical tensors.
//! Layout of a tensor: u32 rank, u32 extents, then f64 values row-major.
//! A clip file is a magic tag, the frame rate, the feature tensor, and the
//! motion tensor.

use std::io::{Read, Write};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::model::{FeatureClip, MotionClip};

pub const CLIP_MAGIC: &[u8; 8] = b"MFCLIP01";

/// Guards against allocating absurd buffers when reading a damaged file.
const MAX_RANK: u32 = 8;
const MAX_ELEMENTS: u64 = 1 << 28;

pub fn write_tensor(w: &mut impl Write, tensor: &Tensor) -> Result<()> {
    let shape = tensor.shape();
    w.write_all(&(shape.len() as u32).to_le_bytes())?;
    for &extent in shape {
        w.write_all(&(extent as u32).to_le_bytes())?;
    }
    for &v in tensor.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_exact_array<const N: usize>(r: &mut impl Read, what: &str) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)
        .map_err(|e| Error::Corpus(format!("truncated {what}: {e}")))?;
    Ok(buf)
}

pub fn read_tensor(r: &mut impl Read) -> Result<Tensor> {
    let rank = u32::from_le_bytes(read_exact_array(r, "tensor rank")?);
    if rank > MAX_RANK {
        return Err(Error::Corpus(format!("tensor rank {rank} out of range")));
    }
    let mut shape = Vec::with_capacity(rank as usize);
    let mut numel: u64 = 1;
    for _ in 0..rank {
        let extent = u32::from_le_bytes(read_exact_array(r, "tensor extent")?);
        numel = numel.saturating_mul(extent as u64);
        shape.push(extent as usize);
    }
    if numel > MAX_ELEMENTS {
        return Err(Error::Corpus(format!("tensor of {numel} elements out of range")));
    }
    let mut data = Vec::with_capacity(numel as usize);
    for _ in 0..numel {
        data.push(f64::from_le_bytes(read_exact_array(r, "tensor data")?));
    }
    Tensor::new(shape, data)
}

pub fn write_clip(w: &mut impl Write, features: &FeatureClip, motion: &MotionClip) -> Result<()> {
    w.write_all(CLIP_MAGIC)?;
    w.write_all(&motion.frame_rate.to_le_bytes())?;
    write_tensor(w, &features.frames)?;
    write_tensor(w, &motion.frames)?;
    Ok(())
}

pub fn read_clip(r: &mut impl Read) -> Result<(FeatureClip, MotionClip)> {
    let magic = read_exact_array::<8>(r, "clip magic")?;
    if &magic != CLIP_MAGIC {
        return Err(Error::Corpus(format!(
            "bad clip magic {:?}, expected {:?}",
            String::from_utf8_lossy(&magic),
            String::from_utf8_lossy(CLIP_MAGIC)
        )));
    }
    let frame_rate = f64::from_le_bytes(read_exact_array(r, "frame rate")?);
    let features = FeatureClip::new(read_tensor(r)?)?;
    let motion = MotionClip::new(read_tensor(r)?, frame_rate)?;
    if features.frame_count() != motion.frame_count() {
        return Err(Error::Corpus(format!(
            "clip frame counts disagree: {} features vs {} motion",
            features.frame_count(),
            motion.frame_count()
        )));
    }
    Ok((features, motion))
}
