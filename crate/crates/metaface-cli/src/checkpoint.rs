//! Checkpoint files: a versioned container of named tensors.
//!
//! The layout is magic, format version, model config hash, optimizer step,
//! base seed, then each tensor prefixed by its name. Tensor payloads reuse
//! the corpus codec, so the whole file is little-endian and byte-exact:
//! save, load, save again produces identical bytes. All randomness in a run
//! is derived from the base seed and the step counter, so those two fields
//! carry the complete generator state.
//!
//! A full checkpoint stores the base weights, adapters, and encoder. An
//! adaptation produces a delta checkpoint instead: only the tensors the
//! adaptation scope trained, plus the support conditioning under `cond.*`
//! names. Applying a delta replaces those entries in a full checkpoint.

use std::fs;
use std::io::Read;
use std::path::Path;

use metaface_core::codec::{read_tensor, write_tensor};
use metaface_core::params::ParameterSet;
use metaface_core::relation::LatentDistribution;
use metaface_core::{Error, Result};

const MAGIC: &[u8; 8] = b"MFCKPT01";
const VERSION: u32 = 1;
/// Caps the section count so a damaged header cannot balloon a read loop.
const MAX_SECTIONS: u32 = 1 << 16;
const MAX_NAME_LEN: u32 = 1 << 10;

const COND_MEAN: &str = "cond.mean";
const COND_LOG_VAR: &str = "cond.log_var";

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub params: ParameterSet,
    pub step: u64,
    pub seed: u64,
    pub conditioning: Option<LatentDistribution>,
}

impl Checkpoint {
    pub fn new(params: ParameterSet, step: u64, seed: u64) -> Checkpoint {
        Checkpoint {
            params,
            step,
            seed,
            conditioning: None,
        }
    }

    pub fn config_hash(&self) -> u64 {
        self.params.config_hash()
    }

    /// Errors unless the checkpoint was written for the given model config.
    pub fn check_config_hash(&self, expected: u64, path: &Path) -> Result<()> {
        if self.config_hash() != expected {
            return Err(Error::Config(format!(
                "checkpoint {} was written for a different model config \
                 (stored hash {:016x}, current {:016x})",
                path.display(),
                self.config_hash(),
                expected
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.params.config_hash().to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        let extra = if self.conditioning.is_some() { 2 } else { 0 };
        let count = u32::try_from(self.params.len() + extra)
            .map_err(|_| Error::Config("too many checkpoint sections".into()))?;
        out.extend_from_slice(&count.to_le_bytes());
        for (name, tensor) in self.params.iter() {
            write_section(&mut out, name, tensor)?;
        }
        if let Some(cond) = &self.conditioning {
            write_section(&mut out, COND_MEAN, &cond.mean)?;
            write_section(&mut out, COND_LOG_VAR, &cond.log_var)?;
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Corpus("not a checkpoint file".into()));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(Error::Corpus(format!(
                "checkpoint format version {version} unsupported (expected {VERSION})"
            )));
        }
        let config_hash = read_u64(&mut r)?;
        let step = read_u64(&mut r)?;
        let seed = read_u64(&mut r)?;
        let count = read_u32(&mut r)?;
        if count > MAX_SECTIONS {
            return Err(Error::Corpus(format!(
                "checkpoint section count {count} exceeds limit"
            )));
        }
        let mut params = ParameterSet::new(config_hash);
        let mut cond_mean = None;
        let mut cond_log_var = None;
        for _ in 0..count {
            let (name, tensor) = read_section(&mut r)?;
            match name.as_str() {
                COND_MEAN => cond_mean = Some(tensor),
                COND_LOG_VAR => cond_log_var = Some(tensor),
                _ => params.insert(name, tensor)?,
            }
        }
        if !r.is_empty() {
            return Err(Error::Corpus("trailing bytes after checkpoint".into()));
        }
        let conditioning = match (cond_mean, cond_log_var) {
            (None, None) => None,
            (Some(mean), Some(log_var)) => Some(LatentDistribution::new(mean, log_var)?),
            _ => return Err(Error::Corpus("conditioning tensors incomplete".into())),
        };
        Ok(Checkpoint {
            params,
            step,
            seed,
            conditioning,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                fs::create_dir_all(parent)?;
            }
        }
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = fs::read(path).map_err(|e| {
            Error::Corpus(format!("cannot read checkpoint {}: {e}", path.display()))
        })?;
        Self::from_bytes(&bytes)
    }

    /// Replaces every parameter the delta carries and adopts its
    /// conditioning. The delta must share this checkpoint's config hash.
    pub fn apply_delta(&mut self, delta: &Checkpoint, delta_path: &Path) -> Result<()> {
        delta.check_config_hash(self.config_hash(), delta_path)?;
        for (name, tensor) in delta.params.iter() {
            self.params.update(name, tensor.clone())?;
        }
        if delta.conditioning.is_some() {
            self.conditioning = delta.conditioning.clone();
        }
        Ok(())
    }

    /// Extracts the tensors selected by `keep` into a delta checkpoint.
    pub fn delta(
        &self,
        keep: impl Fn(&str) -> bool,
        conditioning: Option<LatentDistribution>,
        step: u64,
    ) -> Result<Checkpoint> {
        let mut params = ParameterSet::new(self.config_hash());
        for (name, tensor) in self.params.iter() {
            if keep(name) {
                params.insert(name, tensor.clone())?;
            }
        }
        Ok(Checkpoint {
            params,
            step,
            seed: self.seed,
            conditioning,
        })
    }
}

fn write_section(out: &mut Vec<u8>, name: &str, tensor: &metaface_core::autodiff::Tensor) -> Result<()> {
    let len = u32::try_from(name.len())
        .ok()
        .filter(|&l| l <= MAX_NAME_LEN)
        .ok_or_else(|| Error::Config(format!("tensor name too long: {name:?}")))?;
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    write_tensor(out, tensor)
}

fn read_section(r: &mut &[u8]) -> Result<(String, metaface_core::autodiff::Tensor)> {
    let len = read_u32(r)?;
    if len > MAX_NAME_LEN {
        return Err(Error::Corpus(format!("tensor name length {len} exceeds limit")));
    }
    let mut name = vec![0u8; len as usize];
    r.read_exact(&mut name)?;
    let name = String::from_utf8(name)
        .map_err(|_| Error::Corpus("tensor name is not UTF-8".into()))?;
    let tensor = read_tensor(r)?;
    Ok((name, tensor))
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}
