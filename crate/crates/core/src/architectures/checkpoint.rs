//! Weight checkpoints.
//!
//! Layout, all integers `u32` little-endian:
//!
//! ```text
//! "RAWT1"
//! name length, network name (UTF-8)
//! blob count
//! per blob: name length, name, rank, extents[rank], f32 LE scalars
//! ```
//!
//! Parameters come first in store order, followed by the batch-norm running
//! statistics as `{prefix}.running_mean` and `{prefix}.running_var` blobs.

use std::io::{Read, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Network, NetworkSpec};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Scalar;

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"RAWT1";

const RUNNING_MEAN: &str = ".running_mean";
const RUNNING_VAR: &str = ".running_var";

fn put_u32<W: Write>(w: &mut W, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::format(format!("value {v} does not fit in u32")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn put_str<W: Write>(w: &mut W, s: &str) -> Result<()> {
    put_u32(w, s.len())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn put_blob<W: Write, T: Scalar>(w: &mut W, name: &str, shape: &[usize], data: &[T]) -> Result<()> {
    put_str(w, name)?;
    put_u32(w, shape.len())?;
    for &e in shape {
        put_u32(w, e)?;
    }
    let mut buf = Vec::with_capacity(data.len() * 4);
    for v in data {
        buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

fn get_u32<R: Read>(r: &mut R) -> Result<usize> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b) as usize)
}

fn get_str<R: Read>(r: &mut R) -> Result<String> {
    let n = get_u32(r)?;
    let mut b = vec![0u8; n];
    r.read_exact(&mut b)?;
    String::from_utf8(b).map_err(|_| Error::format("checkpoint string is not UTF-8"))
}

/// Writes every parameter and running statistic as 32-bit scalars.
pub fn write_checkpoint<W: Write, T: Scalar>(w: &mut W, net: &Network<T>) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    put_str(w, &net.spec.name)?;
    let stats: Vec<_> = net.params.stats_iter().collect();
    put_u32(w, net.params.len() + 2 * stats.len())?;
    for (name, t) in net.params.iter() {
        put_blob(w, name, t.shape(), t.data())?;
    }
    for (prefix, s) in stats {
        put_blob(w, &format!("{prefix}{RUNNING_MEAN}"), &[s.mean.len()], &s.mean)?;
        put_blob(w, &format!("{prefix}{RUNNING_VAR}"), &[s.var.len()], &s.var)?;
    }
    Ok(())
}

/// Reads a checkpoint, rebuilding the network it names. Every stored
/// tensor must be present with the expected shape.
pub fn read_checkpoint<R: Read, T: Scalar>(r: &mut R) -> Result<Network<T>> {
    let mut magic = [0u8; 5];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::format("not a weight checkpoint (bad magic)"));
    }
    let name = get_str(r)?;
    let spec = NetworkSpec::build(&name)?;
    let mut params = spec.init_params::<T, _>(&mut ChaCha8Rng::seed_from_u64(0));
    let expected = params.len() + 2 * params.stats_iter().count();
    let count = get_u32(r)?;
    if count != expected {
        return Err(Error::format(format!(
            "checkpoint for {name} holds {count} blobs, expected {expected}"
        )));
    }
    let mut seen = std::collections::HashSet::new();
    for _ in 0..count {
        let blob = get_str(r)?;
        let rank = get_u32(r)?;
        let shape = (0..rank).map(|_| get_u32(r)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let mut raw = vec![0u8; n * 4];
        r.read_exact(&mut raw)?;
        let data: Vec<T> = raw
            .chunks_exact(4)
            .map(|c| T::from_f64(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
            .collect();
        if !seen.insert(blob.clone()) {
            return Err(Error::format(format!("duplicate blob `{blob}`")));
        }
        let target: &mut [T] = if let Some(t) = params.get_mut(&blob) {
            if t.shape() != shape.as_slice() {
                return Err(Error::format(format!(
                    "blob `{blob}` has shape {shape:?}, expected {:?}",
                    t.shape()
                )));
            }
            t.data_mut()
        } else if let Some(prefix) = blob.strip_suffix(RUNNING_MEAN) {
            stat_slot(&mut params, prefix, &blob, &shape, true)?
        } else if let Some(prefix) = blob.strip_suffix(RUNNING_VAR) {
            stat_slot(&mut params, prefix, &blob, &shape, false)?
        } else {
            return Err(Error::format(format!("unexpected blob `{blob}` for {name}")));
        };
        target.copy_from_slice(&data);
    }
    Ok(Network { spec, params })
}

fn stat_slot<'a, T: Scalar>(
    params: &'a mut ParamStore<T>,
    prefix: &str,
    blob: &str,
    shape: &[usize],
    mean: bool,
) -> Result<&'a mut [T]> {
    let s = params
        .stats_mut(prefix)
        .ok_or_else(|| Error::format(format!("unexpected blob `{blob}`")))?;
    let v = if mean { &mut s.mean } else { &mut s.var };
    if shape != [v.len()] {
        return Err(Error::format(format!(
            "blob `{blob}` has shape {shape:?}, expected [{}]",
            v.len()
        )));
    }
    Ok(v.as_mut_slice())
}

impl<T: Scalar> Network<T> {
    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        write_checkpoint(&mut w, self)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
        read_checkpoint(&mut r)
    }
}
