//! Checkpoint archive: an 8-byte magic, a little-endian u64 header length,
//! a JSON header (paths, shapes, dtypes, flags, config digest, step, RNG
//! state, payload checksum) and raw little-endian tensor payloads in header
//! order. Round trips are bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::IxDyn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParameterStore;
use crate::tensor::Arr;

const MAGIC: &[u8; 8] = b"RENCKPT1";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorMeta {
    path: String,
    shape: Vec<usize>,
    dtype: String,
    frozen: bool,
    buffer: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    version: u32,
    config_digest: String,
    step: u64,
    rng_state: [u64; 4],
    payload_fnv1a: String,
    tensors: Vec<TensorMeta>,
}

/// FNV-1a 64-bit, used for payload checksums and config digests.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Digest of a canonical config serialization.
pub fn config_digest<T: Serialize>(config: &T) -> String {
    let json = serde_json::to_string(config).expect("config serializes");
    format!("{:016x}", fnv1a64(json.as_bytes()))
}

pub fn save_checkpoint(
    store: &ParameterStore,
    rng_state: [u64; 4],
    config_digest: &str,
    path: &Path,
) -> Result<()> {
    let mut payload: Vec<u8> = Vec::new();
    let mut tensors = Vec::new();
    for (p, entry) in store.iter() {
        tensors.push(TensorMeta {
            path: p.clone(),
            shape: entry.value.shape().to_vec(),
            dtype: "f64".to_string(),
            frozen: entry.frozen,
            buffer: entry.buffer,
        });
        for v in entry.value.iter() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let header = Header {
        version: VERSION,
        config_digest: config_digest.to_string(),
        step: store.step(),
        rng_state,
        payload_fnv1a: format!("{:016x}", fnv1a64(&payload)),
        tensors,
    };
    let header_json = serde_json::to_vec(&header).expect("header serializes");

    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(MAGIC)?;
    w.write_all(&(header_json.len() as u64).to_le_bytes())?;
    w.write_all(&header_json)?;
    w.write_all(&payload)?;
    w.flush()?;
    Ok(())
}

#[derive(Debug)]
pub struct LoadedCheckpoint {
    pub store: ParameterStore,
    pub rng_state: [u64; 4],
    pub step: u64,
    pub config_digest: String,
}

/// Load an archive. When `expected_digest` is given, a mismatch is a config
/// error; corruption or truncation is an integrity error.
pub fn load_checkpoint(path: &Path, expected_digest: Option<&str>) -> Result<LoadedCheckpoint> {
    let file = File::open(path)
        .map_err(|e| Error::Io(format!("open {}: {e}", path.display())))?;
    let mut r = BufReader::new(file);

    let mut magic = [0u8; 8];
    read_exact(&mut r, &mut magic)?;
    if &magic != MAGIC {
        return Err(Error::integrity("bad checkpoint magic"));
    }
    let mut len_bytes = [0u8; 8];
    read_exact(&mut r, &mut len_bytes)?;
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    let mut header_json = vec![0u8; header_len];
    read_exact(&mut r, &mut header_json)?;
    let header: Header = serde_json::from_slice(&header_json)
        .map_err(|e| Error::integrity(format!("checkpoint header: {e}")))?;
    if header.version != VERSION {
        return Err(Error::config(format!(
            "unsupported checkpoint version {}",
            header.version
        )));
    }
    if let Some(expected) = expected_digest {
        if expected != header.config_digest {
            return Err(Error::config(format!(
                "config digest mismatch: checkpoint {} vs expected {}",
                header.config_digest, expected
            )));
        }
    }

    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    let expected_len: usize = header
        .tensors
        .iter()
        .map(|t| t.shape.iter().product::<usize>() * 8)
        .sum();
    if payload.len() != expected_len {
        return Err(Error::integrity(format!(
            "payload length {} != expected {}",
            payload.len(),
            expected_len
        )));
    }
    let checksum = format!("{:016x}", fnv1a64(&payload));
    if checksum != header.payload_fnv1a {
        return Err(Error::integrity("payload checksum mismatch"));
    }

    let mut store = ParameterStore::new();
    let mut off = 0usize;
    for meta in &header.tensors {
        if meta.dtype != "f64" {
            return Err(Error::config(format!(
                "unsupported dtype `{}` for `{}`",
                meta.dtype, meta.path
            )));
        }
        let n: usize = meta.shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for i in 0..n {
            let b: [u8; 8] = payload[off + i * 8..off + i * 8 + 8].try_into().unwrap();
            data.push(f64::from_le_bytes(b));
        }
        off += n * 8;
        let arr = Arr::from_shape_vec(IxDyn(&meta.shape), data)
            .map_err(|e| Error::integrity(format!("tensor `{}`: {e}", meta.path)))?;
        if meta.buffer {
            store.insert_buffer(&meta.path, arr)?;
        } else {
            store.insert(&meta.path, arr)?;
            store.set_frozen(&meta.path, meta.frozen)?;
        }
    }
    store.set_step(header.step);
    Ok(LoadedCheckpoint {
        store,
        rng_state: header.rng_state,
        step: header.step,
        config_digest: header.config_digest,
    })
}

fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::integrity("checkpoint truncated"))
}
