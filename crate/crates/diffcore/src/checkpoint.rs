//! Checkpoint container: a JSON header followed by raw little-endian
//! f64 payloads in header name order.
//!
//! Layout: 4-byte magic `DCKP`, u64-LE header length, header JSON,
//! payload bytes. The header carries `{version, names, shapes,
//! dtype: "f64", adam: {beta1, beta2, eps, step}}` plus the trainable
//! flags, the store's RNG seed and caller metadata. Optimizer moments
//! are appended as extra payload entries under the reserved `adam.`
//! prefix so a resumed run restores bit-exactly.

use crate::adam::AdamState;
use crate::error::{DiffError, Result};
use crate::store::{ParamStore, RESERVED_PREFIX};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"DCKP";
pub const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct AdamHeader {
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    version: u32,
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    dtype: String,
    adam: AdamHeader,
    trainable: Vec<bool>,
    rng_seed: u64,
    #[serde(default)]
    meta: serde_json::Value,
}

pub struct Checkpoint {
    pub store: ParamStore,
    pub adam: Option<AdamState>,
    pub meta: serde_json::Value,
}

pub fn save(
    path: &Path,
    store: &ParamStore,
    adam: Option<&AdamState>,
    meta: serde_json::Value,
) -> Result<()> {
    let mut names: Vec<String> = Vec::new();
    let mut shapes: Vec<Vec<usize>> = Vec::new();
    let mut trainable: Vec<bool> = Vec::new();
    let mut payload: Vec<&Tensor> = Vec::new();
    for e in store.iter() {
        names.push(e.name.clone());
        shapes.push(e.tensor.shape().to_vec());
        trainable.push(e.trainable);
        payload.push(&e.tensor);
    }
    if let Some(state) = adam {
        for (name, m, v) in state.iter_moments() {
            names.push(format!("{RESERVED_PREFIX}m/{name}"));
            shapes.push(m.shape().to_vec());
            trainable.push(false);
            payload.push(m);
            names.push(format!("{RESERVED_PREFIX}v/{name}"));
            shapes.push(v.shape().to_vec());
            trainable.push(false);
            payload.push(v);
        }
    }
    let header = Header {
        version: VERSION,
        names,
        shapes,
        dtype: "f64".to_string(),
        adam: adam
            .map(|a| AdamHeader {
                beta1: a.beta1,
                beta2: a.beta2,
                eps: a.eps,
                step: a.step,
            })
            .unwrap_or(AdamHeader {
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
                step: 0,
            }),
        trainable,
        rng_seed: store.rng_seed(),
        meta,
    };
    let header_bytes = serde_json::to_vec(&header)?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
    w.write_all(&header_bytes)?;
    for t in payload {
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| DiffError::Checkpoint("file too short for magic".into()))?;
    if &magic != MAGIC {
        return Err(DiffError::Checkpoint(format!(
            "bad magic {:?}, expected {:?}",
            magic, MAGIC
        )));
    }
    let mut len_bytes = [0u8; 8];
    r.read_exact(&mut len_bytes)
        .map_err(|_| DiffError::Checkpoint("truncated header length".into()))?;
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    let mut header_bytes = vec![0u8; header_len];
    r.read_exact(&mut header_bytes)
        .map_err(|_| DiffError::Checkpoint("truncated header".into()))?;
    let header: Header = serde_json::from_slice(&header_bytes)?;
    if header.version != VERSION {
        return Err(DiffError::Checkpoint(format!(
            "unsupported version {}",
            header.version
        )));
    }
    if header.dtype != "f64" {
        return Err(DiffError::Checkpoint(format!("unsupported dtype '{}'", header.dtype)));
    }
    if header.names.len() != header.shapes.len() || header.names.len() != header.trainable.len() {
        return Err(DiffError::Checkpoint(
            "names/shapes/trainable length mismatch".into(),
        ));
    }

    let mut tensors: Vec<Tensor> = Vec::with_capacity(header.names.len());
    for shape in &header.shapes {
        let count: usize = shape.iter().product();
        let mut buf = vec![0u8; count * 8];
        r.read_exact(&mut buf)
            .map_err(|_| DiffError::Checkpoint("truncated payload".into()))?;
        let data: Vec<f64> = buf
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push(Tensor::new(shape.clone(), data)?);
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(DiffError::Checkpoint("trailing bytes after payload".into()));
    }

    let mut store = ParamStore::new(header.rng_seed);
    let mut moments: Vec<(String, bool, Tensor)> = Vec::new();
    for ((name, trainable), tensor) in header
        .names
        .iter()
        .zip(&header.trainable)
        .zip(tensors.into_iter())
    {
        if let Some(rest) = name.strip_prefix(RESERVED_PREFIX) {
            let (kind, pname) = rest
                .split_once('/')
                .ok_or_else(|| DiffError::Checkpoint(format!("malformed moment name '{name}'")))?;
            moments.push((pname.to_string(), kind == "m", tensor));
        } else {
            store.insert(name, tensor, *trainable)?;
        }
    }

    let adam = if moments.is_empty() && header.adam.step == 0 {
        None
    } else {
        let mut state = AdamState::new(&store, header.adam.beta1, header.adam.beta2, header.adam.eps);
        state.step = header.adam.step;
        let mut pending: std::collections::HashMap<String, (Option<Tensor>, Option<Tensor>)> =
            std::collections::HashMap::new();
        for (pname, is_m, tensor) in moments {
            let slot = pending.entry(pname).or_default();
            if is_m {
                slot.0 = Some(tensor);
            } else {
                slot.1 = Some(tensor);
            }
        }
        for (pname, (m, v)) in pending {
            match (m, v) {
                (Some(m), Some(v)) => state.set_moments(&pname, m, v)?,
                _ => {
                    return Err(DiffError::Checkpoint(format!(
                        "incomplete ADAM moments for '{pname}'"
                    )))
                }
            }
        }
        Some(state)
    };

    Ok(Checkpoint {
        store,
        adam,
        meta: header.meta,
    })
}
