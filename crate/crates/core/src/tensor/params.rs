//! Named parameter storage and the binary checkpoint format.
//!
//! Checkpoint layout (all integers little-endian): magic `PTVW`, version
//! `u32`, then one record per parameter in registration order:
//! name length `u32`, UTF-8 name bytes, rank `u32`, dims `u32 x rank`,
//! payload as little-endian `f32`.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use crate::{Error, Real, Result};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"PTVW";
const CHECKPOINT_VERSION: u32 = 1;

/// Handle to a named parameter in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    /// Position in the store's registration order.
    pub fn index(&self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Arc<Vec<Real>>,
    pub trainable: bool,
}

impl ParamEntry {
    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

/// Ordered collection of named tensors; the single mutable owner of model
/// weights. Forward passes share the payloads through `Arc` clones.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, shape: &[usize], data: Vec<Real>, trainable: bool) -> ParamId {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "parameter {name}: shape/data mismatch"
        );
        assert!(
            !self.by_name.contains_key(name),
            "parameter {name} registered twice"
        );
        let id = ParamId(self.entries.len());
        self.by_name.insert(name.to_string(), id.0);
        self.entries.push(ParamEntry {
            name: name.to_string(),
            shape: shape.to_vec(),
            data: Arc::new(data),
            trainable,
        });
        id
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    pub fn values(&self, id: ParamId) -> &[Real] {
        &self.entries[id.0].data
    }

    /// Replace a parameter's payload (trainer update path).
    pub fn set_values(&mut self, id: ParamId, data: Vec<Real>) {
        assert_eq!(data.len(), self.entries[id.0].data.len());
        self.entries[id.0].data = Arc::new(data);
    }

    /// In-place mutable access; clones the payload only if a forward pass
    /// still holds a reference to it.
    pub fn values_mut(&mut self, id: ParamId) -> &mut Vec<Real> {
        Arc::make_mut(&mut self.entries[id.0].data)
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.entries[id.0].trainable = trainable;
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.numel()).sum()
    }

    /// Write every parameter to `path` in the `PTVW` format.
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let io = |e| Error::io(path, e);
        w.write_all(&CHECKPOINT_MAGIC).map_err(io)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes()).map_err(|e| Error::io(path, e))?;
        for entry in &self.entries {
            let name = entry.name.as_bytes();
            w.write_all(&(name.len() as u32).to_le_bytes()).map_err(|e| Error::io(path, e))?;
            w.write_all(name).map_err(|e| Error::io(path, e))?;
            w.write_all(&(entry.shape.len() as u32).to_le_bytes()).map_err(|e| Error::io(path, e))?;
            for &d in &entry.shape {
                w.write_all(&(d as u32).to_le_bytes()).map_err(|e| Error::io(path, e))?;
            }
            for &v in entry.data.iter() {
                w.write_all(&(v as f32).to_le_bytes()).map_err(|e| Error::io(path, e))?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    /// Load a checkpoint into this store. The checkpoint must carry exactly
    /// the parameters registered here, with matching shapes.
    pub fn restore(&mut self, path: &Path) -> Result<()> {
        let records = read_checkpoint(path)?;
        let mut seen = vec![false; self.entries.len()];
        let mut extra = Vec::new();
        for (name, shape, payload) in records {
            match self.by_name.get(&name) {
                None => extra.push(name),
                Some(&idx) => {
                    if self.entries[idx].shape != shape {
                        return Err(Error::Checkpoint(format!(
                            "parameter {name}: checkpoint shape {shape:?} does not match model shape {:?}",
                            self.entries[idx].shape
                        )));
                    }
                    self.entries[idx].data =
                        Arc::new(payload.iter().map(|&v| v as Real).collect());
                    seen[idx] = true;
                }
            }
        }
        let missing: Vec<&str> = self
            .entries
            .iter()
            .zip(&seen)
            .filter(|(_, &s)| !s)
            .map(|(e, _)| e.name.as_str())
            .collect();
        if !missing.is_empty() || !extra.is_empty() {
            return Err(Error::Checkpoint(format!(
                "checkpoint does not match model parameters; missing: [{}], extra: [{}]",
                missing.join(", "),
                extra.join(", ")
            )));
        }
        Ok(())
    }
}

/// Write arbitrary named tensors in the `PTVW` format.
pub fn write_checkpoint(path: &Path, records: &[(String, Vec<usize>, Vec<f32>)]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(&CHECKPOINT_MAGIC).map_err(|e| Error::io(path, e))?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes()).map_err(|e| Error::io(path, e))?;
    for (name, shape, payload) in records {
        let name = name.as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes()).map_err(|e| Error::io(path, e))?;
        w.write_all(name).map_err(|e| Error::io(path, e))?;
        w.write_all(&(shape.len() as u32).to_le_bytes()).map_err(|e| Error::io(path, e))?;
        for &d in shape {
            w.write_all(&(d as u32).to_le_bytes()).map_err(|e| Error::io(path, e))?;
        }
        for &v in payload {
            w.write_all(&v.to_le_bytes()).map_err(|e| Error::io(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Read every record of a `PTVW` checkpoint.
pub fn read_checkpoint(path: &Path) -> Result<Vec<(String, Vec<usize>, Vec<f32>)>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|e| Error::io(path, e))?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::data(path, format!("bad checkpoint magic {magic:?}")));
    }
    let version = read_u32(&mut r, path)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::data(path, format!("unsupported checkpoint version {version}")));
    }
    let mut records = Vec::new();
    loop {
        let mut len_buf = [0u8; 4];
        match r.read(&mut len_buf).map_err(|e| Error::io(path, e))? {
            0 => break,
            4 => {}
            n => {
                // Partial header read; try to complete it before giving up.
                let mut rest = vec![0u8; 4 - n];
                r.read_exact(&mut rest).map_err(|_| {
                    Error::data(path, "truncated record header")
                })?;
                len_buf[n..].copy_from_slice(&rest);
            }
        }
        let name_len = u32::from_le_bytes(len_buf) as usize;
        let mut name_buf = vec![0u8; name_len];
        r.read_exact(&mut name_buf).map_err(|e| Error::io(path, e))?;
        let name = String::from_utf8(name_buf)
            .map_err(|_| Error::data(path, "parameter name is not UTF-8"))?;
        let rank = read_u32(&mut r, path)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(&mut r, path)? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut payload = vec![0f32; numel];
        let mut buf = vec![0u8; numel * 4];
        r.read_exact(&mut buf).map_err(|e| Error::io(path, e))?;
        for (v, chunk) in payload.iter_mut().zip(buf.chunks_exact(4)) {
            *v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
        }
        records.push((name, shape, payload));
    }
    Ok(records)
}

fn read_u32(r: &mut impl Read, path: &Path) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf).map_err(|e| Error::io(path, e))?;
    Ok(u32::from_le_bytes(buf))
}
