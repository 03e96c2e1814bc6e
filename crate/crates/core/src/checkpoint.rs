//! Named-tensor archives for model checkpoints, stored in the versioned container.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::container::{self, pack};
use crate::error::{Error, Result};
use crate::nn::{AdamW, Matrix, ParamStore};

pub const CHECKPOINT_FORMAT_VERSION: &str = "v1";
const MAGIC: &[u8; 4] = b"MLCK";

#[derive(Serialize, Deserialize)]
struct Header {
    kind: String,
    meta: serde_json::Value,
    tensors: Vec<(String, usize, usize)>,
}

/// A bag of named matrices plus free-form JSON metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Archive {
    pub kind: String,
    pub meta: serde_json::Value,
    tensors: Vec<(String, Matrix)>,
}

impl Archive {
    pub fn new(kind: &str, meta: serde_json::Value) -> Self {
        Self { kind: kind.to_string(), meta, tensors: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, value: Matrix) {
        self.tensors.push((name.into(), value));
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, m)| m)
    }

    pub fn push_store(&mut self, prefix: &str, store: &ParamStore) {
        for e in store.entries() {
            self.push(format!("{prefix}/{}", e.name), e.value.clone());
        }
    }

    /// Overwrites every parameter of `store` from the archive; names and shapes must match.
    pub fn restore_store(&self, prefix: &str, store: &mut ParamStore) -> Result<()> {
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let name = format!("{prefix}/{}", store.entry(id).name);
            let value = self.get(&name).ok_or_else(|| Error::Shape(format!("checkpoint lacks tensor {name}")))?;
            if value.shape() != store.get(id).shape() {
                return Err(Error::Shape(format!("tensor {name} has shape {:?}", value.shape())));
            }
            *store.get_mut(id) = value.clone();
        }
        Ok(())
    }

    pub fn push_optimizer(&mut self, prefix: &str, opt: &AdamW) {
        let (m, v) = opt.moments();
        for (i, (a, b)) in m.iter().zip(v).enumerate() {
            self.push(format!("{prefix}/m{i}"), a.clone());
            self.push(format!("{prefix}/v{i}"), b.clone());
        }
    }

    pub fn restore_optimizer(&self, prefix: &str, opt: &mut AdamW) -> Result<()> {
        let n = opt.moments().0.len();
        let fetch = |tag: &str, i: usize| {
            self.get(&format!("{prefix}/{tag}{i}"))
                .cloned()
                .ok_or_else(|| Error::Shape(format!("checkpoint lacks optimizer state {prefix}/{tag}{i}")))
        };
        let m = (0..n).map(|i| fetch("m", i)).collect::<Result<Vec<_>>>()?;
        let v = (0..n).map(|i| fetch("v", i)).collect::<Result<Vec<_>>>()?;
        opt.restore_moments(m, v)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let header = Header {
            kind: self.kind.clone(),
            meta: self.meta.clone(),
            tensors: self.tensors.iter().map(|(n, m)| (n.clone(), m.rows, m.cols)).collect(),
        };
        let header = serde_json::to_string(&header).map_err(|e| Error::json(path, e))?;
        let mut payload = Vec::new();
        for (_, m) in &self.tensors {
            pack::put_f64s(&mut payload, m.data.iter().copied());
        }
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        container::write(path, MAGIC, CHECKPOINT_FORMAT_VERSION, &header, &payload)
    }

    pub fn read(path: &Path, expected_kind: &str) -> Result<Self> {
        if !path.exists() {
            return Err(Error::Missing { what: "checkpoint", path: path.to_path_buf() });
        }
        let c = container::read(path, MAGIC, CHECKPOINT_FORMAT_VERSION)?;
        let header: Header = serde_json::from_str(&c.header).map_err(|e| Error::json(path, e))?;
        let bad = |reason: String| Error::Integrity { path: path.to_path_buf(), reason };
        if header.kind != expected_kind {
            return Err(bad(format!("expected a {expected_kind} checkpoint, found {}", header.kind)));
        }
        let mut r = pack::Reader::new(&c.payload);
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for (name, rows, cols) in header.tensors {
            let data = r.f64s(rows * cols).ok_or_else(|| bad(format!("short data for {name}")))?;
            tensors.push((name, Matrix::from_vec(rows, cols, data)));
        }
        if !r.is_done() {
            return Err(bad("unexpected trailing payload".into()));
        }
        Ok(Self { kind: header.kind, meta: header.meta, tensors })
    }
}
