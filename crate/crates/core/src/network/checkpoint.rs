use std::fs;
use std::path::Path;

use super::{ArchitectureSpec, Model};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"ALIGNCV\0";
const VERSION: u32 = 1;

/// Serialized model state: architecture text, named parameters and
/// batch-norm buffers, plus the training seed and epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub spec: ArchitectureSpec,
    pub params: Vec<(String, Tensor)>,
    pub buffers: Vec<(String, Tensor)>,
    pub seed: u64,
    pub epoch: u64,
}

impl Checkpoint {
    pub fn from_model(model: &Model, seed: u64, epoch: u64) -> Self {
        Self {
            spec: model.spec.clone(),
            params: model
                .store
                .params()
                .iter()
                .map(|p| (p.name.clone(), p.value.clone()))
                .collect(),
            buffers: model.store.buffers().to_vec(),
            seed,
            epoch,
        }
    }

    /// Rebuilds the model and copies every stored tensor into it by name.
    pub fn to_model(&self) -> Result<Model> {
        let mut model = Model::build(self.spec.clone(), self.seed)?;
        let store = &mut model.store;
        if store.params().len() != self.params.len() || store.buffers().len() != self.buffers.len() {
            return Err(Error::Checkpoint("tensor count differs from the architecture".into()));
        }
        for (name, value) in &self.params {
            let id = store
                .find(name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown parameter `{name}`")))?;
            let p = store.get_mut(id);
            if p.value.shape() != value.shape() {
                return Err(Error::Checkpoint(format!("shape mismatch for `{name}`")));
            }
            p.value = value.clone();
        }
        for (name, value) in &self.buffers {
            let id = store
                .find_buffer(name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown buffer `{name}`")))?;
            let b = store.buffer_mut(id);
            if b.shape() != value.shape() {
                return Err(Error::Checkpoint(format!("shape mismatch for `{name}`")));
            }
            *b = value.clone();
        }
        Ok(model)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let text = self.spec.to_text();
        put_u64(&mut out, text.len() as u64);
        out.extend_from_slice(text.as_bytes());
        for section in [&self.params, &self.buffers] {
            put_u64(&mut out, section.len() as u64);
            for (name, t) in section {
                put_u64(&mut out, name.len() as u64);
                out.extend_from_slice(name.as_bytes());
                put_u64(&mut out, t.rows() as u64);
                put_u64(&mut out, t.cols() as u64);
                for v in t.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        put_u64(&mut out, self.seed);
        put_u64(&mut out, self.epoch);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let len = r.u64()? as usize;
        let text = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Checkpoint("architecture text is not UTF-8".into()))?;
        let spec = ArchitectureSpec::from_text(text)?;
        let mut sections = [Vec::new(), Vec::new()];
        for section in sections.iter_mut() {
            let count = r.u64()?;
            for _ in 0..count {
                let n = r.u64()? as usize;
                let name = String::from_utf8(r.take(n)?.to_vec())
                    .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
                let rows = r.u64()? as usize;
                let cols = r.u64()? as usize;
                let count = rows
                    .checked_mul(cols)
                    .ok_or_else(|| Error::Checkpoint("tensor too large".into()))?;
                let raw = r.take(count.checked_mul(8).ok_or_else(|| Error::Checkpoint("tensor too large".into()))?)?;
                let data = raw
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect();
                section.push((name, Tensor::from_vec(rows, cols, data)?));
            }
        }
        let seed = r.u64()?;
        let epoch = r.u64()?;
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes after checkpoint".into()));
        }
        let [params, buffers] = sections;
        Ok(Self {
            spec,
            params,
            buffers,
            seed,
            epoch,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint("truncated checkpoint".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
