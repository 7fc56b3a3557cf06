//! Binary checkpoint container for named tensors plus string metadata.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic     8 bytes  "TENCDMCK"
//! version   u32      = 1
//! n_meta    u32
//!   key     u32 length + UTF-8 bytes
//!   value   u32 length + UTF-8 bytes
//! n_tensor  u32
//!   name    u32 length + UTF-8 bytes
//!   ndim    u32
//!   dims    u64 × ndim
//!   data    f64 × product(dims)
//! ```
//!
//! Metadata is written in key order and tensors in insertion order, so
//! identical contents serialize to identical bytes.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::optim::{AdamW, AdamWConfig, OptimizerState};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"TENCDMCK";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set_meta(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.meta.insert(key.into(), value.into());
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.get(key).map(String::as_str)
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors.push((name.into(), tensor));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))
    }

    /// Adds every parameter as `{prefix}{name}`.
    pub fn add_store(&mut self, prefix: &str, store: &ParamStore) {
        for (_, name, t) in store.iter() {
            self.push(format!("{prefix}{name}"), t.clone());
        }
    }

    /// Overwrites every parameter of `store` from `{prefix}{name}` entries.
    pub fn load_store(&self, prefix: &str, store: &mut ParamStore) -> Result<()> {
        let names: Vec<String> = store.iter().map(|(_, n, _)| n.to_string()).collect();
        for name in names {
            let t = self.require(&format!("{prefix}{name}"))?.clone();
            store.set(&name, t)?;
        }
        Ok(())
    }

    /// Stores moments, EMA shadow and the step counter under `prefix`.
    pub fn add_optimizer(&mut self, prefix: &str, opt: &AdamW, store: &ParamStore) {
        let st = opt.state();
        self.set_meta(format!("{prefix}step"), st.step.to_string());
        for (_, name, _) in store.iter() {
            let i = store.id(name).unwrap().index();
            self.push(format!("{prefix}m.{name}"), st.first_moment[i].clone());
            self.push(format!("{prefix}v.{name}"), st.second_moment[i].clone());
            self.push(format!("{prefix}ema.{name}"), st.ema[i].clone());
        }
    }

    pub fn load_optimizer(&self, prefix: &str, config: AdamWConfig, store: &ParamStore) -> Result<AdamW> {
        let step = self
            .meta(&format!("{prefix}step"))
            .ok_or_else(|| Error::Checkpoint(format!("missing `{prefix}step`")))?
            .parse::<u64>()
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut state = OptimizerState {
            step,
            first_moment: Vec::new(),
            second_moment: Vec::new(),
            ema: Vec::new(),
        };
        for (_, name, _) in store.iter() {
            state.first_moment.push(self.require(&format!("{prefix}m.{name}"))?.clone());
            state.second_moment.push(self.require(&format!("{prefix}v.{name}"))?.clone());
            state.ema.push(self.require(&format!("{prefix}ema.{name}"))?.clone());
        }
        AdamW::from_state(config, state, store)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.meta.len() as u32).to_le_bytes());
        for (k, v) in &self.meta {
            put_str(&mut out, k);
            put_str(&mut out, v);
        }
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            put_str(&mut out, name);
            out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let mut ck = Checkpoint::new();
        for _ in 0..r.u32()? {
            let k = r.string()?;
            let v = r.string()?;
            ck.meta.insert(k, v);
        }
        for _ in 0..r.u32()? {
            let name = r.string()?;
            let ndim = r.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u64()? as usize);
            }
            let numel: usize = shape.iter().product();
            let raw = r.take(numel * 8)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            ck.push(name, Tensor::new(&shape, data)?);
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        Ok(ck)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
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
            .ok_or_else(|| Error::Checkpoint("truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| Error::Checkpoint(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn truncated_input_is_an_error() {
        let mut ck = Checkpoint::new();
        ck.push("w", Tensor::ones(&[2, 2]));
        let bytes = ck.to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        assert!(Checkpoint::from_bytes(b"NOTACKPT").is_err());
    }

    #[test]
    fn optimizer_state_survives() {
        let mut store = ParamStore::new();
        store.add("a", Tensor::ones(&[3])).unwrap();
        let mut opt = AdamW::new(AdamWConfig::default(), &store);
        opt.step(&mut store, Default::default()).unwrap();
        let mut ck = Checkpoint::new();
        ck.add_store("model.", &store);
        ck.add_optimizer("opt.", &opt, &store);
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        let restored = back.load_optimizer("opt.", AdamWConfig::default(), &store).unwrap();
        assert_eq!(restored.state(), opt.state());
    }
}
