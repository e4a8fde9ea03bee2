//! Model checkpoints and their `AFCK` binary encoding.
//!
//! Layout (little-endian): magic `AFCK`, version u32, descriptor length u32,
//! descriptor UTF-8 bytes, parameter count u64, params f32[count],
//! m f32[count], v f32[count], t u64, seed u64.

use std::path::Path;

use super::adam::{AdamConfig, AdamState};
use super::network::Network;
use super::spec::NetworkSpec;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"AFCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelCheckpoint {
    pub spec: NetworkSpec,
    pub params: Vec<f32>,
    pub adam: AdamState<f32>,
    pub seed: u64,
}

impl ModelCheckpoint {
    /// Freshly initialised network.
    pub fn init(spec: NetworkSpec, seed: u64) -> Result<Self> {
        let net = Network::<f32>::init(spec, seed)?;
        Ok(Self::from_network(&net, AdamState::new(net.param_count()), seed))
    }

    pub fn from_network<T: Scalar>(net: &Network<T>, adam: AdamState<f32>, seed: u64) -> Self {
        ModelCheckpoint {
            spec: net.spec().clone(),
            params: net.params().iter().map(|v| v.to_f32().unwrap()).collect(),
            adam,
            seed,
        }
    }

    pub fn network<T: Scalar>(&self) -> Result<Network<T>> {
        Network::from_params(
            self.spec.clone(),
            self.params.iter().map(|&v| T::from(v).unwrap()).collect(),
        )
    }

    pub fn adam_step(&mut self, grads: &[f32], cfg: &AdamConfig) -> Result<()> {
        self.adam.step(&mut self.params, grads, cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.spec.param_count()?;
        if self.params.len() != n || self.adam.m.len() != n || self.adam.v.len() != n {
            return Err(Error::invalid(format!(
                "checkpoint vectors ({}, {}, {}) do not match {n} parameters",
                self.params.len(),
                self.adam.m.len(),
                self.adam.v.len()
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let desc = self.spec.to_string();
        let n = self.params.len();
        let mut out = Vec::with_capacity(32 + desc.len() + 12 * n);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(desc.len() as u32).to_le_bytes());
        out.extend_from_slice(desc.as_bytes());
        out.extend_from_slice(&(n as u64).to_le_bytes());
        for v in self.params.iter().chain(&self.adam.m).chain(&self.adam.v) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&self.adam.t.to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, origin };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::format(origin, "bad checkpoint magic"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::format(origin, format!("unsupported checkpoint version {version}")));
        }
        let dlen = r.u32()? as usize;
        let desc = std::str::from_utf8(r.take(dlen)?)
            .map_err(|_| Error::format(origin, "descriptor is not UTF-8"))?;
        let spec: NetworkSpec = desc
            .parse()
            .map_err(|e| Error::format(origin, format!("bad descriptor: {e}")))?;
        let n = r.u64()? as usize;
        let mut vecs = Vec::with_capacity(3);
        for _ in 0..3 {
            let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::format(origin, "count overflow"))?)?;
            vecs.push(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect::<Vec<_>>());
        }
        let t = r.u64()?;
        let seed = r.u64()?;
        if r.pos != bytes.len() {
            return Err(Error::format(origin, "trailing bytes after checkpoint"));
        }
        let v = vecs.pop().unwrap();
        let m = vecs.pop().unwrap();
        let params = vecs.pop().unwrap();
        let ck = ModelCheckpoint { spec, params, adam: AdamState { m, v, t }, seed };
        ck.validate().map_err(|e| Error::format(origin, e.to_string()))?;
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    origin: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::format(self.origin, "truncated checkpoint"))?;
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
}
