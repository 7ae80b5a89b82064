//! Versioned binary container for network state and optimizer moments.
//!
//! Layout: magic, format version (u32), scalar tag (u8), spec length (u32)
//! and JSON-encoded [`NetworkSpec`], then little-endian tensor groups for the
//! parameters, the batch-norm running statistics and, when present, the Adam
//! step counter and moments. Every tensor is prefixed with its length (u64).

use std::fs;
use std::path::Path;

use super::adam::{Adam, AdamConfig};
use super::network::{Network, NetworkSpec};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 8] = b"CSEGCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Checkpoint<T> {
    pub network: Network<T>,
    pub optimizer: Option<Adam<T>>,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn tensors<'a, T: Scalar>(&mut self, ts: impl ExactSizeIterator<Item = &'a [T]>) {
        self.u32(ts.len() as u32);
        for t in ts {
            self.u64(t.len() as u64);
            for &v in t {
                v.write_le(&mut self.0);
            }
        }
    }
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
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    /// Reads a tensor group whose lengths must equal `expected`.
    fn tensors<T: Scalar>(&mut self, expected: &[usize], what: &str) -> Result<Vec<Vec<T>>> {
        let n = self.u32()? as usize;
        if n != expected.len() {
            return Err(Error::Checkpoint(format!(
                "{what}: {n} tensors, expected {}",
                expected.len()
            )));
        }
        let mut out = Vec::with_capacity(n);
        for (i, &len) in expected.iter().enumerate() {
            let got = self.u64()? as usize;
            if got != len {
                return Err(Error::Checkpoint(format!(
                    "{what} tensor {i}: length {got}, expected {len}"
                )));
            }
            let raw = self.take(len * T::BYTES)?;
            out.push(raw.chunks_exact(T::BYTES).map(T::read_le).collect());
        }
        Ok(out)
    }
}

impl<T: Scalar> Checkpoint<T> {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u32(FORMAT_VERSION);
        w.u8(T::TAG);
        let spec = serde_json::to_vec(self.network.spec())?;
        w.u32(spec.len() as u32);
        w.0.extend_from_slice(&spec);
        let params = self.network.params();
        w.tensors(params.iter().map(|p| p.value.as_slice()));
        let buffers = self.network.buffers();
        w.tensors(buffers.iter().map(|b| b.as_slice()));
        match &self.optimizer {
            None => w.u8(0),
            Some(adam) => {
                w.u8(1);
                w.f64(adam.config.beta1);
                w.f64(adam.config.beta2);
                w.f64(adam.config.eps);
                w.u64(adam.step);
                w.tensors(adam.m.iter().map(Vec::as_slice));
                w.tensors(adam.v.iter().map(Vec::as_slice));
            }
        }
        Ok(w.0)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(Error::Checkpoint(
                "not a checkpoint file (bad magic)".into(),
            ));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {version}"
            )));
        }
        let tag = r.u8()?;
        if tag != T::TAG {
            return Err(Error::Checkpoint(format!(
                "scalar width mismatch: file holds {tag}-byte values, reader expects {}",
                T::TAG
            )));
        }
        let spec_len = r.u32()? as usize;
        let spec: NetworkSpec = serde_json::from_slice(r.take(spec_len)?)?;
        // Any seed works: every value is overwritten below.
        let mut network = Network::<T>::new(spec, &mut rand::rngs::mock::StepRng::new(0, 1))?;
        let param_lens: Vec<usize> = network.params().iter().map(|p| p.value.len()).collect();
        let values = r.tensors::<T>(&param_lens, "parameter")?;
        for (p, v) in network.params_mut().into_iter().zip(values) {
            p.value = v;
        }
        let buffer_lens: Vec<usize> = network.buffers().iter().map(|b| b.len()).collect();
        let buffers = r.tensors::<T>(&buffer_lens, "buffer")?;
        for (b, v) in network.buffers_mut().into_iter().zip(buffers) {
            *b = v;
        }
        let optimizer = match r.u8()? {
            0 => None,
            1 => {
                let config = AdamConfig {
                    beta1: r.f64()?,
                    beta2: r.f64()?,
                    eps: r.f64()?,
                };
                let step = r.u64()?;
                let m = r.tensors::<T>(&param_lens, "first moment")?;
                let v = r.tensors::<T>(&param_lens, "second moment")?;
                Some(Adam { config, m, v, step })
            }
            other => return Err(Error::Checkpoint(format!("invalid optimizer flag {other}"))),
        };
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        let all_finite = network
            .params()
            .iter()
            .all(|p| p.value.iter().all(|v| v.is_finite()))
            && network
                .buffers()
                .iter()
                .all(|b| b.iter().all(|v| v.is_finite()));
        if !all_finite {
            return Err(Error::Checkpoint("non-finite network state".into()));
        }
        Ok(Self { network, optimizer })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}
